#include <doctest.h>

#include <cmath>

#include "oclearn/losses.hpp"
#include "support/oracles.hpp"

using namespace oclearn;

namespace {

Matrix random_matrix(std::mt19937_64& engine, Eigen::Index r, Eigen::Index c, double scale = 1.0)
{
    std::normal_distribution<double> normal(0.0, scale);
    Matrix m(r, c);
    for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = normal(engine);
    return m;
}

std::vector<int> random_labels(std::mt19937_64& engine, std::size_t n, int classes)
{
    std::uniform_int_distribution<int> pick(0, classes - 1);
    std::vector<int> y(n);
    for (auto& v : y) v = pick(engine);
    return y;
}

} // namespace

TEST_SUITE("losses") {

TEST_CASE("contrastive loss examples")
{
    Matrix z(2, 3);
    z << 0.3, -1.0, 2.0, 0.3, -1.0, 2.0;
    CHECK(contrastive_loss(z, std::vector<int>{1, 1}, 1.0).value == 0.0);

    Matrix far(2, 2);
    far << 0.0, 0.0, 1.0, 0.5;
    CHECK(contrastive_loss(far, std::vector<int>{0, 1}, 1.0).value == 0.0);

    Matrix near(2, 2);
    near << 0.0, 0.0, 0.3, 0.4;  // d = 0.5
    CHECK(contrastive_loss(near, std::vector<int>{0, 1}, 1.0).value == doctest::Approx(0.25).epsilon(1e-12));

    const Matrix single = Matrix::Ones(1, 3);
    const LossOutput degenerate = contrastive_loss(single, std::vector<int>{0}, 1.0);
    CHECK(degenerate.value == 0.0);
    CHECK(degenerate.grad_embeddings->cwiseAbs().maxCoeff() == 0.0);
}

TEST_CASE("contrastive and supcon agree with brute force")
{
    std::mt19937_64 e(1);
    for (int trial = 0; trial < 20; ++trial) {
        const Matrix z = random_matrix(e, 8, 5, 0.6);
        const auto y = random_labels(e, 8, 3);
        CHECK(contrastive_loss(z, y, 1.0).value == doctest::Approx(oracle::contrastive(z, y, 1.0)).epsilon(1e-12));
        CHECK(supcon_loss(z, y, 0.1).value == doctest::Approx(oracle::supcon(z, y, 0.1)).epsilon(1e-10));
    }
}

TEST_CASE("supcon examples")
{
    std::mt19937_64 e(2);
    CHECK(supcon_loss(random_matrix(e, 2, 4), std::vector<int>{3, 3}, 0.1).value == doctest::Approx(0.0));

    Matrix z(3, 2);
    z << 1.0, 0.0, 0.6, 0.8, -1.0, 0.2;
    const std::vector<int> y = {0, 0, 1};
    CHECK(supcon_loss(z, y, 0.1).value == doctest::Approx(oracle::supcon(z, y, 0.1)).epsilon(1e-12));

    const LossOutput none = supcon_loss(random_matrix(e, 4, 3), std::vector<int>{0, 1, 2, 3}, 0.1);
    CHECK(none.value == 0.0);
    CHECK(none.grad_embeddings->cwiseAbs().maxCoeff() == 0.0);
}

TEST_CASE("supcon is invariant to positive rescaling")
{
    std::mt19937_64 e(3);
    for (int trial = 0; trial < 10; ++trial) {
        const Matrix z = random_matrix(e, 6, 4);
        const auto y = random_labels(e, 6, 2);
        const double base = supcon_loss(z, y, 0.1).value;
        for (double c : {0.01, 0.5, 3.0, 1000.0}) CHECK(std::abs(supcon_loss(Matrix(c * z), y, 0.1).value - base) < 1e-9);
    }
}

TEST_CASE("dml loss composition")
{
    std::mt19937_64 e(4);
    const Matrix z = random_matrix(e, 7, 4);
    const auto y = random_labels(e, 7, 3);
    LossConfig cfg;

    cfg.alpha_dml = 0.0;
    cfg.beta_dml = 0.0;
    const LossOutput zero = dml_loss(z, y, cfg);
    CHECK(zero.value == 0.0);
    CHECK(zero.grad_embeddings->cwiseAbs().maxCoeff() == 0.0);

    cfg.alpha_dml = 1.0;
    const LossOutput only = dml_loss(z, y, cfg);
    const LossOutput ref = contrastive_loss(z, y, cfg.margin);
    CHECK(std::abs(only.value - ref.value) < 1e-12);
    CHECK((*only.grad_embeddings - *ref.grad_embeddings).cwiseAbs().maxCoeff() < 1e-12);

    cfg.alpha_dml = 0.3;
    cfg.beta_dml = 0.1;
    const double one = dml_loss(z, y, cfg).value;
    CHECK(one == doctest::Approx(0.3 * ref.value + 0.1 * supcon_loss(z, y, cfg.supcon_temp).value).epsilon(1e-12));
    cfg.alpha_dml = 0.6;
    cfg.beta_dml = 0.2;
    CHECK(dml_loss(z, y, cfg).value == doctest::Approx(2.0 * one).epsilon(1e-12));
}

TEST_CASE("soft labels")
{
    RowVector l(2);
    l << 1.0, 0.0;
    const RowVector s = soft_labels(l, 0.5);
    CHECK(std::abs(s(0) - 0.8808) <= 1e-4);
    CHECK(std::abs(s(1) - 0.1192) <= 1e-4);
    CHECK(s(0) == doctest::Approx(1.0 / (1.0 + std::exp(-2.0))).epsilon(1e-14));

    const RowVector flat = soft_labels(RowVector(RowVector::Constant(6, 3.7)), 0.5);
    for (Eigen::Index i = 0; i < 6; ++i) CHECK(flat(i) == doctest::Approx(1.0 / 6.0));

    std::mt19937_64 e(5);
    for (double scale : {1.0, 100.0, 1e6}) {
        const Matrix s2 = soft_labels(random_matrix(e, 10, 6, scale), 0.5);
        for (Eigen::Index i = 0; i < s2.rows(); ++i) {
            CHECK(std::abs(s2.row(i).sum() - 1.0) < 1e-9);
            CHECK(s2.row(i).minCoeff() >= 0.0);
            CHECK(s2.row(i).allFinite());
        }
    }
}

TEST_CASE("class-balanced weight")
{
    CHECK(class_balanced_weight(1, 0.81) == 1.0);
    CHECK(class_balanced_weight(10, 0.81) == doctest::Approx(0.2163).epsilon(1e-3));
    CHECK(class_balanced_weight(10, 0.81) == doctest::Approx(0.19 / (1.0 - std::pow(0.81, 10))).epsilon(1e-14));
    CHECK(class_balanced_weight(7, 0.0) == 1.0);
    CHECK(class_balanced_weight(5, 0.81) < class_balanced_weight(2, 0.81));
    CHECK(class_counts(std::vector<int>{0, 2, 2, 5}, 6) == std::vector<int>{1, 0, 2, 0, 0, 1});
}

TEST_CASE("cb focal reduces to cross-entropy")
{
    LossConfig cfg;
    cfg.focal_alpha = 1.0;
    cfg.focal_gamma = 0.0;
    cfg.cb_beta = 0.0;
    std::mt19937_64 e(6);
    for (int trial = 0; trial < 20; ++trial) {
        const Matrix l = random_matrix(e, 8, 6, 2.0);
        const auto y = random_labels(e, 8, 6);
        CHECK(std::abs(cb_focal_loss(l, y, class_counts(y, 6), cfg).value - oracle::cross_entropy(l, y)) < 1e-10);
    }
    const Matrix half = Matrix::Zero(1, 2);
    CHECK(cb_focal_loss(half, std::vector<int>{0}, std::vector<int>{1, 0}, cfg).value ==
          doctest::Approx(std::log(2.0)).epsilon(1e-12));
}

TEST_CASE("cb focal weighting and focusing")
{
    LossConfig cfg;
    cfg.focal_gamma = 2.0;
    Matrix l(1, 3);
    l << 2.0, 0.5, -1.0;
    const auto p = oracle::softmax({2.0, 0.5, -1.0});
    const std::vector<int> counts = {4, 0, 0};
    const double expected =
        -cfg.focal_alpha * class_balanced_weight(4, cfg.cb_beta) * std::pow(1.0 - p[0], 2.0) * std::log(p[0]);
    CHECK(cb_focal_loss(l, std::vector<int>{0}, counts, cfg).value == doctest::Approx(expected).epsilon(1e-12));

    // A label with no count is a caller error.
    CHECK_THROWS(cb_focal_loss(l, std::vector<int>{1}, counts, cfg));
    CHECK_THROWS_AS(cb_focal_loss(l, std::vector<int>{0, 1}, counts, cfg), ShapeError);
}

TEST_CASE("kl retrospection")
{
    LossConfig cfg;
    std::mt19937_64 e(7);
    const Matrix l = random_matrix(e, 4, 6);
    const LossOutput same = kl_retrospection(l, soft_labels(l, cfg.tau), cfg);
    CHECK(std::abs(same.value) < 1e-12);
    CHECK(same.grad_logits->cwiseAbs().maxCoeff() < 1e-12);

    LossConfig plain = cfg;
    plain.tau = 1.0;
    Matrix s(1, 2);
    s << 1.0, 0.0;
    CHECK(kl_retrospection(Matrix::Zero(1, 2), s, plain).value == doctest::Approx(std::log(2.0)).epsilon(1e-12));

    for (auto dir : {KlDirection::Forward, KlDirection::Reverse}) {
        LossConfig c = cfg;
        c.kl_direction = dir;
        for (int trial = 0; trial < 50; ++trial) {
            const Matrix a = random_matrix(e, 3, 6, 2.0);
            const Matrix t = soft_labels(random_matrix(e, 3, 6, 2.0), 1.0);
            CHECK(kl_retrospection(a, t, c).value > 0.0);
        }
        CHECK(std::abs(kl_retrospection(l, soft_labels(l, c.tau), c).value) < 1e-12);
    }
    CHECK(kl_retrospection(Matrix(0, 6), Matrix(0, 6), cfg).value == 0.0);
    CHECK_THROWS_AS(kl_retrospection(l, Matrix::Zero(3, 6), cfg), ShapeError);
}

TEST_CASE("delta schedule")
{
    LossConfig cfg;
    CHECK(delta_at(cfg, 0) == 0.0);
    CHECK(delta_at(cfg, 499) == 0.0);
    CHECK(delta_at(cfg, 500) == 0.5);
    CHECK(delta_at(cfg, 1499) == 0.5);
    CHECK(delta_at(cfg, 1500) == 1.0);
    CHECK(delta_at(cfg, 100000) == 1.0);
    cfg.delta_schedule = {{200, 0.25}};
    CHECK(delta_at(cfg, 0) == 0.0);
    CHECK(delta_at(cfg, 200) == 0.25);
}

TEST_CASE("cls loss composition")
{
    LossConfig cfg;
    cfg.gamma_cls = 1.7;
    std::mt19937_64 e(8);
    const Matrix l = random_matrix(e, 8, 6);
    const auto y = random_labels(e, 8, 6);
    const auto counts = class_counts(y, 6);
    const std::vector<std::uint8_t> mask = {0, 0, 0, 0, 0, 1, 1, 1};
    const Matrix targets = soft_labels(random_matrix(e, 8, 6), cfg.tau);

    const double focal = cb_focal_loss(l, y, counts, cfg).value;
    CHECK(std::abs(cls_loss(l, y, mask, targets, counts, 0, cfg).value - cfg.gamma_cls * focal) < 1e-12);

    const auto parts = cls_loss_parts(l, y, mask, targets, counts, 1500, cfg);
    CHECK(parts.delta == 1.0);
    Matrix mem_l(3, 6), mem_t(3, 6);
    for (int r = 0; r < 3; ++r) {
        mem_l.row(r) = l.row(5 + r);
        mem_t.row(r) = targets.row(5 + r);
    }
    CHECK(parts.kl == doctest::Approx(kl_retrospection(mem_l, mem_t, cfg).value).epsilon(1e-12));
    CHECK(parts.total.value == doctest::Approx(cfg.gamma_cls * focal + parts.kl).epsilon(1e-12));

    // Stream rows' soft targets are ignored entirely.
    Matrix other = targets;
    other.topRows(5).setConstant(123.0);
    CHECK(cls_loss(l, y, mask, other, counts, 1500, cfg).value == parts.total.value);

    // No memory rows: KL contributes nothing whatever delta is.
    const std::vector<std::uint8_t> none(8, 0);
    CHECK(cls_loss(l, y, none, Matrix(), counts, 3000, cfg).value == doctest::Approx(cfg.gamma_cls * focal));
}

TEST_CASE("every loss gradient matches finite differences")
{
    std::mt19937_64 e(9);
    LossConfig cfg;
    cfg.focal_gamma = 1.5;  // exercise the focusing term as well
    for (int trial = 0; trial < 10; ++trial) {
        const auto n = static_cast<Eigen::Index>(2 + trial % 7);
        const auto y = random_labels(e, static_cast<std::size_t>(n), 6);
        const auto counts = class_counts(y, 6);
        const Matrix z = random_matrix(e, n, 8, 0.7);
        const Matrix l = random_matrix(e, n, 6, 1.5);
        std::vector<std::uint8_t> mask(static_cast<std::size_t>(n));
        for (Eigen::Index i = 0; i < n; ++i) mask[i] = i % 2;
        const Matrix t = soft_labels(random_matrix(e, n, 6), cfg.tau);

        auto check = [&](auto value_fn, const Matrix& analytic, const Matrix& at) {
            CHECK(oracle::max_relative_error(analytic, oracle::fd_gradient(value_fn, at)) < 1e-6);
        };
        check([&](const Matrix& m) { return contrastive_loss(m, y, cfg.margin).value; },
              *contrastive_loss(z, y, cfg.margin).grad_embeddings, z);
        check([&](const Matrix& m) { return supcon_loss(m, y, cfg.supcon_temp).value; },
              *supcon_loss(z, y, cfg.supcon_temp).grad_embeddings, z);
        check([&](const Matrix& m) { return dml_loss(m, y, cfg).value; }, *dml_loss(z, y, cfg).grad_embeddings, z);
        check([&](const Matrix& m) { return cb_focal_loss(m, y, counts, cfg).value; },
              *cb_focal_loss(l, y, counts, cfg).grad_logits, l);
        for (auto dir : {KlDirection::Forward, KlDirection::Reverse}) {
            LossConfig c = cfg;
            c.kl_direction = dir;
            check([&](const Matrix& m) { return kl_retrospection(m, t, c).value; },
                  *kl_retrospection(l, t, c).grad_logits, l);
        }
        check([&](const Matrix& m) { return cls_loss(m, y, mask, t, counts, 2000, cfg).value; },
              *cls_loss(l, y, mask, t, counts, 2000, cfg).grad_logits, l);
    }
}

TEST_CASE("loss config validation")
{
    LossConfig c;
    CHECK_NOTHROW(c.validate());
    c.tau = 0.0;
    CHECK_THROWS_AS(c.validate(), ConfigError);
    c = LossConfig{};
    c.cb_beta = 1.0;
    CHECK_THROWS_AS(c.validate(), ConfigError);
    c = LossConfig{};
    c.delta_schedule = {{0, 0.0}, {0, 0.5}};
    CHECK_THROWS_AS(c.validate(), ConfigError);
    c.delta_schedule = {{0, 0.5}, {10, 0.2}};
    CHECK_THROWS_AS(c.validate(), ConfigError);
    c = LossConfig{};
    c.margin = -1.0;
    CHECK_THROWS_AS(c.validate(), ConfigError);
}

}
