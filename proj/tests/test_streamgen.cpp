#include <doctest.h>

#include <filesystem>
#include <set>

#include "oclearn/streamgen.hpp"
#include "support/oracles.hpp"

using namespace oclearn;

namespace {

bool same_examples(const std::vector<LabeledExample>& a, const std::vector<LabeledExample>& b)
{
    if (a.size() != b.size()) return false;
    for (std::size_t i = 0; i < a.size(); ++i) {
        if (a[i].id != b[i].id || a[i].label != b[i].label || a[i].features != b[i].features) return false;
    }
    return true;
}

std::vector<double> label_histogram(Stream& stream, std::size_t batches, std::size_t k, int classes)
{
    std::vector<double> counts(static_cast<std::size_t>(classes), 0.0);
    for (std::size_t b = 0; b < batches; ++b)
        for (const auto& ex : stream.next_batch(k)) counts[ex.label] += 1.0;
    return counts;
}

} // namespace

TEST_SUITE("streamgen") {

TEST_CASE("same seed gives byte-identical batches")
{
    Stream a(default_stream_config(7));
    Stream b(default_stream_config(7));
    for (int i = 0; i < 100; ++i) REQUIRE(same_examples(a.next_batch(10), b.next_batch(10)));

    Stream c(default_stream_config(8));
    Stream d(default_stream_config(7));
    CHECK_FALSE(same_examples(c.next_batch(10), d.next_batch(10)));
}

TEST_CASE("batch sizes")
{
    Stream s(default_stream_config());
    CHECK(s.next_batch(0).empty());
    const auto batch = s.next_batch(10);
    CHECK(batch.size() == 10);
    for (const auto& ex : batch) {
        CHECK(ex.features.size() == 16);
        CHECK(ex.features.allFinite());
        CHECK(ex.label >= 0);
        CHECK(ex.label < 6);
    }
}

TEST_CASE("ids are unique across the run")
{
    Stream s(default_stream_config(3));
    std::set<std::int64_t> ids;
    for (int b = 0; b < 500; ++b)
        for (const auto& ex : s.next_batch(10)) CHECK(ids.insert(ex.id).second);
}

TEST_CASE("config validation")
{
    StreamConfig good = make_stream_config(StreamGeometry{}, 0, {0.45, 0.30, 0.10, 0.08, 0.05, 0.02});
    CHECK_NOTHROW(Stream{good});

    StreamConfig bad = good;
    bad.class_priors[0] = {0.40, 0.20, 0.10, 0.10, 0.05, 0.05};  // sums to 0.9
    CHECK_THROWS_AS(Stream{bad}, ConfigError);

    bad = good;
    bad.task_lengths[1] = 0;
    CHECK_THROWS_AS(Stream{bad}, ConfigError);

    bad = good;
    bad.task_means[2].pop_back();
    CHECK_THROWS_AS(Stream{bad}, ConfigError);

    bad = good;
    bad.noise_scale = 0.0;
    CHECK_THROWS_AS(Stream{bad}, ConfigError);

    bad = good;
    bad.class_priors[0][0] = -0.1;
    bad.class_priors[0][1] = 0.5;
    CHECK_THROWS_AS(Stream{bad}, ConfigError);
}

TEST_CASE("default stream is long-tailed in every task")
{
    const StreamConfig config = default_stream_config();
    REQUIRE(config.num_tasks() == 4);
    for (const auto& priors : config.class_priors) {
        const auto [lo, hi] = std::minmax_element(priors.begin(), priors.end());
        CHECK(*hi >= 10.0 * *lo);
    }
    // The head class moves between tasks.
    CHECK(argmax(Eigen::Map<const Eigen::VectorXd>(config.class_priors[0].data(), 6)) !=
          argmax(Eigen::Map<const Eigen::VectorXd>(config.class_priors[1].data(), 6)));
}

TEST_CASE("label frequencies match the active task's priors (chi-square)")
{
    for (const std::vector<double>& priors :
         {default_class_priors(), std::vector<double>{0.45, 0.30, 0.10, 0.08, 0.05, 0.02}}) {
        const StreamConfig config = make_stream_config(StreamGeometry{}, 11, priors);
        Stream stream(config);
        const auto task0 = label_histogram(stream, 1000, 10, 6);
        std::vector<double> expected;
        for (double p : config.class_priors[0]) expected.push_back(p * 10000.0);
        CHECK(oracle::chi_square_p(task0, expected) > 0.01);

        const auto task1 = label_histogram(stream, 1000, 10, 6);
        expected.clear();
        for (double p : config.class_priors[1]) expected.push_back(p * 10000.0);
        CHECK(oracle::chi_square_p(task1, expected) > 0.01);
    }
}

TEST_CASE("task switches silently and the last task continues")
{
    const StreamConfig config = default_stream_config();
    CHECK(task_at(config, 0) == 0);
    CHECK(task_at(config, 999) == 0);
    CHECK(task_at(config, 1000) == 1);
    CHECK(task_at(config, 3999) == 3);
    CHECK(task_at(config, 1'000'000) == 3);

    Stream s(config);
    for (int i = 0; i < 5000; ++i) s.next_batch(1);
    CHECK(s.iteration() == 5000);
    CHECK(s.next_batch(3).size() == 3);
}

TEST_CASE("features are centred on the task means")
{
    StreamConfig config = default_stream_config(5);
    config.class_priors[0] = {1.0, 0.0, 0.0, 0.0, 0.0, 0.0};
    config.task_lengths[0] = 4000;
    Stream s(config);
    Vector sum = Vector::Zero(16);
    const int n = 4000;
    for (int i = 0; i < n; ++i) sum += s.next_batch(1).front().features;
    const Vector mean = sum / n;
    // Standard error per coordinate is 1/sqrt(4000) ~ 0.016.
    CHECK((mean - config.task_means[0][0]).cwiseAbs().maxCoeff() < 0.08);
}

TEST_CASE("gradual drift blends means")
{
    StreamConfig config = default_stream_config();
    config.drift_width = 100;
    for (auto& p : config.class_priors) p = {1.0, 0.0, 0.0, 0.0, 0.0, 0.0};
    config.noise_scale = 1e-9;
    Stream s(config);
    for (int i = 0; i < 1000; ++i) s.next_batch(1);
    const Vector first = s.next_batch(1).front().features;  // batch 1000: 1/101 into the blend
    const Vector& from = config.task_means[0][0];
    const Vector& to = config.task_means[1][0];
    const Vector expected = from + (to - from) / 101.0;
    CHECK((first - expected).norm() < 1e-6);
    for (int i = 0; i < 200; ++i) s.next_batch(1);
    CHECK((s.next_batch(1).front().features - to).norm() < 1e-6);
}

TEST_CASE("holdout sets")
{
    const StreamConfig config = default_stream_config(2);
    const auto h = holdout_set(config, 0, 50);
    CHECK(h.size() == 300);
    std::vector<int> per_class(6, 0);
    for (const auto& ex : h) ++per_class[ex.label];
    for (int c : per_class) CHECK(c == 50);

    CHECK(holdout_set(config, 1, 0).empty());
    CHECK_THROWS_AS(holdout_set(config, 4, 10), std::out_of_range);
    CHECK_THROWS_AS(holdout_set(config, -1, 10), std::out_of_range);

    CHECK(same_examples(holdout_set(config, 2, 20), holdout_set(config, 2, 20)));

    // Ids never collide with the stream or with other tasks' holdouts.
    std::set<std::int64_t> ids;
    for (int t = 0; t < 4; ++t)
        for (const auto& ex : holdout_set(config, t, 20)) CHECK(ids.insert(ex.id).second);
    Stream s(config);
    for (int b = 0; b < 200; ++b)
        for (const auto& ex : s.next_batch(10)) CHECK(ids.count(ex.id) == 0);
}

TEST_CASE("single tasks are linearly separable and tasks are distribution-distinct")
{
    const StreamConfig train_cfg = default_stream_config(100);
    StreamConfig test_cfg = train_cfg;
    test_cfg.seed = 200;  // fresh draws from the same distributions
    std::vector<double> own;
    for (int t = 0; t < train_cfg.num_tasks(); ++t) {
        const oracle::LinearProbe probe(holdout_set(train_cfg, t, 150), 6);
        own.push_back(probe.accuracy(holdout_set(test_cfg, t, 150)));
        CHECK(own.back() >= 0.95);
    }
    const oracle::LinearProbe probe0(holdout_set(train_cfg, 0, 150), 6);
    CHECK(probe0.accuracy(holdout_set(test_cfg, 1, 150)) < own[0]);
}

TEST_CASE("CSV export round-trips")
{
    const auto h = holdout_set(default_stream_config(), 1, 5);
    const auto path = std::filesystem::temp_directory_path() / "oclearn_holdout_test.csv";
    write_examples_csv(path, h);
    const auto back = read_examples_csv(path);
    CHECK(same_examples(h, back));
    std::filesystem::remove(path);
}

TEST_CASE("stack_features rejects ragged input")
{
    std::vector<LabeledExample> v = {{0, Vector::Zero(3), 0}, {1, Vector::Zero(4), 0}};
    CHECK_THROWS_AS(stack_features(v), ShapeError);
    CHECK(stack_features(std::vector<LabeledExample>{}).size() == 0);
}

}
