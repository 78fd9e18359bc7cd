#include "oclearn/losses.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

#include <spdlog/spdlog.h>

namespace oclearn {

namespace {

void check_labels(const Matrix& m, std::span<const int> labels, const char* op)
{
    if (static_cast<std::size_t>(m.rows()) != labels.size()) {
        std::ostringstream msg;
        msg << op << ": " << m.rows() << " rows but " << labels.size() << " labels";
        throw ShapeError(msg.str());
    }
}

RowVector log_softmax_row(const Eigen::Ref<const RowVector>& logits, double temperature)
{
    RowVector scaled = logits / temperature;
    const double mx = scaled.maxCoeff();
    const double lse = mx + std::log((scaled.array() - mx).exp().sum());
    return scaled.array() - lse;
}

} // namespace

void LossConfig::validate() const
{
    if (!(margin > 0.0)) throw ConfigError("loss: margin must be positive");
    if (!(supcon_temp > 0.0)) throw ConfigError("loss: supcon_temp must be positive");
    if (!(tau > 0.0)) throw ConfigError("loss: tau must be positive");
    if (!(cb_beta >= 0.0 && cb_beta < 1.0)) throw ConfigError("loss: cb_beta must lie in [0, 1)");
    if (focal_gamma < 0.0) throw ConfigError("loss: focal_gamma must be non-negative");
    for (std::size_t i = 1; i < delta_schedule.size(); ++i) {
        if (delta_schedule[i].first <= delta_schedule[i - 1].first)
            throw ConfigError("loss: delta milestones must be strictly increasing");
        if (delta_schedule[i].second < delta_schedule[i - 1].second)
            throw ConfigError("loss: delta values must be non-decreasing");
    }
}

LossOutput contrastive_loss(const Matrix& embeddings, std::span<const int> labels, double margin)
{
    check_labels(embeddings, labels, "contrastive_loss");
    const auto n = embeddings.rows();
    LossOutput out;
    out.grad_embeddings = Matrix::Zero(n, embeddings.cols());
    if (n < 2) {
        spdlog::debug("contrastive_loss: batch of {} has no pairs", n);
        return out;
    }
    std::size_t positives = 0;
    std::size_t negatives = 0;
    for (Eigen::Index i = 0; i < n; ++i)
        for (Eigen::Index j = i + 1; j < n; ++j) (labels[i] == labels[j] ? positives : negatives)++;

    Matrix& grad = *out.grad_embeddings;
    double pos_sum = 0.0;
    double neg_sum = 0.0;
    for (Eigen::Index i = 0; i < n; ++i) {
        for (Eigen::Index j = i + 1; j < n; ++j) {
            const RowVector diff = embeddings.row(i) - embeddings.row(j);
            if (labels[i] == labels[j]) {
                pos_sum += diff.squaredNorm();
                const RowVector g = (2.0 / static_cast<double>(positives)) * diff;
                grad.row(i) += g;
                grad.row(j) -= g;
                continue;
            }
            const double d = diff.norm();
            if (d >= margin) continue;
            const double gap = margin - d;
            neg_sum += gap * gap;
            // d/dz_i (m - d)^2 = -2 (m - d) (z_i - z_j) / d; zero at the singular point d = 0
            if (d > 1e-12) {
                const RowVector g = (-2.0 * gap / (d * static_cast<double>(negatives))) * diff;
                grad.row(i) += g;
                grad.row(j) -= g;
            }
        }
    }
    if (positives) out.value += pos_sum / static_cast<double>(positives);
    if (negatives) out.value += neg_sum / static_cast<double>(negatives);
    return out;
}

LossOutput supcon_loss(const Matrix& embeddings, std::span<const int> labels, double temperature)
{
    check_labels(embeddings, labels, "supcon_loss");
    const auto n = embeddings.rows();
    LossOutput out;
    out.grad_embeddings = Matrix::Zero(n, embeddings.cols());
    if (n < 2) {
        spdlog::debug("supcon_loss: batch of {} has no pairs", n);
        return out;
    }

    Vector norms = embeddings.rowwise().norm();
    norms = norms.cwiseMax(1e-12);
    const Matrix unit = norms.cwiseInverse().asDiagonal() * embeddings;
    const Matrix sim = unit * unit.transpose() / temperature;

    std::vector<int> positives(n, 0);
    Eigen::Index anchors = 0;
    for (Eigen::Index i = 0; i < n; ++i) {
        for (Eigen::Index j = 0; j < n; ++j)
            if (j != i && labels[j] == labels[i]) ++positives[i];
        if (positives[i] > 0) ++anchors;
    }
    if (anchors == 0) {
        spdlog::debug("supcon_loss: no anchor in a batch of {} has a positive", n);
        return out;
    }
    if (anchors < n) spdlog::debug("supcon_loss: {} of {} anchors have no positive", n - anchors, n);

    // dsim(i, a) = d loss / d sim(i, a)
    Matrix dsim = Matrix::Zero(n, n);
    const double inv_anchors = 1.0 / static_cast<double>(anchors);
    for (Eigen::Index i = 0; i < n; ++i) {
        if (positives[i] == 0) continue;
        double mx = -std::numeric_limits<double>::infinity();
        for (Eigen::Index a = 0; a < n; ++a)
            if (a != i) mx = std::max(mx, sim(i, a));
        double denom = 0.0;
        for (Eigen::Index a = 0; a < n; ++a)
            if (a != i) denom += std::exp(sim(i, a) - mx);
        const double log_denom = mx + std::log(denom);
        const double inv_pos = 1.0 / static_cast<double>(positives[i]);
        double anchor_loss = 0.0;
        for (Eigen::Index a = 0; a < n; ++a) {
            if (a == i) continue;
            const double q = std::exp(sim(i, a) - log_denom);
            double g = q;
            if (labels[a] == labels[i]) {
                anchor_loss -= inv_pos * (sim(i, a) - log_denom);
                g -= inv_pos;
            }
            dsim(i, a) = g * inv_anchors;
        }
        out.value += anchor_loss * inv_anchors;
    }

    const Matrix dunit = (dsim + dsim.transpose()) * unit / temperature;
    Matrix& grad = *out.grad_embeddings;
    for (Eigen::Index i = 0; i < n; ++i) {
        const double radial = unit.row(i).dot(dunit.row(i));
        grad.row(i) = (dunit.row(i) - radial * unit.row(i)) / norms(i);
    }
    return out;
}

LossOutput dml_loss(const Matrix& embeddings, std::span<const int> labels, const LossConfig& config)
{
    const LossOutput con = contrastive_loss(embeddings, labels, config.margin);
    const LossOutput sup = supcon_loss(embeddings, labels, config.supcon_temp);
    LossOutput out;
    out.value = config.alpha_dml * con.value + config.beta_dml * sup.value;
    out.grad_embeddings = config.alpha_dml * *con.grad_embeddings + config.beta_dml * *sup.grad_embeddings;
    return out;
}

Matrix soft_labels(const Matrix& stored_logits, double tau)
{
    if (!(tau > 0.0)) throw ConfigError("soft_labels: tau must be positive");
    return softmax_rows(stored_logits, tau);
}

RowVector soft_labels(const RowVector& stored_logits, double tau)
{
    if (!(tau > 0.0)) throw ConfigError("soft_labels: tau must be positive");
    return softmax_row(stored_logits, tau);
}

double class_balanced_weight(int class_count, double beta)
{
    if (class_count < 1) throw std::domain_error("class_balanced_weight: class count must be at least 1");
    if (beta == 0.0) return 1.0;
    return (1.0 - beta) / (1.0 - std::pow(beta, class_count));
}

std::vector<int> class_counts(std::span<const int> labels, int num_classes)
{
    std::vector<int> counts(static_cast<std::size_t>(num_classes), 0);
    for (int y : labels) {
        if (y < 0 || y >= num_classes) throw std::out_of_range("class_counts: label out of range");
        ++counts[static_cast<std::size_t>(y)];
    }
    return counts;
}

LossOutput cb_focal_loss(const Matrix& logits, std::span<const int> labels, std::span<const int> counts,
                         const LossConfig& config)
{
    check_labels(logits, labels, "cb_focal_loss");
    if (counts.size() != static_cast<std::size_t>(logits.cols()))
        throw ShapeError("cb_focal_loss: class count vector length must equal logit width");
    const auto n = logits.rows();
    LossOutput out;
    out.grad_logits = Matrix::Zero(n, logits.cols());
    if (n == 0) return out;

    const double gamma = config.focal_gamma;
    const double inv_n = 1.0 / static_cast<double>(n);
    Matrix& grad = *out.grad_logits;
    for (Eigen::Index i = 0; i < n; ++i) {
        const int y = labels[i];
        const double weight = config.focal_alpha * class_balanced_weight(counts[y], config.cb_beta);
        const RowVector p = softmax_row(logits.row(i), 1.0);
        const double py = p(y);
        const bool clamped = py < kProbabilityFloor;
        if (clamped) spdlog::debug("cb_focal_loss: p_y={} clamped to {}", py, kProbabilityFloor);
        const double log_py = clamped ? std::log(kProbabilityFloor) : std::log(py);
        const double one_minus = 1.0 - py;
        const double modulator = std::pow(one_minus, gamma);
        out.value += -weight * modulator * log_py * inv_n;

        // p_y * d/dp_y [-(1-p)^g log p]
        double dfdp_times_p = 0.0;
        if (gamma > 0.0 && one_minus > 0.0) dfdp_times_p += gamma * std::pow(one_minus, gamma - 1.0) * py * log_py;
        if (!clamped) dfdp_times_p -= modulator;
        // d p_y / d l_k = p_y (delta_yk - p_k)
        RowVector dl = -p;
        dl(y) += 1.0;
        grad.row(i) = (weight * inv_n * dfdp_times_p) * dl;
    }
    return out;
}

LossOutput kl_retrospection(const Matrix& logits, const Matrix& soft_targets, const LossConfig& config)
{
    if (logits.rows() != soft_targets.rows() || logits.cols() != soft_targets.cols())
        throw ShapeError("kl_retrospection: logits and soft targets differ in shape");
    const auto m = logits.rows();
    LossOutput out;
    out.grad_logits = Matrix::Zero(m, logits.cols());
    if (m == 0) return out;

    const double t = config.kl_student_temperature ? config.tau : 1.0;
    const double inv_m = 1.0 / static_cast<double>(m);
    Matrix& grad = *out.grad_logits;
    for (Eigen::Index i = 0; i < m; ++i) {
        const RowVector log_q = log_softmax_row(logits.row(i), t);
        const RowVector q = log_q.array().exp();
        const RowVector s = soft_targets.row(i);
        const RowVector log_s = s.cwiseMax(kProbabilityFloor).array().log();
        if (config.kl_direction == KlDirection::Forward) {
            out.value += inv_m * s.cwiseProduct(log_s - log_q).sum();
            grad.row(i) = (inv_m / t) * (q - s);
        } else {
            const RowVector g = log_q - log_s;
            out.value += inv_m * q.cwiseProduct(g).sum();
            grad.row(i) = (inv_m / t) * q.cwiseProduct((g.array() - q.dot(g)).matrix());
        }
    }
    return out;
}

double delta_at(const LossConfig& config, std::int64_t iteration)
{
    double delta = 0.0;
    for (const auto& [milestone, value] : config.delta_schedule) {
        if (iteration < milestone) break;
        delta = value;
    }
    return delta;
}

ClsLossParts cls_loss_parts(const Matrix& logits, std::span<const int> labels,
                            std::span<const std::uint8_t> memory_mask, const Matrix& soft_targets,
                            std::span<const int> counts, std::int64_t iteration, const LossConfig& config)
{
    check_labels(logits, labels, "cls_loss");
    if (memory_mask.size() != labels.size()) throw ShapeError("cls_loss: mask length must equal batch size");

    ClsLossParts parts;
    const LossOutput focal = cb_focal_loss(logits, labels, counts, config);

    std::vector<Eigen::Index> rows;
    for (std::size_t i = 0; i < memory_mask.size(); ++i)
        if (memory_mask[i]) rows.push_back(static_cast<Eigen::Index>(i));
    if (!rows.empty() && (soft_targets.rows() != logits.rows() || soft_targets.cols() != logits.cols()))
        throw ShapeError("cls_loss: soft targets must have one row per batch row");
    Matrix mem_logits(static_cast<Eigen::Index>(rows.size()), logits.cols());
    Matrix mem_targets(static_cast<Eigen::Index>(rows.size()), logits.cols());
    for (std::size_t r = 0; r < rows.size(); ++r) {
        mem_logits.row(static_cast<Eigen::Index>(r)) = logits.row(rows[r]);
        mem_targets.row(static_cast<Eigen::Index>(r)) = soft_targets.row(rows[r]);
    }
    const LossOutput kl = kl_retrospection(mem_logits, mem_targets, config);

    parts.delta = delta_at(config, iteration);
    parts.focal = focal.value;
    parts.kl = kl.value;
    parts.total.value = config.gamma_cls * focal.value + parts.delta * kl.value;
    Matrix grad = config.gamma_cls * *focal.grad_logits;
    for (std::size_t r = 0; r < rows.size(); ++r)
        grad.row(rows[r]) += parts.delta * kl.grad_logits->row(static_cast<Eigen::Index>(r));
    parts.total.grad_logits = std::move(grad);
    return parts;
}

LossOutput cls_loss(const Matrix& logits, std::span<const int> labels, std::span<const std::uint8_t> memory_mask,
                    const Matrix& soft_targets, std::span<const int> counts, std::int64_t iteration,
                    const LossConfig& config)
{
    return cls_loss_parts(logits, labels, memory_mask, soft_targets, counts, iteration, config).total;
}

} // namespace oclearn
