#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <utility>
#include <vector>

#include "oclearn/common.hpp"

namespace oclearn {

enum class KlDirection {
    Forward,  // KL(target || prediction), the distillation convention
    Reverse,  // KL(prediction || target)
};

struct LossConfig {
    // metric learning
    double alpha_dml = 0.3;
    double beta_dml = 0.1;
    double margin = 1.0;
    double supcon_temp = 0.1;
    // soft-label retrospection
    double tau = 0.5;
    KlDirection kl_direction = KlDirection::Forward;
    bool kl_student_temperature = true;
    // class-balanced focal loss
    double focal_alpha = 0.5;
    double focal_gamma = 0.0;
    double cb_beta = 0.81;
    // classification mix
    double gamma_cls = 1.0;
    std::vector<std::pair<std::int64_t, double>> delta_schedule = {{0, 0.0}, {500, 0.5}, {1500, 1.0}};

    void validate() const;
};

struct LossOutput {
    double value = 0.0;
    std::optional<Matrix> grad_embeddings;
    std::optional<Matrix> grad_logits;
};

/// Floor applied to every probability before taking a log.
inline constexpr double kProbabilityFloor = 1e-12;

/**
 * Margin contrastive loss over every in-batch pair:
 *   mean_{same label} d^2 + mean_{different label} max(0, margin - d)^2
 * where d is the Euclidean distance. An empty pair group contributes zero.
 */
LossOutput contrastive_loss(const Matrix& embeddings, std::span<const int> labels, double margin);

/**
 * Supervised contrastive loss ("log outside the positive mean") on L2-normalised
 * copies of the embeddings. Anchors without positives are excluded from the mean.
 */
LossOutput supcon_loss(const Matrix& embeddings, std::span<const int> labels, double temperature);

/// alpha_dml * contrastive + beta_dml * supcon.
LossOutput dml_loss(const Matrix& embeddings, std::span<const int> labels, const LossConfig& config);

/// Temperature softmax of stored logits, one row per example.
Matrix soft_labels(const Matrix& stored_logits, double tau);
RowVector soft_labels(const RowVector& stored_logits, double tau);

/// (1 - beta) / (1 - beta^n); 1 when beta is 0.
double class_balanced_weight(int class_count, double beta);

std::vector<int> class_counts(std::span<const int> labels, int num_classes);

/**
 * Mean over rows of
 *   -focal_alpha * cb(n_y) * (1 - p_y)^focal_gamma * log p_y
 * with p = softmax(logits). Gradient is returned w.r.t. the logits.
 */
LossOutput cb_focal_loss(const Matrix& logits, std::span<const int> labels, std::span<const int> counts,
                         const LossConfig& config);

/**
 * KL divergence between stored soft targets and the temperature softmax of the
 * current logits, averaged over rows. Every row is a memory sample.
 */
LossOutput kl_retrospection(const Matrix& logits, const Matrix& soft_targets, const LossConfig& config);

/// delta in effect at an iteration: the value of the last milestone reached, 0 before the first.
double delta_at(const LossConfig& config, std::int64_t iteration);

/**
 * gamma_cls * cb_focal_loss(all rows) + delta(iteration) * kl_retrospection(memory rows).
 * soft_targets has one row per batch row; rows outside memory_mask are ignored.
 */
LossOutput cls_loss(const Matrix& logits, std::span<const int> labels, std::span<const std::uint8_t> memory_mask,
                    const Matrix& soft_targets, std::span<const int> counts, std::int64_t iteration,
                    const LossConfig& config);

/// Breakdown of cls_loss for reporting.
struct ClsLossParts {
    LossOutput total;
    double focal = 0.0;
    double kl = 0.0;
    double delta = 0.0;
};

ClsLossParts cls_loss_parts(const Matrix& logits, std::span<const int> labels,
                            std::span<const std::uint8_t> memory_mask, const Matrix& soft_targets,
                            std::span<const int> counts, std::int64_t iteration, const LossConfig& config);

} // namespace oclearn
