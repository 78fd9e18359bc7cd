#pragma once

#include <atomic>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <string>
#include <vector>

#include "oclearn/common.hpp"

namespace oclearn {

enum class Activation { Linear, Tanh, Softplus };

std::string to_string(Activation a);
Activation parse_activation(const std::string& name);

struct DenseLayer {
    Matrix weight;  // out x in, no bias
    Activation activation = Activation::Tanh;
};

/// Backbone layers followed by a bias-free linear head.
struct ModelState {
    std::vector<DenseLayer> backbone;
    Matrix head;  // num_classes x embedding_dim
    std::int64_t iteration = 0;

    int input_dim() const;
    int embedding_dim() const;
    int num_classes() const { return static_cast<int>(head.rows()); }
    std::size_t parameter_count() const;
    bool all_finite() const;
};

struct ModelSpec {
    int input_dim = 16;
    std::vector<int> hidden = {64, 64};
    int embedding_dim = 32;
    int num_classes = 6;
    Activation hidden_activation = Activation::Tanh;
    Activation embedding_activation = Activation::Linear;
};

/// Uniform fan-in initialisation, U(-sqrt(3/fan_in), sqrt(3/fan_in)).
ModelState init_model(const ModelSpec& spec, std::uint64_t seed);

struct ForwardResult {
    Matrix embeddings;  // N x E
    Matrix logits;      // N x C
    // Layer inputs and pre-activations retained for backward.
    std::vector<Matrix> layer_inputs;
    std::vector<Matrix> pre_activations;
};

/// Gradient of a scalar loss w.r.t. every parameter, shaped like the model.
struct GradientSet {
    std::vector<Matrix> backbone;
    Matrix head;

    static GradientSet zeros_like(const ModelState& model);
    GradientSet& operator+=(const GradientSet& other);
    bool all_finite() const;
    double max_abs() const;
};

/// Call counts for the training-path kernels. Inference passes are tallied separately.
struct KernelCounters {
    std::atomic<std::uint64_t> forward{0};
    std::atomic<std::uint64_t> backward{0};
    std::atomic<std::uint64_t> inference{0};

    void reset() noexcept
    {
        forward = 0;
        backward = 0;
        inference = 0;
    }
};

KernelCounters& kernel_counters() noexcept;

/// Training forward pass; keeps what backward needs.
ForwardResult forward(const ModelState& model, const Matrix& batch);

/// Logits only, no cache. Safe to call concurrently on a shared model.
Matrix predict_logits(const ModelState& model, const Matrix& batch);

/// Reverse pass accepting gradients on both outputs. d_embeddings only reaches the
/// backbone; d_logits flows through the head and then the backbone. Either may be
/// an empty matrix, meaning zero.
GradientSet backward(const ModelState& model, const ForwardResult& fwd, const Matrix& d_embeddings,
                     const Matrix& d_logits);

struct OptimizerState {
    double base_lr = 0.0111;
    std::vector<std::int64_t> milestones = {1000, 2000};
    double decay_factor = 0.1;
    std::int64_t iteration = 0;

    void validate() const;
    /// base_lr * decay_factor^(milestones passed).
    double current_lr() const;
};

/// Plain SGD. Throws NumericError on non-finite gradients, leaving the model untouched.
void sgd_step(ModelState& model, OptimizerState& opt, const GradientSet& grads);

/// Applies only the backbone part of a gradient set (head untouched). Used by the
/// unfused two-update variant; does not advance counters.
void apply_backbone_update(ModelState& model, double lr, const GradientSet& grads);

/// Flat parameter access for finite differences and serialization.
std::size_t flat_size(const ModelState& model);
double& flat_param(ModelState& model, std::size_t index);
double flat_grad(const GradientSet& grads, std::size_t index);

using LossClosure = std::function<std::pair<double, GradientSet>(const ModelState&)>;

struct GradCheckResult {
    double max_relative_error = 0.0;
    std::size_t checked = 0;
};

/**
 * Compares the closure's analytic gradient against central differences on a random
 * subsample of parameters. Relative error is |a - n| / max(|a|, |n|, floor).
 */
GradCheckResult grad_check(const ModelState& model, const LossClosure& loss, std::size_t samples = 64,
                           double step = 1e-5, std::uint64_t seed = 0, double floor = 1e-3);

/**
 * Checkpoint directory layout:
 *   manifest.json            shapes, activations, iteration, optimizer state
 *   backbone_<i>.csv         one row per output unit, comma separated, %.17g
 *   head.csv
 */
void save_checkpoint(const std::filesystem::path& dir, const ModelState& model, const OptimizerState& opt);
std::pair<ModelState, OptimizerState> load_checkpoint(const std::filesystem::path& dir);

} // namespace oclearn
