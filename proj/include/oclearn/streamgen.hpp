#pragma once

#include <cstdint>
#include <filesystem>
#include <random>
#include <span>
#include <vector>

#include "oclearn/common.hpp"

namespace oclearn {

struct LabeledExample {
    std::int64_t id = 0;
    Vector features;
    int label = 0;
};

/**
 * Parameters of the synthetic drifting stream.
 *
 * Each task is a mixture of class-conditional isotropic Gaussians. The task
 * changes silently once its length in batches is exhausted; the last task
 * continues forever.
 */
struct StreamConfig {
    int num_classes = 6;
    int dim = 16;
    std::vector<std::vector<double>> class_priors;  // [task][class]
    std::vector<std::vector<Vector>> task_means;    // [task][class]
    double noise_scale = 1.0;
    std::vector<std::int64_t> task_lengths;         // batches per task
    std::uint64_t seed = 0;
    // Batches over which means blend linearly into the next task. 0 = abrupt switch.
    std::int64_t drift_width = 0;

    int num_tasks() const noexcept { return static_cast<int>(task_lengths.size()); }

    /// Throws ConfigError when any invariant is violated.
    void validate() const;
};

/// Tunables for generating task means from a geometry seed.
struct StreamGeometry {
    int num_classes = 6;
    int dim = 16;
    int num_tasks = 4;
    std::int64_t task_length = 1000;
    // Norm of the class prototype shared by every task.
    double class_separation = 5.0;
    // Norm of the per-(task, class) offset added on top of the prototype.
    double task_shift = 1.0;
    // Norm of the offset shared by every class of a task (a global domain shift).
    double domain_shift = 2.0;
    double noise_scale = 1.0;
    // Task t uses the base priors rotated right by t * prior_rotation classes, so the
    // head class moves between tasks.
    int prior_rotation = 2;
    std::uint64_t geometry_seed = 2021;
};

/// Long-tailed base class prior; tasks rotate it by StreamGeometry::prior_rotation.
std::vector<double> default_class_priors();

/// Builds a full config from a geometry description, drawing means deterministically.
StreamConfig make_stream_config(const StreamGeometry& geometry, std::uint64_t sampling_seed,
                                std::vector<double> priors = default_class_priors());

/// Default 4-task, 6-class, 16-dimensional stream.
StreamConfig default_stream_config(std::uint64_t sampling_seed = 0);

/// Task active at a given batch index. Meant for reporting, never for the learner.
int task_at(const StreamConfig& config, std::int64_t iteration);

class Stream {
public:
    explicit Stream(StreamConfig config);

    /// Draws k examples from the active task and advances the batch counter.
    std::vector<LabeledExample> next_batch(std::size_t k);

    std::int64_t iteration() const noexcept { return iteration_; }
    const StreamConfig& config() const noexcept { return config_; }

private:
    StreamConfig config_;
    std::mt19937_64 engine_;
    std::int64_t iteration_ = 0;
    std::int64_t next_id_ = 0;
    std::vector<std::discrete_distribution<int>> label_dists_;
};

/// Class-balanced evaluation set from one task's distribution. Ids never collide with
/// the training stream.
std::vector<LabeledExample> holdout_set(const StreamConfig& config, int task, int n_per_class);

/// Stacks example features into a batch matrix.
Matrix stack_features(std::span<const LabeledExample> examples);
std::vector<int> collect_labels(std::span<const LabeledExample> examples);

/// Writes `id,label,f0..fD-1` rows with a header line.
void write_examples_csv(const std::filesystem::path& path, std::span<const LabeledExample> examples);
std::vector<LabeledExample> read_examples_csv(const std::filesystem::path& path);

} // namespace oclearn
