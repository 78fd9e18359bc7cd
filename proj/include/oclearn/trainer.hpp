#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <span>
#include <vector>

#include <nlohmann/json.hpp>

#include "oclearn/config.hpp"
#include "oclearn/evaluation.hpp"
#include "oclearn/memory.hpp"
#include "oclearn/nnkernel.hpp"

namespace oclearn {

struct StepReport {
    std::int64_t iteration = 0;
    double dml = 0.0;
    double focal_cb = 0.0;
    double kl = 0.0;
    double delta = 0.0;
    double total = 0.0;
    double lr = 0.0;
    std::size_t memory_size = 0;
    std::size_t replayed = 0;
    std::size_t inserted = 0;
    bool periodic_update = false;
    std::vector<int> class_counts;  // over the joined stream + replay batch
};

nlohmann::json to_json(const StepReport& report);

/// Mutable state carried across steps.
struct TrainState {
    ModelState model;
    OptimizerState optimizer;
    EpisodicMemory memory;

    static TrainState initial(const TrainConfig& config);
};

/**
 * One iteration of the training scheme:
 *   replay draw + augmentation, one forward on the joined batch, metric and
 *   classification losses, one fused backward and SGD step, online insertion of
 *   stream rows, then a periodic sweep when memory is full or the interval is hit.
 * Throws NumericError if the loss is not finite.
 */
StepReport train_step(TrainState& state, std::span<const LabeledExample> stream_batch, const TrainConfig& config,
                      std::int64_t iteration);

struct RunOptions {
    std::optional<std::filesystem::path> out_dir;
    std::optional<std::filesystem::path> dump_memory;
    std::function<void(const StepReport&)> on_step;
    bool keep_steps = false;
};

struct RunResult {
    TrainState state;
    std::vector<EvalReport> reports;
    std::vector<StepReport> steps;   // only when RunOptions::keep_steps
    std::optional<double> amca;
    std::size_t max_memory_size = 0;
    double wall_seconds = 0.0;
};

/**
 * Trains over the stream for total_iterations, evaluating every eval_interval
 * iterations on holdouts of the tasks seen so far. With an output directory it
 * writes steps.jsonl, checkpoints/iter_<n>/, memory.csv and summary.json.
 */
RunResult run(const TrainConfig& config, const RunOptions& options = {});

/// Holdouts for every task of the config's stream.
std::vector<std::vector<LabeledExample>> make_holdouts(const TrainConfig& config);

} // namespace oclearn
