#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>

#include <boost/property_tree/ptree.hpp>

#include "oclearn/losses.hpp"
#include "oclearn/memory.hpp"
#include "oclearn/nnkernel.hpp"
#include "oclearn/streamgen.hpp"

namespace oclearn {

using ConfigTree = boost::property_tree::ptree;

/// Everything a training run needs. Loaded from an INI file; see configs/default.ini.
struct TrainConfig {
    StreamGeometry geometry;
    std::vector<double> priors = default_class_priors();
    std::map<int, std::vector<double>> task_priors;                  // priors_<t>
    std::map<std::pair<int, int>, std::vector<double>> task_means;   // mean_<t>_<c>
    std::uint64_t stream_seed = 0;
    std::int64_t drift_width = 0;

    ModelSpec model;
    OptimizerState optimizer;
    LossConfig loss;

    bool use_memory = true;
    std::size_t capacity = 1000;
    std::size_t online_quota = 5;
    std::size_t keep_size = 500;
    std::int64_t periodic_interval = 1000;
    bool refresh_logits = true;
    PerturbationPolicy perturbation;

    std::uint64_t seed = 0;
    std::size_t stream_batch = 10;
    std::size_t replay_batch = 6;
    std::int64_t total_iterations = 4000;
    bool fused_update = true;

    std::int64_t eval_interval = 250;
    int holdout_per_class = 100;
    bool save_checkpoints = true;

    void validate() const;

    /// Stream config with the sampling seed derived from the run seed.
    StreamConfig stream_config() const;
};

ConfigTree to_tree(const TrainConfig& config);
TrainConfig from_tree(const ConfigTree& tree);

/// Reads an INI file and layers it over the defaults. Unknown keys are rejected.
TrainConfig load_train_config(const std::filesystem::path& path);
ConfigTree read_config_tree(const std::filesystem::path& path);

/// Copies every leaf of `delta` over `base`.
void merge_tree(ConfigTree& base, const ConfigTree& delta);

/// Applies `section.key=value`.
void set_config_value(TrainConfig& config, const std::string& assignment);

/// Replaces the [stream] section with the one in `path`.
void apply_stream_config_file(TrainConfig& config, const std::filesystem::path& path);
StreamConfig load_stream_config(const std::filesystem::path& path, std::uint64_t run_seed = 0);

/// Canonical INI text; load_train_config(print_config(c)) reproduces c.
std::string print_config(const TrainConfig& config);

/// FNV-1a of the canonical text.
std::uint64_t config_hash(const TrainConfig& config);

} // namespace oclearn
