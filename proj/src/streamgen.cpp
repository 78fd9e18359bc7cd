#include "oclearn/streamgen.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <sstream>
#include <string>

namespace oclearn {

namespace {

constexpr std::int64_t kHoldoutIdBase = std::int64_t{1} << 40;
constexpr std::int64_t kHoldoutIdStride = std::int64_t{1} << 32;

Vector random_direction(std::mt19937_64& engine, int dim)
{
    std::normal_distribution<double> normal(0.0, 1.0);
    Vector v(dim);
    do {
        for (int d = 0; d < dim; ++d) v(d) = normal(engine);
    } while (v.norm() < 1e-12);
    return v / v.norm();
}

Vector draw_features(std::mt19937_64& engine, const Vector& mean, double noise_scale)
{
    std::normal_distribution<double> normal(0.0, 1.0);
    Vector x(mean.size());
    for (Eigen::Index d = 0; d < mean.size(); ++d) x(d) = mean(d) + noise_scale * normal(engine);
    return x;
}

std::int64_t task_start(const StreamConfig& config, int task)
{
    return std::accumulate(config.task_lengths.begin(), config.task_lengths.begin() + task, std::int64_t{0});
}

Vector mean_at(const StreamConfig& config, int label, std::int64_t iteration)
{
    const int task = task_at(config, iteration);
    const Vector& target = config.task_means[task][label];
    if (config.drift_width <= 0 || task == 0) return target;
    const std::int64_t into = iteration - task_start(config, task);
    if (into >= config.drift_width) return target;
    const double w = static_cast<double>(into + 1) / static_cast<double>(config.drift_width + 1);
    return (1.0 - w) * config.task_means[task - 1][label] + w * target;
}

} // namespace

void StreamConfig::validate() const
{
    if (num_classes < 1) throw ConfigError("stream: num_classes must be positive");
    if (dim < 1) throw ConfigError("stream: dim must be positive");
    if (task_lengths.empty()) throw ConfigError("stream: at least one task is required");
    for (auto len : task_lengths) {
        if (len <= 0) throw ConfigError("stream: task lengths must be positive");
    }
    const auto tasks = task_lengths.size();
    if (class_priors.size() != tasks) throw ConfigError("stream: need one prior vector per task");
    for (const auto& priors : class_priors) {
        if (priors.size() != static_cast<std::size_t>(num_classes))
            throw ConfigError("stream: prior vector length must equal num_classes");
        double sum = 0.0;
        for (double p : priors) {
            if (!(p >= 0.0) || !std::isfinite(p)) throw ConfigError("stream: priors must be finite and non-negative");
            sum += p;
        }
        if (std::abs(sum - 1.0) > 1e-9) {
            std::ostringstream msg;
            msg << "stream: class priors sum to " << sum << ", expected 1";
            throw ConfigError(msg.str());
        }
    }
    if (task_means.size() != tasks) throw ConfigError("stream: need one mean set per task");
    for (const auto& means : task_means) {
        if (means.size() != static_cast<std::size_t>(num_classes))
            throw ConfigError("stream: need one mean per class in every task");
        for (const auto& m : means) {
            if (m.size() != dim) throw ConfigError("stream: mean vector length must equal dim");
            if (!m.allFinite()) throw ConfigError("stream: means must be finite");
        }
    }
    if (!(noise_scale > 0.0) || !std::isfinite(noise_scale)) throw ConfigError("stream: noise_scale must be positive");
    if (drift_width < 0) throw ConfigError("stream: drift_width must be non-negative");
}

std::vector<double> default_class_priors()
{
    return {0.60, 0.25, 0.08, 0.04, 0.02, 0.01};
}

StreamConfig make_stream_config(const StreamGeometry& geometry, std::uint64_t sampling_seed, std::vector<double> priors)
{
    if (geometry.num_tasks < 1) throw ConfigError("stream: num_tasks must be positive");
    if (geometry.num_classes < 1 || geometry.dim < 1) throw ConfigError("stream: num_classes and dim must be positive");
    StreamConfig config;
    config.num_classes = geometry.num_classes;
    config.dim = geometry.dim;
    config.noise_scale = geometry.noise_scale;
    config.seed = sampling_seed;
    config.task_lengths.assign(geometry.num_tasks, geometry.task_length);
    for (int t = 0; t < geometry.num_tasks; ++t) {
        std::vector<double> rotated = priors;
        if (!rotated.empty()) {
            const auto n = static_cast<long>(rotated.size());
            const long shift = ((static_cast<long>(t) * geometry.prior_rotation) % n + n) % n;
            std::rotate(rotated.rbegin(), rotated.rbegin() + shift, rotated.rend());
        }
        config.class_priors.push_back(std::move(rotated));
    }

    std::mt19937_64 engine(mix_seed({geometry.geometry_seed, 0x6E0ULL}));
    std::vector<Vector> prototypes;
    for (int c = 0; c < geometry.num_classes; ++c)
        prototypes.push_back(geometry.class_separation * random_direction(engine, geometry.dim));
    config.task_means.resize(geometry.num_tasks);
    for (int t = 0; t < geometry.num_tasks; ++t) {
        const Vector domain = geometry.domain_shift * random_direction(engine, geometry.dim);
        for (int c = 0; c < geometry.num_classes; ++c) {
            config.task_means[t].push_back(prototypes[c] + domain +
                                           geometry.task_shift * random_direction(engine, geometry.dim));
        }
    }
    config.validate();
    return config;
}

StreamConfig default_stream_config(std::uint64_t sampling_seed)
{
    return make_stream_config(StreamGeometry{}, sampling_seed);
}

int task_at(const StreamConfig& config, std::int64_t iteration)
{
    std::int64_t start = 0;
    for (int t = 0; t < config.num_tasks(); ++t) {
        start += config.task_lengths[t];
        if (iteration < start) return t;
    }
    return config.num_tasks() - 1;
}

Stream::Stream(StreamConfig config) : config_(std::move(config))
{
    config_.validate();
    engine_.seed(mix_seed({config_.seed, 0x57EA3ULL}));
    for (const auto& priors : config_.class_priors) label_dists_.emplace_back(priors.begin(), priors.end());
}

std::vector<LabeledExample> Stream::next_batch(std::size_t k)
{
    const int task = task_at(config_, iteration_);
    std::vector<LabeledExample> batch;
    batch.reserve(k);
    for (std::size_t i = 0; i < k; ++i) {
        LabeledExample ex;
        ex.id = next_id_++;
        ex.label = label_dists_[task](engine_);
        ex.features = draw_features(engine_, mean_at(config_, ex.label, iteration_), config_.noise_scale);
        batch.push_back(std::move(ex));
    }
    ++iteration_;
    return batch;
}

std::vector<LabeledExample> holdout_set(const StreamConfig& config, int task, int n_per_class)
{
    if (task < 0 || task >= config.num_tasks()) throw std::out_of_range("holdout_set: unknown task index");
    if (n_per_class < 0) throw ConfigError("holdout_set: n_per_class must be non-negative");
    std::mt19937_64 engine(mix_seed({config.seed, 0x401DULL, static_cast<std::uint64_t>(task)}));
    std::vector<LabeledExample> out;
    out.reserve(static_cast<std::size_t>(n_per_class) * config.num_classes);
    std::int64_t id = kHoldoutIdBase + task * kHoldoutIdStride;
    for (int c = 0; c < config.num_classes; ++c) {
        for (int i = 0; i < n_per_class; ++i) {
            out.push_back({id++, draw_features(engine, config.task_means[task][c], config.noise_scale), c});
        }
    }
    return out;
}

Matrix stack_features(std::span<const LabeledExample> examples)
{
    if (examples.empty()) return Matrix(0, 0);
    Matrix x(static_cast<Eigen::Index>(examples.size()), examples.front().features.size());
    for (std::size_t i = 0; i < examples.size(); ++i) {
        if (examples[i].features.size() != x.cols()) throw ShapeError("stack_features: ragged feature vectors");
        x.row(static_cast<Eigen::Index>(i)) = examples[i].features.transpose();
    }
    return x;
}

std::vector<int> collect_labels(std::span<const LabeledExample> examples)
{
    std::vector<int> labels;
    labels.reserve(examples.size());
    for (const auto& ex : examples) labels.push_back(ex.label);
    return labels;
}

void write_examples_csv(const std::filesystem::path& path, std::span<const LabeledExample> examples)
{
    std::ofstream out(path);
    if (!out) throw std::runtime_error("cannot open " + path.string() + " for writing");
    const Eigen::Index dim = examples.empty() ? 0 : examples.front().features.size();
    out << "id,label";
    for (Eigen::Index d = 0; d < dim; ++d) out << ",f" << d;
    out << '\n';
    out.precision(17);
    for (const auto& ex : examples) {
        out << ex.id << ',' << ex.label;
        for (Eigen::Index d = 0; d < ex.features.size(); ++d) out << ',' << ex.features(d);
        out << '\n';
    }
}

std::vector<LabeledExample> read_examples_csv(const std::filesystem::path& path)
{
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot open " + path.string());
    std::string line;
    std::getline(in, line);
    const auto dim = static_cast<Eigen::Index>(std::count(line.begin(), line.end(), ',')) - 1;
    std::vector<LabeledExample> out;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        std::istringstream row(line);
        std::string cell;
        LabeledExample ex;
        std::getline(row, cell, ',');
        ex.id = std::stoll(cell);
        std::getline(row, cell, ',');
        ex.label = std::stoi(cell);
        ex.features.resize(dim);
        for (Eigen::Index d = 0; d < dim; ++d) {
            std::getline(row, cell, ',');
            ex.features(d) = std::stod(cell);
        }
        out.push_back(std::move(ex));
    }
    return out;
}

} // namespace oclearn
