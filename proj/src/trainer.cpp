#include "oclearn/trainer.hpp"

#include <chrono>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <sstream>

#include <spdlog/spdlog.h>

namespace oclearn {

namespace {

constexpr std::uint64_t kInitSalt = 0x1A17ULL;
constexpr std::uint64_t kReplayDrawSalt = 0xD2A3ULL;
constexpr std::uint64_t kPolicySalt = 0x9E27ULL;

struct BatchLosses {
    double dml = 0.0;
    ClsLossParts cls;
    Matrix d_embeddings;
};

/// Joined batch: stream rows first, then replay rows.
struct JoinedBatch {
    Matrix features;
    std::vector<int> labels;
    std::vector<std::uint8_t> memory_mask;
    Matrix soft_targets;
};

JoinedBatch join_batch(std::span<const LabeledExample> stream_batch, std::span<const MemoryEntry> replay,
                       const Matrix& replay_features, const TrainConfig& config)
{
    JoinedBatch b;
    const auto n_stream = static_cast<Eigen::Index>(stream_batch.size());
    const auto n = n_stream + static_cast<Eigen::Index>(replay.size());
    const int classes = config.geometry.num_classes;
    b.features.resize(n, config.geometry.dim);
    b.features.topRows(n_stream) = stack_features(stream_batch);
    if (!replay.empty()) b.features.bottomRows(static_cast<Eigen::Index>(replay.size())) = replay_features;
    b.labels = collect_labels(stream_batch);
    b.memory_mask.assign(stream_batch.size(), 0);
    b.soft_targets = Matrix::Zero(n, classes);
    for (std::size_t r = 0; r < replay.size(); ++r) {
        b.labels.push_back(replay[r].example.label);
        b.memory_mask.push_back(1);
        b.soft_targets.row(n_stream + static_cast<Eigen::Index>(r)) =
            soft_labels(replay[r].stored_logits, config.loss.tau);
    }
    return b;
}

BatchLosses compute_losses(const ForwardResult& fwd, const JoinedBatch& batch, const std::vector<int>& counts,
                           const TrainConfig& config, std::int64_t iteration)
{
    BatchLosses out;
    if (config.loss.alpha_dml != 0.0 || config.loss.beta_dml != 0.0) {
        LossOutput dml = dml_loss(fwd.embeddings, batch.labels, config.loss);
        out.dml = dml.value;
        out.d_embeddings = std::move(*dml.grad_embeddings);
    }
    out.cls = cls_loss_parts(fwd.logits, batch.labels, batch.memory_mask, batch.soft_targets, counts, iteration,
                             config.loss);
    return out;
}

std::string describe_batch(const JoinedBatch& batch)
{
    std::ostringstream out;
    out << std::setprecision(17);
    for (Eigen::Index i = 0; i < batch.features.rows(); ++i) {
        out << "\n  row " << i << " label=" << batch.labels[i] << (batch.memory_mask[i] ? " replay" : " stream")
            << " x=[" << batch.features.row(i) << "]";
    }
    return out.str();
}

} // namespace

nlohmann::json to_json(const StepReport& r)
{
    return {{"iteration", r.iteration},
            {"dml", r.dml},
            {"focal_cb", r.focal_cb},
            {"kl", r.kl},
            {"delta", r.delta},
            {"total", r.total},
            {"lr", r.lr},
            {"memory_size", r.memory_size},
            {"replayed", r.replayed},
            {"inserted", r.inserted},
            {"periodic_update", r.periodic_update},
            {"class_counts", r.class_counts}};
}

TrainState TrainState::initial(const TrainConfig& config)
{
    config.validate();
    OptimizerState opt = config.optimizer;
    opt.iteration = 0;
    return {init_model(config.model, mix_seed({config.seed, kInitSalt})), opt,
            EpisodicMemory(config.capacity, config.online_quota, config.keep_size)};
}

StepReport train_step(TrainState& state, std::span<const LabeledExample> stream_batch, const TrainConfig& config,
                      std::int64_t iteration)
{
    if (stream_batch.empty()) throw std::invalid_argument("train_step: stream batch is empty");
    PerturbationPolicy policy = config.perturbation;
    policy.seed = mix_seed({config.seed, config.perturbation.seed, kPolicySalt});
    StepReport report;
    report.iteration = iteration;
    report.lr = state.optimizer.current_lr();

    std::vector<MemoryEntry> replay;
    Matrix replay_features;
    if (config.use_memory && config.replay_batch > 0) {
        replay = state.memory.sample_replay(config.replay_batch, mix_seed({config.seed, kReplayDrawSalt,
                                                                           static_cast<std::uint64_t>(iteration)}));
        replay_features = augment_replay(replay, policy, iteration);
    }
    const JoinedBatch batch = join_batch(stream_batch, replay, replay_features, config);
    const auto counts = class_counts(batch.labels, config.geometry.num_classes);
    report.replayed = replay.size();
    report.class_counts = counts;

    const ForwardResult fwd = forward(state.model, batch.features);
    BatchLosses losses = compute_losses(fwd, batch, counts, config, iteration);
    report.dml = losses.dml;
    report.focal_cb = losses.cls.focal;
    report.kl = losses.cls.kl;
    report.delta = losses.cls.delta;
    report.total = losses.dml + losses.cls.total.value;
    if (!std::isfinite(report.total)) {
        throw NumericError("train_step: non-finite loss at iteration " + std::to_string(iteration) +
                           describe_batch(batch));
    }

    if (config.fused_update) {
        const GradientSet grads = backward(state.model, fwd, losses.d_embeddings, *losses.cls.total.grad_logits);
        sgd_step(state.model, state.optimizer, grads);
    } else {
        // Metric-loss step on the backbone, then the classification step on the whole
        // network evaluated at the updated backbone.
        if (losses.d_embeddings.size()) {
            const GradientSet dml_grads = backward(state.model, fwd, losses.d_embeddings, Matrix());
            apply_backbone_update(state.model, report.lr, dml_grads);
        }
        const ForwardResult refreshed = forward(state.model, batch.features);
        const ClsLossParts cls = cls_loss_parts(refreshed.logits, batch.labels, batch.memory_mask,
                                                batch.soft_targets, counts, iteration, config.loss);
        sgd_step(state.model, state.optimizer, backward(state.model, refreshed, Matrix(), *cls.total.grad_logits));
    }

    if (config.use_memory) {
        // Scores and stored logits come from this step's forward pass over the stream rows.
        std::vector<MemoryEntry> candidates;
        candidates.reserve(stream_batch.size());
        for (std::size_t i = 0; i < stream_batch.size(); ++i) {
            const RowVector logits = fwd.logits.row(static_cast<Eigen::Index>(i));
            const RowVector probs = softmax_row(logits);
            const double score = sampling_score(probs, argmax(probs), stream_batch[i].label);
            candidates.push_back({stream_batch[i], logits, score, iteration});
        }
        report.inserted = state.memory.online_update(std::move(candidates));
        if (state.memory.full() || iteration % config.periodic_interval == 0) {
            state.memory.periodic_update(stream_batch, state.model, policy, iteration,
                                         config.refresh_logits);
            report.periodic_update = true;
        }
    }
    report.memory_size = state.memory.size();
    return report;
}

std::vector<std::vector<LabeledExample>> make_holdouts(const TrainConfig& config)
{
    const StreamConfig sc = config.stream_config();
    std::vector<std::vector<LabeledExample>> out;
    for (int t = 0; t < sc.num_tasks(); ++t) out.push_back(holdout_set(sc, t, config.holdout_per_class));
    return out;
}

RunResult run(const TrainConfig& config, const RunOptions& options)
{
    const auto started = std::chrono::steady_clock::now();
    config.validate();
    RunResult result{TrainState::initial(config), {}, {}, std::nullopt, 0, 0.0};
    const StreamConfig stream_config = config.stream_config();
    Stream stream(stream_config);
    const auto holdouts = make_holdouts(config);

    std::ofstream steps_out;
    if (options.out_dir) {
        std::filesystem::create_directories(*options.out_dir);
        steps_out.open(*options.out_dir / "steps.jsonl");
        if (!steps_out) throw std::runtime_error("cannot write steps.jsonl in " + options.out_dir->string());
    }

    auto evaluate_at = [&](std::int64_t done) {
        const int seen = task_at(stream_config, done - 1) + 1;
        result.reports.push_back(evaluate(result.state.model,
                                          std::span(holdouts).first(static_cast<std::size_t>(seen)),
                                          config.geometry.num_classes, done));
        if (options.out_dir && config.save_checkpoints) {
            std::ostringstream name;
            name << "iter_" << std::setw(6) << std::setfill('0') << done;
            save_checkpoint(*options.out_dir / "checkpoints" / name.str(), result.state.model,
                            result.state.optimizer);
        }
    };

    auto write_summary = [&](const char* status) {
        if (!options.out_dir) return;
        if (!result.reports.empty()) result.amca = amca(result.reports);
        nlohmann::json reports = nlohmann::json::array();
        for (const auto& r : result.reports) reports.push_back(to_json(r));
        std::ostringstream hash;
        hash << std::hex << std::setw(16) << std::setfill('0') << config_hash(config);
        const nlohmann::json summary = {
            {"status", status},
            {"amca", result.amca ? nlohmann::json(*result.amca) : nlohmann::json()},
            {"reports", reports},
            {"config_hash", hash.str()},
            {"seed", config.seed},
            {"iterations", result.state.optimizer.iteration},
            {"max_memory_size", result.max_memory_size},
            {"final_memory_size", result.state.memory.size()},
            {"wall_seconds", result.wall_seconds}};
        std::ofstream(*options.out_dir / "summary.json") << summary.dump(2) << '\n';
        std::ofstream(*options.out_dir / "config.ini") << print_config(config);
        result.state.memory.dump(*options.out_dir / "memory.csv");
    };

    try {
        for (std::int64_t t = 0; t < config.total_iterations; ++t) {
            const auto batch = stream.next_batch(config.stream_batch);
            StepReport report = train_step(result.state, batch, config, t);
            result.max_memory_size = std::max(result.max_memory_size, report.memory_size);
            if (steps_out) steps_out << to_json(report).dump() << '\n';
            if (options.on_step) options.on_step(report);
            if (options.keep_steps) result.steps.push_back(std::move(report));
            const std::int64_t done = t + 1;
            if (done % config.eval_interval == 0 || done == config.total_iterations) evaluate_at(done);
        }
    } catch (const std::exception& e) {
        spdlog::error("run aborted: {}", e.what());
        result.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - started).count();
        steps_out.flush();
        write_summary("aborted");
        throw;
    }

    if (!result.reports.empty()) result.amca = amca(result.reports);
    result.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - started).count();
    write_summary("ok");
    if (options.dump_memory) result.state.memory.dump(*options.dump_memory);
    return result;
}

} // namespace oclearn
