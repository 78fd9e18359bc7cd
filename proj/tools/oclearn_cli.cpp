// Command-line entry point: train, eval, ablate, holdout, print-config.

#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <spdlog/spdlog.h>

#include "oclearn/ablation.hpp"
#include "oclearn/config.hpp"
#include "oclearn/evaluation.hpp"
#include "oclearn/trainer.hpp"

namespace fs = std::filesystem;
using namespace oclearn;

namespace {

struct CommonArgs {
    std::string config;
    std::string stream_config;
    std::optional<std::uint64_t> seed;
    std::vector<std::string> overrides;
};

void add_common(CLI::App* cmd, CommonArgs& args)
{
    cmd->add_option("--config", args.config, "INI run configuration")->check(CLI::ExistingFile);
    cmd->add_option("--stream-config", args.stream_config, "INI file with a [stream] section")
        ->check(CLI::ExistingFile);
    cmd->add_option("--seed", args.seed, "run seed");
    cmd->add_option("--set", args.overrides, "override a config value, e.g. --set loss.tau=0.7");
}

TrainConfig resolve_config(const CommonArgs& args)
{
    TrainConfig config = args.config.empty() ? TrainConfig{} : load_train_config(args.config);
    if (!args.stream_config.empty()) apply_stream_config_file(config, args.stream_config);
    for (const auto& o : args.overrides) set_config_value(config, o);
    if (args.seed) set_config_value(config, "train.seed=" + std::to_string(*args.seed));
    return config;
}

int cmd_train(const CommonArgs& args, const std::string& out, const std::string& dump_memory,
              std::optional<std::int64_t> iterations, bool quiet)
{
    TrainConfig config = resolve_config(args);
    if (iterations) set_config_value(config, "train.total_iterations=" + std::to_string(*iterations));
    RunOptions options;
    if (!out.empty()) options.out_dir = fs::path(out);
    if (!dump_memory.empty()) options.dump_memory = fs::path(dump_memory);
    if (!quiet) {
        options.on_step = [&](const StepReport& r) {
            if ((r.iteration + 1) % config.eval_interval == 0)
                spdlog::info("iter {:5d}  loss {:.4f}  lr {:.6f}  memory {}", r.iteration + 1, r.total, r.lr,
                             r.memory_size);
        };
    }
    const RunResult result = run(config, options);
    nlohmann::json summary = {{"amca", result.amca ? nlohmann::json(*result.amca) : nlohmann::json()},
                              {"checkpoints", result.reports.size()},
                              {"max_memory_size", result.max_memory_size},
                              {"wall_seconds", result.wall_seconds}};
    std::cout << summary.dump(2) << '\n';
    return 0;
}

int cmd_eval(const CommonArgs& args, const std::string& checkpoint, bool all_tasks, std::optional<int> per_class)
{
    TrainConfig config = resolve_config(args);
    if (per_class) config.holdout_per_class = *per_class;
    const auto [model, opt] = load_checkpoint(checkpoint);
    if (model.input_dim() != config.geometry.dim || model.num_classes() != config.geometry.num_classes)
        throw ShapeError("checkpoint dimensions do not match the stream config");
    const StreamConfig sc = config.stream_config();
    auto holdouts = make_holdouts(config);
    if (!all_tasks && model.iteration > 0)
        holdouts.resize(static_cast<std::size_t>(task_at(sc, model.iteration - 1) + 1));
    const EvalReport report = evaluate(model, holdouts, config.geometry.num_classes, model.iteration);
    std::cout << to_json(report).dump(2) << '\n';
    return 0;
}

int cmd_ablate(const std::string& base_path, const std::string& variants_dir, int seeds, std::uint64_t first_seed,
               const std::string& out, unsigned jobs, std::optional<std::int64_t> iterations)
{
    ConfigTree base = to_tree(TrainConfig{});
    if (!base_path.empty()) merge_tree(base, read_config_tree(base_path));
    if (iterations) base.put_child(ConfigTree::path_type("train/total_iterations", '/'),
                                   ConfigTree(std::to_string(*iterations)));
    const auto variants = variants_dir.empty() ? builtin_variants() : load_variants(variants_dir);
    std::vector<std::uint64_t> seed_list;
    for (int i = 0; i < seeds; ++i) seed_list.push_back(first_seed + static_cast<std::uint64_t>(i));
    const AblationTable table = run_ablation(base, variants, seed_list, jobs);
    if (const auto parent = fs::path(out).parent_path(); !parent.empty()) fs::create_directories(parent);
    write_results_csv(out, table);
    const auto summaries = summarize(table);
    const std::string md = render_markdown(summaries);
    fs::path md_path = fs::path(out).replace_extension(".md");
    std::ofstream(md_path) << md;
    std::cout << md;
    for (const auto& row : table.rows)
        if (!row.ok) spdlog::warn("{} seed {} failed: {}", row.variant, row.seed, row.error);
    return 0;
}

int cmd_holdout(const CommonArgs& args, int task, int per_class, const std::string& out)
{
    const TrainConfig config = resolve_config(args);
    const auto set = holdout_set(config.stream_config(), task, per_class);
    write_examples_csv(out, set);
    return 0;
}

} // namespace

int main(int argc, char** argv)
{
    CLI::App app{"Online continual learning with metric losses and uncertainty-guided replay"};
    app.require_subcommand(0, 1);
    bool print_config_flag = false;
    app.add_flag("--print-config", print_config_flag, "print the default configuration and exit");

    CommonArgs train_args;
    std::string train_out;
    std::string dump_memory;
    std::optional<std::int64_t> train_iterations;
    bool quiet = false;
    bool train_print = false;
    auto* train = app.add_subcommand("train", "train on the synthetic stream");
    add_common(train, train_args);
    train->add_option("--out", train_out, "output directory for steps.jsonl, checkpoints/, memory.csv, summary.json");
    train->add_option("--dump-memory", dump_memory, "write the final memory snapshot here");
    train->add_option("--iterations", train_iterations, "override train.total_iterations");
    train->add_flag("--quiet", quiet, "no progress lines");
    train->add_flag("--print-config", train_print, "print the resolved configuration and exit");

    CommonArgs eval_args;
    std::string checkpoint;
    bool all_tasks = false;
    std::optional<int> eval_per_class;
    auto* eval = app.add_subcommand("eval", "evaluate a checkpoint on holdouts");
    add_common(eval, eval_args);
    eval->add_option("--checkpoint", checkpoint, "checkpoint directory")->required()->check(CLI::ExistingDirectory);
    eval->add_flag("--all-tasks", all_tasks, "evaluate on every task, not only those seen by the checkpoint");
    eval->add_option("--holdout-per-class", eval_per_class, "holdout examples per class and task");

    std::string ablate_base;
    std::string variants_dir;
    int seeds = 5;
    std::uint64_t first_seed = 0;
    std::string ablate_out = "results.csv";
    unsigned jobs = 1;
    std::optional<std::int64_t> ablate_iterations;
    auto* ablate = app.add_subcommand("ablate", "run the ablation harness");
    ablate->add_option("--base", ablate_base, "base configuration")->check(CLI::ExistingFile);
    ablate->add_option("--variants", variants_dir, "directory of variant .ini deltas (default: built-in rows)")
        ->check(CLI::ExistingDirectory);
    ablate->add_option("--seeds", seeds, "number of seeds")->check(CLI::PositiveNumber);
    ablate->add_option("--first-seed", first_seed, "first seed");
    ablate->add_option("--out", ablate_out, "results CSV; the markdown table goes next to it");
    ablate->add_option("--jobs", jobs, "parallel runs");
    ablate->add_option("--iterations", ablate_iterations, "override train.total_iterations");

    CommonArgs holdout_args;
    int task = 0;
    int per_class = 100;
    std::string holdout_out;
    auto* holdout = app.add_subcommand("holdout", "export a task's holdout set as CSV");
    add_common(holdout, holdout_args);
    holdout->add_option("--task", task, "task index");
    holdout->add_option("--n-per-class", per_class, "examples per class");
    holdout->add_option("--out", holdout_out, "CSV path")->required();

    CLI11_PARSE(app, argc, argv);

    try {
        if (print_config_flag) {
            std::cout << print_config(TrainConfig{});
            return 0;
        }
        if (*train) {
            if (train_print) {
                std::cout << print_config(resolve_config(train_args));
                return 0;
            }
            return cmd_train(train_args, train_out, dump_memory, train_iterations, quiet);
        }
        if (*eval) return cmd_eval(eval_args, checkpoint, all_tasks, eval_per_class);
        if (*ablate) return cmd_ablate(ablate_base, variants_dir, seeds, first_seed, ablate_out, jobs, ablate_iterations);
        if (*holdout) return cmd_holdout(holdout_args, task, per_class, holdout_out);
        std::cout << app.help();
        return 0;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << '\n';
        return 1;
    }
}
