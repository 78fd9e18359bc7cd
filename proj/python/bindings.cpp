#include <sstream>

#include <boost/property_tree/ini_parser.hpp>
#include <pybind11/eigen.h>
#include <pybind11/functional.h>
#include <pybind11/stl.h>
#include <pybind11/stl/filesystem.h>

#include "oclearn/ablation.hpp"
#include "oclearn/trainer.hpp"

namespace py = pybind11;
using namespace oclearn;

namespace {

// Examples travel to Python as (ids, features, labels) arrays.
py::tuple examples_to_arrays(const std::vector<LabeledExample>& examples)
{
    std::vector<std::int64_t> ids;
    std::vector<int> labels;
    for (const auto& ex : examples) {
        ids.push_back(ex.id);
        labels.push_back(ex.label);
    }
    return py::make_tuple(py::array(py::cast(ids)), stack_features(examples), py::array(py::cast(labels)));
}

std::vector<MemoryEntry> entries_from(const std::vector<std::int64_t>& ids, const std::vector<int>& labels,
                                      const std::vector<double>& scores, const std::vector<std::int64_t>& inserted_at)
{
    if (labels.size() != ids.size() || scores.size() != ids.size() || inserted_at.size() != ids.size())
        throw ShapeError("ids, labels, scores and inserted_at must have equal length");
    std::vector<MemoryEntry> out(ids.size());
    for (std::size_t i = 0; i < ids.size(); ++i) {
        out[i].example = {ids[i], Vector::Zero(1), labels[i]};
        out[i].stored_logits = RowVector::Zero(1);
        out[i].score = scores[i];
        out[i].inserted_at = inserted_at[i];
    }
    return out;
}

std::vector<std::int64_t> ids_of(const std::vector<MemoryEntry>& entries)
{
    std::vector<std::int64_t> ids;
    for (const auto& e : entries) ids.push_back(e.example.id);
    return ids;
}

py::tuple loss_pair(const LossOutput& out)
{
    if (out.grad_embeddings) return py::make_tuple(out.value, *out.grad_embeddings);
    if (out.grad_logits) return py::make_tuple(out.value, *out.grad_logits);
    return py::make_tuple(out.value, py::none());
}

LossConfig loss_config(const py::kwargs& kw)
{
    LossConfig c;
    for (const auto& [key, value] : kw) {
        const auto k = key.cast<std::string>();
        if (k == "alpha_dml") c.alpha_dml = value.cast<double>();
        else if (k == "beta_dml") c.beta_dml = value.cast<double>();
        else if (k == "margin") c.margin = value.cast<double>();
        else if (k == "supcon_temp") c.supcon_temp = value.cast<double>();
        else if (k == "tau") c.tau = value.cast<double>();
        else if (k == "focal_alpha") c.focal_alpha = value.cast<double>();
        else if (k == "focal_gamma") c.focal_gamma = value.cast<double>();
        else if (k == "cb_beta") c.cb_beta = value.cast<double>();
        else if (k == "gamma_cls") c.gamma_cls = value.cast<double>();
        else if (k == "reverse_kl") c.kl_direction = value.cast<bool>() ? KlDirection::Reverse : KlDirection::Forward;
        else if (k == "kl_student_temperature") c.kl_student_temperature = value.cast<bool>();
        else if (k == "delta_schedule") c.delta_schedule = value.cast<std::vector<std::pair<std::int64_t, double>>>();
        else throw ConfigError("unknown loss option: " + k);
    }
    c.validate();
    return c;
}

py::dict run_summary(const RunResult& r)
{
    py::dict d;
    d["amca"] = r.amca ? py::cast(*r.amca) : py::none();
    std::vector<double> mcas;
    std::vector<std::int64_t> iterations;
    for (const auto& rep : r.reports) {
        mcas.push_back(rep.mca);
        iterations.push_back(rep.iteration);
    }
    d["mcas"] = mcas;
    d["eval_iterations"] = iterations;
    d["iterations"] = r.state.optimizer.iteration;
    d["max_memory_size"] = r.max_memory_size;
    d["final_memory_size"] = r.state.memory.size();
    d["wall_seconds"] = r.wall_seconds;
    return d;
}

} // namespace

PYBIND11_MODULE(_core, m)
{
    m.doc() = "Online continual learning engine: synthetic stream, losses, episodic memory, trainer.";

    py::register_exception<ConfigError>(m, "ConfigError", PyExc_ValueError);
    py::register_exception<ShapeError>(m, "ShapeError", PyExc_ValueError);
    py::register_exception<NumericError>(m, "NumericError", PyExc_ArithmeticError);

    py::class_<TrainConfig>(m, "TrainConfig")
        .def(py::init<>())
        .def_static("load", &load_train_config, py::arg("path"))
        .def_static(
            "from_ini",
            [](const std::string& text) {
                ConfigTree tree;
                std::istringstream in(text);
                boost::property_tree::read_ini(in, tree);
                return from_tree(tree);
            },
            py::arg("text"))
        .def("to_ini", &print_config)
        .def("set", &set_config_value, py::arg("assignment"), "Apply `section.key=value`.")
        .def("apply_stream_config", &apply_stream_config_file, py::arg("path"))
        .def("hash", &config_hash)
        .def("validate", &TrainConfig::validate)
        .def_readwrite("seed", &TrainConfig::seed)
        .def_readwrite("total_iterations", &TrainConfig::total_iterations)
        .def_readwrite("eval_interval", &TrainConfig::eval_interval)
        .def_readwrite("holdout_per_class", &TrainConfig::holdout_per_class)
        .def_readwrite("use_memory", &TrainConfig::use_memory)
        .def("__repr__", [](const TrainConfig& c) {
            return "<TrainConfig seed=" + std::to_string(c.seed) + " iterations=" +
                   std::to_string(c.total_iterations) + ">";
        });

    m.def(
        "train",
        [](const TrainConfig& config, std::optional<std::filesystem::path> out_dir,
           std::function<void(py::dict)> on_step) {
            RunOptions opts;
            opts.out_dir = std::move(out_dir);
            if (on_step) {
                opts.on_step = [&](const StepReport& r) {
                    py::gil_scoped_acquire gil;
                    on_step(py::module_::import("json").attr("loads")(to_json(r).dump()));
                };
            }
            std::optional<RunResult> r;
            {
                py::gil_scoped_release release;
                r.emplace(run(config, opts));
            }
            return run_summary(*r);
        },
        py::arg("config"), py::arg("out_dir") = py::none(), py::arg("on_step") = py::none(),
        "Run training; returns AMCA, per-checkpoint MCAs and memory statistics.");

    m.def(
        "ablate",
        [](const TrainConfig& base, const std::vector<std::uint64_t>& seeds, unsigned jobs) {
            AblationTable t;
            {
                py::gil_scoped_release release;
                t = run_ablation(to_tree(base), builtin_variants(), seeds, jobs);
            }
            py::list rows;
            for (const auto& r : t.rows) {
                py::dict d;
                d["variant"] = r.variant;
                d["seed"] = r.seed;
                d["ok"] = r.ok;
                d["amca"] = r.amca;
                d["mcas"] = r.mcas;
                d["error"] = r.error;
                rows.append(d);
            }
            return rows;
        },
        py::arg("base"), py::arg("seeds"), py::arg("jobs") = 1,
        "Run the base config and the built-in cumulative variants for each seed.");

    // Stream
    py::class_<StreamConfig>(m, "StreamConfig")
        .def_readonly("num_classes", &StreamConfig::num_classes)
        .def_readonly("dim", &StreamConfig::dim)
        .def_readonly("class_priors", &StreamConfig::class_priors)
        .def_readonly("task_lengths", &StreamConfig::task_lengths)
        .def_readonly("seed", &StreamConfig::seed)
        .def_property_readonly("num_tasks", &StreamConfig::num_tasks);
    m.def("default_stream_config", &default_stream_config, py::arg("seed") = 0);
    m.def("stream_config", [](const TrainConfig& c) { return c.stream_config(); }, py::arg("config"));
    m.def("load_stream_config", &load_stream_config, py::arg("path"), py::arg("run_seed") = 0);

    py::class_<Stream>(m, "Stream")
        .def(py::init<StreamConfig>(), py::arg("config"))
        .def(
            "next_batch", [](Stream& s, std::size_t k) { return examples_to_arrays(s.next_batch(k)); },
            py::arg("k"), "Returns (ids, features, labels).")
        .def_property_readonly("iteration", &Stream::iteration);
    m.def(
        "holdout_set",
        [](const StreamConfig& c, int task, int n) { return examples_to_arrays(holdout_set(c, task, n)); },
        py::arg("config"), py::arg("task"), py::arg("n_per_class"));

    // Losses: each returns (value, gradient).
    m.def(
        "contrastive_loss",
        [](const Matrix& z, const std::vector<int>& y, double margin) { return loss_pair(contrastive_loss(z, y, margin)); },
        py::arg("embeddings"), py::arg("labels"), py::arg("margin") = 1.0);
    m.def(
        "supcon_loss",
        [](const Matrix& z, const std::vector<int>& y, double t) { return loss_pair(supcon_loss(z, y, t)); },
        py::arg("embeddings"), py::arg("labels"), py::arg("temperature") = 0.1);
    m.def(
        "dml_loss",
        [](const Matrix& z, const std::vector<int>& y, const py::kwargs& kw) {
            return loss_pair(dml_loss(z, y, loss_config(kw)));
        },
        py::arg("embeddings"), py::arg("labels"));
    m.def(
        "cb_focal_loss",
        [](const Matrix& logits, const std::vector<int>& y, std::optional<std::vector<int>> counts,
           const py::kwargs& kw) {
            const auto n = counts ? *counts : class_counts(y, static_cast<int>(logits.cols()));
            return loss_pair(cb_focal_loss(logits, y, n, loss_config(kw)));
        },
        py::arg("logits"), py::arg("labels"), py::arg("counts") = py::none());
    m.def(
        "kl_retrospection",
        [](const Matrix& logits, const Matrix& targets, const py::kwargs& kw) {
            return loss_pair(kl_retrospection(logits, targets, loss_config(kw)));
        },
        py::arg("logits"), py::arg("soft_targets"));
    m.def(
        "soft_labels", [](const Matrix& logits, double tau) { return soft_labels(logits, tau); }, py::arg("logits"),
        py::arg("tau") = 0.5);
    m.def("class_balanced_weight", &class_balanced_weight, py::arg("count"), py::arg("beta"));
    m.def(
        "delta_at", [](std::int64_t it, const py::kwargs& kw) { return delta_at(loss_config(kw), it); },
        py::arg("iteration"));

    // Memory scoring and selection.
    m.def("sampling_score", &sampling_score, py::arg("probs"), py::arg("predicted"), py::arg("label"));
    m.def(
        "mc_uncertainty_from_votes",
        [](const std::vector<int>& votes, int classes) { return mc_uncertainty_from_votes(votes, classes); },
        py::arg("votes"), py::arg("num_classes"));
    m.def(
        "current_lr",
        [](std::int64_t iteration, double base_lr, std::vector<std::int64_t> milestones, double decay) {
            OptimizerState o;
            o.base_lr = base_lr;
            o.milestones = std::move(milestones);
            o.decay_factor = decay;
            o.iteration = iteration;
            o.validate();
            return o.current_lr();
        },
        py::arg("iteration"), py::arg("base_lr") = 0.0111,
        py::arg("milestones") = std::vector<std::int64_t>{1000, 2000}, py::arg("decay") = 0.1);

    py::class_<EpisodicMemory>(m, "EpisodicMemory", "Memory over (id, label, score, inserted_at) records.")
        .def(py::init<std::size_t, std::size_t, std::size_t>(), py::arg("capacity") = 1000,
             py::arg("online_quota") = 5, py::arg("keep_size") = 500)
        .def(
            "online_update",
            [](EpisodicMemory& mem, const std::vector<std::int64_t>& ids, const std::vector<int>& labels,
               const std::vector<double>& scores, const std::vector<std::int64_t>& inserted_at) {
                return mem.online_update(entries_from(ids, labels, scores, inserted_at));
            },
            py::arg("ids"), py::arg("labels"), py::arg("scores"), py::arg("inserted_at"))
        .def(
            "periodic_update_scored",
            [](EpisodicMemory& mem, const std::vector<std::int64_t>& ids, const std::vector<int>& labels,
               const std::vector<double>& scores, const std::vector<std::int64_t>& inserted_at) {
                mem.periodic_update_scored(entries_from(ids, labels, scores, inserted_at));
            },
            py::arg("ids"), py::arg("labels"), py::arg("scores"), py::arg("inserted_at"))
        .def(
            "sample_replay",
            [](const EpisodicMemory& mem, std::size_t n, std::uint64_t seed) {
                return ids_of(mem.sample_replay(n, seed));
            },
            py::arg("n"), py::arg("seed"))
        .def("ids", [](const EpisodicMemory& mem) { return ids_of(mem.entries()); })
        .def("__len__", &EpisodicMemory::size)
        .def_property_readonly("capacity", &EpisodicMemory::capacity)
        .def_property_readonly("full", &EpisodicMemory::full);

    m.def(
        "mean_class_accuracy",
        [](const std::vector<double>& acc, const std::vector<int>& support) {
            return mean_class_accuracy(acc, support);
        },
        py::arg("per_class"), py::arg("support"));
}
