#include "oclearn/config.hpp"

#include <charconv>
#include <fstream>
#include <regex>
#include <set>
#include <sstream>

#include <boost/property_tree/ini_parser.hpp>

namespace oclearn {

namespace {

std::string format_double(double v)
{
    char buf[64];
    const auto res = std::to_chars(buf, buf + sizeof(buf), v);
    return std::string(buf, res.ptr);
}

template <typename T>
std::string join(const std::vector<T>& values)
{
    std::ostringstream out;
    for (std::size_t i = 0; i < values.size(); ++i) {
        if (i) out << ',';
        if constexpr (std::is_floating_point_v<T>)
            out << format_double(values[i]);
        else
            out << values[i];
    }
    return out.str();
}

std::vector<std::string> split(const std::string& text, char sep)
{
    std::vector<std::string> parts;
    std::string item;
    std::istringstream in(text);
    while (std::getline(in, item, sep)) {
        const auto b = item.find_first_not_of(" \t");
        const auto e = item.find_last_not_of(" \t");
        if (b == std::string::npos) continue;
        parts.push_back(item.substr(b, e - b + 1));
    }
    return parts;
}

double parse_double(const std::string& key, const std::string& text)
{
    try {
        std::size_t used = 0;
        const double v = std::stod(text, &used);
        if (used != text.size()) throw std::invalid_argument(text);
        return v;
    } catch (const std::exception&) {
        throw ConfigError("config: '" + key + "' expects a number, got '" + text + "'");
    }
}

std::int64_t parse_int(const std::string& key, const std::string& text)
{
    try {
        std::size_t used = 0;
        const long long v = std::stoll(text, &used);
        if (used != text.size()) throw std::invalid_argument(text);
        return v;
    } catch (const std::exception&) {
        throw ConfigError("config: '" + key + "' expects an integer, got '" + text + "'");
    }
}

std::size_t parse_count(const std::string& key, const std::string& text)
{
    const auto v = parse_int(key, text);
    if (v < 0) throw ConfigError("config: '" + key + "' must be non-negative");
    return static_cast<std::size_t>(v);
}

bool parse_bool(const std::string& key, const std::string& text)
{
    if (text == "true" || text == "1" || text == "yes" || text == "on") return true;
    if (text == "false" || text == "0" || text == "no" || text == "off") return false;
    throw ConfigError("config: '" + key + "' expects a boolean, got '" + text + "'");
}

std::vector<double> parse_doubles(const std::string& key, const std::string& text)
{
    std::vector<double> out;
    for (const auto& part : split(text, ',')) out.push_back(parse_double(key, part));
    return out;
}

std::vector<std::int64_t> parse_ints(const std::string& key, const std::string& text)
{
    std::vector<std::int64_t> out;
    for (const auto& part : split(text, ',')) out.push_back(parse_int(key, part));
    return out;
}

class TreeReader {
public:
    explicit TreeReader(const ConfigTree& tree) : tree_(tree) {}

    std::string get(const std::string& section, const std::string& key)
    {
        const std::string path = section + "." + key;
        seen_.insert(path);
        const auto sec = tree_.get_child_optional(section);
        if (!sec) throw ConfigError("config: missing section [" + section + "]");
        const auto value = sec->get_optional<std::string>(ConfigTree::path_type(key, '/'));
        if (!value) throw ConfigError("config: missing key '" + path + "'");
        return *value;
    }

    /// Keys of a section matching a pattern, marked as consumed.
    std::vector<std::pair<std::smatch, std::string>> matching(const std::string& section, const std::regex& pattern,
                                                              std::vector<std::string>& storage)
    {
        std::vector<std::pair<std::smatch, std::string>> out;
        const auto sec = tree_.get_child_optional(section);
        if (!sec) return out;
        storage.clear();
        for (const auto& [key, node] : *sec) storage.push_back(key);
        for (const auto& key : storage) {
            std::smatch m;
            if (std::regex_match(key, m, pattern)) {
                seen_.insert(section + "." + key);
                out.emplace_back(m, sec->get<std::string>(ConfigTree::path_type(key, '/')));
            }
        }
        return out;
    }

    void reject_unknown() const
    {
        for (const auto& [section, node] : tree_) {
            if (node.empty()) throw ConfigError("config: key '" + section + "' must live inside a section");
            for (const auto& [key, leaf] : node) {
                if (!seen_.count(section + "." + key))
                    throw ConfigError("config: unknown key '" + section + "." + key + "'");
            }
        }
    }

private:
    const ConfigTree& tree_;
    std::set<std::string> seen_;
};

void put(ConfigTree& tree, const std::string& section, const std::string& key, const std::string& value)
{
    tree.put_child(ConfigTree::path_type(section + "/" + key, '/'), ConfigTree(value));
}

} // namespace

void TrainConfig::validate() const
{
    stream_config();  // validates the stream
    if (model.num_classes != geometry.num_classes || model.input_dim != geometry.dim)
        throw ConfigError("config: model dimensions must match the stream");
    optimizer.validate();
    loss.validate();
    perturbation.validate();
    if (stream_batch == 0) throw ConfigError("config: stream_batch must be positive");
    if (keep_size > capacity) throw ConfigError("config: keep_size cannot exceed capacity");
    if (use_memory && replay_batch > keep_size) throw ConfigError("config: replay_batch cannot exceed keep_size");
    if (periodic_interval <= 0) throw ConfigError("config: periodic_interval must be positive");
    if (total_iterations < 0) throw ConfigError("config: total_iterations must be non-negative");
    if (eval_interval <= 0) throw ConfigError("config: eval interval must be positive");
    if (holdout_per_class < 0) throw ConfigError("config: holdout_per_class must be non-negative");
}

StreamConfig TrainConfig::stream_config() const
{
    StreamConfig sc = make_stream_config(geometry, mix_seed({seed, stream_seed}), priors);
    for (const auto& [task, p] : task_priors) {
        if (task < 0 || task >= sc.num_tasks()) throw ConfigError("config: priors override for unknown task");
        sc.class_priors[task] = p;
    }
    for (const auto& [key, mean] : task_means) {
        const auto [task, cls] = key;
        if (task < 0 || task >= sc.num_tasks() || cls < 0 || cls >= sc.num_classes)
            throw ConfigError("config: mean override for unknown task/class");
        sc.task_means[task][cls] = Eigen::Map<const Vector>(mean.data(), static_cast<Eigen::Index>(mean.size()));
    }
    sc.drift_width = drift_width;
    sc.validate();
    return sc;
}

ConfigTree to_tree(const TrainConfig& c)
{
    ConfigTree t;
    const auto& g = c.geometry;
    put(t, "stream", "num_classes", std::to_string(g.num_classes));
    put(t, "stream", "dim", std::to_string(g.dim));
    put(t, "stream", "num_tasks", std::to_string(g.num_tasks));
    put(t, "stream", "task_length", std::to_string(g.task_length));
    put(t, "stream", "class_separation", format_double(g.class_separation));
    put(t, "stream", "task_shift", format_double(g.task_shift));
    put(t, "stream", "domain_shift", format_double(g.domain_shift));
    put(t, "stream", "noise_scale", format_double(g.noise_scale));
    put(t, "stream", "prior_rotation", std::to_string(g.prior_rotation));
    put(t, "stream", "geometry_seed", std::to_string(g.geometry_seed));
    put(t, "stream", "seed", std::to_string(c.stream_seed));
    put(t, "stream", "drift_width", std::to_string(c.drift_width));
    put(t, "stream", "priors", join(c.priors));
    for (const auto& [task, p] : c.task_priors) put(t, "stream", "priors_" + std::to_string(task), join(p));
    for (const auto& [key, m] : c.task_means)
        put(t, "stream", "mean_" + std::to_string(key.first) + "_" + std::to_string(key.second), join(m));

    put(t, "model", "hidden", join(c.model.hidden));
    put(t, "model", "embedding_dim", std::to_string(c.model.embedding_dim));
    put(t, "model", "hidden_activation", to_string(c.model.hidden_activation));
    put(t, "model", "embedding_activation", to_string(c.model.embedding_activation));

    put(t, "optimizer", "base_lr", format_double(c.optimizer.base_lr));
    put(t, "optimizer", "milestones", join(c.optimizer.milestones));
    put(t, "optimizer", "decay_factor", format_double(c.optimizer.decay_factor));

    const auto& l = c.loss;
    put(t, "loss", "alpha_dml", format_double(l.alpha_dml));
    put(t, "loss", "beta_dml", format_double(l.beta_dml));
    put(t, "loss", "margin", format_double(l.margin));
    put(t, "loss", "supcon_temp", format_double(l.supcon_temp));
    put(t, "loss", "tau", format_double(l.tau));
    put(t, "loss", "kl_direction", l.kl_direction == KlDirection::Forward ? "forward" : "reverse");
    put(t, "loss", "kl_student_temperature", l.kl_student_temperature ? "true" : "false");
    put(t, "loss", "focal_alpha", format_double(l.focal_alpha));
    put(t, "loss", "focal_gamma", format_double(l.focal_gamma));
    put(t, "loss", "cb_beta", format_double(l.cb_beta));
    put(t, "loss", "gamma_cls", format_double(l.gamma_cls));
    std::ostringstream sched;
    for (std::size_t i = 0; i < l.delta_schedule.size(); ++i)
        sched << (i ? "," : "") << l.delta_schedule[i].first << ':' << format_double(l.delta_schedule[i].second);
    put(t, "loss", "delta_schedule", sched.str());

    put(t, "memory", "enabled", c.use_memory ? "true" : "false");
    put(t, "memory", "capacity", std::to_string(c.capacity));
    put(t, "memory", "online_quota", std::to_string(c.online_quota));
    put(t, "memory", "keep_size", std::to_string(c.keep_size));
    put(t, "memory", "periodic_interval", std::to_string(c.periodic_interval));
    put(t, "memory", "refresh_logits", c.refresh_logits ? "true" : "false");
    put(t, "memory", "mc_passes", std::to_string(c.perturbation.passes));
    put(t, "memory", "perturbation_scale", format_double(c.perturbation.scale));
    put(t, "memory", "scale_jitter", c.perturbation.scale_jitter ? "true" : "false");

    put(t, "train", "seed", std::to_string(c.seed));
    put(t, "train", "stream_batch", std::to_string(c.stream_batch));
    put(t, "train", "replay_batch", std::to_string(c.replay_batch));
    put(t, "train", "total_iterations", std::to_string(c.total_iterations));
    put(t, "train", "fused_update", c.fused_update ? "true" : "false");

    put(t, "eval", "interval", std::to_string(c.eval_interval));
    put(t, "eval", "holdout_per_class", std::to_string(c.holdout_per_class));
    put(t, "eval", "save_checkpoints", c.save_checkpoints ? "true" : "false");
    return t;
}

TrainConfig from_tree(const ConfigTree& tree)
{
    TreeReader r(tree);
    TrainConfig c;
    auto& g = c.geometry;
    g.num_classes = static_cast<int>(parse_int("stream.num_classes", r.get("stream", "num_classes")));
    g.dim = static_cast<int>(parse_int("stream.dim", r.get("stream", "dim")));
    g.num_tasks = static_cast<int>(parse_int("stream.num_tasks", r.get("stream", "num_tasks")));
    g.task_length = parse_int("stream.task_length", r.get("stream", "task_length"));
    g.class_separation = parse_double("stream.class_separation", r.get("stream", "class_separation"));
    g.task_shift = parse_double("stream.task_shift", r.get("stream", "task_shift"));
    g.domain_shift = parse_double("stream.domain_shift", r.get("stream", "domain_shift"));
    g.noise_scale = parse_double("stream.noise_scale", r.get("stream", "noise_scale"));
    g.prior_rotation = static_cast<int>(parse_int("stream.prior_rotation", r.get("stream", "prior_rotation")));
    g.geometry_seed = static_cast<std::uint64_t>(parse_int("stream.geometry_seed", r.get("stream", "geometry_seed")));
    c.stream_seed = static_cast<std::uint64_t>(parse_int("stream.seed", r.get("stream", "seed")));
    c.drift_width = parse_int("stream.drift_width", r.get("stream", "drift_width"));
    c.priors = parse_doubles("stream.priors", r.get("stream", "priors"));
    std::vector<std::string> keys;
    for (const auto& [m, value] : r.matching("stream", std::regex(R"(priors_(\d+))"), keys))
        c.task_priors[std::stoi(m[1].str())] = parse_doubles("stream.priors_*", value);
    for (const auto& [m, value] : r.matching("stream", std::regex(R"(mean_(\d+)_(\d+))"), keys))
        c.task_means[{std::stoi(m[1].str()), std::stoi(m[2].str())}] = parse_doubles("stream.mean_*", value);

    c.model.input_dim = g.dim;
    c.model.num_classes = g.num_classes;
    c.model.hidden.clear();
    for (auto w : parse_ints("model.hidden", r.get("model", "hidden"))) c.model.hidden.push_back(static_cast<int>(w));
    c.model.embedding_dim = static_cast<int>(parse_int("model.embedding_dim", r.get("model", "embedding_dim")));
    c.model.hidden_activation = parse_activation(r.get("model", "hidden_activation"));
    c.model.embedding_activation = parse_activation(r.get("model", "embedding_activation"));

    c.optimizer.base_lr = parse_double("optimizer.base_lr", r.get("optimizer", "base_lr"));
    c.optimizer.milestones = parse_ints("optimizer.milestones", r.get("optimizer", "milestones"));
    c.optimizer.decay_factor = parse_double("optimizer.decay_factor", r.get("optimizer", "decay_factor"));

    auto& l = c.loss;
    l.alpha_dml = parse_double("loss.alpha_dml", r.get("loss", "alpha_dml"));
    l.beta_dml = parse_double("loss.beta_dml", r.get("loss", "beta_dml"));
    l.margin = parse_double("loss.margin", r.get("loss", "margin"));
    l.supcon_temp = parse_double("loss.supcon_temp", r.get("loss", "supcon_temp"));
    l.tau = parse_double("loss.tau", r.get("loss", "tau"));
    const auto direction = r.get("loss", "kl_direction");
    if (direction == "forward")
        l.kl_direction = KlDirection::Forward;
    else if (direction == "reverse")
        l.kl_direction = KlDirection::Reverse;
    else
        throw ConfigError("config: loss.kl_direction must be 'forward' or 'reverse'");
    l.kl_student_temperature = parse_bool("loss.kl_student_temperature", r.get("loss", "kl_student_temperature"));
    l.focal_alpha = parse_double("loss.focal_alpha", r.get("loss", "focal_alpha"));
    l.focal_gamma = parse_double("loss.focal_gamma", r.get("loss", "focal_gamma"));
    l.cb_beta = parse_double("loss.cb_beta", r.get("loss", "cb_beta"));
    l.gamma_cls = parse_double("loss.gamma_cls", r.get("loss", "gamma_cls"));
    l.delta_schedule.clear();
    for (const auto& item : split(r.get("loss", "delta_schedule"), ',')) {
        const auto colon = item.find(':');
        if (colon == std::string::npos) throw ConfigError("config: loss.delta_schedule entries look like 500:0.5");
        l.delta_schedule.emplace_back(parse_int("loss.delta_schedule", item.substr(0, colon)),
                                      parse_double("loss.delta_schedule", item.substr(colon + 1)));
    }

    c.use_memory = parse_bool("memory.enabled", r.get("memory", "enabled"));
    c.capacity = parse_count("memory.capacity", r.get("memory", "capacity"));
    c.online_quota = parse_count("memory.online_quota", r.get("memory", "online_quota"));
    c.keep_size = parse_count("memory.keep_size", r.get("memory", "keep_size"));
    c.periodic_interval = parse_int("memory.periodic_interval", r.get("memory", "periodic_interval"));
    c.refresh_logits = parse_bool("memory.refresh_logits", r.get("memory", "refresh_logits"));
    c.perturbation.passes = static_cast<int>(parse_int("memory.mc_passes", r.get("memory", "mc_passes")));
    c.perturbation.scale = parse_double("memory.perturbation_scale", r.get("memory", "perturbation_scale"));
    c.perturbation.scale_jitter = parse_bool("memory.scale_jitter", r.get("memory", "scale_jitter"));

    c.seed = static_cast<std::uint64_t>(parse_int("train.seed", r.get("train", "seed")));
    c.stream_batch = parse_count("train.stream_batch", r.get("train", "stream_batch"));
    c.replay_batch = parse_count("train.replay_batch", r.get("train", "replay_batch"));
    c.total_iterations = parse_int("train.total_iterations", r.get("train", "total_iterations"));
    c.fused_update = parse_bool("train.fused_update", r.get("train", "fused_update"));

    c.eval_interval = parse_int("eval.interval", r.get("eval", "interval"));
    c.holdout_per_class = static_cast<int>(parse_int("eval.holdout_per_class", r.get("eval", "holdout_per_class")));
    c.save_checkpoints = parse_bool("eval.save_checkpoints", r.get("eval", "save_checkpoints"));

    r.reject_unknown();
    c.validate();
    return c;
}

ConfigTree read_config_tree(const std::filesystem::path& path)
{
    ConfigTree tree;
    try {
        boost::property_tree::read_ini(path.string(), tree);
    } catch (const boost::property_tree::ini_parser_error& e) {
        throw ConfigError(std::string("config: ") + e.what());
    }
    return tree;
}

void merge_tree(ConfigTree& base, const ConfigTree& delta)
{
    for (const auto& [section, node] : delta) {
        if (node.empty()) {
            base.put_child(ConfigTree::path_type(section, '/'), node);
            continue;
        }
        for (const auto& [key, leaf] : node)
            base.put_child(ConfigTree::path_type(section + "/" + key, '/'), leaf);
    }
}

TrainConfig load_train_config(const std::filesystem::path& path)
{
    ConfigTree tree = to_tree(TrainConfig{});
    merge_tree(tree, read_config_tree(path));
    return from_tree(tree);
}

void set_config_value(TrainConfig& config, const std::string& assignment)
{
    const auto eq = assignment.find('=');
    const auto dot = assignment.find('.');
    if (eq == std::string::npos || dot == std::string::npos || dot > eq)
        throw ConfigError("config: overrides look like section.key=value, got '" + assignment + "'");
    ConfigTree tree = to_tree(config);
    put(tree, assignment.substr(0, dot), assignment.substr(dot + 1, eq - dot - 1), assignment.substr(eq + 1));
    config = from_tree(tree);
}

void apply_stream_config_file(TrainConfig& config, const std::filesystem::path& path)
{
    const ConfigTree file = read_config_tree(path);
    for (const auto& [section, node] : file) {
        if (section != "stream") throw ConfigError("stream config: only a [stream] section is allowed");
    }
    ConfigTree tree = to_tree(config);
    tree.get_child("stream").clear();
    ConfigTree defaults = to_tree(TrainConfig{});
    tree.put_child("stream", defaults.get_child("stream"));
    merge_tree(tree, file);
    config = from_tree(tree);
}

StreamConfig load_stream_config(const std::filesystem::path& path, std::uint64_t run_seed)
{
    TrainConfig config;
    config.seed = run_seed;
    apply_stream_config_file(config, path);
    return config.stream_config();
}

std::string print_config(const TrainConfig& config)
{
    std::ostringstream out;
    boost::property_tree::write_ini(out, to_tree(config));
    return out.str();
}

std::uint64_t config_hash(const TrainConfig& config)
{
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (unsigned char ch : print_config(config)) {
        h ^= ch;
        h *= 0x100000001b3ULL;
    }
    return h;
}

} // namespace oclearn
