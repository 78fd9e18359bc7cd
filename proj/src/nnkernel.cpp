#include "oclearn/nnkernel.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <random>
#include <sstream>

#include <nlohmann/json.hpp>

namespace oclearn {

namespace {

Matrix activate(const Matrix& pre, Activation a)
{
    switch (a) {
    case Activation::Linear: return pre;
    case Activation::Tanh: return pre.array().tanh().matrix();
    case Activation::Softplus:
        // log(1 + e^x) written to avoid overflow for large x
        return pre.unaryExpr([](double x) { return x > 0 ? x + std::log1p(std::exp(-x)) : std::log1p(std::exp(x)); });
    }
    return pre;
}

Matrix activation_derivative(const Matrix& pre, Activation a)
{
    switch (a) {
    case Activation::Linear: return Matrix::Ones(pre.rows(), pre.cols());
    case Activation::Tanh: return (1.0 - pre.array().tanh().square()).matrix();
    case Activation::Softplus: return pre.unaryExpr([](double x) { return 1.0 / (1.0 + std::exp(-x)); });
    }
    return Matrix::Ones(pre.rows(), pre.cols());
}

void check_input(const ModelState& model, const Matrix& batch)
{
    if (model.backbone.empty()) throw ShapeError("model has no backbone layers");
    if (batch.cols() != model.input_dim()) {
        std::ostringstream msg;
        msg << "batch has " << batch.cols() << " columns, model expects " << model.input_dim();
        throw ShapeError(msg.str());
    }
}

Matrix read_csv_matrix(const std::filesystem::path& path, Eigen::Index rows, Eigen::Index cols)
{
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot open " + path.string());
    Matrix m(rows, cols);
    std::string line;
    for (Eigen::Index r = 0; r < rows; ++r) {
        if (!std::getline(in, line)) throw ShapeError(path.string() + ": too few rows");
        std::istringstream row(line);
        std::string cell;
        for (Eigen::Index c = 0; c < cols; ++c) {
            if (!std::getline(row, cell, ',')) throw ShapeError(path.string() + ": too few columns");
            m(r, c) = std::stod(cell);
        }
    }
    return m;
}

void write_csv_matrix(const std::filesystem::path& path, const Matrix& m)
{
    std::ofstream out(path);
    if (!out) throw std::runtime_error("cannot open " + path.string() + " for writing");
    out.precision(17);
    for (Eigen::Index r = 0; r < m.rows(); ++r) {
        for (Eigen::Index c = 0; c < m.cols(); ++c) {
            if (c) out << ',';
            out << m(r, c);
        }
        out << '\n';
    }
}

} // namespace

std::string to_string(Activation a)
{
    switch (a) {
    case Activation::Linear: return "linear";
    case Activation::Tanh: return "tanh";
    case Activation::Softplus: return "softplus";
    }
    return "unknown";
}

Activation parse_activation(const std::string& name)
{
    if (name == "linear") return Activation::Linear;
    if (name == "tanh") return Activation::Tanh;
    if (name == "softplus") return Activation::Softplus;
    throw ConfigError("unknown activation '" + name + "'");
}

int ModelState::input_dim() const
{
    return backbone.empty() ? 0 : static_cast<int>(backbone.front().weight.cols());
}

int ModelState::embedding_dim() const
{
    return backbone.empty() ? 0 : static_cast<int>(backbone.back().weight.rows());
}

std::size_t ModelState::parameter_count() const
{
    std::size_t n = static_cast<std::size_t>(head.size());
    for (const auto& layer : backbone) n += static_cast<std::size_t>(layer.weight.size());
    return n;
}

bool ModelState::all_finite() const
{
    if (!head.allFinite()) return false;
    return std::all_of(backbone.begin(), backbone.end(), [](const DenseLayer& l) { return l.weight.allFinite(); });
}

ModelState init_model(const ModelSpec& spec, std::uint64_t seed)
{
    if (spec.input_dim < 1 || spec.embedding_dim < 1 || spec.num_classes < 1)
        throw ConfigError("model: dimensions must be positive");
    std::mt19937_64 engine(mix_seed({seed, 0x1217ULL}));
    auto uniform_fan_in = [&](int rows, int cols) {
        const double bound = std::sqrt(3.0 / cols);
        std::uniform_real_distribution<double> dist(-bound, bound);
        Matrix w(rows, cols);
        for (Eigen::Index i = 0; i < w.size(); ++i) w.data()[i] = dist(engine);
        return w;
    };
    ModelState model;
    int fan_in = spec.input_dim;
    for (int width : spec.hidden) {
        if (width < 1) throw ConfigError("model: hidden widths must be positive");
        model.backbone.push_back({uniform_fan_in(width, fan_in), spec.hidden_activation});
        fan_in = width;
    }
    model.backbone.push_back({uniform_fan_in(spec.embedding_dim, fan_in), spec.embedding_activation});
    model.head = uniform_fan_in(spec.num_classes, spec.embedding_dim);
    return model;
}

GradientSet GradientSet::zeros_like(const ModelState& model)
{
    GradientSet g;
    for (const auto& layer : model.backbone) g.backbone.push_back(Matrix::Zero(layer.weight.rows(), layer.weight.cols()));
    g.head = Matrix::Zero(model.head.rows(), model.head.cols());
    return g;
}

GradientSet& GradientSet::operator+=(const GradientSet& other)
{
    if (other.backbone.size() != backbone.size()) throw ShapeError("gradient sets have different layer counts");
    for (std::size_t i = 0; i < backbone.size(); ++i) backbone[i] += other.backbone[i];
    head += other.head;
    return *this;
}

bool GradientSet::all_finite() const
{
    if (!head.allFinite()) return false;
    return std::all_of(backbone.begin(), backbone.end(), [](const Matrix& m) { return m.allFinite(); });
}

double GradientSet::max_abs() const
{
    double m = head.size() ? head.cwiseAbs().maxCoeff() : 0.0;
    for (const auto& g : backbone)
        if (g.size()) m = std::max(m, g.cwiseAbs().maxCoeff());
    return m;
}

KernelCounters& kernel_counters() noexcept
{
    static KernelCounters counters;
    return counters;
}

ForwardResult forward(const ModelState& model, const Matrix& batch)
{
    check_input(model, batch);
    ++kernel_counters().forward;
    ForwardResult out;
    Matrix h = batch;
    for (const auto& layer : model.backbone) {
        Matrix pre = h * layer.weight.transpose();
        Matrix next = activate(pre, layer.activation);
        out.layer_inputs.push_back(std::move(h));
        out.pre_activations.push_back(std::move(pre));
        h = std::move(next);
    }
    out.embeddings = std::move(h);
    out.logits = out.embeddings * model.head.transpose();
    return out;
}

Matrix predict_logits(const ModelState& model, const Matrix& batch)
{
    check_input(model, batch);
    ++kernel_counters().inference;
    Matrix h = batch;
    for (const auto& layer : model.backbone) h = activate(h * layer.weight.transpose(), layer.activation);
    return h * model.head.transpose();
}

GradientSet backward(const ModelState& model, const ForwardResult& fwd, const Matrix& d_embeddings,
                     const Matrix& d_logits)
{
    const auto n = fwd.embeddings.rows();
    const bool has_dz = d_embeddings.size() > 0;
    const bool has_dl = d_logits.size() > 0;
    if (has_dz && (d_embeddings.rows() != n || d_embeddings.cols() != fwd.embeddings.cols()))
        throw ShapeError("backward: embedding gradient shape mismatch");
    if (has_dl && (d_logits.rows() != n || d_logits.cols() != fwd.logits.cols()))
        throw ShapeError("backward: logit gradient shape mismatch");
    if (fwd.layer_inputs.size() != model.backbone.size()) throw ShapeError("backward: cache does not match model");
    ++kernel_counters().backward;

    GradientSet grads;
    grads.backbone.resize(model.backbone.size());
    Matrix dh = has_dz ? d_embeddings : Matrix::Zero(n, fwd.embeddings.cols());
    if (has_dl) {
        grads.head = d_logits.transpose() * fwd.embeddings;
        dh += d_logits * model.head;
    } else {
        grads.head = Matrix::Zero(model.head.rows(), model.head.cols());
    }
    for (std::size_t k = model.backbone.size(); k-- > 0;) {
        const auto& layer = model.backbone[k];
        Matrix da = dh.cwiseProduct(activation_derivative(fwd.pre_activations[k], layer.activation));
        grads.backbone[k] = da.transpose() * fwd.layer_inputs[k];
        if (k > 0) dh = da * layer.weight;
    }
    return grads;
}

void OptimizerState::validate() const
{
    if (!(base_lr > 0.0)) throw ConfigError("optimizer: base_lr must be positive");
    if (!(decay_factor > 0.0 && decay_factor < 1.0)) throw ConfigError("optimizer: decay_factor must lie in (0, 1)");
    for (std::size_t i = 1; i < milestones.size(); ++i) {
        if (milestones[i] <= milestones[i - 1]) throw ConfigError("optimizer: milestones must be strictly increasing");
    }
}

double OptimizerState::current_lr() const
{
    const auto passed = std::count_if(milestones.begin(), milestones.end(),
                                      [this](std::int64_t m) { return iteration >= m; });
    if (passed == 0) return base_lr;
    // Divide by the reciprocal so decimal factors such as 0.1 reproduce the exact literals.
    return base_lr / std::pow(1.0 / decay_factor, static_cast<double>(passed));
}

void sgd_step(ModelState& model, OptimizerState& opt, const GradientSet& grads)
{
    if (grads.backbone.size() != model.backbone.size() || grads.head.rows() != model.head.rows() ||
        grads.head.cols() != model.head.cols())
        throw ShapeError("sgd_step: gradient set does not match model");
    for (std::size_t k = 0; k < grads.backbone.size(); ++k) {
        if (grads.backbone[k].rows() != model.backbone[k].weight.rows() ||
            grads.backbone[k].cols() != model.backbone[k].weight.cols())
            throw ShapeError("sgd_step: gradient set does not match model");
    }
    if (!grads.all_finite()) throw NumericError("sgd_step: non-finite gradient");
    const double lr = opt.current_lr();
    for (std::size_t k = 0; k < grads.backbone.size(); ++k) model.backbone[k].weight -= lr * grads.backbone[k];
    model.head -= lr * grads.head;
    ++opt.iteration;
    ++model.iteration;
}

void apply_backbone_update(ModelState& model, double lr, const GradientSet& grads)
{
    if (!grads.all_finite()) throw NumericError("apply_backbone_update: non-finite gradient");
    for (std::size_t k = 0; k < grads.backbone.size(); ++k) model.backbone[k].weight -= lr * grads.backbone[k];
}

std::size_t flat_size(const ModelState& model)
{
    return model.parameter_count();
}

double& flat_param(ModelState& model, std::size_t index)
{
    for (auto& layer : model.backbone) {
        const auto size = static_cast<std::size_t>(layer.weight.size());
        if (index < size) return layer.weight.data()[index];
        index -= size;
    }
    if (index < static_cast<std::size_t>(model.head.size())) return model.head.data()[index];
    throw std::out_of_range("flat_param: index past end of parameters");
}

double flat_grad(const GradientSet& grads, std::size_t index)
{
    for (const auto& g : grads.backbone) {
        const auto size = static_cast<std::size_t>(g.size());
        if (index < size) return g.data()[index];
        index -= size;
    }
    if (index < static_cast<std::size_t>(grads.head.size())) return grads.head.data()[index];
    throw std::out_of_range("flat_grad: index past end of parameters");
}

GradCheckResult grad_check(const ModelState& model, const LossClosure& loss, std::size_t samples, double step,
                           std::uint64_t seed, double floor)
{
    const auto [value, analytic] = loss(model);
    (void)value;
    const std::size_t total = flat_size(model);
    std::vector<std::size_t> indices(total);
    for (std::size_t i = 0; i < total; ++i) indices[i] = i;
    if (samples < total) {
        std::mt19937_64 engine(mix_seed({seed, 0x6C4ECULL}));
        std::shuffle(indices.begin(), indices.end(), engine);
        indices.resize(samples);
    }
    GradCheckResult result;
    ModelState probe = model;
    for (std::size_t idx : indices) {
        double& w = flat_param(probe, idx);
        const double original = w;
        w = original + step;
        const double plus = loss(probe).first;
        w = original - step;
        const double minus = loss(probe).first;
        w = original;
        const double numeric = (plus - minus) / (2.0 * step);
        const double a = flat_grad(analytic, idx);
        const double denom = std::max({std::abs(a), std::abs(numeric), floor});
        result.max_relative_error = std::max(result.max_relative_error, std::abs(a - numeric) / denom);
        ++result.checked;
    }
    return result;
}

void save_checkpoint(const std::filesystem::path& dir, const ModelState& model, const OptimizerState& opt)
{
    std::filesystem::create_directories(dir);
    nlohmann::json manifest;
    manifest["format"] = "oclearn-checkpoint-v1";
    manifest["iteration"] = model.iteration;
    manifest["optimizer"] = {{"base_lr", opt.base_lr},
                             {"milestones", opt.milestones},
                             {"decay_factor", opt.decay_factor},
                             {"iteration", opt.iteration},
                             {"current_lr", opt.current_lr()}};
    auto layers = nlohmann::json::array();
    for (std::size_t k = 0; k < model.backbone.size(); ++k) {
        const auto& layer = model.backbone[k];
        const std::string file = "backbone_" + std::to_string(k) + ".csv";
        layers.push_back({{"file", file},
                          {"rows", layer.weight.rows()},
                          {"cols", layer.weight.cols()},
                          {"activation", to_string(layer.activation)}});
        write_csv_matrix(dir / file, layer.weight);
    }
    manifest["backbone"] = layers;
    manifest["head"] = {{"file", "head.csv"}, {"rows", model.head.rows()}, {"cols", model.head.cols()}};
    write_csv_matrix(dir / "head.csv", model.head);
    std::ofstream(dir / "manifest.json") << manifest.dump(2) << '\n';
}

std::pair<ModelState, OptimizerState> load_checkpoint(const std::filesystem::path& dir)
{
    std::ifstream in(dir / "manifest.json");
    if (!in) throw std::runtime_error("no manifest.json in " + dir.string());
    const auto manifest = nlohmann::json::parse(in);
    if (manifest.value("format", "") != "oclearn-checkpoint-v1")
        throw std::runtime_error("unrecognised checkpoint format in " + dir.string());
    ModelState model;
    model.iteration = manifest.at("iteration").get<std::int64_t>();
    for (const auto& layer : manifest.at("backbone")) {
        model.backbone.push_back({read_csv_matrix(dir / layer.at("file").get<std::string>(), layer.at("rows"),
                                                  layer.at("cols")),
                                  parse_activation(layer.at("activation"))});
    }
    const auto& head = manifest.at("head");
    model.head = read_csv_matrix(dir / head.at("file").get<std::string>(), head.at("rows"), head.at("cols"));
    OptimizerState opt;
    const auto& o = manifest.at("optimizer");
    opt.base_lr = o.at("base_lr");
    opt.milestones = o.at("milestones").get<std::vector<std::int64_t>>();
    opt.decay_factor = o.at("decay_factor");
    opt.iteration = o.at("iteration");
    return {std::move(model), opt};
}

} // namespace oclearn
