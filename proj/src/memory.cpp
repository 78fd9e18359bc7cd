#include "oclearn/memory.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <random>
#include <sstream>
#include <unordered_map>
#include <unordered_set>

#include <nlohmann/json.hpp>
#include <spdlog/spdlog.h>

namespace oclearn {

namespace {

constexpr std::uint64_t kMcSalt = 0x3C0ULL;
constexpr std::uint64_t kAugSalt = 0xA06ULL;
constexpr std::uint64_t kReplaySalt = 0x2E91ULL;

} // namespace

bool ranks_before(const MemoryEntry& a, const MemoryEntry& b) noexcept
{
    if (a.score != b.score) return a.score > b.score;
    if (a.inserted_at != b.inserted_at) return a.inserted_at > b.inserted_at;
    return a.example.id > b.example.id;
}

void PerturbationPolicy::validate() const
{
    if (passes < 1) throw ConfigError("perturbation: passes must be at least 1");
    if (scale < 0.0) throw ConfigError("perturbation: scale must be non-negative");
}

double sampling_score(const RowVector& probs, int predicted, int label)
{
    double entropy = 0.0;
    for (Eigen::Index k = 0; k < probs.size(); ++k) {
        const double p = probs(k);
        if (p > 0.0) entropy -= p * std::log(p);
    }
    return entropy + (predicted != label ? 0.5 : 0.0);
}

double mc_uncertainty_from_votes(std::span<const int> pass_argmax, int num_classes)
{
    if (pass_argmax.empty()) throw std::invalid_argument("mc_uncertainty: at least one pass is required");
    if (pass_argmax.size() == 1) spdlog::debug("mc_uncertainty: a single pass always yields zero uncertainty");
    std::vector<int> votes(static_cast<std::size_t>(num_classes), 0);
    for (int c : pass_argmax) ++votes.at(static_cast<std::size_t>(c));
    const int top = *std::max_element(votes.begin(), votes.end());
    return 1.0 - static_cast<double>(top) / static_cast<double>(pass_argmax.size());
}

Vector mc_perturbation(const LabeledExample& example, const PerturbationPolicy& policy, int pass)
{
    std::mt19937_64 engine(
        mix_seed({policy.seed, kMcSalt, static_cast<std::uint64_t>(example.id), static_cast<std::uint64_t>(pass)}));
    std::normal_distribution<double> normal(0.0, 1.0);
    Vector x = example.features;
    for (Eigen::Index d = 0; d < x.size(); ++d) x(d) += policy.scale * normal(engine);
    return x;
}

double mc_uncertainty(const ModelState& model, const LabeledExample& example, const PerturbationPolicy& policy)
{
    return mc_uncertainty_batch(model, std::span<const LabeledExample>(&example, 1), policy).front();
}

std::vector<double> mc_uncertainty_batch(const ModelState& model, std::span<const LabeledExample> examples,
                                         const PerturbationPolicy& policy)
{
    policy.validate();
    std::vector<double> out;
    if (examples.empty()) return out;
    const int t = policy.passes;
    const auto dim = examples.front().features.size();
    Matrix copies(static_cast<Eigen::Index>(examples.size()) * t, dim);
    for (std::size_t i = 0; i < examples.size(); ++i)
        for (int pass = 0; pass < t; ++pass)
            copies.row(static_cast<Eigen::Index>(i) * t + pass) = mc_perturbation(examples[i], policy, pass).transpose();
    const Matrix logits = predict_logits(model, copies);
    out.reserve(examples.size());
    std::vector<int> votes(static_cast<std::size_t>(t));
    for (std::size_t i = 0; i < examples.size(); ++i) {
        for (int pass = 0; pass < t; ++pass) votes[pass] = argmax(logits.row(static_cast<Eigen::Index>(i) * t + pass));
        out.push_back(mc_uncertainty_from_votes(votes, model.num_classes()));
    }
    return out;
}

Matrix augment_replay(std::span<const MemoryEntry> entries, const PerturbationPolicy& policy, std::int64_t iteration)
{
    if (entries.empty()) return Matrix(0, 0);
    const auto dim = entries.front().example.features.size();
    Matrix out(static_cast<Eigen::Index>(entries.size()), dim);
    std::normal_distribution<double> normal(0.0, 1.0);
    std::uniform_real_distribution<double> jitter(0.9, 1.1);
    for (std::size_t i = 0; i < entries.size(); ++i) {
        const auto& ex = entries[i].example;
        std::mt19937_64 engine(mix_seed({policy.seed, kAugSalt, static_cast<std::uint64_t>(ex.id),
                                         static_cast<std::uint64_t>(iteration)}));
        for (Eigen::Index d = 0; d < dim; ++d) {
            const double factor = policy.scale_jitter ? jitter(engine) : 1.0;
            out(static_cast<Eigen::Index>(i), d) = ex.features(d) * factor + policy.scale * normal(engine);
        }
    }
    return out;
}

std::vector<MemoryEntry> select_top(std::vector<MemoryEntry> candidates, std::size_t k)
{
    k = std::min(k, candidates.size());
    std::partial_sort(candidates.begin(), candidates.begin() + static_cast<std::ptrdiff_t>(k), candidates.end(),
                      ranks_before);
    candidates.resize(k);
    return candidates;
}

EpisodicMemory::EpisodicMemory(std::size_t capacity, std::size_t online_quota, std::size_t keep_size)
    : capacity_(capacity), online_quota_(online_quota), keep_size_(keep_size)
{
    if (keep_size_ > capacity_) throw ConfigError("memory: keep_size cannot exceed capacity");
}

std::size_t EpisodicMemory::online_update(std::vector<MemoryEntry> candidates)
{
    const std::size_t free = capacity_ - entries_.size();
    const std::size_t take = std::min(free >= online_quota_ ? online_quota_ : free, candidates.size());
    if (take == 0) return 0;
    auto chosen = select_top(std::move(candidates), take);
    entries_.insert(entries_.end(), std::make_move_iterator(chosen.begin()), std::make_move_iterator(chosen.end()));
    std::sort(entries_.begin(), entries_.end(), ranks_before);
    check_invariants();
    return take;
}

void EpisodicMemory::periodic_update(std::span<const LabeledExample> incoming, const ModelState& model,
                                     const PerturbationPolicy& policy, std::int64_t iteration, bool refresh_logits)
{
    std::vector<MemoryEntry> pool = entries_;
    std::unordered_set<std::int64_t> present;
    for (const auto& e : pool) present.insert(e.example.id);
    std::vector<std::size_t> fresh;
    for (const auto& ex : incoming) {
        if (!present.insert(ex.id).second) continue;
        fresh.push_back(pool.size());
        pool.push_back({ex, RowVector(), 0.0, iteration});
    }
    if (pool.empty()) return;

    std::vector<LabeledExample> examples;
    examples.reserve(pool.size());
    for (const auto& e : pool) examples.push_back(e.example);
    const auto scores = mc_uncertainty_batch(model, examples, policy);
    for (std::size_t i = 0; i < pool.size(); ++i) pool[i].score = scores[i];

    // Entries new to memory always need logits; existing ones only when refreshing.
    std::vector<std::size_t> need;
    if (refresh_logits) {
        need.resize(pool.size());
        for (std::size_t i = 0; i < pool.size(); ++i) need[i] = i;
    } else {
        need = fresh;
    }
    if (!need.empty()) {
        Matrix x(static_cast<Eigen::Index>(need.size()), pool.front().example.features.size());
        for (std::size_t r = 0; r < need.size(); ++r) x.row(static_cast<Eigen::Index>(r)) = pool[need[r]].example.features.transpose();
        const Matrix logits = predict_logits(model, x);
        for (std::size_t r = 0; r < need.size(); ++r) pool[need[r]].stored_logits = logits.row(static_cast<Eigen::Index>(r));
    }
    periodic_update_scored(std::move(pool));
}

void EpisodicMemory::periodic_update_scored(std::vector<MemoryEntry> candidates)
{
    entries_ = select_top(std::move(candidates), std::min(keep_size_, capacity_));
    check_invariants();
}

std::vector<MemoryEntry> EpisodicMemory::sample_replay(std::size_t n, std::uint64_t seed) const
{
    if (n == 0 || entries_.empty()) return {};
    if (entries_.size() <= n) {
        if (entries_.size() < n) spdlog::debug("sample_replay: asked for {} but memory holds {}", n, entries_.size());
        return entries_;
    }
    std::unordered_map<int, int> per_class;
    for (const auto& e : entries_) ++per_class[e.example.label];
    std::vector<double> weight(entries_.size());
    for (std::size_t i = 0; i < entries_.size(); ++i) weight[i] = 1.0 / per_class[entries_[i].example.label];

    std::mt19937_64 engine(mix_seed({seed, kReplaySalt}));
    std::vector<MemoryEntry> out;
    out.reserve(n);
    for (std::size_t draw = 0; draw < n; ++draw) {
        double total = 0.0;
        for (double w : weight) total += w;
        double u = std::uniform_real_distribution<double>(0.0, total)(engine);
        std::size_t pick = weight.size();
        for (std::size_t i = 0; i < weight.size(); ++i) {
            if (weight[i] <= 0.0) continue;
            pick = i;
            if (u < weight[i]) break;
            u -= weight[i];
        }
        out.push_back(entries_[pick]);
        weight[pick] = 0.0;
    }
    return out;
}

void EpisodicMemory::check_invariants() const
{
    if (entries_.size() > capacity_) throw std::logic_error("memory: capacity exceeded");
}

void EpisodicMemory::dump(const std::filesystem::path& path) const
{
    std::ofstream out(path);
    if (!out) throw std::runtime_error("cannot open " + path.string() + " for writing");
    const Eigen::Index classes = entries_.empty() ? 0 : entries_.front().stored_logits.size();
    const Eigen::Index dim = entries_.empty() ? 0 : entries_.front().example.features.size();
    nlohmann::json meta = {{"capacity", capacity_}, {"online_quota", online_quota_}, {"keep_size", keep_size_},
                           {"size", entries_.size()}, {"num_classes", classes}, {"dim", dim}};
    out << "# " << meta.dump() << '\n';
    out << "id,label,score,inserted_at";
    for (Eigen::Index c = 0; c < classes; ++c) out << ",logit" << c;
    for (Eigen::Index d = 0; d < dim; ++d) out << ",f" << d;
    out << '\n';
    out.precision(17);
    for (const auto& e : entries_) {
        out << e.example.id << ',' << e.example.label << ',' << e.score << ',' << e.inserted_at;
        for (Eigen::Index c = 0; c < e.stored_logits.size(); ++c) out << ',' << e.stored_logits(c);
        for (Eigen::Index d = 0; d < e.example.features.size(); ++d) out << ',' << e.example.features(d);
        out << '\n';
    }
}

EpisodicMemory EpisodicMemory::load(const std::filesystem::path& path)
{
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot open " + path.string());
    std::string line;
    std::getline(in, line);
    if (line.rfind("# ", 0) != 0) throw std::runtime_error(path.string() + ": missing metadata line");
    const auto meta = nlohmann::json::parse(line.substr(2));
    EpisodicMemory mem(meta.at("capacity"), meta.at("online_quota"), meta.at("keep_size"));
    const Eigen::Index classes = meta.at("num_classes");
    const Eigen::Index dim = meta.at("dim");
    std::getline(in, line);  // header
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        std::istringstream row(line);
        std::string cell;
        auto next = [&]() {
            if (!std::getline(row, cell, ',')) throw std::runtime_error(path.string() + ": short row");
            return cell;
        };
        MemoryEntry e;
        e.example.id = std::stoll(next());
        e.example.label = std::stoi(next());
        e.score = std::stod(next());
        e.inserted_at = std::stoll(next());
        e.stored_logits.resize(classes);
        for (Eigen::Index c = 0; c < classes; ++c) e.stored_logits(c) = std::stod(next());
        e.example.features.resize(dim);
        for (Eigen::Index d = 0; d < dim; ++d) e.example.features(d) = std::stod(next());
        mem.entries_.push_back(std::move(e));
    }
    mem.check_invariants();
    return mem;
}

} // namespace oclearn
