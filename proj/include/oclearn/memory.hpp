#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <vector>

#include "oclearn/common.hpp"
#include "oclearn/nnkernel.hpp"
#include "oclearn/streamgen.hpp"

namespace oclearn {

struct MemoryEntry {
    LabeledExample example;
    RowVector stored_logits;
    double score = 0.0;
    std::int64_t inserted_at = 0;
};

/// Strict total order used by both update paths: higher score first, then newer
/// insertion, then larger id.
bool ranks_before(const MemoryEntry& a, const MemoryEntry& b) noexcept;

struct PerturbationPolicy {
    int passes = 8;                   // T
    double scale = 0.1;               // std-dev of additive feature noise
    bool scale_jitter = true;         // per-dimension factor in [0.9, 1.1] for replay augmentation
    std::uint64_t seed = 0;

    void validate() const;
};

/// Predictive entropy plus 0.5 when the prediction is wrong. 0 ln 0 is taken as 0.
double sampling_score(const RowVector& probs, int predicted, int label);

/// 1 - max_c S_c / T from the argmax of each of T passes.
double mc_uncertainty_from_votes(std::span<const int> pass_argmax, int num_classes);

/// Perturbed copy used by the Monte-Carlo passes; deterministic per (seed, id, pass).
Vector mc_perturbation(const LabeledExample& example, const PerturbationPolicy& policy, int pass);

/// Runs T inference passes on perturbed copies of one example.
double mc_uncertainty(const ModelState& model, const LabeledExample& example, const PerturbationPolicy& policy);

/// Batched form of mc_uncertainty over many examples; identical results, one matrix product per layer.
std::vector<double> mc_uncertainty_batch(const ModelState& model, std::span<const LabeledExample> examples,
                                         const PerturbationPolicy& policy);

/// Feature-space augmentation of replayed entries; deterministic per (seed, id, iteration).
Matrix augment_replay(std::span<const MemoryEntry> entries, const PerturbationPolicy& policy, std::int64_t iteration);

/// Keeps the k best candidates under ranks_before, sorted.
std::vector<MemoryEntry> select_top(std::vector<MemoryEntry> candidates, std::size_t k);

class EpisodicMemory {
public:
    EpisodicMemory(std::size_t capacity, std::size_t online_quota, std::size_t keep_size);

    std::size_t size() const noexcept { return entries_.size(); }
    bool empty() const noexcept { return entries_.empty(); }
    bool full() const noexcept { return entries_.size() >= capacity_; }
    std::size_t capacity() const noexcept { return capacity_; }
    std::size_t online_quota() const noexcept { return online_quota_; }
    std::size_t keep_size() const noexcept { return keep_size_; }
    const std::vector<MemoryEntry>& entries() const noexcept { return entries_; }

    /**
     * Inserts the best min(online_quota, capacity - size) candidates. Candidates arrive
     * already scored with their stored logits filled in. Returns the number inserted.
     */
    std::size_t online_update(std::vector<MemoryEntry> candidates);

    /**
     * Unions the memory with the incoming examples (deduplicated by id), re-scores every
     * entry by Monte-Carlo uncertainty under `model`, and keeps the best keep_size.
     * With refresh_logits, stored logits are recaptured from the unperturbed pass.
     */
    void periodic_update(std::span<const LabeledExample> incoming, const ModelState& model,
                         const PerturbationPolicy& policy, std::int64_t iteration, bool refresh_logits = true);

    /// Same as periodic_update but with externally supplied scores for every candidate.
    void periodic_update_scored(std::vector<MemoryEntry> candidates);

    /**
     * Draws n entries without replacement, each with weight 1 / (entries of its class).
     * Returns everything when the memory holds n or fewer entries.
     */
    std::vector<MemoryEntry> sample_replay(std::size_t n, std::uint64_t seed) const;

    void clear() noexcept { entries_.clear(); }

    /**
     * Line 1 is `# ` followed by a JSON object (capacity, quotas, size, classes, dim);
     * then a CSV header and one row per entry:
     *   id,label,score,inserted_at,logit0..logitC-1,f0..fD-1
     */
    void dump(const std::filesystem::path& path) const;
    static EpisodicMemory load(const std::filesystem::path& path);

private:
    void check_invariants() const;

    std::size_t capacity_;
    std::size_t online_quota_;
    std::size_t keep_size_;
    std::vector<MemoryEntry> entries_;
};

} // namespace oclearn
