#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "oclearn/config.hpp"

namespace oclearn {

/// A named set of config overrides layered over the base config.
struct Variant {
    std::string name;
    ConfigTree delta;
};

/**
 * Rows mirroring the cumulative ablation: naive fine-tuning, then uncertainty
 * replay, multi-step lr, soft labels, contrastive, supervised contrastive and
 * class-balanced focal loss (the last one equals the default config).
 */
std::vector<Variant> builtin_variants();

/// Every *.ini in a directory, in filename order. The variant name is the
/// [variant] name key when present, otherwise the file stem.
std::vector<Variant> load_variants(const std::filesystem::path& dir);

struct AblationRow {
    std::string variant;
    std::uint64_t seed = 0;
    bool ok = true;
    double amca = 0.0;
    std::vector<double> mcas;
    std::string error;  // not persisted to CSV

    bool operator==(const AblationRow& other) const
    {
        return variant == other.variant && seed == other.seed && ok == other.ok && amca == other.amca &&
               mcas == other.mcas;
    }
};

struct AblationTable {
    std::vector<AblationRow> rows;

    bool operator==(const AblationTable&) const = default;
};

struct VariantSummary {
    std::string variant;
    std::size_t runs = 0;
    std::size_t failed = 0;
    double mean = 0.0;
    double stddev = 0.0;     // sample standard deviation
    double std_error = 0.0;
    double delta = 0.0;      // mean minus the reference variant's mean
};

/// Runs `base` (as variant "base") plus every variant for every seed. Failed runs
/// are recorded, not thrown. jobs > 1 runs independent configurations on threads.
AblationTable run_ablation(const ConfigTree& base, const std::vector<Variant>& variants,
                           const std::vector<std::uint64_t>& seeds, unsigned jobs = 1, bool include_base = true);

/// Per-variant statistics in first-appearance order; deltas are against `reference`.
std::vector<VariantSummary> summarize(const AblationTable& table, const std::string& reference = "base");

/// variant,seed,status,amca,mcas (mcas ';'-separated). Doubles are written round-trip exact.
void write_results_csv(const std::filesystem::path& path, const AblationTable& table);
AblationTable read_results_csv(const std::filesystem::path& path);

/// Markdown table of the summaries.
std::string render_markdown(const std::vector<VariantSummary>& summaries, const std::string& reference = "base");

} // namespace oclearn
