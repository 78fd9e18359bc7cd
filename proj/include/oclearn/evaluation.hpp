#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include <nlohmann/json.hpp>

#include "oclearn/nnkernel.hpp"
#include "oclearn/streamgen.hpp"

namespace oclearn {

struct EvalReport {
    std::int64_t iteration = 0;
    std::vector<double> per_class;   // accuracy per class, 0 when the class has no support
    std::vector<int> support;        // holdout examples per class
    double mca = 0.0;                // mean over classes with support
    std::vector<double> task_mca;    // MCA restricted to each evaluated task's holdout
};

/// Mean of per-class accuracies, skipping classes without support.
double mean_class_accuracy(std::span<const double> per_class, std::span<const int> support);

/// Per-class accuracy pooled over the given holdouts (one per seen task).
EvalReport evaluate(const ModelState& model, std::span<const std::vector<LabeledExample>> holdouts, int num_classes,
                    std::int64_t iteration = 0);

/// Average of checkpoint MCAs. Throws std::invalid_argument on an empty list.
double amca(std::span<const EvalReport> reports);

nlohmann::json to_json(const EvalReport& report);

} // namespace oclearn
