#include "oclearn/evaluation.hpp"

#include <spdlog/spdlog.h>

namespace oclearn {

namespace {

struct Tally {
    std::vector<int> correct;
    std::vector<int> support;

    explicit Tally(int classes) : correct(classes, 0), support(classes, 0) {}

    std::vector<double> accuracy() const
    {
        std::vector<double> acc(correct.size(), 0.0);
        for (std::size_t c = 0; c < acc.size(); ++c)
            if (support[c]) acc[c] = static_cast<double>(correct[c]) / support[c];
        return acc;
    }
};

} // namespace

double mean_class_accuracy(std::span<const double> per_class, std::span<const int> support)
{
    double sum = 0.0;
    int present = 0;
    for (std::size_t c = 0; c < per_class.size(); ++c) {
        if (support[c] == 0) continue;
        sum += per_class[c];
        ++present;
    }
    return present ? sum / present : 0.0;
}

EvalReport evaluate(const ModelState& model, std::span<const std::vector<LabeledExample>> holdouts, int num_classes,
                    std::int64_t iteration)
{
    EvalReport report;
    report.iteration = iteration;
    Tally pooled(num_classes);
    for (const auto& holdout : holdouts) {
        Tally task(num_classes);
        if (!holdout.empty()) {
            const Matrix logits = predict_logits(model, stack_features(holdout));
            for (std::size_t i = 0; i < holdout.size(); ++i) {
                const int y = holdout[i].label;
                const bool hit = argmax(logits.row(static_cast<Eigen::Index>(i))) == y;
                for (Tally* t : {&pooled, &task}) {
                    ++t->support[y];
                    if (hit) ++t->correct[y];
                }
            }
        }
        const auto acc = task.accuracy();
        report.task_mca.push_back(mean_class_accuracy(acc, task.support));
    }
    report.per_class = pooled.accuracy();
    report.support = pooled.support;
    for (int c = 0; c < num_classes; ++c)
        if (pooled.support[c] == 0) spdlog::warn("evaluate: class {} has no holdout examples; excluded from MCA", c);
    report.mca = mean_class_accuracy(report.per_class, report.support);
    return report;
}

double amca(std::span<const EvalReport> reports)
{
    if (reports.empty()) throw std::invalid_argument("amca: no evaluation reports");
    double sum = 0.0;
    for (const auto& r : reports) sum += r.mca;
    return sum / static_cast<double>(reports.size());
}

nlohmann::json to_json(const EvalReport& report)
{
    return {{"iteration", report.iteration},
            {"mca", report.mca},
            {"per_class", report.per_class},
            {"support", report.support},
            {"task_mca", report.task_mca}};
}

} // namespace oclearn
