#include "oclearn/ablation.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <future>
#include <iomanip>
#include <map>
#include <sstream>

#include "oclearn/trainer.hpp"

namespace oclearn {

namespace {

std::string format_double(double v)
{
    char buf[64];
    const auto res = std::to_chars(buf, buf + sizeof(buf), v);
    return std::string(buf, res.ptr);
}

AblationRow run_one(const ConfigTree& base, const Variant& variant, std::uint64_t seed)
{
    AblationRow row;
    row.variant = variant.name;
    row.seed = seed;
    try {
        ConfigTree tree = base;
        merge_tree(tree, variant.delta);
        tree.put_child(ConfigTree::path_type("train/seed", '/'), ConfigTree(std::to_string(seed)));
        const TrainConfig config = from_tree(tree);
        const RunResult result = run(config);
        if (!result.amca) throw std::runtime_error("run produced no evaluation checkpoints");
        row.amca = *result.amca;
        for (const auto& r : result.reports) row.mcas.push_back(r.mca);
    } catch (const std::exception& e) {
        row.ok = false;
        row.error = e.what();
    }
    return row;
}

} // namespace

std::vector<Variant> builtin_variants()
{
    // Each row adds one ingredient on top of the previous one.
    std::vector<std::pair<const char*, const char*>> naive = {
        {"memory/enabled", "false"},   {"optimizer/milestones", ""}, {"loss/delta_schedule", "0:0"},
        {"loss/alpha_dml", "0"},       {"loss/beta_dml", "0"},       {"loss/focal_alpha", "1"},
        {"loss/focal_gamma", "0"},     {"loss/cb_beta", "0"}};
    std::vector<Variant> out;
    auto add = [&](const char* name) {
        ConfigTree t;
        for (const auto& [path, value] : naive) t.put_child(ConfigTree::path_type(path, '/'), ConfigTree(value));
        out.push_back({name, t});
    };
    auto drop = [&](const char* path) {
        naive.erase(std::remove_if(naive.begin(), naive.end(),
                                   [&](const auto& kv) { return std::string(kv.first) == path; }),
                    naive.end());
    };
    add("naive");
    drop("memory/enabled");
    add("+replay");
    drop("optimizer/milestones");
    add("+multistep_lr");
    drop("loss/delta_schedule");
    add("+soft_labels");
    drop("loss/alpha_dml");
    add("+contrastive");
    drop("loss/beta_dml");
    add("+supcon");
    drop("loss/focal_alpha");
    drop("loss/cb_beta");
    drop("loss/focal_gamma");
    add("+cb_focal");
    return out;
}

std::vector<Variant> load_variants(const std::filesystem::path& dir)
{
    std::vector<std::filesystem::path> files;
    for (const auto& entry : std::filesystem::directory_iterator(dir))
        if (entry.is_regular_file() && entry.path().extension() == ".ini") files.push_back(entry.path());
    std::sort(files.begin(), files.end());
    std::vector<Variant> out;
    for (const auto& file : files) {
        ConfigTree tree = read_config_tree(file);
        std::string name = file.stem().string();
        if (auto sec = tree.get_child_optional("variant")) {
            name = sec->get<std::string>("name", name);
            tree.erase("variant");
        }
        out.push_back({name, std::move(tree)});
    }
    return out;
}

AblationTable run_ablation(const ConfigTree& base, const std::vector<Variant>& variants,
                           const std::vector<std::uint64_t>& seeds, unsigned jobs, bool include_base)
{
    std::vector<Variant> all;
    if (include_base) all.push_back({"base", ConfigTree()});
    all.insert(all.end(), variants.begin(), variants.end());

    std::vector<std::pair<const Variant*, std::uint64_t>> work;
    for (const auto& v : all)
        for (auto seed : seeds) work.emplace_back(&v, seed);

    AblationTable table;
    table.rows.resize(work.size());
    jobs = std::max(1u, jobs);
    for (std::size_t start = 0; start < work.size(); start += jobs) {
        std::vector<std::future<AblationRow>> pending;
        for (std::size_t i = start; i < std::min(work.size(), start + jobs); ++i)
            pending.push_back(std::async(jobs > 1 ? std::launch::async : std::launch::deferred, run_one,
                                         std::cref(base), std::cref(*work[i].first), work[i].second));
        for (std::size_t i = 0; i < pending.size(); ++i) table.rows[start + i] = pending[i].get();
    }
    return table;
}

std::vector<VariantSummary> summarize(const AblationTable& table, const std::string& reference)
{
    std::vector<VariantSummary> out;
    std::map<std::string, std::vector<double>> values;
    for (const auto& row : table.rows) {
        auto it = std::find_if(out.begin(), out.end(), [&](const auto& s) { return s.variant == row.variant; });
        if (it == out.end()) {
            out.push_back({});
            out.back().variant = row.variant;
            it = out.end() - 1;
        }
        if (row.ok) {
            values[row.variant].push_back(row.amca);
            ++it->runs;
        } else {
            ++it->failed;
        }
    }
    for (auto& s : out) {
        const auto& v = values[s.variant];
        if (v.empty()) continue;
        double sum = 0.0;
        for (double x : v) sum += x;
        s.mean = sum / static_cast<double>(v.size());
        if (v.size() > 1) {
            double ss = 0.0;
            for (double x : v) ss += (x - s.mean) * (x - s.mean);
            s.stddev = std::sqrt(ss / static_cast<double>(v.size() - 1));
            s.std_error = s.stddev / std::sqrt(static_cast<double>(v.size()));
        }
    }
    const auto ref = std::find_if(out.begin(), out.end(), [&](const auto& s) { return s.variant == reference; });
    const double ref_mean = ref == out.end() ? 0.0 : ref->mean;
    for (auto& s : out) s.delta = s.mean - ref_mean;
    return out;
}

void write_results_csv(const std::filesystem::path& path, const AblationTable& table)
{
    std::ofstream out(path);
    if (!out) throw std::runtime_error("cannot open " + path.string() + " for writing");
    out << "variant,seed,status,amca,mcas\n";
    for (const auto& row : table.rows) {
        out << row.variant << ',' << row.seed << ',' << (row.ok ? "ok" : "failed") << ','
            << (row.ok ? format_double(row.amca) : "") << ',';
        for (std::size_t i = 0; i < row.mcas.size(); ++i) out << (i ? ";" : "") << format_double(row.mcas[i]);
        out << '\n';
    }
}

AblationTable read_results_csv(const std::filesystem::path& path)
{
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot open " + path.string());
    std::string line;
    std::getline(in, line);
    AblationTable table;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        std::vector<std::string> cells;
        std::string cell;
        std::istringstream row(line);
        while (std::getline(row, cell, ',')) cells.push_back(cell);
        if (!line.empty() && line.back() == ',') cells.emplace_back();
        if (cells.size() != 5) throw std::runtime_error(path.string() + ": malformed row '" + line + "'");
        AblationRow r;
        r.variant = cells[0];
        r.seed = std::stoull(cells[1]);
        r.ok = cells[2] == "ok";
        if (r.ok) r.amca = std::stod(cells[3]);
        std::istringstream mcas(cells[4]);
        while (std::getline(mcas, cell, ';'))
            if (!cell.empty()) r.mcas.push_back(std::stod(cell));
        table.rows.push_back(std::move(r));
    }
    return table;
}

std::string render_markdown(const std::vector<VariantSummary>& summaries, const std::string& reference)
{
    std::ostringstream out;
    out << std::fixed << std::setprecision(2);
    out << "| Variant | Runs | AMCA (%) mean ± std | Δ vs " << reference << " |\n";
    out << "|---|---:|---:|---:|\n";
    for (const auto& s : summaries) {
        out << "| " << s.variant << " | " << s.runs;
        if (s.failed) out << " (" << s.failed << " failed)";
        if (s.runs == 0) {
            out << " | n/a | n/a |\n";
            continue;
        }
        out << " | " << 100.0 * s.mean << " ± " << 100.0 * s.stddev << " | " << std::showpos << 100.0 * s.delta
            << std::noshowpos << " |\n";
    }
    return out.str();
}

} // namespace oclearn
