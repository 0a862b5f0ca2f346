// Command-line front door for the score-field memorization lab: dataset
// construction, training, denoising-free detection, evaluation, ablation
// sweeps, analytic diagnostics and embedding-space mitigation. Every command
// writes its outputs plus a run manifest into a directory keyed by the
// manifest hash, so identical invocations reproduce identical files.

#include <filesystem>
#include <iostream>
#include <numeric>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "scorelab/alignment.hpp"
#include "scorelab/dataset.hpp"
#include "scorelab/density.hpp"
#include "scorelab/detector.hpp"
#include "scorelab/evaluator.hpp"
#include "scorelab/io.hpp"
#include "scorelab/manifest.hpp"
#include "scorelab/mitigator.hpp"
#include "scorelab/model.hpp"
#include "scorelab/version.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace scorelab;

namespace {

constexpr int kExitUsage = 2;
constexpr int kExitData = 3;
constexpr int kExitNumerical = 4;

struct DataError : std::runtime_error {
    using std::runtime_error::runtime_error;
};
struct NumericalError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

json load_json_file(const fs::path& path) {
    try {
        return json::parse(io::read_file(path));
    } catch (const std::exception& e) {
        throw DataError("failed to read " + path.string() + ": " + e.what());
    }
}

model::SyntheticDataset load_dataset(const fs::path& path) {
    try {
        return model::dataset_from_json(load_json_file(path));
    } catch (const DataError&) {
        throw;
    } catch (const std::exception& e) {
        throw DataError("malformed dataset manifest " + path.string() + ": " + e.what());
    }
}

model::ScoreModel load_model(const fs::path& stem) {
    try {
        return model::load_checkpoint(stem);
    } catch (const std::exception& e) {
        throw DataError("failed to load checkpoint " + stem.string() + ": " + e.what());
    }
}

std::vector<evaluator::Score> labeled_scores(const std::vector<detector::DetectionRecord>& records) {
    std::vector<evaluator::Score> scores;
    for (const auto& r : records) {
        if (!r.error.empty()) continue;
        if (r.label) scores.push_back({r.metric_value, *r.label});
    }
    return scores;
}

void attach_labels(std::vector<detector::DetectionRecord>& records, const model::SyntheticDataset& ds) {
    for (auto& r : records) r.label = ds.is_planted(r.condition_id);
}

json detection_report(const std::vector<detector::DetectionRecord>& records, const detector::MetricConfig& cfg,
                      int schedule_T) {
    const auto scores = labeled_scores(records);
    std::size_t pos = 0, neg = 0;
    for (const auto& s : scores) (s.label ? pos : neg)++;
    if (pos == 0 || neg == 0)
        throw DataError("evaluation needs both memorized and non-memorized records");
    const auto curve = evaluator::roc(scores);
    double total_time = 0.0;
    for (const auto& r : records) total_time += r.wall_time;
    const double per_ten = records.empty() ? 0.0 : 10.0 * total_time / static_cast<double>(records.size());
    return json{{"auc", curve.auc},
                {"tpr_at_1pct_fpr", evaluator::tpr_at_fpr(curve, 0.01)},
                {"n", cfg.n},
                {"t_low", cfg.t_low},
                {"t_high", cfg.resolved_t_high(schedule_T)},
                {"normalization", detector::to_string(cfg.normalization)},
                {"formulation", detector::to_string(cfg.formulation)},
                {"gamma1", cfg.gamma1},
                {"gamma2", cfg.gamma2},
                {"memorized", pos},
                {"non_memorized", neg},
                {"total_time_seconds", total_time},
                {"mean_wall_time_per_10_prompts", per_ten}};
}

json metric_config_json(const detector::MetricConfig& cfg) {
    return json{{"gamma1", cfg.gamma1},
                {"gamma2", cfg.gamma2},
                {"t_low", cfg.t_low},
                {"t_high", cfg.t_high},
                {"n", cfg.n},
                {"normalization", detector::to_string(cfg.normalization)},
                {"formulation", detector::to_string(cfg.formulation)},
                {"guidance_scale", cfg.guidance_scale},
                {"seed", cfg.seed}};
}

/// Preset plumbing: each subcommand's options are mirror-registered here so a
/// plain key=value --config file can seed them before command-line parsing;
/// explicit flags then override the preset values. Unknown keys fail fast.
class OptionBinder {
public:
    explicit OptionBinder(CLI::App* cmd) : cmd_(cmd) {
        cmd->add_option("--config", config_path_, "Key=value preset file (keys match option names)");
    }

    template <typename T>
    CLI::Option* add(const std::string& name, T& var, const std::string& desc = "") {
        const std::string key = name.substr(2);  // strip the leading dashes
        setters_[key] = [&var](const std::string& text) { var = parse_value<T>(text); };
        return cmd_->add_option(name, var, desc)->capture_default_str();
    }

    /// Scans raw arguments for this subcommand's --config and applies it.
    void apply_preset(const std::vector<std::string>& args) const {
        std::string path;
        for (std::size_t i = 0; i < args.size(); ++i) {
            if (args[i] == "--config" && i + 1 < args.size()) path = args[i + 1];
            else if (args[i].rfind("--config=", 0) == 0) path = args[i].substr(9);
        }
        if (path.empty()) return;
        io::KeyValueConfig cfg;
        try {
            cfg = io::KeyValueConfig::load(path);
        } catch (const std::exception& e) {
            throw DataError(std::string("bad preset file: ") + e.what());
        }
        for (const auto& [key, value] : cfg.values()) {
            const auto it = setters_.find(key);
            if (it == setters_.end()) throw DataError("unknown key in preset file: " + key);
            try {
                it->second(value);
            } catch (const std::exception&) {
                throw DataError("bad value for preset key " + key + ": " + value);
            }
        }
    }

private:
    template <typename T>
    static T parse_value(const std::string& text) {
        if constexpr (std::is_same_v<T, std::string>) {
            return text;
        } else if constexpr (std::is_same_v<T, double>) {
            return std::stod(text);
        } else if constexpr (std::is_same_v<T, int>) {
            return std::stoi(text);
        } else if constexpr (std::is_same_v<T, std::uint64_t>) {
            return std::stoull(text);
        } else if constexpr (std::is_same_v<T, std::vector<int>>) {
            std::vector<int> out;
            std::istringstream in(text);
            std::string tok;
            while (in >> tok) out.push_back(std::stoi(tok));
            return out;
        } else {
            static_assert(sizeof(T) == 0, "unsupported preset type");
        }
    }

    CLI::App* cmd_;
    std::string config_path_;
    std::map<std::string, std::function<void(const std::string&)>> setters_;
};

void add_metric_options(OptionBinder& bind, detector::MetricConfig& cfg, std::string& normalization,
                        std::string& formulation) {
    bind.add("--gamma1", cfg.gamma1, "Weight of the anisotropic cosine term");
    bind.add("--gamma2", cfg.gamma2, "Weight of the isotropic norm term");
    bind.add("--t-low", cfg.t_low, "Anisotropic probe step");
    bind.add("--t-high", cfg.t_high, "Isotropic probe step (0 = schedule T)");
    bind.add("--n", cfg.n, "Noise draws averaged per condition");
    bind.add("--normalization", normalization, "l2 | l1 | spatial-l2");
    bind.add("--formulation", formulation, "original | uncond-vs-cond | cond-vs-guidance");
    bind.add("--w", cfg.guidance_scale, "Guidance scale");
    bind.add("--seed", cfg.seed, "Noise seed");
}

// ---------------------------------------------------------------------------

int cmd_build_dataset(const model::DatasetConfig& cfg, const std::string& out_root) {
    cfg.validate();
    const json snapshot{{"dim", cfg.dim},
                        {"planted", cfg.planted_count},
                        {"non_planted", cfg.non_planted_count},
                        {"duplication_factor", cfg.duplication_factor},
                        {"samples_per_condition", cfg.samples_per_condition},
                        {"pool_modes", cfg.pool_modes},
                        {"modes_per_condition", cfg.modes_per_condition},
                        {"mode_radius", cfg.mode_radius},
                        {"cov_major", cfg.cov_major},
                        {"cov_minor", cfg.cov_minor},
                        {"seed", cfg.seed}};
    cli::RunManifest manifest("build-dataset", snapshot, cfg.seed);
    const fs::path dir = manifest.run_dir(out_root);

    const auto ds = model::build_dataset(cfg);
    io::write_file_atomic(dir / "dataset.json", model::dataset_to_json(ds).dump() + "\n");
    manifest.add_output("dataset.json");

    // the mode pool as an analytic density, ready for the diagnose command
    const density::DiffusedDensity pool_density(ds.pool, density::NoiseSchedule::linear(50, 0.01, 0.10));
    io::write_file_atomic(dir / "pool_density.json", density::to_json(pool_density).dump(2) + "\n");
    manifest.add_output("pool_density.json");

    manifest.write(out_root);
    std::cout << dir.string() << "\n";
    return 0;
}

int cmd_train(const fs::path& dataset_path, const model::TrainConfig& cfg, const model::ModelConfig& mcfg,
              int schedule_T, double beta_min, double beta_max, const std::string& out_root) {
    const json snapshot{{"epochs", cfg.epochs},
                        {"batch_size", cfg.batch_size},
                        {"learning_rate", cfg.learning_rate},
                        {"p_drop", cfg.p_drop},
                        {"momentum", cfg.momentum},
                        {"seed", cfg.seed},
                        {"T", schedule_T},
                        {"beta_min", beta_min},
                        {"beta_max", beta_max},
                        {"embedding_dim", mcfg.embedding_dim},
                        {"time_frequencies", mcfg.time_frequencies},
                        {"hidden", mcfg.hidden}};
    cli::RunManifest manifest("train", snapshot, cfg.seed);
    manifest.add_input("dataset", dataset_path);
    const fs::path dir = manifest.run_dir(out_root);

    auto ds = load_dataset(dataset_path);
    model::ModelConfig model_cfg = mcfg;
    model_cfg.data_dim = static_cast<int>(ds.dim());
    const auto schedule = density::NoiseSchedule::linear(schedule_T, beta_min, beta_max);

    model::TrainStats stats;
    model::ScoreModel trained;
    try {
        trained = model::train(ds, schedule, cfg, model_cfg, &stats);
    } catch (const std::runtime_error& e) {
        throw NumericalError(e.what());
    }

    model::save_checkpoint(trained, dir / "model");
    manifest.add_output("model.json");
    manifest.add_output("model.bin");

    io::CsvWriter losses({"epoch", "loss"});
    for (std::size_t i = 0; i < stats.epoch_losses.size(); ++i)
        losses.append_row({std::to_string(i), io::format_double(stats.epoch_losses[i])});
    io::write_file_atomic(dir / "losses.csv", losses.str());
    manifest.add_output("losses.csv");

    manifest.write(out_root);
    std::cout << dir.string() << "\n";
    return 0;
}

int cmd_detect(const fs::path& checkpoint, const fs::path& dataset_path, detector::MetricConfig cfg,
               bool fit_gammas_flag, const std::string& out_root) {
    json snapshot = metric_config_json(cfg);
    snapshot["fit_gammas"] = fit_gammas_flag;
    cli::RunManifest manifest("detect", snapshot, cfg.seed);
    manifest.add_input("checkpoint", checkpoint.string() + ".json");
    manifest.add_input("weights", checkpoint.string() + ".bin");
    manifest.add_input("dataset", dataset_path);
    const fs::path dir = manifest.run_dir(out_root);

    const auto m = load_model(checkpoint);
    const auto ds = load_dataset(dataset_path);
    cfg.validate(m.schedule.T);

    std::vector<int> conditions(ds.condition_count);
    std::iota(conditions.begin(), conditions.end(), 0);
    auto records = detector::batch_detect(m, conditions, cfg);
    attach_labels(records, ds);

    if (fit_gammas_flag) {
        std::vector<std::tuple<double, double, bool>> labeled;
        for (const auto& r : records)
            if (r.error.empty() && r.label) labeled.emplace_back(r.cosine_term, r.norm_term, *r.label);
        const auto [g1, g2] = detector::fit_gammas(labeled);
        cfg.gamma1 = g1;
        cfg.gamma2 = g2;
        for (auto& r : records) r.metric_value = g1 * r.cosine_term + g2 * r.norm_term;
    }

    io::write_file_atomic(dir / "records.csv", detector::records_csv(records));
    manifest.add_output("records.csv");

    const json report = detection_report(records, cfg, m.schedule.T);
    io::write_file_atomic(dir / "report.json", report.dump(2) + "\n");
    manifest.add_output("report.json");

    io::write_file_atomic(dir / "roc.csv", evaluator::roc_csv(evaluator::roc(labeled_scores(records))));
    manifest.add_output("roc.csv");

    manifest.write(out_root);
    std::cout << report.dump(2) << "\n" << dir.string() << "\n";
    return 0;
}

int cmd_evaluate(const fs::path& records_path, std::optional<double> kde_clip, const std::string& out_root) {
    cli::RunManifest manifest("evaluate", json{{"records", records_path.string()}}, 0);
    manifest.add_input("records", records_path);
    const fs::path dir = manifest.run_dir(out_root);

    // records.csv: condition_id,metric,cosine_term,norm_term,label,wall_time
    const std::string text = io::read_file(records_path);
    std::istringstream in(text);
    std::string line;
    std::getline(in, line);
    std::vector<detector::DetectionRecord> records;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        std::istringstream row(line);
        std::string cell;
        detector::DetectionRecord r;
        try {
            std::getline(row, cell, ',');
            r.condition_id = std::stoi(cell);
            std::getline(row, cell, ',');
            r.metric_value = std::stod(cell);
            std::getline(row, cell, ',');
            r.cosine_term = std::stod(cell);
            std::getline(row, cell, ',');
            r.norm_term = std::stod(cell);
            std::getline(row, cell, ',');
            if (!cell.empty()) r.label = cell == "1";
            std::getline(row, cell, ',');
            r.wall_time = std::stod(cell);
        } catch (const std::exception&) {
            throw DataError("malformed records csv row: " + line);
        }
        records.push_back(std::move(r));
    }

    detector::MetricConfig dummy;
    const json report = detection_report(records, dummy, 50);
    io::write_file_atomic(dir / "report.json", report.dump(2) + "\n");
    manifest.add_output("report.json");
    io::write_file_atomic(dir / "roc.csv", evaluator::roc_csv(evaluator::roc(labeled_scores(records))));
    manifest.add_output("roc.csv");

    std::vector<double> mem, non;
    for (const auto& r : records)
        if (r.label) (*r.label ? mem : non).push_back(r.metric_value);
    if (mem.size() >= 2 && non.size() >= 2) {
        const auto kde_mem = evaluator::kde(mem, std::nullopt, kde_clip);
        const auto kde_non = evaluator::kde(non, std::nullopt, kde_clip);
        if (!kde_mem.degenerate && !kde_non.degenerate) {
            io::write_file_atomic(dir / "kde_memorized.csv", evaluator::kde_csv(kde_mem));
            io::write_file_atomic(dir / "kde_non_memorized.csv", evaluator::kde_csv(kde_non));
            manifest.add_output("kde_memorized.csv");
            manifest.add_output("kde_non_memorized.csv");
        }
    }

    manifest.write(out_root);
    std::cout << report.dump(2) << "\n" << dir.string() << "\n";
    return 0;
}

int cmd_ablate(const fs::path& checkpoint, const fs::path& dataset_path, const std::string& sweep,
               detector::MetricConfig base, const std::string& out_root) {
    json snapshot = metric_config_json(base);
    snapshot["sweep"] = sweep;
    cli::RunManifest manifest("ablate", snapshot, base.seed);
    manifest.add_input("checkpoint", checkpoint.string() + ".json");
    manifest.add_input("dataset", dataset_path);
    const fs::path dir = manifest.run_dir(out_root);

    const auto m = load_model(checkpoint);
    const auto ds = load_dataset(dataset_path);
    std::vector<int> conditions(ds.condition_count);
    std::iota(conditions.begin(), conditions.end(), 0);

    std::vector<std::pair<std::string, detector::MetricConfig>> variants;
    if (sweep == "formulation") {
        for (const auto f : {detector::Formulation::uncond_vs_guidance, detector::Formulation::uncond_vs_cond,
                             detector::Formulation::cond_vs_guidance}) {
            auto cfg = base;
            cfg.formulation = f;
            variants.emplace_back(detector::to_string(f), cfg);
        }
    } else if (sweep == "components") {
        auto cos_only = base;
        cos_only.gamma2 = 0.0;
        auto norm_only = base;
        norm_only.gamma1 = 0.0;
        variants.emplace_back("cosine-only", cos_only);
        variants.emplace_back("norm-only", norm_only);
        variants.emplace_back("combined", base);
    } else if (sweep == "normalization") {
        for (const auto nm : {detector::Normalization::l1_flat, detector::Normalization::l2_flat,
                              detector::Normalization::spatial_l2}) {
            auto cfg = base;
            cfg.normalization = nm;
            variants.emplace_back(detector::to_string(nm), cfg);
        }
    } else if (sweep == "timestep") {
        for (const int t : {1, 2, 3}) {
            auto cfg = base;
            cfg.t_low = t;
            variants.emplace_back("t=" + std::to_string(t), cfg);
        }
    } else {
        throw DataError("unknown sweep: " + sweep +
                        " (expected formulation | components | normalization | timestep)");
    }

    io::CsvWriter table({"variant", "auc", "tpr_at_1pct_fpr"});
    json rows = json::array();
    for (const auto& [name, cfg] : variants) {
        auto records = detector::batch_detect(m, conditions, cfg);
        attach_labels(records, ds);
        const auto curve = evaluator::roc(labeled_scores(records));
        const double tpr = evaluator::tpr_at_fpr(curve, 0.01);
        table.append_row({name, io::format_double(curve.auc), io::format_double(tpr)});
        rows.push_back({{"variant", name}, {"auc", curve.auc}, {"tpr_at_1pct_fpr", tpr}});
    }
    io::write_file_atomic(dir / "ablation.csv", table.str());
    manifest.add_output("ablation.csv");
    const json report{{"sweep", sweep}, {"rows", rows}};
    io::write_file_atomic(dir / "report.json", report.dump(2) + "\n");
    manifest.add_output("report.json");

    manifest.write(out_root);
    std::cout << report.dump(2) << "\n" << dir.string() << "\n";
    return 0;
}

int cmd_mitigate(const fs::path& checkpoint, const fs::path& dataset_path, mitigator::MitigationConfig cfg,
                 std::vector<int> conditions, const std::string& out_root) {
    const json snapshot{{"learning_rate", cfg.learning_rate},
                        {"max_iterations", cfg.max_iterations},
                        {"optimal_loss", cfg.optimal_loss},
                        {"n", cfg.n},
                        {"guidance_scale", cfg.guidance_scale},
                        {"sample_guidance", cfg.sample_guidance},
                        {"seed", cfg.seed},
                        {"metric", metric_config_json(cfg.metric)},
                        {"conditions", conditions}};
    cli::RunManifest manifest("mitigate", snapshot, cfg.seed);
    manifest.add_input("checkpoint", checkpoint.string() + ".json");
    manifest.add_input("dataset", dataset_path);
    const fs::path dir = manifest.run_dir(out_root);

    const auto m = load_model(checkpoint);
    const auto ds = load_dataset(dataset_path);
    if (conditions.empty()) conditions = ds.planted;

    std::vector<mitigator::MitigationResult> results;
    json all = json::array();
    for (const int c : conditions) {
        std::optional<Eigen::VectorXd> target;
        if (const auto it = ds.planted_targets.find(c); it != ds.planted_targets.end()) target = it->second;
        try {
            results.push_back(mitigator::mitigate(m, c, cfg, target));
        } catch (const std::runtime_error& e) {
            throw NumericalError(e.what());
        }
        all.push_back(mitigator::mitigation_to_json(results.back()));
    }

    io::write_file_atomic(dir / "mitigation.json", all.dump(2) + "\n");
    manifest.add_output("mitigation.json");
    io::write_file_atomic(dir / "summary.csv", mitigator::summary_csv(results));
    manifest.add_output("summary.csv");

    manifest.write(out_root);
    std::cout << dir.string() << "\n";
    return 0;
}

int cmd_diagnose_eigenvariance(const fs::path& density_path, const std::vector<double>& probe,
                               const std::string& out_root) {
    cli::RunManifest manifest("diagnose", json{{"mode", "eigenvariance"}, {"probe", probe}}, 0);
    manifest.add_input("density", density_path);
    const fs::path dir = manifest.run_dir(out_root);

    const auto d = density::from_json(load_json_file(density_path));
    Eigen::VectorXd x(static_cast<Eigen::Index>(probe.size()));
    for (std::size_t i = 0; i < probe.size(); ++i) x[static_cast<Eigen::Index>(i)] = probe[i];
    if (x.size() != d.dim()) throw DataError("probe dimension does not match the density");

    io::CsvWriter csv({"t", "eigenvalue_variance"});
    for (int t = 1; t <= d.schedule.T; ++t)
        csv.append_row({std::to_string(t), io::format_double(density::eigenvalue_variance(d, x, t))});
    io::write_file_atomic(dir / "eigenvariance.csv", csv.str());
    manifest.add_output("eigenvariance.csv");

    manifest.write(out_root);
    std::cout << dir.string() << "\n";
    return 0;
}

int cmd_diagnose_field(const fs::path& uncond_path, const fs::path& cond_path, double lo, double hi,
                       int steps, int t, const std::string& out_root) {
    cli::RunManifest manifest(
        "diagnose", json{{"mode", "alignment-field"}, {"lo", lo}, {"hi", hi}, {"steps", steps}, {"t", t}}, 0);
    manifest.add_input("uncond_density", uncond_path);
    manifest.add_input("cond_density", cond_path);
    const fs::path dir = manifest.run_dir(out_root);

    const auto du = density::from_json(load_json_file(uncond_path));
    const auto dc = density::from_json(load_json_file(cond_path));
    if (du.dim() != 2) throw DataError("alignment-field export expects 2-D densities");

    std::vector<Eigen::VectorXd> grid;
    for (int i = 0; i < steps; ++i)
        for (int j = 0; j < steps; ++j) {
            const double fx = steps == 1 ? 0.0 : static_cast<double>(i) / (steps - 1);
            const double fy = steps == 1 ? 0.0 : static_cast<double>(j) / (steps - 1);
            grid.push_back(Eigen::Vector2d(lo + (hi - lo) * fx, lo + (hi - lo) * fy));
        }
    const auto field = alignment::sample_alignment_field(du, dc, grid, t);
    io::write_file_atomic(dir / "alignment_field.csv", alignment::field_csv(field));
    manifest.add_output("alignment_field.csv");

    manifest.write(out_root);
    std::cout << dir.string() << "\n";
    return 0;
}

int cmd_diagnose_norm_kl(const fs::path& checkpoint, const fs::path& dataset_path, int draws,
                         std::optional<double> clip, std::uint64_t seed, const std::string& out_root) {
    const json snapshot{{"mode", "norm-kl"}, {"draws", draws}, {"seed", seed},
                        {"clip", clip ? json(*clip) : json()}};
    cli::RunManifest manifest("diagnose", snapshot, seed);
    manifest.add_input("checkpoint", checkpoint.string() + ".json");
    manifest.add_input("dataset", dataset_path);
    const fs::path dir = manifest.run_dir(out_root);

    const auto m = load_model(checkpoint);
    const auto ds = load_dataset(dataset_path);

    auto norm_stats = [&](int t) {
        std::vector<double> mem, non;
        for (int c = 0; c < ds.condition_count; ++c) {
            Rng rng = Rng::derive(seed, static_cast<std::uint64_t>(c));
            for (int i = 0; i < draws; ++i) {
                const Eigen::VectorXd x = rng.gaussian_vector(m.config.data_dim);
                const Eigen::VectorXd diff =
                    model::score_at(m, x, t, c) - model::score_at(m, x, t, std::nullopt);
                (ds.is_planted(c) ? mem : non).push_back(diff.norm());
            }
        }
        return std::make_pair(mem, non);
    };

    json report;
    for (const auto& [name, t] : {std::pair<std::string, int>{"isotropic", m.schedule.T},
                                  std::pair<std::string, int>{"anisotropic", 1}}) {
        const auto [mem, non] = norm_stats(t);
        const auto kde_mem = evaluator::kde(mem, std::nullopt, clip);
        const auto kde_non = evaluator::kde(non, std::nullopt, clip);
        io::write_file_atomic(dir / ("kde_memorized_" + name + ".csv"), evaluator::kde_csv(kde_mem));
        io::write_file_atomic(dir / ("kde_non_memorized_" + name + ".csv"), evaluator::kde_csv(kde_non));
        manifest.add_output("kde_memorized_" + name + ".csv");
        manifest.add_output("kde_non_memorized_" + name + ".csv");
        report["kl_" + name] = evaluator::kl_divergence(kde_mem, kde_non);
    }
    report["trend_holds"] = report["kl_isotropic"].get<double>() > report["kl_anisotropic"].get<double>();

    io::write_file_atomic(dir / "report.json", report.dump(2) + "\n");
    manifest.add_output("report.json");
    manifest.write(out_root);
    std::cout << report.dump(2) << "\n" << dir.string() << "\n";
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"scorelab: a desk-scale lab for denoising-free memorization detection in score models"};
    app.set_version_flag("--version", kVersion);
    app.require_subcommand(1);

    std::string out_root = "runs";

    // build-dataset
    auto* build = app.add_subcommand("build-dataset", "Construct the synthetic planted dataset");
    model::DatasetConfig dcfg;
    OptionBinder build_bind(build);
    build_bind.add("--out", out_root, "Output root directory");
    build_bind.add("--dim", dcfg.dim);
    build_bind.add("--planted", dcfg.planted_count);
    build_bind.add("--non-planted", dcfg.non_planted_count);
    build_bind.add("--duplication", dcfg.duplication_factor);
    build_bind.add("--samples-per-condition", dcfg.samples_per_condition);
    build_bind.add("--pool-modes", dcfg.pool_modes);
    build_bind.add("--modes-per-condition", dcfg.modes_per_condition);
    build_bind.add("--mode-radius", dcfg.mode_radius);
    build_bind.add("--cov-major", dcfg.cov_major);
    build_bind.add("--cov-minor", dcfg.cov_minor);
    build_bind.add("--seed", dcfg.seed);

    // train
    auto* train = app.add_subcommand("train", "Train the conditional score model");
    std::string train_dataset;
    model::TrainConfig tcfg;
    model::ModelConfig mcfg;
    int schedule_T = 50;
    double beta_min = 0.01, beta_max = 0.10;
    OptionBinder train_bind(train);
    train_bind.add("--out", out_root, "Output root directory");
    train_bind.add("--dataset", train_dataset, "Dataset manifest json")->required();
    train_bind.add("--epochs", tcfg.epochs);
    train_bind.add("--batch-size", tcfg.batch_size);
    train_bind.add("--learning-rate", tcfg.learning_rate);
    train_bind.add("--p-drop", tcfg.p_drop);
    train_bind.add("--momentum", tcfg.momentum);
    train_bind.add("--seed", tcfg.seed);
    train_bind.add("--T", schedule_T);
    train_bind.add("--beta-min", beta_min);
    train_bind.add("--beta-max", beta_max);
    train_bind.add("--embedding-dim", mcfg.embedding_dim);
    train_bind.add("--time-frequencies", mcfg.time_frequencies);
    train_bind.add("--hidden", mcfg.hidden);

    // detect
    auto* detect = app.add_subcommand("detect", "Run the denoising-free metric over all conditions");
    std::string det_checkpoint, det_dataset;
    detector::MetricConfig det_cfg;
    std::string det_norm = "l2", det_form = "original";
    bool det_fit = false;
    OptionBinder detect_bind(detect);
    detect_bind.add("--out", out_root, "Output root directory");
    detect_bind.add("--checkpoint", det_checkpoint, "Checkpoint stem (without .json/.bin)")->required();
    detect_bind.add("--dataset", det_dataset, "Dataset manifest json (labels)")->required();
    add_metric_options(detect_bind, det_cfg, det_norm, det_form);
    detect->add_flag("--fit-gammas", det_fit, "Fit gamma weights by logistic regression on the records");

    // evaluate
    auto* evaluate = app.add_subcommand("evaluate", "Evaluate a records csv into a roc/auc/tpr report");
    std::string eval_records;
    double eval_clip = 0.0;
    bool eval_has_clip = false;
    OptionBinder eval_bind(evaluate);
    eval_bind.add("--out", out_root, "Output root directory");
    eval_bind.add("--records", eval_records, "records.csv from detect")->required();
    evaluate->add_option("--clip", eval_clip, "Clip ceiling applied to metric values before the KDE export")
        ->each([&eval_has_clip](const std::string&) { eval_has_clip = true; });

    // ablate
    auto* ablate = app.add_subcommand("ablate", "Sweep metric variants and report AUC/TPR per row");
    std::string ab_checkpoint, ab_dataset, ab_sweep = "formulation";
    detector::MetricConfig ab_cfg;
    std::string ab_norm = "l2", ab_form = "original";
    OptionBinder ablate_bind(ablate);
    ablate_bind.add("--out", out_root, "Output root directory");
    ablate_bind.add("--checkpoint", ab_checkpoint)->required();
    ablate_bind.add("--dataset", ab_dataset)->required();
    ablate_bind.add("--sweep", ab_sweep, "formulation | components | normalization | timestep");
    add_metric_options(ablate_bind, ab_cfg, ab_norm, ab_form);

    // mitigate
    auto* mitigate = app.add_subcommand("mitigate", "Optimize prompt embeddings against the metric");
    std::string mit_checkpoint, mit_dataset;
    mitigator::MitigationConfig mit_cfg;
    std::string mit_norm = "l2", mit_form = "original";
    std::vector<int> mit_conditions;
    OptionBinder mitigate_bind(mitigate);
    mitigate_bind.add("--out", out_root, "Output root directory");
    mitigate_bind.add("--checkpoint", mit_checkpoint)->required();
    mitigate_bind.add("--dataset", mit_dataset)->required();
    mitigate_bind.add("--learning-rate", mit_cfg.learning_rate);
    mitigate_bind.add("--iterations", mit_cfg.max_iterations);
    mitigate_bind.add("--optimal-loss", mit_cfg.optimal_loss);
    mitigate_bind.add("--n", mit_cfg.n);
    mitigate_bind.add("--w", mit_cfg.guidance_scale);
    mitigate_bind.add("--sample-guidance", mit_cfg.sample_guidance);
    mitigate_bind.add("--seed", mit_cfg.seed);
    mitigate_bind.add("--gamma1", mit_cfg.metric.gamma1);
    mitigate_bind.add("--gamma2", mit_cfg.metric.gamma2);
    mitigate_bind.add("--t-low", mit_cfg.metric.t_low);
    mitigate_bind.add("--t-high", mit_cfg.metric.t_high);
    mitigate_bind.add("--normalization", mit_norm);
    mitigate_bind.add("--formulation", mit_form);
    mitigate_bind.add("--conditions", mit_conditions, "Condition ids (default: all planted)");

    // diagnose
    auto* diagnose = app.add_subcommand("diagnose", "Analytic and model diagnostics");
    std::string diag_mode = "eigenvariance";
    std::string diag_density, diag_cond_density, diag_checkpoint, diag_dataset;
    std::vector<double> diag_probe{0.7, -0.4};
    double diag_lo = -2.0, diag_hi = 2.0;
    int diag_steps = 41, diag_t = 1, diag_draws = 16;
    double diag_clip = 0.0;
    bool diag_has_clip = false;
    std::uint64_t diag_seed = 42;
    OptionBinder diag_bind(diagnose);
    diag_bind.add("--out", out_root, "Output root directory");
    diag_bind.add("--mode", diag_mode, "eigenvariance | alignment-field | norm-kl");
    diag_bind.add("--density", diag_density, "Analytic density json");
    diag_bind.add("--cond-density", diag_cond_density, "Conditional density json (alignment-field)");
    diagnose->add_option("--probe", diag_probe, "Probe point (eigenvariance)")->capture_default_str();
    diag_bind.add("--grid-min", diag_lo);
    diag_bind.add("--grid-max", diag_hi);
    diag_bind.add("--grid-steps", diag_steps);
    diag_bind.add("--t", diag_t, "Probe step (alignment-field)");
    diag_bind.add("--checkpoint", diag_checkpoint, "Checkpoint stem (norm-kl)");
    diag_bind.add("--dataset", diag_dataset, "Dataset manifest (norm-kl)");
    diag_bind.add("--draws", diag_draws, "Noise draws per condition (norm-kl)");
    diagnose->add_option("--clip", diag_clip, "Clip ceiling for the norm KDEs (norm-kl)")
        ->each([&diag_has_clip](const std::string&) { diag_has_clip = true; });
    diag_bind.add("--seed", diag_seed);

    // seed option values from a preset file before parsing, so explicit
    // command-line flags take precedence
    try {
        if (argc >= 2) {
            const std::string sub = argv[1];
            const std::vector<std::string> rest(argv + 2, argv + argc);
            const std::map<std::string, const OptionBinder*> binders{
                {"build-dataset", &build_bind}, {"train", &train_bind},   {"detect", &detect_bind},
                {"evaluate", &eval_bind},       {"ablate", &ablate_bind}, {"mitigate", &mitigate_bind},
                {"diagnose", &diag_bind}};
            if (const auto it = binders.find(sub); it != binders.end()) it->second->apply_preset(rest);
        }
    } catch (const std::exception& e) {
        std::cerr << json{{"error", e.what()}, {"exit_code", kExitData}}.dump() << "\n";
        return kExitData;
    }

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? 0 : kExitUsage;
    }

    try {
        if (build->parsed()) return cmd_build_dataset(dcfg, out_root);
        if (train->parsed())
            return cmd_train(train_dataset, tcfg, mcfg, schedule_T, beta_min, beta_max, out_root);
        if (detect->parsed()) {
            det_cfg.normalization = detector::normalization_from_string(det_norm);
            det_cfg.formulation = detector::formulation_from_string(det_form);
            return cmd_detect(det_checkpoint, det_dataset, det_cfg, det_fit, out_root);
        }
        if (evaluate->parsed())
            return cmd_evaluate(eval_records,
                                eval_has_clip ? std::optional<double>(eval_clip) : std::nullopt, out_root);
        if (ablate->parsed()) {
            ab_cfg.normalization = detector::normalization_from_string(ab_norm);
            ab_cfg.formulation = detector::formulation_from_string(ab_form);
            return cmd_ablate(ab_checkpoint, ab_dataset, ab_sweep, ab_cfg, out_root);
        }
        if (mitigate->parsed()) {
            mit_cfg.metric.normalization = detector::normalization_from_string(mit_norm);
            mit_cfg.metric.formulation = detector::formulation_from_string(mit_form);
            return cmd_mitigate(mit_checkpoint, mit_dataset, mit_cfg, mit_conditions, out_root);
        }
        if (diagnose->parsed()) {
            if (diag_mode == "eigenvariance") {
                if (diag_density.empty()) throw DataError("--density is required for eigenvariance");
                return cmd_diagnose_eigenvariance(diag_density, diag_probe, out_root);
            }
            if (diag_mode == "alignment-field") {
                if (diag_density.empty() || diag_cond_density.empty())
                    throw DataError("--density and --cond-density are required for alignment-field");
                return cmd_diagnose_field(diag_density, diag_cond_density, diag_lo, diag_hi, diag_steps,
                                          diag_t, out_root);
            }
            if (diag_mode == "norm-kl") {
                if (diag_checkpoint.empty() || diag_dataset.empty())
                    throw DataError("--checkpoint and --dataset are required for norm-kl");
                return cmd_diagnose_norm_kl(diag_checkpoint, diag_dataset, diag_draws,
                                            diag_has_clip ? std::optional<double>(diag_clip) : std::nullopt,
                                            diag_seed, out_root);
            }
            throw DataError("unknown diagnose mode: " + diag_mode);
        }
    } catch (const NumericalError& e) {
        std::cerr << json{{"error", e.what()}, {"exit_code", kExitNumerical}}.dump() << "\n";
        return kExitNumerical;
    } catch (const model::SamplerDivergedError& e) {
        std::cerr << json{{"error", e.what()}, {"exit_code", kExitNumerical}}.dump() << "\n";
        return kExitNumerical;
    } catch (const std::exception& e) {
        std::cerr << json{{"error", e.what()}, {"exit_code", kExitData}}.dump() << "\n";
        return kExitData;
    }
    return 0;
}
