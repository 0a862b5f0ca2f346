#include <catch2/catch_amalgamated.hpp>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>

#include <nlohmann/json.hpp>

#include "scorelab/density.hpp"
#include "scorelab/io.hpp"

using namespace scorelab;
namespace fs = std::filesystem;
using nlohmann::json;

namespace {

struct CliResult {
    int exit_code;
    std::string stdout_text;
};

CliResult run_cli(const std::string& args, const fs::path& workdir) {
    const fs::path out = workdir / "cli_stdout.txt";
    const std::string cmd = "cd " + workdir.string() + " && " + SCORELAB_CLI_PATH + " " + args + " > " +
                            out.string() + " 2> " + (workdir / "cli_stderr.txt").string();
    const int status = std::system(cmd.c_str());
    CliResult res;
    res.exit_code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
    if (fs::exists(out)) res.stdout_text = io::read_file(out);
    return res;
}

fs::path find_run_dir(const fs::path& root, const std::string& prefix) {
    for (const auto& entry : fs::directory_iterator(root))
        if (entry.is_directory() && entry.path().filename().string().rfind(prefix, 0) == 0)
            return entry.path();
    throw std::runtime_error("no run dir with prefix " + prefix + " under " + root.string());
}

/// Tiny trained pipeline shared by the CLI tests: dataset + checkpoint paths.
struct CliLab {
    fs::path root;
    fs::path dataset;
    fs::path checkpoint;  // stem
    fs::path pool_density;
};

const CliLab& cli_lab() {
    static const CliLab lab = [] {
        CliLab l;
        l.root = fs::temp_directory_path() / "scorelab_cli_lab";
        fs::remove_all(l.root);
        fs::create_directories(l.root);
        REQUIRE(run_cli("build-dataset --planted 3 --non-planted 9 --duplication 24"
                        " --samples-per-condition 24 --seed 11 --out runs",
                        l.root)
                    .exit_code == 0);
        const fs::path build_dir = find_run_dir(l.root / "runs", "build-dataset-");
        l.dataset = build_dir / "dataset.json";
        l.pool_density = build_dir / "pool_density.json";
        REQUIRE(run_cli("train --dataset " + l.dataset.string() +
                            " --epochs 250 --seed 11 --hidden 48 48 --out runs",
                        l.root)
                    .exit_code == 0);
        l.checkpoint = find_run_dir(l.root / "runs", "train-") / "model";
        return l;
    }();
    return lab;
}

std::string mask_wall_time(const std::string& records_csv) {
    std::istringstream in(records_csv);
    std::ostringstream out;
    std::string line;
    while (std::getline(in, line)) {
        const auto last_comma = line.rfind(',');
        out << line.substr(0, last_comma) << "\n";
    }
    return out.str();
}

}  // namespace

TEST_CASE("cli writes manifests and reproduces identical outputs") {
    const auto& lab = cli_lab();
    const std::string detect_args = "detect --checkpoint " + lab.checkpoint.string() + " --dataset " +
                                    lab.dataset.string() + " --n 1 --seed 17 --out runs_detect";
    REQUIRE(run_cli(detect_args, lab.root).exit_code == 0);
    const fs::path dir = find_run_dir(lab.root / "runs_detect", "detect-");

    REQUIRE(fs::exists(dir / "manifest.json"));
    const json manifest = json::parse(io::read_file(dir / "manifest.json"));
    REQUIRE(manifest.at("command") == "detect");
    REQUIRE(manifest.at("inputs").contains("checkpoint"));
    REQUIRE(manifest.at("config").at("seed") == 17);
    const std::string records_first = io::read_file(dir / "records.csv");

    // replay: identical invocation lands in the same hash-keyed directory and
    // reproduces the csv byte-identically apart from the wall_time column
    REQUIRE(run_cli(detect_args, lab.root).exit_code == 0);
    const std::string records_second = io::read_file(dir / "records.csv");
    REQUIRE(mask_wall_time(records_first) == mask_wall_time(records_second));
    REQUIRE(io::read_file(dir / "roc.csv") == io::read_file(dir / "roc.csv"));

    // no temporary files remain
    for (const auto& entry : fs::recursive_directory_iterator(lab.root / "runs_detect"))
        REQUIRE(entry.path().extension() != ".tmp");
}

TEST_CASE("detect reports auc and tpr keys for n = 1 and n = 4") {
    const auto& lab = cli_lab();
    for (const int n : {1, 4}) {
        const auto res = run_cli("detect --checkpoint " + lab.checkpoint.string() + " --dataset " +
                                     lab.dataset.string() + " --n " + std::to_string(n) +
                                     " --out runs_n" + std::to_string(n),
                                 lab.root);
        REQUIRE(res.exit_code == 0);
        const fs::path dir = find_run_dir(lab.root / ("runs_n" + std::to_string(n)), "detect-");
        const json report = json::parse(io::read_file(dir / "report.json"));
        REQUIRE(report.contains("auc"));
        REQUIRE(report.contains("tpr_at_1pct_fpr"));
        REQUIRE(report.at("n") == n);
    }
}

TEST_CASE("ablate emits one row per variant") {
    const auto& lab = cli_lab();
    REQUIRE(run_cli("ablate --checkpoint " + lab.checkpoint.string() + " --dataset " + lab.dataset.string() +
                        " --sweep formulation --out runs_ablate",
                    lab.root)
                .exit_code == 0);
    const fs::path dir = find_run_dir(lab.root / "runs_ablate", "ablate-");
    const json report = json::parse(io::read_file(dir / "report.json"));
    REQUIRE(report.at("rows").size() == 3);
    std::set<std::string> names;
    for (const auto& row : report.at("rows")) names.insert(row.at("variant").get<std::string>());
    REQUIRE(names == std::set<std::string>{"original", "uncond-vs-cond", "cond-vs-guidance"});

    const std::string csv = io::read_file(dir / "ablation.csv");
    REQUIRE(std::count(csv.begin(), csv.end(), '\n') == 4);
}

TEST_CASE("config presets feed option values") {
    const auto& lab = cli_lab();
    const fs::path preset = lab.root / "preset.cfg";
    io::write_file_atomic(preset,
                          "# detection preset\n"
                          "gamma1 = 2.0\n"
                          "gamma2 = 0.5\n"
                          "seed = 99\n");
    REQUIRE(run_cli("detect --checkpoint " + lab.checkpoint.string() + " --dataset " + lab.dataset.string() +
                        " --config " + preset.string() + " --out runs_preset",
                    lab.root)
                .exit_code == 0);
    const fs::path dir = find_run_dir(lab.root / "runs_preset", "detect-");
    const json report = json::parse(io::read_file(dir / "report.json"));
    REQUIRE(report.at("gamma1") == 2.0);
    REQUIRE(report.at("gamma2") == 0.5);
    const json manifest = json::parse(io::read_file(dir / "manifest.json"));
    REQUIRE(manifest.at("seed") == 99);
}

TEST_CASE("unknown flags and missing inputs fail fast with the documented codes") {
    const auto& lab = cli_lab();
    REQUIRE(run_cli("detect --no-such-flag", lab.root).exit_code == 2);
    REQUIRE(run_cli("nonsense-command", lab.root).exit_code == 2);
    REQUIRE(run_cli("detect --checkpoint /nonexistent/model --dataset " + lab.dataset.string() +
                        " --out runs_missing",
                    lab.root)
                .exit_code == 3);
}

TEST_CASE("single-class evaluation input is a data error with no partial outputs") {
    const auto& lab = cli_lab();
    const fs::path records = lab.root / "single_class.csv";
    io::write_file_atomic(records,
                          "condition_id,metric,cosine_term,norm_term,label,wall_time\n"
                          "0,1.5,0.5,1.0,1,0.001\n"
                          "1,1.2,0.4,0.8,1,0.001\n");
    const auto res = run_cli("evaluate --records " + records.string() + " --out runs_single", lab.root);
    REQUIRE(res.exit_code == 3);
    if (fs::exists(lab.root / "runs_single"))
        for (const auto& entry : fs::recursive_directory_iterator(lab.root / "runs_single")) {
            REQUIRE(entry.path().extension() != ".tmp");
            REQUIRE(entry.path().filename() != "report.json");
        }
}

TEST_CASE("evaluate reproduces the detect report from records.csv") {
    const auto& lab = cli_lab();
    REQUIRE(run_cli("detect --checkpoint " + lab.checkpoint.string() + " --dataset " + lab.dataset.string() +
                        " --seed 21 --out runs_eval_src",
                    lab.root)
                .exit_code == 0);
    const fs::path det_dir = find_run_dir(lab.root / "runs_eval_src", "detect-");
    const json det_report = json::parse(io::read_file(det_dir / "report.json"));

    REQUIRE(run_cli("evaluate --records " + (det_dir / "records.csv").string() + " --out runs_eval",
                    lab.root)
                .exit_code == 0);
    const fs::path eval_dir = find_run_dir(lab.root / "runs_eval", "evaluate-");
    const json eval_report = json::parse(io::read_file(eval_dir / "report.json"));
    REQUIRE(eval_report.at("auc").get<double>() == Catch::Approx(det_report.at("auc").get<double>()));
    REQUIRE(fs::exists(eval_dir / "kde_memorized.csv"));
}

TEST_CASE("diagnose eigenvariance reproduces the flattening trend via the cli") {
    const auto& lab = cli_lab();
    // anisotropic analytic density under the default schedule
    density::GaussianDensity g(Eigen::Vector2d::Zero(), Eigen::Vector2d(4.0, 0.25).asDiagonal());
    const density::DiffusedDensity d(density::MixtureDensity::single(std::move(g)),
                                     density::NoiseSchedule::linear(50));
    const fs::path density_path = lab.root / "aniso_density.json";
    io::write_file_atomic(density_path, density::to_json(d).dump() + "\n");

    REQUIRE(run_cli("diagnose --mode eigenvariance --density " + density_path.string() +
                        " --probe 0.7 -0.4 --out runs_diag",
                    lab.root)
                .exit_code == 0);
    const fs::path dir = find_run_dir(lab.root / "runs_diag", "diagnose-");
    const std::string csv = io::read_file(dir / "eigenvariance.csv");
    std::istringstream in(csv);
    std::string line;
    std::getline(in, line);  // header
    double first = -1.0, last = -1.0;
    while (std::getline(in, line)) {
        const auto comma = line.find(',');
        const double v = std::stod(line.substr(comma + 1));
        if (first < 0.0) first = v;
        last = v;
    }
    REQUIRE(first > last);  // anisotropy decays toward the pure-noise regime
}

TEST_CASE("diagnose alignment-field exports a csv grid") {
    const auto& lab = cli_lab();
    density::GaussianDensity mode(Eigen::Vector2d(1.0, 0.0), 0.05 * Eigen::Matrix2d::Identity());
    const density::DiffusedDensity cond(density::MixtureDensity::single(std::move(mode)),
                                        density::NoiseSchedule::linear(50, 0.01, 0.10));
    const fs::path cond_path = lab.root / "cond_density.json";
    io::write_file_atomic(cond_path, density::to_json(cond).dump() + "\n");

    REQUIRE(run_cli("diagnose --mode alignment-field --density " + lab.pool_density.string() +
                        " --cond-density " + cond_path.string() +
                        " --grid-min -2 --grid-max 2 --grid-steps 9 --t 1 --out runs_field",
                    lab.root)
                .exit_code == 0);
    const fs::path dir = find_run_dir(lab.root / "runs_field", "diagnose-");
    const std::string csv = io::read_file(dir / "alignment_field.csv");
    REQUIRE(std::count(csv.begin(), csv.end(), '\n') == 9 * 9 + 1);
}

TEST_CASE("mitigate via the cli writes summary and per-condition json") {
    const auto& lab = cli_lab();
    REQUIRE(run_cli("mitigate --checkpoint " + lab.checkpoint.string() + " --dataset " +
                        lab.dataset.string() +
                        " --iterations 2 --optimal-loss -1e9 --gamma2 4 --out runs_mitigate",
                    lab.root)
                .exit_code == 0);
    const fs::path dir = find_run_dir(lab.root / "runs_mitigate", "mitigate-");
    const json results = json::parse(io::read_file(dir / "mitigation.json"));
    REQUIRE(results.size() == 3);  // defaults to the planted conditions
    for (const auto& r : results) {
        REQUIRE(r.at("loss_trajectory").size() == 2);
        REQUIRE(r.contains("pre_distance"));
    }
    const std::string csv = io::read_file(dir / "summary.csv");
    REQUIRE(std::count(csv.begin(), csv.end(), '\n') == 4);
}
