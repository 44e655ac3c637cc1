// deft: run sparsified-training experiments on the simulated cluster and
// summarise their artifacts.
//
//   deft run --config quadratic_deft.toml --seed 1 [--out DIR] [--mode lockstep|concurrent]
//            [--strict-alg1 true|false] [--timings true|false] [--ledger] [--validate-only]
//   deft report DIR
//
// Exit codes: 0 success, 1 config error, 2 numeric failure, 3 I/O error.

#include "deft/deft.hpp"

#include <CLI11.hpp>
#include <json.hpp>

#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

namespace fs = std::filesystem;

namespace {

enum ExitCode { kOk = 0, kConfigError = 1, kNumericFailure = 2, kIoError = 3 };

struct IoError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

std::string read_file(const fs::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) {
        throw IoError("cannot read " + path.string());
    }
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

// A summary JSON written by `run` is accepted as a config and replays its point.
deft::RunConfig load_config(const fs::path& path) {
    const std::string text = read_file(path);
    if (path.extension() == ".json") {
        nlohmann::json j;
        try {
            j = nlohmann::json::parse(text);
        } catch (const nlohmann::json::exception& e) {
            throw deft::ConfigError(path.string() + ": " + e.what());
        }
        if (!j.contains("config_text") || !j["config_text"].is_string()) {
            throw deft::ConfigError(path.string() + ": summary has no config_text");
        }
        return deft::parse_config(j["config_text"].get<std::string>(), path.string() + "#config_text");
    }
    return deft::parse_config(text, path.string());
}

struct RunOptions {
    std::string config;
    std::optional<std::string> out;
    std::optional<std::uint64_t> seed;
    std::optional<std::string> mode;
    std::optional<std::string> strict_alg1;
    std::optional<std::string> timings;
    bool ledger = false;
    bool validate_only = false;
};

int run_point(const deft::RunConfig& point, const fs::path& out_dir, bool write_ledger) {
    const auto stem = deft::artifact_stem(point);
    const fs::path csv_path = out_dir / (stem + ".csv");
    std::ofstream csv(csv_path, std::ios::binary);
    if (!csv) {
        throw IoError("cannot write " + csv_path.string());
    }
    csv << deft::kMetricsCsvHeader << '\n';
    deft::RunResult result;
    try {
        result = deft::run_training(point.model, point.train,
                                    [&](const deft::IterationMetrics& m) { deft::write_metrics_row(csv, m, point.timings); });
    } catch (const deft::NonFiniteError& e) {
        csv.flush();
        std::cerr << "error: " << stem << ": " << e.what() << " (partial metrics in " << csv_path.string() << ")\n";
        return kNumericFailure;
    }
    csv.flush();
    if (!csv) {
        throw IoError("failed writing " + csv_path.string());
    }

    const fs::path json_path = out_dir / (stem + ".json");
    std::ofstream js(json_path, std::ios::binary);
    if (!js) {
        throw IoError("cannot write " + json_path.string());
    }
    js << deft::run_summary(point, result).dump(2) << '\n';
    if (write_ledger) {
        std::ofstream lg(out_dir / (stem + "_ledger.csv"), std::ios::binary);
        result.ledger.write_csv(lg);
    }
    std::cout << stem << ": mean density " << deft::format_number(result.mean_density()) << ", final loss "
              << deft::format_number(result.final_evaluation.loss) << '\n';
    return kOk;
}

int cmd_run(const RunOptions& opt) {
    deft::RunConfig config;
    try {
        config = load_config(opt.config);
        if (opt.out) deft::apply_setting(config, "out", "\"" + *opt.out + "\"", "--out");
        if (opt.seed) deft::apply_setting(config, "seed", std::to_string(*opt.seed), "--seed");
        if (opt.mode) deft::apply_setting(config, "mode", *opt.mode, "--mode");
        if (opt.strict_alg1) deft::apply_setting(config, "strict_alg1", *opt.strict_alg1, "--strict-alg1");
        if (opt.timings) deft::apply_setting(config, "timings", *opt.timings, "--timings");
        deft::validate(config, opt.config);
    } catch (const deft::ConfigError& e) {
        std::cerr << "config error: " << e.what() << '\n';
        return kConfigError;
    }

    const auto points = deft::expand_sweep(config);
    std::cout << "sweep: " << points.size() << " point(s)\n";
    if (opt.validate_only) {
        std::cout << deft::to_config_text(config);
        return kOk;
    }
    if (!config.seed_set) {
        std::cerr << "config error: no seed; pass --seed or set `seed` in the config\n";
        return kConfigError;
    }

    const fs::path out_dir = config.out_dir;
    std::error_code ec;
    fs::create_directories(out_dir, ec);
    if (ec) {
        std::cerr << "io error: cannot create " << out_dir.string() << ": " << ec.message() << '\n';
        return kIoError;
    }
    for (const auto& point : points) {
        const int rc = run_point(point, out_dir, opt.ledger);
        if (rc != kOk) {
            return rc;
        }
    }
    return kOk;
}

int cmd_report(const std::string& dir) {
    std::vector<deft::SummaryRow> rows;
    if (!fs::is_directory(dir)) {
        std::cerr << "io error: " << dir << " is not a directory\n";
        return kIoError;
    }
    std::vector<fs::path> files;
    for (const auto& entry : fs::directory_iterator(dir)) {
        if (entry.path().extension() == ".json") {
            files.push_back(entry.path());
        }
    }
    std::sort(files.begin(), files.end());
    for (const auto& path : files) {
        try {
            const auto j = nlohmann::json::parse(read_file(path));
            if (j.contains("config") && j.contains("mean_density")) {
                rows.push_back(deft::summary_row(j));
            }
        } catch (const nlohmann::json::exception& e) {
            std::cerr << "warning: skipping " << path.string() << ": " << e.what() << '\n';
        }
    }
    if (rows.empty()) {
        std::cerr << "io error: no run summaries in " << dir << '\n';
        return kIoError;
    }
    const auto tables = deft::build_report(std::move(rows));
    deft::write_report_text(std::cout, tables);
    const fs::path base = dir;
    std::ofstream d(base / "report_density.csv"), s(base / "report_speedup.csv"), e(base / "report_error.csv");
    if (!d || !s || !e) {
        std::cerr << "io error: cannot write report tables into " << dir << '\n';
        return kIoError;
    }
    deft::write_density_csv(d, tables);
    deft::write_speedup_csv(s, tables);
    deft::write_error_csv(e, tables);
    return kOk;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"DEFT sparsified-training simulator"};
    app.require_subcommand(1);

    RunOptions run_opt;
    auto* run = app.add_subcommand("run", "Run one config (or every point of its sweep)");
    run->add_option("--config", run_opt.config, "Run config file (key = value) or a run summary JSON")
        ->required();
    run->add_option("--out", run_opt.out, "Output directory (overrides `out`)");
    run->add_option("--seed", run_opt.seed, "Seed (overrides `seed`; one of the two is required)");
    run->add_option("--mode", run_opt.mode, "lockstep | concurrent");
    run->add_option("--strict-alg1", run_opt.strict_alg1,
                    "true: contribute residuals at indices others selected; false: zero-fill");
    run->add_option("--timings", run_opt.timings, "false writes zero timing columns (byte-reproducible CSVs)");
    run->add_flag("--ledger", run_opt.ledger, "Also write <stem>_ledger.csv per point");
    run->add_flag("--validate-only", run_opt.validate_only, "Parse, print the resolved config and exit");

    std::string report_dir;
    auto* report = app.add_subcommand("report", "Aggregate run summaries in a directory into tables");
    report->add_option("dir", report_dir, "Artifact directory")->required();

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        return app.exit(e) == 0 ? kOk : kConfigError;
    }

    try {
        if (*run) {
            return cmd_run(run_opt);
        }
        return cmd_report(report_dir);
    } catch (const IoError& e) {
        std::cerr << "io error: " << e.what() << '\n';
        return kIoError;
    } catch (const deft::ConfigError& e) {
        std::cerr << "config error: " << e.what() << '\n';
        return kConfigError;
    } catch (const deft::NonFiniteError& e) {
        std::cerr << "numeric failure: " << e.what() << '\n';
        return kNumericFailure;
    }
}
