#pragma once

// Run summaries (JSON) and cross-run report tables.

#include "deft/collectives.hpp"
#include "deft/config.hpp"
#include "deft/metrics.hpp"
#include "deft/trainer.hpp"

#include <json.hpp>

#include <algorithm>
#include <cstddef>
#include <cstdio>
#include <map>
#include <optional>
#include <ostream>
#include <string>
#include <tuple>
#include <vector>

namespace deft {

inline nlohmann::json to_json(const PhaseTimes& t) {
    return {{"forward", t.forward},   {"backward", t.backward},   {"select", t.select},
            {"comm", t.comm},         {"partition", t.partition}, {"total", t.total}};
}

/// Summary of one sweep point; `config_text` replays the run.
inline nlohmann::json run_summary(const RunConfig& point, const RunResult& run) {
    using nlohmann::json;
    const auto& train = point.train;
    const auto model = make_model(point.model, train.seed);
    const std::size_t n_g = model->layout().n_g();

    double mean_error = 0.0;
    double mean_speedup = 0.0;
    double mean_trivial = 0.0;
    std::size_t trivial_count = 0;
    double mean_comm_cost = 0.0;
    double mean_k_eff = 0.0;
    for (const auto& m : run.metrics) {
        mean_error += m.error_norm;
        mean_speedup += m.speedup;
        if (m.speedup_trivial) {
            mean_trivial += *m.speedup_trivial;
            ++trivial_count;
        }
        const double k_eff = effective_k(m, train, n_g);
        mean_k_eff += k_eff;
        const auto kind = train.sparsifier.kind == SparsifierKind::deft   ? CommCostKind::deft
                          : train.sparsifier.kind == SparsifierKind::cltk ? CommCostKind::cltk
                                                                          : CommCostKind::topk;
        mean_comm_cost += analytic_comm_cost(kind, train.n_workers, k_eff, point.alpha, point.beta);
    }
    const double iters = run.metrics.empty() ? 1.0 : static_cast<double>(run.metrics.size());

    json final_metrics = json::object();
    if (!run.metrics.empty()) {
        const auto& last = run.metrics.back();
        final_metrics = {{"iteration", last.iteration},
                         {"actual_density", last.actual_density},
                         {"error_norm", last.error_norm},
                         {"loss", run.final_evaluation.loss}};
        if (run.final_evaluation.accuracy) {
            final_metrics["accuracy"] = *run.final_evaluation.accuracy;
        }
    }

    json out;
    out["config_text"] = to_config_text(point);
    out["config"] = {{"model", std::string(to_string(point.model.kind))},
                     {"sparsifier", std::string(to_string(train.sparsifier.kind))},
                     {"density", train.sparsifier.density},
                     {"threshold", train.sparsifier.threshold},
                     {"workers", train.n_workers},
                     {"iterations", train.iterations},
                     {"seed", train.seed},
                     {"mode", std::string(to_string(train.mode))},
                     {"strict_alg1", train.fill == ValueFill::strict_alg1},
                     {"n_g", n_g}};
    out["final"] = final_metrics;
    out["mean_density"] = run.mean_density();
    out["mean_error"] = mean_error / iters;
    out["target_k"] = detail::cost_model_k(train.sparsifier, n_g);
    out["speedup"] = {{"workers", train.n_workers},
                      {"mean_f_n", mean_speedup / iters},
                      {"mean_f_trivial", trivial_count ? json(mean_trivial / static_cast<double>(trivial_count))
                                                       : json(nullptr)}};
    out["comm_model"] = {{"alpha", point.alpha},
                         {"beta", point.beta},
                         {"mean_k_effective", mean_k_eff / iters},
                         {"mean_cost", mean_comm_cost / iters}};
    if (point.timings) {
        out["time_breakdown"] = to_json(time_breakdown(run.metrics));
    }
    out["ledger"] = {
        {"broadcast_bytes", run.ledger.totals(CollectiveOp::broadcast).byte_count},
        {"all_gather_bytes", run.ledger.totals(CollectiveOp::all_gather).byte_count},
        {"all_reduce_bytes", run.ledger.totals(CollectiveOp::all_reduce).byte_count},
    };
    return out;
}

struct SummaryRow {
    std::string sparsifier;
    double density = 0.0;
    std::size_t workers = 0;
    double mean_density = 0.0;
    double mean_error = 0.0;
    double final_error = 0.0;
    double final_loss = 0.0;
    std::optional<double> final_accuracy;
    double mean_f_n = 0.0;
    std::optional<double> mean_f_trivial;
    std::optional<double> mean_t_select;
};

inline SummaryRow summary_row(const nlohmann::json& j) {
    SummaryRow r;
    const auto& c = j.at("config");
    r.sparsifier = c.at("sparsifier").get<std::string>();
    r.density = c.at("density").get<double>();
    r.workers = c.at("workers").get<std::size_t>();
    r.mean_density = j.at("mean_density").get<double>();
    r.mean_error = j.at("mean_error").get<double>();
    const auto& f = j.at("final");
    r.final_error = f.value("error_norm", 0.0);
    r.final_loss = f.value("loss", 0.0);
    if (f.contains("accuracy")) {
        r.final_accuracy = f.at("accuracy").get<double>();
    }
    const auto& s = j.at("speedup");
    r.mean_f_n = s.at("mean_f_n").get<double>();
    if (!s.at("mean_f_trivial").is_null()) {
        r.mean_f_trivial = s.at("mean_f_trivial").get<double>();
    }
    if (j.contains("time_breakdown")) {
        r.mean_t_select = j.at("time_breakdown").at("select").get<double>();
    }
    return r;
}

struct ReportTables {
    std::vector<SummaryRow> rows;  // sorted by sparsifier, density, workers
};

inline ReportTables build_report(std::vector<SummaryRow> rows) {
    std::sort(rows.begin(), rows.end(), [](const SummaryRow& a, const SummaryRow& b) {
        return std::tie(a.sparsifier, a.density, a.workers) < std::tie(b.sparsifier, b.density, b.workers);
    });
    return {std::move(rows)};
}

namespace detail {

inline std::string opt(const std::optional<double>& v) { return v ? format_number(*v) : std::string(); }

// Measured selection speedup relative to the same series' single-worker point.
inline std::optional<double> measured_speedup(const ReportTables& t, const SummaryRow& r) {
    if (!r.mean_t_select || *r.mean_t_select <= 0.0) {
        return std::nullopt;
    }
    for (const auto& base : t.rows) {
        if (base.sparsifier == r.sparsifier && base.density == r.density && base.workers == 1 && base.mean_t_select) {
            return *base.mean_t_select / *r.mean_t_select;
        }
    }
    return std::nullopt;
}

}  // namespace detail

inline void write_density_csv(std::ostream& os, const ReportTables& t) {
    os << "sparsifier,density,workers,mean_density,inflation\n";
    for (const auto& r : t.rows) {
        os << r.sparsifier << ',' << format_number(r.density) << ',' << r.workers << ','
           << format_number(r.mean_density) << ',' << format_number(r.mean_density / r.density) << '\n';
    }
}

inline void write_speedup_csv(std::ostream& os, const ReportTables& t) {
    os << "sparsifier,density,workers,mean_f_n,mean_f_trivial,measured_select_speedup\n";
    for (const auto& r : t.rows) {
        os << r.sparsifier << ',' << format_number(r.density) << ',' << r.workers << ',' << format_number(r.mean_f_n)
           << ',' << detail::opt(r.mean_f_trivial) << ',' << detail::opt(detail::measured_speedup(t, r)) << '\n';
    }
}

inline void write_error_csv(std::ostream& os, const ReportTables& t) {
    os << "sparsifier,density,workers,mean_error,final_error,final_loss,final_accuracy\n";
    for (const auto& r : t.rows) {
        os << r.sparsifier << ',' << format_number(r.density) << ',' << r.workers << ','
           << format_number(r.mean_error) << ',' << format_number(r.final_error) << ','
           << format_number(r.final_loss) << ',' << detail::opt(r.final_accuracy) << '\n';
    }
}

/// Human-readable rendering of the three tables.
inline void write_report_text(std::ostream& os, const ReportTables& t) {
    auto pad = [](std::string s, std::size_t w) {
        if (s.size() < w) s.append(w - s.size(), ' ');
        return s;
    };
    auto fixed = [](double v, int prec) {
        char buf[64];
        std::snprintf(buf, sizeof buf, "%.*f", prec, v);
        return std::string(buf);
    };
    os << "== density vs workers ==\n";
    os << pad("sparsifier", 16) << pad("d", 10) << pad("n", 6) << pad("mean density", 16) << "x d\n";
    for (const auto& r : t.rows) {
        os << pad(r.sparsifier, 16) << pad(format_number(r.density), 10) << pad(std::to_string(r.workers), 6)
           << pad(fixed(r.mean_density, 6), 16) << fixed(r.mean_density / r.density, 2) << '\n';
    }
    os << "\n== selection speedup vs workers ==\n";
    os << pad("sparsifier", 16) << pad("d", 10) << pad("n", 6) << pad("f(n)", 12) << pad("f_trivial(n)", 14)
       << "measured\n";
    for (const auto& r : t.rows) {
        const auto meas = detail::measured_speedup(t, r);
        os << pad(r.sparsifier, 16) << pad(format_number(r.density), 10) << pad(std::to_string(r.workers), 6)
           << pad(fixed(r.mean_f_n, 3), 12) << pad(r.mean_f_trivial ? fixed(*r.mean_f_trivial, 3) : "-", 14)
           << (meas ? fixed(*meas, 2) : "-") << '\n';
    }
    os << "\n== error summary ==\n";
    os << pad("sparsifier", 16) << pad("d", 10) << pad("n", 6) << pad("mean |e|", 14) << pad("final |e|", 14)
       << pad("final loss", 14) << "final acc\n";
    for (const auto& r : t.rows) {
        os << pad(r.sparsifier, 16) << pad(format_number(r.density), 10) << pad(std::to_string(r.workers), 6)
           << pad(fixed(r.mean_error, 5), 14) << pad(fixed(r.final_error, 5), 14) << pad(fixed(r.final_loss, 5), 14)
           << (r.final_accuracy ? fixed(*r.final_accuracy, 4) : "-") << '\n';
    }
}

}  // namespace deft
