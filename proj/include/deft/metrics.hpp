#pragma once

// Per-iteration measurements, the selection cost model and CSV output.

#include "deft/partitioner.hpp"
#include "deft/tensor.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstddef>
#include <optional>
#include <ostream>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace deft {

/// Seconds per phase, taken from the slowest rank of each phase.
struct PhaseTimes {
    double forward = 0.0;
    double backward = 0.0;  // includes error-feedback accumulation
    double select = 0.0;
    double comm = 0.0;       // gathers, reductions, index broadcasts, model update
    double partition = 0.0;  // DEFT only
    double total = 0.0;      // slowest rank's end-to-end active time

    double phase_sum() const noexcept { return forward + backward + select + comm + partition; }
};

struct IterationMetrics {
    std::size_t iteration = 0;
    double actual_density = 0.0;
    double error_norm = 0.0;
    double loss = 0.0;
    std::optional<double> accuracy;
    PhaseTimes times;
    std::vector<double> worker_costs;
    double cost_max = 0.0;  // C(n)
    double speedup = 0.0;   // f(n)
    std::optional<double> speedup_trivial;
    std::size_t union_size = 0;
    /// max over ranks of the number of indices each rank selected.
    std::size_t max_local_selected = 0;
    std::size_t bytes_idx = 0;
    std::size_t bytes_grad = 0;
    std::size_t bytes_plan = 0;
    std::size_t layer_count = 0;
};

inline double measure_density(const IndexSet& selected, std::size_t n_g) {
    if (n_g == 0) {
        throw std::invalid_argument("measure_density: n_g must be positive");
    }
    return static_cast<double>(selected.size()) / static_cast<double>(n_g);
}

/// Mean over workers of ||e_i||_2.
inline double measure_error(std::span<const GradientVector> residuals) {
    if (residuals.empty()) {
        return 0.0;
    }
    double sum = 0.0;
    for (const auto& e : residuals) {
        double sq = 0.0;
        for (double v : e) {
            sq += v * v;
        }
        sum += std::sqrt(sq);
    }
    return sum / static_cast<double>(residuals.size());
}

struct CostModel {
    std::vector<double> worker_costs;  // C_i
    double cost_max = 0.0;             // C(n)
    double speedup = 0.0;              // f(n)
    double cost_trivial = 0.0;         // C_trivial(n)
    std::optional<double> speedup_trivial;
};

/// Top-k cost of the whole vector, n_g * log2(k + 1).
inline double full_selection_cost(std::size_t n_g, std::size_t k) { return layer_cost(n_g, k); }

/// Cost of the equal n-way split with k/n per part: (n_g / n) * log2(k / n + 1).
inline double trivial_cost(std::size_t n_g, std::size_t k, std::size_t n) {
    const double nd = static_cast<double>(n);
    return static_cast<double>(n_g) / nd * std::log2(static_cast<double>(k) / nd + 1.0);
}

/// n * log2(k + 1) / log2(k / n + 1); absent when k < n.
inline std::optional<double> speedup_trivial(std::size_t k, std::size_t n) {
    if (n == 0 || k < n) {
        return std::nullopt;
    }
    const double nd = static_cast<double>(n);
    return nd * std::log2(static_cast<double>(k) + 1.0) / std::log2(static_cast<double>(k) / nd + 1.0);
}

/// Same ratio in the unshifted log form, n * log2(k) / log2(k / n); needs k / n > 1.
inline std::optional<double> speedup_trivial_raw(double k, double n) {
    if (!(n >= 1.0) || !(k / n > 1.0)) {
        return std::nullopt;
    }
    return n * std::log2(k) / std::log2(k / n);
}

/// f(n) from per-worker costs C_i.
inline CostModel cost_model(std::span<const double> worker_costs, std::size_t n_g, std::size_t k_global) {
    if (worker_costs.empty()) {
        throw std::invalid_argument("cost_model: no workers");
    }
    CostModel m;
    m.worker_costs.assign(worker_costs.begin(), worker_costs.end());
    m.cost_max = *std::max_element(worker_costs.begin(), worker_costs.end());
    const double full = full_selection_cost(n_g, k_global);
    m.speedup = m.cost_max > 0.0 ? full / m.cost_max : 0.0;
    const std::size_t n = worker_costs.size();
    m.cost_trivial = trivial_cost(n_g, k_global, n);
    m.speedup_trivial = speedup_trivial(k_global, n);
    return m;
}

/// f(n) from the layers each worker was allocated, with each worker's own local k.
inline CostModel cost_model(std::span<const std::vector<LayerPartition>> allocated, std::size_t n_g,
                            std::size_t k_global) {
    std::vector<double> costs;
    costs.reserve(allocated.size());
    for (const auto& layers : allocated) {
        double c = 0.0;
        for (const auto& layer : layers) {
            if (layer.local_k < 1) {
                throw std::invalid_argument("cost_model: local_k not assigned");
            }
            c += layer_cost(layer.size(), layer.local_k);
        }
        costs.push_back(c);
    }
    return cost_model(costs, n_g, k_global);
}

/// Mean of every phase over the run.
inline PhaseTimes time_breakdown(std::span<const IterationMetrics> run) {
    PhaseTimes mean;
    if (run.empty()) {
        return mean;
    }
    for (const auto& m : run) {
        mean.forward += m.times.forward;
        mean.backward += m.times.backward;
        mean.select += m.times.select;
        mean.comm += m.times.comm;
        mean.partition += m.times.partition;
        mean.total += m.times.total;
    }
    const double n = static_cast<double>(run.size());
    mean.forward /= n;
    mean.backward /= n;
    mean.select /= n;
    mean.comm /= n;
    mean.partition /= n;
    mean.total /= n;
    return mean;
}

/// Shortest representation that round-trips.
inline std::string format_number(double v) {
    char buf[64];
    const auto res = std::to_chars(buf, buf + sizeof(buf), v);
    return std::string(buf, res.ptr);
}

inline constexpr const char* kMetricsCsvHeader =
    "iteration,actual_density,error_norm,loss,acc,t_forward,t_backward,t_select,t_comm,t_partition,C_n,f_n,"
    "f_trivial,bytes_idx,bytes_grad";

/// One CSV row; timing columns are written as 0 when `with_timings` is false so
/// that reruns compare byte for byte.
inline void write_metrics_row(std::ostream& os, const IterationMetrics& m, bool with_timings = true) {
    auto t = [&](double v) { return format_number(with_timings ? v : 0.0); };
    os << m.iteration << ',' << format_number(m.actual_density) << ',' << format_number(m.error_norm) << ','
       << format_number(m.loss) << ',' << (m.accuracy ? format_number(*m.accuracy) : std::string()) << ','
       << t(m.times.forward) << ',' << t(m.times.backward) << ',' << t(m.times.select) << ',' << t(m.times.comm)
       << ',' << t(m.times.partition) << ',' << format_number(m.cost_max) << ',' << format_number(m.speedup) << ','
       << (m.speedup_trivial ? format_number(*m.speedup_trivial) : std::string()) << ',' << m.bytes_idx << ','
       << m.bytes_grad << '\n';
}

}  // namespace deft
