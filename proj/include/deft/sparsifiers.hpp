#pragma once

// Gradient sparsifiers: DEFT (layer-wise, exclusive allocation), global Top-k,
// cyclic leader Top-k (CLT-k) and a fixed hard threshold.

#include "deft/collectives.hpp"
#include "deft/partitioner.hpp"
#include "deft/tensor.hpp"

#include <chrono>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace deft {

enum class SparsifierKind { deft, topk, cltk, hard_threshold };

inline std::string_view to_string(SparsifierKind k) {
    switch (k) {
    case SparsifierKind::deft: return "deft";
    case SparsifierKind::topk: return "topk";
    case SparsifierKind::cltk: return "cltk";
    case SparsifierKind::hard_threshold: return "hard_threshold";
    }
    return "unknown";
}

inline std::optional<SparsifierKind> parse_sparsifier_kind(std::string_view s) {
    if (s == "deft") return SparsifierKind::deft;
    if (s == "topk") return SparsifierKind::topk;
    if (s == "cltk") return SparsifierKind::cltk;
    if (s == "hard_threshold" || s == "threshold") return SparsifierKind::hard_threshold;
    return std::nullopt;
}

struct SparsifierConfig {
    SparsifierKind kind = SparsifierKind::deft;
    double density = 0.01;
    /// Only read by the hard-threshold sparsifier.
    double threshold = 0.0;

    /// Throws std::invalid_argument if the config cannot drive a model of n_g parameters.
    void validate(std::size_t n_g) const {
        if (kind == SparsifierKind::hard_threshold) {
            if (!(threshold >= 0.0)) {
                throw std::invalid_argument("threshold must be >= 0");
            }
            return;
        }
        (void)target_k(n_g, density);
    }
};

/// Wall time spent by one rank inside the sparsifier, blocked time excluded.
struct SelectionTimings {
    double partition = 0.0;  // DEFT only: norms, local k, allocation, plan broadcast
    double select = 0.0;     // top-k / threshold scans
    double comm = 0.0;       // CLT-k index broadcast
};

struct SelectionResult {
    IndexSet indices;
    std::size_t local_k_total = 0;
    /// This worker's selection cost, sum of size * log2(k + 1) over scanned ranges.
    double selection_cost = 0.0;
    /// Same cost in the size * log2(k) form; absent when some scanned range has k < 2.
    std::optional<double> selection_cost_raw;
    std::size_t layer_count = 0;
    SelectionTimings timings;
};

namespace detail {

using Clock = std::chrono::steady_clock;

inline double seconds_since(Clock::time_point t0) {
    return std::chrono::duration<double>(Clock::now() - t0).count();
}

inline std::optional<double> raw_cost(std::size_t size, std::size_t k) {
    if (k < 2) {
        return std::nullopt;
    }
    return layer_cost_raw(size, k);
}

inline std::vector<std::byte> pack_indices(const IndexSet& s) {
    std::vector<std::byte> out(s.size() * 4);
    for (std::size_t i = 0; i < s.size(); ++i) {
        for (std::size_t b = 0; b < 4; ++b) {
            out[4 * i + b] = static_cast<std::byte>((s[i] >> (8 * b)) & 0xFFu);
        }
    }
    return out;
}

inline IndexSet unpack_indices(std::span<const std::byte> bytes) {
    std::vector<Index> idx(bytes.size() / 4);
    for (std::size_t i = 0; i < idx.size(); ++i) {
        Index v = 0;
        for (std::size_t b = 0; b < 4; ++b) {
            v |= static_cast<Index>(std::to_integer<std::uint8_t>(bytes[4 * i + b])) << (8 * b);
        }
        idx[i] = v;
    }
    return IndexSet::from_sorted(std::move(idx));
}

}  // namespace detail

/// Global top-k of |acc| with k = round(d * n_g).
inline SelectionResult topk_select(std::span<const double> acc, double density) {
    const auto t0 = detail::Clock::now();
    const std::size_t k = target_k(acc.size(), density);
    SelectionResult r;
    r.indices = topk_indices(acc, k);
    r.local_k_total = k;
    r.selection_cost = layer_cost(acc.size(), k);
    r.selection_cost_raw = detail::raw_cost(acc.size(), k);
    r.layer_count = 1;
    r.timings.select = detail::seconds_since(t0);
    return r;
}

/// Every index with |acc[i]| strictly above `threshold`. Density is whatever falls out.
inline SelectionResult hard_threshold_select(std::span<const double> acc, double threshold) {
    if (!(threshold >= 0.0)) {
        throw std::invalid_argument("threshold must be >= 0");
    }
    const auto t0 = detail::Clock::now();
    std::vector<Index> idx;
    for (std::size_t i = 0; i < acc.size(); ++i) {
        if (std::fabs(acc[i]) > threshold) {
            idx.push_back(static_cast<Index>(i));
        }
    }
    SelectionResult r;
    r.indices = IndexSet::from_sorted(std::move(idx));
    r.local_k_total = r.indices.size();
    r.selection_cost = static_cast<double>(acc.size());
    r.selection_cost_raw = r.selection_cost;
    r.layer_count = 1;
    r.timings.select = detail::seconds_since(t0);
    return r;
}

/// Cyclic leader top-k: rank (iteration mod n) selects from its own acc and
/// broadcasts the indices (4 bytes each); the other ranks adopt them unchanged.
inline SelectionResult cltk_select(std::span<const double> acc, std::size_t iteration, Rank rank, double density,
                                   Communicator& comm) {
    const std::size_t k = target_k(acc.size(), density);
    const Rank leader = iteration % comm.size();
    SelectionResult r;
    r.layer_count = 1;
    std::vector<std::byte> payload;
    if (rank == leader) {
        const auto t0 = detail::Clock::now();
        r.indices = topk_indices(acc, k);
        r.selection_cost = layer_cost(acc.size(), k);
        r.selection_cost_raw = detail::raw_cost(acc.size(), k);
        payload = detail::pack_indices(r.indices);
        r.timings.select = detail::seconds_since(t0);
    } else {
        r.selection_cost_raw = 0.0;
    }
    const double blocked0 = comm.blocked_seconds(rank);
    const auto t1 = detail::Clock::now();
    const auto received = comm.broadcast_bytes(rank, leader, payload, kIndexBytes);
    if (rank != leader) {
        r.indices = detail::unpack_indices(received);
    }
    r.timings.comm = detail::seconds_since(t1) - (comm.blocked_seconds(rank) - blocked0);
    r.local_k_total = r.indices.size();
    return r;
}

/// Per-rank DEFT state. Partition boundaries depend only on the layout and
/// the worker count, so they are computed once.
class DeftSparsifier {
public:
    DeftSparsifier(const ModelLayout& layout, std::size_t n_workers, double density)
        : n_g_(layout.n_g()), density_(density), base_(partition_two_stage(layout, n_workers)) {
        (void)target_k(n_g_, density_);
    }

    const std::vector<LayerPartition>& partitions() const noexcept { return base_; }
    std::size_t n_g() const noexcept { return n_g_; }
    double density() const noexcept { return density_; }

    /// Layers with this rank's norms, local k and costs from the last select().
    const std::vector<LayerPartition>& last_layers() const noexcept { return layers_; }
    const AllocationPlan& last_plan() const noexcept { return plan_; }

    SelectionResult select(std::span<const double> acc, std::size_t iteration, Rank rank, Communicator& comm) {
        if (acc.size() != n_g_) {
            throw std::invalid_argument("deft_select: gradient length does not match layout");
        }
        const auto t0 = detail::Clock::now();
        const double blocked0 = comm.blocked_seconds(rank);

        layers_ = base_;
        compute_norms(layers_, acc);
        assign_local_k_by_norm(layers_, n_g_, density_);
        compute_costs(layers_);

        AllocationPlan proposal;
        proposal.iteration = iteration;
        proposal.delegate_rank = delegate_for(iteration, comm.size());
        if (rank == proposal.delegate_rank) {
            proposal = allocate_layers_binpack(layers_, comm.size(), iteration);
        }
        plan_ = broadcast_plan(proposal, rank, comm);
        if (plan_.layer_count() != layers_.size()) {
            throw CollectiveDesync("allocation plan covers " + std::to_string(plan_.layer_count()) + " layers, expected " +
                                   std::to_string(layers_.size()));
        }

        SelectionResult r;
        r.timings.partition = detail::seconds_since(t0) - (comm.blocked_seconds(rank) - blocked0);

        const auto t1 = detail::Clock::now();
        std::vector<Index> picked;
        std::optional<double> raw = 0.0;
        for (std::size_t part : plan_.layers_for(rank)) {
            const auto& layer = layers_[part];
            const auto local = topk_indices(slice(acc, layer), layer.local_k);
            for (Index i : local) {
                picked.push_back(static_cast<Index>(i + layer.start));
            }
            r.local_k_total += layer.local_k;
            r.selection_cost += layer.cost;
            if (raw) {
                raw = layer.local_k >= 2 ? std::optional(*raw + layer_cost_raw(layer.size(), layer.local_k))
                                         : std::nullopt;
            }
        }
        // Allocated layers are visited in ascending order and do not overlap.
        r.indices = IndexSet::from_sorted(std::move(picked));
        r.selection_cost_raw = raw;
        r.layer_count = layers_.size();
        r.timings.select = detail::seconds_since(t1);
        return r;
    }

private:
    std::size_t n_g_;
    double density_;
    std::vector<LayerPartition> base_;
    std::vector<LayerPartition> layers_;
    AllocationPlan plan_;
};

/// One-shot DEFT selection without partition caching.
inline SelectionResult deft_select(std::span<const double> acc, const ModelLayout& layout, std::size_t iteration,
                                   Rank rank, double density, Communicator& comm) {
    DeftSparsifier s(layout, comm.size(), density);
    return s.select(acc, iteration, rank, comm);
}

/// Per-rank sparsifier dispatching on SparsifierConfig::kind.
class Sparsifier {
public:
    Sparsifier(const SparsifierConfig& config, const ModelLayout& layout, std::size_t n_workers) : config_(config) {
        config_.validate(layout.n_g());
        if (config_.kind == SparsifierKind::deft) {
            deft_.emplace(layout, n_workers, config_.density);
        }
    }

    const SparsifierConfig& config() const noexcept { return config_; }
    const DeftSparsifier* deft() const noexcept { return deft_ ? &*deft_ : nullptr; }

    SelectionResult select(std::span<const double> acc, std::size_t iteration, Rank rank, Communicator& comm) {
        switch (config_.kind) {
        case SparsifierKind::deft: return deft_->select(acc, iteration, rank, comm);
        case SparsifierKind::topk: return topk_select(acc, config_.density);
        case SparsifierKind::cltk: return cltk_select(acc, iteration, rank, config_.density, comm);
        case SparsifierKind::hard_threshold: return hard_threshold_select(acc, config_.threshold);
        }
        throw std::logic_error("unknown sparsifier kind");
    }

private:
    SparsifierConfig config_;
    std::optional<DeftSparsifier> deft_;
};

}  // namespace deft
