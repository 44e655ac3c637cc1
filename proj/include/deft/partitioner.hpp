#pragma once

// Layer partitioning, norm-proportional local k and cost-balanced allocation.

#include "deft/collectives.hpp"
#include "deft/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <numeric>
#include <span>
#include <stdexcept>
#include <vector>

namespace deft {

/// Sizes of the model's tensors in their fixed order.
class ModelLayout {
public:
    ModelLayout() = default;

    explicit ModelLayout(std::vector<std::size_t> tensor_sizes) : sizes_(std::move(tensor_sizes)) {
        if (sizes_.empty()) {
            throw std::invalid_argument("ModelLayout: no tensors");
        }
        for (std::size_t s : sizes_) {
            if (s == 0) {
                throw std::invalid_argument("ModelLayout: tensor of size 0");
            }
            n_g_ += s;
        }
    }

    const std::vector<std::size_t>& tensor_sizes() const noexcept { return sizes_; }
    std::size_t n_g() const noexcept { return n_g_; }

    friend bool operator==(const ModelLayout&, const ModelLayout&) = default;

private:
    std::vector<std::size_t> sizes_;
    std::size_t n_g_ = 0;
};

/// k = round(d * n_g), the global selection budget of every k-based sparsifier.
inline std::size_t target_k(std::size_t n_g, double density) {
    if (!(density > 0.0) || density > 1.0) {
        throw std::invalid_argument("invalid density");
    }
    const auto k = static_cast<std::size_t>(std::llround(density * static_cast<double>(n_g)));
    if (k < 1) {
        throw std::invalid_argument("density selects no gradients (d * n_g < 0.5)");
    }
    return k;
}

/// Splits the vector by tensors, then splits every tensor larger than n_g / n
/// into n near-equal fragments (sizes differ by at most one, larger first).
/// Fragments of size zero are dropped.
inline std::vector<LayerPartition> partition_two_stage(const ModelLayout& layout, std::size_t n_workers) {
    if (n_workers == 0) {
        throw std::invalid_argument("n_workers must be >= 1");
    }
    if (n_workers > layout.n_g()) {
        throw std::invalid_argument("more workers than parameters");
    }
    const double threshold = static_cast<double>(layout.n_g()) / static_cast<double>(n_workers);
    std::vector<LayerPartition> layers;
    std::size_t pos = 0;
    auto emit = [&](std::size_t size) {
        if (size == 0) {
            return;
        }
        LayerPartition p;
        p.start = pos;
        p.end = pos + size;
        layers.push_back(p);
        pos += size;
    };
    for (std::size_t size : layout.tensor_sizes()) {
        if (static_cast<double>(size) > threshold) {
            const std::size_t quotient = size / n_workers;
            std::size_t remainder = size % n_workers;
            for (std::size_t i = 0; i < n_workers; ++i) {
                std::size_t piece = quotient;
                if (remainder > 0) {
                    ++piece;
                    --remainder;
                }
                emit(piece);
            }
        } else {
            emit(size);
        }
    }
    return layers;
}

/// Fills in every layer's norm from `values`.
inline void compute_norms(std::span<LayerPartition> layers, std::span<const double> values) {
    for (auto& layer : layers) {
        layer.norm = l2_norm(slice(values, layer));
    }
}

/// Layer indices by descending norm; equal norms keep ascending layer order.
inline std::vector<std::size_t> priority_order(std::span<const LayerPartition> layers) {
    std::vector<std::size_t> order(layers.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
        return layers[a].norm != layers[b].norm ? layers[a].norm > layers[b].norm : a < b;
    });
    return order;
}

namespace detail {

// Walks `layers` in the given priority order, writing local_k in place.
inline void assign_in_order(std::span<LayerPartition> layers, std::span<const std::size_t> order, std::size_t n_g,
                            double density) {
    if (layers.empty()) {
        throw std::invalid_argument("assign_local_k: no layers");
    }
    const std::size_t k = target_k(n_g, density);
    if (k >= n_g) {
        for (auto& layer : layers) {
            layer.local_k = layer.size();
        }
        return;
    }

    double k_remain = static_cast<double>(k);
    double norm_remain = 0.0;
    for (std::size_t i : order) {
        norm_remain += layers[i].norm;
    }
    for (std::size_t i : order) {
        auto& layer = layers[i];
        const double k_temp = norm_remain > 0.0 ? k_remain * (layer.norm / norm_remain) : 0.0;
        const double size = static_cast<double>(layer.size());
        double share = 0.0;
        if (size < k_temp) {
            layer.local_k = layer.size();
            share = size;
        } else {
            // round half up, then floor at one
            const double rounded = std::floor(k_temp + 0.5);
            layer.local_k = rounded < 1.0 ? 1 : static_cast<std::size_t>(rounded);
            layer.local_k = std::min(layer.local_k, layer.size());
            share = std::max(1.0, k_temp);
        }
        // the unrounded share is deducted, so rounding does not carry into later layers
        k_remain -= share;
        norm_remain -= layer.norm;
    }
}

}  // namespace detail

/// Norm-proportional budget split over layers already in priority order
/// (non-increasing norm). Each layer receives round(k_remain * norm / norm_remain)
/// clamped to [1, size]; the remaining budget shrinks by the unrounded share
/// max(1, k_temp) (or the size when capped) and the remaining norm by the layer's norm.
/// When the budget covers the whole vector every layer is selected in full.
inline void assign_local_k(std::span<LayerPartition> ordered, std::size_t n_g, double density) {
    for (std::size_t i = 1; i < ordered.size(); ++i) {
        if (ordered[i].norm > ordered[i - 1].norm) {
            throw std::invalid_argument("assign_local_k: layers not in priority order");
        }
    }
    std::vector<std::size_t> order(ordered.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    detail::assign_in_order(ordered, order, n_g, density);
}

/// assign_local_k applied through priority_order, leaving `layers` in layer order.
inline void assign_local_k_by_norm(std::span<LayerPartition> layers, std::size_t n_g, double density) {
    const auto order = priority_order(layers);
    detail::assign_in_order(layers, order, n_g, density);
}

/// Bin-packing weight of a layer: size * log2(k + 1). Defined for k >= 1.
inline double layer_cost(std::size_t size, std::size_t local_k) {
    return static_cast<double>(size) * std::log2(static_cast<double>(local_k) + 1.0);
}

/// The unshifted form size * log2(k); zero for k = 1.
inline double layer_cost_raw(std::size_t size, std::size_t local_k) {
    return static_cast<double>(size) * std::log2(static_cast<double>(local_k));
}

inline void compute_costs(std::span<LayerPartition> layers) {
    for (auto& layer : layers) {
        if (layer.local_k == 0) {
            throw std::invalid_argument("compute_costs: local_k not assigned");
        }
        layer.cost = layer_cost(layer.size(), layer.local_k);
    }
}

/// Exclusive assignment of layers to workers. bins[b] lists layer indices in
/// ascending order; worker `rank` owns bin (iteration + rank) mod n.
struct AllocationPlan {
    std::vector<std::vector<std::size_t>> bins;
    Rank delegate_rank = 0;
    std::size_t iteration = 0;

    std::size_t n_bins() const noexcept { return bins.size(); }

    std::size_t layer_count() const noexcept {
        std::size_t n = 0;
        for (const auto& b : bins) {
            n += b.size();
        }
        return n;
    }

    std::size_t bin_of(Rank rank) const { return (iteration % bins.size() + rank) % bins.size(); }

    const std::vector<std::size_t>& layers_for(Rank rank) const { return bins.at(bin_of(rank)); }

    /// owner[layer] = bin.
    std::vector<std::uint32_t> owners() const {
        std::vector<std::uint32_t> owner(layer_count(), 0);
        for (std::size_t b = 0; b < bins.size(); ++b) {
            for (std::size_t layer : bins[b]) {
                owner.at(layer) = static_cast<std::uint32_t>(b);
            }
        }
        return owner;
    }

    friend bool operator==(const AllocationPlan&, const AllocationPlan&) = default;
};

inline Rank delegate_for(std::size_t iteration, std::size_t n_workers) { return iteration % n_workers; }

/// Longest-processing-time greedy over layer costs: repeatedly place the most
/// expensive remaining layer (lowest index on ties) into the bin with the
/// smallest running total (lowest bin on ties). Costs are read from
/// layer.cost, which must be filled in.
inline AllocationPlan allocate_layers_binpack(std::span<const LayerPartition> layers, std::size_t n_workers,
                                              std::size_t iteration) {
    if (n_workers == 0) {
        throw std::invalid_argument("n_workers must be >= 1");
    }
    std::vector<std::size_t> by_cost(layers.size());
    std::iota(by_cost.begin(), by_cost.end(), std::size_t{0});
    std::sort(by_cost.begin(), by_cost.end(), [&](std::size_t a, std::size_t b) {
        return layers[a].cost != layers[b].cost ? layers[a].cost > layers[b].cost : a < b;
    });

    AllocationPlan plan;
    plan.bins.resize(n_workers);
    for (auto& bin : plan.bins) {
        bin.reserve(layers.size() / n_workers + 1);
    }
    plan.delegate_rank = delegate_for(iteration, n_workers);
    plan.iteration = iteration;
    std::vector<double> totals(n_workers, 0.0);
    for (std::size_t layer : by_cost) {
        const auto lightest = static_cast<std::size_t>(std::min_element(totals.begin(), totals.end()) - totals.begin());
        plan.bins[lightest].push_back(layer);
        totals[lightest] += layers[layer].cost;
    }
    for (auto& bin : plan.bins) {
        std::sort(bin.begin(), bin.end());
    }
    return plan;
}

/// Wire form: one little-endian uint32 bin number per layer (4L bytes).
inline std::vector<std::byte> serialize_plan(const AllocationPlan& plan) {
    const auto owner = plan.owners();
    std::vector<std::byte> out(owner.size() * 4);
    for (std::size_t i = 0; i < owner.size(); ++i) {
        for (std::size_t b = 0; b < 4; ++b) {
            out[4 * i + b] = static_cast<std::byte>((owner[i] >> (8 * b)) & 0xFFu);
        }
    }
    return out;
}

inline AllocationPlan deserialize_plan(std::span<const std::byte> bytes, std::size_t n_bins, std::size_t iteration) {
    if (bytes.size() % 4 != 0) {
        throw std::invalid_argument("allocation plan payload is not a multiple of 4 bytes");
    }
    AllocationPlan plan;
    plan.bins.resize(n_bins);
    plan.iteration = iteration;
    plan.delegate_rank = delegate_for(iteration, n_bins);
    for (std::size_t i = 0; i < bytes.size() / 4; ++i) {
        std::uint32_t owner = 0;
        for (std::size_t b = 0; b < 4; ++b) {
            owner |= static_cast<std::uint32_t>(std::to_integer<std::uint8_t>(bytes[4 * i + b])) << (8 * b);
        }
        if (owner >= n_bins) {
            throw std::invalid_argument("allocation plan names a bin out of range");
        }
        plan.bins[owner].push_back(i);
    }
    return plan;
}

/// Shares the delegate's plan with every rank. Only the delegate's `plan`
/// argument is read; the ledger sees exactly 4L bytes.
inline AllocationPlan broadcast_plan(const AllocationPlan& plan, Rank rank, Communicator& comm) {
    const Rank root = plan.delegate_rank;
    std::vector<std::byte> payload;
    if (rank == root) {
        payload = serialize_plan(plan);
    }
    const auto received = comm.broadcast_bytes(rank, root, payload, 4);
    return deserialize_plan(received, comm.size(), plan.iteration);
}

}  // namespace deft
