#pragma once

// Flat gradient vectors, layer slices, index sets and the top-k kernel.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <limits>
#include <numeric>
#include <queue>
#include <span>
#include <stdexcept>
#include <utility>
#include <vector>

namespace deft {

/// Global coordinate into a gradient vector. Indices travel the simulated wire
/// as 4-byte words, so a model is limited to 2^32 - 1 parameters.
using Index = std::uint32_t;

/// One replica's worth of per-parameter values (model, gradient, residual).
using GradientVector = std::vector<double>;

inline constexpr std::size_t kIndexBytes = sizeof(Index);
inline constexpr std::size_t kValueBytes = sizeof(double);

/// Contiguous slice [start, end) of the gradient vector treated as one layer.
struct LayerPartition {
    std::size_t start = 0;
    std::size_t end = 0;
    double norm = 0.0;
    std::size_t local_k = 0;
    double cost = 0.0;

    std::size_t size() const noexcept { return end - start; }

    friend bool operator==(const LayerPartition&, const LayerPartition&) = default;
};

/// Sorted set of distinct gradient indices.
class IndexSet {
public:
    IndexSet() = default;

    /// Takes ownership of `sorted`, which must be strictly increasing.
    static IndexSet from_sorted(std::vector<Index> sorted) {
        for (std::size_t i = 1; i < sorted.size(); ++i) {
            if (sorted[i - 1] >= sorted[i]) {
                throw std::invalid_argument("IndexSet: indices not strictly increasing");
            }
        }
        IndexSet s;
        s.indices_ = std::move(sorted);
        return s;
    }

    /// Sorts and deduplicates arbitrary input.
    static IndexSet from_unsorted(std::vector<Index> raw) {
        std::sort(raw.begin(), raw.end());
        raw.erase(std::unique(raw.begin(), raw.end()), raw.end());
        IndexSet s;
        s.indices_ = std::move(raw);
        return s;
    }

    static IndexSet all(std::size_t n) {
        IndexSet s;
        s.indices_.resize(n);
        std::iota(s.indices_.begin(), s.indices_.end(), Index{0});
        return s;
    }

    std::size_t size() const noexcept { return indices_.size(); }
    bool empty() const noexcept { return indices_.empty(); }
    Index operator[](std::size_t i) const { return indices_[i]; }
    auto begin() const noexcept { return indices_.begin(); }
    auto end() const noexcept { return indices_.end(); }
    const std::vector<Index>& values() const noexcept { return indices_; }

    bool contains(Index i) const { return std::binary_search(indices_.begin(), indices_.end(), i); }

    /// True when every index lies in [0, n).
    bool within(std::size_t n) const noexcept { return indices_.empty() || indices_.back() < n; }

    friend bool operator==(const IndexSet&, const IndexSet&) = default;

private:
    std::vector<Index> indices_;
};

inline IndexSet set_union(const IndexSet& a, const IndexSet& b) {
    std::vector<Index> out;
    out.reserve(a.size() + b.size());
    std::set_union(a.begin(), a.end(), b.begin(), b.end(), std::back_inserter(out));
    return IndexSet::from_sorted(std::move(out));
}

inline std::span<const double> slice(std::span<const double> v, const LayerPartition& layer) {
    return v.subspan(layer.start, layer.size());
}

inline double l2_norm(std::span<const double> v) {
    if (v.empty()) {
        throw std::invalid_argument("empty slice");
    }
    double sum = 0.0;
    for (double x : v) {
        sum += x * x;
    }
    return std::sqrt(sum);
}

inline bool all_finite(std::span<const double> v) noexcept {
    return std::all_of(v.begin(), v.end(), [](double x) { return std::isfinite(x); });
}

namespace detail {

// Strict "ranks ahead of" ordering: larger magnitude first, lower index on ties.
struct MagnitudeOrder {
    std::span<const double> v;
    bool operator()(Index a, Index b) const noexcept {
        const double ma = std::fabs(v[a]);
        const double mb = std::fabs(v[b]);
        return ma > mb || (ma == mb && a < b);
    }
};

inline std::vector<Index> topk_heap(std::span<const double> v, std::size_t k) {
    // Heap top is the weakest member of the current selection.
    const MagnitudeOrder ahead{v};
    std::vector<Index> heap;
    heap.reserve(k);
    for (Index i = 0; i < k; ++i) {
        heap.push_back(i);
    }
    std::make_heap(heap.begin(), heap.end(), ahead);
    double weakest = std::fabs(v[heap.front()]);
    for (std::size_t i = k; i < v.size(); ++i) {
        const double m = std::fabs(v[i]);
        // Later indices lose ties, so only a strictly larger magnitude displaces.
        if (m > weakest) {
            std::pop_heap(heap.begin(), heap.end(), ahead);
            heap.back() = static_cast<Index>(i);
            std::push_heap(heap.begin(), heap.end(), ahead);
            weakest = std::fabs(v[heap.front()]);
        }
    }
    std::sort(heap.begin(), heap.end());
    return heap;
}

inline std::vector<Index> topk_select(std::span<const double> v, std::size_t k) {
    std::vector<Index> idx(v.size());
    std::iota(idx.begin(), idx.end(), Index{0});
    std::nth_element(idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(k), idx.end(),
                     MagnitudeOrder{v});
    idx.resize(k);
    std::sort(idx.begin(), idx.end());
    return idx;
}

}  // namespace detail

/// Indices (local to `v`) of the k entries with the largest magnitude, ascending.
/// Ties are broken towards the lower index, so the result is a pure function of `v`.
inline IndexSet topk_indices(std::span<const double> v, std::size_t k) {
    if (k == 0 || k > v.size()) {
        throw std::invalid_argument("invalid k");
    }
    if (v.size() > std::numeric_limits<Index>::max()) {
        throw std::invalid_argument("slice too large for 32-bit indices");
    }
    if (k == v.size()) {
        return IndexSet::all(k);
    }
    // Heap scan wins when few candidates survive; selection otherwise.
    if (k * 8 < v.size()) {
        return IndexSet::from_sorted(detail::topk_heap(v, k));
    }
    return IndexSet::from_sorted(detail::topk_select(v, k));
}

}  // namespace deft
