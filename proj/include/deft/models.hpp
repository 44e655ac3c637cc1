#pragma once

// Desk-scale training workloads.
//
// BlockQuadratic: loss = sum_b 0.5 * s_b * ||x_b - x*_b||^2 with Gaussian gradient
// noise, which gives full control over how gradient norm is spread across tensors.
// Mlp: one hidden layer classifier with softmax cross-entropy on a synthetic
// four-cluster XOR dataset, trained with exact hand-written backprop.

#include "deft/partitioner.hpp"
#include "deft/tensor.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <memory>
#include <optional>
#include <random>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace deft {

using Rng = std::mt19937_64;

/// Deterministic stream for (seed, stream id, salt).
inline Rng make_rng(std::uint64_t seed, std::uint64_t stream, std::uint64_t salt = 0) {
    std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                      static_cast<std::uint32_t>(stream), static_cast<std::uint32_t>(stream >> 32),
                      static_cast<std::uint32_t>(salt)};
    return Rng(seq);
}

enum class ModelKind { block_quadratic, mlp };

inline std::string_view to_string(ModelKind k) { return k == ModelKind::mlp ? "mlp" : "block_quadratic"; }

enum class Activation { tanh, relu };

inline std::string_view to_string(Activation a) { return a == Activation::relu ? "relu" : "tanh"; }

struct BlockQuadraticParams {
    std::vector<std::size_t> tensor_sizes{1000, 1000, 1000, 1000};
    /// Curvature per tensor; same length as tensor_sizes, all positive.
    std::vector<double> block_scales{8.0, 4.0, 2.0, 1.0};
    double noise = 0.1;
};

struct MlpParams {
    std::size_t inputs = 16;
    std::size_t hidden = 64;
    std::size_t classes = 2;
    Activation activation = Activation::tanh;
    std::size_t dataset_size = 1024;
    std::size_t batch_size = 32;
    /// Distance of the cluster centres from the origin along each of the first two inputs.
    double separation = 2.0;
};

struct ModelSpec {
    ModelKind kind = ModelKind::block_quadratic;
    BlockQuadraticParams quadratic;
    MlpParams mlp;
};

struct Evaluation {
    double loss = 0.0;
    /// Fraction classified correctly; absent for regression-style workloads.
    std::optional<double> accuracy;
};

/// Wall time spent in the two halves of a gradient computation.
struct GradientTimings {
    double forward = 0.0;
    double backward = 0.0;
};

class NonFiniteError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

class Model {
public:
    virtual ~Model() = default;

    virtual const ModelLayout& layout() const noexcept = 0;

    /// x_0, identical for every rank given the seed.
    virtual GradientVector initial_parameters(std::uint64_t seed) const = 0;

    /// Stochastic gradient at x written into `out`; `rng` is the caller's private stream.
    virtual void gradient(std::span<const double> x, Rng& rng, std::span<double> out,
                          GradientTimings* timings = nullptr) const = 0;

    /// Full-objective evaluation (no noise, whole dataset).
    virtual Evaluation evaluate(std::span<const double> x) const = 0;
};

namespace detail {

inline void require_finite(std::span<const double> g, std::string_view what) {
    for (std::size_t i = 0; i < g.size(); ++i) {
        if (!std::isfinite(g[i])) {
            throw NonFiniteError(std::string(what) + ": non-finite value " + std::to_string(g[i]) + " at index " +
                                 std::to_string(i));
        }
    }
}

}  // namespace detail

class BlockQuadratic final : public Model {
public:
    BlockQuadratic(BlockQuadraticParams params, std::uint64_t seed)
        : params_(std::move(params)), layout_(params_.tensor_sizes) {
        if (params_.block_scales.size() != params_.tensor_sizes.size()) {
            throw std::invalid_argument("block_scales must have one entry per tensor");
        }
        for (double s : params_.block_scales) {
            if (!(s > 0.0)) {
                throw std::invalid_argument("block_scales must be positive");
            }
        }
        if (!(params_.noise >= 0.0)) {
            throw std::invalid_argument("noise must be >= 0");
        }
        scale_of_.reserve(layout_.n_g());
        for (std::size_t b = 0; b < params_.tensor_sizes.size(); ++b) {
            scale_of_.insert(scale_of_.end(), params_.tensor_sizes[b], params_.block_scales[b]);
        }
        auto rng = make_rng(seed, 0, 2);
        std::normal_distribution<double> normal;
        optimum_.resize(layout_.n_g());
        for (double& v : optimum_) {
            v = normal(rng);
        }
    }

    const ModelLayout& layout() const noexcept override { return layout_; }
    const GradientVector& optimum() const noexcept { return optimum_; }
    const BlockQuadraticParams& params() const noexcept { return params_; }

    GradientVector initial_parameters(std::uint64_t seed) const override {
        auto rng = make_rng(seed, 0, 1);
        std::normal_distribution<double> normal;
        GradientVector x(layout_.n_g());
        for (double& v : x) {
            v = normal(rng);
        }
        return x;
    }

    void gradient(std::span<const double> x, Rng& rng, std::span<double> out,
                  GradientTimings* timings = nullptr) const override {
        using Clock = std::chrono::steady_clock;
        const auto t0 = Clock::now();
        for (std::size_t i = 0; i < out.size(); ++i) {
            out[i] = x[i] - optimum_[i];
        }
        const auto t1 = Clock::now();
        if (params_.noise > 0.0) {
            std::normal_distribution<double> normal(0.0, params_.noise);
            for (std::size_t i = 0; i < out.size(); ++i) {
                out[i] = scale_of_[i] * out[i] + normal(rng);
            }
        } else {
            for (std::size_t i = 0; i < out.size(); ++i) {
                out[i] = scale_of_[i] * out[i];
            }
        }
        const auto t2 = Clock::now();
        if (timings) {
            timings->forward = std::chrono::duration<double>(t1 - t0).count();
            timings->backward = std::chrono::duration<double>(t2 - t1).count();
        }
        detail::require_finite(out, "block_quadratic gradient");
    }

    Evaluation evaluate(std::span<const double> x) const override {
        double loss = 0.0;
        for (std::size_t i = 0; i < x.size(); ++i) {
            const double r = x[i] - optimum_[i];
            loss += 0.5 * scale_of_[i] * r * r;
        }
        return {loss, std::nullopt};
    }

private:
    BlockQuadraticParams params_;
    ModelLayout layout_;
    std::vector<double> scale_of_;
    GradientVector optimum_;
};

/// inputs -> hidden (activation) -> classes (softmax). Parameter order:
/// W1 [hidden x inputs], b1 [hidden], W2 [classes x hidden], b2 [classes].
class Mlp final : public Model {
public:
    Mlp(MlpParams params, std::uint64_t seed) : params_(params) {
        if (params_.inputs < 2 || params_.hidden == 0 || params_.classes < 2) {
            throw std::invalid_argument("mlp needs inputs >= 2, hidden >= 1, classes >= 2");
        }
        if (params_.dataset_size == 0 || params_.batch_size == 0) {
            throw std::invalid_argument("mlp dataset_size and batch_size must be positive");
        }
        const auto& p = params_;
        layout_ = ModelLayout({p.hidden * p.inputs, p.hidden, p.classes * p.hidden, p.classes});
        make_dataset(seed);
    }

    const ModelLayout& layout() const noexcept override { return layout_; }
    const MlpParams& params() const noexcept { return params_; }
    std::span<const double> features() const noexcept { return features_; }
    std::span<const std::size_t> labels() const noexcept { return labels_; }

    GradientVector initial_parameters(std::uint64_t seed) const override {
        auto rng = make_rng(seed, 0, 1);
        std::normal_distribution<double> normal;
        GradientVector x(layout_.n_g(), 0.0);
        const auto& p = params_;
        const double s1 = 1.0 / std::sqrt(static_cast<double>(p.inputs));
        const double s2 = 1.0 / std::sqrt(static_cast<double>(p.hidden));
        for (std::size_t i = 0; i < p.hidden * p.inputs; ++i) {
            x[i] = s1 * normal(rng);
        }
        const std::size_t w2 = p.hidden * p.inputs + p.hidden;
        for (std::size_t i = 0; i < p.classes * p.hidden; ++i) {
            x[w2 + i] = s2 * normal(rng);
        }
        return x;
    }

    std::vector<std::size_t> sample_batch(Rng& rng) const {
        std::uniform_int_distribution<std::size_t> pick(0, params_.dataset_size - 1);
        std::vector<std::size_t> batch(params_.batch_size);
        for (auto& b : batch) {
            b = pick(rng);
        }
        return batch;
    }

    void gradient(std::span<const double> x, Rng& rng, std::span<double> out,
                  GradientTimings* timings = nullptr) const override {
        const auto batch = sample_batch(rng);
        batch_gradient(x, batch, out, timings);
    }

    /// Mean cross-entropy over `batch`.
    double batch_loss(std::span<const double> x, std::span<const std::size_t> batch) const {
        Workspace ws(params_);
        double loss = 0.0;
        for (std::size_t n : batch) {
            forward(x, n, ws);
            loss -= std::log(ws.prob[labels_[n]]);
        }
        return loss / static_cast<double>(batch.size());
    }

    /// Exact gradient of batch_loss.
    void batch_gradient(std::span<const double> x, std::span<const std::size_t> batch, std::span<double> out,
                        GradientTimings* timings = nullptr) const {
        using Clock = std::chrono::steady_clock;
        const auto& p = params_;
        const auto v = views(x);
        auto g = views_mut(out);
        std::fill(out.begin(), out.end(), 0.0);
        Workspace ws(p);
        double t_fwd = 0.0;
        double t_bwd = 0.0;
        const double inv_b = 1.0 / static_cast<double>(batch.size());
        for (std::size_t n : batch) {
            const auto t0 = Clock::now();
            forward(x, n, ws);
            const auto t1 = Clock::now();
            const double* in = &features_[n * p.inputs];
            // dL/dlogits = softmax - onehot
            for (std::size_t c = 0; c < p.classes; ++c) {
                ws.dlogit[c] = (ws.prob[c] - (c == labels_[n] ? 1.0 : 0.0)) * inv_b;
            }
            std::fill(ws.dhidden.begin(), ws.dhidden.end(), 0.0);
            for (std::size_t c = 0; c < p.classes; ++c) {
                const double d = ws.dlogit[c];
                g.b2[c] += d;
                for (std::size_t h = 0; h < p.hidden; ++h) {
                    g.w2[c * p.hidden + h] += d * ws.act[h];
                    ws.dhidden[h] += d * v.w2[c * p.hidden + h];
                }
            }
            for (std::size_t h = 0; h < p.hidden; ++h) {
                const double dpre = ws.dhidden[h] * activation_derivative(ws.pre[h], ws.act[h]);
                g.b1[h] += dpre;
                double* row = &g.w1[h * p.inputs];
                for (std::size_t i = 0; i < p.inputs; ++i) {
                    row[i] += dpre * in[i];
                }
            }
            const auto t2 = Clock::now();
            t_fwd += std::chrono::duration<double>(t1 - t0).count();
            t_bwd += std::chrono::duration<double>(t2 - t1).count();
        }
        if (timings) {
            timings->forward = t_fwd;
            timings->backward = t_bwd;
        }
        detail::require_finite(out, "mlp gradient");
    }

    Evaluation evaluate(std::span<const double> x) const override {
        Workspace ws(params_);
        double loss = 0.0;
        std::size_t correct = 0;
        for (std::size_t n = 0; n < params_.dataset_size; ++n) {
            forward(x, n, ws);
            loss -= std::log(ws.prob[labels_[n]]);
            const auto best = static_cast<std::size_t>(std::max_element(ws.prob.begin(), ws.prob.end()) - ws.prob.begin());
            correct += best == labels_[n] ? 1 : 0;
        }
        const double n = static_cast<double>(params_.dataset_size);
        return {loss / n, static_cast<double>(correct) / n};
    }

private:
    struct Workspace {
        explicit Workspace(const MlpParams& p)
            : pre(p.hidden), act(p.hidden), dhidden(p.hidden), logit(p.classes), prob(p.classes), dlogit(p.classes) {}
        std::vector<double> pre, act, dhidden, logit, prob, dlogit;
    };

    template <class T>
    struct Views {
        T* w1;
        T* b1;
        T* w2;
        T* b2;
    };

    Views<const double> views(std::span<const double> x) const {
        const auto& p = params_;
        const double* base = x.data();
        return {base, base + p.hidden * p.inputs, base + p.hidden * p.inputs + p.hidden,
                base + p.hidden * p.inputs + p.hidden + p.classes * p.hidden};
    }

    Views<double> views_mut(std::span<double> x) const {
        const auto& p = params_;
        double* base = x.data();
        return {base, base + p.hidden * p.inputs, base + p.hidden * p.inputs + p.hidden,
                base + p.hidden * p.inputs + p.hidden + p.classes * p.hidden};
    }

    double activate(double z) const { return params_.activation == Activation::relu ? std::max(0.0, z) : std::tanh(z); }

    double activation_derivative(double z, double a) const {
        if (params_.activation == Activation::relu) {
            return z > 0.0 ? 1.0 : 0.0;
        }
        return 1.0 - a * a;
    }

    void forward(std::span<const double> x, std::size_t n, Workspace& ws) const {
        const auto& p = params_;
        const auto v = views(x);
        const double* in = &features_[n * p.inputs];
        for (std::size_t h = 0; h < p.hidden; ++h) {
            double z = v.b1[h];
            const double* row = &v.w1[h * p.inputs];
            for (std::size_t i = 0; i < p.inputs; ++i) {
                z += row[i] * in[i];
            }
            ws.pre[h] = z;
            ws.act[h] = activate(z);
        }
        double peak = -INFINITY;
        for (std::size_t c = 0; c < p.classes; ++c) {
            double z = v.b2[c];
            const double* row = &v.w2[c * p.hidden];
            for (std::size_t h = 0; h < p.hidden; ++h) {
                z += row[h] * ws.act[h];
            }
            ws.logit[c] = z;
            peak = std::max(peak, z);
        }
        double total = 0.0;
        for (std::size_t c = 0; c < p.classes; ++c) {
            ws.prob[c] = std::exp(ws.logit[c] - peak);
            total += ws.prob[c];
        }
        for (double& pc : ws.prob) {
            pc /= total;
        }
    }

    // Four Gaussian clusters at (+-s, +-s) in the first two inputs; the class is
    // the XOR of the signs (folded modulo `classes`). Remaining inputs are noise.
    void make_dataset(std::uint64_t seed) {
        const auto& p = params_;
        auto rng = make_rng(seed, 0, 3);
        std::normal_distribution<double> normal;
        std::uniform_int_distribution<int> quadrant(0, 3);
        features_.resize(p.dataset_size * p.inputs);
        labels_.resize(p.dataset_size);
        for (std::size_t n = 0; n < p.dataset_size; ++n) {
            const int q = quadrant(rng);
            const double sx = (q & 1) ? p.separation : -p.separation;
            const double sy = (q & 2) ? p.separation : -p.separation;
            double* row = &features_[n * p.inputs];
            for (std::size_t i = 0; i < p.inputs; ++i) {
                row[i] = normal(rng);
            }
            row[0] += sx;
            row[1] += sy;
            labels_[n] = static_cast<std::size_t>(((q & 1) ^ ((q >> 1) & 1))) % p.classes;
        }
    }

    MlpParams params_;
    ModelLayout layout_;
    std::vector<double> features_;
    std::vector<std::size_t> labels_;
};

inline std::unique_ptr<Model> make_model(const ModelSpec& spec, std::uint64_t seed) {
    if (spec.kind == ModelKind::mlp) {
        return std::make_unique<Mlp>(spec.mlp, seed);
    }
    return std::make_unique<BlockQuadratic>(spec.quadratic, seed);
}

}  // namespace deft
