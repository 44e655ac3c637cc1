#pragma once

// Data-parallel SGD with error feedback over the simulated cluster.
//
// Per iteration, on every rank i:
//   acc_i  = e_i + eta_t * G_i(x)
//   idx_i  = sparsify(acc_i)
//   idx    = all_gather(idx_i)
//   g      = all_reduce_sum(acc_i[idx])
//   x     -= g / n            at idx
//   e_i    = acc_i with acc_i[idx] zeroed

#include "deft/collectives.hpp"
#include "deft/metrics.hpp"
#include "deft/models.hpp"
#include "deft/sparsifiers.hpp"
#include "deft/tensor.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <cstring>
#include <functional>
#include <memory>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace deft {

/// What a worker contributes at union indices it did not select itself.
enum class ValueFill {
    strict_alg1,  // its own residual acc_i[j]; every union index is then cleared
    zero_fill,    // zero; only the worker's own selections are cleared
};

inline std::string_view to_string(ValueFill f) { return f == ValueFill::zero_fill ? "zero_fill" : "strict_alg1"; }

struct TrainConfig {
    std::size_t n_workers = 1;
    std::size_t iterations = 100;
    double learning_rate = 0.1;
    /// The rate is multiplied by lr_decay_factor at each listed iteration.
    std::vector<std::size_t> lr_decay_at;
    double lr_decay_factor = 0.1;
    SparsifierConfig sparsifier;
    std::uint64_t seed = 0;
    ExecutionMode mode = ExecutionMode::lockstep;
    ValueFill fill = ValueFill::strict_alg1;
    /// Loss/accuracy are evaluated every this many iterations and on the last one.
    std::size_t eval_every = 1;

    double learning_rate_at(std::size_t t) const {
        double eta = learning_rate;
        for (std::size_t at : lr_decay_at) {
            if (t >= at) {
                eta *= lr_decay_factor;
            }
        }
        return eta;
    }

    void validate(std::size_t n_g) const {
        if (n_workers == 0) {
            throw std::invalid_argument("workers must be >= 1");
        }
        if (n_workers > n_g) {
            throw std::invalid_argument("more workers than parameters");
        }
        if (!(learning_rate > 0.0) || !(lr_decay_factor > 0.0)) {
            throw std::invalid_argument("learning rate must stay positive");
        }
        if (eval_every == 0) {
            throw std::invalid_argument("eval_every must be >= 1");
        }
        sparsifier.validate(n_g);
    }
};

struct WorkerState {
    Rank rank = 0;
    GradientVector x;
    GradientVector error;  // e_i; holds acc_i during a step
    GradientVector grad;   // scratch
    Rng rng;
    std::unique_ptr<Sparsifier> sparsifier;
};

class ReplicaDivergence : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Every rank starts from the shared x_0 with a zero residual and its own stream.
inline std::vector<WorkerState> make_workers(const Model& model, const TrainConfig& config) {
    config.validate(model.layout().n_g());
    const auto x0 = model.initial_parameters(config.seed);
    std::vector<WorkerState> workers(config.n_workers);
    for (Rank r = 0; r < config.n_workers; ++r) {
        auto& w = workers[r];
        w.rank = r;
        w.x = x0;
        w.error.assign(x0.size(), 0.0);
        w.grad.assign(x0.size(), 0.0);
        w.rng = make_rng(config.seed, r + 1, 4);
        w.sparsifier = std::make_unique<Sparsifier>(config.sparsifier, model.layout(), config.n_workers);
    }
    return workers;
}

namespace detail {

struct RankStats {
    PhaseTimes times;
    double selection_cost = 0.0;
    std::size_t selected = 0;
    std::size_t layer_count = 0;
    double error_norm = 0.0;
};

// Comparison value for a k-based cost model; hard threshold borrows its density knob.
inline std::size_t cost_model_k(const SparsifierConfig& s, std::size_t n_g) {
    const double d = std::clamp(s.density, 0.0, 1.0);
    return std::max<std::size_t>(1, static_cast<std::size_t>(std::llround(d * static_cast<double>(n_g))));
}

}  // namespace detail

/// One synchronous iteration across all workers. Loss and accuracy are left
/// for the caller to fill in.
inline IterationMetrics train_step(std::vector<WorkerState>& workers, const Model& model, std::size_t t,
                                   const TrainConfig& config, Communicator& comm) {
    using Clock = std::chrono::steady_clock;
    const std::size_t n = workers.size();
    const std::size_t n_g = model.layout().n_g();
    if (comm.size() != n) {
        throw std::invalid_argument("train_step: communicator size does not match worker count");
    }
    const double eta = config.learning_rate_at(t);
    const double nd = static_cast<double>(n);
    std::vector<detail::RankStats> stats(n);
    IndexSet union_seen;
    const std::size_t ledger_mark = comm.ledger().records().size();
    comm.set_iteration(t);

    comm.run([&](Rank rank) {
        auto& w = workers[rank];
        auto& st = stats[rank];
        const auto since = [](Clock::time_point a) { return std::chrono::duration<double>(Clock::now() - a).count(); };
        const auto t_start = Clock::now();
        const double blocked_start = comm.blocked_seconds(rank);

        // The model splits its own wall time; anything it does not attribute
        // (validation, setup) counts as backward.
        GradientTimings gt;
        model.gradient(w.x, w.rng, w.grad, &gt);
        const auto t_acc = Clock::now();
        const double grad_wall = std::chrono::duration<double>(t_acc - t_start).count();
        st.times.forward = std::min(gt.forward, grad_wall);
        std::span<double> acc = w.error;
        for (std::size_t j = 0; j < n_g; ++j) {
            acc[j] += eta * w.grad[j];
        }
        if (!all_finite(acc)) {
            throw NonFiniteError("non-finite accumulated gradient on rank " + std::to_string(rank) + " at iteration " +
                                 std::to_string(t));
        }
        st.times.backward = grad_wall - st.times.forward + since(t_acc);

        const auto t_sel = Clock::now();
        const double blocked_sel = comm.blocked_seconds(rank);
        const auto sel = w.sparsifier->select(acc, t, rank, comm);
        const double sel_wall = since(t_sel) - (comm.blocked_seconds(rank) - blocked_sel);
        st.times.partition = sel.timings.partition;
        st.times.select = std::max(sel.timings.select, sel_wall - sel.timings.partition - sel.timings.comm);
        st.selection_cost = sel.selection_cost;
        st.selected = sel.indices.size();
        st.layer_count = sel.layer_count;

        const auto t_comm = Clock::now();
        const double blocked_comm = comm.blocked_seconds(rank);
        const IndexSet idx = comm.all_gather_indices(rank, sel.indices);
        std::vector<double> contribution(idx.size());
        if (config.fill == ValueFill::strict_alg1) {
            for (std::size_t j = 0; j < idx.size(); ++j) {
                contribution[j] = acc[idx[j]];
            }
        } else {
            auto mine = sel.indices.begin();
            for (std::size_t j = 0; j < idx.size(); ++j) {
                while (mine != sel.indices.end() && *mine < idx[j]) {
                    ++mine;
                }
                contribution[j] = (mine != sel.indices.end() && *mine == idx[j]) ? acc[idx[j]] : 0.0;
            }
        }
        const auto summed = comm.all_reduce_sum(rank, contribution);
        for (std::size_t j = 0; j < idx.size(); ++j) {
            w.x[idx[j]] = w.x[idx[j]] - summed[j] / nd;
        }
        if (config.fill == ValueFill::strict_alg1) {
            for (Index j : idx) {
                acc[j] = 0.0;
            }
        } else {
            for (Index j : sel.indices) {
                acc[j] = 0.0;
            }
        }
        st.times.comm = sel.timings.comm + since(t_comm) - (comm.blocked_seconds(rank) - blocked_comm);
        st.times.total = since(t_start) - (comm.blocked_seconds(rank) - blocked_start);

        // bookkeeping below is not part of the iteration's time
        double sq = 0.0;
        for (double v : w.error) {
            sq += v * v;
        }
        st.error_norm = std::sqrt(sq);
        if (rank == 0) {
            union_seen = idx;
        }
    });

    for (Rank r = 1; r < n; ++r) {
        if (std::memcmp(workers[r].x.data(), workers[0].x.data(), n_g * sizeof(double)) != 0) {
            throw ReplicaDivergence("replica " + std::to_string(r) + " diverged from rank 0 at iteration " +
                                    std::to_string(t));
        }
    }

    IterationMetrics m;
    m.iteration = t;
    m.union_size = union_seen.size();
    m.actual_density = measure_density(union_seen, n_g);
    std::vector<double> costs(n);
    double error_sum = 0.0;
    for (Rank r = 0; r < n; ++r) {
        const auto& st = stats[r];
        m.times.forward = std::max(m.times.forward, st.times.forward);
        m.times.backward = std::max(m.times.backward, st.times.backward);
        m.times.select = std::max(m.times.select, st.times.select);
        m.times.comm = std::max(m.times.comm, st.times.comm);
        m.times.partition = std::max(m.times.partition, st.times.partition);
        m.times.total = std::max(m.times.total, st.times.total);
        m.max_local_selected = std::max(m.max_local_selected, st.selected);
        m.layer_count = std::max(m.layer_count, st.layer_count);
        costs[r] = st.selection_cost;
        error_sum += st.error_norm;
    }
    m.error_norm = error_sum / static_cast<double>(n);
    const auto cm = cost_model(costs, n_g, detail::cost_model_k(config.sparsifier, n_g));
    m.worker_costs = cm.worker_costs;
    m.cost_max = cm.cost_max;
    m.speedup = cm.speedup;
    m.speedup_trivial = cm.speedup_trivial;

    const auto& records = comm.ledger().records();
    for (std::size_t i = ledger_mark; i < records.size(); ++i) {
        const auto& rec = records[i];
        switch (rec.op) {
        case CollectiveOp::all_gather: m.bytes_idx += rec.byte_count; break;
        case CollectiveOp::broadcast:
            m.bytes_idx += rec.byte_count;
            if (config.sparsifier.kind == SparsifierKind::deft) {
                m.bytes_plan += rec.byte_count;
            }
            break;
        case CollectiveOp::all_reduce: m.bytes_grad += rec.byte_count; break;
        }
    }
    return m;
}

/// k used by the communication time model for this iteration.
inline double effective_k(const IterationMetrics& m, const TrainConfig& config, std::size_t n_g) {
    switch (config.sparsifier.kind) {
    case SparsifierKind::deft: return static_cast<double>(m.max_local_selected);
    case SparsifierKind::cltk: return static_cast<double>(target_k(n_g, config.sparsifier.density));
    case SparsifierKind::topk:
    case SparsifierKind::hard_threshold: return static_cast<double>(m.union_size);
    }
    return 0.0;
}

/// Owns the model, workers, communicator and ledger of one run.
class Trainer {
public:
    Trainer(const ModelSpec& spec, const TrainConfig& config)
        : config_(config), model_(make_model(spec, config.seed)), workers_(make_workers(*model_, config_)),
          comm_(std::make_unique<Communicator>(config_.n_workers, config_.mode, ledger_)) {}

    Trainer(const Trainer&) = delete;
    Trainer& operator=(const Trainer&) = delete;

    /// Runs the next iteration and evaluates the model when due.
    IterationMetrics step() {
        const std::size_t t = next_++;
        auto m = train_step(workers_, *model_, t, config_, *comm_);
        if (!last_eval_ || (t + 1) % config_.eval_every == 0 || t + 1 == config_.iterations) {
            last_eval_ = model_->evaluate(workers_[0].x);
        }
        m.loss = last_eval_->loss;
        m.accuracy = last_eval_->accuracy;
        if (!std::isfinite(m.loss)) {
            throw NonFiniteError("non-finite loss at iteration " + std::to_string(t));
        }
        return m;
    }

    std::size_t iteration() const noexcept { return next_; }
    const TrainConfig& config() const noexcept { return config_; }
    const Model& model() const noexcept { return *model_; }
    const std::vector<WorkerState>& workers() const noexcept { return workers_; }
    const CollectiveLedger& ledger() const noexcept { return ledger_; }

private:
    TrainConfig config_;
    std::unique_ptr<Model> model_;
    std::vector<WorkerState> workers_;
    CollectiveLedger ledger_;
    std::unique_ptr<Communicator> comm_;
    std::size_t next_ = 0;
    std::optional<Evaluation> last_eval_;
};

struct RunResult {
    std::vector<IterationMetrics> metrics;
    GradientVector final_parameters;
    CollectiveLedger ledger;
    Evaluation final_evaluation;

    double mean_density() const {
        double s = 0.0;
        for (const auto& m : metrics) {
            s += m.actual_density;
        }
        return metrics.empty() ? 0.0 : s / static_cast<double>(metrics.size());
    }
};

/// All configured iterations. `on_iteration` sees each row as soon as it exists,
/// so a failure part-way through still leaves the earlier rows with the caller.
inline RunResult run_training(const ModelSpec& spec, const TrainConfig& config,
                              const std::function<void(const IterationMetrics&)>& on_iteration = {}) {
    Trainer trainer(spec, config);
    RunResult result;
    result.metrics.reserve(config.iterations);
    for (std::size_t t = 0; t < config.iterations; ++t) {
        result.metrics.push_back(trainer.step());
        if (on_iteration) {
            on_iteration(result.metrics.back());
        }
    }
    result.final_parameters = trainer.workers().front().x;
    result.ledger = trainer.ledger();
    result.final_evaluation = trainer.model().evaluate(result.final_parameters);
    return result;
}

}  // namespace deft
