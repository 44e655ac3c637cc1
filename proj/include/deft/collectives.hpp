#pragma once

// In-process simulation of the collectives used by sparsified data-parallel SGD.
//
// Every rank runs on its own thread and meets the others at rendezvous points.
// Reductions are performed by the last rank to arrive, always in rank order, so
// the result does not depend on the schedule. Two schedules are supported:
//
//   lockstep    ranks run one at a time, 0..n-1, between consecutive collectives
//   concurrent  ranks run freely and only synchronise inside collectives
//
// Each completed collective appends one record to a CollectiveLedger.

#include "deft/tensor.hpp"

#include <algorithm>
#include <array>
#include <chrono>
#include <cmath>
#include <condition_variable>
#include <cstddef>
#include <exception>
#include <functional>
#include <mutex>
#include <ostream>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <thread>
#include <vector>

namespace deft {

using Rank = std::size_t;

enum class ExecutionMode { lockstep, concurrent };

inline std::string_view to_string(ExecutionMode m) {
    return m == ExecutionMode::lockstep ? "lockstep" : "concurrent";
}

enum class CollectiveOp { broadcast, all_gather, all_reduce };

inline std::string_view to_string(CollectiveOp op) {
    switch (op) {
    case CollectiveOp::broadcast: return "broadcast";
    case CollectiveOp::all_gather: return "all_gather";
    case CollectiveOp::all_reduce: return "all_reduce";
    }
    return "unknown";
}

/// Raised when ranks disagree on which collective comes next.
class CollectiveDesync : public std::runtime_error {
public:
    explicit CollectiveDesync(const std::string& what) : std::runtime_error("collective desync: " + what) {}
};

/// Raised in ranks that were blocked when another rank failed.
class ClusterAborted : public std::runtime_error {
public:
    ClusterAborted() : std::runtime_error("cluster aborted by a failing rank") {}
};

struct LedgerRecord {
    std::size_t iteration = 0;
    CollectiveOp op = CollectiveOp::broadcast;
    std::size_t element_count = 0;
    std::size_t byte_count = 0;
    std::size_t ranks = 0;

    friend bool operator==(const LedgerRecord&, const LedgerRecord&) = default;
};

struct LedgerTotals {
    std::size_t element_count = 0;
    std::size_t byte_count = 0;
};

class CollectiveLedger {
public:
    void record(const LedgerRecord& r) {
        records_.push_back(r);
        auto& t = totals_[static_cast<std::size_t>(r.op)];
        t.element_count += r.element_count;
        t.byte_count += r.byte_count;
    }

    const std::vector<LedgerRecord>& records() const noexcept { return records_; }

    LedgerTotals totals(CollectiveOp op) const { return totals_[static_cast<std::size_t>(op)]; }

    /// Bytes moved by `op` during `iteration`.
    std::size_t bytes(std::size_t iteration, CollectiveOp op) const {
        std::size_t sum = 0;
        for (const auto& r : records_) {
            if (r.iteration == iteration && r.op == op) {
                sum += r.byte_count;
            }
        }
        return sum;
    }

    std::size_t elements(std::size_t iteration, CollectiveOp op) const {
        std::size_t sum = 0;
        for (const auto& r : records_) {
            if (r.iteration == iteration && r.op == op) {
                sum += r.element_count;
            }
        }
        return sum;
    }

    void write_csv(std::ostream& os) const {
        os << "iteration,op,element_count,byte_count\n";
        for (const auto& r : records_) {
            os << r.iteration << ',' << to_string(r.op) << ',' << r.element_count << ',' << r.byte_count << '\n';
        }
    }

    friend bool operator==(const CollectiveLedger& a, const CollectiveLedger& b) { return a.records_ == b.records_; }

private:
    std::vector<LedgerRecord> records_;
    std::array<LedgerTotals, 3> totals_{};
};

class Communicator {
public:
    Communicator(std::size_t n_workers, ExecutionMode mode, CollectiveLedger& ledger)
        : n_(n_workers), mode_(mode), ledger_(&ledger), rank_cv_(n_workers), blocked_(n_workers, 0.0),
          seq_(n_workers, 0), idx_in_(n_workers), val_in_(n_workers), byte_in_(n_workers) {
        if (n_workers == 0) {
            throw std::invalid_argument("Communicator: need at least one rank");
        }
    }

    ~Communicator() {
        {
            std::lock_guard lock(mu_);
            stopping_ = true;
        }
        wake_all();
        for (auto& t : pool_) {
            t.join();
        }
    }

    Communicator(const Communicator&) = delete;
    Communicator& operator=(const Communicator&) = delete;

    std::size_t size() const noexcept { return n_; }
    ExecutionMode mode() const noexcept { return mode_; }
    CollectiveLedger& ledger() noexcept { return *ledger_; }

    /// Iteration stamped on ledger records. Only call between runs.
    void set_iteration(std::size_t t) noexcept { iteration_ = t; }
    std::size_t iteration() const noexcept { return iteration_; }

    /// Seconds `rank` has spent blocked inside collectives, cumulative.
    double blocked_seconds(Rank rank) const { return blocked_.at(rank); }

    /// Runs fn(rank) for every rank under the configured schedule and returns when
    /// all ranks are done. The first exception thrown by any rank is rethrown.
    template <class Fn>
    void run(Fn&& fn) {
        reset_run_state();
        if (n_ == 1) {
            try {
                fn(Rank{0});
            } catch (...) {
                finish(0);
                throw;
            }
            finish(0);
            return;
        }
        start_pool();
        std::unique_lock lock(mu_);
        job_ = [&fn](Rank r) { fn(r); };
        ++job_gen_;
        lock.unlock();
        wake_all();
        lock.lock();
        main_cv_.wait(lock, [&] { return finished_ == n_; });
        job_ = nullptr;
        if (first_error_) {
            std::rethrow_exception(first_error_);
        }
    }

    /// Sorted, deduplicated union of every rank's index set. Duplicates are
    /// counted in the ledger because they cross the wire before merging.
    IndexSet all_gather_indices(Rank rank, const IndexSet& local) {
        std::vector<Index> out;
        rendezvous(
            rank, CollectiveOp::all_gather, [&] { idx_in_[rank] = local.values(); },
            [&] {
                std::size_t total = 0;
                std::vector<Index> merged;
                for (const auto& part : idx_in_) {
                    total += part.size();
                    std::vector<Index> next;
                    next.reserve(merged.size() + part.size());
                    std::set_union(merged.begin(), merged.end(), part.begin(), part.end(), std::back_inserter(next));
                    merged.swap(next);
                }
                idx_out_ = std::move(merged);
                ledger_->record({iteration_, CollectiveOp::all_gather, total, total * kIndexBytes, n_});
            },
            [&] { out = idx_out_; });
        return IndexSet::from_sorted(std::move(out));
    }

    /// Element-wise sum across ranks, folded in ascending rank order.
    std::vector<double> all_reduce_sum(Rank rank, std::span<const double> values) {
        std::vector<double> out;
        rendezvous(
            rank, CollectiveOp::all_reduce, [&] { val_in_[rank].assign(values.begin(), values.end()); },
            [&] {
                const std::size_t len = val_in_[0].size();
                for (Rank r = 1; r < n_; ++r) {
                    if (val_in_[r].size() != len) {
                        throw CollectiveDesync("all_reduce length mismatch (rank 0 has " + std::to_string(len) +
                                               ", rank " + std::to_string(r) + " has " +
                                               std::to_string(val_in_[r].size()) + ")");
                    }
                }
                val_out_ = val_in_[0];
                for (Rank r = 1; r < n_; ++r) {
                    for (std::size_t j = 0; j < len; ++j) {
                        val_out_[j] += val_in_[r][j];
                    }
                }
                ledger_->record({iteration_, CollectiveOp::all_reduce, n_ * len, n_ * len * kValueBytes, n_});
            },
            [&] { out = val_out_; });
        return out;
    }

    /// Root's payload delivered to every rank. The ledger records the logical
    /// payload size once, even with a single rank.
    std::vector<std::byte> broadcast_bytes(Rank rank, Rank root, std::span<const std::byte> payload,
                                           std::size_t element_width = kIndexBytes) {
        if (root >= n_) {
            throw std::invalid_argument("broadcast: root rank out of range");
        }
        std::vector<std::byte> out;
        rendezvous(
            rank, CollectiveOp::broadcast,
            [&] {
                byte_in_[rank].assign(payload.begin(), payload.end());
                root_of_[rank] = root;
            },
            [&] {
                for (Rank r = 0; r < n_; ++r) {
                    if (root_of_[r] != root_of_[0]) {
                        throw CollectiveDesync("broadcast ranks disagree on root");
                    }
                }
                byte_out_ = byte_in_[root_of_[0]];
                const std::size_t bytes = byte_out_.size();
                ledger_->record({iteration_, CollectiveOp::broadcast, element_width ? bytes / element_width : bytes,
                                 bytes, n_});
            },
            [&] { out = byte_out_; });
        return out;
    }

private:
    using Clock = std::chrono::steady_clock;

    void reset_run_state() {
        std::lock_guard lock(mu_);
        arrived_ = 0;
        finished_ = 0;
        turn_ = 0;
        aborted_ = false;
        first_error_ = nullptr;
        pending_op_ = CollectiveOp::broadcast;
        std::fill(seq_.begin(), seq_.end(), 0);
        root_of_.assign(n_, 0);
    }

    void wake(Rank rank) { rank_cv_[rank].notify_one(); }

    void wake_all() {
        for (auto& cv : rank_cv_) {
            cv.notify_one();
        }
        main_cv_.notify_one();
    }

    void start_pool() {
        if (!pool_.empty()) {
            return;
        }
        pool_.reserve(n_);
        for (Rank r = 0; r < n_; ++r) {
            pool_.emplace_back([this, r] { worker_loop(r); });
        }
    }

    void worker_loop(Rank rank) {
        std::size_t seen = 0;
        for (;;) {
            std::function<void(Rank)> job;
            {
                std::unique_lock lock(mu_);
                rank_cv_[rank].wait(lock, [&] { return stopping_ || job_gen_ != seen; });
                if (stopping_) {
                    return;
                }
                seen = job_gen_;
                job = job_;
            }
            try {
                wait_for_turn(rank);
                job(rank);
            } catch (const ClusterAborted&) {
                // secondary failure; the primary is already recorded
            } catch (...) {
                fail(std::current_exception());
            }
            finish(rank);
        }
    }

    void wait_for_turn(Rank rank) {
        if (mode_ != ExecutionMode::lockstep) {
            return;
        }
        std::unique_lock lock(mu_);
        rank_cv_[rank].wait(lock, [&] { return turn_ == rank || aborted_; });
        if (aborted_) {
            throw ClusterAborted();
        }
    }

    void fail(std::exception_ptr e) {
        {
            std::lock_guard lock(mu_);
            if (!first_error_) {
                first_error_ = e;
            }
            aborted_ = true;
        }
        wake_all();
    }

    void finish(Rank rank) {
        std::lock_guard lock(mu_);
        ++finished_;
        if (mode_ == ExecutionMode::lockstep && turn_ == rank) {
            turn_ = rank + 1;
        }
        if (finished_ == n_) {
            main_cv_.notify_one();
        } else if (arrived_ > 0) {
            // ranks parked in a collective must notice that this one left
            for (auto& cv : rank_cv_) cv.notify_one();
        } else if (mode_ == ExecutionMode::lockstep && turn_ < n_) {
            wake(turn_);
        }
    }

    // Shared arrival protocol. `contribute` runs under the lock on arrival,
    // `complete` runs once on the last arrival, `fetch` runs under the lock
    // on every rank after completion.
    template <class Contribute, class Complete, class Fetch>
    void rendezvous(Rank rank, CollectiveOp op, Contribute&& contribute, Complete&& complete, Fetch&& fetch) {
        if (rank >= n_) {
            throw std::invalid_argument("collective: rank out of range");
        }
        // Waiting for the lock, handing the turn over and parking all count as
        // blocked; contributing and completing the collective do not.
        const auto t_entry = Clock::now();
        std::unique_lock lock(mu_);
        double blocked = std::chrono::duration<double>(Clock::now() - t_entry).count();
        if (aborted_) {
            throw ClusterAborted();
        }
        const std::size_t my_seq = seq_[rank]++;
        if (arrived_ == 0) {
            pending_op_ = op;
            pending_seq_ = my_seq;
        } else if (pending_op_ != op || pending_seq_ != my_seq) {
            aborted_ = true;
            wake_all();
            throw CollectiveDesync("rank " + std::to_string(rank) + " entered " + std::string(to_string(op)) +
                                   " #" + std::to_string(my_seq) + " while others are in " +
                                   std::string(to_string(pending_op_)) + " #" + std::to_string(pending_seq_));
        }
        contribute();
        const auto t0 = Clock::now();
        double completing = 0.0;
        const std::size_t my_gen = generation_;
        ++arrived_;
        if (arrived_ == n_) {
            try {
                const auto tc = Clock::now();
                complete();
                completing = std::chrono::duration<double>(Clock::now() - tc).count();
            } catch (...) {
                aborted_ = true;
                wake_all();
                throw;
            }
            arrived_ = 0;
            ++generation_;
            if (mode_ == ExecutionMode::lockstep) {
                turn_ = 0;
                wake(0);
            } else {
                for (auto& cv : rank_cv_) cv.notify_one();
            }
        } else if (mode_ == ExecutionMode::lockstep) {
            turn_ = rank + 1;
            wake(turn_);
        }

        rank_cv_[rank].wait(lock, [&] {
            if (aborted_) {
                return true;
            }
            if (arrived_ > 0 && arrived_ + finished_ >= n_ && generation_ == my_gen) {
                return true;  // someone left without joining this collective
            }
            const bool done = generation_ != my_gen;
            return done && (mode_ == ExecutionMode::concurrent || turn_ == rank);
        });
        blocked += std::chrono::duration<double>(Clock::now() - t0).count() - completing;
        blocked_[rank] += blocked;
        if (aborted_) {
            throw ClusterAborted();
        }
        if (generation_ == my_gen) {
            aborted_ = true;
            wake_all();
            throw CollectiveDesync("a rank finished while others waited in " + std::string(to_string(op)));
        }
        fetch();
    }

    std::size_t n_;
    ExecutionMode mode_;
    CollectiveLedger* ledger_;
    std::size_t iteration_ = 0;

    std::mutex mu_;
    std::vector<std::condition_variable> rank_cv_;  // each rank parks on its own
    std::condition_variable main_cv_;
    std::vector<std::thread> pool_;
    std::function<void(Rank)> job_;
    std::size_t job_gen_ = 0;
    bool stopping_ = false;
    std::size_t arrived_ = 0;
    std::size_t finished_ = 0;
    std::size_t generation_ = 0;
    Rank turn_ = 0;
    bool aborted_ = false;
    std::exception_ptr first_error_;
    CollectiveOp pending_op_ = CollectiveOp::broadcast;
    std::size_t pending_seq_ = 0;

    std::vector<double> blocked_;
    std::vector<std::size_t> seq_;
    std::vector<std::vector<Index>> idx_in_;
    std::vector<Index> idx_out_;
    std::vector<std::vector<double>> val_in_;
    std::vector<double> val_out_;
    std::vector<std::vector<std::byte>> byte_in_;
    std::vector<std::byte> byte_out_;
    std::vector<Rank> root_of_;
};

/// Which quantity plays the role of k in the communication time model.
enum class CommCostKind { topk, deft, cltk };

/// log2(n)*alpha + 2(n-1)*k_eff*beta. k_eff is the synchronised union size for
/// Top-k, the largest per-worker selection for DEFT and k for CLT-k.
inline double analytic_comm_cost(CommCostKind, std::size_t n, double k_effective, double alpha, double beta) {
    if (n < 1) {
        throw std::invalid_argument("analytic_comm_cost: n must be >= 1");
    }
    if (!(alpha > 0.0) || !(beta > 0.0)) {
        throw std::invalid_argument("analytic_comm_cost: alpha and beta must be positive");
    }
    const double nd = static_cast<double>(n);
    return std::log2(nd) * alpha + 2.0 * (nd - 1.0) * k_effective * beta;
}

}  // namespace deft
