#include "deft/collectives.hpp"
#include "deft/partitioner.hpp"
#include "support/oracles.hpp"

#include <gtest/gtest.h>

#include <cmath>
#include <numeric>
#include <random>
#include <vector>

namespace deft {
namespace {

std::vector<std::size_t> sizes_of(const std::vector<LayerPartition>& p) {
    std::vector<std::size_t> out;
    for (const auto& l : p) out.push_back(l.size());
    return out;
}

std::vector<LayerPartition> layers_with(const std::vector<std::size_t>& sizes, const std::vector<double>& norms) {
    std::vector<LayerPartition> out;
    std::size_t start = 0;
    for (std::size_t i = 0; i < sizes.size(); ++i) {
        LayerPartition l;
        l.start = start;
        l.end = start + sizes[i];
        l.norm = norms[i];
        out.push_back(l);
        start = l.end;
    }
    return out;
}

TEST(ModelLayout, RejectsEmptyAndZeroSizes) {
    EXPECT_THROW(ModelLayout(std::vector<std::size_t>{}), std::invalid_argument);
    EXPECT_THROW(ModelLayout(std::vector<std::size_t>{3, 0}), std::invalid_argument);
    EXPECT_EQ(ModelLayout({3, 4}).n_g(), 7u);
}

TEST(PartitionTwoStage, SplitsLargeTensorEvenly) {
    EXPECT_EQ(sizes_of(partition_two_stage(ModelLayout({10}), 2)), (std::vector<std::size_t>{5, 5}));
}

TEST(PartitionTwoStage, DropsZeroSizePieces) {
    // 3 split four ways is 1,1,1,0; the empty piece is dropped.
    EXPECT_EQ(sizes_of(partition_two_stage(ModelLayout({3, 4}), 4)),
              (std::vector<std::size_t>{1, 1, 1, 1, 1, 1, 1}));
}

TEST(PartitionTwoStage, SingleWorkerLeavesLayoutUntouched) {
    EXPECT_EQ(sizes_of(partition_two_stage(ModelLayout({2, 3}), 1)), (std::vector<std::size_t>{2, 3}));
}

TEST(PartitionTwoStage, RemainderGoesToLeadingPieces) {
    EXPECT_EQ(sizes_of(partition_two_stage(ModelLayout({11, 1}), 3)), (std::vector<std::size_t>{4, 4, 3, 1}));
}

TEST(PartitionTwoStage, MoreWorkersThanParameters) {
    try {
        (void)partition_two_stage(ModelLayout({2}), 3);
        FAIL() << "expected an error";
    } catch (const std::invalid_argument& e) {
        EXPECT_STREQ(e.what(), "more workers than parameters");
    }
}

TEST(PartitionTwoStage, PropertyContiguousAndBounded) {
    std::mt19937_64 rng(3);
    for (int trial = 0; trial < 500; ++trial) {
        std::vector<std::size_t> sizes(1 + rng() % 12);
        for (auto& s : sizes) s = 1 + rng() % 300;
        const ModelLayout layout(sizes);
        const std::size_t n = 1 + rng() % std::min<std::size_t>(32, layout.n_g());
        const auto parts = partition_two_stage(layout, n);
        const std::size_t cap = (layout.n_g() + n - 1) / n;
        std::size_t expect_start = 0;
        for (const auto& p : parts) {
            ASSERT_EQ(p.start, expect_start);
            ASSERT_GE(p.size(), 1u);
            ASSERT_LE(p.size(), cap);
            expect_start = p.end;
        }
        ASSERT_EQ(expect_start, layout.n_g());

        // a split tensor yields min(n, size) pieces differing by at most one
        std::size_t pos = 0;
        std::size_t cursor = 0;
        const double threshold = static_cast<double>(layout.n_g()) / static_cast<double>(n);
        for (std::size_t s : sizes) {
            std::vector<std::size_t> pieces;
            std::size_t covered = 0;
            while (covered < s) {
                pieces.push_back(parts[cursor].size());
                covered += parts[cursor].size();
                ++cursor;
            }
            ASSERT_EQ(covered, s);
            if (static_cast<double>(s) > threshold) {
                ASSERT_EQ(pieces.size(), std::min(n, s));
                const auto [lo, hi] = std::minmax_element(pieces.begin(), pieces.end());
                ASSERT_LE(*hi - *lo, 1u);
            } else {
                ASSERT_EQ(pieces.size(), 1u);
            }
            pos += s;
        }
    }
}

TEST(TargetK, RoundsAndValidates) {
    EXPECT_EQ(target_k(20, 0.2), 4u);
    EXPECT_EQ(target_k(1000, 0.0105), 11u);  // 10.5 rounds up
    EXPECT_EQ(target_k(10, 1.0), 10u);
    EXPECT_THROW((void)target_k(10, 0.0), std::invalid_argument);
    EXPECT_THROW((void)target_k(10, 1.5), std::invalid_argument);
    EXPECT_THROW((void)target_k(10, 0.01), std::invalid_argument);  // k would be 0
}

TEST(AssignLocalK, NormProportional) {
    auto l = layers_with({10, 10}, {3.0, 1.0});
    assign_local_k(l, 20, 0.2);
    EXPECT_EQ(l[0].local_k, 3u);
    EXPECT_EQ(l[1].local_k, 1u);
}

TEST(AssignLocalK, ZeroNormFloorsAtOne) {
    auto l = layers_with({5}, {0.0});
    assign_local_k(l, 10, 0.2);  // k = 2
    EXPECT_EQ(l[0].local_k, 1u);
}

TEST(AssignLocalK, EqualNorms) {
    auto l = layers_with({4, 4, 4}, {1.0, 1.0, 1.0});
    assign_local_k(l, 12, 0.5);  // k = 6
    for (const auto& x : l) EXPECT_EQ(x.local_k, 2u);
}

TEST(AssignLocalK, CapsAtLayerSize) {
    // k = 10; the first layer would get 10 * 9/10 = 9 but only has 2 entries.
    auto l = layers_with({2, 18}, {9.0, 1.0});
    assign_local_k(l, 20, 0.5);
    EXPECT_EQ(l[0].local_k, 2u);
    EXPECT_EQ(l[1].local_k, 8u);
}

// A cap that binds on the last layer with positive norm loses its excess: the
// budget is only kept to within L when no cap binds.
TEST(AssignLocalK, LateCapLosesBudget) {
    auto l = layers_with({100, 2}, {1.0, 1.0});
    assign_local_k(l, 102, 50.0 / 102.0);  // k = 50
    EXPECT_EQ(l[0].local_k, 25u);
    EXPECT_EQ(l[1].local_k, 2u);
}

// Shares are deducted before rounding: 2.33, 2.33, 2.33 all round to 2. Deducting
// the rounded 2 instead would have handed the middle layer 2.5 and so 3.
TEST(AssignLocalK, RoundingDoesNotCarry) {
    auto l = layers_with({100, 100, 100}, {1.0002, 1.0001, 1.0});
    assign_local_k(l, 300, 7.0 / 300.0);
    EXPECT_EQ(l[0].local_k, 2u);
    EXPECT_EQ(l[1].local_k, 2u);
    EXPECT_EQ(l[2].local_k, 2u);
}

// A capped layer between two equal-size layers passes its unused share to the
// later one only, so the smaller-norm layer ends up with the larger k.
TEST(AssignLocalK, CapBetweenEqualLayersInvertsPriority) {
    auto l = layers_with({100, 1, 100}, {1.0, 0.99, 0.98});
    assign_local_k(l, 201, 10.0 / 201.0);
    EXPECT_EQ(l[0].local_k, 3u);
    EXPECT_EQ(l[1].local_k, 1u);
    EXPECT_EQ(l[2].local_k, 6u);
}

TEST(AssignLocalK, RejectsBadInput) {
    std::vector<LayerPartition> none;
    EXPECT_THROW(assign_local_k(none, 10, 0.5), std::invalid_argument);
    auto l = layers_with({4, 4}, {1.0, 2.0});
    EXPECT_THROW(assign_local_k(l, 8, 0.5), std::invalid_argument);
    auto ok = layers_with({4, 4}, {2.0, 1.0});
    EXPECT_THROW(assign_local_k(ok, 8, 0.0), std::invalid_argument);
}

TEST(AssignLocalK, FullDensitySelectsEverything) {
    auto l = layers_with({3, 5, 2}, {0.0, 0.0, 0.0});
    assign_local_k(l, 10, 1.0);
    EXPECT_EQ(l[0].local_k, 3u);
    EXPECT_EQ(l[1].local_k, 5u);
    EXPECT_EQ(l[2].local_k, 2u);
}

TEST(PriorityOrder, NormDescendingLowerIndexOnTies) {
    const auto l = layers_with({1, 1, 1, 1}, {1.0, 3.0, 1.0, 3.0});
    EXPECT_EQ(priority_order(l), (std::vector<std::size_t>{1, 3, 0, 2}));
}

// Random instances against the hand-trace oracle, plus the sum and range bounds.
TEST(AssignLocalK, PropertyMatchesHandTrace) {
    std::mt19937_64 rng(1234);
    std::lognormal_distribution<double> norm_dist(0.0, 1.5);
    for (int trial = 0; trial < 1000; ++trial) {
        const std::size_t L = 1 + rng() % 40;
        std::vector<std::size_t> sizes(L);
        std::vector<double> norms(L);
        for (std::size_t i = 0; i < L; ++i) {
            sizes[i] = 1 + rng() % 500;
            norms[i] = (rng() % 10 == 0) ? 0.0 : norm_dist(rng);
        }
        const std::size_t n_g = std::accumulate(sizes.begin(), sizes.end(), std::size_t{0});
        const std::size_t k = 1 + rng() % n_g;
        const double d = static_cast<double>(k) / static_cast<double>(n_g);
        ASSERT_EQ(target_k(n_g, d), k);

        auto layers = layers_with(sizes, norms);
        assign_local_k_by_norm(layers, n_g, d);
        bool capped = false;
        const auto expect = testing::local_k_hand_trace(norms, sizes, k, &capped);
        std::size_t total = 0;
        for (std::size_t i = 0; i < L; ++i) {
            ASSERT_GE(layers[i].local_k, 1u);
            ASSERT_LE(layers[i].local_k, sizes[i]);
            if (k < n_g) {
                ASSERT_EQ(layers[i].local_k, expect[i]) << "trial " << trial << " layer " << i;
            }
            total += layers[i].local_k;
        }
        ASSERT_LE(total, k + L);
        const bool any_mass = std::any_of(norms.begin(), norms.end(), [](double v) { return v > 0.0; });
        if (!capped && any_mass) {
            ASSERT_GE(total + L, k);
        }
    }
}

TEST(LayerCost, ShiftedLog) {
    EXPECT_DOUBLE_EQ(layer_cost(10, 1), 10.0);
    EXPECT_DOUBLE_EQ(layer_cost(4, 3), 8.0);
    EXPECT_DOUBLE_EQ(layer_cost_raw(4, 1), 0.0);
    EXPECT_DOUBLE_EQ(layer_cost_raw(4, 4), 8.0);
}

std::vector<LayerPartition> with_costs(const std::vector<double>& costs) {
    std::vector<LayerPartition> out(costs.size());
    for (std::size_t i = 0; i < costs.size(); ++i) {
        out[i].start = i;
        out[i].end = i + 1;
        out[i].local_k = 1;
        out[i].cost = costs[i];
    }
    return out;
}

std::vector<double> bin_totals(const AllocationPlan& plan, const std::vector<LayerPartition>& layers) {
    std::vector<double> t;
    for (const auto& bin : plan.bins) {
        double s = 0.0;
        for (std::size_t i : bin) s += layers[i].cost;
        t.push_back(s);
    }
    return t;
}

TEST(BinPack, GreedyTrace) {
    const auto layers = with_costs({5, 4, 3, 3});
    const auto plan = allocate_layers_binpack(layers, 2, 0);
    EXPECT_EQ(plan.bins[0], (std::vector<std::size_t>{0, 3}));
    EXPECT_EQ(plan.bins[1], (std::vector<std::size_t>{1, 2}));
    EXPECT_EQ(bin_totals(plan, layers), (std::vector<double>{8, 7}));
}

TEST(BinPack, SingleWorkerGetsEverything) {
    const auto plan = allocate_layers_binpack(with_costs({1, 2, 3}), 1, 5);
    ASSERT_EQ(plan.bins.size(), 1u);
    EXPECT_EQ(plan.bins[0], (std::vector<std::size_t>{0, 1, 2}));
    EXPECT_EQ(plan.delegate_rank, 0u);
}

TEST(BinPack, EqualCostsOnePerBin) {
    const auto plan = allocate_layers_binpack(with_costs({2, 2, 2, 2}), 4, 0);
    for (std::size_t b = 0; b < 4; ++b) EXPECT_EQ(plan.bins[b], (std::vector<std::size_t>{b}));
}

TEST(BinPack, DelegateAndBinRotate) {
    const auto plan = allocate_layers_binpack(with_costs({3, 2, 1}), 3, 7);
    EXPECT_EQ(plan.delegate_rank, 1u);
    EXPECT_EQ(plan.bin_of(0), 1u);
    EXPECT_EQ(plan.bin_of(2), 0u);
}

TEST(BinPack, PropertyMatchesLiteralLoopAndLptBound) {
    std::mt19937_64 rng(99);
    for (int trial = 0; trial < 500; ++trial) {
        const std::size_t L = 1 + rng() % 60;
        const std::size_t n = 1 + rng() % 16;
        std::vector<double> costs(L);
        for (auto& c : costs) c = static_cast<double>(1 + rng() % 20);  // small range forces ties
        const auto layers = with_costs(costs);
        const auto plan = allocate_layers_binpack(layers, n, trial);

        const auto expect_owner = testing::lpt_literal(costs, n);
        const auto owner = plan.owners();
        ASSERT_EQ(owner.size(), L);
        for (std::size_t i = 0; i < L; ++i) ASSERT_EQ(owner[i], expect_owner[i]);

        const auto totals = bin_totals(plan, layers);
        const double sum = std::accumulate(costs.begin(), costs.end(), 0.0);
        const double biggest = *std::max_element(costs.begin(), costs.end());
        ASSERT_LE(*std::max_element(totals.begin(), totals.end()), sum / static_cast<double>(n) + biggest);
    }
}

TEST(PlanWire, RoundTripsAndIsFourBytesPerLayer) {
    std::vector<double> costs(24);
    for (std::size_t i = 0; i < costs.size(); ++i) costs[i] = static_cast<double>((i * 7) % 11 + 1);
    const auto plan = allocate_layers_binpack(with_costs(costs), 5, 3);
    const auto bytes = serialize_plan(plan);
    EXPECT_EQ(bytes.size(), 96u);
    EXPECT_EQ(deserialize_plan(bytes, 5, 3), plan);
    const std::vector<std::byte> ragged(5);
    EXPECT_THROW((void)deserialize_plan(ragged, 5, 3), std::invalid_argument);
}

TEST(BroadcastPlan, LedgerRecordsFourBytesPerLayer) {
    for (std::size_t L : {std::size_t{1}, std::size_t{24}}) {
        CollectiveLedger ledger;
        Communicator comm(3, ExecutionMode::concurrent, ledger);
        std::vector<double> costs(L, 1.0);
        const auto layers = with_costs(costs);
        std::vector<AllocationPlan> got(3);
        comm.run([&](Rank r) {
            AllocationPlan proposal;
            proposal.delegate_rank = 0;
            if (r == 0) proposal = allocate_layers_binpack(layers, 3, 0);
            got[r] = broadcast_plan(proposal, r, comm);
        });
        EXPECT_EQ(ledger.bytes(0, CollectiveOp::broadcast), 4 * L);
        EXPECT_EQ(got[1], got[0]);
        EXPECT_EQ(got[2], got[0]);
        EXPECT_EQ(got[0], allocate_layers_binpack(layers, 3, 0));
    }
}

}  // namespace
}  // namespace deft
