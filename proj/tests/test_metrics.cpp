#include "deft/metrics.hpp"

#include <gtest/gtest.h>

#include <cmath>
#include <sstream>
#include <vector>

namespace deft {
namespace {

TEST(MeasureDensity, Ratio) {
    EXPECT_DOUBLE_EQ(measure_density(IndexSet::from_sorted({1, 4, 7}), 10), 0.3);
    EXPECT_EQ(measure_density(IndexSet{}, 10), 0.0);
}

TEST(MeasureError, MeanOfNorms) {
    const std::vector<GradientVector> zero{{0, 0}, {0, 0}};
    EXPECT_EQ(measure_error(zero), 0.0);
    const std::vector<GradientVector> one{{3, 4}};
    EXPECT_DOUBLE_EQ(measure_error(one), 5.0);
    const std::vector<GradientVector> two{{3, 0}, {0, 5}};
    EXPECT_DOUBLE_EQ(measure_error(two), 4.0);
}

TEST(CostModel, SingleWorkerHasUnitSpeedup) {
    const std::vector<double> c{1000.0 * std::log2(11.0)};
    const auto m = cost_model(c, 1000, 10);
    EXPECT_DOUBLE_EQ(m.speedup, 1.0);
    EXPECT_DOUBLE_EQ(*m.speedup_trivial, 1.0);
}

TEST(CostModel, PerWorkerLayers) {
    std::vector<std::vector<LayerPartition>> alloc(2);
    alloc[0].push_back({0, 4, 1.0, 3, 0.0});  // 4 * log2(4) = 8
    alloc[1].push_back({4, 8, 1.0, 1, 0.0});  // 4 * log2(2) = 4
    const auto m = cost_model(alloc, 8, 4);
    EXPECT_EQ(m.worker_costs, (std::vector<double>{8.0, 4.0}));
    EXPECT_EQ(m.cost_max, 8.0);
    EXPECT_DOUBLE_EQ(m.speedup, 8.0 * std::log2(5.0) / 8.0);
}

TEST(CostModel, TrivialSpeedupSpotValue) {
    // 16 * log2(1e4) / log2(625)
    const double expect = 16.0 * (4.0 * std::log(10.0)) / (4.0 * std::log(5.0));
    const auto f = speedup_trivial_raw(1e4, 16.0);
    ASSERT_TRUE(f.has_value());
    EXPECT_NEAR(*f, expect, 1e-9 * expect);
    EXPECT_NEAR(*f, 22.89, 0.005);
    EXPECT_GT(*f, 16.0);
}

TEST(CostModel, TrivialSpeedupAbsentWhenKBelowN) {
    EXPECT_FALSE(speedup_trivial(3, 4).has_value());
    EXPECT_FALSE(speedup_trivial_raw(3.0, 4.0).has_value());
    ASSERT_TRUE(speedup_trivial(8, 4).has_value());
    EXPECT_GE(*speedup_trivial(8, 4), 4.0);
}

TEST(CostModel, TrivialDominatesLinearForKAtLeastTwiceN) {
    for (std::size_t n = 1; n <= 64; n *= 2) {
        for (std::size_t k = 2 * n; k < 100000; k = k * 3 + 1) {
            const auto f = speedup_trivial(k, n);
            ASSERT_TRUE(f.has_value());
            ASSERT_GE(*f, static_cast<double>(n));
        }
    }
}

TEST(TimeBreakdown, Means) {
    std::vector<IterationMetrics> run(2);
    run[0].times = {1, 2, 3, 4, 5, 15};
    run[1].times = {3, 2, 1, 0, 1, 7};
    const auto t = time_breakdown(run);
    EXPECT_EQ(t.forward, 2.0);
    EXPECT_EQ(t.partition, 3.0);
    EXPECT_EQ(t.total, 11.0);
    EXPECT_EQ(time_breakdown({}).total, 0.0);
}

TEST(MetricsCsv, RowFormat) {
    IterationMetrics m;
    m.iteration = 3;
    m.actual_density = 0.25;
    m.error_norm = 1.5;
    m.loss = 2.0;
    m.accuracy = 0.75;
    m.times = {0.1, 0.2, 0.3, 0.4, 0.5, 1.5};
    m.cost_max = 12.0;
    m.speedup = 3.5;
    m.bytes_idx = 40;
    m.bytes_grad = 80;
    std::ostringstream a, b;
    write_metrics_row(a, m, true);
    write_metrics_row(b, m, false);
    EXPECT_EQ(a.str(), "3,0.25,1.5,2,0.75,0.1,0.2,0.3,0.4,0.5,12,3.5,,40,80\n");
    EXPECT_EQ(b.str(), "3,0.25,1.5,2,0.75,0,0,0,0,0,12,3.5,,40,80\n");
}

TEST(FormatNumber, RoundTrips) {
    for (double v : {0.1, 1.0 / 3.0, 1e-300, 123456789.125, -0.0}) {
        EXPECT_EQ(std::stod(format_number(v)), v);
    }
}

}  // namespace
}  // namespace deft
