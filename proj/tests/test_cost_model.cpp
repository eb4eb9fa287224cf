#include <gtest/gtest.h>

#include <cmath>

#include "btp/btp.hpp"

using namespace btp;

namespace {

const ModelDims k7b{32, 4096, 32, 11008, 2};
const ModelDims k13b{40, 5120, 40, 13824, 2};

long double flops_oracle(long double n, const ModelDims &m) {
  const long double d = m.hidden, f = m.mlp;
  return 4 * n * d * d + 2 * n * n * d + 3 * n * d * f;
}

} // namespace

TEST(LayerFlops, ZeroTokensCostNothing) { EXPECT_EQ(layer_flops(0, k7b), 0.0); }

TEST(LayerFlops, MatchesFormula) {
  for (double n : {1.0, 35.0, 576.0, 1000.0})
    EXPECT_NEAR(layer_flops(n, k7b), double(flops_oracle(n, k7b)), 1.0);
  EXPECT_NEAR(layer_flops(576, k7b) / 1e11, 1.1929, 1e-4);
}

TEST(ScheduleFlops, UnprunedReferenceModels) {
  const TokenLayout image_only(0, 576, 0, 24, 24);
  const PruningSchedule none({}, 32);
  EXPECT_NEAR(schedule_flops(image_only, none, k7b).tflops, 3.8172, 5e-5);
  EXPECT_NEAR(schedule_flops(image_only, PruningSchedule({}, 40), k13b).tflops, 7.4441, 5e-5);
}

TEST(ScheduleFlops, PerLayerTokensAndAverage) {
  const TokenLayout layout(35, 576, 20, 24, 24);
  const PruningSchedule s({{2, 0.5, 1}, {6, 0.5, 1}, {10, 0.5, 1}, {14, 0.5, 1}, {18, 0.0, 1}},
                          32);
  const auto r = schedule_flops(layout, s, k7b);
  ASSERT_EQ(r.per_layer_image_tokens.size(), 32u);
  // A stage at layer l shrinks the sequence from layer l+1 on.
  EXPECT_EQ(r.per_layer_image_tokens[2], 576u);
  EXPECT_EQ(r.per_layer_image_tokens[3], 288u);
  EXPECT_EQ(r.per_layer_image_tokens[7], 144u);
  EXPECT_EQ(r.per_layer_image_tokens[11], 72u);
  EXPECT_EQ(r.per_layer_image_tokens[15], 36u);
  EXPECT_EQ(r.per_layer_image_tokens[19], 0u);
  EXPECT_EQ(r.per_layer_tokens[19], 55u);

  long double total = 0, image = 0;
  for (std::size_t l = 0; l < 32; ++l) {
    std::size_t img = l <= 2 ? 576 : l <= 6 ? 288 : l <= 10 ? 144 : l <= 14 ? 72 : l <= 18 ? 36 : 0;
    total += flops_oracle(55 + img, k7b);
    image += img;
  }
  EXPECT_NEAR(r.tflops, double(total / 1e12), 1e-9);
  EXPECT_NEAR(r.avg_tokens, double(image / 32), 1e-12);
}

TEST(KvCache, FullSequenceSevenB) {
  const TokenLayout image_only(0, 576, 0, 24, 24);
  const auto bytes = kv_cache_bytes(image_only, PruningSchedule({}, 32), k7b);
  EXPECT_EQ(bytes, 2ull * 576 * 4096 * 2 * 32);
  EXPECT_NEAR(double(bytes), 3.02e8, 0.01e8);
}

TEST(KvCache, CountsTextAndSystemTokens) {
  const TokenLayout layout(10, 4, 6, 2, 2);
  const ModelDims tiny{2, 8, 1, 16, 4};
  const PruningSchedule drop({{0, 0.0, 1.0}}, 2);
  EXPECT_EQ(kv_cache_bytes(layout, drop, tiny), 2ull * 8 * 4 * (20 + 16));
}

TEST(ScheduleFlops, MonotoneInRetention) {
  const TokenLayout layout(35, 576, 20, 24, 24);
  double prev = 1e30;
  for (double r : {1.0, 0.9, 0.75, 0.5, 0.25, 0.1}) {
    const PruningSchedule s({{4, r, 1.0}, {12, r, 1.0}}, 32);
    const double t = schedule_flops(layout, s, k7b).tflops;
    EXPECT_LE(t, prev) << r;
    prev = t;
  }
  // Pruning later costs more.
  const double early = schedule_flops(layout, PruningSchedule({{2, 0.5, 1}}, 32), k7b).tflops;
  const double late = schedule_flops(layout, PruningSchedule({{20, 0.5, 1}}, 32), k7b).tflops;
  EXPECT_LT(early, late);
}

TEST(ScheduleFlops, RejectsScheduleDeeperThanModel) {
  const TokenLayout layout(1, 4, 1, 2, 2);
  EXPECT_THROW(schedule_flops(layout, PruningSchedule({{35, 0.5, 1}}, 40), k7b),
               ValidationError);
  EXPECT_THROW(schedule_flops(layout, PruningSchedule({}, 4), ModelDims{4, 0, 1, 1, 2}),
               ValidationError);
}

TEST(PerformanceGain, MeanOfRatios) {
  EXPECT_NEAR(performance_gain({{"a", 0.9}, {"b", 1.0}}, {{"a", 1.0}, {"b", 1.0}}), 95.0, 1e-12);
  EXPECT_NEAR(performance_gain({{"gqa", 61.0}, {"mme", 1800.0}}, {{"gqa", 62.0}, {"mme", 1862.0}}),
              100.0 * (61.0 / 62.0 + 1800.0 / 1862.0) / 2.0, 1e-12);
  EXPECT_DOUBLE_EQ(performance_gain({{"x", 3.0}}, {{"x", 3.0}}), 100.0);
}

TEST(PerformanceGain, Errors) {
  EXPECT_THROW(performance_gain({}, {}), ValidationError);
  EXPECT_THROW(performance_gain({{"a", 1.0}}, {{"b", 1.0}}), ValidationError);
  EXPECT_THROW(performance_gain({{"a", 1.0}}, {{"a", 0.0}}), ValidationError);
  EXPECT_THROW(performance_gain({{"a", 1.0}}, {{"a", 1.0}, {"b", 2.0}}), ValidationError);
}
