#include <gtest/gtest.h>

#include <algorithm>
#include <map>
#include <numeric>
#include <random>

#include "btp/btp.hpp"
#include "oracles.hpp"

using namespace btp;

namespace {

// Full-image scores and hidden rows per layer; survivors gather from them.
struct World {
  TokenLayout layout;
  std::map<std::size_t, std::vector<double>> scores;
  std::map<std::size_t, TensorBlob> hidden;

  StageInputs inputs(std::size_t layer, std::span<const std::size_t> survivors) const {
    std::vector<std::size_t> s(survivors.begin(), survivors.end());
    std::vector<double> sc;
    for (auto i : s)
      sc.push_back(scores.at(layer)[i]);
    return make_stage_inputs(layer, s, sc, hidden.at(layer).gather_rows(s), layout);
  }

  StageSource source() const {
    return [this](std::size_t l, std::span<const std::size_t> s) { return inputs(l, s); };
  }
};

World make_world(std::uint64_t seed, const TokenLayout &layout,
                 std::initializer_list<std::size_t> layers, std::size_t d = 6) {
  World w{layout, {}, {}};
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  std::normal_distribution<float> g(0, 1);
  for (auto l : layers) {
    std::vector<double> s(layout.n_image());
    for (auto &v : s)
      v = u(rng);
    std::vector<float> h(layout.n_image() * d);
    for (auto &v : h)
      v = g(rng);
    w.scores[l] = s;
    w.hidden.emplace(l, TensorBlob::matrix("h", layout.n_image(), d, std::move(h)));
  }
  return w;
}

std::vector<std::size_t> all_image(const TokenLayout &layout) {
  std::vector<std::size_t> v(layout.n_image());
  std::iota(v.begin(), v.end(), 0);
  return v;
}

std::vector<std::size_t> sorted(std::vector<std::size_t> v) {
  std::sort(v.begin(), v.end());
  return v;
}

} // namespace

TEST(AttentionQuota, RoundsHalfUp) {
  EXPECT_EQ(attention_quota(0.6, 10), 6u);
  EXPECT_EQ(attention_quota(0.5, 5), 3u);
  EXPECT_EQ(attention_quota(0.25, 2), 1u);
  EXPECT_EQ(attention_quota(0.0, 7), 0u);
  EXPECT_EQ(attention_quota(1.0, 7), 7u);
}

TEST(SelectStage, LambdaOneIsRebalancedTopK) {
  const TokenLayout layout(2, 36, 3, 6, 6);
  const auto w = make_world(1, layout, {4});
  const auto in = w.inputs(4, all_image(layout));
  const auto picks = select_stage(in, {4, 0.5, 1.0}, {});
  EXPECT_TRUE(picks.diversity.empty());
  EXPECT_EQ(picks.attention, oracle::rebalanced(w.scores.at(4), 18, default_k_prime(18, 36)));
  EXPECT_EQ(picks.kept, sorted(picks.attention));
}

TEST(SelectStage, LambdaZeroIsDiversityOnly) {
  const TokenLayout layout(2, 36, 3, 6, 6);
  const auto w = make_world(2, layout, {4});
  const auto in = w.inputs(4, all_image(layout));
  for (auto sem : {Metric::cosine_distance, Metric::euclidean}) {
    DiversityConfig cfg;
    cfg.semantic_metric = sem;
    const auto picks = select_stage(in, {4, 0.5, 0.0}, cfg);
    EXPECT_TRUE(picks.attention.empty());
    EXPECT_EQ(picks.kept,
              oracle::diversity_only(layout, all_image(layout),
                                     oracle::points_of(w.hidden.at(4)), 18, cfg.spatial_metric,
                                     sem));
  }
}

TEST(SelectStage, MixedSplitMatchesComponents) {
  // 20 survivors at retention 0.5 keep 10: 6 by attention, 4 by diversity.
  const TokenLayout layout(1, 20, 2, 4, 5);
  const auto w = make_world(3, layout, {2});
  const auto in = w.inputs(2, all_image(layout));
  const auto picks = select_stage(in, {2, 0.5, 0.6}, {});
  ASSERT_EQ(picks.attention.size(), 6u);
  ASSERT_EQ(picks.diversity.size(), 4u);
  EXPECT_EQ(picks.attention, oracle::rebalanced(w.scores.at(2), 6, default_k_prime(6, 20)));

  std::vector<std::size_t> remaining;
  for (std::size_t i = 0; i < 20; ++i)
    if (std::find(picks.attention.begin(), picks.attention.end(), i) == picks.attention.end())
      remaining.push_back(i);
  const auto div = oracle::diversity_only(layout, remaining,
                                          oracle::points_of(w.hidden.at(2).gather_rows(remaining)),
                                          4, Metric::manhattan, Metric::cosine_distance);
  EXPECT_EQ(sorted(picks.diversity), div);
  auto both = picks.attention;
  both.insert(both.end(), picks.diversity.begin(), picks.diversity.end());
  EXPECT_EQ(picks.kept, sorted(both));
}

TEST(SelectStage, DropAllKeepsNothing) {
  const TokenLayout layout(0, 9, 1, 3, 3);
  const auto w = make_world(4, layout, {1});
  EXPECT_TRUE(select_stage(w.inputs(1, all_image(layout)), {1, 0.0, 1.0}, {}).kept.empty());
}

TEST(SelectStage, ScaleInvariance) {
  const TokenLayout layout(1, 16, 2, 4, 4);
  auto w = make_world(5, layout, {3});
  const auto base = select_stage(w.inputs(3, all_image(layout)), {3, 0.5, 0.5}, {});
  for (auto &v : w.scores[3])
    v *= 7.25;
  const auto scaled = select_stage(w.inputs(3, all_image(layout)), {3, 0.5, 0.5}, {});
  EXPECT_EQ(base.kept, scaled.kept);
  EXPECT_EQ(base.attention, scaled.attention);
}

TEST(SelectStage, RejectsMisalignedInputs) {
  const TokenLayout layout(0, 4, 1, 2, 2);
  EXPECT_THROW(make_stage_inputs(0, {0, 1}, {0.1}, TensorBlob::matrix("h", 2, 1, {1, 2}), layout),
               ValidationError);
  EXPECT_THROW(make_stage_inputs(0, {1, 0}, {0.1, 0.2},
                                 TensorBlob::matrix("h", 2, 1, {1, 2}), layout),
               ValidationError);
  EXPECT_THROW(make_stage_inputs(0, {0, 4}, {0.1, 0.2},
                                 TensorBlob::matrix("h", 2, 1, {1, 2}), layout),
               ValidationError);
}

TEST(RunSchedule, NestedAndCountsFollowSchedule) {
  const TokenLayout layout(3, 64, 4, 8, 8);
  const auto w = make_world(6, layout, {2, 5, 9, 12});
  const PruningSchedule schedule({{2, 0.5, 0.6}, {5, 0.5, 0.8}, {9, 0.5, 1.0}, {12, 0.0, 1.0}},
                                 16);
  const auto r = run_schedule(w.source(), schedule, layout);
  ASSERT_EQ(r.per_stage.size(), 4u);
  const std::vector<std::size_t> counts{32, 16, 8, 0};
  std::vector<std::size_t> prev = all_image(layout);
  for (std::size_t s = 0; s < 4; ++s) {
    const auto &kept = r.per_stage[s].kept;
    EXPECT_EQ(kept.size(), counts[s]);
    EXPECT_TRUE(std::includes(prev.begin(), prev.end(), kept.begin(), kept.end()));
    prev = kept;
  }
}

TEST(RunSchedule, Deterministic) {
  const TokenLayout layout(3, 49, 4, 7, 7);
  const auto w = make_world(7, layout, {1, 4, 7});
  const PruningSchedule schedule({{1, 0.6, 0.3}, {4, 0.6, 0.6}, {7, 0.5, 0.9}}, 10);
  const auto a = run_schedule(w.source(), schedule, layout);
  const auto b = run_schedule(w.source(), schedule, layout);
  EXPECT_EQ(a, b);
}

TEST(RunSchedule, DropAllEndsTheSchedule) {
  const TokenLayout layout(0, 16, 1, 4, 4);
  const auto w = make_world(8, layout, {1, 3});
  EXPECT_THROW(PruningSchedule({{1, 0.0, 1.0}, {3, 0.5, 1.0}}, 6), ValidationError);
  const auto r = run_schedule(w.source(), PruningSchedule({{1, 0.5, 1.0}, {3, 0.0, 1.0}}, 6),
                              layout);
  ASSERT_EQ(r.per_stage.size(), 2u);
  EXPECT_EQ(r.per_stage[0].kept.size(), 8u);
  EXPECT_TRUE(r.per_stage[1].kept.empty());
  EXPECT_EQ(r.per_stage[1].layer, 3u);
}

TEST(RunSchedule, LambdaRaisesAttentionMass) {
  // Averaged over seeds, a pure-attention stage keeps at least the mass of a
  // mixed one, which keeps at least the mass of a pure-diversity one.
  const TokenLayout layout(1, 36, 2, 6, 6);
  double mass[3] = {0, 0, 0};
  const double lambdas[3] = {0.0, 0.5, 1.0};
  for (std::uint64_t seed = 0; seed < 30; ++seed) {
    const auto w = make_world(100 + seed, layout, {2});
    const auto in = w.inputs(2, all_image(layout));
    for (int i = 0; i < 3; ++i) {
      const auto picks = select_stage(in, {2, 0.25, lambdas[i]}, {});
      for (auto k : picks.kept)
        mass[i] += w.scores.at(2)[k];
    }
  }
  EXPECT_LE(mass[0], mass[1]);
  EXPECT_LE(mass[1], mass[2]);
}

TEST(StagedPruner, GuardsOrderAndSurvivors) {
  const TokenLayout layout(0, 16, 1, 4, 4);
  const auto w = make_world(9, layout, {1, 3});
  StagedPruner p(PruningSchedule({{1, 0.5, 1.0}, {3, 0.5, 1.0}}, 6), layout);
  EXPECT_THROW(p.apply(w.inputs(3, all_image(layout))), ValidationError);
  p.apply(w.inputs(1, all_image(layout)));
  EXPECT_THROW(p.apply(w.inputs(3, all_image(layout))), ValidationError);
  p.apply(w.inputs(3, p.survivors()));
  EXPECT_TRUE(p.done());
  EXPECT_THROW(p.apply(w.inputs(3, p.survivors())), ValidationError);
}

TEST(StageDiagnostics, ReportsMassAndSpread) {
  const TokenLayout layout(0, 9, 1, 3, 3);
  const auto w = make_world(10, layout, {0});
  const auto in = w.inputs(0, all_image(layout));
  const PruningStage stage{0, 0.5, 0.5};
  const auto picks = select_stage(in, stage, {});
  const auto d = stage_diagnostics(in, picks, stage, {});
  double mass = 0, total = 0;
  for (auto k : picks.kept)
    mass += w.scores.at(0)[k];
  for (auto s : w.scores.at(0))
    total += s;
  EXPECT_NEAR(d.at("attention_mass"), mass / total, 1e-12);
  EXPECT_NEAR(d.at("sum_of_distances"),
              oracle::pair_sum(oracle::points_of(w.hidden.at(0)), picks.kept, oracle::cosine_dist),
              1e-9);
  EXPECT_EQ(d.at("kept_count"), 4.0);
}

TEST(TraceStageSource, MissingLayerIsReported) {
  Trace t;
  t.manifest = make_manifest(ModelDims{4, 4, 1, 8, 2}, TokenLayout(0, 4, 1, 2, 2), {});
  const auto source = trace_stage_source(t);
  const std::vector<std::size_t> s{0, 1, 2, 3};
  try {
    source(2, s);
    FAIL();
  } catch (const ValidationError &e) {
    EXPECT_NE(std::string(e.what()).find("layer 2"), std::string::npos) << e.what();
  }
}
