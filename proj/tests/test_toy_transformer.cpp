#include <gtest/gtest.h>

#include <cmath>
#include <cstring>
#include <filesystem>
#include <random>

#include "btp/btp.hpp"
#include "oracles.hpp"

using namespace btp;
namespace fs = std::filesystem;

namespace {

ToyConfig small_config(std::uint64_t seed = 1) {
  ToyConfig c;
  c.num_layers = 4;
  c.hidden = 16;
  c.heads = 4;
  c.mlp = 32;
  c.seed = seed;
  return c;
}

const TokenLayout kLayout(3, 16, 5, 4, 4);

bool rows_bit_equal(const TensorBlob &a, std::size_t ra, const TensorBlob &b, std::size_t rb) {
  const auto x = a.row(ra), y = b.row(rb);
  return x.size() == y.size() && std::memcmp(x.data(), y.data(), x.size() * 4) == 0;
}

fs::path scratch(const std::string &tag) {
  std::random_device rd;
  auto p = fs::temp_directory_path() / ("btp-toy-" + tag + "-" + std::to_string(rd()));
  fs::remove_all(p);
  return p;
}

} // namespace

TEST(ToyWeights, SeedDeterminesWeights) {
  const auto a = init_toy_weights(small_config(5));
  const auto b = init_toy_weights(small_config(5));
  const auto c = init_toy_weights(small_config(6));
  EXPECT_EQ(a.layers[2].w_up.data, b.layers[2].w_up.data);
  EXPECT_NE(a.layers[2].w_up.data, c.layers[2].w_up.data);
  const float bound = 1.0f / std::sqrt(16.0f);
  for (auto v : a.layers[0].wq.data)
    EXPECT_LE(std::fabs(v), bound);
}

TEST(ToyWeights, QkOptions) {
  auto cfg = small_config(9);
  const auto base = init_toy_weights(cfg);
  cfg.qk_gain = 4.0f;
  const auto sharp = init_toy_weights(cfg);
  for (std::size_t i = 0; i < base.layers[1].wq.data.size(); ++i)
    EXPECT_EQ(sharp.layers[1].wq.data[i], 4.0f * base.layers[1].wq.data[i]);
  EXPECT_EQ(sharp.layers[1].wv.data, base.layers[1].wv.data);
  cfg.shared_qk = true;
  const auto shared = init_toy_weights(cfg);
  for (std::size_t l = 1; l < cfg.num_layers; ++l) {
    EXPECT_EQ(shared.layers[l].wq.data, shared.layers[0].wq.data);
    EXPECT_EQ(shared.layers[l].wk.data, shared.layers[0].wk.data);
    EXPECT_EQ(shared.layers[l].w_down.data, sharp.layers[l].w_down.data);
  }
}

TEST(ToyWeights, ConfigValidation) {
  auto c = small_config();
  c.heads = 3;
  EXPECT_THROW(init_toy_weights(c), ValidationError);
  c = small_config();
  c.qk_gain = 0.0f;
  EXPECT_THROW(init_toy_weights(c), ValidationError);
  c = small_config();
  c.equal_value_norms = true;
  c.value_norm = -1.0f;
  EXPECT_THROW(init_toy_weights(c), ValidationError);
}

TEST(Forward, DeterministicAndShaped) {
  const auto w = init_toy_weights(small_config());
  const auto in = random_inputs(kLayout, 16, 3);
  const auto a = forward(in, kLayout, w);
  const auto b = forward(in, kLayout, w);
  EXPECT_TRUE(a.bit_equal(b));
  ASSERT_EQ(a.hidden.size(), 5u);
  ASSERT_EQ(a.attention.size(), 4u);
  EXPECT_EQ(a.attention[0].rows(), 4u);
  EXPECT_EQ(a.attention[0].cols(), kLayout.total());
  EXPECT_EQ(a.hidden[4].rows(), kLayout.total());
}

TEST(Forward, MatchesIndependentReference) {
  for (bool equal_norms : {false, true}) {
    auto cfg = small_config(11);
    cfg.equal_value_norms = equal_norms;
    cfg.value_norm = 2.0f;
    const auto w = init_toy_weights(cfg);
    const auto in = random_inputs(kLayout, 16, 12);
    const auto rec = forward(in, kLayout, w);
    std::vector<std::optional<std::vector<std::size_t>>> keep(4);
    EXPECT_LE(oracle::max_abs_diff(rec, oracle::reference_forward(in, kLayout, w, keep)), 1e-6);
  }
}

TEST(Forward, IdentityHookIsBitwiseNoOp) {
  const auto w = init_toy_weights(small_config(2));
  const auto in = random_inputs(kLayout, 16, 4);
  const PruneHook keep_all = [](const LayerView &v) {
    return std::optional<std::vector<std::size_t>>(v.image_survivors());
  };
  EXPECT_TRUE(forward(in, kLayout, w, keep_all).bit_equal(forward(in, kLayout, w)));
}

TEST(Forward, PrunedRunMatchesReference) {
  const auto w = init_toy_weights(small_config(3));
  const auto in = random_inputs(kLayout, 16, 5);
  const std::vector<std::size_t> first{0, 2, 5, 7, 8, 11, 14, 15}, second{2, 8, 15};
  const PruneHook hook = [&](const LayerView &v) -> std::optional<std::vector<std::size_t>> {
    if (v.layer == 0)
      return first;
    if (v.layer == 2)
      return second;
    return std::nullopt;
  };
  const auto rec = forward(in, kLayout, w, hook);
  std::vector<std::optional<std::vector<std::size_t>>> keep(4);
  keep[0] = first;
  keep[2] = second;
  EXPECT_LE(oracle::max_abs_diff(rec, oracle::reference_forward(in, kLayout, w, keep)), 1e-6);
  EXPECT_EQ(rec.image_survivors(3), second);
  EXPECT_EQ(rec.hidden[4].rows(), 3u + 3u + 5u);
}

TEST(Forward, DropAllLeavesSystemAndText) {
  const auto w = init_toy_weights(small_config(4));
  const auto in = random_inputs(kLayout, 16, 6);
  const PruningSchedule drop({{1, 0.0, 1.0}}, 4);
  const auto run = simulate_schedule(in, kLayout, w, drop);
  EXPECT_TRUE(run.record.image_survivors(2).empty());
  EXPECT_EQ(run.record.hidden[2].rows(), 8u);
  std::vector<std::optional<std::vector<std::size_t>>> keep(4);
  keep[1] = std::vector<std::size_t>{};
  EXPECT_LE(oracle::max_abs_diff(run.record, oracle::reference_forward(in, kLayout, w, keep)),
            1e-6);
}

TEST(Forward, HookMayNotResurrectTokens) {
  const auto w = init_toy_weights(small_config(4));
  const auto in = random_inputs(kLayout, 16, 6);
  const PruneHook hook = [](const LayerView &v) -> std::optional<std::vector<std::size_t>> {
    if (v.layer == 0)
      return std::vector<std::size_t>{1, 2};
    if (v.layer == 1)
      return std::vector<std::size_t>{3};
    return std::nullopt;
  };
  EXPECT_THROW(forward(in, kLayout, w, hook), ValidationError);
}

TEST(Forward, CausalMasking) {
  const auto w = init_toy_weights(small_config(7));
  const auto in = random_inputs(kLayout, 16, 8);
  std::vector<float> data(in.data().begin(), in.data().end());
  const std::size_t p = kLayout.total() - 2;
  data[p * 16 + 3] += 0.5f;
  const auto bumped = TensorBlob::matrix("inputs", kLayout.total(), 16, std::move(data));
  const auto a = forward(in, kLayout, w), b = forward(bumped, kLayout, w);
  for (std::size_t l = 0; l <= 4; ++l) {
    for (std::size_t r = 0; r < p; ++r)
      EXPECT_TRUE(rows_bit_equal(a.hidden[l], r, b.hidden[l], r)) << l << "," << r;
    EXPECT_FALSE(rows_bit_equal(a.hidden[l], p, b.hidden[l], p));
  }
}

TEST(Forward, SystemRowsIgnoreImagePruning) {
  const auto w = init_toy_weights(small_config(8));
  const auto in = random_inputs(kLayout, 16, 9);
  const auto full = forward(in, kLayout, w);
  const auto run = simulate_schedule(in, kLayout, w, PruningSchedule({{0, 0.25, 0.5}}, 4));
  for (std::size_t l = 0; l <= 4; ++l)
    for (std::size_t r = 0; r < kLayout.n_system(); ++r)
      EXPECT_TRUE(rows_bit_equal(full.hidden[l], r, run.record.hidden[l], r));
}

TEST(Forward, AttentionRowsAreDistributions) {
  const auto w = init_toy_weights(small_config(10));
  const auto rec = forward(random_inputs(kLayout, 16, 10), kLayout, w);
  for (const auto &a : rec.attention) {
    for (std::size_t h = 0; h < a.rows(); ++h) {
      double s = 0;
      for (auto v : a.row(h)) {
        EXPECT_GE(v, 0.0f);
        s += v;
      }
      EXPECT_NEAR(s, 1.0, 1e-5);
    }
  }
}

TEST(Forward, RejectsBadInputs) {
  const auto w = init_toy_weights(small_config());
  EXPECT_THROW(forward(random_inputs(kLayout, 8, 1), kLayout, w), ValidationError);
  std::vector<float> data(kLayout.total() * 16, 0.0f);
  data[5] = NAN;
  EXPECT_THROW(forward(TensorBlob::matrix("x", kLayout.total(), 16, data), kLayout, w),
               ValidationError);
}

TEST(LayerOutputDistance, SelfComparison) {
  const auto w = init_toy_weights(small_config(12));
  const auto rec = forward(random_inputs(kLayout, 16, 12), kLayout, w);
  const auto text = text_positions(kLayout);
  EXPECT_EQ(text.front(), kLayout.text_begin());
  EXPECT_EQ(text.size(), 5u);
  EXPECT_NEAR(layer_output_distance(rec, rec, 2, text, OutputMetric::cosine_similarity), 1.0,
              1e-12);
  EXPECT_EQ(layer_output_distance(rec, rec, 2, text, OutputMetric::euclidean), 0.0);
}

TEST(LayerOutputDistance, PerPositionOracle) {
  const auto w = init_toy_weights(small_config(13));
  const auto in = random_inputs(kLayout, 16, 13);
  const auto full = forward(in, kLayout, w);
  const auto run = simulate_schedule(in, kLayout, w, PruningSchedule({{0, 0.5, 0.5}}, 4));
  const auto text = text_positions(kLayout);
  const auto hf = oracle::points_of(full.hidden[2]), hp = oracle::points_of(run.record.hidden[2]);
  double eu = 0, cs = 0;
  for (auto p : text) {
    const auto &a = hf[*full.row_of(2, p)];
    const auto &b = hp[*run.record.row_of(2, p)];
    eu += oracle::euclid(a, b);
    cs += 1.0 - oracle::cosine_dist(a, b);
  }
  EXPECT_NEAR(layer_output_distance(full, run.record, 1, text, OutputMetric::euclidean),
              eu / double(text.size()), 1e-9);
  EXPECT_NEAR(layer_output_distance(full, run.record, 1, text, OutputMetric::cosine_similarity),
              cs / double(text.size()), 1e-9);
  // Pruned image positions cannot be compared.
  const std::vector<std::size_t> gone{kLayout.image_begin() + [&] {
    for (std::size_t i = 0; i < 16; ++i)
      if (!run.record.row_of(2, kLayout.image_begin() + i))
        return i;
    return std::size_t(0);
  }()};
  EXPECT_THROW(layer_output_distance(full, run.record, 1, gone, OutputMetric::euclidean),
               ValidationError);
  EXPECT_THROW(layer_output_distance(full, run.record, 4, text, OutputMetric::euclidean),
               ValidationError);
}

TEST(OptimalityCheck, MatchesOracle) {
  auto cfg = small_config(14);
  const TokenLayout layout(2, 9, 3, 3, 3);
  for (bool equal_norms : {false, true}) {
    cfg.equal_value_norms = equal_norms;
    const auto w = init_toy_weights(cfg);
    const auto rec = forward(random_inputs(layout, 16, 14), layout, w);
    for (std::size_t k = 1; k <= 8; ++k) {
      const auto chk = single_layer_optimality_check(rec, 1, k);
      const auto [topk, best] = oracle::single_layer_errors(rec, 1, k);
      EXPECT_NEAR(chk.topk_error, topk, 1e-9);
      EXPECT_NEAR(chk.best_error, best, 1e-9);
      EXPECT_LE(chk.best_error, chk.topk_error + 1e-12);
      if (equal_norms) {
        EXPECT_NEAR(chk.value_norm_dispersion, 0.0, 1e-6);
        EXPECT_LE(chk.relative_gap(), 1e-6) << k;
      }
    }
  }
}

TEST(OptimalityCheck, RefusesLargeInstances) {
  const auto w = init_toy_weights(small_config());
  const auto rec = forward(random_inputs(kLayout, 16, 1), kLayout, w);
  EXPECT_THROW(single_layer_optimality_check(rec, 0, 4), OracleError);
}

TEST(ToyWeights, SaveLoadRoundTrip) {
  auto cfg = small_config(15);
  cfg.shared_qk = true;
  cfg.qk_gain = 3.0f;
  const auto w = init_toy_weights(cfg);
  const auto dir = scratch("weights");
  save_toy_weights(dir, w, kLayout);
  const auto back = load_toy_weights(read_trace(dir));
  fs::remove_all(dir);
  const auto in = random_inputs(kLayout, 16, 15);
  EXPECT_TRUE(forward(in, kLayout, back).bit_equal(forward(in, kLayout, w)));
}

TEST(ToyRecord, ExportRoundTrip) {
  const auto w = init_toy_weights(small_config(16));
  const auto run = simulate_schedule(random_inputs(kLayout, 16, 16), kLayout, w,
                                     PruningSchedule({{1, 0.5, 0.5}}, 4));
  const auto dir = scratch("record");
  export_record(dir, run.record);
  const auto t = read_trace(dir);
  fs::remove_all(dir);
  EXPECT_TRUE(t.tensor(hidden_name(3)).bit_equal(run.record.hidden[3]));
  EXPECT_TRUE(t.tensor(attention_name(1)).bit_equal(run.record.attention[1]));
  const auto &pos = t.tensor("positions_l2");
  ASSERT_EQ(pos.size(), run.record.positions[2].size());
  for (std::size_t i = 0; i < pos.size(); ++i)
    EXPECT_EQ(std::size_t(pos.data()[i]), run.record.positions[2][i]);
}
