#pragma once

// Small seeded decoder used as a pruning testbed. Each block follows
//   X' = X + Attn(LN1(X)) + MLP(LN2(Attn(LN1(X)) + X))
// with causal softmax attention scaled by 1/sqrt(head_dim) and a gated SiLU
// MLP (gate, up, down). All math is float32, sums run sequentially.

#include <algorithm>
#include <bit>
#include <numeric>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "btp/trace_io.hpp"
#include "btp/types.hpp"
#include "btp/vector_ops.hpp"

namespace btp {

struct ToyConfig {
  std::size_t num_layers = 4;
  std::size_t hidden = 32;
  std::size_t heads = 4;
  std::size_t mlp = 64;
  std::uint64_t seed = 0;
  // Rescale every per-head value vector to `value_norm`.
  bool equal_value_norms = false;
  float value_norm = 1.0f;
  // Multiplier on the query projection init range; > 1 sharpens attention.
  float qk_gain = 1.0f;
  // Every layer reuses layer 0's query/key projections, so attention
  // patterns persist with depth.
  bool shared_qk = false;

  std::size_t head_dim() const { return hidden / heads; }

  ModelDims dims() const { return {num_layers, hidden, heads, mlp, 2}; }

  void validate() const {
    if (num_layers == 0 || hidden == 0 || heads == 0 || mlp == 0)
      fail_validation("toy config: all extents must be positive");
    if (hidden % heads != 0)
      fail_validation("toy config: hidden ", hidden, " not divisible by heads ",
                      heads);
    if (equal_value_norms && !(value_norm > 0.0f))
      fail_validation("toy config: value_norm must be positive");
    if (!(qk_gain > 0.0f))
      fail_validation("toy config: qk_gain must be positive");
  }
};

/// Row-major [rows x cols] float matrix used for weights and activations.
struct Matrix {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<float> data;

  Matrix() = default;
  Matrix(std::size_t r, std::size_t c) : rows(r), cols(c), data(r * c, 0.0f) {}

  float *row(std::size_t r) { return data.data() + r * cols; }
  const float *row(std::size_t r) const { return data.data() + r * cols; }
  float &operator()(std::size_t r, std::size_t c) { return data[r * cols + c]; }
  float operator()(std::size_t r, std::size_t c) const { return data[r * cols + c]; }

  TensorBlob to_blob(std::string name) const {
    return TensorBlob::matrix(std::move(name), rows, cols, data);
  }

  static Matrix from_blob(const TensorBlob &blob) {
    Matrix m(blob.rows(), blob.cols());
    std::copy(blob.data().begin(), blob.data().end(), m.data.begin());
    return m;
  }
};

struct LayerWeights {
  std::vector<float> ln1_gain, ln1_bias, ln2_gain, ln2_bias;
  Matrix wq, wk, wv, wo;       // [d x d]
  Matrix w_gate, w_up;         // [d x m]
  Matrix w_down;               // [m x d]
};

struct ToyWeights {
  ToyConfig config;
  std::vector<LayerWeights> layers;
};

/// Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) weights from a 64-bit seed;
/// layer norms start at gain 1, bias 0. Draw order is fixed, so shared_qk
/// only overwrites and never shifts the other weights.
inline ToyWeights init_toy_weights(const ToyConfig &cfg) {
  cfg.validate();
  std::mt19937_64 rng(cfg.seed);
  const auto fill = [&rng](std::size_t rows, std::size_t cols) {
    Matrix m(rows, cols);
    const float a = 1.0f / std::sqrt(static_cast<float>(rows));
    std::uniform_real_distribution<float> dist(-a, a);
    for (auto &v : m.data)
      v = dist(rng);
    return m;
  };
  ToyWeights w{cfg, {}};
  const auto d = cfg.hidden, m = cfg.mlp;
  for (std::size_t l = 0; l < cfg.num_layers; ++l) {
    LayerWeights lw;
    lw.ln1_gain.assign(d, 1.0f);
    lw.ln1_bias.assign(d, 0.0f);
    lw.ln2_gain.assign(d, 1.0f);
    lw.ln2_bias.assign(d, 0.0f);
    lw.wq = fill(d, d);
    for (auto &v : lw.wq.data)
      v *= cfg.qk_gain;
    lw.wk = fill(d, d);
    if (cfg.shared_qk && l > 0) {
      lw.wq = w.layers[0].wq;
      lw.wk = w.layers[0].wk;
    }
    lw.wv = fill(d, d);
    lw.wo = fill(d, d);
    lw.w_gate = fill(d, m);
    lw.w_up = fill(d, m);
    lw.w_down = fill(m, d);
    w.layers.push_back(std::move(lw));
  }
  return w;
}

/// Sinusoidal encoding for an absolute sequence position.
inline std::vector<float> positional_encoding(std::size_t position, std::size_t d) {
  std::vector<float> pe(d);
  for (std::size_t i = 0; i < d; ++i) {
    const double expo = static_cast<double>(2 * (i / 2)) / static_cast<double>(d);
    const double angle = static_cast<double>(position) / std::pow(10000.0, expo);
    pe[i] = static_cast<float>(i % 2 == 0 ? std::sin(angle) : std::cos(angle));
  }
  return pe;
}

namespace toy {

inline constexpr float kLayerNormEps = 1e-5f;

inline Matrix layer_norm(const Matrix &x, const std::vector<float> &gain,
                         const std::vector<float> &bias) {
  Matrix out(x.rows, x.cols);
  const float n = static_cast<float>(x.cols);
  for (std::size_t r = 0; r < x.rows; ++r) {
    const float *in = x.row(r);
    float mean = 0.0f;
    for (std::size_t c = 0; c < x.cols; ++c)
      mean += in[c];
    mean /= n;
    float var = 0.0f;
    for (std::size_t c = 0; c < x.cols; ++c)
      var += (in[c] - mean) * (in[c] - mean);
    var /= n;
    const float inv = 1.0f / std::sqrt(var + kLayerNormEps);
    float *o = out.row(r);
    for (std::size_t c = 0; c < x.cols; ++c)
      o[c] = (in[c] - mean) * inv * gain[c] + bias[c];
  }
  return out;
}

inline Matrix matmul(const Matrix &a, const Matrix &b) {
  Matrix out(a.rows, b.cols);
  for (std::size_t r = 0; r < a.rows; ++r) {
    float *o = out.row(r);
    for (std::size_t c = 0; c < b.cols; ++c) {
      float acc = 0.0f;
      for (std::size_t k = 0; k < a.cols; ++k)
        acc += a(r, k) * b(k, c);
      o[c] = acc;
    }
  }
  return out;
}

inline float silu(float x) { return x / (1.0f + std::exp(-x)); }

} // namespace toy

/// Everything one forward pass exposes per layer. Row i of hidden[l],
/// values[l] and the columns of attention[l] refer to original sequence
/// position positions[l][i].
struct ForwardRecord {
  TokenLayout layout;
  ToyConfig config;
  std::vector<TensorBlob> hidden;                      // L+1 entries, [n_l x d]
  std::vector<TensorBlob> attention;                   // L entries, [heads x n_l]
  std::vector<TensorBlob> values;                      // L entries, [n_l x d]
  std::vector<std::vector<std::size_t>> positions;     // L+1 entries

  std::size_t num_layers() const { return attention.size(); }

  /// Row of `position` in hidden[index], if that token survives there.
  std::optional<std::size_t> row_of(std::size_t index, std::size_t position) const {
    const auto &pos = positions.at(index);
    auto it = std::lower_bound(pos.begin(), pos.end(), position);
    if (it == pos.end() || *it != position)
      return std::nullopt;
    return static_cast<std::size_t>(it - pos.begin());
  }

  /// Image-relative indices alive at hidden[index].
  std::vector<std::size_t> image_survivors(std::size_t index) const {
    std::vector<std::size_t> out;
    for (auto p : positions.at(index))
      if (p >= layout.image_begin() && p < layout.image_end())
        out.push_back(p - layout.image_begin());
    return out;
  }

  bool bit_equal(const ForwardRecord &o) const {
    const auto same = [](const std::vector<TensorBlob> &a,
                         const std::vector<TensorBlob> &b) {
      if (a.size() != b.size())
        return false;
      for (std::size_t i = 0; i < a.size(); ++i)
        if (!a[i].bit_equal(b[i]))
          return false;
      return true;
    };
    return layout == o.layout && positions == o.positions &&
           same(hidden, o.hidden) && same(attention, o.attention) &&
           same(values, o.values);
  }

  /// Copy with one value row at `layer` multiplied by `factor`.
  ForwardRecord with_value_row_scaled(std::size_t layer, std::size_t row,
                                      float factor) const {
    ForwardRecord copy = *this;
    const auto &v = values.at(layer);
    std::vector<float> data(v.data().begin(), v.data().end());
    for (std::size_t c = 0; c < v.cols(); ++c)
      data[row * v.cols() + c] *= factor;
    copy.values[layer] = TensorBlob(v.name(), v.shape(), std::move(data));
    return copy;
  }
};

/// State handed to the pruning hook after layer `layer` has run.
struct LayerView {
  std::size_t layer = 0;
  const TokenLayout *layout = nullptr;
  const TensorBlob *hidden_in = nullptr;   // X^(l), rows aligned with positions
  const TensorBlob *attention = nullptr;   // [heads x n_l], last query row
  const std::vector<std::size_t> *positions = nullptr;

  std::vector<std::size_t> image_survivors() const {
    std::vector<std::size_t> out;
    for (auto p : *positions)
      if (p >= layout->image_begin() && p < layout->image_end())
        out.push_back(p - layout->image_begin());
    return out;
  }
};

/// Returns the image-relative indices to keep after `layer`, or nullopt to
/// leave the sequence untouched.
using PruneHook =
    std::function<std::optional<std::vector<std::size_t>>(const LayerView &)>;

namespace toy {

inline void check_finite(const Matrix &m, std::size_t layer, const char *what) {
  for (auto v : m.data)
    if (!std::isfinite(v))
      fail_validation("toy forward: non-finite ", what, " at layer ", layer);
}

} // namespace toy

inline ForwardRecord forward(const TensorBlob &inputs, const TokenLayout &layout,
                             const ToyWeights &weights, const PruneHook &hook = {}) {
  const auto &cfg = weights.config;
  cfg.validate();
  if (weights.layers.size() != cfg.num_layers)
    fail_validation("toy forward: weights carry ", weights.layers.size(),
                    " layers, config says ", cfg.num_layers);
  if (inputs.rows() != layout.total() || inputs.cols() != cfg.hidden)
    fail_validation("toy forward: inputs ", shape_string(inputs.shape()),
                    " do not match [", layout.total(), ",", cfg.hidden, "]");
  for (auto v : inputs.data())
    if (!std::isfinite(v))
      fail_validation("toy forward: non-finite input");

  const std::size_t d = cfg.hidden, heads = cfg.heads, hd = cfg.head_dim();
  const float scale = 1.0f / std::sqrt(static_cast<float>(hd));

  ForwardRecord rec;
  rec.layout = layout;
  rec.config = cfg;
  std::vector<std::size_t> positions(layout.total());
  std::iota(positions.begin(), positions.end(), 0);

  Matrix x(layout.total(), d);
  for (std::size_t r = 0; r < x.rows; ++r) {
    const auto pe = positional_encoding(r, d);
    const auto in = inputs.row(r);
    for (std::size_t c = 0; c < d; ++c)
      x(r, c) = in[c] + pe[c];
  }

  for (std::size_t l = 0; l < cfg.num_layers; ++l) {
    const auto &w = weights.layers[l];
    const std::size_t n = x.rows;
    rec.hidden.push_back(x.to_blob(hidden_name(l)));
    rec.positions.push_back(positions);

    const Matrix h1 = toy::layer_norm(x, w.ln1_gain, w.ln1_bias);
    const Matrix q = toy::matmul(h1, w.wq);
    const Matrix k = toy::matmul(h1, w.wk);
    Matrix v = toy::matmul(h1, w.wv);
    if (cfg.equal_value_norms) {
      for (std::size_t r = 0; r < n; ++r) {
        for (std::size_t h = 0; h < heads; ++h) {
          float *seg = v.row(r) + h * hd;
          float sq = 0.0f;
          for (std::size_t c = 0; c < hd; ++c)
            sq += seg[c] * seg[c];
          const float norm = std::sqrt(sq);
          if (norm > 0.0f)
            for (std::size_t c = 0; c < hd; ++c)
              seg[c] = seg[c] / norm * cfg.value_norm;
        }
      }
    }

    Matrix attn_out(n, d);
    Matrix last_row(heads, n);
    std::vector<float> probs(n);
    for (std::size_t h = 0; h < heads; ++h) {
      const std::size_t off = h * hd;
      for (std::size_t i = 0; i < n; ++i) {
        float max_logit = -INFINITY;
        for (std::size_t j = 0; j <= i; ++j) {
          float dot = 0.0f;
          for (std::size_t c = 0; c < hd; ++c)
            dot += q(i, off + c) * k(j, off + c);
          probs[j] = dot * scale;
          max_logit = std::max(max_logit, probs[j]);
        }
        float denom = 0.0f;
        for (std::size_t j = 0; j <= i; ++j) {
          probs[j] = std::exp(probs[j] - max_logit);
          denom += probs[j];
        }
        for (std::size_t j = 0; j <= i; ++j)
          probs[j] /= denom;
        for (std::size_t c = 0; c < hd; ++c) {
          float acc = 0.0f;
          for (std::size_t j = 0; j <= i; ++j)
            acc += probs[j] * v(j, off + c);
          attn_out(i, off + c) = acc;
        }
        if (i + 1 == n)
          for (std::size_t j = 0; j < n; ++j)
            last_row(h, j) = probs[j];
      }
    }
    const Matrix a = toy::matmul(attn_out, w.wo);
    Matrix mlp_in(n, d);
    for (std::size_t i = 0; i < n * d; ++i)
      mlp_in.data[i] = a.data[i] + x.data[i];
    const Matrix h2 = toy::layer_norm(mlp_in, w.ln2_gain, w.ln2_bias);
    const Matrix gate = toy::matmul(h2, w.w_gate);
    Matrix up = toy::matmul(h2, w.w_up);
    for (std::size_t i = 0; i < up.data.size(); ++i)
      up.data[i] = toy::silu(gate.data[i]) * up.data[i];
    const Matrix down = toy::matmul(up, w.w_down);

    Matrix next(n, d);
    for (std::size_t i = 0; i < n * d; ++i)
      next.data[i] = x.data[i] + a.data[i] + down.data[i];
    toy::check_finite(next, l, "hidden state");

    rec.attention.push_back(last_row.to_blob(attention_name(l)));
    rec.values.push_back(v.to_blob("values_l" + std::to_string(l)));

    if (hook) {
      const LayerView view{l, &layout, &rec.hidden.back(), &rec.attention.back(),
                           &rec.positions.back()};
      if (auto kept = hook(view)) {
        auto survivors = view.image_survivors();
        std::vector<bool> keep_image(layout.n_image(), false);
        for (auto idx : *kept) {
          if (!std::binary_search(survivors.begin(), survivors.end(), idx))
            fail_validation("toy forward: hook at layer ", l,
                            " kept image token ", idx, " which is not a survivor");
          keep_image[idx] = true;
        }
        std::vector<std::size_t> rows;
        std::vector<std::size_t> new_positions;
        for (std::size_t r = 0; r < n; ++r) {
          const auto p = positions[r];
          const bool image = p >= layout.image_begin() && p < layout.image_end();
          if (!image || keep_image[p - layout.image_begin()]) {
            rows.push_back(r);
            new_positions.push_back(p);
          }
        }
        if (rows.size() != n) {
          Matrix reduced(rows.size(), d);
          for (std::size_t r = 0; r < rows.size(); ++r)
            std::copy(next.row(rows[r]), next.row(rows[r]) + d, reduced.row(r));
          next = std::move(reduced);
          positions = std::move(new_positions);
        }
      }
    }
    x = std::move(next);
  }
  rec.hidden.push_back(x.to_blob(hidden_name(cfg.num_layers)));
  rec.positions.push_back(positions);
  return rec;
}

enum class OutputMetric { cosine_similarity, euclidean };

/// Mean metric between two records' outputs of `layer` (hidden[layer + 1])
/// over the given original sequence positions.
inline double layer_output_distance(const ForwardRecord &a, const ForwardRecord &b,
                                    std::size_t layer,
                                    std::span<const std::size_t> positions,
                                    OutputMetric metric) {
  if (layer >= a.num_layers() || layer >= b.num_layers())
    fail_validation("layer_output_distance: layer ", layer, " out of range");
  if (positions.empty())
    fail_validation("layer_output_distance: no positions to compare");
  const auto &ha = a.hidden[layer + 1];
  const auto &hb = b.hidden[layer + 1];
  double acc = 0.0;
  for (auto p : positions) {
    const auto ra = a.row_of(layer + 1, p);
    const auto rb = b.row_of(layer + 1, p);
    if (!ra || !rb)
      fail_validation("layer_output_distance: position ", p,
                      " not present in both records after layer ", layer);
    if (metric == OutputMetric::cosine_similarity) {
      const double na = vec::norm(ha.row(*ra)), nb = vec::norm(hb.row(*rb));
      if (na == 0.0 || nb == 0.0)
        fail_validation("layer_output_distance: zero-norm hidden state at ", p);
      acc += vec::dot(ha.row(*ra), hb.row(*rb)) / (na * nb);
    } else {
      acc += vec::euclidean(ha.row(*ra), hb.row(*rb));
    }
  }
  return acc / static_cast<double>(positions.size());
}

/// Positions of the text segment, which pruning never removes.
inline std::vector<std::size_t> text_positions(const TokenLayout &layout) {
  std::vector<std::size_t> out(layout.n_text());
  std::iota(out.begin(), out.end(), layout.text_begin());
  return out;
}

struct OptimalityCheck {
  double topk_error = 0.0;
  double best_error = 0.0;
  std::vector<std::size_t> topk_set;
  std::vector<std::size_t> best_set;
  double value_norm_dispersion = 0.0;

  double relative_gap() const {
    const double denom = std::max(std::abs(best_error), 1e-30);
    return (topk_error - best_error) / denom;
  }
};

inline constexpr std::size_t kOptimalityMaxImage = 12;

/// Compares keeping the last token's attention top-k image tokens against
/// the best size-k subset. The error of a kept set is the worst-case change
/// of the last token's attention output, sum over heads and dropped image
/// tokens of attention weight times value-row norm.
inline OptimalityCheck single_layer_optimality_check(const ForwardRecord &rec,
                                                     std::size_t layer,
                                                     std::size_t k) {
  if (layer >= rec.num_layers())
    fail_validation("single_layer_optimality_check: layer ", layer, " out of range");
  const auto &attn = rec.attention[layer];
  const auto &values = rec.values[layer];
  const auto heads = rec.config.heads, hd = rec.config.head_dim();
  const auto &pos = rec.positions[layer];
  std::vector<std::size_t> image_rows;
  for (std::size_t r = 0; r < pos.size(); ++r)
    if (pos[r] >= rec.layout.image_begin() && pos[r] < rec.layout.image_end())
      image_rows.push_back(r);
  const std::size_t n = image_rows.size();
  if (n > kOptimalityMaxImage)
    throw OracleError("single_layer_optimality_check: " + std::to_string(n) +
                      " image tokens exceeds the exhaustive limit of " +
                      std::to_string(kOptimalityMaxImage));
  if (k > n)
    fail_validation("single_layer_optimality_check: k=", k, " exceeds ", n,
                    " image tokens");

  // cost[i]: error contributed by dropping image token i.
  std::vector<double> cost(n, 0.0), score(n, 0.0);
  std::vector<double> norms;
  for (std::size_t i = 0; i < n; ++i) {
    const auto row = values.row(image_rows[i]);
    for (std::size_t h = 0; h < heads; ++h) {
      const double a = attn.at(h, image_rows[i]);
      const double nv = vec::norm(row.subspan(h * hd, hd));
      norms.push_back(nv);
      cost[i] += a * nv;
      score[i] += a;
    }
    score[i] /= static_cast<double>(heads);
  }
  const auto error_of = [&](const std::vector<bool> &kept) {
    double e = 0.0;
    for (std::size_t i = 0; i < n; ++i)
      if (!kept[i])
        e += cost[i];
    return e;
  };

  OptimalityCheck out;
  if (norms.size() >= 2) {
    double mean = 0.0;
    for (auto v : norms)
      mean += v;
    mean /= static_cast<double>(norms.size());
    double var = 0.0;
    for (auto v : norms)
      var += (v - mean) * (v - mean);
    out.value_norm_dispersion =
        mean > 0.0 ? std::sqrt(var / static_cast<double>(norms.size())) / mean : 0.0;
  }

  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return score[a] > score[b]; });
  std::vector<bool> kept(n, false);
  for (std::size_t i = 0; i < k; ++i) {
    kept[order[i]] = true;
    out.topk_set.push_back(order[i]);
  }
  std::sort(out.topk_set.begin(), out.topk_set.end());
  out.topk_error = error_of(kept);

  out.best_error = INFINITY;
  for (std::uint32_t mask = 0; mask < (1u << n); ++mask) {
    if (static_cast<std::size_t>(std::popcount(mask)) != k)
      continue;
    std::vector<bool> sel(n);
    for (std::size_t i = 0; i < n; ++i)
      sel[i] = (mask >> i) & 1u;
    const double e = error_of(sel);
    if (e < out.best_error) {
      out.best_error = e;
      out.best_set.clear();
      for (std::size_t i = 0; i < n; ++i)
        if (sel[i])
          out.best_set.push_back(i);
    }
  }
  return out;
}

// Weight and record (de)serialization through trace directories.

inline std::map<std::string, TensorBlob> weight_tensors(const ToyWeights &w) {
  std::map<std::string, TensorBlob> out;
  const auto vecblob = [](std::string name, const std::vector<float> &v) {
    return TensorBlob(std::move(name), Shape{v.size()}, v);
  };
  for (std::size_t l = 0; l < w.layers.size(); ++l) {
    const auto p = "l" + std::to_string(l) + ".";
    const auto &lw = w.layers[l];
    const auto put = [&](const std::string &n, TensorBlob b) {
      out.emplace(p + n, b.renamed(p + n));
    };
    put("ln1_gain", vecblob("", lw.ln1_gain));
    put("ln1_bias", vecblob("", lw.ln1_bias));
    put("ln2_gain", vecblob("", lw.ln2_gain));
    put("ln2_bias", vecblob("", lw.ln2_bias));
    put("wq", lw.wq.to_blob(""));
    put("wk", lw.wk.to_blob(""));
    put("wv", lw.wv.to_blob(""));
    put("wo", lw.wo.to_blob(""));
    put("w_gate", lw.w_gate.to_blob(""));
    put("w_up", lw.w_up.to_blob(""));
    put("w_down", lw.w_down.to_blob(""));
  }
  return out;
}

inline void save_toy_weights(const std::filesystem::path &dir, const ToyWeights &w,
                             const TokenLayout &layout) {
  write_trace(dir, w.config.dims(), layout, weight_tensors(w));
}

inline ToyWeights load_toy_weights(const Trace &trace, bool equal_value_norms = false,
                                   float value_norm = 1.0f) {
  const auto &dims = trace.manifest.model_dims;
  ToyWeights w;
  w.config.num_layers = dims.num_layers;
  w.config.hidden = dims.hidden;
  w.config.heads = dims.heads;
  w.config.mlp = dims.mlp;
  w.config.equal_value_norms = equal_value_norms;
  w.config.value_norm = value_norm;
  w.config.validate();
  const auto d = dims.hidden, m = dims.mlp;
  for (std::size_t l = 0; l < dims.num_layers; ++l) {
    const auto p = "l" + std::to_string(l) + ".";
    const auto mat = [&](const std::string &n, std::size_t r, std::size_t c) {
      const auto &b = trace.tensor(p + n);
      if (b.rows() != r || b.cols() != c)
        fail_format("toy weights: '", p + n, "' has shape ", shape_string(b.shape()));
      return Matrix::from_blob(b);
    };
    const auto vecf = [&](const std::string &n) {
      const auto &b = trace.tensor(p + n);
      if (b.size() != d)
        fail_format("toy weights: '", p + n, "' has shape ", shape_string(b.shape()));
      return std::vector<float>(b.data().begin(), b.data().end());
    };
    LayerWeights lw;
    lw.ln1_gain = vecf("ln1_gain");
    lw.ln1_bias = vecf("ln1_bias");
    lw.ln2_gain = vecf("ln2_gain");
    lw.ln2_bias = vecf("ln2_bias");
    lw.wq = mat("wq", d, d);
    lw.wk = mat("wk", d, d);
    lw.wv = mat("wv", d, d);
    lw.wo = mat("wo", d, d);
    lw.w_gate = mat("w_gate", d, m);
    lw.w_up = mat("w_up", d, m);
    lw.w_down = mat("w_down", m, d);
    w.layers.push_back(std::move(lw));
  }
  return w;
}

/// Tensors of a record: hidden_l{i}, attn_l{i}, values_l{i}, positions_l{i}.
inline std::map<std::string, TensorBlob> record_tensors(const ForwardRecord &rec) {
  std::map<std::string, TensorBlob> out;
  for (const auto &h : rec.hidden)
    out.emplace(h.name(), h);
  for (const auto &a : rec.attention)
    out.emplace(a.name(), a);
  for (const auto &v : rec.values)
    out.emplace(v.name(), v);
  for (std::size_t i = 0; i < rec.positions.size(); ++i) {
    const auto name = "positions_l" + std::to_string(i);
    std::vector<float> p(rec.positions[i].begin(), rec.positions[i].end());
    const Shape shape{p.size()};
    out.emplace(name, TensorBlob(name, shape, std::move(p)));
  }
  return out;
}

inline void export_record(const std::filesystem::path &dir, const ForwardRecord &rec) {
  write_trace(dir, rec.config.dims(), rec.layout, record_tensors(rec));
}

} // namespace btp
