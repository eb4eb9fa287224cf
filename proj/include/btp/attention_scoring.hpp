#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <numeric>
#include <optional>
#include <string>
#include <vector>

#include "btp/types.hpp"
#include "btp/vector_ops.hpp"

namespace btp {

enum class ScoreMethod { last_token, averaged_tokens, similarity_based };

inline std::string to_string(ScoreMethod m) {
  switch (m) {
  case ScoreMethod::last_token:
    return "last_token";
  case ScoreMethod::averaged_tokens:
    return "averaged_tokens";
  case ScoreMethod::similarity_based:
    return "similarity_based";
  }
  return "unknown";
}

/// Per-image-token importance, in image-segment order.
struct ImportanceScores {
  std::size_t layer = 0;
  std::vector<double> scores;
  ScoreMethod method = ScoreMethod::last_token;

  std::size_t size() const { return scores.size(); }
};

namespace detail {

inline void check_attention_row(std::span<const float> row,
                                const TokenLayout &layout, std::size_t index,
                                const std::string &what) {
  if (row.size() != layout.total())
    fail_validation(what, ": row ", index, " has length ", row.size(),
                    ", layout expects ", layout.total());
  for (std::size_t j = 0; j < row.size(); ++j) {
    if (!(row[j] >= 0.0f))
      fail_validation(what, ": row ", index, " position ", j,
                      " is negative or NaN; expected softmaxed attention");
  }
}

inline std::vector<double> mean_image_slice(const TensorBlob &rows,
                                            std::span<const std::size_t> picks,
                                            const TokenLayout &layout) {
  std::vector<double> acc(layout.n_image(), 0.0);
  for (auto r : picks) {
    auto row = rows.row(r);
    for (std::size_t i = 0; i < layout.n_image(); ++i)
      acc[i] += row[layout.image_begin() + i];
  }
  const double m = static_cast<double>(picks.size());
  for (auto &v : acc)
    v /= m;
  return acc;
}

} // namespace detail

/// Image slice of the final prompt token's attention row. A [heads x seq]
/// input is averaged over heads first.
inline ImportanceScores importance_last_token(const TensorBlob &attn,
                                              const TokenLayout &layout,
                                              std::size_t layer) {
  if (attn.cols() != layout.total())
    fail_validation("importance_last_token: row length ", attn.cols(),
                    " != layout total ", layout.total());
  std::vector<std::size_t> heads(attn.rows());
  std::iota(heads.begin(), heads.end(), 0);
  for (auto h : heads)
    detail::check_attention_row(attn.row(h), layout, h, "importance_last_token");
  ImportanceScores out{layer, {}, ScoreMethod::last_token};
  if (heads.size() == 1) {
    auto row = attn.row(0);
    out.scores.assign(row.begin() + static_cast<std::ptrdiff_t>(layout.image_begin()),
                      row.begin() + static_cast<std::ptrdiff_t>(layout.image_end()));
  } else {
    out.scores = detail::mean_image_slice(attn, heads, layout);
  }
  return out;
}

/// Mean over text-token attention rows ([m x seq]), image slice.
inline ImportanceScores importance_averaged(const TensorBlob &attn_rows,
                                            const TokenLayout &layout,
                                            std::size_t layer) {
  if (attn_rows.rows() == 0)
    fail_validation("importance_averaged: no text rows");
  std::vector<std::size_t> all(attn_rows.rows());
  std::iota(all.begin(), all.end(), 0);
  for (auto r : all)
    detail::check_attention_row(attn_rows.row(r), layout, r,
                                "importance_averaged");
  return {layer, detail::mean_image_slice(attn_rows, all, layout),
          ScoreMethod::averaged_tokens};
}

/// Text tokens ranked by their best cosine match against any image token;
/// the attention rows of the top_t are averaged.
inline ImportanceScores importance_similarity(const TensorBlob &text_hidden,
                                              const TensorBlob &image_hidden,
                                              const TensorBlob &attn_rows,
                                              const TokenLayout &layout,
                                              std::size_t top_t,
                                              std::size_t layer = 0) {
  const std::size_t m = text_hidden.rows();
  if (m == 0 || attn_rows.rows() != m)
    fail_validation("importance_similarity: ", attn_rows.rows(),
                    " attention rows for ", m, " text tokens");
  if (top_t == 0 || top_t > m)
    fail_validation("importance_similarity: top_t=", top_t, " outside [1, ", m,
                    "]");
  if (image_hidden.rows() != layout.n_image())
    fail_validation("importance_similarity: ", image_hidden.rows(),
                    " image rows, layout has ", layout.n_image());
  if (image_hidden.cols() != text_hidden.cols())
    fail_validation("importance_similarity: hidden width mismatch");
  for (std::size_t r = 0; r < m; ++r)
    detail::check_attention_row(attn_rows.row(r), layout, r,
                                "importance_similarity");

  std::vector<double> image_norms(image_hidden.rows());
  for (std::size_t i = 0; i < image_hidden.rows(); ++i) {
    image_norms[i] = vec::norm(image_hidden.row(i));
    if (image_norms[i] == 0.0)
      fail_validation("importance_similarity: image token ", i,
                      " has zero-norm hidden state");
  }
  std::vector<double> best(m);
  for (std::size_t t = 0; t < m; ++t) {
    const auto text = text_hidden.row(t);
    const double tn = vec::norm(text);
    if (tn == 0.0)
      fail_validation("importance_similarity: text token ", t,
                      " has zero-norm hidden state");
    double b = -2.0;
    for (std::size_t i = 0; i < image_hidden.rows(); ++i)
      b = std::max(b, vec::dot(text, image_hidden.row(i)) / (tn * image_norms[i]));
    best[t] = b;
  }
  std::vector<std::size_t> order(m);
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return best[a] > best[b]; });
  order.resize(top_t);
  return {layer, detail::mean_image_slice(attn_rows, order, layout),
          ScoreMethod::similarity_based};
}

/// Indices sorted by descending score, ties broken by ascending index.
inline std::vector<std::size_t> rank_descending(std::span<const double> scores) {
  std::vector<std::size_t> order(scores.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    return scores[a] > scores[b];
  });
  return order;
}

inline std::vector<std::size_t> top_k(std::span<const double> scores,
                                      std::size_t k) {
  if (k > scores.size())
    fail_validation("top_k: k=", k, " exceeds N=", scores.size());
  auto order = rank_descending(scores);
  order.resize(k);
  return order;
}

/// Over-selection pool: k plus a quarter, capped at N. A pool of 2k would
/// equal N at 50% retention and reduce rebalancing to "keep the early half".
inline std::size_t default_k_prime(std::size_t k, std::size_t n) {
  return std::min(k + (k + 3) / 4, n);
}

/// Over-selects the top k_prime, then keeps early-half candidates first
/// (index < floor(N/2)) and fills the remainder from the late half.
inline std::vector<std::size_t> rebalanced_topk(std::span<const double> scores,
                                                std::size_t k,
                                                std::size_t k_prime) {
  const std::size_t n = scores.size();
  if (k == 0)
    fail_validation("rebalanced_topk: k must be positive");
  if (k > n)
    fail_validation("rebalanced_topk: k=", k, " exceeds N=", n);
  if (k_prime < k)
    fail_validation("rebalanced_topk: k'=", k_prime, " < k=", k);
  if (k_prime > n)
    fail_validation("rebalanced_topk: k'=", k_prime, " exceeds N=", n);

  const std::size_t split = n / 2;
  const auto pool = top_k(scores, k_prime);
  std::vector<std::size_t> result;
  result.reserve(k);
  for (auto i : pool) {
    if (i < split && result.size() < k)
      result.push_back(i);
  }
  for (auto i : pool) {
    if (result.size() == k)
      break;
    if (i >= split)
      result.push_back(i);
  }
  return result;
}

inline std::vector<std::size_t> rebalanced_topk(const ImportanceScores &scores,
                                                std::size_t k,
                                                std::optional<std::size_t> k_prime = {}) {
  return rebalanced_topk(scores.scores, k,
                         k_prime.value_or(default_k_prime(k, scores.size())));
}

/// Share of total attention captured by the k highest-scoring tokens.
inline double attention_mass_ratio(std::span<const double> scores,
                                   std::size_t k) {
  if (k > scores.size())
    fail_validation("attention_mass_ratio: k=", k, " exceeds N=", scores.size());
  const double total = std::accumulate(scores.begin(), scores.end(), 0.0);
  if (!(total > 0.0))
    fail_validation("attention_mass_ratio: scores sum to zero");
  double top = 0.0;
  for (auto i : top_k(scores, k))
    top += scores[i];
  return top / total;
}

inline double attention_mass_ratio(const ImportanceScores &scores,
                                   std::size_t k) {
  return attention_mass_ratio(scores.scores, k);
}

/// Coefficient of variation (population std / mean) of row norms.
inline double value_norm_dispersion(const TensorBlob &values) {
  const std::size_t n = values.rows();
  if (n < 2)
    fail_validation("value_norm_dispersion: need at least 2 rows, got ", n);
  std::vector<double> norms(n);
  for (std::size_t i = 0; i < n; ++i)
    norms[i] = vec::norm(values.row(i));
  const double mean = std::accumulate(norms.begin(), norms.end(), 0.0) /
                      static_cast<double>(n);
  if (!(mean > 0.0))
    fail_validation("value_norm_dispersion: mean norm is zero");
  double var = 0.0;
  for (auto v : norms)
    var += (v - mean) * (v - mean);
  var /= static_cast<double>(n);
  return std::sqrt(var) / mean;
}

} // namespace btp
