#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <limits>
#include <numeric>
#include <optional>
#include <string>
#include <vector>

#include "btp/types.hpp"
#include "btp/vector_ops.hpp"

namespace btp {

enum class Metric { manhattan, euclidean, cosine_distance };

inline std::string to_string(Metric m) {
  switch (m) {
  case Metric::manhattan:
    return "manhattan";
  case Metric::euclidean:
    return "euclidean";
  case Metric::cosine_distance:
    return "cosine_distance";
  }
  return "unknown";
}

inline Metric metric_from_string(const std::string &s) {
  if (s == "manhattan")
    return Metric::manhattan;
  if (s == "euclidean")
    return Metric::euclidean;
  if (s == "cosine" || s == "cosine_distance")
    return Metric::cosine_distance;
  fail_validation("unknown metric '", s, "'");
}

enum class SeedRule { spatial_first_point, farthest_from_centroid };

inline std::string to_string(SeedRule r) {
  return r == SeedRule::spatial_first_point ? "spatial_first_point"
                                            : "farthest_from_centroid";
}

inline SeedRule seed_rule_from_string(const std::string &s) {
  if (s == "spatial_first_point")
    return SeedRule::spatial_first_point;
  if (s == "farthest_from_centroid")
    return SeedRule::farthest_from_centroid;
  fail_validation("unknown seed rule '", s, "'");
}

struct DiversityConfig {
  Metric spatial_metric = Metric::manhattan;
  Metric semantic_metric = Metric::cosine_distance;
  SeedRule seed_rule = SeedRule::spatial_first_point;
  // Share of a stage's diversity quota seeded from the spatial grid order.
  double spatial_seed_fraction = 0.25;

  void validate() const {
    if (spatial_metric == Metric::cosine_distance)
      fail_validation("diversity config: spatial metric must be manhattan or "
                      "euclidean");
    if (semantic_metric == Metric::manhattan)
      fail_validation("diversity config: semantic metric must be "
                      "cosine_distance or euclidean");
    if (!(spatial_seed_fraction >= 0.0 && spatial_seed_fraction <= 1.0))
      fail_validation("diversity config: spatial_seed_fraction outside [0, 1]");
  }
};

/// Symmetric pairwise distance table over the rows of a matrix.
class DistanceMatrix {
public:
  DistanceMatrix(const TensorBlob &points, Metric metric) : n_(points.rows()) {
    std::vector<double> norms;
    if (metric == Metric::cosine_distance) {
      norms.resize(n_);
      for (std::size_t i = 0; i < n_; ++i) {
        norms[i] = vec::norm(points.row(i));
        if (norms[i] == 0.0)
          fail_validation("cosine distance: row ", i, " of '", points.name(),
                          "' has zero norm");
      }
    }
    table_.assign(n_ * n_, 0.0);
    for (std::size_t i = 0; i < n_; ++i) {
      for (std::size_t j = i + 1; j < n_; ++j) {
        double d = 0.0;
        switch (metric) {
        case Metric::manhattan:
          d = vec::manhattan(points.row(i), points.row(j));
          break;
        case Metric::euclidean:
          d = vec::euclidean(points.row(i), points.row(j));
          break;
        case Metric::cosine_distance:
          d = 1.0 - vec::dot(points.row(i), points.row(j)) / (norms[i] * norms[j]);
          break;
        }
        table_[i * n_ + j] = d;
        table_[j * n_ + i] = d;
      }
    }
  }

  std::size_t size() const { return n_; }
  double operator()(std::size_t i, std::size_t j) const {
    return table_[i * n_ + j];
  }

private:
  std::size_t n_;
  std::vector<double> table_;
};

/// Grid cell coordinates as a [rows*cols x 2] matrix, row-major cell order.
inline TensorBlob grid_coordinates(std::size_t grid_rows, std::size_t grid_cols) {
  std::vector<float> coords;
  coords.reserve(grid_rows * grid_cols * 2);
  for (std::size_t r = 0; r < grid_rows; ++r) {
    for (std::size_t c = 0; c < grid_cols; ++c) {
      coords.push_back(static_cast<float>(r));
      coords.push_back(static_cast<float>(c));
    }
  }
  return TensorBlob::matrix("grid", grid_rows * grid_cols, 2, std::move(coords));
}

namespace detail {

// Greedy dispersion over a precomputed table. `chosen` is extended in place
// until it holds k entries. Ties go to the lowest index.
inline void greedy_extend(const DistanceMatrix &dist, std::vector<std::size_t> &chosen,
                          std::size_t k) {
  const std::size_t n = dist.size();
  std::vector<double> nearest(n, std::numeric_limits<double>::infinity());
  std::vector<bool> taken(n, false);
  for (auto c : chosen) {
    taken[c] = true;
    for (std::size_t i = 0; i < n; ++i)
      nearest[i] = std::min(nearest[i], dist(i, c));
  }
  while (chosen.size() < k) {
    std::size_t best = n;
    double best_value = -1.0;
    for (std::size_t i = 0; i < n; ++i) {
      if (taken[i])
        continue;
      if (best == n || nearest[i] > best_value) {
        best = i;
        best_value = nearest[i];
      }
    }
    chosen.push_back(best);
    taken[best] = true;
    for (std::size_t i = 0; i < n; ++i)
      nearest[i] = std::min(nearest[i], dist(i, best));
  }
}

} // namespace detail

/// Full greedy max-min visiting order of a grid, seeded at cell (0,0).
/// Used to seed diversity picks; prefixes are dispersed but not optimal.
inline std::vector<std::size_t> spatial_order(std::size_t grid_rows,
                                              std::size_t grid_cols,
                                              Metric metric) {
  if (metric == Metric::cosine_distance)
    fail_validation("spatial_init: metric must be manhattan or euclidean");
  const DistanceMatrix dist(grid_coordinates(grid_rows, grid_cols), metric);
  std::vector<std::size_t> chosen{0};
  detail::greedy_extend(dist, chosen, dist.size());
  return chosen;
}

inline std::size_t farthest_from_centroid(const TensorBlob &candidates) {
  const std::size_t n = candidates.rows();
  const std::size_t d = candidates.cols();
  std::vector<double> centroid(d, 0.0);
  for (std::size_t i = 0; i < n; ++i) {
    auto row = candidates.row(i);
    for (std::size_t c = 0; c < d; ++c)
      centroid[c] += row[c];
  }
  for (auto &v : centroid)
    v /= static_cast<double>(n);
  std::size_t best = 0;
  double best_value = -1.0;
  for (std::size_t i = 0; i < n; ++i) {
    auto row = candidates.row(i);
    double acc = 0.0;
    for (std::size_t c = 0; c < d; ++c) {
      const double diff = row[c] - centroid[c];
      acc += diff * diff;
    }
    if (acc > best_value) {
      best = i;
      best_value = acc;
    }
  }
  return best;
}

/// Greedy max-min dispersion. Extends `initial` (kept as a prefix) or the
/// seed chosen by `seed_rule` until k indices are selected.
inline std::vector<std::size_t>
greedy_maxmin(const TensorBlob &candidates, std::size_t k, Metric metric,
              const std::optional<std::vector<std::size_t>> &initial = {},
              SeedRule seed_rule = SeedRule::spatial_first_point) {
  const std::size_t n = candidates.rows();
  if (k > n)
    fail_validation("greedy_maxmin: k=", k, " exceeds N=", n);
  std::vector<std::size_t> chosen;
  if (initial) {
    if (initial->size() > k)
      fail_validation("greedy_maxmin: initial set of ", initial->size(),
                      " exceeds k=", k);
    std::vector<bool> seen(n, false);
    for (auto i : *initial) {
      if (i >= n)
        fail_validation("greedy_maxmin: initial index ", i, " out of range");
      if (seen[i])
        fail_validation("greedy_maxmin: duplicate initial index ", i);
      seen[i] = true;
    }
    chosen = *initial;
  }
  // Validates cosine inputs even when nothing is left to pick.
  const DistanceMatrix dist(candidates, metric);
  if (k == 0)
    return chosen;
  if (chosen.empty()) {
    chosen.push_back(seed_rule == SeedRule::farthest_from_centroid
                         ? farthest_from_centroid(candidates)
                         : 0);
  }
  detail::greedy_extend(dist, chosen, k);
  return chosen;
}

inline double sum_of_distances(const DistanceMatrix &dist,
                               std::span<const std::size_t> subset) {
  double acc = 0.0;
  for (std::size_t a = 0; a < subset.size(); ++a)
    for (std::size_t b = a + 1; b < subset.size(); ++b)
      acc += dist(subset[a], subset[b]);
  return acc;
}

/// Sum over unordered pairs of the subset. Empty or singleton gives 0.
inline double sum_of_distances(const TensorBlob &candidates,
                               std::span<const std::size_t> subset,
                               Metric metric) {
  for (auto i : subset)
    if (i >= candidates.rows())
      fail_validation("sum_of_distances: index ", i, " out of range");
  if (subset.size() < 2)
    return 0.0;
  return sum_of_distances(DistanceMatrix(candidates.gather_rows(subset), metric),
                          [&] {
                            std::vector<std::size_t> local(subset.size());
                            std::iota(local.begin(), local.end(), 0);
                            return local;
                          }());
}

/// Minimum pairwise distance; +infinity for fewer than two elements.
inline double min_pairwise_distance(const DistanceMatrix &dist,
                                    std::span<const std::size_t> subset) {
  double best = std::numeric_limits<double>::infinity();
  for (std::size_t a = 0; a < subset.size(); ++a)
    for (std::size_t b = a + 1; b < subset.size(); ++b)
      best = std::min(best, dist(subset[a], subset[b]));
  return best;
}

inline double min_pairwise_distance(const TensorBlob &candidates,
                                    std::span<const std::size_t> subset,
                                    Metric metric) {
  for (auto i : subset)
    if (i >= candidates.rows())
      fail_validation("min_pairwise_distance: index ", i, " out of range");
  if (subset.size() < 2)
    return std::numeric_limits<double>::infinity();
  std::vector<std::size_t> local(subset.size());
  std::iota(local.begin(), local.end(), 0);
  return min_pairwise_distance(
      DistanceMatrix(candidates.gather_rows(subset), metric), local);
}

inline double binomial(std::size_t n, std::size_t k) {
  if (k > n)
    return 0.0;
  k = std::min(k, n - k);
  double acc = 1.0;
  for (std::size_t i = 1; i <= k; ++i)
    acc = acc * static_cast<double>(n - k + i) / static_cast<double>(i);
  return std::round(acc);
}

inline constexpr double kBruteForceGuard = 1e6;

struct MaxMinOptimum {
  double min_distance = 0.0;
  std::vector<std::size_t> subset;
};

/// Exhaustive max-min dispersion over all C(N, k) subsets. Subsets are
/// visited in lexicographic order and only a strictly better value replaces
/// the incumbent, so the lexicographically first optimum is returned.
inline MaxMinOptimum brute_force_maxmin(const TensorBlob &candidates,
                                        std::size_t k, Metric metric,
                                        double guard = kBruteForceGuard) {
  const std::size_t n = candidates.rows();
  if (k == 0 || k > n)
    fail_validation("brute_force_maxmin: k=", k, " outside [1, ", n, "]");
  const double count = binomial(n, k);
  if (count > guard)
    throw OracleError("brute_force_maxmin: C(" + std::to_string(n) + ", " +
                      std::to_string(k) + ") = " + std::to_string(count) +
                      " subsets exceeds the guard of " + std::to_string(guard));
  const DistanceMatrix dist(candidates, metric);
  std::vector<std::size_t> current(k);
  std::iota(current.begin(), current.end(), 0);
  MaxMinOptimum best{-1.0, {}};
  while (true) {
    const double value = min_pairwise_distance(dist, current);
    if (best.subset.empty() || value > best.min_distance) {
      best.min_distance = value;
      best.subset = current;
    }
    // Advance to the next combination in lexicographic order.
    std::size_t i = k;
    while (i > 0 && current[i - 1] == n - k + i - 1)
      --i;
    if (i == 0)
      break;
    ++current[i - 1];
    for (std::size_t j = i; j < k; ++j)
      current[j] = current[j - 1] + 1;
  }
  return best;
}


namespace detail {

// Lexicographically first k-subset whose pairwise distances are all >= t.
inline bool dispersed_subset(const DistanceMatrix &dist, std::size_t k, double t,
                             std::vector<std::size_t> &out) {
  const std::size_t n = dist.size();
  out.clear();
  // Explicit stack: out[depth] is the candidate at that depth.
  std::size_t next = 0;
  while (true) {
    if (out.size() == k)
      return true;
    bool placed = false;
    for (std::size_t i = next; i + (k - out.size()) <= n; ++i) {
      bool ok = true;
      for (auto c : out) {
        if (dist(i, c) < t) {
          ok = false;
          break;
        }
      }
      if (ok) {
        out.push_back(i);
        next = i + 1;
        placed = true;
        break;
      }
    }
    if (placed)
      continue;
    if (out.empty())
      return false;
    next = out.back() + 1;
    out.pop_back();
  }
}

// Exact max-min dispersion: binary search over the distinct pairwise
// distances, each probe a pruned depth-first feasibility search.
inline MaxMinOptimum exact_dispersion(const DistanceMatrix &dist, std::size_t k) {
  const std::size_t n = dist.size();
  if (k == 1)
    return {std::numeric_limits<double>::infinity(), {0}};
  std::vector<double> levels;
  levels.reserve(n * (n - 1) / 2);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = i + 1; j < n; ++j)
      levels.push_back(dist(i, j));
  std::sort(levels.begin(), levels.end());
  levels.erase(std::unique(levels.begin(), levels.end()), levels.end());
  // Smallest level is always feasible; find the largest feasible one.
  std::size_t lo = 0, hi = levels.size() - 1;
  std::vector<std::size_t> probe;
  while (lo < hi) {
    const std::size_t mid = lo + (hi - lo + 1) / 2;
    if (dispersed_subset(dist, k, levels[mid], probe))
      lo = mid;
    else
      hi = mid - 1;
  }
  MaxMinOptimum best{levels[lo], {}};
  dispersed_subset(dist, k, levels[lo], best.subset);
  return best;
}

} // namespace detail

/// Spatially dispersed k cells of the image grid (flattened row-major,
/// ascending). Solved exactly while C(N, k) stays within the brute-force
/// guard, otherwise the greedy prefix of spatial_order.
inline std::vector<std::size_t> spatial_init(std::size_t grid_rows,
                                             std::size_t grid_cols,
                                             std::size_t k, Metric metric) {
  const std::size_t n = grid_rows * grid_cols;
  if (k == 0 || k > n)
    fail_validation("spatial_init: k=", k, " outside [1, ", n, "]");
  if (metric == Metric::cosine_distance)
    fail_validation("spatial_init: metric must be manhattan or euclidean");
  if (binomial(n, k) <= kBruteForceGuard) {
    const DistanceMatrix dist(grid_coordinates(grid_rows, grid_cols), metric);
    return detail::exact_dispersion(dist, k).subset;
  }
  auto order = spatial_order(grid_rows, grid_cols, metric);
  order.resize(k);
  return order;
}

} // namespace btp
