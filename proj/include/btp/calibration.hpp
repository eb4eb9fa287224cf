#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <numeric>
#include <optional>
#include <set>
#include <vector>

#include "btp/types.hpp"
#include "btp/vector_ops.hpp"

namespace btp {

inline constexpr double kDefaultTau = 0.93;
inline constexpr std::size_t kDefaultCalibrationSize = 64;

struct ShiftEntry {
  std::size_t layer = 0;
  // Tokens whose cosine similarity between this layer's input and output
  // fell below tau, summed over calibration samples.
  std::size_t shifted_count = 0;
  std::optional<double> attention_to_image;

  friend bool operator==(const ShiftEntry &, const ShiftEntry &) = default;
};

struct ShiftProfile {
  std::vector<ShiftEntry> per_layer;
  std::size_t n_image = 0;
  std::size_t samples = 0;

  std::size_t num_layers() const { return per_layer.size(); }

  double mean_count() const {
    if (per_layer.empty())
      return 0.0;
    double acc = 0.0;
    for (const auto &e : per_layer)
      acc += static_cast<double>(e.shifted_count);
    return acc / static_cast<double>(per_layer.size());
  }

  friend bool operator==(const ShiftProfile &, const ShiftProfile &) = default;
};

/// Per-layer shift counts for one sample. `hidden_per_layer[l]` holds the
/// image-token hidden states entering layer l ([n_image x d]); the last entry
/// is the final output, so L+1 entries yield L profile layers.
inline ShiftProfile shift_profile(std::span<const TensorBlob> hidden_per_layer,
                                  double tau = kDefaultTau) {
  if (hidden_per_layer.size() < 3)
    fail_validation("shift_profile: need at least 3 hidden-state layers, got ",
                    hidden_per_layer.size());
  if (!(tau > 0.0 && tau <= 1.0))
    fail_validation("shift_profile: tau ", tau, " outside (0, 1]");
  const auto n = hidden_per_layer.front().rows();
  const auto d = hidden_per_layer.front().cols();
  for (std::size_t l = 0; l < hidden_per_layer.size(); ++l) {
    if (hidden_per_layer[l].rows() != n || hidden_per_layer[l].cols() != d)
      fail_validation("shift_profile: layer ", l, " has shape ",
                      shape_string(hidden_per_layer[l].shape()), ", expected [",
                      n, ",", d, "]");
  }
  std::vector<std::vector<double>> norms(hidden_per_layer.size(),
                                         std::vector<double>(n));
  for (std::size_t l = 0; l < hidden_per_layer.size(); ++l) {
    for (std::size_t i = 0; i < n; ++i) {
      norms[l][i] = vec::norm(hidden_per_layer[l].row(i));
      if (norms[l][i] == 0.0)
        fail_validation("shift_profile: zero-norm hidden state at layer ", l,
                        " token ", i);
    }
  }
  ShiftProfile profile;
  profile.n_image = n;
  profile.samples = 1;
  for (std::size_t l = 0; l + 1 < hidden_per_layer.size(); ++l) {
    std::size_t shifted = 0;
    for (std::size_t i = 0; i < n; ++i) {
      const double cos = vec::dot(hidden_per_layer[l].row(i),
                                  hidden_per_layer[l + 1].row(i)) /
                         (norms[l][i] * norms[l + 1][i]);
      if (cos < tau)
        ++shifted;
    }
    profile.per_layer.push_back({l, shifted, std::nullopt});
  }
  return profile;
}

/// Sums `other` into `acc`. Counts add exactly, so any sample order gives the
/// same profile.
inline void accumulate_profile(ShiftProfile &acc, const ShiftProfile &other) {
  if (acc.per_layer.empty()) {
    acc = other;
    return;
  }
  if (acc.per_layer.size() != other.per_layer.size() || acc.n_image != other.n_image)
    fail_validation("accumulate_profile: profiles cover different layers or "
                    "token counts");
  for (std::size_t l = 0; l < acc.per_layer.size(); ++l) {
    acc.per_layer[l].shifted_count += other.per_layer[l].shifted_count;
    const auto &a = acc.per_layer[l].attention_to_image;
    const auto &b = other.per_layer[l].attention_to_image;
    if (a || b)
      acc.per_layer[l].attention_to_image = a.value_or(0.0) + b.value_or(0.0);
  }
  acc.samples += other.samples;
}

struct LayerChoice {
  std::vector<std::size_t> layers;
  std::vector<std::size_t> peaks;
  bool fallback = false;
};

namespace detail {

inline std::vector<std::size_t> even_subdivision(std::size_t begin,
                                                 std::size_t end,
                                                 std::size_t count) {
  std::vector<std::size_t> out;
  for (std::size_t i = 1; i <= count; ++i)
    out.push_back(begin + (end - begin) * i / (count + 1));
  return out;
}

} // namespace detail

/// Shift peaks are strict local maxima over a 3-layer window whose count
/// exceeds the profile mean. Pruning goes on the layer right after each peak.
inline std::vector<std::size_t> shift_peaks(const ShiftProfile &profile) {
  const auto &p = profile.per_layer;
  const double mean = profile.mean_count();
  std::vector<std::size_t> peaks;
  for (std::size_t i = 0; i < p.size(); ++i) {
    const auto c = p[i].shifted_count;
    const bool left = i == 0 || c > p[i - 1].shifted_count;
    const bool right = i + 1 == p.size() || c > p[i + 1].shifted_count;
    if (left && right && static_cast<double>(c) > mean)
      peaks.push_back(p[i].layer);
  }
  return peaks;
}

inline LayerChoice select_pruning_layers(const ShiftProfile &profile,
                                         std::size_t num_stages,
                                         std::size_t min_gap = 1,
                                         std::optional<std::size_t> num_layers = {}) {
  if (num_stages == 0)
    fail_validation("select_pruning_layers: num_stages must be positive");
  if (profile.per_layer.empty())
    fail_validation("select_pruning_layers: empty profile");
  const std::size_t depth = num_layers.value_or(profile.num_layers());
  if (num_stages >= depth)
    fail_validation("select_pruning_layers: ", num_stages,
                    " stages do not fit in ", depth, " layers");

  LayerChoice choice;
  auto peaks = shift_peaks(profile);
  std::stable_sort(peaks.begin(), peaks.end(), [&](std::size_t a, std::size_t b) {
    return profile.per_layer[a].shifted_count > profile.per_layer[b].shifted_count;
  });
  const auto far_enough = [&](std::size_t layer) {
    for (auto l : choice.layers) {
      const auto gap = layer > l ? layer - l : l - layer;
      if (gap < std::max<std::size_t>(min_gap, 1))
        return false;
    }
    return true;
  };
  for (auto peak : peaks) {
    if (choice.layers.size() == num_stages)
      break;
    const auto layer = peak + 1;
    if (layer >= depth || !far_enough(layer))
      continue;
    choice.layers.push_back(layer);
    choice.peaks.push_back(peak);
  }

  if (choice.layers.empty()) {
    choice.fallback = true;
    choice.layers = detail::even_subdivision(0, depth, num_stages);
    return choice;
  }
  std::sort(choice.layers.begin(), choice.layers.end());
  if (choice.layers.size() < num_stages) {
    // Pad by evenly subdividing the depth below the deepest chosen layer.
    const auto missing = num_stages - choice.layers.size();
    for (auto l : detail::even_subdivision(choice.layers.back(), depth, missing)) {
      if (l < depth && far_enough(l))
        choice.layers.push_back(l);
    }
    std::sort(choice.layers.begin(), choice.layers.end());
    if (choice.layers.size() < num_stages)
      fail_validation("select_pruning_layers: could not place ", num_stages,
                      " stages with min_gap ", min_gap, " in ", depth, " layers");
  }
  return choice;
}

inline PruningSchedule build_schedule(std::span<const std::size_t> layers,
                                      std::span<const double> retention,
                                      std::span<const double> lambdas,
                                      std::size_t num_layers) {
  if (layers.size() != retention.size() || layers.size() != lambdas.size())
    fail_validation("build_schedule: ", layers.size(), " layers, ",
                    retention.size(), " retentions, ", lambdas.size(),
                    " lambdas");
  std::vector<PruningStage> stages;
  for (std::size_t i = 0; i < layers.size(); ++i)
    stages.push_back({layers[i], retention[i], lambdas[i]});
  return PruningSchedule(std::move(stages), num_layers);
}

} // namespace btp
