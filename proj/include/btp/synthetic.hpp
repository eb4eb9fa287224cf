#pragma once

// Seeded synthetic calibration traces with planted representation shifts.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <map>
#include <numeric>
#include <random>
#include <vector>

#include "btp/calibration.hpp"
#include "btp/trace_io.hpp"
#include "btp/types.hpp"

namespace btp {

/// layer -> number of image tokens whose hidden state rotates past tau there.
using ShiftPattern = std::map<std::size_t, std::size_t>;

/// Shift counts observed on a 32-layer, 576-token decoder (peak at layer 9),
/// rescaled to n_image tokens and shifted so the dominant peak sits at
/// `dominant_layer`. Layers that fall outside [0, num_layers) are dropped.
inline ShiftPattern reference_shift_pattern(std::size_t n_image,
                                            std::size_t num_layers,
                                            std::size_t dominant_layer = 9) {
  static const std::map<int, std::size_t> kObserved = {
      {9, 325}, {13, 141}, {17, 155}, {21, 45}, {25, 1}};
  ShiftPattern out;
  const int offset = static_cast<int>(dominant_layer) - 9;
  for (const auto &[layer, count] : kObserved) {
    const int l = layer + offset;
    if (l < 0 || l >= static_cast<int>(num_layers))
      continue;
    const auto scaled = static_cast<std::size_t>(std::llround(
        static_cast<double>(count) * static_cast<double>(n_image) / 576.0));
    if (scaled > 0)
      out[static_cast<std::size_t>(l)] = std::min(scaled, n_image);
  }
  return out;
}

struct SyntheticCalibrationConfig {
  std::size_t n_image = 144;
  std::size_t hidden = 16;
  std::size_t num_layers = 32;
  double tau = kDefaultTau;
  // Relative per-sample jitter applied to each planted count.
  double jitter = 0.1;
};

namespace detail {

// Rotates v by `angle` towards a random direction orthogonal to it, then
// rescales to a random positive norm.
inline void rotate_row(std::span<float> v, double angle, std::mt19937_64 &rng) {
  std::normal_distribution<double> normal(0.0, 1.0);
  std::uniform_real_distribution<double> scale(0.5, 2.0);
  const std::size_t d = v.size();
  double vn = 0.0;
  for (auto x : v)
    vn += static_cast<double>(x) * x;
  vn = std::sqrt(vn);
  std::vector<double> u(d);
  double un = 0.0;
  while (un < 1e-6) {
    for (auto &x : u)
      x = normal(rng);
    double proj = 0.0;
    for (std::size_t i = 0; i < d; ++i)
      proj += u[i] * v[i] / vn;
    for (std::size_t i = 0; i < d; ++i)
      u[i] -= proj * v[i] / vn;
    un = 0.0;
    for (auto x : u)
      un += x * x;
    un = std::sqrt(un);
  }
  const double s = scale(rng);
  for (std::size_t i = 0; i < d; ++i)
    v[i] = static_cast<float>(s * (std::cos(angle) * v[i] +
                                   std::sin(angle) * vn * u[i] / un));
}

} // namespace detail

/// Hidden states entering each layer plus the final output (num_layers + 1
/// blobs of [n_image x hidden]) for one calibration sample.
inline std::vector<TensorBlob> synthetic_calibration_sample(
    const SyntheticCalibrationConfig &cfg, const ShiftPattern &pattern,
    std::uint64_t seed) {
  if (cfg.hidden < 2)
    fail_validation("synthetic calibration: hidden must be at least 2");
  std::mt19937_64 rng(seed);
  std::normal_distribution<float> normal(0.0f, 1.0f);
  std::vector<float> state(cfg.n_image * cfg.hidden);
  for (auto &v : state)
    v = normal(rng);

  // Shifted tokens rotate well past acos(tau); the rest drift well inside it.
  const double limit = std::acos(cfg.tau);
  const double big = std::min(limit * 2.0 + 0.2, 3.0);
  const double small = limit * 0.3;
  std::uniform_real_distribution<double> unit(-1.0, 1.0);

  std::vector<TensorBlob> layers;
  std::vector<std::size_t> order(cfg.n_image);
  for (std::size_t l = 0; l <= cfg.num_layers; ++l) {
    layers.push_back(TensorBlob::matrix(hidden_name(l), cfg.n_image, cfg.hidden, state));
    if (l == cfg.num_layers)
      break;
    std::size_t count = 0;
    if (auto it = pattern.find(l); it != pattern.end() && it->second > 0) {
      const double jittered =
          static_cast<double>(it->second) * (1.0 + cfg.jitter * unit(rng));
      count = std::min<std::size_t>(
          cfg.n_image, static_cast<std::size_t>(std::max(1.0, std::round(jittered))));
    }
    std::iota(order.begin(), order.end(), 0);
    std::shuffle(order.begin(), order.end(), rng);
    for (std::size_t i = 0; i < cfg.n_image; ++i) {
      std::span<float> row(state.data() + order[i] * cfg.hidden, cfg.hidden);
      detail::rotate_row(row, i < count ? big : small, rng);
    }
  }
  return layers;
}

/// Summed shift profile over `samples` seeded synthetic samples, starting at
/// sample index `first`.
inline ShiftProfile synthetic_profile(const SyntheticCalibrationConfig &cfg,
                                      const ShiftPattern &pattern,
                                      std::uint64_t seed, std::size_t first,
                                      std::size_t samples) {
  ShiftProfile acc;
  for (std::size_t s = first; s < first + samples; ++s) {
    const auto sample = synthetic_calibration_sample(cfg, pattern, seed * 1000003u + s);
    accumulate_profile(acc, shift_profile(sample, cfg.tau));
  }
  return acc;
}

} // namespace btp
