#pragma once

#include <cmath>
#include <cstddef>
#include <span>

namespace btp::vec {

// Accumulation runs sequentially in double over the hidden axis.

inline double dot(std::span<const float> a, std::span<const float> b) {
  double acc = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i)
    acc += static_cast<double>(a[i]) * static_cast<double>(b[i]);
  return acc;
}

inline double norm(std::span<const float> a) { return std::sqrt(dot(a, a)); }

inline double euclidean(std::span<const float> a, std::span<const float> b) {
  double acc = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double d = static_cast<double>(a[i]) - static_cast<double>(b[i]);
    acc += d * d;
  }
  return std::sqrt(acc);
}

inline double manhattan(std::span<const float> a, std::span<const float> b) {
  double acc = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i)
    acc += std::abs(static_cast<double>(a[i]) - static_cast<double>(b[i]));
  return acc;
}

/// Caller guarantees both norms are non-zero.
inline double cosine(std::span<const float> a, std::span<const float> b) {
  return dot(a, b) / (norm(a) * norm(b));
}

} // namespace btp::vec
