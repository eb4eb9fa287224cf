#pragma once

#include <cstdint>
#include <map>
#include <numeric>
#include <string>
#include <vector>

#include "btp/types.hpp"

namespace btp {

// Attention plus MLP FLOPs of one decoder layer over n tokens:
// 4nd^2 + 2n^2d + 3ndm.
inline double layer_flops(double n, const ModelDims &dims) {
  const double d = static_cast<double>(dims.hidden);
  const double m = static_cast<double>(dims.mlp);
  return 4.0 * n * d * d + 2.0 * n * n * d + 3.0 * n * d * m;
}

struct CostReport {
  double tflops = 0.0;
  std::uint64_t kv_bytes = 0;
  // Layer-weighted mean of surviving image tokens.
  double avg_tokens = 0.0;
  std::vector<std::size_t> per_layer_tokens;
  std::vector<std::size_t> per_layer_image_tokens;
};

namespace detail {

inline void check_schedule_fits(const PruningSchedule &schedule,
                                const ModelDims &dims) {
  dims.validate();
  for (const auto &s : schedule.stages())
    if (s.layer >= dims.num_layers)
      fail_validation("cost model: stage at layer ", s.layer, " but model has ",
                      dims.num_layers, " layers");
}

inline std::vector<std::size_t> image_tokens_per_layer(const TokenLayout &layout,
                                                       const PruningSchedule &schedule,
                                                       const ModelDims &dims) {
  check_schedule_fits(schedule, dims);
  return PruningSchedule(schedule.stages(), dims.num_layers)
      .image_tokens_per_layer(layout.n_image());
}

} // namespace detail

inline std::uint64_t kv_cache_bytes(const TokenLayout &layout,
                                    const PruningSchedule &schedule,
                                    const ModelDims &dims) {
  std::uint64_t total = 0;
  for (auto img : detail::image_tokens_per_layer(layout, schedule, dims)) {
    const std::uint64_t tokens = layout.non_image() + img;
    total += 2 * tokens * dims.hidden * dims.kv_bytes_per_elem;
  }
  return total;
}

inline CostReport schedule_flops(const TokenLayout &layout,
                                 const PruningSchedule &schedule,
                                 const ModelDims &dims) {
  CostReport report;
  report.per_layer_image_tokens = detail::image_tokens_per_layer(layout, schedule, dims);
  double flops = 0.0;
  double image_sum = 0.0;
  for (auto img : report.per_layer_image_tokens) {
    const auto n = layout.non_image() + img;
    report.per_layer_tokens.push_back(n);
    flops += layer_flops(static_cast<double>(n), dims);
    image_sum += static_cast<double>(img);
  }
  report.tflops = flops / 1e12;
  report.avg_tokens = image_sum / static_cast<double>(dims.num_layers);
  report.kv_bytes = kv_cache_bytes(layout, schedule, dims);
  return report;
}

/// Mean of per-task pruned/original ratios, as a percentage.
inline double performance_gain(const std::map<std::string, double> &pruned,
                               const std::map<std::string, double> &original) {
  if (original.empty())
    fail_validation("performance_gain: no tasks");
  if (pruned.size() != original.size())
    fail_validation("performance_gain: task sets differ in size");
  double acc = 0.0;
  for (const auto &[task, base] : original) {
    auto it = pruned.find(task);
    if (it == pruned.end())
      fail_validation("performance_gain: task '", task, "' missing from pruned scores");
    if (!(base > 0.0))
      fail_validation("performance_gain: original score for '", task,
                      "' must be positive");
    acc += it->second / base;
  }
  return 100.0 * acc / static_cast<double>(original.size());
}

} // namespace btp
