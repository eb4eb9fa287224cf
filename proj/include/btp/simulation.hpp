#pragma once

// Runs staged selection inside the toy decoder: at each scheduled layer the
// hook scores survivors with the live last-token attention and prunes before
// the next layer.

#include <random>
#include <string>
#include <vector>

#include "btp/staged_selector.hpp"
#include "btp/toy_transformer.hpp"

namespace btp {

/// Stage inputs from the live forward state: head-averaged last-token
/// attention on each surviving image token and its input hidden state.
inline StageInputs stage_inputs_from_view(const LayerView &view) {
  const auto &layout = *view.layout;
  const auto &attn = *view.attention;
  std::vector<std::size_t> survivors;
  std::vector<std::size_t> rows;
  std::vector<double> scores;
  for (std::size_t r = 0; r < view.positions->size(); ++r) {
    const auto p = (*view.positions)[r];
    if (p < layout.image_begin() || p >= layout.image_end())
      continue;
    survivors.push_back(p - layout.image_begin());
    rows.push_back(r);
    double acc = 0.0;
    for (std::size_t h = 0; h < attn.rows(); ++h)
      acc += attn.at(h, r);
    scores.push_back(acc / static_cast<double>(attn.rows()));
  }
  return make_stage_inputs(view.layer, std::move(survivors), std::move(scores),
                           view.hidden_in->gather_rows(rows, "survivor_hidden"),
                           layout);
}

struct SimulationRun {
  ForwardRecord record;
  SelectionResult selection;
};

inline SimulationRun simulate_schedule(const TensorBlob &inputs,
                                       const TokenLayout &layout,
                                       const ToyWeights &weights,
                                       const PruningSchedule &schedule,
                                       const DiversityConfig &cfg = {},
                                       const KPrimeRule &k_prime_rule = default_k_prime) {
  if (schedule.num_layers() != weights.config.num_layers)
    fail_validation("simulate: schedule covers ", schedule.num_layers(),
                    " layers, model has ", weights.config.num_layers);
  StagedPruner pruner(schedule, layout, cfg, k_prime_rule);
  const PruneHook hook = [&pruner](const LayerView &view)
      -> std::optional<std::vector<std::size_t>> {
    const auto stage = pruner.pending_stage();
    if (!stage || stage->layer != view.layer)
      return std::nullopt;
    if (pruner.survivors().empty())
      return pruner.apply_empty().kept;
    return pruner.apply(stage_inputs_from_view(view)).kept;
  };
  SimulationRun run{forward(inputs, layout, weights, hook), {}};
  run.selection = pruner.result();
  return run;
}

/// Same layers and retentions with every lambda replaced.
inline PruningSchedule with_uniform_lambda(const PruningSchedule &schedule,
                                           double lambda) {
  auto stages = schedule.stages();
  for (auto &s : stages)
    s.lambda = lambda;
  return PruningSchedule(std::move(stages), schedule.num_layers());
}

/// Seeded N(0, scale^2) embeddings for the toy model.
inline TensorBlob random_inputs(const TokenLayout &layout, std::size_t hidden,
                                std::uint64_t seed, float scale = 1.0f) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<float> dist(0.0f, scale);
  std::vector<float> data(layout.total() * hidden);
  for (auto &v : data)
    v = dist(rng);
  return TensorBlob::matrix("inputs", layout.total(), hidden, std::move(data));
}

} // namespace btp
