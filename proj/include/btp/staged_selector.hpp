#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <numeric>
#include <optional>
#include <string>
#include <vector>

#include "btp/attention_scoring.hpp"
#include "btp/diversity.hpp"
#include "btp/trace_io.hpp"
#include "btp/types.hpp"

namespace btp {

using KPrimeRule = std::function<std::size_t(std::size_t k, std::size_t n)>;

/// What a stage sees: the current survivors (original image indices,
/// ascending) with index-aligned scores, hidden rows and grid positions.
struct StageInputs {
  std::size_t layer = 0;
  std::vector<std::size_t> survivors;
  std::vector<double> scores;
  TensorBlob hidden;
  std::vector<GridPos> positions;
  TokenLayout layout;

  void validate() const {
    const auto n = survivors.size();
    if (n == 0)
      fail_validation("stage inputs at layer ", layer, ": empty survivor set");
    if (scores.size() != n || hidden.rows() != n || positions.size() != n)
      fail_validation("stage inputs at layer ", layer,
                      ": scores/hidden/positions not aligned with ", n,
                      " survivors");
    for (std::size_t i = 0; i < n; ++i) {
      if (survivors[i] >= layout.n_image())
        fail_validation("stage inputs: survivor ", survivors[i],
                        " outside the image segment");
      if (i > 0 && survivors[i] <= survivors[i - 1])
        fail_validation("stage inputs: survivors must be strictly ascending");
      if (!(positions[i] == layout.grid_pos(survivors[i])))
        fail_validation("stage inputs: grid position of survivor ",
                        survivors[i], " disagrees with the layout");
    }
  }
};

inline StageInputs make_stage_inputs(std::size_t layer,
                                     std::vector<std::size_t> survivors,
                                     std::vector<double> scores, TensorBlob hidden,
                                     const TokenLayout &layout) {
  StageInputs in{layer, std::move(survivors), std::move(scores),
                 std::move(hidden), {}, layout};
  in.positions.reserve(in.survivors.size());
  for (auto s : in.survivors)
    in.positions.push_back(layout.grid_pos(s));
  in.validate();
  return in;
}

/// Attention and diversity quotas of one stage, in original image indices.
struct StagePicks {
  std::vector<std::size_t> kept;
  std::vector<std::size_t> attention;
  std::vector<std::size_t> diversity;
};

/// round-half-up(lambda * k), capped at k.
inline std::size_t attention_quota(double lambda, std::size_t k) {
  const auto q = static_cast<std::size_t>(
      std::floor(lambda * static_cast<double>(k) + 0.5 + 1e-9));
  return std::min(q, k);
}

/// Diversity picks over the survivors not in `excluded` (local indices).
/// Seeds come from the grid's spatial order restricted to those survivors.
inline std::vector<std::size_t>
diversity_picks(const StageInputs &in, std::span<const std::size_t> excluded,
                std::size_t k_div, const DiversityConfig &cfg) {
  if (k_div == 0)
    return {};
  std::vector<bool> blocked(in.survivors.size(), false);
  for (auto e : excluded)
    blocked[e] = true;
  std::vector<std::size_t> remaining;
  for (std::size_t i = 0; i < in.survivors.size(); ++i)
    if (!blocked[i])
      remaining.push_back(i);
  if (k_div > remaining.size())
    fail_validation("diversity quota ", k_div, " exceeds ", remaining.size(),
                    " remaining survivors");

  // Original image index -> position within `remaining`.
  std::vector<std::size_t> slot(in.layout.n_image(), remaining.size());
  for (std::size_t r = 0; r < remaining.size(); ++r)
    slot[in.survivors[remaining[r]]] = r;

  std::optional<std::vector<std::size_t>> seeds;
  const auto n_seeds = static_cast<std::size_t>(
      std::ceil(cfg.spatial_seed_fraction * static_cast<double>(k_div) - 1e-9));
  if (n_seeds > 0) {
    seeds.emplace();
    for (auto cell : spatial_order(in.layout.grid_rows(), in.layout.grid_cols(),
                                   cfg.spatial_metric)) {
      if (seeds->size() == n_seeds)
        break;
      if (slot[cell] < remaining.size())
        seeds->push_back(slot[cell]);
    }
  }

  const auto pool = in.hidden.gather_rows(remaining, "diversity_pool");
  const auto local =
      greedy_maxmin(pool, k_div, cfg.semantic_metric, seeds, cfg.seed_rule);
  std::vector<std::size_t> out;
  out.reserve(local.size());
  for (auto l : local)
    out.push_back(remaining[l]);
  return out;
}

/// One BTP stage: lambda splits the budget into an attention quota filled by
/// rebalanced top-k and a diversity quota filled by greedy max-min.
inline StagePicks select_stage(const StageInputs &in, const PruningStage &stage,
                               const DiversityConfig &cfg,
                               const KPrimeRule &k_prime_rule = default_k_prime) {
  in.validate();
  cfg.validate();
  const std::size_t n = in.survivors.size();
  const std::size_t k = stage_keep_count(stage, n);
  StagePicks picks;
  if (k == 0)
    return picks;

  const std::size_t k_att = attention_quota(stage.lambda, k);
  std::vector<std::size_t> att_local;
  if (k_att > 0) {
    const std::size_t k_prime = std::clamp(k_prime_rule(k_att, n), k_att, n);
    att_local = rebalanced_topk(in.scores, k_att, k_prime);
  }
  const auto div_local = diversity_picks(in, att_local, k - k_att, cfg);

  for (auto l : att_local)
    picks.attention.push_back(in.survivors[l]);
  for (auto l : div_local)
    picks.diversity.push_back(in.survivors[l]);
  picks.kept = picks.attention;
  picks.kept.insert(picks.kept.end(), picks.diversity.begin(),
                    picks.diversity.end());
  std::sort(picks.kept.begin(), picks.kept.end());
  if (std::adjacent_find(picks.kept.begin(), picks.kept.end()) != picks.kept.end())
    fail_validation("select_stage: attention and diversity picks overlap");
  return picks;
}

/// Diagnostics of a kept set relative to the stage's survivors.
inline Diagnostics stage_diagnostics(const StageInputs &in, const StagePicks &picks,
                                     const PruningStage &stage,
                                     const DiversityConfig &cfg) {
  Diagnostics d;
  d["survivors_in"] = static_cast<double>(in.survivors.size());
  d["kept_count"] = static_cast<double>(picks.kept.size());
  d["attention_picks"] = static_cast<double>(picks.attention.size());
  d["diversity_picks"] = static_cast<double>(picks.diversity.size());
  d["lambda"] = stage.lambda;
  d["retention"] = stage.retention;

  std::vector<std::size_t> local;
  local.reserve(picks.kept.size());
  for (auto k : picks.kept) {
    auto it = std::lower_bound(in.survivors.begin(), in.survivors.end(), k);
    local.push_back(static_cast<std::size_t>(it - in.survivors.begin()));
  }
  const double total = std::accumulate(in.scores.begin(), in.scores.end(), 0.0);
  double kept_mass = 0.0;
  for (auto l : local)
    kept_mass += in.scores[l];
  d["attention_score_sum"] = kept_mass;
  d["attention_mass"] = total > 0.0 ? kept_mass / total : 0.0;

  double spread = 0.0;
  if (local.size() >= 2) {
    const DistanceMatrix dist(in.hidden.gather_rows(local), cfg.semantic_metric);
    std::vector<std::size_t> idx(local.size());
    std::iota(idx.begin(), idx.end(), 0);
    spread = sum_of_distances(dist, idx);
    d["min_pairwise_distance"] = min_pairwise_distance(dist, idx);
  }
  d["sum_of_distances"] = spread;
  // Stage term of the local-global objective (maximized; the loss is its
  // negation summed over stages).
  d["objective"] = stage.lambda * kept_mass + (1.0 - stage.lambda) * spread;
  return d;
}

/// Stateful driver that applies a schedule stage by stage and keeps the
/// survivor sets nested.
class StagedPruner {
public:
  StagedPruner(PruningSchedule schedule, TokenLayout layout,
               DiversityConfig cfg = {}, KPrimeRule k_prime_rule = default_k_prime)
      : schedule_(std::move(schedule)), layout_(layout), cfg_(cfg),
        k_prime_rule_(std::move(k_prime_rule)) {
    cfg_.validate();
    survivors_.resize(layout_.n_image());
    std::iota(survivors_.begin(), survivors_.end(), 0);
  }

  const std::vector<std::size_t> &survivors() const { return survivors_; }
  const TokenLayout &layout() const { return layout_; }
  const PruningSchedule &schedule() const { return schedule_; }

  std::optional<PruningStage> pending_stage() const {
    if (next_ >= schedule_.stages().size())
      return std::nullopt;
    return schedule_.stages()[next_];
  }

  bool done() const { return next_ >= schedule_.stages().size(); }

  const StageSelection &apply(const StageInputs &in) {
    const auto stage = pending_stage();
    if (!stage)
      fail_validation("staged pruner: schedule already complete");
    if (in.layer != stage->layer)
      fail_validation("staged pruner: expected inputs for layer ", stage->layer,
                      ", got ", in.layer);
    if (in.survivors != survivors_)
      fail_validation("staged pruner: inputs at layer ", in.layer,
                      " do not cover the current survivors");
    StageSelection sel;
    sel.layer = stage->layer;
    if (survivors_.empty()) {
      sel.diagnostics["survivors_in"] = 0.0;
      sel.diagnostics["kept_count"] = 0.0;
    } else {
      const auto picks = select_stage(in, *stage, cfg_, k_prime_rule_);
      sel.kept = picks.kept;
      sel.attention_picks = picks.attention;
      sel.diversity_picks = picks.diversity;
      sel.diagnostics = stage_diagnostics(in, picks, *stage, cfg_);
    }
    survivors_ = sel.kept;
    ++next_;
    result_.per_stage.push_back(std::move(sel));
    return result_.per_stage.back();
  }

  /// Marks a stage whose survivor set is already empty.
  const StageSelection &apply_empty() {
    const auto stage = pending_stage();
    if (!stage || !survivors_.empty())
      fail_validation("staged pruner: apply_empty needs an empty survivor set");
    StageSelection sel;
    sel.layer = stage->layer;
    sel.diagnostics["survivors_in"] = 0.0;
    sel.diagnostics["kept_count"] = 0.0;
    ++next_;
    result_.per_stage.push_back(std::move(sel));
    return result_.per_stage.back();
  }

  const SelectionResult &result() const { return result_; }

private:
  PruningSchedule schedule_;
  TokenLayout layout_;
  DiversityConfig cfg_;
  KPrimeRule k_prime_rule_;
  std::vector<std::size_t> survivors_;
  std::size_t next_ = 0;
  SelectionResult result_;
};

/// Supplies stage inputs for a layer given the current survivors.
using StageSource =
    std::function<StageInputs(std::size_t layer, std::span<const std::size_t> survivors)>;

inline SelectionResult run_schedule(const StageSource &source,
                                    const PruningSchedule &schedule,
                                    const TokenLayout &layout,
                                    const DiversityConfig &cfg = {},
                                    const KPrimeRule &k_prime_rule = default_k_prime) {
  StagedPruner pruner(schedule, layout, cfg, k_prime_rule);
  while (auto stage = pruner.pending_stage()) {
    if (pruner.survivors().empty())
      pruner.apply_empty();
    else
      pruner.apply(source(stage->layer, pruner.survivors()));
  }
  return pruner.result();
}

/// Stage inputs read from a trace. Per scheduled layer the trace holds
/// `attn_l{l}` (last-token attention, [seq] or [heads x seq]) and
/// `hidden_l{l}` (input hidden states, [seq x d] or [n_image x d]).
inline StageSource trace_stage_source(const Trace &trace) {
  return [&trace](std::size_t layer, std::span<const std::size_t> survivors) {
    const auto &layout = trace.manifest.layout;
    const auto attn_key = attention_name(layer);
    const auto hidden_key = hidden_name(layer);
    if (!trace.has(attn_key) || !trace.has(hidden_key))
      fail_validation("trace has no '", attn_key, "'/'", hidden_key,
                      "' for scheduled layer ", layer);
    const auto scores = importance_last_token(trace.tensor(attn_key), layout, layer);
    const auto &hidden = trace.tensor(hidden_key);
    std::size_t offset = 0;
    if (hidden.rows() == layout.total())
      offset = layout.image_begin();
    else if (hidden.rows() != layout.n_image())
      fail_validation("tensor '", hidden_key, "' has ", hidden.rows(),
                      " rows; expected ", layout.total(), " or ", layout.n_image());
    std::vector<std::size_t> rows;
    std::vector<double> s;
    for (auto idx : survivors) {
      rows.push_back(offset + idx);
      s.push_back(scores.scores[idx]);
    }
    return make_stage_inputs(
        layer, std::vector<std::size_t>(survivors.begin(), survivors.end()),
        std::move(s), hidden.gather_rows(rows, hidden_key), layout);
  };
}

} // namespace btp
