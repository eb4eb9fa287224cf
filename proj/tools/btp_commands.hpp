#pragma once

// Subcommands of btp_cli. Kept in a header so tests can drive them
// in-process through run().

#include <CLI11.hpp>
#include <json.hpp>

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdlib>
#include <exception>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <mutex>
#include <optional>
#include <random>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include "btp/btp.hpp"

namespace btp::cli {

using nlohmann::json;

enum ExitCode : int {
  kOk = 0,
  kValidationFailure = 1,
  kIoFailure = 2,
  kOracleFailure = 3,
  // Calibration succeeded but found no shift peak and fell back to an even
  // subdivision of the depth.
  kFallbackWarning = 4,
};

// ---------------------------------------------------------------- threads

/// Worker cap from BTP_THREADS; defaults to the hardware concurrency.
inline std::size_t thread_budget() {
  std::size_t hw = std::max(1u, std::thread::hardware_concurrency());
  const char *env = std::getenv("BTP_THREADS");
  if (!env || !*env)
    return hw;
  std::size_t pos = 0;
  long long v = 0;
  try {
    v = std::stoll(env, &pos);
  } catch (const std::exception &) {
    pos = 0;
  }
  if (pos != std::string(env).size() || v < 1)
    fail_validation("BTP_THREADS must be a positive integer, got '", env, "'");
  return static_cast<std::size_t>(v);
}

/// Runs fn(i) for i in [0, n) on up to thread_budget() workers. Results are
/// written by index, so output order never depends on scheduling. The first
/// exception (lowest index) is rethrown.
template <class Fn> void parallel_for(std::size_t n, Fn fn) {
  const std::size_t workers = std::min(thread_budget(), n);
  std::vector<std::exception_ptr> errors(n);
  if (workers <= 1) {
    for (std::size_t i = 0; i < n; ++i) {
      try {
        fn(i);
      } catch (...) {
        errors[i] = std::current_exception();
      }
    }
  } else {
    std::atomic<std::size_t> next{0};
    std::vector<std::thread> pool;
    for (std::size_t w = 0; w < workers; ++w) {
      pool.emplace_back([&] {
        for (std::size_t i = next++; i < n; i = next++) {
          try {
            fn(i);
          } catch (...) {
            errors[i] = std::current_exception();
          }
        }
      });
    }
    for (auto &t : pool)
      t.join();
  }
  for (auto &e : errors)
    if (e)
      std::rethrow_exception(e);
}

// ------------------------------------------------------------ conversions

inline json schedule_to_json(const PruningSchedule &s) {
  json stages = json::array();
  for (const auto &st : s.stages())
    stages.push_back({{"layer", st.layer},
                      {"retention", st.retention},
                      {"lambda", st.lambda},
                      {"drop_all", st.drop_all()}});
  return {{"num_layers", s.num_layers()}, {"stages", stages}};
}

inline PruningSchedule schedule_from_json(const json &j) {
  try {
    std::vector<PruningStage> stages;
    for (const auto &st : j.at("stages")) {
      PruningStage s;
      s.layer = st.at("layer").get<std::size_t>();
      s.lambda = st.value("lambda", 1.0);
      const bool drop = st.value("drop_all", false);
      s.retention = st.value("retention", drop ? 0.0 : 1.0);
      if (drop && s.retention != 0.0)
        fail_validation("schedule: drop_all stage at layer ", s.layer,
                        " must have retention 0");
      if (!drop && s.retention == 0.0)
        fail_validation("schedule: retention 0 at layer ", s.layer,
                        " requires drop_all: true");
      stages.push_back(s);
    }
    return PruningSchedule(std::move(stages), j.at("num_layers").get<std::size_t>());
  } catch (const json::exception &ex) {
    fail_format("schedule file: ", ex.what());
  }
}

inline json read_json_file(const std::filesystem::path &path) {
  std::ifstream in(path);
  if (!in)
    fail_format("cannot open ", path.string());
  try {
    return json::parse(in);
  } catch (const json::exception &ex) {
    fail_format("malformed JSON in ", path.string(), ": ", ex.what());
  }
}

inline json diversity_to_json(const DiversityConfig &c) {
  return {{"spatial_metric", to_string(c.spatial_metric)},
          {"semantic_metric", to_string(c.semantic_metric)},
          {"seed_rule", to_string(c.seed_rule)},
          {"spatial_seed_fraction", c.spatial_seed_fraction}};
}

inline json selection_to_json(const SelectionResult &r) {
  json stages = json::array();
  for (const auto &s : r.per_stage) {
    json diag = json::object();
    for (const auto &[k, v] : s.diagnostics)
      diag[k] = v;
    stages.push_back({{"layer", s.layer},
                      {"kept", s.kept},
                      {"attention_picks", s.attention_picks},
                      {"diversity_picks", s.diversity_picks},
                      {"diagnostics", diag}});
  }
  return stages;
}

inline json profile_to_json(const ShiftProfile &p) {
  json rows = json::array();
  for (const auto &e : p.per_layer)
    rows.push_back({{"layer", e.layer}, {"shifted_count", e.shifted_count}});
  return {{"n_image", p.n_image}, {"samples", p.samples}, {"per_layer", rows}};
}

inline void emit(const json &payload, const std::string &out_path, std::ostream &out) {
  const auto text = payload.dump(2) + "\n";
  if (out_path.empty()) {
    out << text;
    return;
  }
  std::ofstream f(out_path, std::ios::binary);
  if (!f)
    fail_format("cannot write ", out_path);
  f << text;
  if (!f)
    fail_format("failed writing ", out_path);
}

inline void emit_text(const std::string &text, const std::string &out_path,
                      std::ostream &out) {
  if (out_path.empty()) {
    out << text;
    return;
  }
  std::ofstream f(out_path, std::ios::binary);
  if (!f)
    fail_format("cannot write ", out_path);
  f << text;
  if (!f)
    fail_format("failed writing ", out_path);
}

/// Shortest round-trip text for a double, as used in CSV output.
inline std::string fmt(double v) {
  std::ostringstream s;
  s << std::setprecision(17) << v;
  return s.str();
}

inline const std::vector<double> kLlava7bLambdas = {0.6, 0.8, 1.0};

inline std::vector<double> lambda_preset(const std::string &name) {
  if (name == "llava7b")
    return kLlava7bLambdas;
  fail_validation("unknown lambda preset '", name, "' (known: llava7b)");
}

inline ModelDims dims_preset(const std::string &name) {
  if (name == "llava7b")
    return {32, 4096, 32, 11008, 2};
  if (name == "llava13b")
    return {40, 5120, 40, 13824, 2};
  fail_validation("unknown model preset '", name, "' (known: llava7b, llava13b)");
}

// -------------------------------------------------------- shared options

/// Schedule either from a file or from parallel layer/retention/lambda lists.
struct ScheduleOptions {
  std::string file;
  std::vector<std::size_t> layers;
  std::vector<double> retention;
  std::vector<double> lambdas;
  std::string preset;
  bool drop_all_last = false;

  void add(CLI::App &app) {
    app.add_option("--schedule", file, "Schedule JSON file");
    app.add_option("--stage-layers", layers, "Pruning layers, comma separated")
        ->delimiter(',');
    app.add_option("--retention", retention, "Retention per stage")->delimiter(',');
    app.add_option("--lambda", lambdas, "Balance factor per stage")->delimiter(',');
    app.add_option("--preset", preset, "Lambda preset (llava7b = 0.6,0.8,1.0)");
    app.add_flag("--drop-all-last", drop_all_last,
                 "Append-style: the last listed stage discards every image token");
  }

  bool inline_given() const { return !layers.empty(); }

  PruningSchedule resolve(std::size_t num_layers) const {
    if (!file.empty()) {
      if (inline_given())
        fail_validation("give either --schedule or --stage-layers, not both");
      auto s = schedule_from_json(read_json_file(file));
      if (s.num_layers() != num_layers)
        fail_validation("schedule covers ", s.num_layers(), " layers, model has ",
                        num_layers);
      return s;
    }
    if (!inline_given())
      return PruningSchedule({}, num_layers);
    auto lam = lambdas;
    if (!preset.empty()) {
      if (!lam.empty())
        fail_validation("give either --lambda or --preset, not both");
      lam = lambda_preset(preset);
    }
    auto ret = retention;
    if (ret.empty())
      ret.assign(layers.size(), 0.5);
    if (lam.empty())
      lam.assign(layers.size(), 1.0);
    if (drop_all_last && !ret.empty())
      ret.back() = 0.0;
    return build_schedule(layers, ret, lam, num_layers);
  }

  json describe() const {
    return {{"schedule_file", file},
            {"stage_layers", layers},
            {"retention", retention},
            {"lambda", lambdas},
            {"preset", preset},
            {"drop_all_last", drop_all_last}};
  }
};

struct DiversityOptions {
  std::string spatial = "manhattan";
  std::string semantic = "cosine_distance";
  std::string seed_rule = "spatial_first_point";
  double seed_fraction = 0.25;
  std::optional<double> k_prime_ratio;

  void add(CLI::App &app) {
    app.add_option("--spatial-metric", spatial, "manhattan | euclidean")->capture_default_str();
    app.add_option("--semantic-metric", semantic, "cosine_distance | euclidean")->capture_default_str();
    app.add_option("--seed-rule", seed_rule,
                   "spatial_first_point | farthest_from_centroid")->capture_default_str();
    app.add_option("--spatial-seed-fraction", seed_fraction,
                   "Share of the diversity quota seeded from the grid")->capture_default_str();
    app.add_option("--k-prime-ratio", k_prime_ratio,
                   "Over-selection pool k' = ceil(ratio * k) (default k + ceil(k/4))");
  }

  DiversityConfig resolve() const {
    DiversityConfig c;
    c.spatial_metric = metric_from_string(spatial);
    c.semantic_metric = metric_from_string(semantic);
    c.seed_rule = seed_rule_from_string(seed_rule);
    c.spatial_seed_fraction = seed_fraction;
    c.validate();
    return c;
  }

  KPrimeRule k_prime_rule() const {
    if (!k_prime_ratio)
      return default_k_prime;
    const double r = *k_prime_ratio;
    if (!(r >= 1.0))
      fail_validation("--k-prime-ratio must be >= 1, got ", r);
    return [r](std::size_t k, std::size_t n) {
      const auto kp = static_cast<std::size_t>(std::ceil(r * static_cast<double>(k) - 1e-9));
      return std::min(std::max(kp, k), n);
    };
  }

  json describe() const {
    json j = diversity_to_json(resolve());
    j["k_prime_rule"] = k_prime_ratio ? "ratio" : "k_plus_quarter";
    if (k_prime_ratio)
      j["k_prime_ratio"] = *k_prime_ratio;
    return j;
  }
};

struct LayoutOptions {
  std::size_t n_system = 0;
  std::size_t grid_rows = 24;
  std::size_t grid_cols = 24;
  std::size_t n_text = 0;

  void add(CLI::App &app, std::size_t default_system, std::size_t default_side,
           std::size_t default_text) {
    n_system = default_system;
    grid_rows = grid_cols = default_side;
    n_text = default_text;
    app.add_option("--n-system", n_system, "System-prompt tokens")->capture_default_str();
    app.add_option("--grid-rows", grid_rows, "Image grid rows")->capture_default_str();
    app.add_option("--grid-cols", grid_cols, "Image grid columns")->capture_default_str();
    app.add_option("--n-text", n_text, "Text tokens")->capture_default_str();
  }

  TokenLayout resolve() const {
    return TokenLayout(n_system, grid_rows * grid_cols, n_text, grid_rows, grid_cols);
  }
};

// ---------------------------------------------------------------- calibrate

struct CalibrateOptions {
  std::vector<std::string> traces;
  std::size_t synthetic = 0;
  std::uint64_t seed = 0;
  std::size_t synth_layers = 32;
  std::size_t synth_image = 144;
  std::size_t synth_hidden = 16;
  std::size_t dominant_layer = 9;
  double tau = kDefaultTau;
  std::size_t calib_size = kDefaultCalibrationSize;
  std::size_t stages = 3;
  std::size_t min_gap = 1;
  std::vector<double> retention;
  std::vector<double> lambdas;
  std::string preset;
  bool halves = false;
  std::string out;
};

/// Image-token hidden states hidden_l0, hidden_l1, ... from one trace.
inline std::vector<TensorBlob> trace_hidden_layers(const Trace &trace) {
  const auto &layout = trace.manifest.layout;
  std::vector<TensorBlob> layers;
  for (std::size_t l = 0; trace.has(hidden_name(l)); ++l) {
    const auto &h = trace.tensor(hidden_name(l));
    if (h.rows() == layout.n_image()) {
      layers.push_back(h);
    } else if (h.rows() == layout.total()) {
      std::vector<std::size_t> rows(layout.n_image());
      std::iota(rows.begin(), rows.end(), layout.image_begin());
      layers.push_back(h.gather_rows(rows, h.name()));
    } else {
      fail_validation("tensor '", h.name(), "' has ", h.rows(), " rows; expected ",
                      layout.total(), " or ", layout.n_image());
    }
  }
  if (layers.size() < 3)
    fail_validation("trace needs hidden_l0..hidden_l2 at least, found ",
                    layers.size(), " layers");
  return layers;
}

inline int cmd_calibrate(const CalibrateOptions &o, std::ostream &out,
                         std::ostream &err) {
  if (o.traces.empty() == (o.synthetic == 0))
    fail_validation("calibrate: give --trace directories or --synthetic N");
  if (o.calib_size == 0)
    fail_validation("calibrate: --calib-size must be positive");

  // One profile per sample, reduced in index order.
  std::vector<ShiftProfile> per_sample;
  std::size_t num_layers = 0;
  if (!o.traces.empty()) {
    auto paths = o.traces;
    if (paths.size() > o.calib_size) {
      err << "calibrate: using the first " << o.calib_size << " of " << paths.size()
          << " traces\n";
      paths.resize(o.calib_size);
    }
    per_sample.resize(paths.size());
    std::vector<std::size_t> depth(paths.size());
    parallel_for(paths.size(), [&](std::size_t i) {
      const auto trace = read_trace(paths[i]);
      const auto layers = trace_hidden_layers(trace);
      depth[i] = layers.size() - 1;
      per_sample[i] = shift_profile(layers, o.tau);
    });
    num_layers = depth.front();
  } else {
    const auto n = std::min(o.synthetic, o.calib_size);
    SyntheticCalibrationConfig sc;
    sc.n_image = o.synth_image;
    sc.hidden = o.synth_hidden;
    sc.num_layers = o.synth_layers;
    sc.tau = o.tau;
    const auto pattern = reference_shift_pattern(sc.n_image, sc.num_layers, o.dominant_layer);
    per_sample.resize(n);
    parallel_for(n, [&](std::size_t i) {
      per_sample[i] = synthetic_profile(sc, pattern, o.seed, i, 1);
    });
    num_layers = sc.num_layers;
  }

  const auto reduce = [&](std::size_t begin, std::size_t end) {
    ShiftProfile acc;
    for (std::size_t i = begin; i < end; ++i)
      accumulate_profile(acc, per_sample[i]);
    return acc;
  };
  const auto profile = reduce(0, per_sample.size());
  const auto choice = select_pruning_layers(profile, o.stages, o.min_gap, num_layers);

  std::vector<double> lam = o.lambdas;
  if (!o.preset.empty()) {
    if (!lam.empty())
      fail_validation("calibrate: give either --lambda or --preset, not both");
    lam = lambda_preset(o.preset);
  }
  if (lam.empty())
    lam = kLlava7bLambdas;
  auto ret = o.retention;
  if (ret.empty())
    ret.assign(o.stages, 0.5);
  const auto schedule = build_schedule(choice.layers, ret, lam, num_layers);

  json report = schedule_to_json(schedule);
  report["config"] = {{"traces", o.traces},
                      {"synthetic", o.synthetic},
                      {"seed", o.seed},
                      {"tau", o.tau},
                      {"calib_size", o.calib_size},
                      {"stages", o.stages},
                      {"min_gap", o.min_gap},
                      {"retention", ret},
                      {"lambda", lam}};
  if (o.synthetic > 0) {
    report["config"]["synthetic_layers"] = o.synth_layers;
    report["config"]["synthetic_image_tokens"] = o.synth_image;
    report["config"]["synthetic_hidden"] = o.synth_hidden;
    report["config"]["dominant_layer"] = o.dominant_layer;
  }
  report["profile"] = profile_to_json(profile);
  report["peaks"] = choice.peaks;
  report["fallback"] = choice.fallback;

  if (o.halves) {
    if (per_sample.size() < 2)
      fail_validation("calibrate: --halves needs at least two samples");
    const auto mid = per_sample.size() / 2;
    const auto a = select_pruning_layers(reduce(0, mid), o.stages, o.min_gap, num_layers);
    const auto b = select_pruning_layers(reduce(mid, per_sample.size()), o.stages,
                                         o.min_gap, num_layers);
    report["halves"] = {{"first", a.layers},
                        {"second", b.layers},
                        {"agree", a.layers == b.layers}};
  }

  err << "layer,shifted_count\n";
  for (const auto &e : profile.per_layer)
    err << e.layer << "," << e.shifted_count << "\n";
  emit(report, o.out, out);
  if (choice.fallback) {
    err << "warning: no shift peak above the profile mean; layers fall back to an "
           "even subdivision\n";
    return kFallbackWarning;
  }
  return kOk;
}

// ------------------------------------------------------------------ select

struct SelectOptions {
  std::vector<std::string> traces;
  ScheduleOptions schedule;
  DiversityOptions diversity;
  std::string out;
};

inline int cmd_select(const SelectOptions &o, std::ostream &out, std::ostream &err) {
  if (o.traces.empty())
    fail_validation("select: give at least one --trace directory");
  const auto cfg = o.diversity.resolve();
  const auto kprime = o.diversity.k_prime_rule();
  std::vector<json> results(o.traces.size());
  std::vector<SelectionResult> selections(o.traces.size());
  parallel_for(o.traces.size(), [&](std::size_t i) {
    const auto trace = read_trace(o.traces[i]);
    const auto schedule = o.schedule.resolve(trace.manifest.model_dims.num_layers);
    selections[i] = run_schedule(trace_stage_source(trace), schedule,
                                 trace.manifest.layout, cfg, kprime);
    results[i] = {{"trace", o.traces[i]},
                  {"schedule", schedule_to_json(schedule)},
                  {"stages", selection_to_json(selections[i])}};
  });

  json report = {{"config", {{"traces", o.traces},
                             {"schedule", o.schedule.describe()},
                             {"diversity", o.diversity.describe()}}},
                 {"results", results}};
  err << "trace,layer,survivors_in,kept,attention,diversity,attention_mass,"
         "min_pairwise_distance,sum_of_distances\n";
  for (std::size_t i = 0; i < selections.size(); ++i) {
    for (const auto &s : selections[i].per_stage) {
      const auto get = [&](const char *k) {
        auto it = s.diagnostics.find(k);
        return it == s.diagnostics.end() ? std::string("") : fmt(it->second);
      };
      err << o.traces[i] << "," << s.layer << "," << get("survivors_in") << ","
          << s.kept.size() << "," << s.attention_picks.size() << ","
          << s.diversity_picks.size() << "," << get("attention_mass") << ","
          << get("min_pairwise_distance") << "," << get("sum_of_distances") << "\n";
    }
  }
  emit(report, o.out, out);
  return kOk;
}

// ---------------------------------------------------------------- simulate

struct SimulateOptions {
  ToyConfig toy;
  std::string weights;
  LayoutOptions layout;
  std::uint64_t input_seed = 1;
  float input_scale = 1.0f;
  ScheduleOptions schedule;
  DiversityOptions diversity;
  std::string positions = "text";
  std::string export_dir;
  std::string out;
};

inline int cmd_simulate(const SimulateOptions &o, std::ostream &out, std::ostream &) {
  const auto layout = o.layout.resolve();
  ToyWeights weights;
  if (!o.weights.empty()) {
    weights = load_toy_weights(read_trace(o.weights), o.toy.equal_value_norms,
                               o.toy.value_norm);
  } else {
    weights = init_toy_weights(o.toy);
  }
  const auto &cfg = weights.config;
  const auto schedule = o.schedule.resolve(cfg.num_layers);
  const auto div = o.diversity.resolve();
  const auto kprime = o.diversity.k_prime_rule();
  const auto inputs = random_inputs(layout, cfg.hidden, o.input_seed, o.input_scale);

  std::vector<std::size_t> positions;
  if (o.positions == "text")
    positions = text_positions(layout);
  else if (o.positions == "last")
    positions = {layout.total() - 1};
  else
    fail_validation("simulate: --positions must be 'text' or 'last'");
  if (positions.empty())
    fail_validation("simulate: layout has no text tokens to compare");

  const auto base = forward(inputs, layout, weights);
  const auto btp_run = simulate_schedule(inputs, layout, weights, schedule, div, kprime);
  const auto att_run = simulate_schedule(inputs, layout, weights,
                                         with_uniform_lambda(schedule, 1.0), div, kprime);
  const auto div_run = simulate_schedule(inputs, layout, weights,
                                         with_uniform_lambda(schedule, 0.0), div, kprime);
  if (!o.export_dir.empty())
    export_record(o.export_dir, base);

  json config = {{"toy",
                  {{"num_layers", cfg.num_layers},
                   {"hidden", cfg.hidden},
                   {"heads", cfg.heads},
                   {"mlp", cfg.mlp},
                   {"seed", o.toy.seed},
                   {"weights", o.weights},
                   {"equal_value_norms", cfg.equal_value_norms},
                   {"value_norm", cfg.value_norm},
                   {"qk_gain", o.toy.qk_gain},
                   {"shared_qk", o.toy.shared_qk}}},
                 {"layout", layout_to_json(layout)},
                 {"input_seed", o.input_seed},
                 {"input_scale", o.input_scale},
                 {"positions", o.positions},
                 {"schedule", schedule_to_json(schedule)},
                 {"diversity", o.diversity.describe()}};

  std::ostringstream csv;
  csv << "# " << config.dump() << "\n";
  csv << "layer,image_tokens,btp_cosine,attention_cosine,diversity_cosine,"
         "btp_euclidean,attention_euclidean,diversity_euclidean\n";
  for (std::size_t l = 0; l < cfg.num_layers; ++l) {
    csv << l << "," << btp_run.record.image_survivors(l + 1).size();
    for (auto metric : {OutputMetric::cosine_similarity, OutputMetric::euclidean})
      for (const auto *run : {&btp_run, &att_run, &div_run})
        csv << "," << fmt(layer_output_distance(base, run->record, l, positions, metric));
    csv << "\n";
  }
  emit_text(csv.str(), o.out, out);
  return kOk;
}

// -------------------------------------------------------------------- cost

struct CostOptions {
  std::string preset = "llava7b";
  std::optional<std::size_t> num_layers, hidden, heads, mlp;
  std::size_t kv_bytes = 2;
  LayoutOptions layout;
  ScheduleOptions schedule;
  std::vector<double> pruned_scores;
  std::vector<double> original_scores;
  std::string out;
};

inline int cmd_cost(const CostOptions &o, std::ostream &out, std::ostream &) {
  ModelDims dims = dims_preset(o.preset);
  if (o.num_layers)
    dims.num_layers = *o.num_layers;
  if (o.hidden)
    dims.hidden = *o.hidden;
  if (o.heads)
    dims.heads = *o.heads;
  if (o.mlp)
    dims.mlp = *o.mlp;
  dims.kv_bytes_per_elem = o.kv_bytes;
  dims.validate();
  const auto layout = o.layout.resolve();
  const auto schedule = o.schedule.resolve(dims.num_layers);
  const auto report = schedule_flops(layout, schedule, dims);

  json j = {{"config",
             {{"dims", dims_to_json(dims)},
              {"kv_bytes_per_elem", dims.kv_bytes_per_elem},
              {"preset", o.preset},
              {"layout", layout_to_json(layout)},
              {"schedule", schedule_to_json(schedule)}}},
            {"tflops", report.tflops},
            {"kv_bytes", report.kv_bytes},
            {"kv_gb", static_cast<double>(report.kv_bytes) / 1e9},
            {"avg_tokens", report.avg_tokens},
            {"per_layer_tokens", report.per_layer_tokens},
            {"per_layer_image_tokens", report.per_layer_image_tokens}};
  if (!o.pruned_scores.empty() || !o.original_scores.empty()) {
    if (o.pruned_scores.size() != o.original_scores.size())
      fail_validation("cost: --pruned-scores and --original-scores differ in length");
    std::map<std::string, double> p, b;
    for (std::size_t i = 0; i < o.pruned_scores.size(); ++i) {
      const auto key = "task" + std::to_string(i);
      p[key] = o.pruned_scores[i];
      b[key] = o.original_scores[i];
    }
    j["gain_percent"] = performance_gain(p, b);
    j["config"]["pruned_scores"] = o.pruned_scores;
    j["config"]["original_scores"] = o.original_scores;
  }
  emit(j, o.out, out);
  return kOk;
}

// ------------------------------------------------------------------ oracle

struct OracleOptions {
  std::string kind;
  std::size_t instances = 0;
  std::uint64_t seed = 0;
  double guard = kBruteForceGuard;
  std::optional<std::size_t> n, k;
  std::string scratch;
  std::string out;
};

namespace detail {

inline TensorBlob gaussian_points(std::size_t n, std::size_t d, std::mt19937_64 &rng) {
  std::normal_distribution<float> g(0.0f, 1.0f);
  std::vector<float> data(n * d);
  for (auto &v : data)
    v = g(rng);
  return TensorBlob::matrix("points", n, d, std::move(data));
}

inline json oracle_mmdp(const OracleOptions &o, bool &all_pass) {
  const std::size_t count = o.instances ? o.instances : 50;
  json cases = json::array();
  std::mt19937_64 rng(o.seed);
  for (std::size_t i = 0; i < count; ++i) {
    std::size_t n = o.n.value_or(4 + rng() % 9);     // 4..12
    std::size_t k = o.k.value_or(2 + rng() % 4);     // 2..5
    k = std::min(k, n);
    const Metric metric = i % 2 == 0 ? Metric::euclidean : Metric::cosine_distance;
    const auto pts = gaussian_points(n, 4, rng);
    const auto opt = brute_force_maxmin(pts, k, metric, o.guard);
    const auto greedy = greedy_maxmin(pts, k, metric);
    const double g = min_pairwise_distance(pts, greedy, metric);
    const bool pass = g >= 0.5 * opt.min_distance;
    all_pass = all_pass && pass;
    cases.push_back({{"n", n}, {"k", k}, {"metric", to_string(metric)},
                     {"greedy", g}, {"optimum", opt.min_distance}, {"pass", pass}});
  }
  return cases;
}

inline json oracle_single_layer(const OracleOptions &o, bool &all_pass) {
  const std::size_t count = o.instances ? o.instances : 20;
  json cases = json::array();
  for (std::size_t i = 0; i < count; ++i) {
    ToyConfig cfg;
    cfg.num_layers = 2;
    cfg.hidden = 16;
    cfg.heads = 2;
    cfg.mlp = 32;
    cfg.seed = o.seed + i;
    cfg.equal_value_norms = true;
    const std::size_t side = 2 + i % 2;  // 4 or 9 image tokens
    const TokenLayout layout(2, side * side, 3, side, side);
    const auto rec = forward(random_inputs(layout, cfg.hidden, o.seed * 7919 + i),
                             layout, init_toy_weights(cfg));
    const std::size_t k = 1 + i % (side * side - 1);
    const auto check = single_layer_optimality_check(rec, i % 2, k);
    const bool pass = check.relative_gap() < 1e-6;
    all_pass = all_pass && pass;
    cases.push_back({{"n_image", side * side}, {"k", k}, {"layer", i % 2},
                     {"topk_error", check.topk_error}, {"best_error", check.best_error},
                     {"relative_gap", check.relative_gap()}, {"pass", pass}});
  }
  return cases;
}

inline json oracle_roundtrip(const OracleOptions &o, bool &all_pass) {
  const std::size_t count = o.instances ? o.instances : 100;
  namespace fs = std::filesystem;
  const fs::path root = o.scratch.empty()
                            ? fs::temp_directory_path() /
                                  ("btp-roundtrip-" + std::to_string(o.seed) + "-" +
                                   std::to_string(std::random_device{}()))
                            : fs::path(o.scratch);
  fs::create_directories(root);
  json cases = json::array();
  std::mt19937_64 rng(o.seed);
  for (std::size_t i = 0; i < count; ++i) {
    std::map<std::string, TensorBlob> tensors;
    const std::size_t nt = 1 + rng() % 3;
    for (std::size_t t = 0; t < nt; ++t) {
      const Shape shape{1 + rng() % 4, 1 + rng() % 5};
      std::vector<float> data(shape_volume(shape));
      for (auto &v : data)
        v = std::bit_cast<float>(static_cast<std::uint32_t>(rng()));
      const auto name = "t" + std::to_string(t);
      tensors.emplace(name, TensorBlob(name, shape, std::move(data)));
    }
    const TokenLayout layout(1, 4, 1, 2, 2);
    const ModelDims dims{2, 8, 2, 16, 2};
    const auto dir = root / ("trace" + std::to_string(i));
    write_trace(dir, dims, layout, tensors);
    const auto back = read_trace(dir);
    bool pass = back.tensors.size() == tensors.size();
    for (const auto &[name, blob] : tensors)
      pass = pass && back.has(name) && back.tensor(name).bit_equal(blob);
    all_pass = all_pass && pass;
    cases.push_back({{"tensors", nt}, {"pass", pass}});
  }
  if (o.scratch.empty())
    fs::remove_all(root);
  return cases;
}

} // namespace detail

inline int cmd_oracle(const OracleOptions &o, std::ostream &out, std::ostream &err) {
  bool all_pass = true;
  json cases;
  if (o.kind == "mmdp")
    cases = detail::oracle_mmdp(o, all_pass);
  else if (o.kind == "single_layer")
    cases = detail::oracle_single_layer(o, all_pass);
  else if (o.kind == "roundtrip")
    cases = detail::oracle_roundtrip(o, all_pass);
  else
    fail_validation("oracle: --kind must be mmdp, single_layer or roundtrip");
  std::size_t passed = 0;
  for (const auto &c : cases)
    passed += c.at("pass").get<bool>() ? 1 : 0;
  json report = {{"kind", o.kind},
                 {"config", {{"seed", o.seed}, {"guard", o.guard}, {"instances", cases.size()}}},
                 {"passed", passed},
                 {"failed", cases.size() - passed},
                 {"cases", cases}};
  emit(report, o.out, out);
  err << o.kind << ": " << passed << "/" << cases.size() << " passed\n";
  return all_pass ? kOk : kOracleFailure;
}

// --------------------------------------------------------------- dispatch

/// Parses argv-style arguments (without the program name) and runs the
/// chosen subcommand. Errors are reported on `err` and mapped to exit codes.
inline int run(const std::vector<std::string> &args, std::ostream &out,
               std::ostream &err) {
  CLI::App app{"Balanced token pruning: calibrate, select, simulate, cost, oracle"};
  app.require_subcommand(1);

  CalibrateOptions cal;
  auto *c = app.add_subcommand("calibrate", "Pick pruning layers from hidden-state traces");
  c->add_option("--trace", cal.traces, "Calibration trace directories");
  c->add_option("--synthetic", cal.synthetic, "Use N seeded synthetic samples instead");
  c->add_option("--seed", cal.seed, "Synthetic seed")->capture_default_str();
  c->add_option("--synthetic-layers", cal.synth_layers, "Synthetic decoder depth")->capture_default_str();
  c->add_option("--synthetic-image-tokens", cal.synth_image, "Synthetic image tokens")->capture_default_str();
  c->add_option("--synthetic-hidden", cal.synth_hidden, "Synthetic hidden width")->capture_default_str();
  c->add_option("--dominant-layer", cal.dominant_layer, "Synthetic dominant shift layer")->capture_default_str();
  c->add_option("--tau", cal.tau, "Cosine threshold")->capture_default_str();
  c->add_option("--calib-size", cal.calib_size, "Maximum calibration samples")->capture_default_str();
  c->add_option("--stages", cal.stages, "Number of pruning stages")->capture_default_str();
  c->add_option("--min-gap", cal.min_gap, "Minimum distance between pruning layers")->capture_default_str();
  c->add_option("--retention", cal.retention, "Retention per stage")->delimiter(',');
  c->add_option("--lambda", cal.lambdas, "Lambda per stage")->delimiter(',');
  c->add_option("--preset", cal.preset, "Lambda preset (llava7b)");
  c->add_flag("--halves", cal.halves, "Also calibrate each half of the samples");
  c->add_option("-o,--out", cal.out, "Output schedule JSON (default stdout)");

  SelectOptions sel;
  auto *s = app.add_subcommand("select", "Run a pruning schedule over traces");
  s->add_option("--trace", sel.traces, "Trace directories")->required();
  sel.schedule.add(*s);
  sel.diversity.add(*s);
  s->add_option("-o,--out", sel.out, "Output JSON (default stdout)");

  SimulateOptions sim;
  auto *m = app.add_subcommand("simulate", "Compare strategies on the toy decoder");
  m->add_option("--layers", sim.toy.num_layers, "Toy depth")->capture_default_str();
  m->add_option("--hidden", sim.toy.hidden, "Toy width")->capture_default_str();
  m->add_option("--heads", sim.toy.heads, "Attention heads")->capture_default_str();
  m->add_option("--mlp", sim.toy.mlp, "MLP width")->capture_default_str();
  m->add_option("--seed", sim.toy.seed, "Weight seed")->capture_default_str();
  m->add_flag("--equal-value-norms", sim.toy.equal_value_norms,
              "Normalize per-head value rows");
  m->add_option("--value-norm", sim.toy.value_norm, "Target value-row norm")->capture_default_str();
  m->add_option("--qk-gain", sim.toy.qk_gain, "Query init gain")->capture_default_str();
  m->add_flag("--shared-qk", sim.toy.shared_qk, "Reuse layer 0 query/key projections");
  m->add_option("--weights", sim.weights, "Load weights from a trace directory");
  sim.layout.add(*m, 4, 6, 8);
  m->add_option("--input-seed", sim.input_seed, "Input embedding seed")->capture_default_str();
  m->add_option("--input-scale", sim.input_scale, "Input embedding scale")->capture_default_str();
  sim.schedule.add(*m);
  sim.diversity.add(*m);
  m->add_option("--positions", sim.positions, "Compared positions: text | last")->capture_default_str();
  m->add_option("--export", sim.export_dir, "Export the unpruned forward record");
  m->add_option("-o,--out", sim.out, "Output CSV (default stdout)");

  CostOptions cost;
  auto *k = app.add_subcommand("cost", "FLOPs, KV cache and token accounting");
  k->add_option("--model", cost.preset, "Dimension preset: llava7b | llava13b")->capture_default_str();
  k->add_option("--num-layers", cost.num_layers, "Override layer count");
  k->add_option("--hidden", cost.hidden, "Override hidden size");
  k->add_option("--heads", cost.heads, "Override head count");
  k->add_option("--mlp", cost.mlp, "Override MLP size");
  k->add_option("--kv-bytes", cost.kv_bytes, "Bytes per cached element")->capture_default_str();
  cost.layout.add(*k, 0, 24, 0);
  cost.schedule.add(*k);
  k->add_option("--pruned-scores", cost.pruned_scores, "Task scores after pruning")
      ->delimiter(',');
  k->add_option("--original-scores", cost.original_scores, "Task scores before pruning")
      ->delimiter(',');
  k->add_option("-o,--out", cost.out, "Output JSON (default stdout)");

  OracleOptions orc;
  auto *q = app.add_subcommand("oracle", "Exhaustive oracle suites");
  q->add_option("--kind", orc.kind, "mmdp | single_layer | roundtrip")->required();
  q->add_option("--instances", orc.instances, "Instance count (suite default if 0)");
  q->add_option("--seed", orc.seed, "Suite seed")->capture_default_str();
  q->add_option("--guard", orc.guard, "Brute-force subset limit")->capture_default_str();
  q->add_option("--n", orc.n, "Fixed candidate count (mmdp)");
  q->add_option("--k", orc.k, "Fixed subset size (mmdp)");
  q->add_option("--scratch", orc.scratch, "Keep round-trip traces under this directory");
  q->add_option("-o,--out", orc.out, "Output JSON (default stdout)");

  std::vector<std::string> reversed(args.rbegin(), args.rend());
  try {
    app.parse(reversed);
  } catch (const CLI::CallForHelp &) {
    out << app.help();
    return kOk;
  } catch (const CLI::CallForAllHelp &) {
    out << app.help("", CLI::AppFormatMode::All);
    return kOk;
  } catch (const CLI::ParseError &e) {
    err << "error: " << e.what() << "\n";
    return kValidationFailure;
  }

  try {
    if (c->parsed())
      return cmd_calibrate(cal, out, err);
    if (s->parsed())
      return cmd_select(sel, out, err);
    if (m->parsed())
      return cmd_simulate(sim, out, err);
    if (k->parsed())
      return cmd_cost(cost, out, err);
    if (q->parsed())
      return cmd_oracle(orc, out, err);
  } catch (const ValidationError &e) {
    err << "validation error: " << e.what() << "\n";
    return kValidationFailure;
  } catch (const FormatError &e) {
    err << "format error: " << e.what() << "\n";
    return kIoFailure;
  } catch (const std::filesystem::filesystem_error &e) {
    err << "io error: " << e.what() << "\n";
    return kIoFailure;
  } catch (const OracleError &e) {
    err << "oracle refused: " << e.what() << "\n";
    return kOracleFailure;
  }
  return kValidationFailure;
}

} // namespace btp::cli
