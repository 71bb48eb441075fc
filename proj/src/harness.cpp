#include "nrnm/harness.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iostream>
#include <limits>
#include <map>
#include <memory>

#include <fmt/format.h>
#include <fmt/ostream.h>

#include "CLI11.hpp"
#include "json.hpp"
#include "nrnm/errors.hpp"
#include "nrnm/gradcheck.hpp"

#ifndef NRNM_VERSION
#define NRNM_VERSION "unknown"
#endif

namespace nrnm {

const char* build_version() { return NRNM_VERSION; }

namespace {

void report_warnings(const std::vector<std::string>& warnings) {
  for (const auto& w : warnings) fmt::print(stderr, "warning: {}\n", w);
}

TrainResult train_on(const RunConfig& run, const Dataset& data) {
  std::filesystem::create_directories(run.out);
  RunConfig stamped = run;
  stamped.version = build_version();
  {
    std::ofstream manifest(run.out / "manifest.cfg");
    if (!manifest) throw ConfigError("out", "cannot write " + (run.out / "manifest.cfg").string());
    manifest << snapshot(stamped).to_text();
  }
  SequenceModel model(model_for(run, data));
  TrainConfig tc = run.train;
  tc.out = run.out;
  return train(model, data, tc);
}

const std::vector<Sample>& split_of(const Dataset& data, Split split) {
  switch (split) {
    case Split::Train: return data.train;
    case Split::Val: return data.val;
    case Split::Test: return data.test;
  }
  return data.test;
}

Split parse_split(const std::string& s) {
  for (Split sp : {Split::Train, Split::Val, Split::Test})
    if (s == to_string(sp)) return sp;
  throw ConfigError("split", "expected train, val or test, got '" + s + "'");
}

}  // namespace

TrainResult run_training(const RunConfig& run) {
  Dataset data = build_dataset(run.task);
  report_warnings(data.warnings);
  return train_on(run, data);
}

// ---------------------------------------------------------------------------
// Ablation

const char* to_string(AblationAxis axis) {
  switch (axis) {
    case AblationAxis::BlockK: return "block_k";
    case AblationAxis::WindowWin: return "window_win";
    case AblationAxis::InjectLayer: return "inject_layer";
    case AblationAxis::StrideS: return "stride_s";
  }
  return "?";
}

AblationAxis parse_axis(const std::string& name) {
  for (AblationAxis a : {AblationAxis::BlockK, AblationAxis::WindowWin, AblationAxis::InjectLayer, AblationAxis::StrideS})
    if (name == to_string(a)) return a;
  throw ConfigError("axis", "unknown axis '" + name + "' (block_k, window_win, inject_layer, stride_s)");
}

double median(std::vector<double> xs) {
  xs.erase(std::remove_if(xs.begin(), xs.end(), [](double v) { return !std::isfinite(v); }), xs.end());
  if (xs.empty()) return std::numeric_limits<double>::quiet_NaN();
  std::sort(xs.begin(), xs.end());
  const std::size_t n = xs.size();
  return n % 2 ? xs[n / 2] : 0.5 * (xs[n / 2 - 1] + xs[n / 2]);
}

AblationResult run_ablation(const RunConfig& base, AblationAxis axis, const std::vector<std::size_t>& values,
                            const std::vector<std::uint64_t>& seeds) {
  if (base.model.kind != ModelKind::Nrnm) throw ConfigError("model", "ablation axes need the nrnm model");
  if (values.empty()) throw ConfigError("values", "nothing to sweep");
  if (seeds.empty()) throw ConfigError("seeds", "need at least one seed");
  Dataset data = build_dataset(base.task);
  report_warnings(data.warnings);
  std::filesystem::create_directories(base.out);

  AblationResult result;
  result.axis = axis;
  std::ofstream table(base.out / "ablation.csv");
  table << "axis,value,seed,accuracy\n";
  for (std::size_t value : values) {
    AblationPoint point;
    point.value = value;
    std::vector<double> accs;
    for (std::uint64_t seed : seeds) {
      RunConfig run = base;
      switch (axis) {
        case AblationAxis::BlockK: run.model.nrnm.k = value; break;
        case AblationAxis::WindowWin: run.model.nrnm.win = value; break;
        case AblationAxis::InjectLayer:
          run.model.nrnm.inject_layer = value;
          if (!run.memory_size_given && value < run.model.depth) run.model.nrnm.m = run.model.hidden_at(value);
          break;
        case AblationAxis::StrideS: run.model.nrnm.s = value; break;
      }
      run.model.seed = seed;
      run.train.seed = seed;
      run.out = base.out / fmt::format("{}={}", to_string(axis), value) / fmt::format("seed={}", seed);
      AblationRun r{value, seed, std::numeric_limits<double>::quiet_NaN(), {}};
      try {
        TrainResult tr = train_on(run, data);
        r.accuracy = data.test.empty() ? tr.best_val_accuracy : tr.test.accuracy;
      } catch (const std::exception& e) {
        r.error = e.what();
        fmt::print(stderr, "{}={} seed={} failed: {}\n", to_string(axis), value, seed, e.what());
      }
      fmt::print(stderr, "{}={} seed={} accuracy={:.4f}\n", to_string(axis), value, seed, r.accuracy);
      table << fmt::format("{},{},{},{:.17g}\n", to_string(axis), value, seed, r.accuracy) << std::flush;
      accs.push_back(r.accuracy);
      result.runs.push_back(std::move(r));
    }
    point.median = median(accs);
    point.min = std::numeric_limits<double>::quiet_NaN();
    point.max = std::numeric_limits<double>::quiet_NaN();
    for (double a : accs) {
      if (!std::isfinite(a)) continue;
      ++point.ok;
      point.min = point.ok == 1 ? a : std::min(point.min, a);
      point.max = point.ok == 1 ? a : std::max(point.max, a);
    }
    result.points.push_back(point);
  }
  std::ofstream plot(base.out / "ablation_plot.csv");
  plot << "axis,value,median,min,max,runs\n";
  for (const auto& p : result.points) {
    plot << fmt::format("{},{},{:.17g},{:.17g},{:.17g},{}\n", to_string(axis), p.value, p.median, p.min, p.max, p.ok);
  }
  return result;
}

// ---------------------------------------------------------------------------
// Traces

std::size_t export_traces(const RunConfig& run, const TraceRequest& request) {
  if (run.model.kind != ModelKind::Nrnm) throw ConfigError("model", "only the nrnm model produces traces");
  Dataset data = build_dataset(run.task);
  report_warnings(data.warnings);
  SequenceModel model(model_for(run, data));
  load_checkpoint(model.params(), request.checkpoint);

  const auto& pool = split_of(data, request.split);
  if (request.count == 0 || request.index + request.count > pool.size()) {
    throw ConfigError("index", fmt::format("samples [{}, {}) are outside the {} split of {}", request.index,
                                           request.index + request.count, to_string(request.split), pool.size()));
  }
  SequenceBatch batch = make_batch(std::span<const Sample>(pool).subspan(request.index, request.count));
  std::vector<BlockTrace> traces;
  Graph g(model.config().precision, false);
  ForwardOptions fo;
  fo.traces = &traces;
  model.forward(g, batch, fo);

  const NrnmConfig& nc = model.config().nrnm;
  const std::size_t u = nc.units();
  using nlohmann::json;
  json header = {
      {"type", "header"},
      {"version", build_version()},
      {"model", to_string(model.config().kind)},
      {"k", nc.k},
      {"s", nc.s},
      {"win", nc.win},
      {"m", nc.m},
      {"heads", nc.heads},
      {"units", u},
      {"T", batch.steps()},
      {"layers", model.config().inject_layers()},
      {"split", to_string(request.split)},
      {"first_index", request.index},
      {"lengths", batch.lengths},
      {"labels", batch.labels},
      {"records", traces.size() * batch.size()},
  };
  if (!request.path.parent_path().empty()) std::filesystem::create_directories(request.path.parent_path());
  std::ofstream out(request.path);
  if (!out) throw ConfigError("trace_out", "cannot write " + request.path.string());
  out << header.dump() << '\n';

  std::size_t records = 0;
  for (const BlockTrace& tr : traces) {
    const Tensor& w = *tr.attention;
    const std::size_t H = w.dim(1), R = w.dim(2);
    for (std::size_t b = 0; b < batch.size(); ++b) {
      json heads = json::array();
      for (std::size_t h = 0; h < H; ++h) {
        const auto first = w.storage().begin() + static_cast<std::ptrdiff_t>((b * H + h) * R * R);
        heads.push_back({{"head", h}, {"rows", R}, {"weights", std::vector<double>(first, first + R * R)}});
      }
      json memory = json::array();
      for (std::size_t i = 0; i < u; ++i) {
        json row = json::array();
        for (std::size_t j = 0; j < nc.m; ++j) row.push_back(tr.memory.at(b, i * nc.m + j));
        memory.push_back(std::move(row));
      }
      json rec = {{"type", "block"},         {"sequence", request.index + b}, {"step", tr.step},
                  {"layer", tr.layer},       {"source_steps", tr.source_steps}, {"heads", std::move(heads)},
                  {"memory", std::move(memory)}};
      out << rec.dump() << '\n';
      ++records;
    }
  }
  return records;
}

// ---------------------------------------------------------------------------
// Command line

namespace {

std::string dashed(std::string key) {
  std::replace(key.begin(), key.end(), '_', '-');
  return key;
}

struct Overrides {
  std::string config_path;
  std::map<std::string, std::string> values;

  void attach(CLI::App* cmd) {
    cmd->add_option("--config", config_path, "config file");
    for (const KeyInfo& k : config_keys()) {
      std::string names = "--" + dashed(k.key);
      if (dashed(k.key) != k.key) names += ",--" + std::string(k.key);
      // repeated flags: the last one wins
      cmd->add_option(names, values[k.key], k.help)->multi_option_policy(CLI::MultiOptionPolicy::TakeLast);
    }
  }

  Config build(CLI::App* cmd) const {
    Config cfg = config_path.empty() ? Config{} : Config::load(config_path);
    for (const KeyInfo& k : config_keys()) {
      if (cmd->count("--" + dashed(k.key)) > 0) cfg.set(k.key, values.at(k.key));
    }
    return cfg;
  }
};

std::vector<std::size_t> default_axis_values(AblationAxis axis, const RunConfig& run) {
  switch (axis) {
    case AblationAxis::BlockK:
    case AblationAxis::WindowWin: return {4, 6, 8, 10, 12};
    case AblationAxis::StrideS: return {1, 2, 4};
    case AblationAxis::InjectLayer: {
      std::vector<std::size_t> v;
      for (std::size_t l = 0; l < run.model.depth; ++l) v.push_back(l);
      return v;
    }
  }
  return {};
}

struct CliState {
  CLI::App* train = nullptr;
  CLI::App* eval = nullptr;
  CLI::App* gradcheck = nullptr;
  CLI::App* ablate = nullptr;
  CLI::App* traces = nullptr;
  std::map<CLI::App*, Overrides> overrides;
  std::string checkpoint;
  std::string split = "test";
  std::size_t max_entries = 0;
  double tolerance = 1e-4;
  std::size_t samples = 2;
  std::string axis;
  std::vector<std::size_t> axis_values;
  std::size_t seed_count = 3;
  std::size_t trace_index = 0;
  std::size_t trace_count = 1;
  std::string trace_out;
};

int dispatch(CLI::App& app, CliState& o) {
  CLI::App* cmd = app.get_subcommands().front();
  RunConfig run = resolve(o.overrides.at(cmd).build(cmd));

  if (cmd == o.train) {
    TrainResult r = run_training(run);
    fmt::print("run {} steps={} best_val_accuracy={:.4f} (epoch {}) test_loss={:.6f} test_accuracy={:.4f}\n",
               run.out.string(), r.steps, r.best_val_accuracy, r.best_epoch, r.test.loss, r.test.accuracy);
    return kExitOk;
  }
  if (cmd == o.eval) {
    Dataset data = build_dataset(run.task);
    report_warnings(data.warnings);
    SequenceModel model(model_for(run, data));
    const std::filesystem::path ckpt = o.checkpoint.empty() ? run.out / "checkpoint_best.bin" : std::filesystem::path(o.checkpoint);
    load_checkpoint(model.params(), ckpt);
    const Split sp = parse_split(o.split);
    EvalResult r = evaluate(model, split_of(data, sp), run.train.batch);
    fmt::print("split={} count={} loss={:.17g} accuracy={:.17g}\n", to_string(sp), r.count, r.loss, r.accuracy);
    return kExitOk;
  }
  if (cmd == o.gradcheck) {
    run.model.precision = Precision::F64;
    Dataset data = build_dataset(run.task);
    report_warnings(data.warnings);
    SequenceModel model(model_for(run, data));
    const std::size_t n = std::min(o.samples, data.train.size());
    if (n == 0) throw ConfigError("n_train", "gradcheck needs training samples");
    SequenceBatch batch = make_batch(std::span<const Sample>(data.train).first(n));
    GradcheckOptions opts;
    opts.max_entries = o.max_entries;
    opts.tolerance = o.tolerance;
    GradcheckReport report = gradcheck(model, batch, opts);
    fmt::print("{}", format_report(report));
    if (!report.pass()) {
      fmt::print("FAIL: gradient mismatch in {}\n", report.first_failure());
      return kExitFailed;
    }
    fmt::print("PASS: {} parameters within {:g}\n", report.rows.size(), o.tolerance);
    return kExitOk;
  }
  if (cmd == o.ablate) {
    const AblationAxis ax = parse_axis(o.axis);
    std::vector<std::uint64_t> seeds;
    for (std::size_t i = 0; i < o.seed_count; ++i) seeds.push_back(run.model.seed + i);
    const auto values = o.axis_values.empty() ? default_axis_values(ax, run) : o.axis_values;
    AblationResult r = run_ablation(run, ax, values, seeds);
    for (const auto& p : r.points) {
      fmt::print("{}={} median={:.4f} min={:.4f} max={:.4f} runs={}\n", to_string(ax), p.value, p.median, p.min,
                 p.max, p.ok);
    }
    return kExitOk;
  }
  if (cmd == o.traces) {
    TraceRequest req;
    req.checkpoint = o.checkpoint.empty() ? run.out / "checkpoint_best.bin" : std::filesystem::path(o.checkpoint);
    req.path = o.trace_out.empty() ? run.out / "traces.jsonl" : std::filesystem::path(o.trace_out);
    req.split = parse_split(o.split);
    req.index = o.trace_index;
    req.count = o.trace_count;
    const std::size_t n = export_traces(run, req);
    fmt::print("wrote {} block records to {}\n", n, req.path.string());
    return kExitOk;
  }
  return kExitConfig;
}

}  // namespace

int run_cli(int argc, char** argv) {
  CLI::App app{"Recurrent models with a non-local block memory: training and experiment harness"};
  app.set_version_flag("--version", build_version());
  app.require_subcommand(1, 1);

  CliState o;
  o.train = app.add_subcommand("train", "train one model and write a run directory");
  o.eval = app.add_subcommand("eval", "evaluate a checkpoint on one split");
  o.gradcheck = app.add_subcommand("gradcheck", "compare analytic and finite-difference gradients (f64)");
  o.ablate = app.add_subcommand("ablate", "sweep one NRNM setting over several seeds");
  o.traces = app.add_subcommand("export-traces", "dump per-block attention weights and memory states");
  for (CLI::App* cmd : {o.train, o.eval, o.gradcheck, o.ablate, o.traces}) o.overrides[cmd].attach(cmd);

  o.eval->add_option("--checkpoint", o.checkpoint, "checkpoint file (default <out>/checkpoint_best.bin)");
  o.eval->add_option("--split", o.split, "train, val or test");
  o.gradcheck->add_option("--max-entries", o.max_entries, "entries per parameter, 0 for all");
  o.gradcheck->add_option("--tolerance", o.tolerance, "largest accepted relative error");
  o.gradcheck->add_option("--samples", o.samples, "sequences in the checked batch");
  o.ablate->add_option("--axis", o.axis, "block_k, window_win, inject_layer or stride_s")->required();
  o.ablate->add_option("--values", o.axis_values, "comma separated values")->delimiter(',');
  o.ablate->add_option("--seeds", o.seed_count, "seeds per value, counting up from --seed");
  o.traces->add_option("--checkpoint", o.checkpoint, "checkpoint file (default <out>/checkpoint_best.bin)");
  o.traces->add_option("--split", o.split, "train, val or test");
  o.traces->add_option("--index", o.trace_index, "first sample of the split");
  o.traces->add_option("--count", o.trace_count, "number of samples");
  o.traces->add_option("--trace-out", o.trace_out, "output file (default <out>/traces.jsonl)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kExitOk : kExitConfig;
  }

  try {
    return dispatch(app, o);
  } catch (const ConfigError& e) {
    fmt::print(stderr, "config error: {}\n", e.what());
    return kExitConfig;
  } catch (const ParseError& e) {
    fmt::print(stderr, "data error: {}\n", e.what());
    return kExitConfig;
  } catch (const DimensionError& e) {
    fmt::print(stderr, "dimension error: {}\n", e.what());
    return kExitConfig;
  } catch (const NumericError& e) {
    fmt::print(stderr, "diverged: {}\n", e.what());
    return kExitDiverged;
  } catch (const std::exception& e) {
    fmt::print(stderr, "error: {}\n", e.what());
    return kExitFailed;
  }
}

}  // namespace nrnm
