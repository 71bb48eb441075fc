#pragma once

// Experiment commands behind the `nrnm` binary. Each returns normally on
// success and reports failures through the library exceptions; run_cli maps
// those to exit codes.

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "nrnm/config.hpp"
#include "nrnm/training.hpp"

namespace nrnm {

enum ExitCode : int {
  kExitOk = 0,
  kExitFailed = 1,  // gradcheck mismatch, I/O trouble
  kExitConfig = 2,
  kExitDiverged = 3,
};

const char* build_version();

// Writes <out>/manifest.cfg, then trains (metrics.csv and checkpoints in out).
TrainResult run_training(const RunConfig& run);

enum class AblationAxis { BlockK, WindowWin, InjectLayer, StrideS };

const char* to_string(AblationAxis axis);
AblationAxis parse_axis(const std::string& name);

struct AblationRun {
  std::size_t value = 0;
  std::uint64_t seed = 0;
  double accuracy = 0.0;  // NaN when the run failed
  std::string error;
};

struct AblationPoint {
  std::size_t value = 0;
  double median = 0.0;
  double min = 0.0;
  double max = 0.0;
  std::size_t ok = 0;
};

struct AblationResult {
  AblationAxis axis = AblationAxis::BlockK;
  std::vector<AblationRun> runs;
  std::vector<AblationPoint> points;
};

// One training run per (value, seed) under <out>/<axis>=<value>/seed=<seed>.
// Writes <out>/ablation.csv (axis,value,seed,accuracy) and
// <out>/ablation_plot.csv (axis,value,median,min,max,runs). Failed runs are
// recorded as nan and the sweep continues.
AblationResult run_ablation(const RunConfig& base, AblationAxis axis, const std::vector<std::size_t>& values,
                            const std::vector<std::uint64_t>& seeds);

// Median of the finite entries; NaN when there are none.
double median(std::vector<double> xs);

struct TraceRequest {
  std::filesystem::path checkpoint;
  std::filesystem::path path;
  Split split = Split::Test;
  std::size_t index = 0;
  std::size_t count = 1;
};

// JSON lines: a header object, then one object per (block, sequence).
// Returns the number of block records written.
std::size_t export_traces(const RunConfig& run, const TraceRequest& request);

int run_cli(int argc, char** argv);

}  // namespace nrnm
