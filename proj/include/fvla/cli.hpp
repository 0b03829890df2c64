#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include "fvla/analytics.hpp"
#include "fvla/dataset.hpp"
#include "fvla/policy.hpp"
#include "fvla/sim.hpp"

namespace fvla {

constexpr int kExitOk = 0;
constexpr int kExitConfig = 2;
constexpr int kExitData = 3;
constexpr int kExitNumerical = 4;

// Everything that defines a run. Fully serialized into the run manifest so a
// run is reconstructible from manifest + dataset hash.
struct RunConfig {
  std::string task = "insert";
  std::string variant = "fvlmoe";
  std::string mode = "nominal";
  uint64_t seed = 0;
  int demos = 50;
  int trials = 20;
  long long train_steps = 2000;
  int jobs = 1;
  std::string run_id;  // empty: derived from timestamp + config hash
  bool force = false;

  std::filesystem::path dataset_dir = "dataset";
  std::filesystem::path runs_dir;  // empty: $FORCEVLA_RUNS_DIR or ./runs

  PolicyConfig policy;
  TrainConfig train;
  SimParams sim;
  int d_action_store = 32;  // serialized action width in .fvd files

  static RunConfig from_kv(const KvText& kv);
  KvText to_kv() const;

  std::filesystem::path runs_root() const;
  std::filesystem::path run_dir() const { return runs_root() / effective_run_id(); }
  std::string effective_run_id() const;
  void validate() const;
};

// collect: scripted-expert demonstrations (successes only) into dataset_dir.
std::filesystem::path cmd_collect(const RunConfig& cfg);

// train: fit the configured variant on the dataset; writes checkpoint.fvla,
// metrics.csv and manifest.txt under the run directory.
std::filesystem::path cmd_train(const RunConfig& cfg);

// eval: roll out the checkpointed policy; writes episodes.csv and traces.csv
// under <run>/eval_<mode>_seed<seed>/.
std::filesystem::path cmd_eval(const RunConfig& cfg, const std::string& run_id);

// analyze: success-rate table over the given runs plus router-load curves;
// outputs under runs/<first run id>/analysis/.
std::filesystem::path cmd_analyze(const RunConfig& cfg, const std::vector<std::string>& run_ids);

// plot: SVG line plots next to every load-curve CSV in the run's analysis.
std::filesystem::path cmd_plot(const RunConfig& cfg, const std::string& run_id);

// gradcheck: finite-difference suites (primitives + end-to-end graph).
// Returns the worst relative error observed.
double cmd_gradcheck(int prim_trials, int e2e_seeds, uint64_t seed, std::ostream& out);

}  // namespace fvla
