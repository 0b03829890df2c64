#pragma once

#include <Eigen/Dense>
#include <filesystem>
#include <string>
#include <vector>

#include "fvla/errors.hpp"

namespace fvla {

// One router decision for one token of one forward pass.
struct TraceRecord {
  std::string episode;
  long long timestep = 0;
  int token = 0;
  std::string role;  // "visual-language" or "force"
  int selected = 0;
  std::vector<double> probs;  // E gate probabilities, summing to 1
};

struct RouterTrace {
  int n_experts = 0;
  std::vector<TraceRecord> records;
};

// CSV with header `episode,timestep,token,role,selected,p0..p{E-1}`.
void write_trace_csv(const std::filesystem::path& path, const RouterTrace& trace);
RouterTrace read_trace_csv(const std::filesystem::path& path);

// Incremental writer used during evaluation; creates the file with a header
// on first use and appends one row per token afterwards.
class TraceWriter {
 public:
  TraceWriter(std::filesystem::path path, int n_experts);
  void append(const TraceRecord& rec);
  const std::filesystem::path& path() const { return path_; }

 private:
  std::filesystem::path path_;
  int n_experts_;
  bool header_written_ = false;
};

// Mean top-1 probability per expert over 100 temporally equidistant
// intervals of each episode's token sequence, averaged across episodes.
struct LoadCurve {
  Eigen::MatrixXd values;  // 100 x E, entries in [0, 1]
  std::string task_label;
  int episode_count = 0;
};

// A token contributes its top-1 probability to its selected expert and 0 to
// the others. Interval j covers token indices [floor(j*L/100),
// floor((j+1)*L/100)); empty intervals inherit the previous interval's value
// (leading empties take the first non-empty value).
LoadCurve percentile_load(const RouterTrace& trace, const std::string& task_label);

// CSV with header `percentile,expert_0,...`; re-parsing reproduces the curve
// exactly.
void write_curve_csv(const std::filesystem::path& path, const LoadCurve& curve);
LoadCurve read_curve_csv(const std::filesystem::path& path);

// Line plot with one polyline per expert, axes 0-100% and 0-1.
void write_curve_svg(const std::filesystem::path& path, const LoadCurve& curve);

// ---------------------------------------------------------------------------
// Evaluation aggregation: success-rate table per (variant, mode).
// ---------------------------------------------------------------------------

struct EvalRun {
  std::string variant;
  std::string mode;
  uint64_t seed = 0;
  int successes = 0;
  int trials = 0;
};

struct EvalCell {
  bool present = false;
  std::vector<double> per_seed;  // success rates in percent, seed order
  double mean = 0.0;
};

struct EvalTable {
  std::vector<std::string> variants;  // row order
  std::vector<std::string> modes;    // column order
  std::vector<std::vector<EvalCell>> cells;  // [variant][mode]
};

EvalTable aggregate_eval(const std::vector<EvalRun>& runs,
                         const std::vector<std::string>& variant_order,
                         const std::vector<std::string>& mode_order);

// Header `variant,<mode...>`; absent cells render as `missing`; a second
// section lists per-seed values.
std::string eval_table_csv(const EvalTable& table);

}  // namespace fvla
