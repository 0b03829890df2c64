#pragma once

#include <Eigen/Dense>
#include <string>
#include <vector>

#include "fvla/nn.hpp"
#include "fvla/tensor.hpp"

namespace fvla {

// Peak-to-floor learning-rate decay. The paper states only "decaying";
// linear is the default shape, cosine is available.
struct LrSchedule {
  double peak = 2.5e-5;
  double floor = 2.5e-6;
  long long total_steps = 30000;
  enum class Decay { Linear, Cosine } decay = Decay::Linear;

  double at(long long step) const {
    if (step < 0) throw ConfigError("lr_at: negative step");
    if (total_steps <= 0 || step >= total_steps) return floor;
    double frac = static_cast<double>(step) / static_cast<double>(total_steps);
    if (decay == Decay::Linear) return peak + (floor - peak) * frac;
    return floor + 0.5 * (peak - floor) * (1.0 + std::cos(M_PI * frac));
  }
};

// Adam moments over the concatenated parameter vector, plus the schedule.
struct AdamState {
  Eigen::ArrayXd m;
  Eigen::ArrayXd v;
  long long step = 0;
  double beta1 = 0.9;
  double beta2 = 0.95;
  double epsilon = 1e-8;
  LrSchedule lr;

  static AdamState create(long long numel, LrSchedule schedule = {}) {
    AdamState s;
    s.m = Eigen::ArrayXd::Zero(numel);
    s.v = Eigen::ArrayXd::Zero(numel);
    s.lr = schedule;
    return s;
  }
};

// Global gradient norm across all parameters (zero-grad params count as 0).
double global_grad_norm(const std::vector<std::pair<std::string, Tensor>>& params);

// In-place global-norm clipping; returns the pre-clip norm.
double clip_gradients(std::vector<std::pair<std::string, Tensor>>& params, double max_norm);

// One Adam update with bias correction at lr.at(state.step), clipping the
// global gradient norm to clip_threshold first. Throws NumericalError naming
// the parameter if any gradient is non-finite.
// Returns the pre-clip gradient norm.
double adam_step(std::vector<std::pair<std::string, Tensor>>& params, AdamState& state,
                 double clip_threshold = 1.0);

inline double adam_step(ParamStore& ps, AdamState& state, double clip_threshold = 1.0) {
  auto entries = ps.entries();
  return adam_step(entries, state, clip_threshold);
}

}  // namespace fvla
