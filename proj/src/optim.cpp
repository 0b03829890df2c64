#include "fvla/optim.hpp"

#include <cmath>

namespace fvla {

double global_grad_norm(const std::vector<std::pair<std::string, Tensor>>& params) {
  double sq = 0.0;
  for (const auto& [name, t] : params) {
    if (!t.has_grad()) continue;
    sq += t.grad().square().sum();
  }
  return std::sqrt(sq);
}

double clip_gradients(std::vector<std::pair<std::string, Tensor>>& params, double max_norm) {
  double norm = global_grad_norm(params);
  if (norm > max_norm && norm > 0.0) {
    double scale = max_norm / norm;
    for (auto& [name, t] : params) {
      if (t.has_grad()) t.grad_mut() *= scale;
    }
  }
  return norm;
}

double adam_step(std::vector<std::pair<std::string, Tensor>>& params, AdamState& state,
                 double clip_threshold) {
  long long total = 0;
  for (const auto& [name, t] : params) total += t.numel();
  if (state.m.size() != total) {
    throw NumericalError("adam_step: state sized for " + std::to_string(state.m.size()) +
                         " values but parameters hold " + std::to_string(total));
  }
  for (auto& [name, t] : params) {
    if (!t.has_grad()) t.zero_grad();
    if (!t.grad().isFinite().all()) {
      throw NumericalError("adam_step: non-finite gradient in parameter '" + name + "'");
    }
  }

  double pre_clip_norm = clip_gradients(params, clip_threshold);

  state.step += 1;
  const double lr = state.lr.at(state.step - 1);
  const double bc1 = 1.0 - std::pow(state.beta1, static_cast<double>(state.step));
  const double bc2 = 1.0 - std::pow(state.beta2, static_cast<double>(state.step));

  long long off = 0;
  for (auto& [name, t] : params) {
    const long long n = t.numel();
    auto m_seg = state.m.segment(off, n);
    auto v_seg = state.v.segment(off, n);
    const auto& g = t.grad();
    m_seg = state.beta1 * m_seg + (1.0 - state.beta1) * g;
    v_seg = state.beta2 * v_seg + (1.0 - state.beta2) * g.square();
    t.data() -= lr * (m_seg / bc1) / ((v_seg / bc2).sqrt() + state.epsilon);
    off += n;
  }
  return pre_clip_norm;
}

}  // namespace fvla
