#pragma once

#include <functional>
#include <string>
#include <vector>

#include "fvla/rng.hpp"
#include "fvla/tensor.hpp"

namespace fvla {

struct GradCheckReport {
  int checks = 0;
  double max_rel_err = 0.0;
  std::string worst;  // where the max was observed

  bool ok(double tol) const { return checks > 0 && max_rel_err <= tol; }
  void merge(const GradCheckReport& o) {
    checks += o.checks;
    if (o.max_rel_err > max_rel_err) {
      max_rel_err = o.max_rel_err;
      worst = o.worst;
    }
  }
};

// Central finite differences of a scalar graph against reverse-mode
// gradients. `build` must construct a fresh forward pass from the current
// leaf values. Checks up to max_coords_per_leaf coordinates per leaf
// (all of them when the leaf is small). Relative error uses a scale floor
// of 1e-3 so near-zero gradients are compared absolutely.
GradCheckReport fd_check(const std::function<Tensor()>& build,
                         const std::vector<std::pair<std::string, Tensor>>& leaves,
                         double h, int max_coords_per_leaf, Rng& rng,
                         const std::string& label);

// Finite-difference sweep over every tensor primitive on randomized shapes
// (extents <= 8), n_trials trials per op. This is the suite behind the
// `gradcheck` CLI subcommand.
GradCheckReport primitive_gradcheck(int n_trials, uint64_t seed);

}  // namespace fvla
