#include "fvla/gradcheck.hpp"

#include <algorithm>
#include <cmath>

namespace fvla {

namespace {

constexpr double kScaleFloor = 1e-3;

double rel_err(double fd, double an) {
  double scale = std::max({std::abs(fd), std::abs(an), kScaleFloor});
  return std::abs(fd - an) / scale;
}

std::vector<long long> pick_coords(long long numel, int max_coords, Rng& rng) {
  std::vector<long long> coords;
  if (numel <= max_coords) {
    coords.resize(numel);
    for (long long i = 0; i < numel; ++i) coords[i] = i;
    return coords;
  }
  // Sample without replacement.
  std::vector<long long> pool(numel);
  for (long long i = 0; i < numel; ++i) pool[i] = i;
  for (int i = 0; i < max_coords; ++i) {
    long long j = i + rng.uniform_int(static_cast<int>(numel - i));
    std::swap(pool[i], pool[j]);
    coords.push_back(pool[i]);
  }
  return coords;
}

}  // namespace

GradCheckReport fd_check(const std::function<Tensor()>& build,
                         const std::vector<std::pair<std::string, Tensor>>& leaves,
                         double h, int max_coords_per_leaf, Rng& rng,
                         const std::string& label) {
  GradCheckReport report;

  for (const auto& [name, leaf] : leaves) {
    const_cast<Tensor&>(leaf).zero_grad();
  }
  Tensor loss = build();
  loss.backward();

  std::vector<Eigen::ArrayXd> analytic;
  analytic.reserve(leaves.size());
  for (const auto& [name, leaf] : leaves) {
    analytic.push_back(leaf.has_grad() ? leaf.grad() : Eigen::ArrayXd::Zero(leaf.numel()));
  }

  for (size_t li = 0; li < leaves.size(); ++li) {
    Tensor leaf = leaves[li].second;
    for (long long c : pick_coords(leaf.numel(), max_coords_per_leaf, rng)) {
      const double orig = leaf.data()[c];
      leaf.data()[c] = orig + h;
      const double lp = build().value();
      leaf.data()[c] = orig - h;
      const double lm = build().value();
      leaf.data()[c] = orig;
      const double fd = (lp - lm) / (2.0 * h);
      const double err = rel_err(fd, analytic[li][c]);
      ++report.checks;
      if (err > report.max_rel_err) {
        report.max_rel_err = err;
        report.worst = label + ":" + leaves[li].first + "[" + std::to_string(c) + "]";
      }
    }
  }
  return report;
}

namespace {

Tensor randn(Shape shape, Rng& rng, bool requires_grad) {
  Tensor t = Tensor::zeros(std::move(shape), requires_grad);
  for (long long i = 0; i < t.numel(); ++i) t.data()[i] = rng.normal();
  return t;
}

// Scalarize an op output with a fixed random cotangent so every output
// coordinate participates with a distinct weight.
Tensor weighted(const Tensor& out, const Tensor& w) { return sum(mul(out, w)); }

struct OpCase {
  std::string name;
  std::function<GradCheckReport(Rng&)> run;
};

GradCheckReport check_unary(const std::string& name, const std::function<Tensor(const Tensor&)>& op,
                            Rng& rng) {
  int m = 1 + rng.uniform_int(8), n = 1 + rng.uniform_int(8);
  Tensor x = randn({m, n}, rng, true);
  Tensor w = randn(op(x).shape(), rng, false);
  return fd_check([&] { return weighted(op(x), w); }, {{"x", x}}, 1e-6, 64, rng, name);
}

GradCheckReport check_binary_same(const std::string& name,
                                  const std::function<Tensor(const Tensor&, const Tensor&)>& op,
                                  Rng& rng) {
  int m = 1 + rng.uniform_int(8), n = 1 + rng.uniform_int(8);
  Tensor a = randn({m, n}, rng, true);
  Tensor b = randn({m, n}, rng, true);
  Tensor w = randn(op(a, b).shape(), rng, false);
  return fd_check([&] { return weighted(op(a, b), w); }, {{"a", a}, {"b", b}}, 1e-6, 64, rng, name);
}

}  // namespace

GradCheckReport primitive_gradcheck(int n_trials, uint64_t seed) {
  GradCheckReport total;
  std::vector<OpCase> cases;

  cases.push_back({"add", [](Rng& r) { return check_binary_same("add", [](auto& a, auto& b) { return add(a, b); }, r); }});
  cases.push_back({"sub", [](Rng& r) { return check_binary_same("sub", [](auto& a, auto& b) { return sub(a, b); }, r); }});
  cases.push_back({"mul", [](Rng& r) { return check_binary_same("mul", [](auto& a, auto& b) { return mul(a, b); }, r); }});
  cases.push_back({"mse", [](Rng& r) { return check_binary_same("mse", [](auto& a, auto& b) { return as_row(mse(a, b)); }, r); }});
  cases.push_back({"scale", [](Rng& r) { return check_unary("scale", [](auto& x) { return scale(x, 1.7); }, r); }});
  cases.push_back({"gelu", [](Rng& r) { return check_unary("gelu", [](auto& x) { return gelu(x); }, r); }});
  cases.push_back({"swish", [](Rng& r) { return check_unary("swish", [](auto& x) { return swish(x); }, r); }});
  cases.push_back({"sigmoid", [](Rng& r) { return check_unary("sigmoid", [](auto& x) { return sigmoid(x); }, r); }});
  cases.push_back({"softmax", [](Rng& r) { return check_unary("softmax", [](auto& x) { return softmax(x); }, r); }});
  cases.push_back({"layer_norm", [](Rng& r) { return check_unary("layer_norm", [](auto& x) { return layer_norm(x); }, r); }});
  cases.push_back({"transpose", [](Rng& r) { return check_unary("transpose", [](auto& x) { return transpose(x); }, r); }});
  cases.push_back({"mean", [](Rng& r) { return check_unary("mean", [](auto& x) { return as_row(mean(x)); }, r); }});
  cases.push_back({"sum", [](Rng& r) { return check_unary("sum", [](auto& x) { return as_row(sum(x)); }, r); }});

  cases.push_back({"matmul", [](Rng& rng) {
    int m = 1 + rng.uniform_int(8), k = 1 + rng.uniform_int(8), n = 1 + rng.uniform_int(8);
    Tensor a = randn({m, k}, rng, true);
    Tensor b = randn({k, n}, rng, true);
    Tensor w = randn({m, n}, rng, false);
    return fd_check([&] { return weighted(matmul(a, b), w); }, {{"a", a}, {"b", b}}, 1e-6, 64,
                    rng, "matmul");
  }});

  cases.push_back({"reshape", [](Rng& rng) {
    int m = 1 + rng.uniform_int(8), n = 1 + rng.uniform_int(8);
    Tensor x = randn({m, n}, rng, true);
    Tensor w = randn({m * n}, rng, false);
    return fd_check([&] { return weighted(reshape(x, {m * n}), w); }, {{"x", x}}, 1e-6, 64, rng,
                    "reshape");
  }});

  cases.push_back({"add_rowvec", [](Rng& rng) {
    int m = 1 + rng.uniform_int(8), n = 1 + rng.uniform_int(8);
    Tensor x = randn({m, n}, rng, true);
    Tensor b = randn({n}, rng, true);
    Tensor w = randn({m, n}, rng, false);
    return fd_check([&] { return weighted(add_rowvec(x, b), w); }, {{"x", x}, {"b", b}}, 1e-6, 64,
                    rng, "add_rowvec");
  }});

  cases.push_back({"mul_rowvec", [](Rng& rng) {
    int m = 1 + rng.uniform_int(8), n = 1 + rng.uniform_int(8);
    Tensor x = randn({m, n}, rng, true);
    Tensor g = randn({n}, rng, true);
    Tensor w = randn({m, n}, rng, false);
    return fd_check([&] { return weighted(mul_rowvec(x, g), w); }, {{"x", x}, {"g", g}}, 1e-6, 64,
                    rng, "mul_rowvec");
  }});

  cases.push_back({"mul_colvec", [](Rng& rng) {
    int m = 1 + rng.uniform_int(8), n = 1 + rng.uniform_int(8);
    Tensor x = randn({m, n}, rng, true);
    Tensor wv = randn({m}, rng, true);
    Tensor w = randn({m, n}, rng, false);
    return fd_check([&] { return weighted(mul_colvec(x, wv), w); }, {{"x", x}, {"w", wv}}, 1e-6, 64,
                    rng, "mul_colvec");
  }});

  cases.push_back({"concat_rows", [](Rng& rng) {
    int n = 1 + rng.uniform_int(8);
    int m1 = 1 + rng.uniform_int(4), m2 = 1 + rng.uniform_int(4);
    Tensor a = randn({m1, n}, rng, true);
    Tensor b = randn({m2, n}, rng, true);
    Tensor w = randn({m1 + m2, n}, rng, false);
    return fd_check([&] { return weighted(concat_rows<double>({a, b}), w); }, {{"a", a}, {"b", b}},
                    1e-6, 64, rng, "concat_rows");
  }});

  cases.push_back({"slice_rows", [](Rng& rng) {
    int m = 2 + rng.uniform_int(7), n = 1 + rng.uniform_int(8);
    int start = rng.uniform_int(m - 1);
    int len = 1 + rng.uniform_int(m - start - 1 > 0 ? m - start - 1 : 1);
    Tensor x = randn({m, n}, rng, true);
    Tensor w = randn({len, n}, rng, false);
    return fd_check([&] { return weighted(slice_rows(x, start, len), w); }, {{"x", x}}, 1e-6, 64,
                    rng, "slice_rows");
  }});

  cases.push_back({"concat_cols", [](Rng& rng) {
    int m = 1 + rng.uniform_int(8);
    int n1 = 1 + rng.uniform_int(4), n2 = 1 + rng.uniform_int(4);
    Tensor a = randn({m, n1}, rng, true);
    Tensor b = randn({m, n2}, rng, true);
    Tensor w = randn({m, n1 + n2}, rng, false);
    return fd_check([&] { return weighted(concat_cols<double>({a, b}), w); }, {{"a", a}, {"b", b}},
                    1e-6, 64, rng, "concat_cols");
  }});

  cases.push_back({"slice_cols", [](Rng& rng) {
    int m = 1 + rng.uniform_int(8), n = 2 + rng.uniform_int(7);
    int start = rng.uniform_int(n - 1);
    int len = 1 + rng.uniform_int(n - start - 1 > 0 ? n - start - 1 : 1);
    Tensor x = randn({m, n}, rng, true);
    Tensor w = randn({m, len}, rng, false);
    return fd_check([&] { return weighted(slice_cols(x, start, len), w); }, {{"x", x}}, 1e-6, 64,
                    rng, "slice_cols");
  }});

  cases.push_back({"take_per_row", [](Rng& rng) {
    int m = 1 + rng.uniform_int(8), n = 1 + rng.uniform_int(8);
    Tensor p = randn({m, n}, rng, true);
    std::vector<int> idx(m);
    for (int r = 0; r < m; ++r) idx[r] = rng.uniform_int(n);
    Tensor w = randn({m}, rng, false);
    return fd_check([&] { return weighted(take_per_row(p, idx), w); }, {{"p", p}}, 1e-6, 64, rng,
                    "take_per_row");
  }});

  cases.push_back({"attention", [](Rng& rng) {
    int nq = 1 + rng.uniform_int(6), nk = 1 + rng.uniform_int(6);
    int d = 1 + rng.uniform_int(6), dv = 1 + rng.uniform_int(6);
    Tensor q = randn({nq, d}, rng, true);
    Tensor k = randn({nk, d}, rng, true);
    Tensor v = randn({nk, dv}, rng, true);
    Tensor w = randn({nq, dv}, rng, false);
    return fd_check([&] { return weighted(attention(q, k, v), w); },
                    {{"q", q}, {"k", k}, {"v", v}}, 1e-6, 64, rng, "attention");
  }});

  for (const auto& op : cases) {
    Rng rng(seed ^ fnv1a(op.name));
    for (int t = 0; t < n_trials; ++t) {
      total.merge(op.run(rng));
    }
  }
  return total;
}

}  // namespace fvla
