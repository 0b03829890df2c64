#include <doctest.h>

#include <cstring>

#include "fvla/gradcheck.hpp"
#include "fvla/nn.hpp"
#include "fvla/optim.hpp"
#include "fvla/rng.hpp"
#include "fvla/tensor.hpp"

using namespace fvla;

namespace {

Tensor randn(Shape shape, Rng& rng, bool rg = false) {
  Tensor t = Tensor::zeros(std::move(shape), rg);
  for (long long i = 0; i < t.numel(); ++i) t.data()[i] = rng.normal();
  return t;
}

}  // namespace

TEST_CASE("square derivative: y = x*x at x=3 gives dy/dx = 6") {
  Tensor x = Tensor::scalar(3.0, true);
  Tensor y = mul(x, x);
  y.backward();
  CHECK(y.value() == doctest::Approx(9.0));
  CHECK(x.grad()[0] == doctest::Approx(6.0).epsilon(1e-12));
}

TEST_CASE("softmax of zero logits is uniform and sum-gradient is exactly zero") {
  Tensor logits = Tensor::from({4}, {0.0, 0.0, 0.0, 0.0}, true);
  Tensor probs = softmax(logits);
  for (int i = 0; i < 4; ++i) CHECK(probs.item(i) == doctest::Approx(0.25).epsilon(1e-15));

  Tensor total = sum(probs);
  total.backward();
  for (int i = 0; i < 4; ++i) CHECK(logits.grad()[i] == 0.0);
}

TEST_CASE("matmul gradients match central finite differences (h=1e-6)") {
  Rng rng(7);
  Tensor a = randn({4, 3}, rng, true);
  Tensor b = randn({3, 2}, rng, true);
  Rng pick(11);
  auto report = fd_check([&] { return mean(matmul(a, b)); }, {{"a", a}, {"b", b}}, 1e-6, 64, pick,
                         "matmul_mean");
  CHECK(report.checks == 18);
  CHECK(report.max_rel_err <= 1e-5);
}

TEST_CASE("shape mismatch names both shapes") {
  Tensor a = Tensor::zeros({2, 3});
  Tensor b = Tensor::zeros({3, 2});
  try {
    add(a, b);
    FAIL("expected ShapeError");
  } catch (const ShapeError& e) {
    std::string msg = e.what();
    CHECK(msg.find("(2, 3)") != std::string::npos);
    CHECK(msg.find("(3, 2)") != std::string::npos);
  }
}

TEST_CASE("backward on a non-scalar root is an error") {
  Tensor x = Tensor::zeros({2, 2}, true);
  Tensor y = add(x, x);
  CHECK_THROWS_AS(y.backward(), GraphError);
}

TEST_CASE("softmax rows sum to 1 within 1e-12 and are non-negative") {
  Rng rng(21);
  for (int trial = 0; trial < 20; ++trial) {
    int m = 1 + rng.uniform_int(8), n = 1 + rng.uniform_int(8);
    Tensor x = randn({m, n}, rng);
    Tensor y = softmax(x);
    for (int r = 0; r < m; ++r) {
      double s = 0.0;
      for (int c = 0; c < n; ++c) {
        CHECK(y.at(r, c) >= 0.0);
        s += y.at(r, c);
      }
      CHECK(std::abs(s - 1.0) <= 1e-12);
    }
  }
}

TEST_CASE("layer_norm rows have near-zero mean and unit variance before affine") {
  Rng rng(22);
  for (int trial = 0; trial < 20; ++trial) {
    int m = 1 + rng.uniform_int(6);
    int n = 4 + rng.uniform_int(5);
    Tensor x = randn({m, n}, rng);
    Tensor y = layer_norm(x, 1e-12);
    for (int r = 0; r < m; ++r) {
      double mean_v = 0.0, var_v = 0.0;
      for (int c = 0; c < n; ++c) mean_v += y.at(r, c);
      mean_v /= n;
      for (int c = 0; c < n; ++c) var_v += (y.at(r, c) - mean_v) * (y.at(r, c) - mean_v);
      var_v /= n;
      CHECK(std::abs(mean_v) <= 1e-10);
      CHECK(std::abs(var_v - 1.0) <= 1e-8);
    }
  }
}

TEST_CASE("every primitive matches finite differences over randomized trials") {
  auto report = primitive_gradcheck(100, 12345);
  INFO("worst: ", report.worst, " rel err ", report.max_rel_err);
  CHECK(report.checks > 100);
  CHECK(report.max_rel_err <= 1e-5);
}

TEST_CASE("gradients are finite for finite inputs across a mixed graph") {
  Rng rng(33);
  Tensor x = randn({5, 6}, rng, true);
  Tensor w = randn({6, 4}, rng, true);
  Tensor g = randn({4}, rng, true);
  Tensor b = randn({4}, rng, true);
  Tensor h = add_rowvec(mul_rowvec(layer_norm(matmul(gelu(x), w)), g), b);
  Tensor loss = mean(mul(softmax(h), h));
  loss.backward();
  for (const Tensor& t : {x, w, g, b}) {
    REQUIRE(t.has_grad());
    CHECK(t.grad().isFinite().all());
  }
}

TEST_CASE("attention over a single key reduces to the value projection") {
  Rng rng(44);
  Tensor q = randn({1, 4}, rng);
  Tensor k = randn({1, 4}, rng);
  Tensor v = randn({1, 3}, rng);
  Tensor out = attention(q, k, v);
  for (int c = 0; c < 3; ++c) CHECK(out.at(0, c) == doctest::Approx(v.at(0, c)).epsilon(1e-15));
}

TEST_CASE("parameter gradients accumulate across backward calls until zero_grad") {
  Tensor x = Tensor::scalar(2.0, true);
  mul(x, x).backward();
  CHECK(x.grad()[0] == doctest::Approx(4.0));
  mul(x, x).backward();
  CHECK(x.grad()[0] == doctest::Approx(8.0));
  x.zero_grad();
  CHECK(x.grad()[0] == 0.0);
}

TEST_CASE("identical seeds give bitwise-identical loss traces for 100 steps") {
  auto run = [](uint64_t seed) {
    ParamStore ps(seed);
    Linear lin = Linear::create(ps, "lin", 3, 1);
    AdamState adam = AdamState::create(ps.total_numel(), {1e-2, 1e-3, 1000, LrSchedule::Decay::Linear});
    Rng rng(seed + 1);
    std::vector<double> losses;
    for (int step = 0; step < 100; ++step) {
      Tensor x = randn({8, 3}, rng);
      Tensor target = randn({8, 1}, rng);
      ps.zero_grad();
      Tensor loss = mse(lin(x), target);
      loss.backward();
      adam_step(ps, adam);
      losses.push_back(loss.value());
    }
    return losses;
  };
  auto a = run(3), b = run(3);
  REQUIRE(a.size() == b.size());
  CHECK(std::memcmp(a.data(), b.data(), a.size() * sizeof(double)) == 0);
}
