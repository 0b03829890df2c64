#include <doctest.h>

#include <cstring>
#include <filesystem>

#include "fvla/policy.hpp"

using namespace fvla;
namespace fs = std::filesystem;

namespace {

PolicyConfig tiny_config(PolicyVariant v) {
  PolicyConfig cfg;
  cfg.fusion.d_model = 16;
  cfg.fusion.d_act = 8;
  cfg.fusion.n_heads = 2;
  cfg.fusion.n_experts = 3;
  cfg.fusion.top_k = 1;
  cfg.fusion.h_action = 2;
  cfg.grid = 8;
  cfg.patch = 4;
  cfg.n_ctx_blocks = 1;
  cfg.d_state = 8;
  cfg.action_width = 2;
  cfg.sim_action_dims = 2;
  cfg.variant = v;
  return cfg;
}

Observation tiny_obs(const PolicyConfig& cfg, uint64_t seed, int instruction = 0) {
  Rng rng(seed);
  Observation o;
  o.base_view = Eigen::ArrayXXd::Zero(cfg.grid, cfg.grid);
  o.wrist_view = Eigen::ArrayXXd::Zero(cfg.grid, cfg.grid);
  for (int r = 0; r < cfg.grid; ++r) {
    for (int c = 0; c < cfg.grid; ++c) {
      o.base_view(r, c) = rng.uniform();
      o.wrist_view(r, c) = rng.uniform();
    }
  }
  o.state = Eigen::VectorXd::Zero(cfg.d_state);
  for (int i = 0; i < 4; ++i) o.state[i] = rng.normal() * 0.01;
  o.wrench.setZero();
  o.wrench[0] = 1.5;
  o.wrench[1] = 2.0;
  o.wrench[5] = 0.01;
  o.instruction = instruction;
  return o;
}

Eigen::MatrixXd random_chunk(int h, int w, uint64_t seed) {
  Rng rng(seed);
  Eigen::MatrixXd m(h, w);
  for (int r = 0; r < h; ++r) {
    for (int c = 0; c < w; ++c) m(r, c) = rng.normal();
  }
  return m;
}

PolicyModel tiny_model(PolicyVariant v, uint64_t seed = 7) {
  PolicyConfig cfg = tiny_config(v);
  return PolicyModel(cfg, NormStats::identity(cfg.d_state, cfg.action_width), seed);
}

void zero_params_with_prefix(ParamStore& ps, const std::string& prefix) {
  for (const auto& [name, t] : ps.entries()) {
    if (name.rfind(prefix, 0) == 0) {
      Tensor handle = t;
      handle.data().setZero();
    }
  }
}

Episode constant_episode(const PolicyConfig& cfg, int n_steps, double action_value,
                         int instruction) {
  Episode ep;
  ep.manifest.set_int("episode.task", instruction);
  for (int i = 0; i < n_steps; ++i) {
    Timestep ts;
    ts.timestamp = 0.05 * i;
    ts.obs = tiny_obs(cfg, 99, instruction);
    ts.action = Eigen::VectorXd::Constant(cfg.action_width, action_value);
    ep.steps.push_back(ts);
  }
  return ep;
}

}  // namespace

TEST_CASE("patch arithmetic: 16x16 grids with patch 4 give N_VL = 33") {
  PolicyConfig cfg;  // desk defaults
  CHECK(cfg.patches_per_view() == 16);
  CHECK(cfg.n_vl() == 33);
  CHECK(cfg.n_ctx_tokens() == 33);
  PolicyConfig early = cfg;
  early.variant = PolicyVariant::LinearBeforeVLM;
  CHECK(early.n_ctx_tokens() == 34);

  PolicyConfig bad = cfg;
  bad.patch = 5;
  CHECK_THROWS_AS(bad.validate(), ConfigError);
}

TEST_CASE("identical observations encode to identical context embeddings") {
  PolicyModel model = tiny_model(PolicyVariant::FVLMoE);
  Observation obs = tiny_obs(model.config(), 3);
  Tensor a = model.encode_context(obs).e_vl;
  Tensor b = model.encode_context(obs).e_vl;
  CHECK(a.shape() == b.shape());
  for (long long i = 0; i < a.numel(); ++i) CHECK(a.data()[i] == b.data()[i]);
}

TEST_CASE("masking pixels changes only patch tokens that overlap the mask") {
  PolicyModel model = tiny_model(PolicyVariant::NoForce);
  const PolicyConfig& cfg = model.config();
  Observation obs = tiny_obs(cfg, 4);
  Observation masked = obs;
  // Zero the top-left 4x4 patch of the base view only.
  for (int r = 0; r < 4; ++r) {
    for (int c = 0; c < 4; ++c) masked.base_view(r, c) = 0.0;
  }
  Tensor t0 = model.patch_tokens(obs);
  Tensor t1 = model.patch_tokens(masked);
  const int d = cfg.fusion.d_model;
  // Token 0 is the masked base patch; every other token is untouched.
  bool changed = false;
  for (int c = 0; c < d; ++c) changed |= t0.at(0, c) != t1.at(0, c);
  CHECK(changed);
  for (int r = 1; r < t0.rows(); ++r) {
    for (int c = 0; c < d; ++c) CHECK(t0.at(r, c) == t1.at(r, c));
  }
}

TEST_CASE("Swish MLP at zero input passes only the final-layer bias") {
  ParamStore ps(1);
  Mlp2 mlp = Mlp2::create(ps, "m", 4, 4, 3, Activation::Swish);
  Tensor b2 = ps.get("m.fc2.b");
  b2.data() << 0.5, -1.25, 2.0;
  Tensor out = mlp(Tensor::zeros({2, 4}));
  for (int r = 0; r < 2; ++r) {
    CHECK(out.at(r, 0) == 0.5);
    CHECK(out.at(r, 1) == -1.25);
    CHECK(out.at(r, 2) == 2.0);
  }
}

TEST_CASE("tau embedding separates tau=0 from tau=1 in every sinusoid pair") {
  const int dim = 16;
  Eigen::VectorXd e0 = tau_embedding(0.0, dim);
  Eigen::VectorXd e1 = tau_embedding(1.0, dim);
  for (int i = 0; i < dim / 2; ++i) {
    bool pair_differs = e0[2 * i] != e1[2 * i] || e0[2 * i + 1] != e1[2 * i + 1];
    CHECK(pair_differs);
  }
  // Frequencies are distinct across pairs.
  Eigen::VectorXd probe = tau_embedding(0.37, dim);
  for (int i = 1; i < dim / 2; ++i) CHECK(probe[2 * i] != probe[2 * (i - 1)]);
}

TEST_CASE("zeroed joint attention reduces the suffix to the per-step MLP outputs") {
  PolicyModel model = tiny_model(PolicyVariant::NoForce);
  for (const char* part : {"suffix.joint.attn.wq", "suffix.joint.attn.wk", "suffix.joint.attn.wv",
                           "suffix.joint.attn.wo", "suffix.joint.ffn.fc1",
                           "suffix.joint.ffn.fc2"}) {
    zero_params_with_prefix(model.params(), part);
  }
  const PolicyConfig& cfg = model.config();
  Observation obs = tiny_obs(cfg, 5);
  Eigen::MatrixXd a_tau = random_chunk(cfg.horizon(), cfg.action_width, 6);
  const double tau = 0.3;
  Tensor suffix = model.build_suffix(model.encode_context(obs), obs, a_tau, tau);

  // Oracle: action projection + tau embedding through the Swish MLP, raw Eigen.
  using MatRM = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
  auto matrix_of = [&](const std::string& name) {
    Tensor t = model.params().get(name);
    return Eigen::Map<const MatRM>(t.data().data(), t.rows(), t.cols()).eval();
  };
  auto vector_of = [&](const std::string& name) {
    Tensor t = model.params().get(name);
    return Eigen::Map<const Eigen::VectorXd>(t.data().data(), t.numel()).eval();
  };
  Eigen::MatrixXd ap_w = matrix_of("suffix.action_proj.w");
  Eigen::VectorXd ap_b = vector_of("suffix.action_proj.b");
  Eigen::MatrixXd m1_w = matrix_of("suffix.at_mlp.fc1.w");
  Eigen::VectorXd m1_b = vector_of("suffix.at_mlp.fc1.b");
  Eigen::MatrixXd m2_w = matrix_of("suffix.at_mlp.fc2.w");
  Eigen::VectorXd m2_b = vector_of("suffix.at_mlp.fc2.b");
  Eigen::VectorXd emb = tau_embedding(tau, cfg.fusion.d_act);
  for (int hrow = 0; hrow < cfg.horizon(); ++hrow) {
    Eigen::VectorXd a_emb = ap_w.transpose() * a_tau.row(hrow).transpose() + ap_b;
    Eigen::VectorXd cat(a_emb.size() + emb.size());
    cat << a_emb, emb;
    Eigen::VectorXd hmid = m1_w.transpose() * cat + m1_b;
    for (int i = 0; i < hmid.size(); ++i) hmid[i] = hmid[i] / (1.0 + std::exp(-hmid[i]));
    Eigen::VectorXd expect = m2_w.transpose() * hmid + m2_b;
    for (int c = 0; c < cfg.fusion.d_act; ++c) {
      CHECK(suffix.at(hrow, c) == doctest::Approx(expect[c]).epsilon(1e-12));
    }
  }
}

TEST_CASE("FVLMoE with zeroed fusion parameters equals NoForce bitwise") {
  PolicyModel fv = tiny_model(PolicyVariant::FVLMoE, 11);
  PolicyModel nf = tiny_model(PolicyVariant::NoForce, 11);
  zero_params_with_prefix(fv.params(), "fusion.");

  const PolicyConfig& cfg = fv.config();
  Observation obs = tiny_obs(cfg, 8);
  Eigen::MatrixXd a_tau = random_chunk(cfg.horizon(), cfg.action_width, 9);
  Tensor va = fv.predict_velocity(obs, a_tau, 0.4).v;
  Tensor vb = nf.predict_velocity(obs, a_tau, 0.4).v;
  REQUIRE(va.shape() == vb.shape());
  for (long long i = 0; i < va.numel(); ++i) CHECK(va.data()[i] == vb.data()[i]);
}

TEST_CASE("NoForce velocity is exactly invariant to wrench perturbations") {
  PolicyModel model = tiny_model(PolicyVariant::NoForce);
  const PolicyConfig& cfg = model.config();
  Observation obs = tiny_obs(cfg, 10);
  Eigen::MatrixXd a_tau = random_chunk(cfg.horizon(), cfg.action_width, 11);
  Tensor v0 = model.predict_velocity(obs, a_tau, 0.7).v;
  obs.wrench[0] += 5.0;
  obs.wrench[5] -= 2.0;
  Tensor v1 = model.predict_velocity(obs, a_tau, 0.7).v;
  for (long long i = 0; i < v0.numel(); ++i) CHECK(v0.data()[i] == v1.data()[i]);
}

TEST_CASE("force-aware variants respond to wrench perturbations") {
  for (PolicyVariant v : {PolicyVariant::ForceConcatState, PolicyVariant::FVLMoE,
                          PolicyVariant::LinearBeforeVLM, PolicyVariant::ConcatAfterVLM,
                          PolicyVariant::MoEBeforeVLM}) {
    PolicyModel model = tiny_model(v, 13);
    const PolicyConfig& cfg = model.config();
    Observation obs = tiny_obs(cfg, 12);
    Eigen::MatrixXd a_tau = random_chunk(cfg.horizon(), cfg.action_width, 13);
    Tensor v0 = model.predict_velocity(obs, a_tau, 0.2).v;
    obs.wrench[0] += 3.0;
    Tensor v1 = model.predict_velocity(obs, a_tau, 0.2).v;
    double diff = 0.0;
    for (long long i = 0; i < v0.numel(); ++i) diff += std::abs(v0.data()[i] - v1.data()[i]);
    INFO("variant ", variant_name(v));
    CHECK(diff > 0.0);
  }
}

TEST_CASE("a model that outputs exactly a1 - a0 has zero flow loss") {
  PolicyModel model = tiny_model(PolicyVariant::NoForce, 17);
  const PolicyConfig& cfg = model.config();
  // Zero everything, then pin the output bias: the velocity field is the
  // constant c for every input.
  zero_params_with_prefix(model.params(), "");
  Tensor bias = model.params().get("head.out_proj.b");
  bias.data() << 0.625, -0.25;

  Observation obs = tiny_obs(cfg, 14);
  Eigen::MatrixXd a1 = random_chunk(cfg.horizon(), cfg.action_width, 15);
  Eigen::MatrixXd a0 = a1;
  for (int r = 0; r < a0.rows(); ++r) {
    a0(r, 0) -= 0.625;
    a0(r, 1) -= -0.25;
  }
  Tensor loss = model.flow_loss_at(obs, a1, a0, 0.3);
  CHECK(loss.value() == 0.0);
}

TEST_CASE("interpolant hits the endpoints exactly") {
  Eigen::MatrixXd a0 = random_chunk(3, 2, 20);
  Eigen::MatrixXd a1 = random_chunk(3, 2, 21);
  CHECK(PolicyModel::interpolant(a0, a1, 1.0) == a1);
  CHECK(PolicyModel::interpolant(a0, a1, 0.0) == a0);
}

TEST_CASE("constant velocity fields make Euler exact and step-count invariant") {
  PolicyModel model = tiny_model(PolicyVariant::NoForce, 23);
  zero_params_with_prefix(model.params(), "");
  Tensor bias = model.params().get("head.out_proj.b");
  bias.data() << 0.625, -0.25;

  Observation obs = tiny_obs(model.config(), 16);
  Eigen::MatrixXd ref;
  for (int n : {1, 2, 4, 8}) {
    Rng rng(31);
    SampledChunk s = model.sample_actions(obs, n, rng);
    if (ref.size() == 0) {
      ref = s.targets;
    } else {
      CHECK((s.targets - ref).cwiseAbs().maxCoeff() <= 1e-14);
    }
  }
  // And the chunk is noise + c.
  Rng rng(31);
  Eigen::MatrixXd a0(model.config().horizon(), model.config().action_width);
  for (int r = 0; r < a0.rows(); ++r) {
    for (int c = 0; c < a0.cols(); ++c) a0(r, c) = rng.normal();
  }
  CHECK(std::abs(ref(0, 0) - (a0(0, 0) + 0.625)) <= 1e-14);
  CHECK(std::abs(ref(1, 1) - (a0(1, 1) - 0.25)) <= 1e-14);
}

TEST_CASE("fixed seeds give identical sampled chunks") {
  PolicyModel model = tiny_model(PolicyVariant::FVLMoE, 29);
  Observation obs = tiny_obs(model.config(), 18);
  Rng r1(5), r2(5);
  SampledChunk a = model.sample_actions(obs, 10, r1);
  SampledChunk b = model.sample_actions(obs, 10, r2);
  CHECK(a.targets == b.targets);
  REQUIRE(a.router.has_value());
  CHECK(a.router->selected == b.router->selected);
}

TEST_CASE("sampled chunks have the contract shape and finite entries") {
  for (PolicyVariant v : {PolicyVariant::NoForce, PolicyVariant::ForceConcatState,
                          PolicyVariant::LinearBeforeVLM, PolicyVariant::MoEBeforeVLM,
                          PolicyVariant::ConcatAfterVLM, PolicyVariant::FVLMoE}) {
    PolicyModel model = tiny_model(v, 31);
    Observation obs = tiny_obs(model.config(), 19);
    Rng rng(7);
    SampledChunk s = model.sample_actions(obs, 10, rng);
    CHECK(s.targets.rows() == model.config().horizon());
    CHECK(s.targets.cols() == model.config().sim_action_dims);
    CHECK(s.targets.allFinite());
  }
}

TEST_CASE("checkpoints round-trip the model and record the variant") {
  fs::path dir = fs::temp_directory_path() / "fvla_policy_ckpt";
  fs::create_directories(dir);
  PolicyModel model = tiny_model(PolicyVariant::ConcatAfterVLM, 37);
  model.save_checkpoint(dir / "m.fvla");
  PolicyModel loaded = PolicyModel::load_checkpoint(dir / "m.fvla");
  CHECK(loaded.config().variant == PolicyVariant::ConcatAfterVLM);
  CHECK(loaded.config().fusion.d_model == model.config().fusion.d_model);

  Observation obs = tiny_obs(model.config(), 20);
  Eigen::MatrixXd a_tau = random_chunk(model.config().horizon(), model.config().action_width, 21);
  Tensor va = model.predict_velocity(obs, a_tau, 0.6).v;
  Tensor vb = loaded.predict_velocity(obs, a_tau, 0.6).v;
  for (long long i = 0; i < va.numel(); ++i) CHECK(va.data()[i] == vb.data()[i]);

  SUBCASE("zero training steps leave the checkpoint at initialization") {
    std::vector<Episode> data = {constant_episode(model.config(), 4, 0.5, 0)};
    TrainConfig tc;
    tc.steps = 0;
    train_policy(model, data, tc);
    model.save_checkpoint(dir / "after0.fvla");
    CHECK(read_text_file(dir / "m.fvla") == read_text_file(dir / "after0.fvla"));
  }
}

TEST_CASE("training is deterministic given the seed") {
  auto run = [] {
    PolicyModel model = tiny_model(PolicyVariant::FVLMoE, 41);
    std::vector<Episode> data = {constant_episode(model.config(), 5, 0.7, 0),
                                 constant_episode(model.config(), 5, -0.7, 1)};
    TrainConfig tc;
    tc.steps = 20;
    tc.batch = 4;
    tc.lr_peak = 1e-3;
    tc.lr_floor = 1e-4;
    tc.lr_total_steps = 20;
    tc.seed = 3;
    return train_policy(model, data, tc).metrics;
  };
  auto a = run(), b = run();
  REQUIRE(a.size() == b.size());
  CHECK(std::memcmp(a.data(), b.data(), a.size() * sizeof(MetricRow)) == 0);
}

TEST_CASE("fixed tau and noise overfit a repeated batch") {
  PolicyModel model = tiny_model(PolicyVariant::NoForce, 43);
  std::vector<Episode> data = {constant_episode(model.config(), 1, 0.9, 0)};
  TrainConfig tc;
  tc.steps = 200;
  tc.batch = 2;
  tc.lr_peak = 3e-3;
  tc.lr_floor = 3e-3;
  tc.lr_total_steps = 200;
  tc.seed = 5;
  tc.fixed_tau = 0.5;
  tc.fixed_noise = true;
  auto metrics = train_policy(model, data, tc).metrics;
  REQUIRE(metrics.size() == 200);
  INFO("loss: ", metrics.front().loss, " -> ", metrics.back().loss);
  CHECK(metrics.back().loss < metrics.front().loss);
  CHECK(metrics.back().loss < 0.5 * metrics.front().loss);
}

TEST_CASE("non-finite losses abort with the offending step") {
  PolicyModel model = tiny_model(PolicyVariant::NoForce, 47);
  Tensor w = model.params().get("head.out_proj.w");
  w.data()[0] = std::numeric_limits<double>::quiet_NaN();
  std::vector<Episode> data = {constant_episode(model.config(), 2, 0.1, 0)};
  TrainConfig tc;
  tc.steps = 3;
  try {
    train_policy(model, data, tc);
    FAIL("expected NumericalError");
  } catch (const NumericalError& e) {
    CHECK(std::string(e.what()).find("step 0") != std::string::npos);
  }
}

TEST_CASE("metrics log learning rate from the schedule and the pre-clip gradient norm") {
  PolicyModel model = tiny_model(PolicyVariant::NoForce, 53);
  std::vector<Episode> data = {constant_episode(model.config(), 3, 0.4, 0)};
  TrainConfig tc;
  tc.steps = 4;
  tc.lr_peak = 1e-2;
  tc.lr_floor = 1e-3;
  tc.lr_total_steps = 4;
  auto metrics = train_policy(model, data, tc).metrics;
  CHECK(metrics[0].lr == doctest::Approx(1e-2));
  CHECK(metrics[3].lr == doctest::Approx(1e-2 + (1e-3 - 1e-2) * 0.75));
  for (const auto& m : metrics) CHECK(m.grad_norm >= 0.0);
}

TEST_CASE("end-to-end FVLMoE + flow-loss gradients match finite differences") {
  auto report = policy_e2e_gradcheck(2, 2, 71);
  INFO("worst ", report.worst, " err ", report.max_rel_err);
  CHECK(report.checks > 0);
  CHECK(report.max_rel_err <= 1e-4);
}

TEST_CASE("variant names round-trip") {
  for (PolicyVariant v : {PolicyVariant::NoForce, PolicyVariant::ForceConcatState,
                          PolicyVariant::LinearBeforeVLM, PolicyVariant::MoEBeforeVLM,
                          PolicyVariant::ConcatAfterVLM, PolicyVariant::FVLMoE}) {
    CHECK(variant_from_name(variant_name(v)) == v);
  }
  CHECK_THROWS_AS(variant_from_name("telepathy"), ConfigError);
}

TEST_CASE("unknown instructions and wrong grids are rejected") {
  PolicyModel model = tiny_model(PolicyVariant::NoForce, 59);
  Observation obs = tiny_obs(model.config(), 22);
  obs.instruction = 99;
  CHECK_THROWS_AS(model.encode_context(obs), ConfigError);
  obs.instruction = 0;
  obs.base_view = Eigen::ArrayXXd::Zero(4, 4);
  CHECK_THROWS_AS(model.encode_context(obs), ShapeError);
}
