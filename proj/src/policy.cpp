#include "fvla/policy.hpp"

#include <algorithm>
#include <cmath>

namespace fvla {

std::string variant_name(PolicyVariant v) {
  switch (v) {
    case PolicyVariant::NoForce: return "no_force";
    case PolicyVariant::ForceConcatState: return "force_concat_state";
    case PolicyVariant::LinearBeforeVLM: return "linear_before_vlm";
    case PolicyVariant::MoEBeforeVLM: return "moe_before_vlm";
    case PolicyVariant::ConcatAfterVLM: return "concat_after_vlm";
    case PolicyVariant::FVLMoE: return "fvlmoe";
  }
  throw ConfigError("unknown policy variant");
}

PolicyVariant variant_from_name(const std::string& name) {
  std::string n;
  for (char c : name) n += (c == '-') ? '_' : static_cast<char>(std::tolower(c));
  if (n == "no_force") return PolicyVariant::NoForce;
  if (n == "force_concat_state") return PolicyVariant::ForceConcatState;
  if (n == "linear_before_vlm") return PolicyVariant::LinearBeforeVLM;
  if (n == "moe_before_vlm") return PolicyVariant::MoEBeforeVLM;
  if (n == "concat_after_vlm") return PolicyVariant::ConcatAfterVLM;
  if (n == "fvlmoe" || n == "forcevla") return PolicyVariant::FVLMoE;
  throw ConfigError("unknown variant '" + name +
                    "' (expected no_force, force_concat_state, linear_before_vlm, "
                    "moe_before_vlm, concat_after_vlm, fvlmoe)");
}

void PolicyConfig::validate() const {
  fusion.validate();
  if (grid < 1 || patch < 1 || grid % patch != 0) {
    throw ConfigError("context encoder: grid " + std::to_string(grid) +
                      " is not divisible by patch " + std::to_string(patch));
  }
  if (n_views < 1 || n_views > 2) throw ConfigError("n_views must be 1 or 2");
  if (n_ctx_blocks < 1) throw ConfigError("n_ctx_blocks must be >= 1");
  if (n_instructions < 1) throw ConfigError("n_instructions must be >= 1");
  if (action_width < sim_action_dims) {
    throw ConfigError("action_width " + std::to_string(action_width) +
                      " is smaller than sim_action_dims " + std::to_string(sim_action_dims));
  }
  if (d_state < 4) throw ConfigError("d_state must be >= 4");
  if (flow_steps < 1) throw ConfigError("flow_steps must be >= 1");
  if (n_vl() + 1 < fusion.h_action) {
    throw ConfigError("h_action " + std::to_string(fusion.h_action) +
                      " exceeds the fused sequence length " + std::to_string(n_vl() + 1) +
                      "; increase the visual-language token count (N_VL)");
  }
}

Eigen::VectorXd tau_embedding(double tau, int dim) {
  Eigen::VectorXd e(dim);
  const int pairs = dim / 2;
  for (int i = 0; i < pairs; ++i) {
    const double frac = pairs > 1 ? static_cast<double>(i) / (pairs - 1) : 0.0;
    const double omega = std::exp(frac * std::log(100.0));
    e[2 * i] = std::sin(omega * tau);
    e[2 * i + 1] = std::cos(omega * tau);
  }
  if (dim % 2 == 1) e[dim - 1] = tau;
  return e;
}

namespace {

Tensor const_matrix(const Eigen::MatrixXd& m) {
  Tensor t = Tensor::zeros({static_cast<int>(m.rows()), static_cast<int>(m.cols())});
  for (int r = 0; r < m.rows(); ++r) {
    for (int c = 0; c < m.cols(); ++c) t.data()[r * m.cols() + c] = m(r, c);
  }
  return t;
}

Tensor const_vector(const Eigen::VectorXd& v) {
  Tensor t = Tensor::zeros({static_cast<int>(v.size())});
  for (int i = 0; i < v.size(); ++i) t.data()[i] = v[i];
  return t;
}

Tensor repeat_row(const Eigen::VectorXd& v, int rows) {
  Tensor t = Tensor::zeros({rows, static_cast<int>(v.size())});
  for (int r = 0; r < rows; ++r) {
    for (int i = 0; i < v.size(); ++i) t.data()[r * v.size() + i] = v[i];
  }
  return t;
}

}  // namespace

PolicyModel::PolicyModel(PolicyConfig cfg, NormStats stats, uint64_t seed)
    : cfg_(cfg), stats_(std::move(stats)), ps_(seed) {
  cfg_.validate();
  if (stats_.state_mean.size() != cfg_.d_state) {
    throw ConfigError("norm stats state width " + std::to_string(stats_.state_mean.size()) +
                      " does not match d_state " + std::to_string(cfg_.d_state));
  }
  if (stats_.action_mean.size() < cfg_.action_width) {
    throw ConfigError("norm stats action width " + std::to_string(stats_.action_mean.size()) +
                      " is smaller than action_width " + std::to_string(cfg_.action_width));
  }
  const int d_model = cfg_.fusion.d_model;
  const int d_act = cfg_.fusion.d_act;
  const int patch_px = cfg_.patch * cfg_.patch;

  for (int v = 0; v < cfg_.n_views; ++v) {
    patch_proj_[v] = Linear::create(ps_, "ctx.patch" + std::to_string(v), patch_px, d_model);
  }
  instr_embed_ = ps_.create("ctx.instr", {cfg_.n_instructions, d_model}, Init::uniform(0.02));
  pos_embed_ = ps_.create("ctx.pos", {cfg_.n_ctx_tokens(), d_model}, Init::uniform(0.02));
  for (int b = 0; b < cfg_.n_ctx_blocks; ++b) {
    ctx_blocks_.push_back(EncoderBlock::create(ps_, "ctx.block" + std::to_string(b), d_model,
                                               cfg_.fusion.n_heads, cfg_.fusion.mlp_expansion));
  }

  switch (cfg_.variant) {
    case PolicyVariant::LinearBeforeVLM:
      early_force_proj_ = Linear::create(ps_, "early.force_proj", 6, d_model);
      break;
    case PolicyVariant::MoEBeforeVLM:
      early_force_proj_ = Linear::create(ps_, "early.force_proj", 6, d_model);
      early_moe_ = MoeLayer::create(ps_, "early.moe", d_model, cfg_.fusion.n_experts,
                                    cfg_.fusion.top_k, cfg_.fusion.mlp_expansion);
      break;
    case PolicyVariant::ConcatAfterVLM:
      concat_force_proj_ = Linear::create(ps_, "fusion.force_proj", 6, d_model);
      concat_out_proj_ = Linear::create(ps_, "fusion.out_proj", d_model, d_act);
      break;
    case PolicyVariant::FVLMoE:
      fusion_ = FvlMoe::create(ps_, "fusion", cfg_.fusion);
      break;
    default:
      break;
  }

  const int state_in = cfg_.d_state + (cfg_.variant == PolicyVariant::ForceConcatState ? 6 : 0);
  state_proj_ = Linear::create(ps_, "suffix.state_proj", state_in, d_act);
  action_proj_ = Linear::create(ps_, "suffix.action_proj", cfg_.action_width, d_act);
  action_time_mlp_ =
      Mlp2::create(ps_, "suffix.at_mlp", 2 * d_act, d_act, d_act, Activation::Swish);
  vl_to_act_ = Linear::create(ps_, "suffix.vl_proj", d_model, d_act);
  joint_block_ = EncoderBlock::create(ps_, "suffix.joint", d_act, cfg_.fusion.n_heads,
                                      cfg_.fusion.mlp_expansion);
  out_proj_ = Linear::create(ps_, "head.out_proj", d_act, cfg_.action_width);
}

Tensor PolicyModel::patch_tokens(const Observation& obs) const {
  const int g = cfg_.grid, p = cfg_.patch;
  const int per_side = g / p;
  if (obs.base_view.rows() != g || obs.base_view.cols() != g) {
    throw ShapeError("encode_context: expected " + std::to_string(g) + "x" + std::to_string(g) +
                     " grids, got " + std::to_string(obs.base_view.rows()) + "x" +
                     std::to_string(obs.base_view.cols()));
  }
  std::vector<Tensor> views;
  for (int v = 0; v < cfg_.n_views; ++v) {
    const Eigen::ArrayXXd& img = v == 0 ? obs.base_view : obs.wrist_view;
    Eigen::MatrixXd patches(per_side * per_side, p * p);
    for (int pr = 0; pr < per_side; ++pr) {
      for (int pc = 0; pc < per_side; ++pc) {
        int row = pr * per_side + pc;
        int k = 0;
        for (int i = 0; i < p; ++i) {
          for (int j = 0; j < p; ++j) patches(row, k++) = img(pr * p + i, pc * p + j);
        }
      }
    }
    views.push_back(patch_proj_[v](const_matrix(patches)));
  }
  if (obs.instruction < 0 || obs.instruction >= cfg_.n_instructions) {
    throw ConfigError("instruction id " + std::to_string(obs.instruction) +
                      " outside the configured vocabulary of " +
                      std::to_string(cfg_.n_instructions));
  }
  views.push_back(slice_rows(instr_embed_, obs.instruction, 1));
  return concat_rows(views);
}

ContextEmbedding PolicyModel::encode_context(const Observation& obs) const {
  ContextEmbedding ctx;
  ctx.instruction = obs.instruction;
  Tensor tokens = patch_tokens(obs);
  ctx.roles.assign(cfg_.n_vl(), TokenRole::VisualLanguage);
  if (cfg_.has_early_force()) {
    Eigen::VectorXd wn =
        NormStats::normalize(obs.wrench, stats_.wrench_mean, stats_.wrench_std);
    Tensor force_row = as_row(early_force_proj_.apply_vec(const_vector(wn)));
    tokens = concat_rows<double>({force_row, tokens});
    ctx.roles.insert(ctx.roles.begin(), TokenRole::Force);
  }
  tokens = add(tokens, pos_embed_);
  if (cfg_.variant == PolicyVariant::MoEBeforeVLM) {
    RouterDecision dec = early_moe_.route(tokens);
    tokens = early_moe_.apply(tokens, dec);
    ctx.early_router = std::move(dec);
  }
  for (const auto& block : ctx_blocks_) tokens = block(tokens);
  ctx.e_vl = tokens;
  return ctx;
}

Tensor PolicyModel::build_suffix(const ContextEmbedding& ctx, const Observation& obs,
                                 const Eigen::MatrixXd& a_tau, double tau) const {
  const int h = cfg_.horizon();
  const int d_act = cfg_.fusion.d_act;
  if (a_tau.rows() != h || a_tau.cols() != cfg_.action_width) {
    throw ShapeError("build_suffix: action chunk must be (" + std::to_string(h) + ", " +
                     std::to_string(cfg_.action_width) + "), got (" +
                     std::to_string(a_tau.rows()) + ", " + std::to_string(a_tau.cols()) + ")");
  }
  Eigen::VectorXd sn = NormStats::normalize(obs.state, stats_.state_mean, stats_.state_std);
  if (cfg_.variant == PolicyVariant::ForceConcatState) {
    Eigen::VectorXd wn =
        NormStats::normalize(obs.wrench, stats_.wrench_mean, stats_.wrench_std);
    Eigen::VectorXd ext(sn.size() + 6);
    ext << sn, wn;
    sn = ext;
  }
  Tensor state_token = as_row(state_proj_.apply_vec(const_vector(sn)));

  Tensor a_emb = action_proj_(const_matrix(a_tau));
  Tensor time_rows = repeat_row(tau_embedding(tau, d_act), h);
  Tensor step_tokens = action_time_mlp_(concat_cols<double>({a_emb, time_rows}));

  Tensor joint_in = concat_rows<double>(
      {vl_to_act_(ctx.e_vl), concat_rows<double>({state_token, step_tokens})});
  Tensor joint = joint_block_(joint_in);
  return slice_rows(joint, joint.rows() - h, h);
}

Tensor PolicyModel::velocity_from_suffix(const Tensor& suffix, const Tensor* guidance) const {
  if (guidance) return out_proj_(FvlMoe::inject(suffix, *guidance));
  return out_proj_(suffix);
}

VelocityOutput PolicyModel::predict_velocity(const Observation& obs, const Eigen::MatrixXd& a_tau,
                                             double tau) const {
  ContextEmbedding ctx = encode_context(obs);
  VelocityOutput out;
  const int h = cfg_.horizon();
  Eigen::VectorXd wn = NormStats::normalize(obs.wrench, stats_.wrench_mean, stats_.wrench_std);

  switch (cfg_.variant) {
    case PolicyVariant::NoForce:
    case PolicyVariant::ForceConcatState:
    case PolicyVariant::LinearBeforeVLM: {
      out.v = velocity_from_suffix(build_suffix(ctx, obs, a_tau, tau), nullptr);
      break;
    }
    case PolicyVariant::MoEBeforeVLM: {
      out.v = velocity_from_suffix(build_suffix(ctx, obs, a_tau, tau), nullptr);
      out.router = ctx.early_router;
      out.roles = ctx.roles;
      break;
    }
    case PolicyVariant::ConcatAfterVLM: {
      Tensor e_f = concat_force_proj_.apply_vec(const_vector(wn));
      TokenSequence seq = FvlMoe::build_fusion_input(ctx.e_vl, e_f);
      Tensor guidance = FvlMoe::extract_guidance(concat_out_proj_(seq.tokens), h);
      out.v = velocity_from_suffix(build_suffix(ctx, obs, a_tau, tau), &guidance);
      break;
    }
    case PolicyVariant::FVLMoE: {
      auto [fused, dec] = fusion_.fuse(ctx.e_vl, const_vector(wn));
      Tensor guidance = FvlMoe::extract_guidance(fused, h);
      out.v = velocity_from_suffix(build_suffix(ctx, obs, a_tau, tau), &guidance);
      out.router = std::move(dec);
      out.roles = ctx.roles;
      out.roles.push_back(TokenRole::Force);
      break;
    }
  }
  return out;
}

Tensor PolicyModel::flow_loss_at(const Observation& obs, const Eigen::MatrixXd& a1,
                                 const Eigen::MatrixXd& a0, double tau) const {
  if (a1.rows() != cfg_.horizon() || a1.cols() != cfg_.action_width || a0.rows() != a1.rows() ||
      a0.cols() != a1.cols()) {
    throw ShapeError("flow_loss_at: chunk shape mismatch (" + std::to_string(a1.rows()) + ", " +
                     std::to_string(a1.cols()) + ") vs (" + std::to_string(a0.rows()) + ", " +
                     std::to_string(a0.cols()) + ") for horizon " +
                     std::to_string(cfg_.horizon()));
  }
  Eigen::MatrixXd a_tau = interpolant(a0, a1, tau);
  VelocityOutput vel = predict_velocity(obs, a_tau, tau);
  Tensor target = const_matrix(a1 - a0);
  return mse(vel.v, target);
}

Tensor PolicyModel::fm_loss_sample(const Observation& obs, const Eigen::MatrixXd& a1_norm,
                                   Rng& rng) const {
  const double tau = rng.uniform();
  Eigen::MatrixXd a0(cfg_.horizon(), cfg_.action_width);
  for (int r = 0; r < a0.rows(); ++r) {
    for (int c = 0; c < a0.cols(); ++c) a0(r, c) = rng.normal();
  }
  return flow_loss_at(obs, a1_norm, a0, tau);
}

Eigen::MatrixXd PolicyModel::normalize_chunk(const Eigen::MatrixXd& raw) const {
  if (raw.cols() < cfg_.action_width) {
    throw ShapeError("normalize_chunk: stored action width " + std::to_string(raw.cols()) +
                     " is smaller than the flow width " + std::to_string(cfg_.action_width));
  }
  Eigen::MatrixXd out(raw.rows(), cfg_.action_width);
  for (int c = 0; c < cfg_.action_width; ++c) {
    out.col(c) = (raw.col(c).array() - stats_.action_mean[c]) / stats_.action_std[c];
  }
  return out;
}

SampledChunk PolicyModel::sample_actions(const Observation& obs, int n_steps, Rng& rng) const {
  if (n_steps < 1) throw ConfigError("sample_actions: n_steps must be >= 1");
  ContextEmbedding ctx = encode_context(obs);
  const int h = cfg_.horizon();
  Eigen::VectorXd wn = NormStats::normalize(obs.wrench, stats_.wrench_mean, stats_.wrench_std);

  SampledChunk out;
  Tensor guidance;
  bool has_guidance = false;
  if (cfg_.variant == PolicyVariant::FVLMoE) {
    auto [fused, dec] = fusion_.fuse(ctx.e_vl, const_vector(wn));
    guidance = FvlMoe::extract_guidance(fused, h);
    has_guidance = true;
    out.router = std::move(dec);
    out.roles = ctx.roles;
    out.roles.push_back(TokenRole::Force);
  } else if (cfg_.variant == PolicyVariant::ConcatAfterVLM) {
    Tensor e_f = concat_force_proj_.apply_vec(const_vector(wn));
    TokenSequence seq = FvlMoe::build_fusion_input(ctx.e_vl, e_f);
    guidance = FvlMoe::extract_guidance(concat_out_proj_(seq.tokens), h);
    has_guidance = true;
  } else if (cfg_.variant == PolicyVariant::MoEBeforeVLM) {
    out.router = ctx.early_router;
    out.roles = ctx.roles;
  }

  Eigen::MatrixXd a(h, cfg_.action_width);
  for (int r = 0; r < h; ++r) {
    for (int c = 0; c < a.cols(); ++c) a(r, c) = rng.normal();
  }
  for (int k = 0; k < n_steps; ++k) {
    const double tau = static_cast<double>(k) / n_steps;
    Tensor suffix = build_suffix(ctx, obs, a, tau);
    Tensor v = velocity_from_suffix(suffix, has_guidance ? &guidance : nullptr);
    for (int r = 0; r < h; ++r) {
      for (int c = 0; c < a.cols(); ++c) a(r, c) += v.at(r, c) / n_steps;
    }
  }

  out.targets.resize(h, cfg_.sim_action_dims);
  for (int c = 0; c < cfg_.sim_action_dims; ++c) {
    out.targets.col(c) = a.col(c).array() * stats_.action_std[c] + stats_.action_mean[c];
  }
  if (!out.targets.allFinite()) {
    throw NumericalError("sample_actions: non-finite action chunk");
  }
  return out;
}

// ---------------------------------------------------------------------------
// Checkpointing. The FVLA file carries model metadata and normalization
// statistics as named records alongside the weights, so a checkpoint fully
// reconstructs the policy.
// ---------------------------------------------------------------------------

namespace {

ParamRecord scalar_record(const std::string& name, double v) { return {name, {1}, {v}}; }

ParamRecord vector_record(const std::string& name, const Eigen::VectorXd& v) {
  std::vector<double> vals(v.data(), v.data() + v.size());
  return {name, {static_cast<int>(v.size())}, std::move(vals)};
}

Eigen::VectorXd to_vector(const ParamRecord& r) {
  Eigen::VectorXd v(static_cast<long>(r.values.size()));
  for (size_t i = 0; i < r.values.size(); ++i) v[i] = r.values[i];
  return v;
}

}  // namespace

void PolicyModel::save_checkpoint(const std::filesystem::path& path) const {
  std::vector<ParamRecord> records;
  records.push_back(scalar_record("meta.variant", static_cast<double>(cfg_.variant)));
  records.push_back(scalar_record("meta.d_model", cfg_.fusion.d_model));
  records.push_back(scalar_record("meta.d_act", cfg_.fusion.d_act));
  records.push_back(scalar_record("meta.n_heads", cfg_.fusion.n_heads));
  records.push_back(scalar_record("meta.n_experts", cfg_.fusion.n_experts));
  records.push_back(scalar_record("meta.top_k", cfg_.fusion.top_k));
  records.push_back(scalar_record("meta.mlp_expansion", cfg_.fusion.mlp_expansion));
  records.push_back(scalar_record("meta.h_action", cfg_.fusion.h_action));
  records.push_back(scalar_record("meta.aux_loss_coef", cfg_.fusion.aux_loss_coef));
  records.push_back(scalar_record("meta.grid", cfg_.grid));
  records.push_back(scalar_record("meta.patch", cfg_.patch));
  records.push_back(scalar_record("meta.n_views", cfg_.n_views));
  records.push_back(scalar_record("meta.n_ctx_blocks", cfg_.n_ctx_blocks));
  records.push_back(scalar_record("meta.n_instructions", cfg_.n_instructions));
  records.push_back(scalar_record("meta.d_state", cfg_.d_state));
  records.push_back(scalar_record("meta.action_width", cfg_.action_width));
  records.push_back(scalar_record("meta.sim_action_dims", cfg_.sim_action_dims));
  records.push_back(scalar_record("meta.flow_steps", cfg_.flow_steps));
  records.push_back(vector_record("norm.state_mean", stats_.state_mean));
  records.push_back(vector_record("norm.state_std", stats_.state_std));
  records.push_back(vector_record("norm.wrench_mean", stats_.wrench_mean));
  records.push_back(vector_record("norm.wrench_std", stats_.wrench_std));
  records.push_back(vector_record("norm.action_mean", stats_.action_mean));
  records.push_back(vector_record("norm.action_std", stats_.action_std));
  for (const auto& [name, t] : ps_.entries()) {
    std::vector<double> vals(t.data().data(), t.data().data() + t.numel());
    records.push_back({name, t.shape(), std::move(vals)});
  }
  write_checkpoint(path, records);
}

PolicyModel PolicyModel::load_checkpoint(const std::filesystem::path& path) {
  auto records = read_checkpoint(path);
  std::map<std::string, const ParamRecord*> index;
  for (const auto& r : records) index[r.name] = &r;

  auto meta = [&](const std::string& key) -> double {
    auto it = index.find("meta." + key);
    if (it == index.end()) throw DataError("checkpoint missing meta." + key);
    return it->second->values.at(0);
  };
  auto norm = [&](const std::string& key) -> Eigen::VectorXd {
    auto it = index.find("norm." + key);
    if (it == index.end()) throw DataError("checkpoint missing norm." + key);
    return to_vector(*it->second);
  };

  PolicyConfig cfg;
  cfg.variant = static_cast<PolicyVariant>(static_cast<int>(meta("variant")));
  cfg.fusion.d_model = static_cast<int>(meta("d_model"));
  cfg.fusion.d_act = static_cast<int>(meta("d_act"));
  cfg.fusion.n_heads = static_cast<int>(meta("n_heads"));
  cfg.fusion.n_experts = static_cast<int>(meta("n_experts"));
  cfg.fusion.top_k = static_cast<int>(meta("top_k"));
  cfg.fusion.mlp_expansion = static_cast<int>(meta("mlp_expansion"));
  cfg.fusion.h_action = static_cast<int>(meta("h_action"));
  cfg.fusion.aux_loss_coef = meta("aux_loss_coef");
  cfg.grid = static_cast<int>(meta("grid"));
  cfg.patch = static_cast<int>(meta("patch"));
  cfg.n_views = static_cast<int>(meta("n_views"));
  cfg.n_ctx_blocks = static_cast<int>(meta("n_ctx_blocks"));
  cfg.n_instructions = static_cast<int>(meta("n_instructions"));
  cfg.d_state = static_cast<int>(meta("d_state"));
  cfg.action_width = static_cast<int>(meta("action_width"));
  cfg.sim_action_dims = static_cast<int>(meta("sim_action_dims"));
  cfg.flow_steps = static_cast<int>(meta("flow_steps"));

  NormStats stats;
  stats.state_mean = norm("state_mean");
  stats.state_std = norm("state_std");
  stats.wrench_mean = norm("wrench_mean");
  stats.wrench_std = norm("wrench_std");
  stats.action_mean = norm("action_mean");
  stats.action_std = norm("action_std");

  PolicyModel model(cfg, stats, 0);
  for (auto& [name, t] : model.ps_.entries()) {
    auto it = index.find(name);
    if (it == index.end()) throw DataError("checkpoint missing parameter '" + name + "'");
    const ParamRecord& rec = *it->second;
    if (rec.shape != t.shape()) {
      throw DataError("checkpoint parameter '" + name + "' has shape " + shape_str(rec.shape) +
                      ", model expects " + shape_str(t.shape()));
    }
    Tensor handle = t;
    for (long long i = 0; i < handle.numel(); ++i) handle.data()[i] = rec.values[i];
  }
  return model;
}

// ---------------------------------------------------------------------------
// Training loop.
// ---------------------------------------------------------------------------

TrainResult train_policy(PolicyModel& model, const std::vector<Episode>& episodes,
                         const TrainConfig& cfg) {
  if (episodes.empty()) throw DataError("train_policy: empty dataset");
  const int h = model.config().horizon();

  struct TrainSample {
    const Observation* obs;
    Eigen::MatrixXd a1;  // normalized (H, action_width)
  };
  std::vector<TrainSample> samples;
  for (const auto& ep : episodes) {
    auto chunks = chunk_episode(ep, h);
    for (const auto& ch : chunks) {
      samples.push_back({&ep.steps[ch.t].obs, model.normalize_chunk(ch.actions)});
    }
  }
  if (samples.empty()) throw DataError("train_policy: no training chunks");

  LrSchedule sched{cfg.lr_peak, cfg.lr_floor, cfg.lr_total_steps,
                   cfg.cosine ? LrSchedule::Decay::Cosine : LrSchedule::Decay::Linear};
  AdamState adam = AdamState::create(model.params().total_numel(), sched);
  auto entries = model.params().entries();
  Rng rng(cfg.seed);

  TrainResult result;
  result.metrics.reserve(cfg.steps);
  const int n = static_cast<int>(samples.size());
  for (long long step = 0; step < cfg.steps; ++step) {
    model.params().zero_grad();
    double loss_value = 0.0;
    for (int acc = 0; acc < cfg.accum_steps; ++acc) {
      std::vector<Tensor> losses;
      losses.reserve(cfg.batch);
      for (int b = 0; b < cfg.batch; ++b) {
        const TrainSample& s = samples[rng.uniform_int(n)];
        double tau = cfg.fixed_tau >= 0.0 ? cfg.fixed_tau : rng.uniform();
        Eigen::MatrixXd a0(h, model.config().action_width);
        if (cfg.fixed_noise) {
          Rng frozen(cfg.seed ^ (0x9e3779b9ull + 1000003ull * (acc * cfg.batch + b)));
          for (int r = 0; r < a0.rows(); ++r) {
            for (int c = 0; c < a0.cols(); ++c) a0(r, c) = frozen.normal();
          }
        } else {
          for (int r = 0; r < a0.rows(); ++r) {
            for (int c = 0; c < a0.cols(); ++c) a0(r, c) = rng.normal();
          }
        }
        losses.push_back(model.flow_loss_at(*s.obs, s.a1, a0, tau));
      }
      Tensor batch_loss = losses[0];
      for (size_t i = 1; i < losses.size(); ++i) batch_loss = add(batch_loss, losses[i]);
      batch_loss = scale(batch_loss, 1.0 / (cfg.batch * cfg.accum_steps));
      batch_loss.backward();
      loss_value += batch_loss.value();
    }
    if (!std::isfinite(loss_value)) {
      throw NumericalError("flow loss became non-finite at training step " + std::to_string(step));
    }
    const double lr_now = sched.at(step);
    const double grad_norm = adam_step(entries, adam, cfg.clip);
    result.metrics.push_back({step, loss_value, lr_now, grad_norm});
  }
  return result;
}

GradCheckReport policy_e2e_gradcheck(int n_seeds, int coords_per_param, uint64_t seed) {
  GradCheckReport total;
  for (int s = 0; s < n_seeds; ++s) {
    PolicyConfig cfg;  // desk dims: d_model 64, d_act 32, H 8, 4 heads
    cfg.variant = PolicyVariant::FVLMoE;
    NormStats stats = NormStats::identity(cfg.d_state, 32);
    PolicyModel model(cfg, stats, seed + s);

    SimParams sp;
    InsertionEnv env(sp, PerturbationMode::Nominal, SimTask::Insert, seed + 100 + s);
    for (int i = 0; i < 9 + s % 3; ++i) env.step(Eigen::Vector4d(0.0, -0.004, 0.0, 0.02));
    Observation obs = env.observe();

    Rng rng(seed + 200 + s);
    Eigen::MatrixXd a1(cfg.horizon(), cfg.action_width);
    Eigen::MatrixXd a0(cfg.horizon(), cfg.action_width);
    for (int r = 0; r < a1.rows(); ++r) {
      for (int c = 0; c < a1.cols(); ++c) {
        a1(r, c) = rng.normal();
        a0(r, c) = rng.normal();
      }
    }
    const double tau = rng.uniform();
    auto build = [&] { return model.flow_loss_at(obs, a1, a0, tau); };
    Rng pick(seed + 300 + s);
    total.merge(fd_check(build, model.params().entries(), 1e-6, coords_per_param, pick,
                         "e2e_seed" + std::to_string(s)));
  }
  return total;
}

}  // namespace fvla
