#pragma once

#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "fvla/checkpoint.hpp"
#include "fvla/dataset.hpp"
#include "fvla/fvlmoe.hpp"
#include "fvla/gradcheck.hpp"
#include "fvla/nn.hpp"
#include "fvla/optim.hpp"
#include "fvla/sim.hpp"

namespace fvla {

// The six fusion strategies under study. FVLMoE is the full architecture;
// the others are the ablation wirings.
enum class PolicyVariant {
  NoForce,           // force ignored entirely
  ForceConcatState,  // wrench concatenated to the state input
  LinearBeforeVLM,   // force token prepended to the context encoder input
  MoEBeforeVLM,      // context-encoder inputs pass through an MoE first
  ConcatAfterVLM,    // force token appended after the encoder, linear fusion
  FVLMoE,            // encoder block + sparse MoE fusion with residual
};

std::string variant_name(PolicyVariant v);
PolicyVariant variant_from_name(const std::string& name);

// Sinusoidal embedding of the flow time tau over geometrically spaced
// frequencies (sin/cos pairs; a trailing linear term if dim is odd).
Eigen::VectorXd tau_embedding(double tau, int dim);

struct PolicyConfig {
  FusionConfig fusion;  // d_model / d_act / heads / experts / top_k / h_action
  PolicyVariant variant = PolicyVariant::FVLMoE;

  int grid = 16;
  int patch = 4;
  int n_views = 2;
  int n_ctx_blocks = 2;
  int n_instructions = 4;
  int d_state = 32;      // serialized state width entering the state projection
  int action_width = 8;  // flow-matching action width (>= sim_action_dims)
  int sim_action_dims = 4;
  int flow_steps = 10;

  int patches_per_view() const { return (grid / patch) * (grid / patch); }
  int n_vl() const { return n_views * patches_per_view() + 1; }
  bool has_early_force() const {
    return variant == PolicyVariant::LinearBeforeVLM || variant == PolicyVariant::MoEBeforeVLM;
  }
  int n_ctx_tokens() const { return n_vl() + (has_early_force() ? 1 : 0); }
  int horizon() const { return fusion.h_action; }

  void validate() const;
};

struct ContextEmbedding {
  Tensor e_vl;  // (n_ctx_tokens, d_model)
  int instruction = 0;
  std::vector<TokenRole> roles;
  std::optional<RouterDecision> early_router;  // MoEBeforeVLM only
};

struct VelocityOutput {
  Tensor v;  // (H, action_width)
  std::optional<RouterDecision> router;
  std::vector<TokenRole> roles;  // token roles matching the router decision
};

struct SampledChunk {
  Eigen::MatrixXd targets;  // (H, sim_action_dims), denormalized absolute targets
  std::optional<RouterDecision> router;
  std::vector<TokenRole> roles;
};

// Full policy: toy two-block transformer context encoder standing in for the
// pretrained VLM, the state/action/time suffix stack, the fusion path chosen
// by the variant, and the conditional flow-matching action head.
class PolicyModel {
 public:
  PolicyModel(PolicyConfig cfg, NormStats stats, uint64_t seed);

  const PolicyConfig& config() const { return cfg_; }
  ParamStore& params() { return ps_; }
  const ParamStore& params() const { return ps_; }
  const NormStats& stats() const { return stats_; }

  ContextEmbedding encode_context(const Observation& obs) const;
  // Patch-projection tokens before positions and encoder blocks (per view,
  // then instruction); exposed for locality checks.
  Tensor patch_tokens(const Observation& obs) const;

  // Suffix features for the noisy chunk at flow time tau. a_tau is in
  // normalized action space, shape (H, action_width).
  Tensor build_suffix(const ContextEmbedding& ctx, const Observation& obs,
                      const Eigen::MatrixXd& a_tau, double tau) const;

  VelocityOutput predict_velocity(const Observation& obs, const Eigen::MatrixXd& a_tau,
                                  double tau) const;

  // Deterministic flow-matching loss for a fully specified sample
  // (normalized data chunk a1 and noise a0, both (H, action_width)).
  Tensor flow_loss_at(const Observation& obs, const Eigen::MatrixXd& a1,
                      const Eigen::MatrixXd& a0, double tau) const;

  // One stochastic flow-matching loss sample: tau ~ U(0,1), a0 ~ N(0,I).
  Tensor fm_loss_sample(const Observation& obs, const Eigen::MatrixXd& a1_norm, Rng& rng) const;

  // Euler integration of the learned velocity field from Gaussian noise.
  // The fusion guidance is computed once per chunk (the wrench is constant
  // within a control step).
  SampledChunk sample_actions(const Observation& obs, int n_steps, Rng& rng) const;

  // Normalized data chunk from a raw action chunk (rows are D_a-wide stored
  // actions; the first action_width channels feed the flow).
  Eigen::MatrixXd normalize_chunk(const Eigen::MatrixXd& raw_chunk) const;

  void save_checkpoint(const std::filesystem::path& path) const;
  static PolicyModel load_checkpoint(const std::filesystem::path& path);

  // Linear interpolant between noise and data.
  static Eigen::MatrixXd interpolant(const Eigen::MatrixXd& a0, const Eigen::MatrixXd& a1,
                                     double tau) {
    return tau * a1 + (1.0 - tau) * a0;
  }

 private:
  Tensor velocity_from_suffix(const Tensor& suffix, const Tensor* guidance) const;

  PolicyConfig cfg_;
  NormStats stats_;
  ParamStore ps_;

  Linear patch_proj_[2];
  Tensor instr_embed_;  // (n_instructions, d_model)
  Tensor pos_embed_;    // (n_ctx_tokens, d_model)
  std::vector<EncoderBlock> ctx_blocks_;
  Linear early_force_proj_;  // LinearBeforeVLM / MoEBeforeVLM
  MoeLayer early_moe_;       // MoEBeforeVLM
  FvlMoe fusion_;            // FVLMoE
  Linear concat_force_proj_; // ConcatAfterVLM
  Linear concat_out_proj_;   // ConcatAfterVLM
  Linear state_proj_;
  Linear action_proj_;
  Mlp2 action_time_mlp_;
  Linear vl_to_act_;
  EncoderBlock joint_block_;
  Linear out_proj_;
};

// ---------------------------------------------------------------------------
// Training.
// ---------------------------------------------------------------------------

struct TrainConfig {
  long long steps = 2000;
  int batch = 8;
  int accum_steps = 1;
  double lr_peak = 2.5e-5;
  double lr_floor = 2.5e-6;
  long long lr_total_steps = 30000;
  bool cosine = false;
  double clip = 1.0;
  uint64_t seed = 0;
  double fixed_tau = -1.0;   // >= 0 pins tau (strict overfit checks)
  bool fixed_noise = false;  // reuse the same noise draws every step
};

struct MetricRow {
  long long step;
  double loss;
  double lr;
  double grad_norm;
};

struct TrainResult {
  std::vector<MetricRow> metrics;
};

TrainResult train_policy(PolicyModel& model, const std::vector<Episode>& episodes,
                         const TrainConfig& cfg);

// End-to-end finite-difference check of the FVLMoE + flow-matching loss
// graph at desk dims (criterion behind the `gradcheck` CLI subcommand).
GradCheckReport policy_e2e_gradcheck(int n_seeds, int coords_per_param, uint64_t seed);

}  // namespace fvla
