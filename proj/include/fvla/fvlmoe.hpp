#pragma once

#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "fvla/nn.hpp"
#include "fvla/tensor.hpp"

namespace fvla {

// Dimensions of the fusion module and its sparse MoE. Desk defaults; the
// paper-scale values (d_model 2048, d_act 1024, 8 heads, 4 experts, top-1)
// are valid settings.
struct FusionConfig {
  int d_model = 64;
  int d_act = 32;
  int n_heads = 4;
  int n_experts = 4;
  int top_k = 1;
  int mlp_expansion = 1;
  int h_action = 8;
  double aux_loss_coef = 0.0;  // opt-in load-balance loss; 0 disables

  int d_head() const { return d_model / n_heads; }

  void validate() const {
    if (d_model < 1 || d_act < 1 || n_heads < 1 || n_experts < 1 || top_k < 1 ||
        mlp_expansion < 1 || h_action < 1) {
      throw ConfigError("fusion config: all extents must be >= 1");
    }
    if (d_model % n_heads != 0) {
      throw ConfigError("fusion config: n_heads * d_head must equal d_model (d_model=" +
                        std::to_string(d_model) + ", n_heads=" + std::to_string(n_heads) + ")");
    }
    if (top_k > n_experts) {
      throw ConfigError("fusion config: top_k " + std::to_string(top_k) + " exceeds n_experts " +
                        std::to_string(n_experts));
    }
  }
};

enum class TokenRole { VisualLanguage, Force };

// Token sequence entering the fusion path; the force token, when present,
// occupies the final position.
struct TokenSequence {
  Tensor tokens;  // (N, d_model)
  std::vector<TokenRole> roles;
};

struct RouterDecision {
  Tensor gate_probs;                   // (N, E); rows sum to 1
  std::vector<int> selected;           // argmax per token, ties to the lowest index
  Tensor weight;                       // (N) gate probability of the selected expert
  std::vector<std::vector<int>> topk;  // per-token top-k index sets
};

// Sparse MoE layer: linear router, E independent two-layer MLPs
// (d -> d, expansion 1), residual combine of the top-k experts weighted by
// their gate probabilities (not renormalized). Also used standalone by the
// "MoE before VLM" ablation.
struct MoeLayer {
  Linear router;
  std::vector<Mlp2> experts;
  int top_k = 1;

  static MoeLayer create(ParamStore& ps, const std::string& name, int dim, int n_experts,
                         int top_k, int mlp_expansion = 1);

  RouterDecision route(const Tensor& x) const;
  Tensor apply(const Tensor& x, const RouterDecision& decision) const;

  // Switch-style load-balance penalty: E * sum_i fraction_i * mean_prob_i.
  Tensor load_balance_loss(const RouterDecision& decision) const;
};

// The force-vision-language fusion module: wrench projection, token
// concatenation, one pre-norm encoder block for holistic interaction, the
// sparse MoE with residual, and the output projection to the action-expert
// width. The last h_action rows of the output are the guidance signal.
class FvlMoe {
 public:
  FvlMoe() = default;
  static FvlMoe create(ParamStore& ps, const std::string& prefix, const FusionConfig& cfg);

  // Affine map of the 6-axis wrench to a single d_model token.
  Tensor project_force(const Tensor& wrench) const;

  // E_in = [E_VL ; E_F]; pass an undefined e_vl for a force-only sequence.
  static TokenSequence build_fusion_input(const Tensor& e_vl, const Tensor& e_f);

  Tensor encoder_block(const Tensor& e_in) const;
  RouterDecision route(const Tensor& e_enc) const;
  Tensor moe_layer(const Tensor& e_enc, const RouterDecision& decision) const;

  // Full path; also surfaces the router decision for analytics.
  std::pair<Tensor, RouterDecision> fuse(const Tensor& e_vl, const Tensor& wrench) const;

  // Last h rows, order preserved.
  static Tensor extract_guidance(const Tensor& fused, int h);

  // Element-wise additive injection into the suffix features.
  static Tensor inject(const Tensor& suffix, const Tensor& guidance);

  Tensor load_balance_loss(const RouterDecision& d) const { return moe_.load_balance_loss(d); }

  const FusionConfig& config() const { return cfg_; }
  const MoeLayer& moe() const { return moe_; }
  const Linear& force_projection() const { return force_proj_; }

 private:
  FusionConfig cfg_;
  Linear force_proj_;
  EncoderBlock encoder_;
  MoeLayer moe_;
  Linear out_proj_;
};

}  // namespace fvla
