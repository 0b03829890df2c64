#include "fvla/fvlmoe.hpp"

#include <algorithm>
#include <numeric>

namespace fvla {

MoeLayer MoeLayer::create(ParamStore& ps, const std::string& name, int dim, int n_experts,
                          int top_k, int mlp_expansion) {
  MoeLayer layer;
  layer.router = Linear::create(ps, name + ".router", dim, n_experts);
  for (int i = 0; i < n_experts; ++i) {
    layer.experts.push_back(
        Mlp2::create(ps, name + ".expert" + std::to_string(i), dim, mlp_expansion * dim, dim));
  }
  layer.top_k = top_k;
  return layer;
}

RouterDecision MoeLayer::route(const Tensor& x) const {
  const int n_experts = static_cast<int>(experts.size());
  RouterDecision d;
  d.gate_probs = softmax(router(x));
  const int n_tokens = d.gate_probs.rows();
  d.selected.resize(n_tokens);
  d.topk.resize(n_tokens);
  for (int t = 0; t < n_tokens; ++t) {
    std::vector<int> order(n_experts);
    std::iota(order.begin(), order.end(), 0);
    // Stable sort by descending probability keeps the lowest index on ties.
    std::stable_sort(order.begin(), order.end(), [&](int a, int b) {
      return d.gate_probs.at(t, a) > d.gate_probs.at(t, b);
    });
    d.selected[t] = order[0];
    d.topk[t].assign(order.begin(), order.begin() + top_k);
  }
  d.weight = take_per_row(d.gate_probs, d.selected);
  return d;
}

Tensor MoeLayer::apply(const Tensor& x, const RouterDecision& decision) const {
  const int n_tokens = x.rows();
  Tensor out = x;
  for (size_t i = 0; i < experts.size(); ++i) {
    // 0/1 dispatch mask; an expert selected by no token is skipped entirely,
    // and masked-out tokens contribute exactly zero gradient to the expert.
    Tensor mask = Tensor::zeros({n_tokens});
    bool any = false;
    for (int t = 0; t < n_tokens; ++t) {
      const auto& set = decision.topk[t];
      if (std::find(set.begin(), set.end(), static_cast<int>(i)) != set.end()) {
        mask.data()[t] = 1.0;
        any = true;
      }
    }
    if (!any) continue;
    Tensor gate_col = flatten(slice_cols(decision.gate_probs, static_cast<int>(i), 1));
    Tensor token_weight = mul(mask, gate_col);
    out = add(out, mul_colvec(experts[i](x), token_weight));
  }
  return out;
}

Tensor MoeLayer::load_balance_loss(const RouterDecision& decision) const {
  const int n_experts = static_cast<int>(experts.size());
  const int n_tokens = decision.gate_probs.rows();
  Tensor loss = Tensor::scalar(0.0);
  for (int i = 0; i < n_experts; ++i) {
    int count = 0;
    for (int t = 0; t < n_tokens; ++t) {
      if (decision.selected[t] == i) ++count;
    }
    double fraction = static_cast<double>(count) / n_tokens;
    Tensor mean_prob = mean(slice_cols(decision.gate_probs, i, 1));
    loss = add(loss, scale(mean_prob, fraction * n_experts));
  }
  return loss;
}

FvlMoe FvlMoe::create(ParamStore& ps, const std::string& prefix, const FusionConfig& cfg) {
  cfg.validate();
  FvlMoe m;
  m.cfg_ = cfg;
  m.force_proj_ = Linear::create(ps, prefix + ".force_proj", 6, cfg.d_model);
  m.encoder_ = EncoderBlock::create(ps, prefix + ".enc", cfg.d_model, cfg.n_heads,
                                    cfg.mlp_expansion);
  m.moe_ = MoeLayer::create(ps, prefix + ".moe", cfg.d_model, cfg.n_experts, cfg.top_k,
                            cfg.mlp_expansion);
  m.out_proj_ = Linear::create(ps, prefix + ".out_proj", cfg.d_model, cfg.d_act);
  return m;
}

Tensor FvlMoe::project_force(const Tensor& wrench) const {
  if (wrench.numel() != 6 || wrench.rank() != 1) {
    throw ShapeError("project_force: expected a 6-axis wrench, got " + shape_str(wrench.shape()));
  }
  return force_proj_.apply_vec(wrench);
}

TokenSequence FvlMoe::build_fusion_input(const Tensor& e_vl, const Tensor& e_f) {
  TokenSequence seq;
  Tensor force_row = as_row(e_f);
  if (!e_vl.defined()) {
    seq.tokens = force_row;
    seq.roles = {TokenRole::Force};
    return seq;
  }
  if (e_vl.cols() != force_row.cols()) {
    throw ShapeError("build_fusion_input: width mismatch " + shape_str(e_vl.shape()) + " vs " +
                     shape_str(force_row.shape()));
  }
  seq.tokens = concat_rows<double>({e_vl, force_row});
  seq.roles.assign(e_vl.rows(), TokenRole::VisualLanguage);
  seq.roles.push_back(TokenRole::Force);
  return seq;
}

Tensor FvlMoe::encoder_block(const Tensor& e_in) const { return encoder_(e_in); }

RouterDecision FvlMoe::route(const Tensor& e_enc) const { return moe_.route(e_enc); }

Tensor FvlMoe::moe_layer(const Tensor& e_enc, const RouterDecision& decision) const {
  return moe_.apply(e_enc, decision);
}

std::pair<Tensor, RouterDecision> FvlMoe::fuse(const Tensor& e_vl, const Tensor& wrench) const {
  Tensor e_f = project_force(wrench);
  TokenSequence seq = build_fusion_input(e_vl, e_f);
  Tensor e_enc = encoder_block(seq.tokens);
  RouterDecision decision = route(e_enc);
  Tensor e_fused = moe_layer(e_enc, decision);
  return {out_proj_(e_fused), std::move(decision)};
}

Tensor FvlMoe::extract_guidance(const Tensor& fused, int h) {
  if (h < 1 || h > fused.rows()) {
    throw ShapeError("extract_guidance: need at least " + std::to_string(h) +
                     " fused tokens but have " + std::to_string(fused.rows()) +
                     "; increase the visual-language token count (N_VL)");
  }
  return slice_rows(fused, fused.rows() - h, h);
}

Tensor FvlMoe::inject(const Tensor& suffix, const Tensor& guidance) {
  if (suffix.shape() != guidance.shape()) {
    throw ShapeError("inject: shape mismatch " + shape_str(suffix.shape()) + " vs " +
                     shape_str(guidance.shape()));
  }
  return add(suffix, guidance);
}

}  // namespace fvla
