#pragma once

#include <string>
#include <unordered_map>
#include <vector>

#include "fvla/rng.hpp"
#include "fvla/tensor.hpp"

namespace fvla {

// Weight initialization. Kaiming-uniform for linear maps, zeros for biases.
struct Init {
  enum class Kind { Zeros, KaimingUniform, Uniform };
  Kind kind = Kind::Zeros;
  double arg = 0.0;  // fan_in for Kaiming, half-range for Uniform

  static Init zeros() { return {Kind::Zeros, 0.0}; }
  static Init kaiming(int fan_in) { return {Kind::KaimingUniform, static_cast<double>(fan_in)}; }
  static Init uniform(double half_range) { return {Kind::Uniform, half_range}; }
};

// Named parameter registry. Every learnable tensor lives here; iteration
// order is creation order, which is deterministic per model configuration.
// Each parameter is initialized from a seed derived from (global seed,
// name), so submodules shared between model variants start identical.
class ParamStore {
 public:
  explicit ParamStore(uint64_t global_seed = 0) : global_seed_(global_seed) {}

  Tensor create(const std::string& name, Shape shape, Init init) {
    if (index_.count(name)) throw ConfigError("duplicate parameter name: " + name);
    Tensor t = Tensor::zeros(shape, true);
    Rng rng(param_seed(global_seed_, name));
    switch (init.kind) {
      case Init::Kind::Zeros:
        break;
      case Init::Kind::KaimingUniform: {
        double bound = std::sqrt(6.0 / init.arg);
        for (long long i = 0; i < t.numel(); ++i) t.data()[i] = rng.uniform(-bound, bound);
        break;
      }
      case Init::Kind::Uniform: {
        for (long long i = 0; i < t.numel(); ++i) t.data()[i] = rng.uniform(-init.arg, init.arg);
        break;
      }
    }
    index_[name] = entries_.size();
    entries_.emplace_back(name, t);
    return t;
  }

  bool has(const std::string& name) const { return index_.count(name) > 0; }

  Tensor get(const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end()) throw ConfigError("unknown parameter: " + name);
    return entries_[it->second].second;
  }

  const std::vector<std::pair<std::string, Tensor>>& entries() const { return entries_; }

  long long total_numel() const {
    long long n = 0;
    for (const auto& [name, t] : entries_) n += t.numel();
    return n;
  }

  void zero_grad() {
    for (auto& [name, t] : entries_) t.zero_grad();
  }

  uint64_t global_seed() const { return global_seed_; }

 private:
  uint64_t global_seed_;
  std::vector<std::pair<std::string, Tensor>> entries_;
  std::unordered_map<std::string, size_t> index_;
};

// ---------------------------------------------------------------------------
// Small layer structs. These hold Tensor handles into a ParamStore and build
// graph fragments when applied.
// ---------------------------------------------------------------------------

struct Linear {
  Tensor w;  // (in, out)
  Tensor b;  // (out)

  static Linear create(ParamStore& ps, const std::string& name, int in, int out) {
    Linear l;
    l.w = ps.create(name + ".w", {in, out}, Init::kaiming(in));
    l.b = ps.create(name + ".b", {out}, Init::zeros());
    return l;
  }

  Tensor operator()(const Tensor& x) const { return add_rowvec(matmul(x, w), b); }
  Tensor apply_vec(const Tensor& v) const { return flatten((*this)(as_row(v))); }
};

struct LayerNorm {
  Tensor gamma;
  Tensor beta;

  static LayerNorm create(ParamStore& ps, const std::string& name, int dim) {
    LayerNorm ln;
    ln.gamma = ps.create(name + ".gamma", {dim}, Init::zeros());
    ln.gamma.data().setOnes();
    ln.beta = ps.create(name + ".beta", {dim}, Init::zeros());
    return ln;
  }

  Tensor operator()(const Tensor& x) const {
    return add_rowvec(mul_rowvec(layer_norm(x), gamma), beta);
  }
};

enum class Activation { Gelu, Swish };

inline Tensor apply_activation(Activation a, const Tensor& x) {
  return a == Activation::Gelu ? gelu(x) : swish(x);
}

// Two-layer MLP: in -> hidden -> out.
struct Mlp2 {
  Linear fc1;
  Linear fc2;
  Activation act = Activation::Gelu;

  static Mlp2 create(ParamStore& ps, const std::string& name, int in, int hidden, int out,
                     Activation act = Activation::Gelu) {
    Mlp2 m;
    m.fc1 = Linear::create(ps, name + ".fc1", in, hidden);
    m.fc2 = Linear::create(ps, name + ".fc2", hidden, out);
    m.act = act;
    return m;
  }

  Tensor operator()(const Tensor& x) const { return fc2(apply_activation(act, fc1(x))); }
};

// Full (non-causal) multi-head self-attention over a token sequence (N, d).
struct MultiHeadAttention {
  Linear wq, wk, wv, wo;
  int n_heads = 1;

  static MultiHeadAttention create(ParamStore& ps, const std::string& name, int d_model,
                                   int n_heads) {
    if (d_model % n_heads != 0) {
      throw ConfigError("attention: d_model " + std::to_string(d_model) +
                        " not divisible by n_heads " + std::to_string(n_heads));
    }
    MultiHeadAttention a;
    a.wq = Linear::create(ps, name + ".wq", d_model, d_model);
    a.wk = Linear::create(ps, name + ".wk", d_model, d_model);
    a.wv = Linear::create(ps, name + ".wv", d_model, d_model);
    a.wo = Linear::create(ps, name + ".wo", d_model, d_model);
    a.n_heads = n_heads;
    return a;
  }

  Tensor operator()(const Tensor& x) const {
    Tensor q = wq(x), k = wk(x), v = wv(x);
    int d_head = q.cols() / n_heads;
    std::vector<Tensor> heads;
    heads.reserve(n_heads);
    for (int h = 0; h < n_heads; ++h) {
      heads.push_back(attention(slice_cols(q, h * d_head, d_head),
                                slice_cols(k, h * d_head, d_head),
                                slice_cols(v, h * d_head, d_head)));
    }
    return wo(concat_cols(heads));
  }
};

// Pre-norm transformer encoder block: x + Attn(LN(x)), then + FFN(LN(.)).
struct EncoderBlock {
  LayerNorm ln1, ln2;
  MultiHeadAttention attn;
  Mlp2 ffn;

  static EncoderBlock create(ParamStore& ps, const std::string& name, int d_model, int n_heads,
                             int mlp_expansion) {
    EncoderBlock b;
    b.ln1 = LayerNorm::create(ps, name + ".ln1", d_model);
    b.ln2 = LayerNorm::create(ps, name + ".ln2", d_model);
    b.attn = MultiHeadAttention::create(ps, name + ".attn", d_model, n_heads);
    b.ffn = Mlp2::create(ps, name + ".ffn", d_model, mlp_expansion * d_model, d_model);
    return b;
  }

  Tensor operator()(const Tensor& x) const {
    Tensor h = add(x, attn(ln1(x)));
    return add(h, ffn(ln2(h)));
  }
};

}  // namespace fvla
