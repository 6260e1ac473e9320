#pragma once

#include <cmath>
#include <limits>
#include <string>
#include <vector>

#include "ssmkt/ops.hpp"
#include "ssmkt/rng.hpp"
#include "ssmkt/s6.hpp"

namespace ssmkt {

// Position-wise feed-forward, hidden width fixed at 4x the model width:
// FFN(H) = GELU(H·W1 + b1)·W2 + b2.
template <typename S>
struct FfnParams {
  Param<S> w1;  // (D, 4D)
  Param<S> b1;  // (4D)
  Param<S> w2;  // (4D, D)
  Param<S> b2;  // (D)

  std::vector<Param<S>*> param_list() { return {&w1, &b1, &w2, &b2}; }
};

template <typename S>
FfnParams<S> make_ffn_params(i64 d_model, const std::string& prefix, Rng& rng) {
  FfnParams<S> p;
  p.w1 = {prefix + ".w1", Tensor<S>::zeros({d_model, 4 * d_model})};
  p.b1 = {prefix + ".b1", Tensor<S>::zeros({4 * d_model})};
  p.w2 = {prefix + ".w2", Tensor<S>::zeros({4 * d_model, d_model})};
  p.b2 = {prefix + ".b2", Tensor<S>::zeros({d_model})};
  detail::uniform_fanin(p.w1.value, d_model, rng);
  detail::uniform_fanin(p.w2.value, 4 * d_model, rng);
  return p;
}

template <typename S>
Tensor<S> ffn(const Tensor<S>& h, FfnParams<S>& p, Pass<S>& pass) {
  Tensor<S> hidden = gelu(add_rowvec(matmul(h, pass.use(p.w1)), pass.use(p.b1)));
  return add_rowvec(matmul(hidden, pass.use(p.w2)), pass.use(p.b2));
}

// ---------------------------------------------------------------------------
// Mamba block: expand, causal depthwise conv, SiLU, S6, SiLU-gated branch,
// down-projection, residual, post-norm. The optional FFN is applied by the
// caller as a plain residual on the block output.

template <typename S>
struct MambaBlockParams {
  Param<S> w_in_x;    // (D, d_inner)
  Param<S> w_in_z;    // (D, d_inner)
  Param<S> conv_w;    // (d_inner, k), depthwise causal, index = lag
  Param<S> conv_b;    // (d_inner)
  S6Params<S> s6;
  Param<S> w_out;     // (d_inner, D)
  Param<S> ln_scale;  // (D)
  Param<S> ln_shift;  // (D)

  std::vector<Param<S>*> param_list(const S6Config& cfg) {
    std::vector<Param<S>*> v{&w_in_x, &w_in_z, &conv_w, &conv_b};
    for (Param<S>* p : s6.param_list(cfg)) v.push_back(p);
    v.push_back(&w_out);
    v.push_back(&ln_scale);
    v.push_back(&ln_shift);
    return v;
  }
};

template <typename S>
MambaBlockParams<S> make_mamba_block_params(i64 d_model, const S6Config& cfg, i64 conv_kernel,
                                            const std::string& prefix, Rng& rng, bool freeze_a) {
  const i64 d_inner = cfg.d_inner;
  MambaBlockParams<S> p;
  p.w_in_x = {prefix + ".w_in_x", Tensor<S>::zeros({d_model, d_inner})};
  p.w_in_z = {prefix + ".w_in_z", Tensor<S>::zeros({d_model, d_inner})};
  p.conv_w = {prefix + ".conv_w", Tensor<S>::zeros({d_inner, conv_kernel})};
  p.conv_b = {prefix + ".conv_b", Tensor<S>::zeros({d_inner})};
  detail::uniform_fanin(p.w_in_x.value, d_model, rng);
  detail::uniform_fanin(p.w_in_z.value, d_model, rng);
  detail::uniform_fanin(p.conv_w.value, conv_kernel, rng);
  p.s6 = make_s6_params<S>(cfg, prefix + ".s6", rng, freeze_a);
  p.w_out = {prefix + ".w_out", Tensor<S>::zeros({d_inner, d_model})};
  detail::uniform_fanin(p.w_out.value, d_inner, rng);
  p.ln_scale = {prefix + ".ln_scale", Tensor<S>::full({d_model}, S(1))};
  p.ln_shift = {prefix + ".ln_shift", Tensor<S>::zeros({d_model})};
  return p;
}

template <typename S>
Tensor<S> mamba_block(const Tensor<S>& x, MambaBlockParams<S>& p, const S6Config& cfg,
                      Pass<S>& pass, ScanMode mode, S6LayerTrace* trace = nullptr) {
  check_ndim("mamba_block", x, 2);
  Tensor<S> xhat = silu(conv1d_causal(matmul(x, pass.use(p.w_in_x)), pass.use(p.conv_w),
                                      pass.use(p.conv_b)));
  Tensor<S> z = silu(matmul(x, pass.use(p.w_in_z)));
  Tensor<S> mixed = s6_forward(xhat, p.s6, cfg, pass, mode, trace);
  Tensor<S> yprime = matmul(mul(mixed, z), pass.use(p.w_out));
  return layer_norm_lastdim(add(yprime, x), pass.use(p.ln_scale), pass.use(p.ln_shift));
}

// ---------------------------------------------------------------------------
// Causal single-head self-attention block for the scaling baseline. The
// (T,T) score matrix is materialized on purpose; that quadratic footprint is
// what the benchmark measures against the linear S6 path.

template <typename S>
struct AttentionBlockParams {
  Param<S> w_q, w_k, w_v, w_o;  // (D, D) each
  Param<S> ln_scale, ln_shift;  // (D)

  std::vector<Param<S>*> param_list() {
    return {&w_q, &w_k, &w_v, &w_o, &ln_scale, &ln_shift};
  }
};

template <typename S>
AttentionBlockParams<S> make_attention_block_params(i64 d_model, const std::string& prefix,
                                                    Rng& rng) {
  AttentionBlockParams<S> p;
  p.w_q = {prefix + ".w_q", Tensor<S>::zeros({d_model, d_model})};
  p.w_k = {prefix + ".w_k", Tensor<S>::zeros({d_model, d_model})};
  p.w_v = {prefix + ".w_v", Tensor<S>::zeros({d_model, d_model})};
  p.w_o = {prefix + ".w_o", Tensor<S>::zeros({d_model, d_model})};
  detail::uniform_fanin(p.w_q.value, d_model, rng);
  detail::uniform_fanin(p.w_k.value, d_model, rng);
  detail::uniform_fanin(p.w_v.value, d_model, rng);
  detail::uniform_fanin(p.w_o.value, d_model, rng);
  p.ln_scale = {prefix + ".ln_scale", Tensor<S>::full({d_model}, S(1))};
  p.ln_shift = {prefix + ".ln_shift", Tensor<S>::zeros({d_model})};
  return p;
}

template <typename S>
Tensor<S> causal_mask(i64 T) {
  Tensor<S> m = Tensor<S>::zeros({T, T});
  const S ninf = -std::numeric_limits<S>::infinity();
  for (i64 i = 0; i < T; ++i)
    for (i64 j = i + 1; j < T; ++j) m[i * T + j] = ninf;
  return m;
}

template <typename S>
Tensor<S> attention_block(const Tensor<S>& x, AttentionBlockParams<S>& p, Pass<S>& pass) {
  check_ndim("attention_block", x, 2);
  const i64 T = x.shape[0], d = x.shape[1];
  Tensor<S> q = matmul(x, pass.use(p.w_q));
  Tensor<S> k = matmul(x, pass.use(p.w_k));
  Tensor<S> v = matmul(x, pass.use(p.w_v));
  Tensor<S> scores = affine(matmul(q, transpose2d(k)), S(1.0 / std::sqrt(static_cast<double>(d))), S(0));
  Tensor<S> probs = softmax_lastdim(add(scores, causal_mask<S>(T)));
  Tensor<S> out = matmul(matmul(probs, v), pass.use(p.w_o));
  return layer_norm_lastdim(add(out, x), pass.use(p.ln_scale), pass.use(p.ln_shift));
}

}  // namespace ssmkt
