#pragma once

#include <cmath>
#include <memory>
#include <string>
#include <vector>

#include "ssmkt/block.hpp"
#include "ssmkt/ops.hpp"
#include "ssmkt/rng.hpp"
#include "ssmkt/s6.hpp"

namespace ssmkt {

enum class ModelArch { mamba, attention };
enum class FfnPlacement { per_block, final_only };

struct ModelConfig {
  i64 n_questions = 0;
  i64 n_concepts = 0;
  i64 d_model = 128;
  i64 n_layers = 5;
  i64 expand = 2;  // d_inner = expand * d_model
  i64 n_state = 16;
  i64 dt_rank = 0;  // 0 -> ceil(d_inner/16)
  i64 conv_kernel = 4;
  i64 max_seq_len = 200;
  bool use_ffn = true;
  bool use_rasch = true;
  bool use_skip = false;
  bool freeze_a = false;
  bool head_concat_question = false;
  FfnPlacement ffn_placement = FfnPlacement::per_block;
  ModelArch arch = ModelArch::mamba;
  double lambda_l2 = 1e-5;
  double dropout = 0.0;

  i64 d_inner() const { return expand * d_model; }
  S6Config s6() const { return S6Config{d_inner(), n_state, dt_rank, use_skip}; }
};

// Rasch-model embeddings: Q_t = c_{c_t} + mu_{q_t} * d_{c_t},
// R_t = e_{r_t} + mu_{q_t} * f_{(c_t,r_t)}. Without the Rasch terms the
// mu/d/f tables do not exist at all.
template <typename S>
struct RaschEmbeddings {
  Param<S> concept_emb;        // (|C|, D)
  Param<S> concept_var;        // (|C|, D), only with use_rasch
  Param<S> response_emb;       // (2, D)
  Param<S> concept_resp_var;   // (2|C|, D), only with use_rasch
  Param<S> question_difficulty;  // (|Q|, 1), only with use_rasch
  Param<S> start;              // (1, D): stands in for R_{-1}
};

struct ModelTrace {
  std::vector<S6LayerTrace> layers;
};

template <typename S>
struct ModelStreamState;

// End-to-end model: embeddings, input assembly that keeps r_t invisible at
// position t, N stacked blocks (Mamba or the causal-attention baseline), a
// sigmoid head, and the regularized cross-entropy loss.
template <typename S>
class KTModel {
 public:
  KTModel(const ModelConfig& cfg, std::uint64_t seed) : cfg_(cfg) {
    if (cfg.n_questions <= 0 || cfg.n_concepts <= 0)
      throw ShapeError("KTModel: vocabulary sizes must be positive");
    Rng rng(seed);
    const i64 D = cfg.d_model;
    auto normal_init = [&](Tensor<S>& t, double sd) {
      for (S& x : *t.data) x = S(rng.normal(0.0, sd));
    };
    emb_.concept_emb = {"emb.concept", Tensor<S>::zeros({cfg.n_concepts, D})};
    normal_init(emb_.concept_emb.value, 0.02);
    if (cfg.use_rasch) {
      emb_.concept_var = {"emb.concept_var", Tensor<S>::zeros({cfg.n_concepts, D})};
      normal_init(emb_.concept_var.value, 0.02);
    }
    emb_.response_emb = {"emb.response", Tensor<S>::zeros({2, D})};
    normal_init(emb_.response_emb.value, 0.02);
    if (cfg.use_rasch) {
      emb_.concept_resp_var = {"emb.concept_resp_var", Tensor<S>::zeros({2 * cfg.n_concepts, D})};
      normal_init(emb_.concept_resp_var.value, 0.02);
      emb_.question_difficulty = {"emb.question_difficulty", Tensor<S>::zeros({cfg.n_questions, 1})};
    }
    emb_.start = {"emb.start", Tensor<S>::zeros({1, D})};
    normal_init(emb_.start.value, 0.02);

    for (i64 l = 0; l < cfg.n_layers; ++l) {
      const std::string prefix = "block" + std::to_string(l);
      if (cfg.arch == ModelArch::mamba)
        mamba_blocks_.push_back(std::make_unique<MambaBlockParams<S>>(
            make_mamba_block_params<S>(D, cfg.s6(), cfg.conv_kernel, prefix, rng, cfg.freeze_a)));
      else
        attn_blocks_.push_back(std::make_unique<AttentionBlockParams<S>>(
            make_attention_block_params<S>(D, prefix, rng)));
      if (cfg.use_ffn && cfg.ffn_placement == FfnPlacement::per_block)
        ffns_.push_back(std::make_unique<FfnParams<S>>(make_ffn_params<S>(D, prefix + ".ffn", rng)));
    }
    if (cfg.use_ffn && cfg.ffn_placement == FfnPlacement::final_only)
      ffns_.push_back(std::make_unique<FfnParams<S>>(make_ffn_params<S>(D, "final.ffn", rng)));

    head_w_ = {"head.w", Tensor<S>::zeros({D, 1})};
    detail::uniform_fanin(head_w_.value, D, rng);
    head_b_ = {"head.b", Tensor<S>::zeros({1})};
    if (cfg.head_concat_question) {
      head_wq_ = {"head.w_question", Tensor<S>::zeros({D, 1})};
      detail::uniform_fanin(head_wq_.value, D, rng);
    }
  }

  const ModelConfig& config() const { return cfg_; }
  RaschEmbeddings<S>& embeddings() { return emb_; }

  std::vector<Param<S>*> params() {
    std::vector<Param<S>*> v;
    v.push_back(&emb_.concept_emb);
    if (cfg_.use_rasch) v.push_back(&emb_.concept_var);
    v.push_back(&emb_.response_emb);
    if (cfg_.use_rasch) {
      v.push_back(&emb_.concept_resp_var);
      v.push_back(&emb_.question_difficulty);
    }
    v.push_back(&emb_.start);
    for (i64 l = 0; l < cfg_.n_layers; ++l) {
      if (cfg_.arch == ModelArch::mamba)
        for (Param<S>* p : mamba_blocks_[static_cast<std::size_t>(l)]->param_list(cfg_.s6())) v.push_back(p);
      else
        for (Param<S>* p : attn_blocks_[static_cast<std::size_t>(l)]->param_list()) v.push_back(p);
      if (cfg_.use_ffn && cfg_.ffn_placement == FfnPlacement::per_block)
        for (Param<S>* p : ffns_[static_cast<std::size_t>(l)]->param_list()) v.push_back(p);
    }
    if (cfg_.use_ffn && cfg_.ffn_placement == FfnPlacement::final_only)
      for (Param<S>* p : ffns_[0]->param_list()) v.push_back(p);
    v.push_back(&head_w_);
    v.push_back(&head_b_);
    if (cfg_.head_concat_question) v.push_back(&head_wq_);
    return v;
  }

  i64 param_count() {
    i64 n = 0;
    for (Param<S>* p : params()) n += p->value.numel();
    return n;
  }

  // Rasch embedding assembly for a sequence of (q, c, r) ids.
  struct Embedded {
    Tensor<S> q_emb;  // (T, D)
    Tensor<S> r_emb;  // (T, D)
  };

  Embedded rasch_embed(const std::vector<i64>& q, const std::vector<i64>& c,
                       const std::vector<i64>& r, Pass<S>& pass) {
    const i64 T = static_cast<i64>(q.size());
    check_ids(q, cfg_.n_questions, "question");
    check_ids(c, cfg_.n_concepts, "concept");
    check_ids(r, 2, "response");
    Embedded e;
    Tensor<S> c_rows = gather_rows(pass.use(emb_.concept_emb), c);
    Tensor<S> r_rows = gather_rows(pass.use(emb_.response_emb), r);
    if (!cfg_.use_rasch) {
      e.q_emb = c_rows;
      e.r_emb = r_rows;
      return e;
    }
    Tensor<S> mu = reshape(gather_rows(pass.use(emb_.question_difficulty), q), {T});
    std::vector<i64> cr(q.size());
    for (std::size_t i = 0; i < q.size(); ++i) cr[i] = c[i] * 2 + r[i];
    e.q_emb = add(c_rows, scale_rows(gather_rows(pass.use(emb_.concept_var), c), mu));
    e.r_emb = add(r_rows, scale_rows(gather_rows(pass.use(emb_.concept_resp_var), cr), mu));
    return e;
  }

  // input_t = Q_t + R_{t-1}; the learned start vector stands in for R_{-1}.
  // Response r_t therefore never reaches position t.
  Tensor<S> build_inputs(const Tensor<S>& q_emb, const Tensor<S>& r_emb, Pass<S>& pass) {
    const i64 T = q_emb.shape[0];
    Tensor<S> start = pass.use(emb_.start);
    Tensor<S> shifted = T == 1 ? start : concat_rows(start, slice_rows(r_emb, 0, T - 1));
    return add(q_emb, shifted);
  }

  // p_t = sigmoid(f_t·W + b), probabilities over the whole sequence.
  Tensor<S> forward(const std::vector<i64>& q, const std::vector<i64>& c, const std::vector<i64>& r,
                    Pass<S>& pass, ScanMode mode = ScanMode::parallel, ModelTrace* trace = nullptr) {
    if (q.size() != c.size() || q.size() != r.size() || q.empty())
      throw ShapeError("forward: id sequences must be nonempty and equal length");
    Embedded e = rasch_embed(q, c, r, pass);
    Tensor<S> h = build_inputs(e.q_emb, e.r_emb, pass);
    if (trace) trace->layers.assign(static_cast<std::size_t>(cfg_.n_layers), S6LayerTrace{});
    for (i64 l = 0; l < cfg_.n_layers; ++l) {
      if (cfg_.arch == ModelArch::mamba) {
        S6LayerTrace* lt = trace ? &trace->layers[static_cast<std::size_t>(l)] : nullptr;
        h = mamba_block(h, *mamba_blocks_[static_cast<std::size_t>(l)], cfg_.s6(), pass, mode, lt);
      } else {
        h = attention_block(h, *attn_blocks_[static_cast<std::size_t>(l)], pass);
      }
      if (cfg_.use_ffn && cfg_.ffn_placement == FfnPlacement::per_block)
        h = apply_ffn_residual(h, *ffns_[static_cast<std::size_t>(l)], pass);
    }
    if (cfg_.use_ffn && cfg_.ffn_placement == FfnPlacement::final_only)
      h = apply_ffn_residual(h, *ffns_[0], pass);
    Tensor<S> logits = add_rowvec(matmul(h, pass.use(head_w_)), pass.use(head_b_));
    if (cfg_.head_concat_question)
      logits = add(logits, matmul(e.q_emb, pass.use(head_wq_)));
    return sigmoid(reshape(logits, {static_cast<i64>(q.size())}));
  }

  // L = -sum_valid[r log p + (1-r) log(1-p)] + lambda * ||mu_q||^2, with
  // probabilities clamped to [1e-7, 1-1e-7] before the logs. `include_l2`
  // lets the batch trainer add the regularizer once per step instead of
  // once per sequence.
  Tensor<S> loss(const Tensor<S>& p, const std::vector<i64>& labels, const std::vector<char>& mask,
                 Pass<S>& pass, bool include_l2 = true) {
    const i64 T = p.numel();
    if (static_cast<i64>(labels.size()) != T || static_cast<i64>(mask.size()) != T)
      throw ShapeError("loss: labels/mask length mismatch with " + shape_str(p.shape));
    Tensor<S> r = Tensor<S>::zeros({T});
    Tensor<S> one_minus_r = Tensor<S>::zeros({T});
    Tensor<S> m = Tensor<S>::zeros({T});
    for (i64 i = 0; i < T; ++i) {
      r[i] = S(labels[static_cast<std::size_t>(i)]);
      one_minus_r[i] = S(1 - labels[static_cast<std::size_t>(i)]);
      m[i] = mask[static_cast<std::size_t>(i)] ? S(1) : S(0);
    }
    Tensor<S> pc = clamp(reshape(p, {T}), S(1e-7), S(1.0 - 1e-7));
    Tensor<S> ll = add(mul(r, log_(pc)), mul(one_minus_r, log_(affine(pc, S(-1), S(1)))));
    Tensor<S> total = affine(sum_all(mul(ll, m)), S(-1), S(0));
    if (include_l2 && cfg_.use_rasch && cfg_.lambda_l2 > 0) {
      Tensor<S> mu = pass.use(emb_.question_difficulty);
      total = add(total, affine(sum_all(mul(mu, mu)), S(cfg_.lambda_l2), S(0)));
    }
    return total;
  }

  ModelStreamState<S> make_stream_state() const;
  // One token of recurrent inference; O(1) state in T. The response r_t is
  // observed after the prediction and only feeds the next step's input.
  double stream_step(ModelStreamState<S>& st, i64 q_t, i64 c_t, i64 r_t) const;

 private:
  template <typename>
  friend struct ModelStreamState;

  static void check_ids(const std::vector<i64>& ids, i64 vocab, const char* kind) {
    for (std::size_t i = 0; i < ids.size(); ++i)
      if (ids[i] < 0 || ids[i] >= vocab)
        throw FormatError(std::string(kind) + " id " + std::to_string(ids[i]) + " at position " +
                          std::to_string(i) + " outside vocabulary of size " + std::to_string(vocab));
  }

  Tensor<S> apply_ffn_residual(const Tensor<S>& h, FfnParams<S>& f, Pass<S>& pass) {
    return add(h, ffn(h, f, pass));
  }

  // Streaming counterpart of apply_ffn_residual with matching arithmetic order.
  void ffn_residual_inplace(std::vector<S>& x, FfnParams<S>& f) const {
    const i64 D = cfg_.d_model, H = 4 * D;
    std::vector<S> hidden(static_cast<std::size_t>(H), S(0));
    const S* w1 = f.w1.value.ptr();
    for (i64 a = 0; a < D; ++a) {
      const S xv = x[static_cast<std::size_t>(a)];
      for (i64 j = 0; j < H; ++j) hidden[static_cast<std::size_t>(j)] += xv * w1[a * H + j];
    }
    constexpr double kInvSqrt2 = 0.70710678118654752440;
    for (i64 j = 0; j < H; ++j) {
      const S v = hidden[static_cast<std::size_t>(j)] + f.b1.value[j];
      hidden[static_cast<std::size_t>(j)] =
          S(0.5) * v * (S(1) + S(std::erf(static_cast<double>(v) * kInvSqrt2)));
    }
    std::vector<S> out(static_cast<std::size_t>(D), S(0));
    const S* w2 = f.w2.value.ptr();
    for (i64 a = 0; a < H; ++a) {
      const S hv = hidden[static_cast<std::size_t>(a)];
      for (i64 j = 0; j < D; ++j) out[static_cast<std::size_t>(j)] += hv * w2[a * D + j];
    }
    for (i64 j = 0; j < D; ++j)
      x[static_cast<std::size_t>(j)] += out[static_cast<std::size_t>(j)] + f.b2.value[j];
  }

  ModelConfig cfg_;
  RaschEmbeddings<S> emb_;
  std::vector<std::unique_ptr<MambaBlockParams<S>>> mamba_blocks_;
  std::vector<std::unique_ptr<AttentionBlockParams<S>>> attn_blocks_;
  std::vector<std::unique_ptr<FfnParams<S>>> ffns_;
  Param<S> head_w_, head_b_, head_wq_;
};

// Recurrent inference state: per layer a conv tap history of the last k
// inputs and the S6 hidden state, plus the previous response embedding.
// Size is independent of how many tokens have been consumed.
template <typename S>
struct ModelStreamState {
  struct LayerState {
    std::vector<S> conv_hist;  // (k * d_inner) ring, oldest overwritten
    S6State<S> s6;
    LayerState(i64 k, const S6Config& cfg)
        : conv_hist(static_cast<std::size_t>(k * cfg.d_inner), S(0)), s6(cfg) {}
  };
  std::vector<LayerState> layers;
  std::vector<S> prev_r_emb;  // (D)
  i64 t = 0;

  long long scalar_count() const {
    long long n = static_cast<long long>(prev_r_emb.size());
    for (const auto& l : layers) n += static_cast<long long>(l.conv_hist.size()) + l.s6.scalar_count();
    return n;
  }
};

template <typename S>
ModelStreamState<S> KTModel<S>::make_stream_state() const {
  if (cfg_.arch != ModelArch::mamba)
    throw NumericError("stream_step: recurrent inference is only defined for the mamba arch");
  ModelStreamState<S> st;
  for (i64 l = 0; l < cfg_.n_layers; ++l) st.layers.emplace_back(cfg_.conv_kernel, cfg_.s6());
  st.prev_r_emb.assign(static_cast<std::size_t>(cfg_.d_model), S(0));
  return st;
}

template <typename S>
double KTModel<S>::stream_step(ModelStreamState<S>& st, i64 q_t, i64 c_t, i64 r_t) const {
  const i64 D = cfg_.d_model, d_inner = cfg_.d_inner(), k = cfg_.conv_kernel;
  auto* self = const_cast<KTModel<S>*>(this);

  // input_t = Q_t + R_{t-1}
  std::vector<S> x(static_cast<std::size_t>(D));
  {
    const S* crow = emb_.concept_emb.value.ptr() + c_t * D;
    S mu = S(0);
    if (cfg_.use_rasch) mu = emb_.question_difficulty.value[q_t];
    for (i64 j = 0; j < D; ++j) {
      S qv = crow[j];
      if (cfg_.use_rasch) qv = crow[j] + emb_.concept_var.value[c_t * D + j] * mu;
      S rv = st.t == 0 ? emb_.start.value[j] : st.prev_r_emb[static_cast<std::size_t>(j)];
      x[static_cast<std::size_t>(j)] = qv + rv;
    }
  }

  std::vector<S> xz(static_cast<std::size_t>(d_inner)), z(static_cast<std::size_t>(d_inner));
  std::vector<S> conv_out(static_cast<std::size_t>(d_inner)), y6(static_cast<std::size_t>(d_inner));
  std::vector<S> hbuf(static_cast<std::size_t>(D));
  for (i64 l = 0; l < cfg_.n_layers; ++l) {
    MambaBlockParams<S>& bp = *self->mamba_blocks_[static_cast<std::size_t>(l)];
    auto& ls = st.layers[static_cast<std::size_t>(l)];

    std::fill(xz.begin(), xz.end(), S(0));
    std::fill(z.begin(), z.end(), S(0));
    const S* wx = bp.w_in_x.value.ptr();
    const S* wz = bp.w_in_z.value.ptr();
    for (i64 a = 0; a < D; ++a) {
      const S xv = x[static_cast<std::size_t>(a)];
      for (i64 j = 0; j < d_inner; ++j) {
        xz[static_cast<std::size_t>(j)] += xv * wx[a * d_inner + j];
        z[static_cast<std::size_t>(j)] += xv * wz[a * d_inner + j];
      }
    }

    // causal conv over the tap history (lag i slot = (t - i) mod k)
    const i64 slot = st.t % k;
    for (i64 c = 0; c < d_inner; ++c) ls.conv_hist[static_cast<std::size_t>(slot * d_inner + c)] = xz[static_cast<std::size_t>(c)];
    const S* cw = bp.conv_w.value.ptr();
    for (i64 c = 0; c < d_inner; ++c) {
      S acc = bp.conv_b.value[c];
      for (i64 i = 0; i < k && i <= st.t; ++i) {
        const i64 s = (slot - i + k) % k;
        acc += cw[c * k + i] * ls.conv_hist[static_cast<std::size_t>(s * d_inner + c)];
      }
      conv_out[static_cast<std::size_t>(c)] = acc;
    }
    for (i64 c = 0; c < d_inner; ++c) {
      const S v = conv_out[static_cast<std::size_t>(c)];
      conv_out[static_cast<std::size_t>(c)] = v * detail::sigmoid_scalar(v);
      const S zv = z[static_cast<std::size_t>(c)];
      z[static_cast<std::size_t>(c)] = zv * detail::sigmoid_scalar(zv);
    }

    s6_step(conv_out.data(), bp.s6, cfg_.s6(), ls.s6, y6.data());

    std::fill(hbuf.begin(), hbuf.end(), S(0));
    const S* wo = bp.w_out.value.ptr();
    for (i64 a = 0; a < d_inner; ++a) {
      const S gv = y6[static_cast<std::size_t>(a)] * z[static_cast<std::size_t>(a)];
      for (i64 j = 0; j < D; ++j) hbuf[static_cast<std::size_t>(j)] += gv * wo[a * D + j];
    }

    // residual + layer norm, same accumulation order as the batched op
    S mean = S(0);
    for (i64 j = 0; j < D; ++j) {
      hbuf[static_cast<std::size_t>(j)] += x[static_cast<std::size_t>(j)];
      mean += hbuf[static_cast<std::size_t>(j)];
    }
    mean /= S(D);
    S var = S(0);
    for (i64 j = 0; j < D; ++j)
      var += (hbuf[static_cast<std::size_t>(j)] - mean) * (hbuf[static_cast<std::size_t>(j)] - mean);
    var /= S(D);
    const S inv = S(1) / std::sqrt(var + S(1e-5));
    for (i64 j = 0; j < D; ++j)
      x[static_cast<std::size_t>(j)] = (hbuf[static_cast<std::size_t>(j)] - mean) * inv * bp.ln_scale.value[j] +
                                       bp.ln_shift.value[j];

    if (cfg_.use_ffn && cfg_.ffn_placement == FfnPlacement::per_block)
      ffn_residual_inplace(x, *self->ffns_[static_cast<std::size_t>(l)]);
  }
  if (cfg_.use_ffn && cfg_.ffn_placement == FfnPlacement::final_only)
    ffn_residual_inplace(x, *self->ffns_[0]);

  S logit = head_b_.value[0];
  for (i64 j = 0; j < D; ++j) logit += x[static_cast<std::size_t>(j)] * head_w_.value[j];
  if (cfg_.head_concat_question) {
    const S* crow = emb_.concept_emb.value.ptr() + c_t * D;
    S mu = cfg_.use_rasch ? emb_.question_difficulty.value[q_t] : S(0);
    for (i64 j = 0; j < D; ++j) {
      S qv = cfg_.use_rasch ? crow[j] + emb_.concept_var.value[c_t * D + j] * mu : crow[j];
      logit += qv * head_wq_.value[j];
    }
  }

  // stash R_t = e_{r_t} + mu_{q_t} * f_{(c_t, r_t)} for the next step
  {
    const S* rrow = emb_.response_emb.value.ptr() + r_t * D;
    const S mu = cfg_.use_rasch ? emb_.question_difficulty.value[q_t] : S(0);
    for (i64 j = 0; j < D; ++j) {
      S rv = rrow[j];
      if (cfg_.use_rasch) rv = rrow[j] + emb_.concept_resp_var.value[(c_t * 2 + r_t) * D + j] * mu;
      st.prev_r_emb[static_cast<std::size_t>(j)] = rv;
    }
  }
  st.t += 1;
  return static_cast<double>(detail::sigmoid_scalar(logit));
}

}  // namespace ssmkt
