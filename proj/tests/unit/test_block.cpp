#include <cmath>

#include "doctest.h"
#include "test_helpers.hpp"

using namespace ssmkt;
using ssmkt::testing::const_tensor;
using ssmkt::testing::make_param;

namespace {

MambaBlockParams<double> block_params(i64 d_model, const S6Config& cfg, Rng& rng) {
  return make_mamba_block_params<double>(d_model, cfg, 4, "blk", rng, false);
}

}  // namespace

TEST_CASE("mamba block with all weights zero reduces to LayerNorm(x)") {
  Rng rng(1);
  S6Config cfg{8, 4, 0, false};
  MambaBlockParams<double> p = block_params(4, cfg, rng);
  for (Param<double>* prm : p.param_list(cfg))
    if (prm->name != "blk.ln_scale")
      for (double& v : *prm->value.data) v = 0.0;
  for (double& v : *p.ln_scale.value.data) v = 1.0;

  Tensor<double> x = const_tensor({5, 4}, rng);
  Pass<double> pass;
  Tensor<double> y = mamba_block(x, p, cfg, pass, ScanMode::sequential);
  Tensor<double> expect = layer_norm_lastdim(x, p.ln_scale.value, p.ln_shift.value);
  CHECK(ssmkt::testing::max_abs_diff(y, expect) == 0.0);
}

TEST_CASE("mamba block is causal: perturbing x at t leaves outputs before t unchanged") {
  Rng rng(2);
  S6Config cfg{8, 4, 0, false};
  MambaBlockParams<double> p = block_params(4, cfg, rng);
  const i64 T = 10;
  Tensor<double> x = const_tensor({T, 4}, rng);
  Pass<double> pass;
  for (ScanMode mode : {ScanMode::sequential, ScanMode::parallel}) {
    Tensor<double> base = mamba_block(x, p, cfg, pass, mode);
    CHECK(base.shape == Shape{T, 4});
    for (i64 t = 0; t < T; ++t) {
      Tensor<double> x2 = Tensor<double>::from(x.shape, *x.data);
      x2[t * 4 + 2] += 0.25;
      Tensor<double> y2 = mamba_block(x2, p, cfg, pass, mode);
      for (i64 u = 0; u < t; ++u)
        for (i64 j = 0; j < 4; ++j) CHECK(y2[u * 4 + j] == base[u * 4 + j]);
    }
  }
}

TEST_CASE("ffn: zero weights and bias b2 give constant rows b2") {
  Rng rng(3);
  FfnParams<double> p = make_ffn_params<double>(4, "ffn", rng);
  for (double& v : *p.w1.value.data) v = 0.0;
  for (double& v : *p.w2.value.data) v = 0.0;
  for (i64 i = 0; i < 4; ++i) p.b2.value[i] = 0.5 * static_cast<double>(i);
  Tensor<double> h = const_tensor({6, 4}, rng);
  Pass<double> pass;
  Tensor<double> y = ffn(h, p, pass);
  for (i64 t = 0; t < 6; ++t)
    for (i64 j = 0; j < 4; ++j) CHECK(y[t * 4 + j] == p.b2.value[j]);
}

TEST_CASE("ffn is position-wise: permuting rows permutes outputs") {
  Rng rng(4);
  FfnParams<double> p = make_ffn_params<double>(3, "ffn", rng);
  Tensor<double> h = const_tensor({5, 3}, rng);
  Pass<double> pass;
  Tensor<double> y = ffn(h, p, pass);
  std::vector<i64> perm = {4, 2, 0, 1, 3};
  Tensor<double> hp = Tensor<double>::zeros({5, 3});
  for (i64 i = 0; i < 5; ++i)
    for (i64 j = 0; j < 3; ++j) hp[i * 3 + j] = h[perm[static_cast<std::size_t>(i)] * 3 + j];
  Tensor<double> yp = ffn(hp, p, pass);
  for (i64 i = 0; i < 5; ++i)
    for (i64 j = 0; j < 3; ++j) CHECK(yp[i * 3 + j] == y[perm[static_cast<std::size_t>(i)] * 3 + j]);
}

TEST_CASE("ffn gradient check") {
  Rng rng(5);
  FfnParams<double> p = make_ffn_params<double>(3, "ffn", rng);
  Tensor<double> h = const_tensor({4, 3}, rng);
  Tensor<double> weights = const_tensor({4, 3}, rng);
  auto fn = [&](Pass<double>& pass) { return sum_all(mul(ffn(h, p, pass), weights.detached())); };
  std::vector<Param<double>*> ps = p.param_list();
  GradCheckReport rep = grad_check<double>(ps, fn, 1e-5, 1e-4);
  CHECK_MESSAGE(rep.all_pass, "worst rel err ", rep.worst);
}

TEST_CASE("mamba block gradient check (both scan modes)") {
  Rng rng(6);
  S6Config cfg{4, 2, 0, false};
  MambaBlockParams<double> p = block_params(2, cfg, rng);
  Tensor<double> x = const_tensor({5, 2}, rng);
  Tensor<double> weights = const_tensor({5, 2}, rng);
  for (ScanMode mode : {ScanMode::sequential, ScanMode::parallel}) {
    auto fn = [&](Pass<double>& pass) {
      return sum_all(mul(mamba_block(x, p, cfg, pass, mode), weights.detached()));
    };
    std::vector<Param<double>*> ps = p.param_list(cfg);
    GradCheckReport rep = grad_check<double>(ps, fn, 1e-5, 1e-4);
    CHECK_MESSAGE(rep.all_pass, "worst rel err ", rep.worst);
  }
}

TEST_CASE("residual path keeps gradient flowing to the block input") {
  Rng rng(7);
  S6Config cfg{4, 2, 0, false};
  MambaBlockParams<double> p = block_params(2, cfg, rng);
  Tape<double> tape;
  Param<double> x = make_param("x", {5, 2}, rng);
  Pass<double> pass(tape);
  Tensor<double> y = mamba_block(pass.use(x), p, cfg, pass, ScanMode::sequential);
  tape.backward(sum_all(mul(y, y)));
  const std::vector<double>& g = *pass.grad(x);
  double norm = 0.0;
  for (double v : g) norm += v * v;
  CHECK(norm > 0.0);
}

TEST_CASE("attention block at T=1 is the value path through the output projection") {
  Rng rng(8);
  AttentionBlockParams<double> p = make_attention_block_params<double>(4, "attn", rng);
  Tensor<double> x = const_tensor({1, 4}, rng);
  Pass<double> pass;
  Tensor<double> y = attention_block(x, p, pass);
  Tensor<double> expect = layer_norm_lastdim(add(matmul(matmul(x, p.w_v.value), p.w_o.value), x),
                                             p.ln_scale.value, p.ln_shift.value);
  CHECK(ssmkt::testing::max_abs_diff(y, expect) <= 1e-12);
}

TEST_CASE("attention block is causal under the mask") {
  Rng rng(9);
  AttentionBlockParams<double> p = make_attention_block_params<double>(4, "attn", rng);
  const i64 T = 8;
  Tensor<double> x = const_tensor({T, 4}, rng);
  Pass<double> pass;
  Tensor<double> base = attention_block(x, p, pass);
  for (i64 t = 1; t < T; ++t) {
    Tensor<double> x2 = Tensor<double>::from(x.shape, *x.data);
    x2[t * 4] += 1.0;
    Tensor<double> y2 = attention_block(x2, p, pass);
    for (i64 u = 0; u < t; ++u)
      for (i64 j = 0; j < 4; ++j) CHECK(y2[u * 4 + j] == base[u * 4 + j]);
  }
}

TEST_CASE("attention block gradient check") {
  Rng rng(10);
  AttentionBlockParams<double> p = make_attention_block_params<double>(3, "attn", rng);
  Tensor<double> x = const_tensor({4, 3}, rng);
  Tensor<double> weights = const_tensor({4, 3}, rng);
  auto fn = [&](Pass<double>& pass) {
    return sum_all(mul(attention_block(x, p, pass), weights.detached()));
  };
  std::vector<Param<double>*> ps = p.param_list();
  GradCheckReport rep = grad_check<double>(ps, fn, 1e-5, 1e-4);
  CHECK_MESSAGE(rep.all_pass, "worst rel err ", rep.worst);
}
