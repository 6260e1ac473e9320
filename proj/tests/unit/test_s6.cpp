#include <cmath>

#include "doctest.h"
#include "test_helpers.hpp"

using namespace ssmkt;
using ssmkt::testing::const_tensor;
using ssmkt::testing::make_param;

namespace {

S6Config tiny_cfg(i64 d = 4, i64 n = 3) {
  S6Config cfg;
  cfg.d_inner = d;
  cfg.n_state = n;
  return cfg;
}

// spec-signature wrappers: scan over (Abar, Bbar, C, x) -> y
Tensor<double> scan_y(const Tensor<double>& abar, const Tensor<double>& bbar,
                      const Tensor<double>& c, const Tensor<double>& x, ScanMode mode) {
  return contract_n(scan_lin(abar, bmul3_td(bbar, x), mode), c);
}

}  // namespace

TEST_CASE("selective_params: zero input gives softplus(bias) everywhere, positive delta") {
  Rng rng(1);
  S6Config cfg = tiny_cfg(5, 4);
  S6Params<double> p = make_s6_params<double>(cfg, "s6", rng);
  Tensor<double> x = Tensor<double>::zeros({3, 5});
  Pass<double> pass;
  SelectiveParams<double> sel = selective_params(x, p, pass);
  for (i64 t = 0; t < 3; ++t)
    for (i64 c = 0; c < 5; ++c) {
      const double expect = std::log1p(std::exp(p.dt_bias.value[c]));
      CHECK(sel.delta[t * 5 + c] == doctest::Approx(expect).epsilon(1e-12));
    }

  // random input: softplus keeps delta strictly positive
  Tensor<double> xr = const_tensor({7, 5}, rng, 3.0);
  SelectiveParams<double> sel2 = selective_params(xr, p, pass);
  for (i64 i = 0; i < sel2.delta.numel(); ++i) CHECK(sel2.delta[i] > 0.0);
}

TEST_CASE("selective_params: W_B = 0 silences the state entirely") {
  Rng rng(2);
  S6Config cfg = tiny_cfg();
  S6Params<double> p = make_s6_params<double>(cfg, "s6", rng);
  for (double& v : *p.w_b.value.data) v = 0.0;
  Tensor<double> x = const_tensor({6, 4}, rng);
  Pass<double> pass;
  Tensor<double> y = s6_forward(x, p, cfg, pass, ScanMode::sequential);
  for (i64 i = 0; i < y.numel(); ++i) CHECK(y[i] == 0.0);
}

TEST_CASE("discretize: closed form at a=-1, dt=ln2, B=1") {
  Tensor<double> delta = Tensor<double>::full({1, 1}, std::log(2.0));
  Tensor<double> log_neg_a = Tensor<double>::zeros({1, 1});  // log(-A)=0 => A=-1
  Tensor<double> b = Tensor<double>::full({1, 1}, 1.0);
  DiscretePair<double> dp = discretize(delta, log_neg_a, b);
  CHECK(std::abs(dp.abar[0] - 0.5) <= 1e-12);
  CHECK(std::abs(dp.bbar[0] - 0.5) <= 1e-12);
}

TEST_CASE("discretize: dt -> 0+ gives Abar -> 1 and Bbar -> 0 via the series branch") {
  Tensor<double> delta = Tensor<double>::full({1, 1}, 1e-9);
  Tensor<double> log_neg_a = Tensor<double>::zeros({1, 1});
  Tensor<double> b = Tensor<double>::full({1, 1}, 1.0);
  DiscretePair<double> dp = discretize(delta, log_neg_a, b);
  CHECK(dp.abar[0] == doctest::Approx(1.0).epsilon(1e-8));
  CHECK(dp.bbar[0] == doctest::Approx(1e-9).epsilon(1e-6));
}

TEST_CASE("discretize: exact and series branches agree at the threshold") {
  Rng rng(3);
  for (int trial = 0; trial < 50; ++trial) {
    const double a = -std::exp(rng.uniform(-2.0, 2.0));
    const double dt = kZohSeriesThreshold / std::abs(a);  // |dt*a| right at the boundary
    const double da = dt * a;
    const double exact = (std::exp(da) - 1.0) / a;
    const double series = dt * (1.0 + da / 2.0);
    CHECK(std::abs(exact - series) / std::abs(exact) <= 1e-10);
  }
}

TEST_CASE("scan: Abar = 0 is memoryless, zero input gives zero output") {
  Rng rng(4);
  const i64 T = 5, d = 3, n = 2;
  Tensor<double> abar = Tensor<double>::zeros({T, d, n});
  Tensor<double> bbar = const_tensor({T, d, n}, rng);
  Tensor<double> c = const_tensor({T, n}, rng);
  Tensor<double> x = const_tensor({T, d}, rng);
  Tensor<double> y = scan_y(abar, bbar, c, x, ScanMode::sequential);
  for (i64 t = 0; t < T; ++t)
    for (i64 i = 0; i < d; ++i) {
      double expect = 0.0;
      for (i64 j = 0; j < n; ++j) expect += c[t * n + j] * bbar[(t * d + i) * n + j] * x[t * d + i];
      CHECK(y[t * d + i] == doctest::Approx(expect).epsilon(1e-12));
    }

  Tensor<double> zero_x = Tensor<double>::zeros({T, d});
  Tensor<double> y0 = scan_y(const_tensor({T, d, n}, rng), bbar, c, zero_x, ScanMode::sequential);
  for (i64 i = 0; i < y0.numel(); ++i) CHECK(y0[i] == 0.0);
}

TEST_CASE("scan: hand recurrence for T=3 scalar case") {
  // a=0.5, bbar=1, c=1, x=[1,1,1] -> h=[1,1.5,1.75] and y=h
  Tensor<double> abar = Tensor<double>::full({3, 1, 1}, 0.5);
  Tensor<double> bbar = Tensor<double>::full({3, 1, 1}, 1.0);
  Tensor<double> c = Tensor<double>::full({3, 1}, 1.0);
  Tensor<double> x = Tensor<double>::full({3, 1}, 1.0);
  for (ScanMode mode : {ScanMode::sequential, ScanMode::parallel}) {
    Tensor<double> y = scan_y(abar, bbar, c, x, mode);
    CHECK(y[0] == doctest::Approx(1.0).epsilon(1e-12));
    CHECK(y[1] == doctest::Approx(1.5).epsilon(1e-12));
    CHECK(y[2] == doctest::Approx(1.75).epsilon(1e-12));
  }
}

TEST_CASE("scan: parallel matches sequential over 100 random instances") {
  Rng rng(7);
  for (int trial = 0; trial < 100; ++trial) {
    const i64 T = 1 + static_cast<i64>(rng.below(64));
    const i64 d = 1 + static_cast<i64>(rng.below(32));
    const i64 n = 1 + static_cast<i64>(rng.below(16));
    Tensor<double> abar = Tensor<double>::zeros({T, d, n});
    for (i64 i = 0; i < abar.numel(); ++i) abar[i] = rng.uniform(0.0, 1.0);
    Tensor<double> bbar = const_tensor({T, d, n}, rng);
    Tensor<double> u = bmul3_td(bbar, const_tensor({T, d}, rng));
    Tensor<double> hs = scan_lin(abar, u, ScanMode::sequential);
    Tensor<double> hp = scan_lin(abar, u, ScanMode::parallel);
    CHECK(ssmkt::testing::max_rel_diff(hs, hp) <= 1e-6);
  }
}

TEST_CASE("scan: T=1 parallel equals one recurrence step exactly") {
  Rng rng(8);
  Tensor<double> abar = const_tensor({1, 3, 2}, rng);
  Tensor<double> u = const_tensor({1, 3, 2}, rng);
  Tensor<double> hs = scan_lin(abar, u, ScanMode::sequential);
  Tensor<double> hp = scan_lin(abar, u, ScanMode::parallel);
  for (i64 i = 0; i < hs.numel(); ++i) CHECK(hs[i] == hp[i]);
  for (i64 i = 0; i < hs.numel(); ++i) CHECK(hs[i] == u[i]);
}

TEST_CASE("scan combinator is associative to 1e-12 on random pairs") {
  Rng rng(9);
  for (int trial = 0; trial < 200; ++trial) {
    double pa = rng.normal(), pb = rng.normal();
    double qa = rng.normal(), qb = rng.normal();
    double ra = rng.normal(), rb = rng.normal();
    // ((r ∘ q) ∘ p) vs (r ∘ (q ∘ p)) with p earliest
    double qa_pa, qb_pa;
    combine_pair(qa, qb, pa, pb, qa_pa, qb_pa);
    double left_a, left_b;
    combine_pair(ra, rb, qa_pa, qb_pa, left_a, left_b);
    double rq_a, rq_b;
    combine_pair(ra, rb, qa, qb, rq_a, rq_b);
    double right_a, right_b;
    combine_pair(rq_a, rq_b, pa, pb, right_a, right_b);
    CHECK(std::abs(left_a - right_a) <= 1e-12 * std::max(1.0, std::abs(left_a)));
    CHECK(std::abs(left_b - right_b) <= 1e-12 * std::max(1.0, std::abs(left_b)));
  }
}

TEST_CASE("scan: causality is exact (perturbation at j leaves outputs before j bitwise)") {
  Rng rng(10);
  const i64 T = 16, d = 4, n = 3;
  Tensor<double> abar = Tensor<double>::zeros({T, d, n});
  for (i64 i = 0; i < abar.numel(); ++i) abar[i] = rng.uniform(0.0, 1.0);
  Tensor<double> u = const_tensor({T, d, n}, rng);
  for (ScanMode mode : {ScanMode::sequential, ScanMode::parallel}) {
    Tensor<double> base = scan_lin(abar, u, mode);
    for (i64 j = 0; j < T; j += 3) {
      Tensor<double> u2 = Tensor<double>::from(u.shape, *u.data);
      u2[j * d * n] += 1.0;
      Tensor<double> out = scan_lin(abar, u2, mode);
      for (i64 t = 0; t < j; ++t)
        for (i64 l = 0; l < d * n; ++l) CHECK(out[t * d * n + l] == base[t * d * n + l]);
    }
  }
}

TEST_CASE("scan: stability over T=4096 with A < 0 and bounded input") {
  Rng rng(12);
  S6Config cfg = tiny_cfg(2, 4);
  S6Params<double> p = make_s6_params<double>(cfg, "s6", rng);
  Tensor<double> x = Tensor<double>::zeros({4096, 2});
  for (i64 i = 0; i < x.numel(); ++i) x[i] = rng.uniform(-3.0, 3.0);
  Pass<double> pass;
  Tensor<double> y = s6_forward(x, p, cfg, pass, ScanMode::parallel);
  for (i64 i = 0; i < y.numel(); ++i) CHECK(std::isfinite(y[i]));
}

TEST_CASE("scan_parallel gradient matches finite differences on a tiny instance") {
  Rng rng(13);
  Param<double> raw_a = make_param("raw_a", {4, 2, 3}, rng, 0.5);
  Param<double> raw_u = make_param("raw_u", {4, 2, 3}, rng);
  Tensor<double> weights = const_tensor({4, 2, 3}, rng);
  auto fn = [&](Pass<double>& pass) {
    Tensor<double> abar = sigmoid(pass.use(raw_a));  // keep a in (0,1)
    Tensor<double> h = scan_lin(abar, pass.use(raw_u), ScanMode::parallel);
    return sum_all(mul(h, weights.detached()));
  };
  std::vector<Param<double>*> ps{&raw_a, &raw_u};
  GradCheckReport rep = grad_check<double>(ps, fn, 1e-5, 1e-4);
  CHECK_MESSAGE(rep.all_pass, "worst rel err ", rep.worst);
}

TEST_CASE("step: streaming equals the batched sequential scan bitwise") {
  Rng rng(14);
  S6Config cfg = tiny_cfg(6, 4);
  S6Params<double> p = make_s6_params<double>(cfg, "s6", rng);
  const i64 T = 32;
  Tensor<double> x = const_tensor({T, 6}, rng);
  Pass<double> pass;
  Tensor<double> y = s6_forward(x, p, cfg, pass, ScanMode::sequential);

  S6State<double> st(cfg);
  std::vector<double> y_t(6);
  for (i64 t = 0; t < T; ++t) {
    s6_step(x.ptr() + t * 6, p, cfg, st, y_t.data());
    for (i64 c = 0; c < 6; ++c) CHECK(y_t[static_cast<std::size_t>(c)] == y[t * 6 + c]);
  }
}

TEST_CASE("step: state size does not depend on tokens consumed") {
  Rng rng(15);
  S6Config cfg = tiny_cfg(6, 4);
  S6Params<double> p = make_s6_params<double>(cfg, "s6", rng);
  S6State<double> st(cfg);
  const long long before = st.scalar_count();
  std::vector<double> y(6);
  Tensor<double> x = const_tensor({100, 6}, rng);
  for (i64 t = 0; t < 100; ++t) s6_step(x.ptr() + t * 6, p, cfg, st, y.data());
  CHECK(st.scalar_count() == before);
  CHECK(before == 6 * 4);
}

TEST_CASE("s6 with skip adds the direct term and stays consistent with step") {
  Rng rng(16);
  S6Config cfg = tiny_cfg(3, 2);
  cfg.use_skip = true;
  S6Params<double> p = make_s6_params<double>(cfg, "s6", rng);
  for (i64 i = 0; i < 3; ++i) p.skip_d.value[i] = 0.5 + 0.1 * static_cast<double>(i);
  Tensor<double> x = const_tensor({10, 3}, rng);
  Pass<double> pass;
  Tensor<double> y = s6_forward(x, p, cfg, pass, ScanMode::sequential);
  S6State<double> st(cfg);
  std::vector<double> y_t(3);
  for (i64 t = 0; t < 10; ++t) {
    s6_step(x.ptr() + t * 3, p, cfg, st, y_t.data());
    for (i64 c = 0; c < 3; ++c) CHECK(y_t[static_cast<std::size_t>(c)] == y[t * 3 + c]);
  }
}
