#pragma once

#include <cmath>
#include <vector>

#include "ssmkt/ops.hpp"
#include "ssmkt/tensor.hpp"

// Linear-recurrence scan over time:  h_t = A_t * h_{t-1} + U_t  (elementwise
// over d*n lanes, h_{-1} = 0). Two forward evaluation orders share one exact
// adjoint:
//   sequential — the plain left-to-right recurrence;
//   parallel   — a work-efficient Blelloch tree over pairs (a, b) with the
//                combinator (a2,b2)∘(a1,b1) = (a2*a1, a2*b1 + b2).
// The tree reduction order is fixed (balanced binary tree, levels in order,
// blocks left to right), so results are deterministic run to run.

namespace ssmkt {

enum class ScanMode { sequential, parallel };

// Pair combinator for one lane; `later ∘ earlier`.
template <typename S>
inline void combine_pair(S a_later, S b_later, S a_earlier, S b_earlier, S& a_out, S& b_out) {
  a_out = a_later * a_earlier;
  b_out = a_later * b_earlier + b_later;
}

namespace detail {

template <typename S>
void scan_forward_sequential(const S* a, const S* u, S* h, i64 T, i64 lanes) {
  for (i64 l = 0; l < lanes; ++l) h[l] = u[l];
  for (i64 t = 1; t < T; ++t) {
    const S* at = a + t * lanes;
    const S* ut = u + t * lanes;
    const S* hp = h + (t - 1) * lanes;
    S* ht = h + t * lanes;
    for (i64 l = 0; l < lanes; ++l) ht[l] = at[l] * hp[l] + ut[l];
  }
}

// Blelloch scan on (a,b) pairs padded to a power of two with the identity
// (1, 0). The inclusive prefix for step t lands in h[t] as the b-component
// (h_{-1} = 0 makes the a-component irrelevant).
template <typename S>
void scan_forward_parallel(const S* a, const S* u, S* h, i64 T, i64 lanes) {
  i64 P = 1;
  while (P < T) P <<= 1;
  std::vector<S> wa(static_cast<std::size_t>(P * lanes), S(1));
  std::vector<S> wb(static_cast<std::size_t>(P * lanes), S(0));
  std::copy(a, a + T * lanes, wa.data());
  std::copy(u, u + T * lanes, wb.data());
  std::vector<S> oa(wa), ob(wb);  // originals, for the inclusive fix-up

  // up-sweep
  for (i64 s = 1; s < P; s <<= 1)
    for (i64 i = 2 * s - 1; i < P; i += 2 * s) {
      S* al = wa.data() + (i - s) * lanes;
      S* bl = wb.data() + (i - s) * lanes;
      S* ar = wa.data() + i * lanes;
      S* br = wb.data() + i * lanes;
      for (i64 l = 0; l < lanes; ++l) combine_pair(ar[l], br[l], al[l], bl[l], ar[l], br[l]);
    }

  // down-sweep: exclusive prefixes
  for (i64 l = 0; l < lanes; ++l) {
    wa[static_cast<std::size_t>((P - 1) * lanes + l)] = S(1);
    wb[static_cast<std::size_t>((P - 1) * lanes + l)] = S(0);
  }
  for (i64 s = P >> 1; s >= 1; s >>= 1)
    for (i64 i = 2 * s - 1; i < P; i += 2 * s) {
      S* al = wa.data() + (i - s) * lanes;
      S* bl = wb.data() + (i - s) * lanes;
      S* ar = wa.data() + i * lanes;
      S* br = wb.data() + i * lanes;
      for (i64 l = 0; l < lanes; ++l) {
        const S ta = al[l], tb = bl[l];
        al[l] = ar[l];
        bl[l] = br[l];
        // incoming prefix (earlier) then left-subtree total (later)
        combine_pair(ta, tb, ar[l], br[l], ar[l], br[l]);
      }
    }

  // inclusive_t = p_t ∘ exclusive_t; h_t is its b-component
  for (i64 t = 0; t < T; ++t) {
    const S* ea = wa.data() + t * lanes;
    const S* eb = wb.data() + t * lanes;
    const S* pa = oa.data() + t * lanes;
    const S* pb = ob.data() + t * lanes;
    S* ht = h + t * lanes;
    for (i64 l = 0; l < lanes; ++l) {
      S a_incl, b_incl;
      combine_pair(pa[l], pb[l], ea[l], eb[l], a_incl, b_incl);
      ht[l] = b_incl;
    }
  }
}

}  // namespace detail

// H = scan(A, U). A and U are (T, d, n); so is H. The adjoint is the exact
// reverse recurrence G_t = gH_t + A_{t+1} * G_{t+1}, with dU_t = G_t and
// dA_t = G_t * H_{t-1}; it retains A and H.
template <typename S>
Tensor<S> scan_lin(const Tensor<S>& a, const Tensor<S>& u, ScanMode mode) {
  check_tdn("scan_lin", a);
  check_same_shape("scan_lin", a, u);
  const i64 T = a.shape[0], lanes = a.shape[1] * a.shape[2];
  Tensor<S> h = Tensor<S>::zeros(a.shape);
  if (T > 0) {
    if (mode == ScanMode::sequential)
      detail::scan_forward_sequential(a.ptr(), u.ptr(), h.ptr(), T, lanes);
    else
      detail::scan_forward_parallel(a.ptr(), u.ptr(), h.ptr(), T, lanes);
  }
  if (Tape<S>* tp = tape_of<S>({&a, &u})) {
    const int na = a.node, nu = u.node;
    auto sa = tp->save(a);
    auto sh = tp->save(h);
    h.tape = tp;
    h.node = tp->record(T * lanes, [=](Tape<S>& t_, const std::vector<S>& g) {
      std::vector<S> G(g.end() - lanes, g.end());  // G_{T-1}
      std::vector<S>* ga = na >= 0 ? &t_.grad(na) : nullptr;
      std::vector<S>* gu = nu >= 0 ? &t_.grad(nu) : nullptr;
      for (i64 t = T - 1;; --t) {
        if (gu)
          for (i64 l = 0; l < lanes; ++l) (*gu)[static_cast<std::size_t>(t * lanes + l)] += G[static_cast<std::size_t>(l)];
        if (ga && t > 0) {
          const S* hp = sh->data() + (t - 1) * lanes;
          for (i64 l = 0; l < lanes; ++l)
            (*ga)[static_cast<std::size_t>(t * lanes + l)] += G[static_cast<std::size_t>(l)] * hp[l];
        }
        if (t == 0) break;
        const S* at = sa->data() + t * lanes;
        const S* gh = g.data() + (t - 1) * lanes;
        for (i64 l = 0; l < lanes; ++l)
          G[static_cast<std::size_t>(l)] = gh[l] + at[l] * G[static_cast<std::size_t>(l)];
      }
    });
  }
  return h;
}

}  // namespace ssmkt
