#pragma once

#include <cmath>
#include <vector>

#include "ssmkt/ssmkt.hpp"

namespace ssmkt::testing {

inline Param<double> make_param(const std::string& name, Shape shape, Rng& rng, double scale = 1.0) {
  Param<double> p{name, Tensor<double>::zeros(std::move(shape)), true};
  for (double& x : *p.value.data) x = scale * rng.normal();
  return p;
}

inline Tensor<double> const_tensor(Shape shape, Rng& rng, double scale = 1.0) {
  Tensor<double> t = Tensor<double>::zeros(std::move(shape));
  for (double& x : *t.data) x = scale * rng.normal();
  return t;
}

inline double max_abs_diff(const Tensor<double>& a, const Tensor<double>& b) {
  double m = 0.0;
  for (i64 i = 0; i < a.numel(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

inline double max_rel_diff(const Tensor<double>& a, const Tensor<double>& b) {
  double m = 0.0;
  for (i64 i = 0; i < a.numel(); ++i) {
    const double denom = std::max({std::abs(a[i]), std::abs(b[i]), 1e-9});
    m = std::max(m, std::abs(a[i] - b[i]) / denom);
  }
  return m;
}

}  // namespace ssmkt::testing
