#pragma once

#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "ssmkt/tensor.hpp"

namespace ssmkt {

// Central finite-difference check of reverse-mode gradients, per parameter
// group. `loss_fn` must be a deterministic function of the current parameter
// values; it is called once on a tape for the analytic gradients and twice
// per scalar for the numeric ones. Meant for 64-bit scalars.
struct GradCheckReport {
  struct Entry {
    std::string name;
    double max_rel_err = 0.0;
    bool pass = true;
  };
  std::vector<Entry> entries;
  double worst = 0.0;
  bool all_pass = true;
};

template <typename S>
GradCheckReport grad_check(const std::vector<Param<S>*>& params,
                           const std::function<Tensor<S>(Pass<S>&)>& loss_fn, double h = 1e-5,
                           double tol = 1e-4,
                           const std::function<void(std::string&, std::vector<S>&)>& tamper = nullptr) {
  Tape<S> tape;
  Pass<S> pass(tape);
  Tensor<S> loss = loss_fn(pass);
  tape.backward(loss);

  auto eval = [&]() -> double {
    Pass<S> plain;
    Tensor<S> l = loss_fn(plain);
    return static_cast<double>(l[0]);
  };

  GradCheckReport report;
  for (Param<S>* p : params) {
    GradCheckReport::Entry entry;
    entry.name = p->name;
    std::vector<S> analytic;
    if (const std::vector<S>* g = pass.grad(*p))
      analytic = *g;
    else
      analytic.assign(static_cast<std::size_t>(p->value.numel()), S(0));
    if (tamper) tamper(entry.name, analytic);

    auto& val = *p->value.data;
    for (std::size_t j = 0; j < val.size(); ++j) {
      const S keep = val[j];
      val[j] = keep + S(h);
      const double up = eval();
      val[j] = keep - S(h);
      const double down = eval();
      val[j] = keep;
      const double numeric = (up - down) / (2.0 * h);
      const double a = static_cast<double>(analytic[j]);
      const double denom = std::max({std::abs(a), std::abs(numeric), 1e-6});
      entry.max_rel_err = std::max(entry.max_rel_err, std::abs(a - numeric) / denom);
    }
    entry.pass = entry.max_rel_err <= tol;
    report.worst = std::max(report.worst, entry.max_rel_err);
    report.all_pass = report.all_pass && entry.pass;
    report.entries.push_back(std::move(entry));
  }
  return report;
}

}  // namespace ssmkt
