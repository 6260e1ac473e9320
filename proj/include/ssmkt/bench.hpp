#pragma once

#include <algorithm>
#include <chrono>
#include <string>
#include <vector>

#include "ssmkt/adam.hpp"
#include "ssmkt/model.hpp"
#include "ssmkt/trainer.hpp"

namespace ssmkt {

// One row of the efficiency study. Scalar counts are bit-deterministic;
// wall times are medians of `repeats` runs after two warmups and never gate
// any test.
struct BenchRecord {
  std::string model;  // "mamba" | "attention"
  i64 T = 0;
  double train_step_s = 0.0;
  double infer_step_s = 0.0;
  long long tape_scalars = 0;
  i64 params = 0;
  long long stream_state_scalars = 0;  // mamba only; 0 for attention
};

struct BenchConfig {
  i64 d_model = 128;
  i64 n_layers = 5;
  i64 repeats = 5;
  std::uint64_t seed = 1;
  i64 vocab_questions = 64;
  i64 vocab_concepts = 16;
};

namespace detail {

template <typename F>
double median_seconds(F&& body, i64 repeats) {
  for (int w = 0; w < 2; ++w) body();
  std::vector<double> times;
  for (i64 r = 0; r < std::max<i64>(repeats, 1); ++r) {
    const auto t0 = std::chrono::steady_clock::now();
    body();
    times.push_back(std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count());
  }
  std::sort(times.begin(), times.end());
  return times[times.size() / 2];
}

}  // namespace detail

template <typename S>
BenchRecord bench_model(ModelArch arch, i64 T, const BenchConfig& bc) {
  ModelConfig mc;
  mc.arch = arch;
  mc.d_model = bc.d_model;
  mc.n_layers = bc.n_layers;
  mc.n_questions = bc.vocab_questions;
  mc.n_concepts = bc.vocab_concepts;
  mc.max_seq_len = T;
  KTModel<S> model(mc, bc.seed);

  Rng rng(bc.seed ^ 0xA5A5A5A5ULL);
  std::vector<i64> q(static_cast<std::size_t>(T)), c(static_cast<std::size_t>(T)), r(static_cast<std::size_t>(T));
  for (i64 t = 0; t < T; ++t) {
    q[static_cast<std::size_t>(t)] = static_cast<i64>(rng.below(static_cast<std::uint64_t>(bc.vocab_questions)));
    c[static_cast<std::size_t>(t)] = static_cast<i64>(rng.below(static_cast<std::uint64_t>(bc.vocab_concepts)));
    r[static_cast<std::size_t>(t)] = static_cast<i64>(rng.below(2));
  }
  std::vector<char> mask(static_cast<std::size_t>(T), 1);

  BenchRecord rec;
  rec.model = arch == ModelArch::mamba ? "mamba" : "attention";
  rec.T = T;
  rec.params = model.param_count();

  // retained-scalar count: recording forward alone populates the counter
  {
    Tape<S> tape;
    Pass<S> pass(tape);
    model.forward(q, c, r, pass, ScanMode::parallel);
    rec.tape_scalars = tape.saved_scalars();
  }

  std::vector<Param<S>*> params = model.params();
  AdamState<S> adam(params);
  rec.train_step_s = detail::median_seconds(
      [&]() {
        Tape<S> tape;
        Pass<S> pass(tape);
        Tensor<S> p = model.forward(q, c, r, pass, ScanMode::parallel);
        Tensor<S> loss = model.loss(p, r, mask, pass);
        tape.backward(loss);
        std::vector<std::vector<S>> grads;
        for (Param<S>* prm : params) {
          if (const std::vector<S>* g = pass.grad(*prm))
            grads.push_back(*g);
          else
            grads.emplace_back(static_cast<std::size_t>(prm->value.numel()), S(0));
        }
        adam_step(params, grads, 0.0, adam);  // lr 0: timed machinery, frozen weights
      },
      bc.repeats);

  if (arch == ModelArch::mamba) {
    rec.infer_step_s = detail::median_seconds(
        [&]() {
          ModelStreamState<S> st = model.make_stream_state();
          for (i64 t = 0; t < T; ++t)
            model.stream_step(st, q[static_cast<std::size_t>(t)], c[static_cast<std::size_t>(t)],
                              r[static_cast<std::size_t>(t)]);
        },
        bc.repeats);
    ModelStreamState<S> st = model.make_stream_state();
    rec.stream_state_scalars = st.scalar_count();
  } else {
    rec.infer_step_s = detail::median_seconds(
        [&]() {
          Pass<S> plain;
          model.forward(q, c, r, plain, ScanMode::parallel);
        },
        bc.repeats);
  }
  return rec;
}

}  // namespace ssmkt
