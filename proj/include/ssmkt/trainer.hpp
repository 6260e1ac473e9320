#pragma once

#include <chrono>
#include <cmath>
#include <functional>
#include <thread>
#include <vector>

#include "ssmkt/adam.hpp"
#include "ssmkt/data.hpp"
#include "ssmkt/model.hpp"

namespace ssmkt {

struct TrainConfig {
  double lr = 1e-3;
  i64 batch_size = 64;
  i64 max_epochs = 200;
  i64 patience = 10;
  double clip_norm = 5.0;
  std::uint64_t seed = 0;
  i64 threads = 0;  // 0 = hardware concurrency
  ScanMode scan = ScanMode::parallel;
};

struct EpochStats {
  i64 epoch = 0;
  double train_loss = 0.0;  // mean masked BCE
  double val_auc = 0.0;
  double val_acc = 0.0;
  double wall_seconds = 0.0;  // informative only; kept out of the metrics log
};

struct TrainResult {
  std::vector<EpochStats> history;
  double best_auc = 0.0;
  double best_acc = 0.0;
  i64 best_epoch = -1;
  i64 epochs_run = 0;
};

template <typename S>
struct EvalResult {
  std::optional<double> auc_value;
  std::optional<double> acc_value;
  i64 positions = 0;
};

// Forward every window (no tape), collect predictions at valid positions.
template <typename S>
EvalResult<S> evaluate(KTModel<S>& model, const std::vector<Window>& windows,
                       ScanMode mode = ScanMode::parallel) {
  std::vector<double> preds;
  std::vector<i64> labels;
  for (const Window& w : windows) {
    if (w.valid == 0) continue;
    std::vector<i64> q(w.q.begin(), w.q.begin() + w.valid);
    std::vector<i64> c(w.c.begin(), w.c.begin() + w.valid);
    std::vector<i64> r(w.r.begin(), w.r.begin() + w.valid);
    Pass<S> plain;
    Tensor<S> p = model.forward(q, c, r, plain, mode);
    for (i64 t = 0; t < w.valid; ++t) {
      preds.push_back(static_cast<double>(p[t]));
      labels.push_back(r[static_cast<std::size_t>(t)]);
    }
  }
  EvalResult<S> out;
  out.positions = static_cast<i64>(preds.size());
  out.auc_value = auc(preds, labels);
  out.acc_value = acc(preds, labels);
  return out;
}

// Per-sequence forward/backward on independent tapes, fanned out over
// worker threads; gradients are reduced by summation in batch order, so the
// result is bit-identical no matter how many threads run.
template <typename S>
class BatchGradients {
 public:
  explicit BatchGradients(const std::vector<Param<S>*>& params) : params_(params) {
    for (const Param<S>* p : params_)
      sums_.emplace_back(static_cast<std::size_t>(p->value.numel()), S(0));
  }

  // Returns the summed masked BCE over the batch plus the valid count.
  std::pair<double, i64> accumulate(KTModel<S>& model, const std::vector<Window>& windows,
                                    const std::vector<i64>& batch_idx, ScanMode scan, i64 threads) {
    const i64 n = static_cast<i64>(batch_idx.size());
    std::vector<std::vector<std::vector<S>>> per_seq(static_cast<std::size_t>(n));
    std::vector<double> losses(static_cast<std::size_t>(n), 0.0);
    std::vector<i64> valids(static_cast<std::size_t>(n), 0);

    auto work = [&](i64 begin, i64 end) {
      for (i64 i = begin; i < end; ++i) {
        const Window& w = windows[static_cast<std::size_t>(batch_idx[static_cast<std::size_t>(i)])];
        if (w.valid == 0) continue;
        std::vector<i64> q(w.q.begin(), w.q.begin() + w.valid);
        std::vector<i64> c(w.c.begin(), w.c.begin() + w.valid);
        std::vector<i64> r(w.r.begin(), w.r.begin() + w.valid);
        std::vector<char> mask(static_cast<std::size_t>(w.valid), 1);
        Tape<S> tape;
        Pass<S> pass(tape);
        Tensor<S> p = model.forward(q, c, r, pass, scan);
        Tensor<S> loss = model.loss(p, r, mask, pass, /*include_l2=*/false);
        losses[static_cast<std::size_t>(i)] = static_cast<double>(loss[0]);
        valids[static_cast<std::size_t>(i)] = w.valid;
        tape.backward(loss);
        auto& slot = per_seq[static_cast<std::size_t>(i)];
        slot.reserve(params_.size());
        for (const Param<S>* prm : params_) {
          if (const std::vector<S>* g = pass.grad(*prm))
            slot.push_back(*g);
          else
            slot.emplace_back();
        }
      }
    };

    i64 nthreads = threads > 0 ? threads : static_cast<i64>(std::thread::hardware_concurrency());
    nthreads = std::max<i64>(1, std::min(nthreads, n));
    if (nthreads == 1) {
      work(0, n);
    } else {
      std::vector<std::thread> pool;
      const i64 chunk = (n + nthreads - 1) / nthreads;
      for (i64 t = 0; t < nthreads; ++t) {
        const i64 b = t * chunk, e = std::min(n, b + chunk);
        if (b >= e) break;
        pool.emplace_back(work, b, e);
      }
      for (auto& th : pool) th.join();
    }

    double loss_sum = 0.0;
    i64 valid_sum = 0;
    for (i64 i = 0; i < n; ++i) {  // fixed reduction order
      loss_sum += losses[static_cast<std::size_t>(i)];
      valid_sum += valids[static_cast<std::size_t>(i)];
      const auto& slot = per_seq[static_cast<std::size_t>(i)];
      for (std::size_t pi = 0; pi < slot.size(); ++pi) {
        if (slot[pi].empty()) continue;
        auto& acc = sums_[pi];
        for (std::size_t j = 0; j < slot[pi].size(); ++j) acc[j] += slot[pi][j];
      }
    }
    return {loss_sum, valid_sum};
  }

  std::vector<std::vector<S>>& sums() { return sums_; }

 private:
  std::vector<Param<S>*> params_;
  std::vector<std::vector<S>> sums_;
};

// Adam training with early stopping: training stops once neither the best
// validation AUC nor the best validation ACC has improved for `patience`
// epochs. `on_epoch` fires after every epoch; `on_improved` fires whenever
// the best AUC moves (checkpointing hook).
template <typename S>
TrainResult train_model(KTModel<S>& model, const std::vector<Window>& train,
                        const std::vector<Window>& val, const TrainConfig& tc,
                        const std::function<void(const EpochStats&)>& on_epoch = nullptr,
                        const std::function<void(const TrainResult&)>& on_improved = nullptr) {
  if (train.empty()) throw FormatError("train: empty training split");
  std::vector<Param<S>*> params = model.params();
  AdamState<S> adam(params);
  Rng shuffle_rng(tc.seed ^ 0x9E3779B97F4A7C15ULL);

  TrainResult result;
  i64 stale = 0;
  for (i64 epoch = 1; epoch <= tc.max_epochs; ++epoch) {
    const auto t0 = std::chrono::steady_clock::now();
    std::vector<i64> order(train.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = static_cast<i64>(i);
    shuffle_rng.shuffle(order);

    double epoch_loss = 0.0;
    i64 epoch_valid = 0;
    for (std::size_t at = 0; at < order.size(); at += static_cast<std::size_t>(tc.batch_size)) {
      std::vector<i64> batch(order.begin() + static_cast<std::ptrdiff_t>(at),
                             order.begin() + static_cast<std::ptrdiff_t>(
                                                 std::min(order.size(), at + static_cast<std::size_t>(tc.batch_size))));
      BatchGradients<S> grads(params);
      auto [loss_sum, valid_sum] = grads.accumulate(model, train, batch, tc.scan, tc.threads);
      if (!std::isfinite(loss_sum))
        throw NumericError("train: non-finite loss in epoch " + std::to_string(epoch));
      if (valid_sum == 0) continue;
      epoch_loss += loss_sum;
      epoch_valid += valid_sum;

      // mean over valid positions, then the L2 term on mu once per step
      const S inv = S(1.0 / static_cast<double>(valid_sum));
      auto& sums = grads.sums();
      for (auto& g : sums)
        for (S& x : g) x *= inv;
      if (model.config().use_rasch && model.config().lambda_l2 > 0) {
        Param<S>& mu = model.embeddings().question_difficulty;
        for (std::size_t pi = 0; pi < params.size(); ++pi)
          if (params[pi] == &mu)
            for (i64 j = 0; j < mu.value.numel(); ++j)
              sums[pi][static_cast<std::size_t>(j)] += S(2.0 * model.config().lambda_l2) * mu.value[j];
      }
      clip_global_norm(sums, tc.clip_norm);
      adam_step(params, sums, tc.lr, adam);
    }

    EpochStats stats;
    stats.epoch = epoch;
    stats.train_loss = epoch_valid ? epoch_loss / static_cast<double>(epoch_valid) : 0.0;
    EvalResult<S> ev = evaluate(model, val, tc.scan);
    stats.val_auc = ev.auc_value.value_or(0.5);
    stats.val_acc = ev.acc_value.value_or(0.0);
    stats.wall_seconds =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    result.history.push_back(stats);
    result.epochs_run = epoch;

    bool improved = false;
    if (stats.val_auc > result.best_auc) {
      result.best_auc = stats.val_auc;
      result.best_epoch = epoch;
      improved = true;
      if (on_improved) on_improved(result);
    }
    if (stats.val_acc > result.best_acc) {
      result.best_acc = stats.val_acc;
      improved = true;
    }
    if (on_epoch) on_epoch(stats);
    stale = improved ? 0 : stale + 1;
    if (stale >= tc.patience) break;
  }
  return result;
}

}  // namespace ssmkt
