#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <numeric>
#include <sstream>
#include <string>
#include <unordered_map>
#include <unordered_set>
#include <vector>

#include "ssmkt/errors.hpp"

namespace ssmkt {

using i64 = std::int64_t;
using Shape = std::vector<i64>;

inline i64 shape_numel(const Shape& s) {
  i64 n = 1;
  for (i64 d : s) n *= d;
  return n;
}

inline std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << "(";
  for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
  os << ")";
  return os.str();
}

template <typename S>
class Tape;

// Dense array of scalars. The buffer is shared; `node >= 0` means the tensor
// is an output of (or a watched leaf on) the tape it points to, and gradients
// will flow to it during backward.
template <typename S>
struct Tensor {
  Shape shape;
  std::shared_ptr<std::vector<S>> data;
  Tape<S>* tape = nullptr;
  int node = -1;

  Tensor() = default;

  static Tensor zeros(Shape shp) {
    Tensor t;
    t.shape = std::move(shp);
    t.data = std::make_shared<std::vector<S>>(static_cast<std::size_t>(shape_numel(t.shape)), S(0));
    return t;
  }

  static Tensor full(Shape shp, S v) {
    Tensor t = zeros(std::move(shp));
    for (S& x : *t.data) x = v;
    return t;
  }

  static Tensor from(Shape shp, std::vector<S> vals) {
    if (shape_numel(shp) != static_cast<i64>(vals.size()))
      throw ShapeError("Tensor::from: shape " + shape_str(shp) + " does not match " +
                       std::to_string(vals.size()) + " values");
    Tensor t;
    t.shape = std::move(shp);
    t.data = std::make_shared<std::vector<S>>(std::move(vals));
    return t;
  }

  i64 numel() const { return data ? static_cast<i64>(data->size()) : 0; }
  i64 dim(std::size_t i) const { return shape[i]; }
  int ndim() const { return static_cast<int>(shape.size()); }

  S* ptr() { return data->data(); }
  const S* ptr() const { return data->data(); }
  S& operator[](i64 i) { return (*data)[static_cast<std::size_t>(i)]; }
  const S& operator[](i64 i) const { return (*data)[static_cast<std::size_t>(i)]; }

  bool tracked() const { return tape != nullptr && node >= 0; }

  // Detached view: same buffer, no tape participation.
  Tensor detached() const {
    Tensor t;
    t.shape = shape;
    t.data = data;
    return t;
  }
};

// Reverse-mode tape. Records one node per primitive-op output (plus one node
// per watched leaf) in topological order; backward walks the list in reverse.
//
// The scalar counter tracks exactly the scalars retained for the backward
// pass: every distinct non-leaf value buffer an op saves is counted once.
// Watched-leaf (parameter) buffers live outside the tape and are excluded.
// Integer index metadata (embedding ids) is not scalar data and is excluded.
// The count is a deterministic function of the recorded op sequence and is
// the space proxy reported by the benchmark.
template <typename S>
class Tape {
 public:
  using Saved = std::shared_ptr<const std::vector<S>>;
  using GradFn = std::function<void(Tape&, const std::vector<S>&)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  // Registers a leaf whose gradient should be accumulated and kept.
  Tensor<S> watch(const Tensor<S>& value) {
    ensure_open("watch");
    Tensor<S> t = value.detached();
    t.tape = this;
    t.node = add_node(value.numel(), nullptr, /*leaf=*/true);
    return t;
  }

  // Records an op output; `fn` pulls the output gradient into input grads.
  int record(i64 out_numel, GradFn fn) {
    ensure_open("record");
    return add_node(out_numel, std::move(fn), /*leaf=*/false);
  }

  // Keeps a buffer alive for backward and counts its scalars (once per
  // distinct non-leaf buffer).
  Saved save(const Tensor<S>& t) {
    ensure_open("save");
    const void* key = static_cast<const void*>(t.data.get());
    if (counted_.insert(key).second) {
      keepalive_.push_back(t.data);
      bool is_leaf = t.tracked() && nodes_[static_cast<std::size_t>(t.node)].leaf;
      if (!is_leaf) saved_scalars_ += t.numel();
    }
    return t.data;
  }

  // Gradient accumulation buffer for a node (zero-initialized on demand).
  std::vector<S>& grad(int node) {
    auto& g = grads_[static_cast<std::size_t>(node)];
    if (g.empty()) g.assign(static_cast<std::size_t>(nodes_[static_cast<std::size_t>(node)].numel), S(0));
    return g;
  }

  // Runs reverse accumulation from a scalar loss. The tape is consumed:
  // non-leaf gradients are released as soon as they have been propagated,
  // and no further ops may be recorded. Leaf gradients stay readable.
  void backward(const Tensor<S>& loss) {
    ensure_open("backward");
    if (!loss.tracked() || loss.tape != this)
      throw ShapeError("backward: loss is not tracked on this tape");
    if (loss.numel() != 1)
      throw ShapeError("backward: loss must be scalar, got shape " + shape_str(loss.shape));
    consumed_ = true;
    grads_.resize(nodes_.size());
    grad(loss.node)[0] = S(1);
    for (std::size_t i = nodes_.size(); i-- > 0;) {
      Node& nd = nodes_[i];
      std::vector<S>& g = grads_[i];
      if (g.empty()) continue;
      if (nd.fn) {
        nd.fn(*this, g);
        nd.fn = nullptr;
      }
      if (!nd.leaf) {
        std::vector<S>().swap(g);
      }
    }
  }

  // Leaf gradient after backward; null if the leaf never received one.
  const std::vector<S>* leaf_grad(int node) const {
    if (node < 0 || static_cast<std::size_t>(node) >= grads_.size()) return nullptr;
    const auto& g = grads_[static_cast<std::size_t>(node)];
    return g.empty() ? nullptr : &g;
  }

  long long saved_scalars() const { return saved_scalars_; }
  std::size_t num_nodes() const { return nodes_.size(); }
  bool consumed() const { return consumed_; }

 private:
  struct Node {
    i64 numel;
    GradFn fn;
    bool leaf;
  };

  int add_node(i64 numel, GradFn fn, bool leaf) {
    nodes_.push_back(Node{numel, std::move(fn), leaf});
    return static_cast<int>(nodes_.size()) - 1;
  }

  void ensure_open(const char* what) const {
    if (consumed_) throw NumericError(std::string(what) + ": tape already consumed by backward");
  }

  std::vector<Node> nodes_;
  std::vector<std::vector<S>> grads_;
  std::vector<Saved> keepalive_;
  std::unordered_set<const void*> counted_;
  long long saved_scalars_ = 0;
  bool consumed_ = false;
};

// Picks the recording tape for an op from its inputs. Inputs that carry
// different live tapes are a usage error (one tape per forward pass).
template <typename S>
Tape<S>* tape_of(std::initializer_list<const Tensor<S>*> ins) {
  Tape<S>* tp = nullptr;
  for (const Tensor<S>* t : ins) {
    if (!t->tracked()) continue;
    if (tp && tp != t->tape) throw ShapeError("op inputs belong to two different tapes");
    tp = t->tape;
  }
  return tp;
}

// Named, persistent model parameter. The value buffer outlives any tape;
// each forward pass watches it through a Pass.
template <typename S>
struct Param {
  std::string name;
  Tensor<S> value;
  bool trainable = true;
};

// One forward/backward pass: binds persistent params to a tape (or to
// nothing, for pure inference when constructed without a tape).
template <typename S>
class Pass {
 public:
  Pass() = default;
  explicit Pass(Tape<S>& tape) : tape_(&tape) {}

  Tensor<S> use(Param<S>& p) {
    if (!tape_ || !p.trainable) return p.value.detached();
    auto it = ids_.find(&p);
    if (it != ids_.end()) {
      Tensor<S> t = p.value.detached();
      t.tape = tape_;
      t.node = it->second;
      return t;
    }
    Tensor<S> t = tape_->watch(p.value);
    ids_.emplace(&p, t.node);
    return t;
  }

  bool recording() const { return tape_ != nullptr; }
  Tape<S>* tape() const { return tape_; }

  const std::vector<S>* grad(const Param<S>& p) const {
    if (!tape_) return nullptr;
    auto it = ids_.find(&p);
    if (it == ids_.end()) return nullptr;
    return tape_->leaf_grad(it->second);
  }

 private:
  Tape<S>* tape_ = nullptr;
  std::unordered_map<const Param<S>*, int> ids_;
};

}  // namespace ssmkt
