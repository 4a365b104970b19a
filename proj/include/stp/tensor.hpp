#pragma once

#include <Eigen/Dense>
#include <algorithm>
#include <atomic>
#include <cstdint>
#include <functional>
#include <memory>
#include <sstream>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <unordered_set>
#include <vector>

#include "stp/rng.hpp"

namespace stp {

struct ShapeError : std::runtime_error {
  explicit ShapeError(const std::string& msg) : std::runtime_error(msg) {}
};
struct ValueError : std::runtime_error {
  explicit ValueError(const std::string& msg) : std::runtime_error(msg) {}
};
struct IoError : std::runtime_error {
  explicit IoError(const std::string& msg) : std::runtime_error(msg) {}
};
struct ConfigError : std::runtime_error {
  explicit ConfigError(const std::string& msg) : std::runtime_error(msg) {}
};

using Shape = std::vector<int>;

inline int64_t shape_numel(const Shape& s) {
  int64_t n = 1;
  for (int d : s) n *= d;
  return n;
}

inline std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << "(";
  for (size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
  os << ")";
  return os.str();
}

template <typename S>
using MatX = Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename S>
using MatMap = Eigen::Map<MatX<S>>;
template <typename S>
using ConstMatMap = Eigen::Map<const MatX<S>>;
template <typename S>
using ArrMap = Eigen::Map<Eigen::Array<S, Eigen::Dynamic, 1>>;
template <typename S>
using ConstArrMap = Eigen::Map<const Eigen::Array<S, Eigen::Dynamic, 1>>;

namespace detail {
inline std::atomic<uint64_t>& node_counter() {
  static std::atomic<uint64_t> counter{0};
  return counter;
}
inline thread_local bool grad_recording = true;
}  // namespace detail

// Scoped switch that stops graph recording (inference paths).
struct NoGradGuard {
  NoGradGuard() : saved_(detail::grad_recording) { detail::grad_recording = false; }
  ~NoGradGuard() { detail::grad_recording = saved_; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool saved_;
};

inline bool grad_enabled() { return detail::grad_recording; }

template <typename S>
struct TensorNode;

// Gradient buffers keyed by node, owned by one backward invocation. Keeping
// accumulation out of the shared nodes lets several backward passes over
// graphs that share parameter leaves run concurrently; merge order is then
// fixed by the caller, which is what makes training bit-reproducible.
template <typename S>
class GradStore {
 public:
  std::vector<S>& buffer(const TensorNode<S>* node) {
    auto it = grads_.find(node);
    if (it == grads_.end()) {
      it = grads_.emplace(node, std::vector<S>(node->data.size(), S(0))).first;
    }
    return it->second;
  }
  const std::vector<S>* find(const TensorNode<S>* node) const {
    auto it = grads_.find(node);
    return it == grads_.end() ? nullptr : &it->second;
  }

 private:
  std::unordered_map<const TensorNode<S>*, std::vector<S>> grads_;
};

template <typename S>
struct TensorNode {
  Shape shape;
  std::vector<S> data;
  std::vector<S> grad;  // leaf gradient, filled by backward()
  bool requires_grad = false;
  uint64_t id;
  const char* op = "leaf";
  std::vector<std::shared_ptr<TensorNode<S>>> parents;
  // Receives this node's gradient and accumulates into the parents' buffers.
  std::function<void(const std::vector<S>&, GradStore<S>&)> backward_fn;

  TensorNode() : id(detail::node_counter().fetch_add(1, std::memory_order_relaxed)) {}
  bool is_leaf() const { return parents.empty() && !backward_fn; }
};

// Value-semantics handle to a graph node. Copies share the node.
template <typename S = float>
class Tensor {
 public:
  using Scalar = S;

  Tensor() = default;

  static Tensor zeros(Shape shape, bool requires_grad = false) {
    return filled(std::move(shape), S(0), requires_grad);
  }

  static Tensor filled(Shape shape, S value, bool requires_grad = false) {
    Tensor t;
    t.node_ = std::make_shared<TensorNode<S>>();
    t.node_->shape = std::move(shape);
    t.node_->data.assign(static_cast<size_t>(shape_numel(t.node_->shape)), value);
    t.node_->requires_grad = requires_grad;
    return t;
  }

  static Tensor scalar(S value) {
    Tensor t = filled({}, value);
    return t;
  }

  static Tensor from_data(Shape shape, std::vector<S> values, bool requires_grad = false) {
    if (static_cast<int64_t>(values.size()) != shape_numel(shape)) {
      throw ShapeError("from_data: buffer length " + std::to_string(values.size()) +
                       " does not match shape " + shape_str(shape));
    }
    Tensor t;
    t.node_ = std::make_shared<TensorNode<S>>();
    t.node_->shape = std::move(shape);
    t.node_->data = std::move(values);
    t.node_->requires_grad = requires_grad;
    return t;
  }

  static Tensor randn(Shape shape, Rng& rng, double stddev, bool requires_grad = false) {
    Tensor t = zeros(std::move(shape), requires_grad);
    for (auto& v : t.node_->data) v = static_cast<S>(rng.normal() * stddev);
    return t;
  }

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const { return node_->shape; }
  int rank() const { return static_cast<int>(node_->shape.size()); }
  int dim(int i) const { return node_->shape[static_cast<size_t>(i)]; }
  int64_t size() const { return static_cast<int64_t>(node_->data.size()); }

  const std::vector<S>& values() const { return node_->data; }
  const S* data() const { return node_->data.data(); }
  // Leaf setup / optimizer use only; tensors are otherwise immutable once
  // they participate in a graph.
  S* mutable_data() { return node_->data.data(); }

  S value() const {
    if (size() != 1) throw ShapeError("value(): tensor is not scalar, shape " + shape_str(shape()));
    return node_->data[0];
  }
  S at(int64_t i) const { return node_->data[static_cast<size_t>(i)]; }

  bool requires_grad() const { return node_->requires_grad; }
  void set_requires_grad(bool rg) { node_->requires_grad = rg; }

  bool has_grad() const { return !node_->grad.empty(); }
  const std::vector<S>& grad() const { return node_->grad; }
  void zero_grad() const { node_->grad.clear(); }

  std::shared_ptr<TensorNode<S>> node() const { return node_; }
  TensorNode<S>* node_ptr() const { return node_.get(); }

  ConstMatMap<S> mat(int rows, int cols) const { return ConstMatMap<S>(data(), rows, cols); }
  // 2D view.
  ConstMatMap<S> mat() const {
    if (rank() != 2) throw ShapeError("mat(): tensor rank != 2, shape " + shape_str(shape()));
    return ConstMatMap<S>(data(), dim(0), dim(1));
  }

 private:
  std::shared_ptr<TensorNode<S>> node_;
};

template <typename S>
void accumulate_grad_into_node(const std::shared_ptr<TensorNode<S>>& node, const std::vector<S>& g) {
  if (node->grad.empty()) node->grad.assign(node->data.size(), S(0));
  ArrMap<S>(node->grad.data(), static_cast<Eigen::Index>(g.size())) +=
      ConstArrMap<S>(g.data(), static_cast<Eigen::Index>(g.size()));
}

// Reverse-mode sweep from a scalar loss. Nodes are visited exactly once in
// decreasing creation order (a reverse topological order, since parents are
// always created before children); within one node the parent contributions
// are pushed left to right. Gradients land in `store`, including for leaves.
template <typename S>
void backward_into(const Tensor<S>& loss, GradStore<S>& store) {
  if (loss.size() != 1) {
    throw ValueError("backward: loss must be scalar, got shape " + shape_str(loss.shape()));
  }
  if (!loss.requires_grad()) {
    throw ValueError("backward: loss does not require grad (no graph recorded)");
  }

  std::vector<TensorNode<S>*> order;
  std::unordered_set<TensorNode<S>*> seen;
  std::vector<TensorNode<S>*> stack{loss.node_ptr()};
  seen.insert(loss.node_ptr());
  while (!stack.empty()) {
    TensorNode<S>* n = stack.back();
    stack.pop_back();
    order.push_back(n);
    for (const auto& p : n->parents) {
      if (p->requires_grad && seen.insert(p.get()).second) stack.push_back(p.get());
    }
  }
  std::sort(order.begin(), order.end(),
            [](const TensorNode<S>* a, const TensorNode<S>* b) { return a->id > b->id; });

  store.buffer(loss.node_ptr())[0] += S(1);
  for (TensorNode<S>* n : order) {
    if (!n->backward_fn) continue;
    const std::vector<S>* g = store.find(n);
    if (!g) continue;
    n->backward_fn(*g, store);
  }
}

// Spec-facing entry point: accumulates into the grad buffer of every
// requires-grad leaf reachable from `loss`.
template <typename S>
void backward(const Tensor<S>& loss) {
  GradStore<S> store;
  backward_into(loss, store);

  std::unordered_set<TensorNode<S>*> seen;
  std::vector<std::shared_ptr<TensorNode<S>>> leaves;
  std::vector<std::shared_ptr<TensorNode<S>>> stack{loss.node()};
  seen.insert(loss.node_ptr());
  while (!stack.empty()) {
    auto n = stack.back();
    stack.pop_back();
    if (n->is_leaf() && n->requires_grad) leaves.push_back(n);
    for (const auto& p : n->parents) {
      if (p->requires_grad && seen.insert(p.get()).second) stack.push_back(p);
    }
  }
  // Fixed order for the node-grad accumulation as well.
  std::sort(leaves.begin(), leaves.end(),
            [](const auto& a, const auto& b) { return a->id < b->id; });
  for (const auto& leaf : leaves) {
    if (const std::vector<S>* g = store.find(leaf.get())) accumulate_grad_into_node(leaf, *g);
  }
}

}  // namespace stp
