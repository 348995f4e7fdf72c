#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <type_traits>
#include <unordered_map>
#include <unordered_set>
#include <utility>
#include <vector>

#include "copanet/errors.hpp"

namespace copanet {

using Shape = std::vector<std::size_t>;

inline std::size_t numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1},
                         std::multiplies<>());
}

inline std::string to_string(const Shape& shape) {
  std::ostringstream out;
  out << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    out << (i ? "x" : "") << shape[i];
  }
  out << ']';
  return out.str();
}

namespace detail {

/// Per-thread cache of large freed blocks keyed by exact byte size. Training
/// allocates the same activation sizes every step; reusing them avoids
/// returning pages to the OS and faulting them back in.
class BlockCache {
 public:
  static constexpr std::size_t kMinBytes = std::size_t{1} << 16;
  static constexpr std::size_t kMaxCachedBytes = std::size_t{1} << 31;

  // Null once the calling thread's cache has been destroyed.
  static BlockCache* local() {
    thread_local BlockCache cache;
    return alive() ? &cache : nullptr;
  }

  void* take(std::size_t bytes) {
    auto it = free_.find(bytes);
    if (it == free_.end() || it->second.empty()) return ::operator new(bytes);
    void* p = it->second.back();
    it->second.pop_back();
    cached_ -= bytes;
    return p;
  }

  void give(void* p, std::size_t bytes) noexcept {
    if (cached_ + bytes > kMaxCachedBytes) {
      ::operator delete(p);
      return;
    }
    try {
      free_[bytes].push_back(p);
      cached_ += bytes;
    } catch (...) {
      ::operator delete(p);
    }
  }

  ~BlockCache() {
    alive() = false;
    for (auto& [bytes, blocks] : free_) {
      for (void* p : blocks) ::operator delete(p);
    }
  }

 private:
  BlockCache() { alive() = true; }
  static bool& alive() {
    thread_local bool flag = false;
    return flag;
  }

  std::unordered_map<std::size_t, std::vector<void*>> free_;
  std::size_t cached_ = 0;
};

}  // namespace detail

/// Allocator whose value-construction leaves storage uninitialized, so op
/// outputs that are fully overwritten skip a zero-fill pass. Large blocks are
/// recycled through a per-thread cache.
template <typename T>
struct DefaultInitAllocator : std::allocator<T> {
  using value_type = T;
  template <typename U>
  struct rebind {
    using other = DefaultInitAllocator<U>;
  };
  DefaultInitAllocator() = default;
  template <typename U>
  DefaultInitAllocator(const DefaultInitAllocator<U>&) noexcept {}

  T* allocate(std::size_t n) {
    const std::size_t bytes = n * sizeof(T);
    if (bytes < detail::BlockCache::kMinBytes) return std::allocator<T>::allocate(n);
    auto* cache = detail::BlockCache::local();
    return static_cast<T*>(cache ? cache->take(bytes) : ::operator new(bytes));
  }
  void deallocate(T* p, std::size_t n) noexcept {
    const std::size_t bytes = n * sizeof(T);
    if (bytes < detail::BlockCache::kMinBytes) {
      std::allocator<T>::deallocate(p, n);
      return;
    }
    if (auto* cache = detail::BlockCache::local()) {
      cache->give(p, bytes);
    } else {
      ::operator delete(p);
    }
  }

  template <typename U>
  void construct(U* p) noexcept(std::is_nothrow_default_constructible_v<U>) {
    ::new (static_cast<void*>(p)) U;
  }
  template <typename U, typename... Args>
  void construct(U* p, Args&&... args) {
    ::new (static_cast<void*>(p)) U(std::forward<Args>(args)...);
  }
};

template <typename T>
using Storage = std::vector<T, DefaultInitAllocator<T>>;

namespace detail {
inline bool& grad_mode_flag() {
  thread_local bool enabled = true;
  return enabled;
}
}  // namespace detail

inline bool grad_enabled() { return detail::grad_mode_flag(); }

/// Disables graph recording on the current thread for the guard's lifetime.
class NoGradGuard {
 public:
  NoGradGuard() : previous_(detail::grad_mode_flag()) {
    detail::grad_mode_flag() = false;
  }
  ~NoGradGuard() { detail::grad_mode_flag() = previous_; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

/// One vertex of the autodiff graph. Leaves are user-created tensors
/// (parameters, inputs); interior nodes are op outputs that keep their
/// inputs alive until backward releases them.
template <typename T>
struct Node {
  std::string op = "leaf";
  Shape shape;
  Storage<T> value;
  Storage<T> grad;
  bool requires_grad = false;
  bool is_leaf = true;
  bool consumed = false;
  std::vector<std::shared_ptr<Node>> inputs;
  // Accumulates this node's grad into the grads of its inputs.
  std::function<void(const Node&)> backward;

  std::span<T> ensure_grad() {
    if (grad.size() != value.size()) grad.assign(value.size(), T(0));
    return grad;
  }

  // grad[i] += f(i) for every element. A missing buffer is written directly
  // rather than zero-filled first.
  template <typename F>
  void accumulate_grad(F&& f) {
    const std::size_t count = value.size();
    if (grad.size() != count) {
      grad.resize(count);
      T* g = grad.data();
      for (std::size_t i = 0; i < count; ++i) g[i] = f(i);
    } else {
      T* g = grad.data();
      for (std::size_t i = 0; i < count; ++i) g[i] += f(i);
    }
  }
};

/// Dense row-major tensor handle. Copies share the underlying node, like a
/// reference-counted array; use clone() for an independent deep copy.
template <typename T>
class Tensor {
 public:
  using value_type = T;

  Tensor() = default;

  explicit Tensor(Shape shape, T fill = T(0))
      : node_(std::make_shared<Node<T>>()) {
    node_->value.assign(copanet::numel(shape), fill);
    node_->shape = std::move(shape);
  }

  Tensor(Shape shape, std::vector<T> values)
      : node_(std::make_shared<Node<T>>()) {
    if (values.size() != copanet::numel(shape)) {
      throw ConfigError("tensor shape " + to_string(shape) + " needs " +
                        std::to_string(copanet::numel(shape)) +
                        " values, got " + std::to_string(values.size()));
    }
    node_->shape = std::move(shape);
    node_->value.assign(values.begin(), values.end());
  }

  struct Uninitialized {};
  Tensor(Shape shape, Uninitialized) : node_(std::make_shared<Node<T>>()) {
    node_->value.resize(copanet::numel(shape));
    node_->shape = std::move(shape);
  }

  explicit Tensor(std::shared_ptr<Node<T>> node) : node_(std::move(node)) {}

  static Tensor parameter(Shape shape) {
    Tensor t(std::move(shape));
    t.node_->requires_grad = true;
    return t;
  }

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const { return node_->shape; }
  std::size_t rank() const { return node_->shape.size(); }
  std::size_t dim(std::size_t i) const { return node_->shape.at(i); }
  std::size_t numel() const { return node_->value.size(); }
  const std::string& op() const { return node_->op; }

  std::span<T> data() { return node_->value; }
  std::span<const T> data() const { return node_->value; }
  std::vector<T> values() const {
    return std::vector<T>(node_->value.begin(), node_->value.end());
  }

  bool requires_grad() const { return node_->requires_grad; }
  Tensor& set_requires_grad(bool on) {
    node_->requires_grad = on;
    return *this;
  }
  bool has_grad() const { return node_->grad.size() == node_->value.size(); }
  std::span<const T> grad() const { return node_->grad; }
  std::span<T> mutable_grad() { return node_->ensure_grad(); }
  void zero_grad() {
    if (has_grad()) std::fill(node_->grad.begin(), node_->grad.end(), T(0));
  }

  T item() const {
    if (numel() != 1) {
      throw UsageError("item() on tensor of shape " + to_string(shape()));
    }
    return node_->value[0];
  }

  T& operator[](std::size_t i) { return node_->value[i]; }
  const T& operator[](std::size_t i) const { return node_->value[i]; }

  /// Value-only deep copy, detached from any graph.
  Tensor clone() const {
    Tensor out(node_->shape, Uninitialized{});
    out.node_->value = node_->value;
    out.node_->requires_grad = node_->requires_grad;
    return out;
  }

  const std::shared_ptr<Node<T>>& node() const { return node_; }

 private:
  std::shared_ptr<Node<T>> node_;
};

/// Creates an op output. When recording is on and any input needs a
/// gradient, the output joins the graph and keeps its inputs alive.
template <typename T>
Tensor<T> make_op_output(std::string op, Shape shape,
                         std::initializer_list<Tensor<T>> inputs) {
  Tensor<T> out(std::move(shape), typename Tensor<T>::Uninitialized{});
  auto& node = *out.node();
  node.op = std::move(op);
  node.is_leaf = false;
  if (!grad_enabled()) return out;
  for (const auto& in : inputs) {
    if (in.requires_grad()) node.requires_grad = true;
  }
  if (node.requires_grad) {
    for (const auto& in : inputs) node.inputs.push_back(in.node());
  }
  return out;
}

template <typename T>
Tensor<T> make_op_output(std::string op, Shape shape,
                         const std::vector<Tensor<T>>& inputs) {
  Tensor<T> out(std::move(shape), typename Tensor<T>::Uninitialized{});
  auto& node = *out.node();
  node.op = std::move(op);
  node.is_leaf = false;
  if (!grad_enabled()) return out;
  for (const auto& in : inputs) {
    if (in.requires_grad()) node.requires_grad = true;
  }
  if (node.requires_grad) {
    for (const auto& in : inputs) node.inputs.push_back(in.node());
  }
  return out;
}

namespace detail {

template <typename T>
std::vector<Node<T>*> topological_order(Node<T>* root) {
  std::vector<Node<T>*> order;
  std::unordered_set<Node<T>*> visited;
  std::vector<std::pair<Node<T>*, std::size_t>> stack{{root, 0}};
  visited.insert(root);
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->inputs.size()) {
      Node<T>* child = node->inputs[next++].get();
      if (child->requires_grad && visited.insert(child).second) {
        stack.emplace_back(child, 0);
      }
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }
  return order;  // inputs before consumers
}

}  // namespace detail

/// Reverse-mode sweep from a scalar loss. Gradients accumulate into every
/// reachable tensor that requires grad; the graph is released afterwards,
/// so a second call on the same loss is an error.
template <typename T>
void backward(const Tensor<T>& loss) {
  if (!loss.defined()) throw UsageError("backward on an undefined tensor");
  Node<T>* root = loss.node().get();
  if (root->value.size() != 1) {
    throw UsageError("backward needs a scalar loss, got shape " +
                     to_string(root->shape));
  }
  if (root->consumed) {
    throw UsageError(
        "backward already ran on this graph; run a new forward pass first");
  }
  if (!root->requires_grad) {
    throw UsageError("loss does not depend on any tensor requiring grad");
  }
  auto order = detail::topological_order(root);
  root->ensure_grad()[0] += T(1);
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node<T>* node = *it;
    if (node->backward && node->grad.size() == node->value.size()) {
      node->backward(*node);
    }
  }
  for (Node<T>* node : order) {
    if (node->is_leaf) continue;
    node->backward = nullptr;
    node->inputs.clear();
    if (node != root) Storage<T>().swap(node->grad);
  }
  root->consumed = true;
}

/// Counts op kinds reachable from `output` through a recorded graph.
template <typename T>
std::size_t count_ops(const Tensor<T>& output, const std::string& op) {
  if (!output.requires_grad()) return output.op() == op ? 1 : 0;
  std::size_t count = 0;
  for (Node<T>* node : detail::topological_order(output.node().get())) {
    if (node->op == op) ++count;
  }
  return count;
}

template <typename T>
bool all_finite(const Tensor<T>& t) {
  for (T v : t.data()) {
    if (!(v - v == T(0))) return false;
  }
  return true;
}

}  // namespace copanet
