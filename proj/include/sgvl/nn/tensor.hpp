#pragma once

// Dense row-major tensors with a recorded graph for reverse-mode gradients.
//
// Every op returns a fresh node that keeps its parents alive and a closure that
// pushes its output gradient back into them. `backward(loss)` walks the graph
// in reverse topological order. Leaves (parameters) accumulate gradients
// across calls; interior nodes are reset at the start of each call.

#include <cmath>
#include <cstddef>
#include <functional>
#include <memory>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <unordered_set>
#include <vector>

#include "sgvl/error.hpp"

#if defined(__GLIBC__)
#include <malloc.h>
#endif

namespace sgvl::nn {

using Shape = std::vector<std::size_t>;

inline std::size_t numel_of(const Shape& s) {
  return std::accumulate(s.begin(), s.end(), std::size_t{1}, std::multiplies<>());
}

inline std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
  os << ']';
  return os.str();
}

[[noreturn]] inline void shape_error(const char* op, const Shape& a, const Shape& b) {
  throw ShapeError(std::string(op) + ": incompatible shapes " + shape_str(a) + " and " +
                   shape_str(b));
}

template <class T>
struct Node {
  Shape shape;
  std::vector<T> value;
  std::vector<T> grad;
  bool requires_grad = false;
  bool leaf = true;
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backward_fn;

  void ensure_grad() {
    if (grad.size() != value.size()) grad.assign(value.size(), T{});
  }
};

template <class T>
class Tensor {
 public:
  using value_type = T;

  Tensor() = default;
  explicit Tensor(std::shared_ptr<Node<T>> n) : n_(std::move(n)) {}

  static Tensor zeros(Shape shape, bool requires_grad = false) {
    auto n = std::make_shared<Node<T>>();
    n->value.assign(numel_of(shape), T{});
    n->shape = std::move(shape);
    n->requires_grad = requires_grad;
    return Tensor(std::move(n));
  }

  static Tensor from(Shape shape, std::vector<T> values, bool requires_grad = false) {
    if (values.size() != numel_of(shape))
      throw ShapeError("tensor of shape " + shape_str(shape) + " given " +
                       std::to_string(values.size()) + " values");
    auto n = std::make_shared<Node<T>>();
    n->shape = std::move(shape);
    n->value = std::move(values);
    n->requires_grad = requires_grad;
    return Tensor(std::move(n));
  }

  static Tensor scalar(T v, bool requires_grad = false) { return from({}, {v}, requires_grad); }

  bool defined() const { return static_cast<bool>(n_); }
  const Shape& shape() const { return n_->shape; }
  std::size_t rank() const { return n_->shape.size(); }
  std::size_t dim(std::size_t i) const { return n_->shape.at(i); }
  std::size_t numel() const { return n_->value.size(); }

  std::span<T> data() { return n_->value; }
  std::span<const T> data() const { return n_->value; }
  std::vector<T>& values() { return n_->value; }
  const std::vector<T>& values() const { return n_->value; }

  bool has_grad() const { return n_->grad.size() == n_->value.size() && !n_->value.empty(); }
  std::span<T> grad() { return n_->grad; }
  std::span<const T> grad() const { return n_->grad; }

  bool requires_grad() const { return n_->requires_grad; }
  void set_requires_grad(bool r) { n_->requires_grad = r; }

  // Allocates (if needed) and clears the gradient buffer.
  void zero_grad() {
    n_->grad.assign(n_->value.size(), T{});
  }

  T item() const {
    if (numel() != 1) throw ShapeError("item() on tensor of shape " + shape_str(shape()));
    return n_->value[0];
  }

  T operator[](std::size_t i) const { return n_->value[i]; }

  Node<T>* node() const { return n_.get(); }
  const std::shared_ptr<Node<T>>& ptr() const { return n_; }

 private:
  std::shared_ptr<Node<T>> n_;
};

// Builds an op result. When no parent needs gradients the closure is dropped
// and the result is a constant.
template <class T>
Tensor<T> make_result(Shape shape, std::vector<T> value, std::vector<Tensor<T>> parents,
                      std::function<void(Node<T>&)> backward_fn) {
  auto n = std::make_shared<Node<T>>();
  n->shape = std::move(shape);
  n->value = std::move(value);
  n->leaf = false;
  for (auto& p : parents)
    if (p.requires_grad()) n->requires_grad = true;
  if (n->requires_grad) {
    for (auto& p : parents) n->parents.push_back(p.ptr());
    n->backward_fn = std::move(backward_fn);
  }
  return Tensor<T>(std::move(n));
}

// Every step allocates and frees the same large activation and gradient
// buffers. glibc serves those with mmap and returns them on free, so each
// step pays fresh page faults; keeping them on the heap is ~30% faster.
inline void tune_allocator() {
#if defined(__GLIBC__)
  static const bool once = [] {
    mallopt(M_MMAP_THRESHOLD, 1 << 30);
    mallopt(M_TRIM_THRESHOLD, 1 << 30);
    return true;
  }();
  (void)once;
#endif
}

template <class T>
void backward(const Tensor<T>& loss) {
  if (loss.numel() != 1)
    throw ShapeError("backward() needs a scalar loss, got shape " + shape_str(loss.shape()));
  if (!loss.requires_grad()) return;

  std::vector<Node<T>*> order;
  std::unordered_set<Node<T>*> seen;
  std::vector<std::pair<Node<T>*, std::size_t>> stack{{loss.node(), 0}};
  seen.insert(loss.node());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->parents.size()) {
      Node<T>* p = node->parents[next++].get();
      if (p->requires_grad && seen.insert(p).second) stack.push_back({p, 0});
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }
  for (auto* n : order) {
    if (n->leaf) n->ensure_grad();
    else n->grad.assign(n->value.size(), T{});
  }
  loss.node()->grad[0] += T{1};
  for (auto it = order.rbegin(); it != order.rend(); ++it)
    if ((*it)->backward_fn) (*it)->backward_fn(**it);
}

}  // namespace sgvl::nn
