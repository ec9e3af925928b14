#pragma once

// Reverse-mode autodiff over dense N x C x H x W tensors. A Graph records every tracked node in
// creation order; backward() replays their closures in reverse.

#include <cmath>
#include <cstddef>
#include <functional>
#include <memory>
#include <string>
#include <vector>

#include "rdwi/core/errors.hpp"

namespace rdwi::nn {

struct Shape {
  std::size_t n = 1, c = 1, h = 1, w = 1;

  std::size_t size() const noexcept { return n * c * h * w; }
  std::size_t plane() const noexcept { return h * w; }
  friend bool operator==(const Shape&, const Shape&) = default;
  std::string str() const {
    return "[" + std::to_string(n) + "," + std::to_string(c) + "," + std::to_string(h) + "," + std::to_string(w) + "]";
  }
};

template <class T>
struct Node {
  Shape shape;
  std::vector<T> value;
  std::vector<T> grad;  // empty until first accumulation
  bool requires_grad = false;
  std::function<void()> backward;

  Node(Shape s, bool tracked) : shape(s), value(s.size(), T(0)), requires_grad(tracked) {}

  std::vector<T>& ensure_grad() {
    if (grad.size() != value.size()) grad.assign(value.size(), T(0));
    return grad;
  }
  void zero_grad() { grad.clear(); }
  T item() const { return value.at(0); }
};

template <class T>
using Var = std::shared_ptr<Node<T>>;

template <class T>
Var<T> constant(Shape s, std::vector<T> values) {
  if (values.size() != s.size()) throw DataError("tensor value count does not match shape " + s.str());
  auto v = std::make_shared<Node<T>>(s, false);
  v->value = std::move(values);
  return v;
}

/// Records tracked op outputs. With grad disabled nothing is recorded and ops skip closures.
template <class T>
class Graph {
 public:
  explicit Graph(bool grad_enabled = true) : grad_enabled_(grad_enabled) {}

  bool grad_enabled() const noexcept { return grad_enabled_; }

  /// Output node of an op over `inputs`: tracked iff grad is enabled and any input is tracked.
  template <class... In>
  Var<T> output(Shape s, const In&... inputs) {
    const bool tracked = grad_enabled_ && (false || ... || inputs->requires_grad);
    auto v = std::make_shared<Node<T>>(s, tracked);
    if (tracked) tape_.push_back(v);
    return v;
  }

  Var<T> output_of(Shape s, const std::vector<Var<T>>& inputs) {
    bool tracked = false;
    for (const auto& in : inputs) tracked = tracked || in->requires_grad;
    tracked = tracked && grad_enabled_;
    auto v = std::make_shared<Node<T>>(s, tracked);
    if (tracked) tape_.push_back(v);
    return v;
  }

  /// Seeds d(root)/d(root) = 1 for a scalar root and runs the recorded closures in reverse.
  void backward(const Var<T>& root) {
    if (root->shape.size() != 1) throw DataError("backward needs a scalar root");
    if (!root->requires_grad) return;
    root->ensure_grad()[0] += T(1);
    for (auto it = tape_.rbegin(); it != tape_.rend(); ++it) {
      Node<T>& node = **it;
      if (node.backward && !node.grad.empty()) node.backward();
    }
  }

  std::size_t size() const noexcept { return tape_.size(); }

 private:
  bool grad_enabled_;
  std::vector<Var<T>> tape_;
};

/// A named trainable leaf with Adam moments.
template <class T>
struct Parameter {
  std::string name;
  Var<T> var;
  std::vector<T> moment1, moment2;

  Parameter(std::string n, Shape s) : name(std::move(n)), var(std::make_shared<Node<T>>(s, true)) {
    moment1.assign(s.size(), T(0));
    moment2.assign(s.size(), T(0));
  }
  const Shape& shape() const noexcept { return var->shape; }
  std::vector<T>& values() noexcept { return var->value; }
  const std::vector<T>& values() const noexcept { return var->value; }
};

/// Throws NumericalError naming `where` if any value is NaN or infinite.
template <class T>
void check_finite(const Var<T>& v, const std::string& where) {
  for (T x : v->value)
    if (!std::isfinite(x)) throw NumericalError("non-finite activation at " + where);
}

}  // namespace rdwi::nn
