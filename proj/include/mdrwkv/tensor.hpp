#pragma once

// Dense f32 tensors with tape-based reverse-mode differentiation.
//
// A Tensor is a shared handle to a node holding shape, row-major data and,
// when it takes part in a differentiable computation, its parents and a local
// backward rule. Ops build the graph eagerly; backward() orders the reachable
// nodes into a GradTape and replays it in reverse.

#include <cstddef>
#include <functional>
#include <initializer_list>
#include <memory>
#include <numeric>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

namespace mdrwkv {

using Shape = std::vector<std::size_t>;

inline std::size_t numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1},
                         std::multiplies<>());
}

inline std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ", ";
    os << shape[i];
  }
  os << ']';
  return os.str();
}

class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

namespace detail {

struct Node {
  Shape shape;
  std::vector<float> data;
  std::vector<float> grad;
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backward;

  // Zero-filled on first use.
  std::vector<float>& grad_buffer() {
    if (grad.size() != data.size()) grad.assign(data.size(), 0.0f);
    return grad;
  }
};

inline bool& grad_enabled_flag() {
  thread_local bool enabled = true;
  return enabled;
}

}  // namespace detail

// Disables graph recording on this thread for its lifetime.
class NoGradGuard {
 public:
  NoGradGuard() : previous_(detail::grad_enabled_flag()) {
    detail::grad_enabled_flag() = false;
  }
  ~NoGradGuard() { detail::grad_enabled_flag() = previous_; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

inline bool grad_enabled() { return detail::grad_enabled_flag(); }

class Tensor {
 public:
  Tensor() = default;

  Tensor(Shape shape, std::vector<float> data, bool requires_grad = false)
      : node_(std::make_shared<detail::Node>()) {
    if (mdrwkv::numel(shape) != data.size()) {
      throw ShapeError("tensor shape " + shape_str(shape) + " needs " +
                       std::to_string(mdrwkv::numel(shape)) + " values, got " +
                       std::to_string(data.size()));
    }
    node_->shape = std::move(shape);
    node_->data = std::move(data);
    node_->requires_grad = requires_grad;
  }

  static Tensor zeros(Shape shape) { return full(std::move(shape), 0.0f); }

  static Tensor full(Shape shape, float value) {
    const auto n = mdrwkv::numel(shape);
    return Tensor(std::move(shape), std::vector<float>(n, value));
  }

  static Tensor scalar(float value) { return Tensor({1}, {value}); }

  static Tensor parameter(Shape shape, std::vector<float> data) {
    return Tensor(std::move(shape), std::move(data), true);
  }

  bool defined() const { return static_cast<bool>(node_); }

  const Shape& shape() const { return node_->shape; }
  std::size_t rank() const { return node_->shape.size(); }
  std::size_t dim(std::size_t i) const { return node_->shape.at(i); }
  std::size_t numel() const { return node_->data.size(); }

  std::span<const float> data() const { return node_->data; }
  // Only parameters and freshly built tensors should be written through this.
  std::span<float> mutable_data() { return node_->data; }
  std::vector<float> to_vector() const { return node_->data; }

  float item() const {
    if (numel() != 1) {
      throw ShapeError("item() on tensor of shape " + shape_str(shape()));
    }
    return node_->data[0];
  }

  float at(std::size_t b, std::size_t c, std::size_t h, std::size_t w) const {
    const auto& s = node_->shape;
    return node_->data[((b * s[1] + c) * s[2] + h) * s[3] + w];
  }

  bool requires_grad() const { return node_ && node_->requires_grad; }
  void set_requires_grad(bool value) { node_->requires_grad = value; }

  bool has_grad() const { return node_->grad.size() == node_->data.size(); }
  std::span<const float> grad() const { return node_->grad; }
  std::span<float> mutable_grad() { return node_->grad_buffer(); }
  void zero_grad() { node_->grad.clear(); }

  // Same values, no history, no gradient requirement.
  Tensor detach() const { return Tensor(shape(), node_->data); }
  Tensor clone() const { return detach(); }

  detail::Node* node() const { return node_.get(); }
  const std::shared_ptr<detail::Node>& node_ptr() const { return node_; }

 private:
  std::shared_ptr<detail::Node> node_;
};

// Builds an op result. The backward rule is attached only when recording is
// on and at least one input requires a gradient. It receives the result node;
// inputs are reachable as node.parents in the order given here.
template <class Backward>
Tensor make_result(Shape shape, std::vector<float> data,
                   std::initializer_list<Tensor> inputs, Backward&& rule) {
  Tensor out(std::move(shape), std::move(data));
  if (!grad_enabled()) return out;
  bool needs = false;
  for (const auto& t : inputs) needs = needs || t.requires_grad();
  if (!needs) return out;
  auto* node = out.node();
  node->requires_grad = true;
  for (const auto& t : inputs) node->parents.push_back(t.node_ptr());
  node->backward = std::forward<Backward>(rule);
  return out;
}

inline Tensor make_result(Shape shape, std::vector<float> data) {
  return Tensor(std::move(shape), std::move(data));
}

// Accumulation target for a parent's gradient, or nullptr when the parent
// does not take gradients.
inline std::vector<float>* grad_sink(detail::Node& self, std::size_t i) {
  auto& p = self.parents[i];
  if (!p || !p->requires_grad) return nullptr;
  return &p->grad_buffer();
}

// Reverse-topological order of every recorded node reachable from a root.
class GradTape {
 public:
  explicit GradTape(const Tensor& root) {
    if (!root.requires_grad()) return;
    std::unordered_set<detail::Node*> seen;
    std::vector<std::pair<detail::Node*, std::size_t>> stack;
    stack.emplace_back(root.node(), 0);
    seen.insert(root.node());
    while (!stack.empty()) {
      auto& [node, next] = stack.back();
      if (next < node->parents.size()) {
        auto* parent = node->parents[next++].get();
        if (parent && parent->requires_grad && seen.insert(parent).second) {
          stack.emplace_back(parent, 0);
        }
      } else {
        order_.push_back(node);
        stack.pop_back();
      }
    }
  }

  std::size_t size() const { return order_.size(); }
  std::span<detail::Node* const> nodes() const { return order_; }

  void replay() const {
    for (auto it = order_.rbegin(); it != order_.rend(); ++it) {
      auto* node = *it;
      if (node->backward && node->grad.size() == node->data.size()) {
        node->backward(*node);
      }
    }
  }

 private:
  // Post-order: parents before children.
  std::vector<detail::Node*> order_;
};

// Seeds d(loss)/d(loss) = 1 and propagates into every requires_grad leaf.
inline void backward(const Tensor& loss) {
  if (!loss.defined() || loss.numel() != 1) {
    throw ShapeError("backward() needs a scalar loss, got shape " +
                     (loss.defined() ? shape_str(loss.shape()) : "<null>"));
  }
  if (!loss.requires_grad()) {
    throw std::logic_error("backward(): loss does not depend on any parameter");
  }
  GradTape tape(loss);
  loss.node()->grad_buffer()[0] += 1.0f;
  tape.replay();
}

}  // namespace mdrwkv
