#pragma once

// Dense row-major tensors with a reverse-mode tape.
//
// Ops record a backward closure on the thread's active Tape whenever one of
// their inputs requires a gradient. Without an active tape nothing is
// recorded, which is how inference runs.

#include <cstddef>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

namespace iimt::ad {

using Real = double;
using Shape = std::vector<int>;

std::size_t shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);

struct Node {
  Shape shape;
  std::vector<Real> value;
  std::vector<Real> grad;  // empty until a gradient reaches this node
  bool requires_grad = false;
  bool leaf = true;

  // Returns the gradient buffer, allocating zeros on first use.
  Real* grad_data();
};

class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, Real value, bool requires_grad = false);
  static Tensor from(Shape shape, std::vector<Real> values, bool requires_grad = false);
  static Tensor scalar(Real value);

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const { return node_->shape; }
  int rank() const { return static_cast<int>(node_->shape.size()); }
  // Negative indices count from the back.
  int dim(int i) const;
  std::size_t numel() const { return node_->value.size(); }

  std::span<const Real> data() const { return node_->value; }
  // Mutable access for leaves and freshly created outputs only.
  std::span<Real> data_mut() { return node_->value; }

  bool requires_grad() const { return node_ && node_->requires_grad; }
  void set_requires_grad(bool on) { node_->requires_grad = on; }
  bool is_leaf() const { return node_->leaf; }

  bool has_grad() const { return !node_->grad.empty(); }
  std::span<const Real> grad() const { return node_->grad; }
  std::span<Real> grad_mut() { return {node_->grad_data(), node_->value.size()}; }
  void zero_grad() { node_->grad.clear(); }

  Real item() const;
  // Copy that shares no storage and carries no gradient (stop-gradient).
  Tensor detach() const;

  const std::shared_ptr<Node>& ptr() const { return node_; }
  std::string shape_string() const { return shape_str(shape()); }

 private:
  explicit Tensor(std::shared_ptr<Node> node) : node_(std::move(node)) {}
  std::shared_ptr<Node> node_;
};

class Tape {
 public:
  using Backward = std::function<void()>;

  void record(Backward fn) { entries_.push_back(std::move(fn)); }
  // Seeds d(loss)=1 and runs every recorded closure once in reverse order.
  // The loss must be a scalar produced on this tape; a consumed tape rejects
  // further calls until reset().
  void backward(const Tensor& loss);
  void reset();
  std::size_t size() const { return entries_.size(); }
  bool consumed() const { return consumed_; }

 private:
  std::vector<Backward> entries_;
  bool consumed_ = false;
};

// Makes a tape the active one for the current thread for the scope lifetime.
class TapeScope {
 public:
  explicit TapeScope(Tape& tape);
  ~TapeScope();
  TapeScope(const TapeScope&) = delete;
  TapeScope& operator=(const TapeScope&) = delete;

 private:
  Tape* previous_;
};

Tape* active_tape();

}  // namespace iimt::ad
