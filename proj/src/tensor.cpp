#include "iimt/tensor.hpp"

#include <sstream>

#include "iimt/errors.hpp"

namespace iimt::ad {

namespace {
thread_local Tape* g_active_tape = nullptr;
}

std::size_t shape_numel(const Shape& shape) {
  std::size_t n = 1;
  for (int d : shape) {
    if (d <= 0) throw ShapeError("non-positive dimension in shape " + shape_str(shape));
    n *= static_cast<std::size_t>(d);
  }
  return n;
}

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
  os << ']';
  return os.str();
}

Real* Node::grad_data() {
  if (grad.empty()) grad.assign(value.size(), 0.0);
  return grad.data();
}

Tensor Tensor::zeros(Shape shape, bool requires_grad) { return full(std::move(shape), 0.0, requires_grad); }

Tensor Tensor::full(Shape shape, Real value, bool requires_grad) {
  auto node = std::make_shared<Node>();
  node->value.assign(shape_numel(shape), value);
  node->shape = std::move(shape);
  node->requires_grad = requires_grad;
  return Tensor(std::move(node));
}

Tensor Tensor::from(Shape shape, std::vector<Real> values, bool requires_grad) {
  if (shape_numel(shape) != values.size())
    throw ShapeError("shape " + shape_str(shape) + " does not match " + std::to_string(values.size()) + " values");
  auto node = std::make_shared<Node>();
  node->shape = std::move(shape);
  node->value = std::move(values);
  node->requires_grad = requires_grad;
  return Tensor(std::move(node));
}

Tensor Tensor::scalar(Real value) { return from({1}, {value}); }

int Tensor::dim(int i) const {
  const int r = rank();
  if (i < 0) i += r;
  if (i < 0 || i >= r) throw ShapeError("dimension index out of range for shape " + shape_string());
  return node_->shape[i];
}

Real Tensor::item() const {
  if (numel() != 1) throw ContractError("item() on non-scalar tensor " + shape_string());
  return node_->value[0];
}

Tensor Tensor::detach() const { return from(shape(), node_->value, false); }

void Tape::backward(const Tensor& loss) {
  if (consumed_) throw ContractError("backward called twice on the same tape without reset");
  if (!loss.defined() || loss.numel() != 1)
    throw ContractError("backward requires a scalar loss, got " + (loss.defined() ? loss.shape_string() : std::string("undefined")));
  if (!loss.requires_grad()) throw ContractError("backward on a loss that is not on an active tape");
  consumed_ = true;
  loss.ptr()->grad_data()[0] += 1.0;
  for (auto it = entries_.rbegin(); it != entries_.rend(); ++it) (*it)();
}

void Tape::reset() {
  entries_.clear();
  consumed_ = false;
}

TapeScope::TapeScope(Tape& tape) : previous_(g_active_tape) { g_active_tape = &tape; }
TapeScope::~TapeScope() { g_active_tape = previous_; }

Tape* active_tape() { return g_active_tape; }

}  // namespace iimt::ad
