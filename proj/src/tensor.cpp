#include "mactn/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>
#include <unordered_set>

namespace mactn {

namespace detail {

struct Node {
  std::vector<std::shared_ptr<TensorImpl>> inputs;
  std::function<void(std::span<const double>)> backward;
};

struct TensorImpl {
  Shape shape;
  std::vector<double> data;
  std::vector<double> grad;
  bool requires_grad = false;
  std::shared_ptr<Node> node;
};

} // namespace detail

namespace {

thread_local bool t_grad_enabled = true;
thread_local std::uint64_t t_macs = 0;

void check_finite(std::span<const double> values, const char *where) {
  for (std::size_t i = 0; i < values.size(); ++i) {
    if (!std::isfinite(values[i])) {
      std::ostringstream os;
      os << where << ": non-finite value " << values[i] << " at flat index " << i;
      throw NonFiniteError(os.str());
    }
  }
}

} // namespace

std::size_t shape_numel(const Shape &shape) {
  std::size_t n = 1;
  for (auto d : shape) n *= d;
  return n;
}

std::string shape_str(const Shape &shape) {
  std::ostringstream os;
  os << '(';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ", ";
    os << shape[i];
  }
  os << ')';
  return os.str();
}

bool grad_enabled() { return t_grad_enabled; }

NoGradGuard::NoGradGuard() : previous_(t_grad_enabled) { t_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { t_grad_enabled = previous_; }

std::uint64_t mac_counter() { return t_macs; }
void reset_mac_counter() { t_macs = 0; }
void add_macs(std::uint64_t n) { t_macs += n; }

Tensor::Tensor(Shape shape, std::vector<double> values, bool requires_grad) {
  if (shape_numel(shape) != values.size()) {
    throw DimensionError("Tensor: shape " + shape_str(shape) + " holds " +
                         std::to_string(shape_numel(shape)) + " values, got " +
                         std::to_string(values.size()));
  }
  check_finite(values, "Tensor");
  impl_ = std::make_shared<detail::TensorImpl>();
  impl_->shape = std::move(shape);
  impl_->data = std::move(values);
  impl_->requires_grad = requires_grad;
}

Tensor Tensor::zeros(Shape shape, bool requires_grad) { return full(std::move(shape), 0.0, requires_grad); }

Tensor Tensor::full(Shape shape, double value, bool requires_grad) {
  const auto n = shape_numel(shape);
  return Tensor(std::move(shape), std::vector<double>(n, value), requires_grad);
}

Tensor Tensor::scalar(double value, bool requires_grad) { return Tensor({}, {value}, requires_grad); }

const Shape &Tensor::shape() const {
  if (!impl_) throw ContractError("Tensor: use of undefined tensor");
  return impl_->shape;
}

std::size_t Tensor::size(std::size_t axis) const {
  const auto &s = shape();
  if (axis >= s.size()) throw DimensionError("Tensor::size: axis out of range for " + shape_str(s));
  return s[axis];
}

std::size_t Tensor::numel() const { return shape_numel(shape()); }

std::span<const double> Tensor::data() const {
  shape();
  return impl_->data;
}

std::span<double> Tensor::mutable_data() {
  shape();
  return impl_->data;
}

double Tensor::item() const {
  if (numel() != 1) throw DimensionError("Tensor::item on shape " + shape_str(shape()));
  return impl_->data[0];
}

double Tensor::at(std::initializer_list<std::size_t> index) const {
  const auto &s = shape();
  if (index.size() != s.size()) throw DimensionError("Tensor::at: rank mismatch for " + shape_str(s));
  std::size_t flat = 0;
  std::size_t axis = 0;
  for (auto i : index) {
    if (i >= s[axis]) throw DimensionError("Tensor::at: index out of range for " + shape_str(s));
    flat = flat * s[axis] + i;
    ++axis;
  }
  return impl_->data[flat];
}

bool Tensor::requires_grad() const { return impl_ && impl_->requires_grad; }

void Tensor::set_requires_grad(bool flag) {
  shape();
  impl_->requires_grad = flag;
}

bool Tensor::has_grad() const { return impl_ && !impl_->grad.empty(); }

std::span<const double> Tensor::grad() const {
  if (!has_grad()) throw ContractError("Tensor::grad: no gradient populated");
  return impl_->grad;
}

std::span<double> Tensor::mutable_grad() {
  shape();
  if (impl_->grad.empty()) impl_->grad.assign(impl_->data.size(), 0.0);
  return impl_->grad;
}

void Tensor::zero_grad() {
  if (impl_) impl_->grad.clear();
}

void Tensor::accumulate_grad(std::span<const double> g) const {
  shape();
  if (impl_->grad.empty()) impl_->grad.assign(impl_->data.size(), 0.0);
  auto &dst = impl_->grad;
  if (g.size() != dst.size()) {
    throw DimensionError("accumulate_grad: gradient length " + std::to_string(g.size()) +
                         " vs tensor " + shape_str(impl_->shape));
  }
  for (std::size_t i = 0; i < g.size(); ++i) dst[i] += g[i];
}

Tensor Tensor::detach() const {
  shape();
  return Tensor(impl_->shape, impl_->data, false);
}

void Tensor::backward() const {
  if (numel() != 1) {
    throw ContractError("backward: loss must be scalar, got shape " + shape_str(shape()));
  }
  if (!impl_->requires_grad) throw ContractError("backward: loss does not depend on any tensor requiring grad");

  // Tape: post-order DFS gives inputs before consumers.
  std::vector<detail::TensorImpl *> tape;
  std::unordered_set<detail::TensorImpl *> seen;
  std::vector<std::pair<detail::TensorImpl *, std::size_t>> stack;
  stack.emplace_back(impl_.get(), 0);
  seen.insert(impl_.get());
  while (!stack.empty()) {
    auto &[t, next] = stack.back();
    const auto *node = t->node.get();
    if (node && next < node->inputs.size()) {
      auto *child = node->inputs[next++].get();
      if (child->requires_grad && seen.insert(child).second) stack.emplace_back(child, 0);
      continue;
    }
    tape.push_back(t);
    stack.pop_back();
  }

  impl_->grad.assign(1, 1.0);
  for (auto it = tape.rbegin(); it != tape.rend(); ++it) {
    auto *t = *it;
    if (t->node && !t->grad.empty()) t->node->backward(t->grad);
  }
  for (auto *t : tape) t->node.reset();
}

Tensor make_result(Shape shape, std::vector<double> values, std::vector<Tensor> inputs,
                   std::function<void(std::span<const double>)> backward_fn) {
  Tensor out(std::move(shape), std::move(values), false);
  if (!t_grad_enabled) return out;
  bool any = false;
  for (const auto &in : inputs) any = any || in.requires_grad();
  if (!any) return out;
  auto node = std::make_shared<detail::Node>();
  for (const auto &in : inputs) {
    if (in.requires_grad()) node->inputs.push_back(in.impl());
  }
  node->backward = std::move(backward_fn);
  out.impl_->requires_grad = true;
  out.impl_->node = std::move(node);
  return out;
}

} // namespace mactn
