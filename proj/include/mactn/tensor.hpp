#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "mactn/errors.hpp"

namespace mactn {

using Shape = std::vector<std::size_t>;

std::size_t shape_numel(const Shape &shape);
std::string shape_str(const Shape &shape);

namespace detail {
struct TensorImpl;
struct Node;
} // namespace detail

// Dense row-major float64 array with optional reverse-mode gradient.
//
// Tensor is a handle: copies share storage. Ops that take tensors requiring
// grad record a node so that backward() on a scalar result can propagate.
class Tensor {
public:
  Tensor() = default;
  Tensor(Shape shape, std::vector<double> values, bool requires_grad = false);

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, double value, bool requires_grad = false);
  static Tensor scalar(double value, bool requires_grad = false);

  bool defined() const { return impl_ != nullptr; }
  const Shape &shape() const;
  std::size_t dim() const { return shape().size(); }
  std::size_t size(std::size_t axis) const;
  std::size_t numel() const;

  std::span<const double> data() const;
  // Direct write access, for initializers and optimizers. Values written here
  // bypass the finiteness check and are not tracked by autodiff.
  std::span<double> mutable_data();
  double item() const;
  double at(std::initializer_list<std::size_t> index) const;

  bool requires_grad() const;
  void set_requires_grad(bool flag);
  bool has_grad() const;
  std::span<const double> grad() const;
  std::span<double> mutable_grad();
  void zero_grad();
  void accumulate_grad(std::span<const double> g) const;

  // Copy of the values with no history.
  Tensor detach() const;
  Tensor clone() const { return detach(); }

  // Reverse pass from a scalar. The recorded graph is released afterwards.
  void backward() const;

  bool same_storage(const Tensor &other) const { return impl_ == other.impl_; }

  std::shared_ptr<detail::TensorImpl> impl() const { return impl_; }

private:
  explicit Tensor(std::shared_ptr<detail::TensorImpl> impl) : impl_(std::move(impl)) {}
  std::shared_ptr<detail::TensorImpl> impl_;

  friend Tensor make_result(Shape, std::vector<double>, std::vector<Tensor>,
                            std::function<void(std::span<const double>)>);
};

// Builds an op output. When grad mode is on and any input requires grad, the
// result records `backward_fn`, which receives dL/d(out) and must accumulate
// into the inputs it captured. Rejects non-finite values.
Tensor make_result(Shape shape, std::vector<double> values, std::vector<Tensor> inputs,
                   std::function<void(std::span<const double>)> backward_fn);

bool grad_enabled();

// Disables graph recording on this thread for the guard's lifetime.
class NoGradGuard {
public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard &) = delete;
  NoGradGuard &operator=(const NoGradGuard &) = delete;

private:
  bool previous_;
};

// Multiply-accumulate counter fed by matmul and convolution kernels on the
// current thread. Used to cross-check closed-form FLOP counts.
std::uint64_t mac_counter();
void reset_mac_counter();
void add_macs(std::uint64_t n);

// ---------------------------------------------------------------------------
// Ops

// a[..., m, k] x b[k, n]  (b shared across leading dims), or
// a[..., m, k] x b[..., k, n] with identical leading dims.
Tensor matmul(const Tensor &a, const Tensor &b);

// `b` is broadcast onto `a` by the trailing-dimension rule: b's dims align
// with a's last dims and each equals a's or is 1. A one-element b is a scalar.
Tensor add(const Tensor &a, const Tensor &b);
Tensor sub(const Tensor &a, const Tensor &b);
Tensor mul(const Tensor &a, const Tensor &b);

Tensor scale(const Tensor &x, double factor);
Tensor add_scalar(const Tensor &x, double value);
Tensor relu(const Tensor &x);
Tensor abs(const Tensor &x);

Tensor softmax(const Tensor &x, std::size_t axis);
Tensor reduce_mean(const Tensor &x, std::size_t axis);
Tensor reduce_sum(const Tensor &x, std::size_t axis);
Tensor sum(const Tensor &x);
Tensor mean(const Tensor &x);

Tensor reshape(const Tensor &x, Shape shape);
Tensor permute(const Tensor &x, const std::vector<std::size_t> &order);
// Swaps the last two axes.
Tensor transpose(const Tensor &x);

Tensor concat(const std::vector<Tensor> &parts, std::size_t axis);
Tensor slice(const Tensor &x, std::size_t axis, std::size_t start, std::size_t length);

} // namespace mactn
