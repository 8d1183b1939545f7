#pragma once

#include <functional>
#include <initializer_list>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "relush/common.hpp"

namespace relush {

/// Dense n-dimensional double tensor with shared storage. Feature maps use
/// N,C,H,W order. Gradients are accumulated on the same object by the tape.
class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(std::vector<int> shape, bool requires_grad = false);
  static Tensor full(std::vector<int> shape, double value,
                     bool requires_grad = false);
  static Tensor from_data(std::vector<int> shape, std::vector<double> values,
                          bool requires_grad = false);
  /// Uniform in [lo, hi).
  static Tensor random_uniform(std::vector<int> shape, double lo, double hi,
                               Rng& rng, bool requires_grad = false);
  /// Kaiming-uniform fan-in init: U(-b, b) with b = sqrt(6 / fan_in).
  static Tensor kaiming_uniform(std::vector<int> shape, int fan_in, Rng& rng,
                                bool requires_grad = false);

  bool defined() const { return impl_ != nullptr; }
  const std::vector<int>& shape() const { return impl_->shape; }
  int dim(int i) const { return impl_->shape[static_cast<std::size_t>(i)]; }
  int ndim() const { return static_cast<int>(impl_->shape.size()); }
  std::int64_t numel() const {
    return static_cast<std::int64_t>(impl_->value.size());
  }

  std::span<double> data() { return impl_->value; }
  std::span<const double> data() const { return impl_->value; }
  double value_at(std::int64_t i) const {
    return impl_->value[static_cast<std::size_t>(i)];
  }
  /// Scalar convenience accessor; requires numel() == 1.
  double item() const;

  bool requires_grad() const { return impl_->requires_grad; }
  void set_requires_grad(bool b) {
    impl_->requires_grad = b;
    impl_->tracked = impl_->tracked || b;
  }

  bool has_grad() const { return !impl_->grad.empty(); }
  std::span<double> grad();
  std::span<const double> grad() const;
  void zero_grad() {
    if (!impl_->grad.empty()) std::fill(impl_->grad.begin(), impl_->grad.end(), 0.0);
  }

  Tensor clone() const;

  /// True when the autograd tape must record operations consuming this
  /// tensor (a leaf with requires_grad, or a value derived from one).
  bool tracked() const { return impl_ && impl_->tracked; }

  bool same_storage(const Tensor& other) const { return impl_ == other.impl_; }

  struct Impl {
    std::vector<int> shape;
    std::vector<double> value;
    std::vector<double> grad;  // empty until first accumulation
    bool requires_grad = false;
    bool tracked = false;
  };
  explicit Tensor(std::shared_ptr<Impl> impl) : impl_(std::move(impl)) {}
  const std::shared_ptr<Impl>& impl() const { return impl_; }

 private:
  std::shared_ptr<Impl> impl_;
};

/// Ordered record of executed differentiable operations. Entries are pushed
/// in execution order, which is a topological order of the data flow, and the
/// backward sweep visits each entry exactly once in reverse.
class Tape {
 public:
  struct Entry {
    const char* name;
    std::vector<Tensor> inputs;
    Tensor output;
    std::function<void(Entry&)> backward;
  };

  /// Records an op if any input is tracked; marks the output tracked.
  void record(const char* name, std::vector<Tensor> inputs, Tensor output,
              std::function<void(Entry&)> backward);

  std::size_t size() const { return entries_.size(); }
  const Entry& entry(std::size_t i) const { return entries_[i]; }
  void clear() { entries_.clear(); }

  std::vector<Entry>& entries() { return entries_; }

 private:
  std::vector<Entry> entries_;
};

/// Reverse-mode sweep: seeds d(loss)/d(loss) = 1 and populates grads on every
/// tracked tensor reachable from the loss. Loss must be scalar and on tape.
void backward(const Tensor& loss, Tape& tape);

/// Accumulates `delta[i] * scale` into t's grad (allocating it on demand).
void accumulate_grad(Tensor& t, std::span<const double> delta,
                     double scale = 1.0);

// ---- Differentiable operations -------------------------------------------

/// 2-D convolution, x:[N,Ci,H,W] w:[Co,Ci,f,f] bias:[Co] -> [N,Co,H',W'] with
/// H' = (H + 2*padding - f)/stride + 1.
Tensor conv2d(Tape& tape, const Tensor& x, const Tensor& w, const Tensor& bias,
              int stride, int padding);

/// y = x W + bias, x:[N,n] W:[n,v] bias:[v].
Tensor dense(Tape& tape, const Tensor& x, const Tensor& W, const Tensor& bias);

/// k x k mean pooling with the given stride, x:[N,C,H,W].
Tensor avgpool2d(Tape& tape, const Tensor& x, int k, int stride);

/// Elementwise max(x, 0); subgradient 1 at exactly 0.
Tensor relu(Tape& tape, const Tensor& x);

/// [N, ...] -> [N, prod(rest)].
Tensor flatten2d(Tape& tape, const Tensor& x);

/// Mean negative log-likelihood of softmax(logits) at the given labels.
Tensor softmax_cross_entropy(Tape& tape, const Tensor& logits,
                             const std::vector<int>& labels);

Tensor add(Tape& tape, const Tensor& a, const Tensor& b);
Tensor mul(Tape& tape, const Tensor& a, const Tensor& b);
Tensor sum(Tape& tape, const Tensor& x);

/// Momentum SGD over a fixed parameter list: v = mu*v + g; p -= lr*v.
class SgdOptimizer {
 public:
  SgdOptimizer(std::vector<Tensor> params, double lr, double momentum);

  void step();
  void zero_grad();

  double lr() const { return lr_; }
  void set_lr(double lr) { lr_ = lr; }

 private:
  std::vector<Tensor> params_;
  std::vector<std::vector<double>> velocity_;
  double lr_;
  double momentum_;
};

/// Throws NumericError if any element is NaN/Inf.
void check_finite(std::span<const double> values, const char* context);

}  // namespace relush
