#include "relush/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <numeric>

namespace relush {

namespace {

std::int64_t checked_numel(const std::vector<int>& shape) {
  std::int64_t n = 1;
  for (int d : shape) {
    if (d <= 0) {
      throw DimensionError("tensor extent must be positive, got shape " +
                           shape_str(shape));
    }
    n *= d;
  }
  return n;
}

}  // namespace

void check_finite(std::span<const double> values, const char* context) {
  for (double v : values) {
    if (!std::isfinite(v)) {
      throw NumericError(std::string(context) +
                         " produced a non-finite value");
    }
  }
}

Tensor Tensor::zeros(std::vector<int> shape, bool requires_grad) {
  return full(std::move(shape), 0.0, requires_grad);
}

Tensor Tensor::full(std::vector<int> shape, double value, bool requires_grad) {
  auto impl = std::make_shared<Impl>();
  const std::int64_t n = checked_numel(shape);
  impl->shape = std::move(shape);
  impl->value.assign(static_cast<std::size_t>(n), value);
  impl->requires_grad = requires_grad;
  impl->tracked = requires_grad;
  return Tensor(std::move(impl));
}

Tensor Tensor::from_data(std::vector<int> shape, std::vector<double> values,
                         bool requires_grad) {
  const std::int64_t n = checked_numel(shape);
  if (n != static_cast<std::int64_t>(values.size())) {
    throw DimensionError("data length " + std::to_string(values.size()) +
                         " does not match shape " + shape_str(shape));
  }
  auto impl = std::make_shared<Impl>();
  impl->shape = std::move(shape);
  impl->value = std::move(values);
  impl->requires_grad = requires_grad;
  impl->tracked = requires_grad;
  return Tensor(std::move(impl));
}

Tensor Tensor::random_uniform(std::vector<int> shape, double lo, double hi,
                              Rng& rng, bool requires_grad) {
  Tensor t = zeros(std::move(shape), requires_grad);
  for (double& v : t.data()) v = rng.uniform(lo, hi);
  return t;
}

Tensor Tensor::kaiming_uniform(std::vector<int> shape, int fan_in, Rng& rng,
                               bool requires_grad) {
  const double bound = std::sqrt(6.0 / static_cast<double>(fan_in));
  return random_uniform(std::move(shape), -bound, bound, rng, requires_grad);
}

double Tensor::item() const {
  if (numel() != 1) {
    throw DimensionError("item() requires a scalar tensor, got shape " +
                         shape_str(shape()));
  }
  return impl_->value[0];
}

std::span<double> Tensor::grad() {
  if (impl_->grad.empty()) impl_->grad.assign(impl_->value.size(), 0.0);
  return impl_->grad;
}

std::span<const double> Tensor::grad() const {
  if (impl_->grad.empty()) impl_->grad.assign(impl_->value.size(), 0.0);
  return impl_->grad;
}

Tensor Tensor::clone() const {
  auto impl = std::make_shared<Impl>();
  impl->shape = impl_->shape;
  impl->value = impl_->value;
  impl->requires_grad = impl_->requires_grad;
  impl->tracked = impl_->tracked;
  return Tensor(std::move(impl));
}

void accumulate_grad(Tensor& t, std::span<const double> delta, double scale) {
  auto g = t.grad();
  for (std::size_t i = 0; i < g.size(); ++i) g[i] += scale * delta[i];
}

void Tape::record(const char* name, std::vector<Tensor> inputs, Tensor output,
                  std::function<void(Entry&)> backward) {
  bool tracked = false;
  for (const Tensor& in : inputs) tracked = tracked || in.tracked();
  if (!tracked) return;
  output.impl()->tracked = true;
  entries_.push_back(Entry{name, std::move(inputs), std::move(output),
                           std::move(backward)});
}

void backward(const Tensor& loss, Tape& tape) {
  if (loss.numel() != 1) {
    throw DimensionError("backward requires a scalar loss, got shape " +
                         shape_str(loss.shape()));
  }
  bool on_tape = false;
  for (const auto& e : tape.entries()) {
    if (e.output.same_storage(loss)) on_tape = true;
  }
  if (!on_tape) {
    throw Error("backward: loss tensor was not produced on this tape");
  }

  Tensor seed = loss;
  seed.grad()[0] += 1.0;

  auto& entries = tape.entries();
  for (auto it = entries.rbegin(); it != entries.rend(); ++it) {
    if (!it->output.has_grad()) continue;  // nothing downstream consumed it
    it->backward(*it);
  }
  for (const auto& e : entries) {
    for (const Tensor& in : e.inputs) {
      if (in.has_grad()) check_finite(in.grad(), e.name);
    }
  }
}

// ---- conv2d ----------------------------------------------------------------

namespace {

struct ConvDims {
  int n, ci, h, w, co, f, stride, padding, oh, ow;
};

ConvDims conv_dims(const Tensor& x, const Tensor& w, const Tensor& bias,
                   int stride, int padding) {
  if (x.ndim() != 4) {
    throw DimensionError("conv2d input must be [N,C,H,W], got " +
                         shape_str(x.shape()));
  }
  if (w.ndim() != 4 || w.dim(2) != w.dim(3)) {
    throw DimensionError("conv2d kernel must be [Co,Ci,f,f], got " +
                         shape_str(w.shape()));
  }
  if (x.dim(1) != w.dim(1)) {
    throw DimensionError("conv2d channel mismatch: input " +
                         shape_str(x.shape()) + " vs kernel " +
                         shape_str(w.shape()));
  }
  if (bias.ndim() != 1 || bias.dim(0) != w.dim(0)) {
    throw DimensionError("conv2d bias must be [Co]");
  }
  if (stride < 1) throw DimensionError("conv2d stride must be >= 1");
  if (padding < 0) throw DimensionError("conv2d padding must be >= 0");
  ConvDims d;
  d.n = x.dim(0);
  d.ci = x.dim(1);
  d.h = x.dim(2);
  d.w = x.dim(3);
  d.co = w.dim(0);
  d.f = w.dim(2);
  d.stride = stride;
  d.padding = padding;
  if (d.f > d.h + 2 * padding || d.f > d.w + 2 * padding) {
    throw DimensionError("conv2d kernel " + std::to_string(d.f) +
                         " exceeds padded input " + shape_str(x.shape()));
  }
  d.oh = (d.h + 2 * padding - d.f) / stride + 1;
  d.ow = (d.w + 2 * padding - d.f) / stride + 1;
  return d;
}

// Unfolds one sample into a (oh*ow) x (ci*f*f) matrix, zero-padded.
void im2col(std::span<const double> x, const ConvDims& d, int sample,
            std::vector<double>& col) {
  const int cols = d.ci * d.f * d.f;
  col.assign(static_cast<std::size_t>(d.oh) * d.ow * cols, 0.0);
  const double* xs =
      x.data() + static_cast<std::size_t>(sample) * d.ci * d.h * d.w;
  for (int oy = 0; oy < d.oh; ++oy) {
    for (int ox = 0; ox < d.ow; ++ox) {
      double* row = col.data() + (static_cast<std::size_t>(oy) * d.ow + ox) * cols;
      for (int c = 0; c < d.ci; ++c) {
        for (int ky = 0; ky < d.f; ++ky) {
          const int iy = oy * d.stride + ky - d.padding;
          if (iy < 0 || iy >= d.h) continue;
          for (int kx = 0; kx < d.f; ++kx) {
            const int ix = ox * d.stride + kx - d.padding;
            if (ix < 0 || ix >= d.w) continue;
            row[(c * d.f + ky) * d.f + kx] =
                xs[(static_cast<std::size_t>(c) * d.h + iy) * d.w + ix];
          }
        }
      }
    }
  }
}

// Scatter-add of the column-space gradient back to input space.
void col2im_add(std::span<double> dx, const ConvDims& d, int sample,
                const std::vector<double>& dcol) {
  const int cols = d.ci * d.f * d.f;
  double* xs = dx.data() + static_cast<std::size_t>(sample) * d.ci * d.h * d.w;
  for (int oy = 0; oy < d.oh; ++oy) {
    for (int ox = 0; ox < d.ow; ++ox) {
      const double* row =
          dcol.data() + (static_cast<std::size_t>(oy) * d.ow + ox) * cols;
      for (int c = 0; c < d.ci; ++c) {
        for (int ky = 0; ky < d.f; ++ky) {
          const int iy = oy * d.stride + ky - d.padding;
          if (iy < 0 || iy >= d.h) continue;
          for (int kx = 0; kx < d.f; ++kx) {
            const int ix = ox * d.stride + kx - d.padding;
            if (ix < 0 || ix >= d.w) continue;
            xs[(static_cast<std::size_t>(c) * d.h + iy) * d.w + ix] +=
                row[(c * d.f + ky) * d.f + kx];
          }
        }
      }
    }
  }
}

}  // namespace

Tensor conv2d(Tape& tape, const Tensor& x, const Tensor& w, const Tensor& bias,
              int stride, int padding) {
  const ConvDims d = conv_dims(x, w, bias, stride, padding);
  Tensor y = Tensor::zeros({d.n, d.co, d.oh, d.ow});
  const int cols = d.ci * d.f * d.f;
  const std::size_t plane = static_cast<std::size_t>(d.oh) * d.ow;

  std::vector<double> col;
  auto xv = x.data();
  auto wv = w.data();
  auto bv = bias.data();
  auto yv = y.data();
  for (int n = 0; n < d.n; ++n) {
    im2col(xv, d, n, col);
    for (int co = 0; co < d.co; ++co) {
      const double* wrow = wv.data() + static_cast<std::size_t>(co) * cols;
      double* yrow =
          yv.data() + (static_cast<std::size_t>(n) * d.co + co) * plane;
      for (std::size_t p = 0; p < plane; ++p) {
        const double* crow = col.data() + p * cols;
        double acc = bv[static_cast<std::size_t>(co)];
        for (int k = 0; k < cols; ++k) acc += crow[k] * wrow[k];
        yrow[p] = acc;
      }
    }
  }
  check_finite(y.data(), "conv2d");

  tape.record("conv2d", {x, w, bias}, y, [d, cols, plane](Tape::Entry& e) {
    Tensor xin = e.inputs[0], win = e.inputs[1], bin = e.inputs[2];
    auto dy = e.output.grad();
    std::vector<double> col, dcol;
    auto dx = xin.grad();
    auto dw = win.grad();
    auto db = bin.grad();
    auto xv = xin.data();
    auto wv = win.data();
    for (int n = 0; n < d.n; ++n) {
      im2col(xv, d, n, col);
      dcol.assign(plane * cols, 0.0);
      for (int co = 0; co < d.co; ++co) {
        const double* wrow = wv.data() + static_cast<std::size_t>(co) * cols;
        double* dwrow = dw.data() + static_cast<std::size_t>(co) * cols;
        const double* dyrow =
            dy.data() + (static_cast<std::size_t>(n) * d.co + co) * plane;
        double dbacc = 0.0;
        for (std::size_t p = 0; p < plane; ++p) {
          const double g = dyrow[p];
          if (g == 0.0) continue;
          dbacc += g;
          const double* crow = col.data() + p * cols;
          double* dcrow = dcol.data() + p * cols;
          for (int k = 0; k < cols; ++k) {
            dwrow[k] += g * crow[k];
            dcrow[k] += g * wrow[k];
          }
        }
        db[static_cast<std::size_t>(co)] += dbacc;
      }
      col2im_add(dx, d, n, dcol);
    }
  });
  return y;
}

Tensor dense(Tape& tape, const Tensor& x, const Tensor& W, const Tensor& bias) {
  if (x.ndim() != 2 || W.ndim() != 2) {
    throw DimensionError("dense expects x:[N,n] W:[n,v]");
  }
  if (x.dim(1) != W.dim(0)) {
    throw DimensionError("dense inner dimension mismatch: x " +
                         shape_str(x.shape()) + " vs W " +
                         shape_str(W.shape()));
  }
  if (bias.ndim() != 1 || bias.dim(0) != W.dim(1)) {
    throw DimensionError("dense bias must be [v]");
  }
  const int n = x.dim(0), in = x.dim(1), out = W.dim(1);
  Tensor y = Tensor::zeros({n, out});
  auto xv = x.data();
  auto wv = W.data();
  auto bv = bias.data();
  auto yv = y.data();
  for (int r = 0; r < n; ++r) {
    for (int c = 0; c < out; ++c) {
      double acc = bv[static_cast<std::size_t>(c)];
      for (int k = 0; k < in; ++k) {
        acc += xv[static_cast<std::size_t>(r) * in + k] *
               wv[static_cast<std::size_t>(k) * out + c];
      }
      yv[static_cast<std::size_t>(r) * out + c] = acc;
    }
  }
  check_finite(y.data(), "dense");

  tape.record("dense", {x, W, bias}, y, [n, in, out](Tape::Entry& e) {
    Tensor xin = e.inputs[0], win = e.inputs[1], bin = e.inputs[2];
    auto dy = e.output.grad();
    auto dx = xin.grad();
    auto dw = win.grad();
    auto db = bin.grad();
    auto xv = xin.data();
    auto wv = win.data();
    for (int r = 0; r < n; ++r) {
      for (int c = 0; c < out; ++c) {
        const double g = dy[static_cast<std::size_t>(r) * out + c];
        if (g == 0.0) continue;
        db[static_cast<std::size_t>(c)] += g;
        for (int k = 0; k < in; ++k) {
          dx[static_cast<std::size_t>(r) * in + k] +=
              g * wv[static_cast<std::size_t>(k) * out + c];
          dw[static_cast<std::size_t>(k) * out + c] +=
              g * xv[static_cast<std::size_t>(r) * in + k];
        }
      }
    }
  });
  return y;
}

Tensor avgpool2d(Tape& tape, const Tensor& x, int k, int stride) {
  if (x.ndim() != 4) {
    throw DimensionError("avgpool2d input must be [N,C,H,W]");
  }
  if (k < 1 || stride < 1) {
    throw DimensionError("avgpool2d window and stride must be >= 1");
  }
  const int n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  if (k > h || k > w) {
    throw DimensionError("avgpool2d window " + std::to_string(k) +
                         " exceeds spatial extent of " + shape_str(x.shape()));
  }
  const int oh = (h - k) / stride + 1;
  const int ow = (w - k) / stride + 1;
  Tensor y = Tensor::zeros({n, c, oh, ow});
  const double inv = 1.0 / (static_cast<double>(k) * k);
  auto xv = x.data();
  auto yv = y.data();
  for (int i = 0; i < n * c; ++i) {
    const double* xs = xv.data() + static_cast<std::size_t>(i) * h * w;
    double* ys = yv.data() + static_cast<std::size_t>(i) * oh * ow;
    for (int oy = 0; oy < oh; ++oy) {
      for (int ox = 0; ox < ow; ++ox) {
        double acc = 0.0;
        for (int ky = 0; ky < k; ++ky) {
          for (int kx = 0; kx < k; ++kx) {
            acc += xs[(oy * stride + ky) * w + ox * stride + kx];
          }
        }
        ys[oy * ow + ox] = acc * inv;
      }
    }
  }
  check_finite(y.data(), "avgpool2d");

  tape.record("avgpool2d", {x}, y, [n, c, h, w, oh, ow, k, stride,
                                    inv](Tape::Entry& e) {
    Tensor xin = e.inputs[0];
    auto dy = e.output.grad();
    auto dx = xin.grad();
    for (int i = 0; i < n * c; ++i) {
      double* dxs = dx.data() + static_cast<std::size_t>(i) * h * w;
      const double* dys = dy.data() + static_cast<std::size_t>(i) * oh * ow;
      for (int oy = 0; oy < oh; ++oy) {
        for (int ox = 0; ox < ow; ++ox) {
          const double g = dys[oy * ow + ox] * inv;
          if (g == 0.0) continue;
          for (int ky = 0; ky < k; ++ky) {
            for (int kx = 0; kx < k; ++kx) {
              dxs[(oy * stride + ky) * w + ox * stride + kx] += g;
            }
          }
        }
      }
    }
  });
  return y;
}

Tensor relu(Tape& tape, const Tensor& x) {
  Tensor y = Tensor::zeros(x.shape());
  auto xv = x.data();
  auto yv = y.data();
  for (std::size_t i = 0; i < xv.size(); ++i) yv[i] = xv[i] >= 0.0 ? xv[i] : 0.0;
  check_finite(y.data(), "relu");

  tape.record("relu", {x}, y, [](Tape::Entry& e) {
    Tensor xin = e.inputs[0];
    auto dy = e.output.grad();
    auto dx = xin.grad();
    auto xv = xin.data();
    for (std::size_t i = 0; i < xv.size(); ++i) {
      if (xv[i] >= 0.0) dx[i] += dy[i];
    }
  });
  return y;
}

Tensor flatten2d(Tape& tape, const Tensor& x) {
  if (x.ndim() < 2) throw DimensionError("flatten2d expects rank >= 2");
  const int n = x.dim(0);
  const int rest = static_cast<int>(x.numel() / n);
  Tensor y = Tensor::from_data({n, rest},
                               std::vector<double>(x.data().begin(),
                                                   x.data().end()));
  tape.record("flatten2d", {x}, y, [](Tape::Entry& e) {
    Tensor xin = e.inputs[0];
    accumulate_grad(xin, e.output.grad());
  });
  return y;
}

Tensor softmax_cross_entropy(Tape& tape, const Tensor& logits,
                             const std::vector<int>& labels) {
  if (logits.ndim() != 2) {
    throw DimensionError("softmax_cross_entropy expects logits [N,K]");
  }
  const int n = logits.dim(0), k = logits.dim(1);
  if (static_cast<int>(labels.size()) != n) {
    throw DimensionError("labels length must equal batch size");
  }
  for (int lbl : labels) {
    if (lbl < 0 || lbl >= k) {
      throw DimensionError("label " + std::to_string(lbl) +
                           " out of range [0," + std::to_string(k) + ")");
    }
  }
  auto lv = logits.data();
  // softmax probabilities, kept for the backward closure
  std::vector<double> probs(static_cast<std::size_t>(n) * k);
  double loss_acc = 0.0;
  for (int r = 0; r < n; ++r) {
    const double* row = lv.data() + static_cast<std::size_t>(r) * k;
    double mx = row[0];
    for (int c = 1; c < k; ++c) mx = std::max(mx, row[c]);
    double z = 0.0;
    for (int c = 0; c < k; ++c) z += std::exp(row[c] - mx);
    const double logz = std::log(z) + mx;
    for (int c = 0; c < k; ++c) {
      probs[static_cast<std::size_t>(r) * k + c] = std::exp(row[c] - logz);
    }
    loss_acc += logz - row[labels[static_cast<std::size_t>(r)]];
  }
  Tensor loss = Tensor::from_data({1}, {loss_acc / n});
  check_finite(loss.data(), "softmax_cross_entropy");

  tape.record("softmax_cross_entropy", {logits}, loss,
              [n, k, probs = std::move(probs), labels](Tape::Entry& e) {
                Tensor lin = e.inputs[0];
                const double g = e.output.grad()[0] / n;
                auto dl = lin.grad();
                for (int r = 0; r < n; ++r) {
                  for (int c = 0; c < k; ++c) {
                    const std::size_t i = static_cast<std::size_t>(r) * k + c;
                    double p = probs[i];
                    if (c == labels[static_cast<std::size_t>(r)]) p -= 1.0;
                    dl[i] += g * p;
                  }
                }
              });
  return loss;
}

Tensor add(Tape& tape, const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) throw DimensionError("add shape mismatch");
  Tensor y = Tensor::zeros(a.shape());
  auto av = a.data(), bv = b.data();
  auto yv = y.data();
  for (std::size_t i = 0; i < yv.size(); ++i) yv[i] = av[i] + bv[i];
  check_finite(y.data(), "add");
  tape.record("add", {a, b}, y, [](Tape::Entry& e) {
    accumulate_grad(e.inputs[0], e.output.grad());
    accumulate_grad(e.inputs[1], e.output.grad());
  });
  return y;
}

Tensor mul(Tape& tape, const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) throw DimensionError("mul shape mismatch");
  Tensor y = Tensor::zeros(a.shape());
  auto av = a.data(), bv = b.data();
  auto yv = y.data();
  for (std::size_t i = 0; i < yv.size(); ++i) yv[i] = av[i] * bv[i];
  check_finite(y.data(), "mul");
  tape.record("mul", {a, b}, y, [](Tape::Entry& e) {
    Tensor ain = e.inputs[0], bin = e.inputs[1];
    auto dy = e.output.grad();
    auto da = ain.grad(), db = bin.grad();
    auto av = ain.data(), bv = bin.data();
    for (std::size_t i = 0; i < dy.size(); ++i) {
      da[i] += dy[i] * bv[i];
      db[i] += dy[i] * av[i];
    }
  });
  return y;
}

Tensor sum(Tape& tape, const Tensor& x) {
  double acc = 0.0;
  for (double v : x.data()) acc += v;
  Tensor y = Tensor::from_data({1}, {acc});
  check_finite(y.data(), "sum");
  tape.record("sum", {x}, y, [](Tape::Entry& e) {
    Tensor xin = e.inputs[0];
    const double g = e.output.grad()[0];
    auto dx = xin.grad();
    for (double& v : dx) v += g;
  });
  return y;
}

SgdOptimizer::SgdOptimizer(std::vector<Tensor> params, double lr,
                           double momentum)
    : params_(std::move(params)), lr_(lr), momentum_(momentum) {
  if (lr <= 0.0) throw Error("sgd learning rate must be > 0");
  velocity_.reserve(params_.size());
  for (const Tensor& p : params_) {
    velocity_.emplace_back(static_cast<std::size_t>(p.numel()), 0.0);
  }
}

void SgdOptimizer::step() {
  for (std::size_t i = 0; i < params_.size(); ++i) {
    Tensor& p = params_[i];
    if (!p.has_grad()) continue;
    auto g = p.grad();
    auto v = velocity_[i].data();
    auto pv = p.data();
    for (std::size_t j = 0; j < g.size(); ++j) {
      v[j] = momentum_ * v[j] + g[j];
      pv[j] -= lr_ * v[j];
    }
    check_finite(p.data(), "sgd_step");
  }
}

void SgdOptimizer::zero_grad() {
  for (Tensor& p : params_) p.zero_grad();
}

}  // namespace relush
