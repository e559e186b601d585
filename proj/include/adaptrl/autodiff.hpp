#pragma once

// Reverse-mode differentiation over a closed layer vocabulary. A Tape records
// forward values and whatever each op needs for its backward pass; backward()
// walks the record in reverse and accumulates gradients into parameter leaves.

#include <Eigen/Core>

#include <algorithm>
#include <array>
#include <cmath>
#include <cstddef>
#include <limits>
#include <span>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <vector>

#include "adaptrl/tensor.hpp"

namespace adaptrl {

enum class LayerKind { Dense, Conv2d, ConvTranspose2d, Relu, Tanh, Softmax, Flatten };

inline const char* to_string(LayerKind kind) {
  switch (kind) {
    case LayerKind::Dense: return "dense";
    case LayerKind::Conv2d: return "conv2d";
    case LayerKind::ConvTranspose2d: return "conv_transpose2d";
    case LayerKind::Relu: return "relu";
    case LayerKind::Tanh: return "tanh";
    case LayerKind::Softmax: return "softmax";
    case LayerKind::Flatten: return "flatten";
  }
  return "?";
}

struct ConvGeometry {
  std::size_t stride = 1;
  std::size_t pad = 0;
};

/// floor((in + 2*pad - kernel) / stride) + 1
inline std::size_t conv_output_size(std::size_t in, std::size_t kernel,
                                    const ConvGeometry& g) {
  if (g.stride == 0) throw ShapeError("conv stride must be positive");
  if (in + 2 * g.pad < kernel) {
    throw ShapeError("conv kernel " + std::to_string(kernel) +
                     " larger than padded input " + std::to_string(in + 2 * g.pad));
  }
  return (in + 2 * g.pad - kernel) / g.stride + 1;
}

/// (in - 1) * stride - 2 * pad + kernel
inline std::size_t conv_transpose_output_size(std::size_t in, std::size_t kernel,
                                              const ConvGeometry& g) {
  const std::size_t full = (in - 1) * g.stride + kernel;
  if (full <= 2 * g.pad) throw ShapeError("conv_transpose output would be empty");
  return full - 2 * g.pad;
}

struct A2cTerms {
  double policy = 0.0;   // mean of -log pi(a|s) * advantage
  double value = 0.0;    // mean squared (G - V), before the coefficient
  double entropy = 0.0;  // mean policy entropy
};

namespace detail {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MatMap = Eigen::Map<RowMat>;
using ConstMatMap = Eigen::Map<const RowMat>;

inline MatMap mat(double* p, std::size_t rows, std::size_t cols) {
  return MatMap(p, static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols));
}
inline ConstMatMap mat(const double* p, std::size_t rows, std::size_t cols) {
  return ConstMatMap(p, static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols));
}

struct ImageGeom {
  std::size_t channels, height, width, kh, kw, out_h, out_w;
  ConvGeometry conv;
};

// Unrolls one image [C,H,W] into columns [C*kh*kw, out_h*out_w] written at
// column offset `col0` of a matrix with leading dimension `ld`.
inline void im2col(const double* img, const ImageGeom& g, double* cols,
                   std::size_t ld, std::size_t col0) {
  const auto pad = static_cast<std::ptrdiff_t>(g.conv.pad);
  const auto stride = static_cast<std::ptrdiff_t>(g.conv.stride);
  const auto h = static_cast<std::ptrdiff_t>(g.height);
  const auto w = static_cast<std::ptrdiff_t>(g.width);
  std::size_t row = 0;
  for (std::size_t c = 0; c < g.channels; ++c) {
    const double* plane = img + c * g.height * g.width;
    for (std::size_t ky = 0; ky < g.kh; ++ky) {
      for (std::size_t kx = 0; kx < g.kw; ++kx, ++row) {
        double* dst = cols + row * ld + col0;
        for (std::size_t oy = 0; oy < g.out_h; ++oy) {
          const std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(oy) * stride - pad +
                                    static_cast<std::ptrdiff_t>(ky);
          for (std::size_t ox = 0; ox < g.out_w; ++ox) {
            const std::ptrdiff_t ix = static_cast<std::ptrdiff_t>(ox) * stride - pad +
                                      static_cast<std::ptrdiff_t>(kx);
            *dst++ = (iy >= 0 && iy < h && ix >= 0 && ix < w) ? plane[iy * w + ix] : 0.0;
          }
        }
      }
    }
  }
}

// Adjoint of im2col: accumulates columns back into an image.
inline void col2im(const double* cols, const ImageGeom& g, double* img,
                   std::size_t ld, std::size_t col0) {
  const auto pad = static_cast<std::ptrdiff_t>(g.conv.pad);
  const auto stride = static_cast<std::ptrdiff_t>(g.conv.stride);
  const auto h = static_cast<std::ptrdiff_t>(g.height);
  const auto w = static_cast<std::ptrdiff_t>(g.width);
  std::size_t row = 0;
  for (std::size_t c = 0; c < g.channels; ++c) {
    double* plane = img + c * g.height * g.width;
    for (std::size_t ky = 0; ky < g.kh; ++ky) {
      for (std::size_t kx = 0; kx < g.kw; ++kx, ++row) {
        const double* src = cols + row * ld + col0;
        for (std::size_t oy = 0; oy < g.out_h; ++oy) {
          const std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(oy) * stride - pad +
                                    static_cast<std::ptrdiff_t>(ky);
          for (std::size_t ox = 0; ox < g.out_w; ++ox, ++src) {
            const std::ptrdiff_t ix = static_cast<std::ptrdiff_t>(ox) * stride - pad +
                                      static_cast<std::ptrdiff_t>(kx);
            if (iy >= 0 && iy < h && ix >= 0 && ix < w) plane[iy * w + ix] += *src;
          }
        }
      }
    }
  }
}

inline void require_rank(const Tensor& t, std::size_t rank, const char* op,
                         const char* what) {
  if (t.rank() != rank) {
    throw ShapeError(std::string(op) + ": " + what + " must have rank " +
                     std::to_string(rank) + ", got shape " + shape_string(t.shape()));
  }
}

inline void require_dim(const Tensor& t, std::size_t axis, std::size_t expected,
                        const char* op, const char* what) {
  if (t.dim(axis) != expected) {
    throw ShapeError(std::string(op) + ": " + what + " dimension " + std::to_string(axis) +
                     " is " + std::to_string(t.dim(axis)) + ", expected " +
                     std::to_string(expected));
  }
}

// log(sigmoid(x)) without overflow
inline double log_sigmoid(double x) {
  return x >= 0.0 ? -std::log1p(std::exp(-x)) : x - std::log1p(std::exp(x));
}
inline double sigmoid(double x) {
  if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

}  // namespace detail

/// Handle to a recorded value.
struct Var {
  std::size_t id = std::numeric_limits<std::size_t>::max();
};

class Tape {
 public:
  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;
  Tape(Tape&&) = default;
  Tape& operator=(Tape&&) = default;

  /// Constant input; never receives gradient.
  Var input(Tensor value) {
    Node n;
    n.op = Op::Input;
    n.value = std::move(value);
    return push(std::move(n));
  }

  /// Parameter leaf referencing `set[name]`. The set must outlive the tape and
  /// stay unmodified until backward() finishes. Names are unique per tape:
  /// repeated calls for the same name return the same leaf, so gradients from
  /// several uses accumulate.
  /// Non-trainable leaves behave like constants.
  Var param(const ParameterSet& set, const std::string& name, bool trainable = true) {
    const std::string key = (trainable ? "t:" : "c:") + name;
    if (auto it = param_ids_.find(key); it != param_ids_.end()) return Var{it->second};
    Node n;
    n.op = Op::Param;
    n.external = &set.at(name);
    n.name = name;
    n.needs_grad = trainable;
    const Var v = push(std::move(n));
    param_ids_.emplace(key, v.id);
    return v;
  }

  const Tensor& value(Var v) const {
    const Node& n = node(v);
    return n.external ? *n.external : n.value;
  }

  std::size_t size() const noexcept { return nodes_.size(); }

  // ---- layer vocabulary ----

  /// x [N, in], weight [out, in], bias [out] -> [N, out]
  Var dense(Var x, Var weight, Var bias) {
    const Tensor& xv = value(x);
    const Tensor& wv = value(weight);
    const Tensor& bv = value(bias);
    detail::require_rank(xv, 2, "dense", "input");
    detail::require_rank(wv, 2, "dense", "weight");
    detail::require_rank(bv, 1, "dense", "bias");
    detail::require_dim(xv, 1, wv.dim(1), "dense", "input");
    detail::require_dim(bv, 0, wv.dim(0), "dense", "bias");
    const std::size_t n = xv.dim(0), in = wv.dim(1), out = wv.dim(0);
    Tensor y({n, out});
    auto ym = detail::mat(y.raw(), n, out);
    ym.noalias() = detail::mat(xv.raw(), n, in) * detail::mat(wv.raw(), out, in).transpose();
    for (std::size_t r = 0; r < n; ++r) {
      for (std::size_t c = 0; c < out; ++c) ym(r, c) += bv[c];
    }
    return push_op(Op::Dense, {x, weight, bias}, std::move(y));
  }

  /// x [N, C, H, W], weight [F, C, kh, kw], bias [F] -> [N, F, OH, OW]
  Var conv2d(Var x, Var weight, Var bias, ConvGeometry geom) {
    const Tensor& xv = value(x);
    const Tensor& wv = value(weight);
    const Tensor& bv = value(bias);
    detail::require_rank(xv, 4, "conv2d", "input");
    detail::require_rank(wv, 4, "conv2d", "weight");
    detail::require_rank(bv, 1, "conv2d", "bias");
    detail::require_dim(xv, 1, wv.dim(1), "conv2d", "input");
    detail::require_dim(bv, 0, wv.dim(0), "conv2d", "bias");
    const auto g = conv_geom(xv.dim(1), xv.dim(2), xv.dim(3), wv.dim(2), wv.dim(3), geom);
    const std::size_t n = xv.dim(0), f = wv.dim(0);
    const std::size_t ckk = g.channels * g.kh * g.kw, pix = g.out_h * g.out_w;
    const std::size_t ld = n * pix;
    std::vector<double> cols(ckk * ld);
    const std::size_t in_stride = g.channels * g.height * g.width;
    for (std::size_t s = 0; s < n; ++s) {
      detail::im2col(xv.raw() + s * in_stride, g, cols.data(), ld, s * pix);
    }
    detail::RowMat out = detail::mat(wv.raw(), f, ckk) * detail::mat(cols.data(), ckk, ld);
    Tensor y({n, f, g.out_h, g.out_w});
    for (std::size_t s = 0; s < n; ++s) {
      for (std::size_t c = 0; c < f; ++c) {
        double* dst = y.raw() + (s * f + c) * pix;
        const double* src = out.data() + c * ld + s * pix;
        for (std::size_t p = 0; p < pix; ++p) dst[p] = src[p] + bv[c];
      }
    }
    Var v = push_op(Op::Conv2d, {x, weight, bias}, std::move(y));
    Node& nd = nodes_[v.id];
    nd.geom = geom;
    nd.cache = std::move(cols);
    return v;
  }

  /// x [N, Cin, H, W], weight [Cin, Cout, kh, kw], bias [Cout]
  ///   -> [N, Cout, (H-1)*s - 2p + kh, (W-1)*s - 2p + kw]
  Var conv_transpose2d(Var x, Var weight, Var bias, ConvGeometry geom) {
    const Tensor& xv = value(x);
    const Tensor& wv = value(weight);
    const Tensor& bv = value(bias);
    detail::require_rank(xv, 4, "conv_transpose2d", "input");
    detail::require_rank(wv, 4, "conv_transpose2d", "weight");
    detail::require_rank(bv, 1, "conv_transpose2d", "bias");
    detail::require_dim(xv, 1, wv.dim(0), "conv_transpose2d", "input");
    detail::require_dim(bv, 0, wv.dim(1), "conv_transpose2d", "bias");
    const std::size_t n = xv.dim(0), cin = wv.dim(0), cout = wv.dim(1);
    const std::size_t oh = conv_transpose_output_size(xv.dim(2), wv.dim(2), geom);
    const std::size_t ow = conv_transpose_output_size(xv.dim(3), wv.dim(3), geom);
    const auto g = conv_geom(cout, oh, ow, wv.dim(2), wv.dim(3), geom);
    if (g.out_h != xv.dim(2) || g.out_w != xv.dim(3)) {
      throw ShapeError("conv_transpose2d: geometry does not invert to input dimension 2");
    }
    const std::size_t pix = xv.dim(2) * xv.dim(3), ld = n * pix;
    const std::size_t ckk = cout * g.kh * g.kw;
    std::vector<double> xall = gather_channels(xv, cin, pix);
    detail::RowMat cols = detail::mat(wv.raw(), cin, ckk).transpose() *
                          detail::mat(xall.data(), cin, ld);
    Tensor y({n, cout, oh, ow});
    const std::size_t out_stride = cout * oh * ow;
    for (std::size_t s = 0; s < n; ++s) {
      double* img = y.raw() + s * out_stride;
      detail::col2im(cols.data(), g, img, ld, s * pix);
      for (std::size_t c = 0; c < cout; ++c) {
        for (std::size_t p = 0; p < oh * ow; ++p) img[c * oh * ow + p] += bv[c];
      }
    }
    Var v = push_op(Op::ConvTranspose2d, {x, weight, bias}, std::move(y));
    Node& nd = nodes_[v.id];
    nd.geom = geom;
    nd.cache = std::move(xall);
    return v;
  }

  Var relu(Var x) {
    Tensor y = value(x);
    for (double& v : y.data()) v = v > 0.0 ? v : 0.0;
    return push_op(Op::Relu, {x}, std::move(y));
  }

  Var tanh(Var x) {
    Tensor y = value(x);
    for (double& v : y.data()) v = std::tanh(v);
    return push_op(Op::Tanh, {x}, std::move(y));
  }

  /// Softmax over the last axis.
  Var softmax(Var x) {
    Tensor y = value(x);
    const std::size_t k = y.shape().back();
    for (std::size_t r = 0; r < y.size() / k; ++r) {
      double* row = y.raw() + r * k;
      const double m = *std::max_element(row, row + k);
      double z = 0.0;
      for (std::size_t j = 0; j < k; ++j) z += (row[j] = std::exp(row[j] - m));
      for (std::size_t j = 0; j < k; ++j) row[j] /= z;
    }
    return push_op(Op::Softmax, {x}, std::move(y));
  }

  /// [N, ...] -> [N, prod(...)]
  Var flatten(Var x) {
    const Tensor& xv = value(x);
    if (xv.rank() < 1) throw ShapeError("flatten: input must have a batch dimension 0");
    return reshape(x, {xv.dim(0), xv.size() / xv.dim(0)});
  }

  Var reshape(Var x, Shape shape) {
    const Tensor& xv = value(x);
    if (shape_product(shape) != xv.size()) {
      throw ShapeError("reshape: " + shape_string(xv.shape()) + " cannot become " +
                       shape_string(shape));
    }
    return push_op(Op::Reshape, {x}, xv.reshaped(std::move(shape)));
  }

  /// Dispatch by layer kind. `params` holds the weight and bias Vars for
  /// Dense/Conv2d/ConvTranspose2d and is ignored otherwise.
  Var apply(LayerKind kind, Var x, std::span<const Var> params = {},
            ConvGeometry geom = {}) {
    auto need = [&](std::size_t k) {
      if (params.size() != k) {
        throw ShapeError(std::string(to_string(kind)) + ": expected " + std::to_string(k) +
                         " parameter tensors, got " + std::to_string(params.size()));
      }
    };
    switch (kind) {
      case LayerKind::Dense: need(2); return dense(x, params[0], params[1]);
      case LayerKind::Conv2d: need(2); return conv2d(x, params[0], params[1], geom);
      case LayerKind::ConvTranspose2d:
        need(2);
        return conv_transpose2d(x, params[0], params[1], geom);
      case LayerKind::Relu: return relu(x);
      case LayerKind::Tanh: return tanh(x);
      case LayerKind::Softmax: return softmax(x);
      case LayerKind::Flatten: return flatten(x);
    }
    throw std::logic_error("unknown layer kind");
  }

  // ---- loss vocabulary (all return shape [1]) ----

  /// mean((pred - target)^2) over every element.
  Var mse(Var pred, const Tensor& target) {
    const Tensor& pv = value(pred);
    if (pv.shape() != target.shape()) {
      throw ShapeError("mse: prediction shape " + shape_string(pv.shape()) +
                       " differs from target shape " + shape_string(target.shape()));
    }
    std::vector<double> diff(pv.size());
    double acc = 0.0;
    for (std::size_t i = 0; i < pv.size(); ++i) {
      diff[i] = pv[i] - target[i];
      acc += diff[i] * diff[i];
    }
    Var v = push_op(Op::Mse, {pred}, Tensor::scalar(acc / static_cast<double>(pv.size())));
    nodes_[v.id].cache = std::move(diff);
    return v;
  }

  Var mean(Var x) {
    const Tensor& xv = value(x);
    double acc = 0.0;
    for (double v : xv.data()) acc += v;
    return push_op(Op::Mean, {x}, Tensor::scalar(acc / static_cast<double>(xv.size())));
  }

  Var sum(Var x) {
    double acc = 0.0;
    for (double v : value(x).data()) acc += v;
    return push_op(Op::Sum, {x}, Tensor::scalar(acc));
  }

  Var sum_squares(Var x) {
    double acc = 0.0;
    for (double v : value(x).data()) acc += v * v;
    return push_op(Op::SumSquares, {x}, Tensor::scalar(acc));
  }

  Var scale(Var x, double factor) {
    Tensor y = value(x);
    for (double& v : y.data()) v *= factor;
    Var out = push_op(Op::Scale, {x}, std::move(y));
    nodes_[out.id].factor = factor;
    return out;
  }

  Var add(Var a, Var b) {
    const Tensor& av = value(a);
    const Tensor& bv = value(b);
    if (av.shape() != bv.shape()) {
      throw ShapeError("add: shapes " + shape_string(av.shape()) + " and " +
                       shape_string(bv.shape()) + " differ");
    }
    Tensor y = av;
    for (std::size_t i = 0; i < y.size(); ++i) y[i] += bv[i];
    return push_op(Op::Add, {a, b}, std::move(y));
  }

  Var sub(Var a, Var b) { return add(a, scale(b, -1.0)); }

  /// Element-wise log(sigmoid(x)).
  Var log_sigmoid(Var x) {
    Tensor y = value(x);
    for (double& v : y.data()) v = detail::log_sigmoid(v);
    return push_op(Op::LogSigmoid, {x}, std::move(y));
  }

  /// Actor-critic objective over a batch of B states:
  ///   mean_b[-log pi(a_b|s_b) * (G_b - V_b)]     (V detached here)
  ///   + value_coef * mean_b[(G_b - V_b)^2]
  ///   - entropy_coef * mean_b[H(pi(.|s_b))]
  /// logits [B, A] are pre-softmax policy outputs, values [B, 1].
  Var a2c_objective(Var logits, Var values, std::span<const int> actions,
                    std::span<const double> returns, double value_coef,
                    double entropy_coef) {
    const Tensor& lv = value(logits);
    const Tensor& vv = value(values);
    detail::require_rank(lv, 2, "a2c_objective", "logits");
    const std::size_t b = lv.dim(0), a = lv.dim(1);
    if (vv.size() != b || actions.size() != b || returns.size() != b) {
      throw ShapeError("a2c_objective: batch dimension 0 disagrees between logits (" +
                       std::to_string(b) + "), values, actions and returns");
    }
    std::vector<double> probs(b * a);
    A2cTerms terms;
    for (std::size_t r = 0; r < b; ++r) {
      const double* row = lv.raw() + r * a;
      double* p = probs.data() + r * a;
      const double m = *std::max_element(row, row + a);
      double z = 0.0;
      for (std::size_t j = 0; j < a; ++j) z += (p[j] = std::exp(row[j] - m));
      const double log_z = std::log(z) + m;
      double h = 0.0;
      for (std::size_t j = 0; j < a; ++j) {
        p[j] /= z;
        if (p[j] > 0.0) h -= p[j] * (row[j] - log_z);
      }
      if (actions[r] < 0 || static_cast<std::size_t>(actions[r]) >= a) {
        throw std::out_of_range("a2c_objective: action index out of range");
      }
      const double adv = returns[r] - vv[r];
      terms.policy += -(row[actions[r]] - log_z) * adv;
      terms.value += adv * adv;
      terms.entropy += h;
    }
    const double inv = 1.0 / static_cast<double>(b);
    terms.policy *= inv;
    terms.value *= inv;
    terms.entropy *= inv;
    const double loss = terms.policy + value_coef * terms.value - entropy_coef * terms.entropy;
    Var v = push_op(Op::A2c, {logits, values}, Tensor::scalar(loss));
    Node& nd = nodes_[v.id];
    nd.cache = std::move(probs);
    nd.actions.assign(actions.begin(), actions.end());
    nd.targets.assign(returns.begin(), returns.end());
    nd.factor = value_coef;
    nd.factor2 = entropy_coef;
    nd.terms = terms;
    return v;
  }

  const A2cTerms& a2c_terms(Var v) const { return node(v).terms; }

  // ---- reverse pass ----

  /// Accumulates d(seed * loss)/d(leaf) for every trainable parameter leaf.
  /// The loss must hold exactly one element.
  void backward(Var loss, double seed = 1.0) {
    Node& root = nodes_.at(loss.id);
    if (value(loss).size() != 1) {
      throw std::invalid_argument("backward: loss must be scalar, got shape " +
                                  shape_string(value(loss).shape()));
    }
    for (Node& n : nodes_) n.grad = Tensor();
    if (!root.needs_grad) return;
    root.grad = Tensor(value(loss).shape(), seed);
    for (std::size_t i = loss.id + 1; i-- > 0;) {
      Node& n = nodes_[i];
      if (!n.needs_grad || n.grad.empty() || n.op == Op::Param || n.op == Op::Input) continue;
      backprop(n);
    }
  }

  /// Gradient accumulated for a parameter leaf (zeros when it received none).
  Tensor grad(Var v) const {
    const Node& n = node(v);
    return n.grad.empty() ? Tensor(value(v).shape()) : n.grad;
  }

  /// Gradients of every trainable parameter leaf keyed by parameter name.
  ParameterSet gradients() const {
    ParameterSet out;
    for (const Node& n : nodes_) {
      if (n.op != Op::Param || !n.needs_grad) continue;
      out.insert(n.name, n.grad.empty() ? Tensor(n.external->shape()) : n.grad);
    }
    return out;
  }

 private:
  enum class Op {
    Input, Param, Dense, Conv2d, ConvTranspose2d, Relu, Tanh, Softmax, Reshape,
    Mse, Mean, Sum, SumSquares, Scale, Add, LogSigmoid, A2c
  };

  struct Node {
    Op op = Op::Input;
    std::array<std::size_t, 3> in{kNone, kNone, kNone};
    Tensor value;
    Tensor grad;
    const Tensor* external = nullptr;
    std::string name;
    bool needs_grad = false;
    ConvGeometry geom;
    double factor = 0.0;
    double factor2 = 0.0;
    std::vector<double> cache;
    std::vector<int> actions;
    std::vector<double> targets;
    A2cTerms terms;
  };

  static constexpr std::size_t kNone = std::numeric_limits<std::size_t>::max();

  const Node& node(Var v) const {
    if (v.id >= nodes_.size()) throw std::out_of_range("Var does not belong to this tape");
    return nodes_[v.id];
  }

  Var push(Node n) {
    nodes_.push_back(std::move(n));
    return Var{nodes_.size() - 1};
  }

  Var push_op(Op op, std::initializer_list<Var> inputs, Tensor value) {
    Node n;
    n.op = op;
    n.value = std::move(value);
    std::size_t k = 0;
    for (Var v : inputs) {
      n.in[k++] = v.id;
      n.needs_grad = n.needs_grad || nodes_.at(v.id).needs_grad;
    }
    return push(std::move(n));
  }

  static detail::ImageGeom conv_geom(std::size_t c, std::size_t h, std::size_t w,
                                     std::size_t kh, std::size_t kw, ConvGeometry geom) {
    return {c, h, w, kh, kw, conv_output_size(h, kh, geom), conv_output_size(w, kw, geom),
            geom};
  }

  // [N, C, P] -> [C, N*P]
  static std::vector<double> gather_channels(const Tensor& x, std::size_t c, std::size_t pix) {
    const std::size_t n = x.dim(0);
    std::vector<double> out(c * n * pix);
    for (std::size_t s = 0; s < n; ++s)
      for (std::size_t ch = 0; ch < c; ++ch)
        std::copy_n(x.raw() + (s * c + ch) * pix, pix, out.data() + ch * n * pix + s * pix);
    return out;
  }

  Tensor& grad_slot(std::size_t id) {
    Node& n = nodes_[id];
    if (n.grad.empty()) n.grad = Tensor(value(Var{id}).shape());
    return n.grad;
  }

  bool wants(std::size_t id) const { return id != kNone && nodes_[id].needs_grad; }

  void backprop(const Node& n) {
    const Tensor& gy = n.grad;
    switch (n.op) {
      case Op::Dense: {
        const Tensor& xv = value(Var{n.in[0]});
        const Tensor& wv = value(Var{n.in[1]});
        const std::size_t rows = xv.dim(0), in = wv.dim(1), out = wv.dim(0);
        auto dy = detail::mat(gy.raw(), rows, out);
        if (wants(n.in[0])) {
          detail::mat(grad_slot(n.in[0]).raw(), rows, in).noalias() +=
              dy * detail::mat(wv.raw(), out, in);
        }
        if (wants(n.in[1])) {
          detail::mat(grad_slot(n.in[1]).raw(), out, in).noalias() +=
              dy.transpose() * detail::mat(xv.raw(), rows, in);
        }
        if (wants(n.in[2])) {
          Tensor& gb = grad_slot(n.in[2]);
          for (std::size_t r = 0; r < rows; ++r)
            for (std::size_t c = 0; c < out; ++c) gb[c] += dy(r, c);
        }
        break;
      }
      case Op::Conv2d: {
        const Tensor& xv = value(Var{n.in[0]});
        const Tensor& wv = value(Var{n.in[1]});
        const auto g = conv_geom(xv.dim(1), xv.dim(2), xv.dim(3), wv.dim(2), wv.dim(3), n.geom);
        const std::size_t batch = xv.dim(0), f = wv.dim(0);
        const std::size_t ckk = g.channels * g.kh * g.kw, pix = g.out_h * g.out_w;
        const std::size_t ld = batch * pix;
        std::vector<double> dout = gather_channels(gy, f, pix);
        auto dy = detail::mat(dout.data(), f, ld);
        if (wants(n.in[1])) {
          detail::mat(grad_slot(n.in[1]).raw(), f, ckk).noalias() +=
              dy * detail::mat(n.cache.data(), ckk, ld).transpose();
        }
        if (wants(n.in[2])) {
          Tensor& gb = grad_slot(n.in[2]);
          for (std::size_t c = 0; c < f; ++c) {
            // plain loop: Eigen's vectorized sum depends on pointer alignment
            const double* row = dout.data() + c * ld;
            double acc = 0.0;
            for (std::size_t p = 0; p < ld; ++p) acc += row[p];
            gb[c] += acc;
          }
        }
        if (wants(n.in[0])) {
          detail::RowMat dcols = detail::mat(wv.raw(), f, ckk).transpose() * dy;
          Tensor& gx = grad_slot(n.in[0]);
          const std::size_t in_stride = g.channels * g.height * g.width;
          for (std::size_t s = 0; s < batch; ++s) {
            detail::col2im(dcols.data(), g, gx.raw() + s * in_stride, ld, s * pix);
          }
        }
        break;
      }
      case Op::ConvTranspose2d: {
        const Tensor& xv = value(Var{n.in[0]});
        const Tensor& wv = value(Var{n.in[1]});
        const std::size_t batch = xv.dim(0), cin = wv.dim(0), cout = wv.dim(1);
        const std::size_t oh = gy.dim(2), ow = gy.dim(3);
        const auto g = conv_geom(cout, oh, ow, wv.dim(2), wv.dim(3), n.geom);
        const std::size_t pix = xv.dim(2) * xv.dim(3), ld = batch * pix;
        const std::size_t ckk = cout * g.kh * g.kw;
        std::vector<double> dcols(ckk * ld);
        const std::size_t out_stride = cout * oh * ow;
        for (std::size_t s = 0; s < batch; ++s) {
          detail::im2col(gy.raw() + s * out_stride, g, dcols.data(), ld, s * pix);
        }
        auto dc = detail::mat(dcols.data(), ckk, ld);
        if (wants(n.in[1])) {
          detail::mat(grad_slot(n.in[1]).raw(), cin, ckk).noalias() +=
              detail::mat(n.cache.data(), cin, ld) * dc.transpose();
        }
        if (wants(n.in[2])) {
          Tensor& gb = grad_slot(n.in[2]);
          for (std::size_t s = 0; s < batch; ++s)
            for (std::size_t c = 0; c < cout; ++c) {
              const double* src = gy.raw() + s * out_stride + c * oh * ow;
              double acc = 0.0;
              for (std::size_t p = 0; p < oh * ow; ++p) acc += src[p];
              gb[c] += acc;
            }
        }
        if (wants(n.in[0])) {
          detail::RowMat dx = detail::mat(wv.raw(), cin, ckk) * dc;
          Tensor& gx = grad_slot(n.in[0]);
          for (std::size_t s = 0; s < batch; ++s)
            for (std::size_t ch = 0; ch < cin; ++ch) {
              double* dst = gx.raw() + (s * cin + ch) * pix;
              const double* src = dx.data() + ch * ld + s * pix;
              for (std::size_t p = 0; p < pix; ++p) dst[p] += src[p];
            }
        }
        break;
      }
      case Op::Relu: {
        if (!wants(n.in[0])) break;
        Tensor& gx = grad_slot(n.in[0]);
        for (std::size_t i = 0; i < gy.size(); ++i) gx[i] += n.value[i] > 0.0 ? gy[i] : 0.0;
        break;
      }
      case Op::Tanh: {
        if (!wants(n.in[0])) break;
        Tensor& gx = grad_slot(n.in[0]);
        for (std::size_t i = 0; i < gy.size(); ++i) gx[i] += gy[i] * (1.0 - n.value[i] * n.value[i]);
        break;
      }
      case Op::Softmax: {
        if (!wants(n.in[0])) break;
        Tensor& gx = grad_slot(n.in[0]);
        const std::size_t k = n.value.shape().back();
        for (std::size_t r = 0; r < n.value.size() / k; ++r) {
          const double* y = n.value.raw() + r * k;
          const double* dy = gy.raw() + r * k;
          double dot = 0.0;
          for (std::size_t j = 0; j < k; ++j) dot += dy[j] * y[j];
          for (std::size_t j = 0; j < k; ++j) gx[r * k + j] += y[j] * (dy[j] - dot);
        }
        break;
      }
      case Op::Reshape: {
        if (!wants(n.in[0])) break;
        Tensor& gx = grad_slot(n.in[0]);
        for (std::size_t i = 0; i < gy.size(); ++i) gx[i] += gy[i];
        break;
      }
      case Op::Mse: {
        if (!wants(n.in[0])) break;
        Tensor& gx = grad_slot(n.in[0]);
        const double k = 2.0 * gy[0] / static_cast<double>(n.cache.size());
        for (std::size_t i = 0; i < n.cache.size(); ++i) gx[i] += k * n.cache[i];
        break;
      }
      case Op::Mean:
      case Op::Sum: {
        if (!wants(n.in[0])) break;
        Tensor& gx = grad_slot(n.in[0]);
        const double k = n.op == Op::Mean ? gy[0] / static_cast<double>(gx.size()) : gy[0];
        for (double& v : gx.data()) v += k;
        break;
      }
      case Op::SumSquares: {
        if (!wants(n.in[0])) break;
        const Tensor& xv = value(Var{n.in[0]});
        Tensor& gx = grad_slot(n.in[0]);
        for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += 2.0 * xv[i] * gy[0];
        break;
      }
      case Op::Scale: {
        if (!wants(n.in[0])) break;
        Tensor& gx = grad_slot(n.in[0]);
        for (std::size_t i = 0; i < gy.size(); ++i) gx[i] += n.factor * gy[i];
        break;
      }
      case Op::Add: {
        for (std::size_t k = 0; k < 2; ++k) {
          if (!wants(n.in[k])) continue;
          Tensor& gx = grad_slot(n.in[k]);
          for (std::size_t i = 0; i < gy.size(); ++i) gx[i] += gy[i];
        }
        break;
      }
      case Op::LogSigmoid: {
        if (!wants(n.in[0])) break;
        const Tensor& xv = value(Var{n.in[0]});
        Tensor& gx = grad_slot(n.in[0]);
        for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += gy[i] * detail::sigmoid(-xv[i]);
        break;
      }
      case Op::A2c: {
        const Tensor& lv = value(Var{n.in[0]});
        const Tensor& vv = value(Var{n.in[1]});
        const std::size_t b = lv.dim(0), a = lv.dim(1);
        const double inv = gy[0] / static_cast<double>(b);
        if (wants(n.in[0])) {
          Tensor& gl = grad_slot(n.in[0]);
          for (std::size_t r = 0; r < b; ++r) {
            const double* p = n.cache.data() + r * a;
            const double* row = lv.raw() + r * a;
            const double adv = n.targets[r] - vv[r];
            // entropy H = -sum p log p; dH/dz_j = -p_j (log p_j + H)
            double h = 0.0;
            double log_z = 0.0;
            {
              const double m = *std::max_element(row, row + a);
              double z = 0.0;
              for (std::size_t j = 0; j < a; ++j) z += std::exp(row[j] - m);
              log_z = std::log(z) + m;
            }
            for (std::size_t j = 0; j < a; ++j) h -= p[j] * (row[j] - log_z);
            for (std::size_t j = 0; j < a; ++j) {
              const double onehot = static_cast<int>(j) == n.actions[r] ? 1.0 : 0.0;
              const double d_policy = -(onehot - p[j]) * adv;
              const double d_entropy = -p[j] * ((row[j] - log_z) + h);
              gl[r * a + j] += inv * (d_policy - n.factor2 * d_entropy);
            }
          }
        }
        if (wants(n.in[1])) {
          Tensor& gv = grad_slot(n.in[1]);
          for (std::size_t r = 0; r < b; ++r) {
            gv[r] += inv * n.factor * 2.0 * (vv[r] - n.targets[r]);
          }
        }
        break;
      }
      case Op::Input:
      case Op::Param:
        break;
    }
  }

  std::vector<Node> nodes_;
  std::unordered_map<std::string, std::size_t> param_ids_;
};

/// One-shot forward of a single layer kind on concrete tensors. `params` holds
/// {weight, bias} for parameterized kinds.
inline Tensor forward_layer(LayerKind kind, const Tensor& input,
                            std::span<const Tensor> params = {}, ConvGeometry geom = {}) {
  Tape tape;
  std::vector<Var> vars;
  for (std::size_t i = 0; i < params.size(); ++i) {
    vars.push_back(tape.input(params[i]));
  }
  Var x = tape.input(input);
  return tape.value(tape.apply(kind, x, vars, geom));
}

}  // namespace adaptrl
