#ifndef LATENTVISION_AUTODIFF_HPP
#define LATENTVISION_AUTODIFF_HPP

#include <Eigen/Dense>
#include <cmath>
#include <cstdint>
#include <functional>
#include <memory>
#include <stdexcept>
#include <unordered_set>
#include <vector>

#include "latentvision/tensor.hpp"

namespace lvc {

// Reverse-mode autodiff over a define-by-run graph. Nodes own their value;
// gradients are accumulated during backward() in reverse topological order.

struct Node;
using Var = std::shared_ptr<Node>;

struct Node {
  Tensor value;
  Tensor grad;
  bool requires_grad = false;
  std::vector<Var> inputs;
  // Reads this->grad and accumulates into the inputs' grads. May be empty
  // for leaves and constants.
  std::function<void(Node&)> backprop;

  void ensure_grad() {
    if (grad.empty()) grad = Tensor(value.shape());
  }
};

inline bool& grad_mode_flag() {
  thread_local bool enabled = true;
  return enabled;
}

inline bool grad_enabled() { return grad_mode_flag(); }

struct NoGradGuard {
  NoGradGuard() : prev_(grad_mode_flag()) { grad_mode_flag() = false; }
  ~NoGradGuard() { grad_mode_flag() = prev_; }

 private:
  bool prev_;
};

inline Var constant(Tensor t) {
  auto n = std::make_shared<Node>();
  n->value = std::move(t);
  return n;
}

inline Var parameter(Tensor t) {
  auto n = std::make_shared<Node>();
  n->value = std::move(t);
  n->requires_grad = true;
  return n;
}

inline Var make_op(Tensor value, std::vector<Var> inputs,
                   std::function<void(Node&)> backprop) {
  auto n = std::make_shared<Node>();
  n->value = std::move(value);
  if (grad_enabled()) {
    for (const auto& in : inputs) {
      if (in->requires_grad) {
        n->requires_grad = true;
        break;
      }
    }
    if (n->requires_grad) {
      n->inputs = std::move(inputs);
      n->backprop = std::move(backprop);
    }
  }
  return n;
}

inline void backward(const Var& root) {
  if (root->value.size() != 1)
    throw std::invalid_argument("backward: root must be scalar");
  // Topological order by iterative DFS.
  std::vector<Node*> order;
  std::unordered_set<Node*> visited;
  std::vector<std::pair<Node*, size_t>> stack;
  stack.emplace_back(root.get(), 0);
  visited.insert(root.get());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->inputs.size()) {
      Node* child = node->inputs[next++].get();
      if (child->requires_grad && !visited.count(child)) {
        visited.insert(child);
        stack.emplace_back(child, 0);
      }
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }
  root->ensure_grad();
  root->grad.fill(1.0);
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node* n = *it;
    if (n->backprop && !n->grad.empty()) n->backprop(*n);
  }
}

// ---------------------------------------------------------------------------
// Elementwise primitives
// ---------------------------------------------------------------------------

// Unary op from a value function and a derivative df(x, y).
template <class F, class DF>
Var unary_op(const Var& x, F f, DF df) {
  Tensor out(x->value.shape());
  const int64_t n = out.size();
  for (int64_t i = 0; i < n; ++i) out[i] = f(x->value[i]);
  return make_op(std::move(out), {x}, [df](Node& self) {
    Node& xin = *self.inputs[0];
    xin.ensure_grad();
    const int64_t n = self.value.size();
    for (int64_t i = 0; i < n; ++i)
      xin.grad[i] += self.grad[i] * df(xin.value[i], self.value[i]);
  });
}

inline Var add(const Var& a, const Var& b) {
  if (!a->value.same_shape(b->value))
    throw std::invalid_argument("add: shape mismatch");
  Tensor out = a->value;
  out.add_inplace(b->value);
  return make_op(std::move(out), {a, b}, [](Node& self) {
    for (int k = 0; k < 2; ++k) {
      Node& in = *self.inputs[k];
      in.ensure_grad();
      in.grad.add_inplace(self.grad);
    }
  });
}

inline Var sub(const Var& a, const Var& b) {
  if (!a->value.same_shape(b->value))
    throw std::invalid_argument("sub: shape mismatch");
  Tensor out(a->value.shape());
  for (int64_t i = 0; i < out.size(); ++i) out[i] = a->value[i] - b->value[i];
  return make_op(std::move(out), {a, b}, [](Node& self) {
    Node& an = *self.inputs[0];
    Node& bn = *self.inputs[1];
    an.ensure_grad();
    bn.ensure_grad();
    for (int64_t i = 0; i < self.value.size(); ++i) {
      an.grad[i] += self.grad[i];
      bn.grad[i] -= self.grad[i];
    }
  });
}

inline Var mul(const Var& a, const Var& b) {
  if (!a->value.same_shape(b->value))
    throw std::invalid_argument("mul: shape mismatch");
  Tensor out(a->value.shape());
  for (int64_t i = 0; i < out.size(); ++i) out[i] = a->value[i] * b->value[i];
  return make_op(std::move(out), {a, b}, [](Node& self) {
    Node& an = *self.inputs[0];
    Node& bn = *self.inputs[1];
    an.ensure_grad();
    bn.ensure_grad();
    for (int64_t i = 0; i < self.value.size(); ++i) {
      an.grad[i] += self.grad[i] * bn.value[i];
      bn.grad[i] += self.grad[i] * an.value[i];
    }
  });
}

inline Var divide(const Var& a, const Var& b) {
  if (!a->value.same_shape(b->value))
    throw std::invalid_argument("divide: shape mismatch");
  Tensor out(a->value.shape());
  for (int64_t i = 0; i < out.size(); ++i) out[i] = a->value[i] / b->value[i];
  return make_op(std::move(out), {a, b}, [](Node& self) {
    Node& an = *self.inputs[0];
    Node& bn = *self.inputs[1];
    an.ensure_grad();
    bn.ensure_grad();
    for (int64_t i = 0; i < self.value.size(); ++i) {
      double inv = 1.0 / bn.value[i];
      an.grad[i] += self.grad[i] * inv;
      bn.grad[i] -= self.grad[i] * an.value[i] * inv * inv;
    }
  });
}

inline Var scale(const Var& x, double c) {
  Tensor out(x->value.shape());
  for (int64_t i = 0; i < out.size(); ++i) out[i] = x->value[i] * c;
  return make_op(std::move(out), {x}, [c](Node& self) {
    Node& xin = *self.inputs[0];
    xin.ensure_grad();
    for (int64_t i = 0; i < self.value.size(); ++i)
      xin.grad[i] += self.grad[i] * c;
  });
}

inline Var add_scalar(const Var& x, double c) {
  return unary_op(
      x, [c](double v) { return v + c; },
      [](double, double) { return 1.0; });
}

inline Var neg(const Var& x) { return scale(x, -1.0); }

inline Var relu(const Var& x) {
  return unary_op(
      x, [](double v) { return v > 0 ? v : 0.0; },
      [](double xv, double) { return xv > 0 ? 1.0 : 0.0; });
}

inline Var abs_op(const Var& x) {
  return unary_op(
      x, [](double v) { return std::fabs(v); },
      [](double xv, double) { return xv > 0 ? 1.0 : (xv < 0 ? -1.0 : 0.0); });
}

inline Var square(const Var& x) {
  return unary_op(
      x, [](double v) { return v * v; },
      [](double xv, double) { return 2.0 * xv; });
}

inline Var sqrt_op(const Var& x) {
  return unary_op(
      x, [](double v) { return std::sqrt(v); },
      [](double, double yv) { return 0.5 / yv; });
}

inline Var rsqrt(const Var& x) {
  return unary_op(
      x, [](double v) { return 1.0 / std::sqrt(v); },
      [](double xv, double yv) { return -0.5 * yv / xv; });
}

inline Var exp_op(const Var& x) {
  return unary_op(
      x, [](double v) { return std::exp(v); },
      [](double, double yv) { return yv; });
}

inline Var log_op(const Var& x) {
  return unary_op(
      x, [](double v) { return std::log(v); },
      [](double xv, double) { return 1.0 / xv; });
}

inline Var sigmoid(const Var& x) {
  return unary_op(
      x, [](double v) { return 1.0 / (1.0 + std::exp(-v)); },
      [](double, double yv) { return yv * (1.0 - yv); });
}

inline Var softplus(const Var& x) {
  return unary_op(
      x,
      [](double v) { return v > 30 ? v : std::log1p(std::exp(v)); },
      [](double xv, double) { return 1.0 / (1.0 + std::exp(-xv)); });
}

inline double normal_cdf_value(double x) {
  return 0.5 * std::erfc(-x * M_SQRT1_2);
}

inline double normal_pdf_value(double x) {
  static const double kInvSqrt2Pi = 0.3989422804014327;
  return kInvSqrt2Pi * std::exp(-0.5 * x * x);
}

inline Var normal_cdf(const Var& x) {
  return unary_op(
      x, [](double v) { return normal_cdf_value(v); },
      [](double xv, double) { return normal_pdf_value(xv); });
}

// Floor with zero gradient below the floor.
inline Var clamp_min(const Var& x, double lo) {
  return unary_op(
      x, [lo](double v) { return v < lo ? lo : v; },
      [lo](double xv, double) { return xv < lo ? 0.0 : 1.0; });
}

inline Var clamp(const Var& x, double lo, double hi) {
  return unary_op(
      x, [lo, hi](double v) { return v < lo ? lo : (v > hi ? hi : v); },
      [lo, hi](double xv, double) {
        return (xv < lo || xv > hi) ? 0.0 : 1.0;
      });
}

// Round half away from zero; gradient passes through unchanged
// (straight-through estimator).
inline Var round_ste(const Var& x) {
  return unary_op(
      x, [](double v) { return std::round(v); },
      [](double, double) { return 1.0; });
}

// ---------------------------------------------------------------------------
// Reductions and broadcasts
// ---------------------------------------------------------------------------

inline Var sum(const Var& x) {
  Tensor out = Tensor::scalar(x->value.sum());
  return make_op(std::move(out), {x}, [](Node& self) {
    Node& xin = *self.inputs[0];
    xin.ensure_grad();
    double g = self.grad[0];
    for (int64_t i = 0; i < xin.value.size(); ++i) xin.grad[i] += g;
  });
}

inline Var mean(const Var& x) {
  return scale(sum(x), 1.0 / static_cast<double>(x->value.size()));
}

// b has shape [C]; x has shape [N,C,H,W].
inline Var bias_add(const Var& x, const Var& b) {
  const auto& s = x->value.shape();
  if (x->value.rank() != 4 || b->value.rank() != 1 || b->value.dim(0) != s[1])
    throw std::invalid_argument("bias_add: shape mismatch");
  Tensor out = x->value;
  const int N = s[0], C = s[1], HW = s[2] * s[3];
  for (int n = 0; n < N; ++n)
    for (int c = 0; c < C; ++c) {
      double bv = b->value[c];
      double* p = out.data() + (static_cast<int64_t>(n) * C + c) * HW;
      for (int i = 0; i < HW; ++i) p[i] += bv;
    }
  return make_op(std::move(out), {x, b}, [N, C, HW](Node& self) {
    Node& xin = *self.inputs[0];
    Node& bin = *self.inputs[1];
    xin.ensure_grad();
    bin.ensure_grad();
    xin.grad.add_inplace(self.grad);
    for (int n = 0; n < N; ++n)
      for (int c = 0; c < C; ++c) {
        const double* g =
            self.grad.data() + (static_cast<int64_t>(n) * C + c) * HW;
        double acc = 0;
        for (int i = 0; i < HW; ++i) acc += g[i];
        bin.grad[c] += acc;
      }
  });
}

// p has shape [C]; result is [N,C,H,W] with p replicated over n,h,w.
inline Var broadcast_channel(const Var& p, int n, int h, int w) {
  const int C = p->value.dim(0);
  Tensor out({n, C, h, w});
  const int HW = h * w;
  for (int b = 0; b < n; ++b)
    for (int c = 0; c < C; ++c) {
      double v = p->value[c];
      double* q = out.data() + (static_cast<int64_t>(b) * C + c) * HW;
      for (int i = 0; i < HW; ++i) q[i] = v;
    }
  return make_op(std::move(out), {p}, [n, C, HW](Node& self) {
    Node& pin = *self.inputs[0];
    pin.ensure_grad();
    for (int b = 0; b < n; ++b)
      for (int c = 0; c < C; ++c) {
        const double* g =
            self.grad.data() + (static_cast<int64_t>(b) * C + c) * HW;
        double acc = 0;
        for (int i = 0; i < HW; ++i) acc += g[i];
        pin.grad[c] += acc;
      }
  });
}

// ---------------------------------------------------------------------------
// Convolution machinery (im2col + GEMM)
// ---------------------------------------------------------------------------

using RowMat =
    Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapMat = Eigen::Map<RowMat>;
using ConstMapMat = Eigen::Map<const RowMat>;

struct ConvGeom {
  int ic, oc, k, stride, pad;
  int ih, iw, oh, ow;
};

inline int conv_out_dim(int in, int k, int stride, int pad) {
  return (in + 2 * pad - k) / stride + 1;
}

// cols is [ic*k*k, oh*ow] for a single image [ic, ih, iw].
inline void im2col(const double* img, const ConvGeom& g, double* cols) {
  const int khw = g.k * g.k;
  for (int c = 0; c < g.ic; ++c) {
    for (int kh = 0; kh < g.k; ++kh) {
      for (int kw = 0; kw < g.k; ++kw) {
        double* row =
            cols + (static_cast<int64_t>(c) * khw + kh * g.k + kw) *
                       (static_cast<int64_t>(g.oh) * g.ow);
        for (int oh = 0; oh < g.oh; ++oh) {
          int ihh = oh * g.stride + kh - g.pad;
          if (ihh < 0 || ihh >= g.ih) {
            for (int ow = 0; ow < g.ow; ++ow) row[oh * g.ow + ow] = 0.0;
            continue;
          }
          const double* src =
              img + (static_cast<int64_t>(c) * g.ih + ihh) * g.iw;
          for (int ow = 0; ow < g.ow; ++ow) {
            int iww = ow * g.stride + kw - g.pad;
            row[oh * g.ow + ow] =
                (iww >= 0 && iww < g.iw) ? src[iww] : 0.0;
          }
        }
      }
    }
  }
}

// Scatter-add of cols back to the image (adjoint of im2col).
inline void col2im_add(const double* cols, const ConvGeom& g, double* img) {
  const int khw = g.k * g.k;
  for (int c = 0; c < g.ic; ++c) {
    for (int kh = 0; kh < g.k; ++kh) {
      for (int kw = 0; kw < g.k; ++kw) {
        const double* row =
            cols + (static_cast<int64_t>(c) * khw + kh * g.k + kw) *
                       (static_cast<int64_t>(g.oh) * g.ow);
        for (int oh = 0; oh < g.oh; ++oh) {
          int ihh = oh * g.stride + kh - g.pad;
          if (ihh < 0 || ihh >= g.ih) continue;
          double* dst = img + (static_cast<int64_t>(c) * g.ih + ihh) * g.iw;
          for (int ow = 0; ow < g.ow; ++ow) {
            int iww = ow * g.stride + kw - g.pad;
            if (iww >= 0 && iww < g.iw) dst[iww] += row[oh * g.ow + ow];
          }
        }
      }
    }
  }
}

// Plain-tensor convolution forward: x [N,IC,H,W], w [OC,IC,K,K] -> [N,OC,OH,OW]
inline Tensor conv2d_forward(const Tensor& x, const Tensor& w, int stride,
                             int pad) {
  ConvGeom g;
  g.ic = x.dim(1);
  g.oc = w.dim(0);
  g.k = w.dim(2);
  g.stride = stride;
  g.pad = pad;
  g.ih = x.dim(2);
  g.iw = x.dim(3);
  g.oh = conv_out_dim(g.ih, g.k, stride, pad);
  g.ow = conv_out_dim(g.iw, g.k, stride, pad);
  if (w.dim(1) != g.ic)
    throw std::invalid_argument("conv2d: channel mismatch");
  const int N = x.dim(0);
  const int64_t ckk = static_cast<int64_t>(g.ic) * g.k * g.k;
  const int64_t ohw = static_cast<int64_t>(g.oh) * g.ow;
  Tensor out({N, g.oc, g.oh, g.ow});
  std::vector<double> cols(static_cast<size_t>(ckk * ohw));
  ConstMapMat W(w.data(), g.oc, ckk);
  for (int n = 0; n < N; ++n) {
    im2col(x.data() + x.idx4(n, 0, 0, 0), g, cols.data());
    ConstMapMat C(cols.data(), ckk, ohw);
    MapMat O(out.data() + out.idx4(n, 0, 0, 0), g.oc, ohw);
    O.noalias() = W * C;
  }
  return out;
}

// Gradient wrt input: gy [N,OC,OH,OW] -> gx [N,IC,H,W]
inline Tensor conv2d_dgrad(const Tensor& gy, const Tensor& w,
                           const std::vector<int>& xshape, int stride,
                           int pad) {
  ConvGeom g;
  g.ic = xshape[1];
  g.oc = w.dim(0);
  g.k = w.dim(2);
  g.stride = stride;
  g.pad = pad;
  g.ih = xshape[2];
  g.iw = xshape[3];
  g.oh = gy.dim(2);
  g.ow = gy.dim(3);
  const int N = xshape[0];
  const int64_t ckk = static_cast<int64_t>(g.ic) * g.k * g.k;
  const int64_t ohw = static_cast<int64_t>(g.oh) * g.ow;
  Tensor gx(xshape);
  std::vector<double> cols(static_cast<size_t>(ckk * ohw));
  ConstMapMat W(w.data(), g.oc, ckk);
  for (int n = 0; n < N; ++n) {
    ConstMapMat GY(gy.data() + gy.idx4(n, 0, 0, 0), g.oc, ohw);
    MapMat C(cols.data(), ckk, ohw);
    C.noalias() = W.transpose() * GY;
    col2im_add(cols.data(), g, gx.data() + gx.idx4(n, 0, 0, 0));
  }
  return gx;
}

// Gradient wrt weights.
inline Tensor conv2d_wgrad(const Tensor& gy, const Tensor& x,
                           const std::vector<int>& wshape, int stride,
                           int pad) {
  ConvGeom g;
  g.ic = x.dim(1);
  g.oc = wshape[0];
  g.k = wshape[2];
  g.stride = stride;
  g.pad = pad;
  g.ih = x.dim(2);
  g.iw = x.dim(3);
  g.oh = gy.dim(2);
  g.ow = gy.dim(3);
  const int N = x.dim(0);
  const int64_t ckk = static_cast<int64_t>(g.ic) * g.k * g.k;
  const int64_t ohw = static_cast<int64_t>(g.oh) * g.ow;
  Tensor gw(wshape);
  std::vector<double> cols(static_cast<size_t>(ckk * ohw));
  MapMat GW(gw.data(), g.oc, ckk);
  for (int n = 0; n < N; ++n) {
    im2col(x.data() + x.idx4(n, 0, 0, 0), g, cols.data());
    ConstMapMat C(cols.data(), ckk, ohw);
    ConstMapMat GY(gy.data() + gy.idx4(n, 0, 0, 0), g.oc, ohw);
    GW.noalias() += GY * C.transpose();
  }
  return gw;
}

inline Var conv2d(const Var& x, const Var& w, const Var& b, int stride,
                  int pad) {
  Tensor out = conv2d_forward(x->value, w->value, stride, pad);
  auto xshape = x->value.shape();
  auto wshape = w->value.shape();
  Var conv = make_op(std::move(out), {x, w},
                     [xshape, wshape, stride, pad](Node& self) {
                       Node& xin = *self.inputs[0];
                       Node& win = *self.inputs[1];
                       xin.ensure_grad();
                       win.ensure_grad();
                       Tensor gx = conv2d_dgrad(self.grad, win.value, xshape,
                                                stride, pad);
                       xin.grad.add_inplace(gx);
                       Tensor gw = conv2d_wgrad(self.grad, xin.value, wshape,
                                                stride, pad);
                       win.grad.add_inplace(gw);
                     });
  return b ? bias_add(conv, b) : conv;
}

// Transposed convolution: forward is the adjoint of conv2d with the same
// (stride, pad) on the output geometry. out dims = stride*(in-1)+k-2*pad+outpad.
inline Var conv_transpose2d(const Var& x, const Var& w, const Var& b,
                            int stride, int pad, int outpad) {
  const auto& xs = x->value.shape();
  const int N = xs[0];
  const int ic = xs[1];  // channels of x == "oc" of the underlying conv
  if (w->value.dim(0) != ic)
    throw std::invalid_argument("conv_transpose2d: channel mismatch");
  const int oc = w->value.dim(1);
  const int k = w->value.dim(2);
  const int oh = stride * (xs[2] - 1) + k - 2 * pad + outpad;
  const int ow = stride * (xs[3] - 1) + k - 2 * pad + outpad;
  std::vector<int> oshape = {N, oc, oh, ow};
  Tensor out = conv2d_dgrad(x->value, w->value, oshape, stride, pad);
  auto wshape = w->value.shape();
  auto xshape = xs;
  Var deconv = make_op(
      std::move(out), {x, w}, [xshape, wshape, stride, pad](Node& self) {
        Node& xin = *self.inputs[0];
        Node& win = *self.inputs[1];
        xin.ensure_grad();
        win.ensure_grad();
        Tensor gx = conv2d_forward(self.grad, win.value, stride, pad);
        xin.grad.add_inplace(gx);
        Tensor gw = conv2d_wgrad(xin.value, self.grad, wshape, stride, pad);
        win.grad.add_inplace(gw);
      });
  return b ? bias_add(deconv, b) : deconv;
}

// ---------------------------------------------------------------------------
// Batch normalization
// ---------------------------------------------------------------------------

// Training-mode batch norm over N,H,W per channel. Gamma/beta are [C].
// Running statistics are owned by the layer wrapper.
inline Var batchnorm2d_train(const Var& x, const Var& gamma, const Var& beta,
                             double eps, Tensor* save_mean = nullptr,
                             Tensor* save_var = nullptr) {
  const auto& s = x->value.shape();
  const int N = s[0], C = s[1], H = s[2], W = s[3];
  const int64_t m = static_cast<int64_t>(N) * H * W;
  Tensor mu({C}), var({C});
  for (int c = 0; c < C; ++c) {
    double acc = 0;
    for (int n = 0; n < N; ++n) {
      const double* p = x->value.data() + x->value.idx4(n, c, 0, 0);
      for (int i = 0; i < H * W; ++i) acc += p[i];
    }
    mu[c] = acc / static_cast<double>(m);
  }
  for (int c = 0; c < C; ++c) {
    double acc = 0;
    for (int n = 0; n < N; ++n) {
      const double* p = x->value.data() + x->value.idx4(n, c, 0, 0);
      for (int i = 0; i < H * W; ++i) {
        double d = p[i] - mu[c];
        acc += d * d;
      }
    }
    var[c] = acc / static_cast<double>(m);
  }
  if (save_mean) *save_mean = mu;
  if (save_var) *save_var = var;
  Tensor invstd({C});
  for (int c = 0; c < C; ++c) invstd[c] = 1.0 / std::sqrt(var[c] + eps);
  Tensor xhat(x->value.shape());
  Tensor out(x->value.shape());
  for (int n = 0; n < N; ++n)
    for (int c = 0; c < C; ++c) {
      const double* p = x->value.data() + x->value.idx4(n, c, 0, 0);
      double* xh = xhat.data() + xhat.idx4(n, c, 0, 0);
      double* o = out.data() + out.idx4(n, c, 0, 0);
      double g = gamma->value[c], b = beta->value[c];
      for (int i = 0; i < H * W; ++i) {
        xh[i] = (p[i] - mu[c]) * invstd[c];
        o[i] = g * xh[i] + b;
      }
    }
  return make_op(
      std::move(out), {x, gamma, beta},
      [N, C, H, W, m, xhat = std::move(xhat),
       invstd = std::move(invstd)](Node& self) {
        Node& xin = *self.inputs[0];
        Node& gn = *self.inputs[1];
        Node& bn = *self.inputs[2];
        xin.ensure_grad();
        gn.ensure_grad();
        bn.ensure_grad();
        const int HW = H * W;
        for (int c = 0; c < C; ++c) {
          double sum_gy = 0, sum_gy_xhat = 0;
          for (int n = 0; n < N; ++n) {
            const double* gy = self.grad.data() + self.grad.idx4(n, c, 0, 0);
            const double* xh = xhat.data() + xhat.idx4(n, c, 0, 0);
            for (int i = 0; i < HW; ++i) {
              sum_gy += gy[i];
              sum_gy_xhat += gy[i] * xh[i];
            }
          }
          gn.grad[c] += sum_gy_xhat;
          bn.grad[c] += sum_gy;
          double g = gn.value[c];
          double inv_m = 1.0 / static_cast<double>(m);
          for (int n = 0; n < N; ++n) {
            const double* gy = self.grad.data() + self.grad.idx4(n, c, 0, 0);
            const double* xh = xhat.data() + xhat.idx4(n, c, 0, 0);
            double* gx = xin.grad.data() + xin.grad.idx4(n, c, 0, 0);
            for (int i = 0; i < HW; ++i) {
              gx[i] += g * invstd[c] *
                       (gy[i] - inv_m * sum_gy - xh[i] * inv_m * sum_gy_xhat);
            }
          }
        }
      });
}

// Eval-mode batch norm with fixed statistics.
inline Var batchnorm2d_eval(const Var& x, const Var& gamma, const Var& beta,
                            const Tensor& running_mean,
                            const Tensor& running_var, double eps) {
  const int C = x->value.dim(1);
  Tensor scale_t({C}), shift_t({C});
  // out = gamma * (x - mean) * invstd + beta, folded into per-channel affine.
  // Built from broadcast ops so gradients flow to gamma/beta if needed.
  const int N = x->value.dim(0), H = x->value.dim(2), W = x->value.dim(3);
  Tensor invstd({C}), negmean({C});
  for (int c = 0; c < C; ++c) {
    invstd[c] = 1.0 / std::sqrt(running_var[c] + eps);
    negmean[c] = -running_mean[c];
  }
  Var xm = bias_add(x, constant(negmean));
  Var sc = mul(gamma, constant(invstd));
  Var scaled = mul(xm, broadcast_channel(sc, N, H, W));
  return add(scaled, broadcast_channel(beta, N, H, W));
}

// ---------------------------------------------------------------------------
// Structural ops
// ---------------------------------------------------------------------------

inline Var concat_channels(const Var& a, const Var& b) {
  const auto& sa = a->value.shape();
  const auto& sb = b->value.shape();
  if (sa[0] != sb[0] || sa[2] != sb[2] || sa[3] != sb[3])
    throw std::invalid_argument("concat_channels: shape mismatch");
  const int N = sa[0], Ca = sa[1], Cb = sb[1], H = sa[2], W = sa[3];
  Tensor out({N, Ca + Cb, H, W});
  const int64_t hw = static_cast<int64_t>(H) * W;
  for (int n = 0; n < N; ++n) {
    std::copy_n(a->value.data() + a->value.idx4(n, 0, 0, 0), Ca * hw,
                out.data() + out.idx4(n, 0, 0, 0));
    std::copy_n(b->value.data() + b->value.idx4(n, 0, 0, 0), Cb * hw,
                out.data() + out.idx4(n, Ca, 0, 0));
  }
  return make_op(std::move(out), {a, b}, [N, Ca, Cb, hw](Node& self) {
    Node& an = *self.inputs[0];
    Node& bn = *self.inputs[1];
    an.ensure_grad();
    bn.ensure_grad();
    for (int n = 0; n < N; ++n) {
      const double* g = self.grad.data() + self.grad.idx4(n, 0, 0, 0);
      double* ga = an.grad.data() + an.grad.idx4(n, 0, 0, 0);
      for (int64_t i = 0; i < Ca * hw; ++i) ga[i] += g[i];
      const double* g2 = self.grad.data() + self.grad.idx4(n, Ca, 0, 0);
      double* gb = bn.grad.data() + bn.grad.idx4(n, 0, 0, 0);
      for (int64_t i = 0; i < Cb * hw; ++i) gb[i] += g2[i];
    }
  });
}

// Bilinear (or nearest) resize to [oh, ow]; a linear map, so the backward
// pass scatters with the same weights.
struct ResizeTap {
  int i0, i1;
  double w0, w1;
};

inline std::vector<ResizeTap> resize_taps(int in, int out, bool nearest) {
  std::vector<ResizeTap> taps(static_cast<size_t>(out));
  double r = static_cast<double>(in) / out;
  for (int o = 0; o < out; ++o) {
    double src = (o + 0.5) * r - 0.5;
    if (nearest) {
      int i = std::min(in - 1, std::max(0, static_cast<int>(std::floor(
                                               (o + 0.5) * r))));
      taps[o] = {i, i, 1.0, 0.0};
    } else {
      double f = std::floor(src);
      int i0 = static_cast<int>(f);
      double t = src - f;
      int i1 = i0 + 1;
      i0 = std::min(in - 1, std::max(0, i0));
      i1 = std::min(in - 1, std::max(0, i1));
      taps[o] = {i0, i1, 1.0 - t, t};
    }
  }
  return taps;
}

inline Var resize2d(const Var& x, int oh, int ow, bool nearest = false) {
  const auto& s = x->value.shape();
  const int N = s[0], C = s[1], H = s[2], W = s[3];
  auto th = resize_taps(H, oh, nearest);
  auto tw = resize_taps(W, ow, nearest);
  Tensor out({N, C, oh, ow});
  for (int n = 0; n < N; ++n)
    for (int c = 0; c < C; ++c) {
      const double* p = x->value.data() + x->value.idx4(n, c, 0, 0);
      double* q = out.data() + out.idx4(n, c, 0, 0);
      for (int y = 0; y < oh; ++y)
        for (int xw = 0; xw < ow; ++xw) {
          const auto& a = th[y];
          const auto& b = tw[xw];
          q[y * ow + xw] = a.w0 * (b.w0 * p[a.i0 * W + b.i0] +
                                   b.w1 * p[a.i0 * W + b.i1]) +
                           a.w1 * (b.w0 * p[a.i1 * W + b.i0] +
                                   b.w1 * p[a.i1 * W + b.i1]);
        }
    }
  return make_op(std::move(out), {x},
                 [N, C, H, W, oh, ow, th, tw](Node& self) {
                   Node& xin = *self.inputs[0];
                   xin.ensure_grad();
                   for (int n = 0; n < N; ++n)
                     for (int c = 0; c < C; ++c) {
                       const double* g =
                           self.grad.data() + self.grad.idx4(n, c, 0, 0);
                       double* gx =
                           xin.grad.data() + xin.grad.idx4(n, c, 0, 0);
                       for (int y = 0; y < oh; ++y)
                         for (int xw = 0; xw < ow; ++xw) {
                           const auto& a = th[y];
                           const auto& b = tw[xw];
                           double gv = g[y * ow + xw];
                           gx[a.i0 * W + b.i0] += gv * a.w0 * b.w0;
                           gx[a.i0 * W + b.i1] += gv * a.w0 * b.w1;
                           gx[a.i1 * W + b.i0] += gv * a.w1 * b.w0;
                           gx[a.i1 * W + b.i1] += gv * a.w1 * b.w1;
                         }
                     }
                 });
}

inline Var crop2d(const Var& x, int top, int left, int h, int w) {
  const auto& s = x->value.shape();
  const int N = s[0], C = s[1], H = s[2], W = s[3];
  if (top < 0 || left < 0 || top + h > H || left + w > W)
    throw std::invalid_argument("crop2d: window out of bounds");
  Tensor out({N, C, h, w});
  for (int n = 0; n < N; ++n)
    for (int c = 0; c < C; ++c)
      for (int y = 0; y < h; ++y)
        std::copy_n(
            x->value.data() + x->value.idx4(n, c, top + y, left), w,
            out.data() + out.idx4(n, c, y, 0));
  return make_op(std::move(out), {x}, [N, C, h, w, top, left](Node& self) {
    Node& xin = *self.inputs[0];
    xin.ensure_grad();
    for (int n = 0; n < N; ++n)
      for (int c = 0; c < C; ++c)
        for (int y = 0; y < h; ++y) {
          const double* g = self.grad.data() + self.grad.idx4(n, c, y, 0);
          double* gx =
              xin.grad.data() + xin.grad.idx4(n, c, top + y, left);
          for (int i = 0; i < w; ++i) gx[i] += g[i];
        }
  });
}

inline Var hflip(const Var& x) {
  const auto& s = x->value.shape();
  const int N = s[0], C = s[1], H = s[2], W = s[3];
  Tensor out(s);
  for (int n = 0; n < N; ++n)
    for (int c = 0; c < C; ++c)
      for (int y = 0; y < H; ++y) {
        const double* p = x->value.data() + x->value.idx4(n, c, y, 0);
        double* q = out.data() + out.idx4(n, c, y, 0);
        for (int i = 0; i < W; ++i) q[i] = p[W - 1 - i];
      }
  return make_op(std::move(out), {x}, [N, C, H, W](Node& self) {
    Node& xin = *self.inputs[0];
    xin.ensure_grad();
    for (int n = 0; n < N; ++n)
      for (int c = 0; c < C; ++c)
        for (int y = 0; y < H; ++y) {
          const double* g = self.grad.data() + self.grad.idx4(n, c, y, 0);
          double* gx = xin.grad.data() + xin.grad.idx4(n, c, y, 0);
          for (int i = 0; i < W; ++i) gx[W - 1 - i] += g[i];
        }
  });
}

inline Var global_avg_pool(const Var& x) {
  const auto& s = x->value.shape();
  const int N = s[0], C = s[1], HW = s[2] * s[3];
  Tensor out({N, C});
  for (int n = 0; n < N; ++n)
    for (int c = 0; c < C; ++c) {
      const double* p =
          x->value.data() + (static_cast<int64_t>(n) * C + c) * HW;
      double acc = 0;
      for (int i = 0; i < HW; ++i) acc += p[i];
      out[static_cast<int64_t>(n) * C + c] = acc / HW;
    }
  return make_op(std::move(out), {x}, [N, C, HW](Node& self) {
    Node& xin = *self.inputs[0];
    xin.ensure_grad();
    for (int n = 0; n < N; ++n)
      for (int c = 0; c < C; ++c) {
        double g = self.grad[static_cast<int64_t>(n) * C + c] / HW;
        double* gx = xin.grad.data() + (static_cast<int64_t>(n) * C + c) * HW;
        for (int i = 0; i < HW; ++i) gx[i] += g;
      }
  });
}

// x [N,D] * w [D,K] + b [K] -> [N,K]
inline Var dense(const Var& x, const Var& w, const Var& b) {
  const int N = x->value.dim(0), D = x->value.dim(1);
  const int K = w->value.dim(1);
  if (w->value.dim(0) != D || b->value.dim(0) != K)
    throw std::invalid_argument("dense: shape mismatch");
  Tensor out({N, K});
  ConstMapMat X(x->value.data(), N, D);
  ConstMapMat W(w->value.data(), D, K);
  MapMat O(out.data(), N, K);
  O.noalias() = X * W;
  for (int n = 0; n < N; ++n)
    for (int k = 0; k < K; ++k) out[static_cast<int64_t>(n) * K + k] +=
        b->value[k];
  return make_op(std::move(out), {x, w, b}, [N, D, K](Node& self) {
    Node& xin = *self.inputs[0];
    Node& win = *self.inputs[1];
    Node& bin = *self.inputs[2];
    xin.ensure_grad();
    win.ensure_grad();
    bin.ensure_grad();
    ConstMapMat GY(self.grad.data(), N, K);
    ConstMapMat X(xin.value.data(), N, D);
    ConstMapMat W(win.value.data(), D, K);
    MapMat GX(xin.grad.data(), N, D);
    MapMat GW(win.grad.data(), D, K);
    GX.noalias() += GY * W.transpose();
    GW.noalias() += X.transpose() * GY;
    for (int n = 0; n < N; ++n)
      for (int k = 0; k < K; ++k)
        bin.grad[k] += self.grad[static_cast<int64_t>(n) * K + k];
  });
}

// Mean cross-entropy of softmax(logits) against integer labels.
inline Var softmax_cross_entropy(const Var& logits,
                                 const std::vector<int>& labels) {
  const int N = logits->value.dim(0), K = logits->value.dim(1);
  if (static_cast<int>(labels.size()) != N)
    throw std::invalid_argument("softmax_cross_entropy: label count");
  Tensor probs({N, K});
  double loss = 0;
  for (int n = 0; n < N; ++n) {
    const double* l = logits->value.data() + static_cast<int64_t>(n) * K;
    double mx = l[0];
    for (int k = 1; k < K; ++k) mx = std::max(mx, l[k]);
    double z = 0;
    for (int k = 0; k < K; ++k) z += std::exp(l[k] - mx);
    double logz = std::log(z) + mx;
    for (int k = 0; k < K; ++k)
      probs[static_cast<int64_t>(n) * K + k] = std::exp(l[k] - logz);
    loss -= (l[labels[n]] - logz);
  }
  loss /= N;
  return make_op(Tensor::scalar(loss), {logits},
                 [N, K, labels, probs = std::move(probs)](Node& self) {
                   Node& lin = *self.inputs[0];
                   lin.ensure_grad();
                   double g = self.grad[0] / N;
                   for (int n = 0; n < N; ++n) {
                     double* gl = lin.grad.data() + static_cast<int64_t>(n) * K;
                     const double* p = probs.data() + static_cast<int64_t>(n) * K;
                     for (int k = 0; k < K; ++k) gl[k] += g * p[k];
                     gl[labels[n]] -= g;
                   }
                 });
}

inline Tensor softmax(const Tensor& logits) {
  const int N = logits.dim(0), K = logits.dim(1);
  Tensor out({N, K});
  for (int n = 0; n < N; ++n) {
    const double* l = logits.data() + static_cast<int64_t>(n) * K;
    double* o = out.data() + static_cast<int64_t>(n) * K;
    double mx = l[0];
    for (int k = 1; k < K; ++k) mx = std::max(mx, l[k]);
    double z = 0;
    for (int k = 0; k < K; ++k) z += std::exp(l[k] - mx);
    for (int k = 0; k < K; ++k) o[k] = std::exp(l[k] - mx) / z;
  }
  return out;
}

}  // namespace lvc

#endif  // LATENTVISION_AUTODIFF_HPP
