#pragma once

#include <cmath>
#include <cstddef>
#include <stdexcept>
#include <string>
#include <vector>

#include "nbeam/cnn/tensor.hpp"

namespace nbeam::cnn {

namespace detail {

inline void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw std::invalid_argument(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                                shape_str(b.shape()));
  }
}

inline double sigmoid(double x) {
  if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

// Splits a shape around `axis` into (outer, extent, inner) element counts.
struct AxisSplit {
  std::size_t outer = 1, extent = 1, inner = 1;
};

inline AxisSplit split_at(const Shape& s, std::size_t axis) {
  if (axis >= s.size()) throw std::invalid_argument("axis " + std::to_string(axis) + " out of range for " + shape_str(s));
  AxisSplit r;
  for (std::size_t i = 0; i < axis; ++i) r.outer *= s[i];
  r.extent = s[axis];
  for (std::size_t i = axis + 1; i < s.size(); ++i) r.inner *= s[i];
  return r;
}

}  // namespace detail

// ---------------------------------------------------------------- elementwise

inline Tensor add(const Tensor& a, const Tensor& b) {
  detail::require_same_shape(a, b, "add");
  std::vector<double> v(a.size());
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = a.values()[i] + b.values()[i];
  return make_result("add", a.shape(), std::move(v), {a, b}, [](Node& self) {
    for (std::size_t k = 0; k < 2; ++k) {
      if (Node* p = grad_target(self, k)) {
        for (std::size_t i = 0; i < self.grad.size(); ++i) p->grad[i] += self.grad[i];
      }
    }
  });
}

inline Tensor sub(const Tensor& a, const Tensor& b) {
  detail::require_same_shape(a, b, "sub");
  std::vector<double> v(a.size());
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = a.values()[i] - b.values()[i];
  return make_result("sub", a.shape(), std::move(v), {a, b}, [](Node& self) {
    if (Node* p = grad_target(self, 0)) {
      for (std::size_t i = 0; i < self.grad.size(); ++i) p->grad[i] += self.grad[i];
    }
    if (Node* p = grad_target(self, 1)) {
      for (std::size_t i = 0; i < self.grad.size(); ++i) p->grad[i] -= self.grad[i];
    }
  });
}

inline Tensor mul(const Tensor& a, const Tensor& b) {
  detail::require_same_shape(a, b, "mul");
  std::vector<double> v(a.size());
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = a.values()[i] * b.values()[i];
  return make_result("mul", a.shape(), std::move(v), {a, b}, [](Node& self) {
    const auto& av = self.parents[0]->value;
    const auto& bv = self.parents[1]->value;
    if (Node* p = grad_target(self, 0)) {
      for (std::size_t i = 0; i < self.grad.size(); ++i) p->grad[i] += self.grad[i] * bv[i];
    }
    if (Node* p = grad_target(self, 1)) {
      for (std::size_t i = 0; i < self.grad.size(); ++i) p->grad[i] += self.grad[i] * av[i];
    }
  });
}

inline Tensor scale(const Tensor& a, double s) {
  std::vector<double> v(a.values().begin(), a.values().end());
  for (double& x : v) x *= s;
  return make_result("scale", a.shape(), std::move(v), {a}, [s](Node& self) {
    if (Node* p = grad_target(self, 0)) {
      for (std::size_t i = 0; i < self.grad.size(); ++i) p->grad[i] += s * self.grad[i];
    }
  });
}

inline Tensor neg(const Tensor& a) { return scale(a, -1.0); }

inline Tensor sigmoid(const Tensor& a) {
  std::vector<double> v(a.size());
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = detail::sigmoid(a.values()[i]);
  return make_result("sigmoid", a.shape(), std::move(v), {a}, [](Node& self) {
    if (Node* p = grad_target(self, 0)) {
      for (std::size_t i = 0; i < self.grad.size(); ++i) {
        const double y = self.value[i];
        p->grad[i] += self.grad[i] * y * (1.0 - y);
      }
    }
  });
}

inline Tensor tanh(const Tensor& a) {
  std::vector<double> v(a.size());
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = std::tanh(a.values()[i]);
  return make_result("tanh", a.shape(), std::move(v), {a}, [](Node& self) {
    if (Node* p = grad_target(self, 0)) {
      for (std::size_t i = 0; i < self.grad.size(); ++i) {
        const double y = self.value[i];
        p->grad[i] += self.grad[i] * (1.0 - y * y);
      }
    }
  });
}

/// |re + j im| elementwise; the subgradient at the origin is taken as 0.
inline Tensor magnitude(const Tensor& re, const Tensor& im) {
  detail::require_same_shape(re, im, "magnitude");
  std::vector<double> v(re.size());
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = std::hypot(re.values()[i], im.values()[i]);
  return make_result("magnitude", re.shape(), std::move(v), {re, im}, [](Node& self) {
    for (std::size_t k = 0; k < 2; ++k) {
      if (Node* p = grad_target(self, k)) {
        const auto& src = self.parents[k]->value;
        for (std::size_t i = 0; i < self.grad.size(); ++i) {
          if (self.value[i] > 0.0) p->grad[i] += self.grad[i] * src[i] / self.value[i];
        }
      }
    }
  });
}

// ---------------------------------------------------------------- reductions

inline Tensor sum(const Tensor& a) {
  double acc = 0.0;
  for (double x : a.values()) acc += x;
  return make_result("sum", {}, {acc}, {a}, [](Node& self) {
    if (Node* p = grad_target(self, 0)) {
      for (double& g : p->grad) g += self.grad[0];
    }
  });
}

inline Tensor mean(const Tensor& a) {
  const double n = static_cast<double>(a.size());
  double acc = 0.0;
  for (double x : a.values()) acc += x;
  return make_result("mean", {}, {acc / n}, {a}, [n](Node& self) {
    if (Node* p = grad_target(self, 0)) {
      for (double& g : p->grad) g += self.grad[0] / n;
    }
  });
}

/// Sum over one axis, which is removed from the shape.
inline Tensor sum_axis(const Tensor& a, std::size_t axis, double weight = 1.0) {
  const auto sp = detail::split_at(a.shape(), axis);
  Shape out_shape = a.shape();
  out_shape.erase(out_shape.begin() + static_cast<std::ptrdiff_t>(axis));
  std::vector<double> v(sp.outer * sp.inner, 0.0);
  const auto src = a.values();
  for (std::size_t o = 0; o < sp.outer; ++o) {
    for (std::size_t e = 0; e < sp.extent; ++e) {
      const double* row = src.data() + (o * sp.extent + e) * sp.inner;
      double* dst = v.data() + o * sp.inner;
      for (std::size_t i = 0; i < sp.inner; ++i) dst[i] += weight * row[i];
    }
  }
  return make_result("sum_axis", std::move(out_shape), std::move(v), {a}, [sp, weight](Node& self) {
    if (Node* p = grad_target(self, 0)) {
      for (std::size_t o = 0; o < sp.outer; ++o) {
        for (std::size_t e = 0; e < sp.extent; ++e) {
          double* row = p->grad.data() + (o * sp.extent + e) * sp.inner;
          const double* g = self.grad.data() + o * sp.inner;
          for (std::size_t i = 0; i < sp.inner; ++i) row[i] += weight * g[i];
        }
      }
    }
  });
}

inline Tensor mean_axis(const Tensor& a, std::size_t axis) {
  return sum_axis(a, axis, 1.0 / static_cast<double>(a.shape().at(axis)));
}

// ---------------------------------------------------------------- shape ops

inline Tensor reshape(const Tensor& a, Shape shape) {
  if (numel(shape) != a.size()) {
    throw std::invalid_argument("reshape: " + shape_str(a.shape()) + " -> " + shape_str(shape));
  }
  std::vector<double> v(a.values().begin(), a.values().end());
  return make_result("reshape", std::move(shape), std::move(v), {a}, [](Node& self) {
    if (Node* p = grad_target(self, 0)) {
      for (std::size_t i = 0; i < self.grad.size(); ++i) p->grad[i] += self.grad[i];
    }
  });
}

/// Axis permutation: output axis i is input axis perm[i].
inline Tensor permute(const Tensor& a, const std::vector<std::size_t>& perm) {
  const Shape& in = a.shape();
  if (perm.size() != in.size()) throw std::invalid_argument("permute: rank mismatch");
  const std::size_t rank = in.size();
  std::vector<std::size_t> in_strides(rank, 1);
  for (std::size_t i = rank; i-- > 1;) in_strides[i - 1] = in_strides[i] * in[i];
  Shape out(rank);
  std::vector<std::size_t> src_stride(rank);
  for (std::size_t i = 0; i < rank; ++i) {
    out[i] = in.at(perm[i]);
    src_stride[i] = in_strides[perm[i]];
  }
  // Flat source offset for every output element.
  std::vector<std::size_t> index(a.size());
  std::vector<std::size_t> counter(rank, 0);
  for (std::size_t flat = 0; flat < index.size(); ++flat) {
    std::size_t off = 0;
    for (std::size_t i = 0; i < rank; ++i) off += counter[i] * src_stride[i];
    index[flat] = off;
    for (std::size_t i = rank; i-- > 0;) {
      if (++counter[i] < out[i]) break;
      counter[i] = 0;
    }
  }
  std::vector<double> v(a.size());
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = a.values()[index[i]];
  return make_result("permute", std::move(out), std::move(v), {a}, [index = std::move(index)](Node& self) {
    if (Node* p = grad_target(self, 0)) {
      for (std::size_t i = 0; i < self.grad.size(); ++i) p->grad[index[i]] += self.grad[i];
    }
  });
}

/// Elements [begin, end) along `axis`.
inline Tensor slice(const Tensor& a, std::size_t axis, std::size_t begin, std::size_t end) {
  const auto sp = detail::split_at(a.shape(), axis);
  if (begin >= end || end > sp.extent) throw std::invalid_argument("slice: bad range on " + shape_str(a.shape()));
  Shape out_shape = a.shape();
  out_shape[axis] = end - begin;
  const std::size_t len = end - begin;
  std::vector<double> v(sp.outer * len * sp.inner);
  const auto src = a.values();
  for (std::size_t o = 0; o < sp.outer; ++o) {
    std::copy_n(src.data() + (o * sp.extent + begin) * sp.inner, len * sp.inner, v.data() + o * len * sp.inner);
  }
  return make_result("slice", std::move(out_shape), std::move(v), {a}, [sp, begin, len](Node& self) {
    if (Node* p = grad_target(self, 0)) {
      for (std::size_t o = 0; o < sp.outer; ++o) {
        double* dst = p->grad.data() + (o * sp.extent + begin) * sp.inner;
        const double* g = self.grad.data() + o * len * sp.inner;
        for (std::size_t i = 0; i < len * sp.inner; ++i) dst[i] += g[i];
      }
    }
  });
}

/// Concatenation along `axis`; all other extents must agree.
inline Tensor concat(const std::vector<Tensor>& parts, std::size_t axis) {
  if (parts.empty()) throw std::invalid_argument("concat: no inputs");
  Shape out_shape = parts[0].shape();
  const auto base = detail::split_at(out_shape, axis);
  std::size_t total = 0;
  std::vector<std::size_t> extents;
  for (const auto& t : parts) {
    Shape s = t.shape();
    if (s.size() != out_shape.size()) throw std::invalid_argument("concat: rank mismatch");
    const auto sp = detail::split_at(s, axis);
    if (sp.outer != base.outer || sp.inner != base.inner) {
      throw std::invalid_argument("concat: incompatible " + shape_str(s) + " with " + shape_str(out_shape));
    }
    extents.push_back(sp.extent);
    total += sp.extent;
  }
  out_shape[axis] = total;
  std::vector<double> v(base.outer * total * base.inner);
  std::size_t offset = 0;
  for (std::size_t k = 0; k < parts.size(); ++k) {
    const auto src = parts[k].values();
    for (std::size_t o = 0; o < base.outer; ++o) {
      std::copy_n(src.data() + o * extents[k] * base.inner, extents[k] * base.inner,
                  v.data() + (o * total + offset) * base.inner);
    }
    offset += extents[k];
  }
  return make_result("concat", std::move(out_shape), std::move(v), parts,
                     [base, total, extents](Node& self) {
                       std::size_t off = 0;
                       for (std::size_t k = 0; k < extents.size(); ++k) {
                         if (Node* p = grad_target(self, k)) {
                           for (std::size_t o = 0; o < base.outer; ++o) {
                             const double* g = self.grad.data() + (o * total + off) * base.inner;
                             double* dst = p->grad.data() + o * extents[k] * base.inner;
                             for (std::size_t i = 0; i < extents[k] * base.inner; ++i) dst[i] += g[i];
                           }
                         }
                         off += extents[k];
                       }
                     });
}

// ---------------------------------------------------------------- convolution

// Kernel/stride/padding of a 2-d convolution over [B, C, H, W] tensors.
// Padding is given per side so causal (past-only) padding can be expressed.
struct ConvGeometry {
  std::size_t kernel_h = 1, kernel_w = 1;
  std::size_t stride_h = 1, stride_w = 1;
  std::size_t pad_top = 0, pad_bottom = 0, pad_left = 0, pad_right = 0;

  std::size_t out_h(std::size_t h) const {
    const std::size_t padded = h + pad_top + pad_bottom;
    if (padded < kernel_h) throw std::invalid_argument("conv: input height smaller than kernel");
    return (padded - kernel_h) / stride_h + 1;
  }
  std::size_t out_w(std::size_t w) const {
    const std::size_t padded = w + pad_left + pad_right;
    if (padded < kernel_w) throw std::invalid_argument("conv: input width smaller than kernel");
    return (padded - kernel_w) / stride_w + 1;
  }
  bool operator==(const ConvGeometry&) const = default;
};

namespace detail {

struct ConvDims {
  std::size_t B, Ci, H, W, Co, Ho, Wo;
};

// Calls fn(b, o, c, p, q, i, j_begin, j_end, w_offset) for each kernel tap and
// output row, with [j_begin, j_end) the output columns whose input column
// j*sw + q - pad_left lies inside [0, W).
template <typename Fn>
void for_each_tap(const ConvDims& d, const ConvGeometry& g, Fn&& fn) {
  for (std::size_t b = 0; b < d.B; ++b) {
    for (std::size_t o = 0; o < d.Co; ++o) {
      for (std::size_t c = 0; c < d.Ci; ++c) {
        for (std::size_t p = 0; p < g.kernel_h; ++p) {
          for (std::size_t q = 0; q < g.kernel_w; ++q) {
            // Valid j: 0 <= j*sw + q - pl < W
            const long pl = static_cast<long>(g.pad_left);
            const long sw = static_cast<long>(g.stride_w);
            long jb = 0;
            const long lo = pl - static_cast<long>(q);
            if (lo > 0) jb = (lo + sw - 1) / sw;
            const long hi = static_cast<long>(d.W) - 1 + pl - static_cast<long>(q);
            if (hi < 0) continue;
            const long je = std::min<long>(static_cast<long>(d.Wo), hi / sw + 1);
            if (jb >= je) continue;
            for (std::size_t i = 0; i < d.Ho; ++i) {
              const long hi_idx = static_cast<long>(i * g.stride_h + p) - static_cast<long>(g.pad_top);
              if (hi_idx < 0 || hi_idx >= static_cast<long>(d.H)) continue;
              fn(b, o, c, p, q, i, static_cast<std::size_t>(hi_idx), static_cast<std::size_t>(jb),
                 static_cast<std::size_t>(je));
            }
          }
        }
      }
    }
  }
}

inline std::size_t idx4(std::size_t a, std::size_t b, std::size_t c, std::size_t d, std::size_t B,
                        std::size_t C, std::size_t D) {
  return ((a * B + b) * C + c) * D + d;
}

// out[b,o,i,j] += w[o,c,p,q] * x[b,c,i*sh+p-pt, j*sw+q-pl]
inline void conv_forward_acc(const ConvDims& d, const ConvGeometry& g, const double* x, const double* w, double* out) {
  const std::size_t sw = g.stride_w;
  for_each_tap(d, g, [&](std::size_t b, std::size_t o, std::size_t c, std::size_t p, std::size_t q, std::size_t i,
                         std::size_t hin, std::size_t jb, std::size_t je) {
    const double wv = w[idx4(o, c, p, q, d.Ci, g.kernel_h, g.kernel_w)];
    const double* xr = x + idx4(b, c, hin, 0, d.Ci, d.H, d.W);
    double* orow = out + idx4(b, o, i, 0, d.Co, d.Ho, d.Wo);
    if (sw == 1) {
      const double* xs = xr + (jb + q - g.pad_left);
      double* os = orow + jb;
      for (std::size_t k = 0, n = je - jb; k < n; ++k) os[k] += wv * xs[k];
    } else {
      for (std::size_t j = jb; j < je; ++j) orow[j] += wv * xr[j * sw + q - g.pad_left];
    }
  });
}

// gx[b,c,hin,win] += w[o,c,p,q] * gout[b,o,i,j]
inline void conv_input_grad_acc(const ConvDims& d, const ConvGeometry& g, const double* gout, const double* w,
                                double* gx) {
  const std::size_t sw = g.stride_w;
  for_each_tap(d, g, [&](std::size_t b, std::size_t o, std::size_t c, std::size_t p, std::size_t q, std::size_t i,
                         std::size_t hin, std::size_t jb, std::size_t je) {
    const double wv = w[idx4(o, c, p, q, d.Ci, g.kernel_h, g.kernel_w)];
    double* xr = gx + idx4(b, c, hin, 0, d.Ci, d.H, d.W);
    const double* grow = gout + idx4(b, o, i, 0, d.Co, d.Ho, d.Wo);
    if (sw == 1) {
      double* xs = xr + (jb + q - g.pad_left);
      const double* gs = grow + jb;
      for (std::size_t k = 0, n = je - jb; k < n; ++k) xs[k] += wv * gs[k];
    } else {
      for (std::size_t j = jb; j < je; ++j) xr[j * sw + q - g.pad_left] += wv * grow[j];
    }
  });
}

// gw[o,c,p,q] += sum x[b,c,hin,win] * gout[b,o,i,j]
inline void conv_weight_grad_acc(const ConvDims& d, const ConvGeometry& g, const double* x, const double* gout,
                                 double* gw) {
  const std::size_t sw = g.stride_w;
  for_each_tap(d, g, [&](std::size_t b, std::size_t o, std::size_t c, std::size_t p, std::size_t q, std::size_t i,
                         std::size_t hin, std::size_t jb, std::size_t je) {
    const double* xr = x + idx4(b, c, hin, 0, d.Ci, d.H, d.W);
    const double* grow = gout + idx4(b, o, i, 0, d.Co, d.Ho, d.Wo);
    double acc = 0.0;
    if (sw == 1) {
      const double* xs = xr + (jb + q - g.pad_left);
      const double* gs = grow + jb;
      for (std::size_t k = 0, n = je - jb; k < n; ++k) acc += xs[k] * gs[k];
    } else {
      for (std::size_t j = jb; j < je; ++j) acc += xr[j * sw + q - g.pad_left] * grow[j];
    }
    gw[idx4(o, c, p, q, d.Ci, g.kernel_h, g.kernel_w)] += acc;
  });
}

inline void add_channel_bias(std::vector<double>& out, const Tensor& bias, std::size_t B, std::size_t C,
                             std::size_t plane) {
  if (!bias.defined()) return;
  const auto bv = bias.values();
  for (std::size_t b = 0; b < B; ++b) {
    for (std::size_t c = 0; c < C; ++c) {
      double* dst = out.data() + (b * C + c) * plane;
      for (std::size_t i = 0; i < plane; ++i) dst[i] += bv[c];
    }
  }
}

inline void channel_bias_grad(const std::vector<double>& g, Node* gb, std::size_t B, std::size_t C, std::size_t plane) {
  if (!gb) return;
  for (std::size_t b = 0; b < B; ++b) {
    for (std::size_t c = 0; c < C; ++c) {
      const double* src = g.data() + (b * C + c) * plane;
      double acc = 0.0;
      for (std::size_t i = 0; i < plane; ++i) acc += src[i];
      gb->grad[c] += acc;
    }
  }
}

}  // namespace detail

/// 2-d cross-correlation. x: [B, Ci, H, W], weight: [Co, Ci, kh, kw], bias: [Co] or undefined.
inline Tensor conv2d(const Tensor& x, const Tensor& weight, const Tensor& bias, const ConvGeometry& g) {
  if (x.rank() != 4 || weight.rank() != 4) throw std::invalid_argument("conv2d: expects rank-4 input and weight");
  if (weight.dim(1) != x.dim(1) || weight.dim(2) != g.kernel_h || weight.dim(3) != g.kernel_w) {
    throw std::invalid_argument("conv2d: weight " + shape_str(weight.shape()) + " incompatible with input " +
                                shape_str(x.shape()));
  }
  if (bias.defined() && bias.size() != weight.dim(0)) throw std::invalid_argument("conv2d: bias size mismatch");
  const detail::ConvDims d{x.dim(0), x.dim(1), x.dim(2), x.dim(3), weight.dim(0), g.out_h(x.dim(2)), g.out_w(x.dim(3))};
  std::vector<double> out(d.B * d.Co * d.Ho * d.Wo, 0.0);
  detail::conv_forward_acc(d, g, x.values().data(), weight.values().data(), out.data());
  detail::add_channel_bias(out, bias, d.B, d.Co, d.Ho * d.Wo);
  return make_result("conv2d", {d.B, d.Co, d.Ho, d.Wo}, std::move(out), {x, weight, bias}, [d, g](Node& self) {
    if (Node* gx = grad_target(self, 0)) {
      detail::conv_input_grad_acc(d, g, self.grad.data(), self.parents[1]->value.data(), gx->grad.data());
    }
    if (Node* gw = grad_target(self, 1)) {
      detail::conv_weight_grad_acc(d, g, self.parents[0]->value.data(), self.grad.data(), gw->grad.data());
    }
    detail::channel_bias_grad(self.grad, grad_target(self, 2), d.B, d.Co, d.Ho * d.Wo);
  });
}

/// Transposed convolution: the exact adjoint of conv2d with the same
/// weight and geometry, mapping [B, Co, Ho, Wo] back to [B, Ci, out_h, out_w].
/// weight keeps the conv2d layout [Co, Ci, kh, kw]; bias is [Ci] or undefined.
inline Tensor conv_transpose2d(const Tensor& y, const Tensor& weight, const Tensor& bias, const ConvGeometry& g,
                               std::size_t out_h, std::size_t out_w) {
  if (y.rank() != 4 || weight.rank() != 4) throw std::invalid_argument("conv_transpose2d: expects rank-4 tensors");
  if (weight.dim(0) != y.dim(1) || weight.dim(2) != g.kernel_h || weight.dim(3) != g.kernel_w) {
    throw std::invalid_argument("conv_transpose2d: weight " + shape_str(weight.shape()) + " incompatible with input " +
                                shape_str(y.shape()));
  }
  if (g.out_h(out_h) != y.dim(2) || g.out_w(out_w) != y.dim(3)) {
    throw std::invalid_argument("conv_transpose2d: output size inconsistent with geometry");
  }
  if (bias.defined() && bias.size() != weight.dim(1)) throw std::invalid_argument("conv_transpose2d: bias size mismatch");
  const detail::ConvDims d{y.dim(0), weight.dim(1), out_h, out_w, weight.dim(0), y.dim(2), y.dim(3)};
  std::vector<double> out(d.B * d.Ci * d.H * d.W, 0.0);
  detail::conv_input_grad_acc(d, g, y.values().data(), weight.values().data(), out.data());
  detail::add_channel_bias(out, bias, d.B, d.Ci, d.H * d.W);
  return make_result("conv_transpose2d", {d.B, d.Ci, d.H, d.W}, std::move(out), {y, weight, bias},
                     [d, g](Node& self) {
                       if (Node* gy = grad_target(self, 0)) {
                         detail::conv_forward_acc(d, g, self.grad.data(), self.parents[1]->value.data(),
                                                  gy->grad.data());
                       }
                       if (Node* gw = grad_target(self, 1)) {
                         detail::conv_weight_grad_acc(d, g, self.grad.data(), self.parents[0]->value.data(),
                                                      gw->grad.data());
                       }
                       detail::channel_bias_grad(self.grad, grad_target(self, 2), d.B, d.Ci, d.H * d.W);
                     });
}

// ---------------------------------------------------------------- normalization

// Running statistics of one batch-norm channel set.
struct BatchNormStats {
  std::vector<double> mean;
  std::vector<double> var;

  explicit BatchNormStats(std::size_t channels = 0) : mean(channels, 0.0), var(channels, 1.0) {}
};

/// Per-channel (axis 1) standardization over all other axes, then gamma * xhat + beta.
/// Training mode uses batch statistics (biased variance) and folds them into
/// `stats` with the given momentum; inference mode uses `stats`.
inline Tensor batch_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, BatchNormStats& stats,
                         bool training, double momentum = 0.1, double eps = 1e-5) {
  const auto sp = detail::split_at(x.shape(), 1);
  const std::size_t C = sp.extent;
  if (gamma.size() != C || beta.size() != C || stats.mean.size() != C) {
    throw std::invalid_argument("batch_norm: parameter size mismatch for " + shape_str(x.shape()));
  }
  const std::size_t n = sp.outer * sp.inner;
  if (training && n < 2) throw std::invalid_argument("batch_norm: need at least 2 elements per channel");
  const auto xv = x.values();
  std::vector<double> mu(C, 0.0), inv_std(C, 0.0);
  for (std::size_t c = 0; c < C; ++c) {
    if (training) {
      double s = 0.0;
      for (std::size_t o = 0; o < sp.outer; ++o) {
        const double* r = xv.data() + (o * C + c) * sp.inner;
        for (std::size_t i = 0; i < sp.inner; ++i) s += r[i];
      }
      const double m = s / static_cast<double>(n);
      double v = 0.0;
      for (std::size_t o = 0; o < sp.outer; ++o) {
        const double* r = xv.data() + (o * C + c) * sp.inner;
        for (std::size_t i = 0; i < sp.inner; ++i) v += (r[i] - m) * (r[i] - m);
      }
      v /= static_cast<double>(n);
      mu[c] = m;
      inv_std[c] = 1.0 / std::sqrt(v + eps);
      stats.mean[c] = (1.0 - momentum) * stats.mean[c] + momentum * m;
      stats.var[c] = (1.0 - momentum) * stats.var[c] + momentum * v;
    } else {
      mu[c] = stats.mean[c];
      inv_std[c] = 1.0 / std::sqrt(stats.var[c] + eps);
    }
  }
  std::vector<double> xhat(x.size()), out(x.size());
  const auto gv = gamma.values();
  const auto bv = beta.values();
  for (std::size_t o = 0; o < sp.outer; ++o) {
    for (std::size_t c = 0; c < C; ++c) {
      const std::size_t base = (o * C + c) * sp.inner;
      for (std::size_t i = 0; i < sp.inner; ++i) {
        xhat[base + i] = (xv[base + i] - mu[c]) * inv_std[c];
        out[base + i] = gv[c] * xhat[base + i] + bv[c];
      }
    }
  }
  return make_result(
      "batch_norm", x.shape(), std::move(out), {x, gamma, beta},
      [sp, C, n, training, inv_std = std::move(inv_std), xhat = std::move(xhat)](Node& self) {
        const auto& gv = self.parents[1]->value;
        Node* gx = grad_target(self, 0);
        Node* gg = grad_target(self, 1);
        Node* gb = grad_target(self, 2);
        for (std::size_t c = 0; c < C; ++c) {
          double sum_g = 0.0, sum_gx = 0.0;
          for (std::size_t o = 0; o < sp.outer; ++o) {
            const std::size_t base = (o * C + c) * sp.inner;
            for (std::size_t i = 0; i < sp.inner; ++i) {
              sum_g += self.grad[base + i];
              sum_gx += self.grad[base + i] * xhat[base + i];
            }
          }
          if (gg) gg->grad[c] += sum_gx;
          if (gb) gb->grad[c] += sum_g;
          if (!gx) continue;
          const double k = gv[c] * inv_std[c];
          const double nn = static_cast<double>(n);
          for (std::size_t o = 0; o < sp.outer; ++o) {
            const std::size_t base = (o * C + c) * sp.inner;
            for (std::size_t i = 0; i < sp.inner; ++i) {
              const double g = self.grad[base + i];
              gx->grad[base + i] += training ? k * (g - sum_g / nn - xhat[base + i] * sum_gx / nn) : k * g;
            }
          }
        }
      });
}

/// x if x > 0 else slope * x. slope has one entry per channel along `axis`,
/// or a single shared entry.
inline Tensor prelu(const Tensor& x, const Tensor& slope, std::size_t axis = 1) {
  const auto sp = detail::split_at(x.shape(), axis);
  const bool shared = slope.size() == 1;
  if (!shared && slope.size() != sp.extent) throw std::invalid_argument("prelu: slope size mismatch");
  const auto xv = x.values();
  const auto av = slope.values();
  std::vector<double> out(x.size());
  for (std::size_t o = 0; o < sp.outer; ++o) {
    for (std::size_t c = 0; c < sp.extent; ++c) {
      const double a = av[shared ? 0 : c];
      const std::size_t base = (o * sp.extent + c) * sp.inner;
      for (std::size_t i = 0; i < sp.inner; ++i) {
        const double v = xv[base + i];
        out[base + i] = v > 0.0 ? v : a * v;
      }
    }
  }
  return make_result("prelu", x.shape(), std::move(out), {x, slope}, [sp, shared](Node& self) {
    const auto& xv = self.parents[0]->value;
    const auto& av = self.parents[1]->value;
    Node* gx = grad_target(self, 0);
    Node* ga = grad_target(self, 1);
    for (std::size_t o = 0; o < sp.outer; ++o) {
      for (std::size_t c = 0; c < sp.extent; ++c) {
        const std::size_t ai = shared ? 0 : c;
        const std::size_t base = (o * sp.extent + c) * sp.inner;
        for (std::size_t i = 0; i < sp.inner; ++i) {
          const double v = xv[base + i];
          const double g = self.grad[base + i];
          if (gx) gx->grad[base + i] += v > 0.0 ? g : av[ai] * g;
          if (ga && !(v > 0.0)) ga->grad[ai] += g * v;
        }
      }
    }
  });
}

// ---------------------------------------------------------------- dense layers

/// y = x W^T + b over the last axis. x: [..., D], weight: [O, D], bias: [O] or undefined.
inline Tensor linear(const Tensor& x, const Tensor& weight, const Tensor& bias) {
  if (x.rank() < 1 || weight.rank() != 2 || weight.dim(1) != x.shape().back()) {
    throw std::invalid_argument("linear: weight " + shape_str(weight.shape()) + " incompatible with " +
                                shape_str(x.shape()));
  }
  if (bias.defined() && bias.size() != weight.dim(0)) throw std::invalid_argument("linear: bias size mismatch");
  const std::size_t D = weight.dim(1), O = weight.dim(0), rows = x.size() / D;
  Shape out_shape = x.shape();
  out_shape.back() = O;
  std::vector<double> out(rows * O, 0.0);
  const double* xv = x.values().data();
  const double* wv = weight.values().data();
  for (std::size_t r = 0; r < rows; ++r) {
    for (std::size_t o = 0; o < O; ++o) {
      double acc = bias.defined() ? bias.values()[o] : 0.0;
      const double* wr = wv + o * D;
      const double* xr = xv + r * D;
      for (std::size_t k = 0; k < D; ++k) acc += wr[k] * xr[k];
      out[r * O + o] = acc;
    }
  }
  return make_result("linear", std::move(out_shape), std::move(out), {x, weight, bias}, [D, O, rows](Node& self) {
    const double* xv = self.parents[0]->value.data();
    const double* wv = self.parents[1]->value.data();
    Node* gx = grad_target(self, 0);
    Node* gw = grad_target(self, 1);
    Node* gb = grad_target(self, 2);
    for (std::size_t r = 0; r < rows; ++r) {
      for (std::size_t o = 0; o < O; ++o) {
        const double g = self.grad[r * O + o];
        if (g == 0.0) continue;
        if (gx) {
          for (std::size_t k = 0; k < D; ++k) gx->grad[r * D + k] += g * wv[o * D + k];
        }
        if (gw) {
          for (std::size_t k = 0; k < D; ++k) gw->grad[o * D + k] += g * xv[r * D + k];
        }
        if (gb) gb->grad[o] += g;
      }
    }
  });
}

/// Single-layer LSTM over a sequence with zero initial state.
/// x: [T, B, D]; w_ih: [4H, D]; w_hh: [4H, H]; bias: [4H]; gate order i, f, g, o.
/// Returns hidden states [T, B, H]. Backward is full backpropagation through time.
inline Tensor lstm(const Tensor& x, const Tensor& w_ih, const Tensor& w_hh, const Tensor& bias) {
  if (x.rank() != 3) throw std::invalid_argument("lstm: input must be [T, B, D]");
  const std::size_t T = x.dim(0), B = x.dim(1), D = x.dim(2);
  if (w_ih.rank() != 2 || w_ih.dim(1) != D || w_ih.dim(0) % 4 != 0) throw std::invalid_argument("lstm: bad w_ih shape");
  const std::size_t H = w_ih.dim(0) / 4;
  if (w_hh.rank() != 2 || w_hh.dim(0) != 4 * H || w_hh.dim(1) != H) throw std::invalid_argument("lstm: bad w_hh shape");
  if (bias.size() != 4 * H) throw std::invalid_argument("lstm: bad bias shape");

  const double* xv = x.values().data();
  const double* wi = w_ih.values().data();
  const double* wh = w_hh.values().data();
  const double* bv = bias.values().data();
  // Saved activations per (t, b): gates [4H] post-nonlinearity, cell [H], tanh(cell) [H].
  std::vector<double> gates(T * B * 4 * H), cell(T * B * H), cell_tanh(T * B * H), hidden(T * B * H);
  std::vector<double> z(4 * H);
  for (std::size_t t = 0; t < T; ++t) {
    for (std::size_t b = 0; b < B; ++b) {
      const double* xt = xv + (t * B + b) * D;
      const double* hprev = t ? hidden.data() + ((t - 1) * B + b) * H : nullptr;
      const double* cprev = t ? cell.data() + ((t - 1) * B + b) * H : nullptr;
      for (std::size_t r = 0; r < 4 * H; ++r) {
        double acc = bv[r];
        const double* wr = wi + r * D;
        for (std::size_t k = 0; k < D; ++k) acc += wr[k] * xt[k];
        if (hprev) {
          const double* hr = wh + r * H;
          for (std::size_t k = 0; k < H; ++k) acc += hr[k] * hprev[k];
        }
        z[r] = acc;
      }
      double* gt = gates.data() + (t * B + b) * 4 * H;
      double* ct = cell.data() + (t * B + b) * H;
      double* tt = cell_tanh.data() + (t * B + b) * H;
      double* ht = hidden.data() + (t * B + b) * H;
      for (std::size_t h = 0; h < H; ++h) {
        const double ig = detail::sigmoid(z[h]);
        const double fg = detail::sigmoid(z[H + h]);
        const double gg = std::tanh(z[2 * H + h]);
        const double og = detail::sigmoid(z[3 * H + h]);
        gt[h] = ig;
        gt[H + h] = fg;
        gt[2 * H + h] = gg;
        gt[3 * H + h] = og;
        ct[h] = fg * (cprev ? cprev[h] : 0.0) + ig * gg;
        tt[h] = std::tanh(ct[h]);
        ht[h] = og * tt[h];
      }
    }
  }
  std::vector<double> out = hidden;
  return make_result(
      "lstm", {T, B, H}, std::move(out), {x, w_ih, w_hh, bias},
      [T, B, D, H, gates = std::move(gates), cell = std::move(cell), cell_tanh = std::move(cell_tanh),
       hidden = std::move(hidden)](Node& self) {
        const double* xv = self.parents[0]->value.data();
        const double* wi = self.parents[1]->value.data();
        const double* wh = self.parents[2]->value.data();
        Node* gx = grad_target(self, 0);
        Node* gwi = grad_target(self, 1);
        Node* gwh = grad_target(self, 2);
        Node* gb = grad_target(self, 3);
        std::vector<double> dh_next(B * H, 0.0), dc_next(B * H, 0.0), dz(4 * H);
        for (std::size_t t = T; t-- > 0;) {
          for (std::size_t b = 0; b < B; ++b) {
            const double* gt = gates.data() + (t * B + b) * 4 * H;
            const double* tt = cell_tanh.data() + (t * B + b) * H;
            const double* cprev = t ? cell.data() + ((t - 1) * B + b) * H : nullptr;
            const double* hprev = t ? hidden.data() + ((t - 1) * B + b) * H : nullptr;
            double* dhn = dh_next.data() + b * H;
            double* dcn = dc_next.data() + b * H;
            for (std::size_t h = 0; h < H; ++h) {
              const double ig = gt[h], fg = gt[H + h], gg = gt[2 * H + h], og = gt[3 * H + h];
              const double dh = self.grad[(t * B + b) * H + h] + dhn[h];
              const double dc = dh * og * (1.0 - tt[h] * tt[h]) + dcn[h];
              dz[h] = dc * gg * ig * (1.0 - ig);
              dz[H + h] = dc * (cprev ? cprev[h] : 0.0) * fg * (1.0 - fg);
              dz[2 * H + h] = dc * ig * (1.0 - gg * gg);
              dz[3 * H + h] = dh * tt[h] * og * (1.0 - og);
              dcn[h] = dc * fg;
            }
            std::fill(dhn, dhn + H, 0.0);
            const double* xt = xv + (t * B + b) * D;
            for (std::size_t r = 0; r < 4 * H; ++r) {
              const double g = dz[r];
              if (gb) gb->grad[r] += g;
              if (gwi) {
                double* row = gwi->grad.data() + r * D;
                for (std::size_t k = 0; k < D; ++k) row[k] += g * xt[k];
              }
              if (gx) {
                double* dx = gx->grad.data() + (t * B + b) * D;
                const double* wr = wi + r * D;
                for (std::size_t k = 0; k < D; ++k) dx[k] += g * wr[k];
              }
              if (hprev) {
                if (gwh) {
                  double* row = gwh->grad.data() + r * H;
                  for (std::size_t k = 0; k < H; ++k) row[k] += g * hprev[k];
                }
                const double* hr = wh + r * H;
                for (std::size_t k = 0; k < H; ++k) dhn[k] += g * hr[k];
              }
            }
          }
        }
      });
}

}  // namespace nbeam::cnn
