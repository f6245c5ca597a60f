#pragma once

#include <cmath>
#include <cstddef>
#include <string>
#include <utility>
#include <vector>

#include "nbeam/cnn/ops.hpp"
#include "nbeam/cnn/tensor.hpp"
#include "nbeam/rng.hpp"

namespace nbeam::cnn {

// Named views of everything a model persists: trainable tensors and
// non-trainable buffers (batch-norm running statistics).
struct ParameterSet {
  std::vector<std::pair<std::string, Tensor>> params;
  std::vector<std::pair<std::string, std::vector<double>*>> buffers;

  void add(const std::string& name, const Tensor& t) { params.emplace_back(name, t); }
  void add_buffer(const std::string& name, std::vector<double>& b) { buffers.emplace_back(name, &b); }

  std::vector<Tensor> tensors() const {
    std::vector<Tensor> out;
    for (const auto& [name, t] : params) out.push_back(t);
    return out;
  }
  std::size_t count() const {
    std::size_t n = 0;
    for (const auto& [name, t] : params) n += t.size();
    return n;
  }
  void zero_grad() {
    for (auto& [name, t] : params) t.zero_grad();
  }
};

inline Tensor uniform_parameter(Shape shape, double bound, Rng& rng) {
  std::vector<double> v(numel(shape));
  for (double& x : v) x = rng.uniform(-bound, bound);
  return Tensor::parameter(std::move(shape), std::move(v));
}

inline Tensor filled_parameter(Shape shape, double value) {
  const auto n = numel(shape);
  return Tensor::parameter(std::move(shape), std::vector<double>(n, value));
}

inline ComplexTensor complex_add(const ComplexTensor& a, const ComplexTensor& b) {
  return {add(a.re, b.re), add(a.im, b.im)};
}

// Complex 2-d convolution over [B, C, F, T] pairs:
// re = Wr*x_re - Wi*x_im + br, im = Wi*x_re + Wr*x_im + bi.
class ComplexConv2d {
 public:
  ComplexConv2d() = default;
  ComplexConv2d(std::size_t in_ch, std::size_t out_ch, ConvGeometry geom, Rng& rng, bool bias = true)
      : geom_(geom) {
    const double bound = 1.0 / std::sqrt(static_cast<double>(in_ch * geom.kernel_h * geom.kernel_w));
    const Shape ws{out_ch, in_ch, geom.kernel_h, geom.kernel_w};
    w_re_ = uniform_parameter(ws, bound, rng);
    w_im_ = uniform_parameter(ws, bound, rng);
    if (bias) {
      b_re_ = uniform_parameter({out_ch}, bound, rng);
      b_im_ = uniform_parameter({out_ch}, bound, rng);
    }
  }

  ComplexTensor forward(const ComplexTensor& x) const {
    return {sub(conv2d(x.re, w_re_, b_re_, geom_), conv2d(x.im, w_im_, Tensor(), geom_)),
            add(conv2d(x.re, w_im_, b_im_, geom_), conv2d(x.im, w_re_, Tensor(), geom_))};
  }

  void collect(const std::string& prefix, ParameterSet& out) const {
    out.add(prefix + ".weight_re", w_re_);
    out.add(prefix + ".weight_im", w_im_);
    if (b_re_.defined()) {
      out.add(prefix + ".bias_re", b_re_);
      out.add(prefix + ".bias_im", b_im_);
    }
  }

  const ConvGeometry& geometry() const { return geom_; }
  Tensor& weight_re() { return w_re_; }
  Tensor& weight_im() { return w_im_; }

 private:
  ConvGeometry geom_;
  Tensor w_re_, w_im_, b_re_, b_im_;
};

// Complex transposed convolution, the transpose of ComplexConv2d with the
// same kernels. Weights are [in_ch, out_ch, kh, kw].
class ComplexConvTranspose2d {
 public:
  ComplexConvTranspose2d() = default;
  ComplexConvTranspose2d(std::size_t in_ch, std::size_t out_ch, ConvGeometry geom, Rng& rng, bool bias = true)
      : geom_(geom) {
    const double bound = 1.0 / std::sqrt(static_cast<double>(in_ch * geom.kernel_h * geom.kernel_w));
    const Shape ws{in_ch, out_ch, geom.kernel_h, geom.kernel_w};
    w_re_ = uniform_parameter(ws, bound, rng);
    w_im_ = uniform_parameter(ws, bound, rng);
    if (bias) {
      b_re_ = uniform_parameter({out_ch}, bound, rng);
      b_im_ = uniform_parameter({out_ch}, bound, rng);
    }
  }

  ComplexTensor forward(const ComplexTensor& y, std::size_t out_h, std::size_t out_w) const {
    auto tc = [&](const Tensor& x, const Tensor& w, const Tensor& b) {
      return conv_transpose2d(x, w, b, geom_, out_h, out_w);
    };
    return {sub(tc(y.re, w_re_, b_re_), tc(y.im, w_im_, Tensor())),
            add(tc(y.re, w_im_, b_im_), tc(y.im, w_re_, Tensor()))};
  }

  void collect(const std::string& prefix, ParameterSet& out) const {
    out.add(prefix + ".weight_re", w_re_);
    out.add(prefix + ".weight_im", w_im_);
    if (b_re_.defined()) {
      out.add(prefix + ".bias_re", b_re_);
      out.add(prefix + ".bias_im", b_im_);
    }
  }

  const ConvGeometry& geometry() const { return geom_; }
  Tensor& weight_re() { return w_re_; }
  Tensor& weight_im() { return w_im_; }

 private:
  ConvGeometry geom_;
  Tensor w_re_, w_im_, b_re_, b_im_;
};

// Batch norm applied to real and imaginary parts independently.
class ComplexBatchNorm {
 public:
  ComplexBatchNorm() = default;
  explicit ComplexBatchNorm(std::size_t channels)
      : g_re_(filled_parameter({channels}, 1.0)), b_re_(filled_parameter({channels}, 0.0)),
        g_im_(filled_parameter({channels}, 1.0)), b_im_(filled_parameter({channels}, 0.0)),
        stats_re_(channels), stats_im_(channels) {}

  ComplexTensor forward(const ComplexTensor& x, bool training) {
    return {batch_norm(x.re, g_re_, b_re_, stats_re_, training), batch_norm(x.im, g_im_, b_im_, stats_im_, training)};
  }

  void collect(const std::string& prefix, ParameterSet& out) {
    out.add(prefix + ".gamma_re", g_re_);
    out.add(prefix + ".beta_re", b_re_);
    out.add(prefix + ".gamma_im", g_im_);
    out.add(prefix + ".beta_im", b_im_);
    out.add_buffer(prefix + ".running_mean_re", stats_re_.mean);
    out.add_buffer(prefix + ".running_var_re", stats_re_.var);
    out.add_buffer(prefix + ".running_mean_im", stats_im_.mean);
    out.add_buffer(prefix + ".running_var_im", stats_im_.var);
  }

 private:
  Tensor g_re_, b_re_, g_im_, b_im_;
  BatchNormStats stats_re_, stats_im_;
};

// Per-channel PReLU; the same slope acts on real and imaginary parts.
class PRelu {
 public:
  PRelu() = default;
  explicit PRelu(std::size_t channels, double init = 0.25) : slope_(filled_parameter({channels}, init)) {}

  Tensor forward(const Tensor& x, std::size_t axis = 1) const { return prelu(x, slope_, axis); }
  ComplexTensor forward(const ComplexTensor& x) const { return {prelu(x.re, slope_, 1), prelu(x.im, slope_, 1)}; }

  void collect(const std::string& prefix, ParameterSet& out) const { out.add(prefix + ".slope", slope_); }

 private:
  Tensor slope_;
};

class Linear {
 public:
  Linear() = default;
  Linear(std::size_t in, std::size_t out, Rng& rng, bool bias = true) {
    const double bound = 1.0 / std::sqrt(static_cast<double>(in));
    w_ = uniform_parameter({out, in}, bound, rng);
    if (bias) b_ = uniform_parameter({out}, bound, rng);
  }

  Tensor forward(const Tensor& x) const { return linear(x, w_, b_); }

  void collect(const std::string& prefix, ParameterSet& out) const {
    out.add(prefix + ".weight", w_);
    if (b_.defined()) out.add(prefix + ".bias", b_);
  }

  const Tensor& weight() const { return w_; }
  const Tensor& bias() const { return b_; }

 private:
  Tensor w_, b_;
};

class ComplexLinear {
 public:
  ComplexLinear() = default;
  ComplexLinear(std::size_t in, std::size_t out, Rng& rng, bool bias = true)
      : re_(in, out, rng, bias), im_(in, out, rng, bias) {}

  ComplexTensor forward(const ComplexTensor& x) const {
    const Tensor no_bias;
    return {sub(re_.forward(x.re), linear(x.im, im_.weight(), no_bias)),
            add(im_.forward(x.re), linear(x.im, re_.weight(), no_bias))};
  }

  void collect(const std::string& prefix, ParameterSet& out) const {
    re_.collect(prefix + ".re", out);
    im_.collect(prefix + ".im", out);
  }

 private:
  Linear re_, im_;
};

// Single-layer LSTM, sequence-major [T, B, D] -> [T, B, H].
class Lstm {
 public:
  Lstm() = default;
  Lstm(std::size_t input, std::size_t hidden, Rng& rng) {
    const double bound = 1.0 / std::sqrt(static_cast<double>(hidden));
    w_ih_ = uniform_parameter({4 * hidden, input}, bound, rng);
    w_hh_ = uniform_parameter({4 * hidden, hidden}, bound, rng);
    b_ = uniform_parameter({4 * hidden}, bound, rng);
  }

  Tensor forward(const Tensor& x) const { return lstm(x, w_ih_, w_hh_, b_); }

  void collect(const std::string& prefix, ParameterSet& out) const {
    out.add(prefix + ".w_ih", w_ih_);
    out.add(prefix + ".w_hh", w_hh_);
    out.add(prefix + ".bias", b_);
  }

 private:
  Tensor w_ih_, w_hh_, b_;
};

// Two real LSTMs combined by the complex product rule:
// re = L_r(x_re) - L_i(x_im), im = L_r(x_im) + L_i(x_re).
class ComplexLstm {
 public:
  ComplexLstm() = default;
  ComplexLstm(std::size_t input, std::size_t hidden, Rng& rng) : r_(input, hidden, rng), i_(input, hidden, rng) {}

  ComplexTensor forward(const ComplexTensor& x) const {
    return {sub(r_.forward(x.re), i_.forward(x.im)), add(r_.forward(x.im), i_.forward(x.re))};
  }

  void collect(const std::string& prefix, ParameterSet& out) const {
    r_.collect(prefix + ".real", out);
    i_.collect(prefix + ".imag", out);
  }

 private:
  Lstm r_, i_;
};

}  // namespace nbeam::cnn
