#include <gtest/gtest.h>

#include <cmath>
#include <complex>
#include <filesystem>

#include "nbeam/cnn/adam.hpp"
#include "nbeam/cnn/checkpoint.hpp"
#include "nbeam/cnn/gradcheck.hpp"
#include "nbeam/cnn/layers.hpp"
#include "nbeam/cnn/ops.hpp"

using namespace nbeam;
using namespace nbeam::cnn;

namespace {

Tensor random_param(Shape s, Rng& rng, double scale = 1.0) {
  std::vector<double> v(numel(s));
  for (double& x : v) x = scale * rng.normal();
  return Tensor::parameter(std::move(s), std::move(v));
}

Tensor random_const(Shape s, Rng& rng) {
  std::vector<double> v(numel(s));
  for (double& x : v) x = rng.normal();
  return Tensor::constant(std::move(s), std::move(v));
}

// Random linear functional of `out`, so every output element gets a distinct weight.
Tensor probe(const Tensor& out, std::uint64_t seed) {
  Rng rng(seed);
  return sum(mul(out, random_const(out.shape(), rng)));
}

Tensor probe(const ComplexTensor& out, std::uint64_t seed) {
  return add(probe(out.re, seed), probe(out.im, seed + 1));
}

const ConvGeometry kEncoderGeom{5, 2, 2, 1, 2, 2, 1, 0};
const ConvGeometry kDecoderGeom{5, 2, 2, 1, 2, 2, 0, 1};

}  // namespace

TEST(Autodiff, ElementaryGradients) {
  auto x = Tensor::parameter({3}, {3.0, -1.0, 2.0});
  backward(sum(x));
  for (double g : x.grad()) EXPECT_EQ(g, 1.0);
  auto y = Tensor::parameter({}, {3.0});
  backward(sum(mul(y, y)));
  EXPECT_EQ(y.grad()[0], 6.0);
  // Re-running after zeroing reproduces identical gradients.
  Rng rng(1);
  auto w = random_param({4, 5}, rng);
  auto loss = [&] { return probe(tanh(w), 3); };
  w.zero_grad();
  backward(loss());
  const std::vector<double> first(w.grad().begin(), w.grad().end());
  w.zero_grad();
  backward(loss());
  for (std::size_t i = 0; i < first.size(); ++i) EXPECT_EQ(w.grad()[i], first[i]);
}

TEST(Autodiff, SharedSubgraphAccumulates) {
  auto x = Tensor::parameter({2}, {1.0, 2.0});
  const auto h = mul(x, x);
  backward(sum(add(h, h)));  // d/dx 2x^2 = 4x
  EXPECT_EQ(x.grad()[0], 4.0);
  EXPECT_EQ(x.grad()[1], 8.0);
}

TEST(Autodiff, NoGradGuardSkipsRecording) {
  auto x = Tensor::parameter({2}, {1.0, 2.0});
  NoGradGuard guard;
  EXPECT_FALSE(mul(x, x).requires_grad());
}

TEST(GradCheck, ElementwiseAndShapeOps) {
  Rng rng(2);
  auto a = random_param({2, 3, 4}, rng), b = random_param({2, 3, 4}, rng);
  EXPECT_LT(gradcheck([&] { return probe(mul(sigmoid(a), tanh(b)), 1); }, {a, b}).max_rel_error, 1e-4);
  EXPECT_LT(gradcheck([&] { return probe(sub(scale(a, 1.7), b), 2); }, {a, b}).max_rel_error, 1e-4);
  EXPECT_LT(gradcheck([&] { return probe(magnitude(a, b), 3); }, {a, b}).max_rel_error, 1e-4);
  EXPECT_LT(gradcheck([&] { return probe(permute(a, {2, 0, 1}), 4); }, {a}).max_rel_error, 1e-4);
  EXPECT_LT(gradcheck([&] { return probe(slice(a, 2, 1, 3), 5); }, {a}).max_rel_error, 1e-4);
  EXPECT_LT(gradcheck([&] { return probe(concat({a, b, a}, 1), 6); }, {a, b}).max_rel_error, 1e-4);
  EXPECT_LT(gradcheck([&] { return probe(mean_axis(a, 1), 7); }, {a}).max_rel_error, 1e-4);
  EXPECT_LT(gradcheck([&] { return mean(mul(a, reshape(b, {2, 3, 4}))); }, {a, b}).max_rel_error, 1e-4);
}

TEST(GradCheck, ConvAndTransposedConv) {
  Rng rng(3);
  auto x = random_param({2, 3, 8, 5}, rng);
  auto w = random_param({4, 3, 5, 2}, rng, 0.3);
  auto bias = random_param({4}, rng);
  EXPECT_LT(gradcheck([&] { return probe(conv2d(x, w, bias, kEncoderGeom), 1); }, {x, w, bias}).max_rel_error, 1e-4);
  auto y = random_param({2, 4, 4, 5}, rng);
  auto bt = random_param({3}, rng);
  EXPECT_LT(gradcheck([&] { return probe(conv_transpose2d(y, w, bt, kDecoderGeom, 8, 5), 2); }, {y, w, bt}).max_rel_error,
            1e-4);
}

TEST(GradCheck, BatchNormBothModes) {
  Rng rng(4);
  auto x = random_param({2, 3, 4, 3}, rng);
  auto g = random_param({3}, rng), b = random_param({3}, rng);
  BatchNormStats stats(3);
  EXPECT_LT(gradcheck([&] { return probe(batch_norm(x, g, b, stats, true), 1); }, {x, g, b}).max_rel_error, 1e-4);
  EXPECT_LT(gradcheck([&] { return probe(batch_norm(x, g, b, stats, false), 2); }, {x, g, b}).max_rel_error, 1e-4);
}

TEST(GradCheck, PreluLinearLstm) {
  Rng rng(5);
  auto x = random_param({2, 3, 4}, rng);
  auto slope = random_param({3}, rng, 0.3);
  EXPECT_LT(gradcheck([&] { return probe(prelu(x, slope, 1), 1); }, {x, slope}).max_rel_error, 1e-4);
  auto w = random_param({5, 4}, rng), bias = random_param({5}, rng);
  EXPECT_LT(gradcheck([&] { return probe(sigmoid(linear(x, w, bias)), 2); }, {x, w, bias}).max_rel_error, 1e-4);
  auto seq = random_param({3, 2, 4}, rng);  // 3 frames
  auto wih = random_param({12, 4}, rng, 0.5), whh = random_param({12, 3}, rng, 0.5), lb = random_param({12}, rng);
  EXPECT_LT(gradcheck([&] { return probe(lstm(seq, wih, whh, lb), 3); }, {seq, wih, whh, lb}).max_rel_error, 1e-4);
}

TEST(GradCheck, ComplexLayers) {
  Rng rng(6);
  ComplexTensor x{random_param({2, 2, 8, 3}, rng), random_param({2, 2, 8, 3}, rng)};
  ComplexConv2d conv(2, 3, kEncoderGeom, rng);
  ParameterSet ps;
  conv.collect("conv", ps);
  auto inputs = ps.tensors();
  inputs.push_back(x.re);
  inputs.push_back(x.im);
  EXPECT_LT(gradcheck([&] { return probe(conv.forward(x), 1); }, inputs).max_rel_error, 1e-4);

  ComplexConvTranspose2d deconv(2, 3, kDecoderGeom, rng);
  ComplexTensor y{random_param({2, 2, 4, 3}, rng), random_param({2, 2, 4, 3}, rng)};
  ParameterSet pd;
  deconv.collect("deconv", pd);
  auto din = pd.tensors();
  din.push_back(y.re);
  din.push_back(y.im);
  EXPECT_LT(gradcheck([&] { return probe(deconv.forward(y, 8, 3), 2); }, din).max_rel_error, 1e-4);

  ComplexBatchNorm bn(2);
  PRelu act(2);
  ParameterSet pb;
  bn.collect("bn", pb);
  act.collect("act", pb);
  auto bin = pb.tensors();
  bin.push_back(x.re);
  EXPECT_LT(gradcheck([&] { return probe(act.forward(bn.forward(x, true)), 3); }, bin).max_rel_error, 1e-4);

  ComplexLstm clstm(4, 3, rng);
  ComplexTensor s{random_param({3, 2, 4}, rng), random_param({3, 2, 4}, rng)};
  ParameterSet pl;
  clstm.collect("lstm", pl);
  auto lin = pl.tensors();
  lin.push_back(s.re);
  lin.push_back(s.im);
  EXPECT_LT(gradcheck([&] { return probe(clstm.forward(s), 4); }, lin).max_rel_error, 1e-4);

  ComplexLinear cl(4, 2, rng);
  ParameterSet pc;
  cl.collect("lin", pc);
  auto cin = pc.tensors();
  cin.push_back(s.im);
  EXPECT_LT(gradcheck([&] { return probe(cl.forward(s), 5); }, cin).max_rel_error, 1e-4);
}

TEST(ComplexConv, DegenerateAndIdentityCases) {
  Rng rng(7);
  const ConvGeometry one{1, 1, 1, 1, 0, 0, 0, 0};
  ComplexConv2d conv(2, 2, one, rng, false);
  auto wr = conv.weight_re().mutable_values();
  auto wi = conv.weight_im().mutable_values();
  std::fill(wr.begin(), wr.end(), 0.0);
  std::fill(wi.begin(), wi.end(), 0.0);
  wr[0] = wr[3] = 1.0;  // identity over 2 channels
  ComplexTensor x{random_const({1, 2, 3, 3}, rng), random_const({1, 2, 3, 3}, rng)};
  auto y = conv.forward(x);
  for (std::size_t i = 0; i < x.re.size(); ++i) {
    EXPECT_EQ(y.re.values()[i], x.re.values()[i]);
    EXPECT_EQ(y.im.values()[i], x.im.values()[i]);
  }
  // Single element: (1 + 0j) through kernel (0 + 1j) gives j.
  ComplexConv2d unit(1, 1, one, rng, false);
  unit.weight_re().mutable_values()[0] = 0.0;
  unit.weight_im().mutable_values()[0] = 1.0;
  const auto j = unit.forward({Tensor::constant({1, 1, 1, 1}, {1.0}), Tensor::constant({1, 1, 1, 1}, {0.0})});
  EXPECT_EQ(j.re.item(), 0.0);
  EXPECT_EQ(j.im.item(), 1.0);
  // W_i = 0 reduces to independent real convolutions.
  ComplexConv2d real_only(2, 3, kEncoderGeom, rng, false);
  auto wi2 = real_only.weight_im().mutable_values();
  std::fill(wi2.begin(), wi2.end(), 0.0);
  ComplexTensor z{random_const({1, 2, 8, 4}, rng), random_const({1, 2, 8, 4}, rng)};
  const auto out = real_only.forward(z);
  const auto ref_re = conv2d(z.re, real_only.weight_re(), Tensor(), kEncoderGeom);
  const auto ref_im = conv2d(z.im, real_only.weight_re(), Tensor(), kEncoderGeom);
  for (std::size_t i = 0; i < out.re.size(); ++i) {
    EXPECT_NEAR(out.re.values()[i], ref_re.values()[i], 1e-14);
    EXPECT_NEAR(out.im.values()[i], ref_im.values()[i], 1e-14);
  }
}

TEST(ComplexConv, OutputSizeArithmetic) {
  Rng rng(8);
  for (std::size_t f : {4u, 8u, 256u}) {
    ComplexConv2d conv(1, 1, kEncoderGeom, rng);
    const auto y = conv.forward({random_const({1, 1, f, 6}, rng), random_const({1, 1, f, 6}, rng)});
    EXPECT_EQ(y.re.dim(2), f / 2);
    EXPECT_EQ(y.re.dim(3), 6u);
  }
}

TEST(ComplexDeconv, AdjointOfConvWithConjugateKernel) {
  // <conv(x; conj K), y> = <x, deconv(y; K)> with <a, b> = sum conj(a) b.
  Rng rng(9);
  ComplexConvTranspose2d deconv(3, 2, kEncoderGeom, rng, false);  // maps 3 -> 2 channels
  ComplexConv2d conv(2, 3, kEncoderGeom, rng, false);
  auto copy = [](Tensor& dst, const Tensor& src, double s) {
    auto d = dst.mutable_values();
    for (std::size_t i = 0; i < d.size(); ++i) d[i] = s * src.values()[i];
  };
  copy(conv.weight_re(), deconv.weight_re(), 1.0);
  copy(conv.weight_im(), deconv.weight_im(), -1.0);
  ComplexTensor x{random_const({2, 2, 8, 5}, rng), random_const({2, 2, 8, 5}, rng)};
  ComplexTensor y{random_const({2, 3, 4, 5}, rng), random_const({2, 3, 4, 5}, rng)};
  const auto cx = conv.forward(x);
  const auto dy = deconv.forward(y, 8, 5);
  auto inner = [](const ComplexTensor& a, const ComplexTensor& b) {
    std::complex<double> acc = 0.0;
    for (std::size_t i = 0; i < a.re.size(); ++i) {
      acc += std::conj(std::complex<double>(a.re.values()[i], a.im.values()[i])) *
             std::complex<double>(b.re.values()[i], b.im.values()[i]);
    }
    return acc;
  };
  const auto lhs = inner(cx, y), rhs = inner(x, dy);
  EXPECT_NEAR(std::abs(lhs - rhs), 0.0, 1e-10 * std::max(1.0, std::abs(lhs)));
}

TEST(ComplexDeconv, IdentityAndZero) {
  Rng rng(10);
  const ConvGeometry one{1, 1, 1, 1, 0, 0, 0, 0};
  ComplexConvTranspose2d d(1, 1, one, rng, false);
  d.weight_re().mutable_values()[0] = 1.0;
  d.weight_im().mutable_values()[0] = 0.0;
  ComplexTensor x{random_const({1, 1, 3, 4}, rng), random_const({1, 1, 3, 4}, rng)};
  const auto y = d.forward(x, 3, 4);
  for (std::size_t i = 0; i < x.re.size(); ++i) EXPECT_EQ(y.re.values()[i], x.re.values()[i]);
  const auto z = d.forward({Tensor::zeros({1, 1, 3, 4}), Tensor::zeros({1, 1, 3, 4})}, 3, 4);
  for (double v : z.re.values()) EXPECT_EQ(v, 0.0);
}

TEST(ComplexLayers, ComplexLinearity) {
  Rng rng(11);
  const std::complex<double> alpha(0.7, -1.3);
  auto scaled = [&](const ComplexTensor& x) {
    std::vector<double> re(x.re.size()), im(x.re.size());
    for (std::size_t i = 0; i < re.size(); ++i) {
      const auto v = alpha * std::complex<double>(x.re.values()[i], x.im.values()[i]);
      re[i] = v.real();
      im[i] = v.imag();
    }
    return ComplexTensor{Tensor::constant(x.re.shape(), re), Tensor::constant(x.re.shape(), im)};
  };
  auto check = [&](const ComplexTensor& fx, const ComplexTensor& fax) {
    const auto expect = scaled(fx);
    for (std::size_t i = 0; i < fx.re.size(); ++i) {
      EXPECT_NEAR(fax.re.values()[i], expect.re.values()[i], 1e-12);
      EXPECT_NEAR(fax.im.values()[i], expect.im.values()[i], 1e-12);
    }
  };
  ComplexTensor x{random_const({1, 2, 8, 4}, rng), random_const({1, 2, 8, 4}, rng)};
  ComplexConv2d conv(2, 3, kEncoderGeom, rng, false);
  check(conv.forward(x), conv.forward(scaled(x)));
  ComplexConvTranspose2d deconv(2, 3, kDecoderGeom, rng, false);
  check(deconv.forward(x, 16, 4), deconv.forward(scaled(x), 16, 4));
  ComplexLinear lin(4, 3, rng, false);
  check(lin.forward(x), lin.forward(scaled(x)));
}

TEST(ComplexLayers, LstmZeroParamsAndCausality) {
  Rng rng(12);
  ComplexLstm cl(3, 4, rng);
  ComplexTensor x{random_const({6, 1, 3}, rng), random_const({6, 1, 3}, rng)};
  const auto base = cl.forward(x);
  for (std::size_t t = 0; t + 1 < 6; ++t) {
    auto pre = x.re.values();
    std::vector<double> v(pre.begin(), pre.end());
    for (std::size_t d = 0; d < 3; ++d) v[(t + 1) * 3 + d] += 1.0;
    const auto out = cl.forward({Tensor::constant({6, 1, 3}, v), x.im});
    for (std::size_t i = 0; i < (t + 1) * 4; ++i) {
      EXPECT_EQ(out.re.values()[i], base.re.values()[i]);
      EXPECT_EQ(out.im.values()[i], base.im.values()[i]);
    }
  }
  ParameterSet ps;
  cl.collect("l", ps);
  for (auto& [name, t] : ps.params) {
    auto v = t.mutable_values();
    std::fill(v.begin(), v.end(), 0.0);
  }
  const auto z = cl.forward(x);
  for (double v : z.re.values()) EXPECT_EQ(v, 0.0);
  for (double v : z.im.values()) EXPECT_EQ(v, 0.0);
}

TEST(BatchNorm, StandardizesPerChannel) {
  Rng rng(13);
  std::vector<double> v(2 * 3 * 10);
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = 5.0 + 3.0 * rng.normal();
  const auto x = Tensor::constant({2, 3, 10}, v);
  const auto g = Tensor::constant({3}, {1, 1, 1}), b = Tensor::constant({3}, {0, 0, 0});
  BatchNormStats stats(3);
  const auto y = batch_norm(x, g, b, stats, true);
  for (std::size_t c = 0; c < 3; ++c) {
    double m = 0.0;
    for (std::size_t o = 0; o < 2; ++o) {
      for (std::size_t i = 0; i < 10; ++i) m += y.values()[(o * 3 + c) * 10 + i];
    }
    EXPECT_LT(std::abs(m / 20.0), 1e-6);
  }
  // Standardized input passes through unchanged up to eps.
  const auto y2 = batch_norm(y, g, b, stats, true);
  for (std::size_t i = 0; i < y.size(); ++i) EXPECT_NEAR(y2.values()[i], y.values()[i], 1e-4);
  // Constant input maps to zero before the affine shift.
  const auto c = batch_norm(Tensor::constant({2, 3, 10}, std::vector<double>(60, 4.0)), g, b, stats, true);
  for (double val : c.values()) EXPECT_EQ(val, 0.0);
  EXPECT_THROW(batch_norm(Tensor::constant({1, 3, 1}, {1, 2, 3}), g, b, stats, true), std::invalid_argument);
}

TEST(Prelu, Definition) {
  const auto x = Tensor::constant({1, 1, 3}, {-2.0, 0.0, 3.0});
  auto y = prelu(x, Tensor::constant({1}, {0.25}));
  EXPECT_EQ(y.values()[0], -0.5);
  EXPECT_EQ(y.values()[2], 3.0);
  y = prelu(x, Tensor::constant({1}, {1.0}));
  EXPECT_EQ(y.values()[0], -2.0);
  y = prelu(x, Tensor::constant({1}, {0.0}));
  EXPECT_EQ(y.values()[0], 0.0);
}

TEST(LinearSigmoid, Basics) {
  EXPECT_EQ(sigmoid(Tensor::scalar(0.0)).item(), 0.5);
  const auto s = sigmoid(Tensor::constant({4}, {-30.0, -1.0, 1.0, 30.0}));
  for (double v : s.values()) {
    EXPECT_GT(v, 0.0);
    EXPECT_LT(v, 1.0);
  }
  const auto x = Tensor::constant({2, 3}, {1, 2, 3, 4, 5, 6});
  const auto eye = Tensor::constant({3, 3}, {1, 0, 0, 0, 1, 0, 0, 0, 1});
  const auto y = linear(x, eye, Tensor::constant({3}, {0, 0, 0}));
  for (std::size_t i = 0; i < 6; ++i) EXPECT_EQ(y.values()[i], x.values()[i]);
}

TEST(Adam, ZeroGradientFirstStepAndBowl) {
  auto p = Tensor::parameter({3}, {1.0, -2.0, 0.5});
  Adam opt({p});
  p.zero_grad();
  opt.step();
  EXPECT_EQ(p.values()[0], 1.0);
  EXPECT_EQ(p.values()[1], -2.0);

  auto q = Tensor::parameter({3}, {1.0, -2.0, 0.5});
  Adam opt2({q});
  q.zero_grad();
  backward(sum(mul(q, Tensor::constant({3}, {3.0, -0.01, 100.0}))));
  opt2.step();
  EXPECT_NEAR(q.values()[0], 1.0 - 1e-3, 1e-9);
  EXPECT_NEAR(q.values()[1], -2.0 + 1e-3, 1e-7);
  EXPECT_NEAR(q.values()[2], 0.5 - 1e-3, 1e-9);

  auto r = Tensor::parameter({2}, {3.0, -4.0});
  Adam opt3({r}, {0.05});
  double prev = 1e300;
  for (int i = 0; i < 100; ++i) {
    opt3.zero_grad();
    const auto loss = sum(mul(r, r));
    EXPECT_LT(loss.item(), prev);
    prev = loss.item();
    backward(loss);
    opt3.step();
  }
}

TEST(Checkpoint, RoundTripAndShapeRejection) {
  const auto path = (std::filesystem::temp_directory_path() / "nbeam_ckpt_test.bin").string();
  Checkpoint c;
  c.meta["step"] = 7;
  c.add("a", {2, 3}, {1, 2, 3, 4, 5, 6});
  c.add("b", {1}, {-0.125});
  save_checkpoint(path, c);
  const auto l = load_checkpoint(path);
  EXPECT_EQ(l.meta["step"], 7);
  EXPECT_EQ(l.get("a").values[4], 5.0);
  EXPECT_EQ(l.get("b").values[0], -0.125);
  std::vector<double> dst(6);
  EXPECT_NO_THROW(l.restore("a", {2, 3}, dst));
  EXPECT_THROW(l.restore("a", {3, 2}, dst), std::runtime_error);
  EXPECT_THROW(l.get("missing"), std::runtime_error);
  std::filesystem::remove(path);
  EXPECT_THROW(load_checkpoint(path), std::runtime_error);
}

TEST(GradCheck, FaultHookIsDetected) {
  Rng rng(14);
  auto x = random_param({3, 4}, rng);
  detail::gradient_fault_op() = "tanh";
  const double err = gradcheck([&] { return probe(tanh(x), 1); }, {x}).max_rel_error;
  detail::gradient_fault_op().clear();
  EXPECT_GT(err, 1e-3);
}
