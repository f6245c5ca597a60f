#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "nbeam/array.hpp"
#include "nbeam/beamloc.hpp"
#include "nbeam/cnn/checkpoint.hpp"
#include "nbeam/cnn/layers.hpp"
#include "nbeam/cnn/ops.hpp"
#include "nbeam/dsp.hpp"
#include "nbeam/rng.hpp"

namespace nbeam {

using cnn::ComplexTensor;
using cnn::Tensor;

// Channel counts follow the real-stacked convention: a width of 16 is 8
// complex channels. `scale` divides every width and the LSTM size.
struct MimoDccrnConfig {
  std::size_t mics = 6;
  std::vector<std::size_t> encoder_channels{16, 32, 64, 128, 256, 256};
  std::size_t kernel_freq = 5, kernel_time = 2;
  std::size_t stride_freq = 2, stride_time = 1;
  std::size_t lstm_hidden = 256;
  std::size_t freq_bins_model = 256;
  std::size_t scale = 1;

  static MimoDccrnConfig desk() {
    MimoDccrnConfig c;
    c.mics = 4;
    c.scale = 4;
    return c;
  }

  // Small enough for an end-to-end finite-difference check.
  static MimoDccrnConfig micro() {
    MimoDccrnConfig c;
    c.mics = 2;
    c.scale = 8;
    c.freq_bins_model = 64;
    return c;
  }

  std::size_t depth() const { return encoder_channels.size(); }

  std::vector<std::size_t> complex_channels() const {
    std::vector<std::size_t> out;
    for (auto c : encoder_channels) out.push_back(c / scale / 2);
    return out;
  }

  std::size_t hidden() const { return lstm_hidden / scale; }

  std::size_t bottleneck_bins() const {
    std::size_t f = freq_bins_model;
    for (std::size_t i = 0; i < depth(); ++i) f /= stride_freq;
    return f;
  }

  cnn::ConvGeometry encoder_geometry() const {
    const std::size_t pf = kernel_freq - 1;
    return {kernel_freq, kernel_time, stride_freq, stride_time, pf / 2, pf - pf / 2, kernel_time - 1, 0};
  }

  cnn::ConvGeometry decoder_geometry() const {
    const std::size_t pf = kernel_freq - 1;
    return {kernel_freq, kernel_time, stride_freq, stride_time, pf / 2, pf - pf / 2, 0, kernel_time - 1};
  }

  void validate() const {
    auto fail = [](const std::string& m) { throw std::invalid_argument("MimoDccrnConfig: " + m); };
    if (mics == 0) fail("mics must be positive");
    if (encoder_channels.empty()) fail("encoder_channels is empty");
    if (scale == 0) fail("scale must be positive");
    for (auto c : encoder_channels) {
      if (c % (2 * scale) != 0 || c / scale / 2 == 0) {
        fail("channel width " + std::to_string(c) + " is not a positive multiple of 2*scale");
      }
    }
    if (kernel_time == 0 || kernel_freq == 0) fail("kernel sizes must be positive");
    if (stride_time != 1) fail("time stride must be 1 for causal frame-rate output");
    if (stride_freq < 1 || kernel_freq < stride_freq) fail("frequency stride must be in [1, kernel_freq]");
    if (lstm_hidden % scale != 0 || hidden() == 0) fail("lstm_hidden must be a positive multiple of scale");
    std::size_t f = freq_bins_model;
    for (std::size_t i = 0; i < depth(); ++i) {
      if (f == 0 || f % stride_freq != 0) {
        fail("freq_bins_model " + std::to_string(freq_bins_model) + " is not divisible by stride^depth");
      }
      f /= stride_freq;
    }
    if (f == 0) fail("bottleneck has no frequency bins");
  }
};

inline void to_json(nlohmann::json& j, const MimoDccrnConfig& c) {
  j = {{"mics", c.mics},
       {"encoder_channels", c.encoder_channels},
       {"kernel", {{"freq", c.kernel_freq}, {"time", c.kernel_time}}},
       {"stride", {{"freq", c.stride_freq}, {"time", c.stride_time}}},
       {"lstm_hidden", c.lstm_hidden},
       {"freq_bins_model", c.freq_bins_model},
       {"scale", c.scale}};
}

inline void from_json(const nlohmann::json& j, MimoDccrnConfig& c) {
  c.mics = j.at("mics");
  c.encoder_channels = j.at("encoder_channels").get<std::vector<std::size_t>>();
  c.kernel_freq = j.at("kernel").at("freq");
  c.kernel_time = j.at("kernel").at("time");
  c.stride_freq = j.at("stride").at("freq");
  c.stride_time = j.at("stride").at("time");
  c.lstm_hidden = j.at("lstm_hidden");
  c.freq_bins_model = j.at("freq_bins_model");
  c.scale = j.at("scale");
}

// Widths are real-stacked like the encoder: [2N, 2N] is N complex channels.
struct NlmConfig {
  std::size_t zones = 12;
  std::vector<std::size_t> conv_channels{24, 24};
  std::vector<std::size_t> linear_sizes{32, 1};

  static NlmConfig for_zones(std::size_t n) {
    return {n, {2 * n, 2 * n}, {32, 1}};
  }

  void validate() const {
    auto fail = [](const std::string& m) { throw std::invalid_argument("NlmConfig: " + m); };
    if (zones < 2) fail("needs at least 2 zones");
    if (conv_channels.size() != 2) fail("expects exactly two conv layers");
    if (conv_channels.back() != 2 * zones) fail("last conv width must be 2N so each zone gets one complex channel");
    for (auto c : conv_channels) {
      if (c == 0 || c % 2 != 0) fail("conv widths must be positive and even");
    }
    if (linear_sizes.size() != 2 || linear_sizes[1] != 1 || linear_sizes[0] == 0) fail("linear sizes must be [H, 1]");
  }
};

inline void to_json(nlohmann::json& j, const NlmConfig& c) {
  j = {{"zones", c.zones}, {"conv_channels", c.conv_channels}, {"linear_sizes", c.linear_sizes}};
}

inline void from_json(const nlohmann::json& j, NlmConfig& c) {
  c.zones = j.at("zones");
  c.conv_channels = j.at("conv_channels").get<std::vector<std::size_t>>();
  c.linear_sizes = j.at("linear_sizes").get<std::vector<std::size_t>>();
}

// ---------------------------------------------------------------- input packing

/// Real [2M, T, F'] tensor with (re, im) interleaved per channel and the DC bin dropped.
inline Tensor pack_input(const Spectrogram& y, std::size_t freq_bins_model) {
  if (y.bins() != freq_bins_model + 1) {
    throw std::invalid_argument("pack_input: spectrogram has " + std::to_string(y.bins()) + " bins, expected " +
                                std::to_string(freq_bins_model + 1));
  }
  const std::size_t M = y.channels(), T = y.frames(), F = freq_bins_model;
  std::vector<double> v(2 * M * T * F);
  for (std::size_t m = 0; m < M; ++m) {
    for (std::size_t t = 0; t < T; ++t) {
      for (std::size_t f = 0; f < F; ++f) {
        v[((2 * m) * T + t) * F + f] = y.at(m, t, f + 1).real();
        v[((2 * m + 1) * T + t) * F + f] = y.at(m, t, f + 1).imag();
      }
    }
  }
  return Tensor::constant({2 * M, T, F}, std::move(v));
}

/// Inverse of pack_input; `dc` supplies the dropped bin ([M x T], or zeros when absent).
inline Spectrogram unpack(const Tensor& packed, const StftConfig& cfg, int sample_rate,
                          std::span<const Complex> dc = {}) {
  if (packed.rank() != 3 || packed.dim(0) % 2 != 0 || packed.dim(2) + 1 != cfg.num_bins()) {
    throw std::invalid_argument("unpack: shape " + cnn::shape_str(packed.shape()) + " does not match the STFT");
  }
  const std::size_t M = packed.dim(0) / 2, T = packed.dim(1), F = packed.dim(2);
  if (!dc.empty() && dc.size() != M * T) throw std::invalid_argument("unpack: DC term has the wrong size");
  Spectrogram y(M, T, cfg.num_bins(), cfg, sample_rate);
  const auto v = packed.values();
  for (std::size_t m = 0; m < M; ++m) {
    for (std::size_t t = 0; t < T; ++t) {
      if (!dc.empty()) y.at(m, t, 0) = dc[m * T + t];
      for (std::size_t f = 0; f < F; ++f) {
        y.at(m, t, f + 1) = {v[((2 * m) * T + t) * F + f], v[((2 * m + 1) * T + t) * F + f]};
      }
    }
  }
  return y;
}

/// Network input [B, M, F', T] (DC dropped) from a batch of spectrograms.
inline ComplexTensor model_input(const std::vector<const Spectrogram*>& ys) {
  const ComplexTensor full = ops::spectrogram_batch(ys);
  const std::size_t F = full.re.dim(2);
  return {cnn::slice(full.re, 2, 1, F), cnn::slice(full.im, 2, 1, F)};
}

/// Reattaches a DC bin equal to the first modeled bin: [B, M, F', T] -> [B, M, F'+1, T].
inline ComplexTensor full_band(const ComplexTensor& d) {
  return {cnn::concat({cnn::slice(d.re, 2, 0, 1), d.re}, 2), cnn::concat({cnn::slice(d.im, 2, 0, 1), d.im}, 2)};
}

/// Batch item `b` of full-band decoder output D (the w^H form) as weights w = conj(D).
inline FilterWeights to_filter_weights(const ComplexTensor& d_full, std::size_t b) {
  const auto& s = d_full.re.shape();
  const std::size_t M = s[1], F = s[2], T = s[3];
  FilterWeights w(M, T, F);
  const auto re = d_full.re.values(), im = d_full.im.values();
  for (std::size_t m = 0; m < M; ++m) {
    for (std::size_t f = 0; f < F; ++f) {
      for (std::size_t t = 0; t < T; ++t) {
        const std::size_t i = ((b * M + m) * F + f) * T + t;
        w.at(m, t, f) = {re[i], -im[i]};
      }
    }
  }
  return w;
}

// ---------------------------------------------------------------- networks

class MimoDccrn {
 public:
  MimoDccrn(const MimoDccrnConfig& cfg, Rng& rng) : cfg_(cfg) {
    cfg_.validate();
    const auto ch = cfg_.complex_channels();
    const auto eg = cfg_.encoder_geometry();
    const auto dg = cfg_.decoder_geometry();
    std::size_t in = cfg_.mics;
    for (std::size_t i = 0; i < ch.size(); ++i) {
      enc_conv_.emplace_back(in, ch[i], eg, rng);
      enc_bn_.emplace_back(ch[i]);
      enc_act_.emplace_back(ch[i]);
      in = ch[i];
    }
    const std::size_t flat = ch.back() * cfg_.bottleneck_bins();
    lstm_ = cnn::ComplexLstm(flat, cfg_.hidden(), rng);
    proj_ = cnn::ComplexLinear(cfg_.hidden(), flat, rng);
    for (std::size_t k = ch.size(); k-- > 0;) {
      const std::size_t out = k == 0 ? cfg_.mics : ch[k - 1];
      dec_conv_.emplace_back(2 * ch[k], out, dg, rng);
      if (k > 0) {
        dec_bn_.emplace_back(out);
        dec_act_.emplace_back(out);
      }
    }
  }

  const MimoDccrnConfig& config() const { return cfg_; }

  /// [B, M, F', T] -> decoder output D of the same shape, the w^H form.
  /// `encoder_shapes` optionally records each encoder block's output shape.
  ComplexTensor forward(const ComplexTensor& x, bool training, std::vector<cnn::Shape>* encoder_shapes = nullptr) {
    const auto& s = x.re.shape();
    if (s.size() != 4 || s[1] != cfg_.mics || s[2] != cfg_.freq_bins_model) {
      throw std::invalid_argument("MimoDccrn: input " + cnn::shape_str(s) + " does not match [B, " +
                                  std::to_string(cfg_.mics) + ", " + std::to_string(cfg_.freq_bins_model) + ", T]");
    }
    const std::size_t B = s[0], T = s[3];
    std::vector<ComplexTensor> skips;
    ComplexTensor h = x;
    for (std::size_t i = 0; i < enc_conv_.size(); ++i) {
      h = enc_act_[i].forward(enc_bn_[i].forward(enc_conv_[i].forward(h), training));
      if (encoder_shapes) encoder_shapes->push_back(h.re.shape());
      skips.push_back(h);
    }

    const std::size_t C = h.re.dim(1), Fb = h.re.dim(2);
    auto to_seq = [&](const Tensor& t) { return cnn::reshape(cnn::permute(t, {3, 0, 1, 2}), {T, B, C * Fb}); };
    auto from_seq = [&](const Tensor& t) { return cnn::permute(cnn::reshape(t, {T, B, C, Fb}), {1, 2, 3, 0}); };
    const ComplexTensor z = proj_.forward(lstm_.forward({to_seq(h.re), to_seq(h.im)}));
    h = {from_seq(z.re), from_seq(z.im)};

    for (std::size_t j = 0; j < dec_conv_.size(); ++j) {
      const std::size_t k = dec_conv_.size() - 1 - j;
      const ComplexTensor in{cnn::concat({h.re, skips[k].re}, 1), cnn::concat({h.im, skips[k].im}, 1)};
      h = dec_conv_[j].forward(in, in.re.dim(2) * cfg_.stride_freq, T);
      if (k > 0) h = dec_act_[j].forward(dec_bn_[j].forward(h, training));
    }
    return h;
  }

  void collect(const std::string& prefix, cnn::ParameterSet& ps) {
    for (std::size_t i = 0; i < enc_conv_.size(); ++i) {
      const std::string p = prefix + "encoder." + std::to_string(i);
      enc_conv_[i].collect(p + ".conv", ps);
      enc_bn_[i].collect(p + ".bn", ps);
      enc_act_[i].collect(p + ".prelu", ps);
    }
    lstm_.collect(prefix + "bottleneck.lstm", ps);
    proj_.collect(prefix + "bottleneck.linear", ps);
    for (std::size_t j = 0; j < dec_conv_.size(); ++j) {
      const std::string p = prefix + "decoder." + std::to_string(j);
      dec_conv_[j].collect(p + ".deconv", ps);
      if (j < dec_bn_.size()) {
        dec_bn_[j].collect(p + ".bn", ps);
        dec_act_[j].collect(p + ".prelu", ps);
      }
    }
  }

 private:
  MimoDccrnConfig cfg_;
  std::vector<cnn::ComplexConv2d> enc_conv_;
  std::vector<cnn::ComplexBatchNorm> enc_bn_;
  std::vector<cnn::PRelu> enc_act_;
  cnn::ComplexLstm lstm_;
  cnn::ComplexLinear proj_;
  std::vector<cnn::ComplexConvTranspose2d> dec_conv_;
  std::vector<cnn::ComplexBatchNorm> dec_bn_;
  std::vector<cnn::PRelu> dec_act_;
};

// Two complex conv blocks over the weights as an M-channel image, magnitude,
// frequency mean, then a shared per-zone 1 -> H -> 1 head with a sigmoid.
class NlmHead {
 public:
  NlmHead(std::size_t mics, const NlmConfig& cfg, const cnn::ConvGeometry& geom, Rng& rng) : cfg_(cfg) {
    cfg_.validate();
    const std::size_t c1 = cfg_.conv_channels[0] / 2, c2 = cfg_.conv_channels[1] / 2;
    conv1_ = cnn::ComplexConv2d(mics, c1, geom, rng);
    bn1_ = cnn::ComplexBatchNorm(c1);
    act1_ = cnn::PRelu(c1);
    conv2_ = cnn::ComplexConv2d(c1, c2, geom, rng);
    bn2_ = cnn::ComplexBatchNorm(c2);
    act2_ = cnn::PRelu(c2);
    fc1_ = cnn::Linear(1, cfg_.linear_sizes[0], rng);
    act3_ = cnn::PRelu(cfg_.linear_sizes[0]);
    fc2_ = cnn::Linear(cfg_.linear_sizes[0], 1, rng);
  }

  const NlmConfig& config() const { return cfg_; }

  /// Weights w [B, M, F, T] -> zone probabilities [B, T, N].
  Tensor forward(const ComplexTensor& w, bool training) {
    ComplexTensor h = act1_.forward(bn1_.forward(conv1_.forward(w), training));
    h = act2_.forward(bn2_.forward(conv2_.forward(h), training));
    const std::size_t B = h.re.dim(0), N = h.re.dim(1), T = h.re.dim(3);
    Tensor pooled = cnn::mean_axis(cnn::magnitude(h.re, h.im), 2);  // [B, N, T]
    Tensor feat = cnn::reshape(cnn::permute(pooled, {0, 2, 1}), {B, T, N, 1});
    Tensor hid = act3_.forward(fc1_.forward(feat), 3);
    return cnn::reshape(cnn::sigmoid(fc2_.forward(hid)), {B, T, N});
  }

  void collect(const std::string& prefix, cnn::ParameterSet& ps) {
    conv1_.collect(prefix + "conv.0", ps);
    bn1_.collect(prefix + "bn.0", ps);
    act1_.collect(prefix + "prelu.0", ps);
    conv2_.collect(prefix + "conv.1", ps);
    bn2_.collect(prefix + "bn.1", ps);
    act2_.collect(prefix + "prelu.1", ps);
    fc1_.collect(prefix + "linear.0", ps);
    act3_.collect(prefix + "prelu.2", ps);
    fc2_.collect(prefix + "linear.1", ps);
  }

 private:
  NlmConfig cfg_;
  cnn::ComplexConv2d conv1_, conv2_;
  cnn::ComplexBatchNorm bn1_, bn2_;
  cnn::PRelu act1_, act2_, act3_;
  cnn::Linear fc1_, fc2_;
};

struct NetworkConfig {
  MimoDccrnConfig dccrn = MimoDccrnConfig::desk();
  std::optional<NlmConfig> nlm = NlmConfig::for_zones(12);
};

inline void to_json(nlohmann::json& j, const NetworkConfig& c) {
  j = {{"dccrn", c.dccrn}, {"nlm", c.nlm ? nlohmann::json(*c.nlm) : nlohmann::json(nullptr)}};
}

inline void from_json(const nlohmann::json& j, NetworkConfig& c) {
  c.dccrn = j.at("dccrn").get<MimoDccrnConfig>();
  if (j.contains("nlm") && !j.at("nlm").is_null()) {
    c.nlm = j.at("nlm").get<NlmConfig>();
  } else {
    c.nlm.reset();
  }
}

struct NetworkOutput {
  ComplexTensor decoder;    // [B, M, F', T]
  ComplexTensor full_band;  // [B, M, F'+1, T], DC copied from the first modeled bin
  Tensor nlm;               // [B, T, N], undefined without a head
};

/// MIMO-DCCRN plus the optional neural localization head, with shared
/// train/eval state and parameter bookkeeping.
class NeuralBeamformer {
 public:
  NeuralBeamformer(const NetworkConfig& cfg, std::uint64_t seed) : cfg_(cfg), rng_(seed), dccrn_(cfg.dccrn, rng_) {
    if (cfg_.nlm) nlm_.emplace(cfg_.dccrn.mics, *cfg_.nlm, cfg_.dccrn.encoder_geometry(), rng_);
    dccrn_.collect("dccrn.", params_);
    if (nlm_) nlm_->collect("nlm.", params_);
  }

  NeuralBeamformer(const NeuralBeamformer&) = delete;
  NeuralBeamformer& operator=(const NeuralBeamformer&) = delete;

  const NetworkConfig& config() const { return cfg_; }
  std::size_t mics() const { return cfg_.dccrn.mics; }
  bool has_nlm() const { return nlm_.has_value(); }
  cnn::ParameterSet& parameters() { return params_; }
  MimoDccrn& dccrn() { return dccrn_; }

  NetworkOutput forward(const ComplexTensor& x, bool training) {
    NetworkOutput out;
    out.decoder = dccrn_.forward(x, training);
    out.full_band = full_band(out.decoder);
    if (nlm_) out.nlm = nlm_->forward({out.decoder.re, cnn::neg(out.decoder.im)}, training);
    return out;
  }

  /// Inference-mode pass over one utterance.
  InferenceOutput infer(const Spectrogram& y) {
    cnn::NoGradGuard guard;
    const NetworkOutput out = forward(model_input({&y}), false);
    InferenceOutput res{to_filter_weights(out.full_band, 0), std::nullopt};
    if (out.nlm.defined()) {
      LocalizationMap z(y.frames(), out.nlm.dim(2));
      std::copy(out.nlm.values().begin(), out.nlm.values().end(), z.data().begin());
      res.nlm_map = std::move(z);
    }
    return res;
  }

  void save_to(cnn::Checkpoint& ckpt) const {
    ckpt.meta["network"] = cfg_;
    for (const auto& [name, t] : params_.params) {
      ckpt.add(name, t.shape(), {t.values().begin(), t.values().end()});
    }
    for (const auto& [name, buf] : params_.buffers) ckpt.add(name, {buf->size()}, *buf);
  }

  void load_from(const cnn::Checkpoint& ckpt) {
    for (auto& [name, t] : params_.params) ckpt.restore(name, t.shape(), t.mutable_values());
    for (auto& [name, buf] : params_.buffers) ckpt.restore(name, {buf->size()}, *buf);
  }

 private:
  NetworkConfig cfg_;
  Rng rng_;
  MimoDccrn dccrn_;
  std::optional<NlmHead> nlm_;
  cnn::ParameterSet params_;
};

}  // namespace nbeam
