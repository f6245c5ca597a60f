#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <optional>
#include <ostream>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "nbeam/array.hpp"
#include "nbeam/cnn/ops.hpp"
#include "nbeam/cnn/tensor.hpp"
#include "nbeam/dsp.hpp"

namespace nbeam {

// Beamformer coefficients w_m(t, f), [M x T x F]. Filtering uses w^H y.
class FilterWeights {
 public:
  FilterWeights() = default;
  FilterWeights(std::size_t mics, std::size_t frames, std::size_t bins)
      : data_(mics * frames * bins), mics_(mics), frames_(frames), bins_(bins) {}

  std::size_t mics() const { return mics_; }
  std::size_t frames() const { return frames_; }
  std::size_t bins() const { return bins_; }
  Complex& at(std::size_t m, std::size_t t, std::size_t f) { return data_[(m * frames_ + t) * bins_ + f]; }
  const Complex& at(std::size_t m, std::size_t t, std::size_t f) const { return data_[(m * frames_ + t) * bins_ + f]; }
  std::span<Complex> data() { return data_; }
  std::span<const Complex> data() const { return data_; }

  bool all_finite() const {
    return std::all_of(data_.begin(), data_.end(),
                       [](const Complex& c) { return std::isfinite(c.real()) && std::isfinite(c.imag()); });
  }

 private:
  std::vector<Complex> data_;
  std::size_t mics_ = 0, frames_ = 0, bins_ = 0;
};

/// S(t, f) = w^H(t, f) y(t, f), single-channel output.
inline Spectrogram filter_and_sum(const FilterWeights& w, const Spectrogram& y) {
  if (w.mics() != y.channels() || w.frames() != y.frames() || w.bins() != y.bins()) {
    throw std::invalid_argument("filter_and_sum: weights and spectrogram shapes differ");
  }
  Spectrogram out(1, y.frames(), y.bins(), y.config(), y.sample_rate());
  for (std::size_t m = 0; m < y.channels(); ++m) {
    for (std::size_t t = 0; t < y.frames(); ++t) {
      for (std::size_t f = 0; f < y.bins(); ++f) out.at(0, t, f) += std::conj(w.at(m, t, f)) * y.at(m, t, f);
    }
  }
  return out;
}

/// Distortionless index: z_n(t) = mean over the used bins of |w^H(t,f) a_n(f)|.
/// `max_bin` (inclusive) optionally band-limits the average.
inline LocalizationMap splm_map(const FilterWeights& w, const SteeringSet& steering,
                                std::optional<std::size_t> max_bin = std::nullopt) {
  if (w.mics() != steering.mics() || w.bins() != steering.bins()) {
    throw std::invalid_argument("splm_map: weights and steering set disagree on mics or bins");
  }
  const std::size_t F = max_bin ? std::min(*max_bin + 1, w.bins()) : w.bins();
  LocalizationMap z(w.frames(), steering.zones());
  for (std::size_t t = 0; t < w.frames(); ++t) {
    for (std::size_t n = 0; n < steering.zones(); ++n) {
      double acc = 0.0;
      for (std::size_t f = 0; f < F; ++f) {
        Complex r = 0.0;
        const auto a = steering.vector(n, f);
        for (std::size_t m = 0; m < w.mics(); ++m) r += std::conj(w.at(m, t, f)) * a[m];
        acc += std::abs(r);
      }
      z.at(t, n) = acc / static_cast<double>(F);
    }
  }
  return z;
}

/// Per-frame argmax zone (1-based); ties resolve to the lowest index.
inline std::vector<int> localize(const LocalizationMap& z) {
  if (z.zones() == 0) throw std::invalid_argument("localize: map has no zones");
  std::vector<int> out(z.frames());
  for (std::size_t t = 0; t < z.frames(); ++t) {
    const auto row = z.row(t);
    out[t] = static_cast<int>(std::max_element(row.begin(), row.end()) - row.begin()) + 1;
  }
  return out;
}

struct VadResult {
  std::vector<double> scores;  // row max clamped to [0, 1]
  std::vector<bool> active;    // score > threshold
};

inline VadResult vad(const LocalizationMap& z, double threshold = 0.5) {
  VadResult r;
  r.scores.resize(z.frames());
  r.active.resize(z.frames());
  for (std::size_t t = 0; t < z.frames(); ++t) {
    const auto row = z.row(t);
    const double m = row.empty() ? 0.0 : *std::max_element(row.begin(), row.end());
    r.scores[t] = std::clamp(m, 0.0, 1.0);
    r.active[t] = r.scores[t] > threshold;
  }
  return r;
}

struct LocalizationResult {
  std::vector<int> zone_track;
  std::vector<double> vad_scores;
  std::vector<bool> vad_active;
  LocalizationMap map;  // raw scores
};

inline LocalizationResult make_localization(LocalizationMap map, double threshold = 0.5) {
  LocalizationResult r;
  r.zone_track = localize(map);
  auto v = vad(map, threshold);
  r.vad_scores = std::move(v.scores);
  r.vad_active = std::move(v.active);
  r.map = std::move(map);
  return r;
}

enum class LocalizationMode { kSplm, kNlm };

inline LocalizationMode parse_localization_mode(const std::string& s) {
  if (s == "splm") return LocalizationMode::kSplm;
  if (s == "nlm") return LocalizationMode::kNlm;
  throw std::invalid_argument("unknown localization mode '" + s + "' (expected splm or nlm)");
}

// What a beamforming model hands back for one utterance.
struct InferenceOutput {
  FilterWeights weights;
  std::optional<LocalizationMap> nlm_map;
};

struct EnhanceOptions {
  LocalizationMode mode = LocalizationMode::kSplm;
  double vad_threshold = 0.5;
  std::optional<double> splm_max_hz;
};

struct EnhanceResult {
  Waveform enhanced;  // one channel, input length
  LocalizationResult localization;
};

/// stft -> model -> filter-and-sum -> istft, plus localization from the
/// chosen head. Frames whose input is exactly zero on every channel get an
/// all-zero map row. `Model` needs `std::size_t mics() const` and
/// `InferenceOutput infer(const Spectrogram&)`.
template <typename Model>
EnhanceResult enhance_utterance(const Waveform& noisy, Model& model, const SteeringSet* steering,
                                const StftConfig& cfg, const EnhanceOptions& opts = {}) {
  if (noisy.channels() != model.mics()) {
    throw std::invalid_argument("enhance_utterance: input has " + std::to_string(noisy.channels()) +
                                " channels, model expects " + std::to_string(model.mics()));
  }
  if (noisy.empty()) throw std::invalid_argument("enhance_utterance: empty input");
  const Spectrogram y = stft(noisy, cfg);
  InferenceOutput out = model.infer(y);
  const Spectrogram s = filter_and_sum(out.weights, y);
  Waveform full = istft(s);
  EnhanceResult res;
  res.enhanced = Waveform(1, noisy.samples(), noisy.sample_rate());
  std::copy_n(full.channel(0).begin(), std::min(full.samples(), noisy.samples()), res.enhanced.channel(0).begin());

  LocalizationMap map;
  if (opts.mode == LocalizationMode::kNlm) {
    if (!out.nlm_map) throw std::invalid_argument("enhance_utterance: model has no neural localization head");
    map = std::move(*out.nlm_map);
  } else {
    if (!steering) throw std::invalid_argument("enhance_utterance: SPLM mode needs a steering set");
    std::optional<std::size_t> max_bin;
    if (opts.splm_max_hz) {
      max_bin = static_cast<std::size_t>(std::floor(*opts.splm_max_hz * cfg.fft_size() / noisy.sample_rate()));
    }
    map = splm_map(out.weights, *steering, max_bin);
  }
  for (std::size_t t = 0; t < y.frames(); ++t) {
    bool silent = true;
    for (std::size_t m = 0; m < y.channels() && silent; ++m) {
      for (const auto& v : y.frame(m, t)) {
        if (v != Complex(0.0)) {
          silent = false;
          break;
        }
      }
    }
    if (silent) std::fill(map.row(t).begin(), map.row(t).end(), 0.0);
  }
  res.localization = make_localization(std::move(map), opts.vad_threshold);
  return res;
}

// Data-driven delay-and-sum: w(t,f) = y(t,f) / (|y(t,f)| sqrt(M)). For a
// single plane wave this is a(f)/M up to a common phase.
class OracleSteeringModel {
 public:
  explicit OracleSteeringModel(std::size_t mics) : mics_(mics) {}
  std::size_t mics() const { return mics_; }

  InferenceOutput infer(const Spectrogram& y) const {
    FilterWeights w(y.channels(), y.frames(), y.bins());
    const double root_m = std::sqrt(static_cast<double>(y.channels()));
    for (std::size_t t = 0; t < y.frames(); ++t) {
      for (std::size_t f = 0; f < y.bins(); ++f) {
        double norm = 0.0;
        for (std::size_t m = 0; m < y.channels(); ++m) norm += std::norm(y.at(m, t, f));
        norm = std::sqrt(norm);
        if (norm == 0.0) continue;
        for (std::size_t m = 0; m < y.channels(); ++m) w.at(m, t, f) = y.at(m, t, f) / (norm * root_m);
      }
    }
    return {std::move(w), std::nullopt};
  }

 private:
  std::size_t mics_;
};

// Selects one microphone; the pass-through baseline.
class SelectorModel {
 public:
  SelectorModel(std::size_t mics, std::size_t ref = 0) : mics_(mics), ref_(ref) {}
  std::size_t mics() const { return mics_; }

  InferenceOutput infer(const Spectrogram& y) const {
    FilterWeights w(y.channels(), y.frames(), y.bins());
    for (std::size_t t = 0; t < y.frames(); ++t) {
      for (std::size_t f = 0; f < y.bins(); ++f) w.at(ref_, t, f) = 1.0;
    }
    return {std::move(w), std::nullopt};
  }

 private:
  std::size_t mics_, ref_;
};

/// Per-frame rows: frame_index, time_s, zone, vad_score, z_1..z_N.
inline void write_localization_csv(std::ostream& os, const LocalizationResult& r, std::size_t hop, int sample_rate) {
  os << "frame_index,time_s,zone,vad_score";
  for (std::size_t n = 0; n < r.map.zones(); ++n) os << ",z_" << n + 1;
  os << '\n';
  char buf[64];
  for (std::size_t t = 0; t < r.map.frames(); ++t) {
    std::snprintf(buf, sizeof buf, "%.6f", static_cast<double>(t * hop) / sample_rate);
    os << t << ',' << buf << ',' << r.zone_track[t];
    std::snprintf(buf, sizeof buf, "%.6f", r.vad_scores[t]);
    os << ',' << buf;
    for (double v : r.map.row(t)) {
      std::snprintf(buf, sizeof buf, "%.6g", v);
      os << ',' << buf;
    }
    os << '\n';
  }
}

// ---------------------------------------------------------------- differentiable counterparts

namespace ops {

using cnn::ComplexTensor;
using cnn::Tensor;

/// Complex spectra of shape [B, M, F, T] from per-item spectrograms, as constants.
inline ComplexTensor spectrogram_batch(const std::vector<const Spectrogram*>& ys) {
  if (ys.empty()) throw std::invalid_argument("spectrogram_batch: empty batch");
  const std::size_t M = ys[0]->channels(), T = ys[0]->frames(), F = ys[0]->bins();
  std::vector<double> re(ys.size() * M * F * T), im(re.size());
  for (std::size_t b = 0; b < ys.size(); ++b) {
    if (ys[b]->channels() != M || ys[b]->frames() != T || ys[b]->bins() != F) {
      throw std::invalid_argument("spectrogram_batch: items differ in shape");
    }
    for (std::size_t m = 0; m < M; ++m) {
      for (std::size_t t = 0; t < T; ++t) {
        for (std::size_t f = 0; f < F; ++f) {
          const std::size_t i = ((b * M + m) * F + f) * T + t;
          re[i] = ys[b]->at(m, t, f).real();
          im[i] = ys[b]->at(m, t, f).imag();
        }
      }
    }
  }
  const cnn::Shape s{ys.size(), M, F, T};
  return {Tensor::constant(s, std::move(re)), Tensor::constant(s, std::move(im))};
}

/// sum_m D_m Y_m where D holds w^H (the conjugated weights). [B, M, F, T] -> [B, F, T].
inline ComplexTensor filter_and_sum(const ComplexTensor& d, const ComplexTensor& y) {
  using namespace cnn;
  return {sum_axis(sub(mul(d.re, y.re), mul(d.im, y.im)), 1), sum_axis(add(mul(d.re, y.im), mul(d.im, y.re)), 1)};
}

/// Inverse STFT of one-sided spectra [B, F, T] to waveforms [B, synthesis_length(T)].
inline Tensor istft(const ComplexTensor& spec, const StftConfig& cfg) {
  const auto& s = spec.re.shape();
  if (s.size() != 3 || s[1] != cfg.num_bins()) throw std::invalid_argument("ops::istft: expects [B, F, T]");
  const std::size_t B = s[0], F = s[1], T = s[2], L = cfg.synthesis_length(T);
  std::vector<double> out(B * L);
  std::vector<Complex> frames(T * F);
  for (std::size_t b = 0; b < B; ++b) {
    for (std::size_t f = 0; f < F; ++f) {
      for (std::size_t t = 0; t < T; ++t) {
        const std::size_t i = (b * F + f) * T + t;
        frames[t * F + f] = {spec.re.values()[i], spec.im.values()[i]};
      }
    }
    const auto y = istft_channel(frames, T, cfg);
    std::copy(y.begin(), y.end(), out.begin() + static_cast<std::ptrdiff_t>(b * L));
  }
  return cnn::make_result("istft", {B, L}, std::move(out), {spec.re, spec.im}, [B, F, T, L, cfg](cnn::Node& self) {
    cnn::Node* gre = cnn::grad_target(self, 0);
    cnn::Node* gim = cnn::grad_target(self, 1);
    std::vector<double> dre(T * F), dim(T * F);
    for (std::size_t b = 0; b < B; ++b) {
      std::fill(dre.begin(), dre.end(), 0.0);
      std::fill(dim.begin(), dim.end(), 0.0);
      istft_channel_adjoint(std::span<const double>(self.grad).subspan(b * L, L), T, cfg, dre, dim);
      for (std::size_t f = 0; f < F; ++f) {
        for (std::size_t t = 0; t < T; ++t) {
          const std::size_t i = (b * F + f) * T + t;
          if (gre) gre->grad[i] += dre[t * F + f];
          if (gim) gim->grad[i] += dim[t * F + f];
        }
      }
    }
  });
}

/// Differentiable distortionless index over conjugated weights D [B, M, F, T]:
/// out[b, t, n] = mean_f |sum_m D_m a_{n,m}(f)|, shape [B, T, N].
inline Tensor steered_response(const ComplexTensor& d, const SteeringSet& steering) {
  const auto& s = d.re.shape();
  if (s.size() != 4 || s[1] != steering.mics() || s[2] != steering.bins()) {
    throw std::invalid_argument("ops::steered_response: weights do not match steering set");
  }
  const std::size_t B = s[0], M = s[1], F = s[2], T = s[3], N = steering.zones();
  const auto dr = d.re.values(), di = d.im.values();
  std::vector<double> out(B * T * N, 0.0);
  for (std::size_t b = 0; b < B; ++b) {
    for (std::size_t n = 0; n < N; ++n) {
      for (std::size_t f = 0; f < F; ++f) {
        const auto a = steering.vector(n, f);
        for (std::size_t t = 0; t < T; ++t) {
          Complex r = 0.0;
          for (std::size_t m = 0; m < M; ++m) {
            const std::size_t i = ((b * M + m) * F + f) * T + t;
            r += Complex(dr[i], di[i]) * a[m];
          }
          out[(b * T + t) * N + n] += std::abs(r) / static_cast<double>(F);
        }
      }
    }
  }
  return cnn::make_result(
      "steered_response", {B, T, N}, std::move(out), {d.re, d.im}, [B, M, F, T, N, steering](cnn::Node& self) {
        cnn::Node* gre = cnn::grad_target(self, 0);
        cnn::Node* gim = cnn::grad_target(self, 1);
        const auto& dr = self.parents[0]->value;
        const auto& di = self.parents[1]->value;
        for (std::size_t b = 0; b < B; ++b) {
          for (std::size_t n = 0; n < N; ++n) {
            for (std::size_t f = 0; f < F; ++f) {
              const auto a = steering.vector(n, f);
              for (std::size_t t = 0; t < T; ++t) {
                Complex r = 0.0;
                for (std::size_t m = 0; m < M; ++m) {
                  const std::size_t i = ((b * M + m) * F + f) * T + t;
                  r += Complex(dr[i], di[i]) * a[m];
                }
                const double mag = std::abs(r);
                if (mag == 0.0) continue;
                const double g = self.grad[(b * T + t) * N + n] / (static_cast<double>(F) * mag);
                for (std::size_t m = 0; m < M; ++m) {
                  const std::size_t i = ((b * M + m) * F + f) * T + t;
                  if (gre) gre->grad[i] += g * (r.real() * a[m].real() + r.imag() * a[m].imag());
                  if (gim) gim->grad[i] += g * (-r.real() * a[m].imag() + r.imag() * a[m].real());
                }
              }
            }
          }
        }
      });
}

}  // namespace ops

}  // namespace nbeam
