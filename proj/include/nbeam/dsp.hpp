#pragma once

#include <algorithm>
#include <cmath>
#include <complex>
#include <cstddef>
#include <numbers>
#include <span>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include <unsupported/Eigen/FFT>

namespace nbeam {

using Complex = std::complex<double>;

// Time-domain multichannel signal, stored channel-major.
class Waveform {
 public:
  Waveform() = default;
  Waveform(std::size_t channels, std::size_t samples, int sample_rate)
      : data_(channels * samples, 0.0), channels_(channels), samples_(samples),
        sample_rate_(sample_rate) {
    if (sample_rate <= 0) throw std::invalid_argument("Waveform: sample_rate must be positive");
  }

  static Waveform mono(std::vector<double> samples, int sample_rate) {
    Waveform w(1, samples.size(), sample_rate);
    w.data_ = std::move(samples);
    return w;
  }

  std::size_t channels() const { return channels_; }
  std::size_t samples() const { return samples_; }
  int sample_rate() const { return sample_rate_; }
  bool empty() const { return samples_ == 0 || channels_ == 0; }

  std::span<double> channel(std::size_t c) { return {data_.data() + c * samples_, samples_}; }
  std::span<const double> channel(std::size_t c) const {
    return {data_.data() + c * samples_, samples_};
  }
  double& at(std::size_t c, std::size_t n) { return data_[c * samples_ + n]; }
  double at(std::size_t c, std::size_t n) const { return data_[c * samples_ + n]; }

  std::span<double> data() { return data_; }
  std::span<const double> data() const { return data_; }

  // Single-channel copy of channel c.
  Waveform select(std::size_t c) const {
    Waveform w(1, samples_, sample_rate_);
    std::copy_n(data_.begin() + static_cast<std::ptrdiff_t>(c * samples_), samples_, w.data_.begin());
    return w;
  }

  bool all_finite() const {
    return std::all_of(data_.begin(), data_.end(), [](double v) { return std::isfinite(v); });
  }

 private:
  std::vector<double> data_;
  std::size_t channels_ = 0;
  std::size_t samples_ = 0;
  int sample_rate_ = 16000;
};

/// Periodic (DFT-even) Hann window: w[i] = 0.5 - 0.5 cos(2 pi i / length).
inline std::vector<double> hann_window(std::size_t length) {
  if (length < 2) throw std::invalid_argument("hann_window: length must be >= 2");
  std::vector<double> w(length);
  for (std::size_t i = 0; i < length; ++i) {
    w[i] = 0.5 - 0.5 * std::cos(2.0 * std::numbers::pi * static_cast<double>(i) /
                                static_cast<double>(length));
  }
  return w;
}

/// Analysis/synthesis settings. Construction validates that the squared
/// window overlap-adds to a constant at the hop, which is what makes the
/// weighted overlap-add in istft an exact inverse on the interior.
class StftConfig {
 public:
  static StftConfig create(std::vector<double> window, std::size_t hop, std::size_t fft_size) {
    const std::size_t len = window.size();
    if (len < 2) throw std::invalid_argument("StftConfig: window too short");
    if (hop == 0 || hop > len) throw std::invalid_argument("StftConfig: need 0 < hop <= window_length");
    if (len > fft_size) throw std::invalid_argument("StftConfig: need window_length <= fft_size");
    if (fft_size % 2 != 0) throw std::invalid_argument("StftConfig: fft_size must be even");

    // Sum of squared window over all shifts by hop, sampled on one hop period.
    std::vector<double> ola(hop, 0.0);
    for (std::size_t n = 0; n < len; ++n) ola[n % hop] += window[n] * window[n];
    const double ref = ola[0];
    for (double v : ola) {
      if (!(ref > 0.0) || std::abs(v - ref) > 1e-10 * ref) {
        throw std::invalid_argument("StftConfig: window/hop pair is not overlap-add constant");
      }
    }
    StftConfig cfg;
    cfg.window_ = std::move(window);
    cfg.hop_ = hop;
    cfg.fft_size_ = fft_size;
    cfg.ola_norm_ = ref;
    return cfg;
  }

  static StftConfig hann(std::size_t window_length, std::size_t hop, std::size_t fft_size) {
    return create(hann_window(window_length), hop, fft_size);
  }

  // 25 ms Hann, 6.25 ms hop, 512-point FFT at 16 kHz.
  static StftConfig speech_default() { return hann(400, 100, 512); }

  std::size_t window_length() const { return window_.size(); }
  std::size_t hop() const { return hop_; }
  std::size_t fft_size() const { return fft_size_; }
  std::size_t num_bins() const { return fft_size_ / 2 + 1; }
  const std::vector<double>& window() const { return window_; }
  double ola_norm() const { return ola_norm_; }

  // T = 1 + floor((N - L) / hop) for N >= L, else 1. Frames start at sample 0.
  std::size_t num_frames(std::size_t num_samples) const {
    if (num_samples < window_.size()) return 1;
    return 1 + (num_samples - window_.size()) / hop_;
  }

  // Length of the istft output for T frames.
  std::size_t synthesis_length(std::size_t frames) const {
    return frames == 0 ? 0 : (frames - 1) * hop_ + window_.size();
  }

  bool operator==(const StftConfig&) const = default;

 private:
  StftConfig() = default;
  std::vector<double> window_;
  std::size_t hop_ = 0;
  std::size_t fft_size_ = 0;
  double ola_norm_ = 1.0;
};

/// Complex STFT tensor [channels x frames x bins].
class Spectrogram {
 public:
  Spectrogram(std::size_t channels, std::size_t frames, std::size_t bins, StftConfig cfg, int sample_rate)
      : data_(channels * frames * bins), channels_(channels), frames_(frames), bins_(bins),
        config_(std::move(cfg)), sample_rate_(sample_rate) {}

  std::size_t channels() const { return channels_; }
  std::size_t frames() const { return frames_; }
  std::size_t bins() const { return bins_; }
  const StftConfig& config() const { return config_; }
  int sample_rate() const { return sample_rate_; }

  Complex& at(std::size_t m, std::size_t t, std::size_t f) { return data_[(m * frames_ + t) * bins_ + f]; }
  const Complex& at(std::size_t m, std::size_t t, std::size_t f) const {
    return data_[(m * frames_ + t) * bins_ + f];
  }
  std::span<Complex> frame(std::size_t m, std::size_t t) { return {&at(m, t, 0), bins_}; }
  std::span<const Complex> frame(std::size_t m, std::size_t t) const { return {&at(m, t, 0), bins_}; }
  std::span<Complex> data() { return data_; }
  std::span<const Complex> data() const { return data_; }

 private:
  std::vector<Complex> data_;
  std::size_t channels_ = 0;
  std::size_t frames_ = 0;
  std::size_t bins_ = 0;
  StftConfig config_;
  int sample_rate_ = 16000;
};

// Thin wrapper over Eigen's kissfft backend for one-sided real transforms.
class RealFft {
 public:
  explicit RealFft(std::size_t n) : n_(n) { fft_.SetFlag(Eigen::FFT<double>::HalfSpectrum); }

  std::size_t size() const { return n_; }

  // in: n real samples; out: n/2+1 bins.
  void forward(std::span<const double> in, std::span<Complex> out) {
    fft_.fwd(out.data(), in.data(), static_cast<Eigen::Index>(n_));
  }

  // in: n/2+1 bins (imaginary parts of DC and Nyquist ignored); out: n samples, scaled by 1/n.
  void inverse(std::span<const Complex> in, std::span<double> out) {
    fft_.inv(out.data(), in.data(), static_cast<Eigen::Index>(n_));
  }

 private:
  std::size_t n_;
  Eigen::FFT<double> fft_;
};

namespace detail {

inline void stft_channel(std::span<const double> x, const StftConfig& cfg, RealFft& fft,
                         std::vector<double>& buf, Spectrogram& out, std::size_t m) {
  const std::size_t len = cfg.window_length();
  const auto& win = cfg.window();
  for (std::size_t t = 0; t < out.frames(); ++t) {
    std::fill(buf.begin(), buf.end(), 0.0);
    const std::size_t start = t * cfg.hop();
    for (std::size_t n = 0; n < len && start + n < x.size(); ++n) buf[n] = win[n] * x[start + n];
    fft.forward(buf, out.frame(m, t));
  }
}

}  // namespace detail

/// One-sided STFT, causal framing (frame t covers [t*hop, t*hop + L)).
/// Input shorter than one window yields a single zero-padded frame.
inline Spectrogram stft(const Waveform& wave, const StftConfig& cfg) {
  if (wave.empty()) throw std::invalid_argument("stft: empty waveform");
  const std::size_t frames = cfg.num_frames(wave.samples());
  Spectrogram spec(wave.channels(), frames, cfg.num_bins(), cfg, wave.sample_rate());
  RealFft fft(cfg.fft_size());
  std::vector<double> buf(cfg.fft_size());
  for (std::size_t m = 0; m < wave.channels(); ++m) detail::stft_channel(wave.channel(m), cfg, fft, buf, spec, m);
  return spec;
}

/// Weighted overlap-add synthesis of one channel from `frames` one-sided
/// spectra laid out frame-major ([frames x bins]). Output has
/// cfg.synthesis_length(frames) samples; the first and last L - hop samples
/// are attenuated because fewer frames overlap there.
inline std::vector<double> istft_channel(std::span<const Complex> spectra, std::size_t frames,
                                         const StftConfig& cfg) {
  const std::size_t bins = cfg.num_bins();
  if (spectra.size() != frames * bins) throw std::invalid_argument("istft: spectrum size mismatch");
  const std::size_t len = cfg.window_length();
  const auto& win = cfg.window();
  const double norm = 1.0 / cfg.ola_norm();
  std::vector<double> out(cfg.synthesis_length(frames), 0.0);
  RealFft fft(cfg.fft_size());
  std::vector<double> buf(cfg.fft_size());
  for (std::size_t t = 0; t < frames; ++t) {
    fft.inverse(spectra.subspan(t * bins, bins), buf);
    const std::size_t start = t * cfg.hop();
    for (std::size_t n = 0; n < len; ++n) out[start + n] += win[n] * buf[n] * norm;
  }
  return out;
}

/// Adjoint of istft_channel: maps a gradient over output samples to
/// gradients over the real and imaginary parts of every input bin.
inline void istft_channel_adjoint(std::span<const double> grad_out, std::size_t frames,
                                  const StftConfig& cfg, std::span<double> grad_re,
                                  std::span<double> grad_im) {
  const std::size_t bins = cfg.num_bins();
  const std::size_t nfft = cfg.fft_size();
  const std::size_t len = cfg.window_length();
  const auto& win = cfg.window();
  const double norm = 1.0 / cfg.ola_norm();
  RealFft fft(nfft);
  std::vector<double> buf(nfft);
  std::vector<Complex> spec(bins);
  const double inv_n = 1.0 / static_cast<double>(nfft);
  for (std::size_t t = 0; t < frames; ++t) {
    std::fill(buf.begin(), buf.end(), 0.0);
    const std::size_t start = t * cfg.hop();
    for (std::size_t n = 0; n < len; ++n) buf[n] = win[n] * norm * grad_out[start + n];
    fft.forward(buf, spec);
    for (std::size_t k = 0; k < bins; ++k) {
      const bool edge = (k == 0 || k == bins - 1);
      const double c = edge ? inv_n : 2.0 * inv_n;
      grad_re[t * bins + k] += c * spec[k].real();
      if (!edge) grad_im[t * bins + k] += c * spec[k].imag();
    }
  }
}

inline Waveform istft(const Spectrogram& spec) {
  const auto& cfg = spec.config();
  Waveform out(spec.channels(), cfg.synthesis_length(spec.frames()), spec.sample_rate());
  for (std::size_t m = 0; m < spec.channels(); ++m) {
    const auto ch = istft_channel(spec.data().subspan(m * spec.frames() * spec.bins(),
                                                      spec.frames() * spec.bins()),
                                  spec.frames(), cfg);
    std::copy(ch.begin(), ch.end(), out.channel(m).begin());
  }
  return out;
}

/// Linear convolution via zero-padded FFT; result length a + b - 1.
inline std::vector<double> fft_convolve(std::span<const double> a, std::span<const double> b) {
  if (a.empty() || b.empty()) return {};
  const std::size_t out_len = a.size() + b.size() - 1;
  std::size_t n = 1;
  while (n < out_len) n <<= 1;
  if (n < 2) n = 2;
  RealFft fft(n);
  std::vector<double> pa(n, 0.0), pb(n, 0.0);
  std::copy(a.begin(), a.end(), pa.begin());
  std::copy(b.begin(), b.end(), pb.begin());
  std::vector<Complex> fa(n / 2 + 1), fb(n / 2 + 1);
  fft.forward(pa, fa);
  fft.forward(pb, fb);
  for (std::size_t k = 0; k < fa.size(); ++k) fa[k] *= fb[k];
  fft.inverse(fa, pa);
  pa.resize(out_len);
  return pa;
}

inline double mean_power(std::span<const double> x) {
  if (x.empty()) return 0.0;
  double acc = 0.0;
  for (double v : x) acc += v * v;
  return acc / static_cast<double>(x.size());
}

}  // namespace nbeam
