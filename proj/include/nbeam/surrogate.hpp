#pragma once

#include <algorithm>
#include <cmath>
#include <numbers>
#include <vector>

#include "nbeam/dsp.hpp"
#include "nbeam/rng.hpp"

// Built-in synthetic sources so the pipeline runs without external corpora.
namespace nbeam::surrogate {

namespace detail {

inline void normalize_rms(std::vector<double>& x, double rms) {
  const double p = mean_power(x);
  if (p <= 0.0) return;
  const double g = rms / std::sqrt(p);
  for (double& v : x) v *= g;
}

// Gain of a two-resonance spectral envelope at `hz`.
inline double formant_gain(double hz, double f1, double f2) {
  auto peak = [](double x, double c, double bw) { return 1.0 / (1.0 + ((x - c) / bw) * ((x - c) / bw)); };
  return 0.15 + peak(hz, f1, 120.0) + 0.7 * peak(hz, f2, 200.0);
}

}  // namespace detail

/// Speech-like signal: a train of voiced "syllables" separated by short
/// pauses. Each syllable is a harmonic complex with a drifting pitch
/// (90-250 Hz), a random two-formant envelope and a raised-cosine
/// amplitude contour. Output RMS is 0.05.
inline Waveform speech(std::size_t num_samples, int sample_rate, Rng& rng) {
  const double fs = sample_rate;
  const double nyq = fs / 2.0;
  std::vector<double> x(num_samples, 0.0);
  std::size_t pos = static_cast<std::size_t>(rng.uniform(0.0, 0.05) * fs);
  while (pos < num_samples) {
    const auto len = static_cast<std::size_t>(rng.uniform(0.12, 0.32) * fs);
    const double f0_start = rng.uniform(90.0, 250.0);
    const double f0_end = f0_start * rng.uniform(0.8, 1.25);
    const double f1 = rng.uniform(300.0, 900.0);
    const double f2 = rng.uniform(900.0, 2600.0);
    const double level = rng.uniform(0.4, 1.0);
    double phase = rng.uniform(0.0, 2.0 * std::numbers::pi);
    for (std::size_t n = 0; n < len && pos + n < num_samples; ++n) {
      const double u = static_cast<double>(n) / static_cast<double>(len);
      const double f0 = f0_start + (f0_end - f0_start) * u;
      phase += 2.0 * std::numbers::pi * f0 / fs;
      const double env = 0.5 - 0.5 * std::cos(2.0 * std::numbers::pi * u);
      double s = 0.0;
      for (int h = 1; h * f0 < std::min(nyq, 4000.0); ++h) {
        s += detail::formant_gain(h * f0, f1, f2) / h * std::sin(h * phase);
      }
      x[pos + n] += level * env * s;
    }
    pos += len + static_cast<std::size_t>(rng.uniform(0.03, 0.15) * fs);
  }
  detail::normalize_rms(x, 0.05);
  return Waveform::mono(std::move(x), sample_rate);
}

/// Directional interference: one of band-limited noise bursts, a sequence
/// of sustained harmonic notes, or an engine-like low hum with amplitude
/// modulated noise. Output RMS is 0.05.
inline Waveform interference(std::size_t num_samples, int sample_rate, Rng& rng) {
  const double fs = sample_rate;
  std::vector<double> x(num_samples, 0.0);
  const auto kind = rng.below(3);
  if (kind == 0) {
    std::size_t pos = 0;
    while (pos < num_samples) {
      const auto len = static_cast<std::size_t>(rng.uniform(0.05, 0.4) * fs);
      const double a = rng.uniform(0.5, 0.98);  // one-pole smoothing sets the color
      double state = 0.0;
      for (std::size_t n = 0; n < len && pos + n < num_samples; ++n) {
        state = a * state + (1.0 - a) * rng.normal();
        const double env = std::exp(-3.0 * static_cast<double>(n) / static_cast<double>(len));
        x[pos + n] = env * state;
      }
      pos += len + static_cast<std::size_t>(rng.uniform(0.0, 0.2) * fs);
    }
  } else if (kind == 1) {
    std::size_t pos = 0;
    while (pos < num_samples) {
      const auto len = static_cast<std::size_t>(rng.uniform(0.2, 0.6) * fs);
      const double f = 110.0 * std::pow(2.0, static_cast<double>(rng.below(36)) / 12.0);
      for (std::size_t n = 0; n < len && pos + n < num_samples; ++n) {
        const double t = static_cast<double>(n) / fs;
        const double env = std::min(1.0, t / 0.02) * std::exp(-1.5 * t);
        double s = 0.0;
        for (int h = 1; h <= 6 && h * f < fs / 2.0; ++h) s += std::sin(2.0 * std::numbers::pi * h * f * t) / h;
        x[pos + n] += env * s;
      }
      pos += len;
    }
  } else {
    const double f = rng.uniform(40.0, 120.0);
    const double rate = rng.uniform(2.0, 8.0);
    double state = 0.0;
    for (std::size_t n = 0; n < num_samples; ++n) {
      const double t = static_cast<double>(n) / fs;
      state = 0.9 * state + 0.1 * rng.normal();
      double hum = 0.0;
      for (int h = 1; h <= 8; ++h) hum += std::sin(2.0 * std::numbers::pi * h * f * t) / h;
      x[n] = hum * (0.6 + 0.4 * std::sin(2.0 * std::numbers::pi * rate * t)) + 2.0 * state;
    }
  }
  detail::normalize_rms(x, 0.05);
  return Waveform::mono(std::move(x), sample_rate);
}

}  // namespace nbeam::surrogate
