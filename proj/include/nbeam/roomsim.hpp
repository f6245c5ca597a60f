#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <iostream>
#include <limits>
#include <numbers>
#include <optional>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "nbeam/array.hpp"
#include "nbeam/dsp.hpp"
#include "nbeam/rng.hpp"

namespace nbeam {

// Shoebox room with uniform wall absorption.
struct RoomSpec {
  Vec3 dimensions{5.0, 5.0, 3.0};
  double t60 = 0.32;  // seconds; 0 means anechoic
  double speed_of_sound = 343.0;

  void validate() const {
    if (!(dimensions.x > 0.0 && dimensions.y > 0.0 && dimensions.z > 0.0)) {
      throw std::invalid_argument("RoomSpec: dimensions must be positive");
    }
    if (!(t60 >= 0.0) || !std::isfinite(t60)) throw std::invalid_argument("RoomSpec: t60 must be >= 0");
    if (!(speed_of_sound > 0.0)) throw std::invalid_argument("RoomSpec: speed of sound must be positive");
  }

  bool contains(Vec3 p) const {
    return p.x > 0.0 && p.x < dimensions.x && p.y > 0.0 && p.y < dimensions.y && p.z > 0.0 &&
           p.z < dimensions.z;
  }

  double volume() const { return dimensions.x * dimensions.y * dimensions.z; }
  double surface() const {
    const auto& d = dimensions;
    return 2.0 * (d.x * d.y + d.x * d.z + d.y * d.z);
  }
};

/// Uniform wall reflection coefficient from Sabine's formula,
/// beta = sqrt(max(0, 1 - 0.161 V / (T60 S))). T60 = 0 is anechoic.
inline double reflection_coefficient(const RoomSpec& room) {
  room.validate();
  if (room.t60 == 0.0) return 0.0;
  const double alpha = 0.161 * room.volume() / (room.t60 * room.surface());
  if (alpha > 1.0) {
    std::clog << "warning: T60 " << room.t60 << " s is below the Sabine minimum for this room; using beta = 0\n";
    return 0.0;
  }
  return std::sqrt(1.0 - alpha);
}

// How image arrivals that fall between samples are placed.
enum class DelayInterpolation {
  kNearest,  // round to the nearest sample
  kSinc,     // Hann-windowed sinc spread over +-half_width samples
};

struct RirOptions {
  int sample_rate = 16000;
  DelayInterpolation interpolation = DelayInterpolation::kNearest;
  std::size_t sinc_half_width = 32;
  // If set, overrides the Sabine coefficient (used for beta sweeps).
  std::optional<double> beta;
};

struct RoomImpulseResponse {
  std::vector<double> taps;
  std::size_t direct_index = 0;   // sample nearest to the direct-path arrival
  std::size_t direct_extent = 0;  // samples after direct_index still carrying direct-path energy
  int sample_rate = 16000;
};

/// Smallest reflection order whose amplitude factor beta^order drops below `floor`.
inline int auto_max_order(double beta, double floor = 1e-3, int cap = 60) {
  if (beta <= 0.0) return 0;
  return std::min(cap, static_cast<int>(std::ceil(std::log(floor) / std::log(beta))));
}

/// Allen-Berkley image-source impulse response between src and mic,
/// including all images with at most `max_order` wall reflections.
inline RoomImpulseResponse image_source_rir(const RoomSpec& room, Vec3 src, Vec3 mic, int max_order,
                                            const RirOptions& opts = {}) {
  room.validate();
  if (src == mic) throw std::invalid_argument("image_source_rir: source and microphone coincide");
  if (!room.contains(src) || !room.contains(mic)) {
    throw std::invalid_argument("image_source_rir: source and microphone must be inside the room");
  }
  if (max_order < 0) throw std::invalid_argument("image_source_rir: max_order must be >= 0");
  const double beta = opts.beta.value_or(reflection_coefficient(room));
  if (beta < 0.0 || beta >= 1.0) throw std::invalid_argument("image_source_rir: beta must be in [0, 1)");
  const int order = beta == 0.0 ? 0 : max_order;

  struct Arrival {
    double delay;  // samples
    double gain;
  };
  std::vector<Arrival> arrivals;
  const double fs = opts.sample_rate;
  const double c = room.speed_of_sound;
  const Vec3 dims = room.dimensions;
  const double src_axis[3] = {src.x, src.y, src.z};
  const double dim_axis[3] = {dims.x, dims.y, dims.z};

  // Per-axis image coordinate and reflection count for index n and parity u.
  auto axis_image = [&](int axis, int n, int u) {
    const double pos = (1 - 2 * u) * src_axis[axis] + 2.0 * n * dim_axis[axis];
    const int refl = std::abs(n - u) + std::abs(n);
    return std::pair{pos, refl};
  };

  for (int nx = -order; nx <= order; ++nx) {
    for (int ux = 0; ux <= 1; ++ux) {
      const auto [px, rx] = axis_image(0, nx, ux);
      if (rx > order) continue;
      for (int ny = -order; ny <= order; ++ny) {
        for (int uy = 0; uy <= 1; ++uy) {
          const auto [py, ry] = axis_image(1, ny, uy);
          if (rx + ry > order) continue;
          for (int nz = -order; nz <= order; ++nz) {
            for (int uz = 0; uz <= 1; ++uz) {
              const auto [pz, rz] = axis_image(2, nz, uz);
              const int refl = rx + ry + rz;
              if (refl > order) continue;
              const double d = (Vec3{px, py, pz} - mic).norm();
              const double gain = (refl == 0 ? 1.0 : std::pow(beta, refl)) / (4.0 * std::numbers::pi * d);
              arrivals.push_back({d / c * fs, gain});
            }
          }
        }
      }
    }
  }

  const double direct_delay = (src - mic).norm() / c * fs;
  const bool sinc = opts.interpolation == DelayInterpolation::kSinc;
  const std::size_t half = sinc ? opts.sinc_half_width : 0;
  double max_delay = 0.0;
  for (const auto& a : arrivals) max_delay = std::max(max_delay, a.delay);

  RoomImpulseResponse rir;
  rir.sample_rate = opts.sample_rate;
  rir.direct_index = static_cast<std::size_t>(std::lround(direct_delay));
  rir.direct_extent = half;
  rir.taps.assign(static_cast<std::size_t>(std::ceil(max_delay)) + half + 2, 0.0);

  for (const auto& a : arrivals) {
    if (!sinc) {
      rir.taps[static_cast<std::size_t>(std::lround(a.delay))] += a.gain;
      continue;
    }
    const auto center = static_cast<long>(std::lround(a.delay));
    const long lo = std::max(0L, center - static_cast<long>(half));
    const long hi = center + static_cast<long>(half);
    for (long n = lo; n <= hi; ++n) {
      const double x = static_cast<double>(n) - a.delay;
      if (std::abs(x) > static_cast<double>(half)) continue;
      const double s = x == 0.0 ? 1.0 : std::sin(std::numbers::pi * x) / (std::numbers::pi * x);
      const double w = 0.5 + 0.5 * std::cos(std::numbers::pi * x / static_cast<double>(half + 1));
      rir.taps[static_cast<std::size_t>(n)] += a.gain * s * w;
    }
  }
  return rir;
}

struct RirSplit {
  std::vector<double> early;  // direct path + early reflections
  std::vector<double> late;   // remainder; early + late == rir
};

/// Partition at direct arrival + early_ms. Both parts keep the full length.
inline RirSplit split_direct_early(const RoomImpulseResponse& rir, double early_ms) {
  if (!(early_ms > 0.0)) throw std::invalid_argument("split_direct_early: early_ms must be positive");
  const auto early_samples = static_cast<std::size_t>(std::lround(early_ms * rir.sample_rate / 1000.0));
  const std::size_t boundary =
      std::min(rir.taps.size(), rir.direct_index + std::max(early_samples, rir.direct_extent + 1));
  RirSplit out{std::vector<double>(rir.taps.size(), 0.0), std::vector<double>(rir.taps.size(), 0.0)};
  for (std::size_t n = 0; n < rir.taps.size(); ++n) (n < boundary ? out.early : out.late)[n] = rir.taps[n];
  return out;
}

// Half-open sample interval.
struct SampleRange {
  std::size_t begin = 0;
  std::size_t end = 0;
};

/// Gain for `contaminant` so that 10 log10(P_ref / P_cont) equals target_db,
/// with both powers measured over `active` (all channels).
inline double mix_at_db(const Waveform& reference, const Waveform& contaminant, double target_db,
                        std::optional<SampleRange> active = std::nullopt) {
  if (!std::isfinite(target_db)) throw std::invalid_argument("mix_at_db: target must be finite");
  const SampleRange r = active.value_or(SampleRange{0, reference.samples()});
  if (r.end > reference.samples() || r.end > contaminant.samples() || r.begin >= r.end) {
    throw std::invalid_argument("mix_at_db: invalid active range");
  }
  auto power = [&](const Waveform& w) {
    double acc = 0.0;
    for (std::size_t c = 0; c < w.channels(); ++c) {
      for (std::size_t n = r.begin; n < r.end; ++n) acc += w.at(c, n) * w.at(c, n);
    }
    return acc / static_cast<double>((r.end - r.begin) * w.channels());
  };
  const double p_ref = power(reference);
  const double p_cont = power(contaminant);
  if (!(p_ref > 0.0)) throw std::invalid_argument("mix_at_db: reference is silent");
  if (!(p_cont > 0.0)) throw std::invalid_argument("mix_at_db: contaminant is silent");
  return std::sqrt(p_ref / (p_cont * std::pow(10.0, target_db / 10.0)));
}

enum class SourceRole { kTarget, kInterference };

struct SourcePlacement {
  Vec3 position;
  double azimuth_deg = 0.0;  // relative to the array center, CCW from +x
  SourceRole role = SourceRole::kTarget;
};

// Array center: middle of the floor plan at the common source/mic height.
inline Vec3 array_center(const RoomSpec& room, double height = 1.5) {
  return {room.dimensions.x / 2.0, room.dimensions.y / 2.0, height};
}

inline SourcePlacement place_source(const RoomSpec& room, double azimuth_deg, double distance,
                                    SourceRole role, double height = 1.5) {
  const Vec3 pos = array_center(room, height) + distance * azimuth_direction(azimuth_deg);
  if (!room.contains(pos)) throw std::invalid_argument("place_source: placement outside room");
  return {pos, azimuth_deg, role};
}

struct MixtureSpec {
  double duration_s = 6.0;
  double speech_len_s = 4.0;
  double speech_offset_s = 0.0;
  std::optional<double> sir_db;         // nullopt: no interference
  std::optional<double> sensor_snr_db;  // nullopt: noiseless sensors
  std::uint64_t seed = 0;

  void validate() const {
    if (!(duration_s > 0.0) || !(speech_len_s > 0.0) || speech_offset_s < 0.0) {
      throw std::invalid_argument("MixtureSpec: durations must be positive");
    }
    if (speech_offset_s + speech_len_s > duration_s + 1e-9) {
      throw std::invalid_argument("MixtureSpec: speech window exceeds mixture duration");
    }
    if ((sir_db && !std::isfinite(*sir_db)) || (sensor_snr_db && !std::isfinite(*sensor_snr_db))) {
      throw std::invalid_argument("MixtureSpec: dB values must be finite");
    }
  }
};

struct SynthesisOptions {
  double early_ms = 50.0;
  int max_order = -1;  // < 0: derived from beta
  RirOptions rir;
  double array_height = 1.5;
};

struct MixtureRecord {
  Waveform noisy;   // [M x N]
  Waveform target;  // direct + early speech, [M x N]
  AzimuthTrack azimuth_track;
  // Exact additive parts of `noisy`.
  Waveform reverberant_speech;
  Waveform interference;
  Waveform noise;
  SampleRange speech_window;
  double target_azimuth_deg = 0.0;
  std::optional<double> interference_azimuth_deg;
  MixtureSpec spec;
};

/// Per-frame target azimuth: active where frame [t*hop, t*hop + L) overlaps the speech window.
inline AzimuthTrack speech_azimuth_track(std::size_t num_samples, SampleRange window, double azimuth_deg,
                                         const StftConfig& cfg) {
  AzimuthTrack track(cfg.num_frames(num_samples));
  for (std::size_t t = 0; t < track.size(); ++t) {
    const std::size_t a = t * cfg.hop();
    const std::size_t b = a + cfg.window_length();
    if (a < window.end && window.begin < b) track[t] = azimuth_deg;
  }
  return track;
}

/// Renders one reverberant array mixture: target speech plus optional
/// directional interference and white sensor noise. SIR and SNR are set
/// on the reverberant signals at microphone 0 over the speech window.
inline MixtureRecord synthesize_mixture(const RoomSpec& room, const ArrayGeometry& array,
                                        const SourcePlacement& target,
                                        const std::optional<SourcePlacement>& interferer,
                                        const Waveform& clean_speech, const Waveform& interference_signal,
                                        const MixtureSpec& spec, const StftConfig& stft_cfg,
                                        const SynthesisOptions& opts = {}) {
  room.validate();
  spec.validate();
  const int fs = opts.rir.sample_rate;
  const auto n_total = static_cast<std::size_t>(std::lround(spec.duration_s * fs));
  const auto n_speech = static_cast<std::size_t>(std::lround(spec.speech_len_s * fs));
  const auto offset = std::min(static_cast<std::size_t>(std::lround(spec.speech_offset_s * fs)), n_total - n_speech);
  if (clean_speech.samples() < n_speech) throw std::invalid_argument("synthesize_mixture: speech clip too short");
  if (!room.contains(target.position)) throw std::invalid_argument("synthesize_mixture: target outside room");
  if (interferer && !room.contains(interferer->position)) {
    throw std::invalid_argument("synthesize_mixture: interferer outside room");
  }
  const bool use_interf = interferer.has_value() && spec.sir_db.has_value();
  if (use_interf && interference_signal.empty()) throw std::invalid_argument("synthesize_mixture: empty interference");

  const Vec3 center = array_center(room, opts.array_height);
  const double beta = opts.rir.beta.value_or(reflection_coefficient(room));
  const int order = opts.max_order >= 0 ? opts.max_order : auto_max_order(beta);
  const std::size_t M = array.size();

  std::vector<double> speech(n_total, 0.0);
  std::copy_n(clean_speech.channel(0).begin(), n_speech, speech.begin() + static_cast<std::ptrdiff_t>(offset));
  std::vector<double> interf_src(n_total, 0.0);
  if (use_interf) {
    const auto src = interference_signal.channel(0);
    for (std::size_t n = 0; n < n_total; ++n) interf_src[n] = src[n % src.size()];
  }

  MixtureRecord rec{Waveform(M, n_total, fs), Waveform(M, n_total, fs), {}, Waveform(M, n_total, fs),
                    Waveform(M, n_total, fs), Waveform(M, n_total, fs), SampleRange{offset, offset + n_speech},
                    target.azimuth_deg, std::nullopt, spec};

  for (std::size_t m = 0; m < M; ++m) {
    const Vec3 mic = center + array.positions()[m];
    if (!room.contains(mic)) throw std::invalid_argument("synthesize_mixture: microphone outside room");
    const auto rir = image_source_rir(room, target.position, mic, order, opts.rir);
    const auto parts = split_direct_early(rir, opts.early_ms);
    const auto full = fft_convolve(speech, rir.taps);
    const auto early = fft_convolve(speech, parts.early);
    std::copy_n(full.begin(), n_total, rec.reverberant_speech.channel(m).begin());
    std::copy_n(early.begin(), n_total, rec.target.channel(m).begin());
    if (use_interf) {
      const auto rir_i = image_source_rir(room, interferer->position, mic, order, opts.rir);
      const auto conv = fft_convolve(interf_src, rir_i.taps);
      std::copy_n(conv.begin(), n_total, rec.interference.channel(m).begin());
    }
  }

  const Waveform ref0 = rec.reverberant_speech.select(0);
  if (use_interf) {
    rec.interference_azimuth_deg = interferer->azimuth_deg;
    const double g = mix_at_db(ref0, rec.interference.select(0), *spec.sir_db, rec.speech_window);
    for (double& v : rec.interference.data()) v *= g;
  }
  if (spec.sensor_snr_db) {
    Rng rng(spec.seed);
    for (double& v : rec.noise.data()) v = rng.normal();
    const double g = mix_at_db(ref0, rec.noise.select(0), *spec.sensor_snr_db, rec.speech_window);
    for (double& v : rec.noise.data()) v *= g;
  }

  auto noisy = rec.noisy.data();
  const auto rs = rec.reverberant_speech.data();
  const auto in = rec.interference.data();
  const auto nz = rec.noise.data();
  for (std::size_t i = 0; i < noisy.size(); ++i) noisy[i] = rs[i] + in[i] + nz[i];

  rec.azimuth_track = speech_azimuth_track(n_total, rec.speech_window, target.azimuth_deg, stft_cfg);
  return rec;
}

}  // namespace nbeam
