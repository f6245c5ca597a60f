#pragma once

#include <algorithm>
#include <cmath>
#include <complex>
#include <cstddef>
#include <limits>
#include <numbers>
#include <optional>
#include <span>
#include <stdexcept>
#include <vector>

#include "nbeam/dsp.hpp"

namespace nbeam {

struct Vec3 {
  double x = 0.0, y = 0.0, z = 0.0;

  friend Vec3 operator+(Vec3 a, Vec3 b) { return {a.x + b.x, a.y + b.y, a.z + b.z}; }
  friend Vec3 operator-(Vec3 a, Vec3 b) { return {a.x - b.x, a.y - b.y, a.z - b.z}; }
  friend Vec3 operator*(double s, Vec3 a) { return {s * a.x, s * a.y, s * a.z}; }
  friend bool operator==(Vec3 a, Vec3 b) = default;
  double dot(Vec3 o) const { return x * o.x + y * o.y + z * o.z; }
  double norm() const { return std::sqrt(dot(*this)); }
};

inline double deg_to_rad(double deg) { return deg * std::numbers::pi / 180.0; }

// Unit vector in the horizontal plane, degrees counter-clockwise from +x.
inline Vec3 azimuth_direction(double azimuth_deg) {
  const double a = deg_to_rad(azimuth_deg);
  return {std::cos(a), std::sin(a), 0.0};
}

// Microphone positions relative to the array's phase center.
class ArrayGeometry {
 public:
  ArrayGeometry(std::vector<Vec3> positions, double speed_of_sound = 343.0)
      : positions_(std::move(positions)), speed_of_sound_(speed_of_sound) {
    if (positions_.size() < 2) throw std::invalid_argument("ArrayGeometry: need at least 2 microphones");
    if (!(speed_of_sound_ > 0.0)) throw std::invalid_argument("ArrayGeometry: speed of sound must be positive");
    for (std::size_t i = 0; i < positions_.size(); ++i) {
      for (std::size_t j = i + 1; j < positions_.size(); ++j) {
        if (positions_[i] == positions_[j]) throw std::invalid_argument("ArrayGeometry: duplicate microphone position");
      }
    }
  }

  std::size_t size() const { return positions_.size(); }
  const std::vector<Vec3>& positions() const { return positions_; }
  double speed_of_sound() const { return speed_of_sound_; }

 private:
  std::vector<Vec3> positions_;
  double speed_of_sound_;
};

/// c / (2 d_min): above this, neighbouring mics are more than half a wavelength apart.
inline double spatial_aliasing_hz(const ArrayGeometry& geom) {
  double d = std::numeric_limits<double>::infinity();
  const auto& p = geom.positions();
  for (std::size_t i = 0; i < p.size(); ++i) {
    for (std::size_t j = i + 1; j < p.size(); ++j) d = std::min(d, (p[i] - p[j]).norm());
  }
  return geom.speed_of_sound() / (2.0 * d);
}

/// Uniform circular array in the z = 0 plane; mic m sits at angle 2 pi m / M.
inline std::vector<Vec3> uca_positions(std::size_t num_mics, double radius) {
  if (num_mics < 2) throw std::invalid_argument("uca_positions: need M >= 2");
  if (!(radius > 0.0)) throw std::invalid_argument("uca_positions: radius must be positive");
  std::vector<Vec3> out(num_mics);
  for (std::size_t m = 0; m < num_mics; ++m) {
    const double a = 2.0 * std::numbers::pi * static_cast<double>(m) / static_cast<double>(num_mics);
    out[m] = {radius * std::cos(a), radius * std::sin(a), 0.0};
  }
  return out;
}

/// Free-field plane-wave steering vector. Element m is exp(-j k.r_m) with
/// wave vector k = -(2 pi f / c) kappa and kappa pointing from the array
/// toward the source, i.e. exp(+j 2 pi f (kappa.r_m) / c). This matches the
/// STFT of a far-field wavefront: microphones closer to the source lead.
inline std::vector<Complex> steering_vector(const ArrayGeometry& geom, double azimuth_deg, double freq_hz) {
  if (freq_hz < 0.0) throw std::invalid_argument("steering_vector: negative frequency");
  const Vec3 kappa = azimuth_direction(azimuth_deg);
  const double k = 2.0 * std::numbers::pi * freq_hz / geom.speed_of_sound();
  std::vector<Complex> a(geom.size());
  for (std::size_t m = 0; m < geom.size(); ++m) {
    a[m] = std::polar(1.0, k * kappa.dot(geom.positions()[m]));
  }
  return a;
}

/// N equal azimuthal sectors; zone n (1-based) is centered at (n-1)*360/N.
class ZoneGrid {
 public:
  explicit ZoneGrid(int zones) : zones_(zones) {
    if (zones < 2) throw std::invalid_argument("ZoneGrid: need N >= 2");
  }
  int size() const { return zones_; }
  double width_deg() const { return 360.0 / zones_; }
  double center_deg(int zone) const { return (zone - 1) * 360.0 / zones_; }

 private:
  int zones_;
};

/// Zone index in 1..N such that -180/N + (n-1)*360/N < theta <= -180/N + n*360/N
/// after wrapping theta into (-180/N, 360 - 180/N].
inline int zone_of_angle(double theta_deg, int zones) {
  if (zones < 1) throw std::invalid_argument("zone_of_angle: need N >= 1");
  if (!std::isfinite(theta_deg)) throw std::invalid_argument("zone_of_angle: non-finite angle");
  const double half = 180.0 / zones;
  double r = std::fmod(theta_deg + half, 360.0);  // r in (-360, 360)
  if (r <= 0.0) r += 360.0;                       // r in (0, 360]
  int n = static_cast<int>(std::ceil(r * zones / 360.0));
  return std::clamp(n, 1, zones);
}

/// Per-frame zone scores, [frames x zones]; column j holds zone j+1.
class LocalizationMap {
 public:
  LocalizationMap() = default;
  LocalizationMap(std::size_t frames, std::size_t zones) : data_(frames * zones, 0.0), frames_(frames), zones_(zones) {}

  std::size_t frames() const { return frames_; }
  std::size_t zones() const { return zones_; }
  double& at(std::size_t t, std::size_t col) { return data_[t * zones_ + col]; }
  double at(std::size_t t, std::size_t col) const { return data_[t * zones_ + col]; }
  std::span<double> row(std::size_t t) { return {data_.data() + t * zones_, zones_}; }
  std::span<const double> row(std::size_t t) const { return {data_.data() + t * zones_, zones_}; }
  std::span<double> data() { return data_; }
  std::span<const double> data() const { return data_; }

 private:
  std::vector<double> data_;
  std::size_t frames_ = 0;
  std::size_t zones_ = 0;
};

// Per-frame target azimuth in degrees, or nullopt while the target is silent.
using AzimuthTrack = std::vector<std::optional<double>>;

/// One-hot ground-truth map from an azimuth track; inactive frames are all zero.
inline LocalizationMap ground_truth_map(const AzimuthTrack& track, int zones) {
  LocalizationMap z(track.size(), static_cast<std::size_t>(zones));
  for (std::size_t t = 0; t < track.size(); ++t) {
    if (track[t]) z.at(t, static_cast<std::size_t>(zone_of_angle(*track[t], zones) - 1)) = 1.0;
  }
  return z;
}

/// Steering vectors for every zone center and one-sided STFT bin,
/// laid out [zones x bins x mics].
class SteeringSet {
 public:
  SteeringSet(const ArrayGeometry& geom, const ZoneGrid& grid, std::size_t bins, std::size_t fft_size,
              int sample_rate)
      : zones_(static_cast<std::size_t>(grid.size())), bins_(bins), mics_(geom.size()),
        data_(zones_ * bins_ * mics_) {
    for (std::size_t n = 0; n < zones_; ++n) {
      const double az = grid.center_deg(static_cast<int>(n) + 1);
      for (std::size_t f = 0; f < bins_; ++f) {
        const double hz = static_cast<double>(f) * sample_rate / static_cast<double>(fft_size);
        const auto a = steering_vector(geom, az, hz);
        std::copy(a.begin(), a.end(), data_.begin() + static_cast<std::ptrdiff_t>((n * bins_ + f) * mics_));
      }
    }
  }

  static SteeringSet for_stft(const ArrayGeometry& geom, const ZoneGrid& grid, const StftConfig& cfg, int sample_rate) {
    return SteeringSet(geom, grid, cfg.num_bins(), cfg.fft_size(), sample_rate);
  }

  std::size_t zones() const { return zones_; }
  std::size_t bins() const { return bins_; }
  std::size_t mics() const { return mics_; }
  const Complex& at(std::size_t zone_col, std::size_t f, std::size_t m) const {
    return data_[(zone_col * bins_ + f) * mics_ + m];
  }
  std::span<const Complex> vector(std::size_t zone_col, std::size_t f) const {
    return {data_.data() + (zone_col * bins_ + f) * mics_, mics_};
  }

 private:
  std::size_t zones_, bins_, mics_;
  std::vector<Complex> data_;
};

}  // namespace nbeam
