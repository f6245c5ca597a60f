#include <gtest/gtest.h>

#include <cmath>
#include <numbers>

#include "nbeam/roomsim.hpp"
#include "nbeam/surrogate.hpp"

using namespace nbeam;

namespace {

double tail_energy(const std::vector<double>& taps, std::size_t from) {
  double e = 0.0;
  for (std::size_t n = from; n < taps.size(); ++n) e += taps[n] * taps[n];
  return e;
}

}  // namespace

TEST(ReflectionCoefficient, SabineValues) {
  RoomSpec room;
  room.dimensions = {5, 5, 3};
  room.t60 = 0.32;
  EXPECT_NEAR(reflection_coefficient(room), 0.8105308305504038, 1e-12);
  room.t60 = 0.0;
  EXPECT_EQ(reflection_coefficient(room), 0.0);
  room.t60 = 0.161 * 75.0 / 110.0;  // alpha == 1
  EXPECT_NEAR(reflection_coefficient(room), 0.0, 1e-7);
  room.t60 = 0.01;  // alpha > 1: clamped
  EXPECT_EQ(reflection_coefficient(room), 0.0);
  room.t60 = -1.0;
  EXPECT_THROW(reflection_coefficient(room), std::invalid_argument);
}

TEST(ImageSource, DirectPathOnly) {
  RoomSpec room;
  room.t60 = 0.0;
  const Vec3 src{1.0, 2.0, 1.5}, mic{3.0, 2.5, 1.5};
  const auto rir = image_source_rir(room, src, mic, 5);
  const double d = (src - mic).norm();
  std::size_t nonzero = 0;
  for (std::size_t n = 0; n < rir.taps.size(); ++n) {
    if (rir.taps[n] != 0.0) {
      ++nonzero;
      EXPECT_EQ(n, static_cast<std::size_t>(std::lround(d / 343.0 * 16000.0)));
      EXPECT_NEAR(rir.taps[n], 1.0 / (4.0 * std::numbers::pi * d), 1e-15);
    }
  }
  EXPECT_EQ(nonzero, 1u);

  room.t60 = 0.5;
  const auto r0 = image_source_rir(room, src, mic, 0);
  EXPECT_NEAR(tail_energy(r0.taps, 0), std::pow(1.0 / (4.0 * std::numbers::pi * d), 2), 1e-15);
}

TEST(ImageSource, InverseDistanceLaw) {
  RoomSpec room;
  room.dimensions = {10, 10, 3};
  room.t60 = 0.0;
  const Vec3 mic{2.0, 5.0, 1.5};
  const auto near = image_source_rir(room, {3.0, 5.0, 1.5}, mic, 0);
  const auto far = image_source_rir(room, {4.0, 5.0, 1.5}, mic, 0);
  EXPECT_NEAR(far.taps[far.direct_index] / near.taps[near.direct_index], 0.5, 1e-12);
}

TEST(ImageSource, RejectsBadArguments) {
  RoomSpec room;
  EXPECT_THROW(image_source_rir(room, {1, 1, 1}, {1, 1, 1}, 3), std::invalid_argument);
  EXPECT_THROW(image_source_rir(room, {6, 1, 1}, {1, 1, 1}, 3), std::invalid_argument);
  EXPECT_THROW(image_source_rir(room, {2, 1, 1}, {1, 1, 1}, -1), std::invalid_argument);
}

TEST(ImageSource, DelayCausalityAndTailOrdering) {
  Rng rng(77);
  RoomSpec room;
  room.dimensions = {6, 5, 3};
  for (int i = 0; i < 50; ++i) {
    const Vec3 src{rng.uniform(0.2, 5.8), rng.uniform(0.2, 4.8), rng.uniform(0.2, 2.8)};
    const Vec3 mic{rng.uniform(0.2, 5.8), rng.uniform(0.2, 4.8), rng.uniform(0.2, 2.8)};
    const auto rir = image_source_rir(room, src, mic, 6);
    const double expected = (src - mic).norm() / 343.0 * 16000.0;
    std::size_t first = 0;
    while (rir.taps[first] == 0.0) ++first;
    EXPECT_LE(std::abs(double(first) - expected), 1.0);
    EXPECT_EQ(first, rir.direct_index);
  }
  const Vec3 src{1.5, 2.0, 1.5}, mic{4.0, 3.0, 1.5};
  double prev = -1.0;
  for (double beta : {0.3, 0.6, 0.9}) {
    RirOptions opts;
    opts.beta = beta;
    const auto rir = image_source_rir(room, src, mic, 20, opts);
    const double e = tail_energy(rir.taps, rir.direct_index + 800);
    EXPECT_GT(e, prev);
    prev = e;
  }
}

TEST(ImageSource, SincInterpolationPeaksAtArrival) {
  RoomSpec room;
  room.t60 = 0.0;
  RirOptions opts;
  opts.interpolation = DelayInterpolation::kSinc;
  const Vec3 src{1.0, 1.0, 1.5}, mic{3.1, 2.2, 1.5};
  const auto rir = image_source_rir(room, src, mic, 0, opts);
  std::size_t peak = 0;
  for (std::size_t n = 0; n < rir.taps.size(); ++n) {
    if (std::abs(rir.taps[n]) > std::abs(rir.taps[peak])) peak = n;
  }
  EXPECT_EQ(peak, rir.direct_index);
  EXPECT_EQ(rir.direct_extent, 32u);
}

TEST(SplitDirectEarly, Partition) {
  RoomSpec room;
  const auto rir = image_source_rir(room, {1, 1, 1.5}, {3, 3, 1.5}, 10);
  for (double ms : {1.0, 10.0, 50.0, 1e5}) {
    const auto s = split_direct_early(rir, ms);
    for (std::size_t n = 0; n < rir.taps.size(); ++n) EXPECT_EQ(s.early[n] + s.late[n], rir.taps[n]);
  }
  for (double v : split_direct_early(rir, 1e5).late) EXPECT_EQ(v, 0.0);
  room.t60 = 0.0;
  const auto dry = image_source_rir(room, {1, 1, 1.5}, {3, 3, 1.5}, 10);
  for (double v : split_direct_early(dry, 0.1).late) EXPECT_EQ(v, 0.0);
  EXPECT_THROW(split_direct_early(rir, 0.0), std::invalid_argument);
}

TEST(MixAtDb, ScaleFactors) {
  Rng rng(1);
  Waveform a(1, 1000, 16000), b(1, 1000, 16000);
  for (double& v : a.data()) v = rng.normal();
  for (std::size_t n = 0; n < 1000; ++n) b.at(0, n) = a.at(0, 999 - n);
  EXPECT_NEAR(mix_at_db(a, b, 0.0), 1.0, 1e-12);
  EXPECT_NEAR(mix_at_db(a, a, 20.0), 0.1, 1e-12);
  for (double db : {-7.3, 0.0, 12.5}) {
    const double g = mix_at_db(a, b, db);
    double pa = 0.0, pb = 0.0;
    for (std::size_t n = 0; n < 1000; ++n) {
      pa += a.at(0, n) * a.at(0, n);
      pb += g * g * b.at(0, n) * b.at(0, n);
    }
    EXPECT_NEAR(10.0 * std::log10(pa / pb), db, 1e-9);
  }
  EXPECT_THROW(mix_at_db(Waveform(1, 1000, 16000), b, 0.0), std::invalid_argument);
}

class MixtureTest : public ::testing::Test {
 protected:
  RoomSpec room;
  ArrayGeometry array{uca_positions(4, 0.05)};
  StftConfig cfg = StftConfig::speech_default();

  MixtureRecord make(std::optional<double> sir, std::optional<double> snr, std::uint64_t seed, double az = 90.0) {
    Rng rng(seed);
    const auto speech = surrogate::speech(16000, 16000, rng);
    const auto interf = surrogate::interference(24000, 16000, rng);
    MixtureSpec spec;
    spec.duration_s = 1.5;
    spec.speech_len_s = 1.0;
    spec.speech_offset_s = 0.25;
    spec.sir_db = sir;
    spec.sensor_snr_db = snr;
    spec.seed = seed;
    const auto tgt = place_source(room, az, 1.5, SourceRole::kTarget);
    const auto itf = place_source(room, 250.0, 2.0, SourceRole::kInterference);
    SynthesisOptions opts;
    opts.max_order = 8;
    return synthesize_mixture(room, array, tgt, itf, speech, interf, spec, cfg, opts);
  }
};

TEST_F(MixtureTest, NoInterferenceNoNoiseIsReverberantSpeech) {
  const auto rec = make(std::nullopt, std::nullopt, 3);
  for (std::size_t i = 0; i < rec.noisy.data().size(); ++i) EXPECT_EQ(rec.noisy.data()[i], rec.reverberant_speech.data()[i]);
}

TEST_F(MixtureTest, DecompositionAndLevels) {
  const auto rec = make(0.0, 20.0, 4);
  ASSERT_EQ(rec.noisy.channels(), 4u);
  ASSERT_EQ(rec.noisy.samples(), 24000u);
  ASSERT_EQ(rec.target.samples(), 24000u);
  for (std::size_t i = 0; i < rec.noisy.data().size(); ++i) {
    EXPECT_EQ(rec.noisy.data()[i] - (rec.reverberant_speech.data()[i] + rec.interference.data()[i] + rec.noise.data()[i]), 0.0);
  }
  auto ratio_db = [&](const Waveform& c) {
    double ps = 0.0, pc = 0.0;
    for (std::size_t n = rec.speech_window.begin; n < rec.speech_window.end; ++n) {
      ps += std::pow(rec.reverberant_speech.at(0, n), 2);
      pc += std::pow(c.at(0, n), 2);
    }
    return 10.0 * std::log10(ps / pc);
  };
  EXPECT_NEAR(ratio_db(rec.interference), 0.0, 1e-9);
  EXPECT_NEAR(ratio_db(rec.noise), 20.0, 1e-9);
  EXPECT_EQ(rec.azimuth_track.size(), cfg.num_frames(24000));
}

TEST_F(MixtureTest, AzimuthTrackMapsToZone) {
  const auto rec = make(5.0, 25.0, 5, 90.0);
  std::size_t active = 0;
  for (std::size_t t = 0; t < rec.azimuth_track.size(); ++t) {
    const std::size_t a = t * cfg.hop(), b = a + cfg.window_length();
    const bool overlaps = a < rec.speech_window.end && rec.speech_window.begin < b;
    EXPECT_EQ(rec.azimuth_track[t].has_value(), overlaps);
    if (rec.azimuth_track[t]) {
      ++active;
      EXPECT_EQ(zone_of_angle(*rec.azimuth_track[t], 12), 4);
    }
  }
  EXPECT_GT(active, 0u);
  EXPECT_LT(active, rec.azimuth_track.size());
}

TEST_F(MixtureTest, SeededDeterminism) {
  const auto a = make(3.0, 15.0, 9), b = make(3.0, 15.0, 9), c = make(3.0, 15.0, 10);
  EXPECT_TRUE(std::equal(a.noisy.data().begin(), a.noisy.data().end(), b.noisy.data().begin()));
  EXPECT_TRUE(std::equal(a.target.data().begin(), a.target.data().end(), b.target.data().begin()));
  EXPECT_FALSE(std::equal(a.noisy.data().begin(), a.noisy.data().end(), c.noisy.data().begin()));
}

TEST_F(MixtureTest, RejectsOutOfRoomPlacement) {
  EXPECT_THROW(place_source(room, 0.0, 10.0, SourceRole::kTarget), std::invalid_argument);
}
