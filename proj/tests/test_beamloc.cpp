#include <gtest/gtest.h>

#include <cmath>
#include <sstream>
#include <string>

#include "nbeam/beamloc.hpp"
#include "nbeam/cnn/gradcheck.hpp"
#include "nbeam/model.hpp"
#include "nbeam/selfcheck.hpp"

namespace nbeam {
namespace {

Spectrogram random_spectrogram(std::size_t mics, std::size_t frames, std::size_t bins, Rng& rng) {
  Spectrogram y(mics, frames, bins, StftConfig::hann(16, 4, 16), 16000);
  for (auto& v : y.data()) v = {rng.normal(), rng.normal()};
  return y;
}

FilterWeights random_weights(std::size_t mics, std::size_t frames, std::size_t bins, Rng& rng) {
  FilterWeights w(mics, frames, bins);
  for (auto& v : w.data()) v = {rng.normal(), rng.normal()};
  return w;
}

FilterWeights steered(const SteeringSet& a, std::size_t zone_col, std::size_t frames, double gain) {
  FilterWeights w(a.mics(), frames, a.bins());
  for (std::size_t m = 0; m < a.mics(); ++m) {
    for (std::size_t t = 0; t < frames; ++t) {
      for (std::size_t f = 0; f < a.bins(); ++f) w.at(m, t, f) = gain * a.at(zone_col, f, m);
    }
  }
  return w;
}

LocalizationMap map_of(std::vector<std::vector<double>> rows) {
  LocalizationMap z(rows.size(), rows.front().size());
  for (std::size_t t = 0; t < rows.size(); ++t) {
    for (std::size_t n = 0; n < rows[t].size(); ++n) z.at(t, n) = rows[t][n];
  }
  return z;
}

TEST(FilterAndSum, SelectorZeroAndAveraging) {
  Rng rng(1);
  const auto y = random_spectrogram(3, 4, 9, rng);
  FilterWeights sel(3, 4, 9);
  for (std::size_t t = 0; t < 4; ++t) {
    for (std::size_t f = 0; f < 9; ++f) sel.at(0, t, f) = 1.0;
  }
  const auto s = filter_and_sum(sel, y);
  ASSERT_EQ(s.channels(), 1u);
  for (std::size_t t = 0; t < 4; ++t) {
    for (std::size_t f = 0; f < 9; ++f) EXPECT_EQ(s.at(0, t, f), y.at(0, t, f));
  }
  const auto zero = filter_and_sum(FilterWeights(3, 4, 9), y);
  for (const auto& v : zero.data()) EXPECT_EQ(v, Complex(0.0));

  Spectrogram same(3, 4, 9, y.config(), 16000);
  FilterWeights avg(3, 4, 9);
  for (std::size_t m = 0; m < 3; ++m) {
    for (std::size_t t = 0; t < 4; ++t) {
      for (std::size_t f = 0; f < 9; ++f) {
        same.at(m, t, f) = y.at(0, t, f);
        avg.at(m, t, f) = 1.0 / 3.0;
      }
    }
  }
  const auto common = filter_and_sum(avg, same);
  for (std::size_t t = 0; t < 4; ++t) {
    for (std::size_t f = 0; f < 9; ++f) EXPECT_NEAR(std::abs(common.at(0, t, f) - y.at(0, t, f)), 0.0, 1e-14);
  }
  EXPECT_THROW(filter_and_sum(FilterWeights(2, 4, 9), y), std::invalid_argument);
}

TEST(FilterAndSum, ConjugatesTheWeights) {
  Spectrogram y(1, 1, 1, StftConfig::hann(16, 4, 16), 16000);
  y.at(0, 0, 0) = {1.0, 2.0};
  FilterWeights w(1, 1, 1);
  w.at(0, 0, 0) = {0.0, 1.0};
  // conj(j) * (1 + 2j) = 2 - j
  EXPECT_EQ(filter_and_sum(w, y).at(0, 0, 0), Complex(2.0, -1.0));
}

TEST(FilterAndSum, LinearInWeightsAndInSignal) {
  Rng rng(2);
  const auto y1 = random_spectrogram(4, 3, 5, rng), y2 = random_spectrogram(4, 3, 5, rng);
  const auto w1 = random_weights(4, 3, 5, rng), w2 = random_weights(4, 3, 5, rng);
  const double a = 0.7, b = -1.3;
  Spectrogram ys = y1;
  FilterWeights ws = w1;
  for (std::size_t i = 0; i < ys.data().size(); ++i) {
    ys.data()[i] = a * y1.data()[i] + b * y2.data()[i];
    ws.data()[i] = a * w1.data()[i] + b * w2.data()[i];
  }
  const auto lhs_y = filter_and_sum(w1, ys), r1 = filter_and_sum(w1, y1), r2 = filter_and_sum(w1, y2);
  const auto lhs_w = filter_and_sum(ws, y1), q2 = filter_and_sum(w2, y1);
  for (std::size_t i = 0; i < lhs_y.data().size(); ++i) {
    EXPECT_NEAR(std::abs(lhs_y.data()[i] - (a * r1.data()[i] + b * r2.data()[i])), 0.0, 1e-12);
    EXPECT_NEAR(std::abs(lhs_w.data()[i] - (a * r1.data()[i] + b * q2.data()[i])), 0.0, 1e-12);
  }
}

TEST(SplmMap, DistortionlessIdentity) {
  const auto cfg = StftConfig::speech_default();
  const ArrayGeometry geom(uca_positions(6, 0.05));
  const auto a = SteeringSet::for_stft(geom, ZoneGrid(12), cfg, 16000);
  for (std::size_t n : {0u, 4u, 11u}) {
    const auto z = splm_map(steered(a, n, 2, 1.0 / 6.0), a);
    for (std::size_t t = 0; t < 2; ++t) {
      EXPECT_NEAR(z.at(t, n), 1.0, 1e-12);
      for (std::size_t k = 0; k < 12; ++k) EXPECT_LE(z.at(t, k), 1.0 + 1e-12);
    }
  }
  const auto check = selfcheck::distortionless_identity();
  EXPECT_TRUE(check.passed) << check.value;
}

TEST(SplmMap, ZeroHomogeneityAndShapes) {
  const auto cfg = StftConfig::hann(64, 16, 64);
  const ArrayGeometry geom(uca_positions(4, 0.05));
  const auto a = SteeringSet::for_stft(geom, ZoneGrid(8), cfg, 16000);
  const auto z0 = splm_map(FilterWeights(4, 3, a.bins()), a);
  for (double v : z0.data()) EXPECT_EQ(v, 0.0);

  Rng rng(3);
  const auto w = random_weights(4, 3, a.bins(), rng);
  FilterWeights scaled = w;
  for (auto& v : scaled.data()) v *= 2.5;
  const auto z = splm_map(w, a), zs = splm_map(scaled, a);
  for (std::size_t i = 0; i < z.data().size(); ++i) {
    EXPECT_GE(z.data()[i], 0.0);
    EXPECT_NEAR(zs.data()[i], 2.5 * z.data()[i], 1e-12);
  }
  EXPECT_EQ(localize(z), localize(zs));
  EXPECT_THROW(splm_map(FilterWeights(3, 3, a.bins()), a), std::invalid_argument);
  EXPECT_THROW(splm_map(FilterWeights(4, 3, a.bins() - 1), a), std::invalid_argument);
}

TEST(SplmMap, BandLimitAveragesLowerBinsOnly) {
  const auto cfg = StftConfig::hann(32, 8, 32);
  const ArrayGeometry geom(uca_positions(3, 0.05));
  const auto a = SteeringSet::for_stft(geom, ZoneGrid(4), cfg, 16000);
  Rng rng(4);
  const auto w = random_weights(3, 2, a.bins(), rng);
  const auto z = splm_map(w, a, 5);
  for (std::size_t t = 0; t < 2; ++t) {
    for (std::size_t n = 0; n < 4; ++n) {
      double acc = 0.0;
      for (std::size_t f = 0; f <= 5; ++f) {
        Complex r = 0.0;
        for (std::size_t m = 0; m < 3; ++m) r += std::conj(w.at(m, t, f)) * a.at(n, f, m);
        acc += std::abs(r);
      }
      EXPECT_NEAR(z.at(t, n), acc / 6.0, 1e-12);
    }
  }
  EXPECT_NEAR(spatial_aliasing_hz(geom), 343.0 / (2.0 * 0.05 * std::sqrt(3.0)), 1e-9);
  EXPECT_NEAR(spatial_aliasing_hz(ArrayGeometry(uca_positions(6, 0.05))), 3430.0, 1e-9);
}

TEST(Localize, ArgmaxWithLowestIndexTies) {
  const auto z = map_of({{0, 0, 1, 0}, {0.3, 0.3, 0.3, 0.3}, {0.1, 0.7, 0.2, 0.0}, {0.2, 0.9, 0.1, 0.9}});
  EXPECT_EQ(localize(z), (std::vector<int>{3, 1, 2, 2}));
}

TEST(Vad, ScoresAndStrictThreshold) {
  const auto z = map_of({{0, 0, 0}, {0.2, 1.0, 0.1}, {0.5, 0.1, 0.2}, {0.4, 1.7, 0.0}, {0.51, 0.0, 0.0}});
  const auto v = vad(z);
  EXPECT_EQ(v.scores, (std::vector<double>{0.0, 1.0, 0.5, 1.0, 0.51}));
  EXPECT_EQ(v.active, (std::vector<bool>{false, true, false, true, true}));
  EXPECT_EQ(vad(z, 0.9).active, (std::vector<bool>{false, true, false, true, false}));

  const auto r = make_localization(z);
  EXPECT_EQ(r.zone_track, localize(r.map));
  EXPECT_EQ(r.map.at(3, 1), 1.7);  // raw scores are kept
}

TEST(EnhanceUtterance, SilenceShapeAndErrors) {
  const auto cfg = StftConfig::speech_default();
  const ArrayGeometry geom(uca_positions(4, 0.05));
  const auto a = SteeringSet::for_stft(geom, ZoneGrid(12), cfg, 16000);
  OracleSteeringModel oracle(4);

  const Waveform silence(4, 8123, 16000);
  const auto quiet = enhance_utterance(silence, oracle, &a, cfg);
  ASSERT_EQ(quiet.enhanced.channels(), 1u);
  EXPECT_EQ(quiet.enhanced.samples(), silence.samples());
  for (double v : quiet.enhanced.data()) EXPECT_EQ(v, 0.0);
  EXPECT_EQ(quiet.localization.map.frames(), cfg.num_frames(silence.samples()));
  for (bool act : quiet.localization.vad_active) EXPECT_FALSE(act);

  Rng rng(5);
  Waveform noisy(4, 4000, 16000);
  for (double& v : noisy.data()) v = rng.normal();
  SelectorModel sel(4, 2);
  const auto out = enhance_utterance(noisy, sel, &a, cfg);
  EXPECT_EQ(out.enhanced.samples(), 4000u);
  // Interior samples pass through; the last partial hop is lost to framing.
  const std::size_t covered = cfg.synthesis_length(cfg.num_frames(4000));
  for (std::size_t n = 400; n + 400 < covered; ++n) EXPECT_NEAR(out.enhanced.at(0, n), noisy.at(2, n), 1e-9);
  for (std::size_t n = covered; n < 4000; ++n) EXPECT_EQ(out.enhanced.at(0, n), 0.0);

  EXPECT_THROW(enhance_utterance(Waveform(3, 4000, 16000), sel, &a, cfg), std::invalid_argument);
  EXPECT_THROW(enhance_utterance(noisy, sel, nullptr, cfg), std::invalid_argument);
  EnhanceOptions nlm;
  nlm.mode = LocalizationMode::kNlm;
  EXPECT_THROW(enhance_utterance(noisy, sel, &a, cfg, nlm), std::invalid_argument);
}

TEST(EnhanceUtterance, NeuralModelBothHeads) {
  const auto cfg = StftConfig::speech_default();
  NetworkConfig nc;
  NeuralBeamformer net(nc, 6);
  const ArrayGeometry geom(uca_positions(4, 0.05));
  const auto a = SteeringSet::for_stft(geom, ZoneGrid(12), cfg, 16000);
  Rng rng(7);
  Waveform noisy(4, 3200, 16000);
  for (double& v : noisy.data()) v = 0.1 * rng.normal();
  EnhanceOptions opts;
  opts.mode = LocalizationMode::kNlm;
  const auto neural = enhance_utterance(noisy, net, &a, cfg, opts);
  ASSERT_EQ(neural.localization.map.zones(), 12u);
  for (double v : neural.localization.map.data()) {
    EXPECT_GT(v, 0.0);
    EXPECT_LT(v, 1.0);
  }
  const auto splm = enhance_utterance(noisy, net, &a, cfg);
  EXPECT_EQ(splm.enhanced.data().size(), neural.enhanced.data().size());
  for (std::size_t i = 0; i < splm.enhanced.data().size(); ++i) EXPECT_EQ(splm.enhanced.data()[i], neural.enhanced.data()[i]);
  EXPECT_TRUE(neural.enhanced.all_finite());
}

TEST(LocalizationCsv, OneRowPerFrame) {
  const auto r = make_localization(map_of({{0.1, 0.9}, {0.6, 0.2}, {0.0, 0.0}}));
  std::ostringstream os;
  write_localization_csv(os, r, 100, 16000);
  std::istringstream is(os.str());
  std::string line;
  std::vector<std::string> lines;
  while (std::getline(is, line)) lines.push_back(line);
  ASSERT_EQ(lines.size(), 4u);
  EXPECT_EQ(lines[0], "frame_index,time_s,zone,vad_score,z_1,z_2");
  EXPECT_EQ(lines[1], "0,0.000000,2,0.900000,0.1,0.9");
  EXPECT_EQ(lines[2], "1,0.006250,1,0.600000,0.6,0.2");
  EXPECT_EQ(lines[3], "2,0.012500,1,0.000000,0,0");
}

TEST(DifferentiableOps, MatchPlainImplementations) {
  Rng rng(8);
  const auto cfg = StftConfig::hann(32, 8, 32);
  Spectrogram y(3, 5, cfg.num_bins(), cfg, 16000);
  for (auto& v : y.data()) v = {rng.normal(), rng.normal()};
  const auto w = random_weights(3, 5, cfg.num_bins(), rng);
  // D = conj(w), laid out [1, M, F, T].
  Spectrogram d_spec(3, 5, cfg.num_bins(), cfg, 16000);
  for (std::size_t i = 0; i < d_spec.data().size(); ++i) d_spec.data()[i] = std::conj(w.data()[i]);
  const auto d = ops::spectrogram_batch({&d_spec});
  const auto yt = ops::spectrogram_batch({&y});

  const auto s = filter_and_sum(w, y);
  const auto st = ops::filter_and_sum(d, yt);
  const std::size_t F = cfg.num_bins(), T = 5;
  for (std::size_t f = 0; f < F; ++f) {
    for (std::size_t t = 0; t < T; ++t) {
      EXPECT_NEAR(st.re.values()[f * T + t], s.at(0, t, f).real(), 1e-12);
      EXPECT_NEAR(st.im.values()[f * T + t], s.at(0, t, f).imag(), 1e-12);
    }
  }
  const auto wave = istft(s);
  const auto wt = ops::istft(st, cfg);
  ASSERT_EQ(wt.dim(1), cfg.synthesis_length(T));
  for (std::size_t n = 0; n < wt.dim(1); ++n) EXPECT_NEAR(wt.values()[n], wave.at(0, n), 1e-12);

  const ArrayGeometry geom(uca_positions(3, 0.05));
  const SteeringSet a(geom, ZoneGrid(6), F, cfg.fft_size(), 16000);
  const auto z = splm_map(w, a);
  const auto zt = ops::steered_response(d, a);
  for (std::size_t t = 0; t < T; ++t) {
    for (std::size_t n = 0; n < 6; ++n) EXPECT_NEAR(zt.values()[t * 6 + n], z.at(t, n), 1e-12);
  }
}

TEST(DifferentiableOps, GradientsMatchFiniteDifferences) {
  for (const auto& c : selfcheck::gradient_suite(9)) {
    if (c.name == "filter_and_sum" || c.name == "istft" || c.name == "steered_response") {
      EXPECT_TRUE(c.passed) << c.name << ": " << c.value;
    }
  }
}

TEST(OracleLocalization, DelayAndSumSweepRecoversZones) {
  const auto sweep = selfcheck::localization_oracle_sweep();
  EXPECT_EQ(sweep.directions, 72u);
  EXPECT_GE(sweep.fraction(), 0.95) << sweep.recovered << "/" << sweep.directions;
  EXPECT_GT(sweep.active_vad, sweep.inactive_vad);
}

}  // namespace
}  // namespace nbeam
