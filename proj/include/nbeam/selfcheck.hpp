#pragma once

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <functional>
#include <map>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include "nbeam/array.hpp"
#include "nbeam/beamloc.hpp"
#include "nbeam/cnn/gradcheck.hpp"
#include "nbeam/cnn/layers.hpp"
#include "nbeam/cnn/ops.hpp"
#include "nbeam/dsp.hpp"
#include "nbeam/losses.hpp"
#include "nbeam/metrics.hpp"
#include "nbeam/model.hpp"
#include "nbeam/rng.hpp"
#include "nbeam/roomsim.hpp"
#include "nbeam/surrogate.hpp"

namespace nbeam::selfcheck {

struct Check {
  std::string name;
  double value = 0.0;
  double tolerance = 0.0;
  bool passed = false;
  std::string detail;
};

inline Check below(std::string name, double value, double tol, std::string detail = {}) {
  return {std::move(name), value, tol, value < tol, std::move(detail)};
}

namespace detail {

inline cnn::Tensor random_tensor(cnn::Shape s, Rng& rng, bool param, double scale = 1.0) {
  std::vector<double> v(cnn::numel(s));
  for (double& x : v) x = scale * rng.normal();
  return param ? cnn::Tensor::parameter(std::move(s), std::move(v)) : cnn::Tensor::constant(std::move(s), std::move(v));
}

// Random linear functional, so every output element carries a distinct weight.
inline cnn::Tensor probe(const cnn::Tensor& out, std::uint64_t seed) {
  Rng rng(seed);
  return cnn::sum(cnn::mul(out, random_tensor(out.shape(), rng, false)));
}

inline cnn::Tensor probe(const cnn::ComplexTensor& out, std::uint64_t seed) {
  return cnn::add(probe(out.re, seed), probe(out.im, seed + 1));
}

inline std::vector<cnn::Tensor> with(std::vector<cnn::Tensor> params, std::initializer_list<cnn::Tensor> extra) {
  params.insert(params.end(), extra.begin(), extra.end());
  return params;
}

}  // namespace detail

/// Finite-difference checks of every differentiable operation on small
/// random shapes, one entry per operation.
inline std::vector<Check> gradient_suite(std::uint64_t seed = 1, double tol = 1e-4) {
  using namespace cnn;
  using detail::probe;
  using detail::random_tensor;
  using detail::with;
  Rng rng(seed);
  auto param = [&](Shape s, double scale = 1.0) { return random_tensor(std::move(s), rng, true, scale); };
  std::vector<Check> out;
  auto run = [&](const std::string& name, const std::function<Tensor()>& loss, std::vector<Tensor> inputs) {
    out.push_back(below(name, gradcheck(loss, std::move(inputs)).max_rel_error, tol));
  };

  const ConvGeometry enc{5, 2, 2, 1, 2, 2, 1, 0};
  const ConvGeometry dec{5, 2, 2, 1, 2, 2, 0, 1};

  auto a = param({2, 3, 4}), b = param({2, 3, 4});
  run("sigmoid", [&] { return probe(sigmoid(a), 1); }, {a});
  run("tanh", [&] { return probe(tanh(a), 2); }, {a});
  run("magnitude", [&] { return probe(magnitude(a, b), 3); }, {a, b});
  run("shape ops", [&] { return probe(concat({permute(a, {2, 0, 1}), slice(permute(b, {2, 0, 1}), 2, 1, 3)}, 2), 4); },
      {a, b});

  auto x = param({2, 3, 8, 5});
  auto w = param({4, 3, 5, 2}, 0.3), bias = param({4});
  run("conv2d", [&] { return probe(conv2d(x, w, bias, enc), 5); }, {x, w, bias});
  auto y = param({2, 4, 4, 5}), bt = param({3});
  run("conv_transpose2d", [&] { return probe(conv_transpose2d(y, w, bt, dec, 8, 5), 6); }, {y, w, bt});

  auto bx = param({2, 3, 4, 3}), g = param({3}), be = param({3});
  BatchNormStats stats(3);
  run("batch_norm (training)", [&] { return probe(batch_norm(bx, g, be, stats, true), 7); }, {bx, g, be});
  run("batch_norm (inference)", [&] { return probe(batch_norm(bx, g, be, stats, false), 8); }, {bx, g, be});

  auto slope = param({3}, 0.3);
  run("prelu", [&] { return probe(prelu(a, slope, 1), 9); }, {a, slope});
  auto lw = param({5, 4}), lb = param({5});
  run("linear", [&] { return probe(linear(a, lw, lb), 10); }, {a, lw, lb});
  auto seq = param({3, 2, 4});
  auto wih = param({12, 4}, 0.5), whh = param({12, 3}, 0.5), lstm_b = param({12});
  run("lstm", [&] { return probe(lstm(seq, wih, whh, lstm_b), 11); }, {seq, wih, whh, lstm_b});

  ComplexTensor cx{param({2, 2, 8, 3}), param({2, 2, 8, 3})};
  ComplexConv2d conv(2, 3, enc, rng);
  ParameterSet pc;
  conv.collect("conv", pc);
  run("complex conv", [&] { return probe(conv.forward(cx), 12); }, with(pc.tensors(), {cx.re, cx.im}));

  ComplexConvTranspose2d deconv(2, 3, dec, rng);
  ComplexTensor cy{param({2, 2, 4, 3}), param({2, 2, 4, 3})};
  ParameterSet pd;
  deconv.collect("deconv", pd);
  run("complex deconv", [&] { return probe(deconv.forward(cy, 8, 3), 13); }, with(pd.tensors(), {cy.re, cy.im}));

  ComplexBatchNorm bn(2);
  ParameterSet pb;
  bn.collect("bn", pb);
  run("complex batch norm", [&] { return probe(bn.forward(cx, true), 14); }, with(pb.tensors(), {cx.re, cx.im}));

  ComplexLstm clstm(4, 3, rng);
  ComplexTensor cs{param({3, 2, 4}), param({3, 2, 4})};
  ParameterSet pl;
  clstm.collect("lstm", pl);
  run("complex lstm", [&] { return probe(clstm.forward(cs), 15); }, with(pl.tensors(), {cs.re, cs.im}));

  ComplexLinear clin(4, 2, rng);
  ParameterSet pn;
  clin.collect("lin", pn);
  run("complex linear", [&] { return probe(clin.forward(cs), 16); }, with(pn.tensors(), {cs.re, cs.im}));

  // Beamforming and loss path.
  const auto cfg = StftConfig::hann(32, 8, 32);
  const std::size_t F = cfg.num_bins(), T = 6;
  ComplexTensor d{param({1, 3, F, T}, 0.5), param({1, 3, F, T}, 0.5)};
  ComplexTensor spec{random_tensor({1, 3, F, T}, rng, false), random_tensor({1, 3, F, T}, rng, false)};
  run("filter_and_sum", [&] { return probe(ops::filter_and_sum(d, spec), 17); }, {d.re, d.im});
  ComplexTensor s1{param({1, F, T}), param({1, F, T})};
  run("istft", [&] { return probe(ops::istft(s1, cfg), 18); }, {s1.re, s1.im});
  const ArrayGeometry geom(uca_positions(3, 0.05));
  const SteeringSet steering(geom, ZoneGrid(4), F, cfg.fft_size(), 16000);
  run("steered_response", [&] { return probe(ops::steered_response(d, steering), 19); }, {d.re, d.im});

  auto est = param({2, 64});
  auto ref = random_tensor({2, 64}, rng, false);
  run("si-snr loss", [&] { return loss_si_snr(est, ref); }, {est});
  std::vector<double> pv(12), zv(12);
  for (std::size_t i = 0; i < pv.size(); ++i) {
    pv[i] = rng.uniform(0.05, 0.95);
    zv[i] = rng.uniform() < 0.5 ? 0.0 : 1.0;
  }
  auto pred = Tensor::parameter({3, 4}, pv);
  const auto truth = Tensor::constant({3, 4}, zv);
  run("bce loss", [&] { return bce_loss(pred, truth); }, {pred});
  run("total loss", [&] { return total_loss(bce_loss(pred, truth), loss_si_snr(est, ref), 0.7); }, {pred, est});
  return out;
}

/// End-to-end check of the micro model in inference and training mode.
inline std::vector<Check> model_gradient(std::uint64_t seed = 27, double tol = 1e-3) {
  NetworkConfig cfg;
  cfg.dccrn = MimoDccrnConfig::micro();
  cfg.nlm = NlmConfig::for_zones(3);
  NeuralBeamformer net(cfg, seed);
  const auto cs = StftConfig::hann(128, 32, 128);
  Spectrogram y(cfg.dccrn.mics, 4, cs.num_bins(), cs, 16000);
  Rng rng(seed + 1);
  for (auto& v : y.data()) v = {rng.normal(), rng.normal()};
  const auto x = model_input({&y});
  const auto wr = detail::random_tensor({1, cfg.dccrn.mics, cs.num_bins(), 4}, rng, false);
  const auto wi = detail::random_tensor({1, cfg.dccrn.mics, cs.num_bins(), 4}, rng, false);
  const auto wz = detail::random_tensor({1, 4, 3}, rng, false);
  auto check = [&](bool training, const cnn::GradCheckOptions& opts) {
    auto loss = [&] {
      const auto out = net.forward(x, training);
      return cnn::add(cnn::add(cnn::sum(cnn::mul(out.full_band.re, wr)), cnn::sum(cnn::mul(out.full_band.im, wi))),
                      cnn::sum(cnn::mul(out.nlm, wz)));
    };
    return cnn::gradcheck(loss, net.parameters().tensors(), opts).max_rel_error;
  };
  cnn::GradCheckOptions inference;
  inference.max_elements = 48;
  cnn::GradCheckOptions training;
  training.step = 1e-6;
  training.floor = 1e-4;
  training.max_elements = 48;
  return {below("micro model (inference)", check(false, inference), tol),
          below("micro model (training)", check(true, training), tol)};
}

/// Worst interior relative RMS reconstruction error of istft(stft(x)) over
/// `count` random 1-s signals.
inline Check stft_round_trip(std::size_t count = 100, std::uint64_t seed = 1, double tol = 1e-6) {
  const auto cfg = StftConfig::speech_default();
  const std::size_t n = 16000, skip = cfg.window_length();
  double worst = 0.0;
  for (std::size_t i = 0; i < count; ++i) {
    Rng rng(Rng::derive(seed, i));
    Waveform x(1, n, 16000);
    for (double& v : x.data()) v = rng.normal();
    const Waveform y = istft(stft(x, cfg));
    double err = 0.0, ref = 0.0;
    for (std::size_t k = skip; k + skip < n; ++k) {
      const double e = x.at(0, k) - y.at(0, k);
      err += e * e;
      ref += x.at(0, k) * x.at(0, k);
    }
    worst = std::max(worst, std::sqrt(err / ref));
  }
  return below("stft round trip", worst, tol, std::to_string(count) + " signals");
}

/// w = a_n / M for a random zone and UCA: the distortionless index of zone n is 1.
inline Check distortionless_identity(std::size_t trials = 10, std::uint64_t seed = 2, double tol = 1e-9) {
  const auto cfg = StftConfig::speech_default();
  double worst = 0.0;
  for (std::size_t i = 0; i < trials; ++i) {
    Rng rng(Rng::derive(seed, i));
    const std::size_t mics = 2 + rng.below(7);
    const int zones = 4 + static_cast<int>(rng.below(33));
    const ArrayGeometry geom(uca_positions(mics, rng.uniform(0.02, 0.2)), rng.uniform(330.0, 350.0));
    const SteeringSet a = SteeringSet::for_stft(geom, ZoneGrid(zones), cfg, 16000);
    const std::size_t n = rng.below(static_cast<std::uint64_t>(zones));
    const std::size_t frames = 3;
    FilterWeights w(mics, frames, a.bins());
    for (std::size_t m = 0; m < mics; ++m) {
      for (std::size_t t = 0; t < frames; ++t) {
        for (std::size_t f = 0; f < a.bins(); ++f) w.at(m, t, f) = a.at(n, f, m) / static_cast<double>(mics);
      }
    }
    const auto z = splm_map(w, a);
    for (std::size_t t = 0; t < frames; ++t) worst = std::max(worst, std::abs(z.at(t, n) - 1.0));
  }
  return below("distortionless identity", worst, tol, std::to_string(trials) + " zones/geometries");
}

struct OracleSweep {
  std::size_t directions = 0;
  std::size_t recovered = 0;
  double frame_accuracy = 0.0;  // mean over directions of the per-frame hit rate
  double active_vad = 0.0;      // mean VAD score over speech frames
  double inactive_vad = 0.0;    // mean VAD score over the rest
  double fraction() const { return directions ? static_cast<double>(recovered) / static_cast<double>(directions) : 0.0; }
};

/// Delay-and-sum localization over an anechoic simulation. For each source
/// azimuth on the sweep a 6-mic, 5 cm UCA hears one far speech-like source
/// over a weak sensor-noise floor. The oracle beamformer matches the
/// observed inter-mic phases, the distortionless index is averaged up to
/// the array's spatial aliasing frequency, and a direction counts as
/// recovered when localize() names its zone on most speech frames.
inline OracleSweep localization_oracle_sweep(int zones = 36, double start_deg = 2.5, double step_deg = 5.0,
                                             std::optional<double> snr_db = 50.0, std::uint64_t seed = 3) {
  const auto cfg = StftConfig::speech_default();
  const int fs = 16000;
  const ArrayGeometry geom(uca_positions(6, 0.05));
  const SteeringSet steering = SteeringSet::for_stft(geom, ZoneGrid(zones), cfg, fs);
  const RoomSpec room{{24.0, 24.0, 6.0}, 0.0, 343.0};
  SynthesisOptions syn;
  syn.rir.beta = 0.0;
  syn.rir.interpolation = DelayInterpolation::kSinc;
  syn.array_height = 3.0;
  MixtureSpec spec;
  spec.duration_s = 0.6;
  spec.speech_len_s = 0.4;
  spec.speech_offset_s = 0.1;
  spec.sensor_snr_db = snr_db;
  EnhanceOptions opts;
  opts.splm_max_hz = spatial_aliasing_hz(geom);
  OracleSteeringModel oracle(geom.size());

  OracleSweep res;
  double act_sum = 0.0, inact_sum = 0.0, acc_sum = 0.0;
  std::size_t act_n = 0, inact_n = 0;
  for (double az = start_deg; az < 360.0; az += step_deg) {
    Rng rng(Rng::derive(seed, res.directions));
    spec.seed = rng.next();
    const Waveform speech = surrogate::speech(static_cast<std::size_t>(spec.speech_len_s * fs), fs, rng);
    const auto target = place_source(room, az, 10.0, SourceRole::kTarget, syn.array_height);
    const auto rec = synthesize_mixture(room, geom, target, std::nullopt, speech, Waveform{}, spec, cfg, syn);
    const auto out = enhance_utterance(rec.noisy, oracle, &steering, cfg, opts);
    const int truth = zone_of_angle(az, zones);
    std::size_t hits = 0, active = 0;
    for (std::size_t t = 0; t < rec.azimuth_track.size(); ++t) {
      const double v = out.localization.vad_scores[t];
      if (rec.azimuth_track[t]) {
        ++active;
        hits += out.localization.zone_track[t] == truth;
        act_sum += v;
        ++act_n;
      } else {
        inact_sum += v;
        ++inact_n;
      }
    }
    ++res.directions;
    if (2 * hits > active) ++res.recovered;
    acc_sum += active ? static_cast<double>(hits) / static_cast<double>(active) : 0.0;
  }
  res.frame_accuracy = res.directions ? acc_sum / static_cast<double>(res.directions) : 0.0;
  res.active_vad = act_n ? act_sum / static_cast<double>(act_n) : 0.0;
  res.inactive_vad = inact_n ? inact_sum / static_cast<double>(inact_n) : 0.0;
  return res;
}

/// ACC + AER + OER == 1 exactly on random tracks, plus closed-form BCE and
/// total-loss values.
inline std::vector<Check> metric_identities(std::size_t tracks = 1000, std::uint64_t seed = 4) {
  Rng rng(seed);
  double worst_sum = 0.0;
  for (std::size_t i = 0; i < tracks; ++i) {
    const int zones = 2 + static_cast<int>(rng.below(40));
    const std::size_t len = 1 + rng.below(200);
    std::vector<int> pred(len), truth(len);
    std::vector<bool> active(len);
    for (std::size_t t = 0; t < len; ++t) {
      pred[t] = 1 + static_cast<int>(rng.below(static_cast<std::uint64_t>(zones)));
      truth[t] = 1 + static_cast<int>(rng.below(static_cast<std::uint64_t>(zones)));
      active[t] = rng.uniform() < 0.7;
    }
    active[rng.below(len)] = true;
    const auto m = loc_metrics(pred, truth, active, zones);
    worst_sum = std::max(worst_sum, std::abs((m.acc + m.aer + m.oer) - 1.0));
  }
  std::vector<Check> out;
  Check exact{"acc+aer+oer == 1", worst_sum, 0.0, worst_sum == 0.0, std::to_string(tracks) + " tracks"};
  out.push_back(exact);

  LocalizationMap one(1, 1), half(1, 1);
  one.at(0, 0) = 1.0;
  half.at(0, 0) = 0.5;
  double bce_err = std::abs(bce_loss(one, half) - std::numbers::ln2);
  LocalizationMap z(4, 5), u(4, 5);
  for (std::size_t i = 0; i < z.data().size(); ++i) {
    z.data()[i] = rng.uniform() < 0.5 ? 0.0 : 1.0;
    u.data()[i] = 0.5;
  }
  bce_err = std::max(bce_err, std::abs(bce_loss(z, u) - std::numbers::ln2));
  out.push_back(below("bce closed form", bce_err, 1e-12));

  double total_err = std::abs(total_loss(0.5, -10.0, 1.0) - (-9.5));
  for (int i = 0; i < 100; ++i) {
    const double bce = rng.uniform(0.0, 5.0), s = rng.uniform(-60.0, 60.0), gamma = rng.uniform(0.0, 3.0);
    total_err = std::max(total_err, std::abs(total_loss(bce, s, gamma) - (bce + gamma * s)));
    const auto tt = total_loss(cnn::Tensor::scalar(bce), cnn::Tensor::scalar(s), gamma);
    total_err = std::max(total_err, std::abs(tt.item() - (bce + gamma * s)));
  }
  Check decomposition{"total loss decomposition", total_err, 0.0, total_err == 0.0, {}};
  out.push_back(decomposition);
  return out;
}

/// Everything `nbeam selfcheck` runs. `progress` receives each result as it completes.
inline std::vector<Check> run_all(const std::function<void(const Check&)>& progress = {}) {
  std::vector<Check> all;
  auto add = [&](Check c) {
    if (progress) progress(c);
    all.push_back(std::move(c));
  };
  for (auto& c : gradient_suite()) add(std::move(c));
  for (auto& c : model_gradient()) add(std::move(c));
  add(stft_round_trip());
  add(distortionless_identity());
  const auto sweep = localization_oracle_sweep();
  Check loc{"steering oracle localization", sweep.fraction(), 0.95, sweep.fraction() >= 0.95,
            std::to_string(sweep.recovered) + "/" + std::to_string(sweep.directions) + " directions"};
  add(std::move(loc));
  Check v{"steering oracle vad", sweep.active_vad - sweep.inactive_vad, 0.0, sweep.active_vad > sweep.inactive_vad,
          "active " + std::to_string(sweep.active_vad) + " vs inactive " + std::to_string(sweep.inactive_vad)};
  add(std::move(v));
  for (auto& c : metric_identities()) add(std::move(c));
  return all;
}

}  // namespace nbeam::selfcheck
