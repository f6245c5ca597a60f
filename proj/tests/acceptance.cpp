// Acceptance run: one PASS/FAIL line per criterion, exit status 1 if any fail.

#include <algorithm>
#include <array>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iterator>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <sys/wait.h>
#include <unistd.h>
#include <vector>

#include "nbeam/nbeam.hpp"
#include "nbeam/surrogate.hpp"

#ifndef NBEAM_CLI_PATH
#error "NBEAM_CLI_PATH must point at the nbeam executable"
#endif

namespace fs = std::filesystem;
using namespace nbeam;

namespace {

struct Outcome {
  bool passed = false;
  std::string detail;
};

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

std::string fmt(const char* f, auto... args) {
  char buf[512];
  std::snprintf(buf, sizeof buf, f, args...);
  return buf;
}

// ---------------------------------------------------------------- 1

Outcome stft_round_trip() {
  const auto t0 = std::chrono::steady_clock::now();
  const auto c = selfcheck::stft_round_trip(100, 1, 1e-6);
  const double s = seconds_since(t0);
  return {c.passed && s < 10.0, fmt("worst interior rel. RMS %.2e (< 1e-6), 100 signals, %.2f s (< 10 s)", c.value, s)};
}

// ---------------------------------------------------------------- 2

Outcome distortionless() {
  const auto c = selfcheck::distortionless_identity(10, 2, 1e-9);
  return {c.passed, fmt("max |z - 1| = %.2e (< 1e-9) over 10 random zones/geometries", c.value)};
}

// ---------------------------------------------------------------- 3

Outcome localization_oracle() {
  const auto t0 = std::chrono::steady_clock::now();
  const auto sweep = selfcheck::localization_oracle_sweep(36, 2.5, 5.0);
  const double s = seconds_since(t0);
  const bool ok = sweep.fraction() >= 0.95 && sweep.active_vad > sweep.inactive_vad && s < 60.0;
  return {ok, fmt("%zu/%zu azimuths recovered (%.3f >= 0.95), VAD active %.3f > inactive %.3f, %.1f s (< 60 s)",
                  sweep.recovered, sweep.directions, sweep.fraction(), sweep.active_vad, sweep.inactive_vad, s)};
}

// ---------------------------------------------------------------- 4

Outcome image_source() {
  Rng rng(404);
  double worst_delay = 0.0;
  bool causal = true;
  for (int i = 0; i < 50; ++i) {
    RoomSpec room;
    room.dimensions = {rng.uniform(3.0, 8.0), rng.uniform(3.0, 8.0), rng.uniform(2.5, 4.0)};
    room.t60 = rng.uniform(0.2, 0.6);
    auto inside = [&] {
      return Vec3{rng.uniform(0.1, room.dimensions.x - 0.1), rng.uniform(0.1, room.dimensions.y - 0.1),
                  rng.uniform(0.1, room.dimensions.z - 0.1)};
    };
    const Vec3 src = inside(), mic = inside();
    const auto rir = image_source_rir(room, src, mic, 4);
    const double expected = (src - mic).norm() / room.speed_of_sound * rir.sample_rate;
    std::size_t first = 0;
    while (first < rir.taps.size() && rir.taps[first] == 0.0) ++first;
    worst_delay = std::max(worst_delay, std::abs(static_cast<double>(first) - expected));
    // Nothing may arrive before the direct path.
    causal = causal && first == rir.direct_index && first < rir.taps.size();
  }

  bool monotone = true;
  std::string tails;
  for (int g = 0; g < 5; ++g) {
    RoomSpec room;
    room.dimensions = {rng.uniform(4.0, 7.0), rng.uniform(4.0, 7.0), 3.0};
    const Vec3 src{rng.uniform(0.5, 3.5), rng.uniform(0.5, 3.5), 1.5}, mic{rng.uniform(0.5, 3.5), rng.uniform(0.5, 3.5), 1.2};
    double prev = -1.0;
    for (double beta : {0.3, 0.6, 0.9}) {
      RirOptions opts;
      opts.beta = beta;
      const auto rir = image_source_rir(room, src, mic, 15, opts);
      double e = 0.0;
      for (std::size_t n = rir.direct_index + 800; n < rir.taps.size(); ++n) e += rir.taps[n] * rir.taps[n];
      monotone = monotone && e > prev;
      if (g == 0) tails += fmt("%s%.2e", prev < 0 ? "" : " < ", e);
      prev = e;
    }
  }
  return {worst_delay <= 1.0 && causal && monotone,
          fmt("max direct-path delay error %.3f samples (<= 1) over 50 geometries, causal %s, "
              "tail energy monotone in beta %s (first geometry: %s)",
              worst_delay, causal ? "yes" : "no", monotone ? "yes" : "no", tails.c_str())};
}

// ---------------------------------------------------------------- 5

Outcome gradients() {
  double worst = 0.0;
  std::string worst_name, failed;
  for (const auto& c : selfcheck::gradient_suite(1, 1e-4)) {
    if (c.value > worst) {
      worst = c.value;
      worst_name = c.name;
    }
    if (!c.passed) failed += " " + c.name;
  }
  double model_worst = 0.0;
  for (const auto& c : selfcheck::model_gradient(27, 1e-3)) {
    model_worst = std::max(model_worst, c.value);
    if (!c.passed) failed += " " + c.name;
  }
  return {failed.empty(), fmt("ops worst rel. err %.2e (%s, < 1e-4), micro model %.2e (< 1e-3)%s%s", worst,
                              worst_name.c_str(), model_worst, failed.empty() ? "" : ", failed:", failed.c_str())};
}

// ---------------------------------------------------------------- 6

Outcome toy_training() {
  const auto t0 = std::chrono::steady_clock::now();
  const auto cfg = StftConfig::speech_default();
  const ArrayGeometry geom(uca_positions(4, 0.05), 343.0);
  const RoomSpec room;  // 5 x 5 x 3 m, T60 0.32 s
  const auto target = place_source(room, 60.0, 1.0, SourceRole::kTarget);
  const auto interferer = place_source(room, 240.0, 2.0, SourceRole::kInterference);
  MixtureSpec spec;
  spec.duration_s = 1.0;
  spec.speech_len_s = 0.8;
  spec.speech_offset_s = 0.1;
  spec.sir_db = 0.0;
  spec.sensor_snr_db = 20.0;
  spec.seed = 5;
  Rng speech_rng(11), interf_rng(12);
  const auto speech = surrogate::speech(12800, 16000, speech_rng);
  const auto interf = surrogate::interference(16000, 16000, interf_rng);
  const auto rec = synthesize_mixture(room, geom, target, interferer, speech, interf, spec, cfg);
  const auto ex = make_training_example(rec.noisy, rec.target, rec.azimuth_track, 12, cfg);

  NetworkConfig net_cfg;  // M = 4, scale 4, 12-zone localization head
  NeuralBeamformer net(net_cfg, 1);
  TrainOptions opts;
  opts.steps = 150;
  opts.adam.lr = 1e-3;
  opts.gamma = 1.0;
  opts.checkpoint_every = 0;
  Trainer trainer(net, opts, cfg);
  const auto history = trainer.run({ex}, nullptr, "");

  const auto ref = rec.target.channel(0);
  const double in_db = si_snr(rec.noisy.channel(0), ref);
  const auto steering = SteeringSet::for_stft(geom, ZoneGrid(12), cfg, 16000);
  const auto res = enhance_utterance(rec.noisy, net, &steering, cfg);
  const double out_db = si_snr(res.enhanced.channel(0), ref);

  // Smoothed loss: means over ten equal blocks of steps, plus the least-squares slope.
  std::vector<double> loss;
  for (const auto& r : history) loss.push_back(r.loss.total);
  const std::size_t blocks = 10, per = loss.size() / blocks;
  std::vector<double> smooth(blocks);
  for (std::size_t b = 0; b < blocks; ++b) {
    smooth[b] = std::accumulate(loss.begin() + b * per, loss.begin() + (b + 1) * per, 0.0) / per;
  }
  const double n = static_cast<double>(loss.size()), mean_k = (n - 1) / 2.0;
  const double mean_l = std::accumulate(loss.begin(), loss.end(), 0.0) / n;
  double sxy = 0.0, sxx = 0.0;
  for (std::size_t k = 0; k < loss.size(); ++k) {
    sxy += (k - mean_k) * (loss[k] - mean_l);
    sxx += (k - mean_k) * (k - mean_k);
  }
  const double slope = sxy / sxx;
  const double s = seconds_since(t0);
  const bool ok = out_db - in_db >= 5.0 && smooth.back() < smooth.front() && slope < 0.0 && s < 900.0;
  return {ok, fmt("%zu steps: SI-SNR %.2f -> %.2f dB (improvement %.2f >= 5), smoothed loss %.3f -> %.3f, "
                  "slope %.4f/step (< 0), %.0f s (< 900 s)",
                  history.size(), in_db, out_db, out_db - in_db, smooth.front(), smooth.back(), slope, s)};
}

// ---------------------------------------------------------------- 7

// Zone n covers the half-open arc ((n-1)w - w/2, (n-1)w + w/2] with w = 360/N.
// Angles are integers in hundredths of a degree, so the reference is exact.
Outcome zone_mapping() {
  std::size_t angles = 0, bad = 0;
  for (int N : {12, 36}) {
    const long width = 36000 / N, half = width / 2;
    for (long k = -18000; k < 54000; ++k) {
      ++angles;
      int owners = 0, owner = 0;
      for (int z = 1; z <= N; ++z) {
        const long rel = (((k - (z - 1) * width + half) % 36000) + 36000) % 36000;
        const bool in = rel > 0 && rel <= width;
        owners += in;
        if (in) owner = z;
      }
      if (owners != 1 || zone_of_angle(k / 100.0, N) != owner) ++bad;
    }
  }
  const bool examples = zone_of_angle(0.0, 12) == 1 && zone_of_angle(180.0, 12) == 7;
  return {bad == 0 && examples, fmt("%zu angles over [-180, 540) for N in {12, 36}, %zu mismatches; "
                                    "theta=0 -> %d, theta=180 -> %d (N=12)",
                                    angles, bad, zone_of_angle(0.0, 12), zone_of_angle(180.0, 12))};
}

// ---------------------------------------------------------------- 8

Outcome metric_identities() {
  std::string detail;
  bool ok = true;
  for (const auto& c : selfcheck::metric_identities(1000, 4)) {
    ok = ok && c.passed;
    detail += fmt("%s%s %.1e (tol %.0e)", detail.empty() ? "" : ", ", c.name.c_str(), c.value, c.tolerance);
  }
  return {ok, detail + ", 1000 tracks"};
}

// ---------------------------------------------------------------- 9

int run_cli(const std::string& args) {
  const std::string cmd = std::string(NBEAM_CLI_PATH) + " " + args + " >/dev/null 2>&1";
  const int status = std::system(cmd.c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

std::string slurp(const fs::path& p) {
  std::ifstream is(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(is), {}};
}

// Training logs carry wall-clock timings; everything else must match.
std::string without_timings(const std::string& log) {
  std::string out;
  std::istringstream is(log);
  for (std::string line; std::getline(is, line);) {
    auto j = nlohmann::json::parse(line);
    j.erase("wall_ms");
    out += j.dump() + "\n";
  }
  return out;
}

Outcome determinism() {
  const auto root = fs::temp_directory_path() / ("nbeam_acceptance_" + std::to_string(::getpid()));
  fs::remove_all(root);
  fs::create_directories(root);
  const nlohmann::json cfg = {{"seed", 2024},
                              {"dataset",
                               {{"duration_s", 1.0},
                                {"speech_len_s", 0.6},
                                {"max_order", 4},
                                {"rooms", nlohmann::json::array({{{"dimensions", {5.0, 5.0, 3.0}},
                                                                  {"target_distance", {1.0, 1.5}},
                                                                  {"t60", {0.2, 0.4}}}})}}},
                              {"train", {{"steps", 4}, {"checkpoint_every", 2}}}};
  std::ofstream(root / "config.json") << cfg.dump(2);
  const std::string conf = "'" + (root / "config.json").string() + "'";
  int codes = 0;
  for (const char* run : {"a", "b"}) {
    const auto dir = root / run;
    codes |= run_cli("synth --config " + conf + " --count 3 --threads 2 --out '" + (dir / "data").string() + "'");
    codes |= run_cli("train --config " + conf + " --manifest '" + (dir / "data" / "manifest.jsonl").string() +
                     "' --out '" + (dir / "train").string() + "'");
  }
  std::size_t files = 0, differing = 0;
  for (const auto& e : fs::recursive_directory_iterator(root / "a")) {
    if (!e.is_regular_file()) continue;
    ++files;
    const auto other = root / "b" / fs::relative(e.path(), root / "a");
    const bool log = e.path().filename() == "train_log.jsonl";
    const bool same = log ? without_timings(slurp(e.path())) == without_timings(slurp(other))
                          : slurp(e.path()) == slurp(other);
    differing += !same;
  }
  std::error_code ec;
  fs::remove_all(root, ec);
  return {codes == 0 && files >= 9 && differing == 0,
          fmt("synth + train run twice with seed 2024: %zu artifacts compared, %zu differ "
              "(training log compared without wall_ms)%s",
              files, differing, codes == 0 ? "" : ", a command failed")};
}

// ---------------------------------------------------------------- 10

Outcome causality() {
  NeuralBeamformer net(NetworkConfig{}, 15);
  const std::size_t M = 4, T = 16, F = 257;
  StftConfig cfg = StftConfig::speech_default();
  Spectrogram y(M, T, F, cfg, 16000);
  Rng rng(16);
  for (std::size_t m = 0; m < M; ++m) {
    for (std::size_t t = 0; t < T; ++t) {
      for (auto& v : y.frame(m, t)) v = Complex(rng.normal(), rng.normal());
    }
  }
  cnn::NoGradGuard guard;
  const auto base = net.forward(model_input({&y}), false);
  std::size_t violations = 0, trials_changed = 0;
  for (int trial = 0; trial < 10; ++trial) {
    const std::size_t t = rng.below(T - 1);
    auto z = y;
    for (std::size_t m = 0; m < M; ++m) {
      for (auto& v : z.frame(m, t + 1)) v += Complex(rng.normal(), rng.normal());
    }
    const auto out = net.forward(model_input({&z}), false);
    bool later = false;
    auto compare = [&](std::span<const double> a, std::span<const double> b, std::size_t frames_last) {
      // Tensors are laid out with time as the fastest axis...
      for (std::size_t i = 0; i < a.size(); ++i) {
        const std::size_t tt = i % frames_last;
        if (tt <= t && a[i] != b[i]) ++violations;
        if (tt > t && a[i] != b[i]) later = true;
      }
    };
    compare(out.full_band.re.values(), base.full_band.re.values(), T);
    compare(out.full_band.im.values(), base.full_band.im.values(), T);
    // ...except the localization head, which is [B, T, N].
    const std::size_t N = out.nlm.dim(2);
    for (std::size_t i = 0; i < out.nlm.values().size(); ++i) {
      if (i / N <= t && out.nlm.values()[i] != base.nlm.values()[i]) ++violations;
    }
    trials_changed += later;
  }
  return {violations == 0 && trials_changed == 10,
          fmt("10 random perturbed frames on the M=4 scale-4 model: %zu earlier-output values changed (0 allowed), "
              "perturbation reached later frames in %zu/10 trials",
              violations, trials_changed)};
}

}  // namespace

int main() {
  struct Criterion {
    int id;
    const char* title;
    std::function<Outcome()> run;
  };
  const std::vector<Criterion> criteria{
      {1, "STFT round trip", stft_round_trip},
      {2, "distortionless identity", distortionless},
      {3, "delay-and-sum localization oracle", localization_oracle},
      {4, "image-source checks", image_source},
      {5, "gradient suite", gradients},
      {6, "toy training", toy_training},
      {7, "zone mapping", zone_mapping},
      {8, "metric identities", metric_identities},
      {9, "determinism", determinism},
      {10, "causality", causality},
  };
  int failed = 0;
  for (const auto& c : criteria) {
    Outcome o;
    try {
      o = c.run();
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    std::printf("%s criterion %d (%s): %s\n", o.passed ? "PASS" : "FAIL", c.id, c.title, o.detail.c_str());
    std::fflush(stdout);
    failed += !o.passed;
  }
  std::printf("%d/%zu criteria passed\n", static_cast<int>(criteria.size()) - failed, criteria.size());
  return failed == 0 ? 0 : 1;
}
