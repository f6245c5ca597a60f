#pragma once

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <limits>
#include <numeric>
#include <optional>
#include <ostream>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "nbeam/array.hpp"
#include "nbeam/beamloc.hpp"
#include "nbeam/cnn/adam.hpp"
#include "nbeam/cnn/checkpoint.hpp"
#include "nbeam/dataset.hpp"
#include "nbeam/dsp.hpp"
#include "nbeam/losses.hpp"
#include "nbeam/model.hpp"
#include "nbeam/wav.hpp"

namespace nbeam {

// Which localization map feeds the BCE term. kNone trains enhancement only.
enum class LocalizationTarget { kNone, kSplm, kNlm };

inline LocalizationTarget parse_localization_target(const std::string& s) {
  if (s == "none") return LocalizationTarget::kNone;
  if (s == "splm") return LocalizationTarget::kSplm;
  if (s == "nlm") return LocalizationTarget::kNlm;
  throw std::invalid_argument("unknown localization target '" + s + "' (expected none, splm or nlm)");
}

inline std::string to_string(LocalizationTarget t) {
  switch (t) {
    case LocalizationTarget::kNone: return "none";
    case LocalizationTarget::kSplm: return "splm";
    case LocalizationTarget::kNlm: return "nlm";
  }
  return "?";
}

struct TrainOptions {
  std::size_t steps = 500;
  cnn::AdamOptions adam;
  double gamma = 1.0;
  LocalizationTarget localization = LocalizationTarget::kNlm;
  SiSnrConvention convention = SiSnrConvention::kStandard;
  std::size_t checkpoint_every = 100;  // 0: only the final checkpoint
  std::size_t reference_mic = 0;
  bool shuffle = true;
  std::uint64_t seed = 0;
  std::optional<std::size_t> nan_at_step;  // debug: poison the loss at this step
};

class TrainingDiverged : public std::runtime_error {
 public:
  TrainingDiverged(const std::string& what, std::size_t step) : std::runtime_error(what), step_(step) {}
  std::size_t step() const { return step_; }

 private:
  std::size_t step_;
};

// One utterance prepared as graph constants.
struct TrainingExample {
  ComplexTensor input;     // [1, M, F', T]
  ComplexTensor spectrum;  // [1, M, F, T]
  Tensor reference;        // [1, L] direct+early target at the reference mic
  Tensor truth;            // [1, T, N] zone labels
  std::size_t frames = 0;
};

inline TrainingExample make_training_example(const Waveform& noisy, const Waveform& target, const AzimuthTrack& track,
                                             int zones, const StftConfig& cfg, std::size_t reference_mic = 0) {
  if (reference_mic >= target.channels()) throw std::invalid_argument("reference mic out of range");
  if (noisy.samples() != target.samples()) throw std::invalid_argument("noisy and target lengths differ");
  const Spectrogram y = stft(noisy, cfg);
  if (track.size() != y.frames()) throw std::invalid_argument("azimuth track length does not match frame count");
  TrainingExample ex;
  ex.frames = y.frames();
  ex.spectrum = ops::spectrogram_batch({&y});
  ex.input = model_input({&y});
  const std::size_t L = cfg.synthesis_length(y.frames());
  const auto ref = target.channel(reference_mic);
  std::vector<double> r(L, 0.0);
  std::copy_n(ref.begin(), std::min(L, ref.size()), r.begin());
  ex.reference = Tensor::constant({1, L}, std::move(r));
  const auto z = ground_truth_map(track, zones);
  ex.truth = Tensor::constant({1, z.frames(), z.zones()}, {z.data().begin(), z.data().end()});
  return ex;
}

inline std::vector<TrainingExample> load_training_examples(const std::string& manifest_path, int zones,
                                                           const StftConfig& cfg, std::size_t reference_mic = 0) {
  std::vector<TrainingExample> out;
  for (const auto& e : read_manifest(manifest_path)) {
    const Waveform noisy = wav::read(resolve_path(manifest_path, e.noisy_path));
    const Waveform target = wav::read(resolve_path(manifest_path, e.target_path));
    out.push_back(make_training_example(noisy, target, entry_azimuth_track(e, cfg), zones, cfg, reference_mic));
  }
  return out;
}

struct StepRecord {
  std::size_t step = 0;  // 1-based count of completed updates
  LossBreakdown loss;
  double wall_ms = 0.0;
};

inline nlohmann::json to_log_json(const StepRecord& r) {
  return {{"step", r.step},           {"loss_bce", r.loss.loss_bce},   {"loss_sisnr", r.loss.loss_sisnr},
          {"total", r.loss.total},     {"si_snr_db", r.loss.si_snr_db}, {"wall_ms", r.wall_ms}};
}

/// Single-utterance Adam training of a NeuralBeamformer on the multi-task loss.
class Trainer {
 public:
  Trainer(NeuralBeamformer& net, TrainOptions opts, StftConfig stft_cfg,
          std::optional<SteeringSet> steering = std::nullopt)
      : net_(net), opts_(opts), stft_(std::move(stft_cfg)), steering_(std::move(steering)),
        adam_(net.parameters().tensors(), opts.adam) {
    if (opts_.localization == LocalizationTarget::kNlm && !net_.has_nlm()) {
      throw std::invalid_argument("training target nlm needs a model with a localization head");
    }
    if (opts_.localization == LocalizationTarget::kSplm && !steering_) {
      throw std::invalid_argument("training target splm needs a steering set");
    }
  }

  std::size_t steps_done() const { return static_cast<std::size_t>(adam_.steps()); }
  const TrainOptions& options() const { return opts_; }

  /// Forward pass and loss; with `with_grad`, also backward into parameter grads.
  LossBreakdown evaluate(const TrainingExample& ex, bool training, bool with_grad) {
    std::optional<cnn::NoGradGuard> guard;
    if (!with_grad) guard.emplace();
    const NetworkOutput out = net_.forward(ex.input, training);
    const ComplexTensor s = ops::filter_and_sum(out.full_band, ex.spectrum);
    const Tensor wave = ops::istft(s, stft_);
    const Tensor l_sisnr = loss_si_snr(wave, ex.reference, opts_.convention);
    Tensor l_bce = Tensor::scalar(0.0);
    if (opts_.localization == LocalizationTarget::kNlm) {
      l_bce = bce_loss(out.nlm, ex.truth);
    } else if (opts_.localization == LocalizationTarget::kSplm) {
      l_bce = bce_loss(ops::steered_response(out.full_band, *steering_), ex.truth);
    }
    Tensor total = opts_.gamma == 0.0 ? l_bce : total_loss(l_bce, l_sisnr, opts_.gamma);
    LossBreakdown b;
    b.gamma = opts_.gamma;
    b.loss_sisnr = l_sisnr.item();
    b.si_snr_db = si_snr(wave.values(), ex.reference.values(), SiSnrConvention::kStandard);
    b.loss_bce = l_bce.item();
    b.total = total.item();
    if (with_grad) cnn::backward(total);
    return b;
  }

  /// One Adam update on `ex`. Throws TrainingDiverged (parameters untouched) on a non-finite loss.
  StepRecord step(const TrainingExample& ex) {
    const auto t0 = std::chrono::steady_clock::now();
    adam_.zero_grad();
    LossBreakdown b = evaluate(ex, true, true);
    const std::size_t k = steps_done() + 1;
    if (opts_.nan_at_step && *opts_.nan_at_step == k) b.total = std::numeric_limits<double>::quiet_NaN();
    if (!std::isfinite(b.total)) {
      throw TrainingDiverged("non-finite loss at step " + std::to_string(k) + " (bce " + std::to_string(b.loss_bce) +
                                 ", si-snr loss " + std::to_string(b.loss_sisnr) + ")",
                             k);
    }
    adam_.step();
    const double ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
    return {k, b, ms};
  }

  /// Example for update number `k` (1-based): a fresh seeded permutation per pass over the data.
  std::size_t example_index(std::size_t k, std::size_t count) const {
    const std::size_t epoch = (k - 1) / count, pos = (k - 1) % count;
    if (!opts_.shuffle) return pos;
    std::vector<std::size_t> order(count);
    std::iota(order.begin(), order.end(), std::size_t{0});
    Rng rng(Rng::derive(opts_.seed, epoch));
    for (std::size_t i = count; i > 1; --i) std::swap(order[i - 1], order[rng.below(i)]);
    return order[pos];
  }

  /// Trains until `opts.steps` updates are done, writing one JSON line per
  /// step to `log` and checkpoints to `checkpoint_path` when non-empty. On
  /// divergence the last finite state is saved before rethrowing.
  std::vector<StepRecord> run(const std::vector<TrainingExample>& data, std::ostream* log,
                              const std::string& checkpoint_path) {
    if (data.empty()) throw std::invalid_argument("training data is empty");
    std::vector<StepRecord> history;
    while (steps_done() < opts_.steps) {
      const auto& ex = data[example_index(steps_done() + 1, data.size())];
      StepRecord r;
      try {
        r = step(ex);
      } catch (const TrainingDiverged&) {
        if (!checkpoint_path.empty()) save(checkpoint_path);
        throw;
      }
      history.push_back(r);
      if (log) *log << to_log_json(r).dump() << '\n' << std::flush;
      const bool periodic = opts_.checkpoint_every > 0 && r.step % opts_.checkpoint_every == 0;
      if (!checkpoint_path.empty() && (periodic || r.step == opts_.steps)) save(checkpoint_path);
    }
    return history;
  }

  cnn::Checkpoint checkpoint() const {
    cnn::Checkpoint ckpt;
    net_.save_to(ckpt);
    ckpt.meta["step"] = steps_done();
    ckpt.meta["train"] = {{"gamma", opts_.gamma},
                          {"localization", to_string(opts_.localization)},
                          {"lr", opts_.adam.lr},
                          {"seed", opts_.seed}};
    const auto& params = net_.parameters().params;
    for (std::size_t i = 0; i < params.size(); ++i) {
      const cnn::Shape s{params[i].second.size()};
      ckpt.add("adam.m." + params[i].first, s, adam_.first_moments()[i]);
      ckpt.add("adam.v." + params[i].first, s, adam_.second_moments()[i]);
    }
    return ckpt;
  }

  void save(const std::string& path) const { cnn::save_checkpoint(path, checkpoint()); }

  /// Restores parameters, buffers and optimizer state for resumption.
  void restore(const cnn::Checkpoint& ckpt) {
    net_.load_from(ckpt);
    const auto& params = net_.parameters().params;
    for (std::size_t i = 0; i < params.size(); ++i) {
      const cnn::Shape s{params[i].second.size()};
      if (ckpt.has("adam.m." + params[i].first)) {
        ckpt.restore("adam.m." + params[i].first, s, adam_.first_moments()[i]);
        ckpt.restore("adam.v." + params[i].first, s, adam_.second_moments()[i]);
      }
    }
    adam_.set_steps(ckpt.meta.value("step", std::uint64_t{0}));
  }

 private:
  NeuralBeamformer& net_;
  TrainOptions opts_;
  StftConfig stft_;
  std::optional<SteeringSet> steering_;
  cnn::Adam adam_;
};

}  // namespace nbeam
