// nbeam: synthesize, train, enhance, evaluate, self-check.
//
// Config precedence, lowest first: built-in defaults, --config file,
// --set key=value overrides, dedicated flags (--seed, --threads, --steps, ...).
// Exit codes: 0 success, 1 user error, 2 internal error.

#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "nbeam/nbeam.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

constexpr int kExitUser = 1;
constexpr int kExitInternal = 2;

struct ConfigArgs {
  std::string path;
  std::vector<std::string> sets;
  std::optional<std::uint64_t> seed;
  std::optional<unsigned> threads;

  void add_to(CLI::App* cmd, bool with_seed = true) {
    cmd->add_option("--config", path, "JSON config file")->check(CLI::ExistingFile);
    cmd->add_option("--set", sets, "override a config key, e.g. --set train.lr=0.0005")->take_all();
    if (with_seed) cmd->add_option("--seed", seed, "master seed");
    cmd->add_option("--threads", threads, "worker thread cap");
  }

  // `fallback` is used when no --config is given and the file exists.
  nbeam::RunConfig resolve(const std::string& fallback = {}) const {
    json user;
    if (!path.empty()) {
      user = nbeam::read_json_file(path);
    } else if (!fallback.empty() && fs::exists(fallback)) {
      user = nbeam::read_json_file(fallback);
    }
    std::vector<std::pair<std::string, json>> overrides;
    for (const auto& kv : sets) overrides.push_back(nbeam::parse_override(kv));
    if (seed) overrides.emplace_back("seed", *seed);
    if (threads) overrides.emplace_back("threads", *threads);
    return nbeam::resolve_config(user, overrides);
  }
};

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream os(path, std::ios::trunc);
  if (!os) throw std::runtime_error("cannot write " + path.string());
  os << text;
  if (!os) throw std::runtime_error("write failed: " + path.string());
}

void write_config(const fs::path& path, const nbeam::RunConfig& cfg) { write_text(path, json(cfg).dump(2) + "\n"); }

void ensure_dir(const fs::path& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec || !fs::is_directory(dir)) throw std::runtime_error("cannot create directory " + dir.string());
}

std::string sibling(const std::string& file, const std::string& name) {
  return (fs::path(file).parent_path() / name).string();
}

// ---------------------------------------------------------------- synth

struct SynthArgs {
  ConfigArgs config;
  std::size_t count = 0;
  std::string out;
  bool test_set = false;
};

int run_synth(const SynthArgs& a) {
  auto cfg = a.config.resolve();
  if (a.test_set) {
    const auto t = nbeam::DatasetConfig::test_set();
    cfg.dataset.rooms = t.rooms;
    cfg.dataset.interference_distance = t.interference_distance;
  }
  ensure_dir(a.out);
  const auto entries = nbeam::generate_dataset(cfg.dataset, cfg.array.geometry(), cfg.stft_config(), a.count, cfg.seed,
                                               a.out, cfg.threads, cfg.sample_rate);
  write_config(fs::path(a.out) / "config.json", cfg);
  std::cout << "wrote " << entries.size() << " mixtures to " << (fs::path(a.out) / "manifest.jsonl").string() << '\n';
  return 0;
}

// ---------------------------------------------------------------- train

struct TrainArgs {
  ConfigArgs config;
  std::string manifest;
  std::string out;
  std::optional<std::size_t> steps;
  std::string resume;
  std::optional<std::size_t> nan_at_step;
};

int run_train(const TrainArgs& a) {
  auto cfg = a.config.resolve(sibling(a.manifest, "config.json"));
  if (a.steps) cfg.train.steps = *a.steps;
  ensure_dir(a.out);
  const auto stft_cfg = cfg.stft_config();
  const int zones = cfg.localization.zones;
  auto data = nbeam::load_training_examples(a.manifest, zones, stft_cfg, cfg.train.reference_mic);
  if (data.empty()) throw std::invalid_argument("manifest has no records: " + a.manifest);
  for (const auto& ex : data) {
    const std::size_t m = ex.spectrum.re.dim(1);
    if (m != cfg.model.dccrn.mics) {
      throw std::invalid_argument("manifest audio has " + std::to_string(m) + " channels, model expects " +
                                  std::to_string(cfg.model.dccrn.mics));
    }
  }

  auto opts = cfg.train_options();
  opts.nan_at_step = a.nan_at_step;
  nbeam::NeuralBeamformer net(cfg.model, cfg.seed);
  std::optional<nbeam::SteeringSet> steering;
  if (opts.localization == nbeam::LocalizationTarget::kSplm) steering = cfg.steering(zones);
  nbeam::Trainer trainer(net, opts, stft_cfg, steering);

  const fs::path ckpt_path = fs::path(a.out) / "model.ckpt";
  const fs::path log_path = fs::path(a.out) / "train_log.jsonl";
  auto mode = std::ios::trunc;
  if (!a.resume.empty()) {
    const auto ckpt = nbeam::cnn::load_checkpoint(a.resume);
    if (!ckpt.meta.contains("network") || ckpt.meta.at("network") != json(cfg.model)) {
      throw std::invalid_argument("checkpoint " + a.resume + " was trained with a different model config");
    }
    trainer.restore(ckpt);
    mode = std::ios::app;
    std::cout << "resumed at step " << trainer.steps_done() << '\n';
  }
  write_config(fs::path(a.out) / "config.json", cfg);
  std::ofstream log(log_path, mode);
  if (!log) throw std::runtime_error("cannot write " + log_path.string());

  try {
    const auto history = trainer.run(data, &log, ckpt_path.string());
    if (!history.empty()) {
      const auto& last = history.back().loss;
      std::printf("step %zu: total %.4f, bce %.4f, si-snr %.2f dB\n", history.back().step, last.total, last.loss_bce,
                  last.si_snr_db);
    }
  } catch (const nbeam::TrainingDiverged& e) {
    std::cerr << "error: training diverged: " << e.what() << "; checkpoint at step " << e.step() - 1 << " kept in "
              << ckpt_path.string() << '\n';
    return kExitInternal;
  }
  std::cout << "checkpoint: " << ckpt_path.string() << '\n';
  return 0;
}

// ---------------------------------------------------------------- enhance / eval

struct ModelArgs {
  ConfigArgs config;
  std::string checkpoint;
  std::string mode;
  std::optional<int> zones;
};

// Settings shared by enhance and eval once the config and checkpoint are known.
struct Inference {
  nbeam::RunConfig cfg;
  std::optional<nbeam::cnn::Checkpoint> ckpt;
  nbeam::LocalizationMode mode = nbeam::LocalizationMode::kSplm;
  int zones = 12;
  nbeam::EnhanceOptions enhance;
};

Inference prepare(const ModelArgs& a, std::size_t selector_mics = 0) {
  Inference inf;
  inf.cfg = a.config.resolve(a.checkpoint.empty() ? std::string{} : sibling(a.checkpoint, "config.json"));
  if (!a.checkpoint.empty()) {
    inf.ckpt = nbeam::cnn::load_checkpoint(a.checkpoint);
    if (!inf.ckpt->meta.contains("network")) throw std::invalid_argument("checkpoint has no network config: " + a.checkpoint);
    inf.cfg.model = inf.ckpt->meta.at("network").get<nbeam::NetworkConfig>();
    if (inf.cfg.array.mics != inf.cfg.model.dccrn.mics) {
      throw std::invalid_argument("config array has " + std::to_string(inf.cfg.array.mics) +
                                  " microphones, checkpoint expects " + std::to_string(inf.cfg.model.dccrn.mics));
    }
  } else if (selector_mics != 0) {
    inf.cfg.array.mics = selector_mics;
  }
  inf.mode = nbeam::parse_localization_mode(a.mode.empty() ? inf.cfg.localization.mode : a.mode);
  inf.zones = a.zones.value_or(inf.cfg.localization.zones);
  if (inf.zones < 2) throw std::invalid_argument("--zones must be at least 2");
  if (inf.mode == nbeam::LocalizationMode::kNlm) {
    if (!inf.cfg.model.nlm || a.checkpoint.empty()) {
      throw std::invalid_argument("nlm mode needs a checkpoint with a localization head");
    }
    if (a.zones && static_cast<std::size_t>(*a.zones) != inf.cfg.model.nlm->zones) {
      throw std::invalid_argument("--zones " + std::to_string(*a.zones) + " differs from the checkpoint's " +
                                  std::to_string(inf.cfg.model.nlm->zones) + " localization zones");
    }
    inf.zones = static_cast<int>(inf.cfg.model.nlm->zones);
  }
  inf.enhance.mode = inf.mode;
  inf.enhance.vad_threshold = inf.cfg.localization.vad_threshold;
  inf.enhance.splm_max_hz = inf.cfg.localization.splm_max_hz;
  return inf;
}

struct EnhanceArgs {
  ModelArgs model;
  std::string in;
  std::string out;
  std::string csv;
};

int run_enhance(const EnhanceArgs& a) {
  const nbeam::Waveform noisy = nbeam::wav::read(a.in);
  auto inf = prepare(a.model);
  if (noisy.channels() != inf.cfg.model.dccrn.mics) {
    throw std::invalid_argument("input " + a.in + " has " + std::to_string(noisy.channels()) +
                                " channels, checkpoint expects " + std::to_string(inf.cfg.model.dccrn.mics));
  }
  if (noisy.sample_rate() != inf.cfg.sample_rate) {
    throw std::invalid_argument("input sample rate " + std::to_string(noisy.sample_rate()) + " Hz, config expects " +
                                std::to_string(inf.cfg.sample_rate) + " Hz");
  }
  nbeam::NeuralBeamformer net(inf.cfg.model, 0);
  net.load_from(*inf.ckpt);
  const auto stft_cfg = inf.cfg.stft_config();
  const auto steering = inf.cfg.steering(inf.zones);
  const auto res = nbeam::enhance_utterance(noisy, net, &steering, stft_cfg, inf.enhance);

  if (fs::path(a.out).has_parent_path()) ensure_dir(fs::path(a.out).parent_path());
  nbeam::wav::write(a.out, res.enhanced);
  const std::string csv = a.csv.empty() ? fs::path(a.out).replace_extension(".csv").string() : a.csv;
  std::ofstream os(csv, std::ios::trunc);
  if (!os) throw std::runtime_error("cannot write " + csv);
  nbeam::write_localization_csv(os, res.localization, stft_cfg.hop(), noisy.sample_rate());
  if (!os) throw std::runtime_error("write failed: " + csv);
  std::size_t active = 0;
  for (bool v : res.localization.vad_active) active += v;
  std::cout << "wrote " << a.out << " and " << csv << " (" << res.localization.zone_track.size() << " frames, "
            << active << " voice-active)\n";
  return 0;
}

struct EvalArgs {
  ModelArgs model;
  bool selector = false;
  std::string manifest;
  std::string out;
};

int run_eval(const EvalArgs& a) {
  if (a.selector == !a.model.checkpoint.empty()) throw std::invalid_argument("give exactly one of --checkpoint or --selector");
  const auto entries = nbeam::read_manifest(a.manifest);
  std::size_t mics = 0;
  if (!entries.empty()) mics = nbeam::wav::read(nbeam::resolve_path(a.manifest, entries.front().noisy_path)).channels();
  auto inf = prepare(a.model, a.selector ? mics : 0);
  const auto stft_cfg = inf.cfg.stft_config();
  const auto steering = inf.cfg.steering(inf.zones);
  nbeam::EvalOptions opts;
  opts.enhance = inf.enhance;
  opts.zones = inf.zones;
  opts.reference_mic = inf.cfg.train.reference_mic;
  opts.threads = inf.cfg.threads;

  std::vector<nbeam::UtteranceScore> scores;
  if (a.selector) {
    nbeam::SelectorModel model(inf.cfg.array.mics, opts.reference_mic);
    scores = nbeam::evaluate_manifest(a.manifest, model, &steering, stft_cfg, opts);
  } else {
    if (mics != 0 && mics != inf.cfg.model.dccrn.mics) {
      throw std::invalid_argument("manifest audio has " + std::to_string(mics) + " channels, checkpoint expects " +
                                  std::to_string(inf.cfg.model.dccrn.mics));
    }
    nbeam::NeuralBeamformer net(inf.cfg.model, 0);
    net.load_from(*inf.ckpt);
    scores = nbeam::evaluate_manifest(a.manifest, net, &steering, stft_cfg, opts);
  }
  const auto buckets = nbeam::summarize(scores);
  if (fs::path(a.out).has_parent_path()) ensure_dir(fs::path(a.out).parent_path());
  std::ofstream os(a.out, std::ios::trunc);
  if (!os) throw std::runtime_error("cannot write " + a.out);
  nbeam::write_report_csv(os, buckets);
  if (!os) throw std::runtime_error("write failed: " + a.out);
  if (!buckets.empty()) {
    const auto& avg = buckets.back();
    std::printf("%zu utterances: si-snr %.2f -> %.2f dB", avg.utterances, avg.si_snr_in, avg.si_snr_out);
    if (avg.loc) std::printf(", acc %.3f aer %.3f oer %.3f", avg.loc->acc, avg.loc->aer, avg.loc->oer);
    std::printf("\n");
  }
  std::cout << "report: " << a.out << '\n';
  return 0;
}

// ---------------------------------------------------------------- selfcheck

int run_selfcheck(const std::string& fault_op) {
  if (!fault_op.empty()) nbeam::cnn::detail::gradient_fault_op() = fault_op;
  const auto t0 = std::chrono::steady_clock::now();
  std::size_t failed = 0;
  nbeam::selfcheck::run_all([&](const nbeam::selfcheck::Check& c) {
    std::printf("%s  %-40s %.3e (tol %.1e)%s%s\n", c.passed ? "PASS" : "FAIL", c.name.c_str(), c.value, c.tolerance,
                c.detail.empty() ? "" : "  ", c.detail.c_str());
    std::fflush(stdout);
    failed += !c.passed;
  });
  const double s = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  if (failed) {
    std::printf("selfcheck FAILED: %zu check(s)", failed);
    if (!fault_op.empty()) std::printf(" with gradient fault injected into op '%s'", fault_op.c_str());
    std::printf(" (%.1f s)\n", s);
    return kExitInternal;
  }
  std::printf("selfcheck passed (%.1f s)\n", s);
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"nbeam: multichannel neural beamformer with localization and VAD"};
  app.require_subcommand(1);
  app.set_version_flag("--version", nbeam::version_string());

  SynthArgs synth;
  auto* c_synth = app.add_subcommand("synth", "synthesize reverberant array mixtures");
  synth.config.add_to(c_synth);
  c_synth->add_option("--count", synth.count, "number of mixtures")->required();
  c_synth->add_option("--out", synth.out, "output directory")->required();
  c_synth->add_flag("--test-set", synth.test_set, "use the fixed evaluation room geometry");

  TrainArgs train;
  auto* c_train = app.add_subcommand("train", "train the beamformer on a manifest");
  train.config.add_to(c_train);
  c_train->add_option("--manifest", train.manifest, "manifest.jsonl from synth")->required()->check(CLI::ExistingFile);
  c_train->add_option("--out", train.out, "output directory")->required();
  c_train->add_option("--steps", train.steps, "total Adam steps");
  c_train->add_option("--resume", train.resume, "checkpoint to resume from")->check(CLI::ExistingFile);
  c_train->add_option("--nan-at-step", train.nan_at_step)->group("");

  EnhanceArgs enh;
  auto* c_enh = app.add_subcommand("enhance", "enhance one recording and localize the target");
  enh.model.config.add_to(c_enh, false);
  c_enh->add_option("--checkpoint", enh.model.checkpoint, "trained model")->required()->check(CLI::ExistingFile);
  c_enh->add_option("--in", enh.in, "multichannel input WAV")->required()->check(CLI::ExistingFile);
  c_enh->add_option("--out", enh.out, "enhanced mono WAV")->required();
  c_enh->add_option("--csv", enh.csv, "localization CSV (default: --out with .csv)");
  c_enh->add_option("--mode", enh.model.mode, "localization module")->check(CLI::IsMember({"splm", "nlm"}));
  c_enh->add_option("--zones", enh.model.zones, "number of azimuth zones");

  EvalArgs ev;
  auto* c_eval = app.add_subcommand("eval", "score a model on a manifest");
  ev.model.config.add_to(c_eval, false);
  c_eval->add_option("--checkpoint", ev.model.checkpoint, "trained model")->check(CLI::ExistingFile);
  c_eval->add_flag("--selector", ev.selector, "score the reference microphone instead of a model");
  c_eval->add_option("--manifest", ev.manifest, "manifest.jsonl")->required()->check(CLI::ExistingFile);
  c_eval->add_option("--out", ev.out, "report CSV")->required();
  c_eval->add_option("--mode", ev.model.mode, "localization module")->check(CLI::IsMember({"splm", "nlm"}));
  c_eval->add_option("--zones", ev.model.zones, "number of azimuth zones");

  std::string fault_op;
  auto* c_self = app.add_subcommand("selfcheck", "gradient checks, DSP oracles and metric identities");
  c_self->add_option("--inject-gradient-fault", fault_op)->group("");

  ConfigArgs show;
  auto* c_conf = app.add_subcommand("config", "print the resolved configuration");
  show.add_to(c_conf);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : kExitUser;
  }

  try {
    if (*c_synth) return run_synth(synth);
    if (*c_train) return run_train(train);
    if (*c_enh) return run_enhance(enh);
    if (*c_eval) return run_eval(ev);
    if (*c_self) return run_selfcheck(fault_op);
    if (*c_conf) {
      std::cout << json(show.resolve()).dump(2) << '\n';
      return 0;
    }
  } catch (const nbeam::ConfigError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kExitUser;
  } catch (const std::invalid_argument& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kExitUser;
  } catch (const std::runtime_error& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kExitUser;
  } catch (const std::exception& e) {
    std::cerr << "internal error: " << e.what() << '\n';
    return kExitInternal;
  }
  return kExitInternal;
}
