#pragma once

#include <cstdint>
#include <fstream>
#include <optional>
#include <sstream>
#include <stdexcept>
#include <string>

#include <json.hpp>

#include "nbeam/beamloc.hpp"
#include "nbeam/cnn/adam.hpp"
#include "nbeam/dataset.hpp"
#include "nbeam/dsp.hpp"
#include "nbeam/losses.hpp"
#include "nbeam/model.hpp"
#include "nbeam/train.hpp"

namespace nbeam {

// Bad configuration: unknown keys, wrong types, inconsistent sections.
class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct StftSettings {
  std::size_t window_length = 400;
  std::size_t hop = 100;
  std::size_t fft_size = 512;

  StftConfig build() const { return StftConfig::hann(window_length, hop, fft_size); }
};

inline void to_json(nlohmann::json& j, const StftSettings& s) {
  j = {{"window_length", s.window_length}, {"hop", s.hop}, {"fft_size", s.fft_size}};
}
inline void from_json(const nlohmann::json& j, StftSettings& s) {
  s.window_length = j.at("window_length");
  s.hop = j.at("hop");
  s.fft_size = j.at("fft_size");
}

struct TrainSettings {
  std::size_t steps = 500;
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double gamma = 1.0;
  std::string localization = "nlm";
  std::string sisnr_convention = "standard";
  std::size_t checkpoint_every = 100;
  std::size_t reference_mic = 0;
  bool shuffle = true;
};

inline void to_json(nlohmann::json& j, const TrainSettings& t) {
  j = {{"steps", t.steps},
       {"lr", t.lr},
       {"beta1", t.beta1},
       {"beta2", t.beta2},
       {"eps", t.eps},
       {"gamma", t.gamma},
       {"localization", t.localization},
       {"sisnr_convention", t.sisnr_convention},
       {"checkpoint_every", t.checkpoint_every},
       {"reference_mic", t.reference_mic},
       {"shuffle", t.shuffle}};
}
inline void from_json(const nlohmann::json& j, TrainSettings& t) {
  t.steps = j.at("steps");
  t.lr = j.at("lr");
  t.beta1 = j.at("beta1");
  t.beta2 = j.at("beta2");
  t.eps = j.at("eps");
  t.gamma = j.at("gamma");
  t.localization = j.at("localization");
  t.sisnr_convention = j.at("sisnr_convention");
  t.checkpoint_every = j.at("checkpoint_every");
  t.reference_mic = j.at("reference_mic");
  t.shuffle = j.at("shuffle");
}

struct LocalizationSettings {
  int zones = 12;
  std::string mode = "splm";
  double vad_threshold = 0.5;
  std::optional<double> splm_max_hz;
};

inline void to_json(nlohmann::json& j, const LocalizationSettings& l) {
  j = {{"zones", l.zones},
       {"mode", l.mode},
       {"vad_threshold", l.vad_threshold},
       {"splm_max_hz", l.splm_max_hz ? nlohmann::json(*l.splm_max_hz) : nlohmann::json(nullptr)}};
}
inline void from_json(const nlohmann::json& j, LocalizationSettings& l) {
  l.zones = j.at("zones");
  l.mode = j.at("mode");
  l.vad_threshold = j.at("vad_threshold");
  if (j.at("splm_max_hz").is_null()) {
    l.splm_max_hz.reset();
  } else {
    l.splm_max_hz = j.at("splm_max_hz").get<double>();
  }
}

/// Everything a command needs. All randomness derives from `seed`.
struct RunConfig {
  std::uint64_t seed = 0;
  unsigned threads = 1;
  int sample_rate = 16000;
  ArrayConfig array{4, 0.05, 343.0};
  StftSettings stft;
  DatasetConfig dataset;
  NetworkConfig model;
  TrainSettings train;
  LocalizationSettings localization;

  void validate() const {
    auto fail = [](const std::string& m) { throw ConfigError("config: " + m); };
    if (sample_rate <= 0) fail("sample_rate must be positive");
    if (threads == 0) fail("threads must be at least 1");
    if (array.mics < 2) fail("array.mics must be at least 2");
    if (!(array.radius > 0.0)) fail("array.radius must be positive");
    if (array.mics != model.dccrn.mics) {
      fail("array.mics (" + std::to_string(array.mics) + ") differs from model.dccrn.mics (" +
           std::to_string(model.dccrn.mics) + ")");
    }
    try {
      const auto s = stft.build();
      if (s.num_bins() != model.dccrn.freq_bins_model + 1) {
        fail("stft.fft_size / 2 (" + std::to_string(s.num_bins() - 1) + ") must equal model.dccrn.freq_bins_model (" +
             std::to_string(model.dccrn.freq_bins_model) + ")");
      }
      model.dccrn.validate();
      if (model.nlm) model.nlm->validate();
      dataset.validate();
      parse_localization_target(train.localization);
      parse_sisnr_convention(train.sisnr_convention);
      parse_localization_mode(localization.mode);
    } catch (const std::invalid_argument& e) {
      fail(e.what());
    }
    if (localization.zones < 2) fail("localization.zones must be at least 2");
    if (model.nlm && model.nlm->zones != static_cast<std::size_t>(localization.zones)) {
      fail("model.nlm.zones (" + std::to_string(model.nlm->zones) + ") differs from localization.zones (" +
           std::to_string(localization.zones) + ")");
    }
    if (train.reference_mic >= array.mics) fail("train.reference_mic out of range");
    if (!(train.lr > 0.0)) fail("train.lr must be positive");
    if (train.gamma < 0.0) fail("train.gamma must be non-negative");
    if (!(localization.vad_threshold >= 0.0 && localization.vad_threshold <= 1.0)) {
      fail("localization.vad_threshold must be in [0, 1]");
    }
  }

  StftConfig stft_config() const { return stft.build(); }

  TrainOptions train_options() const {
    TrainOptions o;
    o.steps = train.steps;
    o.adam = {train.lr, train.beta1, train.beta2, train.eps};
    o.gamma = train.gamma;
    o.localization = parse_localization_target(train.localization);
    o.convention = parse_sisnr_convention(train.sisnr_convention);
    o.checkpoint_every = train.checkpoint_every;
    o.reference_mic = train.reference_mic;
    o.shuffle = train.shuffle;
    o.seed = seed;
    return o;
  }

  SteeringSet steering(int zones) const {
    return SteeringSet::for_stft(array.geometry(), ZoneGrid(zones), stft_config(), sample_rate);
  }
};

inline void to_json(nlohmann::json& j, const RunConfig& c) {
  j = {{"seed", c.seed},           {"threads", c.threads}, {"sample_rate", c.sample_rate},
       {"array", c.array},         {"stft", c.stft},       {"dataset", c.dataset},
       {"model", c.model},         {"train", c.train},     {"localization", c.localization}};
}
inline void from_json(const nlohmann::json& j, RunConfig& c) {
  c.seed = j.at("seed");
  c.threads = j.at("threads");
  c.sample_rate = j.at("sample_rate");
  c.array = j.at("array").get<ArrayConfig>();
  c.stft = j.at("stft").get<StftSettings>();
  c.dataset = j.at("dataset").get<DatasetConfig>();
  c.model = j.at("model").get<NetworkConfig>();
  c.train = j.at("train").get<TrainSettings>();
  c.localization = j.at("localization").get<LocalizationSettings>();
}

namespace detail {

inline std::string join_path(const std::string& base, const std::string& key) {
  return base.empty() ? key : base + "." + key;
}

/// Copies `user` onto `base`, rejecting keys that `base` does not have.
/// A null default accepts any value; arrays are replaced wholesale, and
/// object elements are checked against the first default element.
inline void overlay(nlohmann::json& base, const nlohmann::json& user, const std::string& path) {
  if (base.is_null() || user.is_null()) {
    base = user;
    return;
  }
  if (base.is_object()) {
    if (!user.is_object()) throw ConfigError("config: '" + path + "' must be an object");
    for (const auto& [key, value] : user.items()) {
      const auto where = join_path(path, key);
      if (!base.contains(key)) throw ConfigError("config: unknown key '" + where + "'");
      overlay(base[key], value, where);
    }
    return;
  }
  if (base.is_array() && user.is_array() && !base.empty() && base.front().is_object()) {
    nlohmann::json out = nlohmann::json::array();
    for (std::size_t i = 0; i < user.size(); ++i) {
      nlohmann::json elem = base.front();
      overlay(elem, user[i], path + "[" + std::to_string(i) + "]");
      out.push_back(std::move(elem));
    }
    base = std::move(out);
    return;
  }
  base = user;
}

}  // namespace detail

/// Builds a validated RunConfig from the defaults, an optional user JSON
/// document, and dotted-key overrides applied last.
inline RunConfig resolve_config(const nlohmann::json& user,
                                const std::vector<std::pair<std::string, nlohmann::json>>& overrides = {}) {
  nlohmann::json merged = RunConfig{};
  if (!user.is_null()) detail::overlay(merged, user, "");
  for (const auto& [key, value] : overrides) {
    nlohmann::json patch = value;
    std::string rest = key;
    std::vector<std::string> parts;
    for (std::size_t dot; (dot = rest.find('.')) != std::string::npos; rest = rest.substr(dot + 1)) {
      parts.push_back(rest.substr(0, dot));
    }
    parts.push_back(rest);
    for (auto it = parts.rbegin(); it != parts.rend(); ++it) patch = nlohmann::json{{*it, patch}};
    detail::overlay(merged, patch, "");
  }
  RunConfig cfg;
  try {
    cfg = merged.get<RunConfig>();
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("config: ") + e.what());
  }
  cfg.validate();
  return cfg;
}

inline nlohmann::json read_json_file(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw ConfigError("cannot open config file: " + path);
  try {
    return nlohmann::json::parse(is);
  } catch (const nlohmann::json::parse_error& e) {
    throw ConfigError("config file " + path + ": " + e.what());
  }
}

/// Parses a `key=value` override; the value is JSON when it parses, else a string.
inline std::pair<std::string, nlohmann::json> parse_override(const std::string& kv) {
  const auto eq = kv.find('=');
  if (eq == std::string::npos || eq == 0) throw ConfigError("override must look like key=value: " + kv);
  const std::string value = kv.substr(eq + 1);
  nlohmann::json v = nlohmann::json::parse(value, nullptr, false);
  if (v.is_discarded()) v = value;
  return {kv.substr(0, eq), v};
}

}  // namespace nbeam
