#pragma once

#include <algorithm>
#include <array>
#include <atomic>
#include <cmath>
#include <cstdint>
#include <exception>
#include <filesystem>
#include <fstream>
#include <mutex>
#include <optional>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

#include <json.hpp>

#include "nbeam/array.hpp"
#include "nbeam/dsp.hpp"
#include "nbeam/rng.hpp"
#include "nbeam/roomsim.hpp"
#include "nbeam/surrogate.hpp"
#include "nbeam/wav.hpp"

namespace nbeam {

struct Range {
  double lo = 0.0, hi = 0.0;

  void validate(const std::string& what) const {
    if (!std::isfinite(lo) || !std::isfinite(hi) || hi < lo) {
      throw std::invalid_argument(what + ": invalid range [" + std::to_string(lo) + ", " + std::to_string(hi) + "]");
    }
  }
  double sample(Rng& rng) const { return lo == hi ? lo : rng.uniform(lo, hi); }
};

inline void to_json(nlohmann::json& j, const Range& r) { j = nlohmann::json::array({r.lo, r.hi}); }
inline void from_json(const nlohmann::json& j, Range& r) {
  if (!j.is_array() || j.size() != 2) throw std::invalid_argument("range must be a two-element array");
  r.lo = j[0].get<double>();
  r.hi = j[1].get<double>();
}

// One room size together with its source-distance and T60 ranges.
struct RoomChoice {
  std::array<double, 3> dimensions{5.0, 5.0, 3.0};
  Range target_distance{1.0, 2.0};
  Range t60{0.32, 0.48};
};

inline void to_json(nlohmann::json& j, const RoomChoice& r) {
  j = {{"dimensions", r.dimensions}, {"target_distance", r.target_distance}, {"t60", r.t60}};
}
inline void from_json(const nlohmann::json& j, RoomChoice& r) {
  r.dimensions = j.at("dimensions").get<std::array<double, 3>>();
  r.target_distance = j.at("target_distance").get<Range>();
  r.t60 = j.at("t60").get<Range>();
}

struct DatasetConfig {
  std::vector<RoomChoice> rooms{{{4.0, 4.0, 3.0}, {1.0, 1.5}, {0.16, 0.32}},
                                {{5.0, 5.0, 3.0}, {1.0, 2.0}, {0.32, 0.48}},
                                {{6.0, 6.0, 3.0}, {1.0, 2.5}, {0.48, 0.64}}};
  std::optional<Range> interference_distance;  // nullopt: the room's target range
  Range target_azimuth{0.0, 180.0};
  Range interference_azimuth{180.0, 360.0};
  double azimuth_step = 1.0;
  Range sir_db{-5.0, 15.0};
  Range snr_db{10.0, 30.0};
  bool interference = true;
  double duration_s = 6.0;
  double speech_len_s = 4.0;
  double early_ms = 50.0;
  int max_order = -1;
  std::string interpolation = "nearest";

  // Fixed evaluation geometry: 5x5x3 m, T60 0.32 s, target at 1 m, interference at 2 m.
  static DatasetConfig test_set() {
    DatasetConfig c;
    c.rooms = {{{5.0, 5.0, 3.0}, {1.0, 1.0}, {0.32, 0.32}}};
    c.interference_distance = Range{2.0, 2.0};
    return c;
  }

  void validate() const {
    if (rooms.empty()) throw std::invalid_argument("dataset.rooms is empty");
    for (const auto& r : rooms) {
      RoomSpec{{r.dimensions[0], r.dimensions[1], r.dimensions[2]}, r.t60.lo}.validate();
      r.target_distance.validate("dataset.rooms.target_distance");
      r.t60.validate("dataset.rooms.t60");
      if (r.target_distance.lo <= 0.0) throw std::invalid_argument("dataset.rooms.target_distance must be positive");
    }
    if (interference_distance) interference_distance->validate("dataset.interference_distance");
    target_azimuth.validate("dataset.target_azimuth");
    interference_azimuth.validate("dataset.interference_azimuth");
    sir_db.validate("dataset.sir_db");
    snr_db.validate("dataset.snr_db");
    if (!(azimuth_step > 0.0)) throw std::invalid_argument("dataset.azimuth_step must be positive");
    if (!(speech_len_s > 0.0) || speech_len_s > duration_s) {
      throw std::invalid_argument("dataset: speech_len_s must be in (0, duration_s]");
    }
    if (interpolation != "nearest" && interpolation != "sinc") {
      throw std::invalid_argument("dataset.interpolation must be nearest or sinc");
    }
  }
};

inline void to_json(nlohmann::json& j, const DatasetConfig& c) {
  j = {{"rooms", c.rooms},
       {"interference_distance", c.interference_distance ? nlohmann::json(*c.interference_distance) : nlohmann::json()},
       {"target_azimuth", c.target_azimuth},
       {"interference_azimuth", c.interference_azimuth},
       {"azimuth_step", c.azimuth_step},
       {"sir_db", c.sir_db},
       {"snr_db", c.snr_db},
       {"interference", c.interference},
       {"duration_s", c.duration_s},
       {"speech_len_s", c.speech_len_s},
       {"early_ms", c.early_ms},
       {"max_order", c.max_order},
       {"interpolation", c.interpolation}};
}

inline void from_json(const nlohmann::json& j, DatasetConfig& c) {
  c.rooms = j.at("rooms").get<std::vector<RoomChoice>>();
  const auto& d = j.at("interference_distance");
  c.interference_distance = d.is_null() ? std::nullopt : std::optional<Range>(d.get<Range>());
  c.target_azimuth = j.at("target_azimuth");
  c.interference_azimuth = j.at("interference_azimuth");
  c.azimuth_step = j.at("azimuth_step");
  c.sir_db = j.at("sir_db");
  c.snr_db = j.at("snr_db");
  c.interference = j.at("interference");
  c.duration_s = j.at("duration_s");
  c.speech_len_s = j.at("speech_len_s");
  c.early_ms = j.at("early_ms");
  c.max_order = j.at("max_order");
  c.interpolation = j.at("interpolation");
}

struct ArrayConfig {
  std::size_t mics = 6;
  double radius = 0.05;
  double speed_of_sound = 343.0;

  ArrayGeometry geometry() const { return ArrayGeometry(uca_positions(mics, radius), speed_of_sound); }
};

inline void to_json(nlohmann::json& j, const ArrayConfig& c) {
  j = {{"mics", c.mics}, {"radius", c.radius}, {"speed_of_sound", c.speed_of_sound}};
}
inline void from_json(const nlohmann::json& j, ArrayConfig& c) {
  c.mics = j.at("mics");
  c.radius = j.at("radius");
  c.speed_of_sound = j.at("speed_of_sound");
}

// Everything needed to re-render one mixture, plus where it was written.
struct ManifestEntry {
  std::string id;
  std::uint64_t seed = 0;
  double target_azimuth_deg = 0.0;
  std::optional<double> interference_azimuth_deg;
  std::optional<double> sir_db;
  double snr_db = 0.0;
  double t60_s = 0.0;
  std::array<double, 3> room_dims{};
  double target_distance_m = 0.0;
  std::optional<double> interference_distance_m;
  double speech_offset_s = 0.0;
  SampleRange speech_window{};
  std::size_t num_samples = 0;
  int sample_rate = 16000;
  std::string noisy_path;
  std::string target_path;
};

inline void to_json(nlohmann::json& j, const ManifestEntry& e) {
  auto opt = [](const std::optional<double>& v) { return v ? nlohmann::json(*v) : nlohmann::json(); };
  j = {{"id", e.id},
       {"seed", e.seed},
       {"target_azimuth_deg", e.target_azimuth_deg},
       {"interference_azimuth_deg", opt(e.interference_azimuth_deg)},
       {"sir_db", opt(e.sir_db)},
       {"snr_db", e.snr_db},
       {"t60_s", e.t60_s},
       {"room_dims", e.room_dims},
       {"target_distance_m", e.target_distance_m},
       {"interference_distance_m", opt(e.interference_distance_m)},
       {"speech_offset_s", e.speech_offset_s},
       {"speech_window", {e.speech_window.begin, e.speech_window.end}},
       {"num_samples", e.num_samples},
       {"sample_rate", e.sample_rate},
       {"paths", {{"noisy", e.noisy_path}, {"target", e.target_path}}}};
}

inline void from_json(const nlohmann::json& j, ManifestEntry& e) {
  auto opt = [&](const char* k) {
    return j.at(k).is_null() ? std::nullopt : std::optional<double>(j.at(k).get<double>());
  };
  e.id = j.at("id");
  e.seed = j.at("seed");
  e.target_azimuth_deg = j.at("target_azimuth_deg");
  e.interference_azimuth_deg = opt("interference_azimuth_deg");
  e.sir_db = opt("sir_db");
  e.snr_db = j.at("snr_db");
  e.t60_s = j.at("t60_s");
  e.room_dims = j.at("room_dims").get<std::array<double, 3>>();
  e.target_distance_m = j.at("target_distance_m");
  e.interference_distance_m = opt("interference_distance_m");
  e.speech_offset_s = j.at("speech_offset_s");
  e.speech_window = {j.at("speech_window").at(0).get<std::size_t>(), j.at("speech_window").at(1).get<std::size_t>()};
  e.num_samples = j.at("num_samples");
  e.sample_rate = j.at("sample_rate");
  e.noisy_path = j.at("paths").at("noisy");
  e.target_path = j.at("paths").at("target");
}

namespace detail {

inline double sample_grid(const Range& r, double step, Rng& rng) {
  const auto n = static_cast<std::uint64_t>(std::floor((r.hi - r.lo) / step + 1e-9)) + 1;
  return r.lo + step * static_cast<double>(rng.below(n));
}

inline std::string record_id(std::size_t index) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "mix%06zu", index);
  return buf;
}

}  // namespace detail

/// Draws the parameters of record `index` from its own stream.
inline ManifestEntry sample_entry(const DatasetConfig& cfg, std::uint64_t master_seed, std::size_t index,
                                  int sample_rate = 16000) {
  ManifestEntry e;
  e.id = detail::record_id(index);
  e.seed = Rng::derive(master_seed, index);
  e.sample_rate = sample_rate;
  Rng rng(e.seed);
  const auto& room = cfg.rooms[rng.below(cfg.rooms.size())];
  e.room_dims = room.dimensions;
  e.t60_s = room.t60.sample(rng);
  e.target_distance_m = room.target_distance.sample(rng);
  e.target_azimuth_deg = detail::sample_grid(cfg.target_azimuth, cfg.azimuth_step, rng);
  if (cfg.interference) {
    e.interference_azimuth_deg = detail::sample_grid(cfg.interference_azimuth, cfg.azimuth_step, rng);
    e.interference_distance_m = cfg.interference_distance.value_or(room.target_distance).sample(rng);
    e.sir_db = cfg.sir_db.sample(rng);
  }
  e.snr_db = cfg.snr_db.sample(rng);
  e.speech_offset_s = rng.uniform(0.0, cfg.duration_s - cfg.speech_len_s);
  e.num_samples = static_cast<std::size_t>(std::lround(cfg.duration_s * sample_rate));
  return e;
}

/// Renders a sampled entry. Fills in the speech window of `e`.
inline MixtureRecord render_entry(ManifestEntry& e, const DatasetConfig& cfg, const ArrayGeometry& array,
                                  const StftConfig& stft_cfg) {
  const RoomSpec room{{e.room_dims[0], e.room_dims[1], e.room_dims[2]}, e.t60_s, array.speed_of_sound()};
  SynthesisOptions opts;
  opts.early_ms = cfg.early_ms;
  opts.max_order = cfg.max_order;
  opts.rir.sample_rate = e.sample_rate;
  opts.rir.interpolation = cfg.interpolation == "sinc" ? DelayInterpolation::kSinc : DelayInterpolation::kNearest;
  const auto target = place_source(room, e.target_azimuth_deg, e.target_distance_m, SourceRole::kTarget,
                                   opts.array_height);
  std::optional<SourcePlacement> interferer;
  if (e.interference_azimuth_deg) {
    interferer = place_source(room, *e.interference_azimuth_deg, *e.interference_distance_m,
                              SourceRole::kInterference, opts.array_height);
  }
  MixtureSpec spec;
  spec.duration_s = cfg.duration_s;
  spec.speech_len_s = cfg.speech_len_s;
  spec.speech_offset_s = e.speech_offset_s;
  spec.sir_db = e.sir_db;
  spec.sensor_snr_db = e.snr_db;
  spec.seed = Rng::derive(e.seed, 3);
  const auto n_speech = static_cast<std::size_t>(std::lround(cfg.speech_len_s * e.sample_rate));
  Rng speech_rng(Rng::derive(e.seed, 1)), interf_rng(Rng::derive(e.seed, 2));
  const Waveform speech = surrogate::speech(n_speech, e.sample_rate, speech_rng);
  const Waveform interf = surrogate::interference(e.num_samples, e.sample_rate, interf_rng);
  auto rec = synthesize_mixture(room, array, target, interferer, speech, interf, spec, stft_cfg, opts);
  e.speech_window = rec.speech_window;
  return rec;
}

/// Per-frame target azimuth for a manifest entry.
inline AzimuthTrack entry_azimuth_track(const ManifestEntry& e, const StftConfig& cfg) {
  return speech_azimuth_track(e.num_samples, e.speech_window, e.target_azimuth_deg, cfg);
}

inline void write_manifest(const std::string& path, const std::vector<ManifestEntry>& entries) {
  std::ofstream os(path, std::ios::trunc);
  if (!os) throw std::runtime_error("cannot write manifest: " + path);
  for (const auto& e : entries) os << nlohmann::json(e).dump() << '\n';
  if (!os) throw std::runtime_error("write failed: " + path);
}

inline std::vector<ManifestEntry> read_manifest(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw std::runtime_error("cannot open manifest: " + path);
  std::vector<ManifestEntry> out;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    if (line.empty()) continue;
    try {
      out.push_back(nlohmann::json::parse(line).get<ManifestEntry>());
    } catch (const std::exception& ex) {
      throw std::runtime_error(path + ":" + std::to_string(lineno) + ": bad manifest record: " + ex.what());
    }
  }
  return out;
}

/// Resolves a manifest path field relative to the manifest's directory.
inline std::string resolve_path(const std::string& manifest_path, const std::string& rel) {
  const std::filesystem::path p(rel);
  if (p.is_absolute()) return rel;
  return (std::filesystem::path(manifest_path).parent_path() / p).string();
}

/// Renders `count` mixtures into `out_dir` (noisy and direct+early target as
/// float32 WAVs) and writes `out_dir/manifest.jsonl`. Output does not depend
/// on the thread count.
inline std::vector<ManifestEntry> generate_dataset(const DatasetConfig& cfg, const ArrayGeometry& array,
                                                   const StftConfig& stft_cfg, std::size_t count,
                                                   std::uint64_t master_seed, const std::string& out_dir,
                                                   unsigned threads = 1, int sample_rate = 16000) {
  cfg.validate();
  std::error_code ec;
  std::filesystem::create_directories(out_dir, ec);
  if (ec || !std::filesystem::is_directory(out_dir)) throw std::runtime_error("cannot create output directory: " + out_dir);

  std::vector<ManifestEntry> entries(count);
  std::atomic<std::size_t> next{0};
  std::exception_ptr failure;
  std::mutex failure_mu;
  auto worker = [&] {
    for (std::size_t i = next++; i < count; i = next++) {
      try {
        ManifestEntry e = sample_entry(cfg, master_seed, i, sample_rate);
        const auto rec = render_entry(e, cfg, array, stft_cfg);
        e.noisy_path = e.id + "_noisy.wav";
        e.target_path = e.id + "_target.wav";
        const std::filesystem::path dir(out_dir);
        wav::write((dir / e.noisy_path).string(), rec.noisy);
        wav::write((dir / e.target_path).string(), rec.target);
        entries[i] = std::move(e);
      } catch (...) {
        std::lock_guard lock(failure_mu);
        if (!failure) failure = std::current_exception();
        next = count;
      }
    }
  };
  const unsigned n = std::max(1u, std::min<unsigned>(threads, static_cast<unsigned>(std::max<std::size_t>(count, 1))));
  std::vector<std::thread> pool;
  for (unsigned t = 1; t < n; ++t) pool.emplace_back(worker);
  worker();
  for (auto& t : pool) t.join();
  if (failure) std::rethrow_exception(failure);
  write_manifest((std::filesystem::path(out_dir) / "manifest.jsonl").string(), entries);
  return entries;
}

}  // namespace nbeam
