#pragma once

#include <algorithm>
#include <array>
#include <atomic>
#include <cmath>
#include <cstdio>
#include <exception>
#include <mutex>
#include <optional>
#include <ostream>
#include <string>
#include <thread>
#include <vector>

#include "nbeam/array.hpp"
#include "nbeam/beamloc.hpp"
#include "nbeam/dataset.hpp"
#include "nbeam/losses.hpp"
#include "nbeam/metrics.hpp"
#include "nbeam/wav.hpp"

namespace nbeam {

inline constexpr std::array<double, 4> kSirBuckets{-10.0, -5.0, 0.0, 10.0};

/// Index of the nearest reporting bucket; ties go to the lower bucket.
inline std::size_t sir_bucket(double sir_db) {
  std::size_t best = 0;
  for (std::size_t i = 1; i < kSirBuckets.size(); ++i) {
    if (std::abs(sir_db - kSirBuckets[i]) < std::abs(sir_db - kSirBuckets[best])) best = i;
  }
  return best;
}

struct UtteranceScore {
  std::string id;
  std::optional<double> sir_db;
  double si_snr_in = 0.0;
  double si_snr_out = 0.0;
  std::size_t n_true = 0, n_adjacent = 0, n_false = 0;
};

struct EvalOptions {
  EnhanceOptions enhance;
  int zones = 12;
  std::size_t reference_mic = 0;
  unsigned threads = 1;
};

/// Scores one utterance: SI-SNR of the noisy reference mic and of the
/// enhanced output against the direct+early target, and zone counts over
/// frames where the target is active.
template <typename Model>
UtteranceScore score_utterance(const ManifestEntry& e, const Waveform& noisy, const Waveform& target, Model& model,
                               const SteeringSet* steering, const StftConfig& cfg, const EvalOptions& opts) {
  UtteranceScore s;
  s.id = e.id;
  s.sir_db = e.sir_db;
  const auto ref = target.channel(opts.reference_mic);
  s.si_snr_in = si_snr(noisy.channel(opts.reference_mic), ref);
  const auto res = enhance_utterance(noisy, model, steering, cfg, opts.enhance);
  s.si_snr_out = si_snr(res.enhanced.channel(0), ref);
  const auto track = entry_azimuth_track(e, cfg);
  for (std::size_t t = 0; t < track.size() && t < res.localization.zone_track.size(); ++t) {
    if (!track[t]) continue;
    const int truth = zone_of_angle(*track[t], opts.zones);
    const int d = ((res.localization.zone_track[t] - truth) % opts.zones + opts.zones) % opts.zones;
    if (d == 0) {
      ++s.n_true;
    } else if (d == 1 || d == opts.zones - 1) {
      ++s.n_adjacent;
    } else {
      ++s.n_false;
    }
  }
  return s;
}

/// Scores every manifest entry, in parallel across utterances. Results keep manifest order.
template <typename Model>
std::vector<UtteranceScore> evaluate_manifest(const std::string& manifest_path, Model& model,
                                              const SteeringSet* steering, const StftConfig& cfg,
                                              const EvalOptions& opts) {
  const auto entries = read_manifest(manifest_path);
  std::vector<UtteranceScore> out(entries.size());
  std::atomic<std::size_t> next{0};
  std::exception_ptr failure;
  std::mutex mu;
  auto worker = [&] {
    for (std::size_t i = next++; i < entries.size(); i = next++) {
      try {
        const Waveform noisy = wav::read(resolve_path(manifest_path, entries[i].noisy_path));
        const Waveform target = wav::read(resolve_path(manifest_path, entries[i].target_path));
        out[i] = score_utterance(entries[i], noisy, target, model, steering, cfg, opts);
      } catch (...) {
        std::lock_guard lock(mu);
        if (!failure) failure = std::current_exception();
        next = entries.size();
      }
    }
  };
  const unsigned n = std::max(1u, std::min<unsigned>(opts.threads, static_cast<unsigned>(std::max<std::size_t>(entries.size(), 1))));
  std::vector<std::thread> pool;
  for (unsigned t = 1; t < n; ++t) pool.emplace_back(worker);
  worker();
  for (auto& t : pool) t.join();
  if (failure) std::rethrow_exception(failure);
  return out;
}

struct BucketSummary {
  std::string label;  // "-10", "-5", "0", "10" or "avg"
  std::size_t utterances = 0;
  double si_snr_in = 0.0, si_snr_out = 0.0, si_snr_improvement = 0.0;
  std::optional<LocMetrics> loc;
};

/// Per-SIR-bucket means plus an overall column. Empty buckets are dropped.
inline std::vector<BucketSummary> summarize(const std::vector<UtteranceScore>& scores) {
  auto reduce = [](const std::string& label, const std::vector<const UtteranceScore*>& items) {
    BucketSummary b;
    b.label = label;
    b.utterances = items.size();
    std::size_t t = 0, a = 0, f = 0;
    for (const auto* s : items) {
      b.si_snr_in += s->si_snr_in;
      b.si_snr_out += s->si_snr_out;
      t += s->n_true;
      a += s->n_adjacent;
      f += s->n_false;
    }
    const double n = static_cast<double>(items.size());
    b.si_snr_in /= n;
    b.si_snr_out /= n;
    b.si_snr_improvement = b.si_snr_out - b.si_snr_in;
    if (t + a + f > 0) b.loc = metrics_from_counts(t, a, f);
    return b;
  };
  std::vector<BucketSummary> out;
  for (std::size_t k = 0; k < kSirBuckets.size(); ++k) {
    std::vector<const UtteranceScore*> items;
    for (const auto& s : scores) {
      if (s.sir_db && sir_bucket(*s.sir_db) == k) items.push_back(&s);
    }
    if (!items.empty()) {
      char buf[16];
      std::snprintf(buf, sizeof buf, "%g", kSirBuckets[k]);
      out.push_back(reduce(buf, items));
    }
  }
  if (!scores.empty()) {
    std::vector<const UtteranceScore*> all;
    for (const auto& s : scores) all.push_back(&s);
    out.push_back(reduce("avg", all));
  }
  return out;
}

/// Table layout: one row per metric, one column per non-empty SIR bucket, then "avg".
inline void write_report_csv(std::ostream& os, const std::vector<BucketSummary>& buckets) {
  os << "metric";
  for (const auto& b : buckets) os << ',' << b.label;
  os << '\n';
  auto row = [&](const char* name, auto get) {
    os << name;
    char buf[32];
    for (const auto& b : buckets) {
      const std::optional<double> v = get(b);
      if (v) {
        std::snprintf(buf, sizeof buf, "%.4f", *v);
        os << ',' << buf;
      } else {
        os << ',';
      }
    }
    os << '\n';
  };
  row("utterances", [](const BucketSummary& b) { return std::optional<double>(static_cast<double>(b.utterances)); });
  row("si_snr_in_db", [](const BucketSummary& b) { return std::optional<double>(b.si_snr_in); });
  row("si_snr_out_db", [](const BucketSummary& b) { return std::optional<double>(b.si_snr_out); });
  row("si_snr_improvement_db", [](const BucketSummary& b) { return std::optional<double>(b.si_snr_improvement); });
  row("acc", [](const BucketSummary& b) { return b.loc ? std::optional<double>(b.loc->acc) : std::nullopt; });
  row("aer", [](const BucketSummary& b) { return b.loc ? std::optional<double>(b.loc->aer) : std::nullopt; });
  row("oer", [](const BucketSummary& b) { return b.loc ? std::optional<double>(b.loc->oer) : std::nullopt; });
  os << "# SI-SNR: 10*log10 power convention, clamped to +-" << kSiSnrClampDb
     << " dB; reference is the direct+early target at the reference microphone\n";
}

}  // namespace nbeam
