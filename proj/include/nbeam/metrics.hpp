#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>
#include <vector>

namespace nbeam {

struct LocMetrics {
  double acc = 0.0, aer = 0.0, oer = 0.0;
  std::size_t n_true = 0, n_adjacent = 0, n_false = 0, n_all = 0;
};

inline LocMetrics metrics_from_counts(std::size_t n_true, std::size_t n_adjacent, std::size_t n_false) {
  LocMetrics m{0.0, 0.0, 0.0, n_true, n_adjacent, n_false, n_true + n_adjacent + n_false};
  if (m.n_all == 0) throw std::invalid_argument("loc_metrics: no active frames");
  const double all = static_cast<double>(m.n_all);
  m.acc = static_cast<double>(n_true) / all;
  m.aer = static_cast<double>(n_adjacent) / all;
  // Remainder rather than a third division so the rates sum to exactly 1.
  m.oer = 1.0 - (m.acc + m.aer);
  return m;
}

/// Zones are 1-based. Adjacent means n +- 1 modulo N.
inline LocMetrics loc_metrics(const std::vector<int>& predicted, const std::vector<int>& truth,
                              const std::vector<bool>& active, int zones) {
  if (predicted.size() != truth.size() || truth.size() != active.size()) {
    throw std::invalid_argument("loc_metrics: track lengths differ");
  }
  if (zones < 2) throw std::invalid_argument("loc_metrics: needs at least 2 zones");
  std::size_t t = 0, a = 0, f = 0;
  for (std::size_t i = 0; i < truth.size(); ++i) {
    if (!active[i]) continue;
    if (truth[i] < 1 || truth[i] > zones || predicted[i] < 1 || predicted[i] > zones) {
      throw std::invalid_argument("loc_metrics: zone index out of range at frame " + std::to_string(i));
    }
    const int d = ((predicted[i] - truth[i]) % zones + zones) % zones;
    if (d == 0) {
      ++t;
    } else if (d == 1 || d == zones - 1) {
      ++a;
    } else {
      ++f;
    }
  }
  return metrics_from_counts(t, a, f);
}

}  // namespace nbeam
