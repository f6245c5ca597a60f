#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <vector>

#include "nbeam/cnn/tensor.hpp"

namespace nbeam::cnn {

struct GradCheckResult {
  double max_rel_error = 0.0;
  std::vector<double> per_input;  // norm-wise relative error per checked tensor
};

struct GradCheckOptions {
  double step = 1e-5;
  // Norms below this count as zero, so an exactly-zero gradient compared
  // with rounding noise does not read as a 100% error.
  double floor = 1e-7;
  // 0 checks every element; otherwise an evenly strided subset per tensor.
  std::size_t max_elements = 0;
};

/// Compares backward() against central differences for the elements of
/// `inputs`. Errors are norm-wise per tensor: |g_a - g_n| / max(|g_a|, |g_n|, floor).
/// `loss` must rebuild the graph from the current input values.
inline GradCheckResult gradcheck(const std::function<Tensor()>& loss, std::vector<Tensor> inputs,
                                 const GradCheckOptions& opts) {
  for (auto& t : inputs) t.zero_grad();
  backward(loss());
  GradCheckResult out;
  for (auto& t : inputs) {
    auto v = t.mutable_values();
    std::vector<std::size_t> idx;
    const std::size_t n = v.size();
    if (opts.max_elements == 0 || n <= opts.max_elements) {
      for (std::size_t i = 0; i < n; ++i) idx.push_back(i);
    } else {
      for (std::size_t k = 0; k < opts.max_elements; ++k) idx.push_back(k * n / opts.max_elements);
    }
    double diff = 0.0, na = 0.0, nn = 0.0;
    for (std::size_t i : idx) {
      const double orig = v[i];
      v[i] = orig + opts.step;
      const double up = loss().item();
      v[i] = orig - opts.step;
      const double down = loss().item();
      v[i] = orig;
      const double numeric = (up - down) / (2.0 * opts.step);
      const double analytic = t.grad()[i];
      diff += (analytic - numeric) * (analytic - numeric);
      na += analytic * analytic;
      nn += numeric * numeric;
    }
    const double denom = std::max({std::sqrt(na), std::sqrt(nn), opts.floor});
    const double rel = std::sqrt(diff) / denom;
    out.per_input.push_back(rel);
    out.max_rel_error = std::max(out.max_rel_error, rel);
  }
  return out;
}

inline GradCheckResult gradcheck(const std::function<Tensor()>& loss, std::vector<Tensor> inputs, double step = 1e-5) {
  GradCheckOptions opts;
  opts.step = step;
  return gradcheck(loss, std::move(inputs), opts);
}

}  // namespace nbeam::cnn
