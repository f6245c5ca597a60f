#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <numbers>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "nbeam/array.hpp"
#include "nbeam/cnn/ops.hpp"
#include "nbeam/cnn/tensor.hpp"

namespace nbeam {

// kStandard: 10 log10 of the power ratio. kPrinted: 20 log10 of the same
// ratio, twice the standard value.
enum class SiSnrConvention { kStandard, kPrinted };

inline SiSnrConvention parse_sisnr_convention(const std::string& s) {
  if (s == "standard") return SiSnrConvention::kStandard;
  if (s == "printed") return SiSnrConvention::kPrinted;
  throw std::invalid_argument("unknown SI-SNR convention '" + s + "' (expected standard or printed)");
}

inline constexpr double kSiSnrClampDb = 60.0;
inline constexpr double kBceEpsilon = 1e-7;

namespace detail {

struct SiSnrParts {
  double db;      // clamped
  bool clamped;
  double alpha;   // <est, ref> / |ref|^2
  double inner;   // <est, ref>
  double err_energy;
};

inline SiSnrParts si_snr_parts(std::span<const double> est, std::span<const double> ref, SiSnrConvention conv) {
  if (est.size() != ref.size()) {
    throw std::invalid_argument("si_snr: lengths differ (" + std::to_string(est.size()) + " vs " +
                                std::to_string(ref.size()) + ")");
  }
  double rr = 0.0, inner = 0.0;
  for (std::size_t i = 0; i < ref.size(); ++i) {
    rr += ref[i] * ref[i];
    inner += est[i] * ref[i];
  }
  if (!(rr > 0.0)) throw std::invalid_argument("si_snr: reference is silent");
  const double alpha = inner / rr;
  double ee = 0.0;
  for (std::size_t i = 0; i < ref.size(); ++i) {
    const double e = est[i] - alpha * ref[i];
    ee += e * e;
  }
  const double st = alpha * alpha * rr;
  const double k = conv == SiSnrConvention::kPrinted ? 20.0 : 10.0;
  double db;
  if (st == 0.0) {
    db = -kSiSnrClampDb;
  } else if (ee == 0.0) {
    db = kSiSnrClampDb;
  } else {
    db = k * std::log10(st / ee);
  }
  const bool clamped = !(db > -kSiSnrClampDb && db < kSiSnrClampDb);
  return {std::clamp(db, -kSiSnrClampDb, kSiSnrClampDb), clamped, alpha, inner, ee};
}

}  // namespace detail

/// Scale-invariant SNR in dB, clamped to +-60.
inline double si_snr(std::span<const double> estimate, std::span<const double> reference,
                     SiSnrConvention conv = SiSnrConvention::kStandard) {
  return detail::si_snr_parts(estimate, reference, conv).db;
}

/// Mean over the batch of -si_snr. `est` and `ref` are [B, L]; `ref` is data.
inline cnn::Tensor loss_si_snr(const cnn::Tensor& est, const cnn::Tensor& ref,
                               SiSnrConvention conv = SiSnrConvention::kStandard) {
  if (est.rank() != 2 || est.shape() != ref.shape()) {
    throw std::invalid_argument("loss_si_snr: expects equal [B, L] shapes, got " + cnn::shape_str(est.shape()) +
                                " and " + cnn::shape_str(ref.shape()));
  }
  const std::size_t B = est.dim(0), L = est.dim(1);
  double acc = 0.0;
  for (std::size_t b = 0; b < B; ++b) {
    acc -= si_snr(est.values().subspan(b * L, L), ref.values().subspan(b * L, L), conv);
  }
  return cnn::make_result("loss_si_snr", {}, {acc / static_cast<double>(B)}, {est, ref}, [B, L, conv](cnn::Node& self) {
    cnn::Node* g = cnn::grad_target(self, 0);
    if (!g) return;
    const std::span<const double> ev = self.parents[0]->value, rv = self.parents[1]->value;
    const double k = (conv == SiSnrConvention::kPrinted ? 20.0 : 10.0) / std::numbers::ln10;
    const double up = self.grad[0] / static_cast<double>(B);
    for (std::size_t b = 0; b < B; ++b) {
      const auto e = ev.subspan(b * L, L), r = rv.subspan(b * L, L);
      const auto p = detail::si_snr_parts(e, r, conv);
      if (p.clamped) continue;
      // d/de of k ln(|s_t|^2 / |err|^2) = 2k (r / <e,r> - err / |err|^2); the loss is its negative.
      for (std::size_t i = 0; i < L; ++i) {
        const double err = e[i] - p.alpha * r[i];
        g->grad[b * L + i] -= up * 2.0 * k * (r[i] / p.inner - err / p.err_energy);
      }
    }
  });
}

/// Mean binary cross-entropy with natural log; predictions clamped to [eps, 1 - eps].
inline double bce_loss(const LocalizationMap& truth, const LocalizationMap& pred) {
  if (truth.frames() != pred.frames() || truth.zones() != pred.zones()) {
    throw std::invalid_argument("bce_loss: map shapes differ");
  }
  double acc = 0.0;
  const auto z = truth.data(), p = pred.data();
  for (std::size_t i = 0; i < z.size(); ++i) {
    const double q = std::clamp(p[i], kBceEpsilon, 1.0 - kBceEpsilon);
    acc -= z[i] * std::log(q) + (1.0 - z[i]) * std::log(1.0 - q);
  }
  return z.empty() ? 0.0 : acc / static_cast<double>(z.size());
}

/// Differentiable form over tensors of equal shape; `truth` is data.
inline cnn::Tensor bce_loss(const cnn::Tensor& pred, const cnn::Tensor& truth) {
  if (pred.shape() != truth.shape()) {
    throw std::invalid_argument("bce_loss: shapes differ " + cnn::shape_str(pred.shape()) + " vs " +
                                cnn::shape_str(truth.shape()));
  }
  const auto p = pred.values(), z = truth.values();
  const std::size_t n = p.size();
  double acc = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const double q = std::clamp(p[i], kBceEpsilon, 1.0 - kBceEpsilon);
    acc -= z[i] * std::log(q) + (1.0 - z[i]) * std::log(1.0 - q);
  }
  return cnn::make_result("bce", {}, {n ? acc / static_cast<double>(n) : 0.0}, {pred, truth}, [n](cnn::Node& self) {
    cnn::Node* g = cnn::grad_target(self, 0);
    if (!g) return;
    const auto& p = self.parents[0]->value;
    const auto& z = self.parents[1]->value;
    const double up = self.grad[0] / static_cast<double>(n);
    for (std::size_t i = 0; i < n; ++i) {
      if (p[i] < kBceEpsilon || p[i] > 1.0 - kBceEpsilon) continue;
      g->grad[i] += up * (-z[i] / p[i] + (1.0 - z[i]) / (1.0 - p[i]));
    }
  });
}

struct LossBreakdown {
  double si_snr_db = 0.0;
  double loss_sisnr = 0.0;
  double loss_bce = 0.0;
  double total = 0.0;
  double gamma = 1.0;
};

inline double total_loss(double bce, double sisnr_loss, double gamma = 1.0) { return bce + gamma * sisnr_loss; }

inline cnn::Tensor total_loss(const cnn::Tensor& bce, const cnn::Tensor& sisnr_loss, double gamma = 1.0) {
  return cnn::add(bce, cnn::scale(sisnr_loss, gamma));
}

}  // namespace nbeam
