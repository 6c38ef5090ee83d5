#include "mlesfm/likelihood.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <stdexcept>
#include <string>

namespace mlesfm {

UncertaintyMaps::UncertaintyMaps(int rows, int cols, double rho_, double mu_, double sigma_)
    : rho(rows, cols, rho_), mu(rows, cols, mu_), sigma(rows, cols, sigma_) {}

void UncertaintyMaps::check() const {
  require_same_shape(rho, mu, "UncertaintyMaps");
  require_same_shape(rho, sigma, "UncertaintyMaps");
  for (std::size_t i = 0; i < rho.size(); ++i) {
    const double r = rho.values()[i], m = mu.values()[i], s = sigma.values()[i];
    if (!(r >= kRhoMin && r <= 1.0)) throw std::invalid_argument("UncertaintyMaps: rho out of range");
    if (!(m >= -1.0 && m <= 1.0)) throw std::invalid_argument("UncertaintyMaps: mu out of range");
    if (!(s >= kSigmaMin && s <= kSigmaMax)) throw std::invalid_argument("UncertaintyMaps: sigma out of range");
  }
}

double mixture_pdf(double c, double rho, double mu, double sigma) {
  if (!std::isfinite(c)) throw std::invalid_argument("mixture_pdf: non-finite observation");
  if (!(rho >= 0.0 && rho <= 1.0)) {
    throw std::invalid_argument("mixture_pdf: rho=" + std::to_string(rho) + " outside [0, 1]");
  }
  if (!(mu >= -1.0 && mu <= 1.0)) {
    throw std::invalid_argument("mixture_pdf: mu=" + std::to_string(mu) + " outside [-1, 1]");
  }
  if (!(sigma >= kSigmaMin && sigma <= kSigmaMax)) {
    throw std::invalid_argument("mixture_pdf: sigma=" + std::to_string(sigma) + " outside [1e-3, 2]");
  }
  const double z = (c - mu) / sigma;
  const double gauss = std::exp(-0.5 * z * z) / (sigma * std::sqrt(2.0 * std::numbers::pi));
  // Pooled correlations can exceed 1 by float rounding.
  const double uniform = std::abs(c) <= 1.0 + 1e-6 ? kUniformDensity : 0.0;
  return (1.0 - rho) * gauss + rho * uniform;
}

LikelihoodMap likelihood_map(const CorrelationMap& corr, const UncertaintyMaps& unc) {
  require_same_shape(corr.values, corr.valid, "likelihood_map");
  require_same_shape(corr.values, unc.rho, "likelihood_map");
  require_same_shape(unc.rho, unc.mu, "likelihood_map");
  require_same_shape(unc.rho, unc.sigma, "likelihood_map");
  const int h = corr.values.rows(), w = corr.values.cols();
  LikelihoodMap out{Grid<double>(h, w, kUniformDensity),
                    Grid<double>(h, w, std::log(kUniformDensity)), Mask(h, w, 0)};
  for (int r = 0; r < h; ++r) {
    for (int c = 0; c < w; ++c) {
      if (!corr.valid(r, c)) continue;
      const double p = mixture_pdf(corr.values(r, c), unc.rho(r, c), unc.mu(r, c), unc.sigma(r, c));
      out.density(r, c) = p;
      out.log_density(r, c) = std::log(p);
      out.observed(r, c) = 1;
    }
  }
  return out;
}

double mean_log_likelihood(const LikelihoodMap& map) {
  const auto v = map.log_density.values();
  if (v.empty()) return 0.0;
  double sum = 0.0;
  for (double x : v) sum += x;
  return sum / static_cast<double>(v.size());
}

UncertaintyMaps default_uncertainty(const Image& target, const Image& warped, const Mask& visible,
                                    const UncertaintyHeuristic& params) {
  require_same_shape(target, warped, "default_uncertainty");
  require_same_shape(target, visible, "default_uncertainty");
  const int h = target.rows(), w = target.cols();
  UncertaintyMaps out(h, w, params.rho_max, params.mu0, params.sigma0);
  for (int r = 0; r < h; ++r) {
    for (int c = 0; c < w; ++c) {
      if (!visible(r, c)) continue;
      double sum = 0.0;
      int n = 0;
      for (int dr = -1; dr <= 1; ++dr) {
        for (int dc = -1; dc <= 1; ++dc) {
          const int rr = r + dr, cc = c + dc;
          if (rr < 0 || rr >= h || cc < 0 || cc >= w || !visible(rr, cc)) continue;
          sum += std::abs(target(rr, cc) - warped(rr, cc));
          ++n;
        }
      }
      out.rho(r, c) = std::clamp(params.rho0 + params.kappa * sum / n, kRhoMin, params.rho_max);
    }
  }
  return out;
}

}  // namespace mlesfm
