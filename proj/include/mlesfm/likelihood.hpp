#pragma once

#include "mlesfm/features.hpp"
#include "mlesfm/grid.hpp"

namespace mlesfm {

inline constexpr double kRhoMin = 1e-3;
inline constexpr double kSigmaMin = 1e-3;
inline constexpr double kSigmaMax = 2.0;
/// Density of U(-1, 1) on its support.
inline constexpr double kUniformDensity = 0.5;

/// Per-pixel parameters of the Gaussian-Uniform observation mixture.
struct UncertaintyMaps {
  Grid<double> rho;
  Grid<double> mu;
  Grid<double> sigma;

  UncertaintyMaps() = default;
  UncertaintyMaps(int rows, int cols, double rho, double mu, double sigma);

  int rows() const { return rho.rows(); }
  int cols() const { return rho.cols(); }

  /// Throws std::invalid_argument if shapes disagree or a value leaves
  /// rho in [kRhoMin, 1], mu in [-1, 1], sigma in [kSigmaMin, kSigmaMax].
  void check() const;
};

/// (1 - rho) N(c | mu, sigma) + rho U(c | -1, 1). The Gaussian arm is not
/// truncated. Accepts rho in [0, 1] so the pure Gaussian can be evaluated;
/// the kRhoMin floor is a property of UncertaintyMaps.
double mixture_pdf(double c, double rho, double mu, double sigma);

struct LikelihoodMap {
  Grid<double> density;
  Grid<double> log_density;
  /// 1 where the correlation was observed, 0 where the pure-Uniform density was substituted.
  Mask observed;
};

LikelihoodMap likelihood_map(const CorrelationMap& corr, const UncertaintyMaps& unc);

/// Mean of log_density over every pixel of the map.
double mean_log_likelihood(const LikelihoodMap& map);

/// Residual-driven stand-in for a learned uncertainty predictor.
struct UncertaintyHeuristic {
  double rho0 = 0.1;
  double kappa = 2.0;
  double rho_max = 0.9;
  double mu0 = 0.9;
  double sigma0 = 0.3;
};

/// rho = clamp(rho0 + kappa * mean_3x3 |target - warped|, kRhoMin, rho_max) with
/// the window mean taken over visible pixels; rho = rho_max where invisible.
UncertaintyMaps default_uncertainty(const Image& target, const Image& warped, const Mask& visible,
                                    const UncertaintyHeuristic& params = {});

}  // namespace mlesfm
