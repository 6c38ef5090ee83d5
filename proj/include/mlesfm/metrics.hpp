#pragma once

#include <iosfwd>
#include <string>
#include <vector>

#include "mlesfm/geometry.hpp"

namespace mlesfm {

/// One solver iterate: estimated depth, pose and mean log-likelihood.
struct Iterate {
  DepthMap depth;
  PoseSE3 pose;
  double ll = 0.0;
};

using Trajectory = std::vector<Iterate>;

struct LossConfig {
  double alpha1 = 0.05;
  double alpha2 = 1.0;
  double alpha3 = 0.05;
  /// Width of the impulse-like distribution in the probabilistic loss.
  double sigma_imp = 1.0;

  void check() const;
};

/// Median over jointly valid pixels of gt / estimate.
double scale_factor(const DepthMap& estimate, const DepthMap& gt);

struct RegressionLoss {
  double total = 0.0;
  /// L_reg^n for each iterate.
  std::vector<double> per_iteration;
};

/// Sum over iterates of RMS(alpha_n D_n - D_gt) + |R_n - R_gt|_F + |alpha_n t_n - t_gt|.
RegressionLoss loss_reg(const Trajectory& traj, const DepthMap& gt_depth, const PoseSE3& gt_pose);

/// -sum_n exp(l_n - L_reg^n / sigma_imp).
double loss_prob(const std::vector<double>& ll, const std::vector<double>& reg, const LossConfig& cfg);

/// sum_{n=1}^{N-1} (l_n - l_{n+1}) ln(1 + L_reg^n).
double loss_inc(const std::vector<double>& ll, const std::vector<double>& reg);

struct LossComponents {
  double reg = 0.0;
  double inc = 0.0;
  double prob = 0.0;
};

double loss_total(const LossComponents& components, const LossConfig& cfg);

/// Evaluates every loss of a trajectory.
LossComponents trajectory_losses(const Trajectory& traj, const DepthMap& gt_depth, const PoseSE3& gt_pose,
                                 const LossConfig& cfg);

struct DepthMetrics {
  double abs_rel = 0.0;
  double sq_rel = 0.0;
  double rmse = 0.0;
  double rmse_log = 0.0;
  double delta1 = 0.0;
  double delta2 = 0.0;
  double delta3 = 0.0;
  long pixels = 0;
  /// Scale applied to the estimate (1 without alignment).
  double scale = 1.0;
};

/// Standard depth error metrics over jointly valid pixels, optionally after
/// median scale alignment.
DepthMetrics depth_metrics(const DepthMap& estimate, const DepthMap& gt, bool align_scale);

struct DemonMetrics {
  double l1_inv = 0.0;
  double sc_inv = 0.0;
  double l1_rel = 0.0;
};

DemonMetrics demon_depth_metrics(const DepthMap& estimate, const DepthMap& gt);

struct PoseMetrics {
  double rot_deg = 0.0;
  double tran_deg = 0.0;
  /// False when either translation is zero and the direction angle is undefined.
  bool tran_defined = true;
};

PoseMetrics pose_metrics(const PoseSE3& estimate, const PoseSE3& gt);

/// Row of a metric report: name and value.
struct MetricRow {
  std::string name;
  double value = 0.0;
};

/// Aligned two-column text table with values printed to 6 significant digits.
void write_metric_table(std::ostream& out, const std::vector<MetricRow>& rows);
/// Header row of names followed by one row of values.
void write_metric_csv(std::ostream& out, const std::vector<MetricRow>& rows);

std::string format_metric(double value);

}  // namespace mlesfm
