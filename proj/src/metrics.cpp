#include "mlesfm/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numbers>
#include <ostream>
#include <stdexcept>

namespace mlesfm {

void LossConfig::check() const {
  if (alpha1 < 0.0 || alpha2 < 0.0 || alpha3 < 0.0) throw std::invalid_argument("LossConfig: negative weight");
  if (!(sigma_imp > 0.0)) throw std::invalid_argument("LossConfig: sigma_imp must be positive");
}

namespace {

template <typename F>
void for_joint(const DepthMap& a, const DepthMap& b, F&& f) {
  for (int r = 0; r < a.rows(); ++r) {
    for (int c = 0; c < a.cols(); ++c) {
      if (a.is_valid(r, c) && b.is_valid(r, c)) f(a.values(r, c), b.values(r, c));
    }
  }
}

void check_pair(const DepthMap& est, const DepthMap& gt, const char* what) {
  require_same_shape(est.values, gt.values, what);
  require_same_shape(est.values, est.valid, what);
  require_same_shape(gt.values, gt.valid, what);
}

void check_positive(const DepthMap& est, const DepthMap& gt, const char* what) {
  long n = 0;
  for_joint(est, gt, [&](double e, double g) {
    if (!(e > 0.0) || !(g > 0.0) || !std::isfinite(e) || !std::isfinite(g)) {
      throw std::invalid_argument(std::string(what) + ": non-positive depth on a valid pixel");
    }
    ++n;
  });
  if (n == 0) throw std::invalid_argument(std::string(what) + ": no jointly valid pixel");
}

}  // namespace

double scale_factor(const DepthMap& estimate, const DepthMap& gt) {
  check_pair(estimate, gt, "scale_factor");
  std::vector<double> ratios;
  for_joint(estimate, gt, [&](double e, double g) {
    if (e > 0.0 && g > 0.0) ratios.push_back(g / e);
  });
  if (ratios.empty()) throw std::invalid_argument("scale_factor: no jointly valid pixel");
  std::sort(ratios.begin(), ratios.end());
  const std::size_t n = ratios.size();
  return n % 2 == 1 ? ratios[n / 2] : 0.5 * (ratios[n / 2 - 1] + ratios[n / 2]);
}

RegressionLoss loss_reg(const Trajectory& traj, const DepthMap& gt_depth, const PoseSE3& gt_pose) {
  if (traj.empty()) throw std::invalid_argument("loss_reg: empty trajectory");
  RegressionLoss out;
  for (const Iterate& it : traj) {
    check_pair(it.depth, gt_depth, "loss_reg");
    const double alpha = scale_factor(it.depth, gt_depth);
    double sq = 0.0;
    long n = 0;
    for_joint(it.depth, gt_depth, [&](double e, double g) {
      const double d = alpha * e - g;
      sq += d * d;
      ++n;
    });
    const double depth_term = std::sqrt(sq / static_cast<double>(n));
    const double rot_term = (it.pose.rotation() - gt_pose.rotation()).norm();
    const double trans_term = (alpha * it.pose.translation() - gt_pose.translation()).norm();
    const double term = depth_term + rot_term + trans_term;
    out.per_iteration.push_back(term);
    out.total += term;
  }
  return out;
}

double loss_prob(const std::vector<double>& ll, const std::vector<double>& reg, const LossConfig& cfg) {
  if (ll.size() != reg.size()) throw std::invalid_argument("loss_prob: length mismatch");
  if (!(cfg.sigma_imp > 0.0)) throw std::invalid_argument("loss_prob: sigma_imp must be positive");
  double sum = 0.0;
  for (std::size_t n = 0; n < ll.size(); ++n) sum += std::exp(ll[n] - reg[n] / cfg.sigma_imp);
  return -sum;
}

double loss_inc(const std::vector<double>& ll, const std::vector<double>& reg) {
  if (ll.size() != reg.size()) throw std::invalid_argument("loss_inc: length mismatch");
  double sum = 0.0;
  for (std::size_t n = 0; n + 1 < ll.size(); ++n) sum += (ll[n] - ll[n + 1]) * std::log1p(reg[n]);
  return sum;
}

double loss_total(const LossComponents& c, const LossConfig& cfg) {
  return cfg.alpha1 * c.reg + cfg.alpha2 * c.inc + cfg.alpha3 * c.prob;
}

LossComponents trajectory_losses(const Trajectory& traj, const DepthMap& gt_depth, const PoseSE3& gt_pose,
                                 const LossConfig& cfg) {
  cfg.check();
  const RegressionLoss reg = loss_reg(traj, gt_depth, gt_pose);
  std::vector<double> ll;
  for (const Iterate& it : traj) ll.push_back(it.ll);
  return {reg.total, loss_inc(ll, reg.per_iteration), loss_prob(ll, reg.per_iteration, cfg)};
}

DepthMetrics depth_metrics(const DepthMap& estimate, const DepthMap& gt, bool align_scale) {
  check_pair(estimate, gt, "depth_metrics");
  check_positive(estimate, gt, "depth_metrics");
  DepthMetrics m;
  m.scale = align_scale ? scale_factor(estimate, gt) : 1.0;
  double abs_rel = 0, sq_rel = 0, sq = 0, sq_log = 0;
  long d1 = 0, d2 = 0, d3 = 0, n = 0;
  for_joint(estimate, gt, [&](double e, double g) {
    const double d = m.scale * e;
    const double diff = d - g;
    abs_rel += std::abs(diff) / g;
    sq_rel += diff * diff / g;
    sq += diff * diff;
    const double ld = std::log(d) - std::log(g);
    sq_log += ld * ld;
    const double ratio = std::max(d / g, g / d);
    d1 += ratio < 1.25 ? 1 : 0;
    d2 += ratio < 1.25 * 1.25 ? 1 : 0;
    d3 += ratio < 1.25 * 1.25 * 1.25 ? 1 : 0;
    ++n;
  });
  const double N = static_cast<double>(n);
  m.abs_rel = abs_rel / N;
  m.sq_rel = sq_rel / N;
  m.rmse = std::sqrt(sq / N);
  m.rmse_log = std::sqrt(sq_log / N);
  m.delta1 = d1 / N;
  m.delta2 = d2 / N;
  m.delta3 = d3 / N;
  m.pixels = n;
  return m;
}

DemonMetrics demon_depth_metrics(const DepthMap& estimate, const DepthMap& gt) {
  check_pair(estimate, gt, "demon_depth_metrics");
  check_positive(estimate, gt, "demon_depth_metrics");
  double l1_inv = 0, z_sum = 0, z_sq = 0, l1_rel = 0;
  long n = 0;
  for_joint(estimate, gt, [&](double e, double g) {
    l1_inv += std::abs(1.0 / e - 1.0 / g);
    const double z = std::log(e) - std::log(g);
    z_sum += z;
    z_sq += z * z;
    l1_rel += std::abs(e - g) / g;
    ++n;
  });
  const double N = static_cast<double>(n);
  const double mean_z = z_sum / N;
  return {l1_inv / N, std::sqrt(std::max(0.0, z_sq / N - mean_z * mean_z)), l1_rel / N};
}

PoseMetrics pose_metrics(const PoseSE3& estimate, const PoseSE3& gt) {
  PoseMetrics m;
  const Mat3 rel = estimate.rotation().transpose() * gt.rotation();
  m.rot_deg = rotation_angle(rel) * 180.0 / std::numbers::pi;
  const Vec3& a = estimate.translation();
  const Vec3& b = gt.translation();
  if (a.norm() == 0.0 || b.norm() == 0.0) {
    m.tran_defined = false;
    m.tran_deg = 0.0;
    return m;
  }
  // atan2 keeps precision near 0 and 180 degrees.
  m.tran_deg = std::atan2(a.cross(b).norm(), a.dot(b)) * 180.0 / std::numbers::pi;
  return m;
}

std::string format_metric(double value) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.6g", value);
  return buf;
}

void write_metric_table(std::ostream& out, const std::vector<MetricRow>& rows) {
  std::size_t width = 0;
  for (const auto& r : rows) width = std::max(width, r.name.size());
  for (const auto& r : rows) {
    out << r.name << std::string(width - r.name.size() + 2, ' ') << format_metric(r.value) << '\n';
  }
}

void write_metric_csv(std::ostream& out, const std::vector<MetricRow>& rows) {
  for (std::size_t i = 0; i < rows.size(); ++i) out << (i ? "," : "") << rows[i].name;
  out << '\n';
  for (std::size_t i = 0; i < rows.size(); ++i) out << (i ? "," : "") << format_metric(rows[i].value);
  out << '\n';
}

}  // namespace mlesfm
