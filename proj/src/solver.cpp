#include "mlesfm/solver.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <limits>
#include <optional>
#include <ostream>

#include <Eigen/Dense>
#include <Eigen/SparseCholesky>

namespace mlesfm {

void DisturbanceSet::check() const {
  if (!(depth_delta > 0.0 && depth_delta < 0.5)) {
    throw std::invalid_argument("DisturbanceSet: depth_delta must lie in (0, 0.5)");
  }
  if (!(rot_delta > 0.0 && rot_delta < 0.1)) {
    throw std::invalid_argument("DisturbanceSet: rot_delta must lie in (0, 0.1)");
  }
  if (!(trans_delta > 0.0) || !(trans_norm_floor > 0.0)) {
    throw std::invalid_argument("DisturbanceSet: translation disturbance must be positive");
  }
}

DisturbanceSet DisturbanceSet::scaled(double s) const {
  DisturbanceSet out = *this;
  out.depth_delta *= s;
  out.rot_delta *= s;
  out.trans_delta *= s;
  return out;
}

double DisturbanceSet::translation_step(const Vec3& t) const {
  return trans_delta * std::max(t.norm(), trans_norm_floor);
}

UncertaintyMode parse_uncertainty_mode(const std::string& name) {
  if (name == "heuristic") return UncertaintyMode::heuristic;
  if (name == "pinned") return UncertaintyMode::pinned;
  throw std::invalid_argument("unknown uncertainty mode '" + name + "' (expected heuristic or pinned)");
}

std::string to_string(UncertaintyMode mode) {
  return mode == UncertaintyMode::heuristic ? "heuristic" : "pinned";
}

void SolverConfig::check() const {
  if (iterations < 1) throw std::invalid_argument("SolverConfig: iterations must be >= 1");
  disturbances.check();
  if (!level_schedule.empty()) {
    if (static_cast<int>(level_schedule.size()) < iterations) {
      throw std::invalid_argument("SolverConfig: level schedule shorter than the iteration count");
    }
    for (int k : level_schedule) {
      if (k < 0 || k >= kPyramidLevels) throw std::invalid_argument("SolverConfig: level out of range");
    }
  }
  if (max_halvings < 0) throw std::invalid_argument("SolverConfig: max_halvings must be >= 0");
  if (!(init_depth > 0.0)) throw std::invalid_argument("SolverConfig: init_depth must be positive");
  if (!(pose_step_scale > 0.0) || !(depth_step_scale > 0.0)) {
    throw std::invalid_argument("SolverConfig: step scales must be positive");
  }
  if (!(max_rotation_step > 0.0) || !(max_translation_step > 0.0) || !(max_depth_step > 0.0)) {
    throw std::invalid_argument("SolverConfig: step caps must be positive");
  }
  if (damping < 0.0 || tolerance < 0.0) throw std::invalid_argument("SolverConfig: negative damping or tolerance");
  if (match_radius < 0 || fit_iterations < 0) throw std::invalid_argument("SolverConfig: negative match settings");
  if (fit_smoothness < 0.0 || !(fit_edge > 0.0)) throw std::invalid_argument("SolverConfig: bad smoothness prior");
  if (!(min_observed_ratio >= 0.0 && min_observed_ratio <= 1.0)) {
    throw std::invalid_argument("SolverConfig: min_observed_ratio must lie in [0, 1]");
  }
}

int SolverConfig::level_for(int n) const {
  if (!level_schedule.empty()) return level_schedule.at(static_cast<std::size_t>(n - 1));
  const int coarse = static_cast<int>(std::lround(3.0 * iterations / 8.0));
  const int middle = static_cast<int>(std::lround(6.0 * iterations / 8.0));
  if (n <= coarse) return 2;
  if (n <= middle) return 1;
  return 0;
}

SolverState::SolverState(int rows, int cols, double depth)
    : inverse_depth(rows, cols, 1.0 / depth), valid(rows, cols, 1) {}

DepthMap SolverState::depth() const {
  DepthMap out(inverse_depth.rows(), inverse_depth.cols(), 1.0);
  for (int r = 0; r < out.rows(); ++r) {
    for (int c = 0; c < out.cols(); ++c) {
      out.values(r, c) = 1.0 / inverse_depth(r, c);
      out.valid(r, c) = valid(r, c);
    }
  }
  return out;
}

LikelihoodObjective::LikelihoodObjective(const CorrelationPyramid& pyramid,
                                         const UncertaintyMaps& uncertainty,
                                         const Intrinsics& grid_intrinsics, int level)
    : pyramid_(&pyramid), uncertainty_(&uncertainty), K_(grid_intrinsics), level_(level) {
  if (uncertainty.rows() != pyramid.rows() || uncertainty.cols() != pyramid.cols()) {
    throw std::invalid_argument("LikelihoodObjective: uncertainty maps do not match the feature grid");
  }
  if (level < 0 || level >= kPyramidLevels) throw std::invalid_argument("LikelihoodObjective: bad level");
}

double LikelihoodObjective::pixel_log_density(int r, int c, double inverse_depth,
                                              const PoseSE3& pose) const {
  static const double uniform_log = std::log(kUniformDensity);
  const auto proj = project(Vec2(c, r), 1.0 / inverse_depth, pose, K_);
  if (!proj) return uniform_log;
  const LookupResult hit = pyramid_->lookup(r, c, proj->pixel.x(), proj->pixel.y(), level_);
  if (!hit.valid) return uniform_log;
  const auto& u = *uncertainty_;
  return std::log(mixture_pdf(hit.value, u.rho(r, c), u.mu(r, c), u.sigma(r, c)));
}

LikelihoodMap LikelihoodObjective::evaluate(const Grid<double>& inverse_depth, const Mask& valid,
                                            const PoseSE3& pose) const {
  DepthMap depth(inverse_depth.rows(), inverse_depth.cols(), 1.0);
  for (int r = 0; r < depth.rows(); ++r) {
    for (int c = 0; c < depth.cols(); ++c) {
      depth.values(r, c) = 1.0 / inverse_depth(r, c);
      depth.valid(r, c) = valid(r, c);
    }
  }
  return likelihood_map(correlation_map(*pyramid_, depth, pose, K_, level_), *uncertainty_);
}

double LikelihoodObjective::mean(const Grid<double>& inverse_depth, const Mask& valid,
                                 const PoseSE3& pose) const {
  return mean_log_likelihood(evaluate(inverse_depth, valid, pose));
}

namespace {

Grid<double> subtract(const Grid<double>& a, const Grid<double>& b) {
  Grid<double> out(a.rows(), a.cols());
  for (std::size_t i = 0; i < a.size(); ++i) out.values()[i] = a.values()[i] - b.values()[i];
  return out;
}

Grid<double> scale_inverse_depth(const Grid<double>& inv, double factor) {
  Grid<double> out = inv;
  for (double& v : out.values()) v = std::max(v * factor, kMinInverseDepth);
  return out;
}

double param_delta(int m, const PoseVec6& pose, const DisturbanceSet& d) {
  if (m == kDepth) return d.depth_delta;
  if (m <= kRz) return d.rot_delta;
  return d.translation_step(pose.translation());
}

double median_depth(const SolverState& s) {
  std::vector<double> depths;
  depths.reserve(s.inverse_depth.size());
  for (int r = 0; r < s.inverse_depth.rows(); ++r) {
    for (int c = 0; c < s.inverse_depth.cols(); ++c) {
      if (s.valid(r, c)) depths.push_back(1.0 / s.inverse_depth(r, c));
    }
  }
  if (depths.empty()) return 1.0;
  auto mid = depths.begin() + static_cast<std::ptrdiff_t>(depths.size() / 2);
  std::nth_element(depths.begin(), mid, depths.end());
  return *mid;
}

}  // namespace

DifferenceMaps difference_maps(const SolverState& state, const LikelihoodObjective& objective,
                               const DisturbanceSet& d) {
  DifferenceMaps maps;
  const PoseSE3 T = exp_map(state.pose);
  maps.current = objective.evaluate(state.inverse_depth, state.valid, T);
  maps.observed = maps.current.observed;
  const Grid<double>& base = maps.current.log_density;

  maps.delta[kDepth] = d.depth_delta;
  maps.plus[kDepth] = subtract(
      objective.evaluate(scale_inverse_depth(state.inverse_depth, 1.0 + d.depth_delta), state.valid, T)
          .log_density,
      base);
  maps.minus[kDepth] = subtract(
      objective.evaluate(scale_inverse_depth(state.inverse_depth, 1.0 - d.depth_delta), state.valid, T)
          .log_density,
      base);

  for (int m = kRx; m < kParamCount; ++m) {
    const double delta = param_delta(m, state.pose, d);
    maps.delta[m] = delta;
    PoseVec6 up = state.pose, down = state.pose;
    up[m - 1] += delta;
    down[m - 1] -= delta;
    maps.plus[m] = subtract(objective.evaluate(state.inverse_depth, state.valid, exp_map(up)).log_density, base);
    maps.minus[m] =
        subtract(objective.evaluate(state.inverse_depth, state.valid, exp_map(down)).log_density, base);
  }
  return maps;
}

Eigen::Matrix<double, 6, 1> pose_gradient(const DifferenceMaps& maps) {
  Eigen::Matrix<double, 6, 1> g = Eigen::Matrix<double, 6, 1>::Zero();
  long n = 0;
  for (int r = 0; r < maps.observed.rows(); ++r) {
    for (int c = 0; c < maps.observed.cols(); ++c) {
      if (!maps.observed(r, c)) continue;
      ++n;
      for (int m = kRx; m < kParamCount; ++m) {
        if (maps.delta[m] == 0.0) continue;
        g[m - 1] += (maps.plus[m](r, c) - maps.minus[m](r, c)) / (2.0 * maps.delta[m]);
      }
    }
  }
  return n > 0 ? Eigen::Matrix<double, 6, 1>(g / static_cast<double>(n)) : g;
}

namespace {

using Vec6 = Eigen::Matrix<double, 6, 1>;
using Mat6 = Eigen::Matrix<double, 6, 6>;

}  // namespace

namespace {

struct DepthSearch {
  Grid<double> inverse_depth;
  double mean = 0.0;
};

// Per-pixel depth search at a fixed pose over a symmetric halving pattern of
// fractional inverse-depth changes. A pixel keeps its best candidate; pixels
// that are observed never trade visibility for the Uniform density.
DepthSearch search_depth(const Grid<double>& inverse_depth, const Mask& valid, const PoseSE3& T,
                         const LikelihoodObjective& objective, const SolverConfig& cfg) {
  DepthSearch out{inverse_depth};
  const auto& pyr = objective.pyramid();
  double sum = 0.0;
  auto observed = [&](int r, int c, double inv) {
    const auto proj = project(Vec2(c, r), 1.0 / inv, T, objective.intrinsics());
    return proj && inside_image(proj->pixel.x(), proj->pixel.y(), pyr.cols(), pyr.rows());
  };
  for (int r = 0; r < inverse_depth.rows(); ++r) {
    for (int c = 0; c < inverse_depth.cols(); ++c) {
      const double inv = inverse_depth(r, c);
      double best = objective.pixel_log_density(r, c, inv, T);
      if (valid(r, c)) {
        const bool seen = observed(r, c, inv);
        double best_inv = inv;
        double step = cfg.max_depth_step * cfg.depth_step_scale;
        for (int h = 0; h <= cfg.max_halvings; ++h, step *= 0.5) {
          for (double u : {step, -step}) {
            const double cand = std::max(inv * (1.0 + u), kMinInverseDepth);
            if (seen && !observed(r, c, cand)) continue;
            const double ll = objective.pixel_log_density(r, c, cand, T);
            if (ll > best) {
              best = ll;
              best_inv = cand;
            }
          }
        }
        out.inverse_depth(r, c) = best_inv;
      }
      sum += best;
    }
  }
  out.mean = sum / static_cast<double>(inverse_depth.size());
  return out;
}

/// Candidate update: pose increment and per-pixel fractional inverse-depth change.
struct Direction {
  Vec6 pose = Vec6::Zero();
  Grid<double> depth;
};

void cap_pose_step(Vec6& dir, const SolverState& state, const SolverConfig& cfg) {
  const double rot = dir.head<3>().norm();
  const double trans = dir.tail<3>().norm();
  const double trans_cap = cfg.max_translation_step * median_depth(state);
  double shrink = 1.0;
  if (rot > cfg.max_rotation_step) shrink = std::min(shrink, cfg.max_rotation_step / rot);
  if (trans > trans_cap) shrink = std::min(shrink, trans_cap / trans);
  dir *= shrink;
}

// Ascent direction read off the difference maps: the mean pose gradient
// preconditioned by the damped outer-product information of the per-pixel
// gradients, and a per-pixel Newton step on inverse depth.
Direction gradient_direction(const SolverState& state, const DifferenceMaps& maps, const SolverConfig& cfg) {
  Direction d;
  d.depth = Grid<double>(state.inverse_depth.rows(), state.inverse_depth.cols(), 0.0);
  Vec6 grad = Vec6::Zero();
  Mat6 info = Mat6::Zero();
  long n = 0;
  for (int r = 0; r < maps.observed.rows(); ++r) {
    for (int c = 0; c < maps.observed.cols(); ++c) {
      if (!maps.observed(r, c)) continue;
      Vec6 g = Vec6::Zero();
      for (int m = kRx; m < kParamCount; ++m) {
        if (maps.delta[m] == 0.0) continue;
        g[m - 1] = (maps.plus[m](r, c) - maps.minus[m](r, c)) / (2.0 * maps.delta[m]);
      }
      grad += g;
      info += g * g.transpose();
      ++n;
    }
  }
  if (n > 0 && grad.squaredNorm() > 0.0) {
    grad /= static_cast<double>(n);
    info /= static_cast<double>(n);
    Mat6 damped = info;
    const double trace = info.trace();
    for (int i = 0; i < 6; ++i) damped(i, i) += cfg.damping * info(i, i) + 1e-12 * (trace + 1e-300);
    Vec6 dir = damped.ldlt().solve(grad);
    if (!dir.allFinite() || grad.dot(dir) <= 0.0) dir = grad;
    d.pose = dir * cfg.pose_step_scale;
    cap_pose_step(d.pose, state, cfg);
  }
  const double delta = maps.delta[kDepth];
  if (delta > 0.0) {
    for (int r = 0; r < d.depth.rows(); ++r) {
      for (int c = 0; c < d.depth.cols(); ++c) {
        if (!state.valid(r, c)) continue;
        const double g = (maps.plus[kDepth](r, c) - maps.minus[kDepth](r, c)) / (2.0 * delta);
        if (g == 0.0) continue;
        const double curv = (maps.plus[kDepth](r, c) + maps.minus[kDepth](r, c)) / (delta * delta);
        const double u = curv < 0.0 ? -g / curv : std::copysign(cfg.max_depth_step, g);
        d.depth(r, c) = std::clamp(u * cfg.depth_step_scale, -cfg.max_depth_step, cfg.max_depth_step);
      }
    }
  }
  return d;
}

struct Match {
  Vec2 target;
  bool ok = false;
};

// Best correlation within a window of +-radius level cells around the
// current projection, refined by a parabola along each axis.
std::vector<Match> correlation_matches(const SolverState& state, const LikelihoodObjective& objective,
                                       const PoseSE3& T, int radius) {
  const auto& pyr = objective.pyramid();
  const int k = objective.level();
  const double h = static_cast<double>(1 << k);
  const int rows = state.inverse_depth.rows(), cols = state.inverse_depth.cols();
  std::vector<Match> out(static_cast<std::size_t>(rows) * cols);
  const int side = 2 * radius + 1;
  std::vector<double> win(static_cast<std::size_t>(side) * side);
  for (int r = 0; r < rows; ++r) {
    for (int c = 0; c < cols; ++c) {
      if (!state.valid(r, c)) continue;
      const auto proj = project(Vec2(c, r), 1.0 / state.inverse_depth(r, c), T, objective.intrinsics());
      if (!proj) continue;
      const Vec2 p = proj->pixel;
      int best = -1;
      for (int dy = -radius; dy <= radius; ++dy) {
        for (int dx = -radius; dx <= radius; ++dx) {
          const std::size_t idx = static_cast<std::size_t>((dy + radius) * side + dx + radius);
          const LookupResult hit = pyr.lookup(r, c, p.x() + dx * h, p.y() + dy * h, k);
          win[idx] = hit.valid ? hit.value : -std::numeric_limits<double>::infinity();
          if (hit.valid && (best < 0 || win[idx] > win[static_cast<std::size_t>(best)])) best = static_cast<int>(idx);
        }
      }
      if (best < 0) continue;
      const int by = best / side - radius, bx = best % side - radius;
      if (k == 0) {
        // Mutual check: the matched source cell must prefer this target pixel
        // among the target pixels around it.
        const int sx = static_cast<int>(std::lround(p.x() + bx)), sy = static_cast<int>(std::lround(p.y() + by));
        if (sx < 0 || sy < 0 || sx >= cols || sy >= rows) continue;
        const double mine = pyr.entry(0, r, c, sy, sx);
        bool mutual = true;
        for (int i = std::max(0, r - radius); i <= std::min(rows - 1, r + radius) && mutual; ++i) {
          for (int j = std::max(0, c - radius); j <= std::min(cols - 1, c + radius); ++j) {
            if (std::abs(i - r) <= 1 && std::abs(j - c) <= 1) continue;
            if (pyr.entry(0, i, j, sy, sx) > mine) {
              mutual = false;
              break;
            }
          }
        }
        if (!mutual) continue;
      }
      auto at = [&](int dx, int dy) {
        if (std::abs(dx) > radius || std::abs(dy) > radius) return -std::numeric_limits<double>::infinity();
        return win[static_cast<std::size_t>((dy + radius) * side + dx + radius)];
      };
      auto refine = [](double a, double b, double e) {
        const double den = a - 2.0 * b + e;
        if (!std::isfinite(a) || !std::isfinite(e) || den >= 0.0) return 0.0;
        return std::clamp(0.5 * (a - e) / den, -0.5, 0.5);
      };
      const double ox = refine(at(bx - 1, by), at(bx, by), at(bx + 1, by));
      const double oy = refine(at(bx, by - 1), at(bx, by), at(bx, by + 1));
      Match& m = out[static_cast<std::size_t>(r) * cols + c];
      m.target = p + Vec2(bx + ox, by + oy) * h;
      m.ok = true;
    }
  }
  return out;
}

}  // namespace

MatchFit fit_matches(const SolverState& state, const std::vector<std::optional<Vec2>>& targets,
                     const Intrinsics& K, const MatchFitOptions& opt) {
  constexpr double kMaxLogDepthChange = 2.0;
  const int rows = state.inverse_depth.rows(), cols = state.inverse_depth.cols();
  const int npix = rows * cols;
  if (targets.size() != state.inverse_depth.size()) throw std::invalid_argument("fit_matches: size mismatch");
  const double huber = opt.huber;
  // Cauchy loss on the reprojection residual; outlying matches lose influence.
  auto data_loss = [huber](double n) { return 0.5 * huber * huber * std::log1p((n / huber) * (n / huber)); };
  const Vec3 gauge_t = state.pose.translation();
  PoseVec6 pose = state.pose;
  Eigen::VectorXd u = Eigen::VectorXd::Zero(npix);
  Eigen::VectorXd base(npix);
  for (int i = 0; i < npix; ++i) base[i] = std::log(state.inverse_depth.values()[static_cast<std::size_t>(i)]);

  // Pixel triples along rows and columns carrying a second-difference prior on
  // inverse depth relative to the middle pixel. Inverse depth is affine on a
  // plane, so planes are not penalized.
  std::vector<std::array<int, 3>> edges;
  if (opt.smoothness > 0.0) {
    auto ok = [&](int r, int c) { return r >= 0 && c >= 0 && r < rows && c < cols && state.valid(r, c); };
    for (int r = 0; r < rows; ++r) {
      for (int c = 0; c < cols; ++c) {
        if (!ok(r, c)) continue;
        if (ok(r, c - 1) && ok(r, c + 1)) edges.push_back({r * cols + c - 1, r * cols + c, r * cols + c + 1});
        if (ok(r - 1, c) && ok(r + 1, c)) edges.push_back({(r - 1) * cols + c, r * cols + c, (r + 1) * cols + c});
      }
    }
  }
  auto curvature = [&](const std::array<int, 3>& e, const Eigen::VectorXd& uu) {
    return (std::exp(base[e[0]] + uu[e[0]]) + std::exp(base[e[2]] + uu[e[2]])) / std::exp(base[e[1]] + uu[e[1]]) - 2.0;
  };
  auto rho = [](double n, double k) { return n <= k ? 0.5 * n * n : k * (n - 0.5 * k); };
  auto residual = [&](int i, double ui, const PoseSE3& T) -> std::optional<Vec2> {
    const double inv = std::max(std::exp(base[i] + ui), kMinInverseDepth);
    const auto proj = project(Vec2(i % cols, i / cols), 1.0 / inv, T, K);
    if (!proj) return std::nullopt;
    return Vec2(proj->pixel - *targets[static_cast<std::size_t>(i)]);
  };
  auto total_cost = [&](const PoseVec6& ps, const Eigen::VectorXd& uu) {
    const PoseSE3 T = exp_map(ps);
    double cost = 0.0;
    for (int i = 0; i < npix; ++i) {
      if (!targets[static_cast<std::size_t>(i)]) continue;
      const auto e = residual(i, uu[i], T);
      cost += data_loss(e ? e->norm() : 10.0 * huber);
    }
    for (const auto& e : edges) cost += opt.smoothness * rho(std::abs(curvature(e, uu)), opt.edge);
    return cost;
  };

  double cost = total_cost(pose, u);
  double lambda = 1e-3;
  const double eps = 1e-6;
  for (int it = 0; it < opt.iterations; ++it) {
    const PoseSE3 T = exp_map(pose);
    std::array<PoseSE3, 6> tp, tm;
    for (int m = 0; m < 6; ++m) {
      PoseVec6 a = pose, b = pose;
      a[m] += eps;
      b[m] -= eps;
      tp[m] = exp_map(a);
      tm[m] = exp_map(b);
    }
    // Normal equations [A Bt; B H] for (pose, u); H is sparse.
    Mat6 A = Mat6::Zero();
    Vec6 bp = Vec6::Zero();
    Eigen::MatrixXd B = Eigen::MatrixXd::Zero(npix, 6);
    Eigen::VectorXd hdiag = Eigen::VectorXd::Zero(npix);
    Eigen::VectorXd bu = Eigen::VectorXd::Zero(npix);
    for (int i = 0; i < npix; ++i) {
      if (!targets[static_cast<std::size_t>(i)]) continue;
      const auto e = residual(i, u[i], T);
      if (!e) continue;
      Eigen::Matrix<double, 2, 6> Jp;
      bool ok = true;
      for (int m = 0; m < 6 && ok; ++m) {
        const auto a = residual(i, u[i], tp[m]);
        const auto b = residual(i, u[i], tm[m]);
        ok = a && b;
        if (ok) Jp.col(m) = (*a - *b) / (2.0 * eps);
      }
      const auto da = residual(i, u[i] + eps, T);
      const auto db = residual(i, u[i] - eps, T);
      if (!ok || !da || !db) continue;
      const Vec2 Jd = (*da - *db) / (2.0 * eps);
      const double n = e->norm();
      const double w = 1.0 / (1.0 + (n / huber) * (n / huber));
      A += w * Jp.transpose() * Jp;
      bp += w * Jp.transpose() * *e;
      B.row(i) = (w * Jp.transpose() * Jd).transpose();
      hdiag[i] = w * Jd.squaredNorm();
      bu[i] = w * Jd.dot(*e);
    }
    std::vector<Eigen::Triplet<double>> smooth;
    for (const auto& e : edges) {
      const double d = curvature(e, u);
      const double w = opt.smoothness * (std::abs(d) <= opt.edge ? 1.0 : opt.edge / std::abs(d));
      const double mid = std::exp(base[e[1]] + u[e[1]]);
      const double g[3] = {std::exp(base[e[0]] + u[e[0]]) / mid, -(d + 2.0), std::exp(base[e[2]] + u[e[2]]) / mid};
      for (int a = 0; a < 3; ++a) {
        bu[e[a]] += w * d * g[a];
        for (int b = 0; b < 3; ++b) smooth.emplace_back(e[a], e[b], w * g[a] * g[b]);
      }
    }
    if (gauge_t.norm() > 0.0) {
      Vec6 g = Vec6::Zero();
      g.tail<3>() = gauge_t.normalized();
      A += (A.trace() + 1e-300) * g * g.transpose();
    }
    bool improved = false;
    for (int attempt = 0; attempt < 6 && !improved; ++attempt) {
      std::vector<Eigen::Triplet<double>> trip = smooth;
      for (int i = 0; i < npix; ++i) trip.emplace_back(i, i, hdiag[i] * (1.0 + lambda) + 1e-9);
      Eigen::SparseMatrix<double> H(npix, npix);
      H.setFromTriplets(trip.begin(), trip.end());
      const Eigen::SimplicialLDLT<Eigen::SparseMatrix<double>> ldlt(H);
      if (ldlt.info() != Eigen::Success) break;
      const Eigen::MatrixXd X = ldlt.solve(B);
      const Eigen::VectorXd y = ldlt.solve(bu);
      Mat6 S = A - B.transpose() * X;
      for (int k = 0; k < 6; ++k) S(k, k) += lambda * A(k, k) + 1e-12 * (A.trace() + 1e-300);
      const Vec6 step = -S.ldlt().solve(Vec6(bp - B.transpose() * y));
      if (!step.allFinite()) break;
      PoseVec6 cand = pose;
      cand.v += step;
      Eigen::VectorXd uc = u - (y + X * step);
      for (int i = 0; i < npix; ++i) {
        uc[i] = state.valid.values()[static_cast<std::size_t>(i)] ? std::clamp(uc[i], -kMaxLogDepthChange, kMaxLogDepthChange) : 0.0;
      }
      const double cc = total_cost(cand, uc);
      if (cc < cost) {
        cost = cc;
        pose = cand;
        u = std::move(uc);
        lambda = std::max(lambda * 0.1, 1e-6);
        improved = true;
      } else {
        lambda *= 10.0;
      }
    }
    if (!improved) break;
  }
  Grid<double> log_change(rows, cols, 0.0);
  for (int i = 0; i < npix; ++i) log_change.values()[static_cast<std::size_t>(i)] = u[i];
  return {pose, std::move(log_change), cost};
}

namespace {

// Correlation matches around the current projection, fitted by fit_matches.
Direction match_direction(const SolverState& state, const LikelihoodObjective& objective,
                          const SolverConfig& cfg) {
  const int rows = state.inverse_depth.rows(), cols = state.inverse_depth.cols();
  Direction d;
  d.depth = Grid<double>(rows, cols, 0.0);
  const std::vector<Match> matches = correlation_matches(state, objective, exp_map(state.pose), cfg.match_radius);
  std::vector<std::optional<Vec2>> targets(matches.size());
  for (std::size_t i = 0; i < matches.size(); ++i) {
    if (matches[i].ok) targets[i] = matches[i].target;
  }
  MatchFitOptions opt;
  opt.huber = static_cast<double>(1 << objective.level());
  opt.iterations = cfg.fit_iterations;
  opt.smoothness = cfg.fit_smoothness;
  opt.edge = cfg.fit_edge;
  const MatchFit fit = fit_matches(state, targets, objective.intrinsics(), opt);
  d.pose = fit.pose.v - state.pose.v;
  cap_pose_step(d.pose, state, cfg);
  for (int r = 0; r < rows; ++r) {
    for (int c = 0; c < cols; ++c) d.depth(r, c) = std::expm1(fit.log_inverse_depth(r, c));
  }
  return d;
}

}  // namespace

UpdateResult update_step(const SolverState& state, const DifferenceMaps& maps,
                         const LikelihoodObjective& objective, const SolverConfig& cfg) {
  UpdateResult out{state, true, 0.0, 0.0};
  const double current = objective.mean(state.inverse_depth, state.valid, exp_map(state.pose));
  const int rows = state.inverse_depth.rows(), cols = state.inverse_depth.cols();

  std::vector<Direction> dirs;
  dirs.push_back(gradient_direction(state, maps, cfg));
  if (cfg.match_radius > 0) dirs.push_back(match_direction(state, objective, cfg));

  // Halving line search along each direction. Every candidate pose is
  // followed by the per-pixel depth search, so a pose move is judged together
  // with the depth it implies. The zero step is always a candidate.
  double best = current;
  Vec6 best_pose = Vec6::Zero();
  std::optional<DepthSearch> best_depth;
  auto count_observed = [&](const Grid<double>& inv, const Mask& valid, const PoseSE3& T) {
    const Mask seen = objective.evaluate(inv, valid, T).observed;
    return std::count(seen.values().begin(), seen.values().end(), 1);
  };
  const double min_observed =
      cfg.min_observed_ratio * static_cast<double>(count_observed(state.inverse_depth, state.valid, exp_map(state.pose)));
  auto try_candidate = [&](const Vec6& dpose, const Grid<double>* ddepth, double s) {
    PoseVec6 cand = state.pose;
    cand.v += s * dpose;
    Grid<double> inv = state.inverse_depth;
    if (ddepth != nullptr) {
      for (int r = 0; r < rows; ++r) {
        for (int c = 0; c < cols; ++c) {
          if (state.valid(r, c)) inv(r, c) = std::max(inv(r, c) * (1.0 + s * (*ddepth)(r, c)), kMinInverseDepth);
        }
      }
    }
    DepthSearch ds;
    if (cfg.depth_search) {
      ds = search_depth(inv, state.valid, exp_map(cand), objective, cfg);
    } else {
      ds.mean = objective.mean(inv, state.valid, exp_map(cand));
      ds.inverse_depth = std::move(inv);
    }
    // An unobserved pixel scores the Uniform density, which beats a poor
    // match; do not let the estimate gain likelihood by leaving the image.
    if (s > 0.0 && count_observed(ds.inverse_depth, state.valid, exp_map(cand)) < min_observed) return;
    if (ds.mean > best) {
      best = ds.mean;
      best_pose = s * dpose;
      best_depth = std::move(ds);
    }
  };
  try_candidate(Vec6::Zero(), nullptr, 0.0);
  for (const Direction& d : dirs) {
    double s = 1.0;
    for (int h = 0; h <= cfg.max_halvings; ++h, s *= 0.5) try_candidate(d.pose, &d.depth, s);
  }

  SolverState& next = out.state;
  if (best_depth) {
    next.pose.v = state.pose.v + best_pose;
    double moved = 0.0;
    long count = 0;
    for (int r = 0; r < rows; ++r) {
      for (int c = 0; c < cols; ++c) {
        const double change = std::abs(best_depth->inverse_depth(r, c) / state.inverse_depth(r, c) - 1.0);
        if (change > 0.0) {
          moved += change;
          ++count;
        }
      }
    }
    next.inverse_depth = std::move(best_depth->inverse_depth);
    out.pose_step = best_pose.norm();
    out.depth_step = count > 0 ? moved / static_cast<double>(count) : 0.0;
    out.stalled = out.pose_step == 0.0 && out.depth_step == 0.0;
  }

  next.ll = objective.mean(next.inverse_depth, next.valid, exp_map(next.pose));
  if (next.ll < current) {
    // Rounding in the per-pixel sum can disagree with the map mean; never go down.
    out = UpdateResult{state, true, 0.0, 0.0};
    out.state.ll = current;
  }
  out.state.level = objective.level();
  return out;
}

std::string format_diagnostics(const IterationDiagnostics& d) {
  char buf[256];
  std::snprintf(buf, sizeof(buf), "iter=%d level=%d ll=%.9g step_pose=%.6g step_depth=%.6g stalled=%d",
                d.iter, d.level, d.ll, d.step_pose, d.step_depth, d.stalled ? 1 : 0);
  return buf;
}

void write_diagnostics(std::ostream& out, const std::vector<IterationDiagnostics>& diags) {
  for (const auto& d : diags) out << format_diagnostics(d) << '\n';
}

DepthMap upsample_depth(const DepthMap& grid_depth, int factor, int rows, int cols) {
  DepthMap out(rows, cols, 1.0);
  const int h = grid_depth.rows(), w = grid_depth.cols();
  for (int r = 0; r < rows; ++r) {
    const double y = std::clamp((r + 0.5) / factor - 0.5, 0.0, static_cast<double>(h - 1));
    const int y0 = std::min(static_cast<int>(std::floor(y)), h - 1);
    const int y1 = std::min(y0 + 1, h - 1);
    const double fy = y - y0;
    for (int c = 0; c < cols; ++c) {
      const double x = std::clamp((c + 0.5) / factor - 0.5, 0.0, static_cast<double>(w - 1));
      const int x0 = std::min(static_cast<int>(std::floor(x)), w - 1);
      const int x1 = std::min(x0 + 1, w - 1);
      const double fx = x - x0;
      const double wts[4] = {(1 - fx) * (1 - fy), fx * (1 - fy), (1 - fx) * fy, fx * fy};
      const int ys[4] = {y0, y0, y1, y1};
      const int xs[4] = {x0, x1, x0, x1};
      double sum = 0.0;
      bool ok = true;
      for (int k = 0; k < 4; ++k) {
        if (wts[k] == 0.0) continue;
        if (!grid_depth.is_valid(ys[k], xs[k])) ok = false;
        sum += wts[k] * grid_depth.values(ys[k], xs[k]);
      }
      out.values(r, c) = ok ? sum : 0.0;
      out.valid(r, c) = ok ? 1 : 0;
    }
  }
  return out;
}

namespace {

UncertaintyMaps make_uncertainty(const SolverConfig& cfg, const Image& small_target,
                                 const Image& small_source, const SolverState& state,
                                 const Intrinsics& Kg) {
  if (cfg.uncertainty == UncertaintyMode::pinned) {
    return UncertaintyMaps(small_target.rows(), small_target.cols(), kRhoMin, cfg.heuristic.mu0,
                           cfg.heuristic.sigma0);
  }
  const WarpResult warped = warp_image(small_source, state.depth(), exp_map(state.pose), Kg);
  return default_uncertainty(small_target, warped.image, warped.visible, cfg.heuristic);
}

bool parallax_vanishes(const SolverState& state, const Intrinsics& Kg) {
  const PoseSE3 T = exp_map(state.pose);
  double worst = 0.0;
  for (int r = 0; r < state.inverse_depth.rows(); ++r) {
    for (int c = 0; c < state.inverse_depth.cols(); ++c) {
      if (!state.valid(r, c)) continue;
      const double d = 1.0 / state.inverse_depth(r, c);
      const auto a = project(Vec2(c, r), d, T, Kg);
      const auto b = project(Vec2(c, r), 2.0 * d, T, Kg);
      if (!a || !b) continue;
      worst = std::max(worst, (a->pixel - b->pixel).norm());
    }
  }
  return worst < 0.1;
}

}  // namespace

SolveResult solve(const Image& target, const Image& source, const Intrinsics& K, const SolverConfig& cfg) {
  cfg.check();
  require_same_shape(target, source, "solve");
  if (target.rows() < 64 || target.cols() < 64) {
    throw std::invalid_argument("solve: images must be at least 64x64");
  }
  const FeatureMap ft = extract_features(target, cfg.backend);
  DescriptorBackend source_backend = cfg.backend;
  if (cfg.backend.kind == DescriptorKind::external_file) source_backend.external_path = cfg.source_features;
  const FeatureMap fs = extract_features(source, source_backend);
  if (ft.zero_fraction() > 0.9 || fs.zero_fraction() > 0.9) {
    throw IllConditionedError("solve: more than 90% of descriptors are zero (textureless input)");
  }
  const CorrelationPyramid pyramid = build_pyramid(ft, fs, cfg.pyramid);
  const Intrinsics Kg = K.downscaled(kFeatureStride);
  const Image small_target = downsample_box(target, kFeatureStride);
  const Image small_source = downsample_box(source, kFeatureStride);

  SolveResult result;
  SolverState state(pyramid.rows(), pyramid.cols(), cfg.init_depth);
  UncertaintyMaps prev_unc;
  int prev_level = -1;
  double prev_ll = 0.0;

  for (int n = 1; n <= cfg.iterations; ++n) {
    const int scheduled = cfg.level_for(n);
    UncertaintyMaps fresh = make_uncertainty(cfg, small_target, small_source, state, Kg);
    const PoseSE3 T = exp_map(state.pose);

    // A model refresh (new uncertainty maps or pyramid level) is kept only if it
    // does not lower the likelihood reached by the previous iteration.
    UncertaintyMaps unc = fresh;
    int level = scheduled;
    if (n > 1) {
      struct Candidate {
        const UncertaintyMaps* unc;
        int level;
      };
      const Candidate candidates[] = {
          {&fresh, scheduled}, {&prev_unc, scheduled}, {&fresh, prev_level}, {&prev_unc, prev_level}};
      for (const auto& cand : candidates) {
        const LikelihoodObjective probe(pyramid, *cand.unc, Kg, cand.level);
        const bool last = cand.unc == &prev_unc && cand.level == prev_level;
        if (last || probe.mean(state.inverse_depth, state.valid, T) >= prev_ll) {
          unc = *cand.unc;
          level = cand.level;
          break;
        }
      }
    }

    const LikelihoodObjective objective(pyramid, unc, Kg, level);
    state.ll = objective.mean(state.inverse_depth, state.valid, T);
    state.level = level;
    const DifferenceMaps maps = difference_maps(state, objective, cfg.disturbances);
    UpdateResult step = update_step(state, maps, objective, cfg);
    step.state.iter = n;

    IterationDiagnostics diag;
    diag.iter = n;
    diag.level = level;
    diag.ll = step.state.ll;
    diag.step_pose = step.pose_step;
    diag.step_depth = step.depth_step;
    diag.stalled = step.stalled;
    result.diagnostics.push_back(diag);

    const bool converged = n > 1 && cfg.tolerance > 0.0 && std::abs(step.state.ll - prev_ll) < cfg.tolerance;
    state = std::move(step.state);
    prev_unc = std::move(unc);
    prev_level = level;
    prev_ll = state.ll;
    if (converged) break;
  }

  // Depth is reported only where the final estimate is observed.
  const PoseSE3 T = exp_map(state.pose);
  DepthMap grid_depth = state.depth();
  grid_depth.valid = projection_visibility(grid_depth, T, Kg, pyramid.rows(), pyramid.cols());
  result.depth = upsample_depth(grid_depth, kFeatureStride, target.rows(), target.cols());
  result.pose = T;
  result.depth_unconstrained = parallax_vanishes(state, Kg);
  result.state = std::move(state);
  return result;
}

}  // namespace mlesfm
