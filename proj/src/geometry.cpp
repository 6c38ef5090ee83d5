#include "mlesfm/geometry.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <stdexcept>

#include <Eigen/Dense>

namespace mlesfm {

namespace {

Mat3 skew(const Vec3& w) {
  Mat3 S;
  S << 0.0, -w.z(), w.y(),
       w.z(), 0.0, -w.x(),
       -w.y(), w.x(), 0.0;
  return S;
}

bool all_finite(const Mat3& m) { return m.allFinite(); }

}  // namespace

Intrinsics::Intrinsics(double fx_, double fy_, double cx_, double cy_)
    : fx(fx_), fy(fy_), cx(cx_), cy(cy_) {
  if (!(std::isfinite(fx) && std::isfinite(fy) && std::isfinite(cx) && std::isfinite(cy))) {
    throw std::invalid_argument("Intrinsics: non-finite value");
  }
  if (fx <= 0.0 || fy <= 0.0) throw std::invalid_argument("Intrinsics: focal length must be positive");
}

Intrinsics Intrinsics::downscaled(int factor) const {
  if (factor <= 0) throw std::invalid_argument("Intrinsics::downscaled: factor must be positive");
  const double f = factor;
  return {fx / f, fy / f, (cx + 0.5) / f - 0.5, (cy + 0.5) / f - 0.5};
}

bool is_rotation(const Mat3& R, double tol) {
  if (!all_finite(R)) return false;
  if (((R.transpose() * R) - Mat3::Identity()).cwiseAbs().maxCoeff() > tol) return false;
  return std::abs(R.determinant() - 1.0) <= tol;
}

Mat3 orthonormalize(const Mat3& R) {
  Eigen::JacobiSVD<Mat3> svd(R, Eigen::ComputeFullU | Eigen::ComputeFullV);
  Mat3 U = svd.matrixU();
  const Mat3 V = svd.matrixV();
  if ((U * V.transpose()).determinant() < 0.0) U.col(2) *= -1.0;
  return U * V.transpose();
}

PoseSE3::PoseSE3(const Mat3& R, const Vec3& t) : R_(R), t_(t) {
  if (!is_rotation(R, 1e-9)) throw std::invalid_argument("PoseSE3: R is not a rotation matrix");
  if (!t.allFinite()) throw std::invalid_argument("PoseSE3: non-finite translation");
}

PoseSE3 PoseSE3::inverse() const {
  PoseSE3 out;
  out.R_ = R_.transpose();
  out.t_ = -(out.R_ * t_);
  return out;
}

PoseSE3 PoseSE3::operator*(const PoseSE3& rhs) const {
  PoseSE3 out;
  out.R_ = R_ * rhs.R_;
  out.t_ = R_ * rhs.t_ + t_;
  return out;
}

Mat3 rotation_from_axis_angle(const Vec3& r) {
  const double theta2 = r.squaredNorm();
  const Mat3 W = skew(r);
  if (theta2 < 1e-16) {
    // second-order series of sin(t)/t and (1-cos(t))/t^2
    return Mat3::Identity() + (1.0 - theta2 / 6.0) * W + (0.5 - theta2 / 24.0) * (W * W);
  }
  const double theta = std::sqrt(theta2);
  const double a = std::sin(theta) / theta;
  const double b = (1.0 - std::cos(theta)) / theta2;
  return Mat3::Identity() + a * W + b * (W * W);
}

double rotation_angle(const Mat3& R) {
  const Vec3 w(R(2, 1) - R(1, 2), R(0, 2) - R(2, 0), R(1, 0) - R(0, 1));
  const double s = 0.5 * w.norm();
  const double c = 0.5 * (R.trace() - 1.0);
  return std::atan2(s, c);
}

Vec3 axis_angle_from_rotation(const Mat3& R) {
  const Vec3 w(R(2, 1) - R(1, 2), R(0, 2) - R(2, 0), R(1, 0) - R(0, 1));
  const double theta = rotation_angle(R);
  if (theta < 1e-6) {
    // theta / sin(theta) ~ 1 + theta^2 / 6
    return 0.5 * (1.0 + theta * theta / 6.0) * w;
  }
  if (theta < std::numbers::pi - 1e-2) {
    return (theta / (2.0 * std::sin(theta))) * w;
  }
  // Near pi the antisymmetric part vanishes; recover the axis from the
  // symmetric part B = (1 - cos) a a^T.
  const Mat3 B = 0.5 * (R + R.transpose()) - std::cos(theta) * Mat3::Identity();
  int k = 0;
  B.diagonal().maxCoeff(&k);
  Vec3 axis = B.col(k) / std::sqrt(std::max(B(k, k), 1e-300));
  axis.normalize();
  if (w.dot(axis) < 0.0) axis = -axis;
  if (w.norm() < 1e-14 && axis[k] < 0.0) axis = -axis;
  return theta * axis;
}

PoseSE3 exp_map(const PoseVec6& v) {
  if (!v.v.allFinite()) throw std::invalid_argument("exp_map: non-finite coordinates");
  const Mat3 R = rotation_from_axis_angle(v.rotation());
  return PoseSE3(R, v.translation());
}

PoseVec6 log_map(const PoseSE3& T) {
  PoseVec6 out;
  out.v.head<3>() = axis_angle_from_rotation(T.rotation());
  out.v.tail<3>() = T.translation();
  return out;
}

std::optional<Projection> project(const Vec2& p, double depth, const PoseSE3& T,
                                  const Intrinsics& K) {
  const Vec3 ray((p.x() - K.cx) / K.fx, (p.y() - K.cy) / K.fy, 1.0);
  const Vec3 X = T.apply(depth * ray);
  if (!(X.z() > kMinProjectedDepth)) return std::nullopt;
  Projection out;
  out.pixel = Vec2(K.fx * X.x() / X.z() + K.cx, K.fy * X.y() / X.z() + K.cy);
  out.depth = X.z();
  return out;
}

DepthMap::DepthMap(int rows, int cols, double fill)
    : values(rows, cols, fill), valid(rows, cols, 1) {}

DepthMap::DepthMap(Grid<double> v, Mask m) : values(std::move(v)), valid(std::move(m)) {
  require_same_shape(values, valid, "DepthMap");
}

void DepthMap::check() const {
  require_same_shape(values, valid, "DepthMap");
  for (int r = 0; r < rows(); ++r) {
    for (int c = 0; c < cols(); ++c) {
      const double d = values(r, c);
      if (!std::isfinite(d)) throw std::invalid_argument("DepthMap: non-finite value");
      if (valid(r, c) && d <= 0.0) throw std::invalid_argument("DepthMap: non-positive valid depth");
    }
  }
}

std::optional<double> sample_bilinear(const Grid<double>& img, double x, double y) {
  const int w = img.cols();
  const int h = img.rows();
  if (w == 0 || h == 0) return std::nullopt;
  const double xr = std::round(x);
  const double yr = std::round(y);
  if (std::abs(x - xr) < 1e-9) x = xr;
  if (std::abs(y - yr) < 1e-9) y = yr;
  if (!inside_image(x, y, w, h)) return std::nullopt;
  x = std::clamp(x, 0.0, static_cast<double>(w - 1));
  y = std::clamp(y, 0.0, static_cast<double>(h - 1));
  const int x0 = std::min(static_cast<int>(std::floor(x)), w - 1);
  const int y0 = std::min(static_cast<int>(std::floor(y)), h - 1);
  const double fx = x - x0;
  const double fy = y - y0;
  const int x1 = std::min(x0 + 1, w - 1);
  const int y1 = std::min(y0 + 1, h - 1);
  if (fx == 0.0 && fy == 0.0) return img(y0, x0);
  const double top = img(y0, x0) * (1.0 - fx) + img(y0, x1) * fx;
  const double bottom = img(y1, x0) * (1.0 - fx) + img(y1, x1) * fx;
  return top * (1.0 - fy) + bottom * fy;
}

WarpResult warp_image(const Image& source, const DepthMap& depth, const PoseSE3& T,
                      const Intrinsics& K) {
  require_same_shape(source, depth.values, "warp_image");
  require_same_shape(depth.values, depth.valid, "warp_image");
  WarpResult out{Image(depth.rows(), depth.cols(), 0.0), Mask(depth.rows(), depth.cols(), 0)};
  for (int r = 0; r < depth.rows(); ++r) {
    for (int c = 0; c < depth.cols(); ++c) {
      if (!depth.is_valid(r, c)) continue;
      const auto proj = project(Vec2(c, r), depth.values(r, c), T, K);
      if (!proj) continue;
      const auto v = sample_bilinear(source, proj->pixel.x(), proj->pixel.y());
      if (!v) continue;
      out.image(r, c) = *v;
      out.visible(r, c) = 1;
    }
  }
  return out;
}

Mask projection_visibility(const DepthMap& depth, const PoseSE3& T, const Intrinsics& K,
                           int source_rows, int source_cols) {
  Mask vis(depth.rows(), depth.cols(), 0);
  for (int r = 0; r < depth.rows(); ++r) {
    for (int c = 0; c < depth.cols(); ++c) {
      if (!depth.is_valid(r, c)) continue;
      const auto proj = project(Vec2(c, r), depth.values(r, c), T, K);
      if (!proj) continue;
      vis(r, c) = inside_image(proj->pixel.x(), proj->pixel.y(), source_cols, source_rows) ? 1 : 0;
    }
  }
  return vis;
}

}  // namespace mlesfm
