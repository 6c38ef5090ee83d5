#pragma once

#include <optional>

#include <Eigen/Core>
#include <Eigen/Geometry>

#include "mlesfm/grid.hpp"

namespace mlesfm {

using Vec2 = Eigen::Vector2d;
using Vec3 = Eigen::Vector3d;
using Mat3 = Eigen::Matrix3d;

/// Behind-camera threshold on the transformed depth.
inline constexpr double kMinProjectedDepth = 1e-6;

/// Pinhole intrinsics. Pixel coordinates are (column, row) with the origin at
/// the center of the top-left pixel.
struct Intrinsics {
  double fx = 1.0;
  double fy = 1.0;
  double cx = 0.0;
  double cy = 0.0;

  Intrinsics() = default;
  Intrinsics(double fx, double fy, double cx, double cy);

  /// Intrinsics for a grid downsampled by `factor` with box pooling, using the
  /// pixel-center convention: c' = (c + 0.5) / factor - 0.5.
  Intrinsics downscaled(int factor) const;
};

/// Six rigid-motion coordinates: axis-angle rotation followed by translation.
struct PoseVec6 {
  Eigen::Matrix<double, 6, 1> v = Eigen::Matrix<double, 6, 1>::Zero();

  PoseVec6() = default;
  explicit PoseVec6(const Eigen::Matrix<double, 6, 1>& coords) : v(coords) {}
  PoseVec6(double rx, double ry, double rz, double tx, double ty, double tz) {
    v << rx, ry, rz, tx, ty, tz;
  }

  Vec3 rotation() const { return v.head<3>(); }
  Vec3 translation() const { return v.tail<3>(); }
  double& operator[](int i) { return v[i]; }
  double operator[](int i) const { return v[i]; }
};

/// Rigid transform x -> R x + t mapping target-camera points into the source camera.
class PoseSE3 {
 public:
  PoseSE3() : R_(Mat3::Identity()), t_(Vec3::Zero()) {}
  /// Throws std::invalid_argument unless R is a rotation within 1e-9.
  PoseSE3(const Mat3& R, const Vec3& t);

  static PoseSE3 identity() { return {}; }

  const Mat3& rotation() const { return R_; }
  const Vec3& translation() const { return t_; }

  Vec3 apply(const Vec3& x) const { return R_ * x + t_; }
  PoseSE3 inverse() const;
  PoseSE3 operator*(const PoseSE3& rhs) const;

 private:
  Mat3 R_;
  Vec3 t_;
};

/// True when R^T R = I and det R = 1 within `tol`, and all entries are finite.
bool is_rotation(const Mat3& R, double tol = 1e-9);

/// Nearest rotation in the Frobenius sense (SVD projection).
Mat3 orthonormalize(const Mat3& R);

/// Rodrigues exponential on the rotation part; translation copied through.
PoseSE3 exp_map(const PoseVec6& v);

/// Inverse of exp_map with rotation angle in [0, pi]. At exactly pi the axis
/// sign is ambiguous; the branch with a non-negative largest axis component is
/// returned.
PoseVec6 log_map(const PoseSE3& T);

Mat3 rotation_from_axis_angle(const Vec3& r);
Vec3 axis_angle_from_rotation(const Mat3& R);

/// Angle of a rotation matrix in radians.
double rotation_angle(const Mat3& R);

struct Projection {
  Vec2 pixel;
  double depth = 0.0;
};

/// Back-projects pixel p at depth d, moves it by T and projects it with K.
/// Returns nullopt when the transformed depth is at or below kMinProjectedDepth.
std::optional<Projection> project(const Vec2& p, double depth, const PoseSE3& T,
                                  const Intrinsics& K);

/// Per-pixel depth with a validity mask.
struct DepthMap {
  Grid<double> values;
  Mask valid;

  DepthMap() = default;
  DepthMap(int rows, int cols, double fill = 1.0);
  DepthMap(Grid<double> values, Mask valid);

  int rows() const { return values.rows(); }
  int cols() const { return values.cols(); }
  bool is_valid(int r, int c) const { return valid(r, c) != 0; }

  /// Throws std::invalid_argument if a valid pixel is non-positive or any value non-finite.
  void check() const;
};

/// Bounds test shared by sampling, warping and correlation lookup. Coordinates
/// within 1e-9 of the border count as inside.
inline bool inside_image(double x, double y, int cols, int rows) {
  return x >= -1e-9 && y >= -1e-9 && x <= cols - 1 + 1e-9 && y <= rows - 1 + 1e-9;
}

/// Bilinear sample at continuous (x = column, y = row). Returns nullopt outside
/// [0, cols-1] x [0, rows-1]. Coordinates within 1e-9 of an integer snap to it.
std::optional<double> sample_bilinear(const Grid<double>& img, double x, double y);

struct WarpResult {
  Image image;
  Mask visible;
};

/// Samples the source image at the projection of every target pixel.
/// Invisible pixels (invalid depth, behind camera, out of bounds) are 0.
WarpResult warp_image(const Image& source, const DepthMap& depth, const PoseSE3& T,
                      const Intrinsics& K);

/// Projection visibility of every target pixel into a rows x cols source image.
Mask projection_visibility(const DepthMap& depth, const PoseSE3& T, const Intrinsics& K,
                           int source_rows, int source_cols);

}  // namespace mlesfm
