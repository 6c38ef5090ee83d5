#pragma once

#include <cstdint>
#include <stdexcept>

#include "mlesfm/geometry.hpp"
#include "mlesfm/grid.hpp"

namespace mlesfm {

enum class DepthModel { fronto_plane, slanted_plane, plane_plus_sphere };

DepthModel parse_depth_model(const std::string& name);
std::string to_string(DepthModel model);

/// Description of a synthetic two-view scene. Geometry lives in the target
/// camera frame.
struct SceneSpec {
  std::uint64_t seed = 1;
  int rows = 96;
  int cols = 128;
  /// Focal length in pixels; 0 selects fx = fy = cols.
  double focal = 0.0;

  DepthModel depth_model = DepthModel::slanted_plane;
  /// Depth of the plane along the optical axis.
  double plane_depth = 10.0;
  /// Plane normal for the slanted models (normalized internally; must face the camera).
  Vec3 plane_normal = Vec3(0.0, 0.0, 1.0);
  Vec3 sphere_center = Vec3(0.0, 0.0, 7.0);
  double sphere_radius = 1.5;

  /// Per-coordinate sampling bounds for the relative motion.
  PoseVec6 motion_min = PoseVec6(-0.02, -0.02, -0.02, -0.5, -0.5, -0.2);
  PoseVec6 motion_max = PoseVec6(0.02, 0.02, 0.02, 0.5, 0.5, 0.2);
  /// When positive, the sampled rotation vector is rescaled to this angle (degrees).
  double rotation_deg = 0.0;
  /// When positive, the sampled translation is rescaled to this norm.
  double translation_norm = 0.0;

  int texture_octaves = 4;
  /// Lattice spacing of the coarsest noise octave, in pixels.
  double texture_cell = 32.0;
  double texture_persistence = 0.6;
  /// Contrast around mid-gray after normalization to [0, 1].
  double texture_contrast = 1.0;

  double gain = 1.0;
  double bias = 0.0;
  double noise_std = 0.0;
  /// Fraction of the source image replaced by independently moving patches.
  double outlier_fraction = 0.0;
  int outlier_patch = 8;

  /// Throws std::invalid_argument on inconsistent fields.
  void check() const;
};

struct SyntheticPair {
  Image target;
  Image source;
  DepthMap depth;
  PoseSE3 pose;
  Intrinsics K;
  /// Target pixels whose surface point is seen, unoccluded, by the source camera.
  Mask visibility;
  /// Source pixels covered by outlier patches.
  Mask outliers;
};

class GenerationError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Renders a geometrically consistent pair. Throws GenerationError when no
/// motion with at least 70% visibility is found in 100 draws.
SyntheticPair gen_scene(const SceneSpec& spec);

struct ConsistencyReport {
  double mean_abs_error = 0.0;
  double max_abs_error = 0.0;
  double visible_fraction = 0.0;
  long pixels = 0;
};

/// Warps the source view back with the ground truth and compares it with the
/// target on the visible set.
ConsistencyReport verify_pair(const SyntheticPair& pair);

}  // namespace mlesfm
