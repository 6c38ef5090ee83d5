#pragma once

#include <array>
#include <iosfwd>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "mlesfm/features.hpp"
#include "mlesfm/geometry.hpp"
#include "mlesfm/likelihood.hpp"

namespace mlesfm {

/// Smallest inverse depth any update or disturbance may produce.
inline constexpr double kMinInverseDepth = 1e-6;
/// Parameter order in difference maps and gradients.
enum Param { kDepth = 0, kRx, kRy, kRz, kTx, kTy, kTz, kParamCount };

/// Fixed probing disturbances used to read gradient information off the likelihood.
struct DisturbanceSet {
  /// Fractional inverse-depth change applied to every pixel at once.
  double depth_delta = 0.02;
  /// Radians added to one rotation coordinate.
  double rot_delta = 2e-3;
  /// Translation step relative to max(|t|, trans_norm_floor).
  double trans_delta = 0.01;
  double trans_norm_floor = 0.1;

  /// Throws std::invalid_argument unless all deltas are positive, rot_delta < 0.1
  /// and depth_delta < 0.5.
  void check() const;
  /// All magnitudes multiplied by s, without validation.
  DisturbanceSet scaled(double s) const;
  double translation_step(const Vec3& t) const;
};

enum class UncertaintyMode { heuristic, pinned };

UncertaintyMode parse_uncertainty_mode(const std::string& name);
std::string to_string(UncertaintyMode mode);

struct SolverConfig {
  int iterations = 8;
  DisturbanceSet disturbances;
  /// Pyramid level per iteration; empty selects the default coarse-to-fine split.
  std::vector<int> level_schedule;
  int max_halvings = 8;
  /// Initial line-search multipliers of the pose and depth directions.
  double pose_step_scale = 1.0;
  double depth_step_scale = 1.0;
  /// Trust-region caps on a single step.
  double max_rotation_step = 0.05;
  /// Relative to the median scene depth.
  double max_translation_step = 0.1;
  /// Fractional inverse-depth change per pixel.
  double max_depth_step = 0.2;
  /// Levenberg-style damping of the outer-product information matrix.
  double damping = 1e-3;
  /// Half-width, in level cells, of the correlation window searched for the
  /// match-based update direction; 0 disables it.
  int match_radius = 3;
  /// Gauss-Newton iterations of the match fit.
  int fit_iterations = 8;
  /// Depth smoothness of the match fit, see MatchFitOptions.
  double fit_smoothness = 1000.0;
  double fit_edge = 0.1;
  /// A step may not shrink the set of observed pixels below this fraction of
  /// its current size.
  double min_observed_ratio = 0.9;
  /// Refine every line-search candidate by a per-pixel inverse-depth search.
  bool depth_search = false;
  double init_depth = 10.0;
  /// Stop early when |l_n - l_{n-1}| falls below this; 0 runs every iteration.
  double tolerance = 0.0;
  UncertaintyMode uncertainty = UncertaintyMode::heuristic;
  UncertaintyHeuristic heuristic;
  DescriptorBackend backend;
  /// Source-view feature file for the external-file backend; `backend.external_path`
  /// holds the target-view file.
  std::filesystem::path source_features;
  PyramidOptions pyramid;

  void check() const;
  /// Level for 1-based iteration n.
  int level_for(int n) const;
};

/// Current estimate on the feature grid. Depth is held as inverse depth.
struct SolverState {
  Grid<double> inverse_depth;
  Mask valid;
  PoseVec6 pose;
  int iter = 0;
  double ll = 0.0;
  int level = kPyramidLevels - 1;

  SolverState() = default;
  SolverState(int rows, int cols, double depth);

  DepthMap depth() const;
};

/// Mean log-likelihood of the correlation observations under a fixed
/// uncertainty model and pyramid level.
class LikelihoodObjective {
 public:
  LikelihoodObjective(const CorrelationPyramid& pyramid, const UncertaintyMaps& uncertainty,
                      const Intrinsics& grid_intrinsics, int level);

  int level() const { return level_; }
  const Intrinsics& intrinsics() const { return K_; }
  const CorrelationPyramid& pyramid() const { return *pyramid_; }
  const UncertaintyMaps& uncertainty() const { return *uncertainty_; }

  LikelihoodMap evaluate(const Grid<double>& inverse_depth, const Mask& valid,
                         const PoseSE3& pose) const;
  double mean(const Grid<double>& inverse_depth, const Mask& valid, const PoseSE3& pose) const;
  /// Log density of one pixel; the pure-Uniform value when the projection fails.
  double pixel_log_density(int r, int c, double inverse_depth, const PoseSE3& pose) const;

 private:
  const CorrelationPyramid* pyramid_;
  const UncertaintyMaps* uncertainty_;
  Intrinsics K_;
  int level_;
};

/// Disturbed minus current log-density maps, one +/- pair per parameter.
struct DifferenceMaps {
  std::array<Grid<double>, kParamCount> plus;
  std::array<Grid<double>, kParamCount> minus;
  /// Disturbance magnitude actually applied to each parameter.
  std::array<double, kParamCount> delta{};
  /// Pixels observed at the current estimate.
  Mask observed;
  LikelihoodMap current;
};

DifferenceMaps difference_maps(const SolverState& state, const LikelihoodObjective& objective,
                               const DisturbanceSet& d);

/// Mean centered-difference pose gradient over observed pixels (6 entries).
Eigen::Matrix<double, 6, 1> pose_gradient(const DifferenceMaps& maps);

struct UpdateResult {
  SolverState state;
  bool stalled = false;
  double pose_step = 0.0;
  double depth_step = 0.0;
};

/// One block-coordinate ascent step: pose first, then per-pixel depth, each
/// behind a halving line search that never lowers the mean log-likelihood.
UpdateResult update_step(const SolverState& state, const DifferenceMaps& maps,
                         const LikelihoodObjective& objective, const SolverConfig& cfg);

struct MatchFit {
  PoseVec6 pose;
  /// Per-pixel log change of inverse depth relative to the input state.
  Grid<double> log_inverse_depth;
  /// Final robust (Huber) reprojection cost.
  double cost = 0.0;
};

/// Robust Gauss-Newton fit of pose and per-pixel inverse depth so that each
/// pixel projects onto its target location (pixels without a target are
/// ignored). The depth block is eliminated by its Schur complement and the
/// translation scale is held fixed when the input translation is non-zero.
struct MatchFitOptions {
  /// Huber threshold of the reprojection residual, in grid pixels.
  double huber = 1.0;
  int iterations = 8;
  /// Weight of the neighbor-difference prior on log inverse depth; 0 leaves
  /// every pixel free.
  double smoothness = 0.0;
  /// Huber threshold of that prior, so depth edges are not smoothed away.
  double edge = 0.1;
};

MatchFit fit_matches(const SolverState& state, const std::vector<std::optional<Vec2>>& targets,
                     const Intrinsics& K, const MatchFitOptions& options);

struct IterationDiagnostics {
  int iter = 0;
  int level = 0;
  double ll = 0.0;
  double step_pose = 0.0;
  double step_depth = 0.0;
  bool stalled = false;
};

/// `iter=<n> level=<k> ll=<float> step_pose=<float> step_depth=<float> stalled=<0|1>`
std::string format_diagnostics(const IterationDiagnostics& d);
void write_diagnostics(std::ostream& out, const std::vector<IterationDiagnostics>& diags);

struct SolveResult {
  /// Depth at input resolution.
  DepthMap depth;
  PoseSE3 pose;
  /// Final state on the feature grid.
  SolverState state;
  std::vector<IterationDiagnostics> diagnostics;
  /// Set when translation produces no measurable parallax.
  bool depth_unconstrained = false;
};

class IllConditionedError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Full two-view estimation from a target and source image with full-resolution intrinsics.
SolveResult solve(const Image& target, const Image& source, const Intrinsics& K,
                  const SolverConfig& cfg = {});

/// Bilinear upsampling of a feature-grid depth map to rows x cols using the
/// pixel-center convention. A pixel is valid when every contributing tap is.
DepthMap upsample_depth(const DepthMap& grid_depth, int factor, int rows, int cols);

}  // namespace mlesfm
