#include <gtest/gtest.h>

#include <cmath>

#include "mlesfm/synth.hpp"

using namespace mlesfm;

namespace {

SceneSpec still_scene() {
  SceneSpec s;
  s.motion_min = PoseVec6();
  s.motion_max = PoseVec6();
  return s;
}

}  // namespace

TEST(GenScene, ZeroMotionCopiesTarget) {
  const SyntheticPair p = gen_scene(still_scene());
  EXPECT_EQ(p.source, p.target);
  const ConsistencyReport rep = verify_pair(p);
  EXPECT_EQ(rep.max_abs_error, 0.0);
  EXPECT_EQ(rep.visible_fraction, 1.0);
}

TEST(GenScene, FrontoPlaneDisparity) {
  SceneSpec s = still_scene();
  s.depth_model = DepthModel::fronto_plane;
  s.plane_depth = 10.0;
  s.motion_min[3] = s.motion_max[3] = 0.625;  // fx * b / d = 128 * 0.625 / 10 = 8 px
  const SyntheticPair p = gen_scene(s);
  ASSERT_DOUBLE_EQ(p.K.fx, 128.0);
  for (int r = 0; r < p.target.rows(); ++r) {
    for (int c = 0; c + 8 < p.target.cols(); ++c) {
      ASSERT_NEAR(p.source(r, c + 8), p.target(r, c), 1e-9) << r << ',' << c;
    }
  }
}

TEST(GenScene, SeedIsDeterministic) {
  SceneSpec s;
  s.seed = 42;
  s.noise_std = 0.02;
  s.outlier_fraction = 0.05;
  const SyntheticPair a = gen_scene(s), b = gen_scene(s);
  EXPECT_EQ(a.target, b.target);
  EXPECT_EQ(a.source, b.source);
  EXPECT_EQ(a.depth.values, b.depth.values);
  EXPECT_EQ(a.pose.rotation(), b.pose.rotation());
  s.seed = 43;
  EXPECT_NE(gen_scene(s).target, a.target);
}

TEST(GenScene, MotionRescaling) {
  SceneSpec s;
  s.rotation_deg = 3.0;
  s.translation_norm = 0.8;
  const SyntheticPair p = gen_scene(s);
  EXPECT_NEAR(rotation_angle(p.pose.rotation()) * 180 / M_PI, 3.0, 1e-9);
  EXPECT_NEAR(p.pose.translation().norm(), 0.8, 1e-12);
}

TEST(GenScene, OutlierCoverage) {
  SceneSpec s;
  s.outlier_fraction = 0.05;
  const SyntheticPair p = gen_scene(s);
  long n = 0;
  for (auto v : p.outliers.values()) n += v;
  const double N = static_cast<double>(p.outliers.size());
  EXPECT_NEAR(n / N, 0.05, s.outlier_patch * s.outlier_patch / N);
}

TEST(GenScene, SphereIsCloserThanPlane) {
  SceneSpec s;
  s.depth_model = DepthModel::plane_plus_sphere;
  const SyntheticPair p = gen_scene(s);
  // The sphere is centered on the optical axis.
  EXPECT_LT(p.depth.values(p.depth.rows() / 2, p.depth.cols() / 2), 7.0);
  EXPECT_NEAR(p.depth.values(0, 0), s.plane_depth, 1e-9);
}

TEST(GenScene, RejectsBadSpec) {
  SceneSpec s;
  s.rows = 32;
  EXPECT_THROW(gen_scene(s), std::invalid_argument);
  s = SceneSpec{};
  s.outlier_fraction = 0.7;
  EXPECT_THROW(gen_scene(s), std::invalid_argument);
}

TEST(VerifyPair, CleanPairIsConsistent) {
  for (unsigned seed = 1; seed <= 5; ++seed) {
    SceneSpec s;
    s.seed = seed;
    s.depth_model = seed % 2 ? DepthModel::slanted_plane : DepthModel::plane_plus_sphere;
    s.plane_normal = Vec3(0.2, -0.3, 1.0);
    const ConsistencyReport rep = verify_pair(gen_scene(s));
    EXPECT_LT(rep.mean_abs_error, 2.0 / 255) << seed;
    EXPECT_GE(rep.visible_fraction, 0.7);
  }
}

TEST(VerifyPair, NoiseShowsInError) {
  // Without motion the error is |noise|, whose mean is 0.05 * sqrt(2 / pi).
  SceneSpec s = still_scene();
  s.noise_std = 0.05;
  EXPECT_NEAR(verify_pair(gen_scene(s)).mean_abs_error, 0.0399, 0.003);
  // Bilinear resampling averages neighboring noise samples and lowers it.
  s = SceneSpec{};
  s.noise_std = 0.05;
  const double moving = verify_pair(gen_scene(s)).mean_abs_error;
  EXPECT_GE(moving, 0.02);
  EXPECT_LE(moving, 0.06);
}

TEST(DepthModel, ParsesNames) {
  EXPECT_EQ(parse_depth_model("plane-plus-sphere"), DepthModel::plane_plus_sphere);
  EXPECT_EQ(to_string(DepthModel::fronto_plane), "fronto-plane");
  EXPECT_THROW(parse_depth_model("cube"), std::invalid_argument);
}
