#include "mlesfm/synth.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>
#include <optional>
#include <random>
#include <string>
#include <vector>

namespace mlesfm {

DepthModel parse_depth_model(const std::string& name) {
  if (name == "fronto-plane") return DepthModel::fronto_plane;
  if (name == "slanted-plane") return DepthModel::slanted_plane;
  if (name == "plane-plus-sphere") return DepthModel::plane_plus_sphere;
  throw std::invalid_argument("unknown depth model '" + name +
                              "' (expected fronto-plane, slanted-plane or plane-plus-sphere)");
}

std::string to_string(DepthModel model) {
  switch (model) {
    case DepthModel::fronto_plane: return "fronto-plane";
    case DepthModel::slanted_plane: return "slanted-plane";
    case DepthModel::plane_plus_sphere: return "plane-plus-sphere";
  }
  return "?";
}

void SceneSpec::check() const {
  if (rows < 64 || cols < 64) throw std::invalid_argument("SceneSpec: image must be at least 64x64");
  if (focal < 0.0 || !std::isfinite(focal)) throw std::invalid_argument("SceneSpec: bad focal length");
  if (!(plane_depth > 0.0)) throw std::invalid_argument("SceneSpec: plane depth must be positive");
  if (depth_model != DepthModel::fronto_plane && !(plane_normal.norm() > 0.0)) {
    throw std::invalid_argument("SceneSpec: plane normal must be non-zero");
  }
  if (depth_model == DepthModel::plane_plus_sphere && !(sphere_radius > 0.0)) {
    throw std::invalid_argument("SceneSpec: sphere radius must be positive");
  }
  for (int i = 0; i < 6; ++i) {
    if (!(motion_min[i] <= motion_max[i])) throw std::invalid_argument("SceneSpec: motion bounds inverted");
  }
  if (texture_octaves < 1 || !(texture_cell >= 1.0)) throw std::invalid_argument("SceneSpec: bad texture");
  if (!(texture_contrast > 0.0)) throw std::invalid_argument("SceneSpec: contrast must be positive");
  if (noise_std < 0.0) throw std::invalid_argument("SceneSpec: negative noise");
  if (outlier_fraction < 0.0 || outlier_fraction > 0.5) {
    throw std::invalid_argument("SceneSpec: outlier fraction must lie in [0, 0.5]");
  }
  if (outlier_patch < 1) throw std::invalid_argument("SceneSpec: outlier patch must be positive");
}

namespace {

std::uint64_t splitmix(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

/// Multi-octave value noise over the whole plane, bilinear between lattice nodes.
class ValueNoise {
 public:
  ValueNoise(std::uint64_t seed, int octaves, double cell, double persistence)
      : seed_(splitmix(seed ^ 0x7e57u)), octaves_(octaves), cell_(cell), persistence_(persistence) {}

  double operator()(double x, double y) const {
    double sum = 0.0, amp = 1.0, cell = cell_;
    for (int o = 0; o < octaves_; ++o) {
      sum += amp * octave(o, x / cell, y / cell);
      amp *= persistence_;
      cell *= 0.5;
    }
    return sum;
  }

 private:
  double node(int o, long ix, long iy) const {
    std::uint64_t h = splitmix(seed_ + static_cast<std::uint64_t>(o) * 0x632be59bd9b4e019ULL);
    h = splitmix(h ^ static_cast<std::uint64_t>(ix));
    h = splitmix(h ^ static_cast<std::uint64_t>(iy) * 0x9e3779b97f4a7c15ULL);
    return static_cast<double>(h >> 11) * 0x1.0p-53;
  }

  double octave(int o, double u, double v) const {
    const double fu = std::floor(u), fv = std::floor(v);
    const long iu = static_cast<long>(fu), iv = static_cast<long>(fv);
    const double a = u - fu, b = v - fv;
    const double top = node(o, iu, iv) * (1.0 - a) + node(o, iu + 1, iv) * a;
    const double bot = node(o, iu, iv + 1) * (1.0 - a) + node(o, iu + 1, iv + 1) * a;
    return top * (1.0 - b) + bot * b;
  }

  std::uint64_t seed_;
  int octaves_;
  double cell_;
  double persistence_;
};

/// Analytic scene surfaces in the target camera frame.
class Scene {
 public:
  explicit Scene(const SceneSpec& spec) : spec_(spec) {
    normal_ = spec.depth_model == DepthModel::fronto_plane ? Vec3(0, 0, 1) : spec.plane_normal.normalized();
    if (normal_.z() < 0.0) normal_ = -normal_;
    offset_ = normal_.dot(Vec3(0.0, 0.0, spec.plane_depth));
  }

  /// Smallest positive ray parameter along origin + s * dir hitting a surface.
  std::optional<double> intersect(const Vec3& origin, const Vec3& dir) const {
    std::optional<double> best;
    const double denom = normal_.dot(dir);
    if (std::abs(denom) > 1e-12) {
      const double s = (offset_ - normal_.dot(origin)) / denom;
      if (s > 1e-9) best = s;
    }
    if (spec_.depth_model == DepthModel::plane_plus_sphere) {
      const Vec3 oc = origin - spec_.sphere_center;
      const double a = dir.squaredNorm();
      const double b = 2.0 * oc.dot(dir);
      const double c = oc.squaredNorm() - spec_.sphere_radius * spec_.sphere_radius;
      const double disc = b * b - 4.0 * a * c;
      if (disc >= 0.0) {
        const double sq = std::sqrt(disc);
        for (double s : {(-b - sq) / (2.0 * a), (-b + sq) / (2.0 * a)}) {
          if (s > 1e-9) {
            if (!best || s < *best) best = s;
            break;
          }
        }
      }
    }
    return best;
  }

 private:
  const SceneSpec& spec_;
  Vec3 normal_;
  double offset_ = 0.0;
};

Vec3 pixel_ray(const Intrinsics& K, double x, double y) {
  return {(x - K.cx) / K.fx, (y - K.cy) / K.fy, 1.0};
}

PoseVec6 sample_motion(const SceneSpec& spec, std::mt19937_64& rng) {
  PoseVec6 v;
  for (int i = 0; i < 6; ++i) {
    std::uniform_real_distribution<double> u(spec.motion_min[i], spec.motion_max[i]);
    v[i] = spec.motion_min[i] == spec.motion_max[i] ? spec.motion_min[i] : u(rng);
  }
  std::normal_distribution<double> n01(0.0, 1.0);
  auto rescale = [&](int first, double target) {
    if (!(target > 0.0)) return;
    Vec3 part(v[first], v[first + 1], v[first + 2]);
    while (part.norm() < 1e-12) part = Vec3(n01(rng), n01(rng), n01(rng));
    part *= target / part.norm();
    for (int i = 0; i < 3; ++i) v[first + i] = part[i];
  };
  rescale(0, spec.rotation_deg * std::numbers::pi / 180.0);
  rescale(3, spec.translation_norm);
  return v;
}

}  // namespace

SyntheticPair gen_scene(const SceneSpec& spec) {
  spec.check();
  const int h = spec.rows, w = spec.cols;
  const double f = spec.focal > 0.0 ? spec.focal : static_cast<double>(w);
  const Intrinsics K(f, f, 0.5 * (w - 1), 0.5 * (h - 1));
  const Scene scene(spec);
  const ValueNoise noise(spec.seed, spec.texture_octaves, spec.texture_cell, spec.texture_persistence);

  SyntheticPair pair;
  pair.K = K;

  // Texture lives on the target image plane; normalize its range over the target view.
  Image raw(h, w);
  double lo = std::numeric_limits<double>::infinity(), hi = -lo;
  for (int r = 0; r < h; ++r) {
    for (int c = 0; c < w; ++c) {
      raw(r, c) = noise(c, r);
      lo = std::min(lo, raw(r, c));
      hi = std::max(hi, raw(r, c));
    }
  }
  const double span = hi > lo ? hi - lo : 1.0;
  auto texture = [&](double x, double y) {
    const double v = (noise(x, y) - lo) / span;
    return std::clamp(0.5 + spec.texture_contrast * (v - 0.5), 0.0, 1.0);
  };
  pair.target = Image(h, w);
  for (int r = 0; r < h; ++r) {
    for (int c = 0; c < w; ++c) pair.target(r, c) = texture(c, r);
  }

  pair.depth = DepthMap(h, w, 1.0);
  for (int r = 0; r < h; ++r) {
    for (int c = 0; c < w; ++c) {
      const auto s = scene.intersect(Vec3::Zero(), pixel_ray(K, c, r));
      if (!s) throw GenerationError("gen_scene: target ray misses every surface; check the plane normal");
      pair.depth.values(r, c) = *s;
    }
  }

  std::mt19937_64 rng(splitmix(spec.seed));
  bool found = false;
  for (int attempt = 0; attempt < 100 && !found; ++attempt) {
    const PoseSE3 T = exp_map(sample_motion(spec, rng));
    const Vec3 src_origin = -(T.rotation().transpose() * T.translation());
    Mask vis(h, w, 0);
    long count = 0;
    for (int r = 0; r < h; ++r) {
      for (int c = 0; c < w; ++c) {
        const auto proj = project(Vec2(c, r), pair.depth.values(r, c), T, K);
        if (!proj || !inside_image(proj->pixel.x(), proj->pixel.y(), w, h)) continue;
        const Vec3 X = pair.depth.values(r, c) * pixel_ray(K, c, r);
        const Vec3 dir = X - src_origin;
        const auto hit = scene.intersect(src_origin, dir);
        if (!hit || *hit < 1.0 - 1e-6) continue;
        vis(r, c) = 1;
        ++count;
      }
    }
    if (count >= 0.7 * h * w) {
      pair.pose = T;
      pair.visibility = std::move(vis);
      found = true;
    }
  }
  if (!found) throw GenerationError("gen_scene: no motion keeps 70% of pixels visible after 100 draws");

  // Backward rendering: intersect each source ray with the scene and read the texture.
  const PoseSE3 to_target = pair.pose.inverse();
  pair.source = Image(h, w, 0.5);
  for (int r = 0; r < h; ++r) {
    for (int c = 0; c < w; ++c) {
      const Vec3 origin = to_target.translation();
      const Vec3 dir = to_target.rotation() * pixel_ray(K, c, r);
      const auto s = scene.intersect(origin, dir);
      Vec3 X;
      if (s) {
        X = origin + *s * dir;
      } else if (dir.z() > 0.0) {
        X = dir;  // point at infinity along the ray
      } else {
        continue;
      }
      if (X.z() <= kMinProjectedDepth) continue;
      double x = K.fx * X.x() / X.z() + K.cx;
      double y = K.fy * X.y() / X.z() + K.cy;
      if (std::abs(x - std::round(x)) < 1e-9) x = std::round(x);
      if (std::abs(y - std::round(y)) < 1e-9) y = std::round(y);
      pair.source(r, c) = texture(x, y);
    }
  }

  pair.outliers = Mask(h, w, 0);
  if (spec.outlier_fraction > 0.0) {
    const int P = spec.outlier_patch;
    const int grid_r = h / P, grid_c = w / P;
    const long want = std::lround(spec.outlier_fraction * h * w / (static_cast<double>(P) * P));
    std::vector<int> cells(static_cast<std::size_t>(grid_r) * grid_c);
    for (std::size_t i = 0; i < cells.size(); ++i) cells[i] = static_cast<int>(i);
    std::mt19937_64 prng(splitmix(spec.seed ^ 0x0b1ec7ULL));
    std::shuffle(cells.begin(), cells.end(), prng);
    const long n = std::min<long>(want, static_cast<long>(cells.size()));
    std::uniform_real_distribution<double> shift(0.25 * w, 0.5 * w);
    std::bernoulli_distribution flip(0.5);
    for (long i = 0; i < n; ++i) {
      const int r0 = (cells[i] / grid_c) * P, c0 = (cells[i] % grid_c) * P;
      const double ox = flip(prng) ? shift(prng) : -shift(prng);
      const double oy = flip(prng) ? shift(prng) : -shift(prng);
      for (int r = r0; r < r0 + P; ++r) {
        for (int c = c0; c < c0 + P; ++c) {
          pair.source(r, c) = texture(c + ox, r + oy);
          pair.outliers(r, c) = 1;
        }
      }
    }
  }

  if (spec.gain != 1.0 || spec.bias != 0.0 || spec.noise_std > 0.0) {
    for (int r = 0; r < h; ++r) {
      std::mt19937_64 row_rng(splitmix(spec.seed * 0x100000001b3ULL + static_cast<std::uint64_t>(r)));
      std::normal_distribution<double> gauss(0.0, spec.noise_std > 0.0 ? spec.noise_std : 1.0);
      for (int c = 0; c < w; ++c) {
        double v = spec.gain * pair.source(r, c) + spec.bias;
        if (spec.noise_std > 0.0) v += gauss(row_rng);
        pair.source(r, c) = std::clamp(v, 0.0, 1.0);
      }
    }
  }
  return pair;
}

ConsistencyReport verify_pair(const SyntheticPair& pair) {
  const WarpResult warped = warp_image(pair.source, pair.depth, pair.pose, pair.K);
  ConsistencyReport report;
  double sum = 0.0;
  for (int r = 0; r < pair.target.rows(); ++r) {
    for (int c = 0; c < pair.target.cols(); ++c) {
      if (!warped.visible(r, c)) continue;
      if (!pair.visibility.empty() && !pair.visibility(r, c)) continue;
      const double e = std::abs(warped.image(r, c) - pair.target(r, c));
      sum += e;
      report.max_abs_error = std::max(report.max_abs_error, e);
      ++report.pixels;
    }
  }
  report.mean_abs_error = report.pixels > 0 ? sum / report.pixels : 0.0;
  report.visible_fraction =
      static_cast<double>(report.pixels) / (static_cast<double>(pair.target.rows()) * pair.target.cols());
  return report;
}

}  // namespace mlesfm
