#pragma once

#include <filesystem>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "mlesfm/geometry.hpp"
#include "mlesfm/grid.hpp"

namespace mlesfm {

/// Ratio between input image and feature grid resolution.
inline constexpr int kFeatureStride = 4;
/// Number of correlation pyramid levels.
inline constexpr int kPyramidLevels = 3;

/// Box-filter downsampling by an integer factor; trailing rows/columns that do
/// not fill a whole block are dropped.
Image downsample_box(const Image& img, int factor);

enum class DescriptorKind { census, normalized_patch, external_file };

struct DescriptorBackend {
  DescriptorKind kind = DescriptorKind::census;
  /// Odd window side for census and patch descriptors.
  int window = 7;
  /// Intensity differences at or below this magnitude give a zero census component.
  double census_threshold = 1e-4;
  /// Feature file read by the external-file backend.
  std::filesystem::path external_path;

  /// Channel count this backend produces (external files report their own).
  int channels() const;
};

/// Parses "census", "normalized-patch" or "external-file".
DescriptorKind parse_descriptor_kind(const std::string& name);
std::string to_string(DescriptorKind kind);

/// Per-pixel descriptors on the quarter-resolution grid. Every descriptor is
/// either unit length or the zero vector.
class FeatureMap {
 public:
  FeatureMap() = default;
  FeatureMap(int rows, int cols, int channels);

  int rows() const { return rows_; }
  int cols() const { return cols_; }
  int channels() const { return channels_; }

  std::span<double> at(int r, int c);
  std::span<const double> at(int r, int c) const;

  bool is_zero(int r, int c) const;
  /// Fraction of pixels whose descriptor is the zero vector.
  double zero_fraction() const;

  /// Rescales every descriptor to unit length; zero vectors stay zero.
  void normalize();

  bool operator==(const FeatureMap&) const = default;

 private:
  int rows_ = 0;
  int cols_ = 0;
  int channels_ = 0;
  std::vector<double> data_;
};

/// Dense descriptors for an image of at least 16x16 pixels.
FeatureMap extract_features(const Image& img, const DescriptorBackend& backend);

/// Reads a `FEAT h w D` feature file and unit-normalizes it.
FeatureMap read_feature_file(const std::filesystem::path& path);
void write_feature_file(const std::filesystem::path& path, const FeatureMap& features);

struct PyramidOptions {
  /// Target grids with more pixels than this are served lazily.
  long dense_pixel_limit = 128L * 160L;
};

struct LookupResult {
  double value = 0.0;
  bool valid = false;
};

/// All-pairs correlation volume between two feature maps and its pooled
/// levels. Level k holds rows x cols x rows_k x cols_k entries where
/// rows_{k+1} = ceil(rows_k / 2); pooling is a 2x2 mean with edge replication.
class CorrelationPyramid {
 public:
  CorrelationPyramid(const FeatureMap& target, const FeatureMap& source,
                     const PyramidOptions& options = {});

  int rows() const { return rows_; }
  int cols() const { return cols_; }
  int level_rows(int k) const { return level_rows_[k]; }
  int level_cols(int k) const { return level_cols_[k]; }
  bool is_lazy() const { return lazy_; }

  /// V_k[i, j, a, b] for target pixel (i, j) and level-k source cell (a, b).
  double entry(int k, int i, int j, int a, int b) const;

  /// Bilinear lookup at the continuous level-0 source coordinate (x, y).
  /// The coordinate maps to level k by pixel-center scaling
  /// (x + 0.5) / 2^k - 0.5 and is clamped into the level's grid. Validity is
  /// decided on the level-0 grid so every level agrees with projection
  /// visibility.
  LookupResult lookup(int i, int j, double x, double y, int k) const;

 private:
  double pooled(int k, int i, int j, int a, int b) const;

  int rows_ = 0;
  int cols_ = 0;
  int channels_ = 0;
  bool lazy_ = false;
  int level_rows_[kPyramidLevels] = {};
  int level_cols_[kPyramidLevels] = {};
  std::vector<float> levels_[kPyramidLevels];
  std::shared_ptr<const FeatureMap> target_;
  std::shared_ptr<const FeatureMap> source_;
};

CorrelationPyramid build_pyramid(const FeatureMap& target, const FeatureMap& source,
                                 const PyramidOptions& options = {});

/// Correlation observation per target pixel; `valid` is false where the
/// projection failed or left the source grid.
struct CorrelationMap {
  Grid<double> values;
  Mask valid;
};

/// Looks up the correlation at the projection of every valid target pixel.
/// `depth` and `K` are expressed on the feature grid.
CorrelationMap correlation_map(const CorrelationPyramid& pyramid, const DepthMap& depth,
                               const PoseSE3& T, const Intrinsics& K, int level);

}  // namespace mlesfm
