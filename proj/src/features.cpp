#include "mlesfm/features.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <sstream>
#include <stdexcept>

namespace mlesfm {

Image downsample_box(const Image& img, int factor) {
  if (factor <= 0) throw std::invalid_argument("downsample_box: factor must be positive");
  const int h = img.rows() / factor;
  const int w = img.cols() / factor;
  Image out(h, w, 0.0);
  const double norm = 1.0 / (factor * factor);
  for (int r = 0; r < h; ++r) {
    for (int c = 0; c < w; ++c) {
      double sum = 0.0;
      for (int dr = 0; dr < factor; ++dr) {
        for (int dc = 0; dc < factor; ++dc) sum += img(r * factor + dr, c * factor + dc);
      }
      out(r, c) = sum * norm;
    }
  }
  return out;
}

int DescriptorBackend::channels() const {
  switch (kind) {
    case DescriptorKind::census: return window * window - 1;
    case DescriptorKind::normalized_patch: return window * window;
    case DescriptorKind::external_file: return 0;
  }
  return 0;
}

DescriptorKind parse_descriptor_kind(const std::string& name) {
  if (name == "census") return DescriptorKind::census;
  if (name == "normalized-patch") return DescriptorKind::normalized_patch;
  if (name == "external-file") return DescriptorKind::external_file;
  throw std::invalid_argument("unknown descriptor backend '" + name +
                              "' (expected census, normalized-patch or external-file)");
}

std::string to_string(DescriptorKind kind) {
  switch (kind) {
    case DescriptorKind::census: return "census";
    case DescriptorKind::normalized_patch: return "normalized-patch";
    case DescriptorKind::external_file: return "external-file";
  }
  return "?";
}

FeatureMap::FeatureMap(int rows, int cols, int channels)
    : rows_(rows), cols_(cols), channels_(channels) {
  if (rows <= 0 || cols <= 0 || channels <= 0) {
    throw std::invalid_argument("FeatureMap: dimensions must be positive");
  }
  data_.assign(static_cast<std::size_t>(rows) * cols * channels, 0.0);
}

std::span<double> FeatureMap::at(int r, int c) {
  return {data_.data() + (static_cast<std::size_t>(r) * cols_ + c) * channels_,
          static_cast<std::size_t>(channels_)};
}

std::span<const double> FeatureMap::at(int r, int c) const {
  return {data_.data() + (static_cast<std::size_t>(r) * cols_ + c) * channels_,
          static_cast<std::size_t>(channels_)};
}

bool FeatureMap::is_zero(int r, int c) const {
  const auto d = at(r, c);
  return std::all_of(d.begin(), d.end(), [](double v) { return v == 0.0; });
}

double FeatureMap::zero_fraction() const {
  if (rows_ == 0 || cols_ == 0) return 1.0;
  long zeros = 0;
  for (int r = 0; r < rows_; ++r) {
    for (int c = 0; c < cols_; ++c) zeros += is_zero(r, c) ? 1 : 0;
  }
  return static_cast<double>(zeros) / (static_cast<double>(rows_) * cols_);
}

void FeatureMap::normalize() {
  for (int r = 0; r < rows_; ++r) {
    for (int c = 0; c < cols_; ++c) {
      auto d = at(r, c);
      double sq = 0.0;
      for (double v : d) sq += v * v;
      if (sq <= 0.0 || !std::isfinite(sq)) {
        std::fill(d.begin(), d.end(), 0.0);
        continue;
      }
      const double inv = 1.0 / std::sqrt(sq);
      for (double& v : d) v *= inv;
    }
  }
}

namespace {

double clamped(const Image& img, int r, int c) {
  r = std::clamp(r, 0, img.rows() - 1);
  c = std::clamp(c, 0, img.cols() - 1);
  return img(r, c);
}

FeatureMap census_features(const Image& small, const DescriptorBackend& backend) {
  const int half = backend.window / 2;
  FeatureMap out(small.rows(), small.cols(), backend.channels());
  for (int r = 0; r < small.rows(); ++r) {
    for (int c = 0; c < small.cols(); ++c) {
      const double center = small(r, c);
      auto d = out.at(r, c);
      int k = 0;
      for (int dr = -half; dr <= half; ++dr) {
        for (int dc = -half; dc <= half; ++dc) {
          if (dr == 0 && dc == 0) continue;
          const double diff = clamped(small, r + dr, c + dc) - center;
          d[k++] = diff > backend.census_threshold ? 1.0
                   : diff < -backend.census_threshold ? -1.0
                                                      : 0.0;
        }
      }
    }
  }
  out.normalize();
  return out;
}

FeatureMap patch_features(const Image& small, const DescriptorBackend& backend) {
  const int half = backend.window / 2;
  FeatureMap out(small.rows(), small.cols(), backend.channels());
  std::vector<double> patch(static_cast<std::size_t>(backend.channels()));
  for (int r = 0; r < small.rows(); ++r) {
    for (int c = 0; c < small.cols(); ++c) {
      std::size_t k = 0;
      double mean = 0.0;
      for (int dr = -half; dr <= half; ++dr) {
        for (int dc = -half; dc <= half; ++dc) {
          patch[k] = clamped(small, r + dr, c + dc);
          mean += patch[k++];
        }
      }
      mean /= static_cast<double>(patch.size());
      double var = 0.0;
      for (double v : patch) var += (v - mean) * (v - mean);
      auto d = out.at(r, c);
      // Flat patches carry no structure; leave them as zero vectors.
      if (var / static_cast<double>(patch.size()) < 1e-12) continue;
      for (std::size_t i = 0; i < patch.size(); ++i) d[i] = patch[i] - mean;
    }
  }
  out.normalize();
  return out;
}

}  // namespace

FeatureMap extract_features(const Image& img, const DescriptorBackend& backend) {
  if (img.rows() < 16 || img.cols() < 16) {
    throw std::invalid_argument("extract_features: image must be at least 16x16, got " +
                                std::to_string(img.rows()) + "x" + std::to_string(img.cols()));
  }
  if (backend.kind != DescriptorKind::external_file &&
      (backend.window < 3 || backend.window % 2 == 0)) {
    throw std::invalid_argument("extract_features: descriptor window must be odd and >= 3");
  }
  switch (backend.kind) {
    case DescriptorKind::census:
      return census_features(downsample_box(img, kFeatureStride), backend);
    case DescriptorKind::normalized_patch:
      return patch_features(downsample_box(img, kFeatureStride), backend);
    case DescriptorKind::external_file: {
      FeatureMap f = read_feature_file(backend.external_path);
      const int h = img.rows() / kFeatureStride;
      const int w = img.cols() / kFeatureStride;
      if (f.rows() != h || f.cols() != w) {
        throw std::invalid_argument("extract_features: feature file " +
                                    backend.external_path.string() + " is " +
                                    std::to_string(f.rows()) + "x" + std::to_string(f.cols()) +
                                    ", expected " + std::to_string(h) + "x" + std::to_string(w));
      }
      return f;
    }
  }
  throw std::invalid_argument("extract_features: unknown backend");
}

FeatureMap read_feature_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open feature file " + path.string());
  std::string header;
  if (!std::getline(in, header)) throw std::runtime_error("feature file " + path.string() + ": empty");
  std::istringstream hs(header);
  std::string magic;
  long h = 0, w = 0, d = 0;
  if (!(hs >> magic >> h >> w >> d) || magic != "FEAT" || h <= 0 || w <= 0 || d <= 0) {
    throw std::runtime_error("feature file " + path.string() + ": malformed header '" + header +
                             "' (expected 'FEAT h w D')");
  }
  std::string rest;
  if (hs >> rest) throw std::runtime_error("feature file " + path.string() + ": trailing header tokens");
  FeatureMap out(static_cast<int>(h), static_cast<int>(w), static_cast<int>(d));
  const std::size_t count = static_cast<std::size_t>(h * w * d);
  std::vector<unsigned char> bytes(count * 4);
  in.read(reinterpret_cast<char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (static_cast<std::size_t>(in.gcount()) != bytes.size()) {
    throw std::runtime_error("feature file " + path.string() + ": truncated payload");
  }
  std::size_t k = 0;
  for (int r = 0; r < h; ++r) {
    for (int c = 0; c < w; ++c) {
      for (double& v : out.at(r, c)) {
        std::uint32_t u = 0;
        for (int b = 3; b >= 0; --b) u = (u << 8) | bytes[4 * k + b];
        const float f = std::bit_cast<float>(u);
        if (!std::isfinite(f)) {
          throw std::runtime_error("feature file " + path.string() + ": non-finite value");
        }
        v = f;
        ++k;
      }
    }
  }
  out.normalize();
  return out;
}

void write_feature_file(const std::filesystem::path& path, const FeatureMap& features) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write feature file " + path.string());
  out << "FEAT " << features.rows() << ' ' << features.cols() << ' ' << features.channels() << '\n';
  for (int r = 0; r < features.rows(); ++r) {
    for (int c = 0; c < features.cols(); ++c) {
      for (double v : features.at(r, c)) {
        const auto u = std::bit_cast<std::uint32_t>(static_cast<float>(v));
        const char b[4] = {static_cast<char>(u & 0xff), static_cast<char>((u >> 8) & 0xff),
                           static_cast<char>((u >> 16) & 0xff), static_cast<char>(u >> 24)};
        out.write(b, 4);
      }
    }
  }
  if (!out) throw std::runtime_error("failed writing feature file " + path.string());
}

namespace {

double dot(std::span<const double> a, std::span<const double> b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

}  // namespace

CorrelationPyramid::CorrelationPyramid(const FeatureMap& target, const FeatureMap& source,
                                       const PyramidOptions& options) {
  if (target.rows() != source.rows() || target.cols() != source.cols() ||
      target.channels() != source.channels()) {
    throw std::invalid_argument("build_pyramid: feature maps differ in shape");
  }
  if (target.rows() == 0) throw std::invalid_argument("build_pyramid: empty feature maps");
  rows_ = target.rows();
  cols_ = target.cols();
  channels_ = target.channels();
  level_rows_[0] = rows_;
  level_cols_[0] = cols_;
  for (int k = 1; k < kPyramidLevels; ++k) {
    level_rows_[k] = (level_rows_[k - 1] + 1) / 2;
    level_cols_[k] = (level_cols_[k - 1] + 1) / 2;
  }
  lazy_ = static_cast<long>(rows_) * cols_ > options.dense_pixel_limit;
  if (lazy_) {
    target_ = std::make_shared<const FeatureMap>(target);
    source_ = std::make_shared<const FeatureMap>(source);
    return;
  }

  const std::size_t n = static_cast<std::size_t>(rows_) * cols_;
  levels_[0].resize(n * n);
  for (int i = 0; i < rows_; ++i) {
    for (int j = 0; j < cols_; ++j) {
      const auto ft = target.at(i, j);
      float* row = levels_[0].data() + (static_cast<std::size_t>(i) * cols_ + j) * n;
      for (int a = 0; a < rows_; ++a) {
        for (int b = 0; b < cols_; ++b) row[a * cols_ + b] = static_cast<float>(dot(ft, source.at(a, b)));
      }
    }
  }
  for (int k = 1; k < kPyramidLevels; ++k) {
    const int pr = level_rows_[k - 1], pc = level_cols_[k - 1];
    const int lr = level_rows_[k], lc = level_cols_[k];
    const std::size_t prev_stride = static_cast<std::size_t>(pr) * pc;
    const std::size_t stride = static_cast<std::size_t>(lr) * lc;
    levels_[k].resize(n * stride);
    for (std::size_t t = 0; t < n; ++t) {
      const float* prev = levels_[k - 1].data() + t * prev_stride;
      float* cur = levels_[k].data() + t * stride;
      for (int a = 0; a < lr; ++a) {
        const int a0 = 2 * a, a1 = std::min(2 * a + 1, pr - 1);
        for (int b = 0; b < lc; ++b) {
          const int b0 = 2 * b, b1 = std::min(2 * b + 1, pc - 1);
          const double s = static_cast<double>(prev[a0 * pc + b0]) + prev[a0 * pc + b1] +
                           prev[a1 * pc + b0] + prev[a1 * pc + b1];
          cur[a * lc + b] = static_cast<float>(0.25 * s);
        }
      }
    }
  }
}

double CorrelationPyramid::pooled(int k, int i, int j, int a, int b) const {
  if (k == 0) return dot(target_->at(i, j), source_->at(a, b));
  const int pr = level_rows_[k - 1], pc = level_cols_[k - 1];
  const int a0 = 2 * a, a1 = std::min(2 * a + 1, pr - 1);
  const int b0 = 2 * b, b1 = std::min(2 * b + 1, pc - 1);
  return 0.25 * (pooled(k - 1, i, j, a0, b0) + pooled(k - 1, i, j, a0, b1) +
                 pooled(k - 1, i, j, a1, b0) + pooled(k - 1, i, j, a1, b1));
}

double CorrelationPyramid::entry(int k, int i, int j, int a, int b) const {
  if (lazy_) return pooled(k, i, j, a, b);
  const std::size_t t = static_cast<std::size_t>(i) * cols_ + j;
  const std::size_t stride = static_cast<std::size_t>(level_rows_[k]) * level_cols_[k];
  return levels_[k][t * stride + static_cast<std::size_t>(a) * level_cols_[k] + b];
}

LookupResult CorrelationPyramid::lookup(int i, int j, double x, double y, int k) const {
  if (k < 0 || k >= kPyramidLevels || i < 0 || i >= rows_ || j < 0 || j >= cols_) return {};
  if (!std::isfinite(x) || !std::isfinite(y) || !inside_image(x, y, cols_, rows_)) return {};
  const int lr = level_rows_[k], lc = level_cols_[k];
  const double scale = 1.0 / static_cast<double>(1 << k);
  double xk = (x + 0.5) * scale - 0.5;
  double yk = (y + 0.5) * scale - 0.5;
  if (k == 0) {
    const double xr = std::round(xk), yr = std::round(yk);
    if (std::abs(xk - xr) < 1e-9) xk = xr;
    if (std::abs(yk - yr) < 1e-9) yk = yr;
  }
  xk = std::clamp(xk, 0.0, static_cast<double>(lc - 1));
  yk = std::clamp(yk, 0.0, static_cast<double>(lr - 1));
  const int x0 = std::min(static_cast<int>(std::floor(xk)), lc - 1);
  const int y0 = std::min(static_cast<int>(std::floor(yk)), lr - 1);
  const int x1 = std::min(x0 + 1, lc - 1);
  const int y1 = std::min(y0 + 1, lr - 1);
  const double fx = xk - x0;
  const double fy = yk - y0;
  if (fx == 0.0 && fy == 0.0) return {entry(k, i, j, y0, x0), true};
  const double top = entry(k, i, j, y0, x0) * (1.0 - fx) + entry(k, i, j, y0, x1) * fx;
  const double bottom = entry(k, i, j, y1, x0) * (1.0 - fx) + entry(k, i, j, y1, x1) * fx;
  return {top * (1.0 - fy) + bottom * fy, true};
}

CorrelationPyramid build_pyramid(const FeatureMap& target, const FeatureMap& source,
                                 const PyramidOptions& options) {
  return CorrelationPyramid(target, source, options);
}

CorrelationMap correlation_map(const CorrelationPyramid& pyramid, const DepthMap& depth,
                               const PoseSE3& T, const Intrinsics& K, int level) {
  if (depth.rows() != pyramid.rows() || depth.cols() != pyramid.cols()) {
    throw std::invalid_argument("correlation_map: depth map does not match the feature grid");
  }
  if (level < 0 || level >= kPyramidLevels) throw std::invalid_argument("correlation_map: bad level");
  CorrelationMap out{Grid<double>(depth.rows(), depth.cols(), 0.0), Mask(depth.rows(), depth.cols(), 0)};
  for (int r = 0; r < depth.rows(); ++r) {
    for (int c = 0; c < depth.cols(); ++c) {
      if (!depth.is_valid(r, c)) continue;
      const auto proj = project(Vec2(c, r), depth.values(r, c), T, K);
      if (!proj) continue;
      const LookupResult hit = pyramid.lookup(r, c, proj->pixel.x(), proj->pixel.y(), level);
      if (!hit.valid) continue;
      out.values(r, c) = hit.value;
      out.valid(r, c) = 1;
    }
  }
  return out;
}

}  // namespace mlesfm
