#pragma once

#include <filesystem>
#include <stdexcept>
#include <string>
#include <vector>

#include "mlesfm/geometry.hpp"
#include "mlesfm/metrics.hpp"
#include "mlesfm/solver.hpp"
#include "mlesfm/synth.hpp"

namespace mlesfm {

/// Malformed or unreadable input file.
class FormatError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Grayscale little-endian PFM. Rows are stored bottom-to-top.
Grid<double> read_pfm(const std::filesystem::path& path);
void write_pfm(const std::filesystem::path& path, const Grid<double>& values);

/// Depth PFM: non-positive or non-finite values mark invalid pixels and are
/// written as 0.
DepthMap read_depth_pfm(const std::filesystem::path& path);
void write_depth_pfm(const std::filesystem::path& path, const DepthMap& depth);

/// One pose per line: 12 numbers, row-major [R | t].
std::vector<PoseSE3> read_poses(const std::filesystem::path& path);
PoseSE3 read_pose(const std::filesystem::path& path);
void write_poses(const std::filesystem::path& path, const std::vector<PoseSE3>& poses);
std::string format_pose(const PoseSE3& pose);
/// Parses one pose line; `line_no` is used in error messages.
PoseSE3 parse_pose_line(const std::string& line, int line_no);

/// Binary netpbm (P5 grayscale, P6 color) with maxval 255 or 65535,
/// normalized to [0, 1]. Color is converted with Rec. 601 luma weights.
Image read_image(const std::filesystem::path& path);
/// Writes P5 with the given maxval (255 or 65535); values are clamped to [0, 1].
void write_pgm(const std::filesystem::path& path, const Image& img, int maxval = 65535);
/// Writes a 0/1 mask as an 8-bit P5 image (0 or 255).
void write_mask_pgm(const std::filesystem::path& path, const Mask& mask);

/// Text file `fx fy cx cy`.
Intrinsics read_intrinsics(const std::filesystem::path& path);
void write_intrinsics(const std::filesystem::path& path, const Intrinsics& K);

/// Everything a run can be configured with through a `key = value` file.
struct RunConfig {
  SolverConfig solver;
  SceneSpec scene;
  LossConfig loss;
};

/// Parses `key = value` lines; `#` starts a comment. Unknown keys and
/// ill-typed values raise FormatError naming the line.
RunConfig parse_run_config(const std::string& text, RunConfig base = {});
RunConfig load_run_config(const std::filesystem::path& path, RunConfig base = {});
/// Serializes the scene part of a configuration.
std::string format_scene_spec(const SceneSpec& spec);

}  // namespace mlesfm
