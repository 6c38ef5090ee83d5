#include "mlesfm/io.hpp"

#include <bit>
#include <charconv>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <functional>
#include <map>
#include <sstream>

namespace mlesfm {

namespace {

std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write_file(const std::filesystem::path& path, const std::string& bytes) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw std::runtime_error("failed writing " + path.string());
}

/// Cursor over a netpbm/PFM header: whitespace-separated tokens, `#` comments.
class HeaderReader {
 public:
  HeaderReader(const std::string& bytes, std::string name) : b_(bytes), name_(std::move(name)) {}

  std::string token() {
    skip_space();
    std::size_t start = pos_;
    while (pos_ < b_.size() && !std::isspace(static_cast<unsigned char>(b_[pos_]))) ++pos_;
    if (start == pos_) throw FormatError(name_ + ": truncated header");
    return b_.substr(start, pos_ - start);
  }

  long integer() {
    const std::string t = token();
    long v = 0;
    auto [p, ec] = std::from_chars(t.data(), t.data() + t.size(), v);
    if (ec != std::errc() || p != t.data() + t.size()) throw FormatError(name_ + ": bad header field '" + t + "'");
    return v;
  }

  /// Consumes the single whitespace byte separating header and payload.
  std::size_t payload_start() {
    if (pos_ >= b_.size() || !std::isspace(static_cast<unsigned char>(b_[pos_]))) {
      throw FormatError(name_ + ": missing separator before payload");
    }
    return pos_ + 1;
  }

 private:
  void skip_space() {
    while (pos_ < b_.size()) {
      if (b_[pos_] == '#') {
        while (pos_ < b_.size() && b_[pos_] != '\n') ++pos_;
      } else if (std::isspace(static_cast<unsigned char>(b_[pos_]))) {
        ++pos_;
      } else {
        break;
      }
    }
  }

  const std::string& b_;
  std::string name_;
  std::size_t pos_ = 0;
};

double parse_double(const std::string& s, const std::string& what) {
  double v = 0.0;
  auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc() || p != s.data() + s.size() || !std::isfinite(v)) {
    throw FormatError(what + ": '" + s + "' is not a finite number");
  }
  return v;
}

void put_f32_le(std::string& out, float f) {
  const auto u = std::bit_cast<std::uint32_t>(f);
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((u >> (8 * i)) & 0xff));
}

float get_f32_le(const std::string& b, std::size_t at) {
  std::uint32_t u = 0;
  for (int i = 3; i >= 0; --i) u = (u << 8) | static_cast<unsigned char>(b[at + i]);
  return std::bit_cast<float>(u);
}

}  // namespace

Grid<double> read_pfm(const std::filesystem::path& path) {
  const std::string bytes = read_file(path);
  const std::string name = path.string();
  HeaderReader hdr(bytes, name);
  const std::string magic = hdr.token();
  if (magic == "PF") throw FormatError(name + ": color PFM (PF) is not supported; expected grayscale Pf");
  if (magic != "Pf") throw FormatError(name + ": not a PFM file (magic '" + magic + "')");
  const long w = hdr.integer();
  const long h = hdr.integer();
  if (w <= 0 || h <= 0) throw FormatError(name + ": non-positive dimensions");
  const double scale = parse_double(hdr.token(), name + ": scale");
  if (scale >= 0.0) throw FormatError(name + ": big-endian PFM (positive scale) is not supported");
  const std::size_t start = hdr.payload_start();
  const std::size_t need = static_cast<std::size_t>(w * h) * 4;
  if (bytes.size() < start + need) throw FormatError(name + ": truncated payload");
  Grid<double> out(static_cast<int>(h), static_cast<int>(w));
  std::size_t at = start;
  for (long row = h - 1; row >= 0; --row) {
    for (long col = 0; col < w; ++col, at += 4) out(static_cast<int>(row), static_cast<int>(col)) = get_f32_le(bytes, at);
  }
  return out;
}

void write_pfm(const std::filesystem::path& path, const Grid<double>& values) {
  std::string out = "Pf\n" + std::to_string(values.cols()) + " " + std::to_string(values.rows()) + "\n-1.0\n";
  out.reserve(out.size() + values.size() * 4);
  for (int row = values.rows() - 1; row >= 0; --row) {
    for (int col = 0; col < values.cols(); ++col) put_f32_le(out, static_cast<float>(values(row, col)));
  }
  write_file(path, out);
}

DepthMap read_depth_pfm(const std::filesystem::path& path) {
  Grid<double> v = read_pfm(path);
  Mask valid(v.rows(), v.cols(), 0);
  for (int r = 0; r < v.rows(); ++r) {
    for (int c = 0; c < v.cols(); ++c) {
      const double d = v(r, c);
      if (std::isfinite(d) && d > 0.0) {
        valid(r, c) = 1;
      } else {
        v(r, c) = 0.0;
      }
    }
  }
  return DepthMap(std::move(v), std::move(valid));
}

void write_depth_pfm(const std::filesystem::path& path, const DepthMap& depth) {
  Grid<double> v = depth.values;
  for (int r = 0; r < v.rows(); ++r) {
    for (int c = 0; c < v.cols(); ++c) {
      if (!depth.is_valid(r, c)) v(r, c) = 0.0;
    }
  }
  write_pfm(path, v);
}

std::string format_pose(const PoseSE3& pose) {
  std::string line;
  char buf[40];
  for (int r = 0; r < 3; ++r) {
    for (int c = 0; c < 4; ++c) {
      const double v = c < 3 ? pose.rotation()(r, c) : pose.translation()[r];
      std::snprintf(buf, sizeof(buf), "%.17g", v == 0.0 ? 0.0 : v);
      if (!line.empty()) line += ' ';
      line += buf;
    }
  }
  return line;
}

PoseSE3 parse_pose_line(const std::string& line, int line_no) {
  std::istringstream ss(line);
  std::vector<std::string> fields;
  std::string tok;
  while (ss >> tok) fields.push_back(tok);
  const std::string where = "pose line " + std::to_string(line_no);
  if (fields.size() != 12) {
    throw FormatError(where + ": expected 12 fields, found " + std::to_string(fields.size()));
  }
  Mat3 R;
  Vec3 t;
  for (int r = 0; r < 3; ++r) {
    for (int c = 0; c < 4; ++c) {
      const double v = parse_double(fields[static_cast<std::size_t>(4 * r + c)], where);
      if (c < 3) {
        R(r, c) = v;
      } else {
        t[r] = v;
      }
    }
  }
  if (!is_rotation(R, 1e-3)) throw FormatError(where + ": rotation block is not a rotation matrix");
  if (!is_rotation(R, 1e-9)) R = orthonormalize(R);
  return PoseSE3(R, t);
}

std::vector<PoseSE3> read_poses(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open " + path.string());
  std::vector<PoseSE3> poses;
  std::string line;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    try {
      poses.push_back(parse_pose_line(line, line_no));
    } catch (const FormatError& e) {
      throw FormatError(path.string() + ": " + e.what());
    }
  }
  return poses;
}

PoseSE3 read_pose(const std::filesystem::path& path) {
  const auto poses = read_poses(path);
  if (poses.empty()) throw FormatError(path.string() + ": no pose found");
  return poses.front();
}

void write_poses(const std::filesystem::path& path, const std::vector<PoseSE3>& poses) {
  std::string out;
  for (const auto& p : poses) out += format_pose(p) + "\n";
  write_file(path, out);
}

Image read_image(const std::filesystem::path& path) {
  const std::string bytes = read_file(path);
  const std::string name = path.string();
  HeaderReader hdr(bytes, name);
  const std::string magic = hdr.token();
  if (magic == "P2" || magic == "P3" || magic == "P1" || magic == "P4") {
    throw FormatError(name + ": ASCII/bitmap netpbm (" + magic + ") is not supported; use binary P5 or P6");
  }
  if (magic != "P5" && magic != "P6") throw FormatError(name + ": not a binary netpbm image");
  const long w = hdr.integer();
  const long h = hdr.integer();
  const long maxval = hdr.integer();
  if (w <= 0 || h <= 0) throw FormatError(name + ": non-positive dimensions");
  if (maxval != 255 && maxval != 65535) {
    throw FormatError(name + ": maxval " + std::to_string(maxval) + " not supported (255 or 65535)");
  }
  const std::size_t start = hdr.payload_start();
  const int channels = magic == "P6" ? 3 : 1;
  const int bps = maxval == 255 ? 1 : 2;
  const std::size_t need = static_cast<std::size_t>(w * h) * channels * bps;
  if (bytes.size() < start + need) throw FormatError(name + ": truncated payload");
  Image img(static_cast<int>(h), static_cast<int>(w));
  std::size_t at = start;
  auto sample = [&]() {
    unsigned v = static_cast<unsigned char>(bytes[at++]);
    if (bps == 2) v = (v << 8) | static_cast<unsigned char>(bytes[at++]);
    return static_cast<double>(v) / static_cast<double>(maxval);
  };
  for (int r = 0; r < h; ++r) {
    for (int c = 0; c < w; ++c) {
      if (channels == 1) {
        img(r, c) = sample();
      } else {
        const double red = sample(), green = sample(), blue = sample();
        img(r, c) = 0.299 * red + 0.587 * green + 0.114 * blue;
      }
    }
  }
  return img;
}

void write_pgm(const std::filesystem::path& path, const Image& img, int maxval) {
  if (maxval != 255 && maxval != 65535) throw std::invalid_argument("write_pgm: maxval must be 255 or 65535");
  std::string out = "P5\n" + std::to_string(img.cols()) + " " + std::to_string(img.rows()) + "\n" +
                    std::to_string(maxval) + "\n";
  for (int r = 0; r < img.rows(); ++r) {
    for (int c = 0; c < img.cols(); ++c) {
      const double v = std::clamp(img(r, c), 0.0, 1.0);
      const auto q = static_cast<unsigned>(std::lround(v * maxval));
      if (maxval == 65535) out.push_back(static_cast<char>(q >> 8));
      out.push_back(static_cast<char>(q & 0xff));
    }
  }
  write_file(path, out);
}

void write_mask_pgm(const std::filesystem::path& path, const Mask& mask) {
  Image img(mask.rows(), mask.cols());
  for (int r = 0; r < mask.rows(); ++r) {
    for (int c = 0; c < mask.cols(); ++c) img(r, c) = mask(r, c) ? 1.0 : 0.0;
  }
  write_pgm(path, img, 255);
}

Intrinsics read_intrinsics(const std::filesystem::path& path) {
  std::istringstream ss(read_file(path));
  std::vector<std::string> fields;
  std::string tok;
  while (ss >> tok) fields.push_back(tok);
  const std::string where = path.string();
  if (fields.size() != 4) throw FormatError(where + ": expected 'fx fy cx cy'");
  try {
    return Intrinsics(parse_double(fields[0], where), parse_double(fields[1], where),
                      parse_double(fields[2], where), parse_double(fields[3], where));
  } catch (const std::invalid_argument& e) {
    throw FormatError(where + ": " + e.what());
  }
}

void write_intrinsics(const std::filesystem::path& path, const Intrinsics& K) {
  char buf[160];
  std::snprintf(buf, sizeof(buf), "%.17g %.17g %.17g %.17g\n", K.fx, K.fy, K.cx, K.cy);
  write_file(path, buf);
}

namespace {

std::vector<double> parse_list(const std::string& s, std::size_t expected, const std::string& what) {
  std::vector<double> out;
  std::string item;
  std::istringstream ss(s);
  while (std::getline(ss, item, ',')) {
    const auto b = item.find_first_not_of(" \t");
    const auto e = item.find_last_not_of(" \t");
    if (b == std::string::npos) throw FormatError(what + ": empty list element");
    out.push_back(parse_double(item.substr(b, e - b + 1), what));
  }
  if (expected > 0 && out.size() != expected) {
    throw FormatError(what + ": expected " + std::to_string(expected) + " comma-separated values");
  }
  return out;
}

long parse_int(const std::string& s, const std::string& what) {
  long v = 0;
  auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc() || p != s.data() + s.size()) throw FormatError(what + ": '" + s + "' is not an integer");
  return v;
}

using Setter = std::function<void(RunConfig&, const std::string&, const std::string&)>;

const std::map<std::string, Setter>& setters() {
  static const std::map<std::string, Setter> table = [] {
    std::map<std::string, Setter> t;
    auto dbl = [&t](const std::string& key, auto member) {
      t[key] = [member](RunConfig& c, const std::string& v, const std::string& w) { member(c) = parse_double(v, w); };
    };
    auto integer = [&t](const std::string& key, auto member) {
      t[key] = [member](RunConfig& c, const std::string& v, const std::string& w) {
        member(c) = static_cast<std::remove_reference_t<decltype(member(c))>>(parse_int(v, w));
      };
    };
    integer("solver.iterations", [](RunConfig& c) -> int& { return c.solver.iterations; });
    integer("solver.match_radius", [](RunConfig& c) -> int& { return c.solver.match_radius; });
    integer("solver.fit_iterations", [](RunConfig& c) -> int& { return c.solver.fit_iterations; });
    dbl("solver.fit_smoothness", [](RunConfig& c) -> double& { return c.solver.fit_smoothness; });
    dbl("solver.min_observed_ratio", [](RunConfig& c) -> double& { return c.solver.min_observed_ratio; });
    dbl("solver.fit_edge", [](RunConfig& c) -> double& { return c.solver.fit_edge; });
    integer("solver.max_halvings", [](RunConfig& c) -> int& { return c.solver.max_halvings; });
    dbl("solver.init_depth", [](RunConfig& c) -> double& { return c.solver.init_depth; });
    dbl("solver.pose_step_scale", [](RunConfig& c) -> double& { return c.solver.pose_step_scale; });
    dbl("solver.depth_step_scale", [](RunConfig& c) -> double& { return c.solver.depth_step_scale; });
    dbl("solver.max_rotation_step", [](RunConfig& c) -> double& { return c.solver.max_rotation_step; });
    dbl("solver.max_translation_step", [](RunConfig& c) -> double& { return c.solver.max_translation_step; });
    dbl("solver.max_depth_step", [](RunConfig& c) -> double& { return c.solver.max_depth_step; });
    dbl("solver.damping", [](RunConfig& c) -> double& { return c.solver.damping; });
    dbl("solver.tolerance", [](RunConfig& c) -> double& { return c.solver.tolerance; });
    dbl("solver.depth_delta", [](RunConfig& c) -> double& { return c.solver.disturbances.depth_delta; });
    dbl("solver.rot_delta", [](RunConfig& c) -> double& { return c.solver.disturbances.rot_delta; });
    dbl("solver.trans_delta", [](RunConfig& c) -> double& { return c.solver.disturbances.trans_delta; });
    dbl("solver.trans_norm_floor", [](RunConfig& c) -> double& { return c.solver.disturbances.trans_norm_floor; });
    t["solver.levels"] = [](RunConfig& c, const std::string& v, const std::string& w) {
      c.solver.level_schedule.clear();
      for (double x : parse_list(v, 0, w)) {
        if (x != std::floor(x)) throw FormatError(w + ": levels must be integers");
        c.solver.level_schedule.push_back(static_cast<int>(x));
      }
    };
    t["solver.depth_search"] = [](RunConfig& c, const std::string& v, const std::string& w) {
      if (v != "true" && v != "false") throw FormatError(w + ": expected true or false");
      c.solver.depth_search = v == "true";
    };
    t["solver.uncertainty"] = [](RunConfig& c, const std::string& v, const std::string&) {
      c.solver.uncertainty = parse_uncertainty_mode(v);
    };
    dbl("uncertainty.rho0", [](RunConfig& c) -> double& { return c.solver.heuristic.rho0; });
    dbl("uncertainty.kappa", [](RunConfig& c) -> double& { return c.solver.heuristic.kappa; });
    dbl("uncertainty.rho_max", [](RunConfig& c) -> double& { return c.solver.heuristic.rho_max; });
    dbl("uncertainty.mu0", [](RunConfig& c) -> double& { return c.solver.heuristic.mu0; });
    dbl("uncertainty.sigma0", [](RunConfig& c) -> double& { return c.solver.heuristic.sigma0; });
    t["features.backend"] = [](RunConfig& c, const std::string& v, const std::string&) {
      c.solver.backend.kind = parse_descriptor_kind(v);
    };
    integer("features.window", [](RunConfig& c) -> int& { return c.solver.backend.window; });
    dbl("features.census_threshold", [](RunConfig& c) -> double& { return c.solver.backend.census_threshold; });
    t["features.target_file"] = [](RunConfig& c, const std::string& v, const std::string&) {
      c.solver.backend.external_path = v;
    };
    t["features.source_file"] = [](RunConfig& c, const std::string& v, const std::string&) {
      c.solver.source_features = v;
    };
    integer("features.dense_pixel_limit", [](RunConfig& c) -> long& { return c.solver.pyramid.dense_pixel_limit; });

    t["scene.seed"] = [](RunConfig& c, const std::string& v, const std::string& w) {
      const long s = parse_int(v, w);
      if (s < 0) throw FormatError(w + ": seed must be non-negative");
      c.scene.seed = static_cast<std::uint64_t>(s);
    };
    integer("scene.rows", [](RunConfig& c) -> int& { return c.scene.rows; });
    integer("scene.cols", [](RunConfig& c) -> int& { return c.scene.cols; });
    dbl("scene.focal", [](RunConfig& c) -> double& { return c.scene.focal; });
    t["scene.depth_model"] = [](RunConfig& c, const std::string& v, const std::string&) {
      c.scene.depth_model = parse_depth_model(v);
    };
    dbl("scene.plane_depth", [](RunConfig& c) -> double& { return c.scene.plane_depth; });
    t["scene.plane_normal"] = [](RunConfig& c, const std::string& v, const std::string& w) {
      const auto x = parse_list(v, 3, w);
      c.scene.plane_normal = Vec3(x[0], x[1], x[2]);
    };
    t["scene.sphere_center"] = [](RunConfig& c, const std::string& v, const std::string& w) {
      const auto x = parse_list(v, 3, w);
      c.scene.sphere_center = Vec3(x[0], x[1], x[2]);
    };
    dbl("scene.sphere_radius", [](RunConfig& c) -> double& { return c.scene.sphere_radius; });
    t["scene.motion_min"] = [](RunConfig& c, const std::string& v, const std::string& w) {
      const auto x = parse_list(v, 6, w);
      c.scene.motion_min = PoseVec6(x[0], x[1], x[2], x[3], x[4], x[5]);
    };
    t["scene.motion_max"] = [](RunConfig& c, const std::string& v, const std::string& w) {
      const auto x = parse_list(v, 6, w);
      c.scene.motion_max = PoseVec6(x[0], x[1], x[2], x[3], x[4], x[5]);
    };
    dbl("scene.rotation_deg", [](RunConfig& c) -> double& { return c.scene.rotation_deg; });
    dbl("scene.translation_norm", [](RunConfig& c) -> double& { return c.scene.translation_norm; });
    integer("scene.texture_octaves", [](RunConfig& c) -> int& { return c.scene.texture_octaves; });
    dbl("scene.texture_cell", [](RunConfig& c) -> double& { return c.scene.texture_cell; });
    dbl("scene.texture_persistence", [](RunConfig& c) -> double& { return c.scene.texture_persistence; });
    dbl("scene.texture_contrast", [](RunConfig& c) -> double& { return c.scene.texture_contrast; });
    dbl("scene.gain", [](RunConfig& c) -> double& { return c.scene.gain; });
    dbl("scene.bias", [](RunConfig& c) -> double& { return c.scene.bias; });
    dbl("scene.noise_std", [](RunConfig& c) -> double& { return c.scene.noise_std; });
    dbl("scene.outlier_fraction", [](RunConfig& c) -> double& { return c.scene.outlier_fraction; });
    integer("scene.outlier_patch", [](RunConfig& c) -> int& { return c.scene.outlier_patch; });

    dbl("loss.alpha1", [](RunConfig& c) -> double& { return c.loss.alpha1; });
    dbl("loss.alpha2", [](RunConfig& c) -> double& { return c.loss.alpha2; });
    dbl("loss.alpha3", [](RunConfig& c) -> double& { return c.loss.alpha3; });
    dbl("loss.sigma_imp", [](RunConfig& c) -> double& { return c.loss.sigma_imp; });
    return t;
  }();
  return table;
}

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

}  // namespace

RunConfig parse_run_config(const std::string& text, RunConfig base) {
  std::istringstream in(text);
  std::string raw;
  int line_no = 0;
  while (std::getline(in, raw)) {
    ++line_no;
    const std::string line = trim(raw.substr(0, raw.find('#')));
    if (line.empty()) continue;
    const std::string where = "config line " + std::to_string(line_no);
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw FormatError(where + ": expected 'key = value'");
    const std::string key = trim(line.substr(0, eq));
    const std::string value = trim(line.substr(eq + 1));
    const auto it = setters().find(key);
    if (it == setters().end()) throw FormatError(where + ": unknown key '" + key + "'");
    if (value.empty()) throw FormatError(where + ": empty value for '" + key + "'");
    try {
      it->second(base, value, where + " (" + key + ")");
    } catch (const std::invalid_argument& e) {
      throw FormatError(where + ": " + e.what());
    }
  }
  return base;
}

RunConfig load_run_config(const std::filesystem::path& path, RunConfig base) {
  try {
    return parse_run_config(read_file(path), std::move(base));
  } catch (const FormatError& e) {
    throw FormatError(path.string() + ": " + e.what());
  }
}

std::string format_scene_spec(const SceneSpec& s) {
  std::ostringstream out;
  out.precision(17);
  auto vec = [&](const auto& v, int n) {
    std::string r;
    for (int i = 0; i < n; ++i) {
      std::ostringstream x;
      x.precision(17);
      x << v[i];
      r += (i ? "," : "") + x.str();
    }
    return r;
  };
  out << "scene.seed = " << s.seed << '\n'
      << "scene.rows = " << s.rows << '\n'
      << "scene.cols = " << s.cols << '\n'
      << "scene.focal = " << s.focal << '\n'
      << "scene.depth_model = " << to_string(s.depth_model) << '\n'
      << "scene.plane_depth = " << s.plane_depth << '\n'
      << "scene.plane_normal = " << vec(s.plane_normal, 3) << '\n'
      << "scene.sphere_center = " << vec(s.sphere_center, 3) << '\n'
      << "scene.sphere_radius = " << s.sphere_radius << '\n'
      << "scene.motion_min = " << vec(s.motion_min.v, 6) << '\n'
      << "scene.motion_max = " << vec(s.motion_max.v, 6) << '\n'
      << "scene.rotation_deg = " << s.rotation_deg << '\n'
      << "scene.translation_norm = " << s.translation_norm << '\n'
      << "scene.texture_octaves = " << s.texture_octaves << '\n'
      << "scene.texture_cell = " << s.texture_cell << '\n'
      << "scene.texture_persistence = " << s.texture_persistence << '\n'
      << "scene.texture_contrast = " << s.texture_contrast << '\n'
      << "scene.gain = " << s.gain << '\n'
      << "scene.bias = " << s.bias << '\n'
      << "scene.noise_std = " << s.noise_std << '\n'
      << "scene.outlier_fraction = " << s.outlier_fraction << '\n'
      << "scene.outlier_patch = " << s.outlier_patch << '\n';
  return out.str();
}

}  // namespace mlesfm
