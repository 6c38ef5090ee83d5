// Command-line front end: synth, solve, eval, inspect-corr.
#include <CLI11.hpp>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>

#include "mlesfm/features.hpp"
#include "mlesfm/io.hpp"
#include "mlesfm/metrics.hpp"
#include "mlesfm/solver.hpp"
#include "mlesfm/synth.hpp"

namespace fs = std::filesystem;
using namespace mlesfm;

namespace {

enum Exit { kOk = 0, kUsage = 1, kIllConditioned = 2, kIo = 3 };

struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

void require_file(const fs::path& p, const char* flag) {
  if (!fs::is_regular_file(p)) throw UsageError(std::string(flag) + ": no such file '" + p.string() + "'");
}

void make_out_dir(const fs::path& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw std::runtime_error("cannot create " + dir.string() + ": " + ec.message());
}

RunConfig config_from(const std::string& path) {
  if (path.empty()) return {};
  require_file(path, "--config");
  return load_run_config(path);
}

int run_synth(const std::string& config, const fs::path& out, long seed) {
  RunConfig rc = config_from(config);
  if (seed >= 0) rc.scene.seed = static_cast<std::uint64_t>(seed);
  const SyntheticPair pair = gen_scene(rc.scene);
  make_out_dir(out);
  write_pgm(out / "target.pgm", pair.target);
  write_pgm(out / "source.pgm", pair.source);
  write_depth_pfm(out / "depth_gt.pfm", pair.depth);
  write_poses(out / "pose_gt.txt", {pair.pose});
  write_intrinsics(out / "intrinsics.txt", pair.K);
  write_mask_pgm(out / "visibility.pgm", pair.visibility);
  {
    std::ofstream cfg(out / "scene.cfg");
    cfg << format_scene_spec(rc.scene);
  }
  // The report describes the stored (quantized) images.
  SyntheticPair stored = pair;
  stored.target = read_image(out / "target.pgm");
  stored.source = read_image(out / "source.pgm");
  const ConsistencyReport rep = verify_pair(stored);
  std::ofstream report(out / "verify.txt");
  const std::vector<MetricRow> rows = {{"mean_abs_error", rep.mean_abs_error},
                                       {"max_abs_error", rep.max_abs_error},
                                       {"visible_fraction", rep.visible_fraction},
                                       {"pixels", static_cast<double>(rep.pixels)}};
  write_metric_table(report, rows);
  write_metric_table(std::cout, rows);
  return kOk;
}

int run_solve(const fs::path& target, const fs::path& source, const fs::path& intrinsics,
              const std::string& config, const fs::path& out) {
  require_file(target, "--target");
  require_file(source, "--source");
  require_file(intrinsics, "--intrinsics");
  const RunConfig rc = config_from(config);
  const Image It = read_image(target);
  const Image Is = read_image(source);
  const Intrinsics K = read_intrinsics(intrinsics);
  const SolveResult res = solve(It, Is, K, rc.solver);
  make_out_dir(out);
  write_depth_pfm(out / "depth.pfm", res.depth);
  write_poses(out / "pose.txt", {res.pose});
  std::ofstream log(out / "diagnostics.log");
  write_diagnostics(log, res.diagnostics);
  if (res.depth_unconstrained) {
    log << "warning: translation gives no measurable parallax; depth is unconstrained\n";
    std::cerr << "warning: depth is unconstrained (no parallax)\n";
  }
  return kOk;
}

int run_eval(const fs::path& pred_depth, const fs::path& gt_depth, const std::string& pred_pose,
             const std::string& gt_pose, const std::string& mask, bool align, const std::string& csv) {
  require_file(pred_depth, "--pred-depth");
  require_file(gt_depth, "--gt-depth");
  if (pred_pose.empty() != gt_pose.empty()) throw UsageError("--pred-pose and --gt-pose go together");
  DepthMap pred = read_depth_pfm(pred_depth);
  DepthMap gt = read_depth_pfm(gt_depth);
  if (!pred.values.same_shape(gt.values)) throw UsageError("predicted and ground-truth depth sizes differ");
  if (!mask.empty()) {
    require_file(mask, "--mask");
    const Image m = read_image(mask);
    if (!m.same_shape(gt.values)) throw UsageError("--mask size differs from the depth maps");
    for (int r = 0; r < m.rows(); ++r) {
      for (int c = 0; c < m.cols(); ++c) {
        if (m(r, c) < 0.5) gt.valid(r, c) = 0;
      }
    }
  }
  const DepthMetrics dm = depth_metrics(pred, gt, align);
  DepthMap scaled = pred;
  for (double& v : scaled.values.values()) v *= dm.scale;
  const DemonMetrics dem = demon_depth_metrics(scaled, gt);
  std::vector<MetricRow> rows = {{"abs_rel", dm.abs_rel},   {"sq_rel", dm.sq_rel}, {"rmse", dm.rmse},
                                 {"rmse_log", dm.rmse_log}, {"delta1", dm.delta1}, {"delta2", dm.delta2},
                                 {"delta3", dm.delta3},     {"scale", dm.scale},   {"pixels", static_cast<double>(dm.pixels)},
                                 {"l1_inv", dem.l1_inv},    {"sc_inv", dem.sc_inv}, {"l1_rel", dem.l1_rel}};
  if (!pred_pose.empty()) {
    require_file(pred_pose, "--pred-pose");
    require_file(gt_pose, "--gt-pose");
    const PoseMetrics pm = pose_metrics(read_pose(pred_pose), read_pose(gt_pose));
    rows.push_back({"rot_deg", pm.rot_deg});
    rows.push_back({"tran_deg", pm.tran_defined ? pm.tran_deg : std::nan("")});
  }
  write_metric_table(std::cout, rows);
  if (!csv.empty()) {
    std::ofstream f(csv);
    if (!f) throw std::runtime_error("cannot write " + csv);
    write_metric_csv(f, rows);
  }
  return kOk;
}

int run_inspect(const fs::path& target, const fs::path& source, const std::vector<int>& at,
                const std::string& config, const fs::path& out) {
  require_file(target, "--target");
  require_file(source, "--source");
  const RunConfig rc = config_from(config);
  const Image It = read_image(target);
  const Image Is = read_image(source);
  DescriptorBackend sb = rc.solver.backend;
  if (sb.kind == DescriptorKind::external_file) sb.external_path = rc.solver.source_features;
  const FeatureMap ft = extract_features(It, rc.solver.backend);
  const FeatureMap fsrc = extract_features(Is, sb);
  const CorrelationPyramid pyr = build_pyramid(ft, fsrc, rc.solver.pyramid);
  const int x = at[0], y = at[1];
  if (x < 0 || y < 0 || x >= pyr.cols() || y >= pyr.rows()) {
    throw UsageError("--at outside the " + std::to_string(pyr.cols()) + "x" + std::to_string(pyr.rows()) +
                     " feature grid");
  }
  Grid<double> slice(pyr.level_rows(0), pyr.level_cols(0));
  for (int a = 0; a < slice.rows(); ++a) {
    for (int b = 0; b < slice.cols(); ++b) slice(a, b) = pyr.entry(0, y, x, a, b);
  }
  write_pfm(out, slice);
  return kOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Two-view depth and pose estimation by likelihood maximization"};
  app.require_subcommand(1);

  std::string config, out_dir, target, source, intrinsics;
  long seed = -1;
  auto* synth = app.add_subcommand("synth", "Render a synthetic image pair with ground truth");
  synth->add_option("--config", config, "key=value scene configuration");
  synth->add_option("--out", out_dir, "Output directory")->required();
  synth->add_option("--seed", seed, "Override scene.seed");

  auto* solve_cmd = app.add_subcommand("solve", "Estimate depth and relative pose");
  solve_cmd->add_option("--target", target, "Target image (PGM/PPM)")->required();
  solve_cmd->add_option("--source", source, "Source image (PGM/PPM)")->required();
  solve_cmd->add_option("--intrinsics", intrinsics, "Intrinsics file 'fx fy cx cy'")->required();
  solve_cmd->add_option("--config", config, "key=value solver configuration");
  solve_cmd->add_option("--out", out_dir, "Output directory")->required();

  std::string pred_depth, gt_depth, pred_pose, gt_pose, mask, csv;
  bool align = false;
  auto* eval = app.add_subcommand("eval", "Compare predictions with ground truth");
  eval->add_option("--pred-depth", pred_depth, "Predicted depth PFM")->required();
  eval->add_option("--gt-depth", gt_depth, "Ground-truth depth PFM")->required();
  eval->add_option("--pred-pose", pred_pose, "Predicted pose file");
  eval->add_option("--gt-pose", gt_pose, "Ground-truth pose file");
  eval->add_option("--mask", mask, "Evaluation mask image; zero pixels are ignored");
  eval->add_flag("--align-scale", align, "Median-align the predicted depth scale");
  eval->add_option("--csv", csv, "Also write the metrics as CSV");

  std::vector<int> at;
  std::string heat_out;
  auto* inspect = app.add_subcommand("inspect-corr", "Dump the level-0 correlation slice of one target pixel");
  inspect->add_option("--target", target, "Target image")->required();
  inspect->add_option("--source", source, "Source image")->required();
  inspect->add_option("--at", at, "Feature-grid pixel x,y")->required()->expected(2)->delimiter(',');
  inspect->add_option("--config", config, "key=value configuration (descriptor backend)");
  inspect->add_option("--out", heat_out, "Output PFM")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return kUsage;
  }

  try {
    if (*synth) return run_synth(config, out_dir, seed);
    if (*solve_cmd) return run_solve(target, source, intrinsics, config, out_dir);
    if (*eval) return run_eval(pred_depth, gt_depth, pred_pose, gt_pose, mask, align, csv);
    if (*inspect) return run_inspect(target, source, at, config, heat_out);
  } catch (const UsageError& e) {
    std::cerr << "usage error: " << e.what() << '\n';
    return kUsage;
  } catch (const IllConditionedError& e) {
    std::cerr << "ill-conditioned input: " << e.what() << '\n';
    return kIllConditioned;
  } catch (const GenerationError& e) {
    std::cerr << "scene generation failed: " << e.what() << '\n';
    return kIllConditioned;
  } catch (const std::invalid_argument& e) {
    std::cerr << "invalid input: " << e.what() << '\n';
    return kUsage;
  } catch (const std::exception& e) {
    std::cerr << "i/o error: " << e.what() << '\n';
    return kIo;
  }
  return kUsage;
}
