#include <doctest.h>

#include <filesystem>
#include <fstream>
#include <random>
#include <sstream>

#include <json.hpp>

#include "flowsplat/pipeline.hpp"

using namespace flowsplat;

namespace {

std::mt19937 rng(4242);

std::string temp_dir(const std::string& tag) {
  namespace fs = std::filesystem;
  const fs::path p = fs::temp_directory_path() /
                     ("flowsplat_pipeline_" + tag + "_" +
                      std::to_string(rng()));
  fs::create_directories(p);
  return p.string();
}

ConfigMap parse_text(const std::string& text) {
  std::istringstream ss(text);
  return parse_config(ss);
}

std::string slurp(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  REQUIRE(is.good());
  std::ostringstream ss;
  ss << is.rdbuf();
  return ss.str();
}

// Small, fast SLAM configuration on a static synthetic scene.
PipelineConfig fast_static_config() {
  PipelineConfig cfg;
  cfg.dataset_type = "synthetic";
  cfg.synth.width = 48;
  cfg.synth.height = 48;
  cfg.synth.focal = 60.0;
  cfg.synth.frames = 6;
  cfg.synth.trajectory = SyntheticSceneConfig::Trajectory::kStatic;
  cfg.mapping.iterations = 15;
  cfg.mapping.keyframe_every = 3;
  cfg.color_refine_iterations = 10;
  cfg.save_renders = false;
  cfg.save_fields = false;
  return cfg;
}

}  // namespace

TEST_CASE("config text parsing: comments, whitespace, typed getters") {
  const std::string text =
      "# a comment line\n"
      "\n"
      "  dataset.type =  tum  \n"
      "synth.frames=12\n"
      "mapping.lambda_f = 0.25\n"
      "deterministic = true\n"
      "output.renders = false\n";
  const ConfigMap cfg = parse_text(text);
  CHECK(cfg.get_string("dataset.type", "") == "tum");
  CHECK(cfg.get_int("synth.frames", 0) == 12);
  CHECK(cfg.get_double("mapping.lambda_f", 0.0) == doctest::Approx(0.25));
  CHECK(cfg.get_bool("deterministic", false));
  CHECK_FALSE(cfg.get_bool("output.renders", true));
  // Defaults for missing keys.
  CHECK(cfg.get_int("missing", 7) == 7);
  CHECK(cfg.get_string("missing", "d") == "d");
  CHECK_FALSE(cfg.has("missing"));
  CHECK(cfg.has("synth.frames"));
}

TEST_CASE("config parse errors") {
  CHECK_THROWS_AS(parse_text("novaluehere\n"), BadHeader);
  CHECK_THROWS_AS(parse_text(" = 3\n"), BadHeader);
  const ConfigMap cfg = parse_text("k = not_a_number\n");
  CHECK_THROWS_AS(cfg.get_int("k", 0), BadHeader);
  CHECK_THROWS_AS(cfg.get_double("k", 0.0), BadHeader);
  CHECK_THROWS_AS(cfg.get_bool("k", false), BadHeader);
  CHECK_THROWS_AS(parse_config_file("/definitely/not/a/real/file.cfg"),
                  IoFailure);
}

TEST_CASE("pipeline config maps dotted keys onto every module") {
  const std::string text =
      "dataset.type = synthetic\n"
      "dataset.max_frames = 9\n"
      "seed = 13\n"
      "deterministic = true\n"
      "decomposition.enabled = false\n"
      "decomposition.cauchy_scale = 2.5\n"
      "synth.width = 80\n"
      "synth.height = 60\n"
      "synth.trajectory = sinusoid\n"
      "synth.amplitude = 0.08\n"
      "synth.object1.shape = box\n"
      "synth.object1.start = 0.1,-0.2,2.5\n"
      "synth.object1.velocity = 0.01,0,0\n"
      "synth.object1.radius = 0.3\n"
      "synth.object1.color = 0.2,0.9,0.1\n"
      "synth.object1.entry = 4\n"
      "tracking.max_iterations = 33\n"
      "tracking.lambda1 = 0.8\n"
      "mapping.iterations = 21\n"
      "mapping.knn_radius = 0.5\n"
      "mapping.propagation = false\n"
      "mapping.knn_smooth = false\n"
      "mapping.insertion = false\n"
      "mapping.gmm = false\n"
      "mapping.color_refine_iterations = 40\n"
      "output.dir = /tmp/somewhere\n";
  const PipelineConfig p = pipeline_config_from(parse_text(text));
  CHECK(p.dataset_type == "synthetic");
  CHECK(p.max_frames == 9);
  CHECK(p.seed == 13u);
  CHECK(p.deterministic);
  CHECK_FALSE(p.enable_decomposition);
  CHECK(p.robust.cauchy_scale == doctest::Approx(2.5));
  CHECK(p.synth.width == 80);
  CHECK(p.synth.height == 60);
  CHECK(p.synth.trajectory == SyntheticSceneConfig::Trajectory::kSinusoid);
  CHECK(p.synth.amplitude == doctest::Approx(0.08));
  REQUIRE(p.synth.objects.size() == 1);
  CHECK(p.synth.objects[0].shape == ObjectSpec::Shape::kBox);
  CHECK((p.synth.objects[0].start - Vec3(0.1, -0.2, 2.5)).norm() < 1e-12);
  CHECK((p.synth.objects[0].velocity - Vec3(0.01, 0, 0)).norm() < 1e-12);
  CHECK(p.synth.objects[0].radius == doctest::Approx(0.3));
  CHECK((p.synth.objects[0].color - Vec3(0.2, 0.9, 0.1)).norm() < 1e-12);
  CHECK(p.synth.objects[0].entry_frame == 4);
  CHECK(p.tracking.max_iterations == 33);
  CHECK(p.tracking.lambda1 == doctest::Approx(0.8));
  CHECK(p.mapping.iterations == 21);
  CHECK(p.mapping.knn_radius == doctest::Approx(0.5));
  CHECK_FALSE(p.mapping.enable_propagation);
  CHECK_FALSE(p.mapping.enable_knn_smooth);
  CHECK_FALSE(p.mapping.enable_insertion);
  CHECK_FALSE(p.mapping.enable_gmm);
  CHECK(p.color_refine_iterations == 40);
  CHECK(p.output_dir == "/tmp/somewhere");

  CHECK_THROWS_AS(
      pipeline_config_from(parse_text("synth.trajectory = spiral\n")),
      BadHeader);
  CHECK_THROWS_AS(pipeline_config_from(parse_text(
                      "synth.object1.start = 1,2,3\n"
                      "synth.object1.shape = pyramid\n")),
                  BadHeader);
  CHECK_THROWS_AS(pipeline_config_from(
                      parse_text("synth.object1.start = 1,2\n")),
                  BadHeader);
}

TEST_CASE("chained per-frame flow approximates the exact pair flow") {
  SyntheticSceneConfig s;
  s.width = 40;
  s.height = 40;
  s.focal = 60.0;
  s.frames = 4;
  s.trajectory = SyntheticSceneConfig::Trajectory::kDolly;
  s.amplitude = 0.03;
  Dataset ds = generate_synthetic(s);
  REQUIRE(ds.flow_oracle);

  const FlowField exact_fwd = ds.flow_oracle(0, 3);
  const FlowField chained_fwd = detail::chain_flow_forward(ds, 0, 3);
  const FlowField exact_bwd = ds.flow_oracle(3, 0);
  const FlowField chained_bwd = detail::chain_flow_backward(ds, 3, 0);
  int compared = 0;
  for (int y = 0; y < 40; ++y) {
    for (int x = 0; x < 40; ++x) {
      if (exact_fwd.valid.at(x, y) && chained_fwd.valid.at(x, y)) {
        CHECK(std::abs(chained_fwd.u_component.at(x, y) -
                       exact_fwd.u_component.at(x, y)) < 5e-3);
        CHECK(std::abs(chained_fwd.v_component.at(x, y) -
                       exact_fwd.v_component.at(x, y)) < 5e-3);
        ++compared;
      }
      if (exact_bwd.valid.at(x, y) && chained_bwd.valid.at(x, y)) {
        CHECK(std::abs(chained_bwd.u_component.at(x, y) -
                       exact_bwd.u_component.at(x, y)) < 5e-3);
        CHECK(std::abs(chained_bwd.v_component.at(x, y) -
                       exact_bwd.v_component.at(x, y)) < 5e-3);
      }
    }
  }
  CHECK(compared > 1000);

  // keyframe_flow prefers the oracle when one is attached...
  const FlowField via_oracle = detail::keyframe_flow(ds, 0, 3);
  CHECK(via_oracle.u_component.at(20, 20) ==
        exact_fwd.u_component.at(20, 20));
  // ...and falls back to chaining when it is not.
  ds.flow_oracle = nullptr;
  const FlowField via_chain = detail::keyframe_flow(ds, 0, 3);
  CHECK(via_chain.u_component.at(20, 20) ==
        chained_fwd.u_component.at(20, 20));
}

TEST_CASE("run_slam on a static scene produces a consistent report") {
  const PipelineConfig cfg = fast_static_config();
  const SlamResult res = run_slam(cfg);
  REQUIRE(res.poses.size() == 6);
  REQUIRE(res.timestamps.size() == 6);
  const EvaluationReport& r = res.report;
  CHECK(r.frames == 6);
  CHECK(r.has_ground_truth);
  CHECK(r.per_frame_psnr.size() == 6);
  CHECK(r.per_frame_ssim.size() == 6);
  CHECK(r.per_frame_ate_cm.size() == 6);
  // Static camera, exact priors: the trajectory barely moves.
  CHECK(r.ate_rmse_cm < 1.0);
  CHECK(r.psnr_mean_db > 10.0);
  CHECK(std::isfinite(r.ssim_mean));
  CHECK(r.n_static > 0);
  CHECK(res.field.static_set.size() == r.n_static);
  // First pose is anchored at identity.
  CHECK(res.poses[0].translation.norm() == 0.0);
}

TEST_CASE("run_slam writes the full artifact set") {
  PipelineConfig cfg = fast_static_config();
  cfg.save_renders = true;
  cfg.save_fields = true;
  cfg.output_dir = temp_dir("artifacts");
  const SlamResult res = run_slam(cfg);

  // Trajectory round-trips through the TUM text format.
  const auto traj = read_trajectory_tum_file(cfg.output_dir + "/trajectory.txt");
  REQUIRE(traj.size() == res.poses.size());
  for (size_t i = 0; i < traj.size(); ++i) {
    CHECK(traj[i].timestamp == doctest::Approx(res.timestamps[i]));
    CHECK((traj[i].pose_cw.translation - res.poses[i].translation).norm() <
          1e-6);
    CHECK((traj[i].pose_cw.rotation - res.poses[i].rotation).norm() < 1e-6);
  }

  // Final field reloads with identical structure.
  const GaussianField field =
      read_field_file(cfg.output_dir + "/field_final.f4dg");
  CHECK(field.static_set.size() == res.field.static_set.size());
  CHECK(field.dynamic_set.size() == res.field.dynamic_set.size());

  // report.json carries the headline metrics.
  const nlohmann::json report =
      nlohmann::json::parse(slurp(cfg.output_dir + "/report.json"));
  CHECK(report["frames"].get<size_t>() == res.report.frames);
  CHECK(report["ate_rmse_cm"].get<double>() ==
        doctest::Approx(res.report.ate_rmse_cm));
  CHECK(report["psnr_mean_db"].get<double>() ==
        doctest::Approx(res.report.psnr_mean_db));
  CHECK(report["has_ground_truth"].get<bool>());

  // metrics.csv: header plus one row per frame.
  std::istringstream csv(slurp(cfg.output_dir + "/metrics.csv"));
  std::string line;
  REQUIRE(std::getline(csv, line));
  CHECK(line ==
        "frame,timestamp,ate_cm,psnr_db,ssim,decomp_ms,track_ms,map_ms");
  size_t rows = 0;
  while (std::getline(csv, line)) {
    if (!line.empty()) ++rows;
  }
  CHECK(rows == res.report.frames);

  // stats.jsonl: one parseable object per keyframe.
  std::istringstream jsonl(slurp(cfg.output_dir + "/stats.jsonl"));
  size_t stats_rows = 0;
  while (std::getline(jsonl, line)) {
    if (line.empty()) continue;
    const nlohmann::json j = nlohmann::json::parse(line);
    CHECK(j.contains("frame"));
    CHECK(j.contains("n_static"));
    CHECK(j["loss"].contains("total"));
    ++stats_rows;
  }
  CHECK(stats_rows >= 2);  // frame 0 plus at least one cadence keyframe

  // Per-frame renders and per-keyframe field snapshots exist. Snapshots are
  // written for keyframes promoted during tracking (the frame-0 bootstrap
  // keyframe has no snapshot of its own), so the first file is kf001.
  CHECK(std::filesystem::exists(cfg.output_dir + "/renders/frame_0000.png"));
  CHECK(std::filesystem::exists(cfg.output_dir + "/field_kf001.f4dg"));

  std::filesystem::remove_all(cfg.output_dir);
}

TEST_CASE("deterministic runs are byte-identical") {
  PipelineConfig cfg = fast_static_config();
  cfg.deterministic = true;
  cfg.seed = 7;
  cfg.save_renders = false;
  cfg.save_fields = false;

  cfg.output_dir = temp_dir("det_a");
  run_slam(cfg);
  const std::string report_a = slurp(cfg.output_dir + "/report.json");
  const std::string traj_a = slurp(cfg.output_dir + "/trajectory.txt");
  std::filesystem::remove_all(cfg.output_dir);

  cfg.output_dir = temp_dir("det_b");
  run_slam(cfg);
  CHECK(slurp(cfg.output_dir + "/report.json") == report_a);
  CHECK(slurp(cfg.output_dir + "/trajectory.txt") == traj_a);
  std::filesystem::remove_all(cfg.output_dir);

  // The deterministic flag zeroes wall-clock fields.
  const nlohmann::json j = nlohmann::json::parse(report_a);
  CHECK(j["runtime_ms"]["total"].get<double>() == 0.0);
  CHECK(j["fps"].get<double>() == 0.0);
}

TEST_CASE("dataset selection errors are reported cleanly") {
  PipelineConfig cfg;
  cfg.dataset_type = "matrix";
  CHECK_THROWS_AS(run_slam(cfg), BadHeader);
  cfg.dataset_type = "tum";
  cfg.dataset_path = "";
  CHECK_THROWS_AS(run_slam(cfg), BadHeader);
  cfg.dataset_path = "/definitely/not/a/sequence";
  CHECK_THROWS_AS(run_slam(cfg), MissingIndexFile);
}
