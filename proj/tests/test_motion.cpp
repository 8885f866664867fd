#include <doctest.h>

#include <random>

#include "flowsplat/motion.hpp"
#include "flowsplat/synthetic.hpp"

using namespace flowsplat;

namespace {

const Intrinsics kIntr{80.0, 84.0, 31.5, 31.5, 64, 64};

DepthMap uniform_depth(double z, int w = 64, int h = 64) {
  return DepthMap(w, h, z);
}

// Varied but deterministic depth so the normal matrix is well conditioned.
DepthMap wavy_depth(int w = 64, int h = 64) {
  DepthMap d(w, h);
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      d.values.at(x, y) = 2.0 + 0.8 * std::sin(0.3 * x) * std::cos(0.2 * y);
    }
  }
  return d;
}

std::mt19937 rng(7);

Twist random_twist(double t_scale, double r_scale) {
  std::uniform_real_distribution<double> dt(-t_scale, t_scale),
      dr(-r_scale, r_scale);
  return Twist{Vec3(dt(rng), dt(rng), dt(rng)),
               Vec3(dr(rng), dr(rng), dr(rng))};
}

}  // namespace

TEST_CASE("image jacobian closed-form entries") {
  // Hand-evaluated at u_c=10, v_c=-5, Z=2 with fx=80, fy=84.
  const Mat26 j = image_jacobian(10.0, -5.0, 2.0, kIntr);
  CHECK(j(0, 0) == doctest::Approx(-40.0));
  CHECK(j(0, 1) == doctest::Approx(0.0));
  CHECK(j(0, 2) == doctest::Approx(5.0));
  CHECK(j(0, 3) == doctest::Approx(-50.0 / 84.0));
  CHECK(j(0, 4) == doctest::Approx(-80.0 - 100.0 / 80.0));
  CHECK(j(0, 5) == doctest::Approx(-5.0));
  CHECK(j(1, 0) == doctest::Approx(0.0));
  CHECK(j(1, 1) == doctest::Approx(-42.0));
  CHECK(j(1, 2) == doctest::Approx(-2.5));
  CHECK(j(1, 3) == doctest::Approx(84.0 + 25.0 / 84.0));
  CHECK(j(1, 4) == doctest::Approx(50.0 / 80.0));
  CHECK(j(1, 5) == doctest::Approx(-10.0));
}

TEST_CASE("image jacobian classical variant differs only in last column") {
  const Mat26 paper = image_jacobian(10.0, -5.0, 2.0, kIntr,
                                     JacobianVariant::kPaper);
  const Mat26 classical = image_jacobian(10.0, -5.0, 2.0, kIntr,
                                         JacobianVariant::kClassical);
  CHECK((paper.leftCols<5>() - classical.leftCols<5>()).norm() == 0.0);
  CHECK(classical(0, 5) == doctest::Approx(80.0 * -5.0 / 84.0));
  CHECK(classical(1, 5) == doctest::Approx(-84.0 * 10.0 / 80.0));
}

TEST_CASE("image jacobian structure properties") {
  std::uniform_real_distribution<double> du(-30, 30), dz(0.3, 8.0);
  for (int i = 0; i < 1000; ++i) {
    const double u = du(rng), v = du(rng), z = dz(rng);
    const Mat26 j1 = image_jacobian(u, v, z, kIntr);
    const Mat26 j2 = image_jacobian(u, v, 2.0 * z, kIntr);
    // Translation block scales as 1/Z; rotation block is depth-independent.
    CHECK((2.0 * j2.leftCols<3>() - j1.leftCols<3>()).norm() < 1e-9);
    CHECK((j2.rightCols<3>() - j1.rightCols<3>()).norm() == 0.0);
  }
  CHECK_THROWS_AS(image_jacobian(0, 0, 0.0, kIntr), InvalidDepth);
  CHECK_THROWS_AS(image_jacobian(0, 0, -1.0, kIntr), InvalidDepth);
}

TEST_CASE("predict_rigid_flow equals per-pixel jacobian product") {
  const DepthMap depth = wavy_depth();
  const Twist xi = random_twist(0.05, 0.02);
  const FlowField flow = predict_rigid_flow(xi, depth, kIntr);
  for (int y = 0; y < 64; y += 7) {
    for (int x = 0; x < 64; x += 7) {
      const Mat26 j = image_jacobian(x - kIntr.cx, y - kIntr.cy,
                                     depth.values.at(x, y), kIntr);
      const Vec2 f = j * xi.vector();
      CHECK(flow.u_component.at(x, y) == doctest::Approx(f.x()).epsilon(1e-12));
      CHECK(flow.v_component.at(x, y) == doctest::Approx(f.y()).epsilon(1e-12));
    }
  }
}

TEST_CASE("IRLS recovers exact twist from noiseless flow") {
  // Acceptance-style: 100 seeded cases, 1e-9 relative.
  const DepthMap depth = wavy_depth();
  for (int c = 0; c < 100; ++c) {
    const Twist truth = random_twist(0.05, 0.03);
    const FlowField flow = predict_rigid_flow(truth, depth, kIntr);
    const IrlsResult fit =
        fit_twist_irls(flow, depth, MaskGrid(), kIntr, RobustFitConfig{});
    const double rel = (fit.twist.vector() - truth.vector()).norm() /
                       truth.vector().norm();
    CHECK(rel < 1e-9);
  }
}

TEST_CASE("IRLS robust to 20% outliers; MAD mask F1 >= 0.9") {
  const DepthMap depth = wavy_depth();
  for (int c = 0; c < 20; ++c) {
    const Twist truth = random_twist(0.05, 0.03);
    FlowField flow = predict_rigid_flow(truth, depth, kIntr);

    // Corrupt a seeded random 20% of pixels with a +50 px offset.
    MaskGrid truth_outliers(64, 64, 0);
    std::vector<size_t> indices(flow.valid.size());
    for (size_t i = 0; i < indices.size(); ++i) indices[i] = i;
    std::shuffle(indices.begin(), indices.end(), rng);
    const size_t n_out = indices.size() / 5;
    for (size_t i = 0; i < n_out; ++i) {
      flow.u_component[indices[i]] += 50.0;
      flow.v_component[indices[i]] += 50.0;
      truth_outliers[indices[i]] = 1;
    }

    RobustFitConfig cfg;
    const IrlsResult fit = fit_twist_irls(flow, depth, MaskGrid(), kIntr, cfg);
    // The single robust fit gets close; the masked refit below is exact.
    const double rel = (fit.twist.vector() - truth.vector()).norm() /
                       truth.vector().norm();
    CHECK(rel < 5e-3);

    const FlowField rigid = predict_rigid_flow(fit.twist, depth, kIntr);
    const MaskGrid mask = mad_mask(residual_map(flow, rigid), 3.0);
    size_t tp = 0, fp = 0, fn = 0;
    for (size_t i = 0; i < mask.size(); ++i) {
      if (mask[i] && truth_outliers[i]) ++tp;
      if (mask[i] && !truth_outliers[i]) ++fp;
      if (!mask[i] && truth_outliers[i]) ++fn;
    }
    const double f1 = 2.0 * tp / (2.0 * tp + fp + fn);
    CHECK(f1 >= 0.9);

    // Refit on non-masked pixels: the surviving flow is noiseless, so the
    // recovery tightens to well under 1e-3 relative.
    const IrlsResult refit = fit_twist_irls(flow, depth, mask, kIntr, cfg);
    const double rel_refit = (refit.twist.vector() - truth.vector()).norm() /
                             truth.vector().norm();
    CHECK(rel_refit < 1e-3);
  }
}

TEST_CASE("IRLS error paths") {
  // Too few usable pixels.
  DepthMap depth = uniform_depth(0.0, 8, 8);
  FlowField flow(8, 8, true);
  CHECK_THROWS_AS(
      fit_twist_irls(flow, depth, MaskGrid(), kIntr, RobustFitConfig{}),
      InsufficientData);
  // Shape mismatch.
  CHECK_THROWS_AS(fit_twist_irls(FlowField(64, 64), uniform_depth(2.0, 8, 8),
                                 MaskGrid(), kIntr, RobustFitConfig{}),
                  DimensionMismatch);
}

TEST_CASE("exact median") {
  CHECK(exact_median({3.0}) == doctest::Approx(3.0));
  CHECK(exact_median({1.0, 2.0, 9.0}) == doctest::Approx(2.0));
  CHECK(exact_median({1.0, 2.0, 3.0, 10.0}) == doctest::Approx(2.5));
  CHECK(exact_median({5.0, 1.0, 4.0, 2.0, 3.0}) == doctest::Approx(3.0));
  CHECK_THROWS_AS(exact_median({}), EmptyInput);
}

TEST_CASE("mad_mask thresholding is strict and stat-exclusion aware") {
  // Residuals: 96 small values + 4 large ones on a 10x10 grid.
  ScalarGrid r(10, 10, 1.0);
  r.at(0, 0) = 100.0;
  r.at(1, 0) = 100.0;
  r.at(2, 0) = 100.0;
  r.at(3, 0) = 100.0;
  const MaskGrid mask = mad_mask(r, 3.0);
  // median = 1, MAD = 0, threshold 1: only the strict exceeders flagged.
  size_t flagged = 0;
  for (size_t i = 0; i < mask.size(); ++i) flagged += mask[i];
  CHECK(flagged == 4);
  CHECK(mask.at(0, 0) == 1);
  CHECK(mask.at(9, 9) == 0);

  // Excluded pixels stay out of the statistics but can still be masked.
  MaskGrid exclude(10, 10, 0);
  exclude.at(0, 0) = 1;
  const MaskGrid mask2 = mad_mask(r, 3.0, exclude);
  CHECK(mask2.at(0, 0) == 1);

  // Invalid residuals are never masked.
  ScalarGrid rr(4, 4, kInvalidResidual);
  rr.at(0, 0) = 1.0;
  rr.at(1, 0) = 1.0;
  rr.at(2, 0) = 5.0;
  const MaskGrid mask3 = mad_mask(rr, 3.0);
  CHECK(mask3.at(3, 3) == 0);
  CHECK(mask3.at(2, 0) == 1);
}

TEST_CASE("residual_map marks invalid pixels") {
  FlowField a(4, 4, true), b(4, 4, true);
  a.u_component.at(1, 1) = 3.0;
  b.v_component.at(1, 1) = 4.0;
  a.valid.at(0, 0) = 0;
  const ScalarGrid r = residual_map(a, b);
  CHECK(r.at(0, 0) == doctest::Approx(kInvalidResidual));
  CHECK(r.at(1, 1) == doctest::Approx(5.0));
  CHECK(r.at(2, 2) == doctest::Approx(0.0));
}

TEST_CASE("decompose recovers pose and masks the moving object") {
  // Two-frame synthetic scene with a translating sphere and camera motion.
  // Wide field of view plus a tilted background plane: with a narrow FOV and
  // constant background depth, x-translation and y-rotation produce nearly
  // identical flow, and a coherent moving object can pull the whole robust
  // fit into that aliased basin. Depth variation across the image breaks the
  // ambiguity and the fit recovers the camera twist exactly.
  SyntheticSceneConfig cfg;
  cfg.frames = 4;
  cfg.trajectory = SyntheticSceneConfig::Trajectory::kSinusoid;
  cfg.amplitude = 0.04;
  cfg.rot_amplitude = 0.01;
  cfg.focal = 50.0;
  cfg.plane_depth = 2.5;
  cfg.plane_tilt_x = 0.8;
  cfg.plane_tilt_y = 0.3;
  ObjectSpec obj;
  obj.start = Vec3(-0.35, 0.0, 1.8);
  obj.velocity = Vec3(0.03, 0.012, 0.0);
  obj.radius = 0.2;
  cfg.objects.push_back(obj);
  const Dataset ds = generate_synthetic(cfg);

  RobustFitConfig rcfg;
  const DecompositionResult dec =
      decompose(*ds.frames[1].flow_to_prev, ds.frames[1].depth, MaskGrid(),
                ds.gt_poses[0], ds.intrinsics, rcfg);

  // Pose initialization close to ground truth frame-1 pose.
  CHECK((dec.pose_init.translation - ds.gt_poses[1].translation).norm() <
        2e-3);
  CHECK((dec.pose_init.rotation - ds.gt_poses[1].rotation).norm() < 2e-3);

  // The object region dominates the dynamic mask (recall over gt mask).
  size_t tp = 0, total = 0;
  for (size_t i = 0; i < dec.mask_dynamic.size(); ++i) {
    if (ds.gt_object_masks[1][i] && ds.frames[1].flow_to_prev->valid[i]) {
      ++total;
      if (dec.mask_dynamic[i]) ++tp;
    }
  }
  CHECK(total > 0);
  CHECK(static_cast<double>(tp) / total > 0.8);
  CHECK_FALSE(dec.degraded);
}

TEST_CASE("decompose clamps large motion and degrades gracefully") {
  const DepthMap depth = wavy_depth();
  // Implausibly large rigid motion gets clamped to the configured bound.
  Twist big;
  big.rho = Vec3(0.5, 0, 0);
  const FlowField flow = predict_rigid_flow(big, depth, kIntr);
  RobustFitConfig cfg;
  const DecompositionResult dec =
      decompose(flow, depth, MaskGrid(), Pose{}, kIntr, cfg);
  CHECK(dec.clamped);
  CHECK(dec.twist_refined.rho.norm() <= cfg.max_translation + 1e-12);

  // Degraded mode: no usable pixels at all.
  const DecompositionResult bad = decompose(
      FlowField(64, 64, false), depth, MaskGrid(), Pose{}, kIntr, cfg);
  CHECK(bad.degraded);
  CHECK(bad.twist_refined.vector().norm() == 0.0);
  CHECK((bad.pose_init.rotation - Mat3::Identity()).norm() == 0.0);
}

TEST_CASE("decompose is deterministic") {
  const DepthMap depth = wavy_depth();
  const Twist truth = random_twist(0.03, 0.02);
  const FlowField flow = predict_rigid_flow(truth, depth, kIntr);
  const DecompositionResult a =
      decompose(flow, depth, MaskGrid(), Pose{}, kIntr, RobustFitConfig{});
  const DecompositionResult b =
      decompose(flow, depth, MaskGrid(), Pose{}, kIntr, RobustFitConfig{});
  CHECK(a.twist_refined.vector() == b.twist_refined.vector());
  CHECK(a.mask_dynamic == b.mask_dynamic);
}
