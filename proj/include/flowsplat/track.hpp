#pragma once

// Per-frame camera pose refinement against static Gaussians: masked L1 on
// rendered color and depth, minimized by manifold gradient descent with a
// backtracking line search.

#include <cmath>

#include "flowsplat/core.hpp"
#include "flowsplat/lie.hpp"
#include "flowsplat/render.hpp"

namespace flowsplat {

struct TrackingConfig {
  int max_iterations = 100;
  double alpha_threshold = 0.95;  // opacity-mask cutoff
  double lambda1 = 0.9;           // color weight
  double lambda2 = 0.1;           // depth weight
  double step_translation = 2e-3;  // meters per unit normalized gradient
  double step_rotation = 2e-3;     // radians per unit normalized gradient
  double tolerance = 1e-7;  // min loss decrease over `patience` iterations
  int patience = 5;
  int max_halvings = 12;
  RenderConfig render;
};

// M_o = 1(O_hat >= alpha); M_v = (not M_dy) and M_o.
inline MaskGrid valid_mask(const ScalarGrid& alpha_map,
                           const MaskGrid& mask_dynamic,
                           double alpha_threshold) {
  if (!mask_dynamic.empty() && !mask_dynamic.same_shape(alpha_map)) {
    throw DimensionMismatch("valid_mask: grid shapes differ");
  }
  MaskGrid mask(alpha_map.width(), alpha_map.height(), 0);
  for (size_t i = 0; i < alpha_map.size(); ++i) {
    const bool opaque = alpha_map[i] >= alpha_threshold;
    const bool dynamic = !mask_dynamic.empty() && mask_dynamic[i];
    mask[i] = (opaque && !dynamic) ? 1 : 0;
  }
  return mask;
}

struct TrackingLoss {
  double loss = 0.0;
  size_t valid_count = 0;  // |V|: pixels with valid depth
  // Per-pixel adjoints feeding render_with_gradients.
  ColorImage d_color;
  ScalarGrid d_depth;
};

// (1/|V|) sum_{u in V} M_v(u) (l1 * |C_hat - C|_1 + l2 * |D_hat - D|);
// V is the set of pixels with valid input depth. The L1 subgradient at 0 is 0.
inline TrackingLoss tracking_loss(const RenderOutput& render,
                                  const ColorImage& color,
                                  const DepthMap& depth,
                                  const MaskGrid& mask_valid, double lambda1,
                                  double lambda2) {
  const int w = render.color.width(), h = render.color.height();
  if (!color.r.same_shape(w, h) || !depth.values.same_shape(w, h) ||
      !mask_valid.same_shape(w, h)) {
    throw DimensionMismatch("tracking_loss: grid shapes differ");
  }
  TrackingLoss out;
  out.d_color = ColorImage(w, h, 0.0);
  out.d_depth = ScalarGrid(w, h, 0.0);

  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      if (depth.values.at(x, y) > 0.0) ++out.valid_count;
    }
  }
  if (out.valid_count == 0) {
    throw EmptyValidSet("tracking_loss: no pixels with valid depth");
  }
  const double inv_v = 1.0 / static_cast<double>(out.valid_count);

  double loss = 0.0;
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      if (depth.values.at(x, y) <= 0.0 || !mask_valid.at(x, y)) continue;
      const Vec3 dc = render.color.pixel(x, y) - color.pixel(x, y);
      const double dd = render.depth.at(x, y) - depth.values.at(x, y);
      loss += lambda1 * dc.cwiseAbs().sum() + lambda2 * std::abs(dd);
      Vec3 gc;
      for (int ch = 0; ch < 3; ++ch) {
        gc[ch] = dc[ch] > 0 ? 1.0 : (dc[ch] < 0 ? -1.0 : 0.0);
      }
      out.d_color.set_pixel(x, y, lambda1 * inv_v * gc);
      out.d_depth.at(x, y) =
          lambda2 * inv_v * (dd > 0 ? 1.0 : (dd < 0 ? -1.0 : 0.0));
    }
  }
  out.loss = loss * inv_v;
  return out;
}

struct TrackResult {
  Pose pose;
  double loss = 0.0;
  int iterations = 0;
  bool empty_valid = false;
};

// Minimize the tracking loss over the camera pose, starting from the
// decomposition's pose estimate. Update is T <- T * exp(-eta * step) with the
// step scaled per translation/rotation block and halved on loss increase.
inline TrackResult track_frame(const GaussianField& field,
                               const ColorImage& color, const DepthMap& depth,
                               const MaskGrid& mask_dynamic,
                               const Pose& pose_init, const Intrinsics& intr,
                               double t, const TrackingConfig& cfg) {
  TrackResult out;
  out.pose = pose_init;

  auto evaluate = [&](const Pose& pose, RenderOutput* render_out,
                      TrackingLoss* loss_out) -> double {
    RenderOutput render_local =
        render(field, pose, intr, t, RenderSubset::kStatic, cfg.render);
    const MaskGrid mv =
        valid_mask(render_local.alpha, mask_dynamic, cfg.alpha_threshold);
    TrackingLoss tl = tracking_loss(render_local, color, depth, mv,
                                    cfg.lambda1, cfg.lambda2);
    if (render_out) *render_out = std::move(render_local);
    if (loss_out) *loss_out = std::move(tl);
    return loss_out ? loss_out->loss : tl.loss;
  };

  double loss;
  try {
    TrackingLoss tl;
    loss = evaluate(out.pose, nullptr, &tl);
  } catch (const EmptyValidSet&) {
    out.empty_valid = true;
    return out;
  }

  std::vector<double> history{loss};
  double scale = 1.0;  // persistent multiplier on the configured step sizes
  for (int iter = 0; iter < cfg.max_iterations; ++iter) {
    TrackingLoss tl;
    try {
      evaluate(out.pose, nullptr, &tl);
    } catch (const EmptyValidSet&) {
      out.empty_valid = true;
      break;
    }
    const RenderGradients grads = render_with_gradients(
        field, out.pose, intr, t, RenderSubset::kStatic, tl.d_color,
        tl.d_depth, ScalarGrid(), cfg.render);

    Vec6 step = Vec6::Zero();
    const double nt = grads.camera.head<3>().norm();
    const double nr = grads.camera.tail<3>().norm();
    if (nt > 0)
      step.head<3>() =
          -scale * cfg.step_translation * grads.camera.head<3>() / nt;
    if (nr > 0)
      step.tail<3>() =
          -scale * cfg.step_rotation * grads.camera.tail<3>() / nr;
    if (nt == 0 && nr == 0) break;  // stationary point

    // Backtracking: accept the first halved step that decreases the loss.
    double eta_used = 0.0;
    auto try_direction = [&](const Vec6& direction) {
      double eta = 1.0;
      for (int k = 0; k < cfg.max_halvings; ++k, eta *= 0.5) {
        const Pose candidate =
            compose_pose(out.pose, Twist::from_vector(eta * direction));
        double candidate_loss;
        try {
          TrackingLoss unused;
          candidate_loss = evaluate(candidate, nullptr, &unused);
        } catch (const EmptyValidSet&) {
          continue;
        }
        if (candidate_loss < loss) {
          out.pose = candidate;
          loss = candidate_loss;
          eta_used = eta;
          return true;
        }
      }
      return false;
    };
    bool accepted = try_direction(step);
    if (!accepted) {
      // The per-block scaling is only a preconditioner guess; retry along the
      // raw gradient, which is a descent direction wherever the loss is
      // smooth.
      const double raw = scale * std::min(cfg.step_translation, cfg.step_rotation);
      accepted = try_direction(-raw * grads.camera.normalized());
    }
    out.iterations = iter + 1;
    if (accepted) {
      // Carry the accepted scale over and let it grow back gradually, so the
      // search keeps refining below the configured base step instead of
      // stopping at the first scale with no acceptable halving.
      scale = std::min(1.0, scale * std::max(eta_used, 0.25) * 2.0);
    } else {
      scale *= 0.25;
      if (scale < 1e-6) break;
      continue;
    }

    history.push_back(loss);
    const int n = static_cast<int>(history.size());
    if (n > cfg.patience &&
        history[n - 1 - cfg.patience] - history[n - 1] < cfg.tolerance) {
      break;
    }
  }
  out.loss = loss;
  return out;
}

}  // namespace flowsplat
