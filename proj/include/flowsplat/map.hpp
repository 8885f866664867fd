#pragma once

// Keyframe-based 4D map optimization: scene-flow propagation of dynamic
// Gaussian centers, KNN smoothing, adaptive insertion from backward-flow
// backtracking, windowed first-order optimization of the mapping loss, and
// opacity pruning.

#include <cmath>
#include <random>

#include "flowsplat/core.hpp"
#include "flowsplat/gaussians.hpp"
#include "flowsplat/lie.hpp"
#include "flowsplat/render.hpp"

namespace flowsplat {

struct MappingConfig {
  int iterations = 50;
  int window_size = 8;
  int random_past = 2;       // random earlier keyframes added to the window
  int flow_last_n = 25;      // flow loss active in the final n iterations
  int knn_count = 8;
  double knn_radius = 0.25;  // meters
  double tau_knn = 0.05;     // meters
  int density_divisor = 4;   // D_init: insert ~1/D of candidate pixels
  double lambda1 = 0.9;      // color
  double lambda2 = 0.1;      // depth
  double lambda_f = 0.1;     // flow
  double lambda_m = 0.05;    // mask BCE
  double lambda_iso = 10.0;  // isotropy
  // Adam learning rates per parameter group.
  double lr_center = 2e-3;
  double lr_scale = 5e-3;
  double lr_rotation = 2e-3;
  double lr_opacity = 5e-2;
  double lr_color = 2.5e-2;
  double lr_gmm = 1e-2;
  double prune_opacity = 0.02;
  int keyframe_every = 5;
  double mask_diff_threshold = 0.1;
  int static_seed_stride = 2;
  double static_seed_alpha = 0.5;   // seed where rendered alpha is below this
  double static_seed_opacity = 0.9;
  double static_seed_scale_gain = 0.75;  // times stride * z / fx
  int static_warmup_keyframes = 1;  // center trainable this many kfs past birth
  double insert_opacity = 0.5;
  double insert_tau = 0.2;
  double insert_target_visibility = 0.9;  // m(t_birth) for new Gaussians
  int gmm_components = 3;
  // Ablation switches.
  bool enable_propagation = true;
  bool enable_knn_smooth = true;
  bool enable_insertion = true;
  bool enable_gmm = true;
  RenderConfig render;
};

struct KeyframeRecord {
  int frame = 0;           // source frame index
  int keyframe = 0;        // keyframe ordinal (slot in the field)
  double timestamp = 0.0;
  Pose pose;               // T_cw after tracking
  MaskGrid mask_dynamic;   // M_dy at this frame
  ColorImage color;
  DepthMap depth;
  FlowField flow_from_prev_kf;  // F^{t_{k-1}, t_k}, on the previous kf grid
  FlowField flow_to_prev_kf;    // F^{t_k, t_{k-1}}, on this kf grid
};

namespace detail {

// Bilinear flow sample at a real-valued pixel; all four corners must be valid.
inline bool bilinear_flow(const FlowField& flow, double u, double v,
                          Vec2* out) {
  const int x0 = static_cast<int>(std::floor(u));
  const int y0 = static_cast<int>(std::floor(v));
  if (x0 < 0 || y0 < 0 || x0 + 1 >= flow.width() || y0 + 1 >= flow.height()) {
    return false;
  }
  const double fu = u - x0, fv = v - y0;
  double wsum[4] = {(1 - fu) * (1 - fv), fu * (1 - fv), (1 - fu) * fv,
                    fu * fv};
  const int xs[4] = {x0, x0 + 1, x0, x0 + 1};
  const int ys[4] = {y0, y0, y0 + 1, y0 + 1};
  Vec2 acc = Vec2::Zero();
  for (int i = 0; i < 4; ++i) {
    if (!flow.valid.at(xs[i], ys[i])) return false;
    acc += wsum[i] * Vec2(flow.u_component.at(xs[i], ys[i]),
                          flow.v_component.at(xs[i], ys[i]));
  }
  *out = acc;
  return true;
}

// Invalid-aware bilinear depth: weights renormalized over valid corners.
inline bool bilinear_depth(const DepthMap& depth, double u, double v,
                           double* out) {
  const int x0 = static_cast<int>(std::floor(u));
  const int y0 = static_cast<int>(std::floor(v));
  if (x0 < 0 || y0 < 0 || x0 + 1 >= depth.width() || y0 + 1 >= depth.height()) {
    return false;
  }
  const double fu = u - x0, fv = v - y0;
  const double w[4] = {(1 - fu) * (1 - fv), fu * (1 - fv), (1 - fu) * fv,
                       fu * fv};
  const int xs[4] = {x0, x0 + 1, x0, x0 + 1};
  const int ys[4] = {y0, y0, y0 + 1, y0 + 1};
  double acc = 0.0, wsum = 0.0;
  for (int i = 0; i < 4; ++i) {
    const double z = depth.values.at(xs[i], ys[i]);
    if (z <= 0.0) continue;
    acc += w[i] * z;
    wsum += w[i];
  }
  if (wsum <= 1e-12) return false;
  *out = acc / wsum;
  return true;
}

}  // namespace detail

struct PropagationResult {
  std::vector<Vec3> delta;  // raw delta x per dynamic Gaussian
  std::vector<char> ok;     // propagation succeeded
  std::vector<char> live;   // Gaussian has a center at keyframe k-1
};

// Project x^{k-1} with the previous keyframe pose, advect by the prior flow,
// read depth at the landing pixel, and unproject with the new pose.
inline PropagationResult propagate_gaussians(const GaussianField& field, int k,
                                             const Pose& pose_prev,
                                             const Pose& pose_new,
                                             const FlowField& flow_fwd,
                                             const DepthMap& depth_new,
                                             const Intrinsics& intr) {
  const size_t n = field.dynamic_set.size();
  PropagationResult out;
  out.delta.assign(n, Vec3::Zero());
  out.ok.assign(n, 0);
  out.live.assign(n, 0);

  for (size_t i = 0; i < n; ++i) {
    const DynamicGaussian& g = field.dynamic_set[i];
    if (g.birth_keyframe > k - 1 || g.last_keyframe() < k - 1) continue;
    out.live[i] = 1;
    const Vec3 x_prev = g.center_at_keyframe(k - 1);
    Vec2 pix;
    try {
      pix = project(intr, pose_prev, x_prev).pixel;
    } catch (const BehindCamera&) {
      continue;
    }
    if (pix.x() < 0 || pix.x() > intr.width - 1 || pix.y() < 0 ||
        pix.y() > intr.height - 1) {
      continue;
    }
    Vec2 f;
    if (flow_fwd.width() == 0 ||
        !detail::bilinear_flow(flow_fwd, pix.x(), pix.y(), &f)) {
      continue;
    }
    const Vec2 landed = pix + f;
    double d;
    if (!detail::bilinear_depth(depth_new, landed.x(), landed.y(), &d)) {
      continue;
    }
    out.delta[i] = unproject(intr, pose_new, landed, d) - x_prev;
    out.ok[i] = 1;
  }
  return out;
}

// KNN smoothing of the raw deltas with normalized Gaussian distance weights.
// Failed propagations contribute nothing but still receive smoothed values.
inline std::vector<Vec3> knn_smooth(const std::vector<Vec3>& deltas,
                                    const std::vector<char>& ok,
                                    const std::vector<char>& live,
                                    const std::vector<Vec3>& centers_prev,
                                    const MappingConfig& cfg) {
  const size_t n = deltas.size();
  if (centers_prev.size() != n || ok.size() != n || live.size() != n) {
    throw DimensionMismatch("knn_smooth: list lengths differ");
  }
  std::vector<Vec3> smoothed(n, Vec3::Zero());
  const double inv_2tau2 = 1.0 / (2.0 * cfg.tau_knn * cfg.tau_knn);

  for (size_t i = 0; i < n; ++i) {
    if (!live[i]) continue;
    // Candidate sources: valid propagations within the radius (self included).
    std::vector<std::pair<double, size_t>> near;
    for (size_t j = 0; j < n; ++j) {
      if (!live[j] || !ok[j]) continue;
      const double dist = (centers_prev[j] - centers_prev[i]).norm();
      if (j != i && dist > cfg.knn_radius) continue;
      near.emplace_back(dist, j);
    }
    if (near.empty()) continue;  // fallback: delta stays zero
    std::sort(near.begin(), near.end());
    const size_t keep = std::min<size_t>(near.size(), cfg.knn_count);
    double wsum = 0.0;
    Vec3 acc = Vec3::Zero();
    for (size_t m = 0; m < keep; ++m) {
      const double w = std::exp(-near[m].first * near[m].first * inv_2tau2);
      wsum += w;
      acc += w * deltas[near[m].second];
    }
    smoothed[i] = acc / wsum;
  }
  return smoothed;
}

// Eq-style insertion region: dynamic pixels at keyframe k whose backtracked
// position (nearest-neighbor via the backward flow) was not dynamic at k-1.
// Invalid backward flow backtracks in place; out-of-image counts as "not in
// the previous mask".
inline MaskGrid insertion_mask(const MaskGrid& mask_new,
                               const MaskGrid& mask_prev,
                               const FlowField& flow_bwd) {
  const int w = mask_new.width(), h = mask_new.height();
  if ((!mask_prev.empty() && !mask_prev.same_shape(w, h)) ||
      (flow_bwd.width() > 0 && !flow_bwd.valid.same_shape(w, h))) {
    throw DimensionMismatch("insertion_mask: grid shapes differ");
  }
  MaskGrid out(w, h, 0);
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      if (!mask_new.at(x, y)) continue;
      double u = x, v = y;
      if (flow_bwd.width() > 0 && flow_bwd.valid.at(x, y)) {
        u += flow_bwd.u_component.at(x, y);
        v += flow_bwd.v_component.at(x, y);
      }
      const int xi = static_cast<int>(std::lround(u));
      const int yi = static_cast<int>(std::lround(v));
      const bool was_dynamic = !mask_prev.empty() &&
                               mask_prev.contains(xi, yi) &&
                               mask_prev.at(xi, yi);
      if (!was_dynamic) out.at(x, y) = 1;
    }
  }
  return out;
}

// Spawn new dynamic Gaussians on a seeded subsample of the insertion region.
inline std::vector<DynamicGaussian> adaptive_insert(
    const MaskGrid& mask_new, const MaskGrid& mask_prev,
    const FlowField& flow_bwd, const DepthMap& depth_new, const Pose& pose_new,
    const Intrinsics& intr, const ColorImage& frame_color, int birth_keyframe,
    double t_hat_birth, const MappingConfig& cfg, std::mt19937& rng) {
  const MaskGrid region = insertion_mask(mask_new, mask_prev, flow_bwd);

  struct Seed {
    int x, y;
    Vec3 center;
  };
  std::vector<Seed> seeds;
  const unsigned divisor = std::max(1, cfg.density_divisor);
  for (int y = 0; y < region.height(); ++y) {
    for (int x = 0; x < region.width(); ++x) {
      if (!region.at(x, y)) continue;
      if (rng() % divisor != 0) continue;
      const double z = depth_new.values.at(x, y);
      if (z <= 0.0) continue;
      seeds.push_back({x, y, unproject(intr, pose_new, Vec2(x, y), z)});
    }
  }

  std::vector<DynamicGaussian> out;
  out.reserve(seeds.size());
  for (const Seed& s : seeds) {
    // Scale from the mean distance to the 3 nearest other seeds.
    std::vector<double> dists;
    for (const Seed& o : seeds) {
      if (&o != &s) dists.push_back((o.center - s.center).norm());
    }
    double scale = 0.05;
    if (!dists.empty()) {
      const size_t keep = std::min<size_t>(3, dists.size());
      std::partial_sort(dists.begin(), dists.begin() + keep, dists.end());
      double mean = 0.0;
      for (size_t i = 0; i < keep; ++i) mean += dists[i];
      scale = std::max(1e-4, mean / keep);
    }

    DynamicGaussian g;
    g.birth_keyframe = birth_keyframe;
    g.keyframe_centers = {s.center};
    g.log_scale = Vec3::Constant(std::log(scale));
    g.opacity_logit = logit(cfg.insert_opacity);
    g.color = frame_color.pixel(s.x, s.y);
    const int kk = std::max(1, cfg.gmm_components);
    for (int c = 0; c < kk; ++c) {
      GmmComponent comp;
      comp.weight_logit = inv_softplus(1.0);
      comp.mean = kk == 1 ? t_hat_birth
                          : t_hat_birth + (1.0 - t_hat_birth) * c / (kk - 1);
      comp.log_tau = std::log(cfg.insert_tau);
      comp.quaternion = Vec4(1, 0, 0, 0);
      g.gmm.push_back(comp);
    }
    if (cfg.enable_gmm) {
      // Choose the amplitude so the Gaussian is visible at birth.
      const double act = gmm_activation(g, t_hat_birth);
      const double target = std::clamp(cfg.insert_target_visibility, 0.01, 0.999);
      g.amplitude_log = std::log(-std::log(1.0 - target) / std::max(act, 1e-9));
    } else {
      g.amplitude_log = std::log(50.0);  // m(t) ~ 1 for all t: GMM disabled
    }
    out.push_back(std::move(g));
  }
  return out;
}

inline bool keyframe_decision(const MaskGrid& mask_current,
                              const MaskGrid& mask_last_kf,
                              int frames_since_kf, const MappingConfig& cfg) {
  if (frames_since_kf >= cfg.keyframe_every) return true;
  if (mask_current.empty() && mask_last_kf.empty()) return false;
  size_t area = 0, diff = 0;
  const size_t n =
      mask_current.empty() ? mask_last_kf.size() : mask_current.size();
  if (n == 0) return false;
  area = n;
  for (size_t i = 0; i < n; ++i) {
    const bool a = !mask_current.empty() && mask_current[i];
    const bool b = !mask_last_kf.empty() && i < mask_last_kf.size() &&
                   mask_last_kf[i];
    if (a != b) ++diff;
  }
  return static_cast<double>(diff) / area > cfg.mask_diff_threshold;
}

struct MappingLossResult {
  double total = 0.0;
  double color = 0.0, depth = 0.0, flow = 0.0, mask = 0.0, iso = 0.0;
  RenderGradients grads;
};

namespace detail {

// L_iso = mean over Gaussians of sum_axes |exp(s) - mean(exp(s))|;
// gradients accumulated directly into the parameter grads (pre-weighted).
inline double isotropy_loss(const GaussianField& field, double weight,
                            RenderGradients& grads) {
  const size_t n = field.static_set.size() + field.dynamic_set.size();
  if (n == 0) return 0.0;
  double loss = 0.0;
  auto accumulate = [&](const Vec3& log_scale, Vec3& grad) {
    const Vec3 e = log_scale.array().exp();
    const double mean = e.mean();
    Vec3 sign;
    double sign_sum = 0.0;
    for (int a = 0; a < 3; ++a) {
      loss += std::abs(e[a] - mean);
      sign[a] = e[a] > mean ? 1.0 : (e[a] < mean ? -1.0 : 0.0);
      sign_sum += sign[a];
    }
    for (int a = 0; a < 3; ++a) {
      grad += Vec3::Unit(a) * (weight / n) * (sign[a] - sign_sum / 3.0) * e[a];
    }
  };
  for (size_t i = 0; i < field.static_set.size(); ++i) {
    accumulate(field.static_set[i].log_scale, grads.static_grads[i].log_scale);
  }
  for (size_t i = 0; i < field.dynamic_set.size(); ++i) {
    accumulate(field.dynamic_set[i].log_scale,
               grads.dynamic_grads[i].log_scale);
  }
  return loss / n;
}

inline void merge_gradients(RenderGradients& into, const RenderGradients& from) {
  for (size_t i = 0; i < from.static_grads.size(); ++i) {
    StaticGrad& a = into.static_grads[i];
    const StaticGrad& b = from.static_grads[i];
    a.center += b.center;
    a.log_scale += b.log_scale;
    a.rotation += b.rotation;
    a.opacity_logit += b.opacity_logit;
    a.color += b.color;
  }
  for (size_t i = 0; i < from.dynamic_grads.size(); ++i) {
    DynamicGrad& a = into.dynamic_grads[i];
    const DynamicGrad& b = from.dynamic_grads[i];
    for (size_t k = 0; k < b.keyframe_centers.size(); ++k) {
      a.keyframe_centers[k] += b.keyframe_centers[k];
    }
    a.log_scale += b.log_scale;
    a.opacity_logit += b.opacity_logit;
    a.color += b.color;
    a.amplitude_log += b.amplitude_log;
    for (size_t k = 0; k < b.gmm.size(); ++k) {
      a.gmm[k].weight_logit += b.gmm[k].weight_logit;
      a.gmm[k].mean += b.gmm[k].mean;
      a.gmm[k].log_tau += b.gmm[k].log_tau;
      a.gmm[k].quaternion += b.gmm[k].quaternion;
    }
  }
  into.camera += from.camera;
}

}  // namespace detail

// Full mapping loss on one keyframe: masked-L1 color/depth on the combined
// render, BCE between the dynamic alpha map and M_dy (minimum subtracted so a
// perfect fit scores 0), optional flow loss against the prior inter-keyframe
// flow inside the previous keyframe's dynamic mask, and the isotropy
// regularizer. Returns the loss value plus merged parameter gradients.
inline MappingLossResult mapping_loss(const GaussianField& field,
                                      const KeyframeRecord& kf,
                                      const KeyframeRecord* kf_prev,
                                      const Intrinsics& intr,
                                      const MappingConfig& cfg,
                                      bool flow_active) {
  MappingLossResult out;
  out.grads.static_grads.resize(field.static_set.size());
  out.grads.dynamic_grads.resize(field.dynamic_set.size());
  for (size_t i = 0; i < field.dynamic_set.size(); ++i) {
    out.grads.dynamic_grads[i].keyframe_centers.assign(
        field.dynamic_set[i].keyframe_centers.size(), Vec3::Zero());
    out.grads.dynamic_grads[i].gmm.resize(field.dynamic_set[i].gmm.size());
  }

  const int w = intr.width, h = intr.height;

  // Photometric + depth terms on the combined render.
  const RenderOutput both = render(field, kf.pose, intr, kf.timestamp,
                                   RenderSubset::kBoth, cfg.render);
  size_t valid = 0;
  for (size_t i = 0; i < kf.depth.values.size(); ++i) {
    if (kf.depth.values[i] > 0.0) ++valid;
  }
  ColorImage d_color(w, h, 0.0);
  ScalarGrid d_depth(w, h, 0.0);
  if (valid > 0) {
    const double inv_v = 1.0 / static_cast<double>(valid);
    for (int y = 0; y < h; ++y) {
      for (int x = 0; x < w; ++x) {
        if (kf.depth.values.at(x, y) <= 0.0) continue;
        const Vec3 dc = both.color.pixel(x, y) - kf.color.pixel(x, y);
        const double dd = both.depth.at(x, y) - kf.depth.values.at(x, y);
        out.color += dc.cwiseAbs().sum() * inv_v;
        out.depth += std::abs(dd) * inv_v;
        Vec3 gc;
        for (int ch = 0; ch < 3; ++ch) {
          gc[ch] = dc[ch] > 0 ? 1.0 : (dc[ch] < 0 ? -1.0 : 0.0);
        }
        d_color.set_pixel(x, y, cfg.lambda1 * inv_v * gc);
        d_depth.at(x, y) =
            cfg.lambda2 * inv_v * (dd > 0 ? 1.0 : (dd < 0 ? -1.0 : 0.0));
      }
    }
  }
  const RenderGradients main_grads =
      render_with_gradients(field, kf.pose, intr, kf.timestamp,
                            RenderSubset::kBoth, d_color, d_depth,
                            ScalarGrid(), cfg.render);
  detail::merge_gradients(out.grads, main_grads);

  // Mask loss: BCE between dynamic-subset alpha and the motion mask.
  if (cfg.lambda_m > 0 && !field.dynamic_set.empty()) {
    const RenderOutput dyn = render(field, kf.pose, intr, kf.timestamp,
                                    RenderSubset::kDynamic, cfg.render);
    ScalarGrid d_alpha(w, h, 0.0);
    const double inv_n = 1.0 / static_cast<double>(dyn.alpha.size());
    for (int y = 0; y < h; ++y) {
      for (int x = 0; x < w; ++x) {
        const bool dyn_px = !kf.mask_dynamic.empty() && kf.mask_dynamic.at(x, y);
        const double target = dyn_px ? 0.95 : 0.05;
        const double a = std::clamp(dyn.alpha.at(x, y), 1e-6, 1.0 - 1e-6);
        const double bce = -target * std::log(a) -
                           (1.0 - target) * std::log(1.0 - a);
        const double floor = -target * std::log(target) -
                             (1.0 - target) * std::log(1.0 - target);
        out.mask += (bce - floor) * inv_n;
        d_alpha.at(x, y) = cfg.lambda_m * inv_n *
                           (-target / a + (1.0 - target) / (1.0 - a));
      }
    }
    const RenderGradients mask_grads = render_with_gradients(
        field, kf.pose, intr, kf.timestamp, RenderSubset::kDynamic,
        ColorImage(), ScalarGrid(), d_alpha, cfg.render);
    detail::merge_gradients(out.grads, mask_grads);
  }

  // Flow loss: dynamic-subset rendered flow vs the prior inter-keyframe flow,
  // restricted to the previous keyframe's dynamic mask.
  if (flow_active && cfg.lambda_f > 0 && kf_prev != nullptr &&
      kf.flow_from_prev_kf.width() == w && !field.dynamic_set.empty()) {
    const FlowField rendered = render_flow(
        field, kf_prev->pose, kf.pose, intr, kf_prev->timestamp, kf.timestamp,
        RenderSubset::kDynamic, cfg.render);
    size_t count = 0;
    for (int y = 0; y < h; ++y) {
      for (int x = 0; x < w; ++x) {
        if (kf_prev->mask_dynamic.empty() || !kf_prev->mask_dynamic.at(x, y)) {
          continue;
        }
        if (!rendered.valid.at(x, y) || !kf.flow_from_prev_kf.valid.at(x, y)) {
          continue;
        }
        ++count;
      }
    }
    if (count > 0) {
      const double inv_c = 1.0 / static_cast<double>(count);
      ScalarGrid d_u(w, h, 0.0), d_v(w, h, 0.0);
      for (int y = 0; y < h; ++y) {
        for (int x = 0; x < w; ++x) {
          if (kf_prev->mask_dynamic.empty() ||
              !kf_prev->mask_dynamic.at(x, y)) {
            continue;
          }
          if (!rendered.valid.at(x, y) ||
              !kf.flow_from_prev_kf.valid.at(x, y)) {
            continue;
          }
          const double du = rendered.u_component.at(x, y) -
                            kf.flow_from_prev_kf.u_component.at(x, y);
          const double dv = rendered.v_component.at(x, y) -
                            kf.flow_from_prev_kf.v_component.at(x, y);
          out.flow += (std::abs(du) + std::abs(dv)) * inv_c;
          d_u.at(x, y) = cfg.lambda_f * inv_c *
                         (du > 0 ? 1.0 : (du < 0 ? -1.0 : 0.0));
          d_v.at(x, y) = cfg.lambda_f * inv_c *
                         (dv > 0 ? 1.0 : (dv < 0 ? -1.0 : 0.0));
        }
      }
      render_flow_backward_centers(field, kf_prev->pose, kf.pose, intr,
                                   kf_prev->timestamp, kf.timestamp,
                                   RenderSubset::kDynamic, d_u, d_v,
                                   out.grads.dynamic_grads, cfg.render);
    }
  }

  out.iso = detail::isotropy_loss(field, cfg.lambda_iso, out.grads);
  out.total = cfg.lambda1 * out.color + cfg.lambda2 * out.depth +
              cfg.lambda_f * out.flow + cfg.lambda_m * out.mask +
              cfg.lambda_iso * out.iso;
  return out;
}

struct MapStats {
  int frame = 0;
  int keyframe = 0;
  size_t n_static = 0;
  size_t n_dynamic = 0;
  size_t inserted = 0;
  size_t pruned = 0;
  double loss_color = 0.0, loss_depth = 0.0, loss_flow = 0.0,
         loss_mask = 0.0, loss_iso = 0.0, loss_total = 0.0;
};

// Single-writer owner of the Gaussian field and its optimizer state.
class Mapper {
 public:
  Mapper(const Intrinsics& intr, const MappingConfig& cfg, unsigned seed,
         double time_min, double time_max)
      : intr_(intr), cfg_(cfg), rng_(seed) {
    field_.time_min = time_min;
    field_.time_max = time_max;
  }

  const GaussianField& field() const { return field_; }
  GaussianField& field() { return field_; }
  const std::vector<KeyframeRecord>& keyframes() const { return keyframes_; }
  const MappingConfig& config() const { return cfg_; }

  // Integrates a new keyframe (propagate, smooth, insert, seed statics) and
  // runs the windowed optimization.
  MapStats map_step(KeyframeRecord record) {
    const int k = static_cast<int>(keyframes_.size());
    record.keyframe = k;
    keyframes_.push_back(std::move(record));
    const KeyframeRecord& kf = keyframes_.back();

    MapStats stats;
    stats.frame = kf.frame;
    stats.keyframe = k;

    add_keyframe_slot(field_, k, kf.timestamp);

    if (k > 0) {
      const KeyframeRecord& prev = keyframes_[k - 1];
      if (cfg_.enable_propagation) {
        PropagationResult prop =
            propagate_gaussians(field_, k, prev.pose, kf.pose,
                                kf.flow_from_prev_kf, kf.depth, intr_);
        std::vector<Vec3> centers_prev(field_.dynamic_set.size(),
                                       Vec3::Zero());
        for (size_t i = 0; i < field_.dynamic_set.size(); ++i) {
          if (prop.live[i]) {
            centers_prev[i] = field_.dynamic_set[i].center_at_keyframe(k - 1);
          }
        }
        const std::vector<Vec3> applied =
            cfg_.enable_knn_smooth
                ? knn_smooth(prop.delta, prop.ok, prop.live, centers_prev,
                             cfg_)
                : prop.delta;
        for (size_t i = 0; i < field_.dynamic_set.size(); ++i) {
          if (!prop.live[i]) continue;
          field_.dynamic_set[i].center_at_keyframe(k) =
              centers_prev[i] + applied[i];
        }
      }
      if (cfg_.enable_insertion) {
        std::vector<DynamicGaussian> born = adaptive_insert(
            kf.mask_dynamic, prev.mask_dynamic, kf.flow_to_prev_kf, kf.depth,
            kf.pose, intr_, kf.color, k, field_.normalize_time(kf.timestamp),
            cfg_, rng_);
        stats.inserted = born.size();
        for (DynamicGaussian& g : born) {
          field_.dynamic_set.push_back(std::move(g));
        }
      }
    } else if (cfg_.enable_insertion && !kf.mask_dynamic.empty()) {
      // First keyframe: everything dynamic is new.
      std::vector<DynamicGaussian> born = adaptive_insert(
          kf.mask_dynamic, MaskGrid(), FlowField(), kf.depth, kf.pose, intr_,
          kf.color, k, field_.normalize_time(kf.timestamp), cfg_, rng_);
      stats.inserted = born.size();
      for (DynamicGaussian& g : born) {
        field_.dynamic_set.push_back(std::move(g));
      }
    }
    seed_static(kf);
    sync_optimizer_state();

    // Windowed optimization: one sampled keyframe per iteration.
    for (int it = 0; it < cfg_.iterations; ++it) {
      const int target = sample_keyframe();
      const KeyframeRecord& tkf = keyframes_[target];
      const KeyframeRecord* tprev =
          target > 0 ? &keyframes_[target - 1] : nullptr;
      const bool flow_active = it >= cfg_.iterations - cfg_.flow_last_n;
      MappingLossResult loss =
          mapping_loss(field_, tkf, tprev, intr_, cfg_, flow_active);
      apply_updates(loss.grads);
      if (it == cfg_.iterations - 1) {
        stats.loss_color = loss.color;
        stats.loss_depth = loss.depth;
        stats.loss_flow = loss.flow;
        stats.loss_mask = loss.mask;
        stats.loss_iso = loss.iso;
        stats.loss_total = loss.total;
      }
    }

    stats.pruned = prune();
    stats.n_static = field_.static_set.size();
    stats.n_dynamic = field_.dynamic_set.size();
    return stats;
  }

  // Post-pass: extra full-parameter optimization sampling uniformly over all
  // keyframes, so late keyframes (which saw fewer windowed passes) catch up.
  void global_refinement(int iterations) {
    if (keyframes_.empty()) return;
    sync_optimizer_state();
    for (int it = 0; it < iterations; ++it) {
      const int target = static_cast<int>(rng_() % keyframes_.size());
      const KeyframeRecord& tkf = keyframes_[target];
      const KeyframeRecord* tprev =
          target > 0 ? &keyframes_[target - 1] : nullptr;
      MappingLossResult loss =
          mapping_loss(field_, tkf, tprev, intr_, cfg_, false);
      apply_updates(loss.grads);
    }
    prune();
  }

  // Post-pass: geometry frozen, only color and opacity trainable.
  void color_refinement(int iterations) {
    if (keyframes_.empty()) return;
    sync_optimizer_state();
    for (int it = 0; it < iterations; ++it) {
      const int target =
          static_cast<int>(rng_() % keyframes_.size());
      const KeyframeRecord& tkf = keyframes_[target];
      MappingLossResult loss =
          mapping_loss(field_, tkf, nullptr, intr_, cfg_, false);
      apply_updates(loss.grads, /*color_only=*/true);
    }
  }

 private:
  struct Adam {
    Vec3 m = Vec3::Zero(), v = Vec3::Zero();
  };
  struct AdamScalar {
    double m = 0.0, v = 0.0;
  };
  struct Adam4 {
    Vec4 m = Vec4::Zero(), v = Vec4::Zero();
  };

  struct StaticState {
    int birth_keyframe = 0;
    Adam center, log_scale, color;
    Adam4 rotation;
    AdamScalar opacity;
  };
  struct DynamicState {
    std::vector<Adam> centers;
    Adam log_scale, color;
    AdamScalar opacity, amplitude;
    struct GmmState {
      AdamScalar weight, mean, log_tau;
      Adam4 quaternion;
    };
    std::vector<GmmState> gmm;
  };

  void seed_static(const KeyframeRecord& kf) {
    const RenderOutput current = render(field_, kf.pose, intr_, kf.timestamp,
                                        RenderSubset::kBoth, cfg_.render);
    const int stride = std::max(1, cfg_.static_seed_stride);
    for (int y = 0; y < intr_.height; y += stride) {
      for (int x = 0; x < intr_.width; x += stride) {
        const double z = kf.depth.values.at(x, y);
        if (z <= 0.0) continue;
        if (!kf.mask_dynamic.empty() && kf.mask_dynamic.at(x, y)) continue;
        if (current.alpha.at(x, y) >= cfg_.static_seed_alpha) continue;
        StaticGaussian g;
        g.center = unproject(intr_, kf.pose, Vec2(x, y), z);
        g.color = kf.color.pixel(x, y);
        g.opacity_logit = logit(cfg_.static_seed_opacity);
        const double scale =
            cfg_.static_seed_scale_gain * stride * z / intr_.fx;
        g.log_scale = Vec3::Constant(std::log(std::max(1e-4, scale)));
        field_.static_set.push_back(g);
        static_state_.push_back(
            StaticState{static_cast<int>(keyframes_.size()) - 1});
      }
    }
  }

  void sync_optimizer_state() {
    static_state_.resize(field_.static_set.size());
    dynamic_state_.resize(field_.dynamic_set.size());
    for (size_t i = 0; i < field_.dynamic_set.size(); ++i) {
      dynamic_state_[i].centers.resize(
          field_.dynamic_set[i].keyframe_centers.size());
      dynamic_state_[i].gmm.resize(field_.dynamic_set[i].gmm.size());
    }
  }

  int sample_keyframe() {
    const int n = static_cast<int>(keyframes_.size());
    const int window_lo = std::max(0, n - cfg_.window_size);
    std::vector<int> pool;
    for (int i = window_lo; i < n; ++i) pool.push_back(i);
    if (window_lo > 0) {
      for (int r = 0; r < cfg_.random_past; ++r) {
        pool.push_back(static_cast<int>(rng_() % window_lo));
      }
    }
    return pool[rng_() % pool.size()];
  }

  static double adam_step(AdamScalar& st, double grad, double lr) {
    constexpr double b1 = 0.9, b2 = 0.999, eps = 1e-8;
    st.m = b1 * st.m + (1 - b1) * grad;
    st.v = b2 * st.v + (1 - b2) * grad * grad;
    return -lr * st.m / (std::sqrt(st.v) + eps);
  }
  static Vec3 adam_step(Adam& st, const Vec3& grad, double lr) {
    constexpr double b1 = 0.9, b2 = 0.999, eps = 1e-8;
    st.m = b1 * st.m + (1 - b1) * grad;
    st.v = b2 * st.v.array() + (1 - b2) * grad.array().square();
    return (-lr * st.m.array() / (st.v.array().sqrt() + eps)).matrix();
  }
  static Vec4 adam_step(Adam4& st, const Vec4& grad, double lr) {
    constexpr double b1 = 0.9, b2 = 0.999, eps = 1e-8;
    st.m = b1 * st.m + (1 - b1) * grad;
    st.v = b2 * st.v.array() + (1 - b2) * grad.array().square();
    return (-lr * st.m.array() / (st.v.array().sqrt() + eps)).matrix();
  }

  void apply_updates(const RenderGradients& grads, bool color_only = false) {
    const int current_kf = static_cast<int>(keyframes_.size()) - 1;
    for (size_t i = 0; i < field_.static_set.size(); ++i) {
      StaticGaussian& g = field_.static_set[i];
      StaticState& st = static_state_[i];
      const StaticGrad& gr = grads.static_grads[i];
      g.color += adam_step(st.color, gr.color, cfg_.lr_color);
      g.opacity_logit +=
          adam_step(st.opacity, gr.opacity_logit, cfg_.lr_opacity);
      if (color_only) continue;
      if (current_kf <= st.birth_keyframe + cfg_.static_warmup_keyframes) {
        g.center += adam_step(st.center, gr.center, cfg_.lr_center);
      }
      g.log_scale += adam_step(st.log_scale, gr.log_scale, cfg_.lr_scale);
      g.rotation += adam_step(st.rotation, gr.rotation, cfg_.lr_rotation);
      const double n = g.rotation.norm();
      g.rotation = n > 1e-12 ? Vec4(g.rotation / n) : Vec4(1, 0, 0, 0);
    }
    for (size_t i = 0; i < field_.dynamic_set.size(); ++i) {
      DynamicGaussian& g = field_.dynamic_set[i];
      DynamicState& st = dynamic_state_[i];
      const DynamicGrad& gr = grads.dynamic_grads[i];
      g.color += adam_step(st.color, gr.color, cfg_.lr_color);
      g.opacity_logit +=
          adam_step(st.opacity, gr.opacity_logit, cfg_.lr_opacity);
      if (color_only) continue;
      for (size_t c = 0; c < g.keyframe_centers.size(); ++c) {
        g.keyframe_centers[c] +=
            adam_step(st.centers[c], gr.keyframe_centers[c], cfg_.lr_center);
      }
      g.log_scale += adam_step(st.log_scale, gr.log_scale, cfg_.lr_scale);
      g.amplitude_log +=
          cfg_.enable_gmm
              ? adam_step(st.amplitude, gr.amplitude_log, cfg_.lr_opacity)
              : 0.0;
      for (size_t c = 0; c < g.gmm.size(); ++c) {
        if (!cfg_.enable_gmm) break;
        GmmComponent& comp = g.gmm[c];
        comp.weight_logit += adam_step(st.gmm[c].weight,
                                       gr.gmm[c].weight_logit, cfg_.lr_gmm);
        comp.mean += adam_step(st.gmm[c].mean, gr.gmm[c].mean, cfg_.lr_gmm);
        comp.mean = std::clamp(comp.mean, 0.0, 1.0);
        comp.log_tau +=
            adam_step(st.gmm[c].log_tau, gr.gmm[c].log_tau, cfg_.lr_gmm);
        comp.quaternion += adam_step(st.gmm[c].quaternion,
                                     gr.gmm[c].quaternion, cfg_.lr_rotation);
        const double n = comp.quaternion.norm();
        comp.quaternion =
            n > 1e-12 ? Vec4(comp.quaternion / n) : Vec4(1, 0, 0, 0);
      }
    }
  }

  // Remove Gaussians whose opacity never reaches the threshold at any
  // keyframe timestamp in the current window.
  size_t prune() {
    const int n = static_cast<int>(keyframes_.size());
    const int window_lo = std::max(0, n - cfg_.window_size);
    std::vector<double> window_times;
    for (int i = window_lo; i < n; ++i) {
      window_times.push_back(field_.normalize_time(keyframes_[i].timestamp));
    }
    size_t pruned = 0;

    {
      size_t dst = 0;
      for (size_t i = 0; i < field_.static_set.size(); ++i) {
        if (field_.static_set[i].opacity() >= cfg_.prune_opacity) {
          field_.static_set[dst] = field_.static_set[i];
          static_state_[dst] = static_state_[i];
          ++dst;
        } else {
          ++pruned;
        }
      }
      field_.static_set.resize(dst);
      static_state_.resize(dst);
    }
    {
      size_t dst = 0;
      for (size_t i = 0; i < field_.dynamic_set.size(); ++i) {
        double peak = 0.0;
        for (double t_hat : window_times) {
          peak = std::max(peak, opacity_at(field_.dynamic_set[i], t_hat));
        }
        if (peak >= cfg_.prune_opacity) {
          if (dst != i) {  // self-move would empty the vectors inside
            field_.dynamic_set[dst] = std::move(field_.dynamic_set[i]);
            dynamic_state_[dst] = std::move(dynamic_state_[i]);
          }
          ++dst;
        } else {
          ++pruned;
        }
      }
      field_.dynamic_set.resize(dst);
      dynamic_state_.resize(dst);
    }
    return pruned;
  }

  Intrinsics intr_;
  MappingConfig cfg_;
  std::mt19937 rng_;
  GaussianField field_;
  std::vector<KeyframeRecord> keyframes_;
  std::vector<StaticState> static_state_;
  std::vector<DynamicState> dynamic_state_;
};

}  // namespace flowsplat
