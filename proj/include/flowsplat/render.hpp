#pragma once

#include <algorithm>
#include <cmath>
#include <vector>

#include "flowsplat/core.hpp"
#include "flowsplat/gaussians.hpp"
#include "flowsplat/lie.hpp"

namespace flowsplat {

enum class RenderSubset { kStatic, kDynamic, kBoth };

struct RenderConfig {
  double dilation = 0.3;            // isotropic 2D covariance floor (px^2)
  double transmittance_min = 1e-4;  // early-out during compositing
  double opacity_cull = 1.0 / 255.0;
  double near_clip = 1e-4;
  double footprint_sigmas = 3.5;    // rasterized bbox radius in sigma
  bool normalize_depth = false;
  int tile_size = 16;
};

struct RenderOutput {
  ColorImage color;
  ScalarGrid depth;
  ScalarGrid alpha;
  Grid<int> contrib_count;
};

struct StaticGrad {
  Vec3 center = Vec3::Zero();
  Vec3 log_scale = Vec3::Zero();
  Vec4 rotation = Vec4::Zero();
  double opacity_logit = 0.0;
  Vec3 color = Vec3::Zero();
};

struct GmmGrad {
  double weight_logit = 0.0;
  double mean = 0.0;
  double log_tau = 0.0;
  Vec4 quaternion = Vec4::Zero();
};

struct DynamicGrad {
  std::vector<Vec3> keyframe_centers;
  Vec3 log_scale = Vec3::Zero();
  double opacity_logit = 0.0;
  Vec3 color = Vec3::Zero();
  std::vector<GmmGrad> gmm;
  double amplitude_log = 0.0;
};

struct RenderGradients {
  std::vector<StaticGrad> static_grads;
  std::vector<DynamicGrad> dynamic_grads;
  Vec6 camera = Vec6::Zero();  // [d rho; d theta] of T * exp(delta)
};

namespace detail {

struct Splat {
  int source = 0;  // index into static_set or dynamic_set
  bool dynamic = false;
  Vec3 x_world = Vec3::Zero();
  Vec3 p_cam = Vec3::Zero();
  Vec2 mean2d = Vec2::Zero();
  Mat2 cov2d = Mat2::Zero();
  Mat2 precision = Mat2::Zero();
  double sigma_eff = 0.0;
  Vec3 color = Vec3::Zero();
  // Cached intermediates for the backward pass.
  Vec4 quat_blend = Vec4(1, 0, 0, 0);  // quaternion fed to covariance_of
  Mat23 jproj = Mat23::Zero();
  // Temporal cache (dynamic only).
  double t_hat = 0.0;
  int kf_lo = 0, kf_hi = 0;
  double lam = 0.0;
  double act_sum = 0.0;
  double m_t = 1.0;
  Vec4 blend_sum = Vec4::Zero();
  double blend_norm = 1.0;
  bool blend_degenerate = false;
  // Screen-space bbox (inclusive).
  int x0 = 0, x1 = -1, y0 = 0, y1 = -1;
};

inline Mat23 projection_jacobian(const Vec3& p, const Intrinsics& intr) {
  Mat23 j;
  const double z = p.z();
  j << intr.fx / z, 0, -intr.fx * p.x() / (z * z), 0, intr.fy / z,
      -intr.fy * p.y() / (z * z);
  return j;
}

// Interpolation bracket of position_at, needed to route center gradients.
inline void interp_weights(const DynamicGaussian& g, double t,
                           const std::vector<double>& times, int& lo, int& hi,
                           double& lam) {
  const int first = g.birth_keyframe;
  const int last = g.last_keyframe();
  if (t <= times[first]) {
    lo = hi = first;
    lam = 0.0;
    return;
  }
  if (t >= times[last]) {
    lo = hi = last;
    lam = 0.0;
    return;
  }
  int k = first;
  while (k + 1 < last && times[k + 1] <= t) ++k;
  lo = k;
  hi = k + 1;
  const double t0 = times[k], t1 = times[k + 1];
  lam = (t1 > t0) ? (t - t0) / (t1 - t0) : 0.0;
}

inline std::vector<Splat> preprocess(const GaussianField& field,
                                     const Pose& pose, const Intrinsics& intr,
                                     double t, RenderSubset subset,
                                     const RenderConfig& cfg) {
  std::vector<Splat> splats;
  const double t_hat = field.normalize_time(t);

  auto finish = [&](Splat& s, const Vec3& log_scale) -> bool {
    s.p_cam = pose * s.x_world;
    if (s.p_cam.z() <= cfg.near_clip) return false;
    if (s.sigma_eff < cfg.opacity_cull) return false;
    s.mean2d = Vec2(intr.fx * s.p_cam.x() / s.p_cam.z() + intr.cx,
                    intr.fy * s.p_cam.y() / s.p_cam.z() + intr.cy);
    s.jproj = projection_jacobian(s.p_cam, intr);
    const Mat3 sigma3 = covariance_of(log_scale, s.quat_blend);
    const Mat23 a = s.jproj * pose.rotation;
    s.cov2d = a * sigma3 * a.transpose() + cfg.dilation * Mat2::Identity();
    const double det = s.cov2d.determinant();
    if (det <= 0.0) return false;
    s.precision = s.cov2d.inverse();
    // bbox from the largest eigenvalue of the 2D covariance
    const double tr = 0.5 * s.cov2d.trace();
    const double disc =
        std::sqrt(std::max(0.0, tr * tr - det));
    const double radius =
        cfg.footprint_sigmas * std::sqrt(std::max(1e-12, tr + disc)) + 1.0;
    s.x0 = std::max(0, static_cast<int>(std::floor(s.mean2d.x() - radius)));
    s.x1 = std::min(intr.width - 1,
                    static_cast<int>(std::ceil(s.mean2d.x() + radius)));
    s.y0 = std::max(0, static_cast<int>(std::floor(s.mean2d.y() - radius)));
    s.y1 = std::min(intr.height - 1,
                    static_cast<int>(std::ceil(s.mean2d.y() + radius)));
    return s.x0 <= s.x1 && s.y0 <= s.y1;
  };

  if (subset != RenderSubset::kDynamic) {
    for (size_t i = 0; i < field.static_set.size(); ++i) {
      const StaticGaussian& g = field.static_set[i];
      Splat s;
      s.source = static_cast<int>(i);
      s.dynamic = false;
      s.x_world = g.center;
      s.sigma_eff = g.opacity();
      s.color = g.color;
      s.quat_blend = g.rotation;
      if (finish(s, g.log_scale)) splats.push_back(s);
    }
  }
  if (subset != RenderSubset::kStatic) {
    for (size_t i = 0; i < field.dynamic_set.size(); ++i) {
      const DynamicGaussian& g = field.dynamic_set[i];
      Splat s;
      s.source = static_cast<int>(i);
      s.dynamic = true;
      s.t_hat = t_hat;
      interp_weights(g, t, field.keyframe_times, s.kf_lo, s.kf_hi, s.lam);
      s.x_world = (1.0 - s.lam) * g.center_at_keyframe(s.kf_lo) +
                  s.lam * g.center_at_keyframe(s.kf_hi);
      s.act_sum = gmm_activation(g, t_hat);
      s.m_t = 1.0 - std::exp(-g.amplitude() * s.act_sum);
      s.sigma_eff = g.base_opacity() * s.m_t;
      s.color = g.color;
      // Blend control quaternions with sign alignment (see rotation_at).
      const Vec4 anchor = g.gmm.front().quaternion;
      Vec4 sum = Vec4::Zero();
      double best_act = -1.0;
      Vec4 best_quat = anchor;
      for (const GmmComponent& c : g.gmm) {
        const double a = c.weight() * gaussian_pdf(t_hat, c.mean, c.tau());
        Vec4 q = c.quaternion;
        if (q.dot(anchor) < 0.0) q = -q;
        sum += a * q;
        if (a > best_act) {
          best_act = a;
          best_quat = c.quaternion;
        }
      }
      s.blend_sum = sum;
      s.blend_norm = sum.norm();
      s.blend_degenerate = s.blend_norm < 1e-12;
      s.quat_blend =
          s.blend_degenerate ? best_quat.normalized() : Vec4(sum / s.blend_norm);
      if (finish(s, g.log_scale)) splats.push_back(s);
    }
  }

  // Depth sort: camera-frame z, ties broken by (kind, index) for determinism.
  std::sort(splats.begin(), splats.end(), [](const Splat& a, const Splat& b) {
    if (a.p_cam.z() != b.p_cam.z()) return a.p_cam.z() < b.p_cam.z();
    if (a.dynamic != b.dynamic) return !a.dynamic;
    return a.source < b.source;
  });
  return splats;
}

struct TileBins {
  int tiles_x = 0, tiles_y = 0, tile = 16;
  std::vector<std::vector<int>> bins;  // splat indices in depth order

  TileBins(const std::vector<Splat>& splats, int width, int height,
           int tile_size)
      : tile(tile_size) {
    tiles_x = (width + tile - 1) / tile;
    tiles_y = (height + tile - 1) / tile;
    bins.resize(static_cast<size_t>(tiles_x) * tiles_y);
    for (size_t i = 0; i < splats.size(); ++i) {
      const Splat& s = splats[i];
      for (int ty = s.y0 / tile; ty <= s.y1 / tile; ++ty) {
        for (int tx = s.x0 / tile; tx <= s.x1 / tile; ++tx) {
          bins[static_cast<size_t>(ty) * tiles_x + tx].push_back(
              static_cast<int>(i));
        }
      }
    }
  }
  const std::vector<int>& at(int px, int py) const {
    return bins[static_cast<size_t>(py / tile) * tiles_x + px / tile];
  }
};

inline double splat_alpha(const Splat& s, double px, double py, double* g_out) {
  const Vec2 d(px - s.mean2d.x(), py - s.mean2d.y());
  const double power = 0.5 * d.dot(s.precision * d);
  const double g = std::exp(-power);
  if (g_out) *g_out = g;
  return std::min(s.sigma_eff * g, 0.999);
}

// dR/dq for a unit quaternion (w, x, y, z).
inline void rotation_quat_jacobian(const Vec4& q, Mat3 dr[4]) {
  const double w = q[0], x = q[1], y = q[2], z = q[3];
  dr[0] << 0, -z, y, z, 0, -x, -y, x, 0;
  dr[1] << 0, y, z, y, -2 * x, -w, z, w, -2 * x;
  dr[2] << -2 * y, x, w, x, 0, z, -w, z, -2 * y;
  dr[3] << -2 * z, -w, x, w, -2 * z, y, x, y, 0;
  for (int i = 0; i < 4; ++i) dr[i] *= 2.0;
}

}  // namespace detail

// Forward rasterization: Gaussians evaluated at time t, projected with the
// perspective-affine approximation, composited front to back.
inline RenderOutput render(const GaussianField& field, const Pose& pose,
                           const Intrinsics& intr, double t,
                           RenderSubset subset = RenderSubset::kBoth,
                           const RenderConfig& cfg = {}) {
  RenderOutput out;
  out.color = ColorImage(intr.width, intr.height, 0.0);
  out.depth = ScalarGrid(intr.width, intr.height, 0.0);
  out.alpha = ScalarGrid(intr.width, intr.height, 0.0);
  out.contrib_count = Grid<int>(intr.width, intr.height, 0);

  const std::vector<detail::Splat> splats =
      detail::preprocess(field, pose, intr, t, subset, cfg);
  if (splats.empty()) return out;
  const detail::TileBins bins(splats, intr.width, intr.height, cfg.tile_size);

  for (int py = 0; py < intr.height; ++py) {
    for (int px = 0; px < intr.width; ++px) {
      double trans = 1.0;
      Vec3 c = Vec3::Zero();
      double d = 0.0, o = 0.0;
      int count = 0;
      for (int idx : bins.at(px, py)) {
        const detail::Splat& s = splats[idx];
        if (px < s.x0 || px > s.x1 || py < s.y0 || py > s.y1) continue;
        const double alpha = detail::splat_alpha(s, px, py, nullptr);
        if (alpha < 1e-8) continue;
        c += s.color * (alpha * trans);
        d += s.p_cam.z() * (alpha * trans);
        o += alpha * trans;
        ++count;
        trans *= 1.0 - alpha;
        if (trans < cfg.transmittance_min) break;
      }
      if (cfg.normalize_depth && o > 1e-12) d /= o;
      out.color.set_pixel(px, py, c);
      out.depth.at(px, py) = d;
      out.alpha.at(px, py) = o;
      out.contrib_count.at(px, py) = count;
    }
  }
  return out;
}

// Exact vector-Jacobian product of `render` with respect to every optimizable
// parameter and the camera twist (pose perturbed as T*exp(delta), gradient at
// delta = 0). Adjoint grids may be empty (treated as zero).
inline RenderGradients render_with_gradients(
    const GaussianField& field, const Pose& pose, const Intrinsics& intr,
    double t, RenderSubset subset, const ColorImage& d_color,
    const ScalarGrid& d_depth, const ScalarGrid& d_alpha,
    const RenderConfig& cfg = {}) {
  RenderGradients grads;
  grads.static_grads.resize(field.static_set.size());
  grads.dynamic_grads.resize(field.dynamic_set.size());
  for (size_t i = 0; i < field.dynamic_set.size(); ++i) {
    grads.dynamic_grads[i].keyframe_centers.assign(
        field.dynamic_set[i].keyframe_centers.size(), Vec3::Zero());
    grads.dynamic_grads[i].gmm.resize(field.dynamic_set[i].gmm.size());
  }

  const std::vector<detail::Splat> splats =
      detail::preprocess(field, pose, intr, t, subset, cfg);
  if (splats.empty()) return grads;
  const detail::TileBins bins(splats, intr.width, intr.height, cfg.tile_size);

  // Per-splat accumulated adjoints of the screen-space quantities.
  struct SplatAdjoint {
    Vec2 mean2d = Vec2::Zero();
    Mat2 precision = Mat2::Zero();
    double sigma_eff = 0.0;
    Vec3 color = Vec3::Zero();
    double z = 0.0;
  };
  std::vector<SplatAdjoint> adj(splats.size());

  const bool has_c = d_color.width() > 0;
  const bool has_d = d_depth.width() > 0;
  const bool has_a = d_alpha.width() > 0;

  struct Contribution {
    int idx;
    double alpha, g, trans;  // trans before this splat
  };
  std::vector<Contribution> stack;

  for (int py = 0; py < intr.height; ++py) {
    for (int px = 0; px < intr.width; ++px) {
      const Vec3 gc = has_c ? d_color.pixel(px, py) : Vec3::Zero();
      const double gd = has_d ? d_depth.at(px, py) : 0.0;
      const double ga = has_a ? d_alpha.at(px, py) : 0.0;
      if (gc.isZero(0.0) && gd == 0.0 && ga == 0.0) continue;

      stack.clear();
      double trans = 1.0;
      for (int idx : bins.at(px, py)) {
        const detail::Splat& s = splats[idx];
        if (px < s.x0 || px > s.x1 || py < s.y0 || py > s.y1) continue;
        double g = 0.0;
        const double alpha = detail::splat_alpha(s, px, py, &g);
        if (alpha < 1e-8) continue;
        stack.push_back({idx, alpha, g, trans});
        trans *= 1.0 - alpha;
        if (trans < cfg.transmittance_min) break;
      }
      // Backward over the composite: suffix holds d(value)/d downstream mass.
      double suffix = 0.0;  // sum over j > i of value_j * alpha_j * T_j
      for (int i = static_cast<int>(stack.size()) - 1; i >= 0; --i) {
        const Contribution& ct = stack[i];
        const detail::Splat& s = splats[ct.idx];
        const double value = s.color.dot(gc) + s.p_cam.z() * gd + ga;
        const double weight = ct.alpha * ct.trans;
        adj[ct.idx].color += weight * gc;
        adj[ct.idx].z += weight * gd;
        double d_alpha_i = ct.trans * value - suffix / (1.0 - ct.alpha);
        if (ct.alpha >= 0.999) d_alpha_i = 0.0;  // clamp subgradient
        // alpha = sigma_eff * G
        adj[ct.idx].sigma_eff += d_alpha_i * ct.g;
        const double d_g = d_alpha_i * s.sigma_eff;
        const double d_power = -ct.g * d_g;
        const Vec2 d(px - s.mean2d.x(), py - s.mean2d.y());
        const Vec2 pd = s.precision * d;
        adj[ct.idx].mean2d += -d_power * pd;
        adj[ct.idx].precision += (0.5 * d_power) * (d * d.transpose());
        suffix += value * weight;
      }
    }
  }

  // Chain screen-space adjoints back to parameters.
  Mat3 d_w_total = Mat3::Zero();
  Vec3 d_t_total = Vec3::Zero();
  const Mat3& rot_cam = pose.rotation;

  for (size_t si = 0; si < splats.size(); ++si) {
    const detail::Splat& s = splats[si];
    const SplatAdjoint& a = adj[si];
    if (a.mean2d.isZero(0.0) && a.precision.isZero(0.0) &&
        a.sigma_eff == 0.0 && a.color.isZero(0.0) && a.z == 0.0) {
      continue;
    }

    const Vec3 log_scale = s.dynamic ? field.dynamic_set[s.source].log_scale
                                     : field.static_set[s.source].log_scale;
    const Mat3 rot_g = quat_to_rotation(s.quat_blend);
    const Vec3 scale2 = (2.0 * log_scale).array().exp();
    const Mat3 sigma3 = rot_g * scale2.asDiagonal() * rot_g.transpose();
    const Mat23 amat = s.jproj * rot_cam;

    // precision = cov2d^{-1}
    const Mat2 d_cov2d = -s.precision * a.precision * s.precision;
    // cov2d = A Sigma3 A^T + eps I
    const Mat23 d_a = (d_cov2d + d_cov2d.transpose()) * amat * sigma3;
    const Mat3 d_sigma3 = amat.transpose() * d_cov2d * amat;
    // A = Jproj * W
    const Mat23 d_jproj = d_a * rot_cam.transpose();
    d_w_total += s.jproj.transpose() * d_a;

    // Jproj(p_cam) and mean2d(p_cam)
    Vec3 d_pcam = s.jproj.transpose() * a.mean2d;
    const double x = s.p_cam.x(), y = s.p_cam.y(), z = s.p_cam.z();
    const double fx = intr.fx, fy = intr.fy;
    d_pcam.x() += d_jproj(0, 2) * (-fx / (z * z));
    d_pcam.y() += d_jproj(1, 2) * (-fy / (z * z));
    d_pcam.z() += d_jproj(0, 0) * (-fx / (z * z)) +
                  d_jproj(0, 2) * (2 * fx * x / (z * z * z)) +
                  d_jproj(1, 1) * (-fy / (z * z)) +
                  d_jproj(1, 2) * (2 * fy * y / (z * z * z));
    d_pcam.z() += a.z;  // depth channel

    // p_cam = W x + t_cam
    const Vec3 d_x_world = rot_cam.transpose() * d_pcam;
    d_w_total += d_pcam * s.x_world.transpose();
    d_t_total += d_pcam;

    // Sigma3 = R diag(exp(2s)) R^T
    const Mat3 d_rot_g = (d_sigma3 + d_sigma3.transpose()) * rot_g *
                         Mat3(scale2.asDiagonal());
    const Vec3 d_diag = (rot_g.transpose() * d_sigma3 * rot_g).diagonal();
    const Vec3 d_log_scale = 2.0 * d_diag.cwiseProduct(scale2);

    // R(q_hat), q_hat = q / |q|; the Jacobian formula expects unit q.
    Mat3 dr[4];
    detail::rotation_quat_jacobian(s.quat_blend.normalized(), dr);
    Vec4 d_qhat;
    for (int i = 0; i < 4; ++i) {
      d_qhat[i] = (d_rot_g.array() * dr[i].array()).sum();
    }

    if (!s.dynamic) {
      StaticGrad& g = grads.static_grads[s.source];
      const StaticGaussian& src = field.static_set[s.source];
      g.center += d_x_world;
      g.log_scale += d_log_scale;
      const Vec4 q = src.rotation;
      const double qn = q.norm();
      const Vec4 qh = q / qn;
      g.rotation += (d_qhat - qh * qh.dot(d_qhat)) / qn;
      const double sig = src.opacity();
      g.opacity_logit += a.sigma_eff * sig * (1.0 - sig);
      g.color += a.color;
    } else {
      DynamicGrad& g = grads.dynamic_grads[s.source];
      const DynamicGaussian& src = field.dynamic_set[s.source];
      g.color += a.color;
      g.log_scale += d_log_scale;
      g.keyframe_centers[s.kf_lo - src.birth_keyframe] +=
          (1.0 - s.lam) * d_x_world;
      g.keyframe_centers[s.kf_hi - src.birth_keyframe] += s.lam * d_x_world;

      // sigma_eff = sigmoid(l) * m, m = 1 - exp(-A * act)
      const double base = src.base_opacity();
      const double amp = src.amplitude();
      const double exp_term = std::exp(-amp * s.act_sum);
      g.opacity_logit += a.sigma_eff * s.m_t * base * (1.0 - base);
      const double d_m = a.sigma_eff * base;
      double d_act = d_m * amp * exp_term;  // opacity path into activation sum
      g.amplitude_log += d_m * s.act_sum * exp_term * amp;

      // Rotation path: q_hat = sum / |sum| unless degenerate.
      Vec4 d_sum = Vec4::Zero();
      if (!s.blend_degenerate) {
        d_sum = (d_qhat - s.quat_blend * s.quat_blend.dot(d_qhat)) /
                s.blend_norm;
      }
      const Vec4 anchor = src.gmm.front().quaternion;
      for (size_t k = 0; k < src.gmm.size(); ++k) {
        const GmmComponent& c = src.gmm[k];
        const double sign = c.quaternion.dot(anchor) < 0.0 ? -1.0 : 1.0;
        const double w = c.weight();
        const double tau = c.tau();
        const double pdf = gaussian_pdf(s.t_hat, c.mean, tau);
        const double act_k = w * pdf;
        // a_k feeds both the opacity activation sum and the rotation blend.
        double d_act_k = d_act;
        if (!s.blend_degenerate) {
          d_act_k += sign * c.quaternion.dot(d_sum);
          grads.dynamic_grads[s.source].gmm[k].quaternion +=
              act_k * sign * d_sum;
        }
        GmmGrad& gg = g.gmm[k];
        gg.weight_logit += d_act_k * pdf * sigmoid(c.weight_logit);
        const double d_pdf = d_act_k * w;
        const double dm = (s.t_hat - c.mean) / (tau * tau);
        gg.mean += d_pdf * pdf * dm;
        const double d_tau =
            d_pdf * pdf * ((s.t_hat - c.mean) * (s.t_hat - c.mean) /
                               (tau * tau * tau) -
                           1.0 / tau);
        gg.log_tau += d_tau * tau;
      }
    }
  }

  // Camera twist from the accumulated rotation/translation adjoints.
  const Mat3 m = rot_cam.transpose() * d_w_total;
  grads.camera.head<3>() = rot_cam.transpose() * d_t_total;
  grads.camera[3] = m(2, 1) - m(1, 2);
  grads.camera[4] = m(0, 2) - m(2, 0);
  grads.camera[5] = m(1, 0) - m(0, 1);
  return grads;
}

// Alpha-composited 2D displacement map: each Gaussian contributes its
// projected motion between (pose_a, t_a) and (pose_b, t_b), blended with the
// compositing weights of the (pose_a, t_a) render and normalized by the
// accumulated alpha.
inline FlowField render_flow(const GaussianField& field, const Pose& pose_a,
                             const Pose& pose_b, const Intrinsics& intr,
                             double t_a, double t_b,
                             RenderSubset subset = RenderSubset::kBoth,
                             const RenderConfig& cfg = {}) {
  FlowField flow(intr.width, intr.height, false);

  const std::vector<detail::Splat> splats =
      detail::preprocess(field, pose_a, intr, t_a, subset, cfg);
  if (splats.empty()) return flow;

  // Per-splat displacement toward (pose_b, t_b).
  std::vector<Vec2> disp(splats.size(), Vec2::Zero());
  std::vector<char> disp_ok(splats.size(), 0);
  for (size_t i = 0; i < splats.size(); ++i) {
    const detail::Splat& s = splats[i];
    Vec3 x_b = s.x_world;
    if (s.dynamic) {
      x_b = position_at(field.dynamic_set[s.source], t_b, field.keyframe_times);
    }
    const Vec3 pb = pose_b * x_b;
    if (pb.z() <= cfg.near_clip) continue;
    const Vec2 pix_b(intr.fx * pb.x() / pb.z() + intr.cx,
                     intr.fy * pb.y() / pb.z() + intr.cy);
    disp[i] = pix_b - s.mean2d;
    disp_ok[i] = 1;
  }

  const detail::TileBins bins(splats, intr.width, intr.height, cfg.tile_size);
  for (int py = 0; py < intr.height; ++py) {
    for (int px = 0; px < intr.width; ++px) {
      double trans = 1.0, o = 0.0;
      Vec2 f = Vec2::Zero();
      for (int idx : bins.at(px, py)) {
        const detail::Splat& s = splats[idx];
        if (px < s.x0 || px > s.x1 || py < s.y0 || py > s.y1) continue;
        if (!disp_ok[idx]) continue;
        const double alpha = detail::splat_alpha(s, px, py, nullptr);
        if (alpha < 1e-8) continue;
        f += disp[idx] * (alpha * trans);
        o += alpha * trans;
        trans *= 1.0 - alpha;
        if (trans < cfg.transmittance_min) break;
      }
      if (o > 1e-6) {
        flow.u_component.at(px, py) = f.x() / o;
        flow.v_component.at(px, py) = f.y() / o;
        flow.valid.at(px, py) = 1;
      }
    }
  }
  return flow;
}

// Gradient of render_flow through the displacement values only (blend
// weights held fixed): routes the per-pixel flow adjoint back to dynamic
// keyframe centers. Used by the mapping flow loss.
inline void render_flow_backward_centers(
    const GaussianField& field, const Pose& pose_a, const Pose& pose_b,
    const Intrinsics& intr, double t_a, double t_b, RenderSubset subset,
    const ScalarGrid& d_flow_u, const ScalarGrid& d_flow_v,
    std::vector<DynamicGrad>& dynamic_grads, const RenderConfig& cfg = {}) {
  const std::vector<detail::Splat> splats =
      detail::preprocess(field, pose_a, intr, t_a, subset, cfg);
  if (splats.empty()) return;

  std::vector<Vec3> x_b(splats.size());
  std::vector<int> lo_b(splats.size()), hi_b(splats.size());
  std::vector<double> lam_b(splats.size());
  std::vector<char> disp_ok(splats.size(), 0);
  for (size_t i = 0; i < splats.size(); ++i) {
    const detail::Splat& s = splats[i];
    x_b[i] = s.x_world;
    if (s.dynamic) {
      const DynamicGaussian& g = field.dynamic_set[s.source];
      detail::interp_weights(g, t_b, field.keyframe_times, lo_b[i], hi_b[i],
                             lam_b[i]);
      x_b[i] = (1.0 - lam_b[i]) * g.center_at_keyframe(lo_b[i]) +
               lam_b[i] * g.center_at_keyframe(hi_b[i]);
    }
    if ((pose_b * x_b[i]).z() > cfg.near_clip) disp_ok[i] = 1;
  }

  std::vector<Vec2> d_disp(splats.size(), Vec2::Zero());
  const detail::TileBins bins(splats, intr.width, intr.height, cfg.tile_size);
  for (int py = 0; py < intr.height; ++py) {
    for (int px = 0; px < intr.width; ++px) {
      const Vec2 gf(d_flow_u.at(px, py), d_flow_v.at(px, py));
      if (gf.isZero(0.0)) continue;
      // Forward weights replay to get the normalizer.
      double trans = 1.0, o = 0.0;
      std::vector<std::pair<int, double>> weights;
      for (int idx : bins.at(px, py)) {
        const detail::Splat& s = splats[idx];
        if (px < s.x0 || px > s.x1 || py < s.y0 || py > s.y1) continue;
        if (!disp_ok[idx]) continue;
        const double alpha = detail::splat_alpha(s, px, py, nullptr);
        if (alpha < 1e-8) continue;
        weights.emplace_back(idx, alpha * trans);
        o += alpha * trans;
        trans *= 1.0 - alpha;
        if (trans < cfg.transmittance_min) break;
      }
      if (o <= 1e-6) continue;
      for (auto& [idx, w] : weights) d_disp[idx] += (w / o) * gf;
    }
  }

  for (size_t i = 0; i < splats.size(); ++i) {
    const detail::Splat& s = splats[i];
    if (!s.dynamic || d_disp[i].isZero(0.0)) continue;
    const DynamicGaussian& g = field.dynamic_set[s.source];
    DynamicGrad& grad = dynamic_grads[s.source];
    // disp = pi_b(x_b) - pi_a(x_a)
    if (disp_ok[i]) {
      const Vec3 pb = pose_b * x_b[i];
      const Mat23 jb = detail::projection_jacobian(pb, intr);
      const Vec3 d_xb = (jb * pose_b.rotation).transpose() * d_disp[i];
      grad.keyframe_centers[lo_b[i] - g.birth_keyframe] +=
          (1.0 - lam_b[i]) * d_xb;
      grad.keyframe_centers[hi_b[i] - g.birth_keyframe] += lam_b[i] * d_xb;
    }
    const Vec3 d_xa =
        -((s.jproj * pose_a.rotation).transpose() * d_disp[i]);
    grad.keyframe_centers[s.kf_lo - g.birth_keyframe] += (1.0 - s.lam) * d_xa;
    grad.keyframe_centers[s.kf_hi - g.birth_keyframe] += s.lam * d_xa;
  }
}

}  // namespace flowsplat
