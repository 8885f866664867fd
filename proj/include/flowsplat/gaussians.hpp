#pragma once

#include <cmath>
#include <numbers>
#include <vector>

#include "flowsplat/core.hpp"
#include "flowsplat/lie.hpp"

namespace flowsplat {

struct StaticGaussian {
  Vec3 center = Vec3::Zero();
  Vec3 log_scale = Vec3::Zero();
  Vec4 rotation = Vec4(1, 0, 0, 0);  // quaternion (w, x, y, z)
  double opacity_logit = 0.0;
  Vec3 color = Vec3::Zero();

  double opacity() const { return sigmoid(opacity_logit); }
};

struct GmmComponent {
  double weight_logit = 0.0;  // weight = softplus(weight_logit)
  double mean = 0.5;          // temporal mean in [0, 1]
  double log_tau = std::log(0.2);
  Vec4 quaternion = Vec4(1, 0, 0, 0);  // control rotation

  double weight() const { return softplus(weight_logit); }
  double tau() const { return std::exp(log_tau); }
};

struct DynamicGaussian {
  // Center at keyframe (birth_keyframe + i) lives at keyframe_centers[i].
  std::vector<Vec3> keyframe_centers;
  int birth_keyframe = 0;
  Vec3 log_scale = Vec3::Zero();
  double opacity_logit = 0.0;
  Vec3 color = Vec3::Zero();
  std::vector<GmmComponent> gmm;
  double amplitude_log = 0.0;  // A = exp(amplitude_log)

  double base_opacity() const { return sigmoid(opacity_logit); }
  double amplitude() const { return std::exp(amplitude_log); }
  int last_keyframe() const {
    return birth_keyframe + static_cast<int>(keyframe_centers.size()) - 1;
  }
  const Vec3& center_at_keyframe(int k) const {
    return keyframe_centers[k - birth_keyframe];
  }
  Vec3& center_at_keyframe(int k) { return keyframe_centers[k - birth_keyframe]; }
};

struct GaussianField {
  std::vector<StaticGaussian> static_set;
  std::vector<DynamicGaussian> dynamic_set;
  std::vector<double> keyframe_times;
  double time_min = 0.0;
  double time_max = 1.0;

  double normalize_time(double t) const {
    if (time_max <= time_min) return 0.0;
    return std::clamp((t - time_min) / (time_max - time_min), 0.0, 1.0);
  }
};

// Piecewise-linear center trajectory; clamps outside the stored keyframes.
inline Vec3 position_at(const DynamicGaussian& g, double t,
                        const std::vector<double>& keyframe_times) {
  const int first = g.birth_keyframe;
  const int last = g.last_keyframe();
  if (t <= keyframe_times[first]) return g.keyframe_centers.front();
  if (t >= keyframe_times[last]) return g.keyframe_centers.back();
  int k = first;
  while (k + 1 < last && keyframe_times[k + 1] <= t) ++k;
  const double t0 = keyframe_times[k], t1 = keyframe_times[k + 1];
  const double lam = (t1 > t0) ? (t - t0) / (t1 - t0) : 0.0;
  return (1.0 - lam) * g.center_at_keyframe(k) +
         lam * g.center_at_keyframe(k + 1);
}

inline double gaussian_pdf(double x, double mean, double tau) {
  const double z = (x - mean) / tau;
  return std::exp(-0.5 * z * z) / (tau * std::sqrt(2.0 * std::numbers::pi));
}

// Sum_k w_k N(t_hat; mu_k, tau_k^2) with the normalized density.
inline double gmm_activation(const DynamicGaussian& g, double t_hat) {
  double act = 0.0;
  for (const GmmComponent& c : g.gmm) {
    act += c.weight() * gaussian_pdf(t_hat, c.mean, c.tau());
  }
  return act;
}

// sigma_i(t) = sigma_i * (1 - exp(-A_i * activation)).
inline double opacity_at(const DynamicGaussian& g, double t_hat) {
  return g.base_opacity() * (1.0 - std::exp(-g.amplitude() * gmm_activation(g, t_hat)));
}

// Activation-weighted quaternion blend. Control quaternions are sign-aligned
// to the first component before summation; q and -q are the same rotation.
inline Vec4 rotation_at(const DynamicGaussian& g, double t_hat) {
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
  const double n = sum.norm();
  if (n < 1e-12) {
    return best_quat.normalized();
  }
  return sum / n;
}

inline Mat3 quat_to_rotation(const Vec4& q_raw) {
  const Vec4 q = q_raw.normalized();
  const double w = q[0], x = q[1], y = q[2], z = q[3];
  Mat3 r;
  r << 1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y),
      2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x),
      2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y);
  return r;
}

// Sigma = R diag(exp(2 s)) R^T.
inline Mat3 covariance_of(const Vec3& log_scale, const Vec4& quaternion) {
  const Mat3 r = quat_to_rotation(quaternion);
  const Vec3 d = (2.0 * log_scale).array().exp();
  return r * d.asDiagonal() * r.transpose();
}

// Opens keyframe slot k: every live dynamic Gaussian gets a center for k,
// initialized as a copy of its center at k-1 (the mapper overwrites it
// with the propagated estimate).
inline void add_keyframe_slot(GaussianField& field, int k, double t_k) {
  const int expected = static_cast<int>(field.keyframe_times.size());
  if (k != expected) {
    throw NonContiguousKeyframe("expected keyframe " +
                                std::to_string(expected) + ", got " +
                                std::to_string(k));
  }
  field.keyframe_times.push_back(t_k);
  for (DynamicGaussian& g : field.dynamic_set) {
    if (g.last_keyframe() == k - 1) {
      g.keyframe_centers.push_back(g.keyframe_centers.back());
    }
  }
}

}  // namespace flowsplat
