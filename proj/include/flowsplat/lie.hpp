#pragma once

#include <cmath>

#include "flowsplat/core.hpp"

namespace flowsplat {

// Twist [rho; theta]: translational and rotational parts of an se(3) element.
struct Twist {
  Vec3 rho = Vec3::Zero();
  Vec3 theta = Vec3::Zero();

  Vec6 vector() const {
    Vec6 v;
    v << rho, theta;
    return v;
  }
  static Twist from_vector(const Vec6& v) {
    return Twist{v.head<3>(), v.tail<3>()};
  }
};

// Rigid world-to-camera transform T_cw.
struct Pose {
  Mat3 rotation = Mat3::Identity();
  Vec3 translation = Vec3::Zero();

  Pose inverse() const {
    return Pose{rotation.transpose(), -(rotation.transpose() * translation)};
  }
  Pose operator*(const Pose& other) const {
    return Pose{rotation * other.rotation,
                rotation * other.translation + translation};
  }
  Vec3 operator*(const Vec3& p) const { return rotation * p + translation; }
};

inline Mat3 skew(const Vec3& w) {
  Mat3 s;
  s << 0, -w.z(), w.y(), w.z(), 0, -w.x(), -w.y(), w.x(), 0;
  return s;
}

// Small-angle switchover for the Rodrigues / left-Jacobian closed forms.
constexpr double kSmallAngle = 1e-8;

inline Mat3 so3_exp(const Vec3& theta) {
  const double angle = theta.norm();
  const Mat3 hat = skew(theta);
  if (angle < kSmallAngle) {
    return Mat3::Identity() + hat + 0.5 * hat * hat;
  }
  const double s = std::sin(angle) / angle;
  const double c = (1.0 - std::cos(angle)) / (angle * angle);
  return Mat3::Identity() + s * hat + c * hat * hat;
}

// Left Jacobian V(theta) of SO(3).
inline Mat3 so3_left_jacobian(const Vec3& theta) {
  const double angle = theta.norm();
  const Mat3 hat = skew(theta);
  if (angle < kSmallAngle) {
    return Mat3::Identity() + 0.5 * hat + (1.0 / 6.0) * hat * hat;
  }
  const double a2 = angle * angle;
  const double b = (1.0 - std::cos(angle)) / a2;
  const double c = (angle - std::sin(angle)) / (a2 * angle);
  return Mat3::Identity() + b * hat + c * hat * hat;
}

inline Pose se3_exp(const Twist& xi) {
  return Pose{so3_exp(xi.theta), so3_left_jacobian(xi.theta) * xi.rho};
}

// T^t = T^{t-1} * exp(xi): right-multiplied pose increment.
inline Pose compose_pose(const Pose& prev, const Twist& delta_xi) {
  return prev * se3_exp(delta_xi);
}

struct Projection {
  Vec2 pixel;
  double depth;
};

inline Projection project(const Intrinsics& intr, const Pose& pose,
                          const Vec3& point_world) {
  const Vec3 p = pose * point_world;
  if (p.z() <= 1e-9) {
    throw BehindCamera("point behind camera, z=" + std::to_string(p.z()));
  }
  return Projection{Vec2(intr.fx * p.x() / p.z() + intr.cx,
                         intr.fy * p.y() / p.z() + intr.cy),
                    p.z()};
}

inline Vec3 unproject(const Intrinsics& intr, const Pose& pose,
                      const Vec2& pixel, double depth) {
  if (depth <= 0.0) {
    throw InvalidDepth("unproject needs depth > 0, got " +
                       std::to_string(depth));
  }
  const Vec3 cam(depth * (pixel.x() - intr.cx) / intr.fx,
                 depth * (pixel.y() - intr.cy) / intr.fy, depth);
  return pose.rotation.transpose() * (cam - pose.translation);
}

namespace detail {

// Log maps. Internal: the synthetic oracle needs the ground-truth
// inter-frame twist; everything else treats poses as opaque.

inline Vec3 so3_log(const Mat3& rot) {
  const double trace = rot.trace();
  double cos_angle = std::clamp(0.5 * (trace - 1.0), -1.0, 1.0);
  const double angle = std::acos(cos_angle);
  if (angle < kSmallAngle) {
    // log(R) ~ (R - R^T)/2 near identity
    return 0.5 * Vec3(rot(2, 1) - rot(1, 2), rot(0, 2) - rot(2, 0),
                      rot(1, 0) - rot(0, 1));
  }
  if (angle > M_PI - 1e-6) {
    // Near pi: axis from the diagonal of (R + I)/2
    Mat3 b = 0.5 * (rot + Mat3::Identity());
    Vec3 axis(std::sqrt(std::max(0.0, b(0, 0))),
              std::sqrt(std::max(0.0, b(1, 1))),
              std::sqrt(std::max(0.0, b(2, 2))));
    int major = 0;
    axis.cwiseAbs().maxCoeff(&major);
    for (int i = 0; i < 3; ++i) {
      if (i != major && b(major, i) < 0) axis[i] = -axis[i];
    }
    axis.normalize();
    return angle * axis;
  }
  const double scale = angle / (2.0 * std::sin(angle));
  return scale * Vec3(rot(2, 1) - rot(1, 2), rot(0, 2) - rot(2, 0),
                      rot(1, 0) - rot(0, 1));
}

inline Twist se3_log(const Pose& pose) {
  Twist xi;
  xi.theta = so3_log(pose.rotation);
  xi.rho = so3_left_jacobian(xi.theta).inverse() * pose.translation;
  return xi;
}

}  // namespace detail

}  // namespace flowsplat
