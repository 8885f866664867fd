#pragma once

// Synthetic RGB-D oracle: an analytic ray-cast scene (textured background
// plane plus moving primitives) with exact poses, masks, and optical flow.
// Deliberately independent of the splat renderer.

#include <cmath>
#include <memory>
#include <random>

#include "flowsplat/dataset.hpp"
#include "flowsplat/motion.hpp"

namespace flowsplat {

struct ObjectSpec {
  enum class Shape { kSphere, kBox };
  Shape shape = Shape::kSphere;
  Vec3 start = Vec3::Zero();     // world center at frame 0
  Vec3 velocity = Vec3::Zero();  // world units per frame
  double radius = 0.2;           // sphere radius / box half-extent
  Vec3 color = Vec3(0.8, 0.3, 0.2);
  int entry_frame = 0;
  int exit_frame = 1 << 30;
};

struct SyntheticSceneConfig {
  int width = 64;
  int height = 64;
  double focal = 80.0;  // fx = fy; principal point at image center
  enum class Trajectory { kStatic, kDolly, kOrbit, kSinusoid };
  Trajectory trajectory = Trajectory::kStatic;
  double amplitude = 0.0;      // meters over the sequence
  double rot_amplitude = 0.0;  // radians over the sequence
  int frames = 2;
  double plane_depth = 3.0;    // background plane world z at x = y = 0
  double plane_tilt_x = 0.0;   // background slope dz/dx (0 = fronto-parallel)
  double plane_tilt_y = 0.0;   // background slope dz/dy
  double checker_period = 1.0; // texture spatial period (m)
  std::vector<ObjectSpec> objects;
  double flow_sigma = 0.0;   // pixels
  double depth_sigma = 0.0;  // meters
  unsigned seed = 1;
  double frame_dt = 1.0 / 30.0;
  // When set, F^{t,t-1} for static pixels is the exact linear motion-field
  // model of the ground-truth inter-frame twist; otherwise geometric
  // reprojection flow (the two agree to first order in the camera step).
  bool linearized_rigid_flow = true;
  bool semantic_from_gt = false;  // expose gt object masks as M_s
};

namespace detail {

class SyntheticScene {
 public:
  explicit SyntheticScene(const SyntheticSceneConfig& cfg) : cfg_(cfg) {
    intr_ = Intrinsics{cfg.focal, cfg.focal, (cfg.width - 1) / 2.0,
                       (cfg.height - 1) / 2.0, cfg.width, cfg.height};
    for (int k = 0; k < cfg.frames; ++k) poses_.push_back(camera_pose(k));
  }

  const Intrinsics& intrinsics() const { return intr_; }
  const Pose& pose(int frame) const { return poses_[frame]; }
  double timestamp(int frame) const { return frame * cfg_.frame_dt; }

  struct Hit {
    bool valid = false;
    int object = -1;  // -1 background plane
    double depth = 0.0;
    Vec3 world;   // hit point in world coordinates
    Vec3 offset;  // world point minus object center (identity for plane)
  };

  Vec3 object_center(int object, int frame) const {
    const ObjectSpec& o = cfg_.objects[object];
    return o.start + o.velocity * static_cast<double>(frame);
  }

  bool object_live(int object, int frame) const {
    const ObjectSpec& o = cfg_.objects[object];
    return frame >= o.entry_frame && frame < o.exit_frame;
  }

  // Ray through real-valued pixel (u, v); parameter equals camera depth.
  Hit raycast(int frame, double u, double v) const {
    const Pose& pose = poses_[frame];
    const Vec3 m((u - intr_.cx) / intr_.fx, (v - intr_.cy) / intr_.fy, 1.0);
    const Vec3 origin = -(pose.rotation.transpose() * pose.translation);
    const Vec3 dir = pose.rotation.transpose() * m;

    Hit best;
    // Background plane z = plane_depth + tilt_x * x + tilt_y * y, i.e.
    // n . p = plane_depth with n = (-tilt_x, -tilt_y, 1).
    const Vec3 n(-cfg_.plane_tilt_x, -cfg_.plane_tilt_y, 1.0);
    if (std::abs(n.dot(dir)) > 1e-12) {
      const double d = (cfg_.plane_depth - n.dot(origin)) / n.dot(dir);
      if (d > 1e-6) {
        best.valid = true;
        best.object = -1;
        best.depth = d;
        best.world = origin + d * dir;
        best.offset = best.world;
      }
    }
    for (size_t i = 0; i < cfg_.objects.size(); ++i) {
      if (!object_live(static_cast<int>(i), frame)) continue;
      const Vec3 c = object_center(static_cast<int>(i), frame);
      double d = -1.0;
      if (cfg_.objects[i].shape == ObjectSpec::Shape::kSphere) {
        d = intersect_sphere(origin, dir, c, cfg_.objects[i].radius);
      } else {
        d = intersect_box(origin, dir, c, cfg_.objects[i].radius);
      }
      if (d > 1e-6 && (!best.valid || d < best.depth)) {
        best.valid = true;
        best.object = static_cast<int>(i);
        best.depth = d;
        best.world = origin + d * dir;
        best.offset = best.world - c;
      }
    }
    return best;
  }

  Vec3 surface_color(const Hit& hit) const {
    const double p = cfg_.checker_period;
    if (hit.object < 0) {
      const double a = std::sin(2.0 * std::numbers::pi * hit.world.x() / p);
      const double b = std::sin(2.0 * std::numbers::pi * hit.world.y() / p);
      return Vec3(0.45 + 0.25 * a * b, 0.5 + 0.2 * a, 0.55 + 0.2 * b);
    }
    const Vec3 base = cfg_.objects[hit.object].color;
    const double mod =
        0.15 * std::sin(8.0 * hit.offset.x() / cfg_.objects[hit.object].radius) *
        std::cos(8.0 * hit.offset.y() / cfg_.objects[hit.object].radius);
    return (base.array() + mod).cwiseMax(0.0).cwiseMin(1.0);
  }

  // Where does the surface point seen at (u, v) in frame a land in frame b?
  // Invalid if it leaves the image, goes behind the camera, or is occluded.
  struct FlowSample {
    bool valid = false;
    Vec2 flow = Vec2::Zero();
    bool disoccluded = false;  // target location shows a different surface
  };

  FlowSample flow_sample(int a, int b, double u, double v) const {
    FlowSample out;
    const Hit hit = raycast(a, u, v);
    if (!hit.valid) return out;
    Vec3 world_b = hit.world;
    if (hit.object >= 0) {
      if (!object_live(hit.object, b)) return out;
      world_b = object_center(hit.object, b) + hit.offset;
    }
    const Vec3 p_cam = poses_[b] * world_b;
    if (p_cam.z() <= 1e-6) return out;
    const Vec2 pix(intr_.fx * p_cam.x() / p_cam.z() + intr_.cx,
                   intr_.fy * p_cam.y() / p_cam.z() + intr_.cy);
    if (pix.x() < -0.5 || pix.x() > intr_.width - 0.5 || pix.y() < -0.5 ||
        pix.y() > intr_.height - 0.5) {
      return out;
    }
    // Occlusion: the nearest surface at the landing pixel must be this point.
    const Hit target = raycast(b, pix.x(), pix.y());
    if (!target.valid || target.depth < p_cam.z() - 1e-6) {
      out.disoccluded = true;
      return out;
    }
    out.valid = true;
    out.flow = pix - Vec2(u, v);
    return out;
  }

  // Geometric correspondence flow a -> b on frame a's pixel grid.
  FlowField geometric_flow(int a, int b) const {
    FlowField flow(intr_.width, intr_.height, false);
    for (int y = 0; y < intr_.height; ++y) {
      for (int x = 0; x < intr_.width; ++x) {
        const FlowSample s = flow_sample(a, b, x, y);
        if (!s.valid) continue;
        flow.u_component.at(x, y) = s.flow.x();
        flow.v_component.at(x, y) = s.flow.y();
        flow.valid.at(x, y) = 1;
      }
    }
    return flow;
  }

  // F^{t,t-1} under the linear motion-field model: static pixels carry
  // J(u,v,Z) * xi with xi = log(T^{t-1}_cw^-1 T^t_cw); object pixels add the
  // projected object displacement with the camera held at frame t.
  FlowField linearized_flow_to_prev(int t) const {
    FlowField flow(intr_.width, intr_.height, false);
    const Twist xi = detail_relative_twist(t - 1, t);
    const Vec6 v = xi.vector();
    for (int y = 0; y < intr_.height; ++y) {
      for (int x = 0; x < intr_.width; ++x) {
        const Hit hit = raycast(t, x, y);
        if (!hit.valid) continue;
        const Mat26 j = image_jacobian(x - intr_.cx, y - intr_.cy, hit.depth,
                                       intr_, JacobianVariant::kPaper);
        Vec2 f = j * v;
        if (hit.object >= 0) {
          if (!object_live(hit.object, t - 1)) continue;
          const Vec3 prev_world =
              object_center(hit.object, t - 1) + hit.offset;
          const Vec3 cur_cam = poses_[t] * hit.world;
          const Vec3 prev_cam = poses_[t] * prev_world;
          if (prev_cam.z() <= 1e-6) continue;
          f.x() += intr_.fx * (prev_cam.x() / prev_cam.z() -
                               cur_cam.x() / cur_cam.z());
          f.y() += intr_.fy * (prev_cam.y() / prev_cam.z() -
                               cur_cam.y() / cur_cam.z());
        }
        flow.u_component.at(x, y) = f.x();
        flow.v_component.at(x, y) = f.y();
        flow.valid.at(x, y) = 1;
      }
    }
    return flow;
  }

  Twist detail_relative_twist(int from, int to) const {
    return detail::se3_log(poses_[from].inverse() * poses_[to]);
  }

 private:
  Pose camera_pose(int frame) const {
    const double s =
        cfg_.frames > 1 ? static_cast<double>(frame) / (cfg_.frames - 1) : 0.0;
    Pose wc;  // camera-to-world
    switch (cfg_.trajectory) {
      case SyntheticSceneConfig::Trajectory::kStatic:
        break;
      case SyntheticSceneConfig::Trajectory::kDolly:
        wc.translation = Vec3(0, 0, cfg_.amplitude * s);
        break;
      case SyntheticSceneConfig::Trajectory::kOrbit: {
        const double ang = cfg_.rot_amplitude * s;
        const Vec3 pivot(0, 0, cfg_.plane_depth * 0.5);
        const Mat3 r = so3_exp(Vec3(0, ang, 0));
        wc.rotation = r;
        wc.translation = pivot - r * pivot;
        break;
      }
      case SyntheticSceneConfig::Trajectory::kSinusoid: {
        const double phase = 2.0 * std::numbers::pi * s;
        wc.translation = Vec3(cfg_.amplitude * std::sin(phase),
                              cfg_.amplitude * 0.5 * std::sin(2.0 * phase),
                              cfg_.amplitude * 0.25 * (1 - std::cos(phase)));
        wc.rotation = so3_exp(Vec3(0, cfg_.rot_amplitude * std::sin(phase),
                                   cfg_.rot_amplitude * 0.3 * std::cos(phase)));
        break;
      }
    }
    return wc.inverse();  // stored as T_cw
  }

  static double intersect_sphere(const Vec3& origin, const Vec3& dir,
                                 const Vec3& center, double radius) {
    const Vec3 oc = origin - center;
    const double a = dir.squaredNorm();
    const double b = 2.0 * oc.dot(dir);
    const double c = oc.squaredNorm() - radius * radius;
    const double disc = b * b - 4 * a * c;
    if (disc < 0) return -1.0;
    const double sq = std::sqrt(disc);
    const double d0 = (-b - sq) / (2 * a);
    if (d0 > 1e-6) return d0;
    const double d1 = (-b + sq) / (2 * a);
    return d1 > 1e-6 ? d1 : -1.0;
  }

  static double intersect_box(const Vec3& origin, const Vec3& dir,
                              const Vec3& center, double half) {
    double tmin = -1e30, tmax = 1e30;
    for (int axis = 0; axis < 3; ++axis) {
      const double o = origin[axis] - center[axis];
      if (std::abs(dir[axis]) < 1e-12) {
        if (std::abs(o) > half) return -1.0;
        continue;
      }
      double t0 = (-half - o) / dir[axis];
      double t1 = (half - o) / dir[axis];
      if (t0 > t1) std::swap(t0, t1);
      tmin = std::max(tmin, t0);
      tmax = std::min(tmax, t1);
    }
    if (tmin > tmax) return -1.0;
    if (tmin > 1e-6) return tmin;
    return tmax > 1e-6 ? tmax : -1.0;
  }

  SyntheticSceneConfig cfg_;
  Intrinsics intr_;
  std::vector<Pose> poses_;
};

}  // namespace detail

inline Dataset generate_synthetic(const SyntheticSceneConfig& cfg) {
  if (cfg.frames < 1) throw Error("synthetic config needs >= 1 frame");
  auto scene = std::make_shared<detail::SyntheticScene>(cfg);
  std::mt19937 rng(cfg.seed);
  std::normal_distribution<double> noise(0.0, 1.0);

  Dataset ds;
  ds.intrinsics = scene->intrinsics();
  for (int k = 0; k < cfg.frames; ++k) {
    FrameBundle frame;
    frame.timestamp = scene->timestamp(k);
    frame.color = ColorImage(cfg.width, cfg.height);
    frame.depth = DepthMap(cfg.width, cfg.height);
    MaskGrid object_mask(cfg.width, cfg.height, 0);
    size_t covered = 0;
    for (int y = 0; y < cfg.height; ++y) {
      for (int x = 0; x < cfg.width; ++x) {
        const auto hit = scene->raycast(k, x, y);
        if (!hit.valid) continue;
        frame.color.set_pixel(x, y, scene->surface_color(hit));
        double depth = hit.depth;
        if (cfg.depth_sigma > 0) {
          depth = std::max(1e-3, depth + cfg.depth_sigma * noise(rng));
        }
        frame.depth.values.at(x, y) = depth;
        if (hit.object >= 0) {
          object_mask.at(x, y) = 1;
          ++covered;
        }
      }
    }
    if (covered == static_cast<size_t>(cfg.width) * cfg.height) {
      throw DegenerateScene("an object occludes the entire frame " +
                            std::to_string(k));
    }
    if (k > 0) {
      FlowField to_prev = cfg.linearized_rigid_flow
                              ? scene->linearized_flow_to_prev(k)
                              : scene->geometric_flow(k, k - 1);
      FlowField from_prev = scene->geometric_flow(k - 1, k);
      if (cfg.flow_sigma > 0) {
        for (size_t i = 0; i < to_prev.valid.size(); ++i) {
          if (to_prev.valid[i]) {
            to_prev.u_component[i] += cfg.flow_sigma * noise(rng);
            to_prev.v_component[i] += cfg.flow_sigma * noise(rng);
          }
          if (from_prev.valid[i]) {
            from_prev.u_component[i] += cfg.flow_sigma * noise(rng);
            from_prev.v_component[i] += cfg.flow_sigma * noise(rng);
          }
        }
      }
      frame.flow_to_prev = std::move(to_prev);
      frame.flow_from_prev = std::move(from_prev);
    }
    if (cfg.semantic_from_gt) frame.semantic_mask = object_mask;
    ds.gt_object_masks.push_back(std::move(object_mask));
    ds.gt_poses.push_back(scene->pose(k));
    ds.frames.push_back(std::move(frame));
  }
  ds.flow_oracle = [scene](int a, int b) {
    return scene->geometric_flow(a, b);
  };
  return ds;
}

// Ground-truth relative twist (right-multiplication convention), exposed for
// tests and the flow-model oracle.
inline Twist synthetic_relative_twist(const Dataset& ds, int from, int to) {
  return detail::se3_log(ds.gt_poses[from].inverse() * ds.gt_poses[to]);
}

}  // namespace flowsplat
