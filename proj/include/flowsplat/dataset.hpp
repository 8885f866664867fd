#pragma once

#include <filesystem>
#include <fstream>
#include <functional>
#include <optional>
#include <sstream>

#include "flowsplat/core.hpp"
#include "flowsplat/io.hpp"
#include "flowsplat/lie.hpp"
#include "flowsplat/png_io.hpp"

namespace flowsplat {

struct FrameBundle {
  double timestamp = 0.0;
  ColorImage color;
  DepthMap depth;
  std::optional<FlowField> flow_to_prev;    // F^{t,t-1}, on this frame's grid
  std::optional<FlowField> flow_from_prev;  // F^{t-1,t}, on the previous grid
  std::optional<MaskGrid> semantic_mask;    // M_s
};

struct Dataset {
  std::vector<FrameBundle> frames;
  std::vector<Pose> gt_poses;           // T_cw, empty if unknown
  std::vector<MaskGrid> gt_object_masks;  // ground-truth dynamic masks
  double depth_scale = 5000.0;
  Intrinsics intrinsics;
  // Exact flow between arbitrary frame pairs (a -> b, defined on frame a's
  // pixels). Present for synthetic data; used for inter-keyframe flows.
  std::function<FlowField(int, int)> flow_oracle;
};

// ---------------------------------------------------------------------------
// TUM RGB-D layout: rgb.txt / depth.txt index files, 16-bit depth PNGs at
// 1/5000 m, optional groundtruth.txt with camera-to-world quaternions.

namespace detail {

struct IndexedFile {
  double timestamp;
  std::string path;
};

inline std::vector<IndexedFile> read_index_file(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw MissingIndexFile("missing index file: " + path);
  std::vector<IndexedFile> entries;
  std::string line;
  while (std::getline(is, line)) {
    if (line.empty() || line[0] == '#') continue;
    std::istringstream ss(line);
    IndexedFile e;
    if (ss >> e.timestamp >> e.path) entries.push_back(e);
  }
  return entries;
}

// Nearest-timestamp lookup; returns -1 when outside tolerance.
inline int nearest_index(const std::vector<double>& stamps, double query,
                         double tolerance) {
  int best = -1;
  double best_dt = tolerance;
  for (size_t i = 0; i < stamps.size(); ++i) {
    const double dt = std::abs(stamps[i] - query);
    if (dt <= best_dt) {
      best_dt = dt;
      best = static_cast<int>(i);
    }
  }
  return best;
}

}  // namespace detail

inline Dataset load_tum_sequence(const std::string& root_path,
                                 int max_frames = -1,
                                 double association_tolerance = 0.02) {
  namespace fs = std::filesystem;
  const auto rgb = detail::read_index_file(root_path + "/rgb.txt");
  const auto depth = detail::read_index_file(root_path + "/depth.txt");

  std::vector<double> depth_stamps;
  for (const auto& e : depth) depth_stamps.push_back(e.timestamp);

  std::vector<detail::IndexedFile> gt;
  std::vector<double> gt_stamps;
  if (fs::exists(root_path + "/groundtruth.txt")) {
    std::ifstream is(root_path + "/groundtruth.txt");
    std::string line;
    while (std::getline(is, line)) {
      if (line.empty() || line[0] == '#') continue;
      gt.push_back({0, line});
      std::istringstream ss(line);
      double ts;
      ss >> ts;
      gt.back().timestamp = ts;
      gt_stamps.push_back(ts);
    }
  }

  Dataset ds;
  for (const auto& rgb_entry : rgb) {
    if (max_frames >= 0 && static_cast<int>(ds.frames.size()) >= max_frames) {
      break;
    }
    const int di = detail::nearest_index(depth_stamps, rgb_entry.timestamp,
                                         association_tolerance);
    if (di < 0) continue;
    FrameBundle frame;
    frame.timestamp = rgb_entry.timestamp;
    frame.color = read_color_png(root_path + "/" + rgb_entry.path);
    frame.depth = read_depth_png(root_path + "/" + depth[di].path, ds.depth_scale);
    // Optional per-frame priors next to the sequence.
    const std::string stem = fs::path(rgb_entry.path).stem().string();
    const std::string flow_path = root_path + "/flow/" + stem + ".flo";
    if (fs::exists(flow_path)) frame.flow_to_prev = read_flo_file(flow_path);
    const std::string mask_path = root_path + "/mask/" + stem + ".pgm";
    if (fs::exists(mask_path)) frame.semantic_mask = read_mask_pgm_file(mask_path);

    if (!gt.empty()) {
      const int gi = detail::nearest_index(gt_stamps, rgb_entry.timestamp,
                                           association_tolerance);
      if (gi >= 0) {
        std::istringstream ss(gt[gi].path);
        double ts, tx, ty, tz, qx, qy, qz, qw;
        ss >> ts >> tx >> ty >> tz >> qx >> qy >> qz >> qw;
        Pose wc;
        wc.rotation =
            Eigen::Quaterniond(qw, qx, qy, qz).normalized().toRotationMatrix();
        wc.translation = Vec3(tx, ty, tz);
        ds.gt_poses.push_back(wc.inverse());  // camera-to-world convention
      }
    }
    ds.frames.push_back(std::move(frame));
  }
  if (ds.frames.empty()) {
    throw NoAssociations("no rgb/depth associations within tolerance");
  }
  if (!ds.gt_poses.empty() && ds.gt_poses.size() != ds.frames.size()) {
    ds.gt_poses.clear();  // partial ground truth is worse than none
  }
  if (fs::exists(root_path + "/intrinsics.txt")) {
    ds.intrinsics = read_intrinsics_file(root_path + "/intrinsics.txt");
  } else {
    // TUM freiburg3 defaults
    ds.intrinsics = Intrinsics{535.4, 539.2, 320.1, 247.6,
                               ds.frames[0].color.width(),
                               ds.frames[0].color.height()};
  }
  return ds;
}

}  // namespace flowsplat
