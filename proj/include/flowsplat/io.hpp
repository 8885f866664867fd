#pragma once

// Bit-exact file codecs: Middlebury .flo flow, binary PGM masks, TUM-format
// trajectory text, and the intrinsics manifest.

#include <cctype>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <iomanip>
#include <sstream>

#include "flowsplat/core.hpp"
#include "flowsplat/lie.hpp"

namespace flowsplat {

constexpr double kFloInvalidThreshold = 1e9;

inline void write_flo(std::ostream& os, const FlowField& flow) {
  os.write("PIEH", 4);
  const int32_t w = flow.width(), h = flow.height();
  os.write(reinterpret_cast<const char*>(&w), 4);
  os.write(reinterpret_cast<const char*>(&h), 4);
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      float u, v;
      if (flow.valid.at(x, y)) {
        u = static_cast<float>(flow.u_component.at(x, y));
        v = static_cast<float>(flow.v_component.at(x, y));
      } else {
        u = v = 1e10f;  // conventional "unknown flow" sentinel
      }
      os.write(reinterpret_cast<const char*>(&u), 4);
      os.write(reinterpret_cast<const char*>(&v), 4);
    }
  }
}

inline FlowField read_flo(std::istream& is) {
  char magic[4];
  is.read(magic, 4);
  if (!is || std::memcmp(magic, "PIEH", 4) != 0) {
    throw BadMagic("not a .flo file");
  }
  int32_t w = 0, h = 0;
  is.read(reinterpret_cast<char*>(&w), 4);
  is.read(reinterpret_cast<char*>(&h), 4);
  if (!is || w < 0 || h < 0) throw TruncatedFile(".flo header truncated");
  FlowField flow(w, h, false);
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      float u, v;
      is.read(reinterpret_cast<char*>(&u), 4);
      is.read(reinterpret_cast<char*>(&v), 4);
      if (!is) throw TruncatedFile(".flo data truncated");
      if (std::abs(u) > kFloInvalidThreshold ||
          std::abs(v) > kFloInvalidThreshold) {
        continue;
      }
      flow.u_component.at(x, y) = u;
      flow.v_component.at(x, y) = v;
      flow.valid.at(x, y) = 1;
    }
  }
  return flow;
}

inline void write_flo_file(const std::string& path, const FlowField& flow) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw IoFailure("cannot open " + path + " for writing");
  write_flo(os, flow);
}

inline FlowField read_flo_file(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoFailure("cannot open " + path);
  return read_flo(is);
}

// ---------------------------------------------------------------------------
// Binary PGM (P5, maxval 255) masks: nonzero means true.

inline void write_mask_pgm(std::ostream& os, const MaskGrid& mask) {
  os << "P5\n" << mask.width() << " " << mask.height() << "\n255\n";
  for (int y = 0; y < mask.height(); ++y) {
    for (int x = 0; x < mask.width(); ++x) {
      os.put(mask.at(x, y) ? char(255) : char(0));
    }
  }
}

inline MaskGrid read_mask_pgm(std::istream& is) {
  std::string magic;
  is >> magic;
  if (magic != "P5") throw BadHeader("not a binary PGM (P5) file");
  auto next_token = [&is]() -> long {
    // Skip whitespace and '#' comments between header tokens.
    int ch = is.peek();
    while (is && (std::isspace(ch) || ch == '#')) {
      if (ch == '#') {
        std::string line;
        std::getline(is, line);
      } else {
        is.get();
      }
      ch = is.peek();
    }
    long value = -1;
    is >> value;
    return value;
  };
  const long w = next_token();
  const long h = next_token();
  const long maxval = next_token();
  if (!is || w < 0 || h < 0 || maxval <= 0 || maxval > 255) {
    throw BadHeader("bad PGM header");
  }
  is.get();  // single whitespace after maxval
  MaskGrid mask(static_cast<int>(w), static_cast<int>(h), 0);
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      const int value = is.get();
      if (value == EOF) throw TruncatedFile("PGM data truncated");
      mask.at(x, y) = value ? 1 : 0;
    }
  }
  return mask;
}

inline void write_mask_pgm_file(const std::string& path, const MaskGrid& mask) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw IoFailure("cannot open " + path + " for writing");
  write_mask_pgm(os, mask);
}

inline MaskGrid read_mask_pgm_file(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoFailure("cannot open " + path);
  return read_mask_pgm(is);
}

// ---------------------------------------------------------------------------
// TUM trajectory text: `timestamp tx ty tz qx qy qz qw`, camera-to-world.
// Stored poses are T_cw, so each is inverted on export.

inline void write_trajectory_tum(std::ostream& os,
                                 const std::vector<double>& timestamps,
                                 const std::vector<Pose>& poses) {
  if (timestamps.size() != poses.size()) {
    throw LengthMismatch("trajectory timestamps/poses length mismatch");
  }
  os << std::setprecision(9);
  for (size_t i = 0; i < poses.size(); ++i) {
    const Pose wc = poses[i].inverse();
    Eigen::Quaterniond q(wc.rotation);
    if (q.w() < 0) q.coeffs() *= -1.0;
    os << std::fixed << std::setprecision(9) << timestamps[i]
       << std::defaultfloat << std::setprecision(9) << " "
       << wc.translation.x() << " " << wc.translation.y() << " "
       << wc.translation.z() << " " << q.x() << " " << q.y() << " " << q.z()
       << " " << q.w() << "\n";
  }
}

inline void write_trajectory_tum_file(const std::string& path,
                                      const std::vector<double>& timestamps,
                                      const std::vector<Pose>& poses) {
  std::ofstream os(path);
  if (!os) throw IoFailure("cannot open " + path + " for writing");
  write_trajectory_tum(os, timestamps, poses);
  if (!os) throw IoFailure("write failed: " + path);
}

struct TrajectoryEntry {
  double timestamp;
  Pose pose_cw;
};

inline std::vector<TrajectoryEntry> read_trajectory_tum(std::istream& is) {
  std::vector<TrajectoryEntry> entries;
  std::string line;
  while (std::getline(is, line)) {
    if (line.empty() || line[0] == '#') continue;
    std::istringstream ss(line);
    double ts, tx, ty, tz, qx, qy, qz, qw;
    if (!(ss >> ts >> tx >> ty >> tz >> qx >> qy >> qz >> qw)) continue;
    Pose wc;
    wc.rotation = Eigen::Quaterniond(qw, qx, qy, qz).normalized().toRotationMatrix();
    wc.translation = Vec3(tx, ty, tz);
    entries.push_back({ts, wc.inverse()});
  }
  return entries;
}

inline std::vector<TrajectoryEntry> read_trajectory_tum_file(
    const std::string& path) {
  std::ifstream is(path);
  if (!is) throw IoFailure("cannot open " + path);
  return read_trajectory_tum(is);
}

// ---------------------------------------------------------------------------
// Intrinsics manifest: `fx fy cx cy width height` on one line.

inline void write_intrinsics_file(const std::string& path,
                                  const Intrinsics& intr) {
  std::ofstream os(path);
  if (!os) throw IoFailure("cannot open " + path + " for writing");
  os << std::setprecision(12) << intr.fx << " " << intr.fy << " " << intr.cx
     << " " << intr.cy << " " << intr.width << " " << intr.height << "\n";
}

inline Intrinsics read_intrinsics_file(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw IoFailure("cannot open " + path);
  Intrinsics intr;
  if (!(is >> intr.fx >> intr.fy >> intr.cx >> intr.cy >> intr.width >>
        intr.height)) {
    throw BadHeader("bad intrinsics file: " + path);
  }
  return intr;
}

}  // namespace flowsplat
