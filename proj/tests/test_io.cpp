#include <doctest.h>

#include <cstdio>
#include <filesystem>
#include <random>
#include <sstream>

#include "flowsplat/field_io.hpp"
#include "flowsplat/io.hpp"
#include "flowsplat/png_io.hpp"

using namespace flowsplat;

namespace {

std::mt19937 rng(11);

std::string temp_path(const std::string& name) {
  return (std::filesystem::temp_directory_path() / name).string();
}

}  // namespace

TEST_CASE("flo roundtrip preserves values and validity") {
  FlowField flow(7, 5, true);
  std::uniform_real_distribution<float> d(-40.0f, 40.0f);
  for (size_t i = 0; i < flow.valid.size(); ++i) {
    flow.u_component[i] = d(rng);
    flow.v_component[i] = d(rng);
  }
  flow.valid.at(3, 2) = 0;
  flow.valid.at(0, 4) = 0;

  std::stringstream ss;
  write_flo(ss, flow);
  const FlowField back = read_flo(ss);
  REQUIRE(back.width() == 7);
  REQUIRE(back.height() == 5);
  for (int y = 0; y < 5; ++y) {
    for (int x = 0; x < 7; ++x) {
      CHECK(back.valid.at(x, y) == flow.valid.at(x, y));
      if (!flow.valid.at(x, y)) continue;
      // Values survive the float round-trip exactly.
      CHECK(back.u_component.at(x, y) ==
            doctest::Approx(static_cast<float>(flow.u_component.at(x, y))));
    }
  }
}

TEST_CASE("flo header layout is bit-exact") {
  FlowField flow(2, 1, true);
  flow.u_component.at(0, 0) = 1.0;
  flow.v_component.at(0, 0) = -2.0;
  std::stringstream ss;
  write_flo(ss, flow);
  const std::string bytes = ss.str();
  REQUIRE(bytes.size() == 4 + 8 + 2 * 8);
  CHECK(bytes.substr(0, 4) == "PIEH");
  int32_t w, h;
  std::memcpy(&w, bytes.data() + 4, 4);
  std::memcpy(&h, bytes.data() + 8, 4);
  CHECK(w == 2);
  CHECK(h == 1);
  float u0;
  std::memcpy(&u0, bytes.data() + 12, 4);
  CHECK(u0 == 1.0f);
}

TEST_CASE("flo error paths") {
  std::stringstream bad("XXXX");
  CHECK_THROWS_AS(read_flo(bad), BadMagic);
  std::stringstream trunc("PIEH");
  CHECK_THROWS_AS(read_flo(trunc), TruncatedFile);
  FlowField flow(4, 4, true);
  std::stringstream ss;
  write_flo(ss, flow);
  std::string clipped = ss.str().substr(0, 20);
  std::stringstream ss2(clipped);
  CHECK_THROWS_AS(read_flo(ss2), TruncatedFile);
}

TEST_CASE("pgm mask roundtrip and comments") {
  MaskGrid mask(9, 4, 0);
  mask.at(0, 0) = 1;
  mask.at(8, 3) = 1;
  mask.at(4, 2) = 1;
  std::stringstream ss;
  write_mask_pgm(ss, mask);
  CHECK(read_mask_pgm(ss) == mask);

  std::string pgm_bytes = "P5\n# a comment line\n2 2\n255\n";
  pgm_bytes += '\x00';
  pgm_bytes += '\xff';
  pgm_bytes += '\x00';
  pgm_bytes += '\xff';
  std::stringstream with_comment(pgm_bytes);
  const MaskGrid m = read_mask_pgm(with_comment);
  CHECK(m.at(0, 0) == 0);
  CHECK(m.at(1, 0) == 1);
  CHECK(m.at(1, 1) == 1);

  std::stringstream bad("P6\n2 2\n255\n");
  CHECK_THROWS_AS(read_mask_pgm(bad), BadHeader);
}

TEST_CASE("trajectory roundtrip through TUM text") {
  std::vector<double> stamps;
  std::vector<Pose> poses;
  for (int i = 0; i < 20; ++i) {
    stamps.push_back(1000.0 + 0.1 * i);
    Twist xi{Vec3(0.01 * i, -0.02 * i, 0.5), Vec3(0.05 * i, 0.02, -0.04 * i)};
    poses.push_back(se3_exp(xi));
  }
  std::stringstream ss;
  write_trajectory_tum(ss, stamps, poses);
  const auto entries = read_trajectory_tum(ss);
  REQUIRE(entries.size() == poses.size());
  for (size_t i = 0; i < poses.size(); ++i) {
    CHECK(entries[i].timestamp == doctest::Approx(stamps[i]));
    CHECK((entries[i].pose_cw.rotation - poses[i].rotation).norm() < 1e-6);
    CHECK((entries[i].pose_cw.translation - poses[i].translation).norm() <
          1e-6);
  }
  CHECK_THROWS_AS(write_trajectory_tum(ss, {1.0}, poses), LengthMismatch);
}

TEST_CASE("trajectory text is camera-to-world") {
  // T_cw with translation (0,0,1) means the camera sits at (0,0,-1) in world.
  Pose cw;
  cw.translation = Vec3(0, 0, 1);
  std::stringstream ss;
  write_trajectory_tum(ss, {0.0}, {cw});
  double ts, tx, ty, tz;
  ss >> ts >> tx >> ty >> tz;
  CHECK(tz == doctest::Approx(-1.0));
}

TEST_CASE("png color roundtrip") {
  ColorImage img(16, 12);
  std::uniform_real_distribution<double> d(0.0, 1.0);
  for (int y = 0; y < 12; ++y) {
    for (int x = 0; x < 16; ++x) {
      img.set_pixel(x, y, Vec3(d(rng), d(rng), d(rng)));
    }
  }
  const std::string path = temp_path("flowsplat_test_color.png");
  write_color_png(path, img);
  const ColorImage back = read_color_png(path);
  REQUIRE(back.width() == 16);
  REQUIRE(back.height() == 12);
  for (int y = 0; y < 12; ++y) {
    for (int x = 0; x < 16; ++x) {
      // 8-bit quantization: error bounded by half a step.
      CHECK((back.pixel(x, y) - img.pixel(x, y)).cwiseAbs().maxCoeff() <=
            0.5 / 255.0 + 1e-12);
    }
  }
  std::remove(path.c_str());
}

TEST_CASE("png depth roundtrip at TUM scale") {
  DepthMap depth(8, 8);
  for (int y = 0; y < 8; ++y) {
    for (int x = 0; x < 8; ++x) {
      depth.values.at(x, y) = 0.5 + 0.25 * x + 0.1 * y;
    }
  }
  depth.values.at(0, 0) = 0.0;  // invalid stays invalid
  const std::string path = temp_path("flowsplat_test_depth.png");
  write_depth_png(path, depth);
  const DepthMap back = read_depth_png(path);
  for (int y = 0; y < 8; ++y) {
    for (int x = 0; x < 8; ++x) {
      CHECK(std::abs(back.values.at(x, y) - depth.values.at(x, y)) <=
            0.5 / 5000.0 + 1e-12);
    }
  }
  CHECK(back.values.at(0, 0) == 0.0);
  std::remove(path.c_str());
}

TEST_CASE("field container roundtrip") {
  GaussianField field;
  field.time_min = 10.0;
  field.time_max = 20.0;
  field.keyframe_times = {10.0, 14.0, 20.0};
  for (int i = 0; i < 5; ++i) {
    StaticGaussian g;
    g.center = Vec3(i, -i, 0.5 * i);
    g.log_scale = Vec3(-2, -2.5, -3);
    g.rotation = Vec4(0.9, 0.1, -0.2, 0.3).normalized();
    g.opacity_logit = 0.25 * i;
    g.color = Vec3(0.1 * i, 0.5, 1.0 - 0.1 * i);
    field.static_set.push_back(g);
  }
  DynamicGaussian d;
  d.birth_keyframe = 1;
  d.keyframe_centers = {Vec3(1, 2, 3), Vec3(1.5, 2, 3)};
  d.log_scale = Vec3(-1, -1, -1);
  d.opacity_logit = 0.5;
  d.color = Vec3(0.9, 0.1, 0.2);
  d.amplitude_log = 1.25;
  for (int k = 0; k < 3; ++k) {
    GmmComponent c;
    c.weight_logit = 0.1 * k;
    c.mean = 0.2 + 0.3 * k;
    c.log_tau = -1.5;
    c.quaternion = Vec4(1, 0.05 * k, 0, 0).normalized();
    d.gmm.push_back(c);
  }
  field.dynamic_set.push_back(d);

  std::stringstream ss;
  write_field(ss, field);
  const GaussianField back = read_field(ss);
  REQUIRE(back.static_set.size() == 5);
  REQUIRE(back.dynamic_set.size() == 1);
  CHECK(back.time_min == 10.0);
  CHECK(back.keyframe_times == field.keyframe_times);
  CHECK((back.static_set[2].center - field.static_set[2].center).norm() <
        1e-6);
  CHECK(back.dynamic_set[0].birth_keyframe == 1);
  REQUIRE(back.dynamic_set[0].keyframe_centers.size() == 2);
  REQUIRE(back.dynamic_set[0].gmm.size() == 3);
  CHECK(back.dynamic_set[0].gmm[2].mean == doctest::Approx(0.8).epsilon(1e-6));

  std::stringstream bad("NOPE");
  CHECK_THROWS_AS(read_field(bad), BadMagic);
  std::stringstream ss2;
  write_field(ss2, field);
  std::stringstream ss3(ss2.str().substr(0, 40));
  CHECK_THROWS_AS(read_field(ss3), TruncatedFile);
}

TEST_CASE("intrinsics file roundtrip") {
  const std::string path = temp_path("flowsplat_test_intr.txt");
  const Intrinsics intr{535.4, 539.2, 320.1, 247.6, 640, 480};
  write_intrinsics_file(path, intr);
  const Intrinsics back = read_intrinsics_file(path);
  CHECK(back.fx == doctest::Approx(535.4));
  CHECK(back.cy == doctest::Approx(247.6));
  CHECK(back.width == 640);
  CHECK(back.height == 480);
  std::remove(path.c_str());
}
