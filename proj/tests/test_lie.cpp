#include <doctest.h>

#include <random>

#include "flowsplat/lie.hpp"

using namespace flowsplat;

namespace {

// Independent oracle: matrix exponential by truncated power series.
Mat3 exp_series(const Mat3& a, int terms = 30) {
  Mat3 sum = Mat3::Identity();
  Mat3 term = Mat3::Identity();
  for (int n = 1; n <= terms; ++n) {
    term = term * a / n;
    sum += term;
  }
  return sum;
}

// Independent oracle: V(theta) = integral_0^1 exp(s theta_hat) ds by
// composite Simpson quadrature.
Mat3 left_jacobian_quadrature(const Vec3& theta, int steps = 2000) {
  const Mat3 hat = skew(theta);
  Mat3 sum = Mat3::Zero();
  const double h = 1.0 / steps;
  for (int i = 0; i <= steps; ++i) {
    const double w = (i == 0 || i == steps) ? 1.0 : (i % 2 ? 4.0 : 2.0);
    sum += w * exp_series(i * h * hat);
  }
  return sum * (h / 3.0);
}

std::mt19937 rng(42);

Vec3 random_vec3(double scale) {
  std::uniform_real_distribution<double> d(-scale, scale);
  return Vec3(d(rng), d(rng), d(rng));
}

}  // namespace

TEST_CASE("so3_exp basics") {
  CHECK(so3_exp(Vec3::Zero()).isApprox(Mat3::Identity(), 1e-15));

  // Quarter turn about z maps x to y.
  const Mat3 r = so3_exp(Vec3(0, 0, M_PI / 2));
  CHECK((r * Vec3(1, 0, 0) - Vec3(0, 1, 0)).norm() < 1e-12);

  // Agreement with the power-series oracle.
  for (int i = 0; i < 100; ++i) {
    const Vec3 theta = random_vec3(2.0);
    CHECK((so3_exp(theta) - exp_series(skew(theta))).norm() < 1e-12);
  }
}

TEST_CASE("so3_exp orthonormality over random draws") {
  for (int i = 0; i < 10000; ++i) {
    const Mat3 r = so3_exp(random_vec3(3.0));
    CHECK((r * r.transpose() - Mat3::Identity()).norm() < 1e-9);
    CHECK(r.determinant() == doctest::Approx(1.0).epsilon(1e-9));
  }
}

TEST_CASE("left jacobian matches quadrature oracle") {
  CHECK(so3_left_jacobian(Vec3::Zero()).isApprox(Mat3::Identity(), 1e-15));
  for (int i = 0; i < 25; ++i) {
    const Vec3 theta = random_vec3(2.5);
    const Mat3 v = so3_left_jacobian(theta);
    CHECK((v - left_jacobian_quadrature(theta)).norm() < 1e-9);
  }
}

TEST_CASE("small-angle branch is continuous at the switchover") {
  // Evaluate both closed form and Taylor expansion near the threshold.
  for (double angle : {0.9e-8, 1.1e-8, 1e-7, 1e-6}) {
    const Vec3 theta = angle * Vec3(1, 2, 2).normalized();
    const Mat3 hat = skew(theta);
    const Mat3 taylor = Mat3::Identity() + hat + 0.5 * hat * hat;
    CHECK((so3_exp(theta) - taylor).norm() < 1e-14);
    const Mat3 taylor_v = Mat3::Identity() + 0.5 * hat + hat * hat / 6.0;
    // Just above the switchover the closed form evaluates (1 - cos) / angle^2
    // with catastrophic cancellation, costing ~0.5 * angle absolutely; the
    // branches still join to within that.
    CHECK((so3_left_jacobian(theta) - taylor_v).norm() < 2e-8);
  }
}

TEST_CASE("se3 exp/log roundtrip") {
  for (int i = 0; i < 10000; ++i) {
    Twist xi{random_vec3(1.0), random_vec3(2.5)};
    // The log returns the principal branch; stay inside |theta| < pi with
    // margin so the roundtrip is well defined.
    if (xi.theta.norm() > 3.0) xi.theta *= 3.0 / xi.theta.norm();
    const Pose pose = se3_exp(xi);
    const Twist back = detail::se3_log(pose);
    CHECK((back.rho - xi.rho).norm() < 1e-9);
    CHECK((back.theta - xi.theta).norm() < 1e-9);
  }
}

TEST_CASE("se3_log near pi rotations") {
  for (int i = 0; i < 200; ++i) {
    const Vec3 axis = random_vec3(1.0).normalized();
    const Twist xi{random_vec3(0.5), (M_PI - 1e-4) * axis};
    const Pose pose = se3_exp(xi);
    const Pose again = se3_exp(detail::se3_log(pose));
    // The log is ill-conditioned near theta = pi (the axis comes out of a
    // near-singular symmetric part), so only about sqrt(eps) accuracy is
    // attainable here.
    CHECK((again.rotation - pose.rotation).norm() < 1e-6);
    CHECK((again.translation - pose.translation).norm() < 1e-6);
  }
}

TEST_CASE("pose composition and inverse") {
  for (int i = 0; i < 1000; ++i) {
    const Pose a = se3_exp(Twist{random_vec3(1.0), random_vec3(2.0)});
    const Pose b = se3_exp(Twist{random_vec3(1.0), random_vec3(2.0)});
    const Vec3 p = random_vec3(3.0);
    // (a*b) p == a (b p)
    CHECK(((a * b) * p - a * (b * p)).norm() < 1e-12);
    const Pose id = a * a.inverse();
    CHECK((id.rotation - Mat3::Identity()).norm() < 1e-12);
    CHECK(id.translation.norm() < 1e-12);
  }
}

TEST_CASE("compose_pose right-multiplies the increment") {
  const Pose prev = se3_exp(Twist{Vec3(0.1, -0.2, 0.3), Vec3(0.2, 0.1, -0.3)});
  const Twist delta{Vec3(0.01, 0.02, -0.01), Vec3(0.005, -0.01, 0.02)};
  const Pose next = compose_pose(prev, delta);
  const Pose expect = prev * se3_exp(delta);
  CHECK((next.rotation - expect.rotation).norm() < 1e-15);
  CHECK((next.translation - expect.translation).norm() < 1e-15);
}

TEST_CASE("project/unproject roundtrip") {
  const Intrinsics intr{80.0, 82.0, 31.5, 30.5, 64, 62};
  for (int i = 0; i < 10000; ++i) {
    const Pose pose = se3_exp(Twist{random_vec3(0.3), random_vec3(0.4)});
    std::uniform_real_distribution<double> du(0.0, 63.0), dv(0.0, 61.0),
        dz(0.2, 10.0);
    const Vec2 pixel(du(rng), dv(rng));
    const double depth = dz(rng);
    const Vec3 world = unproject(intr, pose, pixel, depth);
    const Projection proj = project(intr, pose, world);
    CHECK((proj.pixel - pixel).norm() < 1e-9);
    CHECK(proj.depth == doctest::Approx(depth).epsilon(1e-9));
  }
}

TEST_CASE("projection errors") {
  const Intrinsics intr{80.0, 80.0, 32.0, 32.0, 64, 64};
  CHECK_THROWS_AS(project(intr, Pose{}, Vec3(0, 0, -1.0)), BehindCamera);
  CHECK_THROWS_AS(unproject(intr, Pose{}, Vec2(0, 0), 0.0), InvalidDepth);
  CHECK_THROWS_AS(unproject(intr, Pose{}, Vec2(0, 0), -2.0), InvalidDepth);
}

TEST_CASE("known projection example") {
  // Identity pose, point on the optical axis lands on the principal point.
  const Intrinsics intr{100.0, 100.0, 32.0, 24.0, 64, 48};
  const Projection c = project(intr, Pose{}, Vec3(0, 0, 2.0));
  CHECK(c.pixel.x() == doctest::Approx(32.0));
  CHECK(c.pixel.y() == doctest::Approx(24.0));
  CHECK(c.depth == doctest::Approx(2.0));
  // One meter to the right at 2 m depth: fx * x/z = 50 px offset.
  const Projection r = project(intr, Pose{}, Vec3(1.0, 0, 2.0));
  CHECK(r.pixel.x() == doctest::Approx(82.0));
}
