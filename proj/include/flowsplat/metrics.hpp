#pragma once

// Evaluation metrics: ATE RMSE with rigid Umeyama alignment, PSNR, and SSIM.

#include <cmath>

#include "flowsplat/core.hpp"
#include "flowsplat/lie.hpp"

namespace flowsplat {

struct AteResult {
  double rmse_cm = 0.0;
  std::vector<double> per_frame_cm;
};

// Rigid (unit-scale) alignment of estimated camera centers to ground truth,
// then RMSE of the translation residuals. Poses are T_cw; camera centers are
// the inverse translations.
inline AteResult ate_rmse(const std::vector<Pose>& estimated,
                          const std::vector<Pose>& ground_truth) {
  if (estimated.size() != ground_truth.size()) {
    throw LengthMismatch("ate_rmse: trajectory lengths differ");
  }
  const size_t n = estimated.size();
  if (n < 2) throw InsufficientData("ate_rmse needs >= 2 poses");

  Eigen::Matrix3Xd src(3, n), dst(3, n);
  for (size_t i = 0; i < n; ++i) {
    src.col(i) = estimated[i].inverse().translation;
    dst.col(i) = ground_truth[i].inverse().translation;
  }
  const Eigen::Matrix4d t = Eigen::umeyama(src, dst, /*with_scaling=*/false);
  const Mat3 r = t.topLeftCorner<3, 3>();
  const Vec3 shift = t.topRightCorner<3, 1>();

  AteResult out;
  double sum_sq = 0.0;
  for (size_t i = 0; i < n; ++i) {
    const double err = (dst.col(i) - (r * src.col(i) + shift)).norm();
    out.per_frame_cm.push_back(err * 100.0);
    sum_sq += err * err;
  }
  out.rmse_cm = 100.0 * std::sqrt(sum_sq / n);
  return out;
}

constexpr double kPsnrCap = 99.0;

// PSNR = 10 log10(1 / MSE) for [0,1] images, capped at 99 dB.
inline double psnr(const ColorImage& render, const ColorImage& reference) {
  if (!render.r.same_shape(reference.r)) {
    throw DimensionMismatch("psnr: image shapes differ");
  }
  if (render.r.empty()) throw EmptyInput("psnr of empty image");
  double mse = 0.0;
  for (int y = 0; y < render.height(); ++y) {
    for (int x = 0; x < render.width(); ++x) {
      mse += (render.pixel(x, y) - reference.pixel(x, y)).squaredNorm();
    }
  }
  mse /= 3.0 * render.r.size();
  if (mse < 1e-10) return kPsnrCap;
  return std::min(kPsnrCap, 10.0 * std::log10(1.0 / mse));
}

// PSNR restricted to mask pixels (e.g. the dynamic region).
inline double psnr_masked(const ColorImage& render,
                          const ColorImage& reference, const MaskGrid& mask) {
  if (!render.r.same_shape(reference.r) || !render.r.same_shape(mask)) {
    throw DimensionMismatch("psnr_masked: shapes differ");
  }
  double mse = 0.0;
  size_t count = 0;
  for (int y = 0; y < render.height(); ++y) {
    for (int x = 0; x < render.width(); ++x) {
      if (!mask.at(x, y)) continue;
      mse += (render.pixel(x, y) - reference.pixel(x, y)).squaredNorm();
      ++count;
    }
  }
  if (count == 0) throw EmptyInput("psnr_masked: empty mask");
  mse /= 3.0 * count;
  if (mse < 1e-10) return kPsnrCap;
  return std::min(kPsnrCap, 10.0 * std::log10(1.0 / mse));
}

namespace detail {

inline std::vector<double> ssim_window() {
  // 11x11 Gaussian, sigma = 1.5, normalized.
  std::vector<double> w(11 * 11);
  double sum = 0.0;
  for (int y = 0; y < 11; ++y) {
    for (int x = 0; x < 11; ++x) {
      const double dx = x - 5, dy = y - 5;
      w[y * 11 + x] = std::exp(-(dx * dx + dy * dy) / (2.0 * 1.5 * 1.5));
      sum += w[y * 11 + x];
    }
  }
  for (double& v : w) v /= sum;
  return w;
}

inline double ssim_channel(const ScalarGrid& a, const ScalarGrid& b) {
  const int w = a.width(), h = a.height();
  if (w < 11 || h < 11) throw InsufficientData("ssim needs >= 11x11 images");
  static const std::vector<double> win = ssim_window();
  constexpr double c1 = 0.01 * 0.01, c2 = 0.03 * 0.03;

  double total = 0.0;
  size_t count = 0;
  for (int cy = 5; cy < h - 5; ++cy) {
    for (int cx = 5; cx < w - 5; ++cx) {
      double mu_a = 0, mu_b = 0, aa = 0, bb = 0, ab = 0;
      for (int dy = -5; dy <= 5; ++dy) {
        for (int dx = -5; dx <= 5; ++dx) {
          const double g = win[(dy + 5) * 11 + (dx + 5)];
          const double va = a.at(cx + dx, cy + dy);
          const double vb = b.at(cx + dx, cy + dy);
          mu_a += g * va;
          mu_b += g * vb;
          aa += g * va * va;
          bb += g * vb * vb;
          ab += g * va * vb;
        }
      }
      const double var_a = aa - mu_a * mu_a;
      const double var_b = bb - mu_b * mu_b;
      const double cov = ab - mu_a * mu_b;
      total += ((2 * mu_a * mu_b + c1) * (2 * cov + c2)) /
               ((mu_a * mu_a + mu_b * mu_b + c1) * (var_a + var_b + c2));
      ++count;
    }
  }
  return total / count;
}

}  // namespace detail

// Mean SSIM over the three channels, evaluated where the full 11x11 window
// fits inside the image.
inline double ssim(const ColorImage& render, const ColorImage& reference) {
  if (!render.r.same_shape(reference.r)) {
    throw DimensionMismatch("ssim: image shapes differ");
  }
  return (detail::ssim_channel(render.r, reference.r) +
          detail::ssim_channel(render.g, reference.g) +
          detail::ssim_channel(render.b, reference.b)) /
         3.0;
}

}  // namespace flowsplat
