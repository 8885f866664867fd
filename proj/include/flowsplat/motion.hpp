#pragma once

#include <algorithm>
#include <cmath>
#include <vector>

#include "flowsplat/core.hpp"
#include "flowsplat/lie.hpp"

namespace flowsplat {

enum class JacobianVariant {
  kPaper,      // mixed-focal last column (v, -u)
  kClassical,  // exact two-focal interaction matrix last column
};

struct RobustFitConfig {
  double cauchy_scale = 1.5;    // pixels
  int irls_iterations = 10;
  double mad_k = 3.0;
  // Absolute floor (px) on the MAD threshold: on near-noiseless input the
  // MAD collapses to numerical dust and would mask solver noise as motion.
  double residual_floor = 0.3;
  int min_inliers = 50;
  double max_translation = 0.05;  // meters per frame
  double max_rotation = 0.05;     // radians per frame
  double clamp_inlier_gain = 2.0;
  double twist_direction = 1.0;   // sign applied before pose composition
  JacobianVariant jacobian_variant = JacobianVariant::kPaper;
  // IRLS subsampling kicks in above this pixel count; masking stays dense.
  size_t subsample_above = size_t{1} << 18;
};

// 2x6 interaction matrix mapping a camera twist to image motion.
// (u_c, v_c) are pixel coordinates relative to the principal point.
inline Mat26 image_jacobian(double u_c, double v_c, double z,
                            const Intrinsics& intr,
                            JacobianVariant variant = JacobianVariant::kPaper) {
  if (z <= 0.0) {
    throw InvalidDepth("image_jacobian needs Z > 0, got " + std::to_string(z));
  }
  const double fx = intr.fx, fy = intr.fy;
  Mat26 j;
  j(0, 0) = -fx / z;
  j(0, 1) = 0;
  j(0, 2) = u_c / z;
  j(0, 3) = u_c * v_c / fy;
  j(0, 4) = -fx - u_c * u_c / fx;
  j(1, 0) = 0;
  j(1, 1) = -fy / z;
  j(1, 2) = v_c / z;
  j(1, 3) = fy + v_c * v_c / fy;
  j(1, 4) = -u_c * v_c / fx;
  if (variant == JacobianVariant::kPaper) {
    j(0, 5) = v_c;
    j(1, 5) = -u_c;
  } else {
    j(0, 5) = fx * v_c / fy;
    j(1, 5) = -fy * u_c / fx;
  }
  return j;
}

inline FlowField predict_rigid_flow(const Twist& xi, const DepthMap& depth,
                                    const Intrinsics& intr,
                                    JacobianVariant variant =
                                        JacobianVariant::kPaper) {
  FlowField flow(depth.width(), depth.height(), false);
  const Vec6 v = xi.vector();
  for (int y = 0; y < depth.height(); ++y) {
    for (int x = 0; x < depth.width(); ++x) {
      const double z = depth.values.at(x, y);
      if (z <= 0.0) continue;
      const Mat26 j =
          image_jacobian(x - intr.cx, y - intr.cy, z, intr, variant);
      const Vec2 f = j * v;
      flow.u_component.at(x, y) = f.x();
      flow.v_component.at(x, y) = f.y();
      flow.valid.at(x, y) = 1;
    }
  }
  return flow;
}

struct IrlsResult {
  Twist twist;
  ScalarGrid weights;  // final Cauchy weights at usable pixels, 0 elsewhere
};

// Robust 6-DoF twist fit: alternating 6x6 weighted normal equations and
// Cauchy reweighting. First iteration uses uniform weights.
inline IrlsResult fit_twist_irls(const FlowField& flow, const DepthMap& depth,
                                 const MaskGrid& exclude,
                                 const Intrinsics& intr,
                                 const RobustFitConfig& cfg) {
  const int w = flow.width(), h = flow.height();
  if (!depth.values.same_shape(w, h) ||
      (!exclude.empty() && !exclude.same_shape(w, h))) {
    throw DimensionMismatch("fit_twist_irls: grid shapes differ");
  }

  struct Sample {
    int u, v;
    Mat26 jac;
    Vec2 flow;
  };
  std::vector<Sample> samples;
  const int stride =
      static_cast<size_t>(w) * h > cfg.subsample_above ? 2 : 1;
  for (int y = 0; y < h; y += stride) {
    for (int x = 0; x < w; x += stride) {
      if (!flow.valid.at(x, y)) continue;
      const double z = depth.values.at(x, y);
      if (z <= 0.0) continue;
      if (!exclude.empty() && exclude.at(x, y)) continue;
      samples.push_back({x, y,
                         image_jacobian(x - intr.cx, y - intr.cy, z, intr,
                                        cfg.jacobian_variant),
                         Vec2(flow.u_component.at(x, y),
                              flow.v_component.at(x, y))});
    }
  }
  if (static_cast<int>(samples.size()) < cfg.min_inliers) {
    throw InsufficientData("fit_twist_irls: " +
                           std::to_string(samples.size()) + " usable pixels");
  }

  Vec6 xi = Vec6::Zero();
  std::vector<double> weights(samples.size(), 1.0);
  const double c2 = cfg.cauchy_scale * cfg.cauchy_scale;

  for (int iter = 0; iter < cfg.irls_iterations; ++iter) {
    if (iter > 0) {
      for (size_t i = 0; i < samples.size(); ++i) {
        const double r = (samples[i].flow - samples[i].jac * xi).norm();
        weights[i] = 1.0 / (1.0 + r * r / c2);
      }
    }
    Mat6 a = Mat6::Zero();
    Vec6 b = Vec6::Zero();
    for (size_t i = 0; i < samples.size(); ++i) {
      a.noalias() += weights[i] * samples[i].jac.transpose() * samples[i].jac;
      b.noalias() += weights[i] * samples[i].jac.transpose() * samples[i].flow;
    }
    Eigen::SelfAdjointEigenSolver<Mat6> eig(a);
    const double lo = eig.eigenvalues().minCoeff();
    const double hi = eig.eigenvalues().maxCoeff();
    if (lo <= 0.0 || hi / lo > 1e12) {
      throw SingularSystem("fit_twist_irls: normal matrix condition " +
                           std::to_string(lo > 0 ? hi / lo : -1.0));
    }
    xi = a.ldlt().solve(b);
  }

  // Final weights reported densely at every usable pixel.
  IrlsResult result;
  result.twist = Twist::from_vector(xi);
  result.weights = ScalarGrid(w, h, 0.0);
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      if (!flow.valid.at(x, y)) continue;
      const double z = depth.values.at(x, y);
      if (z <= 0.0) continue;
      if (!exclude.empty() && exclude.at(x, y)) continue;
      const Mat26 j = image_jacobian(x - intr.cx, y - intr.cy, z, intr,
                                     cfg.jacobian_variant);
      const double r =
          (Vec2(flow.u_component.at(x, y), flow.v_component.at(x, y)) - j * xi)
              .norm();
      result.weights.at(x, y) = 1.0 / (1.0 + r * r / c2);
    }
  }
  return result;
}

// r(u,v) = ||F - F_hat||_2 where both fields are valid; negative = invalid.
constexpr double kInvalidResidual = -1.0;

inline ScalarGrid residual_map(const FlowField& flow, const FlowField& rigid) {
  if (flow.width() != rigid.width() || flow.height() != rigid.height()) {
    throw DimensionMismatch("residual_map: field shapes differ");
  }
  ScalarGrid r(flow.width(), flow.height(), kInvalidResidual);
  for (int y = 0; y < flow.height(); ++y) {
    for (int x = 0; x < flow.width(); ++x) {
      if (!flow.valid.at(x, y) || !rigid.valid.at(x, y)) continue;
      const double du = flow.u_component.at(x, y) - rigid.u_component.at(x, y);
      const double dv = flow.v_component.at(x, y) - rigid.v_component.at(x, y);
      r.at(x, y) = std::hypot(du, dv);
    }
  }
  return r;
}

inline double exact_median(std::vector<double> values) {
  if (values.empty()) throw EmptyInput("median of empty set");
  const size_t mid = values.size() / 2;
  std::nth_element(values.begin(), values.begin() + mid, values.end());
  double m = values[mid];
  if (values.size() % 2 == 0) {
    std::nth_element(values.begin(), values.begin() + mid - 1,
                     values.begin() + mid);
    m = 0.5 * (m + values[mid - 1]);
  }
  return m;
}

// Mask = 1 where r > median(r) + k * MAD(r), computed over valid residuals.
// `stat_exclude` pixels are kept out of the statistics but may still be masked.
inline MaskGrid mad_mask(const ScalarGrid& residuals, double k,
                         const MaskGrid& stat_exclude = {},
                         double threshold_floor = 0.0) {
  std::vector<double> valid;
  valid.reserve(residuals.size());
  for (int y = 0; y < residuals.height(); ++y) {
    for (int x = 0; x < residuals.width(); ++x) {
      if (residuals.at(x, y) < 0.0) continue;
      if (!stat_exclude.empty() && stat_exclude.at(x, y)) continue;
      valid.push_back(residuals.at(x, y));
    }
  }
  if (valid.empty()) {
    // Statistics fall back to all valid residuals if exclusion ate everything.
    for (size_t i = 0; i < residuals.size(); ++i) {
      if (residuals[i] >= 0.0) valid.push_back(residuals[i]);
    }
  }
  const double med = exact_median(valid);
  std::vector<double> deviations;
  deviations.reserve(valid.size());
  for (double r : valid) deviations.push_back(std::abs(r - med));
  const double mad = exact_median(std::move(deviations));
  const double threshold = std::max(med + k * mad, threshold_floor);

  MaskGrid mask(residuals.width(), residuals.height(), 0);
  for (int y = 0; y < residuals.height(); ++y) {
    for (int x = 0; x < residuals.width(); ++x) {
      if (residuals.at(x, y) > threshold && residuals.at(x, y) >= 0.0) {
        mask.at(x, y) = 1;
      }
    }
  }
  return mask;
}

struct DecompositionResult {
  Twist twist_refined;
  Pose pose_init;
  MaskGrid mask_ca;
  MaskGrid mask_dynamic;
  ScalarGrid residuals;
  double inlier_ratio = 0.0;
  bool clamped = false;
  bool degraded = false;
};

// End-to-end camera-induced motion decomposition: robust first fit excluding
// the semantic mask, residual thresholding into the category-agnostic mask,
// refit on non-dynamic pixels, clamp, and pose initialization.
inline DecompositionResult decompose(const FlowField& flow,
                                     const DepthMap& depth,
                                     const MaskGrid& mask_semantic,
                                     const Pose& prev_pose,
                                     const Intrinsics& intr,
                                     const RobustFitConfig& cfg) {
  const int w = flow.width(), h = flow.height();
  DecompositionResult out;
  out.mask_ca = MaskGrid(w, h, 0);
  out.mask_dynamic = mask_semantic.empty() ? MaskGrid(w, h, 0) : mask_semantic;
  out.residuals = ScalarGrid(w, h, kInvalidResidual);

  try {
    const IrlsResult first = fit_twist_irls(flow, depth, mask_semantic, intr, cfg);
    const FlowField rigid =
        predict_rigid_flow(first.twist, depth, intr, cfg.jacobian_variant);
    out.residuals = residual_map(flow, rigid);
    out.mask_ca =
        mad_mask(out.residuals, cfg.mad_k, mask_semantic, cfg.residual_floor);

    out.mask_dynamic = MaskGrid(w, h, 0);
    for (size_t i = 0; i < out.mask_dynamic.size(); ++i) {
      const uint8_t sem = mask_semantic.empty() ? 0 : mask_semantic[i];
      out.mask_dynamic[i] = (sem || out.mask_ca[i]) ? 1 : 0;
    }

    const IrlsResult refined =
        fit_twist_irls(flow, depth, out.mask_dynamic, intr, cfg);
    out.twist_refined = refined.twist;

    size_t used = 0, inliers = 0;
    for (size_t i = 0; i < refined.weights.size(); ++i) {
      if (refined.weights[i] > 0.0) {
        ++used;
        if (refined.weights[i] > 0.5) ++inliers;
      }
    }
    out.inlier_ratio = used ? static_cast<double>(inliers) / used : 0.0;

    const double gain =
        std::min(1.0, cfg.clamp_inlier_gain * out.inlier_ratio);
    const double bound_t = cfg.max_translation * gain;
    const double bound_r = cfg.max_rotation * gain;
    const double nt = out.twist_refined.rho.norm();
    const double nr = out.twist_refined.theta.norm();
    if (nt > bound_t || nr > bound_r) {
      double scale = 1.0;
      if (nt > bound_t) scale = std::min(scale, bound_t / nt);
      if (nr > bound_r) scale = std::min(scale, bound_r / nr);
      out.twist_refined.rho *= scale;
      out.twist_refined.theta *= scale;
      out.clamped = true;
    }
  } catch (const InsufficientData&) {
    out.twist_refined = Twist{};
    out.clamped = true;
    out.degraded = true;
  } catch (const SingularSystem&) {
    out.twist_refined = Twist{};
    out.clamped = true;
    out.degraded = true;
  }

  Twist applied = out.twist_refined;
  applied.rho *= cfg.twist_direction;
  applied.theta *= cfg.twist_direction;
  out.pose_init = compose_pose(prev_pose, applied);
  return out;
}

}  // namespace flowsplat
