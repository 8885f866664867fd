#pragma once

#include <Eigen/Dense>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

namespace flowsplat {

using Vec2 = Eigen::Vector2d;
using Vec3 = Eigen::Vector3d;
using Vec4 = Eigen::Vector4d;
using Vec6 = Eigen::Matrix<double, 6, 1>;
using Mat2 = Eigen::Matrix2d;
using Mat3 = Eigen::Matrix3d;
using Mat26 = Eigen::Matrix<double, 2, 6>;
using Mat23 = Eigen::Matrix<double, 2, 3>;
using Mat6 = Eigen::Matrix<double, 6, 6>;

// ---------------------------------------------------------------------------
// Errors

struct Error : std::runtime_error {
  explicit Error(const std::string& msg) : std::runtime_error(msg) {}
};

struct BehindCamera : Error { using Error::Error; };
struct InvalidDepth : Error { using Error::Error; };
struct InsufficientData : Error { using Error::Error; };
struct SingularSystem : Error { using Error::Error; };
struct DimensionMismatch : Error { using Error::Error; };
struct EmptyInput : Error { using Error::Error; };
struct BadMagic : Error { using Error::Error; };
struct TruncatedFile : Error { using Error::Error; };
struct BadHeader : Error { using Error::Error; };
struct MissingIndexFile : Error { using Error::Error; };
struct NoAssociations : Error { using Error::Error; };
struct LengthMismatch : Error { using Error::Error; };
struct NonContiguousKeyframe : Error { using Error::Error; };
struct DegenerateScene : Error { using Error::Error; };
struct EmptyValidSet : Error { using Error::Error; };
struct IoFailure : Error { using Error::Error; };

// ---------------------------------------------------------------------------
// Dense per-pixel grid, row-major, indexed as (u, v) = (column, row).

template <typename T>
class Grid {
 public:
  Grid() = default;
  Grid(int width, int height, T fill = T{})
      : width_(width), height_(height),
        data_(static_cast<size_t>(width) * height, fill) {}

  int width() const { return width_; }
  int height() const { return height_; }
  size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  T& at(int u, int v) { return data_[static_cast<size_t>(v) * width_ + u]; }
  const T& at(int u, int v) const {
    return data_[static_cast<size_t>(v) * width_ + u];
  }
  T& operator[](size_t i) { return data_[i]; }
  const T& operator[](size_t i) const { return data_[i]; }

  bool contains(int u, int v) const {
    return u >= 0 && u < width_ && v >= 0 && v < height_;
  }
  bool same_shape(int w, int h) const { return width_ == w && height_ == h; }

  template <typename U>
  bool same_shape(const Grid<U>& other) const {
    return width_ == other.width() && height_ == other.height();
  }

  void fill(T value) { std::fill(data_.begin(), data_.end(), value); }

  std::vector<T>& data() { return data_; }
  const std::vector<T>& data() const { return data_; }

  bool operator==(const Grid& other) const {
    return width_ == other.width_ && height_ == other.height_ &&
           data_ == other.data_;
  }

 private:
  int width_ = 0;
  int height_ = 0;
  std::vector<T> data_;
};

using MaskGrid = Grid<uint8_t>;
using ScalarGrid = Grid<double>;

// ---------------------------------------------------------------------------
// Optical flow field: per-pixel (u, v) displacement with validity flags.

struct FlowField {
  ScalarGrid u_component;
  ScalarGrid v_component;
  MaskGrid valid;

  FlowField() = default;
  FlowField(int width, int height, bool all_valid = true)
      : u_component(width, height, 0.0),
        v_component(width, height, 0.0),
        valid(width, height, all_valid ? uint8_t{1} : uint8_t{0}) {}

  int width() const { return u_component.width(); }
  int height() const { return u_component.height(); }
};

// Depth in meters; 0 marks an invalid measurement.
struct DepthMap {
  ScalarGrid values;

  DepthMap() = default;
  DepthMap(int width, int height, double fill = 0.0)
      : values(width, height, fill) {}

  int width() const { return values.width(); }
  int height() const { return values.height(); }
  bool is_valid(int u, int v) const { return values.at(u, v) > 0.0; }
};

// RGB image with channels in [0, 1].
struct ColorImage {
  ScalarGrid r, g, b;

  ColorImage() = default;
  ColorImage(int width, int height, double fill = 0.0)
      : r(width, height, fill), g(width, height, fill), b(width, height, fill) {}

  int width() const { return r.width(); }
  int height() const { return r.height(); }

  Vec3 pixel(int u, int v) const {
    return Vec3(r.at(u, v), g.at(u, v), b.at(u, v));
  }
  void set_pixel(int u, int v, const Vec3& c) {
    r.at(u, v) = c.x();
    g.at(u, v) = c.y();
    b.at(u, v) = c.z();
  }
};

// ---------------------------------------------------------------------------
// Pinhole intrinsics.

struct Intrinsics {
  double fx = 0, fy = 0, cx = 0, cy = 0;
  int width = 0, height = 0;

  Mat3 matrix() const {
    Mat3 k;
    k << fx, 0, cx, 0, fy, cy, 0, 0, 1;
    return k;
  }

  bool valid() const {
    return fx > 0 && fy > 0 && cx >= 0 && cx < width && cy >= 0 && cy < height;
  }
};

inline double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }
inline double softplus(double x) {
  return x > 30.0 ? x : std::log1p(std::exp(x));
}
// Inverse of softplus for y > 0.
inline double inv_softplus(double y) {
  return y > 30.0 ? y : std::log(std::expm1(y));
}
inline double logit(double p) { return std::log(p / (1.0 - p)); }

}  // namespace flowsplat
