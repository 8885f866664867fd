#pragma once

// Binary container for a GaussianField, little-endian throughout:
//   [magic "F4DG"] [version u32 = 1]
//   [n_static u32] [n_dynamic u32] [n_keyframes u32]
//   [time_min f64] [time_max f64] [keyframe times f64 * n_keyframes]
//   static block: per Gaussian 14 f32
//     center(3) log_scale(3) quaternion(4 wxyz) opacity_logit(1) color(3)
//   dynamic block: per Gaussian
//     [birth_keyframe u32] [n_centers u32] [n_gmm u32]
//     centers f32 * 3 * n_centers
//     log_scale(3) opacity_logit(1) color(3) amplitude_log(1)  (f32)
//     per component: weight_logit mean log_tau quaternion(4)   (f32 * 7)

#include <cstring>
#include <fstream>

#include "flowsplat/gaussians.hpp"

namespace flowsplat {

namespace detail {

template <typename T>
void put(std::ostream& os, T value) {
  os.write(reinterpret_cast<const char*>(&value), sizeof(T));
}

template <typename T>
T get(std::istream& is) {
  T value;
  is.read(reinterpret_cast<char*>(&value), sizeof(T));
  if (!is) throw TruncatedFile("field file truncated");
  return value;
}

inline void put_vec3f(std::ostream& os, const Vec3& v) {
  for (int i = 0; i < 3; ++i) put<float>(os, static_cast<float>(v[i]));
}
inline Vec3 get_vec3f(std::istream& is) {
  Vec3 v;
  for (int i = 0; i < 3; ++i) v[i] = get<float>(is);
  return v;
}
inline void put_vec4f(std::ostream& os, const Vec4& v) {
  for (int i = 0; i < 4; ++i) put<float>(os, static_cast<float>(v[i]));
}
inline Vec4 get_vec4f(std::istream& is) {
  Vec4 v;
  for (int i = 0; i < 4; ++i) v[i] = get<float>(is);
  return v;
}

}  // namespace detail

inline void write_field(std::ostream& os, const GaussianField& field) {
  using detail::put;
  os.write("F4DG", 4);
  put<uint32_t>(os, 1);
  put<uint32_t>(os, static_cast<uint32_t>(field.static_set.size()));
  put<uint32_t>(os, static_cast<uint32_t>(field.dynamic_set.size()));
  put<uint32_t>(os, static_cast<uint32_t>(field.keyframe_times.size()));
  put<double>(os, field.time_min);
  put<double>(os, field.time_max);
  for (double t : field.keyframe_times) put<double>(os, t);

  for (const StaticGaussian& g : field.static_set) {
    detail::put_vec3f(os, g.center);
    detail::put_vec3f(os, g.log_scale);
    detail::put_vec4f(os, g.rotation);
    put<float>(os, static_cast<float>(g.opacity_logit));
    detail::put_vec3f(os, g.color);
  }
  for (const DynamicGaussian& g : field.dynamic_set) {
    put<uint32_t>(os, static_cast<uint32_t>(g.birth_keyframe));
    put<uint32_t>(os, static_cast<uint32_t>(g.keyframe_centers.size()));
    put<uint32_t>(os, static_cast<uint32_t>(g.gmm.size()));
    for (const Vec3& c : g.keyframe_centers) detail::put_vec3f(os, c);
    detail::put_vec3f(os, g.log_scale);
    put<float>(os, static_cast<float>(g.opacity_logit));
    detail::put_vec3f(os, g.color);
    put<float>(os, static_cast<float>(g.amplitude_log));
    for (const GmmComponent& c : g.gmm) {
      put<float>(os, static_cast<float>(c.weight_logit));
      put<float>(os, static_cast<float>(c.mean));
      put<float>(os, static_cast<float>(c.log_tau));
      detail::put_vec4f(os, c.quaternion);
    }
  }
}

inline GaussianField read_field(std::istream& is) {
  using detail::get;
  char magic[4];
  is.read(magic, 4);
  if (!is || std::memcmp(magic, "F4DG", 4) != 0) {
    throw BadMagic("not a F4DG field file");
  }
  const uint32_t version = get<uint32_t>(is);
  if (version != 1) throw BadHeader("unsupported field version");
  const uint32_t n_static = get<uint32_t>(is);
  const uint32_t n_dynamic = get<uint32_t>(is);
  const uint32_t n_keyframes = get<uint32_t>(is);

  GaussianField field;
  field.time_min = get<double>(is);
  field.time_max = get<double>(is);
  field.keyframe_times.resize(n_keyframes);
  for (uint32_t i = 0; i < n_keyframes; ++i) {
    field.keyframe_times[i] = get<double>(is);
  }
  field.static_set.resize(n_static);
  for (StaticGaussian& g : field.static_set) {
    g.center = detail::get_vec3f(is);
    g.log_scale = detail::get_vec3f(is);
    g.rotation = detail::get_vec4f(is);
    g.opacity_logit = get<float>(is);
    g.color = detail::get_vec3f(is);
  }
  field.dynamic_set.resize(n_dynamic);
  for (DynamicGaussian& g : field.dynamic_set) {
    g.birth_keyframe = static_cast<int>(get<uint32_t>(is));
    const uint32_t n_centers = get<uint32_t>(is);
    const uint32_t n_gmm = get<uint32_t>(is);
    g.keyframe_centers.resize(n_centers);
    for (uint32_t i = 0; i < n_centers; ++i) {
      g.keyframe_centers[i] = detail::get_vec3f(is);
    }
    g.log_scale = detail::get_vec3f(is);
    g.opacity_logit = get<float>(is);
    g.color = detail::get_vec3f(is);
    g.amplitude_log = get<float>(is);
    g.gmm.resize(n_gmm);
    for (GmmComponent& c : g.gmm) {
      c.weight_logit = get<float>(is);
      c.mean = get<float>(is);
      c.log_tau = get<float>(is);
      c.quaternion = detail::get_vec4f(is);
    }
  }
  return field;
}

inline void write_field_file(const std::string& path,
                             const GaussianField& field) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw IoFailure("cannot open " + path + " for writing");
  write_field(os, field);
  if (!os) throw IoFailure("write failed: " + path);
}

inline GaussianField read_field_file(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoFailure("cannot open " + path);
  return read_field(is);
}

}  // namespace flowsplat
