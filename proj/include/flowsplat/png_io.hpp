#pragma once

// PNG codecs backed by libpng: 8-bit RGB color and 16-bit grayscale depth
// (TUM convention: value / depth_scale meters, default scale 5000).

#include <png.h>

#include <cstdio>
#include <memory>
#include <vector>

#include "flowsplat/core.hpp"

namespace flowsplat {

namespace detail {

struct FileCloser {
  void operator()(std::FILE* f) const {
    if (f) std::fclose(f);
  }
};
using FilePtr = std::unique_ptr<std::FILE, FileCloser>;

}  // namespace detail

inline void write_color_png(const std::string& path, const ColorImage& image) {
  detail::FilePtr fp(std::fopen(path.c_str(), "wb"));
  if (!fp) throw IoFailure("cannot open " + path + " for writing");
  png_structp png =
      png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png_create_info_struct(png);
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_write_struct(&png, &info);
    throw IoFailure("libpng write error: " + path);
  }
  png_init_io(png, fp.get());
  png_set_IHDR(png, info, image.width(), image.height(), 8,
               PNG_COLOR_TYPE_RGB, PNG_INTERLACE_NONE,
               PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
  png_write_info(png, info);
  std::vector<png_byte> row(static_cast<size_t>(image.width()) * 3);
  for (int y = 0; y < image.height(); ++y) {
    for (int x = 0; x < image.width(); ++x) {
      const Vec3 c = image.pixel(x, y);
      for (int ch = 0; ch < 3; ++ch) {
        row[3 * x + ch] = static_cast<png_byte>(
            std::lround(std::clamp(c[ch], 0.0, 1.0) * 255.0));
      }
    }
    png_write_row(png, row.data());
  }
  png_write_end(png, nullptr);
  png_destroy_write_struct(&png, &info);
}

inline ColorImage read_color_png(const std::string& path) {
  detail::FilePtr fp(std::fopen(path.c_str(), "rb"));
  if (!fp) throw IoFailure("cannot open " + path);
  png_structp png =
      png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png_create_info_struct(png);
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw IoFailure("libpng read error: " + path);
  }
  png_init_io(png, fp.get());
  png_read_info(png, info);
  png_set_expand(png);
  png_set_strip_16(png);
  png_set_strip_alpha(png);
  png_set_gray_to_rgb(png);
  png_read_update_info(png, info);
  const int w = png_get_image_width(png, info);
  const int h = png_get_image_height(png, info);
  ColorImage image(w, h);
  std::vector<png_byte> row(static_cast<size_t>(w) * 3);
  for (int y = 0; y < h; ++y) {
    png_read_row(png, row.data(), nullptr);
    for (int x = 0; x < w; ++x) {
      image.set_pixel(x, y,
                      Vec3(row[3 * x] / 255.0, row[3 * x + 1] / 255.0,
                           row[3 * x + 2] / 255.0));
    }
  }
  png_destroy_read_struct(&png, &info, nullptr);
  return image;
}

inline void write_depth_png(const std::string& path, const DepthMap& depth,
                            double depth_scale = 5000.0) {
  detail::FilePtr fp(std::fopen(path.c_str(), "wb"));
  if (!fp) throw IoFailure("cannot open " + path + " for writing");
  png_structp png =
      png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png_create_info_struct(png);
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_write_struct(&png, &info);
    throw IoFailure("libpng write error: " + path);
  }
  png_init_io(png, fp.get());
  png_set_IHDR(png, info, depth.width(), depth.height(), 16,
               PNG_COLOR_TYPE_GRAY, PNG_INTERLACE_NONE,
               PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
  png_write_info(png, info);
  std::vector<png_byte> row(static_cast<size_t>(depth.width()) * 2);
  for (int y = 0; y < depth.height(); ++y) {
    for (int x = 0; x < depth.width(); ++x) {
      const double meters = depth.values.at(x, y);
      const long raw =
          std::lround(std::clamp(meters * depth_scale, 0.0, 65535.0));
      row[2 * x] = static_cast<png_byte>((raw >> 8) & 0xff);  // big-endian
      row[2 * x + 1] = static_cast<png_byte>(raw & 0xff);
    }
    png_write_row(png, row.data());
  }
  png_write_end(png, nullptr);
  png_destroy_write_struct(&png, &info);
}

inline DepthMap read_depth_png(const std::string& path,
                               double depth_scale = 5000.0) {
  detail::FilePtr fp(std::fopen(path.c_str(), "rb"));
  if (!fp) throw IoFailure("cannot open " + path);
  png_structp png =
      png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png_create_info_struct(png);
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw IoFailure("libpng read error: " + path);
  }
  png_init_io(png, fp.get());
  png_read_info(png, info);
  const int bit_depth = png_get_bit_depth(png, info);
  const int color_type = png_get_color_type(png, info);
  if (color_type != PNG_COLOR_TYPE_GRAY) {
    png_set_rgb_to_gray(png, 1, -1, -1);
  }
  if (bit_depth < 16) png_set_expand_16(png);
  png_read_update_info(png, info);
  const int w = png_get_image_width(png, info);
  const int h = png_get_image_height(png, info);
  DepthMap depth(w, h);
  std::vector<png_byte> row(static_cast<size_t>(w) * 2);
  for (int y = 0; y < h; ++y) {
    png_read_row(png, row.data(), nullptr);
    for (int x = 0; x < w; ++x) {
      const unsigned raw = (unsigned(row[2 * x]) << 8) | row[2 * x + 1];
      depth.values.at(x, y) = raw / depth_scale;
    }
  }
  png_destroy_read_struct(&png, &info, nullptr);
  return depth;
}

}  // namespace flowsplat
