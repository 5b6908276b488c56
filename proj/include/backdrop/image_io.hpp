/*
 * Copyright 2026 the backdrop authors
 *
 * Licensed under the Apache License, Version 2.0 (the "License");
 * you may not use this file except in compliance with the License.
 * You may obtain a copy of the License at
 *
 *    http://www.apache.org/licenses/LICENSE-2.0
 *
 * Unless required by applicable law or agreed to in writing, software
 * distributed under the License is distributed on an "AS IS" BASIS,
 * WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
 * See the License for the specific language governing permissions and
 * limitations under the License.
 */

// Lossless 8-bit PNG input/output via libpng. Float values are quantized
// as round(255 * x); masks are stored as 8-bit grayscale 0/255.

#ifndef BACKDROP_IMAGE_IO_HPP
#define BACKDROP_IMAGE_IO_HPP

#include <png.h>

#include <cstdio>
#include <memory>
#include <string>
#include <vector>

#include "backdrop/image.hpp"

namespace backdrop {

namespace detail {

struct FileCloser {
  void operator()(std::FILE* f) const {
    if (f) std::fclose(f);
  }
};
using FilePtr = std::unique_ptr<std::FILE, FileCloser>;

inline void write_png_bytes(const std::string& path, int height, int width, int channels,
                            const std::vector<uint8_t>& bytes) {
  FilePtr fp(std::fopen(path.c_str(), "wb"));
  if (!fp) fail("cannot open for writing: " + path);
  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  if (!png) fail("png_create_write_struct failed");
  png_infop info = png_create_info_struct(png);
  if (!info) {
    png_destroy_write_struct(&png, nullptr);
    fail("png_create_info_struct failed");
  }
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_write_struct(&png, &info);
    fail("png write error: " + path);
  }
  png_init_io(png, fp.get());
  png_set_IHDR(png, info, static_cast<png_uint_32>(width), static_cast<png_uint_32>(height), 8,
               channels == 3 ? PNG_COLOR_TYPE_RGB : PNG_COLOR_TYPE_GRAY, PNG_INTERLACE_NONE,
               PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
  png_write_info(png, info);
  std::vector<png_bytep> rows(static_cast<size_t>(height));
  for (int y = 0; y < height; ++y)
    rows[static_cast<size_t>(y)] = const_cast<png_bytep>(bytes.data() + static_cast<size_t>(y) * width * channels);
  png_write_image(png, rows.data());
  png_write_end(png, nullptr);
  png_destroy_write_struct(&png, &info);
}

inline std::vector<uint8_t> read_png_bytes(const std::string& path, int& height, int& width, int& channels) {
  FilePtr fp(std::fopen(path.c_str(), "rb"));
  if (!fp) fail("cannot open for reading: " + path);
  png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  if (!png) fail("png_create_read_struct failed");
  png_infop info = png_create_info_struct(png);
  if (!info) {
    png_destroy_read_struct(&png, nullptr, nullptr);
    fail("png_create_info_struct failed");
  }
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_read_struct(&png, &info, nullptr);
    fail("png read error: " + path);
  }
  png_init_io(png, fp.get());
  png_read_info(png, info);
  png_set_expand(png);
  png_set_strip_16(png);
  png_set_strip_alpha(png);
  png_read_update_info(png, info);
  height = static_cast<int>(png_get_image_height(png, info));
  width = static_cast<int>(png_get_image_width(png, info));
  channels = static_cast<int>(png_get_channels(png, info));
  if (channels != 1 && channels != 3) {
    png_destroy_read_struct(&png, &info, nullptr);
    fail("unsupported channel count in " + path);
  }
  std::vector<uint8_t> bytes(static_cast<size_t>(height) * width * channels);
  std::vector<png_bytep> rows(static_cast<size_t>(height));
  for (int y = 0; y < height; ++y)
    rows[static_cast<size_t>(y)] = bytes.data() + static_cast<size_t>(y) * width * channels;
  png_read_image(png, rows.data());
  png_read_end(png, nullptr);
  png_destroy_read_struct(&png, &info, nullptr);
  return bytes;
}

}  // namespace detail

inline void write_png(const std::string& path, const ImageRaster& img) {
  std::vector<uint8_t> bytes(img.values.size());
  for (size_t i = 0; i < img.values.size(); ++i) {
    float v = std::min(1.0f, std::max(0.0f, img.values[i]));
    bytes[i] = static_cast<uint8_t>(std::lround(255.0f * v));
  }
  detail::write_png_bytes(path, img.height, img.width, 3, bytes);
}

inline void write_png(const std::string& path, const MaskImage& mask) {
  std::vector<uint8_t> bytes(mask.values.size());
  for (size_t i = 0; i < mask.values.size(); ++i) bytes[i] = mask.values[i] ? 255 : 0;
  detail::write_png_bytes(path, mask.height, mask.width, 1, bytes);
}

inline ImageRaster read_png_image(const std::string& path) {
  int h = 0, w = 0, c = 0;
  std::vector<uint8_t> bytes = detail::read_png_bytes(path, h, w, c);
  ImageRaster img(h, w);
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      for (int ch = 0; ch < 3; ++ch) {
        uint8_t b = c == 3 ? bytes[(static_cast<size_t>(y) * w + x) * 3 + ch] : bytes[static_cast<size_t>(y) * w + x];
        img.at(y, x, ch) = static_cast<float>(b) / 255.0f;
      }
    }
  }
  return img;
}

inline MaskImage read_png_mask(const std::string& path) {
  int h = 0, w = 0, c = 0;
  std::vector<uint8_t> bytes = detail::read_png_bytes(path, h, w, c);
  MaskImage mask(h, w);
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      uint8_t b = bytes[(static_cast<size_t>(y) * w + x) * c];
      if (b != 0 && b != 255) fail("mask is not binary: " + path);
      mask.at(y, x) = b ? 1 : 0;
    }
  }
  return mask;
}

}  // namespace backdrop

#endif  // BACKDROP_IMAGE_IO_HPP
