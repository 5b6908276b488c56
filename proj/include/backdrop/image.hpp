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

#ifndef BACKDROP_IMAGE_HPP
#define BACKDROP_IMAGE_HPP

#include <cmath>
#include <cstdint>
#include <vector>

#include "backdrop/tensor.hpp"

namespace backdrop {

// RGB image, row-major (y, x, channel), values in [0,1].
struct ImageRaster {
  int height = 0;
  int width = 0;
  std::vector<float> values;  // height * width * 3

  ImageRaster() = default;
  ImageRaster(int h, int w, float fill = 0.0f)
      : height(h), width(w), values(static_cast<size_t>(h) * w * 3, fill) {}

  float& at(int y, int x, int c) { return values[(static_cast<size_t>(y) * width + x) * 3 + c]; }
  float at(int y, int x, int c) const { return values[(static_cast<size_t>(y) * width + x) * 3 + c]; }

  void set_pixel(int y, int x, float r, float g, float b) {
    at(y, x, 0) = r;
    at(y, x, 1) = g;
    at(y, x, 2) = b;
  }
};

// Full-resolution binary mask (1 = product).
struct MaskImage {
  int height = 0;
  int width = 0;
  std::vector<uint8_t> values;  // 0 or 1

  MaskImage() = default;
  MaskImage(int h, int w, uint8_t fill = 0)
      : height(h), width(w), values(static_cast<size_t>(h) * w, fill) {}

  uint8_t& at(int y, int x) { return values[static_cast<size_t>(y) * width + x]; }
  uint8_t at(int y, int x) const { return values[static_cast<size_t>(y) * width + x]; }

  int64_t area() const {
    int64_t n = 0;
    for (uint8_t v : values) n += v;
    return n;
  }
};

inline bool images_equal(const ImageRaster& a, const ImageRaster& b) {
  return a.height == b.height && a.width == b.width && a.values == b.values;
}

// PSNR in dB over the pixels selected by `region`, against a [0,1] range.
inline double psnr_over_mask(const ImageRaster& img, const ImageRaster& ref, const MaskImage& region) {
  if (img.height != ref.height || img.width != ref.width)
    fail("psnr_over_mask: image extents differ");
  double se = 0.0;
  int64_t n = 0;
  for (int y = 0; y < img.height; ++y) {
    for (int x = 0; x < img.width; ++x) {
      if (!region.at(y, x)) continue;
      for (int c = 0; c < 3; ++c) {
        double d = img.at(y, x, c) - ref.at(y, x, c);
        se += d * d;
      }
      n += 3;
    }
  }
  if (n == 0) fail("psnr_over_mask: empty region");
  double mse_v = se / static_cast<double>(n);
  if (mse_v == 0.0) return 99.0;  // identical content; report a ceiling
  return 10.0 * std::log10(1.0 / mse_v);
}

inline ImageRaster clamp01(ImageRaster img) {
  for (float& v : img.values) v = std::min(1.0f, std::max(0.0f, v));
  return img;
}

}  // namespace backdrop

#endif  // BACKDROP_IMAGE_HPP
