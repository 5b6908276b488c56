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

// Exactly invertible latent codec: space-to-depth patchification of an
// RGB image into an (h, w, 3*f*f) token grid, plus nearest-neighbor mask
// downsampling to the same grid. decode(encode(x)) is bitwise identity,
// so foreground-preservation measurements carry no reconstruction error.

#ifndef BACKDROP_CODEC_HPP
#define BACKDROP_CODEC_HPP

#include <vector>

#include "backdrop/image.hpp"
#include "backdrop/tensor.hpp"

namespace backdrop {

// (h, w, channels) float grid over latent cells.
struct LatentGrid {
  int h = 0;
  int w = 0;
  int channels = 0;
  std::vector<float> values;  // row-major (i, j, c)

  LatentGrid() = default;
  LatentGrid(int h_, int w_, int c_, float fill = 0.0f)
      : h(h_), w(w_), channels(c_), values(static_cast<size_t>(h_) * w_ * c_, fill) {}

  float& at(int i, int j, int c) { return values[(static_cast<size_t>(i) * w + j) * channels + c]; }
  float at(int i, int j, int c) const { return values[(static_cast<size_t>(i) * w + j) * channels + c]; }

  // view as a [h*w, channels] token matrix
  Tensor tokens() const { return Tensor::from({h * w, channels}, values); }
};

// Cell-resolution mask aligned with a LatentGrid.
struct MaskGrid {
  int h = 0;
  int w = 0;
  std::vector<float> values;  // in [0,1]; {0,1} under nearest downsampling

  MaskGrid() = default;
  MaskGrid(int h_, int w_, float fill = 0.0f)
      : h(h_), w(w_), values(static_cast<size_t>(h_) * w_, fill) {}

  float& at(int i, int j) { return values[static_cast<size_t>(i) * w + j]; }
  float at(int i, int j) const { return values[static_cast<size_t>(i) * w + j]; }

  Tensor tokens() const { return Tensor::from({h * w, 1}, values); }
};

// Space-to-depth with patch factor f. Latent channel (dy*f + dx)*3 + c
// holds image pixel (i*f + dy, j*f + dx, c) of cell (i, j).
inline LatentGrid encode(const ImageRaster& image, int f) {
  if (f <= 0) fail("encode: patch factor must be positive");
  if (image.height % f != 0 || image.width % f != 0)
    fail("encode: image " + std::to_string(image.height) + "x" + std::to_string(image.width) +
         " not divisible by patch factor " + std::to_string(f));
  LatentGrid grid(image.height / f, image.width / f, 3 * f * f);
  for (int i = 0; i < grid.h; ++i) {
    for (int j = 0; j < grid.w; ++j) {
      for (int dy = 0; dy < f; ++dy) {
        for (int dx = 0; dx < f; ++dx) {
          for (int c = 0; c < 3; ++c) {
            grid.at(i, j, (dy * f + dx) * 3 + c) = image.at(i * f + dy, j * f + dx, c);
          }
        }
      }
    }
  }
  return grid;
}

inline ImageRaster decode(const LatentGrid& grid) {
  int ff = grid.channels / 3;
  int f = 1;
  while (f * f < ff) ++f;
  if (grid.channels != 3 * f * f)
    fail("decode: channel count " + std::to_string(grid.channels) + " is not 3*f*f for any integer f");
  ImageRaster image(grid.h * f, grid.w * f);
  for (int i = 0; i < grid.h; ++i) {
    for (int j = 0; j < grid.w; ++j) {
      for (int dy = 0; dy < f; ++dy) {
        for (int dx = 0; dx < f; ++dx) {
          for (int c = 0; c < 3; ++c) {
            image.at(i * f + dy, j * f + dx, c) = grid.at(i, j, (dy * f + dx) * 3 + c);
          }
        }
      }
    }
  }
  return image;
}

// Latent grid from a [h*w, channels] token matrix.
inline LatentGrid grid_from_tokens(const std::vector<float>& tokens, int h, int w, int channels) {
  if (tokens.size() != static_cast<size_t>(h) * w * channels)
    fail("grid_from_tokens: token count does not match grid extents");
  LatentGrid grid(h, w, channels);
  grid.values = tokens;
  return grid;
}

// Nearest-neighbor (top-left sample) downsampling of a binary mask to
// cell resolution; output stays in {0,1}.
inline MaskGrid downsample_mask(const MaskImage& mask, int f) {
  if (f <= 0) fail("downsample_mask: patch factor must be positive");
  if (mask.height % f != 0 || mask.width % f != 0)
    fail("downsample_mask: mask " + std::to_string(mask.height) + "x" + std::to_string(mask.width) +
         " not divisible by patch factor " + std::to_string(f));
  for (uint8_t v : mask.values)
    if (v != 0 && v != 1) fail("downsample_mask: mask is not binary");
  MaskGrid grid(mask.height / f, mask.width / f);
  for (int i = 0; i < grid.h; ++i)
    for (int j = 0; j < grid.w; ++j) grid.at(i, j) = static_cast<float>(mask.at(i * f, j * f));
  return grid;
}

}  // namespace backdrop

#endif  // BACKDROP_CODEC_HPP
