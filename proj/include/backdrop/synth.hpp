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

// Procedural training/eval records: a colored product shape over a
// class-styled background, with an exact instance mask, a product-free
// reference background, and a soft drop shadow that appears in the
// target but never in the reference.
//
// Every rendered image is quantized to the 8-bit grid before leaving
// this module, so the PNG round trip is bitwise exact and a loaded
// record equals the freshly generated one.

#ifndef BACKDROP_SYNTH_HPP
#define BACKDROP_SYNTH_HPP

#include <nlohmann/json.hpp>

#include <array>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "backdrop/image.hpp"
#include "backdrop/image_io.hpp"
#include "backdrop/rng.hpp"

namespace backdrop {

constexpr int kNumPromptClasses = 8;

// Background style vocabulary. Each class has one rendering rule and one
// hue family; the prompt embedding is looked up by this id.
enum class PromptClass : int {
  kVerticalGradient = 0,
  kHorizontalGradient = 1,
  kStripes = 2,
  kChecker = 3,
  kSolidTeal = 4,
  kSolidBlue = 5,
  kRadialGradient = 6,
  kNoiseTexture = 7,
};

inline const char* prompt_class_name(int c) {
  static const char* names[kNumPromptClasses] = {
      "vertical_gradient", "horizontal_gradient", "stripes", "checker",
      "solid_teal",        "solid_blue",          "radial_gradient", "noise_texture"};
  if (c < 0 || c >= kNumPromptClasses) fail("prompt class id out of range: " + std::to_string(c));
  return names[c];
}

enum class ShapeKind : int { kDisc = 0, kSquare = 1, kTriangle = 2 };

inline const char* shape_name(ShapeKind s) {
  switch (s) {
    case ShapeKind::kDisc: return "disc";
    case ShapeKind::kSquare: return "square";
    case ShapeKind::kTriangle: return "triangle";
  }
  fail("unknown shape kind");
}

using Rgb = std::array<float, 3>;

// 8-bit-exact palette so product pixels survive the PNG round trip
// unchanged. All colors keep at least one near-zero channel, which keeps
// them far from the pastel backgrounds and the mid-gray.
inline const std::array<Rgb, 6>& product_palette() {
  static const std::array<Rgb, 6> palette = {{
      {217.0f / 255, 13.0f / 255, 26.0f / 255},    // crimson
      {13.0f / 255, 179.0f / 255, 26.0f / 255},    // green
      {26.0f / 255, 51.0f / 255, 230.0f / 255},    // blue
      {242.0f / 255, 204.0f / 255, 13.0f / 255},   // yellow
      {217.0f / 255, 26.0f / 255, 204.0f / 255},   // magenta
      {13.0f / 255, 204.0f / 255, 217.0f / 255},   // cyan
  }};
  return palette;
}

constexpr float kNeutralGray = 128.0f / 255.0f;

struct Sample {
  ImageRaster target;      // background + shadow + product
  ImageRaster foreground;  // product on neutral gray
  MaskImage mask;          // 1 exactly on product pixels
  ImageRaster reference;   // background only, no product, no shadow
  int prompt_class = 0;
  Rgb product_color{};
  ShapeKind shape = ShapeKind::kDisc;
  uint64_t seed = 0;
};

namespace detail {

inline Rgb hsv_to_rgb(float hue_deg, float s, float v) {
  float h = hue_deg / 60.0f;
  while (h < 0) h += 6.0f;
  while (h >= 6.0f) h -= 6.0f;
  int i = static_cast<int>(h);
  float f = h - static_cast<float>(i);
  float p = v * (1 - s), q = v * (1 - s * f), t = v * (1 - s * (1 - f));
  switch (i) {
    case 0: return {v, t, p};
    case 1: return {q, v, p};
    case 2: return {p, v, t};
    case 3: return {p, q, v};
    case 4: return {t, p, v};
    default: return {v, p, q};
  }
}

inline float lerp(float a, float b, float t) { return a + (b - a) * t; }

inline Rgb lerp_rgb(const Rgb& a, const Rgb& b, float t) {
  return {lerp(a[0], b[0], t), lerp(a[1], b[1], t), lerp(a[2], b[2], t)};
}

// Per-class hue family centers. Classes whose patterns look alike under
// coarse color statistics (the two periodic patterns; the flat fills)
// sit far apart on the wheel, so hue alone separates them.
inline float hue_family(int prompt_class) {
  static const float hues[kNumPromptClasses] = {0, 45, 90, 270, 135, 225, 180, 315};
  return hues[prompt_class];
}

struct BackgroundParams {
  Rgb light{};
  Rgb dark{};
  int cell = 4;        // stripes / checker period
  int phase_x = 0;
  int phase_y = 0;
  float center_x = 0;  // radial gradient center
  float center_y = 0;
  float noise_amp = 0.0f;
  uint64_t noise_seed = 0;
};

inline BackgroundParams draw_background_params(int prompt_class, int size, Rng& rng) {
  BackgroundParams p;
  float hue = hue_family(prompt_class) + static_cast<float>(rng.uniform(-8.0, 8.0));
  float sat = static_cast<float>(rng.uniform(0.32, 0.48));
  float val = static_cast<float>(rng.uniform(0.80, 0.90));
  p.light = hsv_to_rgb(hue, sat, val);
  p.dark = hsv_to_rgb(hue, std::min(1.0f, sat + 0.20f), val - 0.40f);
  p.cell = 4;  // period divides the image, so coverage stays balanced
  p.phase_x = rng.uniform_int(2 * p.cell);
  p.phase_y = rng.uniform_int(2 * p.cell);
  p.center_x = static_cast<float>(size) / 2 + static_cast<float>(rng.uniform(-4.0, 4.0));
  p.center_y = static_cast<float>(size) / 2 + static_cast<float>(rng.uniform(-4.0, 4.0));
  p.noise_amp = 0.12f;
  p.noise_seed = rng.next_u64();
  return p;
}

inline BackgroundParams canonical_background_params(int prompt_class, int size) {
  BackgroundParams p;
  float hue = hue_family(prompt_class);
  p.light = hsv_to_rgb(hue, 0.40f, 0.85f);
  p.dark = hsv_to_rgb(hue, 0.60f, 0.45f);
  p.cell = 4;
  p.phase_x = 0;
  p.phase_y = 0;
  p.center_x = static_cast<float>(size) / 2;
  p.center_y = static_cast<float>(size) / 2;
  p.noise_amp = 0.0f;  // the canonical texture is its mean color
  p.noise_seed = 0;
  return p;
}

inline ImageRaster render_background(int prompt_class, const BackgroundParams& p, int size) {
  ImageRaster img(size, size);
  Rng noise(p.noise_seed);
  for (int y = 0; y < size; ++y) {
    for (int x = 0; x < size; ++x) {
      Rgb c{};
      switch (static_cast<PromptClass>(prompt_class)) {
        case PromptClass::kVerticalGradient:
          c = lerp_rgb(p.light, p.dark, static_cast<float>(y) / static_cast<float>(size - 1));
          break;
        case PromptClass::kHorizontalGradient:
          c = lerp_rgb(p.light, p.dark, static_cast<float>(x) / static_cast<float>(size - 1));
          break;
        case PromptClass::kStripes:
          c = ((y + p.phase_y) / p.cell) % 2 == 0 ? p.light : p.dark;
          break;
        case PromptClass::kChecker:
          c = (((x + p.phase_x) / p.cell) + ((y + p.phase_y) / p.cell)) % 2 == 0 ? p.light : p.dark;
          break;
        case PromptClass::kSolidTeal:
        case PromptClass::kSolidBlue:
          c = p.light;
          break;
        case PromptClass::kRadialGradient: {
          float dx = static_cast<float>(x) - p.center_x;
          float dy = static_cast<float>(y) - p.center_y;
          float maxd = 0.55f * static_cast<float>(size);
          float t = std::min(1.0f, std::sqrt(dx * dx + dy * dy) / maxd);
          c = lerp_rgb(p.light, p.dark, t);
          break;
        }
        case PromptClass::kNoiseTexture:
          c = p.light;
          for (int ch = 0; ch < 3; ++ch) {
            c[static_cast<size_t>(ch)] +=
                p.noise_amp * static_cast<float>(noise.uniform(-1.0, 1.0));
            c[static_cast<size_t>(ch)] = std::min(1.0f, std::max(0.0f, c[static_cast<size_t>(ch)]));
          }
          break;
      }
      img.set_pixel(y, x, c[0], c[1], c[2]);
    }
  }
  return img;
}

struct ProductGeometry {
  ShapeKind shape = ShapeKind::kDisc;
  float cx = 0, cy = 0;
  float param = 0;  // disc radius / square half-side / triangle circumradius

  bool contains(float px, float py) const {
    switch (shape) {
      case ShapeKind::kDisc: {
        float dx = px - cx, dy = py - cy;
        return dx * dx + dy * dy <= param * param;
      }
      case ShapeKind::kSquare:
        return std::abs(px - cx) <= param && std::abs(py - cy) <= param;
      case ShapeKind::kTriangle: {
        // equilateral, apex up, circumradius param
        std::array<std::array<float, 2>, 3> vs{};
        for (int k = 0; k < 3; ++k) {
          float ang = static_cast<float>(k) * 2.0943951023931953f;  // 2*pi/3
          vs[static_cast<size_t>(k)] = {cx + param * std::sin(ang), cy - param * std::cos(ang)};
        }
        bool sign = false, first = true;
        for (int k = 0; k < 3; ++k) {
          auto& a = vs[static_cast<size_t>(k)];
          auto& b = vs[static_cast<size_t>((k + 1) % 3)];
          float cross = (b[0] - a[0]) * (py - a[1]) - (b[1] - a[1]) * (px - a[0]);
          if (first) {
            sign = cross >= 0;
            first = false;
          } else if ((cross >= 0) != sign) {
            return false;
          }
        }
        return true;
      }
    }
    return false;
  }

  float horizontal_extent() const {
    switch (shape) {
      case ShapeKind::kDisc: return param;
      case ShapeKind::kSquare: return param;
      case ShapeKind::kTriangle: return 0.8660254f * param;
    }
    return param;
  }

  float bottom_extent() const {
    switch (shape) {
      case ShapeKind::kDisc: return param;
      case ShapeKind::kSquare: return param;
      case ShapeKind::kTriangle: return 0.5f * param;
    }
    return param;
  }

  float top_extent() const {
    return shape == ShapeKind::kTriangle ? param : bottom_extent();
  }
};

// Size mappings chosen so every rasterized silhouette over the whole
// size range lands well inside [36, 120] pixels at 32x32.
inline float shape_param(ShapeKind shape, float radius) {
  float t = (radius - 4.0f) / 3.0f;
  switch (shape) {
    case ShapeKind::kDisc: return 3.7f + t * (5.9f - 3.7f);
    case ShapeKind::kSquare: return 3.55f + t * (4.9f - 3.55f);
    case ShapeKind::kTriangle: return 6.0f + t * (8.9f - 6.0f);
  }
  return radius;
}

inline MaskImage rasterize(const ProductGeometry& g, int size) {
  MaskImage mask(size, size);
  for (int y = 0; y < size; ++y)
    for (int x = 0; x < size; ++x)
      mask.at(y, x) = g.contains(static_cast<float>(x) + 0.5f, static_cast<float>(y) + 0.5f) ? 1 : 0;
  return mask;
}

inline void quantize_to_8bit(ImageRaster& img) {
  for (float& v : img.values) {
    float c = std::min(1.0f, std::max(0.0f, v));
    v = static_cast<float>(std::lround(255.0f * c)) / 255.0f;
  }
}

}  // namespace detail

// Shadow: a flat ellipse (half as tall as wide) anchored at the bottom
// edge of the product, darkening the background at 40% opacity.
struct ShadowEllipse {
  float cx = 0, cy = 0, sx = 1, sy = 1;

  bool contains(float px, float py) const {
    float dx = (px - cx) / sx, dy = (py - cy) / sy;
    return dx * dx + dy * dy <= 1.0f;
  }
};

inline Sample make_sample(uint64_t seed, int size = 32) {
  Rng rng(mix64(seed));
  Sample s;
  s.seed = seed;
  s.prompt_class = rng.uniform_int(kNumPromptClasses);
  int color_idx = rng.uniform_int(static_cast<int>(product_palette().size()));
  s.product_color = product_palette()[static_cast<size_t>(color_idx)];
  s.shape = static_cast<ShapeKind>(rng.uniform_int(3));

  float radius = static_cast<float>(rng.uniform(4.0, 7.0));
  detail::ProductGeometry geom;
  geom.shape = s.shape;
  geom.param = detail::shape_param(s.shape, radius);

  // center restricted to the middle 0.6 x 0.6 region, shrunk so the
  // silhouette never clips at the image border
  float lo = 0.2f * static_cast<float>(size);
  float hi = 0.8f * static_cast<float>(size);
  float hx = geom.horizontal_extent();
  geom.cx = static_cast<float>(rng.uniform(std::max(lo, hx), std::min(hi, static_cast<float>(size) - hx)));
  float top = geom.top_extent(), bottom = geom.bottom_extent();
  geom.cy = static_cast<float>(rng.uniform(std::max(lo, top), std::min(hi, static_cast<float>(size) - bottom)));

  detail::BackgroundParams bg_params = detail::draw_background_params(s.prompt_class, size, rng);
  ImageRaster background = detail::render_background(s.prompt_class, bg_params, size);

  s.mask = detail::rasterize(geom, size);

  ShadowEllipse shadow;
  shadow.cx = geom.cx;
  shadow.cy = geom.cy + geom.bottom_extent();
  shadow.sx = 1.1f * geom.horizontal_extent();
  shadow.sy = 0.55f * geom.horizontal_extent();

  s.reference = background;
  s.target = background;
  s.foreground = ImageRaster(size, size, kNeutralGray);
  for (int y = 0; y < size; ++y) {
    for (int x = 0; x < size; ++x) {
      if (shadow.contains(static_cast<float>(x) + 0.5f, static_cast<float>(y) + 0.5f)) {
        for (int c = 0; c < 3; ++c) s.target.at(y, x, c) *= 0.6f;  // 40% black
      }
      if (s.mask.at(y, x)) {
        s.target.set_pixel(y, x, s.product_color[0], s.product_color[1], s.product_color[2]);
        s.foreground.set_pixel(y, x, s.product_color[0], s.product_color[1], s.product_color[2]);
      }
    }
  }

  detail::quantize_to_8bit(s.target);
  detail::quantize_to_8bit(s.foreground);
  detail::quantize_to_8bit(s.reference);
  return s;
}

// First draw of make_sample, used to steer class balance in write_dataset.
inline int peek_prompt_class(uint64_t seed) {
  Rng rng(mix64(seed));
  return rng.uniform_int(kNumPromptClasses);
}

// Product pixels plus every pixel the shadow visibly changed; the region
// to ignore when comparing backgrounds.
inline MaskImage exclusion_region(const Sample& s) {
  MaskImage region = s.mask;
  for (int y = 0; y < region.height; ++y) {
    for (int x = 0; x < region.width; ++x) {
      for (int c = 0; c < 3; ++c) {
        if (s.target.at(y, x, c) != s.reference.at(y, x, c)) {
          region.at(y, x) = 1;
          break;
        }
      }
    }
  }
  return region;
}

// Fixed-parameter rendering of one background class (used as the prompt
// classifier's reference points).
inline ImageRaster canonical_rendering(int prompt_class, int size = 32) {
  detail::BackgroundParams p = detail::canonical_background_params(prompt_class, size);
  ImageRaster img = detail::render_background(prompt_class, p, size);
  detail::quantize_to_8bit(img);
  return img;
}

// ---------------------------------------------------------------------------
// On-disk records.

struct ManifestEntry {
  int index = 0;
  int prompt_class = 0;
  uint64_t seed = 0;
};

inline void write_record(const std::filesystem::path& dir, const Sample& s) {
  std::filesystem::create_directories(dir);
  write_png((dir / "target.png").string(), s.target);
  write_png((dir / "foreground.png").string(), s.foreground);
  write_png((dir / "mask.png").string(), s.mask);
  write_png((dir / "reference.png").string(), s.reference);
  nlohmann::json meta;
  meta["class"] = s.prompt_class;
  meta["seed"] = s.seed;
  meta["color"] = {s.product_color[0], s.product_color[1], s.product_color[2]};
  meta["shape"] = shape_name(s.shape);
  std::ofstream out(dir / "meta.json");
  if (!out) fail("cannot write " + (dir / "meta.json").string());
  out << meta.dump(2) << "\n";
}

// Writes n records plus a manifest. Classes are balanced exactly: a
// shuffled quota list assigns each record a class, and the per-record
// seed is searched (deterministically) until make_sample lands on it,
// so every record is still a pure function of its manifest seed.
inline std::vector<ManifestEntry> write_dataset(int n, const std::filesystem::path& out_dir, uint64_t seed) {
  if (n <= 0) fail("write_dataset: record count must be positive");
  std::error_code ec;
  std::filesystem::create_directories(out_dir, ec);
  if (ec) fail("cannot create dataset directory " + out_dir.string() + ": " + ec.message());

  std::vector<int> classes(static_cast<size_t>(n));
  for (int i = 0; i < n; ++i) classes[static_cast<size_t>(i)] = i % kNumPromptClasses;
  Rng shuffle_rng(mix_seed(seed, 0x5u));
  for (int i = n - 1; i > 0; --i) {
    int j = shuffle_rng.uniform_int(i + 1);
    std::swap(classes[static_cast<size_t>(i)], classes[static_cast<size_t>(j)]);
  }

  std::vector<ManifestEntry> manifest(static_cast<size_t>(n));
  for (int i = 0; i < n; ++i) {
    int want = classes[static_cast<size_t>(i)];
    uint64_t rec_seed = 0;
    for (uint64_t attempt = 0;; ++attempt) {
      rec_seed = mix_seed(seed, static_cast<uint64_t>(i) + 1, attempt);
      if (peek_prompt_class(rec_seed) == want) break;
    }
    Sample s = make_sample(rec_seed);
    write_record(out_dir / ("rec_" + std::to_string(i)), s);
    manifest[static_cast<size_t>(i)] = {i, want, rec_seed};
  }

  std::ofstream mf(out_dir / "manifest.tsv");
  if (!mf) fail("cannot write manifest in " + out_dir.string());
  for (const auto& e : manifest)
    mf << e.index << '\t' << e.prompt_class << '\t' << e.seed << '\n';
  return manifest;
}

inline std::vector<ManifestEntry> read_manifest(const std::filesystem::path& dir) {
  std::ifstream mf(dir / "manifest.tsv");
  if (!mf) fail("cannot read manifest in " + dir.string());
  std::vector<ManifestEntry> entries;
  std::string line;
  while (std::getline(mf, line)) {
    if (line.empty()) continue;
    std::istringstream ls(line);
    ManifestEntry e;
    if (!(ls >> e.index >> e.prompt_class >> e.seed)) fail("malformed manifest line: " + line);
    entries.push_back(e);
  }
  return entries;
}

inline Sample load_record(const std::filesystem::path& dir) {
  Sample s;
  s.target = read_png_image((dir / "target.png").string());
  s.foreground = read_png_image((dir / "foreground.png").string());
  s.mask = read_png_mask((dir / "mask.png").string());
  s.reference = read_png_image((dir / "reference.png").string());
  std::ifstream in(dir / "meta.json");
  if (!in) fail("cannot read " + (dir / "meta.json").string());
  nlohmann::json meta = nlohmann::json::parse(in);
  s.prompt_class = meta.at("class").get<int>();
  s.seed = meta.at("seed").get<uint64_t>();
  auto color = meta.at("color");
  s.product_color = {color.at(0).get<float>(), color.at(1).get<float>(), color.at(2).get<float>()};
  std::string shape = meta.at("shape").get<std::string>();
  if (shape == "disc") s.shape = ShapeKind::kDisc;
  else if (shape == "square") s.shape = ShapeKind::kSquare;
  else if (shape == "triangle") s.shape = ShapeKind::kTriangle;
  else fail("unknown shape in meta: " + shape);
  return s;
}

inline std::vector<Sample> load_dataset(const std::filesystem::path& dir) {
  std::vector<ManifestEntry> manifest = read_manifest(dir);
  std::vector<Sample> samples;
  samples.reserve(manifest.size());
  for (const auto& e : manifest)
    samples.push_back(load_record(dir / ("rec_" + std::to_string(e.index))));
  return samples;
}

}  // namespace backdrop

#endif  // BACKDROP_SYNTH_HPP
