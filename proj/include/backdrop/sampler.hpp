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

// Deterministic denoising inference. Starting from seeded noise at t=1,
// the learned velocity field is integrated with uniform Euler steps down
// to t=0 and the final latent is decoded. Text-only and text+reference
// modes share the code path; the reference changes only the token
// sequence, the adapter scale, and the attention scale.

#ifndef BACKDROP_SAMPLER_HPP
#define BACKDROP_SAMPLER_HPP

#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "backdrop/checkpoint.hpp"
#include "backdrop/codec.hpp"
#include "backdrop/forward.hpp"
#include "backdrop/image.hpp"
#include "backdrop/synth.hpp"

namespace backdrop {

struct SampleRequest {
  ImageRaster foreground;  // product on neutral gray
  MaskImage mask;          // full-resolution binary mask
  int prompt_class = 0;
  std::optional<ImageRaster> reference;
  int steps = 50;
  float lora_scale = 1.0f;  // adapter output scale
  float attn_scale = 1.0f;  // reference cross-attention scale (ignored without a reference)
  uint64_t seed = 0;
};

enum class SweepAxis : int { kLora = 0, kAttention = 1 };

// Uniform-grid Euler integration of dz/dt = v(z, t) from t=1 down to 0.
// The velocity field is injected so the integrator can be checked against
// closed-form fields.
inline std::vector<float> integrate_euler(
    const std::function<std::vector<float>(const std::vector<float>&, float)>& velocity,
    std::vector<float> z, int steps) {
  if (steps < 1) fail("integrate_euler: need at least one step");
  float dt = 1.0f / static_cast<float>(steps);
  for (int k = 0; k < steps; ++k) {
    float t = 1.0f - static_cast<float>(k) * dt;
    std::vector<float> v = velocity(z, t);
    if (v.size() != z.size()) fail("integrate_euler: velocity size mismatch");
    for (size_t i = 0; i < z.size(); ++i) z[i] -= dt * v[i];
  }
  return z;
}

namespace detail {

inline std::vector<float> seeded_noise(uint64_t seed, size_t count) {
  Rng rng(mix_seed(seed, 0x901feull));
  std::vector<float> out(count);
  for (float& v : out) v = static_cast<float>(rng.normal());
  return out;
}

}  // namespace detail

inline ImageRaster generate(const SampleRequest& request, const Checkpoint& ckpt) {
  if (request.steps < 1) fail("generate: steps must be at least 1");
  bool with_reference = request.reference.has_value();
  if (with_reference && ckpt.stage < 2)
    fail("generate: reference-conditioned sampling needs a stage-2 checkpoint");

  ModelParams mp = checkpoint_model(ckpt);
  for (auto& [name, t] : mp.store.params) t.set_requires_grad(false);
  if (mp.lora_wrapped) set_lora_scale(mp, request.lora_scale);

  int f = mp.config.patch_factor;
  LatentGrid z_f_grid = encode(request.foreground, f);
  int h = z_f_grid.h, w = z_f_grid.w;
  Tensor z_f = z_f_grid.tokens();
  Tensor z_m = downsample_mask(request.mask, f).tokens();

  std::optional<Tensor> z_ref;
  int h_r = 0, w_r = 0;
  if (with_reference) {
    LatentGrid ref_grid = encode(*request.reference, f);
    h_r = ref_grid.h;
    w_r = ref_grid.w;
    z_ref = ref_grid.tokens();
  }

  NoGradGuard ng;
  auto velocity = [&](const std::vector<float>& z, float t) {
    VelocityInputs in;
    in.class_id = request.prompt_class;
    in.z_t = Tensor::from(z_f.shape(), z);
    in.z_f = z_f;
    in.z_m = z_m;
    in.z_ref = z_ref;
    in.h = h;
    in.w = w;
    in.h_r = h_r;
    in.w_r = w_r;
    in.t = t;
    in.attn_scale = with_reference ? request.attn_scale : 1.0f;
    return model_forward(mp, in).data();
  };

  std::vector<float> z0 = detail::seeded_noise(request.seed, z_f.data().size());
  std::vector<float> z = integrate_euler(velocity, std::move(z0), request.steps);
  LatentGrid out = grid_from_tokens(z, h, w, mp.config.latent_channels());
  return clamp01(decode(out));
}

// One image per scale value with every other request field fixed
// (including the seed).
inline std::vector<ImageRaster> sweep(const SampleRequest& request, const Checkpoint& ckpt,
                                      SweepAxis axis, const std::vector<float>& values) {
  if (values.empty()) fail("sweep: no scale values given");
  for (float v : values)
    if (v < 0.0f || v > 1.0f) fail("sweep: scale values must lie in [0,1]");
  std::vector<ImageRaster> images;
  images.reserve(values.size());
  for (float v : values) {
    SampleRequest r = request;
    if (axis == SweepAxis::kLora)
      r.lora_scale = v;
    else
      r.attn_scale = v;
    images.push_back(generate(r, ckpt));
  }
  return images;
}

}  // namespace backdrop

#endif  // BACKDROP_SAMPLER_HPP
