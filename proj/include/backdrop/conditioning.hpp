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

// Foreground/mask conditioning pathways: the zero-gated auxiliary branch,
// the channel-concatenation input variant, and low-rank adapters with a
// runtime output scale on the backbone's block linears.

#ifndef BACKDROP_CONDITIONING_HPP
#define BACKDROP_CONDITIONING_HPP

#include <map>
#include <string>
#include <vector>

#include "backdrop/model.hpp"

namespace backdrop {

// Per-token channel concatenation (Z_t | Z_f | Z_m) -> [n, 25].
template <class S>
TensorT<S> latent_channel_concat(const TensorT<S>& z_t, const TensorT<S>& z_f, const TensorT<S>& z_m) {
  if (z_t.shape() != z_f.shape())
    fail("latent_channel_concat: grids disagree: " + shape_str(z_t.shape()) + " vs " + shape_str(z_f.shape()));
  if (z_m.dim(0) != z_t.dim(0) || z_m.dim(1) != 1)
    fail("latent_channel_concat: mask grid " + shape_str(z_m.shape()) + " does not align with " +
         shape_str(z_t.shape()));
  return concat<S>({z_t, z_f, z_m}, 1);
}

// Channel-concatenation integration: the widened per-token channels feed
// the input layer directly and the prompt tokens are prepended.
template <class S>
TokenSequenceT<S> channel_concat_input(const ModelParamsT<S>& mp, int class_id, const TensorT<S>& z_t,
                                       const TensorT<S>& z_f, const TensorT<S>& z_m, int h, int w,
                                       const std::optional<TensorT<S>>& ref_latents = std::nullopt,
                                       int h_r = 0, int w_r = 0) {
  if (mp.config.integration != Integration::kConcat)
    fail("channel_concat_input: model is not configured for concat integration");
  return assemble_sequence(mp, class_id, latent_channel_concat(z_t, z_f, z_m), h, w, ref_latents, h_r, w_r);
}

// Auxiliary control branch: consumes the channel-concatenated triple with
// the prompt tokens as context, runs its own blocks, and emits one gated
// residual per injection site (keyed by base-block index). The gates are
// zero at initialization, so a fresh branch contributes exactly nothing.
template <class S>
std::map<int, TensorT<S>> control_branch_forward(const ModelParamsT<S>& mp, const TensorT<S>& z_t,
                                                 const TensorT<S>& z_f, const TensorT<S>& z_m,
                                                 const TensorT<S>& prompt, const TensorT<S>& t_vec,
                                                 int h, int w) {
  const DiTConfig& cfg = mp.config;
  if (cfg.integration != Integration::kBranch)
    fail("control_branch_forward: model is not configured for branch integration");
  TensorT<S> x = linear(mp, "branch.in_proj", latent_channel_concat(z_t, z_f, z_m));
  x = add(x, detail::cached_grid_encoding<S>(h, w, 0, 0, cfg.model_dim));
  TensorT<S> seq = concat<S>({prompt, x}, 0);
  std::map<int, TensorT<S>> residuals;
  for (int j = 0; j < cfg.branch_depth; ++j) {
    seq = dit_block(mp, "branch.block" + std::to_string(j), seq, t_vec);
    TensorT<S> gated = linear(mp, "branch.gate" + std::to_string(j),
                              slice_rows(seq, cfg.prompt_len, h * w));
    residuals.emplace(cfg.injection_sites[static_cast<size_t>(j)], gated);
  }
  return residuals;
}

// The backbone block linears that receive adapters.
inline std::vector<std::string> lora_target_layers(const DiTConfig& cfg) {
  std::vector<std::string> names;
  for (int i = 0; i < cfg.depth; ++i) {
    std::string prefix = "backbone.block" + std::to_string(i);
    for (const char* part : {".attn.q", ".attn.k", ".attn.v", ".attn.o", ".mlp.fc1", ".mlp.fc2", ".mod"})
      names.push_back(prefix + part);
  }
  return names;
}

// Adds rank-r adapters to the given linear layers. Down matrices start
// random, up matrices start at zero, so the wrapped model equals the
// unwrapped one until training moves the up weights. Base weights are
// untouched.
template <class S>
void lora_wrap(ModelParamsT<S>& mp, uint64_t seed, std::vector<std::string> layers = {}) {
  if (mp.lora_wrapped) fail("lora_wrap: model is already wrapped");
  if (layers.empty()) layers = lora_target_layers(mp.config);
  Rng rng(mix_seed(seed, 0x10afull));
  for (const std::string& name : layers) {
    const TensorT<S>& w = mp.store.at(name + ".w");
    int in_dim = w.dim(0), out_dim = w.dim(1);
    TensorT<S>& down = mp.store.create("lora." + name + ".down", {in_dim, mp.config.lora_rank});
    fill_normal(down, rng, 1.0 / std::sqrt(static_cast<double>(in_dim)));
    mp.store.create("lora." + name + ".up", {mp.config.lora_rank, out_dim});
    mp.lora_layers.insert(name);
  }
  mp.lora_wrapped = true;
  mp.lora_scale = S(1);
}

template <class S>
void set_lora_scale(ModelParamsT<S>& mp, S s) {
  if (!mp.lora_wrapped) fail("set_lora_scale: model has no adapters");
  mp.lora_scale = s;
}

}  // namespace backdrop

#endif  // BACKDROP_CONDITIONING_HPP
