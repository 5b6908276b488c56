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

// Full conditional velocity pass: latents in, velocity grid out, tying
// together prompt tokens, the conditioning pathway, the optional
// reference segment, and the attention scale.

#ifndef BACKDROP_FORWARD_HPP
#define BACKDROP_FORWARD_HPP

#include <optional>

#include "backdrop/conditioning.hpp"
#include "backdrop/model.hpp"

namespace backdrop {

template <class S>
struct VelocityInputsT {
  int class_id = 0;
  TensorT<S> z_t;  // noisy target latent tokens [n, 12]
  TensorT<S> z_f;  // foreground latent tokens   [n, 12]
  TensorT<S> z_m;  // mask grid tokens           [n, 1]
  std::optional<TensorT<S>> z_ref;  // reference latent tokens [l, 12]
  int h = 0, w = 0;
  int h_r = 0, w_r = 0;
  S t = S(0);
  S attn_scale = S(1);  // reference cross-attention scale
};

using VelocityInputs = VelocityInputsT<float>;

// Velocity prediction over the target grid, shape (h, w, 12).
template <class S>
TensorT<S> model_forward(const ModelParamsT<S>& mp, const VelocityInputsT<S>& in) {
  if (in.t < S(0) || in.t > S(1)) fail("model_forward: timestep must lie in [0,1]");
  const DiTConfig& cfg = mp.config;
  TensorT<S> t_vec = timestep_vector(mp, in.t);

  TokenSequenceT<S> seq;
  if (cfg.integration == Integration::kConcat) {
    seq = channel_concat_input(mp, in.class_id, in.z_t, in.z_f, in.z_m, in.h, in.w, in.z_ref,
                               in.h_r, in.w_r);
  } else {
    seq = assemble_sequence(mp, in.class_id, in.z_t, in.h, in.w, in.z_ref, in.h_r, in.w_r);
  }

  std::map<int, TensorT<S>> residuals;
  if (cfg.integration == Integration::kBranch) {
    TensorT<S> prompt = prompt_tokens(mp, in.class_id, seq.info);
    residuals = control_branch_forward(mp, in.z_t, in.z_f, in.z_m, prompt, t_vec, in.h, in.w);
  }

  // an all-ones scale matrix is a no-op; only materialize a real one
  std::optional<TensorT<S>> smat;
  if (in.z_ref && in.attn_scale != S(1))
    smat = build_scale_matrix(seq.info.m, seq.info.n, seq.info.l, in.attn_scale);

  return run_backbone(mp, seq, t_vec, smat ? &*smat : nullptr, residuals);
}

}  // namespace backdrop

#endif  // BACKDROP_FORWARD_HPP
