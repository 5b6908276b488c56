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

// Diffusion-transformer backbone over a joint token sequence
// [prompt | target grid | optional reference grid]:
//   - integer 2D position table with offset indices for reference tokens
//   - additive 2D sinusoidal encodings
//   - multi-head attention with an optional block scale matrix applied to
//     the attention weights
//   - timestep conditioning through adaptive layernorm shift/scale
//   - velocity head over the target tokens

#ifndef BACKDROP_MODEL_HPP
#define BACKDROP_MODEL_HPP

#include <array>
#include <cmath>
#include <cstdint>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "backdrop/params.hpp"
#include "backdrop/rng.hpp"
#include "backdrop/tensor.hpp"

namespace backdrop {

// How foreground/mask conditioning reaches the backbone: through the
// gated auxiliary branch, or by widening the input layer's channels.
enum class Integration : int { kBranch = 0, kConcat = 1 };

struct DiTConfig {
  int depth = 8;
  int model_dim = 128;
  int heads = 4;
  int prompt_len = 8;
  int time_embed_dim = 64;
  int patch_factor = 2;
  int mlp_ratio = 4;
  int num_classes = 8;
  Integration integration = Integration::kBranch;
  int branch_depth = 2;
  std::vector<int> injection_sites = {0, 4};  // base blocks receiving gate outputs
  int lora_rank = 8;

  int latent_channels() const { return 3 * patch_factor * patch_factor; }
  int concat_channels() const { return 2 * latent_channels() + 1; }
  int head_dim() const { return model_dim / heads; }
  int input_channels() const {
    return integration == Integration::kConcat ? concat_channels() : latent_channels();
  }
};

template <class S>
struct ModelParamsT {
  DiTConfig config;
  ParamStoreT<S> store;
  bool lora_wrapped = false;
  S lora_scale = S(1);
  std::set<std::string> lora_layers;  // base linear prefixes carrying adapters
};

using ModelParams = ModelParamsT<float>;

// ---------------------------------------------------------------------------
// Positions.

struct SequenceInfo {
  int m = 0, n = 0, l = 0;  // prompt / target / reference token counts
  int h = 0, w = 0;         // target grid extents
  int h_r = 0, w_r = 0;     // reference grid extents (0 when absent)
  int total() const { return m + n + l; }
};

using PositionTable = std::vector<std::array<int, 2>>;

// Target token (i,j) keeps (i,j); reference token (i,j) maps to
// (h+i, w+j), so the two grids occupy disjoint index ranges.
inline PositionTable assign_positions(int h, int w, int h_r = 0, int w_r = 0) {
  if (h <= 0 || w <= 0) fail("assign_positions: target extents must be positive");
  PositionTable table;
  table.reserve(static_cast<size_t>(h) * w + static_cast<size_t>(h_r) * w_r);
  for (int i = 0; i < h; ++i)
    for (int j = 0; j < w; ++j) table.push_back({i, j});
  for (int i = 0; i < h_r; ++i)
    for (int j = 0; j < w_r; ++j) table.push_back({h + i, w + j});
  return table;
}

// Prompt tokens sit outside both grids.
inline std::array<int, 2> prompt_sentinel_position(int h, int w, int h_r = 0, int w_r = 0) {
  return {2 * h + h_r, 2 * w + w_r};
}

// 2D sinusoidal encoding: first half of the channels from the row index,
// second half from the column index, standard frequency ladder per half.
template <class S>
TensorT<S> positional_encoding(const PositionTable& positions, int dim) {
  if (dim % 4 != 0) fail("positional_encoding: dim must be divisible by 4");
  int quarter = dim / 4;
  std::vector<S> omega(static_cast<size_t>(quarter));
  for (int k = 0; k < quarter; ++k)
    omega[static_cast<size_t>(k)] = std::pow(S(10000), -static_cast<S>(k) / static_cast<S>(quarter));
  std::vector<S> values(positions.size() * static_cast<size_t>(dim));
  for (size_t t = 0; t < positions.size(); ++t) {
    S* row = values.data() + t * static_cast<size_t>(dim);
    for (int axis = 0; axis < 2; ++axis) {
      if (positions[t][static_cast<size_t>(axis)] < 0) fail("positional_encoding: negative index");
      S pos = static_cast<S>(positions[t][static_cast<size_t>(axis)]);
      S* half = row + axis * (dim / 2);
      for (int k = 0; k < quarter; ++k) {
        half[2 * k] = std::sin(pos * omega[static_cast<size_t>(k)]);
        half[2 * k + 1] = std::cos(pos * omega[static_cast<size_t>(k)]);
      }
    }
  }
  return TensorT<S>::from({static_cast<int>(positions.size()), dim}, std::move(values));
}

namespace detail {

// Grid encodings recur with identical extents every step; memoize per thread.
template <class S>
const TensorT<S>& cached_grid_encoding(int h, int w, int h_r, int w_r, int dim) {
  thread_local std::map<std::array<int, 5>, TensorT<S>> cache;
  std::array<int, 5> key = {h, w, h_r, w_r, dim};
  auto it = cache.find(key);
  if (it == cache.end())
    it = cache.emplace(key, positional_encoding<S>(assign_positions(h, w, h_r, w_r), dim)).first;
  return it->second;
}

template <class S>
const TensorT<S>& cached_sentinel_encoding(int h, int w, int h_r, int w_r, int dim, int rows) {
  thread_local std::map<std::array<int, 6>, TensorT<S>> cache;
  std::array<int, 6> key = {h, w, h_r, w_r, dim, rows};
  auto it = cache.find(key);
  if (it == cache.end()) {
    PositionTable table(static_cast<size_t>(rows), prompt_sentinel_position(h, w, h_r, w_r));
    it = cache.emplace(key, positional_encoding<S>(table, dim)).first;
  }
  return it->second;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Attention scale matrix.

// Materialized (m+n+l)^2 grid: ones everywhere except the four cross
// blocks between the reference segment and the prompt/target segments,
// which carry s.
template <class S>
TensorT<S> build_scale_matrix(int m, int n, int l, S s) {
  if (m < 0 || n < 0 || l < 0) fail("build_scale_matrix: negative extents");
  if (s < S(0)) fail("build_scale_matrix: scale must be non-negative");
  int total = m + n + l;
  std::vector<S> values(static_cast<size_t>(total) * total, S(1));
  auto is_ref = [&](int idx) { return idx >= m + n; };
  for (int r = 0; r < total; ++r)
    for (int c = 0; c < total; ++c)
      if (is_ref(r) != is_ref(c)) values[static_cast<size_t>(r) * total + c] = s;
  return TensorT<S>::from({total, total}, std::move(values));
}

// ---------------------------------------------------------------------------
// Linear layers with optional low-rank adapters.

namespace detail {

template <class S>
bool all_zero(const TensorT<S>& t) {
  for (S v : t.data())
    if (v != S(0)) return false;
  return true;
}

}  // namespace detail

template <class S>
TensorT<S> linear(const ModelParamsT<S>& mp, const std::string& name, const TensorT<S>& x) {
  TensorT<S> y = row_add(matmul(x, mp.store.at(name + ".w")), mp.store.at(name + ".b"));
  if (mp.lora_wrapped && mp.lora_layers.count(name)) {
    const TensorT<S>& down = mp.store.at("lora." + name + ".down");
    const TensorT<S>& up = mp.store.at("lora." + name + ".up");
    // a zero scale (or an untrained all-zero adapter in inference mode)
    // contributes exactly nothing; skipping the add keeps wrapped and
    // unwrapped outputs bitwise identical
    bool dead_adapter = !up.requires_grad() && detail::all_zero(up);
    if (mp.lora_scale != S(0) && !dead_adapter) {
      y = add(y, scale(matmul(matmul(x, down), up), mp.lora_scale));
    }
  }
  return y;
}

// ---------------------------------------------------------------------------
// Attention.

// Per head: weights = softmax(q k^T / sqrt(d)), optionally reweighted by
// the scale matrix (rows renormalize over surviving entries, so scale 0
// reproduces attention with the scaled-out keys deleted); output =
// weights v. One scale matrix is shared across heads.
template <class S>
TensorT<S> attention(const ModelParamsT<S>& mp, const std::string& prefix, const TensorT<S>& x,
                     const TensorT<S>* scale_matrix = nullptr) {
  int tokens = x.dim(0);
  if (scale_matrix && (scale_matrix->dim(0) != tokens || scale_matrix->dim(1) != tokens))
    fail("attention: scale matrix " + shape_str(scale_matrix->shape()) +
         " does not match sequence length " + std::to_string(tokens));
  const DiTConfig& cfg = mp.config;
  TensorT<S> q = linear(mp, prefix + ".q", x);
  TensorT<S> k = linear(mp, prefix + ".k", x);
  TensorT<S> v = linear(mp, prefix + ".v", x);
  S inv_sqrt_d = S(1) / std::sqrt(static_cast<S>(cfg.head_dim()));
  std::vector<TensorT<S>> head_outputs;
  head_outputs.reserve(static_cast<size_t>(cfg.heads));
  for (int hd = 0; hd < cfg.heads; ++hd) {
    TensorT<S> qh = slice_cols(q, hd * cfg.head_dim(), cfg.head_dim());
    TensorT<S> kh = slice_cols(k, hd * cfg.head_dim(), cfg.head_dim());
    TensorT<S> vh = slice_cols(v, hd * cfg.head_dim(), cfg.head_dim());
    TensorT<S> logits = scale(matmul(qh, kh, false, true), inv_sqrt_d);
    TensorT<S> weights = softmax(logits, scale_matrix);
    head_outputs.push_back(matmul(weights, vh));
  }
  TensorT<S> merged = concat(head_outputs, 1);
  return linear(mp, prefix + ".o", merged);
}

// ---------------------------------------------------------------------------
// Timestep conditioning and blocks.

template <class S>
TensorT<S> sinusoidal_time_embedding(S t, int dim) {
  int half = dim / 2;
  std::vector<S> values(static_cast<size_t>(dim));
  for (int k = 0; k < half; ++k) {
    S omega = std::pow(S(10000), -static_cast<S>(k) / static_cast<S>(half));
    values[static_cast<size_t>(2 * k)] = std::sin(t * S(1000) * omega);
    values[static_cast<size_t>(2 * k + 1)] = std::cos(t * S(1000) * omega);
  }
  return TensorT<S>::from({1, dim}, std::move(values));
}

template <class S>
TensorT<S> timestep_vector(const ModelParamsT<S>& mp, S t) {
  TensorT<S> emb = sinusoidal_time_embedding(t, mp.config.time_embed_dim);
  return linear(mp, "backbone.tmlp.fc2", gelu(linear(mp, "backbone.tmlp.fc1", emb)));
}

// Pre-norm transformer block with adaptive layernorm: the timestep vector
// produces per-channel shift/scale ahead of both the attention and MLP.
template <class S>
TensorT<S> dit_block(const ModelParamsT<S>& mp, const std::string& prefix, const TensorT<S>& x,
                     const TensorT<S>& t_vec, const TensorT<S>* scale_matrix = nullptr) {
  int dim = mp.config.model_dim;
  TensorT<S> mod = linear(mp, prefix + ".mod", t_vec);  // [1, 4*dim]
  TensorT<S> shift_attn = slice_cols(mod, 0, dim);
  TensorT<S> scale_attn = slice_cols(mod, dim, dim);
  TensorT<S> shift_mlp = slice_cols(mod, 2 * dim, dim);
  TensorT<S> scale_mlp = slice_cols(mod, 3 * dim, dim);

  TensorT<S> a = row_add(row_mul(layer_norm(x), add_const(scale_attn, S(1))), shift_attn);
  TensorT<S> after_attn = add(x, attention(mp, prefix + ".attn", a, scale_matrix));

  TensorT<S> b = row_add(row_mul(layer_norm(after_attn), add_const(scale_mlp, S(1))), shift_mlp);
  TensorT<S> mlp = linear(mp, prefix + ".mlp.fc2", gelu(linear(mp, prefix + ".mlp.fc1", b)));
  return add(after_attn, mlp);
}

// ---------------------------------------------------------------------------
// Sequence assembly.

template <class S>
struct TokenSequenceT {
  TensorT<S> tokens;  // [m+n+l, model_dim]
  SequenceInfo info;
};

// Prompt tokens: class embedding + learned segment embedding + sinusoidal
// encoding of the sentinel position.
template <class S>
TensorT<S> prompt_tokens(const ModelParamsT<S>& mp, int class_id, const SequenceInfo& info) {
  const DiTConfig& cfg = mp.config;
  if (class_id < 0 || class_id >= cfg.num_classes)
    fail("prompt class id out of range: " + std::to_string(class_id));
  TensorT<S> tokens = reshape(embedding(mp.store.at("backbone.prompt_emb"), class_id),
                              {cfg.prompt_len, cfg.model_dim});
  tokens = row_add(tokens, mp.store.at("backbone.prompt_seg"));
  return add(tokens, detail::cached_sentinel_encoding<S>(info.h, info.w, info.h_r, info.w_r,
                                                         cfg.model_dim, cfg.prompt_len));
}

// [C | target | optional reference] with positional encodings added to the
// grid segments. `target_inputs` carries latent channels (12 in branch
// mode, 25 in concat mode); reference latents always carry 12 channels
// and are zero-padded in concat mode.
template <class S>
TokenSequenceT<S> assemble_sequence(const ModelParamsT<S>& mp, int class_id,
                                    const TensorT<S>& target_inputs, int h, int w,
                                    const std::optional<TensorT<S>>& ref_latents = std::nullopt,
                                    int h_r = 0, int w_r = 0) {
  const DiTConfig& cfg = mp.config;
  SequenceInfo info;
  info.m = cfg.prompt_len;
  info.h = h;
  info.w = w;
  info.n = h * w;
  if (target_inputs.dim(0) != info.n)
    fail("assemble_sequence: target token count " + std::to_string(target_inputs.dim(0)) +
         " does not match grid " + std::to_string(h) + "x" + std::to_string(w));
  if (target_inputs.dim(1) != cfg.input_channels())
    fail("assemble_sequence: target channels " + std::to_string(target_inputs.dim(1)) +
         " do not match the input layer (" + std::to_string(cfg.input_channels()) + ")");
  if (ref_latents) {
    info.h_r = h_r;
    info.w_r = w_r;
    info.l = h_r * w_r;
    if (ref_latents->dim(0) != info.l)
      fail("assemble_sequence: reference token count " + std::to_string(ref_latents->dim(0)) +
           " does not match grid " + std::to_string(h_r) + "x" + std::to_string(w_r));
  }

  const TensorT<S>& grid_pe =
      detail::cached_grid_encoding<S>(h, w, info.h_r, info.w_r, cfg.model_dim);

  TensorT<S> target = linear(mp, "backbone.in_proj", target_inputs);
  target = add(target, slice_rows(grid_pe, 0, info.n));

  std::vector<TensorT<S>> parts;
  parts.push_back(prompt_tokens(mp, class_id, info));
  parts.push_back(target);

  if (ref_latents) {
    TensorT<S> ref_in = *ref_latents;
    if (cfg.integration == Integration::kConcat) {
      // no foreground/mask signal at reference tokens
      TensorT<S> pad = TensorT<S>::zeros({info.l, cfg.concat_channels() - cfg.latent_channels()});
      ref_in = concat<S>({ref_in, pad}, 1);
    }
    TensorT<S> ref = linear(mp, "backbone.in_proj", ref_in);
    ref = add(ref, slice_rows(grid_pe, info.n, info.l));
    parts.push_back(ref);
  }

  return TokenSequenceT<S>{concat(parts, 0), info};
}

// ---------------------------------------------------------------------------
// The backbone pass.

namespace detail {

// x with `delta` added to rows [start, start+delta.rows)
template <class S>
TensorT<S> add_to_rows(const TensorT<S>& x, const TensorT<S>& delta, int start) {
  int rows = x.dim(0), count = delta.dim(0);
  std::vector<TensorT<S>> parts;
  if (start > 0) parts.push_back(slice_rows(x, 0, start));
  parts.push_back(add(slice_rows(x, start, count), delta));
  if (start + count < rows) parts.push_back(slice_rows(x, start + count, rows - start - count));
  return concat(parts, 0);
}

}  // namespace detail

// Runs the backbone blocks over an assembled sequence and returns the
// velocity prediction for the target tokens as an (h, w, channels) grid.
// `residuals` maps base-block indices to gated branch outputs added to the
// target-token rows entering that block.
template <class S>
TensorT<S> run_backbone(const ModelParamsT<S>& mp, const TokenSequenceT<S>& seq,
                        const TensorT<S>& t_vec, const TensorT<S>* scale_matrix = nullptr,
                        const std::map<int, TensorT<S>>& residuals = {}) {
  const DiTConfig& cfg = mp.config;
  TensorT<S> x = seq.tokens;
  for (int i = 0; i < cfg.depth; ++i) {
    auto it = residuals.find(i);
    if (it != residuals.end()) {
      // outside training, an identically-zero residual (fresh gates) is
      // skipped so the pass stays bitwise equal to the plain backbone
      bool dead = !it->second.requires_grad() && detail::all_zero(it->second);
      if (!dead) x = detail::add_to_rows(x, it->second, seq.info.m);
    }
    x = dit_block(mp, "backbone.block" + std::to_string(i), x, t_vec, scale_matrix);
  }
  x = layer_norm(x);
  x = row_add(row_mul(x, mp.store.at("backbone.final.g")), mp.store.at("backbone.final.b"));
  TensorT<S> out = linear(mp, "backbone.head", x);
  out = slice_rows(out, seq.info.m, seq.info.n);
  return reshape(out, {seq.info.h, seq.info.w, cfg.latent_channels()});
}

template <class S>
TensorT<S> backbone_forward(const ModelParamsT<S>& mp, const TokenSequenceT<S>& seq, S t,
                            const TensorT<S>* scale_matrix = nullptr,
                            const std::map<int, TensorT<S>>& residuals = {}) {
  if (t < S(0) || t > S(1)) fail("backbone_forward: timestep must lie in [0,1]");
  return run_backbone(mp, seq, timestep_vector(mp, t), scale_matrix, residuals);
}

// ---------------------------------------------------------------------------
// Initialization.

namespace detail {

template <class S>
void init_linear(ParamStoreT<S>& ps, const std::string& prefix, int in_dim, int out_dim, Rng& rng,
                 double gain = 1.0) {
  TensorT<S>& w = ps.create(prefix + ".w", {in_dim, out_dim});
  fill_normal(w, rng, gain / std::sqrt(static_cast<double>(in_dim)));
  ps.create(prefix + ".b", {out_dim});
}

// Residual write projections are damped so an untrained stack stays close
// to an identity carrier; modulation layers start at zero, so blocks are
// timestep-independent until trained.
template <class S>
void init_block(ParamStoreT<S>& ps, const std::string& prefix, const DiTConfig& cfg, Rng& rng) {
  int dim = cfg.model_dim;
  int hidden = dim * cfg.mlp_ratio;
  init_linear(ps, prefix + ".attn.q", dim, dim, rng);
  init_linear(ps, prefix + ".attn.k", dim, dim, rng);
  init_linear(ps, prefix + ".attn.v", dim, dim, rng);
  init_linear(ps, prefix + ".attn.o", dim, dim, rng, 0.1);
  init_linear(ps, prefix + ".mlp.fc1", dim, hidden, rng);
  init_linear(ps, prefix + ".mlp.fc2", hidden, dim, rng, 0.1);
  ps.create(prefix + ".mod.w", {dim, 4 * dim});
  ps.create(prefix + ".mod.b", {4 * dim});
}

template <class S>
void copy_param(ParamStoreT<S>& ps, const std::string& from, const std::string& to) {
  ps.at(to).raw_data() = ps.at(from).data();
}

}  // namespace detail

template <class S>
ModelParamsT<S> init_model(const DiTConfig& cfg, uint64_t seed) {
  if (cfg.model_dim % cfg.heads != 0) fail("init_model: model_dim must be divisible by heads");
  if (cfg.integration == Integration::kBranch &&
      static_cast<int>(cfg.injection_sites.size()) != cfg.branch_depth)
    fail("init_model: need one injection site per branch layer");
  for (size_t j = 0; j + 1 < cfg.injection_sites.size(); ++j)
    if (cfg.injection_sites[j] >= cfg.injection_sites[j + 1])
      fail("init_model: injection sites must be distinct and sorted");
  for (int site : cfg.injection_sites)
    if (site < 0 || site >= cfg.depth) fail("init_model: injection site out of range");
  ModelParamsT<S> mp;
  mp.config = cfg;
  ParamStoreT<S>& ps = mp.store;
  Rng rng(mix_seed(seed, 0xb0d1ull));

  detail::init_linear(ps, "backbone.in_proj", cfg.input_channels(), cfg.model_dim, rng);
  TensorT<S>& prompt = ps.create("backbone.prompt_emb", {cfg.num_classes, cfg.prompt_len * cfg.model_dim});
  fill_normal(prompt, rng, 1.0);
  TensorT<S>& seg = ps.create("backbone.prompt_seg", {cfg.model_dim});
  fill_normal(seg, rng, 0.1);
  detail::init_linear(ps, "backbone.tmlp.fc1", cfg.time_embed_dim, cfg.model_dim, rng);
  detail::init_linear(ps, "backbone.tmlp.fc2", cfg.model_dim, cfg.model_dim, rng);
  for (int i = 0; i < cfg.depth; ++i)
    detail::init_block(ps, "backbone.block" + std::to_string(i), cfg, rng);
  TensorT<S>& final_g = ps.create("backbone.final.g", {cfg.model_dim});
  for (S& v : final_g.raw_data()) v = S(1);
  ps.create("backbone.final.b", {cfg.model_dim});
  detail::init_linear(ps, "backbone.head", cfg.model_dim, cfg.latent_channels(), rng);

  if (cfg.integration == Integration::kBranch) {
    // input projection: latent rows copied from the backbone input layer,
    // extra foreground/mask rows start at zero
    detail::init_linear(ps, "branch.in_proj", cfg.concat_channels(), cfg.model_dim, rng);
    {
      TensorT<S>& bw = ps.at("branch.in_proj.w");
      const TensorT<S>& base = ps.at("backbone.in_proj.w");
      std::fill(bw.raw_data().begin(), bw.raw_data().end(), S(0));
      std::copy(base.data().begin(), base.data().end(), bw.raw_data().begin());
      ps.at("branch.in_proj.b").raw_data() = ps.at("backbone.in_proj.b").data();
    }
    for (int j = 0; j < cfg.branch_depth; ++j) {
      std::string bprefix = "branch.block" + std::to_string(j);
      std::string source = "backbone.block" + std::to_string(j);
      detail::init_block(ps, bprefix, cfg, rng);
      for (const char* part : {".attn.q.w", ".attn.q.b", ".attn.k.w", ".attn.k.b", ".attn.v.w",
                               ".attn.v.b", ".attn.o.w", ".attn.o.b", ".mlp.fc1.w", ".mlp.fc1.b",
                               ".mlp.fc2.w", ".mlp.fc2.b", ".mod.w", ".mod.b"})
        detail::copy_param(ps, source + part, bprefix + part);
      // gate layers: zero weights and bias, so every residual starts at zero
      ps.create("branch.gate" + std::to_string(j) + ".w", {cfg.model_dim, cfg.model_dim});
      ps.create("branch.gate" + std::to_string(j) + ".b", {cfg.model_dim});
    }
  }
  return mp;
}

}  // namespace backdrop

#endif  // BACKDROP_MODEL_HPP
