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

#include <catch2/catch_amalgamated.hpp>

#include "backdrop/conditioning.hpp"
#include "backdrop/forward.hpp"
#include "backdrop/grad_check.hpp"

using namespace backdrop;

namespace {

DiTConfig tiny_config() {
  DiTConfig cfg;
  cfg.depth = 2;
  cfg.model_dim = 16;
  cfg.heads = 2;
  cfg.prompt_len = 2;
  cfg.time_embed_dim = 8;
  cfg.mlp_ratio = 2;
  cfg.branch_depth = 1;
  cfg.injection_sites = {0};
  cfg.lora_rank = 2;
  return cfg;
}

template <class S>
TensorT<S> random_tensor(Shape shape, Rng& rng, double scale = 1.0) {
  std::vector<S> v(static_cast<size_t>(numel(shape)));
  for (auto& x : v) x = static_cast<S>(rng.normal() * scale);
  return TensorT<S>::from(std::move(shape), std::move(v));
}

template <class S>
VelocityInputsT<S> random_inputs(Rng& rng, int h, int w, int class_id = 0) {
  VelocityInputsT<S> in;
  in.class_id = class_id;
  in.z_t = random_tensor<S>({h * w, 12}, rng);
  in.z_f = random_tensor<S>({h * w, 12}, rng);
  in.z_m = random_tensor<S>({h * w, 1}, rng, 0.5);
  in.h = h;
  in.w = w;
  in.t = static_cast<S>(rng.uniform());
  return in;
}

using DTensor = TensorT<double>;

}  // namespace

TEST_CASE("channel concat layout: sequence length and per-token channels") {
  DiTConfig cfg;
  cfg.integration = Integration::kConcat;
  auto mp = init_model<float>(cfg, 60);
  Rng rng(1);
  auto z_t = random_tensor<float>({256, 12}, rng);
  auto z_f = random_tensor<float>({256, 12}, rng);
  auto z_m = random_tensor<float>({256, 1}, rng);
  NoGradGuard ng;
  auto seq = channel_concat_input(mp, 2, z_t, z_f, z_m, 16, 16);
  CHECK(seq.tokens.dim(0) == 8 + 256);
  CHECK(seq.info.m == 8);
  CHECK(seq.info.n == 256);

  // raw concatenation holds exactly (z_t | z_f | z_m) per token
  auto raw = latent_channel_concat(z_t, z_f, z_m);
  REQUIRE(raw.shape() == Shape{256, 25});
  for (int tok = 0; tok < 256; ++tok) {
    for (int c = 0; c < 12; ++c) {
      REQUIRE(raw.data()[static_cast<size_t>(tok) * 25 + c] == z_t.data()[static_cast<size_t>(tok) * 12 + c]);
      REQUIRE(raw.data()[static_cast<size_t>(tok) * 25 + 12 + c] == z_f.data()[static_cast<size_t>(tok) * 12 + c]);
    }
    REQUIRE(raw.data()[static_cast<size_t>(tok) * 25 + 24] == z_m.data()[static_cast<size_t>(tok)]);
  }
}

TEST_CASE("mask channel is the only channel the mask touches") {
  Rng rng(2);
  auto z_t = random_tensor<float>({16, 12}, rng);
  auto z_f = random_tensor<float>({16, 12}, rng);
  auto zeros = Tensor::zeros({16, 1});
  auto ones = Tensor::filled({16, 1}, 1.0f);
  auto a = latent_channel_concat(z_t, z_f, zeros);
  auto b = latent_channel_concat(z_t, z_f, ones);
  for (int tok = 0; tok < 16; ++tok)
    for (int c = 0; c < 25; ++c) {
      float va = a.data()[static_cast<size_t>(tok) * 25 + c];
      float vb = b.data()[static_cast<size_t>(tok) * 25 + c];
      if (c == 24)
        REQUIRE(va != vb);
      else
        REQUIRE(va == vb);
    }
}

TEST_CASE("grid mismatch is rejected") {
  Rng rng(3);
  auto z_t = random_tensor<float>({16, 12}, rng);
  auto z_f = random_tensor<float>({12, 12}, rng);
  auto z_m = random_tensor<float>({16, 1}, rng);
  REQUIRE_THROWS_WITH(latent_channel_concat(z_t, z_f, z_m),
                      Catch::Matchers::ContainsSubstring("grids disagree"));
}

TEST_CASE("fresh control branch emits exactly zero residuals") {
  DiTConfig cfg = tiny_config();
  auto mp = init_model<float>(cfg, 61);
  Rng rng(4);
  NoGradGuard ng;
  auto z_t = random_tensor<float>({16, 12}, rng);
  auto z_f = random_tensor<float>({16, 12}, rng);
  auto z_m = random_tensor<float>({16, 1}, rng);
  SequenceInfo info;
  info.m = cfg.prompt_len;
  info.h = info.w = 4;
  info.n = 16;
  auto prompt = prompt_tokens(mp, 0, info);
  auto t_vec = timestep_vector(mp, 0.4f);
  auto residuals = control_branch_forward(mp, z_t, z_f, z_m, prompt, t_vec, 4, 4);
  REQUIRE(residuals.size() == 1);
  for (const auto& [site, r] : residuals) {
    CHECK(site == 0);
    for (float v : r.data()) REQUIRE(v == 0.0f);
  }
}

TEST_CASE("zero-gate identity: backbone with fresh branch equals backbone alone, bitwise") {
  DiTConfig cfg = tiny_config();
  auto mp = init_model<float>(cfg, 62);
  NoGradGuard ng;
  for (int trial = 0; trial < 20; ++trial) {
    Rng rng(mix_seed(700, static_cast<uint64_t>(trial)));
    auto in = random_inputs<float>(rng, 4, 4, trial % cfg.num_classes);
    auto with_branch = model_forward(mp, in);
    auto seq = assemble_sequence(mp, in.class_id, in.z_t, in.h, in.w);
    auto backbone_only = backbone_forward(mp, seq, in.t);
    REQUIRE(with_branch.data() == backbone_only.data());
  }
}

TEST_CASE("one gradient step moves at least one gate weight") {
  DiTConfig cfg = tiny_config();
  auto mp = init_model<float>(cfg, 63);
  Rng rng(5);
  auto in = random_inputs<float>(rng, 4, 4);
  auto target = random_tensor<float>({4, 4, 12}, rng);
  auto loss = mse(model_forward(mp, in), target);
  REQUIRE(loss.item() > 0.0f);
  auto grads = backward(loss);
  REQUIRE(grads.named.count("branch.gate0.w") == 1);

  auto& w = mp.store.at("branch.gate0.w");
  const auto& g = grads.named.at("branch.gate0.w").data();
  for (size_t i = 0; i < w.raw_data().size(); ++i) w.raw_data()[i] -= 0.01f * g[i];
  bool any_nonzero = false;
  for (float v : w.data()) any_nonzero |= (v != 0.0f);
  CHECK(any_nonzero);
}

TEST_CASE("zero-adapter identity: wrapped model equals unwrapped, bitwise") {
  DiTConfig cfg = tiny_config();
  auto plain = init_model<float>(cfg, 64);
  auto wrapped = init_model<float>(cfg, 64);
  lora_wrap(wrapped, 99);
  // inference mode: adapters with zero up matrices contribute nothing
  for (const auto& [name, t] : wrapped.store.params) wrapped.store.params.at(name).set_requires_grad(false);
  NoGradGuard ng;
  for (float s : {1.0f, 0.5f, 0.0f}) {
    set_lora_scale(wrapped, s);
    for (int trial = 0; trial < 7; ++trial) {
      Rng rng(mix_seed(800, static_cast<uint64_t>(trial)));
      auto in = random_inputs<float>(rng, 4, 4);
      auto a = model_forward(plain, in);
      auto b = model_forward(wrapped, in);
      REQUIRE(a.data() == b.data());
    }
  }
}

TEST_CASE("double wrap and unwrapped scale are rejected") {
  DiTConfig cfg = tiny_config();
  auto mp = init_model<float>(cfg, 65);
  REQUIRE_THROWS_WITH(set_lora_scale(mp, 0.5f), Catch::Matchers::ContainsSubstring("no adapters"));
  lora_wrap(mp, 1);
  REQUIRE_THROWS_WITH(lora_wrap(mp, 2), Catch::Matchers::ContainsSubstring("already wrapped"));
}

TEST_CASE("adapter output is affine in the scale") {
  DiTConfig cfg = tiny_config();
  auto mp = init_model<float>(cfg, 66);
  lora_wrap(mp, 3);
  // emulate training: give one adapter nonzero up weights
  Rng rng(6);
  auto& up = mp.store.at("lora.backbone.block0.attn.q.up");
  for (auto& v : up.raw_data()) v = static_cast<float>(rng.normal() * 0.2);

  auto x = random_tensor<float>({5, cfg.model_dim}, rng);
  NoGradGuard ng;
  auto eval_at = [&](float s) {
    set_lora_scale(mp, s);
    return linear(mp, "backbone.block0.attn.q", x);
  };
  auto y0 = eval_at(0.0f);
  auto y1 = eval_at(1.0f);
  auto ymid = eval_at(0.5f);
  for (size_t i = 0; i < ymid.data().size(); ++i) {
    float expected = y0.data()[i] + 0.5f * (y1.data()[i] - y0.data()[i]);
    REQUIRE(ymid.data()[i] == Catch::Approx(expected).margin(1e-6));
  }
}

TEST_CASE("base weights are untouched by wrapping") {
  DiTConfig cfg = tiny_config();
  auto mp = init_model<float>(cfg, 67);
  uint64_t before = params_hash(mp.store, "backbone.");
  lora_wrap(mp, 4);
  CHECK(params_hash(mp.store, "backbone.") == before);
}

TEST_CASE("gradient check through the adapter path") {
  DiTConfig cfg = tiny_config();
  auto mp = init_model<double>(cfg, 68);
  lora_wrap(mp, 5);
  Rng rng(7);
  auto x = random_tensor<double>({4, cfg.model_dim}, rng);
  const std::string name = "lora.backbone.block0.attn.q.up";
  auto point = random_tensor<double>(mp.store.at(name).shape(), rng, 0.3);
  double err = grad_check<double>(
      [&](const DTensor& up) {
        ModelParamsT<double> copy = mp;
        copy.store.params.at(name) = up;
        return sum(mul(linear(copy, "backbone.block0.attn.q", x), x));
      },
      point);
  CHECK(err < 1e-3);
}
