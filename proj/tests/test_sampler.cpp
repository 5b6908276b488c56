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

#include <cmath>

#include "backdrop/sampler.hpp"
#include "backdrop/trainer.hpp"

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

Checkpoint tiny_checkpoint(int stage, uint64_t seed) {
  ModelParams mp = init_model<float>(tiny_config(), seed);
  if (stage == 2) lora_wrap(mp, seed + 1);
  return checkpoint_from_model(mp, stage, 0, seed);
}

SampleRequest request_for(const Sample& s, int steps = 6) {
  SampleRequest req;
  req.foreground = s.foreground;
  req.mask = s.mask;
  req.prompt_class = s.prompt_class;
  req.steps = steps;
  req.seed = 77;
  return req;
}

}  // namespace

TEST_CASE("euler integration recovers the endpoint of a constant field") {
  // oracle: v(z, t) = eps - z0 constant in t; starting at z(1) = eps, one
  // step of size 1 lands exactly on z0
  Rng rng(1);
  std::vector<float> z0(24), eps(24);
  for (auto& v : z0) v = static_cast<float>(rng.normal());
  for (auto& v : eps) v = static_cast<float>(rng.normal());
  auto field = [&](const std::vector<float>&, float) {
    std::vector<float> v(24);
    for (size_t i = 0; i < v.size(); ++i) v[i] = eps[i] - z0[i];
    return v;
  };
  std::vector<float> out = integrate_euler(field, eps, 1);
  REQUIRE(out.size() == z0.size());
  for (size_t i = 0; i < out.size(); ++i) REQUIRE(out[i] == Catch::Approx(z0[i]).margin(1e-6));

  // the linear field integrates exactly at any step count
  std::vector<float> out50 = integrate_euler(field, eps, 50);
  for (size_t i = 0; i < out50.size(); ++i) CHECK(out50[i] == Catch::Approx(z0[i]).margin(1e-5));
}

TEST_CASE("step counts below one are rejected") {
  auto field = [](const std::vector<float>& z, float) { return z; };
  REQUIRE_THROWS(integrate_euler(field, {1.0f}, 0));
  Checkpoint ckpt = tiny_checkpoint(1, 3);
  Sample s = make_sample(1);
  SampleRequest req = request_for(s);
  req.steps = 0;
  REQUIRE_THROWS_WITH(generate(req, ckpt), Catch::Matchers::ContainsSubstring("steps"));
}

TEST_CASE("generation is deterministic") {
  Checkpoint ckpt = tiny_checkpoint(1, 4);
  Sample s = make_sample(2);
  SampleRequest req = request_for(s);
  ImageRaster a = generate(req, ckpt);
  ImageRaster b = generate(req, ckpt);
  REQUIRE(images_equal(a, b));
  CHECK(a.height == 32);
  CHECK(a.width == 32);
}

TEST_CASE("reference sampling requires a stage-2 checkpoint") {
  Checkpoint stage1 = tiny_checkpoint(1, 5);
  Sample s = make_sample(3);
  SampleRequest req = request_for(s);
  req.reference = s.reference;
  REQUIRE_THROWS_WITH(generate(req, stage1), Catch::Matchers::ContainsSubstring("stage-2"));
  Checkpoint stage2 = tiny_checkpoint(2, 5);
  ImageRaster img = generate(req, stage2);
  CHECK(img.height == 32);
}

TEST_CASE("attention scale is ignored without a reference") {
  Checkpoint ckpt = tiny_checkpoint(2, 6);
  Sample s = make_sample(4);
  SampleRequest a = request_for(s);
  a.attn_scale = 0.3f;
  SampleRequest b = request_for(s);
  b.attn_scale = 0.9f;
  REQUIRE(images_equal(generate(a, ckpt), generate(b, ckpt)));
}

TEST_CASE("changing the step count changes outputs boundedly") {
  Checkpoint ckpt = tiny_checkpoint(1, 7);
  Sample s = make_sample(5);
  SampleRequest req10 = request_for(s, 10);
  SampleRequest req20 = request_for(s, 20);
  ImageRaster a = generate(req10, ckpt);
  ImageRaster b = generate(req20, ckpt);
  double max_diff = 0;
  for (size_t i = 0; i < a.values.size(); ++i)
    max_diff = std::max(max_diff, std::abs(static_cast<double>(a.values[i]) - b.values[i]));
  CHECK(max_diff < 1.0);  // smoke bound: same trajectory family, no blowup
}

TEST_CASE("sweep produces one image per value with a shared seed") {
  Checkpoint ckpt = tiny_checkpoint(2, 8);
  Sample s = make_sample(6);
  SampleRequest req = request_for(s);
  req.reference = s.reference;

  auto single = sweep(req, ckpt, SweepAxis::kLora, {1.0f});
  REQUIRE(single.size() == 1);
  REQUIRE(images_equal(single[0], generate(req, ckpt)));

  auto imgs = sweep(req, ckpt, SweepAxis::kAttention, {0.0f, 0.25f, 0.5f, 0.75f, 1.0f});
  REQUIRE(imgs.size() == 5);

  REQUIRE_THROWS_WITH(sweep(req, ckpt, SweepAxis::kLora, {}),
                      Catch::Matchers::ContainsSubstring("no scale values"));
  REQUIRE_THROWS_WITH(sweep(req, ckpt, SweepAxis::kLora, {1.5f}),
                      Catch::Matchers::ContainsSubstring("[0,1]"));
}

TEST_CASE("lora sweep runs at scale zero") {
  Checkpoint ckpt = tiny_checkpoint(2, 9);
  Sample s = make_sample(7);
  SampleRequest req = request_for(s);
  req.reference = s.reference;
  auto imgs = sweep(req, ckpt, SweepAxis::kLora, {0.0f, 0.5f, 1.0f});
  REQUIRE(imgs.size() == 3);
}
