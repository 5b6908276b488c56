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

#include <filesystem>
#include <fstream>
#include <sstream>

#include "backdrop/grad_check.hpp"
#include "backdrop/trainer.hpp"

using namespace backdrop;

namespace fs = std::filesystem;

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

std::vector<Sample> tiny_dataset(int n, uint64_t seed) {
  std::vector<Sample> out;
  for (int i = 0; i < n; ++i) out.push_back(make_sample(mix_seed(seed, static_cast<uint64_t>(i))));
  return out;
}

Checkpoint quick_stage1(const std::vector<Sample>& data, int steps, uint64_t seed) {
  TrainConfig cfg;
  cfg.stage = 1;
  cfg.batch_size = 2;
  cfg.steps = steps;
  cfg.seed = seed;
  ModelParams mp = init_model<float>(tiny_config(), seed);
  std::vector<EncodedSample> enc = encode_dataset(data, mp.config.patch_factor);
  AdamMoments moments;
  auto trainable = apply_stage_freeze(mp, 1);
  for (int64_t k = 0; k < cfg.steps; ++k)
    training_step(mp, enc, cfg, k, moments, trainable, stage_lr(cfg, k));
  Checkpoint ckpt = checkpoint_from_model(mp, 1, cfg.steps, cfg.seed);
  ckpt.opt_m = moments.m;
  ckpt.opt_v = moments.v;
  return ckpt;
}

fs::path temp_file(const std::string& name) {
  fs::path p = fs::temp_directory_path() / ("backdrop_trainer_" + name);
  fs::remove(p);
  return p;
}

}  // namespace

TEST_CASE("config parsing accepts all keys and rejects unknown ones") {
  std::istringstream good(
      "stage = 2\nbatch_size = 4\nsteps = 100\nlearning_rate = 0.0008\n"
      "ref_keep_prob = 0.5\nshift_range = 2\nseed = 77\n# comment\n");
  TrainConfig cfg = parse_train_config(good);
  CHECK(cfg.stage == 2);
  CHECK(cfg.batch_size == 4);
  CHECK(cfg.steps == 100);
  CHECK(cfg.learning_rate == Catch::Approx(0.0008f));
  CHECK(cfg.ref_keep_prob == Catch::Approx(0.5f));
  CHECK(cfg.shift_range == 2);
  CHECK(cfg.seed == 77);

  std::istringstream bad("stage = 1\nmomentum = 0.9\n");
  REQUIRE_THROWS_WITH(parse_train_config(bad), Catch::Matchers::ContainsSubstring("unknown key"));
}

TEST_CASE("perfect prediction gives zero loss") {
  // with the target forced equal to the prediction the residual vanishes;
  // here: eps == z_tgt makes z_t == z_tgt at any t and the target zero,
  // checked against a model whose output is verified separately. Instead
  // of stubbing the model, verify via the loss identity on mse itself:
  // loss = mse(v, eps - z_tgt) is zero iff v == eps - z_tgt.
  Rng rng(1);
  std::vector<float> values(48);
  for (auto& v : values) v = static_cast<float>(rng.normal());
  Tensor v_pred = Tensor::from({4, 12}, values);
  Tensor target = Tensor::from({4, 12}, values);
  CHECK(mse(v_pred, target).item() == 0.0f);
}

TEST_CASE("interpolation endpoint: t=0 reproduces the clean latent") {
  Sample s = make_sample(5);
  EncodedSample enc = encode_sample(s, 2);
  Rng rng(2);
  std::vector<float> noise(enc.z_tgt.data().size());
  for (auto& v : noise) v = static_cast<float>(rng.normal());
  Tensor eps = Tensor::from(enc.z_tgt.shape(), noise);
  // z_t = (1-t) z_tgt + t eps at t=0
  Tensor z_t = add(scale(enc.z_tgt, 1.0f - 0.0f), scale(eps, 0.0f));
  CHECK(z_t.data() == enc.z_tgt.data());
}

TEST_CASE("hand-computed flow loss: zero target, unit noise, zero model output") {
  // loss = mean((v - (eps - z_tgt))^2) with v = 0, z_tgt = 0, eps = 1 -> 1
  Tensor v_pred = Tensor::zeros({4, 12});
  Tensor z_tgt = Tensor::zeros({4, 12});
  Tensor eps = Tensor::filled({4, 12}, 1.0f);
  CHECK(mse(v_pred, sub(eps, z_tgt)).item() == 1.0f);
}

TEST_CASE("flow loss gradient passes the finite-difference oracle") {
  DiTConfig cfg = tiny_config();
  auto mp = init_model<double>(cfg, 90);
  Rng rng(3);
  auto rand_tensor = [&](Shape shape) {
    std::vector<float> v(static_cast<size_t>(numel(shape)));
    for (auto& x : v) x = static_cast<float>(rng.normal());
    return Tensor::from(std::move(shape), std::move(v));
  };
  LatentBundle bundle;
  bundle.class_id = 2;
  bundle.z_tgt = rand_tensor({16, 12});
  bundle.z_f = rand_tensor({16, 12});
  bundle.z_m = rand_tensor({16, 1});
  bundle.h = 4;
  bundle.w = 4;
  std::vector<double> noise(bundle.z_tgt.data().size());
  for (auto& v : noise) v = rng.normal();
  TensorT<double> eps = TensorT<double>::from(bundle.z_tgt.shape(), noise);

  const std::string name = "branch.gate0.w";
  auto point = TensorT<double>::from(mp.store.at(name).shape(), mp.store.at(name).data());
  double err = grad_check<double>(
      [&](const TensorT<double>& x) {
        ModelParamsT<double> swapped = mp;
        swapped.store.params.at(name) = x;
        return sample_flow_loss(swapped, bundle, 0.7, eps);
      },
      point);
  CHECK(err < 1e-3);
}

TEST_CASE("stage 1 trains only the branch") {
  auto data = tiny_dataset(4, 100);
  TrainConfig cfg;
  cfg.stage = 1;
  cfg.batch_size = 2;
  cfg.steps = 3;
  cfg.seed = 5;
  ModelParams mp = init_model<float>(tiny_config(), 5);
  uint64_t backbone_before = params_hash(mp.store, "backbone.");
  uint64_t branch_before = params_hash(mp.store, "branch.");
  std::vector<EncodedSample> enc = encode_dataset(data, 2);
  AdamMoments moments;
  auto trainable = apply_stage_freeze(mp, 1);
  for (const std::string& n : trainable) REQUIRE(n.rfind("branch.", 0) == 0);
  for (int64_t k = 0; k < cfg.steps; ++k)
    training_step(mp, enc, cfg, k, moments, trainable, stage_lr(cfg, k));
  CHECK(params_hash(mp.store, "backbone.") == backbone_before);
  CHECK(params_hash(mp.store, "branch.") != branch_before);
}

TEST_CASE("stage 2 trains only the adapters") {
  auto data = tiny_dataset(4, 101);
  Checkpoint stage1 = quick_stage1(data, 2, 7);
  TrainConfig cfg;
  cfg.stage = 2;
  cfg.batch_size = 2;
  cfg.steps = 3;
  cfg.seed = 9;
  Checkpoint stage2 = train_stage2(data, cfg, stage1);
  CHECK(stage2.stage == 2);
  CHECK(params_hash(stage2.params, "backbone.") == params_hash(stage1.params, "backbone."));
  CHECK(params_hash(stage2.params, "branch.") == params_hash(stage1.params, "branch."));
  bool lora_moved = false;
  for (const auto& [name, t] : stage2.params.params)
    if (name.rfind("lora.", 0) == 0 && name.ends_with(".up"))
      for (float v : t.data()) lora_moved |= (v != 0.0f);
  CHECK(lora_moved);
}

TEST_CASE("identical seeds give byte-identical checkpoints") {
  auto data = tiny_dataset(4, 102);
  fs::path a = temp_file("det_a.bin");
  fs::path b = temp_file("det_b.bin");
  save_checkpoint(quick_stage1(data, 3, 21), a);
  save_checkpoint(quick_stage1(data, 3, 21), b);
  std::ifstream fa(a, std::ios::binary), fb(b, std::ios::binary);
  std::string ca((std::istreambuf_iterator<char>(fa)), std::istreambuf_iterator<char>());
  std::string cb((std::istreambuf_iterator<char>(fb)), std::istreambuf_iterator<char>());
  REQUIRE(!ca.empty());
  REQUIRE(ca == cb);
  fs::remove(a);
  fs::remove(b);
}

TEST_CASE("reference dropout bookkeeping stays near the keep probability") {
  int kept = 0;
  for (int i = 0; i < 1000; ++i) kept += reference_kept(31, i, 0, 0.5f) ? 1 : 0;
  double fraction = kept / 1000.0;
  CHECK(fraction >= 0.45);
  CHECK(fraction <= 0.55);
}

TEST_CASE("degenerate keep probability zero never builds reference tokens") {
  auto data = tiny_dataset(2, 103);
  std::vector<EncodedSample> enc = encode_dataset(data, 2);
  TrainConfig cfg;
  cfg.stage = 2;
  cfg.ref_keep_prob = 0.0f;
  cfg.seed = 3;
  for (int64_t step = 0; step < 20; ++step) {
    Rng rng(1);
    LatentBundle bundle = backdrop::detail::make_training_bundle(enc[0], cfg, step, 0, rng);
    REQUIRE(!bundle.z_ref.has_value());
    // text-only pattern: the same sequence structure as stage 1
    CHECK(bundle.h_r == 0);
    CHECK(bundle.w_r == 0);
  }
}

TEST_CASE("latent shift replicates edges") {
  LatentGrid grid(3, 3, 1);
  for (int i = 0; i < 3; ++i)
    for (int j = 0; j < 3; ++j) grid.at(i, j, 0) = static_cast<float>(3 * i + j);
  LatentGrid shifted = shift_latent(grid, 1, 0);  // content moves down
  CHECK(shifted.at(0, 0, 0) == 0.0f);  // top row replicated
  CHECK(shifted.at(1, 0, 0) == 0.0f);
  CHECK(shifted.at(2, 2, 0) == 5.0f);
}

TEST_CASE("checkpoint round trip is bitwise") {
  auto mp = init_model<float>(tiny_config(), 55);
  Checkpoint ckpt = checkpoint_from_model(mp, 1, 42, 99);
  ckpt.opt_m["branch.gate0.w"] = std::vector<float>(256, 0.125f);
  fs::path p = temp_file("roundtrip.bin");
  save_checkpoint(ckpt, p);
  Checkpoint loaded = load_checkpoint(p);
  CHECK(loaded.stage == 1);
  CHECK(loaded.step == 42);
  CHECK(loaded.train_seed == 99);
  CHECK(loaded.config.model_dim == 16);
  REQUIRE(loaded.params.params.size() == ckpt.params.params.size());
  for (const auto& [name, t] : ckpt.params.params) {
    REQUIRE(loaded.params.has(name));
    REQUIRE(loaded.params.at(name).data() == t.data());
  }
  REQUIRE(loaded.opt_m.at("branch.gate0.w") == ckpt.opt_m.at("branch.gate0.w"));

  // save -> load -> save produces identical bytes
  fs::path p2 = temp_file("roundtrip2.bin");
  save_checkpoint(loaded, p2);
  std::ifstream fa(p, std::ios::binary), fb(p2, std::ios::binary);
  std::string ca((std::istreambuf_iterator<char>(fa)), std::istreambuf_iterator<char>());
  std::string cb((std::istreambuf_iterator<char>(fb)), std::istreambuf_iterator<char>());
  REQUIRE(ca == cb);
  fs::remove(p);
  fs::remove(p2);
}

TEST_CASE("truncated checkpoints are rejected with byte counts") {
  auto mp = init_model<float>(tiny_config(), 56);
  fs::path p = temp_file("truncated.bin");
  save_checkpoint(checkpoint_from_model(mp, 1, 0, 0), p);
  auto size = fs::file_size(p);
  fs::resize_file(p, size - 100);
  REQUIRE_THROWS_WITH(load_checkpoint(p), Catch::Matchers::ContainsSubstring("truncated") &&
                                              Catch::Matchers::ContainsSubstring("bytes"));
  fs::remove(p);
}

TEST_CASE("corrupt magic and version are rejected") {
  fs::path p = temp_file("magic.bin");
  {
    std::ofstream f(p, std::ios::binary);
    f << "NOPExxxxyyyy";
  }
  REQUIRE_THROWS_WITH(load_checkpoint(p), Catch::Matchers::ContainsSubstring("magic"));
  fs::remove(p);
}

TEST_CASE("stage gates on checkpoints") {
  auto data = tiny_dataset(3, 104);
  Checkpoint stage1 = quick_stage1(data, 2, 13);

  TrainConfig cfg2;
  cfg2.stage = 2;
  cfg2.batch_size = 2;
  cfg2.steps = 2;
  cfg2.seed = 14;
  Checkpoint stage2 = train_stage2(data, cfg2, stage1);  // stage-1 into stage-2: accepted
  CHECK(stage2.stage == 2);

  cfg2.steps = 3;
  Checkpoint resumed = train_stage2(data, cfg2, stage2);  // stage-2 resume: accepted
  CHECK(resumed.step == 3);

  TrainConfig cfg1;
  cfg1.stage = 1;
  cfg1.steps = 2;
  REQUIRE_THROWS_WITH(train_stage1(data, cfg1, stage2),
                      Catch::Matchers::ContainsSubstring("cannot seed stage-1"));
}

TEST_CASE("empty dataset is rejected") {
  TrainConfig cfg;
  cfg.stage = 1;
  REQUIRE_THROWS_WITH(train_stage1({}, cfg), Catch::Matchers::ContainsSubstring("empty"));
}

TEST_CASE("interrupted training resumes to the identical checkpoint") {
  auto data = tiny_dataset(4, 105);
  // straight run of 4 steps
  TrainConfig cfg;
  cfg.stage = 1;
  cfg.batch_size = 2;
  cfg.steps = 4;
  cfg.seed = 77;
  ModelParams straight = init_model<float>(tiny_config(), 77);
  std::vector<EncodedSample> enc = encode_dataset(data, 2);
  {
    AdamMoments moments;
    auto trainable = apply_stage_freeze(straight, 1);
    for (int64_t k = 0; k < 4; ++k)
      training_step(straight, enc, cfg, k, moments, trainable, stage_lr(cfg, k));
  }
  // two steps, checkpoint, resume for two more
  Checkpoint half = quick_stage1(data, 2, 77);
  TrainConfig resume_cfg = cfg;
  Checkpoint full = train_stage1(data, resume_cfg, half, 77);
  CHECK(full.step == 4);
  CHECK(params_hash(full.params) == params_hash(straight.store));
}
