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

// Velocity-matching objective on the straight data-to-noise path and the
// two-stage schedule: stage 1 trains the control branch for text-driven
// inpainting, stage 2 freezes everything and trains low-rank adapters
// with reference tokens that are dropped half the time and spatially
// jittered when kept. Per-sample passes inside a batch may run on worker
// threads; gradients are folded in fixed slot order, so results do not
// depend on scheduling.

#ifndef BACKDROP_TRAINER_HPP
#define BACKDROP_TRAINER_HPP

#include <cmath>
#include <cstdint>
#include <fstream>
#include <functional>
#include <optional>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include "backdrop/checkpoint.hpp"
#include "backdrop/codec.hpp"
#include "backdrop/forward.hpp"
#include "backdrop/synth.hpp"

namespace backdrop {

// ---------------------------------------------------------------------------
// Configuration.

struct TrainConfig {
  int stage = 1;
  int batch_size = 16;
  int steps = 2000;
  float learning_rate = 4e-4f;  // constant for stage 1, cosine peak for stage 2
  float ref_keep_prob = 0.5f;
  int shift_range = 2;  // reference shift augmentation, in latent cells
  uint64_t seed = 0;
};

// Flat `key = value` text. Unknown keys are errors.
inline TrainConfig parse_train_config(std::istream& in) {
  TrainConfig cfg;
  std::string line;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    std::string stripped;
    for (char c : line) {
      if (c == '#') break;
      stripped += c;
    }
    auto eq = stripped.find('=');
    auto trim = [](std::string s) {
      size_t a = s.find_first_not_of(" \t\r");
      size_t b = s.find_last_not_of(" \t\r");
      return a == std::string::npos ? std::string() : s.substr(a, b - a + 1);
    };
    if (eq == std::string::npos) {
      if (!trim(stripped).empty())
        fail("config line " + std::to_string(line_no) + ": expected key = value");
      continue;
    }
    std::string key = trim(stripped.substr(0, eq));
    std::string value = trim(stripped.substr(eq + 1));
    if (key.empty() || value.empty())
      fail("config line " + std::to_string(line_no) + ": expected key = value");
    try {
      if (key == "stage") cfg.stage = std::stoi(value);
      else if (key == "batch_size") cfg.batch_size = std::stoi(value);
      else if (key == "steps") cfg.steps = std::stoi(value);
      else if (key == "learning_rate") cfg.learning_rate = std::stof(value);
      else if (key == "ref_keep_prob") cfg.ref_keep_prob = std::stof(value);
      else if (key == "shift_range") cfg.shift_range = std::stoi(value);
      else if (key == "seed") cfg.seed = std::stoull(value);
      else fail("config line " + std::to_string(line_no) + ": unknown key '" + key + "'");
    } catch (const std::invalid_argument&) {
      fail("config line " + std::to_string(line_no) + ": bad value for '" + key + "'");
    } catch (const std::out_of_range&) {
      fail("config line " + std::to_string(line_no) + ": bad value for '" + key + "'");
    }
  }
  if (cfg.stage != 1 && cfg.stage != 2) fail("config: stage must be 1 or 2");
  if (cfg.steps <= 0) fail("config: steps must be positive");
  if (cfg.batch_size <= 0) fail("config: batch_size must be positive");
  if (cfg.ref_keep_prob < 0.0f || cfg.ref_keep_prob > 1.0f)
    fail("config: ref_keep_prob must lie in [0,1]");
  return cfg;
}

inline TrainConfig load_train_config(const std::filesystem::path& path) {
  std::ifstream f(path);
  if (!f) fail("cannot read config " + path.string());
  return parse_train_config(f);
}

// ---------------------------------------------------------------------------
// Latent views of the dataset.

struct LatentBundle {
  int class_id = 0;
  Tensor z_tgt;  // clean target latent [n, 12]
  Tensor z_f;    // foreground latent   [n, 12]
  Tensor z_m;    // mask grid           [n, 1]
  std::optional<Tensor> z_ref;
  int h = 0, w = 0, h_r = 0, w_r = 0;
};

struct EncodedSample {
  int class_id = 0;
  Tensor z_tgt, z_f, z_m;
  LatentGrid ref_grid;  // kept in grid form for shift/crop augmentation
  int h = 0, w = 0;
};

inline EncodedSample encode_sample(const Sample& s, int f) {
  EncodedSample e;
  e.class_id = s.prompt_class;
  LatentGrid tgt = encode(s.target, f);
  e.h = tgt.h;
  e.w = tgt.w;
  e.z_tgt = tgt.tokens();
  e.z_f = encode(s.foreground, f).tokens();
  e.z_m = downsample_mask(s.mask, f).tokens();
  e.ref_grid = encode(s.reference, f);
  return e;
}

inline std::vector<EncodedSample> encode_dataset(const std::vector<Sample>& samples, int f) {
  if (samples.empty()) fail("dataset is empty");
  std::vector<EncodedSample> out;
  out.reserve(samples.size());
  for (const Sample& s : samples) out.push_back(encode_sample(s, f));
  return out;
}

// Integer shift with edge replication.
inline LatentGrid shift_latent(const LatentGrid& grid, int dy, int dx) {
  LatentGrid out(grid.h, grid.w, grid.channels);
  for (int i = 0; i < grid.h; ++i) {
    int si = std::min(grid.h - 1, std::max(0, i - dy));
    for (int j = 0; j < grid.w; ++j) {
      int sj = std::min(grid.w - 1, std::max(0, j - dx));
      for (int c = 0; c < grid.channels; ++c) out.at(i, j, c) = grid.at(si, sj, c);
    }
  }
  return out;
}

inline LatentGrid crop_latent(const LatentGrid& grid, int i0, int j0, int hc, int wc) {
  if (i0 < 0 || j0 < 0 || hc <= 0 || wc <= 0 || i0 + hc > grid.h || j0 + wc > grid.w)
    fail("crop_latent: window out of range");
  LatentGrid out(hc, wc, grid.channels);
  for (int i = 0; i < hc; ++i)
    for (int j = 0; j < wc; ++j)
      for (int c = 0; c < grid.channels; ++c) out.at(i, j, c) = grid.at(i0 + i, j0 + j, c);
  return out;
}

// ---------------------------------------------------------------------------
// Objective.

// z_t = (1-t) z_tgt + t eps; the model predicts v and is regressed onto
// eps - z_tgt, averaged over target tokens.
template <class S>
TensorT<S> sample_flow_loss(const ModelParamsT<S>& mp, const LatentBundle& bundle, S t,
                            const TensorT<S>& eps) {
  TensorT<S> z_tgt = TensorT<S>::from(bundle.z_tgt.shape(),
                                      std::vector<S>(bundle.z_tgt.data().begin(), bundle.z_tgt.data().end()));
  TensorT<S> z_f = TensorT<S>::from(bundle.z_f.shape(),
                                    std::vector<S>(bundle.z_f.data().begin(), bundle.z_f.data().end()));
  TensorT<S> z_m = TensorT<S>::from(bundle.z_m.shape(),
                                    std::vector<S>(bundle.z_m.data().begin(), bundle.z_m.data().end()));
  VelocityInputsT<S> in;
  in.class_id = bundle.class_id;
  in.z_t = add(scale(z_tgt, S(1) - t), scale(eps, t));
  in.z_f = z_f;
  in.z_m = z_m;
  in.h = bundle.h;
  in.w = bundle.w;
  in.t = t;
  if (bundle.z_ref) {
    in.z_ref = TensorT<S>::from(bundle.z_ref->shape(),
                                std::vector<S>(bundle.z_ref->data().begin(), bundle.z_ref->data().end()));
    in.h_r = bundle.h_r;
    in.w_r = bundle.w_r;
  }
  TensorT<S> v = model_forward(mp, in);
  TensorT<S> target = sub(eps, z_tgt);
  return mse(reshape(v, target.shape()), target);
}

// Batch objective: mean of per-sample losses in index order.
inline Tensor flow_loss(const ModelParams& mp, const std::vector<LatentBundle>& batch,
                        const std::vector<float>& ts, const std::vector<Tensor>& noises) {
  if (batch.empty()) fail("flow_loss: empty batch");
  if (ts.size() != batch.size() || noises.size() != batch.size())
    fail("flow_loss: per-sample t/noise counts do not match the batch");
  Tensor total;
  for (size_t i = 0; i < batch.size(); ++i) {
    if (ts[i] < 0.0f || ts[i] > 1.0f) fail("flow_loss: timestep must lie in [0,1]");
    Tensor li = sample_flow_loss(mp, batch[i], ts[i], noises[i]);
    total = i == 0 ? li : add(total, li);
  }
  return scale(total, 1.0f / static_cast<float>(batch.size()));
}

// ---------------------------------------------------------------------------
// Optimizer: adaptive moments with decoupled weight decay. Gates and
// adapters are exempt from decay.

struct AdamMoments {
  std::map<std::string, std::vector<float>> m, v;
};

inline bool decay_exempt(const std::string& name) {
  return name.rfind("lora.", 0) == 0 || name.rfind("branch.gate", 0) == 0;
}

inline void adam_step(ParamStore& store, const std::map<std::string, Tensor>& grads,
                      AdamMoments& moments, int64_t step_index, float lr,
                      const std::vector<std::string>& trainable) {
  const float beta1 = 0.9f, beta2 = 0.95f, eps = 1e-8f, weight_decay = 0.01f;
  float bias1 = 1.0f - std::pow(beta1, static_cast<float>(step_index + 1));
  float bias2 = 1.0f - std::pow(beta2, static_cast<float>(step_index + 1));
  for (const std::string& name : trainable) {
    auto git = grads.find(name);
    if (git == grads.end()) fail("adam_step: missing gradient for " + name);
    const std::vector<float>& g = git->second.data();
    std::vector<float>& p = store.at(name).raw_data();
    std::vector<float>& m = moments.m[name];
    std::vector<float>& v = moments.v[name];
    if (m.empty()) m.assign(p.size(), 0.0f);
    if (v.empty()) v.assign(p.size(), 0.0f);
    float wd = decay_exempt(name) ? 0.0f : weight_decay;
    for (size_t i = 0; i < p.size(); ++i) {
      m[i] = beta1 * m[i] + (1.0f - beta1) * g[i];
      v[i] = beta2 * v[i] + (1.0f - beta2) * g[i] * g[i];
      float mhat = m[i] / bias1;
      float vhat = v[i] / bias2;
      p[i] -= lr * (mhat / (std::sqrt(vhat) + eps) + wd * p[i]);
    }
  }
}

// ---------------------------------------------------------------------------
// Stage plumbing.

inline bool stage_trains_param(int stage, const std::string& name) {
  if (stage == 1) return name.rfind("branch.", 0) == 0;
  return name.rfind("lora.", 0) == 0;
}

// Structural freeze: only the stage's parameter set requires gradients,
// and only that set is handed to the optimizer.
inline std::vector<std::string> apply_stage_freeze(ModelParams& mp, int stage) {
  std::vector<std::string> trainable;
  for (auto& [name, t] : mp.store.params) {
    bool on = stage_trains_param(stage, name);
    t.set_requires_grad(on);
    if (on) trainable.push_back(name);
  }
  if (trainable.empty()) fail("no trainable parameters for stage " + std::to_string(stage));
  return trainable;
}

// Reference keep/drop decision for (seed, step, slot); factored out so the
// bookkeeping is reproducible outside the training loop.
inline bool reference_kept(uint64_t seed, int64_t step, int slot, float keep_prob) {
  Rng rng(mix_seed(seed, 0xd30full, static_cast<uint64_t>(step), static_cast<uint64_t>(slot)));
  return rng.bernoulli(keep_prob);
}

struct StepLog {
  int64_t step = 0;
  float loss = 0.0f;
  float lr = 0.0f;
};
using LogSink = std::function<void(const StepLog&)>;

inline LogSink log_to_stream(std::ostream& os) {
  return [&os](const StepLog& s) { os << s.step << '\t' << s.loss << '\t' << s.lr << '\n'; };
}

namespace detail {

inline LatentBundle make_training_bundle(const EncodedSample& sample, const TrainConfig& cfg,
                                         int64_t step, int slot, Rng& rng) {
  LatentBundle bundle;
  bundle.class_id = sample.class_id;
  bundle.z_tgt = sample.z_tgt;
  bundle.z_f = sample.z_f;
  bundle.z_m = sample.z_m;
  bundle.h = sample.h;
  bundle.w = sample.w;
  if (cfg.stage == 2 && reference_kept(cfg.seed, step, slot, cfg.ref_keep_prob)) {
    LatentGrid ref = sample.ref_grid;
    if (cfg.shift_range > 0) {
      int dy = rng.uniform_int(-cfg.shift_range, cfg.shift_range);
      int dx = rng.uniform_int(-cfg.shift_range, cfg.shift_range);
      ref = shift_latent(ref, dy, dx);
    }
    if (rng.bernoulli(0.5)) {
      int hc = rng.uniform_int(3 * ref.h / 4, ref.h);
      int wc = rng.uniform_int(3 * ref.w / 4, ref.w);
      int i0 = rng.uniform_int(0, ref.h - hc);
      int j0 = rng.uniform_int(0, ref.w - wc);
      ref = crop_latent(ref, i0, j0, hc, wc);
    }
    bundle.z_ref = ref.tokens();
    bundle.h_r = ref.h;
    bundle.w_r = ref.w;
  }
  return bundle;
}

struct SlotResult {
  float loss = 0.0f;
  GradMapT<float> grads;
};

inline SlotResult run_slot(const ModelParams& mp, const EncodedSample& sample, const TrainConfig& cfg,
                           int64_t step, int slot) {
  Rng rng(mix_seed(cfg.seed, 0xa6e17ull, static_cast<uint64_t>(step), static_cast<uint64_t>(slot)));
  LatentBundle bundle = make_training_bundle(sample, cfg, step, slot, rng);
  float t = static_cast<float>(rng.uniform());
  std::vector<float> noise(bundle.z_tgt.data().size());
  for (float& x : noise) x = static_cast<float>(rng.normal());
  Tensor eps = Tensor::from(bundle.z_tgt.shape(), std::move(noise));
  Tensor loss = sample_flow_loss(mp, bundle, t, eps);
  SlotResult result;
  result.loss = loss.item();
  result.grads = backward(loss);
  return result;
}

}  // namespace detail

// One optimization step over a drawn batch. Exposed so tests can step the
// trainer without running a whole schedule.
inline float training_step(ModelParams& mp, const std::vector<EncodedSample>& data,
                           const TrainConfig& cfg, int64_t step, AdamMoments& moments,
                           const std::vector<std::string>& trainable, float lr) {
  Rng batch_rng(mix_seed(cfg.seed, 0xba7c4ull, static_cast<uint64_t>(step)));
  std::vector<int> indices(static_cast<size_t>(cfg.batch_size));
  for (int& idx : indices) idx = batch_rng.uniform_int(static_cast<int>(data.size()));

  std::vector<detail::SlotResult> results(indices.size());
  unsigned workers = std::min<unsigned>(std::max(1u, std::thread::hardware_concurrency()),
                                        static_cast<unsigned>(indices.size()));
  std::vector<std::string> worker_errors(workers);
  {
    std::vector<std::thread> pool;
    for (unsigned wk = 0; wk < workers; ++wk) {
      pool.emplace_back([&, wk]() {
        try {
          for (size_t s = wk; s < indices.size(); s += workers)
            results[s] = detail::run_slot(mp, data[static_cast<size_t>(indices[s])], cfg, step,
                                          static_cast<int>(s));
        } catch (const std::exception& e) {
          worker_errors[wk] = e.what();
        }
      });
    }
    for (auto& th : pool) th.join();
  }
  for (const std::string& err : worker_errors) {
    if (!err.empty())
      fail("step " + std::to_string(step) + " aborted (batch seed " +
           std::to_string(mix_seed(cfg.seed, 0xba7c4ull, static_cast<uint64_t>(step))) + "): " + err);
  }

  // fold gradients in slot order, then average
  std::map<std::string, Tensor> grads;
  float loss_sum = 0.0f;
  for (size_t s = 0; s < results.size(); ++s) {
    loss_sum += results[s].loss;
    for (const std::string& name : trainable) {
      auto it = results[s].grads.named.find(name);
      if (it == results[s].grads.named.end()) fail("missing gradient for " + name);
      auto into = grads.find(name);
      if (into == grads.end()) {
        grads.emplace(name, Tensor::from(it->second.shape(), it->second.data()));
      } else {
        std::vector<float>& acc = into->second.raw_data();
        const std::vector<float>& g = it->second.data();
        for (size_t i = 0; i < acc.size(); ++i) acc[i] += g[i];
      }
    }
  }
  float inv_b = 1.0f / static_cast<float>(cfg.batch_size);
  for (auto& [name, g] : grads)
    for (float& x : g.raw_data()) x *= inv_b;

  adam_step(mp.store, grads, moments, step, lr, trainable);
  return loss_sum * inv_b;
}

inline float stage_lr(const TrainConfig& cfg, int64_t step) {
  if (cfg.stage == 1) return cfg.learning_rate;  // constant schedule
  // cosine annealing from the peak to zero across the schedule
  return cfg.learning_rate * 0.5f *
         (1.0f + std::cos(3.14159265358979323846f * static_cast<float>(step) /
                          static_cast<float>(cfg.steps)));
}

namespace detail {

inline Checkpoint run_schedule(ModelParams& mp, const std::vector<EncodedSample>& data,
                               const TrainConfig& cfg, int64_t start_step, AdamMoments moments,
                               const LogSink& log) {
  std::vector<std::string> trainable = apply_stage_freeze(mp, cfg.stage);
  for (int64_t step = start_step; step < cfg.steps; ++step) {
    float lr = stage_lr(cfg, step);
    float loss = training_step(mp, data, cfg, step, moments, trainable, lr);
    if (log) log({step, loss, lr});
  }
  Checkpoint ckpt = checkpoint_from_model(mp, cfg.stage, cfg.steps, cfg.seed);
  ckpt.opt_m = std::move(moments.m);
  ckpt.opt_v = std::move(moments.v);
  return ckpt;
}

}  // namespace detail

// Stage 1: text-driven inpainting; only control-branch parameters move.
// `init` may be a stage-1 checkpoint to resume; a stage-2 checkpoint is
// rejected.
inline Checkpoint train_stage1(const std::vector<Sample>& dataset, const TrainConfig& cfg,
                               std::optional<Checkpoint> init = std::nullopt,
                               uint64_t model_seed = 0, const LogSink& log = nullptr) {
  if (cfg.stage != 1) fail("train_stage1: config stage is " + std::to_string(cfg.stage));
  ModelParams mp;
  int64_t start_step = 0;
  AdamMoments moments;
  if (init) {
    if (init->stage != 1)
      fail("train_stage1: a stage-" + std::to_string(init->stage) +
           " checkpoint cannot seed stage-1 training");
    mp = checkpoint_model(*init);
    start_step = init->step;
    moments.m = init->opt_m;
    moments.v = init->opt_v;
  } else {
    DiTConfig model_cfg;
    mp = init_model<float>(model_cfg, model_seed);
  }
  std::vector<EncodedSample> data = encode_dataset(dataset, mp.config.patch_factor);
  return detail::run_schedule(mp, data, cfg, start_step, std::move(moments), log);
}

// Stage 2: freeze backbone and branch, train adapters only. Accepts a
// stage-1 checkpoint (fresh adapters) or a stage-2 checkpoint (resume).
inline Checkpoint train_stage2(const std::vector<Sample>& dataset, const TrainConfig& cfg,
                               const Checkpoint& init, const LogSink& log = nullptr) {
  if (cfg.stage != 2) fail("train_stage2: config stage is " + std::to_string(cfg.stage));
  std::vector<EncodedSample> data = encode_dataset(dataset, init.config.patch_factor);
  ModelParams mp = checkpoint_model(init);
  int64_t start_step = 0;
  AdamMoments moments;
  if (init.stage == 1) {
    lora_wrap(mp, mix_seed(cfg.seed, 0x42ull));
  } else if (init.stage == 2) {
    if (!mp.lora_wrapped) fail("train_stage2: stage-2 checkpoint carries no adapters");
    start_step = init.step;
    moments.m = init.opt_m;
    moments.v = init.opt_v;
  } else {
    fail("train_stage2: unsupported checkpoint stage " + std::to_string(init.stage));
  }
  return detail::run_schedule(mp, data, cfg, start_step, std::move(moments), log);
}

}  // namespace backdrop

#endif  // BACKDROP_TRAINER_HPP
