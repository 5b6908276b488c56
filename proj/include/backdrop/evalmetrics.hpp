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

// Quantitative evaluation: shape consistency of the generated product
// against the true mask, foreground fidelity, background similarity to a
// reference under coarse color statistics, a rule-based prompt-class
// probe, and the benchmark harness that aggregates them.

#ifndef BACKDROP_EVALMETRICS_HPP
#define BACKDROP_EVALMETRICS_HPP

#include <cmath>
#include <iomanip>
#include <optional>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include "backdrop/sampler.hpp"
#include "backdrop/synth.hpp"

namespace backdrop {

// 1 - (generated-mask pixels outside the true mask) / (true-mask pixels).
// Counts only extraneous pixels, so an empty generated mask scores 1.0
// and wildly oversized generations can go negative; applied literally.
inline double object_consistency(const MaskImage& gen, const MaskImage& gt) {
  if (gen.height != gt.height || gen.width != gt.width)
    fail("object_consistency: mask extents differ");
  int64_t gt_area = gt.area();
  if (gt_area == 0) fail("object_consistency: empty ground-truth mask");
  int64_t outside = 0;
  for (size_t i = 0; i < gen.values.size(); ++i)
    if (gen.values[i] && !gt.values[i]) ++outside;
  return 1.0 - static_cast<double>(outside) / static_cast<double>(gt_area);
}

// Color-distance segmentation: a pixel belongs to the product iff its RGB
// distance to the product color is below 0.15. The palette guarantees the
// backgrounds stay far outside this ball.
inline MaskImage segment_product(const ImageRaster& image, const Rgb& color) {
  MaskImage mask(image.height, image.width);
  for (int y = 0; y < image.height; ++y) {
    for (int x = 0; x < image.width; ++x) {
      float d2 = 0;
      for (int c = 0; c < 3; ++c) {
        float d = image.at(y, x, c) - color[static_cast<size_t>(c)];
        d2 += d * d;
      }
      mask.at(y, x) = d2 < 0.15f * 0.15f ? 1 : 0;
    }
  }
  return mask;
}

namespace detail {

// 4x4 block-mean RGB grid plus 8-bin per-channel histograms, computed
// over non-excluded pixels only.
inline std::vector<double> background_features(const ImageRaster& img, const MaskImage& exclude) {
  if (exclude.height != img.height || exclude.width != img.width)
    fail("background_features: exclusion extents differ");
  std::vector<double> block_sum(4 * 4 * 3, 0.0);
  std::vector<double> block_cnt(4 * 4, 0.0);
  std::vector<double> hist(3 * 8, 0.0);
  int64_t included = 0;
  for (int y = 0; y < img.height; ++y) {
    int by = std::min(3, 4 * y / img.height);
    for (int x = 0; x < img.width; ++x) {
      if (exclude.at(y, x)) continue;
      int bx = std::min(3, 4 * x / img.width);
      int block = by * 4 + bx;
      block_cnt[static_cast<size_t>(block)] += 1.0;
      ++included;
      for (int c = 0; c < 3; ++c) {
        float v = img.at(y, x, c);
        block_sum[static_cast<size_t>(block * 3 + c)] += v;
        int bin = std::min(7, static_cast<int>(v * 8.0f));
        hist[static_cast<size_t>(c * 8 + bin)] += 1.0;
      }
    }
  }
  if (included == 0) fail("background_features: exclusion covers the whole image");
  std::vector<double> features;
  features.reserve(48 + 24);
  for (int b = 0; b < 16; ++b)
    for (int c = 0; c < 3; ++c)
      features.push_back(block_cnt[static_cast<size_t>(b)] > 0
                             ? block_sum[static_cast<size_t>(b * 3 + c)] / block_cnt[static_cast<size_t>(b)]
                             : 0.0);
  for (double h : hist) features.push_back(h / static_cast<double>(included));
  return features;
}

inline double cosine(const std::vector<double>& a, const std::vector<double>& b) {
  double dot = 0, na = 0, nb = 0;
  for (size_t i = 0; i < a.size(); ++i) {
    dot += a[i] * b[i];
    na += a[i] * a[i];
    nb += b[i] * b[i];
  }
  if (na == 0 || nb == 0) fail("cosine: zero feature vector");
  return dot / (std::sqrt(na) * std::sqrt(nb));
}

}  // namespace detail

// Cosine similarity of coarse color statistics between two images,
// ignoring the excluded region in both.
inline double reference_similarity(const ImageRaster& gen, const ImageRaster& ref,
                                   const MaskImage& exclude) {
  if (gen.height != ref.height || gen.width != ref.width)
    fail("reference_similarity: image extents differ");
  return detail::cosine(detail::background_features(gen, exclude),
                        detail::background_features(ref, exclude));
}

inline MaskImage empty_exclusion(int h, int w) { return MaskImage(h, w, 0); }

// Nearest-class decision against the canonical rendering of each
// background class; ties break toward the lowest class id.
inline int classify_background(const ImageRaster& gen, const MaskImage& exclude) {
  int best = 0;
  double best_sim = -2.0;
  for (int c = 0; c < kNumPromptClasses; ++c) {
    ImageRaster canon = canonical_rendering(c, gen.height);
    double sim = reference_similarity(gen, canon, exclude);
    if (sim > best_sim) {
      best_sim = sim;
      best = c;
    }
  }
  return best;
}

// 1 iff the generated background classifies as the labeled class. The
// exclusion masks out the product region when one is known.
inline int prompt_accuracy(const ImageRaster& gen, int label, const MaskImage* exclude = nullptr) {
  MaskImage none = empty_exclusion(gen.height, gen.width);
  return classify_background(gen, exclude ? *exclude : none) == label ? 1 : 0;
}

// ---------------------------------------------------------------------------
// Benchmark harness.

enum class EvalMode : int { kT2I = 0, kTR2I = 1 };

struct SweepPoint {
  float value = 1.0f;
  double mean_similarity = 0.0;
};

struct EvalReport {
  EvalMode mode = EvalMode::kT2I;
  int sample_count = 0;
  std::vector<double> object_consistency_per_sample;
  double object_consistency_mean = 0.0;
  double foreground_psnr_db = 0.0;
  double prompt_class_accuracy = 0.0;
  std::vector<SweepPoint> attention_sweep;  // present only in TR2I mode
  std::string footer =
      "note: object consistency counts only generated-product pixels outside the true mask; "
      "an empty generated mask scores 1.0";
};

// Generates one image per sample (plus one per sweep value in TR2I mode)
// and aggregates all metrics. Sample i uses seed mix(seed, i).
inline EvalReport run_benchmark(const Checkpoint& ckpt, const std::vector<Sample>& eval_set,
                                EvalMode mode, std::vector<float> sweep_values = {}, int steps = 50,
                                uint64_t seed = 1234) {
  if (eval_set.empty()) fail("run_benchmark: empty evaluation set");
  if (mode == EvalMode::kTR2I && ckpt.stage < 2)
    fail("run_benchmark: reference mode needs a stage-2 checkpoint");
  if (mode == EvalMode::kT2I) sweep_values.clear();
  if (mode == EvalMode::kTR2I && sweep_values.empty()) sweep_values = {1.0f};

  EvalReport report;
  report.mode = mode;
  report.sample_count = static_cast<int>(eval_set.size());
  report.object_consistency_per_sample.resize(eval_set.size());
  std::vector<double> psnr(eval_set.size());
  std::vector<int> correct(eval_set.size());
  std::vector<std::vector<double>> sims(sweep_values.size(),
                                        std::vector<double>(eval_set.size(), 0.0));

  auto eval_one = [&](size_t i) {
    const Sample& s = eval_set[i];
    SampleRequest req;
    req.foreground = s.foreground;
    req.mask = s.mask;
    req.prompt_class = s.prompt_class;
    req.steps = steps;
    req.seed = mix_seed(seed, static_cast<uint64_t>(i));
    if (mode == EvalMode::kTR2I) req.reference = s.reference;

    ImageRaster gen = generate(req, ckpt);
    MaskImage excl = exclusion_region(s);
    report.object_consistency_per_sample[i] =
        object_consistency(segment_product(gen, s.product_color), s.mask);
    psnr[i] = psnr_over_mask(gen, s.target, s.mask);
    correct[i] = prompt_accuracy(gen, s.prompt_class, &excl);

    for (size_t v = 0; v < sweep_values.size(); ++v) {
      SampleRequest sr = req;
      sr.attn_scale = sweep_values[v];
      ImageRaster swept = sweep_values[v] == 1.0f ? gen : generate(sr, ckpt);
      sims[v][i] = reference_similarity(swept, s.reference, excl);
    }
  };

  unsigned workers = std::min<unsigned>(std::max(1u, std::thread::hardware_concurrency()),
                                        static_cast<unsigned>(eval_set.size()));
  std::vector<std::string> errors(workers);
  {
    std::vector<std::thread> pool;
    for (unsigned wk = 0; wk < workers; ++wk) {
      pool.emplace_back([&, wk]() {
        try {
          for (size_t i = wk; i < eval_set.size(); i += workers) eval_one(i);
        } catch (const std::exception& e) {
          errors[wk] = e.what();
        }
      });
    }
    for (auto& th : pool) th.join();
  }
  for (const std::string& err : errors)
    if (!err.empty()) fail("run_benchmark: " + err);

  double oc = 0, ps = 0, acc = 0;
  for (size_t i = 0; i < eval_set.size(); ++i) {
    oc += report.object_consistency_per_sample[i];
    ps += psnr[i];
    acc += correct[i];
  }
  double n = static_cast<double>(eval_set.size());
  report.object_consistency_mean = oc / n;
  report.foreground_psnr_db = ps / n;
  report.prompt_class_accuracy = acc / n;
  for (size_t v = 0; v < sweep_values.size(); ++v) {
    double total = 0;
    for (double s : sims[v]) total += s;
    report.attention_sweep.push_back({sweep_values[v], total / n});
  }
  return report;
}

inline void write_report(const EvalReport& report, std::ostream& text, std::ostream* machine = nullptr) {
  text << std::fixed << std::setprecision(4);
  text << "samples                  " << report.sample_count << "\n";
  text << "object_consistency_mean  " << report.object_consistency_mean << "\n";
  text << "foreground_psnr_db       " << report.foreground_psnr_db << "\n";
  text << "prompt_class_accuracy    " << report.prompt_class_accuracy << "\n";
  if (report.mode == EvalMode::kTR2I) {
    for (const SweepPoint& p : report.attention_sweep)
      text << "reference_similarity s_A=" << std::setprecision(2) << p.value << std::setprecision(4)
           << "  " << p.mean_similarity << "\n";
  }
  text << report.footer << "\n";
  if (machine) {
    *machine << std::setprecision(10);
    *machine << "samples\t" << report.sample_count << "\n";
    *machine << "object_consistency_mean\t" << report.object_consistency_mean << "\n";
    *machine << "foreground_psnr_db\t" << report.foreground_psnr_db << "\n";
    *machine << "prompt_class_accuracy\t" << report.prompt_class_accuracy << "\n";
    for (const SweepPoint& p : report.attention_sweep)
      *machine << "reference_similarity@" << p.value << "\t" << p.mean_similarity << "\n";
  }
}

}  // namespace backdrop

#endif  // BACKDROP_EVALMETRICS_HPP
