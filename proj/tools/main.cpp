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

// Command-line entry point: dataset generation, two-stage training,
// sampling, scale sweeps, evaluation, and checkpoint inspection.
//
// Exit codes: 0 success, 1 usage error, 2 runtime error.

#include <CLI11.hpp>

#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "backdrop/checkpoint.hpp"
#include "backdrop/evalmetrics.hpp"
#include "backdrop/image_io.hpp"
#include "backdrop/sampler.hpp"
#include "backdrop/synth.hpp"
#include "backdrop/trainer.hpp"

namespace fs = std::filesystem;
using namespace backdrop;

namespace {

std::vector<float> parse_value_list(const std::string& csv) {
  std::vector<float> values;
  std::stringstream ss(csv);
  std::string item;
  while (std::getline(ss, item, ',')) {
    if (item.empty()) continue;
    try {
      values.push_back(std::stof(item));
    } catch (const std::exception&) {
      fail("bad value in list: '" + item + "'");
    }
  }
  return values;
}

int run_gen_data(int n, const std::string& out_dir, uint64_t seed) {
  auto manifest = write_dataset(n, out_dir, seed);
  std::cout << "wrote " << manifest.size() << " records to " << out_dir << "\n";
  return 0;
}

int run_train(int stage, const std::string& data_dir, const std::string& config_path,
              const std::string& out_path, const std::string& init_path, const std::string& log_path) {
  TrainConfig cfg = load_train_config(config_path);
  if (cfg.stage != stage)
    fail("config stage " + std::to_string(cfg.stage) + " disagrees with --stage " + std::to_string(stage));

  std::vector<Sample> dataset = load_dataset(data_dir);
  std::ofstream log_file;
  std::ostream* log_os = &std::cout;
  if (!log_path.empty()) {
    log_file.open(log_path);
    if (!log_file) fail("cannot write log " + log_path);
    log_os = &log_file;
  }
  LogSink sink = log_to_stream(*log_os);

  Checkpoint result;
  if (stage == 1) {
    std::optional<Checkpoint> init;
    if (!init_path.empty()) init = load_checkpoint(init_path);
    result = train_stage1(dataset, cfg, init, cfg.seed, sink);
  } else {
    if (init_path.empty()) fail("stage-2 training needs --init with a stage-1 checkpoint");
    result = train_stage2(dataset, cfg, load_checkpoint(init_path), sink);
  }
  save_checkpoint(result, out_path);
  std::cout << "saved stage-" << result.stage << " checkpoint (" << result.step << " steps) to "
            << out_path << "\n";
  return 0;
}

SampleRequest build_request(const std::string& foreground, const std::string& mask, int class_id,
                            const std::string& ref, int steps, float lora_scale, float attn_scale,
                            uint64_t seed) {
  SampleRequest req;
  req.foreground = read_png_image(foreground);
  req.mask = read_png_mask(mask);
  req.prompt_class = class_id;
  if (!ref.empty()) req.reference = read_png_image(ref);
  req.steps = steps;
  req.lora_scale = lora_scale;
  req.attn_scale = attn_scale;
  req.seed = seed;
  return req;
}

int run_sample(const std::string& ckpt_path, const SampleRequest& req, const std::string& out_path) {
  Checkpoint ckpt = load_checkpoint(ckpt_path);
  ImageRaster img = generate(req, ckpt);
  write_png(out_path, img);
  std::cout << "wrote " << out_path << "\n";
  return 0;
}

int run_sweep(const std::string& ckpt_path, const std::string& axis, const std::string& values_csv,
              const SampleRequest& req, const std::string& out_dir) {
  std::vector<float> values = parse_value_list(values_csv);
  SweepAxis sweep_axis;
  if (axis == "lora") sweep_axis = SweepAxis::kLora;
  else if (axis == "attention") sweep_axis = SweepAxis::kAttention;
  else fail("unknown sweep axis '" + axis + "' (expected lora or attention)");

  Checkpoint ckpt = load_checkpoint(ckpt_path);
  std::vector<ImageRaster> images = sweep(req, ckpt, sweep_axis, values);
  fs::create_directories(out_dir);

  std::ostringstream table;
  table << "value\treference_similarity\n";
  MaskImage exclude = req.mask;  // compare backgrounds outside the product
  for (size_t i = 0; i < images.size(); ++i) {
    std::ostringstream name;
    name << "sweep_" << axis << "_" << values[i] << ".png";
    write_png((fs::path(out_dir) / name.str()).string(), images[i]);
    double sim = reference_similarity(images[i], *req.reference, exclude);
    table << values[i] << '\t' << sim << '\n';
  }
  std::ofstream table_file(fs::path(out_dir) / "similarity.tsv");
  table_file << table.str();
  std::cout << table.str();
  std::cout << "wrote " << images.size() << " images to " << out_dir << "\n";
  return 0;
}

int run_eval(const std::string& ckpt_path, const std::string& data_dir, const std::string& mode_name,
             const std::string& sweep_csv, int n, int steps, uint64_t seed,
             const std::string& report_path, const std::string& machine_path) {
  EvalMode mode;
  if (mode_name == "t2i") mode = EvalMode::kT2I;
  else if (mode_name == "tr2i") mode = EvalMode::kTR2I;
  else fail("unknown mode '" + mode_name + "' (expected t2i or tr2i)");

  Checkpoint ckpt = load_checkpoint(ckpt_path);
  std::vector<Sample> samples = load_dataset(data_dir);
  if (n > 0 && n < static_cast<int>(samples.size())) samples.resize(static_cast<size_t>(n));
  std::vector<float> sweep_values = parse_value_list(sweep_csv);

  EvalReport report = run_benchmark(ckpt, samples, mode, sweep_values, steps, seed);

  if (report_path.empty()) {
    write_report(report, std::cout);
  } else {
    std::ofstream report_file(report_path);
    if (!report_file) fail("cannot write report " + report_path);
    write_report(report, report_file);
    std::cout << "wrote report to " << report_path << "\n";
  }
  if (!machine_path.empty()) {
    std::ofstream machine_file(machine_path);
    if (!machine_file) fail("cannot write " + machine_path);
    std::ostringstream devnull;
    write_report(report, devnull, &machine_file);
  }
  return 0;
}

int run_inspect(const std::string& ckpt_path) {
  Checkpoint ckpt = load_checkpoint(ckpt_path);
  std::cout << "format version  " << ckpt.version << "\n";
  std::cout << "stage           " << ckpt.stage << "\n";
  std::cout << "steps           " << ckpt.step << "\n";
  std::cout << "train seed      " << ckpt.train_seed << "\n";
  const DiTConfig& c = ckpt.config;
  std::cout << "model           depth=" << c.depth << " dim=" << c.model_dim << " heads=" << c.heads
            << " prompt_len=" << c.prompt_len << " patch=" << c.patch_factor
            << " branch_depth=" << c.branch_depth << " lora_rank=" << c.lora_rank << "\n";
  std::cout << "integration     " << (c.integration == Integration::kBranch ? "branch" : "concat")
            << "\n";
  int64_t total = 0;
  for (const auto& [name, t] : ckpt.params.params) total += t.size();
  std::cout << "tensors         " << ckpt.params.params.size() << " (" << total << " values)\n";
  std::cout << "optimizer       " << ckpt.opt_m.size() << " moment pairs\n";
  for (const auto& [name, t] : ckpt.params.params)
    std::cout << "  " << name << "  " << shape_str(t.shape()) << "\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"toy diffusion-transformer background inpainting testbed"};
  app.require_subcommand(1);

  // gen-data
  auto* gen = app.add_subcommand("gen-data", "generate a procedural dataset");
  int gen_n = 0;
  std::string gen_out;
  uint64_t gen_seed = 0;
  gen->add_option("--n", gen_n, "number of records")->required();
  gen->add_option("--out", gen_out, "output directory")->required();
  gen->add_option("--seed", gen_seed, "dataset seed");

  // train
  auto* train = app.add_subcommand("train", "run one training stage");
  int train_stage = 0;
  std::string train_data, train_config, train_out, train_init, train_log;
  train->add_option("--stage", train_stage, "training stage (1 or 2)")->required()->check(CLI::Range(1, 2));
  train->add_option("--data", train_data, "dataset directory")->required();
  train->add_option("--config", train_config, "training config file")->required();
  train->add_option("--out", train_out, "output checkpoint path")->required();
  train->add_option("--init", train_init, "initial checkpoint (required for stage 2)");
  train->add_option("--log", train_log, "step log file (default: stdout)");

  // sample
  auto* sample = app.add_subcommand("sample", "generate one image");
  std::string s_ckpt, s_fg, s_mask, s_ref, s_out;
  int s_class = 0, s_steps = 50;
  float s_lora = 1.0f, s_attn = 1.0f;
  uint64_t s_seed = 0;
  sample->add_option("--ckpt", s_ckpt, "checkpoint path")->required();
  sample->add_option("--foreground", s_fg, "foreground image (product on gray)")->required();
  sample->add_option("--mask", s_mask, "binary product mask")->required();
  sample->add_option("--class", s_class, "background class id")
      ->required()
      ->check(CLI::Range(0, kNumPromptClasses - 1));
  sample->add_option("--ref", s_ref, "reference background image");
  sample->add_option("--steps", s_steps, "denoising steps");
  sample->add_option("--lora-scale", s_lora, "adapter output scale");
  sample->add_option("--attn-scale", s_attn, "reference attention scale");
  sample->add_option("--seed", s_seed, "noise seed");
  sample->add_option("--out", s_out, "output image path")->required();

  // sweep
  auto* sweep_cmd = app.add_subcommand("sweep", "sweep a control scale");
  std::string w_ckpt, w_axis, w_values, w_fg, w_mask, w_ref, w_outdir;
  int w_class = 0, w_steps = 50;
  uint64_t w_seed = 0;
  sweep_cmd->add_option("--ckpt", w_ckpt, "checkpoint path")->required();
  sweep_cmd->add_option("--axis", w_axis, "lora or attention")->required();
  sweep_cmd->add_option("--values", w_values, "comma-separated scale values")->required();
  sweep_cmd->add_option("--foreground", w_fg, "foreground image (product on gray)")->required();
  sweep_cmd->add_option("--mask", w_mask, "binary product mask")->required();
  sweep_cmd->add_option("--class", w_class, "background class id")
      ->required()
      ->check(CLI::Range(0, kNumPromptClasses - 1));
  sweep_cmd->add_option("--ref", w_ref, "reference background image")->required();
  sweep_cmd->add_option("--steps", w_steps, "denoising steps");
  sweep_cmd->add_option("--seed", w_seed, "noise seed");
  sweep_cmd->add_option("--out-dir", w_outdir, "output directory")->required();

  // eval
  auto* eval_cmd = app.add_subcommand("eval", "run the benchmark");
  std::string e_ckpt, e_data, e_mode = "t2i", e_sweep, e_report, e_machine;
  int e_n = 0, e_steps = 50;
  uint64_t e_seed = 1234;
  eval_cmd->add_option("--ckpt", e_ckpt, "checkpoint path")->required();
  eval_cmd->add_option("--data", e_data, "evaluation dataset directory")->required();
  eval_cmd->add_option("--mode", e_mode, "t2i or tr2i");
  eval_cmd->add_option("--sweep", e_sweep, "attention-scale sweep values (tr2i mode)");
  eval_cmd->add_option("--n", e_n, "evaluate only the first n records");
  eval_cmd->add_option("--steps", e_steps, "denoising steps");
  eval_cmd->add_option("--seed", e_seed, "evaluation seed");
  eval_cmd->add_option("--report", e_report, "text report path (default: stdout)");
  eval_cmd->add_option("--machine", e_machine, "machine-readable report path");

  // inspect
  auto* inspect = app.add_subcommand("inspect", "describe a checkpoint");
  std::string i_ckpt;
  inspect->add_option("--ckpt", i_ckpt, "checkpoint path")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);  // prints help, exits 0
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 1;
  }

  try {
    if (gen->parsed()) return run_gen_data(gen_n, gen_out, gen_seed);
    if (train->parsed())
      return run_train(train_stage, train_data, train_config, train_out, train_init, train_log);
    if (sample->parsed())
      return run_sample(s_ckpt, build_request(s_fg, s_mask, s_class, s_ref, s_steps, s_lora, s_attn, s_seed),
                        s_out);
    if (sweep_cmd->parsed())
      return run_sweep(w_ckpt, w_axis, w_values,
                       build_request(w_fg, w_mask, w_class, w_ref, w_steps, 1.0f, 1.0f, w_seed), w_outdir);
    if (eval_cmd->parsed())
      return run_eval(e_ckpt, e_data, e_mode, e_sweep, e_n, e_steps, e_seed, e_report, e_machine);
    if (inspect->parsed()) return run_inspect(i_ckpt);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }
  return 0;
}
