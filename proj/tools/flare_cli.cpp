// Copyright 2026 The flare Authors
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

// flare: data generation, training, evaluation and ablations.

#include "flare/datagen.hpp"
#include "flare/evaluation.hpp"
#include "flare/trainer.hpp"

#include <CLI11.hpp>
#include <torch/torch.h>

#include <chrono>
#include <fstream>
#include <iostream>
#include <sstream>

namespace fs = std::filesystem;
using namespace flare;

namespace {

std::vector<std::string> split(const std::string& s) {
  std::vector<std::string> out;
  std::stringstream ss(s);
  for (std::string item; std::getline(ss, item, ',');) {
    if (!item.empty()) out.push_back(item);
  }
  return out;
}

std::vector<datagen::Dataset> read_all(const std::vector<std::string>& paths) {
  std::vector<datagen::Dataset> out;
  for (const auto& p : paths) out.push_back(datagen::read_dataset(p));
  return out;
}

std::function<void(const StepMetrics&)> progress(int total, int every) {
  auto start = std::chrono::steady_clock::now();
  return [=](const StepMetrics& m) {
    if ((m.step + 1) % every != 0 && m.step + 1 != total) return;
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    std::fprintf(stderr, "step %lld/%d  fm %.4f  align %.4f  lr %.2e  %.0fs\n", static_cast<long long>(m.step + 1),
                 total, m.fm_loss, m.align_loss, m.lr, secs);
  };
}

void print_report(const EvalReport& r) {
  for (const auto& c : r.checkpoints) {
    std::printf("%-28s step %7lld  success %.3f", c.label.c_str(), static_cast<long long>(c.step), c.aggregate);
    for (const auto& [id, rate] : c.per_task) std::printf("  t%d=%.2f", id, rate);
    std::printf("\n");
  }
  std::printf("selected score %.3f (step %lld)\n", r.selected_score,
              static_cast<long long>(r.checkpoints[r.selected_index].step));
}

}  // namespace

int main(int argc, char** argv) {
  torch::set_num_threads(1);
  CLI::App app{"flare: future latent alignment for flow-matching policies"};
  app.require_subcommand(1);

  // datagen
  auto* gen = app.add_subcommand("datagen", "Generate scripted-expert demonstrations");
  int n_tasks = 4;
  std::string task_ids;
  int demos = 25;
  bool action_free = false;
  std::uint64_t seed = 0;
  std::uint64_t suite_seed = 0;
  std::string out;
  gen->add_option("--tasks", n_tasks, "Suite size, drawn by --suite-seed");
  gen->add_option("--task-ids", task_ids, "Explicit comma-separated task ids (overrides --tasks)");
  gen->add_option("--demos", demos, "Demonstrations per task");
  gen->add_flag("--action-free", action_free, "Drop action labels");
  gen->add_option("--seed", seed, "Episode seed");
  gen->add_option("--suite-seed", suite_seed, "Seed of the task suite draw");
  gen->add_option("--out", out, "Output dataset file")->required();

  // pretrain-embedding
  auto* pre = app.add_subcommand("pretrain-embedding", "Pretrain the VL embedding with the flow-matching loss");
  std::string config;
  std::string data;
  std::string out_dir;
  pre->add_option("--config", config)->required()->check(CLI::ExistingFile);
  pre->add_option("--data", data)->required()->check(CLI::ExistingFile);
  pre->add_option("--out", out_dir, "Output directory")->required();

  // train
  auto* train = app.add_subcommand("train", "Train a policy (FLARE or policy-only)");
  std::vector<std::string> train_data;
  std::string af_data;
  std::string init_embedding;
  std::string resume;
  train->add_option("--config", config)->required()->check(CLI::ExistingFile);
  train->add_option("--data", train_data, "Labeled dataset(s)")->required()->check(CLI::ExistingFile);
  train->add_option("--action-free-data", af_data)->check(CLI::ExistingFile);
  train->add_option("--init-embedding", init_embedding, "Pretrained embedding file")->check(CLI::ExistingFile);
  train->add_option("--resume", resume, "Checkpoint to resume from")->check(CLI::ExistingFile);
  train->add_option("--out", out_dir, "Run directory")->required();

  // eval
  auto* ev = app.add_subcommand("eval", "Evaluate checkpoints with receding-horizon rollouts");
  std::string ckpt_dir;
  std::string suite_spec;
  int episodes = 50;
  int last = 0;
  std::string report_path;
  std::string plot_dir;
  ev->add_option("--ckpt-dir", ckpt_dir)->required()->check(CLI::ExistingDirectory);
  ev->add_option("--suite", suite_spec, "Comma-separated task ids; default is the training suite");
  ev->add_option("--episodes", episodes, "Episodes per task");
  ev->add_option("--seed", seed);
  ev->add_option("--last", last, "Evaluate only the last N checkpoints (0: all)");
  ev->add_option("--report", report_path, "Report file (default <ckpt-dir>/eval_report.json)");
  ev->add_option("--plots", plot_dir, "Directory for charts");

  // ablate
  auto* ab = app.add_subcommand("ablate", "Train and evaluate one run per axis value");
  std::string axis;
  std::string values;
  ab->add_option("--axis", axis, "lambda | L_tap | ema_rho | target_embedding")->required();
  ab->add_option("--values", values, "Comma-separated values")->required();
  ab->add_option("--config", config)->required()->check(CLI::ExistingFile);
  ab->add_option("--data", train_data)->required()->check(CLI::ExistingFile);
  ab->add_option("--action-free-data", af_data)->check(CLI::ExistingFile);
  ab->add_option("--init-embedding", init_embedding)->check(CLI::ExistingFile);
  ab->add_option("--suite", suite_spec);
  ab->add_option("--episodes", episodes);
  ab->add_option("--seed", seed);
  ab->add_option("--out", out_dir)->required();

  CLI11_PARSE(app, argc, argv);

  try {
    if (*gen) {
      const datagen::EnvConfig env;
      std::vector<datagen::TaskSpec> suite;
      if (!task_ids.empty()) {
        suite = parse_suite(task_ids, env, {});
      } else {
        suite = datagen::make_task_suite(n_tasks, suite_seed, env);
      }
      auto ds = datagen::generate_dataset(suite, demos, action_free, seed, env);
      datagen::write_dataset(out, ds);
      std::printf("wrote %zu episodes to %s\n", ds.episodes.size(), out.c_str());
    } else if (*pre) {
      auto cfg = TrainConfig::load(config);
      auto ds = datagen::read_dataset(data);
      auto res = pretrain_embedding(ds, cfg);
      cfg.bind_env(ds.env);
      fs::create_directories(out_dir);
      save_embedding(fs::path(out_dir) / "embedding.safetensors", res.embedding, cfg, res.log);
      std::ofstream log(fs::path(out_dir) / "pretrain_log.jsonl");
      for (const auto& e : res.log) {
        log << e.to_json().dump() << '\n';
        std::printf("step %6lld  held-out fm %.4f\n", static_cast<long long>(e.step), e.heldout_fm);
      }
      const double ratio = res.log.back().heldout_fm / res.log.front().heldout_fm;
      std::printf("held-out fm loss ratio (final / step 0): %.3f\n", ratio);
    } else if (*train) {
      auto cfg = TrainConfig::load(config);
      auto labeled = read_all(train_data);
      std::optional<datagen::Dataset> af;
      if (!af_data.empty()) af = datagen::read_dataset(af_data);
      FitData fd;
      for (const auto& d : labeled) fd.labeled.push_back(&d);
      fd.action_free = af ? &*af : nullptr;
      FitOptions fo;
      fo.out_dir = out_dir;
      if (!resume.empty()) fo.resume = resume;
      if (!init_embedding.empty()) fo.init_embedding = load_embedding(init_embedding);
      fo.on_step = progress(cfg.steps, 100);
      auto res = fit(fd, cfg, fo);
      std::printf("%zu checkpoints in %s\n", res.checkpoints.size(), out_dir.c_str());
    } else if (*ev) {
      auto ckpts = list_checkpoints(ckpt_dir);
      if (ckpts.empty()) throw std::runtime_error("no checkpoints in " + ckpt_dir);
      if (last > 0 && static_cast<std::size_t>(last) < ckpts.size()) ckpts.erase(ckpts.begin(), ckpts.end() - last);
      const auto info = read_checkpoint_info(ckpts.front());
      const auto suite = parse_suite(suite_spec, info.env, info.suite);
      auto report = evaluate(ckpts, suite, episodes, seed);
      print_report(report);
      const fs::path rp = report_path.empty() ? fs::path(ckpt_dir) / "eval_report.json" : fs::path(report_path);
      std::ofstream(rp) << report.to_json().dump(2) << '\n';
      if (!plot_dir.empty()) emit_plots({report}, plot_dir, "eval");
    } else if (*ab) {
      auto cfg = TrainConfig::load(config);
      auto labeled = read_all(train_data);
      std::optional<datagen::Dataset> af;
      if (!af_data.empty()) af = datagen::read_dataset(af_data);
      FitData fd;
      for (const auto& d : labeled) fd.labeled.push_back(&d);
      fd.action_free = af ? &*af : nullptr;
      AblateOptions ao;
      ao.out_dir = out_dir;
      ao.episodes_per_task = episodes;
      ao.suite = parse_suite(suite_spec, labeled.front().env, {});
      if (!init_embedding.empty()) ao.init_embedding = load_embedding(init_embedding);
      auto grid = ablate(axis, split(values), cfg, fd, seed, ao);
      for (std::size_t i = 0; i < grid.values.size(); ++i) {
        std::printf("%s=%s  selected %.3f\n", axis.c_str(), grid.values[i].c_str(), grid.reports[i].selected_score);
      }
      emit_plots(grid.reports, out_dir, "ablation_" + axis);
    }
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  }
  return 0;
}
