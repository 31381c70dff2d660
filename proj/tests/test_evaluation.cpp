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

#include "flare/evaluation.hpp"
#include "test_support.hpp"

#include <gtest/gtest.h>

#include <fstream>

namespace flare {
namespace {

namespace fs = std::filesystem;

// Scripted expert as a batch policy; the task is recovered from the
// instruction tokens.
datagen::BatchChunkPolicy expert_policy(const std::vector<datagen::TaskSpec>& suite, const datagen::EnvConfig& env) {
  return [suite, env](const std::vector<datagen::Observation>& obs, const std::vector<datagen::StateVec>&,
                      const std::vector<datagen::WorldState>& states) {
    std::vector<std::vector<datagen::Action>> out;
    for (std::size_t i = 0; i < obs.size(); ++i) {
      auto task = std::find_if(suite.begin(), suite.end(), [&](const datagen::TaskSpec& t) {
        return t.instruction_tokens == obs[i].instruction_tokens;
      });
      out.push_back(datagen::expert_chunk(*task, states[i], 16, env));
    }
    return out;
  };
}

datagen::BatchChunkPolicy constant_policy(float value) {
  return [value](const std::vector<datagen::Observation>& obs, const std::vector<datagen::StateVec>&,
                 const std::vector<datagen::WorldState>&) {
    return std::vector<std::vector<datagen::Action>>(obs.size(), std::vector<datagen::Action>(16, {value, value, value}));
  };
}

TEST(Evaluate, ScriptedExpertSucceedsEverywhere) {
  const datagen::EnvConfig env;
  const auto suite = datagen::make_task_suite(4, 0, env);
  auto c = evaluate_policy(expert_policy(suite, env), suite, 50, 3, env);
  EXPECT_EQ(c.aggregate, 1.0);
  for (const auto& [id, rate] : c.per_task) EXPECT_EQ(rate, 1.0) << id;
  EXPECT_EQ(c.per_task.size(), 4u);
}

TEST(Evaluate, ZeroAndNanPolicies) {
  const datagen::EnvConfig env;
  const auto suite = datagen::make_task_suite(2, 0, env);
  auto zero = evaluate_policy(constant_policy(0.0f), suite, 10, 1, env);
  EXPECT_EQ(zero.aggregate, 0.0);
  EXPECT_EQ(zero.nan_episodes, 0);
  auto nan = evaluate_policy(constant_policy(NAN), suite, 10, 1, env);
  EXPECT_EQ(nan.aggregate, 0.0);
  EXPECT_EQ(nan.nan_episodes, 20);
}

TEST(Evaluate, InitialStatesAreSeededPerEpisode) {
  const datagen::EnvConfig env;
  const auto task = datagen::make_task(0, 1, env);
  auto a = eval_initial_state(task, 3, 7, env);
  auto b = eval_initial_state(task, 3, 7, env);
  EXPECT_EQ(a.effector_pos.x, b.effector_pos.x);
  EXPECT_EQ(a.object_pos[0].y, b.object_pos[0].y);
  EXPECT_NE(eval_initial_state(task, 4, 7, env).effector_pos.x, a.effector_pos.x);
  EXPECT_NE(eval_initial_state(task, 3, 8, env).effector_pos.x, a.effector_pos.x);
}

TEST(Selection, MaxOverFinalFiveLatestOnTies) {
  EXPECT_EQ(select_checkpoint({0.5, 0.6, 0.55, 0.58, 0.52}), 1u);
  EXPECT_EQ(select_checkpoint({0.9, 0.5, 0.6, 0.55, 0.58, 0.52}), 2u);
  EXPECT_EQ(select_checkpoint({0.6, 0.3, 0.6, 0.1}), 2u);
  EXPECT_EQ(select_checkpoint({0.2}), 0u);
  EXPECT_THROW(select_checkpoint({}), std::invalid_argument);

  EvalReport r;
  for (double v : {0.9, 0.5, 0.6, 0.55, 0.58, 0.52}) {
    CheckpointEval c;
    c.aggregate = v;
    r.checkpoints.push_back(c);
  }
  finalize_report(r);
  EXPECT_EQ(r.selected_score, 0.6);
  EXPECT_EQ(r.selected_index, 2u);
  EXPECT_EQ(r.to_json()["selected_score"], 0.6);
}

TEST(Evaluate, DeterministicReports) {
  const datagen::EnvConfig env;
  const auto suite = datagen::make_task_suite(2, 1, env);
  std::vector<LabeledPolicy> ps = {{"expert", 1, expert_policy(suite, env)}, {"zero", 2, constant_policy(0.0f)}};
  auto a = evaluate_policies(ps, suite, 5, 9, env);
  auto b = evaluate_policies(ps, suite, 5, 9, env);
  EXPECT_EQ(a.to_json(), b.to_json());
  EXPECT_EQ(a.selected_score, 1.0);
  EXPECT_EQ(a.selected_index, 0u);
  EXPECT_THROW(evaluate_policies({}, suite, 5, 9, env), std::invalid_argument);
}

TEST(Evaluate, CheckpointsFromTraining) {
  const auto ds = testing::small_dataset(2, 1);
  FitData data;
  data.labeled = {&ds};
  auto cfg = testing::tiny_train_config();
  cfg.steps = 4;
  cfg.checkpoint_every = 2;
  FitOptions opts;
  opts.out_dir = testing::scratch_dir("eval_ckpts");
  auto run = fit(data, cfg, opts);
  auto a = evaluate(run.checkpoints, ds.suite, 2, 5);
  auto b = evaluate(run.checkpoints, ds.suite, 2, 5);
  EXPECT_EQ(a.to_json(), b.to_json());
  ASSERT_EQ(a.checkpoints.size(), 2u);
  EXPECT_EQ(a.checkpoints[1].step, 4);
  EXPECT_EQ(a.checkpoints[1].label, "ckpt_0000004.safetensors");
  for (const auto& c : a.checkpoints) {
    EXPECT_GE(c.aggregate, 0.0);
    EXPECT_LE(c.aggregate, 1.0);
  }
  EXPECT_THROW(evaluate({}, ds.suite, 2, 5), std::invalid_argument);
  EXPECT_THROW(evaluate({opts.out_dir / "missing.safetensors"}, ds.suite, 2, 5), std::runtime_error);
}

TEST(ParseSuite, IdsAndFallback) {
  const datagen::EnvConfig env;
  const auto fallback = datagen::make_task_suite(2, 0, env);
  EXPECT_EQ(parse_suite("", env, fallback), fallback);
  auto s = parse_suite("0,5", env, {});
  ASSERT_EQ(s.size(), 2u);
  EXPECT_EQ(s[1], datagen::task_by_id(5, env));
  EXPECT_THROW(parse_suite("0,x", env, {}), std::invalid_argument);
  EXPECT_THROW(parse_suite("99", env, {}), std::invalid_argument);
}

TEST(Ablation, AxisValues) {
  auto base = testing::tiny_train_config();
  EXPECT_EQ(apply_axis(base, "lambda", "0.0").flare.lambda, 0.0);
  EXPECT_EQ(apply_axis(base, "L_tap", "2").flare.tap_layer, 2);
  EXPECT_EQ(apply_axis(base, "ema_rho", "0.99").flare.ema_rho, 0.99);
  EXPECT_EQ(apply_axis(base, "target_embedding", "random").flare.target_embedding, "random");
  EXPECT_THROW(apply_axis(base, "width", "4"), std::invalid_argument);
  EXPECT_THROW(apply_axis(base, "lambda", "0.2x"), std::invalid_argument);
  EXPECT_THROW(apply_axis(base, "L_tap", "1.5"), std::invalid_argument);
}

// The lambda = 0 cell is the policy-only baseline under the same seed.
TEST(Ablation, ZeroLambdaCellMatchesPolicyOnlyRun) {
  const auto ds = testing::small_dataset(2, 1);
  FitData data;
  data.labeled = {&ds};
  auto cfg = testing::tiny_train_config();
  cfg.steps = 3;
  cfg.checkpoint_every = 3;
  AblateOptions ao;
  ao.out_dir = testing::scratch_dir("ablate");
  ao.episodes_per_task = 2;
  auto grid = ablate("lambda", {"0.0", "0.2"}, cfg, data, 4, ao);
  ASSERT_EQ(grid.reports.size(), 2u);
  EXPECT_TRUE(fs::exists(ao.out_dir / "grid_lambda.json"));
  EXPECT_TRUE(fs::exists(ao.out_dir / "ablation_lambda.svg"));

  auto baseline = cfg;
  baseline.mode = "policy_only";
  baseline.seed = 4;
  FitOptions fo;
  fo.out_dir = testing::scratch_dir("ablate_baseline");
  auto run = fit(data, baseline, fo);
  auto a = load_checkpoint(run.checkpoints.back());
  auto b = load_checkpoint(grid.run_dirs[0] / "ckpt_0000003.safetensors");
  auto pa = a.policy->named_parameters();
  for (const auto& p : b.policy->named_parameters()) EXPECT_TRUE(pa[p.key()].equal(p.value())) << p.key();
  auto report = evaluate(run.checkpoints, ds.suite, 2, 4);
  EXPECT_EQ(report.selected_score, grid.reports[0].selected_score);
}

TEST(Plots, FilesPerReportAndErrors) {
  auto dir = testing::scratch_dir("plots");
  EXPECT_THROW(emit_plots({}, dir), std::invalid_argument);
  EvalReport r;
  r.suite = datagen::make_task_suite(2, 0, datagen::EnvConfig{});
  CheckpointEval c;
  c.per_task = {{r.suite[0].task_id, 0.5}, {r.suite[1].task_id, 1.0}};
  c.aggregate = 0.75;
  r.checkpoints.push_back(c);
  finalize_report(r);
  auto files = emit_plots({r}, dir, "eval");
  ASSERT_EQ(files.size(), 1u);
  EXPECT_EQ(files[0].filename(), "eval_0_per_task.svg");
  std::ifstream in(files[0]);
  std::string text((std::istreambuf_iterator<char>(in)), {});
  EXPECT_NE(text.find("<svg"), std::string::npos);

  AblationGrid grid;
  grid.axis = "ema_rho";
  grid.values = {"0.99", "0.995", "1.0"};
  grid.reports = {r, r, r};
  EXPECT_EQ(emit_ablation_plot(grid, dir).filename(), "ablation_ema_rho.svg");
  EXPECT_EQ(grid.to_json()["cells"][1]["value"], "0.995");
}

}  // namespace
}  // namespace flare
