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

// Checkpoint evaluation, ablation sweeps and charts.

#pragma once

#include "flare/datagen.hpp"
#include "flare/trainer.hpp"

#include <nlohmann/json.hpp>

#include <filesystem>
#include <map>
#include <string>
#include <vector>

namespace flare {

struct CheckpointEval {
  std::int64_t step = 0;
  std::string label;
  std::map<int, double> per_task;  // task_id -> success rate
  double aggregate = 0.0;          // mean over all episodes of the suite
  int nan_episodes = 0;
};

struct EvalReport {
  std::vector<datagen::TaskSpec> suite;
  int episodes_per_task = 0;
  std::uint64_t seed = 0;
  std::vector<CheckpointEval> checkpoints;  // training order
  double selected_score = 0.0;
  std::size_t selected_index = 0;

  nlohmann::json to_json() const;
};

// Index of the maximum over the final five entries (all entries when fewer);
// the latest wins ties.
std::size_t select_checkpoint(const std::vector<double>& aggregates);

// Fills selected_score / selected_index from the checkpoint aggregates.
void finalize_report(EvalReport& report);

// Initial world state of episode `episode` of `task`; shared by every
// checkpoint evaluated under the same seed.
datagen::WorldState eval_initial_state(const datagen::TaskSpec& task, int episode, std::uint64_t seed,
                                       const datagen::EnvConfig& env);

// All (task, episode) pairs rolled out in lockstep.
CheckpointEval evaluate_policy(const datagen::BatchChunkPolicy& policy, const std::vector<datagen::TaskSpec>& suite,
                               int episodes_per_task, std::uint64_t seed, const datagen::EnvConfig& env);

// Euler-integrated chunks from a trained policy, denormalized to env units.
datagen::BatchChunkPolicy learned_policy(const FlarePolicy& policy, const TrainConfig& cfg,
                                         const datagen::EnvConfig& env, std::uint64_t seed);

struct LabeledPolicy {
  std::string label;
  std::int64_t step = 0;
  datagen::BatchChunkPolicy policy;
};

EvalReport evaluate_policies(const std::vector<LabeledPolicy>& policies, const std::vector<datagen::TaskSpec>& suite,
                             int episodes_per_task, std::uint64_t seed, const datagen::EnvConfig& env);

// Throws when a checkpoint is unreadable, the checkpoints disagree on the
// environment, or a task does not fit that environment.
EvalReport evaluate(const std::vector<std::filesystem::path>& checkpoints, const std::vector<datagen::TaskSpec>& suite,
                    int episodes_per_task, std::uint64_t seed);

// Parses "0,3,7" into tasks of `env`; an empty string yields `fallback`.
std::vector<datagen::TaskSpec> parse_suite(const std::string& spec, const datagen::EnvConfig& env,
                                           const std::vector<datagen::TaskSpec>& fallback);

struct AblationGrid {
  std::string axis;
  std::vector<std::string> values;
  std::vector<EvalReport> reports;
  std::vector<std::filesystem::path> run_dirs;

  nlohmann::json to_json() const;
};

// Axes: lambda, L_tap, ema_rho, target_embedding (action_aware | random).
TrainConfig apply_axis(const TrainConfig& base, const std::string& axis, const std::string& value);

struct AblateOptions {
  std::filesystem::path out_dir;
  int episodes_per_task = 50;
  std::vector<datagen::TaskSpec> suite;  // empty: the training suite
  VLEmbeddingModel init_embedding{nullptr};
};

// One training run per value, all with `seed`; evaluates the final five
// checkpoints of each run and writes grid.json plus a line chart.
AblationGrid ablate(const std::string& axis, const std::vector<std::string>& values, const TrainConfig& base,
                    const FitData& data, std::uint64_t seed, const AblateOptions& options);

// One per-task success bar chart per report, named <stem>_<index>_per_task.svg.
std::vector<std::filesystem::path> emit_plots(const std::vector<EvalReport>& reports, const std::filesystem::path& dir,
                                              const std::string& stem = "report");
// Selected score against axis value, named ablation_<axis>.svg.
std::filesystem::path emit_ablation_plot(const AblationGrid& grid, const std::filesystem::path& dir);

}  // namespace flare
