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

// Training loops: embedding pretraining with the flow-matching loss alone,
// then policy training with optional future alignment and action-free data.

#pragma once

#include "flare/datagen.hpp"
#include "flare/flowmatch.hpp"
#include "flare/objective.hpp"
#include "flare/policy.hpp"

#include <nlohmann/json.hpp>
#include <torch/torch.h>

#include <filesystem>
#include <functional>
#include <memory>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

namespace flare {

// Flat key-value training configuration. Image size, text length, vocabulary
// and dimensions of the model are bound from the dataset environment.
struct TrainConfig {
  ModelConfig model;
  flowmatch::FlowConfig flow;
  FlareConfig flare;
  std::string mode = "flare";  // "flare" or "policy_only"
  std::string dtype = "float32";
  int steps = 20000;
  int batch_size = 64;
  double lr = 1e-4;
  double beta1 = 0.95;
  double beta2 = 0.999;
  double adam_eps = 1e-8;
  double weight_decay = 1e-5;
  double warmup_ratio = 0.05;
  double action_free_fraction = 0.0;
  std::uint64_t seed = 0;
  int checkpoint_every = 1000;
  double holdout_fraction = 0.1;  // pretraining only
  int log_every = 100;            // pretraining held-out cadence
  int augment_shift = 0;          // max whole-scene shift in pixels; 0 disables

  // Alignment is active only in flare mode with lambda > 0; otherwise the
  // policy carries no future tokens and no target model exists.
  bool uses_alignment() const { return mode == "flare" && flare.lambda > 0.0; }
  int future_tokens() const { return uses_alignment() ? flare.future_tokens : 0; }
  torch::ScalarType scalar_type() const;

  void bind_env(const datagen::EnvConfig& env);
  void validate() const;
  nlohmann::json to_json() const;
  // Unknown keys are an error.
  static TrainConfig from_json(const nlohmann::json& j);
  static TrainConfig load(const std::filesystem::path& path);
  std::string hash() const;
};

// Linear warmup over warmup_ratio * steps, then cosine decay to 0 at `steps`.
double learning_rate(const TrainConfig& cfg, std::int64_t step);

struct Batch {
  torch::Tensor images;         // [B, S, S, 3] uint8
  torch::Tensor tokens;         // [B, T] int64
  torch::Tensor proprio;        // [B, 3]
  torch::Tensor actions;        // [B, H, 3] normalized; undefined for action-free data
  torch::Tensor future_images;  // [B, S, S, 3] uint8, frame min(t + H, len - 1)
  std::vector<std::int64_t> ids;

  std::int64_t size() const { return static_cast<std::int64_t>(ids.size()); }
};

// Every (episode, t) chunk of one or more datasets, held as contiguous tensors.
class ChunkDataset {
 public:
  ChunkDataset(const std::vector<const datagen::Dataset*>& datasets, int horizon);

  std::int64_t size() const { return static_cast<std::int64_t>(obs_index_.size()); }
  bool has_actions() const { return has_actions_; }
  Batch gather(const std::vector<std::int64_t>& ids, torch::ScalarType dtype = torch::kFloat32) const;

 private:
  int horizon_;
  bool has_actions_;
  torch::Tensor images_;   // per observation
  torch::Tensor tokens_;   // per observation
  torch::Tensor proprio_;  // per observation
  torch::Tensor actions_;  // per recorded action, normalized
  std::vector<std::int64_t> obs_index_;
  std::vector<std::int64_t> future_index_;
  std::vector<std::int64_t> action_rows_;  // size() * H
};

struct TrainState {
  TrainConfig cfg;
  FlarePolicy policy{nullptr};
  std::optional<TargetEmbedding> target;
  std::unique_ptr<torch::optim::AdamW> optimizer;
  std::int64_t step = 0;
  Rng rng;
};

// Fresh state. A defined `init_embedding` overwrites the policy's embedding
// model before the target copy is taken.
TrainState make_train_state(const TrainConfig& cfg, const VLEmbeddingModel& init_embedding = nullptr);

struct StepMetrics {
  std::int64_t step = 0;  // index of the step just taken
  double fm_loss = 0.0;
  double align_loss = 0.0;
  double combined = 0.0;
  double lr = 0.0;
  std::int64_t labeled = 0;
  std::int64_t action_free = 0;

  nlohmann::json to_json() const;
};

// Noise for one step: labeled timesteps and noise, action-free noise.
struct StepNoise {
  torch::Tensor tau;
  torch::Tensor eps;
  torch::Tensor eps_free;
};

StepNoise draw_noise(const TrainConfig& cfg, Rng& rng, std::int64_t labeled, std::int64_t action_free);

// Loss terms of a mixed batch; `fm` is undefined without labeled samples and
// `align` without alignment. `total` is what train_step differentiates.
struct LossTerms {
  torch::Tensor fm;
  torch::Tensor align;
  torch::Tensor total;
};

LossTerms compute_losses(FlarePolicy& policy, TargetEmbedding* target, const TrainConfig& cfg, const Batch* labeled,
                         const Batch* action_free, const StepNoise& noise);

class TrainingDiverged : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// One optimizer step. Labeled samples contribute L_fm + lambda * L_align;
// action-free samples enter with A_tau = eps at tau = 0 and contribute
// lambda * L_align only. Each component averages over its own samples.
// Draw order from state.rng: labeled tau, labeled eps, action-free eps.
StepMetrics train_step(TrainState& state, const Batch* labeled, const Batch* action_free);

// Plain flow-matching step; never touches future tokens or targets.
StepMetrics policy_only_step(TrainState& state, const Batch& labeled);

// Batch composition and sample ids for the next step; advances state.rng.
struct BatchPlan {
  std::vector<std::int64_t> labeled;
  std::vector<std::int64_t> action_free;
};
BatchPlan plan_batch(TrainState& state, std::int64_t labeled_size, std::int64_t action_free_size);

struct PretrainLog {
  std::int64_t step = 0;
  double train_fm = 0.0;
  double heldout_fm = 0.0;
  nlohmann::json to_json() const;
};

struct PretrainResult {
  VLEmbeddingModel embedding{nullptr};
  std::vector<PretrainLog> log;
};

// Trains the embedding model end to end behind a full DiT and action decoder
// with L_fm only; returns the embedding model. Throws on action-free data.
PretrainResult pretrain_embedding(const datagen::Dataset& dataset, const TrainConfig& cfg);

void save_embedding(const std::filesystem::path& path, const VLEmbeddingModel& embedding, const TrainConfig& cfg,
                    const std::vector<PretrainLog>& log = {});
VLEmbeddingModel load_embedding(const std::filesystem::path& path);

// Identity of the training data for resume checks.
std::string data_fingerprint(const std::vector<const datagen::Dataset*>& labeled,
                             const datagen::Dataset* action_free);

struct CheckpointInfo {
  TrainConfig cfg;
  datagen::EnvConfig env;
  std::vector<datagen::TaskSpec> suite;
  std::string data_hash;
  std::int64_t step = 0;
};

void save_checkpoint(const std::filesystem::path& path, const TrainState& state, const datagen::EnvConfig& env,
                     const std::vector<datagen::TaskSpec>& suite, const std::string& data_hash);
// Restores policy, target, optimizer moments, step and rng.
TrainState load_checkpoint(const std::filesystem::path& path, CheckpointInfo* info = nullptr);
CheckpointInfo read_checkpoint_info(const std::filesystem::path& path);
std::vector<std::filesystem::path> list_checkpoints(const std::filesystem::path& dir);

struct FitData {
  std::vector<const datagen::Dataset*> labeled;
  const datagen::Dataset* action_free = nullptr;
};

struct FitOptions {
  std::filesystem::path out_dir;
  std::optional<std::filesystem::path> resume;
  VLEmbeddingModel init_embedding{nullptr};
  std::function<void(const StepMetrics&)> on_step;
};

// Translates each sample's scene by a random whole-pixel offset in
// [-max_shift, max_shift] per axis: current and future images move together
// (background fills the exposed border) and proprio xy moves by the same
// world offset. Actions are displacements, so the labels stay valid.
void shift_scene(Batch& batch, int max_shift, Rng& rng);

struct FitResult {
  std::vector<std::filesystem::path> checkpoints;
  std::vector<StepMetrics> metrics;  // steps run by this call
};

// Writes ckpt_<step>.safetensors every checkpoint_every steps (and at the
// final step) plus metrics.jsonl with one record per step. With
// augment_shift > 0 every gathered batch is passed through shift_scene.
FitResult fit(const FitData& data, const TrainConfig& cfg, const FitOptions& options);

}  // namespace flare
