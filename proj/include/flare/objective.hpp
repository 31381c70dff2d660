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

// Future latent alignment: cosine alignment of predicted future tokens with
// the embedding of the observation H steps ahead, taken from a frozen
// exponential-moving-average copy of the policy's VL embedding model.

#pragma once

#include "flare/encoders.hpp"

#include <nlohmann/json.hpp>
#include <torch/torch.h>

#include <string>

namespace flare {

struct FlareConfig {
  double lambda = 0.2;
  int tap_layer = 6;
  int future_tokens = 8;
  double ema_rho = 0.995;
  // "action_aware": EMA copy of the policy's embedding model.
  // "random": a frozen randomly initialized embedding model, never updated.
  std::string target_embedding = "action_aware";

  void validate(int dit_layers) const;
  nlohmann::json to_json() const;
  static FlareConfig from_json(const nlohmann::json& j);
};

// Mean over batch and tokens of (1 - cos(pred, target)); [B, M, D] inputs.
torch::Tensor align_loss(const torch::Tensor& pred, const torch::Tensor& target);

torch::Tensor combined_loss(const torch::Tensor& fm, const torch::Tensor& align, double lambda);

// Frozen target encoder. Parameters never require gradients.
class TargetEmbedding {
 public:
  TargetEmbedding(VLEmbeddingModel model, bool ema);

  // Exact copy of `policy_vl`.
  static TargetEmbedding copy_of(const VLEmbeddingModel& policy_vl);

  torch::Tensor encode(const torch::Tensor& images, const torch::Tensor& tokens);
  VLEmbeddingModel& model() { return model_; }
  const VLEmbeddingModel& model() const { return model_; }
  bool tracks_policy() const { return ema_; }

 private:
  VLEmbeddingModel model_;
  bool ema_;
};

// target <- rho * target + (1 - rho) * policy, parameter by parameter.
// Throws unless both models have identical parameter names and shapes.
void ema_update(VLEmbeddingModel& target, const VLEmbeddingModel& policy, double rho);

// Target-encoder embedding of a future observation: [M, D], no gradient.
torch::Tensor flare_targets(TargetEmbedding& target, const datagen::Observation& obs_future);

}  // namespace flare
