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

#pragma once

#include "flare/dit.hpp"
#include "flare/encoders.hpp"
#include "flare/flowmatch.hpp"

#include <torch/torch.h>

namespace flare {

/// Flow-matching action policy with optional future tokens.
///
/// The DiT sequence is [state token, H noised-action tokens, M learned future
/// tokens], cross-attending to the VL embedding of the current observation.
/// The action slice of the final output is decoded to a velocity field; the
/// future slice tapped at an intermediate layer is decoded to predicted
/// embeddings of the observation H steps ahead. With zero future tokens this
/// is the plain policy.
class FlarePolicyImpl : public torch::nn::Module {
 public:
  FlarePolicyImpl(const ModelConfig& cfg, int chunk, int future_tokens);

  struct Output {
    torch::Tensor velocity;          // [B, H, d_a]
    torch::Tensor predicted_future;  // [B, M, D]; undefined when not tapped
    DiTOutput dit;
  };

  torch::Tensor embed(const torch::Tensor& images, const torch::Tensor& tokens) { return vl->forward(images, tokens); }

  Output forward(const torch::Tensor& phi, const torch::Tensor& q, const torch::Tensor& a_tau, const torch::Tensor& tau,
                 int tap_layer = 0);

  // Velocity field at a shared timestep, for Euler integration.
  torch::Tensor velocity(const torch::Tensor& phi, const torch::Tensor& a_tau, const torch::Tensor& q, double tau);

  int chunk() const { return chunk_; }
  int future_count() const { return future_count_; }
  const ModelConfig& config() const { return cfg_; }

  VLEmbeddingModel vl{nullptr};
  StateEncoder state_encoder{nullptr};
  ActionEncoder action_encoder{nullptr};
  DiT dit{nullptr};
  ActionDecoder action_decoder{nullptr};
  torch::Tensor future_tokens;
  FutureDecoder future_decoder{nullptr};

 private:
  ModelConfig cfg_;
  int chunk_;
  int future_count_;
};
TORCH_MODULE(FlarePolicy);

FlarePolicy make_policy(const ModelConfig& cfg, int chunk, int future_tokens, std::uint64_t seed,
                        torch::ScalarType dtype = torch::kFloat32);

VLEmbeddingModel make_embedding_model(const ModelConfig& cfg, std::uint64_t seed,
                                      torch::ScalarType dtype = torch::kFloat32);

// Copies parameter values by name; names and shapes must match exactly.
void copy_parameters(torch::nn::Module& dst, const torch::nn::Module& src);

}  // namespace flare
