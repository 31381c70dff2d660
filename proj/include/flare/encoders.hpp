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

#include "flare/datagen.hpp"
#include "flare/layers.hpp"

#include <torch/torch.h>

#include <vector>

namespace flare {

enum class EmbeddingSource { policy, target };

// M compact query tokens describing one observation.
struct VLEmbedding {
  torch::Tensor tokens;  // [M, D] or [B, M, D]
  EmbeddingSource source = EmbeddingSource::policy;
};

/// Vision-language embedding model.
///
/// Image patches (linear patch embedding + learned positions) and instruction
/// tokens (embedding table + learned positions) are concatenated and fused by
/// `fusion_layers` self-attention blocks. A Q-former then compresses the fused
/// sequence: M learned queries run through `qformer_layers` (self-attention,
/// cross-attention, FFN) blocks. Output is [B, M, D] after a final LayerNorm.
class VLEmbeddingModelImpl : public torch::nn::Module {
 public:
  explicit VLEmbeddingModelImpl(const ModelConfig& cfg);

  // images: [B, H, W, 3] uint8 (scaled by 1/255) or floating point in [0, 1];
  // tokens: [B, T] integer ids.
  torch::Tensor forward(const torch::Tensor& images, const torch::Tensor& tokens);
  torch::Tensor fuse(const torch::Tensor& images, const torch::Tensor& tokens);

  const ModelConfig& config() const { return cfg_; }

  torch::nn::Linear patch_embed{nullptr};
  torch::Tensor image_pos;
  torch::nn::Embedding token_embed{nullptr};
  torch::Tensor text_pos;
  torch::nn::ModuleList fusion{nullptr};
  torch::nn::LayerNorm fusion_norm{nullptr};
  torch::Tensor queries;
  torch::nn::ModuleList qformer{nullptr};
  torch::nn::LayerNorm out_norm{nullptr};

 private:
  ModelConfig cfg_;
};
TORCH_MODULE(VLEmbeddingModel);

// Two-layer MLP lifting proprio q to a single token.
class StateEncoderImpl : public torch::nn::Module {
 public:
  StateEncoderImpl(std::int64_t state_dim, std::int64_t width);
  torch::Tensor forward(const torch::Tensor& q);  // [B, d_q] -> [B, 1, D]

  Mlp mlp{nullptr};

 private:
  std::int64_t state_dim_;
};
TORCH_MODULE(StateEncoder);

// Per-row two-layer MLP over the noised chunk. The sinusoidal embedding of
// tau is added to every token between the layers; learned per-index
// positions are added to the output.
class ActionEncoderImpl : public torch::nn::Module {
 public:
  ActionEncoderImpl(std::int64_t action_dim, std::int64_t width, std::int64_t horizon);
  torch::Tensor forward(const torch::Tensor& a_tau, const torch::Tensor& tau);  // [B,H,d_a],[B] -> [B,H,D]

  torch::nn::Linear fc1{nullptr};
  torch::nn::Linear fc2{nullptr};
  torch::Tensor position;

 private:
  std::int64_t action_dim_;
  std::int64_t horizon_;
};
TORCH_MODULE(ActionEncoder);

class ActionDecoderImpl : public torch::nn::Module {
 public:
  ActionDecoderImpl(std::int64_t width, std::int64_t action_dim);
  torch::Tensor forward(const torch::Tensor& x);  // [B, H, D] -> [B, H, d_a]

  Mlp mlp{nullptr};
};
TORCH_MODULE(ActionDecoder);

// Width-preserving projection of the tapped future-token activations.
class FutureDecoderImpl : public torch::nn::Module {
 public:
  FutureDecoderImpl(std::int64_t width, std::int64_t tokens);
  torch::Tensor forward(const torch::Tensor& x);  // [B, M, D] -> [B, M, D]

  Mlp mlp{nullptr};

 private:
  std::int64_t tokens_;
};
TORCH_MODULE(FutureDecoder);

// Stacks observations into the model's input tensors.
torch::Tensor stack_images(const std::vector<datagen::Observation>& obs);
torch::Tensor stack_tokens(const std::vector<datagen::Observation>& obs);
torch::Tensor stack_states(const std::vector<datagen::StateVec>& q, torch::ScalarType dtype = torch::kFloat32);

VLEmbedding encode_vl(VLEmbeddingModel& model, const datagen::Observation& obs,
                      EmbeddingSource source = EmbeddingSource::policy);

}  // namespace flare
