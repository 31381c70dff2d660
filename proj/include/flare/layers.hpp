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

#include <nlohmann/json.hpp>
#include <torch/torch.h>

#include <cstdint>

namespace flare {

struct ModelConfig {
  int width = 128;
  int heads = 4;
  int ffn_mult = 4;
  int fusion_layers = 4;
  int qformer_layers = 2;
  int vl_tokens = 8;  // M query tokens of the embedding model
  int dit_layers = 8;
  int image_size = 48;
  int patch_size = 8;
  int text_len = 8;
  int vocab_size = 16;
  int state_dim = 3;
  int action_dim = 3;

  int patches() const { return (image_size / patch_size) * (image_size / patch_size); }
  int fused_tokens() const { return patches() + text_len; }

  void validate() const;
  nlohmann::json to_json() const;
  static ModelConfig from_json(const nlohmann::json& j);
};

class MlpImpl : public torch::nn::Module {
 public:
  MlpImpl(std::int64_t in, std::int64_t hidden, std::int64_t out);
  torch::Tensor forward(const torch::Tensor& x);

  torch::nn::Linear fc1{nullptr};
  torch::nn::Linear fc2{nullptr};
};
TORCH_MODULE(Mlp);

// Multi-head attention of `x` over `context`; no masking.
class AttentionImpl : public torch::nn::Module {
 public:
  AttentionImpl(std::int64_t width, std::int64_t heads);
  torch::Tensor forward(const torch::Tensor& x, const torch::Tensor& context);

  torch::nn::Linear query{nullptr};
  torch::nn::Linear key{nullptr};
  torch::nn::Linear value{nullptr};
  torch::nn::Linear out{nullptr};

 private:
  std::int64_t heads_;
};
TORCH_MODULE(Attention);

// Pre-norm self-attention + feed-forward block.
class SelfBlockImpl : public torch::nn::Module {
 public:
  SelfBlockImpl(std::int64_t width, std::int64_t heads, std::int64_t ffn_mult);
  torch::Tensor forward(torch::Tensor x);

  torch::nn::LayerNorm norm_attn{nullptr};
  Attention attn{nullptr};
  torch::nn::LayerNorm norm_ffn{nullptr};
  Mlp ffn{nullptr};
};
TORCH_MODULE(SelfBlock);

// Queries self-attend, then cross-attend to the fused context, then FFN.
class QFormerBlockImpl : public torch::nn::Module {
 public:
  QFormerBlockImpl(std::int64_t width, std::int64_t heads, std::int64_t ffn_mult);
  torch::Tensor forward(torch::Tensor queries, const torch::Tensor& context);

  torch::nn::LayerNorm norm_self{nullptr};
  Attention self_attn{nullptr};
  torch::nn::LayerNorm norm_cross{nullptr};
  Attention cross_attn{nullptr};
  torch::nn::LayerNorm norm_ffn{nullptr};
  Mlp ffn{nullptr};
};
TORCH_MODULE(QFormerBlock);

torch::Tensor timestep_embedding(const torch::Tensor& tau, std::int64_t width);

// Deterministic initialization keyed by (seed, parameter path), so adding or
// removing a submodule never shifts the values of the others. Linear weights
// ~ U(+-1/sqrt(fan_in)), biases 0, LayerNorm (1, 0), patch positions start
// from a 2D sin-cos table, everything else (embeddings, learned tokens)
// ~ N(0, 0.02^2).
void init_parameters(torch::nn::Module& module, std::uint64_t seed, const std::string& prefix = "");

}  // namespace flare
