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

#include "flare/encoders.hpp"
#include "flare/layers.hpp"

#include <torch/torch.h>

#include <vector>

namespace flare {

enum class Segment : std::uint8_t { state, action, future };

// [B, S, D] tokens ordered (state, H actions, M future).
struct TokenSequence {
  torch::Tensor tokens;
  std::vector<Segment> segments;

  std::int64_t count(Segment s) const;
};

TokenSequence assemble_sequence(const torch::Tensor& state_token, const torch::Tensor& action_tokens,
                                const torch::Tensor& future_tokens = {});

struct DiTOutput {
  torch::Tensor final_tokens;  // after the final norm
  torch::Tensor hidden;        // last block output, before the final norm
  torch::Tensor tap_future;    // future-token slice after block `tap_layer`; undefined without a tap
};

// Pre-norm block: cross-attention to the VL tokens, full self-attention over
// the sequence, GELU feed-forward; each as a residual branch.
class DiTBlockImpl : public torch::nn::Module {
 public:
  DiTBlockImpl(std::int64_t width, std::int64_t heads, std::int64_t ffn_mult);
  torch::Tensor forward(torch::Tensor x, const torch::Tensor& context);

  torch::nn::LayerNorm norm_cross{nullptr};
  Attention cross_attn{nullptr};
  torch::nn::LayerNorm norm_self{nullptr};
  Attention self_attn{nullptr};
  torch::nn::LayerNorm norm_ffn{nullptr};
  Mlp ffn{nullptr};
};
TORCH_MODULE(DiTBlock);

class DiTImpl : public torch::nn::Module {
 public:
  explicit DiTImpl(const ModelConfig& cfg);

  // tap_layer in 1..layers() captures the trailing `future_count` positions
  // after that block; 0 disables the tap.
  DiTOutput forward(const torch::Tensor& tokens, const torch::Tensor& context, int tap_layer = 0,
                    std::int64_t future_count = 0);

  int layers() const { return static_cast<int>(blocks->size()); }

  torch::nn::ModuleList blocks{nullptr};
  torch::nn::LayerNorm final_norm{nullptr};
};
TORCH_MODULE(DiT);

// Validated entry point: requires 1 <= tap_layer <= layers, finite inputs and
// a (state, action, future) ordered sequence.
DiTOutput dit_forward(DiT& dit, const TokenSequence& seq, const VLEmbedding& vl, int tap_layer);

}  // namespace flare
