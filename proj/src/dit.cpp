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

#include "flare/dit.hpp"

#include <algorithm>
#include <stdexcept>

namespace flare {

std::int64_t TokenSequence::count(Segment s) const {
  return std::count(segments.begin(), segments.end(), s);
}

TokenSequence assemble_sequence(const torch::Tensor& state_token, const torch::Tensor& action_tokens,
                                const torch::Tensor& future_tokens) {
  if (state_token.dim() != 3 || state_token.size(1) != 1) {
    throw std::invalid_argument("assemble_sequence: state token must be [B, 1, D]");
  }
  if (action_tokens.dim() != 3) throw std::invalid_argument("assemble_sequence: action tokens must be [B, H, D]");
  TokenSequence seq;
  std::vector<torch::Tensor> parts{state_token, action_tokens};
  seq.segments.push_back(Segment::state);
  seq.segments.insert(seq.segments.end(), static_cast<std::size_t>(action_tokens.size(1)), Segment::action);
  if (future_tokens.defined() && future_tokens.size(1) > 0) {
    parts.push_back(future_tokens);
    seq.segments.insert(seq.segments.end(), static_cast<std::size_t>(future_tokens.size(1)), Segment::future);
  }
  seq.tokens = torch::cat(parts, 1);
  return seq;
}

DiTBlockImpl::DiTBlockImpl(std::int64_t width, std::int64_t heads, std::int64_t ffn_mult)
    : norm_cross(register_module("norm_cross", torch::nn::LayerNorm(torch::nn::LayerNormOptions({width})))),
      cross_attn(register_module("cross_attn", Attention(width, heads))),
      norm_self(register_module("norm_self", torch::nn::LayerNorm(torch::nn::LayerNormOptions({width})))),
      self_attn(register_module("self_attn", Attention(width, heads))),
      norm_ffn(register_module("norm_ffn", torch::nn::LayerNorm(torch::nn::LayerNormOptions({width})))),
      ffn(register_module("ffn", Mlp(width, ffn_mult * width, width))) {}

torch::Tensor DiTBlockImpl::forward(torch::Tensor x, const torch::Tensor& context) {
  x = x + cross_attn(norm_cross(x), context);
  auto h = norm_self(x);
  x = x + self_attn(h, h);
  return x + ffn(norm_ffn(x));
}

DiTImpl::DiTImpl(const ModelConfig& cfg) {
  cfg.validate();
  blocks = register_module("blocks", torch::nn::ModuleList());
  for (int i = 0; i < cfg.dit_layers; ++i) blocks->push_back(DiTBlock(cfg.width, cfg.heads, cfg.ffn_mult));
  final_norm = register_module("final_norm", torch::nn::LayerNorm(torch::nn::LayerNormOptions({cfg.width})));
}

DiTOutput DiTImpl::forward(const torch::Tensor& tokens, const torch::Tensor& context, int tap_layer,
                           std::int64_t future_count) {
  DiTOutput out;
  auto x = tokens;
  const auto s = tokens.size(1);
  int layer = 0;
  for (const auto& block : *blocks) {
    x = block->as<DiTBlock>()->forward(x, context);
    if (++layer == tap_layer && future_count > 0) out.tap_future = x.slice(1, s - future_count, s);
  }
  out.hidden = x;
  out.final_tokens = final_norm(x);
  return out;
}

DiTOutput dit_forward(DiT& dit, const TokenSequence& seq, const VLEmbedding& vl, int tap_layer) {
  if (tap_layer < 1 || tap_layer > dit->layers()) {
    throw std::invalid_argument("dit_forward: tap layer " + std::to_string(tap_layer) + " outside [1, " +
                                std::to_string(dit->layers()) + "]");
  }
  if (seq.tokens.dim() != 3 || static_cast<std::int64_t>(seq.segments.size()) != seq.tokens.size(1)) {
    throw std::invalid_argument("dit_forward: segment tags do not match the token sequence");
  }
  if (seq.segments.empty() || seq.segments.front() != Segment::state ||
      !std::is_sorted(seq.segments.begin(), seq.segments.end())) {
    throw std::invalid_argument("dit_forward: sequence must be ordered (state, actions, future)");
  }
  auto ctx = vl.tokens.dim() == 2 ? vl.tokens.unsqueeze(0).expand({seq.tokens.size(0), -1, -1}) : vl.tokens;
  if (!torch::isfinite(seq.tokens).all().item<bool>() || !torch::isfinite(ctx).all().item<bool>()) {
    throw std::invalid_argument("dit_forward: non-finite input");
  }
  return dit->forward(seq.tokens, ctx, tap_layer, seq.count(Segment::future));
}

}  // namespace flare
