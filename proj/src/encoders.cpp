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

#include "flare/encoders.hpp"

#include <stdexcept>
#include <string>

namespace flare {

namespace {

std::string shape_str(const torch::Tensor& t) {
  std::string s = "[";
  for (std::int64_t i = 0; i < t.dim(); ++i) s += (i ? ", " : "") + std::to_string(t.size(i));
  return s + "]";
}

}  // namespace

VLEmbeddingModelImpl::VLEmbeddingModelImpl(const ModelConfig& cfg) : cfg_(cfg) {
  cfg.validate();
  const std::int64_t d = cfg.width;
  const std::int64_t p = cfg.patch_size;
  patch_embed = register_module("patch_embed", torch::nn::Linear(p * p * 3, d));
  image_pos = register_parameter("image_pos", torch::zeros({cfg.patches(), d}));
  token_embed = register_module("token_embed", torch::nn::Embedding(cfg.vocab_size, d));
  text_pos = register_parameter("text_pos", torch::zeros({cfg.text_len, d}));
  fusion = register_module("fusion", torch::nn::ModuleList());
  for (int i = 0; i < cfg.fusion_layers; ++i) fusion->push_back(SelfBlock(d, cfg.heads, cfg.ffn_mult));
  fusion_norm = register_module("fusion_norm", torch::nn::LayerNorm(torch::nn::LayerNormOptions({d})));
  queries = register_parameter("queries", torch::zeros({cfg.vl_tokens, d}));
  qformer = register_module("qformer", torch::nn::ModuleList());
  for (int i = 0; i < cfg.qformer_layers; ++i) qformer->push_back(QFormerBlock(d, cfg.heads, cfg.ffn_mult));
  out_norm = register_module("out_norm", torch::nn::LayerNorm(torch::nn::LayerNormOptions({d})));
}

torch::Tensor VLEmbeddingModelImpl::fuse(const torch::Tensor& images, const torch::Tensor& tokens) {
  const std::int64_t n = cfg_.image_size;
  if (images.dim() != 4 || images.size(1) != n || images.size(2) != n || images.size(3) != 3) {
    throw std::invalid_argument("VLEmbeddingModel: expected images [B, " + std::to_string(n) + ", " +
                                std::to_string(n) + ", 3], got " + shape_str(images));
  }
  if (tokens.dim() != 2 || tokens.size(0) != images.size(0) || tokens.size(1) != cfg_.text_len) {
    throw std::invalid_argument("VLEmbeddingModel: expected tokens [B, " + std::to_string(cfg_.text_len) +
                                "], got " + shape_str(tokens));
  }
  const auto dtype = patch_embed->weight.scalar_type();
  auto pixels = images.scalar_type() == torch::kUInt8 ? images.to(dtype) * (1.0 / 255.0) : images.to(dtype);
  const std::int64_t b = images.size(0);
  const std::int64_t p = cfg_.patch_size;
  const std::int64_t g = n / p;
  auto patches = pixels.view({b, g, p, g, p, 3}).permute({0, 1, 3, 2, 4, 5}).reshape({b, g * g, p * p * 3});
  auto vision = patch_embed(patches) + image_pos;
  auto text = token_embed(tokens.to(torch::kLong)) + text_pos;
  auto x = torch::cat({vision, text}, 1);
  for (const auto& block : *fusion) x = block->as<SelfBlock>()->forward(x);
  return fusion_norm(x);
}

torch::Tensor VLEmbeddingModelImpl::forward(const torch::Tensor& images, const torch::Tensor& tokens) {
  auto fused = fuse(images, tokens);
  auto q = queries.unsqueeze(0).expand({images.size(0), queries.size(0), queries.size(1)});
  for (const auto& block : *qformer) q = block->as<QFormerBlock>()->forward(q, fused);
  return out_norm(q);
}

StateEncoderImpl::StateEncoderImpl(std::int64_t state_dim, std::int64_t width)
    : mlp(register_module("mlp", Mlp(state_dim, width, width))), state_dim_(state_dim) {}

torch::Tensor StateEncoderImpl::forward(const torch::Tensor& q) {
  if (q.dim() != 2 || q.size(1) != state_dim_) {
    throw std::invalid_argument("StateEncoder: expected [B, " + std::to_string(state_dim_) + "], got " + shape_str(q));
  }
  return mlp(q).unsqueeze(1);
}

ActionEncoderImpl::ActionEncoderImpl(std::int64_t action_dim, std::int64_t width, std::int64_t horizon)
    : fc1(register_module("fc1", torch::nn::Linear(action_dim, width))),
      fc2(register_module("fc2", torch::nn::Linear(width, width))),
      position(register_parameter("position", torch::zeros({horizon, width}))),
      action_dim_(action_dim),
      horizon_(horizon) {}

torch::Tensor ActionEncoderImpl::forward(const torch::Tensor& a_tau, const torch::Tensor& tau) {
  if (a_tau.dim() != 3 || a_tau.size(1) != horizon_ || a_tau.size(2) != action_dim_) {
    throw std::invalid_argument("ActionEncoder: expected [B, " + std::to_string(horizon_) + ", " +
                                std::to_string(action_dim_) + "], got " + shape_str(a_tau));
  }
  if (tau.dim() != 1 || tau.size(0) != a_tau.size(0)) throw std::invalid_argument("ActionEncoder: tau must be [B]");
  if (tau.numel() > 0 && (tau.min().item<double>() < 0.0 || tau.max().item<double>() > 1.0)) {
    throw std::invalid_argument("ActionEncoder: tau outside [0, 1]");
  }
  auto h = torch::gelu(fc1(a_tau)) + timestep_embedding(tau.to(a_tau.scalar_type()), fc1->weight.size(0)).unsqueeze(1);
  return fc2(h) + position;
}

ActionDecoderImpl::ActionDecoderImpl(std::int64_t width, std::int64_t action_dim)
    : mlp(register_module("mlp", Mlp(width, width, action_dim))) {}

torch::Tensor ActionDecoderImpl::forward(const torch::Tensor& x) { return mlp(x); }

FutureDecoderImpl::FutureDecoderImpl(std::int64_t width, std::int64_t tokens)
    : mlp(register_module("mlp", Mlp(width, width, width))), tokens_(tokens) {}

torch::Tensor FutureDecoderImpl::forward(const torch::Tensor& x) {
  if (x.dim() != 3 || x.size(1) != tokens_) {
    throw std::invalid_argument("FutureDecoder: expected " + std::to_string(tokens_) + " tokens, got " + shape_str(x));
  }
  return mlp(x);
}

torch::Tensor stack_images(const std::vector<datagen::Observation>& obs) {
  if (obs.empty()) throw std::invalid_argument("stack_images: empty batch");
  const auto h = obs.front().image.height;
  const auto w = obs.front().image.width;
  auto out = torch::empty({static_cast<std::int64_t>(obs.size()), h, w, 3}, torch::kUInt8);
  auto* dst = out.data_ptr<std::uint8_t>();
  const std::size_t stride = static_cast<std::size_t>(h) * w * 3;
  for (std::size_t i = 0; i < obs.size(); ++i) {
    if (obs[i].image.height != h || obs[i].image.width != w || obs[i].image.rgb.size() != stride) {
      throw std::invalid_argument("stack_images: inconsistent image shapes");
    }
    std::copy(obs[i].image.rgb.begin(), obs[i].image.rgb.end(), dst + i * stride);
  }
  return out;
}

torch::Tensor stack_tokens(const std::vector<datagen::Observation>& obs) {
  if (obs.empty()) throw std::invalid_argument("stack_tokens: empty batch");
  const auto t = static_cast<std::int64_t>(obs.front().instruction_tokens.size());
  auto out = torch::empty({static_cast<std::int64_t>(obs.size()), t}, torch::kLong);
  auto* dst = out.data_ptr<std::int64_t>();
  for (std::size_t i = 0; i < obs.size(); ++i) {
    if (static_cast<std::int64_t>(obs[i].instruction_tokens.size()) != t) {
      throw std::invalid_argument("stack_tokens: inconsistent instruction lengths");
    }
    for (std::int64_t k = 0; k < t; ++k) dst[static_cast<std::int64_t>(i) * t + k] = obs[i].instruction_tokens[static_cast<std::size_t>(k)];
  }
  return out;
}

torch::Tensor stack_states(const std::vector<datagen::StateVec>& q, torch::ScalarType dtype) {
  auto out = torch::empty({static_cast<std::int64_t>(q.size()), datagen::kStateDim}, torch::kFloat32);
  auto* dst = out.data_ptr<float>();
  for (std::size_t i = 0; i < q.size(); ++i) {
    for (int k = 0; k < datagen::kStateDim; ++k) dst[i * datagen::kStateDim + static_cast<std::size_t>(k)] = q[i][static_cast<std::size_t>(k)];
  }
  return out.to(dtype);
}

VLEmbedding encode_vl(VLEmbeddingModel& model, const datagen::Observation& obs, EmbeddingSource source) {
  auto tokens = model->forward(stack_images({obs}), stack_tokens({obs}));
  return VLEmbedding{tokens.squeeze(0), source};
}

}  // namespace flare
