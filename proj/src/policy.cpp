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

#include "flare/policy.hpp"

#include <stdexcept>

namespace flare {

FlarePolicyImpl::FlarePolicyImpl(const ModelConfig& cfg, int chunk, int future_tokens)
    : cfg_(cfg), chunk_(chunk), future_count_(future_tokens) {
  cfg.validate();
  if (chunk < 1) throw std::invalid_argument("FlarePolicy: chunk must be >= 1");
  if (future_tokens < 0) throw std::invalid_argument("FlarePolicy: negative future token count");
  if (future_tokens > 0 && future_tokens != cfg.vl_tokens) {
    throw std::invalid_argument("FlarePolicy: future token count must equal the VL embedding token count");
  }
  vl = register_module("vl", VLEmbeddingModel(cfg));
  state_encoder = register_module("state_encoder", StateEncoder(cfg.state_dim, cfg.width));
  action_encoder = register_module("action_encoder", ActionEncoder(cfg.action_dim, cfg.width, chunk));
  dit = register_module("dit", DiT(cfg));
  action_decoder = register_module("action_decoder", ActionDecoder(cfg.width, cfg.action_dim));
  if (future_tokens > 0) {
    this->future_tokens = register_parameter("future_tokens", torch::zeros({future_tokens, cfg.width}));
    future_decoder = register_module("future_decoder", FutureDecoder(cfg.width, future_tokens));
  }
}

FlarePolicyImpl::Output FlarePolicyImpl::forward(const torch::Tensor& phi, const torch::Tensor& q,
                                                 const torch::Tensor& a_tau, const torch::Tensor& tau, int tap_layer) {
  if (tap_layer < 0 || tap_layer > dit->layers()) throw std::invalid_argument("FlarePolicy: tap layer out of range");
  const auto b = a_tau.size(0);
  auto state_tok = state_encoder(q);
  auto action_tok = action_encoder(a_tau, tau);
  torch::Tensor future;
  if (future_count_ > 0) future = future_tokens.unsqueeze(0).expand({b, future_count_, cfg_.width});
  auto seq = future.defined() ? torch::cat({state_tok, action_tok, future}, 1) : torch::cat({state_tok, action_tok}, 1);

  Output out;
  out.dit = dit->forward(seq, phi, future_count_ > 0 ? tap_layer : 0, future_count_);
  out.velocity = action_decoder(out.dit.final_tokens.slice(1, 1, 1 + chunk_));
  if (out.dit.tap_future.defined()) out.predicted_future = future_decoder(out.dit.tap_future);
  return out;
}

torch::Tensor FlarePolicyImpl::velocity(const torch::Tensor& phi, const torch::Tensor& a_tau, const torch::Tensor& q,
                                        double tau) {
  auto t = torch::full({a_tau.size(0)}, tau, a_tau.options());
  return forward(phi, q, a_tau, t, 0).velocity;
}

FlarePolicy make_policy(const ModelConfig& cfg, int chunk, int future_tokens, std::uint64_t seed,
                        torch::ScalarType dtype) {
  FlarePolicy policy(cfg, chunk, future_tokens);
  init_parameters(*policy, seed);
  policy->to(dtype);
  return policy;
}

VLEmbeddingModel make_embedding_model(const ModelConfig& cfg, std::uint64_t seed, torch::ScalarType dtype) {
  VLEmbeddingModel model(cfg);
  // Same parameter paths as inside a policy, so both initialize identically.
  init_parameters(*model, seed, "vl");
  model->to(dtype);
  return model;
}

void copy_parameters(torch::nn::Module& dst, const torch::nn::Module& src) {
  torch::NoGradGuard no_grad;
  auto d = dst.named_parameters();
  auto s = src.named_parameters();
  if (d.size() != s.size()) throw std::invalid_argument("copy_parameters: parameter count mismatch");
  for (std::size_t i = 0; i < d.size(); ++i) {
    if (d[i].key() != s[i].key() || !d[i].value().sizes().equals(s[i].value().sizes())) {
      throw std::invalid_argument("copy_parameters: structural mismatch at '" + d[i].key() + "'");
    }
    d[i].value().copy_(s[i].value());
  }
}

}  // namespace flare
