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

#include "flare/objective.hpp"

#include "flare/policy.hpp"

#include <stdexcept>

namespace flare {

void FlareConfig::validate(int dit_layers) const {
  if (!(lambda >= 0.0)) throw std::invalid_argument("flare: lambda must be >= 0");
  if (tap_layer < 1 || tap_layer > dit_layers) {
    throw std::invalid_argument("flare: tap_layer " + std::to_string(tap_layer) + " outside [1, " +
                                std::to_string(dit_layers) + "]");
  }
  if (future_tokens < 1) throw std::invalid_argument("flare: future_tokens must be >= 1");
  if (!(ema_rho >= 0.0 && ema_rho <= 1.0)) throw std::invalid_argument("flare: ema_rho must lie in [0, 1]");
  if (target_embedding != "action_aware" && target_embedding != "random") {
    throw std::invalid_argument("flare: target_embedding must be action_aware or random");
  }
}

nlohmann::json FlareConfig::to_json() const {
  return {{"lambda", lambda},
          {"tap_layer", tap_layer},
          {"future_tokens", future_tokens},
          {"ema_rho", ema_rho},
          {"target_embedding", target_embedding}};
}

FlareConfig FlareConfig::from_json(const nlohmann::json& j) {
  FlareConfig c;
  c.lambda = j.value("lambda", c.lambda);
  c.tap_layer = j.value("tap_layer", c.tap_layer);
  c.future_tokens = j.value("future_tokens", c.future_tokens);
  c.ema_rho = j.value("ema_rho", c.ema_rho);
  c.target_embedding = j.value("target_embedding", c.target_embedding);
  return c;
}

torch::Tensor align_loss(const torch::Tensor& pred, const torch::Tensor& target) {
  if (pred.dim() != 3 || !pred.sizes().equals(target.sizes())) {
    throw std::invalid_argument("align_loss: pred and target must share shape [B, M, D]");
  }
  auto dot = (pred * target).sum(-1);
  auto denom = (pred.norm(2, -1) * target.norm(2, -1)).clamp_min(1e-8);
  return (1.0 - dot / denom).mean();
}

torch::Tensor combined_loss(const torch::Tensor& fm, const torch::Tensor& align, double lambda) {
  return fm + lambda * align;
}

TargetEmbedding::TargetEmbedding(VLEmbeddingModel model, bool ema) : model_(std::move(model)), ema_(ema) {
  for (auto& p : model_->parameters()) p.set_requires_grad(false);
  model_->eval();
}

TargetEmbedding TargetEmbedding::copy_of(const VLEmbeddingModel& policy_vl) {
  VLEmbeddingModel m(policy_vl->config());
  m->to(policy_vl->parameters().front().scalar_type());
  copy_parameters(*m, *policy_vl);
  return TargetEmbedding(m, true);
}

torch::Tensor TargetEmbedding::encode(const torch::Tensor& images, const torch::Tensor& tokens) {
  torch::NoGradGuard no_grad;
  return model_->forward(images, tokens);
}

void ema_update(VLEmbeddingModel& target, const VLEmbeddingModel& policy, double rho) {
  torch::NoGradGuard no_grad;
  auto t = target->named_parameters();
  auto p = policy->named_parameters();
  if (t.size() != p.size()) throw std::invalid_argument("ema_update: parameter count mismatch");
  for (std::size_t i = 0; i < t.size(); ++i) {
    if (t[i].key() != p[i].key() || !t[i].value().sizes().equals(p[i].value().sizes())) {
      throw std::invalid_argument("ema_update: structural mismatch at '" + t[i].key() + "'");
    }
    t[i].value().mul_(rho).add_(p[i].value(), 1.0 - rho);
  }
}

torch::Tensor flare_targets(TargetEmbedding& target, const datagen::Observation& obs_future) {
  return target.encode(stack_images({obs_future}), stack_tokens({obs_future})).squeeze(0);
}

}  // namespace flare
