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

// Flow matching on linear noise-to-data paths.
//
// A chunk is noised as A_tau = tau * A + (1 - tau) * eps, so tau = 0 is pure
// noise and tau = 1 is data. The regression target is the path derivative
// dA_tau/dtau = A - eps, and sampling integrates the learned field forward
// from tau = 0 with K Euler steps of size 1/K.

#pragma once

#include "flare/common.hpp"

#include <nlohmann/json.hpp>
#include <torch/torch.h>

#include <functional>

namespace flare::flowmatch {

struct FlowConfig {
  int K = 4;            // Euler steps at inference
  double s = 0.999;     // timestep cutoff
  double beta_a = 1.5;
  double beta_b = 1.0;
  int H = 16;           // chunk length
  int action_dim = 3;

  void validate() const;
  nlohmann::json to_json() const;
  static FlowConfig from_json(const nlohmann::json& j);
};

// tau = s * (1 - x), x ~ Beta(beta_a, beta_b); lands in [0, s].
double sample_tau(const FlowConfig& cfg, Rng& rng);
torch::Tensor sample_tau_batch(const FlowConfig& cfg, Rng& rng, std::int64_t n,
                               torch::ScalarType dtype = torch::kFloat32);

// i.i.d. N(0, 1) drawn from `rng` in row-major order.
torch::Tensor standard_normal(torch::IntArrayRef shape, Rng& rng, torch::ScalarType dtype = torch::kFloat32);

torch::Tensor noise_chunk(const torch::Tensor& actions, double tau, const torch::Tensor& eps);
// Per-sample timesteps: `tau` has one entry per leading batch index.
torch::Tensor noise_chunk(const torch::Tensor& actions, const torch::Tensor& tau, const torch::Tensor& eps);

torch::Tensor velocity_target(const torch::Tensor& actions, const torch::Tensor& eps);

// Mean squared error over every element.
torch::Tensor fm_loss(const torch::Tensor& pred, const torch::Tensor& target);

using VelocityField = std::function<torch::Tensor(const torch::Tensor& phi, const torch::Tensor& a_tau,
                                                  const torch::Tensor& q, double tau)>;

// Draws A ~ N(0, I) of shape [q.size(0), H, action_dim] and applies
// A <- A + V(phi, A, q, k/K) / K for k = 0..K-1. Throws on non-finite V.
torch::Tensor euler_integrate(const VelocityField& field, const torch::Tensor& phi, const torch::Tensor& q,
                              const FlowConfig& cfg, Rng& rng);

}  // namespace flare::flowmatch
