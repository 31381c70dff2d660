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

#include "flare/flowmatch.hpp"

#include <stdexcept>
#include <vector>

namespace flare::flowmatch {

void FlowConfig::validate() const {
  if (K < 1) throw std::invalid_argument("FlowConfig: K must be >= 1");
  if (!(s > 0.0 && s <= 1.0)) throw std::invalid_argument("FlowConfig: s must lie in (0, 1]");
  if (H < 1) throw std::invalid_argument("FlowConfig: H must be >= 1");
  if (!(beta_a > 0.0 && beta_b > 0.0)) throw std::invalid_argument("FlowConfig: Beta shapes must be positive");
  if (action_dim < 1) throw std::invalid_argument("FlowConfig: action_dim must be >= 1");
}

nlohmann::json FlowConfig::to_json() const {
  return {{"K", K}, {"s", s}, {"beta_a", beta_a}, {"beta_b", beta_b}, {"H", H}, {"action_dim", action_dim}};
}

FlowConfig FlowConfig::from_json(const nlohmann::json& j) {
  FlowConfig c;
  c.K = j.value("K", c.K);
  c.s = j.value("s", c.s);
  c.beta_a = j.value("beta_a", c.beta_a);
  c.beta_b = j.value("beta_b", c.beta_b);
  c.H = j.value("H", c.H);
  c.action_dim = j.value("action_dim", c.action_dim);
  return c;
}

double sample_tau(const FlowConfig& cfg, Rng& rng) {
  // Beta(a, b) as Ga / (Ga + Gb).
  std::gamma_distribution<double> ga(cfg.beta_a, 1.0);
  std::gamma_distribution<double> gb(cfg.beta_b, 1.0);
  const double u = ga(rng);
  const double v = gb(rng);
  const double x = u / (u + v);
  return cfg.s * (1.0 - x);
}

torch::Tensor sample_tau_batch(const FlowConfig& cfg, Rng& rng, std::int64_t n, torch::ScalarType dtype) {
  std::vector<double> taus(static_cast<std::size_t>(n));
  for (auto& t : taus) t = sample_tau(cfg, rng);
  return torch::tensor(taus, torch::kFloat64).to(dtype);
}

torch::Tensor standard_normal(torch::IntArrayRef shape, Rng& rng, torch::ScalarType dtype) {
  auto out = torch::empty(shape, torch::kFloat64);
  std::normal_distribution<double> normal(0.0, 1.0);
  auto* p = out.data_ptr<double>();
  for (std::int64_t i = 0; i < out.numel(); ++i) p[i] = normal(rng);
  return dtype == torch::kFloat64 ? out : out.to(dtype);
}

torch::Tensor noise_chunk(const torch::Tensor& actions, double tau, const torch::Tensor& eps) {
  if (!actions.sizes().equals(eps.sizes())) throw std::invalid_argument("noise_chunk: shape mismatch");
  if (!(tau >= 0.0 && tau <= 1.0)) throw std::invalid_argument("noise_chunk: tau outside [0, 1]");
  return tau * actions + (1.0 - tau) * eps;
}

torch::Tensor noise_chunk(const torch::Tensor& actions, const torch::Tensor& tau, const torch::Tensor& eps) {
  if (!actions.sizes().equals(eps.sizes())) throw std::invalid_argument("noise_chunk: shape mismatch");
  if (tau.dim() != 1 || tau.size(0) != actions.size(0)) {
    throw std::invalid_argument("noise_chunk: tau must hold one value per batch row");
  }
  if (tau.numel() > 0 && (tau.min().item<double>() < 0.0 || tau.max().item<double>() > 1.0)) {
    throw std::invalid_argument("noise_chunk: tau outside [0, 1]");
  }
  std::vector<std::int64_t> shape(static_cast<std::size_t>(actions.dim()), 1);
  shape[0] = tau.size(0);
  const auto t = tau.view(shape);
  return t * actions + (1.0 - t) * eps;
}

torch::Tensor velocity_target(const torch::Tensor& actions, const torch::Tensor& eps) {
  if (!actions.sizes().equals(eps.sizes())) throw std::invalid_argument("velocity_target: shape mismatch");
  return actions - eps;
}

torch::Tensor fm_loss(const torch::Tensor& pred, const torch::Tensor& target) {
  if (!pred.sizes().equals(target.sizes())) throw std::invalid_argument("fm_loss: shape mismatch");
  return (pred - target).pow(2).mean();
}

torch::Tensor euler_integrate(const VelocityField& field, const torch::Tensor& phi, const torch::Tensor& q,
                              const FlowConfig& cfg, Rng& rng) {
  cfg.validate();
  auto a = standard_normal({q.size(0), cfg.H, cfg.action_dim}, rng, q.scalar_type());
  const double dt = 1.0 / cfg.K;
  for (int k = 0; k < cfg.K; ++k) {
    const auto v = field(phi, a, q, k * dt);
    if (!v.sizes().equals(a.sizes())) throw std::runtime_error("euler_integrate: velocity has wrong shape");
    if (!torch::isfinite(v).all().item<bool>()) {
      throw std::runtime_error("euler_integrate: non-finite velocity at step " + std::to_string(k));
    }
    a = a + dt * v;
  }
  return a;
}

}  // namespace flare::flowmatch
