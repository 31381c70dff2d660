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
#include "flare/trainer.hpp"

#include <torch/torch.h>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <functional>
#include <random>
#include <string>
#include <vector>

namespace flare::testing {

// Fresh, empty scratch directory under the system temp dir.
inline std::filesystem::path scratch_dir(const std::string& name) {
  auto dir = std::filesystem::temp_directory_path() / ("flare_test_" + name);
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);
  return dir;
}

// Small model for fast structural and gradient tests.
inline ModelConfig tiny_model(int width = 16, int dit_layers = 1, int tokens = 2) {
  ModelConfig c;
  c.width = width;
  c.heads = 2;
  c.ffn_mult = 2;
  c.fusion_layers = 1;
  c.qformer_layers = 1;
  c.vl_tokens = tokens;
  c.dit_layers = dit_layers;
  c.image_size = 16;
  c.patch_size = 8;
  c.text_len = 8;
  c.vocab_size = 10;
  return c;
}

// Training config sized for unit tests; image size follows the default env.
inline TrainConfig tiny_train_config(std::uint64_t seed = 0) {
  TrainConfig c;
  c.model = tiny_model(16, 2, 2);
  c.flow.H = 4;
  c.flare.tap_layer = 1;
  c.flare.future_tokens = 2;
  c.steps = 10;
  c.batch_size = 4;
  c.lr = 1e-3;
  c.checkpoint_every = 5;
  c.seed = seed;
  c.bind_env(datagen::EnvConfig{});
  return c;
}

inline datagen::Dataset small_dataset(int tasks = 2, int demos = 3, bool action_free = false, std::uint64_t seed = 0) {
  const datagen::EnvConfig env;
  return datagen::generate_dataset(datagen::make_task_suite(tasks, 0, env), demos, action_free, seed, env);
}

// Random uint8 images, tokens and states for a model config.
struct RandomInputs {
  torch::Tensor images;
  torch::Tensor tokens;
  torch::Tensor q;
};

inline RandomInputs random_inputs(const ModelConfig& cfg, std::int64_t batch, std::uint64_t seed,
                                  torch::ScalarType dtype = torch::kFloat64) {
  auto gen = at::make_generator<at::CPUGeneratorImpl>(seed);
  RandomInputs in;
  in.images = torch::randint(0, 256, {batch, cfg.image_size, cfg.image_size, 3}, gen, torch::kLong).to(torch::kUInt8);
  in.tokens = torch::randint(1, cfg.vocab_size, {batch, cfg.text_len}, gen, torch::kLong);
  in.q = torch::rand({batch, cfg.state_dim}, gen, dtype);
  return in;
}

struct FdReport {
  int coords = 0;
  double max_rel = 0.0;
  std::string worst;
};

// Central-difference check of d loss / d theta at randomly chosen
// coordinates, cycling over every parameter tensor. Relative error is
// |analytic - numeric| / max(|analytic| + |numeric|, floor).
inline FdReport fd_check(torch::nn::Module& module, const std::function<torch::Tensor()>& loss_fn, int coords,
                         std::uint64_t seed, double h = 1e-6, double floor = 1e-6) {
  for (auto& p : module.parameters()) p.mutable_grad() = torch::Tensor();
  loss_fn().backward();
  auto params = module.named_parameters();
  std::mt19937_64 rng(seed);
  FdReport rep;
  torch::NoGradGuard no_grad;
  for (int k = 0; k < coords; ++k) {
    auto& item = params[static_cast<std::size_t>(k) % params.size()];
    auto p = item.value();
    const auto idx = static_cast<std::int64_t>(rng() % static_cast<std::uint64_t>(p.numel()));
    auto flat = p.view(-1);
    const double analytic = p.grad().defined() ? p.grad().view(-1)[idx].item<double>() : 0.0;
    const double orig = flat[idx].item<double>();
    flat[idx] = orig + h;
    const double up = loss_fn().item<double>();
    flat[idx] = orig - h;
    const double down = loss_fn().item<double>();
    flat[idx] = orig;
    const double numeric = (up - down) / (2.0 * h);
    const double rel = std::abs(analytic - numeric) / std::max(std::abs(analytic) + std::abs(numeric), floor);
    if (rel > rep.max_rel) {
      rep.max_rel = rel;
      rep.worst = item.key() + "[" + std::to_string(idx) + "] analytic " + std::to_string(analytic) + " numeric " +
                  std::to_string(numeric);
    }
    ++rep.coords;
  }
  return rep;
}

}  // namespace flare::testing
