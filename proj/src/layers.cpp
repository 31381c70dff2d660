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

#include "flare/layers.hpp"

#include "flare/common.hpp"

#include <cmath>
#include <random>
#include <stdexcept>

namespace flare {

void ModelConfig::validate() const {
  if (width < 2 || width % 2 != 0) throw std::invalid_argument("ModelConfig: width must be even and >= 2");
  if (heads < 1 || width % heads != 0) throw std::invalid_argument("ModelConfig: width must divide by heads");
  if (ffn_mult < 1) throw std::invalid_argument("ModelConfig: ffn_mult must be >= 1");
  if (fusion_layers < 0 || qformer_layers < 1) throw std::invalid_argument("ModelConfig: bad embedding depth");
  if (vl_tokens < 1) throw std::invalid_argument("ModelConfig: vl_tokens must be >= 1");
  if (dit_layers < 1) throw std::invalid_argument("ModelConfig: dit_layers must be >= 1");
  if (patch_size < 1 || image_size % patch_size != 0) {
    throw std::invalid_argument("ModelConfig: image_size must be a multiple of patch_size");
  }
  if (text_len < 1 || vocab_size < 1 || state_dim < 1 || action_dim < 1) {
    throw std::invalid_argument("ModelConfig: non-positive dimension");
  }
}

nlohmann::json ModelConfig::to_json() const {
  return {{"width", width},         {"heads", heads},           {"ffn_mult", ffn_mult},
          {"fusion_layers", fusion_layers}, {"qformer_layers", qformer_layers}, {"vl_tokens", vl_tokens},
          {"dit_layers", dit_layers}, {"image_size", image_size}, {"patch_size", patch_size},
          {"text_len", text_len},   {"vocab_size", vocab_size}, {"state_dim", state_dim},
          {"action_dim", action_dim}};
}

ModelConfig ModelConfig::from_json(const nlohmann::json& j) {
  ModelConfig c;
  c.width = j.value("width", c.width);
  c.heads = j.value("heads", c.heads);
  c.ffn_mult = j.value("ffn_mult", c.ffn_mult);
  c.fusion_layers = j.value("fusion_layers", c.fusion_layers);
  c.qformer_layers = j.value("qformer_layers", c.qformer_layers);
  c.vl_tokens = j.value("vl_tokens", c.vl_tokens);
  c.dit_layers = j.value("dit_layers", c.dit_layers);
  c.image_size = j.value("image_size", c.image_size);
  c.patch_size = j.value("patch_size", c.patch_size);
  c.text_len = j.value("text_len", c.text_len);
  c.vocab_size = j.value("vocab_size", c.vocab_size);
  c.state_dim = j.value("state_dim", c.state_dim);
  c.action_dim = j.value("action_dim", c.action_dim);
  return c;
}

MlpImpl::MlpImpl(std::int64_t in, std::int64_t hidden, std::int64_t out)
    : fc1(register_module("fc1", torch::nn::Linear(in, hidden))),
      fc2(register_module("fc2", torch::nn::Linear(hidden, out))) {}

torch::Tensor MlpImpl::forward(const torch::Tensor& x) { return fc2(torch::gelu(fc1(x))); }

AttentionImpl::AttentionImpl(std::int64_t width, std::int64_t heads)
    : query(register_module("query", torch::nn::Linear(width, width))),
      key(register_module("key", torch::nn::Linear(width, width))),
      value(register_module("value", torch::nn::Linear(width, width))),
      out(register_module("out", torch::nn::Linear(width, width))),
      heads_(heads) {}

torch::Tensor AttentionImpl::forward(const torch::Tensor& x, const torch::Tensor& context) {
  const auto b = x.size(0);
  const auto s = x.size(1);
  const auto d = x.size(2);
  const auto sc = context.size(1);
  const auto dh = d / heads_;
  auto q = query(x).view({b, s, heads_, dh}).transpose(1, 2);
  auto k = key(context).view({b, sc, heads_, dh}).transpose(1, 2);
  auto v = value(context).view({b, sc, heads_, dh}).transpose(1, 2);
  auto weights = torch::softmax(torch::matmul(q, k.transpose(-2, -1)) * (1.0 / std::sqrt(static_cast<double>(dh))), -1);
  auto mixed = torch::matmul(weights, v).transpose(1, 2).reshape({b, s, d});
  return out(mixed);
}

SelfBlockImpl::SelfBlockImpl(std::int64_t width, std::int64_t heads, std::int64_t ffn_mult)
    : norm_attn(register_module("norm_attn", torch::nn::LayerNorm(torch::nn::LayerNormOptions({width})))),
      attn(register_module("attn", Attention(width, heads))),
      norm_ffn(register_module("norm_ffn", torch::nn::LayerNorm(torch::nn::LayerNormOptions({width})))),
      ffn(register_module("ffn", Mlp(width, ffn_mult * width, width))) {}

torch::Tensor SelfBlockImpl::forward(torch::Tensor x) {
  auto h = norm_attn(x);
  x = x + attn(h, h);
  return x + ffn(norm_ffn(x));
}

QFormerBlockImpl::QFormerBlockImpl(std::int64_t width, std::int64_t heads, std::int64_t ffn_mult)
    : norm_self(register_module("norm_self", torch::nn::LayerNorm(torch::nn::LayerNormOptions({width})))),
      self_attn(register_module("self_attn", Attention(width, heads))),
      norm_cross(register_module("norm_cross", torch::nn::LayerNorm(torch::nn::LayerNormOptions({width})))),
      cross_attn(register_module("cross_attn", Attention(width, heads))),
      norm_ffn(register_module("norm_ffn", torch::nn::LayerNorm(torch::nn::LayerNormOptions({width})))),
      ffn(register_module("ffn", Mlp(width, ffn_mult * width, width))) {}

torch::Tensor QFormerBlockImpl::forward(torch::Tensor queries, const torch::Tensor& context) {
  auto h = norm_self(queries);
  queries = queries + self_attn(h, h);
  queries = queries + cross_attn(norm_cross(queries), context);
  return queries + ffn(norm_ffn(queries));
}

torch::Tensor timestep_embedding(const torch::Tensor& tau, std::int64_t width) {
  const auto half = width / 2;
  auto opts = torch::TensorOptions().dtype(tau.scalar_type());
  auto freqs = torch::exp(torch::arange(half, opts) * (-std::log(10000.0) / static_cast<double>(half)));
  auto args = (tau * 1000.0).unsqueeze(-1) * freqs.unsqueeze(0);
  return torch::cat({torch::sin(args), torch::cos(args)}, -1);
}

namespace {

void fill_from(torch::Tensor& param, const std::vector<double>& values) {
  auto src = torch::tensor(values, torch::kFloat64).view(param.sizes()).to(param.scalar_type());
  param.copy_(src);
}

// Fixed 2D sin-cos table for a square g x g grid: the first half of the
// channels encode the row, the second half the column.
std::vector<double> sincos_grid(std::int64_t cells, std::int64_t width) {
  const auto g = static_cast<std::int64_t>(std::lround(std::sqrt(static_cast<double>(cells))));
  const std::int64_t quarter = width / 4;
  std::vector<double> out(static_cast<std::size_t>(cells * width), 0.0);
  for (std::int64_t i = 0; i < cells; ++i) {
    const double coord[2] = {static_cast<double>(i / g), static_cast<double>(i % g)};
    for (int axis = 0; axis < 2; ++axis) {
      for (std::int64_t k = 0; k < quarter; ++k) {
        const double omega = std::pow(10000.0, -static_cast<double>(k) / static_cast<double>(quarter));
        const auto base = static_cast<std::size_t>(i * width + axis * 2 * quarter + k);
        out[base] = std::sin(coord[axis] * omega);
        out[base + static_cast<std::size_t>(quarter)] = std::cos(coord[axis] * omega);
      }
    }
  }
  return out;
}

}  // namespace

void init_parameters(torch::nn::Module& module, std::uint64_t seed, const std::string& prefix) {
  torch::NoGradGuard no_grad;
  for (const auto& item : module.named_modules(prefix)) {
    auto& m = *item.value();
    const std::string& path = item.key();
    const bool is_linear = dynamic_cast<torch::nn::LinearImpl*>(&m) != nullptr;
    const bool is_norm = dynamic_cast<torch::nn::LayerNormImpl*>(&m) != nullptr;
    for (auto& p : m.named_parameters(/*recurse=*/false)) {
      const std::string name = path.empty() ? p.key() : path + "." + p.key();
      auto& t = p.value();
      const auto n = static_cast<std::size_t>(t.numel());
      if ((is_linear || is_norm) && p.key() == "bias") {
        t.zero_();
        continue;
      }
      if (is_norm) {
        t.fill_(1.0);
        continue;
      }
      if (p.key() == "image_pos" && t.dim() == 2) {
        fill_from(t, sincos_grid(t.size(0), t.size(1)));
        continue;
      }
      Rng rng(derive_seed(seed, fnv1a(name)));
      std::vector<double> values(n);
      if (is_linear) {
        const double bound = 1.0 / std::sqrt(static_cast<double>(t.size(1)));
        std::uniform_real_distribution<double> u(-bound, bound);
        for (auto& v : values) v = u(rng);
      } else {
        std::normal_distribution<double> g(0.0, 0.02);
        for (auto& v : values) v = g(rng);
      }
      fill_from(t, values);
    }
  }
}

}  // namespace flare
