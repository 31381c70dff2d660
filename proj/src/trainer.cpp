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

#include "flare/trainer.hpp"

#include "flare/tensor_io.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <numbers>
#include <sstream>

namespace flare {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

using Setter = std::function<void(TrainConfig&, const json&)>;

const std::map<std::string, Setter>& setters() {
  static const std::map<std::string, Setter> table = {
      {"width", [](TrainConfig& c, const json& v) { c.model.width = v.get<int>(); }},
      {"heads", [](TrainConfig& c, const json& v) { c.model.heads = v.get<int>(); }},
      {"ffn_mult", [](TrainConfig& c, const json& v) { c.model.ffn_mult = v.get<int>(); }},
      {"fusion_layers", [](TrainConfig& c, const json& v) { c.model.fusion_layers = v.get<int>(); }},
      {"qformer_layers", [](TrainConfig& c, const json& v) { c.model.qformer_layers = v.get<int>(); }},
      {"vl_tokens", [](TrainConfig& c, const json& v) { c.model.vl_tokens = v.get<int>(); }},
      {"dit_layers", [](TrainConfig& c, const json& v) { c.model.dit_layers = v.get<int>(); }},
      {"patch_size", [](TrainConfig& c, const json& v) { c.model.patch_size = v.get<int>(); }},
      {"K", [](TrainConfig& c, const json& v) { c.flow.K = v.get<int>(); }},
      {"s", [](TrainConfig& c, const json& v) { c.flow.s = v.get<double>(); }},
      {"beta_a", [](TrainConfig& c, const json& v) { c.flow.beta_a = v.get<double>(); }},
      {"beta_b", [](TrainConfig& c, const json& v) { c.flow.beta_b = v.get<double>(); }},
      {"H", [](TrainConfig& c, const json& v) { c.flow.H = v.get<int>(); }},
      {"lambda", [](TrainConfig& c, const json& v) { c.flare.lambda = v.get<double>(); }},
      {"tap_layer", [](TrainConfig& c, const json& v) { c.flare.tap_layer = v.get<int>(); }},
      {"future_tokens", [](TrainConfig& c, const json& v) { c.flare.future_tokens = v.get<int>(); }},
      {"ema_rho", [](TrainConfig& c, const json& v) { c.flare.ema_rho = v.get<double>(); }},
      {"target_embedding", [](TrainConfig& c, const json& v) { c.flare.target_embedding = v.get<std::string>(); }},
      {"mode", [](TrainConfig& c, const json& v) { c.mode = v.get<std::string>(); }},
      {"dtype", [](TrainConfig& c, const json& v) { c.dtype = v.get<std::string>(); }},
      {"steps", [](TrainConfig& c, const json& v) { c.steps = v.get<int>(); }},
      {"batch_size", [](TrainConfig& c, const json& v) { c.batch_size = v.get<int>(); }},
      {"lr", [](TrainConfig& c, const json& v) { c.lr = v.get<double>(); }},
      {"beta1", [](TrainConfig& c, const json& v) { c.beta1 = v.get<double>(); }},
      {"beta2", [](TrainConfig& c, const json& v) { c.beta2 = v.get<double>(); }},
      {"adam_eps", [](TrainConfig& c, const json& v) { c.adam_eps = v.get<double>(); }},
      {"weight_decay", [](TrainConfig& c, const json& v) { c.weight_decay = v.get<double>(); }},
      {"warmup_ratio", [](TrainConfig& c, const json& v) { c.warmup_ratio = v.get<double>(); }},
      {"action_free_fraction", [](TrainConfig& c, const json& v) { c.action_free_fraction = v.get<double>(); }},
      {"seed", [](TrainConfig& c, const json& v) { c.seed = v.get<std::uint64_t>(); }},
      {"checkpoint_every", [](TrainConfig& c, const json& v) { c.checkpoint_every = v.get<int>(); }},
      {"holdout_fraction", [](TrainConfig& c, const json& v) { c.holdout_fraction = v.get<double>(); }},
      {"log_every", [](TrainConfig& c, const json& v) { c.log_every = v.get<int>(); }},
      {"augment_shift", [](TrainConfig& c, const json& v) { c.augment_shift = v.get<int>(); }},
      // Bound from the dataset; accepted so a saved config reloads verbatim.
      {"image_size", [](TrainConfig& c, const json& v) { c.model.image_size = v.get<int>(); }},
      {"text_len", [](TrainConfig& c, const json& v) { c.model.text_len = v.get<int>(); }},
      {"vocab_size", [](TrainConfig& c, const json& v) { c.model.vocab_size = v.get<int>(); }},
  };
  return table;
}

void check_steps_and_sizes(const TrainConfig& c, bool allow_zero_steps) {
  if (c.steps < (allow_zero_steps ? 0 : 1)) throw std::invalid_argument("train config: steps must be >= 1");
  if (c.batch_size < 1) throw std::invalid_argument("train config: batch_size must be >= 1");
}

void validate_config(const TrainConfig& c, bool allow_zero_steps) {
  c.model.validate();
  c.flow.validate();
  check_steps_and_sizes(c, allow_zero_steps);
  if (c.mode != "flare" && c.mode != "policy_only") throw std::invalid_argument("train config: mode must be flare or policy_only");
  if (c.dtype != "float32" && c.dtype != "float64") throw std::invalid_argument("train config: dtype must be float32 or float64");
  if (c.mode == "flare") {
    c.flare.validate(c.model.dit_layers);
    if (c.flare.future_tokens != c.model.vl_tokens) {
      throw std::invalid_argument("train config: future_tokens must equal vl_tokens");
    }
  }
  if (!(c.lr >= 0.0)) throw std::invalid_argument("train config: lr must be >= 0");
  if (!(c.warmup_ratio >= 0.0 && c.warmup_ratio <= 1.0)) throw std::invalid_argument("train config: warmup_ratio outside [0, 1]");
  if (!(c.action_free_fraction >= 0.0 && c.action_free_fraction <= 1.0)) {
    throw std::invalid_argument("train config: action_free_fraction outside [0, 1]");
  }
  if (c.checkpoint_every < 1) throw std::invalid_argument("train config: checkpoint_every must be >= 1");
  if (!(c.holdout_fraction > 0.0 && c.holdout_fraction < 1.0)) {
    throw std::invalid_argument("train config: holdout_fraction outside (0, 1)");
  }
  if (c.log_every < 1) throw std::invalid_argument("train config: log_every must be >= 1");
  if (c.augment_shift < 0 || 2 * c.augment_shift >= c.model.image_size) {
    throw std::invalid_argument("train config: augment_shift must be in [0, image_size / 2)");
  }
}

void set_lr(torch::optim::AdamW& opt, double lr) {
  for (auto& group : opt.param_groups()) static_cast<torch::optim::AdamWOptions&>(group.options()).lr(lr);
}

torch::Tensor cat0(const std::vector<torch::Tensor>& parts) { return parts.size() == 1 ? parts.front() : torch::cat(parts, 0); }

std::string id_list(const std::vector<std::int64_t>& ids) {
  std::string s = "[";
  for (std::size_t i = 0; i < ids.size(); ++i) s += (i ? ", " : "") + std::to_string(ids[i]);
  return s + "]";
}

void check_finite(const torch::Tensor& loss, const TrainState& state, const Batch* labeled, const Batch* action_free) {
  if (std::isfinite(loss.item<double>())) return;
  std::ostringstream msg;
  msg << "non-finite loss at step " << state.step << "; labeled ids " << (labeled ? id_list(labeled->ids) : "[]")
      << "; action-free ids " << (action_free ? id_list(action_free->ids) : "[]");
  throw TrainingDiverged(msg.str());
}

std::string shape_of(const torch::Tensor& t) {
  std::string s = "[";
  for (std::int64_t i = 0; i < t.dim(); ++i) s += (i ? ", " : "") + std::to_string(t.size(i));
  return s + "]";
}

void load_into(torch::nn::Module& module, const io::NamedArrays& na, const std::string& prefix) {
  torch::NoGradGuard no_grad;
  std::size_t expected = 0;
  for (auto& p : module.named_parameters()) {
    const auto key = prefix + p.key();
    if (!na.contains(key)) throw std::runtime_error("checkpoint: missing array '" + key + "'");
    const auto& src = na.at(key);
    if (!src.sizes().equals(p.value().sizes())) {
      throw std::runtime_error("checkpoint: shape mismatch for '" + key + "': file " + shape_of(src) + ", model " +
                               shape_of(p.value()));
    }
    p.value().copy_(src);
    ++expected;
  }
  std::size_t present = 0;
  for (const auto& [name, _] : na.arrays) present += name.rfind(prefix, 0) == 0 ? 1 : 0;
  if (present != expected) {
    throw std::runtime_error("checkpoint: " + std::to_string(present) + " arrays under '" + prefix + "' but model has " +
                             std::to_string(expected) + " parameters");
  }
}

void store_module(io::NamedArrays& na, const torch::nn::Module& module, const std::string& prefix) {
  for (const auto& p : module.named_parameters()) na.arrays[prefix + p.key()] = p.value().detach().clone();
}

datagen::Dataset subset(const datagen::Dataset& ds, const std::vector<std::size_t>& episodes) {
  datagen::Dataset out;
  out.manifest = ds.manifest;
  out.env = ds.env;
  out.suite = ds.suite;
  for (auto i : episodes) out.episodes.push_back(ds.episodes[i]);
  return out;
}

}  // namespace

torch::ScalarType TrainConfig::scalar_type() const { return dtype == "float64" ? torch::kFloat64 : torch::kFloat32; }

void TrainConfig::bind_env(const datagen::EnvConfig& env) {
  model.image_size = env.image_size;
  model.text_len = env.text_len;
  model.vocab_size = env.vocab_size();
  model.state_dim = datagen::kStateDim;
  model.action_dim = datagen::kActionDim;
  flow.action_dim = datagen::kActionDim;
}

void TrainConfig::validate() const { validate_config(*this, false); }

json TrainConfig::to_json() const {
  return {{"width", model.width},
          {"heads", model.heads},
          {"ffn_mult", model.ffn_mult},
          {"fusion_layers", model.fusion_layers},
          {"qformer_layers", model.qformer_layers},
          {"vl_tokens", model.vl_tokens},
          {"dit_layers", model.dit_layers},
          {"patch_size", model.patch_size},
          {"image_size", model.image_size},
          {"text_len", model.text_len},
          {"vocab_size", model.vocab_size},
          {"K", flow.K},
          {"s", flow.s},
          {"beta_a", flow.beta_a},
          {"beta_b", flow.beta_b},
          {"H", flow.H},
          {"lambda", flare.lambda},
          {"tap_layer", flare.tap_layer},
          {"future_tokens", flare.future_tokens},
          {"ema_rho", flare.ema_rho},
          {"target_embedding", flare.target_embedding},
          {"mode", mode},
          {"dtype", dtype},
          {"steps", steps},
          {"batch_size", batch_size},
          {"lr", lr},
          {"beta1", beta1},
          {"beta2", beta2},
          {"adam_eps", adam_eps},
          {"weight_decay", weight_decay},
          {"warmup_ratio", warmup_ratio},
          {"action_free_fraction", action_free_fraction},
          {"seed", seed},
          {"checkpoint_every", checkpoint_every},
          {"holdout_fraction", holdout_fraction},
          {"log_every", log_every},
          {"augment_shift", augment_shift}};
}

TrainConfig TrainConfig::from_json(const json& j) {
  if (!j.is_object()) throw std::invalid_argument("train config: expected a flat JSON object");
  TrainConfig c;
  bool future_given = false;
  for (const auto& [key, value] : j.items()) {
    auto it = setters().find(key);
    if (it == setters().end()) throw std::invalid_argument("train config: unknown key '" + key + "'");
    try {
      it->second(c, value);
    } catch (const json::exception& e) {
      throw std::invalid_argument("train config: bad value for '" + key + "': " + e.what());
    }
    future_given = future_given || key == "future_tokens";
  }
  if (!future_given) c.flare.future_tokens = c.model.vl_tokens;
  return c;
}

TrainConfig TrainConfig::load(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open config " + path.string());
  json j;
  try {
    j = json::parse(in);
  } catch (const json::parse_error& e) {
    throw std::invalid_argument("config " + path.string() + ": " + e.what());
  }
  return from_json(j);
}

std::string TrainConfig::hash() const { return to_hex(fnv1a(to_json().dump())); }

double learning_rate(const TrainConfig& cfg, std::int64_t step) {
  const double total = cfg.steps;
  const double warm = cfg.warmup_ratio * total;
  const double s = static_cast<double>(std::clamp<std::int64_t>(step, 0, cfg.steps));
  if (s < warm) return cfg.lr * s / warm;
  if (total <= warm) return cfg.lr;
  const double progress = (s - warm) / (total - warm);
  return cfg.lr * 0.5 * (1.0 + std::cos(std::numbers::pi * progress));
}

ChunkDataset::ChunkDataset(const std::vector<const datagen::Dataset*>& datasets, int horizon) : horizon_(horizon) {
  if (datasets.empty()) throw std::invalid_argument("ChunkDataset: no datasets");
  if (horizon < 1) throw std::invalid_argument("ChunkDataset: horizon must be >= 1");
  const auto& env = datasets.front()->env;
  has_actions_ = !datasets.front()->manifest.action_free;
  std::int64_t n_obs = 0;
  std::int64_t n_act = 0;
  for (const auto* ds : datasets) {
    if (ds->env.to_json() != env.to_json()) throw std::invalid_argument("ChunkDataset: datasets use different environments");
    if (ds->manifest.action_free == has_actions_) {
      throw std::invalid_argument("ChunkDataset: cannot mix labeled and action-free datasets");
    }
    for (const auto& ep : ds->episodes) {
      if (has_actions_ && !ep.actions) throw std::invalid_argument("ChunkDataset: labeled episode without actions");
      n_obs += ep.length();
      if (has_actions_) n_act += static_cast<std::int64_t>(ep.actions->size());
    }
  }
  const std::int64_t side = env.image_size;
  const std::int64_t text = env.text_len;
  images_ = torch::empty({n_obs, side, side, 3}, torch::kUInt8);
  tokens_ = torch::empty({n_obs, text}, torch::kLong);
  proprio_ = torch::empty({n_obs, datagen::kStateDim}, torch::kFloat32);
  actions_ = torch::empty({std::max<std::int64_t>(n_act, 1), datagen::kActionDim}, torch::kFloat32);
  auto* img = images_.data_ptr<std::uint8_t>();
  auto* tok = tokens_.data_ptr<std::int64_t>();
  auto* q = proprio_.data_ptr<float>();
  auto* act = actions_.data_ptr<float>();
  const std::size_t frame = static_cast<std::size_t>(side * side * 3);

  std::int64_t obs_base = 0;
  std::int64_t act_base = 0;
  for (const auto* ds : datasets) {
    for (const auto& ep : ds->episodes) {
      const int len = ep.length();
      for (int t = 0; t < len; ++t) {
        const auto& o = ep.observations[static_cast<std::size_t>(t)];
        if (o.image.rgb.size() != frame || static_cast<std::int64_t>(o.instruction_tokens.size()) != text) {
          throw std::invalid_argument("ChunkDataset: observation shape does not match the environment");
        }
        std::copy(o.image.rgb.begin(), o.image.rgb.end(), img + static_cast<std::size_t>(obs_base + t) * frame);
        for (std::int64_t k = 0; k < text; ++k) tok[(obs_base + t) * text + k] = o.instruction_tokens[static_cast<std::size_t>(k)];
        for (int k = 0; k < datagen::kStateDim; ++k) q[(obs_base + t) * datagen::kStateDim + k] = ep.proprio[static_cast<std::size_t>(t)][static_cast<std::size_t>(k)];
      }
      const std::int64_t na = has_actions_ ? static_cast<std::int64_t>(ep.actions->size()) : 0;
      for (std::int64_t i = 0; i < na; ++i) {
        const auto a = datagen::normalize_action((*ep.actions)[static_cast<std::size_t>(i)], env);
        for (int k = 0; k < datagen::kActionDim; ++k) act[(act_base + i) * datagen::kActionDim + k] = a[static_cast<std::size_t>(k)];
      }
      // Same indexing as datagen::chunk_at.
      for (int t = 0; t + 1 < len; ++t) {
        obs_index_.push_back(obs_base + t);
        future_index_.push_back(obs_base + std::min(t + horizon, len - 1));
        for (int i = 0; i < horizon; ++i) {
          action_rows_.push_back(has_actions_ ? act_base + std::min<std::int64_t>(t + i, na - 1) : 0);
        }
      }
      obs_base += len;
      act_base += na;
    }
  }
  if (obs_index_.empty()) throw std::invalid_argument("ChunkDataset: no chunks (episodes too short)");
}

Batch ChunkDataset::gather(const std::vector<std::int64_t>& ids, torch::ScalarType dtype) const {
  Batch b;
  b.ids = ids;
  const auto n = static_cast<std::int64_t>(ids.size());
  auto obs = torch::empty({n}, torch::kLong);
  auto fut = torch::empty({n}, torch::kLong);
  auto rows = torch::empty({n * horizon_}, torch::kLong);
  auto* o = obs.data_ptr<std::int64_t>();
  auto* f = fut.data_ptr<std::int64_t>();
  auto* r = rows.data_ptr<std::int64_t>();
  for (std::int64_t i = 0; i < n; ++i) {
    const auto id = ids[static_cast<std::size_t>(i)];
    if (id < 0 || id >= size()) throw std::out_of_range("ChunkDataset: sample id " + std::to_string(id) + " out of range");
    o[i] = obs_index_[static_cast<std::size_t>(id)];
    f[i] = future_index_[static_cast<std::size_t>(id)];
    for (int h = 0; h < horizon_; ++h) r[i * horizon_ + h] = action_rows_[static_cast<std::size_t>(id * horizon_ + h)];
  }
  b.images = images_.index_select(0, obs);
  b.tokens = tokens_.index_select(0, obs);
  b.proprio = proprio_.index_select(0, obs).to(dtype);
  b.future_images = images_.index_select(0, fut);
  if (has_actions_) b.actions = actions_.index_select(0, rows).view({n, horizon_, datagen::kActionDim}).to(dtype);
  return b;
}

TrainState make_train_state(const TrainConfig& cfg, const VLEmbeddingModel& init_embedding) {
  cfg.validate();
  TrainState st;
  st.cfg = cfg;
  const auto dtype = cfg.scalar_type();
  st.policy = make_policy(cfg.model, cfg.flow.H, cfg.future_tokens(), derive_seed(cfg.seed, fnv1a("policy")), dtype);
  if (init_embedding) copy_parameters(*st.policy->vl, *init_embedding);
  if (cfg.uses_alignment()) {
    if (cfg.flare.target_embedding == "random") {
      st.target.emplace(make_embedding_model(cfg.model, derive_seed(cfg.seed, fnv1a("random_target")), dtype), false);
    } else {
      st.target.emplace(TargetEmbedding::copy_of(st.policy->vl));
    }
  }
  torch::optim::AdamWOptions opts(cfg.lr);
  opts.betas({cfg.beta1, cfg.beta2}).eps(cfg.adam_eps).weight_decay(cfg.weight_decay);
  st.optimizer = std::make_unique<torch::optim::AdamW>(st.policy->parameters(), opts);
  st.rng = Rng(derive_seed(cfg.seed, fnv1a("train")));
  return st;
}

json StepMetrics::to_json() const {
  return {{"step", step},       {"fm_loss", fm_loss}, {"align_loss", align_loss},   {"combined", combined},
          {"lr", lr},           {"labeled", labeled}, {"action_free", action_free}};
}

StepNoise draw_noise(const TrainConfig& cfg, Rng& rng, std::int64_t labeled, std::int64_t action_free) {
  const auto dtype = cfg.scalar_type();
  const auto& flow = cfg.flow;
  StepNoise n;
  if (labeled > 0) {
    n.tau = flowmatch::sample_tau_batch(flow, rng, labeled, dtype);
    n.eps = flowmatch::standard_normal({labeled, flow.H, flow.action_dim}, rng, dtype);
  }
  if (action_free > 0) n.eps_free = flowmatch::standard_normal({action_free, flow.H, flow.action_dim}, rng, dtype);
  return n;
}

LossTerms compute_losses(FlarePolicy& policy, TargetEmbedding* target, const TrainConfig& cfg, const Batch* labeled,
                         const Batch* action_free, const StepNoise& noise) {
  const std::int64_t nl = labeled ? labeled->size() : 0;
  const std::int64_t nf = action_free ? action_free->size() : 0;
  if (nl + nf == 0) throw std::invalid_argument("compute_losses: both batches are empty");
  if (nf > 0 && !cfg.uses_alignment()) {
    throw std::invalid_argument("compute_losses: action-free samples need the alignment loss (flare mode, lambda > 0)");
  }
  if (cfg.uses_alignment() && !target) throw std::invalid_argument("compute_losses: alignment without a target model");
  if (nl > 0 && !labeled->actions.defined()) throw std::invalid_argument("compute_losses: labeled batch without actions");

  std::vector<torch::Tensor> images, tokens, q, a_tau, tau, future;
  if (nl > 0) {
    images.push_back(labeled->images);
    tokens.push_back(labeled->tokens);
    q.push_back(labeled->proprio);
    a_tau.push_back(flowmatch::noise_chunk(labeled->actions, noise.tau, noise.eps));
    tau.push_back(noise.tau);
    future.push_back(labeled->future_images);
  }
  if (nf > 0) {
    // No labels: the action stream carries pure noise at tau = 0.
    images.push_back(action_free->images);
    tokens.push_back(action_free->tokens);
    q.push_back(action_free->proprio);
    a_tau.push_back(noise.eps_free);
    tau.push_back(torch::zeros({nf}, noise.eps_free.options()));
    future.push_back(action_free->future_images);
  }

  const auto all_tokens = cat0(tokens);
  auto phi = policy->embed(cat0(images), all_tokens);
  auto out = policy->forward(phi, cat0(q), cat0(a_tau), cat0(tau), cfg.uses_alignment() ? cfg.flare.tap_layer : 0);

  LossTerms terms;
  if (nl > 0) {
    terms.fm = flowmatch::fm_loss(out.velocity.slice(0, 0, nl), flowmatch::velocity_target(labeled->actions, noise.eps));
  }
  if (cfg.uses_alignment()) {
    terms.align = align_loss(out.predicted_future, target->encode(cat0(future), all_tokens));
    terms.total = nl > 0 ? combined_loss(terms.fm, terms.align, cfg.flare.lambda) : cfg.flare.lambda * terms.align;
  } else {
    terms.total = terms.fm;
  }
  return terms;
}

StepMetrics train_step(TrainState& state, const Batch* labeled, const Batch* action_free) {
  const auto& cfg = state.cfg;
  const std::int64_t nl = labeled ? labeled->size() : 0;
  const std::int64_t nf = action_free ? action_free->size() : 0;
  if (nl + nf == 0) throw std::invalid_argument("train_step: both batches are empty");
  if (nf > 0 && !cfg.uses_alignment()) {
    throw std::invalid_argument("train_step: action-free samples need the alignment loss (flare mode, lambda > 0)");
  }
  const double lr = learning_rate(cfg, state.step);
  set_lr(*state.optimizer, lr);
  state.policy->train();

  const auto noise = draw_noise(cfg, state.rng, nl, nf);
  auto terms = compute_losses(state.policy, state.target ? &*state.target : nullptr, cfg, labeled, action_free, noise);
  check_finite(terms.total, state, labeled, action_free);

  StepMetrics m;
  m.step = state.step;
  m.lr = lr;
  m.labeled = nl;
  m.action_free = nf;
  m.fm_loss = terms.fm.defined() ? terms.fm.item<double>() : 0.0;
  m.align_loss = terms.align.defined() ? terms.align.item<double>() : 0.0;
  m.combined = terms.total.item<double>();

  state.optimizer->zero_grad();
  terms.total.backward();
  state.optimizer->step();
  if (state.target && state.target->tracks_policy()) ema_update(state.target->model(), state.policy->vl, cfg.flare.ema_rho);
  ++state.step;
  return m;
}

StepMetrics policy_only_step(TrainState& state, const Batch& labeled) {
  const auto& cfg = state.cfg;
  const auto& flow = cfg.flow;
  const auto dtype = cfg.scalar_type();
  const std::int64_t n = labeled.size();
  if (n == 0) throw std::invalid_argument("policy_only_step: empty batch");
  if (!labeled.actions.defined()) throw std::invalid_argument("policy_only_step: batch without actions");
  const double lr = learning_rate(cfg, state.step);
  set_lr(*state.optimizer, lr);
  state.policy->train();

  auto tau = flowmatch::sample_tau_batch(flow, state.rng, n, dtype);
  auto eps = flowmatch::standard_normal({n, flow.H, flow.action_dim}, state.rng, dtype);
  auto a_tau = flowmatch::noise_chunk(labeled.actions, tau, eps);
  auto phi = state.policy->embed(labeled.images, labeled.tokens);
  auto v = state.policy->forward(phi, labeled.proprio, a_tau, tau, 0).velocity;
  auto loss = flowmatch::fm_loss(v, flowmatch::velocity_target(labeled.actions, eps));
  check_finite(loss, state, &labeled, nullptr);

  StepMetrics m;
  m.step = state.step;
  m.lr = lr;
  m.labeled = n;
  m.fm_loss = loss.item<double>();
  m.combined = m.fm_loss;
  state.optimizer->zero_grad();
  loss.backward();
  state.optimizer->step();
  ++state.step;
  return m;
}

BatchPlan plan_batch(TrainState& state, std::int64_t labeled_size, std::int64_t action_free_size) {
  const auto& cfg = state.cfg;
  std::int64_t nf = action_free_size > 0 ? std::llround(cfg.batch_size * cfg.action_free_fraction) : 0;
  std::int64_t nl = labeled_size > 0 ? cfg.batch_size - nf : 0;
  BatchPlan plan;
  // Explicit modulo keeps the schedule identical across standard libraries.
  for (std::int64_t i = 0; i < nl; ++i) plan.labeled.push_back(static_cast<std::int64_t>(state.rng() % static_cast<std::uint64_t>(labeled_size)));
  for (std::int64_t i = 0; i < nf; ++i) plan.action_free.push_back(static_cast<std::int64_t>(state.rng() % static_cast<std::uint64_t>(action_free_size)));
  return plan;
}

json PretrainLog::to_json() const {
  json j = {{"step", step}, {"heldout_fm", heldout_fm}};
  j["train_fm"] = step == 0 ? json(nullptr) : json(train_fm);
  return j;
}

PretrainResult pretrain_embedding(const datagen::Dataset& dataset, const TrainConfig& cfg_in) {
  if (dataset.manifest.action_free) throw std::invalid_argument("pretrain_embedding: dataset has no action labels");
  for (const auto& ep : dataset.episodes) {
    if (!ep.actions) throw std::invalid_argument("pretrain_embedding: dataset has no action labels");
  }
  if (dataset.episodes.size() < 2) throw std::invalid_argument("pretrain_embedding: need at least 2 episodes");
  TrainConfig cfg = cfg_in;
  cfg.bind_env(dataset.env);
  cfg.mode = "policy_only";
  validate_config(cfg, true);

  // Held-out split by episode.
  std::vector<std::size_t> order(dataset.episodes.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  Rng split_rng(derive_seed(cfg.seed, fnv1a("holdout")));
  for (std::size_t i = order.size() - 1; i > 0; --i) std::swap(order[i], order[split_rng() % (i + 1)]);
  auto n_hold = static_cast<std::size_t>(std::llround(cfg.holdout_fraction * static_cast<double>(order.size())));
  n_hold = std::clamp<std::size_t>(n_hold, 1, order.size() - 1);
  const auto held = subset(dataset, {order.begin(), order.begin() + static_cast<std::ptrdiff_t>(n_hold)});
  const auto train = subset(dataset, {order.begin() + static_cast<std::ptrdiff_t>(n_hold), order.end()});
  ChunkDataset train_chunks({&train}, cfg.flow.H);
  ChunkDataset held_chunks({&held}, cfg.flow.H);

  // Fixed held-out probe: same samples, timesteps and noise at every log point.
  const auto dtype = cfg.scalar_type();
  Rng probe_rng(derive_seed(cfg.seed, fnv1a("heldout_probe")));
  std::vector<std::int64_t> probe_ids;
  for (int i = 0; i < 256; ++i) probe_ids.push_back(static_cast<std::int64_t>(probe_rng() % static_cast<std::uint64_t>(held_chunks.size())));
  const auto probe = held_chunks.gather(probe_ids, dtype);
  const auto probe_tau = flowmatch::sample_tau_batch(cfg.flow, probe_rng, probe.size(), dtype);
  const auto probe_eps = flowmatch::standard_normal({probe.size(), cfg.flow.H, cfg.flow.action_dim}, probe_rng, dtype);
  const auto probe_a_tau = flowmatch::noise_chunk(probe.actions, probe_tau, probe_eps);
  const auto probe_target = flowmatch::velocity_target(probe.actions, probe_eps);

  TrainState st = make_train_state(cfg.steps == 0 ? [&] {
    auto c = cfg;
    c.steps = 1;
    return c;
  }() : cfg);
  st.cfg = cfg;

  auto heldout = [&] {
    torch::NoGradGuard no_grad;
    auto phi = st.policy->embed(probe.images, probe.tokens);
    auto v = st.policy->forward(phi, probe.proprio, probe_a_tau, probe_tau, 0).velocity;
    return flowmatch::fm_loss(v, probe_target).item<double>();
  };

  PretrainResult result;
  result.log.push_back({0, 0.0, heldout()});
  double last_train = 0.0;
  while (st.step < cfg.steps) {
    auto plan = plan_batch(st, train_chunks.size(), 0);
    auto batch = train_chunks.gather(plan.labeled, dtype);
    shift_scene(batch, cfg.augment_shift, st.rng);
    last_train = policy_only_step(st, batch).fm_loss;
    if (st.step % cfg.log_every == 0 || st.step == cfg.steps) result.log.push_back({st.step, last_train, heldout()});
    if (!std::isfinite(result.log.back().heldout_fm)) throw TrainingDiverged("pretrain_embedding: non-finite held-out loss");
  }
  result.embedding = st.policy->vl;
  return result;
}

void save_embedding(const fs::path& path, const VLEmbeddingModel& embedding, const TrainConfig& cfg,
                    const std::vector<PretrainLog>& log) {
  io::NamedArrays na;
  store_module(na, *embedding, "vl/");
  json jlog = json::array();
  for (const auto& entry : log) jlog.push_back(entry.to_json());
  na.metadata["kind"] = "embedding";
  na.metadata["config"] = cfg.to_json().dump();
  na.metadata["model"] = embedding->config().to_json().dump();
  na.metadata["log"] = jlog.dump();
  io::write_named_arrays(path, na);
}

VLEmbeddingModel load_embedding(const fs::path& path) {
  const auto na = io::read_named_arrays(path);
  auto kind = na.metadata.find("kind");
  if (kind == na.metadata.end() || kind->second != "embedding") {
    throw std::runtime_error(path.string() + " is not an embedding file");
  }
  VLEmbeddingModel model(ModelConfig::from_json(json::parse(na.metadata.at("model"))));
  model->to(na.at("vl/patch_embed.weight").scalar_type());
  load_into(*model, na, "vl/");
  return model;
}

std::string data_fingerprint(const std::vector<const datagen::Dataset*>& labeled, const datagen::Dataset* action_free) {
  std::string blob;
  auto add = [&](const datagen::Dataset& ds) {
    json suite = json::array();
    for (const auto& t : ds.suite) suite.push_back(datagen::task_to_json(t));
    blob += ds.manifest.to_json().dump() + ds.env.to_json().dump() + suite.dump() + std::to_string(ds.episodes.size()) + "|";
  };
  for (const auto* ds : labeled) add(*ds);
  blob += "action_free:";
  if (action_free) add(*action_free);
  return to_hex(fnv1a(blob));
}

void save_checkpoint(const fs::path& path, const TrainState& state, const datagen::EnvConfig& env,
                     const std::vector<datagen::TaskSpec>& suite, const std::string& data_hash) {
  io::NamedArrays na;
  store_module(na, *state.policy, "policy/");
  if (state.target) store_module(na, *state.target->model(), "target/");
  const auto& opt_state = state.optimizer->state();
  for (const auto& p : state.policy->named_parameters()) {
    auto it = opt_state.find(p.value().unsafeGetTensorImpl());
    if (it == opt_state.end()) continue;
    const auto& s = static_cast<const torch::optim::AdamWParamState&>(*it->second);
    na.arrays["adam/" + p.key() + "/exp_avg"] = s.exp_avg().clone();
    na.arrays["adam/" + p.key() + "/exp_avg_sq"] = s.exp_avg_sq().clone();
    na.arrays["adam/" + p.key() + "/step"] = torch::full({1}, s.step(), torch::kLong);
  }
  json jsuite = json::array();
  for (const auto& t : suite) jsuite.push_back(datagen::task_to_json(t));
  na.metadata["kind"] = "checkpoint";
  na.metadata["config"] = state.cfg.to_json().dump();
  na.metadata["config_hash"] = state.cfg.hash();
  na.metadata["env"] = env.to_json().dump();
  na.metadata["suite"] = jsuite.dump();
  na.metadata["data_hash"] = data_hash;
  na.metadata["step"] = std::to_string(state.step);
  na.metadata["rng"] = serialize_rng(state.rng);
  na.metadata["target"] = !state.target ? "none" : state.target->tracks_policy() ? "ema" : "random";
  io::write_named_arrays(path, na);
}

namespace {

CheckpointInfo info_from(const io::NamedArrays& na, const fs::path& path) {
  auto kind = na.metadata.find("kind");
  if (kind == na.metadata.end() || kind->second != "checkpoint") {
    throw std::runtime_error(path.string() + " is not a training checkpoint");
  }
  CheckpointInfo info;
  info.cfg = TrainConfig::from_json(json::parse(na.metadata.at("config")));
  info.env = datagen::EnvConfig::from_json(json::parse(na.metadata.at("env")));
  for (const auto& t : json::parse(na.metadata.at("suite"))) info.suite.push_back(datagen::task_from_json(t));
  info.data_hash = na.metadata.at("data_hash");
  info.step = std::stoll(na.metadata.at("step"));
  return info;
}

}  // namespace

CheckpointInfo read_checkpoint_info(const fs::path& path) { return info_from(io::read_named_arrays(path), path); }

TrainState load_checkpoint(const fs::path& path, CheckpointInfo* info_out) {
  const auto na = io::read_named_arrays(path);
  auto info = info_from(na, path);
  if (info.cfg.hash() != na.metadata.at("config_hash")) throw std::runtime_error(path.string() + ": config hash mismatch");
  TrainState st = make_train_state(info.cfg);
  load_into(*st.policy, na, "policy/");
  if (st.target) {
    load_into(*st.target->model(), na, "target/");
  } else if (na.metadata.at("target") != "none") {
    throw std::runtime_error(path.string() + ": checkpoint carries a target model the config does not use");
  }
  auto& opt_state = st.optimizer->state();
  for (const auto& p : st.policy->named_parameters()) {
    const auto base = "adam/" + p.key() + "/";
    if (!na.contains(base + "exp_avg")) continue;
    auto s = std::make_unique<torch::optim::AdamWParamState>();
    s->step(na.at(base + "step").item<std::int64_t>());
    s->exp_avg(na.at(base + "exp_avg").clone());
    s->exp_avg_sq(na.at(base + "exp_avg_sq").clone());
    if (!s->exp_avg().sizes().equals(p.value().sizes())) {
      throw std::runtime_error("checkpoint: optimizer moment shape mismatch for '" + p.key() + "'");
    }
    opt_state[p.value().unsafeGetTensorImpl()] = std::move(s);
  }
  st.step = info.step;
  restore_rng(st.rng, na.metadata.at("rng"));
  if (info_out) *info_out = std::move(info);
  return st;
}

std::vector<fs::path> list_checkpoints(const fs::path& dir) {
  if (!fs::is_directory(dir)) throw std::runtime_error("checkpoint directory " + dir.string() + " does not exist");
  std::vector<fs::path> out;
  for (const auto& entry : fs::directory_iterator(dir)) {
    const auto name = entry.path().filename().string();
    if (entry.is_regular_file() && name.rfind("ckpt_", 0) == 0 && entry.path().extension() == ".safetensors") {
      out.push_back(entry.path());
    }
  }
  std::sort(out.begin(), out.end());
  return out;
}

void shift_scene(Batch& batch, int max_shift, Rng& rng) {
  if (max_shift <= 0 || batch.size() == 0) return;
  const std::int64_t side = batch.images.size(1);
  const std::int64_t m = max_shift;
  const auto& bg = datagen::kBackgroundColor;
  auto fill = torch::tensor({bg[0], bg[1], bg[2]}, torch::kUInt8);
  auto pad = [&](const torch::Tensor& images) {
    auto out = fill.view({1, 1, 1, 3}).expand({images.size(0), side + 2 * m, side + 2 * m, 3}).clone();
    out.slice(1, m, m + side).slice(2, m, m + side).copy_(images);
    return out;
  };
  auto now = pad(batch.images);
  auto future = batch.future_images.defined() ? pad(batch.future_images) : torch::Tensor();
  std::uniform_int_distribution<std::int64_t> offset(-m, m);
  torch::NoGradGuard no_grad;
  for (std::int64_t i = 0; i < batch.size(); ++i) {
    const std::int64_t dx = offset(rng);
    const std::int64_t dy = offset(rng);
    // Content moves by (dx, dy) pixels: rows follow y, columns follow x.
    batch.images[i].copy_(now[i].slice(0, m - dy, m - dy + side).slice(1, m - dx, m - dx + side));
    if (future.defined()) {
      batch.future_images[i].copy_(future[i].slice(0, m - dy, m - dy + side).slice(1, m - dx, m - dx + side));
    }
    batch.proprio[i][0] += static_cast<double>(dx) / static_cast<double>(side);
    batch.proprio[i][1] += static_cast<double>(dy) / static_cast<double>(side);
  }
}

FitResult fit(const FitData& data, const TrainConfig& cfg_in, const FitOptions& options) {
  if (data.labeled.empty()) throw std::invalid_argument("fit: no labeled dataset");
  const auto& env = data.labeled.front()->env;
  TrainConfig cfg = cfg_in;
  cfg.bind_env(env);
  cfg.validate();
  if (data.action_free && data.action_free->env.to_json() != env.to_json()) {
    throw std::invalid_argument("fit: action-free data uses a different environment");
  }
  const auto data_hash = data_fingerprint(data.labeled, data.action_free);
  const auto dtype = cfg.scalar_type();

  ChunkDataset labeled(data.labeled, cfg.flow.H);
  if (!labeled.has_actions()) throw std::invalid_argument("fit: labeled dataset has no actions");
  std::optional<ChunkDataset> action_free;
  if (data.action_free && cfg.uses_alignment() && cfg.action_free_fraction > 0.0) {
    action_free.emplace(std::vector<const datagen::Dataset*>{data.action_free}, cfg.flow.H);
  }

  TrainState st;
  if (options.resume) {
    CheckpointInfo info;
    st = load_checkpoint(*options.resume, &info);
    if (info.cfg.hash() != cfg.hash()) throw std::runtime_error("fit: resume config differs from the checkpoint config");
    if (info.data_hash != data_hash) throw std::runtime_error("fit: resume data differs from the checkpoint data");
  } else {
    st = make_train_state(cfg, options.init_embedding);
  }

  fs::create_directories(options.out_dir);
  const auto metrics_path = options.out_dir / "metrics.jsonl";
  std::vector<std::string> kept;
  if (options.resume && fs::exists(metrics_path)) {
    std::ifstream in(metrics_path);
    for (std::string line; std::getline(in, line);) {
      if (!line.empty() && json::parse(line).at("step").get<std::int64_t>() < st.step) kept.push_back(line);
    }
  }
  std::ofstream log(metrics_path, std::ios::trunc);
  for (const auto& line : kept) log << line << '\n';

  char name[64];
  FitResult result;
  while (st.step < cfg.steps) {
    auto plan = plan_batch(st, labeled.size(), action_free ? action_free->size() : 0);
    StepMetrics m;
    std::optional<Batch> bl, bf;
    if (!plan.labeled.empty()) bl = labeled.gather(plan.labeled, dtype);
    if (!plan.action_free.empty()) bf = action_free->gather(plan.action_free, dtype);
    if (bl) shift_scene(*bl, cfg.augment_shift, st.rng);
    if (bf) shift_scene(*bf, cfg.augment_shift, st.rng);
    if (cfg.mode == "policy_only") {
      m = policy_only_step(st, *bl);
    } else {
      m = train_step(st, bl ? &*bl : nullptr, bf ? &*bf : nullptr);
    }
    log << m.to_json().dump() << '\n';
    result.metrics.push_back(m);
    if (options.on_step) options.on_step(m);
    if (st.step % cfg.checkpoint_every == 0 || st.step == cfg.steps) {
      log.flush();
      std::snprintf(name, sizeof(name), "ckpt_%07lld.safetensors", static_cast<long long>(st.step));
      save_checkpoint(options.out_dir / name, st, env, data.labeled.front()->suite, data_hash);
      result.checkpoints.push_back(options.out_dir / name);
    }
  }
  return result;
}

}  // namespace flare
