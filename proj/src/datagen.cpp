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

#include "flare/datagen.hpp"

#include "flare/tensor_io.hpp"

#include <torch/torch.h>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numeric>
#include <stdexcept>

namespace flare::datagen {

using nlohmann::json;

namespace {

constexpr std::array<std::array<std::uint8_t, 3>, 6> kObjectColors{{
    {230, 40, 40}, {40, 200, 60}, {50, 90, 240}, {230, 210, 40}, {240, 240, 240}, {150, 80, 30}}};
constexpr std::array<std::array<std::uint8_t, 3>, 6> kZoneColors{{
    {255, 140, 0}, {200, 60, 200}, {40, 210, 210}, {120, 200, 120}, {180, 180, 255}, {255, 120, 160}}};
constexpr std::array<std::uint8_t, 3> kEffectorOpen{255, 255, 255};
constexpr std::array<std::uint8_t, 3> kEffectorClosed{130, 130, 130};

// Distance at which the expert considers itself on target.
constexpr double kArriveTolerance = 0.02;

double clamp01(double v) { return std::clamp(v, 0.0, 1.0); }

int to_pixel(double coord, int size) {
  return std::clamp(static_cast<int>(std::floor(coord * size)), 0, size - 1);
}

void put_pixel(Image& img, int row, int col, const std::array<std::uint8_t, 3>& c) {
  if (row < 0 || col < 0 || row >= img.height || col >= img.width) return;
  const auto idx = (static_cast<std::size_t>(row) * img.width + col) * 3;
  img.rgb[idx] = c[0];
  img.rgb[idx + 1] = c[1];
  img.rgb[idx + 2] = c[2];
}

void check_env(const EnvConfig& cfg) {
  if (cfg.n_colors < 1 || cfg.n_colors > static_cast<int>(kObjectColors.size()) || cfg.n_zones < 1 ||
      cfg.n_zones > static_cast<int>(kZoneColors.size())) {
    throw std::invalid_argument("EnvConfig: unsupported color/zone count");
  }
  if (cfg.objects_per_scene < 1 || cfg.objects_per_scene > cfg.n_colors || cfg.zones_per_scene < 1 ||
      cfg.zones_per_scene > cfg.n_zones) {
    throw std::invalid_argument("EnvConfig: scene entity counts out of range");
  }
  if (cfg.text_len < 5) throw std::invalid_argument("EnvConfig: text_len must hold 'pick c place z'");
  if (cfg.image_size < 8) throw std::invalid_argument("EnvConfig: image_size too small");
}

int index_of_color(const WorldState& s, int color) {
  for (std::size_t i = 0; i < s.object_color.size(); ++i) {
    if (s.object_color[i] == color) return static_cast<int>(i);
  }
  return -1;
}

int index_of_zone(const WorldState& s, int zone) {
  for (std::size_t i = 0; i < s.zone_color.size(); ++i) {
    if (s.zone_color[i] == zone) return static_cast<int>(i);
  }
  return -1;
}

std::string episode_key(std::size_t i, const char* field) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "episode/%06zu/%s", i, field);
  return buf;
}

}  // namespace

json EnvConfig::to_json() const {
  return json{{"image_size", image_size},
              {"text_len", text_len},
              {"n_colors", n_colors},
              {"n_zones", n_zones},
              {"objects_per_scene", objects_per_scene},
              {"zones_per_scene", zones_per_scene},
              {"action_clip", action_clip},
              {"episode_horizon", episode_horizon},
              {"execute_horizon", execute_horizon},
              {"grasp_radius", grasp_radius},
              {"success_radius", success_radius},
              {"min_separation", min_separation},
              {"expert_noise", expert_noise},
              {"object_pixels", object_pixels},
              {"zone_pixels", zone_pixels}};
}

EnvConfig EnvConfig::from_json(const json& j) {
  EnvConfig c;
  c.image_size = j.value("image_size", c.image_size);
  c.text_len = j.value("text_len", c.text_len);
  c.n_colors = j.value("n_colors", c.n_colors);
  c.n_zones = j.value("n_zones", c.n_zones);
  c.objects_per_scene = j.value("objects_per_scene", c.objects_per_scene);
  c.zones_per_scene = j.value("zones_per_scene", c.zones_per_scene);
  c.action_clip = j.value("action_clip", c.action_clip);
  c.episode_horizon = j.value("episode_horizon", c.episode_horizon);
  c.execute_horizon = j.value("execute_horizon", c.execute_horizon);
  c.grasp_radius = j.value("grasp_radius", c.grasp_radius);
  c.success_radius = j.value("success_radius", c.success_radius);
  c.min_separation = j.value("min_separation", c.min_separation);
  c.expert_noise = j.value("expert_noise", c.expert_noise);
  c.object_pixels = j.value("object_pixels", c.object_pixels);
  c.zone_pixels = j.value("zone_pixels", c.zone_pixels);
  return c;
}

double distance(Vec2 a, Vec2 b) { return std::hypot(a.x - b.x, a.y - b.y); }

json task_to_json(const TaskSpec& task) {
  return json{{"task_id", task.task_id},
              {"instruction_tokens", task.instruction_tokens},
              {"target_object", task.target_object},
              {"target_zone", task.target_zone},
              {"success_radius", task.success_radius}};
}

TaskSpec task_from_json(const json& j) {
  TaskSpec t;
  t.task_id = j.at("task_id").get<int>();
  t.instruction_tokens = j.at("instruction_tokens").get<std::vector<std::int32_t>>();
  t.target_object = j.at("target_object").get<int>();
  t.target_zone = j.at("target_zone").get<int>();
  t.success_radius = j.at("success_radius").get<double>();
  return t;
}

std::vector<std::int32_t> instruction_for(int color, int zone, const EnvConfig& cfg) {
  std::vector<std::int32_t> tokens(static_cast<std::size_t>(cfg.text_len), kPadToken);
  tokens[0] = kPickToken;
  tokens[1] = 3 + color;
  tokens[2] = kPlaceToken;
  tokens[3] = 3 + cfg.n_colors + zone;
  return tokens;
}

TaskSpec make_task(int color, int zone, const EnvConfig& cfg) {
  check_env(cfg);
  if (color < 0 || color >= cfg.n_colors || zone < 0 || zone >= cfg.n_zones) {
    throw std::invalid_argument("make_task: color/zone out of range");
  }
  TaskSpec t;
  t.task_id = color * cfg.n_zones + zone;
  t.instruction_tokens = instruction_for(color, zone, cfg);
  t.target_object = color;
  t.target_zone = zone;
  t.success_radius = cfg.success_radius;
  return t;
}

TaskSpec task_by_id(int task_id, const EnvConfig& cfg) {
  if (task_id < 0 || task_id >= cfg.n_colors * cfg.n_zones) throw std::invalid_argument("task id out of range");
  return make_task(task_id / cfg.n_zones, task_id % cfg.n_zones, cfg);
}

std::vector<TaskSpec> make_task_suite(int n_tasks, std::uint64_t seed, const EnvConfig& cfg) {
  check_env(cfg);
  const int combos = cfg.n_colors * cfg.n_zones;
  if (n_tasks < 1) throw std::invalid_argument("make_task_suite: n_tasks must be >= 1");
  if (n_tasks > combos) {
    throw std::invalid_argument("make_task_suite: requested " + std::to_string(n_tasks) + " tasks but only " +
                                std::to_string(combos) + " color x zone combinations exist");
  }
  std::vector<int> ids(static_cast<std::size_t>(combos));
  std::iota(ids.begin(), ids.end(), 0);
  Rng rng(derive_seed(seed, 0x5017eULL));
  // Fisher-Yates with explicit draws; std::shuffle's sequence is library-defined.
  for (int i = combos - 1; i > 0; --i) {
    const int j = static_cast<int>(rng() % static_cast<std::uint64_t>(i + 1));
    std::swap(ids[static_cast<std::size_t>(i)], ids[static_cast<std::size_t>(j)]);
  }
  std::vector<TaskSpec> suite;
  suite.reserve(static_cast<std::size_t>(n_tasks));
  for (int k = 0; k < n_tasks; ++k) suite.push_back(task_by_id(ids[static_cast<std::size_t>(k)], cfg));
  return suite;
}

WorldState sample_initial_state(const TaskSpec& task, Rng& rng, const EnvConfig& cfg) {
  check_env(cfg);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  auto pick_others = [&](int count, int total, int keep) {
    std::vector<int> pool;
    for (int i = 0; i < total; ++i) {
      if (i != keep) pool.push_back(i);
    }
    std::vector<int> chosen{keep};
    for (int k = 1; k < count; ++k) {
      const auto j = static_cast<std::size_t>(rng() % pool.size());
      chosen.push_back(pool[j]);
      pool.erase(pool.begin() + static_cast<std::ptrdiff_t>(j));
    }
    return chosen;
  };

  WorldState s;
  s.object_color = pick_others(cfg.objects_per_scene, cfg.n_colors, task.target_object);
  s.zone_color = pick_others(cfg.zones_per_scene, cfg.n_zones, task.target_zone);

  const std::size_t n_entities = s.object_color.size() + s.zone_color.size();
  std::vector<Vec2> placed;
  for (int attempt = 0; placed.size() < n_entities; ++attempt) {
    if (attempt > 100000) throw std::runtime_error("sample_initial_state: cannot satisfy min_separation");
    Vec2 p{0.1 + 0.8 * unit(rng), 0.1 + 0.8 * unit(rng)};
    const bool ok = std::all_of(placed.begin(), placed.end(),
                                [&](const Vec2& q) { return distance(p, q) >= cfg.min_separation; });
    if (ok) placed.push_back(p);
  }
  s.object_pos.assign(placed.begin(), placed.begin() + static_cast<std::ptrdiff_t>(s.object_color.size()));
  s.zone_pos.assign(placed.begin() + static_cast<std::ptrdiff_t>(s.object_color.size()), placed.end());
  s.effector_pos = {0.05 + 0.9 * unit(rng), 0.05 + 0.9 * unit(rng)};
  s.gripper = 0;
  return s;
}

void validate_state(const WorldState& s, const EnvConfig& cfg) {
  auto inside = [](Vec2 p) { return p.x >= 0.0 && p.x <= 1.0 && p.y >= 0.0 && p.y <= 1.0; };
  if (!inside(s.effector_pos)) throw std::invalid_argument("WorldState: effector outside unit square");
  if (s.gripper != 0 && s.gripper != 1) throw std::invalid_argument("WorldState: gripper must be 0 or 1");
  if (s.object_pos.size() != s.object_color.size() || s.zone_pos.size() != s.zone_color.size()) {
    throw std::invalid_argument("WorldState: entity arrays disagree");
  }
  for (std::size_t i = 0; i < s.object_pos.size(); ++i) {
    if (!inside(s.object_pos[i])) throw std::invalid_argument("WorldState: object outside unit square");
    if (s.object_color[i] < 0 || s.object_color[i] >= cfg.n_colors) throw std::invalid_argument("bad object color");
  }
  for (std::size_t i = 0; i < s.zone_pos.size(); ++i) {
    if (!inside(s.zone_pos[i])) throw std::invalid_argument("WorldState: zone outside unit square");
    if (s.zone_color[i] < 0 || s.zone_color[i] >= cfg.n_zones) throw std::invalid_argument("bad zone color");
  }
  if (s.object_held) {
    const int h = *s.object_held;
    if (h < 0 || h >= static_cast<int>(s.object_pos.size())) throw std::invalid_argument("held index invalid");
    if (s.object_pos[static_cast<std::size_t>(h)].x != s.effector_pos.x ||
        s.object_pos[static_cast<std::size_t>(h)].y != s.effector_pos.y) {
      throw std::invalid_argument("WorldState: held object must sit at the effector");
    }
  }
}

Image render(const WorldState& s, const EnvConfig& cfg) {
  const int n = cfg.image_size;
  Image img;
  img.height = n;
  img.width = n;
  img.rgb.resize(static_cast<std::size_t>(n) * n * 3);
  for (std::size_t i = 0; i < img.rgb.size(); i += 3) {
    img.rgb[i] = kBackgroundColor[0];
    img.rgb[i + 1] = kBackgroundColor[1];
    img.rgb[i + 2] = kBackgroundColor[2];
  }

  const int zh = cfg.zone_pixels / 2;
  for (std::size_t z = 0; z < s.zone_pos.size(); ++z) {
    const int r0 = to_pixel(s.zone_pos[z].y, n);
    const int c0 = to_pixel(s.zone_pos[z].x, n);
    const auto& color = kZoneColors[static_cast<std::size_t>(s.zone_color[z])];
    for (int d = -zh; d <= zh; ++d) {
      put_pixel(img, r0 - zh, c0 + d, color);
      put_pixel(img, r0 + zh, c0 + d, color);
      put_pixel(img, r0 + d, c0 - zh, color);
      put_pixel(img, r0 + d, c0 + zh, color);
    }
  }

  const int oh = cfg.object_pixels / 2;
  auto draw_object = [&](std::size_t o) {
    const int r0 = to_pixel(s.object_pos[o].y, n);
    const int c0 = to_pixel(s.object_pos[o].x, n);
    const auto& color = kObjectColors[static_cast<std::size_t>(s.object_color[o])];
    for (int dr = -oh; dr <= oh; ++dr) {
      for (int dc = -oh; dc <= oh; ++dc) put_pixel(img, r0 + dr, c0 + dc, color);
    }
  };
  // Held object last so it stays visible on top of whatever it passes over.
  for (std::size_t o = 0; o < s.object_pos.size(); ++o) {
    if (!s.object_held || *s.object_held != static_cast<int>(o)) draw_object(o);
  }
  if (s.object_held) draw_object(static_cast<std::size_t>(*s.object_held));

  const int er = to_pixel(s.effector_pos.y, n);
  const int ec = to_pixel(s.effector_pos.x, n);
  const auto& ecolor = s.gripper ? kEffectorClosed : kEffectorOpen;
  for (int d = -3; d <= 3; ++d) {
    put_pixel(img, er + d, ec, ecolor);
    put_pixel(img, er, ec + d, ecolor);
  }
  return img;
}

Observation observe(const WorldState& state, const TaskSpec& task, const EnvConfig& cfg) {
  return Observation{render(state, cfg), task.instruction_tokens};
}

StateVec proprio_of(const WorldState& s) {
  return {static_cast<float>(s.effector_pos.x), static_cast<float>(s.effector_pos.y),
          static_cast<float>(s.gripper)};
}

WorldState step(const WorldState& s, const Action& a, const EnvConfig& cfg) {
  WorldState n = s;
  const double dx = std::clamp(static_cast<double>(a[0]), -cfg.action_clip, cfg.action_clip);
  const double dy = std::clamp(static_cast<double>(a[1]), -cfg.action_clip, cfg.action_clip);
  n.effector_pos = {clamp01(s.effector_pos.x + dx), clamp01(s.effector_pos.y + dy)};
  const bool close = a[2] > 0.5f;
  if (close && !s.gripper) {
    double best = cfg.grasp_radius;
    std::optional<int> grabbed;
    for (std::size_t o = 0; o < n.object_pos.size(); ++o) {
      const double d = distance(n.object_pos[o], n.effector_pos);
      if (d <= best) {
        best = d;
        grabbed = static_cast<int>(o);
      }
    }
    n.object_held = grabbed;
  }
  if (!close) n.object_held.reset();
  n.gripper = close ? 1 : 0;
  if (n.object_held) n.object_pos[static_cast<std::size_t>(*n.object_held)] = n.effector_pos;
  return n;
}

bool is_success(const WorldState& s, const TaskSpec& task) {
  const int o = index_of_color(s, task.target_object);
  const int z = index_of_zone(s, task.target_zone);
  if (o < 0 || z < 0) return false;
  if (s.object_held && *s.object_held == o) return false;
  return distance(s.object_pos[static_cast<std::size_t>(o)], s.zone_pos[static_cast<std::size_t>(z)]) <=
         task.success_radius;
}

Action scripted_expert(const TaskSpec& task, const WorldState& s, double noise_scale, Rng& rng,
                       const EnvConfig& cfg) {
  if (is_success(s, task)) return {0.0f, 0.0f, 0.0f};
  const int target = index_of_color(s, task.target_object);
  const int zone = index_of_zone(s, task.target_zone);
  if (target < 0 || zone < 0) return {0.0f, 0.0f, 0.0f};

  const bool holding_target = s.object_held && *s.object_held == target;
  if (s.object_held && !holding_target) return {0.0f, 0.0f, 0.0f};  // drop the wrong object

  const Vec2 goal = holding_target ? s.zone_pos[static_cast<std::size_t>(zone)]
                                   : s.object_pos[static_cast<std::size_t>(target)];
  double dx = goal.x - s.effector_pos.x;
  double dy = goal.y - s.effector_pos.y;
  const bool arrived = std::hypot(dx, dy) < kArriveTolerance;
  float grip = holding_target ? 1.0f : 0.0f;
  if (arrived) {
    dx = 0.0;
    dy = 0.0;
    // At the object: close (re-open first after a missed grasp). At the zone: open.
    grip = holding_target ? 0.0f : (s.gripper ? 0.0f : 1.0f);
  }
  if (noise_scale > 0.0) {
    std::normal_distribution<double> jitter(0.0, noise_scale);
    dx += jitter(rng);
    dy += jitter(rng);
  }
  return {static_cast<float>(std::clamp(dx, -cfg.action_clip, cfg.action_clip)),
          static_cast<float>(std::clamp(dy, -cfg.action_clip, cfg.action_clip)), grip};
}

Episode record_expert_episode(const TaskSpec& task, const WorldState& initial, double noise_scale, Rng& rng,
                              const EnvConfig& cfg) {
  Episode ep;
  ep.task = task;
  ep.actions.emplace();
  WorldState s = initial;
  ep.observations.push_back(observe(s, task, cfg));
  ep.proprio.push_back(proprio_of(s));
  for (int t = 0; t < cfg.episode_horizon && !is_success(s, task); ++t) {
    const Action a = scripted_expert(task, s, noise_scale, rng, cfg);
    s = step(s, a, cfg);
    ep.actions->push_back(a);
    ep.observations.push_back(observe(s, task, cfg));
    ep.proprio.push_back(proprio_of(s));
  }
  ep.success = is_success(s, task);
  return ep;
}

json DatasetManifest::to_json() const {
  return json{{"schema_version", schema_version},
              {"config_hash", config_hash},
              {"seed", seed},
              {"demos_per_task", demos_per_task},
              {"action_free", action_free}};
}

DatasetManifest DatasetManifest::from_json(const json& j) {
  DatasetManifest m;
  m.schema_version = j.at("schema_version").get<int>();
  m.config_hash = j.at("config_hash").get<std::string>();
  m.seed = j.at("seed").get<std::uint64_t>();
  m.demos_per_task = j.at("demos_per_task").get<int>();
  m.action_free = j.at("action_free").get<bool>();
  return m;
}

Dataset generate_dataset(const std::vector<TaskSpec>& suite, int demos_per_task, bool action_free,
                         std::uint64_t seed, const EnvConfig& cfg) {
  check_env(cfg);
  if (demos_per_task < 1) throw std::invalid_argument("generate_dataset: demos_per_task must be >= 1");
  if (suite.empty()) throw std::invalid_argument("generate_dataset: empty suite");
  Dataset ds;
  ds.env = cfg;
  ds.suite = suite;
  ds.manifest.schema_version = kDatasetSchemaVersion;
  ds.manifest.config_hash = to_hex(fnv1a(cfg.to_json().dump()));
  ds.manifest.seed = seed;
  ds.manifest.demos_per_task = demos_per_task;
  ds.manifest.action_free = action_free;

  for (const auto& task : suite) {
    for (int j = 0; j < demos_per_task; ++j) {
      Rng rng(derive_seed(seed, static_cast<std::uint64_t>(task.task_id), static_cast<std::uint64_t>(j)));
      bool accepted = false;
      for (int attempt = 0; attempt < kMaxExpertRetries && !accepted; ++attempt) {
        const WorldState s0 = sample_initial_state(task, rng, cfg);
        Episode ep = record_expert_episode(task, s0, cfg.expert_noise, rng, cfg);
        if (!ep.success) continue;
        if (action_free) ep.actions.reset();
        ds.episodes.push_back(std::move(ep));
        accepted = true;
      }
      if (!accepted) {
        throw std::runtime_error("generate_dataset: expert failed " + std::to_string(kMaxExpertRetries) +
                                 " consecutive times for task " + std::to_string(task.task_id) + " demo " +
                                 std::to_string(j) + "; environment misconfigured");
      }
    }
  }
  return ds;
}

void write_dataset(const std::filesystem::path& path, const Dataset& ds) {
  io::NamedArrays out;
  json suite = json::array();
  for (const auto& t : ds.suite) suite.push_back(task_to_json(t));
  out.metadata["manifest"] = ds.manifest.to_json().dump();
  out.metadata["env"] = ds.env.to_json().dump();
  out.metadata["suite"] = suite.dump();
  out.metadata["episodes"] = std::to_string(ds.episodes.size());

  const int n = ds.env.image_size;
  for (std::size_t i = 0; i < ds.episodes.size(); ++i) {
    const auto& ep = ds.episodes[i];
    const auto len = static_cast<std::int64_t>(ep.observations.size());
    auto images = torch::empty({len, n, n, 3}, torch::kUInt8);
    auto* dst = images.data_ptr<std::uint8_t>();
    for (std::int64_t t = 0; t < len; ++t) {
      const auto& rgb = ep.observations[static_cast<std::size_t>(t)].image.rgb;
      std::copy(rgb.begin(), rgb.end(), dst + t * n * n * 3);
    }
    auto proprio = torch::empty({len, kStateDim}, torch::kFloat32);
    auto* q = proprio.data_ptr<float>();
    for (std::int64_t t = 0; t < len; ++t) {
      for (int k = 0; k < kStateDim; ++k) q[t * kStateDim + k] = ep.proprio[static_cast<std::size_t>(t)][static_cast<std::size_t>(k)];
    }
    out.arrays[episode_key(i, "image")] = images;
    out.arrays[episode_key(i, "proprio")] = proprio;
    if (ep.actions) {
      const auto na = static_cast<std::int64_t>(ep.actions->size());
      auto acts = torch::empty({na, kActionDim}, torch::kFloat32);
      auto* a = acts.data_ptr<float>();
      for (std::int64_t t = 0; t < na; ++t) {
        for (int k = 0; k < kActionDim; ++k) a[t * kActionDim + k] = (*ep.actions)[static_cast<std::size_t>(t)][static_cast<std::size_t>(k)];
      }
      out.arrays[episode_key(i, "actions")] = acts;
    }
    auto tokens = torch::tensor(ep.task.instruction_tokens, torch::kInt32);
    out.arrays[episode_key(i, "instruction_tokens")] = tokens;
    out.arrays[episode_key(i, "task_id")] = torch::tensor({ep.task.task_id}, torch::kInt32);
    out.arrays[episode_key(i, "success")] = torch::tensor({static_cast<std::uint8_t>(ep.success)}, torch::kUInt8);
  }
  io::write_named_arrays(path, out);
}

Dataset read_dataset(const std::filesystem::path& path) {
  const io::NamedArrays in = io::read_named_arrays(path);
  Dataset ds;
  try {
    ds.manifest = DatasetManifest::from_json(json::parse(in.metadata.at("manifest")));
    ds.env = EnvConfig::from_json(json::parse(in.metadata.at("env")));
    for (const auto& t : json::parse(in.metadata.at("suite"))) ds.suite.push_back(task_from_json(t));
  } catch (const std::exception& e) {
    throw std::runtime_error(path.string() + ": not a dataset file (" + e.what() + ")");
  }
  if (ds.manifest.schema_version != kDatasetSchemaVersion) {
    throw std::runtime_error(path.string() + ": unsupported dataset schema version " +
                             std::to_string(ds.manifest.schema_version));
  }
  const auto count = static_cast<std::size_t>(std::stoull(in.metadata.at("episodes")));
  const int n = ds.env.image_size;
  ds.episodes.reserve(count);
  for (std::size_t i = 0; i < count; ++i) {
    Episode ep;
    const auto images = in.at(episode_key(i, "image")).contiguous();
    const auto proprio = in.at(episode_key(i, "proprio")).contiguous();
    const auto tokens = in.at(episode_key(i, "instruction_tokens")).contiguous();
    const int task_id = in.at(episode_key(i, "task_id")).item<int>();
    ep.task = task_by_id(task_id, ds.env);
    ep.task.instruction_tokens.assign(tokens.data_ptr<std::int32_t>(), tokens.data_ptr<std::int32_t>() + tokens.numel());
    ep.success = in.at(episode_key(i, "success")).item<std::uint8_t>() != 0;
    const auto len = images.size(0);
    const auto* src = images.data_ptr<std::uint8_t>();
    const auto* q = proprio.data_ptr<float>();
    for (std::int64_t t = 0; t < len; ++t) {
      Observation obs;
      obs.image.height = n;
      obs.image.width = n;
      obs.image.rgb.assign(src + t * n * n * 3, src + (t + 1) * n * n * 3);
      obs.instruction_tokens = ep.task.instruction_tokens;
      ep.observations.push_back(std::move(obs));
      ep.proprio.push_back({q[t * kStateDim], q[t * kStateDim + 1], q[t * kStateDim + 2]});
    }
    const auto key = episode_key(i, "actions");
    if (in.contains(key)) {
      const auto acts = in.at(key).contiguous();
      const auto* a = acts.data_ptr<float>();
      ep.actions.emplace();
      for (std::int64_t t = 0; t < acts.size(0); ++t) {
        ep.actions->push_back({a[t * kActionDim], a[t * kActionDim + 1], a[t * kActionDim + 2]});
      }
    }
    ds.episodes.push_back(std::move(ep));
  }
  return ds;
}

ChunkSample chunk_at(const Episode& ep, int t, int horizon) {
  const int len = ep.length();
  if (horizon < 1) throw std::invalid_argument("chunk_at: horizon must be >= 1");
  if (t < 0 || t >= len - 1) throw std::out_of_range("chunk_at: t outside [0, length - 1)");
  ChunkSample c;
  c.t = t;
  c.future_index = std::min(t + horizon, len - 1);
  c.obs_t = ep.observations[static_cast<std::size_t>(t)];
  c.q_t = ep.proprio[static_cast<std::size_t>(t)];
  c.obs_future = ep.observations[static_cast<std::size_t>(c.future_index)];
  if (ep.actions) {
    const int na = static_cast<int>(ep.actions->size());
    c.actions.emplace();
    for (int i = 0; i < horizon; ++i) c.actions->push_back((*ep.actions)[static_cast<std::size_t>(std::min(t + i, na - 1))]);
  }
  return c;
}

Action normalize_action(const Action& raw, const EnvConfig& cfg) {
  const auto clip = static_cast<float>(cfg.action_clip);
  return {raw[0] / clip, raw[1] / clip, 2.0f * raw[2] - 1.0f};
}

Action denormalize_action(const Action& unit, const EnvConfig& cfg) {
  const auto clip = static_cast<float>(cfg.action_clip);
  return {unit[0] * clip, unit[1] * clip, 0.5f * (unit[2] + 1.0f)};
}

namespace {

bool all_finite(const std::vector<Action>& chunk) {
  return std::all_of(chunk.begin(), chunk.end(), [](const Action& a) {
    return std::isfinite(a[0]) && std::isfinite(a[1]) && std::isfinite(a[2]);
  });
}

}  // namespace

RolloutResult rollout(const ChunkPolicy& policy, const TaskSpec& task, const WorldState& initial, int max_steps,
                      const EnvConfig& cfg) {
  return rollout(
      PrivilegedChunkPolicy([&policy](const Observation& o, const StateVec& q, const WorldState&) { return policy(o, q); }),
      task, initial, max_steps, cfg);
}

RolloutResult rollout(const PrivilegedChunkPolicy& policy, const TaskSpec& task, const WorldState& initial,
                      int max_steps, const EnvConfig& cfg) {
  if (max_steps < 1) throw std::invalid_argument("rollout: max_steps must be >= 1");
  RolloutResult r;
  Episode& ep = r.episode;
  ep.task = task;
  ep.actions.emplace();
  WorldState s = initial;
  ep.observations.push_back(observe(s, task, cfg));
  ep.proprio.push_back(proprio_of(s));
  int steps = 0;
  while (steps < max_steps && !is_success(s, task)) {
    const auto chunk = policy(ep.observations.back(), ep.proprio.back(), s);
    if (chunk.empty() || !all_finite(chunk)) {
      ep.nan_flag = true;
      break;
    }
    const int n_exec = std::min<int>(cfg.execute_horizon, static_cast<int>(chunk.size()));
    for (int i = 0; i < n_exec && steps < max_steps; ++i) {
      s = step(s, chunk[static_cast<std::size_t>(i)], cfg);
      ep.actions->push_back(chunk[static_cast<std::size_t>(i)]);
      ep.observations.push_back(observe(s, task, cfg));
      ep.proprio.push_back(proprio_of(s));
      ++steps;
      if (is_success(s, task)) break;
    }
  }
  ep.success = !ep.nan_flag && is_success(s, task);
  r.success = ep.success;
  return r;
}

BatchRolloutResult rollout_batch(const BatchChunkPolicy& policy, const std::vector<TaskSpec>& tasks,
                                 const std::vector<WorldState>& initial, int max_steps, const EnvConfig& cfg) {
  if (max_steps < 1) throw std::invalid_argument("rollout_batch: max_steps must be >= 1");
  if (tasks.size() != initial.size()) throw std::invalid_argument("rollout_batch: tasks/initial size mismatch");
  const std::size_t n = tasks.size();
  BatchRolloutResult r;
  r.final_states = initial;
  r.success.assign(n, false);
  r.nan_flag.assign(n, false);
  std::vector<int> steps(n, 0);
  auto active = [&](std::size_t i) {
    return !r.nan_flag[i] && steps[i] < max_steps && !is_success(r.final_states[i], tasks[i]);
  };
  while (true) {
    std::vector<std::size_t> live;
    for (std::size_t i = 0; i < n; ++i) {
      if (active(i)) live.push_back(i);
    }
    if (live.empty()) break;
    std::vector<Observation> obs;
    std::vector<StateVec> q;
    std::vector<WorldState> states;
    for (auto i : live) {
      obs.push_back(observe(r.final_states[i], tasks[i], cfg));
      q.push_back(proprio_of(r.final_states[i]));
      states.push_back(r.final_states[i]);
    }
    const auto chunks = policy(obs, q, states);
    if (chunks.size() != live.size()) throw std::runtime_error("rollout_batch: policy returned wrong batch size");
    for (std::size_t k = 0; k < live.size(); ++k) {
      const auto i = live[k];
      const auto& chunk = chunks[k];
      if (chunk.empty() || !all_finite(chunk)) {
        r.nan_flag[i] = true;
        continue;
      }
      const int n_exec = std::min<int>(cfg.execute_horizon, static_cast<int>(chunk.size()));
      for (int j = 0; j < n_exec && steps[i] < max_steps; ++j) {
        r.final_states[i] = step(r.final_states[i], chunk[static_cast<std::size_t>(j)], cfg);
        ++steps[i];
        if (is_success(r.final_states[i], tasks[i])) break;
      }
    }
  }
  for (std::size_t i = 0; i < n; ++i) r.success[i] = !r.nan_flag[i] && is_success(r.final_states[i], tasks[i]);
  return r;
}

std::vector<Action> expert_chunk(const TaskSpec& task, const WorldState& state, int horizon, const EnvConfig& cfg) {
  Rng unused(0);
  std::vector<Action> chunk;
  WorldState s = state;
  for (int i = 0; i < horizon; ++i) {
    const Action a = scripted_expert(task, s, 0.0, unused, cfg);
    chunk.push_back(a);
    s = step(s, a, cfg);
  }
  return chunk;
}

PrivilegedChunkPolicy expert_chunk_policy(const TaskSpec& task, int horizon, const EnvConfig& cfg) {
  return [task, horizon, cfg](const Observation&, const StateVec&, const WorldState& s) {
    return expert_chunk(task, s, horizon, cfg);
  };
}

}  // namespace flare::datagen
