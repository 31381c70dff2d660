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

// Synthetic 2D tabletop world: colored square objects, outlined colored
// zones, and a point effector with a binary gripper. Tasks read
// "pick <color> place <zone>"; object and zone identity is visible only in
// the rendered pixels, positions are randomized per episode.

#pragma once

#include "flare/common.hpp"

#include <nlohmann/json.hpp>

#include <array>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

namespace flare::datagen {

struct EnvConfig {
  int image_size = 48;
  int text_len = 8;
  int n_colors = 4;
  int n_zones = 3;
  int objects_per_scene = 2;
  int zones_per_scene = 2;
  double action_clip = 0.08;
  int episode_horizon = 80;
  int execute_horizon = 8;
  double grasp_radius = 0.05;
  double success_radius = 0.07;
  double min_separation = 0.2;
  double expert_noise = 0.01;
  int object_pixels = 5;
  int zone_pixels = 11;

  int vocab_size() const { return 3 + n_colors + n_zones; }
  nlohmann::json to_json() const;
  static EnvConfig from_json(const nlohmann::json& j);
};

inline constexpr std::array<std::uint8_t, 3> kBackgroundColor{20, 20, 20};

inline constexpr int kStateDim = 3;
inline constexpr int kActionDim = 3;

// Token vocabulary: pad, "pick", "place", one token per color, one per zone.
inline constexpr std::int32_t kPadToken = 0;
inline constexpr std::int32_t kPickToken = 1;
inline constexpr std::int32_t kPlaceToken = 2;

struct Vec2 {
  double x = 0.0;
  double y = 0.0;
};

double distance(Vec2 a, Vec2 b);

struct TaskSpec {
  int task_id = 0;  // color * n_zones + zone, stable across suites
  std::vector<std::int32_t> instruction_tokens;
  int target_object = 0;  // color index
  int target_zone = 0;    // zone index
  double success_radius = 0.0;

  bool operator==(const TaskSpec&) const = default;
};

nlohmann::json task_to_json(const TaskSpec& task);
TaskSpec task_from_json(const nlohmann::json& j);

struct WorldState {
  Vec2 effector_pos;
  int gripper = 0;
  std::vector<Vec2> object_pos;
  std::vector<int> object_color;
  std::optional<int> object_held;  // index into object_pos
  std::vector<Vec2> zone_pos;
  std::vector<int> zone_color;
};

// Row-major H x W x 3, bytes; value v is the intensity v / 255.
struct Image {
  int height = 0;
  int width = 0;
  std::vector<std::uint8_t> rgb;

  float value(int row, int col, int channel) const {
    return static_cast<float>(rgb[(static_cast<std::size_t>(row) * width + col) * 3 + channel]) / 255.0f;
  }
  bool operator==(const Image&) const = default;
};

struct Observation {
  Image image;
  std::vector<std::int32_t> instruction_tokens;
  bool operator==(const Observation&) const = default;
};

using StateVec = std::array<float, kStateDim>;
using Action = std::array<float, kActionDim>;  // (dx, dy, gripper command)

struct Episode {
  TaskSpec task;
  std::vector<Observation> observations;
  std::vector<StateVec> proprio;
  std::optional<std::vector<Action>> actions;
  bool success = false;
  bool nan_flag = false;

  int length() const { return static_cast<int>(observations.size()); }
};

struct ChunkSample {
  int t = 0;
  int future_index = 0;
  Observation obs_t;
  StateVec q_t{};
  std::optional<std::vector<Action>> actions;  // exactly H rows when present
  Observation obs_future;
};

std::vector<std::int32_t> instruction_for(int color, int zone, const EnvConfig& cfg);
TaskSpec make_task(int color, int zone, const EnvConfig& cfg);
TaskSpec task_by_id(int task_id, const EnvConfig& cfg);

std::vector<TaskSpec> make_task_suite(int n_tasks, std::uint64_t seed, const EnvConfig& cfg = {});

WorldState sample_initial_state(const TaskSpec& task, Rng& rng, const EnvConfig& cfg = {});
void validate_state(const WorldState& state, const EnvConfig& cfg = {});

Image render(const WorldState& state, const EnvConfig& cfg = {});
Observation observe(const WorldState& state, const TaskSpec& task, const EnvConfig& cfg = {});
StateVec proprio_of(const WorldState& state);

// Applies one action: clipped translation, then gripper command (> 0.5 closes).
WorldState step(const WorldState& state, const Action& action, const EnvConfig& cfg = {});
bool is_success(const WorldState& state, const TaskSpec& task);

Action scripted_expert(const TaskSpec& task, const WorldState& state, double noise_scale, Rng& rng,
                       const EnvConfig& cfg = {});

// Rolls the expert until success or the horizon; returns the recorded episode.
Episode record_expert_episode(const TaskSpec& task, const WorldState& initial, double noise_scale, Rng& rng,
                              const EnvConfig& cfg = {});

struct DatasetManifest {
  int schema_version = 1;
  std::string config_hash;
  std::uint64_t seed = 0;
  int demos_per_task = 0;
  bool action_free = false;
  nlohmann::json to_json() const;
  static DatasetManifest from_json(const nlohmann::json& j);
};

struct Dataset {
  DatasetManifest manifest;
  EnvConfig env;
  std::vector<TaskSpec> suite;
  std::vector<Episode> episodes;
};

inline constexpr int kDatasetSchemaVersion = 1;
inline constexpr int kMaxExpertRetries = 20;

Dataset generate_dataset(const std::vector<TaskSpec>& suite, int demos_per_task, bool action_free,
                         std::uint64_t seed, const EnvConfig& cfg = {});
void write_dataset(const std::filesystem::path& path, const Dataset& dataset);
Dataset read_dataset(const std::filesystem::path& path);

// Chunk at step t (0 <= t < length - 1). Actions past the episode end repeat
// the last action; the future frame is clamped to the final observation.
ChunkSample chunk_at(const Episode& episode, int t, int horizon);

// Maps raw actions to the model's unit range and back: translations divided by
// the clip, gripper {0,1} -> {-1,1}.
Action normalize_action(const Action& raw, const EnvConfig& cfg);
Action denormalize_action(const Action& unit, const EnvConfig& cfg);

using ChunkPolicy = std::function<std::vector<Action>(const Observation&, const StateVec&)>;
// Sees the true world state as well; used for the scripted expert.
using PrivilegedChunkPolicy =
    std::function<std::vector<Action>(const Observation&, const StateVec&, const WorldState&)>;
using BatchChunkPolicy = std::function<std::vector<std::vector<Action>>(
    const std::vector<Observation>&, const std::vector<StateVec>&, const std::vector<WorldState>&)>;

struct RolloutResult {
  Episode episode;
  bool success = false;
};

// Receding-horizon execution: the first execute_horizon actions of each chunk
// are applied before re-planning. Non-finite policy output ends the episode
// as a failure with nan_flag set.
RolloutResult rollout(const ChunkPolicy& policy, const TaskSpec& task, const WorldState& initial, int max_steps,
                      const EnvConfig& cfg = {});
RolloutResult rollout(const PrivilegedChunkPolicy& policy, const TaskSpec& task, const WorldState& initial,
                      int max_steps, const EnvConfig& cfg = {});

// Lockstep variant: every active episode is planned in a single policy call.
// Only outcome flags and final states are tracked.
struct BatchRolloutResult {
  std::vector<bool> success;
  std::vector<bool> nan_flag;
  std::vector<WorldState> final_states;
};
BatchRolloutResult rollout_batch(const BatchChunkPolicy& policy, const std::vector<TaskSpec>& tasks,
                                 const std::vector<WorldState>& initial, int max_steps, const EnvConfig& cfg = {});

// Open-loop chunk from simulating the noise-free expert `horizon` steps ahead.
std::vector<Action> expert_chunk(const TaskSpec& task, const WorldState& state, int horizon, const EnvConfig& cfg = {});
PrivilegedChunkPolicy expert_chunk_policy(const TaskSpec& task, int horizon, const EnvConfig& cfg = {});

}  // namespace flare::datagen
