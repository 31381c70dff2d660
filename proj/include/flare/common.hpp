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

#include <cstdint>
#include <random>
#include <string>
#include <string_view>

namespace flare {

// Every stochastic component draws from an explicitly passed engine so that
// runs are reproducible and the state can be checkpointed.
using Rng = std::mt19937_64;

// FNV-1a, used for config hashes and per-name parameter seeds.
std::uint64_t fnv1a(std::string_view bytes, std::uint64_t basis = 0xcbf29ce484222325ULL);

std::uint64_t mix_seed(std::uint64_t a, std::uint64_t b);

template <typename... Ts>
std::uint64_t derive_seed(std::uint64_t seed, Ts... tags) {
  std::uint64_t s = seed;
  ((s = mix_seed(s, static_cast<std::uint64_t>(tags))), ...);
  return s;
}

std::string to_hex(std::uint64_t value);

std::string serialize_rng(const Rng& rng);
void restore_rng(Rng& rng, const std::string& state);

}  // namespace flare
