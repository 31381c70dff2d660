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

#include <torch/torch.h>

#include <filesystem>
#include <map>
#include <string>

namespace flare::io {

/// Named-array container in the safetensors layout: an 8-byte little-endian
/// header length, a JSON header mapping each name to dtype/shape/offsets (plus
/// a string map under "__metadata__"), then the raw buffers. Keys are written
/// in sorted order, so identical content always produces identical bytes.
struct NamedArrays {
  std::map<std::string, torch::Tensor> arrays;
  std::map<std::string, std::string> metadata;

  const torch::Tensor& at(const std::string& name) const;
  bool contains(const std::string& name) const { return arrays.count(name) != 0; }
};

void write_named_arrays(const std::filesystem::path& path, const NamedArrays& content);
NamedArrays read_named_arrays(const std::filesystem::path& path);

}  // namespace flare::io
