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

#include "flare/tensor_io.hpp"

#include <nlohmann/json.hpp>

#include <cstring>
#include <fstream>
#include <stdexcept>
#include <vector>

namespace flare::io {
namespace {

using nlohmann::json;

std::string dtype_tag(torch::ScalarType t) {
  switch (t) {
    case torch::kUInt8: return "U8";
    case torch::kInt32: return "I32";
    case torch::kInt64: return "I64";
    case torch::kFloat32: return "F32";
    case torch::kFloat64: return "F64";
    default: throw std::invalid_argument(std::string("unsupported dtype for named arrays: ") + c10::toString(t));
  }
}

torch::ScalarType dtype_from_tag(const std::string& tag) {
  if (tag == "U8") return torch::kUInt8;
  if (tag == "I32") return torch::kInt32;
  if (tag == "I64") return torch::kInt64;
  if (tag == "F32") return torch::kFloat32;
  if (tag == "F64") return torch::kFloat64;
  throw std::runtime_error("unsupported dtype tag '" + tag + "'");
}

}  // namespace

const torch::Tensor& NamedArrays::at(const std::string& name) const {
  auto it = arrays.find(name);
  if (it == arrays.end()) throw std::out_of_range("missing array '" + name + "'");
  return it->second;
}

void write_named_arrays(const std::filesystem::path& path, const NamedArrays& content) {
  json header = json::object();
  if (!content.metadata.empty()) {
    json meta = json::object();
    for (const auto& [k, v] : content.metadata) meta[k] = v;
    header["__metadata__"] = meta;
  }
  std::vector<torch::Tensor> buffers;
  buffers.reserve(content.arrays.size());
  std::int64_t offset = 0;
  for (const auto& [name, tensor] : content.arrays) {
    if (name == "__metadata__") throw std::invalid_argument("reserved array name");
    auto t = tensor.detach().to(torch::kCPU).contiguous();
    const std::int64_t bytes = t.numel() * static_cast<std::int64_t>(t.element_size());
    header[name] = {{"dtype", dtype_tag(t.scalar_type())},
                    {"shape", t.sizes().vec()},
                    {"data_offsets", {offset, offset + bytes}}};
    offset += bytes;
    buffers.push_back(std::move(t));
  }
  std::string text = header.dump();
  while (text.size() % 8 != 0) text.push_back(' ');
  const std::uint64_t len = text.size();

  std::filesystem::path tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw std::runtime_error("cannot open " + tmp.string() + " for writing");
    unsigned char len_bytes[8];
    for (int i = 0; i < 8; ++i) len_bytes[i] = static_cast<unsigned char>((len >> (8 * i)) & 0xff);
    out.write(reinterpret_cast<const char*>(len_bytes), 8);
    out.write(text.data(), static_cast<std::streamsize>(text.size()));
    for (const auto& t : buffers) {
      out.write(static_cast<const char*>(t.data_ptr()), t.numel() * static_cast<std::streamsize>(t.element_size()));
    }
    if (!out) throw std::runtime_error("write failed for " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

NamedArrays read_named_arrays(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open " + path.string());
  unsigned char len_bytes[8];
  in.read(reinterpret_cast<char*>(len_bytes), 8);
  if (!in) throw std::runtime_error(path.string() + ": truncated header");
  std::uint64_t len = 0;
  for (int i = 0; i < 8; ++i) len |= static_cast<std::uint64_t>(len_bytes[i]) << (8 * i);
  if (len > (1ULL << 32)) throw std::runtime_error(path.string() + ": implausible header length");
  std::string text(len, '\0');
  in.read(text.data(), static_cast<std::streamsize>(len));
  if (!in) throw std::runtime_error(path.string() + ": truncated header");
  const json header = json::parse(text);

  const auto data_start = static_cast<std::int64_t>(8 + len);
  in.seekg(0, std::ios::end);
  const std::int64_t data_size = static_cast<std::int64_t>(in.tellg()) - data_start;

  NamedArrays result;
  for (const auto& [name, entry] : header.items()) {
    if (name == "__metadata__") {
      for (const auto& [k, v] : entry.items()) result.metadata[k] = v.get<std::string>();
      continue;
    }
    const auto dtype = dtype_from_tag(entry.at("dtype").get<std::string>());
    const auto shape = entry.at("shape").get<std::vector<std::int64_t>>();
    const auto offsets = entry.at("data_offsets").get<std::vector<std::int64_t>>();
    if (offsets.size() != 2 || offsets[0] < 0 || offsets[1] < offsets[0] || offsets[1] > data_size) {
      throw std::runtime_error(path.string() + ": bad offsets for '" + name + "'");
    }
    auto t = torch::empty(shape, torch::TensorOptions().dtype(dtype));
    const std::int64_t bytes = t.numel() * static_cast<std::int64_t>(t.element_size());
    if (bytes != offsets[1] - offsets[0]) {
      throw std::runtime_error(path.string() + ": size mismatch for '" + name + "'");
    }
    in.seekg(data_start + offsets[0]);
    in.read(static_cast<char*>(t.data_ptr()), bytes);
    if (!in) throw std::runtime_error(path.string() + ": truncated data for '" + name + "'");
    result.arrays.emplace(name, std::move(t));
  }
  return result;
}

}  // namespace flare::io
