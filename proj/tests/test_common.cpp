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

#include "flare/common.hpp"
#include "flare/tensor_io.hpp"
#include "test_support.hpp"

#include <gtest/gtest.h>

#include <fstream>
#include <iterator>

namespace flare {
namespace {

std::string slurp(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

TEST(Seeds, DeriveSeedIsDeterministicAndTagSensitive) {
  EXPECT_EQ(derive_seed(7, 1, 2), derive_seed(7, 1, 2));
  EXPECT_NE(derive_seed(7, 1, 2), derive_seed(7, 2, 1));
  EXPECT_NE(derive_seed(7, 1), derive_seed(8, 1));
  // Known FNV-1a 64 vector.
  EXPECT_EQ(fnv1a("a"), 0xaf63dc4c8601ec8cULL);
}

TEST(Seeds, RngStateRoundTrip) {
  Rng a(42);
  for (int i = 0; i < 17; ++i) a();
  Rng b(0);
  restore_rng(b, serialize_rng(a));
  for (int i = 0; i < 100; ++i) ASSERT_EQ(a(), b());
  EXPECT_THROW(restore_rng(b, "not a state"), std::runtime_error);
}

TEST(NamedArrays, RoundTripAllDtypes) {
  const auto dir = testing::scratch_dir("io_roundtrip");
  io::NamedArrays na;
  na.arrays["u8"] = torch::arange(0, 12, torch::kLong).to(torch::kUInt8).view({3, 4});
  na.arrays["i32"] = torch::tensor({-1, 2, 3}, torch::kInt);
  na.arrays["i64"] = torch::tensor({int64_t{1} << 40}, torch::kLong);
  na.arrays["f32"] = torch::randn({2, 3, 2});
  na.arrays["f64"] = torch::randn({5}, torch::kFloat64);
  na.arrays["scalar"] = torch::tensor(3.5);
  na.metadata["note"] = "hello";
  io::write_named_arrays(dir / "a.safetensors", na);
  const auto back = io::read_named_arrays(dir / "a.safetensors");
  ASSERT_EQ(back.arrays.size(), na.arrays.size());
  for (const auto& [name, t] : na.arrays) {
    ASSERT_TRUE(back.contains(name)) << name;
    EXPECT_EQ(back.at(name).scalar_type(), t.scalar_type()) << name;
    EXPECT_TRUE(back.at(name).equal(t)) << name;
  }
  EXPECT_EQ(back.metadata.at("note"), "hello");
}

TEST(NamedArrays, IdenticalContentGivesIdenticalBytes) {
  const auto dir = testing::scratch_dir("io_bytes");
  io::NamedArrays a, b;
  a.arrays["z"] = torch::ones({4});
  a.arrays["a"] = torch::zeros({2, 2});
  a.metadata["k"] = "v";
  // Insertion order differs; content does not.
  b.metadata["k"] = "v";
  b.arrays["a"] = torch::zeros({2, 2});
  b.arrays["z"] = torch::ones({4});
  io::write_named_arrays(dir / "a.st", a);
  io::write_named_arrays(dir / "b.st", b);
  EXPECT_EQ(slurp(dir / "a.st"), slurp(dir / "b.st"));
}

TEST(NamedArrays, RejectsCorruptFiles) {
  const auto dir = testing::scratch_dir("io_corrupt");
  std::ofstream(dir / "short.st") << "abc";
  EXPECT_THROW(io::read_named_arrays(dir / "short.st"), std::runtime_error);
  EXPECT_THROW(io::read_named_arrays(dir / "missing.st"), std::runtime_error);
  io::NamedArrays na;
  na.arrays["x"] = torch::ones({2}, torch::kBool);
  EXPECT_THROW(io::write_named_arrays(dir / "bool.st", na), std::invalid_argument);
}

}  // namespace
}  // namespace flare
