// Copyright 2026 The IPN Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <random>
#include <string_view>

namespace ipn {

/// splitmix64 finaliser. A bijection on 64-bit values.
constexpr std::uint64_t mix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

/// Seed of the named substream (data, init, train, eval, ...) of a root seed.
std::uint64_t substream_seed(std::uint64_t root, std::string_view name);

inline std::mt19937_64 substream(std::uint64_t root, std::string_view name) {
  return std::mt19937_64(substream_seed(root, name));
}

/// Uniform integer in [0, n) that does not depend on the standard library's
/// distribution implementation, so corpora are identical across toolchains.
std::uint64_t uniform_index(std::mt19937_64& rng, std::uint64_t n);

/// Uniform double in [0, 1) from the top 53 bits of one draw.
double uniform_unit(std::mt19937_64& rng);

}  // namespace ipn
