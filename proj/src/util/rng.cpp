// Copyright 2026 The IPN Authors
// SPDX-License-Identifier: Apache-2.0

#include "ipn/rng.hpp"

#include "ipn/errors.hpp"
#include "ipn/fnv.hpp"

namespace ipn {

std::uint64_t substream_seed(std::uint64_t root, std::string_view name) {
  Fnv1a h;
  h.update(name.data(), name.size());
  return mix64(mix64(root) ^ h.digest());
}

std::uint64_t uniform_index(std::mt19937_64& rng, std::uint64_t n) {
  if (n == 0) throw ContractError("uniform_index: empty range");
  // Rejection sampling keeps the draw unbiased for any n.
  const std::uint64_t limit = UINT64_MAX - UINT64_MAX % n;
  std::uint64_t x = rng();
  while (x >= limit) x = rng();
  return x % n;
}

double uniform_unit(std::mt19937_64& rng) {
  return static_cast<double>(rng() >> 11) * 0x1.0p-53;
}

}  // namespace ipn
