// Copyright 2026 The IPN Authors
// SPDX-License-Identifier: Apache-2.0
//
// Binary tensor archive shared by backbone and IPN checkpoints.
//
//   "IPNB" | u32 version | u64 config digest | u32 tensor count
//   per tensor: u32 name length | name | u32 rank | u32 dims[rank] | f32 data
//   u64 FNV-1a of every preceding byte
//
// All integers and floats are little-endian.

#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "ipn/backbones.hpp"
#include "ipn/ipn.hpp"

namespace ipn {

inline constexpr std::uint32_t kCheckpointVersion = 1;

struct Archive {
  std::uint64_t digest = 0;
  NamedTensors<float> tensors;
};

std::vector<unsigned char> encode_archive(const Archive& archive);
/// Throws CheckpointError on bad magic, version, truncation or digest.
Archive decode_archive(const std::vector<unsigned char>& bytes);

void save_archive(const std::filesystem::path& path, const Archive& archive);
Archive load_archive(const std::filesystem::path& path);

/// Saves the given IPN groups, tagged with the backbone checksum they were
/// trained against.
void save_ipn_checkpoint(const std::filesystem::path& path, const IpnParams<float>& p,
                         std::span<const IpnGroup> groups, std::uint64_t backbone_digest);
/// Copies every group present in the file into `p` and returns the groups
/// loaded; groups absent from the file keep their current values. Throws
/// CheckpointError(kMismatch) when the backbone digest differs or a group is
/// only partly present.
std::vector<IpnGroup> load_ipn_checkpoint(const std::filesystem::path& path,
                                          IpnParams<float>& p, std::uint64_t backbone_digest);

}  // namespace ipn
