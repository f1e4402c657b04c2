// Copyright 2026 The IPN Authors
// SPDX-License-Identifier: Apache-2.0

#include "ipn/checkpoint.hpp"

#include <algorithm>
#include <cstring>
#include <fstream>
#include <iterator>
#include <unordered_map>

#include "ipn/fnv.hpp"

namespace ipn {

namespace {

constexpr char kMagic[4] = {'I', 'P', 'N', 'B'};

void put_u32(std::vector<unsigned char>& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<unsigned char>(v >> (8 * i)));
}

void put_u64(std::vector<unsigned char>& out, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<unsigned char>(v >> (8 * i)));
}

class Reader {
 public:
  explicit Reader(const std::vector<unsigned char>& b, std::size_t end) : b_(b), end_(end) {}
  std::uint64_t uint(int bytes) {
    need(static_cast<std::size_t>(bytes));
    std::uint64_t v = 0;
    for (int i = 0; i < bytes; ++i) v |= static_cast<std::uint64_t>(b_[pos_ + i]) << (8 * i);
    pos_ += static_cast<std::size_t>(bytes);
    return v;
  }
  std::string str(std::size_t n) {
    need(n);
    std::string s(reinterpret_cast<const char*>(b_.data() + pos_), n);
    pos_ += n;
    return s;
  }
  void floats(std::vector<float>& out, std::size_t n) {
    need(n * 4);
    out.resize(n);
    for (std::size_t i = 0; i < n; ++i) {
      const auto bits = static_cast<std::uint32_t>(uint(4));
      std::memcpy(&out[i], &bits, 4);
    }
  }
  std::size_t pos() const { return pos_; }

 private:
  void need(std::size_t n) const {
    if (pos_ + n > end_) throw CheckpointError(CheckpointError::Kind::kTruncated, "checkpoint truncated");
  }
  const std::vector<unsigned char>& b_;
  std::size_t end_;
  std::size_t pos_ = 0;
};

}  // namespace

std::vector<unsigned char> encode_archive(const Archive& archive) {
  std::vector<unsigned char> out(kMagic, kMagic + 4);
  put_u32(out, kCheckpointVersion);
  put_u64(out, archive.digest);
  put_u32(out, static_cast<std::uint32_t>(archive.tensors.size()));
  for (const auto& [name, t] : archive.tensors) {
    put_u32(out, static_cast<std::uint32_t>(name.size()));
    out.insert(out.end(), name.begin(), name.end());
    put_u32(out, static_cast<std::uint32_t>(t.rank()));
    for (std::size_t d : t.shape()) put_u32(out, static_cast<std::uint32_t>(d));
    for (float v : t.data()) {
      std::uint32_t bits = 0;
      std::memcpy(&bits, &v, 4);
      put_u32(out, bits);
    }
  }
  Fnv1a h;
  h.update(out.data(), out.size());
  put_u64(out, h.digest());
  return out;
}

Archive decode_archive(const std::vector<unsigned char>& bytes) {
  using K = CheckpointError::Kind;
  if (bytes.size() < 4 || !std::equal(kMagic, kMagic + 4, bytes.begin())) {
    throw CheckpointError(K::kMagic, "not an IPNB checkpoint");
  }
  if (bytes.size() < 4 + 4 + 8 + 4 + 8) throw CheckpointError(K::kTruncated, "checkpoint truncated");
  const std::size_t body = bytes.size() - 8;
  std::uint64_t stored = 0;
  for (int i = 0; i < 8; ++i) stored |= static_cast<std::uint64_t>(bytes[body + i]) << (8 * i);
  Reader r(bytes, body);
  r.str(4);
  const auto version = static_cast<std::uint32_t>(r.uint(4));
  if (version != kCheckpointVersion) {
    throw CheckpointError(K::kVersion, "checkpoint version " + std::to_string(version) +
                                           ", expected " + std::to_string(kCheckpointVersion));
  }
  Fnv1a h;
  h.update(bytes.data(), body);
  if (h.digest() != stored) throw CheckpointError(K::kDigest, "checkpoint digest mismatch");
  Archive a;
  a.digest = r.uint(8);
  const auto count = r.uint(4);
  for (std::uint64_t i = 0; i < count; ++i) {
    const std::string name = r.str(r.uint(4));
    const auto rank = r.uint(4);
    Shape shape;
    for (std::uint64_t d = 0; d < rank; ++d) shape.push_back(r.uint(4));
    std::vector<float> data;
    r.floats(data, shape_numel(shape));
    a.tensors.emplace_back(name, Tensor::from_data(shape, std::move(data)));
  }
  if (r.pos() != body) throw CheckpointError(K::kTruncated, "trailing bytes before the digest");
  return a;
}

void save_archive(const std::filesystem::path& path, const Archive& archive) {
  const auto bytes = encode_archive(archive);
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw CheckpointError(CheckpointError::Kind::kIo, "cannot write " + path.string());
  f.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!f) throw CheckpointError(CheckpointError::Kind::kIo, "write failed: " + path.string());
}

Archive load_archive(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw CheckpointError(CheckpointError::Kind::kIo, "cannot read " + path.string());
  std::vector<unsigned char> bytes((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  return decode_archive(bytes);
}

void save_ipn_checkpoint(const std::filesystem::path& path, const IpnParams<float>& p,
                         std::span<const IpnGroup> groups, std::uint64_t backbone_digest) {
  Archive a;
  a.digest = backbone_digest;
  for (IpnGroup g : groups) {
    for (auto& e : p.group(g)) a.tensors.push_back(e);
  }
  save_archive(path, a);
}

std::vector<IpnGroup> load_ipn_checkpoint(const std::filesystem::path& path,
                                          IpnParams<float>& p, std::uint64_t backbone_digest) {
  using K = CheckpointError::Kind;
  Archive a = load_archive(path);
  if (a.digest != backbone_digest) {
    throw CheckpointError(K::kMismatch, path.string() + " was trained against different backbones");
  }
  std::unordered_map<std::string, const Tensor*> by_name;
  for (const auto& [name, t] : a.tensors) by_name[name] = &t;
  std::vector<IpnGroup> loaded;
  std::size_t used = 0;
  for (IpnGroup g : kAllGroups) {
    auto mine = p.group(g);
    std::size_t present = 0;
    for (const auto& [name, t] : mine) present += by_name.count(name);
    if (present == 0) continue;
    if (present != mine.size()) {
      throw CheckpointError(K::kMismatch, std::string("group ") + group_name(g) + " partly present");
    }
    try {
      assign_named(mine, a.tensors, "checkpoint");
    } catch (const ContractError& e) {
      throw CheckpointError(K::kMismatch, e.what());
    }
    used += present;
    loaded.push_back(g);
  }
  if (used != a.tensors.size()) throw CheckpointError(K::kMismatch, "unknown tensors in " + path.string());
  return loaded;
}

}  // namespace ipn
