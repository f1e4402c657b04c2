// Copyright 2026 The IPN Authors
// SPDX-License-Identifier: Apache-2.0
//
// The frozen components: a decoder-only language model, a bidirectional text
// encoder and a symbolic visual encoder. Each is templated on the element type
// so the whole stack can be cast to double for gradient checking.

#pragma once

#include <cstdint>
#include <random>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "ipn/data.hpp"
#include "ipn/tensor.hpp"

namespace ipn {

template <typename T>
using NamedTensors = std::vector<std::pair<std::string, BasicTensor<T>>>;

/// 64-bit FNV-1a over the little-endian float32 bytes of every tensor, in
/// enumeration order. Tensor names are not hashed.
template <typename T>
std::uint64_t weights_checksum(const NamedTensors<T>& tensors);

/// y = x W + b with W stored [in, out].
template <typename T>
struct Linear {
  BasicTensor<T> w;
  BasicTensor<T> b;

  static Linear init(std::size_t in, std::size_t out, std::mt19937_64& rng);
  BasicTensor<T> operator()(const BasicTensor<T>& x) const { return add(matmul(x, w), b); }
  std::size_t in() const { return w.dim(0); }
  std::size_t out() const { return w.dim(1); }
  void collect(const std::string& prefix, NamedTensors<T>& out) const;
  template <typename U>
  Linear<U> cast() const {
    return {w.template cast<U>(), b.template cast<U>()};
  }
};

template <typename T>
struct LayerNormParams {
  BasicTensor<T> gamma;
  BasicTensor<T> beta;

  static LayerNormParams init(std::size_t width);
  BasicTensor<T> operator()(const BasicTensor<T>& x) const { return layer_norm(x, gamma, beta); }
  void collect(const std::string& prefix, NamedTensors<T>& out) const;
  template <typename U>
  LayerNormParams<U> cast() const {
    return {gamma.template cast<U>(), beta.template cast<U>()};
  }
};

/// Pre-norm transformer block.
template <typename T>
struct TransformerBlock {
  LayerNormParams<T> ln1, ln2;
  Linear<T> qkv, proj, ff1, ff2;
  std::size_t heads = 2;

  static TransformerBlock init(std::size_t width, std::size_t heads, std::size_t ff,
                               std::mt19937_64& rng);
  BasicTensor<T> forward(const BasicTensor<T>& x, std::span<const std::size_t> segments,
                         bool causal) const;
  void collect(const std::string& prefix, NamedTensors<T>& out) const;
  template <typename U>
  TransformerBlock<U> cast() const {
    return {ln1.template cast<U>(), ln2.template cast<U>(), qkv.template cast<U>(),
            proj.template cast<U>(), ff1.template cast<U>(), ff2.template cast<U>(), heads};
  }
};

struct LmConfig {
  std::size_t vocab = 0;
  std::size_t width = 64;
  std::size_t layers = 2;
  std::size_t heads = 2;
  std::size_t ff = 256;
  std::size_t max_len = 64;
};

struct TextEncoderConfig {
  std::size_t vocab = 0;
  std::size_t width = 32;
  std::size_t layers = 2;
  std::size_t heads = 2;
  std::size_t ff = 128;
  std::size_t max_len = 64;
};

inline constexpr std::size_t kVisualAttrWidth = 16;
inline constexpr std::size_t kVisualWidth = 32;

template <typename T>
struct LmOutput {
  /// Last-layer hidden states after the final layer norm, [rows, width].
  BasicTensor<T> hidden;
};

/// Decoder-only transformer with learned positions and a tied output
/// projection. Sequences are given as embedding rows so that callers can
/// splice in non-token vectors (the image prefix, h_d).
template <typename T>
class FrozenLm {
 public:
  FrozenLm() = default;
  static FrozenLm init(const LmConfig& cfg, std::mt19937_64& rng);

  /// Token embedding rows for `ids`, [ids.size(), width].
  BasicTensor<T> embed(std::span<const TokenId> ids) const;
  /// Single sequence. Throws ContractError when empty or longer than max_len.
  LmOutput<T> forward(const BasicTensor<T>& embeddings) const;
  /// Several sequences packed row-wise; attention stays inside each segment
  /// and positions restart at 0 for every segment.
  LmOutput<T> forward_packed(const BasicTensor<T>& embeddings,
                             std::span<const std::size_t> segments) const;
  /// Next-token scores for hidden rows, [rows, vocab].
  BasicTensor<T> logits(const BasicTensor<T>& hidden) const;

  const LmConfig& config() const { return cfg_; }
  const BasicTensor<T>& token_embeddings() const { return tok_emb_; }
  NamedTensors<T> parameters() const;
  void set_trainable(bool on);
  bool frozen() const { return frozen_; }
  void freeze();
  std::uint64_t checksum() const { return weights_checksum(parameters()); }

  template <typename U>
  FrozenLm<U> cast() const {
    FrozenLm<U> out;
    out.cfg_ = cfg_;
    out.tok_emb_ = tok_emb_.template cast<U>();
    out.pos_emb_ = pos_emb_.template cast<U>();
    for (const auto& b : blocks_) out.blocks_.push_back(b.template cast<U>());
    out.ln_f_ = ln_f_.template cast<U>();
    out.frozen_ = frozen_;
    return out;
  }
  /// Replaces weights by name from `tensors` (used by checkpoint loading).
  void assign(const NamedTensors<T>& tensors);

 private:
  template <typename U>
  friend class FrozenLm;

  LmConfig cfg_;
  BasicTensor<T> tok_emb_;
  BasicTensor<T> pos_emb_;
  std::vector<TransformerBlock<T>> blocks_;
  LayerNormParams<T> ln_f_;
  bool frozen_ = false;
};

/// Bidirectional transformer encoder over d_t-wide vectors. Owns the token
/// table whose <sep> row initialises the interaction's global slot.
template <typename T>
class FrozenTextEncoder {
 public:
  FrozenTextEncoder() = default;
  static FrozenTextEncoder init(const TextEncoderConfig& cfg, std::mt19937_64& rng);

  BasicTensor<T> embed(std::span<const TokenId> ids) const;
  /// Per-position outputs after the final layer norm. `use_positions=false`
  /// drops the positional table (used to test permutation symmetry).
  BasicTensor<T> forward(const BasicTensor<T>& inputs, bool use_positions = true) const;
  BasicTensor<T> forward_packed(const BasicTensor<T>& inputs,
                                std::span<const std::size_t> segments) const;
  /// The frozen [SEP] embedding row, [1, width].
  BasicTensor<T> sep_row() const;

  const TextEncoderConfig& config() const { return cfg_; }
  NamedTensors<T> parameters() const;
  void set_trainable(bool on);
  bool frozen() const { return frozen_; }
  void freeze();
  std::uint64_t checksum() const { return weights_checksum(parameters()); }
  void assign(const NamedTensors<T>& tensors);

  template <typename U>
  FrozenTextEncoder<U> cast() const {
    FrozenTextEncoder<U> out;
    out.cfg_ = cfg_;
    out.tok_emb_ = tok_emb_.template cast<U>();
    out.pos_emb_ = pos_emb_.template cast<U>();
    for (const auto& b : blocks_) out.blocks_.push_back(b.template cast<U>());
    out.ln_f_ = ln_f_.template cast<U>();
    out.frozen_ = frozen_;
    return out;
  }

 private:
  template <typename U>
  friend class FrozenTextEncoder;

  BasicTensor<T> run(const BasicTensor<T>& x, std::span<const std::size_t> segments) const;

  TextEncoderConfig cfg_;
  BasicTensor<T> tok_emb_;
  BasicTensor<T> pos_emb_;
  std::vector<TransformerBlock<T>> blocks_;
  LayerNormParams<T> ln_f_;
  bool frozen_ = false;
};

/// Symbolic image encoder: per-object attribute embeddings (shape, color,
/// row, col; 16 wide each) concatenated to 64, passed through a per-object
/// tanh layer, sum-pooled over objects, then affine + tanh to d_v = 32.
template <typename T>
class FrozenVisualEncoder {
 public:
  FrozenVisualEncoder() = default;
  static FrozenVisualEncoder init(std::mt19937_64& rng);

  /// h_I, [1, 32].
  BasicTensor<T> encode(const Scene& scene) const;
  /// One row per scene, [scenes.size(), 32].
  BasicTensor<T> encode_batch(std::span<const Scene> scenes) const;

  NamedTensors<T> parameters() const;
  void set_trainable(bool on);
  bool frozen() const { return frozen_; }
  void freeze();
  std::uint64_t checksum() const { return weights_checksum(parameters()); }
  void assign(const NamedTensors<T>& tensors);

  template <typename U>
  FrozenVisualEncoder<U> cast() const {
    FrozenVisualEncoder<U> out;
    out.shape_ = shape_.template cast<U>();
    out.color_ = color_.template cast<U>();
    out.row_ = row_.template cast<U>();
    out.col_ = col_.template cast<U>();
    out.object_ = object_.template cast<U>();
    out.out_ = out_.template cast<U>();
    out.frozen_ = frozen_;
    return out;
  }

 private:
  template <typename U>
  friend class FrozenVisualEncoder;

  BasicTensor<T> shape_, color_, row_, col_;
  Linear<T> object_;
  Linear<T> out_;
  bool frozen_ = false;
};

/// Copies values from `src` into the same-named entries of `dst`, checking
/// shapes. Throws ContractError on missing names or shape mismatches.
template <typename T>
void assign_named(NamedTensors<T>& dst, const NamedTensors<T>& src, const std::string& owner);

}  // namespace ipn
