// Copyright 2026 The IPN Authors
// SPDX-License-Identifier: Apache-2.0
//
// The interactive perception network: four linear layers and two special
// token embeddings around a frozen LM and a frozen text encoder.
//
//   pass 1:  [h_img, X, E_imgd]  --LM-->  h_r (last position)
//   h_R = W_req h_r;  fine = W_decomp h_I (5 x d_t)
//   text encoder on [fine_1..fine_5, h_R, SEP] -> h_g_out (last position)
//   h_d = W_out h_g_out
//   pass 2:  [h_img, X, h_d]  --LM-->  answer

#pragma once

#include <array>
#include <cstdint>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "ipn/backbones.hpp"
#include "ipn/tokenizer.hpp"

namespace ipn {

inline constexpr std::size_t kFineSlots = 5;
inline constexpr std::size_t kInteractionLength = kFineSlots + 2;

enum class IpnGroup { kAlign, kReq, kDecomp, kOut, kImg, kImgD };
inline constexpr std::array<IpnGroup, 6> kAllGroups = {IpnGroup::kAlign, IpnGroup::kReq,
                                                      IpnGroup::kDecomp, IpnGroup::kOut,
                                                      IpnGroup::kImg, IpnGroup::kImgD};

/// "W_align", "W_req", "W_decomp", "W_out", "E_img", "E_imgd".
const char* group_name(IpnGroup g);
/// Groups trained in `phase` (1 or 2).
std::vector<IpnGroup> phase_groups(int phase);

template <typename T>
struct IpnParams {
  Linear<T> align;   // d_v -> d_L
  Linear<T> req;     // d_L -> d_t
  Linear<T> decomp;  // d_v -> 5 d_t
  Linear<T> out;     // d_t -> d_L
  BasicTensor<T> e_img;   // [1, d_L]
  BasicTensor<T> e_imgd;  // [1, d_L]

  /// Linear layers from `rng`; E_img copies the LM's <bos> row and E_imgd
  /// its <sep> row.
  static IpnParams init(const FrozenLm<T>& lm, std::mt19937_64& rng);

  /// Tensors of one group, named "ipn.<group>.w" / ".b" or "ipn.<group>".
  NamedTensors<T> group(IpnGroup g) const;
  NamedTensors<T> parameters() const;
  std::size_t parameter_count() const;
  /// requires_grad on exactly the groups of `phase`; 0 freezes everything.
  void set_phase(int phase);
  void assign(const NamedTensors<T>& tensors);
  std::uint64_t group_checksum(std::span<const IpnGroup> groups) const;

  template <typename U>
  IpnParams<U> cast() const {
    return {align.template cast<U>(),     req.template cast<U>(),
            decomp.template cast<U>(),    out.template cast<U>(),
            e_img.template cast<U>(),     e_imgd.template cast<U>()};
  }
};

/// Everything needed to answer a query about a scene.
template <typename T>
struct ModelBundle {
  Tokenizer tok = Tokenizer::standard();
  FrozenLm<T> lm;
  FrozenTextEncoder<T> text;
  FrozenVisualEncoder<T> vis;
  IpnParams<T> ipn;

  /// FNV-1a over the three frozen backbones.
  std::uint64_t backbone_checksum() const;

  template <typename U>
  ModelBundle<U> cast() const {
    return {tok, lm.template cast<U>(), text.template cast<U>(), vis.template cast<U>(),
            ipn.template cast<U>()};
  }
};

template <typename T>
struct FirstPassResult {
  BasicTensor<T> h_r;     // [1, d_L]
  BasicTensor<T> hidden;  // [M+2, d_L]
};

template <typename T>
struct InteractionResult {
  BasicTensor<T> h_R;       // [1, d_t]
  BasicTensor<T> h_I_fine;  // [5, d_t]
  BasicTensor<T> h_g_out;   // [1, d_t]
  BasicTensor<T> h_d;       // [1, d_L]
};

/// A prefix sequence plus how many query tokens were cut to fit.
template <typename T>
struct Prefix {
  BasicTensor<T> rows;
  std::size_t truncated = 0;
};

/// h_img = W_align h_I + b + E_img, one row per input row.
template <typename T>
BasicTensor<T> feature_align(const IpnParams<T>& p, const BasicTensor<T>& h_I);

/// [h_img] ++ embed(query) ++ [E_imgd]. Queries longer than the LM context
/// allows lose tokens from the left. Empty query -> ContractError.
template <typename T>
Prefix<T> build_first_pass(const FrozenLm<T>& lm, const IpnParams<T>& p,
                           const BasicTensor<T>& h_img, std::span<const TokenId> query);
/// [h_img] ++ embed(query) ++ [h_d]; same length as the first pass.
template <typename T>
Prefix<T> build_second_pass(const FrozenLm<T>& lm, const BasicTensor<T>& h_img,
                            std::span<const TokenId> query, const BasicTensor<T>& h_d);

/// Last-layer hidden state at the final position, [1, d_L].
template <typename T>
BasicTensor<T> extract_request(const LmOutput<T>& first_pass);
template <typename T>
BasicTensor<T> project_request(const IpnParams<T>& p, const BasicTensor<T>& h_r);
/// [rows, d_v] -> [5 * rows, d_t]; rows 5i..5i+4 belong to input row i.
template <typename T>
BasicTensor<T> decompose_image(const IpnParams<T>& p, const BasicTensor<T>& h_I);
/// Runs the frozen encoder on [fine (5 rows), h_R, SEP]; returns the output
/// at the SEP slot, [1, d_t].
template <typename T>
BasicTensor<T> interact(const FrozenTextEncoder<T>& enc, const BasicTensor<T>& h_I_fine,
                        const BasicTensor<T>& h_R);
template <typename T>
BasicTensor<T> transmit(const IpnParams<T>& p, const BasicTensor<T>& h_g_out);

template <typename T>
struct IpnForward {
  BasicTensor<T> h_I;
  BasicTensor<T> h_img;
  FirstPassResult<T> first;
  InteractionResult<T> interaction;
  BasicTensor<T> second_hidden;  // [M+2, d_L]
  BasicTensor<T> logits;         // second-pass logits, [M+2, |V|]
  std::size_t truncated = 0;
};

/// The full two-pass flow for one scene and query.
template <typename T>
IpnForward<T> ipn_forward(const ModelBundle<T>& m, const Scene& scene,
                          std::span<const TokenId> query);

enum class Mode { kIpn, kStatic };
Mode parse_mode(const std::string& s);
const char* mode_name(Mode m);

/// Batched form of the protocol up to the generation prefix: for every row
/// of h_I and its query, the second-pass prefix (mode ipn) or the first-pass
/// prefix (mode static). Queries must already fit the context.
template <typename T>
std::vector<BasicTensor<T>> batch_prefixes(const ModelBundle<T>& m, const BasicTensor<T>& h_I,
                                           const std::vector<std::vector<TokenId>>& queries,
                                           Mode mode);

/// Longest query the protocol accepts: LM context minus the two image slots.
std::size_t max_query_tokens(const LmConfig& cfg);

namespace testing {
/// Fault injection for the gradient checker: negates the gradient flowing
/// into W_out. Global, off by default.
void set_wout_sign_fault(bool on);
bool wout_sign_fault();
}  // namespace testing

}  // namespace ipn
