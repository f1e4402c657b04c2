// Copyright 2026 The IPN Authors
// SPDX-License-Identifier: Apache-2.0
//
// Decoding after a prefix: greedy and length-normalised beam search, and the
// answer pipeline in both modes (ipn: two passes; static: first-pass prefix
// with no interaction).

#pragma once

#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "ipn/ipn.hpp"

namespace ipn {

inline constexpr std::size_t kMaxBeam = 16;

struct TraceRecord {
  double h_r_norm = 0.0;
  double h_R_norm = 0.0;
  double h_g_out_norm = 0.0;
  double h_d_norm = 0.0;
};

struct DecodeResult {
  /// Generated tokens, without the closing <eos>.
  std::vector<TokenId> tokens;
  std::string text;
  /// log P of each entry of `tokens`.
  std::vector<double> log_probs;
  /// Sum of log-probabilities including <eos> (when emitted) divided by the
  /// number of scored tokens.
  double score = 0.0;
  bool finished = false;
  std::size_t beam_size = 1;
  std::size_t truncated_query = 0;
  std::optional<TraceRecord> trace;
};

/// Next-token log-probabilities for each hypothesis (generated tokens so far).
using NextLogProbs =
    std::function<std::vector<std::vector<double>>(const std::vector<std::vector<TokenId>>&)>;

/// Beam search over an arbitrary scorer. Each step keeps the k best
/// expansions by cumulative log-probability (ties: smaller token sequence);
/// expansions ending in `eos` retire. Runs until no live hypothesis remains
/// or `max_len` tokens were generated. Returns the retired hypothesis with
/// the best length-normalised score. `banned` tokens are never expanded.
/// Accepts any k >= 1; the LM entry points enforce 1..16.
DecodeResult beam_core(const NextLogProbs& next, std::size_t k, std::size_t max_len, TokenId eos,
                       std::span<const TokenId> banned);

/// Argmax decoding over a scorer, lowest id on ties.
DecodeResult greedy_core(const NextLogProbs& next, std::size_t max_len, TokenId eos,
                         std::span<const TokenId> banned);

/// Tokens decoding may never produce: <pad>, <bos>, <sep>, <img>, <img-d>.
std::span<const TokenId> banned_tokens();

/// Scorer that runs the frozen LM on [prefix ++ embed(hypothesis)].
NextLogProbs lm_scorer(const FrozenLm<float>& lm, const Tensor& prefix);

/// max_len is capped at the LM context left after the prefix.
DecodeResult greedy_decode(const FrozenLm<float>& lm, const Tokenizer& tok, const Tensor& prefix,
                           std::size_t max_len);
/// ContractError unless 1 <= k <= 16.
DecodeResult beam_search(const FrozenLm<float>& lm, const Tokenizer& tok, const Tensor& prefix,
                         std::size_t k, std::size_t max_len);

struct AnswerOptions {
  Mode mode = Mode::kIpn;
  std::size_t beam = 1;
  std::size_t max_len = 48;
  bool trace = false;
};

/// Encodes the scene, builds the prefix for `opts.mode` and decodes.
DecodeResult answer(const ModelBundle<float>& m, const Scene& scene, const std::string& query,
                    const AnswerOptions& opts);

}  // namespace ipn
