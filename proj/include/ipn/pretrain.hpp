// Copyright 2026 The IPN Authors
// SPDX-License-Identifier: Apache-2.0
//
// In-repo pretraining of the frozen backbones: next-token training of the
// language model on scenes described in words, and contrastive alignment of
// the visual and text encoders.

#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "ipn/backbones.hpp"
#include "ipn/data.hpp"
#include "ipn/tokenizer.hpp"

namespace ipn {

/// Text-only LM training sequences for the given scenes. Each scene yields
/// its caption as a sentence and, for every instruction kind, the scene
/// described in words followed by the question, <sep> and the answer:
///   <bos> {detail} . {prompt} <sep> {answer} <eos>
/// Four-choice items use the caption as the scene text. Sequences longer
/// than `max_len` are dropped. No <img>/<img-d> token ever appears.
std::vector<std::vector<TokenId>> build_lm_texts(const std::vector<Scene>& scenes,
                                                 const Tokenizer& tok, std::uint64_t seed,
                                                 std::size_t max_len = 64);

struct LmPretrainConfig {
  std::size_t epochs = 2;
  std::size_t batch_size = 64;
  float lr = 3e-3f;
  /// Held-out perplexity must end below this fraction of |V|.
  double max_perplexity_fraction = 0.6;
  std::uint64_t seed = 0;
};

struct PretrainLog {
  /// One entry per epoch: held-out perplexity (LM) or retrieval accuracy (encoders).
  std::vector<double> curve;
  std::vector<double> train_loss;
};

/// Mean next-token NLL per predicted token over `texts`.
double lm_heldout_nll(const FrozenLm<float>& lm, const std::vector<std::vector<TokenId>>& texts);

/// Trains `lm` in place, then freezes it. Throws ThresholdError carrying the
/// perplexity curve if the held-out perplexity bar is not met.
PretrainLog pretrain_text_lm(FrozenLm<float>& lm, const std::vector<std::vector<TokenId>>& train,
                             const std::vector<std::vector<TokenId>>& heldout,
                             const LmPretrainConfig& cfg,
                             const std::function<void(const std::string&)>& log = {});

struct ContrastiveConfig {
  std::size_t epochs = 8;
  std::size_t batch_size = 64;
  float lr = 3e-3f;
  float temperature = 0.07f;
  /// Caption-to-scene top-1 retrieval among `retrieval_pool` held-out scenes
  /// must reach this multiple of chance.
  double min_retrieval_over_chance = 5.0;
  std::size_t retrieval_pool = 256;
  std::uint64_t seed = 0;
};

/// Symmetric InfoNCE loss of one batch (exposed for tests).
Tensor info_nce(const Tensor& image_rows, const Tensor& text_rows, float temperature);

/// Text-side embedding used during alignment: mean over encoder outputs of
/// "{caption} <sep>", through `head`, L2-normalised. [captions.size(), 32].
Tensor caption_embeddings(const FrozenTextEncoder<float>& enc, const Linear<float>& head,
                          const std::vector<std::vector<TokenId>>& captions);

/// Top-1 caption->scene retrieval accuracy.
double retrieval_accuracy(const FrozenVisualEncoder<float>& vis, const FrozenTextEncoder<float>& enc,
                          const Linear<float>& head, const std::vector<Scene>& scenes,
                          const Tokenizer& tok);

/// Trains both encoders (plus a discarded projection head) in place, then
/// freezes them. Throws ThresholdError with the retrieval curve on failure.
PretrainLog contrastive_pretrain(FrozenVisualEncoder<float>& vis, FrozenTextEncoder<float>& enc,
                                 const std::vector<Scene>& train,
                                 const std::vector<Scene>& heldout, const Tokenizer& tok,
                                 const ContrastiveConfig& cfg,
                                 const std::function<void(const std::string&)>& log = {});

}  // namespace ipn
