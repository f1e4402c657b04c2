// Copyright 2026 The IPN Authors
// SPDX-License-Identifier: Apache-2.0
//
// The two training phases. Phase 1 fits the feature alignment on captions;
// phase 2 fits the interaction layers on instruction data with the phase-1
// groups frozen. Both minimise the per-token NLL of the target given the
// prefix (teacher forcing), averaged per example and then over the batch.

#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <string>
#include <unordered_map>
#include <vector>

#include "json.hpp"

#include "ipn/data.hpp"
#include "ipn/ipn.hpp"

namespace ipn {

struct TrainConfig {
  int phase = 1;
  float base_lr = 1e-4f;
  /// 0 picks the phase default (64 for phase 1, 32 for phase 2).
  std::size_t batch_size = 0;
  std::size_t epochs = 5;
  std::uint64_t seed = 0;
  /// Phase 1 stops early once an epoch improves the training loss by less
  /// than this relative amount. 0 disables.
  double plateau = 0.0;
  std::size_t eval_every = 0;
  float weight_decay = 0.01f;

  std::size_t effective_batch() const { return batch_size ? batch_size : (phase == 1 ? 64 : 32); }
};

struct LossRecord {
  std::int64_t step = 0;
  int phase = 1;
  /// Total NLL over the batch's target tokens divided by their count.
  double loss = 0.0;
  double lr = 0.0;
  /// Hex FNV-1a of the trainable groups after this step.
  std::string digest;
  /// Per-token NLL restricted to each sample kind present in the batch.
  std::map<std::string, double> kind_losses;
};

nlohmann::ordered_json to_json(const LossRecord& r);

struct TrainResult {
  std::vector<LossRecord> records;
  std::vector<double> epoch_loss;
  std::size_t epochs_run = 0;
  std::size_t truncated_queries = 0;
  /// Corpus NLL per token before and after training; filled by cmd_train
  /// for phase 1 only.
  double initial_nll = 0.0;
  double final_nll = 0.0;
};

/// One teacher-forced example: the query (empty in phase 1) and the target
/// tokens without the trailing <eos>.
struct TokenizedExample {
  std::size_t image_row = 0;
  std::string kind;
  std::vector<TokenId> query;
  std::vector<TokenId> target;
};

/// h_I for every scene plus an id -> row map.
struct ImageTable {
  Tensor features;
  std::unordered_map<std::uint64_t, std::size_t> row_of;

  static ImageTable build(const FrozenVisualEncoder<float>& vis, const std::vector<Scene>& scenes);
  std::size_t row(std::uint64_t scene_id) const;
};

/// Tokenises samples for the given phase. Phase 1 rejects anything but
/// captions; phase 2 rejects captions. Over-long queries are cut from the
/// left and counted in `truncated`.
std::vector<TokenizedExample> tokenize_corpus(const std::vector<InstructionSample>& corpus,
                                              const ImageTable& images, const Tokenizer& tok,
                                              int phase, const LmConfig& lm_cfg,
                                              std::size_t* truncated = nullptr);

/// Mean over examples of each example's per-token NLL. `h_I` holds one row
/// per example. Phase 1 conditions on [h_img, <bos>]; phase 2 on the
/// second-pass prefix.
template <typename T>
BasicTensor<T> batch_loss(const ModelBundle<T>& m, const BasicTensor<T>& h_I,
                          const std::vector<const TokenizedExample*>& batch, int phase,
                          std::vector<double>* per_token_nll = nullptr);

struct TrainHooks {
  std::function<void(const LossRecord&)> on_step;
  std::function<void(const std::string&)> log;
  /// Called every eval_every steps and at the end of each epoch.
  std::function<void(std::int64_t step)> on_eval;
};

/// Trains the groups of `cfg.phase` in place. Verifies the optimizer
/// registry by name and the freeze contract (backbones plus the IPN groups
/// outside the phase) before and after. Throws TrainingAborted on a
/// non-finite loss after restoring the last finite parameters.
TrainResult train_phase(ModelBundle<float>& m, const std::vector<TokenizedExample>& corpus,
                        const ImageTable& images, const TrainConfig& cfg,
                        const TrainHooks& hooks = {});

/// Mean per-token NLL over a corpus, no gradients.
double corpus_nll(const ModelBundle<float>& m, const std::vector<TokenizedExample>& corpus,
                  const ImageTable& images, int phase);

}  // namespace ipn
