// Copyright 2026 The IPN Authors
// SPDX-License-Identifier: Apache-2.0
//
// The operator commands behind the `ipn` binary. Every command works inside
// one run directory:
//
//   <out>/data/       scenes and per-kind JSONL corpora, train/ and heldout/
//   <out>/backbones/  lm.ipnb, encoders.ipnb, pretraining curves
//   <out>/ipn/        phase1.ipnb, phase2.ipnb, training logs
//   <out>/eval/       reports
//   <out>/manifest.json, <out>/<command>.resolved.conf

#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <string>
#include <vector>

#include "ipn/eval.hpp"
#include "ipn/ipn.hpp"
#include "ipn/training.hpp"

namespace ipn {

/// "key = value" settings with typed accessors. Unknown keys are rejected.
class RunConfig {
 public:
  RunConfig();
  /// Applies a config file; `#` starts a comment.
  void load_file(const std::filesystem::path& path);
  void set(const std::string& key, const std::string& value);
  const std::string& get(const std::string& key) const;
  std::int64_t get_int(const std::string& key) const;
  std::size_t get_size(const std::string& key) const;
  double get_double(const std::string& key) const;
  std::uint64_t seed() const;
  /// Every effective value, one per line, in key order.
  std::string resolved() const;
  const std::map<std::string, std::string>& values() const { return values_; }

 private:
  std::map<std::string, std::string> values_;
};

struct CommandContext {
  RunConfig cfg;
  std::filesystem::path out;
  bool force = false;
  std::function<void(const std::string&)> log;
};

/// Writes <out>/<name>.resolved.conf.
void write_resolved(const CommandContext& ctx, const std::string& name);

void cmd_gen_data(const CommandContext& ctx);
/// kind is "lm" or "encoders". Throws ThresholdError after writing the curve.
void cmd_pretrain(const CommandContext& ctx, const std::string& kind);
TrainResult cmd_train(const CommandContext& ctx, int phase);
EvalReport cmd_eval(const CommandContext& ctx, Mode mode);

struct AblationResult {
  EvalReport ipn;
  EvalReport static_mode;
  double ipn_em = 0.0;
  double static_em = 0.0;
  std::size_t items = 0;
};
/// Both modes on the held-out color/count/location questions.
AblationResult cmd_ablation(const CommandContext& ctx);

/// Loads backbones and the newest IPN checkpoint of the run.
ModelBundle<float> load_bundle(const CommandContext& ctx);
std::vector<Scene> load_scenes(const CommandContext& ctx);

struct GradcheckGroupResult {
  std::string group;
  std::string loss;
  double max_rel_error = 0.0;
  bool pass = false;
};

struct GradcheckReport {
  std::vector<GradcheckGroupResult> groups;
  double seconds = 0.0;
  bool pass() const;
};

/// Finite-difference check of all six IPN groups in 64-bit arithmetic:
/// phase-1 groups under the caption loss, all six under the second-pass loss.
GradcheckReport run_gradcheck(std::uint64_t seed, double tolerance = 1e-4);

}  // namespace ipn
