// Copyright 2026 The IPN Authors
// SPDX-License-Identifier: Apache-2.0
//
// Evaluation harness: decode every sample, score it, and aggregate.

#pragma once

#include <map>
#include <string>
#include <vector>

#include "json.hpp"

#include "ipn/data.hpp"
#include "ipn/inference.hpp"

namespace ipn {

struct EvalRow {
  std::size_t index = 0;
  std::string kind;
  /// color / count / exist / location for vqa rows, empty otherwise.
  std::string vqa_type;
  std::uint64_t scene_id = 0;
  std::string prompt;
  std::string reference;
  std::string hypothesis;
  std::size_t beam = 1;
  int em = 0;
  /// Generative scores, filled for detail rows only.
  bool generative = false;
  double bleu1 = 0, bleu2 = 0, rouge1 = 0, rougeL = 0, cider = 0, meteor = 0;
};

struct EvalReport {
  std::string mode;
  std::map<std::string, std::size_t> counts;
  std::map<std::string, double> em_by_kind;
  std::map<std::string, double> em_by_vqa_type;
  double em = 0.0;
  /// Over generative rows; zero when there are none.
  std::size_t generative_count = 0;
  double bleu1 = 0, bleu2 = 0, rouge1 = 0, rougeL = 0, cider = 0, meteor = 0;
  std::vector<EvalRow> rows;

  /// Aggregates recomputed from `rows`.
  static EvalReport from_rows(std::string mode, std::vector<EvalRow> rows);
  nlohmann::ordered_json to_json() const;
  std::string to_csv() const;
  /// EM over rows whose vqa_type is in `types`; -1 when no row matches.
  double em_over(const std::vector<std::string>& types) const;
};

struct EvalOptions {
  Mode mode = Mode::kIpn;
  std::size_t beam_short = 1;
  std::size_t beam_detail = 5;
  std::size_t max_len = 48;
};

/// Decodes every sample against its scene and scores it. CIDEr document
/// frequencies come from the detail references of `samples`.
EvalReport evaluate(const ModelBundle<float>& m, const std::vector<InstructionSample>& samples,
                    const std::vector<Scene>& scenes, const EvalOptions& opts);

}  // namespace ipn
