// Copyright 2026 The IPN Authors
// SPDX-License-Identifier: Apache-2.0
//
// Text metrics: exact match, BLEU-1/2, ROUGE-1/L, CIDEr and METEOR in its
// exact-match-only configuration. Texts are lowercased and split on
// whitespace before n-gram counting.

#pragma once

#include <map>
#include <string>
#include <string_view>
#include <vector>

namespace ipn {

/// Lowercase, drop the words a/an/the, strip punctuation, collapse spaces.
std::string normalize_answer(std::string_view text);
int exact_match(std::string_view hypothesis, std::string_view reference);

std::vector<std::string> metric_tokens(std::string_view text);

/// Clipped n-gram precision, geometric mean over orders 1..n, brevity
/// penalty against the closest reference length. n in {1, 2}.
double bleu(std::string_view hyp, const std::vector<std::string>& refs, int n);
/// Modified (clipped) n-gram precision of one order.
double modified_precision(std::string_view hyp, const std::vector<std::string>& refs, int n);

double rouge_1(std::string_view hyp, std::string_view ref);
double rouge_l(std::string_view hyp, std::string_view ref);

/// Document frequencies of n-grams (n = 1..4) over a reference set; one
/// document per example (its references together).
class CiderStats {
 public:
  /// Throws ContractError with fewer than two documents.
  explicit CiderStats(const std::vector<std::vector<std::string>>& documents);
  double idf(const std::string& ngram) const;
  std::size_t documents() const { return n_docs_; }

 private:
  std::map<std::string, std::size_t> df_;
  std::size_t n_docs_ = 0;
};

/// Mean over n = 1..4 of the average cosine between tf-idf vectors of the
/// hypothesis and each reference, times 10.
double cider(std::string_view hyp, const std::vector<std::string>& refs, const CiderStats& stats);

struct MeteorParts {
  std::size_t matches = 0;
  std::size_t chunks = 0;
  double precision = 0.0;
  double recall = 0.0;
  double fmean = 0.0;
  double penalty = 0.0;
  double score = 0.0;
};

/// Exact unigram alignment. Hypothesis words are aligned left to right, each
/// to the reference position right after the previous alignment when that
/// word matches there, otherwise to the earliest unused matching position.
/// F = PR / (0.9 P + 0.1 R), penalty 0.5 (chunks / matches)^3.
MeteorParts meteor_parts(std::string_view hyp, std::string_view ref);
double meteor(std::string_view hyp, std::string_view ref);

}  // namespace ipn
