// Copyright 2026 The IPN Authors
// SPDX-License-Identifier: Apache-2.0

#include "ipn/metrics.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <set>
#include <sstream>

#include "ipn/errors.hpp"

namespace ipn {

namespace {

std::string lower(std::string_view s) {
  std::string out(s);
  for (auto& c : out) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
  return out;
}

std::vector<std::string> split(const std::string& s) {
  std::istringstream in(s);
  std::vector<std::string> out;
  for (std::string w; in >> w;) out.push_back(w);
  return out;
}

using Counts = std::map<std::string, std::size_t>;

Counts ngrams(const std::vector<std::string>& toks, int n) {
  Counts c;
  const auto un = static_cast<std::size_t>(n);
  for (std::size_t i = 0; i + un <= toks.size(); ++i) {
    std::string key = toks[i];
    for (std::size_t k = 1; k < un; ++k) key += ' ' + toks[i + k];
    ++c[key];
  }
  return c;
}

double f1(double overlap, double hyp_len, double ref_len) {
  if (overlap == 0.0) return 0.0;
  const double p = overlap / hyp_len, r = overlap / ref_len;
  return 2.0 * p * r / (p + r);
}

}  // namespace

std::string normalize_answer(std::string_view text) {
  std::string out;
  for (const auto& w : split(lower(text))) {
    if (w == "a" || w == "an" || w == "the") continue;
    std::string kept;
    for (char c : w) {
      if (!std::ispunct(static_cast<unsigned char>(c))) kept += c;
    }
    if (kept.empty()) continue;
    if (!out.empty()) out += ' ';
    out += kept;
  }
  return out;
}

int exact_match(std::string_view hypothesis, std::string_view reference) {
  return normalize_answer(hypothesis) == normalize_answer(reference) ? 1 : 0;
}

std::vector<std::string> metric_tokens(std::string_view text) { return split(lower(text)); }

double modified_precision(std::string_view hyp, const std::vector<std::string>& refs, int n) {
  const auto h = ngrams(metric_tokens(hyp), n);
  std::size_t total = 0, clipped = 0;
  Counts max_ref;
  for (const auto& r : refs) {
    for (const auto& [g, c] : ngrams(metric_tokens(r), n)) max_ref[g] = std::max(max_ref[g], c);
  }
  for (const auto& [g, c] : h) {
    total += c;
    const auto it = max_ref.find(g);
    clipped += std::min(c, it == max_ref.end() ? std::size_t{0} : it->second);
  }
  return total == 0 ? 0.0 : static_cast<double>(clipped) / static_cast<double>(total);
}

double bleu(std::string_view hyp, const std::vector<std::string>& refs, int n) {
  if (n < 1 || n > 2) throw ContractError("bleu: n must be 1 or 2");
  if (refs.empty()) throw ContractError("bleu: no references");
  const std::size_t c = metric_tokens(hyp).size();
  if (c == 0) return 0.0;
  double log_sum = 0.0;
  for (int k = 1; k <= n; ++k) {
    const double p = modified_precision(hyp, refs, k);
    if (p == 0.0) return 0.0;
    log_sum += std::log(p);
  }
  // Closest reference length, shorter on ties.
  std::size_t r = 0, best_gap = SIZE_MAX;
  for (const auto& ref : refs) {
    const std::size_t len = metric_tokens(ref).size();
    const std::size_t gap = len > c ? len - c : c - len;
    if (gap < best_gap || (gap == best_gap && len < r)) {
      best_gap = gap;
      r = len;
    }
  }
  const double bp = c < r ? std::exp(1.0 - static_cast<double>(r) / static_cast<double>(c)) : 1.0;
  return bp * std::exp(log_sum / n);
}

double rouge_1(std::string_view hyp, std::string_view ref) {
  const auto h = metric_tokens(hyp), r = metric_tokens(ref);
  if (h.empty() || r.empty()) return 0.0;
  const auto hc = ngrams(h, 1), rc = ngrams(r, 1);
  std::size_t overlap = 0;
  for (const auto& [g, c] : hc) {
    const auto it = rc.find(g);
    if (it != rc.end()) overlap += std::min(c, it->second);
  }
  return f1(static_cast<double>(overlap), static_cast<double>(h.size()), static_cast<double>(r.size()));
}

double rouge_l(std::string_view hyp, std::string_view ref) {
  const auto h = metric_tokens(hyp), r = metric_tokens(ref);
  if (h.empty() || r.empty()) return 0.0;
  std::vector<std::vector<std::size_t>> dp(h.size() + 1, std::vector<std::size_t>(r.size() + 1, 0));
  for (std::size_t i = 1; i <= h.size(); ++i) {
    for (std::size_t j = 1; j <= r.size(); ++j) {
      dp[i][j] = h[i - 1] == r[j - 1] ? dp[i - 1][j - 1] + 1 : std::max(dp[i - 1][j], dp[i][j - 1]);
    }
  }
  return f1(static_cast<double>(dp[h.size()][r.size()]), static_cast<double>(h.size()),
            static_cast<double>(r.size()));
}

CiderStats::CiderStats(const std::vector<std::vector<std::string>>& documents) {
  if (documents.size() < 2) {
    throw ContractError("cider: idf needs at least 2 reference documents, got " +
                        std::to_string(documents.size()));
  }
  n_docs_ = documents.size();
  for (const auto& refs : documents) {
    std::set<std::string> seen;
    for (const auto& r : refs) {
      const auto toks = metric_tokens(r);
      for (int n = 1; n <= 4; ++n) {
        for (const auto& [g, c] : ngrams(toks, n)) seen.insert(g);
      }
    }
    for (const auto& g : seen) ++df_[g];
  }
}

double CiderStats::idf(const std::string& ngram) const {
  const auto it = df_.find(ngram);
  const double df = it == df_.end() ? 0.0 : static_cast<double>(it->second);
  // Unseen n-grams get df 1 so the weight stays finite.
  return std::log(static_cast<double>(n_docs_) / std::max(1.0, df));
}

double cider(std::string_view hyp, const std::vector<std::string>& refs, const CiderStats& stats) {
  if (refs.empty()) throw ContractError("cider: no references");
  const auto h = metric_tokens(hyp);
  auto vec = [&](const std::vector<std::string>& toks, int n) {
    const Counts c = ngrams(toks, n);
    std::size_t total = 0;
    for (const auto& [g, k] : c) total += k;
    std::map<std::string, double> v;
    for (const auto& [g, k] : c) {
      v[g] = static_cast<double>(k) / static_cast<double>(total) * stats.idf(g);
    }
    return v;
  };
  double sum = 0.0;
  for (int n = 1; n <= 4; ++n) {
    const auto hv = vec(h, n);
    double hn = 0.0;
    for (const auto& [g, w] : hv) hn += w * w;
    double acc = 0.0;
    for (const auto& ref : refs) {
      const auto rv = vec(metric_tokens(ref), n);
      double rn = 0.0, dot = 0.0;
      for (const auto& [g, w] : rv) {
        rn += w * w;
        const auto it = hv.find(g);
        if (it != hv.end()) dot += w * it->second;
      }
      if (hn > 0.0 && rn > 0.0) acc += dot / (std::sqrt(hn) * std::sqrt(rn));
    }
    sum += acc / static_cast<double>(refs.size());
  }
  return 10.0 * sum / 4.0;
}

MeteorParts meteor_parts(std::string_view hyp, std::string_view ref) {
  const auto h = metric_tokens(hyp), r = metric_tokens(ref);
  MeteorParts m;
  if (h.empty() || r.empty()) return m;
  std::vector<bool> used(r.size(), false);
  std::vector<long> align(h.size(), -1);
  long prev = -2;
  for (std::size_t i = 0; i < h.size(); ++i) {
    long pick = -1;
    const long next = prev + 1;
    if (prev >= 0 && next < static_cast<long>(r.size()) && !used[static_cast<std::size_t>(next)] &&
        r[static_cast<std::size_t>(next)] == h[i]) {
      pick = next;
    } else {
      for (std::size_t j = 0; j < r.size(); ++j) {
        if (!used[j] && r[j] == h[i]) {
          pick = static_cast<long>(j);
          break;
        }
      }
    }
    if (pick >= 0) {
      used[static_cast<std::size_t>(pick)] = true;
      align[i] = pick;
      ++m.matches;
    }
    prev = pick;
  }
  if (m.matches == 0) return m;
  // A chunk is a maximal run of hypothesis positions aligned to consecutive
  // reference positions.
  for (std::size_t i = 0; i < h.size(); ++i) {
    if (align[i] < 0) continue;
    const bool continues = i > 0 && align[i - 1] >= 0 && align[i] == align[i - 1] + 1;
    if (!continues) ++m.chunks;
  }
  const double mt = static_cast<double>(m.matches);
  m.precision = mt / static_cast<double>(h.size());
  m.recall = mt / static_cast<double>(r.size());
  m.fmean = m.precision * m.recall / (0.9 * m.precision + 0.1 * m.recall);
  m.penalty = 0.5 * std::pow(static_cast<double>(m.chunks) / mt, 3.0);
  m.score = m.fmean * (1.0 - m.penalty);
  return m;
}

double meteor(std::string_view hyp, std::string_view ref) { return meteor_parts(hyp, ref).score; }

}  // namespace ipn
