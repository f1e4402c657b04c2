// Copyright 2026 The IPN Authors
// SPDX-License-Identifier: Apache-2.0

#include "ipn/inference.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

namespace ipn {

namespace {

constexpr TokenId kBanned[] = {Tokenizer::kPad, Tokenizer::kBos, Tokenizer::kSep, Tokenizer::kImg,
                               Tokenizer::kImgD};

struct Hyp {
  std::vector<TokenId> tokens;
  std::vector<double> log_probs;
  double total = 0.0;
  bool finished = false;
};

bool is_banned(std::span<const TokenId> banned, TokenId t) {
  return std::find(banned.begin(), banned.end(), t) != banned.end();
}

double normalized(const Hyp& h) {
  const std::size_t n = h.log_probs.size() + (h.finished ? 1 : 0);
  return n == 0 ? 0.0 : h.total / static_cast<double>(n);
}

// Higher score first, then the lexicographically smaller sequence.
bool better(double sa, const std::vector<TokenId>& a, double sb, const std::vector<TokenId>& b) {
  if (sa != sb) return sa > sb;
  return a < b;
}

DecodeResult to_result(const Hyp& h, std::size_t k) {
  DecodeResult r;
  r.tokens = h.tokens;
  r.log_probs = h.log_probs;
  r.finished = h.finished;
  r.score = normalized(h);
  r.beam_size = k;
  return r;
}

double l2(const Tensor& t) {
  double s = 0.0;
  for (float v : t.data()) s += static_cast<double>(v) * v;
  return std::sqrt(s);
}

}  // namespace

std::span<const TokenId> banned_tokens() { return kBanned; }

DecodeResult beam_core(const NextLogProbs& next, std::size_t k, std::size_t max_len, TokenId eos,
                       std::span<const TokenId> banned) {
  if (k == 0) throw ContractError("beam_core: k must be at least 1");
  std::vector<Hyp> live(1), done;
  for (std::size_t len = 0; len < max_len && !live.empty(); ++len) {
    std::vector<std::vector<TokenId>> seqs;
    for (const auto& h : live) seqs.push_back(h.tokens);
    const auto scores = next(seqs);
    struct Cand {
      std::size_t parent;
      TokenId tok;
      double total;
      std::vector<TokenId> seq;
    };
    std::vector<Cand> cands;
    for (std::size_t i = 0; i < live.size(); ++i) {
      for (std::size_t t = 0; t < scores[i].size(); ++t) {
        const auto tok = static_cast<TokenId>(t);
        if (is_banned(banned, tok) || !std::isfinite(scores[i][t])) continue;
        Cand c{i, tok, live[i].total + scores[i][t], live[i].tokens};
        c.seq.push_back(tok);
        cands.push_back(std::move(c));
      }
    }
    const std::size_t keep = std::min(k, cands.size());
    std::partial_sort(cands.begin(), cands.begin() + static_cast<std::ptrdiff_t>(keep), cands.end(),
                      [](const Cand& a, const Cand& b) { return better(a.total, a.seq, b.total, b.seq); });
    std::vector<Hyp> grown;
    for (std::size_t c = 0; c < keep; ++c) {
      const Hyp& p = live[cands[c].parent];
      Hyp h;
      h.tokens = p.tokens;
      h.log_probs = p.log_probs;
      h.total = cands[c].total;
      if (cands[c].tok == eos) {
        h.finished = true;
        done.push_back(std::move(h));
      } else {
        h.tokens.push_back(cands[c].tok);
        h.log_probs.push_back(scores[cands[c].parent][static_cast<std::size_t>(cands[c].tok)]);
        grown.push_back(std::move(h));
      }
    }
    live = std::move(grown);
  }
  for (auto& h : live) done.push_back(std::move(h));
  if (done.empty()) return to_result(Hyp{}, k);
  const Hyp* best = &done.front();
  for (const auto& h : done) {
    if (better(normalized(h), h.tokens, normalized(*best), best->tokens)) best = &h;
  }
  return to_result(*best, k);
}

DecodeResult greedy_core(const NextLogProbs& next, std::size_t max_len, TokenId eos,
                         std::span<const TokenId> banned) {
  Hyp h;
  for (std::size_t len = 0; len < max_len; ++len) {
    const auto scores = next({h.tokens}).front();
    TokenId arg = -1;
    double best = -std::numeric_limits<double>::infinity();
    for (std::size_t t = 0; t < scores.size(); ++t) {
      const auto tok = static_cast<TokenId>(t);
      if (is_banned(banned, tok) || !std::isfinite(scores[t])) continue;
      if (arg < 0 || scores[t] > best) {
        best = scores[t];
        arg = tok;
      }
    }
    if (arg < 0) break;
    h.total += best;
    if (arg == eos) {
      h.finished = true;
      break;
    }
    h.tokens.push_back(arg);
    h.log_probs.push_back(best);
  }
  return to_result(h, 1);
}

NextLogProbs lm_scorer(const FrozenLm<float>& lm, const Tensor& prefix) {
  return [&lm, prefix](const std::vector<std::vector<TokenId>>& hyps) {
    NoGradGuard no_grad;
    std::vector<Tensor> parts;
    std::vector<std::size_t> segs;
    std::vector<TokenId> last;
    std::size_t offset = 0;
    for (const auto& h : hyps) {
      parts.push_back(prefix);
      if (!h.empty()) parts.push_back(lm.embed(h));
      segs.push_back(prefix.dim(0) + h.size());
      offset += segs.back();
      last.push_back(static_cast<TokenId>(offset - 1));
    }
    LmOutput<float> out = lm.forward_packed(concat_rows(parts), segs);
    Tensor logits = lm.logits(embedding(out.hidden, std::span<const TokenId>(last)));
    const std::size_t v = logits.dim(1);
    std::vector<std::vector<double>> res(hyps.size(), std::vector<double>(v));
    for (std::size_t i = 0; i < hyps.size(); ++i) {
      const float* row = logits.data().data() + i * v;
      const double mx = *std::max_element(row, row + v);
      double z = 0.0;
      for (std::size_t j = 0; j < v; ++j) z += std::exp(static_cast<double>(row[j]) - mx);
      const double lz = mx + std::log(z);
      for (std::size_t j = 0; j < v; ++j) res[i][j] = static_cast<double>(row[j]) - lz;
    }
    return res;
  };
}

namespace {

std::size_t room(const FrozenLm<float>& lm, const Tensor& prefix, std::size_t max_len) {
  const std::size_t ctx = lm.config().max_len;
  if (prefix.rank() != 2 || prefix.dim(0) == 0 || prefix.dim(0) > ctx) {
    throw ContractError("decode: prefix must have 1.." + std::to_string(ctx) + " rows");
  }
  return std::min(max_len, ctx - prefix.dim(0));
}

}  // namespace

DecodeResult greedy_decode(const FrozenLm<float>& lm, const Tokenizer& tok, const Tensor& prefix,
                           std::size_t max_len) {
  auto r = greedy_core(lm_scorer(lm, prefix), room(lm, prefix, max_len), Tokenizer::kEos, banned_tokens());
  r.text = tok.decode(r.tokens);
  return r;
}

DecodeResult beam_search(const FrozenLm<float>& lm, const Tokenizer& tok, const Tensor& prefix,
                         std::size_t k, std::size_t max_len) {
  if (k < 1 || k > kMaxBeam) {
    throw ContractError("beam size " + std::to_string(k) + " outside 1.." + std::to_string(kMaxBeam));
  }
  auto r = beam_core(lm_scorer(lm, prefix), k, room(lm, prefix, max_len), Tokenizer::kEos,
                     banned_tokens());
  r.text = tok.decode(r.tokens);
  return r;
}

DecodeResult answer(const ModelBundle<float>& m, const Scene& scene, const std::string& query,
                    const AnswerOptions& opts) {
  std::vector<TokenId> q = m.tok.encode(query);
  if (q.empty()) throw ContractError("answer: empty query");
  const std::size_t limit = max_query_tokens(m.lm.config());
  std::size_t truncated = 0;
  if (q.size() > limit) {
    truncated = q.size() - limit;
    q.erase(q.begin(), q.begin() + static_cast<std::ptrdiff_t>(truncated));
  }
  Tensor prefix;
  {
    NoGradGuard no_grad;
    const Scene one[1] = {scene};
    Tensor h_I = m.vis.encode_batch(one);
    prefix = batch_prefixes(m, h_I, {q}, opts.mode).front();
  }
  DecodeResult r = opts.beam == 1 ? greedy_decode(m.lm, m.tok, prefix, opts.max_len)
                                  : beam_search(m.lm, m.tok, prefix, opts.beam, opts.max_len);
  r.truncated_query = truncated;
  if (opts.trace) {
    NoGradGuard no_grad;
    const auto f = ipn_forward(m, scene, q);
    r.trace = TraceRecord{l2(f.first.h_r), l2(f.interaction.h_R), l2(f.interaction.h_g_out),
                          l2(f.interaction.h_d)};
  }
  return r;
}

}  // namespace ipn
