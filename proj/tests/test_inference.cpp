// Copyright 2026 The IPN Authors
// SPDX-License-Identifier: Apache-2.0

#include <cmath>
#include <map>

#include "doctest.h"
#include "ipn/errors.hpp"
#include "ipn/fnv.hpp"
#include "ipn/inference.hpp"
#include "test_models.hpp"

using namespace ipn;

namespace {

constexpr std::size_t kToyVocab = 5;
constexpr TokenId kToyEos = 4;

// Deterministic next-token distribution over 5 tokens keyed by the prefix.
std::vector<double> toy_dist(const std::vector<TokenId>& seq, std::uint64_t salt) {
  Fnv1a h;
  h.update(&salt, sizeof salt);
  for (TokenId t : seq) h.update(&t, sizeof t);
  std::mt19937_64 rng(h.digest());
  std::vector<double> logits(kToyVocab);
  for (auto& l : logits) l = 3.0 * uniform_unit(rng);
  double z = 0;
  for (double l : logits) z += std::exp(l);
  for (auto& l : logits) l -= std::log(z);
  return logits;
}

NextLogProbs toy_model(std::uint64_t salt) {
  return [salt](const std::vector<std::vector<TokenId>>& hyps) {
    std::vector<std::vector<double>> out;
    for (const auto& h : hyps) out.push_back(toy_dist(h, salt));
    return out;
  };
}

struct Best {
  double score = -1e300;
  std::vector<TokenId> tokens;
};

// Enumerates every completion of at most `max_len` decoding steps.
void enumerate(std::vector<TokenId>& seq, double total, std::size_t max_len, std::uint64_t salt,
               Best& best) {
  const auto lp = toy_dist(seq, salt);
  auto offer = [&](double score, const std::vector<TokenId>& toks) {
    if (score > best.score || (score == best.score && toks < best.tokens)) best = {score, toks};
  };
  offer((total + lp[kToyEos]) / double(seq.size() + 1), seq);
  for (TokenId t = 0; t < kToyEos; ++t) {
    seq.push_back(t);
    if (seq.size() == max_len) {
      offer((total + lp[t]) / double(max_len), seq);
    } else {
      enumerate(seq, total + lp[t], max_len, salt, best);
    }
    seq.pop_back();
  }
}

}  // namespace

TEST_CASE("beam search at saturating width matches exhaustive enumeration") {
  for (std::uint64_t salt = 0; salt < 50; ++salt) {
    CAPTURE(salt);
    Best oracle;
    std::vector<TokenId> seq;
    enumerate(seq, 0.0, 3, salt, oracle);
    const auto r = beam_core(toy_model(salt), 125, 3, kToyEos, {});
    CHECK(r.tokens == oracle.tokens);
    CHECK(r.score == doctest::Approx(oracle.score).epsilon(1e-12));
    const auto narrow = beam_core(toy_model(salt), 2, 3, kToyEos, {});
    CHECK(narrow.score <= oracle.score + 1e-12);
  }
}

TEST_CASE("beam of one is greedy on the toy model") {
  for (std::uint64_t salt = 0; salt < 100; ++salt) {
    const auto g = greedy_core(toy_model(salt), 6, kToyEos, {});
    const auto b = beam_core(toy_model(salt), 1, 6, kToyEos, {});
    CHECK(g.tokens == b.tokens);
    CHECK(g.finished == b.finished);
  }
}

TEST_CASE("banned tokens are never produced") {
  const TokenId banned[] = {0, 2};
  for (std::uint64_t salt = 0; salt < 20; ++salt) {
    for (const auto& r : {beam_core(toy_model(salt), 4, 5, kToyEos, banned),
                          greedy_core(toy_model(salt), 5, kToyEos, banned)}) {
      for (TokenId t : r.tokens) CHECK((t != 0 && t != 2));
    }
  }
}

TEST_CASE("beam(1) equals greedy on 100 prompts through the language model") {
  const auto m = random_bundle<float>(1);
  std::mt19937_64 rng(2);
  for (int i = 0; i < 100; ++i) {
    const std::size_t rows = 1 + uniform_index(rng, 10);
    const Tensor prefix = Tensor::randn({rows, 64}, rng, 1.0);
    const auto g = greedy_decode(m.lm, m.tok, prefix, 8);
    const auto b = beam_search(m.lm, m.tok, prefix, 1, 8);
    CHECK(g.tokens == b.tokens);
    CHECK(g.text == b.text);
    for (TokenId t : g.tokens) CHECK_FALSE(m.tok.is_special(t));
  }
}

TEST_CASE("beam width limits and context room") {
  const auto m = random_bundle<float>(3);
  std::mt19937_64 rng(4);
  const Tensor prefix = Tensor::randn({3, 64}, rng, 1.0);
  CHECK_THROWS_AS(beam_search(m.lm, m.tok, prefix, 0, 5), ContractError);
  CHECK_THROWS_AS(beam_search(m.lm, m.tok, prefix, kMaxBeam + 1, 5), ContractError);
  const Tensor full = Tensor::randn({62, 64}, rng, 1.0);
  CHECK(greedy_decode(m.lm, m.tok, full, 48).tokens.size() <= 2);
  CHECK_THROWS_AS(greedy_decode(m.lm, m.tok, Tensor::randn({65, 64}, rng, 1.0), 4), ContractError);
}

TEST_CASE("answer reports truncation and trace norms") {
  const auto m = random_bundle<float>(5);
  const auto scene = gen_scene(6, 0);
  AnswerOptions o;
  o.trace = true;
  o.max_len = 4;
  const auto r = answer(m, scene, "what color is the circle ?", o);
  REQUIRE(r.trace.has_value());
  CHECK(r.trace->h_r_norm > 0);
  CHECK(r.trace->h_R_norm > 0);
  CHECK(r.trace->h_d_norm > 0);
  CHECK(r.truncated_query == 0);
  std::string long_query;
  for (int i = 0; i < 70; ++i) long_query += "red ";
  CHECK(answer(m, scene, long_query, AnswerOptions{}).truncated_query == 8);
  CHECK_THROWS_AS(answer(m, scene, "", AnswerOptions{}), ContractError);
  o.mode = Mode::kStatic;
  o.trace = false;
  const auto s1 = answer(m, scene, "what color is the circle ?", o);
  const auto s2 = answer(m, scene, "what color is the circle ?", o);
  CHECK(s1.tokens == s2.tokens);
}
