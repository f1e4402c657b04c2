// Copyright 2026 The IPN Authors
// SPDX-License-Identifier: Apache-2.0

#include <cmath>

#include "doctest.h"
#include "ipn/errors.hpp"
#include "ipn/metrics.hpp"
#include "metric_fixture.hpp"

using namespace ipn;
using ipn_fixture::kFixture;

namespace {

constexpr double kTol = 1e-6;

}  // namespace

TEST_CASE("metric fixture matches the reference scores") {
  std::vector<std::vector<std::string>> docs;
  for (const auto& r : kFixture) docs.push_back({r.ref});
  const CiderStats stats(docs);
  REQUIRE(std::size(kFixture) == 20);
  for (const auto& r : kFixture) {
    CAPTURE(r.hyp);
    CAPTURE(r.ref);
    const std::vector<std::string> refs{r.ref};
    CHECK(exact_match(r.hyp, r.ref) == r.em);
    CHECK(std::abs(bleu(r.hyp, refs, 1) - r.bleu1) <= kTol);
    CHECK(std::abs(bleu(r.hyp, refs, 2) - r.bleu2) <= kTol);
    CHECK(std::abs(rouge_1(r.hyp, r.ref) - r.rouge1) <= kTol);
    CHECK(std::abs(rouge_l(r.hyp, r.ref) - r.rougeL) <= kTol);
    CHECK(std::abs(meteor(r.hyp, r.ref) - r.meteor) <= kTol);
    CHECK(std::abs(cider(r.hyp, refs, stats) - r.cider) <= kTol);
  }
}

TEST_CASE("bleu clips repeated unigrams") {
  const std::vector<std::string> refs{"the cat is on the mat"};
  CHECK(modified_precision("the the the the the the the", refs, 1) == doctest::Approx(2.0 / 7.0));
  CHECK(bleu("the the the the the the the", refs, 2) == 0.0);
}

TEST_CASE("bleu brevity penalty uses the closest reference") {
  const std::vector<std::string> refs{"a b c d", "a b c d e f g h"};
  CHECK(bleu("a b c", refs, 1) == doctest::Approx(std::exp(1.0 - 4.0 / 3.0)));
  // Equidistant references: the shorter one sets r.
  const std::vector<std::string> tie{"a b", "a b c d e f"};
  CHECK(bleu("a b c d", tie, 1) == doctest::Approx(1.0));
  CHECK_THROWS_AS(bleu("a", refs, 3), ContractError);
  CHECK_THROWS_AS(bleu("a", {}, 1), ContractError);
}

TEST_CASE("rouge-l on a two of three subsequence") {
  CHECK(rouge_l("the cat sat", "the sat down") == doctest::Approx(2.0 / 3.0));
  CHECK(rouge_l("", "x") == 0.0);
  CHECK(rouge_1("x y", "") == 0.0);
}

TEST_CASE("meteor fragmentation penalty") {
  const auto m = meteor_parts("the cat sat on the mat", "on the mat sat the cat");
  CHECK(m.matches == 6);
  CHECK(m.chunks == 6);
  CHECK(m.penalty == doctest::Approx(0.5));
  CHECK(m.score == doctest::Approx(0.5));
  const auto one = meteor_parts("a b c", "a b c");
  CHECK(one.chunks == 1);
  CHECK(one.penalty == doctest::Approx(0.5 / 27.0));
  CHECK(meteor("x", "y") == 0.0);
}

TEST_CASE("exact match normalization") {
  CHECK(normalize_answer("The Red, circle!") == "red circle");
  CHECK(normalize_answer("  an   apple . ") == "apple");
  CHECK(exact_match("(a)", "(A)") == 1);
  CHECK(exact_match("(a)", "(b)") == 0);
  CHECK(exact_match("the circle is green", "circle is green .") == 1);
  CHECK(exact_match("", "") == 1);
}

TEST_CASE("cider needs two documents and is zero for disjoint text") {
  CHECK_THROWS_AS(CiderStats({{"a b"}}), ContractError);
  const CiderStats stats({{"a b c"}, {"d e f"}});
  CHECK(cider("x y z", {"a b c"}, stats) == 0.0);
  CHECK(cider("a b c", {"a b c"}, stats) == doctest::Approx(10.0 * 3.0 / 4.0));
}
