// Copyright 2026 The IPN Authors
// SPDX-License-Identifier: Apache-2.0

#include <cmath>

#include "doctest.h"
#include "ipn/backbones.hpp"
#include "ipn/errors.hpp"
#include "ipn/pretrain.hpp"
#include "test_models.hpp"

using namespace ipn;

namespace {

Tensor random_rows(std::size_t rows, std::size_t cols, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  return Tensor::randn({rows, cols}, rng, 1.0);
}

}  // namespace

TEST_CASE("lm hidden states are causal") {
  const auto m = random_bundle<float>(1);
  Tensor x = random_rows(6, 64, 2);
  const auto before = m.lm.forward(x).hidden;
  std::vector<float> changed(x.data().begin(), x.data().end());
  for (std::size_t c = 0; c < 64; ++c) changed[5 * 64 + c] += 1.0f;
  const auto after = m.lm.forward(Tensor::from_data({6, 64}, changed)).hidden;
  for (std::size_t i = 0; i < 5 * 64; ++i) CHECK(before.at(i) == after.at(i));
  bool last_moved = false;
  for (std::size_t i = 5 * 64; i < 6 * 64; ++i) last_moved |= before.at(i) != after.at(i);
  CHECK(last_moved);
}

TEST_CASE("lm packed forward matches per-sequence forward") {
  const auto m = random_bundle<float>(3);
  Tensor a = random_rows(4, 64, 4), b = random_rows(3, 64, 5);
  const std::size_t seg[] = {4, 3};
  const auto packed = m.lm.forward_packed(concat_rows<float>({a, b}), seg).hidden;
  const auto ha = m.lm.forward(a).hidden, hb = m.lm.forward(b).hidden;
  for (std::size_t i = 0; i < ha.numel(); ++i) CHECK(packed.at(i) == doctest::Approx(ha.at(i)).epsilon(1e-5));
  for (std::size_t i = 0; i < hb.numel(); ++i) {
    CHECK(packed.at(ha.numel() + i) == doctest::Approx(hb.at(i)).epsilon(1e-5));
  }
}

TEST_CASE("lm rejects empty and over-long sequences") {
  const auto m = random_bundle<float>(1);
  CHECK_THROWS_AS(m.lm.forward(random_rows(65, 64, 1)), ContractError);
}

TEST_CASE("text encoder without positions is permutation equivariant") {
  const auto m = random_bundle<float>(6);
  Tensor x = random_rows(5, 32, 7);
  std::vector<float> perm_data;
  const std::size_t order[] = {3, 0, 4, 1, 2};
  for (std::size_t r : order) perm_data.insert(perm_data.end(), x.data().begin() + r * 32, x.data().begin() + (r + 1) * 32);
  const auto y = m.text.forward(x, false);
  const auto yp = m.text.forward(Tensor::from_data({5, 32}, perm_data), false);
  for (std::size_t i = 0; i < 5; ++i) {
    for (std::size_t c = 0; c < 32; ++c) CHECK(yp.at(i, c) == doctest::Approx(y.at(order[i], c)).epsilon(1e-5));
  }
}

TEST_CASE("visual encoder rows are per-scene and distinct") {
  const auto m = random_bundle<float>(8);
  const auto scenes = gen_scenes(9, 20);
  const auto batch = m.vis.encode_batch(scenes);
  CHECK(batch.shape() == Shape{20, kVisualWidth});
  const auto one = m.vis.encode(scenes[7]);
  CHECK(one.shape() == Shape{1, kVisualWidth});
  for (std::size_t c = 0; c < kVisualWidth; ++c) CHECK(batch.at(7, c) == doctest::Approx(one.at(c)));
  CHECK(cosine(m.vis.encode(scenes[0]), m.vis.encode(scenes[1])) < 0.9999);
  Scene bad = scenes[0];
  bad.objects.push_back(bad.objects.front());
  CHECK_THROWS_AS(m.vis.encode(bad), ContractError);
}

TEST_CASE("info_nce with uninformative embeddings is ln(batch)") {
  const std::size_t n = 8;
  Tensor same = Tensor::full({n, 16}, 0.25f);
  const auto loss = info_nce(same, same, 0.07f);
  CHECK(loss.item() == doctest::Approx(std::log(double(n))).epsilon(1e-5));
}

TEST_CASE("freeze clears gradients flags and keeps checksums stable") {
  auto m = random_bundle<float>(10);
  for (const auto& [name, t] : m.lm.parameters()) CHECK_FALSE(t.requires_grad());
  for (const auto& [name, t] : m.text.parameters()) CHECK_FALSE(t.requires_grad());
  for (const auto& [name, t] : m.vis.parameters()) CHECK_FALSE(t.requires_grad());
  const auto before = m.backbone_checksum();
  (void)m.lm.forward(random_rows(4, 64, 11));
  CHECK(m.backbone_checksum() == before);
  auto other = random_bundle<float>(12);
  CHECK(other.backbone_checksum() != before);
}

TEST_CASE("lm pretraining texts are bracketed and fit the context") {
  const Tokenizer tok = Tokenizer::standard();
  const auto scenes = gen_scenes(13, 30);
  const auto texts = build_lm_texts(scenes, tok, 14, 64);
  REQUIRE_FALSE(texts.empty());
  for (const auto& t : texts) {
    CHECK(t.size() <= 64);
    CHECK(t.front() == Tokenizer::kBos);
    CHECK(t.back() == Tokenizer::kEos);
  }
  CHECK(build_lm_texts(scenes, tok, 14, 64) == texts);
}
