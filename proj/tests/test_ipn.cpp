// Copyright 2026 The IPN Authors
// SPDX-License-Identifier: Apache-2.0

#include <cmath>

#include "doctest.h"
#include "ipn/errors.hpp"
#include "ipn/ipn.hpp"
#include "ipn/training.hpp"
#include "test_models.hpp"

using namespace ipn;

namespace {

std::vector<TokenId> q(const Tokenizer& tok, const std::string& text) { return tok.encode(text); }

template <typename T>
bool bit_equal(const BasicTensor<T>& a, const BasicTensor<T>& b) {
  if (a.shape() != b.shape()) return false;
  for (std::size_t i = 0; i < a.numel(); ++i) {
    if (a.at(i) != b.at(i)) return false;
  }
  return true;
}

}  // namespace

TEST_CASE("two-pass protocol shapes") {
  const auto m = random_bundle<float>(1);
  const auto scene = gen_scene(2, 0);
  const auto query = q(m.tok, "what color is the circle ?");
  const auto f = ipn_forward(m, scene, query);
  const std::size_t len = query.size() + 2;
  CHECK(f.h_I.shape() == Shape{1, 32});
  CHECK(f.h_img.shape() == Shape{1, 64});
  CHECK(f.first.hidden.shape() == Shape{len, 64});
  CHECK(f.first.h_r.shape() == Shape{1, 64});
  CHECK(f.interaction.h_R.shape() == Shape{1, 32});
  CHECK(f.interaction.h_I_fine.shape() == Shape{kFineSlots, 32});
  CHECK(f.interaction.h_g_out.shape() == Shape{1, 32});
  CHECK(f.interaction.h_d.shape() == Shape{1, 64});
  CHECK(f.second_hidden.shape() == f.first.hidden.shape());
  CHECK(f.logits.shape() == Shape{len, m.tok.size()});
  CHECK(f.truncated == 0);
}

TEST_CASE("interaction runs over seven slots and reads the separator") {
  const auto m = random_bundle<float>(3);
  const auto h_I = m.vis.encode(gen_scene(4, 0));
  const auto fine = decompose_image(m.ipn, h_I);
  std::mt19937_64 rng(5);
  const Tensor h_R = Tensor::randn({1, 32}, rng, 1.0);
  const Tensor seq = concat_rows<float>({fine, h_R, m.text.sep_row()});
  CHECK(kInteractionLength == 7);
  CHECK(seq.dim(0) == kInteractionLength);
  const auto full = m.text.forward(seq);
  CHECK(bit_equal(interact(m.text, fine, h_R), slice_rows(full, 6, 7)));
}

TEST_CASE("decomposition keeps each image's five rows together") {
  const auto m = random_bundle<float>(6);
  const auto scenes = gen_scenes(7, 3);
  const auto batch = decompose_image(m.ipn, m.vis.encode_batch(scenes));
  CHECK(batch.shape() == Shape{15, 32});
  const auto single = decompose_image(m.ipn, m.vis.encode(scenes[1]));
  for (std::size_t i = 0; i < single.numel(); ++i) CHECK(batch.at(5 * 32 + i) == doctest::Approx(single.at(i)));
}

TEST_CASE("substituting E_imgd for h_d reproduces the first pass exactly") {
  const auto m = random_bundle<float>(8);
  for (std::uint64_t i = 0; i < 5; ++i) {
    const auto h_img = feature_align(m.ipn, m.vis.encode(gen_scene(9, i)));
    const auto query = q(m.tok, i % 2 ? "how many circles are there ?" : "where is the red square ?");
    const auto first = build_first_pass(m.lm, m.ipn, h_img, query);
    const auto second = build_second_pass(m.lm, h_img, query, m.ipn.e_imgd);
    CHECK(first.rows.dim(0) == second.rows.dim(0));
    const auto l1 = m.lm.logits(m.lm.forward(first.rows).hidden);
    const auto l2 = m.lm.logits(m.lm.forward(second.rows).hidden);
    CHECK(bit_equal(l1, l2));
  }
}

TEST_CASE("first and second pass have equal length for every query size") {
  const auto m = random_bundle<float>(10);
  const auto f = ipn_forward(m, gen_scene(11, 0), q(m.tok, "describe the image in detail ."));
  CHECK(f.first.hidden.dim(0) == f.second_hidden.dim(0));
}

TEST_CASE("long queries lose tokens from the left") {
  const auto m = random_bundle<float>(12);
  const auto h_img = feature_align(m.ipn, m.vis.encode(gen_scene(13, 0)));
  std::vector<TokenId> query;
  for (int i = 0; i < 70; ++i) query.push_back(m.tok.id(i % 2 ? "red" : "circle"));
  const auto p = build_first_pass(m.lm, m.ipn, h_img, query);
  CHECK(max_query_tokens(m.lm.config()) == 62);
  CHECK(p.truncated == 8);
  CHECK(p.rows.dim(0) == 64);
  // Row 1 holds the first surviving token, query[8].
  const auto kept = m.lm.embed(std::span<const TokenId>(query).subspan(8, 1));
  CHECK(bit_equal(slice_rows(p.rows, 1, 2), kept));
  CHECK_THROWS_AS(build_first_pass(m.lm, m.ipn, h_img, std::vector<TokenId>{}), ContractError);
}

TEST_CASE("batched prefixes agree with the single-example flow") {
  const auto m = random_bundle<float>(14);
  const auto scenes = gen_scenes(15, 2);
  const std::vector<std::vector<TokenId>> queries{q(m.tok, "what color is the square ?"),
                                                  q(m.tok, "is there a triangle ?")};
  const auto h_I = m.vis.encode_batch(scenes);
  const auto ipn_rows = batch_prefixes(m, h_I, queries, Mode::kIpn);
  const auto static_rows = batch_prefixes(m, h_I, queries, Mode::kStatic);
  for (std::size_t i = 0; i < 2; ++i) {
    const auto f = ipn_forward(m, scenes[i], queries[i]);
    const auto second = build_second_pass(m.lm, f.h_img, queries[i], f.interaction.h_d);
    const auto first = build_first_pass(m.lm, m.ipn, f.h_img, queries[i]);
    REQUIRE(ipn_rows[i].shape() == second.rows.shape());
    for (std::size_t k = 0; k < second.rows.numel(); ++k) {
      CHECK(ipn_rows[i].at(k) == doctest::Approx(second.rows.at(k)).epsilon(1e-4));
    }
    CHECK(bit_equal(static_rows[i], first.rows));
  }
}

TEST_CASE("h_d depends on the query") {
  const auto m = random_bundle<float>(16);
  const auto scene = gen_scene(17, 0);
  const auto a = ipn_forward(m, scene, q(m.tok, "what color is the circle ?"));
  const auto b = ipn_forward(m, scene, q(m.tok, "where is the blue triangle ?"));
  CHECK(cosine(a.interaction.h_R, b.interaction.h_R) < 0.999);
  CHECK(cosine(a.interaction.h_d, b.interaction.h_d) < 0.999);
}

TEST_CASE("phase 2 gradients reach W_req through the frozen models") {
  auto m = random_bundle<float>(18);
  const auto scenes = gen_scenes(19, 2);
  std::vector<TokenizedExample> ex(2);
  for (std::size_t i = 0; i < 2; ++i) {
    ex[i].image_row = i;
    ex[i].kind = "vqa";
    ex[i].query = q(m.tok, "how many squares are there ?");
    ex[i].target = q(m.tok, "there are two squares");
  }
  m.ipn.set_phase(2);
  const auto loss = batch_loss(m, m.vis.encode_batch(scenes), {&ex[0], &ex[1]}, 2);
  backward(loss);
  double norm = 0;
  for (float g : m.ipn.req.w.grad()) norm += double(g) * g;
  CHECK(norm > 0.0);
  CHECK_FALSE(m.ipn.align.w.requires_grad());
  for (const auto& [name, t] : m.lm.parameters()) CHECK_FALSE(t.has_grad());
  for (const auto& [name, t] : m.text.parameters()) CHECK_FALSE(t.has_grad());
  m.ipn.set_phase(0);
}

TEST_CASE("phase groups partition the six IPN groups") {
  const auto p1 = phase_groups(1), p2 = phase_groups(2);
  CHECK(p1.size() + p2.size() == 6);
  for (IpnGroup g : p1) CHECK(std::find(p2.begin(), p2.end(), g) == p2.end());
  auto m = random_bundle<float>(20);
  CHECK(m.ipn.parameter_count() == (32 * 64 + 64) + (64 * 32 + 32) + (32 * 160 + 160) + (32 * 64 + 64) + 64 + 64);
}

TEST_CASE("mode names round trip") {
  CHECK(parse_mode("ipn") == Mode::kIpn);
  CHECK(parse_mode("static") == Mode::kStatic);
  CHECK(std::string(mode_name(Mode::kStatic)) == "static");
  CHECK_THROWS_AS(parse_mode("dynamic"), ContractError);
}
