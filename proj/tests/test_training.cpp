// Copyright 2026 The IPN Authors
// SPDX-License-Identifier: Apache-2.0

#include <cmath>
#include <fstream>

#include "doctest.h"
#include "ipn/checkpoint.hpp"
#include "ipn/errors.hpp"
#include "ipn/pretrain.hpp"
#include "ipn/training.hpp"
#include "test_models.hpp"
#include "test_util.hpp"

using namespace ipn;

namespace {

std::vector<const TokenizedExample*> ptrs(const std::vector<TokenizedExample>& v) {
  std::vector<const TokenizedExample*> out;
  for (const auto& e : v) out.push_back(&e);
  return out;
}

std::vector<unsigned char> read_bytes(const std::filesystem::path& p) {
  std::ifstream f(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(f), std::istreambuf_iterator<char>()};
}

void write_bytes(const std::filesystem::path& p, const std::vector<unsigned char>& b) {
  std::ofstream f(p, std::ios::binary | std::ios::trunc);
  f.write(reinterpret_cast<const char*>(b.data()), static_cast<std::streamsize>(b.size()));
}

// Longhand log-softmax NLL over explicit rows of h W^T.
double oracle_nll(const ModelBundle<double>& m, const Tensor64& seq, std::size_t first_row,
                  const std::vector<TokenId>& targets) {
  const auto hidden = m.lm.forward(seq).hidden;
  const auto& emb = m.lm.token_embeddings();
  const std::size_t d = hidden.dim(1), v = emb.dim(0);
  double total = 0;
  for (std::size_t k = 0; k < targets.size(); ++k) {
    std::vector<double> z(v);
    for (std::size_t j = 0; j < v; ++j) {
      for (std::size_t c = 0; c < d; ++c) z[j] += hidden.at(first_row + k, c) * emb.at(j, c);
    }
    double mx = z[0];
    for (double x : z) mx = std::max(mx, x);
    double s = 0;
    for (double x : z) s += std::exp(x - mx);
    total += -(z[static_cast<std::size_t>(targets[k])] - mx - std::log(s));
  }
  return total / static_cast<double>(targets.size());
}

}  // namespace

TEST_CASE("phase 1 loss matches a longhand per-token NLL") {
  const auto m = random_bundle<double>(1);
  const auto scene = gen_scene(2, 0);
  TokenizedExample e;
  e.kind = "caption";
  e.target = m.tok.encode("a red circle");
  REQUIRE(e.target.size() == 3);
  const auto h_I = m.vis.encode(scene);
  const auto loss = batch_loss(m, h_I, {&e}, 1).item();
  const TokenId bos[1] = {Tokenizer::kBos};
  const auto seq = concat_rows<double>({feature_align(m.ipn, h_I), m.lm.embed(bos), m.lm.embed(e.target)});
  std::vector<TokenId> targets = e.target;
  targets.push_back(Tokenizer::kEos);
  CHECK(loss == doctest::Approx(oracle_nll(m, seq, 1, targets)).epsilon(1e-9));
}

TEST_CASE("phase 2 loss averages per-example means") {
  const auto m = random_bundle<double>(3);
  const auto scenes = gen_scenes(4, 2);
  std::vector<TokenizedExample> ex(2);
  ex[0].image_row = 0;
  ex[0].kind = "true_false";
  ex[0].query = m.tok.encode("true or false : a red circle");
  ex[0].target = m.tok.encode("true");
  ex[1].image_row = 1;
  ex[1].kind = "vqa";
  ex[1].query = m.tok.encode("how many circles are there ?");
  ex[1].target = m.tok.encode("there are two circles");
  const auto h_I = m.vis.encode_batch(scenes);
  const double joint = batch_loss(m, h_I, ptrs(ex), 2).item();
  double sum = 0;
  for (std::size_t i = 0; i < 2; ++i) {
    const auto f = ipn_forward(m, scenes[i], ex[i].query);
    const auto prefix = build_second_pass(m.lm, f.h_img, ex[i].query, f.interaction.h_d).rows;
    const auto seq = concat_rows<double>({prefix, m.lm.embed(ex[i].target)});
    auto targets = ex[i].target;
    targets.push_back(Tokenizer::kEos);
    sum += oracle_nll(m, seq, prefix.dim(0) - 1, targets);
  }
  CHECK(joint == doctest::Approx(sum / 2).epsilon(1e-9));
}

TEST_CASE("corpus tokenization enforces the phase split") {
  const auto m = random_bundle<float>(5);
  const auto scenes = gen_scenes(6, 4);
  const auto images = ImageTable::build(m.vis, scenes);
  const std::vector<InstructionSample> captions{make_caption_sample(scenes[0])};
  const auto vqa = make_vqa_samples(scenes[1]);
  CHECK_NOTHROW(tokenize_corpus(captions, images, m.tok, 1, m.lm.config()));
  CHECK_THROWS_AS(tokenize_corpus(captions, images, m.tok, 2, m.lm.config()), ContractError);
  CHECK_THROWS_AS(tokenize_corpus(vqa, images, m.tok, 1, m.lm.config()), ContractError);
  const auto ex = tokenize_corpus(vqa, images, m.tok, 2, m.lm.config());
  CHECK(ex.size() == vqa.size());
  CHECK(ex[0].image_row == images.row(scenes[1].id));
}

TEST_CASE("exact fit: phase 1 drives a repeated caption below 0.1 nats") {
  // A random LM cannot emit a whole caption from one prefix row, so the LM
  // first learns the caption language of a few scenes.
  auto m = random_bundle<float>(7);
  const auto scenes = gen_scenes(8, 40);
  auto rng = substream(7, "test.lm");
  m.lm = FrozenLm<float>::init(m.lm.config(), rng);
  LmPretrainConfig lc;
  lc.epochs = 6;
  lc.batch_size = 16;
  lc.max_perplexity_fraction = 1.0;
  const auto texts = build_lm_texts(scenes, m.tok, 3);
  pretrain_text_lm(m.lm, texts, texts, lc);
  m.ipn = IpnParams<float>::init(m.lm, rng);

  const std::vector<Scene> one{scenes[5]};
  const auto images = ImageTable::build(m.vis, one);
  const std::vector<InstructionSample> corpus(1000, make_caption_sample(scenes[5]));
  const auto ex = tokenize_corpus(corpus, images, m.tok, 1, m.lm.config());
  TrainConfig cfg;
  cfg.phase = 1;
  cfg.base_lr = 3e-2f;
  cfg.epochs = 3;
  cfg.batch_size = 8;
  cfg.seed = 9;
  const double before = corpus_nll(m, {ex[0]}, images, 1);
  CAPTURE(before);
  const auto r = train_phase(m, ex, images, cfg);
  const double after = corpus_nll(m, {ex[0]}, images, 1);
  CHECK(after < 0.1);
  CHECK(r.records.back().loss <= r.records.front().loss);
}

TEST_CASE("training respects the freeze contract and is deterministic") {
  const auto scenes = gen_scenes(10, 8);
  std::vector<InstructionSample> corpus;
  for (const auto& s : scenes) {
    for (const auto& v : make_vqa_samples(s)) corpus.push_back(v);
  }
  auto run = [&]() {
    auto m = random_bundle<float>(11);
    const auto images = ImageTable::build(m.vis, scenes);
    const auto ex = tokenize_corpus(corpus, images, m.tok, 2, m.lm.config());
    const auto bb = m.backbone_checksum();
    const auto p1 = m.ipn.group_checksum(phase_groups(1));
    TrainConfig cfg;
    cfg.phase = 2;
    cfg.base_lr = 1e-3f;
    cfg.epochs = 1;
    cfg.batch_size = 8;
    cfg.seed = 12;
    const auto r = train_phase(m, ex, images, cfg);
    CHECK(m.backbone_checksum() == bb);
    CHECK(m.ipn.group_checksum(phase_groups(1)) == p1);
    for (const auto& [name, t] : m.ipn.parameters()) CHECK_FALSE(t.requires_grad());
    return r;
  };
  const auto a = run(), b = run();
  REQUIRE(a.records.size() == b.records.size());
  REQUIRE_FALSE(a.records.empty());
  for (std::size_t i = 0; i < a.records.size(); ++i) {
    CHECK(a.records[i].digest == b.records[i].digest);
    CHECK(a.records[i].loss == b.records[i].loss);
  }
  const auto j = to_json(a.records.front());
  for (const char* key : {"step", "phase", "loss", "lr", "kind_losses"}) CHECK(j.contains(key));
  CHECK(j["kind_losses"].contains("vqa"));
}

TEST_CASE("a diverging run aborts and rolls back to finite weights") {
  auto m = random_bundle<float>(13);
  const auto scenes = gen_scenes(14, 4);
  const auto images = ImageTable::build(m.vis, scenes);
  std::vector<InstructionSample> corpus;
  for (int k = 0; k < 16; ++k) corpus.push_back(make_caption_sample(scenes[k % 4]));
  const auto ex = tokenize_corpus(corpus, images, m.tok, 1, m.lm.config());
  TrainConfig cfg;
  cfg.phase = 1;
  cfg.base_lr = 1e30f;
  cfg.epochs = 3;
  cfg.batch_size = 4;
  CHECK_THROWS_AS(train_phase(m, ex, images, cfg), TrainingAborted);
  for (const auto& [name, t] : m.ipn.parameters()) {
    for (float v : t.data()) REQUIRE(std::isfinite(v));
    CHECK_FALSE(t.requires_grad());
  }
}

TEST_CASE("checkpoint round trip is byte identical") {
  TempDir dir;
  auto m = random_bundle<float>(15);
  const auto groups = std::vector<IpnGroup>(kAllGroups.begin(), kAllGroups.end());
  const auto a = dir.path() / "a.ipnb", b = dir.path() / "b.ipnb";
  save_ipn_checkpoint(a, m.ipn, groups, m.backbone_checksum());
  auto fresh = random_bundle<float>(16);
  fresh.lm = m.lm;
  fresh.text = m.text;
  fresh.vis = m.vis;
  const auto loaded = load_ipn_checkpoint(a, fresh.ipn, m.backbone_checksum());
  CHECK(loaded.size() == 6);
  save_ipn_checkpoint(b, fresh.ipn, groups, m.backbone_checksum());
  CHECK(read_bytes(a) == read_bytes(b));
  CHECK(fresh.ipn.group_checksum(groups) == m.ipn.group_checksum(groups));
}

TEST_CASE("checkpoint corruption is detected") {
  TempDir dir;
  auto m = random_bundle<float>(17);
  const auto p = dir.path() / "c.ipnb";
  save_ipn_checkpoint(p, m.ipn, phase_groups(1), 42);
  const auto good = read_bytes(p);
  auto kind_of = [&](const std::vector<unsigned char>& bytes) {
    write_bytes(p, bytes);
    try {
      load_ipn_checkpoint(p, m.ipn, 42);
    } catch (const CheckpointError& e) {
      return e.kind();
    }
    FAIL("corruption not detected");
    return CheckpointError::Kind::kIo;
  };
  for (std::size_t pos : {std::size_t{20}, good.size() / 2, good.size() - 12, good.size() - 1}) {
    auto bad = good;
    bad[pos] ^= 0x01;
    CHECK(kind_of(bad) == CheckpointError::Kind::kDigest);
  }
  auto magic = good;
  magic[0] = 'X';
  CHECK(kind_of(magic) == CheckpointError::Kind::kMagic);
  auto version = good;
  version[4] = 9;
  CHECK(kind_of(version) == CheckpointError::Kind::kVersion);
  CHECK(kind_of({good.begin(), good.begin() + 24}) == CheckpointError::Kind::kTruncated);
  write_bytes(p, good);
  CHECK_THROWS_AS(load_ipn_checkpoint(p, m.ipn, 43), CheckpointError);
}

TEST_CASE("a phase-1 checkpoint loads only the phase-1 groups") {
  TempDir dir;
  auto m = random_bundle<float>(18);
  const auto p = dir.path() / "p1.ipnb";
  save_ipn_checkpoint(p, m.ipn, phase_groups(1), 7);
  auto other = random_bundle<float>(19);
  const auto before = other.ipn.group_checksum(phase_groups(2));
  const auto loaded = load_ipn_checkpoint(p, other.ipn, 7);
  CHECK(loaded == phase_groups(1));
  CHECK(other.ipn.group_checksum(phase_groups(1)) == m.ipn.group_checksum(phase_groups(1)));
  CHECK(other.ipn.group_checksum(phase_groups(2)) == before);
}
