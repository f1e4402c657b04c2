// Copyright 2026 The IPN Authors
// SPDX-License-Identifier: Apache-2.0

#include "ipn/pretrain.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>
#include <unordered_map>

#include "ipn/optim.hpp"
#include "ipn/rng.hpp"

namespace ipn {

namespace {

template <typename T>
void shuffle(std::vector<T>& v, std::mt19937_64& rng) {
  for (std::size_t i = v.size(); i > 1; --i) std::swap(v[i - 1], v[uniform_index(rng, i)]);
}

std::vector<NamedParam> as_params(const NamedTensors<float>& tensors) {
  std::vector<NamedParam> out;
  for (const auto& [name, t] : tensors) out.push_back({name, t});
  return out;
}

// Packed teacher-forced NLL of a batch of full token sequences.
Tensor lm_batch_loss(const FrozenLm<float>& lm, const std::vector<const std::vector<TokenId>*>& batch) {
  std::vector<TokenId> inputs, targets;
  std::vector<std::size_t> segs;
  for (const auto* seq : batch) {
    inputs.insert(inputs.end(), seq->begin(), seq->end() - 1);
    targets.insert(targets.end(), seq->begin() + 1, seq->end());
    segs.push_back(seq->size() - 1);
  }
  auto out = lm.forward_packed(lm.embed(inputs), segs);
  return cross_entropy(lm.logits(out.hidden), std::span<const TokenId>(targets));
}

void emit(const std::function<void(const std::string&)>& log, const std::string& line) {
  if (log) log(line);
}

}  // namespace

std::vector<std::vector<TokenId>> build_lm_texts(const std::vector<Scene>& scenes,
                                                 const Tokenizer& tok, std::uint64_t seed,
                                                 std::size_t max_len) {
  std::unordered_map<std::uint64_t, const Scene*> by_id;
  for (const auto& s : scenes) by_id[s.id] = &s;
  std::vector<std::vector<TokenId>> out;
  auto add = [&](const std::string& scene_text, const std::string& prompt,
                 const std::string& answer) {
    std::vector<TokenId> ids{Tokenizer::kBos};
    auto append = [&](const std::string& text) {
      const auto t = tok.encode(text);
      ids.insert(ids.end(), t.begin(), t.end());
    };
    append(scene_text);
    if (!prompt.empty()) {
      append(". " + prompt);
      ids.push_back(Tokenizer::kSep);
      append(answer);
    }
    ids.push_back(Tokenizer::kEos);
    if (ids.size() <= max_len) out.push_back(std::move(ids));
  };
  for (const auto& s : scenes) {
    const std::string detail = render_detail(s);
    add(render_caption(s), "", "");
    const auto d = make_detail_sample(s);
    add(detail, d.prompt, d.target);
    for (const auto& v : make_vqa_samples(s)) add(detail, v.prompt, v.target);
  }
  for (const auto& m : make_matching_samples(scenes, seed)) {
    const Scene& s = *by_id.at(m.scene_id);
    const std::string scene_text =
        m.kind == SampleKind::kFourChoice ? render_caption(s) : render_detail(s);
    add(scene_text, m.prompt, m.target);
  }
  return out;
}

double lm_heldout_nll(const FrozenLm<float>& lm, const std::vector<std::vector<TokenId>>& texts) {
  NoGradGuard no_grad;
  double total = 0.0;
  std::size_t tokens = 0;
  const std::size_t chunk = 64;
  for (std::size_t b = 0; b < texts.size(); b += chunk) {
    std::vector<const std::vector<TokenId>*> batch;
    std::size_t n = 0;
    for (std::size_t i = b; i < std::min(texts.size(), b + chunk); ++i) {
      batch.push_back(&texts[i]);
      n += texts[i].size() - 1;
    }
    total += static_cast<double>(lm_batch_loss(lm, batch).item()) * static_cast<double>(n);
    tokens += n;
  }
  if (tokens == 0) throw ContractError("lm_heldout_nll: no tokens");
  return total / static_cast<double>(tokens);
}

PretrainLog pretrain_text_lm(FrozenLm<float>& lm, const std::vector<std::vector<TokenId>>& train,
                             const std::vector<std::vector<TokenId>>& heldout,
                             const LmPretrainConfig& cfg,
                             const std::function<void(const std::string&)>& log) {
  if (train.size() < cfg.batch_size) throw ContractError("pretrain_text_lm: corpus smaller than a batch");
  for (const auto& t : train) {
    for (TokenId id : t) {
      if (id == Tokenizer::kImg || id == Tokenizer::kImgD) {
        throw ContractError("pretrain_text_lm: image tokens in the text corpus");
      }
    }
  }
  lm.set_trainable(true);
  AdamW opt(as_params(lm.parameters()), AdamWConfig{}, cfg.lr);
  std::mt19937_64 rng(cfg.seed);
  std::vector<std::size_t> order(train.size());
  std::iota(order.begin(), order.end(), 0);
  const std::size_t steps_per_epoch = train.size() / cfg.batch_size;
  const auto total_steps = static_cast<std::int64_t>(steps_per_epoch * cfg.epochs);
  std::int64_t step = 0;
  PretrainLog result;
  const double uniform = static_cast<double>(lm.config().vocab);
  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    shuffle(order, rng);
    double running = 0.0;
    for (std::size_t s = 0; s < steps_per_epoch; ++s) {
      std::vector<const std::vector<TokenId>*> batch;
      for (std::size_t i = 0; i < cfg.batch_size; ++i) {
        batch.push_back(&train[order[s * cfg.batch_size + i]]);
      }
      Tensor loss = lm_batch_loss(lm, batch);
      opt.zero_grad();
      backward(loss);
      opt.step(cosine_lr(step++, total_steps, cfg.lr));
      running += loss.item();
    }
    const double ppl = std::exp(lm_heldout_nll(lm, heldout));
    result.curve.push_back(ppl);
    result.train_loss.push_back(running / static_cast<double>(steps_per_epoch));
    std::ostringstream line;
    line << "lm epoch " << epoch << " train_nll " << result.train_loss.back()
         << " heldout_ppl " << ppl << " (|V| = " << uniform << ")";
    emit(log, line.str());
  }
  lm.freeze();
  if (!(result.curve.back() < cfg.max_perplexity_fraction * uniform)) {
    throw ThresholdError("language model held-out perplexity " +
                             std::to_string(result.curve.back()) + " is not below " +
                             std::to_string(cfg.max_perplexity_fraction * uniform),
                         result.curve);
  }
  return result;
}

Tensor info_nce(const Tensor& image_rows, const Tensor& text_rows, float temperature) {
  const std::size_t n = image_rows.dim(0);
  if (text_rows.dim(0) != n) {
    throw DimensionError("info_nce: " + shape_str(image_rows.shape()) + " vs " +
                         shape_str(text_rows.shape()));
  }
  Tensor logits = scale(matmul(image_rows, transpose(text_rows)), 1.0f / temperature);
  std::vector<TokenId> diag(n);
  std::iota(diag.begin(), diag.end(), 0);
  Tensor a = cross_entropy(logits, std::span<const TokenId>(diag));
  Tensor b = cross_entropy(transpose(logits), std::span<const TokenId>(diag));
  return scale(add(a, b), 0.5f);
}

Tensor caption_embeddings(const FrozenTextEncoder<float>& enc, const Linear<float>& head,
                          const std::vector<std::vector<TokenId>>& captions) {
  std::vector<TokenId> ids;
  std::vector<std::size_t> segs;
  for (const auto& c : captions) {
    ids.insert(ids.end(), c.begin(), c.end());
    ids.push_back(Tokenizer::kSep);
    segs.push_back(c.size() + 1);
  }
  Tensor out = enc.forward_packed(enc.embed(ids), segs);
  std::vector<Tensor> pooled;
  std::size_t row = 0;
  for (auto s : segs) {
    pooled.push_back(mean_rows(slice_rows(out, row, row + s)));
    row += s;
  }
  return l2_normalize_rows(head(concat_rows(pooled)));
}

double retrieval_accuracy(const FrozenVisualEncoder<float>& vis, const FrozenTextEncoder<float>& enc,
                          const Linear<float>& head, const std::vector<Scene>& scenes,
                          const Tokenizer& tok) {
  NoGradGuard no_grad;
  std::vector<std::vector<TokenId>> caps;
  for (const auto& s : scenes) caps.push_back(tok.encode(render_caption(s)));
  Tensor iv = l2_normalize_rows(vis.encode_batch(scenes));
  Tensor tv = caption_embeddings(enc, head, caps);
  Tensor sim = matmul(tv, transpose(iv));
  std::size_t hits = 0;
  const std::size_t n = scenes.size();
  for (std::size_t i = 0; i < n; ++i) {
    std::size_t best = 0;
    for (std::size_t j = 1; j < n; ++j) {
      if (sim.at(i, j) > sim.at(i, best)) best = j;
    }
    if (best == i) ++hits;
  }
  return static_cast<double>(hits) / static_cast<double>(n);
}

PretrainLog contrastive_pretrain(FrozenVisualEncoder<float>& vis, FrozenTextEncoder<float>& enc,
                                 const std::vector<Scene>& train,
                                 const std::vector<Scene>& heldout, const Tokenizer& tok,
                                 const ContrastiveConfig& cfg,
                                 const std::function<void(const std::string&)>& log) {
  if (train.size() < 2000) throw ContractError("contrastive_pretrain: need at least 2000 pairs");
  if (cfg.batch_size < 64) throw ContractError("contrastive_pretrain: batch must be at least 64");
  if (heldout.size() < cfg.retrieval_pool) {
    throw ContractError("contrastive_pretrain: held-out pool smaller than the retrieval pool");
  }
  std::mt19937_64 rng(cfg.seed);
  Linear<float> head = Linear<float>::init(kVisualWidth, kVisualWidth, rng);
  vis.set_trainable(true);
  enc.set_trainable(true);
  NamedTensors<float> all = vis.parameters();
  for (auto& p : enc.parameters()) all.push_back(p);
  head.collect("align_head", all);
  head.w.set_requires_grad(true);
  head.b.set_requires_grad(true);
  AdamW opt(as_params(all), AdamWConfig{}, cfg.lr);

  std::vector<std::vector<TokenId>> captions;
  for (const auto& s : train) captions.push_back(tok.encode(render_caption(s)));
  const std::vector<Scene> pool(heldout.begin(), heldout.begin() + cfg.retrieval_pool);

  std::vector<std::size_t> order(train.size());
  std::iota(order.begin(), order.end(), 0);
  const std::size_t steps_per_epoch = train.size() / cfg.batch_size;
  const auto total_steps = static_cast<std::int64_t>(steps_per_epoch * cfg.epochs);
  std::int64_t step = 0;
  PretrainLog result;
  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    shuffle(order, rng);
    double running = 0.0;
    for (std::size_t s = 0; s < steps_per_epoch; ++s) {
      std::vector<Scene> scenes;
      std::vector<std::vector<TokenId>> caps;
      for (std::size_t i = 0; i < cfg.batch_size; ++i) {
        scenes.push_back(train[order[s * cfg.batch_size + i]]);
        caps.push_back(captions[order[s * cfg.batch_size + i]]);
      }
      Tensor iv = l2_normalize_rows(vis.encode_batch(scenes));
      Tensor tv = caption_embeddings(enc, head, caps);
      Tensor loss = info_nce(iv, tv, cfg.temperature);
      opt.zero_grad();
      backward(loss);
      opt.step(cosine_lr(step++, total_steps, cfg.lr));
      running += loss.item();
    }
    const double acc = retrieval_accuracy(vis, enc, head, pool, tok);
    result.curve.push_back(acc);
    result.train_loss.push_back(running / static_cast<double>(steps_per_epoch));
    std::ostringstream line;
    line << "encoders epoch " << epoch << " info_nce " << result.train_loss.back()
         << " retrieval@1 " << acc << " (chance " << 1.0 / static_cast<double>(pool.size()) << ")";
    emit(log, line.str());
  }
  vis.freeze();
  enc.freeze();
  const double bar = cfg.min_retrieval_over_chance / static_cast<double>(pool.size());
  if (!(result.curve.back() >= bar)) {
    throw ThresholdError("caption->scene retrieval " + std::to_string(result.curve.back()) +
                             " is below " + std::to_string(bar),
                         result.curve);
  }
  return result;
}

}  // namespace ipn
