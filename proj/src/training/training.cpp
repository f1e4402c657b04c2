// Copyright 2026 The IPN Authors
// SPDX-License-Identifier: Apache-2.0

#include "ipn/training.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <set>
#include <sstream>

#include "ipn/fnv.hpp"
#include "ipn/optim.hpp"
#include "ipn/rng.hpp"

namespace ipn {

namespace {

void emit(const TrainHooks& hooks, const std::string& line) {
  if (hooks.log) hooks.log(line);
}

std::vector<IpnGroup> frozen_groups(int phase) {
  const auto live = phase_groups(phase);
  std::vector<IpnGroup> out;
  for (IpnGroup g : kAllGroups) {
    if (std::find(live.begin(), live.end(), g) == live.end()) out.push_back(g);
  }
  return out;
}

struct FreezeAudit {
  std::uint64_t backbones;
  std::uint64_t frozen_ipn;
};

FreezeAudit audit(const ModelBundle<float>& m, int phase) {
  const auto frozen = frozen_groups(phase);
  return {m.backbone_checksum(), m.ipn.group_checksum(frozen)};
}

}  // namespace

nlohmann::ordered_json to_json(const LossRecord& r) {
  nlohmann::ordered_json j;
  j["step"] = r.step;
  j["phase"] = r.phase;
  j["loss"] = r.loss;
  j["lr"] = r.lr;
  j["digest"] = r.digest;
  j["kind_losses"] = nlohmann::ordered_json::object();
  for (const auto& [k, v] : r.kind_losses) j["kind_losses"][k] = v;
  return j;
}

ImageTable ImageTable::build(const FrozenVisualEncoder<float>& vis, const std::vector<Scene>& scenes) {
  NoGradGuard no_grad;
  ImageTable t;
  t.features = vis.encode_batch(scenes);
  for (std::size_t i = 0; i < scenes.size(); ++i) t.row_of[scenes[i].id] = i;
  return t;
}

std::size_t ImageTable::row(std::uint64_t scene_id) const {
  const auto it = row_of.find(scene_id);
  if (it == row_of.end()) throw ContractError("no scene with id " + std::to_string(scene_id));
  return it->second;
}

std::vector<TokenizedExample> tokenize_corpus(const std::vector<InstructionSample>& corpus,
                                              const ImageTable& images, const Tokenizer& tok,
                                              int phase, const LmConfig& lm_cfg,
                                              std::size_t* truncated) {
  if (phase != 1 && phase != 2) throw ContractError("phase must be 1 or 2");
  std::vector<TokenizedExample> out;
  out.reserve(corpus.size());
  std::size_t cut = 0;
  const std::size_t limit = max_query_tokens(lm_cfg);
  for (std::size_t i = 0; i < corpus.size(); ++i) {
    const auto& s = corpus[i];
    const bool caption = s.kind == SampleKind::kCaption;
    if (phase == 1 && !caption) {
      throw ContractError("phase 1 corpus item " + std::to_string(i) + " has kind " +
                          std::string(kind_name(s.kind)) + "; only captions are allowed");
    }
    if (phase == 2 && caption) {
      throw ContractError("phase 2 corpus item " + std::to_string(i) + " is a caption");
    }
    TokenizedExample e;
    e.image_row = images.row(s.scene_id);
    e.kind = std::string(kind_name(s.kind));
    e.target = tok.encode(s.target);
    if (phase == 2) {
      e.query = tok.encode(s.prompt);
      if (e.query.empty()) throw ContractError("phase 2 corpus item " + std::to_string(i) + " has no prompt");
      if (e.query.size() > limit) {
        ++cut;
        e.query.erase(e.query.begin(), e.query.end() - static_cast<std::ptrdiff_t>(limit));
      }
    }
    const std::size_t prefix = phase == 1 ? 2 : e.query.size() + 2;
    if (prefix + e.target.size() > lm_cfg.max_len) {
      throw ContractError("corpus item " + std::to_string(i) + " does not fit the LM context");
    }
    out.push_back(std::move(e));
  }
  if (truncated) *truncated = cut;
  return out;
}

template <typename T>
BasicTensor<T> batch_loss(const ModelBundle<T>& m, const BasicTensor<T>& h_I,
                          const std::vector<const TokenizedExample*>& batch, int phase,
                          std::vector<double>* per_token_nll) {
  const std::size_t b = batch.size();
  if (b == 0) throw ContractError("batch_loss: empty batch");
  std::vector<BasicTensor<T>> parts;
  std::vector<std::size_t> segs;
  std::vector<TokenId> rows, targets;
  std::vector<T> weights;
  std::vector<BasicTensor<T>> prefixes;
  if (phase == 2) {
    std::vector<std::vector<TokenId>> queries;
    for (const auto* e : batch) queries.push_back(e->query);
    prefixes = batch_prefixes(m, h_I, queries, Mode::kIpn);
  } else if (phase == 1) {
    BasicTensor<T> h_img = feature_align(m.ipn, h_I);
    const TokenId bos[1] = {Tokenizer::kBos};
    BasicTensor<T> bos_row = m.lm.embed(bos);
    for (std::size_t i = 0; i < b; ++i) prefixes.push_back(concat_rows<T>({slice_rows(h_img, i, i + 1), bos_row}));
  } else {
    throw ContractError("phase must be 1 or 2");
  }
  std::size_t offset = 0;
  for (std::size_t i = 0; i < b; ++i) {
    const auto& t = batch[i]->target;
    const std::size_t p = prefixes[i].dim(0);
    parts.push_back(prefixes[i]);
    if (!t.empty()) parts.push_back(m.lm.embed(t));
    segs.push_back(p + t.size());
    const T w = T(1) / (T(t.size() + 1) * T(b));
    for (std::size_t k = 0; k <= t.size(); ++k) {
      rows.push_back(static_cast<TokenId>(offset + p - 1 + k));
      targets.push_back(k < t.size() ? t[k] : Tokenizer::kEos);
      weights.push_back(w);
    }
    offset += segs.back();
  }
  LmOutput<T> out = m.lm.forward_packed(concat_rows(parts), segs);
  BasicTensor<T> logits = m.lm.logits(embedding(out.hidden, std::span<const TokenId>(rows)));
  if (per_token_nll) {
    const std::size_t v = logits.dim(1);
    per_token_nll->assign(targets.size(), 0.0);
    for (std::size_t r = 0; r < targets.size(); ++r) {
      const T* row = logits.data().data() + r * v;
      const double mx = static_cast<double>(*std::max_element(row, row + v));
      double z = 0.0;
      for (std::size_t j = 0; j < v; ++j) z += std::exp(static_cast<double>(row[j]) - mx);
      (*per_token_nll)[r] = -(static_cast<double>(row[targets[r]]) - mx - std::log(z));
    }
  }
  return weighted_cross_entropy(logits, std::span<const TokenId>(targets),
                                std::span<const T>(weights));
}

template Tensor batch_loss(const ModelBundle<float>&, const Tensor&,
                           const std::vector<const TokenizedExample*>&, int, std::vector<double>*);
template Tensor64 batch_loss(const ModelBundle<double>&, const Tensor64&,
                             const std::vector<const TokenizedExample*>&, int, std::vector<double>*);

namespace {

Tensor gather_images(const ImageTable& images, const std::vector<const TokenizedExample*>& batch) {
  std::vector<TokenId> idx;
  for (const auto* e : batch) idx.push_back(static_cast<TokenId>(e->image_row));
  return embedding(images.features, std::span<const TokenId>(idx));
}

}  // namespace

double corpus_nll(const ModelBundle<float>& m, const std::vector<TokenizedExample>& corpus,
                  const ImageTable& images, int phase) {
  NoGradGuard no_grad;
  double total = 0.0;
  std::size_t n = 0;
  for (std::size_t s = 0; s < corpus.size(); s += 128) {
    std::vector<const TokenizedExample*> batch;
    for (std::size_t i = s; i < std::min(corpus.size(), s + 128); ++i) batch.push_back(&corpus[i]);
    std::vector<double> nll;
    batch_loss(m, gather_images(images, batch), batch, phase, &nll);
    total += std::accumulate(nll.begin(), nll.end(), 0.0);
    n += nll.size();
  }
  if (n == 0) throw ContractError("corpus_nll: empty corpus");
  return total / static_cast<double>(n);
}

TrainResult train_phase(ModelBundle<float>& m, const std::vector<TokenizedExample>& corpus,
                        const ImageTable& images, const TrainConfig& cfg,
                        const TrainHooks& hooks) {
  const int phase = cfg.phase;
  const auto live = phase_groups(phase);
  const std::size_t bs = cfg.effective_batch();
  if (corpus.size() < bs) throw ContractError("train_phase: corpus smaller than one batch");
  for (const auto& e : corpus) {
    if (phase == 1 && e.kind != "caption") throw ContractError("phase 1 corpus contains " + e.kind);
    if (phase == 2 && e.kind == "caption") throw ContractError("phase 2 corpus contains captions");
  }

  const FreezeAudit before = audit(m, phase);
  m.ipn.set_phase(phase);
  std::vector<NamedParam> params;
  for (IpnGroup g : live) {
    for (auto& [name, t] : m.ipn.group(g)) params.push_back({name, t});
  }
  AdamW opt(params, AdamWConfig{0.9f, 0.999f, 1e-8f, cfg.weight_decay}, cfg.base_lr);

  // Registry audit: exactly the phase's groups, nothing from the backbones.
  const auto names = opt.names();
  std::set<std::string> expected, registered(names.begin(), names.end());
  for (IpnGroup g : live) {
    for (const auto& [name, t] : m.ipn.group(g)) expected.insert(name);
  }
  if (registered != expected) throw ContractError("optimizer registry does not match phase groups");
  for (const auto& nt : {m.lm.parameters(), m.text.parameters(), m.vis.parameters()}) {
    for (const auto& [name, t] : nt) {
      if (t.requires_grad()) throw ContractError("backbone tensor " + name + " is trainable");
    }
  }
  emit(hooks, "phase " + std::to_string(phase) + ": training " + std::to_string(registered.size()) +
                  " tensors, IPN total " + std::to_string(m.ipn.parameter_count()) + " parameters");

  std::mt19937_64 rng(cfg.seed);
  std::vector<std::size_t> order(corpus.size());
  std::iota(order.begin(), order.end(), 0);
  const std::size_t steps_per_epoch = corpus.size() / bs;
  const auto total_steps = static_cast<std::int64_t>(steps_per_epoch * cfg.epochs);
  std::int64_t step = 0;
  TrainResult result;
  NamedTensors<float> snapshot;
  for (const auto& [name, t] : m.ipn.parameters()) snapshot.emplace_back(name, t.detach());

  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    for (std::size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[uniform_index(rng, i)]);
    double epoch_total = 0.0;
    std::size_t epoch_tokens = 0;
    for (std::size_t s = 0; s < steps_per_epoch; ++s) {
      std::vector<const TokenizedExample*> batch;
      for (std::size_t i = 0; i < bs; ++i) batch.push_back(&corpus[order[s * bs + i]]);
      std::vector<double> nll;
      Tensor loss = batch_loss(m, gather_images(images, batch), batch, phase, &nll);
      if (!std::isfinite(loss.item())) {
        m.ipn.assign(snapshot);
        m.ipn.set_phase(0);
        throw TrainingAborted("non-finite loss at step " + std::to_string(step) +
                              "; parameters restored to step " + std::to_string(step - 1));
      }
      const auto current = m.ipn.parameters();
      for (std::size_t i = 0; i < current.size(); ++i) {
        std::copy(current[i].second.data().begin(), current[i].second.data().end(),
                  snapshot[i].second.data().begin());
      }
      opt.zero_grad();
      backward(loss);
      const float lr = cosine_lr(step, total_steps, cfg.base_lr);
      opt.step(lr);

      LossRecord rec;
      rec.step = step;
      rec.phase = phase;
      rec.lr = lr;
      std::map<std::string, std::pair<double, std::size_t>> kinds;
      std::size_t r = 0;
      double total = 0.0;
      for (const auto* e : batch) {
        auto& k = kinds[e->kind];
        for (std::size_t t = 0; t <= e->target.size(); ++t, ++r) {
          k.first += nll[r];
          ++k.second;
          total += nll[r];
        }
      }
      rec.loss = total / static_cast<double>(nll.size());
      for (const auto& [k, v] : kinds) rec.kind_losses[k] = v.first / static_cast<double>(v.second);
      rec.digest = hex64(m.ipn.group_checksum(live));
      epoch_total += total;
      epoch_tokens += nll.size();
      if (hooks.on_step) hooks.on_step(rec);
      result.records.push_back(std::move(rec));
      ++step;
      if (cfg.eval_every && step % static_cast<std::int64_t>(cfg.eval_every) == 0 && hooks.on_eval) {
        hooks.on_eval(step);
      }
    }
    result.epoch_loss.push_back(epoch_total / static_cast<double>(epoch_tokens));
    result.epochs_run = epoch + 1;
    std::ostringstream line;
    line << "phase " << phase << " epoch " << epoch << " train_nll " << result.epoch_loss.back();
    emit(hooks, line.str());
    if (hooks.on_eval) hooks.on_eval(step);
    if (phase == 1 && cfg.plateau > 0.0 && result.epoch_loss.size() >= 2) {
      const double prev = result.epoch_loss[result.epoch_loss.size() - 2];
      if ((prev - result.epoch_loss.back()) < cfg.plateau * prev) {
        emit(hooks, "phase 1 plateau, stopping early");
        break;
      }
    }
  }
  m.ipn.set_phase(0);

  const FreezeAudit after = audit(m, phase);
  if (after.backbones != before.backbones) throw ContractError("freeze contract: backbone weights changed");
  if (after.frozen_ipn != before.frozen_ipn) {
    throw ContractError("freeze contract: IPN groups outside phase " + std::to_string(phase) + " changed");
  }
  return result;
}

}  // namespace ipn
