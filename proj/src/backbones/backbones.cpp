// Copyright 2026 The IPN Authors
// SPDX-License-Identifier: Apache-2.0

#include "ipn/backbones.hpp"

#include <cmath>
#include <unordered_map>

#include "ipn/fnv.hpp"

namespace ipn {

namespace {

template <typename T>
BasicTensor<T> uniform_init(Shape shape, double bound, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> dist(-bound, bound);
  std::vector<T> data(shape_numel(shape));
  for (auto& v : data) v = static_cast<T>(dist(rng));
  return BasicTensor<T>::from_data(std::move(shape), std::move(data));
}

template <typename T>
void set_all_trainable(const NamedTensors<T>& params, bool on) {
  for (auto [name, t] : params) t.set_requires_grad(on);
}

template <typename T>
BasicTensor<T> positions(const BasicTensor<T>& table, std::span<const std::size_t> segments,
                         std::size_t max_len) {
  std::vector<TokenId> pos;
  for (auto s : segments) {
    if (s == 0) throw ContractError("sequence is empty");
    if (s > max_len) {
      throw ContractError("sequence length " + std::to_string(s) + " exceeds the maximum " +
                          std::to_string(max_len));
    }
    for (std::size_t i = 0; i < s; ++i) pos.push_back(static_cast<TokenId>(i));
  }
  return embedding(table, std::span<const TokenId>(pos));
}

template <typename T>
void check_width(const char* who, const BasicTensor<T>& x, std::size_t width) {
  if (x.rank() != 2 || x.dim(1) != width) {
    throw DimensionError(std::string(who) + ": expected [rows, " + std::to_string(width) +
                         "], got " + shape_str(x.shape()));
  }
}

}  // namespace

template <typename T>
std::uint64_t weights_checksum(const NamedTensors<T>& tensors) {
  Fnv1a h;
  std::vector<float> buf;
  for (const auto& [name, t] : tensors) {
    buf.assign(t.data().begin(), t.data().end());
    h.update_floats(buf);
  }
  return h.digest();
}

template <typename T>
void assign_named(NamedTensors<T>& dst, const NamedTensors<T>& src, const std::string& owner) {
  std::unordered_map<std::string, const BasicTensor<T>*> by_name;
  for (const auto& [name, t] : src) by_name[name] = &t;
  for (auto& [name, t] : dst) {
    const auto it = by_name.find(name);
    if (it == by_name.end()) throw ContractError(owner + ": missing tensor '" + name + "'");
    if (it->second->shape() != t.shape()) {
      throw ContractError(owner + ": tensor '" + name + "' has shape " +
                          shape_str(it->second->shape()) + ", expected " + shape_str(t.shape()));
    }
    std::copy(it->second->data().begin(), it->second->data().end(), t.data().begin());
  }
}

// ---- building blocks ------------------------------------------------------

template <typename T>
Linear<T> Linear<T>::init(std::size_t in, std::size_t out, std::mt19937_64& rng) {
  const double bound = 1.0 / std::sqrt(static_cast<double>(in));
  Linear l;
  l.w = uniform_init<T>({in, out}, bound, rng);
  l.b = uniform_init<T>({out}, bound, rng);
  return l;
}

template <typename T>
void Linear<T>::collect(const std::string& prefix, NamedTensors<T>& out) const {
  out.emplace_back(prefix + ".w", w);
  out.emplace_back(prefix + ".b", b);
}

template <typename T>
LayerNormParams<T> LayerNormParams<T>::init(std::size_t width) {
  return {BasicTensor<T>::full({width}, T(1)), BasicTensor<T>::zeros({width})};
}

template <typename T>
void LayerNormParams<T>::collect(const std::string& prefix, NamedTensors<T>& out) const {
  out.emplace_back(prefix + ".gamma", gamma);
  out.emplace_back(prefix + ".beta", beta);
}

template <typename T>
TransformerBlock<T> TransformerBlock<T>::init(std::size_t width, std::size_t heads, std::size_t ff,
                                              std::mt19937_64& rng) {
  TransformerBlock b;
  b.ln1 = LayerNormParams<T>::init(width);
  b.ln2 = LayerNormParams<T>::init(width);
  b.qkv = Linear<T>::init(width, 3 * width, rng);
  b.proj = Linear<T>::init(width, width, rng);
  b.ff1 = Linear<T>::init(width, ff, rng);
  b.ff2 = Linear<T>::init(ff, width, rng);
  b.heads = heads;
  return b;
}

template <typename T>
BasicTensor<T> TransformerBlock<T>::forward(const BasicTensor<T>& x,
                                            std::span<const std::size_t> segments,
                                            bool causal) const {
  BasicTensor<T> a = attention(qkv(ln1(x)), segments, heads, causal);
  BasicTensor<T> h = add(x, proj(a));
  return add(h, ff2(gelu(ff1(ln2(h)))));
}

template <typename T>
void TransformerBlock<T>::collect(const std::string& prefix, NamedTensors<T>& out) const {
  ln1.collect(prefix + ".ln1", out);
  qkv.collect(prefix + ".qkv", out);
  proj.collect(prefix + ".proj", out);
  ln2.collect(prefix + ".ln2", out);
  ff1.collect(prefix + ".ff1", out);
  ff2.collect(prefix + ".ff2", out);
}

// ---- language model -------------------------------------------------------

template <typename T>
FrozenLm<T> FrozenLm<T>::init(const LmConfig& cfg, std::mt19937_64& rng) {
  if (cfg.vocab == 0) throw ContractError("FrozenLm: empty vocabulary");
  if (cfg.width % cfg.heads != 0) throw ContractError("FrozenLm: width must split across heads");
  FrozenLm lm;
  lm.cfg_ = cfg;
  lm.tok_emb_ = BasicTensor<T>::randn({cfg.vocab, cfg.width}, rng, 0.1);
  lm.pos_emb_ = BasicTensor<T>::randn({cfg.max_len, cfg.width}, rng, 0.1);
  for (std::size_t i = 0; i < cfg.layers; ++i) {
    lm.blocks_.push_back(TransformerBlock<T>::init(cfg.width, cfg.heads, cfg.ff, rng));
  }
  lm.ln_f_ = LayerNormParams<T>::init(cfg.width);
  return lm;
}

template <typename T>
BasicTensor<T> FrozenLm<T>::embed(std::span<const TokenId> ids) const {
  return embedding(tok_emb_, ids);
}

template <typename T>
LmOutput<T> FrozenLm<T>::forward(const BasicTensor<T>& embeddings) const {
  if (embeddings.rank() != 2 || embeddings.dim(0) == 0) {
    throw ContractError("lm_forward: empty sequence");
  }
  const std::size_t seg[1] = {embeddings.dim(0)};
  return forward_packed(embeddings, seg);
}

template <typename T>
LmOutput<T> FrozenLm<T>::forward_packed(const BasicTensor<T>& embeddings,
                                        std::span<const std::size_t> segments) const {
  check_width("lm_forward", embeddings, cfg_.width);
  BasicTensor<T> x = add(embeddings, positions(pos_emb_, segments, cfg_.max_len));
  for (const auto& b : blocks_) x = b.forward(x, segments, true);
  return {ln_f_(x)};
}

template <typename T>
BasicTensor<T> FrozenLm<T>::logits(const BasicTensor<T>& hidden) const {
  return matmul(hidden, transpose(tok_emb_));
}

template <typename T>
NamedTensors<T> FrozenLm<T>::parameters() const {
  NamedTensors<T> out;
  out.emplace_back("lm.tok_emb", tok_emb_);
  out.emplace_back("lm.pos_emb", pos_emb_);
  for (std::size_t i = 0; i < blocks_.size(); ++i) {
    blocks_[i].collect("lm.block" + std::to_string(i), out);
  }
  ln_f_.collect("lm.ln_f", out);
  return out;
}

template <typename T>
void FrozenLm<T>::set_trainable(bool on) {
  if (on && frozen_) throw ContractError("FrozenLm: weights are frozen");
  set_all_trainable(parameters(), on);
}

template <typename T>
void FrozenLm<T>::freeze() {
  set_all_trainable(parameters(), false);
  frozen_ = true;
}

template <typename T>
void FrozenLm<T>::assign(const NamedTensors<T>& tensors) {
  auto mine = parameters();
  assign_named(mine, tensors, "FrozenLm");
}

// ---- text encoder ---------------------------------------------------------

template <typename T>
FrozenTextEncoder<T> FrozenTextEncoder<T>::init(const TextEncoderConfig& cfg,
                                                std::mt19937_64& rng) {
  if (cfg.vocab == 0) throw ContractError("FrozenTextEncoder: empty vocabulary");
  FrozenTextEncoder enc;
  enc.cfg_ = cfg;
  enc.tok_emb_ = BasicTensor<T>::randn({cfg.vocab, cfg.width}, rng, 0.1);
  enc.pos_emb_ = BasicTensor<T>::randn({cfg.max_len, cfg.width}, rng, 0.1);
  for (std::size_t i = 0; i < cfg.layers; ++i) {
    enc.blocks_.push_back(TransformerBlock<T>::init(cfg.width, cfg.heads, cfg.ff, rng));
  }
  enc.ln_f_ = LayerNormParams<T>::init(cfg.width);
  return enc;
}

template <typename T>
BasicTensor<T> FrozenTextEncoder<T>::embed(std::span<const TokenId> ids) const {
  return embedding(tok_emb_, ids);
}

template <typename T>
BasicTensor<T> FrozenTextEncoder<T>::run(const BasicTensor<T>& x0,
                                         std::span<const std::size_t> segments) const {
  BasicTensor<T> x = x0;
  for (const auto& b : blocks_) x = b.forward(x, segments, false);
  return ln_f_(x);
}

template <typename T>
BasicTensor<T> FrozenTextEncoder<T>::forward(const BasicTensor<T>& inputs,
                                             bool use_positions) const {
  check_width("text_encoder_forward", inputs, cfg_.width);
  if (inputs.dim(0) == 0) throw ContractError("text_encoder_forward: empty sequence");
  const std::size_t seg[1] = {inputs.dim(0)};
  if (!use_positions) return run(inputs, seg);
  return run(add(inputs, positions(pos_emb_, std::span<const std::size_t>(seg), cfg_.max_len)),
             seg);
}

template <typename T>
BasicTensor<T> FrozenTextEncoder<T>::forward_packed(const BasicTensor<T>& inputs,
                                                    std::span<const std::size_t> segments) const {
  check_width("text_encoder_forward", inputs, cfg_.width);
  return run(add(inputs, positions(pos_emb_, segments, cfg_.max_len)), segments);
}

template <typename T>
BasicTensor<T> FrozenTextEncoder<T>::sep_row() const {
  return slice_rows(tok_emb_, 3, 4);
}

template <typename T>
NamedTensors<T> FrozenTextEncoder<T>::parameters() const {
  NamedTensors<T> out;
  out.emplace_back("text.tok_emb", tok_emb_);
  out.emplace_back("text.pos_emb", pos_emb_);
  for (std::size_t i = 0; i < blocks_.size(); ++i) {
    blocks_[i].collect("text.block" + std::to_string(i), out);
  }
  ln_f_.collect("text.ln_f", out);
  return out;
}

template <typename T>
void FrozenTextEncoder<T>::set_trainable(bool on) {
  if (on && frozen_) throw ContractError("FrozenTextEncoder: weights are frozen");
  set_all_trainable(parameters(), on);
}

template <typename T>
void FrozenTextEncoder<T>::freeze() {
  set_all_trainable(parameters(), false);
  frozen_ = true;
}

template <typename T>
void FrozenTextEncoder<T>::assign(const NamedTensors<T>& tensors) {
  auto mine = parameters();
  assign_named(mine, tensors, "FrozenTextEncoder");
}

// ---- visual encoder -------------------------------------------------------

template <typename T>
FrozenVisualEncoder<T> FrozenVisualEncoder<T>::init(std::mt19937_64& rng) {
  FrozenVisualEncoder enc;
  enc.shape_ = BasicTensor<T>::randn({kShapeNames.size(), kVisualAttrWidth}, rng, 1.0);
  enc.color_ = BasicTensor<T>::randn({kColorNames.size(), kVisualAttrWidth}, rng, 1.0);
  enc.row_ = BasicTensor<T>::randn({std::size_t(kGridSize), kVisualAttrWidth}, rng, 1.0);
  enc.col_ = BasicTensor<T>::randn({std::size_t(kGridSize), kVisualAttrWidth}, rng, 1.0);
  enc.object_ = Linear<T>::init(4 * kVisualAttrWidth, 4 * kVisualAttrWidth, rng);
  enc.out_ = Linear<T>::init(4 * kVisualAttrWidth, kVisualWidth, rng);
  return enc;
}

template <typename T>
BasicTensor<T> FrozenVisualEncoder<T>::encode(const Scene& scene) const {
  validate_scene(scene);
  std::vector<TokenId> s, c, r, k;
  for (const auto& o : scene.objects) {
    s.push_back(o.shape);
    c.push_back(o.color);
    r.push_back(o.row);
    k.push_back(o.col);
  }
  BasicTensor<T> feats = concat_cols<T>({embedding(shape_, std::span<const TokenId>(s)),
                                         embedding(color_, std::span<const TokenId>(c)),
                                         embedding(row_, std::span<const TokenId>(r)),
                                         embedding(col_, std::span<const TokenId>(k))});
  BasicTensor<T> pooled = sum_rows(tanh(object_(feats)));
  return tanh(out_(pooled));
}

template <typename T>
BasicTensor<T> FrozenVisualEncoder<T>::encode_batch(std::span<const Scene> scenes) const {
  std::vector<BasicTensor<T>> rows;
  rows.reserve(scenes.size());
  for (const auto& s : scenes) rows.push_back(encode(s));
  return concat_rows(rows);
}

template <typename T>
NamedTensors<T> FrozenVisualEncoder<T>::parameters() const {
  NamedTensors<T> out;
  out.emplace_back("visual.shape", shape_);
  out.emplace_back("visual.color", color_);
  out.emplace_back("visual.row", row_);
  out.emplace_back("visual.col", col_);
  object_.collect("visual.object", out);
  out_.collect("visual.out", out);
  return out;
}

template <typename T>
void FrozenVisualEncoder<T>::set_trainable(bool on) {
  if (on && frozen_) throw ContractError("FrozenVisualEncoder: weights are frozen");
  set_all_trainable(parameters(), on);
}

template <typename T>
void FrozenVisualEncoder<T>::freeze() {
  set_all_trainable(parameters(), false);
  frozen_ = true;
}

template <typename T>
void FrozenVisualEncoder<T>::assign(const NamedTensors<T>& tensors) {
  auto mine = parameters();
  assign_named(mine, tensors, "FrozenVisualEncoder");
}

#define IPN_INSTANTIATE(T)                                                              \
  template std::uint64_t weights_checksum(const NamedTensors<T>&);                      \
  template void assign_named(NamedTensors<T>&, const NamedTensors<T>&, const std::string&); \
  template struct Linear<T>;                                                            \
  template struct LayerNormParams<T>;                                                   \
  template struct TransformerBlock<T>;                                                  \
  template class FrozenLm<T>;                                                           \
  template class FrozenTextEncoder<T>;                                                  \
  template class FrozenVisualEncoder<T>;

IPN_INSTANTIATE(float)
IPN_INSTANTIATE(double)

#undef IPN_INSTANTIATE

}  // namespace ipn
