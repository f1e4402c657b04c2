// Copyright 2026 The IPN Authors
// SPDX-License-Identifier: Apache-2.0

#include "ipn/ipn.hpp"

#include <atomic>

#include "ipn/fnv.hpp"

namespace ipn {

namespace {

std::atomic<bool> g_wout_fault{false};

template <typename T>
void require_width(const char* op, const BasicTensor<T>& x, std::size_t width) {
  if (x.rank() != 2 || x.dim(1) != width) {
    throw DimensionError(std::string(op) + ": expected [rows," + std::to_string(width) + "], got " +
                         shape_str(x.shape()));
  }
}

template <typename T>
void set_requires(const NamedTensors<T>& ts, bool on) {
  for (const auto& [name, t] : ts) {
    BasicTensor<T> handle = t;
    handle.set_requires_grad(on);
  }
}

std::span<const TokenId> fit_query(std::span<const TokenId> query, std::size_t limit,
                                   std::size_t& truncated) {
  if (query.empty()) throw ContractError("build_first_pass: empty query");
  truncated = query.size() > limit ? query.size() - limit : 0;
  return query.subspan(truncated);
}

template <typename T>
BasicTensor<T> gather_rows(const BasicTensor<T>& a, const std::vector<TokenId>& rows) {
  return embedding(a, std::span<const TokenId>(rows));
}

}  // namespace

const char* group_name(IpnGroup g) {
  switch (g) {
    case IpnGroup::kAlign: return "W_align";
    case IpnGroup::kReq: return "W_req";
    case IpnGroup::kDecomp: return "W_decomp";
    case IpnGroup::kOut: return "W_out";
    case IpnGroup::kImg: return "E_img";
    case IpnGroup::kImgD: return "E_imgd";
  }
  return "?";
}

std::vector<IpnGroup> phase_groups(int phase) {
  if (phase == 1) return {IpnGroup::kAlign, IpnGroup::kImg};
  if (phase == 2) return {IpnGroup::kReq, IpnGroup::kDecomp, IpnGroup::kOut, IpnGroup::kImgD};
  throw ContractError("phase must be 1 or 2, got " + std::to_string(phase));
}

Mode parse_mode(const std::string& s) {
  if (s == "ipn") return Mode::kIpn;
  if (s == "static") return Mode::kStatic;
  throw ContractError("mode must be ipn or static, got '" + s + "'");
}

const char* mode_name(Mode m) { return m == Mode::kIpn ? "ipn" : "static"; }

std::size_t max_query_tokens(const LmConfig& cfg) { return cfg.max_len - 2; }

namespace testing {
void set_wout_sign_fault(bool on) { g_wout_fault = on; }
bool wout_sign_fault() { return g_wout_fault; }
}  // namespace testing

template <typename T>
IpnParams<T> IpnParams<T>::init(const FrozenLm<T>& lm, std::mt19937_64& rng) {
  const std::size_t d_l = lm.config().width;
  IpnParams p;
  p.align = Linear<T>::init(kVisualWidth, d_l, rng);
  p.req = Linear<T>::init(d_l, kVisualWidth, rng);
  p.decomp = Linear<T>::init(kVisualWidth, kFineSlots * kVisualWidth, rng);
  p.out = Linear<T>::init(kVisualWidth, d_l, rng);
  const auto& table = lm.token_embeddings();
  auto row = [&](TokenId id) {
    std::vector<T> v(table.data().begin() + id * d_l, table.data().begin() + (id + 1) * d_l);
    return BasicTensor<T>::from_data({1, d_l}, std::move(v));
  };
  p.e_img = row(Tokenizer::kBos);
  p.e_imgd = row(Tokenizer::kSep);
  return p;
}

template <typename T>
NamedTensors<T> IpnParams<T>::group(IpnGroup g) const {
  NamedTensors<T> res;
  const std::string prefix = std::string("ipn.") + group_name(g);
  switch (g) {
    case IpnGroup::kAlign: align.collect(prefix, res); break;
    case IpnGroup::kReq: req.collect(prefix, res); break;
    case IpnGroup::kDecomp: decomp.collect(prefix, res); break;
    case IpnGroup::kOut: out.collect(prefix, res); break;
    case IpnGroup::kImg: res.emplace_back(prefix, e_img); break;
    case IpnGroup::kImgD: res.emplace_back(prefix, e_imgd); break;
  }
  return res;
}

template <typename T>
NamedTensors<T> IpnParams<T>::parameters() const {
  NamedTensors<T> out;
  for (IpnGroup g : kAllGroups) {
    auto part = group(g);
    out.insert(out.end(), part.begin(), part.end());
  }
  return out;
}

template <typename T>
std::size_t IpnParams<T>::parameter_count() const {
  std::size_t n = 0;
  for (const auto& [name, t] : parameters()) n += t.numel();
  return n;
}

template <typename T>
void IpnParams<T>::set_phase(int phase) {
  set_requires(parameters(), false);
  if (phase == 0) return;
  for (IpnGroup g : phase_groups(phase)) set_requires(group(g), true);
}

template <typename T>
void IpnParams<T>::assign(const NamedTensors<T>& tensors) {
  auto mine = parameters();
  assign_named(mine, tensors, "IpnParams");
}

template <typename T>
std::uint64_t IpnParams<T>::group_checksum(std::span<const IpnGroup> groups) const {
  NamedTensors<T> all;
  for (IpnGroup g : groups) {
    auto part = group(g);
    all.insert(all.end(), part.begin(), part.end());
  }
  return weights_checksum(all);
}

template <typename T>
std::uint64_t ModelBundle<T>::backbone_checksum() const {
  NamedTensors<T> all = lm.parameters();
  for (auto& e : text.parameters()) all.push_back(e);
  for (auto& e : vis.parameters()) all.push_back(e);
  return weights_checksum(all);
}

template <typename T>
BasicTensor<T> feature_align(const IpnParams<T>& p, const BasicTensor<T>& h_I) {
  require_width("feature_align", h_I, p.align.in());
  return add(p.align(h_I), p.e_img);
}

template <typename T>
Prefix<T> build_first_pass(const FrozenLm<T>& lm, const IpnParams<T>& p,
                           const BasicTensor<T>& h_img, std::span<const TokenId> query) {
  return build_second_pass(lm, h_img, query, p.e_imgd);
}

template <typename T>
Prefix<T> build_second_pass(const FrozenLm<T>& lm, const BasicTensor<T>& h_img,
                            std::span<const TokenId> query, const BasicTensor<T>& h_d) {
  const std::size_t d_l = lm.config().width;
  require_width("build_pass", h_img, d_l);
  require_width("build_pass", h_d, d_l);
  if (h_img.dim(0) != 1 || h_d.dim(0) != 1) {
    throw DimensionError("build_pass: h_img and the last slot must be single rows");
  }
  Prefix<T> out;
  const auto q = fit_query(query, max_query_tokens(lm.config()), out.truncated);
  out.rows = concat_rows<T>({h_img, lm.embed(q), h_d});
  return out;
}

template <typename T>
BasicTensor<T> extract_request(const LmOutput<T>& first_pass) {
  const std::size_t n = first_pass.hidden.dim(0);
  return slice_rows(first_pass.hidden, n - 1, n);
}

template <typename T>
BasicTensor<T> project_request(const IpnParams<T>& p, const BasicTensor<T>& h_r) {
  require_width("project_request", h_r, p.req.in());
  return p.req(h_r);
}

template <typename T>
BasicTensor<T> decompose_image(const IpnParams<T>& p, const BasicTensor<T>& h_I) {
  require_width("decompose_image", h_I, p.decomp.in());
  const std::size_t rows = h_I.dim(0);
  return reshape(p.decomp(h_I), {rows * kFineSlots, p.decomp.out() / kFineSlots});
}

template <typename T>
BasicTensor<T> interact(const FrozenTextEncoder<T>& enc, const BasicTensor<T>& h_I_fine,
                        const BasicTensor<T>& h_R) {
  if (h_I_fine.rank() != 2 || h_I_fine.dim(0) != kFineSlots) {
    throw DimensionError("interact: expected 5 fine-grained rows, got " + shape_str(h_I_fine.shape()));
  }
  BasicTensor<T> seq = concat_rows<T>({h_I_fine, h_R, enc.sep_row()});
  if (seq.dim(0) != kInteractionLength) throw DimensionError("interact: sequence length");
  BasicTensor<T> out = enc.forward(seq);
  return slice_rows(out, kInteractionLength - 1, kInteractionLength);
}

template <typename T>
BasicTensor<T> transmit(const IpnParams<T>& p, const BasicTensor<T>& h_g_out) {
  require_width("transmit", h_g_out, p.out.in());
  BasicTensor<T> w = p.out.w;
  if (testing::wout_sign_fault()) w = grad_scale(w, T(-1));
  return add(matmul(h_g_out, w), p.out.b);
}

template <typename T>
IpnForward<T> ipn_forward(const ModelBundle<T>& m, const Scene& scene,
                          std::span<const TokenId> query) {
  IpnForward<T> f;
  f.h_I = m.vis.encode(scene);
  f.h_img = feature_align(m.ipn, f.h_I);
  Prefix<T> first = build_first_pass(m.lm, m.ipn, f.h_img, query);
  f.truncated = first.truncated;
  LmOutput<T> out1 = m.lm.forward(first.rows);
  f.first = {extract_request(out1), out1.hidden};
  auto& ir = f.interaction;
  ir.h_R = project_request(m.ipn, f.first.h_r);
  ir.h_I_fine = decompose_image(m.ipn, f.h_I);
  ir.h_g_out = interact(m.text, ir.h_I_fine, ir.h_R);
  ir.h_d = transmit(m.ipn, ir.h_g_out);
  Prefix<T> second = build_second_pass(m.lm, f.h_img, query, ir.h_d);
  f.second_hidden = m.lm.forward(second.rows).hidden;
  f.logits = m.lm.logits(f.second_hidden);
  return f;
}

template <typename T>
std::vector<BasicTensor<T>> batch_prefixes(const ModelBundle<T>& m, const BasicTensor<T>& h_I,
                                           const std::vector<std::vector<TokenId>>& queries,
                                           Mode mode) {
  const std::size_t b = queries.size();
  require_width("batch_prefixes", h_I, kVisualWidth);
  if (h_I.dim(0) != b) throw DimensionError("batch_prefixes: one image row per query");
  const std::size_t limit = max_query_tokens(m.lm.config());
  BasicTensor<T> h_img = feature_align(m.ipn, h_I);
  std::vector<BasicTensor<T>> img_rows, query_rows;
  std::vector<BasicTensor<T>> parts;
  std::vector<std::size_t> segs;
  std::vector<TokenId> last;
  std::size_t offset = 0;
  for (std::size_t i = 0; i < b; ++i) {
    if (queries[i].empty() || queries[i].size() > limit) {
      throw ContractError("batch_prefixes: query length " + std::to_string(queries[i].size()) +
                          " outside 1.." + std::to_string(limit));
    }
    img_rows.push_back(slice_rows(h_img, i, i + 1));
    query_rows.push_back(m.lm.embed(queries[i]));
    parts.push_back(img_rows.back());
    parts.push_back(query_rows.back());
    parts.push_back(m.ipn.e_imgd);
    segs.push_back(queries[i].size() + 2);
    offset += segs.back();
    last.push_back(static_cast<TokenId>(offset - 1));
  }
  std::vector<BasicTensor<T>> out;
  if (mode == Mode::kStatic) {
    for (std::size_t i = 0; i < b; ++i) {
      out.push_back(concat_rows<T>({img_rows[i], query_rows[i], m.ipn.e_imgd}));
    }
    return out;
  }
  LmOutput<T> first = m.lm.forward_packed(concat_rows(parts), segs);
  BasicTensor<T> h_R = project_request(m.ipn, gather_rows(first.hidden, last));
  BasicTensor<T> fine = decompose_image(m.ipn, h_I);
  BasicTensor<T> sep = m.text.sep_row();
  std::vector<BasicTensor<T>> inter;
  std::vector<std::size_t> inter_segs(b, kInteractionLength);
  std::vector<TokenId> slots;
  for (std::size_t i = 0; i < b; ++i) {
    inter.push_back(slice_rows(fine, i * kFineSlots, (i + 1) * kFineSlots));
    inter.push_back(slice_rows(h_R, i, i + 1));
    inter.push_back(sep);
    slots.push_back(static_cast<TokenId>((i + 1) * kInteractionLength - 1));
  }
  BasicTensor<T> enc = m.text.forward_packed(concat_rows(inter), inter_segs);
  BasicTensor<T> h_d = transmit(m.ipn, gather_rows(enc, slots));
  for (std::size_t i = 0; i < b; ++i) {
    out.push_back(concat_rows<T>({img_rows[i], query_rows[i], slice_rows(h_d, i, i + 1)}));
  }
  return out;
}

#define IPN_CORE_INSTANTIATE(T)                                                                   \
  template struct IpnParams<T>;                                                                   \
  template struct ModelBundle<T>;                                                                 \
  template BasicTensor<T> feature_align(const IpnParams<T>&, const BasicTensor<T>&);              \
  template Prefix<T> build_first_pass(const FrozenLm<T>&, const IpnParams<T>&,                    \
                                      const BasicTensor<T>&, std::span<const TokenId>);           \
  template Prefix<T> build_second_pass(const FrozenLm<T>&, const BasicTensor<T>&,                 \
                                       std::span<const TokenId>, const BasicTensor<T>&);          \
  template BasicTensor<T> extract_request(const LmOutput<T>&);                                    \
  template BasicTensor<T> project_request(const IpnParams<T>&, const BasicTensor<T>&);            \
  template BasicTensor<T> decompose_image(const IpnParams<T>&, const BasicTensor<T>&);            \
  template BasicTensor<T> interact(const FrozenTextEncoder<T>&, const BasicTensor<T>&,            \
                                   const BasicTensor<T>&);                                        \
  template BasicTensor<T> transmit(const IpnParams<T>&, const BasicTensor<T>&);                   \
  template IpnForward<T> ipn_forward(const ModelBundle<T>&, const Scene&,                         \
                                     std::span<const TokenId>);                                   \
  template std::vector<BasicTensor<T>> batch_prefixes(                                            \
      const ModelBundle<T>&, const BasicTensor<T>&, const std::vector<std::vector<TokenId>>&, Mode);

IPN_CORE_INSTANTIATE(float)
IPN_CORE_INSTANTIATE(double)

#undef IPN_CORE_INSTANTIATE

}  // namespace ipn
