// Copyright 2026 The IPN Authors
// SPDX-License-Identifier: Apache-2.0

#include "ipn/eval.hpp"

#include <sstream>
#include <unordered_map>

#include "ipn/metrics.hpp"

namespace ipn {

namespace {

std::string csv_field(const std::string& s) {
  if (s.find_first_of(",\"\n") == std::string::npos) return s;
  std::string out = "\"";
  for (char c : s) {
    if (c == '"') out += '"';
    out += c;
  }
  return out + "\"";
}

std::string num(double v) {
  std::ostringstream o;
  o.precision(17);
  o << v;
  return o.str();
}

}  // namespace

EvalReport EvalReport::from_rows(std::string mode, std::vector<EvalRow> rows) {
  EvalReport r;
  r.mode = std::move(mode);
  std::map<std::string, std::size_t> em_kind, n_type, em_type;
  std::size_t em_total = 0;
  for (const auto& row : rows) {
    ++r.counts[row.kind];
    em_kind[row.kind] += static_cast<std::size_t>(row.em);
    em_total += static_cast<std::size_t>(row.em);
    if (!row.vqa_type.empty()) {
      ++n_type[row.vqa_type];
      em_type[row.vqa_type] += static_cast<std::size_t>(row.em);
    }
    if (row.generative) {
      ++r.generative_count;
      r.bleu1 += row.bleu1;
      r.bleu2 += row.bleu2;
      r.rouge1 += row.rouge1;
      r.rougeL += row.rougeL;
      r.cider += row.cider;
      r.meteor += row.meteor;
    }
  }
  for (const auto& [k, n] : r.counts) r.em_by_kind[k] = static_cast<double>(em_kind[k]) / static_cast<double>(n);
  for (const auto& [k, n] : n_type) r.em_by_vqa_type[k] = static_cast<double>(em_type[k]) / static_cast<double>(n);
  if (!rows.empty()) r.em = static_cast<double>(em_total) / static_cast<double>(rows.size());
  if (r.generative_count) {
    const double g = static_cast<double>(r.generative_count);
    for (double* v : {&r.bleu1, &r.bleu2, &r.rouge1, &r.rougeL, &r.cider, &r.meteor}) *v /= g;
  }
  r.rows = std::move(rows);
  return r;
}

double EvalReport::em_over(const std::vector<std::string>& types) const {
  std::size_t n = 0, ok = 0;
  for (const auto& row : rows) {
    for (const auto& t : types) {
      if (row.vqa_type == t) {
        ++n;
        ok += static_cast<std::size_t>(row.em);
      }
    }
  }
  return n == 0 ? -1.0 : static_cast<double>(ok) / static_cast<double>(n);
}

nlohmann::ordered_json EvalReport::to_json() const {
  nlohmann::ordered_json j;
  j["mode"] = mode;
  j["counts"] = counts;
  j["em"] = em;
  j["em_by_kind"] = em_by_kind;
  j["em_by_vqa_type"] = em_by_vqa_type;
  j["generative"] = {{"count", generative_count}, {"B@1", bleu1},   {"B@2", bleu2},
                     {"R@1", rouge1},             {"R@L", rougeL},  {"CIDEr", cider},
                     {"METEOR", meteor}};
  auto& out = j["rows"] = nlohmann::ordered_json::array();
  for (const auto& r : rows) {
    nlohmann::ordered_json o;
    o["index"] = r.index;
    o["kind"] = r.kind;
    o["vqa_type"] = r.vqa_type;
    o["scene_id"] = r.scene_id;
    o["prompt"] = r.prompt;
    o["reference"] = r.reference;
    o["hypothesis"] = r.hypothesis;
    o["beam"] = r.beam;
    o["em"] = r.em;
    if (r.generative) {
      o["B@1"] = r.bleu1;
      o["B@2"] = r.bleu2;
      o["R@1"] = r.rouge1;
      o["R@L"] = r.rougeL;
      o["CIDEr"] = r.cider;
      o["METEOR"] = r.meteor;
    }
    out.push_back(std::move(o));
  }
  return j;
}

std::string EvalReport::to_csv() const {
  std::ostringstream o;
  o << "index,kind,vqa_type,scene_id,prompt,reference,hypothesis,beam,em,B@1,B@2,R@1,R@L,CIDEr,METEOR\n";
  for (const auto& r : rows) {
    o << r.index << ',' << r.kind << ',' << r.vqa_type << ',' << r.scene_id << ','
      << csv_field(r.prompt) << ',' << csv_field(r.reference) << ',' << csv_field(r.hypothesis)
      << ',' << r.beam << ',' << r.em;
    if (r.generative) {
      for (double v : {r.bleu1, r.bleu2, r.rouge1, r.rougeL, r.cider, r.meteor}) o << ',' << num(v);
    } else {
      o << ",,,,,,";
    }
    o << '\n';
  }
  return o.str();
}

EvalReport evaluate(const ModelBundle<float>& m, const std::vector<InstructionSample>& samples,
                    const std::vector<Scene>& scenes, const EvalOptions& opts) {
  std::unordered_map<std::uint64_t, const Scene*> by_id;
  for (const auto& s : scenes) by_id[s.id] = &s;
  std::vector<std::vector<std::string>> detail_docs;
  for (const auto& s : samples) {
    if (s.kind == SampleKind::kDetail) detail_docs.push_back({s.target});
  }
  std::optional<CiderStats> stats;
  if (detail_docs.size() >= 2) stats.emplace(detail_docs);

  std::vector<EvalRow> rows;
  for (std::size_t i = 0; i < samples.size(); ++i) {
    const auto& s = samples[i];
    const auto it = by_id.find(s.scene_id);
    if (it == by_id.end()) throw ContractError("evaluate: sample " + std::to_string(i) + " has unknown scene");
    AnswerOptions ao;
    ao.mode = opts.mode;
    ao.beam = s.kind == SampleKind::kDetail ? opts.beam_detail : opts.beam_short;
    ao.max_len = opts.max_len;
    const std::string query = s.kind == SampleKind::kCaption ? "" : s.prompt;
    if (query.empty()) throw ContractError("evaluate: sample " + std::to_string(i) + " has no prompt");
    const DecodeResult d = answer(m, *it->second, query, ao);
    EvalRow row;
    row.index = i;
    row.kind = std::string(kind_name(s.kind));
    if (s.kind == SampleKind::kVqa) {
      if (auto t = vqa_type(s.prompt)) row.vqa_type = std::string(vqa_type_name(*t));
    }
    row.scene_id = s.scene_id;
    row.prompt = s.prompt;
    row.reference = s.target;
    row.hypothesis = d.text;
    row.beam = ao.beam;
    row.em = exact_match(d.text, s.target);
    if (s.kind == SampleKind::kDetail) {
      const std::vector<std::string> refs{s.target};
      row.generative = true;
      row.bleu1 = bleu(d.text, refs, 1);
      row.bleu2 = bleu(d.text, refs, 2);
      row.rouge1 = rouge_1(d.text, s.target);
      row.rougeL = rouge_l(d.text, s.target);
      row.cider = stats ? cider(d.text, refs, *stats) : 0.0;
      row.meteor = meteor(d.text, s.target);
    }
    rows.push_back(std::move(row));
  }
  return EvalReport::from_rows(mode_name(opts.mode), std::move(rows));
}

}  // namespace ipn
