// Copyright 2026 The IPN Authors
// SPDX-License-Identifier: Apache-2.0

#include "ipn/pipeline.hpp"

#include <algorithm>
#include <chrono>
#include <fstream>
#include <sstream>

#include "json.hpp"

#include "ipn/checkpoint.hpp"
#include "ipn/fnv.hpp"
#include "ipn/gradcheck.hpp"
#include "ipn/pretrain.hpp"
#include "ipn/rng.hpp"
#include "ipn/training.hpp"

namespace ipn {

namespace fs = std::filesystem;

namespace {

const std::map<std::string, std::string>& defaults() {
  static const std::map<std::string, std::string> d = {
      {"seed", "1"},
      {"scenes", "8192"},
      {"matching_rounds", "6"},
      {"lm_epochs", "2"},
      {"lm_lr", "0.003"},
      {"lm_batch", "64"},
      {"lm_max_ppl_fraction", "0.6"},
      {"enc_epochs", "8"},
      {"enc_lr", "0.003"},
      {"enc_batch", "64"},
      {"enc_temperature", "0.07"},
      {"enc_min_retrieval_over_chance", "5"},
      {"phase1_lr", "0.0001"},
      {"phase1_epochs", "5"},
      {"phase1_batch", "64"},
      {"phase1_captions", "2000"},
      {"phase1_plateau", "0.005"},
      {"phase2_lr", "0.0001"},
      {"phase2_epochs", "1"},
      {"phase2_batch", "32"},
      {"phase2_examples", "0"},
      {"phase2_mix", "true_false:1,four_choice:1,vqa:1,detail:1"},
      {"eval_true_false", "500"},
      {"eval_four_choice", "500"},
      {"eval_vqa", "1000"},
      {"eval_detail", "100"},
      {"beam_short", "1"},
      {"beam_detail", "5"},
      {"max_len", "48"},
      {"mode", "ipn"},
  };
  return d;
}

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

void emit(const CommandContext& ctx, const std::string& line) {
  if (ctx.log) ctx.log(line);
}

fs::path data_dir(const CommandContext& ctx) { return ctx.out / "data"; }
fs::path bb_dir(const CommandContext& ctx) { return ctx.out / "backbones"; }
fs::path ipn_dir(const CommandContext& ctx) { return ctx.out / "ipn"; }
fs::path eval_dir(const CommandContext& ctx) { return ctx.out / "eval"; }

nlohmann::ordered_json read_manifest(const CommandContext& ctx) {
  const fs::path p = ctx.out / "manifest.json";
  if (!fs::exists(p)) return nlohmann::ordered_json::object();
  std::ifstream f(p);
  return nlohmann::ordered_json::parse(f);
}

void update_manifest(const CommandContext& ctx, const std::string& section,
                     const nlohmann::ordered_json& value) {
  auto m = read_manifest(ctx);
  m[section] = value;
  std::ofstream f(ctx.out / "manifest.json", std::ios::trunc);
  f << m.dump(2) << '\n';
}

void write_text(const fs::path& p, const std::string& text) {
  fs::create_directories(p.parent_path());
  std::ofstream f(p, std::ios::trunc | std::ios::binary);
  if (!f) throw ContractError("cannot write " + p.string());
  f << text;
}

LmConfig lm_config(const Tokenizer& tok) {
  LmConfig c;
  c.vocab = tok.size();
  return c;
}

TextEncoderConfig text_config(const Tokenizer& tok) {
  TextEncoderConfig c;
  c.vocab = tok.size();
  return c;
}

// Tags backbone archives with the vocabulary and the model shapes.
std::uint64_t config_digest(const Tokenizer& tok) {
  Fnv1a h;
  for (const auto& w : tok.vocabulary()) h.update_string(w + "\n");
  const LmConfig l = lm_config(tok);
  const TextEncoderConfig t = text_config(tok);
  const std::uint64_t dims[] = {l.width, l.layers, l.heads, l.ff, l.max_len,
                                t.width, t.layers, t.heads, t.ff, t.max_len};
  h.update(dims, sizeof dims);
  return h.digest();
}

template <typename T>
NamedTensors<float> concat(std::initializer_list<NamedTensors<T>> parts) {
  NamedTensors<float> out;
  for (const auto& p : parts) out.insert(out.end(), p.begin(), p.end());
  return out;
}

std::vector<InstructionSample> read_kind(const CommandContext& ctx, const std::string& split,
                                         const std::string& kind) {
  const fs::path p = data_dir(ctx) / split / (kind + ".jsonl");
  if (!fs::exists(p)) throw ContractError("missing corpus file " + p.string() + " (run gen-data first)");
  return read_samples_jsonl(p);
}

std::pair<std::vector<Scene>, std::vector<Scene>> split_scenes(const std::vector<Scene>& all) {
  std::vector<Scene> train, held;
  for (const auto& s : all) (is_held_out(s.id) ? held : train).push_back(s);
  return {train, held};
}

template <typename T>
void shuffle_with(std::vector<T>& v, std::mt19937_64& rng) {
  for (std::size_t i = v.size(); i > 1; --i) std::swap(v[i - 1], v[uniform_index(rng, i)]);
}

// First n items after a seeded shuffle; all of them when n is 0 or too large.
template <typename T>
std::vector<T> subsample(std::vector<T> v, std::size_t n, std::mt19937_64 rng) {
  shuffle_with(v, rng);
  if (n && n < v.size()) v.resize(n);
  return v;
}

// "kind:copies,..." -> how many times each phase-2 corpus file is used.
std::vector<std::pair<std::string, std::size_t>> parse_mix(const std::string& text) {
  std::vector<std::pair<std::string, std::size_t>> out;
  std::istringstream in(text);
  for (std::string item; std::getline(in, item, ',');) {
    const auto colon = item.find(':');
    const std::string kind = trim(item.substr(0, colon));
    std::size_t copies = 1;
    if (colon != std::string::npos) {
      const std::string n = trim(item.substr(colon + 1));
      if (n.empty() || n.find_first_not_of("0123456789") != std::string::npos) {
        throw ContractError("phase2_mix: bad copy count in '" + item + "'");
      }
      copies = std::stoul(n);
    }
    const SampleKind k = parse_kind(kind);
    if (k == SampleKind::kCaption) throw ContractError("phase2_mix: captions belong to phase 1");
    out.emplace_back(kind, copies);
  }
  if (out.empty()) throw ContractError("phase2_mix is empty");
  return out;
}

void load_backbones(const CommandContext& ctx, ModelBundle<float>& m) {
  const auto digest = config_digest(m.tok);
  std::mt19937_64 unused(0);
  m.lm = FrozenLm<float>::init(lm_config(m.tok), unused);
  m.text = FrozenTextEncoder<float>::init(text_config(m.tok), unused);
  m.vis = FrozenVisualEncoder<float>::init(unused);
  for (const char* name : {"lm.ipnb", "encoders.ipnb"}) {
    const fs::path p = bb_dir(ctx) / name;
    if (!fs::exists(p)) throw ContractError("missing " + p.string() + " (run pretrain first)");
    Archive a = load_archive(p);
    if (a.digest != digest) throw CheckpointError(CheckpointError::Kind::kMismatch, p.string() + ": config digest mismatch");
    if (std::string(name) == "lm.ipnb") {
      m.lm.assign(a.tensors);
    } else {
      NamedTensors<float> text, vis;
      for (auto& e : a.tensors) (e.first.rfind("text.", 0) == 0 ? text : vis).push_back(e);
      m.text.assign(text);
      m.vis.assign(vis);
    }
  }
  m.lm.freeze();
  m.text.freeze();
  m.vis.freeze();
}

IpnParams<float> fresh_ipn(const CommandContext& ctx, const FrozenLm<float>& lm) {
  auto rng = substream(ctx.cfg.seed(), "init.ipn");
  return IpnParams<float>::init(lm, rng);
}

}  // namespace

RunConfig::RunConfig() : values_(defaults()) {}

void RunConfig::set(const std::string& key, const std::string& value) {
  if (!defaults().count(key)) throw ContractError("unknown config key '" + key + "'");
  values_[key] = value;
}

void RunConfig::load_file(const fs::path& path) {
  std::ifstream f(path);
  if (!f) throw ContractError("cannot read config " + path.string());
  std::string line;
  std::size_t n = 0;
  while (std::getline(f, line)) {
    ++n;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.erase(hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw ParseError("expected 'key = value' in " + path.string(), n);
    const std::string key = trim(line.substr(0, eq)), value = trim(line.substr(eq + 1));
    if (key.empty() || value.empty()) throw ParseError("empty key or value in " + path.string(), n);
    try {
      set(key, value);
    } catch (const ContractError& e) {
      throw ParseError(e.what(), n);
    }
  }
}

const std::string& RunConfig::get(const std::string& key) const {
  const auto it = values_.find(key);
  if (it == values_.end()) throw ContractError("unknown config key '" + key + "'");
  return it->second;
}

std::int64_t RunConfig::get_int(const std::string& key) const {
  const std::string& v = get(key);
  std::size_t used = 0;
  std::int64_t out = 0;
  try {
    out = std::stoll(v, &used);
  } catch (const std::exception&) {
    used = 0;
  }
  if (used != v.size()) throw ContractError("config " + key + " = '" + v + "' is not an integer");
  return out;
}

std::size_t RunConfig::get_size(const std::string& key) const {
  const auto v = get_int(key);
  if (v < 0) throw ContractError("config " + key + " must be non-negative");
  return static_cast<std::size_t>(v);
}

double RunConfig::get_double(const std::string& key) const {
  const std::string& v = get(key);
  std::size_t used = 0;
  double out = 0;
  try {
    out = std::stod(v, &used);
  } catch (const std::exception&) {
    used = 0;
  }
  if (used != v.size()) throw ContractError("config " + key + " = '" + v + "' is not a number");
  return out;
}

std::uint64_t RunConfig::seed() const {
  const std::string& v = get("seed");
  std::size_t used = 0;
  std::uint64_t out = 0;
  try {
    out = std::stoull(v, &used);
  } catch (const std::exception&) {
    used = 0;
  }
  if (used != v.size()) throw ContractError("config seed = '" + v + "' is not an unsigned integer");
  return out;
}

std::string RunConfig::resolved() const {
  std::ostringstream o;
  for (const auto& [k, v] : values_) o << k << " = " << v << '\n';
  return o.str();
}

void write_resolved(const CommandContext& ctx, const std::string& name) {
  write_text(ctx.out / (name + ".resolved.conf"), ctx.cfg.resolved());
}

void cmd_gen_data(const CommandContext& ctx) {
  const fs::path dir = data_dir(ctx);
  if (fs::exists(dir) && !fs::is_empty(dir)) {
    if (!ctx.force) throw ContractError(dir.string() + " is not empty; pass --force to overwrite");
    fs::remove_all(dir);
  }
  fs::create_directories(dir);
  const std::uint64_t data_seed = substream_seed(ctx.cfg.seed(), "data");
  const auto scenes = gen_scenes(data_seed, ctx.cfg.get_size("scenes"));
  write_scenes_jsonl(dir / "scenes.jsonl", scenes);
  const auto [train, held] = split_scenes(scenes);
  nlohmann::ordered_json counts;
  const std::size_t rounds = ctx.cfg.get_size("matching_rounds");
  for (const auto* split : {"train", "heldout"}) {
    const auto& ss = std::string(split) == "train" ? train : held;
    std::map<SampleKind, std::vector<InstructionSample>> by_kind;
    for (const auto& s : ss) {
      by_kind[SampleKind::kCaption].push_back(make_caption_sample(s));
      by_kind[SampleKind::kDetail].push_back(make_detail_sample(s));
      for (auto& v : make_vqa_samples(s)) by_kind[SampleKind::kVqa].push_back(std::move(v));
    }
    const std::size_t n_rounds = std::string(split) == "train" ? std::max<std::size_t>(rounds, 1) : 1;
    for (std::size_t r = 0; r < n_rounds; ++r) {
      const auto seed = substream_seed(data_seed, std::string("matching.") + split + "." + std::to_string(r));
      for (auto& m : make_matching_samples(ss, seed)) by_kind[m.kind].push_back(std::move(m));
    }
    nlohmann::ordered_json c;
    c["scenes"] = ss.size();
    fs::create_directories(dir / split);
    for (auto& [kind, samples] : by_kind) {
      write_samples_jsonl(dir / split / (std::string(kind_name(kind)) + ".jsonl"), samples);
      c[std::string(kind_name(kind))] = samples.size();
    }
    counts[split] = c;
  }
  nlohmann::ordered_json manifest;
  manifest["seed"] = ctx.cfg.seed();
  manifest["scenes"] = scenes.size();
  manifest["matching_rounds"] = rounds;
  manifest["held_out_rule"] = "(scene_id & 7) >= 6";
  manifest["counts"] = counts;
  write_text(dir / "split_manifest.json", manifest.dump(2) + "\n");
  update_manifest(ctx, "data", manifest);
  emit(ctx, "gen-data: " + std::to_string(scenes.size()) + " scenes (" + std::to_string(train.size()) +
                " train, " + std::to_string(held.size()) + " held out)");
}

std::vector<Scene> load_scenes(const CommandContext& ctx) {
  const fs::path p = data_dir(ctx) / "scenes.jsonl";
  if (!fs::exists(p)) throw ContractError("missing " + p.string() + " (run gen-data first)");
  return read_scenes_jsonl(p);
}

void cmd_pretrain(const CommandContext& ctx, const std::string& kind) {
  const Tokenizer tok = Tokenizer::standard();
  const auto scenes = load_scenes(ctx);
  const auto [train, held] = split_scenes(scenes);
  const std::uint64_t seed = ctx.cfg.seed();
  fs::create_directories(bb_dir(ctx));
  Archive archive;
  archive.digest = config_digest(tok);
  PretrainLog curve;
  std::string curve_name;
  nlohmann::ordered_json entry;
  auto write_curve = [&](const std::vector<double>& c) {
    nlohmann::ordered_json j;
    j["kind"] = kind;
    j["curve"] = c;
    j["train_loss"] = curve.train_loss;
    write_text(bb_dir(ctx) / (kind + "_curve.json"), j.dump(2) + "\n");
  };
  try {
    if (kind == "lm") {
      auto init = substream(seed, "init.lm");
      auto lm = FrozenLm<float>::init(lm_config(tok), init);
      const auto texts = build_lm_texts(train, tok, substream_seed(seed, "data.lm.train"));
      const auto held_texts = build_lm_texts(held, tok, substream_seed(seed, "data.lm.heldout"));
      LmPretrainConfig c;
      c.epochs = ctx.cfg.get_size("lm_epochs");
      c.batch_size = ctx.cfg.get_size("lm_batch");
      c.lr = static_cast<float>(ctx.cfg.get_double("lm_lr"));
      c.max_perplexity_fraction = ctx.cfg.get_double("lm_max_ppl_fraction");
      c.seed = substream_seed(seed, "train.lm");
      emit(ctx, "pretrain lm: " + std::to_string(texts.size()) + " texts");
      curve = pretrain_text_lm(lm, texts, held_texts, c, ctx.log);
      archive.tensors = lm.parameters();
      entry["checksum"] = hex64(lm.checksum());
      entry["heldout_perplexity"] = curve.curve.back();
    } else if (kind == "encoders") {
      auto init = substream(seed, "init.encoders");
      auto vis = FrozenVisualEncoder<float>::init(init);
      auto text = FrozenTextEncoder<float>::init(text_config(tok), init);
      ContrastiveConfig c;
      c.epochs = ctx.cfg.get_size("enc_epochs");
      c.batch_size = ctx.cfg.get_size("enc_batch");
      c.lr = static_cast<float>(ctx.cfg.get_double("enc_lr"));
      c.temperature = static_cast<float>(ctx.cfg.get_double("enc_temperature"));
      c.min_retrieval_over_chance = ctx.cfg.get_double("enc_min_retrieval_over_chance");
      c.seed = substream_seed(seed, "train.encoders");
      curve = contrastive_pretrain(vis, text, train, held, tok, c, ctx.log);
      archive.tensors = concat<float>({text.parameters(), vis.parameters()});
      entry["text_checksum"] = hex64(text.checksum());
      entry["visual_checksum"] = hex64(vis.checksum());
      entry["retrieval_top1"] = curve.curve.back();
    } else {
      throw ContractError("pretrain kind must be lm or encoders, got '" + kind + "'");
    }
  } catch (const ThresholdError& e) {
    write_curve(e.curve());
    throw;
  }
  write_curve(curve.curve);
  const std::string file = kind + ".ipnb";
  save_archive(bb_dir(ctx) / file, archive);
  auto manifest = read_manifest(ctx);
  nlohmann::ordered_json bb = manifest.contains("backbones") ? manifest["backbones"] : nlohmann::ordered_json::object();
  bb[kind] = entry;
  update_manifest(ctx, "backbones", bb);
}

ModelBundle<float> load_bundle(const CommandContext& ctx) {
  ModelBundle<float> m;
  load_backbones(ctx, m);
  m.ipn = fresh_ipn(ctx, m.lm);
  const fs::path p2 = ipn_dir(ctx) / "phase2.ipnb", p1 = ipn_dir(ctx) / "phase1.ipnb";
  if (fs::exists(p2)) {
    load_ipn_checkpoint(p2, m.ipn, m.backbone_checksum());
  } else if (fs::exists(p1)) {
    load_ipn_checkpoint(p1, m.ipn, m.backbone_checksum());
  } else {
    throw ContractError("no IPN checkpoint in " + ipn_dir(ctx).string() + " (run train first)");
  }
  return m;
}

TrainResult cmd_train(const CommandContext& ctx, int phase) {
  if (phase != 1 && phase != 2) throw ContractError("train phase must be 1 or 2");
  const fs::path p1 = ipn_dir(ctx) / "phase1.ipnb";
  if (phase == 2 && !fs::exists(p1)) throw ContractError("phase 2 needs " + p1.string() + "; run train 1 first");
  ModelBundle<float> m;
  load_backbones(ctx, m);
  m.ipn = fresh_ipn(ctx, m.lm);
  const std::uint64_t bb = m.backbone_checksum();
  const auto scenes = load_scenes(ctx);
  const auto [train_scenes, held] = split_scenes(scenes);
  const ImageTable images = ImageTable::build(m.vis, train_scenes);
  TrainConfig tc;
  tc.phase = phase;
  std::vector<InstructionSample> corpus;
  const std::uint64_t seed = ctx.cfg.seed();
  if (phase == 1) {
    corpus = subsample(read_kind(ctx, "train", "caption"), ctx.cfg.get_size("phase1_captions"),
                       substream(seed, "train.phase1.subset"));
    tc.base_lr = static_cast<float>(ctx.cfg.get_double("phase1_lr"));
    tc.epochs = ctx.cfg.get_size("phase1_epochs");
    tc.batch_size = ctx.cfg.get_size("phase1_batch");
    tc.plateau = ctx.cfg.get_double("phase1_plateau");
    tc.seed = substream_seed(seed, "train.phase1");
  } else {
    const auto loaded = load_ipn_checkpoint(p1, m.ipn, bb);
    for (IpnGroup g : phase_groups(1)) {
      if (std::find(loaded.begin(), loaded.end(), g) == loaded.end()) {
        throw ContractError(p1.string() + " lacks group " + group_name(g));
      }
    }
    for (const auto& [kind, copies] : parse_mix(ctx.cfg.get("phase2_mix"))) {
      const auto part = read_kind(ctx, "train", kind);
      for (std::size_t c = 0; c < copies; ++c) corpus.insert(corpus.end(), part.begin(), part.end());
    }
    corpus = subsample(std::move(corpus), ctx.cfg.get_size("phase2_examples"),
                       substream(seed, "train.phase2.subset"));
    tc.base_lr = static_cast<float>(ctx.cfg.get_double("phase2_lr"));
    tc.epochs = ctx.cfg.get_size("phase2_epochs");
    tc.batch_size = ctx.cfg.get_size("phase2_batch");
    tc.seed = substream_seed(seed, "train.phase2");
  }
  std::size_t truncated = 0;
  const auto examples = tokenize_corpus(corpus, images, m.tok, phase, m.lm.config(), &truncated);
  if (truncated) emit(ctx, "warning: " + std::to_string(truncated) + " queries truncated from the left");
  fs::create_directories(ipn_dir(ctx));
  const std::string tag = "phase" + std::to_string(phase);
  std::ofstream log(ipn_dir(ctx) / (tag + "_log.jsonl"), std::ios::trunc);
  const fs::path ckpt = ipn_dir(ctx) / (tag + ".ipnb");
  const auto groups = phase == 1 ? phase_groups(1)
                                 : std::vector<IpnGroup>(kAllGroups.begin(), kAllGroups.end());
  TrainHooks hooks;
  hooks.log = ctx.log;
  hooks.on_step = [&](const LossRecord& r) { log << to_json(r).dump() << '\n'; };
  emit(ctx, "train " + tag + ": " + std::to_string(examples.size()) + " examples");
  const double initial_nll = phase == 1 ? corpus_nll(m, examples, images, 1) : 0.0;
  const auto t0 = std::chrono::steady_clock::now();
  TrainResult result;
  try {
    result = train_phase(m, examples, images, tc, hooks);
  } catch (const TrainingAborted&) {
    save_ipn_checkpoint(ipn_dir(ctx) / (tag + ".last_good.ipnb"), m.ipn, groups, bb);
    throw;
  }
  result.truncated_queries = truncated;
  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  if (phase == 1) {
    result.initial_nll = initial_nll;
    result.final_nll = corpus_nll(m, examples, images, 1);
  }
  save_ipn_checkpoint(ckpt, m.ipn, groups, bb);
  nlohmann::ordered_json entry;
  entry["examples"] = examples.size();
  entry["epochs_run"] = result.epochs_run;
  entry["epoch_loss"] = result.epoch_loss;
  entry["seconds"] = secs;
  entry["truncated_queries"] = truncated;
  if (phase == 1) {
    entry["initial_nll"] = result.initial_nll;
    entry["final_nll"] = result.final_nll;
  }
  entry["trainable_digest"] = hex64(m.ipn.group_checksum(phase_groups(phase)));
  entry["backbone_checksum"] = hex64(bb);
  entry["ipn_parameters"] = m.ipn.parameter_count();
  update_manifest(ctx, tag, entry);
  return result;
}

namespace {

std::vector<InstructionSample> eval_samples(const CommandContext& ctx) {
  std::vector<InstructionSample> out;
  const std::uint64_t seed = ctx.cfg.seed();
  for (const char* kind : {"true_false", "four_choice", "vqa", "detail"}) {
    auto part = subsample(read_kind(ctx, "heldout", kind), ctx.cfg.get_size(std::string("eval_") + kind),
                          substream(seed, std::string("eval.") + kind));
    out.insert(out.end(), part.begin(), part.end());
  }
  return out;
}

EvalOptions eval_options(const CommandContext& ctx, Mode mode) {
  EvalOptions o;
  o.mode = mode;
  o.beam_short = ctx.cfg.get_size("beam_short");
  o.beam_detail = ctx.cfg.get_size("beam_detail");
  o.max_len = ctx.cfg.get_size("max_len");
  return o;
}

void write_report(const CommandContext& ctx, const EvalReport& r, const std::string& stem) {
  write_text(eval_dir(ctx) / (stem + ".json"), r.to_json().dump(2) + "\n");
  write_text(eval_dir(ctx) / (stem + ".csv"), r.to_csv());
}

}  // namespace

EvalReport cmd_eval(const CommandContext& ctx, Mode mode) {
  const auto m = load_bundle(ctx);
  const auto scenes = load_scenes(ctx);
  const auto samples = eval_samples(ctx);
  EvalReport r = evaluate(m, samples, scenes, eval_options(ctx, mode));
  write_report(ctx, r, std::string("report_") + mode_name(mode));
  return r;
}

AblationResult cmd_ablation(const CommandContext& ctx) {
  const auto m = load_bundle(ctx);
  const auto scenes = load_scenes(ctx);
  std::vector<InstructionSample> qd;
  for (auto& s : read_kind(ctx, "heldout", "vqa")) {
    const auto t = vqa_type(s.prompt);
    if (t && *t != VqaType::kExist) qd.push_back(std::move(s));
  }
  qd = subsample(std::move(qd), ctx.cfg.get_size("eval_vqa"), substream(ctx.cfg.seed(), "eval.ablation"));
  AblationResult a;
  a.ipn = evaluate(m, qd, scenes, eval_options(ctx, Mode::kIpn));
  a.static_mode = evaluate(m, qd, scenes, eval_options(ctx, Mode::kStatic));
  a.ipn_em = a.ipn.em;
  a.static_em = a.static_mode.em;
  a.items = qd.size();
  write_report(ctx, a.ipn, "ablation_ipn");
  write_report(ctx, a.static_mode, "ablation_static");
  nlohmann::ordered_json j;
  j["items"] = a.items;
  j["em_ipn"] = a.ipn_em;
  j["em_static"] = a.static_em;
  j["gap_points"] = 100.0 * (a.ipn_em - a.static_em);
  j["em_by_type_ipn"] = a.ipn.em_by_vqa_type;
  j["em_by_type_static"] = a.static_mode.em_by_vqa_type;
  write_text(eval_dir(ctx) / "ablation.json", j.dump(2) + "\n");
  return a;
}

bool GradcheckReport::pass() const {
  return !groups.empty() &&
         std::all_of(groups.begin(), groups.end(), [](const auto& g) { return g.pass; });
}

GradcheckReport run_gradcheck(std::uint64_t seed, double tolerance) {
  const auto t0 = std::chrono::steady_clock::now();
  auto rng = substream(seed, "gradcheck");
  ModelBundle<double> m;
  m.lm = FrozenLm<double>::init(lm_config(m.tok), rng);
  m.text = FrozenTextEncoder<double>::init(text_config(m.tok), rng);
  m.vis = FrozenVisualEncoder<double>::init(rng);
  m.lm.freeze();
  m.text.freeze();
  m.vis.freeze();
  m.ipn = IpnParams<double>::init(m.lm, rng);

  const auto scenes = gen_scenes(substream_seed(seed, "gradcheck.data"), 2);
  std::vector<TokenizedExample> cap, inst;
  for (std::size_t i = 0; i < scenes.size(); ++i) {
    TokenizedExample c;
    c.image_row = i;
    c.kind = "caption";
    c.target = m.tok.encode(render_caption(scenes[i]));
    cap.push_back(c);
    const auto vqa = make_vqa_samples(scenes[i]);
    TokenizedExample q;
    q.image_row = i;
    q.kind = "vqa";
    q.query = m.tok.encode(vqa.front().prompt);
    q.target = m.tok.encode(vqa.front().target);
    inst.push_back(q);
  }
  Tensor64 h_I = m.vis.encode_batch(scenes);
  std::vector<const TokenizedExample*> cap_batch, inst_batch;
  for (const auto& e : cap) cap_batch.push_back(&e);
  for (const auto& e : inst) inst_batch.push_back(&e);

  GradcheckReport report;
  auto check = [&](int phase, const std::vector<IpnGroup>& groups) {
    const auto& batch = phase == 1 ? cap_batch : inst_batch;
    m.ipn.set_phase(0);
    for (IpnGroup g : groups) {
      for (auto& [name, t] : m.ipn.group(g)) {
        Tensor64 h = t;
        h.set_requires_grad(true);
      }
    }
    Tensor64 loss = batch_loss(m, h_I, batch, phase);
    backward(loss);
    auto f = [&]() {
      NoGradGuard no_grad;
      return batch_loss(m, h_I, batch, phase).item();
    };
    for (IpnGroup g : groups) {
      GradcheckGroupResult r;
      r.group = group_name(g);
      r.loss = phase == 1 ? "caption" : "second_pass";
      for (auto& [name, t] : m.ipn.group(g)) {
        std::vector<double> analytic(t.grad().begin(), t.grad().end());
        Tensor64 numeric = finite_diff_grad(f, t);
        r.max_rel_error = std::max(r.max_rel_error, max_relative_error(analytic, numeric.data()));
      }
      r.pass = r.max_rel_error <= tolerance;
      report.groups.push_back(r);
    }
    m.ipn.set_phase(0);
  };
  check(1, phase_groups(1));
  check(2, std::vector<IpnGroup>(kAllGroups.begin(), kAllGroups.end()));
  report.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return report;
}

}  // namespace ipn
