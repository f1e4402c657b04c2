// Copyright 2026 The IPN Authors
// SPDX-License-Identifier: Apache-2.0
//
// ipn gen-data | pretrain {lm,encoders} | train {1,2} | eval | answer |
//     gradcheck | ablation

#include <cstdio>
#include <iomanip>
#include <iostream>
#include <optional>

#ifdef __GLIBC__
#include <malloc.h>
#endif

#include "CLI11.hpp"

#include "ipn/checkpoint.hpp"
#include "ipn/errors.hpp"
#include "ipn/inference.hpp"
#include "ipn/pipeline.hpp"

namespace {

using namespace ipn;

constexpr int kExitOk = 0;
constexpr int kExitContract = 1;
constexpr int kExitThreshold = 2;

struct Flags {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::string out = "run";
  bool force = false;
  std::string mode;
  std::optional<std::size_t> beam;
  bool trace = false;
  std::vector<std::string> sets;
};

CommandContext make_context(const Flags& f) {
  CommandContext ctx;
  if (!f.config.empty()) ctx.cfg.load_file(f.config);
  for (const auto& kv : f.sets) {
    const auto eq = kv.find('=');
    if (eq == std::string::npos) throw ContractError("--set expects key=value, got '" + kv + "'");
    ctx.cfg.set(kv.substr(0, eq), kv.substr(eq + 1));
  }
  if (f.seed) ctx.cfg.set("seed", std::to_string(*f.seed));
  if (!f.mode.empty()) ctx.cfg.set("mode", f.mode);
  if (f.beam) {
    ctx.cfg.set("beam_short", std::to_string(*f.beam));
    ctx.cfg.set("beam_detail", std::to_string(*f.beam));
  }
  ctx.out = f.out;
  ctx.force = f.force;
  ctx.log = [](const std::string& line) { std::cerr << line << '\n'; };
  std::filesystem::create_directories(ctx.out);
  return ctx;
}

void print_report(const EvalReport& r) {
  std::cout << "mode " << r.mode << "  EM " << std::fixed << std::setprecision(4) << r.em << '\n';
  for (const auto& [k, v] : r.em_by_kind) std::cout << "  " << k << " (" << r.counts.at(k) << ") EM " << v << '\n';
  for (const auto& [k, v] : r.em_by_vqa_type) std::cout << "  vqa/" << k << " EM " << v << '\n';
  if (r.generative_count) {
    std::cout << "  detail B@1 " << r.bleu1 << " B@2 " << r.bleu2 << " R@1 " << r.rouge1 << " R@L "
              << r.rougeL << " CIDEr " << r.cider << " METEOR " << r.meteor << '\n';
  }
}

const Scene& resolve_scene(const std::vector<Scene>& scenes, const std::string& text) {
  std::uint64_t v = 0;
  std::size_t used = 0;
  try {
    v = std::stoull(text, &used, 0);
  } catch (const std::exception&) {
    used = 0;
  }
  if (used == text.size() && !text.empty()) {
    for (const auto& s : scenes) {
      if (s.id == v) return s;
    }
    if (v < scenes.size()) return scenes[v];
  }
  throw ContractError("unknown scene_id '" + text + "'; valid range is 0.." +
                      std::to_string(scenes.size() - 1) + " (index) or a scene id from data/scenes.jsonl");
}

}  // namespace

int main(int argc, char** argv) {
#ifdef __GLIBC__
  // Tensor buffers are allocated and freed every step; keep them off mmap.
  mallopt(M_MMAP_THRESHOLD, 1 << 30);
  mallopt(M_TRIM_THRESHOLD, 1 << 30);
#endif
  CLI::App app{"Interactive perception network toy pipeline"};
  app.require_subcommand(1);
  Flags f;
  auto common = [&](CLI::App* sub) {
    sub->add_option("--config", f.config, "key = value config file")->check(CLI::ExistingFile);
    sub->add_option("--seed", f.seed, "root seed");
    sub->add_option("--out", f.out, "run directory")->capture_default_str();
    sub->add_option("--set", f.sets, "override one config key (key=value)");
  };

  auto* gen = app.add_subcommand("gen-data", "generate scenes and instruction corpora");
  common(gen);
  gen->add_flag("--force", f.force, "overwrite a non-empty data directory");

  std::string pre_kind;
  auto* pre = app.add_subcommand("pretrain", "pretrain the frozen backbones");
  common(pre);
  pre->add_option("kind", pre_kind, "lm or encoders")->required()->check(CLI::IsMember({"lm", "encoders"}));

  int phase = 0;
  auto* train = app.add_subcommand("train", "train the IPN plug-in");
  common(train);
  train->add_option("phase", phase, "1 or 2")->required()->check(CLI::IsMember({1, 2}));

  auto* eval = app.add_subcommand("eval", "evaluate on the held-out split");
  common(eval);
  eval->add_option("--mode", f.mode, "ipn or static")->check(CLI::IsMember({"ipn", "static"}));
  eval->add_option("--beam", f.beam, "beam width for every kind");

  std::string scene_text, query;
  auto* ans = app.add_subcommand("answer", "answer one query about one scene");
  common(ans);
  ans->add_option("--scene", scene_text, "scene id or index")->required();
  ans->add_option("--query", query, "question text")->required();
  ans->add_option("--mode", f.mode, "ipn or static")->check(CLI::IsMember({"ipn", "static"}));
  ans->add_option("--beam", f.beam, "beam width");
  ans->add_flag("--trace", f.trace, "print intermediate norms");

  std::string fault;
  auto* grad = app.add_subcommand("gradcheck", "finite-difference check of all IPN groups");
  common(grad);
  grad->add_option("--inject-fault", fault)->group("")->check(CLI::IsMember({"wout-sign"}));

  auto* abl = app.add_subcommand("ablation", "ipn vs static on query-dependent VQA");
  common(abl);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kExitOk : kExitContract;
  }

  try {
    if (*gen) {
      auto ctx = make_context(f);
      write_resolved(ctx, "gen-data");
      cmd_gen_data(ctx);
    } else if (*pre) {
      auto ctx = make_context(f);
      write_resolved(ctx, "pretrain-" + pre_kind);
      cmd_pretrain(ctx, pre_kind);
    } else if (*train) {
      auto ctx = make_context(f);
      write_resolved(ctx, "train-" + std::to_string(phase));
      const auto r = cmd_train(ctx, phase);
      for (std::size_t e = 0; e < r.epoch_loss.size(); ++e) {
        std::cout << "epoch " << e + 1 << " loss " << r.epoch_loss[e] << '\n';
      }
    } else if (*eval) {
      auto ctx = make_context(f);
      write_resolved(ctx, "eval");
      print_report(cmd_eval(ctx, parse_mode(ctx.cfg.get("mode"))));
    } else if (*ans) {
      auto ctx = make_context(f);
      write_resolved(ctx, "answer");
      const auto scenes = load_scenes(ctx);
      if (scenes.empty()) throw ContractError("no scenes in the run directory");
      const Scene& scene = resolve_scene(scenes, scene_text);
      const auto m = load_bundle(ctx);
      AnswerOptions o;
      o.mode = parse_mode(ctx.cfg.get("mode"));
      o.beam = f.beam.value_or(1);
      o.max_len = ctx.cfg.get_size("max_len");
      o.trace = f.trace;
      const DecodeResult d = answer(m, scene, query, o);
      if (d.truncated_query) std::cerr << "warning: query truncated from the left\n";
      if (d.trace) {
        std::cout << std::setprecision(6) << "|h_r| " << d.trace->h_r_norm << "\n|h_R| " << d.trace->h_R_norm
                  << "\n|h_g_out| " << d.trace->h_g_out_norm << "\n|h_d| " << d.trace->h_d_norm << '\n';
      }
      std::cout << d.text << '\n';
    } else if (*grad) {
      auto ctx = make_context(f);
      write_resolved(ctx, "gradcheck");
      if (fault == "wout-sign") testing::set_wout_sign_fault(true);
      const auto r = run_gradcheck(ctx.cfg.seed());
      for (const auto& g : r.groups) {
        std::cout << (g.pass ? "PASS " : "FAIL ") << std::left << std::setw(9) << g.group << std::setw(12)
                  << g.loss << " max rel err " << std::scientific << std::setprecision(3) << g.max_rel_error
                  << std::defaultfloat << '\n';
      }
      std::cout << "gradcheck " << (r.pass() ? "passed" : "failed") << " in " << std::fixed
                << std::setprecision(1) << r.seconds << " s\n";
      if (!r.pass()) {
        for (const auto& g : r.groups) {
          if (!g.pass) std::cerr << "gradient mismatch in group " << g.group << " (" << g.loss << ")\n";
        }
        return kExitThreshold;
      }
    } else if (*abl) {
      auto ctx = make_context(f);
      write_resolved(ctx, "ablation");
      const auto a = cmd_ablation(ctx);
      std::cout << "items " << a.items << "  EM ipn " << std::fixed << std::setprecision(4) << a.ipn_em
                << "  EM static " << a.static_em << "  gap " << std::setprecision(1)
                << 100.0 * (a.ipn_em - a.static_em) << " points\n";
    }
  } catch (const ThresholdError& e) {
    std::cerr << "threshold not met: " << e.what() << '\n';
    return kExitThreshold;
  } catch (const TrainingAborted& e) {
    std::cerr << "training aborted: " << e.what() << '\n';
    return kExitThreshold;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kExitContract;
  }
  return kExitOk;
}
