// Copyright 2026 The IPN Authors
// SPDX-License-Identifier: Apache-2.0

#include <sys/wait.h>

#include <cstdlib>
#include <fstream>
#include <sstream>

#include "doctest.h"
#include "ipn/errors.hpp"
#include "ipn/pipeline.hpp"
#include "test_util.hpp"

using namespace ipn;
namespace fs = std::filesystem;

namespace {

std::string slurp(const fs::path& p) {
  std::ifstream f(p, std::ios::binary);
  std::ostringstream o;
  o << f.rdbuf();
  return o.str();
}

struct Run {
  int code = -1;
  std::string output;
};

Run run_cli(const std::string& args, const fs::path& scratch) {
  const fs::path log = scratch / "cli.log";
  const std::string cmd = std::string(IPN_CLI_PATH) + " " + args + " > " + log.string() + " 2>&1";
  const int status = std::system(cmd.c_str());
  return {WIFEXITED(status) ? WEXITSTATUS(status) : -1, slurp(log)};
}

CommandContext small_context(const fs::path& out) {
  CommandContext ctx;
  ctx.out = out;
  ctx.cfg.set("scenes", "48");
  ctx.cfg.set("matching_rounds", "2");
  return ctx;
}

}  // namespace

TEST_CASE("config files accept comments and reject unknown keys") {
  TempDir dir;
  const auto p = dir.path() / "run.conf";
  std::ofstream(p) << "# comment\nseed = 7   # trailing\n\nphase2_lr=0.003\n";
  RunConfig cfg;
  cfg.load_file(p);
  CHECK(cfg.seed() == 7);
  CHECK(cfg.get_double("phase2_lr") == doctest::Approx(0.003));
  std::ofstream(p) << "no_such_key = 1\n";
  CHECK_THROWS_AS(cfg.load_file(p), ParseError);
  std::ofstream(p) << "seed 7\n";
  CHECK_THROWS_AS(cfg.load_file(p), ParseError);
  cfg.set("scenes", "many");
  CHECK_THROWS_AS(cfg.get_size("scenes"), ContractError);
}

TEST_CASE("resolved config lists every default with the 1e-4 learning rate") {
  const RunConfig cfg;
  const auto text = cfg.resolved();
  CHECK(text.find("phase1_lr = 0.0001\n") != std::string::npos);
  CHECK(text.find("phase2_lr = 0.0001\n") != std::string::npos);
  CHECK(text.find("beam_short = 1\n") != std::string::npos);
  CHECK(text.find("beam_detail = 5\n") != std::string::npos);
  TempDir dir;
  RunConfig reread;
  std::ofstream(dir.path() / "r.conf") << text;
  reread.load_file(dir.path() / "r.conf");
  CHECK(reread.values() == cfg.values());
}

TEST_CASE("gen-data is deterministic and refuses to overwrite") {
  TempDir a, b;
  cmd_gen_data(small_context(a.path()));
  cmd_gen_data(small_context(b.path()));
  for (const char* f : {"scenes.jsonl", "split_manifest.json", "train/true_false.jsonl", "heldout/vqa.jsonl"}) {
    CHECK(slurp(a.path() / "data" / f) == slurp(b.path() / "data" / f));
  }
  const auto manifest = slurp(a.path() / "data" / "split_manifest.json");
  CHECK(manifest.find("\"four_choice\"") != std::string::npos);
  CHECK_THROWS_AS(cmd_gen_data(small_context(a.path())), ContractError);
  auto forced = small_context(a.path());
  forced.force = true;
  forced.cfg.set("seed", "2");
  cmd_gen_data(forced);
  CHECK(slurp(a.path() / "data" / "scenes.jsonl") != slurp(b.path() / "data" / "scenes.jsonl"));
}

TEST_CASE("phase 2 refuses to start without a phase-1 checkpoint") {
  TempDir dir;
  auto ctx = small_context(dir.path());
  cmd_gen_data(ctx);
  CHECK_THROWS_WITH_AS(cmd_train(ctx, 2), doctest::Contains("run train 1 first"), ContractError);
  CHECK_THROWS_AS(cmd_train(ctx, 3), ContractError);
}

TEST_CASE("cli exit codes") {
  TempDir dir;
  const auto out = dir.path() / "run";
  auto r = run_cli("gen-data --out " + out.string() + " --set scenes=48", dir.path());
  CHECK(r.code == 0);
  CHECK(fs::exists(out / "gen-data.resolved.conf"));
  r = run_cli("gen-data --out " + out.string() + " --set scenes=48", dir.path());
  CHECK(r.code == 1);
  CHECK(r.output.find("--force") != std::string::npos);
  r = run_cli("answer --out " + out.string() + " --scene 4096 --query 'is there a circle ?'", dir.path());
  CHECK(r.code == 1);
  CHECK(r.output.find("valid range is 0..47") != std::string::npos);
  r = run_cli("frobnicate", dir.path());
  CHECK(r.code == 1);
  r = run_cli("gen-data --out " + out.string() + " --set bogus=1", dir.path());
  CHECK(r.code == 1);
}

TEST_CASE("gradcheck flags an injected W_out sign error") {
  TempDir dir;
  const auto r = run_cli("gradcheck --out " + dir.path().string() + " --inject-fault wout-sign", dir.path());
  CHECK(r.code == 2);
  CHECK(r.output.find("gradient mismatch in group W_out") != std::string::npos);
  CHECK(r.output.find("FAIL W_out") != std::string::npos);
  CHECK(r.output.find("FAIL W_req") == std::string::npos);
}
