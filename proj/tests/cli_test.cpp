#include <doctest.h>

#include <filesystem>
#include <fstream>
#include <map>

#include "gaitplan/cli.hpp"
#include "gaitplan/types.hpp"

using namespace gaitplan;
namespace fs = std::filesystem;

namespace {

struct TempRun {
  fs::path dir;
  explicit TempRun(const std::string& tag) {
    dir = fs::temp_directory_path() / ("gaitplan_cli_" + tag);
    fs::remove_all(dir);
    fs::create_directories(dir);
  }
  ~TempRun() { fs::remove_all(dir); }
  std::string str() const { return dir.string(); }
};

fs::path write_micro_config(const fs::path& dir) {
  fs::path p = dir / "micro.json";
  std::ofstream out(p);
  out << R"({
  "seed": 3,
  "gaits": ["trotting"],
  "v_cmds": [0.5],
  "data": {"expert_episodes": 4, "planner_episodes": 6, "max_steps": 40},
  "diffusion": {"horizon": 5, "steps": 8, "hidden": [32, 32], "embed_dim": 8,
                "batch_size": 8, "train_steps": 40, "sampling_steps": 4},
  "preference": {"pairs": 12},
  "align": {"epochs": 1, "batch_size": 4},
  "eval": {"episodes": 4, "seeds": 2, "trace_episodes": 1}
})";
  return p;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  REQUIRE(in.good());
  return std::string((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
}

int run_cli(std::vector<std::string> args) { return cli::run(args); }

}  // namespace

TEST_CASE("micro pipeline: gen-expert, train-bc, eval produce artifacts") {
  TempRun run("smoke");
  fs::path config = write_micro_config(run.dir);
  std::string cf = config.string();

  CHECK(run_cli({"gen-expert", "--run", run.str(), "--config", cf}) == 0);
  CHECK(fs::exists(run.dir / "trotting_expert.jsonl"));
  CHECK(fs::exists(run.dir / "norm_stats.json"));

  CHECK(run_cli({"train-bc", "--run", run.str(), "--config", cf}) == 0);
  CHECK(fs::exists(run.dir / "bc_trotting.ckpt.json"));
  CHECK(fs::exists(run.dir / "trainlog_trotting.json"));

  CHECK(run_cli({"eval", "--run", run.str(), "--config", cf, "--policy", "bc"}) == 0);
  CHECK(fs::exists(run.dir / "eval_trotting_0.5.csv"));
  CHECK(fs::exists(run.dir / "eval_trotting_0.5.json"));
  CHECK(fs::exists(run.dir / "trace_0.csv"));
  CHECK(fs::exists(run.dir / "manifest.json"));

  std::string csv = slurp(run.dir / "eval_trotting_0.5.csv");
  CHECK(csv.find("stability_pct") != std::string::npos);

  // the rest of the pipeline
  CHECK(run_cli({"rollout", "--run", run.str(), "--config", cf}) == 0);
  CHECK(run_cli({"label", "--run", run.str(), "--config", cf}) == 0);
  CHECK(fs::exists(run.dir / "prefs_trotting_weak.jsonl"));
  CHECK(run_cli({"align", "--run", run.str(), "--config", cf}) == 0);
  CHECK(fs::exists(run.dir / "aligned_trotting.ckpt.json"));
  CHECK(run_cli({"eval", "--run", run.str(), "--config", cf, "--policy", "aligned"}) == 0);
  CHECK(run_cli({"report", "--run", run.str(), "--config", cf}) == 0);
}

TEST_CASE("stages rerun byte-identically and cache without --force") {
  TempRun run("repro");
  fs::path config = write_micro_config(run.dir);
  std::string cf = config.string();

  REQUIRE(run_cli({"gen-expert", "--run", run.str(), "--config", cf}) == 0);
  REQUIRE(run_cli({"train-bc", "--run", run.str(), "--config", cf}) == 0);
  REQUIRE(run_cli({"rollout", "--run", run.str(), "--config", cf}) == 0);
  REQUIRE(run_cli({"label", "--run", run.str(), "--config", cf}) == 0);

  std::map<std::string, std::string> before;
  for (const char* name : {"trotting_expert.jsonl", "norm_stats.json", "bc_trotting.ckpt.json",
                           "trainlog_trotting.json", "trotting_planner.jsonl",
                           "prefs_trotting_weak.jsonl", "manifest.json"})
    before[name] = slurp(run.dir / name);

  // cached rerun leaves everything in place
  REQUIRE(run_cli({"gen-expert", "--run", run.str(), "--config", cf}) == 0);
  // forced recompute reproduces the bytes
  REQUIRE(run_cli({"gen-expert", "--run", run.str(), "--config", cf, "--force"}) == 0);
  REQUIRE(run_cli({"train-bc", "--run", run.str(), "--config", cf, "--force"}) == 0);
  REQUIRE(run_cli({"rollout", "--run", run.str(), "--config", cf, "--force"}) == 0);
  REQUIRE(run_cli({"label", "--run", run.str(), "--config", cf, "--force"}) == 0);

  for (const auto& [name, bytes] : before) CHECK(slurp(run.dir / name) == bytes);
}

TEST_CASE("align without a BC checkpoint exits with the prerequisite code") {
  TempRun run("prereq");
  fs::path config = write_micro_config(run.dir);
  REQUIRE(run_cli({"gen-expert", "--run", run.str(), "--config", config.string()}) == 0);
  CHECK(run_cli({"align", "--run", run.str(), "--config", config.string()}) == 2);
}

TEST_CASE("config validation lists offending keys and exits 1") {
  TempRun run("badcfg");
  fs::path p = run.dir / "bad.json";
  {
    std::ofstream out(p);
    out << R"({"seeed": 1, "diffusion": {"horizonn": 3}})";
  }
  CHECK(run_cli({"gen-expert", "--run", run.str(), "--config", p.string()}) == 1);
}

TEST_CASE("config overrides work and change the fingerprint") {
  TempRun run("ovr");
  fs::path config = write_micro_config(run.dir);
  REQUIRE(run_cli({"gen-expert", "--run", run.str(), "--config", config.string(), "--set",
                   "data.expert_episodes=2"}) == 0);
  std::string resolved = slurp(run.dir / "config.resolved.json");
  CHECK(resolved.find("\"expert_episodes\": 2") != std::string::npos);
  CHECK(run_cli({"gen-expert", "--run", run.str(), "--config", config.string(), "--set",
                 "data.expert_episodes=bogus"}) == 1);
}

TEST_CASE("a held lock blocks a second writer") {
  TempRun run("lock");
  fs::path config = write_micro_config(run.dir);
  std::ofstream(run.dir / ".lock") << "";
  CHECK(run_cli({"gen-expert", "--run", run.str(), "--config", config.string()}) == 2);
}

TEST_CASE("report refuses mismatched fingerprints") {
  TempRun run("fpmix");
  fs::path config = write_micro_config(run.dir);
  REQUIRE(run_cli({"gen-expert", "--run", run.str(), "--config", config.string()}) == 0);
  // different effective config -> different fingerprint
  CHECK(run_cli({"report", "--run", run.str(), "--config", config.string(), "--set",
                 "seed=99"}) == 2);
  // matching config aggregates fine
  CHECK(run_cli({"report", "--run", run.str(), "--config", config.string()}) == 0);
}

TEST_CASE("unknown eval policy and missing run directory are usage errors") {
  TempRun run("usage");
  fs::path config = write_micro_config(run.dir);
  REQUIRE(run_cli({"gen-expert", "--run", run.str(), "--config", config.string()}) == 0);
  CHECK(run_cli({"eval", "--run", run.str(), "--config", config.string(), "--policy",
                 "bogus"}) == 1);
}
