#include <doctest.h>

#include <cstdlib>
#include <filesystem>
#include <sstream>

#include "fvla/cli.hpp"

using namespace fvla;
namespace fs = std::filesystem;

namespace {

// Small-but-real pipeline configuration for command tests.
RunConfig tiny_run_config(const fs::path& work) {
  RunConfig cfg;
  cfg.task = "insert";
  cfg.variant = "fvlmoe";
  cfg.mode = "nominal";
  cfg.seed = 11;
  cfg.demos = 6;
  cfg.trials = 3;
  cfg.train_steps = 25;
  cfg.dataset_dir = work / "dataset";
  cfg.runs_dir = work / "runs";
  cfg.policy.fusion.d_model = 16;
  cfg.policy.fusion.d_act = 8;
  cfg.policy.fusion.n_heads = 2;
  cfg.policy.fusion.n_experts = 3;
  cfg.policy.fusion.h_action = 2;
  cfg.policy.grid = 8;
  cfg.policy.patch = 4;
  cfg.policy.n_ctx_blocks = 1;
  cfg.policy.action_width = 4;
  cfg.policy.flow_steps = 4;
  cfg.train.batch = 2;
  cfg.train.lr_peak = 1e-3;
  cfg.train.lr_floor = 1e-4;
  cfg.train.lr_total_steps = 25;
  cfg.sim.grid = 8;
  cfg.sim.d_state = 32;
  return cfg;
}

fs::path fresh_workdir(const std::string& name) {
  fs::path dir = fs::temp_directory_path() / name;
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

}  // namespace

TEST_CASE("run config round-trips through kv text and rejects unknown keys") {
  RunConfig cfg = tiny_run_config(fs::temp_directory_path() / "fvla_kv");
  KvText kv = cfg.to_kv();
  RunConfig back = RunConfig::from_kv(kv);
  CHECK(back.variant == cfg.variant);
  CHECK(back.demos == cfg.demos);
  CHECK(back.policy.fusion.d_model == 16);
  CHECK(back.policy.action_width == 4);
  CHECK(back.sim.grid == 8);  // sim grid follows the model grid
  CHECK(back.train.lr_peak == cfg.train.lr_peak);

  KvText bad = kv;
  bad.set("run.typo", "1");
  CHECK_THROWS_AS(RunConfig::from_kv(bad), ConfigError);
}

TEST_CASE("collect writes successful demos and a manifest; zero demos is fine") {
  fs::path work = fresh_workdir("fvla_cli_collect");
  RunConfig cfg = tiny_run_config(work);

  SUBCASE("normal collection") {
    cmd_collect(cfg);
    DatasetInfo info = read_dataset_manifest(cfg.dataset_dir);
    CHECK(info.count == 6);
    auto episodes = load_dataset(cfg.dataset_dir);
    REQUIRE(episodes.size() == 6);
    for (const auto& ep : episodes) {
      CHECK(ep.manifest.get_int("episode.success") == 1);  // successes only
      CHECK(ep.steps[0].action.size() == 32);
    }
    std::string h1 = info.hash;

    // Same seed reproduces the same dataset hash.
    cfg.force = true;
    cmd_collect(cfg);
    CHECK(read_dataset_manifest(cfg.dataset_dir).hash == h1);

    // Refuses to overwrite without force.
    cfg.force = false;
    CHECK_THROWS_AS(cmd_collect(cfg), DataError);
  }

  SUBCASE("zero demos") {
    cfg.demos = 0;
    cfg.dataset_dir = work / "empty_ds";
    cmd_collect(cfg);
    CHECK(read_dataset_manifest(cfg.dataset_dir).count == 0);
  }
}

TEST_CASE("train / eval / analyze / plot pipeline on a tiny run") {
  fs::path work = fresh_workdir("fvla_cli_pipeline");
  RunConfig cfg = tiny_run_config(work);
  cmd_collect(cfg);

  cfg.run_id = "testrun";
  fs::path run_dir = cmd_train(cfg);
  CHECK(fs::exists(run_dir / "checkpoint.fvla"));
  CHECK(fs::exists(run_dir / "metrics.csv"));
  std::string metrics = read_text_file(run_dir / "metrics.csv");
  CHECK(metrics.rfind("step,loss,lr,grad_norm\n", 0) == 0);
  int lines = 0;
  for (char c : metrics) lines += c == '\n' ? 1 : 0;
  CHECK(lines == 26);  // header + 25 steps

  KvText manifest = KvText::load(run_dir / "manifest.txt");
  CHECK(manifest.get("run.variant") == "fvlmoe");
  CHECK(manifest.has("run.dataset_hash"));
  CHECK(manifest.has("run.checkpoint_hash"));

  SUBCASE("idempotency: training the same run id again refuses without force") {
    CHECK_THROWS_AS(cmd_train(cfg), DataError);
    cfg.force = true;
    CHECK_NOTHROW(cmd_train(cfg));
    cfg.force = false;
  }

  SUBCASE("eval, analyze, plot") {
    RunConfig ev = cfg;
    ev.seed = 900;
    ev.trials = 3;
    fs::path eval_dir = cmd_eval(ev, "testrun");
    std::string episodes = read_text_file(eval_dir / "episodes.csv");
    CHECK(episodes.rfind("episode,seed,mode,success,steps,failure_reason\n", 0) == 0);
    int ep_lines = -1;  // exclude header
    for (char c : episodes) ep_lines += c == '\n' ? 1 : 0;
    CHECK(ep_lines == 3);
    CHECK(fs::exists(eval_dir / "traces.csv"));
    KvText summary = KvText::load(eval_dir / "summary.txt");
    CHECK(summary.get_int("eval.trials") == 3);

    SUBCASE("variant mismatch is rejected") {
      RunConfig wrong = ev;
      wrong.variant = "no_force";
      wrong.force = true;
      CHECK_THROWS_AS(cmd_eval(wrong, "testrun"), ConfigError);
    }

    SUBCASE("analysis emits the success table and router curves, then plots") {
      fs::path analysis = cmd_analyze(ev, {"testrun"});
      CHECK(fs::exists(analysis / "success_table.csv"));
      std::string table = read_text_file(analysis / "success_table.csv");
      CHECK(table.find("fvlmoe") != std::string::npos);
      CHECK(table.find("nominal") != std::string::npos);

      bool found_curve = false;
      for (const auto& entry : fs::directory_iterator(analysis)) {
        if (entry.path().filename().string().rfind("load_", 0) == 0) found_curve = true;
      }
      CHECK(found_curve);

      cmd_plot(ev, "testrun");
      int svgs = 0;
      for (const auto& entry : fs::directory_iterator(analysis)) {
        if (entry.path().extension() == ".svg") {
          ++svgs;
          std::string svg = read_text_file(entry.path());
          size_t polylines = 0, pos = 0;
          while ((pos = svg.find("<polyline", pos)) != std::string::npos) {
            ++polylines;
            pos += 9;
          }
          CHECK(polylines == 3);  // n_experts
        }
      }
      CHECK(svgs >= 1);
    }
  }
}

TEST_CASE("train without a dataset reports the missing path") {
  fs::path work = fresh_workdir("fvla_cli_nodata");
  RunConfig cfg = tiny_run_config(work);
  try {
    cmd_train(cfg);
    FAIL("expected DataError");
  } catch (const DataError& e) {
    CHECK(std::string(e.what()).find(cfg.dataset_dir.string()) != std::string::npos);
  }
}

TEST_CASE("gradcheck command reports both suites") {
  std::ostringstream out;
  double worst = cmd_gradcheck(3, 1, 777, out);
  CHECK(worst <= 1e-4);
  std::string text = out.str();
  CHECK(text.find("primitive ops") != std::string::npos);
  CHECK(text.find("fusion + flow-loss graph") != std::string::npos);
  CHECK(text.find("pass") != std::string::npos);
}

#ifdef FORCEVLA_BIN
TEST_CASE("binary exit codes follow the contract") {
  fs::path work = fresh_workdir("fvla_cli_bin");
  std::string bin = FORCEVLA_BIN;
  auto run = [&](const std::string& args) {
    std::string cmd = bin + " " + args + " >/dev/null 2>&1";
    int rc = std::system(cmd.c_str());
    return WEXITSTATUS(rc);
  };
  CHECK(run("collect --mode zero_gravity --dataset " + (work / "d").string()) == kExitConfig);
  CHECK(run("train --dataset " + (work / "missing").string() + " --runs-dir " +
            (work / "runs").string()) == kExitData);
  CHECK(run("gradcheck --trials 2 --seeds 1") == kExitOk);
}
#endif
