#include <CLI11.hpp>
#include <iostream>

#include "fvla/cli.hpp"

namespace {

using fvla::RunConfig;

struct CommonOpts {
  std::string config_path;
  std::string runs_dir;
  std::string dataset;
  std::string task, variant, mode, run_id;
  long long seed = -1;
  int demos = -1, trials = -1, jobs = -1;
  long long steps = -1;
  bool force = false;
};

void add_common(CLI::App* cmd, CommonOpts& o) {
  cmd->add_option("--config", o.config_path, "key = value config file");
  cmd->add_option("--runs-dir", o.runs_dir, "runs root (default $FORCEVLA_RUNS_DIR or ./runs)");
  cmd->add_option("--dataset", o.dataset, "dataset directory");
  cmd->add_option("--task", o.task, "task: insert or wipe");
  cmd->add_option("--variant", o.variant, "policy variant");
  cmd->add_option("--mode", o.mode,
                  "perturbation mode: nominal, visual_occlusion, unstable_socket, height_gen, "
                  "object_gen");
  cmd->add_option("--run-id", o.run_id, "run identifier");
  cmd->add_option("--seed", o.seed, "base random seed");
  cmd->add_option("--demos", o.demos, "expert demonstrations to collect");
  cmd->add_option("--trials", o.trials, "evaluation episodes");
  cmd->add_option("--steps", o.steps, "training steps");
  cmd->add_option("--jobs", o.jobs, "parallelism across independent episodes");
  cmd->add_flag("--force", o.force, "overwrite existing outputs");
}

RunConfig build_config(const CommonOpts& o, const std::string& manifest_base = "") {
  fvla::KvText kv;
  if (!manifest_base.empty()) {
    kv = fvla::KvText::load(manifest_base);
  }
  if (!o.config_path.empty()) {
    kv = fvla::KvText::load(o.config_path);
  }
  RunConfig cfg = RunConfig::from_kv(kv);
  if (!o.runs_dir.empty()) cfg.runs_dir = o.runs_dir;
  if (!o.dataset.empty()) cfg.dataset_dir = o.dataset;
  if (!o.task.empty()) cfg.task = o.task;
  if (!o.variant.empty()) cfg.variant = o.variant;
  if (!o.mode.empty()) cfg.mode = o.mode;
  if (!o.run_id.empty()) cfg.run_id = o.run_id;
  if (o.seed >= 0) cfg.seed = static_cast<uint64_t>(o.seed);
  if (o.demos >= 0) cfg.demos = o.demos;
  if (o.trials >= 0) cfg.trials = o.trials;
  if (o.steps >= 0) cfg.train_steps = o.steps;
  if (o.jobs >= 0) cfg.jobs = o.jobs;
  cfg.force = o.force;
  return cfg;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"forcevla: contact-rich insertion pipeline (collect / train / eval / analyze / "
               "plot / gradcheck)"};
  app.require_subcommand(1);

  CommonOpts collect_o, train_o, eval_o, analyze_o, plot_o;
  std::string analyze_runs;
  int gc_trials = 100, gc_seeds = 20;
  long long gc_seed = 12345;

  CLI::App* collect = app.add_subcommand("collect", "record scripted-expert demonstrations");
  add_common(collect, collect_o);
  CLI::App* train = app.add_subcommand("train", "train a policy variant on a dataset");
  add_common(train, train_o);
  CLI::App* eval_cmd = app.add_subcommand("eval", "evaluate a trained checkpoint");
  add_common(eval_cmd, eval_o);
  CLI::App* analyze = app.add_subcommand("analyze", "success table + router-load curves");
  add_common(analyze, analyze_o);
  analyze->add_option("--runs", analyze_runs, "comma-separated run ids")->required();
  CLI::App* plot = app.add_subcommand("plot", "render SVG plots for analysis curves");
  add_common(plot, plot_o);
  CLI::App* gradcheck = app.add_subcommand("gradcheck", "finite-difference gradient suites");
  gradcheck->add_option("--trials", gc_trials, "trials per primitive op");
  gradcheck->add_option("--seeds", gc_seeds, "seeds for the end-to-end graph");
  gradcheck->add_option("--seed", gc_seed, "base seed");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    int rc = app.exit(e);
    return rc == 0 ? 0 : fvla::kExitConfig;
  }

  try {
    if (collect->parsed()) {
      RunConfig cfg = build_config(collect_o);
      auto dir = fvla::cmd_collect(cfg);
      std::cout << "dataset written to " << dir.string() << "\n";
    } else if (train->parsed()) {
      RunConfig cfg = build_config(train_o);
      auto dir = fvla::cmd_train(cfg);
      std::cout << "run written to " << dir.string() << "\n";
    } else if (eval_cmd->parsed()) {
      if (eval_o.run_id.empty()) throw fvla::ConfigError("eval requires --run-id");
      RunConfig probe = build_config(eval_o);
      std::filesystem::path manifest = probe.runs_root() / eval_o.run_id / "manifest.txt";
      std::string base = std::filesystem::exists(manifest) ? manifest.string() : "";
      RunConfig cfg = build_config(eval_o, base);
      auto dir = fvla::cmd_eval(cfg, eval_o.run_id);
      std::cout << "evaluation written to " << dir.string() << "\n";
    } else if (analyze->parsed()) {
      RunConfig cfg = build_config(analyze_o);
      std::vector<std::string> ids;
      std::string cur;
      for (char c : analyze_runs) {
        if (c == ',') {
          if (!cur.empty()) ids.push_back(cur);
          cur.clear();
        } else {
          cur += c;
        }
      }
      if (!cur.empty()) ids.push_back(cur);
      auto dir = fvla::cmd_analyze(cfg, ids);
      std::cout << "analysis written to " << dir.string() << "\n";
    } else if (plot->parsed()) {
      if (plot_o.run_id.empty()) throw fvla::ConfigError("plot requires --run-id");
      RunConfig cfg = build_config(plot_o);
      auto dir = fvla::cmd_plot(cfg, plot_o.run_id);
      std::cout << "plots written to " << dir.string() << "\n";
    } else if (gradcheck->parsed()) {
      fvla::cmd_gradcheck(gc_trials, gc_seeds, static_cast<uint64_t>(gc_seed), std::cout);
    }
  } catch (const fvla::ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return fvla::kExitConfig;
  } catch (const fvla::ShapeError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return fvla::kExitConfig;
  } catch (const fvla::DataError& e) {
    std::cerr << "data error: " << e.what() << "\n";
    return fvla::kExitData;
  } catch (const fvla::NumericalError& e) {
    std::cerr << "numerical failure: " << e.what() << "\n";
    return fvla::kExitNumerical;
  } catch (const fvla::GraphError& e) {
    std::cerr << "numerical failure: " << e.what() << "\n";
    return fvla::kExitNumerical;
  }
  return fvla::kExitOk;
}
