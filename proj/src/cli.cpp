#include "fvla/cli.hpp"

#include <algorithm>
#include <cstdlib>
#include <ctime>
#include <iostream>
#include <set>
#include <thread>

#include "fvla/gradcheck.hpp"

namespace fvla {

namespace fs = std::filesystem;

namespace {

const std::set<std::string>& known_keys() {
  static const std::set<std::string> keys = {
      "run.task", "run.variant", "run.mode", "run.seed", "run.demos", "run.trials",
      "run.train_steps", "run.jobs", "run.run_id",
      "run.dataset_hash", "run.checkpoint_hash",  // emitted into manifests, ignored on read
      "paths.dataset", "paths.runs",
      "model.d_model", "model.d_act", "model.n_heads", "model.n_experts", "model.top_k",
      "model.mlp_expansion", "model.horizon", "model.aux_loss_coef", "model.grid", "model.patch",
      "model.n_views", "model.n_ctx_blocks", "model.n_instructions", "model.d_state",
      "model.action_width", "model.flow_steps", "model.d_action_store",
      "train.batch", "train.accum_steps", "train.lr_peak", "train.lr_floor",
      "train.lr_total_steps", "train.cosine", "train.clip",
      "sim.mouth_half_width", "sim.chamfer_depth", "sim.peg_half_width", "sim.peg_length",
      "sim.socket_depth", "sim.block_top_y", "sim.contact_stiffness", "sim.friction_mu",
      "sim.penetration_cap", "sim.max_step_xy", "sim.max_step_theta", "sim.max_steps", "sim.dt",
      "sim.torque_limit", "sim.workspace_half_width", "sim.socket_offset_range", "sim.spawn_x_range", "sim.spawn_y",
      "sim.anchor_stiffness", "sim.height_offset", "sim.geometry_scale", "sim.occlusion_x0",
      "sim.occlusion_x1", "sim.occlusion_y0", "sim.occlusion_y1", "sim.wipe_force_lo",
      "sim.wipe_force_hi", "sim.wipe_distance",
  };
  return keys;
}

std::string short_hash(const std::string& text) { return hash_bytes_hex(text).substr(0, 8); }

ChunkProvider expert_chunk_provider(const SimParams& params, SimTask task, bool privileged) {
  return [params, task, privileged](const Observation& obs, const WorldState& s) {
    return std::vector<Eigen::Vector4d>{scripted_expert(s, obs, privileged, params, task)};
  };
}

Episode episode_via_synchronize(const RolloutRecord& rec, int d_action_store) {
  SensorStreams streams;
  streams.instruction = static_cast<int>(rec.log.task);
  std::vector<double> ticks;
  for (const SimStep& s : rec.steps) {
    ticks.push_back(s.timestamp);
    streams.images.push_back({s.timestamp, s.obs.base_view, s.obs.wrist_view});
    streams.state.push_back({s.timestamp, s.obs.state});
    StampedVec w;
    w.t = s.timestamp;
    w.value = s.obs.wrench;
    streams.wrench.push_back(std::move(w));
    StampedVec a;
    a.t = s.timestamp;
    a.value = Eigen::VectorXd::Zero(d_action_store);
    a.value.head(4) = s.action;
    streams.action.push_back(std::move(a));
  }
  Episode ep;
  ep.steps = synchronize(streams, ticks);
  ep.manifest.set_int("episode.seed", static_cast<long long>(rec.log.seed));
  ep.manifest.set("episode.mode", mode_name(rec.log.mode));
  ep.manifest.set_int("episode.task", static_cast<int>(rec.log.task));
  ep.manifest.set_int("episode.success", rec.log.success ? 1 : 0);
  ep.manifest.set_int("episode.steps", rec.log.steps);
  ep.manifest.set("episode.failure_reason",
                  rec.log.failure_reason.empty() ? "none" : rec.log.failure_reason);
  return ep;
}

std::string role_label(TokenRole r) {
  return r == TokenRole::Force ? "force" : "visual-language";
}

void refuse_existing(const fs::path& p, bool force, const std::string& what) {
  if (!fs::exists(p)) return;
  if (!force) {
    throw DataError(what + " already exists at " + p.string() + " (use --force to overwrite)");
  }
  fs::remove_all(p);
}

}  // namespace

RunConfig RunConfig::from_kv(const KvText& kv) {
  for (const auto& [key, value] : kv.all()) {
    if (!known_keys().count(key)) throw ConfigError("unknown config key: " + key);
  }
  RunConfig c;
  c.task = kv.get_or("run.task", c.task);
  c.variant = kv.get_or("run.variant", c.variant);
  c.mode = kv.get_or("run.mode", c.mode);
  c.seed = static_cast<uint64_t>(kv.get_int_or("run.seed", 0));
  c.demos = static_cast<int>(kv.get_int_or("run.demos", c.demos));
  c.trials = static_cast<int>(kv.get_int_or("run.trials", c.trials));
  c.train_steps = kv.get_int_or("run.train_steps", c.train_steps);
  c.jobs = static_cast<int>(kv.get_int_or("run.jobs", c.jobs));
  c.run_id = kv.get_or("run.run_id", "");
  c.dataset_dir = kv.get_or("paths.dataset", c.dataset_dir.string());
  if (kv.has("paths.runs")) c.runs_dir = kv.get("paths.runs");

  PolicyConfig& p = c.policy;
  p.fusion.d_model = static_cast<int>(kv.get_int_or("model.d_model", p.fusion.d_model));
  p.fusion.d_act = static_cast<int>(kv.get_int_or("model.d_act", p.fusion.d_act));
  p.fusion.n_heads = static_cast<int>(kv.get_int_or("model.n_heads", p.fusion.n_heads));
  p.fusion.n_experts = static_cast<int>(kv.get_int_or("model.n_experts", p.fusion.n_experts));
  p.fusion.top_k = static_cast<int>(kv.get_int_or("model.top_k", p.fusion.top_k));
  p.fusion.mlp_expansion =
      static_cast<int>(kv.get_int_or("model.mlp_expansion", p.fusion.mlp_expansion));
  p.fusion.h_action = static_cast<int>(kv.get_int_or("model.horizon", p.fusion.h_action));
  p.fusion.aux_loss_coef = kv.get_double_or("model.aux_loss_coef", p.fusion.aux_loss_coef);
  p.grid = static_cast<int>(kv.get_int_or("model.grid", p.grid));
  p.patch = static_cast<int>(kv.get_int_or("model.patch", p.patch));
  p.n_views = static_cast<int>(kv.get_int_or("model.n_views", p.n_views));
  p.n_ctx_blocks = static_cast<int>(kv.get_int_or("model.n_ctx_blocks", p.n_ctx_blocks));
  p.n_instructions = static_cast<int>(kv.get_int_or("model.n_instructions", p.n_instructions));
  p.d_state = static_cast<int>(kv.get_int_or("model.d_state", p.d_state));
  p.action_width = static_cast<int>(kv.get_int_or("model.action_width", p.action_width));
  p.flow_steps = static_cast<int>(kv.get_int_or("model.flow_steps", p.flow_steps));
  c.d_action_store = static_cast<int>(kv.get_int_or("model.d_action_store", c.d_action_store));

  TrainConfig& t = c.train;
  t.batch = static_cast<int>(kv.get_int_or("train.batch", t.batch));
  t.accum_steps = static_cast<int>(kv.get_int_or("train.accum_steps", t.accum_steps));
  t.lr_peak = kv.get_double_or("train.lr_peak", t.lr_peak);
  t.lr_floor = kv.get_double_or("train.lr_floor", t.lr_floor);
  t.lr_total_steps = kv.get_int_or("train.lr_total_steps", t.lr_total_steps);
  t.cosine = kv.get_int_or("train.cosine", 0) != 0;
  t.clip = kv.get_double_or("train.clip", t.clip);

  SimParams& s = c.sim;
  s.socket_mouth_half_width = kv.get_double_or("sim.mouth_half_width", s.socket_mouth_half_width);
  s.chamfer_depth = kv.get_double_or("sim.chamfer_depth", s.chamfer_depth);
  s.peg_half_width = kv.get_double_or("sim.peg_half_width", s.peg_half_width);
  s.peg_length = kv.get_double_or("sim.peg_length", s.peg_length);
  s.socket_depth = kv.get_double_or("sim.socket_depth", s.socket_depth);
  s.block_top_y = kv.get_double_or("sim.block_top_y", s.block_top_y);
  s.contact_stiffness = kv.get_double_or("sim.contact_stiffness", s.contact_stiffness);
  s.friction_mu = kv.get_double_or("sim.friction_mu", s.friction_mu);
  s.penetration_cap = kv.get_double_or("sim.penetration_cap", s.penetration_cap);
  s.max_step_xy = kv.get_double_or("sim.max_step_xy", s.max_step_xy);
  s.max_step_theta = kv.get_double_or("sim.max_step_theta", s.max_step_theta);
  s.max_steps = static_cast<int>(kv.get_int_or("sim.max_steps", s.max_steps));
  s.dt = kv.get_double_or("sim.dt", s.dt);
  s.torque_limit = kv.get_double_or("sim.torque_limit", s.torque_limit);
  s.workspace_half_width = kv.get_double_or("sim.workspace_half_width", s.workspace_half_width);
  s.socket_offset_range = kv.get_double_or("sim.socket_offset_range", s.socket_offset_range);
  s.spawn_x_range = kv.get_double_or("sim.spawn_x_range", s.spawn_x_range);
  s.spawn_y = kv.get_double_or("sim.spawn_y", s.spawn_y);
  s.anchor_stiffness = kv.get_double_or("sim.anchor_stiffness", s.anchor_stiffness);
  s.height_offset = kv.get_double_or("sim.height_offset", s.height_offset);
  s.geometry_scale = kv.get_double_or("sim.geometry_scale", s.geometry_scale);
  s.occlusion_x0 = kv.get_double_or("sim.occlusion_x0", s.occlusion_x0);
  s.occlusion_x1 = kv.get_double_or("sim.occlusion_x1", s.occlusion_x1);
  s.occlusion_y0 = kv.get_double_or("sim.occlusion_y0", s.occlusion_y0);
  s.occlusion_y1 = kv.get_double_or("sim.occlusion_y1", s.occlusion_y1);
  s.wipe_force_lo = kv.get_double_or("sim.wipe_force_lo", s.wipe_force_lo);
  s.wipe_force_hi = kv.get_double_or("sim.wipe_force_hi", s.wipe_force_hi);
  s.wipe_distance = kv.get_double_or("sim.wipe_distance", s.wipe_distance);
  s.grid = c.policy.grid;
  s.d_state = c.policy.d_state;
  return c;
}

KvText RunConfig::to_kv() const {
  KvText kv;
  kv.set("run.task", task);
  kv.set("run.variant", variant);
  kv.set("run.mode", mode);
  kv.set_int("run.seed", static_cast<long long>(seed));
  kv.set_int("run.demos", demos);
  kv.set_int("run.trials", trials);
  kv.set_int("run.train_steps", train_steps);
  kv.set_int("run.jobs", jobs);
  if (!run_id.empty()) kv.set("run.run_id", run_id);
  kv.set("paths.dataset", dataset_dir.string());
  if (!runs_dir.empty()) kv.set("paths.runs", runs_dir.string());
  kv.set_int("model.d_model", policy.fusion.d_model);
  kv.set_int("model.d_act", policy.fusion.d_act);
  kv.set_int("model.n_heads", policy.fusion.n_heads);
  kv.set_int("model.n_experts", policy.fusion.n_experts);
  kv.set_int("model.top_k", policy.fusion.top_k);
  kv.set_int("model.mlp_expansion", policy.fusion.mlp_expansion);
  kv.set_int("model.horizon", policy.fusion.h_action);
  kv.set_double("model.aux_loss_coef", policy.fusion.aux_loss_coef);
  kv.set_int("model.grid", policy.grid);
  kv.set_int("model.patch", policy.patch);
  kv.set_int("model.n_views", policy.n_views);
  kv.set_int("model.n_ctx_blocks", policy.n_ctx_blocks);
  kv.set_int("model.n_instructions", policy.n_instructions);
  kv.set_int("model.d_state", policy.d_state);
  kv.set_int("model.action_width", policy.action_width);
  kv.set_int("model.flow_steps", policy.flow_steps);
  kv.set_int("model.d_action_store", d_action_store);
  kv.set_int("train.batch", train.batch);
  kv.set_int("train.accum_steps", train.accum_steps);
  kv.set_double("train.lr_peak", train.lr_peak);
  kv.set_double("train.lr_floor", train.lr_floor);
  kv.set_int("train.lr_total_steps", train.lr_total_steps);
  kv.set_int("train.cosine", train.cosine ? 1 : 0);
  kv.set_double("train.clip", train.clip);
  kv.set_double("sim.mouth_half_width", sim.socket_mouth_half_width);
  kv.set_double("sim.chamfer_depth", sim.chamfer_depth);
  kv.set_double("sim.peg_half_width", sim.peg_half_width);
  kv.set_double("sim.peg_length", sim.peg_length);
  kv.set_double("sim.socket_depth", sim.socket_depth);
  kv.set_double("sim.block_top_y", sim.block_top_y);
  kv.set_double("sim.contact_stiffness", sim.contact_stiffness);
  kv.set_double("sim.friction_mu", sim.friction_mu);
  kv.set_double("sim.penetration_cap", sim.penetration_cap);
  kv.set_double("sim.max_step_xy", sim.max_step_xy);
  kv.set_double("sim.max_step_theta", sim.max_step_theta);
  kv.set_int("sim.max_steps", sim.max_steps);
  kv.set_double("sim.dt", sim.dt);
  kv.set_double("sim.torque_limit", sim.torque_limit);
  kv.set_double("sim.workspace_half_width", sim.workspace_half_width);
  kv.set_double("sim.socket_offset_range", sim.socket_offset_range);
  kv.set_double("sim.spawn_x_range", sim.spawn_x_range);
  kv.set_double("sim.spawn_y", sim.spawn_y);
  kv.set_double("sim.anchor_stiffness", sim.anchor_stiffness);
  kv.set_double("sim.height_offset", sim.height_offset);
  kv.set_double("sim.geometry_scale", sim.geometry_scale);
  kv.set_double("sim.occlusion_x0", sim.occlusion_x0);
  kv.set_double("sim.occlusion_x1", sim.occlusion_x1);
  kv.set_double("sim.occlusion_y0", sim.occlusion_y0);
  kv.set_double("sim.occlusion_y1", sim.occlusion_y1);
  kv.set_double("sim.wipe_force_lo", sim.wipe_force_lo);
  kv.set_double("sim.wipe_force_hi", sim.wipe_force_hi);
  kv.set_double("sim.wipe_distance", sim.wipe_distance);
  return kv;
}

fs::path RunConfig::runs_root() const {
  if (!runs_dir.empty()) return runs_dir;
  if (const char* env = std::getenv("FORCEVLA_RUNS_DIR")) return fs::path(env);
  return fs::path("runs");
}

std::string RunConfig::effective_run_id() const {
  if (!run_id.empty()) return run_id;
  std::time_t now = std::time(nullptr);
  std::tm tm_utc;
  gmtime_r(&now, &tm_utc);
  char stamp[32];
  std::strftime(stamp, sizeof(stamp), "%Y%m%d_%H%M%S", &tm_utc);
  return std::string(stamp) + "_" + short_hash(to_kv().serialize());
}

void RunConfig::validate() const {
  task_from_name(task);
  variant_from_name(variant);
  mode_from_name(mode);
  policy.validate();
  if (demos < 0) throw ConfigError("demos must be >= 0");
  if (trials < 1) throw ConfigError("trials must be >= 1");
  if (train_steps < 0) throw ConfigError("train_steps must be >= 0");
  if (jobs < 1) throw ConfigError("jobs must be >= 1");
  if (d_action_store < 4) throw ConfigError("d_action_store must be >= 4");
}

fs::path cmd_collect(const RunConfig& cfg) {
  cfg.validate();
  const SimTask task = task_from_name(cfg.task);
  const PerturbationMode mode = mode_from_name(cfg.mode);
  const fs::path task_dir = cfg.dataset_dir / cfg.task;
  if (fs::exists(task_dir) && !fs::is_empty(task_dir) && !cfg.force) {
    throw DataError("dataset task directory already exists at " + task_dir.string() +
                    " (use --force to overwrite)");
  }
  fs::remove_all(task_dir);
  fs::create_directories(task_dir);

  // Demonstrations come from the force-reactive expert; it loses its
  // privileged view of the slot position under visual occlusion.
  const bool privileged = mode != PerturbationMode::Occlusion;
  const ChunkProvider provider = expert_chunk_provider(cfg.sim, task, privileged);

  int collected = 0, attempts = 0, successes = 0;
  const int max_attempts = std::max(cfg.demos * 4, cfg.demos + 20);
  while (collected < cfg.demos && attempts < max_attempts) {
    InsertionEnv env(cfg.sim, mode, task, cfg.seed + static_cast<uint64_t>(attempts));
    RolloutRecord rec = rollout(std::move(env), provider);
    ++attempts;
    if (!rec.log.success) continue;
    ++successes;
    Episode ep = episode_via_synchronize(rec, cfg.d_action_store);
    char name[32];
    std::snprintf(name, sizeof(name), "ep%04d.fvd", collected);
    save_episode(task_dir / name, ep);
    ++collected;
  }
  if (cfg.demos > 0) {
    const double rate = attempts > 0 ? static_cast<double>(successes) / attempts : 0.0;
    if (rate < 0.5) {
      throw DataError("expert success rate " + std::to_string(100.0 * rate) +
                      "% is below 50%; the task geometry looks misconfigured");
    }
    if (collected < cfg.demos) {
      throw DataError("collected only " + std::to_string(collected) + "/" +
                      std::to_string(cfg.demos) + " demos in " + std::to_string(attempts) +
                      " attempts");
    }
  }
  write_dataset_manifest(cfg.dataset_dir);
  return cfg.dataset_dir;
}

fs::path cmd_train(const RunConfig& cfg) {
  cfg.validate();
  if (!fs::exists(cfg.dataset_dir / "manifest.txt")) {
    throw DataError("dataset not found at " + cfg.dataset_dir.string() +
                    "; run `forcevla collect` first");
  }
  RunConfig c = cfg;
  c.run_id = cfg.effective_run_id();
  const fs::path dir = c.run_dir();
  if (fs::exists(dir / "checkpoint.fvla") && !c.force) {
    throw DataError("run " + c.run_id + " already has a checkpoint at " + dir.string() +
                    " (use --force to overwrite)");
  }
  fs::create_directories(dir);

  DatasetInfo info = read_dataset_manifest(c.dataset_dir);
  std::vector<Episode> episodes = load_dataset(c.dataset_dir);
  if (episodes.empty()) throw DataError("dataset at " + c.dataset_dir.string() + " is empty");
  NormStats stats = compute_norm_stats(episodes);

  PolicyConfig pc = c.policy;
  pc.variant = variant_from_name(c.variant);
  PolicyModel model(pc, stats, c.seed);

  TrainConfig tc = c.train;
  tc.steps = c.train_steps;
  tc.seed = c.seed;
  TrainResult result = train_policy(model, episodes, tc);

  std::string csv = "step,loss,lr,grad_norm\n";
  for (const auto& m : result.metrics) {
    csv += std::to_string(m.step) + "," + format_double(m.loss) + "," + format_double(m.lr) +
           "," + format_double(m.grad_norm) + "\n";
  }
  write_text_file(dir / "metrics.csv", csv);
  model.save_checkpoint(dir / "checkpoint.fvla");

  KvText manifest = c.to_kv();
  manifest.set("run.run_id", c.run_id);
  manifest.set("run.dataset_hash", info.hash);
  manifest.set("run.checkpoint_hash", hash_file_hex(dir / "checkpoint.fvla"));
  manifest.save(dir / "manifest.txt");
  return dir;
}

fs::path cmd_eval(const RunConfig& cfg, const std::string& run_id) {
  cfg.validate();
  const fs::path dir = cfg.runs_root() / run_id;
  const fs::path ckpt = dir / "checkpoint.fvla";
  if (!fs::exists(ckpt)) throw DataError("checkpoint not found at " + ckpt.string());
  PolicyModel model = PolicyModel::load_checkpoint(ckpt);
  if (model.config().variant != variant_from_name(cfg.variant)) {
    throw ConfigError("requested variant " + cfg.variant + " but checkpoint holds " +
                      variant_name(model.config().variant));
  }

  const SimTask task = task_from_name(cfg.task);
  const PerturbationMode mode = mode_from_name(cfg.mode);
  const fs::path eval_dir =
      dir / ("eval_" + cfg.mode + "_seed" + std::to_string(cfg.seed));
  refuse_existing(eval_dir, cfg.force, "evaluation directory");
  fs::create_directories(eval_dir);

  struct EpisodeResult {
    EpisodeLog log;
    std::vector<TraceRecord> trace;
  };
  std::vector<EpisodeResult> results(cfg.trials);

  auto run_episode = [&](int i) {
    InsertionEnv env(cfg.sim, mode, task, cfg.seed + static_cast<uint64_t>(i));
    Rng policy_rng(cfg.seed * 1000003ull + 7777ull + static_cast<uint64_t>(i));
    std::vector<TraceRecord>& trace = results[i].trace;
    const std::string ep_label = "ep" + std::to_string(i);
    const double dt = cfg.sim.dt;
    ChunkProvider provider = [&](const Observation& obs, const WorldState& s) {
      SampledChunk chunk = model.sample_actions(obs, model.config().flow_steps, policy_rng);
      if (chunk.router) {
        const long long tick = std::llround(s.time / dt);
        for (int t = 0; t < static_cast<int>(chunk.router->selected.size()); ++t) {
          TraceRecord rec;
          rec.episode = ep_label;
          rec.timestep = tick;
          rec.token = t;
          rec.role = role_label(chunk.roles[t]);
          rec.selected = chunk.router->selected[t];
          for (int e = 0; e < chunk.router->gate_probs.cols(); ++e) {
            rec.probs.push_back(chunk.router->gate_probs.at(t, e));
          }
          trace.push_back(std::move(rec));
        }
      }
      std::vector<Eigen::Vector4d> targets;
      for (int h = 0; h < chunk.targets.rows(); ++h) {
        targets.emplace_back(chunk.targets(h, 0), chunk.targets(h, 1), chunk.targets(h, 2),
                             chunk.targets(h, 3));
      }
      return targets;
    };
    results[i].log = rollout(std::move(env), provider).log;
  };

  if (cfg.jobs <= 1) {
    for (int i = 0; i < cfg.trials; ++i) run_episode(i);
  } else {
    for (int base = 0; base < cfg.trials; base += cfg.jobs) {
      std::vector<std::thread> pool;
      for (int i = base; i < std::min(cfg.trials, base + cfg.jobs); ++i) {
        pool.emplace_back(run_episode, i);
      }
      for (auto& th : pool) th.join();
    }
  }

  std::string csv = "episode,seed,mode,success,steps,failure_reason\n";
  int successes = 0;
  RouterTrace trace;
  trace.n_experts = model.config().fusion.n_experts;
  for (int i = 0; i < cfg.trials; ++i) {
    const EpisodeLog& log = results[i].log;
    successes += log.success ? 1 : 0;
    csv += "ep" + std::to_string(i) + "," + std::to_string(log.seed) + "," + cfg.mode + "," +
           (log.success ? "1" : "0") + "," + std::to_string(log.steps) + "," +
           (log.failure_reason.empty() ? "none" : log.failure_reason) + "\n";
    for (auto& rec : results[i].trace) trace.records.push_back(std::move(rec));
  }
  write_text_file(eval_dir / "episodes.csv", csv);
  write_trace_csv(eval_dir / "traces.csv", trace);

  KvText summary;
  summary.set("eval.mode", cfg.mode);
  summary.set("eval.task", cfg.task);
  summary.set_int("eval.seed", static_cast<long long>(cfg.seed));
  summary.set_int("eval.trials", cfg.trials);
  summary.set_int("eval.successes", successes);
  summary.save(eval_dir / "summary.txt");
  return eval_dir;
}

namespace {

const std::vector<std::string>& canonical_variants() {
  static const std::vector<std::string> v = {"no_force",       "force_concat_state",
                                             "linear_before_vlm", "moe_before_vlm",
                                             "concat_after_vlm",  "fvlmoe"};
  return v;
}

const std::vector<std::string>& canonical_modes() {
  static const std::vector<std::string> m = {"nominal", "visual_occlusion", "unstable_socket",
                                             "height_gen", "object_gen"};
  return m;
}

}  // namespace

fs::path cmd_analyze(const RunConfig& cfg, const std::vector<std::string>& run_ids) {
  if (run_ids.empty()) throw ConfigError("analyze: no run ids given");
  const fs::path root = cfg.runs_root();
  const fs::path out = root / run_ids.front() / "analysis";
  refuse_existing(out, cfg.force, "analysis directory");
  fs::create_directories(out);

  std::vector<EvalRun> entries;
  std::set<std::string> variants_seen, modes_seen;
  for (const auto& id : run_ids) {
    const fs::path run_dir = root / id;
    if (!fs::exists(run_dir / "manifest.txt")) {
      throw DataError("no run manifest at " + (run_dir / "manifest.txt").string());
    }
    KvText manifest = KvText::load(run_dir / "manifest.txt");
    const std::string variant = manifest.get("run.variant");
    std::vector<fs::path> eval_dirs;
    for (const auto& entry : fs::directory_iterator(run_dir)) {
      if (entry.is_directory() && entry.path().filename().string().rfind("eval_", 0) == 0) {
        eval_dirs.push_back(entry.path());
      }
    }
    std::sort(eval_dirs.begin(), eval_dirs.end());
    for (const auto& ed : eval_dirs) {
      KvText summary = KvText::load(ed / "summary.txt");
      EvalRun run;
      run.variant = variant;
      run.mode = summary.get("eval.mode");
      run.seed = static_cast<uint64_t>(summary.get_int("eval.seed"));
      run.successes = static_cast<int>(summary.get_int("eval.successes"));
      run.trials = static_cast<int>(summary.get_int("eval.trials"));
      entries.push_back(run);
      variants_seen.insert(run.variant);
      modes_seen.insert(run.mode);

      const fs::path trace_path = ed / "traces.csv";
      if (fs::exists(trace_path)) {
        RouterTrace trace = read_trace_csv(trace_path);
        if (!trace.records.empty()) {
          LoadCurve curve = percentile_load(trace, summary.get("eval.task"));
          write_curve_csv(out / ("load_" + id + "_" + ed.filename().string() + ".csv"), curve);
        }
      }
    }
  }
  if (entries.empty()) throw DataError("analyze: no evaluation results found in the given runs");

  std::vector<std::string> variant_order, mode_order;
  for (const auto& v : canonical_variants()) {
    if (variants_seen.count(v)) variant_order.push_back(v);
  }
  for (const auto& m : canonical_modes()) {
    if (modes_seen.count(m)) mode_order.push_back(m);
  }
  EvalTable table = aggregate_eval(entries, variant_order, mode_order);
  write_text_file(out / "success_table.csv", eval_table_csv(table));
  return out;
}

fs::path cmd_plot(const RunConfig& cfg, const std::string& run_id) {
  const fs::path analysis = cfg.runs_root() / run_id / "analysis";
  if (!fs::exists(analysis)) {
    throw DataError("no analysis directory at " + analysis.string() + "; run analyze first");
  }
  std::vector<fs::path> curves;
  for (const auto& entry : fs::directory_iterator(analysis)) {
    const std::string name = entry.path().filename().string();
    if (name.rfind("load_", 0) == 0 && entry.path().extension() == ".csv") {
      curves.push_back(entry.path());
    }
  }
  if (curves.empty()) throw DataError("no load-curve CSVs under " + analysis.string());
  std::sort(curves.begin(), curves.end());
  for (const auto& path : curves) {
    fs::path svg = path;
    svg.replace_extension(".svg");
    if (fs::exists(svg) && !cfg.force) {
      throw DataError("plot output already exists at " + svg.string() +
                      " (use --force to overwrite)");
    }
    LoadCurve curve = read_curve_csv(path);
    curve.task_label = path.stem().string();
    write_curve_svg(svg, curve);
  }
  return analysis;
}

double cmd_gradcheck(int prim_trials, int e2e_seeds, uint64_t seed, std::ostream& out) {
  GradCheckReport prim = primitive_gradcheck(prim_trials, seed);
  out << "primitive ops: " << prim.checks << " checks, max rel err " << prim.max_rel_err
      << " (worst " << prim.worst << ") -> " << (prim.ok(1e-5) ? "pass" : "FAIL") << "\n";
  GradCheckReport e2e = policy_e2e_gradcheck(e2e_seeds, 2, seed + 1);
  out << "fusion + flow-loss graph: " << e2e.checks << " checks, max rel err " << e2e.max_rel_err
      << " (worst " << e2e.worst << ") -> " << (e2e.ok(1e-4) ? "pass" : "FAIL") << "\n";
  if (!prim.ok(1e-5) || !e2e.ok(1e-4)) {
    throw NumericalError("gradient check failed");
  }
  return std::max(prim.max_rel_err, e2e.max_rel_err);
}

}  // namespace fvla
