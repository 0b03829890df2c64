#include "fvla/dataset.hpp"

#include <algorithm>
#include <cmath>

namespace fvla {

namespace fs = std::filesystem;

namespace {

// Index of the record to hold at `tick`, or -1 when none qualifies.
template <typename Rec>
int held_index(const std::vector<Rec>& stream, double tick, SyncRule rule) {
  int best = -1;
  for (size_t i = 0; i < stream.size(); ++i) {
    if (stream[i].t <= tick) {
      best = static_cast<int>(i);
    } else {
      break;
    }
  }
  if (rule == SyncRule::Nearest) {
    int after = best + 1;
    if (after < static_cast<int>(stream.size())) {
      if (best < 0 || std::abs(stream[after].t - tick) < std::abs(stream[best].t - tick)) {
        // Nearest may look forward, but never past the stream's start.
        best = after;
      }
    }
  }
  return best;
}

}  // namespace

std::vector<Timestep> synchronize(const SensorStreams& streams, const std::vector<double>& ticks,
                                  SyncRule rule) {
  if (streams.images.empty()) throw DataError("synchronize: empty stream 'images'");
  if (streams.state.empty()) throw DataError("synchronize: empty stream 'state'");
  if (streams.wrench.empty()) throw DataError("synchronize: empty stream 'wrench'");
  if (streams.action.empty()) throw DataError("synchronize: empty stream 'action'");

  std::vector<Timestep> out;
  bool head_done = false;
  for (double tick : ticks) {
    const int ii = held_index(streams.images, tick, rule);
    const int si = held_index(streams.state, tick, rule);
    const int wi = held_index(streams.wrench, tick, rule);
    const int ai = held_index(streams.action, tick, rule);
    if (ii < 0 || si < 0 || wi < 0 || ai < 0) {
      if (head_done) {
        throw DataError("synchronize: stream record missing after the episode head");
      }
      continue;  // drop ticks before every stream has started
    }
    head_done = true;
    Timestep ts;
    ts.timestamp = tick;
    ts.obs.base_view = streams.images[ii].base;
    ts.obs.wrist_view = streams.images[ii].wrist;
    ts.obs.state = streams.state[si].value;
    if (streams.wrench[wi].value.size() != 6) {
      throw DataError("synchronize: wrench records must have 6 components");
    }
    ts.obs.wrench = streams.wrench[wi].value;
    ts.obs.instruction = streams.instruction;
    ts.action = streams.action[ai].value;
    out.push_back(std::move(ts));
  }
  return out;
}

std::vector<ChunkSample> chunk_episode(const Episode& ep, int horizon) {
  if (ep.steps.empty()) throw DataError("chunk_episode: empty episode");
  if (horizon < 1) throw ConfigError("chunk_episode: horizon must be >= 1");
  const int n = static_cast<int>(ep.steps.size());
  const int d = static_cast<int>(ep.steps[0].action.size());
  std::vector<ChunkSample> out;
  out.reserve(n);
  for (int t = 0; t < n; ++t) {
    ChunkSample s;
    s.t = t;
    s.actions.resize(horizon, d);
    for (int h = 0; h < horizon; ++h) {
      const int idx = std::min(t + h, n - 1);  // repeat the final action past the end
      s.actions.row(h) = ep.steps[idx].action.transpose();
    }
    out.push_back(std::move(s));
  }
  return out;
}

void save_episode(const fs::path& path, const Episode& ep) {
  if (ep.steps.empty()) throw DataError("save_episode: empty episode");
  const int grid = static_cast<int>(ep.steps[0].obs.base_view.rows());
  const int d_state = static_cast<int>(ep.steps[0].obs.state.size());
  const int d_action = static_cast<int>(ep.steps[0].action.size());

  KvText manifest = ep.manifest;
  manifest.set_int("format.grid", grid);
  manifest.set_int("format.d_state", d_state);
  manifest.set_int("format.d_action", d_action);
  manifest.set_int("format.steps", static_cast<long long>(ep.steps.size()));
  const std::string mtext = manifest.serialize();

  ByteWriter w;
  w.str("FVD1");
  w.u32le(kEpisodeVersion);
  w.u32le(static_cast<uint32_t>(mtext.size()));
  w.str(mtext);
  for (const Timestep& ts : ep.steps) {
    w.f64le(ts.timestamp);
    if (ts.obs.base_view.rows() != grid || ts.obs.base_view.cols() != grid ||
        ts.obs.wrist_view.rows() != grid || ts.obs.wrist_view.cols() != grid) {
      throw DataError("save_episode: inconsistent grid dimensions");
    }
    for (int r = 0; r < grid; ++r) {
      for (int c = 0; c < grid; ++c) w.f32le(static_cast<float>(ts.obs.base_view(r, c)));
    }
    for (int r = 0; r < grid; ++r) {
      for (int c = 0; c < grid; ++c) w.f32le(static_cast<float>(ts.obs.wrist_view(r, c)));
    }
    if (ts.obs.state.size() != d_state || ts.action.size() != d_action) {
      throw DataError("save_episode: inconsistent state/action widths");
    }
    for (int i = 0; i < d_state; ++i) w.f32le(static_cast<float>(ts.obs.state[i]));
    for (int i = 0; i < 6; ++i) w.f32le(static_cast<float>(ts.obs.wrench[i]));
    for (int i = 0; i < d_action; ++i) w.f32le(static_cast<float>(ts.action[i]));
  }
  w.write_file(path);
}

Episode load_episode(const fs::path& path) {
  ByteReader r = ByteReader::from_file(path);
  if (r.size() < 12) {
    throw DataError("episode file too short (" + std::to_string(r.size()) + " bytes): " +
                    path.string());
  }
  if (r.str(4) != "FVD1") throw DataError("bad episode magic at byte offset 0 in " + path.string());
  const uint32_t version = r.u32le();
  if (version != kEpisodeVersion) {
    throw DataError("unsupported episode version " + std::to_string(version) + " at byte offset 4");
  }
  const uint32_t mlen = r.u32le();
  Episode ep;
  ep.manifest = KvText::parse(r.str(mlen));
  const int grid = static_cast<int>(ep.manifest.get_int("format.grid"));
  const int d_state = static_cast<int>(ep.manifest.get_int("format.d_state"));
  const int d_action = static_cast<int>(ep.manifest.get_int("format.d_action"));
  const long long steps = ep.manifest.get_int("format.steps");
  const size_t record_bytes = 8 + 4ull * (2 * grid * grid + d_state + 6 + d_action);
  if (r.remaining() != record_bytes * static_cast<size_t>(steps)) {
    throw DataError("episode payload truncated at byte offset " + std::to_string(r.offset()) +
                    ": expected " + std::to_string(record_bytes * steps) + " bytes for " +
                    std::to_string(steps) + " steps, have " + std::to_string(r.remaining()));
  }
  const int instruction = static_cast<int>(ep.manifest.get_int_or("episode.task", 0));
  for (long long s = 0; s < steps; ++s) {
    Timestep ts;
    ts.timestamp = r.f64le();
    ts.obs.base_view.resize(grid, grid);
    ts.obs.wrist_view.resize(grid, grid);
    for (int i = 0; i < grid; ++i) {
      for (int c = 0; c < grid; ++c) ts.obs.base_view(i, c) = r.f32le();
    }
    for (int i = 0; i < grid; ++i) {
      for (int c = 0; c < grid; ++c) ts.obs.wrist_view(i, c) = r.f32le();
    }
    ts.obs.state.resize(d_state);
    for (int i = 0; i < d_state; ++i) ts.obs.state[i] = r.f32le();
    for (int i = 0; i < 6; ++i) ts.obs.wrench[i] = r.f32le();
    ts.action.resize(d_action);
    for (int i = 0; i < d_action; ++i) ts.action[i] = r.f32le();
    ts.obs.instruction = instruction;
    ep.steps.push_back(std::move(ts));
  }
  return ep;
}

NormStats NormStats::identity(int d_state, int d_action) {
  NormStats ns;
  ns.state_mean = Eigen::VectorXd::Zero(d_state);
  ns.state_std = Eigen::VectorXd::Ones(d_state);
  ns.wrench_mean = Eigen::VectorXd::Zero(6);
  ns.wrench_std = Eigen::VectorXd::Ones(6);
  ns.action_mean = Eigen::VectorXd::Zero(d_action);
  ns.action_std = Eigen::VectorXd::Ones(d_action);
  return ns;
}

NormStats compute_norm_stats(const std::vector<Episode>& episodes) {
  long long count = 0;
  for (const auto& ep : episodes) count += static_cast<long long>(ep.steps.size());
  if (count < 2) throw DataError("compute_norm_stats: need at least 2 timesteps, have " +
                                 std::to_string(count));
  const int d_state = static_cast<int>(episodes.front().steps.front().obs.state.size());
  const int d_action = static_cast<int>(episodes.front().steps.front().action.size());

  auto accumulate = [count](auto getter, int dim, Eigen::VectorXd& mean, Eigen::VectorXd& std_out,
                            const std::vector<Episode>& eps) {
    Eigen::VectorXd sum = Eigen::VectorXd::Zero(dim);
    for (const auto& ep : eps) {
      for (const auto& ts : ep.steps) sum += getter(ts);
    }
    mean = sum / static_cast<double>(count);
    Eigen::VectorXd sq = Eigen::VectorXd::Zero(dim);
    for (const auto& ep : eps) {
      for (const auto& ts : ep.steps) {
        Eigen::VectorXd d = getter(ts) - mean;
        sq += d.cwiseProduct(d);
      }
    }
    std_out = (sq / static_cast<double>(count)).cwiseSqrt().cwiseMax(1e-6);
  };

  NormStats ns;
  accumulate([](const Timestep& ts) -> Eigen::VectorXd { return ts.obs.state; }, d_state,
             ns.state_mean, ns.state_std, episodes);
  accumulate([](const Timestep& ts) -> Eigen::VectorXd { return ts.obs.wrench; }, 6,
             ns.wrench_mean, ns.wrench_std, episodes);
  accumulate([](const Timestep& ts) -> Eigen::VectorXd { return ts.action; }, d_action,
             ns.action_mean, ns.action_std, episodes);
  return ns;
}

Episode episode_from_rollout(const RolloutRecord& rec, int d_action) {
  if (d_action < 4) throw ConfigError("episode_from_rollout: d_action must be >= 4");
  Episode ep;
  ep.manifest.set_int("episode.seed", static_cast<long long>(rec.log.seed));
  ep.manifest.set("episode.mode", mode_name(rec.log.mode));
  ep.manifest.set_int("episode.task", static_cast<int>(rec.log.task));
  ep.manifest.set_int("episode.success", rec.log.success ? 1 : 0);
  ep.manifest.set_int("episode.steps", rec.log.steps);
  ep.manifest.set("episode.failure_reason",
                  rec.log.failure_reason.empty() ? "none" : rec.log.failure_reason);
  for (const SimStep& s : rec.steps) {
    Timestep ts;
    ts.timestamp = s.timestamp;
    ts.obs = s.obs;
    ts.action = Eigen::VectorXd::Zero(d_action);
    ts.action.head(4) = s.action;
    ep.steps.push_back(std::move(ts));
  }
  return ep;
}

void write_dataset_manifest(const fs::path& root) {
  std::vector<fs::path> files;
  for (const auto& entry : fs::recursive_directory_iterator(root)) {
    if (entry.is_regular_file() && entry.path().extension() == ".fvd") {
      files.push_back(fs::relative(entry.path(), root));
    }
  }
  std::sort(files.begin(), files.end());
  KvText manifest;
  manifest.set_int("dataset.count", static_cast<long long>(files.size()));
  std::string combined;
  for (size_t i = 0; i < files.size(); ++i) {
    const std::string h = hash_file_hex(root / files[i]);
    combined += h;
    manifest.set("episode_" + std::to_string(i) + ".file", files[i].generic_string());
    manifest.set("episode_" + std::to_string(i) + ".hash", h);
  }
  manifest.set("dataset.hash", hash_bytes_hex(combined));
  manifest.save(root / "manifest.txt");
}

DatasetInfo read_dataset_manifest(const fs::path& root) {
  const fs::path mpath = root / "manifest.txt";
  if (!fs::exists(mpath)) throw DataError("dataset manifest not found: " + mpath.string());
  KvText manifest = KvText::load(mpath);
  DatasetInfo info;
  info.root = root;
  info.count = static_cast<int>(manifest.get_int("dataset.count"));
  info.hash = manifest.get("dataset.hash");
  for (int i = 0; i < info.count; ++i) {
    info.episode_files.emplace_back(manifest.get("episode_" + std::to_string(i) + ".file"));
  }
  return info;
}

std::vector<Episode> load_dataset(const fs::path& root) {
  DatasetInfo info = read_dataset_manifest(root);
  std::vector<Episode> episodes;
  episodes.reserve(info.episode_files.size());
  for (const auto& rel : info.episode_files) {
    episodes.push_back(load_episode(info.root / rel));
  }
  return episodes;
}

}  // namespace fvla
