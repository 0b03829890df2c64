#pragma once

#include <Eigen/Dense>
#include <filesystem>
#include <string>
#include <vector>

#include "fvla/io_util.hpp"
#include "fvla/sim.hpp"

namespace fvla {

// One synchronized multimodal record: the observation the policy saw and the
// action taken (absolute target TCP pose + gripper width, zero-padded).
struct Timestep {
  double timestamp = 0.0;
  Observation obs;
  Eigen::VectorXd action;
};

struct Episode {
  KvText manifest;  // seed, mode, task, success, steps, failure_reason, dims
  std::vector<Timestep> steps;
};

// ---------------------------------------------------------------------------
// Stream synchronization (zero-order hold by default).
// ---------------------------------------------------------------------------

struct StampedGrids {
  double t = 0.0;
  Eigen::ArrayXXd base, wrist;
};

struct StampedVec {
  double t = 0.0;
  Eigen::VectorXd value;
};

struct SensorStreams {
  std::vector<StampedGrids> images;
  std::vector<StampedVec> state;
  std::vector<StampedVec> wrench;
  std::vector<StampedVec> action;
  int instruction = 0;
};

enum class SyncRule { ZeroOrderHold, Nearest };

// For each tick, hold the latest record of each stream at or before the tick
// (or the nearest record under SyncRule::Nearest). Ticks that precede some
// stream's first record are dropped from the front.
std::vector<Timestep> synchronize(const SensorStreams& streams, const std::vector<double>& ticks,
                                  SyncRule rule = SyncRule::ZeroOrderHold);

// ---------------------------------------------------------------------------
// Horizon chunking.
// ---------------------------------------------------------------------------

struct ChunkSample {
  int t = 0;                // index of the conditioning observation
  Eigen::MatrixXd actions;  // (H, D_a); tail padded by repeating the last action
};

std::vector<ChunkSample> chunk_episode(const Episode& ep, int horizon);

// ---------------------------------------------------------------------------
// Binary episode files: magic "FVD1", version u32 LE, length-prefixed UTF-8
// manifest, then per-timestep records (timestamp f64, base+wrist grids f32,
// state f32[D_s], wrench f32[6], action f32[D_a]), all little-endian.
// ---------------------------------------------------------------------------

constexpr uint32_t kEpisodeVersion = 1;

void save_episode(const std::filesystem::path& path, const Episode& ep);
Episode load_episode(const std::filesystem::path& path);

// ---------------------------------------------------------------------------
// Normalization statistics (population convention, stds floored at 1e-6).
// ---------------------------------------------------------------------------

struct NormStats {
  Eigen::VectorXd state_mean, state_std;
  Eigen::VectorXd wrench_mean, wrench_std;
  Eigen::VectorXd action_mean, action_std;

  static Eigen::VectorXd normalize(const Eigen::VectorXd& v, const Eigen::VectorXd& mean,
                                   const Eigen::VectorXd& std) {
    return ((v - mean).array() / std.array()).matrix();
  }
  static Eigen::VectorXd denormalize(const Eigen::VectorXd& v, const Eigen::VectorXd& mean,
                                     const Eigen::VectorXd& std) {
    return (v.array() * std.array()).matrix() + mean;
  }
  // Identity stats of the given widths (mean 0, std 1).
  static NormStats identity(int d_state, int d_action);
};

NormStats compute_norm_stats(const std::vector<Episode>& episodes);

// ---------------------------------------------------------------------------
// Dataset directory: dataset/<task>/<episode_id>.fvd + dataset/manifest.txt.
// ---------------------------------------------------------------------------

struct DatasetInfo {
  std::filesystem::path root;
  std::vector<std::filesystem::path> episode_files;  // sorted, relative to root
  std::string hash;                                  // combined content hash
  int count = 0;
};

// Converts a rollout into an Episode with D_a-padded actions.
Episode episode_from_rollout(const RolloutRecord& rec, int d_action);

void write_dataset_manifest(const std::filesystem::path& root);
DatasetInfo read_dataset_manifest(const std::filesystem::path& root);
std::vector<Episode> load_dataset(const std::filesystem::path& root);

}  // namespace fvla
