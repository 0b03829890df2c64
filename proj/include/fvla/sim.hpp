#pragma once

#include <Eigen/Dense>
#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "fvla/errors.hpp"

namespace fvla {

enum class PerturbationMode { Nominal, Occlusion, UnstableSocket, HeightShift, ObjectVariant };

std::string mode_name(PerturbationMode m);
PerturbationMode mode_from_name(const std::string& name);

enum class SimTask { Insert = 0, Wipe = 1 };

std::string task_name(SimTask t);
SimTask task_from_name(const std::string& name);

// All lengths in meters, angles in radians, forces in Newtons.
struct SimParams {
  // Socket / peg geometry. Clearance (mouth - peg half-width) is 1 mm, so
  // blind insertion fails without force-guided centering.
  double socket_mouth_half_width = 0.006;
  double chamfer_depth = 0.003;  // 45-degree chamfer band at the mouth
  double peg_half_width = 0.005;
  double peg_length = 0.040;
  double socket_depth = 0.020;      // insertion target depth below the top surface
  double slot_extra_depth = 0.004;  // slack below the target depth
  double block_half_width = 0.080;
  double block_top_y = 0.0;

  // Penalty contact model.
  double contact_stiffness = 2000.0;  // N/m
  double friction_mu = 0.3;
  double penetration_cap = 0.0025;  // positional projection beyond this depth

  // Action limits per step.
  double max_step_xy = 0.005;
  double max_step_theta = 0.05;
  double max_grip = 0.04;

  int max_steps = 400;
  double dt = 0.05;
  double torque_limit = 2.0;  // |tau_z| beyond this is a failure
  double workspace_half_width = 0.045;  // |x| beyond this ends the episode

  // Episode randomization.
  double socket_offset_range = 0.008;  // slot center x ~ U(-r, r)
  double spawn_x_range = 0.002;
  double spawn_y = 0.030;
  double spawn_theta_range = 0.0;

  // Perturbation-mode parameters. The occlusion mask is a fixed world-frame
  // rectangle wide enough to cover the slot across its whole randomization
  // range, so the mask itself leaks nothing about the slot position.
  double occlusion_x0 = -0.026, occlusion_x1 = 0.026;
  double occlusion_y0 = -0.050, occlusion_y1 = 0.008;
  double anchor_stiffness = 400.0;  // N/m, UnstableSocket only
  double height_offset = 0.006;     // HeightShift: block top moves up by this
  double geometry_scale = 0.85;     // ObjectVariant: peg half-width scale

  // Rendering.
  int grid = 16;
  double base_view_half = 0.064;
  double base_view_cx = 0.0, base_view_cy = 0.024;
  double wrist_view_half = 0.024;
  int d_state = 32;  // observation state padding width

  // Wipe task.
  double wipe_force_lo = 0.8, wipe_force_hi = 4.0;
  double wipe_distance = 0.05;
};

// Peg pose is the tip (bottom-center) position plus tilt. socket_y is the
// block top surface; socket_x the slot center (drifts under load in
// UnstableSocket mode).
struct WorldState {
  double x = 0.0, y = 0.0, theta = 0.0;
  double grip = 0.02;
  double socket_x = 0.0, socket_y = 0.0;
  double socket_x_nominal = 0.0;
  double mouth_half_width = 0.006;
  double chamfer_depth = 0.003;
  double peg_half_width = 0.005;
  double anchor_stiffness = 0.0;  // <= 0 means rigidly anchored
  double time = 0.0;
};

struct Observation {
  Eigen::ArrayXXd base_view;   // grid x grid, values in [0, 1]
  Eigen::ArrayXXd wrist_view;  // centered on the peg tip
  Eigen::VectorXd state;       // (x, y, theta, grip) zero-padded to d_state
  Eigen::Matrix<double, 6, 1> wrench;  // (fx, fy, 0, 0, 0, tau_z), world frame
  int instruction = 0;
};

// Net contact wrench on the peg about its tip.
struct ContactWrench {
  double fx = 0.0, fy = 0.0, tau_z = 0.0;
  int contacts = 0;
  bool any() const { return contacts > 0; }
  double planar_norm() const { return std::sqrt(fx * fx + fy * fy); }
};

// Quasi-static wrench for a peg pose against the slot geometry, optionally
// with the per-step displacement (for friction). Exposed for oracle tests.
ContactWrench contact_wrench(const WorldState& s, const SimParams& p, SimTask task,
                             double prev_x, double prev_y, double prev_theta);

struct RenderResult {
  Eigen::ArrayXXd base_view;
  Eigen::ArrayXXd wrist_view;
};

RenderResult render(const WorldState& s, const SimParams& p, PerturbationMode mode, SimTask task);

// Success for the insertion task: tip within the mouth half-width of the
// slot center and inserted to at least 90% of the socket depth (closed
// boundary: exactly 90% counts).
bool insertion_success(const WorldState& s, const SimParams& p);

class InsertionEnv {
 public:
  InsertionEnv(SimParams params, PerturbationMode mode, SimTask task, uint64_t seed);

  const WorldState& state() const { return state_; }
  const SimParams& params() const { return params_; }
  PerturbationMode mode() const { return mode_; }
  SimTask task() const { return task_; }
  uint64_t seed() const { return seed_; }

  Observation observe() const;

  // Kinematic update with per-axis clamping, then contact resolution.
  // action = (dx, dy, dtheta, grip target).
  Observation step(const Eigen::Vector4d& action);

  // Absolute target-pose interface used by rollouts: deltas are derived
  // from the current pose and clamped by step().
  Observation step_to_target(const Eigen::Vector4d& target);

  bool success() const { return success_; }
  bool torque_exceeded() const { return torque_failed_; }
  bool workspace_exceeded() const { return workspace_failed_; }
  bool done() const {
    return success_ || torque_failed_ || workspace_failed_ || steps_ >= params_.max_steps;
  }
  int steps_taken() const { return steps_; }
  const ContactWrench& last_wrench() const { return wrench_; }
  double insertion_depth() const { return state_.socket_y - state_.y; }

 private:
  void resolve_contacts(double prev_x, double prev_y, double prev_theta);
  void update_flags();

  SimParams params_;
  PerturbationMode mode_;
  SimTask task_;
  uint64_t seed_;
  WorldState state_;
  ContactWrench wrench_;
  int steps_ = 0;
  bool success_ = false;
  bool torque_failed_ = false;
  bool workspace_failed_ = false;
  double wipe_travel_ = 0.0;
};

// Force-reactive phase-machine expert. Privileged (knows the slot center)
// except under Occlusion, where it descends blind and centers from the
// wrench after first contact. Returns an absolute target (x, y, theta, grip).
Eigen::Vector4d scripted_expert(const WorldState& s, const Observation& obs, bool privileged,
                                const SimParams& p, SimTask task);

struct EpisodeLog {
  uint64_t seed = 0;
  PerturbationMode mode = PerturbationMode::Nominal;
  SimTask task = SimTask::Insert;
  bool success = false;
  int steps = 0;
  std::string failure_reason;  // empty on success
};

struct SimStep {
  double timestamp = 0.0;
  Observation obs;           // observation the action was computed from
  Eigen::Vector4d action;    // absolute target pose + grip taken
};

struct RolloutRecord {
  EpisodeLog log;
  std::vector<SimStep> steps;
};

// Provider returns one or more absolute target actions to execute open-loop
// before being consulted again. The WorldState argument carries privileged
// information; learned policies must ignore it.
using ChunkProvider =
    std::function<std::vector<Eigen::Vector4d>(const Observation&, const WorldState&)>;

RolloutRecord rollout(InsertionEnv env, const ChunkProvider& provider);

// Runs n_episodes rollouts with seeds seed, seed+1, ...; returns per-episode logs.
std::vector<EpisodeLog> evaluate(const ChunkProvider& provider, const SimParams& params,
                                 PerturbationMode mode, SimTask task, int n_episodes,
                                 uint64_t seed, std::vector<RolloutRecord>* records = nullptr);

}  // namespace fvla
