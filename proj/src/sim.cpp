#include "fvla/sim.hpp"

#include <algorithm>
#include <cmath>

#include "fvla/rng.hpp"

namespace fvla {

std::string mode_name(PerturbationMode m) {
  switch (m) {
    case PerturbationMode::Nominal: return "nominal";
    case PerturbationMode::Occlusion: return "visual_occlusion";
    case PerturbationMode::UnstableSocket: return "unstable_socket";
    case PerturbationMode::HeightShift: return "height_gen";
    case PerturbationMode::ObjectVariant: return "object_gen";
  }
  throw ConfigError("unknown perturbation mode");
}

PerturbationMode mode_from_name(const std::string& name) {
  std::string n;
  for (char c : name) n += (c == '-' || c == ' ') ? '_' : static_cast<char>(std::tolower(c));
  if (n == "nominal") return PerturbationMode::Nominal;
  if (n == "visual_occlusion" || n == "occlusion") return PerturbationMode::Occlusion;
  if (n == "unstable_socket") return PerturbationMode::UnstableSocket;
  if (n == "height_gen" || n == "height_shift") return PerturbationMode::HeightShift;
  if (n == "object_gen" || n == "object_variant") return PerturbationMode::ObjectVariant;
  throw ConfigError("unknown mode '" + name +
                    "' (expected nominal, visual_occlusion, unstable_socket, height_gen, object_gen)");
}

std::string task_name(SimTask t) { return t == SimTask::Insert ? "insert" : "wipe"; }

SimTask task_from_name(const std::string& name) {
  if (name == "insert" || name == "insertion") return SimTask::Insert;
  if (name == "wipe") return SimTask::Wipe;
  throw ConfigError("unknown task '" + name + "' (expected insert or wipe)");
}

namespace {

// Socket slot geometry in world coordinates for the current state. The wipe
// task uses the same block with the cavity removed.
struct Slot {
  double sx;        // slot center
  double top;       // block top surface
  double mouth;     // straight-slot half-width (0 = no cavity)
  double cham;      // chamfer depth == horizontal extent (45 degrees)
  double bottom;    // slot bottom
  double block_hw;  // block half-width, centered at x = 0
};

Slot slot_of(const WorldState& s, const SimParams& p, SimTask task) {
  Slot g;
  g.sx = s.socket_x;
  g.top = s.socket_y;
  g.mouth = task == SimTask::Wipe ? 0.0 : s.mouth_half_width;
  g.cham = task == SimTask::Wipe ? 0.0 : s.chamfer_depth;
  g.bottom = g.top - g.cham - p.socket_depth - p.slot_extra_depth;
  g.block_hw = p.block_half_width;
  return g;
}

bool in_solid(const Slot& g, double x, double y) {
  if (y > g.top) return false;
  if (std::abs(x) > g.block_hw) return false;
  if (g.mouth > 0.0 && y > g.bottom) {
    double hw = g.mouth;
    if (y > g.top - g.cham) hw += y - (g.top - g.cham);
    if (std::abs(x - g.sx) < hw) return false;  // inside the cavity
  }
  return true;
}

enum Surface { kTopLeft, kTopRight, kChamferL, kChamferR, kWallL, kWallR, kSlotBottom, kSurfaceCount };

struct Exit {
  double depth = -1.0;  // < 0 means no exit found
  int surface = -1;
  double nx = 0.0, ny = 0.0;
};

// Shortest push-out of a solid-interior point, with the surface it exits
// through. Chamfers are 45-degree planes with extent checks.
Exit nearest_exit(const Slot& g, double x, double y) {
  Exit best;
  auto consider = [&](double depth, int surface, double nx, double ny) {
    if (depth < 0.0) return;
    if (best.depth < 0.0 || depth < best.depth) best = {depth, surface, nx, ny};
  };

  const double d_top = g.top - y;
  if (g.mouth <= 0.0) {
    consider(d_top, x < g.sx ? kTopLeft : kTopRight, 0.0, 1.0);
    return best;
  }

  if (x <= g.sx - g.mouth - g.cham) consider(d_top, kTopLeft, 0.0, 1.0);
  if (x >= g.sx + g.mouth + g.cham) consider(d_top, kTopRight, 0.0, 1.0);

  const double inv = 1.0 / std::sqrt(2.0);
  const double seg = g.cham * std::sqrt(2.0);
  {
    // Left chamfer from (sx - mouth - cham, top) down to (sx - mouth, top - cham);
    // its normal points up-and-toward-center, so contact pushes the peg right.
    double dx = x - (g.sx - g.mouth - g.cham), dy = y - g.top;
    double depth = -(dx + dy) * inv;
    double t = (dx - dy) * inv;
    if (depth >= 0.0 && t >= -1e-12 && t <= seg + 1e-12) consider(depth, kChamferL, inv, inv);
  }
  {
    double dx = x - (g.sx + g.mouth + g.cham), dy = y - g.top;
    double depth = (dx - dy) * inv;
    double t = (-dx - dy) * inv;
    if (depth >= 0.0 && t >= -1e-12 && t <= seg + 1e-12) consider(depth, kChamferR, -inv, inv);
  }
  if (y <= g.top - g.cham + 1e-12 && y >= g.bottom - 1e-12) {
    double d_left = (g.sx - g.mouth) - x;
    if (d_left >= 0.0) consider(d_left, kWallL, 1.0, 0.0);
    double d_right = x - (g.sx + g.mouth);
    if (d_right >= 0.0) consider(d_right, kWallR, -1.0, 0.0);
  }
  if (std::abs(x - g.sx) < g.mouth) {
    double d_bottom = g.bottom - y;
    if (d_bottom >= 0.0) consider(d_bottom, kSlotBottom, 0.0, 1.0);
  }
  return best;
}

// Fixed sample points on the peg boundary, in peg frame (u lateral, v from tip).
std::vector<std::pair<double, double>> peg_samples(const WorldState& s, const SimParams& p) {
  std::vector<std::pair<double, double>> pts;
  const double w = s.peg_half_width;
  for (double u : {-w, -0.5 * w, 0.0, 0.5 * w, w}) pts.emplace_back(u, 0.0);
  const double v_max = std::min(p.peg_length, 0.032);
  for (double v = 0.002; v <= v_max + 1e-12; v += 0.002) {
    pts.emplace_back(-w, v);
    pts.emplace_back(w, v);
  }
  return pts;
}

struct PegFrame {
  double c, s, x, y;
  std::pair<double, double> world(double u, double v) const {
    return {x + c * u - s * v, y + s * u + c * v};
  }
};

}  // namespace

ContactWrench contact_wrench(const WorldState& s, const SimParams& p, SimTask task,
                             double prev_x, double prev_y, double prev_theta) {
  const Slot g = slot_of(s, p, task);
  const PegFrame now{std::cos(s.theta), std::sin(s.theta), s.x, s.y};
  const PegFrame before{std::cos(prev_theta), std::sin(prev_theta), prev_x, prev_y};

  // Per contacted surface: deepest penetration sets the normal force; the
  // force acts at the centroid of the near-deepest samples.
  double max_depth[kSurfaceCount] = {};
  double nx[kSurfaceCount] = {}, ny[kSurfaceCount] = {};
  double cx[kSurfaceCount] = {}, cy[kSurfaceCount] = {};
  double cpx[kSurfaceCount] = {}, cpy[kSurfaceCount] = {};  // previous positions
  int count[kSurfaceCount] = {};
  bool hit[kSurfaceCount] = {};

  auto samples = peg_samples(s, p);
  constexpr double kNearBand = 2e-4;
  for (int pass = 0; pass < 2; ++pass) {
    for (const auto& [u, v] : samples) {
      auto [wx, wy] = now.world(u, v);
      if (!in_solid(g, wx, wy)) continue;
      Exit e = nearest_exit(g, wx, wy);
      if (e.depth < 0.0 || e.surface < 0) continue;
      if (pass == 0) {
        if (!hit[e.surface] || e.depth > max_depth[e.surface]) {
          hit[e.surface] = true;
          max_depth[e.surface] = e.depth;
          nx[e.surface] = e.nx;
          ny[e.surface] = e.ny;
        }
      } else if (e.depth >= max_depth[e.surface] - kNearBand) {
        auto [px, py] = before.world(u, v);
        cx[e.surface] += wx;
        cy[e.surface] += wy;
        cpx[e.surface] += px;
        cpy[e.surface] += py;
        count[e.surface] += 1;
      }
    }
  }

  ContactWrench w;
  for (int k = 0; k < kSurfaceCount; ++k) {
    if (!hit[k] || count[k] == 0) continue;
    const double inv_n = 1.0 / count[k];
    const double ax = cx[k] * inv_n, ay = cy[k] * inv_n;
    const double apx = cpx[k] * inv_n, apy = cpy[k] * inv_n;
    const double fn = p.contact_stiffness * max_depth[k];
    double fx = fn * nx[k];
    double fy = fn * ny[k];
    // Kinetic friction against the contact point's tangential displacement
    // over this step; at rest there is no tangential force.
    const double tx = -ny[k], ty = nx[k];
    const double slide = (ax - apx) * tx + (ay - apy) * ty;
    if (std::abs(slide) > 1e-12) {
      const double ft = -p.friction_mu * fn * (slide > 0.0 ? 1.0 : -1.0);
      fx += ft * tx;
      fy += ft * ty;
    }
    w.fx += fx;
    w.fy += fy;
    w.tau_z += (ax - s.x) * fy - (ay - s.y) * fx;
    w.contacts += 1;
  }
  return w;
}

RenderResult render(const WorldState& s, const SimParams& p, PerturbationMode mode, SimTask task) {
  const Slot g = slot_of(s, p, task);
  const double ct = std::cos(s.theta), st = std::sin(s.theta);

  auto in_peg = [&](double dx, double dy) {
    // dx, dy relative to the peg tip
    const double u = ct * dx + st * dy;
    const double v = -st * dx + ct * dy;
    return std::abs(u) <= s.peg_half_width && v >= 0.0 && v <= p.peg_length;
  };
  const bool masked = mode == PerturbationMode::Occlusion;
  auto in_mask = [&](double wx, double wy) {
    return wx >= p.occlusion_x0 && wx <= p.occlusion_x1 && wy >= p.occlusion_y0 &&
           wy <= p.occlusion_y1;
  };

  const int n = p.grid;
  RenderResult out;
  out.base_view = Eigen::ArrayXXd::Zero(n, n);
  out.wrist_view = Eigen::ArrayXXd::Zero(n, n);

  // 4x4 supersampling; intensity: peg 1.0 over block 0.55 over background 0.
  auto shade = [&](double wx, double wy) {
    if (in_peg(wx - s.x, wy - s.y)) return 1.0;
    if (in_solid(g, wx, wy)) return 0.55;
    return 0.0;
  };

  const double base_pw = 2.0 * p.base_view_half / n;
  const double wrist_pw = 2.0 * p.wrist_view_half / n;
  for (int r = 0; r < n; ++r) {
    for (int c = 0; c < n; ++c) {
      double acc_base = 0.0, acc_wrist = 0.0;
      for (int i = 0; i < 4; ++i) {
        for (int j = 0; j < 4; ++j) {
          const double fx = (c + (j + 0.5) / 4.0);
          const double fy = (r + (i + 0.5) / 4.0);
          const double bx = p.base_view_cx - p.base_view_half + fx * base_pw;
          const double by = p.base_view_cy + p.base_view_half - fy * base_pw;
          acc_base += shade(bx, by);
          // Wrist window rasterized in tip-relative coordinates.
          const double rx = -p.wrist_view_half + fx * wrist_pw;
          const double ry = p.wrist_view_half - fy * wrist_pw;
          acc_wrist += shade(s.x + rx, s.y + ry);
        }
      }
      out.base_view(r, c) = acc_base / 16.0;
      out.wrist_view(r, c) = acc_wrist / 16.0;
      if (masked) {
        const double bcx = p.base_view_cx - p.base_view_half + (c + 0.5) * base_pw;
        const double bcy = p.base_view_cy + p.base_view_half - (r + 0.5) * base_pw;
        if (in_mask(bcx, bcy)) out.base_view(r, c) = 0.0;
        const double wcx = s.x - p.wrist_view_half + (c + 0.5) * wrist_pw;
        const double wcy = s.y + p.wrist_view_half - (r + 0.5) * wrist_pw;
        if (in_mask(wcx, wcy)) out.wrist_view(r, c) = 0.0;
      }
    }
  }
  return out;
}

InsertionEnv::InsertionEnv(SimParams params, PerturbationMode mode, SimTask task, uint64_t seed)
    : params_(params), mode_(mode), task_(task), seed_(seed) {
  Rng rng(seed);
  state_.mouth_half_width = params_.socket_mouth_half_width;
  state_.chamfer_depth = params_.chamfer_depth;
  state_.peg_half_width = params_.peg_half_width;
  state_.socket_y = params_.block_top_y;
  if (mode_ == PerturbationMode::HeightShift) state_.socket_y += params_.height_offset;
  if (mode_ == PerturbationMode::ObjectVariant) state_.peg_half_width *= params_.geometry_scale;
  if (mode_ == PerturbationMode::UnstableSocket) state_.anchor_stiffness = params_.anchor_stiffness;

  state_.socket_x_nominal =
      rng.uniform(-params_.socket_offset_range, params_.socket_offset_range);
  state_.socket_x = state_.socket_x_nominal;
  state_.x = rng.uniform(-params_.spawn_x_range, params_.spawn_x_range);
  state_.y = params_.spawn_y;
  state_.theta = params_.spawn_theta_range > 0.0
                     ? rng.uniform(-params_.spawn_theta_range, params_.spawn_theta_range)
                     : 0.0;
  state_.grip = 0.02;
  state_.time = 0.0;
  wrench_ = contact_wrench(state_, params_, task_, state_.x, state_.y, state_.theta);
}

Observation InsertionEnv::observe() const {
  Observation o;
  RenderResult views = render(state_, params_, mode_, task_);
  o.base_view = std::move(views.base_view);
  o.wrist_view = std::move(views.wrist_view);
  o.state = Eigen::VectorXd::Zero(params_.d_state);
  o.state[0] = state_.x;
  o.state[1] = state_.y;
  o.state[2] = state_.theta;
  o.state[3] = state_.grip;
  o.wrench.setZero();
  o.wrench[0] = wrench_.fx;
  o.wrench[1] = wrench_.fy;
  o.wrench[5] = wrench_.tau_z;
  o.instruction = static_cast<int>(task_);
  return o;
}

Observation InsertionEnv::step(const Eigen::Vector4d& action) {
  if (!action.allFinite()) throw NumericalError("sim step: non-finite action");
  const double dx = std::clamp(action[0], -params_.max_step_xy, params_.max_step_xy);
  const double dy = std::clamp(action[1], -params_.max_step_xy, params_.max_step_xy);
  const double dth = std::clamp(action[2], -params_.max_step_theta, params_.max_step_theta);

  const double prev_x = state_.x, prev_y = state_.y, prev_theta = state_.theta;
  const double prev_pose_x = state_.x;
  state_.x += dx;
  state_.y += dy;
  state_.theta += dth;
  state_.grip = std::clamp(action[3], 0.0, params_.max_grip);

  resolve_contacts(prev_x, prev_y, prev_theta);

  if (state_.anchor_stiffness > 0.0) {
    // Reaction force on the socket displaces it from its anchored position.
    state_.socket_x = state_.socket_x_nominal - wrench_.fx / state_.anchor_stiffness;
  }

  if (task_ == SimTask::Wipe && wrench_.any() && wrench_.fy >= params_.wipe_force_lo &&
      wrench_.fy <= params_.wipe_force_hi) {
    wipe_travel_ += std::max(0.0, state_.x - prev_pose_x);
  }

  state_.time += params_.dt;
  steps_ += 1;
  update_flags();
  return observe();
}

Observation InsertionEnv::step_to_target(const Eigen::Vector4d& target) {
  Eigen::Vector4d delta;
  delta[0] = target[0] - state_.x;
  delta[1] = target[1] - state_.y;
  delta[2] = target[2] - state_.theta;
  delta[3] = target[3];
  return step(delta);
}

void InsertionEnv::resolve_contacts(double prev_x, double prev_y, double prev_theta) {
  const Slot g = slot_of(state_, params_, task_);
  // Positional projection: push the peg out along the deepest contact normal
  // until the residual penetration is at most the cap.
  for (int iter = 0; iter < 12; ++iter) {
    const PegFrame f{std::cos(state_.theta), std::sin(state_.theta), state_.x, state_.y};
    Exit deepest;
    for (const auto& [u, v] : peg_samples(state_, params_)) {
      auto [wx, wy] = f.world(u, v);
      if (!in_solid(g, wx, wy)) continue;
      Exit e = nearest_exit(g, wx, wy);
      if (e.depth > deepest.depth) deepest = e;
    }
    if (deepest.depth <= params_.penetration_cap + 1e-12) break;
    const double push = deepest.depth - params_.penetration_cap;
    state_.x += deepest.nx * push;
    state_.y += deepest.ny * push;
  }
  wrench_ = contact_wrench(state_, params_, task_, prev_x, prev_y, prev_theta);
}

bool insertion_success(const WorldState& s, const SimParams& p) {
  const double depth = s.socket_y - s.y;
  return std::abs(s.x - s.socket_x) <= s.mouth_half_width && depth >= 0.9 * p.socket_depth;
}

void InsertionEnv::update_flags() {
  if (std::abs(wrench_.tau_z) > params_.torque_limit) torque_failed_ = true;
  if (std::abs(state_.x) > params_.workspace_half_width) workspace_failed_ = true;
  if (task_ == SimTask::Insert) {
    if (insertion_success(state_, params_)) success_ = true;
  } else {
    if (wipe_travel_ >= params_.wipe_distance) success_ = true;
  }
}

Eigen::Vector4d scripted_expert(const WorldState& s, const Observation& obs, bool privileged,
                                const SimParams& p, SimTask task) {
  const double fx = obs.wrench[0], fy = obs.wrench[1], tz = obs.wrench[5];
  const double x = obs.state[0], y = obs.state[1], theta = obs.state[2];
  const double top = s.socket_y;  // table height is constant across episodes
  const double contact_norm = std::sqrt(fx * fx + fy * fy);
  const bool contact = contact_norm > 0.5 || std::abs(tz) > 1e-3;

  double dx = 0.0, dy = 0.0;
  double dth = std::clamp(-theta, -p.max_step_theta, p.max_step_theta) * 0.5;

  if (task == SimTask::Wipe) {
    if (!contact) {
      dy = -0.004;
    } else {
      const double mid = 0.5 * (p.wipe_force_lo + p.wipe_force_hi);
      dy = std::clamp(0.0004 * (fy - mid) / std::max(0.1, p.wipe_force_hi - mid), -0.001, 0.001);
      if (fy >= p.wipe_force_lo && fy <= p.wipe_force_hi) dx = 0.003;
    }
    return Eigen::Vector4d(x + dx, y + dy, theta + dth, s.grip);
  }

  const double depth = top - y;
  if (depth >= 0.95 * p.socket_depth) {
    return Eigen::Vector4d(x, y, theta, s.grip);  // inserted: hold
  }

  if (privileged && y > top + 0.004 && !contact) {
    // Approach tolerance is deliberately coarse (3 mm > clearance), so
    // demonstrations regularly graze the chamfer and record force-guided
    // corrections rather than pure straight-line insertions.
    const double ex = s.socket_x - x;
    dx = std::clamp(ex, -0.004, 0.004);
    dy = std::abs(ex) < 0.003 ? -0.004 : 0.0;
  } else if (!contact) {
    dy = -0.004;  // blind descent; the wrench takes over at first touch
  } else if (std::abs(fx) > 0.15) {
    // Chamfer or wall contact: the lateral force points toward the slot center.
    dx = (fx > 0.0 ? 1.0 : -1.0) * 0.0025;
    dy = -0.001;
  } else if (std::abs(tz) > 5e-4) {
    // Flat-top press: the support side (torque sign) says where the slot is not.
    dx = (tz > 0.0 ? -1.0 : 1.0) * 0.0025;
    dy = -0.0005;
  } else {
    dy = -0.003;  // straight press inside the mouth
  }
  return Eigen::Vector4d(x + dx, y + dy, theta + dth, s.grip);
}

RolloutRecord rollout(InsertionEnv env, const ChunkProvider& provider) {
  RolloutRecord rec;
  rec.log.seed = env.seed();
  rec.log.mode = env.mode();
  rec.log.task = env.task();
  Observation obs = env.observe();
  while (!env.done()) {
    auto chunk = provider(obs, env.state());
    if (chunk.empty()) throw DataError("rollout: action provider returned an empty chunk");
    for (const auto& target : chunk) {
      if (env.done()) break;
      rec.steps.push_back({env.state().time, obs, target});
      obs = env.step_to_target(target);
    }
  }
  rec.log.success = env.success();
  rec.log.steps = env.steps_taken();
  if (!env.success()) {
    rec.log.failure_reason = env.torque_exceeded()
                                 ? "torque_limit"
                                 : (env.workspace_exceeded() ? "workspace" : "timeout");
  }
  return rec;
}

std::vector<EpisodeLog> evaluate(const ChunkProvider& provider, const SimParams& params,
                                 PerturbationMode mode, SimTask task, int n_episodes,
                                 uint64_t seed, std::vector<RolloutRecord>* records) {
  std::vector<EpisodeLog> logs;
  logs.reserve(n_episodes);
  for (int i = 0; i < n_episodes; ++i) {
    InsertionEnv env(params, mode, task, seed + static_cast<uint64_t>(i));
    RolloutRecord rec = rollout(std::move(env), provider);
    logs.push_back(rec.log);
    if (records) records->push_back(std::move(rec));
  }
  return logs;
}

}  // namespace fvla
