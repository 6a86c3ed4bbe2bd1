#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <string>
#include <vector>

#include "gaitplan/sim.hpp"
#include "gaitplan/types.hpp"

namespace gaitplan::data {

struct TrajectoryMeta {
  std::string gait;
  double v_cmd = 0.0;
  std::uint64_t seed = 0;
  std::string source;  // expert | planner
  bool fell = false;
  int fall_step = -1;
};

struct Trajectory {
  MatX states;                 // T x 12
  MatX actions;                // T x 4
  VecX rewards;                // T
  std::vector<std::uint8_t> dones;  // T; at most the final entry is true
  TrajectoryMeta meta;

  int length() const { return static_cast<int>(states.rows()); }
};

struct NormStats {
  VecX state_mean, state_std;    // std floored at kStdFloor
  VecX action_mean, action_std;
};

constexpr double kStdFloor = 1e-6;

struct SegmentRef {
  int traj = 0;
  int start = 0;
};

// Contiguous slice of h+1 (state, action, reward) rows.
struct Segment {
  MatX states;
  MatX actions;
  VecX rewards;
  SegmentRef origin;

  int length() const { return static_cast<int>(states.rows()); }
};

using Policy = std::function<Vec4(const sim::EnvState&)>;

// Data-collection coverage knobs. A wider reset jitter and a little action
// noise put recovery behavior into the dataset; both default to the plain
// environment settings.
struct CollectOptions {
  double reset_jitter = -1.0;   // < 0: use the environment's jitter
  double action_noise = 0.0;    // uniform per-leg exploration noise, rad
  double phase_kick_prob = 0.0; // per step, per leg: chance of an external push
  double phase_kick_mag = 0.0;  // uniform push bound, rad
  double phase_noise = 0.0;     // per-step per-leg phase jitter bound, rad
};

std::vector<Trajectory> collect(const Policy& policy, const sim::GaitTemplate& gait, double v_cmd,
                                int episodes, int max_steps, std::uint64_t seed,
                                double disturbance_mag, const sim::EnvConfig& env,
                                const std::string& source_tag,
                                const CollectOptions& options = {});

NormStats fit_norm(const std::vector<Trajectory>& trajs);

VecX normalize(const Eigen::Ref<const VecX>& x, const Eigen::Ref<const VecX>& mean,
               const Eigen::Ref<const VecX>& std);
VecX denormalize(const Eigen::Ref<const VecX>& z, const Eigen::Ref<const VecX>& mean,
                 const Eigen::Ref<const VecX>& std);

// All (trajectory, start) slots yielding an in-bounds h+1 slice that does not
// cross a terminal transition.
std::vector<SegmentRef> valid_segments(const std::vector<Trajectory>& trajs, int h);

Segment slice(const std::vector<Trajectory>& trajs, const SegmentRef& ref, int h);

Segment sample_segment(const std::vector<Trajectory>& trajs, int h, Rng& rng);

double cumulative_reward(const Trajectory& traj);

// JSON-lines container: header line with schema version and CRC32 of the
// payload bytes, then one trajectory per line.
void save(const std::vector<Trajectory>& trajs, const std::filesystem::path& path);
std::vector<Trajectory> load(const std::filesystem::path& path);

void save_stats(const NormStats& stats, const std::filesystem::path& path);
NormStats load_stats(const std::filesystem::path& path);

}  // namespace gaitplan::data
