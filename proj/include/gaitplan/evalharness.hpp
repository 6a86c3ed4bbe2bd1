#pragma once

#include <string>
#include <vector>

#include "gaitplan/data.hpp"
#include "gaitplan/diffusion.hpp"
#include "gaitplan/sim.hpp"
#include "gaitplan/types.hpp"

namespace gaitplan::eval {

// Everything needed to run the diffusion planner closed loop.
struct PlannerSpec {
  const nn::Mlp* net = nullptr;
  const diffusion::NoiseSchedule* schedule = nullptr;
  diffusion::PlanShape shape;
  int embed_dim = 16;
  const data::NormStats* stats = nullptr;
  int sampling_steps = 10;
  double w_cg = 1e-4;
};

// Closed-loop episode: a fresh plan every `horizon` steps conditioned on the
// realized state; the first h actions of each plan are executed. Non-finite
// plans end the episode as a fall.
data::Trajectory rollout_episode(const PlannerSpec& planner, const sim::GaitTemplate& gait,
                                 double v_cmd, int max_steps, double disturbance_mag,
                                 const sim::EnvConfig& env, std::uint64_t seed);

data::Trajectory rollout_episode_expert(const sim::GaitTemplate& gait, double v_cmd,
                                        int max_steps, double disturbance_mag,
                                        const sim::EnvConfig& env, std::uint64_t seed);

// Lockstep cohort rollout; per-episode seeds are derived exactly as in the
// single-episode path.
std::vector<data::Trajectory> rollout_batch(const PlannerSpec& planner,
                                            const sim::GaitTemplate& gait, double v_cmd,
                                            int episodes, int max_steps, double disturbance_mag,
                                            const sim::EnvConfig& env, std::uint64_t base_seed);

struct SeedStats {
  int seed_index = 0;
  double stability_pct = 0.0;
  double mean_velocity = 0.0;
  int falls = 0;
};

struct EvalReport {
  std::string policy;
  std::string gait;
  double v_cmd = 0.0;
  double disturbance = 0.0;
  int episodes = 0;
  std::vector<SeedStats> per_seed;
  double stability_mean = 0.0;
  double velocity_mean = 0.0;
  std::vector<int> fall_histogram;  // fall step binned by kFallBinWidth
  std::string fingerprint;
};

constexpr int kFallBinWidth = 25;

// Pure recount of metrics from saved trajectories.
EvalReport summarize(const std::vector<std::vector<data::Trajectory>>& per_seed_trajs,
                     int max_steps);

enum class PolicyKind { kExpert, kPlanner };

EvalReport evaluate(PolicyKind kind, const PlannerSpec* planner, const sim::GaitTemplate& gait,
                    double v_cmd, int episodes, int seeds, int max_steps, double disturbance_mag,
                    const sim::EnvConfig& env, std::uint64_t run_seed,
                    std::vector<std::vector<data::Trajectory>>* keep_trajs = nullptr);

// Centered moving average with shrinking windows at the boundaries.
VecX velocity_trace(const data::Trajectory& traj, int window = 10);

}  // namespace gaitplan::eval
