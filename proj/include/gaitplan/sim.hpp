#pragma once

#include <string>

#include "gaitplan/types.hpp"

namespace gaitplan::sim {

// Leg indexing: 0 = front-left, 1 = front-right, 2 = rear-left, 3 = rear-right.
constexpr int kNumLegs = 4;
constexpr int kStateDim = 12;   // v_cmd, v, tilt, 4 phases, 4 phase rates, clock
constexpr int kActionDim = 4;

struct ExpertGains {
  double omega_base = 0.125;
  double k_v = 0.4;
  double k_sync = 0.6;
};

struct EnvConfig {
  double k_drag = 0.05;         // velocity decay per step
  double c_prop = 0.10;         // propulsion per unit stance-leg phase increment
  double k_tilt = 0.008;        // left/right asymmetry coupling into tilt
  double k_tilt_decay = 0.02;   // tilt decay per step
  double coord_penalty = 0.01;  // tilt drift per unit of worst template deviation
  double tilt_fall = 0.5;       // rad; |tilt| beyond this ends the episode
  double a_max = 0.5;           // rad; action clamp ceiling
  double clock_rate = 1.0 / 50.0;
  double reset_jitter = 0.1;    // rad; phase perturbation bound at reset
  double v_cmd_min = 0.1;
  double v_cmd_max = 1.5;
  ExpertGains expert;
};

struct GaitTemplate {
  std::string name;   // pacing | trotting | bounding
  Vec4 offsets;       // target relative phase offsets, offsets[0] == 0
};

GaitTemplate gait_template(const std::string& name);

struct EnvState {
  double v_cmd = 0.0;
  double v = 0.0;
  double tilt = 0.0;
  Vec4 phases = Vec4::Zero();       // wrapped into [0, 2pi)
  Vec4 phase_rates = Vec4::Zero();  // realized increments of the previous step
  double clock = 0.0;               // [0, 1)

  VecX to_vector() const;
  static EnvState from_vector(const Eigen::Ref<const VecX>& x);
  bool all_finite() const;
};

struct StepResult {
  EnvState next;
  double reward = 0.0;
  bool done = false;  // tilt fall; budget exhaustion is handled by the rollout
};

double wrap_2pi(double a);
double wrap_pi(double a);

EnvState reset(const GaitTemplate& gait, double v_cmd, std::uint64_t seed, const EnvConfig& cfg);

StepResult step(const EnvState& state, const Eigen::Ref<const Vec4>& action,
                const GaitTemplate& gait, double disturbance, const EnvConfig& cfg);

Vec4 expert_action(const EnvState& state, const GaitTemplate& gait, const EnvConfig& cfg);

double cumulative_reward(const Eigen::Ref<const VecX>& rewards);

}  // namespace gaitplan::sim
