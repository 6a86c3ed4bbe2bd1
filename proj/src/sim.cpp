#include "gaitplan/sim.hpp"

#include <cmath>

namespace gaitplan::sim {

double wrap_2pi(double a) {
  double w = std::fmod(a, 2.0 * M_PI);
  if (w < 0.0) w += 2.0 * M_PI;
  return w;
}

double wrap_pi(double a) {
  double w = std::fmod(a + M_PI, 2.0 * M_PI);
  if (w < 0.0) w += 2.0 * M_PI;
  return w - M_PI;
}

GaitTemplate gait_template(const std::string& name) {
  GaitTemplate g;
  g.name = name;
  if (name == "pacing") {
    g.offsets << 0.0, M_PI, 0.0, M_PI;  // lateral pairs
  } else if (name == "trotting") {
    g.offsets << 0.0, M_PI, M_PI, 0.0;  // diagonal pairs
  } else if (name == "bounding") {
    g.offsets << 0.0, 0.0, M_PI, M_PI;  // front/rear pairs
  } else {
    throw ConfigError("unknown gait '" + name + "' (expected pacing|trotting|bounding)");
  }
  return g;
}

VecX EnvState::to_vector() const {
  VecX x(kStateDim);
  x[0] = v_cmd;
  x[1] = v;
  x[2] = tilt;
  x.segment<4>(3) = phases;
  x.segment<4>(7) = phase_rates;
  x[11] = clock;
  return x;
}

EnvState EnvState::from_vector(const Eigen::Ref<const VecX>& x) {
  GP_REQUIRE(x.size() == kStateDim, "EnvState::from_vector: expected 12 entries");
  EnvState s;
  s.v_cmd = x[0];
  s.v = x[1];
  s.tilt = x[2];
  s.phases = x.segment<4>(3);
  s.phase_rates = x.segment<4>(7);
  s.clock = x[11];
  return s;
}

bool EnvState::all_finite() const {
  return std::isfinite(v_cmd) && std::isfinite(v) && std::isfinite(tilt) &&
         phases.allFinite() && phase_rates.allFinite() && std::isfinite(clock);
}

EnvState reset(const GaitTemplate& gait, double v_cmd, std::uint64_t seed, const EnvConfig& cfg) {
  GP_REQUIRE(v_cmd >= cfg.v_cmd_min && v_cmd <= cfg.v_cmd_max,
             "reset: v_cmd " + std::to_string(v_cmd) + " outside [" +
                 std::to_string(cfg.v_cmd_min) + ", " + std::to_string(cfg.v_cmd_max) + "]");
  Rng rng(seed);
  EnvState s;
  s.v_cmd = v_cmd;
  for (int i = 0; i < kNumLegs; ++i)
    s.phases[i] = wrap_2pi(gait.offsets[i] + rng.uniform(-cfg.reset_jitter, cfg.reset_jitter));
  return s;
}

StepResult step(const EnvState& state, const Eigen::Ref<const Vec4>& action,
                const GaitTemplate& gait, double disturbance, const EnvConfig& cfg) {
  GP_REQUIRE(state.all_finite() && action.allFinite() && std::isfinite(disturbance),
             "step: non-finite input");

  Vec4 a = action.cwiseMax(0.0).cwiseMin(cfg.a_max);

  EnvState n = state;
  for (int i = 0; i < kNumLegs; ++i) n.phases[i] = wrap_2pi(state.phases[i] + a[i]);
  n.phase_rates = a;

  double drive = 0.0;
  for (int i = 0; i < kNumLegs; ++i)
    if (std::sin(n.phases[i]) < 0.0) drive += a[i];
  n.v = (1.0 - cfg.k_drag) * state.v + cfg.c_prop * drive + disturbance;

  double asym = (std::sin(n.phases[0]) + std::sin(n.phases[2])) -
                (std::sin(n.phases[1]) + std::sin(n.phases[3]));
  double maxdev = 0.0;
  for (int i = 0; i < kNumLegs; ++i)
    maxdev = std::max(maxdev, std::abs(wrap_pi(n.phases[i] - n.phases[0] - gait.offsets[i])));
  n.tilt = (1.0 - cfg.k_tilt_decay) * state.tilt + cfg.k_tilt * asym + cfg.coord_penalty * maxdev;

  n.clock = state.clock + cfg.clock_rate;
  n.clock -= std::floor(n.clock);

  StepResult r;
  r.reward = std::exp(-std::abs(n.v - state.v_cmd)) - 0.1 * std::abs(n.tilt);
  r.done = std::abs(n.tilt) > cfg.tilt_fall;
  r.next = n;
  return r;
}

Vec4 expert_action(const EnvState& state, const GaitTemplate& gait, const EnvConfig& cfg) {
  GP_REQUIRE(state.all_finite(), "expert_action: non-finite state");
  const ExpertGains& g = cfg.expert;
  Vec4 a;
  for (int i = 0; i < kNumLegs; ++i) {
    double sync = wrap_pi(state.phases[0] + gait.offsets[i] - state.phases[i]);
    double raw = g.omega_base + g.k_v * (state.v_cmd - state.v) + g.k_sync * sync;
    a[i] = std::min(std::max(raw, 0.0), cfg.a_max);
  }
  return a;
}

double cumulative_reward(const Eigen::Ref<const VecX>& rewards) {
  GP_REQUIRE(rewards.size() > 0, "cumulative_reward: empty trajectory");
  double sum = 0.0;
  for (Eigen::Index i = 0; i < rewards.size(); ++i) sum += rewards[i];
  return sum;
}

}  // namespace gaitplan::sim
