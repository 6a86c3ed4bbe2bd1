#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include "gaitplan/sim.hpp"
#include "gaitplan/types.hpp"

namespace gaitplan::cfg {

struct EnvBlock {
  double k_drag = 0.05;
  double c_prop = 0.10;
  double k_tilt = 0.008;
  double k_tilt_decay = 0.02;
  double coord_penalty = 0.01;
  double tilt_fall = 0.5;
  double a_max = 0.5;
  double clock_rate = 1.0 / 50.0;
  double reset_jitter = 0.1;
  double expert_omega_base = 0.125;
  double expert_k_v = 0.4;
  double expert_k_sync = 0.6;
  double delta_collect = 0.02;   // disturbance during expert data collection
  double delta_rollout = 0.05;   // disturbance during planner rollouts
  double delta_eval = 0.02;      // disturbance during evaluation

  sim::EnvConfig to_env() const;
};

struct DataBlock {
  int expert_episodes = 256;
  int planner_episodes = 128;
  int max_steps = 250;
  double collect_jitter = 0.5;        // reset jitter during expert collection
  double collect_action_noise = 0.01; // exploration noise during expert collection
  double collect_kick_prob = 0.08;    // per-step per-leg phase push probability
  double collect_kick_mag = 0.35;     // phase push bound, rad
  double collect_phase_noise = 0.06;  // per-step per-leg phase jitter, rad
};

struct DiffusionBlock {
  int horizon = 15;
  int steps = 20;           // training diffusion steps K
  double beta_min = 1e-4;
  double beta_max = 0.2;
  std::vector<int> hidden = {256, 256, 256};
  int embed_dim = 16;
  int batch_size = 64;
  int train_steps = 6000;
  double lr = 1e-3;
  double p_drop = 0.1;
  double action_loss_weight = 10.0;
  int sampling_steps = 10;
  double w_cg = 1e-4;
};

struct PreferenceBlock {
  double beta = 0.5;
  int pairs = 256;
  std::string mode = "weak";
};

struct AlignBlock {
  double temperature = 500.0;
  double bias = 0.0;
  double mu = 1.0;
  double lr = 1e-4;
  int epochs = 8;
  int batch_size = 16;
};

struct EvalBlock {
  int episodes = 64;
  int seeds = 3;
  int trace_episodes = 1;
  int trace_window = 10;
};

struct AblateBlock {
  std::vector<double> pair_scales = {0.5, 1.0, 1.5};
};

struct RunConfig {
  std::uint64_t seed = 0;
  std::vector<std::string> gaits = {"pacing", "trotting", "bounding"};
  std::vector<double> v_cmds = {0.5};
  EnvBlock env;
  DataBlock data;
  DiffusionBlock diffusion;
  PreferenceBlock preference;
  AlignBlock align;
  EvalBlock eval;
  AblateBlock ablate;

  // Fully resolved config as canonical JSON (sorted keys, defaults applied).
  std::string canonical_json() const;
  std::string fingerprint() const;
};

// Loads (optionally) a config file, applies --set key=value overrides, and
// validates; unknown keys are rejected with every offending path listed.
RunConfig load_config(const std::filesystem::path* file,
                      const std::vector<std::string>& overrides);

RunConfig config_from_json_text(const std::string& text);

std::string format_double(double v);  // shortest round-trip formatting

}  // namespace gaitplan::cfg
