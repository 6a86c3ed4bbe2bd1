#pragma once

#include <string>
#include <vector>

#include "gaitplan/diffusion.hpp"
#include "gaitplan/preference.hpp"
#include "gaitplan/types.hpp"

namespace gaitplan::align {

struct AlignConfig {
  double temperature = 500.0;
  double bias = 0.0;
  double mu = 1.0;
  double lr = 1e-4;
  int epochs = 8;
  int batch_size = 16;
  double logit_clamp = 30.0;
  double guard_logit = 25.0;  // divergence guard threshold on mean |logit|
  int guard_steps = 100;
};

// Winner and loser as normalized flat plan tensors.
struct PairTensors {
  VecX x0_win, cond_win;
  VecX x0_lose, cond_lose;
};

PairTensors pair_tensors(const pref::PreferencePair& pair, const data::NormStats& stats,
                         const diffusion::PlanShape& shape);

struct DpoEval {
  double loss = 0.0;
  double pref_loss = 0.0;
  double reg_loss = 0.0;
  double logit = 0.0;      // after clamping
  double logit_raw = 0.0;  // -T (delta_win - delta_lose) + b
  bool clamped = false;
  nn::Gradients grads;
};

// Deterministic core with a shared diffusion step and noise draw for both
// segments; the reference branch contributes no gradient.
DpoEval dpo_loss_at(const nn::Mlp& net, const nn::Mlp& ref, const diffusion::NoiseSchedule& sched,
                    const diffusion::PlanShape& shape, int embed_dim, const PairTensors& pair,
                    const Eigen::Ref<const VecX>& mask, int k,
                    const Eigen::Ref<const VecX>& noise, const AlignConfig& cfg);

DpoEval dpo_loss(const nn::Mlp& net, const nn::Mlp& ref, const diffusion::NoiseSchedule& sched,
                 const diffusion::PlanShape& shape, int embed_dim,
                 const pref::PreferencePair& pair, const data::NormStats& stats,
                 double action_weight, const AlignConfig& cfg, Rng& rng);

struct AlignLogEntry {
  int step = 0;
  double pref_loss = 0.0;
  double reg_loss = 0.0;
  double mean_logit = 0.0;
};

struct AlignResult {
  nn::Mlp net;
  nn::Mlp ref;  // snapshot taken before the first update, never touched
  std::vector<AlignLogEntry> log;
  bool diverged = false;
  std::string diagnostic;
};

AlignResult align(const nn::Mlp& net, const std::vector<pref::PreferencePair>& pairs,
                  const data::NormStats& stats, const diffusion::NoiseSchedule& sched,
                  const diffusion::PlanShape& shape, int embed_dim, double action_weight,
                  const AlignConfig& cfg, Rng& rng);

// Mean clamped logit over a pair set with freshly sampled (k, noise); used for
// held-out separation checks.
double mean_logit(const nn::Mlp& net, const nn::Mlp& ref, const diffusion::NoiseSchedule& sched,
                  const diffusion::PlanShape& shape, int embed_dim,
                  const std::vector<pref::PreferencePair>& pairs, const data::NormStats& stats,
                  double action_weight, const AlignConfig& cfg, Rng& rng);

}  // namespace gaitplan::align
