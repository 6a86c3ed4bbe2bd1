#pragma once

#include <functional>
#include <vector>

#include "gaitplan/data.hpp"
#include "gaitplan/nn.hpp"
#include "gaitplan/types.hpp"

namespace gaitplan::diffusion {

struct NoiseSchedule {
  int steps = 0;  // K
  VecX beta;      // linear beta_min..beta_max
  VecX alpha;     // 1 - beta
  VecX alpha_bar; // cumulative product, strictly decreasing
};

NoiseSchedule make_schedule(int steps, double beta_min, double beta_max);

// Joint state-action sequence of h+1 rows, flattened row-major:
// entry (t, j) lives at t * row_dim + j; each row is [state, action].
// The condition slot is the state portion of row 0. State features listed in
// cyclic_features are angles with the given period; segment rows after the
// first are unwrapped into a continuous branch so the model never has to fit
// the wrap seam.
struct PlanShape {
  int horizon = 0;
  int state_dim = 0;
  int action_dim = 0;
  std::vector<int> cyclic_features;
  double cycle = 2.0 * M_PI;

  // Optional derived condition features (angle trigs, template deviations and
  // the like) appended to the conditioning block; maps the normalized
  // observation to cond_extra values.
  int cond_extra = 0;
  std::function<VecX(const Eigen::Ref<const VecX>&)> cond_features;

  int rows() const { return horizon + 1; }
  int row_dim() const { return state_dim + action_dim; }
  int flat_dim() const { return rows() * row_dim(); }
  int cond_dim() const { return state_dim + cond_extra; }
};

// 0 on the condition slot, action_weight on every action entry, 1 elsewhere.
VecX loss_mask(const PlanShape& shape, double action_weight);

// x_k = sqrt(abar_k) x0 + sqrt(1 - abar_k) noise
VecX q_sample(double alpha_bar_k, const Eigen::Ref<const VecX>& x0,
              const Eigen::Ref<const VecX>& noise);

int denoiser_input_dim(const PlanShape& shape, int embed_dim);

// [flatten(x_k); condition (zeroed when unconditioned); timestep embedding; flag]
VecX denoiser_input(const PlanShape& shape, const Eigen::Ref<const VecX>& x_flat,
                    const Eigen::Ref<const VecX>& cond, int k, int embed_dim, bool conditioned);

// Normalized flat plan tensor built from a segment.
VecX plan_from_segment(const data::Segment& seg, const data::NormStats& stats,
                       const PlanShape& shape);

struct NoiseEval {
  double mse = 0.0;  // sum(mask * (noise - eps_hat)^2) / sum(mask)
  VecX input;        // assembled denoiser input, kept for the backward pass
  VecX eps_hat;
};

// Corrupts x0 at step k with the given noise, re-imposes the condition slot,
// and evaluates the masked prediction error.
NoiseEval eval_noise_mse(const nn::Mlp& net, const NoiseSchedule& schedule, const PlanShape& shape,
                         int embed_dim, const Eigen::Ref<const VecX>& x0,
                         const Eigen::Ref<const VecX>& cond, int k,
                         const Eigen::Ref<const VecX>& noise, const Eigen::Ref<const VecX>& mask,
                         bool conditioned);

// Parameter gradients of coeff * mse for a previous eval_noise_mse call.
nn::Gradients mse_backward(const nn::Mlp& net, const NoiseEval& eval,
                           const Eigen::Ref<const VecX>& noise,
                           const Eigen::Ref<const VecX>& mask, double coeff);

struct BcLoss {
  double loss = 0.0;
  nn::Gradients grads;
  int k = 0;
  bool dropped = false;
};

// Deterministic core: fixed diffusion step, noise draw, and dropout choice.
BcLoss bc_loss_at(const nn::Mlp& net, const NoiseSchedule& schedule, const PlanShape& shape,
                  int embed_dim, const Eigen::Ref<const VecX>& x0,
                  const Eigen::Ref<const VecX>& cond, int k, const Eigen::Ref<const VecX>& noise,
                  const Eigen::Ref<const VecX>& mask, bool dropped);

BcLoss bc_loss(const nn::Mlp& net, const NoiseSchedule& schedule, const PlanShape& shape,
               int embed_dim, const data::Segment& seg, const data::NormStats& stats,
               double action_weight, double p_drop, Rng& rng);

// eps_cond + w * (eps_cond - eps_uncond); algebraically (1+w) eps_cond - w eps_uncond,
// written so the w = 0 and eps_cond = eps_uncond identities hold exactly.
VecX cfg_blend(const Eigen::Ref<const VecX>& eps_cond, const Eigen::Ref<const VecX>& eps_uncond,
               double w);

// Evenly strided descending subsequence of {K-1 .. 0} of the given length.
std::vector<int> inference_steps(int K, int steps_infer);

// One reverse transition k_cur -> k_prev (k_prev = -1 denotes the clean sample).
// The condition slot is re-imposed before evaluation and after the update.
VecX denoise_step(const nn::Mlp& net, const NoiseSchedule& schedule, const PlanShape& shape,
                  int embed_dim, const Eigen::Ref<const VecX>& x, int k_cur, int k_prev,
                  const Eigen::Ref<const VecX>& cond, double w_cg, Rng& rng);

struct Plan {
  MatX states;   // (h+1) x d_s, denormalized; row 0 equals the conditioning observation
  MatX actions;  // (h+1) x d_a, denormalized, clamped to [0, a_max]
};

Plan plan(const nn::Mlp& net, const NoiseSchedule& schedule, const PlanShape& shape, int embed_dim,
          const Eigen::Ref<const VecX>& observation, const data::NormStats& stats,
          int sampling_steps, double w_cg, double a_max, Rng& rng);

// Lockstep planning for a cohort of episodes; one GEMM per denoiser call.
// Per-episode noise comes from the episode's own stream, so cohort membership
// does not perturb a given episode's draws.
std::vector<Plan> plan_batch(const nn::Mlp& net, const NoiseSchedule& schedule,
                             const PlanShape& shape, int embed_dim,
                             const std::vector<VecX>& observations, const data::NormStats& stats,
                             int sampling_steps, double w_cg, double a_max,
                             std::vector<Rng>& rngs);

struct TrainConfig {
  int steps = 6000;
  int batch_size = 64;
  double lr = 1e-3;
  double p_drop = 0.1;
  double action_weight = 10.0;
  int embed_dim = 16;
};

struct TrainLogEntry {
  int step = 0;
  double loss = 0.0;
};

std::vector<TrainLogEntry> train_bc(nn::Mlp& net, const NoiseSchedule& schedule,
                                    const PlanShape& shape,
                                    const std::vector<data::Trajectory>& trajs,
                                    const data::NormStats& stats, const TrainConfig& cfg,
                                    Rng& rng);

}  // namespace gaitplan::diffusion
