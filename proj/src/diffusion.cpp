#include "gaitplan/diffusion.hpp"

#include <cmath>

namespace gaitplan::diffusion {

NoiseSchedule make_schedule(int steps, double beta_min, double beta_max) {
  GP_REQUIRE(steps >= 2, "make_schedule: need at least 2 diffusion steps");
  GP_REQUIRE(beta_min > 0.0 && beta_min <= beta_max && beta_max < 1.0,
             "make_schedule: need 0 < beta_min <= beta_max < 1");
  NoiseSchedule s;
  s.steps = steps;
  s.beta.resize(steps);
  s.alpha.resize(steps);
  s.alpha_bar.resize(steps);
  double prod = 1.0;
  for (int t = 0; t < steps; ++t) {
    s.beta[t] = beta_min + (beta_max - beta_min) * static_cast<double>(t) / (steps - 1);
    s.alpha[t] = 1.0 - s.beta[t];
    prod *= s.alpha[t];
    s.alpha_bar[t] = prod;
  }
  return s;
}

VecX loss_mask(const PlanShape& shape, double action_weight) {
  VecX mask(shape.flat_dim());
  for (int t = 0; t < shape.rows(); ++t) {
    int base = t * shape.row_dim();
    for (int j = 0; j < shape.state_dim; ++j) mask[base + j] = (t == 0) ? 0.0 : 1.0;
    for (int j = 0; j < shape.action_dim; ++j) mask[base + shape.state_dim + j] = action_weight;
  }
  return mask;
}

VecX q_sample(double alpha_bar_k, const Eigen::Ref<const VecX>& x0,
              const Eigen::Ref<const VecX>& noise) {
  GP_REQUIRE(x0.size() == noise.size(), "q_sample: shape mismatch");
  return std::sqrt(alpha_bar_k) * x0 + std::sqrt(1.0 - alpha_bar_k) * noise;
}

int denoiser_input_dim(const PlanShape& shape, int embed_dim) {
  return shape.flat_dim() + shape.cond_dim() + embed_dim + 1;
}

VecX denoiser_input(const PlanShape& shape, const Eigen::Ref<const VecX>& x_flat,
                    const Eigen::Ref<const VecX>& cond, int k, int embed_dim, bool conditioned) {
  GP_REQUIRE(x_flat.size() == shape.flat_dim(), "denoiser_input: plan tensor size mismatch");
  GP_REQUIRE(cond.size() == shape.state_dim, "denoiser_input: condition size mismatch");
  VecX in(denoiser_input_dim(shape, embed_dim));
  in.head(shape.flat_dim()) = x_flat;
  if (conditioned) {
    in.segment(shape.flat_dim(), shape.state_dim) = cond;
    if (shape.cond_extra > 0) {
      GP_REQUIRE(static_cast<bool>(shape.cond_features),
                 "denoiser_input: cond_extra set without a feature map");
      VecX extra = shape.cond_features(cond);
      GP_REQUIRE(extra.size() == shape.cond_extra, "denoiser_input: feature map size mismatch");
      in.segment(shape.flat_dim() + shape.state_dim, shape.cond_extra) = extra;
    }
  } else {
    in.segment(shape.flat_dim(), shape.cond_dim()).setZero();
  }
  in.segment(shape.flat_dim() + shape.cond_dim(), embed_dim) = nn::timestep_embedding(k, embed_dim);
  in[in.size() - 1] = conditioned ? 1.0 : 0.0;
  return in;
}

VecX plan_from_segment(const data::Segment& seg, const data::NormStats& stats,
                       const PlanShape& shape) {
  GP_REQUIRE(seg.length() == shape.rows(), "plan_from_segment: segment length != horizon + 1");
  GP_REQUIRE(seg.states.cols() == shape.state_dim && seg.actions.cols() == shape.action_dim,
             "plan_from_segment: feature dims mismatch");
  MatX states = seg.states;
  for (int f : shape.cyclic_features) {
    GP_REQUIRE(f >= 0 && f < shape.state_dim, "plan_from_segment: bad cyclic feature index");
    for (int t = 1; t < shape.rows(); ++t) {
      double delta = std::remainder(states(t, f) - states(t - 1, f), shape.cycle);
      states(t, f) = states(t - 1, f) + delta;
    }
  }
  VecX x(shape.flat_dim());
  for (int t = 0; t < shape.rows(); ++t) {
    int base = t * shape.row_dim();
    x.segment(base, shape.state_dim) =
        data::normalize(states.row(t).transpose(), stats.state_mean, stats.state_std);
    x.segment(base + shape.state_dim, shape.action_dim) =
        data::normalize(seg.actions.row(t).transpose(), stats.action_mean, stats.action_std);
  }
  return x;
}

namespace {

double masked_mse(const Eigen::Ref<const VecX>& noise, const Eigen::Ref<const VecX>& eps_hat,
                  const Eigen::Ref<const VecX>& mask, double denom) {
  return (mask.array() * (noise - eps_hat).array().square()).sum() / denom;
}

double mask_denom(const Eigen::Ref<const VecX>& mask) {
  double s = mask.sum();
  return s > 0.0 ? s : 1.0;
}

}  // namespace

NoiseEval eval_noise_mse(const nn::Mlp& net, const NoiseSchedule& schedule, const PlanShape& shape,
                         int embed_dim, const Eigen::Ref<const VecX>& x0,
                         const Eigen::Ref<const VecX>& cond, int k,
                         const Eigen::Ref<const VecX>& noise, const Eigen::Ref<const VecX>& mask,
                         bool conditioned) {
  GP_REQUIRE(k >= 0 && k < schedule.steps, "eval_noise_mse: diffusion step out of range");
  VecX x_k = q_sample(schedule.alpha_bar[k], x0, noise);
  x_k.head(shape.state_dim) = x0.head(shape.state_dim);  // condition slot is never corrupted
  NoiseEval ev;
  ev.input = denoiser_input(shape, x_k, cond, k, embed_dim, conditioned);
  ev.eps_hat = nn::forward(net, ev.input);
  ev.mse = masked_mse(noise, ev.eps_hat, mask, mask_denom(mask));
  return ev;
}

nn::Gradients mse_backward(const nn::Mlp& net, const NoiseEval& eval,
                           const Eigen::Ref<const VecX>& noise,
                           const Eigen::Ref<const VecX>& mask, double coeff) {
  double denom = mask_denom(mask);
  VecX out_grad =
      (2.0 * coeff / denom) * (mask.array() * (eval.eps_hat - noise).array()).matrix();
  return nn::backward(net, eval.input, out_grad);
}

BcLoss bc_loss_at(const nn::Mlp& net, const NoiseSchedule& schedule, const PlanShape& shape,
                  int embed_dim, const Eigen::Ref<const VecX>& x0,
                  const Eigen::Ref<const VecX>& cond, int k, const Eigen::Ref<const VecX>& noise,
                  const Eigen::Ref<const VecX>& mask, bool dropped) {
  NoiseEval ev = eval_noise_mse(net, schedule, shape, embed_dim, x0, cond, k, noise, mask,
                                /*conditioned=*/!dropped);
  if (!std::isfinite(ev.mse)) throw DivergenceError("bc_loss: non-finite loss");
  BcLoss out;
  out.loss = ev.mse;
  out.grads = mse_backward(net, ev, noise, mask, 1.0);
  out.k = k;
  out.dropped = dropped;
  return out;
}

BcLoss bc_loss(const nn::Mlp& net, const NoiseSchedule& schedule, const PlanShape& shape,
               int embed_dim, const data::Segment& seg, const data::NormStats& stats,
               double action_weight, double p_drop, Rng& rng) {
  VecX x0 = plan_from_segment(seg, stats, shape);
  VecX cond = x0.head(shape.state_dim);
  int k = rng.uniform_int(schedule.steps);
  VecX noise = rng.normal_vec(shape.flat_dim());
  bool dropped = p_drop > 0.0 && rng.uniform() < p_drop;
  VecX mask = loss_mask(shape, action_weight);
  return bc_loss_at(net, schedule, shape, embed_dim, x0, cond, k, noise, mask, dropped);
}

VecX cfg_blend(const Eigen::Ref<const VecX>& eps_cond, const Eigen::Ref<const VecX>& eps_uncond,
               double w) {
  GP_REQUIRE(eps_cond.size() == eps_uncond.size(), "cfg_blend: shape mismatch");
  return eps_cond + w * (eps_cond - eps_uncond);
}

std::vector<int> inference_steps(int K, int steps_infer) {
  GP_REQUIRE(steps_infer >= 1 && steps_infer <= K, "inference_steps: need 1 <= steps <= K");
  if (steps_infer == 1) return {K - 1};
  std::vector<int> seq;
  seq.reserve(steps_infer);
  for (int j = 0; j < steps_infer; ++j) {
    double v = static_cast<double>(K - 1) *
               (static_cast<double>(steps_infer - 1 - j) / (steps_infer - 1));
    int k = static_cast<int>(std::lround(v));
    if (!seq.empty() && k >= seq.back()) k = seq.back() - 1;  // keep strictly decreasing
    seq.push_back(k);
  }
  return seq;
}

namespace {

struct StepCoeffs {
  double eps_scale;   // beta_eff / sqrt(1 - abar_cur)
  double mean_scale;  // 1 / sqrt(alpha_eff)
  double sigma;       // sqrt(posterior variance)
};

StepCoeffs step_coeffs(const NoiseSchedule& schedule, int k_cur, int k_prev) {
  GP_REQUIRE(k_cur >= 0 && k_cur < schedule.steps, "denoise_step: k out of range");
  GP_REQUIRE(k_prev >= -1 && k_prev < k_cur, "denoise_step: need k_prev in [-1, k_cur)");
  double abar_cur = schedule.alpha_bar[k_cur];
  double abar_prev = k_prev >= 0 ? schedule.alpha_bar[k_prev] : 1.0;
  double beta_eff = 1.0 - abar_cur / abar_prev;
  StepCoeffs c;
  c.eps_scale = beta_eff / std::sqrt(1.0 - abar_cur);
  c.mean_scale = 1.0 / std::sqrt(abar_cur / abar_prev);
  c.sigma = std::sqrt((1.0 - abar_prev) / (1.0 - abar_cur) * beta_eff);
  return c;
}

}  // namespace

VecX denoise_step(const nn::Mlp& net, const NoiseSchedule& schedule, const PlanShape& shape,
                  int embed_dim, const Eigen::Ref<const VecX>& x, int k_cur, int k_prev,
                  const Eigen::Ref<const VecX>& cond, double w_cg, Rng& rng) {
  VecX x_in = x;
  x_in.head(shape.state_dim) = cond;

  VecX eps_c = nn::forward(net, denoiser_input(shape, x_in, cond, k_cur, embed_dim, true));
  VecX eps_u = nn::forward(net, denoiser_input(shape, x_in, cond, k_cur, embed_dim, false));
  VecX eps = cfg_blend(eps_c, eps_u, w_cg);

  StepCoeffs c = step_coeffs(schedule, k_cur, k_prev);
  VecX x_next = c.mean_scale * (x_in - c.eps_scale * eps);
  if (k_cur > 0) x_next += c.sigma * rng.normal_vec(shape.flat_dim());
  x_next.head(shape.state_dim) = cond;
  if (!x_next.allFinite()) throw DivergenceError("denoise_step: non-finite intermediate");
  return x_next;
}

namespace {

Plan split_plan(const VecX& x, const PlanShape& shape, const data::NormStats& stats,
                const Eigen::Ref<const VecX>& observation, double a_max) {
  Plan p;
  p.states.resize(shape.rows(), shape.state_dim);
  p.actions.resize(shape.rows(), shape.action_dim);
  for (int t = 0; t < shape.rows(); ++t) {
    int base = t * shape.row_dim();
    p.states.row(t) = data::denormalize(x.segment(base, shape.state_dim), stats.state_mean,
                                        stats.state_std)
                          .transpose();
    p.actions.row(t) = data::denormalize(x.segment(base + shape.state_dim, shape.action_dim),
                                         stats.action_mean, stats.action_std)
                           .transpose();
  }
  p.actions = p.actions.cwiseMax(0.0).cwiseMin(a_max);
  p.states.row(0) = observation.transpose();  // inpainting holds exactly at the output
  return p;
}

}  // namespace

Plan plan(const nn::Mlp& net, const NoiseSchedule& schedule, const PlanShape& shape, int embed_dim,
          const Eigen::Ref<const VecX>& observation, const data::NormStats& stats,
          int sampling_steps, double w_cg, double a_max, Rng& rng) {
  GP_REQUIRE(observation.size() == shape.state_dim, "plan: observation size mismatch");
  VecX cond = data::normalize(observation, stats.state_mean, stats.state_std);
  VecX x = rng.normal_vec(shape.flat_dim());
  x.head(shape.state_dim) = cond;
  std::vector<int> seq = inference_steps(schedule.steps, sampling_steps);
  for (std::size_t i = 0; i < seq.size(); ++i) {
    int k_prev = (i + 1 < seq.size()) ? seq[i + 1] : -1;
    x = denoise_step(net, schedule, shape, embed_dim, x, seq[i], k_prev, cond, w_cg, rng);
  }
  return split_plan(x, shape, stats, observation, a_max);
}

std::vector<Plan> plan_batch(const nn::Mlp& net, const NoiseSchedule& schedule,
                             const PlanShape& shape, int embed_dim,
                             const std::vector<VecX>& observations, const data::NormStats& stats,
                             int sampling_steps, double w_cg, double a_max,
                             std::vector<Rng>& rngs) {
  GP_REQUIRE(observations.size() == rngs.size(), "plan_batch: one rng stream per episode");
  int n = static_cast<int>(observations.size());
  if (n == 0) return {};

  int flat = shape.flat_dim();
  int in_dim = denoiser_input_dim(shape, embed_dim);
  MatX x(n, flat);
  MatX conds(n, shape.state_dim);
  for (int e = 0; e < n; ++e) {
    conds.row(e) =
        data::normalize(observations[e], stats.state_mean, stats.state_std).transpose();
    x.row(e) = rngs[e].normal_vec(flat).transpose();
    x.row(e).head(shape.state_dim) = conds.row(e);
  }

  std::vector<int> seq = inference_steps(schedule.steps, sampling_steps);
  MatX extras(n, shape.cond_extra);
  for (int e = 0; e < n; ++e)
    if (shape.cond_extra > 0)
      extras.row(e) = shape.cond_features(conds.row(e).transpose()).transpose();
  MatX inputs(2 * n, in_dim);
  for (std::size_t i = 0; i < seq.size(); ++i) {
    int k_cur = seq[i];
    int k_prev = (i + 1 < seq.size()) ? seq[i + 1] : -1;
    VecX embed = nn::timestep_embedding(k_cur, embed_dim);
    for (int e = 0; e < n; ++e) {
      inputs.row(e).head(flat) = x.row(e);
      inputs.row(e).segment(flat, shape.state_dim) = conds.row(e);
      if (shape.cond_extra > 0)
        inputs.row(e).segment(flat + shape.state_dim, shape.cond_extra) = extras.row(e);
      inputs.row(e).segment(flat + shape.cond_dim(), embed_dim) = embed.transpose();
      inputs(e, in_dim - 1) = 1.0;
      inputs.row(n + e).head(flat) = x.row(e);
      inputs.row(n + e).segment(flat, shape.cond_dim()).setZero();
      inputs.row(n + e).segment(flat + shape.cond_dim(), embed_dim) = embed.transpose();
      inputs(n + e, in_dim - 1) = 0.0;
    }
    MatX eps_all = nn::forward_batch(net, inputs);
    StepCoeffs c = step_coeffs(schedule, k_cur, k_prev);
    for (int e = 0; e < n; ++e) {
      VecX eps = cfg_blend(eps_all.row(e).transpose(), eps_all.row(n + e).transpose(), w_cg);
      VecX x_next = c.mean_scale * (x.row(e).transpose() - c.eps_scale * eps);
      if (k_cur > 0) x_next += c.sigma * rngs[e].normal_vec(flat);
      x_next.head(shape.state_dim) = conds.row(e).transpose();
      x.row(e) = x_next.transpose();
    }
  }
  if (!x.allFinite()) throw DivergenceError("plan_batch: non-finite plan tensor");

  std::vector<Plan> plans;
  plans.reserve(n);
  for (int e = 0; e < n; ++e)
    plans.push_back(split_plan(x.row(e).transpose(), shape, stats, observations[e], a_max));
  return plans;
}

std::vector<TrainLogEntry> train_bc(nn::Mlp& net, const NoiseSchedule& schedule,
                                    const PlanShape& shape,
                                    const std::vector<data::Trajectory>& trajs,
                                    const data::NormStats& stats, const TrainConfig& cfg,
                                    Rng& rng) {
  std::vector<data::SegmentRef> refs = data::valid_segments(trajs, shape.horizon);
  GP_REQUIRE(!refs.empty(), "train_bc: no segment of length horizon + 1 in the dataset");

  VecX mask = loss_mask(shape, cfg.action_weight);
  double denom = mask_denom(mask);
  int flat = shape.flat_dim();
  int in_dim = denoiser_input_dim(shape, cfg.embed_dim);
  int B = cfg.batch_size;

  nn::AdamState adam = nn::AdamState::zeros_like(net);
  std::vector<TrainLogEntry> log;
  log.reserve(cfg.steps);

  MatX inputs(B, in_dim);
  MatX noises(B, flat);
  for (int step = 0; step < cfg.steps; ++step) {
    for (int b = 0; b < B; ++b) {
      const data::SegmentRef& ref = refs[rng.uniform_int(static_cast<int>(refs.size()))];
      data::Segment seg = data::slice(trajs, ref, shape.horizon);
      VecX x0 = plan_from_segment(seg, stats, shape);
      VecX cond = x0.head(shape.state_dim);
      int k = rng.uniform_int(schedule.steps);
      VecX noise = rng.normal_vec(flat);
      bool dropped = cfg.p_drop > 0.0 && rng.uniform() < cfg.p_drop;
      VecX x_k = q_sample(schedule.alpha_bar[k], x0, noise);
      x_k.head(shape.state_dim) = cond;
      inputs.row(b) =
          denoiser_input(shape, x_k, cond, k, cfg.embed_dim, !dropped).transpose();
      noises.row(b) = noise.transpose();
    }
    MatX eps_hat = nn::forward_batch(net, inputs);
    MatX err = eps_hat - noises;
    double loss = 0.0;
    for (int b = 0; b < B; ++b)
      loss += (mask.array() * err.row(b).transpose().array().square()).sum() / denom;
    loss /= B;
    if (!std::isfinite(loss))
      throw DivergenceError("train_bc: non-finite loss at step " + std::to_string(step));

    MatX out_grads =
        (err.array().rowwise() * mask.transpose().array()) * (2.0 / (denom * B));
    nn::Gradients grads = nn::backward_batch(net, inputs, out_grads);
    nn::adam_step(net, grads, adam, cfg.lr);
    log.push_back({step, loss});
  }
  return log;
}

}  // namespace gaitplan::diffusion
