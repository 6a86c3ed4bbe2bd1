#include "gaitplan/align.hpp"

#include <cmath>

namespace gaitplan::align {

namespace {

double sigmoid(double z) {
  if (z >= 0.0) return 1.0 / (1.0 + std::exp(-z));
  double e = std::exp(z);
  return e / (1.0 + e);
}

// -log sigmoid(z), evaluated stably.
double softplus_neg(double z) {
  if (z >= 0.0) return std::log1p(std::exp(-z));
  return -z + std::log1p(std::exp(z));
}

}  // namespace

PairTensors pair_tensors(const pref::PreferencePair& pair, const data::NormStats& stats,
                         const diffusion::PlanShape& shape) {
  PairTensors t;
  t.x0_win = diffusion::plan_from_segment(pair.winner, stats, shape);
  t.cond_win = t.x0_win.head(shape.state_dim);
  t.x0_lose = diffusion::plan_from_segment(pair.loser, stats, shape);
  t.cond_lose = t.x0_lose.head(shape.state_dim);
  return t;
}

DpoEval dpo_loss_at(const nn::Mlp& net, const nn::Mlp& ref, const diffusion::NoiseSchedule& sched,
                    const diffusion::PlanShape& shape, int embed_dim, const PairTensors& pair,
                    const Eigen::Ref<const VecX>& mask, int k,
                    const Eigen::Ref<const VecX>& noise, const AlignConfig& cfg) {
  using diffusion::eval_noise_mse;
  diffusion::NoiseEval win_net = eval_noise_mse(net, sched, shape, embed_dim, pair.x0_win,
                                                pair.cond_win, k, noise, mask, true);
  diffusion::NoiseEval lose_net = eval_noise_mse(net, sched, shape, embed_dim, pair.x0_lose,
                                                 pair.cond_lose, k, noise, mask, true);
  diffusion::NoiseEval win_ref = eval_noise_mse(ref, sched, shape, embed_dim, pair.x0_win,
                                                pair.cond_win, k, noise, mask, true);
  diffusion::NoiseEval lose_ref = eval_noise_mse(ref, sched, shape, embed_dim, pair.x0_lose,
                                                 pair.cond_lose, k, noise, mask, true);

  double delta_win = win_net.mse - win_ref.mse;
  double delta_lose = lose_net.mse - lose_ref.mse;
  double logit_raw = -cfg.temperature * (delta_win - delta_lose) + cfg.bias;
  if (!std::isfinite(logit_raw))
    throw DivergenceError("dpo_loss: non-finite logit");

  DpoEval ev;
  ev.logit_raw = logit_raw;
  ev.clamped = std::abs(logit_raw) > cfg.logit_clamp;
  ev.logit = std::clamp(logit_raw, -cfg.logit_clamp, cfg.logit_clamp);
  ev.pref_loss = softplus_neg(ev.logit);
  ev.reg_loss = 0.5 * (win_net.mse + lose_net.mse);
  ev.loss = ev.pref_loss + cfg.mu * ev.reg_loss;

  // d pref / d delta_win = T (1 - s); the clamp has zero slope outside the band.
  double slope = ev.clamped ? 0.0 : cfg.temperature * (1.0 - sigmoid(ev.logit));
  double coeff_win = slope + 0.5 * cfg.mu;
  double coeff_lose = -slope + 0.5 * cfg.mu;
  ev.grads = diffusion::mse_backward(net, win_net, noise, mask, coeff_win);
  ev.grads.add_scaled(diffusion::mse_backward(net, lose_net, noise, mask, coeff_lose), 1.0);
  return ev;
}

DpoEval dpo_loss(const nn::Mlp& net, const nn::Mlp& ref, const diffusion::NoiseSchedule& sched,
                 const diffusion::PlanShape& shape, int embed_dim,
                 const pref::PreferencePair& pair, const data::NormStats& stats,
                 double action_weight, const AlignConfig& cfg, Rng& rng) {
  PairTensors t = pair_tensors(pair, stats, shape);
  VecX mask = diffusion::loss_mask(shape, action_weight);
  int k = rng.uniform_int(sched.steps);
  VecX noise = rng.normal_vec(shape.flat_dim());
  return dpo_loss_at(net, ref, sched, shape, embed_dim, t, mask, k, noise, cfg);
}

AlignResult align(const nn::Mlp& net, const std::vector<pref::PreferencePair>& pairs,
                  const data::NormStats& stats, const diffusion::NoiseSchedule& sched,
                  const diffusion::PlanShape& shape, int embed_dim, double action_weight,
                  const AlignConfig& cfg, Rng& rng) {
  GP_REQUIRE(!pairs.empty(), "align: empty preference set");
  GP_REQUIRE(cfg.temperature > 0.0 && cfg.mu >= 0.0, "align: need T > 0 and mu >= 0");

  AlignResult res;
  res.net = net;
  res.ref = net;  // frozen reference

  std::vector<PairTensors> tensors;
  tensors.reserve(pairs.size());
  for (const auto& p : pairs) tensors.push_back(pair_tensors(p, stats, shape));
  VecX mask = diffusion::loss_mask(shape, action_weight);

  nn::AdamState adam = nn::AdamState::zeros_like(res.net);
  std::vector<std::size_t> order(pairs.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;

  int step = 0;
  int guard_run = 0;
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    rng.shuffle(order);
    for (std::size_t start = 0; start < order.size(); start += cfg.batch_size) {
      std::size_t stop = std::min(order.size(), start + cfg.batch_size);
      nn::Gradients grads = nn::Gradients::zeros_like(res.net);
      double pref_sum = 0.0, reg_sum = 0.0, logit_sum = 0.0, abs_logit_sum = 0.0;
      int count = 0;
      for (std::size_t i = start; i < stop; ++i) {
        int k = rng.uniform_int(sched.steps);
        VecX noise = rng.normal_vec(shape.flat_dim());
        DpoEval ev = dpo_loss_at(res.net, res.ref, sched, shape, embed_dim, tensors[order[i]],
                                 mask, k, noise, cfg);
        grads.add_scaled(ev.grads, 1.0);
        pref_sum += ev.pref_loss;
        reg_sum += ev.reg_loss;
        logit_sum += ev.logit;
        abs_logit_sum += std::abs(ev.logit);
        ++count;
      }
      grads.scale(1.0 / count);
      nn::adam_step(res.net, grads, adam, cfg.lr);

      AlignLogEntry entry;
      entry.step = step++;
      entry.pref_loss = pref_sum / count;
      entry.reg_loss = reg_sum / count;
      entry.mean_logit = logit_sum / count;
      res.log.push_back(entry);

      guard_run = (abs_logit_sum / count > cfg.guard_logit) ? guard_run + 1 : 0;
      if (guard_run >= cfg.guard_steps) {
        res.diverged = true;
        res.diagnostic = "align: mean |logit| exceeded " + std::to_string(cfg.guard_logit) +
                         " for " + std::to_string(cfg.guard_steps) +
                         " consecutive steps (stopped at step " + std::to_string(step) + ")";
        return res;
      }
    }
  }
  return res;
}

double mean_logit(const nn::Mlp& net, const nn::Mlp& ref, const diffusion::NoiseSchedule& sched,
                  const diffusion::PlanShape& shape, int embed_dim,
                  const std::vector<pref::PreferencePair>& pairs, const data::NormStats& stats,
                  double action_weight, const AlignConfig& cfg, Rng& rng) {
  GP_REQUIRE(!pairs.empty(), "mean_logit: empty pair set");
  VecX mask = diffusion::loss_mask(shape, action_weight);
  double sum = 0.0;
  for (const auto& p : pairs) {
    PairTensors t = pair_tensors(p, stats, shape);
    int k = rng.uniform_int(sched.steps);
    VecX noise = rng.normal_vec(shape.flat_dim());
    DpoEval ev = dpo_loss_at(net, ref, sched, shape, embed_dim, t, mask, k, noise, cfg);
    sum += ev.logit;
  }
  return sum / static_cast<double>(pairs.size());
}

}  // namespace gaitplan::align
