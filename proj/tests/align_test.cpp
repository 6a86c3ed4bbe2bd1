#include <doctest.h>

#include <cmath>

#include "gaitplan/align.hpp"

using namespace gaitplan;

namespace {

diffusion::PlanShape micro_shape() {
  diffusion::PlanShape s;
  s.horizon = 2;
  s.state_dim = 2;
  s.action_dim = 1;
  return s;
}
constexpr int kEmbed = 4;
constexpr double kActionWeight = 10.0;

data::NormStats identity_stats(const diffusion::PlanShape& s) {
  data::NormStats st;
  st.state_mean = VecX::Zero(s.state_dim);
  st.state_std = VecX::Ones(s.state_dim);
  st.action_mean = VecX::Zero(s.action_dim);
  st.action_std = VecX::Ones(s.action_dim);
  return st;
}

data::Segment random_segment(Rng& rng, const diffusion::PlanShape& s, int traj, int start) {
  data::Segment seg;
  seg.states = MatX(s.rows(), s.state_dim);
  seg.actions = MatX(s.rows(), s.action_dim);
  for (int t = 0; t < s.rows(); ++t) {
    seg.states.row(t) = rng.normal_vec(s.state_dim).transpose();
    seg.actions.row(t) = rng.normal_vec(s.action_dim).transpose();
  }
  seg.rewards = rng.normal_vec(s.rows());
  seg.origin = {traj, start};
  return seg;
}

pref::PreferencePair random_pair(Rng& rng, const diffusion::PlanShape& s) {
  pref::PreferencePair p;
  p.winner = random_segment(rng, s, 0, 0);
  p.loser = random_segment(rng, s, 1, 0);
  p.margin = 1.0;
  p.provenance = "weak";
  return p;
}

nn::Mlp micro_net(Rng& rng, const diffusion::PlanShape& s) {
  int in = diffusion::denoiser_input_dim(s, kEmbed);
  return nn::make_mlp({in, 6, s.flat_dim()}, rng);
}

bool nets_identical(const nn::Mlp& a, const nn::Mlp& b) {
  if (a.layer_sizes != b.layer_sizes) return false;
  for (int l = 0; l < a.num_layers(); ++l) {
    if ((a.weights[l] - b.weights[l]).cwiseAbs().maxCoeff() != 0.0) return false;
    if ((a.biases[l] - b.biases[l]).cwiseAbs().maxCoeff() != 0.0) return false;
  }
  return true;
}

}  // namespace

TEST_CASE("net = ref gives the -log 0.5 preference term on every pair") {
  diffusion::PlanShape shape = micro_shape();
  diffusion::NoiseSchedule sched = diffusion::make_schedule(2, 0.1, 0.2);
  data::NormStats stats = identity_stats(shape);
  Rng rng(1);
  nn::Mlp net = micro_net(rng, shape);
  align::AlignConfig cfg;
  for (int i = 0; i < 20; ++i) {
    pref::PreferencePair pair = random_pair(rng, shape);
    align::DpoEval ev =
        align::dpo_loss(net, net, sched, shape, kEmbed, pair, stats, kActionWeight, cfg, rng);
    CHECK(ev.logit == 0.0);
    CHECK(std::abs(ev.pref_loss - std::log(2.0)) < 1e-12);
  }
}

TEST_CASE("mu = 0 with identical winner and loser is -log 0.5 for any net") {
  diffusion::PlanShape shape = micro_shape();
  diffusion::NoiseSchedule sched = diffusion::make_schedule(2, 0.1, 0.2);
  data::NormStats stats = identity_stats(shape);
  Rng rng(2);
  align::AlignConfig cfg;
  cfg.mu = 0.0;
  for (int i = 0; i < 10; ++i) {
    nn::Mlp net = micro_net(rng, shape);
    nn::Mlp ref = micro_net(rng, shape);  // unrelated reference
    pref::PreferencePair pair = random_pair(rng, shape);
    pair.loser = pair.winner;
    align::DpoEval ev =
        align::dpo_loss(net, ref, sched, shape, kEmbed, pair, stats, kActionWeight, cfg, rng);
    CHECK(ev.logit == 0.0);
    CHECK(std::abs(ev.loss - std::log(2.0)) < 1e-12);
  }
}

TEST_CASE("dpo gradients match finite differences on the micro instance") {
  diffusion::PlanShape shape = micro_shape();
  diffusion::NoiseSchedule sched = diffusion::make_schedule(2, 0.1, 0.2);
  data::NormStats stats = identity_stats(shape);
  Rng rng(3);
  nn::Mlp net = micro_net(rng, shape);
  nn::Mlp ref = micro_net(rng, shape);
  REQUIRE(net.parameter_count() <= 200);

  align::AlignConfig cfg;  // T = 500, b = 0, mu = 1
  pref::PreferencePair pair = random_pair(rng, shape);
  align::PairTensors tensors = align::pair_tensors(pair, stats, shape);
  VecX mask = diffusion::loss_mask(shape, kActionWeight);
  int k = 1;
  VecX noise = rng.normal_vec(shape.flat_dim());

  align::DpoEval base = align::dpo_loss_at(net, ref, sched, shape, kEmbed, tensors, mask, k,
                                           noise, cfg);
  const double step = 1e-5;
  double max_rel = 0.0;
  auto probe = [&](double& param, double analytic) {
    double saved = param;
    param = saved + step;
    double up =
        align::dpo_loss_at(net, ref, sched, shape, kEmbed, tensors, mask, k, noise, cfg).loss;
    param = saved - step;
    double down =
        align::dpo_loss_at(net, ref, sched, shape, kEmbed, tensors, mask, k, noise, cfg).loss;
    param = saved;
    double fd = (up - down) / (2.0 * step);
    double denom = std::max({std::abs(fd), std::abs(analytic), 1e-8});
    max_rel = std::max(max_rel, std::abs(fd - analytic) / denom);
  };
  for (int l = 0; l < net.num_layers(); ++l) {
    for (Eigen::Index i = 0; i < net.weights[l].rows(); ++i)
      for (Eigen::Index j = 0; j < net.weights[l].cols(); ++j)
        probe(net.weights[l](i, j), base.grads.weights[l](i, j));
    for (Eigen::Index i = 0; i < net.biases[l].size(); ++i)
      probe(net.biases[l][i], base.grads.biases[l][i]);
  }
  CHECK(max_rel < 1e-4);
}

TEST_CASE("swapping winner and loser negates the centered logit bitwise") {
  diffusion::PlanShape shape = micro_shape();
  diffusion::NoiseSchedule sched = diffusion::make_schedule(2, 0.1, 0.2);
  data::NormStats stats = identity_stats(shape);
  Rng rng(4);
  align::AlignConfig cfg;
  cfg.bias = 0.25;
  for (int i = 0; i < 20; ++i) {
    nn::Mlp net = micro_net(rng, shape);
    nn::Mlp ref = micro_net(rng, shape);
    pref::PreferencePair fwd = random_pair(rng, shape);
    pref::PreferencePair swapped = fwd;
    std::swap(swapped.winner, swapped.loser);

    align::PairTensors tf = align::pair_tensors(fwd, stats, shape);
    align::PairTensors ts = align::pair_tensors(swapped, stats, shape);
    VecX mask = diffusion::loss_mask(shape, kActionWeight);
    VecX noise = rng.normal_vec(shape.flat_dim());
    align::DpoEval a = align::dpo_loss_at(net, ref, sched, shape, kEmbed, tf, mask, 1, noise,
                                          cfg);
    align::DpoEval b = align::dpo_loss_at(net, ref, sched, shape, kEmbed, ts, mask, 1, noise,
                                          cfg);
    CHECK(a.logit_raw - cfg.bias == -(b.logit_raw - cfg.bias));
  }
}

TEST_CASE("preference term is bounded below by 0 and equals -log sigmoid(b) at net = ref") {
  diffusion::PlanShape shape = micro_shape();
  diffusion::NoiseSchedule sched = diffusion::make_schedule(2, 0.1, 0.2);
  data::NormStats stats = identity_stats(shape);
  Rng rng(5);
  for (double b : {-1.5, 0.0, 2.0}) {
    align::AlignConfig cfg;
    cfg.bias = b;
    nn::Mlp net = micro_net(rng, shape);
    pref::PreferencePair pair = random_pair(rng, shape);
    align::DpoEval ev =
        align::dpo_loss(net, net, sched, shape, kEmbed, pair, stats, kActionWeight, cfg, rng);
    CHECK(ev.pref_loss >= 0.0);
    double expect = -std::log(1.0 / (1.0 + std::exp(-b)));
    CHECK(ev.pref_loss == doctest::Approx(expect).epsilon(1e-12));
  }
}

TEST_CASE("zero epochs leave the parameters untouched") {
  diffusion::PlanShape shape = micro_shape();
  diffusion::NoiseSchedule sched = diffusion::make_schedule(2, 0.1, 0.2);
  data::NormStats stats = identity_stats(shape);
  Rng rng(6);
  nn::Mlp net = micro_net(rng, shape);
  std::vector<pref::PreferencePair> pairs = {random_pair(rng, shape)};
  align::AlignConfig cfg;
  cfg.epochs = 0;
  align::AlignResult res =
      align::align(net, pairs, stats, sched, shape, kEmbed, kActionWeight, cfg, rng);
  CHECK(nets_identical(res.net, net));
  CHECK(res.log.empty());
}

TEST_CASE("the reference snapshot is bit-identical before and after align") {
  diffusion::PlanShape shape = micro_shape();
  diffusion::NoiseSchedule sched = diffusion::make_schedule(2, 0.1, 0.2);
  data::NormStats stats = identity_stats(shape);
  Rng rng(7);
  nn::Mlp net = micro_net(rng, shape);
  std::vector<pref::PreferencePair> pairs;
  for (int i = 0; i < 8; ++i) pairs.push_back(random_pair(rng, shape));
  align::AlignConfig cfg;
  cfg.epochs = 3;
  cfg.batch_size = 4;
  cfg.lr = 1e-3;
  align::AlignResult res =
      align::align(net, pairs, stats, sched, shape, kEmbed, kActionWeight, cfg, rng);
  CHECK(nets_identical(res.ref, net));       // frozen copy of the input
  CHECK(!nets_identical(res.net, net));      // training moved the live net
  CHECK(!res.diverged);
  CHECK(static_cast<int>(res.log.size()) == 3 * 2);
}

TEST_CASE("alignment separates synthetic winner/loser pairs (3 seeds)") {
  diffusion::PlanShape shape = micro_shape();
  diffusion::NoiseSchedule sched = diffusion::make_schedule(8, 1e-3, 0.2);
  data::NormStats stats = identity_stats(shape);

  for (std::uint64_t seed : {11, 12, 13}) {
    Rng rng(seed);
    // winners follow a smooth consistent pattern, losers are noise-corrupted copies
    auto make_winner = [&](int idx) {
      data::Segment seg;
      seg.states = MatX(shape.rows(), shape.state_dim);
      seg.actions = MatX(shape.rows(), shape.action_dim);
      double phi = 0.3 * idx;
      for (int t = 0; t < shape.rows(); ++t) {
        seg.states(t, 0) = std::sin(phi + 0.2 * t);
        seg.states(t, 1) = std::cos(phi + 0.2 * t);
        seg.actions(t, 0) = 0.5 * std::sin(phi + 0.2 * t + 1.0);
      }
      seg.rewards = VecX::Ones(shape.rows());
      seg.origin = {idx, 0};
      return seg;
    };
    std::vector<pref::PreferencePair> train_pairs, holdout;
    for (int i = 0; i < 48; ++i) {
      pref::PreferencePair p;
      p.winner = make_winner(i);
      p.loser = p.winner;
      p.loser.states.array() += 1.5;  // consistent off-manifold shift
      p.loser.actions.array() -= 0.8;
      p.margin = 1.0;
      p.provenance = "weak";
      (i < 40 ? train_pairs : holdout).push_back(std::move(p));
    }

    Rng init(seed + 50);
    nn::Mlp net = micro_net(init, shape);
    nn::Mlp ref = net;

    align::AlignConfig cfg;
    cfg.epochs = 30;
    cfg.batch_size = 8;
    cfg.lr = 3e-3;
    cfg.temperature = 500.0;

    Rng hrng1(seed + 60);
    double before = align::mean_logit(net, ref, sched, shape, kEmbed, holdout, stats,
                                      kActionWeight, cfg, hrng1);
    Rng arng(seed + 70);
    align::AlignResult res =
        align::align(net, train_pairs, stats, sched, shape, kEmbed, kActionWeight, cfg, arng);
    REQUIRE(!res.diverged);
    Rng hrng2(seed + 60);
    double after = align::mean_logit(res.net, res.ref, sched, shape, kEmbed, holdout, stats,
                                     kActionWeight, cfg, hrng2);
    CHECK(after > before);
    CHECK(after > 0.0);
  }
}

TEST_CASE("divergence guard aborts with a diagnostic") {
  diffusion::PlanShape shape = micro_shape();
  diffusion::NoiseSchedule sched = diffusion::make_schedule(2, 0.1, 0.2);
  data::NormStats stats = identity_stats(shape);
  Rng rng(9);
  nn::Mlp net = micro_net(rng, shape);
  std::vector<pref::PreferencePair> pairs;
  for (int i = 0; i < 4; ++i) pairs.push_back(random_pair(rng, shape));

  align::AlignConfig cfg;
  cfg.temperature = 1e12;  // logits saturate immediately
  cfg.epochs = 200;
  cfg.batch_size = 2;
  cfg.guard_steps = 100;
  align::AlignResult res =
      align::align(net, pairs, stats, sched, shape, kEmbed, kActionWeight, cfg, rng);
  CHECK(res.diverged);
  CHECK(res.diagnostic.find("consecutive") != std::string::npos);
  // aborted long before the full schedule of epochs * 2 batches
  CHECK(static_cast<int>(res.log.size()) >= cfg.guard_steps);
  CHECK(static_cast<int>(res.log.size()) < cfg.epochs);
}
