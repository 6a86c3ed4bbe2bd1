#include "gaitplan/evalharness.hpp"

#include <cmath>

namespace gaitplan::eval {

namespace {

// Stream tags inside an episode seed.
constexpr std::uint64_t kDisturbStream = 0;
constexpr std::uint64_t kResetStream = 1;
constexpr std::uint64_t kPlanStream = 2;
// Seed path tags.
constexpr std::uint64_t kEvalSeedTag = 9001;

struct EpisodeRecorder {
  MatX states, actions;
  VecX rewards;
  std::vector<std::uint8_t> dones;
  int steps = 0;

  explicit EpisodeRecorder(int max_steps)
      : states(max_steps, sim::kStateDim),
        actions(max_steps, sim::kActionDim),
        rewards(max_steps),
        dones(max_steps, 0) {}

  void record(const sim::EnvState& s, const sim::StepResult& r) {
    states.row(steps) = s.to_vector();
    actions.row(steps) = r.next.phase_rates;
    rewards[steps] = r.reward;
    dones[steps] = r.done ? 1 : 0;
    ++steps;
  }

  data::Trajectory finish(const sim::GaitTemplate& gait, double v_cmd, std::uint64_t seed,
                          const std::string& source, bool fell, int fall_step, int max_steps) {
    data::Trajectory t;
    t.meta.gait = gait.name;
    t.meta.v_cmd = v_cmd;
    t.meta.seed = seed;
    t.meta.source = source;
    t.meta.fell = fell;
    t.meta.fall_step = fall_step;
    if (!fell && steps == max_steps && steps > 0) dones[steps - 1] = 1;
    t.states = states.topRows(steps);
    t.actions = actions.topRows(steps);
    t.rewards = rewards.head(steps);
    t.dones.assign(dones.begin(), dones.begin() + steps);
    return t;
  }
};

}  // namespace

data::Trajectory rollout_episode(const PlannerSpec& planner, const sim::GaitTemplate& gait,
                                 double v_cmd, int max_steps, double disturbance_mag,
                                 const sim::EnvConfig& env, std::uint64_t seed) {
  GP_REQUIRE(planner.net && planner.schedule && planner.stats, "rollout_episode: planner unset");
  Rng dist_rng(Rng::derive(seed, {kDisturbStream}));
  Rng plan_rng(Rng::derive(seed, {kPlanStream}));
  sim::EnvState state = reset(gait, v_cmd, Rng::derive(seed, {kResetStream}), env);

  EpisodeRecorder rec(max_steps);
  bool fell = false;
  int fall_step = -1;
  int h = planner.shape.horizon;
  diffusion::Plan current;

  for (int t = 0; t < max_steps; ++t) {
    if (t % h == 0) {
      bool bad_plan = false;
      try {
        current = diffusion::plan(*planner.net, *planner.schedule, planner.shape,
                                  planner.embed_dim, state.to_vector(), *planner.stats,
                                  planner.sampling_steps, planner.w_cg, env.a_max, plan_rng);
      } catch (const DivergenceError&) {
        bad_plan = true;
      }
      if (bad_plan || !current.actions.allFinite()) {
        fell = true;
        fall_step = t;
        break;
      }
    }
    Vec4 a = current.actions.row(t % h).transpose();
    double d = disturbance_mag > 0.0 ? dist_rng.uniform(-disturbance_mag, disturbance_mag) : 0.0;
    sim::StepResult r = sim::step(state, a, gait, d, env);
    rec.record(state, r);
    state = r.next;
    if (r.done) {
      fell = true;
      fall_step = t;
      break;
    }
  }
  return rec.finish(gait, v_cmd, seed, "planner", fell, fall_step, max_steps);
}

data::Trajectory rollout_episode_expert(const sim::GaitTemplate& gait, double v_cmd,
                                        int max_steps, double disturbance_mag,
                                        const sim::EnvConfig& env, std::uint64_t seed) {
  Rng dist_rng(Rng::derive(seed, {kDisturbStream}));
  sim::EnvState state = reset(gait, v_cmd, Rng::derive(seed, {kResetStream}), env);
  EpisodeRecorder rec(max_steps);
  bool fell = false;
  int fall_step = -1;
  for (int t = 0; t < max_steps; ++t) {
    Vec4 a = sim::expert_action(state, gait, env);
    double d = disturbance_mag > 0.0 ? dist_rng.uniform(-disturbance_mag, disturbance_mag) : 0.0;
    sim::StepResult r = sim::step(state, a, gait, d, env);
    rec.record(state, r);
    state = r.next;
    if (r.done) {
      fell = true;
      fall_step = t;
      break;
    }
  }
  return rec.finish(gait, v_cmd, seed, "expert", fell, fall_step, max_steps);
}

std::vector<data::Trajectory> rollout_batch(const PlannerSpec& planner,
                                            const sim::GaitTemplate& gait, double v_cmd,
                                            int episodes, int max_steps, double disturbance_mag,
                                            const sim::EnvConfig& env, std::uint64_t base_seed) {
  GP_REQUIRE(planner.net && planner.schedule && planner.stats, "rollout_batch: planner unset");
  GP_REQUIRE(episodes >= 1, "rollout_batch: episodes must be >= 1");
  int h = planner.shape.horizon;

  struct Ep {
    std::uint64_t seed;
    Rng dist_rng, plan_rng;
    sim::EnvState state;
    EpisodeRecorder rec;
    diffusion::Plan current;
    bool running = true, fell = false;
    int fall_step = -1;
  };

  std::vector<Ep> eps;
  eps.reserve(episodes);
  for (int e = 0; e < episodes; ++e) {
    std::uint64_t seed = Rng::derive(base_seed, {static_cast<std::uint64_t>(e)});
    eps.push_back(Ep{seed, Rng(Rng::derive(seed, {kDisturbStream})),
                     Rng(Rng::derive(seed, {kPlanStream})),
                     reset(gait, v_cmd, Rng::derive(seed, {kResetStream}), env),
                     EpisodeRecorder(max_steps), {}, true, false, -1});
  }

  for (int t = 0; t < max_steps; ++t) {
    if (t % h == 0) {
      std::vector<int> alive;
      std::vector<VecX> obs;
      std::vector<Rng> rngs;
      for (int e = 0; e < episodes; ++e) {
        if (!eps[e].running) continue;
        alive.push_back(e);
        obs.push_back(eps[e].state.to_vector());
        rngs.push_back(eps[e].plan_rng);
      }
      if (alive.empty()) break;
      std::vector<diffusion::Plan> plans;
      bool batch_bad = false;
      try {
        plans = diffusion::plan_batch(*planner.net, *planner.schedule, planner.shape,
                                      planner.embed_dim, obs, *planner.stats,
                                      planner.sampling_steps, planner.w_cg, env.a_max, rngs);
      } catch (const DivergenceError&) {
        batch_bad = true;  // a non-finite cohort plan fells every alive episode
      }
      for (std::size_t i = 0; i < alive.size(); ++i) {
        Ep& ep = eps[alive[i]];
        ep.plan_rng = rngs[i];  // advance the stream
        if (batch_bad || !plans[i].actions.allFinite()) {
          ep.running = false;
          ep.fell = true;
          ep.fall_step = t;
        } else {
          ep.current = std::move(plans[i]);
        }
      }
    }
    for (int e = 0; e < episodes; ++e) {
      Ep& ep = eps[e];
      if (!ep.running) continue;
      Vec4 a = ep.current.actions.row(t % h).transpose();
      double d = disturbance_mag > 0.0
                     ? ep.dist_rng.uniform(-disturbance_mag, disturbance_mag)
                     : 0.0;
      sim::StepResult r = sim::step(ep.state, a, gait, d, env);
      ep.rec.record(ep.state, r);
      ep.state = r.next;
      if (r.done) {
        ep.running = false;
        ep.fell = true;
        ep.fall_step = t;
      }
    }
  }

  std::vector<data::Trajectory> out;
  out.reserve(episodes);
  for (auto& ep : eps)
    out.push_back(
        ep.rec.finish(gait, v_cmd, ep.seed, "planner", ep.fell, ep.fall_step, max_steps));
  return out;
}

EvalReport summarize(const std::vector<std::vector<data::Trajectory>>& per_seed_trajs,
                     int max_steps) {
  EvalReport rep;
  rep.fall_histogram.assign((max_steps + kFallBinWidth - 1) / kFallBinWidth, 0);
  double stab_sum = 0.0, vel_sum = 0.0;
  for (std::size_t s = 0; s < per_seed_trajs.size(); ++s) {
    const auto& trajs = per_seed_trajs[s];
    SeedStats st;
    st.seed_index = static_cast<int>(s);
    long steps = 0;
    double v_acc = 0.0;
    for (const auto& t : trajs) {
      if (t.meta.fell) {
        ++st.falls;
        if (t.meta.fall_step >= 0)
          ++rep.fall_histogram[std::min<std::size_t>(t.meta.fall_step / kFallBinWidth,
                                                     rep.fall_histogram.size() - 1)];
      }
      for (int i = 0; i < t.length(); ++i) v_acc += t.states(i, 1);
      steps += t.length();
    }
    int n = static_cast<int>(trajs.size());
    st.stability_pct = n > 0 ? 100.0 * (n - st.falls) / n : 0.0;
    st.mean_velocity = steps > 0 ? v_acc / steps : 0.0;
    rep.per_seed.push_back(st);
    stab_sum += st.stability_pct;
    vel_sum += st.mean_velocity;
    rep.episodes = n;
  }
  if (!rep.per_seed.empty()) {
    rep.stability_mean = stab_sum / rep.per_seed.size();
    rep.velocity_mean = vel_sum / rep.per_seed.size();
  }
  return rep;
}

EvalReport evaluate(PolicyKind kind, const PlannerSpec* planner, const sim::GaitTemplate& gait,
                    double v_cmd, int episodes, int seeds, int max_steps, double disturbance_mag,
                    const sim::EnvConfig& env, std::uint64_t run_seed,
                    std::vector<std::vector<data::Trajectory>>* keep_trajs) {
  GP_REQUIRE(episodes >= 1 && seeds >= 1, "evaluate: need episodes >= 1 and seeds >= 1");
  std::vector<std::vector<data::Trajectory>> per_seed;
  per_seed.reserve(seeds);
  for (int s = 0; s < seeds; ++s) {
    std::uint64_t base = Rng::derive(run_seed, {kEvalSeedTag, static_cast<std::uint64_t>(s)});
    if (kind == PolicyKind::kPlanner) {
      per_seed.push_back(rollout_batch(*planner, gait, v_cmd, episodes, max_steps,
                                       disturbance_mag, env, base));
    } else {
      std::vector<data::Trajectory> trajs;
      trajs.reserve(episodes);
      for (int e = 0; e < episodes; ++e)
        trajs.push_back(rollout_episode_expert(
            gait, v_cmd, max_steps, disturbance_mag, env,
            Rng::derive(base, {static_cast<std::uint64_t>(e)})));
      per_seed.push_back(std::move(trajs));
    }
  }
  EvalReport rep = summarize(per_seed, max_steps);
  rep.gait = gait.name;
  rep.v_cmd = v_cmd;
  rep.disturbance = disturbance_mag;
  rep.policy = kind == PolicyKind::kPlanner ? "planner" : "expert";
  if (keep_trajs) *keep_trajs = std::move(per_seed);
  return rep;
}

VecX velocity_trace(const data::Trajectory& traj, int window) {
  GP_REQUIRE(traj.length() > 0, "velocity_trace: empty trajectory");
  GP_REQUIRE(window >= 1, "velocity_trace: window must be >= 1");
  int n = traj.length();
  VecX out(n);
  for (int i = 0; i < n; ++i) {
    int lo = std::max(0, i - (window - 1) / 2);
    int hi = std::min(n - 1, i + window / 2);
    double sum = 0.0;
    for (int j = lo; j <= hi; ++j) sum += traj.states(j, 1);
    out[i] = sum / (hi - lo + 1);
  }
  return out;
}

}  // namespace gaitplan::eval
