#include "gaitplan/cli.hpp"

#include <cstdlib>
#include <fcntl.h>
#include <unistd.h>

#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>

#include <CLI11.hpp>
#include <json.hpp>

#include "gaitplan/align.hpp"
#include "gaitplan/config.hpp"
#include "gaitplan/data.hpp"
#include "gaitplan/diffusion.hpp"
#include "gaitplan/evalharness.hpp"
#include "gaitplan/preference.hpp"
#include "gaitplan/types.hpp"

namespace gaitplan::cli {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

namespace streamtag {
constexpr std::uint64_t kExpert = 101;
constexpr std::uint64_t kBcInit = 102;
constexpr std::uint64_t kBcTrain = 103;
constexpr std::uint64_t kRollout = 104;
constexpr std::uint64_t kLabel = 105;
constexpr std::uint64_t kAlign = 106;
constexpr std::uint64_t kEval = 107;
constexpr std::uint64_t kUntrained = 108;
constexpr std::uint64_t kAblate = 109;
}  // namespace streamtag

struct Args {
  fs::path run;
  std::optional<fs::path> config_file;
  std::vector<std::string> overrides;
  bool force = false;
  std::string policy = "bc";
};

struct Stage {
  cfg::RunConfig config;
  std::string fp;
  fs::path run;
  bool force = false;

  fs::path path(const std::string& name) const { return run / name; }
};

// Exclusive writer lock on the run directory.
class RunLock {
 public:
  explicit RunLock(const fs::path& run) : path_(run / ".lock") {
    int fd = ::open(path_.c_str(), O_CREAT | O_EXCL | O_WRONLY, 0644);
    if (fd < 0)
      throw PrereqError("run directory is locked by another gaitplan process (" +
                        path_.string() + "; remove it if stale)");
    ::close(fd);
  }
  ~RunLock() {
    std::error_code ec;
    fs::remove(path_, ec);
  }
  RunLock(const RunLock&) = delete;
  RunLock& operator=(const RunLock&) = delete;

 private:
  fs::path path_;
};

json load_manifest(const Stage& st) {
  std::ifstream in(st.path("manifest.json"));
  if (!in.good()) return json{{"format", "gaitplan-manifest"}, {"version", 1},
                              {"stages", json::object()}};
  json j;
  in >> j;
  return j;
}

void write_manifest(const Stage& st, const json& manifest) {
  std::ofstream out(st.path("manifest.json"), std::ios::binary);
  GP_REQUIRE(out.good(), "cannot write manifest.json");
  out << manifest.dump(2) << "\n";
}

bool stage_cached(const Stage& st, const json& manifest, const std::string& key,
                  const std::vector<std::string>& outputs) {
  if (st.force) return false;
  if (!manifest["stages"].contains(key)) return false;
  if (manifest["stages"][key].value("fingerprint", "") != st.fp) return false;
  for (const auto& o : outputs)
    if (!fs::exists(st.path(o))) return false;
  return true;
}

void record_stage(Stage& st, json& manifest, const std::string& key,
                  const std::vector<std::string>& inputs, const std::vector<std::string>& outputs,
                  const json& info = json::object()) {
  manifest["stages"][key] = {{"fingerprint", st.fp},
                             {"seed", st.config.seed},
                             {"inputs", inputs},
                             {"outputs", outputs},
                             {"info", info}};
  write_manifest(st, manifest);
}

void write_resolved_config(const Stage& st) {
  std::ofstream out(st.path("config.resolved.json"), std::ios::binary);
  GP_REQUIRE(out.good(), "cannot write config.resolved.json");
  out << st.config.canonical_json();
}

std::string speed_tag(double v) { return cfg::format_double(v); }

std::string expert_file(const std::string& gait) { return gait + "_expert.jsonl"; }
std::string planner_file(const std::string& gait) { return gait + "_planner.jsonl"; }
std::string bc_ckpt(const std::string& gait) { return "bc_" + gait + ".ckpt.json"; }
std::string aligned_ckpt(const std::string& gait) { return "aligned_" + gait + ".ckpt.json"; }
std::string trainlog_file(const std::string& gait) { return "trainlog_" + gait + ".json"; }
std::string alignlog_file(const std::string& gait) { return "alignlog_" + gait + ".json"; }
std::string prefs_file(const std::string& gait, const std::string& mode) {
  return "prefs_" + gait + "_" + mode + ".jsonl";
}
std::string eval_csv(const std::string& gait, double v) {
  return "eval_" + gait + "_" + speed_tag(v) + ".csv";
}
std::string eval_json(const std::string& gait, double v) {
  return "eval_" + gait + "_" + speed_tag(v) + ".json";
}

void require_artifact(const Stage& st, const std::string& name, const std::string& produced_by) {
  if (!fs::exists(st.path(name)))
    throw PrereqError("missing artifact '" + name + "'; run the '" + produced_by +
                      "' stage first");
}

diffusion::PlanShape plan_shape(const cfg::RunConfig& c) {
  diffusion::PlanShape s;
  s.horizon = c.diffusion.horizon;
  s.state_dim = sim::kStateDim;
  s.action_dim = sim::kActionDim;
  s.cyclic_features = {3, 4, 5, 6};  // leg phases
  return s;
}

// Derived condition features: per-leg phase trig, wrapped deviation from the
// gait template, and the velocity tracking error. These make the recovery
// behavior in the data linearly readable instead of hiding it behind wrapped
// angle differences.
constexpr int kCondExtra = 13;

diffusion::PlanShape plan_shape(const cfg::RunConfig& c, const sim::GaitTemplate& gait,
                                const data::NormStats& stats) {
  diffusion::PlanShape s = plan_shape(c);
  s.cond_extra = kCondExtra;
  VecX mean = stats.state_mean;
  VecX sdev = stats.state_std;
  Vec4 offsets = gait.offsets;
  s.cond_features = [mean, sdev, offsets](const Eigen::Ref<const VecX>& z) {
    VecX raw = z.cwiseProduct(sdev) + mean;
    VecX f(kCondExtra);
    for (int i = 0; i < 4; ++i) {
      f[i] = std::sin(raw[3 + i]);
      f[4 + i] = std::cos(raw[3 + i]);
      f[8 + i] = sim::wrap_pi(raw[3 + i] - raw[3] - offsets[i]);
    }
    f[12] = raw[0] - raw[1];
    return f;
  };
  return s;
}

std::vector<int> net_arch(const cfg::RunConfig& c, const diffusion::PlanShape& shape) {
  std::vector<int> arch;
  arch.push_back(diffusion::denoiser_input_dim(shape, c.diffusion.embed_dim));
  for (int hsz : c.diffusion.hidden) arch.push_back(hsz);
  arch.push_back(shape.flat_dim());
  return arch;
}

nn::Mlp make_denoiser(const cfg::RunConfig& c, const diffusion::PlanShape& shape, Rng& rng) {
  // conditioning block [condition; derived features; embedding; flag] is
  // re-fed to every hidden layer
  int context = shape.cond_dim() + c.diffusion.embed_dim + 1;
  return nn::make_mlp(net_arch(c, shape), rng, context);
}

json diffusion_meta(const cfg::RunConfig& c) {
  return {{"horizon", c.diffusion.horizon},   {"steps", c.diffusion.steps},
          {"beta_min", c.diffusion.beta_min}, {"beta_max", c.diffusion.beta_max},
          {"embed_dim", c.diffusion.embed_dim}, {"hidden", c.diffusion.hidden},
          {"cond_extra", kCondExtra}};
}

nn::Mlp load_planner_net(const Stage& st, const std::string& name,
                         const std::string& produced_by) {
  require_artifact(st, name, produced_by);
  std::string meta_text;
  nn::Mlp net = nn::load_checkpoint(st.path(name), nullptr, &meta_text);
  json meta = json::parse(meta_text);
  if (meta != diffusion_meta(st.config))
    throw ConfigError("checkpoint '" + name +
                      "' was produced with different diffusion settings than the current config");
  return net;
}

struct PlannerBundle {
  nn::Mlp net;
  diffusion::NoiseSchedule schedule;
  data::NormStats stats;
  diffusion::PlanShape shape;
  int embed_dim = 0;
  int sampling_steps = 0;
  double w_cg = 0.0;

  eval::PlannerSpec spec() const {
    eval::PlannerSpec s;
    s.net = &net;
    s.schedule = &schedule;
    s.shape = shape;
    s.embed_dim = embed_dim;
    s.stats = &stats;
    s.sampling_steps = sampling_steps;
    s.w_cg = w_cg;
    return s;
  }
};

PlannerBundle make_bundle(const Stage& st, const sim::GaitTemplate& gait, nn::Mlp net) {
  PlannerBundle b;
  b.net = std::move(net);
  b.schedule = diffusion::make_schedule(st.config.diffusion.steps, st.config.diffusion.beta_min,
                                        st.config.diffusion.beta_max);
  b.stats = data::load_stats(st.path("norm_stats.json"));
  b.shape = plan_shape(st.config, gait, b.stats);
  b.embed_dim = st.config.diffusion.embed_dim;
  b.sampling_steps = st.config.diffusion.sampling_steps;
  b.w_cg = st.config.diffusion.w_cg;
  return b;
}

void write_train_log(const fs::path& path, const std::vector<diffusion::TrainLogEntry>& log,
                     const std::string& fp) {
  json entries = json::array();
  for (const auto& e : log) entries.push_back({e.step, e.loss});
  json j = {{"format", "gaitplan-train-log"}, {"version", 1}, {"fingerprint", fp},
            {"entries", entries}};
  std::ofstream out(path, std::ios::binary);
  out << j.dump() << "\n";
}

void write_align_log(const fs::path& path, const std::vector<align::AlignLogEntry>& log,
                     bool diverged, const std::string& fp) {
  json entries = json::array();
  for (const auto& e : log) entries.push_back({e.step, e.pref_loss, e.reg_loss, e.mean_logit});
  json j = {{"format", "gaitplan-align-log"}, {"version", 1},    {"fingerprint", fp},
            {"diverged", diverged},           {"entries", entries}};
  std::ofstream out(path, std::ios::binary);
  out << j.dump() << "\n";
}

// ----- stages ---------------------------------------------------------------

void stage_gen_expert(Stage& st, json& manifest) {
  std::vector<std::string> outputs;
  for (const auto& g : st.config.gaits) outputs.push_back(expert_file(g));
  outputs.push_back("norm_stats.json");
  if (stage_cached(st, manifest, "gen-expert", outputs)) {
    std::cout << "gen-expert: cached\n";
    return;
  }

  sim::EnvConfig env = st.config.env.to_env();
  std::vector<data::Trajectory> all;
  json info = json::object();
  for (std::size_t gi = 0; gi < st.config.gaits.size(); ++gi) {
    const std::string& gname = st.config.gaits[gi];
    sim::GaitTemplate gait = sim::gait_template(gname);
    std::vector<data::Trajectory> trajs;
    for (std::size_t vi = 0; vi < st.config.v_cmds.size(); ++vi) {
      double v = st.config.v_cmds[vi];
      auto policy = [&gait, &env](const sim::EnvState& s) {
        return sim::expert_action(s, gait, env);
      };
      data::CollectOptions opts;
      opts.reset_jitter = st.config.data.collect_jitter;
      opts.action_noise = st.config.data.collect_action_noise;
      opts.phase_kick_prob = st.config.data.collect_kick_prob;
      opts.phase_kick_mag = st.config.data.collect_kick_mag;
      opts.phase_noise = st.config.data.collect_phase_noise;
      auto batch = data::collect(policy, gait, v, st.config.data.expert_episodes,
                                 st.config.data.max_steps,
                                 Rng::derive(st.config.seed, {streamtag::kExpert, gi, vi}),
                                 st.config.env.delta_collect, env, "expert", opts);
      trajs.insert(trajs.end(), batch.begin(), batch.end());
    }
    int falls = 0;
    for (const auto& t : trajs) falls += t.meta.fell ? 1 : 0;
    info[gname] = {{"episodes", trajs.size()}, {"falls", falls}};
    std::cout << "gen-expert: " << gname << " " << trajs.size() << " episodes, " << falls
              << " falls\n";
    data::save(trajs, st.path(expert_file(gname)));
    all.insert(all.end(), trajs.begin(), trajs.end());
  }
  data::save_stats(data::fit_norm(all), st.path("norm_stats.json"));
  record_stage(st, manifest, "gen-expert", {}, outputs, info);
}

void stage_train_bc(Stage& st, json& manifest) {
  std::vector<std::string> outputs;
  for (const auto& g : st.config.gaits) {
    outputs.push_back(bc_ckpt(g));
    outputs.push_back(trainlog_file(g));
  }
  if (stage_cached(st, manifest, "train-bc", outputs)) {
    std::cout << "train-bc: cached\n";
    return;
  }
  require_artifact(st, "norm_stats.json", "gen-expert");
  data::NormStats stats = data::load_stats(st.path("norm_stats.json"));
  diffusion::NoiseSchedule sched = diffusion::make_schedule(
      st.config.diffusion.steps, st.config.diffusion.beta_min, st.config.diffusion.beta_max);

  json info = json::object();
  for (std::size_t gi = 0; gi < st.config.gaits.size(); ++gi) {
    const std::string& gname = st.config.gaits[gi];
    require_artifact(st, expert_file(gname), "gen-expert");
    auto trajs = data::load(st.path(expert_file(gname)));
    diffusion::PlanShape shape = plan_shape(st.config, sim::gait_template(gname), stats);

    Rng init_rng(Rng::derive(st.config.seed, {streamtag::kBcInit, gi}));
    nn::Mlp net = make_denoiser(st.config, shape, init_rng);

    diffusion::TrainConfig tc;
    tc.steps = st.config.diffusion.train_steps;
    tc.batch_size = st.config.diffusion.batch_size;
    tc.lr = st.config.diffusion.lr;
    tc.p_drop = st.config.diffusion.p_drop;
    tc.action_weight = st.config.diffusion.action_loss_weight;
    tc.embed_dim = st.config.diffusion.embed_dim;

    Rng train_rng(Rng::derive(st.config.seed, {streamtag::kBcTrain, gi}));
    auto log = diffusion::train_bc(net, sched, shape, trajs, stats, tc, train_rng);

    nn::save_checkpoint(net, st.path(bc_ckpt(gname)), st.fp, diffusion_meta(st.config).dump());
    write_train_log(st.path(trainlog_file(gname)), log, st.fp);
    double first = log.empty() ? 0.0 : log.front().loss;
    double last = log.empty() ? 0.0 : log.back().loss;
    info[gname] = {{"first_loss", first}, {"final_loss", last}};
    std::cout << "train-bc: " << gname << " loss " << first << " -> " << last << "\n";
  }
  record_stage(st, manifest, "train-bc", {"norm_stats.json"}, outputs, info);
}

void stage_rollout(Stage& st, json& manifest) {
  std::vector<std::string> outputs;
  for (const auto& g : st.config.gaits) outputs.push_back(planner_file(g));
  if (stage_cached(st, manifest, "rollout", outputs)) {
    std::cout << "rollout: cached\n";
    return;
  }
  require_artifact(st, "norm_stats.json", "gen-expert");
  sim::EnvConfig env = st.config.env.to_env();

  for (std::size_t gi = 0; gi < st.config.gaits.size(); ++gi) {
    const std::string& gname = st.config.gaits[gi];
    PlannerBundle b = make_bundle(st, sim::gait_template(gname),
                                  load_planner_net(st, bc_ckpt(gname), "train-bc"));
    std::vector<data::Trajectory> trajs;
    for (std::size_t vi = 0; vi < st.config.v_cmds.size(); ++vi) {
      auto batch = eval::rollout_batch(
          b.spec(), sim::gait_template(gname), st.config.v_cmds[vi],
          st.config.data.planner_episodes, st.config.data.max_steps,
          st.config.env.delta_rollout, env,
          Rng::derive(st.config.seed, {streamtag::kRollout, gi, vi}));
      trajs.insert(trajs.end(), batch.begin(), batch.end());
    }
    int falls = 0;
    for (const auto& t : trajs) falls += t.meta.fell ? 1 : 0;
    std::cout << "rollout: " << gname << " " << trajs.size() << " episodes, " << falls
              << " falls\n";
    data::save(trajs, st.path(planner_file(gname)));
  }
  record_stage(st, manifest, "rollout", {"norm_stats.json"}, outputs);
}

double agreement_rate(const std::vector<pref::PreferencePair>& pairs) {
  if (pairs.empty()) return 0.0;
  int agree = 0;
  for (const auto& p : pairs) {
    double rw = p.winner.rewards.sum();
    double rl = p.loser.rewards.sum();
    agree += (rw >= rl) ? 1 : 0;
  }
  return static_cast<double>(agree) / static_cast<double>(pairs.size());
}

void stage_label(Stage& st, json& manifest) {
  const std::string mode = st.config.preference.mode;
  std::string key = "label:" + mode;
  std::vector<std::string> outputs;
  for (const auto& g : st.config.gaits) outputs.push_back(prefs_file(g, mode));
  if (stage_cached(st, manifest, key, outputs)) {
    std::cout << "label: cached\n";
    return;
  }
  require_artifact(st, "norm_stats.json", "gen-expert");
  data::NormStats stats = data::load_stats(st.path("norm_stats.json"));

  json info = json::object();
  for (std::size_t gi = 0; gi < st.config.gaits.size(); ++gi) {
    const std::string& gname = st.config.gaits[gi];
    require_artifact(st, expert_file(gname), "gen-expert");
    require_artifact(st, planner_file(gname), "rollout");
    auto experts = data::load(st.path(expert_file(gname)));
    auto planner_trajs = data::load(st.path(planner_file(gname)));

    std::size_t opt = pref::select_optimal_expert(experts);
    pref::ExpertIndex index = pref::build_index(experts[opt], stats);

    Rng rng(Rng::derive(st.config.seed, {streamtag::kLabel, gi}));
    auto pairs = pref::build_preference_dataset(planner_trajs, index, st.config.preference.pairs,
                                                st.config.diffusion.horizon,
                                                pref::label_mode(mode), rng);
    pref::save_pairs(pairs, mode, st.config.diffusion.horizon, st.path(prefs_file(gname, mode)));

    double agree = agreement_rate(pairs);
    info[gname] = {{"pairs", pairs.size()},
                   {"optimal_expert", opt},
                   {"weak_strong_agreement", agree}};
    std::cout << "label: " << gname << " " << pairs.size() << " " << mode
              << " pairs, reward agreement " << agree << "\n";
  }
  record_stage(st, manifest, key, {"norm_stats.json"}, outputs, info);
}

align::AlignConfig align_config(const cfg::RunConfig& c) {
  align::AlignConfig a;
  a.temperature = c.align.temperature;
  a.bias = c.align.bias;
  a.mu = c.align.mu;
  a.lr = c.align.lr;
  a.epochs = c.align.epochs;
  a.batch_size = c.align.batch_size;
  return a;
}

void stage_align(Stage& st, json& manifest) {
  const std::string mode = st.config.preference.mode;
  std::vector<std::string> outputs;
  for (const auto& g : st.config.gaits) {
    outputs.push_back(aligned_ckpt(g));
    outputs.push_back(alignlog_file(g));
  }
  if (stage_cached(st, manifest, "align", outputs)) {
    std::cout << "align: cached\n";
    return;
  }
  require_artifact(st, "norm_stats.json", "gen-expert");
  data::NormStats stats = data::load_stats(st.path("norm_stats.json"));
  diffusion::NoiseSchedule sched = diffusion::make_schedule(
      st.config.diffusion.steps, st.config.diffusion.beta_min, st.config.diffusion.beta_max);

  json info = json::object();
  for (std::size_t gi = 0; gi < st.config.gaits.size(); ++gi) {
    const std::string& gname = st.config.gaits[gi];
    diffusion::PlanShape shape = plan_shape(st.config, sim::gait_template(gname), stats);
    nn::Mlp net = load_planner_net(st, bc_ckpt(gname), "train-bc");
    require_artifact(st, prefs_file(gname, mode), "label");
    require_artifact(st, planner_file(gname), "rollout");
    auto planner_trajs = data::load(st.path(planner_file(gname)));
    auto pairs = pref::load_pairs(st.path(prefs_file(gname, mode)), planner_trajs,
                                  st.config.diffusion.horizon);

    Rng rng(Rng::derive(st.config.seed, {streamtag::kAlign, gi}));
    align::AlignResult res =
        align::align(net, pairs, stats, sched, shape, st.config.diffusion.embed_dim,
                     st.config.diffusion.action_loss_weight, align_config(st.config), rng);
    write_align_log(st.path(alignlog_file(gname)), res.log, res.diverged, st.fp);
    if (res.diverged) throw DivergenceError("align: " + gname + ": " + res.diagnostic);

    nn::save_checkpoint(res.net, st.path(aligned_ckpt(gname)), st.fp,
                        diffusion_meta(st.config).dump());
    double final_logit = res.log.empty() ? 0.0 : res.log.back().mean_logit;
    info[gname] = {{"steps", res.log.size()}, {"final_mean_logit", final_logit}};
    std::cout << "align: " << gname << " " << res.log.size() << " steps, final mean logit "
              << final_logit << "\n";
  }
  record_stage(st, manifest, "align", {"norm_stats.json"}, outputs, info);
}

void write_eval_artifacts(Stage& st, const eval::EvalReport& rep, const std::string& policy,
                          const std::string& gname, double v,
                          const std::vector<std::vector<data::Trajectory>>& trajs,
                          int* trace_counter) {
  {
    std::ofstream out(st.path(eval_csv(gname, v)), std::ios::binary);
    out << "fingerprint,policy,gait,v_cmd,delta,seed,episodes,stability_pct,mean_velocity,"
           "falls\n";
    for (const auto& s : rep.per_seed) {
      out << st.fp << "," << policy << "," << gname << "," << cfg::format_double(v) << ","
          << cfg::format_double(rep.disturbance) << "," << s.seed_index << "," << rep.episodes
          << "," << cfg::format_double(s.stability_pct) << ","
          << cfg::format_double(s.mean_velocity) << "," << s.falls << "\n";
    }
  }
  {
    json j = {{"format", "gaitplan-eval-report"},
              {"version", 1},
              {"fingerprint", st.fp},
              {"policy", policy},
              {"gait", gname},
              {"v_cmd", v},
              {"delta", rep.disturbance},
              {"episodes", rep.episodes},
              {"stability_mean", rep.stability_mean},
              {"velocity_mean", rep.velocity_mean},
              {"fall_histogram", rep.fall_histogram}};
    json per_seed = json::array();
    for (const auto& s : rep.per_seed)
      per_seed.push_back({{"seed", s.seed_index},
                          {"stability_pct", s.stability_pct},
                          {"mean_velocity", s.mean_velocity},
                          {"falls", s.falls}});
    j["per_seed"] = per_seed;
    std::ofstream out(st.path(eval_json(gname, v)), std::ios::binary);
    out << j.dump(2) << "\n";
  }
  if (trace_counter && !trajs.empty()) {
    for (int e = 0; e < st.config.eval.trace_episodes &&
                    e < static_cast<int>(trajs[0].size());
         ++e) {
      const data::Trajectory& t = trajs[0][e];
      if (t.length() == 0) continue;
      VecX smooth = eval::velocity_trace(t, st.config.eval.trace_window);
      std::ofstream out(st.path("trace_" + std::to_string((*trace_counter)++) + ".csv"),
                        std::ios::binary);
      out << "step,raw_v,smoothed_v\n";
      for (int i = 0; i < t.length(); ++i)
        out << i << "," << cfg::format_double(t.states(i, 1)) << ","
            << cfg::format_double(smooth[i]) << "\n";
    }
  }
}

void stage_eval(Stage& st, json& manifest, const std::string& policy) {
  std::string key = "eval:" + policy;
  std::vector<std::string> outputs;
  for (const auto& g : st.config.gaits)
    for (double v : st.config.v_cmds) {
      outputs.push_back(eval_csv(g, v));
      outputs.push_back(eval_json(g, v));
    }
  if (stage_cached(st, manifest, key, outputs)) {
    std::cout << "eval: cached\n";
    return;
  }

  sim::EnvConfig env = st.config.env.to_env();
  int trace_counter = 0;
  json info = json::object();
  for (std::size_t gi = 0; gi < st.config.gaits.size(); ++gi) {
    const std::string& gname = st.config.gaits[gi];
    sim::GaitTemplate gait = sim::gait_template(gname);

    std::optional<PlannerBundle> bundle;
    eval::PolicyKind kind = eval::PolicyKind::kPlanner;
    if (policy == "expert") {
      kind = eval::PolicyKind::kExpert;
    } else if (policy == "untrained") {
      require_artifact(st, "norm_stats.json", "gen-expert");
      data::NormStats nstats = data::load_stats(st.path("norm_stats.json"));
      diffusion::PlanShape shape = plan_shape(st.config, gait, nstats);
      Rng rng(Rng::derive(st.config.seed, {streamtag::kUntrained}));
      bundle = make_bundle(st, gait, make_denoiser(st.config, shape, rng));
    } else if (policy == "bc") {
      bundle = make_bundle(st, gait, load_planner_net(st, bc_ckpt(gname), "train-bc"));
    } else if (policy == "aligned") {
      bundle = make_bundle(st, gait, load_planner_net(st, aligned_ckpt(gname), "align"));
    } else {
      throw ConfigError("eval: unknown policy '" + policy +
                        "' (expected expert|untrained|bc|aligned)");
    }

    eval::PlannerSpec spec;
    if (bundle) spec = bundle->spec();
    for (std::size_t vi = 0; vi < st.config.v_cmds.size(); ++vi) {
      double v = st.config.v_cmds[vi];
      std::vector<std::vector<data::Trajectory>> trajs;
      eval::EvalReport rep = eval::evaluate(
          kind, bundle ? &spec : nullptr, gait, v,
          st.config.eval.episodes, st.config.eval.seeds, st.config.data.max_steps,
          st.config.env.delta_eval, env,
          Rng::derive(st.config.seed, {streamtag::kEval, gi, vi}), &trajs);
      rep.fingerprint = st.fp;
      write_eval_artifacts(st, rep, policy, gname, v, trajs, &trace_counter);
      info[gname + "@" + speed_tag(v)] = {{"stability", rep.stability_mean},
                                          {"velocity", rep.velocity_mean}};
      std::cout << "eval(" << policy << "): " << gname << " @ " << v << " m/s -> stability "
                << rep.stability_mean << "%, velocity " << rep.velocity_mean << " m/s\n";
    }
  }
  for (int i = 0; i < trace_counter; ++i)
    outputs.push_back("trace_" + std::to_string(i) + ".csv");
  record_stage(st, manifest, key, {}, outputs, info);
}

void stage_ablate(Stage& st, json& manifest) {
  std::vector<std::string> outputs = {"ablation.csv"};
  if (stage_cached(st, manifest, "ablate", outputs)) {
    std::cout << "ablate: cached\n";
    return;
  }
  require_artifact(st, "norm_stats.json", "gen-expert");
  data::NormStats stats = data::load_stats(st.path("norm_stats.json"));
  diffusion::NoiseSchedule sched = diffusion::make_schedule(
      st.config.diffusion.steps, st.config.diffusion.beta_min, st.config.diffusion.beta_max);
  sim::EnvConfig env = st.config.env.to_env();

  std::ofstream csv(st.path("ablation.csv"), std::ios::binary);
  csv << "fingerprint,gait,v_cmd,pair_scale,pairs,mode,mu,diverged,stability_pct,"
         "mean_velocity\n";

  for (std::size_t gi = 0; gi < st.config.gaits.size(); ++gi) {
    const std::string& gname = st.config.gaits[gi];
    sim::GaitTemplate gait = sim::gait_template(gname);
    diffusion::PlanShape shape = plan_shape(st.config, gait, stats);
    nn::Mlp bc_net = load_planner_net(st, bc_ckpt(gname), "train-bc");
    require_artifact(st, expert_file(gname), "gen-expert");
    require_artifact(st, planner_file(gname), "rollout");
    auto experts = data::load(st.path(expert_file(gname)));
    auto planner_trajs = data::load(st.path(planner_file(gname)));
    pref::ExpertIndex index = pref::build_index(experts[pref::select_optimal_expert(experts)],
                                                stats);

    for (std::size_t vi = 0; vi < st.config.v_cmds.size(); ++vi) {
      double v = st.config.v_cmds[vi];
      std::uint64_t eval_seed = Rng::derive(st.config.seed, {streamtag::kEval, gi, vi});

      PlannerBundle offline = make_bundle(st, gait, bc_net);
      eval::PlannerSpec spec = offline.spec();
      eval::EvalReport base =
          eval::evaluate(eval::PolicyKind::kPlanner, &spec, gait, v, st.config.eval.episodes,
                         st.config.eval.seeds, st.config.data.max_steps,
                         st.config.env.delta_eval, env, eval_seed);
      csv << st.fp << "," << gname << "," << cfg::format_double(v) << ",0,0,offline,-,0,"
          << cfg::format_double(base.stability_mean) << ","
          << cfg::format_double(base.velocity_mean) << "\n";
      std::cout << "ablate: " << gname << " offline baseline stability " << base.stability_mean
                << "%\n";

      for (std::size_t si = 0; si < st.config.ablate.pair_scales.size(); ++si) {
        double scale = st.config.ablate.pair_scales[si];
        int n_pairs = std::max(1, static_cast<int>(std::lround(st.config.preference.pairs *
                                                               scale)));
        for (int mi = 0; mi < 2; ++mi) {
          pref::LabelMode mode = mi == 0 ? pref::LabelMode::kWeak : pref::LabelMode::kStrong;
          const char* mode_name = mi == 0 ? "weak" : "strong";
          Rng pair_rng(Rng::derive(st.config.seed,
                                   {streamtag::kAblate, gi, vi, si, static_cast<std::uint64_t>(mi),
                                    1}));
          auto pairs = pref::build_preference_dataset(planner_trajs, index, n_pairs,
                                                      st.config.diffusion.horizon, mode, pair_rng);
          for (int ri = 0; ri < 2; ++ri) {
            double mu = ri == 0 ? 0.0 : st.config.align.mu;
            align::AlignConfig acfg = align_config(st.config);
            acfg.mu = mu;
            Rng arng(Rng::derive(st.config.seed,
                                 {streamtag::kAblate, gi, vi, si, static_cast<std::uint64_t>(mi),
                                  static_cast<std::uint64_t>(ri), 2}));
            align::AlignResult res =
                align::align(bc_net, pairs, stats, sched, shape, st.config.diffusion.embed_dim,
                             st.config.diffusion.action_loss_weight, acfg, arng);

            PlannerBundle cell = make_bundle(st, gait, res.net);
            eval::PlannerSpec cspec = cell.spec();
            eval::EvalReport rep =
                eval::evaluate(eval::PolicyKind::kPlanner, &cspec, gait, v,
                               st.config.eval.episodes, st.config.eval.seeds,
                               st.config.data.max_steps, st.config.env.delta_eval, env,
                               eval_seed);
            csv << st.fp << "," << gname << "," << cfg::format_double(v) << ","
                << cfg::format_double(scale) << "," << n_pairs << "," << mode_name << ","
                << cfg::format_double(mu) << "," << (res.diverged ? 1 : 0) << ","
                << cfg::format_double(rep.stability_mean) << ","
                << cfg::format_double(rep.velocity_mean) << "\n";
            std::cout << "ablate: " << gname << " scale " << scale << " " << mode_name
                      << " mu " << mu << (res.diverged ? " (diverged)" : "") << " -> "
                      << rep.stability_mean << "%\n";
          }
        }
      }
    }
  }
  csv.close();
  record_stage(st, manifest, "ablate", {"norm_stats.json"}, outputs);
}

void check_fp(const std::string& artifact, const std::string& found, const std::string& expect) {
  if (found != expect)
    throw PrereqError("report: artifact '" + artifact + "' has fingerprint " + found +
                      " but the resolved config has " + expect +
                      "; refusing to aggregate mismatched artifacts");
}

void stage_report(Stage& st, json& manifest) {
  std::cout << "run: " << st.run.string() << "\nfingerprint: " << st.fp << "\n";
  const json& stages = manifest["stages"];
  if (stages.empty()) {
    std::cout << "no stages recorded yet\n";
    return;
  }
  for (auto it = stages.begin(); it != stages.end(); ++it) {
    check_fp("manifest stage " + it.key(), it.value().value("fingerprint", ""), st.fp);
  }

  for (const auto& g : st.config.gaits) {
    if (fs::exists(st.path(trainlog_file(g)))) {
      std::ifstream in(st.path(trainlog_file(g)));
      json j;
      in >> j;
      check_fp(trainlog_file(g), j.value("fingerprint", ""), st.fp);
      const auto& e = j["entries"];
      if (!e.empty())
        std::cout << "train " << g << ": loss " << e.front()[1].get<double>() << " -> "
                  << e.back()[1].get<double>() << " over " << e.size() << " steps\n";
    }
    if (fs::exists(st.path(alignlog_file(g)))) {
      std::ifstream in(st.path(alignlog_file(g)));
      json j;
      in >> j;
      check_fp(alignlog_file(g), j.value("fingerprint", ""), st.fp);
      const auto& e = j["entries"];
      if (!e.empty())
        std::cout << "align " << g << ": pref loss " << e.front()[1].get<double>() << " -> "
                  << e.back()[1].get<double>() << ", final mean logit "
                  << e.back()[3].get<double>() << (j.value("diverged", false) ? " (diverged)" : "")
                  << "\n";
    }
    for (double v : st.config.v_cmds) {
      if (fs::exists(st.path(eval_json(g, v)))) {
        std::ifstream in(st.path(eval_json(g, v)));
        json j;
        in >> j;
        check_fp(eval_json(g, v), j.value("fingerprint", ""), st.fp);
        std::cout << "eval " << g << " @ " << v << " (" << j.value("policy", "?")
                  << "): stability " << j.value("stability_mean", 0.0) << "%, velocity "
                  << j.value("velocity_mean", 0.0) << " m/s\n";
      }
    }
  }

  if (fs::exists(st.path("ablation.csv"))) {
    std::ifstream in(st.path("ablation.csv"));
    std::string line;
    std::getline(in, line);  // header
    std::cout << "ablation cells:\n";
    while (std::getline(in, line)) {
      if (line.empty()) continue;
      std::size_t comma = line.find(',');
      check_fp("ablation.csv", line.substr(0, comma), st.fp);
      std::cout << "  " << line.substr(comma + 1) << "\n";
    }
  }

  for (auto it = stages.begin(); it != stages.end(); ++it) {
    if (it.key().rfind("label:", 0) == 0) {
      for (auto g = it.value()["info"].begin(); g != it.value()["info"].end(); ++g)
        std::cout << it.key() << " " << g.key() << ": weak/strong agreement "
                  << g.value().value("weak_strong_agreement", 0.0) << "\n";
    }
  }
}

int run_stage(const Args& args, const std::string& stage_name) {
  cfg::RunConfig config =
      cfg::load_config(args.config_file ? &*args.config_file : nullptr, args.overrides);
  fs::create_directories(args.run);

  Stage st;
  st.config = std::move(config);
  st.fp = st.config.fingerprint();
  st.run = args.run;
  st.force = args.force;

  RunLock lock(st.run);
  write_resolved_config(st);
  json manifest = load_manifest(st);

  if (stage_name == "gen-expert") stage_gen_expert(st, manifest);
  else if (stage_name == "train-bc") stage_train_bc(st, manifest);
  else if (stage_name == "rollout") stage_rollout(st, manifest);
  else if (stage_name == "label") stage_label(st, manifest);
  else if (stage_name == "align") stage_align(st, manifest);
  else if (stage_name == "eval") stage_eval(st, manifest, args.policy);
  else if (stage_name == "ablate") stage_ablate(st, manifest);
  else if (stage_name == "report") stage_report(st, manifest);
  else throw ConfigError("unknown subcommand '" + stage_name + "'");
  return 0;
}

}  // namespace

int run(const std::vector<std::string>& args) {
  CLI::App app{"diffusion gait planner pipeline"};
  app.require_subcommand(1);

  Args common;
  std::string run_env = std::getenv("GAITPLAN_RUN_ROOT") ? std::getenv("GAITPLAN_RUN_ROOT") : "";

  const std::vector<std::string> stages = {"gen-expert", "train-bc", "rollout", "label",
                                           "align",      "eval",     "ablate",  "report"};
  const std::vector<std::string> stage_help = {
      "collect expert trajectories and fit normalization statistics",
      "train the offline diffusion planner per gait",
      "roll out the offline planner to build the preference-free dataset",
      "build preference pairs from planner rollouts",
      "preference-align the planner against a frozen reference",
      "closed-loop evaluation (stability, velocity, traces)",
      "run the preference-size / label-quality / regularization grid",
      "aggregate and print run artifacts"};

  std::string run_dir;
  for (std::size_t i = 0; i < stages.size(); ++i) {
    CLI::App* sub = app.add_subcommand(stages[i], stage_help[i]);
    sub->add_option("--run", run_dir, "run directory (default: $GAITPLAN_RUN_ROOT)");
    sub->add_option("--config", common.config_file, "JSON config file");
    sub->add_option("--set", common.overrides, "config override key.path=value")
        ->take_all();
    sub->add_flag("--force", common.force, "recompute even if cached");
    if (stages[i] == "eval")
      sub->add_option("--policy", common.policy, "expert|untrained|bc|aligned (default bc)");
  }

  std::vector<const char*> argv;
  argv.push_back("gaitplan");
  for (const auto& a : args) argv.push_back(a.c_str());

  try {
    app.parse(static_cast<int>(argv.size()), argv.data());
  } catch (const CLI::ParseError& e) {
    int code = app.exit(e);
    return code == 0 ? 0 : 1;
  }

  try {
    std::string stage = app.get_subcommands().front()->get_name();
    if (run_dir.empty()) run_dir = run_env;
    if (run_dir.empty())
      throw ConfigError("no run directory: pass --run or set GAITPLAN_RUN_ROOT");
    common.run = run_dir;
    return run_stage(common, stage);
  } catch (const ConfigError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  } catch (const PrereqError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const DivergenceError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 3;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
}

int main_entry(int argc, char** argv) {
  std::vector<std::string> args;
  for (int i = 1; i < argc; ++i) args.emplace_back(argv[i]);
  return run(args);
}

}  // namespace gaitplan::cli
