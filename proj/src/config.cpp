#include "gaitplan/config.hpp"

#include <charconv>
#include <fstream>

#include <json.hpp>

namespace gaitplan::cfg {

using nlohmann::json;

sim::EnvConfig EnvBlock::to_env() const {
  sim::EnvConfig e;
  e.k_drag = k_drag;
  e.c_prop = c_prop;
  e.k_tilt = k_tilt;
  e.k_tilt_decay = k_tilt_decay;
  e.coord_penalty = coord_penalty;
  e.tilt_fall = tilt_fall;
  e.a_max = a_max;
  e.clock_rate = clock_rate;
  e.reset_jitter = reset_jitter;
  e.expert.omega_base = expert_omega_base;
  e.expert.k_v = expert_k_v;
  e.expert.k_sync = expert_k_sync;
  return e;
}

namespace {

struct Walker {
  std::vector<std::string> errors;

  void unknown_keys(const json& j, const std::string& prefix,
                    std::initializer_list<const char*> allowed) {
    if (!j.is_object()) {
      errors.push_back(prefix + ": expected an object");
      return;
    }
    for (auto it = j.begin(); it != j.end(); ++it) {
      bool ok = false;
      for (const char* a : allowed) ok |= (it.key() == a);
      if (!ok) errors.push_back(prefix + it.key() + ": unknown key");
    }
  }

  template <typename T>
  void get(const json& j, const char* key, const std::string& prefix, T& out) {
    if (!j.contains(key)) return;
    try {
      out = j.at(key).get<T>();
    } catch (const json::exception&) {
      errors.push_back(prefix + key + ": wrong type");
    }
  }
};

void parse_env(const json& j, Walker& w, EnvBlock& b) {
  w.unknown_keys(j, "env.",
                 {"k_drag", "c_prop", "k_tilt", "k_tilt_decay", "coord_penalty", "tilt_fall",
                  "a_max", "clock_rate", "reset_jitter", "expert_omega_base", "expert_k_v",
                  "expert_k_sync", "delta_collect", "delta_rollout", "delta_eval"});
  w.get(j, "k_drag", "env.", b.k_drag);
  w.get(j, "c_prop", "env.", b.c_prop);
  w.get(j, "k_tilt", "env.", b.k_tilt);
  w.get(j, "k_tilt_decay", "env.", b.k_tilt_decay);
  w.get(j, "coord_penalty", "env.", b.coord_penalty);
  w.get(j, "tilt_fall", "env.", b.tilt_fall);
  w.get(j, "a_max", "env.", b.a_max);
  w.get(j, "clock_rate", "env.", b.clock_rate);
  w.get(j, "reset_jitter", "env.", b.reset_jitter);
  w.get(j, "expert_omega_base", "env.", b.expert_omega_base);
  w.get(j, "expert_k_v", "env.", b.expert_k_v);
  w.get(j, "expert_k_sync", "env.", b.expert_k_sync);
  w.get(j, "delta_collect", "env.", b.delta_collect);
  w.get(j, "delta_rollout", "env.", b.delta_rollout);
  w.get(j, "delta_eval", "env.", b.delta_eval);
}

void parse_data(const json& j, Walker& w, DataBlock& b) {
  w.unknown_keys(j, "data.", {"expert_episodes", "planner_episodes", "max_steps",
                              "collect_jitter", "collect_action_noise", "collect_kick_prob",
                              "collect_kick_mag", "collect_phase_noise"});
  w.get(j, "expert_episodes", "data.", b.expert_episodes);
  w.get(j, "planner_episodes", "data.", b.planner_episodes);
  w.get(j, "max_steps", "data.", b.max_steps);
  w.get(j, "collect_jitter", "data.", b.collect_jitter);
  w.get(j, "collect_action_noise", "data.", b.collect_action_noise);
  w.get(j, "collect_kick_prob", "data.", b.collect_kick_prob);
  w.get(j, "collect_kick_mag", "data.", b.collect_kick_mag);
  w.get(j, "collect_phase_noise", "data.", b.collect_phase_noise);
}

void parse_diffusion(const json& j, Walker& w, DiffusionBlock& b) {
  w.unknown_keys(j, "diffusion.",
                 {"horizon", "steps", "beta_min", "beta_max", "hidden", "embed_dim", "batch_size",
                  "train_steps", "lr", "p_drop", "action_loss_weight", "sampling_steps", "w_cg"});
  w.get(j, "horizon", "diffusion.", b.horizon);
  w.get(j, "steps", "diffusion.", b.steps);
  w.get(j, "beta_min", "diffusion.", b.beta_min);
  w.get(j, "beta_max", "diffusion.", b.beta_max);
  w.get(j, "hidden", "diffusion.", b.hidden);
  w.get(j, "embed_dim", "diffusion.", b.embed_dim);
  w.get(j, "batch_size", "diffusion.", b.batch_size);
  w.get(j, "train_steps", "diffusion.", b.train_steps);
  w.get(j, "lr", "diffusion.", b.lr);
  w.get(j, "p_drop", "diffusion.", b.p_drop);
  w.get(j, "action_loss_weight", "diffusion.", b.action_loss_weight);
  w.get(j, "sampling_steps", "diffusion.", b.sampling_steps);
  w.get(j, "w_cg", "diffusion.", b.w_cg);
}

void parse_preference(const json& j, Walker& w, PreferenceBlock& b) {
  w.unknown_keys(j, "preference.", {"beta", "pairs", "mode"});
  w.get(j, "beta", "preference.", b.beta);
  w.get(j, "pairs", "preference.", b.pairs);
  w.get(j, "mode", "preference.", b.mode);
}

void parse_align(const json& j, Walker& w, AlignBlock& b) {
  w.unknown_keys(j, "align.", {"temperature", "bias", "mu", "lr", "epochs", "batch_size"});
  w.get(j, "temperature", "align.", b.temperature);
  w.get(j, "bias", "align.", b.bias);
  w.get(j, "mu", "align.", b.mu);
  w.get(j, "lr", "align.", b.lr);
  w.get(j, "epochs", "align.", b.epochs);
  w.get(j, "batch_size", "align.", b.batch_size);
}

void parse_eval(const json& j, Walker& w, EvalBlock& b) {
  w.unknown_keys(j, "eval.", {"episodes", "seeds", "trace_episodes", "trace_window"});
  w.get(j, "episodes", "eval.", b.episodes);
  w.get(j, "seeds", "eval.", b.seeds);
  w.get(j, "trace_episodes", "eval.", b.trace_episodes);
  w.get(j, "trace_window", "eval.", b.trace_window);
}

void parse_ablate(const json& j, Walker& w, AblateBlock& b) {
  w.unknown_keys(j, "ablate.", {"pair_scales"});
  w.get(j, "pair_scales", "ablate.", b.pair_scales);
}

RunConfig parse_config(const json& j) {
  Walker w;
  RunConfig c;
  w.unknown_keys(j, "", {"seed", "gaits", "v_cmds", "env", "data", "diffusion", "preference",
                         "align", "eval", "ablate"});
  w.get(j, "seed", "", c.seed);
  w.get(j, "gaits", "", c.gaits);
  w.get(j, "v_cmds", "", c.v_cmds);
  if (j.contains("env")) parse_env(j["env"], w, c.env);
  if (j.contains("data")) parse_data(j["data"], w, c.data);
  if (j.contains("diffusion")) parse_diffusion(j["diffusion"], w, c.diffusion);
  if (j.contains("preference")) parse_preference(j["preference"], w, c.preference);
  if (j.contains("align")) parse_align(j["align"], w, c.align);
  if (j.contains("eval")) parse_eval(j["eval"], w, c.eval);
  if (j.contains("ablate")) parse_ablate(j["ablate"], w, c.ablate);

  // semantic checks
  if (c.gaits.empty()) w.errors.push_back("gaits: must not be empty");
  for (const auto& g : c.gaits)
    if (g != "pacing" && g != "trotting" && g != "bounding")
      w.errors.push_back("gaits: unknown gait '" + g + "'");
  if (c.v_cmds.empty()) w.errors.push_back("v_cmds: must not be empty");
  if (c.diffusion.horizon < 1) w.errors.push_back("diffusion.horizon: must be >= 1");
  if (c.diffusion.steps < 2) w.errors.push_back("diffusion.steps: must be >= 2");
  if (c.diffusion.sampling_steps < 1 || c.diffusion.sampling_steps > c.diffusion.steps)
    w.errors.push_back("diffusion.sampling_steps: must be in [1, diffusion.steps]");
  if (c.diffusion.embed_dim < 2 || c.diffusion.embed_dim % 2 != 0)
    w.errors.push_back("diffusion.embed_dim: must be even and >= 2");
  if (c.preference.mode != "weak" && c.preference.mode != "strong")
    w.errors.push_back("preference.mode: expected weak|strong");
  if (c.align.temperature <= 0.0) w.errors.push_back("align.temperature: must be > 0");
  if (c.align.mu < 0.0) w.errors.push_back("align.mu: must be >= 0");
  if (c.eval.seeds < 1) w.errors.push_back("eval.seeds: must be >= 1");

  if (!w.errors.empty()) {
    std::string msg = "config validation failed:";
    for (const auto& e : w.errors) msg += "\n  - " + e;
    throw ConfigError(msg);
  }
  return c;
}

json to_json(const RunConfig& c) {
  json j;
  j["seed"] = c.seed;
  j["gaits"] = c.gaits;
  j["v_cmds"] = c.v_cmds;
  j["env"] = {{"k_drag", c.env.k_drag},
              {"c_prop", c.env.c_prop},
              {"k_tilt", c.env.k_tilt},
              {"k_tilt_decay", c.env.k_tilt_decay},
              {"coord_penalty", c.env.coord_penalty},
              {"tilt_fall", c.env.tilt_fall},
              {"a_max", c.env.a_max},
              {"clock_rate", c.env.clock_rate},
              {"reset_jitter", c.env.reset_jitter},
              {"expert_omega_base", c.env.expert_omega_base},
              {"expert_k_v", c.env.expert_k_v},
              {"expert_k_sync", c.env.expert_k_sync},
              {"delta_collect", c.env.delta_collect},
              {"delta_rollout", c.env.delta_rollout},
              {"delta_eval", c.env.delta_eval}};
  j["data"] = {{"expert_episodes", c.data.expert_episodes},
               {"planner_episodes", c.data.planner_episodes},
               {"max_steps", c.data.max_steps},
               {"collect_jitter", c.data.collect_jitter},
               {"collect_action_noise", c.data.collect_action_noise},
               {"collect_kick_prob", c.data.collect_kick_prob},
               {"collect_kick_mag", c.data.collect_kick_mag},
               {"collect_phase_noise", c.data.collect_phase_noise}};
  j["diffusion"] = {{"horizon", c.diffusion.horizon},
                    {"steps", c.diffusion.steps},
                    {"beta_min", c.diffusion.beta_min},
                    {"beta_max", c.diffusion.beta_max},
                    {"hidden", c.diffusion.hidden},
                    {"embed_dim", c.diffusion.embed_dim},
                    {"batch_size", c.diffusion.batch_size},
                    {"train_steps", c.diffusion.train_steps},
                    {"lr", c.diffusion.lr},
                    {"p_drop", c.diffusion.p_drop},
                    {"action_loss_weight", c.diffusion.action_loss_weight},
                    {"sampling_steps", c.diffusion.sampling_steps},
                    {"w_cg", c.diffusion.w_cg}};
  j["preference"] = {{"beta", c.preference.beta},
                     {"pairs", c.preference.pairs},
                     {"mode", c.preference.mode}};
  j["align"] = {{"temperature", c.align.temperature}, {"bias", c.align.bias},
                {"mu", c.align.mu},                   {"lr", c.align.lr},
                {"epochs", c.align.epochs},           {"batch_size", c.align.batch_size}};
  j["eval"] = {{"episodes", c.eval.episodes},
               {"seeds", c.eval.seeds},
               {"trace_episodes", c.eval.trace_episodes},
               {"trace_window", c.eval.trace_window}};
  j["ablate"] = {{"pair_scales", c.ablate.pair_scales}};
  return j;
}

}  // namespace

std::string RunConfig::canonical_json() const { return to_json(*this).dump(2) + "\n"; }

std::string RunConfig::fingerprint() const {
  std::string s = canonical_json();
  std::uint64_t h = 0xcbf29ce484222325ull;  // FNV-1a
  for (unsigned char ch : s) {
    h ^= ch;
    h *= 0x100000001b3ull;
  }
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(h));
  return std::string(buf);
}

RunConfig config_from_json_text(const std::string& text) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::exception& e) {
    throw ConfigError(std::string("config parse error: ") + e.what());
  }
  return parse_config(j);
}

RunConfig load_config(const std::filesystem::path* file,
                      const std::vector<std::string>& overrides) {
  json j = json::object();
  if (file) {
    std::ifstream in(*file);
    if (!in.good()) throw ConfigError("cannot open config file " + file->string());
    try {
      in >> j;
    } catch (const json::exception& e) {
      throw ConfigError(std::string("config parse error: ") + e.what());
    }
  }
  for (const std::string& ov : overrides) {
    std::size_t eq = ov.find('=');
    if (eq == std::string::npos)
      throw ConfigError("--set expects key.path=value, got '" + ov + "'");
    std::string path = ov.substr(0, eq);
    std::string value = ov.substr(eq + 1);
    json parsed;
    try {
      parsed = json::parse(value);
    } catch (const json::exception&) {
      parsed = value;  // bare strings are allowed
    }
    json* cur = &j;
    std::size_t pos = 0;
    while (true) {
      std::size_t dot = path.find('.', pos);
      std::string key = path.substr(pos, dot == std::string::npos ? dot : dot - pos);
      if (key.empty()) throw ConfigError("--set: empty key segment in '" + ov + "'");
      if (dot == std::string::npos) {
        (*cur)[key] = parsed;
        break;
      }
      cur = &(*cur)[key];
      pos = dot + 1;
    }
  }
  return parse_config(j);
}

std::string format_double(double v) {
  char buf[64];
  auto res = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, res.ptr);
}

}  // namespace gaitplan::cfg
