#include "gaitplan/data.hpp"

#include <fstream>
#include <iostream>
#include <sstream>

#include <json.hpp>
#include <zlib.h>

namespace gaitplan::data {

namespace {

using nlohmann::json;

json matrix_to_json(const MatX& m) {
  json rows = json::array();
  for (Eigen::Index i = 0; i < m.rows(); ++i) {
    json row = json::array();
    for (Eigen::Index j = 0; j < m.cols(); ++j) row.push_back(m(i, j));
    rows.push_back(std::move(row));
  }
  return rows;
}

MatX matrix_from_json(const json& rows, Eigen::Index cols_hint) {
  if (rows.empty()) return MatX(0, cols_hint);
  MatX m(rows.size(), rows[0].size());
  for (std::size_t i = 0; i < rows.size(); ++i) {
    GP_REQUIRE(rows[i].size() == static_cast<std::size_t>(m.cols()),
               "dataset load: ragged row widths");
    for (std::size_t j = 0; j < rows[i].size(); ++j) m(i, j) = rows[i][j].get<double>();
  }
  return m;
}

json traj_to_json(const Trajectory& t) {
  json j;
  j["meta"] = {{"gait", t.meta.gait},       {"v_cmd", t.meta.v_cmd},
               {"seed", t.meta.seed},       {"source", t.meta.source},
               {"fell", t.meta.fell},       {"fall_step", t.meta.fall_step}};
  j["states"] = matrix_to_json(t.states);
  j["actions"] = matrix_to_json(t.actions);
  j["rewards"] = std::vector<double>(t.rewards.data(), t.rewards.data() + t.rewards.size());
  std::vector<int> dn(t.dones.begin(), t.dones.end());
  j["dones"] = dn;
  return j;
}

Trajectory traj_from_json(const json& j) {
  Trajectory t;
  const json& m = j.at("meta");
  t.meta.gait = m.at("gait").get<std::string>();
  t.meta.v_cmd = m.at("v_cmd").get<double>();
  t.meta.seed = m.at("seed").get<std::uint64_t>();
  t.meta.source = m.at("source").get<std::string>();
  t.meta.fell = m.at("fell").get<bool>();
  t.meta.fall_step = m.at("fall_step").get<int>();
  t.states = matrix_from_json(j.at("states"), sim::kStateDim);
  t.actions = matrix_from_json(j.at("actions"), sim::kActionDim);
  auto rw = j.at("rewards").get<std::vector<double>>();
  t.rewards = Eigen::Map<const VecX>(rw.data(), static_cast<Eigen::Index>(rw.size()));
  auto dn = j.at("dones").get<std::vector<int>>();
  t.dones.assign(dn.begin(), dn.end());
  GP_REQUIRE(t.states.rows() == t.actions.rows() &&
                 t.states.rows() == t.rewards.size() &&
                 t.states.rows() == static_cast<Eigen::Index>(t.dones.size()),
             "dataset load: trajectory arrays disagree on length");
  return t;
}

std::uint32_t crc_of(const std::string& payload) {
  return static_cast<std::uint32_t>(
      crc32(0L, reinterpret_cast<const Bytef*>(payload.data()),
            static_cast<uInt>(payload.size())));
}

constexpr const char* kTrajFormat = "gaitplan-trajectories";
constexpr int kTrajVersion = 1;

}  // namespace

std::vector<Trajectory> collect(const Policy& policy, const sim::GaitTemplate& gait, double v_cmd,
                                int episodes, int max_steps, std::uint64_t seed,
                                double disturbance_mag, const sim::EnvConfig& env,
                                const std::string& source_tag,
                                const CollectOptions& options) {
  GP_REQUIRE(episodes >= 1, "collect: episodes must be >= 1");
  GP_REQUIRE(max_steps >= 1, "collect: max_steps must be >= 1");

  sim::EnvConfig reset_env = env;
  if (options.reset_jitter >= 0.0) reset_env.reset_jitter = options.reset_jitter;

  std::vector<Trajectory> out;
  out.reserve(episodes);
  for (int e = 0; e < episodes; ++e) {
    std::uint64_t ep_seed = Rng::derive(seed, {static_cast<std::uint64_t>(e)});
    Rng dist_rng(Rng::derive(ep_seed, {0}));
    Rng noise_rng(Rng::derive(ep_seed, {3}));
    sim::EnvState state = reset(gait, v_cmd, Rng::derive(ep_seed, {1}), reset_env);

    MatX states(max_steps, sim::kStateDim);
    MatX actions(max_steps, sim::kActionDim);
    VecX rewards(max_steps);
    std::vector<std::uint8_t> dones(max_steps, 0);

    Trajectory t;
    t.meta.gait = gait.name;
    t.meta.v_cmd = v_cmd;
    t.meta.seed = ep_seed;
    t.meta.source = source_tag;

    int steps = 0;
    for (; steps < max_steps; ++steps) {
      Vec4 a = policy(state);
      if (options.action_noise > 0.0)
        for (int i = 0; i < sim::kNumLegs; ++i)
          a[i] += noise_rng.uniform(-options.action_noise, options.action_noise);
      if (!a.allFinite()) {
        std::cerr << "collect: episode " << e << " aborted at step " << steps
                  << " (non-finite action)\n";
        t.meta.fell = true;
        t.meta.fall_step = steps;
        break;
      }
      double d = disturbance_mag > 0.0 ? dist_rng.uniform(-disturbance_mag, disturbance_mag) : 0.0;
      sim::StepResult r = sim::step(state, a, gait, d, env);
      states.row(steps) = state.to_vector();
      actions.row(steps) = r.next.phase_rates;  // clamped action actually applied
      rewards[steps] = r.reward;
      dones[steps] = r.done ? 1 : 0;
      state = r.next;
      if (r.done) {
        t.meta.fell = true;
        t.meta.fall_step = steps;
        ++steps;
        break;
      }
      if (options.phase_noise > 0.0)
        for (int i = 0; i < sim::kNumLegs; ++i)
          state.phases[i] = sim::wrap_2pi(
              state.phases[i] + noise_rng.uniform(-options.phase_noise, options.phase_noise));
      if (options.phase_kick_prob > 0.0)
        for (int i = 0; i < sim::kNumLegs; ++i)
          if (noise_rng.uniform() < options.phase_kick_prob)
            state.phases[i] = sim::wrap_2pi(
                state.phases[i] +
                noise_rng.uniform(-options.phase_kick_mag, options.phase_kick_mag));
    }
    if (!t.meta.fell && steps == max_steps) dones[max_steps - 1] = 1;  // budget exhausted

    t.states = states.topRows(steps);
    t.actions = actions.topRows(steps);
    t.rewards = rewards.head(steps);
    t.dones.assign(dones.begin(), dones.begin() + steps);
    out.push_back(std::move(t));
  }
  return out;
}

NormStats fit_norm(const std::vector<Trajectory>& trajs) {
  long total = 0;
  for (const auto& t : trajs) total += t.length();
  GP_REQUIRE(total > 0, "fit_norm: no states in input");

  auto fit = [&](auto accessor, Eigen::Index dim) {
    VecX mean = VecX::Zero(dim), sq = VecX::Zero(dim);
    for (const auto& t : trajs) {
      const MatX& m = accessor(t);
      for (Eigen::Index i = 0; i < m.rows(); ++i) {
        mean += m.row(i).transpose();
        sq += m.row(i).transpose().cwiseProduct(m.row(i).transpose());
      }
    }
    mean /= static_cast<double>(total);
    VecX var = sq / static_cast<double>(total) - mean.cwiseProduct(mean);
    VecX std = var.cwiseMax(0.0).cwiseSqrt().cwiseMax(kStdFloor);
    return std::make_pair(mean, std);
  };

  NormStats s;
  std::tie(s.state_mean, s.state_std) =
      fit([](const Trajectory& t) -> const MatX& { return t.states; }, sim::kStateDim);
  std::tie(s.action_mean, s.action_std) =
      fit([](const Trajectory& t) -> const MatX& { return t.actions; }, sim::kActionDim);
  return s;
}

VecX normalize(const Eigen::Ref<const VecX>& x, const Eigen::Ref<const VecX>& mean,
               const Eigen::Ref<const VecX>& std) {
  GP_REQUIRE(x.size() == mean.size() && x.size() == std.size(), "normalize: shape mismatch");
  return (x - mean).cwiseQuotient(std);
}

VecX denormalize(const Eigen::Ref<const VecX>& z, const Eigen::Ref<const VecX>& mean,
                 const Eigen::Ref<const VecX>& std) {
  GP_REQUIRE(z.size() == mean.size() && z.size() == std.size(), "denormalize: shape mismatch");
  return z.cwiseProduct(std) + mean;
}

std::vector<SegmentRef> valid_segments(const std::vector<Trajectory>& trajs, int h) {
  GP_REQUIRE(h >= 1, "valid_segments: horizon must be >= 1");
  std::vector<SegmentRef> refs;
  for (int ti = 0; ti < static_cast<int>(trajs.size()); ++ti) {
    const Trajectory& t = trajs[ti];
    for (int s = 0; s + h <= t.length() - 1; ++s) {
      bool interior_done = false;
      for (int i = s; i < s + h; ++i) interior_done |= (t.dones[i] != 0);
      if (!interior_done) refs.push_back({ti, s});
    }
  }
  return refs;
}

Segment slice(const std::vector<Trajectory>& trajs, const SegmentRef& ref, int h) {
  GP_REQUIRE(ref.traj >= 0 && ref.traj < static_cast<int>(trajs.size()),
             "slice: trajectory index out of range");
  const Trajectory& t = trajs[ref.traj];
  GP_REQUIRE(ref.start >= 0 && ref.start + h <= t.length() - 1, "slice: segment out of bounds");
  Segment seg;
  seg.states = t.states.middleRows(ref.start, h + 1);
  seg.actions = t.actions.middleRows(ref.start, h + 1);
  seg.rewards = t.rewards.segment(ref.start, h + 1);
  seg.origin = ref;
  return seg;
}

Segment sample_segment(const std::vector<Trajectory>& trajs, int h, Rng& rng) {
  std::vector<SegmentRef> refs = valid_segments(trajs, h);
  GP_REQUIRE(!refs.empty(), "sample_segment: no trajectory of length >= h + 1");
  return slice(trajs, refs[static_cast<std::size_t>(rng.uniform_int(static_cast<int>(refs.size())))], h);
}

double cumulative_reward(const Trajectory& traj) { return sim::cumulative_reward(traj.rewards); }

void save(const std::vector<Trajectory>& trajs, const std::filesystem::path& path) {
  std::string payload;
  for (const auto& t : trajs) {
    payload += traj_to_json(t).dump();
    payload += '\n';
  }
  json header;
  header["format"] = kTrajFormat;
  header["version"] = kTrajVersion;
  header["count"] = trajs.size();
  header["crc32"] = crc_of(payload);

  std::ofstream out(path, std::ios::binary);
  GP_REQUIRE(out.good(), "save: cannot open " + path.string());
  out << header.dump() << "\n" << payload;
}

std::vector<Trajectory> load(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in.good()) throw PrereqError("load: missing dataset file " + path.string());

  std::string header_line;
  GP_REQUIRE(static_cast<bool>(std::getline(in, header_line)), "load: truncated file (no header)");
  json header = json::parse(header_line);
  GP_REQUIRE(header.value("format", "") == kTrajFormat,
             "load: not a trajectory file: " + path.string());
  GP_REQUIRE(header.value("version", -1) == kTrajVersion,
             "load: unsupported dataset version in " + path.string());

  std::stringstream rest;
  rest << in.rdbuf();
  std::string payload = rest.str();
  GP_REQUIRE(crc_of(payload) == header.at("crc32").get<std::uint32_t>(),
             "load: checksum mismatch in " + path.string());

  std::vector<Trajectory> out;
  std::istringstream lines(payload);
  std::string line;
  while (std::getline(lines, line)) {
    if (line.empty()) continue;
    out.push_back(traj_from_json(json::parse(line)));
  }
  GP_REQUIRE(out.size() == header.at("count").get<std::size_t>(),
             "load: trajectory count disagrees with header");
  return out;
}

void save_stats(const NormStats& stats, const std::filesystem::path& path) {
  auto vec = [](const VecX& v) {
    return std::vector<double>(v.data(), v.data() + v.size());
  };
  json j;
  j["format"] = "gaitplan-norm-stats";
  j["version"] = 1;
  j["state_mean"] = vec(stats.state_mean);
  j["state_std"] = vec(stats.state_std);
  j["action_mean"] = vec(stats.action_mean);
  j["action_std"] = vec(stats.action_std);
  std::ofstream out(path, std::ios::binary);
  GP_REQUIRE(out.good(), "save_stats: cannot open " + path.string());
  out << j.dump() << "\n";
}

NormStats load_stats(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in.good()) throw PrereqError("load_stats: missing stats file " + path.string());
  json j;
  in >> j;
  GP_REQUIRE(j.value("format", "") == "gaitplan-norm-stats" && j.value("version", -1) == 1,
             "load_stats: unrecognized stats file " + path.string());
  auto vec = [&](const char* key) {
    auto v = j.at(key).get<std::vector<double>>();
    return VecX(Eigen::Map<const VecX>(v.data(), static_cast<Eigen::Index>(v.size())));
  };
  NormStats s;
  s.state_mean = vec("state_mean");
  s.state_std = vec("state_std");
  s.action_mean = vec("action_mean");
  s.action_std = vec("action_std");
  return s;
}

}  // namespace gaitplan::data
