#include "gaitplan/preference.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <sstream>

#include <json.hpp>
#include <zlib.h>

namespace gaitplan::pref {

ExpertIndex::ExpertIndex(MatX points, data::NormStats stats)
    : points_(std::move(points)), stats_(std::move(stats)) {
  GP_REQUIRE(points_.rows() > 0, "ExpertIndex: empty point set");
  nodes_.reserve(points_.rows());
  std::vector<int> idx(points_.rows());
  std::iota(idx.begin(), idx.end(), 0);
  root_ = build(idx, 0, static_cast<int>(idx.size()), 0);
}

int ExpertIndex::build(std::vector<int>& idx, int lo, int hi, int depth) {
  if (lo >= hi) return -1;
  int axis = depth % dim();
  int mid = lo + (hi - lo) / 2;
  std::nth_element(idx.begin() + lo, idx.begin() + mid, idx.begin() + hi,
                   [&](int a, int b) { return points_(a, axis) < points_(b, axis); });
  Node node;
  node.point = idx[mid];
  node.axis = axis;
  node.split = points_(idx[mid], axis);
  int self = static_cast<int>(nodes_.size());
  nodes_.push_back(node);
  nodes_[self].left = build(idx, lo, mid, depth + 1);
  nodes_[self].right = build(idx, mid + 1, hi, depth + 1);
  return self;
}

void ExpertIndex::search(int node, const Eigen::Ref<const VecX>& q, Hit& best) const {
  if (node < 0) return;
  const Node& n = nodes_[node];
  double d2 = dist2(q, points_.row(n.point).transpose());
  if (d2 < best.dist2) {
    best.dist2 = d2;
    best.index = n.point;
  }
  double diff = q[n.axis] - n.split;
  int near = diff < 0.0 ? n.left : n.right;
  int far = diff < 0.0 ? n.right : n.left;
  search(near, q, best);
  if (diff * diff < best.dist2) search(far, q, best);
}

ExpertIndex::Hit ExpertIndex::nearest(const Eigen::Ref<const VecX>& query) const {
  GP_REQUIRE(query.size() == dim(), "ExpertIndex::nearest: query dimension mismatch");
  Hit best;
  best.index = 0;
  best.dist2 = dist2(query, points_.row(0).transpose());
  search(root_, query, best);
  return best;
}

double ExpertIndex::nearest_distance(const Eigen::Ref<const VecX>& query) const {
  return std::sqrt(nearest(query).dist2);
}

VecX ExpertIndex::query_point(const Eigen::Ref<const VecX>& state,
                              const Eigen::Ref<const VecX>& action) const {
  VecX q(dim());
  q.head(state.size()) = data::normalize(state, stats_.state_mean, stats_.state_std);
  q.tail(action.size()) = data::normalize(action, stats_.action_mean, stats_.action_std);
  return q;
}

std::size_t select_optimal_expert(const std::vector<data::Trajectory>& trajs) {
  GP_REQUIRE(!trajs.empty(), "select_optimal_expert: empty trajectory list");
  std::size_t best = 0;
  double best_reward = data::cumulative_reward(trajs[0]);
  for (std::size_t i = 1; i < trajs.size(); ++i) {
    double r = data::cumulative_reward(trajs[i]);
    if (r > best_reward) {
      best_reward = r;
      best = i;
    }
  }
  return best;
}

ExpertIndex build_index(const data::Trajectory& optimal, const data::NormStats& stats) {
  GP_REQUIRE(optimal.length() > 0, "build_index: empty trajectory");
  int ds = static_cast<int>(optimal.states.cols());
  int da = static_cast<int>(optimal.actions.cols());
  MatX points(optimal.length(), ds + da);
  for (int t = 0; t < optimal.length(); ++t) {
    points.row(t).head(ds) = data::normalize(optimal.states.row(t).transpose(), stats.state_mean,
                                             stats.state_std)
                                 .transpose();
    points.row(t).tail(da) = data::normalize(optimal.actions.row(t).transpose(),
                                             stats.action_mean, stats.action_std)
                                 .transpose();
  }
  return ExpertIndex(std::move(points), stats);
}

double value(const ExpertIndex& index, const Eigen::Ref<const VecX>& state,
             const Eigen::Ref<const VecX>& action, double beta, int action_dim) {
  GP_REQUIRE(beta > 0.0, "value: beta must be positive");
  GP_REQUIRE(action_dim > 0, "value: action_dim must be positive");
  double d = index.nearest_distance(index.query_point(state, action));
  return std::exp(-beta * d / action_dim);
}

double segment_value_sum(const ExpertIndex& index, const data::Segment& seg, double beta) {
  int action_dim = static_cast<int>(seg.actions.cols());
  double sum = 0.0;
  for (int t = 0; t < seg.length(); ++t)
    sum += value(index, seg.states.row(t).transpose(), seg.actions.row(t).transpose(), beta,
                 action_dim);
  return sum;
}

namespace {

PreferencePair make_pair(const data::Segment& a, const data::Segment& b, double score_a,
                         double score_b, const char* provenance, Rng& tie_rng) {
  bool a_wins = score_a > score_b;
  if (score_a == score_b) a_wins = tie_rng.uniform() < 0.5;
  PreferencePair p;
  p.winner = a_wins ? a : b;
  p.loser = a_wins ? b : a;
  p.margin = std::abs(score_a - score_b);
  p.provenance = provenance;
  return p;
}

}  // namespace

PreferencePair label_pair_weak(const data::Segment& a, const data::Segment& b,
                               const ExpertIndex& index, double beta, Rng& tie_rng) {
  GP_REQUIRE(a.length() == b.length(), "label_pair_weak: segment length mismatch");
  return make_pair(a, b, segment_value_sum(index, a, beta), segment_value_sum(index, b, beta),
                   "weak", tie_rng);
}

PreferencePair label_pair_strong(const data::Segment& a, const data::Segment& b, Rng& tie_rng) {
  GP_REQUIRE(a.length() == b.length(), "label_pair_strong: segment length mismatch");
  GP_REQUIRE(a.rewards.size() == a.length() && b.rewards.size() == b.length(),
             "label_pair_strong: missing rewards");
  return make_pair(a, b, a.rewards.sum(), b.rewards.sum(), "strong", tie_rng);
}

double bt_probability(double score_plus, double score_minus) {
  GP_REQUIRE(std::isfinite(score_plus) && std::isfinite(score_minus),
             "bt_probability: non-finite score");
  if (score_plus >= score_minus) return 1.0 / (1.0 + std::exp(score_minus - score_plus));
  return 1.0 - bt_probability(score_minus, score_plus);
}

LabelMode label_mode(const std::string& name) {
  if (name == "weak") return LabelMode::kWeak;
  if (name == "strong") return LabelMode::kStrong;
  throw ConfigError("unknown preference mode '" + name + "' (expected weak|strong)");
}

std::vector<PreferencePair> build_preference_dataset(const std::vector<data::Trajectory>& trajs,
                                                     const ExpertIndex& index, int pairs, int h,
                                                     LabelMode mode, Rng& rng) {
  GP_REQUIRE(pairs >= 1, "build_preference_dataset: pairs must be >= 1");
  std::vector<data::SegmentRef> pool = data::valid_segments(trajs, h);
  GP_REQUIRE(pool.size() >= 2, "build_preference_dataset: segment pool too small for one pair");

  std::vector<PreferencePair> out;
  out.reserve(pairs);
  std::size_t pos = pool.size();  // forces an initial shuffle
  for (int p = 0; p < pairs; ++p) {
    if (pos + 2 > pool.size()) {
      rng.shuffle(pool);
      pos = 0;
    }
    data::Segment a = data::slice(trajs, pool[pos++], h);
    data::Segment b = data::slice(trajs, pool[pos++], h);
    out.push_back(mode == LabelMode::kWeak ? label_pair_weak(a, b, index, 0.5, rng)
                                           : label_pair_strong(a, b, rng));
  }
  return out;
}

namespace {

using nlohmann::json;

constexpr const char* kPairFormat = "gaitplan-preference-pairs";

std::uint32_t crc_of(const std::string& payload) {
  return static_cast<std::uint32_t>(crc32(
      0L, reinterpret_cast<const Bytef*>(payload.data()), static_cast<uInt>(payload.size())));
}

}  // namespace

void save_pairs(const std::vector<PreferencePair>& pairs, const std::string& mode, int h,
                const std::filesystem::path& path) {
  std::string payload;
  for (const auto& p : pairs) {
    json j;
    j["winner"] = {{"traj", p.winner.origin.traj}, {"start", p.winner.origin.start}};
    j["loser"] = {{"traj", p.loser.origin.traj}, {"start", p.loser.origin.start}};
    j["margin"] = p.margin;
    j["provenance"] = p.provenance;
    payload += j.dump();
    payload += '\n';
  }
  json header;
  header["format"] = kPairFormat;
  header["version"] = 1;
  header["count"] = pairs.size();
  header["mode"] = mode;
  header["horizon"] = h;
  header["crc32"] = crc_of(payload);
  std::ofstream out(path, std::ios::binary);
  GP_REQUIRE(out.good(), "save_pairs: cannot open " + path.string());
  out << header.dump() << "\n" << payload;
}

std::vector<PreferencePair> load_pairs(const std::filesystem::path& path,
                                       const std::vector<data::Trajectory>& trajs, int h) {
  std::ifstream in(path, std::ios::binary);
  if (!in.good()) throw PrereqError("load_pairs: missing preference file " + path.string());
  std::string header_line;
  GP_REQUIRE(static_cast<bool>(std::getline(in, header_line)), "load_pairs: truncated file");
  json header = json::parse(header_line);
  GP_REQUIRE(header.value("format", "") == kPairFormat,
             "load_pairs: not a preference file: " + path.string());
  GP_REQUIRE(header.value("version", -1) == 1, "load_pairs: unsupported version");
  GP_REQUIRE(header.value("horizon", -1) == h,
             "load_pairs: pairs were built for a different horizon");

  std::stringstream rest;
  rest << in.rdbuf();
  std::string payload = rest.str();
  GP_REQUIRE(crc_of(payload) == header.at("crc32").get<std::uint32_t>(),
             "load_pairs: checksum mismatch in " + path.string());

  std::vector<PreferencePair> out;
  std::istringstream lines(payload);
  std::string line;
  while (std::getline(lines, line)) {
    if (line.empty()) continue;
    json j = json::parse(line);
    PreferencePair p;
    p.winner = data::slice(trajs, {j["winner"]["traj"].get<int>(),
                                   j["winner"]["start"].get<int>()}, h);
    p.loser = data::slice(trajs, {j["loser"]["traj"].get<int>(),
                                  j["loser"]["start"].get<int>()}, h);
    p.margin = j["margin"].get<double>();
    p.provenance = j["provenance"].get<std::string>();
    out.push_back(std::move(p));
  }
  GP_REQUIRE(out.size() == header.at("count").get<std::size_t>(),
             "load_pairs: pair count disagrees with header");
  return out;
}

}  // namespace gaitplan::pref
