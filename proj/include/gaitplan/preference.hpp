#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include "gaitplan/data.hpp"
#include "gaitplan/types.hpp"

namespace gaitplan::pref {

// Exact nearest neighbor over the normalized (state, action) points of the
// single optimal expert trajectory. Pruning is conservative, so queries agree
// with brute force on the minimum distance.
class ExpertIndex {
 public:
  ExpertIndex(MatX points, data::NormStats stats);

  struct Hit {
    int index = -1;
    double dist2 = 0.0;
  };

  Hit nearest(const Eigen::Ref<const VecX>& query) const;
  double nearest_distance(const Eigen::Ref<const VecX>& query) const;

  // Canonical metric shared with brute-force checks.
  static double dist2(const Eigen::Ref<const VecX>& a, const Eigen::Ref<const VecX>& b) {
    return (a - b).squaredNorm();
  }

  int size() const { return static_cast<int>(points_.rows()); }
  int dim() const { return static_cast<int>(points_.cols()); }
  const MatX& points() const { return points_; }
  const data::NormStats& stats() const { return stats_; }

  // Normalized (s, a) query point in the index's feature space.
  VecX query_point(const Eigen::Ref<const VecX>& state,
                   const Eigen::Ref<const VecX>& action) const;

 private:
  struct Node {
    int point = -1;
    int axis = 0;
    double split = 0.0;
    int left = -1;
    int right = -1;
  };

  int build(std::vector<int>& idx, int lo, int hi, int depth);
  void search(int node, const Eigen::Ref<const VecX>& q, Hit& best) const;

  MatX points_;
  data::NormStats stats_;
  std::vector<Node> nodes_;
  int root_ = -1;
};

// Index of the trajectory with the highest cumulative reward; ties go to the
// lowest index.
std::size_t select_optimal_expert(const std::vector<data::Trajectory>& trajs);

ExpertIndex build_index(const data::Trajectory& optimal, const data::NormStats& stats);

// v = exp(-beta * d / action_dim), d the nearest-neighbor distance of the
// normalized (s, a) pair; always in (0, 1].
double value(const ExpertIndex& index, const Eigen::Ref<const VecX>& state,
             const Eigen::Ref<const VecX>& action, double beta, int action_dim);

double segment_value_sum(const ExpertIndex& index, const data::Segment& seg, double beta);

struct PreferencePair {
  data::Segment winner;
  data::Segment loser;
  double margin = 0.0;          // >= 0
  std::string provenance;       // weak | strong
};

PreferencePair label_pair_weak(const data::Segment& a, const data::Segment& b,
                               const ExpertIndex& index, double beta, Rng& tie_rng);

PreferencePair label_pair_strong(const data::Segment& a, const data::Segment& b, Rng& tie_rng);

// Sigmoid of the score difference; bt_probability(a, b) + bt_probability(b, a)
// is exactly 1.
double bt_probability(double score_plus, double score_minus);

enum class LabelMode { kWeak, kStrong };

LabelMode label_mode(const std::string& name);

// Pairs of distinct segment slots, drawn without replacement until the slot
// pool is exhausted, then the pool is reshuffled.
std::vector<PreferencePair> build_preference_dataset(const std::vector<data::Trajectory>& trajs,
                                                     const ExpertIndex& index, int pairs, int h,
                                                     LabelMode mode, Rng& rng);

void save_pairs(const std::vector<PreferencePair>& pairs, const std::string& mode, int h,
                const std::filesystem::path& path);
std::vector<PreferencePair> load_pairs(const std::filesystem::path& path,
                                       const std::vector<data::Trajectory>& trajs, int h);

}  // namespace gaitplan::pref
