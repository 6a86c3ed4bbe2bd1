#pragma once

#include <Eigen/Dense>

#include <cstdint>
#include <initializer_list>
#include <random>
#include <stdexcept>
#include <string>

namespace gaitplan {

using Scalar = double;
using VecX = Eigen::VectorXd;
using MatX = Eigen::MatrixXd;
using Vec4 = Eigen::Vector4d;

struct ConfigError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct PrereqError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct DivergenceError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

[[noreturn]] inline void fail(const std::string& msg) { throw std::runtime_error(msg); }

#define GP_REQUIRE(cond, msg) \
  do {                        \
    if (!(cond)) ::gaitplan::fail(msg); \
  } while (0)

inline std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ull;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ull;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebull;
  return x ^ (x >> 31);
}

// Deterministic RNG with explicit mappings so artifacts are byte-stable
// across runs and platforms (std distributions are implementation-defined).
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : gen_(seed) {}

  // Derives an independent stream seed from a root seed and a path of ids.
  static std::uint64_t derive(std::uint64_t root, std::initializer_list<std::uint64_t> path) {
    std::uint64_t h = splitmix64(root);
    for (std::uint64_t p : path) h = splitmix64(h ^ p);
    return h;
  }

  std::uint64_t raw() { return gen_(); }

  // [0, 1)
  double uniform() { return static_cast<double>(gen_() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // [0, n)
  int uniform_int(int n) {
    GP_REQUIRE(n > 0, "uniform_int: n must be positive");
    return static_cast<int>((static_cast<unsigned __int128>(gen_()) *
                             static_cast<unsigned __int128>(n)) >> 64);
  }

  // Standard normal via Box-Muller.
  double normal() {
    if (has_spare_) {
      has_spare_ = false;
      return spare_;
    }
    double u1 = (static_cast<double>(gen_() >> 11) + 1.0) * 0x1.0p-53;  // (0, 1]
    double u2 = uniform();
    double r = std::sqrt(-2.0 * std::log(u1));
    double theta = 2.0 * M_PI * u2;
    spare_ = r * std::sin(theta);
    has_spare_ = true;
    return r * std::cos(theta);
  }

  VecX normal_vec(Eigen::Index n) {
    VecX v(n);
    for (Eigen::Index i = 0; i < n; ++i) v[i] = normal();
    return v;
  }

  template <typename T>
  void shuffle(std::vector<T>& items) {
    for (std::size_t i = items.size(); i > 1; --i) {
      std::size_t j = static_cast<std::size_t>(uniform_int(static_cast<int>(i)));
      std::swap(items[i - 1], items[j]);
    }
  }

 private:
  std::mt19937_64 gen_;
  bool has_spare_ = false;
  double spare_ = 0.0;
};

}  // namespace gaitplan
