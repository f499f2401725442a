#pragma once

#include <cstddef>
#include <cstdint>
#include <random>
#include <utility>
#include <vector>

#include <Eigen/Core>

namespace dtmap {

// Seeded random source. Distributions are computed here from raw engine
// output so traces do not depend on the standard library's distribution
// implementations.
class Rng {
 public:
  explicit Rng(std::uint64_t seed, std::uint64_t stream = 0);

  std::uint64_t next() { return engine_(); }
  double uniform();  // [0, 1)
  double normal();
  double exponential();
  std::size_t index(std::size_t n);
  bool bernoulli(double p) { return uniform() < p; }

  // Draws an index according to non-negative weights (need not be normalized).
  std::size_t categorical(const Eigen::Ref<const Eigen::VectorXd>& weights);

  // k distinct indices from [0, n), in draw order.
  std::vector<std::size_t> sample_without_replacement(std::size_t n, std::size_t k);

  template <class T>
  void shuffle(std::vector<T>& v) {
    for (std::size_t i = v.size(); i > 1; --i) {
      std::swap(v[i - 1], v[index(i)]);
    }
  }

  Eigen::MatrixXd normal_matrix(Eigen::Index rows, Eigen::Index cols);

 private:
  std::mt19937_64 engine_;
};

// Independent named sub-streams of one experiment seed.
enum class Stream : std::uint64_t {
  Channel = 1,
  Frames = 2,
  Policy = 3,
  Networks = 4,
  Replay = 5,
  Twin = 6,
  Regimes = 7,
};

inline Rng make_rng(std::uint64_t seed, Stream s) {
  return Rng(seed, static_cast<std::uint64_t>(s));
}

}  // namespace dtmap
