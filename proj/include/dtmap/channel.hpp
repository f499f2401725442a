#pragma once

#include <cstddef>
#include <deque>
#include <span>
#include <vector>

#include <Eigen/Core>

#include "dtmap/rng.hpp"

namespace dtmap {

/// Ordered uplink rates (Mbit/s) of the N channel states.
class RatePalette {
 public:
  /// Throws std::invalid_argument unless rates are non-empty and strictly increasing.
  explicit RatePalette(std::vector<double> rates);

  /// n evenly spaced rates on [lo, hi]; n == 1 yields {hi}.
  static RatePalette evenly_spaced(std::size_t n, double lo = 40.0, double hi = 80.0);

  std::size_t size() const { return rates_.size(); }
  double rate(std::size_t state) const { return rates_.at(state); }
  double max_rate() const { return rates_.back(); }
  const std::vector<double>& rates() const { return rates_; }

 private:
  std::vector<double> rates_;
};

/// Row-stochastic N×N matrix.
using TransitionMatrix = Eigen::MatrixXd;

/// Throws std::invalid_argument unless p is square, entries lie in [0,1] and rows sum to 1 (1e-9).
void validate_transition_matrix(const TransitionMatrix& p);

/// Rows drawn from a symmetric Dirichlet(1).
TransitionMatrix random_transition_matrix(std::size_t n, Rng& rng);

/// Two-state chain whose stationary distribution puts mass `high_ratio` on the
/// high-rate state; `switch_rate` is the sum of the two off-diagonal entries.
TransitionMatrix two_state_matrix(double high_ratio, double switch_rate = 0.3);

/// Stationary distribution by power iteration.
Eigen::VectorXd stationary_distribution(const TransitionMatrix& p);

/// Per-interval transition regimes x_t ~ p(x).
struct RegimeModel {
  std::vector<TransitionMatrix> regimes;
  Eigen::VectorXd distribution;
  std::size_t current = 0;

  /// Uniform distribution over the given regimes.
  static RegimeModel uniform(std::vector<TransitionMatrix> regimes);
  void validate() const;
  std::size_t states() const { return static_cast<std::size_t>(regimes.front().rows()); }
};

/// Samples the regime governing the next interval and makes it current.
const TransitionMatrix& begin_interval(RegimeModel& m, Rng& rng);

/// Next channel state drawn from row `state` of t.
std::size_t step_rate(std::size_t state, const TransitionMatrix& t, Rng& rng);

/// Row-normalized bigram counts; unseen rows become uniform.
/// Throws std::invalid_argument for traces shorter than 2 or out-of-range states.
TransitionMatrix empirical_transition_matrix(std::span<const std::size_t> trace, std::size_t n);

/// Last τ+1 channel states d_{k−τ..k}; padded by repeating the first state.
class RateHistory {
 public:
  RateHistory() = default;
  RateHistory(std::size_t tau, std::size_t initial_state);

  void push(std::size_t state);
  std::size_t tau() const { return window_.size() - 1; }
  std::size_t current() const { return window_.back(); }
  /// Oldest first.
  std::vector<std::size_t> states() const { return {window_.begin(), window_.end()}; }
  std::vector<double> rates(const RatePalette& palette) const;

  friend bool operator==(const RateHistory&, const RateHistory&) = default;

 private:
  std::deque<std::size_t> window_;
};

/// One uplink channel: palette + regime model + its own random stream.
/// Never reads map or policy state.
class ChannelSimulator {
 public:
  ChannelSimulator(RatePalette palette, RegimeModel regimes, Rng rng);

  /// Starts a new interval (resamples the regime).
  void begin_interval();
  /// Draws the initial state uniformly.
  std::size_t initialize();
  std::size_t step();

  std::size_t state() const { return state_; }
  double rate() const { return palette_.rate(state_); }
  const RatePalette& palette() const { return palette_; }
  const RegimeModel& regimes() const { return regimes_; }
  const TransitionMatrix& current_matrix() const { return regimes_.regimes[regimes_.current]; }

 private:
  RatePalette palette_;
  RegimeModel regimes_;
  Rng rng_;
  std::size_t state_ = 0;
};

}  // namespace dtmap
