#include "dtmap/channel.hpp"

#include <cmath>
#include <stdexcept>

namespace dtmap {

RatePalette::RatePalette(std::vector<double> rates) : rates_(std::move(rates)) {
  if (rates_.empty()) throw std::invalid_argument("RatePalette: no rates");
  for (std::size_t i = 1; i < rates_.size(); ++i)
    if (!(rates_[i] > rates_[i - 1])) throw std::invalid_argument("RatePalette: rates must increase");
  if (!(rates_.front() > 0.0)) throw std::invalid_argument("RatePalette: rates must be positive");
}

RatePalette RatePalette::evenly_spaced(std::size_t n, double lo, double hi) {
  if (n == 0) throw std::invalid_argument("RatePalette: n must be positive");
  if (n == 1) return RatePalette({hi});
  std::vector<double> r(n);
  for (std::size_t i = 0; i < n; ++i) r[i] = lo + (hi - lo) * static_cast<double>(i) / static_cast<double>(n - 1);
  return RatePalette(std::move(r));
}

void validate_transition_matrix(const TransitionMatrix& p) {
  if (p.rows() == 0 || p.rows() != p.cols()) throw std::invalid_argument("transition matrix must be square");
  if ((p.array() < 0.0).any() || (p.array() > 1.0).any())
    throw std::invalid_argument("transition matrix entries must lie in [0,1]");
  if (((p.rowwise().sum().array() - 1.0).abs() > 1e-9).any())
    throw std::invalid_argument("transition matrix rows must sum to 1");
}

TransitionMatrix random_transition_matrix(std::size_t n, Rng& rng) {
  TransitionMatrix p(n, n);
  for (Eigen::Index i = 0; i < p.rows(); ++i) {
    for (Eigen::Index j = 0; j < p.cols(); ++j) p(i, j) = rng.exponential();
    p.row(i) /= p.row(i).sum();
  }
  return p;
}

TransitionMatrix two_state_matrix(double high_ratio, double switch_rate) {
  if (!(high_ratio > 0.0 && high_ratio < 1.0)) throw std::invalid_argument("two_state_matrix: ratio must be in (0,1)");
  if (!(switch_rate > 0.0 && switch_rate <= 1.0))
    throw std::invalid_argument("two_state_matrix: switch rate must be in (0,1]");
  const double up = high_ratio * switch_rate;           // low -> high
  const double down = (1.0 - high_ratio) * switch_rate;  // high -> low
  TransitionMatrix p(2, 2);
  p << 1.0 - up, up, down, 1.0 - down;
  return p;
}

Eigen::VectorXd stationary_distribution(const TransitionMatrix& p) {
  Eigen::RowVectorXd pi = Eigen::RowVectorXd::Constant(p.rows(), 1.0 / static_cast<double>(p.rows()));
  for (int it = 0; it < 10000; ++it) {
    Eigen::RowVectorXd next = pi * p;
    if ((next - pi).cwiseAbs().maxCoeff() < 1e-14) return next.transpose();
    pi = next;
  }
  return pi.transpose();
}

RegimeModel RegimeModel::uniform(std::vector<TransitionMatrix> regimes) {
  RegimeModel m;
  const auto r = static_cast<Eigen::Index>(regimes.size());
  m.regimes = std::move(regimes);
  m.distribution = Eigen::VectorXd::Constant(r, r > 0 ? 1.0 / static_cast<double>(r) : 0.0);
  m.validate();
  return m;
}

void RegimeModel::validate() const {
  if (regimes.empty()) throw std::invalid_argument("RegimeModel: need at least one regime");
  if (distribution.size() != static_cast<Eigen::Index>(regimes.size()))
    throw std::invalid_argument("RegimeModel: distribution size mismatch");
  if ((distribution.array() < 0.0).any() || std::abs(distribution.sum() - 1.0) > 1e-9)
    throw std::invalid_argument("RegimeModel: distribution must sum to 1");
  for (const auto& p : regimes) {
    validate_transition_matrix(p);
    if (p.rows() != regimes.front().rows()) throw std::invalid_argument("RegimeModel: state count mismatch");
  }
}

const TransitionMatrix& begin_interval(RegimeModel& m, Rng& rng) {
  m.current = m.regimes.size() == 1 ? 0 : rng.categorical(m.distribution);
  return m.regimes[m.current];
}

std::size_t step_rate(std::size_t state, const TransitionMatrix& t, Rng& rng) {
  if (state >= static_cast<std::size_t>(t.rows())) throw std::invalid_argument("step_rate: bad state");
  return rng.categorical(t.row(static_cast<Eigen::Index>(state)).transpose());
}

TransitionMatrix empirical_transition_matrix(std::span<const std::size_t> trace, std::size_t n) {
  if (trace.size() < 2) throw std::invalid_argument("empirical_transition_matrix: trace too short");
  if (n == 0) throw std::invalid_argument("empirical_transition_matrix: n must be positive");
  TransitionMatrix counts = TransitionMatrix::Zero(n, n);
  for (std::size_t i = 0; i + 1 < trace.size(); ++i) {
    if (trace[i] >= n || trace[i + 1] >= n) throw std::invalid_argument("empirical_transition_matrix: bad state");
    counts(static_cast<Eigen::Index>(trace[i]), static_cast<Eigen::Index>(trace[i + 1])) += 1.0;
  }
  if (trace.back() >= n) throw std::invalid_argument("empirical_transition_matrix: bad state");
  for (Eigen::Index i = 0; i < counts.rows(); ++i) {
    const double total = counts.row(i).sum();
    if (total > 0.0) {
      counts.row(i) /= total;
    } else {
      counts.row(i).setConstant(1.0 / static_cast<double>(n));
    }
  }
  return counts;
}

RateHistory::RateHistory(std::size_t tau, std::size_t initial_state) : window_(tau + 1, initial_state) {}

void RateHistory::push(std::size_t state) {
  window_.pop_front();
  window_.push_back(state);
}

std::vector<double> RateHistory::rates(const RatePalette& palette) const {
  std::vector<double> out;
  out.reserve(window_.size());
  for (std::size_t s : window_) out.push_back(palette.rate(s));
  return out;
}

ChannelSimulator::ChannelSimulator(RatePalette palette, RegimeModel regimes, Rng rng)
    : palette_(std::move(palette)), regimes_(std::move(regimes)), rng_(std::move(rng)) {
  regimes_.validate();
  if (regimes_.states() != palette_.size()) throw std::invalid_argument("ChannelSimulator: palette/regime size mismatch");
}

void ChannelSimulator::begin_interval() { dtmap::begin_interval(regimes_, rng_); }

std::size_t ChannelSimulator::initialize() {
  state_ = rng_.index(palette_.size());
  return state_;
}

std::size_t ChannelSimulator::step() {
  state_ = step_rate(state_, current_matrix(), rng_);
  return state_;
}

}  // namespace dtmap
