#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <memory>
#include <vector>

#include <Eigen/Core>
#include <Eigen/LU>

#include "dtmap/env.hpp"
#include "dtmap/mapgraph.hpp"
#include "dtmap/mbrl.hpp"
#include "dtmap/neural.hpp"
#include "dtmap/rng.hpp"

namespace dtmap::testing {

// Frames whose pairwise overlaps equal w(i, j): every edge gets its own block of
// fresh point ids, and every frame one private point so it is never empty.
inline std::vector<FramePtr> frames_for_weights(const Eigen::MatrixXi& w, FrameId first_id = 0) {
  const auto n = w.rows();
  std::vector<std::vector<PointId>> pts(static_cast<std::size_t>(n));
  PointId next = 1;
  for (Eigen::Index i = 0; i < n; ++i) {
    pts[static_cast<std::size_t>(i)].push_back(next++);
    for (Eigen::Index j = i + 1; j < n; ++j) {
      for (int k = 0; k < w(i, j); ++k) {
        pts[static_cast<std::size_t>(i)].push_back(next);
        pts[static_cast<std::size_t>(j)].push_back(next);
        ++next;
      }
    }
  }
  std::vector<FramePtr> out;
  for (Eigen::Index i = 0; i < n; ++i) {
    out.push_back(make_frame(first_id + static_cast<FrameId>(i), pts[static_cast<std::size_t>(i)]));
  }
  return out;
}

inline MapGraph graph_for_weights(const Eigen::MatrixXi& w) { return MapGraph::from_frames(frames_for_weights(w)); }

// Random connected weight matrix: a random spanning tree plus extra edges.
inline Eigen::MatrixXi random_connected_weights(std::size_t n, int max_weight, double extra_p, Rng& rng) {
  Eigen::MatrixXi w = Eigen::MatrixXi::Zero(static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(n));
  auto draw = [&] { return 1 + static_cast<int>(rng.index(static_cast<std::size_t>(max_weight))); };
  for (std::size_t i = 1; i < n; ++i) {
    const auto j = static_cast<Eigen::Index>(rng.index(i));
    const auto ii = static_cast<Eigen::Index>(i);
    w(ii, j) = w(j, ii) = draw();
  }
  for (Eigen::Index i = 0; i < w.rows(); ++i) {
    for (Eigen::Index j = i + 1; j < w.rows(); ++j) {
      if (w(i, j) == 0 && rng.bernoulli(extra_p)) w(i, j) = w(j, i) = draw();
    }
  }
  return w;
}

inline Eigen::MatrixXd kron(const Eigen::MatrixXd& a, const Eigen::MatrixXd& b) {
  Eigen::MatrixXd out(a.rows() * b.rows(), a.cols() * b.cols());
  for (Eigen::Index i = 0; i < a.rows(); ++i)
    for (Eigen::Index j = 0; j < a.cols(); ++j) out.block(i * b.rows(), j * b.cols(), b.rows(), b.cols()) = a(i, j) * b;
  return out;
}

// Random SPD information matrix with determinant at least 1.
inline PoseInfoMatrix::Matrix6 random_info(Rng& rng) {
  const Eigen::MatrixXd b = rng.normal_matrix(6, 6);
  PoseInfoMatrix::Matrix6 m = b * b.transpose() + 0.5 * PoseInfoMatrix::Matrix6::Identity();
  const double det = m.determinant();
  if (det < 1.0) m *= std::pow(1.0 / det, 1.0 / 6.0) * 1.01;
  return 0.5 * (m + m.transpose());
}

// Central differences of `loss` against every entry of every parameter, compared
// with the analytic gradients already stored in the parameters. Returns the
// worst relative error max|a−n| / max(scale_floor, |a|, |n|).
inline double worst_gradient_error(const nn::ParameterList& params, const std::function<double()>& loss,
                                   double eps = 1e-5, double scale_floor = 1e-3) {
  // Snapshot first: the loss callback may itself touch the gradients.
  std::vector<Eigen::MatrixXd> analytic_grads;
  for (nn::Parameter* p : params) analytic_grads.push_back(p->grad);
  double worst = 0.0;
  for (std::size_t k = 0; k < params.size(); ++k) {
    nn::Parameter* p = params[k];
    for (Eigen::Index i = 0; i < p->value.size(); ++i) {
      double& v = p->value.data()[i];
      const double saved = v;
      v = saved + eps;
      const double up = loss();
      v = saved - eps;
      const double down = loss();
      v = saved;
      const double numeric = (up - down) / (2.0 * eps);
      const double analytic = analytic_grads[k].data()[i];
      const double scale = std::max({scale_floor, std::abs(numeric), std::abs(analytic)});
      worst = std::max(worst, std::abs(numeric - analytic) / scale);
    }
  }
  return worst;
}

// Tiny map-management instance: frames are random windows on a short line of
// points, so overlaps fall off with distance like real co-visibility.
struct ToyInstance {
  std::shared_ptr<EnvState> state;
  std::vector<FramePtr> next_frames;
  EnvConfig config;
  SlotPlan plan;
};

inline FramePtr toy_frame(FrameId id, std::int64_t slot, Rng& rng) {
  const std::size_t start = rng.index(24);
  const std::size_t len = 3 + rng.index(6);
  std::vector<PointId> pts;
  for (std::size_t i = 0; i < len; ++i)
    if (!rng.bernoulli(0.2)) pts.push_back(start + i);
  if (pts.empty()) pts.push_back(start);
  return make_frame(id, pts, slot);
}

inline ToyInstance toy_instance(Rng& rng, std::size_t max_map = 5, std::size_t max_cands = 6) {
  ToyInstance t;
  t.state = std::make_shared<EnvState>();
  const std::size_t m = 2 + rng.index(max_map - 1);
  const std::size_t c = 1 + rng.index(max_cands);
  std::vector<FramePtr> map;
  FrameId id = 0;
  for (std::size_t i = 0; i < m; ++i) map.push_back(toy_frame(id++, static_cast<std::int64_t>(rng.index(3)), rng));
  for (std::size_t i = 0; i < c; ++i) t.state->recent_frames.push_back(toy_frame(id++, 3, rng));
  for (std::size_t i = 0; i < 3; ++i) t.next_frames.push_back(toy_frame(id++, 4, rng));
  t.state->map = MapGraph::from_frames(std::move(map));
  t.state->history = RateHistory(2, 0);
  t.state->rate = 10.0 * static_cast<double>(1 + rng.index(3));  // budget 1..3
  t.config.v_max = m + rng.index(2);                              // cap binds or has one spare slot
  t.plan = plan_slot(*t.state, t.config);
  return t;
}

// Small live environment: two-state channel, synthetic frames.
inline std::unique_ptr<Environment> small_env(std::uint64_t seed, std::size_t F = 20, std::size_t K = 20,
                                              std::size_t intervals = 2, std::size_t tau = 4,
                                              std::vector<TransitionMatrix> regimes = {}) {
  if (regimes.empty()) regimes.push_back(two_state_matrix(0.5));
  const auto states = static_cast<std::size_t>(regimes.front().rows());
  ChannelSimulator ch(RatePalette::evenly_spaced(states), RegimeModel::uniform(std::move(regimes)), make_rng(seed, Stream::Channel));
  return std::make_unique<Environment>(EnvConfig{}, Timeline{F, K, intervals, tau},
                                       std::make_unique<SyntheticFrameSource>(SynthParams{}, make_rng(seed, Stream::Frames)),
                                       std::move(ch));
}

// Real experiences of `slots` steps under newest-first uploading.
inline std::vector<Experience> play_newest(Environment& env, std::size_t slots) {
  std::vector<Experience> out;
  if (!env.state()) env.reset();
  for (std::size_t k = 0; k < slots && !env.done(); ++k) {
    const EnvState& s = *env.state();
    const SlotPlan p = env.model().plan(s);
    Action a;
    for (std::size_t i = s.recent_frames.size() - p.upload; i < s.recent_frames.size(); ++i)
      a.upload.push_back(s.recent_frames[i]->id);
    const auto ids = s.map.ids();
    for (std::size_t i = 0; i < p.evict; ++i) a.evict.push_back(ids[i]);
    out.push_back(env.step(a).experience);
  }
  return out;
}

inline LatentFeatures zero_latent(std::size_t z) {
  return {Eigen::VectorXd::Zero(static_cast<Eigen::Index>(z)), Eigen::VectorXd::Ones(static_cast<Eigen::Index>(z))};
}

inline NetworkShape small_shape() {
  NetworkShape s;
  s.gcn1 = 8;
  s.gcn2 = 6;
  s.actor_hidden = {8};
  s.critic_hidden = {8};
  return s;
}

// Network-form tuples from newest-first play, with a zero latent and rewards scaled down.
inline std::vector<Transition> transitions(Environment& env, std::size_t slots, std::size_t latent) {
  std::vector<Transition> out;
  for (const auto& xi : play_newest(env, slots)) {
    Transition t;
    t.state = encode_state(*xi.state, zero_latent(latent), env.model().config(), env.model().palette());
    t.keep = kept_mask(*t.state.graph, xi.action);
    t.reward = xi.reward / 10.0;
    t.next = encode_state(*xi.next, zero_latent(latent), env.model().config(), env.model().palette());
    out.push_back(std::move(t));
  }
  return out;
}

}  // namespace dtmap::testing
