#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <unordered_map>
#include <utility>
#include <vector>

#include "dtmap/env.hpp"
#include "dtmap/neural.hpp"
#include "dtmap/policies.hpp"
#include "dtmap/rng.hpp"
#include "dtmap/udt.hpp"

namespace dtmap {

/// Latent-independent part of a state's encoding.
struct StateGraph {
  std::vector<FramePtr> nodes;  // stored frames (id order), then new candidates (id order)
  std::size_t map_count = 0;
  nn::Matrix features;   // nodes × kNodeFeatures
  nn::Matrix adjacency;  // normalized, with self-loops
  Eigen::RowVectorXd rates;  // rate history / d_max, oldest first
  double map_fill = 0.0;     // |V| / V^max
  SlotPlan plan;
  std::size_t kept = 0;  // map size after the slot's action

  static constexpr std::size_t kNodeFeatures = 4;
  std::size_t candidate_count() const { return nodes.size() - map_count; }
};

/// Augmented state: graph block plus the global vector [rates, μ, Σ, map fill].
struct StateEncoding {
  std::shared_ptr<const StateGraph> graph;
  Eigen::RowVectorXd global;
};

/// Per-node rows: point count relative to the largest frame, summed overlap with
/// the stored frames over the largest frame size, age/(1+age) in slots,
/// stored-frame flag. Edge weights are overlaps scaled by 1/sqrt(|M_i||M_j|).
std::shared_ptr<const StateGraph> build_state_graph(const EnvState& s, const EnvConfig& cfg, const RatePalette& palette);
StateEncoding encode_state(std::shared_ptr<const StateGraph> graph, const LatentFeatures& latent);
StateEncoding encode_state(const EnvState& s, const LatentFeatures& latent, const EnvConfig& cfg,
                           const RatePalette& palette);

std::size_t global_width(std::size_t tau, std::size_t latent);

/// 0/1 retention of every node under `a` (stored and not evicted, or uploaded and not evicted).
Eigen::VectorXd kept_mask(const StateGraph& g, const Action& a);

struct NetworkShape {
  std::size_t gcn1 = 32;
  std::size_t gcn2 = 16;
  std::vector<std::size_t> actor_hidden{32, 16};
  std::vector<std::size_t> critic_hidden{32, 16};
};

/// Two graph convolutions, then a dense head scoring every node from its
/// embedding and the global vector.
class ActorNet {
 public:
  ActorNet(std::size_t global_dim, const NetworkShape& shape, Rng& rng);
  nn::Matrix forward(const StateEncoding& x);  // nodes × 1
  void backward(const nn::Matrix& grad_scores);
  nn::ParameterList parameters();
  nn::Mlp& head() { return head_; }

 private:
  nn::GraphConv g1_, g2_;
  nn::Mlp head_;
  std::size_t gcn2_;
  Eigen::Index nodes_ = 0;
};

/// Q(s, a) from the mean-pooled embedding, the global vector and the
/// retention-weighted pooled embedding pᵀH / kept.
class CriticNet {
 public:
  CriticNet(std::size_t global_dim, const NetworkShape& shape, Rng& rng);
  double forward(const StateEncoding& x, const Eigen::VectorXd& keep);
  /// Accumulates parameter gradients for dL/dQ and returns dQ/dkeep scaled by it.
  Eigen::VectorXd backward(double grad_q);
  /// Q and dQ/dkeep at `keep`. Leaves gradients in the critic's parameters.
  std::pair<double, Eigen::VectorXd> action_gradient(const StateEncoding& x, const Eigen::VectorXd& keep) {
    const double q = forward(x, keep);
    return {q, backward(1.0)};
  }
  nn::ParameterList parameters();
  nn::Mlp& head() { return head_; }

 private:
  nn::GraphConv g1_, g2_;
  nn::Mlp head_;
  std::size_t gcn2_;
  std::size_t global_dim_;
  nn::Matrix h_;
  Eigen::VectorXd keep_;
  double kept_ = 1.0;
};

/// Welford running mean and variance of real rewards.
class RewardNormalizer {
 public:
  void observe(double r);
  double normalize(double r) const;
  std::size_t count() const { return n_; }

 private:
  std::size_t n_ = 0;
  double mean_ = 0.0;
  double m2_ = 0.0;
};

struct ActorCritic {
  ActorCritic(std::size_t global_dim, const NetworkShape& shape, double actor_lr, double critic_lr, Rng& rng);

  ActorNet actor;
  CriticNet critic;
  ActorNet target_actor;
  CriticNet target_critic;
  nn::Adam actor_opt;
  nn::Adam critic_opt;

  void soft_update_targets(double rate);
};

/// Score-and-select: the top plan.upload candidates by score, then the
/// plan.evict lowest-scoring frames of V ∪ U. Ties go to the lower id.
Action select_action(const StateGraph& g, const Eigen::VectorXd& scores);
/// Actor scores plus N(0, noise_std²) exploration noise (skipped when noise_std is 0).
Action act(ActorNet& actor, const StateEncoding& x, double noise_std, Rng& rng);

/// One replay tuple in network form; reward already normalized.
struct Transition {
  StateEncoding state;
  Eigen::VectorXd keep;
  double reward = 0.0;
  StateEncoding next;
};

/// Mean squared TD error against r + γ·Q'(s', π'(s')) with target networks;
/// accumulates critic gradients.
double critic_loss(ActorCritic& ac, std::span<const Transition> batch, double gamma);
/// critic_loss followed by one optimizer step. Returns the pre-step loss.
double critic_update(ActorCritic& ac, std::span<const Transition> batch, double gamma);

/// Accumulates −∇ mean Q(s, σ(π(s))) into the actor's gradients (the critic's
/// gradients are left dirty). Works with any actor exposing forward/backward
/// over score columns and any critic exposing action_gradient. Returns mean Q.
template <class Actor, class Critic, class Input>
double dpg_accumulate(Actor& actor, Critic& critic, std::span<const Input> states) {
  if (states.empty()) return 0.0;
  const double B = static_cast<double>(states.size());
  double total = 0.0;
  for (const Input& x : states) {
    const nn::Matrix scores = actor.forward(x);
    const Eigen::VectorXd p = (1.0 + (-scores.col(0).array()).exp()).inverse().matrix();
    const auto [q, dq_dp] = critic.action_gradient(x, p);
    total += q;
    const nn::Matrix dscores = (-(dq_dp.array() * p.array() * (1.0 - p.array())) / B).matrix();
    actor.backward(dscores);
  }
  return total / B;
}

/// One deterministic-policy-gradient ascent step on the actor. Returns the gradient norm.
double actor_update(ActorCritic& ac, std::span<const Transition> batch);
/// Mean Q(s, σ(π(s))) over the batch, without updating anything.
double mean_policy_value(ActorCritic& ac, std::span<const Transition> batch);

struct AmmConfig {
  std::size_t batch = 32;           // |Ξ|
  std::size_t real_per_batch = 16;  // I
  std::size_t min_real = 8;         // updates start once this many real tuples exist
  std::size_t updates_per_slot = 1;
  double gamma = 0.9;
  double soft_update = 0.01;
  double noise_start = 0.3;
  double noise_end = 0.05;
  double actor_lr = 1e-2;
  double critic_lr = 1e-3;
  NetworkShape shape;
  UdtConfig udt;

  void validate() const;
};

struct BlendStats {
  std::size_t batches = 0;
  std::size_t real = 0;
  std::size_t artificial = 0;
  std::size_t backfilled = 0;  // artificial slots filled with real tuples
  std::size_t twin_updates = 0;
};

/// The AMM learner driven slot by slot.
class AmmAgent final : public Controller {
 public:
  AmmAgent(const AmmConfig& cfg, const EnvModel& env, std::size_t tau, std::size_t total_slots, std::uint64_t seed);

  std::string name() const override { return "mbrl"; }
  Action decide(const StatePtr& s, const SlotPlan& plan) override;
  void observe(const Experience& xi) override;

  const BlendStats& stats() const { return stats_; }
  const ExperienceStore& store() const { return store_; }
  ChannelModel& twin() { return model_; }
  ActorCritic& networks() { return ac_; }
  const std::vector<UpdateReport>& twin_reports() const { return reports_; }
  /// Disables exploration noise and learning (evaluation mode).
  void freeze(bool frozen) { frozen_ = frozen; }

 private:
  StateEncoding encoding(const StatePtr& s);
  Transition to_transition(const Experience& xi);
  void learn();
  double noise_std(std::size_t slot) const;

  AmmConfig cfg_;
  const EnvModel* env_;
  std::size_t total_slots_;
  Rng policy_rng_, replay_rng_, twin_rng_, init_rng_;
  ChannelModel model_;
  ActorCritic ac_;
  ExperienceStore store_;
  RewardNormalizer rewards_;
  BlendStats stats_;
  std::vector<UpdateReport> reports_;
  bool frozen_ = false;
  std::uint64_t latent_version_ = 0;

  struct GraphEntry {
    std::weak_ptr<const EnvState> owner;
    std::shared_ptr<const StateGraph> graph;
  };
  struct LatentEntry {
    std::weak_ptr<const EnvState> owner;
    std::uint64_t version = 0;
    LatentFeatures latent;
  };
  std::unordered_map<const EnvState*, GraphEntry> graphs_;
  std::unordered_map<const EnvState*, LatentEntry> latents_;
  void purge_caches();
};

/// Requires a reset environment (the penalty is fixed at reset).
std::unique_ptr<AmmAgent> make_amm_agent(const AmmConfig& cfg, const Environment& env, std::uint64_t seed);

struct AmmRun {
  std::vector<SlotRecord> records;
  BlendStats stats;
};

/// Resets `env`, then runs the learner over the whole timeline.
AmmRun amm_run(Environment& env, const AmmConfig& cfg, std::uint64_t seed, const RecordSink& sink = {});

}  // namespace dtmap
