#pragma once

#include <cstddef>
#include <deque>
#include <functional>
#include <iosfwd>
#include <span>
#include <string>
#include <vector>

#include "dtmap/channel.hpp"
#include "dtmap/env.hpp"
#include "dtmap/neural.hpp"
#include "dtmap/rng.hpp"

namespace dtmap {

/// Real experiences (FIFO, chained slot to slot) plus the artificial tuples
/// generated from them.
class ExperienceStore {
 public:
  explicit ExperienceStore(std::size_t real_capacity = 5000, std::size_t artificial_capacity = 10000);

  /// Appends a real tuple. Throws std::invalid_argument unless its state is the
  /// newest tuple's next state (any tuple is accepted by an empty store).
  /// Evicting the oldest real tuple also drops the artificial tuples built on it.
  void collect(Experience xi);

  /// Replaces Ξ^a, keeping the newest `artificial_capacity` tuples. Throws
  /// std::invalid_argument if a tuple's state is not a stored real state.
  void replace_artificial(std::vector<Experience> tuples);

  const std::deque<Experience>& real() const { return real_; }
  const std::vector<Experience>& artificial() const { return artificial_; }
  std::size_t real_capacity() const { return real_capacity_; }
  std::size_t artificial_capacity() const { return artificial_capacity_; }

 private:
  std::size_t real_capacity_;
  std::size_t artificial_capacity_;
  std::deque<Experience> real_;
  std::vector<Experience> artificial_;
};

/// One training pair: the τ+1 most recent channel states and the state that followed.
struct RateSample {
  std::vector<std::size_t> history;
  std::size_t next = 0;
};

RateSample rate_sample(const Experience& xi);
/// Every window of length tau+1 in `trace` with its successor.
std::vector<RateSample> rate_samples_from_trace(std::span<const std::size_t> trace, std::size_t tau);

struct LatentFeatures {
  Eigen::VectorXd mu;
  Eigen::VectorXd sigma;  // diagonal variance
};

struct ChannelModelConfig {
  std::size_t states = 2;  // N
  std::size_t tau = 8;
  std::size_t latent = 8;  // Z
  std::size_t recurrent = 32;
  std::vector<std::size_t> encoder_head{32};
  std::vector<std::size_t> decoder{32, 32};
  nn::CellType cell = nn::CellType::Lstm;
  double learning_rate = 3e-3;
  double kl_weight = 1.0;  // weight of the KL term in the training loss
  std::size_t batch = 32;
  std::size_t epochs = 20;

  void validate() const;
};

struct ElboTerms {
  double loss = 0.0;            // reconstruction + kl_weight · kl
  double reconstruction = 0.0;  // mean cross-entropy of the true next state
  double kl = 0.0;              // mean KL(q ‖ N(0, I))
};

/// Variational channel model: a recurrent encoder reads the one-hot rate
/// history and emits (μ, log Σ) of a diagonal Gaussian; the decoder maps a
/// latent sample and the current state to a softmax over the N next states.
class ChannelModel {
 public:
  ChannelModel(ChannelModelConfig config, Rng& init);

  const ChannelModelConfig& config() const { return config_; }

  /// Throws std::invalid_argument for a window of the wrong length or an out-of-range state.
  LatentFeatures extract_latent(std::span<const std::size_t> history);

  /// Decoder softmax at z = μ + sqrt(Σ)∘noise (noise empty: z = μ).
  Eigen::VectorXd next_state_distribution(std::span<const std::size_t> history,
                                          const Eigen::VectorXd& noise = Eigen::VectorXd());

  /// Negative ELBO averaged over the batch with the reparameterization noise
  /// fixed (batch × Z). Accumulates parameter gradients.
  ElboTerms elbo_loss(std::span<const RateSample> batch, const nn::Matrix& noise);
  /// Same value without touching the gradients.
  ElboTerms elbo_value(std::span<const RateSample> batch, const nn::Matrix& noise);

  /// One Adam step from the accumulated gradients.
  void optimizer_step();

  /// Row s: decoder output at μ for the history that sat in state s throughout.
  TransitionMatrix implied_transition_matrix();
  /// Row s: decoder output at μ averaged over the given windows ending in s;
  /// states with no window fall back to the constant history.
  TransitionMatrix implied_transition_matrix(std::span<const std::vector<std::size_t>> contexts);

  nn::ParameterList parameters();
  nn::Recurrent& encoder_rnn() { return rnn_; }
  nn::Mlp& encoder_head() { return head_; }
  nn::Mlp& decoder() { return decoder_; }

  void save(std::ostream& out);
  void load(std::istream& in);

 private:
  struct Forward {
    nn::Matrix mu, logvar, z, probs;
  };
  std::vector<nn::Matrix> one_hot_sequence(std::span<const std::vector<std::size_t>> histories) const;
  /// [z, one-hot(last state of each history)].
  nn::Matrix decoder_input(const nn::Matrix& z, std::span<const std::vector<std::size_t>> histories) const;
  nn::Matrix encode(std::span<const std::vector<std::size_t>> histories);  // batch × 2Z
  Forward run(std::span<const RateSample> batch, const nn::Matrix& noise);
  ElboTerms terms(std::span<const RateSample> batch, const Forward& f) const;

  ChannelModelConfig config_;
  nn::Recurrent rnn_;
  nn::Mlp head_;
  nn::Mlp decoder_;
  nn::Adam adam_;
};

/// Chooses the next channel state of an artificial tuple built from `real`.
using NextStateSampler = std::function<std::size_t(const Experience& real, Rng& rng)>;
/// Chooses the action of an artificial tuple.
using ActionSampler = std::function<Action(const Experience& real, const SlotPlan& plan, Rng& rng)>;

/// Samples from the decoder at z = μ + sqrt(Σ)ε for the real state's history.
NextStateSampler model_sampler(ChannelModel& model);
/// Uniform random action with the slot's cardinalities.
ActionSampler random_action_sampler();

/// J artificial tuples per real tuple: a sampled next channel state, a sampled
/// action, the emulated map and the reward against the real next frames.
std::vector<Experience> generate_artificial(const ExperienceStore& store, const EnvModel& env, std::size_t J, Rng& rng,
                                            const NextStateSampler& next_state,
                                            const ActionSampler& action = random_action_sampler());

struct UdtConfig {
  ChannelModelConfig model;
  std::size_t samples_per_real = 5;  // J
  std::size_t cadence = 50;          // W
  std::size_t real_capacity = 5000;
  std::size_t artificial_capacity = 10000;
};

struct UpdateReport {
  bool trained = false;
  std::string notice;
  double loss_before = 0.0;  // on the first training batch with fixed noise
  double loss_after = 0.0;
  std::size_t batches = 0;
  std::size_t artificial = 0;
};

/// Fits the channel model on the real store, then regenerates Ξ^a from it.
/// Skips (trained = false, notice set) when the store holds fewer than a batch.
UpdateReport udt_update(ExperienceStore& store, ChannelModel& model, const EnvModel& env, const UdtConfig& cfg,
                        Rng& rng, const ActionSampler& action = random_action_sampler());

/// Trains on bare rate samples for the configured number of epochs; returns the
/// per-epoch mean loss.
std::vector<double> train_channel_model(ChannelModel& model, std::span<const RateSample> samples, Rng& rng);

}  // namespace dtmap
