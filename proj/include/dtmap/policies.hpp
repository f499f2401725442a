#pragma once

#include <functional>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "dtmap/env.hpp"
#include "dtmap/rng.hpp"

namespace dtmap {

struct PolicyDecision {
  Action action;
  std::optional<std::vector<double>> scores;  // diagnostics, one per frame
};

/// Newest `plan.upload` frames of F_k; evicts the oldest frames of V ∪ U
/// (by capture slot, then lower id).
Action lff(const EnvState& s, const SlotPlan& plan);

/// `plan.upload` frames at evenly spaced capture indices of F_k; evicts the oldest.
Action pu(const EnvState& s, const SlotPlan& plan);

/// Marginal-gain greedy on the slot objective measured against `reference`
/// frames: add the candidate that lowers it most until the budget is spent,
/// then drop the frame whose removal raises it least until the cap holds.
Action adapt_greedy(const EnvState& s, const SlotPlan& plan, const PoseInfoMatrix& pi,
                    std::span<const FramePtr> reference);
/// Uses the frames captured this slot as the reference (the policy never sees F_{k+1}).
Action adapt_greedy(const EnvState& s, const SlotPlan& plan, const PoseInfoMatrix& pi);

struct OracleResult {
  Action action;
  SlotScore score;
  std::size_t evaluated = 0;
};

/// Exhaustive search over every (U, C) with the plan's cardinalities, scored
/// against the true next frames. Ties go to the lexicographically smallest id
/// sets. Throws std::invalid_argument when |F_k| > 8 or the map holds more than 6 frames.
OracleResult brute_force_slot_optimal(const EnvState& s, const SlotPlan& plan, std::span<const FramePtr> next_frames,
                                      const PoseInfoMatrix& pi);

/// Slot objective of the map that `a` produces, against `reference`.
SlotScore action_score(const EnvState& s, const Action& a, std::span<const FramePtr> reference,
                       const PoseInfoMatrix& pi);

/// Uniform random action with the plan's cardinalities.
Action random_action(const EnvState& s, const SlotPlan& plan, Rng& rng);

/// Drives one slot of an episode. Learners also see the realized transition.
class Controller {
 public:
  virtual ~Controller() = default;
  virtual std::string name() const = 0;
  virtual Action decide(const StatePtr& s, const SlotPlan& plan) = 0;
  virtual void observe(const Experience&) {}
};

/// One row of the per-slot log.
struct SlotRecord {
  std::size_t interval = 0;
  std::size_t slot = 0;
  double rate = 0.0;
  std::size_t budget = 0;
  std::size_t uploaded = 0;
  std::size_t evicted = 0;
  std::size_t map_size = 0;  // after the slot's action
  double upsilon = 0.0;
  double reward = 0.0;
  double cum_return = 0.0;  // discounted sum up to and including this slot
};

using RecordSink = std::function<void(const SlotRecord&)>;

/// Resets the environment when it has not been reset yet, then plays it to the end.
std::vector<SlotRecord> run_episode(Environment& env, Controller& controller, const RecordSink& sink = {});

/// "lff", "pu" or "adapt". Throws std::invalid_argument for other names.
std::unique_ptr<Controller> make_baseline(std::string_view name, const PoseInfoMatrix& pi);

}  // namespace dtmap
