#pragma once

#include <cstddef>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "dtmap/channel.hpp"
#include "dtmap/data.hpp"
#include "dtmap/mapgraph.hpp"
#include "dtmap/uncertainty.hpp"

namespace dtmap {

/// F frames per slot, K slots per interval.
struct Timeline {
  std::size_t frames_per_slot = 60;
  std::size_t slots_per_interval = 50;
  std::size_t num_intervals = 3;
  std::size_t tau = 8;

  void validate() const;
  std::size_t total_slots() const { return slots_per_interval * num_intervals; }
};

struct EnvConfig {
  double alpha = 5.0;   // Mbit per frame
  double d_req = 0.5;   // s
  std::size_t v_max = 25;
  double gamma = 0.9;
  /// Uncertainty charged for a disconnected slot. Unset: penalty_scale × the largest
  /// finite |u| seen on the bootstrap map (at least 1).
  std::optional<double> penalty;
  double penalty_scale = 10.0;
  PoseInfoMatrix pi;

  void validate() const;
};

/// Observation at the start of slot k.
struct EnvState {
  MapGraph map;
  std::vector<FramePtr> recent_frames;  // captured during slot k, sorted by id
  RateHistory history;                  // channel states d_{k−τ..k}
  double rate = 0.0;                    // d_k, Mbit/s
  std::size_t slot = 0;
  std::size_t interval = 0;
};
using StatePtr = std::shared_ptr<const EnvState>;

/// Upload set U_k and eviction set C_k, by frame id.
struct Action {
  std::vector<FrameId> upload;
  std::vector<FrameId> evict;

  void normalize();  // sort both lists
  friend bool operator==(const Action&, const Action&) = default;
};

/// Cardinalities for the slot: the rate budget, the upload count actually
/// possible (budget capped by |F_k|) and the evictions that fill the map to the cap.
struct SlotPlan {
  std::size_t budget = 0;
  std::size_t upload = 0;
  std::size_t evict = 0;
};

SlotPlan plan_slot(const EnvState& s, const EnvConfig& c);

enum class Violation { None, Duplicate, Budget, UploadNotCaptured, EvictUnknown, MapCap };

struct ActionCheck {
  Violation violation = Violation::None;
  std::string detail;
  bool ok() const { return violation == Violation::None; }
};

/// First violated constraint among: duplicate ids, rate budget, U ⊆ F_k, C ⊆ V ∪ U, map cap.
ActionCheck validate_action(const EnvState& s, const Action& a, const EnvConfig& c);

struct Experience {
  StatePtr state;
  Action action;
  double reward = 0.0;
  StatePtr next;
  double upsilon = 0.0;  // clamped slot uncertainty (−reward)
  bool artificial = false;
  std::size_t sample_index = 0;  // j for artificial tuples
};

/// Deterministic part of the environment: cardinalities, map update and reward.
/// Shared by the live environment and the twin's emulator.
class EnvModel {
 public:
  EnvModel(EnvConfig config, RatePalette palette, double penalty);

  const EnvConfig& config() const { return config_; }
  const RatePalette& palette() const { return palette_; }
  double penalty() const { return penalty_; }

  SlotPlan plan(const EnvState& s) const { return plan_slot(s, config_); }
  ActionCheck check(const EnvState& s, const Action& a) const { return validate_action(s, a, config_); }

  /// Eq. evolution of the map. Throws std::invalid_argument on an infeasible action.
  MapGraph apply(const EnvState& s, const Action& a) const;

  /// Slot uncertainty of `map` against the next frames, clamped to the penalty.
  double clamped_upsilon(const MapGraph& map, std::span<const FramePtr> next_frames) const;

  /// Full transition with an externally supplied next channel state and frames.
  Experience transition(const StatePtr& s, const Action& a, std::vector<FramePtr> next_frames,
                        std::size_t next_channel_state, std::size_t next_interval) const;

 private:
  EnvConfig config_;
  RatePalette palette_;
  double penalty_;
};

struct StepResult {
  StatePtr next;
  double reward = 0.0;
  double upsilon = 0.0;
  Experience experience;
};

class Environment {
 public:
  Environment(EnvConfig config, Timeline timeline, std::unique_ptr<FrameSource> frames, ChannelSimulator channel);

  /// Bootstraps the map from one slot of frames (budget-many, even stride, no eviction)
  /// and returns s_0. Throws std::runtime_error when the frame source is exhausted.
  StatePtr reset();

  /// Throws std::invalid_argument on an infeasible action or when called after done().
  StepResult step(const Action& a);

  bool done() const { return !state_ || state_->slot >= timeline_.total_slots(); }
  StatePtr state() const { return state_; }
  const EnvModel& model() const { return *model_; }
  const Timeline& timeline() const { return timeline_; }
  const ChannelSimulator& channel() const { return channel_; }

 private:
  EnvConfig config_;
  Timeline timeline_;
  std::unique_ptr<FrameSource> frames_;
  ChannelSimulator channel_;
  std::optional<EnvModel> model_;
  StatePtr state_;
};

/// Σ_k γ^k r_k with k starting at 0. Throws unless γ ∈ (0,1).
double episode_return(std::span<const double> rewards, double gamma);

/// Indices {0, stride, 2·stride, ...} with stride = floor(n / count); all of [0,n) when count >= n.
std::vector<std::size_t> even_stride_indices(std::size_t n, std::size_t count);

}  // namespace dtmap
