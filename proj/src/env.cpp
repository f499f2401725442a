#include "dtmap/env.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <unordered_set>

namespace dtmap {

void Timeline::validate() const {
  if (frames_per_slot == 0 || slots_per_interval == 0 || num_intervals == 0 || tau == 0)
    throw std::invalid_argument("Timeline: all fields must be positive");
  if (tau >= slots_per_interval) throw std::invalid_argument("Timeline: tau must be smaller than K");
}

void EnvConfig::validate() const {
  if (!(alpha > 0.0)) throw std::invalid_argument("EnvConfig: alpha must be positive");
  if (!(d_req > 0.0)) throw std::invalid_argument("EnvConfig: d_req must be positive");
  if (v_max < 1) throw std::invalid_argument("EnvConfig: v_max must be >= 1");
  if (!(gamma > 0.0 && gamma < 1.0)) throw std::invalid_argument("EnvConfig: gamma must be in (0,1)");
  if (penalty && !(*penalty > 0.0)) throw std::invalid_argument("EnvConfig: penalty must be positive");
  if (!(penalty_scale > 0.0)) throw std::invalid_argument("EnvConfig: penalty_scale must be positive");
}

void Action::normalize() {
  std::sort(upload.begin(), upload.end());
  std::sort(evict.begin(), evict.end());
}

SlotPlan plan_slot(const EnvState& s, const EnvConfig& c) {
  SlotPlan p;
  p.budget = upload_budget(s.rate, c.alpha, c.d_req);
  p.upload = std::min(p.budget, s.recent_frames.size());
  p.evict = fill_to_cap_evictions(s.map.size(), p.upload, c.v_max);
  return p;
}

ActionCheck validate_action(const EnvState& s, const Action& a, const EnvConfig& c) {
  auto fail = [](Violation v, std::string d) { return ActionCheck{v, std::move(d)}; };

  std::unordered_set<FrameId> up(a.upload.begin(), a.upload.end());
  std::unordered_set<FrameId> ev(a.evict.begin(), a.evict.end());
  if (up.size() != a.upload.size() || ev.size() != a.evict.size())
    return fail(Violation::Duplicate, "action lists a frame twice");

  if (c.alpha * static_cast<double>(a.upload.size()) > s.rate * c.d_req + 1e-9)
    return fail(Violation::Budget, "upload of " + std::to_string(a.upload.size()) + " frames exceeds budget " +
                                       std::to_string(upload_budget(s.rate, c.alpha, c.d_req)));

  std::unordered_set<FrameId> captured;
  for (const auto& f : s.recent_frames) captured.insert(f->id);
  for (FrameId id : a.upload) {
    if (!captured.count(id)) return fail(Violation::UploadNotCaptured, "frame " + std::to_string(id) + " not captured this slot");
    if (s.map.contains(id)) return fail(Violation::UploadNotCaptured, "frame " + std::to_string(id) + " already in map");
  }
  for (FrameId id : a.evict) {
    if (!s.map.contains(id) && !up.count(id))
      return fail(Violation::EvictUnknown, "frame " + std::to_string(id) + " is neither stored nor uploaded");
  }
  const std::size_t after = s.map.size() + a.upload.size() - a.evict.size();
  if (after > c.v_max)
    return fail(Violation::MapCap, "map would hold " + std::to_string(after) + " > " + std::to_string(c.v_max));
  return {};
}

EnvModel::EnvModel(EnvConfig config, RatePalette palette, double penalty)
    : config_(std::move(config)), palette_(std::move(palette)), penalty_(penalty) {
  config_.validate();
  if (!(penalty_ > 0.0)) throw std::invalid_argument("EnvModel: penalty must be positive");
}

MapGraph EnvModel::apply(const EnvState& s, const Action& a) const {
  const ActionCheck chk = check(s, a);
  if (!chk.ok()) throw std::invalid_argument("infeasible action: " + chk.detail);
  MapDelta d;
  for (FrameId id : a.upload) {
    auto it = std::find_if(s.recent_frames.begin(), s.recent_frames.end(),
                           [id](const FramePtr& f) { return f->id == id; });
    d.added.push_back(*it);
  }
  d.removed = a.evict;
  return apply_delta(s.map, d);
}

double EnvModel::clamped_upsilon(const MapGraph& map, std::span<const FramePtr> next_frames) const {
  const Uncertainty u = avg_uncertainty(map, next_frames, config_.pi);
  return u.finite() ? std::min(u.value, penalty_) : penalty_;
}

Experience EnvModel::transition(const StatePtr& s, const Action& a, std::vector<FramePtr> next_frames,
                                std::size_t next_channel_state, std::size_t next_interval) const {
  auto next = std::make_shared<EnvState>();
  next->map = apply(*s, a);
  next->recent_frames = std::move(next_frames);
  next->history = s->history;
  next->history.push(next_channel_state);
  next->rate = palette_.rate(next_channel_state);
  next->slot = s->slot + 1;
  next->interval = next_interval;

  Experience xi;
  xi.state = s;
  xi.action = a;
  xi.action.normalize();
  xi.upsilon = clamped_upsilon(next->map, next->recent_frames);
  xi.reward = -xi.upsilon;
  xi.next = std::move(next);
  return xi;
}

Environment::Environment(EnvConfig config, Timeline timeline, std::unique_ptr<FrameSource> frames,
                         ChannelSimulator channel)
    : config_(std::move(config)), timeline_(timeline), frames_(std::move(frames)), channel_(std::move(channel)) {
  config_.validate();
  timeline_.validate();
  if (!frames_) throw std::invalid_argument("Environment: no frame source");
}

StatePtr Environment::reset() {
  const std::size_t F = timeline_.frames_per_slot;
  channel_.begin_interval();
  const std::size_t boot_state = channel_.initialize();
  auto boot = frames_->next_slot_frames(F, -1);
  if (boot.empty()) throw std::runtime_error("Environment::reset: frame source produced no frames");

  const std::size_t budget = upload_budget(channel_.rate(), config_.alpha, config_.d_req);
  const std::size_t count = std::max<std::size_t>(1, std::min({budget, config_.v_max, boot.size()}));
  std::vector<FramePtr> chosen;
  for (std::size_t i : even_stride_indices(boot.size(), count)) chosen.push_back(boot[i]);

  auto s = std::make_shared<EnvState>();
  s->map = MapGraph::from_frames(std::move(chosen));
  s->history = RateHistory(timeline_.tau, boot_state);
  s->history.push(channel_.step());
  s->rate = channel_.rate();
  s->recent_frames = frames_->next_slot_frames(F, 0);
  s->slot = 0;
  s->interval = 0;

  double penalty = 0.0;
  if (config_.penalty) {
    penalty = *config_.penalty;
  } else {
    double worst = 1.0;
    const Uncertainty own = uncertainty(s->map, config_.pi);
    if (own.finite()) worst = std::max(worst, std::abs(own.value));
    for (const auto& f : s->recent_frames) {
      const FramePtr one[] = {f};
      const Uncertainty u = avg_uncertainty(s->map, one, config_.pi);
      if (u.finite()) worst = std::max(worst, std::abs(u.value));
    }
    penalty = config_.penalty_scale * worst;
  }
  model_.emplace(config_, channel_.palette(), penalty);
  state_ = std::move(s);
  return state_;
}

StepResult Environment::step(const Action& a) {
  if (done()) throw std::invalid_argument("Environment::step: episode finished or not reset");
  const ActionCheck chk = model_->check(*state_, a);
  if (!chk.ok()) throw std::invalid_argument("Environment::step: " + chk.detail);

  const std::size_t next_slot = state_->slot + 1;
  if (next_slot % timeline_.slots_per_interval == 0) channel_.begin_interval();
  const std::size_t next_channel = channel_.step();
  auto next_frames = frames_->next_slot_frames(timeline_.frames_per_slot, static_cast<std::int64_t>(next_slot));

  StepResult r;
  r.experience = model_->transition(state_, a, std::move(next_frames), next_channel, next_slot / timeline_.slots_per_interval);
  r.next = r.experience.next;
  r.reward = r.experience.reward;
  r.upsilon = r.experience.upsilon;
  state_ = r.next;
  return r;
}

double episode_return(std::span<const double> rewards, double gamma) {
  if (!(gamma > 0.0 && gamma < 1.0)) throw std::invalid_argument("episode_return: gamma must be in (0,1)");
  double total = 0.0;
  double discount = 1.0;
  for (double r : rewards) {
    total += discount * r;
    discount *= gamma;
  }
  return total;
}

std::vector<std::size_t> even_stride_indices(std::size_t n, std::size_t count) {
  std::vector<std::size_t> out;
  if (count == 0 || n == 0) return out;
  if (count >= n) {
    for (std::size_t i = 0; i < n; ++i) out.push_back(i);
    return out;
  }
  const std::size_t stride = n / count;
  for (std::size_t i = 0; i < count; ++i) out.push_back(i * stride);
  return out;
}

}  // namespace dtmap
