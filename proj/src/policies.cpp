#include "dtmap/policies.hpp"

#include <algorithm>
#include <numeric>
#include <stdexcept>
#include <unordered_map>
#include <unordered_set>

namespace dtmap {

namespace {

bool older(const FramePtr& a, const FramePtr& b) {
  if (a->slot_captured != b->slot_captured) return a->slot_captured < b->slot_captured;
  return a->id < b->id;
}

std::vector<FrameId> oldest(const EnvState& s, const std::vector<FramePtr>& uploaded, std::size_t count) {
  std::vector<FramePtr> pool = s.map.frames();
  pool.insert(pool.end(), uploaded.begin(), uploaded.end());
  std::sort(pool.begin(), pool.end(), older);
  std::vector<FrameId> out;
  for (std::size_t i = 0; i < count && i < pool.size(); ++i) out.push_back(pool[i]->id);
  return out;
}

Action finish(const EnvState& s, std::vector<FramePtr> uploaded, std::size_t evict) {
  Action a;
  for (const auto& f : uploaded) a.upload.push_back(f->id);
  a.evict = oldest(s, uploaded, evict);
  a.normalize();
  return a;
}

// Frames captured this slot that are not already stored, in id order.
std::vector<FramePtr> candidates(const EnvState& s) {
  std::vector<FramePtr> out;
  for (const auto& f : s.recent_frames)
    if (!s.map.contains(f->id)) out.push_back(f);
  std::sort(out.begin(), out.end(), [](const FramePtr& a, const FramePtr& b) { return a->id < b->id; });
  return out;
}

// Pool = map ∪ candidates ∪ reference (deduplicated by id), with index lists into it.
struct Pool {
  OverlapTable table;
  std::vector<std::size_t> map_nodes;
  std::vector<std::size_t> cand_nodes;
  std::vector<std::size_t> probes;
};

Pool build_pool(const EnvState& s, const std::vector<FramePtr>& cands, std::span<const FramePtr> reference) {
  std::vector<FramePtr> frames;
  std::unordered_map<FrameId, std::size_t> where;
  auto add = [&](const FramePtr& f) {
    auto [it, fresh] = where.emplace(f->id, frames.size());
    if (fresh) frames.push_back(f);
    return it->second;
  };
  std::vector<std::size_t> m, c, p;
  for (const auto& f : s.map.frames()) m.push_back(add(f));
  for (const auto& f : cands) c.push_back(add(f));
  for (const auto& f : reference) p.push_back(add(f));
  return Pool{OverlapTable(std::move(frames)), std::move(m), std::move(c), std::move(p)};
}

// Visits every k-subset of [0,n) in lexicographic order.
template <class Fn>
void for_each_combination(std::size_t n, std::size_t k, Fn&& fn) {
  if (k > n) return;
  std::vector<std::size_t> idx(k);
  std::iota(idx.begin(), idx.end(), 0);
  while (true) {
    fn(static_cast<const std::vector<std::size_t>&>(idx));
    std::size_t i = k;
    while (i > 0 && idx[i - 1] == n - k + i - 1) --i;
    if (i == 0) return;
    ++idx[i - 1];
    for (std::size_t j = i; j < k; ++j) idx[j] = idx[j - 1] + 1;
  }
}

}  // namespace

Action lff(const EnvState& s, const SlotPlan& plan) {
  auto cands = candidates(s);
  std::sort(cands.begin(), cands.end(), older);
  const std::size_t n = std::min(plan.upload, cands.size());
  std::vector<FramePtr> up(cands.end() - static_cast<std::ptrdiff_t>(n), cands.end());
  return finish(s, std::move(up), plan.evict);
}

Action pu(const EnvState& s, const SlotPlan& plan) {
  const auto cands = candidates(s);
  std::vector<FramePtr> up;
  for (std::size_t i : even_stride_indices(cands.size(), plan.upload)) up.push_back(cands[i]);
  return finish(s, std::move(up), plan.evict);
}

Action adapt_greedy(const EnvState& s, const SlotPlan& plan, const PoseInfoMatrix& pi,
                    std::span<const FramePtr> reference) {
  const auto cands = candidates(s);
  if (reference.empty()) return finish(s, {}, plan.evict);  // nothing to score against
  Pool pool = build_pool(s, cands, reference);

  std::vector<std::size_t> nodes = pool.map_nodes;
  std::vector<bool> taken(pool.cand_nodes.size(), false);
  const std::size_t uploads = std::min(plan.upload, cands.size());
  for (std::size_t step = 0; step < uploads; ++step) {
    std::optional<std::size_t> best;
    SlotScore best_score;
    nodes.push_back(0);
    for (std::size_t c = 0; c < pool.cand_nodes.size(); ++c) {
      if (taken[c]) continue;
      nodes.back() = pool.cand_nodes[c];
      const SlotScore sc = pool.table.score(nodes, pool.probes, pi);
      if (!best || sc < best_score) {
        best = c;
        best_score = sc;
      }
    }
    taken[*best] = true;
    nodes.back() = pool.cand_nodes[*best];
  }

  for (std::size_t step = 0; step < plan.evict && !nodes.empty(); ++step) {
    // Lower id wins ties: scan in id order.
    std::vector<std::size_t> order(nodes.size());
    std::iota(order.begin(), order.end(), 0);
    std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
      return pool.table.frame(nodes[a])->id < pool.table.frame(nodes[b])->id;
    });
    std::optional<std::size_t> best;
    SlotScore best_score;
    std::vector<std::size_t> rest;
    for (std::size_t pos : order) {
      rest.clear();
      for (std::size_t i = 0; i < nodes.size(); ++i)
        if (i != pos) rest.push_back(nodes[i]);
      const SlotScore sc = pool.table.score(rest, pool.probes, pi);
      if (!best || sc < best_score) {
        best = pos;
        best_score = sc;
      }
    }
    nodes.erase(nodes.begin() + static_cast<std::ptrdiff_t>(*best));
  }

  Action a;
  std::unordered_set<std::size_t> kept(nodes.begin(), nodes.end());
  for (std::size_t c = 0; c < pool.cand_nodes.size(); ++c)
    if (taken[c]) a.upload.push_back(pool.table.frame(pool.cand_nodes[c])->id);
  for (std::size_t i : pool.map_nodes)
    if (!kept.count(i)) a.evict.push_back(pool.table.frame(i)->id);
  for (std::size_t c = 0; c < pool.cand_nodes.size(); ++c)
    if (taken[c] && !kept.count(pool.cand_nodes[c])) a.evict.push_back(pool.table.frame(pool.cand_nodes[c])->id);
  a.normalize();
  return a;
}

Action adapt_greedy(const EnvState& s, const SlotPlan& plan, const PoseInfoMatrix& pi) {
  return adapt_greedy(s, plan, pi, s.recent_frames);
}

SlotScore action_score(const EnvState& s, const Action& a, std::span<const FramePtr> reference,
                       const PoseInfoMatrix& pi) {
  const auto cands = candidates(s);
  Pool pool = build_pool(s, cands, reference);
  std::unordered_set<FrameId> gone(a.evict.begin(), a.evict.end());
  std::vector<std::size_t> nodes;
  for (std::size_t i : pool.map_nodes)
    if (!gone.count(pool.table.frame(i)->id)) nodes.push_back(i);
  for (FrameId id : a.upload) {
    const auto idx = pool.table.index_of(id);
    if (!idx) throw std::invalid_argument("action_score: uploaded frame not captured this slot");
    if (!gone.count(id)) nodes.push_back(*idx);
  }
  return pool.table.score(nodes, pool.probes, pi);
}

OracleResult brute_force_slot_optimal(const EnvState& s, const SlotPlan& plan, std::span<const FramePtr> next_frames,
                                      const PoseInfoMatrix& pi) {
  if (s.recent_frames.size() > 8) throw std::invalid_argument("brute_force_slot_optimal: more than 8 candidate frames");
  if (s.map.size() > 6) throw std::invalid_argument("brute_force_slot_optimal: map larger than 6 frames");
  if (next_frames.empty()) throw std::invalid_argument("brute_force_slot_optimal: no next frames");

  const auto cands = candidates(s);
  Pool pool = build_pool(s, cands, next_frames);
  const std::size_t uploads = std::min(plan.upload, cands.size());

  OracleResult best;
  bool have = false;
  std::vector<std::size_t> nodes;
  for_each_combination(cands.size(), uploads, [&](const std::vector<std::size_t>& up) {
    // Eviction pool V ∪ U in id order so that combinations come out lexicographically.
    std::vector<std::size_t> members = pool.map_nodes;
    for (std::size_t c : up) members.push_back(pool.cand_nodes[c]);
    std::sort(members.begin(), members.end(),
              [&](std::size_t a, std::size_t b) { return pool.table.frame(a)->id < pool.table.frame(b)->id; });
    const std::size_t evict = std::min(plan.evict, members.size());
    for_each_combination(members.size(), evict, [&](const std::vector<std::size_t>& ev) {
      nodes.clear();
      std::size_t e = 0;
      for (std::size_t i = 0; i < members.size(); ++i) {
        if (e < ev.size() && ev[e] == i) {
          ++e;
          continue;
        }
        nodes.push_back(members[i]);
      }
      const SlotScore sc = pool.table.score(nodes, pool.probes, pi);
      ++best.evaluated;
      if (!have || sc < best.score) {
        have = true;
        best.score = sc;
        best.action.upload.clear();
        best.action.evict.clear();
        for (std::size_t c : up) best.action.upload.push_back(cands[c]->id);
        for (std::size_t i : ev) best.action.evict.push_back(pool.table.frame(members[i])->id);
      }
    });
  });
  best.action.normalize();
  return best;
}

Action random_action(const EnvState& s, const SlotPlan& plan, Rng& rng) {
  const auto cands = candidates(s);
  const std::size_t uploads = std::min(plan.upload, cands.size());
  std::vector<FramePtr> up;
  for (std::size_t i : rng.sample_without_replacement(cands.size(), uploads)) up.push_back(cands[i]);
  std::vector<FramePtr> members = s.map.frames();
  members.insert(members.end(), up.begin(), up.end());
  Action a;
  for (const auto& f : up) a.upload.push_back(f->id);
  for (std::size_t i : rng.sample_without_replacement(members.size(), std::min(plan.evict, members.size())))
    a.evict.push_back(members[i]->id);
  a.normalize();
  return a;
}

namespace {

class LffController final : public Controller {
 public:
  std::string name() const override { return "lff"; }
  Action decide(const StatePtr& s, const SlotPlan& plan) override { return lff(*s, plan); }
};

class PuController final : public Controller {
 public:
  std::string name() const override { return "pu"; }
  Action decide(const StatePtr& s, const SlotPlan& plan) override { return pu(*s, plan); }
};

class AdaptController final : public Controller {
 public:
  explicit AdaptController(PoseInfoMatrix pi) : pi_(pi) {}
  std::string name() const override { return "adapt"; }
  Action decide(const StatePtr& s, const SlotPlan& plan) override { return adapt_greedy(*s, plan, pi_); }

 private:
  PoseInfoMatrix pi_;
};

}  // namespace

std::vector<SlotRecord> run_episode(Environment& env, Controller& controller, const RecordSink& sink) {
  if (!env.state()) env.reset();
  std::vector<SlotRecord> out;
  const double gamma = env.model().config().gamma;
  double cum = 0.0;
  double discount = 1.0;
  while (!env.done()) {
    const StatePtr s = env.state();
    const SlotPlan plan = env.model().plan(*s);
    const Action a = controller.decide(s, plan);
    const StepResult r = env.step(a);
    controller.observe(r.experience);
    cum += discount * r.reward;
    discount *= gamma;
    SlotRecord rec;
    rec.interval = s->interval;
    rec.slot = s->slot;
    rec.rate = s->rate;
    rec.budget = plan.budget;
    rec.uploaded = a.upload.size();
    rec.evicted = a.evict.size();
    rec.map_size = r.next->map.size();
    rec.upsilon = r.upsilon;
    rec.reward = r.reward;
    rec.cum_return = cum;
    if (sink) sink(rec);
    out.push_back(rec);
  }
  return out;
}

std::unique_ptr<Controller> make_baseline(std::string_view name, const PoseInfoMatrix& pi) {
  if (name == "lff") return std::make_unique<LffController>();
  if (name == "pu") return std::make_unique<PuController>();
  if (name == "adapt") return std::make_unique<AdaptController>(pi);
  throw std::invalid_argument("unknown scheme '" + std::string(name) + "'");
}

}  // namespace dtmap
