#include "dtmap/mapgraph.hpp"

#include <algorithm>
#include <stdexcept>
#include <string>
#include <unordered_set>

namespace dtmap {

FramePtr make_frame(FrameId id, std::vector<PointId> points, std::int64_t slot_captured) {
  if (points.empty()) {
    throw std::invalid_argument("make_frame: frame " + std::to_string(id) + " has no points");
  }
  std::sort(points.begin(), points.end());
  points.erase(std::unique(points.begin(), points.end()), points.end());
  return std::make_shared<const Frame>(Frame{id, std::move(points), slot_captured});
}

std::size_t edge_weight(const Frame& a, const Frame& b) {
  std::size_t n = 0;
  auto i = a.points.begin();
  auto j = b.points.begin();
  while (i != a.points.end() && j != b.points.end()) {
    if (*i < *j) {
      ++i;
    } else if (*j < *i) {
      ++j;
    } else {
      ++n;
      ++i;
      ++j;
    }
  }
  return n;
}

MapGraph MapGraph::from_frames(std::vector<FramePtr> frames) {
  std::sort(frames.begin(), frames.end(),
            [](const FramePtr& x, const FramePtr& y) { return x->id < y->id; });
  for (std::size_t i = 1; i < frames.size(); ++i) {
    if (frames[i]->id == frames[i - 1]->id) {
      throw std::invalid_argument("MapGraph: duplicate frame id " + std::to_string(frames[i]->id));
    }
  }
  MapGraph g;
  const auto n = static_cast<Eigen::Index>(frames.size());
  g.weights_ = Eigen::MatrixXi::Zero(n, n);
  for (Eigen::Index i = 0; i < n; ++i) {
    for (Eigen::Index j = i + 1; j < n; ++j) {
      const auto w = static_cast<int>(edge_weight(*frames[static_cast<std::size_t>(i)],
                                                  *frames[static_cast<std::size_t>(j)]));
      g.weights_(i, j) = w;
      g.weights_(j, i) = w;
    }
  }
  g.frames_ = std::move(frames);
  return g;
}

std::vector<FrameId> MapGraph::ids() const {
  std::vector<FrameId> out;
  out.reserve(frames_.size());
  for (const auto& f : frames_) out.push_back(f->id);
  return out;
}

std::optional<std::size_t> MapGraph::index_of(FrameId id) const {
  auto it = std::lower_bound(frames_.begin(), frames_.end(), id,
                             [](const FramePtr& f, FrameId v) { return f->id < v; });
  if (it == frames_.end() || (*it)->id != id) return std::nullopt;
  return static_cast<std::size_t>(it - frames_.begin());
}

std::vector<Edge> MapGraph::edges() const {
  std::vector<Edge> out;
  const auto n = static_cast<Eigen::Index>(frames_.size());
  for (Eigen::Index i = 0; i < n; ++i)
    for (Eigen::Index j = i + 1; j < n; ++j)
      if (weights_(i, j) > 0)
        out.push_back({frames_[static_cast<std::size_t>(i)]->id, frames_[static_cast<std::size_t>(j)]->id,
                       static_cast<std::size_t>(weights_(i, j))});
  return out;
}

MapGraph insert_frame(const MapGraph& g, FramePtr f) {
  if (!f) throw std::invalid_argument("insert_frame: null frame");
  if (g.contains(f->id)) {
    throw std::invalid_argument("insert_frame: duplicate frame id " + std::to_string(f->id));
  }
  const auto n = static_cast<Eigen::Index>(g.size());
  const auto pos = static_cast<Eigen::Index>(
      std::lower_bound(g.frames_.begin(), g.frames_.end(), f->id,
                       [](const FramePtr& x, FrameId v) { return x->id < v; }) -
      g.frames_.begin());

  MapGraph out;
  out.frames_ = g.frames_;
  out.frames_.insert(out.frames_.begin() + pos, f);
  out.weights_ = Eigen::MatrixXi::Zero(n + 1, n + 1);
  auto old_index = [pos](Eigen::Index i) { return i < pos ? i : i - 1; };
  for (Eigen::Index i = 0; i <= n; ++i) {
    for (Eigen::Index j = i + 1; j <= n; ++j) {
      int w = 0;
      if (i == pos || j == pos) {
        const Eigen::Index other = i == pos ? j : i;
        w = static_cast<int>(edge_weight(*f, *out.frames_[static_cast<std::size_t>(other)]));
      } else {
        w = g.weights_(old_index(i), old_index(j));
      }
      out.weights_(i, j) = w;
      out.weights_(j, i) = w;
    }
  }
  return out;
}

MapGraph apply_delta(const MapGraph& g, const MapDelta& d) {
  std::unordered_set<FrameId> added_ids;
  for (const auto& f : d.added) {
    if (!f) throw std::invalid_argument("apply_delta: null frame");
    if (g.contains(f->id) || !added_ids.insert(f->id).second) {
      throw std::invalid_argument("apply_delta: frame " + std::to_string(f->id) + " added twice");
    }
  }
  std::unordered_set<FrameId> removed(d.removed.begin(), d.removed.end());
  for (FrameId id : removed) {
    if (!g.contains(id) && !added_ids.count(id)) {
      throw std::invalid_argument("apply_delta: cannot remove unknown frame " + std::to_string(id));
    }
  }

  // Keep surviving nodes' weights and only compute overlaps for new frames.
  std::vector<FramePtr> frames;
  std::vector<Eigen::Index> source;  // index into g, or -1 for added frames
  for (std::size_t i = 0; i < g.size(); ++i) {
    if (!removed.count(g.frame(i).id)) {
      frames.push_back(g.frames()[i]);
      source.push_back(static_cast<Eigen::Index>(i));
    }
  }
  for (const auto& f : d.added) {
    if (!removed.count(f->id)) {
      frames.push_back(f);
      source.push_back(-1);
    }
  }
  std::vector<std::size_t> order(frames.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  std::sort(order.begin(), order.end(),
            [&](std::size_t a, std::size_t b) { return frames[a]->id < frames[b]->id; });

  std::vector<FramePtr> sorted;
  std::vector<Eigen::Index> sorted_source;
  for (std::size_t i : order) {
    sorted.push_back(frames[i]);
    sorted_source.push_back(source[i]);
  }
  const auto n = static_cast<Eigen::Index>(sorted.size());
  Eigen::MatrixXi w = Eigen::MatrixXi::Zero(n, n);
  for (Eigen::Index i = 0; i < n; ++i) {
    for (Eigen::Index j = i + 1; j < n; ++j) {
      const Eigen::Index si = sorted_source[static_cast<std::size_t>(i)];
      const Eigen::Index sj = sorted_source[static_cast<std::size_t>(j)];
      const int v = (si >= 0 && sj >= 0)
                        ? g.weights()(si, sj)
                        : static_cast<int>(edge_weight(*sorted[static_cast<std::size_t>(i)],
                                                       *sorted[static_cast<std::size_t>(j)]));
      w(i, j) = v;
      w(j, i) = v;
    }
  }
  return MapGraph(std::move(sorted), std::move(w));
}

bool is_connected(const MapGraph& g) {
  if (g.empty()) throw std::invalid_argument("is_connected: empty graph");
  return is_connected_weights(g.weights());
}

}  // namespace dtmap
