#pragma once

#include <cstddef>
#include <cstdint>
#include <memory>
#include <optional>
#include <span>
#include <stdexcept>
#include <vector>

#include <Eigen/Core>

namespace dtmap {

using FrameId = std::uint64_t;
using PointId = std::uint64_t;

/// A camera frame: the feature points it observes and the slot it was
/// captured in. `points` is kept sorted and free of duplicates.
struct Frame {
  FrameId id = 0;
  std::vector<PointId> points;
  std::int64_t slot_captured = 0;
};

using FramePtr = std::shared_ptr<const Frame>;

struct MapDelta;

/// Builds a frame from an arbitrary point list (sorted and deduplicated here).
/// Throws std::invalid_argument when no points are given.
FramePtr make_frame(FrameId id, std::vector<PointId> points, std::int64_t slot_captured = 0);

/// Number of feature points the two frames observe in common.
std::size_t edge_weight(const Frame& a, const Frame& b);

struct Edge {
  FrameId a = 0;  // a < b
  FrameId b = 0;
  std::size_t weight = 0;

  friend bool operator==(const Edge&, const Edge&) = default;
};

/// Weighted undirected co-visibility graph over camera frames.
///
/// Nodes are kept sorted by frame id. Edge weights are derived from the
/// point sets (shared-point counts); pairs with no shared point carry no edge.
/// Values are immutable once built: every mutation returns a new graph.
class MapGraph {
 public:
  MapGraph() = default;

  /// Throws std::invalid_argument on duplicate frame ids.
  static MapGraph from_frames(std::vector<FramePtr> frames);

  std::size_t size() const { return frames_.size(); }
  bool empty() const { return frames_.empty(); }

  const std::vector<FramePtr>& frames() const { return frames_; }
  const Frame& frame(std::size_t i) const { return *frames_[i]; }
  std::vector<FrameId> ids() const;

  bool contains(FrameId id) const { return index_of(id).has_value(); }
  std::optional<std::size_t> index_of(FrameId id) const;

  /// Shared-point count between nodes i and j (0 when i == j).
  std::size_t weight(std::size_t i, std::size_t j) const {
    return static_cast<std::size_t>(weights_(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)));
  }
  /// Dense symmetric weight matrix in node order.
  const Eigen::MatrixXi& weights() const { return weights_; }

  std::vector<Edge> edges() const;

 private:
  MapGraph(std::vector<FramePtr> frames, Eigen::MatrixXi weights)
      : frames_(std::move(frames)), weights_(std::move(weights)) {}

  std::vector<FramePtr> frames_;
  Eigen::MatrixXi weights_;

  friend MapGraph insert_frame(const MapGraph& g, FramePtr f);
  friend MapGraph apply_delta(const MapGraph& g, const MapDelta& d);
};

/// Upload set (added) and eviction set (removed) of one map update.
struct MapDelta {
  std::vector<FramePtr> added;
  std::vector<FrameId> removed;
};

/// Returns g with f attached. Throws std::invalid_argument if f.id is present.
MapGraph insert_frame(const MapGraph& g, FramePtr f);

/// (nodes(g) ∪ added) \ removed. Throws std::invalid_argument when a removed id
/// is neither in g nor in `added`, or when an added id already exists in g.
MapGraph apply_delta(const MapGraph& g, const MapDelta& d);

/// True iff every node is reachable through positive-weight edges.
/// Throws std::invalid_argument on an empty graph.
bool is_connected(const MapGraph& g);

/// Connectivity of the graph described by a dense weight matrix.
template <class Derived>
bool is_connected_weights(const Eigen::MatrixBase<Derived>& w) {
  const Eigen::Index n = w.rows();
  if (n == 0) return false;
  std::vector<char> seen(static_cast<std::size_t>(n), 0);
  std::vector<Eigen::Index> stack{0};
  seen[0] = 1;
  Eigen::Index reached = 1;
  while (!stack.empty()) {
    const Eigen::Index u = stack.back();
    stack.pop_back();
    for (Eigen::Index v = 0; v < n; ++v) {
      if (!seen[static_cast<std::size_t>(v)] && w(u, v) > 0) {
        seen[static_cast<std::size_t>(v)] = 1;
        ++reached;
        stack.push_back(v);
      }
    }
  }
  return reached == n;
}

/// Weighted Laplacian of a dense symmetric weight matrix (diagonal ignored).
template <class Derived>
Eigen::Matrix<typename Derived::Scalar, Eigen::Dynamic, Eigen::Dynamic> laplacian(
    const Eigen::MatrixBase<Derived>& w) {
  using Scalar = typename Derived::Scalar;
  Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic> l = -w;
  l.diagonal().setZero();
  l.diagonal() = -l.rowwise().sum();
  return l;
}

/// Laplacian with row/column `removed` deleted.
template <class Derived>
Eigen::Matrix<typename Derived::Scalar, Eigen::Dynamic, Eigen::Dynamic> reduced_laplacian(
    const Eigen::MatrixBase<Derived>& w, Eigen::Index removed = 0) {
  const auto full = laplacian(w);
  const Eigen::Index n = full.rows();
  Eigen::Matrix<typename Derived::Scalar, Eigen::Dynamic, Eigen::Dynamic> out(n - 1, n - 1);
  for (Eigen::Index i = 0, r = 0; i < n; ++i) {
    if (i == removed) continue;
    for (Eigen::Index j = 0, c = 0; j < n; ++j) {
      if (j == removed) continue;
      out(r, c++) = full(i, j);
    }
    ++r;
  }
  return out;
}

/// Reduced Laplacian of the map with the smallest-id node deleted.
/// Throws std::invalid_argument when the graph has fewer than two nodes.
template <class Scalar = double>
Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic> reduced_laplacian(const MapGraph& g,
                                                                         std::size_t removed = 0) {
  if (g.size() < 2) throw std::invalid_argument("reduced_laplacian: need at least two nodes");
  if (removed >= g.size()) throw std::invalid_argument("reduced_laplacian: bad node index");
  return reduced_laplacian(g.weights().cast<Scalar>(), static_cast<Eigen::Index>(removed));
}

}  // namespace dtmap
