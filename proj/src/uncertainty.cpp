#include "dtmap/uncertainty.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>
#include <string>

namespace dtmap {

PoseInfoMatrix::PoseInfoMatrix(const Matrix6& m) : pi_(m) {
  if ((m - m.transpose()).cwiseAbs().maxCoeff() > 1e-12) {
    throw std::invalid_argument("PoseInfoMatrix: matrix is not symmetric");
  }
  const auto ld = spd_log_det(m);
  if (!ld) throw std::invalid_argument("PoseInfoMatrix: matrix is not positive definite");
  if (*ld < -1e-12) throw std::invalid_argument("PoseInfoMatrix: det must be >= 1");
  log_det_ = std::max(*ld, 0.0);
}

namespace {

// u for a connected graph given the reduced Laplacian of its |V| nodes.
Uncertainty from_reduced(const Eigen::MatrixXd& reduced, std::size_t nodes, const PoseInfoMatrix& pi) {
  const auto ld = spd_log_det(reduced);
  if (!ld) return Uncertainty::infinite();
  return {-(6.0 * *ld + static_cast<double>(nodes - 1) * pi.log_det())};
}

}  // namespace

Uncertainty uncertainty_from_weights(const Eigen::Ref<const Eigen::MatrixXd>& w, const PoseInfoMatrix& pi) {
  if (w.rows() < 2) return Uncertainty::infinite();
  if (!is_connected_weights(w)) return Uncertainty::infinite();
  return from_reduced(reduced_laplacian(w, 0), static_cast<std::size_t>(w.rows()), pi);
}

Uncertainty uncertainty(const MapGraph& g, const PoseInfoMatrix& pi) {
  return uncertainty_from_weights(g.weights().cast<double>(), pi);
}

double spanning_tree_weight(const MapGraph& g) {
  const std::size_t n = g.size();
  if (n > 9) throw std::invalid_argument("spanning_tree_weight: graph too large for enumeration");
  if (n <= 1) return n == 1 ? 1.0 : 0.0;

  struct E {
    std::size_t a, b;
    long double w;
  };
  std::vector<E> edges;
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = i + 1; j < n; ++j)
      if (g.weight(i, j) > 0) edges.push_back({i, j, static_cast<long double>(g.weight(i, j))});

  long double total = 0.0L;
  std::vector<std::size_t> parent(n);
  std::iota(parent.begin(), parent.end(), std::size_t{0});

  // Depth-first over edge subsets; a subset is pruned as soon as it closes a cycle.
  auto find = [](std::vector<std::size_t>& p, std::size_t x) {
    while (p[x] != x) x = p[x];
    return x;
  };
  auto recurse = [&](auto&& self, std::size_t next, std::size_t chosen, long double product,
                     std::vector<std::size_t> forest) -> void {
    if (chosen == n - 1) {
      total += product;
      return;
    }
    if (edges.size() - next < n - 1 - chosen) return;
    for (std::size_t e = next; e < edges.size(); ++e) {
      const std::size_t ra = find(forest, edges[e].a);
      const std::size_t rb = find(forest, edges[e].b);
      if (ra == rb) continue;
      auto merged = forest;
      merged[ra] = rb;
      self(self, e + 1, chosen + 1, product * edges[e].w, std::move(merged));
    }
  };
  recurse(recurse, 0, 0, 1.0L, parent);
  return static_cast<double>(total);
}

Uncertainty avg_uncertainty(const MapGraph& g, std::span<const FramePtr> next_frames, const PoseInfoMatrix& pi) {
  if (next_frames.empty()) throw std::invalid_argument("avg_uncertainty: no next frames");
  std::vector<FramePtr> pool = g.frames();
  const std::size_t map_size = pool.size();
  pool.insert(pool.end(), next_frames.begin(), next_frames.end());
  // Frames are identified by pool position here, so repeated next frames are fine.
  OverlapTable table(std::move(pool));
  std::vector<std::size_t> nodes(map_size);
  std::iota(nodes.begin(), nodes.end(), std::size_t{0});
  double sum = 0.0;
  for (std::size_t p = map_size; p < table.size(); ++p) {
    const Uncertainty u = table.probe_uncertainty(nodes, p, pi);
    if (!u.finite()) return Uncertainty::infinite();
    sum += u.value;
  }
  return {sum / static_cast<double>(next_frames.size())};
}

std::size_t upload_budget(double rate, double alpha, double d_req) {
  if (!(alpha > 0.0)) throw std::invalid_argument("upload_budget: alpha must be positive");
  if (!(d_req > 0.0)) throw std::invalid_argument("upload_budget: d_req must be positive");
  if (!(rate >= 0.0)) throw std::invalid_argument("upload_budget: rate must be non-negative");
  // The tolerance keeps exact products such as 0.5·80/5 from flooring to 7.
  return static_cast<std::size_t>(std::floor(d_req * rate / alpha + 1e-9));
}

Cardinalities optimal_cardinalities(double rate, double alpha, double d_req, std::size_t v_max) {
  if (v_max < 1) throw std::invalid_argument("optimal_cardinalities: v_max must be >= 1");
  if (!(rate > 0.0)) throw std::invalid_argument("optimal_cardinalities: rate must be positive");
  const std::size_t up = upload_budget(rate, alpha, d_req);
  return {up, v_max > up ? v_max - up : 0};
}

OverlapTable::OverlapTable(std::vector<FramePtr> frames) : frames_(std::move(frames)) {
  const auto n = static_cast<Eigen::Index>(frames_.size());
  overlaps_.resize(n, n);
  for (Eigen::Index i = 0; i < n; ++i) {
    const Frame& fi = *frames_[static_cast<std::size_t>(i)];
    overlaps_(i, i) = static_cast<double>(fi.points.size());
    for (Eigen::Index j = i + 1; j < n; ++j) {
      const double w = static_cast<double>(edge_weight(fi, *frames_[static_cast<std::size_t>(j)]));
      overlaps_(i, j) = w;
      overlaps_(j, i) = w;
    }
  }
}

std::optional<std::size_t> OverlapTable::index_of(FrameId id) const {
  for (std::size_t i = 0; i < frames_.size(); ++i)
    if (frames_[i]->id == id) return i;
  return std::nullopt;
}

Uncertainty OverlapTable::uncertainty(std::span<const std::size_t> nodes, const PoseInfoMatrix& pi) const {
  const auto n = static_cast<Eigen::Index>(nodes.size());
  Eigen::MatrixXd w(n, n);
  for (Eigen::Index i = 0; i < n; ++i)
    for (Eigen::Index j = 0; j < n; ++j)
      w(i, j) = i == j ? 0.0 : overlap(nodes[static_cast<std::size_t>(i)], nodes[static_cast<std::size_t>(j)]);
  return uncertainty_from_weights(w, pi);
}

Uncertainty OverlapTable::probe_uncertainty(std::span<const std::size_t> nodes, std::size_t probe,
                                            const PoseInfoMatrix& pi) const {
  const auto n = static_cast<Eigen::Index>(nodes.size());
  if (n == 0) return Uncertainty::infinite();
  // Augmented weight matrix with the probe as the last node.
  Eigen::MatrixXd w(n + 1, n + 1);
  for (Eigen::Index i = 0; i < n; ++i) {
    const std::size_t a = nodes[static_cast<std::size_t>(i)];
    for (Eigen::Index j = 0; j < n; ++j)
      w(i, j) = i == j ? 0.0 : overlap(a, nodes[static_cast<std::size_t>(j)]);
    w(i, n) = overlap(a, probe);  // self-overlap when the probe duplicates a node
    w(n, i) = w(i, n);
  }
  w(n, n) = 0.0;
  if (!is_connected_weights(w)) return Uncertainty::infinite();
  // Deleting the probe's row/column: L(nodes) + diag(probe overlaps).
  Eigen::MatrixXd reduced = laplacian(w).topLeftCorner(n, n);
  return from_reduced(reduced, static_cast<std::size_t>(n + 1), pi);
}

SlotScore OverlapTable::score(std::span<const std::size_t> nodes, std::span<const std::size_t> probes,
                              const PoseInfoMatrix& pi) const {
  SlotScore s;
  s.probes = probes.size();
  double sum = 0.0;
  std::size_t finite = 0;
  for (std::size_t p : probes) {
    const Uncertainty u = probe_uncertainty(nodes, p, pi);
    if (u.finite()) {
      sum += u.value;
      ++finite;
    } else {
      ++s.disconnected;
    }
  }
  s.mean_finite = finite > 0 ? sum / static_cast<double>(finite) : 0.0;
  return s;
}

}  // namespace dtmap
