#pragma once

#include <cstddef>
#include <limits>
#include <optional>
#include <span>
#include <vector>

#include <Eigen/Cholesky>
#include <Eigen/Core>

#include "dtmap/mapgraph.hpp"

namespace dtmap {

/// Camera information matrix: 6x6 symmetric positive definite with det >= 1.
class PoseInfoMatrix {
 public:
  using Matrix6 = Eigen::Matrix<double, 6, 6>;

  PoseInfoMatrix() : pi_(Matrix6::Identity()) {}
  /// Throws std::invalid_argument unless m is symmetric (1e-12), SPD and det(m) >= 1.
  explicit PoseInfoMatrix(const Matrix6& m);

  static PoseInfoMatrix identity() { return PoseInfoMatrix(); }

  const Matrix6& matrix() const { return pi_; }
  double log_det() const { return log_det_; }

 private:
  Matrix6 pi_;
  double log_det_ = 0.0;
};

/// Pose estimation uncertainty; +infinity marks a disconnected (or too small) map.
struct Uncertainty {
  double value = std::numeric_limits<double>::infinity();

  bool finite() const { return value < std::numeric_limits<double>::infinity(); }
  static Uncertainty infinite() { return {}; }

  friend bool operator==(const Uncertainty&, const Uncertainty&) = default;
};

/// log det of a symmetric positive definite matrix through an LLT factorization.
/// Empty optional when the factorization fails.
template <class Derived>
std::optional<typename Derived::Scalar> spd_log_det(const Eigen::MatrixBase<Derived>& m) {
  using Scalar = typename Derived::Scalar;
  if (m.rows() == 0) return Scalar(0);
  Eigen::LLT<Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic>> llt(m.eval());
  if (llt.info() != Eigen::Success) return std::nullopt;
  const auto d = llt.matrixLLT().diagonal();
  if ((d.array() <= Scalar(0)).any()) return std::nullopt;
  return Scalar(2) * d.array().log().sum();
}

/// −[6·logdet(L̂) + (|V|−1)·logdet(Π)], i.e. −log det(L̂ ⊗ Π) in factored form.
Uncertainty uncertainty(const MapGraph& g, const PoseInfoMatrix& pi = {});

/// Same metric for a graph given by its dense weight matrix.
Uncertainty uncertainty_from_weights(const Eigen::Ref<const Eigen::MatrixXd>& w,
                                     const PoseInfoMatrix& pi = {});

/// Weighted spanning-tree sum Σ_T Π_{e∈T} w_e by exhaustive enumeration.
/// Test oracle for the matrix-tree identity; throws std::invalid_argument above 9 nodes.
double spanning_tree_weight(const MapGraph& g);

/// Mean over f ∈ next_frames of uncertainty(g ∪ {f}); +infinity if any term is.
/// Throws std::invalid_argument when next_frames is empty.
Uncertainty avg_uncertainty(const MapGraph& g, std::span<const FramePtr> next_frames,
                            const PoseInfoMatrix& pi = {});

struct Cardinalities {
  std::size_t upload = 0;
  std::size_t evict = 0;
};

/// floor(d_req · rate / alpha). Throws on non-positive alpha or d_req, or negative rate.
std::size_t upload_budget(double rate, double alpha, double d_req);

/// Upload count from the rate budget and the closed-form eviction count v_max − upload
/// (floored at zero). See fill_to_cap_evictions for the count applied to a live map.
Cardinalities optimal_cardinalities(double rate, double alpha, double d_req, std::size_t v_max);

/// Evictions needed so that map_size + upload − evict == v_max once the cap binds;
/// zero while the map is still growing.
inline std::size_t fill_to_cap_evictions(std::size_t map_size, std::size_t upload, std::size_t v_max) {
  return map_size + upload > v_max ? map_size + upload - v_max : 0;
}

/// Lexicographic slot objective: number of disconnected probe graphs first, then the mean
/// of the finite terms. Equals the plain average whenever every term is finite.
struct SlotScore {
  std::size_t disconnected = 0;
  double mean_finite = 0.0;
  std::size_t probes = 0;

  Uncertainty average() const {
    if (disconnected > 0 || probes == 0) return Uncertainty::infinite();
    return {mean_finite};
  }
  friend bool operator<(const SlotScore& a, const SlotScore& b) {
    if (a.disconnected != b.disconnected) return a.disconnected < b.disconnected;
    return a.mean_finite < b.mean_finite;
  }
};

/// Pairwise overlap table over a fixed pool of frames, used to evaluate many
/// candidate maps drawn from the same pool without recomputing intersections.
class OverlapTable {
 public:
  explicit OverlapTable(std::vector<FramePtr> frames);

  std::size_t size() const { return frames_.size(); }
  const FramePtr& frame(std::size_t i) const { return frames_[i]; }
  std::optional<std::size_t> index_of(FrameId id) const;
  double overlap(std::size_t i, std::size_t j) const {
    return overlaps_(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j));
  }

  /// Uncertainty of the graph induced by `nodes` (pool indices).
  Uncertainty uncertainty(std::span<const std::size_t> nodes, const PoseInfoMatrix& pi) const;

  /// Uncertainty of nodes ∪ {probe}. A probe already in `nodes` is attached as a
  /// fresh copy (overlap with its original = its own point count).
  Uncertainty probe_uncertainty(std::span<const std::size_t> nodes, std::size_t probe,
                                const PoseInfoMatrix& pi) const;

  SlotScore score(std::span<const std::size_t> nodes, std::span<const std::size_t> probes,
                  const PoseInfoMatrix& pi) const;

 private:
  std::vector<FramePtr> frames_;
  Eigen::MatrixXd overlaps_;  // diagonal holds each frame's point count
};

}  // namespace dtmap
