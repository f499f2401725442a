#pragma once

#include <cmath>
#include <cstddef>
#include <iosfwd>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include <Eigen/Core>

#include "dtmap/rng.hpp"

// Small reverse-mode network kit. Every layer caches what its backward pass
// needs during forward(); backward() consumes that cache, so calling it twice
// (or without a forward) throws std::logic_error. Samples are rows.
namespace dtmap::nn {

using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;
using RowVector = Eigen::RowVectorXd;

struct Parameter {
  Matrix value;
  Matrix grad;
  Matrix adam_m;
  Matrix adam_v;

  explicit Parameter(Matrix init)
      : value(std::move(init)),
        grad(Matrix::Zero(value.rows(), value.cols())),
        adam_m(Matrix::Zero(value.rows(), value.cols())),
        adam_v(Matrix::Zero(value.rows(), value.cols())) {}
};

using ParameterList = std::vector<Parameter*>;

void zero_grad(const ParameterList& params);
double grad_norm(const ParameterList& params);
/// target ← (1−rate)·target + rate·source.
void soft_update(const ParameterList& target, const ParameterList& source, double rate);
void copy_values(const ParameterList& target, const ParameterList& source);

enum class Activation { Identity, Relu, Tanh, Sigmoid };

Matrix activate(Activation a, const Matrix& pre);
/// dL/dpre given the cached pre/post activation and dL/dpost.
Matrix activation_backward(Activation a, const Matrix& pre, const Matrix& post, const Matrix& grad_out);

Matrix softmax_rows(const Matrix& logits);
inline double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }

/// Guards a layer's cached forward state.
template <class Cache>
class Tape {
 public:
  void record(Cache c) { cache_ = std::move(c); }
  Cache take(const char* who) {
    if (!cache_) throw std::logic_error(std::string(who) + ": backward without a matching forward (stale tape)");
    Cache c = std::move(*cache_);
    cache_.reset();
    return c;
  }
  bool armed() const { return cache_.has_value(); }

 private:
  std::optional<Cache> cache_;
};

/// y = act(x·W + b).
class Dense {
 public:
  Dense(std::size_t in, std::size_t out, Rng& rng, Activation act = Activation::Identity);

  Matrix forward(const Matrix& x);
  Matrix backward(const Matrix& grad_out);
  ParameterList parameters() { return {&weight_, &bias_}; }

  std::size_t in() const { return static_cast<std::size_t>(weight_.value.rows()); }
  std::size_t out() const { return static_cast<std::size_t>(weight_.value.cols()); }
  Parameter& weight() { return weight_; }
  Parameter& bias() { return bias_; }

 private:
  struct Cache {
    Matrix x, pre, post;
  };
  Parameter weight_;  // in × out
  Parameter bias_;    // 1 × out
  Activation act_;
  Tape<Cache> tape_;
};

/// Stack of dense layers. widths = {in, h1, ..., out}.
class Mlp {
 public:
  Mlp(const std::vector<std::size_t>& widths, Rng& rng, Activation hidden = Activation::Relu,
      Activation output = Activation::Identity);

  Matrix forward(const Matrix& x);
  Matrix backward(const Matrix& grad_out);
  ParameterList parameters();

  std::size_t in() const { return layers_.front().in(); }
  std::size_t out() const { return layers_.back().out(); }
  std::vector<Dense>& layers() { return layers_; }

 private:
  std::vector<Dense> layers_;
};

enum class CellType { Lstm, Gru };

/// Gated recurrent layer run over a whole sequence; returns the final hidden state.
class Recurrent {
 public:
  Recurrent(CellType type, std::size_t in, std::size_t hidden, Rng& rng);

  /// sequence[t] is batch × in; returns batch × hidden.
  Matrix forward(const std::vector<Matrix>& sequence);
  /// Gradient w.r.t. each input step.
  std::vector<Matrix> backward(const Matrix& grad_last_hidden);
  ParameterList parameters() { return {&w_, &u_, &b_}; }

  CellType type() const { return type_; }
  std::size_t hidden() const { return hidden_; }

 private:
  struct Step {
    Matrix x, h_prev, c_prev;
    Matrix gates;  // post-activation gates
    Matrix c, tanh_c;
    Matrix rh;     // GRU: r ∘ h_prev
  };
  CellType type_;
  std::size_t hidden_;
  Parameter w_;  // in × G·H
  Parameter u_;  // H × G·H
  Parameter b_;  // 1 × G·H
  Tape<std::vector<Step>> tape_;
};

/// One propagation step: act(Â·H·W + b) with a precomputed normalized adjacency Â.
class GraphConv {
 public:
  GraphConv(std::size_t in, std::size_t out, Rng& rng, Activation act = Activation::Relu);

  /// Throws std::invalid_argument when Â is not square or does not match H's row count.
  Matrix forward(const Matrix& node_features, const Matrix& adjacency);
  Matrix backward(const Matrix& grad_out);
  ParameterList parameters() { return {&weight_, &bias_}; }

 private:
  struct Cache {
    Matrix adjacency, aggregated, pre, post;
  };
  Parameter weight_;
  Parameter bias_;
  Activation act_;
  Tape<Cache> tape_;
};

/// D^{-1/2}(A + I)D^{-1/2} for a symmetric non-negative weight matrix.
/// Throws std::invalid_argument for non-square or asymmetric input.
Matrix normalized_adjacency(const Matrix& weights);

class Adam {
 public:
  explicit Adam(double lr = 1e-3, double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8)
      : lr_(lr), beta1_(beta1), beta2_(beta2), eps_(eps) {}

  /// Applies one update from the accumulated gradients (scaled by grad_scale) and zeroes them.
  void step(const ParameterList& params, double grad_scale = 1.0);
  double learning_rate() const { return lr_; }
  void set_learning_rate(double lr) { lr_ = lr; }

 private:
  double lr_, beta1_, beta2_, eps_;
  long long t_ = 0;
};

/// Plain gradient descent, zeroing gradients after the step.
void sgd_step(const ParameterList& params, double lr);

/// Flat checkpoint: "DTNN", u32 version, u32 tensor count, then per tensor
/// u32 rows, u32 cols and rows·cols row-major little-endian doubles.
void save_checkpoint(std::ostream& out, const ParameterList& params);
/// Throws std::runtime_error on bad magic/version or a shape mismatch.
void load_checkpoint(std::istream& in, const ParameterList& params);

}  // namespace dtmap::nn
