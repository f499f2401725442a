#include "dtmap/neural.hpp"

#include <array>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <istream>
#include <ostream>
#include <stdexcept>

namespace dtmap::nn {

namespace {

Matrix glorot(std::size_t in, std::size_t out, Rng& rng) {
  const double scale = std::sqrt(2.0 / static_cast<double>(in + out));
  return rng.normal_matrix(static_cast<Eigen::Index>(in), static_cast<Eigen::Index>(out)) * scale;
}

Matrix add_bias(Matrix m, const Matrix& bias) {
  m.rowwise() += bias.row(0);
  return m;
}

Matrix sigmoid_m(const Matrix& a) { return (1.0 + (-a.array()).exp()).inverse().matrix(); }

void check_same_lists(const ParameterList& a, const ParameterList& b, const char* who) {
  if (a.size() != b.size()) throw std::invalid_argument(std::string(who) + ": parameter lists differ in length");
  for (std::size_t i = 0; i < a.size(); ++i) {
    if (a[i]->value.rows() != b[i]->value.rows() || a[i]->value.cols() != b[i]->value.cols())
      throw std::invalid_argument(std::string(who) + ": parameter shapes differ");
  }
}

}  // namespace

void zero_grad(const ParameterList& params) {
  for (Parameter* p : params) p->grad.setZero();
}

double grad_norm(const ParameterList& params) {
  double s = 0.0;
  for (const Parameter* p : params) s += p->grad.squaredNorm();
  return std::sqrt(s);
}

void soft_update(const ParameterList& target, const ParameterList& source, double rate) {
  check_same_lists(target, source, "soft_update");
  for (std::size_t i = 0; i < target.size(); ++i)
    target[i]->value = (1.0 - rate) * target[i]->value + rate * source[i]->value;
}

void copy_values(const ParameterList& target, const ParameterList& source) {
  check_same_lists(target, source, "copy_values");
  for (std::size_t i = 0; i < target.size(); ++i) target[i]->value = source[i]->value;
}

Matrix activate(Activation a, const Matrix& pre) {
  switch (a) {
    case Activation::Identity: return pre;
    case Activation::Relu: return pre.cwiseMax(0.0);
    case Activation::Tanh: return pre.array().tanh().matrix();
    case Activation::Sigmoid: return sigmoid_m(pre);
  }
  return pre;
}

Matrix activation_backward(Activation a, const Matrix& pre, const Matrix& post, const Matrix& grad_out) {
  switch (a) {
    case Activation::Identity: return grad_out;
    case Activation::Relu: return (pre.array() > 0.0).cast<double>().matrix().cwiseProduct(grad_out);
    case Activation::Tanh: return ((1.0 - post.array().square()) * grad_out.array()).matrix();
    case Activation::Sigmoid: return (post.array() * (1.0 - post.array()) * grad_out.array()).matrix();
  }
  return grad_out;
}

Matrix softmax_rows(const Matrix& logits) {
  Matrix out(logits.rows(), logits.cols());
  for (Eigen::Index r = 0; r < logits.rows(); ++r) {
    const double m = logits.row(r).maxCoeff();
    out.row(r) = (logits.row(r).array() - m).exp().matrix();
    out.row(r) /= out.row(r).sum();
  }
  return out;
}

// ---- Dense ----------------------------------------------------------------

Dense::Dense(std::size_t in, std::size_t out, Rng& rng, Activation act)
    : weight_(glorot(in, out, rng)), bias_(Matrix::Zero(1, static_cast<Eigen::Index>(out))), act_(act) {
  if (in == 0 || out == 0) throw std::invalid_argument("Dense: widths must be positive");
}

Matrix Dense::forward(const Matrix& x) {
  if (x.cols() != weight_.value.rows())
    throw std::invalid_argument("Dense: input has " + std::to_string(x.cols()) + " columns, expected " +
                                std::to_string(weight_.value.rows()));
  Matrix pre = add_bias(x * weight_.value, bias_.value);
  Matrix post = activate(act_, pre);
  tape_.record({x, std::move(pre), post});
  return post;
}

Matrix Dense::backward(const Matrix& grad_out) {
  Cache c = tape_.take("Dense");
  if (grad_out.rows() != c.post.rows() || grad_out.cols() != c.post.cols())
    throw std::invalid_argument("Dense: gradient shape mismatch");
  const Matrix d = activation_backward(act_, c.pre, c.post, grad_out);
  weight_.grad += c.x.transpose() * d;
  bias_.grad += d.colwise().sum();
  return d * weight_.value.transpose();
}

// ---- Mlp ------------------------------------------------------------------

Mlp::Mlp(const std::vector<std::size_t>& widths, Rng& rng, Activation hidden, Activation output) {
  if (widths.size() < 2) throw std::invalid_argument("Mlp: need at least input and output widths");
  for (std::size_t i = 0; i + 1 < widths.size(); ++i)
    layers_.emplace_back(widths[i], widths[i + 1], rng, i + 2 == widths.size() ? output : hidden);
}

Matrix Mlp::forward(const Matrix& x) {
  Matrix h = x;
  for (auto& l : layers_) h = l.forward(h);
  return h;
}

Matrix Mlp::backward(const Matrix& grad_out) {
  Matrix g = grad_out;
  for (auto it = layers_.rbegin(); it != layers_.rend(); ++it) g = it->backward(g);
  return g;
}

ParameterList Mlp::parameters() {
  ParameterList out;
  for (auto& l : layers_)
    for (Parameter* p : l.parameters()) out.push_back(p);
  return out;
}

// ---- Recurrent ------------------------------------------------------------

namespace {
std::size_t gate_count(CellType t) { return t == CellType::Lstm ? 4 : 3; }
}  // namespace

Recurrent::Recurrent(CellType type, std::size_t in, std::size_t hidden, Rng& rng)
    : type_(type),
      hidden_(hidden),
      w_(glorot(in, gate_count(type) * hidden, rng)),
      u_(glorot(hidden, gate_count(type) * hidden, rng)),
      b_(Matrix::Zero(1, static_cast<Eigen::Index>(gate_count(type) * hidden))) {
  if (in == 0 || hidden == 0) throw std::invalid_argument("Recurrent: widths must be positive");
  if (type_ == CellType::Lstm) {
    const auto H = static_cast<Eigen::Index>(hidden);
    b_.value.block(0, H, 1, H).setOnes();  // forget gate starts open
  }
}

Matrix Recurrent::forward(const std::vector<Matrix>& sequence) {
  if (sequence.empty()) throw std::invalid_argument("Recurrent: empty sequence");
  const auto H = static_cast<Eigen::Index>(hidden_);
  const Eigen::Index B = sequence.front().rows();
  Matrix h = Matrix::Zero(B, H);
  Matrix c = Matrix::Zero(B, H);
  std::vector<Step> steps;
  steps.reserve(sequence.size());
  for (const Matrix& x : sequence) {
    if (x.cols() != w_.value.rows() || x.rows() != B) throw std::invalid_argument("Recurrent: input shape mismatch");
    Step st;
    st.x = x;
    st.h_prev = h;
    st.c_prev = c;
    if (type_ == CellType::Lstm) {
      const Matrix a = add_bias(x * w_.value + h * u_.value, b_.value);
      st.gates.resize(B, 4 * H);
      st.gates.leftCols(2 * H) = sigmoid_m(a.leftCols(2 * H));
      st.gates.middleCols(2 * H, H) = a.middleCols(2 * H, H).array().tanh().matrix();
      st.gates.rightCols(H) = sigmoid_m(a.rightCols(H));
      const auto i = st.gates.leftCols(H).array();
      const auto f = st.gates.middleCols(H, H).array();
      const auto g = st.gates.middleCols(2 * H, H).array();
      const auto o = st.gates.rightCols(H).array();
      st.c = (f * c.array() + i * g).matrix();
      st.tanh_c = st.c.array().tanh().matrix();
      c = st.c;
      h = (o * st.tanh_c.array()).matrix();
    } else {
      Matrix zr = x * w_.value.leftCols(2 * H) + h * u_.value.leftCols(2 * H);
      zr.rowwise() += b_.value.leftCols(2 * H).row(0);
      st.gates.resize(B, 3 * H);
      st.gates.leftCols(2 * H) = sigmoid_m(zr);
      const auto z = st.gates.leftCols(H).array();
      const auto r = st.gates.middleCols(H, H).array();
      st.rh = (r * h.array()).matrix();
      Matrix an = x * w_.value.rightCols(H) + st.rh * u_.value.rightCols(H);
      an.rowwise() += b_.value.rightCols(H).row(0);
      st.gates.rightCols(H) = an.array().tanh().matrix();
      const auto n = st.gates.rightCols(H).array();
      h = ((1.0 - z) * n + z * h.array()).matrix();
    }
    steps.push_back(std::move(st));
  }
  tape_.record(std::move(steps));
  return h;
}

std::vector<Matrix> Recurrent::backward(const Matrix& grad_last_hidden) {
  std::vector<Step> steps = tape_.take("Recurrent");
  const auto H = static_cast<Eigen::Index>(hidden_);
  const Eigen::Index B = steps.front().x.rows();
  if (grad_last_hidden.rows() != B || grad_last_hidden.cols() != H)
    throw std::invalid_argument("Recurrent: gradient shape mismatch");
  std::vector<Matrix> dx(steps.size());
  Matrix dh = grad_last_hidden;
  Matrix dc = Matrix::Zero(B, H);
  for (std::size_t t = steps.size(); t-- > 0;) {
    const Step& st = steps[t];
    if (type_ == CellType::Lstm) {
      const auto i = st.gates.leftCols(H).array();
      const auto f = st.gates.middleCols(H, H).array();
      const auto g = st.gates.middleCols(2 * H, H).array();
      const auto o = st.gates.rightCols(H).array();
      const auto tc = st.tanh_c.array();
      dc.array() += dh.array() * o * (1.0 - tc.square());
      Matrix da(B, 4 * H);
      da.leftCols(H) = (dc.array() * g * i * (1.0 - i)).matrix();
      da.middleCols(H, H) = (dc.array() * st.c_prev.array() * f * (1.0 - f)).matrix();
      da.middleCols(2 * H, H) = (dc.array() * i * (1.0 - g.square())).matrix();
      da.rightCols(H) = (dh.array() * tc * o * (1.0 - o)).matrix();
      w_.grad += st.x.transpose() * da;
      u_.grad += st.h_prev.transpose() * da;
      b_.grad += da.colwise().sum();
      dx[t] = da * w_.value.transpose();
      dh = da * u_.value.transpose();
      dc = (dc.array() * f).matrix();
    } else {
      const auto z = st.gates.leftCols(H).array();
      const auto r = st.gates.middleCols(H, H).array();
      const auto n = st.gates.rightCols(H).array();
      const Matrix da_n = (dh.array() * (1.0 - z) * (1.0 - n.square())).matrix();
      const Matrix dz = (dh.array() * (st.h_prev.array() - n)).matrix();
      Matrix dh_prev = (dh.array() * z).matrix();

      w_.grad.rightCols(H) += st.x.transpose() * da_n;
      u_.grad.rightCols(H) += st.rh.transpose() * da_n;
      b_.grad.rightCols(H) += da_n.colwise().sum();
      const Matrix drh = da_n * u_.value.rightCols(H).transpose();
      dh_prev.array() += drh.array() * r;
      dx[t] = da_n * w_.value.rightCols(H).transpose();

      Matrix da_zr(B, 2 * H);
      da_zr.leftCols(H) = (dz.array() * z * (1.0 - z)).matrix();
      da_zr.rightCols(H) = (drh.array() * st.h_prev.array() * r * (1.0 - r)).matrix();
      w_.grad.leftCols(2 * H) += st.x.transpose() * da_zr;
      u_.grad.leftCols(2 * H) += st.h_prev.transpose() * da_zr;
      b_.grad.leftCols(2 * H) += da_zr.colwise().sum();
      dh_prev += da_zr * u_.value.leftCols(2 * H).transpose();
      dx[t] += da_zr * w_.value.leftCols(2 * H).transpose();
      dh = std::move(dh_prev);
    }
  }
  return dx;
}

// ---- GraphConv ------------------------------------------------------------

GraphConv::GraphConv(std::size_t in, std::size_t out, Rng& rng, Activation act)
    : weight_(glorot(in, out, rng)), bias_(Matrix::Zero(1, static_cast<Eigen::Index>(out))), act_(act) {}

Matrix GraphConv::forward(const Matrix& node_features, const Matrix& adjacency) {
  if (adjacency.rows() != adjacency.cols()) throw std::invalid_argument("GraphConv: adjacency must be square");
  if (adjacency.rows() != node_features.rows())
    throw std::invalid_argument("GraphConv: adjacency has " + std::to_string(adjacency.rows()) + " nodes, features " +
                                std::to_string(node_features.rows()));
  if (node_features.cols() != weight_.value.rows()) throw std::invalid_argument("GraphConv: feature width mismatch");
  Matrix agg = adjacency * node_features;
  Matrix pre = add_bias(agg * weight_.value, bias_.value);
  Matrix post = activate(act_, pre);
  tape_.record({adjacency, std::move(agg), std::move(pre), post});
  return post;
}

Matrix GraphConv::backward(const Matrix& grad_out) {
  Cache c = tape_.take("GraphConv");
  if (grad_out.rows() != c.post.rows() || grad_out.cols() != c.post.cols())
    throw std::invalid_argument("GraphConv: gradient shape mismatch");
  const Matrix d = activation_backward(act_, c.pre, c.post, grad_out);
  weight_.grad += c.aggregated.transpose() * d;
  bias_.grad += d.colwise().sum();
  return c.adjacency.transpose() * (d * weight_.value.transpose());
}

Matrix normalized_adjacency(const Matrix& weights) {
  if (weights.rows() != weights.cols()) throw std::invalid_argument("normalized_adjacency: matrix must be square");
  if (!weights.isApprox(weights.transpose(), 1e-12) && weights.size() > 0)
    throw std::invalid_argument("normalized_adjacency: matrix must be symmetric");
  Matrix a = weights;
  a.diagonal().setOnes();
  const Vector inv_sqrt = a.rowwise().sum().array().rsqrt().matrix();
  return inv_sqrt.asDiagonal() * a * inv_sqrt.asDiagonal();
}

// ---- Optimizers -------------------------------------------------------------

void Adam::step(const ParameterList& params, double grad_scale) {
  ++t_;
  const double c1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
  const double c2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
  for (Parameter* p : params) {
    const Matrix g = p->grad * grad_scale;
    p->adam_m = beta1_ * p->adam_m + (1.0 - beta1_) * g;
    p->adam_v = beta2_ * p->adam_v + (1.0 - beta2_) * g.cwiseProduct(g);
    p->value.array() -= lr_ * (p->adam_m.array() / c1) / ((p->adam_v.array() / c2).sqrt() + eps_);
    p->grad.setZero();
  }
}

void sgd_step(const ParameterList& params, double lr) {
  for (Parameter* p : params) {
    p->value -= lr * p->grad;
    p->grad.setZero();
  }
}

// ---- Checkpoints -----------------------------------------------------------

namespace {

constexpr std::array<char, 4> kMagic{'D', 'T', 'N', 'N'};
constexpr std::uint32_t kVersion = 1;

void put_u32(std::ostream& out, std::uint32_t v) {
  char b[4];
  for (int i = 0; i < 4; ++i) b[i] = static_cast<char>((v >> (8 * i)) & 0xffu);
  out.write(b, 4);
}

void put_f64(std::ostream& out, double d) {
  std::uint64_t v;
  std::memcpy(&v, &d, sizeof v);
  char b[8];
  for (int i = 0; i < 8; ++i) b[i] = static_cast<char>((v >> (8 * i)) & 0xffu);
  out.write(b, 8);
}

std::uint32_t get_u32(std::istream& in) {
  unsigned char b[4];
  if (!in.read(reinterpret_cast<char*>(b), 4)) throw std::runtime_error("checkpoint: truncated");
  std::uint32_t v = 0;
  for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(b[i]) << (8 * i);
  return v;
}

double get_f64(std::istream& in) {
  unsigned char b[8];
  if (!in.read(reinterpret_cast<char*>(b), 8)) throw std::runtime_error("checkpoint: truncated");
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(b[i]) << (8 * i);
  double d;
  std::memcpy(&d, &v, sizeof d);
  return d;
}

}  // namespace

void save_checkpoint(std::ostream& out, const ParameterList& params) {
  out.write(kMagic.data(), 4);
  put_u32(out, kVersion);
  put_u32(out, static_cast<std::uint32_t>(params.size()));
  for (const Parameter* p : params) {
    put_u32(out, static_cast<std::uint32_t>(p->value.rows()));
    put_u32(out, static_cast<std::uint32_t>(p->value.cols()));
    for (Eigen::Index r = 0; r < p->value.rows(); ++r)
      for (Eigen::Index c = 0; c < p->value.cols(); ++c) put_f64(out, p->value(r, c));
  }
  if (!out) throw std::runtime_error("checkpoint: write failed");
}

void load_checkpoint(std::istream& in, const ParameterList& params) {
  std::array<char, 4> magic{};
  if (!in.read(magic.data(), 4) || magic != kMagic) throw std::runtime_error("checkpoint: bad magic");
  if (const auto v = get_u32(in); v != kVersion)
    throw std::runtime_error("checkpoint: unsupported version " + std::to_string(v));
  if (get_u32(in) != params.size()) throw std::runtime_error("checkpoint: tensor count mismatch");
  // Read everything before touching the parameters so a bad file leaves them intact.
  std::vector<Matrix> values;
  for (const Parameter* p : params) {
    const auto rows = get_u32(in);
    const auto cols = get_u32(in);
    if (rows != p->value.rows() || cols != p->value.cols())
      throw std::runtime_error("checkpoint: shape mismatch for tensor " + std::to_string(values.size()));
    Matrix m(rows, cols);
    for (Eigen::Index r = 0; r < m.rows(); ++r)
      for (Eigen::Index c = 0; c < m.cols(); ++c) m(r, c) = get_f64(in);
    values.push_back(std::move(m));
  }
  for (std::size_t i = 0; i < params.size(); ++i) params[i]->value = std::move(values[i]);
}

}  // namespace dtmap::nn
