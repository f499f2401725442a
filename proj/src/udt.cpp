#include "dtmap/udt.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>
#include <unordered_set>

#include "dtmap/policies.hpp"

namespace dtmap {

ExperienceStore::ExperienceStore(std::size_t real_capacity, std::size_t artificial_capacity)
    : real_capacity_(real_capacity), artificial_capacity_(artificial_capacity) {
  if (real_capacity_ == 0) throw std::invalid_argument("ExperienceStore: real capacity must be positive");
}

void ExperienceStore::collect(Experience xi) {
  if (!xi.state || !xi.next) throw std::invalid_argument("ExperienceStore::collect: tuple without states");
  if (xi.artificial) throw std::invalid_argument("ExperienceStore::collect: artificial tuple offered as real");
  if (!real_.empty() && real_.back().next != xi.state)
    throw std::invalid_argument("ExperienceStore::collect: tuple for slot " + std::to_string(xi.state->slot) +
                                " does not chain onto slot " + std::to_string(real_.back().state->slot));
  real_.push_back(std::move(xi));
  if (real_.size() > real_capacity_) {
    const StatePtr gone = real_.front().state;
    real_.pop_front();
    std::erase_if(artificial_, [&](const Experience& a) { return a.state == gone; });
  }
}

void ExperienceStore::replace_artificial(std::vector<Experience> tuples) {
  std::unordered_set<const EnvState*> known;
  for (const auto& r : real_) known.insert(r.state.get());
  for (const auto& t : tuples)
    if (!known.count(t.state.get()))
      throw std::invalid_argument("ExperienceStore: artificial tuple does not stem from a stored real state");
  if (tuples.size() > artificial_capacity_)
    tuples.erase(tuples.begin(), tuples.end() - static_cast<std::ptrdiff_t>(artificial_capacity_));
  artificial_ = std::move(tuples);
}

RateSample rate_sample(const Experience& xi) { return {xi.state->history.states(), xi.next->history.current()}; }

std::vector<RateSample> rate_samples_from_trace(std::span<const std::size_t> trace, std::size_t tau) {
  std::vector<RateSample> out;
  if (trace.size() < tau + 2) return out;
  for (std::size_t end = tau; end + 1 < trace.size(); ++end)
    out.push_back({std::vector<std::size_t>(trace.begin() + static_cast<std::ptrdiff_t>(end - tau),
                                            trace.begin() + static_cast<std::ptrdiff_t>(end + 1)),
                   trace[end + 1]});
  return out;
}

void ChannelModelConfig::validate() const {
  if (states < 2) throw std::invalid_argument("ChannelModelConfig: need at least 2 states");
  if (tau == 0 || latent == 0 || recurrent == 0 || batch == 0)
    throw std::invalid_argument("ChannelModelConfig: tau, latent, recurrent and batch must be positive");
  if (!(learning_rate > 0.0)) throw std::invalid_argument("ChannelModelConfig: learning_rate must be positive");
  if (!(kl_weight >= 0.0)) throw std::invalid_argument("ChannelModelConfig: kl_weight must be non-negative");
}

namespace {

std::vector<std::size_t> widths(std::size_t in, const std::vector<std::size_t>& hidden, std::size_t out) {
  std::vector<std::size_t> w{in};
  w.insert(w.end(), hidden.begin(), hidden.end());
  w.push_back(out);
  return w;
}

}  // namespace

ChannelModel::ChannelModel(ChannelModelConfig config, Rng& init)
    : config_((config.validate(), std::move(config))),
      rnn_(config_.cell, config_.states, config_.recurrent, init),
      head_(widths(config_.recurrent, config_.encoder_head, 2 * config_.latent), init),
      decoder_(widths(config_.latent + config_.states, config_.decoder, config_.states), init),
      adam_(config_.learning_rate) {}

std::vector<nn::Matrix> ChannelModel::one_hot_sequence(std::span<const std::vector<std::size_t>> histories) const {
  const std::size_t T = config_.tau + 1;
  const auto B = static_cast<Eigen::Index>(histories.size());
  std::vector<nn::Matrix> seq(T, nn::Matrix::Zero(B, static_cast<Eigen::Index>(config_.states)));
  for (Eigen::Index b = 0; b < B; ++b) {
    const auto& h = histories[static_cast<std::size_t>(b)];
    if (h.size() != T)
      throw std::invalid_argument("ChannelModel: history window has " + std::to_string(h.size()) + " entries, expected " +
                                  std::to_string(T));
    for (std::size_t t = 0; t < T; ++t) {
      if (h[t] >= config_.states) throw std::invalid_argument("ChannelModel: channel state out of range");
      seq[t](b, static_cast<Eigen::Index>(h[t])) = 1.0;
    }
  }
  return seq;
}

nn::Matrix ChannelModel::decoder_input(const nn::Matrix& z, std::span<const std::vector<std::size_t>> histories) const {
  const auto Z = static_cast<Eigen::Index>(config_.latent);
  nn::Matrix in = nn::Matrix::Zero(z.rows(), Z + static_cast<Eigen::Index>(config_.states));
  in.leftCols(Z) = z;
  for (Eigen::Index b = 0; b < z.rows(); ++b) in(b, Z + static_cast<Eigen::Index>(histories[static_cast<std::size_t>(b)].back())) = 1.0;
  return in;
}

nn::Matrix ChannelModel::encode(std::span<const std::vector<std::size_t>> histories) {
  return head_.forward(rnn_.forward(one_hot_sequence(histories)));
}

LatentFeatures ChannelModel::extract_latent(std::span<const std::size_t> history) {
  const std::vector<std::size_t> one(history.begin(), history.end());
  const nn::Matrix out = encode(std::span(&one, 1));
  const auto Z = static_cast<Eigen::Index>(config_.latent);
  LatentFeatures lf;
  lf.mu = out.row(0).head(Z).transpose();
  lf.sigma = out.row(0).tail(Z).transpose().array().exp().matrix();
  return lf;
}

Eigen::VectorXd ChannelModel::next_state_distribution(std::span<const std::size_t> history,
                                                      const Eigen::VectorXd& noise) {
  const LatentFeatures lf = extract_latent(history);
  nn::Matrix z = lf.mu.transpose();
  if (noise.size() > 0) {
    if (noise.size() != lf.mu.size()) throw std::invalid_argument("ChannelModel: noise has the wrong dimension");
    z += (lf.sigma.array().sqrt() * noise.array()).matrix().transpose();
  }
  const std::vector<std::size_t> one(history.begin(), history.end());
  return nn::softmax_rows(decoder_.forward(decoder_input(z, std::span(&one, 1)))).row(0).transpose();
}

ChannelModel::Forward ChannelModel::run(std::span<const RateSample> batch, const nn::Matrix& noise) {
  if (batch.empty()) throw std::invalid_argument("ChannelModel: empty batch");
  const auto Z = static_cast<Eigen::Index>(config_.latent);
  if (noise.rows() != static_cast<Eigen::Index>(batch.size()) || noise.cols() != Z)
    throw std::invalid_argument("ChannelModel: noise must be batch x latent");
  std::vector<std::vector<std::size_t>> histories;
  histories.reserve(batch.size());
  for (const auto& s : batch) {
    if (s.next >= config_.states) throw std::invalid_argument("ChannelModel: next state out of range");
    histories.push_back(s.history);
  }
  const nn::Matrix enc = encode(histories);
  Forward f;
  f.mu = enc.leftCols(Z);
  f.logvar = enc.rightCols(Z);
  f.z = f.mu + ((0.5 * f.logvar.array()).exp() * noise.array()).matrix();
  f.probs = nn::softmax_rows(decoder_.forward(decoder_input(f.z, histories)));
  return f;
}

ElboTerms ChannelModel::terms(std::span<const RateSample> batch, const Forward& f) const {
  const double B = static_cast<double>(batch.size());
  ElboTerms t;
  for (std::size_t i = 0; i < batch.size(); ++i)
    t.reconstruction -= std::log(std::max(f.probs(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(batch[i].next)), 1e-300));
  t.reconstruction /= B;
  t.kl = 0.5 * (f.logvar.array().exp() + f.mu.array().square() - 1.0 - f.logvar.array()).sum() / B;
  t.loss = t.reconstruction + config_.kl_weight * t.kl;
  return t;
}

ElboTerms ChannelModel::elbo_loss(std::span<const RateSample> batch, const nn::Matrix& noise) {
  const Forward f = run(batch, noise);
  const double B = static_cast<double>(batch.size());
  nn::Matrix dlogits = f.probs;
  for (std::size_t i = 0; i < batch.size(); ++i)
    dlogits(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(batch[i].next)) -= 1.0;
  dlogits /= B;
  const auto Z = static_cast<Eigen::Index>(config_.latent);
  const nn::Matrix dz = decoder_.backward(dlogits).leftCols(Z);
  const double beta = config_.kl_weight;
  nn::Matrix denc(dz.rows(), 2 * Z);
  denc.leftCols(Z) = dz + beta * f.mu / B;
  denc.rightCols(Z) = (dz.array() * noise.array() * 0.5 * (0.5 * f.logvar.array()).exp() +
                       beta * 0.5 * (f.logvar.array().exp() - 1.0) / B)
                          .matrix();
  rnn_.backward(head_.backward(denc));
  return terms(batch, f);
}

ElboTerms ChannelModel::elbo_value(std::span<const RateSample> batch, const nn::Matrix& noise) {
  return terms(batch, run(batch, noise));
}

void ChannelModel::optimizer_step() { adam_.step(parameters()); }

TransitionMatrix ChannelModel::implied_transition_matrix() {
  return implied_transition_matrix(std::span<const std::vector<std::size_t>>{});
}

TransitionMatrix ChannelModel::implied_transition_matrix(std::span<const std::vector<std::size_t>> contexts) {
  const std::size_t N = config_.states;
  TransitionMatrix p = TransitionMatrix::Zero(static_cast<Eigen::Index>(N), static_cast<Eigen::Index>(N));
  std::vector<std::size_t> counts(N, 0);
  for (const auto& h : contexts) {
    if (h.empty()) continue;
    const std::size_t s = h.back();
    if (s >= N) throw std::invalid_argument("implied_transition_matrix: state out of range");
    p.row(static_cast<Eigen::Index>(s)) += next_state_distribution(h).transpose();
    ++counts[s];
  }
  for (std::size_t s = 0; s < N; ++s) {
    const auto r = static_cast<Eigen::Index>(s);
    if (counts[s] > 0) {
      p.row(r) /= static_cast<double>(counts[s]);
    } else {
      const std::vector<std::size_t> constant(config_.tau + 1, s);
      p.row(r) = next_state_distribution(constant).transpose();
    }
  }
  return p;
}

nn::ParameterList ChannelModel::parameters() {
  nn::ParameterList out = rnn_.parameters();
  for (auto* p : head_.parameters()) out.push_back(p);
  for (auto* p : decoder_.parameters()) out.push_back(p);
  return out;
}

void ChannelModel::save(std::ostream& out) { nn::save_checkpoint(out, parameters()); }
void ChannelModel::load(std::istream& in) { nn::load_checkpoint(in, parameters()); }

std::vector<double> train_channel_model(ChannelModel& model, std::span<const RateSample> samples, Rng& rng) {
  const auto& cfg = model.config();
  std::vector<double> losses;
  if (samples.empty()) return losses;
  std::vector<std::size_t> order(samples.size());
  std::iota(order.begin(), order.end(), 0);
  std::vector<RateSample> batch;
  for (std::size_t e = 0; e < cfg.epochs; ++e) {
    rng.shuffle(order);
    double total = 0.0;
    std::size_t batches = 0;
    for (std::size_t start = 0; start < order.size(); start += cfg.batch) {
      batch.clear();
      for (std::size_t i = start; i < std::min(order.size(), start + cfg.batch); ++i) batch.push_back(samples[order[i]]);
      const nn::Matrix noise =
          rng.normal_matrix(static_cast<Eigen::Index>(batch.size()), static_cast<Eigen::Index>(cfg.latent));
      total += model.elbo_loss(batch, noise).loss;
      model.optimizer_step();
      ++batches;
    }
    losses.push_back(total / static_cast<double>(batches));
  }
  return losses;
}

NextStateSampler model_sampler(ChannelModel& model) {
  return [&model](const Experience& real, Rng& rng) {
    const auto hist = real.state->history.states();
    const Eigen::VectorXd eps = rng.normal_matrix(static_cast<Eigen::Index>(model.config().latent), 1).col(0);
    return rng.categorical(model.next_state_distribution(hist, eps));
  };
}

ActionSampler random_action_sampler() {
  return [](const Experience& real, const SlotPlan& plan, Rng& rng) { return random_action(*real.state, plan, rng); };
}

std::vector<Experience> generate_artificial(const ExperienceStore& store, const EnvModel& env, std::size_t J, Rng& rng,
                                            const NextStateSampler& next_state, const ActionSampler& action) {
  std::vector<Experience> out;
  if (J == 0) return out;
  out.reserve(J * store.real().size());
  for (const Experience& real : store.real()) {
    const SlotPlan plan = env.plan(*real.state);
    for (std::size_t j = 0; j < J; ++j) {
      const std::size_t d_next = next_state(real, rng);
      const Action a = action(real, plan, rng);
      Experience art = env.transition(real.state, a, real.next->recent_frames, d_next, real.next->interval);
      art.artificial = true;
      art.sample_index = j;
      out.push_back(std::move(art));
    }
  }
  return out;
}

UpdateReport udt_update(ExperienceStore& store, ChannelModel& model, const EnvModel& env, const UdtConfig& cfg,
                        Rng& rng, const ActionSampler& action) {
  UpdateReport rep;
  const std::size_t batch = cfg.model.batch;
  if (store.real().size() < batch) {
    rep.notice = "udt_update skipped: " + std::to_string(store.real().size()) + " real tuples, batch needs " +
                 std::to_string(batch);
    return rep;
  }
  std::vector<RateSample> samples;
  samples.reserve(store.real().size());
  for (const auto& xi : store.real()) samples.push_back(rate_sample(xi));

  const std::span<const RateSample> probe(samples.data(), batch);
  const nn::Matrix noise = rng.normal_matrix(static_cast<Eigen::Index>(batch), static_cast<Eigen::Index>(cfg.model.latent));
  rep.loss_before = model.elbo_value(probe, noise).loss;
  const auto losses = train_channel_model(model, samples, rng);
  rep.batches = losses.size() * ((samples.size() + batch - 1) / batch);
  rep.loss_after = model.elbo_value(probe, noise).loss;
  rep.trained = true;

  store.replace_artificial(generate_artificial(store, env, cfg.samples_per_real, rng, model_sampler(model), action));
  rep.artificial = store.artificial().size();
  return rep;
}

}  // namespace dtmap
