#include "dtmap/mbrl.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>

namespace dtmap {

// ---- State encoding ---------------------------------------------------------

std::shared_ptr<const StateGraph> build_state_graph(const EnvState& s, const EnvConfig& cfg,
                                                    const RatePalette& palette) {
  auto g = std::make_shared<StateGraph>();
  g->nodes = s.map.frames();
  g->map_count = g->nodes.size();
  std::vector<FramePtr> cands;
  for (const auto& f : s.recent_frames)
    if (!s.map.contains(f->id)) cands.push_back(f);
  std::sort(cands.begin(), cands.end(), [](const FramePtr& a, const FramePtr& b) { return a->id < b->id; });
  g->nodes.insert(g->nodes.end(), cands.begin(), cands.end());

  const std::size_t n = g->nodes.size();
  const std::size_t m = g->map_count;
  const auto N = static_cast<Eigen::Index>(n);
  nn::Matrix w = nn::Matrix::Zero(N, N);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = i + 1; j < n; ++j) {
      const double v = (i < m && j < m) ? static_cast<double>(s.map.weight(i, j))
                                        : static_cast<double>(edge_weight(*g->nodes[i], *g->nodes[j]));
      w(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) = v;
      w(static_cast<Eigen::Index>(j), static_cast<Eigen::Index>(i)) = v;
    }
  }

  double largest = 1.0;
  for (const auto& f : g->nodes) largest = std::max(largest, static_cast<double>(f->points.size()));
  g->features = nn::Matrix::Zero(N, static_cast<Eigen::Index>(StateGraph::kNodeFeatures));
  nn::Matrix scaled = nn::Matrix::Zero(N, N);
  for (std::size_t i = 0; i < n; ++i) {
    const auto r = static_cast<Eigen::Index>(i);
    const double size_i = static_cast<double>(g->nodes[i]->points.size());
    double overlap = 0.0;
    for (std::size_t j = 0; j < m; ++j)
      if (j != i) overlap += w(r, static_cast<Eigen::Index>(j));
    const double age = std::max<double>(0.0, static_cast<double>(static_cast<std::int64_t>(s.slot) -
                                                                  g->nodes[i]->slot_captured));
    g->features(r, 0) = size_i / largest;
    g->features(r, 1) = overlap / largest;
    g->features(r, 2) = age / (1.0 + age);
    g->features(r, 3) = i < m ? 1.0 : 0.0;
    for (std::size_t j = 0; j < n; ++j) {
      if (j == i) continue;
      const double size_j = static_cast<double>(g->nodes[j]->points.size());
      scaled(r, static_cast<Eigen::Index>(j)) = w(r, static_cast<Eigen::Index>(j)) / std::sqrt(size_i * size_j);
    }
  }
  g->adjacency = nn::normalized_adjacency(scaled);

  const auto rates = s.history.rates(palette);
  g->rates.resize(static_cast<Eigen::Index>(rates.size()));
  for (std::size_t i = 0; i < rates.size(); ++i) g->rates(static_cast<Eigen::Index>(i)) = rates[i] / palette.max_rate();
  g->map_fill = static_cast<double>(m) / static_cast<double>(cfg.v_max);
  g->plan = plan_slot(s, cfg);
  g->kept = m + g->plan.upload - g->plan.evict;
  return g;
}

StateEncoding encode_state(std::shared_ptr<const StateGraph> graph, const LatentFeatures& latent) {
  if (latent.mu.size() != latent.sigma.size()) throw std::invalid_argument("encode_state: latent size mismatch");
  StateEncoding e;
  const Eigen::Index R = graph->rates.size();
  const Eigen::Index Z = latent.mu.size();
  e.global.resize(R + 2 * Z + 1);
  e.global << graph->rates, latent.mu.transpose(), latent.sigma.transpose(), graph->map_fill;
  e.graph = std::move(graph);
  return e;
}

StateEncoding encode_state(const EnvState& s, const LatentFeatures& latent, const EnvConfig& cfg,
                           const RatePalette& palette) {
  return encode_state(build_state_graph(s, cfg, palette), latent);
}

std::size_t global_width(std::size_t tau, std::size_t latent) { return tau + 1 + 2 * latent + 1; }

Eigen::VectorXd kept_mask(const StateGraph& g, const Action& a) {
  Eigen::VectorXd keep = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(g.nodes.size()));
  for (std::size_t i = 0; i < g.nodes.size(); ++i) {
    const FrameId id = g.nodes[i]->id;
    const bool in = i < g.map_count || std::binary_search(a.upload.begin(), a.upload.end(), id);
    const bool out = std::find(a.evict.begin(), a.evict.end(), id) != a.evict.end();
    keep(static_cast<Eigen::Index>(i)) = in && !out ? 1.0 : 0.0;
  }
  return keep;
}

// ---- Networks ---------------------------------------------------------------

namespace {

std::vector<std::size_t> head_widths(std::size_t in, const std::vector<std::size_t>& hidden) {
  std::vector<std::size_t> w{in};
  w.insert(w.end(), hidden.begin(), hidden.end());
  w.push_back(1);
  return w;
}

}  // namespace

ActorNet::ActorNet(std::size_t global_dim, const NetworkShape& shape, Rng& rng)
    : g1_(StateGraph::kNodeFeatures, shape.gcn1, rng),
      g2_(shape.gcn1, shape.gcn2, rng),
      head_(head_widths(shape.gcn2 + global_dim, shape.actor_hidden), rng),
      gcn2_(shape.gcn2) {}

nn::Matrix ActorNet::forward(const StateEncoding& x) {
  const StateGraph& g = *x.graph;
  nodes_ = static_cast<Eigen::Index>(g.nodes.size());
  if (nodes_ == 0) return nn::Matrix(0, 1);
  const nn::Matrix h = g2_.forward(g1_.forward(g.features, g.adjacency), g.adjacency);
  nn::Matrix in(nodes_, h.cols() + x.global.size());
  in.leftCols(h.cols()) = h;
  in.rightCols(x.global.size()) = x.global.replicate(nodes_, 1);
  return head_.forward(in);
}

void ActorNet::backward(const nn::Matrix& grad_scores) {
  if (nodes_ == 0) return;
  const nn::Matrix d = head_.backward(grad_scores);
  g1_.backward(g2_.backward(d.leftCols(static_cast<Eigen::Index>(gcn2_))));
}

nn::ParameterList ActorNet::parameters() {
  nn::ParameterList out = g1_.parameters();
  for (auto* p : g2_.parameters()) out.push_back(p);
  for (auto* p : head_.parameters()) out.push_back(p);
  return out;
}

CriticNet::CriticNet(std::size_t global_dim, const NetworkShape& shape, Rng& rng)
    : g1_(StateGraph::kNodeFeatures, shape.gcn1, rng),
      g2_(shape.gcn1, shape.gcn2, rng),
      head_(head_widths(2 * shape.gcn2 + global_dim, shape.critic_hidden), rng),
      gcn2_(shape.gcn2),
      global_dim_(global_dim) {}

double CriticNet::forward(const StateEncoding& x, const Eigen::VectorXd& keep) {
  const StateGraph& g = *x.graph;
  const auto n = static_cast<Eigen::Index>(g.nodes.size());
  if (keep.size() != n) throw std::invalid_argument("CriticNet: action mask does not match node count");
  if (x.global.size() != static_cast<Eigen::Index>(global_dim_))
    throw std::invalid_argument("CriticNet: global vector width mismatch");
  const auto G = static_cast<Eigen::Index>(gcn2_);
  keep_ = keep;
  kept_ = std::max<double>(1.0, static_cast<double>(g.kept));
  nn::Matrix in = nn::Matrix::Zero(1, 2 * G + x.global.size());
  if (n > 0) {
    h_ = g2_.forward(g1_.forward(g.features, g.adjacency), g.adjacency);
    in.leftCols(G) = h_.colwise().mean();
    in.rightCols(G) = keep.transpose() * h_ / kept_;
  } else {
    h_.resize(0, G);
  }
  in.middleCols(G, x.global.size()) = x.global;
  return head_.forward(in)(0, 0);
}

Eigen::VectorXd CriticNet::backward(double grad_q) {
  const nn::Matrix d = head_.backward(nn::Matrix::Constant(1, 1, grad_q));
  const auto G = static_cast<Eigen::Index>(gcn2_);
  const Eigen::Index n = h_.rows();
  if (n == 0) return Eigen::VectorXd(0);
  const Eigen::RowVectorXd dm = d.leftCols(G);
  const Eigen::RowVectorXd da = d.rightCols(G);
  const nn::Matrix dh = Eigen::VectorXd::Ones(n) * (dm / static_cast<double>(n)) + keep_ * (da / kept_);
  const Eigen::VectorXd dkeep = h_ * da.transpose() / kept_;
  g1_.backward(g2_.backward(dh));
  return dkeep;
}

nn::ParameterList CriticNet::parameters() {
  nn::ParameterList out = g1_.parameters();
  for (auto* p : g2_.parameters()) out.push_back(p);
  for (auto* p : head_.parameters()) out.push_back(p);
  return out;
}

void RewardNormalizer::observe(double r) {
  ++n_;
  const double delta = r - mean_;
  mean_ += delta / static_cast<double>(n_);
  m2_ += delta * (r - mean_);
}

double RewardNormalizer::normalize(double r) const {
  if (n_ == 0) return r;
  if (n_ < 2) return r - mean_;
  const double sd = std::sqrt(m2_ / static_cast<double>(n_ - 1));
  return (r - mean_) / std::max(sd, 1e-6);
}

ActorCritic::ActorCritic(std::size_t global_dim, const NetworkShape& shape, double actor_lr, double critic_lr, Rng& rng)
    : actor(global_dim, shape, rng),
      critic(global_dim, shape, rng),
      target_actor(global_dim, shape, rng),
      target_critic(global_dim, shape, rng),
      actor_opt(actor_lr),
      critic_opt(critic_lr) {
  nn::copy_values(target_actor.parameters(), actor.parameters());
  nn::copy_values(target_critic.parameters(), critic.parameters());
}

void ActorCritic::soft_update_targets(double rate) {
  nn::soft_update(target_actor.parameters(), actor.parameters(), rate);
  nn::soft_update(target_critic.parameters(), critic.parameters(), rate);
}

// ---- Acting and learning ----------------------------------------------------

Action select_action(const StateGraph& g, const Eigen::VectorXd& scores) {
  if (scores.size() != static_cast<Eigen::Index>(g.nodes.size()))
    throw std::invalid_argument("select_action: one score per node required");
  auto score = [&](std::size_t i) { return scores(static_cast<Eigen::Index>(i)); };
  auto id = [&](std::size_t i) { return g.nodes[i]->id; };

  std::vector<std::size_t> cands(g.candidate_count());
  std::iota(cands.begin(), cands.end(), g.map_count);
  std::sort(cands.begin(), cands.end(), [&](std::size_t a, std::size_t b) {
    if (score(a) != score(b)) return score(a) > score(b);
    return id(a) < id(b);
  });
  const std::size_t up = std::min(g.plan.upload, cands.size());

  std::vector<std::size_t> members(g.map_count);
  std::iota(members.begin(), members.end(), 0);
  members.insert(members.end(), cands.begin(), cands.begin() + static_cast<std::ptrdiff_t>(up));
  std::sort(members.begin(), members.end(), [&](std::size_t a, std::size_t b) {
    if (score(a) != score(b)) return score(a) < score(b);
    return id(a) < id(b);
  });

  Action a;
  for (std::size_t i = 0; i < up; ++i) a.upload.push_back(id(cands[i]));
  for (std::size_t i = 0; i < std::min(g.plan.evict, members.size()); ++i) a.evict.push_back(id(members[i]));
  a.normalize();
  return a;
}

Action act(ActorNet& actor, const StateEncoding& x, double noise_std, Rng& rng) {
  Eigen::VectorXd scores = actor.forward(x).col(0);
  if (noise_std > 0.0)
    for (Eigen::Index i = 0; i < scores.size(); ++i) scores(i) += noise_std * rng.normal();
  return select_action(*x.graph, scores);
}

double critic_loss(ActorCritic& ac, std::span<const Transition> batch, double gamma) {
  if (batch.empty()) throw std::invalid_argument("critic_loss: empty batch");
  const double B = static_cast<double>(batch.size());
  double loss = 0.0;
  for (const Transition& t : batch) {
    double y = t.reward;
    if (gamma != 0.0) {
      const Eigen::VectorXd scores = ac.target_actor.forward(t.next).col(0);
      const Eigen::VectorXd keep = kept_mask(*t.next.graph, select_action(*t.next.graph, scores));
      y += gamma * ac.target_critic.forward(t.next, keep);
    }
    const double q = ac.critic.forward(t.state, t.keep);
    const double diff = q - y;
    loss += diff * diff;
    ac.critic.backward(2.0 * diff / B);
  }
  return loss / B;
}

double critic_update(ActorCritic& ac, std::span<const Transition> batch, double gamma) {
  nn::zero_grad(ac.critic.parameters());
  const double loss = critic_loss(ac, batch, gamma);
  ac.critic_opt.step(ac.critic.parameters());
  return loss;
}

namespace {
std::vector<StateEncoding> states_of(std::span<const Transition> batch) {
  std::vector<StateEncoding> out;
  out.reserve(batch.size());
  for (const auto& t : batch) out.push_back(t.state);
  return out;
}
}  // namespace

double actor_update(ActorCritic& ac, std::span<const Transition> batch) {
  const auto states = states_of(batch);
  nn::zero_grad(ac.actor.parameters());
  dpg_accumulate(ac.actor, ac.critic, std::span<const StateEncoding>(states));
  nn::zero_grad(ac.critic.parameters());
  const double norm = nn::grad_norm(ac.actor.parameters());
  ac.actor_opt.step(ac.actor.parameters());
  return norm;
}

double mean_policy_value(ActorCritic& ac, std::span<const Transition> batch) {
  if (batch.empty()) return 0.0;
  double total = 0.0;
  for (const auto& t : batch) {
    const nn::Matrix scores = ac.actor.forward(t.state);
    const Eigen::VectorXd p = (1.0 + (-scores.col(0).array()).exp()).inverse().matrix();
    total += ac.critic.forward(t.state, p);
  }
  return total / static_cast<double>(batch.size());
}

// ---- AMM agent ----------------------------------------------------------------

void AmmConfig::validate() const {
  if (batch == 0) throw std::invalid_argument("AmmConfig: batch must be positive");
  if (real_per_batch == 0 || real_per_batch > batch)
    throw std::invalid_argument("AmmConfig: need 0 < real_per_batch <= batch");
  if (!(gamma >= 0.0 && gamma < 1.0)) throw std::invalid_argument("AmmConfig: gamma must be in [0,1)");
  if (!(soft_update > 0.0 && soft_update <= 1.0)) throw std::invalid_argument("AmmConfig: soft_update must be in (0,1]");
  if (noise_start < 0.0 || noise_end < 0.0) throw std::invalid_argument("AmmConfig: noise must be non-negative");
  if (udt.cadence == 0) throw std::invalid_argument("AmmConfig: UDT cadence must be positive");
}

namespace {

ChannelModelConfig twin_config(const AmmConfig& cfg, const EnvModel& env, std::size_t tau) {
  ChannelModelConfig m = cfg.udt.model;
  m.states = env.palette().size();
  m.tau = tau;
  return m;
}

}  // namespace

AmmAgent::AmmAgent(const AmmConfig& cfg, const EnvModel& env, std::size_t tau, std::size_t total_slots,
                   std::uint64_t seed)
    : cfg_((cfg.validate(), cfg)),
      env_(&env),
      total_slots_(total_slots),
      policy_rng_(make_rng(seed, Stream::Policy)),
      replay_rng_(make_rng(seed, Stream::Replay)),
      twin_rng_(make_rng(seed, Stream::Twin)),
      init_rng_(make_rng(seed, Stream::Networks)),
      model_(twin_config(cfg, env, tau), init_rng_),
      ac_(global_width(tau, cfg.udt.model.latent), cfg.shape, cfg.actor_lr, cfg.critic_lr, init_rng_),
      store_(cfg.udt.real_capacity, cfg.udt.artificial_capacity) {
  cfg_.udt.model = model_.config();
}

double AmmAgent::noise_std(std::size_t slot) const {
  if (total_slots_ <= 1) return cfg_.noise_end;
  const double t = std::min(1.0, static_cast<double>(slot) / static_cast<double>(total_slots_ - 1));
  return cfg_.noise_start + (cfg_.noise_end - cfg_.noise_start) * t;
}

void AmmAgent::purge_caches() {
  std::erase_if(graphs_, [](const auto& kv) { return kv.second.owner.expired(); });
  std::erase_if(latents_, [](const auto& kv) { return kv.second.owner.expired(); });
}

StateEncoding AmmAgent::encoding(const StatePtr& s) {
  if (graphs_.size() + latents_.size() > 8192) purge_caches();
  const EnvState* key = s.get();

  auto g = graphs_.find(key);
  if (g == graphs_.end() || g->second.owner.lock() != s) {
    GraphEntry e{s, build_state_graph(*s, env_->config(), env_->palette())};
    g = graphs_.insert_or_assign(key, std::move(e)).first;
  }
  auto l = latents_.find(key);
  if (l == latents_.end() || l->second.owner.lock() != s || l->second.version != latent_version_) {
    const auto hist = s->history.states();
    LatentEntry e{s, latent_version_, model_.extract_latent(hist)};
    l = latents_.insert_or_assign(key, std::move(e)).first;
  }
  return encode_state(g->second.graph, l->second.latent);
}

Action AmmAgent::decide(const StatePtr& s, const SlotPlan&) {
  const StateEncoding x = encoding(s);
  return act(ac_.actor, x, frozen_ ? 0.0 : noise_std(s->slot), policy_rng_);
}

Transition AmmAgent::to_transition(const Experience& xi) {
  Transition t;
  t.state = encoding(xi.state);
  t.keep = kept_mask(*t.state.graph, xi.action);
  t.reward = rewards_.normalize(xi.reward);
  t.next = encoding(xi.next);
  return t;
}

void AmmAgent::learn() {
  const auto& real = store_.real();
  const auto& art = store_.artificial();
  if (real.size() < cfg_.min_real) return;
  for (std::size_t u = 0; u < cfg_.updates_per_slot; ++u) {
    const std::size_t want_real = cfg_.real_per_batch;
    const std::size_t want_art = cfg_.batch - want_real;
    const std::size_t take_art = std::min(want_art, art.size());
    const std::size_t take_real = std::min(real.size(), want_real + (want_art - take_art));

    std::vector<Transition> batch;
    batch.reserve(take_real + take_art);
    for (std::size_t i : replay_rng_.sample_without_replacement(real.size(), take_real))
      batch.push_back(to_transition(real[i]));
    for (std::size_t i : replay_rng_.sample_without_replacement(art.size(), take_art))
      batch.push_back(to_transition(art[i]));

    ++stats_.batches;
    stats_.real += take_real;
    stats_.artificial += take_art;
    stats_.backfilled += take_real > want_real ? take_real - want_real : 0;

    critic_update(ac_, batch, cfg_.gamma);
    actor_update(ac_, batch);
    ac_.soft_update_targets(cfg_.soft_update);
  }
}

void AmmAgent::observe(const Experience& xi) {
  if (frozen_) return;
  rewards_.observe(xi.reward);
  store_.collect(xi);
  learn();
  const std::size_t W = cfg_.udt.cadence;
  if (xi.state->slot % W == W - 1) {
    UdtConfig ucfg = cfg_.udt;
    if (cfg_.real_per_batch >= cfg_.batch) ucfg.samples_per_real = 0;  // no artificial tuples are ever drawn
    UpdateReport rep = udt_update(store_, model_, *env_, ucfg, twin_rng_);
    if (rep.trained) {
      ++latent_version_;
      ++stats_.twin_updates;
    }
    reports_.push_back(std::move(rep));
  }
}

std::unique_ptr<AmmAgent> make_amm_agent(const AmmConfig& cfg, const Environment& env, std::uint64_t seed) {
  if (!env.state()) throw std::invalid_argument("make_amm_agent: environment must be reset first");
  return std::make_unique<AmmAgent>(cfg, env.model(), env.timeline().tau, env.timeline().total_slots(), seed);
}

AmmRun amm_run(Environment& env, const AmmConfig& cfg, std::uint64_t seed, const RecordSink& sink) {
  env.reset();
  auto agent = make_amm_agent(cfg, env, seed);
  AmmRun out;
  out.records = run_episode(env, *agent, sink);
  out.stats = agent->stats();
  return out;
}

}  // namespace dtmap
