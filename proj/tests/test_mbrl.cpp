#include "doctest.h"

#include <cmath>
#include <numeric>

#include "dtmap/mbrl.hpp"
#include "helpers.hpp"

using namespace dtmap;

namespace {

using testing::small_shape;
using testing::transitions;
using testing::zero_latent;

void zero_output_layer(nn::Mlp& m) {
  m.layers().back().weight().value.setZero();
  m.layers().back().bias().value.setZero();
}

AmmConfig small_amm() {
  AmmConfig c;
  c.batch = 8;
  c.real_per_batch = 4;
  c.min_real = 4;
  c.shape = small_shape();
  c.udt.model.latent = 2;
  c.udt.model.recurrent = 8;
  c.udt.model.encoder_head = {8};
  c.udt.model.decoder = {8};
  c.udt.model.batch = 8;
  c.udt.model.epochs = 2;
  c.udt.samples_per_real = 2;
  c.udt.cadence = 10;
  return c;
}

// Toy actor/critic pair with one parameter: score = θx, Q = −(σ(θx) − 0.8)².
struct ToyActor {
  double theta = 0.3;
  double grad = 0.0;
  double x_ = 0.0;
  nn::Matrix forward(double x) {
    x_ = x;
    return nn::Matrix::Constant(1, 1, theta * x);
  }
  void backward(const nn::Matrix& d) { grad += d(0, 0) * x_; }
};

struct ToyCritic {
  std::pair<double, Eigen::VectorXd> action_gradient(double, const Eigen::VectorXd& p) {
    const double e = p(0) - 0.8;
    return {-e * e, Eigen::VectorXd::Constant(1, -2.0 * e)};
  }
};

double toy_mean_q(double theta, const std::vector<double>& xs) {
  double q = 0.0;
  for (double x : xs) {
    const double p = 1.0 / (1.0 + std::exp(-theta * x));
    q += -(p - 0.8) * (p - 0.8);
  }
  return q / static_cast<double>(xs.size());
}

}  // namespace

TEST_CASE("state encoding of a hand-built state") {
  auto a = make_frame(0, {1, 2, 3, 4}, 0);
  auto b = make_frame(1, {3, 4, 5}, 1);
  auto c = make_frame(2, {4, 5, 6, 7, 8, 9}, 2);
  EnvState s;
  s.map = MapGraph::from_frames({a, b});
  s.recent_frames = {c};
  s.history = RateHistory(2, 0);
  s.rate = 40.0;
  s.slot = 2;
  EnvConfig cfg;
  cfg.v_max = 4;
  const auto palette = RatePalette::evenly_spaced(2);
  LatentFeatures lat{Eigen::Vector2d(0.1, 0.2), Eigen::Vector2d(1.0, 1.5)};

  const auto x = encode_state(s, lat, cfg, palette);
  const StateGraph& g = *x.graph;
  REQUIRE(g.nodes.size() == 3);
  CHECK(g.map_count == 2);
  CHECK(g.candidate_count() == 1);

  Eigen::MatrixXd expect(3, 4);
  expect << 4.0 / 6, 2.0 / 6, 2.0 / 3, 1,  //
      3.0 / 6, 2.0 / 6, 1.0 / 2, 1,        //
      1.0, 3.0 / 6, 0, 0;
  CHECK(g.features.isApprox(expect, 1e-12));

  Eigen::RowVectorXd global(8);
  global << 0.5, 0.5, 0.5, 0.1, 0.2, 1.0, 1.5, 0.5;
  CHECK(x.global.isApprox(global, 1e-12));
  CHECK(static_cast<std::size_t>(x.global.size()) == global_width(2, 2));
  CHECK(g.adjacency.isApprox(g.adjacency.transpose()));
}

TEST_CASE("state encoding edge cases") {
  EnvConfig cfg;
  const auto palette = RatePalette::evenly_spaced(2);
  EnvState s;
  s.map = MapGraph::from_frames({make_frame(0, {1, 2}), make_frame(1, {2, 3})});
  s.history = RateHistory(3, 1);
  s.rate = 80.0;
  s.slot = 4;

  SUBCASE("no candidates") {
    const auto x = encode_state(s, zero_latent(3), cfg, palette);
    CHECK(x.graph->candidate_count() == 0);
    CHECK(static_cast<std::size_t>(x.global.size()) == global_width(3, 3));
    CHECK(x.global.allFinite());
  }

  SUBCASE("structurally identical candidates get identical rows") {
    s.recent_frames = {make_frame(7, {2, 9, 10}, 4), make_frame(8, {2, 9, 10}, 4)};
    const auto x = encode_state(s, zero_latent(1), cfg, palette);
    REQUIRE(x.graph->candidate_count() == 2);
    CHECK(x.graph->features.row(2) == x.graph->features.row(3));
  }

  CHECK_THROWS_AS(encode_state(s, LatentFeatures{Eigen::VectorXd::Zero(2), Eigen::VectorXd::Ones(3)}, cfg, palette),
                  std::invalid_argument);
}

TEST_CASE("select_action respects the slot plan") {
  EnvState s;
  s.map = MapGraph::from_frames({make_frame(0, {1, 2}), make_frame(1, {2, 3}), make_frame(2, {3, 4})});
  s.recent_frames = {make_frame(3, {4, 5}, 1), make_frame(4, {5, 6}, 1), make_frame(5, {6, 7}, 1)};
  s.history = RateHistory(1, 0);
  s.rate = 20.0;  // budget 2
  s.slot = 1;
  EnvConfig cfg;
  cfg.v_max = 4;
  auto g = build_state_graph(s, cfg, RatePalette::evenly_spaced(2));
  REQUIRE(g->plan.upload == 2);
  REQUIRE(g->plan.evict == 1);

  Eigen::VectorXd scores(6);
  scores << 0.5, -1.0, 0.2, 0.0, 9.0, 0.3;
  Action a = select_action(*g, scores);
  CHECK(a.upload == std::vector<FrameId>{4, 5});
  CHECK(a.evict == std::vector<FrameId>{1});

  // a shift of every score changes nothing
  CHECK(select_action(*g, (scores.array() + 3.7).matrix()) == a);

  // ties go to the lower id
  CHECK(select_action(*g, Eigen::VectorXd::Zero(6)).upload == std::vector<FrameId>{3, 4});
  CHECK(select_action(*g, Eigen::VectorXd::Zero(6)).evict == std::vector<FrameId>{0});

  CHECK_THROWS_AS(select_action(*g, Eigen::VectorXd::Zero(5)), std::invalid_argument);
}

TEST_CASE("act over live states") {
  auto env = testing::small_env(21, 12, 10, 1, 4);
  env->reset();
  Rng rng(3);
  ActorNet actor(global_width(4, 2), small_shape(), rng);
  Rng noise_a(9), noise_b(9);
  for (int k = 0; k < 6 && !env->done(); ++k) {
    const auto s = env->state();
    const auto x = encode_state(*s, zero_latent(2), env->model().config(), env->model().palette());
    const auto plan = env->model().plan(*s);
    const Action a = act(actor, x, 0.0, noise_a);
    CHECK(act(actor, x, 0.0, noise_b) == a);
    CHECK(a.upload.size() == plan.upload);
    CHECK(a.evict.size() == plan.evict);
    CHECK(env->model().check(*s, a).violation == Violation::None);
    if (plan.upload == x.graph->candidate_count()) CHECK(a.upload.size() == x.graph->candidate_count());
    const Action noisy = act(actor, x, 0.5, rng);
    CHECK(env->model().check(*s, noisy).violation == Violation::None);
    env->step(a);
  }
}

TEST_CASE("critic loss") {
  auto env = testing::small_env(4, 10, 12, 1, 4);
  auto batch = transitions(*env, 10, 2);
  REQUIRE(batch.size() == 10);
  Rng rng(17);
  ActorCritic ac(global_width(4, 2), small_shape(), 1e-3, 1e-3, rng);

  SUBCASE("a zero critic gives the mean squared reward") {
    zero_output_layer(ac.critic.head());
    double ms = 0.0;
    for (const auto& t : batch) ms += t.reward * t.reward;
    CHECK(critic_loss(ac, batch, 0.0) == doctest::Approx(ms / 10.0).epsilon(1e-12));
  }

  SUBCASE("a batch of copies equals the single tuple") {
    std::vector<Transition> copies(5, batch[3]);
    CHECK(critic_loss(ac, copies, 0.5) == doctest::Approx(critic_loss(ac, std::span(batch).subspan(3, 1), 0.5)));
  }

  SUBCASE("gradients match finite differences with frozen targets") {
    auto params = ac.critic.parameters();
    nn::zero_grad(params);
    critic_loss(ac, batch, 0.9);
    const double err = testing::worst_gradient_error(params, [&] { return critic_loss(ac, batch, 0.9); });
    CHECK(err < 1e-4);
  }

  CHECK_THROWS_AS(critic_loss(ac, std::span<const Transition>{}, 0.9), std::invalid_argument);
}

TEST_CASE("deterministic policy gradient") {
  SUBCASE("one-parameter toy matches the hand derivative") {
    ToyActor actor;
    ToyCritic critic;
    const std::vector<double> xs{0.5, -1.0, 2.0};
    const double q = dpg_accumulate(actor, critic, std::span<const double>(xs));
    CHECK(q == doctest::Approx(toy_mean_q(actor.theta, xs)));
    double hand = 0.0;
    for (double x : xs) {
      const double p = 1.0 / (1.0 + std::exp(-actor.theta * x));
      hand += -(-2.0 * (p - 0.8)) * p * (1.0 - p) * x / 3.0;
    }
    CHECK(actor.grad == doctest::Approx(hand).epsilon(1e-12));
    const double eps = 1e-6;
    const double fd = (toy_mean_q(actor.theta + eps, xs) - toy_mean_q(actor.theta - eps, xs)) / (2 * eps);
    CHECK(actor.grad == doctest::Approx(-fd).epsilon(1e-6));
  }

  auto env = testing::small_env(8, 10, 12, 1, 4);
  auto batch = transitions(*env, 10, 2);
  Rng rng(23);

  SUBCASE("a constant critic leaves the actor gradient at zero") {
    ActorCritic ac(global_width(4, 2), small_shape(), 1e-3, 1e-3, rng);
    zero_output_layer(ac.critic.head());
    ac.critic.head().layers().back().bias().value.setConstant(2.5);
    CHECK(actor_update(ac, batch) == 0.0);
  }

  SUBCASE("small steps do not lower the policy value") {
    ActorCritic ac(global_width(4, 2), small_shape(), 1e-5, 1e-3, rng);
    double prev = mean_policy_value(ac, batch);
    int drops = 0;
    for (int i = 0; i < 20; ++i) {
      actor_update(ac, batch);
      const double now = mean_policy_value(ac, batch);
      if (now < prev - 1e-12) ++drops;
      prev = now;
    }
    CHECK(drops == 0);
  }
}

TEST_CASE("reward normalizer") {
  RewardNormalizer n;
  CHECK(n.normalize(3.0) == 3.0);
  for (double r : {1.0, 2.0, 3.0, 4.0}) n.observe(r);
  const double sd = std::sqrt(5.0 / 3.0);
  CHECK(n.normalize(2.5) == doctest::Approx(0.0));
  CHECK(n.normalize(4.0) == doctest::Approx(1.5 / sd));
}

TEST_CASE("amm_run") {
  const AmmConfig base = small_amm();

  SUBCASE("same seed, same records") {
    auto e1 = testing::small_env(5, 10, 15, 2, 4);
    auto e2 = testing::small_env(5, 10, 15, 2, 4);
    const auto r1 = amm_run(*e1, base, 11);
    const auto r2 = amm_run(*e2, base, 11);
    REQUIRE(r1.records.size() == 30);
    REQUIRE(r1.records.size() == r2.records.size());
    for (std::size_t i = 0; i < r1.records.size(); ++i) {
      CHECK(r1.records[i].uploaded == r2.records[i].uploaded);
      CHECK(r1.records[i].upsilon == r2.records[i].upsilon);
    }
    for (const auto& rec : r1.records) {
      CHECK(rec.uploaded <= rec.budget);
      CHECK(rec.map_size <= EnvConfig{}.v_max);
    }
  }

  SUBCASE("blend accounting") {
    AmmConfig c = base;
    c.min_real = c.batch;
    auto env = testing::small_env(6, 10, 15, 2, 4);
    const auto r = amm_run(*env, c, 3);
    CHECK(r.stats.twin_updates >= 1);
    CHECK(r.stats.artificial > 0);
    CHECK(r.stats.real + r.stats.artificial == r.stats.batches * c.batch);
    CHECK(r.stats.real - r.stats.backfilled == r.stats.batches * c.real_per_batch);
  }

  SUBCASE("an all-real batch never draws artificial tuples") {
    AmmConfig c = base;
    c.real_per_batch = c.batch;
    auto env = testing::small_env(6, 10, 15, 2, 4);
    const auto r = amm_run(*env, c, 3);
    CHECK(r.stats.artificial == 0);
    CHECK(r.stats.backfilled == 0);
    CHECK(r.stats.batches > 0);
  }

  SUBCASE("a cadence longer than the run trains the twin at most once") {
    AmmConfig c = base;
    c.udt.cadence = 1000;
    auto env = testing::small_env(6, 10, 15, 2, 4);
    CHECK(amm_run(*env, c, 3).stats.twin_updates <= 1);
  }

  AmmConfig bad = base;
  bad.real_per_batch = bad.batch + 1;
  CHECK_THROWS_AS(bad.validate(), std::invalid_argument);
}

TEST_CASE("the learner is not worse than LFF on a small stationary channel") {
  AmmConfig c;
  c.udt = small_amm().udt;
  c.udt.cadence = 25;
  double amm = 0.0, lff = 0.0;
  for (std::uint64_t seed = 1; seed <= 5; ++seed) {
    auto tail_mean = [](const std::vector<SlotRecord>& recs) {
      const std::size_t from = recs.size() - recs.size() / 5;
      double sum = 0.0;
      for (std::size_t i = from; i < recs.size(); ++i) sum += recs[i].reward;
      return sum / static_cast<double>(recs.size() - from);
    };
    auto e1 = testing::small_env(seed, 10, 100, 1, 4, {two_state_matrix(0.5)});
    amm += tail_mean(amm_run(*e1, c, seed).records);
    auto e2 = testing::small_env(seed, 10, 100, 1, 4, {two_state_matrix(0.5)});
    auto baseline = make_baseline("lff", PoseInfoMatrix{});
    lff += tail_mean(run_episode(*e2, *baseline));
  }
  CHECK(amm >= lff);
}
