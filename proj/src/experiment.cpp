#include "dtmap/experiment.hpp"

#include <algorithm>
#include <atomic>
#include <cctype>
#include <charconv>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <istream>
#include <mutex>
#include <numeric>
#include <ostream>
#include <sstream>
#include <thread>

namespace dtmap {

namespace {

const std::vector<std::pair<std::string, std::string>>& defaults() {
  static const std::vector<std::pair<std::string, std::string>> d = {
      {"experiment", "default"},
      {"scheme", "lff"},
      {"seeds", "1"},
      {"out", "out"},
      {"frames", ""},
      {"workers", "0"},
      // map and uplink
      {"alpha", "5"},
      {"d_req", "0.5"},
      {"v_max", "25"},
      {"F", "60"},
      {"K", "50"},
      {"intervals", "3"},
      {"tau", "8"},
      {"gamma", "0.9"},
      {"penalty", "auto"},
      {"penalty_scale", "10"},
      // channel
      {"N", "2"},
      {"palette", ""},
      {"regimes", "3"},
      {"high_ratio", ""},
      {"switch_rate", "0.3"},
      // synthetic frames
      {"synth_universe", "2000"},
      {"synth_window", "150"},
      {"synth_stride", "12"},
      {"synth_jitter", "0.05"},
      // twin
      {"Z", "8"},
      {"W", "50"},
      {"J", "5"},
      {"udt_epochs", "20"},
      {"udt_lr", "0.003"},
      {"kl_weight", "1"},
      {"udt_batch", "32"},
      {"recurrent", "32"},
      {"cell", "lstm"},
      {"real_capacity", "5000"},
      {"artificial_capacity", "10000"},
      // learner
      {"batch", "32"},
      {"real_per_batch", "16"},
      {"min_real", "8"},
      {"updates_per_slot", "1"},
      {"noise_start", "0.3"},
      {"noise_end", "0.05"},
      {"actor_lr", "0.01"},
      {"critic_lr", "0.001"},
      {"soft_update", "0.01"},
      {"gcn1", "32"},
      {"gcn2", "16"},
      // transition-matrix study
      {"udt_eval_states", "2,3,4"},
      {"udt_eval_slots", "1000"},
      {"udt_eval_intervals", "15"},
      {"udt_eval_epochs", "10"},
  };
  return d;
}

std::string trim(std::string_view s) {
  std::size_t b = 0, e = s.size();
  while (b < e && std::isspace(static_cast<unsigned char>(s[b]))) ++b;
  while (e > b && std::isspace(static_cast<unsigned char>(s[e - 1]))) --e;
  return std::string(s.substr(b, e - b));
}

std::vector<std::string> split(const std::string& s, char sep) {
  std::vector<std::string> out;
  std::string cur;
  std::istringstream in(s);
  while (std::getline(in, cur, sep)) {
    cur = trim(cur);
    if (!cur.empty()) out.push_back(cur);
  }
  return out;
}

double parse_double(const std::string& key, const std::string& v) {
  double d = 0.0;
  const auto* end = v.data() + v.size();
  auto [p, ec] = std::from_chars(v.data(), end, d);
  if (v.empty() || ec != std::errc{} || p != end || !std::isfinite(d))
    throw ConfigError("config key '" + key + "': expected a number, got '" + v + "'");
  return d;
}

std::uint64_t parse_uint(const std::string& key, const std::string& v) {
  std::uint64_t u = 0;
  const auto* end = v.data() + v.size();
  auto [p, ec] = std::from_chars(v.data(), end, u);
  if (v.empty() || ec != std::errc{} || p != end)
    throw ConfigError("config key '" + key + "': expected a non-negative integer, got '" + v + "'");
  return u;
}

std::string fmt(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.10g", v);
  return buf;
}

}  // namespace

ExperimentConfig::ExperimentConfig() {
  for (const auto& [k, v] : defaults()) values_[k] = v;
}

const std::vector<std::string>& ExperimentConfig::known_keys() {
  static const std::vector<std::string> keys = [] {
    std::vector<std::string> k;
    for (const auto& kv : defaults()) k.push_back(kv.first);
    return k;
  }();
  return keys;
}

ExperimentConfig ExperimentConfig::parse(std::istream& in) {
  ExperimentConfig c;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (const auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
    const std::string t = trim(line);
    if (t.empty()) continue;
    const auto eq = t.find('=');
    if (eq == std::string::npos) throw ConfigError("config line " + std::to_string(lineno) + ": expected 'key = value'");
    c.set(trim(std::string_view(t).substr(0, eq)), trim(std::string_view(t).substr(eq + 1)));
  }
  return c;
}

ExperimentConfig ExperimentConfig::load(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config file " + path.string());
  return parse(in);
}

void ExperimentConfig::set(const std::string& key, const std::string& value) {
  auto it = values_.find(key);
  if (it == values_.end()) throw ConfigError("unknown config key '" + key + "'");
  it->second = value;
}

void ExperimentConfig::apply_environment() {
  for (const auto& key : known_keys()) {
    std::string var = "DTMAP_";
    for (char ch : key) var += static_cast<char>(std::toupper(static_cast<unsigned char>(ch)));
    if (const char* v = std::getenv(var.c_str())) set(key, v);
  }
}

const std::string& ExperimentConfig::get(const std::string& key) const {
  auto it = values_.find(key);
  if (it == values_.end()) throw ConfigError("unknown config key '" + key + "'");
  return it->second;
}

double ExperimentConfig::number(const std::string& key) const { return parse_double(key, get(key)); }

std::size_t ExperimentConfig::count(const std::string& key) const {
  return static_cast<std::size_t>(parse_uint(key, get(key)));
}

std::vector<std::string> ExperimentConfig::list(const std::string& key) const { return split(get(key), ','); }

std::vector<double> ExperimentConfig::numbers(const std::string& key) const {
  std::vector<double> out;
  for (const auto& s : list(key)) out.push_back(parse_double(key, s));
  return out;
}

std::vector<std::uint64_t> ExperimentConfig::seeds() const {
  std::vector<std::uint64_t> out;
  for (const auto& item : list("seeds")) {
    const auto dots = item.find("..");
    if (dots == std::string::npos) {
      out.push_back(parse_uint("seeds", item));
      continue;
    }
    const auto lo = parse_uint("seeds", trim(item.substr(0, dots)));
    const auto hi = parse_uint("seeds", trim(item.substr(dots + 2)));
    if (hi < lo) throw ConfigError("config key 'seeds': empty range '" + item + "'");
    for (auto s = lo; s <= hi; ++s) out.push_back(s);
  }
  if (out.empty()) throw ConfigError("config key 'seeds': no seeds given");
  return out;
}

std::string ExperimentConfig::resolved() const {
  std::string out;
  for (const auto& [k, v] : values_) out += k + " = " + v + "\n";
  return out;
}

void ExperimentConfig::validate() const {
  for (const auto& s : list("scheme"))
    if (s != "lff" && s != "pu" && s != "adapt" && s != "mbrl") throw ConfigError("config key 'scheme': unknown scheme '" + s + "'");
  if (list("scheme").empty()) throw ConfigError("config key 'scheme': no scheme given");
  seeds();
  const auto cell = get("cell");
  if (cell != "lstm" && cell != "gru") throw ConfigError("config key 'cell': expected lstm or gru");
  if (get("penalty") != "auto") number("penalty");
  try {
    env_config(*this).validate();
    timeline(*this).validate();
    amm_config(*this).validate();
    palette(*this);
    regime_model(*this, 0, count("N")).validate();
    for (double n : numbers("udt_eval_states"))
      if (n < 2 || n != std::floor(n)) throw ConfigError("config key 'udt_eval_states': need integers >= 2");
    count("udt_eval_slots");
    count("udt_eval_intervals");
    count("udt_eval_epochs");
    count("workers");
  } catch (const ConfigError&) {
    throw;
  } catch (const std::exception& e) {
    throw ConfigError(e.what());
  }
}

std::vector<ExperimentConfig> expand_sweep(const ExperimentConfig& base, const std::string& sweep) {
  const auto eq = sweep.find('=');
  const auto dots = sweep.find("..");
  const auto colon = sweep.rfind(':');
  if (eq == std::string::npos || dots == std::string::npos || colon == std::string::npos || dots < eq || colon < dots)
    throw ConfigError("sweep '" + sweep + "': expected key=a..b:step");
  const std::string key = trim(sweep.substr(0, eq));
  base.get(key);  // rejects unknown keys
  const double a = parse_double(key, trim(sweep.substr(eq + 1, dots - eq - 1)));
  const double b = parse_double(key, trim(sweep.substr(dots + 2, colon - dots - 2)));
  const double step = parse_double(key, trim(sweep.substr(colon + 1)));
  if (!(step > 0.0) || b < a) throw ConfigError("sweep '" + sweep + "': need a <= b and step > 0");
  std::vector<ExperimentConfig> out;
  const auto n = static_cast<std::size_t>(std::floor((b - a) / step + 1e-9)) + 1;
  for (std::size_t i = 0; i < n; ++i) {
    ExperimentConfig c = base;
    const std::string v = fmt(a + static_cast<double>(i) * step);
    c.set(key, v);
    c.set("experiment", base.get("experiment") + "-" + key + v);
    out.push_back(std::move(c));
  }
  return out;
}

EnvConfig env_config(const ExperimentConfig& c) {
  EnvConfig e;
  e.alpha = c.number("alpha");
  e.d_req = c.number("d_req");
  e.v_max = c.count("v_max");
  e.gamma = c.number("gamma");
  if (c.get("penalty") != "auto") e.penalty = c.number("penalty");
  e.penalty_scale = c.number("penalty_scale");
  return e;
}

Timeline timeline(const ExperimentConfig& c) {
  Timeline t;
  t.frames_per_slot = c.count("F");
  t.slots_per_interval = c.count("K");
  t.num_intervals = c.count("intervals");
  t.tau = c.count("tau");
  return t;
}

AmmConfig amm_config(const ExperimentConfig& c) {
  AmmConfig a;
  a.batch = c.count("batch");
  a.real_per_batch = c.count("real_per_batch");
  a.min_real = c.count("min_real");
  a.updates_per_slot = c.count("updates_per_slot");
  a.gamma = c.number("gamma");
  a.soft_update = c.number("soft_update");
  a.noise_start = c.number("noise_start");
  a.noise_end = c.number("noise_end");
  a.actor_lr = c.number("actor_lr");
  a.critic_lr = c.number("critic_lr");
  a.shape.gcn1 = c.count("gcn1");
  a.shape.gcn2 = c.count("gcn2");
  a.udt.model.states = c.count("N");
  a.udt.model.tau = c.count("tau");
  a.udt.model.latent = c.count("Z");
  a.udt.model.recurrent = c.count("recurrent");
  a.udt.model.cell = c.get("cell") == "gru" ? nn::CellType::Gru : nn::CellType::Lstm;
  a.udt.model.learning_rate = c.number("udt_lr");
  a.udt.model.kl_weight = c.number("kl_weight");
  a.udt.model.batch = c.count("udt_batch");
  a.udt.model.epochs = c.count("udt_epochs");
  a.udt.samples_per_real = c.count("J");
  a.udt.cadence = c.count("W");
  a.udt.real_capacity = c.count("real_capacity");
  a.udt.artificial_capacity = c.count("artificial_capacity");
  return a;
}

RatePalette palette(const ExperimentConfig& c) {
  const std::size_t n = c.count("N");
  if (c.get("palette").empty()) return RatePalette::evenly_spaced(n);
  auto rates = c.numbers("palette");
  if (rates.size() != n) throw ConfigError("config key 'palette': expected " + std::to_string(n) + " rates");
  try {
    return RatePalette(std::move(rates));
  } catch (const std::invalid_argument& e) {
    throw ConfigError(std::string("config key 'palette': ") + e.what());
  }
}

RegimeModel regime_model(const ExperimentConfig& c, std::uint64_t seed, std::size_t states) {
  std::vector<TransitionMatrix> mats;
  if (!c.get("high_ratio").empty()) {
    if (states != 2) throw ConfigError("config key 'high_ratio' requires N = 2");
    for (double r : c.numbers("high_ratio")) mats.push_back(two_state_matrix(r, c.number("switch_rate")));
  } else {
    const std::size_t count = c.count("regimes");
    if (count == 0) throw ConfigError("config key 'regimes' must be positive");
    Rng rng = make_rng(seed, Stream::Regimes);
    for (std::size_t i = 0; i < count; ++i) mats.push_back(random_transition_matrix(states, rng));
  }
  return RegimeModel::uniform(std::move(mats));
}

std::unique_ptr<Environment> make_environment(const ExperimentConfig& c, std::uint64_t seed) {
  std::unique_ptr<FrameSource> frames;
  if (!c.get("frames").empty()) {
    frames = std::make_unique<FileFrameSource>(std::filesystem::path(c.get("frames")));
  } else {
    SynthParams p;
    p.universe = c.count("synth_universe");
    p.window = c.count("synth_window");
    p.stride = c.count("synth_stride");
    p.jitter = c.number("synth_jitter");
    frames = std::make_unique<SyntheticFrameSource>(p, make_rng(seed, Stream::Frames));
  }
  ChannelSimulator channel(palette(c), regime_model(c, seed, c.count("N")), make_rng(seed, Stream::Channel));
  return std::make_unique<Environment>(env_config(c), timeline(c), std::move(frames), std::move(channel));
}

RunOutput run_single(const ExperimentConfig& c, const std::string& scheme, std::uint64_t seed,
                     std::vector<SlotRecord>* partial) {
  auto env = make_environment(c, seed);
  std::vector<SlotRecord> local;
  std::vector<SlotRecord>& sink_to = partial ? *partial : local;
  RecordSink sink = [&](const SlotRecord& r) { sink_to.push_back(r); };

  RunOutput out;
  if (scheme == "mbrl") {
    amm_run(*env, amm_config(c), seed, sink);
  } else {
    env->reset();
    auto ctl = make_baseline(scheme, env_config(c).pi);
    run_episode(*env, *ctl, sink);
  }
  out.records = sink_to;

  RunSummary& s = out.summary;
  s.run_id = scheme + "-s" + std::to_string(seed);
  s.seed = seed;
  s.scheme = scheme;
  s.slots = out.records.size();
  s.complete = true;
  if (!out.records.empty()) {
    double sum = 0.0, last = 0.0;
    std::size_t last_n = 0;
    const std::size_t final_interval = out.records.back().interval;
    for (const auto& r : out.records) {
      sum += r.upsilon;
      if (r.interval == final_interval) {
        last += r.upsilon;
        ++last_n;
      }
    }
    s.mean_upsilon = sum / static_cast<double>(out.records.size());
    s.final_interval_upsilon = last / static_cast<double>(last_n);
    s.discounted_return = out.records.back().cum_return;
  }
  return out;
}

void write_slots_csv(std::ostream& out, const std::vector<RunOutput>& runs) {
  out << "run_id,seed,scheme,interval,slot,rate_mbps,budget,uploaded,evicted,map_size,upsilon_k,reward,"
         "cum_discounted_return\n";
  for (const auto& run : runs) {
    for (const auto& r : run.records) {
      out << run.summary.run_id << ',' << run.summary.seed << ',' << run.summary.scheme << ',' << r.interval << ','
          << r.slot << ',' << fmt(r.rate) << ',' << r.budget << ',' << r.uploaded << ',' << r.evicted << ','
          << r.map_size << ',' << fmt(r.upsilon) << ',' << fmt(r.reward) << ',' << fmt(r.cum_return) << '\n';
    }
  }
}

void write_summary_csv(std::ostream& out, const std::vector<RunSummary>& runs) {
  out << "run_id,seed,scheme,slots,mean_upsilon,final_interval_upsilon,discounted_return,complete\n";
  for (const auto& s : runs)
    out << s.run_id << ',' << s.seed << ',' << s.scheme << ',' << s.slots << ',' << fmt(s.mean_upsilon) << ','
        << fmt(s.final_interval_upsilon) << ',' << fmt(s.discounted_return) << ',' << (s.complete ? 1 : 0) << '\n';
}

namespace {

std::size_t worker_count(const ExperimentConfig& c, std::size_t jobs) {
  std::size_t w = c.count("workers");
  if (w == 0) w = std::max(1u, std::thread::hardware_concurrency());
  return std::max<std::size_t>(1, std::min(w, jobs));
}

// Runs fn(i) for i in [0, jobs) on at most `workers` threads.
template <class Fn>
void parallel_for(std::size_t jobs, std::size_t workers, Fn&& fn) {
  std::atomic<std::size_t> next{0};
  auto loop = [&] {
    for (std::size_t i = next++; i < jobs; i = next++) fn(i);
  };
  if (workers <= 1) {
    loop();
    return;
  }
  std::vector<std::thread> pool;
  for (std::size_t t = 0; t < workers; ++t) pool.emplace_back(loop);
  for (auto& th : pool) th.join();
}

void write_file(const std::filesystem::path& p, const std::string& content) {
  std::filesystem::create_directories(p.parent_path());
  std::ofstream out(p, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + p.string());
  out << content;
}

}  // namespace

std::vector<RunSummary> run_experiment(const ExperimentConfig& c) {
  c.validate();
  const auto schemes = c.list("scheme");
  const auto seeds = c.seeds();
  const std::filesystem::path dir = std::filesystem::path(c.get("out")) / c.get("experiment");

  const std::size_t jobs = schemes.size() * seeds.size();
  std::vector<RunOutput> results(jobs);
  parallel_for(jobs, worker_count(c, jobs), [&](std::size_t i) {
    const auto seed = seeds[i / schemes.size()];
    const auto& scheme = schemes[i % schemes.size()];
    std::vector<SlotRecord> partial;
    try {
      results[i] = run_single(c, scheme, seed, &partial);
    } catch (const std::exception& e) {
      RunOutput& r = results[i];
      r.records = std::move(partial);
      r.summary.run_id = scheme + "-s" + std::to_string(seed);
      r.summary.seed = seed;
      r.summary.scheme = scheme;
      r.summary.slots = r.records.size();
      r.summary.error = e.what();
    }
  });

  write_file(dir / "config.resolved", c.resolved());
  std::vector<RunSummary> summaries;
  std::string failures;
  for (std::size_t si = 0; si < seeds.size(); ++si) {
    std::vector<RunOutput> per_seed(results.begin() + static_cast<std::ptrdiff_t>(si * schemes.size()),
                                    results.begin() + static_cast<std::ptrdiff_t>((si + 1) * schemes.size()));
    std::ostringstream csv;
    write_slots_csv(csv, per_seed);
    write_file(dir / std::to_string(seeds[si]) / "slots.csv", csv.str());
    for (const auto& r : per_seed) {
      summaries.push_back(r.summary);
      if (!r.summary.error.empty()) failures += r.summary.run_id + ": " + r.summary.error + "\n";
    }
  }
  std::ostringstream sum;
  write_summary_csv(sum, summaries);
  write_file(dir / "summary.csv", sum.str());
  if (!failures.empty()) throw std::runtime_error("run(s) failed:\n" + failures);
  return summaries;
}

// ---- Transition-matrix study ---------------------------------------------------

double mean_abs_error(const TransitionMatrix& a, const TransitionMatrix& b) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) throw std::invalid_argument("mean_abs_error: shape mismatch");
  return (a - b).cwiseAbs().mean();
}

PointPredictor::PointPredictor(std::size_t states, std::size_t tau, std::size_t hidden, nn::CellType cell, double lr,
                               Rng& init)
    : states_(states), tau_(tau), rnn_(cell, states, hidden, init), out_(hidden, states, init), adam_(lr) {}

nn::Matrix PointPredictor::logits(std::span<const std::vector<std::size_t>> histories) {
  const auto B = static_cast<Eigen::Index>(histories.size());
  std::vector<nn::Matrix> seq(tau_ + 1, nn::Matrix::Zero(B, static_cast<Eigen::Index>(states_)));
  for (Eigen::Index b = 0; b < B; ++b) {
    const auto& h = histories[static_cast<std::size_t>(b)];
    if (h.size() != tau_ + 1) throw std::invalid_argument("PointPredictor: history window has the wrong length");
    for (std::size_t t = 0; t <= tau_; ++t) seq[t](b, static_cast<Eigen::Index>(h[t])) = 1.0;
  }
  return out_.forward(rnn_.forward(seq));
}

void PointPredictor::train(std::span<const RateSample> samples, std::size_t epochs, std::size_t batch, Rng& rng) {
  std::vector<std::size_t> order(samples.size());
  std::iota(order.begin(), order.end(), 0);
  auto params = rnn_.parameters();
  for (auto* p : out_.parameters()) params.push_back(p);
  std::vector<std::vector<std::size_t>> hist;
  for (std::size_t e = 0; e < epochs; ++e) {
    rng.shuffle(order);
    for (std::size_t start = 0; start < order.size(); start += batch) {
      const std::size_t end = std::min(order.size(), start + batch);
      hist.clear();
      for (std::size_t i = start; i < end; ++i) hist.push_back(samples[order[i]].history);
      nn::Matrix d = nn::softmax_rows(logits(hist));
      for (std::size_t i = start; i < end; ++i)
        d(static_cast<Eigen::Index>(i - start), static_cast<Eigen::Index>(samples[order[i]].next)) -= 1.0;
      d /= static_cast<double>(end - start);
      rnn_.backward(out_.backward(d));
      adam_.step(params);
    }
  }
}

std::size_t PointPredictor::predict(std::span<const std::size_t> history) {
  const std::vector<std::size_t> one(history.begin(), history.end());
  Eigen::Index arg = 0;
  logits(std::span(&one, 1)).row(0).maxCoeff(&arg);
  return static_cast<std::size_t>(arg);
}

TransitionMatrix PointPredictor::implied_transition_matrix(std::span<const std::vector<std::size_t>> contexts) {
  const auto N = static_cast<Eigen::Index>(states_);
  TransitionMatrix p = TransitionMatrix::Zero(N, N);
  std::vector<std::size_t> counts(states_, 0);
  for (const auto& h : contexts) {
    p(static_cast<Eigen::Index>(h.back()), static_cast<Eigen::Index>(predict(h))) += 1.0;
    ++counts[h.back()];
  }
  for (std::size_t s = 0; s < states_; ++s) {
    const auto r = static_cast<Eigen::Index>(s);
    if (counts[s] > 0) {
      p.row(r) /= static_cast<double>(counts[s]);
    } else {
      const std::vector<std::size_t> constant(tau_ + 1, s);
      p(r, static_cast<Eigen::Index>(predict(constant))) = 1.0;
    }
  }
  return p;
}

std::vector<UdtEvalRow> udt_eval_single(const ExperimentConfig& c, std::size_t states, std::uint64_t seed) {
  const std::size_t tau = c.count("tau");
  const std::size_t slots = c.count("udt_eval_slots");
  const std::size_t intervals = c.count("udt_eval_intervals");
  const std::size_t epochs = c.count("udt_eval_epochs");
  const std::size_t capacity = c.count("real_capacity");
  if (slots <= tau + 1) throw ConfigError("config key 'udt_eval_slots' must exceed tau + 1");

  RegimeModel regimes = regime_model(c, seed, states);
  Rng channel = make_rng(seed, Stream::Channel);
  Rng init = make_rng(seed, Stream::Networks);
  Rng train_rng = make_rng(seed, Stream::Twin);

  AmmConfig a = amm_config(c);
  ChannelModelConfig mc = a.udt.model;
  mc.states = states;
  mc.epochs = epochs;
  ChannelModel model(mc, init);
  PointPredictor point(states, tau, mc.recurrent, mc.cell, mc.learning_rate, init);

  std::vector<std::size_t> trace{channel.index(states)};
  std::deque<RateSample> store;
  TransitionMatrix markov;
  std::vector<UdtEvalRow> rows;

  for (std::size_t i = 0; i < intervals; ++i) {
    const TransitionMatrix truth = begin_interval(regimes, channel);
    const std::size_t begin = trace.size();
    for (std::size_t k = 0; k < slots; ++k) trace.push_back(step_rate(trace.back(), truth, channel));

    // Windows whose successor falls inside this interval.
    std::vector<std::vector<std::size_t>> contexts;
    for (std::size_t next = std::max(begin, tau + 1); next < trace.size(); ++next) {
      RateSample s{std::vector<std::size_t>(trace.begin() + static_cast<std::ptrdiff_t>(next - tau - 1),
                                            trace.begin() + static_cast<std::ptrdiff_t>(next)),
                   trace[next]};
      contexts.push_back(s.history);
      store.push_back(std::move(s));
      if (store.size() > capacity) store.pop_front();
    }
    if (i == 0) {
      markov = empirical_transition_matrix(std::span(trace).subspan(begin - 1), states);
    }
    const std::vector<RateSample> samples(store.begin(), store.end());
    train_channel_model(model, samples, train_rng);
    point.train(samples, epochs, mc.batch, train_rng);

    rows.push_back({"udt", states, i, mean_abs_error(model.implied_transition_matrix(contexts), truth)});
    rows.push_back({"lstm_point", states, i, mean_abs_error(point.implied_transition_matrix(contexts), truth)});
    rows.push_back({"markov_fit", states, i, mean_abs_error(markov, truth)});
  }
  return rows;
}

std::vector<UdtEvalRow> run_udt_eval(const ExperimentConfig& c) {
  c.validate();
  std::vector<std::size_t> sizes;
  for (double n : c.numbers("udt_eval_states")) sizes.push_back(static_cast<std::size_t>(n));
  const auto seeds = c.seeds();
  const std::filesystem::path dir = std::filesystem::path(c.get("out")) / c.get("experiment");

  const std::size_t jobs = sizes.size() * seeds.size();
  std::vector<std::vector<UdtEvalRow>> results(jobs);
  std::vector<std::string> errors(jobs);
  parallel_for(jobs, worker_count(c, jobs), [&](std::size_t i) {
    try {
      results[i] = udt_eval_single(c, sizes[i % sizes.size()], seeds[i / sizes.size()]);
    } catch (const std::exception& e) {
      errors[i] = e.what();
    }
  });

  write_file(dir / "config.resolved", c.resolved());
  std::vector<UdtEvalRow> all;
  for (std::size_t si = 0; si < seeds.size(); ++si) {
    std::ostringstream csv;
    csv << "method,N,interval,matrix_error\n";
    for (std::size_t ni = 0; ni < sizes.size(); ++ni) {
      for (const auto& r : results[si * sizes.size() + ni]) {
        csv << r.method << ',' << r.states << ',' << r.interval << ',' << fmt(r.matrix_error) << '\n';
        all.push_back(r);
      }
    }
    write_file(dir / std::to_string(seeds[si]) / "udt_eval.csv", csv.str());
  }

  std::ostringstream sum;
  sum << "method,N,mean_matrix_error\n";
  for (const char* method : {"udt", "lstm_point", "markov_fit"}) {
    for (std::size_t n : sizes) {
      double total = 0.0;
      std::size_t cnt = 0;
      for (const auto& r : all)
        if (r.method == method && r.states == n) {
          total += r.matrix_error;
          ++cnt;
        }
      if (cnt) sum << method << ',' << n << ',' << fmt(total / static_cast<double>(cnt)) << '\n';
    }
  }
  write_file(dir / "udt_summary.csv", sum.str());

  std::string failures;
  for (std::size_t i = 0; i < jobs; ++i)
    if (!errors[i].empty()) failures += errors[i] + "\n";
  if (!failures.empty()) throw std::runtime_error("udt evaluation failed:\n" + failures);
  return all;
}

}  // namespace dtmap
