#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <map>
#include <memory>
#include <stdexcept>
#include <string>
#include <vector>

#include "dtmap/env.hpp"
#include "dtmap/mbrl.hpp"
#include "dtmap/policies.hpp"
#include "dtmap/udt.hpp"

namespace dtmap {

/// Bad key, bad value or an unusable combination of settings.
class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Flat `key = value` settings with defaults for every known key.
class ExperimentConfig {
 public:
  ExperimentConfig();  // all defaults

  /// Parses `key = value` lines; `#` starts a comment. Throws ConfigError naming
  /// the key (or line) at fault.
  static ExperimentConfig parse(std::istream& in);
  static ExperimentConfig load(const std::filesystem::path& path);

  /// Throws ConfigError for an unknown key.
  void set(const std::string& key, const std::string& value);
  /// Applies DTMAP_<KEY> variables from the process environment.
  void apply_environment();

  const std::string& get(const std::string& key) const;
  double number(const std::string& key) const;
  std::size_t count(const std::string& key) const;
  std::vector<std::string> list(const std::string& key) const;
  std::vector<double> numbers(const std::string& key) const;
  /// Comma list whose items may be ranges `a..b`.
  std::vector<std::uint64_t> seeds() const;

  /// Sorted `key = value` lines.
  std::string resolved() const;
  static const std::vector<std::string>& known_keys();

  /// Checks every value parses; throws ConfigError otherwise.
  void validate() const;

 private:
  std::map<std::string, std::string> values_;
};

/// Expands `key=a..b:step` into one config per value, each named
/// `<experiment>-<key><value>`. Throws ConfigError on a malformed spec.
std::vector<ExperimentConfig> expand_sweep(const ExperimentConfig& base, const std::string& sweep);

EnvConfig env_config(const ExperimentConfig& c);
Timeline timeline(const ExperimentConfig& c);
AmmConfig amm_config(const ExperimentConfig& c);
RatePalette palette(const ExperimentConfig& c);
/// Explicit two-state regimes from `high_ratio`, otherwise `regimes` random matrices.
RegimeModel regime_model(const ExperimentConfig& c, std::uint64_t seed, std::size_t states);
std::unique_ptr<Environment> make_environment(const ExperimentConfig& c, std::uint64_t seed);

struct RunSummary {
  std::string run_id;
  std::uint64_t seed = 0;
  std::string scheme;
  std::size_t slots = 0;
  double mean_upsilon = 0.0;
  double final_interval_upsilon = 0.0;
  double discounted_return = 0.0;
  bool complete = false;
  std::string error;
};

struct RunOutput {
  RunSummary summary;
  std::vector<SlotRecord> records;
};

/// One scheme on one seed. Module errors propagate; records gathered before
/// the failure are kept in `partial` when given.
RunOutput run_single(const ExperimentConfig& c, const std::string& scheme, std::uint64_t seed,
                     std::vector<SlotRecord>* partial = nullptr);

void write_slots_csv(std::ostream& out, const std::vector<RunOutput>& runs);
void write_summary_csv(std::ostream& out, const std::vector<RunSummary>& runs);

/// Runs every scheme × seed on a bounded worker pool, writing
/// out/<experiment>/<seed>/slots.csv, out/<experiment>/summary.csv and
/// out/<experiment>/config.resolved. Throws std::runtime_error after flushing
/// partial output if any run failed.
std::vector<RunSummary> run_experiment(const ExperimentConfig& c);

struct UdtEvalRow {
  std::string method;  // udt | lstm_point | markov_fit
  std::size_t states = 0;
  std::size_t interval = 0;
  double matrix_error = 0.0;  // mean absolute entrywise error
};

/// Transition-matrix estimation study for one seed and one N.
std::vector<UdtEvalRow> udt_eval_single(const ExperimentConfig& c, std::size_t states, std::uint64_t seed);

/// Mean |a − b| over all entries.
double mean_abs_error(const TransitionMatrix& a, const TransitionMatrix& b);

/// Runs udt_eval_single for every N in `udt_eval_states` and every seed, writing
/// out/<experiment>/<seed>/udt_eval.csv and out/<experiment>/udt_summary.csv.
std::vector<UdtEvalRow> run_udt_eval(const ExperimentConfig& c);

/// Point predictor of the next channel state (recurrent net + softmax, argmax at use).
class PointPredictor {
 public:
  PointPredictor(std::size_t states, std::size_t tau, std::size_t hidden, nn::CellType cell, double lr, Rng& init);
  /// One cross-entropy step per minibatch over `epochs` passes.
  void train(std::span<const RateSample> samples, std::size_t epochs, std::size_t batch, Rng& rng);
  std::size_t predict(std::span<const std::size_t> history);
  /// Row s: frequency of each predicted state over the windows ending in s
  /// (constant window when none is given).
  TransitionMatrix implied_transition_matrix(std::span<const std::vector<std::size_t>> contexts);

 private:
  nn::Matrix logits(std::span<const std::vector<std::size_t>> histories);
  std::size_t states_, tau_;
  nn::Recurrent rnn_;
  nn::Dense out_;
  nn::Adam adam_;
};

}  // namespace dtmap
