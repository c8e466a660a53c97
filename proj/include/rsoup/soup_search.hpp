#pragma once

#include <cstdint>
#include <map>
#include <mutex>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "json.hpp"
#include "rsoup/data.hpp"
#include "rsoup/eval_report.hpp"
#include "rsoup/param_space.hpp"
#include "rsoup/threats.hpp"
#include "rsoup/training.hpp"

namespace rsoup {

// Per-model weight values; strictly increasing with uniform spacing.
struct WeightGrid {
  std::vector<double> values;
  std::size_t n_models = 0;
  SoupMode mode = SoupMode::convex;

  // lo, lo + step, ..., hi with values rounded to 1e-9 so 0.2 * 3 reads 0.6.
  static WeightGrid uniform(double lo, double hi, double step, std::size_t n_models,
                            SoupMode mode);
  double step() const;
  void validate() const;
};

// Every weight vector over the grid summing to one, in lexicographic order.
// The sum test is exact: indices must add up to (1 - n * values[0]) / step.
// An infeasible grid yields an empty list.
std::vector<SoupWeights> enumerate_weights(const WeightGrid& grid);

// What a candidate is scored on: clean accuracy, or robust accuracy under
// one threat with a seeded attack.
struct Metric {
  std::optional<ThreatSpec> threat;
  AttackConfig attack;

  static Metric clean() { return {}; }
  static Metric robust(const ThreatSpec& t, const AttackConfig& a) { return {t, a}; }
  std::string id() const;
};

struct SoupCandidate {
  SoupWeights weights;
  std::vector<std::string> constituents;
  std::map<std::string, double> accuracy;  // by dataset id
};

class CandidateError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

std::string weights_label(const SoupWeights& w);

// Forms soups from fixed constituents and scores them; per-point flags are
// cached by (weights, dataset id, metric id).
class CandidateEvaluator {
 public:
  CandidateEvaluator(std::vector<Checkpoint> constituents, std::vector<std::string> ids);

  Network<float> soup(const SoupWeights& w) const;
  const Flags& flags(const SoupWeights& w, const Dataset& data, const Metric& metric);
  double accuracy(const SoupWeights& w, const Dataset& data, const Metric& metric);

  // Candidates carrying one accuracy entry per dataset.
  std::vector<SoupCandidate> evaluate(std::span<const SoupWeights> weights,
                                      std::span<const Dataset> datasets, const Metric& metric);

  const std::vector<std::string>& ids() const { return ids_; }
  std::size_t size() const { return constituents_.size(); }
  std::size_t evaluations() const { return evaluations_; }
  std::size_t cache_hits() const { return hits_; }

 private:
  std::vector<Checkpoint> constituents_;
  std::vector<ParamVector> params_;
  std::vector<std::string> ids_;
  std::map<std::string, Flags> cache_;
  std::mutex mu_;
  std::size_t evaluations_ = 0;
  std::size_t hits_ = 0;
};

// Weight-vector order used for every tie-break.
bool weights_less(const SoupWeights& a, const SoupWeights& b);

// Descending accuracy on `dataset_id`, ties by smallest weights; at most k.
std::vector<SoupCandidate> select_best_per_dataset(std::span<const SoupCandidate> candidates,
                                                   const std::string& dataset_id,
                                                   std::size_t k = 5);

// Highest unweighted mean accuracy over the datasets.
SoupCandidate select_best_average(std::span<const SoupCandidate> candidates,
                                  std::span<const std::string> dataset_ids);

// Random subset of min(size, n) points in index order.
Dataset adaptation_subset(const Dataset& data, std::size_t size, std::uint64_t seed);

struct FewShotConfig {
  std::vector<std::size_t> k_values{10, 30, 100, 300, 500};
  std::size_t trials = 50;
  std::size_t heldout_size = 500;
  std::uint64_t seed = 0;
};

struct FewShotRow {
  std::size_t k = 0;
  double mean = 0.0;
  double std = 0.0;  // population
  std::vector<double> heldout_acc;  // one per trial
};

struct FewShotResult {
  std::vector<FewShotRow> rows;
  // Selection on the whole non-held-out pool.
  double full_selection_acc = 0.0;
  std::size_t pool_size = 0;
};

// `pool_flags[c]` holds candidate c's per-point correctness on the pool.
FewShotResult few_shot_selection(std::span<const SoupWeights> weights,
                                 std::span<const Flags> pool_flags, const FewShotConfig& cfg);

// For each constituent, its weight in every soup of top_k.
std::vector<std::vector<double>> composition_report(std::span<const SoupCandidate> top_k);
nlohmann::json composition_json(std::span<const SoupCandidate> top_k,
                                std::span<const std::string> constituent_ids);

std::string candidates_csv(std::span<const SoupCandidate> candidates,
                           std::span<const std::string> constituent_ids,
                           std::span<const std::string> dataset_ids);

}  // namespace rsoup
