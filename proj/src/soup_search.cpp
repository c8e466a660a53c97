#include "rsoup/soup_search.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>

#include "rsoup/parallel.hpp"

namespace rsoup {

namespace {

constexpr double kGridTolerance = 1e-9;
constexpr std::uint64_t kHeldoutStream = 0xfe75;
constexpr std::uint64_t kTrialStream = 0xfe76;

std::string fmt(double v) {
  std::ostringstream os;
  os.precision(17);
  os << v;
  return os.str();
}

void enumerate_rec(const WeightGrid& g, long remaining, std::vector<std::size_t>& idx,
                   std::vector<SoupWeights>& out) {
  const std::size_t pos = idx.size();
  const std::size_t m = g.values.size();
  if (pos + 1 == g.n_models) {
    if (remaining < 0 || remaining >= static_cast<long>(m)) return;
    const auto last = static_cast<std::size_t>(remaining);
    if (g.mode == SoupMode::convex && g.values[last] < 0) return;
    std::vector<double> w;
    w.reserve(g.n_models);
    for (auto i : idx) w.push_back(g.values[i]);
    w.push_back(g.values[last]);
    out.emplace_back(std::move(w), g.mode);
    return;
  }
  for (std::size_t i = 0; i < m && static_cast<long>(i) <= remaining; ++i) {
    if (g.mode == SoupMode::convex && g.values[i] < 0) continue;
    idx.push_back(i);
    enumerate_rec(g, remaining - static_cast<long>(i), idx, out);
    idx.pop_back();
  }
}

}  // namespace

WeightGrid WeightGrid::uniform(double lo, double hi, double step, std::size_t n_models,
                               SoupMode mode) {
  if (!(step > 0) || !(hi >= lo)) throw std::invalid_argument("weight grid: need step > 0, hi >= lo");
  const double count = (hi - lo) / step;
  const double rounded = std::round(count);
  if (std::abs(count - rounded) > 1e-6) {
    throw std::invalid_argument("weight grid: (hi - lo) is not a multiple of step");
  }
  WeightGrid g;
  g.n_models = n_models;
  g.mode = mode;
  for (long i = 0; i <= static_cast<long>(rounded); ++i) {
    g.values.push_back(std::round((lo + static_cast<double>(i) * step) * 1e9) / 1e9);
  }
  g.validate();
  return g;
}

double WeightGrid::step() const { return values.size() < 2 ? 1.0 : values[1] - values[0]; }

void WeightGrid::validate() const {
  if (n_models == 0) throw std::invalid_argument("weight grid: n_models must be positive");
  if (values.empty()) throw std::invalid_argument("weight grid: no values");
  for (double v : values)
    if (!std::isfinite(v)) throw std::invalid_argument("weight grid: non-finite value");
  const double s = step();
  for (std::size_t i = 1; i < values.size(); ++i) {
    const double d = values[i] - values[i - 1];
    if (!(d > 0)) throw std::invalid_argument("weight grid: values must be strictly increasing");
    if (std::abs(d - s) > kGridTolerance) {
      throw std::invalid_argument("weight grid: spacing is not uniform at index " +
                                  std::to_string(i));
    }
  }
}

std::vector<SoupWeights> enumerate_weights(const WeightGrid& grid) {
  grid.validate();
  std::vector<SoupWeights> out;
  const double n = static_cast<double>(grid.n_models);
  long target = 0;
  if (grid.values.size() == 1) {
    if (std::abs(n * grid.values[0] - 1.0) > kGridTolerance) return out;
  } else {
    const double t = (1.0 - n * grid.values[0]) / grid.step();
    target = std::lround(t);
    if (std::abs(t - static_cast<double>(target)) > 1e-6 || target < 0) return out;
  }
  std::vector<std::size_t> idx;
  enumerate_rec(grid, target, idx, out);
  return out;
}

std::string Metric::id() const {
  if (!threat) return "clean";
  return "robust_" + threat->describe() + "@" + hex64(attack.digest());
}

std::string weights_label(const SoupWeights& w) {
  std::string s;
  for (std::size_t i = 0; i < w.size(); ++i) s += (i ? "," : "") + fmt(w[i]);
  return s;
}

CandidateEvaluator::CandidateEvaluator(std::vector<Checkpoint> constituents,
                                       std::vector<std::string> ids)
    : constituents_(std::move(constituents)), ids_(std::move(ids)) {
  if (constituents_.empty()) throw std::invalid_argument("soup search: no constituents");
  if (ids_.size() != constituents_.size()) {
    throw std::invalid_argument("soup search: " + std::to_string(ids_.size()) + " ids for " +
                                std::to_string(constituents_.size()) + " constituents");
  }
  for (std::size_t i = 0; i < constituents_.size(); ++i) {
    if (!(constituents_[i].arch == constituents_[0].arch) ||
        !constituents_[i].params.combinable_with(constituents_[0].params)) {
      throw SchemaError("soup search: constituent '" + ids_[i] + "' does not match '" + ids_[0] +
                        "'");
    }
    params_.push_back(constituents_[i].params);
  }
}

Network<float> CandidateEvaluator::soup(const SoupWeights& w) const {
  return make_network(constituents_[0].arch, affine_combine(params_, w));
}

const Flags& CandidateEvaluator::flags(const SoupWeights& w, const Dataset& data,
                                       const Metric& metric) {
  const std::string key = weights_label(w) + "|" + data.id + "|" + metric.id();
  {
    std::lock_guard<std::mutex> lock(mu_);
    auto it = cache_.find(key);
    if (it != cache_.end()) {
      ++hits_;
      return it->second;
    }
  }
  Flags f;
  try {
    const auto net = soup(w);
    f = metric.threat ? robust_flags(net, data, *metric.threat, metric.attack)
                      : clean_flags(net, data);
  } catch (const std::exception& e) {
    throw CandidateError("candidate (" + weights_label(w) + ") on '" + data.id + "' [" +
                         metric.id() + "]: " + e.what());
  }
  std::lock_guard<std::mutex> lock(mu_);
  ++evaluations_;
  return cache_.insert_or_assign(key, std::move(f)).first->second;
}

double CandidateEvaluator::accuracy(const SoupWeights& w, const Dataset& data,
                                    const Metric& metric) {
  return mean_flag(flags(w, data, metric));
}

std::vector<SoupCandidate> CandidateEvaluator::evaluate(std::span<const SoupWeights> weights,
                                                        std::span<const Dataset> datasets,
                                                        const Metric& metric) {
  std::vector<SoupCandidate> out;
  out.reserve(weights.size());
  for (const auto& w : weights) {
    SoupCandidate c{w, ids_, {}};
    for (const auto& d : datasets) c.accuracy[d.id] = accuracy(w, d, metric);
    out.push_back(std::move(c));
  }
  return out;
}

bool weights_less(const SoupWeights& a, const SoupWeights& b) {
  return std::lexicographical_compare(a.values().begin(), a.values().end(), b.values().begin(),
                                      b.values().end());
}

namespace {

double accuracy_on(const SoupCandidate& c, const std::string& id) {
  auto it = c.accuracy.find(id);
  if (it == c.accuracy.end()) {
    throw std::invalid_argument("candidate (" + weights_label(c.weights) +
                                ") has no accuracy for '" + id + "'");
  }
  return it->second;
}

}  // namespace

std::vector<SoupCandidate> select_best_per_dataset(std::span<const SoupCandidate> candidates,
                                                   const std::string& dataset_id,
                                                   std::size_t k) {
  std::vector<SoupCandidate> sorted(candidates.begin(), candidates.end());
  std::stable_sort(sorted.begin(), sorted.end(), [&](const auto& a, const auto& b) {
    const double x = accuracy_on(a, dataset_id), y = accuracy_on(b, dataset_id);
    if (x != y) return x > y;
    return weights_less(a.weights, b.weights);
  });
  if (sorted.size() > k) sorted.erase(sorted.begin() + static_cast<long>(k), sorted.end());
  return sorted;
}

SoupCandidate select_best_average(std::span<const SoupCandidate> candidates,
                                  std::span<const std::string> dataset_ids) {
  if (candidates.empty()) throw std::invalid_argument("select_best_average: no candidates");
  if (dataset_ids.empty()) throw std::invalid_argument("select_best_average: no datasets");
  auto mean = [&](const SoupCandidate& c) {
    double s = 0.0;
    for (const auto& id : dataset_ids) s += accuracy_on(c, id);
    return s / static_cast<double>(dataset_ids.size());
  };
  std::size_t best = 0;
  double best_mean = mean(candidates[0]);
  for (std::size_t i = 1; i < candidates.size(); ++i) {
    const double m = mean(candidates[i]);
    if (m > best_mean || (m == best_mean && weights_less(candidates[i].weights,
                                                         candidates[best].weights))) {
      best = i;
      best_mean = m;
    }
  }
  return candidates[best];
}

Dataset adaptation_subset(const Dataset& data, std::size_t size, std::uint64_t seed) {
  std::vector<std::size_t> idx(data.size());
  std::iota(idx.begin(), idx.end(), 0);
  if (size < idx.size()) {
    auto rng = make_rng(seed, 0xada, 0);
    std::shuffle(idx.begin(), idx.end(), rng);
    idx.resize(size);
    std::sort(idx.begin(), idx.end());
  }
  return data.subset(idx, data.id + "/adapt" + std::to_string(idx.size()));
}

FewShotResult few_shot_selection(std::span<const SoupWeights> weights,
                                 std::span<const Flags> pool_flags, const FewShotConfig& cfg) {
  if (weights.empty() || weights.size() != pool_flags.size()) {
    throw std::invalid_argument("few_shot_selection: " + std::to_string(weights.size()) +
                                " candidates but " + std::to_string(pool_flags.size()) +
                                " flag vectors");
  }
  if (cfg.k_values.empty() || cfg.trials == 0) {
    throw std::invalid_argument("few_shot_selection: need k values and at least one trial");
  }
  const std::size_t P = pool_flags[0].size();
  for (const auto& f : pool_flags)
    if (f.size() != P) throw std::invalid_argument("few_shot_selection: flag length mismatch");
  const std::size_t kmax = *std::max_element(cfg.k_values.begin(), cfg.k_values.end());
  const std::size_t required = cfg.heldout_size + kmax;
  if (P < required || cfg.heldout_size == 0) {
    throw DataError("few_shot_selection: adaptation pool has " + std::to_string(P) +
                    " points; need at least " + std::to_string(required) + " (held-out " +
                    std::to_string(cfg.heldout_size) + " + k " + std::to_string(kmax) + ")");
  }

  // Candidate order with the tie-break baked in: first maximum wins.
  std::vector<std::size_t> order(weights.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return weights_less(weights[a], weights[b]); });

  std::vector<std::size_t> perm(P);
  std::iota(perm.begin(), perm.end(), 0);
  auto hrng = make_rng(cfg.seed, kHeldoutStream);
  std::shuffle(perm.begin(), perm.end(), hrng);
  const std::vector<std::size_t> heldout(perm.begin(), perm.begin() + cfg.heldout_size);
  const std::vector<std::size_t> rest(perm.begin() + cfg.heldout_size, perm.end());

  std::vector<double> heldout_acc(weights.size());
  for (std::size_t c = 0; c < weights.size(); ++c) {
    std::size_t s = 0;
    for (auto i : heldout) s += pool_flags[c][i] ? 1 : 0;
    heldout_acc[c] = static_cast<double>(s) / static_cast<double>(heldout.size());
  }
  auto select = [&](std::span<const std::size_t> sample) {
    std::size_t best = order[0];
    long best_count = -1;
    for (auto c : order) {
      long s = 0;
      for (auto i : sample) s += pool_flags[c][i] ? 1 : 0;
      if (s > best_count) {
        best_count = s;
        best = c;
      }
    }
    return best;
  };

  FewShotResult res;
  res.pool_size = P;
  res.full_selection_acc = heldout_acc[select(rest)];
  for (std::size_t k : cfg.k_values) {
    FewShotRow row;
    row.k = k;
    for (std::size_t t = 0; t < cfg.trials; ++t) {
      auto rng = make_rng(cfg.seed, mix_seed(kTrialStream, k), t);
      std::vector<std::size_t> sample = rest;
      for (std::size_t i = 0; i < k; ++i) {
        std::uniform_int_distribution<std::size_t> pick(i, sample.size() - 1);
        std::swap(sample[i], sample[pick(rng)]);
      }
      row.heldout_acc.push_back(heldout_acc[select(std::span(sample).first(k))]);
    }
    const double n = static_cast<double>(row.heldout_acc.size());
    row.mean = std::accumulate(row.heldout_acc.begin(), row.heldout_acc.end(), 0.0) / n;
    double var = 0.0;
    for (double a : row.heldout_acc) var += (a - row.mean) * (a - row.mean);
    row.std = std::sqrt(var / n);
    res.rows.push_back(std::move(row));
  }
  return res;
}

std::vector<std::vector<double>> composition_report(std::span<const SoupCandidate> top_k) {
  if (top_k.empty()) return {};
  std::vector<std::vector<double>> out(top_k[0].weights.size());
  for (const auto& c : top_k) {
    if (c.weights.size() != out.size()) {
      throw std::invalid_argument("composition_report: candidates differ in constituent count");
    }
    for (std::size_t i = 0; i < out.size(); ++i) out[i].push_back(c.weights[i]);
  }
  return out;
}

nlohmann::json composition_json(std::span<const SoupCandidate> top_k,
                                std::span<const std::string> constituent_ids) {
  const auto comp = composition_report(top_k);
  nlohmann::json j;
  j["schema_version"] = kReportSchemaVersion;
  j["k"] = top_k.size();
  auto& rows = j["constituents"] = nlohmann::json::array();
  for (std::size_t i = 0; i < comp.size(); ++i) {
    rows.push_back({{"id", i < constituent_ids.size() ? constituent_ids[i] : std::to_string(i)},
                    {"weights", comp[i]}});
  }
  return j;
}

std::string candidates_csv(std::span<const SoupCandidate> candidates,
                           std::span<const std::string> constituent_ids,
                           std::span<const std::string> dataset_ids) {
  std::string s = "schema_version";
  for (const auto& id : constituent_ids) s += ",w_" + id;
  for (const auto& id : dataset_ids) s += ",acc_" + id;
  s += "\n";
  for (const auto& c : candidates) {
    s += std::to_string(kReportSchemaVersion);
    for (double w : c.weights.values()) s += "," + fmt(w);
    for (const auto& id : dataset_ids) s += "," + fmt(accuracy_on(c, id));
    s += "\n";
  }
  return s;
}

}  // namespace rsoup
