#pragma once

#include <cstdint>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"
#include "rsoup/data.hpp"
#include "rsoup/network.hpp"
#include "rsoup/threats.hpp"

namespace rsoup {

inline constexpr int kReportSchemaVersion = 1;

using Flags = std::vector<std::uint8_t>;

struct EvalReport {
  std::string model_id;  // checkpoint id or soup weights
  std::string dataset_id;
  double clean_acc = 0.0;
  std::map<std::string, double> robust_acc;  // keyed by threat name
  double union_robust_acc = 0.0;
  std::size_t n_points = 0;
  std::string attack_digest;
  // Optional audit data: clean flags and one row per threat, in robust_acc key order.
  std::map<std::string, Flags> flags;

  nlohmann::json to_json() const;
  static std::string csv_header(std::span<const std::string> threat_names);
  std::string csv_row(std::span<const std::string> threat_names) const;

  friend bool operator==(const EvalReport&, const EvalReport&) = default;
};

double mean_flag(std::span<const std::uint8_t> flags);

double clean_accuracy(const Network<float>& model, const Dataset& data);

// Mean of the per-point AND across threats.
double union_robust_accuracy(std::span<const Flags> flag_vectors);
Flags union_flags(std::span<const Flags> flag_vectors);

// Accuracy of argmax of the mean softmax over models.
double softmax_ensemble_accuracy(std::span<const Network<float>* const> models, const Dataset& data);

// Clean, per-threat and union accuracy with one seeded attack per threat.
EvalReport evaluate_model(const Network<float>& model, const std::string& model_id,
                          const Dataset& data, std::span<const ThreatSpec> threats,
                          const AttackConfig& cfg, bool keep_flags = false);

struct SweepPoint {
  double w = 0.0;
  double metric_a = 0.0;
  double metric_b = 0.0;
};

struct FrontEntry {
  SweepPoint point;
  bool dominated = false;  // some other point is strictly better on both metrics
};

// Pareto front flags; input order (the w ordering) is preserved.
std::vector<FrontEntry> tradeoff_front(std::span<const SweepPoint> sweep);

}  // namespace rsoup
