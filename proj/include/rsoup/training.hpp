#pragma once

#include <cstdint>
#include <functional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "json.hpp"
#include "rsoup/data.hpp"
#include "rsoup/network.hpp"
#include "rsoup/param_space.hpp"
#include "rsoup/threats.hpp"

namespace rsoup {

class NumericError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// How multiple threats are combined per step.
//   single: exactly one threat
//   max:    per example, the perturbation with the highest loss (ties: first)
//   sat:    per batch, one threat drawn uniformly at random
enum class MultiThreatMode { single, max, sat };

std::string mode_name(MultiThreatMode m);
MultiThreatMode parse_mode(const std::string& s);

struct TrainConfig {
  double epochs = 30.0;  // fractional epochs allowed
  std::size_t batch_size = 64;
  double peak_lr = 0.05;
  double ramp_fraction = 0.1;
  double momentum = 0.9;
  double weight_decay = 5e-4;
  std::uint64_t seed = 0;
  std::vector<ThreatSpec> threats{ThreatSpec::nominal()};
  MultiThreatMode mode = MultiThreatMode::single;
  AttackConfig attack = [] {
    AttackConfig a;
    a.steps = 10;
    return a;
  }();
  int l1_attack_steps = 20;
  double validation_fraction = 0.1;
  std::size_t validation_max_points = 500;
  double finetune_lr_factor = 0.1;

  // Attack used when training against `threat`.
  AttackConfig attack_for(const ThreatSpec& threat) const;
  void validate() const;
  nlohmann::json to_json() const;
};

// Learning rate for update t in [1, total]: linear ramp over the first
// ramp_fraction of updates, cosine decay to zero afterwards.
double lr_at(std::size_t t, std::size_t total, double peak, double ramp_fraction);
std::size_t ramp_steps(std::size_t total, double ramp_fraction);

struct LineageRecord {
  std::string op;  // train, finetune, train_max, train_sat, soup
  std::vector<ThreatSpec> threats;
  double epochs = 0.0;
  std::vector<double> soup_weights;
  friend bool operator==(const LineageRecord&, const LineageRecord&) = default;
};

std::string describe_lineage(std::span<const LineageRecord> lineage);

struct Checkpoint {
  ArchSpec arch;
  ParamVector params;
  std::vector<LineageRecord> lineage;
  double val_clean_acc = 0.0;
  double val_robust_acc = 0.0;
  std::uint64_t seed = 0;

  Network<float> network() const { return make_network(arch, params); }
  void validate() const;
};

struct EpochLog {
  double epoch = 0.0;
  double train_loss = 0.0;
  double val_clean_acc = 0.0;
  double val_robust_acc = 0.0;
  double lr = 0.0;
  nlohmann::json to_json() const;
};

// Per-update hook, used to audit the MAX loss property.
struct StepLog {
  std::size_t step = 0;
  double batch_loss = 0.0;
  std::vector<std::size_t> chosen_threat;      // per example
  std::vector<std::vector<double>> threat_loss;  // [threat][example]
  std::vector<double> trained_loss;            // per example, at the chosen perturbation
};

struct TrainHooks {
  std::function<void(const EpochLog&)> on_epoch;
  std::function<void(const StepLog&)> on_step;
};

struct ModelInit {
  ArchSpec arch;
  ParamVector params;
  std::vector<LineageRecord> lineage;

  static ModelInit fresh(const ArchSpec& arch, std::uint64_t seed);
  static ModelInit from(const Checkpoint& base);
};

struct HistoryEntry {
  double epoch = 0.0;
  ParamVector params;
  double val_clean_acc = 0.0;
  double val_robust_acc = 0.0;
};

// Highest validation robust accuracy; ties go to the earliest entry.
std::size_t select_checkpoint(std::span<const HistoryEntry> history);

// Min-max training over cfg.threats under cfg.mode. A validation split of
// cfg.validation_fraction is held out from updates and drives checkpoint
// selection.
Checkpoint train(const ModelInit& init, const Dataset& data, const TrainConfig& cfg,
                 const TrainHooks& hooks = {});

// Continues training `base` against `target` at peak_lr * finetune_lr_factor.
Checkpoint finetune(const Checkpoint& base, const ThreatSpec& target, const Dataset& data,
                    const TrainConfig& cfg, const TrainHooks& hooks = {});

Checkpoint train_max(const ModelInit& init, const Dataset& data,
                     std::span<const ThreatSpec> threats, const TrainConfig& cfg,
                     const TrainHooks& hooks = {});
Checkpoint train_sat(const ModelInit& init, const Dataset& data,
                     std::span<const ThreatSpec> threats, const TrainConfig& cfg,
                     const TrainHooks& hooks = {});

// The seeded per-batch threat draw used by SAT.
std::vector<std::size_t> sat_schedule(std::uint64_t seed, std::size_t n_batches,
                                      std::size_t n_threats);

}  // namespace rsoup
