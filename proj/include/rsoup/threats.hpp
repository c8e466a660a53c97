#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "rsoup/data.hpp"
#include "rsoup/network.hpp"

namespace rsoup {

enum class Norm { linf, l2, l1, nominal };

std::string norm_name(Norm n);
Norm parse_norm(const std::string& s);

// Perturbation set {delta : ||delta||_p <= epsilon, x + delta in [0,1]^d}.
// The nominal threat is the set {0}.
struct ThreatSpec {
  Norm norm = Norm::nominal;
  double epsilon = 0.0;

  static ThreatSpec nominal() { return {Norm::nominal, 0.0}; }
  // Budgets scaled from the 3072-dimensional CIFAR-10 values (8/255, 128/255, 12)
  // so per-pixel strength matches at input dimension d.
  static ThreatSpec standard(Norm norm, std::size_t input_dim);

  bool is_identity() const { return norm == Norm::nominal || epsilon == 0.0; }
  std::string name() const;  // "linf", "l2", "l1", "nominal"
  std::string describe() const;  // e.g. "linf(eps=0.0313725)"
  friend bool operator==(const ThreatSpec&, const ThreatSpec&) = default;
};

enum class AttackLoss { cross_entropy, kl_to_clean };

std::string attack_loss_name(AttackLoss l);
AttackLoss parse_attack_loss(const std::string& s);

struct AttackConfig {
  int steps = 40;
  std::optional<double> initial_step_size;  // default 2 * eps / steps
  AttackLoss loss = AttackLoss::cross_entropy;
  int restarts = 1;
  double l1_sparsity_fraction = 0.05;
  std::uint64_t rng_seed = 0;

  double step_size_for(const ThreatSpec& spec) const;
  void validate() const;
  std::uint64_t digest() const;
};

// Euclidean projection of delta onto the feasible set of `spec` around x
// (x in [0,1]^d). linf is an exact clamp; l2/l1 alternate ball and box
// projections with Dykstra's corrections.
std::vector<double> project(std::span<const double> delta, std::span<const float> x,
                            const ThreatSpec& spec);

// Building blocks, exposed for testing.
std::vector<double> project_l2_ball(std::span<const double> v, double radius);
std::vector<double> project_l1_ball(std::span<const double> v, double radius);
std::vector<double> project_box(std::span<const double> delta, std::span<const float> x);

struct DykstraTrace {
  int rounds = 0;
  double last_movement = 0.0;
};
inline constexpr int kDykstraMaxRounds = 20;
inline constexpr double kDykstraTolerance = 1e-7;
std::vector<double> project_dykstra(std::span<const double> delta, std::span<const float> x,
                                    const ThreatSpec& spec, DykstraTrace* trace = nullptr,
                                    int max_rounds = kDykstraMaxRounds);

double lp_norm(std::span<const double> v, Norm norm);

// Norm-adapted ascent direction: sign for linf, unit l2 vector for l2, signed
// top-k sparse vector with unit l1 norm for l1 (k = ceil(fraction * d)).
std::vector<double> attack_step_direction(std::span<const double> grad, const ThreatSpec& spec,
                                          const AttackConfig& cfg);

// float(x + delta) per row; the exact input the attack evaluated.
Tensor<float> perturb(const Tensor<float>& images, const std::vector<std::vector<double>>& deltas);

struct AttackResult {
  std::vector<double> delta;
  bool success = false;  // model misclassifies x + delta
  double loss = 0.0;     // attack loss at delta
};

// Best-point projected ascent with momentum 0.75 and step halving after
// ceil(0.22 * steps) iterations without improvement. Restart 0 starts at
// delta = 0; later restarts start from a seeded random feasible point.
// Misclassifying iterates rank above all others, then higher loss wins.
//
// `point_ids` seed the per-point generators, so results do not depend on
// batching or threading.
std::vector<AttackResult> run_attack_batch(const Network<float>& model,
                                           const Tensor<float>& images,
                                           std::span<const int> labels,
                                           std::span<const std::uint64_t> point_ids,
                                           const ThreatSpec& spec, const AttackConfig& cfg);

AttackResult run_attack(const Network<float>& model, std::span<const float> x, int label,
                        const ThreatSpec& spec, const AttackConfig& cfg,
                        std::uint64_t point_id = 0);

// Per-point robustness (correct under attack) across the dataset.
std::vector<std::uint8_t> robust_flags(const Network<float>& model, const Dataset& data,
                                       const ThreatSpec& spec, const AttackConfig& cfg);

// Per-point clean correctness.
std::vector<std::uint8_t> clean_flags(const Network<float>& model, const Dataset& data);

// Step-window length for the step-size halving rule.
int halving_window(int steps);

}  // namespace rsoup
