#include "rsoup/training.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>

#include "rsoup/eval_report.hpp"
#include "rsoup/parallel.hpp"

namespace rsoup {

std::string mode_name(MultiThreatMode m) {
  switch (m) {
    case MultiThreatMode::single: return "single";
    case MultiThreatMode::max: return "max";
    case MultiThreatMode::sat: return "sat";
  }
  return "?";
}

MultiThreatMode parse_mode(const std::string& s) {
  if (s == "single") return MultiThreatMode::single;
  if (s == "max") return MultiThreatMode::max;
  if (s == "sat") return MultiThreatMode::sat;
  throw std::invalid_argument("unknown multi-threat mode '" + s + "' (single, max, sat)");
}

AttackConfig TrainConfig::attack_for(const ThreatSpec& threat) const {
  AttackConfig a = attack;
  if (threat.norm == Norm::l1) a.steps = l1_attack_steps;
  return a;
}

void TrainConfig::validate() const {
  if (!(epochs >= 0.0) || !std::isfinite(epochs)) throw std::invalid_argument("train: epochs must be >= 0");
  if (batch_size == 0) throw std::invalid_argument("train: batch_size must be positive");
  if (!(peak_lr >= 0.0)) throw std::invalid_argument("train: peak_lr must be >= 0");
  if (!(ramp_fraction >= 0.0 && ramp_fraction <= 1.0)) {
    throw std::invalid_argument("train: ramp_fraction must be in [0, 1]");
  }
  if (threats.empty()) throw std::invalid_argument("train: at least one threat required");
  if (mode == MultiThreatMode::single && threats.size() != 1) {
    throw std::invalid_argument("train: single mode takes exactly one threat");
  }
  if (!(validation_fraction > 0.0 && validation_fraction < 1.0)) {
    throw std::invalid_argument("train: validation_fraction must be in (0, 1)");
  }
  if (l1_attack_steps < 1) throw std::invalid_argument("train: l1_attack_steps must be positive");
  attack.validate();
}

nlohmann::json TrainConfig::to_json() const {
  nlohmann::json j;
  j["epochs"] = epochs;
  j["batch_size"] = batch_size;
  j["peak_lr"] = peak_lr;
  j["ramp_fraction"] = ramp_fraction;
  j["momentum"] = momentum;
  j["weight_decay"] = weight_decay;
  j["seed"] = seed;
  j["mode"] = mode_name(mode);
  auto& t = j["threats"] = nlohmann::json::array();
  for (const auto& th : threats) t.push_back({{"norm", th.name()}, {"epsilon", th.epsilon}});
  j["attack_steps"] = attack.steps;
  j["l1_attack_steps"] = l1_attack_steps;
  j["attack_loss"] = attack_loss_name(attack.loss);
  j["validation_fraction"] = validation_fraction;
  return j;
}

std::size_t ramp_steps(std::size_t total, double ramp_fraction) {
  if (total == 0) return 0;
  const auto r = static_cast<std::size_t>(std::floor(ramp_fraction * static_cast<double>(total)));
  return std::clamp<std::size_t>(r, 1, total);
}

double lr_at(std::size_t t, std::size_t total, double peak, double ramp_fraction) {
  if (total == 0) return 0.0;
  const std::size_t ramp = ramp_steps(total, ramp_fraction);
  if (t <= ramp) return peak * static_cast<double>(t) / static_cast<double>(ramp);
  const double progress =
      static_cast<double>(t - ramp) / static_cast<double>(std::max<std::size_t>(1, total - ramp));
  return peak * 0.5 * (1.0 + std::cos(M_PI * progress));
}

std::string describe_lineage(std::span<const LineageRecord> lineage) {
  std::ostringstream os;
  for (std::size_t i = 0; i < lineage.size(); ++i) {
    if (i) os << " -> ";
    const auto& r = lineage[i];
    os << r.op << "(";
    for (std::size_t t = 0; t < r.threats.size(); ++t) os << (t ? "+" : "") << r.threats[t].name();
    if (!r.soup_weights.empty()) {
      os << "w=";
      for (std::size_t k = 0; k < r.soup_weights.size(); ++k) os << (k ? "," : "") << r.soup_weights[k];
    }
    os << ", " << r.epochs << "ep)";
  }
  return os.str();
}

void Checkpoint::validate() const {
  if (lineage.empty()) throw SchemaError("checkpoint: empty lineage");
  if (schema_hash_of(Network<float>(arch)) != params.schema_hash()) {
    throw SchemaError("checkpoint: parameters do not match architecture " + arch.id());
  }
}

nlohmann::json EpochLog::to_json() const {
  return {{"epoch", epoch},
          {"train_loss", train_loss},
          {"val_clean_acc", val_clean_acc},
          {"val_robust_acc", val_robust_acc},
          {"lr", lr}};
}

ModelInit ModelInit::fresh(const ArchSpec& arch, std::uint64_t seed) {
  Network<float> net(arch);
  net.init(seed);
  return {arch, extract(net), {}};
}

ModelInit ModelInit::from(const Checkpoint& base) {
  base.validate();
  return {base.arch, base.params, base.lineage};
}

std::size_t select_checkpoint(std::span<const HistoryEntry> history) {
  if (history.empty()) throw std::invalid_argument("select_checkpoint: empty history");
  std::size_t best = 0;
  for (std::size_t i = 1; i < history.size(); ++i)
    if (history[i].val_robust_acc > history[best].val_robust_acc) best = i;
  return best;
}

std::vector<std::size_t> sat_schedule(std::uint64_t seed, std::size_t n_batches,
                                      std::size_t n_threats) {
  std::vector<std::size_t> out(n_batches, 0);
  if (n_threats <= 1) return out;
  auto rng = make_rng(seed, 0x5a7);
  std::uniform_int_distribution<std::size_t> pick(0, n_threats - 1);
  for (auto& v : out) v = pick(rng);
  return out;
}

namespace {

constexpr std::size_t kAttackGrain = 16;

struct ValMetrics {
  double clean = 0.0;
  double robust = 0.0;
};

ValMetrics validate_model(const Network<float>& net, const Dataset& val, const TrainConfig& cfg) {
  ValMetrics m;
  const Flags clean = clean_flags(net, val);
  m.clean = mean_flag(clean);
  std::vector<Flags> per;
  for (const auto& t : cfg.threats) {
    if (t.is_identity()) {
      per.push_back(clean);
    } else {
      AttackConfig a = cfg.attack_for(t);
      a.rng_seed = mix_seed(cfg.seed, 0x7a1);
      per.push_back(robust_flags(net, val, t, a));
    }
  }
  m.robust = union_robust_accuracy(per);
  return m;
}

// Per-example deltas for one batch. Every threat's attack runs against the
// frozen current parameters.
std::vector<std::vector<double>> batch_deltas(const Network<float>& net, const Tensor<float>& x,
                                              std::span<const int> y,
                                              std::span<const std::uint64_t> ids,
                                              const TrainConfig& cfg, std::size_t step,
                                              std::span<const std::size_t> threat_choice,
                                              StepLog* log) {
  const std::size_t B = y.size(), d = x.size() / std::max<std::size_t>(1, B);
  auto attack_all = [&](const ThreatSpec& t) {
    std::vector<std::vector<double>> out(B, std::vector<double>(d, 0.0));
    if (t.is_identity()) return out;
    AttackConfig a = cfg.attack_for(t);
    a.rng_seed = mix_seed(cfg.seed, 0xa7, step);
    parallel_for(B, kAttackGrain, [&](std::size_t begin, std::size_t end) {
      std::vector<std::size_t> rows(end - begin);
      std::iota(rows.begin(), rows.end(), begin);
      Tensor<float> xs({rows.size(), x.dim(1), x.dim(2), x.dim(3)});
      std::copy(x.raw() + begin * d, x.raw() + end * d, xs.raw());
      const auto res = run_attack_batch(net, xs, y.subspan(begin, end - begin),
                                        ids.subspan(begin, end - begin), t, a);
      for (std::size_t r = 0; r < rows.size(); ++r) out[begin + r] = res[r].delta;
    });
    return out;
  };

  if (cfg.mode != MultiThreatMode::max) {
    const std::size_t k = threat_choice.empty() ? 0 : threat_choice[0];
    if (log) log->chosen_threat.assign(B, k);
    return attack_all(cfg.threats[k]);
  }
  // MAX: per example, the threat whose perturbation gives the largest loss.
  std::vector<std::vector<std::vector<double>>> all;
  std::vector<std::vector<double>> losses;
  for (const auto& t : cfg.threats) {
    all.push_back(attack_all(t));
    Tape<float> tape;
    Var logits = net.forward(tape, tape.leaf(perturb(x, all.back())), false);
    const auto& ce = tape.value(tape.cross_entropy(logits, y));
    losses.emplace_back(ce.data().begin(), ce.data().end());
  }
  std::vector<std::vector<double>> out(B);
  std::vector<std::size_t> chosen(B, 0);
  for (std::size_t r = 0; r < B; ++r) {
    for (std::size_t k = 1; k < all.size(); ++k)
      if (losses[k][r] > losses[chosen[r]][r]) chosen[r] = k;
    out[r] = std::move(all[chosen[r]][r]);
  }
  if (log) {
    log->chosen_threat = chosen;
    log->threat_loss = losses;
  }
  return out;
}

Checkpoint run_training(const ModelInit& init, const Dataset& data, const TrainConfig& cfg,
                        const std::string& op, const TrainHooks& hooks) {
  cfg.validate();
  data.validate();
  if (data.size() < 2) throw DataError("train: dataset '" + data.id + "' needs at least 2 points");
  if (init.params.schema_hash() != schema_hash_of(Network<float>(init.arch))) {
    throw SchemaError("train: initial parameters do not match " + init.arch.id());
  }
  auto [train_set, val_full] = split_holdout(data, cfg.validation_fraction, cfg.seed);
  if (train_set.size() == 0 || val_full.size() == 0) {
    throw DataError("train: dataset too small for a validation split");
  }
  Dataset val = val_full;
  if (val.size() > cfg.validation_max_points) {
    std::vector<std::size_t> keep(cfg.validation_max_points);
    std::iota(keep.begin(), keep.end(), 0);
    val = val_full.subset(keep, val_full.id);
  }

  Network<float> net = make_network(init.arch, init.params);
  std::vector<Tensor<float>> velocity;
  for (const auto& p : net.params()) velocity.emplace_back(p.tensor.shape());

  const std::size_t n = train_set.size();
  const std::size_t per_epoch = (n + cfg.batch_size - 1) / cfg.batch_size;
  const auto total = static_cast<std::size_t>(std::llround(cfg.epochs * static_cast<double>(per_epoch)));
  const auto sat = sat_schedule(cfg.seed, total, cfg.threats.size());

  std::vector<HistoryEntry> history;
  auto snapshot = [&](double epoch, double train_loss, double lr) {
    const auto m = validate_model(net, val, cfg);
    history.push_back({epoch, extract(net), m.clean, m.robust});
    if (hooks.on_epoch) hooks.on_epoch({epoch, train_loss, m.clean, m.robust, lr});
  };
  if (total == 0) snapshot(0.0, 0.0, 0.0);

  std::size_t step = 0;
  for (std::size_t epoch = 0; step < total; ++epoch) {
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), 0);
    auto rng = make_rng(cfg.seed, 0x5e, epoch);
    std::shuffle(order.begin(), order.end(), rng);
    double loss_sum = 0.0;
    std::size_t loss_count = 0;
    double lr = 0.0;
    for (std::size_t b = 0; b < per_epoch && step < total; ++b) {
      ++step;
      lr = lr_at(step, total, cfg.peak_lr, cfg.ramp_fraction);
      const std::size_t begin = b * cfg.batch_size, end = std::min(n, begin + cfg.batch_size);
      std::span<const std::size_t> idx(order.data() + begin, end - begin);
      const Tensor<float> x = train_set.gather(idx);
      const std::vector<int> y = train_set.gather_labels(idx);
      const std::vector<std::uint64_t> ids(idx.begin(), idx.end());

      StepLog slog;
      slog.step = step;
      std::vector<std::size_t> choice;
      if (cfg.mode == MultiThreatMode::sat) choice = {sat[step - 1]};
      const auto deltas =
          batch_deltas(net, x, y, ids, cfg, step, choice, hooks.on_step ? &slog : nullptr);

      Tape<float> tape;
      std::vector<Var> pvars;
      Var logits = net.forward(tape, tape.leaf(perturb(x, deltas)), true, &pvars);
      Var per_example = tape.cross_entropy(logits, y);
      Var loss = tape.mean(per_example);
      const double loss_value = tape.value(loss).item();
      if (!std::isfinite(loss_value)) {
        throw NumericError("train: non-finite loss at epoch " + std::to_string(epoch) + " batch " +
                           std::to_string(b) + " (step " + std::to_string(step) + ", lr " +
                           std::to_string(lr) + ")");
      }
      tape.backward(loss);
      auto& params = net.params();
      for (std::size_t i = 0; i < params.size(); ++i) {
        const auto& g = tape.grad(pvars[i]);
        auto& w = params[i].tensor;
        auto& v = velocity[i];
        const float mu = static_cast<float>(cfg.momentum);
        const float wd = static_cast<float>(cfg.weight_decay);
        const float eta = static_cast<float>(lr);
        for (std::size_t j = 0; j < w.size(); ++j) {
          v[j] = mu * v[j] + (g[j] + wd * w[j]);
          w[j] -= eta * v[j];
        }
      }
      loss_sum += loss_value;
      ++loss_count;
      if (hooks.on_step) {
        slog.batch_loss = loss_value;
        const auto& pe = tape.value(per_example);
        slog.trained_loss.assign(pe.data().begin(), pe.data().end());
        hooks.on_step(slog);
      }
    }
    const double epoch_value =
        static_cast<double>(step) / static_cast<double>(per_epoch);
    snapshot(epoch_value, loss_count ? loss_sum / static_cast<double>(loss_count) : 0.0, lr);
  }

  const auto& chosen = history[select_checkpoint(history)];
  Checkpoint ck;
  ck.arch = init.arch;
  ck.params = chosen.params;
  ck.lineage = init.lineage;
  ck.lineage.push_back({op, cfg.threats, cfg.epochs, {}});
  ck.val_clean_acc = chosen.val_clean_acc;
  ck.val_robust_acc = chosen.val_robust_acc;
  ck.seed = cfg.seed;
  return ck;
}

}  // namespace

Checkpoint train(const ModelInit& init, const Dataset& data, const TrainConfig& cfg,
                 const TrainHooks& hooks) {
  const char* op = cfg.mode == MultiThreatMode::max   ? "train_max"
                   : cfg.mode == MultiThreatMode::sat ? "train_sat"
                                                      : "train";
  return run_training(init, data, cfg, op, hooks);
}

Checkpoint finetune(const Checkpoint& base, const ThreatSpec& target, const Dataset& data,
                    const TrainConfig& cfg, const TrainHooks& hooks) {
  TrainConfig c = cfg;
  c.threats = {target};
  c.mode = MultiThreatMode::single;
  c.peak_lr = cfg.peak_lr * cfg.finetune_lr_factor;
  return run_training(ModelInit::from(base), data, c, "finetune", hooks);
}

Checkpoint train_max(const ModelInit& init, const Dataset& data,
                     std::span<const ThreatSpec> threats, const TrainConfig& cfg,
                     const TrainHooks& hooks) {
  TrainConfig c = cfg;
  c.threats.assign(threats.begin(), threats.end());
  c.mode = MultiThreatMode::max;
  return run_training(init, data, c, "train_max", hooks);
}

Checkpoint train_sat(const ModelInit& init, const Dataset& data,
                     std::span<const ThreatSpec> threats, const TrainConfig& cfg,
                     const TrainHooks& hooks) {
  TrainConfig c = cfg;
  c.threats.assign(threats.begin(), threats.end());
  c.mode = MultiThreatMode::sat;
  return run_training(init, data, c, "train_sat", hooks);
}

}  // namespace rsoup
