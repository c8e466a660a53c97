#include "rsoup/threats.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <stdexcept>

#include "rsoup/parallel.hpp"

namespace rsoup {

std::string norm_name(Norm n) {
  switch (n) {
    case Norm::linf: return "linf";
    case Norm::l2: return "l2";
    case Norm::l1: return "l1";
    case Norm::nominal: return "nominal";
  }
  return "?";
}

Norm parse_norm(const std::string& s) {
  if (s == "linf" || s == "Linf" || s == "inf") return Norm::linf;
  if (s == "l2" || s == "L2") return Norm::l2;
  if (s == "l1" || s == "L1") return Norm::l1;
  if (s == "nominal" || s == "none") return Norm::nominal;
  throw std::invalid_argument("unknown norm '" + s + "' (expected linf, l2, l1 or nominal)");
}

ThreatSpec ThreatSpec::standard(Norm norm, std::size_t input_dim) {
  const double ratio = static_cast<double>(input_dim) / 3072.0;
  switch (norm) {
    case Norm::linf: return {norm, 8.0 / 255.0};
    case Norm::l2: return {norm, 128.0 / 255.0 * std::sqrt(ratio)};
    case Norm::l1: return {norm, 12.0 * ratio};
    case Norm::nominal: return nominal();
  }
  return nominal();
}

std::string ThreatSpec::name() const { return norm_name(norm); }

std::string ThreatSpec::describe() const {
  if (norm == Norm::nominal) return "nominal";
  return name() + "(eps=" + std::to_string(epsilon) + ")";
}

std::string attack_loss_name(AttackLoss l) {
  return l == AttackLoss::cross_entropy ? "cross_entropy" : "kl_to_clean";
}

AttackLoss parse_attack_loss(const std::string& s) {
  if (s == "cross_entropy" || s == "ce") return AttackLoss::cross_entropy;
  if (s == "kl_to_clean" || s == "kl") return AttackLoss::kl_to_clean;
  throw std::invalid_argument("unknown attack loss '" + s + "'");
}

double AttackConfig::step_size_for(const ThreatSpec& spec) const {
  if (initial_step_size) return *initial_step_size;
  return 2.0 * spec.epsilon / static_cast<double>(std::max(1, steps));
}

void AttackConfig::validate() const {
  if (steps < 1) throw std::invalid_argument("attack: steps must be positive");
  if (restarts < 1) throw std::invalid_argument("attack: restarts must be positive");
  if (!(l1_sparsity_fraction > 0.0 && l1_sparsity_fraction <= 1.0)) {
    throw std::invalid_argument("attack: l1_sparsity_fraction must be in (0, 1]");
  }
  if (initial_step_size && !(*initial_step_size >= 0.0)) {
    throw std::invalid_argument("attack: initial_step_size must be nonnegative");
  }
}

std::uint64_t AttackConfig::digest() const {
  Fnv1a h;
  h.update_value(static_cast<std::int64_t>(steps));
  const double step = initial_step_size.value_or(-1.0);
  h.update_value(step);
  h.update_value(static_cast<std::int32_t>(loss));
  h.update_value(static_cast<std::int64_t>(restarts));
  h.update_value(l1_sparsity_fraction);
  h.update_value(rng_seed);
  return h.digest();
}

int halving_window(int steps) {
  return std::max(1, static_cast<int>(std::ceil(0.22 * static_cast<double>(steps) - 1e-12)));
}

double lp_norm(std::span<const double> v, Norm norm) {
  double acc = 0.0;
  switch (norm) {
    case Norm::linf:
      for (double x : v) acc = std::max(acc, std::abs(x));
      return acc;
    case Norm::l2:
      for (double x : v) acc += x * x;
      return std::sqrt(acc);
    case Norm::l1:
      for (double x : v) acc += std::abs(x);
      return acc;
    case Norm::nominal:
      for (double x : v)
        if (x != 0.0) return std::numeric_limits<double>::infinity();
      return 0.0;
  }
  return acc;
}

std::vector<double> project_l2_ball(std::span<const double> v, double radius) {
  std::vector<double> out(v.begin(), v.end());
  const double n = lp_norm(v, Norm::l2);
  if (n > radius) {
    const double s = radius / n;
    for (auto& x : out) x *= s;
  }
  return out;
}

std::vector<double> project_l1_ball(std::span<const double> v, double radius) {
  std::vector<double> out(v.begin(), v.end());
  if (lp_norm(v, Norm::l1) <= radius) return out;
  if (radius <= 0.0) {
    std::fill(out.begin(), out.end(), 0.0);
    return out;
  }
  // Simplex projection of |v| with threshold from the sorted magnitudes.
  std::vector<double> u(v.size());
  for (std::size_t i = 0; i < v.size(); ++i) u[i] = std::abs(v[i]);
  std::sort(u.begin(), u.end(), std::greater<>());
  double cumsum = 0.0, theta = 0.0;
  for (std::size_t j = 0; j < u.size(); ++j) {
    cumsum += u[j];
    const double t = (cumsum - radius) / static_cast<double>(j + 1);
    if (u[j] - t > 0.0) theta = t;
  }
  for (std::size_t i = 0; i < v.size(); ++i) {
    const double m = std::max(std::abs(v[i]) - theta, 0.0);
    out[i] = v[i] < 0 ? -m : m;
  }
  return out;
}

std::vector<double> project_box(std::span<const double> delta, std::span<const float> x) {
  std::vector<double> out(delta.size());
  for (std::size_t i = 0; i < delta.size(); ++i) {
    const double xi = x[i];
    out[i] = std::clamp(delta[i], -xi, 1.0 - xi);
  }
  return out;
}

namespace {

std::vector<double> project_ball(std::span<const double> v, const ThreatSpec& spec) {
  return spec.norm == Norm::l2 ? project_l2_ball(v, spec.epsilon)
                               : project_l1_ball(v, spec.epsilon);
}

}  // namespace

std::vector<double> project_dykstra(std::span<const double> delta, std::span<const float> x,
                                    const ThreatSpec& spec, DykstraTrace* trace,
                                    int max_rounds) {
  const std::size_t d = delta.size();
  std::vector<double> y(delta.begin(), delta.end()), p(d, 0.0), q(d, 0.0), tmp(d);
  DykstraTrace tr;
  for (int round = 1; round <= max_rounds; ++round) {
    for (std::size_t i = 0; i < d; ++i) tmp[i] = y[i] + p[i];
    auto a = project_ball(tmp, spec);
    for (std::size_t i = 0; i < d; ++i) {
      p[i] = tmp[i] - a[i];
      tmp[i] = a[i] + q[i];
    }
    auto next = project_box(tmp, x);
    double move = 0.0;
    for (std::size_t i = 0; i < d; ++i) {
      q[i] = tmp[i] - next[i];
      move = std::max(move, std::abs(next[i] - y[i]));
    }
    y = std::move(next);
    tr.rounds = round;
    tr.last_movement = move;
    if (move < kDykstraTolerance) break;
  }
  if (trace) *trace = tr;
  return y;
}

std::vector<double> project(std::span<const double> delta, std::span<const float> x,
                            const ThreatSpec& spec) {
  if (delta.size() != x.size()) {
    throw std::invalid_argument("project: delta has " + std::to_string(delta.size()) +
                                " entries, x has " + std::to_string(x.size()));
  }
  if (spec.is_identity()) return std::vector<double>(delta.size(), 0.0);
  if (spec.norm == Norm::linf) {
    std::vector<double> out(delta.size());
    for (std::size_t i = 0; i < delta.size(); ++i) {
      const double xi = x[i];
      const double lo = std::max(-spec.epsilon, -xi), hi = std::min(spec.epsilon, 1.0 - xi);
      out[i] = std::clamp(delta[i], lo, hi);
    }
    return out;
  }
  auto y = project_dykstra(delta, x, spec);
  // Box clamping never increases |delta_i| (0 lies in every box interval), so
  // this final pass is feasible for both sets and leaves feasible y unchanged.
  return project_box(project_ball(y, spec), x);
}

std::vector<double> attack_step_direction(std::span<const double> grad, const ThreatSpec& spec,
                                          const AttackConfig& cfg) {
  const std::size_t d = grad.size();
  std::vector<double> out(d, 0.0);
  auto sign = [](double v) { return v > 0 ? 1.0 : (v < 0 ? -1.0 : 0.0); };
  switch (spec.norm) {
    case Norm::nominal:
      return out;
    case Norm::linf:
      for (std::size_t i = 0; i < d; ++i) out[i] = sign(grad[i]);
      return out;
    case Norm::l2: {
      const double n = lp_norm(grad, Norm::l2);
      if (n > 0.0)
        for (std::size_t i = 0; i < d; ++i) out[i] = grad[i] / n;
      return out;
    }
    case Norm::l1: {
      if (d == 0) return out;
      const double raw = cfg.l1_sparsity_fraction * static_cast<double>(d);
      const std::size_t k = std::clamp<std::size_t>(
          static_cast<std::size_t>(std::ceil(raw - 1e-9)), 1, d);
      std::vector<std::size_t> idx(d);
      std::iota(idx.begin(), idx.end(), 0);
      std::partial_sort(idx.begin(), idx.begin() + static_cast<long>(k), idx.end(),
                        [&](std::size_t a, std::size_t b) {
                          const double ga = std::abs(grad[a]), gb = std::abs(grad[b]);
                          return ga != gb ? ga > gb : a < b;
                        });
      const double mass = 1.0 / static_cast<double>(k);
      for (std::size_t j = 0; j < k; ++j) out[idx[j]] = sign(grad[idx[j]]) * mass;
      return out;
    }
  }
  return out;
}

Tensor<float> perturb(const Tensor<float>& images, const std::vector<std::vector<double>>& deltas) {
  if (images.rank() == 0 || images.dim(0) != deltas.size()) {
    throw std::invalid_argument("perturb: batch size mismatch");
  }
  Tensor<float> out(images.shape());
  const std::size_t d = images.size() / images.dim(0);
  for (std::size_t r = 0; r < deltas.size(); ++r)
    for (std::size_t i = 0; i < d; ++i)
      out[r * d + i] = static_cast<float>(static_cast<double>(images[r * d + i]) + deltas[r][i]);
  return out;
}

namespace {

struct PointState {
  std::vector<double> delta, prev;
  std::vector<double> run_best_delta;  // restart-local max-loss iterate
  double run_best_loss = -std::numeric_limits<double>::infinity();
  double window_start_loss = -std::numeric_limits<double>::infinity();
  double eta = 0.0;
};

struct Evaluation {
  std::vector<double> loss;
  std::vector<bool> mis;
  Tensor<float> input_grad;
};

Evaluation evaluate(const Network<float>& model, const Tensor<float>& input,
                    std::span<const int> labels, const Tensor<float>* clean_logits,
                    bool want_grad) {
  Tape<float> tape;
  Var x = tape.leaf(input, want_grad);
  Var logits = model.forward(tape, x, false);
  Var per_point = clean_logits ? tape.kl_divergence(tape.leaf(*clean_logits), logits)
                               : tape.cross_entropy(logits, labels);
  Evaluation ev;
  const auto& lv = tape.value(per_point);
  ev.loss.assign(lv.data().begin(), lv.data().end());
  const auto pred = argmax_rows(tape.value(logits));
  ev.mis.resize(labels.size());
  for (std::size_t r = 0; r < labels.size(); ++r) ev.mis[r] = pred[r] != labels[r];
  if (want_grad) {
    tape.backward(tape.sum(per_point));
    ev.input_grad = tape.grad(x);
  }
  return ev;
}

std::vector<double> random_start(const ThreatSpec& spec, std::span<const float> x,
                                 std::mt19937_64& rng, double scale) {
  const std::size_t d = x.size();
  std::vector<double> v(d);
  std::normal_distribution<double> g(0.0, 1.0);
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  if (spec.norm == Norm::linf) {
    for (auto& e : v) e = scale * spec.epsilon * u(rng);
  } else {
    for (auto& e : v) e = g(rng);
    const double n = lp_norm(v, spec.norm);
    const double r = scale * spec.epsilon * std::abs(u(rng));
    if (n > 0)
      for (auto& e : v) e *= r / n;
  }
  return project(v, x, spec);
}

}  // namespace

std::vector<AttackResult> run_attack_batch(const Network<float>& model,
                                           const Tensor<float>& images,
                                           std::span<const int> labels,
                                           std::span<const std::uint64_t> point_ids,
                                           const ThreatSpec& spec, const AttackConfig& cfg) {
  cfg.validate();
  const std::size_t B = labels.size();
  if (images.rank() != 4 || images.dim(0) != B || point_ids.size() != B) {
    throw std::invalid_argument("run_attack_batch: images/labels/point_ids size mismatch");
  }
  const std::size_t d = B ? images.size() / B : 0;
  auto x_of = [&](std::size_t r) { return images.data().subspan(r * d, d); };

  std::vector<AttackResult> best(B);
  for (auto& b : best) {
    b.delta.assign(d, 0.0);
    b.loss = -std::numeric_limits<double>::infinity();
  }
  auto consider = [&](std::size_t r, const std::vector<double>& delta, double loss, bool mis) {
    auto& b = best[r];
    const bool better = (mis && !b.success) || (mis == b.success && loss > b.loss);
    if (better) {
      b.delta = delta;
      b.loss = loss;
      b.success = mis;
    }
  };

  const bool kl = cfg.loss == AttackLoss::kl_to_clean;
  Tensor<float> clean_logits;
  if (kl) clean_logits = model.logits(images);
  const Tensor<float>* clean_ptr = kl ? &clean_logits : nullptr;

  // delta = 0 is always a candidate; restart 0 covers it unless it starts elsewhere.
  if (kl || spec.is_identity() || B == 0) {
    const auto ev = evaluate(model, images, labels, clean_ptr, false);
    const std::vector<double> zero(d, 0.0);
    for (std::size_t r = 0; r < B; ++r) consider(r, zero, ev.loss[r], ev.mis[r]);
  }
  if (spec.is_identity() || B == 0) return best;

  const double eta0 = cfg.step_size_for(spec);
  const int window = halving_window(cfg.steps);
  constexpr double kMomentum = 0.75;
  const bool mask_box = spec.norm == Norm::l1 || spec.norm == Norm::l2;

  for (int restart = 0; restart < cfg.restarts; ++restart) {
    std::vector<PointState> st(B);
    for (std::size_t r = 0; r < B; ++r) {
      auto& s = st[r];
      if (restart == 0 && !kl) {
        s.delta.assign(d, 0.0);
      } else {
        auto rng = make_rng(cfg.rng_seed, 0xa77ac0 + static_cast<std::uint64_t>(restart),
                            point_ids[r]);
        // KL to the clean output has a vanishing gradient at 0; start nearby.
        s.delta = random_start(spec, x_of(r), rng, restart == 0 ? 1e-3 : 1.0);
      }
      s.prev = s.delta;
      s.run_best_delta = s.delta;
      s.eta = eta0;
    }
    for (int it = 0; it <= cfg.steps; ++it) {
      std::vector<std::vector<double>> deltas(B);
      for (std::size_t r = 0; r < B; ++r) deltas[r] = st[r].delta;
      const bool last = it == cfg.steps;
      const auto ev = evaluate(model, perturb(images, deltas), labels, clean_ptr, !last);
      for (std::size_t r = 0; r < B; ++r) {
        consider(r, st[r].delta, ev.loss[r], ev.mis[r]);
        if (ev.loss[r] > st[r].run_best_loss) {
          st[r].run_best_loss = ev.loss[r];
          st[r].run_best_delta = st[r].delta;
        }
      }
      if (last) break;
      for (std::size_t r = 0; r < B; ++r) {
        auto& s = st[r];
        const auto x = x_of(r);
        std::vector<double> g(ev.input_grad.raw() + r * d, ev.input_grad.raw() + (r + 1) * d);
        if (mask_box) {
          for (std::size_t i = 0; i < d; ++i) {
            const double xi = static_cast<double>(x[i]) + s.delta[i];
            if ((g[i] > 0 && xi >= 1.0) || (g[i] < 0 && xi <= 0.0)) g[i] = 0.0;
          }
        }
        const auto dir = attack_step_direction(g, spec, cfg);
        std::vector<double> z(d);
        for (std::size_t i = 0; i < d; ++i) z[i] = s.delta[i] + s.eta * dir[i];
        z = project(z, x, spec);
        std::vector<double> next;
        if (it == 0) {
          next = std::move(z);
        } else {
          std::vector<double> m(d);
          for (std::size_t i = 0; i < d; ++i) {
            m[i] = s.delta[i] + kMomentum * (z[i] - s.delta[i]) +
                   (1.0 - kMomentum) * (s.delta[i] - s.prev[i]);
          }
          next = project(m, x, spec);
        }
        s.prev = std::move(s.delta);
        s.delta = std::move(next);
        if ((it + 1) % window == 0) {
          if (!(s.run_best_loss > s.window_start_loss)) {
            s.eta *= 0.5;
            s.delta = s.run_best_delta;
            s.prev = s.run_best_delta;
          }
          s.window_start_loss = s.run_best_loss;
        }
      }
    }
  }
  return best;
}

AttackResult run_attack(const Network<float>& model, std::span<const float> x, int label,
                        const ThreatSpec& spec, const AttackConfig& cfg, std::uint64_t point_id) {
  const auto& a = model.arch();
  if (x.size() != a.input_dim()) {
    throw std::invalid_argument("run_attack: input has " + std::to_string(x.size()) +
                                " values, model expects " + std::to_string(a.input_dim()));
  }
  Tensor<float> img(a.input_shape(1), std::vector<float>(x.begin(), x.end()));
  const int labels[] = {label};
  const std::uint64_t ids[] = {point_id};
  return run_attack_batch(model, img, labels, ids, spec, cfg)[0];
}

namespace {
constexpr std::size_t kAttackGrain = 32;
}

std::vector<std::uint8_t> robust_flags(const Network<float>& model, const Dataset& data,
                                       const ThreatSpec& spec, const AttackConfig& cfg) {
  std::vector<std::uint8_t> flags(data.size(), 0);
  parallel_for(data.size(), kAttackGrain, [&](std::size_t begin, std::size_t end) {
    std::vector<std::size_t> idx(end - begin);
    std::iota(idx.begin(), idx.end(), begin);
    std::vector<std::uint64_t> ids(idx.begin(), idx.end());
    const auto labels = data.gather_labels(idx);
    const auto res = run_attack_batch(model, data.gather(idx), labels, ids, spec, cfg);
    for (std::size_t r = 0; r < idx.size(); ++r) flags[begin + r] = res[r].success ? 0 : 1;
  });
  return flags;
}

std::vector<std::uint8_t> clean_flags(const Network<float>& model, const Dataset& data) {
  std::vector<std::uint8_t> flags(data.size(), 0);
  parallel_for(data.size(), 256, [&](std::size_t begin, std::size_t end) {
    std::vector<std::size_t> idx(end - begin);
    std::iota(idx.begin(), idx.end(), begin);
    const auto pred = argmax_rows(model.logits(data.gather(idx)));
    for (std::size_t r = 0; r < idx.size(); ++r)
      flags[begin + r] = pred[r] == data.labels[begin + r] ? 1 : 0;
  });
  return flags;
}

}  // namespace rsoup
