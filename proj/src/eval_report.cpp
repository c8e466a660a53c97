#include "rsoup/eval_report.hpp"

#include <cmath>
#include <numeric>
#include <sstream>
#include <stdexcept>

#include "rsoup/parallel.hpp"

namespace rsoup {

namespace {

std::string fmt_double(double v) {
  std::ostringstream os;
  os.precision(17);
  os << v;
  return os.str();
}

}  // namespace

nlohmann::json EvalReport::to_json() const {
  nlohmann::json j;
  j["schema_version"] = kReportSchemaVersion;
  j["model_id"] = model_id;
  j["dataset_id"] = dataset_id;
  j["clean_acc"] = clean_acc;
  j["robust_acc"] = robust_acc;
  j["union_robust_acc"] = union_robust_acc;
  j["n_points"] = n_points;
  j["attack_digest"] = attack_digest;
  if (!flags.empty()) {
    nlohmann::json f;
    for (const auto& [k, v] : flags) {
      std::string bits;
      for (auto b : v) bits += b ? '1' : '0';
      f[k] = bits;
    }
    j["flags"] = f;
  }
  return j;
}

std::string EvalReport::csv_header(std::span<const std::string> threat_names) {
  std::string h = "schema_version,model_id,dataset_id,n_points,clean_acc";
  for (const auto& t : threat_names) h += ",robust_" + t;
  return h + ",union_robust_acc";
}

std::string EvalReport::csv_row(std::span<const std::string> threat_names) const {
  std::string r = std::to_string(kReportSchemaVersion) + "," + model_id + "," + dataset_id + "," +
                  std::to_string(n_points) + "," + fmt_double(clean_acc);
  for (const auto& t : threat_names) {
    auto it = robust_acc.find(t);
    r += "," + (it == robust_acc.end() ? std::string() : fmt_double(it->second));
  }
  return r + "," + fmt_double(union_robust_acc);
}

double mean_flag(std::span<const std::uint8_t> flags) {
  if (flags.empty()) throw std::invalid_argument("mean_flag: empty flag vector");
  std::size_t n = 0;
  for (auto f : flags) n += f ? 1 : 0;
  return static_cast<double>(n) / static_cast<double>(flags.size());
}

double clean_accuracy(const Network<float>& model, const Dataset& data) {
  if (data.size() == 0) throw DataError("clean_accuracy: empty dataset '" + data.id + "'");
  return mean_flag(clean_flags(model, data));
}

Flags union_flags(std::span<const Flags> flag_vectors) {
  if (flag_vectors.empty()) throw std::invalid_argument("union_flags: no flag vectors");
  Flags out = flag_vectors[0];
  for (std::size_t t = 1; t < flag_vectors.size(); ++t) {
    if (flag_vectors[t].size() != out.size()) {
      throw std::invalid_argument("union_flags: length " + std::to_string(flag_vectors[t].size()) +
                                  " vs " + std::to_string(out.size()));
    }
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = out[i] && flag_vectors[t][i];
  }
  return out;
}

double union_robust_accuracy(std::span<const Flags> flag_vectors) {
  return mean_flag(union_flags(flag_vectors));
}

double softmax_ensemble_accuracy(std::span<const Network<float>* const> models,
                                 const Dataset& data) {
  if (models.empty()) throw std::invalid_argument("softmax_ensemble_accuracy: no models");
  if (data.size() == 0) throw DataError("softmax_ensemble_accuracy: empty dataset");
  const std::size_t K = models[0]->arch().classes;
  for (const auto* m : models) {
    if (m->arch().classes != K) {
      throw std::invalid_argument("softmax_ensemble_accuracy: output arity " +
                                  std::to_string(m->arch().classes) + " vs " + std::to_string(K));
    }
  }
  Flags correct(data.size(), 0);
  parallel_for(data.size(), 256, [&](std::size_t begin, std::size_t end) {
    std::vector<std::size_t> idx(end - begin);
    std::iota(idx.begin(), idx.end(), begin);
    const auto batch = data.gather(idx);
    std::vector<double> avg(idx.size() * K, 0.0);
    for (const auto* m : models) {
      const auto logits = m->logits(batch);
      for (std::size_t r = 0; r < idx.size(); ++r) {
        const float* row = logits.raw() + r * K;
        double mx = row[0];
        for (std::size_t j = 1; j < K; ++j) mx = std::max(mx, static_cast<double>(row[j]));
        double z = 0;
        for (std::size_t j = 0; j < K; ++j) z += std::exp(row[j] - mx);
        for (std::size_t j = 0; j < K; ++j) avg[r * K + j] += std::exp(row[j] - mx) / z;
      }
    }
    for (std::size_t r = 0; r < idx.size(); ++r) {
      std::size_t best = 0;
      for (std::size_t j = 1; j < K; ++j)
        if (avg[r * K + j] > avg[r * K + best]) best = j;
      correct[begin + r] = static_cast<int>(best) == data.labels[begin + r];
    }
  });
  return mean_flag(correct);
}

EvalReport evaluate_model(const Network<float>& model, const std::string& model_id,
                          const Dataset& data, std::span<const ThreatSpec> threats,
                          const AttackConfig& cfg, bool keep_flags) {
  if (data.size() == 0) throw DataError("evaluate_model: empty dataset '" + data.id + "'");
  EvalReport rep;
  rep.model_id = model_id;
  rep.dataset_id = data.id;
  rep.n_points = data.size();
  rep.attack_digest = hex64(cfg.digest());
  const Flags clean = clean_flags(model, data);
  rep.clean_acc = mean_flag(clean);
  std::vector<Flags> per_threat;
  for (const auto& t : threats) {
    auto f = robust_flags(model, data, t, cfg);
    rep.robust_acc[t.name()] = mean_flag(f);
    if (keep_flags) rep.flags["robust_" + t.name()] = f;
    per_threat.push_back(std::move(f));
  }
  rep.union_robust_acc = per_threat.empty() ? rep.clean_acc : union_robust_accuracy(per_threat);
  if (keep_flags) rep.flags["clean"] = clean;
  return rep;
}

std::vector<FrontEntry> tradeoff_front(std::span<const SweepPoint> sweep) {
  std::vector<FrontEntry> out;
  out.reserve(sweep.size());
  for (const auto& p : sweep) {
    bool dominated = false;
    for (const auto& q : sweep) {
      if (q.metric_a > p.metric_a && q.metric_b > p.metric_b) {
        dominated = true;
        break;
      }
    }
    out.push_back({p, dominated});
  }
  return out;
}

}  // namespace rsoup
