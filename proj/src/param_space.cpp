#include "rsoup/param_space.hpp"

#include <cmath>
#include <set>

#include "rsoup/parallel.hpp"

namespace rsoup {

namespace {

std::uint64_t hash_schema(const std::vector<NamedTensor<float>>& entries) {
  Fnv1a h;
  h.update_value(static_cast<std::uint64_t>(entries.size()));
  for (const auto& e : entries) {
    h.update_string(e.name);
    h.update_value(static_cast<std::uint64_t>(e.tensor.rank()));
    for (auto d : e.tensor.shape()) h.update_value(static_cast<std::uint64_t>(d));
  }
  return h.digest();
}

std::string describe_mismatch(const std::vector<NamedTensor<float>>& a,
                              const std::vector<NamedTensor<float>>& b) {
  const std::size_t n = std::min(a.size(), b.size());
  for (std::size_t i = 0; i < n; ++i) {
    if (a[i].name != b[i].name || a[i].tensor.shape() != b[i].tensor.shape()) {
      return "entry " + std::to_string(i) + ": '" + a[i].name + "' " +
             shape_to_string(a[i].tensor.shape()) + " vs '" + b[i].name + "' " +
             shape_to_string(b[i].tensor.shape());
    }
  }
  if (a.size() != b.size()) {
    return "entry count " + std::to_string(a.size()) + " vs " + std::to_string(b.size());
  }
  return "";
}

}  // namespace

ParamVector::ParamVector(std::vector<NamedTensor<float>> entries) : entries_(std::move(entries)) {
  std::set<std::string> seen;
  for (const auto& e : entries_) {
    if (!seen.insert(e.name).second) throw SchemaError("duplicate parameter name '" + e.name + "'");
  }
  schema_hash_ = hash_schema(entries_);
}

std::size_t ParamVector::num_values() const {
  std::size_t n = 0;
  for (const auto& e : entries_) n += e.tensor.size();
  return n;
}

std::string ParamVector::first_mismatch(const ParamVector& other) const {
  return describe_mismatch(entries_, other.entries_);
}

bool operator==(const ParamVector& a, const ParamVector& b) {
  if (a.schema_hash_ != b.schema_hash_ || a.entries_.size() != b.entries_.size()) return false;
  for (std::size_t i = 0; i < a.entries_.size(); ++i) {
    if (a.entries_[i].name != b.entries_[i].name || !(a.entries_[i].tensor == b.entries_[i].tensor))
      return false;
  }
  return true;
}

std::uint64_t schema_hash_of(const Network<float>& model) { return hash_schema(model.params()); }

ParamVector extract(const Network<float>& model) { return ParamVector(model.params()); }

void inject(Network<float>& model, const ParamVector& pv) {
  if (hash_schema(model.params()) != pv.schema_hash()) {
    throw SchemaError("inject: schema mismatch for " + model.arch().id() + ": " +
                      describe_mismatch(model.params(), pv.entries()));
  }
  auto& params = model.params();
  for (std::size_t i = 0; i < params.size(); ++i) params[i].tensor = pv.entries()[i].tensor;
}

Network<float> make_network(const ArchSpec& arch, const ParamVector& pv) {
  Network<float> net(arch);
  inject(net, pv);
  return net;
}

SoupWeights::SoupWeights(std::vector<double> weights, SoupMode mode)
    : w_(std::move(weights)), mode_(mode) {
  if (w_.empty()) throw WeightError("soup weights: empty");
  double sum = 0;
  for (double v : w_) {
    if (!std::isfinite(v)) throw WeightError("soup weights: non-finite entry");
    if (mode_ == SoupMode::convex && v < 0) {
      throw WeightError("soup weights: negative entry " + std::to_string(v) + " in convex mode");
    }
    sum += v;
  }
  if (std::abs(sum - 1.0) > kSumTolerance) {
    throw WeightError("soup weights: sum " + std::to_string(sum) + " != 1");
  }
}

SoupWeights SoupWeights::one_hot(std::size_t n, std::size_t k) {
  std::vector<double> w(n, 0.0);
  w.at(k) = 1.0;
  return SoupWeights(std::move(w), SoupMode::convex);
}

ParamVector affine_combine(std::span<const ParamVector> vectors, const SoupWeights& w) {
  if (vectors.empty()) throw WeightError("affine_combine: no vectors");
  if (vectors.size() != w.size()) {
    throw WeightError("affine_combine: " + std::to_string(vectors.size()) + " vectors but " +
                      std::to_string(w.size()) + " weights");
  }
  for (std::size_t i = 1; i < vectors.size(); ++i) {
    if (!vectors[i].combinable_with(vectors[0])) {
      throw SchemaError("affine_combine: vector " + std::to_string(i) + " schema differs: " +
                        vectors[0].first_mismatch(vectors[i]));
    }
  }
  const auto& first = vectors[0].entries();
  std::vector<NamedTensor<float>> out;
  out.reserve(first.size());
  std::vector<double> acc;
  for (std::size_t e = 0; e < first.size(); ++e) {
    const std::size_t n = first[e].tensor.size();
    acc.assign(n, 0.0);
    bool started = false;
    for (std::size_t i = 0; i < vectors.size(); ++i) {
      const double wi = w[i];
      if (wi == 0.0) continue;
      const auto src = vectors[i].entries()[e].tensor.data();
      if (!started) {
        for (std::size_t j = 0; j < n; ++j) acc[j] = wi * static_cast<double>(src[j]);
        started = true;
      } else {
        for (std::size_t j = 0; j < n; ++j) acc[j] += wi * static_cast<double>(src[j]);
      }
    }
    Tensor<float> t(first[e].tensor.shape());
    for (std::size_t j = 0; j < n; ++j) t[j] = static_cast<float>(acc[j]);
    out.push_back({first[e].name, std::move(t)});
  }
  return ParamVector(std::move(out));
}

ParamVector two_model_path(const ParamVector& a, const ParamVector& b, double w) {
  const ParamVector pair[] = {a, b};
  return affine_combine(pair, SoupWeights({w, 1.0 - w}, SoupMode::affine));
}

}  // namespace rsoup
