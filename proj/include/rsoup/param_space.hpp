#pragma once

#include <cstdint>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "rsoup/network.hpp"
#include "rsoup/tensor.hpp"

namespace rsoup {

class SchemaError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

class WeightError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

// Flat, ordered, named parameter collection of one model. Immutable once built.
class ParamVector {
 public:
  ParamVector() = default;
  explicit ParamVector(std::vector<NamedTensor<float>> entries);

  const std::vector<NamedTensor<float>>& entries() const { return entries_; }
  std::size_t size() const { return entries_.size(); }
  std::size_t num_values() const;
  // Digest of names, shapes and order.
  std::uint64_t schema_hash() const { return schema_hash_; }
  bool combinable_with(const ParamVector& other) const {
    return schema_hash_ == other.schema_hash_;
  }
  // Human-readable description of the first name/shape difference, or "".
  std::string first_mismatch(const ParamVector& other) const;

  friend bool operator==(const ParamVector& a, const ParamVector& b);

 private:
  std::vector<NamedTensor<float>> entries_;
  std::uint64_t schema_hash_ = 0;
};

std::uint64_t schema_hash_of(const Network<float>& model);

ParamVector extract(const Network<float>& model);
// Throws SchemaError naming the first mismatching entry.
void inject(Network<float>& model, const ParamVector& pv);
Network<float> make_network(const ArchSpec& arch, const ParamVector& pv);

enum class SoupMode { convex, affine };

// Soup weights w with sum 1 (within 1e-9); convex mode also requires w >= 0.
// Weights are stored exactly as given, never renormalized.
class SoupWeights {
 public:
  static constexpr double kSumTolerance = 1e-9;

  SoupWeights(std::vector<double> weights, SoupMode mode);
  static SoupWeights one_hot(std::size_t n, std::size_t k);

  const std::vector<double>& values() const { return w_; }
  std::size_t size() const { return w_.size(); }
  double operator[](std::size_t i) const { return w_[i]; }
  SoupMode mode() const { return mode_; }

 private:
  std::vector<double> w_;
  SoupMode mode_;
};

// sum_i w_i * vectors[i], accumulated in 64-bit and rounded once to float.
ParamVector affine_combine(std::span<const ParamVector> vectors, const SoupWeights& w);
// w * a + (1 - w) * b; w outside [0, 1] extrapolates.
ParamVector two_model_path(const ParamVector& a, const ParamVector& b, double w);

}  // namespace rsoup
