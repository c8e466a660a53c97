#pragma once

#include <algorithm>
#include <cmath>
#include <span>
#include <vector>

namespace rsoup::testing {

// Minimizer of 0.5 ||y - v||^2 + 0.5 mu max(0, ||y||_2 - r)^2. The optimum is
// y = v / (1 + lambda) with lambda = mu (||y|| - r); lambda is found by bisection.
inline std::vector<double> penalty_l2_projection(std::span<const double> v, double r,
                                                 double mu = 1e12) {
  double n = 0.0;
  for (double x : v) n += x * x;
  n = std::sqrt(n);
  std::vector<double> y(v.begin(), v.end());
  if (n <= r) return y;
  double lo = 0.0, hi = n / r;
  for (int i = 0; i < 200; ++i) {
    const double lam = 0.5 * (lo + hi);
    const double ny = n / (1.0 + lam);
    (lam < mu * (ny - r) ? lo : hi) = lam;
  }
  const double lam = 0.5 * (lo + hi);
  for (auto& x : y) x /= 1.0 + lam;
  return y;
}

// Minimizer of 0.5 ||y - v||^2 + 0.5 mu max(0, ||y||_1 - r)^2: soft thresholding
// at lambda = mu (||y||_1 - r), again by bisection on lambda.
inline std::vector<double> penalty_l1_projection(std::span<const double> v, double r,
                                                 double mu = 1e12) {
  auto soft_norm = [&](double lam) {
    double s = 0.0;
    for (double x : v) s += std::max(std::abs(x) - lam, 0.0);
    return s;
  };
  std::vector<double> y(v.begin(), v.end());
  if (soft_norm(0.0) <= r) return y;
  double lo = 0.0, hi = 0.0;
  for (double x : v) hi = std::max(hi, std::abs(x));
  for (int i = 0; i < 200; ++i) {
    const double lam = 0.5 * (lo + hi);
    (lam < mu * (soft_norm(lam) - r) ? lo : hi) = lam;
  }
  const double lam = 0.5 * (lo + hi);
  for (auto& x : y) {
    const double m = std::max(std::abs(x) - lam, 0.0);
    x = x < 0 ? -m : m;
  }
  return y;
}

// Exact projection onto {||d||_p <= r} intersected with the box [-x, 1 - x]:
// d_i = clamp(shrink_lambda(v_i)) with the multiplier lambda found by bisection.
// shrink is v / (1 + lambda) for p = 2 and soft thresholding for p = 1.
inline std::vector<double> intersection_projection(std::span<const double> v,
                                                   std::span<const float> x, double r,
                                                   bool l1) {
  const std::size_t d = v.size();
  auto at = [&](double lam) {
    std::vector<double> out(d);
    for (std::size_t i = 0; i < d; ++i) {
      double s;
      if (l1) {
        const double m = std::max(std::abs(v[i]) - lam, 0.0);
        s = v[i] < 0 ? -m : m;
      } else {
        s = v[i] / (1.0 + lam);
      }
      out[i] = std::clamp(s, -static_cast<double>(x[i]), 1.0 - x[i]);
    }
    return out;
  };
  auto norm = [&](const std::vector<double>& a) {
    double s = 0.0;
    for (double e : a) s += l1 ? std::abs(e) : e * e;
    return l1 ? s : std::sqrt(s);
  };
  auto y = at(0.0);
  if (norm(y) <= r) return y;
  double lo = 0.0, hi = 1.0;
  while (norm(at(hi)) > r) hi *= 2.0;
  for (int i = 0; i < 200; ++i) {
    const double lam = 0.5 * (lo + hi);
    (norm(at(lam)) > r ? lo : hi) = lam;
  }
  return at(hi);
}

inline double max_abs_diff(std::span<const double> a, std::span<const double> b) {
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

}  // namespace rsoup::testing
