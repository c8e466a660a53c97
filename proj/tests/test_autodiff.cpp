#include <cmath>
#include <random>

#include "doctest.h"
#include "gradcheck.hpp"
#include "rsoup/autodiff.hpp"

using namespace rsoup;
using rsoup::testing::gradcheck;
using rsoup::testing::random_tensor;

namespace {

constexpr double kTol = 1e-6;

// Weighted sum so every output element gets a distinct upstream gradient.
Var weighted_sum(Tape<double>& t, Var v, std::uint64_t seed = 99) {
  std::mt19937_64 rng(seed);
  const Var w = t.leaf(random_tensor(t.value(v).shape(), rng), false);
  return t.sum(t.mul(v, w));
}

}  // namespace

TEST_CASE("matmul forward matches hand computation") {
  Tape<double> t;
  const Var a = t.leaf(Tensor<double>({2, 3}, {1, 2, 3, 4, 5, 6}));
  const Var b = t.leaf(Tensor<double>({3, 2}, {7, 8, 9, 10, 11, 12}));
  const auto& c = t.value(t.matmul(a, b));
  CHECK(c.shape() == Shape{2, 2});
  CHECK(c[0] == 58);
  CHECK(c[1] == 64);
  CHECK(c[2] == 139);
  CHECK(c[3] == 154);
}

TEST_CASE("elementwise op gradients") {
  std::mt19937_64 rng(1);
  const auto a = random_tensor({3, 4}, rng), b = random_tensor({3, 4}, rng);
  CHECK(gradcheck([](auto& t, auto& v) { return weighted_sum(t, t.add(v[0], v[1])); }, {a, b}) <
        kTol);
  CHECK(gradcheck([](auto& t, auto& v) { return weighted_sum(t, t.sub(v[0], v[1])); }, {a, b}) <
        kTol);
  CHECK(gradcheck([](auto& t, auto& v) { return weighted_sum(t, t.mul(v[0], v[1])); }, {a, b}) <
        kTol);
  CHECK(gradcheck([](auto& t, auto& v) { return weighted_sum(t, t.scale(v[0], -2.5)); }, {a}) <
        kTol);
  CHECK(gradcheck([](auto& t, auto& v) { return weighted_sum(t, t.relu(v[0])); }, {a}) < kTol);
  CHECK(gradcheck([](auto& t, auto& v) { return t.mean(v[0]); }, {a}) < kTol);
}

TEST_CASE("matmul and linear gradients") {
  std::mt19937_64 rng(2);
  const auto a = random_tensor({3, 5}, rng), b = random_tensor({5, 2}, rng);
  CHECK(gradcheck([](auto& t, auto& v) { return weighted_sum(t, t.matmul(v[0], v[1])); },
                  {a, b}) < kTol);
  const auto x = random_tensor({4, 5}, rng), w = random_tensor({3, 5}, rng),
             bias = random_tensor({3}, rng);
  CHECK(gradcheck([](auto& t, auto& v) { return weighted_sum(t, t.linear(v[0], v[1], v[2])); },
                  {x, w, bias}) < kTol);
}

TEST_CASE("conv2d gradients with stride and padding") {
  std::mt19937_64 rng(3);
  const auto x = random_tensor({2, 2, 5, 5}, rng), w = random_tensor({3, 2, 3, 3}, rng),
             b = random_tensor({3}, rng);
  for (auto p : {Conv2dParams{1, 0}, Conv2dParams{2, 1}, Conv2dParams{1, 1}}) {
    CHECK(gradcheck([p](auto& t, auto& v) { return weighted_sum(t, t.conv2d(v[0], v[1], v[2], p)); },
                    {x, w, b}) < kTol);
  }
}

TEST_CASE("conv2d output shape") {
  Tape<double> t;
  const Var x = t.leaf(Tensor<double>({1, 1, 16, 16}));
  const Var w = t.leaf(Tensor<double>({8, 1, 3, 3}));
  const Var b = t.leaf(Tensor<double>({8}));
  CHECK(t.value(t.conv2d(x, w, b, {2, 1})).shape() == Shape{1, 8, 8, 8});
}

TEST_CASE("pooling, flatten, softmax family gradients") {
  std::mt19937_64 rng(4);
  const auto x = random_tensor({2, 3, 4, 4}, rng);
  CHECK(gradcheck([](auto& t, auto& v) { return weighted_sum(t, t.avg_pool2d(v[0], 2)); }, {x}) <
        kTol);
  CHECK(gradcheck([](auto& t, auto& v) { return weighted_sum(t, t.flatten(v[0])); }, {x}) < kTol);
  const auto z = random_tensor({3, 5}, rng, -3, 3);
  CHECK(gradcheck([](auto& t, auto& v) { return weighted_sum(t, t.softmax(v[0])); }, {z}) < kTol);
  CHECK(gradcheck([](auto& t, auto& v) { return weighted_sum(t, t.log_softmax(v[0])); }, {z}) <
        kTol);
}

TEST_CASE("cross entropy and KL gradients") {
  std::mt19937_64 rng(5);
  const auto z = random_tensor({4, 6}, rng, -3, 3), q = random_tensor({4, 6}, rng, -3, 3);
  const std::vector<int> labels{0, 5, 2, 2};
  CHECK(gradcheck([&](auto& t, auto& v) { return weighted_sum(t, t.cross_entropy(v[0], labels)); },
                  {z}) < kTol);
  CHECK(gradcheck([](auto& t, auto& v) { return weighted_sum(t, t.kl_divergence(v[0], v[1])); },
                  {z, q}) < kTol);
}

TEST_CASE("cross entropy values") {
  Tape<double> t;
  const Var z = t.leaf(Tensor<double>({2, 3}, {0, 0, 0, 1, 2, 3}));
  const std::vector<int> labels{1, 2};
  const auto& ce = t.value(t.cross_entropy(z, labels));
  CHECK(ce[0] == doctest::Approx(std::log(3.0)));
  const double lse = std::log(std::exp(1.0) + std::exp(2.0) + std::exp(3.0));
  CHECK(ce[1] == doctest::Approx(lse - 3.0));

  Tape<double> s;
  const Var v = s.leaf(Tensor<double>({3}, {0, 0, 0}));
  const std::vector<int> one{0};
  CHECK(s.value(s.cross_entropy(v, one)).rank() == 0);
}

TEST_CASE("relu keeps NaN") {
  Tape<double> t;
  const Var a = t.leaf(Tensor<double>({3}, {-1.0, 2.0, std::nan("")}));
  const auto& r = t.value(t.relu(a));
  CHECK(r[0] == 0.0);
  CHECK(r[1] == 2.0);
  CHECK(std::isnan(r[2]));
}

TEST_CASE("cross entropy rejects labels outside the class range") {
  Tape<double> t;
  const Var z = t.leaf(Tensor<double>({1, 3}));
  const std::vector<int> bad{3};
  CHECK_THROWS_AS(t.cross_entropy(z, bad), std::out_of_range);
}

TEST_CASE("KL of identical distributions is zero and never negative") {
  std::mt19937_64 rng(6);
  Tape<double> t;
  const auto z = random_tensor({5, 4}, rng);
  const Var a = t.leaf(z), b = t.leaf(z);
  for (double v : t.value(t.kl_divergence(a, b)).data()) {
    CHECK(v >= 0.0);
    CHECK(v < 1e-15);
  }
}

TEST_CASE("composite network-like graph gradient") {
  std::mt19937_64 rng(7);
  const auto x = random_tensor({3, 1, 6, 6}, rng, 0, 1);
  const auto w1 = random_tensor({4, 1, 3, 3}, rng), b1 = random_tensor({4}, rng);
  const auto w2 = random_tensor({5, 4 * 3 * 3}, rng), b2 = random_tensor({5}, rng);
  const std::vector<int> labels{1, 4, 0};
  auto f = [&](Tape<double>& t, const std::vector<Var>& v) {
    const Var h = t.relu(t.conv2d(v[0], v[1], v[2], {2, 1}));
    const Var logits = t.linear(t.flatten(h), v[3], v[4]);
    return t.mean(t.cross_entropy(logits, labels));
  };
  CHECK(gradcheck(f, {x, w1, b1, w2, b2}) < kTol);
}

TEST_CASE("shape mismatches name the op and both shapes") {
  Tape<double> t;
  const Var a = t.leaf(Tensor<double>({2, 3})), b = t.leaf(Tensor<double>({3, 2}));
  try {
    t.add(a, b);
    FAIL("expected ShapeError");
  } catch (const ShapeError& e) {
    const std::string msg = e.what();
    CHECK(msg.find("add") != std::string::npos);
    CHECK(msg.find("[2,3]") != std::string::npos);
    CHECK(msg.find("[3,2]") != std::string::npos);
  }
  CHECK_THROWS_AS(t.matmul(a, a), ShapeError);
}

TEST_CASE("backward contract") {
  Tape<double> t;
  const Var x = t.leaf(Tensor<double>({2}, {1, 2}), true);
  const Var y = t.leaf(Tensor<double>({2}, {3, 4}), false);
  const Var loss = t.sum(t.mul(x, x));
  CHECK_THROWS_AS(t.backward(x), TapeError);  // non-scalar
  t.backward(loss);
  CHECK(t.grad(x)[0] == 2.0);
  CHECK(t.grad(x)[1] == 4.0);
  CHECK_THROWS_AS(t.grad(y), TapeError);
  CHECK_THROWS_AS(t.backward(loss), TapeError);
}

TEST_CASE("batched rows equal single-row evaluation bit-exactly") {
  std::mt19937_64 rng(8);
  std::uniform_real_distribution<float> u(-1, 1);
  Tensor<float> x({5, 2, 6, 6}), w({3, 2, 3, 3}), b({3}), w2({4, 3 * 3 * 3}), b2({4});
  for (auto* t : {&x, &w, &b, &w2, &b2})
    for (auto& v : t->data()) v = u(rng);
  auto run = [&](const Tensor<float>& in) {
    Tape<float> t;
    const Var h = t.relu(t.conv2d(t.leaf(in), t.leaf(w), t.leaf(b), {2, 1}));
    return t.value(t.linear(t.flatten(h), t.leaf(w2), t.leaf(b2)));
  };
  const auto all = run(x);
  const std::size_t d = 2 * 6 * 6;
  for (std::size_t r = 0; r < 5; ++r) {
    Tensor<float> one({1, 2, 6, 6});
    std::copy(x.raw() + r * d, x.raw() + (r + 1) * d, one.raw());
    const auto single = run(one);
    for (std::size_t j = 0; j < 4; ++j) CHECK(single[j] == all[r * 4 + j]);
  }
}
