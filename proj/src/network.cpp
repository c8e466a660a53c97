#include "rsoup/network.hpp"

#include <cmath>
#include <random>
#include <sstream>
#include <stdexcept>

namespace rsoup {

namespace {

std::size_t parse_size(const std::string& s, const std::string& id) {
  if (s.empty() || s.find_first_not_of("0123456789") != std::string::npos) {
    throw std::invalid_argument("architecture id '" + id + "': bad number '" + s + "'");
  }
  return std::stoul(s);
}

std::size_t half_up(std::size_t v) { return (v + 1) / 2; }

}  // namespace

ArchSpec ArchSpec::parse(const std::string& id) {
  ArchSpec a;
  const auto s1 = id.find('/');
  const auto s2 = id.find('/', s1 == std::string::npos ? s1 : s1 + 1);
  if (s1 == std::string::npos || s2 == std::string::npos) {
    throw std::invalid_argument("architecture id '" + id + "': expected kind/CxHxW/K");
  }
  std::string head = id.substr(0, s1);
  const std::string dims = id.substr(s1 + 1, s2 - s1 - 1);
  a.classes = parse_size(id.substr(s2 + 1), id);

  const auto dash = head.find('-');
  a.kind = head.substr(0, dash);
  a.width = dash == std::string::npos ? 0 : parse_size(head.substr(dash + 1), id);
  if (a.kind != "linear" && a.kind != "mlp" && a.kind != "cnn" && a.kind != "cnnpool") {
    throw std::invalid_argument("architecture id '" + id + "': unknown kind '" + a.kind + "'");
  }
  if (a.kind == "linear" && a.width != 0) {
    throw std::invalid_argument("architecture id '" + id + "': linear takes no width");
  }
  if (a.kind != "linear" && a.width < 2) {
    throw std::invalid_argument("architecture id '" + id + "': width must be >= 2");
  }

  std::vector<std::size_t> d;
  std::stringstream ss(dims);
  for (std::string tok; std::getline(ss, tok, 'x');) d.push_back(parse_size(tok, id));
  if (d.size() != 3 || d[0] == 0 || d[1] == 0 || d[2] == 0) {
    throw std::invalid_argument("architecture id '" + id + "': expected CxHxW");
  }
  a.channels = d[0];
  a.height = d[1];
  a.cols = d[2];
  if (a.classes < 2) throw std::invalid_argument("architecture id '" + id + "': K must be >= 2");
  if (a.kind == "cnnpool" && (a.height % 2 || a.cols % 2)) {
    throw std::invalid_argument("architecture id '" + id + "': cnnpool needs even H and W");
  }
  return a;
}

std::string ArchSpec::id() const {
  std::string s = kind;
  if (kind != "linear") s += "-" + std::to_string(width);
  s += "/" + std::to_string(channels) + "x" + std::to_string(height) + "x" + std::to_string(cols);
  return s + "/" + std::to_string(classes);
}

template <typename Real>
Network<Real>::Network(ArchSpec arch) : arch_(std::move(arch)) {
  const std::size_t d = arch_.input_dim(), K = arch_.classes, W = arch_.width;
  auto add = [this](std::string name, Shape shape) {
    params_.push_back({std::move(name), Tensor<Real>(std::move(shape))});
  };
  if (arch_.kind == "linear") {
    add("fc.weight", {K, d});
    add("fc.bias", {K});
  } else if (arch_.kind == "mlp") {
    add("fc1.weight", {W, d});
    add("fc1.bias", {W});
    add("fc2.weight", {K, W});
    add("fc2.bias", {K});
  } else {
    const std::size_t w1 = std::max<std::size_t>(1, W / 2);
    std::size_t h = arch_.height, c = arch_.cols;
    if (arch_.kind == "cnnpool") {
      h /= 2;
      c /= 2;
    } else {
      h = half_up(h);
      c = half_up(c);
    }
    h = half_up(h);
    c = half_up(c);
    add("conv1.weight", {w1, arch_.channels, 3, 3});
    add("conv1.bias", {w1});
    add("conv2.weight", {W, w1, 3, 3});
    add("conv2.bias", {W});
    add("fc.weight", {K, W * h * c});
    add("fc.bias", {K});
  }
}

template <typename Real>
void Network<Real>::init(std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  for (auto& p : params_) {
    auto& t = p.tensor;
    if (t.rank() == 1) {
      t.fill(Real(0));
      continue;
    }
    const std::size_t fan_in = t.size() / t.dim(0);
    const double bound = std::sqrt(6.0 / static_cast<double>(fan_in));
    std::uniform_real_distribution<double> dist(-bound, bound);
    for (auto& v : t.data()) v = static_cast<Real>(dist(rng));
  }
}

template <typename Real>
std::size_t Network<Real>::num_parameters() const {
  std::size_t n = 0;
  for (const auto& p : params_) n += p.tensor.size();
  return n;
}

template <typename Real>
Var Network<Real>::forward(Tape<Real>& tape, Var input, bool params_require_grad,
                           std::vector<Var>* param_vars) const {
  const auto& x = tape.value(input);
  if (x.rank() != 4 || x.dim(1) != arch_.channels || x.dim(2) != arch_.height ||
      x.dim(3) != arch_.cols) {
    throw ShapeError("forward: input " + shape_to_string(x.shape()) + " does not match " +
                     arch_.id());
  }
  std::vector<Var> vars;
  vars.reserve(params_.size());
  for (const auto& p : params_) vars.push_back(tape.leaf(p.tensor, params_require_grad));
  if (param_vars) *param_vars = vars;

  if (arch_.kind == "linear") {
    return tape.linear(tape.flatten(input), vars[0], vars[1]);
  }
  if (arch_.kind == "mlp") {
    Var h = tape.relu(tape.linear(tape.flatten(input), vars[0], vars[1]));
    return tape.linear(h, vars[2], vars[3]);
  }
  Var h;
  if (arch_.kind == "cnnpool") {
    h = tape.avg_pool2d(tape.relu(tape.conv2d(input, vars[0], vars[1], {1, 1})), 2);
  } else {
    h = tape.relu(tape.conv2d(input, vars[0], vars[1], {2, 1}));
  }
  h = tape.relu(tape.conv2d(h, vars[2], vars[3], {2, 1}));
  return tape.linear(tape.flatten(h), vars[4], vars[5]);
}

template <typename Real>
Tensor<Real> Network<Real>::logits(const Tensor<Real>& input) const {
  Tape<Real> tape;
  Var x = tape.leaf(input);
  return tape.value(forward(tape, x, false));
}

template <typename Real>
std::vector<int> argmax_rows(const Tensor<Real>& logits) {
  if (logits.rank() != 2) throw ShapeError("argmax_rows: expected [N,K]");
  const std::size_t N = logits.dim(0), K = logits.dim(1);
  std::vector<int> out(N);
  for (std::size_t r = 0; r < N; ++r) {
    const Real* row = logits.raw() + r * K;
    std::size_t best = 0;
    for (std::size_t j = 1; j < K; ++j)
      if (row[j] > row[best]) best = j;
    out[r] = static_cast<int>(best);
  }
  return out;
}

template class Network<float>;
template class Network<double>;
template std::vector<int> argmax_rows(const Tensor<float>&);
template std::vector<int> argmax_rows(const Tensor<double>&);

}  // namespace rsoup
