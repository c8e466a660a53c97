#include "rsoup/autodiff.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <memory>

namespace rsoup {

std::size_t shape_numel(const Shape& shape) {
  std::size_t n = 1;
  for (auto d : shape) n *= d;
  return n;
}

std::string shape_to_string(const Shape& shape) {
  std::string s = "[";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) s += ",";
    s += std::to_string(shape[i]);
  }
  return s + "]";
}

namespace {

[[noreturn]] void shape_mismatch(const char* op, const Shape& a, const Shape& b) {
  throw ShapeError(std::string(op) + ": incompatible shapes " + shape_to_string(a) + " and " +
                   shape_to_string(b));
}

[[noreturn]] void bad_shape(const char* op, const Shape& a, const char* expected) {
  throw ShapeError(std::string(op) + ": shape " + shape_to_string(a) + ", expected " + expected);
}

// Rows along the last axis.
struct RowView {
  std::size_t rows;
  std::size_t cols;
};

RowView rows_of(const Shape& s, const char* op) {
  if (s.empty() || s.back() == 0) bad_shape(op, s, "non-empty last axis");
  return {shape_numel(s) / s.back(), s.back()};
}

template <typename Real>
Real row_logsumexp(const Real* x, std::size_t k) {
  Real m = x[0];
  for (std::size_t j = 1; j < k; ++j) m = std::max(m, x[j]);
  Real acc = 0;
  for (std::size_t j = 0; j < k; ++j) acc += std::exp(x[j] - m);
  return m + std::log(acc);
}

struct ConvGeometry {
  std::size_t n, c, h, w, o, kh, kw, oh, ow, stride, pad;
  std::size_t patch() const { return c * kh * kw; }
  std::size_t positions() const { return oh * ow; }
};

template <typename Real>
void im2col(const Real* img, const ConvGeometry& g, Real* cols) {
  const std::size_t P = g.positions();
  for (std::size_t c = 0; c < g.c; ++c) {
    for (std::size_t ki = 0; ki < g.kh; ++ki) {
      for (std::size_t kj = 0; kj < g.kw; ++kj) {
        Real* row = cols + ((c * g.kh + ki) * g.kw + kj) * P;
        for (std::size_t y = 0; y < g.oh; ++y) {
          const long iy = static_cast<long>(y * g.stride + ki) - static_cast<long>(g.pad);
          for (std::size_t x = 0; x < g.ow; ++x) {
            const long ix = static_cast<long>(x * g.stride + kj) - static_cast<long>(g.pad);
            const bool inside = iy >= 0 && ix >= 0 && iy < static_cast<long>(g.h) &&
                                ix < static_cast<long>(g.w);
            row[y * g.ow + x] = inside ? img[(c * g.h + iy) * g.w + ix] : Real(0);
          }
        }
      }
    }
  }
}

template <typename Real>
void col2im_add(const Real* cols, const ConvGeometry& g, Real* img) {
  const std::size_t P = g.positions();
  for (std::size_t c = 0; c < g.c; ++c) {
    for (std::size_t ki = 0; ki < g.kh; ++ki) {
      for (std::size_t kj = 0; kj < g.kw; ++kj) {
        const Real* row = cols + ((c * g.kh + ki) * g.kw + kj) * P;
        for (std::size_t y = 0; y < g.oh; ++y) {
          const long iy = static_cast<long>(y * g.stride + ki) - static_cast<long>(g.pad);
          if (iy < 0 || iy >= static_cast<long>(g.h)) continue;
          for (std::size_t x = 0; x < g.ow; ++x) {
            const long ix = static_cast<long>(x * g.stride + kj) - static_cast<long>(g.pad);
            if (ix < 0 || ix >= static_cast<long>(g.w)) continue;
            img[(c * g.h + iy) * g.w + ix] += row[y * g.ow + x];
          }
        }
      }
    }
  }
}

}  // namespace

template <typename Real>
Var Tape<Real>::leaf(Tensor<Real> value, bool requires_grad) {
  Node node;
  node.value = std::move(value);
  node.requires_grad = requires_grad;
  nodes_.push_back(std::move(node));
  return Var{nodes_.size() - 1};
}

template <typename Real>
Var Tape<Real>::record(Tensor<Real> value, std::vector<std::size_t> parents,
                       std::function<void(Tape&, std::size_t)> backward) {
  Node node;
  node.value = std::move(value);
  for (auto p : parents) node.requires_grad = node.requires_grad || nodes_[p].requires_grad;
  if (node.requires_grad) {
    node.parents = std::move(parents);
    node.backward = std::move(backward);
  }
  nodes_.push_back(std::move(node));
  return Var{nodes_.size() - 1};
}

template <typename Real>
Tensor<Real>& Tape<Real>::grad_slot(std::size_t i) {
  Node& n = nodes_[i];
  if (!n.has_grad) {
    n.grad = Tensor<Real>(n.value.shape());
    n.has_grad = true;
  }
  return n.grad;
}

template <typename Real>
const Tensor<Real>& Tape<Real>::grad(Var v) const {
  const Node& n = nodes_.at(v.index);
  if (!n.has_grad) throw TapeError("grad: node " + std::to_string(v.index) + " has no gradient");
  return n.grad;
}

template <typename Real>
void Tape<Real>::backward(Var loss) {
  if (backward_done_) throw TapeError("backward: tape already differentiated");
  const Node& root = nodes_.at(loss.index);
  if (root.value.size() != 1) {
    throw TapeError("backward: loss must be scalar, got shape " +
                    shape_to_string(root.value.shape()));
  }
  backward_done_ = true;
  if (!root.requires_grad) return;
  grad_slot(loss.index)[0] = Real(1);
  for (std::size_t i = loss.index + 1; i-- > 0;) {
    Node& n = nodes_[i];
    if (n.has_grad && n.backward) n.backward(*this, i);
  }
}

template <typename Real>
Var Tape<Real>::matmul(Var a, Var b) {
  const auto& A = value(a);
  const auto& B = value(b);
  if (A.rank() != 2 || B.rank() != 2 || A.dim(1) != B.dim(0)) {
    shape_mismatch("matmul", A.shape(), B.shape());
  }
  const std::size_t m = A.dim(0), k = A.dim(1), n = B.dim(1);
  Tensor<Real> out({m, n});
  for (std::size_t i = 0; i < m; ++i) {
    Real* o = out.raw() + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const Real av = A[i * k + p];
      const Real* br = B.raw() + p * n;
      for (std::size_t j = 0; j < n; ++j) o[j] += av * br[j];
    }
  }
  const std::size_t ia = a.index, ib = b.index;
  return record(std::move(out), {ia, ib}, [ia, ib, m, k, n](Tape& t, std::size_t self) {
    const Real* go = t.nodes_[self].grad.raw();
    const Real* Av = t.nodes_[ia].value.raw();
    const Real* Bv = t.nodes_[ib].value.raw();
    if (t.needs(ia)) {
      Real* ga = t.grad_slot(ia).raw();
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t p = 0; p < k; ++p) {
          Real acc = 0;
          for (std::size_t j = 0; j < n; ++j) acc += go[i * n + j] * Bv[p * n + j];
          ga[i * k + p] += acc;
        }
    }
    if (t.needs(ib)) {
      Real* gb = t.grad_slot(ib).raw();
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t p = 0; p < k; ++p) {
          const Real av = Av[i * k + p];
          for (std::size_t j = 0; j < n; ++j) gb[p * n + j] += av * go[i * n + j];
        }
    }
  });
}

template <typename Real>
Var Tape<Real>::linear(Var x, Var weight, Var bias) {
  const auto& X = value(x);
  const auto& W = value(weight);
  const auto& B = value(bias);
  if (X.rank() != 2 || W.rank() != 2 || X.dim(1) != W.dim(1)) {
    shape_mismatch("linear", X.shape(), W.shape());
  }
  if (B.rank() != 1 || B.dim(0) != W.dim(0)) shape_mismatch("linear(bias)", W.shape(), B.shape());
  const std::size_t N = X.dim(0), in = X.dim(1), out = W.dim(0);
  Tensor<Real> y({N, out});
  for (std::size_t r = 0; r < N; ++r) {
    const Real* xr = X.raw() + r * in;
    Real* yr = y.raw() + r * out;
    for (std::size_t o = 0; o < out; ++o) {
      const Real* wr = W.raw() + o * in;
      Real acc = 0;
      for (std::size_t i = 0; i < in; ++i) acc += xr[i] * wr[i];
      yr[o] = acc + B[o];
    }
  }
  const std::size_t ix = x.index, iw = weight.index, ib = bias.index;
  return record(std::move(y), {ix, iw, ib}, [ix, iw, ib, N, in, out](Tape& t, std::size_t self) {
    const Real* go = t.nodes_[self].grad.raw();
    const Real* Xv = t.nodes_[ix].value.raw();
    const Real* Wv = t.nodes_[iw].value.raw();
    if (t.needs(ix)) {
      Real* gx = t.grad_slot(ix).raw();
      for (std::size_t r = 0; r < N; ++r)
        for (std::size_t o = 0; o < out; ++o) {
          const Real g = go[r * out + o];
          const Real* wr = Wv + o * in;
          Real* gr = gx + r * in;
          for (std::size_t i = 0; i < in; ++i) gr[i] += g * wr[i];
        }
    }
    if (t.needs(iw)) {
      Real* gw = t.grad_slot(iw).raw();
      for (std::size_t r = 0; r < N; ++r)
        for (std::size_t o = 0; o < out; ++o) {
          const Real g = go[r * out + o];
          const Real* xr = Xv + r * in;
          Real* gr = gw + o * in;
          for (std::size_t i = 0; i < in; ++i) gr[i] += g * xr[i];
        }
    }
    if (t.needs(ib)) {
      Real* gb = t.grad_slot(ib).raw();
      for (std::size_t r = 0; r < N; ++r)
        for (std::size_t o = 0; o < out; ++o) gb[o] += go[r * out + o];
    }
  });
}

template <typename Real>
Var Tape<Real>::conv2d(Var x, Var weight, Var bias, Conv2dParams p) {
  const auto& X = value(x);
  const auto& W = value(weight);
  const auto& B = value(bias);
  if (X.rank() != 4 || W.rank() != 4 || X.dim(1) != W.dim(1)) {
    shape_mismatch("conv2d", X.shape(), W.shape());
  }
  if (B.rank() != 1 || B.dim(0) != W.dim(0)) shape_mismatch("conv2d(bias)", W.shape(), B.shape());
  if (p.stride == 0) throw ShapeError("conv2d: stride must be positive");
  ConvGeometry g{};
  g.n = X.dim(0);
  g.c = X.dim(1);
  g.h = X.dim(2);
  g.w = X.dim(3);
  g.o = W.dim(0);
  g.kh = W.dim(2);
  g.kw = W.dim(3);
  g.stride = p.stride;
  g.pad = p.padding;
  if (g.h + 2 * g.pad < g.kh || g.w + 2 * g.pad < g.kw) {
    shape_mismatch("conv2d", X.shape(), W.shape());
  }
  g.oh = (g.h + 2 * g.pad - g.kh) / g.stride + 1;
  g.ow = (g.w + 2 * g.pad - g.kw) / g.stride + 1;

  const std::size_t K = g.patch(), P = g.positions();
  auto cols = std::make_shared<std::vector<Real>>(g.n * K * P);
  Tensor<Real> y({g.n, g.o, g.oh, g.ow});
  for (std::size_t n = 0; n < g.n; ++n) {
    Real* cn = cols->data() + n * K * P;
    im2col(X.raw() + n * g.c * g.h * g.w, g, cn);
    for (std::size_t o = 0; o < g.o; ++o) {
      Real* yr = y.raw() + (n * g.o + o) * P;
      const Real* wr = W.raw() + o * K;
      for (std::size_t q = 0; q < P; ++q) yr[q] = B[o];
      for (std::size_t k = 0; k < K; ++k) {
        const Real wv = wr[k];
        const Real* cr = cn + k * P;
        for (std::size_t q = 0; q < P; ++q) yr[q] += wv * cr[q];
      }
    }
  }
  const std::size_t ix = x.index, iw = weight.index, ib = bias.index;
  return record(std::move(y), {ix, iw, ib}, [ix, iw, ib, g, cols](Tape& t, std::size_t self) {
    const std::size_t K = g.patch(), P = g.positions();
    const Real* go = t.nodes_[self].grad.raw();
    const Real* Wv = t.nodes_[iw].value.raw();
    if (t.needs(ix)) {
      Real* gx = t.grad_slot(ix).raw();
      std::vector<Real> dcols(K * P);
      for (std::size_t n = 0; n < g.n; ++n) {
        std::fill(dcols.begin(), dcols.end(), Real(0));
        for (std::size_t o = 0; o < g.o; ++o) {
          const Real* gr = go + (n * g.o + o) * P;
          const Real* wr = Wv + o * K;
          for (std::size_t k = 0; k < K; ++k) {
            const Real wv = wr[k];
            Real* dr = dcols.data() + k * P;
            for (std::size_t q = 0; q < P; ++q) dr[q] += wv * gr[q];
          }
        }
        col2im_add(dcols.data(), g, gx + n * g.c * g.h * g.w);
      }
    }
    if (t.needs(iw)) {
      Real* gw = t.grad_slot(iw).raw();
      for (std::size_t n = 0; n < g.n; ++n) {
        const Real* cn = cols->data() + n * K * P;
        for (std::size_t o = 0; o < g.o; ++o) {
          const Real* gr = go + (n * g.o + o) * P;
          Real* wr = gw + o * K;
          for (std::size_t k = 0; k < K; ++k) {
            const Real* cr = cn + k * P;
            Real acc = 0;
            for (std::size_t q = 0; q < P; ++q) acc += gr[q] * cr[q];
            wr[k] += acc;
          }
        }
      }
    }
    if (t.needs(ib)) {
      Real* gb = t.grad_slot(ib).raw();
      for (std::size_t n = 0; n < g.n; ++n)
        for (std::size_t o = 0; o < g.o; ++o) {
          const Real* gr = go + (n * g.o + o) * P;
          Real acc = 0;
          for (std::size_t q = 0; q < P; ++q) acc += gr[q];
          gb[o] += acc;
        }
    }
  });
}

template <typename Real>
Var Tape<Real>::add(Var a, Var b) {
  const auto& A = value(a);
  const auto& B = value(b);
  if (A.shape() != B.shape()) shape_mismatch("add", A.shape(), B.shape());
  Tensor<Real> out(A.shape());
  for (std::size_t i = 0; i < A.size(); ++i) out[i] = A[i] + B[i];
  const std::size_t ia = a.index, ib = b.index;
  return record(std::move(out), {ia, ib}, [ia, ib](Tape& t, std::size_t self) {
    const auto& go = t.nodes_[self].grad;
    for (std::size_t target : {ia, ib}) {
      if (!t.needs(target)) continue;
      auto& g = t.grad_slot(target);
      for (std::size_t i = 0; i < go.size(); ++i) g[i] += go[i];
    }
  });
}

template <typename Real>
Var Tape<Real>::sub(Var a, Var b) {
  const auto& A = value(a);
  const auto& B = value(b);
  if (A.shape() != B.shape()) shape_mismatch("sub", A.shape(), B.shape());
  Tensor<Real> out(A.shape());
  for (std::size_t i = 0; i < A.size(); ++i) out[i] = A[i] - B[i];
  const std::size_t ia = a.index, ib = b.index;
  return record(std::move(out), {ia, ib}, [ia, ib](Tape& t, std::size_t self) {
    const auto& go = t.nodes_[self].grad;
    if (t.needs(ia)) {
      auto& g = t.grad_slot(ia);
      for (std::size_t i = 0; i < go.size(); ++i) g[i] += go[i];
    }
    if (t.needs(ib)) {
      auto& g = t.grad_slot(ib);
      for (std::size_t i = 0; i < go.size(); ++i) g[i] -= go[i];
    }
  });
}

template <typename Real>
Var Tape<Real>::mul(Var a, Var b) {
  const auto& A = value(a);
  const auto& B = value(b);
  if (A.shape() != B.shape()) shape_mismatch("mul", A.shape(), B.shape());
  Tensor<Real> out(A.shape());
  for (std::size_t i = 0; i < A.size(); ++i) out[i] = A[i] * B[i];
  const std::size_t ia = a.index, ib = b.index;
  return record(std::move(out), {ia, ib}, [ia, ib](Tape& t, std::size_t self) {
    const auto& go = t.nodes_[self].grad;
    if (t.needs(ia)) {
      const auto& Bv = t.nodes_[ib].value;
      auto& g = t.grad_slot(ia);
      for (std::size_t i = 0; i < go.size(); ++i) g[i] += go[i] * Bv[i];
    }
    if (t.needs(ib)) {
      const auto& Av = t.nodes_[ia].value;
      auto& g = t.grad_slot(ib);
      for (std::size_t i = 0; i < go.size(); ++i) g[i] += go[i] * Av[i];
    }
  });
}

template <typename Real>
Var Tape<Real>::scale(Var a, Real c) {
  const auto& A = value(a);
  Tensor<Real> out(A.shape());
  for (std::size_t i = 0; i < A.size(); ++i) out[i] = A[i] * c;
  const std::size_t ia = a.index;
  return record(std::move(out), {ia}, [ia, c](Tape& t, std::size_t self) {
    const auto& go = t.nodes_[self].grad;
    auto& g = t.grad_slot(ia);
    for (std::size_t i = 0; i < go.size(); ++i) g[i] += go[i] * c;
  });
}

template <typename Real>
Var Tape<Real>::relu(Var a) {
  const auto& A = value(a);
  Tensor<Real> out(A.shape());
  // NaN propagates.
  for (std::size_t i = 0; i < A.size(); ++i) out[i] = A[i] > Real(0) || A[i] != A[i] ? A[i] : Real(0);
  const std::size_t ia = a.index;
  return record(std::move(out), {ia}, [ia](Tape& t, std::size_t self) {
    const auto& go = t.nodes_[self].grad;
    const auto& Av = t.nodes_[ia].value;
    auto& g = t.grad_slot(ia);
    for (std::size_t i = 0; i < go.size(); ++i)
      if (Av[i] > Real(0)) g[i] += go[i];
  });
}

template <typename Real>
Var Tape<Real>::avg_pool2d(Var a, std::size_t k) {
  const auto& A = value(a);
  if (A.rank() != 4 || k == 0 || A.dim(2) % k != 0 || A.dim(3) % k != 0) {
    bad_shape("avg_pool2d", A.shape(), "[N,C,H,W] with H,W divisible by the window");
  }
  const std::size_t N = A.dim(0), C = A.dim(1), H = A.dim(2), W = A.dim(3);
  const std::size_t OH = H / k, OW = W / k;
  const Real inv = Real(1) / static_cast<Real>(k * k);
  Tensor<Real> out({N, C, OH, OW});
  for (std::size_t nc = 0; nc < N * C; ++nc)
    for (std::size_t y = 0; y < OH; ++y)
      for (std::size_t x = 0; x < OW; ++x) {
        Real acc = 0;
        for (std::size_t i = 0; i < k; ++i)
          for (std::size_t j = 0; j < k; ++j) acc += A[(nc * H + y * k + i) * W + x * k + j];
        out[(nc * OH + y) * OW + x] = acc * inv;
      }
  const std::size_t ia = a.index;
  return record(std::move(out), {ia}, [ia, N, C, H, W, OH, OW, k, inv](Tape& t, std::size_t self) {
    const auto& go = t.nodes_[self].grad;
    auto& g = t.grad_slot(ia);
    for (std::size_t nc = 0; nc < N * C; ++nc)
      for (std::size_t y = 0; y < OH; ++y)
        for (std::size_t x = 0; x < OW; ++x) {
          const Real v = go[(nc * OH + y) * OW + x] * inv;
          for (std::size_t i = 0; i < k; ++i)
            for (std::size_t j = 0; j < k; ++j) g[(nc * H + y * k + i) * W + x * k + j] += v;
        }
  });
}

template <typename Real>
Var Tape<Real>::flatten(Var a) {
  const auto& A = value(a);
  if (A.rank() < 1) bad_shape("flatten", A.shape(), "rank >= 1");
  const std::size_t n = A.dim(0);
  const std::size_t rest = n == 0 ? 0 : A.size() / n;
  const std::size_t ia = a.index;
  return record(A.reshaped({n, rest}), {ia}, [ia](Tape& t, std::size_t self) {
    const auto& go = t.nodes_[self].grad;
    auto& g = t.grad_slot(ia);
    for (std::size_t i = 0; i < go.size(); ++i) g[i] += go[i];
  });
}

template <typename Real>
Var Tape<Real>::softmax(Var a) {
  const auto& A = value(a);
  const auto rv = rows_of(A.shape(), "softmax");
  Tensor<Real> out(A.shape());
  for (std::size_t r = 0; r < rv.rows; ++r) {
    const Real* x = A.raw() + r * rv.cols;
    Real* y = out.raw() + r * rv.cols;
    const Real lse = row_logsumexp(x, rv.cols);
    for (std::size_t j = 0; j < rv.cols; ++j) y[j] = std::exp(x[j] - lse);
  }
  const std::size_t ia = a.index;
  return record(std::move(out), {ia}, [ia, rv](Tape& t, std::size_t self) {
    const auto& go = t.nodes_[self].grad;
    const auto& s = t.nodes_[self].value;
    auto& g = t.grad_slot(ia);
    for (std::size_t r = 0; r < rv.rows; ++r) {
      const std::size_t off = r * rv.cols;
      Real dot = 0;
      for (std::size_t j = 0; j < rv.cols; ++j) dot += go[off + j] * s[off + j];
      for (std::size_t j = 0; j < rv.cols; ++j) g[off + j] += s[off + j] * (go[off + j] - dot);
    }
  });
}

template <typename Real>
Var Tape<Real>::log_softmax(Var a) {
  const auto& A = value(a);
  const auto rv = rows_of(A.shape(), "log_softmax");
  Tensor<Real> out(A.shape());
  for (std::size_t r = 0; r < rv.rows; ++r) {
    const Real* x = A.raw() + r * rv.cols;
    Real* y = out.raw() + r * rv.cols;
    const Real lse = row_logsumexp(x, rv.cols);
    for (std::size_t j = 0; j < rv.cols; ++j) y[j] = x[j] - lse;
  }
  const std::size_t ia = a.index;
  return record(std::move(out), {ia}, [ia, rv](Tape& t, std::size_t self) {
    const auto& go = t.nodes_[self].grad;
    const auto& ls = t.nodes_[self].value;
    auto& g = t.grad_slot(ia);
    for (std::size_t r = 0; r < rv.rows; ++r) {
      const std::size_t off = r * rv.cols;
      Real total = 0;
      for (std::size_t j = 0; j < rv.cols; ++j) total += go[off + j];
      for (std::size_t j = 0; j < rv.cols; ++j)
        g[off + j] += go[off + j] - std::exp(ls[off + j]) * total;
    }
  });
}

template <typename Real>
Var Tape<Real>::cross_entropy(Var logits, std::span<const int> labels) {
  const auto& L = value(logits);
  if (L.rank() != 1 && L.rank() != 2) bad_shape("cross_entropy", L.shape(), "[K] or [N,K]");
  const auto rv = rows_of(L.shape(), "cross_entropy");
  if (rv.cols < 2) bad_shape("cross_entropy", L.shape(), "at least 2 classes");
  if (labels.size() != rv.rows) {
    throw ShapeError("cross_entropy: " + std::to_string(labels.size()) + " labels for logits " +
                     shape_to_string(L.shape()));
  }
  std::vector<int> lab(labels.begin(), labels.end());
  for (int y : lab) {
    if (y < 0 || static_cast<std::size_t>(y) >= rv.cols) {
      throw std::out_of_range("cross_entropy: label " + std::to_string(y) + " outside [0, " +
                              std::to_string(rv.cols) + ")");
    }
  }
  Tensor<Real> out(L.rank() == 1 ? Shape{} : Shape{rv.rows});
  for (std::size_t r = 0; r < rv.rows; ++r) {
    const Real* x = L.raw() + r * rv.cols;
    out[r] = row_logsumexp(x, rv.cols) - x[lab[r]];
  }
  const std::size_t il = logits.index;
  return record(std::move(out), {il}, [il, rv, lab = std::move(lab)](Tape& t, std::size_t self) {
    const auto& go = t.nodes_[self].grad;
    const auto& Lv = t.nodes_[il].value;
    auto& g = t.grad_slot(il);
    for (std::size_t r = 0; r < rv.rows; ++r) {
      const Real* x = Lv.raw() + r * rv.cols;
      const Real lse = row_logsumexp(x, rv.cols);
      for (std::size_t j = 0; j < rv.cols; ++j) {
        const Real p = std::exp(x[j] - lse);
        g[r * rv.cols + j] += go[r] * (p - (static_cast<int>(j) == lab[r] ? Real(1) : Real(0)));
      }
    }
  });
}

template <typename Real>
Var Tape<Real>::kl_divergence(Var logits_p, Var logits_q) {
  const auto& P = value(logits_p);
  const auto& Q = value(logits_q);
  if (P.shape() != Q.shape()) shape_mismatch("kl_divergence", P.shape(), Q.shape());
  if (P.rank() != 1 && P.rank() != 2) bad_shape("kl_divergence", P.shape(), "[K] or [N,K]");
  const auto rv = rows_of(P.shape(), "kl_divergence");
  Tensor<Real> out(P.rank() == 1 ? Shape{} : Shape{rv.rows});
  for (std::size_t r = 0; r < rv.rows; ++r) {
    const Real* a = P.raw() + r * rv.cols;
    const Real* b = Q.raw() + r * rv.cols;
    const Real la = row_logsumexp(a, rv.cols), lb = row_logsumexp(b, rv.cols);
    Real acc = 0;
    for (std::size_t j = 0; j < rv.cols; ++j) {
      const Real lp = a[j] - la;
      acc += std::exp(lp) * (lp - (b[j] - lb));
    }
    out[r] = std::max(acc, Real(0));
  }
  const std::size_t ip = logits_p.index, iq = logits_q.index;
  return record(std::move(out), {ip, iq}, [ip, iq, rv](Tape& t, std::size_t self) {
    const auto& go = t.nodes_[self].grad;
    const auto& Pv = t.nodes_[ip].value;
    const auto& Qv = t.nodes_[iq].value;
    for (std::size_t r = 0; r < rv.rows; ++r) {
      const std::size_t off = r * rv.cols;
      const Real* a = Pv.raw() + off;
      const Real* b = Qv.raw() + off;
      const Real la = row_logsumexp(a, rv.cols), lb = row_logsumexp(b, rv.cols);
      // Unclamped value keeps the gradient exact near zero.
      Real total = 0;
      for (std::size_t j = 0; j < rv.cols; ++j) {
        const Real lp = a[j] - la;
        total += std::exp(lp) * (lp - (b[j] - lb));
      }
      if (t.needs(ip)) {
        auto& g = t.grad_slot(ip);
        for (std::size_t j = 0; j < rv.cols; ++j) {
          const Real lp = a[j] - la;
          g[off + j] += go[r] * std::exp(lp) * (lp - (b[j] - lb) - total);
        }
      }
      if (t.needs(iq)) {
        auto& g = t.grad_slot(iq);
        for (std::size_t j = 0; j < rv.cols; ++j)
          g[off + j] += go[r] * (std::exp(b[j] - lb) - std::exp(a[j] - la));
      }
    }
  });
}

template <typename Real>
Var Tape<Real>::sum(Var a) {
  const auto& A = value(a);
  Real acc = 0;
  for (std::size_t i = 0; i < A.size(); ++i) acc += A[i];
  const std::size_t ia = a.index;
  return record(Tensor<Real>::scalar(acc), {ia}, [ia](Tape& t, std::size_t self) {
    const Real go = t.nodes_[self].grad[0];
    auto& g = t.grad_slot(ia);
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += go;
  });
}

template <typename Real>
Var Tape<Real>::mean(Var a) {
  const auto& A = value(a);
  if (A.size() == 0) bad_shape("mean", A.shape(), "non-empty tensor");
  const Real n = static_cast<Real>(A.size());
  Real acc = 0;
  for (std::size_t i = 0; i < A.size(); ++i) acc += A[i];
  const std::size_t ia = a.index;
  return record(Tensor<Real>::scalar(acc / n), {ia}, [ia, n](Tape& t, std::size_t self) {
    const Real go = t.nodes_[self].grad[0] / n;
    auto& g = t.grad_slot(ia);
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += go;
  });
}

template class Tape<float>;
template class Tape<double>;

}  // namespace rsoup
