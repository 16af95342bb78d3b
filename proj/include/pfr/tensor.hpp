#pragma once

// Dense-tensor engine with a reverse-mode gradient tape. Values are flat
// row-major buffers; every primitive checks its output for non-finite values
// and records forward/backward closures on the owning tape. f32 is the
// training precision, f64 instantiations back the finite-difference suites.

#include <algorithm>
#include <cmath>
#include <cstring>
#include <functional>
#include <memory>
#include <numeric>
#include <vector>

#include "pfr/common.hpp"

namespace pfr {

template <typename T>
class Tape;

template <typename T>
struct Tensor {
  Tape<T>* tape = nullptr;
  int id = -1;

  bool valid() const { return tape != nullptr && id >= 0; }
  const std::vector<int>& shape() const;
  const std::vector<T>& val() const;
  std::vector<T>& val_mut();
  const std::vector<T>& grad() const;
  bool requires_grad() const;
  int64_t numel() const { return numel_of(shape()); }
  T item() const {
    if (numel() != 1) throw ShapeError("item() on non-scalar tensor " + shape_str(shape()));
    return val()[0];
  }
};

template <typename T>
struct TapeNode {
  std::vector<int> shape;
  std::vector<T> value;
  std::vector<T> grad;  // allocated on first backward touch
  bool requires_grad = false;
  bool is_op_output = false;
};

template <typename T>
struct TapeRecord {
  const char* op;
  std::vector<int> inputs;
  std::vector<int> outputs;
  std::function<void(Tape<T>&)> forward;   // recompute outputs from inputs
  std::function<void(Tape<T>&)> backward;  // accumulate input grads from output grads
};

template <typename T>
class Tape {
 public:
  // When false the tape keeps no records: pure forward evaluation for
  // inference. Gradients require recording.
  bool recording = true;

  TapeNode<T>& node(int id) { return nodes_[static_cast<size_t>(id)]; }
  const TapeNode<T>& node(int id) const { return nodes_[static_cast<size_t>(id)]; }
  size_t num_nodes() const { return nodes_.size(); }
  size_t num_records() const { return records_.size(); }

  Tensor<T> leaf(const std::vector<int>& shape, std::vector<T> data, bool requires_grad) {
    if (static_cast<int64_t>(data.size()) != numel_of(shape))
      throw ShapeError(strfmt("leaf data size %zu does not match shape %s", data.size(),
                              shape_str(shape).c_str()));
    TapeNode<T> n;
    n.shape = shape;
    n.value = std::move(data);
    n.requires_grad = requires_grad;
    nodes_.push_back(std::move(n));
    return {this, static_cast<int>(nodes_.size()) - 1};
  }

  Tensor<T> constant(const std::vector<int>& shape, std::vector<T> data) {
    return leaf(shape, std::move(data), false);
  }

  Tensor<T> scalar(T v, bool requires_grad = false) { return leaf({1}, {v}, requires_grad); }

  Tensor<T> zeros(const std::vector<int>& shape, bool requires_grad = false) {
    return leaf(shape, std::vector<T>(static_cast<size_t>(numel_of(shape)), T(0)), requires_grad);
  }

  // Allocates an output node for a primitive.
  int new_node(const std::vector<int>& shape, bool requires_grad) {
    TapeNode<T> n;
    n.shape = shape;
    n.value.assign(static_cast<size_t>(numel_of(shape)), T(0));
    n.requires_grad = requires_grad;
    n.is_op_output = true;
    nodes_.push_back(std::move(n));
    return static_cast<int>(nodes_.size()) - 1;
  }

  void push_record(const char* op, std::vector<int> inputs, std::vector<int> outputs,
                   std::function<void(Tape<T>&)> fwd, std::function<void(Tape<T>&)> bwd) {
    if (!recording) return;
    records_.push_back({op, std::move(inputs), std::move(outputs), std::move(fwd), std::move(bwd)});
  }

  // NaN/Inf is surfaced at the producing primitive, not propagated.
  void check_finite(int id, const char* op) {
    const auto& v = node(id).value;
    for (size_t i = 0; i < v.size(); ++i) {
      if (!std::isfinite(static_cast<double>(v[i])))
        throw NumericError(strfmt("non-finite value at index %zu in output of %s", i, op));
    }
  }

  std::vector<T>& grad_buf(int id) {
    auto& n = node(id);
    if (n.grad.empty()) n.grad.assign(n.value.size(), T(0));
    return n.grad;
  }

  bool wants_grad(int id) const { return node(id).requires_grad; }

  // Reverse pass from a scalar loss. Grad buffers of every requires_grad
  // ancestor are accumulated into. Leaf grads persist across calls, so
  // repeated backward without zero_grad accumulates; intermediate adjoints
  // are per-pass scratch and reset here.
  void backward(const Tensor<T>& loss) {
    if (loss.tape != this) throw StateError("backward: loss lives on a different tape");
    if (loss.numel() != 1)
      throw StateError("backward requires a scalar loss, got " + shape_str(loss.shape()));
    if (!recording) throw StateError("backward on a non-recording tape");
    for (auto& n : nodes_)
      if (n.is_op_output) std::fill(n.grad.begin(), n.grad.end(), T(0));
    std::vector<char> needed(nodes_.size(), 0);
    needed[static_cast<size_t>(loss.id)] = 1;
    grad_buf(loss.id)[0] += T(1);
    for (auto it = records_.rbegin(); it != records_.rend(); ++it) {
      bool out_needed = false;
      for (int o : it->outputs) out_needed |= (needed[static_cast<size_t>(o)] != 0);
      if (!out_needed) continue;
      for (int in : it->inputs)
        if (node(in).requires_grad) needed[static_cast<size_t>(in)] = 1;
      if (it->backward) it->backward(*this);
    }
  }

  void zero_grad() {
    for (auto& n : nodes_) std::fill(n.grad.begin(), n.grad.end(), T(0));
  }

  // Re-executes every recorded primitive in order. Used by the tape
  // invariant tests: replay must reproduce identical forward values.
  void replay() {
    for (auto& r : records_) r.forward(*this);
  }

  void reset() {
    nodes_.clear();
    records_.clear();
  }

 private:
  std::vector<TapeNode<T>> nodes_;
  std::vector<TapeRecord<T>> records_;
};

template <typename T>
const std::vector<int>& Tensor<T>::shape() const {
  return tape->node(id).shape;
}
template <typename T>
const std::vector<T>& Tensor<T>::val() const {
  return tape->node(id).value;
}
template <typename T>
std::vector<T>& Tensor<T>::val_mut() {
  return tape->node(id).value;
}
template <typename T>
const std::vector<T>& Tensor<T>::grad() const {
  return tape->node(id).grad;
}
template <typename T>
bool Tensor<T>::requires_grad() const {
  return tape->node(id).requires_grad;
}

namespace detail {

template <typename T>
Tape<T>& same_tape(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.tape != b.tape) throw StateError("operands live on different tapes");
  return *a.tape;
}

inline int last_dim(const std::vector<int>& s) { return s.empty() ? 1 : s.back(); }

inline int64_t row_count(const std::vector<int>& s) {
  int64_t n = 1;
  for (size_t i = 0; i + 1 < s.size(); ++i) n *= s[i];
  return n;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// matmul

template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
  Tape<T>& tp = detail::same_tape(a, b);
  const auto& sa = a.shape();
  const auto& sb = b.shape();
  if (sa.size() != 2 || sb.size() != 2 || sa[1] != sb[0])
    throw ShapeError("matmul shape mismatch: " + shape_str(sa) + " x " + shape_str(sb));
  const int m = sa[0], k = sa[1], n = sb[1];
  bool rg = a.requires_grad() || b.requires_grad();
  int out = tp.new_node({m, n}, rg);
  auto fwd = [ida = a.id, idb = b.id, out, m, k, n](Tape<T>& t) {
    const T* A = t.node(ida).value.data();
    const T* B = t.node(idb).value.data();
    T* Y = t.node(out).value.data();
    std::fill(Y, Y + static_cast<size_t>(m) * n, T(0));
#pragma omp parallel for schedule(static) if (static_cast<int64_t>(m) * n * k > 262144)
    for (int i = 0; i < m; ++i) {
      for (int p = 0; p < k; ++p) {
        T aip = A[static_cast<size_t>(i) * k + p];
        const T* Bp = B + static_cast<size_t>(p) * n;
        T* Yi = Y + static_cast<size_t>(i) * n;
        for (int j = 0; j < n; ++j) Yi[j] += aip * Bp[j];
      }
    }
  };
  fwd(tp);
  tp.check_finite(out, "matmul");
  auto bwd = [ida = a.id, idb = b.id, out, m, k, n](Tape<T>& t) {
    const auto& gy = t.node(out).grad;
    if (gy.empty()) return;
    const T* A = t.node(ida).value.data();
    const T* B = t.node(idb).value.data();
    const T* GY = gy.data();
    if (t.wants_grad(ida)) {
      T* GA = t.grad_buf(ida).data();
#pragma omp parallel for schedule(static) if (static_cast<int64_t>(m) * n * k > 262144)
      for (int i = 0; i < m; ++i) {
        for (int p = 0; p < k; ++p) {
          const T* GYi = GY + static_cast<size_t>(i) * n;
          const T* Bp = B + static_cast<size_t>(p) * n;
          T s = 0;
          for (int j = 0; j < n; ++j) s += GYi[j] * Bp[j];
          GA[static_cast<size_t>(i) * k + p] += s;
        }
      }
    }
    if (t.wants_grad(idb)) {
      T* GB = t.grad_buf(idb).data();
#pragma omp parallel for schedule(static) if (static_cast<int64_t>(m) * n * k > 262144)
      for (int p = 0; p < k; ++p) {
        for (int i = 0; i < m; ++i) {
          T aip = A[static_cast<size_t>(i) * k + p];
          const T* GYi = GY + static_cast<size_t>(i) * n;
          T* GBp = GB + static_cast<size_t>(p) * n;
          for (int j = 0; j < n; ++j) GBp[j] += aip * GYi[j];
        }
      }
    }
  };
  tp.push_record("matmul", {a.id, b.id}, {out}, std::move(fwd), std::move(bwd));
  return {&tp, out};
}

template <typename T>
Tensor<T> transpose2d(const Tensor<T>& a) {
  Tape<T>& tp = *a.tape;
  const auto& s = a.shape();
  if (s.size() != 2) throw ShapeError("transpose2d expects rank 2, got " + shape_str(s));
  const int m = s[0], n = s[1];
  int out = tp.new_node({n, m}, a.requires_grad());
  auto fwd = [ida = a.id, out, m, n](Tape<T>& t) {
    const T* A = t.node(ida).value.data();
    T* Y = t.node(out).value.data();
    for (int i = 0; i < m; ++i)
      for (int j = 0; j < n; ++j) Y[static_cast<size_t>(j) * m + i] = A[static_cast<size_t>(i) * n + j];
  };
  fwd(tp);
  auto bwd = [ida = a.id, out, m, n](Tape<T>& t) {
    const auto& gy = t.node(out).grad;
    if (gy.empty() || !t.wants_grad(ida)) return;
    T* GA = t.grad_buf(ida).data();
    for (int i = 0; i < m; ++i)
      for (int j = 0; j < n; ++j) GA[static_cast<size_t>(i) * n + j] += gy[static_cast<size_t>(j) * m + i];
  };
  tp.push_record("transpose2d", {a.id}, {out}, std::move(fwd), std::move(bwd));
  return {&tp, out};
}

// ---------------------------------------------------------------------------
// elementwise binary. Broadcasting is restricted to two cases: b is a scalar,
// or b is a rank-1 vector matching a's last dimension. Everything else is a
// shape error.

namespace detail {
enum class BinKind { Same, Scalar, TrailingVec };

template <typename T>
BinKind bin_kind(const Tensor<T>& a, const Tensor<T>& b, const char* op) {
  if (a.shape() == b.shape()) return BinKind::Same;
  if (b.numel() == 1) return BinKind::Scalar;
  if (b.shape().size() == 1 && a.shape().size() >= 1 && b.shape()[0] == last_dim(a.shape()))
    return BinKind::TrailingVec;
  throw ShapeError(std::string(op) + " shape mismatch: " + shape_str(a.shape()) + " vs " +
                   shape_str(b.shape()));
}
}  // namespace detail

template <typename T, typename FwdF, typename DaF, typename DbF>
Tensor<T> binary_op(const char* name, const Tensor<T>& a, const Tensor<T>& b, FwdF f, DaF dfa,
                    DbF dfb) {
  Tape<T>& tp = detail::same_tape(a, b);
  auto kind = detail::bin_kind(a, b, name);
  bool rg = a.requires_grad() || b.requires_grad();
  int out = tp.new_node(a.shape(), rg);
  const int64_t n = a.numel();
  const int d = detail::last_dim(a.shape());
  auto bidx = [kind, d](int64_t i) -> int64_t {
    switch (kind) {
      case detail::BinKind::Same: return i;
      case detail::BinKind::Scalar: return 0;
      default: return i % d;
    }
  };
  auto fwd = [ida = a.id, idb = b.id, out, n, bidx, f](Tape<T>& t) {
    const T* A = t.node(ida).value.data();
    const T* B = t.node(idb).value.data();
    T* Y = t.node(out).value.data();
    for (int64_t i = 0; i < n; ++i) Y[i] = f(A[i], B[bidx(i)]);
  };
  fwd(tp);
  tp.check_finite(out, name);
  auto bwd = [ida = a.id, idb = b.id, out, n, bidx, dfa, dfb](Tape<T>& t) {
    const auto& gy = t.node(out).grad;
    if (gy.empty()) return;
    const T* A = t.node(ida).value.data();
    const T* B = t.node(idb).value.data();
    if (t.wants_grad(ida)) {
      T* GA = t.grad_buf(ida).data();
      for (int64_t i = 0; i < n; ++i) GA[i] += gy[i] * dfa(A[i], B[bidx(i)]);
    }
    if (t.wants_grad(idb)) {
      T* GB = t.grad_buf(idb).data();
      for (int64_t i = 0; i < n; ++i) GB[bidx(i)] += gy[i] * dfb(A[i], B[bidx(i)]);
    }
  };
  tp.push_record(name, {a.id, b.id}, {out}, std::move(fwd), std::move(bwd));
  return {&tp, out};
}

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  return binary_op(
      "add", a, b, [](T x, T y) { return x + y; }, [](T, T) { return T(1); },
      [](T, T) { return T(1); });
}
template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
  return binary_op(
      "sub", a, b, [](T x, T y) { return x - y; }, [](T, T) { return T(1); },
      [](T, T) { return T(-1); });
}
template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  return binary_op(
      "mul", a, b, [](T x, T y) { return x * y; }, [](T, T y) { return y; },
      [](T x, T) { return x; });
}
template <typename T>
Tensor<T> div(const Tensor<T>& a, const Tensor<T>& b) {
  return binary_op(
      "div", a, b, [](T x, T y) { return x / y; }, [](T, T y) { return T(1) / y; },
      [](T x, T y) { return -x / (y * y); });
}

// ---------------------------------------------------------------------------
// elementwise unary

template <typename T, typename FwdF, typename DF>
Tensor<T> unary_op(const char* name, const Tensor<T>& a, FwdF f, DF df) {
  Tape<T>& tp = *a.tape;
  int out = tp.new_node(a.shape(), a.requires_grad());
  const int64_t n = a.numel();
  auto fwd = [ida = a.id, out, n, f](Tape<T>& t) {
    const T* A = t.node(ida).value.data();
    T* Y = t.node(out).value.data();
    for (int64_t i = 0; i < n; ++i) Y[i] = f(A[i]);
  };
  fwd(tp);
  tp.check_finite(out, name);
  auto bwd = [ida = a.id, out, n, df](Tape<T>& t) {
    const auto& gy = t.node(out).grad;
    if (gy.empty() || !t.wants_grad(ida)) return;
    const T* A = t.node(ida).value.data();
    const T* Y = t.node(out).value.data();
    T* GA = t.grad_buf(ida).data();
    for (int64_t i = 0; i < n; ++i) GA[i] += gy[i] * df(A[i], Y[i]);
  };
  tp.push_record(name, {a.id}, {out}, std::move(fwd), std::move(bwd));
  return {&tp, out};
}

template <typename T>
Tensor<T> add_scalar(const Tensor<T>& a, T c) {
  return unary_op(
      "add_scalar", a, [c](T x) { return x + c; }, [](T, T) { return T(1); });
}
template <typename T>
Tensor<T> mul_scalar(const Tensor<T>& a, T c) {
  return unary_op(
      "mul_scalar", a, [c](T x) { return x * c; }, [c](T, T) { return c; });
}
template <typename T>
Tensor<T> neg(const Tensor<T>& a) {
  return mul_scalar(a, T(-1));
}
template <typename T>
Tensor<T> exp_(const Tensor<T>& a) {
  return unary_op(
      "exp", a, [](T x) { return std::exp(x); }, [](T, T y) { return y; });
}
template <typename T>
Tensor<T> log_(const Tensor<T>& a) {
  return unary_op(
      "log", a, [](T x) { return std::log(x); }, [](T x, T) { return T(1) / x; });
}
template <typename T>
Tensor<T> sqrt_(const Tensor<T>& a) {
  return unary_op(
      "sqrt", a, [](T x) { return std::sqrt(x); },
      [](T, T y) { return T(0.5) / std::max(y, T(1e-20)); });
}
template <typename T>
Tensor<T> square(const Tensor<T>& a) {
  return unary_op(
      "square", a, [](T x) { return x * x; }, [](T x, T) { return T(2) * x; });
}
template <typename T>
Tensor<T> sigmoid(const Tensor<T>& a) {
  return unary_op(
      "sigmoid", a,
      [](T x) { return x >= T(0) ? T(1) / (T(1) + std::exp(-x)) : std::exp(x) / (T(1) + std::exp(x)); },
      [](T, T y) { return y * (T(1) - y); });
}

// tanh-approximation GELU.
template <typename T>
Tensor<T> gelu(const Tensor<T>& a) {
  constexpr double kC = 0.7978845608028654;  // sqrt(2/pi)
  constexpr double kA = 0.044715;
  return unary_op(
      "gelu", a,
      [](T x) {
        T u = T(kC) * (x + T(kA) * x * x * x);
        return T(0.5) * x * (T(1) + std::tanh(u));
      },
      [](T x, T) {
        T u = T(kC) * (x + T(kA) * x * x * x);
        T th = std::tanh(u);
        T du = T(kC) * (T(1) + T(3) * T(kA) * x * x);
        return T(0.5) * (T(1) + th) + T(0.5) * x * (T(1) - th * th) * du;
      });
}

// Pass-through gradient inside [lo,hi], zero outside.
template <typename T>
Tensor<T> clamp(const Tensor<T>& a, T lo, T hi) {
  if (!(lo < hi)) throw ValueError("clamp: lo must be < hi");
  return unary_op(
      "clamp", a, [lo, hi](T x) { return std::min(hi, std::max(lo, x)); },
      [lo, hi](T x, T) { return (x > lo && x < hi) ? T(1) : T(0); });
}

// ---------------------------------------------------------------------------
// softmax over the last dimension, max-stabilized

template <typename T>
Tensor<T> softmax_lastdim(const Tensor<T>& a) {
  Tape<T>& tp = *a.tape;
  const int d = detail::last_dim(a.shape());
  if (a.shape().empty() || d < 1)
    throw ShapeError("softmax_lastdim: empty last dimension in " + shape_str(a.shape()));
  const int64_t rows = detail::row_count(a.shape());
  int out = tp.new_node(a.shape(), a.requires_grad());
  auto fwd = [ida = a.id, out, rows, d](Tape<T>& t) {
    const T* A = t.node(ida).value.data();
    T* Y = t.node(out).value.data();
    for (int64_t r = 0; r < rows; ++r) {
      const T* x = A + r * d;
      T* y = Y + r * d;
      T mx = x[0];
      for (int j = 1; j < d; ++j) mx = std::max(mx, x[j]);
      T sum = 0;
      for (int j = 0; j < d; ++j) {
        y[j] = std::exp(x[j] - mx);
        sum += y[j];
      }
      for (int j = 0; j < d; ++j) y[j] /= sum;
    }
  };
  fwd(tp);
  tp.check_finite(out, "softmax");
  auto bwd = [ida = a.id, out, rows, d](Tape<T>& t) {
    const auto& gy = t.node(out).grad;
    if (gy.empty() || !t.wants_grad(ida)) return;
    const T* Y = t.node(out).value.data();
    T* GA = t.grad_buf(ida).data();
    for (int64_t r = 0; r < rows; ++r) {
      const T* y = Y + r * d;
      const T* g = gy.data() + r * d;
      T dot = 0;
      for (int j = 0; j < d; ++j) dot += g[j] * y[j];
      for (int j = 0; j < d; ++j) GA[r * d + j] += y[j] * (g[j] - dot);
    }
  };
  tp.push_record("softmax", {a.id}, {out}, std::move(fwd), std::move(bwd));
  return {&tp, out};
}

// ---------------------------------------------------------------------------
// layer norm over the last dimension

template <typename T>
Tensor<T> layer_norm(const Tensor<T>& x, const Tensor<T>& gain, const Tensor<T>& bias, T eps) {
  Tape<T>& tp = *x.tape;
  if (eps <= T(0)) throw ValueError("layer_norm: eps must be > 0");
  const int d = detail::last_dim(x.shape());
  if (gain.shape() != std::vector<int>{d} || bias.shape() != std::vector<int>{d})
    throw ShapeError(strfmt("layer_norm: gain/bias must be [%d]", d));
  const int64_t rows = detail::row_count(x.shape());
  bool rg = x.requires_grad() || gain.requires_grad() || bias.requires_grad();
  int out = tp.new_node(x.shape(), rg);
  auto fwd = [idx = x.id, idg = gain.id, idb = bias.id, out, rows, d, eps](Tape<T>& t) {
    const T* X = t.node(idx).value.data();
    const T* G = t.node(idg).value.data();
    const T* B = t.node(idb).value.data();
    T* Y = t.node(out).value.data();
    for (int64_t r = 0; r < rows; ++r) {
      const T* xr = X + r * d;
      T mu = 0;
      for (int j = 0; j < d; ++j) mu += xr[j];
      mu /= d;
      T var = 0;
      for (int j = 0; j < d; ++j) var += (xr[j] - mu) * (xr[j] - mu);
      var /= d;
      T inv = T(1) / std::sqrt(var + eps);
      T* yr = Y + r * d;
      for (int j = 0; j < d; ++j) yr[j] = (xr[j] - mu) * inv * G[j] + B[j];
    }
  };
  fwd(tp);
  tp.check_finite(out, "layer_norm");
  auto bwd = [idx = x.id, idg = gain.id, idb = bias.id, out, rows, d, eps](Tape<T>& t) {
    const auto& gy = t.node(out).grad;
    if (gy.empty()) return;
    const T* X = t.node(idx).value.data();
    const T* G = t.node(idg).value.data();
    T* GX = t.wants_grad(idx) ? t.grad_buf(idx).data() : nullptr;
    T* GG = t.wants_grad(idg) ? t.grad_buf(idg).data() : nullptr;
    T* GB = t.wants_grad(idb) ? t.grad_buf(idb).data() : nullptr;
    for (int64_t r = 0; r < rows; ++r) {
      const T* xr = X + r * d;
      const T* g = gy.data() + r * d;
      T mu = 0;
      for (int j = 0; j < d; ++j) mu += xr[j];
      mu /= d;
      T var = 0;
      for (int j = 0; j < d; ++j) var += (xr[j] - mu) * (xr[j] - mu);
      var /= d;
      T inv = T(1) / std::sqrt(var + eps);
      if (GG || GB) {
        for (int j = 0; j < d; ++j) {
          if (GG) GG[j] += g[j] * (xr[j] - mu) * inv;
          if (GB) GB[j] += g[j];
        }
      }
      if (GX) {
        T mean_gd = 0, mean_gdx = 0;
        for (int j = 0; j < d; ++j) {
          T gd = g[j] * G[j];
          T xh = (xr[j] - mu) * inv;
          mean_gd += gd;
          mean_gdx += gd * xh;
        }
        mean_gd /= d;
        mean_gdx /= d;
        for (int j = 0; j < d; ++j) {
          T gd = g[j] * G[j];
          T xh = (xr[j] - mu) * inv;
          GX[r * d + j] += (gd - mean_gd - xh * mean_gdx) * inv;
        }
      }
    }
  };
  tp.push_record("layer_norm", {x.id, gain.id, bias.id}, {out}, std::move(fwd), std::move(bwd));
  return {&tp, out};
}

// ---------------------------------------------------------------------------
// row-wise L2 normalization (unit quaternions etc.)

template <typename T>
Tensor<T> l2_normalize_rows(const Tensor<T>& x) {
  Tape<T>& tp = *x.tape;
  const int d = detail::last_dim(x.shape());
  const int64_t rows = detail::row_count(x.shape());
  int out = tp.new_node(x.shape(), x.requires_grad());
  auto fwd = [idx = x.id, out, rows, d](Tape<T>& t) {
    const T* X = t.node(idx).value.data();
    T* Y = t.node(out).value.data();
    for (int64_t r = 0; r < rows; ++r) {
      T nn = 0;
      for (int j = 0; j < d; ++j) nn += X[r * d + j] * X[r * d + j];
      T inv = T(1) / std::max(std::sqrt(nn), T(1e-12));
      for (int j = 0; j < d; ++j) Y[r * d + j] = X[r * d + j] * inv;
    }
  };
  fwd(tp);
  tp.check_finite(out, "l2_normalize_rows");
  auto bwd = [idx = x.id, out, rows, d](Tape<T>& t) {
    const auto& gy = t.node(out).grad;
    if (gy.empty() || !t.wants_grad(idx)) return;
    const T* X = t.node(idx).value.data();
    const T* Y = t.node(out).value.data();
    T* GX = t.grad_buf(idx).data();
    for (int64_t r = 0; r < rows; ++r) {
      T nn = 0;
      for (int j = 0; j < d; ++j) nn += X[r * d + j] * X[r * d + j];
      T inv = T(1) / std::max(std::sqrt(nn), T(1e-12));
      T dot = 0;
      for (int j = 0; j < d; ++j) dot += gy[r * d + j] * Y[r * d + j];
      for (int j = 0; j < d; ++j) GX[r * d + j] += (gy[r * d + j] - dot * Y[r * d + j]) * inv;
    }
  };
  tp.push_record("l2_normalize_rows", {x.id}, {out}, std::move(fwd), std::move(bwd));
  return {&tp, out};
}

// ---------------------------------------------------------------------------
// shape ops

template <typename T>
Tensor<T> reshape(const Tensor<T>& a, const std::vector<int>& shape) {
  Tape<T>& tp = *a.tape;
  if (numel_of(shape) != a.numel())
    throw ShapeError("reshape " + shape_str(a.shape()) + " -> " + shape_str(shape) +
                     " changes element count");
  int out = tp.new_node(shape, a.requires_grad());
  const int64_t n = a.numel();
  auto fwd = [ida = a.id, out, n](Tape<T>& t) {
    std::copy_n(t.node(ida).value.data(), n, t.node(out).value.data());
  };
  fwd(tp);
  auto bwd = [ida = a.id, out, n](Tape<T>& t) {
    const auto& gy = t.node(out).grad;
    if (gy.empty() || !t.wants_grad(ida)) return;
    T* GA = t.grad_buf(ida).data();
    for (int64_t i = 0; i < n; ++i) GA[i] += gy[i];
  };
  tp.push_record("reshape", {a.id}, {out}, std::move(fwd), std::move(bwd));
  return {&tp, out};
}

// Concatenate rank-2 tensors along axis 0 (rows) — all must share column count.
template <typename T>
Tensor<T> concat_rows(const std::vector<Tensor<T>>& parts) {
  if (parts.empty()) throw ShapeError("concat_rows: no inputs");
  Tape<T>& tp = *parts[0].tape;
  const int cols = parts[0].shape().size() == 2 ? parts[0].shape()[1] : -1;
  int rows = 0;
  bool rg = false;
  std::vector<int> ids;
  for (const auto& p : parts) {
    if (p.tape != &tp) throw StateError("concat_rows: mixed tapes");
    if (p.shape().size() != 2 || p.shape()[1] != cols)
      throw ShapeError("concat_rows: incompatible part " + shape_str(p.shape()));
    rows += p.shape()[0];
    rg |= p.requires_grad();
    ids.push_back(p.id);
  }
  int out = tp.new_node({rows, cols}, rg);
  auto fwd = [ids, out, cols](Tape<T>& t) {
    T* Y = t.node(out).value.data();
    size_t off = 0;
    for (int id : ids) {
      const auto& v = t.node(id).value;
      std::copy(v.begin(), v.end(), Y + off);
      off += v.size();
    }
  };
  fwd(tp);
  auto bwd = [ids, out](Tape<T>& t) {
    const auto& gy = t.node(out).grad;
    if (gy.empty()) return;
    size_t off = 0;
    for (int id : ids) {
      size_t n = t.node(id).value.size();
      if (t.wants_grad(id)) {
        T* g = t.grad_buf(id).data();
        for (size_t i = 0; i < n; ++i) g[i] += gy[off + i];
      }
      off += n;
    }
  };
  tp.push_record("concat_rows", ids, {out}, std::move(fwd), std::move(bwd));
  return {&tp, out};
}

// Concatenate two rank-2 tensors along the last axis.
template <typename T>
Tensor<T> concat_cols(const Tensor<T>& a, const Tensor<T>& b) {
  Tape<T>& tp = detail::same_tape(a, b);
  const auto& sa = a.shape();
  const auto& sb = b.shape();
  if (sa.size() != 2 || sb.size() != 2 || sa[0] != sb[0])
    throw ShapeError("concat_cols: " + shape_str(sa) + " vs " + shape_str(sb));
  const int rows = sa[0], ca = sa[1], cb = sb[1];
  int out = tp.new_node({rows, ca + cb}, a.requires_grad() || b.requires_grad());
  auto fwd = [ida = a.id, idb = b.id, out, rows, ca, cb](Tape<T>& t) {
    const T* A = t.node(ida).value.data();
    const T* B = t.node(idb).value.data();
    T* Y = t.node(out).value.data();
    for (int r = 0; r < rows; ++r) {
      std::copy_n(A + static_cast<size_t>(r) * ca, ca, Y + static_cast<size_t>(r) * (ca + cb));
      std::copy_n(B + static_cast<size_t>(r) * cb, cb, Y + static_cast<size_t>(r) * (ca + cb) + ca);
    }
  };
  fwd(tp);
  auto bwd = [ida = a.id, idb = b.id, out, rows, ca, cb](Tape<T>& t) {
    const auto& gy = t.node(out).grad;
    if (gy.empty()) return;
    if (t.wants_grad(ida)) {
      T* GA = t.grad_buf(ida).data();
      for (int r = 0; r < rows; ++r)
        for (int j = 0; j < ca; ++j)
          GA[static_cast<size_t>(r) * ca + j] += gy[static_cast<size_t>(r) * (ca + cb) + j];
    }
    if (t.wants_grad(idb)) {
      T* GB = t.grad_buf(idb).data();
      for (int r = 0; r < rows; ++r)
        for (int j = 0; j < cb; ++j)
          GB[static_cast<size_t>(r) * cb + j] += gy[static_cast<size_t>(r) * (ca + cb) + ca + j];
    }
  };
  tp.push_record("concat_cols", {a.id, b.id}, {out}, std::move(fwd), std::move(bwd));
  return {&tp, out};
}

template <typename T>
Tensor<T> slice_cols(const Tensor<T>& a, int start, int len) {
  Tape<T>& tp = *a.tape;
  const auto& s = a.shape();
  if (s.size() != 2) throw ShapeError("slice_cols expects rank 2, got " + shape_str(s));
  if (start < 0 || len <= 0 || start + len > s[1])
    throw ShapeError(strfmt("slice_cols [%d,%d) out of range for %d columns", start, start + len, s[1]));
  const int rows = s[0], cols = s[1];
  int out = tp.new_node({rows, len}, a.requires_grad());
  auto fwd = [ida = a.id, out, rows, cols, start, len](Tape<T>& t) {
    const T* A = t.node(ida).value.data();
    T* Y = t.node(out).value.data();
    for (int r = 0; r < rows; ++r)
      std::copy_n(A + static_cast<size_t>(r) * cols + start, len, Y + static_cast<size_t>(r) * len);
  };
  fwd(tp);
  auto bwd = [ida = a.id, out, rows, cols, start, len](Tape<T>& t) {
    const auto& gy = t.node(out).grad;
    if (gy.empty() || !t.wants_grad(ida)) return;
    T* GA = t.grad_buf(ida).data();
    for (int r = 0; r < rows; ++r)
      for (int j = 0; j < len; ++j)
        GA[static_cast<size_t>(r) * cols + start + j] += gy[static_cast<size_t>(r) * len + j];
  };
  tp.push_record("slice_cols", {a.id}, {out}, std::move(fwd), std::move(bwd));
  return {&tp, out};
}

// ---------------------------------------------------------------------------
// reductions

template <typename T>
Tensor<T> sum_all(const Tensor<T>& a) {
  Tape<T>& tp = *a.tape;
  int out = tp.new_node({1}, a.requires_grad());
  const int64_t n = a.numel();
  auto fwd = [ida = a.id, out, n](Tape<T>& t) {
    const T* A = t.node(ida).value.data();
    T s = 0;
    for (int64_t i = 0; i < n; ++i) s += A[i];
    t.node(out).value[0] = s;
  };
  fwd(tp);
  tp.check_finite(out, "sum");
  auto bwd = [ida = a.id, out, n](Tape<T>& t) {
    const auto& gy = t.node(out).grad;
    if (gy.empty() || !t.wants_grad(ida)) return;
    T* GA = t.grad_buf(ida).data();
    for (int64_t i = 0; i < n; ++i) GA[i] += gy[0];
  };
  tp.push_record("sum", {a.id}, {out}, std::move(fwd), std::move(bwd));
  return {&tp, out};
}

template <typename T>
Tensor<T> mean_all(const Tensor<T>& a) {
  return mul_scalar(sum_all(a), T(1) / static_cast<T>(a.numel()));
}

// Sum over the last dimension, dropping it: [.. x D] -> [..], rank-1 -> [1].
template <typename T>
Tensor<T> sum_lastdim(const Tensor<T>& a) {
  Tape<T>& tp = *a.tape;
  const int d = detail::last_dim(a.shape());
  const int64_t rows = detail::row_count(a.shape());
  std::vector<int> oshape(a.shape().begin(), a.shape().end() - 1);
  if (oshape.empty()) oshape = {1};
  int out = tp.new_node(oshape, a.requires_grad());
  auto fwd = [ida = a.id, out, rows, d](Tape<T>& t) {
    const T* A = t.node(ida).value.data();
    T* Y = t.node(out).value.data();
    for (int64_t r = 0; r < rows; ++r) {
      T s = 0;
      for (int j = 0; j < d; ++j) s += A[r * d + j];
      Y[r] = s;
    }
  };
  fwd(tp);
  tp.check_finite(out, "sum_lastdim");
  auto bwd = [ida = a.id, out, rows, d](Tape<T>& t) {
    const auto& gy = t.node(out).grad;
    if (gy.empty() || !t.wants_grad(ida)) return;
    T* GA = t.grad_buf(ida).data();
    for (int64_t r = 0; r < rows; ++r)
      for (int j = 0; j < d; ++j) GA[r * d + j] += gy[r];
  };
  tp.push_record("sum_lastdim", {a.id}, {out}, std::move(fwd), std::move(bwd));
  return {&tp, out};
}

// Gathers elements of the flattened input where mask is true -> rank-1 [K].
// K must be >= 1; an all-false mask is the caller's degenerate case to handle.
template <typename T>
Tensor<T> masked_select(const Tensor<T>& a, const std::vector<uint8_t>& mask) {
  Tape<T>& tp = *a.tape;
  if (static_cast<int64_t>(mask.size()) != a.numel())
    throw ShapeError(strfmt("masked_select: mask size %zu vs %lld elements", mask.size(),
                            static_cast<long long>(a.numel())));
  std::vector<int64_t> idx;
  for (size_t i = 0; i < mask.size(); ++i)
    if (mask[i]) idx.push_back(static_cast<int64_t>(i));
  if (idx.empty()) throw ValueError("masked_select: mask selects zero elements");
  int out = tp.new_node({static_cast<int>(idx.size())}, a.requires_grad());
  auto idx_sp = std::make_shared<std::vector<int64_t>>(std::move(idx));
  auto fwd = [ida = a.id, out, idx_sp](Tape<T>& t) {
    const T* A = t.node(ida).value.data();
    T* Y = t.node(out).value.data();
    for (size_t i = 0; i < idx_sp->size(); ++i) Y[i] = A[(*idx_sp)[i]];
  };
  fwd(tp);
  auto bwd = [ida = a.id, out, idx_sp](Tape<T>& t) {
    const auto& gy = t.node(out).grad;
    if (gy.empty() || !t.wants_grad(ida)) return;
    T* GA = t.grad_buf(ida).data();
    for (size_t i = 0; i < idx_sp->size(); ++i) GA[(*idx_sp)[i]] += gy[i];
  };
  tp.push_record("masked_select", {a.id}, {out}, std::move(fwd), std::move(bwd));
  return {&tp, out};
}

// Gathers whole rows of a rank-2 tensor: [N x D] -> [K x D].
template <typename T>
Tensor<T> select_rows(const Tensor<T>& a, const std::vector<int>& rows) {
  Tape<T>& tp = *a.tape;
  const auto& s = a.shape();
  if (s.size() != 2) throw ShapeError("select_rows expects rank 2, got " + shape_str(s));
  if (rows.empty()) throw ValueError("select_rows: empty row set");
  for (int r : rows)
    if (r < 0 || r >= s[0]) throw ShapeError(strfmt("select_rows: row %d out of range [0,%d)", r, s[0]));
  const int d = s[1];
  int out = tp.new_node({static_cast<int>(rows.size()), d}, a.requires_grad());
  auto rows_sp = std::make_shared<std::vector<int>>(rows);
  auto fwd = [ida = a.id, out, rows_sp, d](Tape<T>& t) {
    const T* A = t.node(ida).value.data();
    T* Y = t.node(out).value.data();
    for (size_t i = 0; i < rows_sp->size(); ++i)
      std::copy_n(A + static_cast<size_t>((*rows_sp)[i]) * d, d, Y + i * d);
  };
  fwd(tp);
  auto bwd = [ida = a.id, out, rows_sp, d](Tape<T>& t) {
    const auto& gy = t.node(out).grad;
    if (gy.empty() || !t.wants_grad(ida)) return;
    T* GA = t.grad_buf(ida).data();
    for (size_t i = 0; i < rows_sp->size(); ++i)
      for (int j = 0; j < d; ++j) GA[static_cast<size_t>((*rows_sp)[i]) * d + j] += gy[i * d + j];
  };
  tp.push_record("select_rows", {a.id}, {out}, std::move(fwd), std::move(bwd));
  return {&tp, out};
}

// Rearranges per-patch channel stacks into a dense image:
// [P x (ps*ps*C)] with P = grid*grid -> [H x W x C], H = W = grid*ps.
// Within a token, channel layout is (py, px, c).
template <typename T>
Tensor<T> pixel_unshuffle(const Tensor<T>& a, int grid, int ps, int ch) {
  Tape<T>& tp = *a.tape;
  const auto& s = a.shape();
  if (s.size() != 2 || s[0] != grid * grid || s[1] != ps * ps * ch)
    throw ShapeError(strfmt("pixel_unshuffle: expected [%d x %d], got %s", grid * grid, ps * ps * ch,
                            shape_str(s).c_str()));
  const int hw = grid * ps;
  int out = tp.new_node({hw, hw, ch}, a.requires_grad());
  auto fwd = [ida = a.id, out, grid, ps, ch, hw](Tape<T>& t) {
    const T* A = t.node(ida).value.data();
    T* Y = t.node(out).value.data();
    for (int gy = 0; gy < grid; ++gy)
      for (int gx = 0; gx < grid; ++gx) {
        const T* tok = A + (static_cast<size_t>(gy) * grid + gx) * (ps * ps * ch);
        for (int py = 0; py < ps; ++py)
          for (int px = 0; px < ps; ++px)
            for (int c = 0; c < ch; ++c)
              Y[((static_cast<size_t>(gy * ps + py) * hw) + (gx * ps + px)) * ch + c] =
                  tok[(py * ps + px) * ch + c];
      }
  };
  fwd(tp);
  auto bwd = [ida = a.id, out, grid, ps, ch, hw](Tape<T>& t) {
    const auto& gyb = t.node(out).grad;
    if (gyb.empty() || !t.wants_grad(ida)) return;
    T* GA = t.grad_buf(ida).data();
    for (int gy = 0; gy < grid; ++gy)
      for (int gx = 0; gx < grid; ++gx) {
        T* tok = GA + (static_cast<size_t>(gy) * grid + gx) * (ps * ps * ch);
        for (int py = 0; py < ps; ++py)
          for (int px = 0; px < ps; ++px)
            for (int c = 0; c < ch; ++c)
              tok[(py * ps + px) * ch + c] +=
                  gyb[((static_cast<size_t>(gy * ps + py) * hw) + (gx * ps + px)) * ch + c];
      }
  };
  tp.push_record("pixel_unshuffle", {a.id}, {out}, std::move(fwd), std::move(bwd));
  return {&tp, out};
}

// ---------------------------------------------------------------------------
// gradient oracle

// Central-difference gradient of a deterministic scalar function.
template <typename T>
std::vector<T> finite_diff_grad(const std::function<T(const std::vector<T>&)>& f,
                                const std::vector<T>& x, T eps) {
  if (eps <= T(0)) throw ValueError("finite_diff_grad: eps must be > 0");
  std::vector<T> g(x.size());
  std::vector<T> xp = x;
  for (size_t i = 0; i < x.size(); ++i) {
    xp[i] = x[i] + eps;
    T fp = f(xp);
    xp[i] = x[i] - eps;
    T fm = f(xp);
    xp[i] = x[i];
    if (!std::isfinite(static_cast<double>(fp)) || !std::isfinite(static_cast<double>(fm)))
      throw NumericError(strfmt("finite_diff_grad: non-finite f(x+-eps) at index %zu", i));
    g[i] = (fp - fm) / (T(2) * eps);
  }
  return g;
}

// Max relative error between two gradient vectors. Components are compared
// relative to their own magnitude, floored at a small fraction of the
// largest gradient so noise-dominated near-zero entries do not blow up.
template <typename T>
double max_rel_err(const std::vector<T>& a, const std::vector<T>& b) {
  if (a.size() != b.size()) throw ShapeError("max_rel_err: size mismatch");
  double gmax = 0;
  for (size_t i = 0; i < a.size(); ++i)
    gmax = std::max({gmax, std::abs(static_cast<double>(a[i])), std::abs(static_cast<double>(b[i]))});
  double floor = std::max(1e-3 * gmax, 1e-12);
  double worst = 0;
  for (size_t i = 0; i < a.size(); ++i) {
    double da = a[i], db = b[i];
    double denom = std::max({std::abs(da), std::abs(db), floor});
    worst = std::max(worst, std::abs(da - db) / denom);
  }
  return worst;
}

using Tensor32 = Tensor<float>;
using Tensor64 = Tensor<double>;
using Tape32 = Tape<float>;
using Tape64 = Tape<double>;

}  // namespace pfr
