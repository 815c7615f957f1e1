// Reverse-mode automatic differentiation over dense row-major double tensors.
// The graph is a dynamic tape: every op allocates a node holding its forward
// value, its parents and a backward closure; backward() walks the tape in
// reverse topological order exactly once.
#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <memory>
#include <numeric>
#include <optional>
#include <random>
#include <sstream>
#include <stdexcept>
#include <string>
#include <unordered_set>
#include <vector>

namespace ami {

using Shape = std::vector<int64_t>;

constexpr double kLogEps = 1e-12;      // guard inside log / softmax denominators
constexpr double kRelErrEps = 1e-8;    // denominator guard for relative errors

inline int64_t numel(const Shape& s) {
  int64_t n = 1;
  for (int64_t d : s) n *= d;
  return n;
}

inline std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << '[';
  for (size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
  os << ']';
  return os.str();
}

[[noreturn]] inline void op_error(const std::string& op, const std::string& what) {
  throw std::invalid_argument("tensor op '" + op + "': " + what);
}

struct TensorNode {
  Shape shape;
  std::vector<double> value;
  std::vector<double> grad;  // allocated lazily, same length as value
  bool requires_grad = false;
  const char* op = "leaf";
  std::vector<std::shared_ptr<TensorNode>> parents;
  std::function<void(TensorNode&)> backprop;  // reads this->grad, accumulates into parents

  void ensure_grad() {
    if (grad.size() != value.size()) grad.assign(value.size(), 0.0);
  }
};

using NodePtr = std::shared_ptr<TensorNode>;

// Value handle over a graph node. Copies share the node.
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(NodePtr n) : node_(std::move(n)) {}

  static Tensor from_data(Shape shape, std::vector<double> data, bool requires_grad = false) {
    if (numel(shape) != static_cast<int64_t>(data.size()))
      op_error("from_data", "shape " + shape_str(shape) + " does not match data length " +
                                std::to_string(data.size()));
    auto n = std::make_shared<TensorNode>();
    n->shape = std::move(shape);
    n->value = std::move(data);
    n->requires_grad = requires_grad;
    return Tensor(n);
  }
  static Tensor zeros(Shape shape, bool requires_grad = false) {
    std::vector<double> d(numel(shape), 0.0);
    return from_data(std::move(shape), std::move(d), requires_grad);
  }
  static Tensor full(Shape shape, double v, bool requires_grad = false) {
    std::vector<double> d(numel(shape), v);
    return from_data(std::move(shape), std::move(d), requires_grad);
  }
  static Tensor scalar(double v) { return from_data({1}, {v}); }
  static Tensor randn(Shape shape, std::mt19937_64& rng, double stddev = 1.0,
                      bool requires_grad = false) {
    std::normal_distribution<double> dist(0.0, stddev);
    std::vector<double> d(numel(shape));
    for (auto& x : d) x = dist(rng);
    return from_data(std::move(shape), std::move(d), requires_grad);
  }
  static Tensor uniform(Shape shape, std::mt19937_64& rng, double lo, double hi,
                        bool requires_grad = false) {
    std::uniform_real_distribution<double> dist(lo, hi);
    std::vector<double> d(numel(shape));
    for (auto& x : d) x = dist(rng);
    return from_data(std::move(shape), std::move(d), requires_grad);
  }

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const { return node_->shape; }
  int ndim() const { return static_cast<int>(node_->shape.size()); }
  int64_t dim(int i) const {
    if (i < 0) i += ndim();
    return node_->shape[i];
  }
  int64_t size() const { return static_cast<int64_t>(node_->value.size()); }
  const std::vector<double>& data() const { return node_->value; }
  std::vector<double>& data_mut() { return node_->value; }
  double val(int64_t i) const { return node_->value[i]; }
  double item() const {
    if (size() != 1) op_error("item", "tensor " + shape_str(shape()) + " is not scalar");
    return node_->value[0];
  }
  bool requires_grad() const { return node_->requires_grad; }
  void set_requires_grad(bool rg) { node_->requires_grad = rg; }
  const std::vector<double>& grad() const {
    node_->ensure_grad();
    return node_->grad;
  }
  std::vector<double>& grad_mut() {
    node_->ensure_grad();
    return node_->grad;
  }
  void zero_grad() { node_->grad.assign(node_->value.size(), 0.0); }
  NodePtr node() const { return node_; }

  // Leaf copy sharing no graph history.
  Tensor detach() const { return from_data(node_->shape, node_->value, false); }

 private:
  NodePtr node_;
};

inline Tensor make_op(const char* op, Shape shape, std::vector<double> value,
                      std::vector<Tensor> parents,
                      std::function<void(TensorNode&)> backprop) {
  auto n = std::make_shared<TensorNode>();
  n->shape = std::move(shape);
  n->value = std::move(value);
  n->op = op;
  bool rg = false;
  n->parents.reserve(parents.size());
  for (auto& p : parents) {
    rg = rg || p.requires_grad();
    n->parents.push_back(p.node());
  }
  n->requires_grad = rg;
  if (rg) n->backprop = std::move(backprop);
  return Tensor(n);
}

// ---------------------------------------------------------------------------
// Broadcasting (numpy rules)
// ---------------------------------------------------------------------------

inline Shape broadcast_shape(const char* op, const Shape& a, const Shape& b) {
  size_t nd = std::max(a.size(), b.size());
  Shape out(nd);
  for (size_t i = 0; i < nd; ++i) {
    int64_t da = i < nd - a.size() ? 1 : a[i - (nd - a.size())];
    int64_t db = i < nd - b.size() ? 1 : b[i - (nd - b.size())];
    if (da != db && da != 1 && db != 1)
      op_error(op, "shapes " + shape_str(a) + " and " + shape_str(b) + " do not broadcast");
    out[i] = std::max(da, db);
  }
  return out;
}

inline std::vector<int64_t> contiguous_strides(const Shape& s) {
  std::vector<int64_t> st(s.size());
  int64_t acc = 1;
  for (int i = static_cast<int>(s.size()) - 1; i >= 0; --i) {
    st[i] = acc;
    acc *= s[i];
  }
  return st;
}

// Strides of `s` viewed as shape `out` (0 along broadcast axes).
inline std::vector<int64_t> broadcast_strides(const Shape& s, const Shape& out) {
  auto st = contiguous_strides(s);
  std::vector<int64_t> r(out.size(), 0);
  size_t off = out.size() - s.size();
  for (size_t i = 0; i < s.size(); ++i) r[off + i] = (s[i] == 1 && out[off + i] != 1) ? 0 : st[i];
  return r;
}

namespace detail {

// Apply fn(out_linear, a_linear, b_linear) over the broadcast iteration space.
template <typename Fn>
inline void for_each_broadcast(const Shape& out, const std::vector<int64_t>& sa,
                               const std::vector<int64_t>& sb, Fn&& fn) {
  int64_t n = numel(out);
  size_t nd = out.size();
  std::vector<int64_t> idx(nd, 0);
  int64_t ia = 0, ib = 0;
  for (int64_t io = 0; io < n; ++io) {
    fn(io, ia, ib);
    for (int d = static_cast<int>(nd) - 1; d >= 0; --d) {
      idx[d]++;
      ia += sa[d];
      ib += sb[d];
      if (idx[d] < out[d]) break;
      idx[d] = 0;
      ia -= sa[d] * out[d];
      ib -= sb[d] * out[d];
    }
  }
}

}  // namespace detail

// Elementwise binary op with broadcasting. dfa/dfb give the local partials
// as functions of (a, b, y).
template <typename F, typename Da, typename Db>
inline Tensor binary_op(const char* op, const Tensor& a, const Tensor& b, F f, Da dfa, Db dfb) {
  const Shape& sa = a.shape();
  const Shape& sb = b.shape();
  if (sa == sb) {
    int64_t n = a.size();
    std::vector<double> out(n);
    const double* pa = a.data().data();
    const double* pb = b.data().data();
    for (int64_t i = 0; i < n; ++i) out[i] = f(pa[i], pb[i]);
    return make_op(op, sa, std::move(out), {a, b}, [f, dfa, dfb](TensorNode& self) {
      auto& A = *self.parents[0];
      auto& B = *self.parents[1];
      int64_t n = static_cast<int64_t>(self.value.size());
      if (A.requires_grad) {
        A.ensure_grad();
        for (int64_t i = 0; i < n; ++i)
          A.grad[i] += self.grad[i] * dfa(A.value[i], B.value[i], self.value[i]);
      }
      if (B.requires_grad) {
        B.ensure_grad();
        for (int64_t i = 0; i < n; ++i)
          B.grad[i] += self.grad[i] * dfb(A.value[i], B.value[i], self.value[i]);
      }
    });
  }
  Shape so = broadcast_shape(op, sa, sb);
  auto sta = broadcast_strides(sa, so);
  auto stb = broadcast_strides(sb, so);
  std::vector<double> out(numel(so));
  const double* pa = a.data().data();
  const double* pb = b.data().data();
  detail::for_each_broadcast(so, sta, stb, [&](int64_t io, int64_t ia, int64_t ib) {
    out[io] = f(pa[ia], pb[ib]);
  });
  return make_op(op, so, std::move(out), {a, b},
                 [f, dfa, dfb, so, sta, stb](TensorNode& self) {
                   auto& A = *self.parents[0];
                   auto& B = *self.parents[1];
                   if (A.requires_grad) A.ensure_grad();
                   if (B.requires_grad) B.ensure_grad();
                   detail::for_each_broadcast(so, sta, stb, [&](int64_t io, int64_t ia, int64_t ib) {
                     double g = self.grad[io];
                     if (A.requires_grad) A.grad[ia] += g * dfa(A.value[ia], B.value[ib], self.value[io]);
                     if (B.requires_grad) B.grad[ib] += g * dfb(A.value[ia], B.value[ib], self.value[io]);
                   });
                 });
}

inline Tensor add(const Tensor& a, const Tensor& b) {
  return binary_op(
      "add", a, b, [](double x, double y) { return x + y; },
      [](double, double, double) { return 1.0; }, [](double, double, double) { return 1.0; });
}
inline Tensor sub(const Tensor& a, const Tensor& b) {
  return binary_op(
      "sub", a, b, [](double x, double y) { return x - y; },
      [](double, double, double) { return 1.0; }, [](double, double, double) { return -1.0; });
}
inline Tensor mul(const Tensor& a, const Tensor& b) {
  return binary_op(
      "mul", a, b, [](double x, double y) { return x * y; },
      [](double, double y, double) { return y; }, [](double x, double, double) { return x; });
}
inline Tensor div(const Tensor& a, const Tensor& b) {
  return binary_op(
      "div", a, b, [](double x, double y) { return x / y; },
      [](double, double y, double) { return 1.0 / y; },
      [](double x, double y, double) { return -x / (y * y); });
}

// Elementwise unary op; df receives (x, y).
template <typename F, typename Df>
inline Tensor unary_op(const char* op, const Tensor& a, F f, Df df) {
  int64_t n = a.size();
  std::vector<double> out(n);
  const double* pa = a.data().data();
  for (int64_t i = 0; i < n; ++i) out[i] = f(pa[i]);
  return make_op(op, a.shape(), std::move(out), {a}, [df](TensorNode& self) {
    auto& A = *self.parents[0];
    if (!A.requires_grad) return;
    A.ensure_grad();
    int64_t n = static_cast<int64_t>(self.value.size());
    for (int64_t i = 0; i < n; ++i) A.grad[i] += self.grad[i] * df(A.value[i], self.value[i]);
  });
}

inline Tensor add_scalar(const Tensor& a, double s) {
  return unary_op(
      "add_scalar", a, [s](double x) { return x + s; }, [](double, double) { return 1.0; });
}
inline Tensor mul_scalar(const Tensor& a, double s) {
  return unary_op(
      "mul_scalar", a, [s](double x) { return x * s; }, [s](double, double) { return s; });
}
inline Tensor neg(const Tensor& a) { return mul_scalar(a, -1.0); }
inline Tensor abs(const Tensor& a) {
  return unary_op(
      "abs", a, [](double x) { return std::fabs(x); },
      [](double x, double) { return x < 0 ? -1.0 : 1.0; });
}
inline Tensor exp(const Tensor& a) {
  return unary_op(
      "exp", a, [](double x) { return std::exp(x); }, [](double, double y) { return y; });
}
// log(x + eps); the guard keeps zero activations finite.
inline Tensor log_eps(const Tensor& a) {
  return unary_op(
      "log_eps", a, [](double x) { return std::log(x + kLogEps); },
      [](double x, double) { return 1.0 / (x + kLogEps); });
}
inline Tensor sqrt(const Tensor& a) {
  return unary_op(
      "sqrt", a, [](double x) { return std::sqrt(x); },
      [](double, double y) { return 0.5 / y; });
}
inline Tensor sigmoid(const Tensor& a) {
  return unary_op(
      "sigmoid", a,
      [](double x) { return x >= 0 ? 1.0 / (1.0 + std::exp(-x)) : std::exp(x) / (1.0 + std::exp(x)); },
      [](double, double y) { return y * (1.0 - y); });
}
inline Tensor tanh(const Tensor& a) {
  return unary_op(
      "tanh", a, [](double x) { return std::tanh(x); },
      [](double, double y) { return 1.0 - y * y; });
}
inline Tensor softplus(const Tensor& a) {
  return unary_op(
      "softplus", a,
      [](double x) { return std::max(x, 0.0) + std::log1p(std::exp(-std::fabs(x))); },
      [](double x, double) { return x >= 0 ? 1.0 / (1.0 + std::exp(-x)) : std::exp(x) / (1.0 + std::exp(x)); });
}

// tanh-form gelu, composed so it stays smooth for gradient checks
inline Tensor gelu(const Tensor& x) {
  Tensor x3 = mul(mul(x, x), x);
  Tensor inner = mul_scalar(add(x, mul_scalar(x3, 0.044715)), 0.7978845608028654);
  return mul(mul_scalar(x, 0.5), add_scalar(tanh(inner), 1.0));
}

// ---------------------------------------------------------------------------
// Shape ops
// ---------------------------------------------------------------------------

inline Tensor reshape(const Tensor& a, Shape shape) {
  // one dim may be -1
  int64_t known = 1;
  int infer = -1;
  for (size_t i = 0; i < shape.size(); ++i) {
    if (shape[i] == -1) {
      if (infer >= 0) op_error("reshape", "more than one inferred dim");
      infer = static_cast<int>(i);
    } else {
      known *= shape[i];
    }
  }
  if (infer >= 0) shape[infer] = a.size() / known;
  if (numel(shape) != a.size())
    op_error("reshape", shape_str(a.shape()) + " -> " + shape_str(shape) + " changes element count");
  return make_op("reshape", std::move(shape), a.data(), {a}, [](TensorNode& self) {
    auto& A = *self.parents[0];
    if (!A.requires_grad) return;
    A.ensure_grad();
    for (size_t i = 0; i < self.value.size(); ++i) A.grad[i] += self.grad[i];
  });
}

inline Tensor transpose(const Tensor& a, int ax1, int ax2) {
  int nd = a.ndim();
  if (ax1 < 0) ax1 += nd;
  if (ax2 < 0) ax2 += nd;
  if (ax1 < 0 || ax1 >= nd || ax2 < 0 || ax2 >= nd)
    op_error("transpose", "axes out of range for " + shape_str(a.shape()));
  Shape so = a.shape();
  std::swap(so[ax1], so[ax2]);
  auto sta = contiguous_strides(a.shape());
  std::swap(sta[ax1], sta[ax2]);  // strides of input viewed in output order
  int64_t n = a.size();
  std::vector<double> out(n);
  const double* pa = a.data().data();
  std::vector<int64_t> idx(nd, 0);
  int64_t ia = 0;
  for (int64_t io = 0; io < n; ++io) {
    out[io] = pa[ia];
    for (int d = nd - 1; d >= 0; --d) {
      idx[d]++;
      ia += sta[d];
      if (idx[d] < so[d]) break;
      idx[d] = 0;
      ia -= sta[d] * so[d];
    }
  }
  return make_op("transpose", so, std::move(out), {a}, [so, sta, nd](TensorNode& self) {
    auto& A = *self.parents[0];
    if (!A.requires_grad) return;
    A.ensure_grad();
    std::vector<int64_t> idx(nd, 0);
    int64_t ia = 0;
    int64_t n = static_cast<int64_t>(self.value.size());
    for (int64_t io = 0; io < n; ++io) {
      A.grad[ia] += self.grad[io];
      for (int d = nd - 1; d >= 0; --d) {
        idx[d]++;
        ia += sta[d];
        if (idx[d] < so[d]) break;
        idx[d] = 0;
        ia -= sta[d] * so[d];
      }
    }
  });
}

inline Tensor concat(const std::vector<Tensor>& parts, int axis) {
  if (parts.empty()) op_error("concat", "no inputs");
  int nd = parts[0].ndim();
  if (axis < 0) axis += nd;
  Shape so = parts[0].shape();
  int64_t cat = 0;
  for (const auto& p : parts) {
    if (p.ndim() != nd) op_error("concat", "rank mismatch");
    for (int d = 0; d < nd; ++d)
      if (d != axis && p.shape()[d] != so[d])
        op_error("concat", "shape mismatch " + shape_str(p.shape()) + " vs " + shape_str(so));
    cat += p.shape()[axis];
  }
  so[axis] = cat;
  int64_t outer = 1, inner = 1;
  for (int d = 0; d < axis; ++d) outer *= so[d];
  for (int d = axis + 1; d < nd; ++d) inner *= so[d];
  std::vector<double> out(numel(so));
  int64_t col = 0;
  std::vector<int64_t> offs;  // column offset of each part
  for (const auto& p : parts) {
    offs.push_back(col);
    int64_t pc = p.shape()[axis];
    const double* pd = p.data().data();
    for (int64_t o = 0; o < outer; ++o)
      std::copy(pd + o * pc * inner, pd + (o + 1) * pc * inner,
                out.begin() + (o * cat + col) * inner);
    col += pc;
  }
  return make_op("concat", so, std::move(out), parts,
                 [outer, inner, cat, offs](TensorNode& self) {
                   for (size_t pi = 0; pi < self.parents.size(); ++pi) {
                     auto& P = *self.parents[pi];
                     if (!P.requires_grad) continue;
                     P.ensure_grad();
                     int64_t pc = static_cast<int64_t>(P.value.size()) / (outer * inner);
                     for (int64_t o = 0; o < outer; ++o) {
                       const double* g = self.grad.data() + (o * cat + offs[pi]) * inner;
                       double* dst = P.grad.data() + o * pc * inner;
                       for (int64_t i = 0; i < pc * inner; ++i) dst[i] += g[i];
                     }
                   }
                 });
}

inline Tensor slice(const Tensor& a, int axis, int64_t start, int64_t len) {
  int nd = a.ndim();
  if (axis < 0) axis += nd;
  int64_t da = a.shape()[axis];
  if (start < 0 || len < 0 || start + len > da)
    op_error("slice", "range [" + std::to_string(start) + "," + std::to_string(start + len) +
                          ") out of bounds for axis size " + std::to_string(da));
  Shape so = a.shape();
  so[axis] = len;
  int64_t outer = 1, inner = 1;
  for (int d = 0; d < axis; ++d) outer *= so[d];
  for (int d = axis + 1; d < nd; ++d) inner *= so[d];
  std::vector<double> out(numel(so));
  const double* pa = a.data().data();
  for (int64_t o = 0; o < outer; ++o)
    std::copy(pa + (o * da + start) * inner, pa + (o * da + start + len) * inner,
              out.begin() + o * len * inner);
  return make_op("slice", so, std::move(out), {a},
                 [outer, inner, da, start, len](TensorNode& self) {
                   auto& A = *self.parents[0];
                   if (!A.requires_grad) return;
                   A.ensure_grad();
                   for (int64_t o = 0; o < outer; ++o) {
                     const double* g = self.grad.data() + o * len * inner;
                     double* dst = A.grad.data() + (o * da + start) * inner;
                     for (int64_t i = 0; i < len * inner; ++i) dst[i] += g[i];
                   }
                 });
}

// ---------------------------------------------------------------------------
// Reductions
// ---------------------------------------------------------------------------

// axis = nullopt reduces everything to a scalar.
inline Tensor sum(const Tensor& a, std::optional<int> axis = std::nullopt, bool keepdim = false) {
  if (!axis) {
    double s = 0;
    for (double v : a.data()) s += v;
    Shape so = keepdim ? Shape(a.ndim(), 1) : Shape{1};
    return make_op("sum", so, {s}, {a}, [](TensorNode& self) {
      auto& A = *self.parents[0];
      if (!A.requires_grad) return;
      A.ensure_grad();
      double g = self.grad[0];
      for (auto& x : A.grad) x += g;
    });
  }
  int ax = *axis;
  int nd = a.ndim();
  if (ax < 0) ax += nd;
  if (ax < 0 || ax >= nd) op_error("sum", "axis out of range for " + shape_str(a.shape()));
  int64_t red = a.shape()[ax];
  int64_t outer = 1, inner = 1;
  for (int d = 0; d < ax; ++d) outer *= a.shape()[d];
  for (int d = ax + 1; d < nd; ++d) inner *= a.shape()[d];
  Shape so;
  for (int d = 0; d < nd; ++d) {
    if (d == ax) {
      if (keepdim) so.push_back(1);
    } else {
      so.push_back(a.shape()[d]);
    }
  }
  if (so.empty()) so = {1};
  std::vector<double> out(outer * inner, 0.0);
  const double* pa = a.data().data();
  for (int64_t o = 0; o < outer; ++o)
    for (int64_t r = 0; r < red; ++r) {
      const double* src = pa + (o * red + r) * inner;
      double* dst = out.data() + o * inner;
      for (int64_t i = 0; i < inner; ++i) dst[i] += src[i];
    }
  return make_op("sum", so, std::move(out), {a}, [outer, inner, red](TensorNode& self) {
    auto& A = *self.parents[0];
    if (!A.requires_grad) return;
    A.ensure_grad();
    for (int64_t o = 0; o < outer; ++o)
      for (int64_t r = 0; r < red; ++r) {
        const double* g = self.grad.data() + o * inner;
        double* dst = A.grad.data() + (o * red + r) * inner;
        for (int64_t i = 0; i < inner; ++i) dst[i] += g[i];
      }
  });
}

inline Tensor mean(const Tensor& a, std::optional<int> axis = std::nullopt, bool keepdim = false) {
  int64_t n;
  if (!axis) {
    n = a.size();
  } else {
    int ax = *axis;
    if (ax < 0) ax += a.ndim();
    n = a.shape()[ax];
  }
  return mul_scalar(sum(a, axis, keepdim), 1.0 / static_cast<double>(n));
}

// sum of squares -> scalar
inline Tensor squared_l2(const Tensor& a) { return sum(mul(a, a)); }

// ---------------------------------------------------------------------------
// Matmul
// ---------------------------------------------------------------------------

namespace detail {

inline void mm_nn(const double* A, const double* B, double* C, int64_t m, int64_t k, int64_t n) {
  for (int64_t i = 0; i < m; ++i) {
    double* c = C + i * n;
    const double* a = A + i * k;
    for (int64_t p = 0; p < k; ++p) {
      double av = a[p];
      const double* b = B + p * n;
      for (int64_t j = 0; j < n; ++j) c[j] += av * b[j];
    }
  }
}
// C[m,n] += A[m,k] * B^T where B is [n,k]
inline void mm_nt(const double* A, const double* B, double* C, int64_t m, int64_t k, int64_t n) {
  for (int64_t i = 0; i < m; ++i) {
    const double* a = A + i * k;
    double* c = C + i * n;
    for (int64_t j = 0; j < n; ++j) {
      const double* b = B + j * k;
      double s = 0;
      for (int64_t p = 0; p < k; ++p) s += a[p] * b[p];
      c[j] += s;
    }
  }
}
// C[k,n] += A^T * G where A is [m,k], G is [m,n]
inline void mm_tn(const double* A, const double* G, double* C, int64_t m, int64_t k, int64_t n) {
  for (int64_t p = 0; p < m; ++p) {
    const double* a = A + p * k;
    const double* g = G + p * n;
    for (int64_t i = 0; i < k; ++i) {
      double av = a[i];
      double* c = C + i * n;
      for (int64_t j = 0; j < n; ++j) c[j] += av * g[j];
    }
  }
}

}  // namespace detail

// A: [..., m, k] x B: [..., k, n] with equal leading dims, or B: [k, n] shared
// across the batch (weight matrix).
inline Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.ndim() < 2 || b.ndim() < 2) op_error("matmul", "inputs must have rank >= 2");
  int64_t m = a.dim(-2), k = a.dim(-1);
  int64_t k2 = b.dim(-2), n = b.dim(-1);
  if (k != k2)
    op_error("matmul", "inner dims disagree: " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
  bool shared_b = (b.ndim() == 2 && a.ndim() > 2);
  if (!shared_b && a.ndim() != b.ndim())
    op_error("matmul", "batch ranks disagree: " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
  Shape so(a.shape().begin(), a.shape().end() - 2);
  if (!shared_b)
    for (size_t d = 0; d + 2 < b.shape().size(); ++d)
      if (b.shape()[d] != so[d])
        op_error("matmul", "batch dims disagree: " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
  int64_t batch = 1;
  for (int64_t d : so) batch *= d;
  so.push_back(m);
  so.push_back(n);
  std::vector<double> out(batch * m * n, 0.0);
  const double* pa = a.data().data();
  const double* pb = b.data().data();
  for (int64_t bi = 0; bi < batch; ++bi)
    detail::mm_nn(pa + bi * m * k, shared_b ? pb : pb + bi * k * n, out.data() + bi * m * n, m, k, n);
  return make_op("matmul", so, std::move(out), {a, b},
                 [m, k, n, batch, shared_b](TensorNode& self) {
                   auto& A = *self.parents[0];
                   auto& B = *self.parents[1];
                   if (A.requires_grad) {
                     A.ensure_grad();
                     for (int64_t bi = 0; bi < batch; ++bi)
                       detail::mm_nt(self.grad.data() + bi * m * n,
                                     B.value.data() + (shared_b ? 0 : bi * k * n),
                                     A.grad.data() + bi * m * k, m, n, k);
                   }
                   if (B.requires_grad) {
                     B.ensure_grad();
                     for (int64_t bi = 0; bi < batch; ++bi)
                       detail::mm_tn(A.value.data() + bi * m * k, self.grad.data() + bi * m * n,
                                     B.grad.data() + (shared_b ? 0 : bi * k * n), m, k, n);
                   }
                 });
}

// ---------------------------------------------------------------------------
// Softmax / layer norm / cross entropy
// ---------------------------------------------------------------------------

inline Tensor softmax_lastdim(const Tensor& a) {
  int64_t d = a.dim(-1);
  if (d == 0) op_error("softmax", "empty last axis");
  int64_t rows = a.size() / d;
  std::vector<double> out(a.size());
  const double* pa = a.data().data();
  for (int64_t r = 0; r < rows; ++r) {
    const double* x = pa + r * d;
    double* y = out.data() + r * d;
    double mx = x[0];
    for (int64_t i = 1; i < d; ++i) mx = std::max(mx, x[i]);
    double s = 0;
    for (int64_t i = 0; i < d; ++i) {
      y[i] = std::exp(x[i] - mx);
      s += y[i];
    }
    s += kLogEps;
    for (int64_t i = 0; i < d; ++i) y[i] /= s;
  }
  return make_op("softmax", a.shape(), std::move(out), {a}, [d, rows](TensorNode& self) {
    auto& A = *self.parents[0];
    if (!A.requires_grad) return;
    A.ensure_grad();
    for (int64_t r = 0; r < rows; ++r) {
      const double* y = self.value.data() + r * d;
      const double* g = self.grad.data() + r * d;
      double* dx = A.grad.data() + r * d;
      double dot = 0;
      for (int64_t i = 0; i < d; ++i) dot += g[i] * y[i];
      for (int64_t i = 0; i < d; ++i) dx[i] += y[i] * (g[i] - dot);
    }
  });
}

// Per-row normalization over the last axis with affine parameters.
inline Tensor layer_norm_lastdim(const Tensor& a, const Tensor& gamma, const Tensor& beta,
                                 double eps = 1e-8) {
  int64_t d = a.dim(-1);
  if (gamma.size() != d || beta.size() != d)
    op_error("layer_norm", "affine params must have length " + std::to_string(d));
  int64_t rows = a.size() / d;
  std::vector<double> out(a.size());
  std::vector<double> xhat(a.size());
  std::vector<double> inv_std(rows);
  const double* pa = a.data().data();
  const double* pg = gamma.data().data();
  const double* pb = beta.data().data();
  for (int64_t r = 0; r < rows; ++r) {
    const double* x = pa + r * d;
    double mu = 0;
    for (int64_t i = 0; i < d; ++i) mu += x[i];
    mu /= d;
    double var = 0;
    for (int64_t i = 0; i < d; ++i) var += (x[i] - mu) * (x[i] - mu);
    var /= d;
    double is = 1.0 / std::sqrt(var + eps);
    inv_std[r] = is;
    for (int64_t i = 0; i < d; ++i) {
      double xh = (x[i] - mu) * is;
      xhat[r * d + i] = xh;
      out[r * d + i] = pg[i] * xh + pb[i];
    }
  }
  auto xh_shared = std::make_shared<std::vector<double>>(std::move(xhat));
  auto is_shared = std::make_shared<std::vector<double>>(std::move(inv_std));
  return make_op("layer_norm", a.shape(), std::move(out), {a, gamma, beta},
                 [d, rows, xh_shared, is_shared](TensorNode& self) {
                   auto& A = *self.parents[0];
                   auto& G = *self.parents[1];
                   auto& Bt = *self.parents[2];
                   const auto& xh = *xh_shared;
                   const auto& is = *is_shared;
                   if (G.requires_grad) {
                     G.ensure_grad();
                     for (int64_t r = 0; r < rows; ++r)
                       for (int64_t i = 0; i < d; ++i)
                         G.grad[i] += self.grad[r * d + i] * xh[r * d + i];
                   }
                   if (Bt.requires_grad) {
                     Bt.ensure_grad();
                     for (int64_t r = 0; r < rows; ++r)
                       for (int64_t i = 0; i < d; ++i) Bt.grad[i] += self.grad[r * d + i];
                   }
                   if (A.requires_grad) {
                     A.ensure_grad();
                     for (int64_t r = 0; r < rows; ++r) {
                       double mean_dxh = 0, mean_dxh_xh = 0;
                       for (int64_t i = 0; i < d; ++i) {
                         double dxh = self.grad[r * d + i] * G.value[i];
                         mean_dxh += dxh;
                         mean_dxh_xh += dxh * xh[r * d + i];
                       }
                       mean_dxh /= d;
                       mean_dxh_xh /= d;
                       for (int64_t i = 0; i < d; ++i) {
                         double dxh = self.grad[r * d + i] * G.value[i];
                         A.grad[r * d + i] +=
                             is[r] * (dxh - mean_dxh - xh[r * d + i] * mean_dxh_xh);
                       }
                     }
                   }
                 });
}

// Mean cross entropy over the batch; logits [N, C].
inline Tensor cross_entropy(const Tensor& logits, const std::vector<int>& labels) {
  if (logits.ndim() != 2) op_error("cross_entropy", "logits must be [N, C]");
  int64_t N = logits.dim(0), C = logits.dim(1);
  if (static_cast<int64_t>(labels.size()) != N)
    op_error("cross_entropy", "label count " + std::to_string(labels.size()) +
                                  " != batch " + std::to_string(N));
  for (int v : labels)
    if (v < 0 || v >= C)
      op_error("cross_entropy", "label " + std::to_string(v) + " out of range [0," +
                                    std::to_string(C) + ")");
  const double* px = logits.data().data();
  std::vector<double> sm(N * C);
  double loss = 0;
  for (int64_t r = 0; r < N; ++r) {
    const double* x = px + r * C;
    double mx = x[0];
    for (int64_t i = 1; i < C; ++i) mx = std::max(mx, x[i]);
    double s = 0;
    for (int64_t i = 0; i < C; ++i) {
      sm[r * C + i] = std::exp(x[i] - mx);
      s += sm[r * C + i];
    }
    for (int64_t i = 0; i < C; ++i) sm[r * C + i] /= s;
    loss += std::log(s) + mx - x[labels[r]];
  }
  loss /= static_cast<double>(N);
  auto sm_shared = std::make_shared<std::vector<double>>(std::move(sm));
  auto lab = std::make_shared<std::vector<int>>(labels);
  return make_op("cross_entropy", {1}, {loss}, {logits},
                 [N, C, sm_shared, lab](TensorNode& self) {
                   auto& A = *self.parents[0];
                   if (!A.requires_grad) return;
                   A.ensure_grad();
                   double g = self.grad[0] / static_cast<double>(N);
                   for (int64_t r = 0; r < N; ++r)
                     for (int64_t i = 0; i < C; ++i)
                       A.grad[r * C + i] +=
                           g * ((*sm_shared)[r * C + i] - ((*lab)[r] == i ? 1.0 : 0.0));
                 });
}

// ---------------------------------------------------------------------------
// Attention
// ---------------------------------------------------------------------------

// softmax(Q K^T / sqrt(d)) V over the last two axes; Q [.., Lq, d], K/V [.., Lk, d].
// mask, when given, is [Lq, Lk]; true = blocked (set to -1e9 before softmax).
inline Tensor scaled_dot_product_attention(const Tensor& q, const Tensor& k, const Tensor& v,
                                           const std::vector<uint8_t>* mask = nullptr) {
  if (k.dim(-2) == 0) op_error("attention", "zero-length key axis");
  if (q.dim(-1) != k.dim(-1) || k.dim(-1) != v.dim(-1))
    op_error("attention", "head dims disagree: q " + shape_str(q.shape()) + " k " +
                              shape_str(k.shape()) + " v " + shape_str(v.shape()));
  int64_t d = q.dim(-1);
  Tensor scores = mul_scalar(matmul(q, transpose(k, -1, -2)), 1.0 / std::sqrt(static_cast<double>(d)));
  if (mask) {
    int64_t lq = q.dim(-2), lk = k.dim(-2);
    if (static_cast<int64_t>(mask->size()) != lq * lk)
      op_error("attention", "mask size mismatch");
    std::vector<double> bias(lq * lk, 0.0);
    for (int64_t i = 0; i < lq * lk; ++i)
      if ((*mask)[i]) bias[i] = -1e9;
    scores = add(scores, Tensor::from_data({lq, lk}, std::move(bias)));
  }
  return matmul(softmax_lastdim(scores), v);
}

// ---------------------------------------------------------------------------
// Patch extraction / merge, embedding lookup, dropout
// ---------------------------------------------------------------------------

// x [..., C, T] -> [..., L, C*P] with L = T/P; patch l row holds channels
// stacked: out[l, c*P + p] = x[c, l*P + p].
inline Tensor extract_patches(const Tensor& x, int64_t P) {
  if (x.ndim() < 2) op_error("extract_patches", "need at least [C, T]");
  int64_t T = x.dim(-1), C = x.dim(-2);
  if (P <= 0 || T % P != 0)
    op_error("extract_patches", "window length " + std::to_string(T) +
                                    " not divisible by patch size " + std::to_string(P));
  int64_t L = T / P;
  Shape so(x.shape().begin(), x.shape().end() - 2);
  int64_t batch = 1;
  for (int64_t dd : so) batch *= dd;
  so.push_back(L);
  so.push_back(C * P);
  std::vector<double> out(numel(so));
  const double* px = x.data().data();
  for (int64_t b = 0; b < batch; ++b)
    for (int64_t l = 0; l < L; ++l)
      for (int64_t c = 0; c < C; ++c)
        for (int64_t p = 0; p < P; ++p)
          out[((b * L + l) * C + c) * P + p] = px[(b * C + c) * T + l * P + p];
  return make_op("extract_patches", so, std::move(out), {x},
                 [batch, L, C, P, T](TensorNode& self) {
                   auto& A = *self.parents[0];
                   if (!A.requires_grad) return;
                   A.ensure_grad();
                   for (int64_t b = 0; b < batch; ++b)
                     for (int64_t l = 0; l < L; ++l)
                       for (int64_t c = 0; c < C; ++c)
                         for (int64_t p = 0; p < P; ++p)
                           A.grad[(b * C + c) * T + l * P + p] +=
                               self.grad[((b * L + l) * C + c) * P + p];
                 });
}

// Inverse of extract_patches: [..., L, C*P] -> [..., C, L*P].
inline Tensor merge_patches(const Tensor& x, int64_t C) {
  if (x.ndim() < 2) op_error("merge_patches", "need at least [L, C*P]");
  int64_t CP = x.dim(-1), L = x.dim(-2);
  if (CP % C != 0) op_error("merge_patches", "row length not divisible by channel count");
  int64_t P = CP / C;
  Shape so(x.shape().begin(), x.shape().end() - 2);
  int64_t batch = 1;
  for (int64_t dd : so) batch *= dd;
  so.push_back(C);
  so.push_back(L * P);
  std::vector<double> out(numel(so));
  const double* px = x.data().data();
  for (int64_t b = 0; b < batch; ++b)
    for (int64_t l = 0; l < L; ++l)
      for (int64_t c = 0; c < C; ++c)
        for (int64_t p = 0; p < P; ++p)
          out[(b * C + c) * (L * P) + l * P + p] = px[((b * L + l) * C + c) * P + p];
  return make_op("merge_patches", so, std::move(out), {x},
                 [batch, L, C, P](TensorNode& self) {
                   auto& A = *self.parents[0];
                   if (!A.requires_grad) return;
                   A.ensure_grad();
                   for (int64_t b = 0; b < batch; ++b)
                     for (int64_t l = 0; l < L; ++l)
                       for (int64_t c = 0; c < C; ++c)
                         for (int64_t p = 0; p < P; ++p)
                           A.grad[((b * L + l) * C + c) * P + p] +=
                               self.grad[(b * C + c) * (L * P) + l * P + p];
                 });
}

// Patchifying 1-D convolution with stride == kernel == P: x [..., C, T],
// weight [C*P, D] -> tokens [..., L, D].
inline Tensor conv1d_patch(const Tensor& x, const Tensor& weight, int64_t P) {
  return matmul(extract_patches(x, P), weight);
}

inline Tensor embedding_lookup(const Tensor& table, const std::vector<int64_t>& idx) {
  if (table.ndim() != 2) op_error("embedding_lookup", "table must be [V, D]");
  int64_t V = table.dim(0), D = table.dim(1);
  for (int64_t i : idx)
    if (i < 0 || i >= V) op_error("embedding_lookup", "index " + std::to_string(i) + " out of range");
  int64_t N = static_cast<int64_t>(idx.size());
  std::vector<double> out(N * D);
  const double* pt = table.data().data();
  for (int64_t r = 0; r < N; ++r)
    std::copy(pt + idx[r] * D, pt + (idx[r] + 1) * D, out.begin() + r * D);
  auto ids = std::make_shared<std::vector<int64_t>>(idx);
  return make_op("embedding_lookup", {N, D}, std::move(out), {table},
                 [D, ids](TensorNode& self) {
                   auto& A = *self.parents[0];
                   if (!A.requires_grad) return;
                   A.ensure_grad();
                   for (size_t r = 0; r < ids->size(); ++r) {
                     const double* g = self.grad.data() + r * D;
                     double* dst = A.grad.data() + (*ids)[r] * D;
                     for (int64_t i = 0; i < D; ++i) dst[i] += g[i];
                   }
                 });
}

// Inverted dropout; identity when train == false or rate == 0.
inline Tensor dropout(const Tensor& x, double rate, std::mt19937_64& rng, bool train) {
  if (!train || rate <= 0.0) return x;
  if (rate >= 1.0) op_error("dropout", "rate must be < 1");
  std::bernoulli_distribution keep(1.0 - rate);
  std::vector<double> m(x.size());
  double scale = 1.0 / (1.0 - rate);
  for (auto& v : m) v = keep(rng) ? scale : 0.0;
  return mul(x, Tensor::from_data(x.shape(), std::move(m)));
}

// ---------------------------------------------------------------------------
// Cosine similarity / normalization helpers
// ---------------------------------------------------------------------------

inline Tensor row_normalize(const Tensor& x) {
  Tensor ss = sum(mul(x, x), -1, /*keepdim=*/true);
  return div(x, sqrt(add_scalar(ss, kLogEps)));
}

// cos(a, b) along the last axis; broadcasting applies to leading axes.
inline Tensor cosine_similarity_lastdim(const Tensor& a, const Tensor& b) {
  return sum(mul(row_normalize(a), row_normalize(b)), -1);
}

// ---------------------------------------------------------------------------
// Straight-through estimator
// ---------------------------------------------------------------------------

// Forward emits `hard`, backward passes the incoming gradient to `soft`
// unchanged. Equivalent to soft + stop_gradient(hard - soft).
inline Tensor straight_through(const Tensor& soft, const std::vector<double>& hard) {
  if (static_cast<int64_t>(hard.size()) != soft.size())
    op_error("straight_through", "hard/soft size mismatch");
  return make_op("straight_through", soft.shape(), hard, {soft}, [](TensorNode& self) {
    auto& A = *self.parents[0];
    if (!A.requires_grad) return;
    A.ensure_grad();
    for (size_t i = 0; i < self.value.size(); ++i) A.grad[i] += self.grad[i];
  });
}

// ---------------------------------------------------------------------------
// Backward
// ---------------------------------------------------------------------------

inline void backward(const Tensor& loss) {
  if (loss.size() != 1) op_error("backward", "loss must be scalar, got " + shape_str(loss.shape()));
  if (!loss.requires_grad()) return;
  // topological order over the requires_grad subgraph
  std::vector<TensorNode*> order;
  std::unordered_set<TensorNode*> seen;
  std::vector<std::pair<TensorNode*, size_t>> stack;
  stack.emplace_back(loss.node().get(), 0);
  seen.insert(loss.node().get());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->parents.size()) {
      TensorNode* p = node->parents[next++].get();
      if (p->requires_grad && !seen.count(p)) {
        seen.insert(p);
        stack.emplace_back(p, 0);
      }
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }
  loss.node()->ensure_grad();
  loss.node()->grad[0] += 1.0;
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    TensorNode* n = *it;
    if (n->backprop && n->grad.size() == n->value.size()) n->backprop(*n);
  }
}

inline bool grad_all_finite(const Tensor& t) {
  for (double g : t.grad())
    if (!std::isfinite(g)) return false;
  return true;
}

// ---------------------------------------------------------------------------
// Finite-difference oracle
// ---------------------------------------------------------------------------

// Central-difference check of backward() for scalar f of the given leaf
// tensors. samples_per_tensor <= 0 checks every coordinate. Returns the max
// relative error |analytic - numeric| / (|analytic| + 1e-8).
inline double finite_diff_check(const std::function<Tensor()>& f, std::vector<Tensor> params,
                                double eps = 1e-5, int samples_per_tensor = 0,
                                std::mt19937_64* coord_rng = nullptr) {
  for (auto& p : params) p.zero_grad();
  Tensor y = f();
  backward(y);
  std::vector<std::vector<double>> analytic;
  analytic.reserve(params.size());
  for (auto& p : params) analytic.push_back(p.grad());
  double max_rel = 0.0;
  for (size_t pi = 0; pi < params.size(); ++pi) {
    Tensor& p = params[pi];
    int64_t n = p.size();
    std::vector<int64_t> coords;
    if (samples_per_tensor <= 0 || samples_per_tensor >= n) {
      coords.resize(n);
      std::iota(coords.begin(), coords.end(), 0);
    } else {
      std::mt19937_64 fallback(12345 + pi);
      std::mt19937_64& rng = coord_rng ? *coord_rng : fallback;
      std::uniform_int_distribution<int64_t> pick(0, n - 1);
      for (int s = 0; s < samples_per_tensor; ++s) coords.push_back(pick(rng));
    }
    for (int64_t c : coords) {
      double orig = p.data_mut()[c];
      p.data_mut()[c] = orig + eps;
      double fp = f().item();
      p.data_mut()[c] = orig - eps;
      double fm = f().item();
      p.data_mut()[c] = orig;
      double numeric = (fp - fm) / (2 * eps);
      double rel = std::fabs(analytic[pi][c] - numeric) / (std::fabs(analytic[pi][c]) + kRelErrEps);
      max_rel = std::max(max_rel, rel);
    }
  }
  return max_rel;
}

}  // namespace ami
