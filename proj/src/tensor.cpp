#include "metaflow/tensor.hpp"

#include <Eigen/Core>

#include <algorithm>
#include <array>
#include <atomic>
#include <cmath>
#include <cstring>
#include <sstream>
#include <unordered_map>
#include <unordered_set>

namespace metaflow {

namespace detail {

struct TensorImpl {
  Shape shape;
  std::vector<double> data;
  bool requires_grad = false;
  std::shared_ptr<OpNode> node;
};

using BackwardFn = std::vector<Tensor> (*)(OpNode&, const Tensor& out,
                                           const Tensor& gout);

namespace {
std::atomic<std::size_t> g_live_nodes{0};
thread_local bool g_grad_enabled = true;
}  // namespace

struct OpNode {
  const char* op = "";
  std::vector<Tensor> inputs;
  std::vector<Tensor> saved;
  IndexArray idx_a, idx_b;
  std::shared_ptr<const std::vector<double>> cvec;
  std::array<std::size_t, 4> meta{};
  BackwardFn backward = nullptr;

  OpNode() { g_live_nodes.fetch_add(1, std::memory_order_relaxed); }
  ~OpNode();

  static std::shared_ptr<TensorImpl>& impl_of(Tensor& t) { return t.impl_; }
};

// Graphs can be thousands of ops deep (unrolled inner loops), so teardown
// is iterative: absorb children whose last reference is about to drop.
OpNode::~OpNode() {
  g_live_nodes.fetch_sub(1, std::memory_order_relaxed);
  std::vector<Tensor> stack;
  stack.reserve(inputs.size() + saved.size());
  for (auto& t : inputs) stack.push_back(std::move(t));
  for (auto& t : saved) stack.push_back(std::move(t));
  inputs.clear();
  saved.clear();
  while (!stack.empty()) {
    Tensor t = std::move(stack.back());
    stack.pop_back();
    auto& impl = impl_of(t);
    if (impl && impl.use_count() == 1 && impl->node && impl->node.use_count() == 1) {
      auto node = impl->node;
      for (auto& u : node->inputs) stack.push_back(std::move(u));
      for (auto& u : node->saved) stack.push_back(std::move(u));
      node->inputs.clear();
      node->saved.clear();
    }
  }
}

}  // namespace detail

using detail::OpNode;
using detail::TensorImpl;

struct TensorAccess {
  static Tensor wrap(std::shared_ptr<TensorImpl> impl) { return Tensor(std::move(impl)); }

  static Tensor make(Shape shape, std::vector<double> data, bool requires_grad,
                     std::shared_ptr<OpNode> node) {
    auto impl = std::make_shared<TensorImpl>();
    impl->shape = std::move(shape);
    impl->data = std::move(data);
    impl->requires_grad = requires_grad;
    impl->node = std::move(node);
    return Tensor(std::move(impl));
  }

  static const std::shared_ptr<TensorImpl>& impl(const Tensor& t) { return t.impl_; }
};

namespace {

std::size_t shape_numel(const Shape& s) {
  std::size_t n = 1;
  for (auto e : s) n *= e;
  return n;
}

std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
  os << ']';
  return os.str();
}

[[noreturn]] void fail(const std::string& msg) { throw TensorError(msg); }

void require(bool cond, const std::string& msg) {
  if (!cond) fail(msg);
}

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapMat = Eigen::Map<RowMat>;
using CMapMat = Eigen::Map<const RowMat>;

bool wants_node(std::initializer_list<const Tensor*> ins) {
  if (!detail::g_grad_enabled) return false;
  for (const auto* t : ins)
    if (t->defined() && t->requires_grad()) return true;
  return false;
}

Tensor make_op(const char* op, Shape shape, std::vector<double> data,
               std::vector<Tensor> inputs, detail::BackwardFn backward,
               IndexArray idx_a = nullptr, IndexArray idx_b = nullptr,
               std::shared_ptr<const std::vector<double>> cvec = nullptr,
               std::array<std::size_t, 4> meta = {}) {
  std::shared_ptr<OpNode> node;
  bool rg = false;
  if (detail::g_grad_enabled) {
    for (const auto& t : inputs)
      if (t.defined() && t.requires_grad()) {
        rg = true;
        break;
      }
  }
  if (rg) {
    node = std::make_shared<OpNode>();
    node->op = op;
    node->inputs = std::move(inputs);
    node->backward = backward;
    node->idx_a = std::move(idx_a);
    node->idx_b = std::move(idx_b);
    node->cvec = std::move(cvec);
    node->meta = meta;
  }
  return TensorAccess::make(std::move(shape), std::move(data), rg, std::move(node));
}

Tensor const_like(const Shape& shape, double v) { return Tensor::full(shape, v); }

Tensor const_from(const Shape& shape, std::vector<double> data) {
  return Tensor::from_data(shape, std::move(data));
}

/// Sums a gradient back down to the shape of a broadcast operand.
Tensor bcast_back(const Tensor& g, const Shape& target) {
  if (g.shape() == target) return g;
  const std::size_t tn = shape_numel(target);
  if (tn == g.numel()) return reshape(g, target);
  require(tn == 1, "internal: bad broadcast reduction");
  return reshape(sum(g), target);
}

}  // namespace

// ---- Tensor basics ---------------------------------------------------------

Tensor Tensor::scalar(double v, bool requires_grad) {
  return from_data(Shape{}, {v}, requires_grad);
}

Tensor Tensor::zeros(Shape shape, bool requires_grad) {
  return full(std::move(shape), 0.0, requires_grad);
}

Tensor Tensor::ones(Shape shape, bool requires_grad) {
  return full(std::move(shape), 1.0, requires_grad);
}

Tensor Tensor::full(Shape shape, double v, bool requires_grad) {
  std::vector<double> d(shape_numel(shape), v);
  return from_data(std::move(shape), std::move(d), requires_grad);
}

Tensor Tensor::from_data(Shape shape, std::vector<double> data, bool requires_grad) {
  if (data.size() != shape_numel(shape))
    fail("from_data: " + std::to_string(data.size()) + " values for shape " +
         shape_str(shape));
  return TensorAccess::make(std::move(shape), std::move(data), requires_grad, nullptr);
}

const Shape& Tensor::shape() const {
  require(defined(), "undefined tensor");
  return impl_->shape;
}

std::size_t Tensor::numel() const { return impl_ ? impl_->data.size() : 0; }

std::size_t Tensor::rank() const { return shape().size(); }

std::size_t Tensor::rows() const {
  require(rank() == 2, "rows(): tensor is not 2-D");
  return impl_->shape[0];
}

std::size_t Tensor::cols() const {
  require(rank() == 2, "cols(): tensor is not 2-D");
  return impl_->shape[1];
}

const std::vector<double>& Tensor::data() const {
  require(defined(), "undefined tensor");
  return impl_->data;
}

std::vector<double>& Tensor::leaf_data() {
  require(defined(), "undefined tensor");
  require(impl_->node == nullptr, "leaf_data(): tensor was produced by a recorded op");
  return impl_->data;
}

bool Tensor::requires_grad() const { return impl_ && impl_->requires_grad; }

void Tensor::set_requires_grad(bool v) {
  require(defined(), "undefined tensor");
  require(impl_->node == nullptr || !v, "set_requires_grad on non-leaf");
  impl_->requires_grad = v;
}

double Tensor::item() const {
  require(numel() == 1, "item(): tensor has " + std::to_string(numel()) + " elements");
  return impl_->data[0];
}

Tensor Tensor::detach_copy() const {
  require(defined(), "undefined tensor");
  return from_data(impl_->shape, impl_->data, false);
}

NoGradGuard::NoGradGuard() : prev_(detail::g_grad_enabled) {
  detail::g_grad_enabled = false;
}

NoGradGuard::~NoGradGuard() { detail::g_grad_enabled = prev_; }

bool grad_enabled() { return detail::g_grad_enabled; }

std::size_t live_op_nodes() { return detail::g_live_nodes.load(); }

// ---- elementwise -----------------------------------------------------------

namespace {

std::vector<Tensor> backward_add(OpNode& n, const Tensor&, const Tensor& g) {
  return {bcast_back(g, n.inputs[0].shape()), bcast_back(g, n.inputs[1].shape())};
}

std::vector<Tensor> backward_sub(OpNode& n, const Tensor&, const Tensor& g) {
  return {bcast_back(g, n.inputs[0].shape()), bcast_back(neg(g), n.inputs[1].shape())};
}

std::vector<Tensor> backward_mul(OpNode& n, const Tensor&, const Tensor& g) {
  return {bcast_back(mul(g, n.inputs[1]), n.inputs[0].shape()),
          bcast_back(mul(g, n.inputs[0]), n.inputs[1].shape())};
}

std::vector<Tensor> backward_div(OpNode& n, const Tensor& out, const Tensor& g) {
  // d(a/b)/da = 1/b, d(a/b)/db = -out/b
  Tensor ga = bcast_back(div(g, n.inputs[1]), n.inputs[0].shape());
  Tensor gb = bcast_back(neg(mul(g, div(out, n.inputs[1]))), n.inputs[1].shape());
  return {std::move(ga), std::move(gb)};
}

std::vector<Tensor> backward_neg(OpNode&, const Tensor&, const Tensor& g) {
  return {neg(g)};
}

std::vector<Tensor> backward_exp(OpNode&, const Tensor& out, const Tensor& g) {
  return {mul(g, out)};
}

std::vector<Tensor> backward_square(OpNode& n, const Tensor&, const Tensor& g) {
  return {mul(g, mul(n.inputs[0], 2.0))};
}

// elu'(x) = 1 for x > 0 (and at 0), e^x = out + 1 for x < 0.
std::vector<Tensor> backward_elu(OpNode& n, const Tensor& out, const Tensor& g) {
  const auto& x = n.inputs[0].data();
  std::vector<double> pos(x.size()), negm(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) {
    pos[i] = x[i] > 0.0 ? 1.0 : 0.0;
    negm[i] = 1.0 - pos[i];
  }
  const Shape& s = n.inputs[0].shape();
  Tensor deriv = add(const_from(s, std::move(pos)),
                     mul(const_from(s, std::move(negm)), add(out, 1.0)));
  return {mul(g, deriv)};
}

enum class BinKind { Add, Sub, Mul, Div };

Tensor binary_elt(const char* name, BinKind kind, const Tensor& a, const Tensor& b,
                  detail::BackwardFn backward) {
  require(a.defined() && b.defined(), std::string(name) + ": undefined operand");
  const bool a_scalar = a.numel() == 1;
  const bool b_scalar = b.numel() == 1;
  Shape out_shape;
  if (a.shape() == b.shape())
    out_shape = a.shape();
  else if (a_scalar)
    out_shape = b.shape();
  else if (b_scalar)
    out_shape = a.shape();
  else
    fail(std::string(name) + ": incompatible shapes " + shape_str(a.shape()) + " and " +
         shape_str(b.shape()));

  const auto& ad = a.data();
  const auto& bd = b.data();
  const std::size_t n = shape_numel(out_shape);
  std::vector<double> out(n);
  const bool asc = a_scalar && n != 1;
  const bool bsc = b_scalar && n != 1;
  const double av = ad[0], bv = bd[0];
  switch (kind) {
    case BinKind::Add:
      for (std::size_t i = 0; i < n; ++i) out[i] = (asc ? av : ad[i]) + (bsc ? bv : bd[i]);
      break;
    case BinKind::Sub:
      for (std::size_t i = 0; i < n; ++i) out[i] = (asc ? av : ad[i]) - (bsc ? bv : bd[i]);
      break;
    case BinKind::Mul:
      for (std::size_t i = 0; i < n; ++i) out[i] = (asc ? av : ad[i]) * (bsc ? bv : bd[i]);
      break;
    case BinKind::Div:
      for (std::size_t i = 0; i < n; ++i) out[i] = (asc ? av : ad[i]) / (bsc ? bv : bd[i]);
      break;
  }
  return make_op(name, std::move(out_shape), std::move(out), {a, b}, backward);
}

template <double F(double)>
Tensor unary_elt(const char* name, const Tensor& a, detail::BackwardFn backward) {
  require(a.defined(), std::string(name) + ": undefined operand");
  std::vector<double> out(a.numel());
  const auto& ad = a.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = F(ad[i]);
  return make_op(name, a.shape(), std::move(out), {a}, backward);
}

double fn_neg(double x) { return -x; }
double fn_exp(double x) { return std::exp(x); }
double fn_square(double x) { return x * x; }
double fn_elu(double x) { return x > 0.0 ? x : std::expm1(x); }

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) {
  return binary_elt("add", BinKind::Add, a, b, backward_add);
}
Tensor sub(const Tensor& a, const Tensor& b) {
  return binary_elt("sub", BinKind::Sub, a, b, backward_sub);
}
Tensor mul(const Tensor& a, const Tensor& b) {
  return binary_elt("mul", BinKind::Mul, a, b, backward_mul);
}
Tensor div(const Tensor& a, const Tensor& b) {
  return binary_elt("div", BinKind::Div, a, b, backward_div);
}
Tensor add(const Tensor& a, double b) { return add(a, Tensor::scalar(b)); }
Tensor mul(const Tensor& a, double b) { return mul(a, Tensor::scalar(b)); }

Tensor neg(const Tensor& a) { return unary_elt<fn_neg>("neg", a, backward_neg); }
Tensor exp(const Tensor& a) { return unary_elt<fn_exp>("exp", a, backward_exp); }
Tensor square(const Tensor& a) {
  return unary_elt<fn_square>("square", a, backward_square);
}
Tensor elu(const Tensor& a) { return unary_elt<fn_elu>("elu", a, backward_elu); }

Tensor apply_elementwise(EltOp op, const Tensor& a, const std::optional<Tensor>& b) {
  const bool binary = op == EltOp::Add || op == EltOp::Sub || op == EltOp::Mul ||
                      op == EltOp::Div;
  if (binary) {
    require(b.has_value(), "apply_elementwise: binary op needs two operands");
    switch (op) {
      case EltOp::Add: return add(a, *b);
      case EltOp::Sub: return sub(a, *b);
      case EltOp::Mul: return mul(a, *b);
      case EltOp::Div: return div(a, *b);
      default: break;
    }
  }
  require(!b.has_value(), "apply_elementwise: unary op takes one operand");
  switch (op) {
    case EltOp::Exp: return exp(a);
    case EltOp::Neg: return neg(a);
    case EltOp::Square: return square(a);
    default: break;
  }
  fail("apply_elementwise: unknown op");
}

// ---- linear algebra --------------------------------------------------------

namespace {

std::vector<Tensor> backward_matmul(OpNode& n, const Tensor&, const Tensor& g) {
  return {matmul(g, transpose(n.inputs[1])), matmul(transpose(n.inputs[0]), g)};
}

std::vector<Tensor> backward_transpose(OpNode&, const Tensor&, const Tensor& g) {
  return {transpose(g)};
}

std::vector<Tensor> backward_reshape(OpNode& n, const Tensor&, const Tensor& g) {
  return {reshape(g, n.inputs[0].shape())};
}

}  // namespace

Tensor matmul(const Tensor& a, const Tensor& b) {
  require(a.defined() && b.defined(), "matmul: undefined operand");
  require(a.rank() == 2 && b.rank() == 2, "matmul: operands must be 2-D");
  const std::size_t m = a.rows(), k = a.cols(), k2 = b.rows(), n = b.cols();
  if (k != k2)
    fail("matmul: inner extents differ, " + shape_str(a.shape()) + " x " +
         shape_str(b.shape()));
  std::vector<double> out(m * n);
  CMapMat A(a.data().data(), static_cast<Eigen::Index>(m), static_cast<Eigen::Index>(k));
  CMapMat B(b.data().data(), static_cast<Eigen::Index>(k), static_cast<Eigen::Index>(n));
  MapMat C(out.data(), static_cast<Eigen::Index>(m), static_cast<Eigen::Index>(n));
  C.noalias() = A * B;
  return make_op("matmul", Shape{m, n}, std::move(out), {a, b}, backward_matmul);
}

Tensor transpose(const Tensor& a) {
  require(a.defined() && a.rank() == 2, "transpose: tensor must be 2-D");
  const std::size_t m = a.rows(), n = a.cols();
  std::vector<double> out(m * n);
  const auto& ad = a.data();
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) out[j * m + i] = ad[i * n + j];
  return make_op("transpose", Shape{n, m}, std::move(out), {a}, backward_transpose);
}

Tensor reshape(const Tensor& a, Shape shape) {
  require(a.defined(), "reshape: undefined tensor");
  require(shape_numel(shape) == a.numel(),
          "reshape: element count mismatch for " + shape_str(shape));
  return make_op("reshape", std::move(shape), a.data(), {a}, backward_reshape);
}

// ---- reductions ------------------------------------------------------------

namespace {

constexpr std::size_t kAxisNone = static_cast<std::size_t>(-1);

std::vector<Tensor> backward_reduce(OpNode& n, const Tensor&, const Tensor& g) {
  const Tensor& x = n.inputs[0];
  const bool is_mean = n.meta[0] != 0;
  const std::size_t axis = n.meta[1];
  if (axis == kAxisNone) {
    const double w = is_mean ? 1.0 / static_cast<double>(x.numel()) : 1.0;
    return {mul(const_like(x.shape(), w), g)};
  }
  const std::size_t m = x.shape()[0];
  const std::size_t ncols = x.shape()[1];
  if (axis == 0) {
    const double w = is_mean ? 1.0 / static_cast<double>(m) : 1.0;
    return {matmul(const_like(Shape{m, 1}, w), reshape(g, Shape{1, ncols}))};
  }
  const double w = is_mean ? 1.0 / static_cast<double>(ncols) : 1.0;
  return {matmul(reshape(g, Shape{m, 1}), const_like(Shape{1, ncols}, w))};
}

}  // namespace

Tensor reduce(ReduceOp op, const Tensor& x, std::optional<int> axis) {
  require(x.defined(), "reduce: undefined tensor");
  const bool is_mean = op == ReduceOp::Mean;
  if (!axis.has_value()) {
    double acc = 0.0;
    for (double v : x.data()) acc += v;
    if (is_mean) acc /= static_cast<double>(x.numel());
    return make_op(is_mean ? "mean" : "sum", Shape{}, {acc}, {x}, backward_reduce,
                   nullptr, nullptr, nullptr, {is_mean ? 1u : 0u, kAxisNone, 0, 0});
  }
  const int ax = *axis;
  if (x.rank() == 1) {
    require(ax == 0, "reduce: invalid axis " + std::to_string(ax) + " for 1-D tensor");
    Tensor all = reduce(op, x, std::nullopt);
    return reshape(all, Shape{1});
  }
  require(x.rank() == 2 && (ax == 0 || ax == 1),
          "reduce: invalid axis " + std::to_string(ax));
  const std::size_t m = x.shape()[0], ncols = x.shape()[1];
  const auto& xd = x.data();
  if (ax == 0) {
    std::vector<double> out(ncols, 0.0);
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < ncols; ++j) out[j] += xd[i * ncols + j];
    if (is_mean)
      for (auto& v : out) v /= static_cast<double>(m);
    return make_op(is_mean ? "mean" : "sum", Shape{ncols}, std::move(out), {x},
                   backward_reduce, nullptr, nullptr, nullptr,
                   {is_mean ? 1u : 0u, 0, 0, 0});
  }
  std::vector<double> out(m, 0.0);
  for (std::size_t i = 0; i < m; ++i) {
    double acc = 0.0;
    for (std::size_t j = 0; j < ncols; ++j) acc += xd[i * ncols + j];
    out[i] = is_mean ? acc / static_cast<double>(ncols) : acc;
  }
  return make_op(is_mean ? "mean" : "sum", Shape{m}, std::move(out), {x},
                 backward_reduce, nullptr, nullptr, nullptr,
                 {is_mean ? 1u : 0u, 1, 0, 0});
}

Tensor sum(const Tensor& x) { return reduce(ReduceOp::Sum, x); }
Tensor mean(const Tensor& x) { return reduce(ReduceOp::Mean, x); }

// ---- row/column structure --------------------------------------------------

namespace {

std::vector<Tensor> backward_concat_cols(OpNode& n, const Tensor&, const Tensor& g) {
  const std::size_t p = n.inputs[0].cols();
  const std::size_t q = n.inputs[1].cols();
  return {slice_cols(g, 0, p), slice_cols(g, p, p + q)};
}

std::vector<Tensor> backward_slice_cols(OpNode& n, const Tensor&, const Tensor& g) {
  const std::size_t m = n.inputs[0].rows();
  const std::size_t total = n.inputs[0].cols();
  const std::size_t b = n.meta[0], e = n.meta[1];
  Tensor padded = g;
  if (b > 0) padded = concat_cols(Tensor::zeros(Shape{m, b}), padded);
  if (e < total) padded = concat_cols(padded, Tensor::zeros(Shape{m, total - e}));
  return {std::move(padded)};
}

std::vector<Tensor> backward_add_rowvec(OpNode&, const Tensor&, const Tensor& g) {
  return {g, reduce(ReduceOp::Sum, g, 0)};
}

std::vector<Tensor> backward_mul_rowvec(OpNode& n, const Tensor&, const Tensor& g) {
  return {mul_rowvec(g, n.inputs[1]), reduce(ReduceOp::Sum, mul(g, n.inputs[0]), 0)};
}

std::vector<Tensor> backward_scale_rows(OpNode& n, const Tensor&, const Tensor& g) {
  return {scale_rows(g, n.cvec)};
}

}  // namespace

Tensor concat_cols(const Tensor& a, const Tensor& b) {
  require(a.defined() && b.defined() && a.rank() == 2 && b.rank() == 2,
          "concat_cols: operands must be 2-D");
  require(a.rows() == b.rows(), "concat_cols: row counts differ");
  const std::size_t m = a.rows(), p = a.cols(), q = b.cols();
  std::vector<double> out(m * (p + q));
  const auto& ad = a.data();
  const auto& bd = b.data();
  for (std::size_t i = 0; i < m; ++i) {
    std::memcpy(&out[i * (p + q)], &ad[i * p], p * sizeof(double));
    std::memcpy(&out[i * (p + q) + p], &bd[i * q], q * sizeof(double));
  }
  return make_op("concat_cols", Shape{m, p + q}, std::move(out), {a, b},
                 backward_concat_cols);
}

Tensor slice_cols(const Tensor& x, std::size_t begin, std::size_t end) {
  require(x.defined() && x.rank() == 2, "slice_cols: tensor must be 2-D");
  require(begin < end && end <= x.cols(), "slice_cols: bad range");
  const std::size_t m = x.rows(), n = x.cols(), w = end - begin;
  std::vector<double> out(m * w);
  const auto& xd = x.data();
  for (std::size_t i = 0; i < m; ++i)
    std::memcpy(&out[i * w], &xd[i * n + begin], w * sizeof(double));
  return make_op("slice_cols", Shape{m, w}, std::move(out), {x}, backward_slice_cols,
                 nullptr, nullptr, nullptr, {begin, end, 0, 0});
}

Tensor add_rowvec(const Tensor& x, const Tensor& v) {
  require(x.defined() && x.rank() == 2, "add_rowvec: x must be 2-D");
  require(v.defined() && v.numel() == x.cols(), "add_rowvec: vector length mismatch");
  const std::size_t m = x.rows(), n = x.cols();
  std::vector<double> out(m * n);
  const auto& xd = x.data();
  const auto& vd = v.data();
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) out[i * n + j] = xd[i * n + j] + vd[j];
  return make_op("add_rowvec", x.shape(), std::move(out), {x, v}, backward_add_rowvec);
}

Tensor mul_rowvec(const Tensor& x, const Tensor& v) {
  require(x.defined() && x.rank() == 2, "mul_rowvec: x must be 2-D");
  require(v.defined() && v.numel() == x.cols(), "mul_rowvec: vector length mismatch");
  const std::size_t m = x.rows(), n = x.cols();
  std::vector<double> out(m * n);
  const auto& xd = x.data();
  const auto& vd = v.data();
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) out[i * n + j] = xd[i * n + j] * vd[j];
  return make_op("mul_rowvec", x.shape(), std::move(out), {x, v}, backward_mul_rowvec);
}

Tensor scale_rows(const Tensor& x, std::shared_ptr<const std::vector<double>> s) {
  require(x.defined() && x.rank() == 2, "scale_rows: x must be 2-D");
  require(s && !s->empty() && x.rows() % s->size() == 0,
          "scale_rows: scale length must divide row count");
  const std::size_t m = x.rows(), n = x.cols(), ns = s->size();
  std::vector<double> out(m * n);
  const auto& xd = x.data();
  for (std::size_t i = 0; i < m; ++i) {
    const double si = (*s)[i % ns];
    for (std::size_t j = 0; j < n; ++j) out[i * n + j] = xd[i * n + j] * si;
  }
  return make_op("scale_rows", x.shape(), std::move(out), {x}, backward_scale_rows,
                 nullptr, nullptr, std::move(s));
}

// ---- graph kernels ---------------------------------------------------------

namespace {

std::vector<Tensor> backward_gather(OpNode& n, const Tensor&, const Tensor& g) {
  return {scatter_add_rows(g, n.idx_a, n.meta[0], n.meta[1])};
}

std::vector<Tensor> backward_scatter(OpNode& n, const Tensor&, const Tensor& g) {
  return {gather_rows(g, n.idx_a, n.meta[0], n.meta[1])};
}

std::vector<Tensor> backward_monet_agg(OpNode& n, const Tensor&, const Tensor& g) {
  return {monet_agg_t(g, n.inputs[1], n.idx_a, n.idx_b, n.meta[0], n.meta[1]),
          monet_edge_dot(g, n.inputs[0], n.idx_a, n.idx_b, n.meta[0], n.meta[1])};
}

std::vector<Tensor> backward_monet_agg_t(OpNode& n, const Tensor&, const Tensor& g) {
  return {monet_agg(g, n.inputs[1], n.idx_a, n.idx_b, n.meta[0], n.meta[1]),
          monet_edge_dot(n.inputs[0], g, n.idx_a, n.idx_b, n.meta[0], n.meta[1])};
}

std::vector<Tensor> backward_monet_edge_dot(OpNode& n, const Tensor&, const Tensor& g) {
  return {monet_agg(n.inputs[1], g, n.idx_a, n.idx_b, n.meta[0], n.meta[1]),
          monet_agg_t(n.inputs[0], g, n.idx_a, n.idx_b, n.meta[0], n.meta[1])};
}

void check_edges(const IndexArray& src, const IndexArray& dst, std::size_t n_nodes) {
  require(src && dst && src->size() == dst->size(), "edge index arrays mismatch");
  for (std::size_t e = 0; e < src->size(); ++e)
    require((*src)[e] < n_nodes && (*dst)[e] < n_nodes, "edge index out of range");
}

}  // namespace

Tensor gather_rows(const Tensor& x, IndexArray idx, std::size_t blocks,
                   std::size_t src_rows) {
  require(x.defined() && x.rank() == 2, "gather_rows: x must be 2-D");
  require(idx != nullptr, "gather_rows: null index array");
  require(x.rows() == blocks * src_rows, "gather_rows: row count != blocks*src_rows");
  const std::size_t nd = idx->size(), f = x.cols();
  std::vector<double> out(blocks * nd * f);
  const auto& xd = x.data();
  for (std::size_t b = 0; b < blocks; ++b) {
    const std::size_t sbase = b * src_rows, dbase = b * nd;
    for (std::size_t i = 0; i < nd; ++i) {
      const std::size_t s = (*idx)[i];
      require(s < src_rows, "gather_rows: index out of range");
      std::memcpy(&out[(dbase + i) * f], &xd[(sbase + s) * f], f * sizeof(double));
    }
  }
  return make_op("gather_rows", Shape{blocks * nd, f}, std::move(out), {x},
                 backward_gather, std::move(idx), nullptr, nullptr,
                 {blocks, src_rows, 0, 0});
}

Tensor scatter_add_rows(const Tensor& x, IndexArray idx, std::size_t blocks,
                        std::size_t dst_rows) {
  require(x.defined() && x.rank() == 2, "scatter_add_rows: x must be 2-D");
  require(idx != nullptr, "scatter_add_rows: null index array");
  const std::size_t nd = idx->size(), f = x.cols();
  require(x.rows() == blocks * nd, "scatter_add_rows: row count != blocks*|idx|");
  std::vector<double> out(blocks * dst_rows * f, 0.0);
  const auto& xd = x.data();
  for (std::size_t b = 0; b < blocks; ++b) {
    const std::size_t sbase = b * nd, dbase = b * dst_rows;
    for (std::size_t i = 0; i < nd; ++i) {
      const std::size_t d = (*idx)[i];
      require(d < dst_rows, "scatter_add_rows: index out of range");
      const double* src_row = &xd[(sbase + i) * f];
      double* dst_row = &out[(dbase + d) * f];
      for (std::size_t j = 0; j < f; ++j) dst_row[j] += src_row[j];
    }
  }
  return make_op("scatter_add_rows", Shape{blocks * dst_rows, f}, std::move(out), {x},
                 backward_scatter, std::move(idx), nullptr, nullptr,
                 {blocks, dst_rows, 0, 0});
}

Tensor monet_agg(const Tensor& feats, const Tensor& w, IndexArray src, IndexArray dst,
                 std::size_t blocks, std::size_t n_nodes) {
  require(feats.defined() && feats.rank() == 2 && w.defined() && w.rank() == 2,
          "monet_agg: operands must be 2-D");
  require(feats.rows() == blocks * n_nodes, "monet_agg: feats rows != blocks*n_nodes");
  check_edges(src, dst, n_nodes);
  const std::size_t e_count = src->size(), k = w.cols(), f = feats.cols();
  require(w.rows() == e_count, "monet_agg: weight rows != edge count");
  std::vector<double> out(blocks * n_nodes * k * f, 0.0);
  const auto& fd = feats.data();
  const auto& wd = w.data();
  const auto& s = *src;
  const auto& d = *dst;
  for (std::size_t b = 0; b < blocks; ++b) {
    const std::size_t base = b * n_nodes;
    for (std::size_t e = 0; e < e_count; ++e) {
      const double* xrow = &fd[(base + s[e]) * f];
      double* orow = &out[(base + d[e]) * k * f];
      const double* we = &wd[e * k];
      for (std::size_t kk = 0; kk < k; ++kk) {
        const double wk = we[kk];
        double* o = orow + kk * f;
        for (std::size_t j = 0; j < f; ++j) o[j] += wk * xrow[j];
      }
    }
  }
  return make_op("monet_agg", Shape{blocks * n_nodes, k * f}, std::move(out),
                 {feats, w}, backward_monet_agg, std::move(src), std::move(dst),
                 nullptr, {blocks, n_nodes, 0, 0});
}

Tensor monet_agg_t(const Tensor& g, const Tensor& w, IndexArray src, IndexArray dst,
                   std::size_t blocks, std::size_t n_nodes) {
  require(g.defined() && g.rank() == 2 && w.defined() && w.rank() == 2,
          "monet_agg_t: operands must be 2-D");
  require(g.rows() == blocks * n_nodes, "monet_agg_t: rows != blocks*n_nodes");
  check_edges(src, dst, n_nodes);
  const std::size_t e_count = src->size(), k = w.cols();
  require(w.rows() == e_count, "monet_agg_t: weight rows != edge count");
  require(g.cols() % k == 0, "monet_agg_t: feature width not divisible by K");
  const std::size_t f = g.cols() / k;
  std::vector<double> out(blocks * n_nodes * f, 0.0);
  const auto& gd = g.data();
  const auto& wd = w.data();
  const auto& s = *src;
  const auto& d = *dst;
  for (std::size_t b = 0; b < blocks; ++b) {
    const std::size_t base = b * n_nodes;
    for (std::size_t e = 0; e < e_count; ++e) {
      const double* grow = &gd[(base + d[e]) * k * f];
      double* orow = &out[(base + s[e]) * f];
      const double* we = &wd[e * k];
      for (std::size_t kk = 0; kk < k; ++kk) {
        const double wk = we[kk];
        const double* gk = grow + kk * f;
        for (std::size_t j = 0; j < f; ++j) orow[j] += wk * gk[j];
      }
    }
  }
  return make_op("monet_agg_t", Shape{blocks * n_nodes, f}, std::move(out), {g, w},
                 backward_monet_agg_t, std::move(src), std::move(dst), nullptr,
                 {blocks, n_nodes, 0, 0});
}

Tensor monet_edge_dot(const Tensor& a, const Tensor& x, IndexArray src, IndexArray dst,
                      std::size_t blocks, std::size_t n_nodes) {
  require(a.defined() && a.rank() == 2 && x.defined() && x.rank() == 2,
          "monet_edge_dot: operands must be 2-D");
  require(a.rows() == blocks * n_nodes && x.rows() == blocks * n_nodes,
          "monet_edge_dot: rows != blocks*n_nodes");
  check_edges(src, dst, n_nodes);
  const std::size_t e_count = src->size(), f = x.cols();
  require(a.cols() % f == 0, "monet_edge_dot: widths incompatible");
  const std::size_t k = a.cols() / f;
  std::vector<double> out(e_count * k, 0.0);
  const auto& ad = a.data();
  const auto& xd = x.data();
  const auto& s = *src;
  const auto& d = *dst;
  for (std::size_t b = 0; b < blocks; ++b) {
    const std::size_t base = b * n_nodes;
    for (std::size_t e = 0; e < e_count; ++e) {
      const double* arow = &ad[(base + d[e]) * k * f];
      const double* xrow = &xd[(base + s[e]) * f];
      double* orow = &out[e * k];
      for (std::size_t kk = 0; kk < k; ++kk) {
        const double* akk = arow + kk * f;
        double acc = 0.0;
        for (std::size_t j = 0; j < f; ++j) acc += akk[j] * xrow[j];
        orow[kk] += acc;
      }
    }
  }
  return make_op("monet_edge_dot", Shape{e_count, k}, std::move(out), {a, x},
                 backward_monet_edge_dot, std::move(src), std::move(dst), nullptr,
                 {blocks, n_nodes, 0, 0});
}

namespace {

// d w / d mu_kd   = w * (e_d - mu_kd) / v_kd
// d w / d ls_kd   = w * (e_d - mu_kd)^2 / (2 v_kd),  v = exp(ls)
std::vector<Tensor> backward_gauss(OpNode& n, const Tensor& out, const Tensor& g) {
  const Tensor& eattr = n.inputs[0];
  const Tensor& mu = n.inputs[1];
  const Tensor& ls = n.inputs[2];
  const std::size_t e_count = eattr.rows(), dims = eattr.cols(), k = mu.rows();

  Tensor h = mul(g, out);                                      // [E,K]
  Tensor colsum = reshape(reduce(ReduceOp::Sum, h, 0), Shape{k, 1});
  Tensor ones_row = Tensor::ones(Shape{1, dims});
  Tensor colsum_b = matmul(colsum, ones_row);                  // [K,D]
  Tensor ht = transpose(h);                                    // [K,E]
  Tensor m1 = matmul(ht, eattr);                               // [K,D] sums of h*e
  std::vector<double> e2(e_count * dims);
  const auto& ed = eattr.data();
  for (std::size_t i = 0; i < e2.size(); ++i) e2[i] = ed[i] * ed[i];
  Tensor m2 = matmul(ht, const_from(Shape{e_count, dims}, std::move(e2)));
  Tensor inv_v = exp(neg(ls));
  Tensor gmu = mul(sub(m1, mul(mu, colsum_b)), inv_v);
  Tensor quad = add(sub(m2, mul(mul(mu, m1), 2.0)), mul(square(mu), colsum_b));
  Tensor gls = mul(mul(quad, inv_v), 0.5);
  return {Tensor{}, std::move(gmu), std::move(gls)};
}

}  // namespace

Tensor gauss_weights(const Tensor& eattr, const Tensor& mu, const Tensor& ls) {
  require(eattr.defined() && eattr.rank() == 2, "gauss_weights: eattr must be 2-D");
  require(!eattr.requires_grad(), "gauss_weights: edge attributes must be constant");
  require(mu.defined() && ls.defined() && mu.rank() == 2 && ls.rank() == 2,
          "gauss_weights: mu/ls must be 2-D");
  require(mu.shape() == ls.shape() && mu.cols() == eattr.cols(),
          "gauss_weights: parameter shapes mismatch");
  const std::size_t e_count = eattr.rows(), dims = eattr.cols(), k = mu.rows();
  std::vector<double> inv_v(k * dims);
  const auto& lsd = ls.data();
  for (std::size_t i = 0; i < inv_v.size(); ++i) inv_v[i] = std::exp(-lsd[i]);
  std::vector<double> out(e_count * k);
  const auto& ed = eattr.data();
  const auto& mud = mu.data();
  for (std::size_t e = 0; e < e_count; ++e) {
    const double* erow = &ed[e * dims];
    for (std::size_t kk = 0; kk < k; ++kk) {
      double s = 0.0;
      for (std::size_t d2 = 0; d2 < dims; ++d2) {
        const double diff = erow[d2] - mud[kk * dims + d2];
        s += diff * diff * inv_v[kk * dims + d2];
      }
      out[e * k + kk] = std::exp(-0.5 * s);
    }
  }
  return make_op("gauss_weights", Shape{e_count, k}, std::move(out), {eattr, mu, ls},
                 backward_gauss);
}

// ---- differentiation -------------------------------------------------------

std::vector<Tensor> grad(const Tensor& output, const std::vector<Tensor>& inputs,
                         bool create_record) {
  require(output.defined(), "grad: undefined output");
  require(output.numel() == 1, "grad: output must be a scalar, got shape " +
                                   shape_str(output.shape()));
  for (const auto& in : inputs) {
    require(in.defined(), "grad: undefined input");
    require(in.requires_grad(), "grad: input does not require gradients");
  }

  // Iterative DFS: topological order of grad-requiring impls reachable
  // from the output.
  std::vector<std::shared_ptr<TensorImpl>> topo;
  std::unordered_set<const TensorImpl*> visited;
  {
    std::vector<std::pair<std::shared_ptr<TensorImpl>, std::size_t>> stack;
    const auto& out_impl = TensorAccess::impl(output);
    if (out_impl->requires_grad) stack.emplace_back(out_impl, 0);
    visited.insert(out_impl.get());
    while (!stack.empty()) {
      std::shared_ptr<TensorImpl> impl = stack.back().first;
      std::size_t child = stack.back().second;
      const auto& node = impl->node;
      const std::size_t n_children = node ? node->inputs.size() : 0;
      std::shared_ptr<TensorImpl> next;
      while (child < n_children) {
        const auto& in_impl = TensorAccess::impl(node->inputs[child]);
        ++child;
        if (in_impl && in_impl->requires_grad && !visited.count(in_impl.get())) {
          visited.insert(in_impl.get());
          next = in_impl;
          break;
        }
      }
      stack.back().second = child;
      if (next) {
        stack.emplace_back(std::move(next), 0);
      } else {
        topo.push_back(std::move(impl));
        stack.pop_back();
      }
    }
  }

  std::unordered_set<const TensorImpl*> requested;
  for (const auto& in : inputs) {
    const TensorImpl* p = TensorAccess::impl(in).get();
    if (!visited.count(p))
      fail("grad: input not reachable from output in the computation record");
    requested.insert(p);
  }

  std::optional<NoGradGuard> guard;
  if (!create_record) guard.emplace();

  std::unordered_map<const TensorImpl*, Tensor> grads;
  grads.emplace(TensorAccess::impl(output).get(), Tensor::ones(output.shape()));

  for (auto it = topo.rbegin(); it != topo.rend(); ++it) {
    const auto& impl = *it;
    const auto& node = impl->node;
    if (!node) continue;
    auto git = grads.find(impl.get());
    if (git == grads.end()) continue;
    Tensor g = git->second;
    if (!requested.count(impl.get())) grads.erase(git);
    Tensor out_handle = TensorAccess::wrap(impl);
    std::vector<Tensor> in_grads = node->backward(*node, out_handle, g);
    require(in_grads.size() == node->inputs.size(),
            std::string("internal: backward arity mismatch for ") + node->op);
    for (std::size_t i = 0; i < in_grads.size(); ++i) {
      const auto& in = node->inputs[i];
      if (!in.defined() || !in.requires_grad()) continue;
      if (!in_grads[i].defined()) continue;
      const TensorImpl* key = TensorAccess::impl(in).get();
      auto found = grads.find(key);
      if (found == grads.end())
        grads.emplace(key, std::move(in_grads[i]));
      else
        found->second = add(found->second, in_grads[i]);
    }
  }

  std::vector<Tensor> result;
  result.reserve(inputs.size());
  for (const auto& in : inputs) {
    auto found = grads.find(TensorAccess::impl(in).get());
    if (found != grads.end())
      result.push_back(found->second);
    else
      result.push_back(Tensor::zeros(in.shape()));
  }
  return result;
}

}  // namespace metaflow
