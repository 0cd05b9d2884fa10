#pragma once

#include <cstdint>
#include <memory>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

namespace metaflow {

class TensorError : public std::runtime_error {
  using std::runtime_error::runtime_error;
};

using Shape = std::vector<std::size_t>;
using IndexArray = std::shared_ptr<const std::vector<std::uint32_t>>;

namespace detail {
struct TensorImpl;
struct OpNode;
}  // namespace detail

/// Dense array of 64-bit floats participating in a dynamically recorded
/// computation. Handles are shallow copies sharing one buffer. Recorded
/// operations never mutate their inputs; new values get new buffers.
///
/// Differentiation is reverse-mode. Backward rules are themselves built
/// from recorded operations, so gradients returned by grad() with
/// create_record=true can be differentiated again (gradients of gradients,
/// to any order).
class Tensor {
 public:
  Tensor() = default;

  static Tensor scalar(double v, bool requires_grad = false);
  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor ones(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, double v, bool requires_grad = false);
  static Tensor from_data(Shape shape, std::vector<double> data,
                          bool requires_grad = false);

  bool defined() const { return impl_ != nullptr; }
  const Shape& shape() const;
  std::size_t numel() const;
  std::size_t rank() const;
  /// Extent helpers for 2-D tensors.
  std::size_t rows() const;
  std::size_t cols() const;

  const std::vector<double>& data() const;
  /// Direct write access to the buffer; only meaningful for leaves
  /// (optimizer updates). Throws for tensors produced by recorded ops.
  std::vector<double>& leaf_data();

  bool requires_grad() const;
  void set_requires_grad(bool v);
  double item() const;

  /// Deep copy with no record link (a constant snapshot of the values).
  Tensor detach_copy() const;

  bool same_impl(const Tensor& other) const { return impl_ == other.impl_; }

 private:
  explicit Tensor(std::shared_ptr<detail::TensorImpl> impl) : impl_(std::move(impl)) {}
  std::shared_ptr<detail::TensorImpl> impl_;
  friend struct detail::OpNode;
  friend struct TensorAccess;
};

/// Disables recording for its scope (thread-local).
struct NoGradGuard {
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool prev_;
};

bool grad_enabled();

// ---- elementwise ----------------------------------------------------------

enum class EltOp { Add, Sub, Mul, Div, Exp, Neg, Square };

/// Binary ops accept equal shapes or a scalar (1-element) on either side;
/// unary ops ignore b. Shape mismatches throw TensorError.
Tensor apply_elementwise(EltOp op, const Tensor& a,
                         const std::optional<Tensor>& b = std::nullopt);

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor div(const Tensor& a, const Tensor& b);
Tensor add(const Tensor& a, double b);
Tensor mul(const Tensor& a, double b);
Tensor neg(const Tensor& a);
Tensor exp(const Tensor& a);
Tensor square(const Tensor& a);

/// y = x for x > 0, e^x - 1 otherwise; derivative at 0 taken as 1.
Tensor elu(const Tensor& a);

// ---- linear algebra -------------------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b);
Tensor transpose(const Tensor& a);
Tensor reshape(const Tensor& a, Shape shape);

// ---- reductions -----------------------------------------------------------

enum class ReduceOp { Sum, Mean };

/// axis = nullopt reduces over everything to a rank-0 scalar; otherwise axis
/// must be valid for the rank (0 for 1-D, 0 or 1 for 2-D).
Tensor reduce(ReduceOp op, const Tensor& x, std::optional<int> axis = std::nullopt);
Tensor sum(const Tensor& x);
Tensor mean(const Tensor& x);

// ---- row/column structure -------------------------------------------------

Tensor concat_cols(const Tensor& a, const Tensor& b);
Tensor slice_cols(const Tensor& x, std::size_t begin, std::size_t end);
/// x[i,:] + v  /  x[i,:] * v for a length-cols vector v (v differentiable).
Tensor add_rowvec(const Tensor& x, const Tensor& v);
Tensor mul_rowvec(const Tensor& x, const Tensor& v);
/// Row i scaled by constant s[i % s.size()]; scales do not receive gradients.
Tensor scale_rows(const Tensor& x, std::shared_ptr<const std::vector<double>> s);

// ---- graph kernels --------------------------------------------------------
//
// These treat a 2-D tensor as `blocks` stacked copies of an n-row block
// (block-diagonal batching of one graph). Index arrays address rows within
// a block and are shared across blocks.

/// out[b*nd + i, :] = x[b*ns + idx[i], :]
Tensor gather_rows(const Tensor& x, IndexArray idx, std::size_t blocks,
                   std::size_t src_rows);
/// out[b*ns + idx[i], :] += x[b*nd + i, :]
Tensor scatter_add_rows(const Tensor& x, IndexArray idx, std::size_t blocks,
                        std::size_t dst_rows);

/// MoNet edge aggregation for K kernels at once:
///   out[b*n + dst[e], k*F + f] += w[e, k] * feats[b*n + src[e], f]
Tensor monet_agg(const Tensor& feats, const Tensor& w, IndexArray src,
                 IndexArray dst, std::size_t blocks, std::size_t n_nodes);
/// Transposed form: out[b*n + src[e], f] += sum_k w[e, k] * g[b*n + dst[e], k*F + f]
Tensor monet_agg_t(const Tensor& g, const Tensor& w, IndexArray src,
                   IndexArray dst, std::size_t blocks, std::size_t n_nodes);
/// Per-edge kernel dot: out[e, k] = sum_{b,f} a[b*n + dst[e], k*F + f] * x[b*n + src[e], f]
Tensor monet_edge_dot(const Tensor& a, const Tensor& x, IndexArray src,
                      IndexArray dst, std::size_t blocks, std::size_t n_nodes);

/// Gaussian kernel weights w[e,k] = exp(-1/2 sum_d (eattr[e,d]-mu[k,d])^2 / exp(ls[k,d])).
/// eattr is constant; mu and ls are differentiable (ls = log of diagonal
/// covariance entries, so covariances stay positive).
Tensor gauss_weights(const Tensor& eattr, const Tensor& mu, const Tensor& ls);

// ---- differentiation ------------------------------------------------------

/// Reverse-mode gradients of a scalar output w.r.t. each input.
/// Throws if output is not a single element, or an input is not reachable
/// from output in the computation record. With create_record=true the
/// returned tensors are differentiable further.
std::vector<Tensor> grad(const Tensor& output, const std::vector<Tensor>& inputs,
                         bool create_record = false);

/// Number of live op nodes (leak checks in tests).
std::size_t live_op_nodes();

}  // namespace metaflow
