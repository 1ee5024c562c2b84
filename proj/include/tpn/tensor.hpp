#pragma once

// Dense float64 tensors with a reverse-mode differentiation tape.
//
// Every op whose inputs require gradients appends a node to the calling
// thread's tape. `backward(loss)` walks that tape in strict reverse creation
// order, once; `Tape::current().reset()` then releases the recorded
// intermediates so the next forward pass starts clean.

#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace tpn {

using Shape = std::vector<std::size_t>;

std::size_t shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);

namespace detail {

struct TensorImpl {
  Shape shape;
  std::vector<double> data;
  std::vector<double> grad;  // empty until something flows into it
  bool requires_grad = false;
  std::int64_t node = -1;         // index on the producing tape, -1 for leaves
  std::uint64_t tape_epoch = 0;   // epoch of that tape when recorded

  double* grad_buffer();  // allocates lazily
};

using ImplPtr = std::shared_ptr<TensorImpl>;

}  // namespace detail

class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, double value, bool requires_grad = false);
  static Tensor from(Shape shape, std::vector<double> values, bool requires_grad = false);
  static Tensor scalar(double value);
  static Tensor eye(std::size_t n);

  bool defined() const noexcept { return impl_ != nullptr; }
  const Shape& shape() const { return impl_->shape; }
  std::size_t rank() const { return impl_->shape.size(); }
  std::size_t dim(std::size_t axis) const;
  std::size_t numel() const { return impl_->data.size(); }

  std::span<const double> data() const { return impl_->data; }
  /// Direct write access; used by optimizers and finite-difference probes.
  /// Never call while a recorded forward pass still references this tensor.
  std::span<double> mutable_data() { return impl_->data; }

  bool has_grad() const { return !impl_->grad.empty(); }
  /// Gradient buffer, or an empty span when none has been accumulated.
  std::span<const double> grad() const { return impl_->grad; }
  std::span<double> mutable_grad();
  void zero_grad();

  bool requires_grad() const { return impl_->requires_grad; }
  void set_requires_grad(bool flag);

  double item() const;
  double at(std::size_t i) const { return impl_->data[i]; }
  double at(std::size_t i, std::size_t j) const;

  /// Deep copy of the values; no gradient, same requires_grad flag.
  Tensor clone() const;
  /// Shares nothing with the tape: a constant copy of the values.
  Tensor detach() const;

  const detail::ImplPtr& impl() const { return impl_; }
  explicit Tensor(detail::ImplPtr impl) : impl_(std::move(impl)) {}

 private:
  detail::ImplPtr impl_;
};

class Tape {
 public:
  using BackwardFn = std::function<void()>;

  /// The tape of the calling thread.
  static Tape& current();

  /// Appends a node producing `out`. No-op while recording is disabled.
  void record(std::string_view op, const detail::ImplPtr& out, BackwardFn backward);

  /// Runs every recorded node from `loss` back to the first, in reverse
  /// creation order. Throws TapeError on a second call without reset().
  void backward(const Tensor& loss);

  /// Drops all nodes; tensors produced before the reset become constants.
  void reset();

  std::size_t size() const noexcept { return nodes_.size(); }
  bool consumed() const noexcept { return consumed_; }
  bool recording() const noexcept { return no_grad_depth_ == 0; }
  std::uint64_t epoch() const noexcept { return epoch_; }

 private:
  friend class NoGradGuard;

  struct Node {
    std::string op;
    detail::ImplPtr out;
    BackwardFn backward;
  };

  std::vector<Node> nodes_;
  std::uint64_t epoch_ = 1;
  bool consumed_ = false;
  int no_grad_depth_ = 0;
};

/// Disables recording on the current thread for its lifetime.
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;
};

void backward(const Tensor& loss);

// ---- ops ---------------------------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b);
Tensor transpose(const Tensor& a);
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double factor);
Tensor add_scalar(const Tensor& a, double value);
/// Elementwise product with a constant mask (no gradient to the mask).
Tensor mask_mul(const Tensor& a, std::span<const double> mask);
Tensor sum(const Tensor& a);
Tensor reshape(const Tensor& a, Shape shape);

Tensor relu(const Tensor& x);
/// ln(1 + e^x), overflow-safe.
Tensor softplus(const Tensor& x);
Tensor exp(const Tensor& x);

/// x[m x n] * w[n x p] + b[p]
Tensor linear(const Tensor& x, const Tensor& w, const Tensor& b);
/// Row i of x divided by s[i].
Tensor div_rows(const Tensor& x, const Tensor& s);
/// D_ij = ||z_i - z_j||^2 for the rows of z.
Tensor pairwise_sqdist(const Tensor& z);
/// max(a, a^T) elementwise; on ties the gradient goes to a_ij.
Tensor sym_max(const Tensor& a);
/// D^-1/2 W D^-1/2 with row-sum degrees floored at `degree_floor`.
Tensor normalized_adjacency(const Tensor& w, double degree_floor = 1e-12);

/// 3x3 cross-correlation, stride 1, zero padding 1.
Tensor conv2d(const Tensor& x, const Tensor& w, const Tensor& bias);
/// 2x2 window, stride 2, floor on odd sizes; ties route to the first cell in
/// row-major order.
Tensor maxpool2d(const Tensor& x);
/// Per-channel normalization over every axis except 1, using the statistics
/// of this batch.
Tensor batchnorm(const Tensor& x, const Tensor& gamma, const Tensor& beta,
                 double eps = 1e-5);

/// Solves A X = B by LU with partial pivoting; pivots below `pivot_tol`
/// raise SingularMatrixError.
Tensor linsolve(const Tensor& a, const Tensor& b, double pivot_tol = 1e-12);

/// Sum over rows with mask[i] of -log softmax(F_i)[labels[i]].
Tensor row_softmax_ce(const Tensor& f, std::span<const int> labels,
                      std::span<const char> mask);

}  // namespace tpn
