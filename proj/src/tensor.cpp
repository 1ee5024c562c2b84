#include "tpn/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

#include "tensor_internal.hpp"
#include "tpn/errors.hpp"

namespace tpn {

std::size_t shape_numel(const Shape& shape) {
  std::size_t n = 1;
  for (auto d : shape) n *= d;
  return n;
}

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "x" : "") << shape[i];
  os << ']';
  return os.str();
}

double* detail::TensorImpl::grad_buffer() {
  if (grad.empty()) grad.assign(data.size(), 0.0);
  return grad.data();
}

// ---- Tensor -------------------------------------------------------------

Tensor Tensor::zeros(Shape shape, bool requires_grad) { return full(std::move(shape), 0.0, requires_grad); }

Tensor Tensor::full(Shape shape, double value, bool requires_grad) {
  for (auto d : shape)
    if (d == 0) throw DimensionError("tensor dims must be positive, got " + shape_str(shape));
  auto impl = std::make_shared<detail::TensorImpl>();
  impl->data.assign(shape_numel(shape), value);
  impl->shape = std::move(shape);
  impl->requires_grad = requires_grad;
  return Tensor(std::move(impl));
}

Tensor Tensor::from(Shape shape, std::vector<double> values, bool requires_grad) {
  for (auto d : shape)
    if (d == 0) throw DimensionError("tensor dims must be positive, got " + shape_str(shape));
  if (values.size() != shape_numel(shape))
    throw DimensionError("value count " + std::to_string(values.size()) + " does not match shape " +
                         shape_str(shape));
  auto impl = std::make_shared<detail::TensorImpl>();
  impl->shape = std::move(shape);
  impl->data = std::move(values);
  impl->requires_grad = requires_grad;
  return Tensor(std::move(impl));
}

Tensor Tensor::scalar(double value) { return from({1}, {value}); }

Tensor Tensor::eye(std::size_t n) {
  auto t = zeros({n, n});
  for (std::size_t i = 0; i < n; ++i) t.impl_->data[i * n + i] = 1.0;
  return t;
}

std::size_t Tensor::dim(std::size_t axis) const {
  if (axis >= rank()) throw DimensionError("axis " + std::to_string(axis) + " out of range for " + shape_str(shape()));
  return impl_->shape[axis];
}

std::span<double> Tensor::mutable_grad() {
  impl_->grad_buffer();
  return impl_->grad;
}

void Tensor::zero_grad() {
  if (!impl_->grad.empty()) std::fill(impl_->grad.begin(), impl_->grad.end(), 0.0);
}

void Tensor::set_requires_grad(bool flag) { impl_->requires_grad = flag; }

double Tensor::item() const {
  if (numel() != 1) throw DimensionError("item() on non-scalar tensor " + shape_str(shape()));
  return impl_->data[0];
}

double Tensor::at(std::size_t i, std::size_t j) const { return impl_->data[i * impl_->shape[1] + j]; }

Tensor Tensor::clone() const { return from(shape(), impl_->data, impl_->requires_grad); }

Tensor Tensor::detach() const { return from(shape(), impl_->data, false); }

// ---- Tape ---------------------------------------------------------------

Tape& Tape::current() {
  thread_local Tape tape;
  return tape;
}

void Tape::record(std::string_view op, const detail::ImplPtr& out, BackwardFn backward) {
  if (!recording()) return;
  if (consumed_) reset();  // a consumed tape starts a fresh forward pass
  out->node = static_cast<std::int64_t>(nodes_.size());
  out->tape_epoch = epoch_;
  nodes_.push_back(Node{std::string(op), out, std::move(backward)});
}

void Tape::backward(const Tensor& loss) {
  if (!loss.defined() || loss.numel() != 1)
    throw TapeError("backward requires a scalar loss, got " + (loss.defined() ? shape_str(loss.shape()) : "undefined"));
  if (consumed_) throw TapeError("backward called twice on one forward pass");
  const auto& impl = loss.impl();
  if (impl->node < 0 || impl->tape_epoch != epoch_ ||
      static_cast<std::size_t>(impl->node) >= nodes_.size() || nodes_[impl->node].out != impl)
    throw TapeError("loss was not produced on the active tape");
  impl->grad_buffer()[0] += 1.0;
  for (std::int64_t i = impl->node; i >= 0; --i) {
    auto& node = nodes_[static_cast<std::size_t>(i)];
    if (node.out->grad.empty()) continue;
    node.backward();
  }
  consumed_ = true;
}

void Tape::reset() {
  nodes_.clear();
  ++epoch_;
  consumed_ = false;
}

NoGradGuard::NoGradGuard() { ++Tape::current().no_grad_depth_; }
NoGradGuard::~NoGradGuard() { --Tape::current().no_grad_depth_; }

void backward(const Tensor& loss) { Tape::current().backward(loss); }

// ---- helpers ------------------------------------------------------------

namespace detail {

ImplPtr make_impl(Shape shape, std::vector<double> data) {
  auto impl = std::make_shared<TensorImpl>();
  impl->shape = std::move(shape);
  impl->data = std::move(data);
  return impl;
}

Tensor finish(const ImplPtr& out, bool needs_grad, std::string_view op, Tape::BackwardFn fn) {
  auto& tape = Tape::current();
  if (needs_grad && tape.recording()) {
    out->requires_grad = true;
    tape.record(op, out, std::move(fn));
  }
  return Tensor(out);
}

double* grad_sink(const ImplPtr& p) { return p->requires_grad ? p->grad_buffer() : nullptr; }

void require_rank(const Tensor& t, std::size_t rank, std::string_view op) {
  if (t.rank() != rank)
    throw DimensionError(std::string(op) + ": expected rank " + std::to_string(rank) + ", got " + shape_str(t.shape()));
}

void require_same_shape(const Tensor& a, const Tensor& b, std::string_view op) {
  if (a.shape() != b.shape())
    throw DimensionError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
}

}  // namespace detail

using detail::finish;
using detail::grad_sink;
using detail::ImplPtr;
using detail::make_impl;

// ---- linear algebra -----------------------------------------------------

namespace {

// c[m x n] += a[m x k] * b[k x n]
void gemm_acc(const double* a, const double* b, double* c, std::size_t m, std::size_t k, std::size_t n) {
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t p = 0; p < k; ++p) {
      const double av = a[i * k + p];
      if (av == 0.0) continue;
      const double* brow = b + p * n;
      double* crow = c + i * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
}

// c[m x n] += a[m x k] * b[n x k]^T
void gemm_nt_acc(const double* a, const double* b, double* c, std::size_t m, std::size_t k, std::size_t n) {
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) {
      double s = 0.0;
      for (std::size_t p = 0; p < k; ++p) s += a[i * k + p] * b[j * k + p];
      c[i * n + j] += s;
    }
}

// c[k x n] += a[m x k]^T * b[m x n]
void gemm_tn_acc(const double* a, const double* b, double* c, std::size_t m, std::size_t k, std::size_t n) {
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t p = 0; p < k; ++p) {
      const double av = a[i * k + p];
      if (av == 0.0) continue;
      const double* brow = b + i * n;
      double* crow = c + p * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
}

}  // namespace

Tensor matmul(const Tensor& a, const Tensor& b) {
  detail::require_rank(a, 2, "matmul");
  detail::require_rank(b, 2, "matmul");
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  if (b.dim(0) != k)
    throw DimensionError("matmul: inner dimensions disagree, " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
  std::vector<double> out(m * n, 0.0);
  gemm_acc(a.data().data(), b.data().data(), out.data(), m, k, n);
  auto o = make_impl({m, n}, std::move(out));
  ImplPtr ai = a.impl(), bi = b.impl();
  return finish(o, a.requires_grad() || b.requires_grad(), "matmul", [o, ai, bi, m, k, n] {
    const double* g = o->grad.data();
    if (double* ga = grad_sink(ai)) gemm_nt_acc(g, bi->data.data(), ga, m, n, k);
    if (double* gb = grad_sink(bi)) gemm_tn_acc(ai->data.data(), g, gb, m, k, n);
  });
}

Tensor transpose(const Tensor& a) {
  detail::require_rank(a, 2, "transpose");
  const std::size_t m = a.dim(0), n = a.dim(1);
  std::vector<double> out(m * n);
  const auto src = a.data();
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) out[j * m + i] = src[i * n + j];
  auto o = make_impl({n, m}, std::move(out));
  ImplPtr ai = a.impl();
  return finish(o, a.requires_grad(), "transpose", [o, ai, m, n] {
    double* ga = grad_sink(ai);
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < n; ++j) ga[i * n + j] += o->grad[j * m + i];
  });
}

Tensor linear(const Tensor& x, const Tensor& w, const Tensor& b) {
  detail::require_rank(x, 2, "linear");
  detail::require_rank(w, 2, "linear");
  const std::size_t m = x.dim(0), k = x.dim(1), n = w.dim(1);
  if (w.dim(0) != k || b.numel() != n)
    throw DimensionError("linear: incompatible shapes " + shape_str(x.shape()) + ", " + shape_str(w.shape()) + ", " +
                         shape_str(b.shape()));
  std::vector<double> out(m * n);
  for (std::size_t i = 0; i < m; ++i) std::copy(b.data().begin(), b.data().end(), out.begin() + i * n);
  gemm_acc(x.data().data(), w.data().data(), out.data(), m, k, n);
  auto o = make_impl({m, n}, std::move(out));
  ImplPtr xi = x.impl(), wi = w.impl(), bi = b.impl();
  const bool needs = x.requires_grad() || w.requires_grad() || b.requires_grad();
  return finish(o, needs, "linear", [o, xi, wi, bi, m, k, n] {
    const double* g = o->grad.data();
    if (double* gx = grad_sink(xi)) gemm_nt_acc(g, wi->data.data(), gx, m, n, k);
    if (double* gw = grad_sink(wi)) gemm_tn_acc(xi->data.data(), g, gw, m, k, n);
    if (double* gb = grad_sink(bi))
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) gb[j] += g[i * n + j];
  });
}

// ---- elementwise --------------------------------------------------------

Tensor add(const Tensor& a, const Tensor& b) {
  detail::require_same_shape(a, b, "add");
  std::vector<double> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.at(i) + b.at(i);
  auto o = make_impl(a.shape(), std::move(out));
  ImplPtr ai = a.impl(), bi = b.impl();
  return finish(o, a.requires_grad() || b.requires_grad(), "add", [o, ai, bi] {
    for (const auto& p : {ai, bi})
      if (double* g = grad_sink(p))
        for (std::size_t i = 0; i < o->grad.size(); ++i) g[i] += o->grad[i];
  });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  detail::require_same_shape(a, b, "sub");
  std::vector<double> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.at(i) - b.at(i);
  auto o = make_impl(a.shape(), std::move(out));
  ImplPtr ai = a.impl(), bi = b.impl();
  return finish(o, a.requires_grad() || b.requires_grad(), "sub", [o, ai, bi] {
    if (double* g = grad_sink(ai))
      for (std::size_t i = 0; i < o->grad.size(); ++i) g[i] += o->grad[i];
    if (double* g = grad_sink(bi))
      for (std::size_t i = 0; i < o->grad.size(); ++i) g[i] -= o->grad[i];
  });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  detail::require_same_shape(a, b, "mul");
  std::vector<double> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.at(i) * b.at(i);
  auto o = make_impl(a.shape(), std::move(out));
  ImplPtr ai = a.impl(), bi = b.impl();
  return finish(o, a.requires_grad() || b.requires_grad(), "mul", [o, ai, bi] {
    if (double* g = grad_sink(ai))
      for (std::size_t i = 0; i < o->grad.size(); ++i) g[i] += o->grad[i] * bi->data[i];
    if (double* g = grad_sink(bi))
      for (std::size_t i = 0; i < o->grad.size(); ++i) g[i] += o->grad[i] * ai->data[i];
  });
}

Tensor scale(const Tensor& a, double factor) {
  std::vector<double> out(a.data().begin(), a.data().end());
  for (auto& v : out) v *= factor;
  auto o = make_impl(a.shape(), std::move(out));
  ImplPtr ai = a.impl();
  return finish(o, a.requires_grad(), "scale", [o, ai, factor] {
    double* g = grad_sink(ai);
    for (std::size_t i = 0; i < o->grad.size(); ++i) g[i] += factor * o->grad[i];
  });
}

Tensor add_scalar(const Tensor& a, double value) {
  std::vector<double> out(a.data().begin(), a.data().end());
  for (auto& v : out) v += value;
  auto o = make_impl(a.shape(), std::move(out));
  ImplPtr ai = a.impl();
  return finish(o, a.requires_grad(), "add_scalar", [o, ai] {
    double* g = grad_sink(ai);
    for (std::size_t i = 0; i < o->grad.size(); ++i) g[i] += o->grad[i];
  });
}

Tensor mask_mul(const Tensor& a, std::span<const double> mask) {
  if (mask.size() != a.numel())
    throw DimensionError("mask_mul: mask length " + std::to_string(mask.size()) + " vs " + shape_str(a.shape()));
  std::vector<double> m(mask.begin(), mask.end());
  std::vector<double> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.at(i) * m[i];
  auto o = make_impl(a.shape(), std::move(out));
  ImplPtr ai = a.impl();
  return finish(o, a.requires_grad(), "mask_mul", [o, ai, m = std::move(m)] {
    double* g = grad_sink(ai);
    for (std::size_t i = 0; i < o->grad.size(); ++i) g[i] += m[i] * o->grad[i];
  });
}

Tensor sum(const Tensor& a) {
  double s = 0.0;
  for (double v : a.data()) s += v;
  auto o = make_impl({1}, {s});
  ImplPtr ai = a.impl();
  return finish(o, a.requires_grad(), "sum", [o, ai] {
    double* g = grad_sink(ai);
    const double go = o->grad[0];
    for (std::size_t i = 0; i < ai->data.size(); ++i) g[i] += go;
  });
}

Tensor reshape(const Tensor& a, Shape shape) {
  if (shape_numel(shape) != a.numel())
    throw DimensionError("reshape: cannot view " + shape_str(a.shape()) + " as " + shape_str(shape));
  auto o = make_impl(std::move(shape), std::vector<double>(a.data().begin(), a.data().end()));
  ImplPtr ai = a.impl();
  return finish(o, a.requires_grad(), "reshape", [o, ai] {
    double* g = grad_sink(ai);
    for (std::size_t i = 0; i < o->grad.size(); ++i) g[i] += o->grad[i];
  });
}

Tensor relu(const Tensor& x) {
  std::vector<double> out(x.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x.at(i) > 0.0 ? x.at(i) : 0.0;
  auto o = make_impl(x.shape(), std::move(out));
  ImplPtr xi = x.impl();
  return finish(o, x.requires_grad(), "relu", [o, xi] {
    double* g = grad_sink(xi);
    for (std::size_t i = 0; i < o->grad.size(); ++i)
      if (xi->data[i] > 0.0) g[i] += o->grad[i];
  });
}

Tensor softplus(const Tensor& x) {
  std::vector<double> out(x.numel());
  for (std::size_t i = 0; i < out.size(); ++i) {
    const double v = x.at(i);
    out[i] = v > 0.0 ? v + std::log1p(std::exp(-v)) : std::log1p(std::exp(v));
  }
  auto o = make_impl(x.shape(), std::move(out));
  ImplPtr xi = x.impl();
  return finish(o, x.requires_grad(), "softplus", [o, xi] {
    double* g = grad_sink(xi);
    for (std::size_t i = 0; i < o->grad.size(); ++i) {
      const double v = xi->data[i];
      // logistic(v), evaluated without overflow
      const double sig = v >= 0.0 ? 1.0 / (1.0 + std::exp(-v)) : std::exp(v) / (1.0 + std::exp(v));
      g[i] += sig * o->grad[i];
    }
  });
}

Tensor exp(const Tensor& x) {
  std::vector<double> out(x.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::exp(x.at(i));
  auto o = make_impl(x.shape(), std::move(out));
  ImplPtr xi = x.impl();
  return finish(o, x.requires_grad(), "exp", [o, xi] {
    double* g = grad_sink(xi);
    for (std::size_t i = 0; i < o->grad.size(); ++i) g[i] += o->data[i] * o->grad[i];
  });
}

// ---- graph primitives ---------------------------------------------------

Tensor div_rows(const Tensor& x, const Tensor& s) {
  detail::require_rank(x, 2, "div_rows");
  const std::size_t n = x.dim(0), d = x.dim(1);
  if (s.numel() != n)
    throw DimensionError("div_rows: " + shape_str(x.shape()) + " rows vs scale " + shape_str(s.shape()));
  std::vector<double> out(n * d);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < d; ++j) out[i * d + j] = x.at(i * d + j) / s.at(i);
  auto o = make_impl({n, d}, std::move(out));
  ImplPtr xi = x.impl(), si = s.impl();
  return finish(o, x.requires_grad() || s.requires_grad(), "div_rows", [o, xi, si, n, d] {
    const double* g = o->grad.data();
    double* gx = grad_sink(xi);
    double* gs = grad_sink(si);
    for (std::size_t i = 0; i < n; ++i) {
      const double sv = si->data[i];
      double acc = 0.0;
      for (std::size_t j = 0; j < d; ++j) {
        if (gx) gx[i * d + j] += g[i * d + j] / sv;
        acc += g[i * d + j] * xi->data[i * d + j];
      }
      if (gs) gs[i] -= acc / (sv * sv);
    }
  });
}

Tensor pairwise_sqdist(const Tensor& z) {
  detail::require_rank(z, 2, "pairwise_sqdist");
  const std::size_t n = z.dim(0), d = z.dim(1);
  const double* zd = z.data().data();
  std::vector<double> out(n * n, 0.0);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = i + 1; j < n; ++j) {
      double s = 0.0;
      for (std::size_t k = 0; k < d; ++k) {
        const double diff = zd[i * d + k] - zd[j * d + k];
        s += diff * diff;
      }
      out[i * n + j] = s;
      out[j * n + i] = s;
    }
  auto o = make_impl({n, n}, std::move(out));
  ImplPtr zi = z.impl();
  return finish(o, z.requires_grad(), "pairwise_sqdist", [o, zi, n, d] {
    double* gz = grad_sink(zi);
    const double* zd = zi->data.data();
    const double* g = o->grad.data();
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = i + 1; j < n; ++j) {
        const double c = 2.0 * (g[i * n + j] + g[j * n + i]);
        if (c == 0.0) continue;
        for (std::size_t k = 0; k < d; ++k) {
          const double diff = c * (zd[i * d + k] - zd[j * d + k]);
          gz[i * d + k] += diff;
          gz[j * d + k] -= diff;
        }
      }
  });
}

Tensor sym_max(const Tensor& a) {
  detail::require_rank(a, 2, "sym_max");
  const std::size_t n = a.dim(0);
  if (a.dim(1) != n) throw DimensionError("sym_max: matrix must be square, got " + shape_str(a.shape()));
  std::vector<double> out(n * n);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j) out[i * n + j] = std::max(a.at(i * n + j), a.at(j * n + i));
  auto o = make_impl({n, n}, std::move(out));
  ImplPtr ai = a.impl();
  return finish(o, a.requires_grad(), "sym_max", [o, ai, n] {
    double* g = grad_sink(ai);
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < n; ++j) {
        const std::size_t ij = i * n + j, ji = j * n + i;
        g[ai->data[ij] >= ai->data[ji] ? ij : ji] += o->grad[ij];
      }
  });
}

Tensor normalized_adjacency(const Tensor& w, double degree_floor) {
  detail::require_rank(w, 2, "normalized_adjacency");
  const std::size_t n = w.dim(0);
  if (w.dim(1) != n) throw DimensionError("normalized_adjacency: matrix must be square, got " + shape_str(w.shape()));
  std::vector<double> deg(n, 0.0), inv_sqrt(n);
  std::vector<char> floored(n, 0);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < n; ++j) deg[i] += w.at(i * n + j);
    if (deg[i] < degree_floor) {
      deg[i] = degree_floor;
      floored[i] = 1;
    }
    inv_sqrt[i] = 1.0 / std::sqrt(deg[i]);
  }
  std::vector<double> out(n * n);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j) out[i * n + j] = inv_sqrt[i] * w.at(i * n + j) * inv_sqrt[j];
  auto o = make_impl({n, n}, std::move(out));
  ImplPtr wi = w.impl();
  return finish(o, w.requires_grad(), "normalized_adjacency",
                [o, wi, n, deg = std::move(deg), inv_sqrt = std::move(inv_sqrt), floored = std::move(floored)] {
                  double* gw = grad_sink(wi);
                  const double* g = o->grad.data();
                  const double* wd = wi->data.data();
                  std::vector<double> g_inv(n, 0.0);  // dL/d(d_i^-1/2)
                  for (std::size_t i = 0; i < n; ++i)
                    for (std::size_t j = 0; j < n; ++j) {
                      const double gij = g[i * n + j];
                      gw[i * n + j] += gij * inv_sqrt[i] * inv_sqrt[j];
                      g_inv[i] += gij * wd[i * n + j] * inv_sqrt[j];
                      g_inv[j] += gij * inv_sqrt[i] * wd[i * n + j];
                    }
                  for (std::size_t i = 0; i < n; ++i) {
                    if (floored[i]) continue;
                    const double g_deg = -0.5 * g_inv[i] * inv_sqrt[i] / deg[i];
                    for (std::size_t j = 0; j < n; ++j) gw[i * n + j] += g_deg;
                  }
                });
}

// ---- solve & loss -------------------------------------------------------

Tensor linsolve(const Tensor& a, const Tensor& b, double pivot_tol) {
  detail::require_rank(a, 2, "linsolve");
  detail::require_rank(b, 2, "linsolve");
  const std::size_t n = a.dim(0), m = b.dim(1);
  if (a.dim(1) != n || b.dim(0) != n)
    throw DimensionError("linsolve: need square A and matching B, got " + shape_str(a.shape()) + " and " +
                         shape_str(b.shape()));
  auto lu = std::make_shared<LuDecomposition>(a.data(), n, pivot_tol);
  std::vector<double> x(b.data().begin(), b.data().end());
  lu->solve(x, m);
  auto o = make_impl({n, m}, std::move(x));
  ImplPtr ai = a.impl(), bi = b.impl();
  return finish(o, a.requires_grad() || b.requires_grad(), "linsolve", [o, ai, bi, lu, n, m] {
    // Z = A^-T G;  dB = Z;  dA = -Z X^T
    std::vector<double> z(o->grad.begin(), o->grad.end());
    lu->solve_transposed(z, m);
    if (double* gb = grad_sink(bi))
      for (std::size_t i = 0; i < n * m; ++i) gb[i] += z[i];
    if (double* ga = grad_sink(ai)) {
      std::vector<double> dz(n * n, 0.0);
      gemm_nt_acc(z.data(), o->data.data(), dz.data(), n, m, n);
      for (std::size_t i = 0; i < n * n; ++i) ga[i] -= dz[i];
    }
  });
}

Tensor row_softmax_ce(const Tensor& f, std::span<const int> labels, std::span<const char> mask) {
  detail::require_rank(f, 2, "row_softmax_ce");
  const std::size_t n = f.dim(0), c = f.dim(1);
  if (labels.size() != n || mask.size() != n)
    throw DimensionError("row_softmax_ce: labels/mask length must equal row count " + std::to_string(n));
  bool any = false;
  for (std::size_t i = 0; i < n; ++i) {
    if (!mask[i]) continue;
    any = true;
    if (labels[i] < 0 || static_cast<std::size_t>(labels[i]) >= c)
      throw ConfigError("row_softmax_ce: label " + std::to_string(labels[i]) + " at row " + std::to_string(i) +
                        " outside [0," + std::to_string(c) + ")");
  }
  if (!any) throw ConfigError("row_softmax_ce: mask selects no rows");

  std::vector<double> probs(n * c, 0.0);
  double loss = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    if (!mask[i]) continue;
    const double* row = f.data().data() + i * c;
    const double mx = *std::max_element(row, row + c);
    double z = 0.0;
    for (std::size_t j = 0; j < c; ++j) z += std::exp(row[j] - mx);
    for (std::size_t j = 0; j < c; ++j) probs[i * c + j] = std::exp(row[j] - mx) / z;
    loss += -(row[labels[i]] - mx - std::log(z));
  }
  auto o = make_impl({1}, {loss});
  ImplPtr fi = f.impl();
  std::vector<int> lab(labels.begin(), labels.end());
  std::vector<char> msk(mask.begin(), mask.end());
  return finish(o, f.requires_grad(), "row_softmax_ce",
                [o, fi, n, c, probs = std::move(probs), lab = std::move(lab), msk = std::move(msk)] {
                  double* g = grad_sink(fi);
                  const double go = o->grad[0];
                  for (std::size_t i = 0; i < n; ++i) {
                    if (!msk[i]) continue;
                    for (std::size_t j = 0; j < c; ++j)
                      g[i * c + j] += go * (probs[i * c + j] - (static_cast<int>(j) == lab[i] ? 1.0 : 0.0));
                  }
                });
}

}  // namespace tpn
