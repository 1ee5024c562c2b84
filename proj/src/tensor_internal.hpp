#pragma once

#include <string_view>
#include <vector>

#include "tpn/lu.hpp"
#include "tpn/tensor.hpp"

namespace tpn::detail {

ImplPtr make_impl(Shape shape, std::vector<double> data);
Tensor finish(const ImplPtr& out, bool needs_grad, std::string_view op, Tape::BackwardFn fn);
/// Gradient buffer of `p`, or nullptr when p does not require gradients.
double* grad_sink(const ImplPtr& p);
void require_rank(const Tensor& t, std::size_t rank, std::string_view op);
void require_same_shape(const Tensor& a, const Tensor& b, std::string_view op);

}  // namespace tpn::detail
