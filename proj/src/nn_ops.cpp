#include <cmath>
#include <limits>

#include "tensor_internal.hpp"
#include "tpn/errors.hpp"

namespace tpn {

using detail::finish;
using detail::grad_sink;
using detail::ImplPtr;
using detail::make_impl;

Tensor conv2d(const Tensor& x, const Tensor& w, const Tensor& bias) {
  detail::require_rank(x, 4, "conv2d");
  detail::require_rank(w, 4, "conv2d");
  const std::size_t batch = x.dim(0), cin = x.dim(1), h = x.dim(2), wd = x.dim(3);
  const std::size_t filters = w.dim(0);
  if (w.dim(1) != cin)
    throw DimensionError("conv2d: input has " + std::to_string(cin) + " channels but kernel " +
                         shape_str(w.shape()) + " expects " + std::to_string(w.dim(1)));
  if (w.dim(2) != 3 || w.dim(3) != 3) throw DimensionError("conv2d: kernel must be 3x3, got " + shape_str(w.shape()));
  if (bias.numel() != filters)
    throw DimensionError("conv2d: bias " + shape_str(bias.shape()) + " vs " + std::to_string(filters) + " filters");

  const std::size_t plane = h * wd;
  std::vector<double> out(batch * filters * plane);
  const double* xd = x.data().data();
  const double* wdat = w.data().data();
  for (std::size_t b = 0; b < batch; ++b)
    for (std::size_t f = 0; f < filters; ++f) {
      double* op = out.data() + (b * filters + f) * plane;
      std::fill(op, op + plane, bias.at(f));
      for (std::size_t c = 0; c < cin; ++c) {
        const double* ip = xd + (b * cin + c) * plane;
        const double* kp = wdat + (f * cin + c) * 9;
        for (int ky = 0; ky < 3; ++ky)
          for (int kx = 0; kx < 3; ++kx) {
            const double kv = kp[ky * 3 + kx];
            if (kv == 0.0) continue;
            const int dy = ky - 1, dx = kx - 1;
            const std::size_t y0 = dy < 0 ? 1 : 0, y1 = dy > 0 ? h - 1 : h;
            const std::size_t x0 = dx < 0 ? 1 : 0, x1 = dx > 0 ? wd - 1 : wd;
            for (std::size_t y = y0; y < y1; ++y) {
              const double* irow = ip + (y + dy) * wd;
              double* orow = op + y * wd;
              for (std::size_t xx = x0; xx < x1; ++xx) orow[xx] += kv * irow[xx + dx];
            }
          }
      }
    }

  auto o = make_impl({batch, filters, h, wd}, std::move(out));
  ImplPtr xi = x.impl(), wi = w.impl(), bi = bias.impl();
  const bool needs = x.requires_grad() || w.requires_grad() || bias.requires_grad();
  return finish(o, needs, "conv2d", [o, xi, wi, bi, batch, cin, filters, h, wd, plane] {
    double* gx = grad_sink(xi);
    double* gw = grad_sink(wi);
    double* gb = grad_sink(bi);
    const double* xd = xi->data.data();
    const double* wdat = wi->data.data();
    for (std::size_t b = 0; b < batch; ++b)
      for (std::size_t f = 0; f < filters; ++f) {
        const double* gp = o->grad.data() + (b * filters + f) * plane;
        if (gb)
          for (std::size_t i = 0; i < plane; ++i) gb[f] += gp[i];
        for (std::size_t c = 0; c < cin; ++c) {
          const std::size_t in_off = (b * cin + c) * plane;
          const std::size_t k_off = (f * cin + c) * 9;
          for (int ky = 0; ky < 3; ++ky)
            for (int kx = 0; kx < 3; ++kx) {
              const int dy = ky - 1, dx = kx - 1;
              const std::size_t y0 = dy < 0 ? 1 : 0, y1 = dy > 0 ? h - 1 : h;
              const std::size_t x0 = dx < 0 ? 1 : 0, x1 = dx > 0 ? wd - 1 : wd;
              const double kv = wdat[k_off + ky * 3 + kx];
              double acc = 0.0;
              for (std::size_t y = y0; y < y1; ++y) {
                const std::size_t irow = in_off + (y + dy) * wd + dx;
                const double* grow = gp + y * wd;
                for (std::size_t xx = x0; xx < x1; ++xx) {
                  acc += grow[xx] * xd[irow + xx];
                  if (gx) gx[irow + xx] += kv * grow[xx];
                }
              }
              if (gw) gw[k_off + ky * 3 + kx] += acc;
            }
        }
      }
  });
}

Tensor maxpool2d(const Tensor& x) {
  detail::require_rank(x, 4, "maxpool2d");
  const std::size_t batch = x.dim(0), ch = x.dim(1), h = x.dim(2), wd = x.dim(3);
  if (h < 2 || wd < 2) throw DimensionError("maxpool2d: spatial size must be at least 2x2, got " + shape_str(x.shape()));
  const std::size_t oh = h / 2, ow = wd / 2;
  std::vector<double> out(batch * ch * oh * ow);
  std::vector<std::size_t> argmax(out.size());
  const double* xd = x.data().data();
  for (std::size_t p = 0; p < batch * ch; ++p)
    for (std::size_t y = 0; y < oh; ++y)
      for (std::size_t xx = 0; xx < ow; ++xx) {
        const std::size_t base = p * h * wd;
        std::size_t best = base + (2 * y) * wd + 2 * xx;
        for (std::size_t dy = 0; dy < 2; ++dy)
          for (std::size_t dx = 0; dx < 2; ++dx) {
            const std::size_t idx = base + (2 * y + dy) * wd + 2 * xx + dx;
            if (xd[idx] > xd[best]) best = idx;  // strict: ties keep the first cell
          }
        const std::size_t oi = (p * oh + y) * ow + xx;
        out[oi] = xd[best];
        argmax[oi] = best;
      }
  auto o = make_impl({batch, ch, oh, ow}, std::move(out));
  ImplPtr xi = x.impl();
  return finish(o, x.requires_grad(), "maxpool2d", [o, xi, argmax = std::move(argmax)] {
    double* g = grad_sink(xi);
    for (std::size_t i = 0; i < argmax.size(); ++i) g[argmax[i]] += o->grad[i];
  });
}

Tensor batchnorm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps) {
  if (x.rank() < 2) throw DimensionError("batchnorm: need at least rank 2, got " + shape_str(x.shape()));
  const std::size_t batch = x.dim(0), ch = x.dim(1);
  if (batch < 2) throw DimensionError("batchnorm: batch size must be at least 2 for a defined variance");
  if (gamma.numel() != ch || beta.numel() != ch)
    throw DimensionError("batchnorm: gamma/beta must have " + std::to_string(ch) + " entries");
  const std::size_t inner = x.numel() / (batch * ch);
  const double count = static_cast<double>(batch * inner);
  const double* xd = x.data().data();

  std::vector<double> mean(ch, 0.0), inv_std(ch, 0.0), xhat(x.numel()), out(x.numel());
  for (std::size_t c = 0; c < ch; ++c) {
    double s = 0.0;
    for (std::size_t b = 0; b < batch; ++b)
      for (std::size_t i = 0; i < inner; ++i) s += xd[(b * ch + c) * inner + i];
    mean[c] = s / count;
    double v = 0.0;
    for (std::size_t b = 0; b < batch; ++b)
      for (std::size_t i = 0; i < inner; ++i) {
        const double d = xd[(b * ch + c) * inner + i] - mean[c];
        v += d * d;
      }
    inv_std[c] = 1.0 / std::sqrt(v / count + eps);
    for (std::size_t b = 0; b < batch; ++b)
      for (std::size_t i = 0; i < inner; ++i) {
        const std::size_t idx = (b * ch + c) * inner + i;
        xhat[idx] = (xd[idx] - mean[c]) * inv_std[c];
        out[idx] = gamma.at(c) * xhat[idx] + beta.at(c);
      }
  }
  auto o = make_impl(x.shape(), std::move(out));
  ImplPtr xi = x.impl(), gi = gamma.impl(), bi = beta.impl();
  const bool needs = x.requires_grad() || gamma.requires_grad() || beta.requires_grad();
  return finish(o, needs, "batchnorm",
                [o, xi, gi, bi, batch, ch, inner, count, inv_std = std::move(inv_std), xhat = std::move(xhat)] {
                  double* gx = grad_sink(xi);
                  double* gg = grad_sink(gi);
                  double* gb = grad_sink(bi);
                  const double* g = o->grad.data();
                  for (std::size_t c = 0; c < ch; ++c) {
                    double sum_g = 0.0, sum_gx = 0.0;
                    for (std::size_t b = 0; b < batch; ++b)
                      for (std::size_t i = 0; i < inner; ++i) {
                        const std::size_t idx = (b * ch + c) * inner + i;
                        sum_g += g[idx];
                        sum_gx += g[idx] * xhat[idx];
                      }
                    if (gg) gg[c] += sum_gx;
                    if (gb) gb[c] += sum_g;
                    if (!gx) continue;
                    const double k = gi->data[c] * inv_std[c];
                    const double mg = sum_g / count, mgx = sum_gx / count;
                    for (std::size_t b = 0; b < batch; ++b)
                      for (std::size_t i = 0; i < inner; ++i) {
                        const std::size_t idx = (b * ch + c) * inner + i;
                        gx[idx] += k * (g[idx] - mg - xhat[idx] * mgx);
                      }
                  }
                });
}

}  // namespace tpn
