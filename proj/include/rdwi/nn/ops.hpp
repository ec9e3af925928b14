#pragma once

// Differentiable operations. Every op reads its inputs' values, writes a fresh output node and,
// when the output is tracked, registers a closure that accumulates input gradients.

#include <algorithm>
#include <cmath>
#include <utility>
#include <vector>

#include "rdwi/nn/tensor.hpp"

namespace rdwi::nn {

namespace detail {

// Fixed-order dot product with four partial sums.
template <class T>
inline T dot(const T* a, const T* b, std::size_t n) {
  T s0 = 0, s1 = 0, s2 = 0, s3 = 0;
  std::size_t i = 0;
  for (; i + 4 <= n; i += 4) {
    s0 += a[i] * b[i];
    s1 += a[i + 1] * b[i + 1];
    s2 += a[i + 2] * b[i + 2];
    s3 += a[i + 3] * b[i + 3];
  }
  for (; i < n; ++i) s0 += a[i] * b[i];
  return (s0 + s1) + (s2 + s3);
}

// Output indices o in [lo, hi) whose input index o * stride + d lies in [0, extent).
inline std::pair<std::size_t, std::size_t> valid_range(std::ptrdiff_t d, std::size_t stride, std::size_t extent,
                                                       std::size_t out_extent) {
  const auto s = static_cast<std::ptrdiff_t>(stride);
  const std::ptrdiff_t lo = d < 0 ? (-d + s - 1) / s : 0;
  const std::ptrdiff_t last = static_cast<std::ptrdiff_t>(extent) - 1 - d;
  const std::ptrdiff_t hi = last < 0 ? 0 : std::min<std::ptrdiff_t>(static_cast<std::ptrdiff_t>(out_extent), last / s + 1);
  return {static_cast<std::size_t>(lo), static_cast<std::size_t>(std::max(lo, hi))};
}

template <class T>
inline T sigmoid(T x) {
  if (x >= T(0)) return T(1) / (T(1) + std::exp(-x));
  const T e = std::exp(x);
  return e / (T(1) + e);
}

}  // namespace detail

/// Cross-correlation with zero padding k/2 on each side. x: N x Ci x H x W, weight: Co x Ci x k x k,
/// bias: 1 x Co x 1 x 1 or null. Output spatial size (H + 2(k/2) - k) / stride + 1.
template <class T>
Var<T> conv2d(Graph<T>& g, const Var<T>& x, const Var<T>& weight, const Var<T>& bias, std::size_t stride = 1) {
  const Shape xs = x->shape, ws = weight->shape;
  if (ws.c != xs.c) throw DataError("conv2d channel mismatch: input " + xs.str() + " weight " + ws.str());
  if (ws.h != ws.w || ws.h % 2 == 0) throw DataError("conv2d needs an odd square kernel");
  if (stride != 1 && stride != 2) throw DataError("conv2d stride must be 1 or 2");
  if (bias && bias->shape.size() != ws.n) throw DataError("conv2d bias size mismatch");
  const std::size_t k = ws.h, pad = k / 2;
  const std::size_t oh = (xs.h + 2 * pad - k) / stride + 1, ow = (xs.w + 2 * pad - k) / stride + 1;
  const Shape os{xs.n, ws.n, oh, ow};
  auto out = bias ? g.output(os, x, weight, bias) : g.output(os, x, weight);
  const std::size_t ci_n = xs.c, co_n = ws.n, H = xs.h, W = xs.w;

  const T* xv = x->value.data();
  const T* wv = weight->value.data();
  T* ov = out->value.data();
  for (std::size_t n = 0; n < xs.n; ++n)
    for (std::size_t co = 0; co < co_n; ++co) {
      T* op = ov + (n * co_n + co) * oh * ow;
      const T b = bias ? bias->value[co] : T(0);
      std::fill(op, op + oh * ow, b);
      for (std::size_t ci = 0; ci < ci_n; ++ci) {
        const T* ip = xv + (n * ci_n + ci) * H * W;
        for (std::size_t ky = 0; ky < k; ++ky)
          for (std::size_t kx = 0; kx < k; ++kx) {
            const T w = wv[((co * ci_n + ci) * k + ky) * k + kx];
            const auto dy = static_cast<std::ptrdiff_t>(ky) - static_cast<std::ptrdiff_t>(pad);
            const auto dx = static_cast<std::ptrdiff_t>(kx) - static_cast<std::ptrdiff_t>(pad);
            const auto [ylo, yhi] = detail::valid_range(dy, stride, H, oh);
            const auto [xlo, xhi] = detail::valid_range(dx, stride, W, ow);
            for (std::size_t oy = ylo; oy < yhi; ++oy) {
              const T* irow = ip + static_cast<std::size_t>(static_cast<std::ptrdiff_t>(oy * stride) + dy) * W;
              T* orow = op + oy * ow;
              if (stride == 1) {
                const T* src = irow + dx;
                for (std::size_t ox = xlo; ox < xhi; ++ox) orow[ox] += w * src[ox];
              } else {
                for (std::size_t ox = xlo; ox < xhi; ++ox)
                  orow[ox] += w * irow[static_cast<std::ptrdiff_t>(ox * stride) + dx];
              }
            }
          }
      }
    }

  if (out->requires_grad) {
    Node<T>* o = out.get();
    out->backward = [=]() {
      const T* gv = o->grad.data();
      T* gx = x->requires_grad ? x->ensure_grad().data() : nullptr;
      T* gw = weight->requires_grad ? weight->ensure_grad().data() : nullptr;
      const T* xv2 = x->value.data();
      const T* wv2 = weight->value.data();
      if (bias && bias->requires_grad) {
        auto& gb = bias->ensure_grad();
        for (std::size_t n = 0; n < xs.n; ++n)
          for (std::size_t co = 0; co < co_n; ++co) {
            const T* gp = gv + (n * co_n + co) * oh * ow;
            T s = 0;
            for (std::size_t i = 0; i < oh * ow; ++i) s += gp[i];
            gb[co] += s;
          }
      }
      for (std::size_t n = 0; n < xs.n; ++n)
        for (std::size_t co = 0; co < co_n; ++co) {
          const T* gp = gv + (n * co_n + co) * oh * ow;
          for (std::size_t ci = 0; ci < ci_n; ++ci) {
            const T* ip = xv2 + (n * ci_n + ci) * H * W;
            T* gip = gx ? gx + (n * ci_n + ci) * H * W : nullptr;
            for (std::size_t ky = 0; ky < k; ++ky)
              for (std::size_t kx = 0; kx < k; ++kx) {
                const std::size_t widx = ((co * ci_n + ci) * k + ky) * k + kx;
                const T w = wv2[widx];
                const auto dy = static_cast<std::ptrdiff_t>(ky) - static_cast<std::ptrdiff_t>(pad);
                const auto dx = static_cast<std::ptrdiff_t>(kx) - static_cast<std::ptrdiff_t>(pad);
                const auto [ylo, yhi] = detail::valid_range(dy, stride, H, oh);
                const auto [xlo, xhi] = detail::valid_range(dx, stride, W, ow);
                T acc = 0;
                for (std::size_t oy = ylo; oy < yhi; ++oy) {
                  const std::size_t row = static_cast<std::size_t>(static_cast<std::ptrdiff_t>(oy * stride) + dy) * W;
                  const T* grow = gp + oy * ow;
                  if (stride == 1) {
                    if (gw) acc += detail::dot(grow + xlo, ip + row + dx + static_cast<std::ptrdiff_t>(xlo), xhi - xlo);
                    if (gip) {
                      T* dst = gip + row + dx;
                      for (std::size_t ox = xlo; ox < xhi; ++ox) dst[ox] += w * grow[ox];
                    }
                  } else {
                    for (std::size_t ox = xlo; ox < xhi; ++ox) {
                      const std::size_t col = static_cast<std::size_t>(static_cast<std::ptrdiff_t>(ox * stride) + dx);
                      if (gw) acc += grow[ox] * ip[row + col];
                      if (gip) gip[row + col] += w * grow[ox];
                    }
                  }
                }
                if (gw) gw[widx] += acc;
              }
          }
        }
    };
  }
  return out;
}

/// Concatenates along the channel axis.
template <class T>
Var<T> concat(Graph<T>& g, const std::vector<Var<T>>& xs) {
  if (xs.empty()) throw DataError("concat of nothing");
  Shape s = xs.front()->shape;
  s.c = 0;
  for (const auto& x : xs) {
    if (x->shape.n != s.n || x->shape.h != s.h || x->shape.w != s.w) throw DataError("concat shape mismatch");
    s.c += x->shape.c;
  }
  auto out = g.output_of(s, xs);
  const std::size_t plane = s.plane();
  for (std::size_t n = 0; n < s.n; ++n) {
    std::size_t c0 = 0;
    for (const auto& x : xs) {
      const std::size_t len = x->shape.c * plane;
      std::copy_n(x->value.data() + n * len, len, out->value.data() + (n * s.c + c0) * plane);
      c0 += x->shape.c;
    }
  }
  if (out->requires_grad) {
    Node<T>* o = out.get();
    out->backward = [=]() {
      for (std::size_t n = 0; n < s.n; ++n) {
        std::size_t c0 = 0;
        for (const auto& x : xs) {
          const std::size_t len = x->shape.c * plane;
          if (x->requires_grad) {
            T* dst = x->ensure_grad().data() + n * len;
            const T* src = o->grad.data() + (n * s.c + c0) * plane;
            for (std::size_t i = 0; i < len; ++i) dst[i] += src[i];
          }
          c0 += x->shape.c;
        }
      }
    };
  }
  return out;
}

/// Channels [first, first + count) of x.
template <class T>
Var<T> channel_slice(Graph<T>& g, const Var<T>& x, std::size_t first, std::size_t count) {
  const Shape xs = x->shape;
  if (first + count > xs.c || count == 0) throw DataError("channel slice out of range");
  const Shape s{xs.n, count, xs.h, xs.w};
  auto out = g.output(s, x);
  const std::size_t plane = xs.plane();
  for (std::size_t n = 0; n < xs.n; ++n)
    std::copy_n(x->value.data() + (n * xs.c + first) * plane, count * plane, out->value.data() + n * count * plane);
  if (out->requires_grad) {
    Node<T>* o = out.get();
    out->backward = [=]() {
      auto& gx = x->ensure_grad();
      for (std::size_t n = 0; n < xs.n; ++n)
        for (std::size_t i = 0; i < count * plane; ++i) gx[(n * xs.c + first) * plane + i] += o->grad[n * count * plane + i];
    };
  }
  return out;
}

template <class T>
Var<T> add(Graph<T>& g, const Var<T>& a, const Var<T>& b) {
  if (!(a->shape == b->shape)) throw DataError("add shape mismatch " + a->shape.str() + " vs " + b->shape.str());
  auto out = g.output(a->shape, a, b);
  for (std::size_t i = 0; i < out->value.size(); ++i) out->value[i] = a->value[i] + b->value[i];
  if (out->requires_grad) {
    Node<T>* o = out.get();
    out->backward = [=]() {
      for (const auto& in : {a, b})
        if (in->requires_grad) {
          auto& gi = in->ensure_grad();
          for (std::size_t i = 0; i < gi.size(); ++i) gi[i] += o->grad[i];
        }
    };
  }
  return out;
}

/// Per-sample, per-channel normalization over H x W followed by a per-channel affine map.
template <class T>
Var<T> instance_norm(Graph<T>& g, const Var<T>& x, const Var<T>& gamma, const Var<T>& beta, T eps = T(1e-5)) {
  const Shape xs = x->shape;
  if (gamma->shape.size() != xs.c || beta->shape.size() != xs.c) throw DataError("instance_norm affine size mismatch");
  auto out = g.output(xs, x, gamma, beta);
  const std::size_t plane = xs.plane();
  const auto count = static_cast<T>(plane);
  std::vector<T> xhat(xs.size()), inv_std(xs.n * xs.c);
  for (std::size_t nc = 0; nc < xs.n * xs.c; ++nc) {
    const std::size_t c = nc % xs.c;
    const T* xp = x->value.data() + nc * plane;
    T mean = 0;
    for (std::size_t i = 0; i < plane; ++i) mean += xp[i];
    mean /= count;
    T var = 0;
    for (std::size_t i = 0; i < plane; ++i) var += (xp[i] - mean) * (xp[i] - mean);
    var /= count;
    const T is = T(1) / std::sqrt(var + eps);
    inv_std[nc] = is;
    for (std::size_t i = 0; i < plane; ++i) {
      const T h = (xp[i] - mean) * is;
      xhat[nc * plane + i] = h;
      out->value[nc * plane + i] = gamma->value[c] * h + beta->value[c];
    }
  }
  if (out->requires_grad) {
    Node<T>* o = out.get();
    out->backward = [=, xhat = std::move(xhat), inv_std = std::move(inv_std)]() {
      for (std::size_t nc = 0; nc < xs.n * xs.c; ++nc) {
        const std::size_t c = nc % xs.c;
        const T* gp = o->grad.data() + nc * plane;
        const T* hp = xhat.data() + nc * plane;
        T sg = 0, sgh = 0;
        for (std::size_t i = 0; i < plane; ++i) {
          sg += gp[i];
          sgh += gp[i] * hp[i];
        }
        if (gamma->requires_grad) gamma->ensure_grad()[c] += sgh;
        if (beta->requires_grad) beta->ensure_grad()[c] += sg;
        if (x->requires_grad) {
          T* gx = x->ensure_grad().data() + nc * plane;
          const T gm = gamma->value[c];
          const T mg = sg / count, mgh = sgh / count;
          for (std::size_t i = 0; i < plane; ++i) gx[i] += gm * inv_std[nc] * (gp[i] - mg - hp[i] * mgh);
        }
      }
    };
  }
  return out;
}

/// x * sigmoid(x).
template <class T>
Var<T> silu(Graph<T>& g, const Var<T>& x) {
  auto out = g.output(x->shape, x);
  for (std::size_t i = 0; i < x->value.size(); ++i) out->value[i] = x->value[i] * detail::sigmoid(x->value[i]);
  if (out->requires_grad) {
    Node<T>* o = out.get();
    out->backward = [=]() {
      auto& gx = x->ensure_grad();
      for (std::size_t i = 0; i < gx.size(); ++i) {
        const T v = x->value[i], s = detail::sigmoid(v);
        gx[i] += o->grad[i] * s * (T(1) + v * (T(1) - s));
      }
    };
  }
  return out;
}

/// Nearest-neighbour 2x upsampling.
template <class T>
Var<T> upsample2x(Graph<T>& g, const Var<T>& x) {
  const Shape xs = x->shape;
  const Shape s{xs.n, xs.c, xs.h * 2, xs.w * 2};
  auto out = g.output(s, x);
  for (std::size_t nc = 0; nc < xs.n * xs.c; ++nc)
    for (std::size_t y = 0; y < s.h; ++y)
      for (std::size_t xx = 0; xx < s.w; ++xx)
        out->value[(nc * s.h + y) * s.w + xx] = x->value[(nc * xs.h + y / 2) * xs.w + xx / 2];
  if (out->requires_grad) {
    Node<T>* o = out.get();
    out->backward = [=]() {
      auto& gx = x->ensure_grad();
      for (std::size_t nc = 0; nc < xs.n * xs.c; ++nc)
        for (std::size_t y = 0; y < s.h; ++y)
          for (std::size_t xx = 0; xx < s.w; ++xx)
            gx[(nc * xs.h + y / 2) * xs.w + xx / 2] += o->grad[(nc * s.h + y) * s.w + xx];
    };
  }
  return out;
}

/// lo + sigmoid(x) * (hi - lo), elementwise.
template <class T>
Var<T> scaled_sigmoid_head(Graph<T>& g, const Var<T>& x, T lo, T hi) {
  if (!(lo < hi)) throw ConfigError("scaled sigmoid needs lo < hi");
  auto out = g.output(x->shape, x);
  for (std::size_t i = 0; i < x->value.size(); ++i) out->value[i] = lo + detail::sigmoid(x->value[i]) * (hi - lo);
  if (out->requires_grad) {
    Node<T>* o = out.get();
    out->backward = [=]() {
      auto& gx = x->ensure_grad();
      for (std::size_t i = 0; i < gx.size(); ++i) {
        const T s = detail::sigmoid(x->value[i]);
        gx[i] += o->grad[i] * s * (T(1) - s) * (hi - lo);
      }
    };
  }
  return out;
}

/// (1 + max(0, x)) * s1, elementwise. The subgradient of max at 0 is 0.
template <class T>
Var<T> s0_head(Graph<T>& g, const Var<T>& x, const Var<T>& s1) {
  if (!(x->shape == s1->shape)) throw DataError("s0_head shape mismatch");
  auto out = g.output(x->shape, x, s1);
  for (std::size_t i = 0; i < x->value.size(); ++i) out->value[i] = (T(1) + std::max(T(0), x->value[i])) * s1->value[i];
  if (out->requires_grad) {
    Node<T>* o = out.get();
    out->backward = [=]() {
      if (x->requires_grad) {
        auto& gx = x->ensure_grad();
        for (std::size_t i = 0; i < gx.size(); ++i)
          if (x->value[i] > T(0)) gx[i] += o->grad[i] * s1->value[i];
      }
      if (s1->requires_grad) {
        auto& gs = s1->ensure_grad();
        for (std::size_t i = 0; i < gs.size(); ++i) gs[i] += o->grad[i] * (T(1) + std::max(T(0), x->value[i]));
      }
    };
  }
  return out;
}

/// S_i = s0 * exp(-(b_i * adc_unit) * adc) for adc, s0 of shape N x 1 x H x W; output N x n_b x H x W.
/// adc_unit converts the adc tensor to mm^2/s (1 when it already is).
template <class T>
Var<T> mono_layer(Graph<T>& g, const Var<T>& adc, const Var<T>& s0, const std::vector<double>& b_values,
                  double adc_unit = 1.0) {
  const Shape as = adc->shape;
  if (!(as == s0->shape) || as.c != 1) throw DataError("mono_layer expects matching single-channel adc and s0");
  const std::size_t nb = b_values.size(), plane = as.plane();
  auto out = g.output(Shape{as.n, nb, as.h, as.w}, adc, s0);
  std::vector<T> bs(nb);
  for (std::size_t i = 0; i < nb; ++i) bs[i] = static_cast<T>(b_values[i] * adc_unit);
  for (std::size_t n = 0; n < as.n; ++n)
    for (std::size_t i = 0; i < nb; ++i)
      for (std::size_t p = 0; p < plane; ++p)
        out->value[(n * nb + i) * plane + p] = s0->value[n * plane + p] * std::exp(-bs[i] * adc->value[n * plane + p]);
  if (out->requires_grad) {
    Node<T>* o = out.get();
    out->backward = [=]() {
      for (std::size_t n = 0; n < as.n; ++n)
        for (std::size_t i = 0; i < nb; ++i)
          for (std::size_t p = 0; p < plane; ++p) {
            const std::size_t oi = (n * nb + i) * plane + p, pi = n * plane + p;
            const T gr = o->grad[oi];
            if (adc->requires_grad) adc->ensure_grad()[pi] += gr * (-bs[i]) * o->value[oi];
            if (s0->requires_grad) s0->ensure_grad()[pi] += gr * std::exp(-bs[i] * adc->value[pi]);
          }
    };
  }
  return out;
}

/// Mean absolute difference over all elements, against an untracked target. Subgradient 0 at ties.
template <class T>
Var<T> l1_loss(Graph<T>& g, const Var<T>& pred, const Var<T>& target) {
  if (!(pred->shape == target->shape)) throw DataError("l1_loss shape mismatch " + pred->shape.str() + " vs " + target->shape.str());
  auto out = g.output(Shape{}, pred, target);
  const std::size_t n = pred->value.size();
  T s = 0;
  for (std::size_t i = 0; i < n; ++i) s += std::abs(pred->value[i] - target->value[i]);
  out->value[0] = s / static_cast<T>(n);
  if (out->requires_grad) {
    Node<T>* o = out.get();
    out->backward = [=]() {
      const T scale = o->grad[0] / static_cast<T>(n);
      for (const auto& [v, sign] : {std::pair{pred, T(1)}, std::pair{target, T(-1)}}) {
        if (!v->requires_grad) continue;
        auto& gv = v->ensure_grad();
        for (std::size_t i = 0; i < n; ++i) {
          const T d = pred->value[i] - target->value[i];
          if (d > T(0)) gv[i] += sign * scale;
          else if (d < T(0)) gv[i] -= sign * scale;
        }
      }
    };
  }
  return out;
}

/// sum_i w_i * s_i over scalar nodes.
template <class T>
Var<T> weighted_sum(Graph<T>& g, const std::vector<std::pair<T, Var<T>>>& terms) {
  std::vector<Var<T>> ins;
  for (const auto& [w, v] : terms) {
    if (v->shape.size() != 1) throw DataError("weighted_sum needs scalar terms");
    ins.push_back(v);
  }
  auto out = g.output_of(Shape{}, ins);
  T s = 0;
  for (const auto& [w, v] : terms) s += w * v->value[0];
  out->value[0] = s;
  if (out->requires_grad) {
    Node<T>* o = out.get();
    out->backward = [=]() {
      for (const auto& [w, v] : terms)
        if (v->requires_grad) v->ensure_grad()[0] += w * o->grad[0];
    };
  }
  return out;
}

/// sum_i coeffs_i * x_i: a scalar probe used to test gradients of non-scalar ops.
template <class T>
Var<T> dot_const(Graph<T>& g, const Var<T>& x, std::vector<T> coeffs) {
  if (coeffs.size() != x->value.size()) throw DataError("dot_const size mismatch");
  auto out = g.output(Shape{}, x);
  out->value[0] = detail::dot(x->value.data(), coeffs.data(), coeffs.size());
  if (out->requires_grad) {
    Node<T>* o = out.get();
    out->backward = [=, coeffs = std::move(coeffs)]() {
      auto& gx = x->ensure_grad();
      for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += coeffs[i] * o->grad[0];
    };
  }
  return out;
}

}  // namespace rdwi::nn
