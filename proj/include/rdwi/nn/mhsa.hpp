#pragma once

// Multi-head self-attention over spatial positions with decomposed relative position embeddings.

#include <cmath>
#include <vector>

#include "rdwi/nn/ops.hpp"

namespace rdwi::nn {

namespace detail {

// Row-major P x P softmax of logits q_p . (k_p' + r_p') for one (sample, head).
// q, k: channel-major d x P slices; r: d x P.
template <class T>
void attention_probs(const T* q, const T* k, const std::vector<T>& r, std::size_t d, std::size_t P, std::vector<T>& a) {
  a.assign(P * P, T(0));
  for (std::size_t p = 0; p < P; ++p) {
    T* row = &a[p * P];
    for (std::size_t c = 0; c < d; ++c) {
      const T qv = q[c * P + p];
      const T* kc = k + c * P;
      const T* rc = &r[c * P];
      for (std::size_t s = 0; s < P; ++s) row[s] += qv * (kc[s] + rc[s]);
    }
    T mx = row[0];
    for (std::size_t s = 1; s < P; ++s) mx = std::max(mx, row[s]);
    T z = 0;
    for (std::size_t s = 0; s < P; ++s) {
      row[s] = std::exp(row[s] - mx);
      z += row[s];
    }
    for (std::size_t s = 0; s < P; ++s) row[s] /= z;
  }
}

// r[c * P + y * W + x] = rel_h[c * H + y] + rel_w[c * W + x]
template <class T>
std::vector<T> position_table(const std::vector<T>& rel_h, const std::vector<T>& rel_w, std::size_t d, std::size_t H,
                              std::size_t W) {
  std::vector<T> r(d * H * W);
  for (std::size_t c = 0; c < d; ++c)
    for (std::size_t y = 0; y < H; ++y)
      for (std::size_t x = 0; x < W; ++x) r[(c * H + y) * W + x] = rel_h[c * H + y] + rel_w[c * W + x];
  return r;
}

}  // namespace detail

/// Attention core. q, k, v: N x C x H x W with C = heads * d; rel_h: 1 x d x H x 1; rel_w: 1 x d x 1 x W
/// (shared by all heads). Per head: out_p = sum_p' softmax_p'(q_p . (k_p' + r_p')) v_p'.
/// Logits are not rescaled by 1/sqrt(d).
template <class T>
Var<T> attention(Graph<T>& g, const Var<T>& q, const Var<T>& k, const Var<T>& v, const Var<T>& rel_h,
                 const Var<T>& rel_w, std::size_t heads) {
  const Shape s = q->shape;
  if (!(k->shape == s) || !(v->shape == s)) throw DataError("attention q/k/v shape mismatch");
  if (heads == 0 || s.c % heads != 0) throw ConfigError("attention channels must be divisible by heads");
  const std::size_t d = s.c / heads, H = s.h, W = s.w, P = H * W;
  if (rel_h->shape.size() != d * H || rel_w->shape.size() != d * W) throw DataError("position embedding shape mismatch");
  auto out = g.output_of(s, {q, k, v, rel_h, rel_w});
  const auto r = detail::position_table(rel_h->value, rel_w->value, d, H, W);
  std::vector<T> probs(s.n * heads * P * P);
  std::vector<T> a;
  for (std::size_t n = 0; n < s.n; ++n)
    for (std::size_t h = 0; h < heads; ++h) {
      const std::size_t off = (n * s.c + h * d) * P;
      detail::attention_probs(q->value.data() + off, k->value.data() + off, r, d, P, a);
      std::copy(a.begin(), a.end(), probs.begin() + static_cast<std::ptrdiff_t>((n * heads + h) * P * P));
      for (std::size_t c = 0; c < d; ++c) {
        const T* vc = v->value.data() + off + c * P;
        T* oc = out->value.data() + off + c * P;
        for (std::size_t p = 0; p < P; ++p) oc[p] = detail::dot(&a[p * P], vc, P);
      }
    }
  if (out->requires_grad) {
    Node<T>* o = out.get();
    out->backward = [=, probs = std::move(probs), r = std::move(r)]() {
      std::vector<T> da(P * P), dl(P * P), dr(d * P, T(0));
      for (std::size_t n = 0; n < s.n; ++n)
        for (std::size_t h = 0; h < heads; ++h) {
          const std::size_t off = (n * s.c + h * d) * P;
          const T* A = &probs[(n * heads + h) * P * P];
          const T* go = o->grad.data() + off;
          const T* qv = q->value.data() + off;
          const T* kv = k->value.data() + off;
          const T* vv = v->value.data() + off;
          // dA[p][s] = sum_c dout[c][p] v[c][s]
          std::fill(da.begin(), da.end(), T(0));
          for (std::size_t c = 0; c < d; ++c)
            for (std::size_t p = 0; p < P; ++p) {
              const T gpc = go[c * P + p];
              for (std::size_t t = 0; t < P; ++t) da[p * P + t] += gpc * vv[c * P + t];
            }
          if (v->requires_grad) {
            T* gv = v->ensure_grad().data() + off;
            for (std::size_t c = 0; c < d; ++c)
              for (std::size_t p = 0; p < P; ++p) {
                const T gpc = go[c * P + p];
                for (std::size_t t = 0; t < P; ++t) gv[c * P + t] += A[p * P + t] * gpc;
              }
          }
          // Softmax backward: dL = A * (dA - sum_t A dA)
          for (std::size_t p = 0; p < P; ++p) {
            const T inner = detail::dot(&A[p * P], &da[p * P], P);
            for (std::size_t t = 0; t < P; ++t) dl[p * P + t] = A[p * P + t] * (da[p * P + t] - inner);
          }
          T* gq = q->requires_grad ? q->ensure_grad().data() + off : nullptr;
          T* gk = k->requires_grad ? k->ensure_grad().data() + off : nullptr;
          for (std::size_t c = 0; c < d; ++c)
            for (std::size_t p = 0; p < P; ++p) {
              const T qpc = qv[c * P + p];
              T accq = 0;
              for (std::size_t t = 0; t < P; ++t) {
                const T l = dl[p * P + t];
                accq += l * (kv[c * P + t] + r[c * P + t]);
                if (gk) gk[c * P + t] += l * qpc;
                dr[c * P + t] += l * qpc;
              }
              if (gq) gq[c * P + p] += accq;
            }
        }
      if (rel_h->requires_grad || rel_w->requires_grad) {
        for (std::size_t c = 0; c < d; ++c)
          for (std::size_t y = 0; y < H; ++y)
            for (std::size_t x = 0; x < W; ++x) {
              const T gr = dr[(c * H + y) * W + x];
              if (rel_h->requires_grad) rel_h->ensure_grad()[c * H + y] += gr;
              if (rel_w->requires_grad) rel_w->ensure_grad()[c * W + x] += gr;
            }
      }
    };
  }
  return out;
}

/// Attention weights of `attention` for inspection: (N * heads) blocks of P x P row-stochastic matrices.
template <class T>
std::vector<T> attention_weights(const Var<T>& q, const Var<T>& k, const Var<T>& rel_h, const Var<T>& rel_w,
                                 std::size_t heads) {
  const Shape s = q->shape;
  const std::size_t d = s.c / heads, P = s.plane();
  const auto r = detail::position_table(rel_h->value, rel_w->value, d, s.h, s.w);
  std::vector<T> all, a;
  for (std::size_t n = 0; n < s.n; ++n)
    for (std::size_t h = 0; h < heads; ++h) {
      const std::size_t off = (n * s.c + h * d) * P;
      detail::attention_probs(q->value.data() + off, k->value.data() + off, r, d, P, a);
      all.insert(all.end(), a.begin(), a.end());
    }
  return all;
}

/// Parameters of one self-attention layer over C channels at an H x W bottleneck.
template <class T>
struct MhsaParams {
  Var<T> wq, wk, wv, wo, bo;  // 1x1 projections; only the output projection has a bias
  Var<T> rel_h, rel_w;
  std::size_t heads = 1;
};

/// Projects x to q, k, v with 1x1 convolutions, attends per head, concatenates heads and projects.
template <class T>
Var<T> mhsa(Graph<T>& g, const Var<T>& x, const MhsaParams<T>& p) {
  if (p.heads == 0 || x->shape.c % p.heads != 0) throw ConfigError("mhsa channels must be divisible by heads");
  const Var<T> none;
  auto q = conv2d(g, x, p.wq, none);
  auto k = conv2d(g, x, p.wk, none);
  auto v = conv2d(g, x, p.wv, none);
  auto att = attention(g, q, k, v, p.rel_h, p.rel_w, p.heads);
  return conv2d(g, att, p.wo, p.bo);
}

}  // namespace rdwi::nn
