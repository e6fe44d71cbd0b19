#pragma once

// Capsule primitives: squash nonlinearity, primary-capsule formation,
// routing-by-agreement, and the margin loss. dynamic_routing builds the
// unrolled iteration out of differentiable ops, so gradients flow through
// every routing step.

#include <cmath>
#include <memory>
#include <string>
#include <vector>

#include "capskan/layers.hpp"
#include "capskan/ops.hpp"
#include "capskan/tensor.hpp"

namespace capskan {

// v' = (|v|^2 / (1+|v|^2)) * (v / (|v|+eps)) over the last axis: direction
// preserved, norm squashed into [0,1).
template <class T>
Tensor<T> squash(const Tensor<T>& v, T eps = T(1e-8)) {
  if (v.rank() < 1) throw std::invalid_argument("squash: rank-0 input");
  const std::size_t D = v.dim(v.rank() - 1);
  const std::size_t rows = v.size() / D;
  const T* in = v.values().data();
  auto alphas = std::make_shared<std::vector<T>>(rows);
  auto norms = std::make_shared<std::vector<T>>(rows);
  std::vector<T> out(v.size());
  for (std::size_t r = 0; r < rows; ++r) {
    const T* row = in + r * D;
    const T n2 = kern::dot(row, row, D);
    const T n = std::sqrt(n2);
    const T alpha = n2 / ((T(1) + n2) * (n + eps));
    (*alphas)[r] = alpha;
    (*norms)[r] = n;
    kern::scale(row, alpha, out.data() + r * D, D);
  }
  auto pv = v.node();
  return detail::make_op<T>(
      v.shape(), std::move(out), "squash", {v},
      [pv, alphas, norms, rows, D, eps](detail::Node<T>& nd) {
        if (!pv->requires_grad) return;
        pv->ensure_grad();
        for (std::size_t r = 0; r < rows; ++r) {
          const T* vr = pv->value.data() + r * D;
          const T* gr = nd.grad.data() + r * D;
          const T n = (*norms)[r];
          const T alpha = (*alphas)[r];
          if (n <= T(0)) continue;  // d squash / dv -> 0 at the origin
          // alpha(n) = n^2 / Dn, Dn = (1+n^2)(n+eps)
          const T Dn = (T(1) + n * n) * (n + eps);
          const T Dprime = T(2) * n * (n + eps) + (T(1) + n * n);
          const T dalpha = (T(2) * n * Dn - n * n * Dprime) / (Dn * Dn);
          const T gv = kern::dot(gr, vr, D);
          const T coef = dalpha / n * gv;
          for (std::size_t d = 0; d < D; ++d) pv->grad[r * D + d] += alpha * gr[d] + coef * vr[d];
        }
      });
}

// Regroup a feature volume [N,C,H,W] into capsules [N, C*H*W/caps_dim,
// caps_dim], then squash each capsule.
template <class T>
Tensor<T> primary_caps(const Tensor<T>& features, std::size_t caps_dim) {
  if (features.rank() != 4)
    throw std::invalid_argument("primary_caps: features must be [N,C,H,W], got " +
                                shape_str(features.shape()));
  if (caps_dim == 0) throw std::invalid_argument("primary_caps: caps_dim must be positive");
  const std::size_t volume = features.dim(1) * features.dim(2) * features.dim(3);
  if (volume % caps_dim != 0)
    throw std::invalid_argument("primary_caps: feature volume " + std::to_string(volume) +
                                " is not divisible by caps_dim " + std::to_string(caps_dim) +
                                "; choose caps_dim dividing " + std::to_string(volume));
  return squash(reshape(features, {features.dim(0), volume / caps_dim, caps_dim}));
}

// Prediction vectors u_hat[b,i,j,:] = W[i,j,:,:] * u[b,i,:].
template <class T>
Tensor<T> capsule_transform(const Tensor<T>& u, const Tensor<T>& W) {
  if (u.rank() != 3 || W.rank() != 4)
    throw std::invalid_argument("capsule_transform: expected u[B,I,Din], W[I,J,Dout,Din]");
  const std::size_t B = u.dim(0), I = u.dim(1), Din = u.dim(2);
  const std::size_t J = W.dim(1), Dout = W.dim(2);
  if (W.dim(0) != I || W.dim(3) != Din)
    throw std::invalid_argument("capsule_transform: u " + shape_str(u.shape()) +
                                " does not match W " + shape_str(W.shape()));
  std::vector<T> out(B * I * J * Dout);
  const T* uv = u.values().data();
  const T* wv = W.values().data();
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t i = 0; i < I; ++i) {
      const T* urow = uv + (b * I + i) * Din;
      const T* wbase = wv + i * J * Dout * Din;
      T* obase = out.data() + ((b * I + i) * J) * Dout;
      for (std::size_t jo = 0; jo < J * Dout; ++jo)
        obase[jo] = kern::dot(wbase + jo * Din, urow, Din);
    }
  auto pu = u.node(), pw = W.node();
  return detail::make_op<T>(
      {B, I, J, Dout}, std::move(out), "capsule_transform", {u, W},
      [pu, pw, B, I, J, Din, Dout](detail::Node<T>& nd) {
        if (pu->requires_grad) pu->ensure_grad();
        if (pw->requires_grad) pw->ensure_grad();
        for (std::size_t b = 0; b < B; ++b)
          for (std::size_t i = 0; i < I; ++i) {
            const T* urow = pu->value.data() + (b * I + i) * Din;
            const T* gbase = nd.grad.data() + ((b * I + i) * J) * Dout;
            for (std::size_t jo = 0; jo < J * Dout; ++jo) {
              const T g = gbase[jo];
              if (g == T(0)) continue;
              if (pw->requires_grad)
                kern::axpy(g, urow, pw->grad.data() + (i * J * Dout + jo) * Din, Din);
              if (pu->requires_grad)
                kern::axpy(g, pw->value.data() + (i * J * Dout + jo) * Din,
                           pu->grad.data() + (b * I + i) * Din, Din);
            }
          }
      });
}

// s[b,j,:] = sum_i c[b,i,j] * u_hat[b,i,j,:]
template <class T>
Tensor<T> coupling_sum(const Tensor<T>& c, const Tensor<T>& uhat) {
  if (c.rank() != 3 || uhat.rank() != 4)
    throw std::invalid_argument("coupling_sum: expected c[B,I,J], u_hat[B,I,J,D]");
  const std::size_t B = c.dim(0), I = c.dim(1), J = c.dim(2), D = uhat.dim(3);
  if (uhat.dim(0) != B || uhat.dim(1) != I || uhat.dim(2) != J)
    throw std::invalid_argument("coupling_sum: c " + shape_str(c.shape()) +
                                " does not match u_hat " + shape_str(uhat.shape()));
  std::vector<T> out(B * J * D, T(0));
  const T* cv = c.values().data();
  const T* uv = uhat.values().data();
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t i = 0; i < I; ++i)
      for (std::size_t j = 0; j < J; ++j)
        kern::axpy(cv[(b * I + i) * J + j], uv + (((b * I + i) * J) + j) * D,
                   out.data() + (b * J + j) * D, D);
  auto pc = c.node(), pu = uhat.node();
  return detail::make_op<T>(
      {B, J, D}, std::move(out), "coupling_sum", {c, uhat},
      [pc, pu, B, I, J, D](detail::Node<T>& nd) {
        if (pc->requires_grad) pc->ensure_grad();
        if (pu->requires_grad) pu->ensure_grad();
        for (std::size_t b = 0; b < B; ++b)
          for (std::size_t i = 0; i < I; ++i)
            for (std::size_t j = 0; j < J; ++j) {
              const T* g = nd.grad.data() + (b * J + j) * D;
              const std::size_t uix = (((b * I + i) * J) + j) * D;
              if (pc->requires_grad)
                pc->grad[(b * I + i) * J + j] += kern::dot(g, pu->value.data() + uix, D);
              if (pu->requires_grad)
                kern::axpy(pc->value[(b * I + i) * J + j], g, pu->grad.data() + uix, D);
            }
      });
}

// a[b,i,j] = u_hat[b,i,j,:] . v[b,j,:]  (agreement logit update)
template <class T>
Tensor<T> routing_agreement(const Tensor<T>& uhat, const Tensor<T>& v) {
  if (uhat.rank() != 4 || v.rank() != 3)
    throw std::invalid_argument("routing_agreement: expected u_hat[B,I,J,D], v[B,J,D]");
  const std::size_t B = uhat.dim(0), I = uhat.dim(1), J = uhat.dim(2), D = uhat.dim(3);
  if (v.dim(0) != B || v.dim(1) != J || v.dim(2) != D)
    throw std::invalid_argument("routing_agreement: u_hat " + shape_str(uhat.shape()) +
                                " does not match v " + shape_str(v.shape()));
  std::vector<T> out(B * I * J);
  const T* uv = uhat.values().data();
  const T* vv = v.values().data();
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t i = 0; i < I; ++i)
      for (std::size_t j = 0; j < J; ++j)
        out[(b * I + i) * J + j] =
            kern::dot(uv + (((b * I + i) * J) + j) * D, vv + (b * J + j) * D, D);
  auto pu = uhat.node(), pv = v.node();
  return detail::make_op<T>(
      {B, I, J}, std::move(out), "routing_agreement", {uhat, v},
      [pu, pv, B, I, J, D](detail::Node<T>& nd) {
        if (pu->requires_grad) pu->ensure_grad();
        if (pv->requires_grad) pv->ensure_grad();
        for (std::size_t b = 0; b < B; ++b)
          for (std::size_t i = 0; i < I; ++i)
            for (std::size_t j = 0; j < J; ++j) {
              const T g = nd.grad[(b * I + i) * J + j];
              if (g == T(0)) continue;
              const std::size_t uix = (((b * I + i) * J) + j) * D;
              if (pu->requires_grad)
                kern::axpy(g, pv->value.data() + (b * J + j) * D, pu->grad.data() + uix, D);
              if (pv->requires_grad)
                kern::axpy(g, pu->value.data() + uix, pv->grad.data() + (b * J + j) * D, D);
            }
      });
}

template <class T>
class RoutingLayer;

template <class T>
Tensor<T> dynamic_routing(const Tensor<T>& u, const RoutingLayer<T>& layer);

// Trainable transform W[num_in, num_out, out_dim, in_dim] plus the routing
// iteration count.
template <class T>
class RoutingLayer : public Module<T> {
 public:
  RoutingLayer(std::size_t num_in, std::size_t num_out, std::size_t in_dim, std::size_t out_dim,
               std::size_t iterations, Rng& rng)
      : num_in_(num_in),
        num_out_(num_out),
        in_dim_(in_dim),
        out_dim_(out_dim),
        iterations_(iterations),
        W_(Tensor<T>::zeros({num_in, num_out, out_dim, in_dim}, true)) {
    if (iterations == 0) throw std::invalid_argument("RoutingLayer: iterations must be >= 1");
    if (num_in == 0 || num_out == 0 || in_dim == 0 || out_dim == 0)
      throw std::invalid_argument("RoutingLayer: zero-sized capsule layout");
    auto wv = W_.values_mut();
    // Fan-in-scaled init keeps prediction-vector magnitudes comparable to the
    // input capsules, so output lengths stay input-dependent from the start
    // (a flat N(0, 0.1) start lets margin loss collapse to its
    // input-independent fixed point on deeper routing stacks).
    const double stddev = 1.0 / std::sqrt(static_cast<double>(in_dim));
    for (auto& w : wv) w = static_cast<T>(rng.normal(0.0, stddev));
  }

  std::size_t num_in() const { return num_in_; }
  std::size_t num_out() const { return num_out_; }
  std::size_t in_dim() const { return in_dim_; }
  std::size_t out_dim() const { return out_dim_; }
  std::size_t iterations() const { return iterations_; }
  Tensor<T>& W() { return W_; }
  const Tensor<T>& W() const { return W_; }

  Tensor<T> forward(const Tensor<T>& x, bool, Rng&) override { return dynamic_routing(x, *this); }
  void register_params(const std::string& prefix, ParamRegistry<T>& out) override {
    out.push_back({prefix + ".W", W_, true});
  }

 private:
  std::size_t num_in_, num_out_, in_dim_, out_dim_, iterations_;
  Tensor<T> W_;
};

// Routing by agreement, unrolled: b = 0; repeat r times { c = softmax_j(b);
// s_j = sum_i c_ij u_hat_j|i; v = squash(s); b += u_hat . v } with the logit
// update skipped after the final iteration.
template <class T>
Tensor<T> dynamic_routing(const Tensor<T>& u, const RoutingLayer<T>& layer) {
  if (u.rank() != 3)
    throw std::invalid_argument("dynamic_routing: input must be [B, num_in, in_dim], got " +
                                shape_str(u.shape()));
  if (u.dim(1) != layer.num_in() || u.dim(2) != layer.in_dim())
    throw std::invalid_argument(
        "dynamic_routing: input " + shape_str(u.shape()) + " does not match layer (num_in=" +
        std::to_string(layer.num_in()) + ", in_dim=" + std::to_string(layer.in_dim()) + ")");
  const std::size_t B = u.dim(0);
  Tensor<T> uhat = capsule_transform(u, layer.W());
  Tensor<T> logits = Tensor<T>::zeros({B, layer.num_in(), layer.num_out()}, false);
  Tensor<T> v;
  for (std::size_t it = 0; it < layer.iterations(); ++it) {
    Tensor<T> c = softmax(logits, 2);
    Tensor<T> s = coupling_sum(c, uhat);
    v = squash(s);
    if (it + 1 < layer.iterations()) logits = add(logits, routing_agreement(uhat, v));
  }
  return v;
}

// Class score = Euclidean norm of each class capsule.
template <class T>
Tensor<T> class_probabilities(const Tensor<T>& v) {
  if (v.rank() != 3)
    throw std::invalid_argument("class_probabilities: expected [B, K, d], got " +
                                shape_str(v.shape()));
  const std::size_t B = v.dim(0), K = v.dim(1), D = v.dim(2);
  std::vector<T> out(B * K);
  const T* vv = v.values().data();
  for (std::size_t r = 0; r < B * K; ++r)
    out[r] = std::sqrt(kern::dot(vv + r * D, vv + r * D, D));
  auto lengths = std::make_shared<std::vector<T>>(out);
  auto pv = v.node();
  return detail::make_op<T>({B, K}, std::move(out), "class_probabilities", {v},
                            [pv, lengths, D](detail::Node<T>& nd) {
                              if (!pv->requires_grad) return;
                              pv->ensure_grad();
                              for (std::size_t r = 0; r < nd.grad.size(); ++r) {
                                const T len = (*lengths)[r];
                                if (len <= T(0)) continue;
                                kern::axpy(nd.grad[r] / len, pv->value.data() + r * D,
                                           pv->grad.data() + r * D, D);
                              }
                            });
}

template <class T>
Tensor<T> one_hot(const std::vector<int>& labels, std::size_t num_classes) {
  std::vector<T> v(labels.size() * num_classes, T(0));
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (labels[i] < 0 || static_cast<std::size_t>(labels[i]) >= num_classes)
      throw std::invalid_argument("one_hot: label " + std::to_string(labels[i]) +
                                  " out of range for " + std::to_string(num_classes) +
                                  " classes");
    v[i * num_classes + static_cast<std::size_t>(labels[i])] = T(1);
  }
  return Tensor<T>::from({labels.size(), num_classes}, std::move(v), false);
}

// L = mean_b sum_k [ T_k max(0, m+ - l_k)^2 + lambda (1-T_k) max(0, l_k - m-)^2 ]
template <class T>
Tensor<T> margin_loss(const Tensor<T>& lengths, const Tensor<T>& target_one_hot,
                      T m_plus = T(0.9), T m_minus = T(0.1), T lambda = T(0.5)) {
  if (lengths.rank() != 2 || target_one_hot.shape() != lengths.shape())
    throw std::invalid_argument("margin_loss: lengths " + shape_str(lengths.shape()) +
                                " vs targets " + shape_str(target_one_hot.shape()));
  const std::size_t B = lengths.dim(0), K = lengths.dim(1);
  const T* lv = lengths.values().data();
  const T* tv = target_one_hot.values().data();
  T loss = T(0);
  for (std::size_t i = 0; i < B * K; ++i) {
    const T pos = std::max(T(0), m_plus - lv[i]);
    const T neg = std::max(T(0), lv[i] - m_minus);
    loss += tv[i] * pos * pos + lambda * (T(1) - tv[i]) * neg * neg;
  }
  loss /= static_cast<T>(B);
  auto pl = lengths.node();
  auto pt = target_one_hot.node();
  return detail::make_op<T>(
      {1}, {loss}, "margin_loss", {lengths},
      [pl, pt, B, K, m_plus, m_minus, lambda](detail::Node<T>& nd) {
        if (!pl->requires_grad) return;
        pl->ensure_grad();
        const T g = nd.grad[0] / static_cast<T>(B);
        for (std::size_t i = 0; i < B * K; ++i) {
          const T t = pt->value[i];
          const T l = pl->value[i];
          T d = T(0);
          if (t > T(0) && l < m_plus) d -= T(2) * t * (m_plus - l);
          if (l > m_minus) d += T(2) * lambda * (T(1) - t) * (l - m_minus);
          pl->grad[i] += g * d;
        }
      });
}

}  // namespace capskan
