#pragma once

// Network layers: the KAN layer (learnable-spline analogue of Linear), the
// ConvKAN block, and the standard supporting layers. All layers expose their
// parameters through a flat named registry the optimizer and checkpoints
// consume.
//
// Spline storage note: KanLayer and the per-channel spline stage conceptually
// hold a grid of independent SplineActivations, but store the parameters
// stacked (coeffs [..., G+k], w_b, w_s) and evaluate them in one fused op so
// a 64-image batch doesn't allocate thousands of graph nodes. activation()/
// set_activation() translate between the two views.

#include <cmath>
#include <memory>
#include <string>
#include <vector>

#include "capskan/bspline.hpp"
#include "capskan/ops.hpp"
#include "capskan/rng.hpp"
#include "capskan/tensor.hpp"

namespace capskan {

template <class T>
struct ParamEntry {
  std::string name;
  Tensor<T> tensor;      // shared handle; optimizer updates in place
  bool trainable = true; // false for batch-norm running statistics
};

template <class T>
using ParamRegistry = std::vector<ParamEntry<T>>;

template <class T>
class Module {
 public:
  virtual ~Module() = default;
  virtual Tensor<T> forward(const Tensor<T>& x, bool training, Rng& rng) = 0;
  virtual void register_params(const std::string& prefix, ParamRegistry<T>& out) = 0;
};

// ---------------------------------------------------------------------------
// Dropout and batch normalization (functional forms + modules)
// ---------------------------------------------------------------------------

// Inverted dropout: training mode zeroes each element with probability
// `rate` and scales survivors by 1/(1-rate); eval mode is the identity.
template <class T>
Tensor<T> dropout_forward(const Tensor<T>& x, double rate, bool training, Rng& rng) {
  if (rate < 0.0 || rate >= 1.0)
    throw std::invalid_argument("dropout: rate must lie in [0,1), got " + std::to_string(rate));
  if (!training || rate == 0.0) return x;
  const T scale = static_cast<T>(1.0 / (1.0 - rate));
  auto mask = std::make_shared<std::vector<T>>(x.size());
  std::vector<T> out(x.size());
  const T* in = x.values().data();
  for (std::size_t i = 0; i < out.size(); ++i) {
    const T m = rng.uniform() < rate ? T(0) : scale;
    (*mask)[i] = m;
    out[i] = in[i] * m;
  }
  auto px = x.node();
  return detail::make_op<T>(x.shape(), std::move(out), "dropout", {x},
                            [px, mask](detail::Node<T>& n) {
                              if (!px->requires_grad) return;
                              px->ensure_grad();
                              std::vector<T> tmp(mask->size());
                              kern::mul(n.grad.data(), mask->data(), tmp.data(), tmp.size());
                              kern::add(px->grad.data(), tmp.data(), px->grad.data(), tmp.size());
                            });
}

template <class T>
class Dropout : public Module<T> {
 public:
  explicit Dropout(double rate) : rate_(rate) {
    if (rate < 0.0 || rate >= 1.0)
      throw std::invalid_argument("Dropout: rate must lie in [0,1), got " + std::to_string(rate));
  }
  double rate() const { return rate_; }
  Tensor<T> forward(const Tensor<T>& x, bool training, Rng& rng) override {
    return dropout_forward(x, rate_, training, rng);
  }
  void register_params(const std::string&, ParamRegistry<T>&) override {}

 private:
  double rate_;
};

template <class T>
class BatchNorm2d : public Module<T> {
 public:
  explicit BatchNorm2d(std::size_t channels, double momentum = 0.1, double eps = 1e-5)
      : channels_(channels),
        momentum_(static_cast<T>(momentum)),
        eps_(static_cast<T>(eps)),
        gamma_(Tensor<T>::filled({channels}, T(1), true)),
        beta_(Tensor<T>::zeros({channels}, true)),
        running_mean_(Tensor<T>::zeros({channels}, false)),
        running_var_(Tensor<T>::filled({channels}, T(1), false)) {
    if (channels == 0) throw std::invalid_argument("BatchNorm2d: channels must be positive");
  }

  std::size_t channels() const { return channels_; }
  Tensor<T>& gamma() { return gamma_; }
  Tensor<T>& beta() { return beta_; }
  Tensor<T>& running_mean() { return running_mean_; }
  Tensor<T>& running_var() { return running_var_; }
  T eps() const { return eps_; }

  Tensor<T> forward(const Tensor<T>& x, bool training, Rng&) override {
    return batchnorm2d_forward(*this, x, training);
  }

  void register_params(const std::string& prefix, ParamRegistry<T>& out) override {
    out.push_back({prefix + ".gamma", gamma_, true});
    out.push_back({prefix + ".beta", beta_, true});
    out.push_back({prefix + ".running_mean", running_mean_, false});
    out.push_back({prefix + ".running_var", running_var_, false});
  }

  template <class U>
  friend Tensor<U> batchnorm2d_forward(BatchNorm2d<U>& bn, const Tensor<U>& x, bool training);

 private:
  std::size_t channels_;
  T momentum_, eps_;
  Tensor<T> gamma_, beta_, running_mean_, running_var_;
};

// Training mode normalizes each channel by batch statistics (biased variance)
// and updates running stats (unbiased variance) with the module's momentum;
// eval mode applies the running-stat affine. Training rejects batches of one
// sample: their variance is undefined.
template <class T>
Tensor<T> batchnorm2d_forward(BatchNorm2d<T>& bn, const Tensor<T>& x, bool training) {
  if (x.rank() != 4)
    throw std::invalid_argument("batchnorm2d: input must be [N,C,H,W], got " +
                                shape_str(x.shape()));
  const std::size_t N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  if (C != bn.channels_)
    throw std::invalid_argument("batchnorm2d: input has " + std::to_string(C) +
                                " channels, layer expects " + std::to_string(bn.channels_));
  if (training && N < 2)
    throw std::invalid_argument("batchnorm2d: training mode requires batch size >= 2");

  const std::size_t HW = H * W;
  const T* in = x.values().data();
  const T* g = bn.gamma_.values().data();
  const T* b = bn.beta_.values().data();
  auto pg = bn.gamma_.node(), pb = bn.beta_.node();
  auto px = x.node();

  if (!training) {
    auto invstd = std::make_shared<std::vector<T>>(C);
    auto mean = std::make_shared<std::vector<T>>(C);
    for (std::size_t c = 0; c < C; ++c) {
      (*mean)[c] = bn.running_mean_.values()[c];
      (*invstd)[c] = T(1) / std::sqrt(bn.running_var_.values()[c] + bn.eps_);
    }
    std::vector<T> out(x.size());
    for (std::size_t n = 0; n < N; ++n)
      for (std::size_t c = 0; c < C; ++c) {
        const std::size_t base = (n * C + c) * HW;
        const T a = g[c] * (*invstd)[c];
        const T sh = b[c] - (*mean)[c] * a;
        for (std::size_t i = 0; i < HW; ++i) out[base + i] = a * in[base + i] + sh;
      }
    return detail::make_op<T>(
        x.shape(), std::move(out), "batchnorm2d_eval", {x, bn.gamma_, bn.beta_},
        [px, pg, pb, mean, invstd, N, C, HW](detail::Node<T>& nd) {
          for (std::size_t n = 0; n < N; ++n)
            for (std::size_t c = 0; c < C; ++c) {
              const std::size_t base = (n * C + c) * HW;
              const T* gr = nd.grad.data() + base;
              if (pg->requires_grad) {
                pg->ensure_grad();
                T acc = T(0);
                for (std::size_t i = 0; i < HW; ++i)
                  acc += gr[i] * (px->value[base + i] - (*mean)[c]) * (*invstd)[c];
                pg->grad[c] += acc;
              }
              if (pb->requires_grad) {
                pb->ensure_grad();
                pb->grad[c] += kern::sum(gr, HW);
              }
              if (px->requires_grad) {
                px->ensure_grad();
                kern::axpy(pg->value[c] * (*invstd)[c], gr, px->grad.data() + base, HW);
              }
            }
        });
  }

  const std::size_t M = N * HW;  // elements per channel
  auto mean = std::make_shared<std::vector<T>>(C, T(0));
  auto invstd = std::make_shared<std::vector<T>>(C);
  auto xhat = std::make_shared<std::vector<T>>(x.size());
  std::vector<T> var(C, T(0));
  for (std::size_t c = 0; c < C; ++c) {
    T s = T(0);
    for (std::size_t n = 0; n < N; ++n) s += kern::sum(in + (n * C + c) * HW, HW);
    (*mean)[c] = s / static_cast<T>(M);
  }
  for (std::size_t c = 0; c < C; ++c) {
    T s = T(0);
    for (std::size_t n = 0; n < N; ++n) {
      const T* p = in + (n * C + c) * HW;
      for (std::size_t i = 0; i < HW; ++i) {
        const T d = p[i] - (*mean)[c];
        s += d * d;
      }
    }
    var[c] = s / static_cast<T>(M);
    (*invstd)[c] = T(1) / std::sqrt(var[c] + bn.eps_);
  }
  std::vector<T> out(x.size());
  for (std::size_t n = 0; n < N; ++n)
    for (std::size_t c = 0; c < C; ++c) {
      const std::size_t base = (n * C + c) * HW;
      for (std::size_t i = 0; i < HW; ++i) {
        const T xh = (in[base + i] - (*mean)[c]) * (*invstd)[c];
        (*xhat)[base + i] = xh;
        out[base + i] = g[c] * xh + b[c];
      }
    }

  {  // momentum update of running stats; unbiased variance, outside the graph
    auto rm = bn.running_mean_.values_mut();
    auto rv = bn.running_var_.values_mut();
    const T unbias = static_cast<T>(M) / static_cast<T>(M - 1);
    for (std::size_t c = 0; c < C; ++c) {
      rm[c] = (T(1) - bn.momentum_) * rm[c] + bn.momentum_ * (*mean)[c];
      rv[c] = (T(1) - bn.momentum_) * rv[c] + bn.momentum_ * var[c] * unbias;
    }
  }

  return detail::make_op<T>(
      x.shape(), std::move(out), "batchnorm2d", {x, bn.gamma_, bn.beta_},
      [px, pg, pb, invstd, xhat, N, C, HW, M](detail::Node<T>& nd) {
        for (std::size_t c = 0; c < C; ++c) {
          T sum_g = T(0), sum_gx = T(0);
          for (std::size_t n = 0; n < N; ++n) {
            const std::size_t base = (n * C + c) * HW;
            for (std::size_t i = 0; i < HW; ++i) {
              sum_g += nd.grad[base + i];
              sum_gx += nd.grad[base + i] * (*xhat)[base + i];
            }
          }
          if (pg->requires_grad) {
            pg->ensure_grad();
            pg->grad[c] += sum_gx;
          }
          if (pb->requires_grad) {
            pb->ensure_grad();
            pb->grad[c] += sum_g;
          }
          if (px->requires_grad) {
            px->ensure_grad();
            const T gam = pg->value[c];
            const T is = (*invstd)[c];
            const T mg = sum_g / static_cast<T>(M);
            const T mgx = sum_gx / static_cast<T>(M);
            for (std::size_t n = 0; n < N; ++n) {
              const std::size_t base = (n * C + c) * HW;
              for (std::size_t i = 0; i < HW; ++i)
                px->grad[base + i] +=
                    gam * is * (nd.grad[base + i] - mg - (*xhat)[base + i] * mgx);
            }
          }
        }
      });
}

// ---------------------------------------------------------------------------
// Standard layers
// ---------------------------------------------------------------------------

template <class T>
class Conv2d : public Module<T> {
 public:
  Conv2d(std::size_t in_channels, std::size_t out_channels, std::size_t kernel, std::size_t stride,
         std::size_t padding, Rng& rng)
      : stride_(stride),
        padding_(padding),
        kernel_(Tensor<T>::zeros({out_channels, in_channels, kernel, kernel}, true)),
        bias_(Tensor<T>::zeros({out_channels}, true)) {
    const double std = std::sqrt(2.0 / static_cast<double>(in_channels * kernel * kernel));
    auto kv = kernel_.values_mut();
    for (auto& v : kv) v = static_cast<T>(rng.normal(0.0, std));
  }

  Tensor<T>& kernel() { return kernel_; }
  Tensor<T>& bias() { return bias_; }

  Tensor<T> forward(const Tensor<T>& x, bool, Rng&) override {
    return bias_add(conv2d(x, kernel_, stride_, padding_), bias_, 1);
  }
  void register_params(const std::string& prefix, ParamRegistry<T>& out) override {
    out.push_back({prefix + ".kernel", kernel_, true});
    out.push_back({prefix + ".bias", bias_, true});
  }

 private:
  std::size_t stride_, padding_;
  Tensor<T> kernel_, bias_;
};

template <class T>
class Silu : public Module<T> {
 public:
  Tensor<T> forward(const Tensor<T>& x, bool, Rng&) override { return silu(x); }
  void register_params(const std::string&, ParamRegistry<T>&) override {}
};

template <class T>
class AdaptiveAvgPool2d : public Module<T> {
 public:
  AdaptiveAvgPool2d(std::size_t out_h, std::size_t out_w) : oh_(out_h), ow_(out_w) {}
  Tensor<T> forward(const Tensor<T>& x, bool, Rng&) override {
    return adaptive_avg_pool2d(x, oh_, ow_);
  }
  void register_params(const std::string&, ParamRegistry<T>&) override {}

 private:
  std::size_t oh_, ow_;
};

template <class T>
class Flatten : public Module<T> {
 public:
  Tensor<T> forward(const Tensor<T>& x, bool, Rng&) override { return flatten(x); }
  void register_params(const std::string&, ParamRegistry<T>&) override {}
};

template <class T>
class Linear : public Module<T> {
 public:
  Linear(std::size_t in_features, std::size_t out_features, Rng& rng)
      : weight_(Tensor<T>::zeros({in_features, out_features}, true)),
        bias_(Tensor<T>::zeros({out_features}, true)) {
    const double bound = 1.0 / std::sqrt(static_cast<double>(in_features));
    auto wv = weight_.values_mut();
    for (auto& v : wv) v = static_cast<T>((rng.uniform() * 2.0 - 1.0) * bound);
    auto bv = bias_.values_mut();
    for (auto& v : bv) v = static_cast<T>((rng.uniform() * 2.0 - 1.0) * bound);
  }

  Tensor<T>& weight() { return weight_; }
  Tensor<T>& bias() { return bias_; }

  Tensor<T> forward(const Tensor<T>& x, bool, Rng&) override {
    if (x.rank() != 2 || x.dim(1) != weight_.dim(0))
      throw std::invalid_argument("Linear: input " + shape_str(x.shape()) + " incompatible with " +
                                  std::to_string(weight_.dim(0)) + " input features");
    return bias_add(matmul(x, weight_), bias_, 1);
  }
  void register_params(const std::string& prefix, ParamRegistry<T>& out) override {
    out.push_back({prefix + ".weight", weight_, true});
    out.push_back({prefix + ".bias", bias_, true});
  }

 private:
  Tensor<T> weight_, bias_;
};

// ---------------------------------------------------------------------------
// KAN layer: y_j = sum_p Phi_{jp}(x_p)
// ---------------------------------------------------------------------------

template <class T>
class KanLayer;

template <class T>
Tensor<T> kan_forward(const KanLayer<T>& layer, const Tensor<T>& x);

template <class T>
class KanLayer : public Module<T> {
 public:
  KanLayer(std::size_t n_in, std::size_t m, Rng& rng, T a = T(-1), T b = T(1),
           std::size_t grid_size = 8, int degree = 3)
      : n_in_(n_in),
        m_(m),
        grid_(a, b, grid_size, degree),
        coeffs_(Tensor<T>::zeros({m, n_in, grid_.coeff_count()}, true)),
        w_b_(Tensor<T>::filled({m, n_in}, T(1), true)),
        w_s_(Tensor<T>::filled({m, n_in}, T(1), true)) {
    if (n_in == 0 || m == 0) throw std::invalid_argument("KanLayer: zero-sized feature grid");
    auto cv = coeffs_.values_mut();
    for (auto& v : cv) v = static_cast<T>(rng.normal(0.0, 0.1));
  }

  std::size_t n_in() const { return n_in_; }
  std::size_t m() const { return m_; }
  const SplineGrid<T>& grid() const { return grid_; }
  Tensor<T>& coeffs() { return coeffs_; }
  Tensor<T>& w_b() { return w_b_; }
  Tensor<T>& w_s() { return w_s_; }
  const Tensor<T>& coeffs() const { return coeffs_; }
  const Tensor<T>& w_b() const { return w_b_; }
  const Tensor<T>& w_s() const { return w_s_; }

  // Materialize Phi_{jp} as a standalone activation (copy of its slice).
  SplineActivation<T> activation(std::size_t j, std::size_t p) const {
    check_jp(j, p);
    SplineActivation<T> sa(grid_.range_begin(), grid_.range_end(), grid_.grid_size(),
                           grid_.degree());
    const std::size_t nc = grid_.coeff_count();
    auto cv = sa.coeffs.values_mut();
    for (std::size_t i = 0; i < nc; ++i) cv[i] = coeffs_.values()[(j * n_in_ + p) * nc + i];
    sa.w_b.values_mut()[0] = w_b_.values()[j * n_in_ + p];
    sa.w_s.values_mut()[0] = w_s_.values()[j * n_in_ + p];
    return sa;
  }

  // Write a standalone activation's parameters back into slice (j,p).
  void set_activation(std::size_t j, std::size_t p, const SplineActivation<T>& sa) {
    check_jp(j, p);
    if (sa.grid.coeff_count() != grid_.coeff_count() || sa.grid.degree() != grid_.degree())
      throw std::invalid_argument("KanLayer::set_activation: grid mismatch");
    const std::size_t nc = grid_.coeff_count();
    auto cv = coeffs_.values_mut();
    for (std::size_t i = 0; i < nc; ++i) cv[(j * n_in_ + p) * nc + i] = sa.coeffs.values()[i];
    w_b_.values_mut()[j * n_in_ + p] = sa.w_b.values()[0];
    w_s_.values_mut()[j * n_in_ + p] = sa.w_s.values()[0];
  }

  // Every Phi_{jp} becomes the identity map on [a,b].
  void set_identity() {
    const std::size_t nc = grid_.coeff_count();
    auto cv = coeffs_.values_mut();
    for (std::size_t jp = 0; jp < m_ * n_in_; ++jp)
      for (std::size_t i = 0; i < nc; ++i) cv[jp * nc + i] = grid_.greville(i);
    std::fill(w_b_.values_mut().begin(), w_b_.values_mut().end(), T(0));
    std::fill(w_s_.values_mut().begin(), w_s_.values_mut().end(), T(1));
  }

  Tensor<T> forward(const Tensor<T>& x, bool, Rng&) override { return kan_forward(*this, x); }

  void register_params(const std::string& prefix, ParamRegistry<T>& out) override {
    out.push_back({prefix + ".coeffs", coeffs_, true});
    out.push_back({prefix + ".w_b", w_b_, true});
    out.push_back({prefix + ".w_s", w_s_, true});
  }

 private:
  void check_jp(std::size_t j, std::size_t p) const {
    if (j >= m_ || p >= n_in_)
      throw std::out_of_range("KanLayer: activation index (" + std::to_string(j) + "," +
                              std::to_string(p) + ") outside " + std::to_string(m_) + "x" +
                              std::to_string(n_in_));
  }

  std::size_t n_in_, m_;
  SplineGrid<T> grid_;
  Tensor<T> coeffs_;  // [m, n_in, G+k]
  Tensor<T> w_b_;     // [m, n_in]
  Tensor<T> w_s_;     // [m, n_in]
};

// Fused evaluation of all m*n_in activations: the basis row for x[b,p] is
// computed once and shared by the m output sums.
template <class T>
Tensor<T> kan_forward(const KanLayer<T>& layer, const Tensor<T>& x) {
  if (x.rank() != 2)
    throw std::invalid_argument("kan_forward: input must be [B, n_in], got " +
                                shape_str(x.shape()));
  const std::size_t B = x.dim(0), n = layer.n_in(), m = layer.m();
  if (x.dim(1) != n)
    throw std::invalid_argument("kan_forward: input has " + std::to_string(x.dim(1)) +
                                " features, layer expects " + std::to_string(n));
  const SplineGrid<T>& grid = layer.grid();
  const int k = grid.degree();
  const std::size_t nc = grid.coeff_count();
  const T* xv = x.values().data();
  const T* cv = layer.coeffs().values().data();
  const T* wb = layer.w_b().values().data();
  const T* ws = layer.w_s().values().data();

  const std::size_t BN = B * n;
  auto firsts = std::make_shared<std::vector<std::uint32_t>>(BN);
  auto rows = std::make_shared<std::vector<T>>(BN * (k + 1));
  auto lows = std::make_shared<std::vector<T>>(k >= 1 ? BN * k : 0);
  auto silu_v = std::make_shared<std::vector<T>>(BN);
  auto dsilu_v = std::make_shared<std::vector<T>>(BN);
  auto clamped = std::make_shared<std::vector<std::uint8_t>>(BN);

  std::vector<T> out(B * m, T(0));
  std::array<T, SplineGrid<T>::kMaxDegree + 1> N, nlow;
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t p = 0; p < n; ++p) {
      const std::size_t e = b * n + p;
      const T t0 = xv[e];
      const bool outside = (t0 < grid.range_begin() || t0 > grid.range_end());
      (*clamped)[e] = outside ? 1 : 0;
      const T t = grid.clamp(t0);
      const std::size_t span = grid.find_span(t);
      grid.basis_funs(span, t, N.data(), k >= 1 ? nlow.data() : nullptr);
      const std::size_t first = span - static_cast<std::size_t>(k);
      (*firsts)[e] = static_cast<std::uint32_t>(first);
      for (int r = 0; r <= k; ++r) (*rows)[e * (k + 1) + r] = N[r];
      for (int r = 0; r < k; ++r) (*lows)[e * k + r] = nlow[r];
      const T s = T(1) / (T(1) + std::exp(-t0));
      (*silu_v)[e] = t0 * s;
      (*dsilu_v)[e] = s * (T(1) + t0 * (T(1) - s));
      for (std::size_t j = 0; j < m; ++j) {
        const std::size_t jp = j * n + p;
        T spl = T(0);
        const T* cjp = cv + jp * nc;
        for (int r = 0; r <= k; ++r) spl += N[r] * cjp[first + r];
        out[b * m + j] += wb[jp] * (*silu_v)[e] + ws[jp] * spl;
      }
    }

  auto px = x.node(), pc = layer.coeffs().node(), pwb = layer.w_b().node(),
       pws = layer.w_s().node();
  const auto knots = std::make_shared<std::vector<T>>(grid.knots());
  return detail::make_op<T>(
      {B, m}, std::move(out), "kan_forward", {x, layer.coeffs(), layer.w_b(), layer.w_s()},
      [px, pc, pwb, pws, firsts, rows, lows, silu_v, dsilu_v, clamped, knots, B, n, m, k,
       nc](detail::Node<T>& nd) {
        if (px->requires_grad) px->ensure_grad();
        if (pc->requires_grad) pc->ensure_grad();
        if (pwb->requires_grad) pwb->ensure_grad();
        if (pws->requires_grad) pws->ensure_grad();
        const T* cv = pc->value.data();
        const T* wb = pwb->value.data();
        const T* ws = pws->value.data();
        for (std::size_t b = 0; b < B; ++b)
          for (std::size_t p = 0; p < n; ++p) {
            const std::size_t e = b * n + p;
            const std::size_t first = (*firsts)[e];
            const T* Nrow = rows->data() + e * (k + 1);
            T dx = T(0);
            for (std::size_t j = 0; j < m; ++j) {
              const T g = nd.grad[b * m + j];
              if (g == T(0)) continue;
              const std::size_t jp = j * n + p;
              const T* cjp = cv + jp * nc;
              T spl = T(0);
              for (int r = 0; r <= k; ++r) spl += Nrow[r] * cjp[first + r];
              if (pwb->requires_grad) pwb->grad[jp] += g * (*silu_v)[e];
              if (pws->requires_grad) pws->grad[jp] += g * spl;
              if (pc->requires_grad)
                for (int r = 0; r <= k; ++r) pc->grad[jp * nc + first + r] += g * ws[jp] * Nrow[r];
              if (px->requires_grad) {
                T dspl = T(0);
                if (k >= 1 && !(*clamped)[e])
                  for (int r = 0; r < k; ++r)
                    dspl += static_cast<T>(k) * (cjp[first + r + 1] - cjp[first + r]) /
                            ((*knots)[first + r + k + 1] - (*knots)[first + r + 1]) *
                            (*lows)[e * k + r];
                dx += g * (wb[jp] * (*dsilu_v)[e] + ws[jp] * dspl);
              }
            }
            if (px->requires_grad) px->grad[e] += dx;
          }
      });
}

// ---------------------------------------------------------------------------
// Per-channel spline stage and the ConvKAN block
// ---------------------------------------------------------------------------

template <class T>
class ChannelSpline;

template <class T>
Tensor<T> channel_spline_forward(const ChannelSpline<T>& cs, const Tensor<T>& x);

// One SplineActivation per channel, applied pointwise across N,H,W.
template <class T>
class ChannelSpline : public Module<T> {
 public:
  ChannelSpline(std::size_t channels, Rng& rng, T a = T(-1), T b = T(1),
                std::size_t grid_size = 8, int degree = 3)
      : channels_(channels),
        grid_(a, b, grid_size, degree),
        coeffs_(Tensor<T>::zeros({channels, grid_.coeff_count()}, true)),
        w_b_(Tensor<T>::filled({channels}, T(1), true)),
        w_s_(Tensor<T>::filled({channels}, T(1), true)) {
    if (channels == 0) throw std::invalid_argument("ChannelSpline: channels must be positive");
    auto cvals = coeffs_.values_mut();
    for (auto& v : cvals) v = static_cast<T>(rng.normal(0.0, 0.1));
  }

  std::size_t channels() const { return channels_; }
  const SplineGrid<T>& grid() const { return grid_; }
  Tensor<T>& coeffs() { return coeffs_; }
  Tensor<T>& w_b() { return w_b_; }
  Tensor<T>& w_s() { return w_s_; }
  const Tensor<T>& coeffs() const { return coeffs_; }
  const Tensor<T>& w_b() const { return w_b_; }
  const Tensor<T>& w_s() const { return w_s_; }

  SplineActivation<T> activation(std::size_t c) const {
    if (c >= channels_) throw std::out_of_range("ChannelSpline: channel out of range");
    SplineActivation<T> sa(grid_.range_begin(), grid_.range_end(), grid_.grid_size(),
                           grid_.degree());
    const std::size_t nc = grid_.coeff_count();
    auto cv = sa.coeffs.values_mut();
    for (std::size_t i = 0; i < nc; ++i) cv[i] = coeffs_.values()[c * nc + i];
    sa.w_b.values_mut()[0] = w_b_.values()[c];
    sa.w_s.values_mut()[0] = w_s_.values()[c];
    return sa;
  }

  void set_activation(std::size_t c, const SplineActivation<T>& sa) {
    if (c >= channels_) throw std::out_of_range("ChannelSpline: channel out of range");
    if (sa.grid.coeff_count() != grid_.coeff_count() || sa.grid.degree() != grid_.degree())
      throw std::invalid_argument("ChannelSpline::set_activation: grid mismatch");
    const std::size_t nc = grid_.coeff_count();
    auto cv = coeffs_.values_mut();
    for (std::size_t i = 0; i < nc; ++i) cv[c * nc + i] = sa.coeffs.values()[i];
    w_b_.values_mut()[c] = sa.w_b.values()[0];
    w_s_.values_mut()[c] = sa.w_s.values()[0];
  }

  void set_identity() {
    const std::size_t nc = grid_.coeff_count();
    auto cv = coeffs_.values_mut();
    for (std::size_t c = 0; c < channels_; ++c)
      for (std::size_t i = 0; i < nc; ++i) cv[c * nc + i] = grid_.greville(i);
    std::fill(w_b_.values_mut().begin(), w_b_.values_mut().end(), T(0));
    std::fill(w_s_.values_mut().begin(), w_s_.values_mut().end(), T(1));
  }

  Tensor<T> forward(const Tensor<T>& x, bool, Rng&) override {
    return channel_spline_forward(*this, x);
  }

  void register_params(const std::string& prefix, ParamRegistry<T>& out) override {
    out.push_back({prefix + ".coeffs", coeffs_, true});
    out.push_back({prefix + ".w_b", w_b_, true});
    out.push_back({prefix + ".w_s", w_s_, true});
  }

 private:
  std::size_t channels_;
  SplineGrid<T> grid_;
  Tensor<T> coeffs_;  // [C, G+k]
  Tensor<T> w_b_;     // [C]
  Tensor<T> w_s_;     // [C]
};

template <class T>
Tensor<T> channel_spline_forward(const ChannelSpline<T>& cs, const Tensor<T>& x) {
  if (x.rank() != 4)
    throw std::invalid_argument("channel_spline: input must be [N,C,H,W], got " +
                                shape_str(x.shape()));
  const std::size_t C = x.dim(1), HW = x.dim(2) * x.dim(3);
  if (C != cs.channels())
    throw std::invalid_argument("channel_spline: input has " + std::to_string(C) +
                                " channels, stage expects " + std::to_string(cs.channels()));
  const SplineGrid<T>& grid = cs.grid();
  const int k = grid.degree();
  const std::size_t nc = grid.coeff_count();
  const std::size_t total = x.size();
  const T* xv = x.values().data();
  const T* cv = cs.coeffs().values().data();
  const T* wb = cs.w_b().values().data();
  const T* ws = cs.w_s().values().data();

  auto firsts = std::make_shared<std::vector<std::uint32_t>>(total);
  auto rows = std::make_shared<std::vector<T>>(total * (k + 1));
  auto spl = std::make_shared<std::vector<T>>(total);
  auto dspl = std::make_shared<std::vector<T>>(total);

  std::vector<T> out(total);
  std::array<T, SplineGrid<T>::kMaxDegree + 1> Nb, nlow;
  const auto& kn = grid.knots();
  for (std::size_t idx = 0; idx < total; ++idx) {
    const std::size_t c = (idx / HW) % C;
    const T t0 = xv[idx];
    const bool outside = (t0 < grid.range_begin() || t0 > grid.range_end());
    const T t = grid.clamp(t0);
    const std::size_t span = grid.find_span(t);
    grid.basis_funs(span, t, Nb.data(), k >= 1 ? nlow.data() : nullptr);
    const std::size_t first = span - static_cast<std::size_t>(k);
    (*firsts)[idx] = static_cast<std::uint32_t>(first);
    const T* cc = cv + c * nc;
    T y = T(0);
    for (int r = 0; r <= k; ++r) {
      (*rows)[idx * (k + 1) + r] = Nb[r];
      y += Nb[r] * cc[first + r];
    }
    (*spl)[idx] = y;
    T dy = T(0);
    if (k >= 1 && !outside)
      for (int r = 0; r < k; ++r)
        dy += static_cast<T>(k) * (cc[first + r + 1] - cc[first + r]) /
              (kn[first + r + k + 1] - kn[first + r + 1]) * nlow[r];
    (*dspl)[idx] = dy;
    const T s = T(1) / (T(1) + std::exp(-t0));
    out[idx] = wb[c] * (t0 * s) + ws[c] * y;
  }

  auto px = x.node(), pc = cs.coeffs().node(), pwb = cs.w_b().node(), pws = cs.w_s().node();
  return detail::make_op<T>(
      x.shape(), std::move(out), "channel_spline", {x, cs.coeffs(), cs.w_b(), cs.w_s()},
      [px, pc, pwb, pws, firsts, rows, spl, dspl, C, HW, k, nc](detail::Node<T>& nd) {
        if (px->requires_grad) px->ensure_grad();
        if (pc->requires_grad) pc->ensure_grad();
        if (pwb->requires_grad) pwb->ensure_grad();
        if (pws->requires_grad) pws->ensure_grad();
        const T* wb = pwb->value.data();
        const T* ws = pws->value.data();
        for (std::size_t idx = 0; idx < nd.grad.size(); ++idx) {
          const T g = nd.grad[idx];
          if (g == T(0)) continue;
          const std::size_t c = (idx / HW) % C;
          const T v = px->value[idx];
          const T s = T(1) / (T(1) + std::exp(-v));
          const T dsilu = s * (T(1) + v * (T(1) - s));
          if (px->requires_grad) px->grad[idx] += g * (wb[c] * dsilu + ws[c] * (*dspl)[idx]);
          if (pc->requires_grad) {
            const std::size_t first = (*firsts)[idx];
            for (int r = 0; r <= k; ++r)
              pc->grad[c * nc + first + r] += g * ws[c] * (*rows)[idx * (k + 1) + r];
          }
          if (pwb->requires_grad) pwb->grad[c] += g * (v * s);
          if (pws->requires_grad) pws->grad[c] += g * (*spl)[idx];
        }
      });
}

template <class T>
class ConvKanBlock;

template <class T>
Tensor<T> convkan_forward(ConvKanBlock<T>& block, const Tensor<T>& x, bool training);

// conv2d -> SiLU -> per-channel spline -> batch norm (order per the source
// architecture description).
template <class T>
class ConvKanBlock : public Module<T> {
 public:
  ConvKanBlock(std::size_t in_channels, std::size_t out_channels, std::size_t kernel,
               std::size_t stride, std::size_t padding, Rng& rng, T a = T(-1), T b = T(1),
               std::size_t grid_size = 8, int degree = 3)
      : conv_(in_channels, out_channels, kernel, stride, padding, rng),
        spline_(out_channels, rng, a, b, grid_size, degree),
        bn_(out_channels) {}

  Conv2d<T>& conv() { return conv_; }
  ChannelSpline<T>& spline() { return spline_; }
  BatchNorm2d<T>& bn() { return bn_; }

  Tensor<T> forward(const Tensor<T>& x, bool training, Rng& rng) override {
    Tensor<T> t = conv_.forward(x, training, rng);
    t = silu(t);
    t = channel_spline_forward(spline_, t);
    return batchnorm2d_forward(bn_, t, training);
  }

  void register_params(const std::string& prefix, ParamRegistry<T>& out) override {
    conv_.register_params(prefix + ".conv", out);
    spline_.register_params(prefix + ".spline", out);
    bn_.register_params(prefix + ".bn", out);
  }

 private:
  Conv2d<T> conv_;
  ChannelSpline<T> spline_;
  BatchNorm2d<T> bn_;
};

template <class T>
Tensor<T> convkan_forward(ConvKanBlock<T>& block, const Tensor<T>& x, bool training) {
  Rng unused(0);
  return block.forward(x, training, unused);
}

}  // namespace capskan
