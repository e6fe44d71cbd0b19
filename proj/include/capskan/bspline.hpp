#pragma once

// B-spline basis evaluation and the learnable univariate spline activation.
//
// Two evaluation paths exist on purpose: KnotVector + basis() is the literal
// textbook recursion over arbitrary knot vectors (used as the reference), and
// SplineGrid is the banded evaluator over the uniform extended knots the
// activations actually use. Tests assert they agree.

#include <array>
#include <cmath>
#include <cstddef>
#include <vector>

#include "capskan/rng.hpp"
#include "capskan/tensor.hpp"

namespace capskan {

// ---------------------------------------------------------------------------
// Arbitrary knot vectors, literal recursion
// ---------------------------------------------------------------------------

struct KnotVector {
  std::vector<double> knots;  // t_0 … t_m, non-decreasing
  int degree = 0;

  KnotVector(std::vector<double> k, int p);

  std::size_t last_index() const { return knots.size() - 1; }  // m
  // Number of degree-p basis functions supported by this vector.
  std::size_t basis_count() const { return knots.size() - degree - 1; }
  // Domain on which the degree-p basis forms a partition of unity.
  double domain_begin() const { return knots[degree]; }
  double domain_end() const { return knots[knots.size() - 1 - degree]; }
};

// Order-0 indicator: 1 if t_i <= t < t_{i+1}. The very last non-empty
// interval of the vector is closed so the final knot itself is covered.
double basis_order0(const KnotVector& kv, std::size_t i, double t);

// N_{i,j}(t) by the Cox-de Boor recursion; zero-denominator terms are 0.
double basis(const KnotVector& kv, std::size_t i, int j, double t);

// All N_{i,p}(t) for i = 0 … basis_count()-1, with t clamped to the domain.
std::vector<double> basis_row(const KnotVector& kv, double t);

// ---------------------------------------------------------------------------
// Uniform extended grid (the fast path used by activations)
// ---------------------------------------------------------------------------

// Degree-k spline space over [a,b] split into G uniform intervals, with k
// extra uniformly-spaced knots on each side: t_i = a + (i-k)*h, h = (b-a)/G,
// i = 0 … G+2k. The space has G+k free coefficients.
template <class T>
class SplineGrid {
 public:
  static constexpr int kMaxDegree = 7;

  SplineGrid(T a, T b, std::size_t grid_size, int degree)
      : a_(a), b_(b), G_(grid_size), k_(degree) {
    if (!(a < b)) throw std::invalid_argument("SplineGrid: require a < b");
    if (G_ == 0) throw std::invalid_argument("SplineGrid: grid size must be positive");
    if (k_ < 0 || k_ > kMaxDegree)
      throw std::invalid_argument("SplineGrid: degree out of supported range [0," +
                                  std::to_string(kMaxDegree) + "]");
    h_ = (b - a) / static_cast<T>(G_);
    knots_.resize(G_ + 2 * k_ + 1);
    for (std::size_t i = 0; i < knots_.size(); ++i)
      knots_[i] = a + (static_cast<T>(i) - static_cast<T>(k_)) * h_;
  }

  T range_begin() const { return a_; }
  T range_end() const { return b_; }
  std::size_t grid_size() const { return G_; }
  int degree() const { return k_; }
  T spacing() const { return h_; }
  std::size_t coeff_count() const { return G_ + k_; }
  const std::vector<T>& knots() const { return knots_; }

  T clamp(T t) const { return t < a_ ? a_ : (t > b_ ? b_ : t); }

  // Index j with knots[j] <= t < knots[j+1]; t = b resolves to the last
  // interior interval so the endpoint evaluates as a left limit.
  std::size_t find_span(T t) const {
    T pos = (t - a_) / h_;
    long cell = static_cast<long>(std::floor(pos));
    if (cell < 0) cell = 0;
    if (cell > static_cast<long>(G_) - 1) cell = static_cast<long>(G_) - 1;
    return static_cast<std::size_t>(k_) + static_cast<std::size_t>(cell);
  }

  // de Boor triangle: fills N[0..k] with N_{span-k..span, k}(t). If nlow is
  // non-null it receives the degree-(k-1) row N_{span-k+1..span, k-1}(t)
  // (k entries), which feeds the derivative formula.
  void basis_funs(std::size_t span, T t, T* N, T* nlow = nullptr) const {
    std::array<T, kMaxDegree + 1> left{}, right{};
    N[0] = T(1);
    if (k_ == 0) return;
    for (int r = 1; r <= k_; ++r) {
      left[r] = t - knots_[span + 1 - r];
      right[r] = knots_[span + r] - t;
      T saved = T(0);
      for (int i = 0; i < r; ++i) {
        const T temp = N[i] / (right[i + 1] + left[r - i]);
        N[i] = saved + right[i + 1] * temp;
        saved = left[r - i] * temp;
      }
      N[r] = saved;
      if (nlow && r == k_ - 1)
        for (int i = 0; i < k_; ++i) nlow[i] = N[i];
    }
    if (nlow && k_ == 1) nlow[0] = T(1);  // degree-0 row is the indicator
  }

  // C(t) = sum_i c_i N_{i,k}(t) with t clamped into [a,b].
  T eval(const T* coeffs, T t) const {
    t = clamp(t);
    const std::size_t span = find_span(t);
    std::array<T, kMaxDegree + 1> N;
    basis_funs(span, t, N.data());
    const std::size_t first = span - static_cast<std::size_t>(k_);
    T y = T(0);
    for (int r = 0; r <= k_; ++r) y += N[r] * coeffs[first + r];
    return y;
  }

  // Value and dC/dt at clamp(t); dy is reported as 0 outside [a,b] to match
  // the clamped forward.
  void eval_with_deriv(const T* coeffs, T t, T& y, T& dy) const {
    const bool outside = (t < a_ || t > b_);
    t = clamp(t);
    const std::size_t span = find_span(t);
    std::array<T, kMaxDegree + 1> N;
    std::array<T, kMaxDegree + 1> nlow;
    basis_funs(span, t, N.data(), nlow.data());
    const std::size_t first = span - static_cast<std::size_t>(k_);
    y = T(0);
    for (int r = 0; r <= k_; ++r) y += N[r] * coeffs[first + r];
    dy = T(0);
    if (k_ >= 1 && !outside) {
      // C'(t) = k * sum_r (c_{f+r+1} - c_{f+r}) / (t_{f+r+k+1} - t_{f+r+1}) * N_{f+r+1,k-1}(t)
      for (int r = 0; r < k_; ++r) {
        const T denom = knots_[first + r + k_ + 1] - knots_[first + r + 1];
        dy += static_cast<T>(k_) * (coeffs[first + r + 1] - coeffs[first + r]) / denom * nlow[r];
      }
    }
  }

  // Greville abscissa xi_i = mean of the k knots t_{i+1} … t_{i+k}. Using
  // these as coefficients reproduces C(t) = t on [a,b].
  T greville(std::size_t i) const {
    if (k_ == 0)  // midpoint fallback; degree 0 cannot reproduce the identity
      return (knots_[i] + knots_[i + 1]) / T(2);
    T s = T(0);
    for (int r = 1; r <= k_; ++r) s += knots_[i + r];
    return s / static_cast<T>(k_);
  }

  // Same knots as a KnotVector, for cross-checks against the literal recursion.
  KnotVector to_knot_vector() const {
    std::vector<double> kd(knots_.begin(), knots_.end());
    return KnotVector(std::move(kd), k_);
  }

 private:
  T a_, b_;
  std::size_t G_;
  int k_;
  T h_;
  std::vector<T> knots_;
};

// ---------------------------------------------------------------------------
// Learnable spline activation: y = w_b * silu(x) + w_s * spline(x)
// ---------------------------------------------------------------------------

template <class T>
struct SplineActivation {
  SplineGrid<T> grid;
  Tensor<T> coeffs;  // [G+k]
  Tensor<T> w_b;     // [1]
  Tensor<T> w_s;     // [1]

  explicit SplineActivation(T a = T(-1), T b = T(1), std::size_t grid_size = 8, int degree = 3)
      : grid(a, b, grid_size, degree),
        coeffs(Tensor<T>::zeros({grid.coeff_count()}, true)),
        w_b(Tensor<T>::from({1}, {T(1)}, true)),
        w_s(Tensor<T>::from({1}, {T(1)}, true)) {}

  // Default training init: near-SiLU with a small random spline residual.
  void init(Rng& rng) {
    auto c = coeffs.values_mut();
    for (auto& v : c) v = static_cast<T>(rng.normal(0.0, 0.1));
    w_b.values_mut()[0] = T(1);
    w_s.values_mut()[0] = T(1);
  }

  // Configure the exact identity map on [a,b]: w_b = 0, w_s = 1, Greville
  // coefficients.
  void set_identity() {
    auto c = coeffs.values_mut();
    for (std::size_t i = 0; i < c.size(); ++i) c[i] = grid.greville(i);
    w_b.values_mut()[0] = T(0);
    w_s.values_mut()[0] = T(1);
  }
};

// Non-autodiff scalar curve value C(t) using the activation's current
// coefficients (Eq. 12 path; the differentiable route is spline_act_forward).
template <class T>
T curve_eval(const SplineActivation<T>& sa, T t) {
  return sa.grid.eval(sa.coeffs.values().data(), t);
}

// Elementwise y = w_b*silu(x) + w_s*C(clamp(x)); shape-preserving, gradients
// flow to x, coeffs, w_b, w_s. Gradient through the clamp is zero outside
// [a,b].
template <class T>
Tensor<T> spline_act_forward(const SplineActivation<T>& sa, const Tensor<T>& x) {
  const SplineGrid<T>& grid = sa.grid;
  const int k = grid.degree();
  const std::size_t n = x.size();
  const T* xv = x.values().data();
  const T* cv = sa.coeffs.values().data();
  const T wb = sa.w_b.values()[0];
  const T ws = sa.w_s.values()[0];

  // Per-element state the backward pass reuses: first basis index, the k+1
  // basis values, the spline value, and dC/dt (0 where clamped).
  auto firsts = std::make_shared<std::vector<std::uint32_t>>(n);
  auto rows = std::make_shared<std::vector<T>>(n * (k + 1));
  auto spl = std::make_shared<std::vector<T>>(n);
  auto dspl = std::make_shared<std::vector<T>>(n);

  std::vector<T> out(n);
  std::array<T, SplineGrid<T>::kMaxDegree + 1> N, nlow;
  for (std::size_t i = 0; i < n; ++i) {
    const T t0 = xv[i];
    const bool outside = (t0 < grid.range_begin() || t0 > grid.range_end());
    const T t = grid.clamp(t0);
    const std::size_t span = grid.find_span(t);
    grid.basis_funs(span, t, N.data(), nlow.data());
    const std::size_t first = span - static_cast<std::size_t>(k);
    (*firsts)[i] = static_cast<std::uint32_t>(first);
    T y = T(0);
    for (int r = 0; r <= k; ++r) {
      (*rows)[i * (k + 1) + r] = N[r];
      y += N[r] * cv[first + r];
    }
    (*spl)[i] = y;
    T dy = T(0);
    if (k >= 1 && !outside) {
      const auto& kn = grid.knots();
      for (int r = 0; r < k; ++r)
        dy += static_cast<T>(k) * (cv[first + r + 1] - cv[first + r]) /
              (kn[first + r + k + 1] - kn[first + r + 1]) * nlow[r];
    }
    (*dspl)[i] = dy;
    const T s = T(1) / (T(1) + std::exp(-t0));
    out[i] = wb * (t0 * s) + ws * y;
  }

  auto px = x.node(), pc = sa.coeffs.node(), pwb = sa.w_b.node(), pws = sa.w_s.node();
  return detail::make_op<T>(
      x.shape(), std::move(out), "spline_act",
      {x, sa.coeffs, sa.w_b, sa.w_s},
      [px, pc, pwb, pws, firsts, rows, spl, dspl, k, wb, ws](detail::Node<T>& nd) {
        const std::size_t n = nd.grad.size();
        const T* g = nd.grad.data();
        if (px->requires_grad) px->ensure_grad();
        if (pc->requires_grad) pc->ensure_grad();
        if (pwb->requires_grad) pwb->ensure_grad();
        if (pws->requires_grad) pws->ensure_grad();
        T gwb = T(0), gws = T(0);
        for (std::size_t i = 0; i < n; ++i) {
          const T v = px->value[i];
          const T s = T(1) / (T(1) + std::exp(-v));
          const T silu_v = v * s;
          const T dsilu = s * (T(1) + v * (T(1) - s));
          if (px->requires_grad) px->grad[i] += g[i] * (wb * dsilu + ws * (*dspl)[i]);
          if (pc->requires_grad) {
            const std::size_t first = (*firsts)[i];
            for (int r = 0; r <= k; ++r)
              pc->grad[first + r] += g[i] * ws * (*rows)[i * (k + 1) + r];
          }
          gwb += g[i] * silu_v;
          gws += g[i] * (*spl)[i];
        }
        if (pwb->requires_grad) pwb->grad[0] += gwb;
        if (pws->requires_grad) pws->grad[0] += gws;
      });
}

}  // namespace capskan
