#pragma once

// Differentiable tensor operations. Shape rules are checked eagerly with
// descriptive errors; every op here is covered by the finite-difference
// gradient suite. Inner loops route through kern:: so the SIMD backends
// apply uniformly.
//
// Broadcasting is deliberately limited to scalar-tensor ops and bias_add;
// everything else requires explicit reshapes.

#include <algorithm>
#include <cmath>
#include <memory>
#include <string>
#include <vector>

#include "capskan/kernels.hpp"
#include "capskan/tensor.hpp"

namespace capskan {

namespace detail {

template <class T>
void check_same_shape(const Tensor<T>& a, const Tensor<T>& b, const char* op) {
  if (a.shape() != b.shape())
    throw std::invalid_argument(std::string(op) + ": shape mismatch " + shape_str(a.shape()) +
                                " vs " + shape_str(b.shape()));
}

// Accumulate src into the gradient buffer of `parent` if it wants one.
template <class T>
void accum_grad(const std::shared_ptr<Node<T>>& parent, const T* src, std::size_t n) {
  if (!parent->requires_grad) return;
  parent->ensure_grad();
  kern::add(parent->grad.data(), src, parent->grad.data(), n);
}

// Axis decomposition for row-major iteration: index = (outer, axis, inner).
inline void axis_extents(const Shape& shape, int axis, std::size_t& outer, std::size_t& len,
                         std::size_t& inner) {
  outer = 1;
  for (int i = 0; i < axis; ++i) outer *= shape[i];
  len = shape[axis];
  inner = 1;
  for (std::size_t i = axis + 1; i < shape.size(); ++i) inner *= shape[i];
}

inline int normalize_axis(int axis, std::size_t rank, const char* op) {
  int a = axis < 0 ? axis + static_cast<int>(rank) : axis;
  if (a < 0 || a >= static_cast<int>(rank))
    throw std::invalid_argument(std::string(op) + ": axis " + std::to_string(axis) +
                                " invalid for rank " + std::to_string(rank));
  return a;
}

// C[M x N] += A[M x K] * B[K x N], row-major. C must be pre-initialized.
template <class T>
void matmul_acc(const T* A, const T* B, T* C, std::size_t M, std::size_t K, std::size_t N) {
  for (std::size_t i = 0; i < M; ++i) {
    const T* arow = A + i * K;
    T* crow = C + i * N;
    for (std::size_t k = 0; k < K; ++k) kern::axpy(arow[k], B + k * N, crow, N);
  }
}

// C[M x N] += A[M x P] * B^T where B is [N x P].
template <class T>
void matmul_abT_acc(const T* A, const T* B, T* C, std::size_t M, std::size_t P, std::size_t N) {
  for (std::size_t i = 0; i < M; ++i)
    for (std::size_t j = 0; j < N; ++j) C[i * N + j] += kern::dot(A + i * P, B + j * P, P);
}

// C[K x N] += A^T * B where A is [M x K], B is [M x N].
template <class T>
void matmul_aTb_acc(const T* A, const T* B, T* C, std::size_t M, std::size_t K, std::size_t N) {
  for (std::size_t m = 0; m < M; ++m) {
    const T* arow = A + m * K;
    const T* brow = B + m * N;
    for (std::size_t k = 0; k < K; ++k) kern::axpy(arow[k], brow, C + k * N, N);
  }
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise and scalar ops
// ---------------------------------------------------------------------------

template <class T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  detail::check_same_shape(a, b, "add");
  std::vector<T> out(a.size());
  kern::add(a.values().data(), b.values().data(), out.data(), out.size());
  auto pa = a.node(), pb = b.node();
  return detail::make_op<T>(a.shape(), std::move(out), "add", {a, b},
                            [pa, pb](detail::Node<T>& n) {
                              detail::accum_grad(pa, n.grad.data(), n.grad.size());
                              detail::accum_grad(pb, n.grad.data(), n.grad.size());
                            });
}

template <class T>
Tensor<T> subtract(const Tensor<T>& a, const Tensor<T>& b) {
  detail::check_same_shape(a, b, "subtract");
  std::vector<T> out(a.size());
  kern::sub(a.values().data(), b.values().data(), out.data(), out.size());
  auto pa = a.node(), pb = b.node();
  return detail::make_op<T>(a.shape(), std::move(out), "subtract", {a, b},
                            [pa, pb](detail::Node<T>& n) {
                              detail::accum_grad(pa, n.grad.data(), n.grad.size());
                              if (pb->requires_grad) {
                                pb->ensure_grad();
                                kern::sub(pb->grad.data(), n.grad.data(), pb->grad.data(),
                                          n.grad.size());
                              }
                            });
}

template <class T>
Tensor<T> multiply(const Tensor<T>& a, const Tensor<T>& b) {
  detail::check_same_shape(a, b, "multiply");
  std::vector<T> out(a.size());
  kern::mul(a.values().data(), b.values().data(), out.data(), out.size());
  auto pa = a.node(), pb = b.node();
  return detail::make_op<T>(
      a.shape(), std::move(out), "multiply", {a, b}, [pa, pb](detail::Node<T>& n) {
        std::vector<T> tmp(n.grad.size());
        if (pa->requires_grad) {
          kern::mul(n.grad.data(), pb->value.data(), tmp.data(), tmp.size());
          detail::accum_grad(pa, tmp.data(), tmp.size());
        }
        if (pb->requires_grad) {
          kern::mul(n.grad.data(), pa->value.data(), tmp.data(), tmp.size());
          detail::accum_grad(pb, tmp.data(), tmp.size());
        }
      });
}

template <class T>
Tensor<T> add_scalar(const Tensor<T>& x, T c) {
  std::vector<T> out(x.values().begin(), x.values().end());
  for (T& v : out) v += c;
  auto px = x.node();
  return detail::make_op<T>(x.shape(), std::move(out), "add_scalar", {x},
                            [px](detail::Node<T>& n) {
                              detail::accum_grad(px, n.grad.data(), n.grad.size());
                            });
}

template <class T>
Tensor<T> mul_scalar(const Tensor<T>& x, T c) {
  std::vector<T> out(x.size());
  kern::scale(x.values().data(), c, out.data(), out.size());
  auto px = x.node();
  return detail::make_op<T>(x.shape(), std::move(out), "mul_scalar", {x},
                            [px, c](detail::Node<T>& n) {
                              if (!px->requires_grad) return;
                              px->ensure_grad();
                              kern::axpy(c, n.grad.data(), px->grad.data(), n.grad.size());
                            });
}

// x + b broadcast along `axis` (b is 1-D with length shape[axis]).
template <class T>
Tensor<T> bias_add(const Tensor<T>& x, const Tensor<T>& b, int axis) {
  const int ax = detail::normalize_axis(axis, x.rank(), "bias_add");
  if (b.rank() != 1 || b.dim(0) != x.dim(ax))
    throw std::invalid_argument("bias_add: bias shape " + shape_str(b.shape()) +
                                " does not match axis " + std::to_string(axis) + " of " +
                                shape_str(x.shape()));
  std::size_t outer, len, inner;
  detail::axis_extents(x.shape(), ax, outer, len, inner);
  std::vector<T> out(x.values().begin(), x.values().end());
  const T* bias = b.values().data();
  for (std::size_t o = 0; o < outer; ++o)
    for (std::size_t j = 0; j < len; ++j) {
      T* row = out.data() + (o * len + j) * inner;
      for (std::size_t i = 0; i < inner; ++i) row[i] += bias[j];
    }
  auto px = x.node(), pb = b.node();
  return detail::make_op<T>(
      x.shape(), std::move(out), "bias_add", {x, b},
      [px, pb, outer, len, inner](detail::Node<T>& n) {
        detail::accum_grad(px, n.grad.data(), n.grad.size());
        if (pb->requires_grad) {
          pb->ensure_grad();
          for (std::size_t o = 0; o < outer; ++o)
            for (std::size_t j = 0; j < len; ++j)
              pb->grad[j] += kern::sum(n.grad.data() + (o * len + j) * inner, inner);
        }
      });
}

template <class T>
Tensor<T> silu(const Tensor<T>& x) {
  std::vector<T> out(x.size());
  auto vals = x.values();
  for (std::size_t i = 0; i < out.size(); ++i) {
    const T s = T(1) / (T(1) + std::exp(-vals[i]));
    out[i] = vals[i] * s;
  }
  auto px = x.node();
  return detail::make_op<T>(x.shape(), std::move(out), "silu", {x}, [px](detail::Node<T>& n) {
    if (!px->requires_grad) return;
    px->ensure_grad();
    for (std::size_t i = 0; i < n.grad.size(); ++i) {
      const T v = px->value[i];
      const T s = T(1) / (T(1) + std::exp(-v));
      px->grad[i] += n.grad[i] * (s * (T(1) + v * (T(1) - s)));
    }
  });
}

// ---------------------------------------------------------------------------
// Reductions and shape ops
// ---------------------------------------------------------------------------

template <class T>
Tensor<T> sum(const Tensor<T>& x) {
  const T total = kern::sum(x.values().data(), x.size());
  auto px = x.node();
  return detail::make_op<T>({1}, {total}, "sum", {x}, [px](detail::Node<T>& n) {
    if (!px->requires_grad) return;
    px->ensure_grad();
    const T g = n.grad[0];
    for (T& gi : px->grad) gi += g;
  });
}

template <class T>
Tensor<T> mean(const Tensor<T>& x) {
  if (x.size() == 0) throw std::invalid_argument("mean: empty tensor");
  const T inv = T(1) / static_cast<T>(x.size());
  const T m = kern::sum(x.values().data(), x.size()) * inv;
  auto px = x.node();
  return detail::make_op<T>({1}, {m}, "mean", {x}, [px, inv](detail::Node<T>& n) {
    if (!px->requires_grad) return;
    px->ensure_grad();
    const T g = n.grad[0] * inv;
    for (T& gi : px->grad) gi += g;
  });
}

template <class T>
Tensor<T> reshape(const Tensor<T>& x, Shape new_shape) {
  if (numel(new_shape) != x.size())
    throw std::invalid_argument("reshape: cannot view " + shape_str(x.shape()) + " as " +
                                shape_str(new_shape));
  std::vector<T> out(x.values().begin(), x.values().end());
  auto px = x.node();
  return detail::make_op<T>(std::move(new_shape), std::move(out), "reshape", {x},
                            [px](detail::Node<T>& n) {
                              detail::accum_grad(px, n.grad.data(), n.grad.size());
                            });
}

// Collapse all axes after the first into one.
template <class T>
Tensor<T> flatten(const Tensor<T>& x) {
  if (x.rank() < 1) throw std::invalid_argument("flatten: rank-0 tensor");
  return reshape(x, Shape{x.dim(0), x.size() / x.dim(0)});
}

template <class T>
Tensor<T> concatenate(const std::vector<Tensor<T>>& xs, int axis) {
  if (xs.empty()) throw std::invalid_argument("concatenate: no inputs");
  const int ax = detail::normalize_axis(axis, xs[0].rank(), "concatenate");
  Shape out_shape = xs[0].shape();
  std::size_t total_axis = 0;
  for (const auto& x : xs) {
    if (x.rank() != xs[0].rank())
      throw std::invalid_argument("concatenate: rank mismatch");
    for (std::size_t d = 0; d < x.rank(); ++d)
      if (static_cast<int>(d) != ax && x.dim(d) != xs[0].dim(d))
        throw std::invalid_argument("concatenate: shape mismatch " + shape_str(x.shape()) +
                                    " vs " + shape_str(xs[0].shape()));
    total_axis += x.dim(ax);
  }
  out_shape[ax] = total_axis;

  std::size_t outer, len, inner;
  detail::axis_extents(out_shape, ax, outer, len, inner);
  std::vector<T> out(numel(out_shape));
  std::size_t offset = 0;  // in axis units
  for (const auto& x : xs) {
    const std::size_t xa = x.dim(ax);
    const T* src = x.values().data();
    for (std::size_t o = 0; o < outer; ++o)
      std::copy(src + o * xa * inner, src + (o + 1) * xa * inner,
                out.data() + (o * len + offset) * inner);
    offset += xa;
  }

  std::vector<std::shared_ptr<detail::Node<T>>> pnodes;
  std::vector<std::size_t> axis_sizes;
  for (const auto& x : xs) {
    pnodes.push_back(x.node());
    axis_sizes.push_back(x.dim(ax));
  }
  return detail::make_op<T>(
      out_shape, std::move(out), "concatenate", xs,
      [pnodes, axis_sizes, outer, len, inner](detail::Node<T>& n) {
        std::size_t offset = 0;
        for (std::size_t k = 0; k < pnodes.size(); ++k) {
          const auto& p = pnodes[k];
          const std::size_t xa = axis_sizes[k];
          if (p->requires_grad) {
            p->ensure_grad();
            for (std::size_t o = 0; o < outer; ++o) {
              const T* g = n.grad.data() + (o * len + offset) * inner;
              kern::add(p->grad.data() + o * xa * inner, g, p->grad.data() + o * xa * inner,
                        xa * inner);
            }
          }
          offset += xa;
        }
      });
}

// ---------------------------------------------------------------------------
// Matrix products
// ---------------------------------------------------------------------------

template <class T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0))
    throw std::invalid_argument("matmul: incompatible shapes " + shape_str(a.shape()) + " x " +
                                shape_str(b.shape()));
  const std::size_t M = a.dim(0), K = a.dim(1), N = b.dim(1);
  std::vector<T> out(M * N, T(0));
  detail::matmul_acc(a.values().data(), b.values().data(), out.data(), M, K, N);
  auto pa = a.node(), pb = b.node();
  return detail::make_op<T>(
      {M, N}, std::move(out), "matmul", {a, b}, [pa, pb, M, K, N](detail::Node<T>& n) {
        if (pa->requires_grad) {
          pa->ensure_grad();
          detail::matmul_abT_acc(n.grad.data(), pb->value.data(), pa->grad.data(), M, N, K);
        }
        if (pb->requires_grad) {
          pb->ensure_grad();
          detail::matmul_aTb_acc(pa->value.data(), n.grad.data(), pb->grad.data(), M, K, N);
        }
      });
}

template <class T>
Tensor<T> batched_matmul(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.rank() != 3 || b.rank() != 3 || a.dim(0) != b.dim(0) || a.dim(2) != b.dim(1))
    throw std::invalid_argument("batched_matmul: incompatible shapes " + shape_str(a.shape()) +
                                " x " + shape_str(b.shape()));
  const std::size_t B = a.dim(0), M = a.dim(1), K = a.dim(2), N = b.dim(2);
  std::vector<T> out(B * M * N, T(0));
  for (std::size_t i = 0; i < B; ++i)
    detail::matmul_acc(a.values().data() + i * M * K, b.values().data() + i * K * N,
                       out.data() + i * M * N, M, K, N);
  auto pa = a.node(), pb = b.node();
  return detail::make_op<T>(
      {B, M, N}, std::move(out), "batched_matmul", {a, b},
      [pa, pb, B, M, K, N](detail::Node<T>& n) {
        for (std::size_t i = 0; i < B; ++i) {
          const T* g = n.grad.data() + i * M * N;
          if (pa->requires_grad) {
            pa->ensure_grad();
            detail::matmul_abT_acc(g, pb->value.data() + i * K * N,
                                   pa->grad.data() + i * M * K, M, N, K);
          }
          if (pb->requires_grad) {
            pb->ensure_grad();
            detail::matmul_aTb_acc(pa->value.data() + i * M * K, g,
                                   pb->grad.data() + i * K * N, M, K, N);
          }
        }
      });
}

// ---------------------------------------------------------------------------
// Softmax
// ---------------------------------------------------------------------------

// Numerically stabilized softmax along `axis` (max subtraction).
template <class T>
Tensor<T> softmax(const Tensor<T>& x, int axis) {
  const int ax = detail::normalize_axis(axis, x.rank(), "softmax");
  std::size_t outer, len, inner;
  detail::axis_extents(x.shape(), ax, outer, len, inner);
  std::vector<T> out(x.size());
  const T* in = x.values().data();
  for (std::size_t o = 0; o < outer; ++o)
    for (std::size_t i = 0; i < inner; ++i) {
      const std::size_t base = o * len * inner + i;
      T mx = in[base];
      for (std::size_t j = 1; j < len; ++j) mx = std::max(mx, in[base + j * inner]);
      T denom = T(0);
      for (std::size_t j = 0; j < len; ++j) {
        const T e = std::exp(in[base + j * inner] - mx);
        out[base + j * inner] = e;
        denom += e;
      }
      const T inv = T(1) / denom;
      for (std::size_t j = 0; j < len; ++j) out[base + j * inner] *= inv;
    }
  auto px = x.node();
  return detail::make_op<T>(
      x.shape(), std::move(out), "softmax", {x},
      [px, outer, len, inner](detail::Node<T>& n) {
        if (!px->requires_grad) return;
        px->ensure_grad();
        for (std::size_t o = 0; o < outer; ++o)
          for (std::size_t i = 0; i < inner; ++i) {
            const std::size_t base = o * len * inner + i;
            T dot = T(0);
            for (std::size_t j = 0; j < len; ++j)
              dot += n.grad[base + j * inner] * n.value[base + j * inner];
            for (std::size_t j = 0; j < len; ++j) {
              const std::size_t k = base + j * inner;
              px->grad[k] += n.value[k] * (n.grad[k] - dot);
            }
          }
      });
}

// ---------------------------------------------------------------------------
// Convolution (cross-correlation, NCHW) and pooling
// ---------------------------------------------------------------------------

namespace detail {

struct ConvDims {
  std::size_t N, C, H, W, O, KH, KW, OH, OW;
  std::size_t stride, pad;
  std::size_t ckk() const { return C * KH * KW; }
  std::size_t patches() const { return OH * OW; }
};

template <class T>
void im2col(const T* img, const ConvDims& d, T* cols) {
  // cols is [C*KH*KW, OH*OW]
  for (std::size_t c = 0; c < d.C; ++c)
    for (std::size_t ky = 0; ky < d.KH; ++ky)
      for (std::size_t kx = 0; kx < d.KW; ++kx) {
        T* row = cols + ((c * d.KH + ky) * d.KW + kx) * d.patches();
        for (std::size_t oy = 0; oy < d.OH; ++oy) {
          const long y = static_cast<long>(oy * d.stride + ky) - static_cast<long>(d.pad);
          for (std::size_t ox = 0; ox < d.OW; ++ox) {
            const long x = static_cast<long>(ox * d.stride + kx) - static_cast<long>(d.pad);
            row[oy * d.OW + ox] =
                (y >= 0 && y < static_cast<long>(d.H) && x >= 0 && x < static_cast<long>(d.W))
                    ? img[(c * d.H + static_cast<std::size_t>(y)) * d.W +
                          static_cast<std::size_t>(x)]
                    : T(0);
          }
        }
      }
}

template <class T>
void col2im_acc(const T* cols, const ConvDims& d, T* img) {
  for (std::size_t c = 0; c < d.C; ++c)
    for (std::size_t ky = 0; ky < d.KH; ++ky)
      for (std::size_t kx = 0; kx < d.KW; ++kx) {
        const T* row = cols + ((c * d.KH + ky) * d.KW + kx) * d.patches();
        for (std::size_t oy = 0; oy < d.OH; ++oy) {
          const long y = static_cast<long>(oy * d.stride + ky) - static_cast<long>(d.pad);
          if (y < 0 || y >= static_cast<long>(d.H)) continue;
          for (std::size_t ox = 0; ox < d.OW; ++ox) {
            const long x = static_cast<long>(ox * d.stride + kx) - static_cast<long>(d.pad);
            if (x < 0 || x >= static_cast<long>(d.W)) continue;
            img[(c * d.H + static_cast<std::size_t>(y)) * d.W + static_cast<std::size_t>(x)] +=
                row[oy * d.OW + ox];
          }
        }
      }
}

}  // namespace detail

// 2-D cross-correlation (no kernel flip). input [N,C,H,W], kernel [O,C,kh,kw].
template <class T>
Tensor<T> conv2d(const Tensor<T>& input, const Tensor<T>& kernel, std::size_t stride,
                 std::size_t padding) {
  if (input.rank() != 4 || kernel.rank() != 4)
    throw std::invalid_argument("conv2d: input and kernel must be rank 4, got " +
                                shape_str(input.shape()) + " and " + shape_str(kernel.shape()));
  if (stride == 0) throw std::invalid_argument("conv2d: stride must be positive");
  detail::ConvDims d;
  d.N = input.dim(0); d.C = input.dim(1); d.H = input.dim(2); d.W = input.dim(3);
  d.O = kernel.dim(0); d.KH = kernel.dim(2); d.KW = kernel.dim(3);
  d.stride = stride; d.pad = padding;
  if (kernel.dim(1) != d.C)
    throw std::invalid_argument("conv2d: input has " + std::to_string(d.C) +
                                " channels but kernel expects " + std::to_string(kernel.dim(1)));
  if (d.KH > d.H + 2 * padding || d.KW > d.W + 2 * padding)
    throw std::invalid_argument("conv2d: kernel " + std::to_string(d.KH) + "x" +
                                std::to_string(d.KW) + " larger than padded input");
  d.OH = (d.H + 2 * padding - d.KH) / stride + 1;
  d.OW = (d.W + 2 * padding - d.KW) / stride + 1;

  const std::size_t ckk = d.ckk(), P = d.patches();
  auto cols = std::make_shared<std::vector<T>>(d.N * ckk * P);
  std::vector<T> out(d.N * d.O * P, T(0));
  const T* in = input.values().data();
  const T* w = kernel.values().data();
  for (std::size_t n = 0; n < d.N; ++n) {
    T* cn = cols->data() + n * ckk * P;
    detail::im2col(in + n * d.C * d.H * d.W, d, cn);
    detail::matmul_acc(w, cn, out.data() + n * d.O * P, d.O, ckk, P);
  }

  auto pin = input.node(), pker = kernel.node();
  return detail::make_op<T>(
      {d.N, d.O, d.OH, d.OW}, std::move(out), "conv2d", {input, kernel},
      [pin, pker, d, cols](detail::Node<T>& n) {
        const std::size_t ckk = d.ckk(), P = d.patches();
        std::vector<T> dcols(ckk * P);
        for (std::size_t i = 0; i < d.N; ++i) {
          const T* g = n.grad.data() + i * d.O * P;
          if (pker->requires_grad) {
            pker->ensure_grad();
            detail::matmul_abT_acc(g, cols->data() + i * ckk * P, pker->grad.data(), d.O, P, ckk);
          }
          if (pin->requires_grad) {
            pin->ensure_grad();
            std::fill(dcols.begin(), dcols.end(), T(0));
            detail::matmul_aTb_acc(pker->value.data(), g, dcols.data(), d.O, ckk, P);
            detail::col2im_acc(dcols.data(), d, pin->grad.data() + i * d.C * d.H * d.W);
          }
        }
      });
}

// Adaptive average pooling: output cell (i,j) is the mean of the input bin
// [floor(i*H/oh), ceil((i+1)*H/oh)) x [floor(j*W/ow), ceil((j+1)*W/ow)).
template <class T>
Tensor<T> adaptive_avg_pool2d(const Tensor<T>& input, std::size_t out_h, std::size_t out_w) {
  if (input.rank() != 4)
    throw std::invalid_argument("adaptive_avg_pool2d: input must be rank 4");
  if (out_h == 0 || out_w == 0)
    throw std::invalid_argument("adaptive_avg_pool2d: output extents must be positive");
  const std::size_t N = input.dim(0), C = input.dim(1), H = input.dim(2), W = input.dim(3);
  if (out_h > H || out_w > W)
    throw std::invalid_argument("adaptive_avg_pool2d: target " + std::to_string(out_h) + "x" +
                                std::to_string(out_w) + " exceeds input " + std::to_string(H) +
                                "x" + std::to_string(W));
  auto bin_lo = [](std::size_t i, std::size_t in, std::size_t out) { return i * in / out; };
  auto bin_hi = [](std::size_t i, std::size_t in, std::size_t out) {
    return ((i + 1) * in + out - 1) / out;
  };
  std::vector<T> out(N * C * out_h * out_w);
  const T* in = input.values().data();
  for (std::size_t nc = 0; nc < N * C; ++nc) {
    const T* plane = in + nc * H * W;
    T* oplane = out.data() + nc * out_h * out_w;
    for (std::size_t i = 0; i < out_h; ++i) {
      const std::size_t y0 = bin_lo(i, H, out_h), y1 = bin_hi(i, H, out_h);
      for (std::size_t j = 0; j < out_w; ++j) {
        const std::size_t x0 = bin_lo(j, W, out_w), x1 = bin_hi(j, W, out_w);
        T acc = T(0);
        for (std::size_t y = y0; y < y1; ++y)
          acc += kern::sum(plane + y * W + x0, x1 - x0);
        oplane[i * out_w + j] = acc / static_cast<T>((y1 - y0) * (x1 - x0));
      }
    }
  }
  auto pin = input.node();
  return detail::make_op<T>(
      {N, C, out_h, out_w}, std::move(out), "adaptive_avg_pool2d", {input},
      [pin, N, C, H, W, out_h, out_w, bin_lo, bin_hi](detail::Node<T>& n) {
        if (!pin->requires_grad) return;
        pin->ensure_grad();
        for (std::size_t nc = 0; nc < N * C; ++nc) {
          T* gplane = pin->grad.data() + nc * H * W;
          const T* g = n.grad.data() + nc * out_h * out_w;
          for (std::size_t i = 0; i < out_h; ++i) {
            const std::size_t y0 = bin_lo(i, H, out_h), y1 = bin_hi(i, H, out_h);
            for (std::size_t j = 0; j < out_w; ++j) {
              const std::size_t x0 = bin_lo(j, W, out_w), x1 = bin_hi(j, W, out_w);
              const T share = g[i * out_w + j] / static_cast<T>((y1 - y0) * (x1 - x0));
              for (std::size_t y = y0; y < y1; ++y)
                for (std::size_t x = x0; x < x1; ++x) gplane[y * W + x] += share;
            }
          }
        }
      });
}

// ---------------------------------------------------------------------------
// Classification losses
// ---------------------------------------------------------------------------

// Mean softmax cross-entropy over the batch. logits [B,K], labels in [0,K).
template <class T>
Tensor<T> cross_entropy_loss(const Tensor<T>& logits, const std::vector<int>& labels) {
  if (logits.rank() != 2)
    throw std::invalid_argument("cross_entropy_loss: logits must be [B,K]");
  const std::size_t B = logits.dim(0), K = logits.dim(1);
  if (labels.size() != B)
    throw std::invalid_argument("cross_entropy_loss: " + std::to_string(labels.size()) +
                                " labels for batch " + std::to_string(B));
  auto probs = std::make_shared<std::vector<T>>(B * K);
  const T* in = logits.values().data();
  T loss = T(0);
  for (std::size_t b = 0; b < B; ++b) {
    const int y = labels[b];
    if (y < 0 || static_cast<std::size_t>(y) >= K)
      throw std::invalid_argument("cross_entropy_loss: label " + std::to_string(y) +
                                  " out of range for K=" + std::to_string(K));
    const T* row = in + b * K;
    T mx = row[0];
    for (std::size_t k = 1; k < K; ++k) mx = std::max(mx, row[k]);
    T denom = T(0);
    for (std::size_t k = 0; k < K; ++k) {
      const T e = std::exp(row[k] - mx);
      (*probs)[b * K + k] = e;
      denom += e;
    }
    const T inv = T(1) / denom;
    for (std::size_t k = 0; k < K; ++k) (*probs)[b * K + k] *= inv;
    loss -= std::log((*probs)[b * K + y]);
  }
  loss /= static_cast<T>(B);
  auto plog = logits.node();
  return detail::make_op<T>(
      {1}, {loss}, "cross_entropy_loss", {logits},
      [plog, probs, labels, B, K](detail::Node<T>& n) {
        if (!plog->requires_grad) return;
        plog->ensure_grad();
        const T g = n.grad[0] / static_cast<T>(B);
        for (std::size_t b = 0; b < B; ++b)
          for (std::size_t k = 0; k < K; ++k) {
            T p = (*probs)[b * K + k];
            if (static_cast<std::size_t>(labels[b]) == k) p -= T(1);
            plog->grad[b * K + k] += g * p;
          }
      });
}

}  // namespace capskan
