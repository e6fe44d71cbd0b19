// Scalar reference kernels. These define the semantics the SIMD variants are
// tested against; keep them as plain loops.

#include "kernels_internal.hpp"

namespace capskan::kern::scalar {

namespace {

template <class T>
inline void add_impl(const T* a, const T* b, T* y, std::size_t n) {
  for (std::size_t i = 0; i < n; ++i) y[i] = a[i] + b[i];
}

template <class T>
inline void sub_impl(const T* a, const T* b, T* y, std::size_t n) {
  for (std::size_t i = 0; i < n; ++i) y[i] = a[i] - b[i];
}

template <class T>
inline void mul_impl(const T* a, const T* b, T* y, std::size_t n) {
  for (std::size_t i = 0; i < n; ++i) y[i] = a[i] * b[i];
}

template <class T>
inline void scale_impl(const T* x, T s, T* y, std::size_t n) {
  for (std::size_t i = 0; i < n; ++i) y[i] = s * x[i];
}

template <class T>
inline void axpy_impl(T s, const T* x, T* y, std::size_t n) {
  for (std::size_t i = 0; i < n; ++i) y[i] += s * x[i];
}

template <class T>
inline T dot_impl(const T* a, const T* b, std::size_t n) {
  T acc = T(0);
  for (std::size_t i = 0; i < n; ++i) acc += a[i] * b[i];
  return acc;
}

template <class T>
inline T sum_impl(const T* x, std::size_t n) {
  T acc = T(0);
  for (std::size_t i = 0; i < n; ++i) acc += x[i];
  return acc;
}

}  // namespace

void add(const float* a, const float* b, float* y, std::size_t n) { add_impl(a, b, y, n); }
void add(const double* a, const double* b, double* y, std::size_t n) { add_impl(a, b, y, n); }
void sub(const float* a, const float* b, float* y, std::size_t n) { sub_impl(a, b, y, n); }
void sub(const double* a, const double* b, double* y, std::size_t n) { sub_impl(a, b, y, n); }
void mul(const float* a, const float* b, float* y, std::size_t n) { mul_impl(a, b, y, n); }
void mul(const double* a, const double* b, double* y, std::size_t n) { mul_impl(a, b, y, n); }
void scale(const float* x, float s, float* y, std::size_t n) { scale_impl(x, s, y, n); }
void scale(const double* x, double s, double* y, std::size_t n) { scale_impl(x, s, y, n); }
void axpy(float s, const float* x, float* y, std::size_t n) { axpy_impl(s, x, y, n); }
void axpy(double s, const double* x, double* y, std::size_t n) { axpy_impl(s, x, y, n); }
float dot(const float* a, const float* b, std::size_t n) { return dot_impl(a, b, n); }
double dot(const double* a, const double* b, std::size_t n) { return dot_impl(a, b, n); }
float sum(const float* x, std::size_t n) { return sum_impl(x, n); }
double sum(const double* x, std::size_t n) { return sum_impl(x, n); }

}  // namespace capskan::kern::scalar
