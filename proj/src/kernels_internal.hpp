#pragma once

#include <cstddef>

// Per-ISA kernel entry points. Each backend implements the full set; the
// dispatcher in kernels_dispatch.cpp wires the active one into the public API.

#define CAPSKAN_KERNEL_DECLS(ns)                                          \
  namespace capskan::kern::ns {                                          \
  void add(const float* a, const float* b, float* y, std::size_t n);     \
  void add(const double* a, const double* b, double* y, std::size_t n);  \
  void sub(const float* a, const float* b, float* y, std::size_t n);     \
  void sub(const double* a, const double* b, double* y, std::size_t n);  \
  void mul(const float* a, const float* b, float* y, std::size_t n);     \
  void mul(const double* a, const double* b, double* y, std::size_t n);  \
  void scale(const float* x, float s, float* y, std::size_t n);          \
  void scale(const double* x, double s, double* y, std::size_t n);       \
  void axpy(float s, const float* x, float* y, std::size_t n);           \
  void axpy(double s, const double* x, double* y, std::size_t n);        \
  float dot(const float* a, const float* b, std::size_t n);              \
  double dot(const double* a, const double* b, std::size_t n);           \
  float sum(const float* x, std::size_t n);                              \
  double sum(const double* x, std::size_t n);                            \
  }

CAPSKAN_KERNEL_DECLS(scalar)

#if defined(__x86_64__) || defined(_M_X64)
#define CAPSKAN_HAVE_AVX2_BACKEND 1
CAPSKAN_KERNEL_DECLS(avx2)
#endif

#if defined(__aarch64__)
#define CAPSKAN_HAVE_NEON_BACKEND 1
CAPSKAN_KERNEL_DECLS(neon)
#endif
