#pragma once

// Data-parallel arithmetic kernels behind the tensor ops.
//
// Every kernel has a scalar reference implementation and, where the target
// supports it, a SIMD variant (AVX2+FMA on x86-64, NEON on aarch64). The
// active variant is chosen once at startup from CPUID and can be overridden
// with set_isa() or the CAPSKAN_ISA environment variable (scalar|avx2|neon).
// Variants are equivalence-tested against the scalar reference; reductions
// use a fixed lane order so results are bit-stable for a given ISA.

#include <cstddef>
#include <string_view>

namespace capskan::kern {

enum class Isa { scalar = 0, avx2 = 1, neon = 2 };

// Best ISA this machine supports.
Isa detected_isa();
// Currently selected ISA.
Isa active_isa();
// Select an ISA. Throws std::invalid_argument if unsupported on this machine.
void set_isa(Isa isa);
std::string_view isa_name(Isa isa);

// y[i] = a[i] + b[i]
void add(const float* a, const float* b, float* y, std::size_t n);
void add(const double* a, const double* b, double* y, std::size_t n);
// y[i] = a[i] - b[i]
void sub(const float* a, const float* b, float* y, std::size_t n);
void sub(const double* a, const double* b, double* y, std::size_t n);
// y[i] = a[i] * b[i]
void mul(const float* a, const float* b, float* y, std::size_t n);
void mul(const double* a, const double* b, double* y, std::size_t n);
// y[i] = s * x[i]
void scale(const float* x, float s, float* y, std::size_t n);
void scale(const double* x, double s, double* y, std::size_t n);
// y[i] += s * x[i]
void axpy(float s, const float* x, float* y, std::size_t n);
void axpy(double s, const double* x, double* y, std::size_t n);
// sum_i a[i]*b[i]
float dot(const float* a, const float* b, std::size_t n);
double dot(const double* a, const double* b, std::size_t n);
// sum_i x[i]
float sum(const float* x, std::size_t n);
double sum(const double* x, std::size_t n);

// Scoped ISA override for tests.
class IsaGuard {
 public:
  explicit IsaGuard(Isa isa) : saved_(active_isa()) { set_isa(isa); }
  ~IsaGuard() { set_isa(saved_); }
  IsaGuard(const IsaGuard&) = delete;
  IsaGuard& operator=(const IsaGuard&) = delete;

 private:
  Isa saved_;
};

}  // namespace capskan::kern
