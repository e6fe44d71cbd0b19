#include "capskan/kernels.hpp"

#include <atomic>
#include <cstdlib>
#include <stdexcept>
#include <string>

#include "kernels_internal.hpp"

namespace capskan::kern {

namespace {

struct KernelTable {
  void (*add_f)(const float*, const float*, float*, std::size_t);
  void (*add_d)(const double*, const double*, double*, std::size_t);
  void (*sub_f)(const float*, const float*, float*, std::size_t);
  void (*sub_d)(const double*, const double*, double*, std::size_t);
  void (*mul_f)(const float*, const float*, float*, std::size_t);
  void (*mul_d)(const double*, const double*, double*, std::size_t);
  void (*scale_f)(const float*, float, float*, std::size_t);
  void (*scale_d)(const double*, double, double*, std::size_t);
  void (*axpy_f)(float, const float*, float*, std::size_t);
  void (*axpy_d)(double, const double*, double*, std::size_t);
  float (*dot_f)(const float*, const float*, std::size_t);
  double (*dot_d)(const double*, const double*, std::size_t);
  float (*sum_f)(const float*, std::size_t);
  double (*sum_d)(const double*, std::size_t);
};

#define CAPSKAN_FILL_TABLE(ns)                                              \
  {                                                                         \
    static_cast<void (*)(const float*, const float*, float*, std::size_t)>(ns::add),   \
    static_cast<void (*)(const double*, const double*, double*, std::size_t)>(ns::add),\
    static_cast<void (*)(const float*, const float*, float*, std::size_t)>(ns::sub),   \
    static_cast<void (*)(const double*, const double*, double*, std::size_t)>(ns::sub),\
    static_cast<void (*)(const float*, const float*, float*, std::size_t)>(ns::mul),   \
    static_cast<void (*)(const double*, const double*, double*, std::size_t)>(ns::mul),\
    static_cast<void (*)(const float*, float, float*, std::size_t)>(ns::scale),        \
    static_cast<void (*)(const double*, double, double*, std::size_t)>(ns::scale),     \
    static_cast<void (*)(float, const float*, float*, std::size_t)>(ns::axpy),         \
    static_cast<void (*)(double, const double*, double*, std::size_t)>(ns::axpy),      \
    static_cast<float (*)(const float*, const float*, std::size_t)>(ns::dot),          \
    static_cast<double (*)(const double*, const double*, std::size_t)>(ns::dot),       \
    static_cast<float (*)(const float*, std::size_t)>(ns::sum),                        \
    static_cast<double (*)(const double*, std::size_t)>(ns::sum),                      \
  }

constexpr KernelTable kScalarTable = CAPSKAN_FILL_TABLE(scalar);
#ifdef CAPSKAN_HAVE_AVX2_BACKEND
constexpr KernelTable kAvx2Table = CAPSKAN_FILL_TABLE(avx2);
#endif
#ifdef CAPSKAN_HAVE_NEON_BACKEND
constexpr KernelTable kNeonTable = CAPSKAN_FILL_TABLE(neon);
#endif

bool isa_supported(Isa isa) {
  switch (isa) {
    case Isa::scalar:
      return true;
    case Isa::avx2:
#ifdef CAPSKAN_HAVE_AVX2_BACKEND
      return __builtin_cpu_supports("avx2") && __builtin_cpu_supports("fma");
#else
      return false;
#endif
    case Isa::neon:
#ifdef CAPSKAN_HAVE_NEON_BACKEND
      return true;  // baseline on aarch64
#else
      return false;
#endif
  }
  return false;
}

const KernelTable* table_for(Isa isa) {
  switch (isa) {
#ifdef CAPSKAN_HAVE_AVX2_BACKEND
    case Isa::avx2:
      return &kAvx2Table;
#endif
#ifdef CAPSKAN_HAVE_NEON_BACKEND
    case Isa::neon:
      return &kNeonTable;
#endif
    default:
      return &kScalarTable;
  }
}

Isa initial_isa() {
  if (const char* env = std::getenv("CAPSKAN_ISA")) {
    const std::string v(env);
    Isa want = Isa::scalar;
    if (v == "scalar") want = Isa::scalar;
    else if (v == "avx2") want = Isa::avx2;
    else if (v == "neon") want = Isa::neon;
    else return detected_isa();  // unrecognized value: fall back to detection
    if (isa_supported(want)) return want;
  }
  return detected_isa();
}

struct Dispatch {
  Isa isa;
  const KernelTable* table;
  Dispatch() : isa(initial_isa()), table(table_for(isa)) {}
};

Dispatch& dispatch() {
  static Dispatch d;
  return d;
}

}  // namespace

Isa detected_isa() {
#ifdef CAPSKAN_HAVE_AVX2_BACKEND
  if (isa_supported(Isa::avx2)) return Isa::avx2;
#endif
#ifdef CAPSKAN_HAVE_NEON_BACKEND
  return Isa::neon;
#endif
  return Isa::scalar;
}

Isa active_isa() { return dispatch().isa; }

void set_isa(Isa isa) {
  if (!isa_supported(isa))
    throw std::invalid_argument("kern::set_isa: " + std::string(isa_name(isa)) +
                                " is not supported on this machine");
  dispatch().isa = isa;
  dispatch().table = table_for(isa);
}

std::string_view isa_name(Isa isa) {
  switch (isa) {
    case Isa::scalar: return "scalar";
    case Isa::avx2: return "avx2";
    case Isa::neon: return "neon";
  }
  return "unknown";
}

void add(const float* a, const float* b, float* y, std::size_t n) { dispatch().table->add_f(a, b, y, n); }
void add(const double* a, const double* b, double* y, std::size_t n) { dispatch().table->add_d(a, b, y, n); }
void sub(const float* a, const float* b, float* y, std::size_t n) { dispatch().table->sub_f(a, b, y, n); }
void sub(const double* a, const double* b, double* y, std::size_t n) { dispatch().table->sub_d(a, b, y, n); }
void mul(const float* a, const float* b, float* y, std::size_t n) { dispatch().table->mul_f(a, b, y, n); }
void mul(const double* a, const double* b, double* y, std::size_t n) { dispatch().table->mul_d(a, b, y, n); }
void scale(const float* x, float s, float* y, std::size_t n) { dispatch().table->scale_f(x, s, y, n); }
void scale(const double* x, double s, double* y, std::size_t n) { dispatch().table->scale_d(x, s, y, n); }
void axpy(float s, const float* x, float* y, std::size_t n) { dispatch().table->axpy_f(s, x, y, n); }
void axpy(double s, const double* x, double* y, std::size_t n) { dispatch().table->axpy_d(s, x, y, n); }
float dot(const float* a, const float* b, std::size_t n) { return dispatch().table->dot_f(a, b, n); }
double dot(const double* a, const double* b, std::size_t n) { return dispatch().table->dot_d(a, b, n); }
float sum(const float* x, std::size_t n) { return dispatch().table->sum_f(x, n); }
double sum(const double* x, std::size_t n) { return dispatch().table->sum_d(x, n); }

}  // namespace capskan::kern
