#pragma once

// Finite-difference gradient verification. All checks rebuild their graph in
// double precision and compare reverse-mode gradients against central
// differences with h = 1e-5. An element passes when the absolute difference
// is below the 1e-7 noise floor or the relative error
// |fd - analytic| / max(|fd|, |analytic|, 1e-8) is at most 1e-4.

#include <functional>
#include <ostream>
#include <string>
#include <utility>
#include <vector>

#include "capskan/tensor.hpp"

namespace capskan::gradcheck {

inline constexpr double kStep = 1e-5;
inline constexpr double kNoiseFloor = 1e-7;
inline constexpr double kRelTolerance = 1e-4;

struct Outcome {
  std::string component;
  double max_rel = 0.0;       // largest relative error above the noise floor
  std::size_t checked = 0;    // elements compared
  bool ok = true;
  std::string first_failure;  // empty when ok
};

// `loss_fn` must rebuild the scalar loss from the listed tensors each call.
Outcome check(const std::string& component,
              const std::function<Tensor<double>()>& loss_fn,
              const std::vector<std::pair<std::string, Tensor<double>>>& wrt);

std::vector<std::string> scope_names();  // bspline, kan, convkan, capsules, models

// Runs every check in `scope` ("all" covers each scope once), printing one
// summary line per component to `out`.
std::vector<Outcome> run_scope(const std::string& scope, std::ostream& out);

bool all_ok(const std::vector<Outcome>& outcomes);

// Runs a check against an op whose backward pass is deliberately mis-scaled;
// the harness is healthy only if this outcome reports failure.
Outcome run_negative_control(std::ostream& out);

}  // namespace capskan::gradcheck
