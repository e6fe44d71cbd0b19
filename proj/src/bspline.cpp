#include "capskan/bspline.hpp"

#include <stdexcept>
#include <string>

namespace capskan {

KnotVector::KnotVector(std::vector<double> k, int p) : knots(std::move(k)), degree(p) {
  if (degree < 0) throw std::invalid_argument("KnotVector: degree must be non-negative");
  if (knots.size() < static_cast<std::size_t>(2 * degree + 2))
    throw std::invalid_argument("KnotVector: need at least 2p+2 knots for degree " +
                                std::to_string(degree) + ", got " +
                                std::to_string(knots.size()));
  for (std::size_t i = 0; i + 1 < knots.size(); ++i)
    if (knots[i] > knots[i + 1])
      throw std::invalid_argument("KnotVector: knots must be non-decreasing (violated at index " +
                                  std::to_string(i) + ")");
}

double basis_order0(const KnotVector& kv, std::size_t i, double t) {
  const auto& K = kv.knots;
  if (i + 1 > kv.last_index())
    throw std::out_of_range("basis_order0: index " + std::to_string(i) + " out of range");
  if (t >= K[i] && t < K[i + 1]) return 1.0;
  // Closed last interval: the final knot itself belongs to the last
  // non-empty interval.
  if (t == K.back() && K[i + 1] == K.back() && K[i] < K[i + 1]) return 1.0;
  return 0.0;
}

double basis(const KnotVector& kv, std::size_t i, int j, double t) {
  if (j < 0) throw std::invalid_argument("basis: negative degree");
  if (i + j + 1 > kv.last_index())
    throw std::out_of_range("basis: N_{" + std::to_string(i) + "," + std::to_string(j) +
                            "} needs knot t_" + std::to_string(i + j + 1) +
                            " but the vector ends at t_" + std::to_string(kv.last_index()));
  if (j == 0) return basis_order0(kv, i, t);
  const auto& K = kv.knots;
  double acc = 0.0;
  const double d_left = K[i + j] - K[i];
  if (d_left != 0.0) acc += (t - K[i]) / d_left * basis(kv, i, j - 1, t);
  const double d_right = K[i + j + 1] - K[i + 1];
  if (d_right != 0.0) acc += (K[i + j + 1] - t) / d_right * basis(kv, i + 1, j - 1, t);
  return acc;
}

std::vector<double> basis_row(const KnotVector& kv, double t) {
  const double lo = kv.domain_begin(), hi = kv.domain_end();
  if (t < lo) t = lo;
  if (t > hi) t = hi;
  std::vector<double> row(kv.basis_count());
  for (std::size_t i = 0; i < row.size(); ++i) row[i] = basis(kv, i, kv.degree, t);
  return row;
}

}  // namespace capskan
