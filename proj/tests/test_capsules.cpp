#include <cmath>
#include <vector>

#include "capskan/capsules.hpp"
#include "capskan/ops.hpp"
#include "capskan/rng.hpp"
#include "doctest.h"
#include "support/oracles.hpp"

using capskan::Rng;
using capskan::RoutingLayer;
using capskan::Shape;
using capskan::Tensor;

namespace {

Tensor<double> randn(Shape shape, Rng& rng, bool requires_grad = true, double sd = 1.0) {
  std::vector<double> v(capskan::numel(shape));
  for (auto& x : v) x = rng.normal(0.0, sd);
  return Tensor<double>::from(std::move(shape), std::move(v), requires_grad);
}

}  // namespace

// ---------------------------------------------------------------------------
// squash
// ---------------------------------------------------------------------------

TEST_CASE("squash preserves direction and bounds the norm below one") {
  Rng rng(1);
  auto v = randn({3, 4, 5}, rng, false, 2.0);
  auto s = capskan::squash(v);
  REQUIRE(s.shape() == v.shape());
  const std::vector<double> vv(v.values().begin(), v.values().end());
  auto ref = testsup::squash_ref(vv, 5);
  for (std::size_t i = 0; i < ref.size(); ++i)
    CHECK(s.values()[i] == doctest::Approx(ref[i]).epsilon(1e-12));
  for (std::size_t r = 0; r < 12; ++r) {
    double n_in = 0, n_out = 0, dot = 0;
    for (std::size_t d = 0; d < 5; ++d) {
      n_in += v.values()[r * 5 + d] * v.values()[r * 5 + d];
      n_out += s.values()[r * 5 + d] * s.values()[r * 5 + d];
      dot += v.values()[r * 5 + d] * s.values()[r * 5 + d];
    }
    n_in = std::sqrt(n_in);
    n_out = std::sqrt(n_out);
    CHECK(n_out < 1.0);
    CHECK(n_out == doctest::Approx(n_in * n_in / (1.0 + n_in * n_in)).epsilon(1e-6));
    CHECK(dot >= 0.0);  // same direction
  }
}

TEST_CASE("squash maps the zero vector to zero and long vectors near unit length") {
  auto z = Tensor<double>::zeros({1, 3});
  auto sz = capskan::squash(z);
  for (double e : sz.values()) CHECK(e == 0.0);
  auto big = Tensor<double>::from({1, 2}, {300.0, 400.0});
  auto sb = capskan::squash(big);
  const double n = std::hypot(sb.values()[0], sb.values()[1]);
  CHECK(n > 0.999);
  CHECK(n < 1.0);
}

TEST_CASE("squash gradient passes finite differences away from the origin") {
  Rng rng(2);
  auto v = randn({2, 3, 4}, rng, true, 1.5);
  auto loss = [&] {
    auto s = capskan::squash(v);
    return capskan::sum(capskan::multiply(s, s));
  };
  CHECK(testsup::fd_max_rel(loss, {v}) < 1e-4);
}

// ---------------------------------------------------------------------------
// primary capsules
// ---------------------------------------------------------------------------

TEST_CASE("primary_caps regroups the feature volume then squashes") {
  Rng rng(3);
  const std::size_t N = 2, C = 4, H = 3, W = 2, D = 8;
  auto f = randn({N, C, H, W}, rng, false);
  auto caps = capskan::primary_caps(f, D);
  const std::size_t volume = C * H * W;
  REQUIRE(caps.shape() == Shape{N, volume / D, D});
  // Layout oracle: flatten CHW per sample, chop into groups of D, squash.
  for (std::size_t n = 0; n < N; ++n) {
    std::vector<double> flat(volume);
    for (std::size_t i = 0; i < volume; ++i) flat[i] = f.values()[n * volume + i];
    auto ref = testsup::squash_ref(flat, D);
    for (std::size_t i = 0; i < volume; ++i)
      CHECK(caps.values()[n * volume + i] == doctest::Approx(ref[i]).epsilon(1e-12));
  }
}

TEST_CASE("primary_caps validates rank and divisibility") {
  auto f = Tensor<double>::zeros({2, 3, 4, 4});  // volume 48
  CHECK_NOTHROW(capskan::primary_caps(f, 8));
  CHECK_THROWS_AS(capskan::primary_caps(f, 5), std::invalid_argument);
  CHECK_THROWS_AS(capskan::primary_caps(f, 0), std::invalid_argument);
  CHECK_THROWS_AS(capskan::primary_caps(Tensor<double>::zeros({2, 48}), 8),
                  std::invalid_argument);
}

// ---------------------------------------------------------------------------
// transform / coupling / agreement building blocks
// ---------------------------------------------------------------------------

TEST_CASE("capsule_transform applies W[i,j] to u[b,i] as a matrix product") {
  Rng rng(4);
  const std::size_t B = 2, I = 3, J = 4, Din = 5, Dout = 6;
  auto u = randn({B, I, Din}, rng, false);
  auto W = randn({I, J, Dout, Din}, rng, false);
  auto uhat = capskan::capsule_transform(u, W);
  REQUIRE(uhat.shape() == Shape{B, I, J, Dout});
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t i = 0; i < I; ++i)
      for (std::size_t j = 0; j < J; ++j)
        for (std::size_t o = 0; o < Dout; ++o) {
          double ref = 0;
          for (std::size_t d = 0; d < Din; ++d)
            ref += W.values()[((i * J + j) * Dout + o) * Din + d] *
                   u.values()[(b * I + i) * Din + d];
          CHECK(uhat.values()[((b * I + i) * J + j) * Dout + o] ==
                doctest::Approx(ref).epsilon(1e-12));
        }
  auto badu = Tensor<double>::zeros({B, I, Din + 1});
  CHECK_THROWS_AS(capskan::capsule_transform(badu, W), std::invalid_argument);
}

TEST_CASE("coupling_sum and routing_agreement match plain loops") {
  Rng rng(5);
  const std::size_t B = 2, I = 3, J = 2, D = 4;
  auto c = randn({B, I, J}, rng, false);
  auto uhat = randn({B, I, J, D}, rng, false);
  auto v = randn({B, J, D}, rng, false);

  auto s = capskan::coupling_sum(c, uhat);
  REQUIRE(s.shape() == Shape{B, J, D});
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t j = 0; j < J; ++j)
      for (std::size_t d = 0; d < D; ++d) {
        double ref = 0;
        for (std::size_t i = 0; i < I; ++i)
          ref += c.values()[(b * I + i) * J + j] *
                 uhat.values()[((b * I + i) * J + j) * D + d];
        CHECK(s.values()[(b * J + j) * D + d] == doctest::Approx(ref).epsilon(1e-12));
      }

  auto agree = capskan::routing_agreement(uhat, v);
  REQUIRE(agree.shape() == Shape{B, I, J});
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t i = 0; i < I; ++i)
      for (std::size_t j = 0; j < J; ++j) {
        double ref = 0;
        for (std::size_t d = 0; d < D; ++d)
          ref += uhat.values()[((b * I + i) * J + j) * D + d] * v.values()[(b * J + j) * D + d];
        CHECK(agree.values()[(b * I + i) * J + j] == doctest::Approx(ref).epsilon(1e-12));
      }
}

TEST_CASE("transform, coupling, and agreement gradients pass finite differences") {
  Rng rng(6);
  auto u = randn({2, 3, 4}, rng);
  auto W = randn({3, 2, 3, 4}, rng, true, 0.5);
  auto lossA = [&] {
    auto uhat = capskan::capsule_transform(u, W);
    return capskan::sum(capskan::multiply(uhat, uhat));
  };
  CHECK(testsup::fd_max_rel(lossA, {u, W}) < 1e-4);

  auto c = randn({2, 3, 2}, rng);
  auto uhat = randn({2, 3, 2, 4}, rng);
  auto lossB = [&] {
    auto s = capskan::coupling_sum(c, uhat);
    return capskan::sum(capskan::multiply(s, s));
  };
  CHECK(testsup::fd_max_rel(lossB, {c, uhat}) < 1e-4);

  auto v = randn({2, 2, 4}, rng);
  auto lossC = [&] {
    auto a = capskan::routing_agreement(uhat, v);
    return capskan::sum(capskan::multiply(a, a));
  };
  CHECK(testsup::fd_max_rel(lossC, {uhat, v}) < 1e-4);
}

// ---------------------------------------------------------------------------
// dynamic routing
// ---------------------------------------------------------------------------

TEST_CASE("single-iteration routing uses uniform couplings") {
  Rng rng(7);
  const std::size_t B = 2, I = 4, J = 3, Din = 5, Dout = 4;
  RoutingLayer<double> layer(I, J, Din, Dout, /*iterations=*/1, rng);
  auto u = randn({B, I, Din}, rng, false);
  auto v = capskan::dynamic_routing(u, layer);
  REQUIRE(v.shape() == Shape{B, J, Dout});
  // With zero logits, softmax gives c = 1/J; reproduce by direct loops.
  std::vector<double> uhat(B * I * J * Dout, 0.0);
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t i = 0; i < I; ++i)
      for (std::size_t j = 0; j < J; ++j)
        for (std::size_t o = 0; o < Dout; ++o)
          for (std::size_t d = 0; d < Din; ++d)
            uhat[((b * I + i) * J + j) * Dout + o] +=
                layer.W().values()[((i * J + j) * Dout + o) * Din + d] *
                u.values()[(b * I + i) * Din + d];
  std::vector<double> s(B * J * Dout, 0.0);
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t i = 0; i < I; ++i)
      for (std::size_t j = 0; j < J; ++j)
        for (std::size_t o = 0; o < Dout; ++o)
          s[(b * J + j) * Dout + o] += uhat[((b * I + i) * J + j) * Dout + o] / double(J);
  auto ref = testsup::squash_ref(s, Dout);
  for (std::size_t i = 0; i < ref.size(); ++i)
    CHECK(v.values()[i] == doctest::Approx(ref[i]).epsilon(1e-10));
}

TEST_CASE("three-iteration routing matches the scripted recurrence") {
  Rng rng(8);
  const std::size_t B = 2, I = 2, J = 2, Din = 3, Dout = 2;
  RoutingLayer<double> layer(I, J, Din, Dout, /*iterations=*/3, rng);
  auto u = randn({B, I, Din}, rng, false);
  // Independent uhat by loops, then the scripted routing recurrence.
  std::vector<double> uhat(B * I * J * Dout, 0.0);
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t i = 0; i < I; ++i)
      for (std::size_t j = 0; j < J; ++j)
        for (std::size_t o = 0; o < Dout; ++o)
          for (std::size_t d = 0; d < Din; ++d)
            uhat[((b * I + i) * J + j) * Dout + o] +=
                layer.W().values()[((i * J + j) * Dout + o) * Din + d] *
                u.values()[(b * I + i) * Din + d];
  auto trace = testsup::routing_ref(uhat, B, I, J, Dout, 3);
  auto v = capskan::dynamic_routing(u, layer);
  REQUIRE(trace.v.size() == v.size());
  for (std::size_t i = 0; i < v.size(); ++i)
    CHECK(v.values()[i] == doctest::Approx(trace.v[i]).epsilon(1e-10));
  // Couplings are a proper distribution over j at every iteration.
  REQUIRE(trace.couplings.size() == 3);
  for (const auto& c : trace.couplings)
    for (std::size_t b = 0; b < B; ++b)
      for (std::size_t i = 0; i < I; ++i) {
        double row = 0;
        for (std::size_t j = 0; j < J; ++j) {
          CHECK(c[(b * I + i) * J + j] >= 0.0);
          row += c[(b * I + i) * J + j];
        }
        CHECK(row == doctest::Approx(1.0).epsilon(1e-12));
      }
  // More agreement iterations sharpen the couplings (2nd vs 1st iteration
  // distributions differ once logits received an update).
  bool moved = false;
  for (std::size_t i = 0; i < trace.couplings[0].size(); ++i)
    if (std::abs(trace.couplings[0][i] - trace.couplings[1][i]) > 1e-6) moved = true;
  CHECK(moved);
}

TEST_CASE("routing layer validates its configuration and input") {
  Rng rng(9);
  CHECK_THROWS_AS(RoutingLayer<double>(4, 3, 8, 16, 0, rng), std::invalid_argument);
  CHECK_THROWS_AS(RoutingLayer<double>(0, 3, 8, 16, 3, rng), std::invalid_argument);
  CHECK_THROWS_AS(RoutingLayer<double>(4, 3, 0, 16, 3, rng), std::invalid_argument);
  RoutingLayer<double> layer(4, 3, 8, 16, 3, rng);
  CHECK_THROWS_AS(capskan::dynamic_routing(Tensor<double>::zeros({2, 4, 7}), layer),
                  std::invalid_argument);
  CHECK_THROWS_AS(capskan::dynamic_routing(Tensor<double>::zeros({2, 5, 8}), layer),
                  std::invalid_argument);
  CHECK_THROWS_AS(capskan::dynamic_routing(Tensor<double>::zeros({2, 32}), layer),
                  std::invalid_argument);
}

TEST_CASE("dynamic routing is differentiable through all iterations") {
  Rng rng(10);
  RoutingLayer<double> layer(3, 2, 4, 3, 3, rng);
  auto u = randn({2, 3, 4}, rng, true, 0.7);
  auto loss = [&] {
    auto v = capskan::dynamic_routing(u, layer);
    return capskan::sum(capskan::multiply(v, v));
  };
  CHECK(testsup::fd_max_rel(loss, {u, layer.W()}) < 1e-4);
}

// ---------------------------------------------------------------------------
// class probabilities, one-hot, margin loss
// ---------------------------------------------------------------------------

TEST_CASE("class probabilities are capsule norms") {
  auto v = Tensor<double>::from({1, 2, 2}, {0.3, 0.4, 0.0, 0.0});
  auto p = capskan::class_probabilities(v);
  REQUIRE(p.shape() == Shape{1, 2});
  CHECK(p.values()[0] == doctest::Approx(0.5).epsilon(1e-12));
  CHECK(p.values()[1] == 0.0);
  CHECK_THROWS_AS(capskan::class_probabilities(Tensor<double>::zeros({2, 3})),
                  std::invalid_argument);
  // After squash every length lies in [0,1).
  Rng rng(11);
  auto raw = randn({4, 3, 8}, rng, false, 3.0);
  auto lengths = capskan::class_probabilities(capskan::squash(raw));
  for (double l : lengths.values()) {
    CHECK(l >= 0.0);
    CHECK(l < 1.0);
  }
}

TEST_CASE("class probability gradients pass finite differences") {
  Rng rng(12);
  auto v = randn({2, 3, 4}, rng, true, 1.0);
  auto loss = [&] {
    auto p = capskan::class_probabilities(v);
    return capskan::sum(capskan::multiply(p, p));
  };
  CHECK(testsup::fd_max_rel(loss, {v}) < 1e-4);
}

TEST_CASE("one_hot encodes labels and rejects out-of-range values") {
  auto t = capskan::one_hot<double>({2, 0, 1}, 3);
  REQUIRE(t.shape() == Shape{3, 3});
  const std::vector<double> expect = {0, 0, 1, 1, 0, 0, 0, 1, 0};
  for (std::size_t i = 0; i < 9; ++i) CHECK(t.values()[i] == expect[i]);
  CHECK_FALSE(t.requires_grad());
  CHECK_THROWS_AS(capskan::one_hot<double>({3}, 3), std::invalid_argument);
  CHECK_THROWS_AS(capskan::one_hot<double>({-1}, 3), std::invalid_argument);
}

TEST_CASE("margin loss reproduces hand-computed values") {
  // Perfect separation: target length above m+, the rest below m-.
  auto good = Tensor<double>::from({1, 2}, {0.95, 0.05});
  auto t0 = capskan::one_hot<double>({0}, 2);
  CHECK(capskan::margin_loss(good, t0).item() == 0.0);

  // All-zero lengths: only the positive hinge fires, (m+)^2 = 0.81.
  auto zero = Tensor<double>::from({1, 2}, {0.0, 0.0});
  CHECK(capskan::margin_loss(zero, t0).item() == doctest::Approx(0.81).epsilon(1e-12));

  // Mixed case: (0.9-0.5)^2 + 0.5*(0.3-0.1)^2 = 0.16 + 0.02.
  auto mixed = Tensor<double>::from({1, 2}, {0.5, 0.3});
  CHECK(capskan::margin_loss(mixed, t0).item() == doctest::Approx(0.18).epsilon(1e-12));

  // Batch mean: rows {0.95,0.05} and {0.5,0.3} average to 0.09.
  auto batch = Tensor<double>::from({2, 2}, {0.95, 0.05, 0.5, 0.3});
  auto t00 = capskan::one_hot<double>({0, 0}, 2);
  CHECK(capskan::margin_loss(batch, t00).item() == doctest::Approx(0.09).epsilon(1e-12));

  // Custom margins change the hinge points.
  CHECK(capskan::margin_loss(mixed, t0, 0.8, 0.2, 1.0).item() ==
        doctest::Approx(0.09 + 0.01).epsilon(1e-12));

  auto bad = Tensor<double>::from({1, 3}, {0.1, 0.2, 0.3});
  CHECK_THROWS_AS(capskan::margin_loss(bad, t0), std::invalid_argument);
}

TEST_CASE("margin loss gradient passes finite differences away from the hinges") {
  // Lengths chosen to sit well off 0.1 and 0.9 so the FD step never crosses
  // a kink.
  auto lengths = Tensor<double>::from({2, 3}, {0.55, 0.3, 0.78, 0.42, 0.6, 0.25}, true);
  auto targets = capskan::one_hot<double>({0, 2}, 3);
  auto loss = [&] { return capskan::margin_loss(lengths, targets); };
  CHECK(testsup::fd_max_rel(loss, {lengths}) < 1e-4);
}

TEST_CASE("routing transform init scales with fan-in") {
  // Sample statistics of W should reflect the 1/sqrt(in_dim) scaling; with
  // in_dim=16 the standard deviation is 0.25.
  Rng rng(13);
  RoutingLayer<double> layer(8, 4, 16, 8, 3, rng);
  double m = 0, m2 = 0;
  const auto w = layer.W().values();
  for (double x : w) {
    m += x;
    m2 += x * x;
  }
  m /= double(w.size());
  m2 /= double(w.size());
  CHECK(std::abs(m) < 0.02);
  CHECK(std::sqrt(m2 - m * m) == doctest::Approx(0.25).epsilon(0.1));
}
