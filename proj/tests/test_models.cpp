#include <cmath>
#include <memory>
#include <set>
#include <vector>

#include "capskan/capsules.hpp"
#include "capskan/errors.hpp"
#include "capskan/layers.hpp"
#include "capskan/models.hpp"
#include "capskan/ops.hpp"
#include "capskan/rng.hpp"
#include "doctest.h"
#include "json.hpp"
#include "support/oracles.hpp"

using capskan::ArchitectureConfig;
using capskan::ConfigError;
using capskan::KanLayer;
using capskan::Linear;
using capskan::ModelGraph;
using capskan::OutputKind;
using capskan::Rng;
using capskan::Shape;
using capskan::Tensor;

namespace {

// Small geometry that every architecture can digest quickly.
ArchitectureConfig tiny(const std::string& arch) {
  ArchitectureConfig cfg = capskan::default_arch_config(arch);
  cfg.in_channels = 1;
  cfg.in_height = cfg.in_width = 16;
  cfg.num_classes = 2;
  cfg.channels = {2, 4};
  cfg.kernels = {3, 3};
  cfg.strides = {2, 2};
  cfg.head_hidden = {4};
  cfg.spline_grid = 4;
  cfg.caps_dim = 4;
  cfg.num_primary = 4;
  cfg.intermediate_caps = 3;
  cfg.intermediate_caps_dim = 4;
  cfg.out_caps_dim = 4;
  cfg.routing_iters = 2;
  return cfg;
}

Tensor<float> rand_images(std::size_t b, const ArchitectureConfig& cfg, Rng& rng) {
  std::vector<float> v(b * cfg.in_channels * cfg.in_height * cfg.in_width);
  for (auto& x : v) x = float(rng.uniform());
  return Tensor<float>::from({b, cfg.in_channels, cfg.in_height, cfg.in_width}, std::move(v),
                             false);
}

const char* kArchs[4] = {"cnn", "convkan", "capsnet", "capsule_convkan"};

}  // namespace

TEST_CASE("count_parameters matches hand counts and skips running stats") {
  Rng rng(1);
  ModelGraph<float> empty;
  CHECK(capskan::count_parameters(empty) == 0);

  ModelGraph<float> fc;
  fc.add("fc", std::make_unique<Linear<float>>(10, 2, rng));
  CHECK(capskan::count_parameters(fc) == 10 * 2 + 2);

  // KAN layer n_in=2, m=3, G=8, k=3: coeffs 3*2*(8+3) + w_b 6 + w_s 6.
  ModelGraph<float> kan;
  kan.add("kan", std::make_unique<KanLayer<float>>(2, 3, rng));
  CHECK(capskan::count_parameters(kan) == 66 + 6 + 6);

  // BatchNorm: gamma and beta count, running mean and variance do not.
  ModelGraph<float> bn;
  bn.add("bn", std::make_unique<capskan::BatchNorm2d<float>>(4));
  CHECK(capskan::count_parameters(bn) == 8);
  CHECK(bn.params().size() == 4);
}

TEST_CASE("all four architectures build and produce [B, num_classes] outputs") {
  for (const char* arch : kArchs) {
    CAPTURE(arch);
    auto cfg = tiny(arch);
    Rng rng(7);
    auto model = capskan::build_model<float>(cfg, rng);
    CHECK(model.config().architecture == arch);
    model.eval();
    Rng frng(1);
    auto x = rand_images(3, cfg, frng);
    auto y = model.forward(x, frng);
    REQUIRE(y.shape() == Shape{3, 2});
    const bool is_caps = std::string(arch) == "capsnet" || std::string(arch) == "capsule_convkan";
    CHECK(model.output_kind() == (is_caps ? OutputKind::lengths : OutputKind::logits));
    if (is_caps) {
      for (float p : y.values()) {
        CHECK(p >= 0.0f);
        CHECK(p < 1.0f);  // squashed capsule norms
      }
    }
    CHECK(capskan::count_parameters(model) > 0);
  }
}

TEST_CASE("building twice from the same seed gives identical models") {
  for (const char* arch : kArchs) {
    CAPTURE(arch);
    auto cfg = tiny(arch);
    Rng rng_a(42), rng_b(42);
    auto a = capskan::build_model<float>(cfg, rng_a);
    auto b = capskan::build_model<float>(cfg, rng_b);
    REQUIRE(a.params().size() == b.params().size());
    for (std::size_t i = 0; i < a.params().size(); ++i) {
      const auto& pa = a.params()[i];
      const auto& pb = b.params()[i];
      CHECK(pa.name == pb.name);
      REQUIRE(pa.tensor.size() == pb.tensor.size());
      for (std::size_t e = 0; e < pa.tensor.size(); ++e)
        CHECK(pa.tensor.values()[e] == pb.tensor.values()[e]);
    }
    a.eval();
    b.eval();
    Rng fa(3), fb(3);
    auto xa = rand_images(2, cfg, fa);
    auto xb = rand_images(2, cfg, fb);
    auto ya = a.forward(xa, fa);
    auto yb = b.forward(xb, fb);
    for (std::size_t i = 0; i < ya.size(); ++i) CHECK(ya.values()[i] == yb.values()[i]);
  }
}

TEST_CASE("registry validation flags duplicate names and shared tensors") {
  Rng rng(2);
  auto model = capskan::build_model<float>(tiny("cnn"), rng);
  CHECK_NOTHROW(model.validate_registry());

  auto dup = model.params()[0];
  model.params().push_back(dup);  // same name, same node
  CHECK_THROWS_AS(model.validate_registry(), std::logic_error);
  model.params().pop_back();

  capskan::ParamEntry<float> aliased = model.params()[0];
  aliased.name = "alias";
  model.params().push_back(aliased);  // fresh name, same underlying node
  CHECK_THROWS_AS(model.validate_registry(), std::logic_error);
  model.params().pop_back();
  CHECK_NOTHROW(model.validate_registry());
}

TEST_CASE("find_param returns registered tensors by name") {
  Rng rng(3);
  auto model = capskan::build_model<float>(tiny("convkan"), rng);
  CHECK(model.find_param("does.not.exist") == nullptr);
  auto* p = model.find_param(model.params()[0].name);
  REQUIRE(p != nullptr);
  CHECK(p->node() == model.params()[0].tensor.node());
}

TEST_CASE("every trainable parameter of every architecture receives gradient") {
  for (const char* arch : kArchs) {
    CAPTURE(arch);
    auto cfg = tiny(arch);
    cfg.dropout = 0.0;  // keep the audit deterministic: no dropped paths
    Rng rng(11);
    auto model = capskan::build_model<float>(cfg, rng);
    model.train();
    Rng frng(5);
    auto x = rand_images(4, cfg, frng);
    auto y = model.forward(x, frng);
    const std::vector<int> labels = {0, 1, 0, 1};
    Tensor<float> loss;
    if (model.output_kind() == OutputKind::lengths)
      loss = capskan::margin_loss(y, capskan::one_hot<float>(labels, 2));
    else
      loss = capskan::cross_entropy_loss(y, labels);
    model.zero_grad();
    loss.backward();
    for (const auto& e : model.params()) {
      if (!e.trainable) continue;
      CAPTURE(e.name);
      REQUIRE(e.tensor.has_grad());
      bool any = false;
      for (float g : e.tensor.grad())
        if (g != 0.0f) any = true;
      CHECK_MESSAGE(any, "gradient is identically zero for ", e.name);
    }
  }
}

TEST_CASE("architecture configs round-trip through json") {
  for (const char* arch : kArchs) {
    auto cfg = tiny(arch);
    cfg.dropout = 0.25;
    cfg.spline_min = -1.5;
    auto j = capskan::arch_to_json(cfg);
    auto back = capskan::arch_from_json(j);
    CHECK(back.architecture == cfg.architecture);
    CHECK(back.in_channels == cfg.in_channels);
    CHECK(back.in_height == cfg.in_height);
    CHECK(back.in_width == cfg.in_width);
    CHECK(back.num_classes == cfg.num_classes);
    CHECK(back.channels == cfg.channels);
    CHECK(back.kernels == cfg.kernels);
    CHECK(back.strides == cfg.strides);
    CHECK(back.head_hidden == cfg.head_hidden);
    CHECK(back.spline_grid == cfg.spline_grid);
    CHECK(back.spline_degree == cfg.spline_degree);
    CHECK(back.spline_min == cfg.spline_min);
    CHECK(back.spline_max == cfg.spline_max);
    CHECK(back.caps_dim == cfg.caps_dim);
    CHECK(back.num_primary == cfg.num_primary);
    CHECK(back.intermediate_caps == cfg.intermediate_caps);
    CHECK(back.intermediate_caps_dim == cfg.intermediate_caps_dim);
    CHECK(back.out_caps_dim == cfg.out_caps_dim);
    CHECK(back.routing_iters == cfg.routing_iters);
    CHECK(back.dropout == cfg.dropout);
  }
}

TEST_CASE("arch_from_json rejects unknown keys and malformed documents") {
  auto j = capskan::arch_to_json(capskan::default_arch_config("cnn"));
  j["mystery_knob"] = 3;
  CHECK_THROWS_AS(capskan::arch_from_json(j), ConfigError);
  CHECK_THROWS_AS(capskan::arch_from_json(nlohmann::json::array()), ConfigError);
  CHECK_THROWS_AS(capskan::arch_from_json(nlohmann::json{{"in_channels", 3}}), ConfigError);
  auto bad_type = capskan::arch_to_json(capskan::default_arch_config("cnn"));
  bad_type["spline_grid"] = "eight";
  CHECK_THROWS_AS(capskan::arch_from_json(bad_type), ConfigError);
}

TEST_CASE("unknown architectures are rejected everywhere") {
  CHECK_THROWS_AS(capskan::default_arch_config("resnet"), ConfigError);
  auto cfg = tiny("cnn");
  cfg.architecture = "mlp";
  Rng rng(1);
  CHECK_THROWS_AS(capskan::build_model<float>(cfg, rng), ConfigError);
  CHECK_THROWS_AS(cfg.validate(), ConfigError);
}

TEST_CASE("config validation rejects inconsistent plans") {
  Rng rng(1);
  auto cfg = tiny("cnn");
  cfg.channels = {};
  CHECK_THROWS_AS(cfg.validate(), ConfigError);
  cfg = tiny("cnn");
  cfg.kernels = {3};
  CHECK_THROWS_AS(cfg.validate(), ConfigError);
  cfg = tiny("cnn");
  cfg.strides = {2, 2, 2};
  CHECK_THROWS_AS(cfg.validate(), ConfigError);
  cfg = tiny("cnn");
  cfg.num_classes = 1;
  CHECK_THROWS_AS(cfg.validate(), ConfigError);
  cfg = tiny("convkan");
  cfg.spline_min = 1.0;
  cfg.spline_max = -1.0;
  CHECK_THROWS_AS(cfg.validate(), ConfigError);
  cfg = tiny("convkan");
  cfg.spline_degree = 9;
  CHECK_THROWS_AS(cfg.validate(), ConfigError);
  cfg = tiny("cnn");
  cfg.dropout = 1.0;
  CHECK_THROWS_AS(cfg.validate(), ConfigError);
  cfg = tiny("capsnet");
  cfg.routing_iters = 0;
  CHECK_THROWS_AS(cfg.validate(), ConfigError);
  cfg = tiny("cnn");
  cfg.in_height = 0;
  CHECK_THROWS_AS(cfg.validate(), ConfigError);
}

TEST_CASE("capsule pooling geometry errors are specific") {
  Rng rng(1);
  // num_primary*caps_dim not divisible by the final channel count.
  auto cfg = tiny("capsnet");
  cfg.channels = {2, 3};
  cfg.num_primary = 5;
  cfg.caps_dim = 4;  // 20 % 3 != 0
  CHECK_THROWS_AS(capskan::build_model<float>(cfg, rng), ConfigError);
  // Quotient is not a perfect square.
  cfg = tiny("capsnet");
  cfg.channels = {2, 4};
  cfg.num_primary = 3;
  cfg.caps_dim = 4;  // 12/4 = 3 cells
  CHECK_THROWS_AS(capskan::build_model<float>(cfg, rng), ConfigError);
  // Pool target larger than the strided feature map.
  cfg = tiny("capsule_convkan");
  cfg.strides = {4, 4};  // 16 -> 4 -> 1 spatial
  cfg.num_primary = 16;
  cfg.caps_dim = 4;  // wants a 4x4 pool from a 1x1 map
  CHECK_THROWS_AS(capskan::build_model<float>(cfg, rng), ConfigError);
}

TEST_CASE("state snapshots capture and restore batch-norm buffers") {
  auto cfg = tiny("convkan");
  Rng rng(13);
  auto model = capskan::build_model<float>(cfg, rng);
  auto* rm = model.find_param("block1.bn.running_mean");
  REQUIRE(rm != nullptr);
  model.train();
  Rng frng(1);
  auto x = rand_images(4, cfg, frng);
  (void)model.forward(x, frng);  // mutates running statistics
  const auto snap = model.state_snapshot();
  const std::vector<float> rm_at_snap(rm->values().begin(), rm->values().end());

  (void)model.forward(x, frng);  // drift further
  bool drifted = false;
  for (std::size_t i = 0; i < rm_at_snap.size(); ++i)
    if (rm->values()[i] != rm_at_snap[i]) drifted = true;
  CHECK(drifted);

  model.load_state(snap);
  for (std::size_t i = 0; i < rm_at_snap.size(); ++i)
    CHECK(rm->values()[i] == rm_at_snap[i]);

  auto short_state = snap;
  short_state.pop_back();
  CHECK_THROWS_AS(model.load_state(short_state), std::invalid_argument);
}

TEST_CASE("train and eval modes give different forward behavior") {
  auto cfg = tiny("cnn");  // includes dropout + batch norm
  Rng rng(17);
  auto model = capskan::build_model<float>(cfg, rng);
  CHECK(model.is_training());
  Rng frng(2);
  auto x = rand_images(4, cfg, frng);

  model.eval();
  Rng r1(9), r2(9);
  auto y1 = model.forward(x, r1);
  auto y2 = model.forward(x, r2);
  for (std::size_t i = 0; i < y1.size(); ++i)
    CHECK(y1.values()[i] == y2.values()[i]);  // eval is deterministic

  model.train();
  Rng r3(9);
  auto y3 = model.forward(x, r3);
  bool differs = false;
  for (std::size_t i = 0; i < y1.size(); ++i)
    if (y1.values()[i] != y3.values()[i]) differs = true;
  CHECK(differs);  // dropout + batch statistics change the output
}

TEST_CASE("default configurations carry the documented head-line numbers") {
  auto cnn = capskan::default_arch_config("cnn");
  CHECK(cnn.architecture == "cnn");
  CHECK(cnn.channels == std::vector<std::size_t>{32, 64, 128});
  CHECK(cnn.in_height == 96);
  CHECK(cnn.in_width == 96);
  CHECK(cnn.num_classes == 2);
  CHECK(cnn.dropout == 0.3);
  auto caps = capskan::default_arch_config("capsnet");
  CHECK(caps.routing_iters == 3);
  CHECK(caps.caps_dim == 8);
  auto ck = capskan::default_arch_config("capsule_convkan");
  CHECK(ck.spline_grid == 8);
  CHECK(ck.spline_degree == 3);
  CHECK(ck.spline_min == -1.0);
  CHECK(ck.spline_max == 1.0);
}
