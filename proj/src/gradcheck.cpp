#include "capskan/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <iomanip>
#include <sstream>

#include "capskan/bspline.hpp"
#include "capskan/capsules.hpp"
#include "capskan/layers.hpp"
#include "capskan/models.hpp"
#include "capskan/ops.hpp"
#include "capskan/rng.hpp"

namespace capskan::gradcheck {

namespace {

double eval_value(const std::function<Tensor<double>()>& loss_fn) {
  NoGradGuard guard;
  return loss_fn().item();
}

std::string fmt(double v) {
  std::ostringstream os;
  os << std::setprecision(6) << std::scientific << v;
  return os.str();
}

// Scalarizes an arbitrary tensor: mean of elementwise squares keeps every
// output in play with O(1)-sized gradients.
Tensor<double> sq_mean(const Tensor<double>& y) { return mean(multiply(y, y)); }

Tensor<double> random_tensor(const std::vector<std::size_t>& shape, Rng& rng, double lo,
                             double hi) {
  std::size_t n = 1;
  for (std::size_t d : shape) n *= d;
  std::vector<double> v(n);
  for (auto& x : v) x = rng.uniform(lo, hi);
  return Tensor<double>::from(shape, std::move(v), true);
}

std::vector<std::pair<std::string, Tensor<double>>> module_params(Module<double>& m,
                                                                  const std::string& prefix) {
  ParamRegistry<double> reg;
  m.register_params(prefix, reg);
  std::vector<std::pair<std::string, Tensor<double>>> wrt;
  for (auto& e : reg)
    if (e.trainable) wrt.emplace_back(e.name, e.tensor);
  return wrt;
}

using CheckFn = std::function<Outcome()>;

// --------------------------------------------------------------------------
// bspline scope
// --------------------------------------------------------------------------

Outcome check_spline_activation(int degree, std::size_t grid_size, std::uint64_t seed) {
  Rng rng(seed);
  auto sa = std::make_shared<SplineActivation<double>>(-1.0, 1.0, grid_size, degree);
  sa->init(rng);
  // Interior points plus a pair beyond the domain, where the clamp makes the
  // input gradient exactly zero on both sides of the probe.
  std::vector<double> xs = {-0.87, -0.41, -0.09, 0.22, 0.55, 0.93, -1.5, 1.5};
  for (auto& v : xs) v += rng.uniform(-0.01, 0.01);
  const std::size_t n = xs.size();
  Tensor<double> x = Tensor<double>::from({n}, std::move(xs), true);
  auto loss = [sa, x]() { return sq_mean(spline_act_forward(*sa, x)); };
  return check("spline_activation(k=" + std::to_string(degree) + ")", loss,
               {{"x", x}, {"coeffs", sa->coeffs}, {"w_b", sa->w_b}, {"w_s", sa->w_s}});
}

std::vector<CheckFn> bspline_checks() {
  return {
      [] { return check_spline_activation(3, 6, 11); },
      [] { return check_spline_activation(2, 5, 12); },
      [] { return check_spline_activation(5, 4, 13); },
  };
}

// --------------------------------------------------------------------------
// kan scope
// --------------------------------------------------------------------------

std::vector<CheckFn> kan_checks() {
  return {
      [] {
        Rng rng(21);
        auto layer = std::make_shared<KanLayer<double>>(3, 2, rng, -1.0, 1.0, 5, 3);
        Tensor<double> x = random_tensor({4, 3}, rng, -0.9, 0.9);
        auto loss = [layer, x]() { return sq_mean(kan_forward(*layer, x)); };
        std::vector<std::pair<std::string, Tensor<double>>> wrt = {{"x", x}};
        auto params = module_params(*layer, "kan");
        wrt.insert(wrt.end(), params.begin(), params.end());
        return check("kan_layer(3->2,G=5,k=3)", loss, wrt);
      },
      [] {
        Rng rng(22);
        auto layer = std::make_shared<KanLayer<double>>(2, 3, rng, -1.5, 1.5, 4, 2);
        Tensor<double> x = random_tensor({3, 2}, rng, -2.0, 2.0);  // exercises the clamp
        auto loss = [layer, x]() { return sq_mean(kan_forward(*layer, x)); };
        std::vector<std::pair<std::string, Tensor<double>>> wrt = {{"x", x}};
        auto params = module_params(*layer, "kan");
        wrt.insert(wrt.end(), params.begin(), params.end());
        return check("kan_layer(2->3,G=4,k=2)", loss, wrt);
      },
  };
}

// --------------------------------------------------------------------------
// convkan scope
// --------------------------------------------------------------------------

std::vector<CheckFn> convkan_checks() {
  return {
      [] {
        Rng rng(31);
        auto cs = std::make_shared<ChannelSpline<double>>(2, rng, -1.0, 1.0, 4, 3);
        Tensor<double> x = random_tensor({2, 2, 3, 3}, rng, -0.9, 0.9);
        auto loss = [cs, x]() { return sq_mean(channel_spline_forward(*cs, x)); };
        std::vector<std::pair<std::string, Tensor<double>>> wrt = {{"x", x}};
        auto params = module_params(*cs, "spline");
        wrt.insert(wrt.end(), params.begin(), params.end());
        return check("channel_spline(C=2,G=4,k=3)", loss, wrt);
      },
      [] {
        Rng rng(32);
        auto block = std::make_shared<ConvKanBlock<double>>(2, 3, 3, 1, 1, rng, -1.0, 1.0, 4, 3);
        Tensor<double> x = random_tensor({2, 2, 5, 5}, rng, -1.0, 1.0);
        auto loss = [block, x]() { return sq_mean(convkan_forward(*block, x, true)); };
        std::vector<std::pair<std::string, Tensor<double>>> wrt = {{"x", x}};
        auto params = module_params(*block, "block");
        wrt.insert(wrt.end(), params.begin(), params.end());
        return check("convkan_block(2->3,k3,train)", loss, wrt);
      },
  };
}

// --------------------------------------------------------------------------
// capsules scope
// --------------------------------------------------------------------------

std::vector<CheckFn> capsule_checks() {
  return {
      [] {
        Rng rng(41);
        Tensor<double> v = random_tensor({2, 3, 4}, rng, -1.5, 1.5);
        auto loss = [v]() { return sq_mean(squash(v)); };
        return check("squash", loss, {{"v", v}});
      },
      [] {
        Rng rng(42);
        Tensor<double> v = random_tensor({2, 3, 4}, rng, -1.0, 1.0);
        auto loss = [v]() { return sq_mean(class_probabilities(v)); };
        return check("class_probabilities", loss, {{"v", v}});
      },
      [] {
        Rng rng(43);
        // Lengths kept away from the 0.1 / 0.9 hinge corners.
        std::vector<double> lv = {0.25, 0.75, 0.5, 0.6, 0.3, 0.45};
        Tensor<double> lengths = Tensor<double>::from({2, 3}, std::move(lv), true);
        Tensor<double> target = one_hot<double>({1, 0}, 3);
        auto loss = [lengths, target]() { return margin_loss(lengths, target); };
        return check("margin_loss", loss, {{"lengths", lengths}});
      },
      [] {
        Rng rng(44);
        auto layer = std::make_shared<RoutingLayer<double>>(4, 3, 4, 3, 3, rng);
        Tensor<double> u = random_tensor({2, 4, 4}, rng, -0.8, 0.8);
        auto loss = [layer, u]() {
          return sq_mean(class_probabilities(dynamic_routing(u, *layer)));
        };
        return check("dynamic_routing(4->3,r=3)", loss, {{"u", u}, {"W", layer->W()}});
      },
  };
}

// --------------------------------------------------------------------------
// models scope: each architecture at tiny width, training mode, loss matched
// to the head. Dropout masks stay fixed because the forward RNG is re-seeded
// on every evaluation.
// --------------------------------------------------------------------------

ArchitectureConfig tiny_arch(const std::string& name) {
  ArchitectureConfig cfg = default_arch_config(name);
  cfg.in_channels = 1;
  cfg.num_classes = 2;
  cfg.spline_grid = 4;
  cfg.spline_degree = 3;
  cfg.routing_iters = 2;
  cfg.caps_dim = 4;
  cfg.num_primary = 4;
  cfg.intermediate_caps = 3;
  cfg.intermediate_caps_dim = 4;
  cfg.out_caps_dim = 4;
  if (name == "cnn" || name == "convkan") {
    cfg.in_height = cfg.in_width = 12;
    cfg.channels = {2, 3};
    cfg.kernels = {3, 3};
    cfg.head_hidden = {};
    if (name == "convkan") cfg.head_hidden = {2};
  } else {
    cfg.in_height = cfg.in_width = 16;
    cfg.channels = {2, 4};
    cfg.kernels = {3, 3};
    cfg.strides = {2, 2};
  }
  return cfg;
}

Outcome check_model(const std::string& name, std::uint64_t seed) {
  Rng rng(seed);
  auto model = std::make_shared<ModelGraph<double>>(build_model<double>(tiny_arch(name), rng));
  model->train();
  Tensor<double> x =
      random_tensor({2, 1, model->config().in_height, model->config().in_width}, rng, 0.0, 1.0);
  const std::vector<int> labels = {0, 1};
  auto loss = [model, x, labels]() {
    Rng forward_rng(7);
    Tensor<double> out = model->forward(x, forward_rng);
    if (model->output_kind() == OutputKind::lengths)
      return margin_loss(out, one_hot<double>(labels, out.shape()[1]));
    return cross_entropy_loss(out, labels);
  };
  std::vector<std::pair<std::string, Tensor<double>>> wrt = {{"input", x}};
  for (auto& e : model->params())
    if (e.trainable) wrt.emplace_back(e.name, e.tensor);
  return check("model(" + name + ")", loss, wrt);
}

std::vector<CheckFn> model_checks() {
  return {
      [] { return check_model("cnn", 51); },
      [] { return check_model("convkan", 52); },
      [] { return check_model("capsnet", 53); },
      [] { return check_model("capsule_convkan", 54); },
  };
}

void print_outcome(std::ostream& out, const Outcome& o) {
  out << "gradcheck " << o.component << ": max_rel=" << fmt(o.max_rel) << " checked="
      << o.checked << (o.ok ? "  PASS" : "  FAIL") << "\n";
  if (!o.ok) out << "  first failure: " << o.first_failure << "\n";
}

}  // namespace

Outcome check(const std::string& component,
              const std::function<Tensor<double>()>& loss_fn,
              const std::vector<std::pair<std::string, Tensor<double>>>& wrt) {
  Outcome out;
  out.component = component;

  for (const auto& [name, t] : wrt) {
    (void)name;
    const_cast<Tensor<double>&>(t).zero_grad();
  }
  Tensor<double> loss = loss_fn();
  if (loss.size() != 1)
    throw std::logic_error("gradcheck: loss for '" + component + "' is not scalar");
  loss.backward();

  std::vector<std::vector<double>> analytic;
  analytic.reserve(wrt.size());
  for (const auto& [name, t] : wrt) {
    (void)name;
    if (t.has_grad())
      analytic.emplace_back(t.grad().begin(), t.grad().end());
    else
      analytic.emplace_back(t.size(), 0.0);
  }

  for (std::size_t w = 0; w < wrt.size(); ++w) {
    Tensor<double> t = wrt[w].second;
    auto vals = t.values_mut();
    for (std::size_t i = 0; i < vals.size(); ++i) {
      const double orig = vals[i];
      vals[i] = orig + kStep;
      const double fp = eval_value(loss_fn);
      vals[i] = orig - kStep;
      const double fm = eval_value(loss_fn);
      vals[i] = orig;
      const double fd = (fp - fm) / (2.0 * kStep);
      const double an = analytic[w][i];
      ++out.checked;
      const double diff = std::abs(fd - an);
      if (diff < kNoiseFloor) continue;
      const double rel = diff / std::max({std::abs(fd), std::abs(an), 1e-8});
      out.max_rel = std::max(out.max_rel, rel);
      if (rel > kRelTolerance && out.ok) {
        out.ok = false;
        out.first_failure = wrt[w].first + "[" + std::to_string(i) +
                            "]: analytic=" + fmt(an) + " fd=" + fmt(fd) + " rel=" + fmt(rel);
      }
    }
  }
  return out;
}

std::vector<std::string> scope_names() {
  return {"bspline", "kan", "convkan", "capsules", "models"};
}

std::vector<Outcome> run_scope(const std::string& scope, std::ostream& out) {
  std::vector<CheckFn> checks;
  auto extend = [&checks](std::vector<CheckFn> more) {
    for (auto& c : more) checks.push_back(std::move(c));
  };
  if (scope == "all" || scope == "bspline") extend(bspline_checks());
  if (scope == "all" || scope == "kan") extend(kan_checks());
  if (scope == "all" || scope == "convkan") extend(convkan_checks());
  if (scope == "all" || scope == "capsules") extend(capsule_checks());
  if (scope == "all" || scope == "models") extend(model_checks());
  if (checks.empty())
    throw ConfigError("unknown gradcheck scope '" + scope +
                      "' (expected all, bspline, kan, convkan, capsules, or models)");
  std::vector<Outcome> outcomes;
  outcomes.reserve(checks.size());
  for (auto& c : checks) {
    outcomes.push_back(c());
    print_outcome(out, outcomes.back());
  }
  return outcomes;
}

bool all_ok(const std::vector<Outcome>& outcomes) {
  return std::all_of(outcomes.begin(), outcomes.end(),
                     [](const Outcome& o) { return o.ok; });
}

Outcome run_negative_control(std::ostream& out) {
  Rng rng(61);
  Tensor<double> x = random_tensor({6}, rng, -1.5, 1.5);
  // silu with its backward deliberately scaled by 1.01.
  auto corrupted_silu = [](const Tensor<double>& in) {
    const std::size_t n = in.size();
    std::vector<double> y(n), dy(n);
    auto v = in.values();
    for (std::size_t i = 0; i < n; ++i) {
      const double s = 1.0 / (1.0 + std::exp(-v[i]));
      y[i] = v[i] * s;
      dy[i] = 1.01 * (s + v[i] * s * (1.0 - s));
    }
    auto px = in.node();
    return detail::make_op<double>(in.shape(), std::move(y), "silu", {in},
                                   [px, dy](detail::Node<double>& node) {
                                     if (!px->requires_grad) return;
                                     px->ensure_grad();
                                     for (std::size_t i = 0; i < node.grad.size(); ++i)
                                       px->grad[i] += node.grad[i] * dy[i];
                                   });
  };
  auto loss = [x, corrupted_silu]() { return sq_mean(corrupted_silu(x)); };
  Outcome o = check("silu(negative-control)", loss, {{"x", x}});
  print_outcome(out, o);
  return o;
}

}  // namespace capskan::gradcheck
