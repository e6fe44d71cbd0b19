#pragma once

// The four architectures behind one interface: a ModelGraph is an ordered
// list of named modules plus a flat parameter registry. Builders consume an
// ArchitectureConfig; channel plans and capsule layouts are fully
// configurable, with per-architecture defaults in default_arch_config().

#include <json.hpp>

#include <memory>
#include <string>
#include <unordered_set>
#include <vector>

#include "capskan/capsules.hpp"
#include "capskan/errors.hpp"
#include "capskan/layers.hpp"

namespace capskan {

struct ArchitectureConfig {
  std::string architecture = "cnn";  // cnn | convkan | capsnet | capsule_convkan
  std::size_t in_channels = 3;
  std::size_t in_height = 96;
  std::size_t in_width = 96;
  std::size_t num_classes = 2;
  std::vector<std::size_t> channels = {32, 64, 128};
  std::vector<std::size_t> kernels = {3, 3, 3};
  std::vector<std::size_t> strides;     // empty = architecture default
  std::vector<std::size_t> head_hidden; // empty = architecture default
  std::size_t spline_grid = 8;
  int spline_degree = 3;
  double spline_min = -1.0;
  double spline_max = 1.0;
  std::size_t caps_dim = 8;
  std::size_t num_primary = 0;          // 0 = architecture default
  std::size_t intermediate_caps = 16;
  std::size_t intermediate_caps_dim = 8;
  std::size_t out_caps_dim = 16;
  std::size_t routing_iters = 3;
  double dropout = 0.3;

  // Structural validation independent of any dataset; throws ConfigError.
  void validate() const;
};

// Architecture-tuned starting point (channel plan, strides, capsule layout).
ArchitectureConfig default_arch_config(const std::string& architecture);

nlohmann::json arch_to_json(const ArchitectureConfig& cfg);
// Strict: unknown keys are rejected. `require_architecture` demands the key
// be present (config files), otherwise the default applies.
ArchitectureConfig arch_from_json(const nlohmann::json& j);

enum class OutputKind { logits, lengths };

inline const char* output_kind_name(OutputKind k) {
  return k == OutputKind::logits ? "logits" : "lengths";
}

template <class T>
class ModelGraph {
 public:
  ModelGraph() = default;

  void set_config(ArchitectureConfig cfg) { config_ = std::move(cfg); }
  const ArchitectureConfig& config() const { return config_; }
  void set_output_kind(OutputKind k) { output_kind_ = k; }
  OutputKind output_kind() const { return output_kind_; }

  void add(std::string name, std::unique_ptr<Module<T>> module) {
    module->register_params(name, registry_);
    layers_.emplace_back(std::move(name), std::move(module));
  }

  // Registry invariant: every parameter appears exactly once (by name and by
  // underlying buffer). Builders call this after assembly.
  void validate_registry() const {
    std::unordered_set<std::string> names;
    std::unordered_set<const void*> nodes;
    for (const auto& e : registry_) {
      if (!names.insert(e.name).second)
        throw std::logic_error("ModelGraph: duplicate parameter name '" + e.name + "'");
      if (!nodes.insert(static_cast<const void*>(e.tensor.node().get())).second)
        throw std::logic_error("ModelGraph: parameter '" + e.name +
                               "' shares a buffer with another entry");
    }
  }

  void train() { training_ = true; }
  void eval() { training_ = false; }
  bool is_training() const { return training_; }

  Tensor<T> forward(const Tensor<T>& x, Rng& rng) {
    Tensor<T> t = x;
    for (auto& [name, m] : layers_) t = m->forward(t, training_, rng);
    return t;
  }

  const ParamRegistry<T>& params() const { return registry_; }
  ParamRegistry<T>& params() { return registry_; }

  Tensor<T>* find_param(const std::string& name) {
    for (auto& e : registry_)
      if (e.name == name) return &e.tensor;
    return nullptr;
  }

  void zero_grad() {
    for (auto& e : registry_) e.tensor.zero_grad();
  }

  // Full state (trainable + buffers), used for best-epoch snapshots.
  std::vector<std::vector<T>> state_snapshot() const {
    std::vector<std::vector<T>> s;
    s.reserve(registry_.size());
    for (const auto& e : registry_)
      s.emplace_back(e.tensor.values().begin(), e.tensor.values().end());
    return s;
  }

  void load_state(const std::vector<std::vector<T>>& s) {
    if (s.size() != registry_.size())
      throw std::invalid_argument("ModelGraph::load_state: entry count mismatch");
    for (std::size_t i = 0; i < s.size(); ++i) {
      auto dst = registry_[i].tensor.values_mut();
      if (s[i].size() != dst.size())
        throw std::invalid_argument("ModelGraph::load_state: size mismatch for '" +
                                    registry_[i].name + "'");
      std::copy(s[i].begin(), s[i].end(), dst.begin());
    }
  }

  std::size_t layer_count() const { return layers_.size(); }
  Module<T>* layer(std::size_t i) { return layers_.at(i).second.get(); }
  const std::string& layer_name(std::size_t i) const { return layers_.at(i).first; }

 private:
  std::vector<std::pair<std::string, std::unique_ptr<Module<T>>>> layers_;
  ParamRegistry<T> registry_;
  bool training_ = true;
  OutputKind output_kind_ = OutputKind::logits;
  ArchitectureConfig config_;
};

template <class T>
std::size_t count_parameters(const ModelGraph<T>& model) {
  std::size_t n = 0;
  for (const auto& e : model.params())
    if (e.trainable) n += e.tensor.size();
  return n;
}

template <class T>
ModelGraph<T> build_cnn(const ArchitectureConfig& cfg, Rng& rng);
template <class T>
ModelGraph<T> build_convkan(const ArchitectureConfig& cfg, Rng& rng);
template <class T>
ModelGraph<T> build_capsnet(const ArchitectureConfig& cfg, Rng& rng);
template <class T>
ModelGraph<T> build_capsule_convkan(const ArchitectureConfig& cfg, Rng& rng);
// Dispatch on cfg.architecture.
template <class T>
ModelGraph<T> build_model(const ArchitectureConfig& cfg, Rng& rng);

}  // namespace capskan
