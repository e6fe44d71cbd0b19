#include "capskan/models.hpp"

#include <cmath>

namespace capskan {

namespace {

const std::vector<std::string> kArchNames = {"cnn", "convkan", "capsnet", "capsule_convkan"};

bool known_arch(const std::string& a) {
  for (const auto& n : kArchNames)
    if (a == n) return true;
  return false;
}

// Spatial extent after a convolution: floor((H + 2p - k)/s) + 1.
std::size_t conv_out(std::size_t extent, std::size_t kernel, std::size_t stride,
                     std::size_t padding, const std::string& where) {
  if (extent + 2 * padding < kernel)
    throw ConfigError(where + ": kernel " + std::to_string(kernel) +
                      " larger than padded input extent " + std::to_string(extent + 2 * padding));
  return (extent + 2 * padding - kernel) / stride + 1;
}

std::vector<std::size_t> resolve_strides(const ArchitectureConfig& cfg) {
  if (!cfg.strides.empty()) return cfg.strides;
  const std::size_t n = cfg.channels.size();
  std::vector<std::size_t> s(n, 1);
  if (cfg.architecture == "convkan" || cfg.architecture == "capsule_convkan") {
    // default plan: downsample in every block except the last
    for (std::size_t i = 0; i + 1 < n; ++i) s[i] = 2;
    if (n == 1) s[0] = 2;
  } else if (cfg.architecture == "capsnet") {
    s.assign(n, 2);
  }
  return s;
}

// Side of the square pooling target that regroups the final feature map into
// cfg-many primary capsules.
std::size_t capsule_pool_side(const ArchitectureConfig& cfg, std::size_t last_channels,
                              std::size_t num_primary) {
  const std::size_t want = num_primary * cfg.caps_dim;
  if (want % last_channels != 0)
    throw ConfigError("capsule layout: num_primary*caps_dim = " + std::to_string(want) +
                      " is not divisible by the final channel count " +
                      std::to_string(last_channels));
  const std::size_t cells = want / last_channels;
  const auto side = static_cast<std::size_t>(std::lround(std::sqrt(static_cast<double>(cells))));
  if (side * side != cells)
    throw ConfigError("capsule layout: num_primary*caps_dim/channels = " +
                      std::to_string(cells) + " is not a perfect square; adjust num_primary");
  return side;
}

template <class T>
struct PrimaryCapsModule : Module<T> {
  std::size_t caps_dim;
  explicit PrimaryCapsModule(std::size_t d) : caps_dim(d) {}
  Tensor<T> forward(const Tensor<T>& x, bool, Rng&) override {
    return primary_caps(x, caps_dim);
  }
  void register_params(const std::string&, ParamRegistry<T>&) override {}
};

template <class T>
struct ClassProbabilitiesModule : Module<T> {
  Tensor<T> forward(const Tensor<T>& x, bool, Rng&) override { return class_probabilities(x); }
  void register_params(const std::string&, ParamRegistry<T>&) override {}
};

// Dropout on rank-3 capsule tensors reuses the elementwise op directly.
template <class T>
void append_classifier_head(ModelGraph<T>& model, std::size_t in_features,
                            const ArchitectureConfig& cfg, const std::vector<std::size_t>& hidden,
                            Rng& rng) {
  model.add("head.dropout", std::make_unique<Dropout<T>>(cfg.dropout));
  std::size_t prev = in_features;
  for (std::size_t i = 0; i < hidden.size(); ++i) {
    model.add("head.fc" + std::to_string(i + 1), std::make_unique<Linear<T>>(prev, hidden[i], rng));
    model.add("head.fc" + std::to_string(i + 1) + "_silu", std::make_unique<Silu<T>>());
    prev = hidden[i];
  }
  model.add("head.out", std::make_unique<Linear<T>>(prev, cfg.num_classes, rng));
}

void check_arch(const ArchitectureConfig& cfg, const char* expected) {
  if (cfg.architecture != expected)
    throw ConfigError(std::string("builder for '") + expected + "' got architecture '" +
                      cfg.architecture + "'");
  cfg.validate();
}

}  // namespace

void ArchitectureConfig::validate() const {
  if (!known_arch(architecture))
    throw ConfigError("unknown architecture '" + architecture +
                      "'; expected cnn, convkan, capsnet, or capsule_convkan");
  if (in_channels == 0 || in_height == 0 || in_width == 0)
    throw ConfigError("input shape (" + std::to_string(in_channels) + "," +
                      std::to_string(in_height) + "," + std::to_string(in_width) +
                      ") must have positive extents");
  if (num_classes < 2)
    throw ConfigError("num_classes must be >= 2, got " + std::to_string(num_classes));
  if (channels.empty()) throw ConfigError("channel plan must be non-empty");
  for (std::size_t c : channels)
    if (c == 0) throw ConfigError("channel plan entries must be positive");
  if (kernels.size() != channels.size())
    throw ConfigError("kernel plan has " + std::to_string(kernels.size()) + " entries for " +
                      std::to_string(channels.size()) + " channel stages");
  for (std::size_t k : kernels)
    if (k == 0) throw ConfigError("kernel sizes must be positive");
  if (!strides.empty() && strides.size() != channels.size())
    throw ConfigError("stride plan has " + std::to_string(strides.size()) + " entries for " +
                      std::to_string(channels.size()) + " channel stages");
  for (std::size_t s : strides)
    if (s == 0) throw ConfigError("strides must be positive");
  if (spline_grid == 0) throw ConfigError("spline_grid must be positive");
  if (spline_degree < 0 || spline_degree > SplineGrid<double>::kMaxDegree)
    throw ConfigError("spline_degree must lie in [0," +
                      std::to_string(SplineGrid<double>::kMaxDegree) + "], got " +
                      std::to_string(spline_degree));
  if (!(spline_min < spline_max))
    throw ConfigError("spline range [" + std::to_string(spline_min) + "," +
                      std::to_string(spline_max) + "] must satisfy min < max");
  if (caps_dim == 0) throw ConfigError("caps_dim must be positive");
  if (intermediate_caps == 0 || intermediate_caps_dim == 0 || out_caps_dim == 0)
    throw ConfigError("capsule layer sizes must be positive");
  if (routing_iters == 0) throw ConfigError("routing_iters must be >= 1");
  if (dropout < 0.0 || dropout >= 1.0)
    throw ConfigError("dropout must lie in [0,1), got " + std::to_string(dropout));
}

ArchitectureConfig default_arch_config(const std::string& architecture) {
  ArchitectureConfig cfg;
  cfg.architecture = architecture;
  if (architecture == "cnn" || architecture == "convkan") {
    cfg.channels = {32, 64, 128};
    cfg.kernels = {3, 3, 3};
  } else if (architecture == "capsnet") {
    cfg.channels = {32, 64};
    cfg.kernels = {3, 3};
    cfg.num_primary = 128;
  } else if (architecture == "capsule_convkan") {
    cfg.channels = {32, 64, 128};
    cfg.kernels = {3, 3, 3};
    cfg.num_primary = 64;
  } else {
    throw ConfigError("unknown architecture '" + architecture + "'");
  }
  return cfg;
}

nlohmann::json arch_to_json(const ArchitectureConfig& c) {
  return nlohmann::json{{"architecture", c.architecture},
                        {"in_channels", c.in_channels},
                        {"in_height", c.in_height},
                        {"in_width", c.in_width},
                        {"num_classes", c.num_classes},
                        {"channels", c.channels},
                        {"kernels", c.kernels},
                        {"strides", c.strides},
                        {"head_hidden", c.head_hidden},
                        {"spline_grid", c.spline_grid},
                        {"spline_degree", c.spline_degree},
                        {"spline_min", c.spline_min},
                        {"spline_max", c.spline_max},
                        {"caps_dim", c.caps_dim},
                        {"num_primary", c.num_primary},
                        {"intermediate_caps", c.intermediate_caps},
                        {"intermediate_caps_dim", c.intermediate_caps_dim},
                        {"out_caps_dim", c.out_caps_dim},
                        {"routing_iters", c.routing_iters},
                        {"dropout", c.dropout}};
}

ArchitectureConfig arch_from_json(const nlohmann::json& j) {
  if (!j.is_object()) throw ConfigError("architecture config must be an object");
  if (!j.contains("architecture") || !j.at("architecture").is_string())
    throw ConfigError("architecture config requires a string 'architecture' key");
  ArchitectureConfig c = default_arch_config(j.at("architecture").get<std::string>());
  static const std::unordered_set<std::string> known = {
      "architecture",  "in_channels",       "in_height",
      "in_width",      "num_classes",       "channels",
      "kernels",       "strides",           "head_hidden",
      "spline_grid",   "spline_degree",     "spline_min",
      "spline_max",    "caps_dim",          "num_primary",
      "intermediate_caps", "intermediate_caps_dim", "out_caps_dim",
      "routing_iters", "dropout"};
  for (const auto& [key, value] : j.items())
    if (!known.count(key)) throw ConfigError("unknown architecture config key '" + key + "'");
  try {
    if (j.contains("in_channels")) c.in_channels = j.at("in_channels").get<std::size_t>();
    if (j.contains("in_height")) c.in_height = j.at("in_height").get<std::size_t>();
    if (j.contains("in_width")) c.in_width = j.at("in_width").get<std::size_t>();
    if (j.contains("num_classes")) c.num_classes = j.at("num_classes").get<std::size_t>();
    if (j.contains("channels")) c.channels = j.at("channels").get<std::vector<std::size_t>>();
    if (j.contains("kernels")) c.kernels = j.at("kernels").get<std::vector<std::size_t>>();
    if (j.contains("strides")) c.strides = j.at("strides").get<std::vector<std::size_t>>();
    if (j.contains("head_hidden"))
      c.head_hidden = j.at("head_hidden").get<std::vector<std::size_t>>();
    if (j.contains("spline_grid")) c.spline_grid = j.at("spline_grid").get<std::size_t>();
    if (j.contains("spline_degree")) c.spline_degree = j.at("spline_degree").get<int>();
    if (j.contains("spline_min")) c.spline_min = j.at("spline_min").get<double>();
    if (j.contains("spline_max")) c.spline_max = j.at("spline_max").get<double>();
    if (j.contains("caps_dim")) c.caps_dim = j.at("caps_dim").get<std::size_t>();
    if (j.contains("num_primary")) c.num_primary = j.at("num_primary").get<std::size_t>();
    if (j.contains("intermediate_caps"))
      c.intermediate_caps = j.at("intermediate_caps").get<std::size_t>();
    if (j.contains("intermediate_caps_dim"))
      c.intermediate_caps_dim = j.at("intermediate_caps_dim").get<std::size_t>();
    if (j.contains("out_caps_dim")) c.out_caps_dim = j.at("out_caps_dim").get<std::size_t>();
    if (j.contains("routing_iters")) c.routing_iters = j.at("routing_iters").get<std::size_t>();
    if (j.contains("dropout")) c.dropout = j.at("dropout").get<double>();
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("architecture config type error: ") + e.what());
  }
  if (j.contains("kernels") && !j.contains("channels"))
    throw ConfigError("kernel plan given without a channel plan");
  if (!j.contains("kernels") && j.contains("channels"))
    c.kernels.assign(c.channels.size(), 3);
  c.validate();
  return c;
}

// ---------------------------------------------------------------------------
// Builders
// ---------------------------------------------------------------------------

template <class T>
ModelGraph<T> build_cnn(const ArchitectureConfig& cfg, Rng& rng) {
  check_arch(cfg, "cnn");
  const auto strides = resolve_strides(cfg);
  ModelGraph<T> model;
  model.set_config(cfg);
  model.set_output_kind(OutputKind::logits);

  std::size_t c = cfg.in_channels, h = cfg.in_height, w = cfg.in_width;
  for (std::size_t i = 0; i < cfg.channels.size(); ++i) {
    const std::size_t k = cfg.kernels[i], s = strides[i], p = k / 2;
    const std::string name = "conv" + std::to_string(i + 1);
    h = conv_out(h, k, s, p, name);
    w = conv_out(w, k, s, p, name);
    model.add(name, std::make_unique<Conv2d<T>>(c, cfg.channels[i], k, s, p, rng));
    model.add(name + "_silu", std::make_unique<Silu<T>>());
    const bool last = (i + 1 == cfg.channels.size());
    const std::size_t th = last ? 1 : std::max<std::size_t>(1, h / 2);
    const std::size_t tw = last ? 1 : std::max<std::size_t>(1, w / 2);
    model.add("pool" + std::to_string(i + 1), std::make_unique<AdaptiveAvgPool2d<T>>(th, tw));
    h = th;
    w = tw;
    c = cfg.channels[i];
  }
  model.add("flatten", std::make_unique<Flatten<T>>());
  append_classifier_head(model, c * h * w, cfg, cfg.head_hidden, rng);
  model.validate_registry();
  return model;
}

template <class T>
ModelGraph<T> build_convkan(const ArchitectureConfig& cfg, Rng& rng) {
  check_arch(cfg, "convkan");
  const auto strides = resolve_strides(cfg);
  ModelGraph<T> model;
  model.set_config(cfg);
  model.set_output_kind(OutputKind::logits);

  std::size_t c = cfg.in_channels, h = cfg.in_height, w = cfg.in_width;
  for (std::size_t i = 0; i < cfg.channels.size(); ++i) {
    const std::size_t k = cfg.kernels[i], s = strides[i], p = k / 2;
    const std::string name = "block" + std::to_string(i + 1);
    h = conv_out(h, k, s, p, name);
    w = conv_out(w, k, s, p, name);
    model.add(name, std::make_unique<ConvKanBlock<T>>(
                        c, cfg.channels[i], k, s, p, rng, static_cast<T>(cfg.spline_min),
                        static_cast<T>(cfg.spline_max), cfg.spline_grid, cfg.spline_degree));
    c = cfg.channels[i];
  }
  model.add("pool", std::make_unique<AdaptiveAvgPool2d<T>>(1, 1));
  model.add("flatten", std::make_unique<Flatten<T>>());
  const std::vector<std::size_t> hidden =
      cfg.head_hidden.empty() ? std::vector<std::size_t>{128} : cfg.head_hidden;
  append_classifier_head(model, c, cfg, hidden, rng);
  model.validate_registry();
  return model;
}

template <class T>
ModelGraph<T> build_capsnet(const ArchitectureConfig& cfg, Rng& rng) {
  check_arch(cfg, "capsnet");
  const auto strides = resolve_strides(cfg);
  ModelGraph<T> model;
  model.set_config(cfg);
  model.set_output_kind(OutputKind::lengths);

  std::size_t c = cfg.in_channels, h = cfg.in_height, w = cfg.in_width;
  for (std::size_t i = 0; i < cfg.channels.size(); ++i) {
    const std::size_t k = cfg.kernels[i], s = strides[i], p = k / 2;
    const std::string name = "conv" + std::to_string(i + 1);
    h = conv_out(h, k, s, p, name);
    w = conv_out(w, k, s, p, name);
    model.add(name, std::make_unique<Conv2d<T>>(c, cfg.channels[i], k, s, p, rng));
    model.add(name + "_silu", std::make_unique<Silu<T>>());
    c = cfg.channels[i];
  }
  const std::size_t num_primary = cfg.num_primary ? cfg.num_primary : 128;
  const std::size_t side = capsule_pool_side(cfg, c, num_primary);
  if (side > h || side > w)
    throw ConfigError("capsule layout: pooling target " + std::to_string(side) + "x" +
                      std::to_string(side) + " exceeds feature map " + std::to_string(h) + "x" +
                      std::to_string(w) + "; reduce num_primary or strides");
  model.add("caps_pool", std::make_unique<AdaptiveAvgPool2d<T>>(side, side));
  model.add("primary_caps", std::make_unique<PrimaryCapsModule<T>>(cfg.caps_dim));
  model.add("caps_dropout", std::make_unique<Dropout<T>>(cfg.dropout));
  model.add("routing1",
            std::make_unique<RoutingLayer<T>>(num_primary, cfg.intermediate_caps, cfg.caps_dim,
                                              cfg.intermediate_caps_dim, cfg.routing_iters, rng));
  model.add("routing2",
            std::make_unique<RoutingLayer<T>>(cfg.intermediate_caps, cfg.num_classes,
                                              cfg.intermediate_caps_dim, cfg.out_caps_dim,
                                              cfg.routing_iters, rng));
  model.add("lengths", std::make_unique<ClassProbabilitiesModule<T>>());
  model.validate_registry();
  return model;
}

template <class T>
ModelGraph<T> build_capsule_convkan(const ArchitectureConfig& cfg, Rng& rng) {
  check_arch(cfg, "capsule_convkan");
  const auto strides = resolve_strides(cfg);
  ModelGraph<T> model;
  model.set_config(cfg);
  model.set_output_kind(OutputKind::lengths);

  std::size_t c = cfg.in_channels, h = cfg.in_height, w = cfg.in_width;
  for (std::size_t i = 0; i < cfg.channels.size(); ++i) {
    const std::size_t k = cfg.kernels[i], s = strides[i], p = k / 2;
    const std::string name = "block" + std::to_string(i + 1);
    h = conv_out(h, k, s, p, name);
    w = conv_out(w, k, s, p, name);
    model.add(name, std::make_unique<ConvKanBlock<T>>(
                        c, cfg.channels[i], k, s, p, rng, static_cast<T>(cfg.spline_min),
                        static_cast<T>(cfg.spline_max), cfg.spline_grid, cfg.spline_degree));
    c = cfg.channels[i];
  }
  const std::size_t num_primary = cfg.num_primary ? cfg.num_primary : 64;
  const std::size_t side = capsule_pool_side(cfg, c, num_primary);
  if (side > h || side > w)
    throw ConfigError("capsule layout: pooling target " + std::to_string(side) + "x" +
                      std::to_string(side) + " exceeds feature map " + std::to_string(h) + "x" +
                      std::to_string(w) + "; reduce num_primary or strides");
  model.add("caps_pool", std::make_unique<AdaptiveAvgPool2d<T>>(side, side));
  model.add("primary_caps", std::make_unique<PrimaryCapsModule<T>>(cfg.caps_dim));
  model.add("caps_dropout", std::make_unique<Dropout<T>>(cfg.dropout));
  model.add("routing", std::make_unique<RoutingLayer<T>>(num_primary, cfg.num_classes,
                                                         cfg.caps_dim, cfg.out_caps_dim,
                                                         cfg.routing_iters, rng));
  model.add("lengths", std::make_unique<ClassProbabilitiesModule<T>>());
  model.validate_registry();
  return model;
}

template <class T>
ModelGraph<T> build_model(const ArchitectureConfig& cfg, Rng& rng) {
  if (cfg.architecture == "cnn") return build_cnn<T>(cfg, rng);
  if (cfg.architecture == "convkan") return build_convkan<T>(cfg, rng);
  if (cfg.architecture == "capsnet") return build_capsnet<T>(cfg, rng);
  if (cfg.architecture == "capsule_convkan") return build_capsule_convkan<T>(cfg, rng);
  throw ConfigError("unknown architecture '" + cfg.architecture + "'");
}

template ModelGraph<float> build_cnn<float>(const ArchitectureConfig&, Rng&);
template ModelGraph<float> build_convkan<float>(const ArchitectureConfig&, Rng&);
template ModelGraph<float> build_capsnet<float>(const ArchitectureConfig&, Rng&);
template ModelGraph<float> build_capsule_convkan<float>(const ArchitectureConfig&, Rng&);
template ModelGraph<float> build_model<float>(const ArchitectureConfig&, Rng&);
template ModelGraph<double> build_cnn<double>(const ArchitectureConfig&, Rng&);
template ModelGraph<double> build_convkan<double>(const ArchitectureConfig&, Rng&);
template ModelGraph<double> build_capsnet<double>(const ArchitectureConfig&, Rng&);
template ModelGraph<double> build_capsule_convkan<double>(const ArchitectureConfig&, Rng&);
template ModelGraph<double> build_model<double>(const ArchitectureConfig&, Rng&);

}  // namespace capskan
