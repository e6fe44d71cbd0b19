#include "capskan/config.hpp"

#include <cmath>
#include <fstream>
#include <unordered_set>

namespace capskan {

namespace {

void reject_unknown_keys(const nlohmann::json& j, const std::string& where,
                         const std::unordered_set<std::string>& known) {
  for (const auto& [key, value] : j.items()) {
    (void)value;
    if (!known.count(key))
      throw ConfigError("unknown key '" + key + "' in " + where + " section");
  }
}

template <class T>
T get_number(const nlohmann::json& j, const std::string& key, const std::string& where,
             T fallback) {
  if (!j.contains(key)) return fallback;
  const auto& v = j.at(key);
  if constexpr (std::is_floating_point_v<T>) {
    if (!v.is_number()) throw ConfigError(where + "." + key + " must be a number");
  } else {
    if (!v.is_number_integer() && !v.is_number_unsigned())
      throw ConfigError(where + "." + key + " must be an integer");
    if (v.is_number_integer() && v.template get<long long>() < 0)
      throw ConfigError(where + "." + key + " must be non-negative");
  }
  return v.template get<T>();
}

std::string get_string(const nlohmann::json& j, const std::string& key,
                       const std::string& where, const std::string& fallback) {
  if (!j.contains(key)) return fallback;
  if (!j.at(key).is_string()) throw ConfigError(where + "." + key + " must be a string");
  return j.at(key).get<std::string>();
}

TrainConfig train_from_json(const nlohmann::json& j) {
  static const std::unordered_set<std::string> known = {
      "lr",          "weight_decay",     "beta1",
      "beta2",       "eps",              "batch_size",
      "max_epochs",  "early_stop_patience", "improvement_threshold",
      "clip_max_norm", "scheduler_factor", "scheduler_patience",
      "lr_floor",    "loss",             "positive_class"};
  if (!j.is_object()) throw ConfigError("training section must be a JSON object");
  reject_unknown_keys(j, "training", known);
  TrainConfig t;
  t.lr = get_number<double>(j, "lr", "training", t.lr);
  t.weight_decay = get_number<double>(j, "weight_decay", "training", t.weight_decay);
  t.beta1 = get_number<double>(j, "beta1", "training", t.beta1);
  t.beta2 = get_number<double>(j, "beta2", "training", t.beta2);
  t.eps = get_number<double>(j, "eps", "training", t.eps);
  t.batch_size = get_number<std::size_t>(j, "batch_size", "training", t.batch_size);
  t.max_epochs = get_number<std::size_t>(j, "max_epochs", "training", t.max_epochs);
  t.early_stop_patience =
      get_number<std::size_t>(j, "early_stop_patience", "training", t.early_stop_patience);
  t.improvement_threshold =
      get_number<double>(j, "improvement_threshold", "training", t.improvement_threshold);
  t.clip_max_norm = get_number<double>(j, "clip_max_norm", "training", t.clip_max_norm);
  t.scheduler_factor =
      get_number<double>(j, "scheduler_factor", "training", t.scheduler_factor);
  t.scheduler_patience =
      get_number<std::size_t>(j, "scheduler_patience", "training", t.scheduler_patience);
  t.lr_floor = get_number<double>(j, "lr_floor", "training", t.lr_floor);
  t.loss = loss_kind_from_name(get_string(j, "loss", "training", loss_kind_name(t.loss)));
  t.positive_class = get_number<int>(j, "positive_class", "training", t.positive_class);
  return t;
}

DatasetConfig dataset_from_json(const nlohmann::json& j) {
  static const std::unordered_set<std::string> known = {"source", "images", "labels",
                                                        "root",   "n_per_class", "size"};
  if (!j.is_object()) throw ConfigError("dataset section must be a JSON object");
  reject_unknown_keys(j, "dataset", known);
  DatasetConfig d;
  d.source = get_string(j, "source", "dataset", "");
  d.images = get_string(j, "images", "dataset", "");
  d.labels = get_string(j, "labels", "dataset", "");
  d.root = get_string(j, "root", "dataset", "");
  d.n_per_class = get_number<std::size_t>(j, "n_per_class", "dataset", d.n_per_class);
  d.size = get_number<std::size_t>(j, "size", "dataset", d.size);
  return d;
}

}  // namespace

void DatasetConfig::validate() const {
  if (source == "idx") {
    if (images.empty() || labels.empty())
      throw ConfigError("dataset source 'idx' requires both 'images' and 'labels' paths");
  } else if (source == "image_dir") {
    if (root.empty()) throw ConfigError("dataset source 'image_dir' requires a 'root' path");
  } else if (source == "synthetic") {
    if (n_per_class == 0)
      throw ConfigError("dataset.n_per_class must be >= 1, got 0");
    if (size < 16)
      throw ConfigError("dataset.size must be >= 16, got " + std::to_string(size));
  } else {
    throw ConfigError("dataset.source must be one of: idx, image_dir, synthetic; got '" +
                      source + "'");
  }
}

void RunConfig::validate() const {
  arch.validate();
  train.validate();
  dataset.validate();
  if (!(frac_train > 0.0 && frac_val > 0.0 && frac_test >= 0.0) ||
      std::abs(frac_train + frac_val + frac_test - 1.0) > 1e-9)
    throw ConfigError("split fractions must be positive (test may be 0) and sum to 1");
  if (output_dir.empty()) throw ConfigError("output_dir must not be empty");
}

RunConfig run_config_from_json(const nlohmann::json& j) {
  static const std::unordered_set<std::string> known = {
      "architecture", "training", "dataset", "split", "seed", "output_dir"};
  if (!j.is_object()) throw ConfigError("run config must be a JSON object");
  reject_unknown_keys(j, "run config top-level", known);

  RunConfig cfg;
  if (!j.contains("architecture"))
    throw ConfigError("run config requires an 'architecture' section");
  if (j.at("architecture").is_string()) {
    cfg.arch = default_arch_config(j.at("architecture").get<std::string>());
  } else {
    cfg.arch = arch_from_json(j.at("architecture"));
  }
  if (j.contains("training")) cfg.train = train_from_json(j.at("training"));
  if (!j.contains("dataset")) throw ConfigError("run config requires a 'dataset' section");
  cfg.dataset = dataset_from_json(j.at("dataset"));
  if (j.contains("split")) {
    static const std::unordered_set<std::string> split_keys = {"train", "val", "test"};
    reject_unknown_keys(j.at("split"), "split", split_keys);
    cfg.frac_train = get_number<double>(j.at("split"), "train", "split", cfg.frac_train);
    cfg.frac_val = get_number<double>(j.at("split"), "val", "split", cfg.frac_val);
    cfg.frac_test = get_number<double>(j.at("split"), "test", "split", cfg.frac_test);
  }
  cfg.seed = get_number<std::uint64_t>(j, "seed", "run config", cfg.seed);
  cfg.output_dir = get_string(j, "output_dir", "run config", cfg.output_dir);
  cfg.train.seed = cfg.seed;
  cfg.validate();
  return cfg;
}

RunConfig load_run_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open run config '" + path + "'");
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError("run config '" + path + "' is not valid JSON: " + e.what());
  }
  return run_config_from_json(j);
}

nlohmann::json run_config_to_json(const RunConfig& cfg) {
  nlohmann::ordered_json j;
  j["architecture"] = arch_to_json(cfg.arch);
  nlohmann::ordered_json t;
  t["lr"] = cfg.train.lr;
  t["weight_decay"] = cfg.train.weight_decay;
  t["beta1"] = cfg.train.beta1;
  t["beta2"] = cfg.train.beta2;
  t["eps"] = cfg.train.eps;
  t["batch_size"] = cfg.train.batch_size;
  t["max_epochs"] = cfg.train.max_epochs;
  t["early_stop_patience"] = cfg.train.early_stop_patience;
  t["improvement_threshold"] = cfg.train.improvement_threshold;
  t["clip_max_norm"] = cfg.train.clip_max_norm;
  t["scheduler_factor"] = cfg.train.scheduler_factor;
  t["scheduler_patience"] = cfg.train.scheduler_patience;
  t["lr_floor"] = cfg.train.lr_floor;
  t["loss"] = loss_kind_name(cfg.train.loss);
  t["positive_class"] = cfg.train.positive_class;
  j["training"] = std::move(t);
  nlohmann::ordered_json d;
  d["source"] = cfg.dataset.source;
  if (!cfg.dataset.images.empty()) d["images"] = cfg.dataset.images;
  if (!cfg.dataset.labels.empty()) d["labels"] = cfg.dataset.labels;
  if (!cfg.dataset.root.empty()) d["root"] = cfg.dataset.root;
  if (cfg.dataset.source == "synthetic") {
    d["n_per_class"] = cfg.dataset.n_per_class;
    d["size"] = cfg.dataset.size;
  }
  j["dataset"] = std::move(d);
  j["split"] = {{"train", cfg.frac_train}, {"val", cfg.frac_val}, {"test", cfg.frac_test}};
  j["seed"] = cfg.seed;
  j["output_dir"] = cfg.output_dir;
  return j;
}

Dataset load_dataset(const DatasetConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  if (cfg.source == "idx") return load_idx(cfg.images, cfg.labels);
  if (cfg.source == "image_dir") return load_image_dir(cfg.root);
  return synth_generate(cfg.n_per_class, cfg.size, seed);
}

}  // namespace capskan
