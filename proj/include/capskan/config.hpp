#pragma once

// Run configuration: one JSON document wiring an architecture, the training
// protocol, a dataset source, and output placement. Parsing is strict —
// unknown keys and out-of-range values are rejected up front, before any
// compute starts.

#include <cstdint>
#include <string>

#include <json.hpp>

#include "capskan/data_io.hpp"
#include "capskan/models.hpp"
#include "capskan/training.hpp"

namespace capskan {

struct DatasetConfig {
  std::string source;  // "idx" | "image_dir" | "synthetic"
  std::string images, labels;            // idx
  std::string root;                      // image_dir
  std::size_t n_per_class = 200;         // synthetic
  std::size_t size = 32;                 // synthetic

  void validate() const;  // throws ConfigError
};

struct RunConfig {
  ArchitectureConfig arch;
  TrainConfig train;
  DatasetConfig dataset;
  double frac_train = 0.70, frac_val = 0.15, frac_test = 0.15;
  std::string output_dir = "runs/out";
  std::uint64_t seed = 0;  // drives synthesis, splitting, and training

  void validate() const;
};

RunConfig run_config_from_json(const nlohmann::json& j);
RunConfig load_run_config(const std::string& path);
nlohmann::json run_config_to_json(const RunConfig& cfg);

// Materializes the configured source and reconciles the architecture's input
// geometry/class count against it (mismatch -> ConfigError).
Dataset load_dataset(const DatasetConfig& cfg, std::uint64_t seed);

}  // namespace capskan
