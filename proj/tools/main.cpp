// capskan CLI: train / evaluate / compare / gradcheck / synth-data.
//
// Exit codes: 0 ok, 1 check or internal failure, 2 configuration error,
// 3 data or I/O error, 4 numeric failure. Flag overrides beat config-file
// values. Every artifact lands under the configured output directory.

#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>

#include <CLI11.hpp>

#include "capskan/config.hpp"
#include "capskan/data_io.hpp"
#include "capskan/gradcheck.hpp"
#include "capskan/kernels.hpp"
#include "capskan/models.hpp"
#include "capskan/training.hpp"

namespace fs = std::filesystem;
using namespace capskan;

namespace {

struct Overrides {
  std::optional<std::uint64_t> seed;
  std::optional<std::size_t> epochs;
  std::optional<double> lr;
  std::optional<std::size_t> batch_size;
  std::optional<std::string> output_dir;
};

void apply_overrides(RunConfig& cfg, const Overrides& ov) {
  if (ov.seed) {
    cfg.seed = *ov.seed;
    cfg.train.seed = *ov.seed;
  }
  if (ov.epochs) cfg.train.max_epochs = *ov.epochs;
  if (ov.lr) cfg.train.lr = *ov.lr;
  if (ov.batch_size) cfg.train.batch_size = *ov.batch_size;
  if (ov.output_dir) cfg.output_dir = *ov.output_dir;
  cfg.validate();
}

// Input geometry and class count always follow the dataset.
void adopt_dataset_geometry(ArchitectureConfig& arch, const Dataset& ds) {
  arch.in_channels = ds.channels;
  arch.in_height = ds.height;
  arch.in_width = ds.width;
  if (ds.num_classes() < 2)
    throw DataError("dataset exposes " + std::to_string(ds.num_classes()) +
                    " class(es); at least 2 are required");
  arch.num_classes = ds.num_classes();
  arch.validate();
}

nlohmann::ordered_json metrics_to_json(const MetricsReport& m) {
  nlohmann::ordered_json j;
  j["accuracy"] = m.accuracy;
  j["precision"] = m.precision;
  j["recall"] = m.recall;
  j["f1"] = m.f1;
  j["positive_class"] = m.positive_class;
  j["confusion"] = m.confusion;
  return j;
}

void write_text_file(const std::string& path, const std::string& text) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw DataError("cannot write '" + path + "'");
  out << text;
  if (!out) throw DataError("write failure on '" + path + "'");
}

void print_metrics(std::ostream& os, const MetricsReport& m) {
  os << "accuracy:  " << m.accuracy << "\n"
     << "precision: " << m.precision << " (positive class " << m.positive_class << ")\n"
     << "recall:    " << m.recall << "\n"
     << "f1:        " << m.f1 << "\n"
     << "confusion (rows = true class, columns = predicted):\n";
  for (const auto& row : m.confusion) {
    os << " ";
    for (std::size_t v : row) os << "  " << v;
    os << "\n";
  }
}

void make_output_dir(const std::string& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw DataError("cannot create output directory '" + dir + "': " + ec.message());
}

// Shared by train and compare: split, build, fit, persist artifacts into
// `dir`. Returns the result of train_loop.
TrainResult<float> fit_one(const RunConfig& cfg, ArchitectureConfig arch,
                           const Dataset& ds, const std::string& dir, bool quiet) {
  adopt_dataset_geometry(arch, ds);
  SplitIndices split =
      stratified_split(ds.labels, cfg.frac_train, cfg.frac_val, cfg.frac_test, cfg.seed);
  Rng init_rng(cfg.seed);
  ModelGraph<float> model = build_model<float>(arch, init_rng);

  make_output_dir(dir);
  std::ofstream log(dir + "/epoch_log.jsonl", std::ios::trunc);
  if (!log) throw DataError("cannot write '" + dir + "/epoch_log.jsonl'");

  auto progress = [&](const EpochRecord& r) {
    if (quiet) return;
    std::cout << "epoch " << r.epoch << ": train_loss=" << r.train_loss
              << " val_loss=" << r.val_loss << " val_acc=" << r.val_acc << " lr=" << r.lr
              << "\n";
  };
  TrainResult<float> result = train_loop(model, ds, split, cfg.train, &log, progress);

  save_checkpoint(model, dir + "/checkpoint");
  write_text_file(dir + "/metrics.json", metrics_to_json(result.test_metrics).dump(2) + "\n");
  return result;
}

int cmd_train(const std::string& config_path, const Overrides& ov) {
  RunConfig cfg = load_run_config(config_path);
  apply_overrides(cfg, ov);
  Dataset ds = load_dataset(cfg.dataset, cfg.seed);

  std::cout << "training " << cfg.arch.architecture << " on " << ds.n << " samples ("
            << ds.channels << "x" << ds.height << "x" << ds.width << ", "
            << ds.num_classes() << " classes), seed " << cfg.seed << "\n";
  TrainResult<float> result = fit_one(cfg, cfg.arch, ds, cfg.output_dir, false);

  std::cout << "best epoch " << result.best_epoch << " (val_loss " << result.best_val_loss
            << ")" << (result.early_stopped ? ", early-stopped" : "") << "\n"
            << "test metrics:\n";
  print_metrics(std::cout, result.test_metrics);
  std::cout << "artifacts in " << cfg.output_dir << ": checkpoint.{json,bin}, "
            << "epoch_log.jsonl, metrics.json\n";
  return 0;
}

int cmd_evaluate(const std::string& checkpoint_prefix, const std::string& config_path,
                 const std::string& subset, const std::string& output_dir,
                 std::size_t batch_size) {
  ModelGraph<float> model = load_checkpoint(checkpoint_prefix);

  RunConfig cfg = load_run_config(config_path);
  Dataset ds = load_dataset(cfg.dataset, cfg.seed);
  if (model.config().num_classes != ds.num_classes())
    throw DataError("class-count mismatch: checkpoint expects " +
                    std::to_string(model.config().num_classes) + " classes, dataset has " +
                    std::to_string(ds.num_classes()));
  if (model.config().in_channels != ds.channels || model.config().in_height != ds.height ||
      model.config().in_width != ds.width)
    throw DataError("input-geometry mismatch: checkpoint expects " +
                    std::to_string(model.config().in_channels) + "x" +
                    std::to_string(model.config().in_height) + "x" +
                    std::to_string(model.config().in_width) + ", dataset is " +
                    std::to_string(ds.channels) + "x" + std::to_string(ds.height) + "x" +
                    std::to_string(ds.width));

  std::vector<std::size_t> indices;
  if (subset == "all") {
    indices.resize(ds.n);
    for (std::size_t i = 0; i < ds.n; ++i) indices[i] = i;
  } else {
    SplitIndices split =
        stratified_split(ds.labels, cfg.frac_train, cfg.frac_val, cfg.frac_test, cfg.seed);
    if (subset == "train") indices = split.train;
    else if (subset == "val") indices = split.val;
    else if (subset == "test") indices = split.test;
    else throw ConfigError("unknown subset '" + subset + "' (expected all, train, val, test)");
  }
  if (indices.empty()) throw DataError("selected subset '" + subset + "' is empty");

  std::vector<int> preds = predict(model, ds, indices, batch_size);
  MetricsReport metrics = compute_metrics(preds, gather_labels(ds, indices),
                                          cfg.train.positive_class, ds.num_classes());

  make_output_dir(output_dir);
  write_text_file(output_dir + "/metrics.json", metrics_to_json(metrics).dump(2) + "\n");
  std::cout << "evaluated " << indices.size() << " samples (subset: " << subset << ")\n";
  print_metrics(std::cout, metrics);
  std::cout << "report written to " << output_dir << "/metrics.json\n";
  return 0;
}

int cmd_compare(const std::string& config_path, const Overrides& ov) {
  RunConfig cfg = load_run_config(config_path);
  apply_overrides(cfg, ov);
  Dataset ds = load_dataset(cfg.dataset, cfg.seed);

  struct Row {
    std::string model;
    bool ok = false;
    double accuracy = 0.0;
    std::size_t params = 0;
    double sec_per_epoch = 0.0;
    std::string error;
  };
  std::vector<Row> rows;
  make_output_dir(cfg.output_dir);

  for (const std::string name : {"cnn", "convkan", "capsnet", "capsule_convkan"}) {
    Row row;
    row.model = name;
    try {
      ArchitectureConfig arch = default_arch_config(name);
      arch.num_classes = cfg.arch.num_classes;
      std::cout << "== " << name << "\n";
      TrainResult<float> result =
          fit_one(cfg, arch, ds, cfg.output_dir + "/" + name, true);
      ModelGraph<float> model = load_checkpoint(cfg.output_dir + "/" + name + "/checkpoint");
      row.ok = true;
      row.accuracy = result.test_metrics.accuracy;
      row.params = count_parameters(model);
      double total = 0.0;
      for (const auto& r : result.history) total += r.wall_time_sec;
      row.sec_per_epoch = result.history.empty()
                              ? 0.0
                              : total / static_cast<double>(result.history.size());
      std::cout << "   accuracy " << row.accuracy << ", " << row.params << " params, "
                << row.sec_per_epoch << " s/epoch over " << result.history.size()
                << " epochs\n";
    } catch (const std::exception& e) {
      row.error = e.what();
      std::cout << "   FAILED: " << row.error << "\n";
    }
    rows.push_back(std::move(row));
  }

  std::ostringstream csv;
  csv << "model,accuracy,params,sec_per_epoch\n";
  for (const Row& r : rows) {
    if (r.ok)
      csv << r.model << "," << r.accuracy << "," << r.params << "," << r.sec_per_epoch
          << "\n";
    else
      csv << r.model << ",error,error,error\n";
  }
  write_text_file(cfg.output_dir + "/comparison.csv", csv.str());

  std::cout << "\nmodel             accuracy   params     sec/epoch\n";
  for (const Row& r : rows) {
    char line[128];
    if (r.ok)
      std::snprintf(line, sizeof(line), "%-17s %-10.4f %-10zu %.3f\n", r.model.c_str(),
                    r.accuracy, r.params, r.sec_per_epoch);
    else
      std::snprintf(line, sizeof(line), "%-17s failed: see log\n", r.model.c_str());
    std::cout << line;
  }
  std::cout << "csv written to " << cfg.output_dir << "/comparison.csv\n";

  for (const Row& r : rows)
    if (!r.ok) return 1;
  return 0;
}

int cmd_gradcheck(const std::string& scope, bool negative_control) {
  if (negative_control) {
    gradcheck::Outcome o = gradcheck::run_negative_control(std::cout);
    if (!o.ok) {
      std::cout << "negative control: corrupted backward detected in '" << o.component
                << "'\n";
      return 1;
    }
    std::cout << "negative control NOT detected — harness is unsound\n";
    return 0;
  }
  std::vector<gradcheck::Outcome> outcomes = gradcheck::run_scope(scope, std::cout);
  if (gradcheck::all_ok(outcomes)) {
    std::cout << "gradcheck " << scope << ": all components passed\n";
    return 0;
  }
  for (const auto& o : outcomes)
    if (!o.ok) std::cout << "gradcheck failure in component '" << o.component << "'\n";
  return 1;
}

int cmd_synth(std::size_t n_per_class, std::size_t size, std::uint64_t seed,
              const std::string& out_dir) {
  Dataset ds = synth_generate(n_per_class, size, seed);
  make_output_dir(out_dir);
  save_image_dir(ds, out_dir);
  std::cout << "wrote " << ds.n << " PNGs (" << size << "x" << size << ", classes";
  for (const auto& c : ds.class_names) std::cout << " " << c;
  std::cout << ") to " << out_dir << "\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"KAN/capsule architectures: training and comparison toolkit"};
  app.require_subcommand(1);

  std::string config_path, checkpoint_prefix, subset = "all", scope = "all";
  std::string eval_output_dir = ".", synth_out;
  std::size_t synth_n = 100, synth_size = 32, eval_batch = 64;
  std::uint64_t synth_seed = 0;
  bool negative_control = false;
  Overrides ov;

  auto add_overrides = [&ov](CLI::App* cmd) {
    cmd->add_option("--seed", ov.seed, "Override the config seed");
    cmd->add_option("--epochs", ov.epochs, "Override training.max_epochs");
    cmd->add_option("--lr", ov.lr, "Override training.lr");
    cmd->add_option("--batch-size", ov.batch_size, "Override training.batch_size");
    cmd->add_option("--output-dir", ov.output_dir, "Override the output directory");
  };

  CLI::App* train = app.add_subcommand("train", "Train one architecture from a run config");
  train->add_option("--config", config_path, "Run configuration JSON")->required();
  add_overrides(train);

  CLI::App* evaluate =
      app.add_subcommand("evaluate", "Evaluate a checkpoint on a configured dataset");
  evaluate->add_option("--checkpoint", checkpoint_prefix,
                       "Checkpoint prefix (expects <prefix>.json + <prefix>.bin)")
      ->required();
  evaluate->add_option("--config", config_path, "Run config supplying dataset/split/seed")
      ->required();
  evaluate->add_option("--subset", subset, "all | train | val | test (default all)");
  evaluate->add_option("--output-dir", eval_output_dir, "Where to write metrics.json");
  evaluate->add_option("--batch-size", eval_batch, "Evaluation batch size");

  CLI::App* compare =
      app.add_subcommand("compare", "Train all four architectures on one dataset");
  compare->add_option("--config", config_path, "Run configuration JSON")->required();
  add_overrides(compare);

  CLI::App* gc = app.add_subcommand("gradcheck", "Finite-difference gradient verification");
  gc->add_option("--scope", scope, "all | bspline | kan | convkan | capsules | models");
  gc->add_flag("--negative-control", negative_control,
               "Run the deliberately corrupted op (expected to exit 1)");

  CLI::App* synth = app.add_subcommand("synth-data", "Write the synthetic set as PNG dirs");
  synth->add_option("--n-per-class", synth_n, "Images per class (default 100)");
  synth->add_option("--size", synth_size, "Image side in pixels (default 32, min 16)");
  synth->add_option("--seed", synth_seed, "Generator seed (default 0)");
  synth->add_option("--out", synth_out, "Output directory")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;  // bad usage is a configuration problem
  }

  try {
    if (train->parsed()) return cmd_train(config_path, ov);
    if (evaluate->parsed())
      return cmd_evaluate(checkpoint_prefix, config_path, subset, eval_output_dir, eval_batch);
    if (compare->parsed()) return cmd_compare(config_path, ov);
    if (gc->parsed()) return cmd_gradcheck(scope, negative_control);
    if (synth->parsed()) return cmd_synth(synth_n, synth_size, synth_seed, synth_out);
  } catch (const ConfigError& e) {
    std::cerr << "configuration error: " << e.what() << "\n";
    return 2;
  } catch (const DataError& e) {
    std::cerr << "data error: " << e.what() << "\n";
    return 3;
  } catch (const NumericError& e) {
    std::cerr << "numeric error: " << e.what() << "\n";
    return 4;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 1;
}
