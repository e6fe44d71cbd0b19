// End-to-end tests for the capskan CLI. The binary under test is located via
// the CAPSKAN_CLI_BIN environment variable (set by CTest); every case runs it
// as a child process and checks the exit code, the combined output, and the
// artifacts it leaves on disk.

#include "doctest.h"

#include <sys/wait.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "capskan/data_io.hpp"
#include "capskan/models.hpp"
#include "support/oracles.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

std::string cli_bin() {
  const char* bin = std::getenv("CAPSKAN_CLI_BIN");
  REQUIRE_MESSAGE(bin != nullptr, "CAPSKAN_CLI_BIN must point at the CLI binary");
  REQUIRE_MESSAGE(fs::exists(bin), "CAPSKAN_CLI_BIN points at a missing file");
  return bin;
}

struct CliRun {
  int code = -1;          // decoded exit status
  std::string output;     // stdout + stderr, interleaved
};

CliRun run_cli(const std::string& args, const testsup::TempDir& scratch) {
  static int counter = 0;
  const std::string capture = scratch.file("cli_capture_" + std::to_string(counter++) + ".txt");
  const std::string cmd = "\"" + cli_bin() + "\" " + args + " > \"" + capture + "\" 2>&1";
  const int raw = std::system(cmd.c_str());
  CliRun r;
  if (raw != -1 && WIFEXITED(raw)) r.code = WEXITSTATUS(raw);
  std::ifstream in(capture);
  std::ostringstream ss;
  ss << in.rdbuf();
  r.output = ss.str();
  return r;
}

std::string slurp(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  REQUIRE_MESSAGE(in.good(), "expected file to exist: " << path);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

std::vector<std::string> lines_of(const std::string& text) {
  std::vector<std::string> out;
  std::istringstream in(text);
  for (std::string line; std::getline(in, line);)
    if (!line.empty()) out.push_back(line);
  return out;
}

// Small architecture that trains in well under a second on the 16x16
// synthetic set. Geometry fields are overwritten from the dataset at run
// time, so they only need to be self-consistent here.
json tiny_arch_json(const std::string& arch) {
  return json{{"architecture", arch},
              {"in_channels", 3},
              {"in_height", 16},
              {"in_width", 16},
              {"num_classes", 2},
              {"channels", {4}},
              {"kernels", {3}},
              {"strides", {2}},
              {"head_hidden", json::array()},
              {"spline_grid", 4},
              {"caps_dim", 4},
              {"num_primary", 4},
              {"intermediate_caps", 3},
              {"intermediate_caps_dim", 4},
              {"out_caps_dim", 4},
              {"routing_iters", 2},
              {"dropout", 0.1}};
}

json base_config(const std::string& arch, const std::string& out_dir,
                 std::size_t max_epochs = 3, std::size_t n_per_class = 12) {
  json j;
  j["architecture"] = tiny_arch_json(arch);
  j["training"] = json{{"lr", 3e-3}, {"batch_size", 8}, {"max_epochs", max_epochs},
                       {"early_stop_patience", 10}};
  j["dataset"] = json{{"source", "synthetic"}, {"n_per_class", n_per_class}, {"size", 16}};
  j["split"] = json{{"train", 0.7}, {"val", 0.15}, {"test", 0.15}};
  j["seed"] = 11;
  j["output_dir"] = out_dir;
  return j;
}

std::string write_json(const std::string& path, const json& j) {
  std::ofstream out(path);
  out << j.dump(2) << "\n";
  return path;
}

}  // namespace

TEST_CASE("cli: synth-data writes a reloadable PNG tree and honours its flags") {
  testsup::TempDir td("cli_synth");
  const std::string out_a = td.file("set_a");

  CliRun r = run_cli("synth-data --n-per-class 5 --size 16 --seed 3 --out \"" + out_a + "\"", td);
  CHECK(r.code == 0);
  CHECK(r.output.find("wrote 10 PNGs") != std::string::npos);

  // One subdirectory per class name, five PNGs each.
  REQUIRE(fs::is_directory(out_a + "/grid"));
  REQUIRE(fs::is_directory(out_a + "/clusters"));
  std::size_t grid_n = 0, clusters_n = 0;
  for (const auto& e : fs::directory_iterator(out_a + "/grid"))
    if (e.path().extension() == ".png") ++grid_n;
  for (const auto& e : fs::directory_iterator(out_a + "/clusters"))
    if (e.path().extension() == ".png") ++clusters_n;
  CHECK(grid_n == 5);
  CHECK(clusters_n == 5);

  // The tree loads back as a valid dataset; class names come back sorted.
  capskan::Dataset ds = capskan::load_image_dir(out_a);
  CHECK(ds.n == 10);
  CHECK(ds.channels == 3);
  CHECK(ds.height == 16);
  CHECK(ds.width == 16);
  REQUIRE(ds.class_names.size() == 2);
  CHECK(ds.class_names[0] == "clusters");
  CHECK(ds.class_names[1] == "grid");

  // Same seed reproduces the exact byte content; a different seed does not.
  const std::string out_b = td.file("set_b");
  const std::string out_c = td.file("set_c");
  CHECK(run_cli("synth-data --n-per-class 5 --size 16 --seed 3 --out \"" + out_b + "\"", td).code == 0);
  CHECK(run_cli("synth-data --n-per-class 5 --size 16 --seed 4 --out \"" + out_c + "\"", td).code == 0);
  capskan::Dataset ds_b = capskan::load_image_dir(out_b);
  capskan::Dataset ds_c = capskan::load_image_dir(out_c);
  REQUIRE(ds_b.images.size() == ds.images.size());
  CHECK(ds_b.images == ds.images);
  CHECK(ds_c.images != ds.images);

  // Flag plumbing for the geometry options.
  const std::string out_d = td.file("set_d");
  CHECK(run_cli("synth-data --n-per-class 2 --size 20 --seed 0 --out \"" + out_d + "\"", td).code == 0);
  capskan::Dataset ds_d = capskan::load_image_dir(out_d);
  CHECK(ds_d.n == 4);
  CHECK(ds_d.height == 20);

  // Below the minimum size: configuration error, exit 2.
  CliRun bad = run_cli("synth-data --n-per-class 2 --size 8 --out \"" + td.file("tiny") + "\"", td);
  CHECK(bad.code == 2);
  CHECK(bad.output.find("configuration error") != std::string::npos);
}

TEST_CASE("cli: train produces the documented artifacts") {
  testsup::TempDir td("cli_train");
  const std::string run_dir = td.file("run");
  const std::string cfg = write_json(td.file("config.json"), base_config("cnn", run_dir));

  CliRun r = run_cli("train --config \"" + cfg + "\"", td);
  CHECK_MESSAGE(r.code == 0, r.output);
  CHECK(r.output.find("training cnn on 24 samples") != std::string::npos);
  CHECK(r.output.find("test metrics:") != std::string::npos);

  // Exactly the documented artifact set.
  REQUIRE(fs::exists(run_dir + "/epoch_log.jsonl"));
  REQUIRE(fs::exists(run_dir + "/checkpoint.json"));
  REQUIRE(fs::exists(run_dir + "/checkpoint.bin"));
  REQUIRE(fs::exists(run_dir + "/metrics.json"));

  // Every log line is a JSON object with exactly the five documented keys,
  // epochs counting up from 1.
  std::vector<std::string> log_lines = lines_of(slurp(run_dir + "/epoch_log.jsonl"));
  REQUIRE(!log_lines.empty());
  CHECK(log_lines.size() <= 3);
  for (std::size_t i = 0; i < log_lines.size(); ++i) {
    json rec = json::parse(log_lines[i]);
    REQUIRE(rec.is_object());
    CHECK(rec.size() == 5);
    CHECK(rec.contains("epoch"));
    CHECK(rec.contains("train_loss"));
    CHECK(rec.contains("val_loss"));
    CHECK(rec.contains("val_acc"));
    CHECK(rec.contains("lr"));
    CHECK(rec.at("epoch").get<std::size_t>() == i + 1);
  }

  json metrics = json::parse(slurp(run_dir + "/metrics.json"));
  for (const char* key : {"accuracy", "precision", "recall", "f1", "positive_class", "confusion"})
    CHECK_MESSAGE(metrics.contains(key), "metrics.json missing " << key);
  const double acc = metrics.at("accuracy").get<double>();
  CHECK(acc >= 0.0);
  CHECK(acc <= 1.0);
  std::size_t confusion_total = 0;
  for (const auto& row : metrics.at("confusion"))
    for (const auto& v : row) confusion_total += v.get<std::size_t>();
  CHECK(confusion_total == 2);  // floor(0.15 * 12) = 1 test sample per class

  // The checkpoint reloads as the trained architecture with the dataset's
  // geometry adopted.
  capskan::ModelGraph<float> model = capskan::load_checkpoint(run_dir + "/checkpoint");
  CHECK(model.config().architecture == "cnn");
  CHECK(model.config().in_channels == 3);
  CHECK(model.config().in_height == 16);
  CHECK(model.config().in_width == 16);
  CHECK(model.config().num_classes == 2);
}

TEST_CASE("cli: identical runs are byte-identical, seed override changes them") {
  testsup::TempDir td("cli_determinism");
  const std::string run_a = td.file("run_a");
  const std::string run_b = td.file("run_b");
  const std::string run_c = td.file("run_c");
  const std::string cfg = write_json(td.file("config.json"), base_config("convkan", run_a, 2));

  CliRun a = run_cli("train --config \"" + cfg + "\"", td);
  REQUIRE_MESSAGE(a.code == 0, a.output);
  // --output-dir override: same run, different destination.
  CliRun b = run_cli("train --config \"" + cfg + "\" --output-dir \"" + run_b + "\"", td);
  REQUIRE_MESSAGE(b.code == 0, b.output);

  CHECK(slurp(run_a + "/epoch_log.jsonl") == slurp(run_b + "/epoch_log.jsonl"));
  CHECK(slurp(run_a + "/metrics.json") == slurp(run_b + "/metrics.json"));
  CHECK(slurp(run_a + "/checkpoint.bin") == slurp(run_b + "/checkpoint.bin"));

  // --seed override must actually reach the RNG.
  CliRun c = run_cli("train --config \"" + cfg + "\" --output-dir \"" + run_c + "\" --seed 999", td);
  REQUIRE_MESSAGE(c.code == 0, c.output);
  CHECK(slurp(run_a + "/epoch_log.jsonl") != slurp(run_c + "/epoch_log.jsonl"));
}

TEST_CASE("cli: configuration errors exit 2 and leave no partial artifacts") {
  testsup::TempDir td("cli_badcfg");
  const std::string never_dir = td.file("never");

  json bad = base_config("cnn", never_dir);
  bad["training"]["early_stop_patience"] = 0;
  const std::string cfg = write_json(td.file("bad.json"), bad);

  CliRun r = run_cli("train --config \"" + cfg + "\"", td);
  CHECK(r.code == 2);
  CHECK(r.output.find("configuration error") != std::string::npos);
  CHECK(r.output.find("early_stop_patience") != std::string::npos);
  CHECK_MESSAGE(!fs::exists(never_dir), "rejected config must not create the output dir");

  // Unknown top-level key is rejected up front.
  json unknown = base_config("cnn", never_dir);
  unknown["mystery"] = 1;
  CliRun r2 = run_cli("train --config \"" + write_json(td.file("unknown.json"), unknown) + "\"", td);
  CHECK(r2.code == 2);
  CHECK(!fs::exists(never_dir));

  // Missing config file.
  CliRun r3 = run_cli("train --config \"" + td.file("nope.json") + "\"", td);
  CHECK(r3.code == 2);

  // Bad usage: missing required option, unknown subcommand.
  CHECK(run_cli("train", td).code == 2);
  CHECK(run_cli("frobnicate", td).code == 2);
}

TEST_CASE("cli: evaluate reports metrics and guards against mismatched datasets") {
  testsup::TempDir td("cli_eval");
  const std::string run_dir = td.file("run");
  const std::string cfg = write_json(td.file("config.json"), base_config("cnn", run_dir, 2));
  REQUIRE(run_cli("train --config \"" + cfg + "\"", td).code == 0);

  const std::string eval_dir = td.file("eval");
  CliRun r = run_cli("evaluate --checkpoint \"" + run_dir + "/checkpoint\" --config \"" + cfg +
                         "\" --subset test --output-dir \"" + eval_dir + "\"",
                     td);
  CHECK_MESSAGE(r.code == 0, r.output);
  CHECK(r.output.find("evaluated 2 samples (subset: test)") != std::string::npos);
  json metrics = json::parse(slurp(eval_dir + "/metrics.json"));
  CHECK(metrics.contains("accuracy"));
  CHECK(metrics.contains("confusion"));

  // Whole-dataset evaluation covers all 24 samples.
  CliRun r_all = run_cli("evaluate --checkpoint \"" + run_dir + "/checkpoint\" --config \"" + cfg +
                             "\" --output-dir \"" + td.file("eval_all") + "\"",
                         td);
  CHECK(r_all.code == 0);
  CHECK(r_all.output.find("evaluated 24 samples (subset: all)") != std::string::npos);

  // Unknown subset name: configuration error.
  CliRun r_subset = run_cli("evaluate --checkpoint \"" + run_dir + "/checkpoint\" --config \"" +
                                cfg + "\" --subset bogus --output-dir \"" + td.file("x") + "\"",
                            td);
  CHECK(r_subset.code == 2);
  CHECK(r_subset.output.find("unknown subset") != std::string::npos);

  // Same checkpoint against a 20x20 dataset: data error, exit 3.
  json other = base_config("cnn", td.file("other_out"), 2);
  other["dataset"]["size"] = 20;
  const std::string cfg20 = write_json(td.file("config20.json"), other);
  CliRun r_geom = run_cli("evaluate --checkpoint \"" + run_dir + "/checkpoint\" --config \"" +
                              cfg20 + "\" --output-dir \"" + td.file("y") + "\"",
                          td);
  CHECK(r_geom.code == 3);
  CHECK(r_geom.output.find("input-geometry mismatch") != std::string::npos);

  // Missing checkpoint files: data error, exit 3.
  CliRun r_missing = run_cli("evaluate --checkpoint \"" + td.file("ghost") + "\" --config \"" +
                                 cfg + "\" --output-dir \"" + td.file("z") + "\"",
                             td);
  CHECK(r_missing.code == 3);
}

TEST_CASE("cli: gradcheck passes its scopes and the negative control trips") {
  testsup::TempDir td("cli_gradcheck");

  CliRun scoped = run_cli("gradcheck --scope bspline", td);
  CHECK_MESSAGE(scoped.code == 0, scoped.output);
  CHECK(scoped.output.find("all components passed") != std::string::npos);

  CliRun all = run_cli("gradcheck", td);
  CHECK_MESSAGE(all.code == 0, all.output);
  CHECK(all.output.find("gradcheck all: all components passed") != std::string::npos);

  // The deliberately corrupted backward must be caught and must name the op.
  CliRun control = run_cli("gradcheck --negative-control", td);
  CHECK(control.code == 1);
  CHECK(control.output.find("corrupted backward detected") != std::string::npos);
  CHECK(control.output.find("silu") != std::string::npos);

  CHECK(run_cli("gradcheck --scope nonsense", td).code == 2);
}

TEST_CASE("cli: compare trains all four architectures and writes the csv") {
  testsup::TempDir td("cli_compare");
  const std::string out_dir = td.file("cmp");
  json cfg_json = base_config("cnn", out_dir, 2);
  const std::string cfg = write_json(td.file("config.json"), cfg_json);

  CliRun r = run_cli("compare --config \"" + cfg + "\" --epochs 2", td);
  CHECK_MESSAGE(r.code == 0, r.output);

  std::vector<std::string> csv = lines_of(slurp(out_dir + "/comparison.csv"));
  REQUIRE(csv.size() == 5);
  CHECK(csv[0] == "model,accuracy,params,sec_per_epoch");
  const std::vector<std::string> expected = {"cnn", "convkan", "capsnet", "capsule_convkan"};
  for (std::size_t i = 0; i < expected.size(); ++i) {
    CHECK(csv[i + 1].rfind(expected[i] + ",", 0) == 0);
    CHECK_MESSAGE(csv[i + 1].find("error") == std::string::npos,
                  "row should hold numbers: " << csv[i + 1]);
  }

  // Each architecture leaves its own artifact directory behind.
  for (const std::string& name : expected) {
    CHECK(fs::exists(out_dir + "/" + name + "/checkpoint.json"));
    CHECK(fs::exists(out_dir + "/" + name + "/epoch_log.jsonl"));
    CHECK(fs::exists(out_dir + "/" + name + "/metrics.json"));
  }
}
