#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>

#include <json.hpp>

#include "capskan/data_io.hpp"

namespace fs = std::filesystem;

namespace capskan {

namespace {

constexpr int kFormatVersion = 1;

std::string manifest_path(const std::string& prefix) { return prefix + ".json"; }
std::string payload_path(const std::string& prefix) { return prefix + ".bin"; }

void atomic_write(const std::string& path, const std::string& bytes) {
  const std::string tmp = path + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw DataError("cannot write '" + tmp + "'");
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw DataError("write failure on '" + tmp + "'");
  }
  std::error_code ec;
  fs::rename(tmp, path, ec);
  if (ec) throw DataError("cannot move '" + tmp + "' to '" + path + "': " + ec.message());
}

void append_le_f32(std::string& out, float v) {
  std::uint32_t bits;
  std::memcpy(&bits, &v, 4);
  out.push_back(static_cast<char>(bits & 0xff));
  out.push_back(static_cast<char>((bits >> 8) & 0xff));
  out.push_back(static_cast<char>((bits >> 16) & 0xff));
  out.push_back(static_cast<char>((bits >> 24) & 0xff));
}

float read_le_f32(const unsigned char* p) {
  const std::uint32_t bits = static_cast<std::uint32_t>(p[0]) |
                             (static_cast<std::uint32_t>(p[1]) << 8) |
                             (static_cast<std::uint32_t>(p[2]) << 16) |
                             (static_cast<std::uint32_t>(p[3]) << 24);
  float v;
  std::memcpy(&v, &bits, 4);
  return v;
}

}  // namespace

void save_checkpoint(ModelGraph<float>& model, const std::string& prefix) {
  nlohmann::ordered_json manifest;
  manifest["format_version"] = kFormatVersion;
  manifest["architecture"] = arch_to_json(model.config());
  manifest["output_kind"] = output_kind_name(model.output_kind());

  nlohmann::ordered_json params = nlohmann::ordered_json::array();
  std::string payload;
  std::size_t total = 0;
  for (const auto& e : model.params()) {
    nlohmann::ordered_json p;
    p["name"] = e.name;
    p["shape"] = e.tensor.shape();
    p["trainable"] = e.trainable;
    params.push_back(std::move(p));
    for (float v : e.tensor.values()) append_le_f32(payload, v);
    total += e.tensor.size();
  }
  manifest["params"] = std::move(params);
  manifest["payload_values"] = total;

  atomic_write(payload_path(prefix), payload);
  atomic_write(manifest_path(prefix), manifest.dump(2) + "\n");
}

ModelGraph<float> load_checkpoint(const std::string& prefix) {
  nlohmann::json manifest;
  {
    std::ifstream in(manifest_path(prefix));
    if (!in) throw DataError("cannot open checkpoint manifest '" + manifest_path(prefix) + "'");
    try {
      in >> manifest;
    } catch (const nlohmann::json::exception& e) {
      throw DataError("checkpoint manifest '" + manifest_path(prefix) +
                      "' is not valid JSON: " + e.what());
    }
  }
  if (!manifest.contains("format_version") || !manifest["format_version"].is_number_integer())
    throw DataError("checkpoint manifest lacks an integer format_version");
  if (manifest["format_version"].get<int>() != kFormatVersion)
    throw DataError("unsupported checkpoint format_version " +
                    manifest["format_version"].dump() + " (this build reads version " +
                    std::to_string(kFormatVersion) + ")");
  if (!manifest.contains("architecture"))
    throw DataError("checkpoint manifest lacks an architecture section");

  ArchitectureConfig cfg = arch_from_json(manifest["architecture"]);
  Rng rng(0);
  ModelGraph<float> model = build_model<float>(cfg, rng);

  const auto& params = manifest.at("params");
  if (!params.is_array() || params.size() != model.params().size())
    throw DataError("checkpoint lists " + std::to_string(params.size()) +
                    " parameters, model has " + std::to_string(model.params().size()));
  std::size_t total = 0;
  for (std::size_t i = 0; i < params.size(); ++i) {
    const auto& p = params[i];
    const auto& e = model.params()[i];
    if (p.at("name").get<std::string>() != e.name)
      throw DataError("checkpoint parameter " + std::to_string(i) + " is named '" +
                      p.at("name").get<std::string>() + "', model expects '" + e.name + "'");
    const auto shape = p.at("shape").get<std::vector<std::size_t>>();
    if (shape != e.tensor.shape())
      throw DataError("shape mismatch for checkpoint parameter '" + e.name + "'");
    total += e.tensor.size();
  }
  if (manifest.contains("payload_values") &&
      manifest["payload_values"].get<std::size_t>() != total)
    throw DataError("checkpoint manifest declares " +
                    manifest["payload_values"].dump() + " payload values, parameters sum to " +
                    std::to_string(total));

  std::ifstream in(payload_path(prefix), std::ios::binary);
  if (!in) throw DataError("cannot open checkpoint payload '" + payload_path(prefix) + "'");
  std::vector<unsigned char> bytes((std::istreambuf_iterator<char>(in)),
                                   std::istreambuf_iterator<char>());
  if (bytes.size() != 4 * total)
    throw DataError("checkpoint payload '" + payload_path(prefix) + "' holds " +
                    std::to_string(bytes.size()) + " bytes, manifest requires " +
                    std::to_string(4 * total));

  std::size_t offset = 0;
  for (auto& e : model.params()) {
    auto dst = e.tensor.values_mut();
    for (std::size_t i = 0; i < dst.size(); ++i, offset += 4)
      dst[i] = read_le_f32(bytes.data() + offset);
  }

  if (manifest.contains("output_kind")) {
    const std::string kind = manifest["output_kind"].get<std::string>();
    if (kind != output_kind_name(model.output_kind()))
      throw DataError("checkpoint output_kind '" + kind + "' does not match architecture '" +
                      cfg.architecture + "'");
  }
  return model;
}

}  // namespace capskan
