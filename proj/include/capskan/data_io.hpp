#pragma once

// Dataset ingestion (IDX, PNG class directories, synthetic generator) and
// checkpoint persistence.
//
// Checkpoint container: <prefix>.json manifest (format version, architecture
// config, parameter names/shapes) plus <prefix>.bin payload holding every
// registry entry as little-endian float32 in manifest order. Writes are
// atomic (temp file + rename).

#include <cstdint>
#include <string>
#include <vector>

#include "capskan/errors.hpp"
#include "capskan/models.hpp"
#include "capskan/tensor.hpp"

namespace capskan {

struct Dataset {
  std::size_t n = 0, channels = 0, height = 0, width = 0;
  std::vector<float> images;  // n*channels*height*width, values in [0,1]
  std::vector<int> labels;    // values in [0, num_classes)
  std::vector<std::string> class_names;

  std::size_t num_classes() const { return class_names.size(); }
  std::size_t image_size() const { return channels * height * width; }
  void validate() const;  // throws DataError on broken invariants
};

// IDX (big-endian header, ubyte payload). Images may be rank 3 [N,H,W]
// (loaded as C=1) or rank 4 [N,C,H,W]; labels rank 1. Pixels scale by 1/255.
Dataset load_idx(const std::string& images_path, const std::string& labels_path);
void save_idx(const Dataset& ds, const std::string& images_path,
              const std::string& labels_path);

// Directory with one subdirectory per class; class index follows sorted
// subdirectory names; images decoded as RGB.
Dataset load_image_dir(const std::string& root);
// Inverse: writes <root>/<class_name>/img_NNNNN.png (8-bit RGB).
void save_image_dir(const Dataset& ds, const std::string& root);

// Two-class synthetic texture set: class 0 = regular grid of soft blobs,
// class 1 = clustered sharp dots; identical noise floor. Deterministic.
Dataset synth_generate(std::size_t n_per_class, std::size_t size, std::uint64_t seed);

// PNG helpers (8-bit). read_png returns interleaved rows, `channels` is the
// decoded channel count (1, 3, or 4).
std::vector<unsigned char> read_png(const std::string& path, std::size_t& width,
                                    std::size_t& height, std::size_t& channels);
void write_png(const std::string& path, std::size_t width, std::size_t height,
               std::size_t channels, const unsigned char* data);

// Batch assembly.
template <class T>
Tensor<T> gather_images(const Dataset& ds, const std::vector<std::size_t>& indices) {
  const std::size_t isz = ds.image_size();
  std::vector<T> out(indices.size() * isz);
  for (std::size_t i = 0; i < indices.size(); ++i) {
    if (indices[i] >= ds.n)
      throw std::out_of_range("gather_images: index " + std::to_string(indices[i]) +
                              " out of range for dataset of " + std::to_string(ds.n));
    const float* src = ds.images.data() + indices[i] * isz;
    T* dst = out.data() + i * isz;
    for (std::size_t j = 0; j < isz; ++j) dst[j] = static_cast<T>(src[j]);
  }
  return Tensor<T>::from({indices.size(), ds.channels, ds.height, ds.width}, std::move(out),
                         false);
}

std::vector<int> gather_labels(const Dataset& ds, const std::vector<std::size_t>& indices);

// Checkpoints are float32 on disk; models train in float.
void save_checkpoint(ModelGraph<float>& model, const std::string& prefix);
ModelGraph<float> load_checkpoint(const std::string& prefix);

}  // namespace capskan
