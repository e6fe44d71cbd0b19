#include "capskan/data_io.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>

#include <png.h>

#include "capskan/rng.hpp"

namespace fs = std::filesystem;

namespace capskan {

void Dataset::validate() const {
  if (n == 0) throw DataError("dataset is empty");
  if (channels == 0 || height == 0 || width == 0)
    throw DataError("dataset has zero-sized image dimensions");
  if (images.size() != n * image_size())
    throw DataError("dataset image buffer holds " + std::to_string(images.size()) +
                    " values, expected " + std::to_string(n * image_size()));
  if (labels.size() != n)
    throw DataError("dataset has " + std::to_string(labels.size()) + " labels for " +
                    std::to_string(n) + " images");
  if (class_names.empty()) throw DataError("dataset has no class names");
  for (std::size_t i = 0; i < n; ++i)
    if (labels[i] < 0 || static_cast<std::size_t>(labels[i]) >= class_names.size())
      throw DataError("label " + std::to_string(labels[i]) + " at sample " +
                      std::to_string(i) + " outside [0," +
                      std::to_string(class_names.size()) + ")");
  for (float v : images)
    if (!(v >= 0.0f && v <= 1.0f))
      throw DataError("pixel value " + std::to_string(v) + " outside [0,1]");
}

std::vector<int> gather_labels(const Dataset& ds, const std::vector<std::size_t>& indices) {
  std::vector<int> out;
  out.reserve(indices.size());
  for (std::size_t i : indices) {
    if (i >= ds.n)
      throw std::out_of_range("gather_labels: index " + std::to_string(i) +
                              " out of range for dataset of " + std::to_string(ds.n));
    out.push_back(ds.labels[i]);
  }
  return out;
}

// ---------------------------------------------------------------------------
// IDX
// ---------------------------------------------------------------------------

namespace {

std::vector<unsigned char> read_file_bytes(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open '" + path + "'");
  std::vector<unsigned char> bytes((std::istreambuf_iterator<char>(in)),
                                   std::istreambuf_iterator<char>());
  return bytes;
}

std::uint32_t be32(const unsigned char* p) {
  return (static_cast<std::uint32_t>(p[0]) << 24) | (static_cast<std::uint32_t>(p[1]) << 16) |
         (static_cast<std::uint32_t>(p[2]) << 8) | static_cast<std::uint32_t>(p[3]);
}

void put_be32(std::ostream& out, std::uint32_t v) {
  const unsigned char b[4] = {static_cast<unsigned char>(v >> 24),
                              static_cast<unsigned char>(v >> 16),
                              static_cast<unsigned char>(v >> 8),
                              static_cast<unsigned char>(v)};
  out.write(reinterpret_cast<const char*>(b), 4);
}

struct IdxPayload {
  std::vector<std::uint32_t> dims;
  std::vector<unsigned char> data;
};

IdxPayload parse_idx(const std::string& path) {
  std::vector<unsigned char> bytes = read_file_bytes(path);
  if (bytes.size() < 4) throw DataError("'" + path + "': truncated IDX header");
  if (bytes[0] != 0x00 || bytes[1] != 0x00)
    throw DataError("'" + path + "': bad IDX magic (first two bytes must be zero)");
  if (bytes[2] != 0x08)
    throw DataError("'" + path + "': unsupported IDX element type 0x" +
                    std::to_string(static_cast<int>(bytes[2])) +
                    " (only unsigned byte, 0x08, is supported)");
  const std::size_t ndims = bytes[3];
  if (ndims == 0) throw DataError("'" + path + "': IDX rank is zero");
  if (bytes.size() < 4 + 4 * ndims)
    throw DataError("'" + path + "': truncated IDX header (rank " + std::to_string(ndims) +
                    " needs " + std::to_string(4 + 4 * ndims) + " header bytes)");
  IdxPayload p;
  std::size_t total = 1;
  for (std::size_t d = 0; d < ndims; ++d) {
    const std::uint32_t extent = be32(bytes.data() + 4 + 4 * d);
    if (extent == 0) throw DataError("'" + path + "': IDX dimension " + std::to_string(d) +
                                     " is zero");
    p.dims.push_back(extent);
    total *= extent;
  }
  const std::size_t header = 4 + 4 * ndims;
  if (bytes.size() != header + total)
    throw DataError("'" + path + "': truncated IDX payload (header declares " +
                    std::to_string(total) + " bytes, file holds " +
                    std::to_string(bytes.size() - header) + ")");
  p.data.assign(bytes.begin() + static_cast<std::ptrdiff_t>(header), bytes.end());
  return p;
}

}  // namespace

Dataset load_idx(const std::string& images_path, const std::string& labels_path) {
  IdxPayload img = parse_idx(images_path);
  IdxPayload lab = parse_idx(labels_path);
  if (img.dims.size() != 3 && img.dims.size() != 4)
    throw DataError("'" + images_path + "': image IDX must have rank 3 [N,H,W] or rank 4 " +
                    "[N,C,H,W], got rank " + std::to_string(img.dims.size()));
  if (lab.dims.size() != 1)
    throw DataError("'" + labels_path + "': label IDX must have rank 1, got rank " +
                    std::to_string(lab.dims.size()));
  Dataset ds;
  ds.n = img.dims[0];
  if (img.dims.size() == 3) {
    ds.channels = 1;
    ds.height = img.dims[1];
    ds.width = img.dims[2];
  } else {
    ds.channels = img.dims[1];
    ds.height = img.dims[2];
    ds.width = img.dims[3];
  }
  if (lab.dims[0] != ds.n)
    throw DataError("image/label count mismatch: " + std::to_string(ds.n) + " images in '" +
                    images_path + "' vs " + std::to_string(lab.dims[0]) + " labels in '" +
                    labels_path + "'");
  ds.images.resize(img.data.size());
  for (std::size_t i = 0; i < img.data.size(); ++i)
    ds.images[i] = static_cast<float>(img.data[i]) / 255.0f;
  ds.labels.resize(ds.n);
  int max_label = 0;
  for (std::size_t i = 0; i < ds.n; ++i) {
    ds.labels[i] = static_cast<int>(lab.data[i]);
    max_label = std::max(max_label, ds.labels[i]);
  }
  for (int c = 0; c <= max_label; ++c) ds.class_names.push_back(std::to_string(c));
  ds.validate();
  return ds;
}

void save_idx(const Dataset& ds, const std::string& images_path,
              const std::string& labels_path) {
  ds.validate();
  {
    std::ofstream out(images_path, std::ios::binary | std::ios::trunc);
    if (!out) throw DataError("cannot write '" + images_path + "'");
    const bool rank3 = ds.channels == 1;
    out.put(0).put(0).put(0x08).put(static_cast<char>(rank3 ? 3 : 4));
    put_be32(out, static_cast<std::uint32_t>(ds.n));
    if (!rank3) put_be32(out, static_cast<std::uint32_t>(ds.channels));
    put_be32(out, static_cast<std::uint32_t>(ds.height));
    put_be32(out, static_cast<std::uint32_t>(ds.width));
    for (float v : ds.images)
      out.put(static_cast<char>(
          static_cast<unsigned char>(std::lround(std::clamp(v, 0.0f, 1.0f) * 255.0f))));
    if (!out) throw DataError("write failure on '" + images_path + "'");
  }
  {
    std::ofstream out(labels_path, std::ios::binary | std::ios::trunc);
    if (!out) throw DataError("cannot write '" + labels_path + "'");
    out.put(0).put(0).put(0x08).put(1);
    put_be32(out, static_cast<std::uint32_t>(ds.n));
    for (int l : ds.labels) out.put(static_cast<char>(static_cast<unsigned char>(l)));
    if (!out) throw DataError("write failure on '" + labels_path + "'");
  }
}

// ---------------------------------------------------------------------------
// PNG
// ---------------------------------------------------------------------------

std::vector<unsigned char> read_png(const std::string& path, std::size_t& width,
                                    std::size_t& height, std::size_t& channels) {
  std::FILE* fp = std::fopen(path.c_str(), "rb");
  if (!fp) throw DataError("cannot open '" + path + "'");
  unsigned char sig[8];
  if (std::fread(sig, 1, 8, fp) != 8 || png_sig_cmp(sig, 0, 8) != 0) {
    std::fclose(fp);
    throw DataError("'" + path + "': not a PNG file");
  }
  png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png ? png_create_info_struct(png) : nullptr;
  if (!png || !info) {
    if (png) png_destroy_read_struct(&png, info ? &info : nullptr, nullptr);
    std::fclose(fp);
    throw DataError("libpng initialization failed for '" + path + "'");
  }
  std::vector<unsigned char> pixels;
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_read_struct(&png, &info, nullptr);
    std::fclose(fp);
    throw DataError("'" + path + "': PNG decode error");
  }
  png_init_io(png, fp);
  png_set_sig_bytes(png, 8);
  png_read_info(png, info);

  // Normalize to 8-bit gray/RGB/RGBA.
  png_set_expand(png);
  if (png_get_bit_depth(png, info) == 16) png_set_strip_16(png);
  png_read_update_info(png, info);

  width = png_get_image_width(png, info);
  height = png_get_image_height(png, info);
  channels = png_get_channels(png, info);
  const std::size_t rowbytes = png_get_rowbytes(png, info);
  pixels.resize(rowbytes * height);
  std::vector<png_bytep> rows(height);
  for (std::size_t y = 0; y < height; ++y) rows[y] = pixels.data() + y * rowbytes;
  png_read_image(png, rows.data());
  png_read_end(png, nullptr);
  png_destroy_read_struct(&png, &info, nullptr);
  std::fclose(fp);
  return pixels;
}

void write_png(const std::string& path, std::size_t width, std::size_t height,
               std::size_t channels, const unsigned char* data) {
  int color_type;
  switch (channels) {
    case 1: color_type = PNG_COLOR_TYPE_GRAY; break;
    case 3: color_type = PNG_COLOR_TYPE_RGB; break;
    case 4: color_type = PNG_COLOR_TYPE_RGBA; break;
    default:
      throw std::invalid_argument("write_png: unsupported channel count " +
                                  std::to_string(channels));
  }
  std::FILE* fp = std::fopen(path.c_str(), "wb");
  if (!fp) throw DataError("cannot write '" + path + "'");
  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png ? png_create_info_struct(png) : nullptr;
  if (!png || !info) {
    if (png) png_destroy_write_struct(&png, info ? &info : nullptr);
    std::fclose(fp);
    throw DataError("libpng initialization failed for '" + path + "'");
  }
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_write_struct(&png, &info);
    std::fclose(fp);
    throw DataError("'" + path + "': PNG encode error");
  }
  png_init_io(png, fp);
  png_set_IHDR(png, info, static_cast<png_uint_32>(width), static_cast<png_uint_32>(height),
               8, color_type, PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT,
               PNG_FILTER_TYPE_DEFAULT);
  png_write_info(png, info);
  std::vector<png_bytep> rows(height);
  for (std::size_t y = 0; y < height; ++y)
    rows[y] = const_cast<png_bytep>(data + y * width * channels);
  png_write_image(png, rows.data());
  png_write_end(png, nullptr);
  png_destroy_write_struct(&png, &info);
  std::fclose(fp);
}

// ---------------------------------------------------------------------------
// Image directories
// ---------------------------------------------------------------------------

Dataset load_image_dir(const std::string& root) {
  if (!fs::is_directory(root)) throw DataError("'" + root + "' is not a directory");
  std::vector<std::string> class_dirs;
  for (const auto& entry : fs::directory_iterator(root))
    if (entry.is_directory()) class_dirs.push_back(entry.path().filename().string());
  std::sort(class_dirs.begin(), class_dirs.end());
  if (class_dirs.empty())
    throw DataError("'" + root + "' contains no class subdirectories");

  Dataset ds;
  ds.channels = 3;
  ds.class_names = class_dirs;
  for (std::size_t cls = 0; cls < class_dirs.size(); ++cls) {
    std::vector<std::string> files;
    for (const auto& entry : fs::directory_iterator(fs::path(root) / class_dirs[cls]))
      if (entry.is_regular_file()) files.push_back(entry.path().string());
    std::sort(files.begin(), files.end());
    if (files.empty())
      throw DataError("class directory '" + (fs::path(root) / class_dirs[cls]).string() +
                      "' contains no images");
    for (const std::string& file : files) {
      std::size_t w = 0, h = 0, c = 0;
      std::vector<unsigned char> px = read_png(file, w, h, c);
      if (c != 1 && c != 3 && c != 4)
        throw DataError("'" + file + "': unsupported channel count " + std::to_string(c));
      if (ds.n == 0) {
        ds.height = h;
        ds.width = w;
      } else if (h != ds.height || w != ds.width) {
        throw DataError("'" + file + "': size " + std::to_string(w) + "x" +
                        std::to_string(h) + " differs from first image " +
                        std::to_string(ds.width) + "x" + std::to_string(ds.height));
      }
      // Interleaved rows -> planar RGB in [0,1]; gray replicates, alpha drops.
      const std::size_t hw = h * w;
      const std::size_t base = ds.images.size();
      ds.images.resize(base + 3 * hw);
      for (std::size_t i = 0; i < hw; ++i) {
        unsigned char r, g, b;
        if (c == 1) {
          r = g = b = px[i];
        } else {
          r = px[i * c + 0];
          g = px[i * c + 1];
          b = px[i * c + 2];
        }
        ds.images[base + 0 * hw + i] = static_cast<float>(r) / 255.0f;
        ds.images[base + 1 * hw + i] = static_cast<float>(g) / 255.0f;
        ds.images[base + 2 * hw + i] = static_cast<float>(b) / 255.0f;
      }
      ds.labels.push_back(static_cast<int>(cls));
      ++ds.n;
    }
  }
  ds.validate();
  return ds;
}

void save_image_dir(const Dataset& ds, const std::string& root) {
  ds.validate();
  if (ds.channels != 1 && ds.channels != 3)
    throw DataError("save_image_dir supports 1- or 3-channel datasets, got " +
                    std::to_string(ds.channels));
  std::vector<std::size_t> next(ds.num_classes(), 0);
  for (const std::string& name : ds.class_names) {
    std::error_code ec;
    fs::create_directories(fs::path(root) / name, ec);
    if (ec)
      throw DataError("cannot create directory '" + (fs::path(root) / name).string() +
                      "': " + ec.message());
  }
  const std::size_t hw = ds.height * ds.width;
  std::vector<unsigned char> row(hw * ds.channels);
  for (std::size_t i = 0; i < ds.n; ++i) {
    const float* img = ds.images.data() + i * ds.image_size();
    for (std::size_t p = 0; p < hw; ++p)
      for (std::size_t c = 0; c < ds.channels; ++c)
        row[p * ds.channels + c] = static_cast<unsigned char>(
            std::lround(std::clamp(img[c * hw + p], 0.0f, 1.0f) * 255.0f));
    const auto cls = static_cast<std::size_t>(ds.labels[i]);
    char name[32];
    std::snprintf(name, sizeof(name), "img_%05zu.png", next[cls]++);
    write_png((fs::path(root) / ds.class_names[cls] / name).string(), ds.width, ds.height,
              ds.channels, row.data());
  }
}

// ---------------------------------------------------------------------------
// Synthetic two-class texture set
// ---------------------------------------------------------------------------

namespace {

// Paints `amount` of the stain color into planar RGB at (x, y).
void darken(std::vector<float>& img, std::size_t size, double x, double y, double amount) {
  if (x < 0 || y < 0 || x >= static_cast<double>(size) || y >= static_cast<double>(size))
    return;
  static constexpr double kStain[3] = {0.58, 0.66, 0.38};  // towards dark purple
  const std::size_t hw = size * size;
  const std::size_t p = static_cast<std::size_t>(y) * size + static_cast<std::size_t>(x);
  for (std::size_t c = 0; c < 3; ++c)
    img[c * hw + p] = static_cast<float>(img[c * hw + p] - amount * kStain[c]);
}

}  // namespace

Dataset synth_generate(std::size_t n_per_class, std::size_t size, std::uint64_t seed) {
  if (n_per_class == 0) throw ConfigError("synth_generate: n_per_class must be >= 1");
  if (size < 16)
    throw ConfigError("synth_generate: size must be >= 16, got " + std::to_string(size));

  Dataset ds;
  ds.n = 2 * n_per_class;
  ds.channels = 3;
  ds.height = ds.width = size;
  ds.class_names = {"grid", "clusters"};
  ds.images.resize(ds.n * ds.image_size());
  ds.labels.resize(ds.n);

  const std::size_t hw = size * size;
  const double cell = static_cast<double>(size) / 4.0;
  static constexpr float kBase[3] = {0.86f, 0.79f, 0.84f};
  Rng root(seed);

  for (std::size_t idx = 0; idx < ds.n; ++idx) {
    const int cls = idx < n_per_class ? 0 : 1;
    ds.labels[idx] = cls;
    Rng rng = root.derive(idx + 1);

    std::vector<float> img(3 * hw);
    for (std::size_t c = 0; c < 3; ++c)
      for (std::size_t p = 0; p < hw; ++p)
        img[c * hw + p] = kBase[c] + static_cast<float>(rng.uniform(-0.03, 0.03));

    if (cls == 0) {
      // Regular 4x4 grid of soft blobs with small jitter.
      const double sigma = cell / 4.0;
      const double reach = 3.0 * sigma;
      for (int gy = 0; gy < 4; ++gy)
        for (int gx = 0; gx < 4; ++gx) {
          const double cx = (gx + 0.5) * cell + rng.uniform(-1.5, 1.5);
          const double cy = (gy + 0.5) * cell + rng.uniform(-1.5, 1.5);
          const long x0 = std::lround(std::max(0.0, cx - reach));
          const long x1 = std::lround(std::min(static_cast<double>(size) - 1, cx + reach));
          const long y0 = std::lround(std::max(0.0, cy - reach));
          const long y1 = std::lround(std::min(static_cast<double>(size) - 1, cy + reach));
          for (long y = y0; y <= y1; ++y)
            for (long x = x0; x <= x1; ++x) {
              const double d2 = (x - cx) * (x - cx) + (y - cy) * (y - cy);
              darken(img, size, static_cast<double>(x), static_cast<double>(y),
                     0.55 * std::exp(-d2 / (2.0 * sigma * sigma)));
            }
        }
    } else {
      // A few random cluster centers, each scattering sharp 1-pixel-scale
      // dots. Total ink stays well below the grid class so raw-pixel
      // distances separate the classes (nearest-neighbor sanity gate).
      const std::size_t clusters = 2 + rng.uniform_int(2);
      for (std::size_t k = 0; k < clusters; ++k) {
        const double cx = rng.uniform(3.0, static_cast<double>(size) - 3.0);
        const double cy = rng.uniform(3.0, static_cast<double>(size) - 3.0);
        const std::size_t dots = 5 + rng.uniform_int(4);
        for (std::size_t d = 0; d < dots; ++d) {
          const double dx = cx + rng.normal(0.0, cell / 3.0);
          const double dy = cy + rng.normal(0.0, cell / 3.0);
          for (long oy = -1; oy <= 1; ++oy)
            for (long ox = -1; ox <= 1; ++ox) {
              const double px = std::floor(dx) + static_cast<double>(ox);
              const double py = std::floor(dy) + static_cast<double>(oy);
              const double r2 = (px - dx) * (px - dx) + (py - dy) * (py - dy);
              if (r2 <= 1.44) darken(img, size, px, py, 0.62);
            }
        }
      }
    }

    float* dst = ds.images.data() + idx * ds.image_size();
    for (std::size_t i = 0; i < 3 * hw; ++i) dst[i] = std::clamp(img[i], 0.0f, 1.0f);
  }
  return ds;
}

// ---------------------------------------------------------------------------
// Checkpoints (manifest + payload) live in checkpoint.cpp.
// ---------------------------------------------------------------------------

}  // namespace capskan
