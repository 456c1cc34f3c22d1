#pragma once

#include <algorithm>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

#include "gpd/errors.hpp"
#include "gpd/rng.hpp"
#include "gpd/tensor.hpp"

namespace gpd {

// In-memory labelled image set; images are stored flat, one C*H*W block each.
struct Dataset {
  Shape image_shape;  // [C, H, W]
  std::size_t num_classes = 0;
  std::vector<double> images;
  std::vector<int> labels;

  std::size_t size() const { return labels.size(); }
  std::size_t image_numel() const { return shape_numel(image_shape); }

  // Gathers the listed samples into an [n, C, H, W] tensor.
  Tensor batch(std::span<const std::size_t> idx) const {
    const std::size_t d = image_numel();
    std::vector<double> v(idx.size() * d);
    for (std::size_t b = 0; b < idx.size(); ++b) {
      std::copy_n(images.begin() + static_cast<std::ptrdiff_t>(idx[b] * d), d, v.begin() + static_cast<std::ptrdiff_t>(b * d));
    }
    return Tensor({idx.size(), image_shape[0], image_shape[1], image_shape[2]}, std::move(v));
  }

  std::vector<int> batch_labels(std::span<const std::size_t> idx) const {
    std::vector<int> out;
    out.reserve(idx.size());
    for (auto i : idx) out.push_back(labels[i]);
    return out;
  }

  void validate() const {
    if (image_shape.size() != 3) throw FormatError("dataset image shape must be [C, H, W]");
    if (images.size() != labels.size() * image_numel()) throw FormatError("dataset image buffer size mismatch");
    for (std::size_t i = 0; i < labels.size(); ++i) {
      if (labels[i] < 0 || static_cast<std::size_t>(labels[i]) >= num_classes) {
        throw FormatError("dataset label " + std::to_string(labels[i]) + " at sample " + std::to_string(i) +
                          " outside [0, " + std::to_string(num_classes) + ")");
      }
    }
  }
};

struct DatasetSpec {
  std::string format = "synthetic";  // synthetic | idx | csv
  std::string train_images, train_labels, eval_images, eval_labels;  // idx uses all four; csv the *_images pair
  std::size_t classes = 10;
  std::size_t train_per_class = 500;
  std::size_t eval_per_class = 100;
  Shape input_shape{1, 8, 8};
  std::size_t modes = 1;  // synthetic prototypes per class
  double noise = 1.0;
  std::uint64_t seed = 0;
  double mean = 0.0;  // loaded pixels become (x - mean) / stddev
  double stddev = 1.0;
};

struct DatasetPair {
  Dataset train;
  Dataset eval;
};

// Centroids are smoothed Gaussian fields (so neighbouring pixels correlate).
// Each class owns `modes` of them; a sample is one of its class's centroids,
// chosen uniformly, plus i.i.d. noise of the given scale.
inline std::vector<std::vector<double>> synthetic_centroids(std::size_t classes, const Shape& shape, Rng& rng) {
  const std::size_t c = shape[0], h = shape[1], w = shape[2];
  std::vector<std::vector<double>> out;
  for (std::size_t k = 0; k < classes; ++k) {
    std::vector<double> raw(c * h * w), smooth(c * h * w, 0.0);
    for (auto& v : raw) v = normal(rng);
    for (std::size_t ch = 0; ch < c; ++ch)
      for (std::size_t y = 0; y < h; ++y)
        for (std::size_t x = 0; x < w; ++x) {
          double s = 0.0;
          int n = 0;
          for (int dy = -1; dy <= 1; ++dy)
            for (int dx = -1; dx <= 1; ++dx) {
              const auto yy = static_cast<std::ptrdiff_t>(y) + dy, xx = static_cast<std::ptrdiff_t>(x) + dx;
              if (yy < 0 || xx < 0 || yy >= static_cast<std::ptrdiff_t>(h) || xx >= static_cast<std::ptrdiff_t>(w)) continue;
              s += raw[(ch * h + static_cast<std::size_t>(yy)) * w + static_cast<std::size_t>(xx)];
              ++n;
            }
          smooth[(ch * h + y) * w + x] = s / n * 2.0;
        }
    out.push_back(std::move(smooth));
  }
  return out;
}

inline Dataset synthetic_split(const std::vector<std::vector<double>>& centroids, std::size_t classes,
                               const Shape& shape, std::size_t per_class, double noise, Rng& rng) {
  Dataset d;
  d.image_shape = shape;
  d.num_classes = classes;
  const std::size_t modes = centroids.size() / classes;
  const std::size_t n = classes * per_class, dim = shape_numel(shape);
  d.images.resize(n * dim);
  d.labels.resize(n);
  // Interleave classes so consecutive samples cycle through labels.
  for (std::size_t i = 0; i < n; ++i) {
    const std::size_t k = i % classes;
    const std::size_t mode = modes > 1 ? std::uniform_int_distribution<std::size_t>(0, modes - 1)(rng) : 0;
    const auto& c = centroids[mode * classes + k];
    d.labels[i] = static_cast<int>(k);
    for (std::size_t j = 0; j < dim; ++j) d.images[i * dim + j] = c[j] + noise * normal(rng);
  }
  return d;
}

inline DatasetPair make_synthetic(const DatasetSpec& spec) {
  if (spec.classes < 2) throw ConfigError("synthetic dataset needs at least 2 classes");
  if (spec.input_shape.size() != 3 || shape_numel(spec.input_shape) == 0) {
    throw ConfigError("synthetic dataset input shape must be [C, H, W] with nonzero extents");
  }
  if (spec.train_per_class == 0 || spec.eval_per_class == 0) throw ConfigError("samples per class must be >= 1");
  if (spec.modes < 1) throw ConfigError("synthetic modes per class must be >= 1");
  if (!(spec.noise >= 0.0)) throw ConfigError("synthetic noise must be >= 0");
  Rng centre_rng = make_rng(spec.seed, 0xC0);
  const auto centroids = synthetic_centroids(spec.classes * spec.modes, spec.input_shape, centre_rng);
  Rng train_rng = make_rng(spec.seed, 0xC1);
  Rng eval_rng = make_rng(spec.seed, 0xC2);
  return {synthetic_split(centroids, spec.classes, spec.input_shape, spec.train_per_class, spec.noise, train_rng),
          synthetic_split(centroids, spec.classes, spec.input_shape, spec.eval_per_class, spec.noise, eval_rng)};
}

namespace detail {

inline std::uint32_t read_be32(const std::string& bytes, std::size_t offset, const std::string& file) {
  if (bytes.size() < offset + 4) {
    throw FormatError(file + ": truncated IDX header at offset " + std::to_string(offset));
  }
  const auto* p = reinterpret_cast<const unsigned char*>(bytes.data() + offset);
  return (std::uint32_t{p[0]} << 24) | (std::uint32_t{p[1]} << 16) | (std::uint32_t{p[2]} << 8) | std::uint32_t{p[3]};
}

inline std::string slurp(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot open dataset file " + path);
  std::ostringstream s;
  s << in.rdbuf();
  return s.str();
}

}  // namespace detail

struct IdxImages {
  std::size_t count = 0, rows = 0, cols = 0;
  std::vector<std::uint8_t> pixels;
};

// Unsigned-byte IDX files: magic 0x00000803 for [n, rows, cols] images,
// 0x00000801 for [n] labels, big-endian extents.
inline IdxImages parse_idx_images(const std::string& bytes, const std::string& name = "idx images") {
  const auto magic = detail::read_be32(bytes, 0, name);
  if (magic != 0x00000803u) {
    std::ostringstream s;
    s << name << ": bad IDX image magic 0x" << std::hex << magic << " at offset 0 (expected 0x803)";
    throw FormatError(s.str());
  }
  IdxImages out;
  out.count = detail::read_be32(bytes, 4, name);
  out.rows = detail::read_be32(bytes, 8, name);
  out.cols = detail::read_be32(bytes, 12, name);
  const std::size_t need = out.count * out.rows * out.cols;
  if (bytes.size() - 16 < need) {
    throw FormatError(name + ": truncated pixel data at offset " + std::to_string(bytes.size()) + " (expected " +
                      std::to_string(16 + need) + " bytes)");
  }
  out.pixels.assign(bytes.begin() + 16, bytes.begin() + 16 + static_cast<std::ptrdiff_t>(need));
  return out;
}

inline std::vector<int> parse_idx_labels(const std::string& bytes, const std::string& name = "idx labels") {
  const auto magic = detail::read_be32(bytes, 0, name);
  if (magic != 0x00000801u) {
    std::ostringstream s;
    s << name << ": bad IDX label magic 0x" << std::hex << magic << " at offset 0 (expected 0x801)";
    throw FormatError(s.str());
  }
  const std::size_t n = detail::read_be32(bytes, 4, name);
  if (bytes.size() - 8 < n) {
    throw FormatError(name + ": truncated label data at offset " + std::to_string(bytes.size()) + " (expected " +
                      std::to_string(8 + n) + " bytes)");
  }
  std::vector<int> out(n);
  for (std::size_t i = 0; i < n; ++i) out[i] = static_cast<unsigned char>(bytes[8 + i]);
  return out;
}

inline Dataset load_idx(const std::string& images_path, const std::string& labels_path, const DatasetSpec& spec) {
  const auto img = parse_idx_images(detail::slurp(images_path), images_path);
  const auto lab = parse_idx_labels(detail::slurp(labels_path), labels_path);
  if (img.count != lab.size()) {
    throw FormatError(images_path + " holds " + std::to_string(img.count) + " images but " + labels_path + " holds " +
                      std::to_string(lab.size()) + " labels");
  }
  Dataset d;
  d.image_shape = {1, img.rows, img.cols};
  if (spec.input_shape.size() == 3 && spec.input_shape != d.image_shape) {
    throw FormatError(images_path + ": images are " + shape_str(d.image_shape) + ", config declares " +
                      shape_str(spec.input_shape));
  }
  d.num_classes = spec.classes;
  d.labels = lab;
  d.images.resize(img.pixels.size());
  for (std::size_t i = 0; i < img.pixels.size(); ++i) {
    d.images[i] = (img.pixels[i] / 255.0 - spec.mean) / spec.stddev;
  }
  d.validate();
  return d;
}

// One sample per line: label, then C*H*W pixel values. Blank lines and lines
// starting with '#' are skipped.
inline Dataset parse_csv_dataset(std::istream& in, const DatasetSpec& spec, const std::string& name = "csv") {
  Dataset d;
  d.image_shape = spec.input_shape;
  d.num_classes = spec.classes;
  const std::size_t dim = shape_numel(spec.input_shape);
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty() || line[0] == '#') continue;
    std::istringstream s(line);
    std::string cell;
    std::vector<double> row;
    while (std::getline(s, cell, ',')) {
      try {
        std::size_t used = 0;
        row.push_back(std::stod(cell, &used));
      } catch (const std::exception&) {
        throw FormatError(name + ":" + std::to_string(lineno) + ": bad number '" + cell + "'");
      }
    }
    if (row.size() != dim + 1) {
      throw FormatError(name + ":" + std::to_string(lineno) + ": expected 1 label + " + std::to_string(dim) +
                        " pixels, got " + std::to_string(row.size()) + " columns");
    }
    const double y = row[0];
    if (y != std::floor(y) || y < 0 || y >= static_cast<double>(spec.classes)) {
      throw FormatError(name + ":" + std::to_string(lineno) + ": label " + std::to_string(y) + " outside [0, " +
                        std::to_string(spec.classes) + ")");
    }
    d.labels.push_back(static_cast<int>(y));
    for (std::size_t j = 1; j < row.size(); ++j) d.images.push_back((row[j] - spec.mean) / spec.stddev);
  }
  d.validate();
  return d;
}

inline Dataset load_csv(const std::string& path, const DatasetSpec& spec) {
  std::ifstream in(path);
  if (!in) throw FormatError("cannot open dataset file " + path);
  return parse_csv_dataset(in, spec, path);
}

inline DatasetPair load_dataset(const DatasetSpec& spec) {
  DatasetPair out;
  if (spec.format == "synthetic") {
    out = make_synthetic(spec);
  } else if (spec.format == "idx") {
    out.train = load_idx(spec.train_images, spec.train_labels, spec);
    out.eval = load_idx(spec.eval_images, spec.eval_labels, spec);
  } else if (spec.format == "csv") {
    out.train = load_csv(spec.train_images, spec);
    out.eval = load_csv(spec.eval_images, spec);
  } else {
    throw ConfigError("unknown dataset format '" + spec.format + "' (expected synthetic, idx, or csv)");
  }
  if (out.train.size() == 0 || out.eval.size() == 0) throw FormatError("dataset split is empty");
  return out;
}

}  // namespace gpd
