#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <string_view>
#include <vector>

#include "freqexit/tensor.hpp"

namespace freqexit {

struct LabeledImage {
  TensorR pixels;  // [H, W, C], values in [0, 1]
  int label = 0;
  std::string id;
};

struct Dataset {
  std::vector<LabeledImage> items;
  std::vector<std::string> class_names;

  std::size_t size() const { return items.size(); }
  std::size_t num_classes() const { return class_names.size(); }
  std::vector<const TensorR*> pixel_ptrs() const;
  std::vector<int> labels() const;
};

/// Names of the built-in texture families, in label order.
const std::vector<std::string>& texture_families();

/// `n_per_class` images of each of the first `num_classes` texture families,
/// [size, size, 3] with every sample an exact multiple of 1/255. Throws
/// DataError when `num_classes` exceeds the number of families.
Dataset generate_synthetic(std::size_t n_per_class, std::size_t num_classes, std::size_t size,
                           std::uint64_t seed);

/// Binary netpbm: P5 (gray) decodes to [H, W, 1], P6 (RGB) to [H, W, 3],
/// normalised by maxval. `name` is used in ParseError messages.
TensorR decode_pixmap(std::string_view bytes, const std::string& name);
/// Encodes [H, W, 1] as P5 and [H, W, 3] as P6 with maxval 255.
std::string encode_pixmap(const TensorR& pixels);
TensorR read_pixmap(const std::filesystem::path& path);
void write_pixmap(const std::filesystem::path& path, const TensorR& pixels);

TensorR resize_nearest(const TensorR& pixels, std::size_t height, std::size_t width);

/// One subdirectory per class (sorted order gives the label), each holding
/// .ppm/.pgm files. Images are resized to `size` and gray images replicated to
/// three channels.
Dataset load_pixmap_dir(const std::filesystem::path& root, std::size_t size);
/// Inverse of load_pixmap_dir for RGB datasets: root/<label>_<class>/<id>.ppm.
void write_pixmap_dir(const std::filesystem::path& root, const Dataset& data);

struct SplitSpec {
  double train_fraction = 0.8;
  std::uint64_t seed = 0;
};

struct SplitIndices {
  std::vector<std::size_t> train;
  std::vector<std::size_t> test;
};

/// Per-class seeded shuffle; round(fraction * n_c) samples of each class go to
/// train (at least one on each side). Indices are returned in ascending order.
SplitIndices split_indices(const Dataset& data, const SplitSpec& spec);
Dataset subset(const Dataset& data, const std::vector<std::size_t>& indices);

struct DatasetSplit {
  Dataset train;
  Dataset test;
};
DatasetSplit split(const Dataset& data, const SplitSpec& spec);

}  // namespace freqexit
