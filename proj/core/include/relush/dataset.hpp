#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "relush/config.hpp"
#include "relush/tensor.hpp"

namespace relush {

/// Labeled image set, pixels normalized to [0,1], stored flat in C,H,W order
/// per example.
struct Dataset {
  int channels = 0, height = 0, width = 0;
  int classes = 0;
  std::vector<float> pixels;
  std::vector<int> labels;

  std::int64_t size() const { return static_cast<std::int64_t>(labels.size()); }
  std::int64_t example_len() const {
    return static_cast<std::int64_t>(channels) * height * width;
  }
  std::span<const float> image(std::int64_t i) const {
    return std::span<const float>(pixels.data() + i * example_len(),
                                  static_cast<std::size_t>(example_len()));
  }
  /// [count, C, H, W] tensor of the examples at the given indices.
  Tensor batch(std::span<const std::int64_t> indices) const;
  Tensor one(std::int64_t index) const;
  void truncate(std::int64_t n);
};

struct DatasetPair {
  Dataset train;
  Dataset test;
};

/// Loads per DatasetConfig.kind; relative paths resolve against base_dir.
/// The expected geometry comes from the network config and is verified
/// against the files. `limit` > 0 keeps only the first examples of each
/// split.
DatasetPair load_dataset(const DatasetConfig& cfg, const std::string& base_dir,
                         int channels, int height, int width, int classes,
                         std::int64_t limit = 0);

Dataset make_synthetic_split(const SyntheticSpec& spec, bool test_split);

/// IDX files: u32 big-endian magic 0x00000803 (images, 3 extra dims) or
/// 0x00000801 (labels, 1 extra dim).
Dataset load_idx(const std::string& images_path, const std::string& labels_path,
                 int classes);

/// CIFAR-10 binary batches: records of 1 label byte + 3072 pixel bytes.
Dataset load_cifar10(const std::vector<std::string>& files);

/// CSV rows "label,p0,p1,...". Pixel values are taken as-is.
Dataset load_csv(const std::string& path, int channels, int height, int width,
                 int classes);
std::string dataset_to_csv(const Dataset& data);

}  // namespace relush
