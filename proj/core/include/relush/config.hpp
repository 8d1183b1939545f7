#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "relush/common.hpp"

namespace relush {

/// Synthetic 10-class blob imagery for desk-scale runs: each class has a
/// fixed smooth mean pattern, samples add Gaussian pixel noise.
struct SyntheticSpec {
  int classes = 10;
  int channels = 1;
  int height = 12;
  int width = 12;
  int train_size = 2000;
  int test_size = 400;
  double noise_sigma = 0.12;
  std::uint64_t seed = 1234;
};

struct DatasetConfig {
  std::string kind;  // synthetic | csv | idx | cifar10
  SyntheticSpec synthetic;
  // csv: one file per split, rows "label,p0,p1,..."
  std::string train_csv, test_csv;
  // idx: big-endian image/label pairs
  std::string train_images, train_labels, test_images, test_labels;
  // cifar10: binary batch files (1 label byte + 3072 pixel bytes per record)
  std::vector<std::string> train_files;
  std::vector<std::string> test_files;
};

struct TrainingConfig {
  double lr = 0.01;
  double momentum = 0.9;
  int batch_size = 64;
  int epochs = 30;
};

struct ProtocolConfig {
  int ring_bits = 64;
  int logp = 8;
  int scale_bits = 13;
};

/// Configuration of a gated activation layer.
struct ReluVariantCfg {
  std::string variant = "original";  // original|uniform|middle|clustered|learned
  int patch = 0;                     // uniform: tile side
  std::string grouping_file;         // clustered: LayerGateSpec JSON path
  double noise = 0.0;                // gate flip probability (p_keep = 1 - noise)
  bool noise_at_inference = false;
  /// Shared gate weights are priced and simulated as Beaver dot products;
  /// public ones are applied locally on shares at no cost.
  bool shared_gate = false;

  bool operator==(const ReluVariantCfg&) const = default;
};

struct LayerCfg {
  std::string kind;  // conv | linear | avgpool | relu
  // conv
  int out_channels = 0, kernel = 0, stride = 1, padding = 0;
  // linear
  int out_features = 0;
  // avgpool reuses kernel/stride
  ReluVariantCfg relu;
};

struct VariantOverride {
  int layer = -1;  // index into layers; must be a relu layer
  ReluVariantCfg relu;
};

struct NetworkConfig {
  std::string name;
  std::uint64_t seed = 1;
  int in_channels = 0, in_height = 0, in_width = 0;
  DatasetConfig dataset;
  TrainingConfig training;
  ProtocolConfig protocol;
  std::vector<LayerCfg> layers;
  std::map<std::string, std::vector<VariantOverride>> variants;
  std::string base_dir;  // directory of the config file; resolves relative paths

  std::vector<std::string> variant_names() const;
};

/// Parses and validates; unknown keys are rejected at every level.
NetworkConfig parse_network_config(const std::string& json_text);
NetworkConfig load_network_config(const std::string& path);
std::string network_config_to_json(const NetworkConfig& cfg);

/// Shape flowing between layers: spatial feature map or flattened vector.
struct TensorShape {
  bool spatial = false;
  int c = 0, h = 0, w = 0;
  int flat = 0;

  std::int64_t count() const {
    return spatial ? static_cast<std::int64_t>(c) * h * w : flat;
  }
  std::string str() const;
};

struct ResolvedLayer {
  LayerCfg cfg;
  TensorShape in;
  TensorShape out;
};

/// A config with one variant's relu overrides applied and the shape chain
/// verified.
struct ResolvedNetwork {
  std::string name;
  std::string variant;
  std::uint64_t seed = 1;
  TensorShape input;
  DatasetConfig dataset;
  TrainingConfig training;
  ProtocolConfig protocol;
  std::vector<ResolvedLayer> layers;
  int num_classes = 0;
  std::string base_dir;
};

/// Applies the named variant (unknown name is an error; "original" is always
/// available) and validates layer dimension chaining.
ResolvedNetwork resolve_network(const NetworkConfig& cfg,
                                const std::string& variant);

}  // namespace relush
