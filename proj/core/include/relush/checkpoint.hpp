#pragma once

#include <cstdint>
#include <string>
#include <vector>

namespace relush {

/// Versioned binary parameter container. Layout (all little-endian):
///   "RLSH" | u32 version | u64 meta_len | meta JSON |
///   u32 n_tensors | { u16 name_len | name | u8 ndim | u32 dims[] | f64 data }
///   u32 n_gate_specs | { u32 layer_index | u64 json_len | LayerGateSpec JSON }
/// Round-trips bit-exactly.
struct Checkpoint {
  static constexpr std::uint32_t kVersion = 1;

  struct NamedTensor {
    std::string name;
    std::vector<int> shape;
    std::vector<double> values;
  };
  struct GateEntry {
    int layer_index = -1;
    std::string spec_json;
  };

  std::string meta_json;  // config name, variant; never timestamps
  std::vector<NamedTensor> tensors;
  std::vector<GateEntry> gates;

  std::string to_bytes() const;
  static Checkpoint from_bytes(const std::string& bytes);

  void save(const std::string& path) const;  // atomic (temp + rename)
  static Checkpoint load(const std::string& path);

  const NamedTensor* find(const std::string& name) const;
};

}  // namespace relush
