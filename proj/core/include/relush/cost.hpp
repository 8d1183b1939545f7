#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "relush/common.hpp"

namespace relush {

/// Protocol parameters of the 3-party cost model: ring width l (bits) and the
/// field-size term logp entering the sign-test formula.
struct ProtocolParams {
  int ring_bits = 64;
  int logp = 8;

  void validate() const {
    if (ring_bits < 8) throw Error("ring width must be >= 8 bits");
    if (logp < 1) throw Error("logp must be >= 1");
  }
};

struct OpCost {
  int rounds = 0;
  std::int64_t comm_bits = 0;
};

/// Matrix product (m x n) * (n x v): 2 rounds, (2mn + 2nv + mv) * l bits.
OpCost cost_linear(std::int64_t m, std::int64_t n, std::int64_t v,
                   const ProtocolParams& params);

/// Convolution with m x m input, i input channels, f x f filter, o output
/// channels: 2 rounds, (2 m^2 f^2 i + 2 f^2 o i + m^2 o) * l bits.
OpCost cost_conv(std::int64_t m, std::int64_t i, std::int64_t f,
                 std::int64_t o, const ProtocolParams& params);

/// Single sign test: 8 rounds, (8 logp + 19) * l bits.
OpCost cost_drelu(const ProtocolParams& params);

/// Single secure multiplication: 2 rounds, 5l bits.
OpCost cost_mul(const ProtocolParams& params);

/// Gated activation layer: one DReLU per group plus one Mul per activation,
/// 10 rounds total. n_groups == n_activations is the standard ReLU layer.
OpCost cost_relu_layer(std::int64_t n_activations, std::int64_t n_groups,
                       const ProtocolParams& params);

enum class CostLayerKind { conv, linear, avgpool, relu, grelu };

std::string cost_layer_kind_name(CostLayerKind k);

/// Symbolic layer entry consumed by the cost model. Only the fields relevant
/// to the kind are meaningful.
struct LayerDescriptor {
  CostLayerKind kind = CostLayerKind::relu;
  std::string label;
  // conv: input spatial side m, in channels i, filter f, out channels o
  std::int64_t m = 0, i = 0, f = 0, o = 0;
  // linear: (m x n) * (n x v)
  std::int64_t n = 0, v = 0;
  // relu / grelu
  std::int64_t n_activations = 0;
  std::int64_t n_groups = 0;
  /// Gate weights held as shares: the per-group dot products are then
  /// priced as Beaver products, adding sum_i cost_linear(1, |group_i|, 1)
  /// = (4 * n_activations + n_groups) * l bits and 2 rounds to the layer.
  bool shared_gate = false;

  static LayerDescriptor conv2d(std::string label, std::int64_t m,
                                std::int64_t i, std::int64_t f, std::int64_t o);
  static LayerDescriptor linear(std::string label, std::int64_t m,
                                std::int64_t n, std::int64_t v);
  static LayerDescriptor avgpool(std::string label);
  static LayerDescriptor relu_layer(std::string label,
                                    std::int64_t n_activations,
                                    std::int64_t n_groups,
                                    bool shared_gate = false);
};

struct NetworkDescriptor {
  std::string name;
  std::vector<LayerDescriptor> layers;
};

/// Per-layer and total rounds + communication, with per-tag byte totals used
/// to reconcile against simulator message logs. Tags: conv, linear, drelu,
/// mul. MB values use 10^6 bytes.
struct CostReport {
  struct Line {
    std::string label;
    CostLayerKind kind;
    int rounds = 0;
    std::int64_t comm_bits = 0;
  };
  std::string name;
  int ring_bits = 64;
  std::vector<Line> lines;
  int total_rounds = 0;
  std::int64_t total_comm_bits = 0;
  std::map<std::string, std::int64_t> comm_bits_by_tag;

  double total_mb() const {
    return static_cast<double>(total_comm_bits) / 8.0 / 1e6;
  }
  static double mb(std::int64_t bits) {
    return static_cast<double>(bits) / 8.0 / 1e6;
  }

  std::string to_table() const;
  std::string to_json() const;
};

CostReport cost_network(const NetworkDescriptor& net,
                        const ProtocolParams& params);

/// Percentage reduction of b relative to a: (1 - b/a) * 100 per metric.
struct SavingsReport {
  double rounds_pct = 0.0;
  double comm_pct = 0.0;
};
SavingsReport savings(const CostReport& a, const CostReport& b);

}  // namespace relush
