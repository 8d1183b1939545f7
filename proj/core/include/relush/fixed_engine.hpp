#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <vector>

#include "relush/fixedpoint.hpp"
#include "relush/model.hpp"

namespace relush {

/// Plaintext fixed-point inference engine: the network evaluated with
/// two's-complement ring arithmetic, exact dealer-style truncation (floor
/// shift) after every product, and sign-bit gates. Serves as the reference
/// the secure simulator must match bit-for-bit.
class FixedEngine {
 public:
  FixedEngine(const Model& model, FixedPointFormat fmt);

  /// Logits as ring elements at the base scale. The optional seed enables
  /// inference-time gate-flip noise on layers configured for it.
  std::vector<std::uint64_t> forward(
      std::span<const double> input,
      std::optional<std::uint64_t> noise_seed = std::nullopt) const;

  std::vector<double> forward_real(
      std::span<const double> input,
      std::optional<std::uint64_t> noise_seed = std::nullopt) const;

  const FixedPointFormat& format() const { return fmt_; }

 private:
  struct LayerParams {
    std::vector<std::uint64_t> weight;      // base scale
    std::vector<std::uint64_t> bias;        // double scale (added pre-shift)
    std::vector<std::vector<std::uint64_t>> gate_weights;  // per channel, base scale
  };

  const Model* model_;
  FixedPointFormat fmt_;
  std::vector<LayerParams> params_;
};

/// Deterministic gate-flip mask shared between the fixed engine and the
/// simulator: flips are public coins, so both sides must draw identically.
void inference_flip_mask(std::uint64_t seed, int layer_index, int channel,
                         int positions, double p_keep,
                         std::vector<std::uint8_t>& mask);

}  // namespace relush
