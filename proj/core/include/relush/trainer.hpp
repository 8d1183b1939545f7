#pragma once

#include <cstdint>
#include <ostream>
#include <string>
#include <vector>

#include "relush/dataset.hpp"
#include "relush/model.hpp"

namespace relush {

struct EpochMetrics {
  int epoch = 0;
  double loss = 0.0;
  double train_accuracy = 0.0;
  double test_accuracy = 0.0;
};

struct TrainResult {
  std::vector<EpochMetrics> metrics;
  double final_test_accuracy = 0.0;
};

/// Momentum-SGD training loop, deterministic under the seed (init, shuffle,
/// and gate-noise masks all derive from it). Non-finite loss raises
/// DivergenceError.
TrainResult train_model(Model& model, const DatasetPair& data,
                        std::uint64_t seed, std::ostream* progress = nullptr);

double evaluate_accuracy(Model& model, const Dataset& data,
                         int batch_size = 256);

std::string metrics_to_csv(const TrainResult& result);

}  // namespace relush
