#include "relush/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numeric>

namespace relush {

double evaluate_accuracy(Model& model, const Dataset& data, int batch_size) {
  if (data.size() == 0) throw DimensionError("cannot evaluate on an empty set");
  std::int64_t correct = 0;
  for (std::int64_t start = 0; start < data.size(); start += batch_size) {
    const std::int64_t count = std::min<std::int64_t>(batch_size, data.size() - start);
    std::vector<std::int64_t> idx(static_cast<std::size_t>(count));
    std::iota(idx.begin(), idx.end(), start);
    const std::vector<int> pred = model.predict(data.batch(idx));
    for (std::int64_t i = 0; i < count; ++i) {
      if (pred[static_cast<std::size_t>(i)] ==
          data.labels[static_cast<std::size_t>(start + i)]) {
        ++correct;
      }
    }
  }
  return static_cast<double>(correct) / static_cast<double>(data.size());
}

TrainResult train_model(Model& model, const DatasetPair& data,
                        std::uint64_t seed, std::ostream* progress) {
  const TrainingConfig& cfg = model.net().training;
  if (data.train.size() == 0) throw DimensionError("empty training set");

  SgdOptimizer opt(model.parameters(), cfg.lr, cfg.momentum);
  Rng shuffle_rng(seed ^ 0x5u);
  Rng noise_rng(seed ^ 0x6u);

  std::vector<std::int64_t> order(static_cast<std::size_t>(data.train.size()));
  std::iota(order.begin(), order.end(), 0);

  TrainResult result;
  for (int epoch = 1; epoch <= cfg.epochs; ++epoch) {
    shuffle_rng.shuffle(order);
    double loss_sum = 0.0;
    std::int64_t batches = 0;
    for (std::size_t start = 0; start < order.size();
         start += static_cast<std::size_t>(cfg.batch_size)) {
      const std::size_t count = std::min<std::size_t>(
          static_cast<std::size_t>(cfg.batch_size), order.size() - start);
      std::vector<std::int64_t> idx(order.begin() + static_cast<std::ptrdiff_t>(start),
                                    order.begin() + static_cast<std::ptrdiff_t>(start + count));
      std::vector<int> labels(count);
      for (std::size_t i = 0; i < count; ++i) {
        labels[i] = data.train.labels[static_cast<std::size_t>(idx[i])];
      }
      Tape tape;
      Tensor logits;
      Tensor loss;
      try {
        logits = model.forward(tape, data.train.batch(idx), /*training=*/true,
                               noise_rng.next_u64());
        loss = softmax_cross_entropy(tape, logits, labels);
        backward(loss, tape);
      } catch (const NumericError& e) {
        throw DivergenceError("training diverged at epoch " +
                              std::to_string(epoch) + ": " + e.what());
      }
      loss_sum += loss.item();
      ++batches;
      opt.step();
      opt.zero_grad();
    }
    EpochMetrics m;
    m.epoch = epoch;
    m.loss = loss_sum / static_cast<double>(batches);
    m.train_accuracy = evaluate_accuracy(model, data.train);
    m.test_accuracy = evaluate_accuracy(model, data.test);
    result.metrics.push_back(m);
    if (progress) {
      char buf[128];
      std::snprintf(buf, sizeof(buf),
                    "epoch %3d  loss %.4f  train %.4f  test %.4f\n", m.epoch,
                    m.loss, m.train_accuracy, m.test_accuracy);
      (*progress) << buf << std::flush;
    }
  }
  result.final_test_accuracy =
      result.metrics.empty() ? 0.0 : result.metrics.back().test_accuracy;
  return result;
}

std::string metrics_to_csv(const TrainResult& result) {
  std::string out = "epoch,loss,train_accuracy,test_accuracy\n";
  char buf[160];
  for (const EpochMetrics& m : result.metrics) {
    std::snprintf(buf, sizeof(buf), "%d,%.17g,%.17g,%.17g\n", m.epoch, m.loss,
                  m.train_accuracy, m.test_accuracy);
    out += buf;
  }
  return out;
}

}  // namespace relush
