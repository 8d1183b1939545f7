#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "relush/checkpoint.hpp"
#include "relush/config.hpp"
#include "relush/cost.hpp"
#include "relush/dataset.hpp"
#include "relush/gates.hpp"
#include "relush/grouping.hpp"
#include "relush/tensor.hpp"

namespace relush {

/// A resolved network bound to parameters: conv/linear weights plus gate
/// structures for the non-standard activation layers.
class Model {
 public:
  struct Layer {
    ResolvedLayer def;
    // conv / linear
    Tensor weight;
    Tensor bias;
    // gated relu (variant != original on a spatial map)
    LayerGateSpec gate_spec;
    GateLayerPlan gate_plan;
    std::vector<Tensor> gate_weights;

    bool has_gate() const { return gate_spec.channels > 0; }
  };

  /// Fresh Kaiming-uniform parameters from the seed. Clustered variants load
  /// their grouping files (relative to the network's base_dir).
  Model(ResolvedNetwork net, std::uint64_t init_seed);

  const ResolvedNetwork& net() const { return net_; }
  const std::vector<Layer>& layers() const { return layers_; }
  std::vector<Layer>& layers() { return layers_; }

  /// Trainable tensors: conv/linear weights and biases plus learned gate
  /// weights.
  std::vector<Tensor> parameters();

  /// Forward pass over a [N,C,H,W] batch. During training, gated layers use
  /// the straight-through soft gate and apply configured gate noise with a
  /// mask drawn from step_seed. Optional taps collect the input of every
  /// activation layer (pre) and its output (post), indexed by layer.
  Tensor forward(Tape& tape, const Tensor& x, bool training,
                 std::uint64_t step_seed,
                 std::vector<std::optional<Tensor>>* pre_activations = nullptr,
                 std::vector<std::optional<Tensor>>* post_activations = nullptr);

  /// Inference without a caller-managed tape.
  Tensor infer(const Tensor& x);
  /// Argmax class predictions for a batch.
  std::vector<int> predict(const Tensor& x);

  Checkpoint to_checkpoint() const;
  /// Strict restore: every parameter and gate spec must match this model's
  /// architecture.
  void load_checkpoint(const Checkpoint& ckpt);
  /// Warm start: copies conv/linear parameters by name where shapes match;
  /// gate structures keep their fresh initialization.
  void warm_start(const Checkpoint& ckpt);

  /// Cost-model view of this network, with gate group counts taken from the
  /// actual specs.
  NetworkDescriptor descriptor() const;

 private:
  ResolvedNetwork net_;
  std::vector<Layer> layers_;
};

/// Binary ReLU responses at the given activation layer over (at most
/// max_samples of) the dataset, one matrix per channel. The layer must be a
/// spatial activation layer.
std::vector<ActivationProfileMatrix> record_activation_profiles(
    Model& model, const Dataset& data, int layer_index,
    std::int64_t max_samples = 10000);

/// Mean total variation of each activation layer's post-activation maps:
/// sum of |vertical| + |horizontal| first differences, averaged over
/// examples and channels.
struct TvRow {
  int layer_index = -1;
  std::string label;
  double tv = 0.0;
};
std::vector<TvRow> total_variation(Model& model, const Dataset& data,
                                   std::int64_t limit = 0);
std::string tv_to_csv(const std::vector<TvRow>& rows);

}  // namespace relush
