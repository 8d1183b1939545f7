#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "relush/tensor.hpp"

namespace relush {

/// How a group's gate pre-activation is formed from the channel plane.
enum class GateMode {
  one_hot_self,    // every group is {p} with weight 1 at p: standard ReLU
  one_hot_source,  // one designated source position decides the whole group
  learned,         // arbitrary (trainable) weights over the group members
};

std::string gate_mode_name(GateMode m);
GateMode gate_mode_from_name(const std::string& name);

/// One gate group: member positions (row-major indices into the H*W plane)
/// and the weight each member contributes to the gate pre-activation
/// g = sum_j weights[j] * s[members[j]]. The gate passes iff g >= 0.
struct GateGroup {
  std::vector<int> members;
  std::vector<double> weights;
  int source = -1;  // position index for one_hot_source, else -1
};

/// Partition of one channel plane into gate groups, with one weight vector
/// per group. Groups must be disjoint and cover the plane exactly.
struct GroupingSpec {
  int height = 0;
  int width = 0;
  GateMode mode = GateMode::one_hot_self;
  std::vector<GateGroup> groups;

  int n_positions() const { return height * width; }
  int n_groups() const { return static_cast<int>(groups.size()); }

  /// Throws DimensionError unless groups partition the plane, weight array
  /// lengths match member lists, and mode-specific structure holds.
  void validate() const;

  /// H*W singleton groups, weight 1 on self: equivalent to standard ReLU.
  static GroupingSpec identity(int height, int width);
  /// Single whole-plane group gated by the middle position
  /// (floor(H/2), floor(W/2)).
  static GroupingSpec whole_channel_middle(int height, int width);
  /// Single whole-plane group with uniform learned weights 1/(H*W).
  static GroupingSpec whole_channel_learned(int height, int width);
};

/// Per-layer gate structure: one GroupingSpec per channel. The partition may
/// be identical across channels (uniform patches) but weights are always
/// per-channel.
struct LayerGateSpec {
  int channels = 0;
  bool shared_partition = false;
  std::vector<GroupingSpec> per_channel;

  void validate() const;
  /// Replicates one spec across `channels` channels.
  static LayerGateSpec replicate(const GroupingSpec& spec, int channels,
                                 bool shared_partition = true);
};

/// Gate bits for one evaluation: one bit per (sample, channel, group), plus
/// the per-activation effective bits when noise flips were applied.
struct GateDecision {
  int samples = 0;
  int channels = 0;
  int groups_per_channel = 0;  // 0 when ragged across channels
  std::vector<std::uint8_t> group_bits;        // sample-major, then channel
  std::vector<std::uint8_t> activation_bits;   // empty unless noise was used
};

/// Bernoulli gate-flip noise: with probability keep the group gate applies,
/// otherwise the negated gate (pre-activation -g) applies. Masks are drawn
/// deterministically from the seed, per activation.
struct GateNoise {
  double p_keep = 1.0;
  std::uint64_t seed = 0;
};

// ---- Pure (inference) gate ops --------------------------------------------

/// Shared-gate ReLU: per channel and group i, activations in group i pass
/// unchanged iff the group's gate pre-activation is >= 0, else they are
/// zeroed. Accepts [C,H,W] or [N,C,H,W]; the same spec is applied to every
/// channel.
Tensor grelu(const Tensor& s, const GroupingSpec& spec,
             GateDecision* decision = nullptr);
/// Per-channel variant.
Tensor grelu(const Tensor& s, const LayerGateSpec& layer,
             GateDecision* decision = nullptr);

/// Noisy shared-gate ReLU: each activation applies its group gate with
/// probability p_keep and the negated gate otherwise. Deterministic given
/// the seed; p_keep must lie in (0, 1].
Tensor ngrelu(const Tensor& s, const GroupingSpec& spec, double p_keep,
              std::uint64_t rng_seed, GateDecision* decision = nullptr);
Tensor ngrelu(const Tensor& s, const LayerGateSpec& layer, double p_keep,
              std::uint64_t rng_seed, GateDecision* decision = nullptr);

/// Secure-evaluation operation counts for one layer built from this spec:
/// one sign test (DReLU) per group per channel and one multiplication per
/// activation per channel.
struct GateOpCount {
  std::int64_t n_drelu = 0;
  std::int64_t n_mul = 0;
};
GateOpCount count_gate_ops(const GroupingSpec& spec, int channels);
GateOpCount count_gate_ops(const LayerGateSpec& layer);

// ---- Training-time gate op -------------------------------------------------

/// Runtime index structure binding a LayerGateSpec to flat per-channel weight
/// tensors (one tensor per channel, group weights concatenated in member
/// order).
struct GateLayerPlan {
  int channels = 0;
  int height = 0;
  int width = 0;
  // per channel: members of all groups concatenated + group offsets
  std::vector<std::vector<int>> members;        // [c] -> flat member list
  std::vector<std::vector<int>> group_offsets;  // [c] -> offsets into members
  std::vector<int> source_flags;                // nonzero if one_hot mode (weights frozen)
};

GateLayerPlan make_gate_plan(const LayerGateSpec& spec);
/// One flat weight tensor per channel, values copied from the spec.
/// `trainable` marks them requires_grad (only meaningful for learned mode).
std::vector<Tensor> make_gate_weights(const LayerGateSpec& spec,
                                      bool trainable);
/// Copies (possibly trained) weight tensors back into the spec.
void store_gate_weights(LayerGateSpec& spec,
                        const std::vector<Tensor>& weights);

struct SoftGateOptions {
  double temperature = 1.0;
  /// Hard forward (straight-through estimator). Tests may disable this to
  /// check gradients of the fully soft function against finite differences.
  bool hard_forward = true;
  std::optional<GateNoise> noise;
};

/// Differentiable shared-gate activation. Forward output uses the hard gate
/// (identical to grelu / ngrelu); the gate bit's derivative w.r.t. its
/// pre-activation is that of sigmoid(g / temperature), so gradients flow to
/// both the activations and the gate weights.
Tensor soft_gate_forward(Tape& tape, const Tensor& s, const GateLayerPlan& plan,
                         const std::vector<Tensor>& weights,
                         const SoftGateOptions& options,
                         GateDecision* decision = nullptr);

// ---- Serialization ---------------------------------------------------------

/// JSON layout: {"height","width","mode","groups":[{"members":[...],
/// "weights":[...], "source"?}]}.
std::string grouping_spec_to_json(const GroupingSpec& spec);
GroupingSpec grouping_spec_from_json(const std::string& text);
std::string layer_gate_spec_to_json(const LayerGateSpec& spec);
LayerGateSpec layer_gate_spec_from_json(const std::string& text);
void save_layer_gate_spec(const LayerGateSpec& spec, const std::string& path);
LayerGateSpec load_layer_gate_spec(const std::string& path);

}  // namespace relush
