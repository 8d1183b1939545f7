#include "relush/gates.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>

#include "json.hpp"

namespace relush {

namespace {

using nlohmann::json;

double stable_sigmoid(double z) {
  if (z >= 0.0) {
    return 1.0 / (1.0 + std::exp(-z));
  }
  const double e = std::exp(z);
  return e / (1.0 + e);
}

/// Shapes accepted by the gate ops: [C,H,W] or [N,C,H,W].
struct PlaneShape {
  int samples, channels, height, width;
};

PlaneShape plane_shape(const Tensor& s) {
  if (s.ndim() == 3) return {1, s.dim(0), s.dim(1), s.dim(2)};
  if (s.ndim() == 4) return {s.dim(0), s.dim(1), s.dim(2), s.dim(3)};
  throw DimensionError("gate input must be [C,H,W] or [N,C,H,W], got " +
                       shape_str(s.shape()));
}

void check_spec_shape(const GroupingSpec& spec, const PlaneShape& ps) {
  if (spec.height != ps.height || spec.width != ps.width) {
    throw DimensionError("grouping spec is " + std::to_string(spec.height) +
                         "x" + std::to_string(spec.width) +
                         " but channel plane is " + std::to_string(ps.height) +
                         "x" + std::to_string(ps.width));
  }
}

/// Noise flip mask for one (sample, channel) plane; draws H*W Bernoulli
/// samples in position order so masks are reproducible by (seed, n, c).
void fill_flip_mask(const GateNoise& noise, int sample, int channel,
                    int positions, std::vector<std::uint8_t>& mask) {
  mask.assign(static_cast<std::size_t>(positions), 0);
  Rng rng(noise.seed ^ (0x51ed2701ULL + 0x9e3779b97f4a7c15ULL *
                                            (static_cast<std::uint64_t>(sample) * 0x10001ULL +
                                             static_cast<std::uint64_t>(channel))));
  for (int p = 0; p < positions; ++p) {
    mask[static_cast<std::size_t>(p)] = rng.u01() >= noise.p_keep ? 1 : 0;
  }
}

/// Core hard-gate evaluation for one channel plane. Writes outputs and
/// returns per-group bits; flip==nullptr means no noise.
void gate_plane(const double* s, double* y, const GroupingSpec& spec,
                const std::uint8_t* flip, std::uint8_t* group_bits,
                std::uint8_t* act_bits) {
  for (std::size_t gi = 0; gi < spec.groups.size(); ++gi) {
    const GateGroup& g = spec.groups[gi];
    double pre = 0.0;
    for (std::size_t j = 0; j < g.members.size(); ++j) {
      pre += g.weights[j] * s[g.members[j]];
    }
    const std::uint8_t bit = pre >= 0.0 ? 1 : 0;
    const std::uint8_t neg_bit = -pre >= 0.0 ? 1 : 0;
    group_bits[gi] = bit;
    for (int m : g.members) {
      const std::uint8_t eff = (flip && flip[m]) ? neg_bit : bit;
      y[m] = eff ? s[m] : 0.0;
      if (act_bits) act_bits[m] = eff;
    }
  }
}

Tensor gate_apply(const Tensor& s, const LayerGateSpec& layer,
                  const GateNoise* noise, GateDecision* decision) {
  layer.validate();
  const PlaneShape ps = plane_shape(s);
  if (ps.channels != layer.channels) {
    throw DimensionError("gate spec has " + std::to_string(layer.channels) +
                         " channels but input has " +
                         std::to_string(ps.channels));
  }
  for (const GroupingSpec& spec : layer.per_channel) check_spec_shape(spec, ps);

  const int positions = ps.height * ps.width;
  Tensor y = Tensor::zeros(s.shape());

  bool uniform_groups = true;
  const int g0 = layer.per_channel.front().n_groups();
  std::size_t total_groups = 0;
  for (const GroupingSpec& spec : layer.per_channel) {
    uniform_groups = uniform_groups && spec.n_groups() == g0;
    total_groups += static_cast<std::size_t>(spec.n_groups());
  }
  if (decision) {
    decision->samples = ps.samples;
    decision->channels = ps.channels;
    decision->groups_per_channel = uniform_groups ? g0 : 0;
    decision->group_bits.assign(static_cast<std::size_t>(ps.samples) * total_groups, 0);
    decision->activation_bits.clear();
    if (noise) {
      decision->activation_bits.assign(
          static_cast<std::size_t>(ps.samples) * ps.channels * positions, 0);
    }
  }

  auto sv = s.data();
  auto yv = y.data();
  std::vector<std::uint8_t> flip;
  std::vector<std::uint8_t> bits_scratch;
  std::size_t bit_cursor = 0;
  for (int n = 0; n < ps.samples; ++n) {
    for (int c = 0; c < ps.channels; ++c) {
      const GroupingSpec& spec = layer.per_channel[static_cast<std::size_t>(c)];
      const std::size_t off =
          (static_cast<std::size_t>(n) * ps.channels + c) * positions;
      const std::uint8_t* flip_ptr = nullptr;
      if (noise) {
        fill_flip_mask(*noise, n, c, positions, flip);
        flip_ptr = flip.data();
      }
      std::uint8_t* gb;
      if (decision) {
        gb = decision->group_bits.data() + bit_cursor;
      } else {
        bits_scratch.assign(static_cast<std::size_t>(spec.n_groups()), 0);
        gb = bits_scratch.data();
      }
      std::uint8_t* ab = decision && noise
                             ? decision->activation_bits.data() + off
                             : nullptr;
      gate_plane(sv.data() + off, yv.data() + off, spec, flip_ptr, gb, ab);
      bit_cursor += static_cast<std::size_t>(spec.n_groups());
    }
    bit_cursor = decision ? (static_cast<std::size_t>(n) + 1) * total_groups : 0;
  }
  return y;
}

}  // namespace

std::string gate_mode_name(GateMode m) {
  switch (m) {
    case GateMode::one_hot_self: return "one_hot_self";
    case GateMode::one_hot_source: return "one_hot_source";
    case GateMode::learned: return "learned";
  }
  throw Error("unknown gate mode");
}

GateMode gate_mode_from_name(const std::string& name) {
  if (name == "one_hot_self") return GateMode::one_hot_self;
  if (name == "one_hot_source") return GateMode::one_hot_source;
  if (name == "learned") return GateMode::learned;
  throw FormatError("unknown gate mode '" + name + "'");
}

void GroupingSpec::validate() const {
  if (height <= 0 || width <= 0) {
    throw DimensionError("grouping spec has empty channel shape");
  }
  const int positions = n_positions();
  std::vector<std::uint8_t> seen(static_cast<std::size_t>(positions), 0);
  int covered = 0;
  for (const GateGroup& g : groups) {
    if (g.members.empty()) throw DimensionError("empty gate group");
    if (g.members.size() != g.weights.size()) {
      throw DimensionError("gate group weights do not align with members");
    }
    for (int m : g.members) {
      if (m < 0 || m >= positions) {
        throw DimensionError("gate group member out of range");
      }
      if (seen[static_cast<std::size_t>(m)]) {
        throw DimensionError("gate groups overlap at position " +
                             std::to_string(m));
      }
      seen[static_cast<std::size_t>(m)] = 1;
      ++covered;
    }
    if (mode == GateMode::one_hot_self) {
      if (g.members.size() != 1 || g.weights[0] != 1.0) {
        throw DimensionError("one_hot_self groups must be singletons {p} with weight 1");
      }
    }
    if (mode == GateMode::one_hot_source) {
      if (g.source < 0 ||
          std::find(g.members.begin(), g.members.end(), g.source) ==
              g.members.end()) {
        throw DimensionError("one_hot_source group missing source member");
      }
    }
  }
  if (covered != positions) {
    throw DimensionError("gate groups do not cover the channel plane (" +
                         std::to_string(covered) + " of " +
                         std::to_string(positions) + ")");
  }
}

GroupingSpec GroupingSpec::identity(int height, int width) {
  GroupingSpec spec;
  spec.height = height;
  spec.width = width;
  spec.mode = GateMode::one_hot_self;
  spec.groups.reserve(static_cast<std::size_t>(height) * width);
  for (int p = 0; p < height * width; ++p) {
    spec.groups.push_back(GateGroup{{p}, {1.0}, p});
  }
  return spec;
}

GroupingSpec GroupingSpec::whole_channel_middle(int height, int width) {
  GroupingSpec spec;
  spec.height = height;
  spec.width = width;
  spec.mode = GateMode::one_hot_source;
  GateGroup g;
  const int mid = (height / 2) * width + width / 2;
  g.source = mid;
  g.members.resize(static_cast<std::size_t>(height) * width);
  g.weights.assign(g.members.size(), 0.0);
  for (int p = 0; p < height * width; ++p) {
    g.members[static_cast<std::size_t>(p)] = p;
    if (p == mid) g.weights[static_cast<std::size_t>(p)] = 1.0;
  }
  spec.groups.push_back(std::move(g));
  return spec;
}

GroupingSpec GroupingSpec::whole_channel_learned(int height, int width) {
  GroupingSpec spec;
  spec.height = height;
  spec.width = width;
  spec.mode = GateMode::learned;
  GateGroup g;
  const int positions = height * width;
  g.members.resize(static_cast<std::size_t>(positions));
  g.weights.assign(g.members.size(), 1.0 / positions);
  for (int p = 0; p < positions; ++p) g.members[static_cast<std::size_t>(p)] = p;
  spec.groups.push_back(std::move(g));
  return spec;
}

void LayerGateSpec::validate() const {
  if (channels <= 0 || per_channel.size() != static_cast<std::size_t>(channels)) {
    throw DimensionError("layer gate spec must carry one spec per channel");
  }
  for (const GroupingSpec& spec : per_channel) {
    spec.validate();
    if (spec.height != per_channel.front().height ||
        spec.width != per_channel.front().width) {
      throw DimensionError("channel specs disagree on plane shape");
    }
  }
}

LayerGateSpec LayerGateSpec::replicate(const GroupingSpec& spec, int channels,
                                       bool shared_partition) {
  LayerGateSpec layer;
  layer.channels = channels;
  layer.shared_partition = shared_partition;
  layer.per_channel.assign(static_cast<std::size_t>(channels), spec);
  return layer;
}

Tensor grelu(const Tensor& s, const GroupingSpec& spec, GateDecision* decision) {
  const PlaneShape ps = plane_shape(s);
  return gate_apply(s, LayerGateSpec::replicate(spec, ps.channels), nullptr,
                    decision);
}

Tensor grelu(const Tensor& s, const LayerGateSpec& layer,
             GateDecision* decision) {
  return gate_apply(s, layer, nullptr, decision);
}

Tensor ngrelu(const Tensor& s, const GroupingSpec& spec, double p_keep,
              std::uint64_t rng_seed, GateDecision* decision) {
  const PlaneShape ps = plane_shape(s);
  return ngrelu(s, LayerGateSpec::replicate(spec, ps.channels), p_keep,
                rng_seed, decision);
}

Tensor ngrelu(const Tensor& s, const LayerGateSpec& layer, double p_keep,
              std::uint64_t rng_seed, GateDecision* decision) {
  if (!(p_keep > 0.0 && p_keep <= 1.0)) {
    throw Error("ngrelu p_keep must lie in (0, 1], got " +
                std::to_string(p_keep));
  }
  GateNoise noise{p_keep, rng_seed};
  return gate_apply(s, layer, &noise, decision);
}

GateOpCount count_gate_ops(const GroupingSpec& spec, int channels) {
  spec.validate();
  GateOpCount c;
  c.n_drelu = static_cast<std::int64_t>(spec.n_groups()) * channels;
  c.n_mul = static_cast<std::int64_t>(spec.n_positions()) * channels;
  return c;
}

GateOpCount count_gate_ops(const LayerGateSpec& layer) {
  layer.validate();
  GateOpCount c;
  for (const GroupingSpec& spec : layer.per_channel) {
    c.n_drelu += spec.n_groups();
    c.n_mul += spec.n_positions();
  }
  return c;
}

GateLayerPlan make_gate_plan(const LayerGateSpec& spec) {
  spec.validate();
  GateLayerPlan plan;
  plan.channels = spec.channels;
  plan.height = spec.per_channel.front().height;
  plan.width = spec.per_channel.front().width;
  plan.members.resize(static_cast<std::size_t>(spec.channels));
  plan.group_offsets.resize(static_cast<std::size_t>(spec.channels));
  plan.source_flags.resize(static_cast<std::size_t>(spec.channels));
  for (int c = 0; c < spec.channels; ++c) {
    const GroupingSpec& gs = spec.per_channel[static_cast<std::size_t>(c)];
    auto& mem = plan.members[static_cast<std::size_t>(c)];
    auto& off = plan.group_offsets[static_cast<std::size_t>(c)];
    off.push_back(0);
    for (const GateGroup& g : gs.groups) {
      mem.insert(mem.end(), g.members.begin(), g.members.end());
      off.push_back(static_cast<int>(mem.size()));
    }
    plan.source_flags[static_cast<std::size_t>(c)] =
        gs.mode == GateMode::learned ? 0 : 1;
  }
  return plan;
}

std::vector<Tensor> make_gate_weights(const LayerGateSpec& spec,
                                      bool trainable) {
  spec.validate();
  std::vector<Tensor> weights;
  weights.reserve(static_cast<std::size_t>(spec.channels));
  for (const GroupingSpec& gs : spec.per_channel) {
    std::vector<double> flat;
    for (const GateGroup& g : gs.groups) {
      flat.insert(flat.end(), g.weights.begin(), g.weights.end());
    }
    const bool train_this = trainable && gs.mode == GateMode::learned;
    const int count = static_cast<int>(flat.size());
    weights.push_back(Tensor::from_data({count}, std::move(flat), train_this));
  }
  return weights;
}

void store_gate_weights(LayerGateSpec& spec, const std::vector<Tensor>& weights) {
  if (weights.size() != spec.per_channel.size()) {
    throw DimensionError("gate weight tensor count mismatch");
  }
  for (std::size_t c = 0; c < weights.size(); ++c) {
    GroupingSpec& gs = spec.per_channel[c];
    auto wv = weights[c].data();
    std::size_t cursor = 0;
    for (GateGroup& g : gs.groups) {
      for (double& w : g.weights) w = wv[cursor++];
    }
    if (cursor != wv.size()) {
      throw DimensionError("gate weight tensor length mismatch on channel " +
                           std::to_string(c));
    }
  }
}

Tensor soft_gate_forward(Tape& tape, const Tensor& s, const GateLayerPlan& plan,
                         const std::vector<Tensor>& weights,
                         const SoftGateOptions& options,
                         GateDecision* decision) {
  if (options.temperature <= 0.0) {
    throw Error("soft gate temperature must be > 0");
  }
  if (options.noise && !(options.noise->p_keep > 0.0 && options.noise->p_keep <= 1.0)) {
    throw Error("gate noise p_keep must lie in (0, 1]");
  }
  const PlaneShape ps = plane_shape(s);
  if (ps.channels != plan.channels || ps.height != plan.height ||
      ps.width != plan.width) {
    throw DimensionError("gate plan does not match input shape " +
                         shape_str(s.shape()));
  }
  if (weights.size() != static_cast<std::size_t>(plan.channels)) {
    throw DimensionError("gate weights must carry one tensor per channel");
  }

  const int positions = ps.height * ps.width;
  const double temp = options.temperature;
  const bool hard = options.hard_forward;
  Tensor y = Tensor::zeros(s.shape());

  std::size_t total_groups = 0;
  for (const auto& off : plan.group_offsets) total_groups += off.size() - 1;
  if (decision) {
    decision->samples = ps.samples;
    decision->channels = ps.channels;
    decision->groups_per_channel =
        static_cast<int>(plan.group_offsets.front().size() - 1);
    for (const auto& off : plan.group_offsets) {
      if (static_cast<int>(off.size() - 1) != decision->groups_per_channel) {
        decision->groups_per_channel = 0;
      }
    }
    decision->group_bits.assign(static_cast<std::size_t>(ps.samples) * total_groups, 0);
    decision->activation_bits.clear();
    if (options.noise) {
      decision->activation_bits.assign(
          static_cast<std::size_t>(ps.samples) * ps.channels * positions, 0);
    }
  }

  // Per-(sample,channel,group) data captured for the backward pass.
  struct GroupEval {
    double pre;       // gate pre-activation g
  };
  auto evals = std::make_shared<std::vector<GroupEval>>();
  evals->reserve(static_cast<std::size_t>(ps.samples) * total_groups);
  auto flips = std::make_shared<std::vector<std::uint8_t>>();
  if (options.noise) {
    flips->assign(static_cast<std::size_t>(ps.samples) * ps.channels * positions, 0);
  }

  auto sv = s.data();
  auto yv = y.data();
  std::vector<std::uint8_t> flip;
  std::size_t bit_cursor = 0;
  for (int n = 0; n < ps.samples; ++n) {
    for (int c = 0; c < ps.channels; ++c) {
      const auto& mem = plan.members[static_cast<std::size_t>(c)];
      const auto& off = plan.group_offsets[static_cast<std::size_t>(c)];
      auto wv = weights[static_cast<std::size_t>(c)].data();
      const std::size_t base =
          (static_cast<std::size_t>(n) * ps.channels + c) * positions;
      const double* splane = sv.data() + base;
      double* yplane = yv.data() + base;
      const std::uint8_t* flip_ptr = nullptr;
      if (options.noise) {
        fill_flip_mask(*options.noise, n, c, positions, flip);
        std::copy(flip.begin(), flip.end(), flips->begin() + base);
        flip_ptr = flip.data();
      }
      for (std::size_t gi = 0; gi + 1 < off.size(); ++gi) {
        double pre = 0.0;
        for (int j = off[gi]; j < off[gi + 1]; ++j) {
          pre += wv[static_cast<std::size_t>(j)] * splane[mem[static_cast<std::size_t>(j)]];
        }
        evals->push_back(GroupEval{pre});
        const std::uint8_t bit = pre >= 0.0 ? 1 : 0;
        const std::uint8_t neg_bit = -pre >= 0.0 ? 1 : 0;
        if (decision) decision->group_bits[bit_cursor] = bit;
        ++bit_cursor;
        const double soft_bit = stable_sigmoid(pre / temp);
        const double soft_neg = stable_sigmoid(-pre / temp);
        for (int j = off[gi]; j < off[gi + 1]; ++j) {
          const int p = mem[static_cast<std::size_t>(j)];
          const bool flipped = flip_ptr && flip_ptr[p];
          double gate;
          if (hard) {
            gate = (flipped ? neg_bit : bit) ? 1.0 : 0.0;
          } else {
            gate = flipped ? soft_neg : soft_bit;
          }
          yplane[p] = gate * splane[p];
          if (decision && options.noise) {
            decision->activation_bits[base + static_cast<std::size_t>(p)] =
                flipped ? neg_bit : bit;
          }
        }
      }
    }
  }
  check_finite(y.data(), "soft_gate");

  std::vector<Tensor> inputs = {s};
  inputs.insert(inputs.end(), weights.begin(), weights.end());
  tape.record(
      "soft_gate", std::move(inputs), y,
      [plan, ps, positions, temp, hard, evals, flips](Tape::Entry& e) {
        Tensor sin = e.inputs[0];
        auto dy = e.output.grad();
        auto ds = sin.grad();
        auto sv = sin.data();
        std::size_t eval_cursor = 0;
        for (int n = 0; n < ps.samples; ++n) {
          for (int c = 0; c < ps.channels; ++c) {
            const auto& mem = plan.members[static_cast<std::size_t>(c)];
            const auto& off = plan.group_offsets[static_cast<std::size_t>(c)];
            Tensor wt = e.inputs[1 + static_cast<std::size_t>(c)];
            auto wv = wt.data();
            auto dw = wt.tracked() ? wt.grad() : std::span<double>();
            const std::size_t base =
                (static_cast<std::size_t>(n) * ps.channels + c) * positions;
            const double* splane = sv.data() + base;
            const double* dyplane = dy.data() + base;
            double* dsplane = ds.data() + base;
            const std::uint8_t* flip_ptr =
                flips->empty() ? nullptr : flips->data() + base;
            for (std::size_t gi = 0; gi + 1 < off.size(); ++gi) {
              const double pre = (*evals)[eval_cursor++].pre;
              const std::uint8_t bit = pre >= 0.0 ? 1 : 0;
              const std::uint8_t neg_bit = -pre >= 0.0 ? 1 : 0;
              const double soft_bit = stable_sigmoid(pre / temp);
              const double soft_neg = stable_sigmoid(-pre / temp);
              // d(sigmoid(g/T))/dg, shared by both branches (sigmoid' is even)
              const double dsig = soft_bit * (1.0 - soft_bit) / temp;
              // direct path and accumulation of d(loss)/d(g)
              double dpre = 0.0;
              for (int j = off[gi]; j < off[gi + 1]; ++j) {
                const int p = mem[static_cast<std::size_t>(j)];
                const bool flipped = flip_ptr && flip_ptr[p];
                const double g = dyplane[p];
                double gate;
                if (hard) {
                  gate = (flipped ? neg_bit : bit) ? 1.0 : 0.0;
                } else {
                  gate = flipped ? soft_neg : soft_bit;
                }
                dsplane[p] += g * gate;
                dpre += (flipped ? -1.0 : 1.0) * g * splane[p] * dsig;
              }
              if (dpre != 0.0) {
                for (int j = off[gi]; j < off[gi + 1]; ++j) {
                  const int p = mem[static_cast<std::size_t>(j)];
                  dsplane[p] += dpre * wv[static_cast<std::size_t>(j)];
                  if (!dw.empty()) {
                    dw[static_cast<std::size_t>(j)] += dpre * splane[p];
                  }
                }
              }
            }
          }
        }
      });
  return y;
}

// ---- JSON ------------------------------------------------------------------

namespace {

json spec_to_json_obj(const GroupingSpec& spec) {
  json groups = json::array();
  for (const GateGroup& g : spec.groups) {
    json jg;
    jg["members"] = g.members;
    jg["weights"] = g.weights;
    if (g.source >= 0) jg["source"] = g.source;
    groups.push_back(std::move(jg));
  }
  return json{{"height", spec.height},
              {"width", spec.width},
              {"mode", gate_mode_name(spec.mode)},
              {"groups", std::move(groups)}};
}

GroupingSpec spec_from_json_obj(const json& j) {
  GroupingSpec spec;
  spec.height = j.at("height").get<int>();
  spec.width = j.at("width").get<int>();
  spec.mode = gate_mode_from_name(j.at("mode").get<std::string>());
  for (const json& jg : j.at("groups")) {
    GateGroup g;
    g.members = jg.at("members").get<std::vector<int>>();
    g.weights = jg.at("weights").get<std::vector<double>>();
    g.source = jg.value("source", -1);
    spec.groups.push_back(std::move(g));
  }
  spec.validate();
  return spec;
}

}  // namespace

std::string grouping_spec_to_json(const GroupingSpec& spec) {
  return spec_to_json_obj(spec).dump();
}

GroupingSpec grouping_spec_from_json(const std::string& text) {
  try {
    return spec_from_json_obj(json::parse(text));
  } catch (const json::exception& e) {
    throw FormatError(std::string("bad grouping spec JSON: ") + e.what());
  }
}

std::string layer_gate_spec_to_json(const LayerGateSpec& spec) {
  json j;
  j["channels"] = spec.channels;
  j["shared_partition"] = spec.shared_partition;
  json specs = json::array();
  for (const GroupingSpec& gs : spec.per_channel) {
    specs.push_back(spec_to_json_obj(gs));
  }
  j["specs"] = std::move(specs);
  return j.dump();
}

LayerGateSpec layer_gate_spec_from_json(const std::string& text) {
  try {
    const json j = json::parse(text);
    LayerGateSpec spec;
    spec.channels = j.at("channels").get<int>();
    spec.shared_partition = j.value("shared_partition", false);
    for (const json& js : j.at("specs")) {
      spec.per_channel.push_back(spec_from_json_obj(js));
    }
    spec.validate();
    return spec;
  } catch (const json::exception& e) {
    throw FormatError(std::string("bad layer gate spec JSON: ") + e.what());
  }
}

void save_layer_gate_spec(const LayerGateSpec& spec, const std::string& path) {
  write_file_atomic(path, layer_gate_spec_to_json(spec));
}

LayerGateSpec load_layer_gate_spec(const std::string& path) {
  return layer_gate_spec_from_json(read_file(path));
}

}  // namespace relush
