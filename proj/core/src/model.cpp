#include "relush/model.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>

#include "json.hpp"

namespace relush {

namespace {

std::string resolve_path(const std::string& base_dir, const std::string& path) {
  namespace fs = std::filesystem;
  if (base_dir.empty() || fs::path(path).is_absolute()) return path;
  return (fs::path(base_dir) / path).string();
}

LayerGateSpec build_gate_spec(const ResolvedLayer& layer,
                              const std::string& base_dir) {
  const ReluVariantCfg& r = layer.cfg.relu;
  const int c = layer.in.c, h = layer.in.h, w = layer.in.w;
  if (r.variant == "uniform") {
    return LayerGateSpec::replicate(uniform_patches(h, w, r.patch), c);
  }
  if (r.variant == "middle") {
    return LayerGateSpec::replicate(GroupingSpec::whole_channel_middle(h, w), c);
  }
  if (r.variant == "learned") {
    return LayerGateSpec::replicate(GroupingSpec::whole_channel_learned(h, w), c);
  }
  if (r.variant == "clustered") {
    LayerGateSpec spec =
        load_layer_gate_spec(resolve_path(base_dir, r.grouping_file));
    if (spec.channels != c || spec.per_channel.front().height != h ||
        spec.per_channel.front().width != w) {
      throw FormatError("grouping file '" + r.grouping_file +
                        "' does not match layer plane " + std::to_string(c) +
                        "x" + std::to_string(h) + "x" + std::to_string(w));
    }
    return spec;
  }
  throw Error("variant '" + r.variant + "' has no gate spec");
}

std::uint64_t layer_noise_salt(std::uint64_t seed, int layer_index) {
  return seed ^ (0xa24baed4963ee407ULL +
                 0x9e3779b97f4a7c15ULL * static_cast<std::uint64_t>(layer_index));
}

}  // namespace

Model::Model(ResolvedNetwork net, std::uint64_t init_seed)
    : net_(std::move(net)) {
  Rng rng(init_seed);
  for (std::size_t i = 0; i < net_.layers.size(); ++i) {
    const ResolvedLayer& def = net_.layers[i];
    Layer layer;
    layer.def = def;
    if (def.cfg.kind == "conv") {
      const int fan_in = def.in.c * def.cfg.kernel * def.cfg.kernel;
      layer.weight = Tensor::kaiming_uniform(
          {def.cfg.out_channels, def.in.c, def.cfg.kernel, def.cfg.kernel},
          fan_in, rng, true);
      layer.bias = Tensor::zeros({def.cfg.out_channels}, true);
    } else if (def.cfg.kind == "linear") {
      const int in_features = static_cast<int>(def.in.count());
      layer.weight = Tensor::kaiming_uniform({in_features, def.cfg.out_features},
                                             in_features, rng, true);
      layer.bias = Tensor::zeros({def.cfg.out_features}, true);
    } else if (def.cfg.kind == "relu" && def.cfg.relu.variant != "original") {
      layer.gate_spec = build_gate_spec(def, net_.base_dir);
      layer.gate_plan = make_gate_plan(layer.gate_spec);
      layer.gate_weights = make_gate_weights(layer.gate_spec, true);
    }
    layers_.push_back(std::move(layer));
  }
}

std::vector<Tensor> Model::parameters() {
  std::vector<Tensor> params;
  for (Layer& layer : layers_) {
    if (layer.weight.defined()) {
      params.push_back(layer.weight);
      params.push_back(layer.bias);
    }
    for (Tensor& t : layer.gate_weights) {
      if (t.requires_grad()) params.push_back(t);
    }
  }
  return params;
}

Tensor Model::forward(Tape& tape, const Tensor& x, bool training,
                      std::uint64_t step_seed,
                      std::vector<std::optional<Tensor>>* pre_activations,
                      std::vector<std::optional<Tensor>>* post_activations) {
  if (pre_activations) pre_activations->assign(layers_.size(), std::nullopt);
  if (post_activations) post_activations->assign(layers_.size(), std::nullopt);
  Tensor cur = x;
  for (std::size_t i = 0; i < layers_.size(); ++i) {
    Layer& layer = layers_[i];
    const LayerCfg& cfg = layer.def.cfg;
    if (cfg.kind == "conv") {
      cur = conv2d(tape, cur, layer.weight, layer.bias, cfg.stride, cfg.padding);
    } else if (cfg.kind == "avgpool") {
      cur = avgpool2d(tape, cur, cfg.kernel, cfg.stride);
    } else if (cfg.kind == "linear") {
      if (cur.ndim() > 2) cur = flatten2d(tape, cur);
      cur = dense(tape, cur, layer.weight, layer.bias);
    } else {  // relu
      if (pre_activations) (*pre_activations)[i] = cur;
      if (!layer.has_gate()) {
        cur = relu(tape, cur);
      } else {
        SoftGateOptions opt;
        if (cfg.relu.noise > 0.0 &&
            (training || cfg.relu.noise_at_inference)) {
          const std::uint64_t salt = layer_noise_salt(
              training ? step_seed : net_.seed, static_cast<int>(i));
          opt.noise = GateNoise{1.0 - cfg.relu.noise, salt};
        }
        cur = soft_gate_forward(tape, cur, layer.gate_plan, layer.gate_weights,
                                opt);
      }
      if (post_activations) (*post_activations)[i] = cur;
    }
  }
  return cur;
}

Tensor Model::infer(const Tensor& x) {
  Tape scratch;
  return forward(scratch, x, /*training=*/false, 0);
}

std::vector<int> Model::predict(const Tensor& x) {
  const Tensor logits = infer(x);
  const int n = logits.dim(0), k = logits.dim(1);
  std::vector<int> out(static_cast<std::size_t>(n));
  auto lv = logits.data();
  for (int r = 0; r < n; ++r) {
    int best = 0;
    for (int c = 1; c < k; ++c) {
      if (lv[static_cast<std::size_t>(r) * k + c] >
          lv[static_cast<std::size_t>(r) * k + best]) {
        best = c;
      }
    }
    out[static_cast<std::size_t>(r)] = best;
  }
  return out;
}

Checkpoint Model::to_checkpoint() const {
  Checkpoint ckpt;
  nlohmann::json meta;
  meta["name"] = net_.name;
  meta["variant"] = net_.variant;
  ckpt.meta_json = meta.dump();
  for (std::size_t i = 0; i < layers_.size(); ++i) {
    const Layer& layer = layers_[i];
    if (layer.weight.defined()) {
      const std::string base = "layer" + std::to_string(i);
      ckpt.tensors.push_back({base + ".weight", layer.weight.shape(),
                              {layer.weight.data().begin(), layer.weight.data().end()}});
      ckpt.tensors.push_back({base + ".bias", layer.bias.shape(),
                              {layer.bias.data().begin(), layer.bias.data().end()}});
    }
    if (layer.has_gate()) {
      LayerGateSpec spec = layer.gate_spec;
      store_gate_weights(spec, layer.gate_weights);
      ckpt.gates.push_back({static_cast<int>(i), layer_gate_spec_to_json(spec)});
    }
  }
  return ckpt;
}

void Model::load_checkpoint(const Checkpoint& ckpt) {
  std::size_t expected_tensors = 0;
  for (std::size_t i = 0; i < layers_.size(); ++i) {
    Layer& layer = layers_[i];
    if (layer.weight.defined()) {
      expected_tensors += 2;
      const std::string base = "layer" + std::to_string(i);
      for (const char* part : {".weight", ".bias"}) {
        const Checkpoint::NamedTensor* t = ckpt.find(base + part);
        if (!t) throw FormatError("checkpoint is missing tensor " + base + part);
        Tensor& dst = part == std::string(".weight") ? layer.weight : layer.bias;
        if (t->shape != dst.shape()) {
          throw FormatError("checkpoint tensor " + base + part +
                            " has shape " + shape_str(t->shape) +
                            ", expected " + shape_str(dst.shape()));
        }
        std::copy(t->values.begin(), t->values.end(), dst.data().begin());
      }
    }
  }
  if (ckpt.tensors.size() != expected_tensors) {
    throw FormatError("checkpoint carries " + std::to_string(ckpt.tensors.size()) +
                      " tensors, model expects " +
                      std::to_string(expected_tensors));
  }

  std::size_t expected_gates = 0;
  for (std::size_t i = 0; i < layers_.size(); ++i) {
    if (!layers_[i].has_gate()) continue;
    ++expected_gates;
    const Checkpoint::GateEntry* entry = nullptr;
    for (const auto& g : ckpt.gates) {
      if (g.layer_index == static_cast<int>(i)) entry = &g;
    }
    if (!entry) {
      throw FormatError("checkpoint is missing gate spec for layer " +
                        std::to_string(i));
    }
    LayerGateSpec spec = layer_gate_spec_from_json(entry->spec_json);
    Layer& layer = layers_[i];
    if (spec.channels != layer.gate_spec.channels ||
        spec.per_channel.front().height != layer.def.in.h ||
        spec.per_channel.front().width != layer.def.in.w) {
      throw FormatError("checkpoint gate spec for layer " + std::to_string(i) +
                        " does not match the architecture");
    }
    layer.gate_spec = std::move(spec);
    layer.gate_plan = make_gate_plan(layer.gate_spec);
    layer.gate_weights = make_gate_weights(layer.gate_spec, true);
  }
  if (ckpt.gates.size() != expected_gates) {
    throw FormatError("checkpoint gate entries do not match the architecture");
  }
}

void Model::warm_start(const Checkpoint& ckpt) {
  for (std::size_t i = 0; i < layers_.size(); ++i) {
    Layer& layer = layers_[i];
    if (!layer.weight.defined()) continue;
    const std::string base = "layer" + std::to_string(i);
    for (const char* part : {".weight", ".bias"}) {
      const Checkpoint::NamedTensor* t = ckpt.find(base + part);
      Tensor& dst = part == std::string(".weight") ? layer.weight : layer.bias;
      if (t && t->shape == dst.shape()) {
        std::copy(t->values.begin(), t->values.end(), dst.data().begin());
      }
    }
  }
}

NetworkDescriptor Model::descriptor() const {
  NetworkDescriptor net;
  net.name = net_.name + ":" + net_.variant;
  for (std::size_t i = 0; i < layers_.size(); ++i) {
    const Layer& layer = layers_[i];
    const LayerCfg& cfg = layer.def.cfg;
    const std::string label = "layer" + std::to_string(i) + "." + cfg.kind;
    if (cfg.kind == "conv") {
      if (layer.def.out.h != layer.def.out.w) {
        throw DimensionError("cost model expects square conv outputs, got " +
                             layer.def.out.str());
      }
      net.layers.push_back(LayerDescriptor::conv2d(
          label, layer.def.out.h, layer.def.in.c, cfg.kernel, cfg.out_channels));
    } else if (cfg.kind == "linear") {
      net.layers.push_back(LayerDescriptor::linear(
          label, 1, layer.def.in.count(), cfg.out_features));
    } else if (cfg.kind == "avgpool") {
      net.layers.push_back(LayerDescriptor::avgpool(label));
    } else {
      const std::int64_t n_acts = layer.def.in.count();
      std::int64_t n_groups = n_acts;
      if (layer.has_gate()) {
        n_groups = count_gate_ops(layer.gate_spec).n_drelu;
      }
      net.layers.push_back(LayerDescriptor::relu_layer(
          label, n_acts, n_groups,
          layer.has_gate() && cfg.relu.shared_gate));
    }
  }
  return net;
}

std::vector<ActivationProfileMatrix> record_activation_profiles(
    Model& model, const Dataset& data, int layer_index,
    std::int64_t max_samples) {
  if (layer_index < 0 ||
      layer_index >= static_cast<int>(model.layers().size())) {
    throw DimensionError("layer index out of range");
  }
  const Model::Layer& target =
      model.layers()[static_cast<std::size_t>(layer_index)];
  if (target.def.cfg.kind != "relu" || !target.def.in.spatial) {
    throw DimensionError("layer " + std::to_string(layer_index) +
                         " is not a spatial activation layer");
  }
  const int channels = target.def.in.c;
  const int h = target.def.in.h, w = target.def.in.w;
  const std::int64_t n =
      max_samples > 0 ? std::min<std::int64_t>(data.size(), max_samples)
                      : data.size();
  if (n <= 0) throw DimensionError("no examples to profile");

  std::vector<ActivationProfileMatrix> profiles;
  profiles.reserve(static_cast<std::size_t>(channels));
  for (int c = 0; c < channels; ++c) profiles.emplace_back(h, w, n);

  const std::int64_t batch = 128;
  std::vector<std::optional<Tensor>> pre;
  for (std::int64_t start = 0; start < n; start += batch) {
    const std::int64_t count = std::min<std::int64_t>(batch, n - start);
    std::vector<std::int64_t> idx(static_cast<std::size_t>(count));
    for (std::int64_t i = 0; i < count; ++i) idx[static_cast<std::size_t>(i)] = start + i;
    Tape scratch;
    model.forward(scratch, data.batch(idx), /*training=*/false, 0, &pre, nullptr);
    const Tensor& t = *pre[static_cast<std::size_t>(layer_index)];
    auto tv = t.data();
    const std::int64_t plane = static_cast<std::int64_t>(h) * w;
    for (std::int64_t i = 0; i < count; ++i) {
      for (int c = 0; c < channels; ++c) {
        const double* s = tv.data() + (i * channels + c) * plane;
        for (std::int64_t p = 0; p < plane; ++p) {
          profiles[static_cast<std::size_t>(c)].set(static_cast<int>(p),
                                                    start + i, s[p] >= 0.0);
        }
      }
    }
  }
  return profiles;
}

std::vector<TvRow> total_variation(Model& model, const Dataset& data,
                                   std::int64_t limit) {
  const std::int64_t n =
      limit > 0 ? std::min<std::int64_t>(data.size(), limit) : data.size();
  if (n <= 0) throw DimensionError("no examples for total variation");

  std::vector<TvRow> rows;
  std::vector<double> sums(model.layers().size(), 0.0);
  std::vector<std::int64_t> counts(model.layers().size(), 0);

  const std::int64_t batch = 64;
  std::vector<std::optional<Tensor>> post;
  for (std::int64_t start = 0; start < n; start += batch) {
    const std::int64_t count = std::min<std::int64_t>(batch, n - start);
    std::vector<std::int64_t> idx(static_cast<std::size_t>(count));
    for (std::int64_t i = 0; i < count; ++i) idx[static_cast<std::size_t>(i)] = start + i;
    Tape scratch;
    model.forward(scratch, data.batch(idx), /*training=*/false, 0, nullptr, &post);
    for (std::size_t li = 0; li < model.layers().size(); ++li) {
      if (!post[li].has_value()) continue;
      const Model::Layer& layer = model.layers()[li];
      if (!layer.def.in.spatial) continue;
      const int c = layer.def.in.c, h = layer.def.in.h, w = layer.def.in.w;
      auto tv = post[li]->data();
      const std::int64_t plane = static_cast<std::int64_t>(h) * w;
      for (std::int64_t i = 0; i < count; ++i) {
        for (int ch = 0; ch < c; ++ch) {
          const double* a = tv.data() + (i * c + ch) * plane;
          double acc = 0.0;
          for (int y = 0; y + 1 < h; ++y) {
            for (int x = 0; x < w; ++x) {
              acc += std::abs(a[(y + 1) * w + x] - a[y * w + x]);
            }
          }
          for (int y = 0; y < h; ++y) {
            for (int x = 0; x + 1 < w; ++x) {
              acc += std::abs(a[y * w + x + 1] - a[y * w + x]);
            }
          }
          sums[li] += acc;
          ++counts[li];
        }
      }
    }
  }
  for (std::size_t li = 0; li < model.layers().size(); ++li) {
    if (counts[li] == 0) continue;
    rows.push_back(TvRow{static_cast<int>(li),
                         "layer" + std::to_string(li) + "." +
                             model.layers()[li].def.cfg.relu.variant,
                         sums[li] / static_cast<double>(counts[li])});
  }
  return rows;
}

std::string tv_to_csv(const std::vector<TvRow>& rows) {
  std::string out = "layer,label,total_variation\n";
  char buf[96];
  for (const TvRow& r : rows) {
    std::snprintf(buf, sizeof(buf), "%d,%s,%.17g\n", r.layer_index,
                  r.label.c_str(), r.tv);
    out += buf;
  }
  return out;
}

}  // namespace relush
