#include "relush/config.hpp"

#include <algorithm>
#include <filesystem>
#include <fstream>

#include "json.hpp"

namespace relush {

namespace {

using nlohmann::json;

void reject_unknown_keys(const json& obj, std::initializer_list<const char*> allowed,
                         const std::string& where) {
  for (auto it = obj.begin(); it != obj.end(); ++it) {
    if (std::find_if(allowed.begin(), allowed.end(), [&](const char* k) {
          return it.key() == k;
        }) == allowed.end()) {
      throw FormatError("unknown key '" + it.key() + "' in " + where);
    }
  }
}

template <typename T>
T get_field(const json& obj, const char* key, const std::string& where) {
  if (!obj.contains(key)) {
    throw FormatError("missing key '" + std::string(key) + "' in " + where);
  }
  try {
    return obj.at(key).get<T>();
  } catch (const json::exception&) {
    throw FormatError("bad value for '" + std::string(key) + "' in " + where);
  }
}

template <typename T>
T get_field_or(const json& obj, const char* key, T fallback,
               const std::string& where) {
  if (!obj.contains(key)) return fallback;
  try {
    return obj.at(key).get<T>();
  } catch (const json::exception&) {
    throw FormatError("bad value for '" + std::string(key) + "' in " + where);
  }
}

SyntheticSpec parse_synthetic(const json& j) {
  reject_unknown_keys(j,
                      {"classes", "channels", "height", "width", "train_size",
                       "test_size", "noise_sigma", "seed"},
                      "dataset.synthetic");
  SyntheticSpec s;
  s.classes = get_field_or(j, "classes", s.classes, "dataset.synthetic");
  s.channels = get_field_or(j, "channels", s.channels, "dataset.synthetic");
  s.height = get_field_or(j, "height", s.height, "dataset.synthetic");
  s.width = get_field_or(j, "width", s.width, "dataset.synthetic");
  s.train_size = get_field_or(j, "train_size", s.train_size, "dataset.synthetic");
  s.test_size = get_field_or(j, "test_size", s.test_size, "dataset.synthetic");
  s.noise_sigma = get_field_or(j, "noise_sigma", s.noise_sigma, "dataset.synthetic");
  s.seed = get_field_or<std::uint64_t>(j, "seed", s.seed, "dataset.synthetic");
  if (s.classes < 2 || s.channels < 1 || s.height < 1 || s.width < 1 ||
      s.train_size < 1 || s.test_size < 1 || s.noise_sigma < 0.0) {
    throw FormatError("invalid dataset.synthetic parameters");
  }
  return s;
}

DatasetConfig parse_dataset(const json& j) {
  DatasetConfig d;
  d.kind = get_field<std::string>(j, "kind", "dataset");
  if (d.kind == "synthetic") {
    reject_unknown_keys(j, {"kind", "synthetic"}, "dataset");
    if (j.contains("synthetic")) d.synthetic = parse_synthetic(j.at("synthetic"));
  } else if (d.kind == "csv") {
    reject_unknown_keys(j, {"kind", "train", "test"}, "dataset");
    d.train_csv = get_field<std::string>(j, "train", "dataset");
    d.test_csv = get_field<std::string>(j, "test", "dataset");
  } else if (d.kind == "idx") {
    reject_unknown_keys(
        j, {"kind", "train_images", "train_labels", "test_images", "test_labels"},
        "dataset");
    d.train_images = get_field<std::string>(j, "train_images", "dataset");
    d.train_labels = get_field<std::string>(j, "train_labels", "dataset");
    d.test_images = get_field<std::string>(j, "test_images", "dataset");
    d.test_labels = get_field<std::string>(j, "test_labels", "dataset");
  } else if (d.kind == "cifar10") {
    reject_unknown_keys(j, {"kind", "train", "test"}, "dataset");
    d.train_files = get_field<std::vector<std::string>>(j, "train", "dataset");
    d.test_files = get_field<std::vector<std::string>>(j, "test", "dataset");
  } else {
    throw FormatError("unknown dataset kind '" + d.kind + "'");
  }
  return d;
}

ReluVariantCfg parse_relu_cfg(const json& j, const std::string& where) {
  reject_unknown_keys(j,
                      {"variant", "patch", "grouping", "noise",
                       "noise_at_inference", "shared_gate"},
                      where);
  ReluVariantCfg r;
  r.variant = get_field_or<std::string>(j, "variant", "original", where);
  r.patch = get_field_or(j, "patch", 0, where);
  r.grouping_file = get_field_or<std::string>(j, "grouping", "", where);
  r.noise = get_field_or(j, "noise", 0.0, where);
  r.noise_at_inference = get_field_or(j, "noise_at_inference", false, where);
  r.shared_gate = get_field_or(j, "shared_gate", false, where);

  static const char* kVariants[] = {"original", "uniform", "middle",
                                    "clustered", "learned"};
  if (std::find_if(std::begin(kVariants), std::end(kVariants), [&](const char* v) {
        return r.variant == v;
      }) == std::end(kVariants)) {
    throw FormatError("unknown relu variant '" + r.variant + "' in " + where);
  }
  if (r.variant == "uniform" && r.patch < 1) {
    throw FormatError("uniform variant needs patch >= 1 in " + where);
  }
  if (r.variant == "clustered" && r.grouping_file.empty()) {
    throw FormatError("clustered variant needs a grouping file in " + where);
  }
  if (r.noise < 0.0 || r.noise >= 1.0) {
    throw FormatError("noise must lie in [0, 1) in " + where);
  }
  return r;
}

LayerCfg parse_layer(const json& j, std::size_t idx) {
  const std::string where = "layers[" + std::to_string(idx) + "]";
  LayerCfg l;
  l.kind = get_field<std::string>(j, "kind", where);
  if (l.kind == "conv") {
    reject_unknown_keys(j, {"kind", "out_channels", "kernel", "stride", "padding"},
                        where);
    l.out_channels = get_field<int>(j, "out_channels", where);
    l.kernel = get_field<int>(j, "kernel", where);
    l.stride = get_field_or(j, "stride", 1, where);
    l.padding = get_field_or(j, "padding", 0, where);
    if (l.out_channels < 1 || l.kernel < 1 || l.stride < 1 || l.padding < 0) {
      throw FormatError("invalid conv parameters in " + where);
    }
  } else if (l.kind == "linear") {
    reject_unknown_keys(j, {"kind", "out_features"}, where);
    l.out_features = get_field<int>(j, "out_features", where);
    if (l.out_features < 1) throw FormatError("invalid linear out_features in " + where);
  } else if (l.kind == "avgpool") {
    reject_unknown_keys(j, {"kind", "kernel", "stride"}, where);
    l.kernel = get_field<int>(j, "kernel", where);
    l.stride = get_field_or(j, "stride", l.kernel, where);
    if (l.kernel < 1 || l.stride < 1) {
      throw FormatError("invalid avgpool parameters in " + where);
    }
  } else if (l.kind == "relu") {
    reject_unknown_keys(j,
                        {"kind", "variant", "patch", "grouping", "noise",
                         "noise_at_inference", "shared_gate"},
                        where);
    json rj = j;
    rj.erase("kind");
    l.relu = parse_relu_cfg(rj, where);
  } else {
    throw FormatError("unknown layer kind '" + l.kind + "' in " + where);
  }
  return l;
}

json relu_cfg_to_json(const ReluVariantCfg& r) {
  json j;
  j["variant"] = r.variant;
  if (r.patch > 0) j["patch"] = r.patch;
  if (!r.grouping_file.empty()) j["grouping"] = r.grouping_file;
  if (r.noise > 0.0) j["noise"] = r.noise;
  if (r.noise_at_inference) j["noise_at_inference"] = true;
  if (r.shared_gate) j["shared_gate"] = true;
  return j;
}

}  // namespace

std::vector<std::string> NetworkConfig::variant_names() const {
  std::vector<std::string> names;
  if (!variants.count("original")) names.push_back("original");
  for (const auto& [name, _] : variants) names.push_back(name);
  return names;
}

NetworkConfig parse_network_config(const std::string& json_text) {
  json j;
  try {
    j = json::parse(json_text);
  } catch (const json::exception& e) {
    throw FormatError(std::string("config is not valid JSON: ") + e.what());
  }
  reject_unknown_keys(j,
                      {"name", "seed", "input_shape", "dataset", "training",
                       "protocol", "layers", "variants"},
                      "config");
  NetworkConfig cfg;
  cfg.name = get_field<std::string>(j, "name", "config");
  cfg.seed = get_field_or<std::uint64_t>(j, "seed", 1, "config");
  const auto shape = get_field<std::vector<int>>(j, "input_shape", "config");
  if (shape.size() != 3 || shape[0] < 1 || shape[1] < 1 || shape[2] < 1) {
    throw FormatError("input_shape must be [channels, height, width]");
  }
  cfg.in_channels = shape[0];
  cfg.in_height = shape[1];
  cfg.in_width = shape[2];
  cfg.dataset = parse_dataset(j.at("dataset"));

  if (j.contains("training")) {
    const json& t = j.at("training");
    reject_unknown_keys(t, {"lr", "momentum", "batch_size", "epochs"}, "training");
    cfg.training.lr = get_field_or(t, "lr", cfg.training.lr, "training");
    cfg.training.momentum =
        get_field_or(t, "momentum", cfg.training.momentum, "training");
    cfg.training.batch_size =
        get_field_or(t, "batch_size", cfg.training.batch_size, "training");
    cfg.training.epochs = get_field_or(t, "epochs", cfg.training.epochs, "training");
    if (cfg.training.lr <= 0 || cfg.training.momentum < 0 ||
        cfg.training.momentum >= 1 || cfg.training.batch_size < 1 ||
        cfg.training.epochs < 1) {
      throw FormatError("invalid training parameters");
    }
  }
  if (j.contains("protocol")) {
    const json& p = j.at("protocol");
    reject_unknown_keys(p, {"ring_bits", "logp", "scale_bits"}, "protocol");
    cfg.protocol.ring_bits =
        get_field_or(p, "ring_bits", cfg.protocol.ring_bits, "protocol");
    cfg.protocol.logp = get_field_or(p, "logp", cfg.protocol.logp, "protocol");
    cfg.protocol.scale_bits =
        get_field_or(p, "scale_bits", cfg.protocol.scale_bits, "protocol");
    if (cfg.protocol.ring_bits < 8 || cfg.protocol.ring_bits > 64 ||
        cfg.protocol.ring_bits % 8 != 0 || cfg.protocol.logp < 1 ||
        cfg.protocol.scale_bits < 1 ||
        cfg.protocol.scale_bits * 2 >= cfg.protocol.ring_bits) {
      throw FormatError("invalid protocol parameters");
    }
  }

  if (!j.contains("layers") || !j.at("layers").is_array() || j.at("layers").empty()) {
    throw FormatError("config needs a non-empty layers array");
  }
  for (std::size_t i = 0; i < j.at("layers").size(); ++i) {
    cfg.layers.push_back(parse_layer(j.at("layers")[i], i));
  }

  if (j.contains("variants")) {
    for (auto it = j.at("variants").begin(); it != j.at("variants").end(); ++it) {
      std::vector<VariantOverride> overrides;
      for (const json& jo : it.value()) {
        const std::string where = "variants." + it.key();
        reject_unknown_keys(jo,
                            {"layer", "variant", "patch", "grouping", "noise",
                             "noise_at_inference", "shared_gate"},
                            where);
        VariantOverride o;
        o.layer = get_field<int>(jo, "layer", where);
        if (o.layer < 0 || o.layer >= static_cast<int>(cfg.layers.size()) ||
            cfg.layers[static_cast<std::size_t>(o.layer)].kind != "relu") {
          throw FormatError(where + " targets layer " + std::to_string(o.layer) +
                            " which is not a relu layer");
        }
        json rj = jo;
        rj.erase("layer");
        o.relu = parse_relu_cfg(rj, where);
        overrides.push_back(std::move(o));
      }
      cfg.variants[it.key()] = std::move(overrides);
    }
  }
  return cfg;
}

NetworkConfig load_network_config(const std::string& path) {
  NetworkConfig cfg = parse_network_config(read_file(path));
  cfg.base_dir = std::filesystem::path(path).parent_path().string();
  return cfg;
}

std::string network_config_to_json(const NetworkConfig& cfg) {
  json j;
  j["name"] = cfg.name;
  j["seed"] = cfg.seed;
  j["input_shape"] = {cfg.in_channels, cfg.in_height, cfg.in_width};

  json d;
  d["kind"] = cfg.dataset.kind;
  if (cfg.dataset.kind == "synthetic") {
    const SyntheticSpec& s = cfg.dataset.synthetic;
    d["synthetic"] = {{"classes", s.classes},     {"channels", s.channels},
                      {"height", s.height},       {"width", s.width},
                      {"train_size", s.train_size}, {"test_size", s.test_size},
                      {"noise_sigma", s.noise_sigma}, {"seed", s.seed}};
  } else if (cfg.dataset.kind == "csv") {
    d["train"] = cfg.dataset.train_csv;
    d["test"] = cfg.dataset.test_csv;
  } else if (cfg.dataset.kind == "idx") {
    d["train_images"] = cfg.dataset.train_images;
    d["train_labels"] = cfg.dataset.train_labels;
    d["test_images"] = cfg.dataset.test_images;
    d["test_labels"] = cfg.dataset.test_labels;
  } else {
    d["train"] = cfg.dataset.train_files;
    d["test"] = cfg.dataset.test_files;
  }
  j["dataset"] = std::move(d);

  j["training"] = {{"lr", cfg.training.lr},
                   {"momentum", cfg.training.momentum},
                   {"batch_size", cfg.training.batch_size},
                   {"epochs", cfg.training.epochs}};
  j["protocol"] = {{"ring_bits", cfg.protocol.ring_bits},
                   {"logp", cfg.protocol.logp},
                   {"scale_bits", cfg.protocol.scale_bits}};

  json layers = json::array();
  for (const LayerCfg& l : cfg.layers) {
    json jl;
    jl["kind"] = l.kind;
    if (l.kind == "conv") {
      jl["out_channels"] = l.out_channels;
      jl["kernel"] = l.kernel;
      jl["stride"] = l.stride;
      jl["padding"] = l.padding;
    } else if (l.kind == "linear") {
      jl["out_features"] = l.out_features;
    } else if (l.kind == "avgpool") {
      jl["kernel"] = l.kernel;
      jl["stride"] = l.stride;
    } else {
      json rj = relu_cfg_to_json(l.relu);
      for (auto it = rj.begin(); it != rj.end(); ++it) jl[it.key()] = it.value();
    }
    layers.push_back(std::move(jl));
  }
  j["layers"] = std::move(layers);

  json variants;
  for (const auto& [name, overrides] : cfg.variants) {
    json arr = json::array();
    for (const VariantOverride& o : overrides) {
      json jo = relu_cfg_to_json(o.relu);
      jo["layer"] = o.layer;
      arr.push_back(std::move(jo));
    }
    variants[name] = std::move(arr);
  }
  j["variants"] = std::move(variants);
  return j.dump(2);
}

std::string TensorShape::str() const {
  if (spatial) {
    return std::to_string(c) + "x" + std::to_string(h) + "x" + std::to_string(w);
  }
  return std::to_string(flat);
}

ResolvedNetwork resolve_network(const NetworkConfig& cfg,
                                const std::string& variant) {
  std::vector<VariantOverride> overrides;
  if (auto it = cfg.variants.find(variant); it != cfg.variants.end()) {
    overrides = it->second;
  } else if (variant != "original") {
    throw FormatError("config '" + cfg.name + "' has no variant '" + variant +
                      "'");
  }

  ResolvedNetwork net;
  net.name = cfg.name;
  net.variant = variant;
  net.seed = cfg.seed;
  net.dataset = cfg.dataset;
  net.training = cfg.training;
  net.protocol = cfg.protocol;
  net.base_dir = cfg.base_dir;
  net.input = TensorShape{true, cfg.in_channels, cfg.in_height, cfg.in_width, 0};

  TensorShape cur = net.input;
  for (std::size_t i = 0; i < cfg.layers.size(); ++i) {
    ResolvedLayer rl;
    rl.cfg = cfg.layers[i];
    for (const VariantOverride& o : overrides) {
      if (o.layer == static_cast<int>(i)) rl.cfg.relu = o.relu;
    }
    rl.in = cur;
    const std::string where = "layer " + std::to_string(i);
    if (rl.cfg.kind == "conv") {
      if (!cur.spatial) throw FormatError(where + ": conv needs a spatial input");
      if (rl.cfg.kernel > cur.h + 2 * rl.cfg.padding ||
          rl.cfg.kernel > cur.w + 2 * rl.cfg.padding) {
        throw FormatError(where + ": kernel exceeds padded input");
      }
      cur.c = rl.cfg.out_channels;
      cur.h = (cur.h + 2 * rl.cfg.padding - rl.cfg.kernel) / rl.cfg.stride + 1;
      cur.w = (cur.w + 2 * rl.cfg.padding - rl.cfg.kernel) / rl.cfg.stride + 1;
    } else if (rl.cfg.kind == "avgpool") {
      if (!cur.spatial) throw FormatError(where + ": avgpool needs a spatial input");
      if (rl.cfg.kernel > cur.h || rl.cfg.kernel > cur.w) {
        throw FormatError(where + ": pool window exceeds input");
      }
      cur.h = (cur.h - rl.cfg.kernel) / rl.cfg.stride + 1;
      cur.w = (cur.w - rl.cfg.kernel) / rl.cfg.stride + 1;
    } else if (rl.cfg.kind == "linear") {
      // spatial inputs are implicitly flattened
      cur = TensorShape{false, 0, 0, 0, rl.cfg.out_features};
    } else if (rl.cfg.kind == "relu") {
      const ReluVariantCfg& r = rl.cfg.relu;
      if (r.variant != "original") {
        if (!cur.spatial) {
          throw FormatError(where + ": gated variant '" + r.variant +
                            "' needs a spatial input");
        }
        if (r.variant == "uniform" && r.patch > std::max(cur.h, cur.w)) {
          throw FormatError(where + ": patch " + std::to_string(r.patch) +
                            " exceeds plane " + std::to_string(cur.h) + "x" +
                            std::to_string(cur.w));
        }
      }
      if (r.noise > 0.0 && r.variant == "original") {
        throw FormatError(where + ": noise requires a gated variant");
      }
    } else {
      throw FormatError(where + ": unknown kind");
    }
    rl.out = cur;
    net.layers.push_back(std::move(rl));
  }

  if (cur.spatial || cfg.layers.back().kind != "linear") {
    throw FormatError("network must end with a linear classifier layer");
  }
  net.num_classes = cur.flat;
  return net;
}

}  // namespace relush
