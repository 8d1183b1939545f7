// relush: train, analyze, and simulate shared-gate networks.
//
// Subcommands: train | cluster | cost | count | simulate | tv
// Exit codes: 0 success, 2 reconciliation failure, 3 input/format error,
// 4 training divergence.

#include <chrono>
#include <cinttypes>
#include <cstdio>
#include <filesystem>
#include <iostream>
#include <optional>
#include <string>

#include "CLI11.hpp"
#include "json.hpp"
#include "relush/checkpoint.hpp"
#include "relush/config.hpp"
#include "relush/cost.hpp"
#include "relush/dataset.hpp"
#include "relush/fixed_engine.hpp"
#include "relush/grouping.hpp"
#include "relush/model.hpp"
#include "relush/mpc.hpp"
#include "relush/trainer.hpp"

using namespace relush;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitReconcile = 2;
constexpr int kExitInput = 3;
constexpr int kExitDiverged = 4;

struct CommonArgs {
  std::string config_path;
  std::string variant = "original";
  bool variant_given = false;
  std::string checkpoint_path;
  std::uint64_t seed = 0;
  bool seed_given = false;
  std::int64_t limit = 0;
  std::string out_dir = "relush-out";
};

std::string out_path(const CommonArgs& args, const std::string& file) {
  return (std::filesystem::path(args.out_dir) / file).string();
}

/// Timestamps are confined to this sidecar so every other artifact is
/// byte-reproducible under a fixed seed.
void write_meta_sidecar(const CommonArgs& args, const std::string& stem,
                        const nlohmann::json& extra) {
  nlohmann::json meta = extra;
  const auto now = std::chrono::system_clock::now();
  meta["written_at_unix_ms"] =
      std::chrono::duration_cast<std::chrono::milliseconds>(now.time_since_epoch())
          .count();
  write_file_atomic(out_path(args, stem + ".meta.json"), meta.dump(2));
}

NetworkConfig load_config(CommonArgs& args) {
  NetworkConfig cfg = load_network_config(args.config_path);
  if (args.seed_given) cfg.seed = args.seed;
  return cfg;
}

/// When a checkpoint is supplied without --variant, adopt the variant it was
/// trained with; an explicit mismatch is an error.
void adopt_checkpoint_variant(CommonArgs& args, const Checkpoint& ckpt) {
  const auto meta = nlohmann::json::parse(ckpt.meta_json, nullptr, false);
  if (meta.is_discarded() || !meta.contains("variant")) return;
  const std::string trained = meta["variant"].get<std::string>();
  if (!args.variant_given) {
    args.variant = trained;
  } else if (args.variant != trained) {
    throw FormatError("checkpoint was trained with variant '" + trained +
                      "' but --variant requests '" + args.variant + "'");
  }
}

mpc::SimParams sim_params(const ResolvedNetwork& net) {
  mpc::SimParams p;
  p.ring_bits = net.protocol.ring_bits;
  p.logp = net.protocol.logp;
  p.scale_bits = net.protocol.scale_bits;
  return p;
}

int cmd_train(CommonArgs& args, const std::string& init_path, bool quiet) {
  NetworkConfig cfg = load_config(args);
  const ResolvedNetwork net = resolve_network(cfg, args.variant);
  const DatasetPair data =
      load_dataset(net.dataset, net.base_dir, net.input.c, net.input.h,
                   net.input.w, /*classes=*/net.num_classes, args.limit);

  Model model(net, cfg.seed);
  std::string init_mode = "fresh";
  if (!init_path.empty()) {
    model.warm_start(Checkpoint::load(init_path));
    init_mode = "warm-start from " + init_path;
  }
  std::printf("training %s:%s on %" PRId64 " examples (%s)\n", cfg.name.c_str(),
              args.variant.c_str(), data.train.size(), init_mode.c_str());

  const TrainResult result =
      train_model(model, data, cfg.seed, quiet ? nullptr : &std::cout);

  const std::string stem = cfg.name + "_" + args.variant;
  Checkpoint ckpt = model.to_checkpoint();
  ckpt.save(out_path(args, stem + ".ckpt"));
  write_file_atomic(out_path(args, stem + "_metrics.csv"), metrics_to_csv(result));
  write_meta_sidecar(args, stem,
                     {{"command", "train"},
                      {"config", args.config_path},
                      {"variant", args.variant},
                      {"seed", cfg.seed},
                      {"init", init_mode}});
  std::printf("final test accuracy %.4f\n", result.final_test_accuracy);
  std::printf("wrote %s and %s\n", out_path(args, stem + ".ckpt").c_str(),
              out_path(args, stem + "_metrics.csv").c_str());
  return kExitOk;
}

int cmd_cluster(CommonArgs& args, int layer, int k, int window, int max_samples,
                const std::string& split, bool save_profiles) {
  if (split != "train") {
    std::fprintf(stderr,
                 "cluster maps are derived from the training split only; "
                 "refusing --split %s\n",
                 split.c_str());
    return kExitInput;
  }
  NetworkConfig cfg = load_config(args);
  const Checkpoint ckpt = Checkpoint::load(args.checkpoint_path);
  adopt_checkpoint_variant(args, ckpt);
  const ResolvedNetwork net = resolve_network(cfg, args.variant);
  Model model(net, cfg.seed);
  model.load_checkpoint(ckpt);

  if (layer < 0 || layer >= static_cast<int>(model.layers().size())) {
    throw FormatError("--layer " + std::to_string(layer) + " is out of range");
  }
  const Model::Layer& target = model.layers()[static_cast<std::size_t>(layer)];
  if (target.def.cfg.kind != "relu" || !target.def.in.spatial) {
    throw FormatError("layer " + std::to_string(layer) +
                      " is not a spatial activation layer");
  }
  if (target.has_gate()) {
    throw FormatError("layer " + std::to_string(layer) +
                      " was not trained with the standard activation; profile "
                      "a checkpoint of the original variant");
  }

  const DatasetPair data =
      load_dataset(net.dataset, net.base_dir, net.input.c, net.input.h,
                   net.input.w, net.num_classes, args.limit);
  std::printf("profiling layer %d over %" PRId64 " training examples\n", layer,
              std::min<std::int64_t>(data.train.size(), max_samples));
  const auto profiles =
      record_activation_profiles(model, data.train, layer, max_samples);

  LayerGateSpec spec;
  spec.channels = static_cast<int>(profiles.size());
  spec.shared_partition = false;
  const std::string stem = cfg.name + "_layer" + std::to_string(layer);
  for (std::size_t c = 0; c < profiles.size(); ++c) {
    GroupingSpec gs;
    if (window > 0) {
      gs = windowed_cluster(profiles[c], window, k);
    } else {
      const ClusterMap map = agglomerative_cluster(profiles[c], k);
      gs = grouping_from_cluster_map(map);
    }
    // per-channel artifacts
    ClusterMap map;
    map.height = gs.height;
    map.width = gs.width;
    map.k = gs.n_groups();
    map.labels.assign(static_cast<std::size_t>(gs.n_positions()), 0);
    for (int g = 0; g < gs.n_groups(); ++g) {
      for (int m : gs.groups[static_cast<std::size_t>(g)].members) {
        map.labels[static_cast<std::size_t>(m)] = g;
      }
    }
    char suffix[32];
    std::snprintf(suffix, sizeof(suffix), "_c%03zu", c);
    export_cluster_map(map, out_path(args, stem + suffix));
    if (save_profiles) {
      profiles[c].save(out_path(args, stem + suffix + "_profiles.bin"));
    }
    spec.per_channel.push_back(std::move(gs));
  }
  spec.validate();
  save_layer_gate_spec(spec, out_path(args, stem + "_grouping.json"));
  write_meta_sidecar(args, stem,
                     {{"command", "cluster"},
                      {"layer", layer},
                      {"k", k},
                      {"window", window},
                      {"max_samples", max_samples}});
  std::printf("wrote %s (%d channels)\n",
              out_path(args, stem + "_grouping.json").c_str(), spec.channels);
  std::printf("reference it from a variant override as {\"variant\": "
              "\"clustered\", \"grouping\": \"...\"}\n");
  return kExitOk;
}

int cmd_cost(CommonArgs& args, const std::string& compare) {
  NetworkConfig cfg = load_config(args);
  const ProtocolParams params{cfg.protocol.ring_bits, cfg.protocol.logp};

  auto report_for = [&](const std::string& variant) {
    Model model(resolve_network(cfg, variant), cfg.seed);
    return cost_network(model.descriptor(), params);
  };
  const CostReport report = report_for(args.variant);
  std::printf("%s\n", report.to_table().c_str());
  std::printf("total: %d rounds, %.2f MB\n", report.total_rounds,
              report.total_mb());

  const std::string stem = "cost_" + cfg.name + "_" + args.variant;
  write_file_atomic(out_path(args, stem + ".json"), report.to_json());
  write_file_atomic(out_path(args, stem + ".txt"), report.to_table());

  if (!compare.empty()) {
    const CostReport other = report_for(compare);
    const SavingsReport s = savings(report, other);
    std::printf("\n%s vs %s: rounds %+.2f%%, communication %+.2f%%\n",
                args.variant.c_str(), compare.c_str(), s.rounds_pct, s.comm_pct);
    nlohmann::json j;
    j["baseline"] = args.variant;
    j["candidate"] = compare;
    j["rounds_savings_pct"] = s.rounds_pct;
    j["comm_savings_pct"] = s.comm_pct;
    write_file_atomic(out_path(args, stem + "_vs_" + compare + ".json"), j.dump(2));
  }
  return kExitOk;
}

int cmd_count(CommonArgs& args) {
  NetworkConfig cfg = load_config(args);
  Model model(resolve_network(cfg, args.variant), cfg.seed);
  Model original(resolve_network(cfg, "original"), cfg.seed);

  std::string csv = "layer,label,n_drelu,n_mul,reduction_vs_original\n";
  std::printf("%-24s %12s %12s %12s\n", "layer", "n_drelu", "n_mul", "reduction");
  char buf[160];
  for (std::size_t i = 0; i < model.layers().size(); ++i) {
    const Model::Layer& layer = model.layers()[i];
    if (layer.def.cfg.kind != "relu") continue;
    const std::int64_t n_acts = layer.def.in.count();
    std::int64_t n_drelu = n_acts;
    if (layer.has_gate()) n_drelu = count_gate_ops(layer.gate_spec).n_drelu;
    const double reduction = static_cast<double>(n_acts) / static_cast<double>(n_drelu);
    const std::string label = "layer" + std::to_string(i) + "." +
                              layer.def.cfg.relu.variant;
    std::printf("%-24s %12" PRId64 " %12" PRId64 " %11.1fx\n", label.c_str(),
                n_drelu, n_acts, reduction);
    std::snprintf(buf, sizeof(buf), "%zu,%s,%" PRId64 ",%" PRId64 ",%.6g\n", i,
                  label.c_str(), n_drelu, n_acts, reduction);
    csv += buf;
  }
  write_file_atomic(out_path(args, "count_" + cfg.name + "_" + args.variant + ".csv"),
                    csv);
  return kExitOk;
}

int cmd_simulate(CommonArgs& args, int n_images, int n_random,
                 std::optional<std::uint64_t> noise_seed) {
  NetworkConfig cfg = load_config(args);
  std::optional<Checkpoint> ckpt;
  if (!args.checkpoint_path.empty()) {
    ckpt = Checkpoint::load(args.checkpoint_path);
    adopt_checkpoint_variant(args, *ckpt);
  }
  const ResolvedNetwork net = resolve_network(cfg, args.variant);
  Model model(net, cfg.seed);
  if (ckpt) {
    model.load_checkpoint(*ckpt);
  } else {
    std::printf("note: no checkpoint given, simulating with seed-%" PRIu64
                " initialized parameters\n",
                cfg.seed);
  }

  // inputs: dataset test images or seeded random images
  std::vector<std::vector<double>> inputs;
  if (n_images > 0) {
    const DatasetPair data =
        load_dataset(net.dataset, net.base_dir, net.input.c, net.input.h,
                     net.input.w, net.num_classes, args.limit);
    for (int i = 0; i < n_images; ++i) {
      const Tensor x = data.test.one(i % data.test.size());
      inputs.emplace_back(x.data().begin(), x.data().end());
    }
  } else {
    Rng rng(cfg.seed ^ 0xd1cefaceULL);
    for (int i = 0; i < std::max(1, n_random); ++i) {
      std::vector<double> x(static_cast<std::size_t>(net.input.count()));
      for (double& v : x) v = rng.uniform(0.0, 1.0);
      inputs.push_back(std::move(x));
    }
  }

  const mpc::SimParams params = sim_params(net);
  const FixedEngine engine(model, params.format());
  const CostReport predicted = cost_network(model.descriptor(),
                                            params.protocol());

  bool equivalence_ok = true;
  bool ledger_ok = true;
  std::vector<std::string> mismatch_notes;
  std::optional<mpc::SimResult> first;
  int rounds = -1;
  for (std::size_t i = 0; i < inputs.size(); ++i) {
    mpc::SimResult sim =
        mpc::sim_network(model, inputs[i], params, cfg.seed + i, noise_seed);
    const auto reference = engine.forward(
        inputs[i], noise_seed);
    if (sim.logits_ring != reference) equivalence_ok = false;
    const mpc::ReconcileResult rec = mpc::reconcile(sim.log, predicted);
    if (!rec.ok) {
      ledger_ok = false;
      mismatch_notes.insert(mismatch_notes.end(), rec.mismatches.begin(),
                            rec.mismatches.end());
    }
    if (rounds < 0) rounds = sim.rounds;
    if (sim.rounds != rounds) ledger_ok = false;  // protocol is input-independent
    if (!first) first = std::move(sim);
  }

  std::printf("simulated %zu image(s) of %s:%s\n", inputs.size(),
              cfg.name.c_str(), args.variant.c_str());
  std::printf("rounds: %d, communication: %.2f MB (%s)\n", first->rounds,
              static_cast<double>(first->log.total_bits()) / 8.0 / 1e6,
              cfg.name.c_str());
  std::printf("logits[0]:");
  for (double l : first->logits) std::printf(" %.5f", l);
  int argmax = 0;
  for (std::size_t c = 1; c < first->logits.size(); ++c) {
    if (first->logits[c] > first->logits[static_cast<std::size_t>(argmax)]) {
      argmax = static_cast<int>(c);
    }
  }
  std::printf("  -> class %d\n", argmax);
  std::printf("%s plaintext fixed-point equivalence\n",
              equivalence_ok ? "PASS" : "FAIL");
  std::printf("%s ledger matches the analytical cost model\n",
              ledger_ok ? "PASS" : "FAIL");
  for (const std::string& note : mismatch_notes) {
    std::printf("  %s\n", note.c_str());
  }

  const std::string stem = "sim_" + cfg.name + "_" + args.variant;
  write_file_atomic(out_path(args, stem + "_ledger.csv"), first->log.to_csv());
  write_file_atomic(out_path(args, stem + "_summary.json"),
                    first->log.summary_json());
  write_meta_sidecar(args, stem,
                     {{"command", "simulate"},
                      {"images", inputs.size()},
                      {"checkpoint", args.checkpoint_path}});
  return equivalence_ok && ledger_ok ? kExitOk : kExitReconcile;
}

int cmd_tv(CommonArgs& args) {
  NetworkConfig cfg = load_config(args);
  const Checkpoint ckpt = Checkpoint::load(args.checkpoint_path);
  adopt_checkpoint_variant(args, ckpt);
  const ResolvedNetwork net = resolve_network(cfg, args.variant);
  Model model(net, cfg.seed);
  model.load_checkpoint(ckpt);

  const DatasetPair data =
      load_dataset(net.dataset, net.base_dir, net.input.c, net.input.h,
                   net.input.w, net.num_classes, args.limit);
  const auto rows = total_variation(model, data.test, args.limit);
  std::printf("%-24s %14s\n", "layer", "total variation");
  for (const TvRow& r : rows) {
    std::printf("%-24s %14.4f\n", r.label.c_str(), r.tv);
  }
  const std::string stem = "tv_" + cfg.name + "_" + args.variant;
  write_file_atomic(out_path(args, stem + ".csv"), tv_to_csv(rows));
  std::printf("wrote %s\n", out_path(args, stem + ".csv").c_str());
  return kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"shared-gate network training, cost analysis, and secure-"
               "inference simulation"};
  app.require_subcommand(1);

  CommonArgs args;
  auto add_common = [&](CLI::App* cmd, bool with_checkpoint) {
    cmd->add_option("--config", args.config_path, "network config JSON")
        ->required();
    cmd->add_option("--variant", args.variant, "config variant name")
        ->each([&](const std::string&) { args.variant_given = true; });
    cmd->add_option("--seed", args.seed, "override the config seed")
        ->each([&](const std::string&) { args.seed_given = true; });
    cmd->add_option("--limit", args.limit, "cap the dataset size");
    cmd->add_option("--out", args.out_dir, "output directory");
    if (with_checkpoint) {
      cmd->add_option("--checkpoint", args.checkpoint_path, "model checkpoint");
    }
  };

  // train
  std::string init_path;
  bool quiet = false;
  CLI::App* train = app.add_subcommand("train", "train a variant");
  add_common(train, false);
  train->add_option("--init", init_path, "warm-start checkpoint");
  train->add_flag("--quiet", quiet, "suppress per-epoch progress");

  // cluster
  int layer = -1, k_clusters = 0, window = 0, max_samples = 10000;
  std::string split = "train";
  bool save_profiles = false;
  CLI::App* cluster = app.add_subcommand(
      "cluster", "build data-dependent gate groups from activation profiles");
  add_common(cluster, true);
  cluster->add_option("--layer", layer, "activation layer index")->required();
  cluster->add_option("--k", k_clusters, "clusters (per window if --window)")
      ->required();
  cluster->add_option("--window", window, "cluster inside non-overlapping windows");
  cluster->add_option("--max-samples", max_samples, "profile sample cap");
  cluster->add_option("--split", split, "dataset split (train only)");
  cluster->add_flag("--save-profiles", save_profiles,
                    "persist packed activation profiles");

  // cost
  std::string compare;
  CLI::App* cost = app.add_subcommand("cost", "analytical rounds + bandwidth");
  add_common(cost, false);
  cost->add_option("--compare", compare, "second variant for savings");

  // count
  CLI::App* count = app.add_subcommand("count", "per-layer gate op counts");
  add_common(count, false);

  // simulate
  int n_images = 0, n_random = 1;
  std::optional<std::uint64_t> noise_seed;
  CLI::App* simulate = app.add_subcommand(
      "simulate", "3-party secure inference with byte accounting");
  add_common(simulate, true);
  simulate->add_option("--n-images", n_images, "simulate dataset test images");
  simulate->add_option("--random", n_random, "simulate seeded random images");
  std::uint64_t noise_seed_value = 0;
  CLI::Option* ns = simulate->add_option("--noise-seed", noise_seed_value,
                                         "enable inference-time gate noise");

  // tv
  CLI::App* tv = app.add_subcommand("tv", "per-layer activation total variation");
  add_common(tv, true);

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return kExitInput;
  }

  try {
    if (train->parsed()) return cmd_train(args, init_path, quiet);
    if (cluster->parsed()) {
      return cmd_cluster(args, layer, k_clusters, window, max_samples, split,
                         save_profiles);
    }
    if (cost->parsed()) return cmd_cost(args, compare);
    if (count->parsed()) return cmd_count(args);
    if (simulate->parsed()) {
      if (ns->count() > 0) noise_seed = noise_seed_value;
      return cmd_simulate(args, n_images, n_random, noise_seed);
    }
    if (tv->parsed()) return cmd_tv(args);
  } catch (const DivergenceError& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return kExitDiverged;
  } catch (const Error& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return kExitInput;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return kExitInput;
  }
  return kExitOk;
}
