#include "relush/cost.hpp"

#include <cinttypes>
#include <cstdio>

#include "json.hpp"

namespace relush {

namespace {

void require_positive(std::int64_t value, const char* what) {
  if (value <= 0) {
    throw DimensionError(std::string(what) + " must be positive, got " +
                         std::to_string(value));
  }
}

}  // namespace

OpCost cost_linear(std::int64_t m, std::int64_t n, std::int64_t v,
                   const ProtocolParams& params) {
  params.validate();
  require_positive(m, "linear m");
  require_positive(n, "linear n");
  require_positive(v, "linear v");
  return {2, (2 * m * n + 2 * n * v + m * v) * params.ring_bits};
}

OpCost cost_conv(std::int64_t m, std::int64_t i, std::int64_t f,
                 std::int64_t o, const ProtocolParams& params) {
  params.validate();
  require_positive(m, "conv m");
  require_positive(i, "conv i");
  require_positive(f, "conv f");
  require_positive(o, "conv o");
  const std::int64_t m2 = m * m, f2 = f * f;
  return {2, (2 * m2 * f2 * i + 2 * f2 * o * i + m2 * o) * params.ring_bits};
}

OpCost cost_drelu(const ProtocolParams& params) {
  params.validate();
  return {8, (8 * static_cast<std::int64_t>(params.logp) + 19) * params.ring_bits};
}

OpCost cost_mul(const ProtocolParams& params) {
  params.validate();
  return {2, 5 * static_cast<std::int64_t>(params.ring_bits)};
}

OpCost cost_relu_layer(std::int64_t n_activations, std::int64_t n_groups,
                       const ProtocolParams& params) {
  params.validate();
  require_positive(n_activations, "relu layer activation count");
  require_positive(n_groups, "relu layer group count");
  if (n_groups > n_activations) {
    throw DimensionError("relu layer has more groups (" +
                         std::to_string(n_groups) + ") than activations (" +
                         std::to_string(n_activations) + ")");
  }
  return {10, n_groups * cost_drelu(params).comm_bits +
                  n_activations * cost_mul(params).comm_bits};
}

LayerDescriptor LayerDescriptor::conv2d(std::string label, std::int64_t m,
                                        std::int64_t i, std::int64_t f,
                                        std::int64_t o) {
  LayerDescriptor d;
  d.kind = CostLayerKind::conv;
  d.label = std::move(label);
  d.m = m;
  d.i = i;
  d.f = f;
  d.o = o;
  return d;
}

LayerDescriptor LayerDescriptor::linear(std::string label, std::int64_t m,
                                        std::int64_t n, std::int64_t v) {
  LayerDescriptor d;
  d.kind = CostLayerKind::linear;
  d.label = std::move(label);
  d.m = m;
  d.n = n;
  d.v = v;
  return d;
}

LayerDescriptor LayerDescriptor::avgpool(std::string label) {
  LayerDescriptor d;
  d.kind = CostLayerKind::avgpool;
  d.label = std::move(label);
  return d;
}

LayerDescriptor LayerDescriptor::relu_layer(std::string label,
                                            std::int64_t n_activations,
                                            std::int64_t n_groups,
                                            bool shared_gate) {
  LayerDescriptor d;
  d.kind = n_groups == n_activations ? CostLayerKind::relu : CostLayerKind::grelu;
  d.label = std::move(label);
  d.n_activations = n_activations;
  d.n_groups = n_groups;
  d.shared_gate = shared_gate;
  return d;
}

std::string cost_layer_kind_name(CostLayerKind k) {
  switch (k) {
    case CostLayerKind::conv: return "conv";
    case CostLayerKind::linear: return "linear";
    case CostLayerKind::avgpool: return "avgpool";
    case CostLayerKind::relu: return "relu";
    case CostLayerKind::grelu: return "grelu";
  }
  throw Error("unknown cost layer kind");
}

CostReport cost_network(const NetworkDescriptor& net,
                        const ProtocolParams& params) {
  params.validate();
  CostReport report;
  report.name = net.name;
  report.ring_bits = params.ring_bits;
  report.comm_bits_by_tag = {{"conv", 0}, {"linear", 0}, {"drelu", 0}, {"mul", 0}};
  for (const LayerDescriptor& d : net.layers) {
    CostReport::Line line;
    line.label = d.label;
    line.kind = d.kind;
    switch (d.kind) {
      case CostLayerKind::conv: {
        const OpCost c = cost_conv(d.m, d.i, d.f, d.o, params);
        line.rounds = c.rounds;
        line.comm_bits = c.comm_bits;
        report.comm_bits_by_tag["conv"] += c.comm_bits;
        break;
      }
      case CostLayerKind::linear: {
        const OpCost c = cost_linear(d.m, d.n, d.v, params);
        line.rounds = c.rounds;
        line.comm_bits = c.comm_bits;
        report.comm_bits_by_tag["linear"] += c.comm_bits;
        break;
      }
      case CostLayerKind::avgpool:
        // public-constant linear map, evaluated locally on shares
        line.rounds = 0;
        line.comm_bits = 0;
        break;
      case CostLayerKind::relu:
      case CostLayerKind::grelu: {
        const OpCost c = cost_relu_layer(d.n_activations, d.n_groups, params);
        line.rounds = c.rounds;
        line.comm_bits = c.comm_bits;
        report.comm_bits_by_tag["drelu"] +=
            d.n_groups * cost_drelu(params).comm_bits;
        report.comm_bits_by_tag["mul"] +=
            d.n_activations * cost_mul(params).comm_bits;
        if (d.shared_gate) {
          // per-group dot products of shared gate weights, Beaver-priced
          const std::int64_t gate_bits =
              (4 * d.n_activations + d.n_groups) * params.ring_bits;
          line.rounds += 2;
          line.comm_bits += gate_bits;
          report.comm_bits_by_tag["linear"] += gate_bits;
        }
        break;
      }
    }
    report.total_rounds += line.rounds;
    report.total_comm_bits += line.comm_bits;
    report.lines.push_back(std::move(line));
  }
  return report;
}

SavingsReport savings(const CostReport& a, const CostReport& b) {
  if (a.total_rounds == 0 || a.total_comm_bits == 0) {
    throw Error("savings baseline has zero rounds or communication");
  }
  SavingsReport s;
  s.rounds_pct = (1.0 - static_cast<double>(b.total_rounds) / a.total_rounds) * 100.0;
  s.comm_pct =
      (1.0 - static_cast<double>(b.total_comm_bits) / a.total_comm_bits) * 100.0;
  return s;
}

std::string CostReport::to_table() const {
  std::string out;
  char buf[160];
  std::snprintf(buf, sizeof(buf), "%-24s %-8s %7s %14s %10s\n", "layer", "kind",
                "rounds", "comm(bits)", "comm(MB)");
  out += buf;
  out += std::string(66, '-') + "\n";
  for (const Line& l : lines) {
    std::snprintf(buf, sizeof(buf), "%-24s %-8s %7d %14" PRId64 " %10.4f\n",
                  l.label.c_str(), cost_layer_kind_name(l.kind).c_str(),
                  l.rounds, l.comm_bits, mb(l.comm_bits));
    out += buf;
  }
  out += std::string(66, '-') + "\n";
  std::snprintf(buf, sizeof(buf), "%-24s %-8s %7d %14" PRId64 " %10.4f\n",
                "total", "", total_rounds, total_comm_bits, total_mb());
  out += buf;
  return out;
}

std::string CostReport::to_json() const {
  nlohmann::json j;
  j["name"] = name;
  j["ring_bits"] = ring_bits;
  j["total_rounds"] = total_rounds;
  j["total_comm_bits"] = total_comm_bits;
  j["total_comm_mb"] = total_mb();
  nlohmann::json layers = nlohmann::json::array();
  for (const Line& l : lines) {
    layers.push_back({{"label", l.label},
                      {"kind", cost_layer_kind_name(l.kind)},
                      {"rounds", l.rounds},
                      {"comm_bits", l.comm_bits},
                      {"comm_mb", mb(l.comm_bits)}});
  }
  j["layers"] = std::move(layers);
  nlohmann::json tags;
  for (const auto& [tag, bits] : comm_bits_by_tag) tags[tag] = bits;
  j["comm_bits_by_tag"] = std::move(tags);
  return j.dump(2);
}

}  // namespace relush
