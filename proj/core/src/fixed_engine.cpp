#include "relush/fixed_engine.hpp"

#include <algorithm>
#include <cmath>

namespace relush {

namespace {

std::vector<std::uint64_t> encode_span(std::span<const double> values,
                                       int scale_bits,
                                       const FixedPointFormat& fmt,
                                       const std::string& what) {
  std::vector<std::uint64_t> out(values.size());
  FixedPointFormat f = fmt;
  f.scale_bits = scale_bits;
  for (std::size_t i = 0; i < values.size(); ++i) {
    try {
      out[i] = fixed_encode(values[i], f);
    } catch (const OverflowError& e) {
      throw OverflowError(what + "[" + std::to_string(i) + "]: " + e.what());
    }
  }
  return out;
}

}  // namespace

void inference_flip_mask(std::uint64_t seed, int layer_index, int channel,
                         int positions, double p_keep,
                         std::vector<std::uint8_t>& mask) {
  mask.assign(static_cast<std::size_t>(positions), 0);
  Rng rng(seed ^ (0x7c83a1d20b5f9e11ULL +
                  0x9e3779b97f4a7c15ULL *
                      (static_cast<std::uint64_t>(layer_index) * 0x2001ULL +
                       static_cast<std::uint64_t>(channel))));
  for (int p = 0; p < positions; ++p) {
    mask[static_cast<std::size_t>(p)] = rng.u01() >= p_keep ? 1 : 0;
  }
}

FixedEngine::FixedEngine(const Model& model, FixedPointFormat fmt)
    : model_(&model), fmt_(fmt) {
  fmt_.ring().validate();
  if (fmt_.scale_bits * 2 >= fmt_.ring_bits) {
    throw Error("scale_bits too large for ring width");
  }
  for (const Model::Layer& layer : model.layers()) {
    LayerParams p;
    if (layer.weight.defined()) {
      p.weight = encode_span(layer.weight.data(), fmt_.scale_bits, fmt_,
                             "weight");
      // bias joins the un-truncated accumulator, so it carries double scale
      p.bias = encode_span(layer.bias.data(), 2 * fmt_.scale_bits, fmt_, "bias");
    }
    if (layer.has_gate()) {
      LayerGateSpec spec = layer.gate_spec;
      store_gate_weights(spec, layer.gate_weights);
      for (const GroupingSpec& gs : spec.per_channel) {
        std::vector<double> flat;
        for (const GateGroup& g : gs.groups) {
          flat.insert(flat.end(), g.weights.begin(), g.weights.end());
        }
        p.gate_weights.push_back(
            encode_span(flat, fmt_.scale_bits, fmt_, "gate"));
      }
    }
    params_.push_back(std::move(p));
  }
}

std::vector<std::uint64_t> FixedEngine::forward(
    std::span<const double> input, std::optional<std::uint64_t> noise_seed) const {
  const RingParams ring = fmt_.ring();
  const double acc_limit =
      std::ldexp(1.0, fmt_.ring_bits - 1 - 2 * fmt_.scale_bits);

  const auto& net = model_->net();
  if (static_cast<std::int64_t>(input.size()) != net.input.count()) {
    throw DimensionError("input length does not match the network");
  }
  std::vector<std::uint64_t> cur =
      encode_span(input, fmt_.scale_bits, fmt_, "input");
  std::vector<double> cur_real(input.begin(), input.end());

  auto overflow = [&](std::size_t li, std::size_t el, double value) {
    throw OverflowError("layer " + std::to_string(li) + " element " +
                        std::to_string(el) + ": accumulator " +
                        std::to_string(value) +
                        " exceeds the fixed-point range");
  };

  std::vector<std::uint8_t> flip;
  for (std::size_t li = 0; li < model_->layers().size(); ++li) {
    const Model::Layer& layer = model_->layers()[li];
    const LayerParams& p = params_[li];
    const LayerCfg& cfg = layer.def.cfg;
    const TensorShape in = layer.def.in;
    const TensorShape out = layer.def.out;

    if (cfg.kind == "conv") {
      const int ci = in.c, h = in.h, w = in.w;
      const int co = cfg.out_channels, f = cfg.kernel;
      const int oh = out.h, ow = out.w;
      std::vector<std::uint64_t> next(static_cast<std::size_t>(co) * oh * ow);
      std::vector<double> next_real(next.size());
      auto wv = layer.weight.data();
      auto bv = layer.bias.data();
      for (int oc = 0; oc < co; ++oc) {
        for (int oy = 0; oy < oh; ++oy) {
          for (int ox = 0; ox < ow; ++ox) {
            std::uint64_t acc = p.bias[static_cast<std::size_t>(oc)];
            double acc_real = bv[static_cast<std::size_t>(oc)];
            for (int ic = 0; ic < ci; ++ic) {
              for (int ky = 0; ky < f; ++ky) {
                const int iy = oy * cfg.stride + ky - cfg.padding;
                if (iy < 0 || iy >= h) continue;
                for (int kx = 0; kx < f; ++kx) {
                  const int ix = ox * cfg.stride + kx - cfg.padding;
                  if (ix < 0 || ix >= w) continue;
                  const std::size_t xi =
                      (static_cast<std::size_t>(ic) * h + iy) * w + ix;
                  const std::size_t wi =
                      ((static_cast<std::size_t>(oc) * ci + ic) * f + ky) * f +
                      kx;
                  acc = ring_add(acc, ring_mul(cur[xi], p.weight[wi], ring), ring);
                  acc_real += cur_real[xi] * wv[wi];
                }
              }
            }
            const std::size_t oi =
                (static_cast<std::size_t>(oc) * oh + oy) * ow + ox;
            if (std::abs(acc_real) >= acc_limit) overflow(li, oi, acc_real);
            next[oi] = ring_arith_shift_right(acc, fmt_.scale_bits, ring);
            next_real[oi] = acc_real;
          }
        }
      }
      cur = std::move(next);
      cur_real = std::move(next_real);
    } else if (cfg.kind == "linear") {
      const std::int64_t n = in.count();
      const int v = cfg.out_features;
      std::vector<std::uint64_t> next(static_cast<std::size_t>(v));
      std::vector<double> next_real(next.size());
      auto wv = layer.weight.data();
      auto bv = layer.bias.data();
      for (int c = 0; c < v; ++c) {
        std::uint64_t acc = p.bias[static_cast<std::size_t>(c)];
        double acc_real = bv[static_cast<std::size_t>(c)];
        for (std::int64_t k = 0; k < n; ++k) {
          const std::size_t wi = static_cast<std::size_t>(k) * v + c;
          acc = ring_add(acc,
                         ring_mul(cur[static_cast<std::size_t>(k)], p.weight[wi], ring),
                         ring);
          acc_real += cur_real[static_cast<std::size_t>(k)] * wv[wi];
        }
        if (std::abs(acc_real) >= acc_limit) overflow(li, static_cast<std::size_t>(c), acc_real);
        next[static_cast<std::size_t>(c)] =
            ring_arith_shift_right(acc, fmt_.scale_bits, ring);
        next_real[static_cast<std::size_t>(c)] = acc_real;
      }
      cur = std::move(next);
      cur_real = std::move(next_real);
    } else if (cfg.kind == "avgpool") {
      const int c = in.c, h = in.h, w = in.w;
      const int k = cfg.kernel, stride = cfg.stride;
      const int oh = out.h, ow = out.w;
      const std::uint64_t inv =
          fixed_encode_at(1.0 / (static_cast<double>(k) * k), fmt_.scale_bits, fmt_);
      const double inv_real = 1.0 / (static_cast<double>(k) * k);
      std::vector<std::uint64_t> next(static_cast<std::size_t>(c) * oh * ow);
      std::vector<double> next_real(next.size());
      for (int ch = 0; ch < c; ++ch) {
        for (int oy = 0; oy < oh; ++oy) {
          for (int ox = 0; ox < ow; ++ox) {
            std::uint64_t acc = 0;
            double acc_real = 0.0;
            for (int ky = 0; ky < k; ++ky) {
              for (int kx = 0; kx < k; ++kx) {
                const std::size_t xi =
                    (static_cast<std::size_t>(ch) * h + oy * stride + ky) * w +
                    ox * stride + kx;
                acc = ring_add(acc, cur[xi], ring);
                acc_real += cur_real[xi];
              }
            }
            // scale by the public 1/k^2 constant, then drop the extra scale
            acc = ring_mul(acc, inv, ring);
            const std::size_t oi =
                (static_cast<std::size_t>(ch) * oh + oy) * ow + ox;
            next[oi] = ring_arith_shift_right(acc, fmt_.scale_bits, ring);
            next_real[oi] = acc_real * inv_real;
          }
        }
      }
      cur = std::move(next);
      cur_real = std::move(next_real);
    } else {  // relu
      if (!layer.has_gate()) {
        for (std::size_t i = 0; i < cur.size(); ++i) {
          const bool keep = !ring_is_negative(cur[i], ring);
          if (!keep) cur[i] = 0;
          cur_real[i] = keep ? cur_real[i] : 0.0;
        }
      } else {
        const int channels = in.c;
        const std::int64_t plane = static_cast<std::int64_t>(in.h) * in.w;
        const bool noisy = cfg.relu.noise > 0.0 && cfg.relu.noise_at_inference &&
                           noise_seed.has_value();
        for (int ch = 0; ch < channels; ++ch) {
          const GroupingSpec& gs =
              layer.gate_spec.per_channel[static_cast<std::size_t>(ch)];
          const std::vector<std::uint64_t>& gw =
              p.gate_weights[static_cast<std::size_t>(ch)];
          std::uint64_t* splane = cur.data() + static_cast<std::size_t>(ch) * plane;
          double* rplane = cur_real.data() + static_cast<std::size_t>(ch) * plane;
          if (noisy) {
            inference_flip_mask(*noise_seed, static_cast<int>(li), ch,
                                static_cast<int>(plane), 1.0 - cfg.relu.noise,
                                flip);
          }
          std::size_t wi = 0;
          for (const GateGroup& g : gs.groups) {
            std::uint64_t pre = 0;
            double pre_real = 0.0;
            for (std::size_t j = 0; j < g.members.size(); ++j, ++wi) {
              pre = ring_add(pre, ring_mul(splane[g.members[j]], gw[wi], ring), ring);
              pre_real += rplane[g.members[j]] *
                          fixed_decode(gw[wi], fmt_);
            }
            if (std::abs(pre_real) >= acc_limit) overflow(li, wi, pre_real);
            const bool bit = !ring_is_negative(pre, ring);
            for (int m : g.members) {
              bool eff = bit;
              // public flip coins complement the shared gate bit
              if (noisy && flip[static_cast<std::size_t>(m)]) eff = !eff;
              if (!eff) {
                splane[m] = 0;
                rplane[m] = 0.0;
              }
            }
          }
        }
      }
    }
  }
  return cur;
}

std::vector<double> FixedEngine::forward_real(
    std::span<const double> input, std::optional<std::uint64_t> noise_seed) const {
  const auto logits = forward(input, noise_seed);
  std::vector<double> out(logits.size());
  for (std::size_t i = 0; i < logits.size(); ++i) {
    out[i] = fixed_decode(logits[i], fmt_);
  }
  return out;
}

}  // namespace relush
