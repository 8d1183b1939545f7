#include "relush/mpc.hpp"

#include <algorithm>
#include <cinttypes>
#include <cstdio>

#include "json.hpp"
#include "relush/fixed_engine.hpp"

namespace relush::mpc {

namespace {

/// C = A (m x n) * B (n x v) over the ring.
std::vector<std::uint64_t> ring_matmul(const std::vector<std::uint64_t>& a,
                                       const std::vector<std::uint64_t>& b,
                                       std::int64_t m, std::int64_t n,
                                       std::int64_t v, const RingParams& ring) {
  std::vector<std::uint64_t> c(static_cast<std::size_t>(m) * v, 0);
  for (std::int64_t r = 0; r < m; ++r) {
    for (std::int64_t k = 0; k < n; ++k) {
      const std::uint64_t av = a[static_cast<std::size_t>(r) * n + k];
      if (av == 0) continue;
      const std::uint64_t* brow = b.data() + static_cast<std::size_t>(k) * v;
      std::uint64_t* crow = c.data() + static_cast<std::size_t>(r) * v;
      for (std::int64_t col = 0; col < v; ++col) {
        crow[col] += av * brow[col];
      }
    }
  }
  const std::uint64_t mask = ring.mask();
  for (std::uint64_t& x : c) x &= mask;
  return c;
}

std::vector<std::uint64_t> ring_sub_vec(const std::vector<std::uint64_t>& a,
                                        const std::vector<std::uint64_t>& b,
                                        const RingParams& ring) {
  std::vector<std::uint64_t> out(a.size());
  for (std::size_t i = 0; i < a.size(); ++i) out[i] = ring_sub(a[i], b[i], ring);
  return out;
}

std::vector<std::uint64_t> ring_add_vec(const std::vector<std::uint64_t>& a,
                                        const std::vector<std::uint64_t>& b,
                                        const RingParams& ring) {
  std::vector<std::uint64_t> out(a.size());
  for (std::size_t i = 0; i < a.size(); ++i) out[i] = ring_add(a[i], b[i], ring);
  return out;
}

std::vector<std::uint64_t> concat(const std::vector<std::uint64_t>& a,
                                  const std::vector<std::uint64_t>& b) {
  std::vector<std::uint64_t> out;
  out.reserve(a.size() + b.size());
  out.insert(out.end(), a.begin(), a.end());
  out.insert(out.end(), b.begin(), b.end());
  return out;
}

}  // namespace

void SimParams::validate() const {
  if (ring_bits < 8 || ring_bits > 64 || ring_bits % 8 != 0) {
    throw Error("simulator ring width must be a multiple of 8 in [8, 64]");
  }
  if (logp < 1) throw Error("logp must be >= 1");
  if (scale_bits < 1 || 2 * scale_bits >= ring_bits) {
    throw Error("scale_bits must satisfy 2*scale_bits < ring_bits");
  }
}

void MessageLog::add(int round, int sender, int receiver, std::uint64_t bits,
                     const std::string& tag) {
  if (round < max_round_) {
    throw Error("message log round index regressed");
  }
  max_round_ = std::max(max_round_, round);
  records_.push_back(MessageRecord{round, static_cast<std::uint8_t>(sender),
                                   static_cast<std::uint8_t>(receiver), bits,
                                   tag});
  bits_by_tag_[tag] += bits;
  total_bits_ += bits;
}

std::string MessageLog::to_csv() const {
  std::string out = "round,sender,receiver,bytes,tag\n";
  char buf[96];
  for (const MessageRecord& r : records_) {
    std::snprintf(buf, sizeof(buf), "%d,%d,%d,%" PRIu64 ",%s\n", r.round,
                  r.sender, r.receiver, r.bits / 8, r.tag.c_str());
    out += buf;
  }
  return out;
}

std::string MessageLog::summary_json() const {
  nlohmann::json j;
  j["rounds"] = max_round_;
  j["total_bits"] = total_bits_;
  j["total_bytes"] = total_bits_ / 8;
  j["total_mb"] = static_cast<double>(total_bits_) / 8.0 / 1e6;
  nlohmann::json tags;
  for (const auto& [tag, bits] : bits_by_tag_) {
    tags[tag] = {{"bits", bits}, {"bytes", bits / 8}};
  }
  j["by_tag"] = std::move(tags);
  j["messages"] = records_.size();
  return j.dump(2);
}

SimContext::SimContext(SimParams params, std::uint64_t master_seed)
    : params_(params),
      ring_{params.ring_bits},
      prf02_(0),
      prf12_(0),
      share_rng_(0) {
  params_.validate();
  Rng root(master_seed);
  prf02_ = root.split(0x02);
  prf12_ = root.split(0x12);
  share_rng_ = root.split(0x99);
}

std::vector<std::uint64_t> SimContext::prf_vec(Rng& prf, std::size_t n) {
  std::vector<std::uint64_t> out(n);
  for (std::uint64_t& v : out) v = prf.next_u64() & ring_.mask();
  return out;
}

ShareVec SimContext::share(std::span<const std::uint64_t> secrets) {
  ShareVec t;
  t.s0.resize(secrets.size());
  t.s1.resize(secrets.size());
  for (std::size_t i = 0; i < secrets.size(); ++i) {
    t.s0[i] = share_rng_.next_u64() & ring_.mask();
    t.s1[i] = ring_sub(secrets[i] & ring_.mask(), t.s0[i], ring_);
  }
  return t;
}

std::vector<std::uint64_t> SimContext::reconstruct(const ShareVec& t) const {
  std::vector<std::uint64_t> out(t.size());
  for (std::size_t i = 0; i < t.size(); ++i) {
    out[i] = ring_add(t.s0[i], t.s1[i], ring_);
  }
  return out;
}

void SimContext::add_inplace(ShareVec& a, const ShareVec& b) const {
  for (std::size_t i = 0; i < a.size(); ++i) {
    a.s0[i] = ring_add(a.s0[i], b.s0[i], ring_);
    a.s1[i] = ring_add(a.s1[i], b.s1[i], ring_);
  }
}

void SimContext::add_public_inplace(ShareVec& a,
                                    std::span<const std::uint64_t> c) const {
  for (std::size_t i = 0; i < a.size(); ++i) {
    a.s0[i] = ring_add(a.s0[i], c[i], ring_);
  }
}

ShareVec SimContext::scale_by_public(const ShareVec& a, std::uint64_t c) const {
  ShareVec out = a;
  for (std::size_t i = 0; i < a.size(); ++i) {
    out.s0[i] = ring_mul(a.s0[i], c, ring_);
    out.s1[i] = ring_mul(a.s1[i], c, ring_);
  }
  return out;
}

void SimContext::send_logged(Party from, Party to,
                             std::vector<std::uint64_t> payload,
                             const char* tag) {
  log_.add(round_, from, to,
           static_cast<std::uint64_t>(payload.size()) * params_.ring_bits, tag);
  if ((from == P0 || to == P0) && !payload.empty()) {
    p0_transcript_.push_back(payload.front());
  }
  mail_[from][to].push_back(std::move(payload));
}

void SimContext::send_raw(Party from, Party to,
                          std::vector<std::uint64_t> payload) {
  if ((from == P0 || to == P0) && !payload.empty()) {
    p0_transcript_.push_back(payload.front());
  }
  mail_[from][to].push_back(std::move(payload));
}

void SimContext::account(Party from, Party to, std::uint64_t elements,
                         const char* tag) {
  log_.add(round_, from, to, elements * params_.ring_bits, tag);
}

std::vector<std::uint64_t> SimContext::recv(Party from, Party to) {
  auto& q = mail_[from][to];
  if (q.empty()) throw Error("mailbox underflow: no pending message");
  std::vector<std::uint64_t> payload = std::move(q.front());
  q.pop_front();
  return payload;
}

ShareVec SimContext::mul(const ShareVec& a, const ShareVec& b) {
  if (a.size() != b.size()) throw DimensionError("mul share size mismatch");
  const std::size_t n = a.size();
  // Beaver masks from the pairwise PRF streams (no communication)
  const auto a0 = prf_vec(prf02_, n), b0 = prf_vec(prf02_, n);
  const auto a1 = prf_vec(prf12_, n), b1 = prf_vec(prf12_, n);

  begin_round();
  send_logged(P0, P1, concat(ring_sub_vec(a.s0, a0, ring_), ring_sub_vec(b.s0, b0, ring_)), "mul");
  send_logged(P1, P0, concat(ring_sub_vec(a.s1, a1, ring_), ring_sub_vec(b.s1, b1, ring_)), "mul");
  const auto from0 = recv(P0, P1);
  const auto from1 = recv(P1, P0);
  std::vector<std::uint64_t> e(n), f(n);
  for (std::size_t i = 0; i < n; ++i) {
    e[i] = ring_add(from0[i], from1[i], ring_);
    f[i] = ring_add(from0[n + i], from1[n + i], ring_);
  }

  begin_round();
  // P2 reshares the product of the masks; P1's share comes from the PRF
  const auto c1 = prf_vec(prf12_, n);
  std::vector<std::uint64_t> c0(n);
  for (std::size_t i = 0; i < n; ++i) {
    const std::uint64_t prod =
        ring_mul(ring_add(a0[i], a1[i], ring_), ring_add(b0[i], b1[i], ring_), ring_);
    c0[i] = ring_sub(prod, c1[i], ring_);
  }
  send_logged(P2, P0, std::move(c0), "mul");
  const auto c0_recv = recv(P2, P0);

  ShareVec z = ShareVec::zeros(n);
  for (std::size_t i = 0; i < n; ++i) {
    const std::uint64_t ef = ring_mul(e[i], f[i], ring_);
    z.s0[i] = ring_add(
        ring_add(ef, ring_mul(e[i], b0[i], ring_), ring_),
        ring_add(ring_mul(a0[i], f[i], ring_), c0_recv[i], ring_), ring_);
    z.s1[i] = ring_add(ring_mul(e[i], b1[i], ring_),
                       ring_add(ring_mul(a1[i], f[i], ring_), c1[i], ring_), ring_);
  }
  return z;
}

ShareVec SimContext::matmul(const ShareVec& X, std::int64_t m, std::int64_t n,
                            const ShareVec& W, std::int64_t v, const char* tag) {
  if (X.size() != static_cast<std::size_t>(m * n) ||
      W.size() != static_cast<std::size_t>(n * v)) {
    throw DimensionError("matmul share dimensions disagree");
  }
  const auto a0 = prf_vec(prf02_, X.size()), b0 = prf_vec(prf02_, W.size());
  const auto a1 = prf_vec(prf12_, X.size()), b1 = prf_vec(prf12_, W.size());

  begin_round();
  send_logged(P0, P1, concat(ring_sub_vec(X.s0, a0, ring_), ring_sub_vec(W.s0, b0, ring_)), tag);
  send_logged(P1, P0, concat(ring_sub_vec(X.s1, a1, ring_), ring_sub_vec(W.s1, b1, ring_)), tag);
  const auto from0 = recv(P0, P1);
  const auto from1 = recv(P1, P0);
  std::vector<std::uint64_t> e(X.size()), f(W.size());
  for (std::size_t i = 0; i < X.size(); ++i) {
    e[i] = ring_add(from0[i], from1[i], ring_);
  }
  for (std::size_t i = 0; i < W.size(); ++i) {
    f[i] = ring_add(from0[X.size() + i], from1[X.size() + i], ring_);
  }

  begin_round();
  const auto c1 = prf_vec(prf12_, static_cast<std::size_t>(m * v));
  const auto amask = ring_add_vec(a0, a1, ring_);
  const auto bmask = ring_add_vec(b0, b1, ring_);
  auto c_full = ring_matmul(amask, bmask, m, n, v, ring_);
  std::vector<std::uint64_t> c0(c_full.size());
  for (std::size_t i = 0; i < c_full.size(); ++i) {
    c0[i] = ring_sub(c_full[i], c1[i], ring_);
  }
  send_logged(P2, P0, std::move(c0), tag);
  const auto c0_recv = recv(P2, P0);

  const auto ef = ring_matmul(e, f, m, n, v, ring_);
  const auto eb0 = ring_matmul(e, b0, m, n, v, ring_);
  const auto eb1 = ring_matmul(e, b1, m, n, v, ring_);
  const auto a0f = ring_matmul(a0, f, m, n, v, ring_);
  const auto a1f = ring_matmul(a1, f, m, n, v, ring_);
  ShareVec z = ShareVec::zeros(static_cast<std::size_t>(m * v));
  for (std::size_t i = 0; i < z.size(); ++i) {
    z.s0[i] = ring_add(ring_add(ef[i], eb0[i], ring_),
                       ring_add(a0f[i], c0_recv[i], ring_), ring_);
    z.s1[i] = ring_add(eb1[i], ring_add(a1f[i], c1[i], ring_), ring_);
  }
  return z;
}

ShareVec SimContext::gate_dot_shared(const ShareVec& s, const GateLayerPlan& plan,
                                     const std::vector<ShareVec>& gate_weights) {
  const std::size_t plane = static_cast<std::size_t>(plan.height) * plan.width;
  if (s.size() != plane * static_cast<std::size_t>(plan.channels)) {
    throw DimensionError("gate dot input does not match the plan");
  }
  std::size_t total_weights = 0, total_groups = 0;
  for (int c = 0; c < plan.channels; ++c) {
    total_weights += plan.members[static_cast<std::size_t>(c)].size();
    total_groups += plan.group_offsets[static_cast<std::size_t>(c)].size() - 1;
  }

  const auto xa0 = prf_vec(prf02_, s.size()), wb0 = prf_vec(prf02_, total_weights);
  const auto xa1 = prf_vec(prf12_, s.size()), wb1 = prf_vec(prf12_, total_weights);

  // round 1: masked activations and masked weights, both directions
  begin_round();
  std::vector<std::uint64_t> w0_flat, w1_flat;
  w0_flat.reserve(total_weights);
  w1_flat.reserve(total_weights);
  for (int c = 0; c < plan.channels; ++c) {
    const ShareVec& w = gate_weights[static_cast<std::size_t>(c)];
    w0_flat.insert(w0_flat.end(), w.s0.begin(), w.s0.end());
    w1_flat.insert(w1_flat.end(), w.s1.begin(), w.s1.end());
  }
  send_logged(P0, P1, concat(ring_sub_vec(s.s0, xa0, ring_), ring_sub_vec(w0_flat, wb0, ring_)), "linear");
  send_logged(P1, P0, concat(ring_sub_vec(s.s1, xa1, ring_), ring_sub_vec(w1_flat, wb1, ring_)), "linear");
  const auto from0 = recv(P0, P1);
  const auto from1 = recv(P1, P0);
  std::vector<std::uint64_t> ex(s.size()), fw(total_weights);
  for (std::size_t i = 0; i < s.size(); ++i) ex[i] = ring_add(from0[i], from1[i], ring_);
  for (std::size_t i = 0; i < total_weights; ++i) {
    fw[i] = ring_add(from0[s.size() + i], from1[s.size() + i], ring_);
  }

  // round 2: per-group products of the masks from the dealer
  begin_round();
  const auto c1 = prf_vec(prf12_, total_groups);
  std::vector<std::uint64_t> c0(total_groups);
  {
    std::size_t wcursor = 0, gcursor = 0;
    for (int c = 0; c < plan.channels; ++c) {
      const auto& mem = plan.members[static_cast<std::size_t>(c)];
      const auto& off = plan.group_offsets[static_cast<std::size_t>(c)];
      const std::size_t base = static_cast<std::size_t>(c) * plane;
      for (std::size_t g = 0; g + 1 < off.size(); ++g, ++gcursor) {
        std::uint64_t acc = 0;
        for (int j = off[g]; j < off[g + 1]; ++j) {
          const std::size_t xi = base + static_cast<std::size_t>(mem[static_cast<std::size_t>(j)]);
          const std::size_t wi = wcursor + static_cast<std::size_t>(j);
          acc = ring_add(acc,
                         ring_mul(ring_add(xa0[xi], xa1[xi], ring_),
                                  ring_add(wb0[wi], wb1[wi], ring_), ring_),
                         ring_);
        }
        c0[gcursor] = ring_sub(acc, c1[gcursor], ring_);
      }
      wcursor += mem.size();
    }
  }
  send_logged(P2, P0, std::move(c0), "linear");
  const auto c0_recv = recv(P2, P0);

  ShareVec z = ShareVec::zeros(total_groups);
  std::size_t wcursor = 0, gcursor = 0;
  for (int c = 0; c < plan.channels; ++c) {
    const auto& mem = plan.members[static_cast<std::size_t>(c)];
    const auto& off = plan.group_offsets[static_cast<std::size_t>(c)];
    const std::size_t base = static_cast<std::size_t>(c) * plane;
    for (std::size_t g = 0; g + 1 < off.size(); ++g, ++gcursor) {
      std::uint64_t z0 = c0_recv[gcursor], z1 = c1[gcursor];
      for (int j = off[g]; j < off[g + 1]; ++j) {
        const std::size_t xi = base + static_cast<std::size_t>(mem[static_cast<std::size_t>(j)]);
        const std::size_t wi = wcursor + static_cast<std::size_t>(j);
        const std::uint64_t ef = ring_mul(ex[xi], fw[wi], ring_);
        z0 = ring_add(z0,
                      ring_add(ef, ring_add(ring_mul(ex[xi], wb0[wi], ring_),
                                            ring_mul(xa0[xi], fw[wi], ring_), ring_),
                               ring_),
                      ring_);
        z1 = ring_add(z1,
                      ring_add(ring_mul(ex[xi], wb1[wi], ring_),
                               ring_mul(xa1[xi], fw[wi], ring_), ring_),
                      ring_);
      }
      z.s0[gcursor] = z0;
      z.s1[gcursor] = z1;
    }
    wcursor += mem.size();
  }
  return z;
}

ShareVec SimContext::truncate(const ShareVec& t, int shift_bits) {
  const std::size_t n = t.size();
  // dealer-assisted exact shift: zero modeled cost, no protocol round
  log_.add(round_, P0, P2, 0, "trunc");
  log_.add(round_, P1, P2, 0, "trunc");
  send_raw(P0, P2, t.s0);
  send_raw(P1, P2, t.s1);
  const auto s0 = recv(P0, P2);
  const auto s1 = recv(P1, P2);
  const auto y1 = prf_vec(prf12_, n);
  std::vector<std::uint64_t> y0(n);
  for (std::size_t i = 0; i < n; ++i) {
    const std::uint64_t x = ring_add(s0[i], s1[i], ring_);
    const std::uint64_t y = ring_arith_shift_right(x, shift_bits, ring_);
    y0[i] = ring_sub(y, y1[i], ring_);
  }
  log_.add(round_, P2, P0, 0, "trunc");
  send_raw(P2, P0, std::move(y0));
  ShareVec out;
  out.s0 = recv(P2, P0);
  out.s1 = y1;
  return out;
}

ShareVec SimContext::drelu(const ShareVec& t) {
  const std::size_t n = t.size();
  const std::uint64_t logp = static_cast<std::uint64_t>(params_.logp);
  // rounds 1-4: comparison sub-protocol traffic, logp elements each way
  for (int r = 0; r < 4; ++r) {
    begin_round();
    account(P0, P1, logp * n, "drelu");
    account(P1, P0, logp * n, "drelu");
  }
  // round 5: share handoff toward the dealer
  begin_round();
  account(P0, P2, 2 * n, "drelu");
  account(P1, P2, 2 * n, "drelu");
  send_raw(P0, P2, t.s0);
  send_raw(P1, P2, t.s1);
  // rounds 6-7: conversion traffic
  begin_round();
  account(P2, P0, 2 * n, "drelu");
  account(P2, P1, 2 * n, "drelu");
  begin_round();
  account(P0, P1, 2 * n, "drelu");
  account(P1, P0, 2 * n, "drelu");
  // round 8: re-shared sign bits
  begin_round();
  account(P2, P0, 4 * n, "drelu");
  account(P2, P1, 3 * n, "drelu");
  const auto s0 = recv(P0, P2);
  const auto s1 = recv(P1, P2);
  const auto b1 = prf_vec(prf12_, n);
  std::vector<std::uint64_t> b0(n);
  for (std::size_t i = 0; i < n; ++i) {
    const std::uint64_t x = ring_add(s0[i], s1[i], ring_);
    const std::uint64_t bit = ring_is_negative(x, ring_) ? 0 : 1;
    b0[i] = ring_sub(bit, b1[i], ring_);
  }
  send_raw(P2, P0, std::move(b0));
  ShareVec out;
  out.s0 = recv(P2, P0);
  out.s1 = b1;
  return out;
}

// ---- network-level simulation ----------------------------------------------

namespace {

std::vector<std::uint64_t> encode_vec(std::span<const double> values,
                                      int scale_bits,
                                      const FixedPointFormat& fmt) {
  FixedPointFormat f = fmt;
  f.scale_bits = scale_bits;
  std::vector<std::uint64_t> out(values.size());
  for (std::size_t i = 0; i < values.size(); ++i) out[i] = fixed_encode(values[i], f);
  return out;
}

/// Party-local im2col over a share vector ([C,H,W] -> [OH*OW, f*f*C]).
std::vector<std::uint64_t> im2col_share(const std::vector<std::uint64_t>& x,
                                        int c, int h, int w, int f, int stride,
                                        int padding, int oh, int ow) {
  const std::size_t cols = static_cast<std::size_t>(c) * f * f;
  std::vector<std::uint64_t> col(static_cast<std::size_t>(oh) * ow * cols, 0);
  for (int oy = 0; oy < oh; ++oy) {
    for (int ox = 0; ox < ow; ++ox) {
      std::uint64_t* row =
          col.data() + (static_cast<std::size_t>(oy) * ow + ox) * cols;
      for (int ic = 0; ic < c; ++ic) {
        for (int ky = 0; ky < f; ++ky) {
          const int iy = oy * stride + ky - padding;
          if (iy < 0 || iy >= h) continue;
          for (int kx = 0; kx < f; ++kx) {
            const int ix = ox * stride + kx - padding;
            if (ix < 0 || ix >= w) continue;
            row[(static_cast<std::size_t>(ic) * f + ky) * f + kx] =
                x[(static_cast<std::size_t>(ic) * h + iy) * w + ix];
          }
        }
      }
    }
  }
  return col;
}

}  // namespace

SimResult sim_network(const Model& model, std::span<const double> input,
                      const SimParams& params, std::uint64_t seed,
                      std::optional<std::uint64_t> noise_seed) {
  params.validate();
  const FixedPointFormat fmt = params.format();
  const RingParams ring = fmt.ring();
  const int scale = params.scale_bits;
  SimContext ctx(params, seed);

  const auto& net = model.net();
  if (static_cast<std::int64_t>(input.size()) != net.input.count()) {
    throw DimensionError("input length does not match the network");
  }

  const auto input_ring = encode_vec(input, scale, fmt);
  ShareVec cur = ctx.share(input_ring);

  std::vector<std::uint8_t> flip;
  for (std::size_t li = 0; li < model.layers().size(); ++li) {
    const Model::Layer& layer = model.layers()[li];
    const LayerCfg& cfg = layer.def.cfg;
    const TensorShape in = layer.def.in;
    const TensorShape out = layer.def.out;

    if (cfg.kind == "conv") {
      const int f = cfg.kernel, co = cfg.out_channels;
      const int oh = out.h, ow = out.w;
      const std::int64_t rows = static_cast<std::int64_t>(oh) * ow;
      const std::int64_t cols = static_cast<std::int64_t>(in.c) * f * f;
      // weights flattened to (f*f*Ci) x Co so the product lands position-major
      auto wv = layer.weight.data();
      std::vector<double> wflat(static_cast<std::size_t>(cols) * co);
      for (int oc = 0; oc < co; ++oc) {
        for (std::int64_t k = 0; k < cols; ++k) {
          wflat[static_cast<std::size_t>(k) * co + oc] =
              wv[static_cast<std::size_t>(oc) * cols + k];
        }
      }
      const ShareVec wshare = ctx.share(encode_vec(wflat, scale, fmt));
      ShareVec colshare;
      colshare.s0 = im2col_share(cur.s0, in.c, in.h, in.w, f, cfg.stride,
                                 cfg.padding, oh, ow);
      colshare.s1 = im2col_share(cur.s1, in.c, in.h, in.w, f, cfg.stride,
                                 cfg.padding, oh, ow);
      ShareVec prod = ctx.matmul(colshare, rows, cols, wshare, co, "conv");

      // bias at double scale, then rearrange position-major -> channel-major
      const ShareVec bias =
          ctx.share(encode_vec(layer.bias.data(), 2 * scale, fmt));
      ShareVec z = ShareVec::zeros(static_cast<std::size_t>(co) * rows);
      for (std::int64_t p = 0; p < rows; ++p) {
        for (int oc = 0; oc < co; ++oc) {
          const std::size_t src = static_cast<std::size_t>(p) * co + oc;
          const std::size_t dst = static_cast<std::size_t>(oc) * rows + p;
          z.s0[dst] = ring_add(prod.s0[src], bias.s0[static_cast<std::size_t>(oc)], ring);
          z.s1[dst] = ring_add(prod.s1[src], bias.s1[static_cast<std::size_t>(oc)], ring);
        }
      }
      cur = ctx.truncate(z, scale);
    } else if (cfg.kind == "linear") {
      const std::int64_t n = in.count();
      const int v = cfg.out_features;
      const ShareVec wshare = ctx.share(encode_vec(layer.weight.data(), scale, fmt));
      ShareVec z = ctx.matmul(cur, 1, n, wshare, v, "linear");
      const ShareVec bias = ctx.share(encode_vec(layer.bias.data(), 2 * scale, fmt));
      ctx.add_inplace(z, bias);
      cur = ctx.truncate(z, scale);
    } else if (cfg.kind == "avgpool") {
      const int c = in.c, h = in.h, w = in.w;
      const int k = cfg.kernel, stride = cfg.stride;
      const int oh = out.h, ow = out.w;
      ShareVec sums = ShareVec::zeros(static_cast<std::size_t>(c) * oh * ow);
      for (int ch = 0; ch < c; ++ch) {
        for (int oy = 0; oy < oh; ++oy) {
          for (int ox = 0; ox < ow; ++ox) {
            std::uint64_t acc0 = 0, acc1 = 0;
            for (int ky = 0; ky < k; ++ky) {
              for (int kx = 0; kx < k; ++kx) {
                const std::size_t xi =
                    (static_cast<std::size_t>(ch) * h + oy * stride + ky) * w +
                    ox * stride + kx;
                acc0 = ring_add(acc0, cur.s0[xi], ring);
                acc1 = ring_add(acc1, cur.s1[xi], ring);
              }
            }
            const std::size_t oi = (static_cast<std::size_t>(ch) * oh + oy) * ow + ox;
            sums.s0[oi] = acc0;
            sums.s1[oi] = acc1;
          }
        }
      }
      const std::uint64_t inv =
          fixed_encode_at(1.0 / (static_cast<double>(k) * k), scale, fmt);
      cur = ctx.truncate(ctx.scale_by_public(sums, inv), scale);
    } else {  // relu
      const std::size_t n_acts = cur.size();
      ShareVec bits;
      if (!layer.has_gate()) {
        bits = ctx.drelu(cur);
      } else {
        const int channels = in.c;
        const std::size_t plane = static_cast<std::size_t>(in.h) * in.w;
        ShareVec gates;
        if (cfg.relu.shared_gate) {
          std::vector<ShareVec> wshares;
          LayerGateSpec spec = layer.gate_spec;
          store_gate_weights(spec, layer.gate_weights);
          for (const GroupingSpec& gs : spec.per_channel) {
            std::vector<double> flat;
            for (const GateGroup& g : gs.groups) {
              flat.insert(flat.end(), g.weights.begin(), g.weights.end());
            }
            wshares.push_back(ctx.share(encode_vec(flat, scale, fmt)));
          }
          gates = ctx.gate_dot_shared(cur, layer.gate_plan, wshares);
        } else {
          // public gate weights: local fixed-point dot products on each share
          LayerGateSpec spec = layer.gate_spec;
          store_gate_weights(spec, layer.gate_weights);
          std::size_t total_groups = 0;
          for (const GroupingSpec& gs : spec.per_channel) total_groups += gs.groups.size();
          gates = ShareVec::zeros(total_groups);
          std::size_t gcursor = 0;
          for (int ch = 0; ch < channels; ++ch) {
            const GroupingSpec& gs = spec.per_channel[static_cast<std::size_t>(ch)];
            const std::size_t base = static_cast<std::size_t>(ch) * plane;
            for (const GateGroup& g : gs.groups) {
              std::uint64_t acc0 = 0, acc1 = 0;
              for (std::size_t j = 0; j < g.members.size(); ++j) {
                const std::uint64_t wenc = fixed_encode_at(g.weights[j], scale, fmt);
                const std::size_t xi = base + static_cast<std::size_t>(g.members[j]);
                acc0 = ring_add(acc0, ring_mul(cur.s0[xi], wenc, ring), ring);
                acc1 = ring_add(acc1, ring_mul(cur.s1[xi], wenc, ring), ring);
              }
              gates.s0[gcursor] = acc0;
              gates.s1[gcursor] = acc1;
              ++gcursor;
            }
          }
        }
        const ShareVec group_bits = ctx.drelu(gates);
        // spread each group's bit over its members
        bits = ShareVec::zeros(n_acts);
        std::size_t gcursor = 0;
        for (int ch = 0; ch < channels; ++ch) {
          const GroupingSpec& gs =
              layer.gate_spec.per_channel[static_cast<std::size_t>(ch)];
          const std::size_t base = static_cast<std::size_t>(ch) * plane;
          for (const GateGroup& g : gs.groups) {
            for (int m : g.members) {
              bits.s0[base + static_cast<std::size_t>(m)] = group_bits.s0[gcursor];
              bits.s1[base + static_cast<std::size_t>(m)] = group_bits.s1[gcursor];
            }
            ++gcursor;
          }
        }
        if (cfg.relu.noise > 0.0 && cfg.relu.noise_at_inference &&
            noise_seed.has_value()) {
          // public flip coins complement the shared bit: b' = 1 - b
          for (int ch = 0; ch < channels; ++ch) {
            inference_flip_mask(*noise_seed, static_cast<int>(li), ch,
                                static_cast<int>(plane), 1.0 - cfg.relu.noise,
                                flip);
            const std::size_t base = static_cast<std::size_t>(ch) * plane;
            for (std::size_t p = 0; p < plane; ++p) {
              if (!flip[p]) continue;
              bits.s0[base + p] = ring_sub(1, bits.s0[base + p], ring);
              bits.s1[base + p] = ring_neg(bits.s1[base + p], ring);
            }
          }
        }
      }
      cur = ctx.mul(cur, bits);
    }
  }

  SimResult result;
  result.logits_ring = ctx.reconstruct(cur);
  result.logits.resize(result.logits_ring.size());
  for (std::size_t i = 0; i < result.logits_ring.size(); ++i) {
    result.logits[i] = fixed_decode(result.logits_ring[i], fmt);
  }
  result.rounds = ctx.log().max_round();
  result.log = std::move(ctx.log());
  return result;
}

ReconcileResult reconcile(const MessageLog& log, const CostReport& report) {
  ReconcileResult r;
  auto logged = log.bits_by_tag();
  logged.erase("trunc");  // zero-cost dealer assists
  for (const auto& [tag, bits] : report.comm_bits_by_tag) {
    const std::uint64_t got = logged.count(tag) ? logged.at(tag) : 0;
    if (got != static_cast<std::uint64_t>(bits)) {
      r.ok = false;
      r.mismatches.push_back("tag '" + tag + "': logged " + std::to_string(got) +
                             " bits, model predicts " + std::to_string(bits));
    }
    logged.erase(tag);
  }
  for (const auto& [tag, bits] : logged) {
    if (bits != 0) {
      r.ok = false;
      r.mismatches.push_back("tag '" + tag + "': logged " + std::to_string(bits) +
                             " bits, model predicts none");
    }
  }
  if (log.max_round() != report.total_rounds) {
    r.ok = false;
    r.mismatches.push_back("rounds: logged " + std::to_string(log.max_round()) +
                           ", model predicts " +
                           std::to_string(report.total_rounds));
  }
  return r;
}

}  // namespace relush::mpc
