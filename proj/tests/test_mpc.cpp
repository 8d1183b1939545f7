#include <cmath>

#include "doctest.h"
#include "relush/fixed_engine.hpp"
#include "relush/fixedpoint.hpp"
#include "relush/mpc.hpp"
#include "relush/trainer.hpp"

using namespace relush;
using namespace relush::mpc;

namespace {

const SimParams kParams{};  // l=64, logp=8, scale=13
const FixedPointFormat kFmt{64, 13};

constexpr const char* kTinyConfig = R"({
  "name": "tiny",
  "seed": 3,
  "input_shape": [2, 6, 6],
  "dataset": {"kind": "synthetic", "synthetic": {
    "classes": 4, "channels": 2, "height": 6, "width": 6,
    "train_size": 64, "test_size": 32, "noise_sigma": 0.1, "seed": 5}},
  "training": {"lr": 0.05, "momentum": 0.9, "batch_size": 16, "epochs": 2},
  "protocol": {"ring_bits": 64, "logp": 8, "scale_bits": 13},
  "layers": [
    {"kind": "conv", "out_channels": 3, "kernel": 3, "stride": 1, "padding": 1},
    {"kind": "relu"},
    {"kind": "avgpool", "kernel": 2, "stride": 2},
    {"kind": "conv", "out_channels": 4, "kernel": 3, "stride": 1, "padding": 0},
    {"kind": "relu"},
    {"kind": "linear", "out_features": 4}
  ],
  "variants": {
    "original": [],
    "selfgate": [
      {"layer": 1, "variant": "uniform", "patch": 1}
    ],
    "uniform": [
      {"layer": 1, "variant": "uniform", "patch": 3},
      {"layer": 4, "variant": "uniform", "patch": 1}
    ],
    "middle": [
      {"layer": 1, "variant": "middle"}
    ],
    "fc_noise": [
      {"layer": 1, "variant": "learned", "noise": 0.2, "shared_gate": true}
    ],
    "noisy_inference": [
      {"layer": 1, "variant": "uniform", "patch": 6, "noise": 0.25,
       "noise_at_inference": true}
    ]
  }
})";

Model make_tiny(const std::string& variant, std::uint64_t seed = 11) {
  return Model(resolve_network(parse_network_config(kTinyConfig), variant), seed);
}

std::vector<double> random_input(std::int64_t n, std::uint64_t seed) {
  Rng rng(seed);
  std::vector<double> x(static_cast<std::size_t>(n));
  for (double& v : x) v = rng.uniform(0.0, 1.0);
  return x;
}

}  // namespace

TEST_CASE("fixed-point encode/decode") {
  CHECK(fixed_encode(1.5, kFmt) == 12288);  // 1.5 * 2^13
  CHECK(fixed_encode(-1.0, kFmt) == 0xFFFFFFFFFFFFE000ULL);  // 2^64 - 8192
  CHECK(fixed_decode(fixed_encode(1.5, kFmt), kFmt) == 1.5);
  CHECK(std::abs(fixed_decode(fixed_encode(0.1, kFmt), kFmt) - 0.1) <=
        std::ldexp(1.0, -13));
  CHECK_THROWS_AS(fixed_encode(1e18, kFmt), OverflowError);

  SUBCASE("grid round trip at a narrower ring") {
    const FixedPointFormat f16{16, 4};
    for (double x : {-3.5, -0.25, 0.0, 1.0, 7.9375}) {
      CHECK(fixed_decode(fixed_encode(x, f16), f16) == x);
    }
  }
  SUBCASE("arithmetic shift is a signed floor shift") {
    const RingParams ring{64};
    CHECK(ring_arith_shift_right(fixed_encode(1.5, kFmt), 13, ring) == 1);
    const std::uint64_t neg = fixed_encode(-1.0, kFmt);
    CHECK(ring_to_signed(ring_arith_shift_right(neg, 13, ring), ring) == -1);
  }
}

TEST_CASE("share / reconstruct") {
  SimContext ctx(kParams, 77);
  SUBCASE("zero shares to zero") {
    const std::uint64_t zero[1] = {0};
    const ShareVec t = ctx.share(zero);
    CHECK(ctx.reconstruct(t)[0] == 0);
  }
  SUBCASE("round trip over random values") {
    Rng rng(123);
    std::vector<std::uint64_t> xs(10000);
    for (auto& x : xs) x = rng.next_u64();
    const ShareVec t = ctx.share(xs);
    CHECK(ctx.reconstruct(t) == xs);
  }
  SUBCASE("fixed seed reproduces shares") {
    const std::uint64_t v[2] = {42, 43};
    SimContext a(kParams, 5), b(kParams, 5), c(kParams, 6);
    CHECK(a.share(v).s0 == b.share(v).s0);
    CHECK(a.share(v).s0 != c.share(v).s0);
  }
}

TEST_CASE("secure multiplication") {
  SimContext ctx(kParams, 99);
  Rng rng(7);

  SUBCASE("zero operand gives zero product") {
    const std::uint64_t a[1] = {0}, b[1] = {12345};
    const ShareVec z = ctx.mul(ctx.share(a), ctx.share(b));
    CHECK(ctx.reconstruct(z)[0] == 0);
  }
  SUBCASE("random products match direct ring multiplication") {
    std::vector<std::uint64_t> a(256), b(256);
    for (std::size_t i = 0; i < a.size(); ++i) {
      a[i] = rng.next_u64();
      b[i] = rng.next_u64();
    }
    const ShareVec z = ctx.mul(ctx.share(a), ctx.share(b));
    const auto got = ctx.reconstruct(z);
    for (std::size_t i = 0; i < a.size(); ++i) {
      REQUIRE(got[i] == a[i] * b[i]);  // mod 2^64 by wrapping
    }
  }
  SUBCASE("ledger: 5l bits over 2 rounds per element") {
    SimContext fresh(kParams, 1);
    const std::uint64_t a[3] = {1, 2, 3}, b[3] = {4, 5, 6};
    fresh.mul(fresh.share(a), fresh.share(b));
    CHECK(fresh.log().bits_by_tag().at("mul") == 5 * 3 * 64);
    CHECK(fresh.log().max_round() == 2);
  }
}

TEST_CASE("dealer-assisted truncation") {
  SimContext ctx(kParams, 4);
  SUBCASE("1.5 * 1.0 at scale 13 truncates back to 1.5") {
    const std::uint64_t prod[1] = {12288ULL * 8192ULL};
    const ShareVec t = ctx.truncate(ctx.share(prod), 13);
    CHECK(ctx.reconstruct(t)[0] == 12288);
  }
  SUBCASE("negative products shift with sign") {
    Rng rng(3);
    for (int trial = 0; trial < 200; ++trial) {
      const double x = rng.uniform(-3.0, 3.0), y = rng.uniform(-3.0, 3.0);
      const std::uint64_t xe = fixed_encode(x, kFmt), ye = fixed_encode(y, kFmt);
      const std::uint64_t prod[1] = {xe * ye};
      const ShareVec t = ctx.truncate(ctx.share(prod), 13);
      const std::uint64_t got = ctx.reconstruct(t)[0];
      // oracle: signed floor shift of the double-scale product
      const std::int64_t expect =
          static_cast<std::int64_t>(xe * ye) >> 13;
      REQUIRE(ring_to_signed(got, kFmt.ring()) == expect);
      // and the decoded value approximates the real product
      REQUIRE(std::abs(fixed_decode(got, kFmt) - x * y) <=
              std::ldexp(1.0, -13) * (2.0 + std::abs(x) + std::abs(y)));
    }
  }
  SUBCASE("truncation is free in the ledger and consumes no round") {
    SimContext fresh(kParams, 8);
    const std::uint64_t v[1] = {1 << 20};
    fresh.truncate(fresh.share(v), 13);
    CHECK(fresh.log().max_round() == 0);
    CHECK(fresh.log().bits_by_tag().at("trunc") == 0);
  }
}

TEST_CASE("secure matrix product") {
  SimContext ctx(kParams, 21);
  Rng rng(9);

  SUBCASE("identity weights pass the input through") {
    std::vector<std::uint64_t> x(4);
    for (auto& v : x) v = rng.next_u64();
    std::vector<std::uint64_t> eye(16, 0);
    for (int i = 0; i < 4; ++i) eye[static_cast<std::size_t>(i) * 4 + i] = 1;
    const ShareVec z = ctx.matmul(ctx.share(x), 1, 4, ctx.share(eye), 4, "linear");
    CHECK(ctx.reconstruct(z) == x);
  }
  SUBCASE("random 4x4 matches plaintext ring arithmetic") {
    std::vector<std::uint64_t> x(16), w(16);
    for (auto& v : x) v = rng.next_u64();
    for (auto& v : w) v = rng.next_u64();
    const ShareVec z = ctx.matmul(ctx.share(x), 4, 4, ctx.share(w), 4, "linear");
    const auto got = ctx.reconstruct(z);
    for (int r = 0; r < 4; ++r) {
      for (int c = 0; c < 4; ++c) {
        std::uint64_t acc = 0;
        for (int k = 0; k < 4; ++k) {
          acc += x[static_cast<std::size_t>(r) * 4 + k] *
                 w[static_cast<std::size_t>(k) * 4 + c];
        }
        REQUIRE(got[static_cast<std::size_t>(r) * 4 + c] == acc);
      }
    }
  }
  SUBCASE("ledger for the 32x32x3 -> 64 feature conv im2col product") {
    SimContext fresh(kParams, 2);
    std::vector<std::uint64_t> col(1024 * 27, 1), w(27 * 64, 1);
    fresh.matmul(fresh.share(col), 1024, 27, fresh.share(w), 64, "conv");
    CHECK(fresh.log().bits_by_tag().at("conv") / 8 == 994304);
    CHECK(fresh.log().max_round() == 2);
  }
}

TEST_CASE("secure sign test") {
  SimContext ctx(kParams, 31);
  SUBCASE("zero counts as non-negative") {
    const std::uint64_t v[1] = {0};
    const ShareVec b = ctx.drelu(ctx.share(v));
    CHECK(ctx.reconstruct(b)[0] == 1);
  }
  SUBCASE("negative fixed-point value gates to 0") {
    const std::uint64_t v[1] = {fixed_encode(-3.2, kFmt)};
    const ShareVec b = ctx.drelu(ctx.share(v));
    CHECK(ctx.reconstruct(b)[0] == 0);
  }
  SUBCASE("ledger: 5312 bits over 8 rounds per element at defaults") {
    SimContext fresh(kParams, 12);
    const std::uint64_t v[1] = {123};
    fresh.drelu(fresh.share(v));
    CHECK(fresh.log().bits_by_tag().at("drelu") == 5312);
    CHECK(fresh.log().max_round() == 8);
  }
  SUBCASE("narrower field term scales the ledger") {
    SimParams p = kParams;
    p.logp = 7;
    SimContext fresh(p, 12);
    const std::uint64_t v[1] = {123};
    fresh.drelu(fresh.share(v));
    CHECK(fresh.log().bits_by_tag().at("drelu") == 75 * 64);
  }
  SUBCASE("random signs round-trip") {
    Rng rng(64);
    std::vector<std::uint64_t> xs(512);
    for (auto& x : xs) x = fixed_encode(rng.uniform(-4.0, 4.0), kFmt);
    const auto bits = ctx.reconstruct(ctx.drelu(ctx.share(xs)));
    for (std::size_t i = 0; i < xs.size(); ++i) {
      REQUIRE(bits[i] == (ring_is_negative(xs[i], kFmt.ring()) ? 0u : 1u));
    }
  }
}

TEST_CASE("simulated network reconstructs the fixed-point engine bit-exactly") {
  for (const char* variant : {"original", "selfgate", "uniform", "middle", "fc_noise"}) {
    CAPTURE(variant);
    Model model = make_tiny(variant);
    const FixedEngine engine(model, kFmt);
    for (std::uint64_t trial = 0; trial < 6; ++trial) {
      const auto input = random_input(model.net().input.count(), 100 + trial);
      const SimResult sim = sim_network(model, input, kParams, 500 + trial);
      const auto expect = engine.forward(input);
      REQUIRE(sim.logits_ring == expect);
    }
  }
}

TEST_CASE("singleton self-gates simulate identically to standard relu") {
  Model original = make_tiny("original");
  Model selfgate = make_tiny("selfgate");
  // same parameter initialization (same seed), so logits must agree
  const auto input = random_input(original.net().input.count(), 42);
  const SimResult a = sim_network(original, input, kParams, 7);
  const SimResult b = sim_network(selfgate, input, kParams, 7);
  CHECK(a.logits_ring == b.logits_ring);
  CHECK(a.rounds == b.rounds);
  CHECK(a.log.bits_by_tag() == b.log.bits_by_tag());
}

TEST_CASE("whole-channel gate zeroes a vetoed channel after reconstruction") {
  SimContext ctx(kParams, 5);
  // one 2x2 channel, gate = mean; negative mean must zero everything
  const GroupingSpec spec = uniform_patches(2, 2, 2);
  const LayerGateSpec layer = LayerGateSpec::replicate(spec, 1);
  std::vector<double> values = {-1.0, 0.25, -0.5, 0.25};  // mean -0.25
  std::vector<std::uint64_t> enc(4);
  for (int i = 0; i < 4; ++i) enc[static_cast<std::size_t>(i)] = fixed_encode(values[static_cast<std::size_t>(i)], kFmt);
  ShareVec s = ctx.share(enc);
  // public-weight gate: local dot with encoded weights
  std::uint64_t g0 = 0, g1 = 0;
  const std::uint64_t w = fixed_encode(0.25, kFmt);
  for (int i = 0; i < 4; ++i) {
    g0 = g0 + s.s0[static_cast<std::size_t>(i)] * w;
    g1 = g1 + s.s1[static_cast<std::size_t>(i)] * w;
  }
  ShareVec gate;
  gate.s0 = {g0};
  gate.s1 = {g1};
  const ShareVec bit = ctx.drelu(gate);
  ShareVec bits;
  bits.s0.assign(4, bit.s0[0]);
  bits.s1.assign(4, bit.s1[0]);
  const auto out = ctx.reconstruct(ctx.mul(s, bits));
  for (int i = 0; i < 4; ++i) CHECK(out[static_cast<std::size_t>(i)] == 0);
}

TEST_CASE("ledger reconciles exactly with the analytical model") {
  for (const char* variant :
       {"original", "selfgate", "uniform", "middle", "fc_noise"}) {
    CAPTURE(variant);
    Model model = make_tiny(variant);
    const auto input = random_input(model.net().input.count(), 9);
    const SimResult sim = sim_network(model, input, kParams, 13);
    const CostReport report =
        cost_network(model.descriptor(), kParams.protocol());
    const ReconcileResult rec = reconcile(sim.log, report);
    for (const std::string& m : rec.mismatches) {
      CAPTURE(m);
      CHECK(false);
    }
    CHECK(rec.ok);
  }
}

TEST_CASE("gate op counts show up in the ledger") {
  Model model = make_tiny("uniform");
  const auto input = random_input(model.net().input.count(), 10);
  const SimResult sim = sim_network(model, input, kParams, 3);
  // layer 1: 6x6 plane in 3x3 patches = 4 groups x 3 channels; layer 4 is
  // singleton-gated 1x1 x 4 channels; both still multiply every activation
  const std::int64_t drelu_expected = 4 * 3 + 1 * 4;
  const std::int64_t mul_expected = 6 * 6 * 3 + 1 * 1 * 4;
  CHECK(sim.log.bits_by_tag().at("drelu") ==
        static_cast<std::uint64_t>(drelu_expected) * 83 * 64);
  CHECK(sim.log.bits_by_tag().at("mul") ==
        static_cast<std::uint64_t>(mul_expected) * 5 * 64);
}

TEST_CASE("round indices never regress and totals match the model") {
  Model model = make_tiny("uniform");
  const auto input = random_input(model.net().input.count(), 1);
  const SimResult sim = sim_network(model, input, kParams, 2);
  int prev = 0;
  for (const MessageRecord& r : sim.log.records()) {
    REQUIRE(r.round >= prev);
    prev = r.round;
  }
  // conv 2 + relu 10 + pool 0 + conv 2 + relu 10 + linear 2
  CHECK(sim.rounds == 26);
}

TEST_CASE("deterministic replay: same seed, identical ledger and shares") {
  Model model = make_tiny("uniform");
  const auto input = random_input(model.net().input.count(), 3);
  const SimResult a = sim_network(model, input, kParams, 1234);
  const SimResult b = sim_network(model, input, kParams, 1234);
  CHECK(a.logits_ring == b.logits_ring);
  CHECK(a.log.to_csv() == b.log.to_csv());
  const SimResult c = sim_network(model, input, kParams, 1235);
  CHECK(a.logits_ring == c.logits_ring);  // protocol output is seed-independent
  CHECK(a.log.to_csv() == c.log.to_csv());  // accounting layout is too
}

TEST_CASE("inference-time gate noise stays bit-exact across engines") {
  Model model = make_tiny("noisy_inference");
  const FixedEngine engine(model, kFmt);
  for (std::uint64_t trial = 0; trial < 4; ++trial) {
    const auto input = random_input(model.net().input.count(), 60 + trial);
    const std::uint64_t noise_seed = 900 + trial;
    const SimResult sim = sim_network(model, input, kParams, 77, noise_seed);
    const auto expect = engine.forward(input, noise_seed);
    REQUIRE(sim.logits_ring == expect);
  }
  // ledger is unchanged by the public flips
  const auto input = random_input(model.net().input.count(), 8);
  const SimResult noisy = sim_network(model, input, kParams, 77, 1);
  const CostReport report = cost_network(model.descriptor(), kParams.protocol());
  CHECK(reconcile(noisy.log, report).ok);
}

TEST_CASE("argmax agreement between simulated and float inference") {
  // trained model so logit margins dominate the quantization error
  Model model = make_tiny("original", 21);
  const DatasetPair data = load_dataset(model.net().dataset, "", 2, 6, 6, 4);
  train_model(model, data, 5);
  const FixedEngine engine(model, kFmt);
  int agree = 0;
  const int n = 64;
  for (int i = 0; i < n; ++i) {
    const Tensor x = data.test.one(i % data.test.size());
    const std::vector<double> input(x.data().begin(), x.data().end());
    const SimResult sim = sim_network(model, input, kParams, 1000 + static_cast<std::uint64_t>(i));
    const Tensor logits = model.infer(x);
    int sim_arg = 0, float_arg = 0;
    for (int c = 1; c < 4; ++c) {
      if (sim.logits[static_cast<std::size_t>(c)] > sim.logits[static_cast<std::size_t>(sim_arg)]) sim_arg = c;
      if (logits.value_at(c) > logits.value_at(float_arg)) float_arg = c;
    }
    agree += sim_arg == float_arg ? 1 : 0;
  }
  CHECK(agree >= n * 98 / 100);
}

TEST_CASE("transcript uniformity smoke check") {
  // P0's first sent word (a masked share) and first received word, binned by
  // their top 4 bits over reseeded runs, should look uniform for different
  // secrets. Chi-squared sanity at coarse granularity.
  auto histogram = [](double secret_a, double secret_b, int word_index) {
    std::array<std::int64_t, 16> bins{};
    const int runs = 3200;
    for (int t = 0; t < runs; ++t) {
      SimContext ctx(kParams, static_cast<std::uint64_t>(t) * 2654435761ULL + 1);
      const std::uint64_t a[1] = {fixed_encode(secret_a, kFmt)};
      const std::uint64_t b[1] = {fixed_encode(secret_b, kFmt)};
      ctx.mul(ctx.share(a), ctx.share(b));
      const auto& words = ctx.p0_transcript();
      REQUIRE(words.size() >= 3);
      ++bins[static_cast<std::size_t>(words[static_cast<std::size_t>(word_index)] >> 60)];
    }
    return bins;
  };
  for (int word : {0, 1, 2}) {
    for (auto [sa, sb] : {std::pair{1.25, -2.0}, std::pair{-117.0, 0.0}}) {
      const auto bins = histogram(sa, sb, word);
      const double expected = 3200.0 / 16.0;
      double chi2 = 0.0;
      for (std::int64_t count : bins) {
        chi2 += (count - expected) * (count - expected) / expected;
      }
      CAPTURE(word);
      CAPTURE(sa);
      CHECK(chi2 < 44.3);  // chi-squared 0.9999 quantile at 15 dof
    }
  }
}
