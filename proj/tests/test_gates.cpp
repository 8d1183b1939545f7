#include <cmath>

#include "doctest.h"
#include "oracles.hpp"
#include "relush/gates.hpp"
#include "relush/grouping.hpp"

using namespace relush;

namespace {

Tensor random_plane(int c, int h, int w, Rng& rng) {
  return Tensor::random_uniform({c, h, w}, -1.0, 1.0, rng, false);
}

}  // namespace

TEST_CASE("grouping spec validation") {
  GroupingSpec spec = GroupingSpec::identity(2, 2);
  CHECK(spec.n_groups() == 4);
  spec.validate();

  SUBCASE("overlapping groups are rejected") {
    spec.groups[1].members[0] = 0;  // duplicates position 0
    CHECK_THROWS_AS(spec.validate(), DimensionError);
  }
  SUBCASE("missing coverage is rejected") {
    spec.groups.pop_back();
    CHECK_THROWS_AS(spec.validate(), DimensionError);
  }
  SUBCASE("weights must align with members") {
    spec.mode = GateMode::learned;
    spec.groups[0].weights.push_back(0.5);
    CHECK_THROWS_AS(spec.validate(), DimensionError);
  }
}

TEST_CASE("grelu with singleton self-gates equals relu") {
  Rng rng(31337);
  Tape tape;
  for (int trial = 0; trial < 1000; ++trial) {
    const int h = 1 + static_cast<int>(rng.uniform_int(4));
    const int w = 1 + static_cast<int>(rng.uniform_int(4));
    Tensor s = random_plane(1 + static_cast<int>(rng.uniform_int(2)), h, w, rng);
    const GroupingSpec spec = GroupingSpec::identity(h, w);
    Tensor shared = grelu(s, spec);
    Tensor plain = relu(tape, s);
    for (std::int64_t i = 0; i < s.numel(); ++i) {
      REQUIRE(shared.value_at(i) == plain.value_at(i));
    }
  }
}

TEST_CASE("one-hot source gate: q decides for p") {
  GroupingSpec spec;
  spec.height = 1;
  spec.width = 2;
  spec.mode = GateMode::one_hot_source;
  // p = position 0, q = position 1; gate reads q only
  spec.groups.push_back(GateGroup{{0, 1}, {0.0, 1.0}, 1});
  spec.validate();

  Tensor s = Tensor::from_data({1, 1, 2}, {5.0, -1.0});
  Tensor y = grelu(s, spec);
  CHECK(y.value_at(0) == 0.0);  // s(p)=5 suppressed by s(q)=-1
  CHECK(y.value_at(1) == 0.0);

  Tensor s2 = Tensor::from_data({1, 1, 2}, {-7.0, 2.0});
  Tensor y2 = grelu(s2, spec);
  CHECK(y2.value_at(0) == -7.0);  // gate open: values pass unchanged
  CHECK(y2.value_at(1) == 2.0);
}

TEST_CASE("whole-channel middle gate is a binary channel switch") {
  const GroupingSpec spec = GroupingSpec::whole_channel_middle(3, 3);
  CHECK(spec.groups.size() == 1);
  CHECK(spec.groups[0].source == 4);  // (1,1) of a 3x3 plane

  Rng rng(9);
  Tensor s = random_plane(1, 3, 3, rng);
  s.data()[4] = 0.5;
  Tensor open = grelu(s, spec);
  for (std::int64_t i = 0; i < s.numel(); ++i) {
    CHECK(open.value_at(i) == s.value_at(i));
  }
  s.data()[4] = -0.5;
  Tensor closed = grelu(s, spec);
  for (std::int64_t i = 0; i < s.numel(); ++i) {
    CHECK(closed.value_at(i) == 0.0);
  }
}

TEST_CASE("patch gates match a brute-force per-patch evaluation") {
  Rng rng(123);
  const GroupingSpec spec = uniform_patches(4, 4, 2);
  REQUIRE(spec.n_groups() == 4);
  for (int trial = 0; trial < 50; ++trial) {
    Tensor s = random_plane(1, 4, 4, rng);
    Tensor y = grelu(s, spec);
    // independent evaluation: mean over each 2x2 tile decides the tile
    for (int ty = 0; ty < 2; ++ty) {
      for (int tx = 0; tx < 2; ++tx) {
        double mean = 0.0;
        for (int dy = 0; dy < 2; ++dy) {
          for (int dx = 0; dx < 2; ++dx) {
            mean += s.value_at((2 * ty + dy) * 4 + (2 * tx + dx)) / 4.0;
          }
        }
        for (int dy = 0; dy < 2; ++dy) {
          for (int dx = 0; dx < 2; ++dx) {
            const std::int64_t p = (2 * ty + dy) * 4 + (2 * tx + dx);
            const double expect = mean >= 0.0 ? s.value_at(p) : 0.0;
            REQUIRE(y.value_at(p) == doctest::Approx(expect).epsilon(1e-12));
          }
        }
      }
    }
  }
}

TEST_CASE("gate bits are invariant to positive scaling") {
  Rng rng(55);
  const GroupingSpec spec = uniform_patches(6, 6, 3);
  Tensor s = random_plane(2, 6, 6, rng);
  GateDecision base;
  Tensor y = grelu(s, spec, &base);
  for (double lambda : {0.5, 2.0, 4.0}) {  // exact in binary floating point
    Tensor scaled = s.clone();
    for (double& v : scaled.data()) v *= lambda;
    GateDecision dec;
    Tensor ys = grelu(scaled, spec, &dec);
    CHECK(dec.group_bits == base.group_bits);
    for (std::int64_t i = 0; i < y.numel(); ++i) {
      REQUIRE(ys.value_at(i) == lambda * y.value_at(i));
    }
  }
}

TEST_CASE("ngrelu") {
  Rng rng(808);
  const GroupingSpec spec = GroupingSpec::whole_channel_learned(10, 10);

  SUBCASE("p_keep = 1 equals grelu for any seed") {
    for (std::uint64_t seed : {0ULL, 7ULL, 123456789ULL}) {
      Tensor s = random_plane(3, 10, 10, rng);
      Tensor a = ngrelu(s, spec, 1.0, seed);
      Tensor b = grelu(s, spec);
      for (std::int64_t i = 0; i < s.numel(); ++i) {
        REQUIRE(a.value_at(i) == b.value_at(i));
      }
    }
  }
  SUBCASE("flip rate concentrates near 1 - p_keep") {
    // 100 channels x 100 positions = 10,000 activation draws
    Tensor s = Tensor::random_uniform({100, 10, 10}, 0.5, 1.0, rng, false);
    GateDecision dec;
    Tensor y = ngrelu(s, spec, 0.8, 99, &dec);
    REQUIRE(dec.activation_bits.size() == 10000);
    // all gates are open (positive inputs), so a zeroed activation means its
    // gate was flipped
    std::int64_t flipped = 0;
    for (std::int64_t i = 0; i < y.numel(); ++i) {
      if (y.value_at(i) == 0.0) ++flipped;
    }
    const double frac = static_cast<double>(flipped) / 10000.0;
    const double sigma = std::sqrt(0.2 * 0.8 / 10000.0);
    CHECK(std::abs(frac - 0.2) <= 3.0 * sigma);
  }
  SUBCASE("fixed seed reproduces outputs bit for bit") {
    Tensor s = random_plane(4, 10, 10, rng);
    Tensor a = ngrelu(s, spec, 0.7, 4242);
    Tensor b = ngrelu(s, spec, 0.7, 4242);
    for (std::int64_t i = 0; i < s.numel(); ++i) {
      REQUIRE(a.value_at(i) == b.value_at(i));
    }
    Tensor c = ngrelu(s, spec, 0.7, 4243);
    bool any_diff = false;
    for (std::int64_t i = 0; i < s.numel(); ++i) {
      any_diff = any_diff || a.value_at(i) != c.value_at(i);
    }
    CHECK(any_diff);
  }
  SUBCASE("p_keep out of range") {
    Tensor s = random_plane(1, 10, 10, rng);
    CHECK_THROWS_AS(ngrelu(s, spec, 0.0, 1), Error);
    CHECK_THROWS_AS(ngrelu(s, spec, 1.5, 1), Error);
  }
}

TEST_CASE("count_gate_ops") {
  SUBCASE("32x32 plane, 3x3 patches: 121 sign tests per channel") {
    const auto c = count_gate_ops(uniform_patches(32, 32, 3), 1);
    CHECK(c.n_drelu == 121);
    CHECK(c.n_mul == 1024);
  }
  SUBCASE("whole-channel patch: one sign test per channel") {
    const auto c = count_gate_ops(uniform_patches(32, 32, 32), 64);
    CHECK(c.n_drelu == 64);
    CHECK(c.n_mul == 64 * 1024);
  }
  SUBCASE("4x4 patches: 64 per channel") {
    const auto c = count_gate_ops(uniform_patches(32, 32, 4), 1);
    CHECK(c.n_drelu == 64);
  }
  SUBCASE("singleton patches degenerate to one test per activation") {
    const auto c = count_gate_ops(uniform_patches(32, 32, 1), 1);
    CHECK(c.n_drelu == 1024);
    CHECK(c.n_mul == 1024);
  }
  SUBCASE("n_drelu <= n_mul, equality only for all-singleton specs") {
    Rng rng(4);
    for (int trial = 0; trial < 20; ++trial) {
      const int h = 2 + static_cast<int>(rng.uniform_int(6));
      const int w = 2 + static_cast<int>(rng.uniform_int(6));
      const int k = 1 + static_cast<int>(rng.uniform_int(
                            static_cast<std::uint64_t>(std::max(h, w))));
      const GroupingSpec spec = uniform_patches(h, w, k);
      const auto c = count_gate_ops(spec, 3);
      CHECK(c.n_drelu <= c.n_mul);
      bool all_singletons = true;
      for (const GateGroup& g : spec.groups) {
        all_singletons = all_singletons && g.members.size() == 1;
      }
      CHECK((c.n_drelu == c.n_mul) == all_singletons);
    }
  }
}

TEST_CASE("soft gate") {
  Rng rng(2718);

  SUBCASE("hard forward equals grelu for any temperature") {
    const GroupingSpec spec = uniform_patches(4, 4, 2);
    const LayerGateSpec layer = LayerGateSpec::replicate(spec, 3);
    const GateLayerPlan plan = make_gate_plan(layer);
    const auto weights = make_gate_weights(layer, false);
    for (double temp : {0.05, 1.0, 20.0}) {
      Tensor s = random_plane(3, 4, 4, rng);
      Tape tape;
      SoftGateOptions opt;
      opt.temperature = temp;
      Tensor soft = soft_gate_forward(tape, s, plan, weights, opt);
      Tensor hard = grelu(s, layer);
      for (std::int64_t i = 0; i < s.numel(); ++i) {
        REQUIRE(soft.value_at(i) == hard.value_at(i));
      }
    }
  }

  SUBCASE("gradients of the soft objective match finite differences") {
    // 1x3 plane, one group of three members with learnable weights
    GroupingSpec spec;
    spec.height = 1;
    spec.width = 3;
    spec.mode = GateMode::learned;
    spec.groups.push_back(GateGroup{{0, 1, 2}, {0.3, -0.2, 0.5}, -1});
    const LayerGateSpec layer = LayerGateSpec::replicate(spec, 1);
    const GateLayerPlan plan = make_gate_plan(layer);

    Tensor s = Tensor::from_data({1, 1, 3}, {0.4, -0.7, 0.2}, true);
    auto weights = make_gate_weights(layer, true);
    Tensor c = Tensor::from_data({1, 1, 3}, {0.9, -1.2, 0.6});

    SoftGateOptions opt;
    opt.temperature = 0.8;
    opt.hard_forward = false;  // fully soft function, so FD applies
    auto eval = [&] {
      Tape t;
      return sum(t, mul(t, soft_gate_forward(t, s, plan, weights, opt), c)).item();
    };
    Tape tape;
    Tensor loss = sum(tape, mul(tape, soft_gate_forward(tape, s, plan, weights, opt), c));
    backward(loss, tape);

    CHECK(oracles::max_rel_error(weights[0].grad(),
                                 oracles::finite_difference(weights[0], eval)) < 1e-4);
    CHECK(oracles::max_rel_error(s.grad(), oracles::finite_difference(s, eval)) < 1e-4);
  }

  SUBCASE("gradients flow to both inputs in hard (straight-through) mode") {
    const GroupingSpec spec = GroupingSpec::whole_channel_learned(2, 2);
    const LayerGateSpec layer = LayerGateSpec::replicate(spec, 1);
    const GateLayerPlan plan = make_gate_plan(layer);
    Tensor s = Tensor::from_data({1, 2, 2}, {0.5, -0.1, 0.2, 0.3}, true);
    auto weights = make_gate_weights(layer, true);
    Tape tape;
    SoftGateOptions opt;
    backward(sum(tape, soft_gate_forward(tape, s, plan, weights, opt)), tape);
    bool s_nonzero = false, w_nonzero = false;
    for (double g : s.grad()) s_nonzero = s_nonzero || g != 0.0;
    for (double g : weights[0].grad()) w_nonzero = w_nonzero || g != 0.0;
    CHECK(s_nonzero);
    CHECK(w_nonzero);
  }

  SUBCASE("temperature -> 0 kills the surrogate gradient away from 0") {
    const GroupingSpec spec = GroupingSpec::whole_channel_learned(2, 2);
    const LayerGateSpec layer = LayerGateSpec::replicate(spec, 1);
    const GateLayerPlan plan = make_gate_plan(layer);
    Tensor s = Tensor::from_data({1, 2, 2}, {0.5, 0.4, 0.3, 0.2});
    auto weights = make_gate_weights(layer, true);
    Tape tape;
    SoftGateOptions opt;
    opt.temperature = 1e-4;
    Tensor hard_ref = grelu(s, layer);
    Tensor out = soft_gate_forward(tape, s, plan, weights, opt);
    for (std::int64_t i = 0; i < s.numel(); ++i) {
      CHECK(out.value_at(i) == hard_ref.value_at(i));  // forward unchanged
    }
    backward(sum(tape, out), tape);
    for (double g : weights[0].grad()) CHECK(std::abs(g) < 1e-12);
  }
}

TEST_CASE("every activation is governed by exactly one group gate") {
  Rng rng(99);
  for (int trial = 0; trial < 20; ++trial) {
    const int h = 2 + static_cast<int>(rng.uniform_int(7));
    const int w = 2 + static_cast<int>(rng.uniform_int(7));
    const int k = 1 + static_cast<int>(
                          rng.uniform_int(static_cast<std::uint64_t>(std::max(h, w))));
    const GroupingSpec spec = uniform_patches(h, w, k);
    std::vector<int> owner(static_cast<std::size_t>(h) * w, -1);
    for (std::size_t g = 0; g < spec.groups.size(); ++g) {
      for (int m : spec.groups[g].members) {
        REQUIRE(owner[static_cast<std::size_t>(m)] == -1);
        owner[static_cast<std::size_t>(m)] = static_cast<int>(g);
      }
    }
    for (int o : owner) REQUIRE(o >= 0);
  }
}

TEST_CASE("layer gate spec JSON round trip") {
  Rng rng(17);
  LayerGateSpec layer = LayerGateSpec::replicate(uniform_patches(6, 4, 3), 2);
  // perturb weights so channels differ
  for (auto& gs : layer.per_channel) {
    for (auto& g : gs.groups) {
      for (double& w : g.weights) w += rng.uniform(-0.01, 0.01);
    }
  }
  const std::string json = layer_gate_spec_to_json(layer);
  const LayerGateSpec back = layer_gate_spec_from_json(json);
  REQUIRE(back.channels == layer.channels);
  for (int c = 0; c < layer.channels; ++c) {
    const auto& a = layer.per_channel[static_cast<std::size_t>(c)];
    const auto& b = back.per_channel[static_cast<std::size_t>(c)];
    REQUIRE(a.groups.size() == b.groups.size());
    for (std::size_t g = 0; g < a.groups.size(); ++g) {
      CHECK(a.groups[g].members == b.groups[g].members);
      CHECK(a.groups[g].weights == b.groups[g].weights);  // bit-exact doubles
    }
  }
  CHECK_THROWS_AS(layer_gate_spec_from_json("{\"channels\": 1}"), FormatError);
}
