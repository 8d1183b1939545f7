#include <cmath>

#include "doctest.h"
#include "relush/cost.hpp"

using namespace relush;

namespace {

const ProtocolParams kDefaults{};  // l = 64, logp = 8

/// Table-2-style network: seven gated conv layers and a classifier head.
NetworkDescriptor cifar_descriptor(std::int64_t groups_l1, std::int64_t groups_l2,
                                   bool shared_gate = false) {
  NetworkDescriptor net;
  net.name = "cifar10";
  net.layers = {
      LayerDescriptor::conv2d("conv1", 32, 3, 3, 64),
      LayerDescriptor::relu_layer("relu1", 65536, groups_l1, shared_gate && groups_l1 != 65536),
      LayerDescriptor::conv2d("conv2", 32, 64, 3, 64),
      LayerDescriptor::relu_layer("relu2", 65536, groups_l2, shared_gate && groups_l2 != 65536),
      LayerDescriptor::avgpool("pool1"),
      LayerDescriptor::conv2d("conv3", 16, 64, 3, 64),
      LayerDescriptor::relu_layer("relu3", 16384, 16384),
      LayerDescriptor::conv2d("conv4", 16, 64, 3, 64),
      LayerDescriptor::relu_layer("relu4", 16384, 16384),
      LayerDescriptor::avgpool("pool2"),
      LayerDescriptor::conv2d("conv5", 8, 64, 3, 64),
      LayerDescriptor::relu_layer("relu5", 4096, 4096),
      LayerDescriptor::conv2d("conv6", 8, 64, 1, 64),
      LayerDescriptor::relu_layer("relu6", 4096, 4096),
      LayerDescriptor::conv2d("conv7", 8, 64, 1, 16),
      LayerDescriptor::relu_layer("relu7", 1024, 1024),
      LayerDescriptor::linear("fc", 1, 1024, 10),
  };
  return net;
}

NetworkDescriptor svhn_descriptor(std::int64_t groups_l1) {
  NetworkDescriptor net;
  net.name = "svhn";
  net.layers = {
      LayerDescriptor::conv2d("conv1", 29, 3, 4, 32),
      LayerDescriptor::relu_layer("relu1", 26912, groups_l1),
      LayerDescriptor::avgpool("pool1"),
      LayerDescriptor::conv2d("conv2", 6, 32, 4, 64),
      LayerDescriptor::relu_layer("relu2", 2304, 2304),
      LayerDescriptor::linear("fc", 1, 2304, 10),
  };
  return net;
}

NetworkDescriptor fashion_descriptor(std::int64_t groups_l1) {
  NetworkDescriptor net;
  net.name = "fashion";
  net.layers = {
      LayerDescriptor::conv2d("conv1", 28, 1, 3, 32),
      LayerDescriptor::relu_layer("relu1", 25088, groups_l1),
      LayerDescriptor::avgpool("pool1"),
      LayerDescriptor::conv2d("conv2", 14, 32, 3, 64),
      LayerDescriptor::relu_layer("relu2", 12544, 12544),
      LayerDescriptor::avgpool("pool2"),
      LayerDescriptor::linear("fc1", 1, 3136, 128),
      LayerDescriptor::relu_layer("relu3", 128, 128),
      LayerDescriptor::linear("fc2", 1, 128, 10),
  };
  return net;
}

}  // namespace

TEST_CASE("cost_linear") {
  SUBCASE("classifier head, hand-evaluated") {
    const OpCost c = cost_linear(1, 1024, 10, kDefaults);
    CHECK(c.rounds == 2);
    CHECK(c.comm_bits == 22538 * 64);
    CHECK(c.comm_bits / 8 == 180304);
  }
  SUBCASE("all-ones degenerate case") {
    CHECK(cost_linear(1, 1, 1, kDefaults).comm_bits == 5 * 64);
  }
  SUBCASE("rounds are always 2") {
    for (std::int64_t n : {1, 7, 640}) {
      CHECK(cost_linear(3, n, 5, kDefaults).rounds == 2);
    }
  }
  CHECK_THROWS_AS(cost_linear(0, 1, 1, kDefaults), DimensionError);
}

TEST_CASE("cost_conv") {
  SUBCASE("first feature layer, hand-evaluated") {
    const OpCost c = cost_conv(32, 3, 3, 64, kDefaults);
    CHECK(c.rounds == 2);
    CHECK(c.comm_bits == 124288LL * 64);
    CHECK(c.comm_bits / 8 == 994304);
  }
  SUBCASE("wide middle layer, hand-evaluated") {
    const OpCost c = cost_conv(32, 64, 3, 64, kDefaults);
    CHECK(c.comm_bits == 1318912LL * 64);
    CHECK(CostReport::mb(c.comm_bits) == doctest::Approx(10.551296));
  }
  SUBCASE("degenerate 1x1 conv matches the linear formula") {
    CHECK(cost_conv(1, 1, 1, 1, kDefaults).comm_bits ==
          cost_linear(1, 1, 1, kDefaults).comm_bits);
  }
}

TEST_CASE("cost_drelu") {
  const OpCost c = cost_drelu(kDefaults);
  CHECK(c.rounds == 8);
  CHECK(c.comm_bits == 83 * 64);  // (8*8 + 19) l
  CHECK(c.comm_bits == 5312);
  CHECK(c.comm_bits / 8 == 664);

  ProtocolParams narrow = kDefaults;
  narrow.logp = 7;
  CHECK(cost_drelu(narrow).comm_bits == 75 * 64);
}

TEST_CASE("cost_mul") {
  const OpCost c = cost_mul(kDefaults);
  CHECK(c.rounds == 2);
  CHECK(c.comm_bits == 5 * 64);
  CHECK(c.comm_bits / 8 == 40);
  ProtocolParams wide = kDefaults;
  wide.ring_bits = 128;  // comm scales linearly in l
  CHECK_THROWS(cost_mul(ProtocolParams{4, 8}));
  wide.ring_bits = 32;
  CHECK(cost_mul(wide).comm_bits == 5 * 32);
}

TEST_CASE("cost_relu_layer") {
  SUBCASE("standard layer: one sign test per activation") {
    const OpCost c = cost_relu_layer(65536, 65536, kDefaults);
    CHECK(c.rounds == 10);
    CHECK(c.comm_bits / 8 == 46137344);  // ~46.1 MB
  }
  SUBCASE("whole-channel sharing on 64 channels") {
    const OpCost c = cost_relu_layer(65536, 64, kDefaults);
    CHECK(c.comm_bits / 8 == 2663936);  // ~2.66 MB
  }
  SUBCASE("whole-channel sharing on the 29x29x32 layer") {
    const OpCost c = cost_relu_layer(26912, 32, kDefaults);
    CHECK(c.comm_bits / 8 == 1097728);  // ~1.10 MB
  }
  SUBCASE("degenerates exactly to per-activation DReLU + Mul") {
    for (std::int64_t n : {1LL, 37LL, 4096LL}) {
      CHECK(cost_relu_layer(n, n, kDefaults).comm_bits ==
            n * (cost_drelu(kDefaults).comm_bits + cost_mul(kDefaults).comm_bits));
    }
  }
  SUBCASE("more groups than activations is an error") {
    CHECK_THROWS_AS(cost_relu_layer(16, 17, kDefaults), DimensionError);
  }
}

TEST_CASE("cost_network golden round counts") {
  CHECK(cost_network(cifar_descriptor(65536, 65536), kDefaults).total_rounds == 86);
  CHECK(cost_network(cifar_descriptor(64, 64), kDefaults).total_rounds == 86);
  CHECK(cost_network(cifar_descriptor(64, 64, /*shared_gate=*/true), kDefaults)
            .total_rounds == 90);
  CHECK(cost_network(svhn_descriptor(26912), kDefaults).total_rounds == 26);
  CHECK(cost_network(svhn_descriptor(32), kDefaults).total_rounds == 26);
  // reported, not asserted against outside sources: 4 linear-type layers and
  // 3 activation layers
  CHECK(cost_network(fashion_descriptor(25088), kDefaults).total_rounds == 38);
}

TEST_CASE("cost_network golden bandwidth totals") {
  const CostReport original = cost_network(cifar_descriptor(65536, 65536), kDefaults);
  CHECK(std::abs(original.total_mb() - 141.02) / 141.02 < 0.02);

  const CostReport uniform = cost_network(cifar_descriptor(64, 64), kDefaults);
  CHECK(std::abs(uniform.total_mb() - 54.18) / 54.18 < 0.02);

  // first activation layer, both variants
  CHECK(std::abs(CostReport::mb(original.lines[1].comm_bits) - 46.0) / 46.0 < 0.02);
  CHECK(std::abs(CostReport::mb(uniform.lines[1].comm_bits) - 2.66) / 2.66 < 0.01);

  const CostReport svhn = cost_network(svhn_descriptor(26912), kDefaults);
  CHECK(std::abs(CostReport::mb(svhn.lines[1].comm_bits) - 17.87) / 17.87 < 0.08);
  const CostReport svhn_u = cost_network(svhn_descriptor(32), kDefaults);
  CHECK(std::abs(CostReport::mb(svhn_u.lines[1].comm_bits) - 1.09) / 1.09 < 0.02);

  const CostReport fashion = cost_network(fashion_descriptor(25088), kDefaults);
  CHECK(std::abs(CostReport::mb(fashion.lines[1].comm_bits) - 16.66) / 16.66 < 0.08);
  const CostReport fashion_u = cost_network(fashion_descriptor(32), kDefaults);
  CHECK(std::abs(CostReport::mb(fashion_u.lines[1].comm_bits) - 1.02) / 1.02 < 0.02);
}

TEST_CASE("cost report bookkeeping") {
  const CostReport r = cost_network(cifar_descriptor(64, 64), kDefaults);

  SUBCASE("totals equal the sum of the lines") {
    int rounds = 0;
    std::int64_t bits = 0;
    for (const auto& line : r.lines) {
      rounds += line.rounds;
      bits += line.comm_bits;
    }
    CHECK(rounds == r.total_rounds);
    CHECK(bits == r.total_comm_bits);
  }
  SUBCASE("per-tag totals add up too") {
    std::int64_t bits = 0;
    for (const auto& [tag, b] : r.comm_bits_by_tag) bits += b;
    CHECK(bits == r.total_comm_bits);
  }
  SUBCASE("communication is a multiple of the ring width") {
    for (const auto& line : r.lines) CHECK(line.comm_bits % 64 == 0);
  }
  SUBCASE("pool layers cost nothing") {
    CHECK(r.lines[4].rounds == 0);
    CHECK(r.lines[4].comm_bits == 0);
  }
  SUBCASE("json and table render") {
    CHECK(r.to_json().find("total_rounds") != std::string::npos);
    CHECK(r.to_table().find("conv1") != std::string::npos);
  }
}

TEST_CASE("communication is monotone in every dimension") {
  for (std::int64_t bump = 0; bump < 4; ++bump) {
    const std::int64_t m = 3 + bump, i = 2 + bump, f = 1 + bump, o = 5 + bump;
    CHECK(cost_conv(m + 1, i, f, o, kDefaults).comm_bits >
          cost_conv(m, i, f, o, kDefaults).comm_bits);
    CHECK(cost_conv(m, i + 1, f, o, kDefaults).comm_bits >
          cost_conv(m, i, f, o, kDefaults).comm_bits);
    CHECK(cost_conv(m, i, f + 1, o, kDefaults).comm_bits >
          cost_conv(m, i, f, o, kDefaults).comm_bits);
    CHECK(cost_conv(m, i, f, o + 1, kDefaults).comm_bits >
          cost_conv(m, i, f, o, kDefaults).comm_bits);
    CHECK(cost_linear(m, i, f, kDefaults).comm_bits <
          cost_linear(m + 1, i + 1, f + 1, kDefaults).comm_bits);
    CHECK(cost_relu_layer(100 + bump, 10, kDefaults).comm_bits <
          cost_relu_layer(101 + bump, 10, kDefaults).comm_bits);
  }
}

TEST_CASE("savings") {
  const CostReport original = cost_network(cifar_descriptor(65536, 65536), kDefaults);
  const CostReport uniform = cost_network(cifar_descriptor(64, 64), kDefaults);

  SUBCASE("identical reports save nothing") {
    const SavingsReport s = savings(original, original);
    CHECK(s.rounds_pct == doctest::Approx(0.0));
    CHECK(s.comm_pct == doctest::Approx(0.0));
  }
  SUBCASE("whole-channel sharing saves ~61% of the bandwidth") {
    const SavingsReport s = savings(original, uniform);
    CHECK(s.comm_pct == doctest::Approx(61.0).epsilon(0.02));
    CHECK(s.rounds_pct == doctest::Approx(0.0));  // rounds stay the same
  }
}
