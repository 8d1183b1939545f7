#include <cmath>

#include "doctest.h"
#include "oracles.hpp"
#include "relush/tensor.hpp"

using namespace relush;

namespace {

Tensor random_tensor(std::vector<int> shape, Rng& rng, bool requires_grad,
                     double lo = -1.0, double hi = 1.0) {
  return Tensor::random_uniform(std::move(shape), lo, hi, rng, requires_grad);
}

}  // namespace

TEST_CASE("tensor shape and storage invariants") {
  Tensor t = Tensor::zeros({2, 3, 4});
  CHECK(t.numel() == 24);
  CHECK(t.shape() == std::vector<int>{2, 3, 4});
  CHECK_THROWS_AS(Tensor::from_data({2, 2}, {1.0, 2.0, 3.0}), DimensionError);
  CHECK_THROWS_AS(Tensor::zeros({0, 3}), DimensionError);
}

TEST_CASE("conv2d matches hand-computed and identity examples") {
  Tape tape;
  SUBCASE("1x1 identity kernel preserves the input") {
    Rng rng(7);
    Tensor x = random_tensor({1, 1, 5, 5}, rng, false);
    Tensor w = Tensor::from_data({1, 1, 1, 1}, {1.0});
    Tensor b = Tensor::zeros({1});
    Tensor y = conv2d(tape, x, w, b, 1, 0);
    for (std::int64_t i = 0; i < x.numel(); ++i) {
      CHECK(y.value_at(i) == doctest::Approx(x.value_at(i)));
    }
  }
  SUBCASE("2x2 valid convolution, hand result") {
    Tensor x = Tensor::from_data({1, 1, 2, 2}, {1, 2, 3, 4});
    Tensor w = Tensor::from_data({1, 1, 2, 2}, {1, 0, 0, 1});
    Tensor b = Tensor::zeros({1});
    Tensor y = conv2d(tape, x, w, b, 1, 0);
    CHECK(y.numel() == 1);
    CHECK(y.value_at(0) == doctest::Approx(5.0));
  }
  SUBCASE("same padding keeps 32x32 maps at 32x32") {
    Rng rng(3);
    Tensor x = random_tensor({1, 3, 32, 32}, rng, false);
    Tensor w = random_tensor({64, 3, 3, 3}, rng, false);
    Tensor b = Tensor::zeros({64});
    Tensor y = conv2d(tape, x, w, b, 1, 1);
    CHECK(y.shape() == std::vector<int>{1, 64, 32, 32});
  }
  SUBCASE("shape errors are descriptive") {
    Tensor x = Tensor::zeros({1, 2, 4, 4});
    Tensor w = Tensor::zeros({1, 3, 3, 3});
    Tensor b = Tensor::zeros({1});
    CHECK_THROWS_AS(conv2d(tape, x, w, b, 1, 0), DimensionError);
    Tensor w2 = Tensor::zeros({1, 2, 9, 9});
    CHECK_THROWS_AS(conv2d(tape, x, w2, b, 1, 0), DimensionError);
  }
}

TEST_CASE("conv2d agrees with the naive quadruple-loop oracle") {
  Rng rng(11);
  for (int trial = 0; trial < 8; ++trial) {
    const int ci = 1 + static_cast<int>(rng.uniform_int(3));
    const int co = 1 + static_cast<int>(rng.uniform_int(3));
    const int f = 1 + static_cast<int>(rng.uniform_int(3));
    const int stride = 1 + static_cast<int>(rng.uniform_int(2));
    const int padding = static_cast<int>(rng.uniform_int(2));
    Tensor x = random_tensor({2, ci, 8, 8}, rng, false);
    Tensor w = random_tensor({co, ci, f, f}, rng, false);
    Tensor b = random_tensor({co}, rng, false);
    Tape tape;
    Tensor y = conv2d(tape, x, w, b, stride, padding);
    int oh = 0, ow = 0;
    const auto ref = oracles::naive_conv2d(
        {x.data().begin(), x.data().end()}, 2, ci, 8, 8,
        {w.data().begin(), w.data().end()}, co, f,
        {b.data().begin(), b.data().end()}, stride, padding, oh, ow);
    REQUIRE(y.numel() == static_cast<std::int64_t>(ref.size()));
    for (std::size_t i = 0; i < ref.size(); ++i) {
      CHECK(std::abs(y.value_at(static_cast<std::int64_t>(i)) - ref[i]) <= 1e-10);
    }
  }
}

TEST_CASE("dense examples") {
  Tape tape;
  SUBCASE("hand dot product") {
    Tensor x = Tensor::from_data({1, 2}, {1, 2});
    Tensor w = Tensor::from_data({2, 1}, {1, 1});
    Tensor b = Tensor::from_data({1}, {1});
    Tensor y = dense(tape, x, w, b);
    CHECK(y.value_at(0) == doctest::Approx(4.0));
  }
  SUBCASE("identity weights pass through") {
    Rng rng(5);
    Tensor x = random_tensor({3, 4}, rng, false);
    std::vector<double> eye(16, 0.0);
    for (int i = 0; i < 4; ++i) eye[static_cast<std::size_t>(i) * 4 + i] = 1.0;
    Tensor w = Tensor::from_data({4, 4}, eye);
    Tensor b = Tensor::zeros({4});
    Tensor y = dense(tape, x, w, b);
    for (std::int64_t i = 0; i < x.numel(); ++i) {
      CHECK(y.value_at(i) == doctest::Approx(x.value_at(i)));
    }
  }
  SUBCASE("classifier head shape") {
    Tensor x = Tensor::zeros({1, 1024});
    Tensor w = Tensor::zeros({1024, 10});
    Tensor b = Tensor::zeros({10});
    CHECK(dense(tape, x, w, b).shape() == std::vector<int>{1, 10});
    Tensor bad = Tensor::zeros({1, 100});
    CHECK_THROWS_AS(dense(tape, bad, w, b), DimensionError);
  }
}

TEST_CASE("avgpool2d examples") {
  Tape tape;
  SUBCASE("mean of a 2x2 window") {
    Tensor x = Tensor::from_data({1, 1, 2, 2}, {1, 2, 3, 4});
    Tensor y = avgpool2d(tape, x, 2, 2);
    CHECK(y.numel() == 1);
    CHECK(y.value_at(0) == doctest::Approx(2.5));
  }
  SUBCASE("constant input stays constant") {
    Tensor x = Tensor::full({1, 2, 6, 6}, 0.7);
    Tensor y = avgpool2d(tape, x, 2, 2);
    for (std::int64_t i = 0; i < y.numel(); ++i) {
      CHECK(y.value_at(i) == doctest::Approx(0.7));
    }
  }
  SUBCASE("32 -> 16 halving") {
    Tensor x = Tensor::zeros({1, 64, 32, 32});
    CHECK(avgpool2d(tape, x, 2, 2).shape() == std::vector<int>{1, 64, 16, 16});
  }
  SUBCASE("window larger than the map errors") {
    Tensor x = Tensor::zeros({1, 1, 3, 3});
    CHECK_THROWS_AS(avgpool2d(tape, x, 4, 1), DimensionError);
  }
}

TEST_CASE("softmax cross entropy closed forms") {
  Tape tape;
  SUBCASE("uniform logits over 10 classes") {
    Tensor logits = Tensor::zeros({1, 10});
    Tensor loss = softmax_cross_entropy(tape, logits, {3});
    CHECK(loss.item() == doctest::Approx(std::log(10.0)).epsilon(1e-12));
  }
  SUBCASE("two-class closed form") {
    Tensor logits = Tensor::from_data({1, 2}, {1.0, 0.0});
    Tensor loss = softmax_cross_entropy(tape, logits, {0});
    CHECK(loss.item() ==
          doctest::Approx(std::log(1.0 + std::exp(-1.0))).epsilon(1e-12));
  }
  SUBCASE("growing margin drives the loss to zero monotonically") {
    double prev = std::numeric_limits<double>::max();
    for (double margin : {1.0, 2.0, 4.0, 8.0, 16.0}) {
      Tape t2;
      Tensor logits = Tensor::from_data({1, 2}, {margin, 0.0});
      const double l = softmax_cross_entropy(t2, logits, {0}).item();
      CHECK(l < prev);
      prev = l;
    }
    CHECK(prev < 1e-6);
  }
  SUBCASE("label out of range") {
    Tensor logits = Tensor::zeros({1, 4});
    CHECK_THROWS_AS(softmax_cross_entropy(tape, logits, {4}), DimensionError);
  }
}

TEST_CASE("backward basics") {
  SUBCASE("sum gives all-ones gradient") {
    Tape tape;
    Tensor x = Tensor::from_data({4}, {1, 2, 3, 4}, true);
    Tensor loss = sum(tape, x);
    backward(loss, tape);
    for (double g : x.grad()) CHECK(g == doctest::Approx(1.0));
  }
  SUBCASE("sum of squares gives 2x") {
    Tape tape;
    Tensor x = Tensor::from_data({3}, {1, -2, 3}, true);
    Tensor loss = sum(tape, mul(tape, x, x));
    backward(loss, tape);
    for (std::int64_t i = 0; i < x.numel(); ++i) {
      CHECK(x.grad()[static_cast<std::size_t>(i)] ==
            doctest::Approx(2.0 * x.value_at(i)));
    }
  }
  SUBCASE("loss must be scalar and on the tape") {
    Tape tape;
    Tensor x = Tensor::from_data({2}, {1, 2}, true);
    Tensor y = mul(tape, x, x);
    CHECK_THROWS_AS(backward(y, tape), DimensionError);
    Tensor off_tape = Tensor::from_data({1}, {1.0}, true);
    CHECK_THROWS_AS(backward(off_tape, tape), Error);
  }
}

TEST_CASE("gradient check: every op against central finite differences") {
  Rng rng(2024);
  const double tol = 1e-4;

  SUBCASE("conv2d wrt input, kernel, and bias") {
    Tensor x = random_tensor({2, 2, 4, 4}, rng, true);
    Tensor w = random_tensor({2, 2, 3, 3}, rng, true);
    Tensor b = random_tensor({2}, rng, true);
    Tensor c = random_tensor({2, 2, 4, 4}, rng, false);
    auto eval = [&] {
      Tape t;
      return sum(t, mul(t, conv2d(t, x, w, b, 1, 1), c)).item();
    };
    Tape tape;
    Tensor loss = sum(tape, mul(tape, conv2d(tape, x, w, b, 1, 1), c));
    backward(loss, tape);
    CHECK(oracles::max_rel_error(x.grad(), oracles::finite_difference(x, eval)) < tol);
    CHECK(oracles::max_rel_error(w.grad(), oracles::finite_difference(w, eval)) < tol);
    CHECK(oracles::max_rel_error(b.grad(), oracles::finite_difference(b, eval)) < tol);
  }
  SUBCASE("dense wrt input, weights, and bias") {
    Tensor x = random_tensor({3, 5}, rng, true);
    Tensor w = random_tensor({5, 4}, rng, true);
    Tensor b = random_tensor({4}, rng, true);
    Tensor c = random_tensor({3, 4}, rng, false);
    auto eval = [&] {
      Tape t;
      return sum(t, mul(t, dense(t, x, w, b), c)).item();
    };
    Tape tape;
    backward(sum(tape, mul(tape, dense(tape, x, w, b), c)), tape);
    CHECK(oracles::max_rel_error(x.grad(), oracles::finite_difference(x, eval)) < tol);
    CHECK(oracles::max_rel_error(w.grad(), oracles::finite_difference(w, eval)) < tol);
    CHECK(oracles::max_rel_error(b.grad(), oracles::finite_difference(b, eval)) < tol);
  }
  SUBCASE("avgpool2d") {
    Tensor x = random_tensor({2, 2, 4, 4}, rng, true);
    Tensor c = random_tensor({2, 2, 2, 2}, rng, false);
    auto eval = [&] {
      Tape t;
      return sum(t, mul(t, avgpool2d(t, x, 2, 2), c)).item();
    };
    Tape tape;
    backward(sum(tape, mul(tape, avgpool2d(tape, x, 2, 2), c)), tape);
    CHECK(oracles::max_rel_error(x.grad(), oracles::finite_difference(x, eval)) < tol);
  }
  SUBCASE("relu away from the kink") {
    Tensor x = random_tensor({40}, rng, true);
    // keep entries away from 0 so finite differences are valid
    for (double& v : x.data()) {
      if (std::abs(v) < 0.05) v += v >= 0 ? 0.1 : -0.1;
    }
    Tensor c = random_tensor({40}, rng, false);
    auto eval = [&] {
      Tape t;
      return sum(t, mul(t, relu(t, x), c)).item();
    };
    Tape tape;
    backward(sum(tape, mul(tape, relu(tape, x), c)), tape);
    CHECK(oracles::max_rel_error(x.grad(), oracles::finite_difference(x, eval)) < tol);
  }
  SUBCASE("softmax cross entropy wrt logits") {
    Tensor logits = random_tensor({4, 6}, rng, true);
    const std::vector<int> labels = {0, 5, 2, 3};
    auto eval = [&] {
      Tape t;
      return softmax_cross_entropy(t, logits, labels).item();
    };
    Tape tape;
    backward(softmax_cross_entropy(tape, logits, labels), tape);
    CHECK(oracles::max_rel_error(logits.grad(),
                                 oracles::finite_difference(logits, eval)) < tol);
  }
  SUBCASE("relu subgradient at exactly zero is 1") {
    Tape tape;
    Tensor x = Tensor::from_data({3}, {-1.0, 0.0, 2.0}, true);
    backward(sum(tape, relu(tape, x)), tape);
    CHECK(x.grad()[0] == 0.0);
    CHECK(x.grad()[1] == 1.0);
    CHECK(x.grad()[2] == 1.0);
  }
}

TEST_CASE("relu forward examples") {
  Tape tape;
  Tensor x = Tensor::from_data({3}, {-1.0, 0.0, 2.0});
  Tensor y = relu(tape, x);
  CHECK(y.value_at(0) == 0.0);
  CHECK(y.value_at(1) == 0.0);
  CHECK(y.value_at(2) == 2.0);
  Tensor neg = Tensor::full({8}, -3.0);
  Tensor zeroed = relu(tape, neg);
  for (std::int64_t i = 0; i < zeroed.numel(); ++i) CHECK(zeroed.value_at(i) == 0.0);
}

TEST_CASE("avgpool backward distributes gradient uniformly") {
  Rng rng(77);
  Tensor x = random_tensor({1, 3, 6, 6}, rng, true);
  Tape tape;
  Tensor y = avgpool2d(tape, x, 2, 2);
  Tensor loss = sum(tape, y);
  backward(loss, tape);
  double in_sum = 0.0, out_sum = 0.0;
  for (double g : x.grad()) in_sum += g;
  for (std::int64_t i = 0; i < y.numel(); ++i) out_sum += 1.0;
  CHECK(in_sum == doctest::Approx(out_sum).epsilon(1e-12));
}

TEST_CASE("non-finite values are rejected") {
  Tape tape;
  Tensor x = Tensor::from_data({2}, {1.0, std::numeric_limits<double>::infinity()});
  CHECK_THROWS_AS(relu(tape, x), NumericError);
}

TEST_CASE("sgd_step") {
  SUBCASE("zero gradient leaves parameters unchanged") {
    Tensor p = Tensor::from_data({2}, {1.0, -2.0}, true);
    p.grad();  // allocate zeros
    SgdOptimizer opt({p}, 0.1, 0.9);
    opt.step();
    CHECK(p.value_at(0) == 1.0);
    CHECK(p.value_at(1) == -2.0);
  }
  SUBCASE("single plain step") {
    Tensor p = Tensor::from_data({1}, {1.0}, true);
    p.grad()[0] = 1.0;
    SgdOptimizer opt({p}, 0.1, 0.0);
    opt.step();
    CHECK(p.value_at(0) == doctest::Approx(0.9));
  }
  SUBCASE("two momentum steps match the hand recurrence") {
    const double lr = 0.1, mu = 0.9, g1 = 1.0, g2 = 0.5;
    Tensor p = Tensor::from_data({1}, {1.0}, true);
    SgdOptimizer opt({p}, lr, mu);
    p.grad()[0] = g1;
    opt.step();
    // v1 = g1; p1 = 1 - lr*g1
    CHECK(p.value_at(0) == doctest::Approx(1.0 - lr * g1).epsilon(1e-15));
    opt.zero_grad();
    p.grad()[0] = g2;
    opt.step();
    // v2 = mu*g1 + g2; p2 = p1 - lr*v2
    const double expect = 1.0 - lr * g1 - lr * (mu * g1 + g2);
    CHECK(p.value_at(0) == doctest::Approx(expect).epsilon(1e-15));
  }
  SUBCASE("learning rate must be positive") {
    Tensor p = Tensor::zeros({1}, true);
    CHECK_THROWS_AS(SgdOptimizer({p}, 0.0, 0.9), Error);
  }
}

TEST_CASE("seeded runs produce bit-identical parameters") {
  auto run = [](std::uint64_t seed) {
    Rng rng(seed);
    Tensor w = Tensor::kaiming_uniform({4, 9}, 9, rng, true);
    Tensor b = Tensor::zeros({9}, true);
    SgdOptimizer opt({w, b}, 0.05, 0.9);
    Rng data_rng(seed ^ 1);
    for (int step = 0; step < 10; ++step) {
      Tensor x = Tensor::random_uniform({2, 4}, -1, 1, data_rng, false);
      Tape tape;
      Tensor loss = softmax_cross_entropy(
          tape, dense(tape, x, w, b), {static_cast<int>(step % 9), 0});
      backward(loss, tape);
      opt.step();
      opt.zero_grad();
    }
    return std::vector<double>(w.data().begin(), w.data().end());
  };
  const auto a = run(42), b = run(42), c = run(43);
  CHECK(a == b);
  CHECK(a != c);
}
