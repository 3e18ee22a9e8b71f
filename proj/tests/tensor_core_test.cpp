#include "tpt/errors.hpp"
#include "tpt/grad_check.hpp"
#include "tpt/random.hpp"
#include "tpt/tape.hpp"

#include <gtest/gtest.h>

#include <cmath>
#include <random>

namespace tpt {
namespace {

Tensor random_tensor(Shape shape, CounterRng& rng, double lo = -1.0, double hi = 1.0) {
  Tensor t(std::move(shape));
  for (double& x : t.data()) x = lo + (hi - lo) * rng.uniform();
  return t;
}

// Values bounded away from zero by `margin` so relu stays off its kink.
Tensor off_kink_tensor(Shape shape, CounterRng& rng, double margin) {
  Tensor t = random_tensor(std::move(shape), rng);
  for (double& x : t.data()) x = x >= 0 ? x + margin : x - margin;
  return t;
}

TEST(Tensor, ShapeAndViewAgree) {
  Tensor t(Shape{2, 3, 4});
  EXPECT_EQ(t.size(), 24);
  EXPECT_EQ(t.rows(), 6);
  EXPECT_EQ(t.cols(), 4);
  EXPECT_EQ(Tensor::scalar(2.5).item(), 2.5);
  EXPECT_THROW(Tensor(Shape{2, 0}), DimensionError);
  EXPECT_THROW(t.reshaped({5, 5}), DimensionError);
  EXPECT_EQ(t.reshaped({24}).cols(), 24);
}

TEST(Matmul, IdentityCase) {
  Tape tape;
  Var eye = tape.constant(Tensor::matrix(2, 2, {1, 0, 0, 1}));
  Var x = tape.constant(Tensor::matrix(2, 1, {5, 7}));
  EXPECT_EQ(matmul(eye, x).value(), Tensor::matrix(2, 1, {5, 7}));
}

TEST(Matmul, HandCheckedDotProducts) {
  Tape tape;
  Var a = tape.constant(Tensor::matrix(2, 2, {1, 2, 3, 4}));
  Var b = tape.constant(Tensor::matrix(2, 1, {1, 1}));
  EXPECT_EQ(matmul(a, b).value(), Tensor::matrix(2, 1, {3, 7}));
}

TEST(Matmul, ZeroCase) {
  CounterRng rng(3);
  Tape tape;
  Var z = tape.constant(Tensor::zeros({2, 3}));
  Var b = tape.constant(random_tensor({3, 4}, rng));
  EXPECT_EQ(matmul(z, b).value(), Tensor::zeros({2, 4}));
}

TEST(Matmul, ShapeMismatchNamesBothShapes) {
  Tape tape;
  Var a = tape.constant(Tensor::zeros({2, 3}));
  Var b = tape.constant(Tensor::zeros({2, 3}));
  try {
    matmul(a, b);
    FAIL() << "expected DimensionError";
  } catch (const DimensionError& e) {
    EXPECT_NE(std::string(e.what()).find("[2x3] and [2x3]"), std::string::npos);
  }
}

TEST(Elementwise, Definitions) {
  Tape tape;
  Var a = tape.constant(Tensor::vector({1, 2}));
  Var b = tape.constant(Tensor::vector({3, 4}));
  EXPECT_EQ(hadamard(a, b).value(), Tensor::vector({3, 8}));
  EXPECT_EQ(relu(tape.constant(Tensor::vector({-1, 0, 2}))).value(), Tensor::vector({0, 0, 2}));
  Var v = tape.constant(Tensor::vector({0.25, -3, 7}));
  EXPECT_EQ(hadamard(v, tape.constant(Tensor::vector({1, 1, 1}))).value(), v.value());
  EXPECT_EQ((a + b).value(), Tensor::vector({4, 6}));
  EXPECT_EQ((a - b).value(), Tensor::vector({-2, -2}));
  EXPECT_EQ((2.0 * a).value(), Tensor::vector({2, 4}));
  EXPECT_THROW(hadamard(a, tape.constant(Tensor::vector({1, 2, 3}))), DimensionError);
  EXPECT_THROW(add(a, tape.constant(Tensor::matrix(2, 1, {1, 2}))), DimensionError);
}

TEST(Elementwise, HadamardCommutesExactly) {
  CounterRng rng(11);
  for (int trial = 0; trial < 50; ++trial) {
    Tape tape;
    Var a = tape.constant(random_tensor({3, 5}, rng, -1e3, 1e3));
    Var b = tape.constant(random_tensor({3, 5}, rng, -1e3, 1e3));
    EXPECT_EQ(hadamard(a, b).value(), hadamard(b, a).value());
  }
}

TEST(Softmax, SymmetryAndDirectEvaluation) {
  Tape tape;
  const Tensor uniform = softmax(tape.constant(Tensor::vector({0, 0, 0}))).value();
  for (double p : uniform.data()) EXPECT_NEAR(p, 1.0 / 3.0, 1e-15);

  const Tensor two_thirds = softmax(tape.constant(Tensor::vector({std::log(2.0), 0.0}))).value();
  EXPECT_NEAR(two_thirds[0], 2.0 / 3.0, 1e-15);
  EXPECT_NEAR(two_thirds[1], 1.0 / 3.0, 1e-15);
}

TEST(Softmax, SingleUnmaskedEntry) {
  Tape tape;
  Mask mask(1, 2);
  mask << true, false;
  const Tensor y = softmax(tape.constant(Tensor::vector({5, 123.0})), &mask).value();
  EXPECT_EQ(y[0], 1.0);
  EXPECT_EQ(y[1], 0.0);
}

TEST(Softmax, FullyMaskedRowIsDegenerate) {
  Tape tape;
  Mask mask = Mask::Constant(2, 2, true);
  mask.row(1).setConstant(false);
  EXPECT_THROW(softmax(tape.constant(Tensor::zeros({2, 2})), &mask), DegenerateMaskError);
}

TEST(Softmax, RowsSumToOneForWideLogits) {
  CounterRng rng(5);
  for (int trial = 0; trial < 100; ++trial) {
    Tape tape;
    Mask mask = Mask::Constant(4, 9, true);
    for (Index i = 0; i < 4; ++i) {
      for (Index j = 1; j < 9; ++j) mask(i, j) = rng.uniform() < 0.7;
    }
    const Tensor y = softmax(tape.constant(random_tensor({4, 9}, rng, -50, 50)), &mask).value();
    for (Index i = 0; i < 4; ++i) {
      EXPECT_NEAR(y.mat().row(i).sum(), 1.0, 1e-9);
      for (Index j = 0; j < 9; ++j) {
        if (!mask(i, j)) {
          EXPECT_EQ(y.mat()(i, j), 0.0);
        }
      }
    }
  }
}

TEST(LayerNorm, Examples) {
  Tape tape;
  Var ones = tape.constant(Tensor::vector({1, 1}));
  Var zeros = tape.constant(Tensor::vector({0, 0}));
  const Tensor y = layer_norm(tape.constant(Tensor::vector({1, -1})), ones, zeros, 1e-300).value();
  EXPECT_NEAR(y[0], 1.0, 1e-15);
  EXPECT_NEAR(y[1], -1.0, 1e-15);

  EXPECT_EQ(layer_norm(tape.constant(Tensor::vector({4.2, 4.2})), ones, zeros, 1e-5).value(),
            Tensor::vector({0, 0}));

  Var b = tape.constant(Tensor::vector({0.3, -0.7}));
  EXPECT_EQ(layer_norm(tape.constant(Tensor::vector({9, 2})), zeros, b, 1e-5).value(), b.value());
}

TEST(LayerNorm, NormalizesRows) {
  CounterRng rng(9);
  Tape tape;
  const Index d = 16;
  Var gain = tape.constant(Tensor(Shape{d}, RowMatrix::Ones(1, d)));
  Var bias = tape.constant(Tensor::zeros({d}));
  for (int trial = 0; trial < 50; ++trial) {
    const Tensor x = random_tensor({5, d}, rng, -30, 30);
    const Tensor y = layer_norm(tape.constant(x), gain, bias, 1e-5).value();
    for (Index i = 0; i < 5; ++i) {
      const double var = (x.mat().row(i).array() - x.mat().row(i).mean()).square().mean();
      if (var < 1e-4) continue;
      const double mean = y.mat().row(i).mean();
      EXPECT_LT(std::abs(mean), 1e-9);
      const double ynorm = (y.mat().row(i).array() - mean).square().mean();
      // eps shifts the variance by eps / (var + eps)
      EXPECT_NEAR(ynorm, var / (var + 1e-5), 1e-12);
      EXPECT_NEAR(ynorm, 1.0, 1e-6 + 1e-5 / var);
    }
  }
}

TEST(Backward, AnalyticGradientOfSumWx) {
  Tape tape;
  Var W = tape.leaf(Tensor::matrix(2, 3, {1, 2, 3, 4, 5, 6}), "W");
  Var x = tape.constant(Tensor::matrix(3, 1, {0.5, -1, 2}));
  auto grads = tape.backward(sum(matmul(W, x)));
  EXPECT_EQ(grads.at("W"), Tensor::matrix(2, 3, {0.5, -1, 2, 0.5, -1, 2}));
}

TEST(Backward, UnreachedLeafGetsZeros) {
  Tape tape;
  Var W = tape.leaf(Tensor::matrix(2, 2, {1, 2, 3, 4}), "W");
  Var v = tape.leaf(Tensor::vector({1, 2}), "v");
  auto grads = tape.backward(sum(hadamard(v, v)));
  EXPECT_EQ(grads.at("W"), Tensor::zeros({2, 2}));
  (void)W;
}

TEST(Backward, HalfSquaredNorm) {
  Tape tape;
  Var v = tape.leaf(Tensor::vector({0.5, -2, 3}), "v");
  auto grads = tape.backward(scale(sum(hadamard(v, v)), 0.5));
  EXPECT_EQ(grads.at("v"), v.value());
}

TEST(Backward, NonScalarLossIsContractViolation) {
  Tape tape;
  Var v = tape.leaf(Tensor::vector({1, 2}), "v");
  EXPECT_THROW(tape.backward(v), ContractError);
}

TEST(GradCheck, ReluNetworkAwayFromKinks) {
  CounterRng rng(21);
  ParamMap params{{"W", random_tensor({4, 3}, rng)}};
  const Tensor x = random_tensor({3, 2}, rng);
  // Keep every pre-activation at least 1e-3 from zero.
  RowMatrix pre = params["W"].mat() * x.mat();
  for (Index i = 0; i < pre.size(); ++i) {
    if (std::abs(pre.data()[i]) < 1e-3) GTEST_SKIP() << "fixture landed on a kink";
  }
  const auto report = grad_check(
      [&](Tape& t, const VarMap& p) { return sum(relu(matmul(p.at("W"), t.constant(x)))); }, params);
  EXPECT_LT(report.max_rel_error, 1e-6);
  EXPECT_EQ(report.coordinates, 12u);
}

TEST(GradCheck, ConstantFunction) {
  ParamMap params{{"a", Tensor::vector({1, 2, 3})}};
  const auto report = grad_check([](Tape& t, const VarMap&) { return t.constant(Tensor::scalar(4.0)); }, params);
  EXPECT_EQ(report.max_rel_error, 0.0);
}

TEST(GradCheck, RestoresParameters) {
  ParamMap params{{"a", Tensor::vector({1, 2, 3})}};
  const Tensor before = params["a"];
  grad_check([](Tape&, const VarMap& p) { return sum(hadamard(p.at("a"), p.at("a"))); }, params);
  EXPECT_EQ(params["a"], before);
}

// Every primitive against central differences on smooth random inputs.
class PrimitiveGradients : public ::testing::TestWithParam<int> {};

TEST_P(PrimitiveGradients, MatchFiniteDifferences) {
  CounterRng rng(1000 + GetParam());
  Mask mask = Mask::Constant(3, 4, true);
  mask(0, 2) = false;
  mask(2, 0) = false;
  ParamMap params{
      {"a", off_kink_tensor({3, 4}, rng, 1e-3)},
      {"b", random_tensor({3, 4}, rng)},
      {"m", random_tensor({4, 2}, rng)},
      {"bias", random_tensor({4}, rng)},
      {"gain", random_tensor({4}, rng, 0.5, 1.5)},
  };
  // Random fixed weights turn each primitive's output into a generic scalar.
  const Tensor probe34 = random_tensor({3, 4}, rng);
  const Tensor probe32 = random_tensor({3, 2}, rng);
  const Tensor probe44 = random_tensor({4, 4}, rng);
  auto weigh = [](Tape& t, Var v, const Tensor& w) { return sum(hadamard(v, t.constant(w))); };

  const std::vector<std::pair<const char*, ScalarFn>> cases = {
      {"matmul", [&](Tape& t, const VarMap& p) { return weigh(t, matmul(p.at("a"), p.at("m")), probe32); }},
      {"transpose",
       [&](Tape& t, const VarMap& p) { return weigh(t, transpose(transpose(p.at("a"))), probe34); }},
      {"add", [&](Tape& t, const VarMap& p) { return weigh(t, p.at("a") + p.at("b"), probe34); }},
      {"sub", [&](Tape& t, const VarMap& p) { return weigh(t, p.at("a") - p.at("b"), probe34); }},
      {"hadamard", [&](Tape& t, const VarMap& p) { return weigh(t, hadamard(p.at("a"), p.at("b")), probe34); }},
      {"relu", [&](Tape& t, const VarMap& p) { return weigh(t, relu(p.at("a")), probe34); }},
      {"scale", [&](Tape& t, const VarMap& p) { return weigh(t, scale(p.at("a"), -1.7), probe34); }},
      {"add_bias", [&](Tape& t, const VarMap& p) { return weigh(t, add_bias(p.at("b"), p.at("bias")), probe34); }},
      {"softmax", [&](Tape& t, const VarMap& p) { return weigh(t, softmax(p.at("b")), probe34); }},
      {"masked_softmax", [&](Tape& t, const VarMap& p) { return weigh(t, softmax(p.at("b"), &mask), probe34); }},
      {"layer_norm",
       [&](Tape& t, const VarMap& p) {
         return weigh(t, layer_norm(p.at("b"), p.at("gain"), p.at("bias"), 1e-5), probe34);
       }},
      {"slice_concat",
       [&](Tape& t, const VarMap& p) {
         Var top = slice(p.at("a"), 0, 2, 1, 3);
         Var bottom = slice(p.at("b"), 1, 2, 0, 1);
         Var row = concat_cols({top, bottom});
         return weigh(t, concat_rows({row, row}), probe44);
       }},
      {"reshape", [&](Tape& t, const VarMap& p) { return weigh(t, reshape(p.at("a"), {4, 3}), probe34.reshaped({4, 3})); }},
  };
  for (const auto& [name, f] : cases) {
    ParamMap local = params;
    const auto report = grad_check(f, local);
    EXPECT_LT(report.max_rel_error, 1e-6) << name << " worst " << report.worst_param << "[" << report.worst_index
                                          << "] analytic " << report.worst_analytic << " numeric "
                                          << report.worst_numeric;
  }
}

INSTANTIATE_TEST_SUITE_P(Seeds, PrimitiveGradients, ::testing::Range(0, 5));

// Two samples, two heads of width 2, 3 queries over 4 keys.
struct AttentionFixture {
  CounterRng rng{77};
  ParamMap params{{"q", random_tensor({6, 4}, rng)}, {"k", random_tensor({8, 4}, rng)}, {"v", random_tensor({8, 4}, rng)}};
  std::vector<Mask> masks{Mask::Constant(3, 4, true), Mask::Constant(3, 4, true)};
  Tensor probe = random_tensor({6, 4}, rng);

  AttentionFixture() {
    masks[1].col(3).setConstant(false);
    masks[1](0, 1) = false;
  }
};

TEST(BlockAttention, MatchesComposedPrimitives) {
  AttentionFixture fx;
  Tape tape;
  const Var q = tape.constant(fx.params["q"]);
  const Var k = tape.constant(fx.params["k"]);
  const Var v = tape.constant(fx.params["v"]);
  std::vector<RowMatrix> weights;
  const Tensor fused = block_attention(q, k, v, 2, fx.masks, &weights).value();
  ASSERT_EQ(weights.size(), 4u);
  for (Index b = 0; b < 2; ++b) {
    for (Index h = 0; h < 2; ++h) {
      const Var qb = slice(q, b * 3, 3, h * 2, 2);
      const Var kb = slice(k, b * 4, 4, h * 2, 2);
      const Var vb = slice(v, b * 4, 4, h * 2, 2);
      const Var alpha = softmax(scale(matmul(qb, transpose(kb)), 1.0 / std::sqrt(2.0)), &fx.masks[b]);
      const RowMatrix expected = matmul(alpha, vb).mat();
      EXPECT_LT((fused.mat().block(b * 3, h * 2, 3, 2) - expected).cwiseAbs().maxCoeff(), 1e-14);
      EXPECT_LT((weights[b * 2 + h] - alpha.mat()).cwiseAbs().maxCoeff(), 1e-15);
    }
  }
  EXPECT_EQ(weights[2](0, 1), 0.0);
  EXPECT_EQ(weights[3].col(3).cwiseAbs().maxCoeff(), 0.0);
}

TEST(BlockAttention, GradientsMatchFiniteDifferences) {
  AttentionFixture fx;
  const auto report = grad_check(
      [&](Tape& t, const VarMap& p) {
        return sum(hadamard(block_attention(p.at("q"), p.at("k"), p.at("v"), 2, fx.masks), t.constant(fx.probe)));
      },
      fx.params);
  EXPECT_LT(report.max_rel_error, 1e-6) << report.worst_param << "[" << report.worst_index << "]";
}

TEST(BlockAttention, RejectsMismatchedLayouts) {
  AttentionFixture fx;
  Tape tape;
  const Var q = tape.constant(fx.params["q"]);
  const Var k = tape.constant(fx.params["k"]);
  EXPECT_THROW(block_attention(q, k, k, 3, fx.masks), DimensionError);
  EXPECT_THROW(block_attention(q, q, q, 2, fx.masks), DimensionError);
  std::vector<Mask> dead = fx.masks;
  dead[0].row(2).setConstant(false);
  EXPECT_THROW(block_attention(q, k, k, 2, dead), DegenerateMaskError);
}

TEST(CounterRng, StreamsAreReproducibleAndIndependent) {
  CounterRng a(42), b(42);
  for (int i = 0; i < 10; ++i) EXPECT_EQ(a(), b());
  CounterRng s1 = CounterRng(42).split("alpha"), s2 = CounterRng(42).split("alpha");
  EXPECT_EQ(s1(), s2());
  EXPECT_NE(CounterRng(42).split("alpha")(), CounterRng(42).split("beta")());
  CounterRng u(1);
  for (int i = 0; i < 1000; ++i) {
    const double x = u.uniform();
    EXPECT_GE(x, 0.0);
    EXPECT_LT(x, 1.0);
    EXPECT_LT(u.below(7), 7u);
  }
}

}  // namespace
}  // namespace tpt
