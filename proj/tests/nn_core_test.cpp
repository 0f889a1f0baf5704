#include <gtest/gtest.h>

#include <cmath>
#include <functional>
#include <vector>

#include "hmil/nn/adam.hpp"
#include "hmil/nn/ops.hpp"
#include "hmil/rng.hpp"

using hmil::Rng;
using namespace hmil::nn;

namespace {

Tensor random_tensor(std::size_t r, std::size_t c, Rng& rng, double scale = 1.0) {
  Tensor t(r, c);
  for (double& v : t.data()) v = rng.uniform(-scale, scale);
  return t;
}

double rel_error(double a, double b) { return std::abs(a - b) / std::max({std::abs(a), std::abs(b), 1e-6}); }

// Central differences of `f` w.r.t. every entry of every input, compared to
// the tape gradient. Returns the max relative error.
double gradient_error(std::vector<Tensor> inputs, const std::function<Var(Tape&, const std::vector<Var>&)>& f) {
  Tape tape;
  std::vector<Var> vars;
  for (const auto& t : inputs) vars.push_back(tape.variable(t));
  const Var loss = f(tape, vars);
  tape.backward(loss);
  double worst = 0.0;
  const double eps = 1e-5;
  for (std::size_t k = 0; k < inputs.size(); ++k) {
    const Tensor analytic = tape.grad(vars[k]);
    for (std::size_t i = 0; i < inputs[k].size(); ++i) {
      auto eval = [&](double delta) {
        auto shifted = inputs;
        shifted[k].data()[i] += delta;
        Tape t2;
        std::vector<Var> v2;
        for (const auto& t : shifted) v2.push_back(t2.constant(t));
        return t2.value(f(t2, v2))(0, 0);
      };
      const double numeric = (eval(eps) - eval(-eps)) / (2 * eps);
      worst = std::max(worst, rel_error(analytic.data()[i], numeric));
    }
  }
  return worst;
}

Offsets random_offsets(std::size_t segments, Rng& rng, std::size_t max_len, bool allow_empty) {
  Offsets o{0};
  for (std::size_t s = 0; s < segments; ++s) {
    const auto lo = allow_empty ? 0 : 1;
    o.push_back(o.back() + static_cast<std::size_t>(rng.between(lo, static_cast<std::int64_t>(max_len))));
  }
  return o;
}

}  // namespace

TEST(Tensor, RejectsMismatchedData) { EXPECT_THROW(Tensor(2, 2, std::vector<double>{1, 2, 3}), hmil::DimensionError); }

TEST(DenseForward, IdentityActivationPassesThrough) {
  Tape t;
  const Var y = dense_forward(t, t.constant({{1, 2}}), t.constant(Tensor::identity(2)), t.constant({{0, 0}}),
                              Activation::identity);
  EXPECT_EQ(t.value(y), (Tensor{{1, 2}}));
}

TEST(DenseForward, ReluClampsNegatives) {
  Tape t;
  const Var y =
      dense_forward(t, t.constant({{-1, 1}}), t.constant(Tensor::identity(2)), t.constant({{0, 0}}), Activation::relu);
  EXPECT_EQ(t.value(y), (Tensor{{0, 1}}));
}

TEST(DenseForward, TanhScalar) {
  Tape t;
  const Var y = dense_forward(t, t.constant({{0.5}}), t.constant({{2}}), t.constant({{1}}), Activation::tanh);
  // tanh(2) from an independent reference.
  EXPECT_NEAR(t.value(y)(0, 0), 0.9640275800758169, 1e-15);
}

TEST(DenseForward, ShapeMismatchNamesBothShapes) {
  Tape t;
  try {
    dense_forward(t, t.constant(Tensor(1, 3)), t.constant(Tensor(2, 2)), t.constant(Tensor(1, 2)), Activation::tanh);
    FAIL();
  } catch (const hmil::DimensionError& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("[1x3]"), std::string::npos);
    EXPECT_NE(msg.find("[2x2]"), std::string::npos);
  }
}

TEST(SegmentMean, Examples) {
  Tape t;
  EXPECT_EQ(t.value(segment_mean(t, t.constant({{1, 3}, {3, 5}}), {0, 2})), (Tensor{{2, 4}}));
  EXPECT_EQ(t.value(segment_mean(t, t.constant({{7, 7}}), {0, 1})), (Tensor{{7, 7}}));
  EXPECT_EQ(t.value(segment_mean(t, t.constant({{1, 1}, {2, 2}}), {0, 0, 2})), (Tensor{{0, 0}, {1.5, 1.5}}));
}

TEST(SegmentMean, MalformedOffsets) {
  Tape t;
  const Var x = t.constant(Tensor(3, 1));
  EXPECT_THROW(segment_mean(t, x, {}), hmil::StructuralError);
  EXPECT_THROW(segment_mean(t, x, {1, 3}), hmil::StructuralError);
  EXPECT_THROW(segment_mean(t, x, {0, 2, 1, 3}), hmil::StructuralError);
  EXPECT_THROW(segment_mean(t, x, {0, 2}), hmil::StructuralError);
}

TEST(SegmentMean, Linearity) {
  Rng rng(11);
  for (int trial = 0; trial < 50; ++trial) {
    const auto offs = random_offsets(4, rng, 5, true);
    const std::size_t n = offs.back(), k = 3;
    const Tensor a = random_tensor(n, k, rng), b = random_tensor(n, k, rng);
    const double alpha = rng.uniform(-2, 2), beta = rng.uniform(-2, 2);
    Tensor combo(n, k);
    for (std::size_t i = 0; i < combo.size(); ++i) combo.data()[i] = alpha * a.data()[i] + beta * b.data()[i];
    Tape t;
    const Tensor lhs = t.value(segment_mean(t, t.constant(combo), offs));
    const Tensor ma = t.value(segment_mean(t, t.constant(a), offs));
    const Tensor mb = t.value(segment_mean(t, t.constant(b), offs));
    for (std::size_t i = 0; i < lhs.size(); ++i) {
      EXPECT_NEAR(lhs.data()[i], alpha * ma.data()[i] + beta * mb.data()[i], 1e-12);
    }
  }
}

TEST(SegmentMax, Examples) {
  Tape t;
  EXPECT_EQ(t.value(segment_max(t, t.constant({{1, 5}, {3, 2}}), {0, 2})), (Tensor{{3, 5}}));
  EXPECT_EQ(t.value(segment_max(t, t.constant({{-1, -2}}), {0, 1})), (Tensor{{-1, -2}}));
  EXPECT_EQ(t.value(segment_max(t, t.constant({{4, 4, 4}}), {0, 0, 1})), (Tensor{{0, 0, 0}, {4, 4, 4}}));
}

TEST(SegmentMax, TieRoutesToLowestIndex) {
  Tape t;
  const Var x = t.variable({{2}, {2}, {1}});
  t.backward(sum(t, segment_max(t, x, {0, 3})));
  EXPECT_EQ(t.grad(x), (Tensor{{1}, {0}, {0}}));
}

TEST(Backward, LinearChainRule) {
  Tape t;
  const Var x = t.variable({{1}});
  const Var w = t.variable({{3}});
  t.backward(sum(t, dense_forward(t, x, w, t.constant({{0}}), Activation::identity)));
  EXPECT_EQ(t.grad(w), (Tensor{{1}}));
  EXPECT_EQ(t.grad(x), (Tensor{{3}}));
}

TEST(Backward, MeanDistributesEvenly) {
  Tape t;
  const Var x = t.variable(Tensor(2, 2));
  t.backward(sum(t, segment_mean(t, x, {0, 2})));
  EXPECT_EQ(t.grad(x), (Tensor{{0.5, 0.5}, {0.5, 0.5}}));
}

TEST(Backward, NonScalarLossIsContractError) {
  Tape t;
  const Var x = t.variable(Tensor(2, 1));
  EXPECT_THROW(t.backward(x), hmil::ContractError);
}

TEST(Backward, UntouchedVariableHasZeroGrad) {
  Tape t;
  const Var used = t.variable({{1}});
  const Var unused = t.variable({{5, 5}});
  t.backward(sum(t, used));
  EXPECT_EQ(t.grad(unused), (Tensor{{0, 0}}));
}

// Every op against central differences over random shapes and seeds.
TEST(Backward, RandomizedFiniteDifferences) {
  Rng rng(2024);
  double worst = 0.0;
  for (int trial = 0; trial < 120; ++trial) {
    const std::size_t n = 1 + rng.below(4), d = 1 + rng.below(4), k = 1 + rng.below(4);
    const Tensor proj = random_tensor(n, k, rng);
    for (Activation act : {Activation::tanh, Activation::relu, Activation::identity}) {
      // Keep relu pre-activations away from the kink so differences are exact.
      Tensor x = random_tensor(n, d, rng), w = random_tensor(d, k, rng), b = random_tensor(1, k, rng);
      if (act == Activation::relu) {
        Tape probe;
        const Tensor pre = probe.value(dense_forward(probe, probe.constant(x), probe.constant(w), probe.constant(b),
                                                     Activation::identity));
        bool near_kink = false;
        for (double v : pre.data()) near_kink = near_kink || std::abs(v) < 1e-3;
        if (near_kink) continue;
      }
      worst = std::max(worst, gradient_error({x, w, b}, [&](Tape& t, const std::vector<Var>& v) {
        return weighted_sum(t, dense_forward(t, v[0], v[1], v[2], act), proj);
      }));
    }
    const auto offs = random_offsets(1 + rng.below(4), rng, 4, true);
    const std::size_t rows = offs.back();
    if (rows > 0) {
      const Tensor inst = random_tensor(rows, k, rng);
      const Tensor sproj = random_tensor(offs.size() - 1, k, rng);
      worst = std::max(worst, gradient_error({inst}, [&](Tape& t, const std::vector<Var>& v) {
        return weighted_sum(t, segment_mean(t, v[0], offs), sproj);
      }));
      worst = std::max(worst, gradient_error({inst}, [&](Tape& t, const std::vector<Var>& v) {
        return weighted_sum(t, segment_max(t, v[0], offs), sproj);
      }));
    }
    const Tensor a = random_tensor(n, d, rng), c = random_tensor(n, k, rng);
    const Tensor cproj = random_tensor(n, d + k, rng);
    worst = std::max(worst, gradient_error({a, c}, [&](Tape& t, const std::vector<Var>& v) {
      return weighted_sum(t, concat_cols(t, {v[0], v[1]}), cproj);
    }));
    std::vector<double> scale(n);
    for (double& s : scale) s = rng.uniform(-1, 1);
    const Tensor aproj = random_tensor(n, d, rng);
    worst = std::max(worst, gradient_error({a}, [&](Tape& t, const std::vector<Var>& v) {
      return weighted_sum(t, scale_rows(t, v[0], scale), aproj);
    }));
    worst = std::max(worst, gradient_error({a}, [&](Tape& t, const std::vector<Var>& v) { return sum(t, v[0]); }));
  }
  EXPECT_LT(worst, 1e-4);
}

TEST(Activation, TanhOutputsStayInOpenInterval) {
  Rng rng(3);
  Tape t;
  const Tensor x = random_tensor(50, 4, rng, 30.0);
  const Tensor y = t.value(dense_forward(t, t.constant(x), t.constant(random_tensor(4, 6, rng, 3.0)),
                                         t.constant(Tensor(1, 6)), Activation::tanh));
  for (double v : y.data()) {
    EXPECT_LE(v, 1.0);
    EXPECT_GE(v, -1.0);
  }
  EXPECT_TRUE(y.all_finite());
}

TEST(Activation, IdentityIsNotANetworkNonlinearity) {
  EXPECT_TRUE(is_nonpolynomial(Activation::tanh));
  EXPECT_TRUE(is_nonpolynomial(Activation::relu));
  EXPECT_FALSE(is_nonpolynomial(Activation::identity));
}

TEST(Determinism, IdenticalInputsGiveBitIdenticalOutputs) {
  auto run = [] {
    Rng rng(99);
    Tape t;
    const Var x = t.variable(random_tensor(7, 3, rng));
    const Var w = t.variable(random_tensor(3, 5, rng));
    const Var y = segment_mean(t, dense_forward(t, x, w, t.constant(Tensor(1, 5)), Activation::tanh), {0, 3, 7});
    t.backward(sum(t, y));
    return std::pair{t.value(y), t.grad(w)};
  };
  EXPECT_EQ(run(), run());
}

TEST(Adam, ZeroGradientLeavesParamsUnchanged) {
  Tensor p{{1.5, -2.0}};
  const Tensor before = p;
  AdamState state;
  std::vector<Tensor*> params{&p};
  std::vector<Tensor> grads{Tensor(1, 2)};
  for (int i = 0; i < 3; ++i) adam_step(params, grads, state, {});
  EXPECT_EQ(p, before);
}

TEST(Adam, FirstStepMatchesHandEvaluation) {
  Tensor p{{0.0}};
  AdamState state;
  std::vector<Tensor*> params{&p};
  std::vector<Tensor> grads{Tensor{{1.0}}};
  adam_step(params, grads, state, {0.1, 0.9, 0.999, 1e-8});
  // m̂ = 1, v̂ = 1: p = -0.1 / (1 + 1e-8).
  EXPECT_NEAR(p(0, 0), -0.09999999900000009, 1e-12);
}

TEST(Adam, IdenticalParamsUpdateIdentically) {
  Tensor a{{0.3}}, b{{0.3}};
  AdamState state;
  std::vector<Tensor*> params{&a, &b};
  std::vector<Tensor> grads{Tensor{{-0.7}}, Tensor{{-0.7}}};
  for (int i = 0; i < 5; ++i) adam_step(params, grads, state, {});
  EXPECT_EQ(a, b);
}

TEST(Adam, ShapeMismatch) {
  Tensor p(1, 2);
  AdamState state;
  std::vector<Tensor*> params{&p};
  std::vector<Tensor> grads{Tensor(2, 1)};
  EXPECT_THROW(adam_step(params, grads, state, {}), hmil::DimensionError);
}

TEST(Init, GlorotBoundsAndSeeding) {
  Rng a(5), b(5);
  const Tensor w = glorot_uniform(10, 6, a);
  EXPECT_EQ(w, glorot_uniform(10, 6, b));
  const double limit = std::sqrt(6.0 / 16.0);
  for (double v : w.data()) EXPECT_LE(std::abs(v), limit);
}
