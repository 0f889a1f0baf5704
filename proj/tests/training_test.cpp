#include <gtest/gtest.h>

#include <cmath>
#include <limits>
#include <vector>

#include "hmil/training.hpp"
#include "hmil/verification.hpp"

using namespace hmil;

namespace {

double ce(const nn::Tensor& logits, const std::vector<std::size_t>& labels) {
  nn::Tape tape;
  return tape.value(loss_softmax_ce(tape, tape.constant(logits), labels))(0, 0);
}

double mse(const nn::Tensor& pred, const nn::Tensor& target) {
  nn::Tape tape;
  return tape.value(loss_mse(tape, tape.constant(pred), target))(0, 0);
}

/// Singleton bags [x] labelled by the sign of x.
Dataset sign_task(std::size_t n, std::uint64_t seed, Schema& schema) {
  Rng rng(seed);
  std::vector<Json> docs;
  std::vector<std::size_t> labels;
  for (std::size_t i = 0; i < n; ++i) {
    double x = rng.normal();
    if (std::abs(x) < 0.05) x = std::copysign(0.05, x);
    docs.push_back(Json::array({x}));
    labels.push_back(x > 0 ? 1 : 0);
  }
  schema = infer_schema(docs);
  Dataset d;
  for (const auto& doc : docs) d.docs.push_back(encode_document(doc, schema));
  d.labels = labels;
  return d;
}

double full_loss(const Model& m, const Dataset& d) {
  nn::Tape tape;
  ForwardContext ctx(tape, false);
  const nn::Var out = m.forward(ctx, build_batch(d.docs, m.schema()));
  return tape.value(loss_softmax_ce(tape, out, d.labels))(0, 0);
}

ModelConfig small_config(std::uint64_t seed) {
  ModelConfig c;
  c.embed_dim = 4;
  c.hidden_dim = 4;
  c.output_dim = 2;
  c.seed = seed;
  return c;
}

}  // namespace

TEST(SoftmaxCrossEntropy, UniformLogitsGiveLogTwo) {
  EXPECT_NEAR(ce(nn::Tensor{{0, 0}, {3, 3}}, {0, 1}), std::log(2.0), 1e-15);
}

TEST(SoftmaxCrossEntropy, SaturatedMarginIsTiny) {
  const double l = ce(nn::Tensor{{100, 0}, {0, 100}}, {0, 1});
  EXPECT_LT(l, 1e-10);
  EXPECT_GE(l, 0.0);
  // no overflow for huge logits
  EXPECT_NEAR(ce(nn::Tensor{{1000, 0}}, {1}), 1000.0, 1e-9);
}

TEST(SoftmaxCrossEntropy, GradientMatchesFiniteDifferences) {
  const std::vector<std::size_t> labels{2, 0, 1};
  const double err = verify::gradient_error({nn::Tensor{{0.3, -1.2, 0.5}, {2.0, 0.1, -0.4}, {-0.7, 0.9, 0.2}}},
                                            [&](nn::Tape& t, const std::vector<nn::Var>& v) {
                                              return loss_softmax_ce(t, v[0], labels);
                                            });
  EXPECT_LT(err, 1e-4);
}

TEST(SoftmaxCrossEntropy, Errors) {
  EXPECT_THROW(ce(nn::Tensor{{0, 0}}, {2}), ContractError);
  EXPECT_THROW(ce(nn::Tensor{{0, 0}}, {0, 1}), DimensionError);
  EXPECT_THROW(ce(nn::Tensor(0, 2), {}), DimensionError);
}

TEST(MeanSquaredError, Values) {
  const nn::Tensor t{{1, 2}, {3, 4}};
  EXPECT_EQ(mse(t, t), 0.0);
  EXPECT_EQ(mse(nn::Tensor{{2, 3}, {4, 5}}, t), 1.0);
  EXPECT_THROW(mse(nn::Tensor{{1, 2}}, t), DimensionError);
}

TEST(MeanSquaredError, AnalyticGradient) {
  const nn::Tensor p{{0.5, -1.0, 2.0}, {0.0, 1.5, -0.5}};
  const nn::Tensor y{{1.0, 0.0, 2.5}, {-1.0, 1.0, 0.0}};
  nn::Tape tape;
  const nn::Var v = tape.variable(p);
  tape.backward(loss_mse(tape, v, y));
  const nn::Tensor g = tape.grad(v);
  for (std::size_t i = 0; i < p.size(); ++i) {
    EXPECT_DOUBLE_EQ(g.data()[i], 2.0 * (p.data()[i] - y.data()[i]) / 6.0);
  }
  const double err =
      verify::gradient_error({p}, [&](nn::Tape& t, const std::vector<nn::Var>& x) { return loss_mse(t, x[0], y); });
  EXPECT_LT(err, 1e-4);
}

TEST(Train, ZeroEpochsLeavesModelUntouched) {
  Schema s;
  const Dataset d = sign_task(20, 1, s);
  Model m = build_model(s, small_config(1));
  const std::string before = serialize_model(m);
  TrainConfig cfg;
  cfg.epochs = 0;
  const TrainingReport r = train(m, d, cfg);
  EXPECT_EQ(r.epochs(), 0u);
  EXPECT_TRUE(r.loss.empty());
  EXPECT_EQ(serialize_model(m), before);
}

TEST(Train, SeparableSingletonsReachPerfectAccuracy) {
  Schema s;
  const Dataset d = sign_task(200, 2, s);
  Model m = build_model(s, small_config(2));
  TrainConfig cfg;
  cfg.epochs = 50;
  cfg.lr = 0.05;
  const TrainingReport r = train(m, d, cfg);
  EXPECT_EQ(r.epochs(), 50u);
  EXPECT_EQ(evaluate(m, d, Metric::accuracy), 1.0);
  EXPECT_LT(r.loss.back(), r.loss.front());
}

TEST(Train, SameSeedSameCurves) {
  Schema s;
  const Dataset d = sign_task(64, 3, s);
  TrainConfig cfg;
  cfg.epochs = 5;
  cfg.batch_size = 7;
  cfg.seed = 11;
  Model a = build_model(s, small_config(4));
  Model b = build_model(s, small_config(4));
  const TrainingReport ra = train(a, d, cfg);
  const TrainingReport rb = train(b, d, cfg);
  ASSERT_EQ(ra.loss.size(), rb.loss.size());
  for (std::size_t e = 0; e < ra.loss.size(); ++e) {
    EXPECT_EQ(std::bit_cast<std::uint64_t>(ra.loss[e]), std::bit_cast<std::uint64_t>(rb.loss[e]));
  }
  EXPECT_EQ(serialize_model(a), serialize_model(b));
  cfg.seed = 12;
  Model c = build_model(s, small_config(4));
  train(c, d, cfg);
  EXPECT_NE(serialize_model(c), serialize_model(a));
}

TEST(Train, TinyStepDoesNotIncreaseLoss) {
  Schema s;
  const Dataset d = sign_task(50, 5, s);
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    Model m = build_model(s, small_config(seed));
    const double before = full_loss(m, d);
    TrainConfig cfg;
    cfg.epochs = 1;
    cfg.batch_size = d.size();
    cfg.lr = 1e-8;
    train(m, d, cfg);
    EXPECT_LE(full_loss(m, d), before + 1e-9);
  }
}

TEST(Train, RegressionWithMse) {
  Rng rng(6);
  std::vector<Json> docs;
  for (int i = 0; i < 100; ++i) {
    Json bag = Json::array();
    for (auto n = rng.between(1, 6); n > 0; --n) bag.push_back(rng.normal());
    docs.push_back(bag);
  }
  const Schema s = infer_schema(docs);
  Dataset d;
  d.targets = nn::Tensor(docs.size(), 1);
  for (std::size_t i = 0; i < docs.size(); ++i) {
    d.docs.push_back(encode_document(docs[i], s));
    d.targets(i, 0) = static_cast<double>(docs[i].size()) > 3 ? 1.0 : -1.0;
  }
  ModelConfig mc = small_config(6);
  mc.output_dim = 1;
  Model m = build_model(s, mc);
  TrainConfig cfg;
  cfg.loss = LossKind::mse;
  cfg.epochs = 30;
  cfg.lr = 0.01;
  const double before = evaluate(m, d, Metric::mse);
  const TrainingReport r = train(m, d, cfg);
  EXPECT_EQ(r.metric, "mse");
  EXPECT_LT(evaluate(m, d, Metric::mse), before);
}

TEST(Train, NonFiniteLossAborts) {
  Schema s;
  const Dataset d = sign_task(40, 7, s);
  Model m = build_model(s, small_config(7));
  m.head().output.bias(0, 0) = std::numeric_limits<double>::quiet_NaN();
  TrainConfig cfg;
  cfg.epochs = 3;
  try {
    train(m, d, cfg);
    FAIL();
  } catch (const TrainingAborted& e) {
    EXPECT_EQ(e.epoch(), 0u);
    EXPECT_EQ(e.batch(), 0u);
  }
}

TEST(Train, BadConfigAndData) {
  Schema s;
  Dataset d = sign_task(10, 8, s);
  Model m = build_model(s, small_config(8));
  TrainConfig cfg;
  cfg.batch_size = 0;
  EXPECT_THROW(train(m, d, cfg), UsageError);
  cfg = {};
  cfg.lr = 0.0;
  EXPECT_THROW(train(m, d, cfg), UsageError);
  cfg = {};
  EXPECT_THROW(train(m, Dataset{}, cfg), UsageError);
  d.labels[0] = 5;
  EXPECT_THROW(train(m, d, cfg), UsageError);
  EXPECT_THROW(train_config_from_json(Json::parse(R"({"epoch":3})")), UsageError);
  EXPECT_EQ(train_config_from_json(Json::parse(R"({"epochs":3,"loss":"mse"})")).epochs, 3u);
  EXPECT_THROW(parse_loss("hinge"), UsageError);
}

TEST(Evaluate, PerfectAndConstantPredictors) {
  const Schema s = infer_schema(std::vector<Json>{Json::parse("[1]"), Json::parse("[-1]")});
  ModelConfig mc = small_config(9);
  mc.head_layers = 0;
  Model m = build_model(s, mc);
  auto& out = m.head().output;
  for (double& w : out.weight.data()) w = 0.0;
  out.bias = nn::Tensor{{1.0, 0.0}};
  Dataset d;
  for (const char* doc : {"[1]", "[-1]", "[2]", "[-2]"}) d.docs.push_back(encode_document(Json::parse(doc), s));
  d.labels = {1, 0, 1, 0};
  EXPECT_EQ(evaluate(m, d, Metric::accuracy), 0.5);

  d.labels = {0, 0, 0, 0};
  EXPECT_EQ(evaluate(m, d, Metric::accuracy), 1.0);
  EXPECT_THROW(evaluate(m, Dataset{}, Metric::accuracy), UsageError);
}

TEST(Evaluate, MatchesRecomputeFromPredictionDump) {
  Schema s;
  const Dataset d = sign_task(300, 10, s);
  Model m = build_model(s, small_config(10));
  TrainConfig cfg;
  cfg.epochs = 2;
  train(m, d, cfg);
  // dump scores row by row as JSON, parse back, recount
  const nn::Tensor scores = predict_scores(m, d.docs, 17);
  Json dump = Json::array();
  for (std::size_t r = 0; r < scores.rows(); ++r) dump.push_back({scores(r, 0), scores(r, 1)});
  const Json back = Json::parse(dump.dump());
  std::size_t hit = 0;
  for (std::size_t r = 0; r < back.size(); ++r) {
    const std::size_t pred = back[r][1].get<double>() > back[r][0].get<double>() ? 1 : 0;
    hit += pred == d.labels[r] ? 1 : 0;
  }
  EXPECT_EQ(evaluate(m, d, Metric::accuracy), static_cast<double>(hit) / static_cast<double>(d.size()));
}
