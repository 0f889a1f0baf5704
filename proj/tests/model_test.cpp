#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <vector>

#include "hmil/model.hpp"
#include "hmil/synthetic.hpp"
#include "hmil/verification.hpp"

using namespace hmil;

namespace {

Schema schema_of(std::initializer_list<const char*> docs) {
  std::vector<Json> js;
  for (const char* d : docs) js.push_back(Json::parse(d));
  return infer_schema(js);
}

RaggedBatch batch_of(const Schema& s, std::initializer_list<const char*> docs) {
  std::vector<EncodedDoc> enc;
  for (const char* d : docs) enc.push_back(encode_document(Json::parse(d), s));
  return build_batch(enc, s);
}

nn::Tensor identity(std::size_t n, double scale = 1.0) {
  nn::Tensor t(n, n);
  for (std::size_t i = 0; i < n; ++i) t(i, i) = scale;
  return t;
}

}  // namespace

TEST(BuildModel, BagOfNumbersShape) {
  const Schema s = schema_of({"[1,2]"});
  ModelConfig cfg;
  cfg.embed_dim = 8;
  cfg.hidden_dim = 5;
  cfg.output_dim = 2;
  const Model m = build_model(s, cfg);
  const auto& bag = dynamic_cast<const BagModule&>(m.root());
  EXPECT_EQ(bag.phi().in(), 1u);
  EXPECT_EQ(bag.phi().out(), 8u);
  EXPECT_EQ(bag.phi().activation, nn::Activation::tanh);
  EXPECT_EQ(bag.aggregation(), Aggregation::mean);
  EXPECT_EQ(bag.post().in(), 9u);  // 8 plus the non-empty indicator
  EXPECT_EQ(bag.post().out(), 8u);
  EXPECT_EQ(bag.post().activation, nn::Activation::identity);
  ASSERT_EQ(m.head().hidden.size(), 1u);
  EXPECT_EQ(m.head().hidden[0].in(), 8u);
  EXPECT_EQ(m.head().hidden[0].out(), 5u);
  EXPECT_EQ(m.head().output.out(), 2u);
  EXPECT_EQ(m.head().output.activation, nn::Activation::identity);
  EXPECT_EQ(m.predict(batch_of(s, {"[1]", "[2,3]"})).shape(), "[2x2]");
}

TEST(BuildModel, SmallestProduct) {
  const Schema s = schema_of({R"({"a":1,"b":2})"});
  ModelConfig cfg;
  cfg.hidden_dim = 4;
  const Model m = build_model(s, cfg);
  const auto& prod = dynamic_cast<const ProductModule&>(m.root());
  ASSERT_EQ(prod.fields().size(), 2u);
  EXPECT_EQ(prod.combiner().in(), 2u);
  EXPECT_EQ(prod.combiner().out(), 4u);
}

TEST(BuildModel, OptionalFieldAddsPresenceColumn) {
  const Schema s = schema_of({R"({"a":1,"b":2})", R"({"a":1})"});
  const Model m = build_model(s, {});
  EXPECT_EQ(dynamic_cast<const ProductModule&>(m.root()).combiner().in(), 3u);
}

TEST(BuildModel, BagOfBagsAlternatesLayers) {
  const Schema s = schema_of({"[[1,2],[3]]"});
  const Model m = build_model(s, {});
  const auto& outer = dynamic_cast<const BagModule&>(m.root());
  const auto& inner = dynamic_cast<const BagModule&>(outer.child());
  EXPECT_EQ(inner.path(), "$[*]");
  EXPECT_EQ(inner.phi().activation, nn::Activation::tanh);
  EXPECT_EQ(outer.phi().activation, nn::Activation::tanh);
  EXPECT_EQ(outer.phi().in(), inner.output_width());
  EXPECT_EQ(m.head().hidden.front().activation, nn::Activation::tanh);
  EXPECT_EQ(m.head().output.activation, nn::Activation::identity);
}

TEST(BuildModel, ParameterCountIsClosedForm) {
  for (std::uint64_t seed = 0; seed < 40; ++seed) {
    Rng rng(seed);
    const auto docs = random_corpus(random_shape(rng, 1 + static_cast<int>(seed % 3)), rng, 10);
    const Schema s = infer_schema(docs);
    ModelConfig cfg = verify::detail::random_model_config(rng);
    cfg.aggregation = seed % 4 == 0 ? Aggregation::mean_max : Aggregation::mean;
    cfg.two_matrix = seed % 5 == 0;
    EXPECT_EQ(build_model(s, cfg).parameter_count(), expected_parameter_count(s, cfg)) << seed;
  }
}

TEST(BuildModel, SameSeedSameWeights) {
  const Schema s = schema_of({R"({"a":[1,2],"b":"xy"})"});
  ModelConfig cfg;
  cfg.seed = 9;
  EXPECT_EQ(serialize_model(build_model(s, cfg)), serialize_model(build_model(s, cfg)));
  cfg.seed = 10;
  const std::string other = serialize_model(build_model(s, cfg));
  cfg.seed = 9;
  EXPECT_NE(serialize_model(build_model(s, cfg)), other);
}

TEST(BuildModel, RejectsBadInput) {
  EXPECT_THROW(build_model(Schema::unknown(), {}), BuildError);
  ModelConfig cfg;
  cfg.embed_dim = 0;
  EXPECT_THROW(build_model(schema_of({"[1]"}), cfg), UsageError);
  cfg.embed_dim = 4;
  cfg.activation = nn::Activation::identity;
  EXPECT_THROW(build_model(schema_of({"[1]"}), cfg), UsageError);
}

TEST(Forward, ReluIdentityReducesToSegmentMean) {
  DenseLayer phi{identity(2), nn::Tensor(1, 2), nn::Activation::relu};
  DenseLayer post{identity(2), nn::Tensor(1, 2), nn::Activation::identity};
  auto leaf = std::make_unique<LeafEncoderModule>("$[*]", SchemaKind::numeric, 2, std::nullopt);
  auto bag = std::make_unique<BagModule>("$", std::move(leaf), phi, std::nullopt, Aggregation::mean, false, post);
  OutputHead head{{}, DenseLayer{identity(2), nn::Tensor(1, 2), nn::Activation::identity}};
  ModelConfig cfg;
  cfg.head_layers = 0;
  const Model m(Schema::unknown(), cfg, std::move(bag), head);

  RaggedBatch b;
  b.root.kind = SchemaKind::bag;
  b.root.rows = 1;
  b.root.offsets = {0, 2};
  BatchNode x;
  x.kind = SchemaKind::numeric;
  x.rows = 2;
  x.leaf = nn::Tensor{{1, 3}, {3, 5}};
  b.root.children.push_back(x);

  EXPECT_EQ(embed(m, b, "$"), (nn::Tensor{{2, 4}}));
  EXPECT_EQ(m.predict(b), (nn::Tensor{{2, 4}}));
}

TEST(Forward, DuplicatedSingletonIsIdempotent) {
  const Schema s = schema_of({"[1,2,3]", "[4]"});
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    ModelConfig cfg;
    cfg.seed = seed;
    const Model m = build_model(s, cfg);
    const nn::Tensor once = m.predict(batch_of(s, {"[2.5]"}));
    const nn::Tensor twice = m.predict(batch_of(s, {"[2.5,2.5]"}));
    EXPECT_LT(nn::max_abs_diff(once, twice), 1e-15);
  }
}

TEST(Forward, SchemaMismatchIsStructural) {
  const Model m = build_model(schema_of({"[1]"}), {});
  const Schema other = schema_of({R"({"a":1})"});
  EXPECT_THROW(m.predict(batch_of(other, {R"({"a":1})"})), StructuralError);
}

TEST(Embed, TanhCoordinatesInOpenUnitInterval) {
  Rng rng(4);
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    const auto docs = random_corpus(detail::random_bag_shape(rng, 1), rng, 8);
    const Schema s = infer_schema(docs);
    ModelConfig cfg;
    cfg.seed = seed;
    const Model m = build_model(s, cfg);
    const nn::Tensor h = embed(m, verify::detail::encode_batch(docs, s), "$");
    for (double v : h.data()) {
      EXPECT_GT(v, -1.0);
      EXPECT_LT(v, 1.0);
    }
  }
}

TEST(Embed, EqualMultisetsEmbedEqually) {
  const Schema s = schema_of({"[1,2,3]"});
  const Model m = build_model(s, {});
  const nn::Tensor h = embed(m, batch_of(s, {"[1,2,3]", "[3,1,2]", "[1,2,3,1,2,3]"}), "$");
  for (std::size_t j = 0; j < h.cols(); ++j) {
    EXPECT_NEAR(h(0, j), h(1, j), 1e-9);
    EXPECT_NEAR(h(0, j), h(2, j), 1e-9);
  }
}

TEST(Embed, NestedPathAndLinearStage) {
  const Schema s = schema_of({R"({"xs":[[1,2],[3]],"y":1})"});
  const Model m = build_model(s, {});
  const RaggedBatch b = batch_of(s, {R"({"xs":[[1,2],[3]],"y":1})", R"({"xs":[[4]],"y":2})"});
  EXPECT_EQ(embed(m, b, "$.xs").rows(), 2u);
  EXPECT_EQ(embed(m, b, "$.xs[*]").rows(), 3u);
  EXPECT_EQ(embed(m, b, "$.xs", EmbedStage::linear).cols(), m.config().embed_dim);
  EXPECT_THROW(embed(m, b, "$"), UsageError);
  EXPECT_THROW(embed(m, b, "$.y"), UsageError);
  EXPECT_THROW(embed(m, b, "$.nope"), UsageError);
}

TEST(Collapse, IdentityAndScalarFactors) {
  const Schema s = schema_of({"[1,2]", "[3]"});
  ModelConfig cfg;
  cfg.embed_dim = 4;
  cfg.two_matrix = true;
  const std::vector<RaggedBatch> batches{batch_of(s, {"[1,2]", "[3,0.5,2]"}), batch_of(s, {"[-1]"})};

  Model two = build_model(s, cfg);
  auto& bag = dynamic_cast<BagModule&>(two.root());
  *bag.pre_aggregation() = identity(4);
  Rng rng(1);
  bag.post().weight = nn::glorot_uniform(5, 4, rng);
  Model one = two;
  dynamic_cast<BagModule&>(one.root()).pre_aggregation().reset();
  EXPECT_EQ(collapse_equivalence_check(two, one, batches), 0.0);

  // 2I then 3I against 6I
  *bag.pre_aggregation() = identity(4, 2.0);
  for (std::size_t j = 0; j < 4; ++j) {
    for (std::size_t i = 0; i < 5; ++i) bag.post().weight(i, j) = i == j ? 3.0 : 0.0;
  }
  auto& w = dynamic_cast<BagModule&>(one.root()).post().weight;
  for (std::size_t j = 0; j < 4; ++j) {
    for (std::size_t i = 0; i < 5; ++i) w(i, j) = i == j ? 6.0 : 0.0;
  }
  EXPECT_LT(collapse_equivalence_check(two, one, batches), 1e-12);
  EXPECT_LT(collapse_equivalence_check(two, collapse(two), batches), 1e-12);
}

TEST(Collapse, RandomEightByEight) {
  const Schema s = schema_of({"[[1,2],[3]]"});
  ModelConfig cfg;
  cfg.embed_dim = 8;
  cfg.two_matrix = true;
  cfg.seed = 5;
  const Model two = build_model(s, cfg);
  const Model one = collapse(two);
  EXPECT_FALSE(one.config().two_matrix);
  EXPECT_EQ(one.parameter_count(), expected_parameter_count(s, one.config()));
  Rng rng(6);
  std::vector<RaggedBatch> batches;
  for (int i = 0; i < 100; ++i) {
    std::vector<Json> docs(4, Json::array());
    for (auto& d : docs) {
      for (auto n = rng.between(1, 4); n > 0; --n) {
        Json inner = Json::array();
        for (auto l = rng.between(1, 5); l > 0; --l) inner.push_back(rng.normal(0.0, 3.0));
        d.push_back(std::move(inner));
      }
    }
    batches.push_back(verify::detail::encode_batch(docs, s));
  }
  EXPECT_LT(collapse_equivalence_check(two, one, batches), 1e-10);
}

TEST(Collapse, RejectsNonMeanAndSchemaMismatch) {
  const Schema s = schema_of({"[1,2]"});
  ModelConfig cfg;
  cfg.two_matrix = true;
  cfg.aggregation = Aggregation::max;
  EXPECT_THROW(collapse(build_model(s, cfg)), StructuralError);
  cfg.aggregation = Aggregation::mean;
  const Model other = build_model(schema_of({"[[1]]"}), cfg);
  EXPECT_THROW(collapse_equivalence_check(build_model(s, cfg), other, {}), StructuralError);
}

class ModelFile : public ::testing::Test {
 protected:
  void TearDown() override { std::filesystem::remove(path_); }
  std::string path_ = (std::filesystem::temp_directory_path() / "hmil_model_test.bin").string();
};

TEST_F(ModelFile, RoundTripIsExact) {
  const Schema s = infer_schema(std::vector<Json>{verify::workouts_document()});
  ModelConfig cfg;
  cfg.seed = 3;
  cfg.output_dim = 3;
  cfg.aggregation = Aggregation::mean_max;
  const Model m = build_model(s, cfg, {{"task", "regression"}});
  save_model(m, path_);
  const Model back = load_model(path_);
  const RaggedBatch b = verify::detail::encode_batch(std::vector<Json>{verify::workouts_document()}, s);
  EXPECT_EQ(m.predict(b), back.predict(b));
  EXPECT_EQ(back.config(), cfg);
  EXPECT_EQ(back.metadata(), m.metadata());
  EXPECT_EQ(serialize_model(back), serialize_model(m));
}

TEST_F(ModelFile, CorruptionIsLoadError) {
  const Model m = build_model(schema_of({R"({"a":1,"b":2})"}), {});
  const std::string bytes = serialize_model(m);
  for (std::size_t cut : {std::size_t{0}, std::size_t{3}, std::size_t{10}, bytes.size() / 2, bytes.size() - 1}) {
    EXPECT_THROW(deserialize_model(std::string_view(bytes).substr(0, cut)), LoadError) << cut;
  }
  EXPECT_THROW(deserialize_model(bytes + "x"), LoadError);
  std::string magic = bytes;
  magic[0] = 'X';
  EXPECT_THROW(deserialize_model(magic), LoadError);
  std::string version = bytes;
  version[4] = 9;
  EXPECT_THROW(deserialize_model(version), LoadError);
  EXPECT_THROW(load_model(path_ + ".missing"), LoadError);
}
