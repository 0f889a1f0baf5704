#include <gtest/gtest.h>

#include <vector>

#include "hmil/batching.hpp"
#include "hmil/synthetic.hpp"

using namespace hmil;

namespace {

std::vector<EncodedDoc> encode_all(const std::vector<Json>& docs, const Schema& s) {
  std::vector<EncodedDoc> out;
  for (const auto& d : docs) out.push_back(encode_document(d, s));
  return out;
}

std::vector<Json> parse_all(std::initializer_list<const char*> docs) {
  std::vector<Json> out;
  for (const char* d : docs) out.push_back(Json::parse(d));
  return out;
}

}  // namespace

TEST(BuildBatch, FlatBagOffsets) {
  const auto docs = parse_all({"[1,2]", "[]", "[3]"});
  const Schema s = infer_schema(docs);
  const RaggedBatch b = build_batch(encode_all(docs, s), s);
  EXPECT_EQ(b.size(), 3u);
  EXPECT_EQ(b.root.offsets, (nn::Offsets{0, 2, 2, 3}));
  const BatchNode& leaf = b.root.children.front();
  EXPECT_EQ(leaf.rows, 3u);
  EXPECT_EQ(leaf.leaf.shape(), "[3x1]");
  // standardized with mean 2, population sd sqrt(2/3)
  EXPECT_LT(leaf.leaf(0, 0), 0.0);
  EXPECT_DOUBLE_EQ(leaf.leaf(1, 0), 0.0);
  EXPECT_GT(leaf.leaf(2, 0), 0.0);
}

TEST(BuildBatch, NestedBagsUseAbsoluteOffsets) {
  const auto docs = parse_all({"[[1],[2,3]]", "[[4,5,6]]"});
  const Schema s = infer_schema(docs);
  const RaggedBatch b = build_batch(encode_all(docs, s), s);
  EXPECT_EQ(b.root.offsets, (nn::Offsets{0, 2, 3}));
  const BatchNode& inner = b.root.children.front();
  EXPECT_EQ(inner.rows, 3u);
  EXPECT_EQ(inner.offsets, (nn::Offsets{0, 1, 3, 6}));
  EXPECT_EQ(inner.children.front().rows, 6u);
}

TEST(BuildBatch, ProductPresenceColumns) {
  const auto docs = parse_all({R"({"a":1,"b":[1]})", R"({"a":2})", R"({"a":3,"b":[]})"});
  const Schema s = infer_schema(parse_all({R"({"a":1,"b":[1]})", R"({"a":2})"}));
  const RaggedBatch b = build_batch(encode_all(docs, s), s);
  ASSERT_EQ(b.root.presence.size(), 2u);
  EXPECT_EQ(b.root.presence[0], (std::vector<double>{1, 1, 1}));
  EXPECT_EQ(b.root.presence[1], (std::vector<double>{1, 0, 1}));
  EXPECT_EQ(b.root.children[1].offsets, (nn::Offsets{0, 1, 1, 1}));
  EXPECT_EQ(b.root.children[0].rows, 3u);
}

TEST(BuildBatch, Errors) {
  const Schema s = infer_schema(parse_all({"[1]"}));
  EXPECT_THROW(build_batch(std::span<const EncodedDoc>{}, s), StructuralError);
  const Schema other = infer_schema(parse_all({R"({"a":1})"}));
  const auto docs = encode_all(parse_all({R"({"a":1})"}), other);
  EXPECT_THROW(build_batch(docs, s), StructuralError);
  EXPECT_THROW(build_batch(docs, Schema::unknown()), StructuralError);
}

TEST(BuildBatch, WidthMismatchIsStructural) {
  const Schema s = infer_schema(parse_all({R"(["a","b"])"}));
  EncodedDoc bad = encode_document(Json::parse(R"(["a"])"), s);
  bad.items[0].values.push_back(0.0);
  EXPECT_THROW(build_batch(std::vector<EncodedDoc>{bad}, s), StructuralError);
}

TEST(SliceBatch, MatchesBatchOfSubset) {
  for (std::uint64_t seed = 0; seed < 30; ++seed) {
    Rng rng(seed);
    const Shape shape = random_shape(rng, 1 + static_cast<int>(seed % 3));
    const auto docs = random_corpus(shape, rng, 12);
    const Schema s = infer_schema(docs);
    const auto enc = encode_all(docs, s);
    const RaggedBatch full = build_batch(enc, s);
    const std::size_t lo = rng.below(6), hi = lo + 1 + rng.below(6);
    const RaggedBatch part = build_batch(std::span(enc).subspan(lo, hi - lo), s);
    EXPECT_EQ(slice_batch(full, lo, hi), part) << seed;
  }
  const Schema s = infer_schema(parse_all({"[1]"}));
  const RaggedBatch b = build_batch(encode_all(parse_all({"[1]"}), s), s);
  EXPECT_THROW(slice_batch(b, 0, 2), StructuralError);
}

TEST(BuildBatch, PointerOverloadPreservesOrder) {
  const auto docs = parse_all({"[1]", "[2,2]", "[3,3,3]"});
  const Schema s = infer_schema(docs);
  const auto enc = encode_all(docs, s);
  const std::vector<const EncodedDoc*> order{&enc[2], &enc[0]};
  const RaggedBatch b = build_batch(std::span<const EncodedDoc* const>(order), s);
  EXPECT_EQ(b.root.offsets, (nn::Offsets{0, 3, 4}));
}
