#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <memory>
#include <numeric>
#include <string>
#include <utility>
#include <vector>

#include "hmil/rng.hpp"
#include "hmil/schema.hpp"

// Random document generators for property checks, and the labelled corpora
// behind the benchmark tasks.

namespace hmil {

struct ShapeField;

/// Skeleton of a document family. Unlike Schema it carries no statistics;
/// it only drives random generation.
struct Shape {
  enum class Kind { number, text, category, bag, product };

  Kind kind = Kind::number;
  std::vector<Shape> element;  // bag: exactly one entry
  std::vector<ShapeField> fields;

  int bag_depth() const;
};

struct ShapeField {
  std::string name;
  bool optional = false;
  Shape shape;
};

inline int Shape::bag_depth() const {
  if (kind == Kind::bag) return 1 + element.front().bag_depth();
  int d = 0;
  for (const auto& f : fields) d = std::max(d, f.shape.bag_depth());
  return d;
}

namespace detail {

inline Shape random_leaf_shape(Rng& rng) {
  const double u = rng.uniform();
  Shape s;
  s.kind = u < 0.6 ? Shape::Kind::number : (u < 0.8 ? Shape::Kind::text : Shape::Kind::category);
  return s;
}

inline Shape random_bag_shape(Rng& rng, int depth);

inline Shape random_product_shape(Rng& rng, int depth) {
  Shape s;
  s.kind = Shape::Kind::product;
  const auto extra = rng.between(0, 2);
  if (depth > 0) {
    s.fields.push_back({"f0", false, random_bag_shape(rng, depth)});
  } else {
    s.fields.push_back({"f0", false, random_leaf_shape(rng)});
  }
  for (std::int64_t i = 1; i <= extra; ++i) {
    const int d = depth > 0 ? static_cast<int>(rng.below(static_cast<std::uint64_t>(depth))) : 0;
    Shape child = d > 0 ? random_bag_shape(rng, d) : random_leaf_shape(rng);
    s.fields.push_back({"f" + std::to_string(i), rng.chance(0.4), std::move(child)});
  }
  return s;
}

inline Shape random_bag_shape(Rng& rng, int depth) {
  Shape s;
  s.kind = Shape::Kind::bag;
  if (depth <= 1) {
    s.element.push_back(rng.chance(0.7) ? random_leaf_shape(rng) : random_product_shape(rng, 0));
  } else {
    s.element.push_back(rng.chance(0.6) ? random_bag_shape(rng, depth - 1) : random_product_shape(rng, depth - 1));
  }
  return s;
}

inline std::string random_word(Rng& rng, std::size_t max_len) {
  static constexpr char alphabet[] = "abcdefghijklmnopqrstuvwxyz";
  std::string out(static_cast<std::size_t>(rng.between(0, static_cast<std::int64_t>(max_len))), 'a');
  for (char& c : out) c = alphabet[rng.below(26)];
  return out;
}

}  // namespace detail

/// A shape whose deepest bag nesting is exactly `depth` (≥ 1).
inline Shape random_shape(Rng& rng, int depth) {
  return rng.chance(0.6) ? detail::random_bag_shape(rng, depth) : detail::random_product_shape(rng, depth);
}

struct DocumentOptions {
  std::size_t min_bag = 1;
  std::size_t max_bag = 6;
  double omit_probability = 0.3;
};

inline Json random_document(const Shape& s, Rng& rng, const DocumentOptions& opt = {}) {
  static const char* const colours[] = {"red", "green", "blue", "cyan", "magenta"};
  switch (s.kind) {
    case Shape::Kind::number: return rng.normal(0.0, 2.0);
    case Shape::Kind::text: return detail::random_word(rng, 10);
    case Shape::Kind::category: return colours[rng.below(5)];
    case Shape::Kind::bag: {
      Json arr = Json::array();
      const auto n = rng.between(static_cast<std::int64_t>(opt.min_bag), static_cast<std::int64_t>(opt.max_bag));
      for (std::int64_t i = 0; i < n; ++i) arr.push_back(random_document(s.element.front(), rng, opt));
      return arr;
    }
    case Shape::Kind::product: {
      Json obj = Json::object();
      for (const auto& f : s.fields) {
        if (f.optional && rng.chance(opt.omit_probability)) continue;
        obj[f.name] = random_document(f.shape, rng, opt);
      }
      return obj;
    }
  }
  return nullptr;
}

inline std::vector<Json> random_corpus(const Shape& s, Rng& rng, std::size_t n, const DocumentOptions& opt = {}) {
  std::vector<Json> out;
  out.reserve(n);
  for (std::size_t i = 0; i < n; ++i) out.push_back(random_document(s, rng, opt));
  return out;
}

/// Documents with class labels, split into train and test parts.
struct LabeledCorpus {
  std::vector<Json> train_docs;
  std::vector<std::size_t> train_labels;
  std::vector<Json> test_docs;
  std::vector<std::size_t> test_labels;
};

namespace detail {

/// n values (n even) drawn as ±x pairs, so the sample mean is exactly zero
/// when summed in document order.
inline Json antithetic_bag(Rng& rng, std::size_t n, double sd) {
  Json arr = Json::array();
  for (std::size_t i = 0; i < n / 2; ++i) {
    const double x = rng.normal(0.0, sd);
    arr.push_back(x);
    arr.push_back(-x);
  }
  return arr;
}

/// Alternating labels, so every split is balanced.
template <class Make>
LabeledCorpus labeled_split(std::size_t n_train, std::size_t n_test, Make&& make) {
  LabeledCorpus c;
  for (std::size_t i = 0; i < n_train + n_test; ++i) {
    auto [doc, label] = make(i);
    auto& docs = i < n_train ? c.train_docs : c.test_docs;
    auto& labels = i < n_train ? c.train_labels : c.test_labels;
    docs.push_back(std::move(doc));
    labels.push_back(label);
  }
  return c;
}

}  // namespace detail

struct VarianceTaskOptions {
  std::size_t n_train = 2000;
  std::size_t n_test = 500;
  std::size_t bag_size = 50;
  double sd_a = 1.0;
  double sd_b = 2.0;
};

/// Bare-array bags of centred 1-D instances, class 0 with sd `sd_a` and class
/// 1 with sd `sd_b`. Every bag has sample mean exactly zero.
inline LabeledCorpus variance_task(std::uint64_t seed, const VarianceTaskOptions& opt = {}) {
  Rng rng(seed);
  return detail::labeled_split(opt.n_train, opt.n_test, [&](std::size_t i) {
    const std::size_t label = i % 2;
    return std::pair{detail::antithetic_bag(rng, opt.bag_size, label ? opt.sd_b : opt.sd_a), label};
  });
}

struct NestedTaskOptions {
  std::size_t n_train = 2000;
  std::size_t n_test = 500;
  std::size_t bags = 10;
  std::size_t bag_size = 10;
  double spread_a = 1.0;
  double spread_b = 2.0;
};

/// Bags of bags. Each document pools bags·bag_size draws from N(0,1) and cuts
/// them into bags after sorting on spread·x + N(0,1). A larger spread makes
/// the inner bags more homogeneous and their means more dispersed, while the
/// pooled instances stay i.i.d. N(0,1) in both classes.
inline LabeledCorpus nested_task(std::uint64_t seed, const NestedTaskOptions& opt = {}) {
  Rng rng(seed);
  const std::size_t total = opt.bags * opt.bag_size;
  return detail::labeled_split(opt.n_train, opt.n_test, [&](std::size_t i) {
    const std::size_t label = i % 2;
    const double spread = label ? opt.spread_b : opt.spread_a;
    std::vector<std::pair<double, double>> keyed(total);
    for (auto& [key, x] : keyed) {
      x = rng.normal();
      key = spread * x + rng.normal();
    }
    std::sort(keyed.begin(), keyed.end());
    Json doc = Json::array();
    for (std::size_t b = 0; b < opt.bags; ++b) {
      Json inner = Json::array();
      for (std::size_t j = 0; j < opt.bag_size; ++j) inner.push_back(keyed[b * opt.bag_size + j].second);
      doc.push_back(std::move(inner));
    }
    std::vector<std::size_t> order(opt.bags);
    std::iota(order.begin(), order.end(), std::size_t{0});
    rng.shuffle(std::span<std::size_t>(order));
    Json shuffled = Json::array();
    for (std::size_t b : order) shuffled.push_back(doc[b]);
    return std::pair{std::move(shuffled), label};
  });
}

/// The same documents with the inner structure erased: one flat bag of all
/// instances.
inline Json flatten_bags(const Json& doc) {
  Json flat = Json::array();
  for (const auto& inner : doc) {
    for (const auto& x : inner) flat.push_back(x);
  }
  return flat;
}

struct ProductTaskOptions {
  std::size_t n_train = 2000;
  std::size_t n_test = 500;
  std::size_t bag_size = 30;
  double var_low = 0.5;
  double var_high = 2.5;
  bool joint_label = true;  // false: label = [x0 > 0]
};

/// Documents {"x0", "x1", "bag1", "bag2"}. The joint label is
/// [x0·(var(bag1) − 1.5) > 0], so neither x nor bag1 alone carries signal.
/// bag2 is an independent distractor with the same marginal law as bag1.
inline LabeledCorpus product_task(std::uint64_t seed, const ProductTaskOptions& opt = {}) {
  Rng rng(seed);
  const double threshold = 0.5 * (opt.var_low + opt.var_high);
  return detail::labeled_split(opt.n_train, opt.n_test, [&](std::size_t) {
    const double x0 = rng.normal();
    const double x1 = rng.normal();
    const double v1 = rng.chance(0.5) ? opt.var_high : opt.var_low;
    const double v2 = rng.chance(0.5) ? opt.var_high : opt.var_low;
    Json doc = {{"x0", x0},
                {"x1", x1},
                {"bag1", detail::antithetic_bag(rng, opt.bag_size, std::sqrt(v1))},
                {"bag2", detail::antithetic_bag(rng, opt.bag_size, std::sqrt(v2))}};
    const bool positive = opt.joint_label ? x0 * (v1 - threshold) > 0.0 : x0 > 0.0;
    return std::pair{std::move(doc), std::size_t{positive ? 1u : 0u}};
  });
}

/// Keeps only the listed fields of an object document.
inline Json project_fields(const Json& doc, const std::vector<std::string>& keep) {
  Json out = Json::object();
  for (const auto& k : keep) {
    if (auto it = doc.find(k); it != doc.end()) out[k] = *it;
  }
  return out;
}

}  // namespace hmil
