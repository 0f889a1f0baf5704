#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <string>
#include <string_view>
#include <vector>

#include "hmil/error.hpp"
#include "hmil/schema.hpp"

namespace hmil {

/// A document laid out on its schema. Leaves carry fixed-width vectors, bags
/// carry their instances in document order, products carry one child per
/// schema field (absent fields get an all-absent child) plus presence flags.
struct EncodedNode {
  SchemaKind kind = SchemaKind::unknown;
  std::vector<double> values;
  std::vector<EncodedNode> items;
  std::vector<std::uint8_t> present;

  bool operator==(const EncodedNode&) const = default;
};

using EncodedDoc = EncodedNode;

inline constexpr std::uint64_t kFnvOffset = 14695981039346656037ULL;
inline constexpr std::uint64_t kFnvPrime = 1099511628211ULL;

inline std::uint64_t fnv1a64(std::string_view bytes) {
  std::uint64_t h = kFnvOffset;
  for (unsigned char c : bytes) {
    h ^= c;
    h *= kFnvPrime;
  }
  return h;
}

/// Width of the vector a leaf encodes to.
inline std::size_t leaf_width(const Schema& s) {
  switch (s.kind) {
    case SchemaKind::numeric: return 1;
    case SchemaKind::string: return s.ngram.dim;
    case SchemaKind::categorical: return s.vocabulary.size() + 1;
    default: throw StructuralError("leaf_width of non-leaf schema " + std::string(to_string(s.kind)));
  }
}

/// Standardized value; a degenerate leaf (std = 0) always encodes to 0.
inline double encode_numeric(double v, double mean, double stddev) {
  if (!std::isfinite(v)) throw EncodingError("non-finite numeric value");
  if (stddev == 0.0) return 0.0;
  return (v - mean) / stddev;
}

/// L1-normalized histogram of byte n-grams hashed into `dim` buckets.
/// Strings shorter than n have no n-grams and encode to zeros.
inline std::vector<double> encode_string_ngram(std::string_view s, std::size_t n, std::size_t dim) {
  if (n == 0 || dim == 0) throw EncodingError("n-gram encoder needs n >= 1 and dim >= 1");
  std::vector<double> hist(dim, 0.0);
  if (s.size() < n) return hist;
  const std::size_t grams = s.size() - n + 1;
  for (std::size_t i = 0; i < grams; ++i) hist[fnv1a64(s.substr(i, n)) % dim] += 1.0;
  const double inv = 1.0 / static_cast<double>(grams);
  for (double& v : hist) v *= inv;
  return hist;
}

/// One-hot over the vocabulary with a trailing slot for unseen values.
inline std::vector<double> encode_categorical(std::string_view v, const std::vector<std::string>& vocabulary) {
  std::vector<double> out(vocabulary.size() + 1, 0.0);
  const auto it = std::lower_bound(vocabulary.begin(), vocabulary.end(), v);
  if (it != vocabulary.end() && *it == v) {
    out[static_cast<std::size_t>(it - vocabulary.begin())] = 1.0;
  } else {
    out.back() = 1.0;
  }
  return out;
}

/// Encoding of a subtree whose value is missing: zero leaves, empty bags and
/// products with every field absent.
inline EncodedNode absent_node(const Schema& s) {
  EncodedNode n;
  n.kind = s.kind;
  switch (s.kind) {
    case SchemaKind::numeric:
    case SchemaKind::string:
    case SchemaKind::categorical: n.values.assign(leaf_width(s), 0.0); break;
    case SchemaKind::product:
      for (const auto& f : s.fields) {
        n.items.push_back(absent_node(f.schema));
        n.present.push_back(0);
      }
      break;
    case SchemaKind::bag: break;
    case SchemaKind::unknown: throw StructuralError("cannot encode against an unknown schema node");
  }
  return n;
}

namespace detail {

inline EncodedNode encode_unchecked(const Json& doc, const Schema& s) {
  EncodedNode n;
  n.kind = s.kind;
  switch (s.kind) {
    case SchemaKind::numeric: {
      const double v = doc.is_boolean() ? (doc.get<bool>() ? 1.0 : 0.0) : doc.get<double>();
      n.values = {encode_numeric(v, s.numeric.mean, s.stddev())};
      break;
    }
    case SchemaKind::string: n.values = encode_string_ngram(doc.get_ref<const std::string&>(), s.ngram.n, s.ngram.dim); break;
    case SchemaKind::categorical: n.values = encode_categorical(doc.get_ref<const std::string&>(), s.vocabulary); break;
    case SchemaKind::bag:
      for (const auto& item : doc) {
        if (!item.is_null()) n.items.push_back(encode_unchecked(item, s.bag_element()));
      }
      break;
    case SchemaKind::product:
      for (const auto& f : s.fields) {
        const auto it = doc.find(f.name);
        if (it == doc.end() || it->is_null()) {
          n.items.push_back(absent_node(f.schema));
          n.present.push_back(0);
        } else {
          n.items.push_back(encode_unchecked(*it, f.schema));
          n.present.push_back(1);
        }
      }
      break;
    case SchemaKind::unknown: throw StructuralError("cannot encode against an unknown schema node");
  }
  return n;
}

}  // namespace detail

inline EncodedDoc encode_document(const Json& doc, const Schema& schema) {
  auto violations = validate(doc, schema);
  if (!violations.empty()) throw EncodingError(std::move(violations));
  return detail::encode_unchecked(doc, schema);
}

}  // namespace hmil
