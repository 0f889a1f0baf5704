#pragma once

#include <cstddef>
#include <span>
#include <string>
#include <vector>

#include "hmil/encoding.hpp"
#include "hmil/error.hpp"
#include "hmil/nn/ops.hpp"
#include "hmil/nn/tensor.hpp"
#include "hmil/schema.hpp"

namespace hmil {

/// One schema node of a minibatch in contiguous form.
///
/// Leaves hold a rows×width matrix. A bag's `offsets` (rows+1 entries,
/// absolute indices) split its single child's rows into per-bag segments.
/// A product has one child per field, each with the product's row count, and
/// one presence column per field.
struct BatchNode {
  SchemaKind kind = SchemaKind::unknown;
  std::size_t rows = 0;
  nn::Tensor leaf;
  nn::Offsets offsets;
  std::vector<std::vector<double>> presence;
  std::vector<BatchNode> children;

  bool operator==(const BatchNode&) const = default;
};

struct RaggedBatch {
  BatchNode root;

  std::size_t size() const noexcept { return root.rows; }
  bool operator==(const RaggedBatch&) const = default;
};

namespace detail {

struct BatchBuilder {
  SchemaKind kind = SchemaKind::unknown;
  std::size_t rows = 0;
  std::size_t width = 0;
  std::vector<double> leaf;
  nn::Offsets offsets{0};
  std::vector<std::vector<double>> presence;
  std::vector<BatchBuilder> children;

  explicit BatchBuilder(const Schema& s) : kind(s.kind) {
    switch (s.kind) {
      case SchemaKind::numeric:
      case SchemaKind::string:
      case SchemaKind::categorical: width = leaf_width(s); break;
      case SchemaKind::bag: children.emplace_back(s.bag_element()); break;
      case SchemaKind::product:
        for (const auto& f : s.fields) children.emplace_back(f.schema);
        presence.resize(s.fields.size());
        break;
      case SchemaKind::unknown: throw StructuralError("cannot batch against an unknown schema node");
    }
  }

  void append(const EncodedNode& e, const std::string& path) {
    if (e.kind != kind) {
      throw StructuralError("document node at " + path + " is " + std::string(to_string(e.kind)) +
                            ", batch schema expects " + std::string(to_string(kind)));
    }
    switch (kind) {
      case SchemaKind::numeric:
      case SchemaKind::string:
      case SchemaKind::categorical:
        if (e.values.size() != width) {
          throw StructuralError("leaf at " + path + " has width " + std::to_string(e.values.size()) +
                                ", expected " + std::to_string(width));
        }
        leaf.insert(leaf.end(), e.values.begin(), e.values.end());
        break;
      case SchemaKind::bag:
        for (const auto& item : e.items) children.front().append(item, path + "[*]");
        offsets.push_back(children.front().rows);
        break;
      case SchemaKind::product:
        if (e.items.size() != children.size() || e.present.size() != children.size()) {
          throw StructuralError("product at " + path + " has " + std::to_string(e.items.size()) +
                                " fields, expected " + std::to_string(children.size()));
        }
        for (std::size_t i = 0; i < children.size(); ++i) {
          children[i].append(e.items[i], path + ".#" + std::to_string(i));
          presence[i].push_back(e.present[i] ? 1.0 : 0.0);
        }
        break;
      case SchemaKind::unknown: break;
    }
    ++rows;
  }

  BatchNode finish() && {
    BatchNode n;
    n.kind = kind;
    n.rows = rows;
    if (is_leaf(kind)) n.leaf = nn::Tensor(rows, width, std::move(leaf));
    if (kind == SchemaKind::bag) n.offsets = std::move(offsets);
    n.presence = std::move(presence);
    for (auto& c : children) n.children.push_back(std::move(c).finish());
    return n;
  }
};

inline BatchNode slice_node(const BatchNode& n, std::size_t lo, std::size_t hi) {
  BatchNode out;
  out.kind = n.kind;
  out.rows = hi - lo;
  if (is_leaf(n.kind)) {
    const std::size_t w = n.leaf.cols();
    std::vector<double> data(n.leaf.values().begin() + static_cast<std::ptrdiff_t>(lo * w),
                             n.leaf.values().begin() + static_cast<std::ptrdiff_t>(hi * w));
    out.leaf = nn::Tensor(hi - lo, w, std::move(data));
  } else if (n.kind == SchemaKind::bag) {
    const std::size_t base = n.offsets[lo];
    for (std::size_t i = lo; i <= hi; ++i) out.offsets.push_back(n.offsets[i] - base);
    out.children.push_back(slice_node(n.children.front(), base, n.offsets[hi]));
  } else if (n.kind == SchemaKind::product) {
    for (const auto& p : n.presence) {
      out.presence.emplace_back(p.begin() + static_cast<std::ptrdiff_t>(lo), p.begin() + static_cast<std::ptrdiff_t>(hi));
    }
    for (const auto& c : n.children) out.children.push_back(slice_node(c, lo, hi));
  }
  return out;
}

}  // namespace detail

/// Stacks documents in order; within each bag instance order is preserved.
inline RaggedBatch build_batch(std::span<const EncodedDoc* const> docs, const Schema& schema) {
  if (docs.empty()) throw StructuralError("build_batch needs at least one document");
  detail::BatchBuilder builder(schema);
  for (std::size_t i = 0; i < docs.size(); ++i) builder.append(*docs[i], "doc[" + std::to_string(i) + "]$");
  return {std::move(builder).finish()};
}

inline RaggedBatch build_batch(std::span<const EncodedDoc> docs, const Schema& schema) {
  std::vector<const EncodedDoc*> ptrs;
  ptrs.reserve(docs.size());
  for (const auto& d : docs) ptrs.push_back(&d);
  return build_batch(std::span<const EncodedDoc* const>(ptrs), schema);
}

/// Rows [lo, hi) of the root with everything beneath them, offsets rebased.
inline RaggedBatch slice_batch(const RaggedBatch& batch, std::size_t lo, std::size_t hi) {
  if (lo > hi || hi > batch.size()) throw StructuralError("slice_batch: range out of bounds");
  return {detail::slice_node(batch.root, lo, hi)};
}

}  // namespace hmil
