#pragma once

// Schema inference over JSON corpora.
//
// A Schema is a tree of node kinds: numeric, string (n-gram histogram),
// categorical (one-hot), bag (homogeneous array, an empirical measure over its
// element space) and product (object with a fixed set of named fields).
// Inference folds per-document schemas together with merge_schemas, so the
// corpus is consumed in one streaming pass.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <istream>
#include <optional>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include <json.hpp>

#include "hmil/error.hpp"

namespace hmil {

using Json = nlohmann::json;

enum class SchemaKind { unknown, numeric, string, categorical, bag, product };

inline std::string_view to_string(SchemaKind k) {
  switch (k) {
    case SchemaKind::unknown: return "unknown";
    case SchemaKind::numeric: return "numeric";
    case SchemaKind::string: return "string";
    case SchemaKind::categorical: return "categorical";
    case SchemaKind::bag: return "bag";
    case SchemaKind::product: return "product";
  }
  return "?";
}

inline SchemaKind parse_schema_kind(std::string_view s) {
  for (auto k : {SchemaKind::unknown, SchemaKind::numeric, SchemaKind::string, SchemaKind::categorical,
                 SchemaKind::bag, SchemaKind::product}) {
    if (to_string(k) == s) return k;
  }
  throw LoadError("unknown schema kind '" + std::string(s) + "'");
}

inline bool is_leaf(SchemaKind k) {
  return k == SchemaKind::numeric || k == SchemaKind::string || k == SchemaKind::categorical;
}

struct NgramConfig {
  std::size_t n = 3;
  std::size_t dim = 64;

  bool operator==(const NgramConfig&) const = default;
};

struct InferenceOptions {
  /// Strings with at most this many distinct values become categorical.
  std::size_t categorical_threshold = 32;
  NgramConfig ngram;
};

/// Running moments; the observation count is the owning node's count.
struct NumericStats {
  double mean = 0.0;
  double m2 = 0.0;
};

struct SchemaField;

struct Schema {
  SchemaKind kind = SchemaKind::unknown;
  std::size_t count = 0;
  NumericStats numeric;
  NgramConfig ngram;
  std::vector<std::string> vocabulary;  // sorted, unique; index = position
  std::vector<Schema> element;          // bag: exactly one entry
  std::vector<SchemaField> fields;      // product: sorted by name, unique

  static Schema unknown();
  static Schema numeric_leaf(std::size_t count, double mean, double m2);
  static Schema string_leaf(std::size_t count, NgramConfig ngram);
  static Schema categorical_leaf(std::size_t count, std::vector<std::string> vocabulary);
  static Schema bag(std::size_t count, Schema element);
  static Schema product(std::size_t count, std::vector<SchemaField> fields);

  /// Population standard deviation of a numeric leaf.
  double stddev() const;

  const Schema& bag_element() const;
  const SchemaField* field(std::string_view name) const;
};

struct SchemaField {
  std::string name;
  bool optional = false;
  Schema schema;
};

inline Schema Schema::unknown() { return Schema{}; }

inline Schema Schema::numeric_leaf(std::size_t count, double mean, double m2) {
  Schema s;
  s.kind = SchemaKind::numeric;
  s.count = count;
  s.numeric = {mean, m2};
  return s;
}

inline Schema Schema::string_leaf(std::size_t count, NgramConfig ngram) {
  Schema s;
  s.kind = SchemaKind::string;
  s.count = count;
  s.ngram = ngram;
  return s;
}

inline Schema Schema::categorical_leaf(std::size_t count, std::vector<std::string> vocabulary) {
  std::sort(vocabulary.begin(), vocabulary.end());
  vocabulary.erase(std::unique(vocabulary.begin(), vocabulary.end()), vocabulary.end());
  Schema s;
  s.kind = SchemaKind::categorical;
  s.count = count;
  s.vocabulary = std::move(vocabulary);
  return s;
}

inline Schema Schema::bag(std::size_t count, Schema element) {
  Schema s;
  s.kind = SchemaKind::bag;
  s.count = count;
  s.element.push_back(std::move(element));
  return s;
}

inline Schema Schema::product(std::size_t count, std::vector<SchemaField> fields) {
  std::sort(fields.begin(), fields.end(), [](const auto& a, const auto& b) { return a.name < b.name; });
  for (std::size_t i = 1; i < fields.size(); ++i) {
    if (fields[i].name == fields[i - 1].name) throw BuildError("duplicate field '" + fields[i].name + "'");
  }
  Schema s;
  s.kind = SchemaKind::product;
  s.count = count;
  s.fields = std::move(fields);
  return s;
}

inline double Schema::stddev() const {
  if (count == 0) return 0.0;
  return std::sqrt(std::max(0.0, numeric.m2 / static_cast<double>(count)));
}

inline const Schema& Schema::bag_element() const {
  if (kind != SchemaKind::bag || element.size() != 1) throw StructuralError("not a bag schema");
  return element.front();
}

inline const SchemaField* Schema::field(std::string_view name) const {
  auto it = std::lower_bound(fields.begin(), fields.end(), name,
                             [](const SchemaField& f, std::string_view n) { return f.name < n; });
  if (it == fields.end() || it->name != name) return nullptr;
  return &*it;
}

namespace detail {

inline std::string field_path(const std::string& parent, std::string_view name) {
  return parent + "." + std::string(name);
}

inline std::string json_kind_name(const Json& v) {
  switch (v.type()) {
    case Json::value_t::null: return "null";
    case Json::value_t::boolean: return "boolean";
    case Json::value_t::number_integer:
    case Json::value_t::number_unsigned:
    case Json::value_t::number_float: return "number";
    case Json::value_t::string: return "string";
    case Json::value_t::array: return "array";
    case Json::value_t::object: return "object";
    default: return "unsupported";
  }
}

inline std::string expected_json_kind(SchemaKind k) {
  switch (k) {
    case SchemaKind::numeric: return "number";
    case SchemaKind::string:
    case SchemaKind::categorical: return "string";
    case SchemaKind::bag: return "array";
    case SchemaKind::product: return "object";
    case SchemaKind::unknown: return "any";
  }
  return "?";
}

inline bool is_string_family(SchemaKind k) { return k == SchemaKind::string || k == SchemaKind::categorical; }

}  // namespace detail

inline NumericStats merge_numeric(std::size_t na, const NumericStats& a, std::size_t nb, const NumericStats& b) {
  const std::size_t n = na + nb;
  if (n == 0) return {};
  const double fa = static_cast<double>(na), fb = static_cast<double>(nb), fn = static_cast<double>(n);
  const double delta = b.mean - a.mean;
  // grouped so that swapping a and b gives bitwise identical results
  return {(fa * a.mean + fb * b.mean) / fn, (a.m2 + b.m2) + delta * delta * (fa * fb) / fn};
}

/// Least upper bound of two schemas. Counts add; a field seen on one side
/// only becomes optional; string vocabularies union and overflow into an
/// n-gram leaf past the categorical threshold.
inline Schema merge_schemas(const Schema& a, const Schema& b, const InferenceOptions& opts = {},
                            const std::string& path = "$") {
  if (a.kind == SchemaKind::unknown) {
    Schema r = b;
    r.count += a.count;
    return r;
  }
  if (b.kind == SchemaKind::unknown) {
    Schema r = a;
    r.count += b.count;
    return r;
  }
  const std::size_t count = a.count + b.count;
  if (detail::is_string_family(a.kind) && detail::is_string_family(b.kind)) {
    if (a.kind == SchemaKind::string && b.kind == SchemaKind::string) {
      if (!(a.ngram == b.ngram)) throw SchemaConflict(path, "n-gram configurations differ");
      return Schema::string_leaf(count, a.ngram);
    }
    if (a.kind == SchemaKind::string) return Schema::string_leaf(count, a.ngram);
    if (b.kind == SchemaKind::string) return Schema::string_leaf(count, b.ngram);
    std::vector<std::string> vocab;
    std::set_union(a.vocabulary.begin(), a.vocabulary.end(), b.vocabulary.begin(), b.vocabulary.end(),
                   std::back_inserter(vocab));
    if (vocab.size() > opts.categorical_threshold) return Schema::string_leaf(count, opts.ngram);
    return Schema::categorical_leaf(count, std::move(vocab));
  }
  if (a.kind != b.kind) {
    throw SchemaConflict(path, "cannot unify " + std::string(to_string(a.kind)) + " with " +
                                   std::string(to_string(b.kind)));
  }
  switch (a.kind) {
    case SchemaKind::numeric: {
      const auto stats = merge_numeric(a.count, a.numeric, b.count, b.numeric);
      return Schema::numeric_leaf(count, stats.mean, stats.m2);
    }
    case SchemaKind::bag:
      return Schema::bag(count, merge_schemas(a.bag_element(), b.bag_element(), opts, path + "[*]"));
    case SchemaKind::product: {
      std::vector<SchemaField> fields;
      auto ia = a.fields.begin(), ib = b.fields.begin();
      while (ia != a.fields.end() || ib != b.fields.end()) {
        if (ib == b.fields.end() || (ia != a.fields.end() && ia->name < ib->name)) {
          fields.push_back({ia->name, true, ia->schema});
          ++ia;
        } else if (ia == a.fields.end() || ib->name < ia->name) {
          fields.push_back({ib->name, true, ib->schema});
          ++ib;
        } else {
          fields.push_back({ia->name, ia->optional || ib->optional,
                            merge_schemas(ia->schema, ib->schema, opts, detail::field_path(path, ia->name))});
          ++ia;
          ++ib;
        }
      }
      return Schema::product(count, std::move(fields));
    }
    default: break;
  }
  throw SchemaConflict(path, "cannot merge schemas");
}

/// Schema of a single JSON value. Arrays fold their elements; nulls count as
/// absence. The result may still contain unknown nodes (empty arrays).
inline Schema schema_of(const Json& value, const InferenceOptions& opts = {}, const std::string& path = "$") {
  switch (value.type()) {
    case Json::value_t::boolean:
      return Schema::numeric_leaf(1, value.get<bool>() ? 1.0 : 0.0, 0.0);
    case Json::value_t::number_integer:
    case Json::value_t::number_unsigned:
    case Json::value_t::number_float:
      return Schema::numeric_leaf(1, value.get<double>(), 0.0);
    case Json::value_t::string:
      if (opts.categorical_threshold == 0) return Schema::string_leaf(1, opts.ngram);
      return Schema::categorical_leaf(1, {value.get<std::string>()});
    case Json::value_t::array: {
      Schema element = Schema::unknown();
      const std::string element_path = path + "[*]";
      for (const auto& item : value) {
        if (item.is_null()) continue;
        element = merge_schemas(element, schema_of(item, opts, element_path), opts, element_path);
      }
      return Schema::bag(1, std::move(element));
    }
    case Json::value_t::object: {
      std::vector<SchemaField> fields;
      for (const auto& [key, item] : value.items()) {
        if (item.is_null()) continue;
        fields.push_back({key, false, schema_of(item, opts, detail::field_path(path, key))});
      }
      return Schema::product(1, std::move(fields));
    }
    case Json::value_t::null:
      throw InferenceError("null value at " + path + " cannot be typed");
    default:
      throw InferenceError("unsupported JSON value at " + path);
  }
}

/// Path of the first unknown node, if any.
inline std::optional<std::string> find_unknown(const Schema& s, const std::string& path = "$") {
  switch (s.kind) {
    case SchemaKind::unknown: return path;
    case SchemaKind::bag: return find_unknown(s.bag_element(), path + "[*]");
    case SchemaKind::product:
      for (const auto& f : s.fields) {
        if (auto p = find_unknown(f.schema, detail::field_path(path, f.name))) return p;
      }
      return std::nullopt;
    default: return std::nullopt;
  }
}

/// Streaming inference: memory is bounded by schema size plus vocabularies.
class SchemaInferrer {
 public:
  explicit SchemaInferrer(InferenceOptions opts = {}) : opts_(opts) {}

  void observe(const Json& doc) {
    if (doc.is_null()) throw InferenceError("document " + std::to_string(documents_) + " is null");
    current_ = merge_schemas(current_, schema_of(doc, opts_), opts_);
    ++documents_;
  }

  std::size_t documents() const noexcept { return documents_; }

  Schema finish() const {
    if (documents_ == 0) throw InferenceError("empty corpus");
    if (auto p = find_unknown(current_)) {
      throw InferenceError("element type at " + *p + " is never observed (only empty arrays)");
    }
    return current_;
  }

 private:
  InferenceOptions opts_;
  Schema current_ = Schema::unknown();
  std::size_t documents_ = 0;
};

template <class Range>
Schema infer_schema(const Range& docs, const InferenceOptions& opts = {}) {
  SchemaInferrer inferrer(opts);
  for (const auto& d : docs) inferrer.observe(d);
  return inferrer.finish();
}

/// Infers from JSON Lines; blank lines are skipped.
inline Schema infer_schema_jsonl(std::istream& in, const InferenceOptions& opts = {}) {
  SchemaInferrer inferrer(opts);
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    Json doc;
    try {
      doc = Json::parse(line);
    } catch (const Json::parse_error& e) {
      throw InferenceError("line " + std::to_string(lineno) + ": " + e.what());
    }
    inferrer.observe(doc);
  }
  return inferrer.finish();
}

namespace detail {

inline void validate_into(const Json& doc, const Schema& s, const std::string& path, std::vector<Violation>& out) {
  const auto mismatch = [&] { out.push_back({path, expected_json_kind(s.kind), json_kind_name(doc)}); };
  switch (s.kind) {
    case SchemaKind::unknown: return;
    case SchemaKind::numeric:
      if (!doc.is_number() && !doc.is_boolean()) mismatch();
      return;
    case SchemaKind::string:
    case SchemaKind::categorical:
      if (!doc.is_string()) mismatch();
      return;
    case SchemaKind::bag:
      if (!doc.is_array()) {
        mismatch();
        return;
      }
      for (std::size_t i = 0; i < doc.size(); ++i) {
        if (doc[i].is_null()) continue;
        validate_into(doc[i], s.bag_element(), path + "[" + std::to_string(i) + "]", out);
      }
      return;
    case SchemaKind::product:
      if (!doc.is_object()) {
        mismatch();
        return;
      }
      for (const auto& f : s.fields) {
        const auto it = doc.find(f.name);
        if (it == doc.end() || it->is_null()) {
          if (!f.optional) out.push_back({field_path(path, f.name), expected_json_kind(f.schema.kind), "missing"});
          continue;
        }
        validate_into(*it, f.schema, field_path(path, f.name), out);
      }
      for (const auto& [key, item] : doc.items()) {
        if (!item.is_null() && s.field(key) == nullptr) {
          out.push_back({field_path(path, key), "no such field", json_kind_name(item)});
        }
      }
      return;
  }
}

}  // namespace detail

/// Every place `doc` fails to conform to `schema`; empty means it encodes.
inline std::vector<Violation> validate(const Json& doc, const Schema& schema) {
  std::vector<Violation> out;
  if (doc.is_null()) {
    out.push_back({"$", detail::expected_json_kind(schema.kind), "null"});
    return out;
  }
  detail::validate_into(doc, schema, "$", out);
  return out;
}

/// Same tree shape, kinds, names, optionality, counts, vocabularies and n-gram
/// settings. Floating-point statistics are excluded.
inline bool structurally_equal(const Schema& a, const Schema& b) {
  if (a.kind != b.kind || a.count != b.count) return false;
  switch (a.kind) {
    case SchemaKind::string: return a.ngram == b.ngram;
    case SchemaKind::categorical: return a.vocabulary == b.vocabulary;
    case SchemaKind::bag: return structurally_equal(a.bag_element(), b.bag_element());
    case SchemaKind::product:
      if (a.fields.size() != b.fields.size()) return false;
      for (std::size_t i = 0; i < a.fields.size(); ++i) {
        const auto &fa = a.fields[i], &fb = b.fields[i];
        if (fa.name != fb.name || fa.optional != fb.optional || !structurally_equal(fa.schema, fb.schema)) {
          return false;
        }
      }
      return true;
    default: return true;
  }
}

inline std::size_t node_count(const Schema& s) {
  std::size_t n = 1;
  if (s.kind == SchemaKind::bag) n += node_count(s.bag_element());
  for (const auto& f : s.fields) n += node_count(f.schema);
  return n;
}

/// Resolves "$", "$.a.b", "$.a[*].b" style paths; bag elements use "[*]".
inline const Schema* find_node(const Schema& root, std::string_view path) {
  if (path.substr(0, 1) != "$") return nullptr;
  path.remove_prefix(1);
  const Schema* cur = &root;
  while (!path.empty()) {
    if (path.substr(0, 3) == "[*]") {
      if (cur->kind != SchemaKind::bag) return nullptr;
      cur = &cur->bag_element();
      path.remove_prefix(3);
    } else if (path.front() == '.') {
      path.remove_prefix(1);
      const auto end = path.find_first_of(".[");
      const auto name = path.substr(0, end);
      if (cur->kind != SchemaKind::product) return nullptr;
      const SchemaField* f = cur->field(name);
      if (f == nullptr) return nullptr;
      cur = &f->schema;
      path.remove_prefix(name.size());
    } else {
      return nullptr;
    }
  }
  return cur;
}

inline constexpr int kSchemaVersion = 1;

inline Json schema_node_to_json(const Schema& s) {
  Json j;
  j["kind"] = to_string(s.kind);
  j["count"] = s.count;
  switch (s.kind) {
    case SchemaKind::numeric:
      j["mean"] = s.numeric.mean;
      j["m2"] = s.numeric.m2;
      j["std"] = s.stddev();
      break;
    case SchemaKind::string: j["ngram"] = {{"n", s.ngram.n}, {"dim", s.ngram.dim}}; break;
    case SchemaKind::categorical: j["vocabulary"] = s.vocabulary; break;
    case SchemaKind::bag: j["element"] = schema_node_to_json(s.bag_element()); break;
    case SchemaKind::product: {
      Json fields = Json::object();
      for (const auto& f : s.fields) {
        fields[f.name] = {{"optional", f.optional}, {"schema", schema_node_to_json(f.schema)}};
      }
      j["fields"] = std::move(fields);
      break;
    }
    case SchemaKind::unknown: break;
  }
  return j;
}

inline Json schema_to_json(const Schema& s) { return {{"schema_version", kSchemaVersion}, {"root", schema_node_to_json(s)}}; }

/// Canonical text form: sorted keys, no whitespace.
inline std::string schema_to_string(const Schema& s) { return schema_to_json(s).dump(); }

inline Schema schema_node_from_json(const Json& j, const std::string& path = "$") {
  try {
    Schema s;
    s.kind = parse_schema_kind(j.at("kind").get<std::string>());
    s.count = j.at("count").get<std::size_t>();
    switch (s.kind) {
      case SchemaKind::numeric:
        s.numeric = {j.at("mean").get<double>(), j.at("m2").get<double>()};
        break;
      case SchemaKind::string:
        s.ngram = {j.at("ngram").at("n").get<std::size_t>(), j.at("ngram").at("dim").get<std::size_t>()};
        if (s.ngram.n == 0 || s.ngram.dim == 0) throw LoadError("n-gram parameters must be >= 1 at " + path);
        break;
      case SchemaKind::categorical: {
        auto vocab = j.at("vocabulary").get<std::vector<std::string>>();
        if (!std::is_sorted(vocab.begin(), vocab.end()) ||
            std::adjacent_find(vocab.begin(), vocab.end()) != vocab.end()) {
          throw LoadError("vocabulary must be sorted and unique at " + path);
        }
        s.vocabulary = std::move(vocab);
        break;
      }
      case SchemaKind::bag: s.element.push_back(schema_node_from_json(j.at("element"), path + "[*]")); break;
      case SchemaKind::product: {
        std::vector<SchemaField> fields;
        for (const auto& [name, f] : j.at("fields").items()) {
          fields.push_back(
              {name, f.at("optional").get<bool>(), schema_node_from_json(f.at("schema"), detail::field_path(path, name))});
        }
        s = Schema::product(s.count, std::move(fields));
        break;
      }
      case SchemaKind::unknown: break;
    }
    return s;
  } catch (const Json::exception& e) {
    throw LoadError("malformed schema at " + path + ": " + e.what());
  }
}

inline Schema schema_from_json(const Json& j) {
  if (!j.is_object() || !j.contains("schema_version")) throw LoadError("schema document lacks schema_version");
  if (j.at("schema_version") != kSchemaVersion) {
    throw LoadError("unsupported schema_version " + j.at("schema_version").dump());
  }
  if (!j.contains("root")) throw LoadError("schema document lacks root");
  return schema_node_from_json(j.at("root"));
}

inline Schema schema_from_string(std::string_view text) {
  Json j;
  try {
    j = Json::parse(text);
  } catch (const Json::parse_error& e) {
    throw LoadError(std::string("schema is not valid JSON: ") + e.what());
  }
  return schema_from_json(j);
}

}  // namespace hmil
