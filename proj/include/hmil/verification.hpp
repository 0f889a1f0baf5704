#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <exception>
#include <functional>
#include <numeric>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "hmil/batching.hpp"
#include "hmil/encoding.hpp"
#include "hmil/error.hpp"
#include "hmil/mmd.hpp"
#include "hmil/model.hpp"
#include "hmil/nn/ops.hpp"
#include "hmil/nn/tape.hpp"
#include "hmil/nn/tensor.hpp"
#include "hmil/rng.hpp"
#include "hmil/schema.hpp"
#include "hmil/synthetic.hpp"
#include "hmil/training.hpp"

// Executable checks: structural invariants of compiled models, the
// concentration of bag outputs with bag size, and trained benchmarks that
// pair each positive result with a no-signal control.

namespace hmil::verify {

enum class Comparison { less, less_equal, greater_equal };

inline std::string_view to_string(Comparison c) {
  switch (c) {
    case Comparison::less: return "<";
    case Comparison::less_equal: return "<=";
    case Comparison::greater_equal: return ">=";
  }
  return "?";
}

struct CheckResult {
  std::string name;
  double value = 0.0;
  double threshold = 0.0;
  Comparison comparison = Comparison::less;
  bool passed = false;
  Json details = Json::object();
};

inline CheckResult make_check(std::string name, double value, Comparison cmp, double threshold, Json details = Json::object()) {
  bool ok = std::isfinite(value);
  if (ok) {
    switch (cmp) {
      case Comparison::less: ok = value < threshold; break;
      case Comparison::less_equal: ok = value <= threshold; break;
      case Comparison::greater_equal: ok = value >= threshold; break;
    }
  }
  return {std::move(name), value, threshold, cmp, ok, std::move(details)};
}

inline Json to_json(const CheckResult& r) {
  return {{"name", r.name},         {"passed", r.passed},  {"value", std::isfinite(r.value) ? Json(r.value) : Json(nullptr)},
          {"comparison", to_string(r.comparison)}, {"threshold", r.threshold}, {"details", r.details}};
}

// ---------------------------------------------------------------------------
// Shared plumbing

namespace detail {

/// Independent stream per (seed, check, case).
inline Rng stream(std::uint64_t seed, std::uint64_t check, std::uint64_t item) {
  return Rng::derive(seed, (check << 40) ^ item);
}

inline ModelConfig random_model_config(Rng& rng, bool smooth_only = false) {
  ModelConfig c;
  c.embed_dim = static_cast<std::size_t>(rng.between(2, 6));
  c.hidden_dim = static_cast<std::size_t>(rng.between(2, 6));
  c.output_dim = static_cast<std::size_t>(rng.between(1, 3));
  c.activation = smooth_only || rng.chance(0.7) ? nn::Activation::tanh : nn::Activation::relu;
  c.leaf_dim = rng.chance(0.3) ? static_cast<std::size_t>(rng.between(1, 4)) : 0;
  c.head_layers = static_cast<std::size_t>(rng.between(1, 2));
  c.seed = rng.next();
  return c;
}

inline void set_all_aggregations(Module& m, Aggregation a) {
  if (auto* bag = dynamic_cast<BagModule*>(&m)) bag->set_aggregation(a);
  for (Module* c : m.children()) set_all_aggregations(*c, a);
}

inline void collect_bags(const Module& m, std::vector<const BagModule*>& out) {
  if (const auto* bag = dynamic_cast<const BagModule*>(&m)) out.push_back(bag);
  for (const Module* c : m.children()) collect_bags(*c, out);
}

inline RaggedBatch encode_batch(std::span<const Json> docs, const Schema& schema) {
  std::vector<EncodedDoc> enc;
  enc.reserve(docs.size());
  for (const auto& d : docs) enc.push_back(encode_document(d, schema));
  return build_batch(enc, schema);
}

/// Shuffles every array in the document, at every depth.
inline Json permute_arrays(const Json& doc, Rng& rng) {
  if (doc.is_array()) {
    std::vector<Json> items;
    for (const auto& x : doc) items.push_back(permute_arrays(x, rng));
    rng.shuffle(std::span<Json>(items));
    return Json(items);
  }
  if (doc.is_object()) {
    Json out = Json::object();
    for (const auto& [k, v] : doc.items()) out[k] = permute_arrays(v, rng);
    return out;
  }
  return doc;
}

/// A random shape, a schema inferred from a small base corpus plus the
/// documents under test, and those documents.
struct RandomCase {
  Shape shape;
  Schema schema;
  std::vector<Json> docs;
};

inline RandomCase random_case(Rng& rng, int depth, std::size_t n_docs, bool root_bag = false) {
  RandomCase c;
  c.shape = root_bag ? hmil::detail::random_bag_shape(rng, depth) : random_shape(rng, depth);
  auto corpus = random_corpus(c.shape, rng, 16, {.min_bag = 1, .max_bag = 5});
  c.docs = random_corpus(c.shape, rng, n_docs, {.min_bag = root_bag ? 1u : 0u, .max_bag = 5});
  corpus.insert(corpus.end(), c.docs.begin(), c.docs.end());
  c.schema = infer_schema(corpus);
  return c;
}

inline double relative_error(double a, double n) {
  return std::abs(a - n) / std::max({std::abs(a), std::abs(n), 1e-6});
}

inline double median(std::vector<double> v) {
  if (v.empty()) return 0.0;
  std::sort(v.begin(), v.end());
  const std::size_t m = v.size() / 2;
  return v.size() % 2 ? v[m] : 0.5 * (v[m - 1] + v[m]);
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Invariants

struct InvariantOptions {
  std::size_t permutation_cases = 1000;
  std::size_t dirac_cases = 1000;
  std::size_t collapse_models = 100;
  std::size_t collapse_batches = 10;
  std::size_t gradient_trials = 20;  // per layer type
  std::size_t gradient_models = 30;
  std::size_t bound_models = 100;
  std::size_t bound_docs_per_model = 100;
  std::size_t roundtrip_schemas = 12;
  std::size_t roundtrip_docs = 1000;
};

inline Json to_json(const InvariantOptions& o) {
  return {{"permutation_cases", o.permutation_cases}, {"dirac_cases", o.dirac_cases},
          {"collapse_models", o.collapse_models},     {"collapse_batches", o.collapse_batches},
          {"gradient_trials", o.gradient_trials},     {"gradient_models", o.gradient_models},
          {"bound_models", o.bound_models},           {"bound_docs_per_model", o.bound_docs_per_model},
          {"roundtrip_schemas", o.roundtrip_schemas}, {"roundtrip_docs", o.roundtrip_docs}};
}

/// Output change when every array of every document is shuffled, over random
/// schemas of bag depth 1 to 3. `fault` overrides every bag's aggregation.
inline CheckResult check_permutation_invariance(std::uint64_t seed, std::size_t cases,
                                                std::optional<Aggregation> fault = std::nullopt) {
  double worst = 0.0;
  std::size_t worst_case = 0;
  for (std::size_t i = 0; i < cases; ++i) {
    Rng rng = detail::stream(seed, 1, i);
    const int depth = 1 + static_cast<int>(i % 3);
    const auto c = detail::random_case(rng, depth, 4);
    ModelConfig cfg = detail::random_model_config(rng);
    const double u = rng.uniform();
    cfg.aggregation = u < 0.7 ? Aggregation::mean : (u < 0.85 ? Aggregation::max : Aggregation::mean_max);
    if (fault) cfg.aggregation = Aggregation::mean;  // keep widths compatible with the override
    Model model = build_model(c.schema, cfg);
    if (fault) detail::set_all_aggregations(model.root(), *fault);

    std::vector<Json> permuted;
    for (const auto& d : c.docs) permuted.push_back(detail::permute_arrays(d, rng));
    const double dev = nn::max_abs_diff(model.predict(detail::encode_batch(c.docs, c.schema)),
                                        model.predict(detail::encode_batch(permuted, c.schema)));
    if (dev > worst || i == 0) {
      worst = dev;
      worst_case = i;
    }
  }
  return make_check("permutation_invariance", worst, Comparison::less, 1e-9,
                    {{"cases", cases}, {"worst_case", worst_case}});
}

/// Embedding of a bag against the mean of the embeddings of its instances
/// taken as singleton bags.
inline CheckResult check_dirac_identity(std::uint64_t seed, std::size_t cases,
                                        std::optional<Aggregation> fault = std::nullopt) {
  double worst = 0.0;
  for (std::size_t i = 0; i < cases; ++i) {
    Rng rng = detail::stream(seed, 2, i);
    const auto c = detail::random_case(rng, 1 + static_cast<int>(i % 3), 1, true);
    Model model = build_model(c.schema, detail::random_model_config(rng));
    if (fault) detail::set_all_aggregations(model.root(), *fault);

    const Json& bag = c.docs.front();
    std::vector<Json> singletons;
    for (const auto& x : bag) singletons.push_back(Json::array({x}));
    const nn::Tensor whole = embed(model, detail::encode_batch(std::span(c.docs).first(1), c.schema), "$");
    const nn::Tensor parts = embed(model, detail::encode_batch(singletons, c.schema), "$");
    for (std::size_t j = 0; j < whole.cols(); ++j) {
      double m = 0.0;
      for (std::size_t r = 0; r < parts.rows(); ++r) m += parts(r, j);
      m /= static_cast<double>(parts.rows());
      worst = std::max(worst, std::abs(m - whole(0, j)));
    }
  }
  return make_check("dirac_identity", worst, Comparison::less, 1e-9, {{"cases", cases}});
}

/// Two-matrix models against their collapsed single-matrix form.
inline CheckResult check_collapse(std::uint64_t seed, std::size_t models, std::size_t batches) {
  double worst = 0.0;
  for (std::size_t i = 0; i < models; ++i) {
    Rng rng = detail::stream(seed, 3, i);
    const auto c = detail::random_case(rng, 1 + static_cast<int>(i % 3), 4 * batches);
    ModelConfig cfg = detail::random_model_config(rng);
    cfg.two_matrix = true;
    const Model two = build_model(c.schema, cfg);
    const Model one = collapse(two);
    std::vector<RaggedBatch> bs;
    for (std::size_t b = 0; b < batches; ++b) {
      bs.push_back(detail::encode_batch(std::span(c.docs).subspan(4 * b, 4), c.schema));
    }
    worst = std::max(worst, collapse_equivalence_check(two, one, bs));
  }
  return make_check("collapse_equivalence", worst, Comparison::less, 1e-10,
                    {{"models", models}, {"batches_per_model", batches}});
}

/// Builds a scalar from tape variables holding `inputs`.
using ScalarFn = std::function<nn::Var(nn::Tape&, const std::vector<nn::Var>&)>;

/// Largest relative error between reverse-mode gradients and central
/// differences (step eps) over every entry of every input.
inline double gradient_error(std::vector<nn::Tensor> inputs, const ScalarFn& f, double eps = 1e-5) {
  nn::Tape tape;
  std::vector<nn::Var> vars;
  for (const auto& x : inputs) vars.push_back(tape.variable(x));
  const nn::Var loss = f(tape, vars);
  tape.backward(loss);
  std::vector<nn::Tensor> analytic;
  for (const auto& v : vars) analytic.push_back(tape.grad(v));

  auto eval = [&] {
    nn::Tape t;
    std::vector<nn::Var> vs;
    for (const auto& x : inputs) vs.push_back(t.constant(x));
    return t.value(f(t, vs))(0, 0);
  };
  double worst = 0.0;
  for (std::size_t k = 0; k < inputs.size(); ++k) {
    for (std::size_t e = 0; e < inputs[k].size(); ++e) {
      double& x = inputs[k].data()[e];
      const double x0 = x;
      x = x0 + eps;
      const double up = eval();
      x = x0 - eps;
      const double down = eval();
      x = x0;
      worst = std::max(worst, detail::relative_error(analytic[k].data()[e], (up - down) / (2.0 * eps)));
    }
  }
  return worst;
}

/// Same comparison for the parameters of a whole model under softmax
/// cross-entropy, on up to `max_entries` randomly chosen coordinates.
inline double model_gradient_error(Model& model, const RaggedBatch& batch, const std::vector<std::size_t>& labels,
                                   Rng& rng, std::size_t max_entries = 200, double eps = 1e-5) {
  const auto params = model.parameters();
  std::vector<nn::Tensor> analytic;
  {
    nn::Tape tape;
    ForwardContext ctx(tape);
    const nn::Var loss = loss_softmax_ce(tape, model.forward(ctx, batch), labels);
    tape.backward(loss);
    for (const nn::Tensor* p : params) analytic.push_back(tape.grad(ctx.param(*p)));
  }
  auto eval = [&] {
    nn::Tape tape;
    ForwardContext ctx(tape, false);
    return tape.value(loss_softmax_ce(tape, model.forward(ctx, batch), labels))(0, 0);
  };
  std::vector<std::pair<std::size_t, std::size_t>> coords;
  for (std::size_t k = 0; k < params.size(); ++k) {
    for (std::size_t e = 0; e < params[k]->size(); ++e) coords.emplace_back(k, e);
  }
  rng.shuffle(std::span(coords));
  if (coords.size() > max_entries) coords.resize(max_entries);
  double worst = 0.0;
  for (const auto& [k, e] : coords) {
    double& x = params[k]->data()[e];
    const double x0 = x;
    x = x0 + eps;
    const double up = eval();
    x = x0 - eps;
    const double down = eval();
    x = x0;
    worst = std::max(worst, detail::relative_error(analytic[k].data()[e], (up - down) / (2.0 * eps)));
  }
  return worst;
}

namespace detail {

inline nn::Tensor random_tensor(Rng& rng, std::size_t r, std::size_t c, double scale = 1.0) {
  nn::Tensor t(r, c);
  for (double& v : t.data()) v = rng.normal(0.0, scale);
  return t;
}

inline nn::Offsets random_offsets(Rng& rng, std::size_t bags, std::size_t max_len, std::size_t min_len = 0) {
  nn::Offsets off{0};
  for (std::size_t b = 0; b < bags; ++b) {
    off.push_back(off.back() + static_cast<std::size_t>(rng.between(static_cast<std::int64_t>(min_len),
                                                                     static_cast<std::int64_t>(max_len))));
  }
  return off;
}

/// Smallest gap between distinct candidates for each segment-column maximum.
inline double max_margin(const nn::Tensor& x, const nn::Offsets& off) {
  double gap = 1.0;
  for (std::size_t b = 0; b + 1 < off.size(); ++b) {
    for (std::size_t j = 0; j < x.cols(); ++j) {
      std::vector<double> col;
      for (std::size_t r = off[b]; r < off[b + 1]; ++r) col.push_back(x(r, j));
      std::sort(col.rbegin(), col.rend());
      if (col.size() > 1) gap = std::min(gap, col[0] - col[1]);
    }
  }
  return gap;
}

inline double min_abs(const nn::Tensor& t) {
  double m = 1.0;
  for (double v : t.data()) m = std::min(m, std::abs(v));
  return m;
}

}  // namespace detail

/// Finite-difference checks for every op the models use and for whole models.
inline CheckResult check_gradients(std::uint64_t seed, std::size_t trials, std::size_t models) {
  Json per_layer = Json::object();
  double worst = 0.0;
  auto record = [&](const std::string& name, double err) {
    per_layer[name] = std::max(per_layer.value(name, 0.0), err);
    worst = std::max(worst, err);
  };

  for (std::size_t t = 0; t < trials; ++t) {
    Rng rng = detail::stream(seed, 4, t);
    const std::size_t B = static_cast<std::size_t>(rng.between(1, 5));
    const std::size_t in = static_cast<std::size_t>(rng.between(1, 5));
    const std::size_t out = static_cast<std::size_t>(rng.between(1, 5));
    const nn::Tensor probe = detail::random_tensor(rng, B, out);

    for (auto act : {nn::Activation::tanh, nn::Activation::relu, nn::Activation::identity}) {
      nn::Tensor x = detail::random_tensor(rng, B, in), w = detail::random_tensor(rng, in, out),
                 b = detail::random_tensor(rng, 1, out);
      if (act == nn::Activation::relu) {
        // keep every pre-activation away from the kink
        nn::Tape tape;
        const auto z = nn::add_bias(tape, nn::matmul(tape, tape.constant(x), tape.constant(w)), tape.constant(b));
        if (detail::min_abs(tape.value(z)) < 1e-3) continue;
      }
      record("dense_" + std::string(nn::to_string(act)),
             gradient_error({x, w, b}, [&](nn::Tape& tp, const std::vector<nn::Var>& v) {
               return nn::weighted_sum(tp, nn::dense_forward(tp, v[0], v[1], v[2], act), probe);
             }));
    }

    const nn::Offsets off = detail::random_offsets(rng, B, 4);
    const nn::Tensor rows = detail::random_tensor(rng, off.back(), out);
    record("segment_mean", gradient_error({rows}, [&](nn::Tape& tp, const std::vector<nn::Var>& v) {
             return nn::weighted_sum(tp, nn::segment_mean(tp, v[0], off), probe);
           }));
    if (detail::max_margin(rows, off) > 1e-3) {
      record("segment_max", gradient_error({rows}, [&](nn::Tape& tp, const std::vector<nn::Var>& v) {
               return nn::weighted_sum(tp, nn::segment_max(tp, v[0], off), probe);
             }));
    }

    const nn::Tensor a = detail::random_tensor(rng, B, in), c = detail::random_tensor(rng, B, out);
    const nn::Tensor probe2 = detail::random_tensor(rng, B, in + out);
    record("concat_cols", gradient_error({a, c}, [&](nn::Tape& tp, const std::vector<nn::Var>& v) {
             return nn::weighted_sum(tp, nn::concat_cols(tp, {v[0], v[1]}), probe2);
           }));
    std::vector<double> mask(B);
    for (double& m : mask) m = rng.chance(0.5) ? 1.0 : 0.0;
    record("scale_rows", gradient_error({c}, [&](nn::Tape& tp, const std::vector<nn::Var>& v) {
             return nn::weighted_sum(tp, nn::scale_rows(tp, v[0], mask), probe);
           }));

    std::vector<std::size_t> labels(B);
    for (auto& l : labels) l = static_cast<std::size_t>(rng.below(out));
    record("softmax_ce", gradient_error({c}, [&](nn::Tape& tp, const std::vector<nn::Var>& v) {
             return loss_softmax_ce(tp, v[0], labels);
           }));
    const nn::Tensor target = detail::random_tensor(rng, B, out);
    record("mse", gradient_error({c}, [&](nn::Tape& tp, const std::vector<nn::Var>& v) {
             return loss_mse(tp, v[0], target);
           }));
  }

  double model_worst = 0.0;
  for (std::size_t i = 0; i < models; ++i) {
    Rng rng = detail::stream(seed, 5, i);
    const auto c = detail::random_case(rng, 1 + static_cast<int>(i % 3), 4);
    ModelConfig cfg = detail::random_model_config(rng, true);
    cfg.two_matrix = rng.chance(0.3);
    Model model = build_model(c.schema, cfg);
    std::vector<std::size_t> labels(c.docs.size());
    for (auto& l : labels) l = static_cast<std::size_t>(rng.below(cfg.output_dim));
    model_worst = std::max(model_worst, model_gradient_error(model, detail::encode_batch(c.docs, c.schema), labels, rng));
  }
  record("full_models", model_worst);
  return make_check("gradient_correctness", worst, Comparison::less, 1e-4,
                    {{"epsilon", 1e-5}, {"per_layer", per_layer}, {"layer_trials", trials}, {"models", models}});
}

/// Bag outputs of tanh-φ models against |W·agg + b| ≤ Σⱼ|Wⱼc| + |b_c|, at every
/// bag node. A relative slack of 1e-12 absorbs summation-order rounding.
inline CheckResult check_boundedness(std::uint64_t seed, std::size_t models, std::size_t docs_per_model,
                                     std::optional<Aggregation> fault = std::nullopt) {
  std::size_t violations = 0, coordinates = 0;
  double tightest = 0.0;
  for (std::size_t i = 0; i < models; ++i) {
    Rng rng = detail::stream(seed, 6, i);
    const auto c = detail::random_case(rng, 1 + static_cast<int>(i % 3), docs_per_model, true);
    ModelConfig cfg = detail::random_model_config(rng, true);
    Model model = build_model(c.schema, cfg);
    if (fault) detail::set_all_aggregations(model.root(), *fault);
    std::vector<const BagModule*> bags;
    detail::collect_bags(model.root(), bags);

    nn::Tape tape;
    ForwardContext ctx(tape, false);
    model.forward(ctx, detail::encode_batch(c.docs, c.schema));
    for (const BagModule* bag : bags) {
      const nn::Tensor& W = bag->post().weight;
      const nn::Tensor& b = bag->post().bias;
      const nn::Tensor& h = tape.value(ctx.bag_outputs.at(bag->path()));
      for (std::size_t col = 0; col < W.cols(); ++col) {
        double bound = std::abs(b(0, col));
        for (std::size_t j = 0; j < W.rows(); ++j) bound += std::abs(W(j, col));
        for (std::size_t r = 0; r < h.rows(); ++r) {
          ++coordinates;
          const double v = std::abs(h(r, col));
          tightest = std::max(tightest, v / bound);
          if (v > bound * (1.0 + 1e-12)) ++violations;
        }
      }
    }
  }
  return make_check("boundedness", static_cast<double>(violations), Comparison::less_equal, 0.0,
                    {{"inputs", models * docs_per_model},
                     {"coordinates", coordinates},
                     {"max_ratio_to_bound", tightest}});
}

/// A sample document with nested bags and one optional sub-record.
inline Json workouts_document() {
  return Json::parse(R"({"weekNumber":"39",
    "workouts":[
      {"sport":"running","distance":19738,"duration":1500,"calories":375,"avgPace":76,
       "speedData":{"speed":[10,9,8],"altitude":[100,104,103,81],
                    "labels":["0.0km","6.6km","13.2km","19.7km"]}},
      {"sport":"swimming","distance":664,"duration":1800,"calories":250,"avgPace":2711}]})");
}

/// Expected shape of workouts_document() inferred with every string as an
/// n-gram leaf (categorical_threshold = 0). Float statistics are not compared.
inline Schema workouts_schema(NgramConfig ng = {}) {
  auto num = [](std::size_t n) { return Schema::numeric_leaf(n, 0.0, 0.0); };
  auto str = [&](std::size_t n) { return Schema::string_leaf(n, ng); };
  Schema speed_data = Schema::product(1, {{"altitude", false, Schema::bag(1, num(4))},
                                          {"labels", false, Schema::bag(1, str(4))},
                                          {"speed", false, Schema::bag(1, num(3))}});
  Schema workout = Schema::product(2, {{"avgPace", false, num(2)},
                                       {"calories", false, num(2)},
                                       {"distance", false, num(2)},
                                       {"duration", false, num(2)},
                                       {"speedData", true, std::move(speed_data)},
                                       {"sport", false, str(2)}});
  return Schema::product(1, {{"weekNumber", false, str(1)}, {"workouts", false, Schema::bag(1, std::move(workout))}});
}

/// Inference on the workouts document, then infer → validate → encode → batch
/// on random corpora, plus canonical schema JSON round-trips.
inline CheckResult check_schema_roundtrip(std::uint64_t seed, std::size_t schemas, std::size_t docs) {
  std::size_t failures = 0;
  Json notes = Json::array();
  const Json sample = workouts_document();
  const Schema inferred = infer_schema(std::vector<Json>{sample}, {.categorical_threshold = 0, .ngram = {}});
  const bool sample_ok = structurally_equal(inferred, workouts_schema()) && validate(sample, inferred).empty();
  if (!sample_ok) {
    ++failures;
    notes.push_back("workouts document did not infer the expected schema");
  }

  std::size_t violations = 0, encoded = 0;
  for (std::size_t i = 0; i < schemas; ++i) {
    Rng rng = detail::stream(seed, 7, i);
    const Shape shape = random_shape(rng, 1 + static_cast<int>(i % 3));
    const auto corpus = random_corpus(shape, rng, docs, {.min_bag = 0, .max_bag = 5});
    Schema schema;
    try {
      schema = infer_schema(corpus);
    } catch (const InferenceError& e) {
      ++failures;
      notes.push_back(e.what());
      continue;
    }
    std::vector<EncodedDoc> enc;
    for (const auto& d : corpus) {
      const auto v = validate(d, schema);
      violations += v.size();
      if (v.empty()) enc.push_back(hmil::detail::encode_unchecked(d, schema));
    }
    try {
      const RaggedBatch batch = build_batch(enc, schema);
      encoded += batch.size();
    } catch (const Error& e) {
      ++failures;
      notes.push_back(e.what());
    }
    const std::string text = schema_to_string(schema);
    const Schema back = schema_from_string(text);
    if (!structurally_equal(back, schema) || schema_to_string(back) != text) {
      ++failures;
      notes.push_back("schema JSON round-trip changed schema " + std::to_string(i));
    }
  }
  return make_check("schema_roundtrip", static_cast<double>(failures + violations), Comparison::less_equal, 0.0,
                    {{"workouts_schema_matches", sample_ok},
                     {"random_schemas", schemas},
                     {"documents_per_schema", docs},
                     {"violations", violations},
                     {"documents_batched", encoded},
                     {"notes", notes}});
}

// ---------------------------------------------------------------------------
// Concentration

struct ConcentrationOptions {
  std::vector<std::size_t> bag_sizes{4, 16, 64, 256};
  std::size_t repeats = 200;
  ModelConfig model{};
};

inline Json to_json(const ConcentrationOptions& o) {
  return {{"bag_sizes", o.bag_sizes}, {"repeats", o.repeats}, {"model", to_json(o.model)}};
}

struct ConcentrationRow {
  std::size_t bag_size;
  double median_deviation;
};

/// Instance generator for concentration: one draw per call.
using InstanceSampler = std::function<double(Rng&)>;

/// Median |f(p̂_l) − f(p̂_L)| over `repeats` bags of each size l, with
/// L = 100·max(l) as the stand-in for f(p). The model must take bare numeric
/// arrays and have output_dim 1.
inline std::vector<ConcentrationRow> concentration_experiment(const Model& model, const InstanceSampler& sample,
                                                             const std::vector<std::size_t>& bag_sizes,
                                                             std::size_t repeats, Rng& rng) {
  if (bag_sizes.empty() || repeats == 0) throw UsageError("concentration needs bag sizes and repeats");
  const std::size_t L = 100 * *std::max_element(bag_sizes.begin(), bag_sizes.end());
  auto bag_of = [&](std::size_t l) {
    Json arr = Json::array();
    for (std::size_t i = 0; i < l; ++i) arr.push_back(sample(rng));
    return arr;
  };
  const std::vector<Json> ref_doc{bag_of(L)};
  const double f_ref = model.predict(detail::encode_batch(ref_doc, model.schema()))(0, 0);
  std::vector<ConcentrationRow> table;
  for (std::size_t l : bag_sizes) {
    std::vector<Json> docs;
    for (std::size_t r = 0; r < repeats; ++r) docs.push_back(bag_of(l));
    const nn::Tensor f = model.predict(detail::encode_batch(docs, model.schema()));
    std::vector<double> dev;
    for (std::size_t r = 0; r < repeats; ++r) dev.push_back(std::abs(f(r, 0) - f_ref));
    table.push_back({l, detail::median(std::move(dev))});
  }
  return table;
}

/// Schema of a bare array of standard-normal scalars.
inline Schema standard_numeric_bag() { return Schema::bag(1, Schema::numeric_leaf(1, 0.0, 1.0)); }

inline std::vector<CheckResult> check_concentration(std::uint64_t seed, ConcentrationOptions opt) {
  Rng rng = detail::stream(seed, 8, 0);
  opt.model.output_dim = 1;
  opt.model.activation = nn::Activation::tanh;
  opt.model.seed = rng.next();
  const Model model = build_model(standard_numeric_bag(), opt.model);
  const auto table = concentration_experiment(model, [](Rng& r) { return r.normal(); }, opt.bag_sizes, opt.repeats, rng);

  std::size_t inversions = 0;
  Json rows = Json::array();
  for (std::size_t i = 0; i < table.size(); ++i) {
    rows.push_back({{"bag_size", table[i].bag_size}, {"median_deviation", table[i].median_deviation}});
    if (i > 0 && table[i].median_deviation > table[i - 1].median_deviation) ++inversions;
  }
  const double ratio = table.back().median_deviation / table.front().median_deviation;
  Json details = {{"table", rows}, {"reference_size", 100 * opt.bag_sizes.back()}, {"repeats", opt.repeats}};
  return {make_check("concentration_monotone", static_cast<double>(inversions), Comparison::less_equal, 1.0, details),
          make_check("concentration_decay", ratio, Comparison::less, 0.25,
                     {{"median_largest", table.back().median_deviation},
                      {"median_smallest", table.front().median_deviation}})};
}

// ---------------------------------------------------------------------------
// Benchmarks

struct BenchmarkSettings {
  ModelConfig model{};
  TrainConfig train{};
};

inline Json to_json(const BenchmarkSettings& s) { return {{"model", to_json(s.model)}, {"train", to_json(s.train)}}; }

/// Defaults used by the benchmarks: the default architecture (k = 32,
/// hidden = 32, tanh, mean) with a training schedule per task.
inline BenchmarkSettings variance_settings() {
  BenchmarkSettings s;
  s.train.epochs = 15;
  s.train.batch_size = 32;
  s.train.lr = 1e-2;
  return s;
}

inline BenchmarkSettings nested_settings() {
  BenchmarkSettings s;
  s.train.epochs = 30;
  s.train.batch_size = 32;
  s.train.lr = 3e-3;
  return s;
}

inline BenchmarkSettings product_settings() {
  BenchmarkSettings s;
  s.train.epochs = 30;
  s.train.batch_size = 32;
  s.train.lr = 3e-3;
  return s;
}

/// Infers a schema from the training documents, trains a fresh two-class
/// model and returns its test accuracy.
inline double fit_and_score(const std::vector<Json>& train_docs, const std::vector<std::size_t>& train_labels,
                            const std::vector<Json>& test_docs, const std::vector<std::size_t>& test_labels,
                            BenchmarkSettings settings, std::uint64_t seed) {
  const Schema schema = infer_schema(train_docs);
  auto encode_all = [&](const std::vector<Json>& docs, const std::vector<std::size_t>& labels) {
    Dataset d;
    for (const auto& doc : docs) d.docs.push_back(encode_document(doc, schema));
    d.labels = labels;
    return d;
  };
  settings.model.output_dim = 2;
  settings.model.seed = Rng::splitmix64(seed);
  settings.train.seed = Rng::splitmix64(seed + 1);
  settings.train.loss = LossKind::softmax_ce;
  Model model = build_model(schema, settings.model);
  train(model, encode_all(train_docs, train_labels), settings.train);
  return evaluate(model, encode_all(test_docs, test_labels), Metric::accuracy);
}

inline std::vector<std::size_t> shuffled_labels(std::vector<std::size_t> labels, std::uint64_t seed) {
  Rng rng(seed);
  rng.shuffle(std::span(labels));
  return labels;
}

struct VarianceResult {
  double mil_accuracy = 0.0;
  double mean_baseline_accuracy = 0.0;
  double shuffled_label_accuracy = 0.0;
  double mmd_between_classes = 0.0;
  double mmd_within_class = 0.0;
};

/// N(0,1) bags against sd-2 bags with equal (zero) means. The baseline sees
/// only each bag's instance mean through the same model family.
inline VarianceResult benchmark_variance_task(std::uint64_t seed, const BenchmarkSettings& s = variance_settings(),
                                              const VarianceTaskOptions& opt = {}) {
  const auto data = variance_task(Rng::derive(seed, 100).next(), opt);
  VarianceResult r;
  r.mil_accuracy = fit_and_score(data.train_docs, data.train_labels, data.test_docs, data.test_labels, s, seed + 1);

  auto means = [](const std::vector<Json>& docs) {
    std::vector<Json> out;
    for (const auto& d : docs) {
      double sum = 0.0;
      for (const auto& x : d) sum += x.get<double>();
      out.emplace_back(sum / static_cast<double>(d.size()));
    }
    return out;
  };
  r.mean_baseline_accuracy =
      fit_and_score(means(data.train_docs), data.train_labels, means(data.test_docs), data.test_labels, s, seed + 2);
  r.shuffled_label_accuracy = fit_and_score(data.train_docs, shuffled_labels(data.train_labels, seed + 3),
                                            data.test_docs, data.test_labels, s, seed + 3);

  // kernel two-sample statistic on 20 test bags per group: class-0 bags
  // alternate between two groups, class-1 bags form the third
  std::vector<InstanceBag> groups[3];
  std::size_t zeros = 0;
  for (std::size_t i = 0; i < data.test_docs.size(); ++i) {
    InstanceBag bag;
    for (const auto& x : data.test_docs[i]) bag.push_back({x.get<double>()});
    auto& dst = data.test_labels[i] ? groups[2] : groups[zeros++ % 2];
    if (dst.size() < 20) dst.push_back(std::move(bag));
  }
  const std::vector<InstanceBag>&a = groups[0], &a2 = groups[1], &b = groups[2];
  r.mmd_between_classes = mmd_baseline(a, b, 1.0);
  r.mmd_within_class = mmd_baseline(a, a2, 1.0);
  return r;
}

struct NestedResult {
  double nested_accuracy = 0.0;
  double flat_accuracy = 0.0;
};

inline NestedResult benchmark_nested_task(std::uint64_t seed, const BenchmarkSettings& s = nested_settings(),
                                          const NestedTaskOptions& opt = {}) {
  const auto data = nested_task(Rng::derive(seed, 200).next(), opt);
  NestedResult r;
  r.nested_accuracy = fit_and_score(data.train_docs, data.train_labels, data.test_docs, data.test_labels, s, seed + 1);
  auto flat = [](const std::vector<Json>& docs) {
    std::vector<Json> out;
    for (const auto& d : docs) out.push_back(flatten_bags(d));
    return out;
  };
  r.flat_accuracy =
      fit_and_score(flat(data.train_docs), data.train_labels, flat(data.test_docs), data.test_labels, s, seed + 2);
  return r;
}

struct ProductResult {
  double product_accuracy = 0.0;
  double x_only_accuracy = 0.0;
  double x_only_sanity_accuracy = 0.0;
};

inline ProductResult benchmark_product_task(std::uint64_t seed, const BenchmarkSettings& s = product_settings(),
                                            ProductTaskOptions opt = {}) {
  opt.joint_label = true;
  const auto joint = product_task(Rng::derive(seed, 300).next(), opt);
  opt.joint_label = false;
  const auto marginal = product_task(Rng::derive(seed, 301).next(), opt);
  auto x_only = [](const std::vector<Json>& docs) {
    std::vector<Json> out;
    for (const auto& d : docs) out.push_back(project_fields(d, {"x0", "x1"}));
    return out;
  };
  ProductResult r;
  r.product_accuracy =
      fit_and_score(joint.train_docs, joint.train_labels, joint.test_docs, joint.test_labels, s, seed + 1);
  r.x_only_accuracy =
      fit_and_score(x_only(joint.train_docs), joint.train_labels, x_only(joint.test_docs), joint.test_labels, s, seed + 2);
  r.x_only_sanity_accuracy = fit_and_score(x_only(marginal.train_docs), marginal.train_labels,
                                           x_only(marginal.test_docs), marginal.test_labels, s, seed + 3);
  return r;
}

// ---------------------------------------------------------------------------
// Suites

enum class Suite { invariants, concentration, benchmarks, all };

inline std::string_view to_string(Suite s) {
  switch (s) {
    case Suite::invariants: return "invariants";
    case Suite::concentration: return "concentration";
    case Suite::benchmarks: return "benchmarks";
    case Suite::all: return "all";
  }
  return "?";
}

inline Suite parse_suite(std::string_view s) {
  for (auto v : {Suite::invariants, Suite::concentration, Suite::benchmarks, Suite::all}) {
    if (to_string(v) == s) return v;
  }
  throw UsageError("unknown suite '" + std::string(s) + "'");
}

struct SuiteConfig {
  Suite suite = Suite::all;
  std::uint64_t seed = 0;
  std::optional<Aggregation> fault;
  InvariantOptions invariants{};
  ConcentrationOptions concentration{};
  BenchmarkSettings variance = variance_settings();
  BenchmarkSettings nested = nested_settings();
  BenchmarkSettings product = product_settings();
};

inline Json to_json(const SuiteConfig& c) {
  Json j = {{"suite", to_string(c.suite)},
            {"seed", c.seed},
            {"fault", c.fault ? Json(std::string(to_string(*c.fault))) : Json(nullptr)}};
  if (c.suite == Suite::invariants || c.suite == Suite::all) j["invariants"] = to_json(c.invariants);
  if (c.suite == Suite::concentration || c.suite == Suite::all) j["concentration"] = to_json(c.concentration);
  if (c.suite == Suite::benchmarks || c.suite == Suite::all) {
    j["benchmarks"] = {{"variance", to_json(c.variance)}, {"nested", to_json(c.nested)}, {"product", to_json(c.product)}};
  }
  return j;
}

struct SuiteReport {
  SuiteConfig config;
  std::vector<CheckResult> checks;

  bool passed() const {
    return std::all_of(checks.begin(), checks.end(), [](const auto& c) { return c.passed; });
  }

  std::vector<std::string> failures() const {
    std::vector<std::string> out;
    for (const auto& c : checks) {
      if (!c.passed) out.push_back(c.name);
    }
    return out;
  }
};

inline Json to_json(const SuiteReport& r) {
  Json checks = Json::array();
  for (const auto& c : r.checks) checks.push_back(to_json(c));
  return {{"config", to_json(r.config)}, {"checks", checks}, {"passed", r.passed()}, {"failures", r.failures()}};
}

/// Runs one check; an exception inside it becomes a failed result.
template <class F>
void run_guarded(std::vector<CheckResult>& out, const std::string& name, F&& f) {
  try {
    f(out);
  } catch (const std::exception& e) {
    CheckResult r;
    r.name = name;
    r.value = std::nan("");
    r.details = {{"error", e.what()}};
    out.push_back(std::move(r));
  }
}

/// Progress hook, called before each check with its name.
using ProgressFn = std::function<void(std::string_view)>;

inline SuiteReport run_suite(const SuiteConfig& cfg, const ProgressFn& progress = {}) {
  SuiteReport report{cfg, {}};
  auto& out = report.checks;
  const std::uint64_t seed = cfg.seed;
  const auto& inv = cfg.invariants;
  auto step = [&](std::string_view name) {
    if (progress) progress(name);
  };

  if (cfg.suite == Suite::invariants || cfg.suite == Suite::all) {
    step("permutation_invariance");
    run_guarded(out, "permutation_invariance",
                [&](auto& o) { o.push_back(check_permutation_invariance(seed, inv.permutation_cases, cfg.fault)); });
    step("dirac_identity");
    run_guarded(out, "dirac_identity", [&](auto& o) { o.push_back(check_dirac_identity(seed, inv.dirac_cases, cfg.fault)); });
    step("collapse_equivalence");
    run_guarded(out, "collapse_equivalence",
                [&](auto& o) { o.push_back(check_collapse(seed, inv.collapse_models, inv.collapse_batches)); });
    step("gradient_correctness");
    run_guarded(out, "gradient_correctness",
                [&](auto& o) { o.push_back(check_gradients(seed, inv.gradient_trials, inv.gradient_models)); });
    step("boundedness");
    run_guarded(out, "boundedness", [&](auto& o) {
      o.push_back(check_boundedness(seed, inv.bound_models, inv.bound_docs_per_model, cfg.fault));
    });
    step("schema_roundtrip");
    run_guarded(out, "schema_roundtrip",
                [&](auto& o) { o.push_back(check_schema_roundtrip(seed, inv.roundtrip_schemas, inv.roundtrip_docs)); });
  }

  if (cfg.suite == Suite::concentration || cfg.suite == Suite::all) {
    step("concentration");
    run_guarded(out, "concentration", [&](auto& o) {
      for (auto& c : check_concentration(seed, cfg.concentration)) o.push_back(std::move(c));
    });
  }

  if (cfg.suite == Suite::benchmarks || cfg.suite == Suite::all) {
    step("variance_task");
    run_guarded(out, "variance_task", [&](auto& o) {
      const auto r = benchmark_variance_task(seed, cfg.variance);
      const Json mmd = {{"between_classes", r.mmd_between_classes}, {"within_class", r.mmd_within_class}};
      o.push_back(make_check("variance_mil_accuracy", r.mil_accuracy, Comparison::greater_equal, 0.95, {{"mmd", mmd}}));
      o.push_back(make_check("variance_mean_baseline", r.mean_baseline_accuracy, Comparison::less_equal, 0.55));
      o.push_back(make_check("variance_shuffled_labels", r.shuffled_label_accuracy, Comparison::less_equal, 0.55));
    });
    step("nested_task");
    run_guarded(out, "nested_task", [&](auto& o) {
      const auto r = benchmark_nested_task(seed, cfg.nested);
      o.push_back(make_check("nested_accuracy", r.nested_accuracy, Comparison::greater_equal, 0.9));
      o.push_back(make_check("nested_flat_control", r.flat_accuracy, Comparison::less_equal, 0.55));
    });
    step("product_task");
    run_guarded(out, "product_task", [&](auto& o) {
      const auto r = benchmark_product_task(seed, cfg.product);
      o.push_back(make_check("product_accuracy", r.product_accuracy, Comparison::greater_equal, 0.9));
      o.push_back(make_check("product_x_only_control", r.x_only_accuracy, Comparison::less_equal, 0.55));
      o.push_back(make_check("product_x_only_sanity", r.x_only_sanity_accuracy, Comparison::greater_equal, 0.95));
    });
  }
  return report;
}

}  // namespace hmil::verify
