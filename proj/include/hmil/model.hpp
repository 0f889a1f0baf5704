#pragma once

// Schema-driven network construction.
//
// Every schema node compiles to a module and the module tree mirrors the
// schema tree:
//
//   leaf     -> LeafEncoderModule   pass-through, or dense+σ when leaf_dim > 0
//   bag      -> BagModule           φ = dense+σ on each instance, segment
//                                   aggregation, then one linear map W
//   product  -> ProductModule       concatenation of field outputs and presence
//                                   flags, then dense+σ
//
// and the root is followed by an OutputHead (head_layers × dense+σ, then a
// linear layer). Nested bags therefore alternate σ-layer -> aggregation ->
// linear, and the linear map after an aggregation is the product of the two
// matrices that would otherwise sit on either side of it (the mean commutes
// with linear maps). The explicit two-matrix form is available through
// ModelConfig::two_matrix and collapse().
//
// Parameter count (w = child width, k = embed_dim, h = hidden_dim, o =
// output_dim, A = 2 for mean_max else 1, e = 1 if empty_bag_indicator):
//
//   leaf      leaf_dim ? (w + 1)·leaf_dim : 0
//   bag       (w + 1)·k + [two_matrix] k·k + (A·k + e + 1)·k
//   product   (Σ field widths + #optional fields + 1)·h
//   head      (in + 1)·h + (head_layers − 1)·(h + 1)·h + (h + 1)·o
//             or (in + 1)·o when head_layers = 0

#include <algorithm>
#include <bit>
#include <cstddef>
#include <cstdint>
#include <fstream>
#include <istream>
#include <map>
#include <memory>
#include <optional>
#include <ostream>
#include <span>
#include <sstream>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "hmil/batching.hpp"
#include "hmil/encoding.hpp"
#include "hmil/error.hpp"
#include "hmil/nn/adam.hpp"
#include "hmil/nn/ops.hpp"
#include "hmil/nn/tape.hpp"
#include "hmil/nn/tensor.hpp"
#include "hmil/rng.hpp"
#include "hmil/schema.hpp"

namespace hmil {

/// `mean` is the aggregation with an approximation guarantee; `max` and
/// `mean_max` are engineering options without one. `first_instance` breaks
/// permutation invariance on purpose and exists for fault injection only.
enum class Aggregation { mean, max, mean_max, first_instance };

inline std::string_view to_string(Aggregation a) {
  switch (a) {
    case Aggregation::mean: return "mean";
    case Aggregation::max: return "max";
    case Aggregation::mean_max: return "mean_max";
    case Aggregation::first_instance: return "first_instance";
  }
  return "?";
}

inline Aggregation parse_aggregation(std::string_view s) {
  for (auto a : {Aggregation::mean, Aggregation::max, Aggregation::mean_max, Aggregation::first_instance}) {
    if (to_string(a) == s) return a;
  }
  throw UsageError("unknown aggregation '" + std::string(s) + "'");
}

struct ModelConfig {
  std::size_t embed_dim = 32;
  std::size_t hidden_dim = 32;
  nn::Activation activation = nn::Activation::tanh;
  Aggregation aggregation = Aggregation::mean;
  std::size_t output_dim = 1;
  std::uint64_t seed = 0;
  std::size_t leaf_dim = 0;
  std::size_t head_layers = 1;
  bool empty_bag_indicator = true;
  bool two_matrix = false;

  void validate() const {
    if (embed_dim == 0 || hidden_dim == 0 || output_dim == 0) {
      throw UsageError("embed_dim, hidden_dim and output_dim must be >= 1");
    }
    if (!nn::is_nonpolynomial(activation)) throw UsageError("activation must be tanh or relu");
  }

  bool operator==(const ModelConfig&) const = default;
};

inline Json to_json(const ModelConfig& c) {
  return {{"embed_dim", c.embed_dim},
          {"hidden_dim", c.hidden_dim},
          {"activation", nn::to_string(c.activation)},
          {"aggregation", to_string(c.aggregation)},
          {"output_dim", c.output_dim},
          {"seed", c.seed},
          {"leaf_dim", c.leaf_dim},
          {"head_layers", c.head_layers},
          {"empty_bag_indicator", c.empty_bag_indicator},
          {"two_matrix", c.two_matrix}};
}

/// Overlays the keys present in `j` onto `base`.
inline ModelConfig model_config_from_json(const Json& j, ModelConfig base = {}) {
  try {
    if (j.contains("embed_dim")) base.embed_dim = j.at("embed_dim").get<std::size_t>();
    if (j.contains("hidden_dim")) base.hidden_dim = j.at("hidden_dim").get<std::size_t>();
    if (j.contains("activation")) base.activation = nn::parse_activation(j.at("activation").get<std::string>());
    if (j.contains("aggregation")) base.aggregation = parse_aggregation(j.at("aggregation").get<std::string>());
    if (j.contains("output_dim")) base.output_dim = j.at("output_dim").get<std::size_t>();
    if (j.contains("seed")) base.seed = j.at("seed").get<std::uint64_t>();
    if (j.contains("leaf_dim")) base.leaf_dim = j.at("leaf_dim").get<std::size_t>();
    if (j.contains("head_layers")) base.head_layers = j.at("head_layers").get<std::size_t>();
    if (j.contains("empty_bag_indicator")) base.empty_bag_indicator = j.at("empty_bag_indicator").get<bool>();
    if (j.contains("two_matrix")) base.two_matrix = j.at("two_matrix").get<bool>();
  } catch (const Json::exception& e) {
    throw UsageError(std::string("invalid model config: ") + e.what());
  }
  return base;
}

/// Per-forward state: the tape, parameter bindings and captured bag outputs.
struct ForwardContext {
  explicit ForwardContext(nn::Tape& t, bool track = true) : tape(t), track_gradients(track) {}

  nn::Tape& tape;
  bool track_gradients;
  std::map<const nn::Tensor*, nn::Var> bound;
  std::map<std::string, nn::Var, std::less<>> bag_aggregates;  // before the indicator and W
  std::map<std::string, nn::Var, std::less<>> bag_outputs;     // after W

  /// Tape handle for a parameter, created on first use.
  nn::Var param(const nn::Tensor& p) {
    if (auto it = bound.find(&p); it != bound.end()) return it->second;
    const nn::Var v = track_gradients ? tape.variable(p) : tape.constant(p);
    bound.emplace(&p, v);
    return v;
  }
};

struct DenseLayer {
  nn::Tensor weight;  // in × out
  nn::Tensor bias;    // 1 × out
  nn::Activation activation = nn::Activation::identity;

  static DenseLayer init(std::size_t in, std::size_t out, nn::Activation act, Rng& rng) {
    return {nn::glorot_uniform(in, out, rng), nn::Tensor(1, out), act};
  }

  std::size_t in() const { return weight.rows(); }
  std::size_t out() const { return weight.cols(); }

  nn::Var forward(ForwardContext& ctx, nn::Var x) const {
    return nn::dense_forward(ctx.tape, x, ctx.param(weight), ctx.param(bias), activation);
  }

  void parameters(std::vector<nn::Tensor*>& out) {
    out.push_back(&weight);
    out.push_back(&bias);
  }
};

class Module {
 public:
  explicit Module(std::string path) : path_(std::move(path)) {}
  virtual ~Module() = default;

  virtual SchemaKind kind() const = 0;
  virtual std::size_t output_width() const = 0;
  virtual nn::Var forward(ForwardContext& ctx, const BatchNode& batch) const = 0;
  /// Appends parameters in preorder: this module's, then its children's.
  virtual void parameters(std::vector<nn::Tensor*>& out) = 0;
  virtual std::unique_ptr<Module> clone() const = 0;
  virtual std::vector<const Module*> children() const { return {}; }
  virtual std::vector<Module*> children() { return {}; }

  /// Schema path of the node this module was compiled from.
  const std::string& path() const noexcept { return path_; }

 protected:
  void expect(const BatchNode& b, SchemaKind k) const {
    if (b.kind != k) {
      throw StructuralError("model node " + path_ + " expects " + std::string(to_string(k)) + " input, batch has " +
                            std::string(to_string(b.kind)));
    }
  }

 private:
  std::string path_;
};

class LeafEncoderModule final : public Module {
 public:
  LeafEncoderModule(std::string path, SchemaKind kind, std::size_t width, std::optional<DenseLayer> dense)
      : Module(std::move(path)), kind_(kind), width_(width), dense_(std::move(dense)) {}

  SchemaKind kind() const override { return kind_; }
  std::size_t input_width() const { return width_; }
  std::size_t output_width() const override { return dense_ ? dense_->out() : width_; }

  nn::Var forward(ForwardContext& ctx, const BatchNode& batch) const override {
    expect(batch, kind_);
    if (batch.leaf.cols() != width_) {
      throw StructuralError("leaf " + path() + " expects width " + std::to_string(width_) + ", batch has " +
                            std::to_string(batch.leaf.cols()));
    }
    const nn::Var x = ctx.tape.constant(batch.leaf);
    return dense_ ? dense_->forward(ctx, x) : x;
  }

  void parameters(std::vector<nn::Tensor*>& out) override {
    if (dense_) dense_->parameters(out);
  }

  std::unique_ptr<Module> clone() const override { return std::make_unique<LeafEncoderModule>(*this); }

  const std::optional<DenseLayer>& dense() const { return dense_; }
  std::optional<DenseLayer>& dense() { return dense_; }

 private:
  SchemaKind kind_;
  std::size_t width_;
  std::optional<DenseLayer> dense_;
};

class BagModule final : public Module {
 public:
  BagModule(std::string path, std::unique_ptr<Module> child, DenseLayer phi, std::optional<nn::Tensor> pre_aggregation,
            Aggregation aggregation, bool indicator, DenseLayer post)
      : Module(std::move(path)),
        child_(std::move(child)),
        phi_(std::move(phi)),
        pre_(std::move(pre_aggregation)),
        aggregation_(aggregation),
        indicator_(indicator),
        post_(std::move(post)) {}

  BagModule(const BagModule& o)
      : Module(o),
        child_(o.child_->clone()),
        phi_(o.phi_),
        pre_(o.pre_),
        aggregation_(o.aggregation_),
        indicator_(o.indicator_),
        post_(o.post_) {}

  SchemaKind kind() const override { return SchemaKind::bag; }
  std::size_t output_width() const override { return post_.out(); }

  /// Width of the aggregated vector fed to W, indicator column included.
  std::size_t aggregate_width() const {
    const std::size_t k = phi_.out();
    return (aggregation_ == Aggregation::mean_max ? 2 * k : k) + (indicator_ ? 1 : 0);
  }

  nn::Var forward(ForwardContext& ctx, const BatchNode& batch) const override {
    expect(batch, SchemaKind::bag);
    if (batch.children.size() != 1 || batch.offsets.size() != batch.rows + 1) {
      throw StructuralError("bag batch node at " + path() + " is malformed");
    }
    const nn::Var instances = child_->forward(ctx, batch.children.front());
    nn::Var h = phi_.forward(ctx, instances);
    if (pre_) h = nn::matmul(ctx.tape, h, ctx.param(*pre_));
    nn::Var agg;
    switch (aggregation_) {
      case Aggregation::mean: agg = nn::segment_mean(ctx.tape, h, batch.offsets); break;
      case Aggregation::max: agg = nn::segment_max(ctx.tape, h, batch.offsets); break;
      case Aggregation::mean_max:
        agg = nn::concat_cols(ctx.tape, {nn::segment_mean(ctx.tape, h, batch.offsets),
                                         nn::segment_max(ctx.tape, h, batch.offsets)});
        break;
      case Aggregation::first_instance: agg = nn::segment_first(ctx.tape, h, batch.offsets); break;
    }
    ctx.bag_aggregates.insert_or_assign(path(), agg);
    if (indicator_) {
      nn::Tensor nonempty(batch.rows, 1);
      for (std::size_t b = 0; b < batch.rows; ++b) nonempty(b, 0) = batch.offsets[b + 1] > batch.offsets[b] ? 1.0 : 0.0;
      agg = nn::concat_cols(ctx.tape, {agg, ctx.tape.constant(std::move(nonempty))});
    }
    const nn::Var out = post_.forward(ctx, agg);
    ctx.bag_outputs.insert_or_assign(path(), out);
    return out;
  }

  void parameters(std::vector<nn::Tensor*>& out) override {
    phi_.parameters(out);
    if (pre_) out.push_back(&*pre_);
    post_.parameters(out);
    child_->parameters(out);
  }

  std::unique_ptr<Module> clone() const override { return std::make_unique<BagModule>(*this); }
  std::vector<const Module*> children() const override { return {child_.get()}; }
  std::vector<Module*> children() override { return {child_.get()}; }

  const Module& child() const { return *child_; }
  const DenseLayer& phi() const { return phi_; }
  DenseLayer& phi() { return phi_; }
  const std::optional<nn::Tensor>& pre_aggregation() const { return pre_; }
  std::optional<nn::Tensor>& pre_aggregation() { return pre_; }
  Aggregation aggregation() const { return aggregation_; }
  void set_aggregation(Aggregation a) { aggregation_ = a; }
  bool indicator() const { return indicator_; }
  const DenseLayer& post() const { return post_; }
  DenseLayer& post() { return post_; }

 private:
  std::unique_ptr<Module> child_;
  DenseLayer phi_;
  std::optional<nn::Tensor> pre_;
  Aggregation aggregation_;
  bool indicator_;
  DenseLayer post_;
};

class ProductModule final : public Module {
 public:
  struct Field {
    std::string name;
    bool optional = false;
    std::unique_ptr<Module> module;
  };

  ProductModule(std::string path, std::vector<Field> fields, DenseLayer combiner)
      : Module(std::move(path)), fields_(std::move(fields)), combiner_(std::move(combiner)) {}

  ProductModule(const ProductModule& o) : Module(o), combiner_(o.combiner_) {
    for (const auto& f : o.fields_) fields_.push_back({f.name, f.optional, f.module->clone()});
  }

  SchemaKind kind() const override { return SchemaKind::product; }
  std::size_t output_width() const override { return combiner_.out(); }

  nn::Var forward(ForwardContext& ctx, const BatchNode& batch) const override {
    expect(batch, SchemaKind::product);
    if (batch.children.size() != fields_.size() || batch.presence.size() != fields_.size()) {
      throw StructuralError("product " + path() + " has " + std::to_string(fields_.size()) + " fields, batch has " +
                            std::to_string(batch.children.size()));
    }
    std::vector<nn::Var> parts;
    std::vector<double> flags;
    std::size_t optional_count = 0;
    for (std::size_t i = 0; i < fields_.size(); ++i) {
      nn::Var r = fields_[i].module->forward(ctx, batch.children[i]);
      if (fields_[i].optional) {
        r = nn::scale_rows(ctx.tape, r, batch.presence[i]);
        ++optional_count;
      }
      parts.push_back(r);
    }
    if (optional_count > 0) {
      nn::Tensor presence(batch.rows, optional_count);
      std::size_t col = 0;
      for (std::size_t i = 0; i < fields_.size(); ++i) {
        if (!fields_[i].optional) continue;
        for (std::size_t r = 0; r < batch.rows; ++r) presence(r, col) = batch.presence[i][r];
        ++col;
      }
      parts.push_back(ctx.tape.constant(std::move(presence)));
    }
    const nn::Var joined = parts.empty() ? ctx.tape.constant(nn::Tensor(batch.rows, 0)) : nn::concat_cols(ctx.tape, parts);
    return combiner_.forward(ctx, joined);
  }

  void parameters(std::vector<nn::Tensor*>& out) override {
    combiner_.parameters(out);
    for (auto& f : fields_) f.module->parameters(out);
  }

  std::unique_ptr<Module> clone() const override { return std::make_unique<ProductModule>(*this); }

  std::vector<const Module*> children() const override {
    std::vector<const Module*> c;
    for (const auto& f : fields_) c.push_back(f.module.get());
    return c;
  }
  std::vector<Module*> children() override {
    std::vector<Module*> c;
    for (auto& f : fields_) c.push_back(f.module.get());
    return c;
  }

  const std::vector<Field>& fields() const { return fields_; }
  const DenseLayer& combiner() const { return combiner_; }
  DenseLayer& combiner() { return combiner_; }

 private:
  std::vector<Field> fields_;
  DenseLayer combiner_;
};

struct OutputHead {
  std::vector<DenseLayer> hidden;
  DenseLayer output;

  nn::Var forward(ForwardContext& ctx, nn::Var x) const {
    for (const auto& layer : hidden) x = layer.forward(ctx, x);
    return output.forward(ctx, x);
  }

  void parameters(std::vector<nn::Tensor*>& out) {
    for (auto& layer : hidden) layer.parameters(out);
    output.parameters(out);
  }
};

class Model {
 public:
  Model(Schema schema, ModelConfig config, std::unique_ptr<Module> root, OutputHead head, Json metadata = Json::object())
      : schema_(std::move(schema)),
        config_(config),
        root_(std::move(root)),
        head_(std::move(head)),
        metadata_(std::move(metadata)) {}

  Model(const Model& o)
      : schema_(o.schema_), config_(o.config_), root_(o.root_->clone()), head_(o.head_), metadata_(o.metadata_) {}
  Model(Model&&) noexcept = default;
  Model& operator=(const Model& o) {
    if (this != &o) *this = Model(o);
    return *this;
  }
  Model& operator=(Model&&) noexcept = default;

  const Schema& schema() const { return schema_; }
  const ModelConfig& config() const { return config_; }
  const Module& root() const { return *root_; }
  Module& root() { return *root_; }
  const OutputHead& head() const { return head_; }
  OutputHead& head() { return head_; }

  /// Free-form description stored alongside the weights (task, labels, ...).
  const Json& metadata() const { return metadata_; }
  Json& metadata() { return metadata_; }

  nn::Var forward(ForwardContext& ctx, const RaggedBatch& batch) const {
    return head_.forward(ctx, root_->forward(ctx, batch.root));
  }

  /// Output rows for a batch without recording gradients.
  nn::Tensor predict(const RaggedBatch& batch) const {
    nn::Tape tape;
    ForwardContext ctx(tape, false);
    return tape.value(forward(ctx, batch));
  }

  /// Module-tree preorder, head last.
  std::vector<nn::Tensor*> parameters() {
    std::vector<nn::Tensor*> out;
    root_->parameters(out);
    head_.parameters(out);
    return out;
  }

  std::vector<const nn::Tensor*> parameters() const {
    auto ps = const_cast<Model*>(this)->parameters();
    return {ps.begin(), ps.end()};
  }

  std::size_t parameter_count() const {
    std::size_t n = 0;
    for (const auto* p : parameters()) n += p->size();
    return n;
  }

  const Module* find(std::string_view path) const { return find_in(*root_, path); }
  Module* find(std::string_view path) { return const_cast<Module*>(find_in(*root_, path)); }

 private:
  static const Module* find_in(const Module& m, std::string_view path) {
    if (m.path() == path) return &m;
    for (const Module* c : m.children()) {
      if (const Module* r = find_in(*c, path)) return r;
    }
    return nullptr;
  }

  Schema schema_;
  ModelConfig config_;
  std::unique_ptr<Module> root_;
  OutputHead head_;
  Json metadata_;
};

namespace detail {

inline std::unique_ptr<Module> build_module(const Schema& s, const ModelConfig& cfg, Rng& rng, const std::string& path) {
  switch (s.kind) {
    case SchemaKind::numeric:
    case SchemaKind::string:
    case SchemaKind::categorical: {
      const std::size_t w = leaf_width(s);
      std::optional<DenseLayer> dense;
      if (cfg.leaf_dim > 0) dense = DenseLayer::init(w, cfg.leaf_dim, cfg.activation, rng);
      return std::make_unique<LeafEncoderModule>(path, s.kind, w, std::move(dense));
    }
    case SchemaKind::bag: {
      auto child = build_module(s.bag_element(), cfg, rng, path + "[*]");
      const std::size_t k = cfg.embed_dim;
      auto phi = DenseLayer::init(child->output_width(), k, cfg.activation, rng);
      std::optional<nn::Tensor> pre;
      if (cfg.two_matrix) pre = nn::glorot_uniform(k, k, rng);
      const std::size_t agg = (cfg.aggregation == Aggregation::mean_max ? 2 * k : k) + (cfg.empty_bag_indicator ? 1 : 0);
      auto post = DenseLayer::init(agg, k, nn::Activation::identity, rng);
      return std::make_unique<BagModule>(path, std::move(child), std::move(phi), std::move(pre), cfg.aggregation,
                                         cfg.empty_bag_indicator, std::move(post));
    }
    case SchemaKind::product: {
      std::vector<ProductModule::Field> fields;
      std::size_t width = 0;
      for (const auto& f : s.fields) {
        auto m = build_module(f.schema, cfg, rng, detail::field_path(path, f.name));
        width += m->output_width() + (f.optional ? 1 : 0);
        fields.push_back({f.name, f.optional, std::move(m)});
      }
      auto combiner = DenseLayer::init(width, cfg.hidden_dim, cfg.activation, rng);
      return std::make_unique<ProductModule>(path, std::move(fields), std::move(combiner));
    }
    case SchemaKind::unknown: break;
  }
  throw BuildError("schema node at " + path + " has unknown kind");
}

}  // namespace detail

/// Compiles `schema` into a freshly initialized model (Glorot weights, zero
/// biases, drawn from Rng(config.seed) in construction order).
inline Model build_model(const Schema& schema, const ModelConfig& config, Json metadata = Json::object()) {
  config.validate();
  Rng rng(config.seed);
  auto root = detail::build_module(schema, config, rng, "$");
  OutputHead head;
  std::size_t in = root->output_width();
  for (std::size_t i = 0; i < config.head_layers; ++i) {
    head.hidden.push_back(DenseLayer::init(in, config.hidden_dim, config.activation, rng));
    in = config.hidden_dim;
  }
  head.output = DenseLayer::init(in, config.output_dim, nn::Activation::identity, rng);
  return Model(schema, config, std::move(root), std::move(head), std::move(metadata));
}

enum class EmbedStage {
  aggregate,  // h(p): mean (or max) of φ over the bag
  linear,     // W·[h(p) ∥ nonempty] + b
};

/// Bag vectors at `path`, one row per bag occurrence in the batch (one per
/// document for a top-level bag).
inline nn::Tensor embed(const Model& model, const RaggedBatch& batch, std::string_view path,
                        EmbedStage stage = EmbedStage::aggregate) {
  const Module* m = model.find(path);
  if (m == nullptr) throw UsageError("no model node at path " + std::string(path));
  if (m->kind() != SchemaKind::bag) {
    throw UsageError("embed path " + std::string(path) + " is a " + std::string(to_string(m->kind())) + ", not a bag");
  }
  nn::Tape tape;
  ForwardContext ctx(tape, false);
  model.forward(ctx, batch);
  const auto& captured = stage == EmbedStage::aggregate ? ctx.bag_aggregates : ctx.bag_outputs;
  const auto it = captured.find(path);
  if (it == captured.end()) throw StructuralError("bag " + std::string(path) + " was not evaluated");
  return tape.value(it->second);
}

namespace detail {

inline void collapse_module(Module& m) {
  if (auto* bag = dynamic_cast<BagModule*>(&m)) {
    if (bag->pre_aggregation()) {
      if (bag->aggregation() != Aggregation::mean) {
        throw StructuralError("only mean aggregation commutes with the pre-aggregation matrix at " + bag->path());
      }
      const nn::Tensor& pre = *bag->pre_aggregation();
      DenseLayer& post = bag->post();
      const std::size_t k = pre.rows();
      if (pre.cols() != k || post.in() < k) throw StructuralError("pre-aggregation matrix shape mismatch at " + bag->path());
      nn::Tensor w(post.in(), post.out());
      for (std::size_t i = 0; i < k; ++i) {
        for (std::size_t j = 0; j < post.out(); ++j) {
          double s = 0.0;
          for (std::size_t m2 = 0; m2 < k; ++m2) s += pre(i, m2) * post.weight(m2, j);
          w(i, j) = s;
        }
      }
      for (std::size_t i = k; i < post.in(); ++i) {
        for (std::size_t j = 0; j < post.out(); ++j) w(i, j) = post.weight(i, j);
      }
      post.weight = std::move(w);
      bag->pre_aggregation().reset();
    }
  }
  for (Module* c : m.children()) collapse_module(*c);
}

}  // namespace detail

/// Folds every pre-aggregation matrix P of a two-matrix model into the
/// following linear map: mean(h·P)·W = mean(h)·(P·W).
inline Model collapse(const Model& two_matrix) {
  Model out = two_matrix;
  detail::collapse_module(out.root());
  auto cfg = out.config();
  cfg.two_matrix = false;
  return Model(out.schema(), cfg, out.root().clone(), out.head(), out.metadata());
}

/// Largest |f_two(x) − f_collapsed(x)| over all outputs of all batches.
inline double collapse_equivalence_check(const Model& two_matrix, const Model& collapsed,
                                         std::span<const RaggedBatch> batches) {
  if (!structurally_equal(two_matrix.schema(), collapsed.schema())) {
    throw StructuralError("collapse check: models were built from different schemas");
  }
  double worst = 0.0;
  for (const auto& b : batches) {
    const auto f2 = two_matrix.predict(b);
    const auto f1 = collapsed.predict(b);
    if (!f2.same_shape(f1)) throw StructuralError("collapse check: output shapes " + f2.shape() + " vs " + f1.shape());
    worst = std::max(worst, nn::max_abs_diff(f2, f1));
  }
  return worst;
}

/// Closed-form parameter count, computed from the schema alone.
inline std::size_t expected_parameter_count(const Schema& schema, const ModelConfig& cfg) {
  struct Count {
    std::size_t params;
    std::size_t width;
  };
  const std::size_t k = cfg.embed_dim, h = cfg.hidden_dim;
  auto visit = [&](auto&& self, const Schema& s) -> Count {
    switch (s.kind) {
      case SchemaKind::bag: {
        const Count c = self(self, s.bag_element());
        const std::size_t a = cfg.aggregation == Aggregation::mean_max ? 2 : 1;
        const std::size_t e = cfg.empty_bag_indicator ? 1 : 0;
        return {c.params + (c.width + 1) * k + (cfg.two_matrix ? k * k : 0) + (a * k + e + 1) * k, k};
      }
      case SchemaKind::product: {
        std::size_t params = 0, in = 0;
        for (const auto& f : s.fields) {
          const Count c = self(self, f.schema);
          params += c.params;
          in += c.width + (f.optional ? 1 : 0);
        }
        return {params + (in + 1) * h, h};
      }
      default: {
        const std::size_t w = leaf_width(s);
        if (cfg.leaf_dim == 0) return {0, w};
        return {(w + 1) * cfg.leaf_dim, cfg.leaf_dim};
      }
    }
  };
  const Count root = visit(visit, schema);
  std::size_t head = 0;
  if (cfg.head_layers == 0) {
    head = (root.width + 1) * cfg.output_dim;
  } else {
    head = (root.width + 1) * h + (cfg.head_layers - 1) * (h + 1) * h + (h + 1) * cfg.output_dim;
  }
  return root.params + head;
}

// Model container:
//   "HMIL" | u32 format_version | u64 len | schema JSON | u64 len | config JSON
//   | parameters as f64, all little-endian, in Model::parameters() order.

inline constexpr std::uint32_t kModelFormatVersion = 1;

namespace detail {

inline void put_u64(std::string& out, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
}

inline void put_u32(std::string& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
}

class Reader {
 public:
  explicit Reader(std::string_view data) : data_(data) {}

  std::string_view take(std::size_t n) {
    if (data_.size() - pos_ < n) throw LoadError("model file is truncated");
    auto s = data_.substr(pos_, n);
    pos_ += n;
    return s;
  }

  std::uint64_t u64() {
    auto s = take(8);
    std::uint64_t v = 0;
    for (int i = 7; i >= 0; --i) v = (v << 8) | static_cast<unsigned char>(s[static_cast<std::size_t>(i)]);
    return v;
  }

  std::uint32_t u32() {
    auto s = take(4);
    std::uint32_t v = 0;
    for (int i = 3; i >= 0; --i) v = (v << 8) | static_cast<unsigned char>(s[static_cast<std::size_t>(i)]);
    return v;
  }

  std::size_t remaining() const { return data_.size() - pos_; }

 private:
  std::string_view data_;
  std::size_t pos_ = 0;
};

}  // namespace detail

inline Json model_config_blob(const Model& m) { return {{"model", to_json(m.config())}, {"metadata", m.metadata()}}; }

inline std::string serialize_model(const Model& model) {
  std::string out = "HMIL";
  detail::put_u32(out, kModelFormatVersion);
  const std::string schema = schema_to_string(model.schema());
  detail::put_u64(out, schema.size());
  out += schema;
  const std::string config = model_config_blob(model).dump();
  detail::put_u64(out, config.size());
  out += config;
  for (const nn::Tensor* p : model.parameters()) {
    for (double v : p->data()) detail::put_u64(out, std::bit_cast<std::uint64_t>(v));
  }
  return out;
}

inline Model deserialize_model(std::string_view bytes) {
  detail::Reader r(bytes);
  if (r.take(4) != "HMIL") throw LoadError("not a model file (bad magic)");
  const std::uint32_t version = r.u32();
  if (version != kModelFormatVersion) throw LoadError("unsupported model format version " + std::to_string(version));
  const Schema schema = schema_from_string(r.take(r.u64()));
  Json config;
  try {
    config = Json::parse(r.take(r.u64()));
  } catch (const Json::parse_error& e) {
    throw LoadError(std::string("model config is not valid JSON: ") + e.what());
  }
  if (!config.contains("model")) throw LoadError("model config lacks the model section");
  ModelConfig cfg;
  try {
    cfg = model_config_from_json(config.at("model"));
  } catch (const UsageError& e) {
    throw LoadError(e.what());
  }
  Model model = build_model(schema, cfg, config.value("metadata", Json::object()));
  const auto params = model.parameters();
  std::size_t total = 0;
  for (const auto* p : params) total += p->size();
  if (r.remaining() != total * 8) {
    throw LoadError("model file holds " + std::to_string(r.remaining()) + " parameter bytes, expected " +
                    std::to_string(total * 8));
  }
  for (nn::Tensor* p : params) {
    for (double& v : p->data()) v = std::bit_cast<double>(r.u64());
  }
  return model;
}

inline void save_model(const Model& model, const std::string& path) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error("cannot open " + path + " for writing");
  const std::string bytes = serialize_model(model);
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw Error("failed writing " + path);
}

inline Model load_model(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw LoadError("cannot open " + path);
  std::ostringstream ss;
  ss << in.rdbuf();
  return deserialize_model(ss.str());
}

}  // namespace hmil
