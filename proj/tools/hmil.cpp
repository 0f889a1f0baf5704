#include <CLI11.hpp>

#include <algorithm>
#include <cstdint>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "hmil/hmil.hpp"

namespace {

using hmil::Json;

enum Exit { kOk = 0, kFailed = 1, kInput = 2, kAborted = 3 };

/// Non-blank lines of a JSONL file with their 1-based line numbers.
struct Line {
  std::size_t number;
  std::string text;
};

std::vector<Line> read_lines(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw hmil::UsageError("cannot open " + path);
  std::vector<Line> out;
  std::string text;
  for (std::size_t n = 1; std::getline(in, text); ++n) {
    if (text.find_first_not_of(" \t\r") != std::string::npos) out.push_back({n, text});
  }
  return out;
}

Json parse_line(const Line& l) {
  try {
    return Json::parse(l.text);
  } catch (const Json::parse_error& e) {
    throw hmil::UsageError("line " + std::to_string(l.number) + ": invalid JSON: " + e.what());
  }
}

Json read_json_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw hmil::UsageError("cannot open " + path);
  try {
    return Json::parse(in);
  } catch (const Json::parse_error& e) {
    throw hmil::UsageError(path + ": invalid JSON: " + e.what());
  }
}

void write_text(const std::string& path, const std::string& text) {
  if (path.empty() || path == "-") {
    std::cout << text;
    return;
  }
  std::ofstream out(path, std::ios::binary);
  if (!out) throw hmil::UsageError("cannot write " + path);
  out << text;
}

// ---------------------------------------------------------------- infer

struct InferArgs {
  std::string input;
  std::string output;
  std::size_t categorical_threshold = 32;
  std::size_t ngram_n = 3;
  std::size_t ngram_dim = 64;
};

int cmd_infer(const InferArgs& a) {
  hmil::InferenceOptions opts{a.categorical_threshold, {a.ngram_n, a.ngram_dim}};
  hmil::SchemaInferrer inferrer(opts);
  for (const auto& l : read_lines(a.input)) {
    const Json doc = parse_line(l);
    try {
      inferrer.observe(doc);
    } catch (const hmil::SchemaConflict& e) {
      throw hmil::UsageError("line " + std::to_string(l.number) + ": schema conflict: " + e.what());
    }
  }
  const hmil::Schema schema = inferrer.finish();
  write_text(a.output, schema_to_json(schema).dump(2) + "\n");
  std::ostream& log = a.output.empty() || a.output == "-" ? std::cerr : std::cout;
  log << "inferred schema with " << hmil::node_count(schema) << " nodes from " << inferrer.documents()
      << " documents\n";
  return kOk;
}

// ---------------------------------------------------------------- train

struct TrainArgs {
  std::string schema;
  std::string train;
  std::string label_field;
  std::string config;
  std::string output;
  std::string report;
  std::optional<std::uint64_t> seed;
  std::optional<std::size_t> epochs;
  std::optional<double> lr;
  std::optional<std::size_t> batch_size;
  std::optional<std::size_t> embed_dim;
  std::optional<std::size_t> hidden_dim;
  std::optional<std::string> loss;
};

/// Removes the label field from a root product schema.
hmil::Schema strip_field(hmil::Schema s, const std::string& name) {
  if (s.kind != hmil::SchemaKind::product) return s;
  std::erase_if(s.fields, [&](const auto& f) { return f.name == name; });
  return s;
}

int cmd_train(const TrainArgs& a) {
  // precedence: flags > config file > defaults
  hmil::ModelConfig mcfg;
  hmil::TrainConfig tcfg;
  if (!a.config.empty()) {
    const Json file = read_json_file(a.config);
    if (!file.is_object()) throw hmil::UsageError(a.config + ": config must be an object");
    for (const auto& [key, value] : file.items()) {
      if (key == "model") mcfg = hmil::model_config_from_json(value, mcfg);
      else if (key == "train") tcfg = hmil::train_config_from_json(value, tcfg);
      else throw hmil::UsageError(a.config + ": unknown section '" + key + "'");
    }
  }
  if (a.seed) {
    mcfg.seed = *a.seed;
    tcfg.seed = *a.seed;
  }
  if (a.epochs) tcfg.epochs = *a.epochs;
  if (a.lr) tcfg.lr = *a.lr;
  if (a.batch_size) tcfg.batch_size = *a.batch_size;
  if (a.embed_dim) mcfg.embed_dim = *a.embed_dim;
  if (a.hidden_dim) mcfg.hidden_dim = *a.hidden_dim;
  if (a.loss) tcfg.loss = hmil::parse_loss(*a.loss);

  std::ifstream schema_in(a.schema);
  if (!schema_in) throw hmil::UsageError("cannot open " + a.schema);
  std::stringstream buf;
  buf << schema_in.rdbuf();
  const hmil::Schema schema = strip_field(hmil::schema_from_string(buf.str()), a.label_field);

  std::vector<Json> docs, labels;
  for (const auto& l : read_lines(a.train)) {
    Json doc = parse_line(l);
    if (!doc.is_object() || !doc.contains(a.label_field) || doc[a.label_field].is_null()) {
      throw hmil::UsageError("line " + std::to_string(l.number) + ": label field '" + a.label_field + "' is missing");
    }
    labels.push_back(doc[a.label_field]);
    doc.erase(a.label_field);
    docs.push_back(std::move(doc));
  }
  if (docs.empty()) throw hmil::UsageError("training file has no documents");

  hmil::Dataset data;
  for (std::size_t i = 0; i < docs.size(); ++i) {
    try {
      data.docs.push_back(hmil::encode_document(docs[i], schema));
    } catch (const hmil::EncodingError& e) {
      throw hmil::UsageError("document " + std::to_string(i + 1) + ": " + e.what());
    }
  }

  Json metadata = {{"label_field", a.label_field}};
  if (tcfg.loss == hmil::LossKind::softmax_ce) {
    std::map<std::string, Json> by_text;
    for (const auto& l : labels) by_text.emplace(l.dump(), l);
    Json classes = Json::array();
    std::map<std::string, std::size_t> index;
    for (const auto& [text, value] : by_text) {
      index.emplace(text, classes.size());
      classes.push_back(value);
    }
    for (const auto& l : labels) data.labels.push_back(index.at(l.dump()));
    mcfg.output_dim = std::max<std::size_t>(classes.size(), 2);
    metadata["task"] = "classification";
    metadata["classes"] = classes;
  } else {
    mcfg.output_dim = 1;
    data.targets = hmil::nn::Tensor(labels.size(), 1);
    for (std::size_t i = 0; i < labels.size(); ++i) {
      if (!labels[i].is_number()) throw hmil::UsageError("document " + std::to_string(i + 1) + ": mse needs a numeric label");
      data.targets(i, 0) = labels[i].get<double>();
    }
    metadata["task"] = "regression";
  }

  hmil::Model model = hmil::build_model(schema, mcfg, metadata);
  const hmil::TrainingReport report = hmil::train(model, data, tcfg);
  hmil::save_model(model, a.output);

  const hmil::Metric metric =
      tcfg.loss == hmil::LossKind::softmax_ce ? hmil::Metric::accuracy : hmil::Metric::mse;
  Json out = {{"config", {{"model", hmil::to_json(mcfg)}, {"train", hmil::to_json(tcfg)}, {"label_field", a.label_field}}},
              {"documents", data.size()},
              {"parameters", model.parameter_count()},
              {"training", hmil::to_json(report)},
              {"final_train_" + std::string(hmil::to_string(metric)), hmil::evaluate(model, data, metric)}};
  write_text(a.report.empty() ? a.output + ".report.json" : a.report, out.dump(2) + "\n");
  std::cerr << "trained " << model.parameter_count() << " parameters on " << data.size() << " documents for "
            << report.epochs() << " epochs\n";
  return kOk;
}

// ---------------------------------------------------------------- predict

struct PredictArgs {
  std::string model;
  std::string input;
  std::string output;
};

int cmd_predict(const PredictArgs& a) {
  const hmil::Model model = hmil::load_model(a.model);
  const Json& meta = model.metadata();
  const std::string label_field = meta.value("label_field", std::string());
  const bool classify = meta.value("task", std::string("classification")) == "classification";
  const Json classes = meta.value("classes", Json::array());

  struct Row {
    std::size_t line;
    std::optional<hmil::EncodedDoc> doc;
    std::string error;
  };
  std::vector<Row> rows;
  for (const auto& l : read_lines(a.input)) {
    Row r{l.number, std::nullopt, {}};
    try {
      Json doc = Json::parse(l.text);
      if (doc.is_object() && !label_field.empty()) doc.erase(label_field);
      r.doc = hmil::encode_document(doc, model.schema());
    } catch (const std::exception& e) {
      r.error = e.what();
    }
    rows.push_back(std::move(r));
  }

  std::vector<hmil::EncodedDoc> ok;
  for (const auto& r : rows) {
    if (r.doc) ok.push_back(*r.doc);
  }
  const hmil::nn::Tensor scores = hmil::predict_scores(model, ok);

  std::ostringstream out;
  std::size_t next = 0, failures = 0;
  for (const auto& r : rows) {
    Json j;
    if (!r.doc) {
      ++failures;
      j = {{"line", r.line}, {"error", r.error}};
    } else {
      std::vector<double> s(scores.row(next).begin(), scores.row(next).end());
      if (classify) {
        const std::size_t k = hmil::argmax_row(scores, next);
        j["prediction"] = k < classes.size() ? classes[k] : Json(k);
      } else {
        j["prediction"] = s.front();
      }
      j["scores"] = s;
      ++next;
    }
    out << j.dump() << "\n";
  }
  write_text(a.output, out.str());
  if (failures > 0) {
    std::cerr << failures << " of " << rows.size() << " lines failed\n";
    return kFailed;
  }
  return kOk;
}

// ---------------------------------------------------------------- verify

struct VerifyArgs {
  std::string suite = "all";
  std::uint64_t seed = 0;
  std::string fault = "none";
  std::string output;
};

int cmd_verify(const VerifyArgs& a) {
  namespace v = hmil::verify;
  v::SuiteConfig cfg;
  cfg.suite = v::parse_suite(a.suite);
  cfg.seed = a.seed;
  if (a.fault != "none") cfg.fault = hmil::parse_aggregation(a.fault == "first-instance" ? "first_instance" : a.fault);
  const v::SuiteReport report = v::run_suite(cfg, [](std::string_view name) { std::cerr << "running " << name << "\n"; });
  write_text(a.output, hmil::verify::to_json(report).dump(2) + "\n");
  for (const auto& c : report.checks) {
    std::cerr << (c.passed ? "PASS " : "FAIL ") << c.name << "  value=" << c.value << ' '
              << v::to_string(c.comparison) << ' ' << c.threshold << "\n";
  }
  if (!report.passed()) {
    std::cerr << "failed checks:";
    for (const auto& f : report.failures()) std::cerr << ' ' << f;
    std::cerr << "\n";
    return kFailed;
  }
  return kOk;
}

// ---------------------------------------------------------------- generate

struct GenerateArgs {
  std::string task = "variance";
  std::string split = "train";
  std::uint64_t seed = 0;
  std::string output;
};

/// Writes a benchmark corpus as labelled JSONL; bare-array documents are
/// wrapped as {"instances": [...]} so the label can sit beside them.
int cmd_generate(const GenerateArgs& a) {
  hmil::LabeledCorpus c;
  if (a.task == "variance") c = hmil::variance_task(a.seed);
  else if (a.task == "nested") c = hmil::nested_task(a.seed);
  else if (a.task == "product") c = hmil::product_task(a.seed);
  else throw hmil::UsageError("unknown task '" + a.task + "'");
  if (a.split != "train" && a.split != "test") throw hmil::UsageError("split must be train or test");
  const auto& docs = a.split == "train" ? c.train_docs : c.test_docs;
  const auto& labels = a.split == "train" ? c.train_labels : c.test_labels;
  std::ostringstream out;
  for (std::size_t i = 0; i < docs.size(); ++i) {
    Json d = docs[i].is_object() ? docs[i] : Json{{"instances", docs[i]}};
    d["label"] = labels[i];
    out << d.dump() << "\n";
  }
  write_text(a.output, out.str());
  return kOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Schema-driven hierarchical multi-instance networks for JSON data"};
  app.require_subcommand(1);

  InferArgs infer;
  auto* in = app.add_subcommand("infer", "Infer a schema from a JSONL corpus");
  in->add_option("--input", infer.input, "JSONL corpus")->required();
  in->add_option("--output", infer.output, "Schema JSON (default: stdout)");
  in->add_option("--categorical-threshold", infer.categorical_threshold,
                 "Strings with at most this many distinct values are categorical");
  in->add_option("--ngram-n", infer.ngram_n, "n-gram length for string leaves");
  in->add_option("--ngram-dim", infer.ngram_dim, "Hash buckets for string leaves");

  TrainArgs tr;
  auto* t = app.add_subcommand("train", "Train a model on labelled JSONL");
  t->add_option("--schema", tr.schema, "Schema JSON from `infer`")->required();
  t->add_option("--train", tr.train, "Training JSONL")->required();
  t->add_option("--label-field", tr.label_field, "Top-level field holding the label")->required();
  t->add_option("--output", tr.output, "Model file")->required();
  t->add_option("--config", tr.config, "JSON config with optional \"model\" and \"train\" sections");
  t->add_option("--report", tr.report, "Training report (default: <output>.report.json)");
  t->add_option("--seed", tr.seed, "Seed for initialization and shuffling");
  t->add_option("--epochs", tr.epochs);
  t->add_option("--lr", tr.lr);
  t->add_option("--batch-size", tr.batch_size);
  t->add_option("--embed-dim", tr.embed_dim);
  t->add_option("--hidden-dim", tr.hidden_dim);
  t->add_option("--loss", tr.loss, "softmax_ce or mse");

  PredictArgs pr;
  auto* p = app.add_subcommand("predict", "Score JSONL documents with a trained model");
  p->add_option("--model", pr.model)->required();
  p->add_option("--input", pr.input)->required();
  p->add_option("--output", pr.output, "Predictions JSONL (default: stdout)");

  VerifyArgs ve;
  auto* v = app.add_subcommand("verify", "Run the verification suites; JSON report on stdout");
  v->add_option("--suite", ve.suite)->check(CLI::IsMember({"invariants", "concentration", "benchmarks", "all"}));
  v->add_option("--seed", ve.seed);
  v->add_option("--inject-fault", ve.fault, "Replace every bag aggregation")
      ->check(CLI::IsMember({"none", "first-instance", "max", "mean_max"}));
  v->add_option("--output", ve.output, "Report file (default: stdout)");

  GenerateArgs ge;
  auto* g = app.add_subcommand("generate", "Write a synthetic benchmark corpus as labelled JSONL");
  g->add_option("--task", ge.task)->check(CLI::IsMember({"variance", "nested", "product"}));
  g->add_option("--split", ge.split)->check(CLI::IsMember({"train", "test"}));
  g->add_option("--seed", ge.seed);
  g->add_option("--output", ge.output);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kOk : kInput;
  }

  try {
    if (*in) return cmd_infer(infer);
    if (*t) return cmd_train(tr);
    if (*p) return cmd_predict(pr);
    if (*v) return cmd_verify(ve);
    if (*g) return cmd_generate(ge);
  } catch (const hmil::TrainingAborted& e) {
    std::cerr << "error: training aborted: " << e.what() << "\n";
    return kAborted;
  } catch (const hmil::Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kInput;
  } catch (const Json::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kInput;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kAborted;
  }
  return kOk;
}
