#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <numeric>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "hmil/batching.hpp"
#include "hmil/encoding.hpp"
#include "hmil/error.hpp"
#include "hmil/model.hpp"
#include "hmil/nn/adam.hpp"
#include "hmil/nn/ops.hpp"
#include "hmil/nn/tape.hpp"
#include "hmil/nn/tensor.hpp"
#include "hmil/rng.hpp"

namespace hmil {

enum class LossKind { softmax_ce, mse };
enum class Metric { accuracy, mse };

inline std::string_view to_string(LossKind l) { return l == LossKind::softmax_ce ? "softmax_ce" : "mse"; }
inline std::string_view to_string(Metric m) { return m == Metric::accuracy ? "accuracy" : "mse"; }

inline LossKind parse_loss(std::string_view s) {
  if (s == "softmax_ce") return LossKind::softmax_ce;
  if (s == "mse") return LossKind::mse;
  throw UsageError("unknown loss '" + std::string(s) + "' (expected softmax_ce or mse)");
}

/// Mean cross-entropy of row-wise softmax(logits) against class indices.
inline nn::Var loss_softmax_ce(nn::Tape& tape, nn::Var logits, const std::vector<std::size_t>& labels) {
  const nn::Tensor& z = tape.value(logits);
  const std::size_t B = z.rows(), C = z.cols();
  if (labels.size() != B) {
    throw DimensionError("loss_softmax_ce: " + std::to_string(labels.size()) + " labels for " + std::to_string(B) +
                             " rows");
  }
  if (B == 0) throw DimensionError("loss_softmax_ce: empty batch");
  nn::Tensor probs(B, C);
  double total = 0.0;
  for (std::size_t i = 0; i < B; ++i) {
    if (labels[i] >= C) {
      throw ContractError("loss_softmax_ce: label " + std::to_string(labels[i]) + " out of range [0, " +
                          std::to_string(C) + ")");
    }
    double mx = z(i, 0);
    for (std::size_t j = 1; j < C; ++j) mx = std::max(mx, z(i, j));
    double s = 0.0;
    for (std::size_t j = 0; j < C; ++j) s += std::exp(z(i, j) - mx);
    const double lse = mx + std::log(s);
    for (std::size_t j = 0; j < C; ++j) probs(i, j) = std::exp(z(i, j) - lse);
    total += lse - z(i, labels[i]);
  }
  const double inv_b = 1.0 / static_cast<double>(B);
  return tape.record(nn::Tensor(1, 1, total * inv_b), {logits},
                     [logits, probs = std::move(probs), labels, inv_b](nn::Tape& t, const nn::Tensor& g) {
                       nn::Tensor& gz = t.grad_accumulator(logits);
                       const double scale = g(0, 0) * inv_b;
                       for (std::size_t i = 0; i < probs.rows(); ++i) {
                         for (std::size_t j = 0; j < probs.cols(); ++j) {
                           gz(i, j) += scale * (probs(i, j) - (j == labels[i] ? 1.0 : 0.0));
                         }
                       }
                     });
}

/// Mean squared error over every entry.
inline nn::Var loss_mse(nn::Tape& tape, nn::Var pred, const nn::Tensor& target) {
  const nn::Tensor& p = tape.value(pred);
  p.require_same_shape(target, "loss_mse");
  if (p.size() == 0) throw DimensionError("loss_mse: empty batch");
  nn::Tensor diff(p.rows(), p.cols());
  double total = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    diff.data()[i] = p.data()[i] - target.data()[i];
    total += diff.data()[i] * diff.data()[i];
  }
  const double inv_n = 1.0 / static_cast<double>(p.size());
  return tape.record(nn::Tensor(1, 1, total * inv_n), {pred},
                     [pred, diff = std::move(diff), inv_n](nn::Tape& t, const nn::Tensor& g) {
                       nn::Tensor& gp = t.grad_accumulator(pred);
                       const double scale = 2.0 * g(0, 0) * inv_n;
                       for (std::size_t i = 0; i < diff.size(); ++i) gp.data()[i] += scale * diff.data()[i];
                     });
}

/// Encoded documents with either class labels (classification) or a
/// size()×output_dim target matrix (regression).
struct Dataset {
  std::vector<EncodedDoc> docs;
  std::vector<std::size_t> labels;
  nn::Tensor targets;

  std::size_t size() const noexcept { return docs.size(); }
  bool empty() const noexcept { return docs.empty(); }
};

struct TrainConfig {
  std::size_t epochs = 20;
  std::size_t batch_size = 32;
  double lr = 1e-3;
  std::uint64_t seed = 0;
  LossKind loss = LossKind::softmax_ce;
};

inline Json to_json(const TrainConfig& c) {
  return {{"epochs", c.epochs}, {"batch_size", c.batch_size}, {"lr", c.lr}, {"seed", c.seed}, {"loss", to_string(c.loss)}};
}

inline TrainConfig train_config_from_json(const Json& j, TrainConfig base = {}) {
  if (!j.is_object()) throw UsageError("training config must be a JSON object");
  try {
    for (const auto& [key, value] : j.items()) {
      if (key == "epochs") base.epochs = value.get<std::size_t>();
      else if (key == "batch_size") base.batch_size = value.get<std::size_t>();
      else if (key == "lr") base.lr = value.get<double>();
      else if (key == "seed") base.seed = value.get<std::uint64_t>();
      else if (key == "loss") base.loss = parse_loss(value.get<std::string>());
      else throw UsageError("unknown training config key '" + key + "'");
    }
  } catch (const Json::exception& e) {
    throw UsageError(std::string("bad training config: ") + e.what());
  }
  return base;
}

/// Per-epoch series; the metric is measured on each training batch before its
/// update and averaged over the epoch.
struct TrainingReport {
  TrainConfig config;
  std::string metric;
  std::vector<double> loss;
  std::vector<double> train_metric;

  std::size_t epochs() const noexcept { return loss.size(); }
};

inline Json to_json(const TrainingReport& r) {
  return {{"config", to_json(r.config)}, {"metric", r.metric}, {"loss", r.loss}, {"train_metric", r.train_metric}};
}

inline std::size_t argmax_row(const nn::Tensor& t, std::size_t r) {
  std::size_t best = 0;
  for (std::size_t j = 1; j < t.cols(); ++j) {
    if (t(r, j) > t(r, best)) best = j;
  }
  return best;
}

namespace detail {

inline void check_dataset(const Model& model, const Dataset& data, LossKind loss) {
  if (loss == LossKind::softmax_ce) {
    if (data.labels.size() != data.size()) throw UsageError("dataset has " + std::to_string(data.labels.size()) +
                                                            " labels for " + std::to_string(data.size()) + " documents");
    const std::size_t C = model.config().output_dim;
    for (std::size_t l : data.labels) {
      if (l >= C) throw UsageError("label " + std::to_string(l) + " exceeds output_dim " + std::to_string(C));
    }
  } else if (data.targets.rows() != data.size() || data.targets.cols() != model.config().output_dim) {
    throw UsageError("regression targets are " + nn::Tensor::shape_string(data.targets.rows(), data.targets.cols()) + ", expected " +
                     std::to_string(data.size()) + "x" + std::to_string(model.config().output_dim));
  }
}

inline RaggedBatch gather(const Dataset& data, std::span<const std::size_t> idx, const Schema& schema) {
  std::vector<const EncodedDoc*> ptrs;
  ptrs.reserve(idx.size());
  for (std::size_t i : idx) ptrs.push_back(&data.docs[i]);
  return build_batch(std::span<const EncodedDoc* const>(ptrs), schema);
}

}  // namespace detail

/// Minibatch Adam. Epoch e visits the documents in an order drawn from
/// Rng::derive(seed, e), so the whole run is a function of (model, data, config).
inline TrainingReport train(Model& model, const Dataset& data, const TrainConfig& cfg) {
  if (cfg.batch_size == 0) throw UsageError("batch_size must be >= 1");
  if (!(cfg.lr > 0.0)) throw UsageError("lr must be positive");
  TrainingReport report;
  report.config = cfg;
  report.metric = std::string(to_string(cfg.loss == LossKind::softmax_ce ? Metric::accuracy : Metric::mse));
  if (cfg.epochs == 0) return report;
  if (data.empty()) throw UsageError("cannot train on an empty dataset");
  detail::check_dataset(model, data, cfg.loss);

  const std::vector<nn::Tensor*> params = model.parameters();
  nn::AdamState state;
  const nn::AdamConfig adam{.lr = cfg.lr};
  std::vector<std::size_t> order(data.size());
  std::vector<nn::Tensor> grads;
  grads.reserve(params.size());

  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    std::iota(order.begin(), order.end(), std::size_t{0});
    Rng rng = Rng::derive(cfg.seed, epoch);
    rng.shuffle(std::span<std::size_t>(order));

    double loss_sum = 0.0, metric_sum = 0.0;
    std::size_t batch_no = 0;
    for (std::size_t lo = 0; lo < order.size(); lo += cfg.batch_size, ++batch_no) {
      const std::size_t hi = std::min(order.size(), lo + cfg.batch_size);
      const std::span<const std::size_t> idx(order.data() + lo, hi - lo);
      const RaggedBatch batch = detail::gather(data, idx, model.schema());

      nn::Tape tape;
      ForwardContext ctx(tape);
      const nn::Var out = model.forward(ctx, batch);
      nn::Var loss;
      const nn::Tensor& scores = tape.value(out);
      double metric = 0.0;
      if (cfg.loss == LossKind::softmax_ce) {
        std::vector<std::size_t> labels;
        labels.reserve(idx.size());
        for (std::size_t i : idx) labels.push_back(data.labels[i]);
        loss = loss_softmax_ce(tape, out, labels);
        for (std::size_t r = 0; r < labels.size(); ++r) metric += argmax_row(scores, r) == labels[r] ? 1.0 : 0.0;
      } else {
        nn::Tensor target(idx.size(), data.targets.cols());
        for (std::size_t r = 0; r < idx.size(); ++r) {
          for (std::size_t j = 0; j < target.cols(); ++j) target(r, j) = data.targets(idx[r], j);
        }
        loss = loss_mse(tape, out, target);
        metric = tape.value(loss)(0, 0) * static_cast<double>(idx.size());
      }
      const double l = tape.value(loss)(0, 0);
      if (!std::isfinite(l)) {
        throw TrainingAborted(epoch, batch_no, "non-finite loss");
      }

      tape.backward(loss);
      grads.clear();
      for (const nn::Tensor* p : params) grads.push_back(tape.grad(ctx.param(*p)));
      nn::adam_step(params, grads, state, adam);

      loss_sum += l * static_cast<double>(idx.size());
      metric_sum += metric;
    }
    const double n = static_cast<double>(data.size());
    report.loss.push_back(loss_sum / n);
    report.train_metric.push_back(metric_sum / n);
  }
  return report;
}

/// Scores for every document, in order, computed in fixed-size chunks.
inline nn::Tensor predict_scores(const Model& model, std::span<const EncodedDoc> docs, std::size_t batch_size = 256) {
  nn::Tensor out(docs.size(), model.config().output_dim);
  for (std::size_t lo = 0; lo < docs.size(); lo += batch_size) {
    const std::size_t hi = std::min(docs.size(), lo + batch_size);
    const nn::Tensor s = model.predict(build_batch(docs.subspan(lo, hi - lo), model.schema()));
    for (std::size_t r = 0; r < s.rows(); ++r) {
      for (std::size_t j = 0; j < s.cols(); ++j) out(lo + r, j) = s(r, j);
    }
  }
  return out;
}

inline std::vector<std::size_t> predicted_classes(const nn::Tensor& scores) {
  std::vector<std::size_t> out(scores.rows());
  for (std::size_t r = 0; r < scores.rows(); ++r) out[r] = argmax_row(scores, r);
  return out;
}

inline double accuracy(std::span<const std::size_t> predicted, std::span<const std::size_t> labels) {
  if (predicted.size() != labels.size() || labels.empty()) throw UsageError("accuracy needs equal, non-empty inputs");
  std::size_t hit = 0;
  for (std::size_t i = 0; i < labels.size(); ++i) hit += predicted[i] == labels[i] ? 1 : 0;
  return static_cast<double>(hit) / static_cast<double>(labels.size());
}

inline double evaluate(const Model& model, const Dataset& data, Metric metric) {
  if (data.empty()) throw UsageError("cannot evaluate on an empty dataset");
  const nn::Tensor scores = predict_scores(model, data.docs);
  if (metric == Metric::accuracy) {
    if (data.labels.size() != data.size()) throw UsageError("accuracy needs one label per document");
    return accuracy(predicted_classes(scores), data.labels);
  }
  scores.require_same_shape(data.targets, "evaluate(mse)");
  double s = 0.0;
  for (std::size_t i = 0; i < scores.size(); ++i) {
    const double d = scores.data()[i] - data.targets.data()[i];
    s += d * d;
  }
  return s / static_cast<double>(scores.size());
}

}  // namespace hmil
