#pragma once

#include <cmath>
#include <cstddef>
#include <string>
#include <string_view>
#include <vector>

#include "hmil/error.hpp"
#include "hmil/nn/tape.hpp"
#include "hmil/nn/tensor.hpp"

namespace hmil::nn {

/// Absolute row boundaries of consecutive segments: segment b spans rows
/// [offsets[b], offsets[b+1]).
using Offsets = std::vector<std::size_t>;

enum class Activation { tanh, relu, identity };

inline std::string_view to_string(Activation a) {
  switch (a) {
    case Activation::tanh: return "tanh";
    case Activation::relu: return "relu";
    case Activation::identity: return "identity";
  }
  return "?";
}

inline Activation parse_activation(std::string_view s) {
  if (s == "tanh") return Activation::tanh;
  if (s == "relu") return Activation::relu;
  if (s == "identity") return Activation::identity;
  throw UsageError("unknown activation '" + std::string(s) + "'");
}

/// Only tanh and relu qualify as the nonlinearity of a network layer.
inline bool is_nonpolynomial(Activation a) { return a != Activation::identity; }

inline double apply(Activation a, double x) {
  switch (a) {
    case Activation::tanh: return std::tanh(x);
    case Activation::relu: return x > 0.0 ? x : 0.0;
    case Activation::identity: return x;
  }
  return x;
}

/// Throws StructuralError unless offsets delimit `rows` rows.
inline void check_offsets(const Offsets& offsets, std::size_t rows) {
  if (offsets.empty()) throw StructuralError("offsets must contain at least one entry");
  if (offsets.front() != 0) throw StructuralError("offsets must start at 0");
  for (std::size_t i = 1; i < offsets.size(); ++i) {
    if (offsets[i] < offsets[i - 1]) {
      throw StructuralError("offsets decrease at position " + std::to_string(i));
    }
  }
  if (offsets.back() != rows) {
    throw StructuralError("offsets end at " + std::to_string(offsets.back()) + " but there are " +
                          std::to_string(rows) + " rows");
  }
}

inline Var matmul(Tape& tape, Var a, Var b) {
  const Tensor& A = tape.value(a);
  const Tensor& B = tape.value(b);
  if (A.cols() != B.rows()) {
    throw DimensionError("matmul: " + A.shape() + " x " + B.shape());
  }
  const std::size_t n = A.rows(), d = A.cols(), k = B.cols();
  Tensor out(n, k);
  for (std::size_t i = 0; i < n; ++i) {
    auto orow = out.row(i);
    for (std::size_t m = 0; m < d; ++m) {
      const double x = A(i, m);
      if (x == 0.0) continue;
      auto brow = B.row(m);
      for (std::size_t j = 0; j < k; ++j) orow[j] += x * brow[j];
    }
  }
  return tape.record(std::move(out), {a, b}, [a, b](Tape& t, const Tensor& g) {
    const Tensor& A = t.value(a);
    const Tensor& B = t.value(b);
    const std::size_t n = A.rows(), d = A.cols(), k = B.cols();
    if (t.requires_grad(a)) {
      Tensor& ga = t.grad_accumulator(a);
      for (std::size_t i = 0; i < n; ++i) {
        auto grow = g.row(i);
        for (std::size_t m = 0; m < d; ++m) {
          auto brow = B.row(m);
          double s = 0.0;
          for (std::size_t j = 0; j < k; ++j) s += grow[j] * brow[j];
          ga(i, m) += s;
        }
      }
    }
    if (t.requires_grad(b)) {
      Tensor& gb = t.grad_accumulator(b);
      for (std::size_t i = 0; i < n; ++i) {
        auto grow = g.row(i);
        for (std::size_t m = 0; m < d; ++m) {
          const double x = A(i, m);
          if (x == 0.0) continue;
          auto gbrow = gb.row(m);
          for (std::size_t j = 0; j < k; ++j) gbrow[j] += x * grow[j];
        }
      }
    }
  });
}

/// x[n×k] + b[1×k] broadcast over rows.
inline Var add_bias(Tape& tape, Var x, Var b) {
  const Tensor& X = tape.value(x);
  const Tensor& B = tape.value(b);
  if (B.rows() != 1 || B.cols() != X.cols()) {
    throw DimensionError("add_bias: input " + X.shape() + " with bias " + B.shape());
  }
  Tensor out = X;
  for (std::size_t i = 0; i < out.rows(); ++i) {
    auto r = out.row(i);
    for (std::size_t j = 0; j < r.size(); ++j) r[j] += B(0, j);
  }
  return tape.record(std::move(out), {x, b}, [x, b](Tape& t, const Tensor& g) {
    if (t.requires_grad(x)) t.grad_accumulator(x) += g;
    if (t.requires_grad(b)) {
      Tensor& gb = t.grad_accumulator(b);
      for (std::size_t i = 0; i < g.rows(); ++i) {
        for (std::size_t j = 0; j < g.cols(); ++j) gb(0, j) += g(i, j);
      }
    }
  });
}

inline Var activate(Tape& tape, Var x, Activation act) {
  if (act == Activation::identity) return x;
  Tensor out = tape.value(x);
  for (double& v : out.data()) v = apply(act, v);
  const Var y{tape.size()};
  return tape.record(std::move(out), {x}, [x, y, act](Tape& t, const Tensor& g) {
    const Tensor& Y = t.value(y);
    Tensor& gx = t.grad_accumulator(x);
    for (std::size_t i = 0; i < g.size(); ++i) {
      const double yi = Y.data()[i];
      const double d = act == Activation::tanh ? 1.0 - yi * yi : (yi > 0.0 ? 1.0 : 0.0);
      gx.data()[i] += g.data()[i] * d;
    }
  });
}

/// act(x·W + b).
inline Var dense_forward(Tape& tape, Var x, Var w, Var b, Activation act) {
  const Tensor& X = tape.value(x);
  const Tensor& W = tape.value(w);
  const Tensor& B = tape.value(b);
  if (X.cols() != W.rows() || B.rows() != 1 || B.cols() != W.cols()) {
    throw DimensionError("dense_forward: input " + X.shape() + ", weight " + W.shape() +
                         ", bias " + B.shape());
  }
  return activate(tape, add_bias(tape, matmul(tape, x, w), b), act);
}

/// Row-wise mean over each segment; empty segments yield zero rows.
inline Var segment_mean(Tape& tape, Var x, const Offsets& offsets) {
  const Tensor& X = tape.value(x);
  check_offsets(offsets, X.rows());
  const std::size_t segments = offsets.size() - 1;
  Tensor out(segments, X.cols());
  for (std::size_t s = 0; s < segments; ++s) {
    const std::size_t lo = offsets[s], hi = offsets[s + 1];
    if (lo == hi) continue;
    auto orow = out.row(s);
    for (std::size_t i = lo; i < hi; ++i) {
      auto xrow = X.row(i);
      for (std::size_t j = 0; j < orow.size(); ++j) orow[j] += xrow[j];
    }
    const double inv = 1.0 / static_cast<double>(hi - lo);
    for (double& v : orow) v *= inv;
  }
  return tape.record(std::move(out), {x}, [x, offsets](Tape& t, const Tensor& g) {
    Tensor& gx = t.grad_accumulator(x);
    for (std::size_t s = 0; s + 1 < offsets.size(); ++s) {
      const std::size_t lo = offsets[s], hi = offsets[s + 1];
      if (lo == hi) continue;
      const double inv = 1.0 / static_cast<double>(hi - lo);
      auto grow = g.row(s);
      for (std::size_t i = lo; i < hi; ++i) {
        auto r = gx.row(i);
        for (std::size_t j = 0; j < r.size(); ++j) r[j] += grow[j] * inv;
      }
    }
  });
}

/// Element-wise max over each segment; empty segments yield zero rows.
/// The gradient flows to the first row attaining the max.
inline Var segment_max(Tape& tape, Var x, const Offsets& offsets) {
  const Tensor& X = tape.value(x);
  check_offsets(offsets, X.rows());
  const std::size_t segments = offsets.size() - 1, k = X.cols();
  Tensor out(segments, k);
  std::vector<std::size_t> argmax(segments * k, Var::npos);
  for (std::size_t s = 0; s < segments; ++s) {
    const std::size_t lo = offsets[s], hi = offsets[s + 1];
    if (lo == hi) continue;
    for (std::size_t j = 0; j < k; ++j) {
      std::size_t best = lo;
      for (std::size_t i = lo + 1; i < hi; ++i) {
        if (X(i, j) > X(best, j)) best = i;
      }
      out(s, j) = X(best, j);
      argmax[s * k + j] = best;
    }
  }
  return tape.record(std::move(out), {x}, [x, k, argmax = std::move(argmax)](Tape& t, const Tensor& g) {
    Tensor& gx = t.grad_accumulator(x);
    for (std::size_t s = 0; s < g.rows(); ++s) {
      for (std::size_t j = 0; j < k; ++j) {
        const std::size_t src = argmax[s * k + j];
        if (src != Var::npos) gx(src, j) += g(s, j);
      }
    }
  });
}

/// First row of each segment. Not permutation invariant; exists only so the
/// verification harness can inject a known fault.
inline Var segment_first(Tape& tape, Var x, const Offsets& offsets) {
  const Tensor& X = tape.value(x);
  check_offsets(offsets, X.rows());
  Tensor out(offsets.size() - 1, X.cols());
  for (std::size_t s = 0; s + 1 < offsets.size(); ++s) {
    if (offsets[s] == offsets[s + 1]) continue;
    auto src = X.row(offsets[s]);
    std::copy(src.begin(), src.end(), out.row(s).begin());
  }
  return tape.record(std::move(out), {x}, [x, offsets](Tape& t, const Tensor& g) {
    Tensor& gx = t.grad_accumulator(x);
    for (std::size_t s = 0; s + 1 < offsets.size(); ++s) {
      if (offsets[s] == offsets[s + 1]) continue;
      auto dst = gx.row(offsets[s]);
      auto src = g.row(s);
      for (std::size_t j = 0; j < dst.size(); ++j) dst[j] += src[j];
    }
  });
}

/// Horizontal concatenation of tensors with equal row counts.
inline Var concat_cols(Tape& tape, const std::vector<Var>& parts) {
  if (parts.empty()) throw DimensionError("concat_cols: no inputs");
  const std::size_t n = tape.value(parts.front()).rows();
  std::size_t width = 0;
  for (Var p : parts) {
    const Tensor& P = tape.value(p);
    if (P.rows() != n) {
      throw DimensionError("concat_cols: " + tape.value(parts.front()).shape() + " vs " + P.shape());
    }
    width += P.cols();
  }
  Tensor out(n, width);
  std::size_t col = 0;
  for (Var p : parts) {
    const Tensor& P = tape.value(p);
    for (std::size_t i = 0; i < n; ++i) {
      for (std::size_t j = 0; j < P.cols(); ++j) out(i, col + j) = P(i, j);
    }
    col += P.cols();
  }
  return tape.record(std::move(out), parts, [parts](Tape& t, const Tensor& g) {
    std::size_t col = 0;
    for (Var p : parts) {
      const std::size_t w = t.value(p).cols();
      if (t.requires_grad(p)) {
        Tensor& gp = t.grad_accumulator(p);
        for (std::size_t i = 0; i < g.rows(); ++i) {
          for (std::size_t j = 0; j < w; ++j) gp(i, j) += g(i, col + j);
        }
      }
      col += w;
    }
  });
}

/// Multiplies row i of x by scale[i]; `scale` is a constant column.
inline Var scale_rows(Tape& tape, Var x, const std::vector<double>& scale) {
  const Tensor& X = tape.value(x);
  if (scale.size() != X.rows()) {
    throw DimensionError("scale_rows: input " + X.shape() + " with " + std::to_string(scale.size()) +
                         " scales");
  }
  Tensor out = X;
  for (std::size_t i = 0; i < out.rows(); ++i) {
    for (double& v : out.row(i)) v *= scale[i];
  }
  return tape.record(std::move(out), {x}, [x, scale](Tape& t, const Tensor& g) {
    Tensor& gx = t.grad_accumulator(x);
    for (std::size_t i = 0; i < g.rows(); ++i) {
      for (std::size_t j = 0; j < g.cols(); ++j) gx(i, j) += g(i, j) * scale[i];
    }
  });
}

/// Sum of all entries as a 1×1 tensor.
inline Var sum(Tape& tape, Var x) {
  double s = 0.0;
  for (double v : tape.value(x).data()) s += v;
  return tape.record(Tensor(1, 1, s), {x}, [x](Tape& t, const Tensor& g) {
    Tensor& gx = t.grad_accumulator(x);
    for (double& v : gx.data()) v += g(0, 0);
  });
}

/// Σ weights[i,j]·x[i,j] as a 1×1 tensor; `weights` is constant.
inline Var weighted_sum(Tape& tape, Var x, const Tensor& weights) {
  const Tensor& X = tape.value(x);
  X.require_same_shape(weights, "weighted_sum");
  double s = 0.0;
  for (std::size_t i = 0; i < X.size(); ++i) s += X.data()[i] * weights.data()[i];
  return tape.record(Tensor(1, 1, s), {x}, [x, weights](Tape& t, const Tensor& g) {
    Tensor& gx = t.grad_accumulator(x);
    for (std::size_t i = 0; i < gx.size(); ++i) gx.data()[i] += g(0, 0) * weights.data()[i];
  });
}

}  // namespace hmil::nn
