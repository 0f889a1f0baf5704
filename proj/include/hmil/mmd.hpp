#pragma once

#include <cmath>
#include <cstddef>
#include <span>
#include <string>
#include <vector>

#include "hmil/error.hpp"

namespace hmil {

using Instance = std::vector<double>;
using InstanceBag = std::vector<Instance>;

inline double rbf_kernel(const Instance& x, const Instance& y, double bandwidth) {
  double d2 = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double d = x[i] - y[i];
    d2 += d * d;
  }
  return std::exp(-d2 / (2.0 * bandwidth * bandwidth));
}

namespace detail {

inline std::vector<const Instance*> pool(std::span<const InstanceBag> bags, std::size_t& dim) {
  std::vector<const Instance*> out;
  for (const auto& bag : bags) {
    for (const auto& x : bag) {
      if (dim == 0) dim = x.size();
      if (x.size() != dim || dim == 0) {
        throw DimensionError("mmd: instances of width " + std::to_string(x.size()) + " and " + std::to_string(dim));
      }
      out.push_back(&x);
    }
  }
  return out;
}

}  // namespace detail

/// Unbiased MMD² with an RBF kernel between the pooled instances of two bag
/// collections. Equal sizes use the U-statistic over pairs i≠j of
/// h = k(xi,xj) + k(yi,yj) − k(xi,yj) − k(xj,yi), so identical inputs give
/// exactly 0. Unequal sizes use the usual three-term unbiased estimator.
/// Cost is quadratic in the number of pooled instances.
inline double mmd_baseline(std::span<const InstanceBag> bags_a, std::span<const InstanceBag> bags_b,
                           double bandwidth) {
  if (!(bandwidth > 0.0) || !std::isfinite(bandwidth)) {
    throw ContractError("mmd_baseline: bandwidth must be positive, got " + std::to_string(bandwidth));
  }
  std::size_t dim = 0;
  const auto X = detail::pool(bags_a, dim);
  const auto Y = detail::pool(bags_b, dim);
  const std::size_t m = X.size(), n = Y.size();
  if (m < 2 || n < 2) throw ContractError("mmd_baseline: each side needs at least two instances");

  if (m == n) {
    double s = 0.0;
    for (std::size_t i = 0; i < m; ++i) {
      for (std::size_t j = 0; j < m; ++j) {
        if (i == j) continue;
        const double same = rbf_kernel(*X[i], *X[j], bandwidth) + rbf_kernel(*Y[i], *Y[j], bandwidth);
        const double cross = rbf_kernel(*X[i], *Y[j], bandwidth) + rbf_kernel(*X[j], *Y[i], bandwidth);
        s += same - cross;
      }
    }
    return s / (static_cast<double>(m) * static_cast<double>(m - 1));
  }

  auto within = [&](const std::vector<const Instance*>& Z) {
    double s = 0.0;
    for (std::size_t i = 0; i < Z.size(); ++i) {
      for (std::size_t j = i + 1; j < Z.size(); ++j) s += rbf_kernel(*Z[i], *Z[j], bandwidth);
    }
    return 2.0 * s / (static_cast<double>(Z.size()) * static_cast<double>(Z.size() - 1));
  };
  double cross = 0.0;
  for (const Instance* x : X) {
    for (const Instance* y : Y) cross += rbf_kernel(*x, *y, bandwidth);
  }
  return within(X) + within(Y) - 2.0 * cross / (static_cast<double>(m) * static_cast<double>(n));
}

}  // namespace hmil
