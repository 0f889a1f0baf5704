#include <gtest/gtest.h>

#include <cmath>
#include <vector>

#include "hmil/mmd.hpp"
#include "hmil/rng.hpp"

using namespace hmil;

namespace {

std::vector<InstanceBag> gaussian_bags(Rng& rng, double mean, std::size_t bags, std::size_t per_bag) {
  std::vector<InstanceBag> out(bags);
  for (auto& b : out) {
    for (std::size_t i = 0; i < per_bag; ++i) b.push_back({rng.normal(mean, 1.0)});
  }
  return out;
}

}  // namespace

TEST(RbfKernel, Values) {
  EXPECT_EQ(rbf_kernel({1.0, 2.0}, {1.0, 2.0}, 0.7), 1.0);
  EXPECT_DOUBLE_EQ(rbf_kernel({0.0}, {2.0}, 1.0), std::exp(-2.0));
  EXPECT_DOUBLE_EQ(rbf_kernel({0.0, 0.0}, {1.0, 1.0}, 2.0), std::exp(-2.0 / 8.0));
}

TEST(Mmd, IdenticalBagsGiveZero) {
  Rng rng(1);
  const auto a = gaussian_bags(rng, 0.0, 5, 20);
  EXPECT_LT(std::abs(mmd_baseline(a, a, 1.0)), 1e-12);
}

TEST(Mmd, SeparatedGaussians) {
  // Population value for N(0,1) vs N(5,1), bandwidth 1:
  // 2/sqrt(3) · (1 − exp(−25/6)).
  const double population = 2.0 / std::sqrt(3.0) * (1.0 - std::exp(-25.0 / 6.0));
  EXPECT_NEAR(population, 1.1367982302815225, 1e-15);
  Rng rng(2);
  const auto a = gaussian_bags(rng, 0.0, 10, 50);
  const auto b = gaussian_bags(rng, 5.0, 10, 50);
  const double v = mmd_baseline(a, b, 1.0);
  EXPECT_GT(v, 0.5);
  EXPECT_NEAR(v, population, 0.1);
}

TEST(Mmd, SameDistributionIsNearZero) {
  Rng rng(3);
  const auto a = gaussian_bags(rng, 0.0, 10, 50);
  const auto b = gaussian_bags(rng, 0.0, 10, 50);
  EXPECT_LT(std::abs(mmd_baseline(a, b, 1.0)), 0.02);
}

TEST(Mmd, Symmetric) {
  Rng rng(4);
  const auto a = gaussian_bags(rng, 0.0, 4, 25);
  const auto b = gaussian_bags(rng, 1.0, 4, 25);
  EXPECT_EQ(mmd_baseline(a, b, 1.5), mmd_baseline(b, a, 1.5));
  const auto c = gaussian_bags(rng, 1.0, 3, 17);
  EXPECT_NEAR(mmd_baseline(a, c, 1.5), mmd_baseline(c, a, 1.5), 1e-12);
}

TEST(Mmd, Errors) {
  Rng rng(5);
  const auto a = gaussian_bags(rng, 0.0, 2, 3);
  EXPECT_THROW(mmd_baseline(a, a, 0.0), ContractError);
  EXPECT_THROW(mmd_baseline(a, a, -1.0), ContractError);
  EXPECT_THROW(mmd_baseline(a, a, std::nan("")), ContractError);
  const std::vector<InstanceBag> one{{{1.0}}};
  EXPECT_THROW(mmd_baseline(a, one, 1.0), ContractError);
  const std::vector<InstanceBag> wide{{{1.0, 2.0}, {3.0, 4.0}}};
  EXPECT_THROW(mmd_baseline(a, wide, 1.0), DimensionError);
}
