#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <limits>
#include <vector>

#include "text2vis/random.hpp"
#include "text2vis/retrieval.hpp"

namespace text2vis {
namespace {

std::vector<float> l2f(const std::vector<float>& v) { return l2_normalize<float>(v); }

TEST(L2Normalize, UnitLengthAndErrors) {
  EXPECT_EQ(l2f({3.0f, 4.0f}), (std::vector<float>{0.6f, 0.8f}));
  EXPECT_THROW(l2f({0.0f, 0.0f}), Error);
  EXPECT_THROW(l2f({std::numeric_limits<float>::infinity(), 1.0f}), Error);
}

TEST(EuclideanDistance, HandValue) {
  const std::vector<double> a{0, 0}, b{3, 4};
  EXPECT_EQ((euclidean_distance<double, double>(a, b)), 5.0);
}

VisualIndex three_point_index() {
  const std::vector<std::vector<float>> rows{{1, 0}, {0, 1}, {1, 1}};
  return VisualIndex({10, 20, 30}, rows);
}

TEST(VisualIndex, RanksByDistanceOfNormalizedVectors) {
  const auto idx = three_point_index();
  const std::vector<float> q{2, 0};
  const auto r = idx.query<float>(q, 3);
  EXPECT_EQ(r.ids(), (std::vector<ImageId>{10, 30, 20}));
  EXPECT_NEAR(r.entries[0].distance, 0.0, 1e-7);
  EXPECT_NEAR(r.entries[2].distance, std::sqrt(2.0), 1e-7);
}

TEST(VisualIndex, ExcludeIdAndTruncation) {
  const auto idx = three_point_index();
  const std::vector<float> q{1, 0};
  const auto r = idx.query<float>(q, 5, ImageId{10});
  EXPECT_EQ(r.ids(), (std::vector<ImageId>{30, 20}));
  EXPECT_EQ(r.query_id, ImageId{10});
  EXPECT_EQ(idx.query<float>(q, 1).ids(), (std::vector<ImageId>{10}));
}

TEST(VisualIndex, TiesBrokenByAscendingId) {
  const std::vector<std::vector<float>> rows{{0, 1}, {1, 0}, {0, 2}, {2, 0}};
  const VisualIndex idx({9, 4, 1, 7}, rows);
  const std::vector<float> q{1, 1};
  EXPECT_EQ(idx.query<float>(q, 4).ids(), (std::vector<ImageId>{1, 4, 7, 9}));
}

TEST(VisualIndex, ConstructionAndQueryErrors) {
  const std::vector<std::vector<float>> rows{{1, 0}, {0, 1}};
  EXPECT_THROW(VisualIndex({1}, rows), Error);
  EXPECT_THROW(VisualIndex({1, 1}, rows), Error);
  const std::vector<std::vector<float>> zero{{1, 0}, {0, 0}};
  EXPECT_THROW(VisualIndex({1, 2}, zero), Error);
  EXPECT_THROW(VisualIndex({}, std::vector<std::vector<float>>{}), Error);

  const VisualIndex idx({1, 2}, rows);
  EXPECT_THROW(idx.query<float>(std::vector<float>{1, 0, 0}, 1), Error);
  EXPECT_THROW(idx.query<float>(std::vector<float>{1, 0}, 0), Error);
  EXPECT_THROW(idx.query<float>(std::vector<float>{0, 0}, 1), Error);
}

TEST(VisualIndex, MatchesBruteForceSort) {
  Rng rng(12);
  constexpr std::size_t n = 300, d = 16;
  std::vector<std::vector<float>> rows(n, std::vector<float>(d));
  std::vector<ImageId> ids(n);
  for (std::size_t i = 0; i < n; ++i) {
    ids[i] = 1000 - i;
    for (auto& x : rows[i]) x = static_cast<float>(std::max(0.0, rng.normal()));
    rows[i][i % d] += 0.1f;  // never all zero
  }
  const VisualIndex idx(ids, rows);
  for (int qi = 0; qi < 20; ++qi) {
    std::vector<double> q(d);
    for (auto& x : q) x = rng.normal();
    const auto k = 1 + rng.index(n);
    const auto got = idx.query<double>(q, k).ids();

    double qn = 0;
    for (double x : q) qn += x * x;
    qn = std::sqrt(qn);
    std::vector<std::pair<double, ImageId>> brute;
    for (std::size_t i = 0; i < n; ++i) {
      double rn = 0;
      for (float x : rows[i]) rn += double(x) * x;
      rn = std::sqrt(rn);
      double s = 0;
      for (std::size_t j = 0; j < d; ++j) {
        const double diff = q[j] / qn - static_cast<float>(rows[i][j] / rn);
        s += diff * diff;
      }
      brute.push_back({std::sqrt(s), ids[i]});
    }
    std::sort(brute.begin(), brute.end());
    std::vector<ImageId> want;
    for (std::size_t i = 0; i < k; ++i) want.push_back(brute[i].second);
    EXPECT_EQ(got, want);
  }
}

}  // namespace
}  // namespace text2vis
