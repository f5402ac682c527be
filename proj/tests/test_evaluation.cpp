#include <gtest/gtest.h>

#include <numeric>

#include "test_util.hpp"

using namespace hp;

namespace {

std::int64_t brute_force_best(const ConfusionMatrix& cm) {
  std::vector<std::size_t> perm(cm.rows());
  std::iota(perm.begin(), perm.end(), 0);
  std::int64_t best = -1;
  do {
    std::int64_t s = 0;
    for (std::size_t r = 0; r < perm.size(); ++r) s += cm(r, perm[r]);
    best = std::max(best, s);
  } while (std::next_permutation(perm.begin(), perm.end()));
  return best;
}

}  // namespace

TEST(Hungarian, Diagonal) {
  const auto cm = ConfusionMatrix::from_rows({{5, 0, 0}, {0, 3, 0}, {0, 0, 2}});
  const auto m = hungarian_match(cm);
  EXPECT_EQ(m.cluster_to_class, (std::vector<std::size_t>{0, 1, 2}));
  EXPECT_EQ(m.matched, 10);
}

TEST(Hungarian, SwapExample) {
  const auto cm = ConfusionMatrix::from_rows({{2, 3}, {4, 1}});
  const auto m = hungarian_match(cm);
  EXPECT_EQ(m.matched, 7);
  EXPECT_EQ(m.cluster_to_class, (std::vector<std::size_t>{1, 0}));
  EXPECT_NEAR(matched_metrics(cm).accuracy, 0.7, 1e-15);
}

TEST(Hungarian, NotGreedy) {
  // Greedy on the largest entry (9) gives 9 + 1 = 10; optimum is 8 + 8 = 16.
  const auto cm = ConfusionMatrix::from_rows({{9, 8}, {8, 1}});
  EXPECT_EQ(hungarian_match(cm).matched, 16);
}

TEST(Hungarian, MatchesBruteForce) {
  RngStream rng(11, "hung");
  for (int trial = 0; trial < 30; ++trial) {
    const std::size_t n = 1 + rng.below(7);
    ConfusionMatrix cm(n);
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < n; ++j) cm(i, j) = std::int64_t(rng.below(20));
    const auto m = hungarian_match(cm);
    EXPECT_EQ(m.matched, brute_force_best(cm));
    auto sorted = m.cluster_to_class;
    std::sort(sorted.begin(), sorted.end());
    for (std::size_t i = 0; i < n; ++i) EXPECT_EQ(sorted[i], i);
  }
}

TEST(Hungarian, RejectsNonSquare) {
  EXPECT_THROW(hungarian_match(ConfusionMatrix(2, 3)), DimensionMismatch);
}

TEST(Metrics, WorkedExample) {
  const auto r = metrics(ConfusionMatrix::from_rows({{3, 1}, {1, 3}}));
  EXPECT_NEAR(r.accuracy, 0.75, 1e-15);
  EXPECT_NEAR(r.mean_iou, 0.6, 1e-15);
}

TEST(Metrics, AbsentClassExcludedFromMeanIoU) {
  // Class 2 has no ground truth; a stray prediction of it still costs accuracy.
  const auto r = metrics(ConfusionMatrix::from_rows({{4, 0, 0}, {0, 3, 0}, {0, 1, 0}}));
  EXPECT_TRUE(std::isnan(r.per_class_iou[2]));
  EXPECT_NEAR(r.per_class_iou[1], 0.75, 1e-15);
  EXPECT_NEAR(r.mean_iou, (1.0 + 0.75) / 2, 1e-15);
  EXPECT_NEAR(r.accuracy, 7.0 / 8, 1e-15);
}

TEST(Metrics, EmptyIsError) {
  EXPECT_THROW(metrics(ConfusionMatrix(2)), InputError);
}

TEST(Confusion, SkipsUnlabeled) {
  const auto cm = confusion_from({0, 1, 1, 0}, {0, -1, 1, 1}, 2);
  EXPECT_EQ(cm.total(), 3);
  EXPECT_EQ(cm(0, 1), 1);
  EXPECT_THROW(confusion_from({0}, {0, 1}, 2), DimensionMismatch);
}

TEST(ClusterProbe, OrthogonalDirections) {
  Matrix<float> x = Matrix<float>::zeros(30, 3);
  std::vector<std::int32_t> y(30);
  for (std::size_t i = 0; i < 30; ++i) {
    y[i] = std::int32_t(i % 3);
    x(i, i % 3) = 1.0f + float(i);  // varying norms: cosine ignores scale
  }
  const auto out = cluster_probe(x, {3, 100, 0.005}, RngStream(0, "c"));
  const auto r = matched_metrics(confusion_from(out.assignments, y, 3));
  EXPECT_EQ(r.accuracy, 1.0);
  for (std::size_t k = 0; k < 3; ++k) EXPECT_NEAR(norm(out.centroids.row(k)), 1.0, 1e-12);
}

TEST(ClusterProbe, SingleCluster) {
  const auto x = test::random_matrix_f(20, 4, 1);
  const auto out = cluster_probe(x, {1, 10, 0.005}, RngStream(0, "c"));
  for (auto a : out.assignments) EXPECT_EQ(a, 0u);
}

TEST(ClusterProbe, TooFewFeatures) {
  EXPECT_THROW(cluster_probe(test::random_matrix_f(2, 4, 1), {3, 10, 0.005}, RngStream(0, "c")), InputError);
}

TEST(ClusterProbe, AgreesWithSphericalLloydOracle) {
  // 2D blobs at four angles; the oracle runs Lloyd iterations with cosine
  // assignment and mean-direction updates from well-separated starts.
  const double angles[] = {0.3, 1.9, 3.4, 5.0};
  RngStream rng(2, "blobs");
  const std::size_t per = 60;
  auto x = Matrix<float>::zeros(4 * per, 2);
  for (std::size_t k = 0; k < 4; ++k)
    for (std::size_t i = 0; i < per; ++i) {
      const double r = 1.0 + 0.3 * rng.uniform(), a = angles[k] + 0.15 * rng.normal();
      x(k * per + i, 0) = float(r * std::cos(a));
      x(k * per + i, 1) = float(r * std::sin(a));
    }
  auto c = Matrix<double>::zeros(4, 2);
  for (std::size_t k = 0; k < 4; ++k) c(k, 0) = std::cos(angles[k] + 0.4), c(k, 1) = std::sin(angles[k] + 0.4);
  std::vector<std::size_t> oracle(4 * per);
  const auto xn = row_normalize(x.cast<double>());
  for (int it = 0; it < 50; ++it) {
    for (std::size_t i = 0; i < xn.rows(); ++i) {
      double best = -2;
      for (std::size_t k = 0; k < 4; ++k)
        if (double s = dot(xn.row(i), c.row(k)); s > best) best = s, oracle[i] = k;
    }
    auto sum = Matrix<double>::zeros(4, 2);
    for (std::size_t i = 0; i < xn.rows(); ++i)
      for (std::size_t d = 0; d < 2; ++d) sum(oracle[i], d) += xn(i, d);
    c = row_normalize(sum);
  }
  const auto out = cluster_probe(x, {4, 500, 0.005}, RngStream(0, "c"));
  std::vector<std::int32_t> oracle_labels(oracle.begin(), oracle.end());
  const auto r = matched_metrics(confusion_from(out.assignments, oracle_labels, 4));
  EXPECT_GE(r.accuracy, 0.99);
}

TEST(ClusterProbe, ScaleInvariant) {
  const auto x = test::random_matrix_f(50, 3, 4);
  auto y = x;
  for (std::size_t r = 0; r < y.rows(); ++r)
    for (auto& v : y.row(r)) v *= float(1 + r % 5);
  const auto a = cluster_probe(x, {3, 50, 0.005}, RngStream(0, "c"));
  const auto b = cluster_probe(y, {3, 50, 0.005}, RngStream(0, "c"));
  std::size_t same = 0;
  for (std::size_t i = 0; i < 50; ++i) same += a.assignments[i] == b.assignments[i];
  EXPECT_GE(same, 49u);
}

namespace {

struct Split {
  Matrix<float> xtr, xte;
  std::vector<std::int32_t> ytr, yte;
};

Split separable(std::uint64_t seed, std::size_t classes, std::size_t per) {
  RngStream rng(seed, "sep");
  const std::size_t d = 6;
  auto make = [&](Matrix<float>& x, std::vector<std::int32_t>& y) {
    x = Matrix<float>::zeros(classes * per, d);
    y.resize(classes * per);
    for (std::size_t i = 0; i < classes * per; ++i) {
      y[i] = std::int32_t(i % classes);
      for (std::size_t k = 0; k < d; ++k) x(i, k) = float(0.3 * rng.normal() + (k == i % classes ? 3.0 : 0.0));
    }
  };
  Split s;
  make(s.xtr, s.ytr);
  make(s.xte, s.yte);
  return s;
}

}  // namespace

TEST(LinearProbe, SeparableData) {
  const auto s = separable(0, 3, 100);
  const auto r = linear_probe(s.xtr, s.ytr, s.xte, s.yte, {3, 0.01, 30, 32}, RngStream(0, "l"));
  EXPECT_GE(r.accuracy, 0.99);
  for (std::size_t e = 1; e < r.loss_history.size(); ++e) EXPECT_LE(r.loss_history[e], r.loss_history[e - 1] + 1e-9);
}

TEST(LinearProbe, ShuffledLabelsAreChance) {
  double mean = 0;
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    auto s = separable(seed, 4, 200);
    RngStream(seed, "shuffle").shuffle(s.ytr);
    RngStream(seed, "shuffle-test").shuffle(s.yte);
    mean += linear_probe(s.xtr, s.ytr, s.xte, s.yte, {4, 0.001, 20, 64}, RngStream(seed, "l")).accuracy;
  }
  mean /= 5;
  EXPECT_NEAR(mean, 0.25, 0.05);
}

TEST(LinearProbe, LabelOutOfRange) {
  auto s = separable(0, 3, 10);
  s.ytr[0] = 3;
  EXPECT_THROW(linear_probe(s.xtr, s.ytr, s.xte, s.yte, {3}, RngStream(0, "l")), InputError);
}
