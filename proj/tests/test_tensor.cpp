#include <gtest/gtest.h>

#include "test_util.hpp"

using namespace hp;

TEST(Cosine, WorkedExamples) {
  std::vector<double> a{1, 0}, b{0, 1}, c{3, 4}, d{4, 3};
  EXPECT_DOUBLE_EQ(cosine_sim(a, a), 1.0);
  EXPECT_DOUBLE_EQ(cosine_sim(a, b), 0.0);
  EXPECT_NEAR(cosine_sim(c, d), 0.96, 1e-12);
  std::vector<double> neg{-3, -4};
  EXPECT_DOUBLE_EQ(cosine_sim(c, neg), -1.0);
}

TEST(Cosine, ZeroVectorIsDegenerate) {
  std::vector<double> z{0, 0}, a{1, 2};
  EXPECT_THROW(cosine_sim(z, a), DegenerateInput);
}

TEST(Cosine, DimensionMismatch) {
  std::vector<double> a{1, 2}, b{1, 2, 3};
  EXPECT_THROW(cosine_sim(a, b), DimensionMismatch);
}

TEST(Cosine, ScaleInvariantAndBounded) {
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    auto m = test::random_matrix(2, 7, seed);
    std::vector<double> a(m.row(0).begin(), m.row(0).end()), b(m.row(1).begin(), m.row(1).end());
    const double s = cosine_sim(a, b);
    EXPECT_LE(std::abs(s), 1.0);
    for (auto& v : a) v *= 3.7;
    EXPECT_NEAR(cosine_sim(a, b), s, 1e-12);
  }
}

TEST(RowNormalize, UnitRows) {
  auto m = test::random_matrix(10, 5, 3);
  auto n = row_normalize(m);
  for (std::size_t r = 0; r < n.rows(); ++r) EXPECT_NEAR(norm(n.row(r)), 1.0, 1e-12);
}

TEST(RowNormalize, ZeroRowNamesIndex) {
  auto m = Matrix<double>::zeros(3, 2);
  m(0, 0) = 1;
  m(2, 1) = 1;
  try {
    row_normalize(m);
    FAIL();
  } catch (const DegenerateInput& e) {
    EXPECT_NE(std::string(e.what()).find("index 1"), std::string::npos);
  }
}

TEST(PairwiseCosine, MatchesLoopOracle) {
  auto a = test::random_matrix(6, 4, 1), b = test::random_matrix(5, 4, 2);
  auto s = pairwise_cosine(a, b);
  for (std::size_t i = 0; i < 6; ++i)
    for (std::size_t j = 0; j < 5; ++j) {
      double ab = 0, aa = 0, bb = 0;
      for (std::size_t k = 0; k < 4; ++k) {
        ab += a(i, k) * b(j, k);
        aa += a(i, k) * a(i, k);
        bb += b(j, k) * b(j, k);
      }
      EXPECT_NEAR(s(i, j), ab / std::sqrt(aa * bb), 1e-12);
    }
}

TEST(Matrix, RejectsNonFinite) {
  EXPECT_THROW(Matrix<float>(1, 2, {1.0f, std::nanf("")}), NonFiniteValue);
  EXPECT_THROW(Matrix<float>(1, 2, {1.0f}), DimensionMismatch);
}

TEST(Matmul, VariantsAgree) {
  auto a = test::random_matrix(3, 4, 5), b = test::random_matrix(4, 2, 6);
  auto c = matmul(a, b);
  Matrix<double> bt = Matrix<double>::zeros(2, 4), at = Matrix<double>::zeros(4, 3);
  for (std::size_t i = 0; i < 4; ++i) {
    for (std::size_t j = 0; j < 2; ++j) bt(j, i) = b(i, j);
    for (std::size_t j = 0; j < 3; ++j) at(i, j) = a(j, i);
  }
  auto c2 = matmul_nt(a, bt), c3 = matmul_tn(at, b);
  for (std::size_t i = 0; i < c.size(); ++i) {
    EXPECT_NEAR(c.flat()[i], c2.flat()[i], 1e-12);
    EXPECT_NEAR(c.flat()[i], c3.flat()[i], 1e-12);
  }
  EXPECT_THROW(matmul(a, a), DimensionMismatch);
}

TEST(Softmax, StableForLargeInputs) {
  std::vector<double> v{1000, 1000, 999};
  softmax_inplace(std::span<double>(v));
  EXPECT_NEAR(v[0] + v[1] + v[2], 1.0, 1e-12);
  EXPECT_NEAR(v[0], v[1], 1e-15);
  std::vector<double> w{1000, 1000};
  EXPECT_NEAR(log_sum_exp(std::span<const double>(w)), 1000 + std::log(2.0), 1e-12);
}

TEST(Rng, DeterministicAndStreamSeparated) {
  RngStream a(7, "x"), b(7, "x"), c(7, "y");
  const auto va = a.next_u64();
  EXPECT_EQ(va, b.next_u64());
  EXPECT_NE(va, c.next_u64());
  EXPECT_NE(RngStream(7, "x").child({1}).next_u64(), RngStream(7, "x").child({2}).next_u64());
}

TEST(Rng, SampleWithoutReplacementDistinct) {
  RngStream r(1, "s");
  auto s = r.sample_without_replacement(50, 20);
  std::sort(s.begin(), s.end());
  EXPECT_EQ(std::adjacent_find(s.begin(), s.end()), s.end());
  EXPECT_LT(s.back(), 50u);
  EXPECT_EQ(s.size(), 20u);
}
