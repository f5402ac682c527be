#include <gtest/gtest.h>

#include "test_util.hpp"

using namespace hp;

namespace {

HeadParameters<double> random_params(std::size_t c, std::size_t kh, std::size_t k, std::uint64_t seed) {
  return init_head_parameters<double>(c, kh, k, RngStream(seed, "p"));
}

}  // namespace

TEST(SegHead, ZeroWeightsGiveBias) {
  auto p = SegHeadParams<double>::zeros(3, 4, 2);
  p.b2 = {0.5, -1.0};
  const auto out = seg_forward(test::random_matrix(5, 3, 0), p);
  for (std::size_t r = 0; r < 5; ++r) {
    EXPECT_EQ(out.s(r, 0), 0.5);
    EXPECT_EQ(out.s(r, 1), -1.0);
  }
}

TEST(SegHead, ReluPassesPositiveIdentity) {
  auto p = SegHeadParams<double>::zeros(2, 2, 2);
  p.w1 = Matrix<double>::identity(2);
  p.w2 = Matrix<double>::identity(2);
  Matrix<double> f(2, 2, {1, 2, -1, 3});
  const auto s = seg_forward(f, p).s;
  EXPECT_EQ(s, Matrix<double>(2, 2, {1, 2, 0, 3}));
}

TEST(SegHead, DimensionMismatch) {
  auto p = SegHeadParams<double>::zeros(3, 4, 2);
  EXPECT_THROW(seg_forward(test::random_matrix(2, 4, 0), p), DimensionMismatch);
}

TEST(ProjHead, OutputsUnitRows) {
  const auto p = random_params(4, 5, 3, 1);
  const auto z = proj_forward(test::random_matrix(7, 3, 2), p).z;
  for (std::size_t r = 0; r < 7; ++r) EXPECT_NEAR(norm(z.row(r)), 1.0, 1e-12);
}

TEST(ProjHead, WorkedExample) {
  auto p = HeadParameters<double>::zeros(1, 1, 2);
  p.proj_w = Matrix<double>::identity(2);
  const auto z = proj_forward(Matrix<double>(1, 2, {3, 4}), p).z;
  EXPECT_NEAR(z(0, 0), 0.6, 1e-15);
  EXPECT_NEAR(z(0, 1), 0.8, 1e-15);
  EXPECT_THROW(proj_forward(Matrix<double>(1, 2, {0, 0}), p), DegenerateInput);
}

TEST(Heads, BackwardMatchesFiniteDifferences) {
  auto p = random_params(4, 5, 3, 3);
  const auto f = test::random_matrix(6, 4, 4);
  const auto w = test::random_matrix(6, 3, 5);  // loss = sum w . z
  auto loss = [&] {
    const auto seg = seg_forward(f, p.seg);
    const auto z = proj_forward(seg.s, p).z;
    double v = 0;
    for (std::size_t i = 0; i < z.size(); ++i) v += w.flat()[i] * z.flat()[i];
    return v;
  };
  const auto seg = seg_forward(f, p.seg);
  const auto proj = proj_forward(seg.s, p);
  auto grad = HeadParameters<double>::zeros(4, 5, 3);
  const auto ds = proj_backward(seg.s, p, proj.cache, proj.z, w, grad);
  seg_backward(f, p.seg, seg.cache, ds, grad.seg);
  auto pb = param_blocks(p);
  const auto gb = param_blocks(grad);
  for (std::size_t b = 0; b < kNumParamBlocks; ++b)
    for (std::size_t i = 0; i < pb[b].size(); ++i)
      EXPECT_NEAR(gb[b][i], test::central_diff(pb[b], i, loss), 1e-7) << kParamBlockNames[b] << "[" << i << "]";
}

TEST(Momentum, ClosedFormAfterKSteps) {
  auto target = random_params(3, 4, 2, 1).seg;
  const auto source = random_params(3, 4, 2, 2).seg;
  const double m = 0.99;
  auto head = MomentumHead<double>::copy_of(target, m);
  const int k = 37;
  for (int i = 0; i < k; ++i) momentum_update(source, head);
  const double mk = std::pow(m, k);
  for (std::size_t i = 0; i < target.w1.size(); ++i)
    EXPECT_NEAR(head.params.w1.flat()[i], mk * target.w1.flat()[i] + (1 - mk) * source.w1.flat()[i], 1e-10);
  for (std::size_t i = 0; i < target.b2.size(); ++i)
    EXPECT_NEAR(head.params.b2[i], mk * target.b2[i] + (1 - mk) * source.b2[i], 1e-10);
}

TEST(Momentum, RejectsBadCoefficient) {
  const auto seg = random_params(2, 2, 2, 0).seg;
  EXPECT_THROW(MomentumHead<double>::copy_of(seg, 1.0), InputError);
  EXPECT_THROW(MomentumHead<double>::copy_of(seg, 0.0), InputError);
}

TEST(AdamW, ScalarReferenceTrace) {
  // Hand-rolled reference for a single decayed weight.
  AdamWConfig cfg;
  double p = 0.7, m = 0, v = 0;
  double rp = 0.7, rm = 0, rv = 0;
  const double grads[] = {0.3, -0.1, 0.25, 0.0, 1.5};
  for (int t = 1; t <= 5; ++t) {
    const double g = grads[t - 1];
    adamw_update(std::span<double>(&p, 1), std::span<const double>(&g, 1), std::span<double>(&m, 1),
                 std::span<double>(&v, 1), t, cfg, true);
    rp -= 5e-4 * 0.1 * rp;
    rm = 0.9 * rm + 0.1 * g;
    rv = 0.999 * rv + 0.001 * g * g;
    const double mhat = rm / (1 - std::pow(0.9, t)), vhat = rv / (1 - std::pow(0.999, t));
    rp -= 5e-4 * mhat / (std::sqrt(vhat) + 1e-8);
    EXPECT_NEAR(p, rp, 1e-10) << "step " << t;
  }
}

TEST(AdamW, ZeroGradientOnlyDecays) {
  auto p = random_params(2, 3, 2, 4);
  const auto before = p;
  auto st = OptimizerState<double>::for_params(p, {});
  adamw_step(p, HeadParameters<double>::zeros(2, 3, 2), st);
  const double shrink = 1 - 5e-4 * 0.1;
  auto pb = param_blocks(p);
  const auto bb = param_blocks(before);
  for (std::size_t b = 0; b < kNumParamBlocks; ++b)
    for (std::size_t i = 0; i < pb[b].size(); ++i)
      EXPECT_NEAR(pb[b][i], kParamBlockDecays[b] ? bb[b][i] * shrink : bb[b][i], 1e-15);
}

TEST(AdamW, NonFiniteGradientNamesBlock) {
  auto p = random_params(2, 3, 2, 4);
  auto g = HeadParameters<double>::zeros(2, 3, 2);
  g.proj_b[1] = std::numeric_limits<double>::quiet_NaN();
  auto st = OptimizerState<double>::for_params(p, {});
  try {
    adamw_step(p, g, st);
    FAIL();
  } catch (const NonFiniteValue& e) {
    EXPECT_NE(std::string(e.what()).find("proj_b"), std::string::npos);
  }
}

TEST(Init, DeterministicAndBounded) {
  const auto a = init_head_parameters<float>(6, 5, 4, RngStream(1, "init"));
  EXPECT_EQ(a, init_head_parameters<float>(6, 5, 4, RngStream(1, "init")));
  for (float v : a.seg.w1.flat()) EXPECT_LE(std::abs(v), std::sqrt(1.0 / 6) + 1e-6);
}
