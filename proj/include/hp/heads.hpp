#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "hp/errors.hpp"
#include "hp/rng.hpp"
#include "hp/tensor.hpp"

namespace hp {

// ---------------------------------------------------------------------------
// Parameters

/// Segmentation head S: s = W2 relu(W1 f + b1) + b2, C -> K_h -> K.
template <typename T>
struct SegHeadParams {
  Matrix<T> w1;  // K_h x C
  std::vector<T> b1;
  Matrix<T> w2;  // K x K_h
  std::vector<T> b2;

  std::size_t in_dim() const { return w1.cols(); }
  std::size_t hidden_dim() const { return w1.rows(); }
  std::size_t out_dim() const { return w2.rows(); }

  static SegHeadParams zeros(std::size_t c, std::size_t kh, std::size_t k) {
    return {Matrix<T>::zeros(kh, c), std::vector<T>(kh, T(0)), Matrix<T>::zeros(k, kh),
            std::vector<T>(k, T(0))};
  }

  template <typename U>
  SegHeadParams<U> cast() const {
    return {w1.template cast<U>(), std::vector<U>(b1.begin(), b1.end()), w2.template cast<U>(),
            std::vector<U>(b2.begin(), b2.end())};
  }

  bool operator==(const SegHeadParams&) const = default;
};

/// Trainable stack: segmentation head plus projection head Z (K -> K, then
/// L2 row normalization).
template <typename T>
struct HeadParameters {
  SegHeadParams<T> seg;
  Matrix<T> proj_w;  // K x K
  std::vector<T> proj_b;

  static HeadParameters zeros(std::size_t c, std::size_t kh, std::size_t k) {
    return {SegHeadParams<T>::zeros(c, kh, k), Matrix<T>::zeros(k, k), std::vector<T>(k, T(0))};
  }

  template <typename U>
  HeadParameters<U> cast() const {
    return {seg.template cast<U>(), proj_w.template cast<U>(),
            std::vector<U>(proj_b.begin(), proj_b.end())};
  }

  bool operator==(const HeadParameters&) const = default;
};

inline constexpr std::size_t kNumParamBlocks = 6;
inline constexpr std::array<std::string_view, kNumParamBlocks> kParamBlockNames = {
    "seg_w1", "seg_b1", "seg_w2", "seg_b2", "proj_w", "proj_b"};
// Weight decay applies to weight matrices only.
inline constexpr std::array<bool, kNumParamBlocks> kParamBlockDecays = {true,  false, true,
                                                                        false, true,  false};

template <typename T>
std::array<std::span<T>, kNumParamBlocks> param_blocks(HeadParameters<T>& p) {
  return {p.seg.w1.flat(), std::span<T>(p.seg.b1), p.seg.w2.flat(), std::span<T>(p.seg.b2),
          p.proj_w.flat(), std::span<T>(p.proj_b)};
}

template <typename T>
std::array<std::span<const T>, kNumParamBlocks> param_blocks(const HeadParameters<T>& p) {
  return {p.seg.w1.flat(), std::span<const T>(p.seg.b1), p.seg.w2.flat(),
          std::span<const T>(p.seg.b2), p.proj_w.flat(), std::span<const T>(p.proj_b)};
}

template <typename T>
HeadParameters<T> init_head_parameters(std::size_t c, std::size_t kh, std::size_t k,
                                       RngStream rng) {
  auto p = HeadParameters<T>::zeros(c, kh, k);
  auto fill = [&](std::span<T> block, std::size_t fan_in) {
    const double bound = std::sqrt(1.0 / double(fan_in));
    for (auto& v : block) v = static_cast<T>(rng.uniform(-bound, bound));
  };
  fill(p.seg.w1.flat(), c);
  fill(p.seg.b1, c);
  fill(p.seg.w2.flat(), kh);
  fill(p.seg.b2, kh);
  fill(p.proj_w.flat(), k);
  fill(p.proj_b, k);
  return p;
}

// ---------------------------------------------------------------------------
// Segmentation head

template <typename T>
struct SegCache {
  Matrix<T> pre;     // W1 f + b1
  Matrix<T> hidden;  // relu(pre)
};

template <typename T>
struct SegOutput {
  Matrix<T> s;
  SegCache<T> cache;
};

template <typename T>
SegOutput<T> seg_forward(const Matrix<T>& f, const SegHeadParams<T>& p) {
  if (f.cols() != p.in_dim())
    throw DimensionMismatch("seg_forward: feature dim " + std::to_string(f.cols()) +
                            " != head input dim " + std::to_string(p.in_dim()));
  SegOutput<T> out;
  out.cache.pre = matmul_nt(f, p.w1);
  add_row_bias(out.cache.pre, std::span<const T>(p.b1));
  out.cache.hidden = out.cache.pre;
  for (auto& v : out.cache.hidden.flat()) v = v > T(0) ? v : T(0);
  out.s = matmul_nt(out.cache.hidden, p.w2);
  add_row_bias(out.s, std::span<const T>(p.b2));
  return out;
}

/// Accumulates parameter gradients of the segmentation head given dL/ds.
template <typename T>
void seg_backward(const Matrix<T>& f, const SegHeadParams<T>& p, const SegCache<T>& cache,
                  const Matrix<T>& ds, SegHeadParams<T>& grad) {
  if (ds.rows() != f.rows() || ds.cols() != p.out_dim())
    throw DimensionMismatch("seg_backward: gradient shape mismatch");
  const auto gw2 = matmul_tn(ds, cache.hidden);
  for (std::size_t i = 0; i < gw2.size(); ++i) grad.w2.flat()[i] += gw2.flat()[i];
  const auto gb2 = column_sums(ds);
  for (std::size_t i = 0; i < gb2.size(); ++i) grad.b2[i] += gb2[i];
  auto dpre = matmul(ds, p.w2);
  for (std::size_t i = 0; i < dpre.size(); ++i)
    if (!(cache.pre.flat()[i] > T(0))) dpre.flat()[i] = T(0);
  const auto gw1 = matmul_tn(dpre, f);
  for (std::size_t i = 0; i < gw1.size(); ++i) grad.w1.flat()[i] += gw1.flat()[i];
  const auto gb1 = column_sums(dpre);
  for (std::size_t i = 0; i < gb1.size(); ++i) grad.b1[i] += gb1[i];
}

// ---------------------------------------------------------------------------
// Projection head

template <typename T>
struct ProjCache {
  Matrix<T> pre;            // W s + b
  std::vector<T> inv_norm;  // 1 / ||pre_row||
};

template <typename T>
struct ProjOutput {
  Matrix<T> z;  // unit rows
  ProjCache<T> cache;
};

template <typename T>
ProjOutput<T> proj_forward(const Matrix<T>& s, const HeadParameters<T>& p) {
  if (s.cols() != p.proj_w.cols())
    throw DimensionMismatch("proj_forward: input dim " + std::to_string(s.cols()) +
                            " != projection dim " + std::to_string(p.proj_w.cols()));
  ProjOutput<T> out;
  out.cache.pre = matmul_nt(s, p.proj_w);
  add_row_bias(out.cache.pre, std::span<const T>(p.proj_b));
  out.z = out.cache.pre;
  out.cache.inv_norm.resize(s.rows());
  for (std::size_t r = 0; r < s.rows(); ++r) {
    const T n = norm(out.cache.pre.row(r));
    if (!(n > T(0)))
      throw DegenerateInput("proj_forward: zero pre-normalization row at index " +
                            std::to_string(r));
    out.cache.inv_norm[r] = T(1) / n;
    for (auto& v : out.z.row(r)) v *= out.cache.inv_norm[r];
  }
  return out;
}

/// Accumulates projection-head parameter gradients and returns dL/ds.
/// Through the normalization: du = (dz - z (z . dz)) / ||u||.
template <typename T>
Matrix<T> proj_backward(const Matrix<T>& s, const HeadParameters<T>& p, const ProjCache<T>& cache,
                        const Matrix<T>& z, const Matrix<T>& dz, HeadParameters<T>& grad) {
  if (dz.rows() != z.rows() || dz.cols() != z.cols())
    throw DimensionMismatch("proj_backward: gradient shape mismatch");
  auto du = Matrix<T>::zeros(z.rows(), z.cols());
  for (std::size_t r = 0; r < z.rows(); ++r) {
    auto zr = z.row(r);
    auto gr = dz.row(r);
    const T radial = dot(zr, gr);
    auto dur = du.row(r);
    for (std::size_t k = 0; k < zr.size(); ++k) dur[k] = (gr[k] - zr[k] * radial) * cache.inv_norm[r];
  }
  const auto gw = matmul_tn(du, s);
  for (std::size_t i = 0; i < gw.size(); ++i) grad.proj_w.flat()[i] += gw.flat()[i];
  const auto gb = column_sums(du);
  for (std::size_t i = 0; i < gb.size(); ++i) grad.proj_b[i] += gb[i];
  return matmul(du, p.proj_w);
}

// ---------------------------------------------------------------------------
// Momentum head

/// EMA copy of the segmentation head. Never receives gradients.
template <typename T>
struct MomentumHead {
  SegHeadParams<T> params;
  T momentum = T(0.99);

  static MomentumHead copy_of(const SegHeadParams<T>& source, T m) {
    if (!(m > T(0) && m < T(1))) throw InputError("momentum coefficient must lie in (0, 1)");
    return {source, m};
  }

  Matrix<T> forward(const Matrix<T>& f) const { return seg_forward(f, params).s; }
};

/// theta' <- m theta' + (1 - m) theta, elementwise.
template <typename T>
void momentum_update(const SegHeadParams<T>& source, MomentumHead<T>& target) {
  auto update = [m = target.momentum](std::span<const T> src, std::span<T> dst) {
    if (src.size() != dst.size()) throw DimensionMismatch("momentum_update: shape mismatch");
    for (std::size_t i = 0; i < src.size(); ++i) dst[i] = m * dst[i] + (T(1) - m) * src[i];
  };
  update(source.w1.flat(), target.params.w1.flat());
  update(source.b1, target.params.b1);
  update(source.w2.flat(), target.params.w2.flat());
  update(source.b2, target.params.b2);
}

// ---------------------------------------------------------------------------
// AdamW

struct AdamWConfig {
  double lr = 5e-4;
  double weight_decay = 0.1;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

/// One decoupled-weight-decay Adam step on a flat block. `step` is the
/// 1-based step count used for bias correction.
template <typename T>
void adamw_update(std::span<T> param, std::span<const T> grad, std::span<T> m, std::span<T> v,
                  std::uint64_t step, const AdamWConfig& cfg, bool decay) {
  const T lr = static_cast<T>(cfg.lr);
  const T b1 = static_cast<T>(cfg.beta1), b2 = static_cast<T>(cfg.beta2);
  const T eps = static_cast<T>(cfg.eps);
  const T bc1 = T(1) - static_cast<T>(std::pow(cfg.beta1, double(step)));
  const T bc2 = T(1) - static_cast<T>(std::pow(cfg.beta2, double(step)));
  const T shrink = decay ? T(1) - lr * static_cast<T>(cfg.weight_decay) : T(1);
  for (std::size_t i = 0; i < param.size(); ++i) {
    param[i] *= shrink;
    m[i] = b1 * m[i] + (T(1) - b1) * grad[i];
    v[i] = b2 * v[i] + (T(1) - b2) * grad[i] * grad[i];
    const T mhat = m[i] / bc1;
    const T vhat = v[i] / bc2;
    param[i] -= lr * mhat / (std::sqrt(vhat) + eps);
  }
}

template <typename T>
struct OptimizerState {
  AdamWConfig config;
  HeadParameters<T> m;
  HeadParameters<T> v;
  std::uint64_t step = 0;

  static OptimizerState for_params(const HeadParameters<T>& p, AdamWConfig cfg) {
    const auto z = HeadParameters<T>::zeros(p.seg.in_dim(), p.seg.hidden_dim(), p.seg.out_dim());
    return {cfg, z, z, 0};
  }
};

template <typename T>
void adamw_step(HeadParameters<T>& params, const HeadParameters<T>& grads, OptimizerState<T>& st) {
  auto pb = param_blocks(params);
  const auto gb = param_blocks(grads);
  for (std::size_t b = 0; b < kNumParamBlocks; ++b) {
    if (pb[b].size() != gb[b].size())
      throw DimensionMismatch("adamw_step: gradient shape mismatch in " +
                              std::string(kParamBlockNames[b]));
    for (std::size_t i = 0; i < gb[b].size(); ++i)
      if (!std::isfinite(gb[b][i]))
        throw NonFiniteValue("adamw_step: non-finite gradient in block " +
                             std::string(kParamBlockNames[b]) + " at index " + std::to_string(i));
  }
  ++st.step;
  auto mb = param_blocks(st.m);
  auto vb = param_blocks(st.v);
  for (std::size_t b = 0; b < kNumParamBlocks; ++b)
    adamw_update(pb[b], gb[b], mb[b], vb[b], st.step, st.config, kParamBlockDecays[b]);
}

}  // namespace hp
