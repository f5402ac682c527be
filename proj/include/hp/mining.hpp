#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "hp/errors.hpp"
#include "hp/refpool.hpp"
#include "hp/rng.hpp"
#include "hp/shard.hpp"
#include "hp/tensor.hpp"

namespace hp {

using IndexList = std::vector<std::size_t>;

/// Positive and negative index lists (flat mini-batch indices) for one
/// flavor of global hidden positives.
struct FlavorSets {
  std::vector<IndexList> positives;
  std::vector<IndexList> negatives;

  std::size_t num_anchors() const { return positives.size(); }
};

struct GlobalPositiveSets {
  FlavorSets ag;  // task-agnostic: backbone features vs. Q^ag
  FlavorSets sp;  // task-specific: momentum features vs. Q^sp
};

/// Global hidden positives of every anchor.
///
/// With c_i the anchor's criterion against the pool, j != i is a positive of
/// i when sim(i, j) > c_i, or (symmetric) when sim(i, j) > c_j. Inequalities
/// are strict, so an anchor that is itself a pool entry (c_i = 1) only gains
/// positives through the symmetric clause.
template <typename T>
std::vector<IndexList> mine_positives(const Matrix<T>& features, const Matrix<T>& pool,
                                      bool symmetric = true) {
  const std::size_t n = features.rows();
  if (n < 2) throw InputError("mining: need at least 2 anchors, got " + std::to_string(n));
  const auto c = criteria(features, pool);
  const auto sim = pairwise_cosine(features, features);
  std::vector<IndexList> out(n);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j) {
      if (j == i) continue;
      // Read the upper triangle for both orders so symmetry never hinges on
      // floating-point commutativity.
      const T s = i < j ? sim(i, j) : sim(j, i);
      if (s > c[i] || (symmetric && s > c[j])) out[i].push_back(j);
    }
  return out;
}

inline std::vector<IndexList> mine_global(const Matrix<float>& features, const ReferencePool& pool,
                                          bool symmetric = true) {
  return mine_positives(features, pool.entries, symmetric);
}

inline std::vector<IndexList> mine_task_specific(const Matrix<float>& momentum_features,
                                                 const ReferencePool& pool, bool symmetric = true) {
  return mine_positives(momentum_features, pool.entries, symmetric);
}

/// ceil(rho/100 * remaining) with rho in (0, 100]; exact for integral products.
inline std::size_t negative_count(double rho_percent, std::size_t remaining) {
  if (!(rho_percent > 0.0 && rho_percent <= 100.0))
    throw InputError("rho must lie in (0, 100], got " + std::to_string(rho_percent));
  const double x = rho_percent * double(remaining) / 100.0;
  const double r = std::round(x);
  const double k = std::abs(x - r) < 1e-9 ? r : std::ceil(x);
  return std::min(remaining, static_cast<std::size_t>(k));
}

/// Uniform sample without replacement of ceil(rho% of remaining) indices from
/// {0..n-1} minus ({anchor} U positives). Returned sorted.
inline IndexList sample_negatives(std::size_t anchor, const IndexList& positives, std::size_t n,
                                  double rho_percent, RngStream rng) {
  std::vector<char> excluded(n, 0);
  if (anchor < n) excluded[anchor] = 1;
  for (auto p : positives)
    if (p < n) excluded[p] = 1;
  IndexList remaining;
  remaining.reserve(n);
  for (std::size_t j = 0; j < n; ++j)
    if (!excluded[j]) remaining.push_back(j);
  const std::size_t k = negative_count(rho_percent, remaining.size());
  IndexList out;
  out.reserve(k);
  for (auto idx : rng.sample_without_replacement(remaining.size(), k)) out.push_back(remaining[idx]);
  std::sort(out.begin(), out.end());
  return out;
}

/// Fills negatives for every anchor from per-anchor child streams of `rng`.
inline void sample_all_negatives(FlavorSets& sets, double rho_percent, const RngStream& rng) {
  const std::size_t n = sets.positives.size();
  sets.negatives.assign(n, {});
  for (std::size_t i = 0; i < n; ++i)
    sets.negatives[i] = sample_negatives(i, sets.positives[i], n, rho_percent, rng.child({i}));
}

// ---------------------------------------------------------------------------
// Local hidden positives

/// Members of an anchor's surrounding window whose attention from the anchor
/// strictly exceeds the mean of the anchor's full attention row.
template <typename T>
struct LocalPositiveSelection {
  IndexList indices;     // patch indices within the image (or flat batch indices)
  std::vector<T> weights;  // attention scores t_j aligned with indices
  std::size_t radius = 1;

  bool empty() const { return indices.empty(); }
};

template <typename T>
LocalPositiveSelection<T> select_local(std::size_t anchor, std::span<const T> attention_row,
                                       std::size_t grid_h, std::size_t grid_w,
                                       std::size_t radius = 1) {
  const std::size_t n = grid_h * grid_w;
  if (attention_row.size() != n)
    throw DimensionMismatch("select_local: attention row length " +
                            std::to_string(attention_row.size()) + " != H*W " + std::to_string(n));
  if (anchor >= n) throw InputError("select_local: anchor index out of range");
  T sum = T(0);
  for (auto v : attention_row) sum += v;
  const T threshold = sum / static_cast<T>(n);

  LocalPositiveSelection<T> sel;
  sel.radius = radius;
  const std::ptrdiff_t ay = std::ptrdiff_t(anchor / grid_w), ax = std::ptrdiff_t(anchor % grid_w);
  const std::ptrdiff_t r = std::ptrdiff_t(radius);
  for (std::ptrdiff_t y = std::max<std::ptrdiff_t>(0, ay - r);
       y <= std::min<std::ptrdiff_t>(std::ptrdiff_t(grid_h) - 1, ay + r); ++y)
    for (std::ptrdiff_t x = std::max<std::ptrdiff_t>(0, ax - r);
         x <= std::min<std::ptrdiff_t>(std::ptrdiff_t(grid_w) - 1, ax + r); ++x) {
      const std::size_t j = std::size_t(y) * grid_w + std::size_t(x);
      if (attention_row[j] > threshold) {
        sel.indices.push_back(j);
        sel.weights.push_back(attention_row[j]);
      }
    }
  return sel;
}

/// Selections for every anchor of a batch, with flat batch indices.
inline std::vector<LocalPositiveSelection<float>> select_local_batch(
    const MiniBatch& batch, const std::vector<PatchShard>& dataset, std::size_t radius) {
  std::vector<LocalPositiveSelection<float>> out;
  out.reserve(batch.view_a.rows());
  for (std::size_t img = 0; img < batch.num_images(); ++img) {
    const auto& shard = dataset.at(batch.shard_ids[img]);
    for (std::size_t p = 0; p < shard.num_patches(); ++p) {
      auto sel = select_local(p, shard.attention.row(p), shard.grid_h, shard.grid_w, radius);
      for (auto& j : sel.indices) j = batch.flat_index(img, j);
      out.push_back(std::move(sel));
    }
  }
  return out;
}

/// Per-member mixing coefficients sigma * t_j / |I_local|.
template <typename T>
std::vector<T> mixing_coefficients(const LocalPositiveSelection<T>& sel, T sigma) {
  std::vector<T> w(sel.weights.size());
  const T inv = T(1) / static_cast<T>(sel.indices.size());
  for (std::size_t k = 0; k < w.size(); ++k) w[k] = sigma * sel.weights[k] * inv;
  return w;
}

/// s_mix = (1/|I|) sum_j sigma t_j s_j over the selection; rows of `s` are
/// indexed by the selection's indices.
template <typename T>
std::vector<T> mix_local(const Matrix<T>& s, const LocalPositiveSelection<T>& sel, T sigma) {
  if (sel.empty()) throw InputError("mix_local: empty local selection");
  const auto w = mixing_coefficients(sel, sigma);
  std::vector<T> out(s.cols(), T(0));
  for (std::size_t k = 0; k < sel.indices.size(); ++k) {
    auto row = s.row(sel.indices[k]);
    for (std::size_t c = 0; c < out.size(); ++c) out[c] += w[k] * row[c];
  }
  return out;
}

/// Routes dL/ds_mix to each member: ds_j += sigma t_j / |I| * ds_mix.
template <typename T>
void mix_local_backward(const LocalPositiveSelection<T>& sel, T sigma, std::span<const T> grad_mix,
                        Matrix<T>& grad_s) {
  const auto w = mixing_coefficients(sel, sigma);
  for (std::size_t k = 0; k < sel.indices.size(); ++k) {
    auto row = grad_s.row(sel.indices[k]);
    for (std::size_t c = 0; c < row.size(); ++c) row[c] += w[k] * grad_mix[c];
  }
}

template <typename U, typename T>
LocalPositiveSelection<U> cast_selection(const LocalPositiveSelection<T>& s) {
  return {s.indices, std::vector<U>(s.weights.begin(), s.weights.end()), s.radius};
}

}  // namespace hp
