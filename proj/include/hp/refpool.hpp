#pragma once

#include <algorithm>
#include <cstdint>
#include <limits>
#include <span>
#include <string>
#include <vector>

#include "hp/errors.hpp"
#include "hp/heads.hpp"
#include "hp/rng.hpp"
#include "hp/shard.hpp"
#include "hp/tensor.hpp"

namespace hp {

enum class PoolFlavor : std::uint8_t { task_agnostic = 0, task_specific = 1 };

/// M reference features whose nearest member to an anchor sets the
/// anchor's positivity threshold.
struct ReferencePool {
  Matrix<float> entries;  // M x d
  PoolFlavor flavor = PoolFlavor::task_agnostic;
  std::uint64_t built_at_iteration = 0;

  std::size_t size() const { return entries.rows(); }
  std::size_t dim() const { return entries.cols(); }
  bool operator==(const ReferencePool&) const = default;
};

struct RenewalSchedule {
  std::uint64_t period = 100;

  explicit RenewalSchedule(std::uint64_t p = 100) : period(p) {
    if (period < 1) throw InputError("renewal period must be >= 1");
  }
  bool due(std::uint64_t iteration) const { return iteration % period == 0; }
  /// Number of renewals over iterations [0, total).
  std::uint64_t renewals_over(std::uint64_t total) const { return (total + period - 1) / period; }
};

namespace detail {

struct PatchPick {
  std::size_t image, patch;
};

inline std::vector<PatchPick> pick_pool_patches(const std::vector<PatchShard>& dataset,
                                                std::size_t m, RngStream& rng) {
  if (m == 0) throw InputError("reference pool size must be >= 1");
  if (dataset.size() < m)
    throw InputError("reference pool needs " + std::to_string(m) + " images, dataset has " +
                     std::to_string(dataset.size()));
  const auto images = rng.sample_without_replacement(dataset.size(), m);
  std::vector<PatchPick> picks;
  picks.reserve(m);
  for (auto img : images)
    picks.push_back({img, static_cast<std::size_t>(rng.below(dataset[img].num_patches()))});
  return picks;
}

inline void require_nonzero_rows(const Matrix<float>& m, const char* what) {
  for (std::size_t r = 0; r < m.rows(); ++r)
    if (!(norm(m.row(r)) > 0.0f))
      throw DegenerateInput(std::string(what) + ": zero pool row at index " + std::to_string(r));
}

}  // namespace detail

/// One uniformly random backbone patch (view a) from each of M distinct
/// random images.
inline ReferencePool build_task_agnostic_pool(const std::vector<PatchShard>& dataset, std::size_t m,
                                              RngStream rng) {
  const auto picks = detail::pick_pool_patches(dataset, m, rng);
  const std::size_t c = dataset.front().feat_dim;
  auto entries = Matrix<float>::zeros(m, c);
  for (std::size_t r = 0; r < m; ++r) {
    auto src = dataset[picks[r].image].view_a.row(picks[r].patch);
    std::copy(src.begin(), src.end(), entries.row(r).begin());
  }
  detail::require_nonzero_rows(entries, "task-agnostic pool");
  return {std::move(entries), PoolFlavor::task_agnostic, 0};
}

/// Fresh random image subset, one patch each, mapped through the momentum head.
inline ReferencePool renew_task_specific_pool(const std::vector<PatchShard>& dataset,
                                              const MomentumHead<float>& momentum, std::size_t m,
                                              RngStream rng, std::uint64_t iteration) {
  const auto picks = detail::pick_pool_patches(dataset, m, rng);
  const std::size_t c = dataset.front().feat_dim;
  auto f = Matrix<float>::zeros(m, c);
  for (std::size_t r = 0; r < m; ++r) {
    auto src = dataset[picks[r].image].view_a.row(picks[r].patch);
    std::copy(src.begin(), src.end(), f.row(r).begin());
  }
  auto entries = momentum.forward(f);
  detail::require_nonzero_rows(entries, "task-specific pool");
  return {std::move(entries), PoolFlavor::task_specific, iteration};
}

/// Per-anchor criterion c_i = max over pool entries of cos(anchor_i, q).
/// Uses the same normalize-then-dot path as pairwise_cosine.
template <typename T>
std::vector<T> criteria(const Matrix<T>& anchors, const Matrix<T>& pool) {
  if (pool.rows() == 0) throw InputError("criterion: empty reference pool");
  if (anchors.cols() != pool.cols())
    throw DimensionMismatch("criterion: anchor dim " + std::to_string(anchors.cols()) +
                            " != pool dim " + std::to_string(pool.cols()));
  const auto sims = pairwise_cosine(anchors, pool);
  std::vector<T> c(anchors.rows(), -std::numeric_limits<T>::infinity());
  for (std::size_t i = 0; i < anchors.rows(); ++i)
    for (auto v : sims.row(i)) c[i] = std::max(c[i], v);
  return c;
}

inline float criterion(std::span<const float> anchor, const ReferencePool& pool) {
  Matrix<float> a(1, anchor.size(), std::vector<float>(anchor.begin(), anchor.end()));
  return criteria(a, pool.entries).front();
}

}  // namespace hp
