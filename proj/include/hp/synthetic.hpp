#pragma once

#include <cmath>
#include <cstdint>
#include <vector>

#include "hp/errors.hpp"
#include "hp/rng.hpp"
#include "hp/shard.hpp"
#include "hp/tensor.hpp"

namespace hp {

/// Parameters of the desk-scale synthetic dataset.
///
/// Each class owns a center: a random unit direction in R^C scaled by
/// `separation`. A patch feature is its class center plus i.i.d. Gaussian
/// noise with per-coordinate standard deviation `noise`. View b adds a
/// further per-coordinate Gaussian jitter. Classes are laid out on the patch
/// grid as Voronoi regions around a few random seeds per image, so
/// neighbouring patches usually share a class.
struct SyntheticSpec {
  std::uint32_t num_classes = 3;
  std::uint32_t feat_dim = 32;
  std::uint32_t grid_h = 8;
  std::uint32_t grid_w = 8;
  std::uint32_t num_images = 64;
  double separation = 5.0;
  double noise = 1.0;
  double jitter = 0.1;
  std::uint32_t regions_per_image = 3;
  double attention_sharpness = 10.0;  // softmax inverse temperature over cosine similarity
  std::uint64_t seed = 0;

  void validate() const {
    detail::require(num_classes >= 1, "synthetic: num_classes must be >= 1");
    detail::require(feat_dim >= 1, "synthetic: feat_dim must be >= 1");
    detail::require(grid_h >= 1 && grid_w >= 1, "synthetic: grid must be non-empty");
    detail::require(num_images >= 1, "synthetic: num_images must be >= 1");
    detail::require(separation > 0.0, "synthetic: separation must be > 0");
    detail::require(noise >= 0.0, "synthetic: noise must be >= 0");
    detail::require(jitter >= 0.0, "synthetic: jitter must be >= 0");
    detail::require(regions_per_image >= 1, "synthetic: regions_per_image must be >= 1");
    detail::require(attention_sharpness >= 0.0, "synthetic: attention_sharpness must be >= 0");
  }
};

/// Class centers used by generate_synthetic (exposed for nearest-center checks).
inline Matrix<double> synthetic_centers(const SyntheticSpec& spec) {
  spec.validate();
  RngStream rng(spec.seed, "synthetic-centers");
  auto centers = Matrix<double>::zeros(spec.num_classes, spec.feat_dim);
  for (std::size_t k = 0; k < spec.num_classes; ++k) {
    auto row = centers.row(k);
    double n2 = 0.0;
    do {
      n2 = 0.0;
      for (auto& v : row) {
        v = rng.normal();
        n2 += v * v;
      }
    } while (n2 == 0.0);
    const double scale = spec.separation / std::sqrt(n2);
    for (auto& v : row) v *= scale;
  }
  return centers;
}

inline std::vector<PatchShard> generate_synthetic(const SyntheticSpec& spec) {
  spec.validate();
  const auto centers = synthetic_centers(spec);
  const std::size_t h = spec.grid_h, w = spec.grid_w, n = h * w, c = spec.feat_dim;
  RngStream root(spec.seed, "synthetic-images");

  std::vector<PatchShard> out;
  out.reserve(spec.num_images);
  for (std::size_t img = 0; img < spec.num_images; ++img) {
    auto rng = root.child({img});

    struct Seed {
      double y, x;
      std::int32_t cls;
    };
    std::vector<Seed> seeds(spec.regions_per_image);
    for (auto& s : seeds) {
      s.y = rng.uniform(0.0, double(h));
      s.x = rng.uniform(0.0, double(w));
      s.cls = static_cast<std::int32_t>(rng.below(spec.num_classes));
    }
    std::vector<std::int32_t> labels(n);
    for (std::size_t p = 0; p < n; ++p) {
      const double py = double(p / w) + 0.5, px = double(p % w) + 0.5;
      double best = INFINITY;
      for (const auto& s : seeds) {
        const double d = (py - s.y) * (py - s.y) + (px - s.x) * (px - s.x);
        if (d < best) {
          best = d;
          labels[p] = s.cls;
        }
      }
    }

    std::vector<float> a(n * c), b(n * c);
    for (std::size_t p = 0; p < n; ++p) {
      auto center = centers.row(static_cast<std::size_t>(labels[p]));
      for (std::size_t k = 0; k < c; ++k) {
        const double va = center[k] + spec.noise * rng.normal();
        const double vb = va + spec.jitter * rng.normal();
        a[p * c + k] = static_cast<float>(va);
        b[p * c + k] = static_cast<float>(vb);
      }
    }

    PatchShard shard;
    shard.grid_h = spec.grid_h;
    shard.grid_w = spec.grid_w;
    shard.feat_dim = spec.feat_dim;
    shard.view_a = Matrix<float>(n, c, std::move(a));
    shard.view_b = Matrix<float>(n, c, std::move(b));

    // Attention: softmax over scaled cosine similarity, computed in double.
    const auto fa = shard.view_a.cast<double>();
    const auto sim = pairwise_cosine(fa, fa);
    auto att = Matrix<float>::zeros(n, n);
    std::vector<double> row(n);
    for (std::size_t i = 0; i < n; ++i) {
      for (std::size_t j = 0; j < n; ++j) row[j] = spec.attention_sharpness * sim(i, j);
      softmax_inplace(std::span<double>(row));
      for (std::size_t j = 0; j < n; ++j) att(i, j) = static_cast<float>(row[j]);
    }
    shard.attention = std::move(att);
    shard.labels = std::move(labels);
    shard.num_classes = spec.num_classes;
    out.push_back(std::move(shard));
  }
  return out;
}

}  // namespace hp
