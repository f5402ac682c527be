#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <numeric>
#include <string>
#include <vector>

#include "hp/errors.hpp"
#include "hp/heads.hpp"
#include "hp/rng.hpp"
#include "hp/tensor.hpp"

namespace hp {

/// counts(predicted, truth). Row = predicted cluster or class, column =
/// ground-truth class.
class ConfusionMatrix {
 public:
  ConfusionMatrix() = default;
  ConfusionMatrix(std::size_t rows, std::size_t cols) : rows_(rows), cols_(cols), counts_(rows * cols, 0) {}
  explicit ConfusionMatrix(std::size_t n) : ConfusionMatrix(n, n) {}

  static ConfusionMatrix from_rows(const std::vector<std::vector<std::int64_t>>& rows) {
    const std::size_t r = rows.size();
    const std::size_t c = r ? rows.front().size() : 0;
    ConfusionMatrix m(r, c);
    for (std::size_t i = 0; i < r; ++i) {
      if (rows[i].size() != c) throw DimensionMismatch("ConfusionMatrix: ragged rows");
      for (std::size_t j = 0; j < c; ++j) {
        if (rows[i][j] < 0) throw InvariantViolation("ConfusionMatrix: negative count");
        m(i, j) = rows[i][j];
      }
    }
    return m;
  }

  std::size_t rows() const { return rows_; }
  std::size_t cols() const { return cols_; }
  bool square() const { return rows_ == cols_; }
  std::int64_t& operator()(std::size_t p, std::size_t t) { return counts_[p * cols_ + t]; }
  std::int64_t operator()(std::size_t p, std::size_t t) const { return counts_[p * cols_ + t]; }

  void add(std::size_t predicted, std::size_t truth) { ++(*this)(predicted, truth); }

  std::int64_t total() const { return std::accumulate(counts_.begin(), counts_.end(), std::int64_t{0}); }

  /// Merges rows: output row mapping[p] receives input row p.
  ConfusionMatrix remap_rows(const std::vector<std::size_t>& mapping, std::size_t out_rows) const {
    if (mapping.size() != rows_) throw DimensionMismatch("remap_rows: mapping length mismatch");
    ConfusionMatrix out(out_rows, cols_);
    for (std::size_t p = 0; p < rows_; ++p)
      for (std::size_t t = 0; t < cols_; ++t) out(mapping[p], t) += (*this)(p, t);
    return out;
  }

  bool operator==(const ConfusionMatrix&) const = default;

 private:
  std::size_t rows_ = 0, cols_ = 0;
  std::vector<std::int64_t> counts_;
};

struct Matching {
  std::vector<std::size_t> cluster_to_class;
  std::int64_t matched = 0;
};

/// Maximum-weight perfect matching of clusters to classes (Kuhn-Munkres with
/// potentials, O(n^3)).
inline Matching hungarian_match(const ConfusionMatrix& confusion) {
  if (!confusion.square())
    throw DimensionMismatch("hungarian_match: confusion matrix must be square, got " +
                            std::to_string(confusion.rows()) + "x" + std::to_string(confusion.cols()));
  const std::size_t n = confusion.rows();
  Matching result;
  if (n == 0) return result;
  // Minimise cost = -count. 1-based arrays; column 0 is a virtual start.
  const double inf = std::numeric_limits<double>::infinity();
  std::vector<double> u(n + 1, 0.0), v(n + 1, 0.0);
  std::vector<std::size_t> row_of_col(n + 1, 0), way(n + 1, 0);
  for (std::size_t row = 1; row <= n; ++row) {
    row_of_col[0] = row;
    std::size_t col0 = 0;
    std::vector<double> minv(n + 1, inf);
    std::vector<char> used(n + 1, 0);
    do {
      used[col0] = 1;
      const std::size_t r0 = row_of_col[col0];
      double delta = inf;
      std::size_t col1 = 0;
      for (std::size_t col = 1; col <= n; ++col) {
        if (used[col]) continue;
        const double cur = -double(confusion(r0 - 1, col - 1)) - u[r0] - v[col];
        if (cur < minv[col]) {
          minv[col] = cur;
          way[col] = col0;
        }
        if (minv[col] < delta) {
          delta = minv[col];
          col1 = col;
        }
      }
      for (std::size_t col = 0; col <= n; ++col) {
        if (used[col]) {
          u[row_of_col[col]] += delta;
          v[col] -= delta;
        } else {
          minv[col] -= delta;
        }
      }
      col0 = col1;
    } while (row_of_col[col0] != 0);
    do {
      const std::size_t col1 = way[col0];
      row_of_col[col0] = row_of_col[col1];
      col0 = col1;
    } while (col0 != 0);
  }
  result.cluster_to_class.assign(n, 0);
  for (std::size_t col = 1; col <= n; ++col) result.cluster_to_class[row_of_col[col] - 1] = col - 1;
  for (std::size_t r = 0; r < n; ++r) result.matched += confusion(r, result.cluster_to_class[r]);
  return result;
}

struct ProbeResult {
  double accuracy = 0.0;
  double mean_iou = 0.0;
  std::vector<double> per_class_iou;  // NaN for classes absent from ground truth
  std::vector<std::size_t> matching;  // cluster -> class (cluster probe only)
  std::vector<double> loss_history;   // linear probe: full-data loss after each epoch
};

/// Accuracy and IoU from a confusion matrix whose rows already index classes.
/// Classes with no ground-truth patches are excluded from the IoU mean.
inline ProbeResult metrics(const ConfusionMatrix& matched) {
  if (!matched.square()) throw DimensionMismatch("metrics: confusion matrix must be square");
  const auto total = matched.total();
  if (total == 0) throw InputError("metrics: confusion matrix is empty");
  const std::size_t n = matched.rows();
  ProbeResult r;
  std::int64_t trace = 0;
  double iou_sum = 0.0;
  std::size_t present = 0;
  r.per_class_iou.assign(n, std::numeric_limits<double>::quiet_NaN());
  for (std::size_t c = 0; c < n; ++c) {
    const std::int64_t tp = matched(c, c);
    std::int64_t row = 0, col = 0;
    for (std::size_t k = 0; k < n; ++k) {
      row += matched(c, k);
      col += matched(k, c);
    }
    trace += tp;
    if (col == 0) continue;
    const double iou = double(tp) / double(row + col - tp);
    r.per_class_iou[c] = iou;
    iou_sum += iou;
    ++present;
  }
  r.accuracy = double(trace) / double(total);
  r.mean_iou = present ? iou_sum / double(present) : 0.0;
  return r;
}

/// Hungarian matching followed by metrics on the re-indexed matrix.
inline ProbeResult matched_metrics(const ConfusionMatrix& confusion) {
  const auto m = hungarian_match(confusion);
  auto r = metrics(confusion.remap_rows(m.cluster_to_class, confusion.cols()));
  r.matching = m.cluster_to_class;
  return r;
}

// ---------------------------------------------------------------------------
// Cluster probe

struct ClusterProbeConfig {
  std::size_t num_clusters = 3;
  std::size_t steps = 500;
  double lr = 0.005;
};

struct ClusterProbeOutput {
  Matrix<double> centroids;  // unit rows
  std::vector<std::size_t> assignments;
};

namespace detail {

inline Matrix<double> normalized_rows(const Matrix<float>& x) { return row_normalize(x.cast<double>()); }

inline std::vector<std::size_t> argmax_cosine(const Matrix<double>& xn, const Matrix<double>& centroids) {
  const auto cn = row_normalize(centroids);
  std::vector<std::size_t> out(xn.rows());
  for (std::size_t i = 0; i < xn.rows(); ++i) {
    double best = -std::numeric_limits<double>::infinity();
    for (std::size_t k = 0; k < cn.rows(); ++k) {
      const double s = dot(xn.row(i), cn.row(k));
      if (s > best) {
        best = s;
        out[i] = k;
      }
    }
  }
  return out;
}

/// k-means++ seeding under cosine distance 1 - cos.
inline Matrix<double> kmeanspp_seed(const Matrix<double>& xn, std::size_t k, RngStream& rng) {
  const std::size_t n = xn.rows();
  auto centers = Matrix<double>::zeros(k, xn.cols());
  std::vector<double> d2(n, std::numeric_limits<double>::infinity());
  std::size_t pick = static_cast<std::size_t>(rng.below(n));
  for (std::size_t c = 0; c < k; ++c) {
    std::copy(xn.row(pick).begin(), xn.row(pick).end(), centers.row(c).begin());
    double total = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      const double d = std::max(0.0, 1.0 - dot(xn.row(i), centers.row(c)));
      d2[i] = std::min(d2[i], d * d);
      total += d2[i];
    }
    if (c + 1 == k) break;
    if (total <= 0.0) {
      pick = static_cast<std::size_t>(rng.below(n));
      continue;
    }
    double target = rng.uniform() * total;
    pick = n - 1;
    for (std::size_t i = 0; i < n; ++i) {
      target -= d2[i];
      if (target < 0.0) {
        pick = i;
        break;
      }
    }
  }
  return centers;
}

}  // namespace detail

/// Learns unit-norm centroids maximising the mean cosine similarity of each
/// feature to its assigned centroid. Each step re-assigns every feature to
/// its most similar centroid and takes one full-batch Adam step on the raw
/// centroid parameters (normalized in the forward pass).
inline ClusterProbeOutput cluster_probe(const Matrix<float>& features, const ClusterProbeConfig& cfg,
                                        RngStream rng) {
  const std::size_t n = features.rows(), d = features.cols(), k = cfg.num_clusters;
  if (k == 0) throw InputError("cluster_probe: need at least one cluster");
  if (n < k)
    throw InputError("cluster_probe: " + std::to_string(n) + " features for " + std::to_string(k) +
                     " clusters");
  const auto xn = detail::normalized_rows(features);
  auto centroids = detail::kmeanspp_seed(xn, k, rng);

  std::vector<double> m(k * d, 0.0), v(k * d, 0.0);
  const double b1 = 0.9, b2 = 0.999, eps = 1e-8;
  for (std::size_t step = 1; step <= cfg.steps; ++step) {
    const auto assign = detail::argmax_cosine(xn, centroids);
    // loss = -(1/n) sum_i cos(x_i, c_assign(i))
    auto grad = Matrix<double>::zeros(k, d);
    for (std::size_t c = 0; c < k; ++c) {
      auto cr = centroids.row(c);
      const double nc = norm(std::span<const double>(cr));
      for (std::size_t i = 0; i < n; ++i) {
        if (assign[i] != c) continue;
        auto x = xn.row(i);
        const double cs = dot(x, std::span<const double>(cr)) / nc;
        for (std::size_t j = 0; j < d; ++j) grad(c, j) -= (x[j] - cs * cr[j] / nc) / (nc * double(n));
      }
    }
    const double bc1 = 1.0 - std::pow(b1, double(step)), bc2 = 1.0 - std::pow(b2, double(step));
    for (std::size_t i = 0; i < k * d; ++i) {
      const double g = grad.flat()[i];
      m[i] = b1 * m[i] + (1 - b1) * g;
      v[i] = b2 * v[i] + (1 - b2) * g * g;
      centroids.flat()[i] -= cfg.lr * (m[i] / bc1) / (std::sqrt(v[i] / bc2) + eps);
    }
  }
  ClusterProbeOutput out;
  out.centroids = row_normalize(centroids);
  out.assignments = detail::argmax_cosine(xn, out.centroids);
  return out;
}

/// Confusion of cluster assignments against labels; unlabeled (-1) entries
/// are skipped.
inline ConfusionMatrix confusion_from(const std::vector<std::size_t>& predicted,
                                      const std::vector<std::int32_t>& labels, std::size_t num_classes) {
  if (predicted.size() != labels.size()) throw DimensionMismatch("confusion: length mismatch");
  ConfusionMatrix cm(num_classes);
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (labels[i] < 0) continue;
    if (std::size_t(labels[i]) >= num_classes || predicted[i] >= num_classes)
      throw InputError("confusion: index outside [0, " + std::to_string(num_classes) + ")");
    cm.add(predicted[i], std::size_t(labels[i]));
  }
  return cm;
}

// ---------------------------------------------------------------------------
// Linear probe

struct LinearProbeConfig {
  std::size_t num_classes = 3;
  double lr = 0.001;
  std::size_t epochs = 20;
  std::size_t batch_size = 64;
};

struct LinearModel {
  Matrix<double> w;  // classes x d
  std::vector<double> b;

  std::vector<double> logits(std::span<const float> x) const {
    std::vector<double> out(b);
    for (std::size_t c = 0; c < w.rows(); ++c)
      for (std::size_t j = 0; j < x.size(); ++j) out[c] += w(c, j) * double(x[j]);
    return out;
  }
  std::size_t predict(std::span<const float> x) const {
    const auto l = logits(x);
    return std::size_t(std::max_element(l.begin(), l.end()) - l.begin());
  }
};

namespace detail {

inline double cross_entropy(const LinearModel& model, const Matrix<float>& x,
                            const std::vector<std::int32_t>& y) {
  double total = 0.0;
  std::size_t count = 0;
  for (std::size_t i = 0; i < x.rows(); ++i) {
    if (y[i] < 0) continue;
    const auto l = model.logits(x.row(i));
    total += log_sum_exp(std::span<const double>(l)) - l[std::size_t(y[i])];
    ++count;
  }
  return count ? total / double(count) : 0.0;
}

}  // namespace detail

/// Softmax regression on frozen features trained with Adam; evaluated on the
/// held-out split with identity matching.
inline ProbeResult linear_probe(const Matrix<float>& train_x, const std::vector<std::int32_t>& train_y,
                                const Matrix<float>& test_x, const std::vector<std::int32_t>& test_y,
                                const LinearProbeConfig& cfg, RngStream rng,
                                LinearModel* trained = nullptr) {
  const std::size_t classes = cfg.num_classes, d = train_x.cols();
  if (train_x.rows() != train_y.size() || test_x.rows() != test_y.size())
    throw DimensionMismatch("linear_probe: feature/label count mismatch");
  if (test_x.cols() != d) throw DimensionMismatch("linear_probe: train/test feature dims differ");
  for (const auto* ys : {&train_y, &test_y})
    for (auto y : *ys)
      if (y != -1 && (y < 0 || std::size_t(y) >= classes))
        throw InputError("linear_probe: label " + std::to_string(y) + " outside [0, " +
                         std::to_string(classes) + ")");

  LinearModel model{Matrix<double>::zeros(classes, d), std::vector<double>(classes, 0.0)};
  const std::size_t np = classes * d + classes;
  std::vector<double> m(np, 0.0), v(np, 0.0), g(np, 0.0);
  const double b1 = 0.9, b2 = 0.999, eps = 1e-8;
  std::uint64_t step = 0;

  std::vector<std::size_t> order;
  for (std::size_t i = 0; i < train_x.rows(); ++i)
    if (train_y[i] >= 0) order.push_back(i);
  if (order.empty()) throw InputError("linear_probe: no labeled training features");

  ProbeResult result;
  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    auto erng = rng.child({epoch});
    erng.shuffle(order);
    for (std::size_t start = 0; start < order.size(); start += cfg.batch_size) {
      const std::size_t end = std::min(order.size(), start + cfg.batch_size);
      std::fill(g.begin(), g.end(), 0.0);
      for (std::size_t t = start; t < end; ++t) {
        const std::size_t i = order[t];
        auto x = train_x.row(i);
        auto p = model.logits(x);
        softmax_inplace(std::span<double>(p));
        p[std::size_t(train_y[i])] -= 1.0;
        for (std::size_t c = 0; c < classes; ++c) {
          for (std::size_t j = 0; j < d; ++j) g[c * d + j] += p[c] * double(x[j]);
          g[classes * d + c] += p[c];
        }
      }
      const double inv = 1.0 / double(end - start);
      ++step;
      const double bc1 = 1.0 - std::pow(b1, double(step)), bc2 = 1.0 - std::pow(b2, double(step));
      for (std::size_t k = 0; k < np; ++k) {
        const double gk = g[k] * inv;
        m[k] = b1 * m[k] + (1 - b1) * gk;
        v[k] = b2 * v[k] + (1 - b2) * gk * gk;
        const double upd = cfg.lr * (m[k] / bc1) / (std::sqrt(v[k] / bc2) + eps);
        if (k < classes * d)
          model.w.flat()[k] -= upd;
        else
          model.b[k - classes * d] -= upd;
      }
    }
    result.loss_history.push_back(detail::cross_entropy(model, train_x, train_y));
  }

  std::vector<std::size_t> pred(test_x.rows());
  for (std::size_t i = 0; i < test_x.rows(); ++i) pred[i] = model.predict(test_x.row(i));
  auto eval = metrics(confusion_from(pred, test_y, classes));
  eval.loss_history = std::move(result.loss_history);
  if (trained != nullptr) *trained = std::move(model);
  return eval;
}

}  // namespace hp
