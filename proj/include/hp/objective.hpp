#pragma once

#include <algorithm>
#include <cmath>
#include <optional>
#include <span>
#include <string>
#include <type_traits>
#include <vector>

#include "hp/errors.hpp"
#include "hp/heads.hpp"
#include "hp/mining.hpp"
#include "hp/tensor.hpp"

namespace hp {

// ---------------------------------------------------------------------------
// Contrastive terms

namespace detail {

/// Gradient of cos(a, b) with respect to a, scaled by `g`, added into `out`.
template <typename T>
void add_cosine_grad(std::span<const T> a, std::span<const std::type_identity_t<T>> b, T cos,
                     std::type_identity_t<T> inv_na, std::type_identity_t<T> inv_nb,
                     std::type_identity_t<T> g, std::span<std::type_identity_t<T>> out) {
  const T cross = g * inv_na * inv_nb;
  const T self = g * cos * inv_na * inv_na;
  for (std::size_t k = 0; k < a.size(); ++k) out[k] += cross * b[k] - self * a[k];
}

}  // namespace detail

/// Where contrastive gradients go. Either member may be null/empty to skip it.
template <typename T>
struct ContrastiveGrad {
  std::span<T> anchor;        // dL/d(anchor vector)
  Matrix<T>* rows = nullptr;  // dL/d(rows of the member matrix)
  T scale = T(1);             // multiplies every accumulated gradient
};

/// Multi-positive contrastive loss of one anchor:
///
///   L = -(1/|P|) sum_{p in P} log( exp(sim(a, z_p)/tau) / sum_{n in N u P} exp(sim(a, z_n)/tau) )
///
/// evaluated as logsumexp(N u P) - mean_{p in P} logit_p. Returns nullopt when
/// P is empty (the anchor is skipped). The anchor vector must not itself be a
/// member of P or N.
template <typename T>
std::optional<T> contrastive_multi(std::span<const std::type_identity_t<T>> anchor, const Matrix<T>& z,
                                   const IndexList& positives, const IndexList& negatives, T tau,
                                   ContrastiveGrad<T> grad = {}) {
  if (positives.empty()) return std::nullopt;
  if (anchor.size() != z.cols()) throw DimensionMismatch("contrastive_multi: anchor dim mismatch");
  if (!(tau > T(0))) throw InputError("contrastive_multi: temperature must be > 0");
  const std::size_t np = positives.size();
  const std::size_t m = np + negatives.size();

  const T na = norm(anchor);
  if (!(na > T(0))) throw DegenerateInput("contrastive_multi: zero anchor");
  const T inv_na = T(1) / na;
  std::vector<T> cos(m), inv_nb(m), logits(m);
  auto member = [&](std::size_t k) { return k < np ? positives[k] : negatives[k - np]; };
  T pos_sum = T(0);
  for (std::size_t k = 0; k < m; ++k) {
    auto b = z.row(member(k));
    const T nb = norm(b);
    if (!(nb > T(0))) throw DegenerateInput("contrastive_multi: zero member row");
    inv_nb[k] = T(1) / nb;
    cos[k] = clamp_unit(dot(anchor, b) * inv_na * inv_nb[k]);
    logits[k] = cos[k] / tau;
    if (k < np) pos_sum += logits[k];
  }
  const T lse = log_sum_exp(std::span<const T>(logits));
  const T loss = lse - pos_sum / static_cast<T>(np);

  if (!grad.anchor.empty() || grad.rows != nullptr) {
    // dL/dlogit_k = softmax_k - [k in P]/|P|
    for (std::size_t k = 0; k < m; ++k) {
      T g = std::exp(logits[k] - lse);
      if (k < np) g -= T(1) / static_cast<T>(np);
      const T gcos = grad.scale * g / tau;
      auto b = z.row(member(k));
      if (!grad.anchor.empty())
        detail::add_cosine_grad(anchor, b, cos[k], inv_na, inv_nb[k], gcos, grad.anchor);
      if (grad.rows != nullptr)
        detail::add_cosine_grad(b, anchor, cos[k], inv_nb[k], inv_na, gcos,
                                grad.rows->row(member(k)));
    }
  }
  return loss;
}

/// Single-positive InfoNCE over a batch: anchor row i, positive row j, every
/// other row of `z` a negative.
template <typename T>
T self_contrastive(std::size_t i, std::size_t j, const Matrix<T>& z, T tau, Matrix<T>* grad = nullptr,
                   T scale = T(1)) {
  const std::size_t n = z.rows();
  if (n < 2) throw InputError("self_contrastive: batch needs at least 2 rows");
  if (i >= n || j >= n || i == j) throw InputError("self_contrastive: bad anchor/partner indices");
  IndexList negatives;
  negatives.reserve(n - 2);
  for (std::size_t k = 0; k < n; ++k)
    if (k != i && k != j) negatives.push_back(k);
  ContrastiveGrad<T> g;
  if (grad != nullptr) {
    g.anchor = grad->row(i);
    g.rows = grad;
    g.scale = scale;
  }
  return *contrastive_multi(z.row(i), z, IndexList{j}, negatives, tau, g);
}

/// Mean squared Euclidean distance between paired rows; gradients (scaled)
/// accumulate into grad_a / grad_b when given.
template <typename T>
T regularizer(const Matrix<T>& za, const Matrix<T>& zb, Matrix<T>* grad_a = nullptr,
              Matrix<T>* grad_b = nullptr, const std::vector<char>* mask = nullptr,
              T scale = T(1)) {
  if (za.rows() != zb.rows() || za.cols() != zb.cols())
    throw DimensionMismatch("regularizer: view shapes differ");
  std::size_t count = 0;
  for (std::size_t i = 0; i < za.rows(); ++i)
    if (mask == nullptr || (*mask)[i]) ++count;
  if (count == 0) return T(0);
  const T inv = T(1) / static_cast<T>(count);
  T total = T(0);
  for (std::size_t i = 0; i < za.rows(); ++i) {
    if (mask != nullptr && !(*mask)[i]) continue;
    auto a = za.row(i);
    auto b = zb.row(i);
    for (std::size_t k = 0; k < a.size(); ++k) {
      const T d = a[k] - b[k];
      total += d * d;
      if (grad_a != nullptr) grad_a->row(i)[k] += scale * T(2) * d * inv;
      if (grad_b != nullptr) grad_b->row(i)[k] -= scale * T(2) * d * inv;
    }
  }
  return total * inv;
}

// ---------------------------------------------------------------------------
// Schedules and configuration

enum class RampShape { linear, cosine };

struct LossSchedule {
  std::uint64_t total_iterations = 1;
  RampShape shape = RampShape::linear;
  double alpha = 0.05;
  double tau = 0.5;

  /// Ramp from 0 at t = 0 to 1 at t = total_iterations, clamped beyond.
  double lambda(std::uint64_t t) const {
    if (total_iterations == 0) return 1.0;
    const double x = std::min(1.0, double(t) / double(total_iterations));
    if (shape == RampShape::cosine) return 0.5 * (1.0 - std::cos(3.14159265358979323846 * x));
    return x;
  }
};

enum class PropagationMode { gradient, loss };

/// Which terms are active and how they combine.
struct ObjectiveConfig {
  double tau = 0.5;
  double sigma = 1.0;
  double lambda = 0.0;
  double alpha = 0.05;
  bool ghp_ag = true;
  bool ghp_sp = true;
  bool lhp = true;
  bool regularizer = true;
  PropagationMode mode = PropagationMode::gradient;
};

/// Multipliers applied to each term's batch mean in the total.
struct TermWeights {
  double phi_ag = 1.0, psi_ag = 1.0, phi_sp = 0.0, psi_sp = 0.0, reg = 0.0;

  static TermWeights from(const ObjectiveConfig& c) {
    TermWeights w;
    w.phi_ag = c.ghp_ag ? 1.0 : 0.0;
    w.psi_ag = (c.ghp_ag && c.lhp) ? 1.0 : 0.0;
    w.phi_sp = c.ghp_sp ? c.lambda : 0.0;
    w.psi_sp = (c.ghp_sp && c.lhp) ? c.lambda : 0.0;
    w.reg = c.regularizer ? c.alpha : 0.0;
    return w;
  }
};

struct LossBreakdown {
  double phi_ag = 0, psi_ag = 0, phi_sp = 0, psi_sp = 0, regularizer = 0, total = 0;
  double lambda = 0;
  std::size_t anchors_used = 0;
  std::size_t anchors_skipped_zero_positive = 0;
  std::size_t phi_ag_count = 0, psi_ag_count = 0, phi_sp_count = 0, psi_sp_count = 0;
  std::size_t contrastive_evaluations = 0;

  bool all_skipped() const { return anchors_used == 0; }
};

template <typename T>
struct LossResult {
  LossBreakdown breakdown;
  HeadParameters<T> grad;
};

// ---------------------------------------------------------------------------
// Total objective

namespace detail {

struct FlavorRef {
  const FlavorSets* sets;
  double phi_weight;
  double psi_weight;
  double* phi_out;
  double* psi_out;
  std::size_t* phi_count;
  std::size_t* psi_count;
};

inline IndexList without(const IndexList& v, std::size_t x) {
  IndexList out;
  out.reserve(v.size());
  for (auto e : v)
    if (e != x) out.push_back(e);
  return out;
}

}  // namespace detail

/// Per-anchor objective, averaged per term over contributing anchors:
///
///   total = (Phi_ag + Psi_ag) + lambda (Phi_sp + Psi_sp) + alpha R
///
/// Phi uses z_i = Z(S(f_i)); Psi uses Z(s_mix_i) built from the anchor's
/// local hidden positives (gradient mode), or applies the anchor's loss to
/// each local positive's own z_j weighted by sigma t_j / |I_local| (loss
/// mode). Anchors with no positives in a flavor skip that flavor's Phi and
/// Psi; anchors with an empty local selection skip Psi. `anchor_mask`, when
/// given, restricts every term to the marked anchors.
template <typename T>
LossResult<T> total_loss(const HeadParameters<T>& params, const Matrix<T>& f_a,
                         const Matrix<T>& f_b, const GlobalPositiveSets& sets,
                         const std::vector<LocalPositiveSelection<T>>& local,
                         const ObjectiveConfig& cfg, const TermWeights& weights,
                         const std::vector<char>* anchor_mask = nullptr, bool with_grad = true) {
  const std::size_t n = f_a.rows();
  const std::size_t k_dim = params.seg.out_dim();
  if (f_b.rows() != n || f_b.cols() != f_a.cols())
    throw DimensionMismatch("total_loss: view shapes differ");
  if (cfg.ghp_ag && sets.ag.positives.size() != n)
    throw DimensionMismatch("total_loss: task-agnostic sets do not cover the batch");
  if (cfg.ghp_sp && sets.sp.positives.size() != n)
    throw DimensionMismatch("total_loss: task-specific sets do not cover the batch");
  if (cfg.lhp && local.size() != n)
    throw DimensionMismatch("total_loss: local selections do not cover the batch");
  if (anchor_mask != nullptr && anchor_mask->size() != n)
    throw DimensionMismatch("total_loss: anchor mask length mismatch");
  auto active = [&](std::size_t i) { return anchor_mask == nullptr || (*anchor_mask)[i] != 0; };

  const T tau = static_cast<T>(cfg.tau);
  const T sigma = static_cast<T>(cfg.sigma);

  LossResult<T> result;
  auto& bd = result.breakdown;
  bd.lambda = cfg.lambda;
  result.grad = HeadParameters<T>::zeros(params.seg.in_dim(), params.seg.hidden_dim(), k_dim);

  const auto seg_a = seg_forward(f_a, params.seg);
  const auto proj_a = proj_forward(seg_a.s, params);
  const Matrix<T>& za = proj_a.z;
  auto dza = Matrix<T>::zeros(n, k_dim);
  auto dsa = Matrix<T>::zeros(n, k_dim);

  std::vector<detail::FlavorRef> flavors;
  if (cfg.ghp_ag)
    flavors.push_back({&sets.ag, weights.phi_ag, weights.psi_ag, &bd.phi_ag, &bd.psi_ag,
                       &bd.phi_ag_count, &bd.psi_ag_count});
  if (cfg.ghp_sp)
    flavors.push_back({&sets.sp, weights.phi_sp, weights.psi_sp, &bd.phi_sp, &bd.psi_sp,
                       &bd.phi_sp_count, &bd.psi_sp_count});

  // Anchor accounting.
  for (std::size_t i = 0; i < n; ++i) {
    if (!active(i)) continue;
    bool any = false;
    for (const auto& fl : flavors) any = any || !fl.sets->positives[i].empty();
    if (any)
      ++bd.anchors_used;
    else
      ++bd.anchors_skipped_zero_positive;
  }

  // Mixed vectors for anchors with a local selection and at least one positive.
  std::vector<std::size_t> mix_row(n, SIZE_MAX);
  std::vector<std::size_t> mix_anchor;
  const bool gradient_mode = cfg.lhp && cfg.mode == PropagationMode::gradient;
  if (gradient_mode) {
    for (std::size_t i = 0; i < n; ++i) {
      if (!active(i) || local[i].empty()) continue;
      bool any = false;
      for (const auto& fl : flavors) any = any || !fl.sets->positives[i].empty();
      if (!any) continue;
      mix_row[i] = mix_anchor.size();
      mix_anchor.push_back(i);
    }
  }
  auto s_mix = Matrix<T>::zeros(mix_anchor.size(), k_dim);
  for (std::size_t r = 0; r < mix_anchor.size(); ++r) {
    const auto v = mix_local(seg_a.s, local[mix_anchor[r]], sigma);
    std::copy(v.begin(), v.end(), s_mix.row(r).begin());
  }
  std::optional<ProjOutput<T>> proj_mix;
  if (!mix_anchor.empty()) proj_mix = proj_forward(s_mix, params);
  auto dz_mix = Matrix<T>::zeros(mix_anchor.size(), k_dim);

  for (const auto& fl : flavors) {
    const auto& P = fl.sets->positives;
    const auto& N = fl.sets->negatives;
    if (N.size() != n) throw DimensionMismatch("total_loss: negative sets do not cover the batch");

    std::size_t phi_n = 0, psi_n = 0;
    for (std::size_t i = 0; i < n; ++i) {
      if (!active(i) || P[i].empty()) continue;
      ++phi_n;
      if (cfg.lhp && !local[i].empty()) ++psi_n;
    }
    *fl.phi_count = phi_n;
    *fl.psi_count = psi_n;

    const bool phi_grad = with_grad && fl.phi_weight != 0.0 && phi_n > 0;
    const bool psi_grad = with_grad && fl.psi_weight != 0.0 && psi_n > 0;
    const T phi_scale = phi_n ? static_cast<T>(fl.phi_weight / double(phi_n)) : T(0);
    const T psi_scale = psi_n ? static_cast<T>(fl.psi_weight / double(psi_n)) : T(0);

    double phi_sum = 0.0, psi_sum = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      if (!active(i) || P[i].empty()) continue;

      ContrastiveGrad<T> g;
      if (phi_grad) g = {dza.row(i), &dza, phi_scale};
      phi_sum += double(*contrastive_multi(za.row(i), za, P[i], N[i], tau, g));
      ++bd.contrastive_evaluations;

      if (!cfg.lhp || local[i].empty()) continue;
      if (gradient_mode) {
        const std::size_t r = mix_row[i];
        ContrastiveGrad<T> gm;
        if (psi_grad) gm = {dz_mix.row(r), &dza, psi_scale};
        psi_sum += double(*contrastive_multi(proj_mix->z.row(r), za, P[i], N[i], tau, gm));
        ++bd.contrastive_evaluations;
      } else {
        const auto coef = mixing_coefficients(local[i], sigma);
        double term = 0.0;
        for (std::size_t k = 0; k < local[i].indices.size(); ++k) {
          const std::size_t j = local[i].indices[k];
          const auto pj = j == i ? P[i] : detail::without(P[i], j);
          const auto nj = j == i ? N[i] : detail::without(N[i], j);
          ContrastiveGrad<T> gl;
          if (psi_grad) gl = {dza.row(j), &dza, psi_scale * coef[k]};
          if (auto l = contrastive_multi(za.row(j), za, pj, nj, tau, gl))
            term += double(coef[k]) * double(*l);
          ++bd.contrastive_evaluations;
        }
        psi_sum += term;
      }
    }
    *fl.phi_out = phi_n ? phi_sum / double(phi_n) : 0.0;
    *fl.psi_out = psi_n ? psi_sum / double(psi_n) : 0.0;
  }

  // Consistency regularizer between the two views.
  std::optional<SegOutput<T>> seg_b;
  std::optional<ProjOutput<T>> proj_b;
  Matrix<T> dzb;
  if (cfg.regularizer) {
    seg_b = seg_forward(f_b, params.seg);
    proj_b = proj_forward(seg_b->s, params);
    dzb = Matrix<T>::zeros(n, k_dim);
    const bool reg_grad = with_grad && weights.reg != 0.0;
    bd.regularizer = double(regularizer(za, proj_b->z, reg_grad ? &dza : nullptr,
                                        reg_grad ? &dzb : nullptr, anchor_mask,
                                        static_cast<T>(weights.reg)));
  }

  bd.total = weights.phi_ag * bd.phi_ag + weights.psi_ag * bd.psi_ag +
             weights.phi_sp * bd.phi_sp + weights.psi_sp * bd.psi_sp + weights.reg * bd.regularizer;

  if (!with_grad) return result;

  if (proj_mix) {
    const auto ds_mix = proj_backward(s_mix, params, proj_mix->cache, proj_mix->z, dz_mix, result.grad);
    for (std::size_t r = 0; r < mix_anchor.size(); ++r)
      mix_local_backward(local[mix_anchor[r]], sigma, ds_mix.row(r), dsa);
  }
  const auto ds_direct = proj_backward(seg_a.s, params, proj_a.cache, za, dza, result.grad);
  for (std::size_t i = 0; i < dsa.size(); ++i) dsa.flat()[i] += ds_direct.flat()[i];
  seg_backward(f_a, params.seg, seg_a.cache, dsa, result.grad.seg);

  if (cfg.regularizer && weights.reg != 0.0) {
    const auto dsb = proj_backward(seg_b->s, params, proj_b->cache, proj_b->z, dzb, result.grad);
    seg_backward(f_b, params.seg, seg_b->cache, dsb, result.grad.seg);
  }
  return result;
}

template <typename T>
LossResult<T> total_loss(const HeadParameters<T>& params, const Matrix<T>& f_a,
                         const Matrix<T>& f_b, const GlobalPositiveSets& sets,
                         const std::vector<LocalPositiveSelection<T>>& local,
                         const ObjectiveConfig& cfg) {
  return total_loss(params, f_a, f_b, sets, local, cfg, TermWeights::from(cfg));
}

/// Same objective with the loss-propagation alternative for the local term.
template <typename T>
LossResult<T> loss_propagation_alternative(const HeadParameters<T>& params, const Matrix<T>& f_a,
                                           const Matrix<T>& f_b, const GlobalPositiveSets& sets,
                                           const std::vector<LocalPositiveSelection<T>>& local,
                                           ObjectiveConfig cfg) {
  cfg.mode = PropagationMode::loss;
  return total_loss(params, f_a, f_b, sets, local, cfg, TermWeights::from(cfg));
}

/// Self-contrastive baseline over both views: each patch's positive is its
/// counterpart in the other view, all other 2n - 2 rows are negatives. The
/// batch loss is the mean over all 2n anchors.
template <typename T>
LossResult<T> self_contrastive_loss(const HeadParameters<T>& params, const Matrix<T>& f_a,
                                    const Matrix<T>& f_b, double tau, bool with_grad = true) {
  const std::size_t n = f_a.rows();
  const std::size_t k_dim = params.seg.out_dim();
  LossResult<T> result;
  result.grad = HeadParameters<T>::zeros(params.seg.in_dim(), params.seg.hidden_dim(), k_dim);

  const auto seg_a = seg_forward(f_a, params.seg);
  const auto seg_b = seg_forward(f_b, params.seg);
  const auto proj_a = proj_forward(seg_a.s, params);
  const auto proj_b = proj_forward(seg_b.s, params);
  const auto z = vstack(proj_a.z, proj_b.z);
  auto dz = Matrix<T>::zeros(2 * n, k_dim);

  const T scale = T(1) / static_cast<T>(2 * n);
  double sum = 0.0;
  for (std::size_t r = 0; r < 2 * n; ++r) {
    const std::size_t partner = r < n ? r + n : r - n;
    sum += double(self_contrastive(r, partner, z, static_cast<T>(tau), with_grad ? &dz : nullptr, scale));
  }
  auto& bd = result.breakdown;
  bd.phi_ag = sum / double(2 * n);
  bd.total = bd.phi_ag;
  bd.anchors_used = n;
  bd.phi_ag_count = 2 * n;
  bd.contrastive_evaluations = 2 * n;
  if (!with_grad) return result;

  auto dza = Matrix<T>::zeros(n, k_dim), dzb = Matrix<T>::zeros(n, k_dim);
  std::copy(dz.flat().begin(), dz.flat().begin() + static_cast<std::ptrdiff_t>(n * k_dim),
            dza.flat().begin());
  std::copy(dz.flat().begin() + static_cast<std::ptrdiff_t>(n * k_dim), dz.flat().end(),
            dzb.flat().begin());
  const auto dsa = proj_backward(seg_a.s, params, proj_a.cache, proj_a.z, dza, result.grad);
  const auto dsb = proj_backward(seg_b.s, params, proj_b.cache, proj_b.z, dzb, result.grad);
  seg_backward(f_a, params.seg, seg_a.cache, dsa, result.grad.seg);
  seg_backward(f_b, params.seg, seg_b.cache, dsb, result.grad.seg);
  return result;
}

}  // namespace hp
