#pragma once

#include <algorithm>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "hp/checkpoint.hpp"
#include "hp/errors.hpp"
#include "hp/evaluation.hpp"
#include "hp/heads.hpp"
#include "hp/mining.hpp"
#include "hp/objective.hpp"
#include "hp/refpool.hpp"
#include "hp/rng.hpp"
#include "hp/shard.hpp"

namespace hp {

/// Everything that controls a training run. Defaults are the synthetic
/// preset; apply_preset() switches to the per-dataset values.
struct TrainConfig {
  std::string preset = "synth";
  std::size_t batch_size = 8;
  std::size_t embed_dim = 16;   // K
  std::size_t hidden_dim = 0;   // K_h; 0 means K
  std::size_t pool_size = 256;  // M
  double tau = 0.5;
  double rho = 2.0;  // percent
  double sigma = 1.0;
  std::size_t window_radius = 1;
  double momentum = 0.99;
  double lr = 5e-4;
  double weight_decay = 0.1;
  std::uint64_t iterations = 300;
  std::uint64_t epochs = 0;  // when > 0, overrides iterations
  std::uint64_t renewal_period = 100;
  RampShape ramp = RampShape::linear;
  double alpha = 0.05;

  // Component switches.
  bool ghp_ts = true;
  bool lhp = true;
  bool symmetric = true;
  bool regularizer = true;
  bool baseline_eq1 = false;
  bool loss_prop_mode = false;

  std::uint64_t seed = 0;
  std::uint64_t checkpoint_every = 0;  // 0: final checkpoint only
  std::uint64_t eval_every = 0;        // 0: final evaluation only
  std::size_t cluster_steps = 500;
  double cluster_lr = 0.005;
  std::size_t linear_epochs = 20;
  double linear_lr = 0.001;

  std::size_t resolved_hidden() const { return hidden_dim ? hidden_dim : embed_dim; }

  void validate() const {
    detail::require(batch_size >= 2, "batch size must be >= 2");
    detail::require(embed_dim >= 1, "embedding dimension must be >= 1");
    detail::require(pool_size >= 1, "pool size must be >= 1");
    detail::require(tau > 0.0, "tau must be > 0");
    detail::require(rho > 0.0 && rho <= 100.0, "rho must lie in (0, 100]");
    detail::require(sigma > 0.0, "sigma must be > 0");
    detail::require(momentum > 0.0 && momentum < 1.0, "momentum must lie in (0, 1)");
    detail::require(lr > 0.0, "learning rate must be > 0");
    detail::require(weight_decay >= 0.0, "weight decay must be >= 0");
    detail::require(renewal_period >= 1, "renewal period must be >= 1");
    detail::require(alpha >= 0.0, "alpha must be >= 0");
    detail::require(iterations >= 1 || epochs >= 1, "need at least one iteration");
  }
};

/// Per-dataset defaults: M and tau per dataset, epoch budgets for the real
/// datasets, an iteration budget for the synthetic one.
inline void apply_preset(TrainConfig& cfg, const std::string& name) {
  if (name == "coco") {
    cfg.tau = 0.8, cfg.pool_size = 2048, cfg.epochs = 3, cfg.embed_dim = 512;
  } else if (name == "cityscapes") {
    cfg.tau = 0.6, cfg.pool_size = 2048, cfg.epochs = 20, cfg.embed_dim = 512;
  } else if (name == "potsdam") {
    cfg.tau = 0.4, cfg.pool_size = 1024, cfg.epochs = 10, cfg.embed_dim = 512;
  } else if (name == "synth") {
    cfg.tau = 0.5, cfg.pool_size = 256, cfg.epochs = 0, cfg.iterations = 300, cfg.embed_dim = 16;
  } else {
    throw InputError("unknown preset '" + name + "' (expected coco|cityscapes|potsdam|synth)");
  }
  cfg.preset = name;
}

inline nlohmann::ordered_json config_to_json(const TrainConfig& c) {
  return {{"preset", c.preset},
          {"batch_size", c.batch_size},
          {"embed_dim", c.embed_dim},
          {"hidden_dim", c.resolved_hidden()},
          {"pool_size", c.pool_size},
          {"tau", c.tau},
          {"rho", c.rho},
          {"sigma", c.sigma},
          {"window_radius", c.window_radius},
          {"momentum", c.momentum},
          {"lr", c.lr},
          {"weight_decay", c.weight_decay},
          {"iterations", c.iterations},
          {"epochs", c.epochs},
          {"renewal_period", c.renewal_period},
          {"lambda_ramp", c.ramp == RampShape::linear ? "linear" : "cosine"},
          {"alpha", c.alpha},
          {"ghp_ts", c.ghp_ts},
          {"lhp", c.lhp},
          {"symmetric", c.symmetric},
          {"regularizer", c.regularizer},
          {"baseline_eq1", c.baseline_eq1},
          {"loss_prop_mode", c.loss_prop_mode},
          {"seed", c.seed},
          {"checkpoint_every", c.checkpoint_every},
          {"eval_every", c.eval_every},
          {"cluster_steps", c.cluster_steps},
          {"linear_epochs", c.linear_epochs}};
}

// ---------------------------------------------------------------------------
// Evaluation over a dataset

struct EvalConfig {
  std::size_t cluster_steps = 500;
  double cluster_lr = 0.005;
  std::size_t linear_epochs = 20;
  double linear_lr = 0.001;
  std::uint64_t seed = 0;
};

struct EvalReport {
  ProbeResult cluster;
  ProbeResult linear;
};

/// Segmentation features s of every patch (view a), shard-major.
inline Matrix<float> extract_features(const SegHeadParams<float>& seg, const std::vector<PatchShard>& shards) {
  if (shards.empty()) throw InputError("extract_features: empty dataset");
  const std::size_t n = shards.front().num_patches();
  auto out = Matrix<float>::zeros(shards.size() * n, seg.out_dim());
  for (std::size_t k = 0; k < shards.size(); ++k) {
    const auto s = seg_forward(shards[k].view_a, seg).s;
    std::copy(s.flat().begin(), s.flat().end(), out.flat().begin() + static_cast<std::ptrdiff_t>(k * n * s.cols()));
  }
  return out;
}

/// Cluster probe over every patch, plus a linear probe trained on images
/// whose index is not 3 mod 4 and tested on the rest. Heads are frozen.
inline EvalReport evaluate(const SegHeadParams<float>& seg, const std::vector<PatchShard>& dataset,
                           const EvalConfig& cfg) {
  if (dataset.empty()) throw InputError("evaluate: empty dataset");
  std::size_t num_classes = 0;
  for (std::size_t i = 0; i < dataset.size(); ++i) {
    if (!dataset[i].has_labels())
      throw InputError("evaluate: shard " + std::to_string(i) +
                       " has no labels; the cluster and linear probes need ground truth");
    num_classes = std::max<std::size_t>(num_classes, dataset[i].num_classes);
  }
  const auto features = extract_features(seg, dataset);
  std::vector<std::int32_t> labels;
  for (const auto& s : dataset) labels.insert(labels.end(), s.labels->begin(), s.labels->end());

  EvalReport report;
  const auto clusters = cluster_probe(features, {num_classes, cfg.cluster_steps, cfg.cluster_lr},
                                      RngStream(cfg.seed, "cluster-probe"));
  report.cluster = matched_metrics(confusion_from(clusters.assignments, labels, num_classes));

  const std::size_t n = dataset.front().num_patches(), k = features.cols();
  std::vector<float> trx, tex;
  std::vector<std::int32_t> try_, tey;
  const bool single = dataset.size() < 2;
  for (std::size_t img = 0; img < dataset.size(); ++img) {
    const bool test = single || img % 4 == 3;
    const bool train = single || !test;
    for (std::size_t p = 0; p < n; ++p) {
      auto row = features.row(img * n + p);
      if (train) {
        trx.insert(trx.end(), row.begin(), row.end());
        try_.push_back(labels[img * n + p]);
      }
      if (test) {
        tex.insert(tex.end(), row.begin(), row.end());
        tey.push_back(labels[img * n + p]);
      }
    }
  }
  Matrix<float> train_x(try_.size(), k, std::move(trx)), test_x(tey.size(), k, std::move(tex));
  report.linear = linear_probe(train_x, try_, test_x, tey, {num_classes, cfg.linear_lr, cfg.linear_epochs, 64},
                               RngStream(cfg.seed, "linear-probe"));
  return report;
}

inline std::string metrics_csv_header() { return "iteration,unsup_acc,unsup_miou,linear_acc,linear_miou\n"; }

inline std::string metrics_csv_row(std::uint64_t iteration, const EvalReport& r) {
  char buf[160];
  std::snprintf(buf, sizeof buf, "%llu,%.6f,%.6f,%.6f,%.6f\n", static_cast<unsigned long long>(iteration),
                r.cluster.accuracy, r.cluster.mean_iou, r.linear.accuracy, r.linear.mean_iou);
  return buf;
}

// ---------------------------------------------------------------------------
// Trainer

struct TrainHooks {
  std::ostream* log = nullptr;          // one JSON record per iteration
  std::ostream* metrics_csv = nullptr;  // rows only; the caller writes the header
  std::function<void(const std::string&)> warn;
  std::filesystem::path checkpoint_dir;  // empty: no periodic checkpoints
};

/// Runs the training loop. Every random draw derives from (seed, stream
/// name, iteration), so resuming from a checkpoint reproduces the remaining
/// iterations of an uninterrupted run exactly.
class Trainer {
 public:
  Trainer(TrainConfig cfg, const std::vector<PatchShard>& dataset, TrainHooks hooks = {})
      : cfg_(std::move(cfg)), dataset_(dataset), hooks_(std::move(hooks)) {
    cfg_.validate();
    if (dataset_.empty()) throw InputError("training dataset is empty");
    total_ = cfg_.epochs > 0 ? cfg_.epochs * batches_per_epoch() : cfg_.iterations;
    pool_m_ = cfg_.pool_size;
    if (pool_m_ > dataset_.size()) {
      warn("pool size " + std::to_string(pool_m_) + " exceeds dataset size " + std::to_string(dataset_.size()) +
           "; using " + std::to_string(dataset_.size()));
      pool_m_ = dataset_.size();
    }
    const std::size_t c = dataset_.front().feat_dim;
    params_ = init_head_parameters<float>(c, cfg_.resolved_hidden(), cfg_.embed_dim, RngStream(cfg_.seed, "init"));
    momentum_ = MomentumHead<float>::copy_of(params_.seg, static_cast<float>(cfg_.momentum));
    opt_ = OptimizerState<float>::for_params(params_, {cfg_.lr, cfg_.weight_decay, 0.9, 0.999, 1e-8});
    if (!cfg_.baseline_eq1) pool_ag_ = build_task_agnostic_pool(dataset_, pool_m_, RngStream(cfg_.seed, "pool-ag"));
  }

  Trainer(TrainConfig cfg, const std::vector<PatchShard>& dataset, const Checkpoint& ck, TrainHooks hooks = {})
      : Trainer(std::move(cfg), dataset, std::move(hooks)) {
    if (ck.params.seg.in_dim() != params_.seg.in_dim() || ck.params.seg.out_dim() != params_.seg.out_dim() ||
        ck.params.seg.hidden_dim() != params_.seg.hidden_dim())
      throw InputError("checkpoint dimensions do not match the configuration");
    iteration_ = ck.iteration;
    params_ = ck.params;
    momentum_ = ck.momentum;
    opt_ = ck.optimizer;
    pool_ag_ = ck.pool_ag;
    pool_sp_ = ck.pool_sp;
    renewals_ = ck.renewals;
  }

  std::size_t batches_per_epoch() const {
    return epoch_plan(dataset_.size(), cfg_.batch_size, RngStream(cfg_.seed, "batches").child({0})).size();
  }

  /// One training iteration.
  LossBreakdown step() {
    const std::uint64_t t = iteration_;
    const auto batch = assemble_batch(dataset_, batch_ids(t));
    LossResult<float> res;
    if (cfg_.baseline_eq1) {
      res = self_contrastive_loss(params_, batch.view_a, batch.view_b, cfg_.tau);
    } else {
      GlobalPositiveSets sets;
      sets.ag.positives = mine_positives(batch.view_a, pool_ag_->entries, cfg_.symmetric);
      sample_all_negatives(sets.ag, cfg_.rho, RngStream(cfg_.seed, "negatives-ag").child({t}));
      if (cfg_.ghp_ts) {
        if (RenewalSchedule(cfg_.renewal_period).due(t) || !pool_sp_) {
          pool_sp_ = renew_task_specific_pool(dataset_, momentum_, pool_m_, RngStream(cfg_.seed, "pool-sp").child({t}), t);
          ++renewals_;
        }
        const auto s_mom = momentum_.forward(batch.view_a);
        sets.sp.positives = mine_positives(s_mom, pool_sp_->entries, cfg_.symmetric);
        sample_all_negatives(sets.sp, cfg_.rho, RngStream(cfg_.seed, "negatives-sp").child({t}));
      }
      std::vector<LocalPositiveSelection<float>> local;
      if (cfg_.lhp) local = select_local_batch(batch, dataset_, cfg_.window_radius);
      ObjectiveConfig oc;
      oc.tau = cfg_.tau;
      oc.sigma = cfg_.sigma;
      oc.lambda = lambda(t);
      oc.alpha = cfg_.alpha;
      oc.ghp_sp = cfg_.ghp_ts;
      oc.lhp = cfg_.lhp;
      oc.regularizer = cfg_.regularizer;
      oc.mode = cfg_.loss_prop_mode ? PropagationMode::loss : PropagationMode::gradient;
      res = total_loss(params_, batch.view_a, batch.view_b, sets, local, oc, TermWeights::from(oc));
      if (res.breakdown.all_skipped())
        warn("iteration " + std::to_string(t) + ": every anchor has zero positives; contrastive gradient is zero");
    }
    try {
      adamw_step(params_, res.grad, opt_);
    } catch (const Error& e) {
      throw Error("iteration " + std::to_string(t) + ": " + e.what());
    }
    momentum_update(params_.seg, momentum_);
    ++iteration_;
    log_iteration(t, res.breakdown);
    if (cfg_.checkpoint_every && iteration_ % cfg_.checkpoint_every == 0 && !hooks_.checkpoint_dir.empty())
      write_checkpoint(checkpoint(), hooks_.checkpoint_dir / ("iter_" + std::to_string(iteration_) + ".hpck"));
    if (cfg_.eval_every && iteration_ % cfg_.eval_every == 0 && iteration_ < total_) record_eval();
    return res.breakdown;
  }

  /// Runs to the configured budget (or `until`, if smaller) and returns the
  /// final evaluation when the budget is reached and labels exist.
  std::optional<EvalReport> run(std::optional<std::uint64_t> until = std::nullopt) {
    const std::uint64_t stop = std::min(total_, until.value_or(total_));
    while (iteration_ < stop) step();
    if (iteration_ == total_ && all_labeled()) return record_eval();
    return std::nullopt;
  }

  EvalReport record_eval() {
    auto report = evaluate(params_.seg, dataset_, eval_config());
    history_.emplace_back(iteration_, report);
    if (hooks_.metrics_csv) *hooks_.metrics_csv << metrics_csv_row(iteration_, report) << std::flush;
    return report;
  }

  EvalConfig eval_config() const {
    return {cfg_.cluster_steps, cfg_.cluster_lr, cfg_.linear_epochs, cfg_.linear_lr, cfg_.seed};
  }

  double lambda(std::uint64_t t) const { return LossSchedule{total_, cfg_.ramp, cfg_.alpha, cfg_.tau}.lambda(t); }

  Checkpoint checkpoint() const { return {iteration_, params_, momentum_, opt_, pool_ag_, pool_sp_, renewals_}; }

  bool all_labeled() const {
    return std::all_of(dataset_.begin(), dataset_.end(), [](const PatchShard& s) { return s.has_labels(); });
  }

  std::uint64_t iteration() const { return iteration_; }
  std::uint64_t total_iterations() const { return total_; }
  std::uint64_t renewals() const { return renewals_; }
  std::size_t pool_size() const { return pool_m_; }
  const TrainConfig& config() const { return cfg_; }
  const HeadParameters<float>& params() const { return params_; }
  const MomentumHead<float>& momentum_head() const { return momentum_; }
  const std::optional<ReferencePool>& pool_ag() const { return pool_ag_; }
  const std::optional<ReferencePool>& pool_sp() const { return pool_sp_; }
  const std::vector<std::pair<std::uint64_t, EvalReport>>& history() const { return history_; }

 private:
  const std::vector<std::size_t>& batch_ids(std::uint64_t t) {
    const std::size_t per_epoch = batches_per_epoch_cached();
    const std::uint64_t epoch = t / per_epoch;
    if (!plan_epoch_ || *plan_epoch_ != epoch) {
      plan_ = epoch_plan(dataset_.size(), cfg_.batch_size, RngStream(cfg_.seed, "batches").child({epoch}));
      plan_epoch_ = epoch;
    }
    return plan_[t % per_epoch];
  }

  std::size_t batches_per_epoch_cached() {
    if (!per_epoch_) per_epoch_ = batches_per_epoch();
    return *per_epoch_;
  }

  void log_iteration(std::uint64_t t, const LossBreakdown& b) {
    if (!hooks_.log) return;
    nlohmann::ordered_json rec = {{"iteration", t},
                                  {"lambda", b.lambda},
                                  {"total", b.total},
                                  {"phi_ag", b.phi_ag},
                                  {"psi_ag", b.psi_ag},
                                  {"phi_sp", b.phi_sp},
                                  {"psi_sp", b.psi_sp},
                                  {"regularizer", b.regularizer},
                                  {"anchors_used", b.anchors_used},
                                  {"anchors_skipped", b.anchors_skipped_zero_positive},
                                  {"renewals", renewals_}};
    *hooks_.log << rec.dump() << '\n';
  }

  void warn(const std::string& msg) {
    if (hooks_.warn) hooks_.warn(msg);
  }

  TrainConfig cfg_;
  const std::vector<PatchShard>& dataset_;
  TrainHooks hooks_;
  std::uint64_t total_ = 0;
  std::size_t pool_m_ = 0;
  std::uint64_t iteration_ = 0;
  std::uint64_t renewals_ = 0;
  HeadParameters<float> params_;
  MomentumHead<float> momentum_;
  OptimizerState<float> opt_;
  std::optional<ReferencePool> pool_ag_;
  std::optional<ReferencePool> pool_sp_;
  std::optional<std::size_t> per_epoch_;
  std::optional<std::uint64_t> plan_epoch_;
  std::vector<std::vector<std::size_t>> plan_;
  std::vector<std::pair<std::uint64_t, EvalReport>> history_;
};

}  // namespace hp
