// hp: train, evaluate and inspect hidden-positive segmentation heads on
// precomputed patch-feature shards.

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <memory>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "hp/hp.hpp"

namespace fs = std::filesystem;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitUser = 1;
constexpr int kExitInternal = 2;

/// Options whose values override the preset only when actually given on the
/// command line or in the config file.
class Overrides {
 public:
  template <typename T>
  CLI::Option* add(CLI::App* app, const std::string& name, T& field, const std::string& desc) {
    auto storage = std::make_shared<T>(field);
    auto* opt = app->add_option(name, *storage, desc);
    apply_.push_back([opt, storage, &field] {
      if (opt->count() > 0) field = *storage;
    });
    return opt;
  }

  CLI::Option* flag(CLI::App* app, const std::string& name, bool& field, const std::string& desc) {
    auto storage = std::make_shared<bool>(field);
    auto* opt = app->add_option(name, *storage, desc + " (true|false)");
    apply_.push_back([opt, storage, &field] {
      if (opt->count() > 0) field = *storage;
    });
    return opt;
  }

  void apply() const {
    for (const auto& f : apply_) f();
  }

 private:
  std::vector<std::function<void()>> apply_;
};

void print_warning(const std::string& msg) { std::cerr << "warning: " << msg << '\n'; }

int cmd_synth(const hp::SyntheticSpec& spec, const fs::path& out) {
  fs::create_directories(out);
  const auto shards = hp::generate_synthetic(spec);
  for (std::size_t i = 0; i < shards.size(); ++i) {
    char name[32];
    std::snprintf(name, sizeof name, "img_%05zu.hpfs", i);
    hp::write_shard(shards[i], out / name);
  }
  std::cout << "wrote " << shards.size() << " shards to " << out.string() << '\n';
  return kExitOk;
}

int cmd_inspect(const fs::path& file) {
  const auto h = hp::read_shard_header(file);
  std::cout << "file: " << file.string() << '\n'
            << "version: " << h.version << '\n'
            << "H: " << h.grid_h << '\n'
            << "W: " << h.grid_w << '\n'
            << "C: " << h.feat_dim << '\n'
            << "labels: " << (h.has_labels ? "yes" : "no") << '\n'
            << "num_classes: " << h.num_classes << '\n';
  return kExitOk;
}

int cmd_train(const hp::TrainConfig& cfg, const fs::path& data, const fs::path& out, const std::string& resume,
              bool dump_only) {
  if (dump_only) {
    std::cout << hp::config_to_json(cfg).dump(2) << '\n';
    return kExitOk;
  }
  if (data.empty()) throw hp::InputError("train: --data is required");
  const auto dataset = hp::load_shard_directory(data);
  if (dataset.empty()) throw hp::InputError("train: no .hpfs files in " + data.string());

  fs::create_directories(out);
  {
    std::ofstream cf(out / "config.json");
    cf << hp::config_to_json(cfg).dump(2) << '\n';
  }
  const bool resuming = !resume.empty();
  const auto mode = resuming ? std::ios::app : std::ios::trunc;
  std::ofstream log(out / "log.jsonl", std::ios::out | mode);
  const bool fresh_csv = !resuming || !fs::exists(out / "metrics.csv");
  std::ofstream csv(out / "metrics.csv", std::ios::out | (fresh_csv ? std::ios::trunc : std::ios::app));
  if (!log || !csv) throw hp::InputError("train: cannot write to " + out.string());
  if (fresh_csv) csv << hp::metrics_csv_header();

  hp::TrainHooks hooks{&log, &csv, print_warning, out};
  std::unique_ptr<hp::Trainer> trainer;
  if (resuming)
    trainer = std::make_unique<hp::Trainer>(cfg, dataset, hp::read_checkpoint(resume), hooks);
  else
    trainer = std::make_unique<hp::Trainer>(cfg, dataset, hooks);

  const auto report = trainer->run();
  hp::write_checkpoint(trainer->checkpoint(), out / "final.hpck");
  std::cout << "trained " << trainer->iteration() << " iterations";
  if (report)
    std::cout << "; unsup acc " << report->cluster.accuracy << " miou " << report->cluster.mean_iou << "; linear acc "
              << report->linear.accuracy << " miou " << report->linear.mean_iou;
  else
    std::cout << "; dataset is unlabeled, evaluation skipped";
  std::cout << '\n';
  return kExitOk;
}

int cmd_eval(const fs::path& checkpoint, const fs::path& data, const fs::path& csv_path, const hp::EvalConfig& ecfg) {
  const auto ck = hp::read_checkpoint(checkpoint);
  const auto dataset = hp::load_shard_directory(data);
  if (dataset.empty()) throw hp::InputError("eval: no .hpfs files in " + data.string());
  const auto report = hp::evaluate(ck.params.seg, dataset, ecfg);
  const auto row = hp::metrics_csv_row(ck.iteration, report);
  if (!csv_path.empty()) {
    std::ofstream f(csv_path, std::ios::trunc);
    if (!f) throw hp::InputError("eval: cannot write " + csv_path.string());
    f << hp::metrics_csv_header() << row;
  }
  std::cout << hp::metrics_csv_header() << row;
  return kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Hidden-positive unsupervised segmentation heads on precomputed patch features"};
  app.require_subcommand(1);
  app.set_config("--config", "", "Read options from a TOML/INI file (flags override it)");

  // synth
  hp::SyntheticSpec spec;
  fs::path synth_out;
  auto* synth = app.add_subcommand("synth", "Generate a synthetic labeled dataset");
  synth->add_option("--classes", spec.num_classes, "Number of classes")->capture_default_str();
  synth->add_option("--images", spec.num_images, "Number of images")->capture_default_str();
  synth->add_option("--grid-h", spec.grid_h, "Patch grid height")->capture_default_str();
  synth->add_option("--grid-w", spec.grid_w, "Patch grid width")->capture_default_str();
  synth->add_option("--dim", spec.feat_dim, "Feature dimension C")->capture_default_str();
  synth->add_option("--separation", spec.separation, "Class-center norm")->capture_default_str();
  synth->add_option("--noise", spec.noise, "Per-coordinate within-class noise std")->capture_default_str();
  synth->add_option("--jitter", spec.jitter, "Per-coordinate view-b jitter std")->capture_default_str();
  synth->add_option("--regions", spec.regions_per_image, "Class regions per image")->capture_default_str();
  synth->add_option("--seed", spec.seed, "Random seed")->capture_default_str();
  synth->add_option("--out", synth_out, "Output directory")->required();

  // inspect
  fs::path inspect_file;
  auto* inspect = app.add_subcommand("inspect", "Print an HPFS shard header");
  inspect->add_option("file", inspect_file, "Shard file")->required();

  // train
  hp::TrainConfig defaults;
  std::string preset = "synth";
  fs::path data_dir, out_dir = "run";
  std::string resume;
  bool dump_config = false;
  std::string ramp = "linear";
  Overrides ov;
  auto* train = app.add_subcommand("train", "Train segmentation heads");
  train->add_option("--preset", preset, "Hyperparameter preset")
      ->check(CLI::IsMember({"coco", "cityscapes", "potsdam", "synth"}))
      ->capture_default_str();
  train->add_option("--data", data_dir, "Directory of .hpfs shards");
  train->add_option("--out", out_dir, "Output directory")->capture_default_str();
  train->add_option("--resume", resume, "Resume from a checkpoint");
  train->add_flag("--dump-config", dump_config, "Print the resolved configuration and exit");
  ov.add(train, "--seed", defaults.seed, "Random seed");
  ov.add(train, "--batch-size", defaults.batch_size, "Images per mini-batch (B)");
  ov.add(train, "--embed-dim", defaults.embed_dim, "Segmentation feature dimension (K)");
  ov.add(train, "--hidden-dim", defaults.hidden_dim, "MLP hidden width (0 = K)");
  ov.add(train, "--pool-size", defaults.pool_size, "Reference pool size (M)");
  ov.add(train, "--tau", defaults.tau, "Contrastive temperature");
  ov.add(train, "--rho", defaults.rho, "Negative sampling percentage");
  ov.add(train, "--sigma", defaults.sigma, "Attention scale for local mixing");
  ov.add(train, "--window-radius", defaults.window_radius, "Local window radius");
  ov.add(train, "--momentum", defaults.momentum, "EMA coefficient of the momentum head");
  ov.add(train, "--lr", defaults.lr, "AdamW learning rate");
  ov.add(train, "--weight-decay", defaults.weight_decay, "AdamW weight decay");
  ov.add(train, "--iterations", defaults.iterations, "Iteration budget (when epochs = 0)");
  ov.add(train, "--epochs", defaults.epochs, "Epoch budget (overrides iterations)");
  ov.add(train, "--renewal-period", defaults.renewal_period, "Iterations between task-specific pool renewals");
  ov.add(train, "--alpha", defaults.alpha, "Regularizer weight");
  ov.add(train, "--lambda-ramp", ramp, "Lambda schedule shape")->check(CLI::IsMember({"linear", "cosine"}));
  ov.flag(train, "--ghp-ts", defaults.ghp_ts, "Task-specific global hidden positives");
  ov.flag(train, "--lhp", defaults.lhp, "Local hidden positives");
  ov.flag(train, "--symmetric", defaults.symmetric, "Symmetric positive assignment");
  ov.flag(train, "--regularizer", defaults.regularizer, "Consistency regularizer");
  ov.flag(train, "--baseline-eq1", defaults.baseline_eq1, "Self-contrastive baseline only");
  ov.flag(train, "--loss-prop", defaults.loss_prop_mode, "Loss propagation instead of gradient propagation");
  ov.add(train, "--checkpoint-every", defaults.checkpoint_every, "Checkpoint cadence in iterations (0 = final only)");
  ov.add(train, "--eval-every", defaults.eval_every, "Evaluation cadence in iterations (0 = final only)");
  ov.add(train, "--cluster-steps", defaults.cluster_steps, "Cluster probe steps");
  ov.add(train, "--linear-epochs", defaults.linear_epochs, "Linear probe epochs");

  // eval
  fs::path eval_ckpt, eval_data, eval_csv;
  hp::EvalConfig ecfg;
  auto* eval = app.add_subcommand("eval", "Evaluate a checkpoint with the cluster and linear probes");
  eval->add_option("--checkpoint", eval_ckpt, "Checkpoint file")->required();
  eval->add_option("--data", eval_data, "Directory of labeled .hpfs shards")->required();
  eval->add_option("--out", eval_csv, "Metrics CSV path");
  eval->add_option("--seed", ecfg.seed, "Probe seed")->capture_default_str();
  eval->add_option("--cluster-steps", ecfg.cluster_steps, "Cluster probe steps")->capture_default_str();
  eval->add_option("--linear-epochs", ecfg.linear_epochs, "Linear probe epochs")->capture_default_str();

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return kExitUser;
  }

  try {
    if (synth->parsed()) return cmd_synth(spec, synth_out);
    if (inspect->parsed()) return cmd_inspect(inspect_file);
    if (eval->parsed()) return cmd_eval(eval_ckpt, eval_data, eval_csv, ecfg);
    if (train->parsed()) {
      hp::TrainConfig cfg;
      hp::apply_preset(cfg, preset);
      defaults = cfg;  // unset overrides keep the preset value
      ov.apply();
      cfg = defaults;
      cfg.preset = preset;
      cfg.ramp = ramp == "cosine" ? hp::RampShape::cosine : hp::RampShape::linear;
      cfg.validate();
      return cmd_train(cfg, data_dir, out_dir, resume, dump_config);
    }
  } catch (const hp::InputError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kExitUser;
  } catch (const std::exception& e) {
    std::cerr << "internal error: " << e.what() << '\n';
    return kExitInternal;
  }
  return kExitUser;
}
