#pragma once

// Training loop with per-epoch validation, best-Dice checkpointing and resume.
//
// Files written to the output directory (when one is given):
//   metrics.csv  one row per optimizer step
//   epochs.csv   one row per epoch with aux-head validation metrics
//   model.ckpt   parameters of the best validation-Dice epoch
//   last.ckpt    parameters and optimizer moments after the latest epoch
//   config.txt   the effective configuration

#include <filesystem>
#include <fstream>
#include <memory>
#include <ostream>
#include <random>
#include <string>
#include <vector>

#include "topodiff/harness/pipeline.hpp"
#include "topodiff/losses.hpp"
#include "topodiff/tensor/optim.hpp"

namespace topodiff::harness {

// SplitMix64 finaliser of (seed, stream).
inline std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t stream) {
  std::uint64_t z = seed + 0x9E3779B97F4A7C15ull * (stream + 1);
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
  return z ^ (z >> 31);
}

struct StepRow {
  long epoch = 0;
  long step = 0;  // global optimizer step, 1-based
  double lr = 0.0;
  LossReport report;
};

struct EpochRow {
  long epoch = 0;
  EvalSummary val;
  bool improved = false;
};

struct TrainOptions {
  std::string out_dir;  // empty: keep everything in memory
  bool resume = false;
  std::ostream* log = nullptr;
  long stop_after = -1;  // return once this many epochs are complete (interrupted-run simulation)
};

struct TrainResult {
  std::vector<StepRow> steps;
  std::vector<EpochRow> epochs;
  double best_val_dice = -1.0;
  long best_epoch = -1;
  std::unique_ptr<Model> model;  // holds the best-epoch parameters
};

inline const char* kMetricsHeader =
    "epoch,step,lr,total,denoising_mse,denoising_dice,aux_dice,aux_focal,topo,w_epoch,tdc_evaluated,tdc_skipped\n";
inline const char* kEpochsHeader = "epoch,val_dice,val_iou,val_hd95,val_hd95_undefined,best\n";

inline std::string metrics_line(const StepRow& r) {
  const auto& p = r.report;
  return std::to_string(r.epoch) + ',' + std::to_string(r.step) + ',' + fmt(r.lr) + ',' + fmt(p.total) + ',' +
         fmt(p.denoising_mse) + ',' + fmt(p.denoising_dice) + ',' + fmt(p.aux_dice) + ',' + fmt(p.aux_focal) + ',' +
         fmt(p.topo) + ',' + fmt(p.w_epoch) + ',' + std::to_string(p.tdc_evaluated) + ',' +
         std::to_string(p.tdc_skipped) + '\n';
}

inline std::string epoch_line(const EpochRow& r) {
  return std::to_string(r.epoch) + ',' + fmt(r.val.dice) + ',' + fmt(r.val.iou) + ',' + fmt(r.val.hd95) + ',' +
         std::to_string(r.val.hd95_undefined) + ',' + (r.improved ? "1" : "0") + '\n';
}

inline std::string exact(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

namespace detail {

inline std::string meta_value(const std::string& meta, const std::string& key) {
  std::istringstream is(meta);
  std::string line;
  while (std::getline(is, line)) {
    const auto eq = line.find('=');
    if (eq == std::string::npos) continue;
    if (harness::detail::trim(line.substr(0, eq)) == key) return harness::detail::trim(line.substr(eq + 1));
  }
  throw DataError("checkpoint meta lacks '" + key + "'");
}

}  // namespace detail

// One optimisation step on a batch; returns the loss report.
struct StepInputs {
  FTensor x0, image;
  std::vector<long> t;
  FTensor eps;
};

inline WeightedLoss<float> compute_loss(const Model& model, const StepInputs& in, const RunConfig& cfg,
                                        const NoiseSchedule& sched, double w_epoch) {
  const auto& w = cfg.weights;
  const auto x_t = q_sample(in.x0, in.t, in.eps, sched);
  const auto out = model(x_t, in.t, in.image);
  const auto x0_implied = predict_x0(x_t, in.t, out.eps_hat, sched);
  HybridParts<float> parts;
  parts.denoising = denoising_loss(in.eps, out.eps_hat, in.x0, x0_implied, static_cast<float>(w.smooth));
  parts.aux_dice = dice_loss(sigmoid(out.aux_logits), in.x0, static_cast<float>(w.smooth));
  parts.aux_focal = focal_loss(out.aux_logits, in.x0, static_cast<float>(w.focal_gamma));
  auto loss = hybrid_loss(parts, w);
  if (cfg.train.mode == TrainMode::Enhanced) {
    loss.report.w_epoch = w_epoch;
    if (w_epoch > 0) {
      const auto current = clamp(x0_implied, 0.0f, 1.0f);
      const auto candidates = iota_range(0, in.t.size());
      const auto tdc = tdc_term(model, in.x0, in.t, in.eps, in.image, current, sched, cfg.tdc, candidates);
      loss = enhanced_loss(loss, current, tdc, w_epoch, cfg.tdc);
    }
  }
  return loss;
}

inline TrainResult train(const ConfigMap& cmap, const DataSplit& data, const TrainOptions& opt = {}) {
  namespace fs = std::filesystem;
  const RunConfig cfg = to_run_config(cmap);
  const auto sched = cfg.schedule.build();
  const auto& train_set = data.train;
  if (train_set.empty()) throw ConfigError("training split is empty");
  TrainResult result;
  result.model = std::make_unique<Model>(cfg.model, derive_seed(cfg.seed, 1));
  Model& model = *result.model;
  AdamWState<float> adam;
  adam.init(model.params());
  std::vector<std::vector<float>> best = model.params().snapshot();

  const std::size_t bs = cfg.train.batch_size;
  const long steps_per_epoch = static_cast<long>((train_set.size() + bs - 1) / bs);
  const long horizon = steps_per_epoch * cfg.train.epochs;
  long start_epoch = 0;

  const bool to_disk = !opt.out_dir.empty();
  const fs::path dir = opt.out_dir;
  if (to_disk) fs::create_directories(dir);

  if (opt.resume) {
    if (!to_disk) throw ConfigError("resume needs an output directory");
    const auto ck = load_checkpoint((dir / "last.ckpt").string());
    import_params(model.params(), ck);
    auto& entries = model.params().entries();
    for (std::size_t k = 0; k < entries.size(); ++k) {
      const auto* m = ck.find("adam.m/" + entries[k].name);
      const auto* v = ck.find("adam.v/" + entries[k].name);
      if (!m || !v) throw DataError("last.ckpt lacks optimizer state for " + entries[k].name);
      adam.m[k] = m->values;
      adam.v[k] = v->values;
    }
    adam.step = std::stol(detail::meta_value(ck.meta, "ckpt.adam_step"));
    start_epoch = std::stol(detail::meta_value(ck.meta, "ckpt.next_epoch"));
    result.best_val_dice = std::stod(detail::meta_value(ck.meta, "ckpt.best_dice"));
    result.best_epoch = std::stol(detail::meta_value(ck.meta, "ckpt.best_epoch"));
    if (result.best_epoch >= 0) {
      Model tmp(cfg.model, 0);
      import_params(tmp.params(), load_checkpoint((dir / "model.ckpt").string()));
      best = tmp.params().snapshot();
    }
  } else if (to_disk) {
    std::ofstream((dir / "metrics.csv").string(), std::ios::trunc) << kMetricsHeader;
    std::ofstream((dir / "epochs.csv").string(), std::ios::trunc) << kEpochsHeader;
    std::ofstream((dir / "config.txt").string(), std::ios::trunc) << cmap.to_text();
  }

  AdamWHyper hyper = cfg.optim;
  for (long epoch = start_epoch; epoch < cfg.train.epochs; ++epoch) {
    if (opt.stop_after >= 0 && epoch >= opt.stop_after) break;
    std::mt19937_64 rng(derive_seed(cfg.seed, 1000 + static_cast<std::uint64_t>(epoch)));
    std::vector<std::size_t> order = iota_range(0, train_set.size());
    std::shuffle(order.begin(), order.end(), rng);
    const double w_epoch = cfg.train.mode == TrainMode::Enhanced ? cfg.tdc.w_epoch(epoch, cfg.train.epochs) : 0.0;
    std::string metrics_chunk;
    for (long b = 0; b < steps_per_epoch; ++b) {
      const std::size_t lo = static_cast<std::size_t>(b) * bs;
      const std::vector<std::size_t> idx(order.begin() + static_cast<long>(lo),
                                         order.begin() + static_cast<long>(std::min(train_set.size(), lo + bs)));
      StepInputs in;
      in.x0 = stack_fields(train_set, idx, true);
      in.image = stack_fields(train_set, idx, false);
      std::uniform_int_distribution<long> tdist(1, sched.steps());
      for (std::size_t i = 0; i < idx.size(); ++i) in.t.push_back(tdist(rng));
      std::normal_distribution<double> normal(0.0, 1.0);
      std::vector<float> e(in.x0.numel());
      for (auto& v : e) v = static_cast<float>(normal(rng));
      in.eps = FTensor::from_data(in.x0.shape(), std::move(e));

      model.params().zero_grad();
      const auto loss = compute_loss(model, in, cfg, sched, w_epoch);
      const long global_step = epoch * steps_per_epoch + b;
      if (!std::isfinite(loss.report.total)) {
        throw NumericalError("non-finite loss at epoch " + std::to_string(epoch) + ", step " + std::to_string(global_step + 1));
      }
      backward(loss.total);
      hyper.lr = cosine_lr(cfg.optim.lr, cfg.train.lr_min, global_step, horizon);
      adamw_step(model.params(), adam, hyper);
      StepRow row{epoch, global_step + 1, hyper.lr, loss.report};
      metrics_chunk += metrics_line(row);
      result.steps.push_back(row);
    }

    EpochRow er;
    er.epoch = epoch;
    const auto& val = eval_split(data, cfg);
    if (!val.empty()) {
      er.val = summarize_rows(evaluate_masks(val, infer_aux(model, val, cfg)));
    } else {
      er.val.dice = 0.0;
    }
    if (er.val.dice > result.best_val_dice) {
      result.best_val_dice = er.val.dice;
      result.best_epoch = epoch;
      best = model.params().snapshot();
      er.improved = true;
    }
    result.epochs.push_back(er);
    if (opt.log) {
      const auto& last = result.steps.back().report;
      *opt.log << "epoch " << epoch + 1 << "/" << cfg.train.epochs << " loss " << fmt(last.total) << " val_dice "
               << fmt(er.val.dice) << " val_hd95 " << fmt(er.val.hd95) << (er.improved ? " *" : "") << std::endl;
    }
    if (to_disk) {
      std::ofstream((dir / "metrics.csv").string(), std::ios::app) << metrics_chunk;
      std::ofstream((dir / "epochs.csv").string(), std::ios::app) << epoch_line(er);
      if (er.improved) {
        save_checkpoint((dir / "model.ckpt").string(),
                        model_checkpoint(model, cmap, "ckpt.epoch = " + std::to_string(epoch) + "\n"));
      }
      auto ck = model_checkpoint(model, cmap,
                                 "ckpt.next_epoch = " + std::to_string(epoch + 1) + "\nckpt.adam_step = " +
                                     std::to_string(adam.step) + "\nckpt.best_dice = " + exact(result.best_val_dice) +
                                     "\nckpt.best_epoch = " + std::to_string(result.best_epoch) + "\n");
      const auto& entries = model.params().entries();
      for (std::size_t k = 0; k < entries.size(); ++k) {
        ck.arrays.push_back({"adam.m/" + entries[k].name, entries[k].tensor.shape(), adam.m[k]});
        ck.arrays.push_back({"adam.v/" + entries[k].name, entries[k].tensor.shape(), adam.v[k]});
      }
      save_checkpoint((dir / "last.ckpt").string(), ck);
    }
  }
  model.params().restore(best);
  return result;
}

}  // namespace topodiff::harness
