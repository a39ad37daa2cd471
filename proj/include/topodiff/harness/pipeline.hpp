#pragma once

// Dataset assembly, batching, model checkpoints, the two inference modes and
// per-sample evaluation.

#include <cstdio>
#include <fstream>
#include <memory>
#include <random>
#include <string>
#include <vector>

#include "topodiff/data.hpp"
#include "topodiff/harness/config.hpp"
#include "topodiff/metrics.hpp"
#include "topodiff/nets/denoiser.hpp"
#include "topodiff/schedule.hpp"
#include "topodiff/tensor/params.hpp"

namespace topodiff::harness {

using Model = nets::Denoiser<float>;
using FTensor = Tensor<float>;

inline DataSplit load_dataset(const RunConfig& cfg) {
  std::vector<Sample> all;
  if (cfg.data.source == "synthetic") {
    all = generate_synthetic(cfg.data.synth, cfg.data.count);
  } else {
    all = load_manifest(cfg.data.manifest, cfg.model.image_size);
  }
  auto parts = split(all, cfg.data.split, cfg.data.split_seed);
  if (parts.train.empty()) throw ConfigError("training split is empty");
  return parts;
}

inline const std::vector<Sample>& eval_split(const DataSplit& d, const RunConfig& cfg) {
  return cfg.infer.eval_split == "test" ? d.test : d.val;
}

// Stacks fields of the selected samples into [B, 1, H, W].
inline FTensor stack_fields(const std::vector<Sample>& samples, const std::vector<std::size_t>& idx, bool masks) {
  const std::size_t h = samples.front().mask.height, w = samples.front().mask.width;
  std::vector<float> buf;
  buf.reserve(idx.size() * h * w);
  for (std::size_t i : idx) {
    const auto& f = masks ? samples[i].mask : samples[i].image;
    if (f.height != h || f.width != w) throw DataError("sample " + samples[i].id + " has a different size");
    for (double v : f.values) buf.push_back(static_cast<float>(v));
  }
  return FTensor::from_data({idx.size(), 1, h, w}, std::move(buf));
}

inline std::vector<std::size_t> iota_range(std::size_t begin, std::size_t end) {
  std::vector<std::size_t> v;
  for (std::size_t i = begin; i < end; ++i) v.push_back(i);
  return v;
}

// --------------------------------------------------------------- checkpoints

inline CheckpointData model_checkpoint(const Model& model, const ConfigMap& cfg, const std::string& extra_meta = "") {
  CheckpointData ck;
  ck.meta = cfg.to_text() + extra_meta;
  ck.arrays = export_params(model.params());
  return ck;
}

struct LoadedModel {
  ConfigMap config;
  RunConfig run;
  std::unique_ptr<Model> model;
};

// Rebuilds the network described by the checkpoint's configuration and loads
// its weights. `overrides` may adjust non-model keys (for example inference
// settings); model keys always come from the checkpoint.
inline LoadedModel load_model(const std::string& path, const std::vector<std::string>& overrides = {}) {
  const auto ck = load_checkpoint(path);
  LoadedModel out;
  std::string config_text;
  std::istringstream is(ck.meta);
  std::string line;
  while (std::getline(is, line)) {
    if (line.rfind("ckpt.", 0) == 0) continue;
    config_text += line + "\n";
  }
  out.config.parse_text(config_text, path + " (meta)");
  for (const auto& o : overrides) {
    if (o.rfind("model.", 0) == 0) throw ConfigError("model keys cannot be overridden when loading a checkpoint: " + o);
    out.config.apply_override(o);
  }
  out.run = to_run_config(out.config);
  out.model = std::make_unique<Model>(out.run.model, 0);
  import_params(out.model->params(), ck);
  return out;
}

// ----------------------------------------------------------------- inference

// One network evaluation per image: mask channel zero at timestep aux_t;
// sigmoid(aux logits) >= threshold.
inline std::vector<BinaryMask> infer_aux(const Model& model, const std::vector<Sample>& samples, const RunConfig& cfg) {
  NoGradGuard guard;
  std::vector<BinaryMask> out;
  const std::size_t n = samples.size(), bs = cfg.infer.batch_size;
  for (std::size_t b = 0; b < n; b += bs) {
    const auto idx = iota_range(b, std::min(n, b + bs));
    const auto image = stack_fields(samples, idx, false);
    FTensor x(image.shape(), 0.0f);
    const std::vector<long> t(idx.size(), cfg.infer.aux_t);
    const auto res = model(x, t, image);
    const std::size_t plane = image.numel() / idx.size();
    for (std::size_t k = 0; k < idx.size(); ++k) {
      BinaryMask m(image.size(2), image.size(3));
      for (std::size_t p = 0; p < plane; ++p) {
        m.bits[p] = stable_sigmoid(res.aux_logits[k * plane + p]) >= cfg.infer.threshold ? 1 : 0;
      }
      out.push_back(std::move(m));
    }
  }
  return out;
}

// Ancestral sampling from x_T ~ N(0, I) down to t = 1, conditioning on the
// image; the final estimate is clamped to [0, 1] and thresholded. Image i uses
// its own generator seeded with (seed, i), so batching does not change results.
inline std::vector<BinaryMask> sample_full(const Model& model, const std::vector<Sample>& samples,
                                           const NoiseSchedule& sched, std::uint64_t seed, const RunConfig& cfg) {
  NoGradGuard guard;
  std::vector<BinaryMask> out;
  const std::size_t n = samples.size(), bs = cfg.infer.batch_size;
  for (std::size_t b = 0; b < n; b += bs) {
    const auto idx = iota_range(b, std::min(n, b + bs));
    const auto image = stack_fields(samples, idx, false);
    const auto cond = model.condition(image);
    const std::size_t plane = image.numel() / idx.size();
    std::vector<std::mt19937_64> rngs;
    for (std::size_t i : idx) {
      std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                        static_cast<std::uint32_t>(i), 0x5a3u};
      rngs.emplace_back(seq);
    }
    std::normal_distribution<double> normal(0.0, 1.0);
    std::vector<float> x(image.numel());
    for (std::size_t k = 0; k < idx.size(); ++k)
      for (std::size_t p = 0; p < plane; ++p) x[k * plane + p] = static_cast<float>(normal(rngs[k]));
    std::vector<float> z(x.size(), 0.0f);
    for (long t = sched.steps(); t >= 1; --t) {
      const auto xt = FTensor::from_data(image.shape(), x);
      const auto res = model.forward(xt, std::vector<long>(idx.size(), t), cond);
      if (t > 1) {
        for (std::size_t k = 0; k < idx.size(); ++k)
          for (std::size_t p = 0; p < plane; ++p) z[k * plane + p] = static_cast<float>(normal(rngs[k]));
      } else {
        std::fill(z.begin(), z.end(), 0.0f);
      }
      x = reverse_step<float>(x, res.eps_hat.data(), t, z, sched);
    }
    for (std::size_t k = 0; k < idx.size(); ++k) {
      BinaryMask m(image.size(2), image.size(3));
      for (std::size_t p = 0; p < plane; ++p) {
        m.bits[p] = std::clamp(x[k * plane + p], 0.0f, 1.0f) >= cfg.infer.threshold ? 1 : 0;
      }
      out.push_back(std::move(m));
    }
  }
  return out;
}

// ---------------------------------------------------------------- evaluation

struct EvalRow {
  std::string id;
  EvalResult result;
};

inline std::vector<EvalRow> evaluate_masks(const std::vector<Sample>& samples, const std::vector<BinaryMask>& preds) {
  if (samples.size() != preds.size()) throw ContractError("prediction count does not match sample count");
  std::vector<EvalRow> rows;
  for (std::size_t i = 0; i < samples.size(); ++i) {
    rows.push_back({samples[i].id, evaluate(preds[i], to_mask(samples[i].mask))});
  }
  return rows;
}

inline EvalSummary summarize_rows(const std::vector<EvalRow>& rows) {
  std::vector<EvalResult> r;
  for (const auto& row : rows) r.push_back(row.result);
  return summarize(r);
}

inline std::string fmt(double v) {
  if (std::isnan(v)) return "nan";
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.9g", v);
  return buf;
}

inline std::string fmt(const std::optional<double>& v) { return v ? fmt(*v) : "nan"; }

// id,dice,iou,hd95 per sample, then a "mean" row.
inline void write_eval_csv(const std::string& path, const std::vector<EvalRow>& rows) {
  std::ofstream os(path, std::ios::trunc);
  if (!os) throw DataError("cannot write " + path);
  os << "id,dice,iou,hd95\n";
  for (const auto& r : rows) os << r.id << ',' << fmt(r.result.dice) << ',' << fmt(r.result.iou) << ',' << fmt(r.result.hd95) << '\n';
  const auto s = summarize_rows(rows);
  os << "mean," << fmt(s.dice) << ',' << fmt(s.iou) << ',' << fmt(s.hd95) << '\n';
}

inline void write_masks(const std::string& dir, const std::vector<Sample>& samples, const std::vector<BinaryMask>& masks) {
  std::filesystem::create_directories(dir);
  for (std::size_t i = 0; i < masks.size(); ++i) {
    write_pgm((std::filesystem::path(dir) / (samples[i].id + ".pgm")).string(), field_to_image(to_field(masks[i])));
  }
}

}  // namespace topodiff::harness
