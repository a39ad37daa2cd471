#pragma once

// Named-variant ablation runner. Every variant is a set of configuration
// overrides applied on top of the base configuration; all variants share the
// dataset and the list of seeds.
//
//   aux-only   loss.alpha = 0 (the noise head receives no gradient)
//   acb-off    model.use_acb = false (no encoder tokens, no cross-attention)
//   hybrid     train.mode = hybrid
//   enhanced   train.mode = enhanced
//   k<N>       train.mode = enhanced, loss.tdc_k = N  (N >= 1)

#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>
#include <ostream>
#include <string>
#include <vector>

#include "topodiff/harness/train.hpp"

namespace topodiff::harness {

inline std::vector<std::string> variant_overrides(const std::string& name) {
  if (name == "aux-only") return {"loss.alpha=0"};
  if (name == "acb-off") return {"model.use_acb=false"};
  if (name == "hybrid") return {"train.mode=hybrid"};
  if (name == "enhanced") return {"train.mode=enhanced"};
  if (name.size() > 1 && name[0] == 'k' && name.find_first_not_of("0123456789", 1) == std::string::npos &&
      name.size() < 8) {
    const long k = std::stol(name.substr(1));
    if (k >= 1) return {"train.mode=enhanced", "loss.tdc_k=" + std::to_string(k)};
  }
  throw ConfigError("unknown ablation variant '" + name + "' (known: aux-only, acb-off, hybrid, enhanced, k<N>)");
}

struct AblationRow {
  std::string variant;
  std::uint64_t seed = 0;
  EvalSummary summary;
  long best_epoch = -1;
};

struct VariantStats {
  std::string variant;
  std::size_t runs = 0;
  double dice_mean = 0, dice_std = 0;
  double iou_mean = 0, iou_std = 0;
  double hd95_mean = 0, hd95_std = 0;
};

namespace detail {

inline void mean_std(const std::vector<double>& v, double& mean, double& sd) {
  mean = 0;
  sd = 0;
  if (v.empty()) {
    mean = sd = std::nan("");
    return;
  }
  for (double x : v) mean += x;
  mean /= static_cast<double>(v.size());
  if (v.size() > 1) {
    for (double x : v) sd += (x - mean) * (x - mean);
    sd = std::sqrt(sd / static_cast<double>(v.size() - 1));
  }
}

}  // namespace detail

inline ConfigMap variant_config(const ConfigMap& base, const std::string& variant, std::uint64_t seed) {
  ConfigMap m = base;
  for (const auto& o : variant_overrides(variant)) m.apply_override(o);
  m.set("run.seed", std::to_string(seed));
  return m;
}

// Trains every (variant, seed) pair and evaluates the best-epoch model with
// aux-head inference on the configured evaluation split. When `out_dir` is
// nonempty, each run writes its training files to <out_dir>/<variant>/seed<s>.
inline std::vector<AblationRow> run_ablation(const ConfigMap& base, const DataSplit& data, const std::string& out_dir = "",
                                             std::ostream* log = nullptr) {
  const RunConfig base_cfg = to_run_config(base);
  for (const auto& v : base_cfg.ablate.variants) to_run_config(variant_config(base, v, 0));

  std::vector<AblationRow> rows;
  for (const auto& variant : base_cfg.ablate.variants) {
    for (auto seed : base_cfg.ablate.seeds) {
      const ConfigMap m = variant_config(base, variant, seed);
      const RunConfig cfg = to_run_config(m);
      TrainOptions opt;
      if (!out_dir.empty()) {
        opt.out_dir = (std::filesystem::path(out_dir) / variant / ("seed" + std::to_string(seed))).string();
      }
      const auto res = train(m, data, opt);
      const auto& split = eval_split(data, cfg);
      AblationRow row{variant, seed, {}, res.best_epoch};
      if (!split.empty()) row.summary = summarize_rows(evaluate_masks(split, infer_aux(*res.model, split, cfg)));
      if (log) {
        *log << "ablate " << variant << " seed " << seed << " dice " << fmt(row.summary.dice) << " hd95 "
             << fmt(row.summary.hd95) << std::endl;
      }
      rows.push_back(row);
    }
  }
  return rows;
}

// Per-variant mean and sample standard deviation, in first-appearance order.
inline std::vector<VariantStats> variant_stats(const std::vector<AblationRow>& rows) {
  std::vector<std::string> order;
  std::map<std::string, std::vector<const AblationRow*>> groups;
  for (const auto& r : rows) {
    if (!groups.count(r.variant)) order.push_back(r.variant);
    groups[r.variant].push_back(&r);
  }
  std::vector<VariantStats> out;
  for (const auto& name : order) {
    std::vector<double> d, i, h;
    for (const auto* r : groups[name]) {
      d.push_back(r->summary.dice);
      i.push_back(r->summary.iou);
      if (!std::isnan(r->summary.hd95)) h.push_back(r->summary.hd95);
    }
    VariantStats s;
    s.variant = name;
    s.runs = groups[name].size();
    detail::mean_std(d, s.dice_mean, s.dice_std);
    detail::mean_std(i, s.iou_mean, s.iou_std);
    detail::mean_std(h, s.hd95_mean, s.hd95_std);
    out.push_back(s);
  }
  return out;
}

// ablation.csv: one row per (variant, seed), then one "mean" and one "std" row
// per variant, then the paired enhanced-minus-hybrid deltas when both exist.
inline void write_ablation_csv(const std::string& path, const std::vector<AblationRow>& rows) {
  std::ofstream os(path, std::ios::trunc);
  if (!os) throw DataError("cannot write " + path);
  os << "variant,seed,dice,iou,hd95,hd95_undefined,best_epoch\n";
  for (const auto& r : rows) {
    os << r.variant << ',' << r.seed << ',' << fmt(r.summary.dice) << ',' << fmt(r.summary.iou) << ','
       << fmt(r.summary.hd95) << ',' << r.summary.hd95_undefined << ',' << r.best_epoch << '\n';
  }
  for (const auto& s : variant_stats(rows)) {
    os << s.variant << ",mean," << fmt(s.dice_mean) << ',' << fmt(s.iou_mean) << ',' << fmt(s.hd95_mean) << ",,\n";
    os << s.variant << ",std," << fmt(s.dice_std) << ',' << fmt(s.iou_std) << ',' << fmt(s.hd95_std) << ",,\n";
  }
  std::map<std::uint64_t, const AblationRow*> hyb, enh;
  for (const auto& r : rows) {
    if (r.variant == "hybrid") hyb[r.seed] = &r;
    if (r.variant == "enhanced") enh[r.seed] = &r;
  }
  std::vector<double> dd, dh;
  for (const auto& [seed, e] : enh) {
    auto it = hyb.find(seed);
    if (it == hyb.end()) continue;
    dd.push_back(e->summary.dice - it->second->summary.dice);
    dh.push_back(e->summary.hd95 - it->second->summary.hd95);
  }
  if (!dd.empty()) {
    double dm, ds, hm, hs;
    detail::mean_std(dd, dm, ds);
    detail::mean_std(dh, hm, hs);
    os << "enhanced-hybrid,mean," << fmt(dm) << ",," << fmt(hm) << ",,\n";
    os << "enhanced-hybrid,std," << fmt(ds) << ",," << fmt(hs) << ",,\n";
  }
}

}  // namespace topodiff::harness
