#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "topodiff/harness/ablate.hpp"
#include "topodiff/harness/train.hpp"
#include "topodiff/image_io.hpp"
#include "topodiff/losses.hpp"
#include "topodiff/topology.hpp"

namespace fs = std::filesystem;
using namespace topodiff;
using namespace topodiff::harness;

namespace {

struct Common {
  std::string config;
  std::vector<std::string> sets;
  std::string out;
  long long seed = -1;
};

void add_common(CLI::App* app, Common& c, bool needs_out) {
  app->add_option("--config", c.config, "configuration file (section.key = value lines)");
  app->add_option("--set", c.sets, "override one key, section.key=value (repeatable)");
  app->add_option("--seed", c.seed, "seed for this subcommand");
  auto* out = app->add_option("--out", c.out, "output directory");
  if (needs_out) out->required();
}

ConfigMap build_config(const Common& c, const char* seed_key) {
  ConfigMap m;
  if (!c.config.empty()) m.parse_file(c.config);
  for (const auto& s : c.sets) m.apply_override(s);
  if (c.seed >= 0 && seed_key) m.set(seed_key, std::to_string(c.seed));
  to_run_config(m);
  return m;
}

std::vector<std::string> load_overrides(const Common& c) {
  std::vector<std::string> o;
  if (!c.config.empty()) throw ConfigError("--config is not accepted together with --checkpoint; use --set");
  for (const auto& s : c.sets) o.push_back(s);
  return o;
}

ScalarField2D read_field(const std::string& path) { return image_to_field(read_gray_image(path)); }

std::string g9(double v) { return fmt(v); }

// Samples to run inference on: a manifest when --input is given, otherwise the
// configured evaluation split of the checkpoint's dataset.
std::vector<Sample> inference_samples(const LoadedModel& lm, const std::string& input) {
  if (!input.empty()) return load_manifest(input, lm.run.model.image_size);
  const auto data = load_dataset(lm.run);
  return eval_split(data, lm.run);
}

int run(int argc, char** argv) {
  CLI::App app{"Topology-regularized conditional diffusion segmentation"};
  app.require_subcommand(1);

  Common gen_c;
  auto* gen = app.add_subcommand("gen-data", "write a synthetic dataset (images/, masks/, manifest.txt)");
  add_common(gen, gen_c, true);

  Common train_c;
  bool resume = false;
  auto* tr = app.add_subcommand("train", "train a model; writes metrics.csv, epochs.csv, model.ckpt, last.ckpt");
  add_common(tr, train_c, true);
  tr->add_flag("--resume", resume, "continue from <out>/last.ckpt");

  Common aux_c;
  std::string aux_ckpt, aux_input;
  auto* aux = app.add_subcommand("infer-aux", "one-forward auxiliary-head inference; writes masks and eval.csv");
  add_common(aux, aux_c, true);
  aux->add_option("--checkpoint", aux_ckpt, "model checkpoint")->required();
  aux->add_option("--input", aux_input, "manifest of images to segment (default: evaluation split)");

  Common smp_c;
  std::string smp_ckpt, smp_input;
  auto* smp = app.add_subcommand("sample", "full reverse-diffusion sampling; writes masks and eval.csv");
  add_common(smp, smp_c, true);
  smp->add_option("--checkpoint", smp_ckpt, "model checkpoint")->required();
  smp->add_option("--input", smp_input, "manifest of images to segment (default: evaluation split)");

  Common ev_c;
  std::string ev_ckpt, ev_input, ev_mode = "aux";
  auto* ev = app.add_subcommand("eval", "evaluate a checkpoint; writes eval.csv");
  add_common(ev, ev_c, true);
  ev->add_option("--checkpoint", ev_ckpt, "model checkpoint")->required();
  ev->add_option("--input", ev_input, "manifest of images to evaluate (default: evaluation split)");
  ev->add_option("--mode", ev_mode, "aux or full")->check(CLI::IsMember({"aux", "full"}));

  Common pers_c;
  std::string pers_input;
  auto* pers = app.add_subcommand("persistence", "superlevel persistence diagram of a grayscale image");
  add_common(pers, pers_c, false);
  pers->add_option("--input", pers_input, "PGM or PNG image")->required();

  Common topo_c;
  std::string topo_cur, topo_prev;
  double topo_w = 1.0;
  auto* topo = app.add_subcommand("topo-loss", "W1 distance between the persistence diagrams of two images");
  add_common(topo, topo_c, false);
  topo->add_option("--current", topo_cur, "current prediction image")->required();
  topo->add_option("--lookback", topo_prev, "look-back prediction image")->required();
  topo->add_option("--weight", topo_w, "w_epoch applied to log(1 + W1)");

  Common abl_c;
  auto* abl = app.add_subcommand("ablate", "train every configured variant at every seed; writes ablation.csv");
  add_common(abl, abl_c, true);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }

  if (*gen) {
    const auto m = build_config(gen_c, "data.seed");
    const auto cfg = to_run_config(m);
    if (cfg.data.source != "synthetic") throw ConfigError("gen-data needs data.source = synthetic");
    write_dataset(gen_c.out, generate_synthetic(cfg.data.synth, cfg.data.count));
    std::ofstream(fs::path(gen_c.out) / "config.txt", std::ios::trunc) << m.to_text();
    return 0;
  }

  if (*tr) {
    const auto m = build_config(train_c, "run.seed");
    const auto cfg = to_run_config(m);
    const auto data = load_dataset(cfg);
    TrainOptions opt;
    opt.out_dir = train_c.out;
    opt.resume = resume;
    opt.log = &std::cerr;
    const auto res = train(m, data, opt);
    std::cout << "best_epoch " << res.best_epoch + 1 << " val_dice " << g9(res.best_val_dice) << '\n';
    return 0;
  }

  if (*aux || *smp || *ev) {
    const Common& c = *aux ? aux_c : *smp ? smp_c : ev_c;
    const std::string& ckpt = *aux ? aux_ckpt : *smp ? smp_ckpt : ev_ckpt;
    const std::string& input = *aux ? aux_input : *smp ? smp_input : ev_input;
    const bool full = *smp || (*ev && ev_mode == "full");
    auto overrides = load_overrides(c);
    const auto lm = load_model(ckpt, overrides);
    auto samples = inference_samples(lm, input);
    if (samples.empty()) throw DataError("no samples to run inference on");
    std::vector<BinaryMask> masks;
    if (full) {
      if (samples.size() > lm.run.infer.full_sample_count) samples.resize(lm.run.infer.full_sample_count);
      const std::uint64_t seed = c.seed >= 0 ? static_cast<std::uint64_t>(c.seed) : lm.run.seed;
      masks = sample_full(*lm.model, samples, lm.run.schedule.build(), seed, lm.run);
    } else {
      masks = infer_aux(*lm.model, samples, lm.run);
    }
    fs::create_directories(c.out);
    const auto rows = evaluate_masks(samples, masks);
    write_eval_csv((fs::path(c.out) / "eval.csv").string(), rows);
    if (!*ev) write_masks((fs::path(c.out) / "masks").string(), samples, masks);
    const auto s = summarize_rows(rows);
    std::cout << "images " << samples.size() << " forwards " << lm.model->forward_count() << " dice " << g9(s.dice)
              << " iou " << g9(s.iou) << " hd95 " << g9(s.hd95) << '\n';
    return 0;
  }

  if (*pers) {
    build_config(pers_c, nullptr);
    const auto field = read_field(pers_input);
    const auto dgm = superlevel_persistence(field);
    std::ostringstream os;
    for (std::size_t i : canonical_point_order(dgm)) {
      const auto& p = dgm.points[i];
      os << p.dim << ' ' << g9(p.birth) << ' ' << g9(p.death) << ' ' << p.birth_cell.row << ' ' << p.birth_cell.col
         << ' ' << (p.death_cell ? p.death_cell->row : -1) << ' ' << (p.death_cell ? p.death_cell->col : -1) << '\n';
    }
    if (pers_c.out.empty()) {
      std::cout << os.str();
    } else {
      fs::create_directories(pers_c.out);
      std::ofstream(fs::path(pers_c.out) / "persistence.txt", std::ios::trunc) << os.str();
    }
    return 0;
  }

  if (*topo) {
    const auto cfg = to_run_config(build_config(topo_c, nullptr));
    const auto a = read_field(topo_cur);
    const auto b = read_field(topo_prev);
    if (a.height != b.height || a.width != b.width) throw DimensionError("the two images differ in size");
    const auto d = topo_distance(a, b, cfg.tdc.threshold, cfg.tdc.dims);
    std::ostringstream os;
    os << "w1 " << g9(d.cost) << "\nweighted " << g9(topo_w * std::log1p(d.cost)) << '\n';
    if (topo_c.out.empty()) {
      std::cout << os.str();
    } else {
      fs::create_directories(topo_c.out);
      std::ofstream(fs::path(topo_c.out) / "topo_loss.txt", std::ios::trunc) << os.str();
    }
    return 0;
  }

  if (*abl) {
    auto m = build_config(abl_c, nullptr);
    if (abl_c.seed >= 0) m.set("ablate.seeds", std::to_string(abl_c.seed));
    const auto cfg = to_run_config(m);
    const auto data = load_dataset(cfg);
    fs::create_directories(abl_c.out);
    const auto rows = run_ablation(m, data, (fs::path(abl_c.out) / "runs").string(), &std::cerr);
    write_ablation_csv((fs::path(abl_c.out) / "ablation.csv").string(), rows);
    for (const auto& s : variant_stats(rows)) {
      std::cout << s.variant << " dice " << g9(s.dice_mean) << " +- " << g9(s.dice_std) << " hd95 " << g9(s.hd95_mean)
                << " +- " << g9(s.hd95_std) << '\n';
    }
    return 0;
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  try {
    return run(argc, argv);
  } catch (const ConfigError& e) {
    std::cerr << "configuration error: " << e.what() << '\n';
    return 2;
  } catch (const DataError& e) {
    std::cerr << "data error: " << e.what() << '\n';
    return 3;
  } catch (const NumericalError& e) {
    std::cerr << "numerical error: " << e.what() << '\n';
    return 4;
  } catch (const DimensionError& e) {
    std::cerr << "data error: " << e.what() << '\n';
    return 3;
  } catch (const std::filesystem::filesystem_error& e) {
    std::cerr << "data error: " << e.what() << '\n';
    return 3;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
}
