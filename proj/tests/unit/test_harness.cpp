#include <gtest/gtest.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "topodiff/harness/ablate.hpp"
#include "topodiff/harness/train.hpp"

using namespace topodiff;
using namespace topodiff::harness;
namespace fs = std::filesystem;

namespace {

ConfigMap tiny_config(std::vector<std::string> extra = {}) {
  ConfigMap m;
  for (const char* o :
       {"model.image_size=16", "data.size=16", "data.count=24", "data.split=0.5,0.25,0.25", "model.base_channels=8",
        "model.channel_multipliers=1,2", "model.attention_levels=1", "model.norm_groups=4", "model.time_embed_dim=16",
        "model.attention_heads=2", "model.encoder_embed_dim=16", "model.encoder_depth=1", "model.encoder_heads=2",
        "schedule.steps=20", "train.epochs=2", "train.batch_size=6", "infer.full_sample_count=3"}) {
    m.apply_override(o);
  }
  for (const auto& o : extra) m.apply_override(o);
  return m;
}

std::string slurp(const fs::path& p) {
  std::ifstream is(p, std::ios::binary);
  std::stringstream ss;
  ss << is.rdbuf();
  return ss.str();
}

struct TempDir {
  fs::path path;
  explicit TempDir(const std::string& tag) {
    path = fs::temp_directory_path() / ("topodiff_harness_" + tag);
    fs::remove_all(path);
    fs::create_directories(path);
  }
  ~TempDir() { fs::remove_all(path); }
};

int run_cli(const std::string& args) {
  const std::string cmd = std::string(TOPODIFF_CLI_PATH) + " " + args + " >/dev/null 2>&1";
  const int status = std::system(cmd.c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

}  // namespace

TEST(Config, DefaultsAreValid) {
  const auto cfg = to_run_config(ConfigMap());
  EXPECT_EQ(cfg.schedule.steps, 1000);
  EXPECT_EQ(cfg.train.batch_size, 16u);
  EXPECT_EQ(cfg.train.mode, TrainMode::Hybrid);
  EXPECT_EQ(cfg.tdc.k, 5);
  EXPECT_EQ(cfg.infer.aux_t, 1);
  EXPECT_EQ(cfg.data.count, 625u);
}

TEST(Config, UnknownKeysAndBadValuesAreErrors) {
  ConfigMap m;
  EXPECT_THROW(m.apply_override("model.nonexistent=3"), ConfigError);
  EXPECT_THROW(m.apply_override("no_equals_sign"), ConfigError);
  EXPECT_THROW(m.parse_text("train.epochs 3\n", "inline"), ConfigError);
  EXPECT_THROW(m.parse_text("bogus.key = 3\n", "inline"), ConfigError);
  for (const char* bad : {"train.epochs=0", "train.epochs=abc", "train.batch_size=0", "train.mode=turbo",
                          "loss.tdc_k=0", "loss.tdc_threshold=maybe", "model.use_acb=perhaps", "ablate.variants=",
                          "ablate.seeds=", "data.split=0.5,0.5,0.5", "model.attention_levels=7"}) {
    ConfigMap c;
    c.apply_override(bad);
    EXPECT_THROW(to_run_config(c), ConfigError) << bad;
  }
}

TEST(Config, TextRoundTripAndComments) {
  ConfigMap m;
  m.parse_text("# comment\n\ntrain.epochs = 7\n  loss.tdc_k=10  \n", "inline");
  EXPECT_EQ(to_run_config(m).train.epochs, 7);
  ConfigMap back;
  back.parse_text(m.to_text(), "round trip");
  EXPECT_EQ(back.to_text(), m.to_text());
  EXPECT_EQ(to_run_config(back).tdc.k, 10);
}

TEST(Ablation, VariantOverrides) {
  EXPECT_EQ(variant_overrides("aux-only"), (std::vector<std::string>{"loss.alpha=0"}));
  EXPECT_EQ(variant_overrides("k15"), (std::vector<std::string>{"train.mode=enhanced", "loss.tdc_k=15"}));
  EXPECT_THROW(variant_overrides("k0"), ConfigError);
  EXPECT_THROW(variant_overrides("kx"), ConfigError);
  EXPECT_THROW(variant_overrides("turbo"), ConfigError);
  const auto cfg = to_run_config(variant_config(ConfigMap(), "acb-off", 4));
  EXPECT_FALSE(cfg.model.use_acb);
  EXPECT_EQ(cfg.seed, 4u);
}

TEST(Training, DeterministicForSeed) {
  const auto m = tiny_config();
  const auto data = load_dataset(to_run_config(m));
  const auto a = train(m, data), b = train(m, data);
  ASSERT_EQ(a.steps.size(), b.steps.size());
  for (std::size_t i = 0; i < a.steps.size(); ++i) EXPECT_EQ(metrics_line(a.steps[i]), metrics_line(b.steps[i]));
  EXPECT_EQ(a.model->params().snapshot(), b.model->params().snapshot());
  auto other = tiny_config({"run.seed=1"});
  const auto c = train(other, data);
  EXPECT_NE(metrics_line(a.steps[0]), metrics_line(c.steps[0]));
}

TEST(Training, StepRowsAreOrdered) {
  const auto m = tiny_config();
  const auto r = train(m, load_dataset(to_run_config(m)));
  ASSERT_EQ(r.steps.size(), 4u);
  for (std::size_t i = 1; i < r.steps.size(); ++i) {
    EXPECT_EQ(r.steps[i].step, r.steps[i - 1].step + 1);
    EXPECT_GE(r.steps[i].epoch, r.steps[i - 1].epoch);
  }
  EXPECT_EQ(r.epochs.size(), 2u);
}

TEST(Training, ZeroWeightsLeaveOnlyWeightDecay) {
  auto m = tiny_config({"loss.alpha=0", "loss.beta=0", "loss.gamma_w=0", "train.epochs=1", "train.batch_size=16"});
  const auto cfg = to_run_config(m);
  const auto data = load_dataset(cfg);
  Model fresh(cfg.model, derive_seed(cfg.seed, 1));
  const auto before = fresh.params().snapshot();
  const auto r = train(m, data);
  ASSERT_EQ(r.steps.size(), 1u);
  const double decay = 1.0 - cfg.optim.lr * cfg.optim.weight_decay;
  const auto after = r.model->params().snapshot();
  for (std::size_t k = 0; k < before.size(); ++k)
    for (std::size_t i = 0; i < before[k].size(); ++i)
      ASSERT_EQ(after[k][i], static_cast<float>(static_cast<double>(before[k][i]) * decay));
}

TEST(Training, AuxOnlyGivesNoiseHeadNoGradient) {
  const auto cfg = to_run_config(variant_config(tiny_config(), "aux-only", 0));
  const auto data = load_dataset(cfg);
  Model model(cfg.model, 5);
  StepInputs in;
  const auto idx = iota_range(0, 4);
  in.x0 = stack_fields(data.train, idx, true);
  in.image = stack_fields(data.train, idx, false);
  in.t = {1, 5, 10, 20};
  std::mt19937_64 rng(1);
  std::normal_distribution<double> n;
  std::vector<float> e(in.x0.numel());
  for (auto& v : e) v = static_cast<float>(n(rng));
  in.eps = FTensor::from_data(in.x0.shape(), e);
  const auto loss = compute_loss(model, in, cfg, cfg.schedule.build(), 0.0);
  backward(loss.total);
  bool saw_aux = false;
  for (auto& entry : model.params().entries()) {
    if (entry.name.rfind("head.eps", 0) == 0) {
      if (!entry.tensor.has_grad()) continue;
      for (float g : entry.tensor.grad()) EXPECT_EQ(g, 0.0f) << entry.name;
    }
    if (entry.name.rfind("head.aux", 0) == 0 && entry.tensor.has_grad()) {
      for (float g : entry.tensor.grad()) saw_aux |= g != 0.0f;
    }
  }
  EXPECT_TRUE(saw_aux);
}

TEST(Training, ModeAccounting) {
  const auto hybrid = train(tiny_config(), load_dataset(to_run_config(tiny_config())));
  for (const auto& s : hybrid.steps) {
    EXPECT_EQ(s.report.topo, 0.0);
    EXPECT_EQ(s.report.w_epoch, 0.0);
  }
  const auto m = tiny_config({"train.mode=enhanced", "train.epochs=3", "loss.tdc_warmup=0.3", "loss.tdc_ramp=0.3"});
  const auto enh = train(m, load_dataset(to_run_config(m)));
  bool active = false;
  for (const auto& s : enh.steps) {
    if (s.epoch == 0) EXPECT_EQ(s.report.w_epoch, 0.0);
    if (s.epoch >= 1) {
      EXPECT_GT(s.report.w_epoch, 0.0);
      active |= s.report.tdc_evaluated > 0;
    }
    EXPECT_NEAR(s.report.total,
                s.report.denoising_mse + 0.5 * s.report.denoising_dice + s.report.aux_dice + s.report.aux_focal +
                    s.report.w_epoch * std::log1p(s.report.topo),
                1e-6);
  }
  EXPECT_TRUE(active);
}

TEST(Training, EmptyTrainingSplitIsConfigError) {
  DataSplit empty;
  EXPECT_THROW(train(tiny_config(), empty), ConfigError);
}

TEST(Training, ResumeMatchesUninterruptedRun) {
  TempDir a("resume_a"), b("resume_b");
  const auto m = tiny_config({"train.epochs=3"});
  const auto data = load_dataset(to_run_config(m));
  TrainOptions full;
  full.out_dir = a.path.string();
  train(m, data, full);
  TrainOptions first;
  first.out_dir = b.path.string();
  first.stop_after = 1;
  train(m, data, first);
  TrainOptions rest;
  rest.out_dir = b.path.string();
  rest.resume = true;
  train(m, data, rest);
  for (const char* f : {"metrics.csv", "epochs.csv", "model.ckpt", "last.ckpt"}) {
    EXPECT_EQ(slurp(a.path / f), slurp(b.path / f)) << f;
  }
}

TEST(Pipeline, CheckpointRoundTripForwardIsBitExact) {
  TempDir dir("ckpt");
  const auto m = tiny_config({"train.epochs=1"});
  const auto cfg = to_run_config(m);
  const auto data = load_dataset(cfg);
  TrainOptions opt;
  opt.out_dir = dir.path.string();
  const auto r = train(m, data, opt);
  const auto lm = load_model((dir.path / "model.ckpt").string());
  const auto idx = iota_range(0, 3);
  const auto img = stack_fields(data.val, idx, false), x = stack_fields(data.val, idx, true);
  const auto o1 = (*r.model)(x, {1, 7, 20}, img), o2 = (*lm.model)(x, {1, 7, 20}, img);
  for (std::size_t i = 0; i < o1.eps_hat.numel(); ++i) {
    ASSERT_EQ(o1.eps_hat[i], o2.eps_hat[i]);
    ASSERT_EQ(o1.aux_logits[i], o2.aux_logits[i]);
  }
  EXPECT_THROW(load_model((dir.path / "model.ckpt").string(), {"model.base_channels=4"}), ConfigError);
  EXPECT_THROW(load_model((dir.path / "missing.ckpt").string()), DataError);
}

TEST(Pipeline, ForwardBudgetsAndDeterminism) {
  const auto m = tiny_config({"train.epochs=1"});
  const auto cfg = to_run_config(m);
  const auto data = load_dataset(cfg);
  auto r = train(m, data);
  Model& model = *r.model;
  const std::vector<Sample> few(data.val.begin(), data.val.begin() + 3);
  model.reset_forward_count();
  const auto a = infer_aux(model, few, cfg);
  EXPECT_EQ(model.forward_count(), 3u);
  const auto b = infer_aux(model, few, cfg);
  ASSERT_EQ(a.size(), 3u);
  for (std::size_t i = 0; i < a.size(); ++i) {
    EXPECT_EQ(a[i].bits, b[i].bits);
    EXPECT_EQ(a[i].height, 16u);
    for (auto v : a[i].bits) EXPECT_TRUE(v == 0 || v == 1);
  }
  model.reset_forward_count();
  const auto sched = cfg.schedule.build();
  const auto s1 = sample_full(model, few, sched, 9, cfg);
  EXPECT_EQ(model.forward_count(), 3u * 20u);
  const auto s2 = sample_full(model, few, sched, 9, cfg);
  for (std::size_t i = 0; i < s1.size(); ++i) EXPECT_EQ(s1[i].bits, s2[i].bits);
}

TEST(Ablation, TableHasEveryRow) {
  TempDir dir("ablate");
  auto m = tiny_config({"train.epochs=1", "ablate.variants=hybrid,enhanced,k10", "ablate.seeds=0,1",
                        "loss.tdc_warmup=0", "loss.tdc_ramp=0"});
  const auto data = load_dataset(to_run_config(m));
  const auto rows = run_ablation(m, data, (dir.path / "runs").string());
  ASSERT_EQ(rows.size(), 6u);
  write_ablation_csv((dir.path / "ablation.csv").string(), rows);
  std::ifstream is(dir.path / "ablation.csv");
  std::vector<std::string> lines;
  for (std::string l; std::getline(is, l);) lines.push_back(l);
  ASSERT_EQ(lines.size(), 1u + 6u + 6u + 2u);
  EXPECT_EQ(lines[0], "variant,seed,dice,iou,hd95,hd95_undefined,best_epoch");
  EXPECT_EQ(lines[1].rfind("hybrid,0,", 0), 0u);
  EXPECT_EQ(lines[6].rfind("k10,1,", 0), 0u);
  EXPECT_EQ(lines[13].rfind("enhanced-hybrid,mean,", 0), 0u);
  EXPECT_TRUE(fs::exists(dir.path / "runs" / "k10" / "seed1" / "metrics.csv"));
  auto bad = tiny_config({"ablate.variants=hybrid,warp"});
  EXPECT_THROW(run_ablation(bad, data), ConfigError);
}

TEST(Cli, ExitCodes) {
  TempDir dir("cli");
  const std::string out = (dir.path / "o").string();
  EXPECT_EQ(run_cli("gen-data --out " + out + " --set data.count=4 --set data.split=0.5,0.25,0.25"), 0);
  EXPECT_TRUE(fs::exists(fs::path(out) / "manifest.txt"));
  EXPECT_EQ(run_cli("train --out " + out + " --set bogus.key=1"), 2);
  EXPECT_EQ(run_cli("warp-drive"), 2);
  EXPECT_EQ(run_cli("train --out " + out + " --set data.source=manifest --set data.manifest=" + out + "/none.txt"), 3);
  EXPECT_EQ(run_cli("persistence --input " + out + "/missing.pgm"), 3);
  EXPECT_EQ(run_cli("infer-aux --out " + out + " --checkpoint " + out + "/missing.ckpt"), 3);
  std::string tiny;
  for (const char* o : {"model.image_size=16", "data.size=16", "data.count=24", "data.split=0.5,0.25,0.25",
                        "model.base_channels=8", "model.channel_multipliers=1,2", "model.attention_levels=1",
                        "model.norm_groups=4", "model.time_embed_dim=16", "model.attention_heads=2",
                        "model.encoder_embed_dim=16", "model.encoder_depth=1", "model.encoder_heads=2",
                        "schedule.steps=20", "train.epochs=2", "optim.lr=1e30"}) {
    tiny += std::string(" --set ") + o;
  }
  EXPECT_EQ(run_cli("train --out " + out + "/nan" + tiny), 4);
}
