#include "m2dclap/evaluate.hpp"
#include "m2dclap/pretrain.hpp"
#include "m2dclap/report.hpp"

#include <CLI11.hpp>

#include <chrono>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>

namespace fs = std::filesystem;
using namespace m2dclap;

namespace {

struct Common {
  std::string config_path;
  std::vector<std::string> overrides;
};

void add_common(CLI::App* app, Common& c) {
  app->add_option("-c,--config", c.config_path, "key = value config file");
  app->add_option("--set", c.overrides, "override one config key (key=value), repeatable");
}

RunConfig fresh_config(const Common& c) {
  RunConfig cfg = c.config_path.empty() ? RunConfig::desk() : RunConfig::load(c.config_path);
  cfg.apply_overrides(c.overrides);
  cfg.validate();
  return cfg;
}

std::string model_signature(const RunConfig& cfg) {
  std::string out;
  for (const auto& k : RunConfig::keys()) {
    if (k.rfind("model.", 0) == 0 || k.rfind("audio.", 0) == 0) out += k + "=" + cfg.get(k) + "\n";
  }
  return out;
}

// Checkpoint config plus evaluation-time settings from --config / --set.
// Model and front-end keys are fixed by the checkpoint.
train::Checkpoint checkpoint_with_overrides(const std::string& path, const Common& c) {
  train::Checkpoint ckpt = train::load_checkpoint(path);
  RunConfig cfg = ckpt.config;
  if (!c.config_path.empty()) {
    std::ifstream in(c.config_path);
    if (!in) throw Error("cannot open config " + c.config_path);
    std::stringstream ss;
    ss << in.rdbuf();
    const RunConfig file_cfg = RunConfig::load(c.config_path);
    cfg = RunConfig::parse(ss.str(), cfg);
    cfg.train_manifest = file_cfg.train_manifest;
    cfg.test_manifest = file_cfg.test_manifest;
    cfg.embedding_table = file_cfg.embedding_table;
    cfg.caption_rules = file_cfg.caption_rules;
  }
  cfg.apply_overrides(c.overrides);
  if (model_signature(cfg) != model_signature(ckpt.config)) {
    throw Error("model.* and audio.* keys are fixed by the checkpoint and cannot be overridden");
  }
  cfg.validate();
  ckpt.config = cfg;
  return ckpt;
}

std::vector<std::string> classes_for(const RunConfig& cfg) {
  std::vector<std::vector<data::ManifestRecord>> m;
  if (!cfg.train_manifest.empty()) m.push_back(data::load_manifest(cfg.train_manifest));
  if (!cfg.test_manifest.empty()) m.push_back(data::load_manifest(cfg.test_manifest));
  if (m.empty()) throw Error("no manifest configured (data.train_manifest / data.test_manifest)");
  return data::class_names(m);
}

void require(const std::string& value, const char* key) {
  if (value.empty()) throw Error(std::string("config key ") + key + " is not set");
}

zeroshot::CaptionRuleSet rules_for(const RunConfig& cfg) {
  return cfg.caption_rules.empty() ? zeroshot::CaptionRuleSet::defaults()
                                   : zeroshot::CaptionRuleSet::load(cfg.caption_rules);
}

void write_report(const eval::EvalReport& r, const std::string& out) {
  if (!out.empty()) {
    if (fs::path(out).has_parent_path()) fs::create_directories(fs::path(out).parent_path());
    eval::save_report(out, r);
  }
  std::cout << r.task << " " << r.protocol << " " << r.metric << " = " << r.value;
  if (r.ci95 >= 0.0) std::cout << " +/- " << r.ci95;
  std::cout << "\n";
}

int cmd_make_synthetic(const std::string& out, data::SyntheticSpec spec, const Common& c) {
  RunConfig cfg = fresh_config(c);
  spec.dim = cfg.model.semantic_dim;
  const auto layout = data::write_synthetic(out, spec);
  cfg.train_manifest = fs::absolute(layout.train_manifest).string();
  cfg.test_manifest = fs::absolute(layout.test_manifest).string();
  cfg.embedding_table = fs::absolute(layout.embedding_table).string();
  cfg.zeroshot_task = "synthetic";
  cfg.save(fs::path(out) / "run.conf");
  std::cout << "wrote " << spec.classes * spec.clips_per_class << " clips to " << out << "\n"
            << "config: " << (fs::path(out) / "run.conf").string() << "\n";
  return 0;
}

int cmd_pretrain(const std::string& out, const std::string& resume, int ckpt_every, const Common& c) {
  fs::create_directories(out);
  std::optional<train::Checkpoint> ckpt;
  RunConfig cfg;
  if (!resume.empty()) {
    ckpt = train::load_checkpoint(resume);
    cfg = ckpt->config;
  } else {
    cfg = fresh_config(c);
  }
  require(cfg.train_manifest, "data.train_manifest");
  require(cfg.embedding_table, "data.embedding_table");
  const auto records = data::load_manifest(cfg.train_manifest);
  const data::ClipSet clips = data::load_clips(cfg.train_manifest, data::class_names({records}));
  const auto table = text::load_table(cfg.embedding_table, cfg.model.semantic_dim);
  auto captions = data::resolve_captions(clips.records, table, cfg.toy_embed_fallback, cfg.model.semantic_dim);

  train::Pretrainer trainer = ckpt ? train::Pretrainer(*ckpt, clips, std::move(captions))
                                   : train::Pretrainer(cfg, clips, std::move(captions));
  trainer.config().save(fs::path(out) / "run.conf");
  const fs::path log_path = fs::path(out) / "loss.csv";
  std::ofstream log(log_path, ckpt ? std::ios::app : std::ios::trunc);
  if (!ckpt) log << train::loss_log_header() << "\n";
  const auto t0 = std::chrono::steady_clock::now();
  const long spe = trainer.steps_per_epoch();
  while (!trainer.done()) {
    const auto s = trainer.step();
    log << train::loss_log_row(s) << "\n";
    if (s.step % spe == 0) {
      const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
      std::printf("epoch %3ld  loss %.4f  m2d %.4f  clap %.4f  tau %.4f  (%.0fs)\n", s.step / spe, s.loss.total,
                  s.loss.m2d, s.loss.clap, s.loss.tau, secs);
      std::fflush(stdout);
      log.flush();
      if (ckpt_every > 0 && (s.step / spe) % ckpt_every == 0) {
        train::save_checkpoint(fs::path(out) / "checkpoint.m2dk", trainer.checkpoint());
      }
    }
  }
  train::save_checkpoint(fs::path(out) / "checkpoint.m2dk", trainer.checkpoint());
  std::cout << "checkpoint: " << (fs::path(out) / "checkpoint.m2dk").string() << "\n";
  return 0;
}

int cmd_zeroshot(const std::string& ckpt_path, const std::string& task, const std::string& out, const Common& c) {
  auto ckpt = checkpoint_with_overrides(ckpt_path, c);
  if (!task.empty()) ckpt.config.zeroshot_task = task;
  const auto& cfg = ckpt.config;
  require(cfg.test_manifest, "data.test_manifest");
  const auto test = data::load_clips(cfg.test_manifest, classes_for(cfg));
  std::optional<text::EmbeddingTable> table;
  if (!cfg.embedding_table.empty()) table = text::load_table(cfg.embedding_table, cfg.model.semantic_dim);
  const auto r = eval::run_zeroshot(ckpt, test, rules_for(cfg), table ? &*table : nullptr, cfg.zeroshot_task,
                                    cfg.resolved_threads());
  write_report(r, out);
  return 0;
}

int cmd_linear(const std::string& ckpt_path, const std::string& task, const std::string& out,
               const std::string& features_dir, const Common& c) {
  const auto ckpt = checkpoint_with_overrides(ckpt_path, c);
  const auto& cfg = ckpt.config;
  require(cfg.train_manifest, "data.train_manifest");
  require(cfg.test_manifest, "data.test_manifest");
  const auto classes = classes_for(cfg);
  const auto train = data::load_clips(cfg.train_manifest, classes);
  const auto test = data::load_clips(cfg.test_manifest, classes);
  const auto res = eval::run_linear(ckpt, train, test, task.empty() ? cfg.zeroshot_task : task, cfg.resolved_threads());
  if (!features_dir.empty()) {
    fs::create_directories(features_dir);
    linear::save_feature_cache(fs::path(features_dir) / "train.m2df", res.train_features);
    linear::save_feature_cache(fs::path(features_dir) / "test.m2df", res.test_features);
  }
  write_report(res.report, out);
  return 0;
}

int cmd_finetune(const std::string& ckpt_path, const std::string& task, const std::string& out, const Common& c) {
  const auto ckpt = checkpoint_with_overrides(ckpt_path, c);
  const auto& cfg = ckpt.config;
  require(cfg.train_manifest, "data.train_manifest");
  require(cfg.test_manifest, "data.test_manifest");
  const auto classes = classes_for(cfg);
  const auto train = data::load_clips(cfg.train_manifest, classes);
  const auto test = data::load_clips(cfg.test_manifest, classes);
  const auto profile = eval::resolve_profile(cfg);
  const auto res = eval::run_finetune(ckpt, train, test, profile, task.empty() ? cfg.zeroshot_task : task, cfg.seed,
                                      cfg.resolved_threads());
  write_report(res.report, out);
  if (profile.freeze_patch_embed) {
    std::cout << "patch embedding " << (res.patch_embed_frozen ? "unchanged" : "CHANGED") << " (profile "
              << profile.name << " freezes it)\n";
  }
  return 0;
}

int cmd_export_features(const std::string& ckpt_path, const std::string& manifest, const std::string& out,
                        const Common& c) {
  const auto ckpt = checkpoint_with_overrides(ckpt_path, c);
  const auto& cfg = ckpt.config;
  const auto records = data::load_manifest(manifest);
  const auto clips = data::load_clips(manifest, data::class_names({records}));
  const int threads = cfg.resolved_threads();
  const auto specs = data::clip_spectrograms(clips, cfg.mel_config(), cfg.norm_mean, cfg.norm_std, threads);
  linear::FeatureCache fc;
  fc.features = linear::extract_features(ckpt.online, cfg.model, specs, train::crop_grid(cfg), cfg.pooling, threads);
  fc.labels = clips.label;
  for (const auto& r : clips.records) fc.ids.push_back(r.id);
  fc.class_names = clips.class_names;
  fc.pooling = cfg.pooling;
  linear::save_feature_cache(out, fc);
  std::cout << "wrote " << fc.features.rows() << " x " << fc.features.cols() << " features to " << out << "\n";
  return 0;
}

int cmd_report(const std::vector<std::string>& inputs, const std::string& loss_log, const std::string& out) {
  std::vector<eval::EvalReport> reports;
  for (const auto& p : inputs) reports.push_back(eval::load_report(p));
  const std::string table = report::render_table(reports);
  std::cout << table;
  if (!out.empty()) {
    fs::create_directories(out);
    std::ofstream(fs::path(out) / "report.txt") << table;
    const auto curve = loss_log.empty() ? std::vector<double>{} : report::read_loss_curve(loss_log);
    report::write_png(fs::path(out) / "report.png", report::render_plot(curve, reports));
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"m2dclap: masked-prediction + audio-text contrastive pre-training"};
  app.require_subcommand(1);

  Common common;
  std::string out, ckpt, task, resume, manifest, features_dir, loss_log;
  int ckpt_every = 1;
  std::vector<std::string> inputs;
  data::SyntheticSpec syn;

  auto* ms = app.add_subcommand("make-synthetic", "write the synthetic tone corpus and a run config");
  add_common(ms, common);
  ms->add_option("-o,--out", out, "output directory")->required();
  ms->add_option("--classes", syn.classes, "tone classes");
  ms->add_option("--clips", syn.clips_per_class, "clips per class");
  ms->add_option("--test", syn.test_per_class, "held-out clips per class");
  ms->add_option("--duration", syn.duration_s, "clip duration in seconds");
  ms->add_option("--seed", syn.seed, "corpus seed");

  auto* pt = app.add_subcommand("pretrain", "pre-train on a paired audio-caption manifest");
  add_common(pt, common);
  pt->add_option("-o,--out", out, "run directory (loss.csv, checkpoint.m2dk, run.conf)")->required();
  pt->add_option("--resume", resume, "continue from a checkpoint (its config is used)");
  pt->add_option("--checkpoint-every", ckpt_every, "epochs between checkpoints (0: only at the end)");

  auto* ft = app.add_subcommand("finetune", "fine-tune a checkpoint with a profile and report test metrics");
  add_common(ft, common);
  ft->add_option("--checkpoint", ckpt, "pre-trained checkpoint")->required();
  ft->add_option("--task", task, "task name recorded in the report");
  ft->add_option("-o,--out", out, "report JSON path");

  auto* le = app.add_subcommand("linear-eval", "linear probe on frozen features");
  add_common(le, common);
  le->add_option("--checkpoint", ckpt, "pre-trained checkpoint")->required();
  le->add_option("--task", task, "task name recorded in the report");
  le->add_option("-o,--out", out, "report JSON path");
  le->add_option("--features-dir", features_dir, "also write the feature caches here");

  auto* zs = app.add_subcommand("zeroshot", "zero-shot classification with caption prompts");
  add_common(zs, common);
  zs->add_option("--checkpoint", ckpt, "pre-trained checkpoint")->required();
  zs->add_option("--task", task, "caption rule task (default: zeroshot.task)");
  zs->add_option("-o,--out", out, "report JSON path");

  auto* ef = app.add_subcommand("export-features", "write pooled encoder features of a manifest");
  add_common(ef, common);
  ef->add_option("--checkpoint", ckpt, "pre-trained checkpoint")->required();
  ef->add_option("--manifest", manifest, "manifest to encode")->required();
  ef->add_option("-o,--out", out, "feature cache path")->required();

  auto* rp = app.add_subcommand("report", "tabulate reports and plot loss curve and metrics");
  rp->add_option("reports", inputs, "report JSON files")->required();
  rp->add_option("--loss-log", loss_log, "pre-training loss.csv");
  rp->add_option("-o,--out", out, "directory for report.txt and report.png");

  auto* pc = app.add_subcommand("print-config", "print the documented config with overrides applied");
  add_common(pc, common);

  CLI11_PARSE(app, argc, argv);

  try {
    if (ms->parsed()) return cmd_make_synthetic(out, syn, common);
    if (pt->parsed()) return cmd_pretrain(out, resume, ckpt_every, common);
    if (ft->parsed()) return cmd_finetune(ckpt, task, out, common);
    if (le->parsed()) return cmd_linear(ckpt, task, out, features_dir, common);
    if (zs->parsed()) return cmd_zeroshot(ckpt, task, out, common);
    if (ef->parsed()) return cmd_export_features(ckpt, manifest, out, common);
    if (rp->parsed()) return cmd_report(inputs, loss_log, out);
    if (pc->parsed()) {
      std::cout << fresh_config(common).serialize(true);
      return 0;
    }
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
