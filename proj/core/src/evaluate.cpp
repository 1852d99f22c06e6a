#include "m2dclap/evaluate.hpp"

#include "m2dclap/parallel.hpp"

#include <json.hpp>

#include <chrono>
#include <cmath>
#include <cstdio>
#include <ctime>
#include <fstream>
#include <numeric>
#include <sstream>

namespace m2dclap::eval {

using nlohmann::json;

std::string EvalReport::to_json() const {
  json j;
  j["task"] = task;
  j["protocol"] = protocol;
  j["metric"] = metric;
  j["value"] = value;
  if (ci95 >= 0.0) j["ci95"] = ci95;
  j["config_hash"] = config_hash;
  j["timestamp"] = timestamp;
  j["extra"] = extra;
  if (!curve.empty()) j["curve"] = curve;
  return j.dump(2) + "\n";
}

EvalReport EvalReport::from_json(const std::string& text) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::exception& e) {
    throw FormatError(std::string("report is not valid JSON: ") + e.what());
  }
  EvalReport r;
  try {
    r.task = j.at("task").get<std::string>();
    r.protocol = j.at("protocol").get<std::string>();
    r.metric = j.at("metric").get<std::string>();
    r.value = j.at("value").get<double>();
    r.ci95 = j.value("ci95", -1.0);
    r.config_hash = j.value("config_hash", std::string());
    r.timestamp = j.value("timestamp", std::string());
    if (j.contains("extra")) r.extra = j.at("extra").get<std::map<std::string, double>>();
    if (j.contains("curve")) r.curve = j.at("curve").get<std::vector<double>>();
  } catch (const json::exception& e) {
    throw FormatError(std::string("report is missing fields: ") + e.what());
  }
  return r;
}

void save_report(const std::filesystem::path& path, const EvalReport& r) {
  std::ofstream out(path);
  if (!out) throw Error("cannot write report " + path.string());
  out << r.to_json();
}

EvalReport load_report(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw Error("cannot open report " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return EvalReport::from_json(ss.str());
}

std::string utc_timestamp() {
  const std::time_t now = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&now, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

std::string hex_hash(uint64_t h) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

namespace {

EvalReport base_report(const RunConfig& cfg, const std::string& task, const std::string& protocol) {
  EvalReport r;
  r.task = task;
  r.protocol = protocol;
  r.config_hash = hex_hash(cfg.hash());
  r.timestamp = utc_timestamp();
  return r;
}

// Positional table for a clip grid: interpolated along time, or, when
// interpolation is off and the clip is no longer than the pre-training crop,
// the leading columns of the pre-training table.
PositionalEncoding posenc_for(const PositionalEncoding& base, GridShape grid, bool interpolate) {
  if (grid == base.grid) return base;
  if (interpolate || grid.cols > base.grid.cols || grid.rows != base.grid.rows) return interpolate_posenc(base, grid);
  PositionalEncoding pe;
  pe.grid = grid;
  pe.table.resize(grid.count(), base.dim());
  for (int r = 0; r < grid.rows; ++r) {
    for (int c = 0; c < grid.cols; ++c) pe.table.row(r * grid.cols + c) = base.table.row(r * base.grid.cols + c);
  }
  return pe;
}

std::vector<int> class_labels(const data::ClipSet& set) {
  for (size_t i = 0; i < set.size(); ++i) {
    if (set.label[i] < 0) throw Error("sample " + set.records[i].id + " has no label");
  }
  return set.label;
}

void check_same_classes(const data::ClipSet& a, const data::ClipSet& b) {
  if (a.class_names != b.class_names) throw Error("manifest/label mismatch: train and test class lists differ");
}

}  // namespace

Matrix audio_embeddings(const ParamStore& online, const RunConfig& cfg, const std::vector<Matrix>& spectrograms,
                        int threads) {
  const PositionalEncoding base = sincos_2d(train::crop_grid(cfg), cfg.model.encoder.dim);
  Matrix out(static_cast<Eigen::Index>(spectrograms.size()), cfg.model.semantic_dim);
  parallel_for(spectrograms.size(), threads, [&](size_t i) {
    const PatchSequence seq = patchify(spectrograms[i], cfg.model.encoder.patch);
    const PositionalEncoding pe = interpolate_posenc(base, seq.grid);
    out.row(static_cast<Eigen::Index>(i)) = project_semantic(online, encode_all(online, cfg.model, seq, pe));
  });
  return out;
}

Matrix class_prompt_embeddings(const std::vector<std::string>& class_names, const std::string& task,
                               const zeroshot::CaptionRuleSet& rules, const text::EmbeddingTable* table,
                               bool toy_fallback, int dim) {
  if (table == nullptr && !toy_fallback) {
    throw Error("zero-shot evaluation needs a caption embedding table (set data.embedding_table)");
  }
  if (table != nullptr && table->dim() != dim) {
    throw Error("embedding table has d_s = " + std::to_string(table->dim()) + ", model expects " + std::to_string(dim));
  }
  Matrix out(static_cast<Eigen::Index>(class_names.size()), dim);
  for (size_t c = 0; c < class_names.size(); ++c) {
    const std::string prompt = rules.caption(task, class_names[c]);
    const std::string id = text::caption_id(prompt);
    if (table != nullptr && table->contains(id)) {
      out.row(static_cast<Eigen::Index>(c)) = table->get(id);
    } else if (toy_fallback) {
      out.row(static_cast<Eigen::Index>(c)) = text::toy_embed(prompt, dim);
    } else {
      throw Error("embedding table lacks the prompt \"" + prompt + "\" (id " + id + ")");
    }
  }
  return out;
}

EvalReport run_zeroshot(const train::Checkpoint& ckpt, const data::ClipSet& test, const zeroshot::CaptionRuleSet& rules,
                        const text::EmbeddingTable* table, const std::string& task, int threads) {
  const RunConfig& cfg = ckpt.config;
  const Matrix classes = class_prompt_embeddings(test.class_names, cfg.zeroshot_task, rules, table,
                                                 cfg.toy_embed_fallback, cfg.model.semantic_dim);
  const auto specs = data::clip_spectrograms(test, cfg.mel_config(), cfg.norm_mean, cfg.norm_std, threads);
  const Matrix audio = audio_embeddings(ckpt.online, cfg, specs, threads);
  const auto preds = zeroshot::zs_classify(audio, classes);

  EvalReport r = base_report(cfg, task, "zeroshot");
  if (test.multi_label) {
    Matrix scores(audio.rows(), classes.rows());
    for (size_t i = 0; i < preds.size(); ++i) scores.row(static_cast<Eigen::Index>(i)) = preds[i].scores;
    const auto m = zeroshot::mean_ap(scores, test.multi_hot);
    r.metric = "mAP";
    r.value = m.map;
    r.extra["classes_scored"] = m.classes_scored;
  } else {
    std::vector<int> p;
    for (const auto& z : preds) p.push_back(z.label);
    r.metric = "accuracy";
    r.value = zeroshot::accuracy(p, class_labels(test));
  }
  r.extra["clips"] = static_cast<double>(test.size());
  r.extra["classes"] = static_cast<double>(test.class_names.size());
  return r;
}

LinearEvalOutput run_linear(const train::Checkpoint& ckpt, const data::ClipSet& train, const data::ClipSet& test,
                            const std::string& task, int threads) {
  const RunConfig& cfg = ckpt.config;
  check_same_classes(train, test);
  if (train.multi_label || test.multi_label) throw Error("linear evaluation supports single-label tasks only");
  const GridShape grid = train::crop_grid(cfg);
  auto features = [&](const data::ClipSet& set) {
    const auto specs = data::clip_spectrograms(set, cfg.mel_config(), cfg.norm_mean, cfg.norm_std, threads);
    linear::FeatureCache fc;
    fc.features = linear::extract_features(ckpt.online, cfg.model, specs, grid, cfg.pooling, threads);
    fc.labels = class_labels(set);
    for (const auto& rec : set.records) fc.ids.push_back(rec.id);
    fc.class_names = set.class_names;
    fc.pooling = cfg.pooling;
    return fc;
  };
  LinearEvalOutput out;
  out.train_features = features(train);
  out.test_features = features(test);
  const auto probe = linear::train_probe(out.train_features.features, out.train_features.labels,
                                         out.test_features.features, out.test_features.labels, cfg.probe_seeds,
                                         cfg.probe);
  out.centroid_accuracy = linear::nearest_centroid_accuracy(out.train_features.features, out.train_features.labels,
                                                            out.test_features.features, out.test_features.labels);
  out.report = base_report(cfg, task, "linear");
  out.report.metric = "accuracy";
  out.report.value = probe.accuracy;
  out.report.ci95 = probe.ci95;
  out.report.extra["train_accuracy"] = probe.train_accuracy;
  out.report.extra["nearest_centroid_accuracy"] = out.centroid_accuracy;
  for (const auto& run : probe.runs) {
    out.report.extra["seed_" + std::to_string(run.seed) + "_accuracy"] = run.test_accuracy;
    out.report.extra["seed_" + std::to_string(run.seed) + "_epochs"] = run.epochs;
  }
  return out;
}

augment::FinetuneProfile resolve_profile(const RunConfig& cfg) {
  auto p = augment::finetune_profile(cfg.finetune_profile);
  if (cfg.finetune_lr > 0.0) p.lr = cfg.finetune_lr;
  if (cfg.finetune_epochs > 0) p.epochs = cfg.finetune_epochs;
  if (cfg.finetune_batch_size > 0) p.batch_size = cfg.finetune_batch_size;
  if (cfg.finetune_warmup_epochs >= 0) p.warmup_epochs = cfg.finetune_warmup_epochs;
  if (!cfg.finetune_optimizer.empty()) p.optimizer = cfg.finetune_optimizer;
  p.augment.validate();
  return p;
}

namespace {

inline const std::string kHead = "head";

struct FtSample {
  Matrix spec;
  RowVector target;
};

struct FtWork {
  EncoderCache enc;
  RowVector pooled;
  Eigen::Index tokens = 0;
  RowVector dlogits;
  double loss = 0.0;
};

RowVector head_logits(const ParamStore& p, const RowVector& pooled) { return layers::linear(p, kHead, Matrix(pooled)).row(0); }

// Soft-target cross entropy (single-label) or mean binary cross entropy
// (multi-label); returns the loss and dL/dlogits.
double head_loss(const RowVector& logits, const RowVector& target, bool multi_label, RowVector& dlogits) {
  if (multi_label) {
    double loss = 0.0;
    dlogits.resize(logits.size());
    for (Eigen::Index c = 0; c < logits.size(); ++c) {
      const double z = logits[c];
      const double y = target[c];
      loss += std::max(z, 0.0) - z * y + std::log1p(std::exp(-std::abs(z)));
      dlogits[c] = (1.0 / (1.0 + std::exp(-z)) - y) / static_cast<double>(logits.size());
    }
    return loss / static_cast<double>(logits.size());
  }
  const RowVector lsm = layers::log_softmax_rows(Matrix(logits)).row(0);
  dlogits = lsm.array().exp().matrix() - target;
  return -(target.array() * lsm.array()).sum();
}

}  // namespace

FinetuneOutput run_finetune(const train::Checkpoint& ckpt, const data::ClipSet& train, const data::ClipSet& test,
                            const augment::FinetuneProfile& profile, const std::string& task, uint64_t seed,
                            int threads) {
  const RunConfig& cfg = ckpt.config;
  check_same_classes(train, test);
  if (train.size() < 2) throw Error("fine-tuning needs at least two training clips");
  const bool multi = train.multi_label || test.multi_label;
  const auto C = static_cast<int>(train.class_names.size());
  if (C < 2) throw Error("fine-tuning needs at least two classes");
  profile.augment.validate();

  ParamStore params = ckpt.online.subset(names::kEncoder + ".");
  params.set_role(StoreRole::Online);
  for (auto& e : params.entries()) e.trainable = true;
  {
    Rng rng = Rng::derive(seed, {10});
    layers::init_linear(params, kHead, cfg.model.encoder.dim, C, rng);
  }
  if (profile.freeze_patch_embed) params.set_trainable(names::kPatchEmbed, false);
  const Matrix patch_w0 = params.at(layers::join(names::kPatchEmbed, "weight"));

  optim::OptimizerSpec spec;
  spec.kind = optim::parse_kind(profile.optimizer);
  spec.lr = profile.lr;
  spec.momentum = 0.9;
  spec.beta2 = 0.999;
  spec.weight_decay = spec.kind == optim::Kind::AdamW ? 0.05 : 0.0;
  spec.warmup_epochs = profile.warmup_epochs;
  spec.cosine = true;
  optim::Optimizer opt(spec, params);

  const auto train_specs = data::clip_spectrograms(train, cfg.mel_config(), cfg.norm_mean, cfg.norm_std, threads);
  const auto test_specs = data::clip_spectrograms(test, cfg.mel_config(), cfg.norm_mean, cfg.norm_std, threads);
  const PositionalEncoding base = sincos_2d(train::crop_grid(cfg), cfg.model.encoder.dim);
  const auto& aug = profile.augment;

  const size_t n = train.size();
  const size_t B = std::min(n, static_cast<size_t>(std::max(2, profile.batch_size)));
  const long spe = static_cast<long>(std::max<size_t>(1, n / B));
  std::vector<double> curve;

  for (int epoch = 0; epoch < profile.epochs; ++epoch) {
    std::vector<size_t> order(n);
    std::iota(order.begin(), order.end(), size_t{0});
    Rng erng = Rng::derive(seed, {11, static_cast<uint64_t>(epoch)});
    erng.shuffle(order);
    double epoch_loss = 0.0;
    for (long s = 0; s < spe; ++s) {
      const long step = epoch * spe + s;
      Rng brng = Rng::derive(seed, {12, static_cast<uint64_t>(step)});
      std::vector<augment::MixupItem> items(B);
      for (size_t i = 0; i < B; ++i) {
        const size_t k = order[static_cast<size_t>(s) * B + i];
        items[i].spec = train_specs[k];
        items[i].target = multi ? RowVector(train.multi_hot.row(static_cast<Eigen::Index>(k)))
                                : RowVector(RowVector::Unit(C, train.label[k]));
      }
      if (aug.mixup_ratio > 0.0) {
        for (const auto& it : items) {
          if (it.spec.rows() != items[0].spec.rows() || it.spec.cols() != items[0].spec.cols()) {
            throw Error("mixup needs clips of equal duration");
          }
        }
        items = augment::mixup(items, aug.mixup_ratio, brng);
      }

      std::vector<FtWork> work(B);
      parallel_for(B, threads, [&](size_t i) {
        Rng rng = Rng::derive(seed, {13, static_cast<uint64_t>(step), static_cast<uint64_t>(i)});
        Matrix x = items[i].spec;
        if (aug.rrc_enabled) x = augment::random_resize_crop(x, rng);
        if (aug.specaug_freq > 0 || aug.specaug_time > 0) {
          x = augment::spec_augment(x, std::min<int>(aug.specaug_freq, static_cast<int>(x.rows())),
                                    std::min<int>(aug.specaug_time, static_cast<int>(x.cols())), rng);
        }
        const PatchSequence seq = patchify(x, cfg.model.encoder.patch);
        const PositionalEncoding pe = posenc_for(base, seq.grid, profile.interpolate_posenc);
        std::vector<int> keep;
        if (aug.patchout_ratio > 0.0) {
          keep = augment::structured_patchout(seq.grid, aug.patchout_ratio, rng);
        } else {
          keep.resize(static_cast<size_t>(seq.size()));
          std::iota(keep.begin(), keep.end(), 0);
        }
        auto& w = work[i];
        const Matrix z = encode(params, cfg.model.encoder, gather_rows(seq.tokens, keep), gather_rows(pe.table, keep),
                                cfg.model.ln_eps, &w.enc);
        w.tokens = z.rows();
        w.pooled = z.colwise().mean();
        w.loss = head_loss(head_logits(params, w.pooled), items[i].target, multi, w.dlogits);
      });

      ParamStore grads = params.zeros_like();
      const size_t chunks = (B + train::kGradChunk - 1) / train::kGradChunk;
      std::vector<ParamStore> partial(chunks);
      const double inv_b = 1.0 / static_cast<double>(B);
      parallel_for(chunks, threads, [&](size_t c) {
        ParamStore g = grads.zeros_like();
        for (size_t i = c * train::kGradChunk; i < std::min(B, (c + 1) * train::kGradChunk); ++i) {
          const auto& w = work[i];
          const Matrix dpooled =
              layers::linear_backward(params, &g, kHead, Matrix(w.pooled), Matrix(w.dlogits * inv_b));
          Matrix dz(w.tokens, dpooled.cols());
          dz.rowwise() = dpooled.row(0) / static_cast<double>(w.tokens);
          encode_backward(params, &g, cfg.model.encoder, w.enc, dz);
        }
        partial[c] = std::move(g);
      });
      for (const auto& g : partial) grads.add_scaled(g, 1.0);
      double batch_loss = 0.0;
      for (const auto& w : work) batch_loss += w.loss;
      batch_loss *= inv_b;
      if (!std::isfinite(batch_loss) || !grads.all_finite()) {
        throw Error("non-finite fine-tuning loss at epoch " + std::to_string(epoch));
      }
      epoch_loss += batch_loss;
      const double pos = static_cast<double>(step + 1) / static_cast<double>(spe);
      opt.step(params, grads, optim::learning_rate(spec, pos, profile.epochs));
    }
    curve.push_back(epoch_loss / static_cast<double>(spe));
  }

  // Evaluation: no augmentation, every patch visible.
  Matrix scores(static_cast<Eigen::Index>(test.size()), C);
  parallel_for(test.size(), threads, [&](size_t i) {
    const PatchSequence seq = patchify(test_specs[i], cfg.model.encoder.patch);
    const PositionalEncoding pe = posenc_for(base, seq.grid, profile.interpolate_posenc);
    const Matrix z = encode(params, cfg.model.encoder, seq.tokens, pe.table, cfg.model.ln_eps);
    scores.row(static_cast<Eigen::Index>(i)) = head_logits(params, z.colwise().mean());
  });

  FinetuneOutput out;
  out.report = base_report(cfg, task, "finetune");
  if (multi) {
    out.report.metric = "mAP";
    out.report.value = zeroshot::mean_ap(scores, test.multi_hot).map;
  } else {
    std::vector<int> preds(test.size());
    for (size_t i = 0; i < test.size(); ++i) scores.row(static_cast<Eigen::Index>(i)).maxCoeff(&preds[i]);
    out.report.metric = "accuracy";
    out.report.value = zeroshot::accuracy(preds, class_labels(test));
  }
  out.max_patch_embed_change = (params.at(layers::join(names::kPatchEmbed, "weight")) - patch_w0).cwiseAbs().maxCoeff();
  out.patch_embed_frozen = out.max_patch_embed_change == 0.0;
  out.report.curve = curve;
  out.report.extra["epochs"] = profile.epochs;
  out.report.extra["lr"] = profile.lr;
  out.report.extra["batch_size"] = static_cast<double>(B);
  out.report.extra["patchout_ratio"] = aug.patchout_ratio;
  out.report.extra["mixup_ratio"] = aug.mixup_ratio;
  out.report.extra["patch_embed_frozen"] = out.patch_embed_frozen ? 1.0 : 0.0;
  out.params = std::move(params);
  return out;
}

}  // namespace m2dclap::eval
