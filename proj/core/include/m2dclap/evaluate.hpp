#pragma once

#include "m2dclap/augment.hpp"
#include "m2dclap/pretrain.hpp"
#include "m2dclap/zeroshot_eval.hpp"

#include <filesystem>
#include <map>
#include <string>
#include <vector>

namespace m2dclap::eval {

struct EvalReport {
  std::string task;
  std::string protocol;  // linear | finetune | zeroshot
  std::string metric;    // accuracy | mAP
  double value = 0.0;
  double ci95 = -1.0;  // negative: not applicable
  std::string config_hash;
  std::string timestamp;  // ISO 8601 UTC
  std::map<std::string, double> extra;
  std::vector<double> curve;  // per-epoch training loss where applicable

  std::string to_json() const;
  static EvalReport from_json(const std::string& text);
};

void save_report(const std::filesystem::path& path, const EvalReport& r);
EvalReport load_report(const std::filesystem::path& path);
std::string utc_timestamp();
std::string hex_hash(uint64_t h);

// Encodes each clip (every patch visible, positional table interpolated from
// the pre-training grid) and projects it into the shared space.
Matrix audio_embeddings(const ParamStore& online, const RunConfig& cfg, const std::vector<Matrix>& spectrograms,
                        int threads);

// Caption embedding per class prompt. Prompts missing from the table are
// toy-embedded only when `toy_fallback` is set; otherwise that is an error.
Matrix class_prompt_embeddings(const std::vector<std::string>& class_names, const std::string& task,
                               const zeroshot::CaptionRuleSet& rules, const text::EmbeddingTable* table,
                               bool toy_fallback, int dim);

EvalReport run_zeroshot(const train::Checkpoint& ckpt, const data::ClipSet& test, const zeroshot::CaptionRuleSet& rules,
                        const text::EmbeddingTable* table, const std::string& task, int threads);

struct LinearEvalOutput {
  EvalReport report;
  double centroid_accuracy = 0.0;
  linear::FeatureCache train_features;
  linear::FeatureCache test_features;
};

LinearEvalOutput run_linear(const train::Checkpoint& ckpt, const data::ClipSet& train, const data::ClipSet& test,
                            const std::string& task, int threads);

// Profile with the config's overrides applied.
augment::FinetuneProfile resolve_profile(const RunConfig& cfg);

struct FinetuneOutput {
  EvalReport report;
  ParamStore params;  // fine-tuned encoder + head
  bool patch_embed_frozen = false;
  double max_patch_embed_change = 0.0;
};

// Attaches a linear head to the mean-pooled encoder output and trains the
// encoder and head on `train` with the profile's optimizer, warm-up and
// augmentations; reports accuracy (single-label) or mAP (multi-label) on
// `test`.
FinetuneOutput run_finetune(const train::Checkpoint& ckpt, const data::ClipSet& train, const data::ClipSet& test,
                            const augment::FinetuneProfile& profile, const std::string& task, uint64_t seed,
                            int threads);

}  // namespace m2dclap::eval
