#pragma once

#include "m2dclap/audio_frontend.hpp"
#include "m2dclap/clap_objective.hpp"
#include "m2dclap/linear_eval.hpp"
#include "m2dclap/m2d_objective.hpp"
#include "m2dclap/model.hpp"
#include "m2dclap/optim.hpp"

#include <filesystem>
#include <string>
#include <vector>

namespace m2dclap {

// Everything a run depends on. Serialized verbatim into checkpoints and
// hashed into reports.
struct RunConfig {
  ModelConfig model{};

  audio::MelConfig mel{};
  double crop_seconds = 6.0;
  double norm_mean = -7.1;
  double norm_std = 4.2;

  double mask_ratio = 0.7;
  clap::LossWeights weights{};
  int batch_size = 64;
  int epochs = 20;
  optim::OptimizerSpec optimizer{};
  m2d::EmaSchedule ema{};
  m2d::TargetNorm target_norm = m2d::TargetNorm::PerToken;

  std::string train_manifest;
  std::string test_manifest;
  std::string embedding_table;
  // Captions missing from the table are embedded with the toy embedder.
  bool toy_embed_fallback = false;

  std::string finetune_profile = "esc50";
  double finetune_lr = 0.0;         // 0: profile value
  int finetune_epochs = 0;          // 0: profile value
  int finetune_batch_size = 0;      // 0: profile value
  int finetune_warmup_epochs = -1;  // -1: profile value
  std::string finetune_optimizer;   // empty: profile value

  linear::Pooling pooling = linear::Pooling::FreqStackTimeMean;
  std::vector<uint64_t> probe_seeds{1, 2, 3};
  linear::ProbeOptions probe{};

  std::string zeroshot_task = "synthetic";
  std::string caption_rules;  // optional rule file

  uint64_t seed = 42;
  int threads = 0;  // 0: hardware concurrency

  static RunConfig desk();
  static RunConfig full_scale();

  void set(const std::string& key, const std::string& value);
  std::string get(const std::string& key) const;
  void validate() const;

  // "key = value" lines in a fixed order, with a comment per key when
  // `documented`. Parsing the output reproduces the config exactly.
  std::string serialize(bool documented = false) const;
  static RunConfig parse(const std::string& text, RunConfig base = desk());
  static RunConfig load(const std::filesystem::path& path);
  void save(const std::filesystem::path& path) const;

  // Applies "key=value" overrides in order.
  void apply_overrides(const std::vector<std::string>& overrides);

  // Mel settings with the padding value tied to the standardization mean.
  audio::MelConfig mel_config() const {
    audio::MelConfig m = mel;
    m.pad_value = norm_mean;
    return m;
  }

  uint64_t hash() const;
  int resolved_threads() const;
  static std::vector<std::string> keys();
};

}  // namespace m2dclap
