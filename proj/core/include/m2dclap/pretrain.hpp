#pragma once

#include "m2dclap/config.hpp"
#include "m2dclap/dataset.hpp"
#include "m2dclap/tensor_file.hpp"

#include <filesystem>
#include <functional>
#include <string>
#include <vector>

namespace m2dclap::train {

struct PretrainSample {
  std::string id;
  Matrix tokens;  // all N patches
  MaskSplit mask;
  RowVector text;  // caption embedding
};

struct PretrainBatch {
  std::vector<PretrainSample> samples;
  PositionalEncoding pe;
};

struct LossParts {
  double total = 0.0;
  double m2d = 0.0;
  double clap = 0.0;
  double tau = 0.0;
};

// Samples per gradient chunk. Chunks are reduced in index order, so gradients
// are identical for any thread count.
inline constexpr size_t kGradChunk = 8;

// Forward pass of the combined objective over a batch; when `grads` is
// given, accumulates dL/dθ for the online store. The target store is only
// read. Branches whose loss weight is zero are not differentiated.
LossParts pretrain_loss(const ParamStore& online, const ParamStore& target, const ModelConfig& model,
                        const clap::LossWeights& weights, m2d::TargetNorm target_norm, const PretrainBatch& batch,
                        ParamStore* grads, int threads = 1);

// Freezes the tensors that a zero loss weight cuts off from the objective:
// projector and temperature for the contrastive term, predictor and mask
// token for the masked-prediction term.
void apply_weight_freezes(ParamStore& online, const clap::LossWeights& weights);

// Patch grid of a pre-training crop.
GridShape crop_grid(const RunConfig& cfg);
GridShape clip_grid(const RunConfig& cfg, size_t samples);

struct StepLog {
  long step = 0;  // 1-based count of completed steps
  double epoch = 0.0;
  double lr = 0.0;
  double alpha = 0.0;
  LossParts loss;
};

struct Checkpoint {
  RunConfig config;
  ParamStore online{StoreRole::Online};
  ParamStore target{StoreRole::Target};
  ParamStore adam_m{StoreRole::Gradient};
  ParamStore adam_v{StoreRole::Gradient};
  long step = 0;
};

inline constexpr const char* kCheckpointMagic = "M2DK";

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt);
Checkpoint load_checkpoint(const std::filesystem::path& path);

// Owns the training state; the only mutator of parameters.
class Pretrainer {
 public:
  // Fresh state from cfg.seed. `clips` must outlive the trainer.
  Pretrainer(RunConfig cfg, const data::ClipSet& clips, text::EmbeddingTable captions);
  // Resumes from a checkpoint; its stored config is used.
  Pretrainer(const Checkpoint& ckpt, const data::ClipSet& clips, text::EmbeddingTable captions);

  const RunConfig& config() const { return cfg_; }
  long steps_per_epoch() const;
  long total_steps() const { return steps_per_epoch() * cfg_.epochs; }
  long step_count() const { return step_; }
  bool done() const { return step_ >= total_steps(); }

  // Batch for a given global step: a pure function of (seed, step).
  PretrainBatch make_batch(long step) const;
  std::vector<std::string> batch_ids(long step) const;

  StepLog step();

  const ParamStore& online() const { return online_; }
  const ParamStore& target() const { return target_; }
  ParamStore& mutable_online() { return online_; }
  Checkpoint checkpoint() const;

 private:
  void check_data() const;

  RunConfig cfg_;
  const data::ClipSet* clips_;
  text::EmbeddingTable captions_;
  ParamStore online_{StoreRole::Online};
  ParamStore target_{StoreRole::Target};
  optim::Optimizer opt_;
  long step_ = 0;
  int threads_ = 1;
};

// CSV header and row used by the loss log.
std::string loss_log_header();
std::string loss_log_row(const StepLog& log);

}  // namespace m2dclap::train
