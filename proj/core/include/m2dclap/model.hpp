#pragma once

#include "m2dclap/layers.hpp"
#include "m2dclap/params.hpp"
#include "m2dclap/patchgrid.hpp"

#include <string>
#include <vector>

namespace m2dclap {

struct EncoderConfig {
  int depth = 3;
  int dim = 64;
  int heads = 4;
  double mlp_ratio = 4.0;
  PatchShape patch{};

  int hidden() const { return static_cast<int>(dim * mlp_ratio + 0.5); }
  void validate() const;
};

struct ModelConfig {
  EncoderConfig encoder{};
  int predictor_depth = 2;
  int predictor_dim = 32;
  int predictor_heads = 4;
  int projector_hidden = 128;
  int semantic_dim = 64;
  // Re-add the positional encoding at the predictor input.
  bool predictor_posenc = true;
  double ln_eps = 1e-6;
  double init_temperature = 0.07;

  void validate() const;
  // Full-size shapes (ViT-Base encoder, 768-d semantic space).
  static ModelConfig vit_base();
};

// Parameter names used across modules.
namespace names {
inline const std::string kEncoder = "encoder";
inline const std::string kPredictor = "predictor";
inline const std::string kProjector = "projector";
inline const std::string kPatchEmbed = "encoder.patch_embed";
inline const std::string kMaskToken = "predictor.mask_token";
inline const std::string kLogitScale = "clap.logit_scale";
}  // namespace names

// Online store: encoder.*, predictor.*, projector.*, clap.logit_scale.
ParamStore init_online_params(const ModelConfig& cfg, Rng& rng);
// Target store: a copy of the online encoder tensors with the target role.
ParamStore make_target(const ParamStore& online);

// Total parameter count of the online store for a config.
size_t online_parameter_count(const ModelConfig& cfg);

struct EncoderCache {
  Matrix tokens;  // raw patch values
  std::vector<layers::BlockCache> blocks;
  layers::LayerNormCache norm;
};

// tokens: k x patch_dim, pe_rows: k x D (the positional rows of those tokens).
Matrix encode(const ParamStore& p, const EncoderConfig& cfg, const Matrix& tokens, const Matrix& pe_rows,
              double ln_eps, EncoderCache* cache = nullptr);
// Accumulates parameter gradients; the patch values get no gradient.
void encode_backward(const ParamStore& p, ParamStore* g, const EncoderConfig& cfg, const EncoderCache& cache,
                     const Matrix& dz);

struct PredictorCache {
  std::vector<int> visible_idx;
  std::vector<int> masked_idx;
  Matrix assembled;  // N x D, before the embed projection
  std::vector<layers::BlockCache> blocks;
  layers::LayerNormCache norm;
  Matrix normed;  // masked rows of the normalized output
};

// Places z_v rows at visible positions and the mask token at masked positions,
// adds the full positional table, runs the predictor and returns the rows at
// masked positions in masked_idx order.
Matrix predict_masked(const ParamStore& p, const ModelConfig& cfg, const Matrix& z_v, const MaskSplit& split,
                      const PositionalEncoding& pe, PredictorCache* cache = nullptr);
// Returns dL/dz_v (rows in split.visible_idx storage order).
Matrix predict_masked_backward(const ParamStore& p, ParamStore* g, const ModelConfig& cfg,
                               const PredictorCache& cache, const Matrix& dpred);

struct ProjectorCache {
  Matrix pooled;  // 1 x D
  Matrix hidden;  // pre-activation
  Matrix act;
  Eigen::Index tokens = 0;
};

// Mean over token rows, then the two-layer GELU MLP. Returns 1 x d_s.
RowVector project_semantic(const ParamStore& p, const Matrix& z, ProjectorCache* cache = nullptr);
// Returns dL/dz (k x D).
Matrix project_semantic_backward(const ParamStore& p, ParamStore* g, const ProjectorCache& cache,
                                 const RowVector& ds);

// Convenience: encode every patch of a sequence with no masking.
Matrix encode_all(const ParamStore& p, const ModelConfig& cfg, const PatchSequence& seq,
                  const PositionalEncoding& pe);

double temperature(const ParamStore& online);

}  // namespace m2dclap
