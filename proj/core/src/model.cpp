#include "m2dclap/model.hpp"

#include <cmath>

namespace m2dclap {

using layers::join;

namespace {

std::string block_name(const std::string& prefix, int i) { return prefix + ".blocks." + std::to_string(i); }

void check_positive(int v, const char* what) {
  if (v < 1) throw Error(std::string("model config: ") + what + " must be >= 1");
}

}  // namespace

void EncoderConfig::validate() const {
  if (depth < 0) throw Error("model config: encoder depth must be >= 0");
  check_positive(dim, "encoder dim");
  check_positive(heads, "encoder heads");
  if (dim % heads != 0) throw Error("model config: encoder dim must be divisible by heads");
  if (dim % 4 != 0) throw Error("model config: encoder dim must be a multiple of 4 (2D sin-cos encoding)");
  if (!(mlp_ratio > 0.0)) throw Error("model config: mlp_ratio must be positive");
  check_positive(patch.freq, "patch freq");
  check_positive(patch.time, "patch time");
}

void ModelConfig::validate() const {
  encoder.validate();
  if (predictor_depth < 0) throw Error("model config: predictor depth must be >= 0");
  check_positive(predictor_dim, "predictor dim");
  check_positive(predictor_heads, "predictor heads");
  if (predictor_dim % predictor_heads != 0) throw Error("model config: predictor dim must be divisible by heads");
  check_positive(projector_hidden, "projector hidden");
  check_positive(semantic_dim, "semantic dim");
  if (!(init_temperature > 0.0)) throw Error("model config: initial temperature must be positive");
}

ModelConfig ModelConfig::vit_base() {
  ModelConfig c;
  c.encoder.depth = 12;
  c.encoder.dim = 768;
  c.encoder.heads = 12;
  c.predictor_depth = 8;
  c.predictor_dim = 512;
  c.predictor_heads = 16;
  c.projector_hidden = 768;
  c.semantic_dim = 768;
  return c;
}

ParamStore init_online_params(const ModelConfig& cfg, Rng& rng) {
  cfg.validate();
  const int d = cfg.encoder.dim;
  ParamStore p(StoreRole::Online);

  layers::init_linear(p, names::kPatchEmbed, cfg.encoder.patch.size(), d, rng);
  for (int i = 0; i < cfg.encoder.depth; ++i) {
    layers::init_block(p, block_name(names::kEncoder, i), d, cfg.encoder.hidden(), rng);
  }
  layers::init_layer_norm(p, join(names::kEncoder, "norm"), d);

  Matrix& mask = p.add(names::kMaskToken, 1, d);
  for (Eigen::Index i = 0; i < mask.size(); ++i) mask.data()[i] = rng.normal(0.0, 0.02);
  layers::init_linear(p, join(names::kPredictor, "embed"), d, cfg.predictor_dim, rng);
  const int pred_hidden = static_cast<int>(cfg.predictor_dim * cfg.encoder.mlp_ratio + 0.5);
  for (int i = 0; i < cfg.predictor_depth; ++i) {
    layers::init_block(p, block_name(names::kPredictor, i), cfg.predictor_dim, pred_hidden, rng);
  }
  layers::init_layer_norm(p, join(names::kPredictor, "norm"), cfg.predictor_dim);
  layers::init_linear(p, join(names::kPredictor, "head"), cfg.predictor_dim, d, rng);

  layers::init_linear(p, join(names::kProjector, "fc1"), d, cfg.projector_hidden, rng);
  layers::init_linear(p, join(names::kProjector, "fc2"), cfg.projector_hidden, cfg.semantic_dim, rng);

  p.add(names::kLogitScale, Matrix::Constant(1, 1, std::log(1.0 / cfg.init_temperature)));
  return p;
}

ParamStore make_target(const ParamStore& online) {
  ParamStore t = online.subset(names::kEncoder + ".");
  t.set_role(StoreRole::Target);
  for (auto& e : t.entries()) e.trainable = false;
  return t;
}

size_t online_parameter_count(const ModelConfig& cfg) {
  Rng rng(0);
  return init_online_params(cfg, rng).parameter_count();
}

Matrix encode(const ParamStore& p, const EncoderConfig& cfg, const Matrix& tokens, const Matrix& pe_rows,
              double ln_eps, EncoderCache* cache) {
  if (tokens.rows() != pe_rows.rows()) throw ShapeError("encode: token and positional row counts differ");
  if (pe_rows.cols() != cfg.dim) throw ShapeError("encode: positional encoding width != encoder dim");
  Matrix x = layers::linear(p, names::kPatchEmbed, tokens) + pe_rows;
  if (cache != nullptr) {
    cache->tokens = tokens;
    cache->blocks.assign(static_cast<size_t>(cfg.depth), {});
  }
  for (int i = 0; i < cfg.depth; ++i) {
    x = layers::block(p, block_name(names::kEncoder, i), x, cfg.heads, ln_eps,
                      cache ? &cache->blocks[static_cast<size_t>(i)] : nullptr);
  }
  return layers::layer_norm(p, join(names::kEncoder, "norm"), x, ln_eps, cache ? &cache->norm : nullptr);
}

void encode_backward(const ParamStore& p, ParamStore* g, const EncoderConfig& cfg, const EncoderCache& cache,
                     const Matrix& dz) {
  Matrix dx = layers::layer_norm_backward(p, g, join(names::kEncoder, "norm"), cache.norm, dz);
  for (int i = cfg.depth - 1; i >= 0; --i) {
    dx = layers::block_backward(p, g, block_name(names::kEncoder, i), cfg.heads,
                                cache.blocks[static_cast<size_t>(i)], dx);
  }
  // The positional rows are constants; only the patch-embed weights see dx.
  layers::linear_backward(p, g, names::kPatchEmbed, cache.tokens, dx);
}

Matrix predict_masked(const ParamStore& p, const ModelConfig& cfg, const Matrix& z_v, const MaskSplit& split,
                      const PositionalEncoding& pe, PredictorCache* cache) {
  const int n = split.total();
  const int d = cfg.encoder.dim;
  if (z_v.rows() != static_cast<Eigen::Index>(split.visible_idx.size())) {
    throw ShapeError("predict_masked: z_v rows != visible count");
  }
  if (z_v.cols() != d) throw ShapeError("predict_masked: z_v width != encoder dim");
  if (pe.table.rows() != n || pe.dim() != d) throw ShapeError("predict_masked: positional table mismatch");
  const Matrix& head_w = p.at(join(join(names::kPredictor, "head"), "weight"));
  if (head_w.rows() != d) throw ShapeError("predict_masked: predictor output dim != target encoder dim");
  if (split.masked_idx.empty()) return Matrix(0, d);

  // Reassemble by original grid position.
  Matrix x(n, d);
  const RowVector& m = p.at(names::kMaskToken).row(0);
  for (size_t i = 0; i < split.visible_idx.size(); ++i) x.row(split.visible_idx[i]) = z_v.row(static_cast<Eigen::Index>(i));
  for (int idx : split.masked_idx) x.row(idx) = m;
  if (cfg.predictor_posenc) x += pe.table;

  Matrix h = layers::linear(p, join(names::kPredictor, "embed"), x);
  if (cache != nullptr) {
    cache->visible_idx = split.visible_idx;
    cache->masked_idx = split.masked_idx;
    cache->assembled = x;
    cache->blocks.assign(static_cast<size_t>(cfg.predictor_depth), {});
  }
  for (int i = 0; i < cfg.predictor_depth; ++i) {
    h = layers::block(p, block_name(names::kPredictor, i), h, cfg.predictor_heads, cfg.ln_eps,
                      cache ? &cache->blocks[static_cast<size_t>(i)] : nullptr);
  }
  Matrix normed = layers::layer_norm(p, join(names::kPredictor, "norm"), h, cfg.ln_eps, cache ? &cache->norm : nullptr);
  const Matrix selected = gather_rows(normed, split.masked_idx);
  if (cache != nullptr) cache->normed = selected;
  return layers::linear(p, join(names::kPredictor, "head"), selected);
}

Matrix predict_masked_backward(const ParamStore& p, ParamStore* g, const ModelConfig& cfg,
                               const PredictorCache& cache, const Matrix& dpred) {
  const int d = cfg.encoder.dim;
  if (cache.masked_idx.empty()) return Matrix::Zero(static_cast<Eigen::Index>(cache.visible_idx.size()), d);
  const Matrix dsel = layers::linear_backward(p, g, join(names::kPredictor, "head"), cache.normed, dpred);
  Matrix dnormed = Matrix::Zero(cache.assembled.rows(), cfg.predictor_dim);
  for (size_t i = 0; i < cache.masked_idx.size(); ++i) dnormed.row(cache.masked_idx[i]) = dsel.row(static_cast<Eigen::Index>(i));
  Matrix dh = layers::layer_norm_backward(p, g, join(names::kPredictor, "norm"), cache.norm, dnormed);
  for (int i = cfg.predictor_depth - 1; i >= 0; --i) {
    dh = layers::block_backward(p, g, block_name(names::kPredictor, i), cfg.predictor_heads,
                                cache.blocks[static_cast<size_t>(i)], dh);
  }
  const Matrix dx = layers::linear_backward(p, g, join(names::kPredictor, "embed"), cache.assembled, dh);

  if (g != nullptr && g->trainable(names::kMaskToken)) {
    Matrix& dm = g->at(names::kMaskToken);
    for (int idx : cache.masked_idx) dm.row(0) += dx.row(idx);
  }
  Matrix dz(static_cast<Eigen::Index>(cache.visible_idx.size()), d);
  for (size_t i = 0; i < cache.visible_idx.size(); ++i) dz.row(static_cast<Eigen::Index>(i)) = dx.row(cache.visible_idx[i]);
  return dz;
}

RowVector project_semantic(const ParamStore& p, const Matrix& z, ProjectorCache* cache) {
  if (z.rows() == 0) throw Error("project_semantic: no tokens to pool");
  Matrix pooled = z.colwise().mean();
  Matrix hidden = layers::linear(p, join(names::kProjector, "fc1"), pooled);
  Matrix act = layers::gelu(hidden);
  RowVector out = layers::linear(p, join(names::kProjector, "fc2"), act).row(0);
  if (cache != nullptr) {
    cache->pooled = std::move(pooled);
    cache->hidden = std::move(hidden);
    cache->act = std::move(act);
    cache->tokens = z.rows();
  }
  return out;
}

Matrix project_semantic_backward(const ParamStore& p, ParamStore* g, const ProjectorCache& cache,
                                 const RowVector& ds) {
  const Matrix dact = layers::linear_backward(p, g, join(names::kProjector, "fc2"), cache.act, Matrix(ds));
  const Matrix dhidden = layers::gelu_backward(cache.hidden, dact);
  const Matrix dpooled = layers::linear_backward(p, g, join(names::kProjector, "fc1"), cache.pooled, dhidden);
  Matrix dz(cache.tokens, dpooled.cols());
  dz.rowwise() = dpooled.row(0) / static_cast<double>(cache.tokens);
  return dz;
}

Matrix encode_all(const ParamStore& p, const ModelConfig& cfg, const PatchSequence& seq,
                  const PositionalEncoding& pe) {
  if (pe.table.rows() != seq.size()) throw ShapeError("encode_all: positional table does not match grid");
  return encode(p, cfg.encoder, seq.tokens, pe.table, cfg.ln_eps);
}

double temperature(const ParamStore& online) { return std::exp(-online.at(names::kLogitScale)(0, 0)); }

}  // namespace m2dclap
