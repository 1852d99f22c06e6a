#include "m2dclap/gradcheck.hpp"
#include "m2dclap/model.hpp"
#include "m2dclap/tensor_file.hpp"
#include "test_util.hpp"

#include <gtest/gtest.h>

#include <fstream>

using namespace m2dclap;
using testutil::random_matrix;
using testutil::tiny_model;

namespace {

// Random linear functional of a matrix output: sum(W .* y).
double probe(const Matrix& y, const Matrix& w) { return (y.array() * w.array()).sum(); }

}  // namespace

TEST(Layers, LinearGradients) {
  Rng rng(1);
  ParamStore p;
  layers::init_linear(p, "fc", 5, 3, rng);
  const Matrix x = random_matrix(4, 5, rng);
  const Matrix w = random_matrix(4, 3, rng);
  ParamStore g = p.zeros_like();
  const Matrix dx = layers::linear_backward(p, &g, "fc", x, w);
  EXPECT_TRUE(grad_check([&](const ParamStore& q) { return probe(layers::linear(q, "fc", x), w); }, p, g).passed(1e-6));
  EXPECT_TRUE(grad_check([&](const Matrix& xx) { return probe(layers::linear(p, "fc", xx), w); }, x, dx).passed(1e-6));
}

TEST(Layers, LayerNormGeluBlockGradients) {
  Rng rng(2);
  ParamStore p;
  layers::init_block(p, "b", 8, 16, rng);
  // Non-trivial affine parameters.
  for (auto& e : p.entries()) e.value += random_matrix(e.value.rows(), e.value.cols(), rng, 0.1);
  const Matrix x = random_matrix(5, 8, rng);
  const Matrix w = random_matrix(5, 8, rng);
  layers::BlockCache cache;
  layers::block(p, "b", x, 2, 1e-6, &cache);
  ParamStore g = p.zeros_like();
  const Matrix dx = layers::block_backward(p, &g, "b", 2, cache, w);
  auto f = [&](const ParamStore& q) { return probe(layers::block(q, "b", x, 2, 1e-6, nullptr), w); };
  GradCheckOptions o;
  o.coords_per_tensor = 64;
  const auto rp = grad_check(f, p, g, o);
  EXPECT_LT(rp.max_rel_error, 1e-5) << rp.worst;
  const auto rx = grad_check([&](const Matrix& xx) { return probe(layers::block(p, "b", xx, 2, 1e-6, nullptr), w); },
                             x, dx, o);
  EXPECT_LT(rx.max_rel_error, 1e-5) << rx.worst;
}

TEST(Layers, StandardizeRows) {
  Rng rng(3);
  const Matrix x = random_matrix(6, 10, rng, 3.0);
  const Matrix y = layers::standardize_rows(x, 1e-6);
  for (Eigen::Index i = 0; i < y.rows(); ++i) {
    EXPECT_NEAR(y.row(i).mean(), 0.0, 1e-12);
    EXPECT_NEAR((y.row(i).array() - y.row(i).mean()).square().mean(), 1.0, 1e-5);
  }
  const Matrix c = Matrix::Constant(2, 4, 3.0);
  const Matrix z = layers::standardize_rows(c, 1e-6);
  EXPECT_TRUE(z.allFinite());
  EXPECT_LT(z.cwiseAbs().maxCoeff(), 1e-9);
}

TEST(Layers, GeluMatchesErfDefinition) {
  Matrix x(1, 3);
  x << -1.0, 0.0, 2.0;
  const Matrix y = layers::gelu(x);
  EXPECT_NEAR(y(0, 0), -0.15865525393145707, 1e-12);
  EXPECT_EQ(y(0, 1), 0.0);
  EXPECT_NEAR(y(0, 2), 1.9544997361036416, 1e-12);
}

TEST(Encoder, ShapeAndDeterminism) {
  ModelConfig cfg;
  Rng rng(4);
  const ParamStore p = init_online_params(cfg, rng);
  const auto pe = sincos_2d({5, 38}, 64);
  Rng mr(5);
  const auto split = make_mask(190, 0.7, mr);
  const Matrix tokens = random_matrix(190, 256, rng);
  const Matrix xv = gather_rows(tokens, split.visible_idx);
  const Matrix pv = gather_rows(pe.table, split.visible_idx);
  const Matrix z1 = encode(p, cfg.encoder, xv, pv, cfg.ln_eps);
  EXPECT_EQ(z1.rows(), 57);
  EXPECT_EQ(z1.cols(), 64);
  EXPECT_EQ(encode(p, cfg.encoder, xv, pv, cfg.ln_eps), z1);
}

TEST(Encoder, ZeroDepthIsEmbedPlusPosenc) {
  ModelConfig cfg = tiny_model();
  cfg.encoder.depth = 0;
  Rng rng(6);
  const ParamStore p = init_online_params(cfg, rng);
  const Matrix x = random_matrix(8, 16, rng);
  const Matrix pe = sincos_2d({2, 4}, 8).table;
  const Matrix z = encode(p, cfg.encoder, x, pe, cfg.ln_eps);
  // The final norm is the only remaining op.
  ParamStore q = p;
  const Matrix embedded = layers::linear(q, names::kPatchEmbed, x) + pe;
  layers::LayerNormCache c;
  EXPECT_LT((z - layers::layer_norm(p, "encoder.norm", embedded, cfg.ln_eps, &c)).cwiseAbs().maxCoeff(), 1e-14);
}

TEST(Encoder, GradientsMatchFiniteDifferences) {
  const ModelConfig cfg = tiny_model();
  Rng rng(7);
  const ParamStore p = init_online_params(cfg, rng);
  const Matrix x = random_matrix(6, 16, rng);
  const Matrix pe = random_matrix(6, 8, rng);
  const Matrix w = random_matrix(6, 8, rng);
  EncoderCache cache;
  encode(p, cfg.encoder, x, pe, cfg.ln_eps, &cache);
  ParamStore g = p.zeros_like();
  encode_backward(p, &g, cfg.encoder, cache, w);
  GradCheckOptions o;
  o.prefix = "encoder.";
  o.coords_per_tensor = 32;
  const auto r = grad_check([&](const ParamStore& q) { return probe(encode(q, cfg.encoder, x, pe, cfg.ln_eps), w); },
                            p, g, o);
  EXPECT_LT(r.max_rel_error, 1e-4) << r.worst;
}

TEST(Predictor, ShapeEmptyAndPermutationInvariance) {
  ModelConfig cfg;
  Rng rng(8);
  const ParamStore p = init_online_params(cfg, rng);
  const auto pe = sincos_2d({5, 38}, 64);
  Rng mr(9);
  const auto split = make_mask(190, 0.7, mr);
  const Matrix zv = random_matrix(57, 64, rng);
  const Matrix out = predict_masked(p, cfg, zv, split, pe);
  EXPECT_EQ(out.rows(), 133);
  EXPECT_EQ(out.cols(), 64);

  // Storage permutation of the visible set with matching z_v rows.
  MaskSplit perm = split;
  Matrix zp(57, 64);
  for (int i = 0; i < 57; ++i) {
    perm.visible_idx[static_cast<size_t>(i)] = split.visible_idx[static_cast<size_t>(56 - i)];
    zp.row(i) = zv.row(56 - i);
  }
  EXPECT_LT((predict_masked(p, cfg, zp, perm, pe) - out).cwiseAbs().maxCoeff(), 1e-12);

  const auto none = all_visible(190);
  EXPECT_EQ(predict_masked(p, cfg, random_matrix(190, 64, rng), none, pe).rows(), 0);
}

TEST(Predictor, GradientsIncludingMaskToken) {
  const ModelConfig cfg = tiny_model();
  Rng rng(10);
  ParamStore p = init_online_params(cfg, rng);
  p.at(names::kMaskToken) = random_matrix(1, 8, rng, 0.5);
  const auto pe = sincos_2d({2, 4}, 8);
  Rng mr(11);
  const auto split = make_mask(8, 0.5, mr);
  const Matrix zv = random_matrix(4, 8, rng);
  const Matrix w = random_matrix(4, 8, rng);
  PredictorCache cache;
  predict_masked(p, cfg, zv, split, pe, &cache);
  ParamStore g = p.zeros_like();
  const Matrix dz = predict_masked_backward(p, &g, cfg, cache, w);
  GradCheckOptions o;
  o.prefix = "predictor.";
  o.coords_per_tensor = 32;
  const auto r =
      grad_check([&](const ParamStore& q) { return probe(predict_masked(q, cfg, zv, split, pe), w); }, p, g, o);
  EXPECT_LT(r.max_rel_error, 1e-5) << r.worst;
  const auto rz =
      grad_check([&](const Matrix& z) { return probe(predict_masked(p, cfg, z, split, pe), w); }, zv, dz, o);
  EXPECT_LT(rz.max_rel_error, 1e-5) << rz.worst;
}

TEST(Projector, MeanPoolingContracts) {
  ModelConfig cfg;
  Rng rng(12);
  const ParamStore p = init_online_params(cfg, rng);
  const RowVector t = random_matrix(1, 64, rng).row(0);
  const RowVector one = project_semantic(p, Matrix(t));
  for (int k : {2, 5, 17}) {
    Matrix rep(k, 64);
    rep.rowwise() = t;
    EXPECT_LT((project_semantic(p, rep) - one).cwiseAbs().maxCoeff(), 1e-12);
  }
  EXPECT_EQ(one.size(), cfg.semantic_dim);
  EXPECT_EQ(project_semantic(init_online_params(ModelConfig::vit_base(), rng), random_matrix(3, 768, rng)).size(), 768);
  EXPECT_THROW(project_semantic(p, Matrix(0, 64)), Error);
}

TEST(Projector, Gradients) {
  const ModelConfig cfg = tiny_model();
  Rng rng(13);
  const ParamStore p = init_online_params(cfg, rng);
  const Matrix z = random_matrix(5, 8, rng);
  const RowVector w = random_matrix(1, 8, rng).row(0);
  ProjectorCache cache;
  project_semantic(p, z, &cache);
  ParamStore g = p.zeros_like();
  const Matrix dz = project_semantic_backward(p, &g, cache, w);
  GradCheckOptions o;
  o.prefix = "projector.";
  o.coords_per_tensor = 64;
  auto f = [&](const ParamStore& q) { return project_semantic(q, z).dot(w); };
  EXPECT_LT(grad_check(f, p, g, o).max_rel_error, 1e-6);
  EXPECT_LT(grad_check([&](const Matrix& zz) { return project_semantic(p, zz).dot(w); }, z, dz, o).max_rel_error, 1e-6);
}

TEST(GradCheck, ConstantFunctionHasZeroGradient) {
  Rng rng(14);
  ParamStore p;
  p.add("a", random_matrix(3, 3, rng));
  const ParamStore g = p.zeros_like();
  const auto r = grad_check([](const ParamStore&) { return 1.5; }, p, g);
  EXPECT_EQ(r.max_abs_error, 0.0);
  EXPECT_EQ(r.max_rel_error, 0.0);
}

namespace {

size_t block_params(size_t d, size_t h) { return 4 * d + (3 * d * d + 3 * d) + (d * d + d) + (h * d + h) + (d * h + d); }

// Closed form: patch embed, blocks, norms, mask token, predictor in/out maps,
// projector MLP and the logit scale.
size_t count_oracle(const ModelConfig& c) {
  const size_t d = c.encoder.dim, p = c.encoder.patch.size(), pd = c.predictor_dim;
  const size_t eh = static_cast<size_t>(c.encoder.hidden());
  const size_t ph = static_cast<size_t>(pd * c.encoder.mlp_ratio + 0.5);
  size_t n = p * d + d + c.encoder.depth * block_params(d, eh) + 2 * d;
  n += d + (d * pd + pd) + c.predictor_depth * block_params(pd, ph) + 2 * pd + (pd * d + d);
  n += (d * c.projector_hidden + c.projector_hidden) + (c.projector_hidden * c.semantic_dim + c.semantic_dim);
  return n + 1;
}

}  // namespace

TEST(Params, CountIsPureFunctionOfConfig) {
  EXPECT_EQ(online_parameter_count(ModelConfig{}), count_oracle(ModelConfig{}));
  EXPECT_EQ(online_parameter_count(tiny_model()), count_oracle(tiny_model()));
  EXPECT_LT(online_parameter_count(tiny_model()), 5000u);
  // ViT-B/16 encoder on 16x16 single-channel patches: 85,253,376 weights.
  Rng vr(3);
  EXPECT_EQ(init_online_params(ModelConfig::vit_base(), vr).subset("encoder.").parameter_count(), 85253376u);
  Rng a(1), b(2);
  EXPECT_EQ(init_online_params(ModelConfig{}, a).parameter_count(), init_online_params(ModelConfig{}, b).parameter_count());
}

TEST(Params, TargetIsNonTrainableEncoderCopy) {
  Rng rng(15);
  const ParamStore online = init_online_params(tiny_model(), rng);
  const ParamStore target = make_target(online);
  EXPECT_EQ(target.role(), StoreRole::Target);
  for (const auto& e : target.entries()) {
    EXPECT_EQ(e.name.rfind("encoder.", 0), 0u);
    EXPECT_FALSE(target.trainable(e.name));
    EXPECT_EQ(e.value, online.at(e.name));
  }
  EXPECT_EQ(target.size(), online.subset("encoder.").size());
}

TEST(Params, FrozenTensorsReceiveNoGradient) {
  const ModelConfig cfg = tiny_model();
  Rng rng(16);
  ParamStore p = init_online_params(cfg, rng);
  p.set_trainable(names::kPatchEmbed, false);
  EncoderCache cache;
  const Matrix x = random_matrix(4, 16, rng);
  encode(p, cfg.encoder, x, Matrix::Zero(4, 8), cfg.ln_eps, &cache);
  ParamStore g = p.zeros_like();
  encode_backward(p, &g, cfg.encoder, cache, random_matrix(4, 8, rng));
  EXPECT_EQ(g.at("encoder.patch_embed.weight").cwiseAbs().maxCoeff(), 0.0);
  EXPECT_EQ(g.at("encoder.patch_embed.bias").cwiseAbs().maxCoeff(), 0.0);
  EXPECT_GT(g.at("encoder.norm.gamma").cwiseAbs().maxCoeff(), 0.0);
}

TEST(TensorFile, RoundTripBothDtypes) {
  const auto dir = testutil::temp_dir("tensorfile");
  Rng rng(17);
  TensorFile f;
  f.header = "hello = world\n";
  f.tensors.push_back({"a/x", random_matrix(3, 4, rng), DType::F64});
  f.tensors.push_back({"a/y", random_matrix(2, 2, rng), DType::F32});
  save_tensor_file(dir / "t.bin", f);
  const auto r = load_tensor_file(dir / "t.bin", "M2DK");
  EXPECT_EQ(r.header, f.header);
  EXPECT_EQ(r.get("a/x"), f.tensors[0].value);
  EXPECT_EQ(r.get("a/y"), f.tensors[1].value.cast<float>().cast<double>());
  EXPECT_THROW(load_tensor_file(dir / "t.bin", "M2DF"), FormatError);
}

TEST(TensorFile, CorruptionDetected) {
  const auto dir = testutil::temp_dir("tensorbad");
  Rng rng(18);
  TensorFile f;
  f.tensors.push_back({"x", random_matrix(4, 4, rng), DType::F64});
  save_tensor_file(dir / "t.bin", f);
  std::string bytes;
  {
    std::ifstream in(dir / "t.bin", std::ios::binary);
    bytes.assign(std::istreambuf_iterator<char>(in), {});
  }
  std::string flipped = bytes;
  flipped[flipped.size() / 2] ^= 0x40;
  std::ofstream(dir / "flip.bin", std::ios::binary) << flipped;
  EXPECT_THROW(load_tensor_file(dir / "flip.bin", "M2DK"), FormatError);
  std::ofstream(dir / "short.bin", std::ios::binary) << bytes.substr(0, bytes.size() - 7);
  EXPECT_THROW(load_tensor_file(dir / "short.bin", "M2DK"), FormatError);
}
