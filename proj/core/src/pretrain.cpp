#include "m2dclap/pretrain.hpp"

#include "m2dclap/parallel.hpp"

#include <cmath>
#include <cstdio>
#include <sstream>

namespace m2dclap::train {

namespace {

struct SampleWork {
  EncoderCache enc;
  PredictorCache pred;
  ProjectorCache proj;
  Matrix dpred;  // dL_m2d/dpred for this sample, unscaled
  RowVector s_a;
  double m2d = 0.0;
};

}  // namespace

LossParts pretrain_loss(const ParamStore& online, const ParamStore& target, const ModelConfig& model,
                        const clap::LossWeights& weights, m2d::TargetNorm target_norm, const PretrainBatch& batch,
                        ParamStore* grads, int threads) {
  const size_t B = batch.samples.size();
  if (B == 0) throw Error("pretrain_loss: empty batch");
  const PositionalEncoding& pe = batch.pe;
  std::vector<SampleWork> work(B);

  parallel_for(B, threads, [&](size_t i) {
    const auto& s = batch.samples[i];
    auto& w = work[i];
    if (s.tokens.rows() != pe.table.rows()) throw ShapeError("pretrain_loss: sample grid differs from the batch grid");
    if (s.mask.visible_idx.empty()) throw Error("pretrain_loss: every patch is masked");
    const Matrix x_v = gather_rows(s.tokens, s.mask.visible_idx);
    const Matrix pe_v = gather_rows(pe.table, s.mask.visible_idx);
    const Matrix z_v = encode(online, model.encoder, x_v, pe_v, model.ln_eps, &w.enc);
    if (!s.mask.masked_idx.empty()) {
      const Matrix pred = predict_masked(online, model, z_v, s.mask, pe, &w.pred);
      const auto tgt = m2d::target_forward(target, model, gather_rows(s.tokens, s.mask.masked_idx),
                                           gather_rows(pe.table, s.mask.masked_idx), target_norm);
      const auto l = m2d::m2d_loss(pred, tgt.standardized);
      w.m2d = l.value;
      w.dpred = l.grad;
    }
    w.s_a = project_semantic(online, z_v, &w.proj);
  });

  LossParts parts;
  Matrix A(static_cast<Eigen::Index>(B), model.semantic_dim);
  Matrix T(static_cast<Eigen::Index>(B), model.semantic_dim);
  for (size_t i = 0; i < B; ++i) {
    if (batch.samples[i].text.size() != model.semantic_dim) {
      throw ShapeError("pretrain_loss: caption embedding size != semantic dim");
    }
    A.row(static_cast<Eigen::Index>(i)) = work[i].s_a;
    T.row(static_cast<Eigen::Index>(i)) = batch.samples[i].text;
    parts.m2d += work[i].m2d;
  }
  parts.m2d /= static_cast<double>(B);
  parts.tau = temperature(online);
  const Matrix S = clap::similarity(A, T);
  const auto nt = clap::nt_xent(S, parts.tau);
  parts.clap = nt.loss;
  parts.total = clap::combined_loss(parts.m2d, parts.clap, weights);
  if (grads == nullptr) return parts;

  const bool do_m2d = weights.m2d != 0.0;
  const bool do_clap = weights.clap != 0.0;
  Matrix dA;
  if (do_clap) {
    dA = clap::similarity_backward_audio(A, T, nt.dS) * weights.clap;
    if (grads->trainable(names::kLogitScale)) grads->at(names::kLogitScale)(0, 0) += weights.clap * nt.dlogit_scale;
  }
  const double m2d_scale = weights.m2d / static_cast<double>(B);

  const size_t chunks = (B + kGradChunk - 1) / kGradChunk;
  std::vector<ParamStore> partial(chunks);
  parallel_for(chunks, threads, [&](size_t c) {
    ParamStore g = grads->zeros_like();
    for (size_t i = c * kGradChunk; i < std::min(B, (c + 1) * kGradChunk); ++i) {
      const auto& w = work[i];
      Matrix dz = Matrix::Zero(w.enc.tokens.rows(), model.encoder.dim);
      if (do_m2d && w.dpred.size() > 0) {
        dz += predict_masked_backward(online, &g, model, w.pred, w.dpred * m2d_scale);
      }
      if (do_clap) {
        dz += project_semantic_backward(online, &g, w.proj, dA.row(static_cast<Eigen::Index>(i)));
      }
      encode_backward(online, &g, model.encoder, w.enc, dz);
    }
    partial[c] = std::move(g);
  });
  for (const auto& g : partial) grads->add_scaled(g, 1.0);
  return parts;
}

void apply_weight_freezes(ParamStore& online, const clap::LossWeights& weights) {
  if (weights.clap == 0.0) {
    online.set_trainable(names::kProjector + ".", false);
    online.set_trainable(names::kLogitScale, false);
  }
  if (weights.m2d == 0.0) online.set_trainable(names::kPredictor + ".", false);
}

GridShape clip_grid(const RunConfig& cfg, size_t samples) {
  const auto mel = cfg.mel_config();
  const int frames = audio::frame_count(samples, mel);
  const int padded = (frames + mel.pad_multiple - 1) / mel.pad_multiple * mel.pad_multiple;
  return {mel.n_mels / cfg.model.encoder.patch.freq, padded / cfg.model.encoder.patch.time};
}

GridShape crop_grid(const RunConfig& cfg) {
  return clip_grid(cfg, static_cast<size_t>(std::llround(cfg.crop_seconds * cfg.mel.sample_rate_hz)));
}

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt) {
  TensorFile f;
  f.magic = kCheckpointMagic;
  f.header = ckpt.config.serialize(false);
  f.add_store("online", ckpt.online, DType::F64);
  f.add_store("target", ckpt.target, DType::F64);
  f.add_store("adam_m", ckpt.adam_m, DType::F64);
  f.add_store("adam_v", ckpt.adam_v, DType::F64);
  f.tensors.push_back({"state/step", Matrix::Constant(1, 1, static_cast<double>(ckpt.step)), DType::F64});
  save_tensor_file(path, f);
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  const TensorFile f = load_tensor_file(path, kCheckpointMagic);
  Checkpoint c;
  c.config = RunConfig::parse(f.header, RunConfig());
  c.config.validate();
  c.online = f.store("online", StoreRole::Online);
  c.target = f.store("target", StoreRole::Target);
  c.adam_m = f.store("adam_m", StoreRole::Gradient);
  c.adam_v = f.store("adam_v", StoreRole::Gradient);
  if (!f.contains("state/step")) throw FormatError("checkpoint lacks state/step: " + path.string());
  c.step = static_cast<long>(f.get("state/step")(0, 0));
  Rng probe(0);
  const ParamStore fresh = init_online_params(c.config.model, probe);
  if (!fresh.same_layout(c.online)) {
    throw FormatError("checkpoint parameters do not match its model config: " + path.string());
  }
  apply_weight_freezes(c.online, c.config.weights);
  return c;
}

Pretrainer::Pretrainer(RunConfig cfg, const data::ClipSet& clips, text::EmbeddingTable captions)
    : cfg_(std::move(cfg)), clips_(&clips), captions_(std::move(captions)) {
  cfg_.validate();
  check_data();
  Rng rng = Rng::derive(cfg_.seed, {0});
  online_ = init_online_params(cfg_.model, rng);
  apply_weight_freezes(online_, cfg_.weights);
  target_ = make_target(online_);
  opt_ = optim::Optimizer(cfg_.optimizer, online_);
  threads_ = cfg_.resolved_threads();
}

Pretrainer::Pretrainer(const Checkpoint& ckpt, const data::ClipSet& clips, text::EmbeddingTable captions)
    : cfg_(ckpt.config), clips_(&clips), captions_(std::move(captions)) {
  cfg_.validate();
  check_data();
  online_ = ckpt.online;
  apply_weight_freezes(online_, cfg_.weights);
  target_ = ckpt.target;
  opt_ = optim::Optimizer(cfg_.optimizer, online_);
  if (!ckpt.adam_m.same_layout(opt_.first_moment()) || !ckpt.adam_v.same_layout(opt_.second_moment())) {
    throw FormatError("checkpoint optimizer state does not match the parameters");
  }
  opt_.first_moment() = ckpt.adam_m;
  opt_.second_moment() = ckpt.adam_v;
  opt_.set_steps(ckpt.step);
  step_ = ckpt.step;
  threads_ = cfg_.resolved_threads();
}

void Pretrainer::check_data() const {
  if (clips_->size() == 0) throw Error("pretrain: empty training set");
  if (captions_.dim() != cfg_.model.semantic_dim) {
    throw Error("pretrain: caption embeddings have d_s = " + std::to_string(captions_.dim()) + ", model expects " +
                std::to_string(cfg_.model.semantic_dim));
  }
  for (const auto& r : clips_->records) {
    if (r.caption_ids.empty()) throw Error("pretrain: sample " + r.id + " has no caption");
    for (const auto& id : r.caption_ids) {
      if (!captions_.contains(id)) throw Error("pretrain: caption id " + id + " of " + r.id + " has no embedding");
    }
  }
}

long Pretrainer::steps_per_epoch() const {
  const long n = static_cast<long>(clips_->size());
  return std::max(1L, n / cfg_.batch_size);
}

namespace {

std::vector<size_t> batch_indices(const RunConfig& cfg, size_t n, long spe, long step) {
  const long epoch = step / spe;
  const long pos = step % spe;
  std::vector<size_t> order(n);
  for (size_t i = 0; i < n; ++i) order[i] = i;
  Rng rng = Rng::derive(cfg.seed, {1, static_cast<uint64_t>(epoch)});
  rng.shuffle(order);
  const size_t b = std::min(n, static_cast<size_t>(cfg.batch_size));
  const size_t begin = static_cast<size_t>(pos) * b;
  return {order.begin() + static_cast<std::ptrdiff_t>(begin), order.begin() + static_cast<std::ptrdiff_t>(begin + b)};
}

}  // namespace

std::vector<std::string> Pretrainer::batch_ids(long step) const {
  std::vector<std::string> ids;
  for (size_t i : batch_indices(cfg_, clips_->size(), steps_per_epoch(), step)) ids.push_back(clips_->records[i].id);
  return ids;
}

PretrainBatch Pretrainer::make_batch(long step) const {
  const auto idx = batch_indices(cfg_, clips_->size(), steps_per_epoch(), step);
  PretrainBatch batch;
  batch.samples.resize(idx.size());
  const auto mel = cfg_.mel_config();
  const GridShape grid = crop_grid(cfg_);
  batch.pe = sincos_2d(grid, cfg_.model.encoder.dim);
  parallel_for(idx.size(), threads_, [&](size_t i) {
    Rng rng = Rng::derive(cfg_.seed, {2, static_cast<uint64_t>(step), static_cast<uint64_t>(i)});
    const auto& rec = clips_->records[idx[i]];
    const auto crop = audio::random_crop(clips_->waves[idx[i]], cfg_.crop_seconds, rng);
    const auto spec = audio::standardize(audio::logmel(crop, mel), cfg_.norm_mean, cfg_.norm_std);
    auto seq = patchify(spec.values, cfg_.model.encoder.patch);
    if (!(seq.grid == grid)) throw ShapeError("pretrain: crop grid mismatch for " + rec.id);
    auto& s = batch.samples[i];
    s.id = rec.id;
    s.tokens = std::move(seq.tokens);
    s.mask = make_mask(grid.count(), cfg_.mask_ratio, rng);
    s.text = captions_.get(text::pick_caption(rec.caption_record(), rng));
  });
  return batch;
}

StepLog Pretrainer::step() {
  if (done()) throw Error("pretrain: run already finished");
  const PretrainBatch batch = make_batch(step_);
  ParamStore grads = online_.zeros_like();
  const LossParts parts =
      pretrain_loss(online_, target_, cfg_.model, cfg_.weights, cfg_.target_norm, batch, &grads, threads_);
  if (!std::isfinite(parts.total) || !grads.all_finite()) {
    std::ostringstream os;
    os << "non-finite loss at step " << step_ << " (m2d " << parts.m2d << ", clap " << parts.clap << ", tau "
       << parts.tau << "); batch ids:";
    for (const auto& s : batch.samples) os << ' ' << s.id;
    throw Error(os.str());
  }
  const double spe = static_cast<double>(steps_per_epoch());
  StepLog log;
  log.epoch = static_cast<double>(step_ + 1) / spe;
  log.lr = optim::learning_rate(cfg_.optimizer, log.epoch, cfg_.epochs);
  log.alpha = cfg_.ema.at(step_);
  opt_.step(online_, grads, log.lr);
  clap::clamp_logit_scale(online_);
  m2d::ema_update(online_, target_, log.alpha);
  ++step_;
  log.step = step_;
  log.loss = parts;
  return log;
}

Checkpoint Pretrainer::checkpoint() const {
  Checkpoint c;
  c.config = cfg_;
  c.online = online_;
  c.target = target_;
  c.adam_m = opt_.first_moment();
  c.adam_v = opt_.second_moment();
  c.step = step_;
  return c;
}

std::string loss_log_header() { return "step,epoch,lr,ema_decay,loss,loss_m2d,loss_clap,tau"; }

std::string loss_log_row(const StepLog& l) {
  char buf[256];
  std::snprintf(buf, sizeof buf, "%ld,%.6f,%.9g,%.9g,%.17g,%.17g,%.17g,%.17g", l.step, l.epoch, l.lr, l.alpha,
                l.loss.total, l.loss.m2d, l.loss.clap, l.loss.tau);
  return buf;
}

}  // namespace m2dclap::train
