#include "m2dclap/audio_frontend.hpp"
#include "m2dclap/clap_objective.hpp"
#include "m2dclap/model.hpp"
#include "m2dclap/pretrain.hpp"

#include <benchmark/benchmark.h>

#include <cmath>

namespace {

using namespace m2dclap;

RunConfig desk_config() {
  RunConfig cfg;
  cfg.model.semantic_dim = 128;
  cfg.crop_seconds = 2.0;
  return cfg;
}

Matrix gaussian(Eigen::Index r, Eigen::Index c, Rng& rng) {
  Matrix m(r, c);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = rng.normal();
  return m;
}

train::PretrainBatch make_batch(const RunConfig& cfg, size_t n, Rng& rng) {
  const GridShape grid = train::crop_grid(cfg);
  train::PretrainBatch b;
  b.pe = sincos_2d(grid, cfg.model.encoder.dim);
  for (size_t i = 0; i < n; ++i) {
    train::PretrainSample s;
    s.tokens = gaussian(grid.count(), cfg.model.encoder.patch.size(), rng);
    s.mask = make_mask(grid.count(), cfg.mask_ratio, rng);
    RowVector t = gaussian(1, cfg.model.semantic_dim, rng).row(0);
    s.text = t / t.norm();
    b.samples.push_back(std::move(s));
  }
  return b;
}

void BM_Logmel(benchmark::State& state) {
  audio::Waveform w;
  w.samples.resize(static_cast<size_t>(state.range(0) * audio::kSampleRate));
  for (size_t i = 0; i < w.samples.size(); ++i) w.samples[i] = static_cast<float>(std::sin(0.05 * i));
  const audio::MelConfig mel;
  for (auto _ : state) benchmark::DoNotOptimize(audio::logmel(w, mel));
}
BENCHMARK(BM_Logmel)->Arg(2)->Arg(10)->Unit(benchmark::kMillisecond);

void BM_EncoderForward(benchmark::State& state) {
  const RunConfig cfg = desk_config();
  Rng rng(1);
  const ParamStore p = init_online_params(cfg.model, rng);
  const GridShape grid = train::crop_grid(cfg);
  const auto pe = sincos_2d(grid, cfg.model.encoder.dim);
  const Matrix tokens = gaussian(grid.count(), cfg.model.encoder.patch.size(), rng);
  for (auto _ : state) benchmark::DoNotOptimize(encode(p, cfg.model.encoder, tokens, pe.table, cfg.model.ln_eps));
}
BENCHMARK(BM_EncoderForward)->Unit(benchmark::kMicrosecond);

void BM_PretrainLossBackward(benchmark::State& state) {
  const RunConfig cfg = desk_config();
  Rng rng(2);
  const ParamStore online = init_online_params(cfg.model, rng);
  const ParamStore target = make_target(online);
  const auto batch = make_batch(cfg, static_cast<size_t>(state.range(0)), rng);
  for (auto _ : state) {
    ParamStore grads = online.zeros_like();
    benchmark::DoNotOptimize(
        train::pretrain_loss(online, target, cfg.model, cfg.weights, cfg.target_norm, batch, &grads));
  }
  state.SetItemsProcessed(state.iterations() * state.range(0));
}
BENCHMARK(BM_PretrainLossBackward)->Arg(8)->Arg(64)->Unit(benchmark::kMillisecond);

void BM_NtXent(benchmark::State& state) {
  Rng rng(3);
  const auto b = state.range(0);
  const Matrix S = gaussian(b, b, rng) * 0.1;
  for (auto _ : state) benchmark::DoNotOptimize(clap::nt_xent(S, 0.07));
}
BENCHMARK(BM_NtXent)->Arg(64)->Arg(256)->Unit(benchmark::kMicrosecond);

}  // namespace

BENCHMARK_MAIN();
