#include "m2dclap/augment.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace m2dclap::augment {

void AugmentConfig::validate() const {
  if (!(mixup_ratio >= 0.0 && mixup_ratio <= 1.0)) throw Error("augment: mixup ratio must be in [0, 1]");
  if (!(patchout_ratio >= 0.0 && patchout_ratio < 1.0)) throw Error("augment: patchout ratio must be in [0, 1)");
  if (specaug_freq < 0 || specaug_time < 0) throw Error("augment: SpecAugment widths must be >= 0");
}

std::vector<MixupDraw> draw_mixup(size_t batch, double ratio, Rng& rng) {
  if (batch < 2) throw Error("mixup: batch must hold at least two samples");
  std::vector<MixupDraw> draws(batch);
  for (size_t i = 0; i < batch; ++i) {
    size_t j = static_cast<size_t>(rng.below(batch - 1));
    if (j >= i) ++j;
    draws[i] = {j, ratio > 0.0 ? rng.uniform(0.0, ratio) : 0.0};
  }
  return draws;
}

std::vector<MixupItem> mixup(const std::vector<MixupItem>& batch, const std::vector<MixupDraw>& draws) {
  if (draws.size() != batch.size()) throw ShapeError("mixup: one draw per sample required");
  std::vector<MixupItem> out(batch.size());
  for (size_t i = 0; i < batch.size(); ++i) {
    const auto& d = draws[i];
    const auto& a = batch[i];
    const auto& b = batch[d.partner];
    if (d.lambda == 0.0) {
      out[i] = a;
      continue;
    }
    out[i].spec = (1.0 - d.lambda) * a.spec + d.lambda * b.spec;
    out[i].target = (1.0 - d.lambda) * a.target + d.lambda * b.target;
  }
  return out;
}

std::vector<MixupItem> mixup(const std::vector<MixupItem>& batch, double ratio, Rng& rng) {
  return mixup(batch, draw_mixup(batch.size(), ratio, rng));
}

Matrix spec_augment(const Matrix& spec, int freq_param, int time_param, Rng& rng) {
  const auto F = static_cast<int>(spec.rows());
  const auto T = static_cast<int>(spec.cols());
  if (freq_param < 0 || time_param < 0 || freq_param > F || time_param > T) {
    throw Error("spec_augment: mask widths must be within the spectrogram shape");
  }
  Matrix out = spec;
  const double fill = spec.mean();
  const int fw = static_cast<int>(rng.range(0, freq_param));
  if (fw > 0) {
    const int f0 = static_cast<int>(rng.range(0, F - fw));
    out.middleRows(f0, fw).setConstant(fill);
  }
  const int tw = static_cast<int>(rng.range(0, time_param));
  if (tw > 0) {
    const int t0 = static_cast<int>(rng.range(0, T - tw));
    out.middleCols(t0, tw).setConstant(fill);
  }
  return out;
}

RrcParams draw_rrc(int frames, Rng& rng) {
  RrcParams p;
  p.scale = rng.uniform(0.6, 1.0);
  p.t_offset = rng.uniform(0.0, frames * (1.0 - p.scale));
  p.f_shift = rng.uniform(-4.0, 4.0);
  return p;
}

Matrix random_resize_crop(const Matrix& spec, const RrcParams& p) {
  const auto F = static_cast<int>(spec.rows());
  const auto T = static_cast<int>(spec.cols());
  if (!(p.scale > 0.0 && p.scale <= 1.0)) throw Error("random_resize_crop: scale must be in (0, 1]");
  const double span = p.scale * T;
  Matrix out(F, T);
  for (int f = 0; f < F; ++f) {
    const double sf = std::clamp(f + p.f_shift, 0.0, static_cast<double>(F - 1));
    const int f0 = static_cast<int>(std::floor(sf));
    const int f1 = std::min(f0 + 1, F - 1);
    const double wf = sf - f0;
    for (int t = 0; t < T; ++t) {
      double st = p.t_offset + (t + 0.5) * span / T - 0.5;
      st = std::clamp(st, 0.0, static_cast<double>(T - 1));
      const int t0 = static_cast<int>(std::floor(st));
      const int t1 = std::min(t0 + 1, T - 1);
      const double wt = st - t0;
      const double top = (1.0 - wt) * spec(f0, t0) + wt * spec(f0, t1);
      const double bot = (1.0 - wt) * spec(f1, t0) + wt * spec(f1, t1);
      out(f, t) = (1.0 - wf) * top + wf * bot;
    }
  }
  return out;
}

Matrix random_resize_crop(const Matrix& spec, Rng& rng) {
  return random_resize_crop(spec, draw_rrc(static_cast<int>(spec.cols()), rng));
}

std::vector<int> structured_patchout(GridShape grid, double ratio, Rng& rng) {
  if (!(ratio >= 0.0 && ratio < 1.0)) throw Error("structured_patchout: ratio must be in [0, 1)");
  const int n = grid.count();
  const int target_drop = static_cast<int>(std::ceil(ratio * n - 1e-12));
  if (target_drop > n - 1) throw Error("structured_patchout: ratio would drop all tokens");

  std::vector<bool> row_kept(static_cast<size_t>(grid.rows), true);
  std::vector<bool> col_kept(static_cast<size_t>(grid.cols), true);
  int rows_left = grid.rows, cols_left = grid.cols;
  while (n - rows_left * cols_left < target_drop) {
    // Pick uniformly among droppable rows and columns; keep at least one of each.
    const int droppable_rows = rows_left > 1 ? rows_left : 0;
    const int droppable_cols = cols_left > 1 ? cols_left : 0;
    if (droppable_rows + droppable_cols == 0) throw Error("structured_patchout: ratio would drop all tokens");
    auto k = static_cast<int>(rng.below(static_cast<uint64_t>(droppable_rows + droppable_cols)));
    if (k < droppable_rows) {
      for (size_t r = 0; r < row_kept.size(); ++r) {
        if (row_kept[r] && k-- == 0) {
          row_kept[r] = false;
          --rows_left;
          break;
        }
      }
    } else {
      k -= droppable_rows;
      for (size_t c = 0; c < col_kept.size(); ++c) {
        if (col_kept[c] && k-- == 0) {
          col_kept[c] = false;
          --cols_left;
          break;
        }
      }
    }
  }
  std::vector<int> keep;
  for (int r = 0; r < grid.rows; ++r) {
    for (int c = 0; c < grid.cols; ++c) {
      if (row_kept[static_cast<size_t>(r)] && col_kept[static_cast<size_t>(c)]) keep.push_back(r * grid.cols + c);
    }
  }
  return keep;
}

FinetuneProfile finetune_profile(const std::string& name) {
  FinetuneProfile p;
  p.name = name;
  if (name == "as2m") {
    p.lr = 2.0;
    p.batch_size = 64;
    p.optimizer = "sgd";
    p.augment = {0.5, 30, 192, false, 0.5};
    p.epochs = 70;
    p.warmup_epochs = 15;
    p.interpolate_posenc = true;
  } else if (name == "as20k") {
    p.lr = 0.5;
    p.batch_size = 64;
    p.augment = {0.3, 30, 192, true, 0.5};
    p.epochs = 200;
    p.warmup_epochs = 5;
    p.interpolate_posenc = true;
  } else if (name == "esc50") {
    p.lr = 0.5;
    p.batch_size = 128;
    p.augment = {0.0, 15, 48, true, 0.5};
    p.epochs = 200;
    p.warmup_epochs = 5;
    p.freeze_patch_embed = true;
  } else if (name == "spcv2") {
    p.lr = 0.5;
    p.batch_size = 128;
    p.augment = {0.3, 30, 48, true, 0.5};
    p.epochs = 200;
    p.warmup_epochs = 5;
  } else if (name == "vc1") {
    p.lr = 0.0005;
    p.batch_size = 64;
    p.optimizer = "adamw";
    p.augment = {0.0, 30, 48, false, 0.0};
    p.epochs = 50;
    p.warmup_epochs = 5;
    p.interpolate_posenc = true;
  } else {
    throw Error("unknown fine-tuning profile '" + name + "' (as2m | as20k | esc50 | spcv2 | vc1)");
  }
  return p;
}

std::vector<std::string> profile_names() { return {"as2m", "as20k", "esc50", "spcv2", "vc1"}; }

}  // namespace m2dclap::augment
