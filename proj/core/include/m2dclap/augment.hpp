#pragma once

#include "m2dclap/patchgrid.hpp"

#include <string>
#include <vector>

namespace m2dclap::augment {

struct AugmentConfig {
  double mixup_ratio = 0.0;
  int specaug_freq = 0;  // max frequency mask width (bins)
  int specaug_time = 0;  // max time mask width (frames)
  bool rrc_enabled = false;
  double patchout_ratio = 0.0;

  void validate() const;
};

// x' = (1 - lambda) x + lambda x_partner with lambda ~ U(0, ratio); targets
// mix with the same weight.
struct MixupItem {
  Matrix spec;
  RowVector target;  // label distribution
};

struct MixupDraw {
  size_t partner = 0;
  double lambda = 0.0;
};

// One draw per sample (partner index, lambda); ratio 0 leaves the batch as is.
std::vector<MixupDraw> draw_mixup(size_t batch, double ratio, Rng& rng);
std::vector<MixupItem> mixup(const std::vector<MixupItem>& batch, const std::vector<MixupDraw>& draws);
std::vector<MixupItem> mixup(const std::vector<MixupItem>& batch, double ratio, Rng& rng);

// One frequency band of width ~U{0..freq_param} and one time band of width
// ~U{0..time_param}, filled with the clip mean.
Matrix spec_augment(const Matrix& spec, int freq_param, int time_param, Rng& rng);

struct RrcParams {
  double scale = 1.0;   // fraction of the time axis kept
  double t_offset = 0;  // crop start, frames
  double f_shift = 0;   // frequency shift, bins (edge-clamped)
};

RrcParams draw_rrc(int frames, Rng& rng);
// Crops [t_offset, t_offset + scale*T) in time, shifts frequency by f_shift
// bins, and bilinearly resizes back to the input shape.
Matrix random_resize_crop(const Matrix& spec, const RrcParams& p);
Matrix random_resize_crop(const Matrix& spec, Rng& rng);

// Drops whole frequency rows and time columns of the patch grid until at
// least `ratio` of the tokens are gone. Returns the surviving token indices
// (sorted); they always form (row subset) x (column subset).
std::vector<int> structured_patchout(GridShape grid, double ratio, Rng& rng);

// Fine-tuning presets: as2m, as20k, esc50, spcv2, vc1.
struct FinetuneProfile {
  std::string name;
  double lr = 0.5;
  int batch_size = 64;
  std::string optimizer = "sgd";
  AugmentConfig augment;
  int epochs = 200;
  int warmup_epochs = 5;
  bool freeze_patch_embed = false;
  bool interpolate_posenc = false;
};

FinetuneProfile finetune_profile(const std::string& name);
std::vector<std::string> profile_names();

}  // namespace m2dclap::augment
