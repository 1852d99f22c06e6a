#pragma once

#include "m2dclap/common.hpp"

#include <vector>

namespace m2dclap {

struct GridShape {
  int rows = 0;  // frequency patches
  int cols = 0;  // time patches

  int count() const { return rows * cols; }
  bool operator==(const GridShape&) const = default;
};

struct PatchShape {
  int freq = 16;
  int time = 16;

  int size() const { return freq * time; }
};

// Patches in frequency-major order: index = row * cols + col.
struct PatchSequence {
  Matrix tokens;  // N x (patch.freq * patch.time)
  GridShape grid;
  PatchShape patch;

  int size() const { return static_cast<int>(tokens.rows()); }
};

PatchSequence patchify(const Matrix& spectrogram, PatchShape patch = {});
Matrix unpatchify(const PatchSequence& seq);

struct MaskSplit {
  std::vector<int> visible_idx;  // sorted
  std::vector<int> masked_idx;   // sorted
  double ratio = 0.0;

  int total() const { return static_cast<int>(visible_idx.size() + masked_idx.size()); }
};

// floor(ratio * n) patches chosen uniformly without replacement are masked.
MaskSplit make_mask(int n, double ratio, Rng& rng);

// Split with no masked patches.
MaskSplit all_visible(int n);

// Fixed 2D sin-cos table: the first D/2 dims encode the frequency row, the
// remaining D/2 the time column.
struct PositionalEncoding {
  Matrix table;  // N x D
  GridShape grid;

  int dim() const { return static_cast<int>(table.cols()); }
};

// dim must be divisible by 4.
PositionalEncoding sincos_2d(GridShape grid, int dim);

// Linear interpolation of the table along the time axis. The frequency row
// count must match.
PositionalEncoding interpolate_posenc(const PositionalEncoding& pe, GridShape new_grid);

// Gathers rows of `m` in the given index order.
Matrix gather_rows(const Matrix& m, const std::vector<int>& idx);

}  // namespace m2dclap
