#include "m2dclap/patchgrid.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace m2dclap {

PatchSequence patchify(const Matrix& spectrogram, PatchShape patch) {
  const auto F = static_cast<int>(spectrogram.rows());
  const auto T = static_cast<int>(spectrogram.cols());
  if (F % patch.freq != 0 || T % patch.time != 0 || F == 0 || T == 0) {
    throw ShapeError("patchify: spectrogram " + std::to_string(F) + "x" + std::to_string(T) +
                     " is not divisible by patch " + std::to_string(patch.freq) + "x" +
                     std::to_string(patch.time));
  }
  PatchSequence seq;
  seq.patch = patch;
  seq.grid = {F / patch.freq, T / patch.time};
  seq.tokens.resize(seq.grid.count(), patch.size());
  for (int r = 0; r < seq.grid.rows; ++r) {
    for (int c = 0; c < seq.grid.cols; ++c) {
      const int n = r * seq.grid.cols + c;
      for (int i = 0; i < patch.freq; ++i) {
        for (int j = 0; j < patch.time; ++j) {
          seq.tokens(n, i * patch.time + j) = spectrogram(r * patch.freq + i, c * patch.time + j);
        }
      }
    }
  }
  return seq;
}

Matrix unpatchify(const PatchSequence& seq) {
  const PatchShape p = seq.patch;
  if (seq.tokens.rows() != seq.grid.count() || seq.tokens.cols() != p.size()) {
    throw ShapeError("unpatchify: token matrix does not match grid");
  }
  Matrix out(seq.grid.rows * p.freq, seq.grid.cols * p.time);
  for (int r = 0; r < seq.grid.rows; ++r) {
    for (int c = 0; c < seq.grid.cols; ++c) {
      const int n = r * seq.grid.cols + c;
      for (int i = 0; i < p.freq; ++i) {
        for (int j = 0; j < p.time; ++j) out(r * p.freq + i, c * p.time + j) = seq.tokens(n, i * p.time + j);
      }
    }
  }
  return out;
}

MaskSplit make_mask(int n, double ratio, Rng& rng) {
  if (n < 0) throw Error("make_mask: negative patch count");
  if (!(ratio >= 0.0 && ratio < 1.0)) throw Error("make_mask: ratio must be in [0, 1)");
  const int n_masked = static_cast<int>(std::floor(ratio * n));
  std::vector<int> order(static_cast<size_t>(n));
  std::iota(order.begin(), order.end(), 0);
  // Partial Fisher-Yates: the first n_masked entries are the masked set.
  for (int i = 0; i < n_masked; ++i) {
    const int j = i + static_cast<int>(rng.below(static_cast<uint64_t>(n - i)));
    std::swap(order[static_cast<size_t>(i)], order[static_cast<size_t>(j)]);
  }
  MaskSplit s;
  s.ratio = ratio;
  s.masked_idx.assign(order.begin(), order.begin() + n_masked);
  s.visible_idx.assign(order.begin() + n_masked, order.end());
  std::sort(s.masked_idx.begin(), s.masked_idx.end());
  std::sort(s.visible_idx.begin(), s.visible_idx.end());
  return s;
}

MaskSplit all_visible(int n) {
  MaskSplit s;
  s.visible_idx.resize(static_cast<size_t>(n));
  std::iota(s.visible_idx.begin(), s.visible_idx.end(), 0);
  return s;
}

namespace {

void sincos_1d(Matrix& table, int col_offset, int dim, int row, double pos) {
  const int half = dim / 2;
  for (int i = 0; i < half; ++i) {
    const double omega = 1.0 / std::pow(10000.0, static_cast<double>(i) / half);
    table(row, col_offset + i) = std::sin(pos * omega);
    table(row, col_offset + half + i) = std::cos(pos * omega);
  }
}

}  // namespace

PositionalEncoding sincos_2d(GridShape grid, int dim) {
  if (dim <= 0 || dim % 4 != 0) throw ShapeError("sincos_2d: dim must be a positive multiple of 4");
  PositionalEncoding pe;
  pe.grid = grid;
  pe.table.resize(grid.count(), dim);
  for (int r = 0; r < grid.rows; ++r) {
    for (int c = 0; c < grid.cols; ++c) {
      const int n = r * grid.cols + c;
      sincos_1d(pe.table, 0, dim / 2, n, r);
      sincos_1d(pe.table, dim / 2, dim / 2, n, c);
    }
  }
  return pe;
}

PositionalEncoding interpolate_posenc(const PositionalEncoding& pe, GridShape new_grid) {
  if (new_grid.rows != pe.grid.rows) {
    throw ShapeError("interpolate_posenc: frequency rows must match (" + std::to_string(pe.grid.rows) +
                     " vs " + std::to_string(new_grid.rows) + ")");
  }
  if (new_grid.cols <= 0) throw ShapeError("interpolate_posenc: empty target grid");
  if (new_grid == pe.grid) return pe;

  PositionalEncoding out;
  out.grid = new_grid;
  out.table.resize(new_grid.count(), pe.dim());
  const int src_cols = pe.grid.cols;
  const double scale = static_cast<double>(src_cols) / new_grid.cols;
  for (int c = 0; c < new_grid.cols; ++c) {
    // Half-pixel centres, clamped at the edges.
    double src = (c + 0.5) * scale - 0.5;
    src = std::clamp(src, 0.0, static_cast<double>(src_cols - 1));
    const int c0 = static_cast<int>(std::floor(src));
    const int c1 = std::min(c0 + 1, src_cols - 1);
    const double w1 = src - c0;
    for (int r = 0; r < new_grid.rows; ++r) {
      out.table.row(r * new_grid.cols + c) =
          (1.0 - w1) * pe.table.row(r * src_cols + c0) + w1 * pe.table.row(r * src_cols + c1);
    }
  }
  return out;
}

Matrix gather_rows(const Matrix& m, const std::vector<int>& idx) {
  Matrix out(static_cast<Eigen::Index>(idx.size()), m.cols());
  for (size_t i = 0; i < idx.size(); ++i) {
    if (idx[i] < 0 || idx[i] >= m.rows()) throw ShapeError("gather_rows: index out of range");
    out.row(static_cast<Eigen::Index>(i)) = m.row(idx[i]);
  }
  return out;
}

}  // namespace m2dclap
