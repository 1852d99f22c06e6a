#pragma once

#include "m2dclap/evaluate.hpp"

#include <filesystem>
#include <string>
#include <vector>

namespace m2dclap::report {

// Aligned UTF-8 table, one row per report.
std::string render_table(const std::vector<eval::EvalReport>& reports);

// Loss log produced by `pretrain` (CSV with a header row); returns the
// `loss` column.
std::vector<double> read_loss_curve(const std::filesystem::path& csv);

struct Image {
  int width = 0;
  int height = 0;
  std::vector<unsigned char> rgb;  // row-major, 3 bytes per pixel

  Image(int w, int h);
  void set(int x, int y, unsigned char r, unsigned char g, unsigned char b);
  void fill_rect(int x0, int y0, int x1, int y1, unsigned char r, unsigned char g, unsigned char b);
  void line(double x0, double y0, double x1, double y1, unsigned char r, unsigned char g, unsigned char b);
};

void write_png(const std::filesystem::path& path, const Image& img);

// Left panel: pre-training loss curve (if any). Right panel: one bar per
// report value, scaled to [0, 1].
Image render_plot(const std::vector<double>& loss_curve, const std::vector<eval::EvalReport>& reports);

}  // namespace m2dclap::report
