#include "m2dclap/report.hpp"

#include <png.h>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>

namespace m2dclap::report {

namespace {

std::string num(double v, int prec = 4) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.*f", prec, v);
  return buf;
}

}  // namespace

std::string render_table(const std::vector<eval::EvalReport>& reports) {
  const std::vector<std::string> head = {"task", "protocol", "metric", "value", "ci95", "config", "timestamp"};
  std::vector<std::vector<std::string>> rows;
  for (const auto& r : reports) {
    rows.push_back({r.task, r.protocol, r.metric, num(r.value), r.ci95 >= 0.0 ? num(r.ci95) : "-", r.config_hash,
                    r.timestamp});
  }
  std::vector<size_t> width(head.size());
  for (size_t c = 0; c < head.size(); ++c) {
    width[c] = head[c].size();
    for (const auto& row : rows) width[c] = std::max(width[c], row[c].size());
  }
  std::ostringstream os;
  auto emit = [&](const std::vector<std::string>& row) {
    for (size_t c = 0; c < row.size(); ++c) {
      const bool numeric = c == 3 || c == 4;
      const std::string pad(width[c] - row[c].size(), ' ');
      os << (c ? "  " : "") << (numeric ? pad + row[c] : row[c] + (c + 1 < row.size() ? pad : ""));
    }
    os << "\n";
  };
  emit(head);
  std::vector<std::string> rule;
  for (size_t w : width) rule.emplace_back(w, '-');
  emit(rule);
  for (const auto& row : rows) emit(row);
  return os.str();
}

std::vector<double> read_loss_curve(const std::filesystem::path& csv) {
  std::ifstream in(csv);
  if (!in) throw Error("cannot open loss log " + csv.string());
  std::string line;
  if (!std::getline(in, line)) throw FormatError("empty loss log " + csv.string());
  int col = -1;
  {
    std::stringstream ss(line);
    std::string name;
    for (int i = 0; std::getline(ss, name, ','); ++i) {
      if (name == "loss") col = i;
    }
  }
  if (col < 0) throw FormatError("loss log lacks a 'loss' column: " + csv.string());
  std::vector<double> out;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::stringstream ss(line);
    std::string cell;
    for (int i = 0; i <= col; ++i) {
      if (!std::getline(ss, cell, ',')) throw FormatError("short row in loss log " + csv.string());
    }
    out.push_back(std::stod(cell));
  }
  return out;
}

Image::Image(int w, int h) : width(w), height(h), rgb(static_cast<size_t>(w) * h * 3, 255) {}

void Image::set(int x, int y, unsigned char r, unsigned char g, unsigned char b) {
  if (x < 0 || y < 0 || x >= width || y >= height) return;
  const size_t i = (static_cast<size_t>(y) * width + x) * 3;
  rgb[i] = r;
  rgb[i + 1] = g;
  rgb[i + 2] = b;
}

void Image::fill_rect(int x0, int y0, int x1, int y1, unsigned char r, unsigned char g, unsigned char b) {
  for (int y = std::min(y0, y1); y <= std::max(y0, y1); ++y) {
    for (int x = std::min(x0, x1); x <= std::max(x0, x1); ++x) set(x, y, r, g, b);
  }
}

void Image::line(double x0, double y0, double x1, double y1, unsigned char r, unsigned char g, unsigned char b) {
  const int steps = static_cast<int>(std::ceil(std::max(std::abs(x1 - x0), std::abs(y1 - y0)))) + 1;
  for (int s = 0; s <= steps; ++s) {
    const double t = static_cast<double>(s) / steps;
    set(static_cast<int>(std::lround(x0 + t * (x1 - x0))), static_cast<int>(std::lround(y0 + t * (y1 - y0))), r, g, b);
  }
}

void write_png(const std::filesystem::path& path, const Image& img) {
  FILE* fp = std::fopen(path.c_str(), "wb");
  if (fp == nullptr) throw Error("cannot write PNG " + path.string());
  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png != nullptr ? png_create_info_struct(png) : nullptr;
  if (png == nullptr || info == nullptr || setjmp(png_jmpbuf(png))) {
    png_destroy_write_struct(&png, &info);
    std::fclose(fp);
    throw Error("PNG encoding failed for " + path.string());
  }
  png_init_io(png, fp);
  png_set_IHDR(png, info, static_cast<png_uint_32>(img.width), static_cast<png_uint_32>(img.height), 8,
               PNG_COLOR_TYPE_RGB, PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
  png_write_info(png, info);
  for (int y = 0; y < img.height; ++y) {
    png_write_row(png, img.rgb.data() + static_cast<size_t>(y) * img.width * 3);
  }
  png_write_end(png, nullptr);
  png_destroy_write_struct(&png, &info);
  std::fclose(fp);
}

Image render_plot(const std::vector<double>& loss_curve, const std::vector<eval::EvalReport>& reports) {
  const int W = 640, H = 240, pad = 20, panel = W / 2;
  Image img(W, H);
  const int y_top = pad, y_bot = H - pad;

  // Loss panel.
  img.line(pad, y_top, pad, y_bot, 0, 0, 0);
  img.line(pad, y_bot, panel - pad, y_bot, 0, 0, 0);
  if (loss_curve.size() >= 2) {
    const auto [lo_it, hi_it] = std::minmax_element(loss_curve.begin(), loss_curve.end());
    const double lo = *lo_it, hi = *hi_it > *lo_it ? *hi_it : *lo_it + 1.0;
    const double span_x = panel - 2.0 * pad;
    auto px = [&](size_t i) { return pad + span_x * static_cast<double>(i) / (loss_curve.size() - 1); };
    auto py = [&](double v) { return y_bot - (y_bot - y_top) * (v - lo) / (hi - lo); };
    for (size_t i = 1; i < loss_curve.size(); ++i) {
      img.line(px(i - 1), py(loss_curve[i - 1]), px(i), py(loss_curve[i]), 200, 40, 40);
    }
  }

  // Metric bars.
  img.line(panel + pad, y_top, panel + pad, y_bot, 0, 0, 0);
  img.line(panel + pad, y_bot, W - pad, y_bot, 0, 0, 0);
  img.line(panel + pad, y_top, W - pad, y_top, 210, 210, 210);
  if (!reports.empty()) {
    const double slot = (panel - 2.0 * pad) / static_cast<double>(reports.size());
    for (size_t i = 0; i < reports.size(); ++i) {
      const double v = std::clamp(reports[i].value, 0.0, 1.0);
      const int x0 = static_cast<int>(panel + pad + slot * i + slot * 0.15);
      const int x1 = static_cast<int>(panel + pad + slot * (i + 1) - slot * 0.15);
      const int y0 = static_cast<int>(std::lround(y_bot - (y_bot - y_top) * v));
      const unsigned char shade = static_cast<unsigned char>(60 + (i * 50) % 150);
      img.fill_rect(x0, y0, x1, y_bot - 1, 40, shade, 180);
    }
  }
  return img;
}

}  // namespace m2dclap::report
