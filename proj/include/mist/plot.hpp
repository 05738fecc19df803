#pragma once

#include <algorithm>
#include <cstdint>
#include <cstdio>
#include <string>
#include <vector>

#include <png.h>

#include "mist/error.hpp"
#include "mist/manifest.hpp"

namespace mist {

namespace detail {

struct Rgb {
  uint8_t r, g, b;
};

class Canvas {
public:
  Canvas(int w, int h, Rgb bg) : w_(w), h_(h), px_(static_cast<size_t>(w) * h, bg) {}

  void fill_rect(int x0, int y0, int x1, int y1, Rgb c) {
    x0 = std::max(x0, 0);
    y0 = std::max(y0, 0);
    x1 = std::min(x1, w_);
    y1 = std::min(y1, h_);
    for (int y = y0; y < y1; ++y)
      for (int x = x0; x < x1; ++x) px_[static_cast<size_t>(y) * w_ + x] = c;
  }

  void set(int x, int y, Rgb c) {
    if (x >= 0 && x < w_ && y >= 0 && y < h_) px_[static_cast<size_t>(y) * w_ + x] = c;
  }

  void line(int x0, int y0, int x1, int y1, Rgb c) {
    int dx = std::abs(x1 - x0), dy = -std::abs(y1 - y0);
    int sx = x0 < x1 ? 1 : -1, sy = y0 < y1 ? 1 : -1;
    int err = dx + dy;
    while (true) {
      set(x0, y0, c);
      if (x0 == x1 && y0 == y1) break;
      int e2 = 2 * err;
      if (e2 >= dy) {
        err += dy;
        x0 += sx;
      }
      if (e2 <= dx) {
        err += dx;
        y0 += sy;
      }
    }
  }

  void write_png(const std::string& path) const {
    FILE* fp = std::fopen(path.c_str(), "wb");
    if (!fp) throw IoError("cannot write plot: " + path);
    png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
    png_infop info = png ? png_create_info_struct(png) : nullptr;
    if (!png || !info) {
      if (png) png_destroy_write_struct(&png, &info);
      std::fclose(fp);
      throw IoError("libpng initialization failed for " + path);
    }
    if (setjmp(png_jmpbuf(png))) {
      png_destroy_write_struct(&png, &info);
      std::fclose(fp);
      throw IoError("libpng write failed for " + path);
    }
    png_init_io(png, fp);
    png_set_IHDR(png, info, static_cast<png_uint_32>(w_), static_cast<png_uint_32>(h_), 8,
                 PNG_COLOR_TYPE_RGB, PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT,
                 PNG_FILTER_TYPE_DEFAULT);
    png_write_info(png, info);
    std::vector<png_bytep> rows(static_cast<size_t>(h_));
    for (int y = 0; y < h_; ++y)
      rows[static_cast<size_t>(y)] =
          const_cast<png_bytep>(reinterpret_cast<const png_byte*>(&px_[static_cast<size_t>(y) * w_]));
    png_write_image(png, rows.data());
    png_write_end(png, nullptr);
    png_destroy_write_struct(&png, &info);
    std::fclose(fp);
  }

private:
  int w_, h_;
  std::vector<Rgb> px_;
};

}  // namespace detail

// Renders one video's frame-score curve with ground-truth spans shaded
// and a horizontal threshold rule.
inline void render_score_plot(const std::vector<double>& frame_scores,
                              const FrameGroundTruth& gt, double threshold,
                              const std::string& out_path) {
  if (frame_scores.empty()) throw ValidationError("render_score_plot: no scores");
  const int width = 800, height = 240;
  const int ml = 12, mr = 12, mt = 12, mb = 12;
  const int pw = width - ml - mr, ph = height - mt - mb;
  const auto n = static_cast<int64_t>(frame_scores.size());

  detail::Canvas canvas(width, height, {255, 255, 255});
  auto to_x = [&](int64_t f) {
    return ml + static_cast<int>(static_cast<double>(f) / std::max<int64_t>(n - 1, 1) * (pw - 1));
  };
  auto to_y = [&](double s) {
    s = std::clamp(s, 0.0, 1.0);
    return mt + static_cast<int>((1.0 - s) * (ph - 1));
  };

  for (const auto& [s, e] : gt.intervals)
    canvas.fill_rect(to_x(s), mt, to_x(std::min(e, n) - 1) + 1, mt + ph, {255, 205, 205});

  // Threshold rule.
  canvas.line(ml, to_y(threshold), ml + pw - 1, to_y(threshold), {190, 190, 190});

  for (int64_t f = 0; f + 1 < n; ++f)
    canvas.line(to_x(f), to_y(frame_scores[static_cast<size_t>(f)]), to_x(f + 1),
                to_y(frame_scores[static_cast<size_t>(f + 1)]), {40, 70, 200});

  // Frame.
  canvas.line(ml, mt, ml + pw - 1, mt, {0, 0, 0});
  canvas.line(ml, mt + ph - 1, ml + pw - 1, mt + ph - 1, {0, 0, 0});
  canvas.line(ml, mt, ml, mt + ph - 1, {0, 0, 0});
  canvas.line(ml + pw - 1, mt, ml + pw - 1, mt + ph - 1, {0, 0, 0});

  canvas.write_png(out_path);
}

}  // namespace mist
