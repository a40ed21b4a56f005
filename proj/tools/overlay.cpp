// Copyright 2026 The Polytok Authors. All Rights Reserved.
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     https://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#include "overlay.hpp"

#include <png.h>

#include <array>
#include <cmath>
#include <cstdio>
#include <map>
#include <sstream>
#include <vector>

#include "polytok/error.hpp"

namespace polytok::tools {
namespace {

struct Rgb {
  std::uint8_t r, g, b;
};

constexpr Rgb kGtColor{40, 200, 80};
constexpr Rgb kPredColor{230, 50, 50};
constexpr Rgb kText{255, 255, 255};

class Canvas {
 public:
  Canvas(int w, int h) : w_(w), h_(h), px_(static_cast<std::size_t>(w) * h * 3, 0) {}

  void set(int x, int y, Rgb c) {
    if (x < 0 || y < 0 || x >= w_ || y >= h_) return;
    auto* p = &px_[(static_cast<std::size_t>(y) * w_ + x) * 3];
    p[0] = c.r;
    p[1] = c.g;
    p[2] = c.b;
  }

  void line(int x0, int y0, int x1, int y1, Rgb c) {
    const int dx = std::abs(x1 - x0), sx = x0 < x1 ? 1 : -1;
    const int dy = -std::abs(y1 - y0), sy = y0 < y1 ? 1 : -1;
    int err = dx + dy;
    for (;;) {
      set(x0, y0, c);
      if (x0 == x1 && y0 == y1) break;
      const int e2 = 2 * err;
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

  void box(int cx, int cy, int r, Rgb c) {
    for (int y = cy - r; y <= cy + r; ++y) {
      for (int x = cx - r; x <= cx + r; ++x) set(x, y, c);
    }
  }

  int width() const { return w_; }
  int height() const { return h_; }
  const std::vector<std::uint8_t>& data() const { return px_; }

 private:
  int w_, h_;
  std::vector<std::uint8_t> px_;
};

// 3x5 glyphs, one row per string, '#' set.
const std::map<char, std::array<const char*, 5>>& font() {
  static const std::map<char, std::array<const char*, 5>> f{
      {'0', {"###", "#.#", "#.#", "#.#", "###"}}, {'1', {".#.", "##.", ".#.", ".#.", "###"}},
      {'2', {"###", "..#", "###", "#..", "###"}}, {'3', {"###", "..#", "###", "..#", "###"}},
      {'4', {"#.#", "#.#", "###", "..#", "..#"}}, {'5', {"###", "#..", "###", "..#", "###"}},
      {'6', {"###", "#..", "###", "#.#", "###"}}, {'7', {"###", "..#", "..#", "..#", "..#"}},
      {'8', {"###", "#.#", "###", "#.#", "###"}}, {'9', {"###", "#.#", "###", "..#", "###"}},
      {'A', {"###", "#.#", "###", "#.#", "#.#"}}, {'D', {"##.", "#.#", "#.#", "#.#", "##."}},
      {'E', {"###", "#..", "##.", "#..", "###"}}, {'F', {"###", "#..", "##.", "#..", "#.."}},
      {'G', {"###", "#..", "#.#", "#.#", "###"}}, {'I', {"###", ".#.", ".#.", ".#.", "###"}},
      {'L', {"#..", "#..", "#..", "#..", "###"}}, {'N', {"#.#", "###", "###", "#.#", "#.#"}},
      {'O', {"###", "#.#", "#.#", "#.#", "###"}}, {'P', {"###", "#.#", "###", "#..", "#.."}},
      {'R', {"##.", "#.#", "##.", "#.#", "#.#"}}, {'T', {"###", ".#.", ".#.", ".#.", ".#."}},
      {'U', {"#.#", "#.#", "#.#", "#.#", "###"}}, {'V', {"#.#", "#.#", "#.#", "#.#", ".#."}},
      {'.', {"...", "...", "...", "...", ".#."}},  {':', {"...", ".#.", "...", ".#.", "..."}},
      {'=', {"...", "###", "...", "###", "..."}},  {'-', {"...", "...", "###", "...", "..."}},
      {' ', {"...", "...", "...", "...", "..."}}};
  return f;
}

void text(Canvas& c, int x, int y, const std::string& s, Rgb color, int scale) {
  for (char ch : s) {
    const auto it = font().find(ch);
    if (it != font().end()) {
      for (int r = 0; r < 5; ++r) {
        for (int k = 0; k < 3; ++k) {
          if (it->second[static_cast<std::size_t>(r)][k] != '#') continue;
          for (int dy = 0; dy < scale; ++dy) {
            for (int dx = 0; dx < scale; ++dx) c.set(x + k * scale + dx, y + r * scale + dy, color);
          }
        }
      }
    }
    x += 4 * scale;
  }
}

void ring(Canvas& c, const Polygon& p, int zoom, Rgb color) {
  // Vertices sit on pixel corners, so scale the corner coordinates directly.
  for (std::size_t i = 0; i < p.size(); ++i) {
    const Point& a = p[i];
    const Point& b = p[(i + 1) % p.size()];
    c.line(a.x * zoom, a.y * zoom, b.x * zoom, b.y * zoom, color);
  }
  for (const Point& v : p.vertices) c.box(v.x * zoom, v.y * zoom, 2, color);
}

void write_png(const std::filesystem::path& path, int w, int h, int color_type, const std::uint8_t* data,
               int channels) {
  std::FILE* fp = std::fopen(path.string().c_str(), "wb");
  if (!fp) throw Error("io", "cannot open " + path.string() + " for writing");
  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png ? png_create_info_struct(png) : nullptr;
  if (!png || !info || setjmp(png_jmpbuf(png))) {
    png_destroy_write_struct(&png, &info);
    std::fclose(fp);
    throw Error("io", "png encoding failed for " + path.string());
  }
  png_init_io(png, fp);
  png_set_IHDR(png, info, static_cast<png_uint_32>(w), static_cast<png_uint_32>(h), 8, color_type,
               PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
  png_write_info(png, info);
  for (int y = 0; y < h; ++y) {
    png_write_row(png, data + static_cast<std::size_t>(y) * w * channels);
  }
  png_write_end(png, nullptr);
  png_destroy_write_struct(&png, &info);
  std::fclose(fp);
}

std::string points(const Polygon& p) {
  std::ostringstream s;
  for (std::size_t i = 0; i < p.size(); ++i) s << (i ? " " : "") << p[i].x << "," << p[i].y;
  return s.str();
}

std::string fmt_iou(double v) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.3f", v);
  return buf;
}

}  // namespace

std::string overlay_svg(const Overlay& o, const std::string& background_href) {
  const int w = o.base.width, h = o.base.height;
  std::ostringstream s;
  s << "<svg xmlns=\"http://www.w3.org/2000/svg\" xmlns:xlink=\"http://www.w3.org/1999/xlink\" width=\""
    << w * 4 << "\" height=\"" << (h + 24) * 4 << "\" viewBox=\"0 0 " << w << " " << h + 24 << "\">\n";
  if (!background_href.empty()) {
    s << "  <image xlink:href=\"" << background_href << "\" x=\"0\" y=\"0\" width=\"" << w << "\" height=\"" << h
      << "\" style=\"image-rendering:pixelated\"/>\n";
  }
  s << "  <polygon class=\"gt\" points=\"" << points(o.gt)
    << "\" fill=\"none\" stroke=\"rgb(40,200,80)\" stroke-width=\"0.6\"/>\n";
  for (const Point& v : o.gt.vertices) {
    s << "  <circle class=\"gt-vertex\" cx=\"" << v.x << "\" cy=\"" << v.y << "\" r=\"0.9\" fill=\"rgb(40,200,80)\"/>\n";
  }
  if (o.pred) {
    s << "  <polygon class=\"pred\" points=\"" << points(*o.pred)
      << "\" fill=\"none\" stroke=\"rgb(230,50,50)\" stroke-width=\"0.6\" stroke-dasharray=\"2,1\"/>\n";
    for (const Point& v : o.pred->vertices) {
      s << "  <rect class=\"pred-vertex\" x=\"" << v.x - 0.8 << "\" y=\"" << v.y - 0.8
        << "\" width=\"1.6\" height=\"1.6\" fill=\"rgb(230,50,50)\"/>\n";
    }
  }
  s << "  <rect x=\"0\" y=\"" << h << "\" width=\"" << w << "\" height=\"24\" fill=\"black\"/>\n";
  s << "  <text x=\"2\" y=\"" << h + 7 << "\" font-size=\"6\" fill=\"rgb(40,200,80)\">gt: " << o.gt.size()
    << " vertices</text>\n";
  s << "  <text x=\"2\" y=\"" << h + 14 << "\" font-size=\"6\" fill=\"rgb(230,50,50)\">pred: "
    << (o.pred ? std::to_string(o.pred->size()) + " vertices" : std::string("decode failure")) << "</text>\n";
  s << "  <text x=\"2\" y=\"" << h + 21 << "\" font-size=\"6\" fill=\"white\">IoU " << fmt_iou(o.iou) << " "
    << o.title << "</text>\n";
  s << "</svg>\n";
  return s.str();
}

void write_overlay_png(const Overlay& o, const std::filesystem::path& path, int zoom) {
  const int legend = 3 * 7 * 2 + 8;
  Canvas c(o.base.width * zoom + 1, o.base.height * zoom + 1 + legend);
  for (int y = 0; y < o.base.height * zoom; ++y) {
    for (int x = 0; x < o.base.width * zoom; ++x) {
      const std::uint8_t v = o.base.at(x / zoom, y / zoom);
      c.set(x, y, {v, v, v});
    }
  }
  ring(c, o.gt, zoom, kGtColor);
  if (o.pred) ring(c, *o.pred, zoom, kPredColor);
  const int y0 = o.base.height * zoom + 4;
  text(c, 4, y0, "GT V=" + std::to_string(o.gt.size()), kGtColor, 2);
  text(c, 4, y0 + 14, o.pred ? "PRED V=" + std::to_string(o.pred->size()) : std::string("PRED FAIL"), kPredColor, 2);
  text(c, c.width() / 2 + 8, y0, "IOU " + fmt_iou(o.iou), kText, 2);
  write_png(path, c.width(), c.height(), PNG_COLOR_TYPE_RGB, c.data().data(), 3);
}

void write_gray_png(const Image& img, const std::filesystem::path& path) {
  write_png(path, img.width, img.height, PNG_COLOR_TYPE_GRAY, img.pixels.data(), 1);
}

}  // namespace polytok::tools
