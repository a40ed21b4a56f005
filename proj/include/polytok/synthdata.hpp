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

#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <optional>
#include <random>
#include <string>
#include <unordered_map>
#include <vector>

#include "polytok/error.hpp"
#include "polytok/geometry.hpp"
#include "polytok/image.hpp"
#include "polytok/json_io.hpp"

namespace polytok {

inline constexpr int kCropSize = 128;
inline constexpr double kTestCropScale = 1.3;
inline constexpr double kTrainScaleMin = 1.1;
inline constexpr double kTrainScaleMax = 1.5;

struct SceneSpec {
  int image_w = 256;
  int image_h = 256;
  Polygon polygon;
  int fill_shade = 200;
  int bg_shade = 80;
  double noise_sigma = 0.0;
  double edge_jitter = 0.0;
  std::uint64_t seed = 0;
};

struct CropSample {
  Image image;  // kCropSize x kCropSize
  Polygon gt;   // canonical, crop coordinates
  std::string source_id;
  double crop_scale = kTestCropScale;
  BBox crop_box;  // region of the source image that was resampled
};

// Maps lattice coordinates between a source region and the square crop.
struct CropTransform {
  BBox box;
  int out = kCropSize;

  Point to_crop(const Point& p) const {
    const double u = (p.x - box.x_min) * static_cast<double>(out) / box.width();
    const double v = (p.y - box.y_min) * static_cast<double>(out) / box.height();
    return {std::clamp(static_cast<int>(std::lround(u)), 0, out - 1),
            std::clamp(static_cast<int>(std::lround(v)), 0, out - 1)};
  }

  Point to_source(const Point& p) const {
    const double x = box.x_min + p.x * static_cast<double>(box.width()) / out;
    const double y = box.y_min + p.y * static_cast<double>(box.height()) / out;
    return {static_cast<int>(std::lround(x)), static_cast<int>(std::lround(y))};
  }
};

// Removes consecutive duplicates (ring-wise).
inline Polygon collapse_duplicates(const Polygon& p) {
  Polygon out;
  for (const Point& v : p.vertices) {
    if (out.vertices.empty() || !(out.vertices.back() == v)) out.vertices.push_back(v);
  }
  while (out.size() > 1 && out.vertices.front() == out.vertices.back()) out.vertices.pop_back();
  return out;
}

inline Polygon map_polygon(const Polygon& p, const CropTransform& t, bool to_crop) {
  Polygon out;
  out.vertices.reserve(p.size());
  for (const Point& v : p.vertices) out.vertices.push_back(to_crop ? t.to_crop(v) : t.to_source(v));
  return collapse_duplicates(out);
}

// ---------------------------------------------------------------------------
// Rectilinear polygon generation on a cell grid.

namespace detail {

// Traces the boundary of a set of filled cells. Returns nullopt unless the
// cells form one 4-connected region without holes or pinch points.
inline std::optional<Polygon> trace_cells(const std::vector<std::uint8_t>& cells, int cols, int rows) {
  auto filled = [&](int x, int y) {
    return x >= 0 && y >= 0 && x < cols && y < rows && cells[static_cast<std::size_t>(y) * cols + x];
  };
  const int stride = cols + 1;
  auto key = [stride](int x, int y) { return y * stride + x; };
  std::unordered_map<int, int> next;
  std::size_t edges = 0;
  auto add = [&](int x0, int y0, int x1, int y1) {
    if (!next.emplace(key(x0, y0), key(x1, y1)).second) return false;
    ++edges;
    return true;
  };
  for (int y = 0; y < rows; ++y) {
    for (int x = 0; x < cols; ++x) {
      if (!filled(x, y)) continue;
      // Screen-clockwise around each cell (y down).
      if (!filled(x, y - 1) && !add(x, y, x + 1, y)) return std::nullopt;
      if (!filled(x + 1, y) && !add(x + 1, y, x + 1, y + 1)) return std::nullopt;
      if (!filled(x, y + 1) && !add(x + 1, y + 1, x, y + 1)) return std::nullopt;
      if (!filled(x - 1, y) && !add(x, y + 1, x, y)) return std::nullopt;
    }
  }
  if (edges == 0) return std::nullopt;
  const int start = next.begin()->first;
  std::vector<int> chain;
  int cur = start;
  do {
    chain.push_back(cur);
    auto it = next.find(cur);
    if (it == next.end()) return std::nullopt;
    cur = it->second;
    if (chain.size() > edges) return std::nullopt;
  } while (cur != start);
  if (chain.size() != edges) return std::nullopt;

  Polygon poly;
  const std::size_t n = chain.size();
  for (std::size_t i = 0; i < n; ++i) {
    const int a = chain[(i + n - 1) % n];
    const int b = chain[i];
    const int c = chain[(i + 1) % n];
    const int dx0 = b % stride - a % stride;
    const int dy0 = b / stride - a / stride;
    const int dx1 = c % stride - b % stride;
    const int dy1 = c / stride - b / stride;
    if (dx0 != dx1 || dy0 != dy1) poly.vertices.push_back({b % stride, b / stride});
  }
  return poly;
}

inline Polygon translate(const Polygon& p, int dx, int dy) {
  Polygon out = p;
  for (Point& v : out.vertices) {
    v.x += dx;
    v.y += dy;
  }
  return out;
}

}  // namespace detail

struct PolygonGenOptions {
  int max_vertices = 16;
  int grid = 8;           // pixels per cell
  int min_cells = 6;      // per side
  int max_cells = 16;     // per side
  double complexity_decay = 0.7;  // weight ratio between successive vertex counts
  double diagonal_prob = 0.0;     // chance of one chamfered corner
  int max_attempts = 500;
};

// Draws a target vertex count from {4, 6, ..., max_vertices} with
// geometrically decaying weights.
inline int draw_vertex_target(const PolygonGenOptions& opt, Rng& rng) {
  std::vector<double> weights;
  double w = 1.0;
  for (int n = 4; n <= opt.max_vertices; n += 2) {
    weights.push_back(w);
    w *= opt.complexity_decay;
  }
  std::discrete_distribution<int> pick(weights.begin(), weights.end());
  return 4 + 2 * pick(rng);
}

inline Polygon gen_rectilinear_polygon(const PolygonGenOptions& opt, Rng& rng) {
  if (opt.max_vertices < 4 || opt.max_vertices % 2 != 0) {
    throw Error("bad-generator-args", "max_vertices must be even and >= 4");
  }
  if (opt.grid < 4) throw Error("bad-generator-args", "grid must be >= 4");
  if (opt.min_cells < 3 || opt.max_cells < opt.min_cells) throw Error("bad-generator-args", "cell range");

  const int target = draw_vertex_target(opt, rng);
  std::uniform_int_distribution<int> side(opt.min_cells, opt.max_cells);
  std::uniform_int_distribution<int> op_kind(0, 1);
  std::uniform_int_distribution<int> corner_pick(0, 3);
  std::uniform_real_distribution<double> unit(0.0, 1.0);

  for (int attempt = 0; attempt < opt.max_attempts; ++attempt) {
    const int cols = side(rng);
    const int rows = side(rng);
    std::vector<std::uint8_t> cells(static_cast<std::size_t>(cols) * rows, 1);
    Polygon ring = *detail::trace_cells(cells, cols, rows);
    for (int op = 0; op < 12 && static_cast<int>(ring.size()) < target; ++op) {
      std::vector<std::uint8_t> trial = cells;
      auto clear_rect = [&](int x0, int y0, int x1, int y1) {
        for (int y = y0; y < y1; ++y)
          for (int x = x0; x < x1; ++x) trial[static_cast<std::size_t>(y) * cols + x] = 0;
      };
      if (op_kind(rng) == 0) {
        // Rectangle cut anchored at a bounding-box corner.
        const int w = std::uniform_int_distribution<int>(1, std::max(1, cols / 2))(rng);
        const int h = std::uniform_int_distribution<int>(1, std::max(1, rows / 2))(rng);
        switch (corner_pick(rng)) {
          case 0: clear_rect(0, 0, w, h); break;
          case 1: clear_rect(cols - w, 0, cols, h); break;
          case 2: clear_rect(cols - w, rows - h, cols, rows); break;
          default: clear_rect(0, rows - h, w, rows); break;
        }
      } else {
        // Notch cut into one side, away from the corners.
        const int s = corner_pick(rng);
        const int along = (s % 2 == 0) ? cols : rows;
        const int across = (s % 2 == 0) ? rows : cols;
        if (along < 4 || across < 3) continue;
        const int a = std::uniform_int_distribution<int>(1, along - 3)(rng);
        const int b = std::uniform_int_distribution<int>(a + 1, along - 2)(rng);
        const int d = std::uniform_int_distribution<int>(1, std::max(1, across / 3))(rng);
        switch (s) {
          case 0: clear_rect(a, 0, b, d); break;
          case 1: clear_rect(cols - d, a, cols, b); break;
          case 2: clear_rect(a, rows - d, b, rows); break;
          default: clear_rect(0, a, d, b); break;
        }
      }
      auto traced = detail::trace_cells(trial, cols, rows);
      if (!traced || static_cast<int>(traced->size()) > target) continue;
      cells = std::move(trial);
      ring = std::move(*traced);
    }
    if (static_cast<int>(ring.size()) != target) continue;

    Polygon scaled = ring;
    for (Point& v : scaled.vertices) {
      v.x *= opt.grid;
      v.y *= opt.grid;
    }
    if (opt.diagonal_prob > 0.0 && unit(rng) < opt.diagonal_prob &&
        static_cast<int>(scaled.size()) + 1 <= opt.max_vertices) {
      const std::size_t n = scaled.size();
      const std::size_t i = std::uniform_int_distribution<std::size_t>(0, n - 1)(rng);
      const Point u = scaled[(i + n - 1) % n];
      const Point v = scaled[i];
      const Point w = scaled[(i + 1) % n];
      const long long turn = detail::cross(u, v, w);
      const int len_in = std::abs(v.x - u.x) + std::abs(v.y - u.y);
      const int len_out = std::abs(w.x - v.x) + std::abs(w.y - v.y);
      const int c = opt.grid / 2;
      if (turn > 0 && len_in > 2 * c && len_out > 2 * c) {
        auto step_towards = [c](const Point& from, const Point& to) {
          const int sx = (to.x > from.x) - (to.x < from.x);
          const int sy = (to.y > from.y) - (to.y < from.y);
          return Point{from.x + sx * c, from.y + sy * c};
        };
        Polygon chamfered;
        for (std::size_t k = 0; k < n; ++k) {
          if (k == i) {
            chamfered.vertices.push_back(step_towards(v, u));
            chamfered.vertices.push_back(step_towards(v, w));
          } else {
            chamfered.vertices.push_back(scaled[k]);
          }
        }
        if (!has_self_intersection(chamfered)) scaled = std::move(chamfered);
      }
    }
    if (has_self_intersection(scaled)) continue;
    return canonicalize(scaled);
  }
  throw Error("generation-failed", "no simple polygon after " + std::to_string(opt.max_attempts) + " attempts");
}

inline Polygon gen_rectilinear_polygon(int max_vertices, int grid, Rng& rng) {
  PolygonGenOptions opt;
  opt.max_vertices = max_vertices;
  opt.grid = grid;
  return gen_rectilinear_polygon(opt, rng);
}

// ---------------------------------------------------------------------------
// Rasterization

inline Image rasterize(const SceneSpec& spec) {
  if (std::abs(spec.fill_shade - spec.bg_shade) < 20) {
    throw Error("bad-scene", "fill and background shades must differ by >= 20");
  }
  Rng rng(spec.seed);
  std::vector<PointF> ring = to_float_ring(spec.polygon);
  if (spec.edge_jitter > 0.0) {
    std::uniform_real_distribution<double> jitter(-spec.edge_jitter, spec.edge_jitter);
    for (PointF& v : ring) {
      v.x += jitter(rng);
      v.y += jitter(rng);
    }
  }
  const auto mask = fill_mask(ring, 0.0, 0.0, 1, spec.image_w, spec.image_h);
  Image img(spec.image_w, spec.image_h);
  std::normal_distribution<double> noise(0.0, spec.noise_sigma > 0.0 ? spec.noise_sigma : 1.0);
  for (std::size_t i = 0; i < mask.size(); ++i) {
    double value = mask[i] ? spec.fill_shade : spec.bg_shade;
    if (spec.noise_sigma > 0.0) value += noise(rng);
    img.pixels[i] = static_cast<std::uint8_t>(std::clamp(std::lround(value), 0L, 255L));
  }
  return img;
}

// ---------------------------------------------------------------------------
// Cropping

inline Image resample_nearest(const Image& src, const BBox& box, int out = kCropSize) {
  Image dst(out, out);
  for (int v = 0; v < out; ++v) {
    const int sy = std::clamp(box.y_min + static_cast<int>(std::floor((v + 0.5) * box.height() / out)),
                              0, src.height - 1);
    for (int u = 0; u < out; ++u) {
      const int sx = std::clamp(box.x_min + static_cast<int>(std::floor((u + 0.5) * box.width() / out)),
                                0, src.width - 1);
      dst.at(u, v) = src.at(sx, sy);
    }
  }
  return dst;
}

// Absolute difference from the median border pixel, rescaled so the largest
// difference is 255. The enlarged crop always has a background margin, so the
// background lands near 0 whichever of object and background is brighter.
inline Image normalize_crop(const Image& img) {
  std::vector<int> border;
  for (int x = 0; x < img.width; ++x) {
    border.push_back(img.at(x, 0));
    border.push_back(img.at(x, img.height - 1));
  }
  for (int y = 1; y + 1 < img.height; ++y) {
    border.push_back(img.at(0, y));
    border.push_back(img.at(img.width - 1, y));
  }
  const auto mid = border.begin() + static_cast<std::ptrdiff_t>(border.size() / 2);
  std::nth_element(border.begin(), mid, border.end());
  const int median = *mid;
  int peak = 0;
  for (std::uint8_t v : img.pixels) peak = std::max(peak, std::abs(v - median));
  Image out(img.width, img.height);
  if (peak == 0) return out;
  for (std::size_t i = 0; i < img.pixels.size(); ++i) {
    out.pixels[i] = static_cast<std::uint8_t>(std::abs(img.pixels[i] - median) * 255 / peak);
  }
  return out;
}

inline Image model_crop(const Image& image, const BBox& box) { return normalize_crop(resample_nearest(image, box)); }

inline CropSample crop_at_scale(const Image& image, const Polygon& gt, const BBox& bbox, double scale) {
  const BBox box = enlarge_bbox(bbox, scale, image.width, image.height);
  if (box.width() <= 0 || box.height() <= 0) throw Error("degenerate-after-transform", "empty crop box");
  const CropTransform t{box};
  CropSample s;
  s.image = model_crop(image, box);
  s.crop_scale = scale;
  s.crop_box = box;
  const Polygon mapped = map_polygon(gt, t, true);
  if (mapped.size() < 3 || shoelace_signed_area(mapped) == 0.0) {
    throw Error("degenerate-after-transform", "mapped polygon has < 3 distinct vertices");
  }
  s.gt = canonicalize(mapped);
  return s;
}

// Training mode (rng given): scale ~ U[1.1, 1.5]. Test mode: scale 1.3.
inline CropSample crop_sample(const Image& image, const Polygon& gt, const BBox& bbox, Rng* rng) {
  double scale = kTestCropScale;
  if (rng != nullptr) scale = std::uniform_real_distribution<double>(kTrainScaleMin, kTrainScaleMax)(*rng);
  return crop_at_scale(image, gt, bbox, scale);
}

// ---------------------------------------------------------------------------
// Datasets

struct GenParams {
  int scene_size = 256;
  PolygonGenOptions polygon;
  int min_contrast = 40;
  double noise_sigma_min = 2.0;
  double noise_sigma_max = 12.0;
  double edge_jitter = 0.5;
};

inline json gen_params_to_json(const GenParams& g) {
  return json{{"scene_size", g.scene_size},
              {"max_vertices", g.polygon.max_vertices},
              {"grid", g.polygon.grid},
              {"min_cells", g.polygon.min_cells},
              {"max_cells", g.polygon.max_cells},
              {"complexity_decay", g.polygon.complexity_decay},
              {"diagonal_prob", g.polygon.diagonal_prob},
              {"min_contrast", g.min_contrast},
              {"noise_sigma_min", g.noise_sigma_min},
              {"noise_sigma_max", g.noise_sigma_max},
              {"edge_jitter", g.edge_jitter}};
}

inline GenParams gen_params_from_json(const json& j) {
  GenParams g;
  g.scene_size = j.value("scene_size", g.scene_size);
  g.polygon.max_vertices = j.value("max_vertices", g.polygon.max_vertices);
  g.polygon.grid = j.value("grid", g.polygon.grid);
  g.polygon.min_cells = j.value("min_cells", g.polygon.min_cells);
  g.polygon.max_cells = j.value("max_cells", g.polygon.max_cells);
  g.polygon.complexity_decay = j.value("complexity_decay", g.polygon.complexity_decay);
  g.polygon.diagonal_prob = j.value("diagonal_prob", g.polygon.diagonal_prob);
  g.min_contrast = j.value("min_contrast", g.min_contrast);
  g.noise_sigma_min = j.value("noise_sigma_min", g.noise_sigma_min);
  g.noise_sigma_max = j.value("noise_sigma_max", g.noise_sigma_max);
  g.edge_jitter = j.value("edge_jitter", g.edge_jitter);
  return g;
}

// A full-size scene with one building, in source coordinates.
struct Scene {
  Image image;
  Polygon gt;
  BBox bbox;
};

inline std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9E3779B97F4A7C15ull;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ull;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBull;
  return x ^ (x >> 31);
}

inline std::uint64_t derive_seed(std::uint64_t master, std::uint64_t stream, std::uint64_t index) {
  return splitmix64(splitmix64(master ^ (stream * 0x100000001B3ull)) ^ index);
}

inline Scene generate_scene(const GenParams& g, std::uint64_t seed) {
  Rng rng(seed);
  Polygon local = gen_rectilinear_polygon(g.polygon, rng);
  const BBox lb = bounding_box(local);
  const int extent = std::max(lb.width(), lb.height());
  const int margin = extent / 4 + 2;
  const int max_x = g.scene_size - margin - lb.width();
  const int max_y = g.scene_size - margin - lb.height();
  if (max_x < margin || max_y < margin) throw Error("bad-generator-args", "scene too small for building");
  const int ox = std::uniform_int_distribution<int>(margin, max_x)(rng);
  const int oy = std::uniform_int_distribution<int>(margin, max_y)(rng);
  Scene scene;
  scene.gt = canonicalize(detail::translate(local, ox - lb.x_min, oy - lb.y_min));
  scene.bbox = bounding_box(scene.gt);

  SceneSpec spec;
  spec.image_w = spec.image_h = g.scene_size;
  spec.polygon = scene.gt;
  spec.bg_shade = std::uniform_int_distribution<int>(30, 225)(rng);
  std::vector<int> fills;
  for (int v = 0; v <= 255; ++v) {
    if (std::abs(v - spec.bg_shade) >= g.min_contrast) fills.push_back(v);
  }
  spec.fill_shade = fills[std::uniform_int_distribution<std::size_t>(0, fills.size() - 1)(rng)];
  spec.noise_sigma = std::uniform_real_distribution<double>(g.noise_sigma_min, g.noise_sigma_max)(rng);
  spec.edge_jitter = g.edge_jitter;
  spec.seed = rng();
  scene.image = rasterize(spec);
  return scene;
}

enum class Split { kTrain, kVal, kTest };

inline const char* split_name(Split s) {
  switch (s) {
    case Split::kTrain: return "train";
    case Split::kVal: return "val";
    case Split::kTest: return "test";
  }
  return "?";
}

inline Split split_from_name(const std::string& s) {
  if (s == "train") return Split::kTrain;
  if (s == "val") return Split::kVal;
  if (s == "test") return Split::kTest;
  throw Error("bad-split", s);
}

// One dataset entry: the training/inference crop plus, for held-out splits,
// the source scene used by oracle-box evaluation.
struct DatasetSample {
  CropSample crop;
  std::optional<Scene> scene;
};

inline DatasetSample make_sample(const GenParams& g, std::uint64_t master_seed, Split split, int index) {
  const std::uint64_t seed = derive_seed(master_seed, static_cast<std::uint64_t>(split) + 1, index);
  Scene scene = generate_scene(g, seed);
  Rng crop_rng(splitmix64(seed));
  DatasetSample s;
  s.crop = crop_sample(scene.image, scene.gt, scene.bbox, split == Split::kTrain ? &crop_rng : nullptr);
  char id[32];
  std::snprintf(id, sizeof(id), "%s_%05d", split_name(split), index);
  s.crop.source_id = id;
  if (split != Split::kTrain) s.scene = std::move(scene);
  return s;
}

inline json crop_annotation(const DatasetSample& s) {
  json j = polygon_to_json(s.crop.gt);
  j["source_id"] = s.crop.source_id;
  j["crop_scale"] = s.crop.crop_scale;
  j["crop_box"] = bbox_to_json(s.crop.crop_box);
  if (s.scene) {
    j["scene_vertices"] = polygon_to_json(s.scene->gt)["vertices"];
    j["scene_bbox"] = bbox_to_json(s.scene->bbox);
  }
  return j;
}

struct DatasetCounts {
  int train = 0;
  int val = 0;
  int test = 0;
};

// Writes manifest.json, {split}/{id}.pgm and {split}/{id}.json under out_dir.
// Held-out splits also get {split}/{id}_scene.pgm.
inline json build_dataset(const DatasetCounts& counts, const GenParams& g, std::uint64_t master_seed,
                          const std::filesystem::path& out_dir) {
  namespace fs = std::filesystem;
  if (counts.train < 1 || counts.val < 1 || counts.test < 1) throw Error("bad-counts", "all splits need >= 1");
  json entries = json::array();
  const std::pair<Split, int> plan[] = {
      {Split::kTrain, counts.train}, {Split::kVal, counts.val}, {Split::kTest, counts.test}};
  for (const auto& [split, n] : plan) {
    const fs::path dir = out_dir / split_name(split);
    fs::create_directories(dir);
    for (int i = 0; i < n; ++i) {
      const DatasetSample s = make_sample(g, master_seed, split, i);
      const std::string id = s.crop.source_id;
      write_pgm(s.crop.image, dir / (id + ".pgm"));
      write_json_file(crop_annotation(s), dir / (id + ".json"));
      json e{{"split", split_name(split)},
             {"source_id", id},
             {"image", std::string(split_name(split)) + "/" + id + ".pgm"},
             {"annotation", std::string(split_name(split)) + "/" + id + ".json"}};
      if (s.scene) {
        write_pgm(s.scene->image, dir / (id + "_scene.pgm"));
        e["scene_image"] = std::string(split_name(split)) + "/" + id + "_scene.pgm";
      }
      entries.push_back(e);
    }
  }
  json manifest{{"format_version", 1},
                {"master_seed", master_seed},
                {"gen_params", gen_params_to_json(g)},
                {"counts", {{"train", counts.train}, {"val", counts.val}, {"test", counts.test}}},
                {"entries", entries}};
  write_json_file(manifest, out_dir / "manifest.json");
  return manifest;
}

inline DatasetSample load_entry(const std::filesystem::path& root, const json& entry) {
  DatasetSample s;
  s.crop.image = read_pgm(root / entry.at("image").get<std::string>());
  const json ann = read_json_file(root / entry.at("annotation").get<std::string>());
  s.crop.gt = polygon_from_json(ann);
  s.crop.source_id = ann.at("source_id").get<std::string>();
  s.crop.crop_scale = ann.at("crop_scale").get<double>();
  s.crop.crop_box = bbox_from_json(ann.at("crop_box"));
  if (s.crop.image.width != kCropSize || s.crop.image.height != kCropSize) {
    throw Error("bad-sample", s.crop.source_id + " is not " + std::to_string(kCropSize) + "x" +
                                  std::to_string(kCropSize));
  }
  if (entry.contains("scene_image")) {
    Scene scene;
    scene.image = read_pgm(root / entry.at("scene_image").get<std::string>());
    scene.gt = polygon_from_json(json{{"vertices", ann.at("scene_vertices")}});
    scene.bbox = bbox_from_json(ann.at("scene_bbox"));
    s.scene = std::move(scene);
  }
  return s;
}

// Loads every entry of one split listed in the manifest.
inline std::vector<DatasetSample> load_split(const std::filesystem::path& manifest_path, Split split) {
  const json manifest = read_json_file(manifest_path);
  const auto root = manifest_path.parent_path();
  std::vector<DatasetSample> out;
  for (const json& e : manifest.at("entries")) {
    if (e.at("split").get<std::string>() == split_name(split)) out.push_back(load_entry(root, e));
  }
  return out;
}

// In-memory equivalent of build_dataset for one split, used by tests and
// the acceptance harness.
inline std::vector<DatasetSample> generate_split(const GenParams& g, std::uint64_t master_seed, Split split,
                                                 int n) {
  std::vector<DatasetSample> out;
  out.reserve(n);
  for (int i = 0; i < n; ++i) out.push_back(make_sample(g, master_seed, split, i));
  return out;
}

}  // namespace polytok
