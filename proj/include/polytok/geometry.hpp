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
#include <numeric>
#include <random>
#include <span>
#include <string>
#include <tuple>
#include <vector>

#include "polytok/error.hpp"

namespace polytok {

using Rng = std::mt19937_64;

// Integer pixel coordinate. y grows downward (image rows).
struct Point {
  int x = 0;
  int y = 0;

  friend bool operator==(const Point&, const Point&) = default;
};

// Open vertex ring: the closing vertex is not stored.
struct Polygon {
  std::vector<Point> vertices;

  std::size_t size() const noexcept { return vertices.size(); }
  const Point& operator[](std::size_t i) const { return vertices[i]; }

  friend bool operator==(const Polygon&, const Polygon&) = default;
};

// x_max / y_max are exclusive: width = x_max - x_min.
struct BBox {
  int x_min = 0;
  int y_min = 0;
  int x_max = 0;
  int y_max = 0;

  int width() const noexcept { return x_max - x_min; }
  int height() const noexcept { return y_max - y_min; }

  friend bool operator==(const BBox&, const BBox&) = default;
};

struct PointF {
  double x = 0.0;
  double y = 0.0;
};

inline double shoelace_signed_area(const Polygon& p) {
  const std::size_t n = p.size();
  long long twice = 0;
  for (std::size_t i = 0; i < n; ++i) {
    const Point& a = p.vertices[i];
    const Point& b = p.vertices[(i + 1) % n];
    twice += static_cast<long long>(a.x) * b.y - static_cast<long long>(b.x) * a.y;
  }
  return 0.5 * static_cast<double>(twice);
}

inline Polygon reversed(const Polygon& p) {
  Polygon out = p;
  std::reverse(out.vertices.begin(), out.vertices.end());
  return out;
}

inline BBox bounding_box(const Polygon& p) {
  if (p.vertices.empty()) throw Error("empty-polygon");
  BBox b{p[0].x, p[0].y, p[0].x, p[0].y};
  for (const Point& v : p.vertices) {
    b.x_min = std::min(b.x_min, v.x);
    b.y_min = std::min(b.y_min, v.y);
    b.x_max = std::max(b.x_max, v.x);
    b.y_max = std::max(b.y_max, v.y);
  }
  return b;
}

// Structural validity: >= 3 vertices, no consecutive duplicates (ring-wise),
// optionally all coordinates inside [0,w) x [0,h).
inline bool is_valid_polygon(const Polygon& p, int image_w = 0, int image_h = 0) {
  const std::size_t n = p.size();
  if (n < 3) return false;
  for (std::size_t i = 0; i < n; ++i) {
    if (p[i] == p[(i + 1) % n]) return false;
    if (image_w > 0 && (p[i].x < 0 || p[i].x >= image_w)) return false;
    if (image_h > 0 && (p[i].y < 0 || p[i].y >= image_h)) return false;
  }
  return true;
}

inline void require_valid(const Polygon& p) {
  if (p.size() < 3) throw Error("invalid-polygon", "fewer than 3 vertices");
  for (std::size_t i = 0; i < p.size(); ++i) {
    if (p[i] == p[(i + 1) % p.size()]) {
      throw Error("invalid-polygon", "consecutive duplicate vertex at " + std::to_string(i));
    }
  }
}

inline Polygon rotate_start(const Polygon& p, int offset) {
  if (offset < 0 || static_cast<std::size_t>(offset) >= p.size()) {
    throw Error("offset-out-of-range", std::to_string(offset));
  }
  Polygon out = p;
  std::rotate(out.vertices.begin(), out.vertices.begin() + offset, out.vertices.end());
  return out;
}

// Screen-clockwise ring starting at the vertex nearest (0,0); ties go to the
// smaller y, then the smaller x.
inline Polygon canonicalize(const Polygon& p) {
  require_valid(p);
  const double area = shoelace_signed_area(p);
  if (area == 0.0) throw Error("collinear-ring");
  Polygon ring = area < 0.0 ? reversed(p) : p;
  auto key = [](const Point& v) {
    return std::tuple{static_cast<long long>(v.x) * v.x + static_cast<long long>(v.y) * v.y, v.y, v.x};
  };
  std::size_t best = 0;
  for (std::size_t i = 1; i < ring.size(); ++i) {
    if (key(ring[i]) < key(ring[best])) best = i;
  }
  return rotate_start(ring, static_cast<int>(best));
}

inline bool is_canonical(const Polygon& p) {
  try {
    return canonicalize(p) == p;
  } catch (const Error&) {
    return false;
  }
}

// Even-odd scanline fill sampled at cell centers. The grid has `cols` x `rows`
// cells of side 1/cells_per_px pixels with its corner at (origin_x, origin_y).
inline std::vector<std::uint8_t> fill_mask(std::span<const PointF> ring, double origin_x,
                                           double origin_y, int cells_per_px, int cols, int rows) {
  std::vector<std::uint8_t> mask(static_cast<std::size_t>(cols) * rows, 0);
  const std::size_t n = ring.size();
  if (n < 3) return mask;
  const double s = cells_per_px;
  std::vector<double> xs;
  for (int r = 0; r < rows; ++r) {
    const double yc = origin_y + (r + 0.5) / s;
    xs.clear();
    for (std::size_t i = 0; i < n; ++i) {
      const PointF& a = ring[i];
      const PointF& b = ring[(i + 1) % n];
      if (a.y == b.y) continue;
      const double lo = std::min(a.y, b.y);
      const double hi = std::max(a.y, b.y);
      if (yc < lo || yc >= hi) continue;
      xs.push_back(a.x + (yc - a.y) * (b.x - a.x) / (b.y - a.y));
    }
    std::sort(xs.begin(), xs.end());
    for (std::size_t k = 0; k + 1 < xs.size(); k += 2) {
      int c0 = static_cast<int>(std::ceil((xs[k] - origin_x) * s - 0.5));
      int c1 = static_cast<int>(std::ceil((xs[k + 1] - origin_x) * s - 0.5));
      c0 = std::clamp(c0, 0, cols);
      c1 = std::clamp(c1, 0, cols);
      std::uint8_t* row = mask.data() + static_cast<std::size_t>(r) * cols;
      for (int c = c0; c < c1; ++c) row[c] = 1;
    }
  }
  return mask;
}

inline std::vector<PointF> to_float_ring(const Polygon& p) {
  std::vector<PointF> out;
  out.reserve(p.size());
  for (const Point& v : p.vertices) out.push_back({static_cast<double>(v.x), static_cast<double>(v.y)});
  return out;
}

// Rasterized IoU on a grid of `supersample` cells per pixel side, even-odd rule.
inline double polygon_iou(const Polygon& a, const Polygon& b, int supersample = 4) {
  if (supersample < 1) throw Error("bad-supersample");
  if (a.size() < 3 || b.size() < 3) throw Error("invalid-polygon", "IoU needs >= 3 vertices");
  const BBox ba = bounding_box(a);
  const BBox bb = bounding_box(b);
  const int x0 = std::min(ba.x_min, bb.x_min);
  const int y0 = std::min(ba.y_min, bb.y_min);
  const int x1 = std::max(ba.x_max, bb.x_max);
  const int y1 = std::max(ba.y_max, bb.y_max);
  const int cols = (x1 - x0) * supersample;
  const int rows = (y1 - y0) * supersample;
  if (cols <= 0 || rows <= 0) throw Error("empty-union");
  const auto ra = to_float_ring(a);
  const auto rb = to_float_ring(b);
  const auto ma = fill_mask(ra, x0, y0, supersample, cols, rows);
  const auto mb = fill_mask(rb, x0, y0, supersample, cols, rows);
  std::size_t inter = 0;
  std::size_t uni = 0;
  for (std::size_t i = 0; i < ma.size(); ++i) {
    inter += ma[i] & mb[i];
    uni += ma[i] | mb[i];
  }
  if (uni == 0) throw Error("empty-union");
  return static_cast<double>(inter) / static_cast<double>(uni);
}

inline Polygon corrupt_delete(const Polygon& p, int k, Rng& rng) {
  if (k < 1 || static_cast<int>(p.size()) - k < 3) {
    throw Error("k-too-large", "cannot delete " + std::to_string(k) + " of " + std::to_string(p.size()));
  }
  std::vector<std::size_t> idx(p.size());
  for (int attempt = 0; attempt < 64; ++attempt) {
    std::iota(idx.begin(), idx.end(), std::size_t{0});
    std::shuffle(idx.begin(), idx.end(), rng);
    std::vector<bool> drop(p.size(), false);
    for (int i = 0; i < k; ++i) drop[idx[i]] = true;
    Polygon out;
    for (std::size_t i = 0; i < p.size(); ++i) {
      if (!drop[i]) out.vertices.push_back(p[i]);
    }
    if (is_valid_polygon(out) && shoelace_signed_area(out) != 0.0) return out;
  }
  throw Error("corruption-failed", "no non-degenerate deletion found");
}

inline Polygon corrupt_insert(const Polygon& p, int k, int delta, Rng& rng, int image_w = 128,
                              int image_h = 128) {
  if (k < 1 || delta < 0) throw Error("bad-corruption-args");
  require_valid(p);
  Polygon out = p;
  std::uniform_int_distribution<int> offset(-delta, delta);
  for (int i = 0; i < k; ++i) {
    bool placed = false;
    for (int attempt = 0; attempt < 64 && !placed; ++attempt) {
      std::uniform_int_distribution<std::size_t> pick(0, out.size() - 1);
      const std::size_t e = pick(rng);
      const Point a = out[e];
      const Point b = out[(e + 1) % out.size()];
      Point m{(a.x + b.x) / 2, (a.y + b.y) / 2};
      m.x = std::clamp(m.x + offset(rng), 0, image_w - 1);
      m.y = std::clamp(m.y + offset(rng), 0, image_h - 1);
      if (m == a || m == b) continue;
      out.vertices.insert(out.vertices.begin() + static_cast<std::ptrdiff_t>(e) + 1, m);
      placed = true;
    }
    if (!placed) throw Error("corruption-failed", "edges too short for insertion");
  }
  return out;
}

// Scales about the center, rounds outward, then clamps to [0,w) x [0,h).
inline BBox enlarge_bbox(const BBox& b, double factor, int image_w, int image_h) {
  if (factor < 1.0) throw Error("bad-factor", "enlargement factor must be >= 1");
  const double cx = 0.5 * (b.x_min + b.x_max);
  const double cy = 0.5 * (b.y_min + b.y_max);
  const double hw = 0.5 * b.width() * factor;
  const double hh = 0.5 * b.height() * factor;
  // Small epsilon keeps exact products (e.g. 98 * 128/98) from rounding outward.
  constexpr double eps = 1e-9;
  BBox out;
  out.x_min = static_cast<int>(std::floor(cx - hw + eps));
  out.y_min = static_cast<int>(std::floor(cy - hh + eps));
  out.x_max = static_cast<int>(std::ceil(cx + hw - eps));
  out.y_max = static_cast<int>(std::ceil(cy + hh - eps));
  out.x_min = std::max(out.x_min, 0);
  out.y_min = std::max(out.y_min, 0);
  out.x_max = std::min(out.x_max, image_w);
  out.y_max = std::min(out.y_max, image_h);
  return out;
}

// Segment predicates for the validity checks.
namespace detail {

inline long long cross(const Point& o, const Point& a, const Point& b) {
  return static_cast<long long>(a.x - o.x) * (b.y - o.y) - static_cast<long long>(a.y - o.y) * (b.x - o.x);
}

inline bool on_segment(const Point& a, const Point& b, const Point& p) {
  return std::min(a.x, b.x) <= p.x && p.x <= std::max(a.x, b.x) && std::min(a.y, b.y) <= p.y &&
         p.y <= std::max(a.y, b.y);
}

}  // namespace detail

// Closed-segment intersection test (touching counts).
inline bool segments_intersect(const Point& p1, const Point& p2, const Point& q1, const Point& q2) {
  using detail::cross;
  using detail::on_segment;
  const long long d1 = cross(q1, q2, p1);
  const long long d2 = cross(q1, q2, p2);
  const long long d3 = cross(p1, p2, q1);
  const long long d4 = cross(p1, p2, q2);
  if (((d1 > 0 && d2 < 0) || (d1 < 0 && d2 > 0)) && ((d3 > 0 && d4 < 0) || (d3 < 0 && d4 > 0))) {
    return true;
  }
  if (d1 == 0 && on_segment(q1, q2, p1)) return true;
  if (d2 == 0 && on_segment(q1, q2, p2)) return true;
  if (d3 == 0 && on_segment(p1, p2, q1)) return true;
  if (d4 == 0 && on_segment(p1, p2, q2)) return true;
  return false;
}

// True when the ring crosses or touches itself anywhere other than at the
// shared endpoint of adjacent edges.
inline bool has_self_intersection(const Polygon& p) {
  const std::size_t n = p.size();
  if (n < 3) return false;
  for (std::size_t i = 0; i < n; ++i) {
    const Point& a1 = p[i];
    const Point& a2 = p[(i + 1) % n];
    for (std::size_t j = i + 1; j < n; ++j) {
      const Point& b1 = p[j];
      const Point& b2 = p[(j + 1) % n];
      const bool adjacent = (j == i + 1) || (i == 0 && j == n - 1);
      if (adjacent) {
        // Adjacent edges share one endpoint; they only conflict when they
        // fold back over each other.
        const Point& shared = (j == i + 1) ? a2 : a1;
        const Point& other_a = (j == i + 1) ? a1 : a2;
        const Point& other_b = (j == i + 1) ? b2 : b1;
        if (detail::cross(shared, other_a, other_b) == 0) {
          const long long dot = static_cast<long long>(other_a.x - shared.x) * (other_b.x - shared.x) +
                                static_cast<long long>(other_a.y - shared.y) * (other_b.y - shared.y);
          if (dot > 0) return true;
        }
        continue;
      }
      if (segments_intersect(a1, a2, b1, b2)) return true;
    }
  }
  return false;
}

}  // namespace polytok
