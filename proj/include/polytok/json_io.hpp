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

#include <filesystem>
#include <fstream>
#include <string>

#include <json.hpp>

#include "polytok/error.hpp"
#include "polytok/geometry.hpp"

namespace polytok {

using json = nlohmann::json;

// {"vertices": [[x,y],...]}, open ring.
inline json polygon_to_json(const Polygon& p) {
  json verts = json::array();
  for (const Point& v : p.vertices) verts.push_back({v.x, v.y});
  return json{{"vertices", verts}};
}

inline Polygon polygon_from_json(const json& j) {
  if (!j.is_object() || !j.contains("vertices") || !j["vertices"].is_array()) {
    throw Error("bad-polygon-json", "expected {\"vertices\": [[x,y],...]}");
  }
  Polygon p;
  for (const json& v : j["vertices"]) {
    if (!v.is_array() || v.size() != 2 || !v[0].is_number_integer() || !v[1].is_number_integer()) {
      throw Error("bad-polygon-json", "vertex must be [int,int]");
    }
    p.vertices.push_back({v[0].get<int>(), v[1].get<int>()});
  }
  return p;
}

inline json bbox_to_json(const BBox& b) { return json::array({b.x_min, b.y_min, b.x_max, b.y_max}); }

inline BBox bbox_from_json(const json& j) {
  if (!j.is_array() || j.size() != 4) throw Error("bad-bbox-json", "expected [x_min,y_min,x_max,y_max]");
  BBox b{j[0].get<int>(), j[1].get<int>(), j[2].get<int>(), j[3].get<int>()};
  if (b.x_min >= b.x_max || b.y_min >= b.y_max) throw Error("bad-bbox-json", "empty box");
  return b;
}

inline json read_json_file(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw Error("io", "cannot open " + path.string());
  try {
    return json::parse(in);
  } catch (const json::parse_error& e) {
    throw Error("bad-json", path.string() + ": " + e.what());
  }
}

inline void write_json_file(const json& j, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw Error("io", "cannot open " + path.string() + " for writing");
  out << j.dump(2) << "\n";
}

}  // namespace polytok
