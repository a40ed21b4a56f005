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
#include <optional>
#include <string>

#include "polytok/geometry.hpp"
#include "polytok/image.hpp"

namespace polytok::tools {

struct Overlay {
  Image base;
  Polygon gt;
  std::optional<Polygon> pred;
  double iou = 0.0;
  std::string title;
};

// Exact coordinates: vertices are written verbatim into the SVG points lists.
std::string overlay_svg(const Overlay& o, const std::string& background_href);

// Rasterized at an integer zoom with a legend strip underneath.
void write_overlay_png(const Overlay& o, const std::filesystem::path& path, int zoom = 4);

void write_gray_png(const Image& img, const std::filesystem::path& path);

}  // namespace polytok::tools
