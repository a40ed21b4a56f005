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
#include <functional>
#include <numeric>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "polytok/codec.hpp"
#include "polytok/error.hpp"
#include "polytok/geometry.hpp"
#include "polytok/json_io.hpp"
#include "polytok/model.hpp"
#include "polytok/synthdata.hpp"

namespace polytok {

inline constexpr int kEvalSchemaVersion = 1;

// ---------------------------------------------------------------------------
// Topology checks

struct ValidityReport {
  bool self_intersection = false;
  bool duplicate_vertices = false;
  bool too_few_vertices = false;
  bool zero_area = false;

  bool ok() const noexcept { return !(self_intersection || duplicate_vertices || too_few_vertices || zero_area); }
};

inline ValidityReport validity_checks(const Polygon& p) {
  ValidityReport r;
  r.too_few_vertices = p.size() < 3;
  for (std::size_t i = 0; i < p.size() && p.size() > 1; ++i) {
    if (p[i] == p[(i + 1) % p.size()]) r.duplicate_vertices = true;
  }
  r.zero_area = shoelace_signed_area(p) == 0.0;
  r.self_intersection = !r.too_few_vertices && has_self_intersection(p);
  return r;
}

struct ValidityRates {
  double self_intersection = 0.0;
  double duplicate_vertices = 0.0;
  double too_few_vertices = 0.0;
  double zero_area = 0.0;
  std::size_t count = 0;
};

inline ValidityRates aggregate_validity(std::span<const ValidityReport> reports) {
  ValidityRates r;
  r.count = reports.size();
  if (reports.empty()) return r;
  for (const auto& v : reports) {
    r.self_intersection += v.self_intersection;
    r.duplicate_vertices += v.duplicate_vertices;
    r.too_few_vertices += v.too_few_vertices;
    r.zero_area += v.zero_area;
  }
  const double n = static_cast<double>(reports.size());
  r.self_intersection /= n;
  r.duplicate_vertices /= n;
  r.too_few_vertices /= n;
  r.zero_area /= n;
  return r;
}

inline nlohmann::json validity_to_json(const ValidityReport& v) {
  return {{"self_intersection", v.self_intersection},
          {"duplicate_vertices", v.duplicate_vertices},
          {"too_few_vertices", v.too_few_vertices},
          {"zero_area", v.zero_area}};
}

// ---------------------------------------------------------------------------
// COCO-style matching

struct Detection {
  Polygon polygon;
  double confidence = 1.0;
};

// One image: its predictions and ground-truth instances.
struct SceneEval {
  std::vector<Detection> preds;
  std::vector<Polygon> gts;
};

inline std::vector<double> coco_thresholds() {
  std::vector<double> t;
  for (int i = 0; i < 10; ++i) t.push_back((50 + 5 * i) / 100.0);
  return t;
}

struct EvalResult {
  std::vector<double> thresholds;
  std::vector<double> ap;         // per threshold
  std::vector<double> precision;  // at full sweep, per threshold
  std::vector<double> recall;     // at full sweep, per threshold
  double map = 0.0;
  double ap50 = 0.0;
  double ap75 = 0.0;
  double ar = 0.0;
  std::size_t num_gt = 0;
  std::size_t num_pred = 0;
  std::size_t valid_decodes = 0;
  std::size_t decode_failures = 0;
  double mean_iou = 0.0;  // failures count as 0
};

namespace detail {

// Area under the precision envelope, all-point interpolation. Detections with
// equal confidence are consumed as one block so tie order cannot matter.
inline double average_precision(std::vector<std::pair<double, bool>> dets, std::size_t num_gt) {
  std::stable_sort(dets.begin(), dets.end(), [](const auto& a, const auto& b) { return a.first > b.first; });
  std::vector<double> rec;
  std::vector<double> prec;
  std::size_t tp = 0;
  std::size_t seen = 0;
  for (std::size_t i = 0; i < dets.size();) {
    std::size_t j = i;
    while (j < dets.size() && dets[j].first == dets[i].first) {
      tp += dets[j].second;
      ++j;
    }
    seen = j;
    rec.push_back(static_cast<double>(tp) / static_cast<double>(num_gt));
    prec.push_back(static_cast<double>(tp) / static_cast<double>(seen));
    i = j;
  }
  for (std::size_t i = prec.size(); i-- > 1;) prec[i - 1] = std::max(prec[i - 1], prec[i]);
  double ap = 0.0;
  double prev_r = 0.0;
  for (std::size_t i = 0; i < rec.size(); ++i) {
    ap += (rec[i] - prev_r) * prec[i];
    prev_r = rec[i];
  }
  return ap;
}

}  // namespace detail

// Greedy matching per threshold: predictions in descending confidence each
// claim the unmatched gt with the highest IoU, provided IoU >= threshold.
inline EvalResult match_and_score(std::span<const SceneEval> scenes, const std::vector<double>& thresholds,
                                  int supersample = 4) {
  EvalResult r;
  r.thresholds = thresholds;
  for (const auto& s : scenes) {
    r.num_gt += s.gts.size();
    r.num_pred += s.preds.size();
  }
  if (r.num_gt == 0) throw Error("no-ground-truth");

  struct Cached {
    std::vector<std::size_t> order;
    std::vector<std::vector<double>> iou;
  };
  std::vector<Cached> cache(scenes.size());
  for (std::size_t s = 0; s < scenes.size(); ++s) {
    const auto& sc = scenes[s];
    auto& c = cache[s];
    c.order.resize(sc.preds.size());
    std::iota(c.order.begin(), c.order.end(), std::size_t{0});
    std::stable_sort(c.order.begin(), c.order.end(), [&](std::size_t a, std::size_t b) {
      return sc.preds[a].confidence > sc.preds[b].confidence;
    });
    c.iou.assign(sc.preds.size(), std::vector<double>(sc.gts.size(), 0.0));
    for (std::size_t i = 0; i < sc.preds.size(); ++i) {
      for (std::size_t g = 0; g < sc.gts.size(); ++g) c.iou[i][g] = polygon_iou(sc.preds[i].polygon, sc.gts[g], supersample);
    }
  }

  for (double t : thresholds) {
    std::vector<std::pair<double, bool>> dets;
    std::size_t tp_total = 0;
    for (std::size_t s = 0; s < scenes.size(); ++s) {
      const auto& sc = scenes[s];
      std::vector<bool> taken(sc.gts.size(), false);
      for (std::size_t i : cache[s].order) {
        int best = -1;
        double best_iou = t;
        for (std::size_t g = 0; g < sc.gts.size(); ++g) {
          if (taken[g] || cache[s].iou[i][g] < best_iou) continue;
          if (best < 0 || cache[s].iou[i][g] > cache[s].iou[i][static_cast<std::size_t>(best)]) best = static_cast<int>(g);
        }
        if (best >= 0) taken[static_cast<std::size_t>(best)] = true;
        dets.emplace_back(sc.preds[i].confidence, best >= 0);
        tp_total += best >= 0;
      }
    }
    r.ap.push_back(detail::average_precision(dets, r.num_gt));
    r.recall.push_back(static_cast<double>(tp_total) / static_cast<double>(r.num_gt));
    r.precision.push_back(r.num_pred ? static_cast<double>(tp_total) / static_cast<double>(r.num_pred) : 0.0);
  }
  auto mean = [](const std::vector<double>& v) {
    return v.empty() ? 0.0 : std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
  };
  r.map = mean(r.ap);
  r.ar = mean(r.recall);
  auto at = [&](double t) {
    for (std::size_t i = 0; i < thresholds.size(); ++i) {
      if (std::abs(thresholds[i] - t) < 1e-9) return r.ap[i];
    }
    return 0.0;
  };
  r.ap50 = at(0.50);
  r.ap75 = at(0.75);
  return r;
}

inline EvalResult match_and_score(const std::vector<Detection>& preds, const std::vector<Polygon>& gts,
                                  const std::vector<double>& thresholds = coco_thresholds()) {
  const SceneEval scene{preds, gts};
  return match_and_score(std::span<const SceneEval>(&scene, 1), thresholds);
}

inline nlohmann::json eval_result_to_json(const EvalResult& r) {
  return {{"schema_version", kEvalSchemaVersion},
          {"thresholds", r.thresholds},
          {"ap", r.ap},
          {"precision", r.precision},
          {"recall", r.recall},
          {"mAP", r.map},
          {"AP50", r.ap50},
          {"AP75", r.ap75},
          {"AR", r.ar},
          {"mean_iou", r.mean_iou},
          {"counts",
           {{"gt", r.num_gt},
            {"pred", r.num_pred},
            {"valid_decodes", r.valid_decodes},
            {"decode_failures", r.decode_failures}}}};
}

// Column names as in the usual results table, values x100 with one decimal.
inline std::string format_metrics_table(const EvalResult& r) {
  char buf[256];
  std::snprintf(buf, sizeof(buf), "%-8s %6s %6s %6s %6s\n%-8s %6.1f %6.1f %6.1f %6.1f\n", "", "mAP", "AP50", "AP75",
                "AR", "model", 100.0 * r.map, 100.0 * r.ap50, 100.0 * r.ap75, 100.0 * r.ar);
  return buf;
}

// ---------------------------------------------------------------------------
// Oracle-box evaluation

// Maps a batch of crops to raw token outputs. Models and test doubles both
// implement this.
using Predictor = std::function<std::vector<std::vector<int>>(std::span<const CropSample>)>;

template <typename T>
Predictor model_predictor(const ModelParams<T>& params, const Vocab& vocab, int max_new) {
  const std::vector<int> prompt = sft_prompt(vocab).ids;
  return [&params, prompt, max_new](std::span<const CropSample> crops) {
    std::vector<Image> images;
    images.reserve(crops.size());
    for (const auto& c : crops) images.push_back(c.image);
    return generate<T>(params, images, prompt, max_new, Vocab::kEos);
  };
}

// Replays ground truth; the reference double for metric plumbing.
inline Predictor echo_predictor(const Vocab& vocab) {
  return [&vocab](std::span<const CropSample> crops) {
    std::vector<std::vector<int>> out;
    for (const auto& c : crops) out.push_back(answer_sequence(c.gt, vocab).ids);
    return out;
  };
}

struct SampleRecord {
  std::string source_id;
  Polygon gt;                   // source coordinates
  std::optional<Polygon> pred;  // source coordinates
  Polygon crop_gt;
  std::optional<Polygon> crop_pred;
  BBox crop_box;
  double iou = 0.0;
  ValidityReport flags;
  std::string error;
  std::string tokens;
};

inline nlohmann::json sample_record_to_json(const SampleRecord& s) {
  nlohmann::json j{{"source_id", s.source_id},
                   {"gt", polygon_to_json(s.gt)["vertices"]},
                   {"pred", s.pred ? polygon_to_json(*s.pred)["vertices"] : nlohmann::json(nullptr)},
                   {"crop_gt", polygon_to_json(s.crop_gt)["vertices"]},
                   {"crop_pred", s.crop_pred ? polygon_to_json(*s.crop_pred)["vertices"] : nlohmann::json(nullptr)},
                   {"crop_box", bbox_to_json(s.crop_box)},
                   {"iou", s.iou},
                   {"flags", validity_to_json(s.flags)},
                   {"tokens", s.tokens}};
  if (!s.error.empty()) j["error"] = s.error;
  return j;
}

struct EvalOutput {
  EvalResult result;
  std::vector<SampleRecord> samples;
};

enum class EvalMode { kOracleBox };

// Crops each held-out instance at 1.3x its gt box, predicts, decodes, maps the
// prediction back to scene coordinates and scores it. Decode failures count
// as missed instances.
inline EvalOutput evaluate_model(const Predictor& predictor, std::span<const DatasetSample> test_set,
                                 const Vocab& vocab, EvalMode mode = EvalMode::kOracleBox, int batch_size = 32) {
  if (mode != EvalMode::kOracleBox) throw Error("unsupported-mode");
  EvalOutput out;
  std::vector<SceneEval> scenes;
  double iou_sum = 0.0;
  for (std::size_t begin = 0; begin < test_set.size(); begin += static_cast<std::size_t>(batch_size)) {
    const std::size_t end = std::min(test_set.size(), begin + static_cast<std::size_t>(batch_size));
    std::vector<CropSample> crops;
    for (std::size_t i = begin; i < end; ++i) {
      const auto& s = test_set[i];
      if (!s.scene) throw Error("missing-scene", s.crop.source_id + " has no source scene");
      CropSample c = crop_sample(s.scene->image, s.scene->gt, s.scene->bbox, nullptr);
      c.source_id = s.crop.source_id;
      crops.push_back(std::move(c));
    }
    const auto outputs = predictor(crops);
    for (std::size_t k = 0; k < crops.size(); ++k) {
      const auto& scene = *test_set[begin + k].scene;
      SampleRecord rec;
      rec.source_id = crops[k].source_id;
      rec.gt = scene.gt;
      rec.crop_gt = crops[k].gt;
      rec.crop_box = crops[k].crop_box;
      rec.tokens = vocab.render(outputs[k]);
      SceneEval se;
      se.gts.push_back(scene.gt);
      const DecodeResult dec = try_decode(outputs[k], vocab);
      if (dec.ok()) {
        rec.crop_pred = *dec.polygon;
        const Polygon mapped = map_polygon(*dec.polygon, CropTransform{crops[k].crop_box}, false);
        if (mapped.size() >= 3) {
          rec.pred = mapped;
          rec.flags = validity_checks(mapped);
          rec.iou = polygon_iou(mapped, scene.gt);
          se.preds.push_back({mapped, 1.0});
        } else {
          rec.error = "degenerate-after-transform";
        }
      } else {
        rec.error = dec.error;
      }
      if (rec.pred) {
        ++out.result.valid_decodes;
      } else {
        ++out.result.decode_failures;
        rec.flags.too_few_vertices = true;
      }
      iou_sum += rec.iou;
      scenes.push_back(std::move(se));
      out.samples.push_back(std::move(rec));
    }
  }
  const std::size_t valid = out.result.valid_decodes;
  const std::size_t failed = out.result.decode_failures;
  out.result = match_and_score(scenes, coco_thresholds());
  out.result.valid_decodes = valid;
  out.result.decode_failures = failed;
  out.result.mean_iou = test_set.empty() ? 0.0 : iou_sum / static_cast<double>(test_set.size());
  return out;
}

}  // namespace polytok
