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

#include <gtest/gtest.h>

#include <algorithm>
#include <random>

#include "polytok/evaluation.hpp"
#include "polytok/synthdata.hpp"

namespace polytok {
namespace {

Polygon rect(int x0, int y0, int x1, int y1) { return Polygon{{{x0, y0}, {x1, y0}, {x1, y1}, {x0, y1}}}; }

struct Box {
  int x0, y0, x1, y1;
  Polygon poly() const { return rect(x0, y0, x1, y1); }
};

double box_iou(const Box& a, const Box& b) {
  const double iw = std::max(0, std::min(a.x1, b.x1) - std::max(a.x0, b.x0));
  const double ih = std::max(0, std::min(a.y1, b.y1) - std::max(a.y0, b.y0));
  const double inter = iw * ih;
  const double ua = static_cast<double>(a.x1 - a.x0) * (a.y1 - a.y0) + static_cast<double>(b.x1 - b.x0) * (b.y1 - b.y0);
  return inter / (ua - inter);
}

struct OracleScene {
  std::vector<Box> gts;
  std::vector<Box> preds;
  std::vector<double> conf;
};

// Distinct confidences only. AP from its definition over recall levels:
// for each k/num_gt, the best precision reached at or beyond that recall.
std::pair<double, double> oracle_ap_recall(const std::vector<OracleScene>& scenes, double t) {
  struct Det {
    double conf;
    bool tp;
  };
  std::vector<Det> dets;
  std::size_t num_gt = 0;
  for (const auto& s : scenes) {
    num_gt += s.gts.size();
    std::vector<std::size_t> idx(s.preds.size());
    for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
    std::sort(idx.begin(), idx.end(), [&](auto a, auto b) { return s.conf[a] > s.conf[b]; });
    std::vector<bool> used(s.gts.size(), false);
    for (auto i : idx) {
      double best = -1.0;
      std::size_t which = 0;
      for (std::size_t g = 0; g < s.gts.size(); ++g) {
        const double v = box_iou(s.preds[i], s.gts[g]);
        if (!used[g] && v >= t && v > best) {
          best = v;
          which = g;
        }
      }
      if (best >= 0.0) used[which] = true;
      dets.push_back({s.conf[i], best >= 0.0});
    }
  }
  std::sort(dets.begin(), dets.end(), [](const Det& a, const Det& b) { return a.conf > b.conf; });
  std::vector<double> prec, rec;
  std::size_t tp = 0;
  for (std::size_t i = 0; i < dets.size(); ++i) {
    tp += dets[i].tp;
    prec.push_back(static_cast<double>(tp) / static_cast<double>(i + 1));
    rec.push_back(static_cast<double>(tp) / static_cast<double>(num_gt));
  }
  double ap = 0.0;
  for (std::size_t k = 1; k <= num_gt; ++k) {
    const double level = static_cast<double>(k) / static_cast<double>(num_gt);
    double best = 0.0;
    for (std::size_t i = 0; i < prec.size(); ++i) {
      if (rec[i] >= level - 1e-12) best = std::max(best, prec[i]);
    }
    ap += best / static_cast<double>(num_gt);
  }
  return {ap, static_cast<double>(tp) / static_cast<double>(num_gt)};
}

std::vector<SceneEval> to_scenes(const std::vector<OracleScene>& in) {
  std::vector<SceneEval> out;
  for (const auto& s : in) {
    SceneEval e;
    for (const auto& g : s.gts) e.gts.push_back(g.poly());
    for (std::size_t i = 0; i < s.preds.size(); ++i) e.preds.push_back({s.preds[i].poly(), s.conf[i]});
    out.push_back(std::move(e));
  }
  return out;
}

TEST(Validity, Examples) {
  EXPECT_TRUE(validity_checks(rect(0, 0, 4, 4)).ok());
  const auto bowtie = validity_checks(Polygon{{{0, 0}, {4, 4}, {4, 0}, {0, 4}}});
  EXPECT_TRUE(bowtie.self_intersection);
  const auto dup = validity_checks(Polygon{{{0, 0}, {4, 0}, {4, 0}, {4, 4}, {0, 4}}});
  EXPECT_TRUE(dup.duplicate_vertices);
  const auto two = validity_checks(Polygon{{{0, 0}, {4, 0}}});
  EXPECT_TRUE(two.too_few_vertices);
  EXPECT_TRUE(two.zero_area);
  const auto line = validity_checks(Polygon{{{0, 0}, {2, 0}, {4, 0}}});
  EXPECT_TRUE(line.zero_area);
  EXPECT_FALSE(line.too_few_vertices);

  const std::vector<ValidityReport> reps{bowtie, validity_checks(rect(0, 0, 2, 2)), two, line};
  const ValidityRates r = aggregate_validity(reps);
  EXPECT_EQ(r.count, 4u);
  // The bowtie's lobes cancel in the shoelace sum; the collinear ring overlaps itself.
  EXPECT_DOUBLE_EQ(r.self_intersection, 0.5);
  EXPECT_DOUBLE_EQ(r.duplicate_vertices, 0.0);
  EXPECT_DOUBLE_EQ(r.too_few_vertices, 0.25);
  EXPECT_DOUBLE_EQ(r.zero_area, 0.75);
}

TEST(Matching, ThresholdsAreTheCocoGrid) {
  const auto t = coco_thresholds();
  ASSERT_EQ(t.size(), 10u);
  EXPECT_DOUBLE_EQ(t.front(), 0.5);
  EXPECT_DOUBLE_EQ(t.back(), 0.95);
}

TEST(Matching, SinglePairAtIouPointNine) {
  const EvalResult r = match_and_score({{rect(0, 0, 10, 9), 1.0}}, {rect(0, 0, 10, 10)});
  EXPECT_DOUBLE_EQ(r.ap50, 1.0);
  EXPECT_DOUBLE_EQ(r.ap75, 1.0);
  EXPECT_NEAR(r.map, 0.9, 1e-12);
  EXPECT_NEAR(r.ar, 0.9, 1e-12);
  EXPECT_EQ(r.ap.back(), 0.0);
}

TEST(Matching, NoGroundTruthThrows) {
  try {
    match_and_score({{rect(0, 0, 3, 3), 1.0}}, {});
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), "no-ground-truth");
  }
}

TEST(Matching, FalsePositivesLowerPrecisionOnly) {
  const EvalResult r = match_and_score({{rect(0, 0, 10, 10), 0.9}, {rect(50, 50, 60, 60), 0.8}}, {rect(0, 0, 10, 10)});
  EXPECT_DOUBLE_EQ(r.map, 1.0);
  EXPECT_DOUBLE_EQ(r.precision[0], 0.5);
  // A confident false positive ahead of the hit halves AP.
  const EvalResult s = match_and_score({{rect(0, 0, 10, 10), 0.5}, {rect(50, 50, 60, 60), 0.8}}, {rect(0, 0, 10, 10)});
  EXPECT_DOUBLE_EQ(s.map, 0.5);
}

TEST(Matching, AgreesWithIndependentOracle) {
  std::mt19937_64 rng(2024);
  std::uniform_int_distribution<int> pos(0, 40), size(4, 20), jitter(-3, 3), count(1, 4);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  for (int trial = 0; trial < 60; ++trial) {
    std::vector<OracleScene> scenes(static_cast<std::size_t>(count(rng)));
    for (auto& s : scenes) {
      const int ng = count(rng);
      for (int g = 0; g < ng; ++g) {
        const int x = pos(rng), y = pos(rng);
        s.gts.push_back({x, y, x + size(rng), y + size(rng)});
      }
      const int np = count(rng);
      for (int p = 0; p < np; ++p) {
        const Box& g = s.gts[static_cast<std::size_t>(p) % s.gts.size()];
        Box b{g.x0 + jitter(rng), g.y0 + jitter(rng), g.x1 + jitter(rng), g.y1 + jitter(rng)};
        if (b.x1 <= b.x0) b.x1 = b.x0 + 1;
        if (b.y1 <= b.y0) b.y1 = b.y0 + 1;
        s.preds.push_back(b);
        s.conf.push_back(u(rng));
      }
    }
    const auto ours = match_and_score(to_scenes(scenes), coco_thresholds());
    const auto th = coco_thresholds();
    for (std::size_t i = 0; i < th.size(); ++i) {
      const auto [ap, recall] = oracle_ap_recall(scenes, th[i]);
      ASSERT_NEAR(ours.ap[i], ap, 1e-12) << "trial " << trial << " t " << th[i];
      ASSERT_NEAR(ours.recall[i], recall, 1e-12);
    }
  }
}

// Exhaustive search over every injective pred -> gt assignment. Among the
// assignments with IoU >= t on every link, keeps the one whose hit pattern in
// confidence order is lexicographically largest.
std::vector<bool> enumerate_best(const OracleScene& s, const std::vector<std::size_t>& order, double t) {
  std::vector<bool> best(order.size(), false), cur(order.size(), false);
  std::vector<bool> used(s.gts.size(), false);
  auto rec = [&](auto&& self, std::size_t k) -> void {
    if (k == order.size()) {
      if (std::lexicographical_compare(best.begin(), best.end(), cur.begin(), cur.end())) best = cur;
      return;
    }
    for (std::size_t g = 0; g < s.gts.size(); ++g) {
      if (used[g] || box_iou(s.preds[order[k]], s.gts[g]) < t) continue;
      used[g] = true;
      cur[k] = true;
      self(self, k + 1);
      used[g] = false;
      cur[k] = false;
    }
    self(self, k + 1);
  };
  rec(rec, 0);
  return best;
}

TEST(Matching, SmallScenesAgreeWithExhaustiveEnumeration) {
  std::mt19937_64 rng(99);
  std::uniform_int_distribution<int> jitter(-4, 4), count(1, 5), size(8, 24);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  for (int trial = 0; trial < 200; ++trial) {
    OracleScene s;
    const int ng = count(rng);
    for (int g = 0; g < ng; ++g) {
      const int x = 40 * g;  // disjoint columns
      s.gts.push_back({x, 0, x + size(rng), size(rng)});
    }
    const int np = count(rng);
    for (int p = 0; p < np; ++p) {
      if (u(rng) < 0.2) {
        s.preds.push_back({300, 300, 310, 310});
      } else {
        const Box& g = s.gts[std::uniform_int_distribution<std::size_t>(0, s.gts.size() - 1)(rng)];
        Box b{g.x0 + jitter(rng), g.y0 + jitter(rng), g.x1 + jitter(rng), g.y1 + jitter(rng)};
        if (b.x1 <= b.x0 + 1) b.x1 = b.x0 + 2;
        if (b.y1 <= b.y0 + 1) b.y1 = b.y0 + 2;
        s.preds.push_back(b);
      }
      s.conf.push_back(u(rng));
    }
    std::vector<std::size_t> order(s.preds.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    std::sort(order.begin(), order.end(), [&](auto a, auto b) { return s.conf[a] > s.conf[b]; });

    const auto ours = match_and_score(to_scenes({s}), coco_thresholds());
    const auto th = coco_thresholds();
    for (std::size_t ti = 0; ti < th.size(); ++ti) {
      const std::vector<bool> hits = enumerate_best(s, order, th[ti]);
      double ap = 0.0, max_prec_after = 0.0;
      std::size_t tp = 0;
      std::vector<double> prec(hits.size());
      for (std::size_t i = 0; i < hits.size(); ++i) {
        tp += hits[i];
        prec[i] = static_cast<double>(tp) / static_cast<double>(i + 1);
      }
      // Each hit adds 1/num_gt of recall at the best precision from there on.
      for (std::size_t i = hits.size(); i-- > 0;) {
        max_prec_after = std::max(max_prec_after, prec[i]);
        if (hits[i]) ap += max_prec_after / static_cast<double>(s.gts.size());
      }
      ASSERT_NEAR(ours.ap[ti], ap, 1e-12) << "trial " << trial;
      ASSERT_NEAR(ours.recall[ti], static_cast<double>(tp) / static_cast<double>(s.gts.size()), 1e-12);
    }
    ASSERT_LE(ours.map, ours.ap50);
  }
}

TEST(Matching, SelfScoringIsPerfect) {
  std::vector<Detection> preds;
  std::vector<Polygon> gts;
  for (int i = 0; i < 5; ++i) {
    gts.push_back(rect(20 * i, 0, 20 * i + 10 + i, 12));
    preds.push_back({gts.back(), 0.1 * i});
  }
  const EvalResult r = match_and_score(preds, gts);
  EXPECT_DOUBLE_EQ(r.map, 1.0);
  EXPECT_DOUBLE_EQ(r.ar, 1.0);
}

TEST(Matching, InvariantToPredictionOrderAndTies) {
  std::vector<Detection> preds{{rect(0, 0, 10, 10), 0.7},
                               {rect(1, 0, 10, 10), 0.7},
                               {rect(30, 30, 40, 40), 0.7},
                               {rect(30, 30, 39, 41), 0.4},
                               {rect(80, 80, 90, 90), 0.9}};
  const std::vector<Polygon> gts{rect(0, 0, 10, 10), rect(30, 30, 40, 40), rect(60, 0, 70, 10)};
  const EvalResult base = match_and_score(preds, gts);
  std::mt19937_64 rng(5);
  for (int i = 0; i < 20; ++i) {
    std::shuffle(preds.begin(), preds.end(), rng);
    const EvalResult r = match_and_score(preds, gts);
    for (std::size_t k = 0; k < r.ap.size(); ++k) ASSERT_DOUBLE_EQ(r.ap[k], base.ap[k]);
    ASSERT_DOUBLE_EQ(r.ar, base.ar);
  }
}

TEST(Matching, TieBlockIsOnePrecisionPoint) {
  // Hit and miss share a confidence: one block with precision 1/2 at recall 1.
  const EvalResult r = match_and_score({{rect(50, 50, 60, 60), 0.5}, {rect(0, 0, 10, 10), 0.5}}, {rect(0, 0, 10, 10)});
  EXPECT_DOUBLE_EQ(r.map, 0.5);
}

TEST(Report, JsonAndTable) {
  const EvalResult r = match_and_score({{rect(0, 0, 10, 9), 1.0}}, {rect(0, 0, 10, 10)});
  const auto j = eval_result_to_json(r);
  EXPECT_EQ(j.at("schema_version"), kEvalSchemaVersion);
  EXPECT_EQ(j.at("ap").size(), 10u);
  EXPECT_EQ(j.at("counts").at("gt"), 1);
  const std::string table = format_metrics_table(r);
  EXPECT_NE(table.find("mAP"), std::string::npos);
  EXPECT_NE(table.find(" 90.0"), std::string::npos);
  EXPECT_NE(table.find("100.0"), std::string::npos);
}

TEST(EvaluateModel, EchoScoresNearPerfect) {
  const Vocab vocab;
  const auto test = generate_split(GenParams{}, 3, Split::kTest, 30);
  const EvalOutput out = evaluate_model(echo_predictor(vocab), test, vocab);
  EXPECT_EQ(out.result.decode_failures, 0u);
  EXPECT_EQ(out.result.valid_decodes, 30u);
  EXPECT_DOUBLE_EQ(out.result.ap50, 1.0);
  EXPECT_DOUBLE_EQ(out.result.ap75, 1.0);
  // Only crop quantization separates the echo from the source polygon.
  EXPECT_GT(out.result.mean_iou, 0.9);
  EXPECT_GT(out.result.map, 0.9);
  ASSERT_EQ(out.samples.size(), 30u);
  for (const auto& s : out.samples) {
    ASSERT_TRUE(s.pred.has_value());
    EXPECT_TRUE(s.flags.ok());
    EXPECT_TRUE(s.error.empty());
    EXPECT_EQ(sample_record_to_json(s).at("source_id"), s.source_id);
  }
}

TEST(EvaluateModel, DecodeFailuresAreMisses) {
  const Vocab vocab;
  const auto test = generate_split(GenParams{}, 4, Split::kTest, 6);
  int calls = 0;
  const Predictor broken = [&](std::span<const CropSample> crops) {
    std::vector<std::vector<int>> out;
    for (std::size_t i = 0; i < crops.size(); ++i) {
      // Every other prediction is malformed.
      out.push_back(calls++ % 2 ? std::vector<int>{vocab.x_token(3)} : answer_sequence(crops[i].gt, vocab).ids);
    }
    return out;
  };
  const EvalOutput out = evaluate_model(broken, test, vocab, EvalMode::kOracleBox, 4);
  EXPECT_EQ(out.result.decode_failures, 3u);
  EXPECT_EQ(out.result.num_gt, 6u);
  EXPECT_NEAR(out.result.recall[0], 0.5, 1e-12);
  double sum = 0.0;
  for (const auto& s : out.samples) {
    if (!s.pred) {
      EXPECT_EQ(s.iou, 0.0);
      EXPECT_FALSE(s.error.empty());
    }
    sum += s.iou;
  }
  EXPECT_NEAR(out.result.mean_iou, sum / 6.0, 1e-12);
}

TEST(EvaluateModel, RequiresSourceScene) {
  const Vocab vocab;
  auto test = generate_split(GenParams{}, 5, Split::kTest, 2);
  test[1].scene.reset();
  EXPECT_THROW(evaluate_model(echo_predictor(vocab), test, vocab), Error);
}

}  // namespace
}  // namespace polytok
