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

#include <cmath>
#include <filesystem>
#include <fstream>

#include "oracles.hpp"
#include "polytok/training.hpp"

namespace polytok {
namespace {

std::vector<CropSample> micro_data(int n, std::uint64_t seed) {
  GenParams g;
  std::vector<CropSample> out;
  for (const auto& s : generate_split(g, seed, Split::kTrain, n)) out.push_back(s.crop);
  return out;
}

ModelParams<float> micro_model(std::uint64_t seed) {
  const Vocab vocab;
  Rng rng(seed);
  ModelConfig c = oracle::micro_config(vocab.size());
  c.max_seq_len = 160;
  return init_params<float>(c, rng);
}

StageConfig quick(Stage s, int steps, int batch = 2) {
  StageConfig c = default_stage_config(s);
  c.batch_size = batch;
  c.epochs = 1000;
  c.max_steps = steps;
  c.lr = s == Stage::kDpo ? 1e-3 : 1e-3;
  return c;
}

TEST(Schedule, WarmupThenCosine) {
  const LrSchedule s(2e-4, 1000, 0.03);
  EXPECT_EQ(s.warmup, 30);
  EXPECT_EQ(s.at(0), 0.0);
  EXPECT_DOUBLE_EQ(s.at(15), 1e-4);
  EXPECT_DOUBLE_EQ(s.at(30), 2e-4);
  for (std::int64_t t = 31; t < 1000; ++t) {
    const double progress = static_cast<double>(t - 30) / 970.0;
    ASSERT_NEAR(s.at(t), 1e-4 * (1.0 + std::cos(M_PI * progress)), 1e-18);
    ASSERT_LT(s.at(t), s.at(t - 1));
  }
  EXPECT_EQ(s.at(1000), 0.0);
  const LrSchedule small(1.0, 10, 0.03);
  EXPECT_EQ(small.warmup, 1);  // ceil(0.3)
  EXPECT_EQ(small.at(0), 0.0);
  EXPECT_EQ(small.at(1), 1.0);
}

TEST(AdamW, MatchesScalarReference) {
  auto p = micro_model(1);
  oracle::randomize(p, 2);
  const auto start = p;
  AdamWConfig cfg;
  cfg.weight_decay = 0.1;
  AdamW<float> opt(p, cfg);
  std::vector<ModelParams<float>> grads;
  for (int s = 0; s < 4; ++s) {
    auto g = zeros_like(p);
    oracle::randomize(g, 10 + static_cast<std::uint64_t>(s), 1.0);
    grads.push_back(g);
  }
  const double lrs[4] = {1e-2, 5e-3, 2e-3, 1e-3};
  Trainable tr;
  tr.encoder = false;
  for (int s = 0; s < 4; ++s) opt.step(p, grads[static_cast<std::size_t>(s)], lrs[s], tr);

  const auto got = tensors(p);
  const auto init = tensors(start);
  for (std::size_t k = 0; k < got.size(); ++k) {
    const bool frozen = got[k].group == ParamGroup::kEncoder;
    const bool decay = init[k].tensor->rows() > 1;
    for (Eigen::Index i = 0; i < std::min<Eigen::Index>(got[k].tensor->size(), 20); ++i) {
      double w = init[k].tensor->data()[i], m = 0, v = 0;
      if (!frozen) {
        for (int s = 0; s < 4; ++s) {
          const double g = tensors(grads[static_cast<std::size_t>(s)])[k].tensor->data()[i];
          m = 0.9 * m + 0.1 * g;
          v = 0.999 * v + 0.001 * g * g;
          if (decay) w *= 1.0 - lrs[s] * 0.1;
          const double mh = m / (1.0 - std::pow(0.9, s + 1));
          const double vh = v / (1.0 - std::pow(0.999, s + 1));
          w -= lrs[s] * mh / (std::sqrt(vh) + 1e-8);
        }
      }
      ASSERT_NEAR(got[k].tensor->data()[i], w, 1e-5) << got[k].name;
      if (frozen) {
        ASSERT_EQ(got[k].tensor->data()[i], init[k].tensor->data()[i]);
      }
    }
  }
}

TEST(ClipGradNorm, RescalesTrainableOnly) {
  auto g = micro_model(3);
  oracle::randomize(g, 4, 1.0);
  Trainable tr;
  tr.encoder = false;
  const auto enc_before = group_checksum(g, ParamGroup::kEncoder);
  const double norm = clip_grad_norm(g, tr, 1.0);
  EXPECT_GT(norm, 1.0);
  double sq = 0;
  for (const auto& t : tensors(g)) {
    if (tr.has(t.group)) sq += t.tensor->squaredNorm();
  }
  EXPECT_NEAR(std::sqrt(sq), 1.0, 1e-4);
  EXPECT_EQ(group_checksum(g, ParamGroup::kEncoder), enc_before);
}

TEST(DpoLoss, ClosedForms) {
  const std::vector<double> zero{-12.0, -30.0};
  EXPECT_NEAR(dpo_loss(zero, zero, zero, zero, 0.5), std::log(2.0), 1e-12);
  const std::vector<double> pc{2.0}, pr{0.0}, rc{0.0}, rr{0.0};
  EXPECT_NEAR(dpo_loss(pc, pr, rc, rr, 0.5), -std::log(1.0 / (1.0 + std::exp(-1.0))), 1e-12);
  EXPECT_NEAR(dpo_loss(pc, pr, rc, rr, 0.5), 0.313262, 1e-6);
}

TEST(DpoLoss, Monotonicity) {
  const std::vector<double> r{0.0};
  double prev_c = 1e9, prev_r = -1e9;
  for (double x = -5.0; x <= 5.0; x += 0.25) {
    const std::vector<double> v{x};
    const double lc = dpo_loss(v, r, r, r, 0.5);
    const double lr = dpo_loss(r, v, r, r, 0.5);
    EXPECT_LT(lc, prev_c);
    EXPECT_GT(lr, prev_r);
    prev_c = lc;
    prev_r = lr;
  }
  // Large margins stay finite.
  const std::vector<double> big{1e4};
  EXPECT_TRUE(std::isfinite(dpo_loss(r, big, r, r, 0.5)));
  EXPECT_TRUE(std::isfinite(dpo_loss(big, r, r, r, 0.5)));
}

TEST(DpoLoss, RejectsNonFinite) {
  const std::vector<double> ok{0.0}, bad{std::nan("")};
  try {
    dpo_loss(ok, bad, ok, ok, 0.5);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), "non-finite-input");
  }
  const std::vector<double> inf{-INFINITY};
  EXPECT_THROW(dpo_loss(inf, ok, ok, ok, 0.5), Error);
  EXPECT_THROW(dpo_loss({}, {}, {}, {}, 0.5), Error);
}

TEST(Pretrain, FreezesEncoderOver100Steps) {
  const Vocab vocab;
  auto p = micro_model(5);
  oracle::randomize(p, 6, 0.05);
  const auto data = micro_data(8, 1);
  const auto before = p;
  std::vector<StepRecord> steps;
  run_pretrain(quick(Stage::kPretrain, 100), p, data, vocab, [&](const StepRecord& r) { steps.push_back(r); });
  ASSERT_EQ(steps.size(), 100u);
  EXPECT_EQ(steps[0].lr, 0.0);
  EXPECT_EQ(group_checksum(p, ParamGroup::kEncoder), group_checksum(before, ParamGroup::kEncoder));
  for (auto g : {ParamGroup::kPosEmbed, ParamGroup::kProjector, ParamGroup::kLm}) {
    EXPECT_NE(group_checksum(p, g), group_checksum(before, g)) << group_name(g);
  }
}

TEST(Sft, UpdatesEveryGroup) {
  const Vocab vocab;
  auto p = micro_model(7);
  oracle::randomize(p, 8, 0.05);
  const auto before = p;
  run_sft(quick(Stage::kSft, 100), p, micro_data(8, 2), vocab);
  for (auto g : {ParamGroup::kEncoder, ParamGroup::kPosEmbed, ParamGroup::kProjector, ParamGroup::kLm}) {
    EXPECT_NE(group_checksum(p, g), group_checksum(before, g)) << group_name(g);
  }
}

TEST(Sft, BatchLossIsMaskedNll) {
  const Vocab vocab;
  auto p = micro_model(9);
  oracle::randomize(p, 10, 0.1);
  const auto data = micro_data(4, 3);
  std::vector<Matrix<float>> logits;
  std::vector<std::vector<int>> targets;
  std::vector<std::vector<bool>> masks;
  for (const auto& s : data) {
    const TokenSequence seq = format_sft(s, vocab);
    const Matrix<float> v = project_one<float>(p, encode_patches<float>(p, patchify<float>(s.image, p.config), nullptr), nullptr);
    logits.push_back(lm_forward<float>(p, v, seq.ids, nullptr));
    const ShiftedTargets st = shift_targets(seq.ids, seq.loss_mask);
    targets.push_back(st.targets);
    masks.push_back(st.mask);
  }
  const double expected = nll_loss<float>(logits, targets, masks);
  StageConfig c = quick(Stage::kSft, 1, 4);
  const TrainLog log = run_sft(c, p, data, vocab);
  EXPECT_NEAR(log.steps.at(0).loss, expected, 1e-5);

  // Labels at unmasked positions never enter the objective.
  auto q = micro_model(9);
  oracle::randomize(q, 10, 0.1);
  auto g1 = zeros_like(q);
  auto g2 = zeros_like(q);
  const TokenSequence seq = format_sft(data[0], vocab);
  ShiftedTargets st = shift_targets(seq.ids, seq.loss_mask);
  std::vector<float> w(st.mask.size());
  for (std::size_t i = 0; i < w.size(); ++i) w[i] = st.mask[i] ? 0.1f : 0.0f;
  const Matrix<float> patches = patchify<float>(data[0].image, q.config);
  const float l1 = weighted_nll_and_grad<float>(q, patches, seq.ids, st.targets, w, g1, Trainable{});
  for (std::size_t i = 0; i < st.targets.size(); ++i) {
    if (!st.mask[i]) st.targets[i] = 7;
  }
  const float l2 = weighted_nll_and_grad<float>(q, patches, seq.ids, st.targets, w, g2, Trainable{});
  EXPECT_EQ(l1, l2);
  EXPECT_EQ(group_checksum(g1, ParamGroup::kLm), group_checksum(g2, ParamGroup::kLm));
}

TEST(Training, NonFiniteLossAborts) {
  const Vocab vocab;
  auto p = micro_model(11);
  p.head.b(0, 5) = std::nanf("");
  try {
    run_sft(quick(Stage::kSft, 3), p, micro_data(4, 4), vocab);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), "non-finite-loss");
    EXPECT_NE(std::string(e.what()).find("step 0"), std::string::npos);
  }
}

TEST(Training, SeededRunsAreIdentical) {
  const Vocab vocab;
  const auto data = micro_data(6, 5);
  auto run = [&] {
    auto p = micro_model(12);
    StageConfig c = quick(Stage::kPretrain, 12);
    c.seed = 77;
    return std::make_pair(run_pretrain(c, p, data, vocab), p);
  };
  const auto [la, pa] = run();
  const auto [lb, pb] = run();
  ASSERT_EQ(la.steps.size(), lb.steps.size());
  for (std::size_t i = 0; i < la.steps.size(); ++i) EXPECT_EQ(la.steps[i].loss, lb.steps[i].loss);
  for (auto g : {ParamGroup::kPosEmbed, ParamGroup::kProjector, ParamGroup::kLm}) {
    EXPECT_EQ(group_checksum(pa, g), group_checksum(pb, g));
  }
}

TEST(Training, LogIsJsonLines) {
  const Vocab vocab;
  auto p = micro_model(13);
  StageConfig c = quick(Stage::kSft, 3);
  c.epochs = 1;
  c.max_steps = 0;
  const auto data = micro_data(4, 6);
  const TrainLog log = run_sft(c, p, data, vocab, {}, [&](int, const ModelParams<float>& m) {
    return nlohmann::json{{"val_token_accuracy", token_accuracy(m, data, vocab)}};
  });
  const auto path = std::filesystem::temp_directory_path() / "polytok_log.jsonl";
  log.write_jsonl(path);
  std::ifstream in(path);
  std::string line;
  int steps = 0, epochs = 0;
  while (std::getline(in, line)) {
    const auto j = nlohmann::json::parse(line);
    steps += j.at("kind") == "step";
    epochs += j.at("kind") == "epoch";
    if (j.at("kind") == "step") {
      for (const char* k : {"step", "stage", "loss", "lr", "grad_norm", "wall_ms"}) EXPECT_TRUE(j.contains(k)) << k;
    }
  }
  EXPECT_EQ(steps, 2);
  EXPECT_EQ(epochs, 1);
}

std::vector<PreferenceExample> mined_pairs(const Vocab& vocab, const std::vector<CropSample>& data) {
  MiningConfig mc;
  mc.complex_vertices = 5;  // make most synthetic samples eligible
  return mine_preferences(echo_predictor(vocab), data, vocab, mc, 3).pairs;
}

TEST(Dpo, StepZeroIsLn2AndReferenceFrozen) {
  const Vocab vocab;
  auto ref = micro_model(14);
  oracle::randomize(ref, 15, 0.05);
  const auto data = micro_data(12, 7);
  const auto pairs = mined_pairs(vocab, data);
  ASSERT_GE(pairs.size(), 4u);
  std::vector<std::uint64_t> sums;
  for (auto g : {ParamGroup::kEncoder, ParamGroup::kPosEmbed, ParamGroup::kProjector, ParamGroup::kLm}) {
    sums.push_back(group_checksum(ref, g));
  }
  auto check_ref = [&] {
    std::size_t i = 0;
    for (auto g : {ParamGroup::kEncoder, ParamGroup::kPosEmbed, ParamGroup::kProjector, ParamGroup::kLm}) {
      ASSERT_EQ(group_checksum(ref, g), sums[i++]);
    }
  };
  StageConfig c = quick(Stage::kDpo, 6, 4);
  std::vector<double> losses;
  const DpoRun run = run_dpo(c, ref, pairs, [&](const StepRecord& r) {
    losses.push_back(r.loss);
    check_ref();
  });
  ASSERT_EQ(losses.size(), 6u);
  EXPECT_NEAR(losses[0], std::log(2.0), 1e-5);
  check_ref();
  EXPECT_NE(group_checksum(run.policy, ParamGroup::kLm), sums[3]);
  EXPECT_NE(group_checksum(run.policy, ParamGroup::kEncoder), sums[0]);
}

TEST(Mining, EchoModelYieldsOnlyCorruptionPairs) {
  const Vocab vocab;
  const auto data = micro_data(40, 8);
  MiningConfig mc;
  const auto res = mine_preferences(echo_predictor(vocab), data, vocab, mc, 1);
  EXPECT_EQ(res.stats.model_pairs, 0u);
  EXPECT_EQ(res.stats.decode_failures, 0u);
  std::size_t eligible = 0;
  for (const auto& s : data) {
    eligible += s.gt.size() > 15 || std::abs(shoelace_signed_area(s.gt)) > 0.25 * 128 * 128;
  }
  EXPECT_GT(eligible, 0u);
  EXPECT_EQ(res.stats.corruption_pairs + res.stats.dropped_near_identical + res.stats.invalid_predictions, eligible);
  for (const auto& e : res.pairs) {
    EXPECT_EQ(e.origin, "corruption");
    EXPECT_EQ(e.pair.prompt.ids, sft_prompt(vocab).ids);
    const Polygon chosen = decode_tokens(e.pair.chosen.ids, vocab);
    const Polygon rejected = decode_tokens(e.pair.rejected.ids, vocab);
    EXPECT_LT(polygon_iou(chosen, rejected), 0.999);
    EXPECT_TRUE(is_canonical(rejected));
  }
}

TEST(Mining, PoorPredictionsBecomeModelPairs) {
  const Vocab vocab;
  const auto data = micro_data(20, 9);
  // Predicts a fixed small square regardless of input.
  const Predictor fixed = [&](std::span<const CropSample> crops) {
    std::vector<std::vector<int>> out;
    for (std::size_t i = 0; i < crops.size(); ++i) {
      out.push_back(answer_sequence(Polygon{{{0, 0}, {6, 0}, {6, 6}, {0, 6}}}, vocab).ids);
    }
    return out;
  };
  MiningConfig mc;
  mc.complex_vertices = 1000;
  mc.large_area_frac = 2.0;  // disable branch (b)
  const auto res = mine_preferences(fixed, data, vocab, mc, 1);
  EXPECT_EQ(res.stats.model_pairs, data.size());
  EXPECT_EQ(res.stats.corruption_pairs, 0u);
  for (const auto& e : res.pairs) {
    EXPECT_LT(e.rejected_iou, 0.8);
    EXPECT_EQ(e.origin, "model");
  }
}

TEST(Mining, DecodeFailuresAreCountedNotFatal) {
  const Vocab vocab;
  const auto data = micro_data(10, 10);
  const Predictor garbage = [&](std::span<const CropSample> crops) {
    return std::vector<std::vector<int>>(crops.size(), std::vector<int>{vocab.x_token(1), vocab.x_token(2)});
  };
  MiningConfig mc;
  mc.complex_vertices = 1000;
  mc.large_area_frac = 2.0;
  const auto res = mine_preferences(garbage, data, vocab, mc, 1);
  EXPECT_EQ(res.stats.decode_failures, data.size());
  EXPECT_TRUE(res.pairs.empty());
}

}  // namespace
}  // namespace polytok
