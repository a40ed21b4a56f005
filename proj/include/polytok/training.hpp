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
#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <functional>
#include <numeric>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "polytok/codec.hpp"
#include "polytok/error.hpp"
#include "polytok/evaluation.hpp"
#include "polytok/geometry.hpp"
#include "polytok/model.hpp"
#include "polytok/optim.hpp"
#include "polytok/synthdata.hpp"

namespace polytok {

enum class Stage { kPretrain, kSft, kDpo };

inline const char* stage_name(Stage s) {
  switch (s) {
    case Stage::kPretrain: return "pretrain";
    case Stage::kSft: return "sft";
    case Stage::kDpo: return "dpo";
  }
  return "?";
}

inline Stage stage_from_name(const std::string& s) {
  if (s == "pretrain") return Stage::kPretrain;
  if (s == "sft") return Stage::kSft;
  if (s == "dpo") return Stage::kDpo;
  throw Error("bad-stage", s);
}

struct StageConfig {
  Stage stage = Stage::kPretrain;
  double lr = 2e-4;
  int batch_size = 32;
  double warmup_ratio = 0.03;
  int epochs = 24;
  double weight_decay = 0.01;
  double grad_clip = 1.0;
  double beta = 0.5;  // dpo only
  std::int64_t max_steps = 0;  // 0: no cap
  std::uint64_t seed = 0;
  Trainable trainable;
};

inline StageConfig default_stage_config(Stage s) {
  StageConfig c;
  c.stage = s;
  switch (s) {
    case Stage::kPretrain:
      c.trainable.encoder = false;
      break;
    case Stage::kSft:
      c.lr = 4e-5;
      c.epochs = 4;
      break;
    case Stage::kDpo:
      c.lr = 5e-7;
      c.batch_size = 8;
      c.epochs = 1;
      break;
  }
  return c;
}

inline nlohmann::json trainable_to_json(const Trainable& t) {
  return {{"encoder", t.encoder}, {"pos_embed", t.pos_embed}, {"projector", t.projector}, {"lm", t.lm}};
}

inline nlohmann::json stage_config_to_json(const StageConfig& c) {
  return {{"stage", stage_name(c.stage)}, {"lr", c.lr},
          {"batch_size", c.batch_size},   {"warmup_ratio", c.warmup_ratio},
          {"epochs", c.epochs},           {"weight_decay", c.weight_decay},
          {"grad_clip", c.grad_clip},     {"beta", c.beta},
          {"max_steps", c.max_steps},     {"seed", c.seed},
          {"trainable", trainable_to_json(c.trainable)}};
}

// ---------------------------------------------------------------------------
// Logging

struct StepRecord {
  std::int64_t step = 0;
  int epoch = 0;
  double loss = 0.0;
  double lr = 0.0;
  double grad_norm = 0.0;
  double wall_ms = 0.0;
};

struct TrainLog {
  Stage stage = Stage::kPretrain;
  std::vector<StepRecord> steps;
  std::vector<nlohmann::json> epochs;  // per-epoch validation metrics

  nlohmann::json step_json(const StepRecord& r) const {
    return {{"kind", "step"}, {"stage", stage_name(stage)}, {"step", r.step}, {"epoch", r.epoch},
            {"loss", r.loss}, {"lr", r.lr}, {"grad_norm", r.grad_norm}, {"wall_ms", r.wall_ms}};
  }

  void write_jsonl(const std::filesystem::path& path) const {
    std::ofstream out(path);
    if (!out) throw Error("io", "cannot open " + path.string());
    for (const auto& r : steps) out << step_json(r).dump() << '\n';
    for (const auto& e : epochs) out << e.dump() << '\n';
  }
};

using StepCallback = std::function<void(const StepRecord&)>;
// Called after each epoch with the current parameters; returns metrics to log.
using EpochCallback = std::function<nlohmann::json(int epoch, const ModelParams<float>&)>;

namespace detail {

inline std::int64_t steps_per_epoch(std::size_t n, int batch) {
  return static_cast<std::int64_t>((n + static_cast<std::size_t>(batch) - 1) / static_cast<std::size_t>(batch));
}

inline std::int64_t total_steps(const StageConfig& c, std::size_t n) {
  std::int64_t total = steps_per_epoch(n, c.batch_size) * c.epochs;
  if (c.max_steps > 0) total = std::min(total, c.max_steps);
  return total;
}

inline void zero_trainable(ModelParams<float>& g, const Trainable& tr) {
  for (auto& t : tensors(g)) {
    if (tr.has(t.group)) t.tensor->setZero();
  }
}

inline void check_finite(double loss, std::int64_t step, const TrainLog& log) {
  if (std::isfinite(loss)) return;
  std::string last = log.steps.empty() ? "none" : log.step_json(log.steps.back()).dump();
  throw Error("non-finite-loss", "step " + std::to_string(step) + " loss " + std::to_string(loss) +
                                     "; last good record " + last);
}

inline double elapsed_ms(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
}

}  // namespace detail

// Teacher-forced argmax accuracy over coordinate and end tokens, in the
// instruction format or the bare pretraining format (canonical start).
inline double token_accuracy(const ModelParams<float>& p, std::span<const CropSample> samples, const Vocab& vocab,
                             Stage format = Stage::kSft) {
  std::size_t hit = 0;
  std::size_t total = 0;
  for (const auto& s : samples) {
    const TokenSequence seq = format == Stage::kPretrain ? format_pretrain(s, vocab, 0) : format_sft(s, vocab);
    const Matrix<float> patches = patchify<float>(s.image, p.config);
    const Matrix<float> vision = project_one<float>(p, encode_patches<float>(p, patches, nullptr), nullptr);
    const Matrix<float> logits = lm_forward<float>(p, vision, seq.ids, nullptr);
    for (std::size_t t = 0; t + 1 < seq.ids.size(); ++t) {
      if (!seq.loss_mask[t + 1]) continue;
      Eigen::Index best = 0;
      logits.row(static_cast<Eigen::Index>(t)).maxCoeff(&best);
      hit += static_cast<int>(best) == seq.ids[t + 1];
      ++total;
    }
  }
  return total ? static_cast<double>(hit) / static_cast<double>(total) : 0.0;
}

// Shared loop for the two maximum-likelihood stages. Pretraining draws a
// fresh random start vertex per sample per epoch; instruction tuning uses the
// canonical ring after the fixed prompt.
inline TrainLog run_supervised(const StageConfig& cfg, ModelParams<float>& params, std::span<const CropSample> data,
                               const Vocab& vocab, const StepCallback& on_step = {},
                               const EpochCallback& on_epoch = {}) {
  if (cfg.stage == Stage::kDpo) throw Error("bad-stage", "use run_dpo for preference training");
  if (data.empty()) throw Error("empty-dataset", stage_name(cfg.stage));
  if (cfg.batch_size < 1 || cfg.epochs < 1) throw Error("bad-config", "batch_size and epochs must be >= 1");
  TrainLog log;
  log.stage = cfg.stage;
  const std::int64_t total = detail::total_steps(cfg, data.size());
  const LrSchedule schedule(cfg.lr, total, cfg.warmup_ratio);
  AdamW<float> opt(params, {0.9, 0.999, 1e-8, cfg.weight_decay});
  ModelParams<float> grads = zeros_like(params);
  Rng rng(splitmix64(cfg.seed ^ (static_cast<std::uint64_t>(cfg.stage) + 1)));

  std::vector<Matrix<float>> patches;
  patches.reserve(data.size());
  for (const auto& s : data) patches.push_back(patchify<float>(s.image, params.config));

  std::vector<std::size_t> order(data.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::int64_t step = 0;
  for (int epoch = 0; epoch < cfg.epochs && step < total; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    for (std::size_t begin = 0; begin < order.size() && step < total; begin += static_cast<std::size_t>(cfg.batch_size)) {
      const auto t0 = std::chrono::steady_clock::now();
      const std::size_t end = std::min(order.size(), begin + static_cast<std::size_t>(cfg.batch_size));
      std::vector<TokenSequence> seqs;
      std::size_t masked = 0;
      for (std::size_t k = begin; k < end; ++k) {
        const CropSample& s = data[order[k]];
        seqs.push_back(cfg.stage == Stage::kPretrain ? format_pretrain(s, vocab, rng) : format_sft(s, vocab));
        masked += static_cast<std::size_t>(std::count(seqs.back().loss_mask.begin() + 1, seqs.back().loss_mask.end(), true));
      }
      detail::zero_trainable(grads, cfg.trainable);
      double loss = 0.0;
      const float w = 1.0f / static_cast<float>(masked);
      for (std::size_t k = begin; k < end; ++k) {
        const TokenSequence& seq = seqs[k - begin];
        const ShiftedTargets st = shift_targets(seq.ids, seq.loss_mask);
        std::vector<float> weights(st.mask.size());
        for (std::size_t t = 0; t < weights.size(); ++t) weights[t] = st.mask[t] ? w : 0.0f;
        loss += weighted_nll_and_grad<float>(params, patches[order[k]], seq.ids, st.targets, weights, grads,
                                             cfg.trainable);
      }
      detail::check_finite(loss, step, log);
      const double norm = clip_grad_norm(grads, cfg.trainable, cfg.grad_clip);
      const double lr = schedule.at(step);
      opt.step(params, grads, lr, cfg.trainable);
      StepRecord rec{step, epoch, loss, lr, norm, detail::elapsed_ms(t0)};
      log.steps.push_back(rec);
      if (on_step) on_step(rec);
      ++step;
    }
    if (on_epoch) {
      nlohmann::json m = on_epoch(epoch, params);
      m["kind"] = "epoch";
      m["stage"] = stage_name(cfg.stage);
      m["epoch"] = epoch;
      log.epochs.push_back(std::move(m));
    }
  }
  if (!all_finite(params)) throw Error("non-finite-params", "after " + std::string(stage_name(cfg.stage)));
  return log;
}

inline TrainLog run_pretrain(const StageConfig& cfg, ModelParams<float>& params, std::span<const CropSample> data,
                             const Vocab& vocab, const StepCallback& on_step = {}, const EpochCallback& on_epoch = {}) {
  if (cfg.stage != Stage::kPretrain) throw Error("bad-stage", "expected pretrain config");
  return run_supervised(cfg, params, data, vocab, on_step, on_epoch);
}

inline TrainLog run_sft(const StageConfig& cfg, ModelParams<float>& params, std::span<const CropSample> data,
                        const Vocab& vocab, const StepCallback& on_step = {}, const EpochCallback& on_epoch = {}) {
  if (cfg.stage != Stage::kSft) throw Error("bad-stage", "expected sft config");
  return run_supervised(cfg, params, data, vocab, on_step, on_epoch);
}

// ---------------------------------------------------------------------------
// Preference optimization

// Batch mean of softplus(-z), z = beta * ((pc - rc) - (pr - rr)).
inline double dpo_loss(std::span<const double> policy_chosen, std::span<const double> policy_rejected,
                       std::span<const double> ref_chosen, std::span<const double> ref_rejected, double beta) {
  const std::size_t n = policy_chosen.size();
  if (n == 0 || policy_rejected.size() != n || ref_chosen.size() != n || ref_rejected.size() != n) {
    throw Error("shape-mismatch", "dpo inputs must be equal-length and non-empty");
  }
  double total = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const double vals[] = {policy_chosen[i], policy_rejected[i], ref_chosen[i], ref_rejected[i]};
    for (double v : vals) {
      if (!std::isfinite(v)) throw Error("non-finite-input", "log-probability at index " + std::to_string(i));
    }
    const double z = beta * ((policy_chosen[i] - ref_chosen[i]) - (policy_rejected[i] - ref_rejected[i]));
    total += z > 0 ? std::log1p(std::exp(-z)) : -z + std::log1p(std::exp(z));
  }
  return total / static_cast<double>(n);
}

struct PreferenceExample {
  PreferencePair pair;
  Image image;
  std::string origin;  // "model" or "corruption"
  double rejected_iou = 0.0;
};

inline nlohmann::json preference_to_json(const PreferenceExample& e, const Vocab& vocab) {
  return {{"sample_ref", e.pair.sample_ref},
          {"origin", e.origin},
          {"rejected_iou", e.rejected_iou},
          {"prompt", vocab.render(e.pair.prompt.ids)},
          {"chosen", vocab.render(e.pair.chosen.ids)},
          {"rejected", vocab.render(e.pair.rejected.ids)}};
}

// Sequence log-probabilities of chosen and rejected under one model.
struct PairLogprobs {
  double chosen = 0.0;
  double rejected = 0.0;
};

template <typename T>
PairLogprobs pair_logprobs(const ModelParams<T>& p, const PreferenceExample& e) {
  const Matrix<T> patches = patchify<T>(e.image, p.config);
  return {static_cast<double>(sequence_logprob<T>(p, patches, e.pair.prompt.ids, e.pair.chosen.ids)),
          static_cast<double>(sequence_logprob<T>(p, patches, e.pair.prompt.ids, e.pair.rejected.ids))};
}

inline double reward_margin(const PairLogprobs& policy, const PairLogprobs& ref, double beta) {
  return beta * ((policy.chosen - ref.chosen) - (policy.rejected - ref.rejected));
}

namespace detail {

// Forward pass over prompt+answer keeping caches; returns the summed answer
// log-probability.
template <typename T>
double answer_logprob_cached(const ModelParams<T>& p, const Matrix<T>& patches, const TokenSequence& prompt,
                             const TokenSequence& answer, SequenceCache<T>& c, const Trainable& tr,
                             std::vector<int>& ids) {
  ids = prompt.ids;
  ids.insert(ids.end(), answer.ids.begin(), answer.ids.end());
  forward_cached(p, patches, ids, c, tr);
  double total = 0.0;
  for (std::size_t t = prompt.ids.size(); t < ids.size(); ++t) {
    total += static_cast<double>(log_softmax_row(c.logits, static_cast<Eigen::Index>(t - 1))(ids[t]));
  }
  return total;
}

// dL/dlogits for L = -coef * sum answer log p.
template <typename T>
Matrix<T> answer_dlogits(const SequenceCache<T>& c, const std::vector<int>& ids, std::size_t start, T coef) {
  Matrix<T> d = Matrix<T>::Zero(c.logits.rows(), c.logits.cols());
  for (std::size_t t = start; t < ids.size(); ++t) {
    const auto r = static_cast<Eigen::Index>(t - 1);
    d.row(r) = log_softmax_row(c.logits, r).array().exp() * coef;
    d(r, ids[t]) -= coef;
  }
  return d;
}

}  // namespace detail

// Batch preference loss under `policy` with fixed reference log-probabilities;
// accumulates its gradient into grads. With z = beta*((lc-rc)-(lr-rr)),
// dL/dlc = -beta*sigmoid(-z)/B and dL/dlr = +beta*sigmoid(-z)/B.
template <typename T>
double dpo_loss_and_grad(const ModelParams<T>& policy, std::span<const PreferenceExample> batch,
                         std::span<const PairLogprobs> ref, double beta, ModelParams<T>& grads, const Trainable& tr) {
  const double inv_b = 1.0 / static_cast<double>(batch.size());
  std::vector<double> pc, pr, rc, rr;
  for (std::size_t k = 0; k < batch.size(); ++k) {
    const PreferenceExample& e = batch[k];
    const Matrix<T> patches = patchify<T>(e.image, policy.config);
    SequenceCache<T> cc, cr;
    std::vector<int> ids_c, ids_r;
    pc.push_back(detail::answer_logprob_cached(policy, patches, e.pair.prompt, e.pair.chosen, cc, tr, ids_c));
    pr.push_back(detail::answer_logprob_cached(policy, patches, e.pair.prompt, e.pair.rejected, cr, tr, ids_r));
    rc.push_back(ref[k].chosen);
    rr.push_back(ref[k].rejected);
    const double z = beta * ((pc.back() - rc.back()) - (pr.back() - rr.back()));
    const double g = beta / (1.0 + std::exp(z)) * inv_b;
    const std::size_t start = e.pair.prompt.ids.size();
    backward_cached(policy, cc, detail::answer_dlogits(cc, ids_c, start, static_cast<T>(g)), grads, tr);
    backward_cached(policy, cr, detail::answer_dlogits(cr, ids_r, start, static_cast<T>(-g)), grads, tr);
  }
  return dpo_loss(pc, pr, rc, rr, beta);
}

struct DpoRun {
  ModelParams<float> policy;
  TrainLog log;
};

// The policy starts as a copy of `reference`; the reference itself is only
// read, once, to fix its log-probabilities on every pair.
inline DpoRun run_dpo(const StageConfig& cfg, const ModelParams<float>& reference,
                      std::span<const PreferenceExample> pairs, const StepCallback& on_step = {},
                      const EpochCallback& on_epoch = {}) {
  if (cfg.stage != Stage::kDpo) throw Error("bad-stage", "expected dpo config");
  if (pairs.empty()) throw Error("empty-dataset", "no preference pairs");
  DpoRun run{reference, {}};
  run.log.stage = Stage::kDpo;
  std::vector<PairLogprobs> ref;
  ref.reserve(pairs.size());
  for (const auto& e : pairs) ref.push_back(pair_logprobs(reference, e));

  const std::int64_t total = detail::total_steps(cfg, pairs.size());
  const LrSchedule schedule(cfg.lr, total, cfg.warmup_ratio);
  AdamW<float> opt(run.policy, {0.9, 0.999, 1e-8, cfg.weight_decay});
  ModelParams<float> grads = zeros_like(run.policy);
  Rng rng(splitmix64(cfg.seed ^ 3));
  std::vector<std::size_t> order(pairs.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::int64_t step = 0;
  for (int epoch = 0; epoch < cfg.epochs && step < total; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    for (std::size_t begin = 0; begin < order.size() && step < total; begin += static_cast<std::size_t>(cfg.batch_size)) {
      const auto t0 = std::chrono::steady_clock::now();
      const std::size_t end = std::min(order.size(), begin + static_cast<std::size_t>(cfg.batch_size));
      std::vector<PreferenceExample> batch;
      std::vector<PairLogprobs> batch_ref;
      for (std::size_t k = begin; k < end; ++k) {
        batch.push_back(pairs[order[k]]);
        batch_ref.push_back(ref[order[k]]);
      }
      detail::zero_trainable(grads, cfg.trainable);
      const double loss = dpo_loss_and_grad<float>(run.policy, batch, batch_ref, cfg.beta, grads, cfg.trainable);
      detail::check_finite(loss, step, run.log);
      const double norm = clip_grad_norm(grads, cfg.trainable, cfg.grad_clip);
      const double lr = schedule.at(step);
      opt.step(run.policy, grads, lr, cfg.trainable);
      StepRecord rec{step, epoch, loss, lr, norm, detail::elapsed_ms(t0)};
      run.log.steps.push_back(rec);
      if (on_step) on_step(rec);
      ++step;
    }
    if (on_epoch) {
      nlohmann::json m = on_epoch(epoch, run.policy);
      m["kind"] = "epoch";
      m["stage"] = "dpo";
      m["epoch"] = epoch;
      run.log.epochs.push_back(std::move(m));
    }
  }
  if (!all_finite(run.policy)) throw Error("non-finite-params", "after dpo");
  return run;
}

// ---------------------------------------------------------------------------
// Preference mining

struct MiningConfig {
  double iou_threshold = 0.8;    // model outputs below this become rejected
  int complex_vertices = 15;     // strictly more vertices triggers corruption
  double large_area_frac = 0.25; // strictly larger area fraction triggers corruption
  int max_k = 3;
  int delta = 4;
  double identical_iou = 0.999;  // pairs at or above are dropped
  int max_new = 80;
  int batch_size = 32;
};

struct MiningStats {
  std::size_t model_pairs = 0;
  std::size_t corruption_pairs = 0;
  std::size_t decode_failures = 0;
  std::size_t invalid_predictions = 0;
  std::size_t dropped_near_identical = 0;

  nlohmann::json to_json() const {
    return {{"model_pairs", model_pairs},
            {"corruption_pairs", corruption_pairs},
            {"decode_failures", decode_failures},
            {"invalid_predictions", invalid_predictions},
            {"dropped_near_identical", dropped_near_identical}};
  }
};

struct MiningResult {
  std::vector<PreferenceExample> pairs;
  MiningStats stats;
};

// Two independent sources of rejected answers per training crop: the model's
// own poor predictions, and deliberate vertex corruption of complex or large
// ground truths. A sample can contribute to both.
inline MiningResult mine_preferences(const Predictor& predictor, std::span<const CropSample> data, const Vocab& vocab,
                                     const MiningConfig& cfg, std::uint64_t seed) {
  MiningResult out;
  const double crop_area = static_cast<double>(kCropSize) * kCropSize;
  for (std::size_t begin = 0; begin < data.size(); begin += static_cast<std::size_t>(cfg.batch_size)) {
    const std::size_t end = std::min(data.size(), begin + static_cast<std::size_t>(cfg.batch_size));
    const auto outputs = predictor(data.subspan(begin, end - begin));
    for (std::size_t i = begin; i < end; ++i) {
      const CropSample& s = data[i];
      auto add = [&](const Polygon& rejected, const char* origin) {
        Polygon canon;
        try {
          canon = canonicalize(rejected);
        } catch (const Error&) {
          ++out.stats.invalid_predictions;
          return;
        }
        const double iou = polygon_iou(canon, s.gt);
        if (iou >= cfg.identical_iou) {
          ++out.stats.dropped_near_identical;
          return;
        }
        PreferenceExample e{format_dpo(s, canon, vocab), s.image, origin, iou};
        out.pairs.push_back(std::move(e));
        if (std::string(origin) == "model") {
          ++out.stats.model_pairs;
        } else {
          ++out.stats.corruption_pairs;
        }
      };

      const DecodeResult dec = try_decode(outputs[i - begin], vocab);
      if (!dec.ok()) {
        ++out.stats.decode_failures;
      } else if (dec.polygon->size() >= 3 && shoelace_signed_area(*dec.polygon) != 0.0 &&
                 polygon_iou(*dec.polygon, s.gt) < cfg.iou_threshold) {
        add(*dec.polygon, "model");
      }

      const bool complex = static_cast<int>(s.gt.size()) > cfg.complex_vertices;
      const bool large = std::abs(shoelace_signed_area(s.gt)) > cfg.large_area_frac * crop_area;
      if (complex || large) {
        Rng rng(derive_seed(seed, 7, i));
        const bool remove = std::bernoulli_distribution(0.5)(rng);
        const int kmax = remove ? std::min(cfg.max_k, static_cast<int>(s.gt.size()) - 3) : cfg.max_k;
        if (kmax >= 1) {
          const int k = std::uniform_int_distribution<int>(1, kmax)(rng);
          try {
            add(remove ? corrupt_delete(s.gt, k, rng) : corrupt_insert(s.gt, k, cfg.delta, rng), "corruption");
          } catch (const Error&) {
            ++out.stats.invalid_predictions;
          }
        }
      }
    }
  }
  return out;
}

}  // namespace polytok
