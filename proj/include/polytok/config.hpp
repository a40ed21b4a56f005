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

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "polytok/error.hpp"
#include "polytok/json_io.hpp"
#include "polytok/model.hpp"
#include "polytok/synthdata.hpp"
#include "polytok/training.hpp"

namespace polytok {

// Everything one end-to-end run needs. Defaults are smoke scale: a handful
// of samples and a one-layer micro model, so that a bare invocation finishes
// in seconds.
struct PipelineConfig {
  std::uint64_t seed = 1234;
  DatasetCounts counts{10, 5, 5};
  GenParams gen;
  ModelConfig model = [] {
    ModelConfig m;
    m.enc_layers = 1;
    m.enc_dim = 32;
    m.enc_heads = 2;
    m.lm_layers = 1;
    m.lm_dim = 32;
    m.lm_heads = 2;
    return m;
  }();
  StageConfig pretrain = [] {
    StageConfig c = default_stage_config(Stage::kPretrain);
    c.epochs = 2;
    c.batch_size = 4;
    return c;
  }();
  StageConfig sft = [] {
    StageConfig c = default_stage_config(Stage::kSft);
    c.epochs = 1;
    c.batch_size = 4;
    return c;
  }();
  StageConfig dpo = [] {
    StageConfig c = default_stage_config(Stage::kDpo);
    c.batch_size = 4;
    return c;
  }();
  MiningConfig mining;
  int eval_max_new = 80;
  int eval_batch = 32;
};

namespace detail {

// Reads typed fields from one JSON object, collecting "path: problem"
// diagnostics instead of stopping at the first.
class FieldReader {
 public:
  FieldReader(const nlohmann::json& j, std::string path, std::vector<std::string>& errors)
      : j_(j), path_(std::move(path)), errors_(errors) {
    if (!j_.is_object()) errors_.push_back(path_ + ": expected an object");
  }

  template <typename V>
  void get(const std::string& key, V& out) {
    seen_.insert(key);
    if (!j_.is_object() || !j_.contains(key)) return;
    const nlohmann::json& v = j_.at(key);
    bool ok;
    if constexpr (std::is_same_v<V, bool>) {
      ok = v.is_boolean();
    } else if constexpr (std::is_integral_v<V>) {
      ok = v.is_number_integer() && (!std::is_unsigned_v<V> || v.get<std::int64_t>() >= 0);
    } else {
      ok = v.is_number();
    }
    if (!ok) {
      errors_.push_back(path_ + "." + key + ": wrong type (" + v.type_name() + ")");
      return;
    }
    out = v.get<V>();
  }

  void positive(const std::string& key, double value) {
    if (!(value > 0)) errors_.push_back(path_ + "." + key + ": must be > 0");
  }

  const nlohmann::json* child(const std::string& key) {
    seen_.insert(key);
    if (!j_.is_object() || !j_.contains(key)) return nullptr;
    return &j_.at(key);
  }

  std::string path(const std::string& key) const { return path_ + "." + key; }

  void finish() {
    if (!j_.is_object()) return;
    for (const auto& [k, _] : j_.items()) {
      if (!seen_.contains(k)) errors_.push_back(path_ + "." + k + ": unknown field");
    }
  }

 private:
  const nlohmann::json& j_;
  std::string path_;
  std::vector<std::string>& errors_;
  std::set<std::string> seen_;
};

inline void read_stage(const nlohmann::json& j, const std::string& path, StageConfig& c,
                       std::vector<std::string>& errors) {
  FieldReader r(j, path, errors);
  r.get("lr", c.lr);
  r.get("batch_size", c.batch_size);
  r.get("warmup_ratio", c.warmup_ratio);
  r.get("epochs", c.epochs);
  r.get("weight_decay", c.weight_decay);
  r.get("grad_clip", c.grad_clip);
  r.get("max_steps", c.max_steps);
  if (c.stage == Stage::kDpo) r.get("beta", c.beta);
  if (const auto* t = r.child("trainable")) {
    FieldReader tr(*t, r.path("trainable"), errors);
    tr.get("encoder", c.trainable.encoder);
    tr.get("pos_embed", c.trainable.pos_embed);
    tr.get("projector", c.trainable.projector);
    tr.get("lm", c.trainable.lm);
    tr.finish();
  }
  r.finish();
  if (c.lr < 0) errors.push_back(path + ".lr: must be >= 0");
  r.positive("batch_size", c.batch_size);
  r.positive("epochs", c.epochs);
  if (c.warmup_ratio < 0 || c.warmup_ratio > 1) errors.push_back(path + ".warmup_ratio: must be in [0, 1]");
}

}  // namespace detail

inline nlohmann::json pipeline_config_to_json(const PipelineConfig& c) {
  auto stage = [](const StageConfig& s) {
    nlohmann::json j = stage_config_to_json(s);
    j.erase("stage");
    j.erase("seed");
    if (s.stage != Stage::kDpo) j.erase("beta");
    return j;
  };
  nlohmann::json model = model_config_to_json(c.model);
  model.erase("vocab");
  return {{"seed", c.seed},
          {"data", {{"train", c.counts.train}, {"val", c.counts.val}, {"test", c.counts.test},
                    {"gen", gen_params_to_json(c.gen)}}},
          {"model", model},
          {"pretrain", stage(c.pretrain)},
          {"sft", stage(c.sft)},
          {"dpo", stage(c.dpo)},
          {"mining",
           {{"iou_threshold", c.mining.iou_threshold},
            {"complex_vertices", c.mining.complex_vertices},
            {"large_area_frac", c.mining.large_area_frac},
            {"max_k", c.mining.max_k},
            {"delta", c.mining.delta},
            {"identical_iou", c.mining.identical_iou},
            {"max_new", c.mining.max_new}}},
          {"eval", {{"max_new", c.eval_max_new}, {"batch_size", c.eval_batch}}}};
}

// Missing fields keep their defaults; unknown fields and type mismatches are
// reported together as one "bad-config" error.
inline PipelineConfig pipeline_config_from_json(const nlohmann::json& j) {
  PipelineConfig c;
  std::vector<std::string> errors;
  detail::FieldReader root(j, "$", errors);
  root.get("seed", c.seed);
  if (const auto* d = root.child("data")) {
    detail::FieldReader r(*d, "$.data", errors);
    r.get("train", c.counts.train);
    r.get("val", c.counts.val);
    r.get("test", c.counts.test);
    if (const auto* g = r.child("gen")) {
      detail::FieldReader gr(*g, "$.data.gen", errors);
      gr.get("scene_size", c.gen.scene_size);
      gr.get("max_vertices", c.gen.polygon.max_vertices);
      gr.get("grid", c.gen.polygon.grid);
      gr.get("min_cells", c.gen.polygon.min_cells);
      gr.get("max_cells", c.gen.polygon.max_cells);
      gr.get("complexity_decay", c.gen.polygon.complexity_decay);
      gr.get("diagonal_prob", c.gen.polygon.diagonal_prob);
      gr.get("min_contrast", c.gen.min_contrast);
      gr.get("noise_sigma_min", c.gen.noise_sigma_min);
      gr.get("noise_sigma_max", c.gen.noise_sigma_max);
      gr.get("edge_jitter", c.gen.edge_jitter);
      gr.finish();
    }
    r.finish();
    r.positive("train", c.counts.train);
    r.positive("val", c.counts.val);
    r.positive("test", c.counts.test);
  }
  if (const auto* m = root.child("model")) {
    detail::FieldReader r(*m, "$.model", errors);
    r.get("image_size", c.model.image_size);
    r.get("patch", c.model.patch);
    r.get("channels", c.model.channels);
    r.get("enc_layers", c.model.enc_layers);
    r.get("enc_dim", c.model.enc_dim);
    r.get("enc_heads", c.model.enc_heads);
    r.get("lm_layers", c.model.lm_layers);
    r.get("lm_dim", c.model.lm_dim);
    r.get("lm_heads", c.model.lm_heads);
    r.get("max_seq_len", c.model.max_seq_len);
    r.get("use_pos_embed", c.model.use_pos_embed);
    r.finish();
    ModelConfig probe = c.model;
    probe.vocab = 1;
    try {
      probe.validate();
    } catch (const Error& e) {
      errors.push_back(std::string("$.model: ") + e.what());
    }
  }
  if (const auto* s = root.child("pretrain")) detail::read_stage(*s, "$.pretrain", c.pretrain, errors);
  if (const auto* s = root.child("sft")) detail::read_stage(*s, "$.sft", c.sft, errors);
  if (const auto* s = root.child("dpo")) detail::read_stage(*s, "$.dpo", c.dpo, errors);
  if (const auto* m = root.child("mining")) {
    detail::FieldReader r(*m, "$.mining", errors);
    r.get("iou_threshold", c.mining.iou_threshold);
    r.get("complex_vertices", c.mining.complex_vertices);
    r.get("large_area_frac", c.mining.large_area_frac);
    r.get("max_k", c.mining.max_k);
    r.get("delta", c.mining.delta);
    r.get("identical_iou", c.mining.identical_iou);
    r.get("max_new", c.mining.max_new);
    r.finish();
  }
  if (const auto* e = root.child("eval")) {
    detail::FieldReader r(*e, "$.eval", errors);
    r.get("max_new", c.eval_max_new);
    r.get("batch_size", c.eval_batch);
    r.finish();
    r.positive("max_new", c.eval_max_new);
    r.positive("batch_size", c.eval_batch);
  }
  root.finish();
  if (!errors.empty()) {
    std::string msg;
    for (const auto& e : errors) msg += "\n  " + e;
    throw Error("bad-config", msg);
  }
  c.pretrain.seed = c.seed;
  c.sft.seed = c.seed;
  c.dpo.seed = c.seed;
  return c;
}

// JSON syntax errors carry the line number of the offending text.
inline PipelineConfig load_pipeline_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw Error("io", "cannot open " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  const std::string text = ss.str();
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(text);
  } catch (const nlohmann::json::parse_error& e) {
    const std::size_t upto = std::min<std::size_t>(e.byte, text.size());
    const auto line = 1 + std::count(text.begin(), text.begin() + static_cast<std::ptrdiff_t>(upto), '\n');
    throw Error("bad-config", path.string() + ":" + std::to_string(line) + ": " + e.what());
  }
  return pipeline_config_from_json(j);
}

// FNV-1a over the canonical JSON dump, hex encoded; recorded in run manifests.
inline std::string config_hash(const PipelineConfig& c) {
  const std::string s = pipeline_config_to_json(c).dump();
  std::uint64_t h = 1469598103934665603ull;
  for (unsigned char ch : s) {
    h ^= ch;
    h *= 1099511628211ull;
  }
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

}  // namespace polytok
