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

// Command-line driver: dataset generation, the three training stages,
// inference, evaluation and overlay rendering.

#include <fcntl.h>
#include <unistd.h>

#include <CLI11.hpp>
#include <chrono>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <sstream>
#include <string>

#include "overlay.hpp"
#include "polytok/checkpoint.hpp"
#include "polytok/config.hpp"
#include "polytok/evaluation.hpp"
#include "polytok/training.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace polytok::tools {
namespace {

constexpr const char* kToolVersion = "polytok 0.1.0";

struct GlobalOptions {
  std::string config_path;
  std::optional<std::uint64_t> seed;
  std::string out;
};

int exit_code_for(const std::string& code) {
  if (code == "bad-config" || code == "bad-stage" || code == "bad-model-config" || code == "bad-counts") return 2;
  if (code == "stage-order") return 3;
  if (code == "non-finite-loss" || code == "non-finite-params" || code == "non-finite-input") return 4;
  return 1;
}

// Exclusive ownership of an output directory for the life of one command.
class DirLock {
 public:
  explicit DirLock(const fs::path& dir) : path_(dir / ".polytok.lock") {
    fs::create_directories(dir);
    fd_ = ::open(path_.c_str(), O_CREAT | O_EXCL | O_WRONLY, 0644);
    if (fd_ < 0) throw Error("locked", path_.string() + " exists; another command is using this output directory");
    const std::string pid = std::to_string(::getpid()) + "\n";
    [[maybe_unused]] auto n = ::write(fd_, pid.data(), pid.size());
  }
  ~DirLock() {
    ::close(fd_);
    std::error_code ec;
    fs::remove(path_, ec);
  }
  DirLock(const DirLock&) = delete;
  DirLock& operator=(const DirLock&) = delete;

 private:
  fs::path path_;
  int fd_ = -1;
};

std::string utc_now() {
  const std::time_t t = std::time(nullptr);
  char buf[32];
  std::strftime(buf, sizeof(buf), "%Y-%m-%dT%H:%M:%SZ", std::gmtime(&t));
  return buf;
}

PipelineConfig resolve_config(const GlobalOptions& g) {
  PipelineConfig c = g.config_path.empty() ? PipelineConfig{} : load_pipeline_config(g.config_path);
  if (g.seed) {
    c.seed = *g.seed;
    c.pretrain.seed = c.sft.seed = c.dpo.seed = c.seed;
  }
  return c;
}

// One manifest per command; lineage is carried forward from the inputs.
class RunManifest {
 public:
  RunManifest(std::string command, const PipelineConfig& cfg) : cfg_(cfg) {
    j_ = {{"command", std::move(command)},
          {"tool_version", kToolVersion},
          {"config_hash", config_hash(cfg)},
          {"master_seed", cfg.seed},
          {"config", pipeline_config_to_json(cfg)},
          {"inputs", json::object()},
          {"outputs", json::object()},
          {"lineage", json::array()},
          {"started_at", utc_now()}};
  }

  void input(const std::string& key, const fs::path& p) { j_["inputs"][key] = fs::absolute(p).string(); }
  void output(const std::string& key, const fs::path& p) { j_["outputs"][key] = fs::absolute(p).string(); }
  void set(const std::string& key, json v) { j_[key] = std::move(v); }
  void lineage(json chain) { j_["lineage"] = std::move(chain); }
  const json& lineage() const { return j_["lineage"]; }

  void write(const fs::path& dir) {
    j_["finished_at"] = utc_now();
    write_json_file(j_, dir / "run_manifest.json");
  }

 private:
  PipelineConfig cfg_;
  json j_;
};

json data_lineage(const fs::path& manifest_path) {
  const json m = read_json_file(manifest_path);
  return json::array({{{"kind", "data"}, {"path", fs::absolute(manifest_path).string()}, {"master_seed", m.at("master_seed")}}});
}

struct LoadedModel {
  ModelParams<float> params;
  json meta;
};

LoadedModel load_model(const fs::path& ckpt) {
  auto ck = load_checkpoint<float>(ckpt);
  return {std::move(ck.params), std::move(ck.meta)};
}

std::string ckpt_stage(const json& meta) { return meta.value("stage", std::string("unknown")); }

void require_stage(const json& meta, const std::string& expected, const std::string& why) {
  const std::string got = ckpt_stage(meta);
  if (got != expected) throw Error("stage-order", why + " needs a " + expected + " checkpoint, got " + got);
}

std::vector<CropSample> crops_of(const std::vector<DatasetSample>& v) {
  std::vector<CropSample> out;
  out.reserve(v.size());
  for (const auto& s : v) out.push_back(s.crop);
  return out;
}

fs::path data_manifest(const GlobalOptions& g, const std::string& explicit_path) {
  const fs::path p = explicit_path.empty() ? fs::path(g.out) / "data" / "manifest.json" : fs::path(explicit_path);
  if (!fs::exists(p)) throw Error("io", "dataset manifest not found: " + p.string() + " (run gen-data first)");
  return p;
}

void write_lines(const fs::path& path, const std::vector<json>& rows) {
  std::ofstream out(path);
  if (!out) throw Error("io", "cannot open " + path.string());
  for (const auto& r : rows) out << r.dump() << '\n';
}

std::vector<json> read_lines(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw Error("io", "cannot open " + path.string());
  std::vector<json> rows;
  std::string line;
  while (std::getline(in, line)) {
    if (!line.empty()) rows.push_back(json::parse(line));
  }
  return rows;
}

// ---------------------------------------------------------------------------

int cmd_gen_data(const GlobalOptions& g) {
  const PipelineConfig cfg = resolve_config(g);
  const fs::path dir = fs::path(g.out) / "data";
  DirLock lock(dir);
  const json manifest = build_dataset(cfg.counts, cfg.gen, cfg.seed, dir);
  RunManifest run("gen-data", cfg);
  run.output("manifest", dir / "manifest.json");
  run.lineage(data_lineage(dir / "manifest.json"));
  run.set("counts", manifest.at("counts"));
  run.write(dir);
  std::cout << "wrote " << manifest.at("entries").size() << " samples (train " << cfg.counts.train << ", val "
            << cfg.counts.val << ", test " << cfg.counts.test << ") to " << dir.string() << "\n";
  return 0;
}

std::vector<PreferenceExample> load_pairs(const fs::path& path, const std::vector<DatasetSample>& train,
                                          const Vocab& vocab) {
  std::map<std::string, const CropSample*> by_id;
  for (const auto& s : train) by_id[s.crop.source_id] = &s.crop;
  std::vector<PreferenceExample> out;
  for (const json& row : read_lines(path)) {
    const std::string ref = row.at("sample_ref");
    const auto it = by_id.find(ref);
    if (it == by_id.end()) throw Error("bad-pairs", "pair refers to unknown sample " + ref);
    const Polygon rejected = decode_tokens(vocab.parse(row.at("rejected").get<std::string>()), vocab);
    out.push_back({format_dpo(*it->second, rejected, vocab), it->second->image, row.at("origin"),
                   row.at("rejected_iou")});
  }
  return out;
}

MiningResult mine(const PipelineConfig& cfg, const ModelParams<float>& model, const std::vector<CropSample>& train,
                  const Vocab& vocab) {
  MiningConfig mc = cfg.mining;
  return mine_preferences(model_predictor(model, vocab, mc.max_new), train, vocab, mc, cfg.seed);
}

void write_pairs(const fs::path& path, const MiningResult& res, const Vocab& vocab) {
  std::vector<json> rows;
  for (const auto& e : res.pairs) rows.push_back(preference_to_json(e, vocab));
  write_lines(path, rows);
}

struct TrainArgs {
  std::string stage;
  std::string data;
  std::string init;
  std::string pairs;
  bool mine_pairs = false;
};

int cmd_train(const GlobalOptions& g, const TrainArgs& a) {
  const PipelineConfig cfg = resolve_config(g);
  const Stage stage = stage_from_name(a.stage);
  const Vocab vocab;
  const fs::path data = data_manifest(g, a.data);
  const fs::path dir = fs::path(g.out) / a.stage;

  std::optional<LoadedModel> init;
  if (!a.init.empty()) init = load_model(a.init);
  if (stage == Stage::kSft) {
    if (!init) throw Error("stage-order", "sft requires --init <pretrain checkpoint>");
    require_stage(init->meta, "pretrain", "sft");
  }
  if (stage == Stage::kDpo) {
    if (!init) throw Error("stage-order", "dpo requires --init <sft checkpoint>");
    require_stage(init->meta, "sft", "dpo");
    if (a.pairs.empty() && !a.mine_pairs) throw Error("stage-order", "dpo requires --pairs <file> or --mine-pairs");
  }

  DirLock lock(dir);
  RunManifest run("train --stage " + a.stage, cfg);
  run.input("data", data);
  json chain = data_lineage(data);
  if (init) {
    run.input("init", a.init);
    chain = init->meta.value("lineage", chain);
  }

  const auto train = load_split(data, Split::kTrain);
  const auto val = crops_of(load_split(data, Split::kVal));
  const auto crops = crops_of(train);
  std::cout << "stage " << a.stage << ": " << crops.size() << " train samples\n";

  auto on_step = [](const StepRecord& r) {
    if (r.step % 50 == 0) std::cout << "  step " << r.step << " loss " << r.loss << " lr " << r.lr << "\n";
  };
  auto on_epoch = [&](int epoch, const ModelParams<float>& m) {
    const double acc = token_accuracy(m, val, vocab, stage == Stage::kPretrain ? Stage::kPretrain : Stage::kSft);
    std::cout << "  epoch " << epoch << " val token accuracy " << acc << "\n";
    return json{{"val_token_accuracy", acc}};
  };

  ModelParams<float> params;
  TrainLog log;
  if (stage == Stage::kPretrain) {
    ModelConfig mc = cfg.model;
    mc.vocab = vocab.size();
    Rng rng(derive_seed(cfg.seed, 100, 0));
    params = init ? init->params : init_params<float>(mc, rng);
    log = run_pretrain(cfg.pretrain, params, crops, vocab, on_step, on_epoch);
  } else if (stage == Stage::kSft) {
    params = init->params;
    log = run_sft(cfg.sft, params, crops, vocab, on_step, on_epoch);
  } else {
    std::vector<PreferenceExample> pairs;
    if (a.mine_pairs) {
      const MiningResult res = mine(cfg, init->params, crops, vocab);
      write_pairs(dir / "pairs.jsonl", res, vocab);
      run.output("pairs", dir / "pairs.jsonl");
      run.set("mining", res.stats.to_json());
      pairs = res.pairs;
    } else {
      run.input("pairs", a.pairs);
      pairs = load_pairs(a.pairs, train, vocab);
    }
    if (pairs.empty()) throw Error("empty-pairs", "no preference pairs to train on");
    std::cout << "  " << pairs.size() << " preference pairs\n";
    DpoRun res = run_dpo(cfg.dpo, init->params, pairs, on_step, on_epoch);
    params = std::move(res.policy);
    log = std::move(res.log);
  }

  const fs::path ckpt = dir / "model.ckpt";
  chain.push_back({{"kind", a.stage}, {"path", fs::absolute(ckpt).string()}, {"config_hash", config_hash(cfg)}});
  save_checkpoint(ckpt, params, json{{"stage", a.stage}, {"lineage", chain}, {"config_hash", config_hash(cfg)}});
  log.write_jsonl(dir / "train_log.jsonl");
  run.output("checkpoint", ckpt);
  run.output("train_log", dir / "train_log.jsonl");
  run.lineage(chain);
  run.set("stage_config", stage_config_to_json(stage == Stage::kPretrain ? cfg.pretrain
                                                : stage == Stage::kSft   ? cfg.sft
                                                                         : cfg.dpo));
  run.set("steps", log.steps.size());
  if (!log.steps.empty()) run.set("final_loss", log.steps.back().loss);
  run.write(dir);
  std::cout << "wrote " << ckpt.string() << "\n";
  return 0;
}

int cmd_mine_pairs(const GlobalOptions& g, const std::string& ckpt, const std::string& data_arg) {
  const PipelineConfig cfg = resolve_config(g);
  const Vocab vocab;
  const fs::path data = data_manifest(g, data_arg);
  const LoadedModel model = load_model(ckpt);
  require_stage(model.meta, "sft", "mine-pairs");
  const fs::path dir = fs::path(g.out) / "pairs";
  DirLock lock(dir);
  const MiningResult res = mine(cfg, model.params, crops_of(load_split(data, Split::kTrain)), vocab);
  write_pairs(dir / "pairs.jsonl", res, vocab);
  RunManifest run("mine-pairs", cfg);
  run.input("checkpoint", ckpt);
  run.input("data", data);
  run.output("pairs", dir / "pairs.jsonl");
  run.lineage(model.meta.value("lineage", json::array()));
  run.set("mining", res.stats.to_json());
  run.write(dir);
  std::cout << res.pairs.size() << " pairs " << res.stats.to_json().dump() << "\n";
  return 0;
}

BBox parse_bbox(const std::string& s) {
  BBox b;
  char c1, c2, c3;
  std::istringstream in(s);
  if (!(in >> b.x_min >> c1 >> b.y_min >> c2 >> b.x_max >> c3 >> b.y_max) || c1 != ',' || c2 != ',' || c3 != ',' ||
      b.x_max <= b.x_min || b.y_max <= b.y_min) {
    throw Error("bad-config", "--bbox expects x0,y0,x1,y1 with x1>x0 and y1>y0");
  }
  return b;
}

int cmd_infer(const GlobalOptions& g, const std::string& ckpt, const std::string& image_path,
              const std::string& bbox_arg, bool tokens) {
  const PipelineConfig cfg = resolve_config(g);
  const Vocab vocab;
  const LoadedModel model = load_model(ckpt);
  const Image image = read_pgm(image_path);
  const BBox bbox = parse_bbox(bbox_arg);
  CropSample crop;
  crop.crop_scale = kTestCropScale;
  crop.crop_box = enlarge_bbox(bbox, kTestCropScale, image.width, image.height);
  crop.image = model_crop(image, crop.crop_box);
  const std::vector<int> out = model_predictor(model.params, vocab, cfg.eval_max_new)(std::span(&crop, 1)).at(0);
  const DecodeResult dec = try_decode(out, vocab);
  const std::string text = vocab.render(out);
  if (tokens) std::cout << text << "\n";

  const fs::path dir = fs::path(g.out) / "infer";
  DirLock lock(dir);
  json result{{"crop_box", bbox_to_json(crop.crop_box)}, {"tokens", text}};
  std::optional<Polygon> mapped;
  std::string error = dec.error;
  if (dec.ok()) {
    result["crop_polygon"] = polygon_to_json(*dec.polygon);
    try {
      mapped = map_polygon(*dec.polygon, CropTransform{crop.crop_box}, false);
    } catch (const Error& e) {
      error = e.code();
    }
  }
  int rc = 0;
  if (mapped) {
    result["polygon"] = polygon_to_json(*mapped);
    std::cout << polygon_to_json(*mapped).dump() << "\n";
  } else {
    result["error"] = error;
    std::cerr << "decode failed (" << error << "): " << text << "\n";
    rc = 4;
  }
  write_json_file(result, dir / "prediction.json");
  RunManifest run("infer", cfg);
  run.input("checkpoint", ckpt);
  run.input("image", image_path);
  run.output("prediction", dir / "prediction.json");
  run.lineage(model.meta.value("lineage", json::array()));
  run.write(dir);
  return rc;
}

int cmd_eval(const GlobalOptions& g, const std::string& ckpt, const std::string& data_arg, const std::string& split,
             bool echo) {
  const PipelineConfig cfg = resolve_config(g);
  const Vocab vocab;
  const fs::path data = data_manifest(g, data_arg);
  if (ckpt.empty() && !echo) throw Error("bad-config", "eval needs --ckpt or --echo");
  std::optional<LoadedModel> model;
  if (!echo) model = load_model(ckpt);
  const auto test = load_split(data, split_from_name(split));
  const Predictor predictor = echo ? echo_predictor(vocab) : model_predictor(model->params, vocab, cfg.eval_max_new);
  const EvalOutput res = evaluate_model(predictor, test, vocab, EvalMode::kOracleBox, cfg.eval_batch);

  const fs::path dir = fs::path(g.out) / "eval";
  DirLock lock(dir);
  json j = eval_result_to_json(res.result);
  std::vector<ValidityReport> flags;
  std::vector<json> rows;
  for (const auto& s : res.samples) {
    flags.push_back(s.flags);
    rows.push_back(sample_record_to_json(s));
  }
  const ValidityRates v = aggregate_validity(flags);
  j["validity"] = {{"self_intersection", v.self_intersection},
                   {"duplicate_vertices", v.duplicate_vertices},
                   {"too_few_vertices", v.too_few_vertices},
                   {"zero_area", v.zero_area}};
  write_json_file(j, dir / "eval.json");
  write_lines(dir / "samples.jsonl", rows);
  const std::string table = format_metrics_table(res.result);
  {
    std::ofstream t(dir / "metrics.txt");
    t << table;
  }
  std::cout << table;
  std::cout << "mean IoU " << res.result.mean_iou << ", decode failures " << res.result.decode_failures << "/"
            << test.size() << "\n";
  RunManifest run("eval", cfg);
  if (!echo) run.input("checkpoint", ckpt);
  run.input("data", data);
  run.output("eval", dir / "eval.json");
  run.output("samples", dir / "samples.jsonl");
  run.lineage(echo ? data_lineage(data) : model->meta.value("lineage", json::array()));
  run.set("split", split);
  run.write(dir);
  return 0;
}

int cmd_render(const GlobalOptions& g, const std::string& samples, const std::string& data_arg, int limit) {
  const PipelineConfig cfg = resolve_config(g);
  const fs::path data = data_manifest(g, data_arg);
  std::map<std::string, DatasetSample> by_id;
  for (Split s : {Split::kVal, Split::kTest}) {
    for (auto& d : load_split(data, s)) by_id.emplace(d.crop.source_id, std::move(d));
  }
  const fs::path dir = fs::path(g.out) / "render";
  DirLock lock(dir);
  int n = 0;
  for (const json& row : read_lines(samples)) {
    if (limit > 0 && n >= limit) break;
    const std::string id = row.at("source_id");
    const auto it = by_id.find(id);
    if (it == by_id.end() || !it->second.scene) throw Error("io", "sample " + id + " not found in held-out splits");
    const Scene& scene = *it->second.scene;
    const CropSample crop = crop_sample(scene.image, scene.gt, scene.bbox, nullptr);
    Overlay o;
    o.base = crop.image;
    o.gt = polygon_from_json(json{{"vertices", row.at("crop_gt")}});
    if (!row.at("crop_pred").is_null()) o.pred = polygon_from_json(json{{"vertices", row.at("crop_pred")}});
    o.iou = row.value("iou", 0.0);
    o.title = id;
    write_gray_png(crop.image, dir / (id + "_crop.png"));
    std::ofstream(dir / (id + ".svg")) << overlay_svg(o, id + "_crop.png");
    write_overlay_png(o, dir / (id + ".png"));
    ++n;
  }
  RunManifest run("render", cfg);
  run.input("samples", samples);
  run.input("data", data);
  run.output("dir", dir);
  run.set("rendered", n);
  run.write(dir);
  std::cout << "rendered " << n << " overlays to " << dir.string() << "\n";
  return 0;
}

}  // namespace
}  // namespace polytok::tools

int main(int argc, char** argv) {
  using namespace polytok::tools;
  CLI::App app{"Polygon extraction with a vision-language token model"};
  app.set_version_flag("--version", kToolVersion);
  app.require_subcommand(1);
  GlobalOptions g;
  std::uint64_t seed = 0;
  app.add_option("--config", g.config_path, "Pipeline config (JSON); smoke defaults when omitted")
      ->check(CLI::ExistingFile);
  auto* seed_opt = app.add_option("--seed", seed, "Master seed, overrides the config");
  app.add_option("--out", g.out, "Output root")->required();

  auto* gen = app.add_subcommand("gen-data", "Generate the synthetic dataset under <out>/data");

  TrainArgs ta;
  auto* train = app.add_subcommand("train", "Run one training stage, writing <out>/<stage>");
  train->add_option("--stage", ta.stage, "pretrain | sft | dpo")
      ->required()
      ->check(CLI::IsMember({"pretrain", "sft", "dpo"}));
  train->add_option("--data", ta.data, "Dataset manifest (default <out>/data/manifest.json)");
  train->add_option("--init", ta.init, "Checkpoint from the previous stage");
  train->add_option("--pairs", ta.pairs, "Preference pairs (JSON lines) for dpo");
  train->add_flag("--mine-pairs", ta.mine_pairs, "Mine preference pairs from --init before dpo");

  std::string ckpt, data, image, bbox, samples, split = "test";
  bool tokens = false, echo = false;
  int limit = 0;
  auto* mine = app.add_subcommand("mine-pairs", "Mine preference pairs with an sft checkpoint");
  mine->add_option("--init", ckpt, "SFT checkpoint")->required();
  mine->add_option("--data", data, "Dataset manifest");

  auto* infer = app.add_subcommand("infer", "Predict the polygon inside one box of a PGM image");
  infer->add_option("--ckpt", ckpt, "Checkpoint")->required();
  infer->add_option("--image", image, "Source image (binary PGM)")->required()->check(CLI::ExistingFile);
  infer->add_option("--bbox", bbox, "Object box x0,y0,x1,y1 in source pixels")->required();
  infer->add_flag("--tokens", tokens, "Print the raw bracket token string");

  auto* eval = app.add_subcommand("eval", "Oracle-box evaluation on a held-out split");
  eval->add_option("--ckpt", ckpt, "Checkpoint");
  eval->add_option("--data", data, "Dataset manifest");
  eval->add_option("--split", split, "val | test")->check(CLI::IsMember({"val", "test"}));
  eval->add_flag("--echo", echo, "Score a ground-truth echo instead of a model");

  auto* render = app.add_subcommand("render", "Draw gt/prediction overlays from an eval sample dump");
  render->add_option("--samples", samples, "samples.jsonl written by eval")->required()->check(CLI::ExistingFile);
  render->add_option("--data", data, "Dataset manifest");
  render->add_option("--limit", limit, "Render at most this many samples (0 = all)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : 2;
  }
  if (*seed_opt) g.seed = seed;

  try {
    if (*gen) return cmd_gen_data(g);
    if (*train) return cmd_train(g, ta);
    if (*mine) return cmd_mine_pairs(g, ckpt, data);
    if (*infer) return cmd_infer(g, ckpt, image, bbox, tokens);
    if (*eval) return cmd_eval(g, ckpt, data, split, echo);
    if (*render) return cmd_render(g, samples, data, limit);
  } catch (const polytok::Error& e) {
    std::cerr << "error [" << e.code() << "]: " << e.what() << "\n";
    return exit_code_for(e.code());
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
