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

#include <filesystem>
#include <fstream>

#include "polytok/config.hpp"

namespace polytok {
namespace {

std::string error_text(const nlohmann::json& j) {
  try {
    pipeline_config_from_json(j);
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), "bad-config");
    return e.what();
  }
  return "";
}

TEST(Config, EmptyObjectGivesDefaults) {
  const PipelineConfig c = pipeline_config_from_json(nlohmann::json::object());
  const PipelineConfig d;
  EXPECT_EQ(pipeline_config_to_json(c), pipeline_config_to_json(d));
  EXPECT_EQ(c.pretrain.trainable.encoder, false);
  EXPECT_EQ(c.dpo.trainable.encoder, true);
  EXPECT_EQ(c.pretrain.seed, c.seed);
}

TEST(Config, RoundTrip) {
  PipelineConfig c;
  c.seed = 9;
  c.counts = {7, 3, 2};
  c.model.lm_layers = 2;
  c.sft.lr = 1e-3;
  c.dpo.beta = 0.25;
  c.pretrain.trainable.pos_embed = false;
  c.mining.max_k = 2;
  const PipelineConfig back = pipeline_config_from_json(pipeline_config_to_json(c));
  EXPECT_EQ(pipeline_config_to_json(back), pipeline_config_to_json(c));
  EXPECT_EQ(back.dpo.seed, 9u);
  EXPECT_EQ(config_hash(back), config_hash(c));
}

TEST(Config, UnknownFieldsReportedWithPath) {
  const std::string msg = error_text({{"sft", {{"lr", 1e-4}, {"learning_rate", 1}}}, {"bogus", true}});
  EXPECT_NE(msg.find("$.sft.learning_rate: unknown field"), std::string::npos) << msg;
  EXPECT_NE(msg.find("$.bogus: unknown field"), std::string::npos) << msg;
}

TEST(Config, WrongTypesReportedTogether) {
  const std::string msg = error_text({{"seed", "abc"}, {"model", {{"lm_dim", 3.5}}}, {"pretrain", {{"batch_size", -1}}}});
  EXPECT_NE(msg.find("$.seed: wrong type"), std::string::npos) << msg;
  EXPECT_NE(msg.find("$.model.lm_dim: wrong type"), std::string::npos) << msg;
  EXPECT_NE(msg.find("$.pretrain.batch_size: must be > 0"), std::string::npos) << msg;
}

TEST(Config, BetaOnlyForPreferenceStage) {
  EXPECT_NE(error_text({{"sft", {{"beta", 0.1}}}}).find("$.sft.beta: unknown field"), std::string::npos);
  EXPECT_EQ(pipeline_config_from_json({{"dpo", {{"beta", 0.1}}}}).dpo.beta, 0.1);
}

TEST(Config, InvalidModelShape) {
  const std::string msg = error_text({{"model", {{"lm_dim", 30}, {"lm_heads", 4}}}});
  EXPECT_NE(msg.find("$.model"), std::string::npos) << msg;
}

TEST(Config, ParseErrorCarriesLine) {
  const auto path = std::filesystem::temp_directory_path() / "polytok_bad_config.json";
  {
    std::ofstream out(path);
    out << "{\n  \"seed\": 3,\n  \"sft\": {\"lr\": 1e-4,,}\n}\n";
  }
  try {
    load_pipeline_config(path);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), "bad-config");
    EXPECT_NE(std::string(e.what()).find(path.string() + ":3:"), std::string::npos) << e.what();
  }
}

TEST(Config, HashTracksContent) {
  PipelineConfig a, b;
  EXPECT_EQ(config_hash(a), config_hash(b));
  EXPECT_EQ(config_hash(a).size(), 16u);
  b.sft.epochs = 2;
  EXPECT_NE(config_hash(a), config_hash(b));
}

}  // namespace
}  // namespace polytok
