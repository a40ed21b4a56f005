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
#include <cstring>
#include <filesystem>
#include <fstream>
#include <string>
#include <type_traits>

#include <json.hpp>

#include "polytok/error.hpp"
#include "polytok/model.hpp"

namespace polytok {

// Container layout:
//   8 bytes  magic "PLYTOKCK"
//   u32      format version
//   u64      header length
//   header   JSON: {config, dtype, meta, tensors: [{name, shape, dtype, offset, bytes}]}
//   payload  row-major tensor data, little-endian, in header order
inline constexpr char kCheckpointMagic[8] = {'P', 'L', 'Y', 'T', 'O', 'K', 'C', 'K'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

template <typename T>
constexpr const char* dtype_name() {
  if constexpr (std::is_same_v<T, float>) {
    return "f32";
  } else {
    static_assert(std::is_same_v<T, double>, "float or double only");
    return "f64";
  }
}

template <typename T>
struct Checkpoint {
  ModelParams<T> params;
  nlohmann::json meta;  // stage, lineage, anything the caller records
};

template <typename T>
void save_checkpoint(const std::filesystem::path& path, const ModelParams<T>& params,
                     const nlohmann::json& meta = nlohmann::json::object()) {
  nlohmann::json table = nlohmann::json::array();
  std::uint64_t offset = 0;
  for (const auto& t : tensors(params)) {
    const std::uint64_t bytes = static_cast<std::uint64_t>(t.tensor->size()) * sizeof(T);
    table.push_back({{"name", t.name},
                     {"group", group_name(t.group)},
                     {"shape", {t.tensor->rows(), t.tensor->cols()}},
                     {"dtype", dtype_name<T>()},
                     {"offset", offset},
                     {"bytes", bytes}});
    offset += bytes;
  }
  const nlohmann::json header{{"config", model_config_to_json(params.config)},
                              {"dtype", dtype_name<T>()},
                              {"meta", meta},
                              {"tensors", table}};
  const std::string text = header.dump();
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("io", "cannot open " + path.string() + " for writing");
  const std::uint32_t version = kCheckpointVersion;
  const std::uint64_t len = text.size();
  out.write(kCheckpointMagic, sizeof(kCheckpointMagic));
  out.write(reinterpret_cast<const char*>(&version), sizeof(version));
  out.write(reinterpret_cast<const char*>(&len), sizeof(len));
  out.write(text.data(), static_cast<std::streamsize>(text.size()));
  for (const auto& t : tensors(params)) {
    out.write(reinterpret_cast<const char*>(t.tensor->data()),
              static_cast<std::streamsize>(t.tensor->size() * sizeof(T)));
  }
  if (!out) throw Error("io", "write failed for " + path.string());
}

inline nlohmann::json read_checkpoint_header(std::ifstream& in, const std::filesystem::path& path) {
  char magic[8];
  in.read(magic, sizeof(magic));
  if (!in || std::memcmp(magic, kCheckpointMagic, sizeof(magic)) != 0) {
    throw Error("bad-checkpoint", path.string() + " is not a checkpoint");
  }
  std::uint32_t version = 0;
  std::uint64_t len = 0;
  in.read(reinterpret_cast<char*>(&version), sizeof(version));
  in.read(reinterpret_cast<char*>(&len), sizeof(len));
  if (!in || version != kCheckpointVersion) throw Error("bad-checkpoint", "unsupported format version");
  std::string text(len, '\0');
  in.read(text.data(), static_cast<std::streamsize>(len));
  if (!in) throw Error("bad-checkpoint", "truncated header");
  return nlohmann::json::parse(text);
}

inline nlohmann::json peek_checkpoint_meta(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("io", "cannot open " + path.string());
  return read_checkpoint_header(in, path).value("meta", nlohmann::json::object());
}

template <typename T>
Checkpoint<T> load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("io", "cannot open " + path.string());
  const nlohmann::json header = read_checkpoint_header(in, path);
  if (header.at("dtype").get<std::string>() != dtype_name<T>()) {
    throw Error("bad-checkpoint", "dtype " + header.at("dtype").get<std::string>() + " != " + dtype_name<T>());
  }
  Rng rng(0);
  Checkpoint<T> ck;
  ck.params = init_params<T>(model_config_from_json(header.at("config")), rng);
  ck.meta = header.value("meta", nlohmann::json::object());
  auto refs = tensors(ck.params);
  const auto& table = header.at("tensors");
  if (table.size() != refs.size()) throw Error("bad-checkpoint", "tensor count mismatch");
  for (std::size_t i = 0; i < refs.size(); ++i) {
    const auto& entry = table[i];
    if (entry.at("name").get<std::string>() != refs[i].name ||
        entry.at("shape")[0].get<Eigen::Index>() != refs[i].tensor->rows() ||
        entry.at("shape")[1].get<Eigen::Index>() != refs[i].tensor->cols()) {
      throw Error("bad-checkpoint", "tensor table mismatch at " + refs[i].name);
    }
    in.read(reinterpret_cast<char*>(refs[i].tensor->data()),
            static_cast<std::streamsize>(refs[i].tensor->size() * sizeof(T)));
  }
  if (!in) throw Error("bad-checkpoint", "truncated payload");
  return ck;
}

}  // namespace polytok
