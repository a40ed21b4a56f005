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

#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "polytok/error.hpp"
#include "polytok/geometry.hpp"
#include "polytok/synthdata.hpp"

namespace polytok {

inline constexpr std::string_view kInstruction =
    "Please extract the regular vector contour of the central building in the image, start from the "
    "left top corner and in clockwise.";

// Vocabulary layout: control tokens, instruction words, [x0]..[x(W-1)],
// [y0]..[y(H-1)]. Ids are a pure function of (W, H).
class Vocab {
 public:
  static constexpr int kPad = 0;
  static constexpr int kImg = 1;
  static constexpr int kBos = 2;
  static constexpr int kEos = 3;

  explicit Vocab(int width = kCropSize, int height = kCropSize) : width_(width), height_(height) {
    if (width < 1 || height < 1) throw Error("bad-vocab", "grid must be non-empty");
    for (const char* name : {"[PAD]", "[IMG]", "[BOS]", "[EOS]"}) add(name);
    word_begin_ = size();
    for (const std::string& w : split_words(kInstruction)) {
      if (!lookup_.contains(w)) add(w);
      instruction_ids_.push_back(lookup_.at(w));
    }
    x_begin_ = size();
    for (int i = 0; i < width; ++i) add("[x" + std::to_string(i) + "]");
    y_begin_ = size();
    for (int j = 0; j < height; ++j) add("[y" + std::to_string(j) + "]");
  }

  int size() const noexcept { return static_cast<int>(names_.size()); }
  int width() const noexcept { return width_; }
  int height() const noexcept { return height_; }
  int coordinate_token_count() const noexcept { return width_ + height_; }
  int word_count() const noexcept { return x_begin_ - word_begin_; }

  int x_token(int x) const {
    if (x < 0 || x >= width_) throw Error("coordinate-out-of-range", "x=" + std::to_string(x));
    return x_begin_ + x;
  }
  int y_token(int y) const {
    if (y < 0 || y >= height_) throw Error("coordinate-out-of-range", "y=" + std::to_string(y));
    return y_begin_ + y;
  }
  bool is_x(int id) const noexcept { return id >= x_begin_ && id < y_begin_; }
  bool is_y(int id) const noexcept { return id >= y_begin_ && id < size(); }
  bool is_coordinate(int id) const noexcept { return id >= x_begin_ && id < size(); }
  int value(int id) const { return is_x(id) ? id - x_begin_ : id - y_begin_; }

  const std::vector<int>& instruction_ids() const noexcept { return instruction_ids_; }
  const std::string& name(int id) const { return names_.at(static_cast<std::size_t>(id)); }

  // Bracket syntax: "[x85][y32]"; instruction words are space separated with
  // punctuation attached to the preceding word.
  std::string render(std::span<const int> ids) const {
    std::string out;
    bool prev_word = false;
    for (int id : ids) {
      const std::string& n = name(id);
      const bool word = id >= word_begin_ && id < x_begin_;
      if (word && prev_word && n != "," && n != ".") out += ' ';
      out += n;
      prev_word = word;
    }
    return out;
  }

  std::vector<int> parse(std::string_view text) const {
    std::vector<int> ids;
    std::size_t i = 0;
    while (i < text.size()) {
      const char c = text[i];
      if (c == ' ' || c == '\n' || c == '\t' || c == '\r') {
        ++i;
      } else if (c == '[') {
        const std::size_t close = text.find(']', i);
        if (close == std::string_view::npos) throw Error("bad-token-text", "unterminated '['");
        ids.push_back(id_of(text.substr(i, close - i + 1)));
        i = close + 1;
      } else if (c == ',' || c == '.') {
        ids.push_back(id_of(text.substr(i, 1)));
        ++i;
      } else {
        std::size_t j = i;
        while (j < text.size() && text[j] != ' ' && text[j] != '[' && text[j] != ',' && text[j] != '.' &&
               text[j] != '\n' && text[j] != '\t' && text[j] != '\r') {
          ++j;
        }
        ids.push_back(id_of(text.substr(i, j - i)));
        i = j;
      }
    }
    return ids;
  }

  int id_of(std::string_view name) const {
    auto it = lookup_.find(std::string(name));
    if (it == lookup_.end()) throw Error("unknown-token", std::string(name));
    return it->second;
  }

 private:
  static std::vector<std::string> split_words(std::string_view s) {
    std::vector<std::string> out;
    std::string cur;
    for (char c : s) {
      if (c == ' ' || c == ',' || c == '.') {
        if (!cur.empty()) out.push_back(cur);
        cur.clear();
        if (c != ' ') out.emplace_back(1, c);
      } else {
        cur += c;
      }
    }
    if (!cur.empty()) out.push_back(cur);
    return out;
  }

  void add(const std::string& name) {
    lookup_.emplace(name, size());
    names_.push_back(name);
  }

  int width_;
  int height_;
  int word_begin_ = 0;
  int x_begin_ = 0;
  int y_begin_ = 0;
  std::vector<std::string> names_;
  std::unordered_map<std::string, int> lookup_;
  std::vector<int> instruction_ids_;
};

struct TokenSequence {
  std::vector<int> ids;
  std::vector<bool> loss_mask;

  std::size_t size() const noexcept { return ids.size(); }
  void push(int id, bool in_loss) {
    ids.push_back(id);
    loss_mask.push_back(in_loss);
  }
};

struct PreferencePair {
  TokenSequence prompt;
  TokenSequence chosen;
  TokenSequence rejected;
  std::string sample_ref;
};

// [x][y] per vertex, then the first vertex again to close the ring.
inline std::vector<int> encode_polygon(const Polygon& p, const Vocab& vocab) {
  std::vector<int> ids;
  ids.reserve(2 * (p.size() + 1));
  for (const Point& v : p.vertices) {
    ids.push_back(vocab.x_token(v.x));
    ids.push_back(vocab.y_token(v.y));
  }
  if (!p.vertices.empty()) {
    ids.push_back(vocab.x_token(p[0].x));
    ids.push_back(vocab.y_token(p[0].y));
  }
  return ids;
}

inline Polygon decode_tokens(std::span<const int> ids, const Vocab& vocab) {
  Polygon raw;
  std::optional<int> pending_x;
  for (int id : ids) {
    if (id == Vocab::kEos) break;
    if (id == Vocab::kPad) continue;
    if (vocab.is_x(id)) {
      if (pending_x) throw Error("malformed-alternation", "two x tokens in a row");
      pending_x = vocab.value(id);
    } else if (vocab.is_y(id)) {
      if (!pending_x) throw Error("malformed-alternation", "y token without preceding x");
      raw.vertices.push_back({*pending_x, vocab.value(id)});
      pending_x.reset();
    } else {
      throw Error("malformed-alternation", "non-coordinate token " + vocab.name(id));
    }
  }
  if (pending_x) throw Error("malformed-alternation", "dangling x token");
  Polygon p = collapse_duplicates(raw);
  if (p.size() < 3) throw Error("too-few-vertices", std::to_string(p.size()) + " vertices after cleanup");
  return p;
}

struct DecodeResult {
  std::optional<Polygon> polygon;
  std::string error;  // error code when polygon is empty

  bool ok() const noexcept { return polygon.has_value(); }
};

inline DecodeResult try_decode(std::span<const int> ids, const Vocab& vocab) {
  try {
    return {decode_tokens(ids, vocab), {}};
  } catch (const Error& e) {
    return {std::nullopt, e.code()};
  }
}

inline TokenSequence format_pretrain(const CropSample& sample, const Vocab& vocab, int offset) {
  TokenSequence seq;
  seq.push(Vocab::kImg, false);
  for (int id : encode_polygon(rotate_start(sample.gt, offset), vocab)) seq.push(id, true);
  seq.push(Vocab::kEos, true);
  return seq;
}

// Random start vertex: the start-point shuffle of the pretraining stage.
inline TokenSequence format_pretrain(const CropSample& sample, const Vocab& vocab, Rng& rng) {
  std::uniform_int_distribution<int> pick(0, static_cast<int>(sample.gt.size()) - 1);
  return format_pretrain(sample, vocab, pick(rng));
}

// [IMG][BOS] + instruction words.
inline TokenSequence sft_prompt(const Vocab& vocab) {
  TokenSequence seq;
  seq.push(Vocab::kImg, false);
  seq.push(Vocab::kBos, false);
  for (int id : vocab.instruction_ids()) seq.push(id, false);
  return seq;
}

inline TokenSequence answer_sequence(const Polygon& p, const Vocab& vocab) {
  TokenSequence seq;
  for (int id : encode_polygon(p, vocab)) seq.push(id, true);
  seq.push(Vocab::kEos, true);
  return seq;
}

inline TokenSequence format_sft(const CropSample& sample, const Vocab& vocab) {
  TokenSequence seq = sft_prompt(vocab);
  const TokenSequence answer = answer_sequence(sample.gt, vocab);
  seq.ids.insert(seq.ids.end(), answer.ids.begin(), answer.ids.end());
  seq.loss_mask.insert(seq.loss_mask.end(), answer.loss_mask.begin(), answer.loss_mask.end());
  return seq;
}

inline PreferencePair format_dpo(const CropSample& sample, const Polygon& rejected, const Vocab& vocab) {
  PreferencePair pair;
  pair.prompt = sft_prompt(vocab);
  pair.chosen = answer_sequence(sample.gt, vocab);
  pair.rejected = answer_sequence(canonicalize(rejected), vocab);
  pair.sample_ref = sample.source_id;
  return pair;
}

}  // namespace polytok
