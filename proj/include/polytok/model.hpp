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
#include <cmath>
#include <cstdint>
#include <limits>
#include <random>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Dense>
#include <json.hpp>

#include "polytok/error.hpp"
#include "polytok/geometry.hpp"
#include "polytok/image.hpp"

namespace polytok {

template <typename T>
using Matrix = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

enum class ParamGroup { kEncoder, kPosEmbed, kProjector, kLm };

inline const char* group_name(ParamGroup g) {
  switch (g) {
    case ParamGroup::kEncoder: return "encoder";
    case ParamGroup::kPosEmbed: return "pos_embed";
    case ParamGroup::kProjector: return "projector";
    case ParamGroup::kLm: return "lm";
  }
  return "?";
}

struct Trainable {
  bool encoder = true;
  bool pos_embed = true;
  bool projector = true;
  bool lm = true;

  bool has(ParamGroup g) const noexcept {
    switch (g) {
      case ParamGroup::kEncoder: return encoder;
      case ParamGroup::kPosEmbed: return pos_embed;
      case ParamGroup::kProjector: return projector;
      case ParamGroup::kLm: return lm;
    }
    return false;
  }
  // Anything upstream of the language model needs a gradient.
  bool needs_vision_grad() const noexcept { return encoder || pos_embed || projector; }
};

struct ModelConfig {
  int image_size = 128;
  int patch = 16;
  int channels = 1;
  int enc_layers = 2;
  int enc_dim = 128;
  int enc_heads = 4;
  int lm_layers = 4;
  int lm_dim = 128;
  int lm_heads = 4;
  int vocab = 0;
  int max_seq_len = 160;
  bool use_pos_embed = true;

  int grid() const noexcept { return image_size / patch; }
  int num_patches() const noexcept { return grid() * grid(); }
  int patch_dim() const noexcept { return patch * patch * channels; }
  // Rows of the text position table; text token t >= 1 uses row t - 1.
  int text_positions() const noexcept { return max_seq_len - num_patches(); }

  void validate() const {
    auto fail = [](const std::string& what) { throw Error("bad-model-config", what); };
    if (patch <= 0 || image_size % patch != 0) fail("image_size must be divisible by patch");
    if (channels != 1) fail("only single-channel images are supported");
    if (enc_layers < 0 || lm_layers < 1) fail("layer counts");
    if (enc_dim <= 0 || enc_heads <= 0 || enc_dim % enc_heads != 0) fail("enc_dim must divide by enc_heads");
    if (lm_dim <= 0 || lm_heads <= 0 || lm_dim % lm_heads != 0) fail("lm_dim must divide by lm_heads");
    if (vocab <= 0) fail("vocab must be set");
    if (max_seq_len <= num_patches()) fail("max_seq_len must exceed the vision token count");
  }

  friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

inline nlohmann::json model_config_to_json(const ModelConfig& c) {
  return {{"image_size", c.image_size}, {"patch", c.patch},         {"channels", c.channels},
          {"enc_layers", c.enc_layers}, {"enc_dim", c.enc_dim},     {"enc_heads", c.enc_heads},
          {"lm_layers", c.lm_layers},   {"lm_dim", c.lm_dim},       {"lm_heads", c.lm_heads},
          {"vocab", c.vocab},           {"max_seq_len", c.max_seq_len}, {"use_pos_embed", c.use_pos_embed}};
}

inline ModelConfig model_config_from_json(const nlohmann::json& j) {
  ModelConfig c;
  c.image_size = j.value("image_size", c.image_size);
  c.patch = j.value("patch", c.patch);
  c.channels = j.value("channels", c.channels);
  c.enc_layers = j.value("enc_layers", c.enc_layers);
  c.enc_dim = j.value("enc_dim", c.enc_dim);
  c.enc_heads = j.value("enc_heads", c.enc_heads);
  c.lm_layers = j.value("lm_layers", c.lm_layers);
  c.lm_dim = j.value("lm_dim", c.lm_dim);
  c.lm_heads = j.value("lm_heads", c.lm_heads);
  c.vocab = j.value("vocab", c.vocab);
  c.max_seq_len = j.value("max_seq_len", c.max_seq_len);
  c.use_pos_embed = j.value("use_pos_embed", c.use_pos_embed);
  return c;
}

// y = x * w + b, with w stored in x out.
template <typename T>
struct Linear {
  Matrix<T> w;
  Matrix<T> b;  // 1 x out
};

template <typename T>
struct Norm {
  Matrix<T> g;  // 1 x d
  Matrix<T> b;  // 1 x d
};

// Pre-norm transformer block.
template <typename T>
struct Block {
  Norm<T> ln1;
  Linear<T> qkv;
  Linear<T> proj;
  Norm<T> ln2;
  Linear<T> fc;
  Linear<T> out;
};

template <typename T>
struct ModelParams {
  ModelConfig config;
  // vision encoder
  Linear<T> patch;
  std::vector<Block<T>> enc_blocks;
  Matrix<T> pos_embed;  // num_patches x enc_dim, empty when disabled
  // projector
  Linear<T> proj_in;
  Linear<T> proj_out;
  // language model
  Matrix<T> tok_embed;  // vocab x lm_dim
  Matrix<T> text_pos;   // text_positions x lm_dim
  std::vector<Block<T>> lm_blocks;
  Norm<T> lm_norm;
  Linear<T> head;  // lm_dim x vocab
};

template <typename T>
struct TensorRef {
  std::string name;
  ParamGroup group;
  Matrix<T>* tensor;
};

namespace detail {

template <typename T, typename P>
void push_block(std::vector<TensorRef<T>>& out, const std::string& prefix, ParamGroup g, P& b) {
  out.push_back({prefix + ".ln1.g", g, &b.ln1.g});
  out.push_back({prefix + ".ln1.b", g, &b.ln1.b});
  out.push_back({prefix + ".attn.qkv.w", g, &b.qkv.w});
  out.push_back({prefix + ".attn.qkv.b", g, &b.qkv.b});
  out.push_back({prefix + ".attn.proj.w", g, &b.proj.w});
  out.push_back({prefix + ".attn.proj.b", g, &b.proj.b});
  out.push_back({prefix + ".ln2.g", g, &b.ln2.g});
  out.push_back({prefix + ".ln2.b", g, &b.ln2.b});
  out.push_back({prefix + ".mlp.fc.w", g, &b.fc.w});
  out.push_back({prefix + ".mlp.fc.b", g, &b.fc.b});
  out.push_back({prefix + ".mlp.out.w", g, &b.out.w});
  out.push_back({prefix + ".mlp.out.b", g, &b.out.b});
}

}  // namespace detail

// Flat, stable-ordered list of every parameter tensor. Two ModelParams of the
// same config yield index-aligned lists.
template <typename T>
std::vector<TensorRef<T>> tensors(ModelParams<T>& p) {
  using G = ParamGroup;
  std::vector<TensorRef<T>> out;
  out.push_back({"encoder.patch.w", G::kEncoder, &p.patch.w});
  out.push_back({"encoder.patch.b", G::kEncoder, &p.patch.b});
  for (std::size_t i = 0; i < p.enc_blocks.size(); ++i) {
    detail::push_block(out, "encoder.blocks." + std::to_string(i), G::kEncoder, p.enc_blocks[i]);
  }
  if (p.config.use_pos_embed) out.push_back({"pos_embed", G::kPosEmbed, &p.pos_embed});
  out.push_back({"projector.in.w", G::kProjector, &p.proj_in.w});
  out.push_back({"projector.in.b", G::kProjector, &p.proj_in.b});
  out.push_back({"projector.out.w", G::kProjector, &p.proj_out.w});
  out.push_back({"projector.out.b", G::kProjector, &p.proj_out.b});
  out.push_back({"lm.tok_embed", G::kLm, &p.tok_embed});
  out.push_back({"lm.text_pos", G::kLm, &p.text_pos});
  for (std::size_t i = 0; i < p.lm_blocks.size(); ++i) {
    detail::push_block(out, "lm.blocks." + std::to_string(i), G::kLm, p.lm_blocks[i]);
  }
  out.push_back({"lm.norm.g", G::kLm, &p.lm_norm.g});
  out.push_back({"lm.norm.b", G::kLm, &p.lm_norm.b});
  out.push_back({"lm.head.w", G::kLm, &p.head.w});
  out.push_back({"lm.head.b", G::kLm, &p.head.b});
  return out;
}

template <typename T>
std::vector<TensorRef<T>> tensors(const ModelParams<T>& p) {
  return tensors(const_cast<ModelParams<T>&>(p));
}

namespace detail {

template <typename T>
Matrix<T> truncated_normal(Eigen::Index rows, Eigen::Index cols, double stddev, Rng& rng) {
  std::normal_distribution<double> dist(0.0, stddev);
  Matrix<T> m(rows, cols);
  for (Eigen::Index i = 0; i < m.size(); ++i) {
    double v = dist(rng);
    while (std::abs(v) > 2.0 * stddev) v = dist(rng);
    m.data()[i] = static_cast<T>(v);
  }
  return m;
}

template <typename T>
Linear<T> init_linear(int in, int out, double stddev, Rng& rng) {
  return {truncated_normal<T>(in, out, stddev, rng), Matrix<T>::Zero(1, out)};
}

template <typename T>
Norm<T> init_norm(int d) {
  return {Matrix<T>::Ones(1, d), Matrix<T>::Zero(1, d)};
}

template <typename T>
Block<T> init_block(int d, double stddev, Rng& rng) {
  Block<T> b;
  b.ln1 = init_norm<T>(d);
  b.qkv = init_linear<T>(d, 3 * d, stddev, rng);
  b.proj = init_linear<T>(d, d, stddev, rng);
  b.ln2 = init_norm<T>(d);
  b.fc = init_linear<T>(d, 4 * d, stddev, rng);
  b.out = init_linear<T>(4 * d, d, stddev, rng);
  return b;
}

}  // namespace detail

// Truncated-normal (std 0.02) weights, zero biases, unit norm gains, zero
// positional table.
inline constexpr double kPosEmbedInitStd = 0.1;

template <typename T>
ModelParams<T> init_params(const ModelConfig& cfg, Rng& rng, double stddev = 0.02) {
  cfg.validate();
  ModelParams<T> p;
  p.config = cfg;
  p.patch = detail::init_linear<T>(cfg.patch_dim(), cfg.enc_dim, stddev, rng);
  for (int i = 0; i < cfg.enc_layers; ++i) p.enc_blocks.push_back(detail::init_block<T>(cfg.enc_dim, stddev, rng));
  p.proj_in = detail::init_linear<T>(cfg.enc_dim, cfg.lm_dim, stddev, rng);
  p.proj_out = detail::init_linear<T>(cfg.lm_dim, cfg.lm_dim, stddev, rng);
  p.tok_embed = detail::truncated_normal<T>(cfg.vocab, cfg.lm_dim, stddev, rng);
  p.text_pos = detail::truncated_normal<T>(cfg.text_positions(), cfg.lm_dim, stddev, rng);
  for (int i = 0; i < cfg.lm_layers; ++i) p.lm_blocks.push_back(detail::init_block<T>(cfg.lm_dim, stddev, rng));
  p.lm_norm = detail::init_norm<T>(cfg.lm_dim);
  p.head = detail::init_linear<T>(cfg.lm_dim, cfg.vocab, stddev, rng);
  // Drawn last so every other tensor matches the use_pos_embed=false init.
  if (cfg.use_pos_embed) {
    p.pos_embed = detail::truncated_normal<T>(cfg.num_patches(), cfg.enc_dim, kPosEmbedInitStd, rng);
  }
  return p;
}

template <typename T>
ModelParams<T> zeros_like(const ModelParams<T>& p) {
  ModelParams<T> z = p;
  for (auto& t : tensors(z)) t.tensor->setZero();
  return z;
}

template <typename To, typename From>
ModelParams<To> cast_params(const ModelParams<From>& p) {
  Rng rng(0);
  ModelParams<To> out = init_params<To>(p.config, rng);
  auto src = tensors(p);
  auto dst = tensors(out);
  for (std::size_t i = 0; i < src.size(); ++i) *dst[i].tensor = src[i].tensor->template cast<To>();
  return out;
}

template <typename T>
bool all_finite(const ModelParams<T>& p) {
  for (const auto& t : tensors(p)) {
    if (!t.tensor->allFinite()) return false;
  }
  return true;
}

// FNV-1a over the raw bytes of every tensor in a group.
template <typename T>
std::uint64_t group_checksum(const ModelParams<T>& p, ParamGroup g) {
  std::uint64_t h = 1469598103934665603ull;
  for (const auto& t : tensors(p)) {
    if (t.group != g) continue;
    const auto* bytes = reinterpret_cast<const unsigned char*>(t.tensor->data());
    for (std::size_t i = 0; i < static_cast<std::size_t>(t.tensor->size()) * sizeof(T); ++i) {
      h = (h ^ bytes[i]) * 1099511628211ull;
    }
  }
  return h;
}

// ---------------------------------------------------------------------------
// Layer kernels

namespace detail {

inline constexpr double kNormEps = 1e-5;

template <typename T>
struct NormCache {
  Matrix<T> xhat;
  Eigen::Matrix<T, Eigen::Dynamic, 1> rstd;
};

template <typename T>
Matrix<T> linear_forward(const Matrix<T>& x, const Linear<T>& l) {
  Matrix<T> y(x.rows(), l.w.cols());
  y.noalias() = x * l.w;
  y.rowwise() += l.b.row(0);
  return y;
}

// Accumulates weight gradients into g (when non-null) and returns dx.
template <typename T>
Matrix<T> linear_backward(const Matrix<T>& x, const Linear<T>& l, const Matrix<T>& dy, Linear<T>* g,
                          bool want_dx = true) {
  if (g != nullptr) {
    g->w.noalias() += x.transpose() * dy;
    g->b += dy.colwise().sum();
  }
  Matrix<T> dx;
  if (want_dx) {
    dx.resize(dy.rows(), l.w.rows());
    dx.noalias() = dy * l.w.transpose();
  }
  return dx;
}

template <typename T>
Matrix<T> layernorm_forward(const Matrix<T>& x, const Norm<T>& n, NormCache<T>* cache) {
  const Eigen::Index rows = x.rows();
  const Eigen::Index d = x.cols();
  Matrix<T> xhat(rows, d);
  Eigen::Matrix<T, Eigen::Dynamic, 1> rstd(rows);
  for (Eigen::Index r = 0; r < rows; ++r) {
    const T mean = x.row(r).mean();
    const T var = (x.row(r).array() - mean).square().mean();
    rstd(r) = T(1) / std::sqrt(var + static_cast<T>(kNormEps));
    xhat.row(r) = (x.row(r).array() - mean) * rstd(r);
  }
  Matrix<T> y = (xhat.array().rowwise() * n.g.row(0).array()).matrix();
  y.rowwise() += n.b.row(0);
  if (cache != nullptr) {
    cache->xhat = std::move(xhat);
    cache->rstd = std::move(rstd);
  }
  return y;
}

template <typename T>
Matrix<T> layernorm_backward(const Matrix<T>& dy, const Norm<T>& n, const NormCache<T>& cache, Norm<T>* g) {
  if (g != nullptr) {
    g->g += (dy.array() * cache.xhat.array()).colwise().sum().matrix();
    g->b += dy.colwise().sum();
  }
  const Eigen::Index d = dy.cols();
  Matrix<T> dxhat = (dy.array().rowwise() * n.g.row(0).array()).matrix();
  Matrix<T> dx(dy.rows(), d);
  for (Eigen::Index r = 0; r < dy.rows(); ++r) {
    const T mean_d = dxhat.row(r).mean();
    const T mean_dx = (dxhat.row(r).array() * cache.xhat.row(r).array()).mean();
    dx.row(r) = (dxhat.row(r).array() - mean_d - cache.xhat.row(r).array() * mean_dx) * cache.rstd(r);
  }
  return dx;
}

template <typename T>
Matrix<T> gelu_forward(const Matrix<T>& x) {
  constexpr T k = static_cast<T>(0.7978845608028654);
  const auto a = x.array();
  return (static_cast<T>(0.5) * a * (T(1) + (k * (a + static_cast<T>(0.044715) * a.cube())).tanh())).matrix();
}

template <typename T>
Matrix<T> gelu_backward(const Matrix<T>& dy, const Matrix<T>& x) {
  constexpr T k = static_cast<T>(0.7978845608028654);
  const auto a = x.array();
  const auto t = (k * (a + static_cast<T>(0.044715) * a.cube())).tanh().eval();
  const auto grad = static_cast<T>(0.5) * (T(1) + t) +
                    static_cast<T>(0.5) * a * (T(1) - t.square()) * k *
                        (T(1) + static_cast<T>(3 * 0.044715) * a.square());
  return (dy.array() * grad).matrix();
}

// Rows [0, prefix) attend to each other freely; later rows are causal.
inline bool attention_allowed(Eigen::Index i, Eigen::Index j, Eigen::Index prefix) {
  return j < prefix || j <= i;
}

template <typename T>
void softmax_rows_masked(Matrix<T>& s, Eigen::Index prefix) {
  const Eigen::Index n = s.rows();
  for (Eigen::Index i = 0; i < n; ++i) {
    const Eigen::Index limit = std::max(i + 1, prefix);  // first disallowed column
    auto row = s.row(i);
    const Eigen::Index cols = std::min(limit, s.cols());
    auto live = row.head(cols);
    const T mx = live.maxCoeff();
    live = (live.array() - mx).exp().matrix();
    live /= live.sum();
    row.tail(s.cols() - cols).setZero();
  }
}

template <typename T>
Matrix<T> attention_forward(const Matrix<T>& qkv, int heads, Eigen::Index prefix, std::vector<Matrix<T>>* probs) {
  const Eigen::Index n = qkv.rows();
  const Eigen::Index d = qkv.cols() / 3;
  const Eigen::Index dh = d / heads;
  const T scale = T(1) / std::sqrt(static_cast<T>(dh));
  Matrix<T> out(n, d);
  if (probs != nullptr) probs->resize(heads);
  Matrix<T> s(n, n);
  for (int h = 0; h < heads; ++h) {
    const auto q = qkv.middleCols(h * dh, dh);
    const auto k = qkv.middleCols(d + h * dh, dh);
    const auto v = qkv.middleCols(2 * d + h * dh, dh);
    s.noalias() = q * k.transpose();
    s *= scale;
    softmax_rows_masked(s, prefix);
    out.middleCols(h * dh, dh).noalias() = s * v;
    if (probs != nullptr) (*probs)[h] = s;
  }
  return out;
}

template <typename T>
Matrix<T> attention_backward(const Matrix<T>& dout, const Matrix<T>& qkv, const std::vector<Matrix<T>>& probs,
                             int heads) {
  const Eigen::Index n = qkv.rows();
  const Eigen::Index d = qkv.cols() / 3;
  const Eigen::Index dh = d / heads;
  const T scale = T(1) / std::sqrt(static_cast<T>(dh));
  Matrix<T> dqkv(n, 3 * d);
  Matrix<T> dp(n, n);
  for (int h = 0; h < heads; ++h) {
    const auto q = qkv.middleCols(h * dh, dh);
    const auto k = qkv.middleCols(d + h * dh, dh);
    const auto v = qkv.middleCols(2 * d + h * dh, dh);
    const auto dout_h = dout.middleCols(h * dh, dh);
    const Matrix<T>& p = probs[h];
    dp.noalias() = dout_h * v.transpose();
    dqkv.middleCols(2 * d + h * dh, dh).noalias() = p.transpose() * dout_h;
    // softmax backward: ds = p * (dp - rowsum(dp * p))
    const Eigen::Matrix<T, Eigen::Dynamic, 1> dot = (dp.array() * p.array()).rowwise().sum();
    Matrix<T> ds = (p.array() * (dp.array().colwise() - dot.array())).matrix() * scale;
    dqkv.middleCols(h * dh, dh).noalias() = ds * k;
    dqkv.middleCols(d + h * dh, dh).noalias() = ds.transpose() * q;
  }
  return dqkv;
}

template <typename T>
struct BlockCache {
  Matrix<T> x;
  NormCache<T> ln1;
  Matrix<T> a;
  Matrix<T> qkv;
  std::vector<Matrix<T>> probs;
  Matrix<T> att;
  NormCache<T> ln2;
  Matrix<T> m;
  Matrix<T> f;
  Matrix<T> g;
};

template <typename T>
Matrix<T> block_forward(const Matrix<T>& x, const Block<T>& b, int heads, Eigen::Index prefix,
                        BlockCache<T>* cache) {
  NormCache<T> ln1;
  Matrix<T> a = layernorm_forward(x, b.ln1, cache ? &ln1 : nullptr);
  Matrix<T> qkv = linear_forward(a, b.qkv);
  std::vector<Matrix<T>> probs;
  Matrix<T> att = attention_forward(qkv, heads, prefix, cache ? &probs : nullptr);
  Matrix<T> h = x + linear_forward(att, b.proj);
  NormCache<T> ln2;
  Matrix<T> m = layernorm_forward(h, b.ln2, cache ? &ln2 : nullptr);
  Matrix<T> f = linear_forward(m, b.fc);
  Matrix<T> g = gelu_forward(f);
  Matrix<T> y = h + linear_forward(g, b.out);
  if (cache != nullptr) {
    cache->x = x;
    cache->ln1 = std::move(ln1);
    cache->a = std::move(a);
    cache->qkv = std::move(qkv);
    cache->probs = std::move(probs);
    cache->att = std::move(att);
    cache->ln2 = std::move(ln2);
    cache->m = std::move(m);
    cache->f = std::move(f);
    cache->g = std::move(g);
  }
  return y;
}

template <typename T>
Matrix<T> block_backward(const Matrix<T>& dy, const Block<T>& b, int heads, const BlockCache<T>& c, Block<T>* g) {
  Matrix<T> dg = linear_backward(c.g, b.out, dy, g ? &g->out : nullptr);
  Matrix<T> df = gelu_backward(dg, c.f);
  Matrix<T> dm = linear_backward(c.m, b.fc, df, g ? &g->fc : nullptr);
  Matrix<T> dh = dy + layernorm_backward(dm, b.ln2, c.ln2, g ? &g->ln2 : nullptr);
  Matrix<T> datt = linear_backward(c.att, b.proj, dh, g ? &g->proj : nullptr);
  Matrix<T> dqkv = attention_backward(datt, c.qkv, c.probs, heads);
  Matrix<T> da = linear_backward(c.a, b.qkv, dqkv, g ? &g->qkv : nullptr);
  return dh + layernorm_backward(da, b.ln1, c.ln1, g ? &g->ln1 : nullptr);
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Vision path

// Non-overlapping patches, row-major patch order, values scaled to [0,1].
template <typename T>
Matrix<T> patchify(const Image& img, const ModelConfig& cfg) {
  if (img.width != cfg.image_size || img.height != cfg.image_size) {
    throw Error("shape-mismatch", "image is " + std::to_string(img.width) + "x" + std::to_string(img.height) +
                                      ", model expects " + std::to_string(cfg.image_size));
  }
  const int g = cfg.grid();
  const int p = cfg.patch;
  Matrix<T> out(cfg.num_patches(), cfg.patch_dim());
  for (int py = 0; py < g; ++py) {
    for (int px = 0; px < g; ++px) {
      const int row = py * g + px;
      for (int y = 0; y < p; ++y) {
        for (int x = 0; x < p; ++x) {
          out(row, y * p + x) = static_cast<T>(img.at(px * p + x, py * p + y)) / static_cast<T>(255);
        }
      }
    }
  }
  return out;
}

template <typename T>
struct VisionCache {
  Matrix<T> patches;
  Matrix<T> embedded;
  std::vector<detail::BlockCache<T>> blocks;
  Matrix<T> features;
  Matrix<T> hidden_pre;
  Matrix<T> hidden;
};

template <typename T>
Matrix<T> encode_patches(const ModelParams<T>& p, const Matrix<T>& patches, VisionCache<T>* cache) {
  const ModelConfig& cfg = p.config;
  if (patches.rows() != cfg.num_patches() || patches.cols() != cfg.patch_dim()) {
    throw Error("shape-mismatch", "patch matrix does not match config");
  }
  Matrix<T> x = detail::linear_forward(patches, p.patch);
  if (cache != nullptr) {
    cache->patches = patches;
    cache->embedded = x;
    cache->blocks.resize(p.enc_blocks.size());
  }
  for (std::size_t i = 0; i < p.enc_blocks.size(); ++i) {
    x = detail::block_forward(x, p.enc_blocks[i], cfg.enc_heads, x.rows(), cache ? &cache->blocks[i] : nullptr);
  }
  if (cfg.use_pos_embed) x += p.pos_embed;
  return x;
}

// batch x num_patches x enc_dim
template <typename T>
std::vector<Matrix<T>> encode_image(const ModelParams<T>& p, std::span<const Image> images) {
  std::vector<Matrix<T>> out;
  out.reserve(images.size());
  for (const Image& img : images) out.push_back(encode_patches<T>(p, patchify<T>(img, p.config), nullptr));
  return out;
}

template <typename T>
Matrix<T> project_one(const ModelParams<T>& p, const Matrix<T>& features, VisionCache<T>* cache) {
  if (features.cols() != p.config.enc_dim) throw Error("shape-mismatch", "feature width != enc_dim");
  Matrix<T> pre = detail::linear_forward(features, p.proj_in);
  Matrix<T> act = detail::gelu_forward(pre);
  Matrix<T> out = detail::linear_forward(act, p.proj_out);
  if (cache != nullptr) {
    cache->features = features;
    cache->hidden_pre = std::move(pre);
    cache->hidden = std::move(act);
  }
  return out;
}

// batch x num_patches x lm_dim
template <typename T>
std::vector<Matrix<T>> project(const ModelParams<T>& p, std::span<const Matrix<T>> features) {
  std::vector<Matrix<T>> out;
  out.reserve(features.size());
  for (const auto& f : features) out.push_back(project_one<T>(p, f, nullptr));
  return out;
}

// ---------------------------------------------------------------------------
// Language model

template <typename T>
struct LmCache {
  std::vector<int> ids;
  std::vector<detail::BlockCache<T>> blocks;
  detail::NormCache<T> norm;
  Matrix<T> normed;  // final-norm output on the logit rows
};

// Logits for every text position: row t predicts text token t + 1. Row 0
// (the [IMG] slot) is read from the last vision token.
template <typename T>
Matrix<T> lm_forward(const ModelParams<T>& p, const Matrix<T>& vision, std::span<const int> ids, LmCache<T>* cache) {
  const ModelConfig& cfg = p.config;
  const Eigen::Index nv = cfg.num_patches();
  if (vision.rows() != nv || vision.cols() != cfg.lm_dim) throw Error("shape-mismatch", "vision tokens");
  if (ids.empty()) throw Error("shape-mismatch", "empty text");
  const Eigen::Index t_len = static_cast<Eigen::Index>(ids.size());
  const Eigen::Index n = nv + t_len - 1;
  if (n > cfg.max_seq_len) {
    throw Error("sequence-overflow", std::to_string(n) + " > max_seq_len " + std::to_string(cfg.max_seq_len));
  }
  Matrix<T> x(n, cfg.lm_dim);
  x.topRows(nv) = vision;
  for (Eigen::Index t = 1; t < t_len; ++t) {
    const int id = ids[static_cast<std::size_t>(t)];
    if (id < 0 || id >= cfg.vocab) throw Error("bad-token", std::to_string(id));
    x.row(nv + t - 1) = p.tok_embed.row(id) + p.text_pos.row(t - 1);
  }
  if (cache != nullptr) {
    cache->ids.assign(ids.begin(), ids.end());
    cache->blocks.resize(p.lm_blocks.size());
  }
  for (std::size_t i = 0; i < p.lm_blocks.size(); ++i) {
    x = detail::block_forward(x, p.lm_blocks[i], cfg.lm_heads, nv, cache ? &cache->blocks[i] : nullptr);
  }
  Matrix<T> tail = x.bottomRows(t_len);
  Matrix<T> normed = detail::layernorm_forward(tail, p.lm_norm, cache ? &cache->norm : nullptr);
  Matrix<T> logits = detail::linear_forward(normed, p.head);
  if (cache != nullptr) cache->normed = std::move(normed);
  return logits;
}

// batch x T x V
template <typename T>
std::vector<Matrix<T>> forward(const ModelParams<T>& p, std::span<const Matrix<T>> vision_tokens,
                               std::span<const std::vector<int>> text_ids) {
  if (vision_tokens.size() != text_ids.size()) throw Error("shape-mismatch", "batch sizes differ");
  std::vector<Matrix<T>> out;
  out.reserve(text_ids.size());
  for (std::size_t i = 0; i < text_ids.size(); ++i) out.push_back(lm_forward<T>(p, vision_tokens[i], text_ids[i], nullptr));
  return out;
}

template <typename T>
Eigen::Matrix<T, 1, Eigen::Dynamic> log_softmax_row(const Matrix<T>& logits, Eigen::Index r) {
  const T mx = logits.row(r).maxCoeff();
  const T lse = mx + std::log((logits.row(r).array() - mx).exp().sum());
  return (logits.row(r).array() - lse).matrix();
}

// Aligns a token sequence with its logits: target[t] = ids[t+1],
// mask[t] = loss_mask[t+1]; the final row has no target.
struct ShiftedTargets {
  std::vector<int> targets;
  std::vector<bool> mask;
};

inline ShiftedTargets shift_targets(std::span<const int> ids, const std::vector<bool>& loss_mask) {
  ShiftedTargets s;
  s.targets.assign(ids.size(), -1);
  s.mask.assign(ids.size(), false);
  for (std::size_t t = 0; t + 1 < ids.size(); ++t) {
    s.targets[t] = ids[t + 1];
    s.mask[t] = loss_mask[t + 1];
  }
  return s;
}

// Mean over masked positions of -log softmax(logits)[target].
template <typename T>
T nll_loss(std::span<const Matrix<T>> logits, std::span<const std::vector<int>> targets,
           std::span<const std::vector<bool>> mask) {
  T total = 0;
  std::size_t count = 0;
  for (std::size_t b = 0; b < logits.size(); ++b) {
    for (Eigen::Index t = 0; t < logits[b].rows(); ++t) {
      if (!mask[b][static_cast<std::size_t>(t)]) continue;
      total -= log_softmax_row(logits[b], t)(targets[b][static_cast<std::size_t>(t)]);
      ++count;
    }
  }
  if (count == 0) throw Error("empty-loss", "loss mask selects no positions");
  return total / static_cast<T>(count);
}

// Everything needed to run one sequence forward and backward.
template <typename T>
struct SequenceCache {
  VisionCache<T> vision;
  Matrix<T> vision_tokens;
  LmCache<T> lm;
  Matrix<T> logits;
};

template <typename T>
Matrix<T> forward_cached(const ModelParams<T>& p, const Matrix<T>& patches, std::span<const int> ids,
                         SequenceCache<T>& c, const Trainable& trainable) {
  const bool keep_encoder = trainable.encoder;
  Matrix<T> features = encode_patches<T>(p, patches, keep_encoder ? &c.vision : nullptr);
  c.vision_tokens = project_one(p, features, &c.vision);
  c.logits = lm_forward(p, c.vision_tokens, ids, &c.lm);
  return c.logits;
}

// Backpropagates dlogits through the cached forward pass, accumulating into
// the gradient tensors of trainable groups only.
template <typename T>
void backward_cached(const ModelParams<T>& p, const SequenceCache<T>& c, const Matrix<T>& dlogits,
                     ModelParams<T>& grads, const Trainable& tr) {
  const ModelConfig& cfg = p.config;
  const Eigen::Index nv = cfg.num_patches();
  const Eigen::Index t_len = dlogits.rows();
  Matrix<T> dnormed = detail::linear_backward(c.lm.normed, p.head, dlogits, tr.lm ? &grads.head : nullptr);
  Matrix<T> dtail = detail::layernorm_backward(dnormed, p.lm_norm, c.lm.norm, tr.lm ? &grads.lm_norm : nullptr);
  const Eigen::Index n = nv + t_len - 1;
  Matrix<T> dx = Matrix<T>::Zero(n, cfg.lm_dim);
  dx.bottomRows(t_len) = dtail;
  for (std::size_t i = p.lm_blocks.size(); i-- > 0;) {
    dx = detail::block_backward(dx, p.lm_blocks[i], cfg.lm_heads, c.lm.blocks[i], tr.lm ? &grads.lm_blocks[i] : nullptr);
  }
  if (tr.lm) {
    for (Eigen::Index t = 1; t < t_len; ++t) {
      grads.tok_embed.row(c.lm.ids[static_cast<std::size_t>(t)]) += dx.row(nv + t - 1);
      grads.text_pos.row(t - 1) += dx.row(nv + t - 1);
    }
  }
  if (!tr.needs_vision_grad()) return;
  const Matrix<T> dvision = dx.topRows(nv);
  Matrix<T> dact = detail::linear_backward(c.vision.hidden, p.proj_out, dvision, tr.projector ? &grads.proj_out : nullptr);
  Matrix<T> dpre = detail::gelu_backward(dact, c.vision.hidden_pre);
  const bool upstream = tr.encoder || (tr.pos_embed && cfg.use_pos_embed);
  Matrix<T> dfeat = detail::linear_backward(c.vision.features, p.proj_in, dpre, tr.projector ? &grads.proj_in : nullptr,
                                            upstream);
  if (!upstream) return;
  if (cfg.use_pos_embed && tr.pos_embed) grads.pos_embed += dfeat;
  if (!tr.encoder) return;
  Matrix<T> de = dfeat;
  for (std::size_t i = p.enc_blocks.size(); i-- > 0;) {
    de = detail::block_backward(de, p.enc_blocks[i], cfg.enc_heads, c.vision.blocks[i], &grads.enc_blocks[i]);
  }
  detail::linear_backward(c.vision.patches, p.patch, de, &grads.patch, false);
}

// Weighted token objective  L = -sum_t w[t] * log p(target[t] | <= t).
// Accumulates dL/dparams into grads; returns L.
template <typename T>
T weighted_nll_and_grad(const ModelParams<T>& p, const Matrix<T>& patches, std::span<const int> ids,
                        std::span<const int> targets, std::span<const T> weights, ModelParams<T>& grads,
                        const Trainable& tr) {
  SequenceCache<T> c;
  forward_cached(p, patches, ids, c, tr);
  Matrix<T> dlogits = Matrix<T>::Zero(c.logits.rows(), c.logits.cols());
  T loss = 0;
  for (Eigen::Index t = 0; t < c.logits.rows(); ++t) {
    const T w = weights[static_cast<std::size_t>(t)];
    if (w == T(0)) continue;
    const int target = targets[static_cast<std::size_t>(t)];
    const auto lp = log_softmax_row(c.logits, t);
    loss -= w * lp(target);
    dlogits.row(t) = lp.array().exp() * w;
    dlogits(t, target) -= w;
  }
  backward_cached(p, c, dlogits, grads, tr);
  return loss;
}

// Sum of log-probabilities of answer_ids after vision + prompt_ids.
template <typename T>
T sequence_logprob(const ModelParams<T>& p, const Matrix<T>& patches, std::span<const int> prompt_ids,
                   std::span<const int> answer_ids) {
  std::vector<int> ids(prompt_ids.begin(), prompt_ids.end());
  ids.insert(ids.end(), answer_ids.begin(), answer_ids.end());
  const Matrix<T> vision = project_one<T>(p, encode_patches<T>(p, patches, nullptr), nullptr);
  const Matrix<T> logits = lm_forward<T>(p, vision, ids, nullptr);
  T total = 0;
  const std::size_t start = prompt_ids.size();
  for (std::size_t t = start; t < ids.size(); ++t) {
    total += log_softmax_row(logits, static_cast<Eigen::Index>(t - 1))(ids[t]);
  }
  return total;
}

template <typename T>
T sequence_logprob(const ModelParams<T>& p, const Image& image, std::span<const int> prompt_ids,
                   std::span<const int> answer_ids) {
  return sequence_logprob(p, patchify<T>(image, p.config), prompt_ids, answer_ids);
}

// ---------------------------------------------------------------------------
// Incremental decoding

template <typename T>
struct DecodeState {
  std::vector<Matrix<T>> k;  // per layer, max_seq_len x lm_dim
  std::vector<Matrix<T>> v;
  Eigen::Index length = 0;    // rows filled
  Eigen::Index text_len = 0;  // text tokens consumed, including [IMG]
};

// Runs vision + prompt and returns the logits row for the next token.
template <typename T>
Matrix<T> prefill(const ModelParams<T>& p, const Matrix<T>& vision, std::span<const int> prompt_ids,
                  DecodeState<T>& state) {
  const ModelConfig& cfg = p.config;
  LmCache<T> cache;
  const Matrix<T> logits = lm_forward(p, vision, prompt_ids, &cache);
  const Eigen::Index n = cfg.num_patches() + static_cast<Eigen::Index>(prompt_ids.size()) - 1;
  state.k.assign(p.lm_blocks.size(), Matrix<T>(cfg.max_seq_len, cfg.lm_dim));
  state.v.assign(p.lm_blocks.size(), Matrix<T>(cfg.max_seq_len, cfg.lm_dim));
  for (std::size_t l = 0; l < p.lm_blocks.size(); ++l) {
    state.k[l].topRows(n) = cache.blocks[l].qkv.middleCols(cfg.lm_dim, cfg.lm_dim);
    state.v[l].topRows(n) = cache.blocks[l].qkv.middleCols(2 * cfg.lm_dim, cfg.lm_dim);
  }
  state.length = n;
  state.text_len = static_cast<Eigen::Index>(prompt_ids.size());
  return logits.bottomRows(1);
}

// Appends one token and returns the logits row for the token after it.
template <typename T>
Matrix<T> decode_step(const ModelParams<T>& p, int id, DecodeState<T>& state) {
  const ModelConfig& cfg = p.config;
  if (state.length + 1 > cfg.max_seq_len) throw Error("sequence-overflow", "decode past max_seq_len");
  if (id < 0 || id >= cfg.vocab) throw Error("bad-token", std::to_string(id));
  const Eigen::Index d = cfg.lm_dim;
  const int heads = cfg.lm_heads;
  const Eigen::Index dh = d / heads;
  const T scale = T(1) / std::sqrt(static_cast<T>(dh));
  const Eigen::Index row = state.length;
  Matrix<T> x = p.tok_embed.row(id) + p.text_pos.row(state.text_len - 1);
  Matrix<T> scores(1, row + 1);
  for (std::size_t l = 0; l < p.lm_blocks.size(); ++l) {
    const Block<T>& b = p.lm_blocks[l];
    const Matrix<T> a = detail::layernorm_forward(x, b.ln1, static_cast<detail::NormCache<T>*>(nullptr));
    const Matrix<T> qkv = detail::linear_forward(a, b.qkv);
    state.k[l].row(row) = qkv.middleCols(d, d);
    state.v[l].row(row) = qkv.middleCols(2 * d, d);
    Matrix<T> att(1, d);
    for (int h = 0; h < heads; ++h) {
      const auto q = qkv.middleCols(h * dh, dh);
      const auto keys = state.k[l].block(0, h * dh, row + 1, dh);
      const auto vals = state.v[l].block(0, h * dh, row + 1, dh);
      scores.noalias() = q * keys.transpose();
      scores *= scale;
      const T mx = scores.maxCoeff();
      scores = (scores.array() - mx).exp().matrix();
      scores /= scores.sum();
      att.middleCols(h * dh, dh).noalias() = scores * vals;
    }
    x += detail::linear_forward(att, b.proj);
    const Matrix<T> m = detail::layernorm_forward(x, b.ln2, static_cast<detail::NormCache<T>*>(nullptr));
    x += detail::linear_forward(detail::gelu_forward(detail::linear_forward(m, b.fc)), b.out);
  }
  state.length += 1;
  state.text_len += 1;
  const Matrix<T> normed = detail::layernorm_forward(x, p.lm_norm, static_cast<detail::NormCache<T>*>(nullptr));
  return detail::linear_forward(normed, p.head);
}

template <typename T>
int argmax_row(const Matrix<T>& logits) {
  Eigen::Index best = 0;
  logits.row(0).maxCoeff(&best);
  return static_cast<int>(best);
}

// Greedy decoding for a batch. Each output stops at (and includes) its first
// end token; the loop ends once every sample has ended or spent max_new.
template <typename T>
std::vector<std::vector<int>> generate(const ModelParams<T>& p, std::span<const Image> images,
                                       std::span<const int> prompt_ids, int max_new, int eos_id) {
  if (max_new < 1) throw Error("bad-budget", "max_new must be >= 1");
  const std::size_t batch = images.size();
  std::vector<std::vector<int>> out(batch);
  std::vector<DecodeState<T>> states(batch);
  std::vector<Matrix<T>> next(batch);
  std::vector<bool> active(batch, true);
  for (std::size_t b = 0; b < batch; ++b) {
    const Matrix<T> vision = project_one<T>(p, encode_patches<T>(p, patchify<T>(images[b], p.config), nullptr), nullptr);
    next[b] = prefill(p, vision, prompt_ids, states[b]);
  }
  for (int step = 0; step < max_new; ++step) {
    bool any = false;
    for (std::size_t b = 0; b < batch; ++b) {
      if (!active[b]) continue;
      const int id = argmax_row(next[b]);
      out[b].push_back(id);
      const bool budget_left = step + 1 < max_new && states[b].length + 1 <= p.config.max_seq_len;
      if (id == eos_id || !budget_left) {
        active[b] = false;
        continue;
      }
      next[b] = decode_step(p, id, states[b]);
      any = true;
    }
    if (!any) break;
  }
  return out;
}

}  // namespace polytok
