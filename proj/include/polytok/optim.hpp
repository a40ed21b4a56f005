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

#include <cmath>
#include <cstdint>

#include "polytok/model.hpp"

namespace polytok {

// Linear warm-up from 0 over ceil(warmup_ratio * total) steps, then cosine
// decay to 0 at `total`.
struct LrSchedule {
  double peak = 0.0;
  std::int64_t total = 1;
  std::int64_t warmup = 0;

  LrSchedule(double peak_lr, std::int64_t total_steps, double warmup_ratio)
      : peak(peak_lr),
        total(std::max<std::int64_t>(total_steps, 1)),
        warmup(static_cast<std::int64_t>(std::ceil(warmup_ratio * static_cast<double>(total_steps)))) {}

  double at(std::int64_t step) const {
    if (warmup > 0 && step <= warmup) return peak * static_cast<double>(step) / static_cast<double>(warmup);
    if (step >= total) return 0.0;
    const double span = static_cast<double>(total - warmup);
    const double progress = static_cast<double>(step - warmup) / span;
    return 0.5 * peak * (1.0 + std::cos(M_PI * progress));
  }
};

struct AdamWConfig {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.01;
};

// Decoupled weight decay Adam. Frozen groups are never touched, not even by
// decay. Decay applies to matrices only (biases and norm vectors are exempt).
template <typename T>
class AdamW {
 public:
  AdamW(const ModelParams<T>& like, AdamWConfig cfg) : cfg_(cfg), m_(zeros_like(like)), v_(zeros_like(like)) {}

  void step(ModelParams<T>& params, const ModelParams<T>& grads, double lr, const Trainable& trainable) {
    ++t_;
    const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
    auto p = tensors(params);
    auto g = tensors(grads);
    auto m = tensors(m_);
    auto v = tensors(v_);
    const T b1 = static_cast<T>(cfg_.beta1);
    const T b2 = static_cast<T>(cfg_.beta2);
    for (std::size_t i = 0; i < p.size(); ++i) {
      if (!trainable.has(p[i].group)) continue;
      auto& mi = *m[i].tensor;
      auto& vi = *v[i].tensor;
      const auto& gi = *g[i].tensor;
      mi = b1 * mi + (T(1) - b1) * gi;
      vi = b2 * vi + (T(1) - b2) * gi.cwiseProduct(gi);
      auto& w = *p[i].tensor;
      if (cfg_.weight_decay > 0.0 && w.rows() > 1) w *= static_cast<T>(1.0 - lr * cfg_.weight_decay);
      const T step_size = static_cast<T>(lr / bc1);
      const T denom_scale = static_cast<T>(1.0 / std::sqrt(bc2));
      w.array() -= step_size * mi.array() / (vi.array().sqrt() * denom_scale + static_cast<T>(cfg_.eps));
    }
  }

  std::int64_t steps() const noexcept { return t_; }

 private:
  AdamWConfig cfg_;
  ModelParams<T> m_;
  ModelParams<T> v_;
  std::int64_t t_ = 0;
};

// Global L2 norm over trainable gradients; rescales them in place when above
// max_norm. Returns the pre-clip norm.
template <typename T>
double clip_grad_norm(ModelParams<T>& grads, const Trainable& trainable, double max_norm) {
  double sq = 0.0;
  for (const auto& t : tensors(grads)) {
    if (trainable.has(t.group)) sq += static_cast<double>(t.tensor->squaredNorm());
  }
  const double norm = std::sqrt(sq);
  if (max_norm > 0.0 && norm > max_norm) {
    const T scale = static_cast<T>(max_norm / (norm + 1e-12));
    for (auto& t : tensors(grads)) {
      if (trainable.has(t.group)) *t.tensor *= scale;
    }
  }
  return norm;
}

}  // namespace polytok
