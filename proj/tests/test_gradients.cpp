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

#include "oracles.hpp"

namespace polytok {
namespace {

TEST(Gradients, NllAndDpoMatchCentralDifferences) {
  const auto r = oracle::run_gradient_oracle(17);
  Rng rng(0);
  EXPECT_EQ(r.nll.tensors_checked, tensors(init_params<double>(oracle::micro_config(Vocab().size()), rng)).size());
  EXPECT_LT(r.nll.worst_rel, 1e-5) << r.nll.worst_tensor;
  EXPECT_LT(r.dpo.worst_rel, 1e-5) << r.dpo.worst_tensor;
}

TEST(Gradients, FloatPrecisionWithinLooseTolerance) {
  // The same NLL check in 32-bit, against double central differences.
  const Vocab vocab;
  Rng rng(3);
  ModelParams<double> pd = init_params<double>(oracle::micro_config(vocab.size()), rng);
  oracle::randomize(pd, 4);
  const CropSample s = oracle::small_sample(5);
  ModelParams<float> pf = cast_params<float>(pd);
  ModelParams<float> gf = zeros_like(pf);
  const TokenSequence seq = format_sft(s, vocab);
  const ShiftedTargets st = shift_targets(seq.ids, seq.loss_mask);
  const float count = static_cast<float>(std::count(st.mask.begin(), st.mask.end(), true));
  std::vector<float> w(st.mask.size());
  for (std::size_t i = 0; i < w.size(); ++i) w[i] = st.mask[i] ? 1.0f / count : 0.0f;
  weighted_nll_and_grad<float>(pf, patchify<float>(s.image, pf.config), seq.ids, st.targets, w, gf, Trainable{});
  const ModelParams<double> ga = cast_params<double>(gf);
  const auto r = oracle::finite_difference_check(
      pd, ga, [&](const ModelParams<double>& q) { return oracle::sequence_nll(q, s, vocab); });
  EXPECT_LT(r.worst_rel, 1e-3) << r.worst_tensor;
}

TEST(Gradients, FrozenGroupsReceiveNothing) {
  const Vocab vocab;
  Rng rng(8);
  ModelParams<double> p = init_params<double>(oracle::micro_config(vocab.size()), rng);
  oracle::randomize(p, 9);
  const CropSample s = oracle::small_sample(10);
  ModelParams<double> g = zeros_like(p);
  const TokenSequence seq = format_sft(s, vocab);
  const ShiftedTargets st = shift_targets(seq.ids, seq.loss_mask);
  std::vector<double> w(st.mask.size());
  for (std::size_t i = 0; i < w.size(); ++i) w[i] = st.mask[i] ? 1.0 : 0.0;
  Trainable tr;
  tr.encoder = false;
  weighted_nll_and_grad<double>(p, patchify<double>(s.image, p.config), seq.ids, st.targets, w, g, tr);
  for (const auto& t : tensors(g)) {
    if (t.group == ParamGroup::kEncoder) {
      EXPECT_EQ(t.tensor->norm(), 0.0) << t.name;
    } else {
      EXPECT_GT(t.tensor->norm(), 0.0) << t.name;
    }
  }
}

TEST(Gradients, ProjectorJacobian) {
  const Vocab vocab;
  Rng rng(12);
  ModelParams<double> p = init_params<double>(oracle::micro_config(vocab.size()), rng);
  oracle::randomize(p, 13);
  std::mt19937_64 r(14);
  std::normal_distribution<double> n(0.0, 1.0);
  Matrix<double> f(3, p.config.enc_dim);
  for (Eigen::Index i = 0; i < f.size(); ++i) f.data()[i] = n(r);
  Matrix<double> probe(3, p.config.lm_dim);
  for (Eigen::Index i = 0; i < probe.size(); ++i) probe.data()[i] = n(r);
  // Gradient of <probe, project(f)> w.r.t. f, by the chain rule through the
  // cached projector versus central differences.
  VisionCache<double> c;
  project_one<double>(p, f, &c);
  const Matrix<double> dact = probe * p.proj_out.w.transpose();
  const Matrix<double> dpre = detail::gelu_backward(dact, c.hidden_pre);
  const Matrix<double> analytic = dpre * p.proj_in.w.transpose();
  Matrix<double> numeric(f.rows(), f.cols());
  for (Eigen::Index i = 0; i < f.size(); ++i) {
    Matrix<double> up = f, down = f;
    up.data()[i] += 1e-5;
    down.data()[i] -= 1e-5;
    numeric.data()[i] = ((project_one<double>(p, up, nullptr).array() * probe.array()).sum() -
                         (project_one<double>(p, down, nullptr).array() * probe.array()).sum()) /
                        2e-5;
  }
  EXPECT_LT((analytic - numeric).norm() / numeric.norm(), 1e-3);
}

}  // namespace
}  // namespace polytok
