#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "dgc/arith_data.hpp"
#include "dgc/train.hpp"
#include "dgc/transformer.hpp"

using namespace dgc;

namespace {

ModelConfig tiny(TokenizerMode mode = TokenizerMode::multi_digit) {
  ModelConfig c;
  c.n_layers = 1;
  c.d_model = 8;
  c.d_mlp = 32;
  c.n_heads = 2;
  c.context_len = 32;
  c.seed = 5;
  c.tokenizer = mode;
  return c;
}

ModelConfig small() {
  ModelConfig c;
  c.n_layers = 3;
  c.d_model = 16;
  c.d_mlp = 64;
  c.n_heads = 4;
  c.context_len = 24;
  c.seed = 9;
  return c;
}

struct GradCheck {
  std::size_t checked = 0, failed = 0;
  double worst = 0;
};

// Central differences over every parameter; relative error is taken against
// max(|analytic|, |numeric|, floor) so exact zeros compare absolutely.
GradCheck gradient_check(const ModelConfig& c, double h, double floor) {
  auto m = Model<double>::random(c);
  // Unit-scale embeddings: at the 0.02 init a step of h is large relative to
  // the LayerNorm input spread and truncation error dominates.
  std::mt19937_64 rng(c.seed + 1);
  std::normal_distribution<double> normal;
  for (const auto& t : m.layout.manifest)
    if (t.name == "tok_emb" || t.name == "pos_emb")
      for (std::size_t i = 0; i < t.size(); ++i) m.params[t.offset + i] = normal(rng);
  std::vector<TrainingExample> ex;
  for (Operator op : {Operator::add, Operator::sub})
    for (const auto& p : generate_simple_dataset(op, 3, 17)) ex.push_back(make_example(m.tokenizer, p));
  std::vector<const TrainingExample*> ptrs;
  for (const auto& e : ex) ptrs.push_back(&e);
  const auto b = build_batch(ptrs, c.context_len);
  ForwardCache<double> cache;
  auto loss = [&] {
    forward(m, b.batch, b.out_rows, cache);
    return cross_entropy(cache, std::span<const Target>(b.targets));
  };
  loss();
  Buffer<double> g(m.params.size(), 0.0);
  backward(m, b.batch, cache, std::span<const Target>(b.targets), g);
  GradCheck r;
  for (std::size_t i = 0; i < m.params.size(); ++i) {
    const double o = m.params[i];
    m.params[i] = o + h;
    const double up = loss();
    m.params[i] = o - h;
    const double dn = loss();
    m.params[i] = o;
    const double fd = (up - dn) / (2 * h);
    const double rel = std::abs(fd - g[i]) / std::max({std::abs(fd), std::abs(g[i]), floor});
    r.worst = std::max(r.worst, rel);
    r.failed += rel >= 1e-4;
    ++r.checked;
  }
  return r;
}

std::vector<int> prompt_tokens(const Model<float>& m, int a, int b) {
  return m.tokenizer.encode(make_prompt(Operator::add, a, b).render());
}

}  // namespace

TEST(Transformer, GradientMatchesFiniteDifferences) {
  const auto r = gradient_check(tiny(), 1e-3, 1e-6);
  EXPECT_EQ(r.failed, 0u) << "worst relative error " << r.worst << " over " << r.checked;
  EXPECT_GT(r.checked, 7000u);
}

TEST(Transformer, GradientMatchesFiniteDifferencesSingleDigit) {
  // three targets per example, two of them after teacher-forced answer digits
  const auto r = gradient_check(tiny(TokenizerMode::single_digit), 1e-3, 1e-6);
  EXPECT_EQ(r.failed, 0u) << "worst relative error " << r.worst;
}

TEST(Transformer, SoftmaxSumsToOne) {
  const auto m = Model<float>::random(small());
  for (int a : {123, 456, 701}) {
    const auto r = forward_record(m, prompt_tokens(m, a, 212), false);
    double s = 0;
    for (float p : r.probs) s += p;
    EXPECT_NEAR(s, 1.0, 1e-6);
  }
}

TEST(Transformer, ZeroParamsGiveUniformOutput) {
  Model<float> m(small());
  const auto r = forward_record(m, prompt_tokens(m, 123, 456), false);
  const float u = 1.0f / static_cast<float>(m.vocab_size());
  for (float p : r.probs) EXPECT_FLOAT_EQ(p, u);
}

TEST(Transformer, PrefixSharingMatchesSeparateRuns) {
  const auto m = Model<float>::random(small());
  const std::vector<std::vector<int>> seqs{prompt_tokens(m, 123, 456), prompt_tokens(m, 123, 466),
                                           prompt_tokens(m, 321, 111)};
  const auto batch = PrefixBatch::build(seqs, m.config.context_len);
  EXPECT_LT(batch.rows(), seqs[0].size() * 3);
  std::vector<int> outs;
  for (std::size_t s = 0; s < seqs.size(); ++s) outs.push_back(batch.final_row(s));
  ForwardCache<float> cache;
  forward(m, batch, outs, cache);
  for (std::size_t s = 0; s < seqs.size(); ++s) {
    const auto r = forward_record(m, seqs[s], false);
    for (std::size_t v = 0; v < r.logits.size(); ++v)
      EXPECT_NEAR(cache.logits(static_cast<Eigen::Index>(s), static_cast<Eigen::Index>(v)),
                  r.logits[v], 1e-5);
  }
}

TEST(Transformer, EmptyPlanIsIdentity) {
  const auto m = Model<float>::random(small());
  const auto base = prompt_tokens(m, 123, 456);
  const auto src = forward_record(m, prompt_tokens(m, 123, 562), true);
  const auto plain = forward_record(m, base, false);
  PatchPlan empty;
  EXPECT_EQ(forward_with_patch(m, base, src, empty).logits, plain.logits);
  PatchPlan zero_neurons;
  zero_neurons.entries.push_back({1, std::vector<int>{}});
  EXPECT_EQ(forward_with_patch(m, base, src, zero_neurons).logits, plain.logits);
}

TEST(Transformer, SelfPatchIsIdentity) {
  const auto m = Model<float>::random(small());
  const auto base = prompt_tokens(m, 123, 456);
  const auto self = forward_record(m, base, true);
  for (Site site : {Site::mlp_out, Site::attn_out, Site::mlp_hidden, Site::block_out}) {
    PatchPlan all;
    all.site = site;
    for (int l = 0; l < m.config.n_layers; ++l) all.entries.push_back({l, std::nullopt});
    EXPECT_EQ(forward_with_patch(m, base, self, all).logits, self.logits) << to_string(site);
  }
}

TEST(Transformer, BlockOutPatchCopiesResidual) {
  const auto m = Model<float>::random(small());
  const auto base = prompt_tokens(m, 123, 456);
  const auto src = forward_record(m, prompt_tokens(m, 123, 562), true);
  PatchPlan p;
  p.site = Site::block_out;
  p.entries.push_back({1, std::nullopt});
  const auto r = forward_with_patch(m, base, src, p, true);
  const auto a = r.site(Site::block_out, 1), b = src.site(Site::block_out, 1);
  for (std::size_t i = 0; i < a.size(); ++i) EXPECT_EQ(a[i], b[i]);
  EXPECT_NE(r.logits, forward_record(m, base, false).logits);
}

TEST(Transformer, PatchIsIdempotent) {
  const auto m = Model<float>::random(small());
  const auto base = prompt_tokens(m, 123, 456);
  const auto src = forward_record(m, prompt_tokens(m, 123, 562), true);
  PatchPlan p;
  p.entries.push_back({0, std::vector<int>{1, 4, 9}});
  p.entries.push_back({2, std::vector<int>{0, 15}});
  const auto once = forward_with_patch(m, base, src, p, true);
  // patching again from the patched run's own record changes nothing
  const auto twice = forward_with_patch(m, base, once, p);
  EXPECT_EQ(once.logits, twice.logits);
  EXPECT_EQ(once.logits, forward_with_patch(m, base, src, p).logits);
}

TEST(Transformer, CaptureComposesResidual) {
  const auto m = Model<float>::random(small());
  const auto r = forward_record(m, prompt_tokens(m, 345, 222), true);
  const int D = m.config.d_model;
  for (int l = 0; l < m.config.n_layers; ++l)
    for (int i = 0; i < D; ++i)
      EXPECT_NEAR(r.resid_pre[l * D + i] + r.attn_out[l * D + i] + r.mlp_out[l * D + i],
                  r.block_out[l * D + i], 1e-5);
}

TEST(Transformer, PatchPlanValidation) {
  const auto c = small();
  PatchPlan p;
  p.entries.push_back({7, std::nullopt});
  EXPECT_THROW(p.validate(c), ModelError);
  PatchPlan q;
  q.entries.push_back({0, std::vector<int>{3}});
  q.entries.push_back({0, std::vector<int>{3}});
  EXPECT_THROW(q.validate(c), ModelError);
}

TEST(Transformer, ContextOverflowThrows) {
  auto c = small();
  c.context_len = 8;
  const auto m = Model<float>::random(c);
  EXPECT_THROW(forward_record(m, prompt_tokens(m, 123, 456), false), ModelError);
}
