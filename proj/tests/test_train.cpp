#include <gtest/gtest.h>

#include <set>

#include "dgc/train.hpp"

using namespace dgc;

namespace {

ModelConfig tiny() {
  ModelConfig c;
  c.n_layers = 2;
  c.d_model = 16;
  c.d_mlp = 64;
  c.n_heads = 2;
  c.seed = 3;
  return c;
}

TrainHyperParams short_run() {
  TrainHyperParams hp;
  hp.batch_size = 16;
  hp.max_steps = 25;
  hp.eval_every = 10;
  hp.holdout_eval_max = 50;
  hp.lr = 1e-3;
  return hp;
}

std::vector<ArithmeticPrompt> data() {
  auto a = sample_no_carry_problems(Operator::add, 300, 1);
  auto s = sample_no_carry_problems(Operator::sub, 300, 2);
  a.insert(a.end(), s.begin(), s.end());
  return a;
}

}  // namespace

TEST(Train, DeterministicUnderSeed) {
  const auto d = data();
  const auto r1 = train(tiny(), d, short_run());
  const auto r2 = train(tiny(), d, short_run());
  ASSERT_EQ(r1.loss_trace.size(), 25u);
  EXPECT_EQ(r1.loss_trace, r2.loss_trace);
  EXPECT_EQ(r1.model.params, r2.model.params);
  auto hp = short_run();
  hp.seed = 99;
  EXPECT_NE(train(tiny(), d, hp).loss_trace, r1.loss_trace);
}

TEST(Train, LossDecreases) {
  auto hp = short_run();
  hp.max_steps = 120;
  const auto r = train(tiny(), data(), hp);
  double head = 0, tail = 0;
  for (int i = 0; i < 10; ++i) {
    head += r.loss_trace[i];
    tail += r.loss_trace[r.loss_trace.size() - 1 - i];
  }
  EXPECT_LT(tail, head);
}

TEST(Train, EmitsEvalsAndEpochAccuracy) {
  auto hp = short_run();
  hp.max_steps = 0;
  hp.max_epochs = 1;
  std::vector<EvalPoint> seen;
  const auto r = train(tiny(), data(), hp, [&](const EvalPoint& e, float) { seen.push_back(e); });
  EXPECT_EQ(r.epoch_accuracy.size(), 1u);
  EXPECT_FALSE(seen.empty());
  EXPECT_EQ(seen.size(), r.evals.size());
  EXPECT_EQ(r.heldout_size, 30u);
}

TEST(Train, HoldoutIsDisjointByProblem) {
  auto d = data();
  d.insert(d.end(), d.begin(), d.begin() + 100);  // duplicates
  const auto [tr, ho] = split_holdout(d, 0.1, 7);
  std::set<std::tuple<int, int, int>> train_keys;
  for (const auto& p : tr) train_keys.insert({static_cast<int>(p.op), p.a, p.b});
  for (const auto& p : ho) EXPECT_FALSE(train_keys.count({static_cast<int>(p.op), p.a, p.b}));
  EXPECT_EQ(ho.size(), 60u);
}

TEST(Train, AccuracyMatchesGreedyDecoding) {
  auto hp = short_run();
  hp.max_steps = 60;
  const auto r = train(tiny(), data(), hp);
  const auto probs = sample_no_carry_problems(Operator::add, 100, 5);
  std::vector<TrainingExample> ex;
  std::size_t correct = 0;
  for (const auto& p : probs) {
    ex.push_back(make_example(r.model.tokenizer, p));
    const auto rec = forward_record(r.model, r.model.tokenizer.encode(p.render()), false);
    correct += rec.argmax() == r.model.tokenizer.answer_token(p.expected_result);
  }
  EXPECT_DOUBLE_EQ(answer_accuracy(r.model, ex, 7), static_cast<double>(correct) / 100.0);
}

TEST(Train, DivergenceReportsEpoch) {
  auto hp = short_run();
  hp.lr = 1e30;
  try {
    train(tiny(), data(), hp);
    FAIL() << "expected divergence";
  } catch (const TrainError& e) {
    EXPECT_NE(std::string(e.what()).find("epoch 0"), std::string::npos);
  }
}

TEST(Train, EmptyDatasetRejected) {
  EXPECT_THROW(train(tiny(), {}, short_run()), TrainError);
}

TEST(Train, LearningRateSchedule) {
  TrainHyperParams hp;
  hp.lr = 1e-3;
  EXPECT_DOUBLE_EQ(hp.lr_at(0), 1e-3);
  hp.warmup_steps = 10;
  EXPECT_DOUBLE_EQ(hp.lr_at(0), 1e-4);
  EXPECT_DOUBLE_EQ(hp.lr_at(9), 1e-3);
  hp.cosine_decay = true;
  hp.max_steps = 110;
  EXPECT_DOUBLE_EQ(hp.lr_at(10), 1e-3);
  EXPECT_NEAR(hp.lr_at(60), 5e-4, 1e-12);
  EXPECT_NEAR(hp.lr_at(110), 0.0, 1e-12);
}

TEST(Train, ExamplesMaskToAnswer) {
  Tokenizer multi(TokenizerMode::multi_digit), single(TokenizerMode::single_digit);
  const auto p = make_prompt(Operator::add, 123, 456);
  const auto m = make_example(multi, p);
  ASSERT_EQ(m.targets.size(), 1u);
  EXPECT_EQ(m.targets[0].first, static_cast<int>(m.tokens.size()) - 1);
  EXPECT_EQ(m.targets[0].second, multi.id("579"));
  const auto s = make_example(single, p);
  ASSERT_EQ(s.targets.size(), 3u);
  EXPECT_EQ(single.token(s.targets[2].second), "9");
  EXPECT_EQ(single.token(s.tokens.back()), "7");
}
