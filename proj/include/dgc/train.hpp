#pragma once

// Next-token training on the result tokens of arithmetic prompts.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <functional>
#include <numeric>
#include <random>
#include <set>
#include <tuple>
#include <vector>

#include "dgc/arith_data.hpp"
#include "dgc/transformer.hpp"

namespace dgc {

struct TrainError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct TrainHyperParams {
  double lr = 3e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_eps = 1e-8;
  int batch_size = 64;
  int max_epochs = 100;
  std::size_t max_steps = 0;        // 0 = no cap
  double target_accuracy = 0.99;    // early stop on held-out accuracy
  double holdout_fraction = 0.05;
  std::size_t holdout_eval_max = 2000;
  std::size_t eval_every = 500;     // steps; an eval also runs at each epoch end
  std::uint64_t seed = 1;
  std::size_t warmup_steps = 0;     // linear ramp to lr
  bool cosine_decay = false;        // decay to lr_min over max_steps after warmup
  double lr_min = 0;
  double weight_decay = 0;          // decoupled (AdamW-style), scaled by the current lr
  double grad_clip = 0;             // global-norm clip; 0 = off

  double lr_at(std::size_t step) const {
    if (warmup_steps && step < warmup_steps)
      return lr * static_cast<double>(step + 1) / static_cast<double>(warmup_steps);
    if (cosine_decay && max_steps > warmup_steps) {
      const double f = std::min(1.0, static_cast<double>(step - warmup_steps) /
                                         static_cast<double>(max_steps - warmup_steps));
      return lr_min + 0.5 * (lr - lr_min) * (1 + std::cos(3.141592653589793 * f));
    }
    return lr;
  }
};

struct EvalPoint {
  std::size_t step = 0;
  int epoch = 0;
  double accuracy = 0;
};

struct TrainResult {
  Model<float> model;
  std::vector<float> loss_trace;  // one entry per optimizer step
  std::vector<EvalPoint> evals;
  std::vector<double> epoch_accuracy;
  double final_accuracy = 0;       // over every held-out problem, after training
  std::size_t heldout_size = 0;
  std::size_t steps = 0;
  bool early_stopped = false;
  double seconds = 0;
};

// Token sequence fed to the model plus (position, token) targets for the
// answer. single_digit answers are teacher-forced digit by digit.
struct TrainingExample {
  std::vector<int> tokens;
  std::vector<std::pair<int, int>> targets;
};

inline TrainingExample make_example(const Tokenizer& tok, const ArithmeticPrompt& p) {
  TrainingExample ex;
  ex.tokens = tok.encode(p.render());
  const auto answer = tok.answer_tokens(p.expected_result);
  int pos = static_cast<int>(ex.tokens.size()) - 1;
  for (std::size_t i = 0; i < answer.size(); ++i) {
    ex.targets.emplace_back(pos, answer[i]);
    if (i + 1 < answer.size()) {
      ex.tokens.push_back(answer[i]);
      ++pos;
    }
  }
  return ex;
}

class AdamOptimizer {
 public:
  AdamOptimizer(std::size_t n, const TrainHyperParams& hp)
      : hp_(hp), m_(n, 0.0f), v_(n, 0.0f) {}

  void step(Buffer<float>& params, const Buffer<float>& grad) {
    ++t_;
    const float b1 = static_cast<float>(hp_.beta1), b2 = static_cast<float>(hp_.beta2);
    const float c1 = static_cast<float>(1.0 - std::pow(hp_.beta1, t_));
    const float c2 = static_cast<float>(1.0 - std::pow(hp_.beta2, t_));
    const float lr = static_cast<float>(hp_.lr_at(static_cast<std::size_t>(t_ - 1))), eps = static_cast<float>(hp_.adam_eps);
    float scale = 1.0f;
    if (hp_.grad_clip > 0) {
      double sq = 0;
      for (float g : grad) sq += static_cast<double>(g) * g;
      const double norm = std::sqrt(sq);
      if (norm > hp_.grad_clip) scale = static_cast<float>(hp_.grad_clip / norm);
    }
    const float decay = 1.0f - lr * static_cast<float>(hp_.weight_decay);
    for (std::size_t i = 0; i < params.size(); ++i) {
      const float g = grad[i] * scale;
      m_[i] = b1 * m_[i] + (1 - b1) * g;
      v_[i] = b2 * v_[i] + (1 - b2) * g * g;
      params[i] = params[i] * decay - lr * (m_[i] / c1) / (std::sqrt(v_[i] / c2) + eps);
    }
  }

 private:
  TrainHyperParams hp_;
  Buffer<float> m_, v_;
  long t_ = 0;
};

struct BatchBuild {
  PrefixBatch batch;
  std::vector<Target> targets;
  std::vector<int> out_rows;
  std::vector<int> owner;  // example index per target
};

inline BatchBuild build_batch(std::span<const TrainingExample* const> examples, int context_len) {
  BatchBuild b;
  std::vector<std::vector<int>> seqs;
  seqs.reserve(examples.size());
  for (auto* e : examples) seqs.push_back(e->tokens);
  b.batch = PrefixBatch::build(seqs, context_len);
  for (std::size_t s = 0; s < examples.size(); ++s)
    for (auto [pos, tok] : examples[s]->targets) {
      const int row = b.batch.seq_rows[s][pos];
      b.targets.push_back({row, tok});
      b.out_rows.push_back(row);
      b.owner.push_back(static_cast<int>(s));
    }
  return b;
}

// Fraction of examples whose every answer token is the argmax prediction
// (equivalent to greedy decoding of the answer).
template <class S>
double answer_accuracy(const Model<S>& model, const std::vector<TrainingExample>& examples,
                       std::size_t chunk = 256) {
  if (examples.empty()) return 0;
  std::size_t correct = 0;
  ForwardCache<S> cache;
  for (std::size_t lo = 0; lo < examples.size(); lo += chunk) {
    const std::size_t hi = std::min(examples.size(), lo + chunk);
    std::vector<const TrainingExample*> ptrs;
    for (std::size_t i = lo; i < hi; ++i) ptrs.push_back(&examples[i]);
    const BatchBuild b = build_batch(ptrs, model.config.context_len);
    forward(model, b.batch, b.out_rows, cache);
    std::vector<char> ok(ptrs.size(), 1);
    for (std::size_t t = 0; t < b.targets.size(); ++t) {
      Eigen::Index arg;
      cache.logits.row(static_cast<Eigen::Index>(t)).maxCoeff(&arg);
      if (static_cast<int>(arg) != b.targets[t].token) ok[b.owner[t]] = 0;
    }
    for (char v : ok) correct += v;
  }
  return static_cast<double>(correct) / static_cast<double>(examples.size());
}

// Splits unique (operator, opA, opB) problems into train / held-out so that
// no held-out problem is ever trained on.
inline std::pair<std::vector<ArithmeticPrompt>, std::vector<ArithmeticPrompt>> split_holdout(
    const std::vector<ArithmeticPrompt>& data, double fraction, std::uint64_t seed) {
  using Key = std::tuple<int, int, int>;
  auto key = [](const ArithmeticPrompt& p) { return Key{static_cast<int>(p.op), p.a, p.b}; };
  std::vector<Key> keys;
  std::set<Key> seen;
  for (const auto& p : data)
    if (seen.insert(key(p)).second) keys.push_back(key(p));
  std::mt19937_64 rng(seed ^ 0x9e3779b97f4a7c15ull);
  std::shuffle(keys.begin(), keys.end(), rng);
  const std::size_t n_hold = static_cast<std::size_t>(std::floor(fraction * keys.size()));
  const std::set<Key> held(keys.begin(), keys.begin() + static_cast<std::ptrdiff_t>(n_hold));
  std::vector<ArithmeticPrompt> train, hold;
  std::set<Key> held_emitted;
  for (const auto& p : data) {
    if (held.count(key(p))) {
      if (held_emitted.insert(key(p)).second) hold.push_back(p);
    } else {
      train.push_back(p);
    }
  }
  return {std::move(train), std::move(hold)};
}

using TrainCallback = std::function<void(const EvalPoint&, float loss)>;

inline TrainResult train(const ModelConfig& config, const std::vector<ArithmeticPrompt>& dataset,
                         const TrainHyperParams& hp, const TrainCallback& on_eval = {}) {
  if (dataset.empty()) throw TrainError("training dataset is empty");
  const auto t_start = std::chrono::steady_clock::now();
  TrainResult res;
  res.model = Model<float>::random(config);
  const Tokenizer& tok = res.model.tokenizer;

  auto [train_set, hold_set] = split_holdout(dataset, hp.holdout_fraction, hp.seed);
  if (train_set.empty()) throw TrainError("no training examples left after the held-out split");
  std::vector<TrainingExample> train_ex, hold_ex;
  train_ex.reserve(train_set.size());
  for (const auto& p : train_set) train_ex.push_back(make_example(tok, p));
  for (std::size_t i = 0; i < hold_set.size() && i < hp.holdout_eval_max; ++i)
    hold_ex.push_back(make_example(tok, hold_set[i]));

  AdamOptimizer opt(res.model.params.size(), hp);
  Buffer<float> grad(res.model.params.size());
  ForwardCache<float> cache;
  std::mt19937_64 rng(hp.seed);
  std::vector<std::size_t> order(train_ex.size());
  std::iota(order.begin(), order.end(), 0);

  auto evaluate = [&](int epoch) {
    EvalPoint e{res.steps, epoch, answer_accuracy(res.model, hold_ex)};
    res.evals.push_back(e);
    res.final_accuracy = e.accuracy;
    if (on_eval) on_eval(e, res.loss_trace.empty() ? 0.0f : res.loss_trace.back());
    return e.accuracy;
  };

  bool stop = false;
  for (int epoch = 0; epoch < hp.max_epochs && !stop; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    for (std::size_t lo = 0; lo < order.size() && !stop; lo += hp.batch_size) {
      const std::size_t hi = std::min(order.size(), lo + static_cast<std::size_t>(hp.batch_size));
      std::vector<const TrainingExample*> ptrs;
      for (std::size_t i = lo; i < hi; ++i) ptrs.push_back(&train_ex[order[i]]);
      const BatchBuild b = build_batch(ptrs, config.context_len);
      forward(res.model, b.batch, b.out_rows, cache);
      const float loss = cross_entropy(cache, std::span<const Target>(b.targets));
      if (!std::isfinite(loss))
        throw TrainError("training diverged (non-finite loss) in epoch " + std::to_string(epoch) +
                         " at step " + std::to_string(res.steps));
      std::fill(grad.begin(), grad.end(), 0.0f);
      backward(res.model, b.batch, cache, std::span<const Target>(b.targets), grad);
      opt.step(res.model.params, grad);
      res.loss_trace.push_back(loss);
      ++res.steps;
      if (hp.max_steps && res.steps >= hp.max_steps) stop = true;
      if (hp.eval_every && res.steps % hp.eval_every == 0 && !hold_ex.empty() &&
          evaluate(epoch) >= hp.target_accuracy) {
        res.early_stopped = true;
        stop = true;
      }
    }
    if (!hold_ex.empty()) {
      const double acc = res.evals.empty() || res.evals.back().step != res.steps
                             ? evaluate(epoch)
                             : res.evals.back().accuracy;
      res.epoch_accuracy.push_back(acc);
      if (acc >= hp.target_accuracy && !res.early_stopped) {
        res.early_stopped = true;
        stop = true;
      }
    }
  }
  if (!hold_set.empty()) {
    std::vector<TrainingExample> all;
    all.reserve(hold_set.size());
    for (const auto& p : hold_set) all.push_back(make_example(tok, p));
    res.final_accuracy = answer_accuracy(res.model, all);
    res.heldout_size = all.size();
  }
  res.seconds =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - t_start).count();
  return res;
}

}  // namespace dgc
