// Acceptance run: one PASS/FAIL line per criterion. Exits non-zero when any
// criterion fails.
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <numeric>
#include <random>
#include <set>

#include <sys/wait.h>

#include <CLI11.hpp>

#include "dgc/interventions.hpp"
#include "dgc/lda.hpp"
#include "dgc/pipeline.hpp"
#include "dgc/train.hpp"

using namespace dgc;
namespace fs = std::filesystem;

namespace {

int failures = 0;

void report(const std::string& name, bool pass, const std::string& detail) {
  std::cout << (pass ? "PASS " : "FAIL ") << name << ": " << detail << std::endl;
  failures += !pass;
}

void info(const std::string& name, const std::string& detail) {
  std::cout << "INFO " << name << ": " << detail << std::endl;
}

std::string g(double v) {
  std::ostringstream os;
  os << v;
  return os.str();
}

// ---------------------------------------------------------------- gradient

void gradient_oracle() {
  ModelConfig c;
  c.n_layers = 1;
  c.d_model = 8;
  c.d_mlp = 32;
  c.n_heads = 2;
  c.context_len = 32;
  c.seed = 5;
  auto m = Model<double>::random(c);
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
  Buffer<double> grad(m.params.size(), 0.0);
  backward(m, b.batch, cache, std::span<const Target>(b.targets), grad);
  const double h = 1e-3;
  double worst = 0;
  std::size_t bad = 0;
  for (std::size_t i = 0; i < m.params.size(); ++i) {
    const double o = m.params[i];
    m.params[i] = o + h;
    const double up = loss();
    m.params[i] = o - h;
    const double dn = loss();
    m.params[i] = o;
    const double fd = (up - dn) / (2 * h);
    const double rel = std::abs(fd - grad[i]) / std::max({std::abs(fd), std::abs(grad[i]), 1e-6});
    worst = std::max(worst, rel);
    bad += rel >= 1e-4;
  }
  report("gradient_oracle", bad == 0,
         std::to_string(m.params.size()) + " params, worst relative error " + g(worst) +
             " (limit 1e-4)");
}

// ---------------------------------------------------------------- Fisher

double naive_fisher(const std::vector<double>& x, const std::vector<std::string>& labels) {
  std::map<std::string, std::vector<double>> by;
  for (std::size_t i = 0; i < x.size(); ++i) by[labels[i]].push_back(x[i]);
  std::erase_if(by, [](const auto& kv) { return kv.second.size() < 2; });
  double n = 0, total = 0;
  for (auto& [k, v] : by)
    for (double e : v) total += e, n += 1;
  const double mu = total / n;
  double num = 0, den = 0;
  for (auto& [k, v] : by) {
    const double m = std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
    double var = 0;
    for (double e : v) var += (e - m) * (e - m);
    num += static_cast<double>(v.size()) * (m - mu) * (m - mu);
    den += var;
  }
  return num / den;
}

void fisher_oracles(const fs::path& work) {
  {
    Eigen::MatrixXd x(4, 1);
    x << 0, 2, 4, 6;
    const double f = fisher_scores_matrix(x, {"a", "a", "b", "b"})(0);
    report("fisher_hand_case", f == 4.0, "{0,2}/{4,6} -> " + g(f) + " (expected 4.0)");
  }
  {
    const auto dir = work / "fisher_oracle";
    fs::create_directories(dir);
    std::mt19937_64 rng(7);
    std::normal_distribution<double> normal;
    double worst = 0;
    std::size_t compared = 0;
    for (int trial = 0; trial < 50; ++trial) {
      TraceHeader h;
      h.n_layers = 1 + rng() % 3;
      h.d_neurons = 1 + rng() % 9;
      h.vocab_size = 2;
      const std::size_t n = 20 + rng() % 200;
      std::vector<TraceRecord> recs;
      for (std::size_t i = 0; i < n; ++i) {
        const int a = 100 + static_cast<int>(rng() % 4) * 100 + static_cast<int>(rng() % 3) * 11;
        const auto p = make_prompt(Operator::add, a, 111 + static_cast<int>(rng() % 3) * 10);
        std::vector<float> act;
        for (std::size_t k = 0; k < h.n_layers * h.d_neurons; ++k)
          act.push_back(static_cast<float>(normal(rng) * (1 + k % 3) + (a % 10) * 0.3 * (k % 2)));
        recs.push_back(make_trace_record(p, act, {0.5f, 0.5f}));
      }
      const auto path = (dir / ("r" + std::to_string(trial) + ".dgc1")).string();
      write_trace(path, h, recs);
      const auto t = fisher_scores(path);
      for (Position pos : kPositions) {
        std::vector<std::string> labels;
        for (const auto& r : recs) labels.push_back(r.cls(pos));
        if (std::set<std::string>(labels.begin(), labels.end()).size() < 2) continue;
        for (std::uint32_t l = 0; l < h.n_layers; ++l)
          for (std::uint32_t j = 0; j < h.d_neurons; ++j) {
            std::vector<double> x;
            for (const auto& r : recs) x.push_back(r.layer(l, h.d_neurons)[j]);
            const double want = naive_fisher(x, labels);
            const double got = t.score(static_cast<int>(l), static_cast<int>(j), pos);
            worst = std::max(worst, std::abs(got - want) / std::max(std::abs(want), 1e-300));
            ++compared;
          }
      }
    }
    report("fisher_naive_oracle", worst < 1e-6,
           std::to_string(compared) + " scores over 50 traces, worst relative error " + g(worst) +
               " (limit 1e-6)");
  }
  {
    std::mt19937_64 rng(11);
    std::uniform_real_distribution<double> shift(-100, 100), scale(0.01, 100);
    std::normal_distribution<double> normal;
    double worst = 0;
    int cases = 0;
    while (cases < 1000) {
      const std::size_t n = 10 + rng() % 60;
      const int k = 2 + static_cast<int>(rng() % 4);
      std::vector<std::string> labels(n);
      for (auto& s : labels) s = "c" + std::to_string(rng() % k);
      Eigen::MatrixXd x(static_cast<Eigen::Index>(n), 3);
      for (Eigen::Index i = 0; i < x.rows(); ++i)
        for (Eigen::Index j = 0; j < 3; ++j)
          x(i, j) = normal(rng) + 0.5 * j * static_cast<double>(labels[i].back() - '0');
      Eigen::ArrayXd base;
      try {
        base = fisher_scores_matrix(x, labels);
      } catch (const FisherError&) {
        continue;
      }
      ++cases;
      const double c = shift(rng), a = (rng() % 2 ? 1 : -1) * scale(rng);
      const auto moved = fisher_scores_matrix((x.array() + c).matrix(), labels);
      const auto scaled = fisher_scores_matrix(x * a, labels);
      for (Eigen::Index j = 0; j < base.size(); ++j) {
        const double d = std::max(1.0, base(j));
        worst = std::max({worst, std::abs(moved(j) - base(j)) / d, std::abs(scaled(j) - base(j)) / d});
      }
    }
    report("fisher_invariance", worst < 1e-9,
           "1000 cases, worst deviation under x+c and a*x " + g(worst) + " (limit 1e-9)");
  }
}

// ---------------------------------------------------------------- datasets

bool digits_ok(Operator op, int a, int b) {
  const std::string sa = std::to_string(a), sb = std::to_string(b);
  if (sa.size() != 3 || sb.size() != 3) return false;
  for (int i = 0; i < 3; ++i) {
    const int x = sa[i] - '0', y = sb[i] - '0';
    if (op == Operator::add ? x + y > 9 : x < y) return false;
  }
  const int r = op == Operator::add ? a + b : a - b;
  return r >= 100 && r <= 999;
}

bool all_differ(int x, int y) {
  const std::string a = std::to_string(x), b = std::to_string(y);
  return a[0] != b[0] && a[1] != b[1] && a[2] != b[2];
}

void dataset_checks() {
  constexpr std::size_t kN = 10000;
  std::size_t violations = 0, prompts = 0, not_distinct = 0;
  for (Operator op : {Operator::add, Operator::sub}) {
    for (const auto& p : generate_simple_dataset(op, kN, 7)) {
      violations += !validate_prompt(p).empty() || !digits_ok(op, p.a, p.b);
      ++prompts;
    }
    for (PairKind k : {PairKind::op1, PairKind::op2})
      for (const auto& pr : generate_pair_dataset(op, k, kN, 11)) {
        const int br = pr.base.expected_result, sr = pr.source.expected_result;
        const bool shared = k == PairKind::op1 ? pr.base.b == pr.source.b : pr.base.a == pr.source.a;
        violations += !validate_pair(pr).empty() || !digits_ok(op, pr.base.a, pr.base.b) ||
                      !digits_ok(op, pr.source.a, pr.source.b) || !shared || !all_differ(br, sr);
        std::set<int> d;
        for (const auto& [l, v] : pr.variants) d.insert(v);
        not_distinct += d.size() != 8;
        ++prompts;
      }
  }
  for (CarryScenario s : {CarryScenario::unit_to_tens, CarryScenario::tens_to_hundreds})
    for (const auto& cp : generate_carry_dataset(s, kN, 5)) {
      const std::string a = std::to_string(cp.source.a), b = std::to_string(cp.source.b);
      const int col = s == CarryScenario::unit_to_tens ? 2 : 1;
      int carries = 0;
      for (int i = 0; i < 3; ++i) carries += (a[i] - '0') + (b[i] - '0') > 9;
      violations += !validate_carry_pair(cp).empty() || !digits_ok(Operator::add, cp.base.a, cp.base.b) ||
                    carries != 1 || (a[col] - '0') + (b[col] - '0') <= 9;
      std::set<int> d;
      for (const auto& [l, v] : cp.variants) d.insert(v);
      not_distinct += d.size() != 9;
      ++prompts;
    }
  report("dataset_validators", violations == 0,
         std::to_string(violations) + " violations over " + std::to_string(prompts) +
             " prompts (10k per kind)");
  report("variants_distinct", not_distinct == 0,
         std::to_string(not_distinct) + " pairs with colliding variants (8 per pair, 9 with carry)");

  std::size_t checked = 0, wrong = 0;
  for (int b = 100; b <= 999; ++b)
    for (int s = 100; s <= 999; ++s) {
      if (!all_differ(b, s)) continue;
      const auto t = make_variants(b, s);
      const std::string bs = std::to_string(b), ss = std::to_string(s);
      std::set<int> distinct;
      for (auto l : kVariantLabels) {
        std::string want(3, '0');
        for (int i = 0; i < 3; ++i) want[i] = l[i] == 'b' ? bs[i] : ss[i];
        const int v = variant_value(t, l);
        wrong += v != std::stoi(want);
        distinct.insert(v);
      }
      wrong += distinct.size() != 8;
      ++checked;
    }
  report("composition_exhaustive", wrong == 0,
         std::to_string(checked) + " result pairs x 8 labels, " + std::to_string(wrong) + " mismatches");
}

// ---------------------------------------------------------------- interventions

void intervention_checks() {
  ModelConfig c;
  c.n_layers = 3;
  c.d_model = 16;
  c.d_mlp = 64;
  c.n_heads = 4;
  c.context_len = 32;
  c.seed = 21;
  const auto m = Model<float>::random(c);
  const auto pairs = generate_pair_dataset(Operator::add, PairKind::op2, 30, 3);

  Circuit full;
  full.op = "add";
  full.position = Position::tens;
  full.threshold = 1;
  full.d_neurons = 16;
  for (int l = 0; l < 3; ++l) {
    full.layers.push_back(l);
    std::vector<int> all(16);
    std::iota(all.begin(), all.end(), 0);
    full.neurons[l] = all;
  }
  Circuit empty = full;
  for (auto& [l, v] : empty.neurons) v.clear();
  Circuit sparse = full;
  sparse.neurons[0] = {1, 5};
  sparse.neurons[1] = {};
  sparse.neurons[2] = {0, 7, 15};

  bool empty_ok = true, self_ok = true, idem_ok = true;
  for (const auto& p : pairs) {
    const auto base = m.tokenizer.encode(p.base.render());
    const auto plain = forward_record(m, base, false);
    const auto src = forward_record(m, m.tokenizer.encode(p.source.render()), true);
    empty_ok &= forward_with_patch(m, base, src, circuit_plan(empty)).probs == plain.probs;
    const auto self = forward_record(m, base, true);
    for (Site s : {Site::attn_out, Site::mlp_hidden, Site::mlp_out, Site::block_out}) {
      PatchPlan all;
      all.site = s;
      for (int l = 0; l < 3; ++l) all.entries.push_back({l, std::nullopt});
      self_ok &= forward_with_patch(m, base, self, all).logits == self.logits;
    }
    const auto once = forward_with_patch(m, base, src, circuit_plan(sparse), true);
    idem_ok &= forward_with_patch(m, base, once, circuit_plan(sparse)).logits == once.logits;
  }
  report("empty_patch_identity", empty_ok, "30 pairs, probabilities bit-identical to the unpatched run");
  report("self_patch_identity", self_ok, "30 pairs x 4 sites, logits bit-identical");
  report("patch_idempotence", idem_ok, "re-patching from the patched run changes nothing");

  double worst_mass = 0;
  for (auto mode : {TokenizerMode::multi_digit, TokenizerMode::single_digit}) {
    auto cm = c;
    cm.tokenizer = mode;
    const auto mm = Model<float>::random(cm);
    for (Operator op : {Operator::add, Operator::sub})
      for (PairKind k : {PairKind::op1, PairKind::op2})
        for (const auto& o : run_interventions(mm, generate_pair_dataset(op, k, 25, 4), sparse))
          worst_mass = std::max({worst_mass, o.mass(false), o.mass(true)});
  }
  report("variant_mass", worst_mass <= 1 + 1e-6,
         "max probability mass on the 8 variants " + g(worst_mass) + " (limit 1 + 1e-6)");

  const auto row = effect_row(run_interventions(m, pairs, sparse), sparse);
  double worst = 0;
  std::vector<double> mean(8, 0.0);
  std::size_t flips = 0;
  for (const auto& p : pairs) {
    const auto base = m.tokenizer.encode(p.base.render());
    const auto before = forward_record(m, base, false);
    const auto src = forward_record(m, m.tokenizer.encode(p.source.render()), true);
    PatchPlan plan;
    for (int l : sparse.layers) plan.entries.push_back({l, sparse.at(l)});
    const auto after = forward_with_patch(m, base, src, plan);
    auto tok = [&](std::string_view l) {
      return *m.tokenizer.find(std::to_string(variant_value(p.variants, l)));
    };
    for (std::size_t i = 0; i < 8; ++i) {
      const int t = tok(kVariantLabels[i]);
      mean[i] += 100.0 * (static_cast<double>(after.probs[t]) - before.probs[t]) / 30.0;
    }
    flips += before.argmax() == tok("bbb") && after.argmax() == tok("bsb");
  }
  for (std::size_t i = 0; i < 8; ++i) worst = std::max(worst, std::abs(row.mean_delta_pp[i] - mean[i]));
  const bool flips_ok = row.flip_rate == static_cast<double>(flips) / 30.0;
  report("aggregate_brute_force", worst < 1e-9 && flips_ok,
         "max |mean dp - brute force| " + g(worst) + " pp, flip rate " +
             (flips_ok ? "equal" : "differs"));
}

// ---------------------------------------------------------------- traces

void trace_checks(const fs::path& work) {
  const auto dir = work / "trace_oracle";
  fs::create_directories(dir);
  std::mt19937_64 rng(42);
  std::size_t bad = 0, records = 0;
  for (int trial = 0; trial < 100; ++trial) {
    TraceHeader h;
    h.n_layers = 1 + rng() % 4;
    h.d_neurons = 1 + rng() % 17;
    h.prob_mode = trial % 3 == 0 ? ProbMode::sparse : ProbMode::dense;
    h.vocab_size = h.prob_mode == ProbMode::dense ? 1 + rng() % 40 : 5000;
    std::vector<TraceRecord> recs(1 + rng() % 12);
    for (auto& r : recs) {
      r = make_trace_record(make_prompt(Operator::add, 100 + rng() % 400, 100 + rng() % 400), {}, {});
      for (std::size_t i = 0; i < h.n_layers * h.d_neurons; ++i) {
        const auto bits = static_cast<std::uint32_t>(rng());
        float f;
        std::memcpy(&f, &bits, sizeof f);
        r.activations.push_back(f);
      }
      if (h.prob_mode == ProbMode::dense)
        for (std::size_t i = 0; i < h.vocab_size; ++i)
          r.dense_probs.push_back(std::uniform_real_distribution<float>(0, 1)(rng));
      else
        for (std::uint32_t k = 0; k < 5; ++k)
          r.sparse_probs.emplace_back(k * 7 + 1, std::uniform_real_distribution<float>(0, 1)(rng));
    }
    const auto path = (dir / ("t" + std::to_string(trial) + ".dgc1")).string();
    write_trace(path, h, recs);
    const auto [h2, back] = read_trace(path);
    bad += back.size() != recs.size();
    for (std::size_t i = 0; i < std::min(back.size(), recs.size()); ++i, ++records) {
      const auto& a = back[i].activations;
      const auto& b = recs[i].activations;
      bad += a.size() != b.size() || std::memcmp(a.data(), b.data(), a.size() * sizeof(float)) != 0 ||
             back[i].dense_probs != recs[i].dense_probs ||
             back[i].sparse_probs != recs[i].sparse_probs || back[i].prompt != recs[i].prompt ||
             back[i].digit_class != recs[i].digit_class;
    }
  }
  report("trace_round_trip", bad == 0,
         "100 random traces, " + std::to_string(records) + " records, " + std::to_string(bad) +
             " not bit-identical");
  const auto empty = (dir / "header_only.dgc1").string();
  TraceHeader h;
  h.n_layers = 6;
  h.d_neurons = 128;
  h.vocab_size = 916;
  write_trace(empty, h, std::vector<TraceRecord>{});
  bool ok = false;
  try {
    TraceReader rd(empty);
    TraceRecord r;
    ok = rd.header().d_neurons == 128 && !rd.next(r);
  } catch (const std::exception&) {
  }
  report("trace_header_only", ok, "header-only file opens with zero records");
}

// ---------------------------------------------------------------- LDA

void lda_checks() {
  auto phi = [](double z) { return 0.5 * std::erfc(-z / std::sqrt(2.0)); };
  auto sample = [](const std::vector<std::vector<double>>& centres, std::size_t per,
                   std::uint64_t seed, Eigen::MatrixXd& x, std::vector<std::string>& y) {
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> n;
    const auto p = static_cast<Eigen::Index>(centres[0].size());
    x.resize(static_cast<Eigen::Index>(centres.size() * per), p);
    y.clear();
    Eigen::Index r = 0;
    for (std::size_t c = 0; c < centres.size(); ++c)
      for (std::size_t i = 0; i < per; ++i, ++r) {
        for (Eigen::Index j = 0; j < p; ++j) x(r, j) = centres[c][j] + n(rng);
        y.push_back("k" + std::to_string(c));
      }
  };
  // four unit-covariance classes at (+-a, +-a): Bayes accuracy Phi(a)^2
  const double a = 1.5;
  const std::vector<std::vector<double>> c{{a, a}, {-a, a}, {a, -a}, {-a, -a}};
  Eigen::MatrixXd xtr, xte;
  std::vector<std::string> ytr, yte;
  sample(c, 2000, 3, xtr, ytr);
  sample(c, 10000, 4, xte, yte);
  const double acc = fit_lda(xtr, ytr).accuracy(xte, yte), bayes = phi(a) * phi(a);
  report("lda_bayes", std::abs(acc - bayes) <= 0.02,
         "accuracy " + g(acc) + " vs analytic Bayes " + g(bayes) + " (within 2 points)");

  const std::vector<std::vector<double>> c3{{0, 0, 0, 0}, {1, 0.5, 0, 0}, {0, 1, 1, 0}};
  Eigen::MatrixXd x;
  std::vector<std::string> y;
  sample(c3, 300, 9, x, y);
  FisherTable f;
  f.d_neurons = 4;
  f.layers = {0};
  PositionFisher pf;
  pf.position = Position::unit;
  pf.scores = fisher_scores_matrix(x, y).matrix().transpose();
  f.positions.push_back(pf);
  SufficiencyOptions o;
  o.thresholds = {1e-300};
  const auto rows = sufficiency_for_layer(x, y, f, Position::unit, 0, o);
  report("lda_zero_threshold", rows[0].acc_reduced == rows[0].acc_full && rows[0].n_features == 4,
         "t->0 reduced " + g(rows[0].acc_reduced) + " vs full " + g(rows[0].acc_full));
}

// ---------------------------------------------------------------- training + pipeline

void determinism_check(const PipelineConfig& cfg, std::size_t steps) {
  std::vector<ArithmeticPrompt> data;
  for (Operator o : {Operator::add, Operator::sub}) {
    auto v = sample_no_carry_problems(o, cfg.train_per_op, 1);
    data.insert(data.end(), v.begin(), v.end());
  }
  auto hp = cfg.train;
  hp.max_steps = steps;
  hp.eval_every = 0;
  const auto r1 = train(cfg.model, data, hp), r2 = train(cfg.model, data, hp);
  const bool same = r1.loss_trace == r2.loss_trace && r1.model.params == r2.model.params;
  report("training_deterministic", same && r1.loss_trace.size() == steps,
         "two runs of " + std::to_string(steps) + " steps on the default model: loss traces " +
             (same ? "identical" : "differ"));
}

ojson read_json(const fs::path& p) {
  std::ifstream is(p);
  if (!is) throw std::runtime_error("missing " + p.string());
  return ojson::parse(is);
}

void pipeline_checks(const std::string& cli, const std::string& config, const fs::path& out) {
  const std::string cmd = "\"" + cli + "\" reproduce --config \"" + config + "\" --out \"" +
                          out.string() + "\" --resume";
  std::cout << "running: " << cmd << std::endl;
  const int status = std::system(cmd.c_str());
  const int code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  info("reproduce_exit_code", std::to_string(code));
  ojson checks, timing;
  try {
    checks = read_json(out / "report/checks.json");
    timing = read_json(out / "timing/train.json");
  } catch (const std::exception& e) {
    report("training_accuracy", false, std::string("pipeline produced no report: ") + e.what());
    report("injection_detected", false, "no report");
    report("all_neuron_moves_from_bbb", false, "no report");
    report("artifacts_complete", false, "no report");
    return;
  }
  const double acc = checks.value("training_accuracy", 0.0);
  const double cpu = timing.value("cpu_minutes", 1e9);
  report("training_accuracy", acc >= 0.95 && cpu <= 30.0,
         "held-out accuracy " + g(100 * acc) + "% (need >= 95%) after " + g(cpu) +
             " CPU-minutes (budget 30)");
  report("injection_detected", checks.value("injection_detected", false),
         "attn_out patch lifts mean p(sss) by more than epsilon at some layer");
  report("all_neuron_moves_from_bbb", checks.value("all_neuron_moved_ok", false),
         "fraction of op2 pairs whose argmax leaves bbb under the all-neuron circuit over L " +
             (checks.contains("all_neuron_moved_from_bbb") ? checks["all_neuron_moved_from_bbb"].dump()
                                                           : std::string("{}")) +
             " (need >= 0.5)");
  report("artifacts_complete", checks.value("artifacts_complete", false),
         "effect, flip, similarity and overlap tables present");
  info("position_selective", checks.contains("position_selective")
                                 ? checks["position_selective"].dump()
                                 : std::string("not reported"));
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"acceptance criteria"};
  std::string config = std::string(DGC_SOURCE_DIR) + "/configs/default.ini";
  std::string work = "acceptance_run";
  std::string cli = DGC_CLI;
  std::size_t det_steps = 50;
  bool skip_pipeline = false;
  app.add_option("--config", config);
  app.add_option("--work", work);
  app.add_option("--cli", cli);
  app.add_option("--determinism-steps", det_steps);
  app.add_flag("--skip-pipeline", skip_pipeline);
  CLI11_PARSE(app, argc, argv);

  const fs::path wd(work);
  fs::create_directories(wd);
  PipelineConfig cfg;
  try {
    cfg = load_config(config);
  } catch (const std::exception& e) {
    std::cerr << e.what() << "\n";
    return 2;
  }
  gradient_oracle();
  fisher_oracles(wd);
  dataset_checks();
  intervention_checks();
  trace_checks(wd);
  lda_checks();
  determinism_check(cfg, det_steps);
  if (!skip_pipeline) pipeline_checks(cli, config, wd / "reproduce");
  std::cout << (failures ? std::to_string(failures) + " criteria failed" : "all criteria passed")
            << std::endl;
  return failures ? 1 : 0;
}
