#include <gtest/gtest.h>

#include <filesystem>
#include <random>

#include "dgc/fisher.hpp"

using namespace dgc;
namespace fs = std::filesystem;

namespace {

fs::path temp_dir() {
  const auto* info = ::testing::UnitTest::GetInstance()->current_test_info();
  auto p = fs::temp_directory_path() / (std::string("dgc_fisher_") + info->name());
  fs::create_directories(p);
  return p;
}

// Textbook two-pass computation, one feature at a time.
double naive_fisher(const std::vector<double>& x, const std::vector<std::string>& labels) {
  std::map<std::string, std::vector<double>> by;
  for (std::size_t i = 0; i < x.size(); ++i) by[labels[i]].push_back(x[i]);
  std::erase_if(by, [](const auto& kv) { return kv.second.size() < 2; });
  double n = 0, total = 0;
  for (auto& [k, v] : by)
    for (double e : v) {
      total += e;
      n += 1;
    }
  const double mu = total / n;
  double num = 0, den = 0;
  for (auto& [k, v] : by) {
    double m = 0;
    for (double e : v) m += e;
    m /= static_cast<double>(v.size());
    double var = 0;
    for (double e : v) var += (e - m) * (e - m);
    var /= static_cast<double>(v.size());
    num += static_cast<double>(v.size()) * (m - mu) * (m - mu);
    den += static_cast<double>(v.size()) * var;
  }
  return num / den;
}

std::vector<std::string> random_labels(std::mt19937_64& rng, std::size_t n, int n_classes) {
  std::vector<std::string> l(n);
  for (auto& s : l) s = "c" + std::to_string(rng() % n_classes);
  return l;
}

Eigen::MatrixXd random_matrix(std::mt19937_64& rng, Eigen::Index n, Eigen::Index d,
                              const std::vector<std::string>& labels) {
  std::normal_distribution<double> normal;
  Eigen::MatrixXd x(n, d);
  for (Eigen::Index i = 0; i < n; ++i)
    for (Eigen::Index j = 0; j < d; ++j)
      x(i, j) = normal(rng) + 0.5 * j * static_cast<double>(labels[i].back() - '0');
  return x;
}

}  // namespace

TEST(Fisher, HandCase) {
  Eigen::MatrixXd x(4, 1);
  x << 0, 2, 4, 6;
  const auto f = fisher_scores_matrix(x, {"a", "a", "b", "b"});
  EXPECT_EQ(f(0), 4.0);
}

TEST(Fisher, MatchesNaiveOnRandomTraces) {
  const auto dir = temp_dir();
  std::mt19937_64 rng(7);
  std::normal_distribution<double> normal;
  for (int trial = 0; trial < 50; ++trial) {
    TraceHeader h;
    h.n_layers = 1 + rng() % 3;
    h.d_neurons = 1 + rng() % 9;
    h.vocab_size = 2;
    const std::size_t n = 20 + rng() % 200;
    std::vector<TraceRecord> recs;
    for (std::size_t i = 0; i < n; ++i) {
      const int a = 100 + static_cast<int>(rng() % 4) * 100 + static_cast<int>(rng() % 3) * 11;
      auto p = make_prompt(Operator::add, a, 111 + static_cast<int>(rng() % 3) * 10);
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
      std::set<std::string> distinct(labels.begin(), labels.end());
      if (distinct.size() < 2) continue;
      for (std::uint32_t l = 0; l < h.n_layers; ++l)
        for (std::uint32_t j = 0; j < h.d_neurons; ++j) {
          std::vector<double> x;
          for (const auto& r : recs) x.push_back(r.layer(l, h.d_neurons)[j]);
          const double want = naive_fisher(x, labels);
          const double got = t.score(static_cast<int>(l), static_cast<int>(j), pos);
          ASSERT_NEAR(got, want, 1e-6 * std::max(1.0, std::abs(want)))
              << "trial " << trial << " layer " << l << " neuron " << j;
        }
    }
  }
}

TEST(Fisher, TranslationAndScaleInvariance) {
  std::mt19937_64 rng(11);
  std::uniform_real_distribution<double> shift(-100, 100), scale(0.01, 100);
  for (int trial = 0; trial < 1000; ++trial) {
    const std::size_t n = 10 + rng() % 60;
    const auto labels = random_labels(rng, n, 2 + static_cast<int>(rng() % 4));
    const auto x = random_matrix(rng, static_cast<Eigen::Index>(n), 3, labels);
    Eigen::ArrayXd base;
    try {
      base = fisher_scores_matrix(x, labels);
    } catch (const FisherError&) {
      continue;  // fewer than two usable classes
    }
    const double c = shift(rng), a = (rng() % 2 ? 1 : -1) * scale(rng);
    const auto moved = fisher_scores_matrix((x.array() + c).matrix(), labels);
    const auto scaled = fisher_scores_matrix(x * a, labels);
    for (Eigen::Index j = 0; j < base.size(); ++j) {
      ASSERT_NEAR(moved(j), base(j), 1e-9 * std::max(1.0, base(j))) << trial;
      ASSERT_NEAR(scaled(j), base(j), 1e-9 * std::max(1.0, base(j))) << trial;
    }
  }
}

TEST(Fisher, LabelRenamingInvariance) {
  std::mt19937_64 rng(3);
  const auto labels = random_labels(rng, 80, 4);
  const auto x = random_matrix(rng, 80, 4, labels);
  std::vector<std::string> renamed;
  for (const auto& l : labels) renamed.push_back("z" + l);
  const auto a = fisher_scores_matrix(x, labels), b = fisher_scores_matrix(x, renamed);
  for (Eigen::Index j = 0; j < a.size(); ++j) EXPECT_NEAR(a(j), b(j), 1e-12 * std::max(1.0, a(j)));
}

TEST(Fisher, DegenerateSpreads) {
  Eigen::MatrixXd x(4, 3);
  // constant | separated with zero within-class spread | ordinary
  x << 5, 1, 0,  //
      5, 1, 1,   //
      5, 3, 2,   //
      5, 3, 4;
  FisherAccumulator acc(3);
  const std::vector<std::string> l{"a", "a", "b", "b"};
  for (int i = 0; i < 4; ++i) acc.add(l[i], x.row(i).transpose().array());
  const auto r = acc.finalize();
  EXPECT_EQ(r.scores(0), 0.0);
  EXPECT_EQ(r.scores(1), kFisherSentinel);
  EXPECT_EQ(r.sentinels, 1u);
  EXPECT_NEAR(r.scores(2), naive_fisher({0, 1, 2, 4}, l), 1e-12);
}

TEST(Fisher, SmallClassesDroppedAndSingleClassRejected) {
  Eigen::MatrixXd x(5, 1);
  x << 0, 2, 4, 6, 100;
  FisherAccumulator acc(1);
  const std::vector<std::string> l{"a", "a", "b", "b", "lonely"};
  for (int i = 0; i < 5; ++i) acc.add(l[i], x.row(i).transpose().array());
  const auto r = acc.finalize();
  EXPECT_EQ(r.scores(0), 4.0);
  EXPECT_EQ(r.dropped, std::vector<std::string>{"lonely"});
  EXPECT_THROW(fisher_scores_matrix(x.topRows(2), {"a", "a"}), FisherError);
}

TEST(Fisher, CircuitSelection) {
  FisherTable t;
  t.d_neurons = 4;
  t.layers = {2, 3};
  PositionFisher pf;
  pf.position = Position::tens;
  pf.scores.resize(2, 4);
  pf.scores << 0.1, 0.6, 0.61, 2.0,  //
      0.6, 0.0, 0.9, 0.3;
  t.positions.push_back(pf);
  const auto c = select_circuit(t, Position::tens, 0.6);
  EXPECT_EQ(c.at(2), (std::vector<int>{2, 3}));
  EXPECT_EQ(c.at(3), (std::vector<int>{2}));
  EXPECT_EQ(c.size(), 3u);
  EXPECT_EQ(select_circuit(t, Position::tens, 0.6, {3}).size(), 1u);
  EXPECT_THROW(select_circuit(t, Position::tens, 0.0), FisherError);
  EXPECT_THROW(select_circuit(t, Position::unit, 0.5), FisherError);
  EXPECT_EQ(full_circuit(t, Position::tens, {2, 3}).size(), 8u);
  EXPECT_EQ(min_score(t, Position::tens, {2, 3}), 0.0);
}

TEST(Fisher, OverlapAndTopK) {
  EXPECT_DOUBLE_EQ(overlap_percent({1, 2, 3, 4}, {3, 4}), 100.0);
  EXPECT_DOUBLE_EQ(overlap_percent({1, 2, 3, 4}, {4, 5, 6, 7}), 25.0);
  EXPECT_DOUBLE_EQ(overlap_percent({}, {1}), 0.0);
  Eigen::RowVectorXd s(5);
  s << 1, 3, 3, 0, 3;
  EXPECT_EQ(top_k(s, 2), (std::vector<int>{1, 2}));

  FisherTable a, b;
  a.d_neurons = b.d_neurons = 5;
  a.layers = b.layers = {0};
  PositionFisher pa, pb;
  pa.scores = s;
  pb.scores.resize(1, 5);
  pb.scores << 3, 3, 0, 0, 1;
  a.positions.push_back(pa);
  b.positions.push_back(pb);
  const auto rows = topk_overlap(a, b, Position::unit, {2, 5});
  EXPECT_DOUBLE_EQ(rows[0].percent.at(2), 50.0);
  EXPECT_DOUBLE_EQ(rows[0].percent.at(5), 100.0);
  EXPECT_THROW(topk_overlap(a, b, Position::unit, {6}), FisherError);
}

TEST(Fisher, CircuitStatsHeadline) {
  FisherTable t;
  t.d_neurons = 10;
  t.layers = {0};
  for (Position p : kPositions) {
    PositionFisher pf;
    pf.position = p;
    pf.scores = Eigen::MatrixXd::Zero(1, 10);
    for (int i = 0; i <= static_cast<int>(p); ++i) pf.scores(0, i) = 1.0;
    t.positions.push_back(pf);
  }
  const auto s = circuit_stats({select_circuit(t, Position::unit, 0.5),
                                select_circuit(t, Position::tens, 0.5),
                                select_circuit(t, Position::hundreds, 0.5)});
  EXPECT_DOUBLE_EQ(s.mean_size_percent, 20.0);
  EXPECT_EQ(s.headline(), "avg 20.0% of MLP neurons");
  EXPECT_DOUBLE_EQ(s.rows[0].overlap_tens_hundreds, 100.0);
}

TEST(Fisher, PersistenceRoundTrip) {
  std::mt19937_64 rng(5);
  FisherTable t;
  t.model_id = "toy";
  t.op = "add";
  t.d_neurons = 6;
  t.layers = {1, 4};
  for (Position p : kPositions) {
    PositionFisher pf;
    pf.position = p;
    pf.scores = Eigen::MatrixXd::Random(2, 6);
    pf.overall_mean = Eigen::MatrixXd::Random(2, 6);
    t.positions.push_back(pf);
  }
  const auto path = (temp_dir() / "f.dgcf").string();
  save_fisher(path, t);
  const auto back = load_fisher(path);
  EXPECT_EQ(back.layers, t.layers);
  EXPECT_EQ(back.model_id, "toy");
  for (Position p : kPositions) EXPECT_EQ(back.at(p).scores, t.at(p).scores);

  const auto c = select_circuit(t, Position::unit, 0.3);
  const auto cpath = (temp_dir() / "c.json").string();
  save_circuit(cpath, c);
  const auto c2 = load_circuit(cpath);
  EXPECT_EQ(c2.neurons, c.neurons);
  EXPECT_EQ(c2.threshold, c.threshold);
  EXPECT_EQ(c2.layers, c.layers);
}
