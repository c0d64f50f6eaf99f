#pragma once

// Within-subtask cosine similarity of circuit activations against a random
// baseline, and digit-by-digit activation heatmaps for top Fisher neurons.

#include <algorithm>
#include <cmath>
#include <map>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "dgc/csv.hpp"
#include "dgc/fisher.hpp"
#include "dgc/parallel.hpp"
#include "dgc/trace_store.hpp"

namespace dgc {

inline constexpr std::size_t kBaselinePairs = 5000;
inline constexpr std::size_t kClassPairCap = 10000;
inline constexpr int kHeatmapTopN = 20;

// Cosine of two vectors; nullopt when either has zero norm.
template <class A, class B>
std::optional<double> cosine(const A& a, const B& b) {
  const double na = a.norm(), nb = b.norm();
  if (na == 0 || nb == 0) return std::nullopt;
  return std::clamp(a.dot(b) / (na * nb), -1.0, 1.0);
}

struct SimilarityRow {
  int layer = 0;
  Position position = Position::unit;
  std::size_t circuit_size = 0;
  double within_mean = 0;
  std::size_t within_n = 0;
  double baseline_mean = 0, baseline_sd = 0;
  std::size_t baseline_n = 0;
  std::size_t skipped_zero = 0;  // pairs with a zero-norm sub-vector
  std::size_t classes_used = 0;
  std::size_t classes_capped = 0;
};

struct SimilarityOptions {
  std::size_t baseline_pairs = kBaselinePairs;
  std::size_t class_pair_cap = kClassPairCap;
  std::uint64_t seed = 1;
};

struct SimilarityResult {
  std::vector<SimilarityRow> rows;
  std::vector<int> empty_layers;
  SimilarityOptions options;
};

// Rows of `x` are restricted to `cols` before any cosine.
inline SimilarityRow similarity_for_layer(const Eigen::MatrixXd& x_full,
                                          const std::vector<std::string>& labels,
                                          const std::vector<int>& cols, int layer, Position d,
                                          const SimilarityOptions& o) {
  const auto n = static_cast<std::size_t>(x_full.rows());
  Eigen::MatrixXd x(x_full.rows(), static_cast<Eigen::Index>(cols.size()));
  for (std::size_t j = 0; j < cols.size(); ++j) x.col(static_cast<Eigen::Index>(j)) = x_full.col(cols[j]);

  SimilarityRow r;
  r.layer = layer;
  r.position = d;
  r.circuit_size = cols.size();
  std::mt19937_64 rng(o.seed ^ (0x9E3779B97F4A7C15ull * static_cast<std::uint64_t>(layer + 1)));

  std::map<std::string, std::vector<std::size_t>> by_class;
  for (std::size_t i = 0; i < n; ++i) by_class[labels[i]].push_back(i);
  double sum = 0;
  auto add = [&](std::size_t i, std::size_t j, double& acc, std::size_t& count) {
    const auto c = cosine(x.row(static_cast<Eigen::Index>(i)), x.row(static_cast<Eigen::Index>(j)));
    if (!c) {
      ++r.skipped_zero;
      return;
    }
    acc += *c;
    ++count;
  };
  for (const auto& [label, idx] : by_class) {
    const std::size_t m = idx.size();
    if (m < 2) continue;
    ++r.classes_used;
    const std::size_t all = m * (m - 1) / 2;
    if (all <= o.class_pair_cap) {
      for (std::size_t a = 0; a < m; ++a)
        for (std::size_t b = a + 1; b < m; ++b) add(idx[a], idx[b], sum, r.within_n);
    } else {
      ++r.classes_capped;
      std::uniform_int_distribution<std::size_t> pick(0, m - 1);
      for (std::size_t k = 0; k < o.class_pair_cap; ++k) {
        std::size_t a = pick(rng), b = pick(rng);
        while (b == a) b = pick(rng);
        add(idx[a], idx[b], sum, r.within_n);
      }
    }
  }
  r.within_mean = r.within_n ? sum / static_cast<double>(r.within_n) : std::nan("");

  std::vector<double> base;
  if (n >= 2) {
    std::uniform_int_distribution<std::size_t> pick(0, n - 1);
    for (std::size_t k = 0; k < o.baseline_pairs; ++k) {
      std::size_t a = pick(rng), b = pick(rng);
      while (b == a) b = pick(rng);
      const auto c = cosine(x.row(static_cast<Eigen::Index>(a)), x.row(static_cast<Eigen::Index>(b)));
      if (c)
        base.push_back(*c);
      else
        ++r.skipped_zero;
    }
  }
  r.baseline_n = base.size();
  if (!base.empty()) {
    double s = 0;
    for (double v : base) s += v;
    r.baseline_mean = s / static_cast<double>(base.size());
    double ss = 0;
    for (double v : base) ss += (v - r.baseline_mean) * (v - r.baseline_mean);
    r.baseline_sd = std::sqrt(ss / static_cast<double>(base.size()));
  } else {
    r.baseline_mean = r.baseline_sd = std::nan("");
  }
  return r;
}

inline SimilarityResult subtask_similarity(const std::string& trace_path, const Circuit& circuit,
                                           SimilarityOptions o = {}) {
  const auto lab = read_labels(trace_path);
  std::vector<std::string> labels;
  for (const auto& c : lab.digit_class) labels.push_back(c[static_cast<int>(circuit.position)]);
  SimilarityResult res;
  res.options = o;
  std::vector<int> layers;
  for (int l : circuit.layers) {
    if (circuit.at(l).empty())
      res.empty_layers.push_back(l);
    else
      layers.push_back(l);
  }
  res.rows.resize(layers.size());
  parallel_for(layers.size(), [&](std::size_t i) {
    const Eigen::MatrixXd x = load_layer(trace_path, static_cast<std::uint32_t>(layers[i]));
    res.rows[i] = similarity_for_layer(x, labels, circuit.at(layers[i]), layers[i],
                                       circuit.position, o);
  });
  return res;
}

inline std::string similarity_csv(const SimilarityResult& s) {
  std::string out = csv::row({"layer", "position", "circuit_size", "within_mean", "within_n",
                              "baseline_mean", "baseline_sd", "baseline_n", "skipped_zero",
                              "classes_used", "classes_capped", "class_pair_cap"});
  for (const auto& r : s.rows)
    out += csv::row({std::to_string(r.layer), to_string(r.position),
                     std::to_string(r.circuit_size), csv::num(r.within_mean),
                     std::to_string(r.within_n), csv::num(r.baseline_mean),
                     csv::num(r.baseline_sd), std::to_string(r.baseline_n),
                     std::to_string(r.skipped_zero), std::to_string(r.classes_used),
                     std::to_string(r.classes_capped), std::to_string(s.options.class_pair_cap)});
  return out;
}

inline std::vector<SimilarityRow> similarity_from_csv(const csv::Table& t) {
  std::vector<SimilarityRow> rows;
  for (const auto& c : t.rows) {
    SimilarityRow r;
    r.layer = std::stoi(c[t.column("layer")]);
    r.position = parse_position(c[t.column("position")]);
    r.circuit_size = std::stoul(c[t.column("circuit_size")]);
    r.within_mean = std::stod(c[t.column("within_mean")]);
    r.within_n = std::stoul(c[t.column("within_n")]);
    r.baseline_mean = std::stod(c[t.column("baseline_mean")]);
    r.baseline_sd = std::stod(c[t.column("baseline_sd")]);
    r.baseline_n = std::stoul(c[t.column("baseline_n")]);
    rows.push_back(r);
  }
  return rows;
}

// --- heatmaps ---------------------------------------------------------------------

struct Heatmap {
  int layer = 0;
  int neuron = 0;
  Position position = Position::unit;
  double fisher = 0;
  int first_digit = 0;  // 1 for hundreds (operands >= 100), else 0
  int size = 10;
  std::vector<double> sum;
  std::vector<std::size_t> count;  // row-major [opA digit][opB digit]

  std::size_t cell(int a, int b) const {
    return static_cast<std::size_t>((a - first_digit) * size + (b - first_digit));
  }
  bool present(int a, int b) const { return count[cell(a, b)] > 0; }
  std::optional<double> mean(int a, int b) const {
    const auto i = cell(a, b);
    if (!count[i]) return std::nullopt;
    return sum[i] / static_cast<double>(count[i]);
  }
  int last_digit() const { return first_digit + size - 1; }
};

inline Heatmap empty_heatmap(int layer, int neuron, Position d) {
  Heatmap h;
  h.layer = layer;
  h.neuron = neuron;
  h.position = d;
  h.first_digit = d == Position::hundreds ? 1 : 0;
  h.size = d == Position::hundreds ? 9 : 10;
  h.sum.assign(static_cast<std::size_t>(h.size * h.size), 0.0);
  h.count.assign(h.sum.size(), 0);
  return h;
}

// Adds one observation for the digit-pair class label ("ab").
inline void heatmap_add(Heatmap& h, const std::string& cls, double v) {
  if (cls.size() != 2) throw FormatError("bad digit-pair class: " + cls);
  const int a = cls[0] - '0', b = cls[1] - '0';
  if (a < h.first_digit || a > h.last_digit() || b < h.first_digit || b > h.last_digit())
    throw FormatError("digit-pair class out of heatmap range: " + cls);
  const auto i = h.cell(a, b);
  h.sum[i] += v;
  ++h.count[i];
}

// Grids for the top_n highest-scoring neurons of every Fisher-table layer.
inline std::vector<Heatmap> top_neuron_heatmaps(const std::string& trace_path, const FisherTable& f,
                                                Position d, int top_n = kHeatmapTopN) {
  if (top_n < 1 || static_cast<std::uint32_t>(top_n) > f.d_neurons)
    throw FisherError("top_n must be in [1, d_neurons]");
  const auto& pf = f.at(d);
  std::vector<Heatmap> maps;
  for (std::size_t li = 0; li < f.layers.size(); ++li) {
    const auto row = pf.scores.row(static_cast<Eigen::Index>(li));
    std::vector<int> idx(f.d_neurons);
    std::iota(idx.begin(), idx.end(), 0);
    std::stable_sort(idx.begin(), idx.end(), [&](int a, int b) { return row(a) > row(b); });
    for (int k = 0; k < top_n; ++k) {
      Heatmap h = empty_heatmap(f.layers[li], idx[k], d);
      h.fisher = row(idx[k]);
      maps.push_back(std::move(h));
    }
  }
  TraceReader rd(trace_path);
  if (rd.header().d_neurons != f.d_neurons)
    throw FisherError("trace and Fisher table disagree on d_neurons");
  TraceRecord r;
  while (rd.next(r)) {
    const auto& cls = r.cls(d);
    for (auto& h : maps)
      heatmap_add(h, cls, r.layer(static_cast<std::uint32_t>(h.layer), f.d_neurons)[h.neuron]);
  }
  return maps;
}

inline std::string heatmap_name(const Heatmap& h) {
  return std::string(to_string(h.position)) + "_L" + std::to_string(h.layer) + "_N" +
         std::to_string(h.neuron);
}

inline std::string heatmap_csv(const Heatmap& h) {
  std::string s = csv::row({"layer", "neuron", "position", "fisher", "a_digit", "b_digit", "mean",
                            "count"});
  for (int a = h.first_digit; a <= h.last_digit(); ++a)
    for (int b = h.first_digit; b <= h.last_digit(); ++b) {
      const auto m = h.mean(a, b);
      s += csv::row({std::to_string(h.layer), std::to_string(h.neuron), to_string(h.position),
                     csv::num(h.fisher), std::to_string(a), std::to_string(b),
                     m ? csv::num(*m) : "", std::to_string(h.count[h.cell(a, b)])});
    }
  return s;
}

inline Heatmap heatmap_from_csv(const csv::Table& t) {
  if (t.rows.empty()) throw csv::CsvError("empty heatmap CSV");
  const auto& r0 = t.rows.front();
  Heatmap h = empty_heatmap(std::stoi(r0[t.column("layer")]), std::stoi(r0[t.column("neuron")]),
                            parse_position(r0[t.column("position")]));
  h.fisher = std::stod(r0[t.column("fisher")]);
  for (const auto& r : t.rows) {
    const int a = std::stoi(r[t.column("a_digit")]), b = std::stoi(r[t.column("b_digit")]);
    const auto n = std::stoul(r[t.column("count")]);
    const auto i = h.cell(a, b);
    h.count[i] = n;
    const auto& m = r[t.column("mean")];
    h.sum[i] = n && !m.empty() ? std::stod(m) * static_cast<double>(n) : 0.0;
  }
  return h;
}

}  // namespace dgc
