#pragma once

// Linear discriminant analysis with a shared, shrinkage-regularized
// within-class covariance, and the circuit sufficiency comparison built on it.

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

inline constexpr double kDefaultShrinkage = 1e-3;

struct LdaError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct LdaModel {
  std::vector<std::string> classes;
  Eigen::MatrixXd means;       // [k x p]
  Eigen::MatrixXd covariance;  // [p x p], regularized
  Eigen::MatrixXd weights;     // [p x k], Sigma^-1 mu_c
  Eigen::RowVectorXd bias;     // [k]
  double lambda = 0;
  double train_accuracy = 0;
  double heldout_accuracy = std::nan("");

  std::vector<int> predict(const Eigen::MatrixXd& x) const {
    const Eigen::MatrixXd s = (x * weights).rowwise() + bias;
    std::vector<int> out(static_cast<std::size_t>(x.rows()));
    for (Eigen::Index i = 0; i < x.rows(); ++i) s.row(i).maxCoeff(&out[i]);
    return out;
  }

  std::string predict_label(const Eigen::RowVectorXd& x) const {
    return classes[predict(Eigen::MatrixXd(x))[0]];
  }

  double accuracy(const Eigen::MatrixXd& x, const std::vector<std::string>& labels) const {
    if (labels.empty()) return std::nan("");
    const auto pred = predict(x);
    std::size_t hit = 0;
    for (std::size_t i = 0; i < labels.size(); ++i) hit += classes[pred[i]] == labels[i];
    return static_cast<double>(hit) / static_cast<double>(labels.size());
  }
};

// lambda_scale: shrinkage lambda = lambda_scale * trace(Sigma) / p. Zero means
// unregularized; a singular covariance is then an error.
inline LdaModel fit_lda(const Eigen::MatrixXd& x, const std::vector<std::string>& labels,
                        double lambda_scale = kDefaultShrinkage) {
  if (static_cast<std::size_t>(x.rows()) != labels.size())
    throw LdaError("label count does not match sample count");
  if (x.cols() == 0) throw LdaError("no features");
  std::map<std::string, std::vector<Eigen::Index>> by_class;
  for (std::size_t i = 0; i < labels.size(); ++i)
    by_class[labels[i]].push_back(static_cast<Eigen::Index>(i));
  if (by_class.size() < 2) throw LdaError("single class: LDA needs at least two classes");
  for (const auto& [c, idx] : by_class)
    if (idx.size() < 2) throw LdaError("class " + c + " has fewer than 2 samples");

  const Eigen::Index p = x.cols(), k = static_cast<Eigen::Index>(by_class.size());
  const double n = static_cast<double>(x.rows());
  LdaModel m;
  m.means.resize(k, p);
  Eigen::MatrixXd centered(x.rows(), p);
  Eigen::RowVectorXd log_prior(k);
  Eigen::Index ci = 0;
  for (const auto& [c, idx] : by_class) {
    m.classes.push_back(c);
    Eigen::RowVectorXd mu = Eigen::RowVectorXd::Zero(p);
    for (auto i : idx) mu += x.row(i);
    mu /= static_cast<double>(idx.size());
    m.means.row(ci) = mu;
    for (auto i : idx) centered.row(i) = x.row(i) - mu;
    log_prior(ci) = std::log(static_cast<double>(idx.size()) / n);
    ++ci;
  }
  m.covariance = (centered.transpose() * centered) / n;
  m.lambda = lambda_scale * m.covariance.trace() / static_cast<double>(p);
  m.covariance.diagonal().array() += m.lambda;

  Eigen::LLT<Eigen::MatrixXd> llt(m.covariance);
  if (llt.info() != Eigen::Success)
    throw LdaError("singular within-class covariance (increase shrinkage)");
  // Cholesky of a numerically singular matrix can still "succeed".
  const double dmin = llt.matrixL().toDenseMatrix().diagonal().minCoeff();
  const double dmax = llt.matrixL().toDenseMatrix().diagonal().maxCoeff();
  if (!(dmin > 1e-7 * dmax)) throw LdaError("singular within-class covariance (increase shrinkage)");

  m.weights = llt.solve(m.means.transpose());
  m.bias.resize(k);
  for (Eigen::Index c = 0; c < k; ++c)
    m.bias(c) = -0.5 * m.means.row(c).dot(m.weights.col(c)) + log_prior(c);
  m.train_accuracy = m.accuracy(x, labels);
  return m;
}

// Stratified split: from each class, round(test_fraction * n_c) samples
// (at least one) go to the test side. Classes with fewer than 3 samples are
// dropped so that every training class keeps two.
struct StratifiedSplit {
  std::vector<std::size_t> train, test;
  std::vector<std::string> dropped;
};

inline StratifiedSplit stratified_split(const std::vector<std::string>& labels,
                                        double test_fraction, std::uint64_t seed) {
  std::map<std::string, std::vector<std::size_t>> by_class;
  for (std::size_t i = 0; i < labels.size(); ++i) by_class[labels[i]].push_back(i);
  std::mt19937_64 rng(seed);
  StratifiedSplit s;
  for (auto& [c, idx] : by_class) {
    if (idx.size() < 3) {
      s.dropped.push_back(c);
      continue;
    }
    std::shuffle(idx.begin(), idx.end(), rng);
    auto n_test = static_cast<std::size_t>(std::lround(test_fraction * idx.size()));
    n_test = std::clamp<std::size_t>(n_test, 1, idx.size() - 2);
    s.test.insert(s.test.end(), idx.begin(), idx.begin() + n_test);
    s.train.insert(s.train.end(), idx.begin() + n_test, idx.end());
  }
  std::sort(s.train.begin(), s.train.end());
  std::sort(s.test.begin(), s.test.end());
  return s;
}

inline Eigen::MatrixXd take(const Eigen::MatrixXd& x, const std::vector<std::size_t>& rows,
                            const std::vector<int>* cols = nullptr) {
  const Eigen::Index nc = cols ? static_cast<Eigen::Index>(cols->size()) : x.cols();
  Eigen::MatrixXd out(static_cast<Eigen::Index>(rows.size()), nc);
  for (std::size_t i = 0; i < rows.size(); ++i) {
    const auto r = static_cast<Eigen::Index>(rows[i]);
    if (cols)
      for (Eigen::Index j = 0; j < nc; ++j) out(static_cast<Eigen::Index>(i), j) = x(r, (*cols)[j]);
    else
      out.row(static_cast<Eigen::Index>(i)) = x.row(r);
  }
  return out;
}

inline std::vector<std::string> take(const std::vector<std::string>& v,
                                     const std::vector<std::size_t>& rows) {
  std::vector<std::string> out;
  out.reserve(rows.size());
  for (auto r : rows) out.push_back(v[r]);
  return out;
}

struct SufficiencyRow {
  int layer = 0;
  double t = 0;
  double acc_full = 0;
  double acc_reduced = 0;
  std::size_t n_classes = 0;
  std::size_t n_features = 0;  // circuit size at this layer
  bool empty_circuit = false;
};

struct SufficiencyOptions {
  std::vector<double> thresholds{kDefaultThresholds.begin(), kDefaultThresholds.end()};
  std::vector<int> layers;  // empty = every Fisher-table layer
  double test_fraction = 0.2;
  double lambda_scale = kDefaultShrinkage;
  std::uint64_t seed = 1;
};

// Full vs circuit-restricted accuracy on one layer's activations. `x` is
// [samples x d_neurons]; the split is shared by every threshold.
inline std::vector<SufficiencyRow> sufficiency_for_layer(const Eigen::MatrixXd& x,
                                                         const std::vector<std::string>& labels,
                                                         const FisherTable& f, Position d,
                                                         int layer, const SufficiencyOptions& o) {
  const auto split = stratified_split(labels, o.test_fraction, o.seed);
  const auto y_train = take(labels, split.train), y_test = take(labels, split.test);
  const Eigen::MatrixXd x_train = take(x, split.train), x_test = take(x, split.test);
  const LdaModel full = fit_lda(x_train, y_train, o.lambda_scale);
  const double acc_full = full.accuracy(x_test, y_test);
  std::vector<SufficiencyRow> rows;
  for (double t : o.thresholds) {
    SufficiencyRow r;
    r.layer = layer;
    r.t = t;
    r.acc_full = acc_full;
    r.n_classes = full.classes.size();
    const auto circuit = select_circuit(f, d, t, {layer});
    const auto& cols = circuit.at(layer);
    r.n_features = cols.size();
    if (cols.empty()) {
      r.empty_circuit = true;
      r.acc_reduced = 1.0 / static_cast<double>(r.n_classes);
    } else {
      const LdaModel red = fit_lda(take(x, split.train, &cols), y_train, o.lambda_scale);
      r.acc_reduced = red.accuracy(take(x, split.test, &cols), y_test);
    }
    rows.push_back(r);
  }
  return rows;
}

inline std::vector<SufficiencyRow> sufficiency_report(const std::string& trace_path,
                                                      const FisherTable& f, Position d,
                                                      SufficiencyOptions o = {}) {
  if (o.layers.empty()) o.layers = f.layers;
  const auto labels_all = read_labels(trace_path);
  std::vector<std::string> labels;
  for (const auto& c : labels_all.digit_class) labels.push_back(c[static_cast<int>(d)]);
  std::vector<std::vector<SufficiencyRow>> per_layer(o.layers.size());
  parallel_for(o.layers.size(), [&](std::size_t i) {
    const Eigen::MatrixXd x = load_layer(trace_path, static_cast<std::uint32_t>(o.layers[i]));
    per_layer[i] = sufficiency_for_layer(x, labels, f, d, o.layers[i], o);
  });
  std::vector<SufficiencyRow> out;
  for (auto& v : per_layer) out.insert(out.end(), v.begin(), v.end());
  return out;
}

inline std::string sufficiency_csv(const std::vector<SufficiencyRow>& rows) {
  std::string s = csv::row({"layer", "t", "acc_full", "acc_reduced", "n_classes", "n_features",
                            "empty_circuit"});
  for (const auto& r : rows)
    s += csv::row({std::to_string(r.layer), csv::num(r.t), csv::num(r.acc_full),
                   csv::num(r.acc_reduced), std::to_string(r.n_classes),
                   std::to_string(r.n_features), r.empty_circuit ? "1" : "0"});
  return s;
}

inline std::vector<SufficiencyRow> sufficiency_from_csv(const csv::Table& t) {
  std::vector<SufficiencyRow> rows;
  const auto cl = t.column("layer"), ct = t.column("t"), cf = t.column("acc_full"),
             cr = t.column("acc_reduced"), cn = t.column("n_classes");
  for (const auto& r : t.rows) {
    SufficiencyRow s;
    s.layer = std::stoi(r[cl]);
    s.t = std::stod(r[ct]);
    s.acc_full = std::stod(r[cf]);
    s.acc_reduced = std::stod(r[cr]);
    s.n_classes = std::stoul(r[cn]);
    for (std::size_t i = 0; i < t.header.size(); ++i) {
      if (t.header[i] == "n_features") s.n_features = std::stoul(r[i]);
      if (t.header[i] == "empty_circuit") s.empty_circuit = r[i] == "1";
    }
    rows.push_back(s);
  }
  return rows;
}

}  // namespace dgc
