#pragma once

// Fisher scores of individual neurons with respect to the digit-pair class
// at a digit position, threshold circuits derived from them, and circuit
// size / overlap statistics.
//
//   F = sum_c n_c (mu_c - mu)^2 / sum_c n_c var_c
//
// with population (divide-by-n_c) class variances and mu the count-weighted
// mean of the class means.

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <numeric>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "json.hpp"

#include "dgc/arith_data.hpp"
#include "dgc/binary_io.hpp"
#include "dgc/trace_store.hpp"

namespace dgc {

inline constexpr double kFisherSentinel = 1e9;
inline constexpr std::array<double, 7> kDefaultThresholds{0.4, 0.5, 0.6, 0.7, 0.8, 0.9, 1.0};
inline constexpr std::array<int, 5> kDefaultTopK{50, 100, 250, 500, 1000};

struct FisherError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Per-class running moments (Welford), one value per feature.
struct ClassMoments {
  std::size_t count = 0;
  Eigen::ArrayXd mean;
  Eigen::ArrayXd m2;  // sum of squared deviations

  void add(const Eigen::Ref<const Eigen::ArrayXd>& x) {
    if (count == 0) {
      mean = Eigen::ArrayXd::Zero(x.size());
      m2 = Eigen::ArrayXd::Zero(x.size());
    }
    ++count;
    const Eigen::ArrayXd delta = x - mean;
    mean += delta / static_cast<double>(count);
    m2 += delta * (x - mean);
  }

  Eigen::ArrayXd variance() const { return m2 / static_cast<double>(count); }
};

struct PositionFisher {
  Position position = Position::unit;
  Eigen::MatrixXd scores;        // [selected layers x d_neurons]
  Eigen::MatrixXd overall_mean;  // [selected layers x d_neurons]
  std::map<std::string, ClassMoments> classes;  // audit: class means / variances
  std::map<std::string, std::size_t> census;    // classes used, with counts
  std::vector<std::string> dropped;             // classes with < 2 samples
  std::size_t records_used = 0;
  std::size_t sentinel_count = 0;               // zero within-class variance, F capped
};

struct FisherTable {
  std::string model_id;
  std::string op;  // operator of the dataset the scores were computed on
  std::uint32_t d_neurons = 0;
  std::vector<int> layers;  // model layer ids, in row order of the score matrices
  std::vector<PositionFisher> positions;

  const PositionFisher& at(Position p) const {
    for (const auto& x : positions)
      if (x.position == p) return x;
    throw FisherError(std::string("no Fisher scores for position ") + to_string(p));
  }

  int layer_row(int layer) const {
    auto it = std::find(layers.begin(), layers.end(), layer);
    if (it == layers.end())
      throw FisherError("layer " + std::to_string(layer) + " not in Fisher table");
    return static_cast<int>(it - layers.begin());
  }

  double score(int layer, int neuron, Position p) const {
    return at(p).scores(layer_row(layer), neuron);
  }
};

// Accumulates feature vectors by class label and finalizes the Fisher ratio
// for every feature. Features are flattened [layers x d_neurons].
class FisherAccumulator {
 public:
  explicit FisherAccumulator(Eigen::Index n_features) : n_(n_features) {}

  void add(const std::string& label, const Eigen::Ref<const Eigen::ArrayXd>& x) {
    if (x.size() != n_) throw FisherError("feature vector has the wrong length");
    classes_[label].add(x);
  }

  std::size_t total() const {
    std::size_t t = 0;
    for (auto& [k, c] : classes_) t += c.count;
    return t;
  }

  struct Result {
    Eigen::ArrayXd scores, overall_mean;
    std::map<std::string, ClassMoments> classes;
    std::vector<std::string> dropped;
    std::size_t used = 0;
    std::size_t sentinels = 0;
  };

  Result finalize() const {
    if (classes_.empty()) throw FisherError("empty trace: no records to score");
    Result r;
    for (const auto& [label, c] : classes_) {
      if (c.count < 2)
        r.dropped.push_back(label);
      else
        r.classes.emplace(label, c);
    }
    if (r.classes.size() < 2)
      throw FisherError("single-class position: Fisher score needs at least two classes");
    Eigen::ArrayXd weighted = Eigen::ArrayXd::Zero(n_);
    double max_mean_sq = 1.0;
    for (const auto& [label, c] : r.classes) {
      r.used += c.count;
      weighted += static_cast<double>(c.count) * c.mean;
      max_mean_sq = std::max(max_mean_sq, c.mean.square().maxCoeff());
    }
    r.overall_mean = weighted / static_cast<double>(r.used);
    Eigen::ArrayXd num = Eigen::ArrayXd::Zero(n_), den = Eigen::ArrayXd::Zero(n_);
    for (const auto& [label, c] : r.classes) {
      num += static_cast<double>(c.count) * (c.mean - r.overall_mean).square();
      den += c.m2;  // n_c * var_c
    }
    // Rounding floor for "exactly zero" spread in either term.
    const double tol = 1e-24 * static_cast<double>(r.used) * max_mean_sq;
    r.scores.resize(n_);
    for (Eigen::Index i = 0; i < n_; ++i) {
      const bool num0 = num(i) <= tol, den0 = den(i) <= tol;
      if (den0) {
        r.scores(i) = num0 ? 0.0 : kFisherSentinel;
        if (!num0) ++r.sentinels;
      } else {
        r.scores(i) = std::min(num(i) / den(i), kFisherSentinel);
      }
    }
    return r;
  }

 private:
  Eigen::Index n_;
  std::map<std::string, ClassMoments> classes_;
};

namespace detail {

inline std::vector<int> all_layers(std::uint32_t n) {
  std::vector<int> v(n);
  std::iota(v.begin(), v.end(), 0);
  return v;
}

inline PositionFisher make_position_fisher(Position p, const FisherAccumulator::Result& r,
                                           std::size_t n_layers, std::uint32_t d) {
  PositionFisher pf;
  pf.position = p;
  const auto rows = static_cast<Eigen::Index>(n_layers);
  pf.scores = Eigen::Map<const Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic,
                                             Eigen::RowMajor>>(r.scores.data(), rows, d);
  pf.overall_mean = Eigen::Map<const Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic,
                                                   Eigen::RowMajor>>(r.overall_mean.data(), rows,
                                                                     d);
  pf.classes = r.classes;
  for (const auto& [k, c] : r.classes) pf.census[k] = c.count;
  pf.dropped = r.dropped;
  pf.records_used = r.used;
  pf.sentinel_count = r.sentinels;
  return pf;
}

}  // namespace detail

// Streams the trace once and scores every neuron of `layers` for each of
// `positions`. An empty layer list selects every layer.
inline FisherTable fisher_scores(const std::string& trace_path, std::vector<int> layers = {},
                                 std::vector<Position> positions = {kPositions.begin(),
                                                                    kPositions.end()}) {
  TraceReader rd(trace_path);
  const auto& h = rd.header();
  if (layers.empty()) layers = detail::all_layers(h.n_layers);
  for (int l : layers)
    if (l < 0 || static_cast<std::uint32_t>(l) >= h.n_layers)
      throw FisherError("layer " + std::to_string(l) + " out of range for trace");
  const Eigen::Index nf = static_cast<Eigen::Index>(layers.size()) * h.d_neurons;
  std::vector<FisherAccumulator> acc(positions.size(), FisherAccumulator(nf));
  Eigen::ArrayXd x(nf);
  TraceRecord r;
  while (rd.next(r)) {
    for (std::size_t li = 0; li < layers.size(); ++li) {
      auto s = r.layer(static_cast<std::uint32_t>(layers[li]), h.d_neurons);
      for (std::uint32_t j = 0; j < h.d_neurons; ++j)
        x(static_cast<Eigen::Index>(li * h.d_neurons + j)) = s[j];
    }
    for (std::size_t pi = 0; pi < positions.size(); ++pi) acc[pi].add(r.cls(positions[pi]), x);
  }
  FisherTable t;
  t.model_id = h.metadata.value("model_id", std::string("unknown"));
  t.op = h.metadata.value("operator", std::string("unknown"));
  t.d_neurons = h.d_neurons;
  t.layers = layers;
  for (std::size_t pi = 0; pi < positions.size(); ++pi)
    t.positions.push_back(
        detail::make_position_fisher(positions[pi], acc[pi].finalize(), layers.size(), h.d_neurons));
  return t;
}

// In-memory variant over a [samples x d] matrix for one layer.
inline Eigen::ArrayXd fisher_scores_matrix(const Eigen::MatrixXd& x,
                                           const std::vector<std::string>& labels) {
  if (static_cast<std::size_t>(x.rows()) != labels.size())
    throw FisherError("label count does not match sample count");
  FisherAccumulator acc(x.cols());
  for (Eigen::Index i = 0; i < x.rows(); ++i) acc.add(labels[i], x.row(i).transpose().array());
  return acc.finalize().scores;
}

// --- circuits --------------------------------------------------------------

struct Circuit {
  std::string model_id;
  std::string op;
  Position position = Position::unit;
  double threshold = 0;
  std::uint32_t d_neurons = 0;
  std::vector<int> layers;
  std::map<int, std::vector<int>> neurons;  // layer -> sorted indices

  std::size_t size() const {
    std::size_t n = 0;
    for (auto& [l, v] : neurons) n += v.size();
    return n;
  }
  bool empty() const { return size() == 0; }
  const std::vector<int>& at(int layer) const {
    static const std::vector<int> none;
    auto it = neurons.find(layer);
    return it == neurons.end() ? none : it->second;
  }
};

// Neurons with F > t in each layer of `layers` (empty = every table layer).
inline Circuit select_circuit(const FisherTable& f, Position d, double t,
                              std::vector<int> layers = {}) {
  if (!(t > 0) || !std::isfinite(t)) throw FisherError("threshold must be in (0, inf)");
  if (layers.empty()) layers = f.layers;
  const auto& pf = f.at(d);
  Circuit c;
  c.model_id = f.model_id;
  c.op = f.op;
  c.position = d;
  c.threshold = t;
  c.d_neurons = f.d_neurons;
  c.layers = layers;
  for (int l : layers) {
    const int row = f.layer_row(l);
    auto& v = c.neurons[l];
    for (std::uint32_t i = 0; i < f.d_neurons; ++i)
      if (pf.scores(row, i) > t) v.push_back(static_cast<int>(i));
  }
  return c;
}

// Every neuron of every layer in `layers`.
inline Circuit full_circuit(const FisherTable& f, Position d, std::vector<int> layers) {
  Circuit c;
  c.model_id = f.model_id;
  c.op = f.op;
  c.position = d;
  c.threshold = 0;
  c.d_neurons = f.d_neurons;
  c.layers = layers;
  for (int l : layers) {
    auto& v = c.neurons[l];
    v.resize(f.d_neurons);
    std::iota(v.begin(), v.end(), 0);
  }
  return c;
}

inline double min_score(const FisherTable& f, Position d, const std::vector<int>& layers) {
  double m = std::numeric_limits<double>::infinity();
  for (int l : layers) m = std::min(m, f.at(d).scores.row(f.layer_row(l)).minCoeff());
  return m;
}

inline std::size_t intersection_size(const std::vector<int>& a, const std::vector<int>& b) {
  std::size_t n = 0;
  auto i = a.begin();
  auto j = b.begin();
  while (i != a.end() && j != b.end()) {
    if (*i < *j)
      ++i;
    else if (*j < *i)
      ++j;
    else {
      ++n;
      ++i;
      ++j;
    }
  }
  return n;
}

// |A n B| / min(|A|, |B|) in percent; 0 when either set is empty.
inline double overlap_percent(const std::vector<int>& a, const std::vector<int>& b) {
  const std::size_t m = std::min(a.size(), b.size());
  if (m == 0) return 0.0;
  return 100.0 * static_cast<double>(intersection_size(a, b)) / static_cast<double>(m);
}

struct CircuitStatsRow {
  int layer = 0;
  std::array<std::size_t, 3> size{};        // by Position
  std::array<double, 3> size_percent{};
  double overlap_unit_tens = 0, overlap_unit_hundreds = 0, overlap_tens_hundreds = 0;
};

struct CircuitStats {
  double threshold = 0;
  std::uint32_t d_neurons = 0;
  std::vector<CircuitStatsRow> rows;
  double mean_size_percent = 0;   // over layers and positions
  std::vector<std::string> flags;

  std::string headline() const {
    std::ostringstream os;
    os.setf(std::ios::fixed);
    os.precision(1);
    os << "avg " << mean_size_percent << "% of MLP neurons";
    return os.str();
  }
};

inline CircuitStats circuit_stats(const std::array<Circuit, 3>& by_position) {
  CircuitStats s;
  const Circuit& u = by_position[0];
  s.threshold = u.threshold;
  s.d_neurons = u.d_neurons;
  for (const auto& c : by_position) {
    if (c.layers != u.layers || c.threshold != u.threshold)
      throw FisherError("circuit_stats needs circuits with the same layers and threshold");
    if (c.empty()) s.flags.push_back(std::string("empty circuit at ") + to_string(c.position));
  }
  double total = 0;
  for (int l : u.layers) {
    CircuitStatsRow row;
    row.layer = l;
    for (std::size_t p = 0; p < 3; ++p) {
      row.size[p] = by_position[p].at(l).size();
      row.size_percent[p] = u.d_neurons ? 100.0 * row.size[p] / u.d_neurons : 0.0;
      total += row.size_percent[p];
    }
    row.overlap_unit_tens = overlap_percent(by_position[0].at(l), by_position[1].at(l));
    row.overlap_unit_hundreds = overlap_percent(by_position[0].at(l), by_position[2].at(l));
    row.overlap_tens_hundreds = overlap_percent(by_position[1].at(l), by_position[2].at(l));
    s.rows.push_back(row);
  }
  if (!u.layers.empty()) s.mean_size_percent = total / (3.0 * u.layers.size());
  return s;
}

// Indices of the K highest scores in one row (ties: lower index first).
inline std::vector<int> top_k(const Eigen::Ref<const Eigen::RowVectorXd>& scores, int k) {
  std::vector<int> idx(static_cast<std::size_t>(scores.size()));
  std::iota(idx.begin(), idx.end(), 0);
  std::stable_sort(idx.begin(), idx.end(), [&](int a, int b) { return scores(a) > scores(b); });
  idx.resize(static_cast<std::size_t>(k));
  std::sort(idx.begin(), idx.end());
  return idx;
}

struct TopKOverlapRow {
  int layer = 0;
  std::map<int, double> percent;  // K -> overlap %
};

inline std::vector<TopKOverlapRow> topk_overlap(const FisherTable& a, const FisherTable& b,
                                                Position d, const std::vector<int>& ks) {
  if (a.layers != b.layers || a.d_neurons != b.d_neurons)
    throw FisherError("top-K overlap needs tables over the same layers and width");
  for (int k : ks)
    if (k < 1 || static_cast<std::uint32_t>(k) > a.d_neurons)
      throw FisherError("K=" + std::to_string(k) + " exceeds d_neurons");
  std::vector<TopKOverlapRow> out;
  for (std::size_t li = 0; li < a.layers.size(); ++li) {
    TopKOverlapRow row;
    row.layer = a.layers[li];
    for (int k : ks) {
      const auto ta = top_k(a.at(d).scores.row(static_cast<Eigen::Index>(li)), k);
      const auto tb = top_k(b.at(d).scores.row(static_cast<Eigen::Index>(li)), k);
      row.percent[k] = 100.0 * static_cast<double>(intersection_size(ta, tb)) / k;
    }
    out.push_back(row);
  }
  return out;
}

// Default K list clipped to the neuron count.
inline std::vector<int> default_topk(std::uint32_t d_neurons) {
  std::vector<int> ks;
  for (int k : kDefaultTopK)
    if (static_cast<std::uint32_t>(k) <= d_neurons) ks.push_back(k);
  if (ks.empty()) ks.push_back(static_cast<int>(d_neurons));
  return ks;
}

// --- persistence -------------------------------------------------------------

inline constexpr char kFisherMagic[4] = {'D', 'G', 'C', 'F'};
inline constexpr std::uint16_t kFisherVersion = 1;

// DGCF: "DGCF" | u16 version | u16 endian marker | u32 len + JSON metadata |
// u32 n_layers | u32 d_neurons | u32 n_positions | per position:
// u8 position | f64[n_layers x d_neurons] scores | f64[...] overall means.
inline void save_fisher(const std::string& path, const FisherTable& t) {
  nlohmann::ordered_json meta;
  meta["model_id"] = t.model_id;
  meta["operator"] = t.op;
  meta["layers"] = t.layers;
  meta["d_neurons"] = t.d_neurons;
  for (const auto& p : t.positions) {
    nlohmann::ordered_json pj;
    pj["records_used"] = p.records_used;
    pj["sentinel_count"] = p.sentinel_count;
    pj["dropped_classes"] = p.dropped;
    nlohmann::ordered_json census;
    for (auto& [k, n] : p.census) census[k] = n;
    pj["class_census"] = census;
    meta["positions"][to_string(p.position)] = pj;
  }
  std::string buf;
  buf.append(kFisherMagic, 4);
  le::put<std::uint16_t>(buf, kFisherVersion);
  le::put<std::uint16_t>(buf, kEndianMarker);
  le::put_string(buf, meta.dump());
  le::put<std::uint32_t>(buf, static_cast<std::uint32_t>(t.layers.size()));
  le::put<std::uint32_t>(buf, t.d_neurons);
  le::put<std::uint32_t>(buf, static_cast<std::uint32_t>(t.positions.size()));
  for (const auto& p : t.positions) {
    le::put<std::uint8_t>(buf, static_cast<std::uint8_t>(p.position));
    for (const Eigen::MatrixXd* m : {&p.scores, &p.overall_mean})
      for (Eigen::Index r = 0; r < m->rows(); ++r)
        for (Eigen::Index c = 0; c < m->cols(); ++c) le::put<double>(buf, (*m)(r, c));
  }
  std::ofstream os(path, std::ios::binary);
  if (!os) throw FormatError("cannot open for writing: " + path);
  os.write(buf.data(), static_cast<std::streamsize>(buf.size()));
  if (!os) throw FormatError("write failed: " + path);
}

inline FisherTable load_fisher(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw FormatError("cannot open Fisher table: " + path);
  std::stringstream ss;
  ss << is.rdbuf();
  const std::string buf = ss.str();
  le::Cursor c(buf.data(), buf.size(), "Fisher table " + path);
  char magic[4];
  for (char& ch : magic) ch = static_cast<char>(c.get<std::uint8_t>());
  if (std::memcmp(magic, kFisherMagic, 4) != 0) throw FormatError("bad Fisher table magic");
  if (c.get<std::uint16_t>() != kFisherVersion) throw FormatError("unsupported DGCF version");
  if (c.get<std::uint16_t>() != kEndianMarker) throw FormatError("bad endianness marker");
  const auto meta = nlohmann::ordered_json::parse(c.get_string());
  FisherTable t;
  t.model_id = meta.value("model_id", std::string("unknown"));
  t.op = meta.value("operator", std::string("unknown"));
  t.layers = meta.at("layers").get<std::vector<int>>();
  const auto nl = c.get<std::uint32_t>();
  t.d_neurons = c.get<std::uint32_t>();
  const auto np = c.get<std::uint32_t>();
  if (nl != t.layers.size()) throw FormatError("DGCF layer count mismatch");
  for (std::uint32_t i = 0; i < np; ++i) {
    PositionFisher p;
    const auto code = c.get<std::uint8_t>();
    if (code > 2) throw FormatError("bad position code in DGCF");
    p.position = static_cast<Position>(code);
    for (Eigen::MatrixXd* m : {&p.scores, &p.overall_mean}) {
      m->resize(nl, t.d_neurons);
      for (Eigen::Index r = 0; r < m->rows(); ++r)
        for (Eigen::Index col = 0; col < m->cols(); ++col) (*m)(r, col) = c.get<double>();
    }
    if (meta.contains("positions") && meta["positions"].contains(to_string(p.position))) {
      const auto& pj = meta["positions"][to_string(p.position)];
      p.records_used = pj.value("records_used", std::size_t{0});
      p.sentinel_count = pj.value("sentinel_count", std::size_t{0});
      p.dropped = pj.value("dropped_classes", std::vector<std::string>{});
      if (pj.contains("class_census"))
        for (auto it = pj["class_census"].begin(); it != pj["class_census"].end(); ++it)
          p.census[it.key()] = it.value().get<std::size_t>();
    }
    t.positions.push_back(std::move(p));
  }
  return t;
}

inline nlohmann::ordered_json circuit_to_json(const Circuit& c) {
  nlohmann::ordered_json j;
  j["model_id"] = c.model_id;
  j["operator"] = c.op;
  j["position"] = to_string(c.position);
  j["threshold"] = c.threshold;
  j["d_neurons"] = c.d_neurons;
  j["layers"] = c.layers;
  nlohmann::ordered_json n = nlohmann::ordered_json::object();
  for (int l : c.layers) n[std::to_string(l)] = c.at(l);
  j["neurons"] = n;
  return j;
}

inline Circuit circuit_from_json(const nlohmann::ordered_json& j) {
  Circuit c;
  c.model_id = j.value("model_id", std::string("unknown"));
  c.op = j.value("operator", std::string("unknown"));
  c.position = parse_position(j.at("position").get<std::string>());
  c.threshold = j.at("threshold").get<double>();
  c.d_neurons = j.at("d_neurons").get<std::uint32_t>();
  c.layers = j.at("layers").get<std::vector<int>>();
  for (int l : c.layers) {
    auto v = j.at("neurons").at(std::to_string(l)).get<std::vector<int>>();
    std::sort(v.begin(), v.end());
    for (int i : v)
      if (i < 0 || static_cast<std::uint32_t>(i) >= c.d_neurons)
        throw FisherError("circuit neuron index out of range");
    c.neurons[l] = std::move(v);
  }
  return c;
}

inline void save_circuit(const std::string& path, const Circuit& c) {
  std::ofstream os(path);
  if (!os) throw FormatError("cannot open for writing: " + path);
  os << circuit_to_json(c).dump(2) << '\n';
}

inline Circuit load_circuit(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw FormatError("cannot open circuit: " + path);
  return circuit_from_json(nlohmann::ordered_json::parse(is));
}

}  // namespace dgc
