#pragma once

// DGC1 activation traces: final-token activations at one capture site plus
// the output distribution, one record per prompt.
//
// Layout (little-endian):
//
//   header
//     char[4]  "DGC1"
//     u16      version (1)
//     u16      endianness marker 0xFEFF
//     u8       prob mode (0 dense, 1 sparse)
//     u8[3]    reserved, zero
//     u32      n_layers
//     u32      d_neurons
//     u32      vocab_size
//     u32      metadata length, then that many bytes of UTF-8 JSON
//   records, repeated until end of file
//     u32      body length in bytes
//     u32      prompt length, then prompt bytes
//     u8       operator (0 add, 1 sub)
//     char[6]  digit-pair class at unit, tens, hundreds (2 chars each)
//     i32      expected result
//     f32[n_layers * d_neurons]   activations, layer-major
//     dense:   f32[vocab_size]
//     sparse:  u32 count, then count x (u32 token id, f32 prob), ids ascending

#include <array>
#include <fstream>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "json.hpp"

#include "dgc/arith_data.hpp"
#include "dgc/binary_io.hpp"

namespace dgc {

inline constexpr char kTraceMagic[4] = {'D', 'G', 'C', '1'};
inline constexpr std::uint16_t kTraceVersion = 1;
inline constexpr std::uint32_t kDenseVocabLimit = 4096;

enum class ProbMode : std::uint8_t { dense = 0, sparse = 1 };

struct TraceHeader {
  std::uint16_t version = kTraceVersion;
  ProbMode prob_mode = ProbMode::dense;
  std::uint32_t n_layers = 0;
  std::uint32_t d_neurons = 0;
  std::uint32_t vocab_size = 0;
  nlohmann::ordered_json metadata = nlohmann::ordered_json::object();
};

struct TraceRecord {
  std::string prompt;
  Operator op = Operator::add;
  std::array<std::string, 3> digit_class;  // indexed by Position
  int expected_result = 0;
  std::vector<float> activations;          // [n_layers x d_neurons]
  std::vector<float> dense_probs;
  std::vector<std::pair<std::uint32_t, float>> sparse_probs;

  const std::string& cls(Position p) const { return digit_class[static_cast<int>(p)]; }

  std::span<const float> layer(std::uint32_t l, std::uint32_t d_neurons) const {
    return {activations.data() + static_cast<std::size_t>(l) * d_neurons, d_neurons};
  }

  float prob(std::uint32_t token) const {
    if (!dense_probs.empty()) return token < dense_probs.size() ? dense_probs[token] : 0.0f;
    auto it = std::lower_bound(sparse_probs.begin(), sparse_probs.end(), token,
                               [](const auto& e, std::uint32_t t) { return e.first < t; });
    return it != sparse_probs.end() && it->first == token ? it->second : 0.0f;
  }
};

inline TraceRecord make_trace_record(const ArithmeticPrompt& p, std::vector<float> activations,
                                     std::vector<float> probs) {
  TraceRecord r;
  r.prompt = p.render();
  r.op = p.op;
  for (Position q : kPositions) r.digit_class[static_cast<int>(q)] = p.digit_class(q);
  r.expected_result = p.expected_result;
  r.activations = std::move(activations);
  r.dense_probs = std::move(probs);
  return r;
}

class TraceWriter {
 public:
  TraceWriter(const std::string& path, TraceHeader header)
      : header_(std::move(header)), os_(path, std::ios::binary), path_(path) {
    if (!os_) throw FormatError("cannot open for writing: " + path);
    if (header_.n_layers == 0 || header_.d_neurons == 0)
      throw FormatError("trace header needs n_layers > 0 and d_neurons > 0");
    if (header_.prob_mode == ProbMode::dense && header_.vocab_size > kDenseVocabLimit)
      throw FormatError("sparse probability mode is required when vocab_size > 4096");
    if (!header_.metadata.is_object()) throw FormatError("trace metadata must be a JSON object");
    std::string buf;
    buf.append(kTraceMagic, 4);
    le::put<std::uint16_t>(buf, header_.version);
    le::put<std::uint16_t>(buf, kEndianMarker);
    le::put<std::uint8_t>(buf, static_cast<std::uint8_t>(header_.prob_mode));
    for (int i = 0; i < 3; ++i) le::put<std::uint8_t>(buf, 0);
    le::put<std::uint32_t>(buf, header_.n_layers);
    le::put<std::uint32_t>(buf, header_.d_neurons);
    le::put<std::uint32_t>(buf, header_.vocab_size);
    le::put_string(buf, header_.metadata.dump());
    emit(buf);
  }

  void write(const TraceRecord& r) {
    const std::string where = "record " + std::to_string(count_);
    const std::size_t want = static_cast<std::size_t>(header_.n_layers) * header_.d_neurons;
    if (r.activations.size() != want)
      throw FormatError(where + ": activation block has " + std::to_string(r.activations.size()) +
                        " floats, header expects " + std::to_string(want));
    for (const auto& c : r.digit_class)
      if (c.size() != 2) throw FormatError(where + ": digit class must be two characters");
    body_.clear();
    le::put_string(body_, r.prompt);
    le::put<std::uint8_t>(body_, r.op == Operator::add ? 0 : 1);
    for (const auto& c : r.digit_class) body_.append(c);
    le::put<std::int32_t>(body_, r.expected_result);
    le::put_array<float>(body_, r.activations);
    if (header_.prob_mode == ProbMode::dense) {
      if (r.dense_probs.size() != header_.vocab_size)
        throw FormatError(where + ": dense probability row has wrong length");
      le::put_array<float>(body_, r.dense_probs);
    } else {
      std::uint32_t prev = 0;
      for (std::size_t i = 0; i < r.sparse_probs.size(); ++i) {
        auto [id, p] = r.sparse_probs[i];
        if ((i > 0 && id <= prev) || id >= header_.vocab_size)
          throw FormatError(where + ": sparse token ids must be ascending and < vocab_size");
        if (!(p >= 0.0f && p <= 1.0f)) throw FormatError(where + ": probability outside [0,1]");
        prev = id;
      }
      le::put<std::uint32_t>(body_, static_cast<std::uint32_t>(r.sparse_probs.size()));
      for (auto [id, p] : r.sparse_probs) {
        le::put<std::uint32_t>(body_, id);
        le::put<float>(body_, p);
      }
    }
    std::string len;
    le::put<std::uint32_t>(len, static_cast<std::uint32_t>(body_.size()));
    emit(len);
    emit(body_);
    ++count_;
  }

  std::size_t count() const { return count_; }
  const TraceHeader& header() const { return header_; }

  void close() {
    os_.flush();
    if (!os_) throw FormatError("write failed: " + path_);
    os_.close();
  }

 private:
  void emit(const std::string& s) {
    os_.write(s.data(), static_cast<std::streamsize>(s.size()));
    if (!os_) throw FormatError("write failed: " + path_);
  }

  TraceHeader header_;
  std::ofstream os_;
  std::string path_;
  std::string body_;
  std::size_t count_ = 0;
};

template <class Range>
std::size_t write_trace(const std::string& path, const TraceHeader& header, const Range& records) {
  TraceWriter w(path, header);
  for (const auto& r : records) w.write(r);
  w.close();
  return w.count();
}

// Sequential reader; holds one record body at a time.
class TraceReader {
 public:
  explicit TraceReader(const std::string& path) : is_(path, std::ios::binary), path_(path) {
    if (!is_) throw FormatError("cannot open trace: " + path);
    char magic[4];
    le::read_exact(is_, magic, 4, "trace header");
    if (std::memcmp(magic, kTraceMagic, 4) != 0) throw FormatError("bad trace magic in " + path);
    header_.version = le::read_value<std::uint16_t>(is_, "trace header");
    if (header_.version != kTraceVersion)
      throw FormatError("unsupported trace version " + std::to_string(header_.version));
    if (le::read_value<std::uint16_t>(is_, "trace header") != kEndianMarker)
      throw FormatError("bad endianness marker");
    const auto mode = le::read_value<std::uint8_t>(is_, "trace header");
    if (mode > 1) throw FormatError("unknown probability mode");
    header_.prob_mode = static_cast<ProbMode>(mode);
    char reserved[3];
    le::read_exact(is_, reserved, 3, "trace header");
    header_.n_layers = le::read_value<std::uint32_t>(is_, "trace header");
    header_.d_neurons = le::read_value<std::uint32_t>(is_, "trace header");
    header_.vocab_size = le::read_value<std::uint32_t>(is_, "trace header");
    const auto meta_len = le::read_value<std::uint32_t>(is_, "trace header");
    std::string meta(meta_len, '\0');
    le::read_exact(is_, meta.data(), meta_len, "trace metadata");
    try {
      header_.metadata = nlohmann::ordered_json::parse(meta);
    } catch (const std::exception& e) {
      throw FormatError(std::string("trace metadata does not parse: ") + e.what());
    }
    if (header_.d_neurons == 0 || header_.n_layers == 0)
      throw FormatError("trace header has zero n_layers or d_neurons");
  }

  const TraceHeader& header() const { return header_; }
  std::size_t records_read() const { return index_; }

  // Returns false at a clean end of file.
  bool next(TraceRecord& r) {
    char raw[4];
    is_.read(raw, 4);
    if (is_.gcount() == 0 && is_.eof()) return false;
    const std::string what = "record " + std::to_string(index_) + " in " + path_;
    if (is_.gcount() != 4) throw FormatError("truncated " + what);
    const auto len = le::Cursor(raw, 4, what).get<std::uint32_t>();
    body_.resize(len);
    le::read_exact(is_, body_.data(), len, what);
    le::Cursor c(body_.data(), body_.size(), what);
    r.prompt = c.get_string();
    const auto op = c.get<std::uint8_t>();
    if (op > 1) throw FormatError(what + ": bad operator byte");
    r.op = op == 0 ? Operator::add : Operator::sub;
    for (auto& cls : r.digit_class) {
      cls.resize(2);
      cls[0] = static_cast<char>(c.get<std::uint8_t>());
      cls[1] = static_cast<char>(c.get<std::uint8_t>());
    }
    r.expected_result = c.get<std::int32_t>();
    r.activations.resize(static_cast<std::size_t>(header_.n_layers) * header_.d_neurons);
    c.get_array(std::span<float>(r.activations));
    r.dense_probs.clear();
    r.sparse_probs.clear();
    if (header_.prob_mode == ProbMode::dense) {
      r.dense_probs.resize(header_.vocab_size);
      c.get_array(std::span<float>(r.dense_probs));
    } else {
      const auto n = c.get<std::uint32_t>();
      r.sparse_probs.reserve(n);
      for (std::uint32_t i = 0; i < n; ++i) {
        const auto id = c.get<std::uint32_t>();
        const auto p = c.get<float>();
        r.sparse_probs.emplace_back(id, p);
      }
    }
    if (c.remaining() != 0) throw FormatError(what + ": trailing bytes in record body");
    ++index_;
    return true;
  }

 private:
  std::ifstream is_;
  std::string path_;
  TraceHeader header_;
  std::string body_;
  std::size_t index_ = 0;
};

// Whole-trace load; for small traces and tests.
inline std::pair<TraceHeader, std::vector<TraceRecord>> read_trace(const std::string& path) {
  TraceReader rd(path);
  std::vector<TraceRecord> out;
  TraceRecord r;
  while (rd.next(r)) out.push_back(r);
  return {rd.header(), std::move(out)};
}

using ClassIndex = std::map<std::string, std::vector<std::size_t>>;

inline ClassIndex index_by_class(const std::string& path, Position d) {
  TraceReader rd(path);
  ClassIndex out;
  TraceRecord r;
  std::size_t i = 0;
  while (rd.next(r)) out[r.cls(d)].push_back(i++);
  return out;
}

// Labels and operators of every record, without activations.
struct TraceLabels {
  std::vector<std::array<std::string, 3>> digit_class;
  std::vector<Operator> op;
  std::vector<int> expected_result;
  std::size_t size() const { return op.size(); }
};

inline TraceLabels read_labels(const std::string& path) {
  TraceReader rd(path);
  TraceLabels out;
  TraceRecord r;
  while (rd.next(r)) {
    out.digit_class.push_back(r.digit_class);
    out.op.push_back(r.op);
    out.expected_result.push_back(r.expected_result);
  }
  return out;
}

// One layer's activations for every record: [n_records x d_neurons].
inline Eigen::MatrixXd load_layer(const std::string& path, std::uint32_t layer) {
  TraceReader rd(path);
  if (layer >= rd.header().n_layers) throw FormatError("layer out of range for trace");
  const auto d = rd.header().d_neurons;
  std::vector<std::vector<float>> rows;
  TraceRecord r;
  while (rd.next(r)) {
    auto s = r.layer(layer, d);
    rows.emplace_back(s.begin(), s.end());
  }
  Eigen::MatrixXd m(rows.size(), d);
  for (std::size_t i = 0; i < rows.size(); ++i)
    for (std::uint32_t j = 0; j < d; ++j) m(static_cast<Eigen::Index>(i), j) = rows[i][j];
  return m;
}

}  // namespace dgc
