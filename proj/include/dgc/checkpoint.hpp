#pragma once

// DGCM checkpoint files.
//
//   "DGCM" | u16 version | u16 endian marker (0xFEFF)
//   u32 len | config JSON (model dims, seed, tokenizer, vocab size, extras)
//   u32 n_tensors | n_tensors x (u32 len | name | u32 rows | u32 cols | u64 offset)
//   u64 n_floats | n_floats x f32
//
// All integers and floats little-endian; offsets count floats from the start
// of the data block.

#include <fstream>
#include <sstream>

#include "json.hpp"

#include "dgc/binary_io.hpp"
#include "dgc/transformer.hpp"

namespace dgc {

inline constexpr char kCheckpointMagic[4] = {'D', 'G', 'C', 'M'};
inline constexpr std::uint16_t kCheckpointVersion = 1;

inline nlohmann::ordered_json config_to_json(const ModelConfig& c, std::size_t vocab) {
  nlohmann::ordered_json j;
  j["n_layers"] = c.n_layers;
  j["d_model"] = c.d_model;
  j["d_mlp"] = c.d_mlp;
  j["n_heads"] = c.n_heads;
  j["context_len"] = c.context_len;
  j["seed"] = c.seed;
  j["tokenizer"] = to_string(c.tokenizer);
  j["vocab_size"] = vocab;
  return j;
}

inline ModelConfig config_from_json(const nlohmann::ordered_json& j) {
  ModelConfig c;
  c.n_layers = j.at("n_layers").get<int>();
  c.d_model = j.at("d_model").get<int>();
  c.d_mlp = j.at("d_mlp").get<int>();
  c.n_heads = j.at("n_heads").get<int>();
  c.context_len = j.at("context_len").get<int>();
  c.seed = j.at("seed").get<std::uint64_t>();
  c.tokenizer = parse_tokenizer_mode(j.at("tokenizer").get<std::string>());
  c.validate();
  return c;
}

inline void save_checkpoint(const std::string& path, const Model<float>& m,
                            const nlohmann::ordered_json& extras = {}) {
  std::string buf;
  buf.append(kCheckpointMagic, 4);
  le::put<std::uint16_t>(buf, kCheckpointVersion);
  le::put<std::uint16_t>(buf, kEndianMarker);
  auto cfg = config_to_json(m.config, m.vocab_size());
  if (!extras.is_null()) cfg["extras"] = extras;
  le::put_string(buf, cfg.dump());
  le::put<std::uint32_t>(buf, static_cast<std::uint32_t>(m.layout.manifest.size()));
  for (const auto& t : m.layout.manifest) {
    le::put_string(buf, t.name);
    le::put<std::uint32_t>(buf, static_cast<std::uint32_t>(t.rows));
    le::put<std::uint32_t>(buf, static_cast<std::uint32_t>(t.cols));
    le::put<std::uint64_t>(buf, t.offset);
  }
  le::put<std::uint64_t>(buf, m.params.size());
  le::put_array<float>(buf, m.params);
  std::ofstream os(path, std::ios::binary);
  if (!os) throw FormatError("cannot open for writing: " + path);
  os.write(buf.data(), static_cast<std::streamsize>(buf.size()));
  if (!os) throw FormatError("write failed: " + path);
}

struct LoadedCheckpoint {
  Model<float> model;
  nlohmann::ordered_json extras;
};

inline LoadedCheckpoint load_checkpoint(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw FormatError("cannot open checkpoint: " + path);
  std::stringstream ss;
  ss << is.rdbuf();
  const std::string buf = ss.str();
  le::Cursor cur(buf.data(), buf.size(), "checkpoint " + path);
  char magic[4];
  for (char& ch : magic) ch = static_cast<char>(cur.get<std::uint8_t>());
  if (std::memcmp(magic, kCheckpointMagic, 4) != 0) throw FormatError("bad checkpoint magic");
  if (cur.get<std::uint16_t>() != kCheckpointVersion)
    throw FormatError("unsupported checkpoint version");
  if (cur.get<std::uint16_t>() != kEndianMarker) throw FormatError("bad endianness marker");
  const auto cfg = nlohmann::ordered_json::parse(cur.get_string());
  LoadedCheckpoint out;
  out.model = Model<float>(config_from_json(cfg));
  if (cfg.at("vocab_size").get<std::size_t>() != out.model.vocab_size())
    throw FormatError("checkpoint vocabulary size does not match its tokenizer");
  if (cfg.contains("extras")) out.extras = cfg.at("extras");
  const auto n = cur.get<std::uint32_t>();
  if (n != out.model.layout.manifest.size()) throw FormatError("tensor manifest size mismatch");
  for (const auto& want : out.model.layout.manifest) {
    const std::string name = cur.get_string();
    const auto rows = cur.get<std::uint32_t>(), cols = cur.get<std::uint32_t>();
    const auto off = cur.get<std::uint64_t>();
    if (name != want.name || rows != static_cast<std::uint32_t>(want.rows) ||
        cols != static_cast<std::uint32_t>(want.cols) || off != want.offset)
      throw FormatError("tensor manifest mismatch at " + want.name);
  }
  const auto nf = cur.get<std::uint64_t>();
  if (nf != out.model.params.size()) throw FormatError("parameter count mismatch");
  cur.get_array(std::span<float>(out.model.params));
  return out;
}

}  // namespace dgc
