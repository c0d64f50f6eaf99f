#pragma once

// Pre-norm decoder-only transformer: learned positions, GELU MLP, tied
// unembedding. Scalar-templated so the same code runs in float (training,
// inference) and double (gradient checks).
//
// A batch is stored as a prefix trie: sequences that share a prefix share
// the rows computed for it, so a batch of prompts with a common one-shot
// exemplar only pays for the exemplar once. Attention for a row runs over
// the rows on its root path.

#include <Eigen/Dense>

#include <cmath>
#include <cstdint>
#include <limits>
#include <map>
#include <optional>
#include <random>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "dgc/tokenizer.hpp"

namespace dgc {

template <class S>
using RowMat = Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <class S>
using RowVec = Eigen::Matrix<S, 1, Eigen::Dynamic>;
// Aligned storage: Eigen's vectorized reductions peel by address, so an
// allocation-dependent alignment would change summation order between runs.
template <class S>
using Buffer = std::vector<S, Eigen::aligned_allocator<S>>;

struct ModelError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct ModelConfig {
  int n_layers = 6;
  int d_model = 128;
  int d_mlp = 512;
  int n_heads = 4;
  int context_len = 32;
  std::uint64_t seed = 1;
  TokenizerMode tokenizer = TokenizerMode::multi_digit;

  int head_dim() const { return d_model / n_heads; }

  void validate() const {
    if (n_layers < 1 || d_model < 1 || d_mlp < 1 || n_heads < 1 || context_len < 1)
      throw ModelError("model dimensions must be >= 1");
    if (d_model % n_heads != 0) throw ModelError("d_model must be divisible by n_heads");
  }

  friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

struct TensorEntry {
  std::string name;
  int rows = 0;
  int cols = 0;
  std::size_t offset = 0;
  std::size_t size() const { return static_cast<std::size_t>(rows) * cols; }
};

struct LayerSlots {
  std::size_t ln1_g, ln1_b, w_qkv, b_qkv, w_o, b_o, ln2_g, ln2_b, w_in, b_in, w_out, b_out;
};

// Offsets of every tensor inside one flat parameter vector.
class ParamLayout {
 public:
  ParamLayout() = default;
  ParamLayout(const ModelConfig& c, std::size_t vocab) {
    c.validate();
    const int D = c.d_model, F = c.d_mlp, V = static_cast<int>(vocab);
    tok_emb = add("tok_emb", V, D);
    pos_emb = add("pos_emb", c.context_len, D);
    for (int l = 0; l < c.n_layers; ++l) {
      const std::string p = "layers." + std::to_string(l) + ".";
      LayerSlots s{};
      s.ln1_g = add(p + "ln1.g", 1, D);
      s.ln1_b = add(p + "ln1.b", 1, D);
      s.w_qkv = add(p + "attn.w_qkv", D, 3 * D);
      s.b_qkv = add(p + "attn.b_qkv", 1, 3 * D);
      s.w_o = add(p + "attn.w_o", D, D);
      s.b_o = add(p + "attn.b_o", 1, D);
      s.ln2_g = add(p + "ln2.g", 1, D);
      s.ln2_b = add(p + "ln2.b", 1, D);
      s.w_in = add(p + "mlp.w_in", D, F);
      s.b_in = add(p + "mlp.b_in", 1, F);
      s.w_out = add(p + "mlp.w_out", F, D);
      s.b_out = add(p + "mlp.b_out", 1, D);
      layers.push_back(s);
    }
    lnf_g = add("lnf.g", 1, D);
    lnf_b = add("lnf.b", 1, D);
  }

  std::size_t tok_emb = 0, pos_emb = 0, lnf_g = 0, lnf_b = 0, total = 0;
  std::vector<LayerSlots> layers;
  std::vector<TensorEntry> manifest;

 private:
  std::size_t add(std::string name, int rows, int cols) {
    const std::size_t off = total;
    manifest.push_back({std::move(name), rows, cols, off});
    total += static_cast<std::size_t>(rows) * cols;
    return off;
  }
};

template <class S>
struct Model {
  ModelConfig config;
  Tokenizer tokenizer;
  ParamLayout layout;
  Buffer<S> params;

  Model() = default;
  explicit Model(const ModelConfig& c)
      : config(c), tokenizer(c.tokenizer), layout(c, tokenizer.vocab_size()),
        params(layout.total, S(0)) {}

  std::size_t vocab_size() const { return tokenizer.vocab_size(); }

  // GPT-2 style init: N(0, 0.02) weights, residual projections scaled by
  // 1/sqrt(2 * n_layers), unit LayerNorm gains, zero biases.
  static Model random(const ModelConfig& c) {
    Model m(c);
    std::mt19937_64 rng(c.seed);
    std::normal_distribution<double> normal(0.0, 1.0);
    auto fill = [&](std::size_t off, std::size_t n, double sd) {
      for (std::size_t i = 0; i < n; ++i) m.params[off + i] = static_cast<S>(sd * normal(rng));
    };
    auto ones = [&](std::size_t off, std::size_t n) {
      for (std::size_t i = 0; i < n; ++i) m.params[off + i] = S(1);
    };
    const std::size_t D = c.d_model, F = c.d_mlp, V = m.vocab_size();
    const double proj_sd = 0.02 / std::sqrt(2.0 * c.n_layers);
    fill(m.layout.tok_emb, V * D, 0.02);
    fill(m.layout.pos_emb, static_cast<std::size_t>(c.context_len) * D, 0.01);
    for (const auto& s : m.layout.layers) {
      ones(s.ln1_g, D);
      ones(s.ln2_g, D);
      fill(s.w_qkv, D * 3 * D, 0.02);
      fill(s.w_o, D * D, proj_sd);
      fill(s.w_in, D * F, 0.02);
      fill(s.w_out, F * D, proj_sd);
    }
    ones(m.layout.lnf_g, D);
    return m;
  }

  template <class T>
  Model<T> cast() const {
    Model<T> out(config);
    for (std::size_t i = 0; i < params.size(); ++i) out.params[i] = static_cast<T>(params[i]);
    return out;
  }
};

// --- trie batch -------------------------------------------------------------

struct PrefixBatch {
  std::vector<int> token;                   // per row
  std::vector<int> pos;                     // per row
  std::vector<int> owner;                   // a sequence whose path contains the row
  std::vector<std::vector<int>> seq_rows;   // per sequence: row at each position
  std::vector<std::size_t> att_offset;      // per row: start of its attention weights

  std::size_t rows() const { return token.size(); }
  std::size_t sequences() const { return seq_rows.size(); }
  int final_row(std::size_t seq) const { return seq_rows[seq].back(); }

  // With distinct_leaves, the last row of each sequence is never shared, so
  // per-sequence patches at the final token cannot interfere.
  static PrefixBatch build(std::span<const std::vector<int>> seqs, int context_len,
                           bool distinct_leaves = false) {
    PrefixBatch b;
    std::map<std::pair<int, int>, int> child;  // (parent row, token) -> row
    b.seq_rows.reserve(seqs.size());
    for (std::size_t s = 0; s < seqs.size(); ++s) {
      const auto& seq = seqs[s];
      if (seq.empty()) throw ModelError("empty token sequence");
      if (static_cast<int>(seq.size()) > context_len)
        throw ModelError("sequence length " + std::to_string(seq.size()) +
                         " exceeds context " + std::to_string(context_len));
      std::vector<int> rows;
      rows.reserve(seq.size());
      int parent = -1;
      for (std::size_t t = 0; t < seq.size(); ++t) {
        const bool leaf = t + 1 == seq.size();
        int r = -1;
        if (!(leaf && distinct_leaves)) {
          auto it = child.find({parent, seq[t]});
          if (it != child.end()) r = it->second;
        }
        if (r < 0) {
          r = static_cast<int>(b.token.size());
          b.token.push_back(seq[t]);
          b.pos.push_back(static_cast<int>(t));
          b.owner.push_back(static_cast<int>(s));
          if (!(leaf && distinct_leaves)) child.emplace(std::pair{parent, seq[t]}, r);
        }
        rows.push_back(r);
        parent = r;
      }
      b.seq_rows.push_back(std::move(rows));
    }
    b.att_offset.resize(b.rows() + 1);
    std::size_t off = 0;
    for (std::size_t r = 0; r < b.rows(); ++r) {
      b.att_offset[r] = off;
      off += static_cast<std::size_t>(b.pos[r]) + 1;
    }
    b.att_offset[b.rows()] = off;
    return b;
  }

  // Rows attended to by row r, in position order (ends with r itself).
  std::span<const int> path(int r) const {
    const auto& rows = seq_rows[owner[r]];
    return {rows.data(), static_cast<std::size_t>(pos[r]) + 1};
  }
};

// --- activations & patching ------------------------------------------------

enum class Site { attn_out, mlp_hidden, mlp_out, block_out };

inline const char* to_string(Site s) {
  switch (s) {
    case Site::attn_out: return "attn_out";
    case Site::mlp_hidden: return "mlp_hidden";
    case Site::mlp_out: return "mlp_out";
    case Site::block_out: return "block_out";
  }
  return "?";
}
inline Site parse_site(const std::string& s) {
  if (s == "attn_out") return Site::attn_out;
  if (s == "mlp_hidden") return Site::mlp_hidden;
  if (s == "mlp_out") return Site::mlp_out;
  if (s == "block_out") return Site::block_out;
  throw ModelError("unknown site: " + s);
}

// Final-token view of one forward pass.
struct ForwardRecord {
  std::vector<int> tokens;
  int n_layers = 0;
  int d_model = 0;
  int d_mlp = 0;
  bool captured = false;
  std::vector<float> resid_pre;   // [n_layers x d_model]
  std::vector<float> attn_out;    // [n_layers x d_model]
  std::vector<float> mlp_hidden;  // [n_layers x d_mlp]
  std::vector<float> mlp_out;     // [n_layers x d_model]
  std::vector<float> block_out;   // [n_layers x d_model]
  std::vector<float> logits;      // [vocab]
  std::vector<float> probs;       // [vocab]

  int site_width(Site s) const { return s == Site::mlp_hidden ? d_mlp : d_model; }

  std::span<const float> site(Site s, int layer) const {
    const std::vector<float>* v = nullptr;
    switch (s) {
      case Site::attn_out: v = &attn_out; break;
      case Site::mlp_hidden: v = &mlp_hidden; break;
      case Site::mlp_out: v = &mlp_out; break;
      case Site::block_out: v = &block_out; break;
    }
    const std::size_t w = static_cast<std::size_t>(site_width(s));
    if (!captured || layer < 0 || layer >= n_layers || v->size() < (layer + 1) * w)
      throw ModelError("record does not hold site " + std::string(to_string(s)) + " at layer " +
                       std::to_string(layer));
    return {v->data() + layer * w, w};
  }

  int argmax() const {
    return static_cast<int>(std::max_element(probs.begin(), probs.end()) - probs.begin());
  }
};

struct PatchEntry {
  int layer = 0;
  std::optional<std::vector<int>> neurons;  // nullopt = every component
};

struct PatchPlan {
  Site site = Site::mlp_out;
  std::vector<PatchEntry> entries;

  bool touches_nothing() const {
    for (const auto& e : entries)
      if (!e.neurons || !e.neurons->empty()) return false;
    return true;
  }

  void validate(const ModelConfig& c) const {
    const int width = site == Site::mlp_hidden ? c.d_mlp : c.d_model;
    std::map<int, std::vector<bool>> used;
    for (const auto& e : entries) {
      if (e.layer < 0 || e.layer >= c.n_layers)
        throw ModelError("patch layer " + std::to_string(e.layer) + " out of range");
      auto& u = used[e.layer];
      if (u.empty()) u.assign(width, false);
      auto mark = [&](int i) {
        if (i < 0 || i >= width)
          throw ModelError("patch neuron " + std::to_string(i) + " out of range");
        if (u[i]) throw ModelError("overlapping patch entries at layer " + std::to_string(e.layer));
        u[i] = true;
      };
      if (e.neurons)
        for (int i : *e.neurons) mark(i);
      else
        for (int i = 0; i < width; ++i) mark(i);
    }
  }
};

// One patch applied to one sequence of a batch: plan + record to copy from.
struct SequencePatch {
  std::size_t sequence = 0;
  const PatchPlan* plan = nullptr;
  const ForwardRecord* source = nullptr;
};

// --- forward / backward ---------------------------------------------------------

template <class S>
struct LayerCache {
  RowMat<S> xhat1, h1, qkv, ctx, attn_out, mid, xhat2, h2, pre, gelu_tanh, act, mlp_out;
  Buffer<S> rstd1, rstd2;
  Buffer<S> att;  // softmax weights: per row, per head, over the path
};

template <class S>
struct ForwardCache {
  std::vector<RowMat<S>> resid;  // n_layers + 1 entries
  std::vector<LayerCache<S>> layers;
  std::vector<int> out_rows;     // rows whose logits were computed
  RowMat<S> xhatf, hf, logits;
  Buffer<S> rstdf;
};

namespace detail {

template <class S>
Eigen::Map<const RowMat<S>> cmat(const Buffer<S>& p, std::size_t off, int r, int c) {
  return {p.data() + off, r, c};
}
template <class S>
Eigen::Map<RowMat<S>> mmat(Buffer<S>& p, std::size_t off, int r, int c) {
  return {p.data() + off, r, c};
}
template <class S>
Eigen::Map<const RowVec<S>> cvec(const Buffer<S>& p, std::size_t off, int n) {
  return {p.data() + off, n};
}
template <class S>
Eigen::Map<RowVec<S>> mvec(Buffer<S>& p, std::size_t off, int n) {
  return {p.data() + off, n};
}

inline constexpr double kLnEps = 1e-5;

template <class S>
void layernorm_forward(const RowMat<S>& x, const Eigen::Map<const RowVec<S>>& g,
                       const Eigen::Map<const RowVec<S>>& b, RowMat<S>& xhat, RowMat<S>& y,
                       Buffer<S>& rstd) {
  const Eigen::Index n = x.rows(), d = x.cols();
  xhat.resize(n, d);
  y.resize(n, d);
  rstd.resize(n);
  for (Eigen::Index i = 0; i < n; ++i) {
    const S mean = x.row(i).mean();
    const S var = (x.row(i).array() - mean).square().mean();
    const S rs = S(1) / std::sqrt(var + S(kLnEps));
    rstd[i] = rs;
    xhat.row(i) = (x.row(i).array() - mean) * rs;
    y.row(i) = xhat.row(i).cwiseProduct(g) + b;
  }
}

// dx += LN backward of dy; accumulates dg, db.
template <class S, class DY>
void layernorm_backward(const DY& dy, const RowMat<S>& xhat, const Buffer<S>& rstd,
                        const Eigen::Map<const RowVec<S>>& g, Eigen::Map<RowVec<S>> dg,
                        Eigen::Map<RowVec<S>> db, RowMat<S>& dx) {
  const Eigen::Index n = dy.rows(), d = dy.cols();
  RowVec<S> dxhat(d);
  for (Eigen::Index i = 0; i < n; ++i) {
    dg += dy.row(i).cwiseProduct(xhat.row(i));
    db += dy.row(i);
    dxhat = dy.row(i).cwiseProduct(g);
    const S m1 = dxhat.mean();
    const S m2 = dxhat.cwiseProduct(xhat.row(i)).mean();
    dx.row(i).array() += rstd[i] * (dxhat.array() - m1 - xhat.row(i).array() * m2);
  }
}

inline constexpr double kGeluC = 0.7978845608028654;  // sqrt(2/pi)

// Causal attention of each row over its root path. qkv rows hold
// [q | k | v]; weights are stored per row, per head, over the path.
template <class S>
void attention_forward(const PrefixBatch& batch, const RowMat<S>& qkv, RowMat<S>& ctx,
                       Buffer<S>& att, int H, int dh, S scale) {
  const int N = static_cast<int>(batch.rows());
  const int D = H * dh;
  const Eigen::Index stride = qkv.cols();
  const S* base = qkv.data();
  for (int r = 0; r < N; ++r) {
    const auto path = batch.path(r);
    const int T = static_cast<int>(path.size());
    for (int h = 0; h < H; ++h) {
      const S* q = base + r * stride + h * dh;
      S* w = att.data() + batch.att_offset[r] * H + static_cast<std::size_t>(h) * T;
      S mx = -std::numeric_limits<S>::infinity();
      for (int j = 0; j < T; ++j) {
        const S* k = base + path[j] * stride + D + h * dh;
        S acc = 0;
        for (int e = 0; e < dh; ++e) acc += q[e] * k[e];
        w[j] = acc * scale;
        mx = std::max(mx, w[j]);
      }
      S sum = 0;
      for (int j = 0; j < T; ++j) {
        w[j] = std::exp(w[j] - mx);
        sum += w[j];
      }
      const S inv = S(1) / sum;
      S* out = ctx.data() + r * ctx.cols() + h * dh;
      for (int j = 0; j < T; ++j) {
        w[j] *= inv;
        const S* v = base + path[j] * stride + 2 * D + h * dh;
        for (int e = 0; e < dh; ++e) out[e] += w[j] * v[e];
      }
    }
  }
}

template <class S>
void attention_backward(const PrefixBatch& batch, const RowMat<S>& qkv, const Buffer<S>& att,
                        const RowMat<S>& dctx, RowMat<S>& dqkv, int H, int dh, S scale) {
  const int N = static_cast<int>(batch.rows());
  const int D = H * dh;
  const Eigen::Index stride = qkv.cols();
  const S* base = qkv.data();
  S* dbase = dqkv.data();
  Buffer<S> dw;
  for (int r = 0; r < N; ++r) {
    const auto path = batch.path(r);
    const int T = static_cast<int>(path.size());
    dw.resize(T);
    for (int h = 0; h < H; ++h) {
      const S* w = att.data() + batch.att_offset[r] * H + static_cast<std::size_t>(h) * T;
      const S* dout = dctx.data() + r * dctx.cols() + h * dh;
      S dot = 0;
      for (int j = 0; j < T; ++j) {
        const S* v = base + path[j] * stride + 2 * D + h * dh;
        S* dv = dbase + path[j] * stride + 2 * D + h * dh;
        S acc = 0;
        for (int e = 0; e < dh; ++e) {
          acc += dout[e] * v[e];
          dv[e] += w[j] * dout[e];
        }
        dw[j] = acc;
        dot += acc * w[j];
      }
      const S* q = base + r * stride + h * dh;
      S* dq = dbase + r * stride + h * dh;
      for (int j = 0; j < T; ++j) {
        const S ds = w[j] * (dw[j] - dot) * scale;
        const S* k = base + path[j] * stride + D + h * dh;
        S* dk = dbase + path[j] * stride + D + h * dh;
        for (int e = 0; e < dh; ++e) {
          dq[e] += ds * k[e];
          dk[e] += ds * q[e];
        }
      }
    }
  }
}

// tanh-approximated GELU; the tanh term is kept for the backward pass.
template <class S>
void gelu_forward(const RowMat<S>& x, RowMat<S>& t, RowMat<S>& y) {
  t = (S(kGeluC) * (x.array() + S(0.044715) * x.array().cube())).tanh();
  y = S(0.5) * x.array() * (S(1) + t.array());
}

template <class S>
void gelu_backward(const RowMat<S>& x, const RowMat<S>& t, const RowMat<S>& dy, RowMat<S>& dx) {
  dx = dy.array() *
       (S(0.5) * (S(1) + t.array()) +
        S(0.5) * x.array() * (S(1) - t.array().square()) * S(kGeluC) *
            (S(1) + S(3 * 0.044715) * x.array().square()));
}

template <class S>
void apply_patches(std::span<const SequencePatch> patches, const PrefixBatch& batch, int layer,
                   Site site, RowMat<S>& m) {
  for (const auto& p : patches) {
    if (p.plan->site != site) continue;
    const int row = batch.final_row(p.sequence);
    for (const auto& e : p.plan->entries) {
      if (e.layer != layer) continue;
      const auto src = p.source->site(site, layer);
      if (static_cast<Eigen::Index>(src.size()) != m.cols())
        throw ModelError("source record width does not match site width");
      if (e.neurons)
        for (int i : *e.neurons) m(row, i) = static_cast<S>(src[i]);
      else
        for (Eigen::Index i = 0; i < m.cols(); ++i) m(row, i) = static_cast<S>(src[i]);
    }
  }
}

}  // namespace detail

// Runs the network over every row of `batch` and computes logits at
// `out_rows`. Patches overwrite final-token site vectors before they are
// added to the residual stream.
template <class S>
void forward(const Model<S>& model, const PrefixBatch& batch, std::span<const int> out_rows,
             ForwardCache<S>& cache, std::span<const SequencePatch> patches = {}) {
  using namespace detail;
  const auto& c = model.config;
  const auto& P = model.params;
  const auto& lay = model.layout;
  const int N = static_cast<int>(batch.rows());
  const int D = c.d_model, F = c.d_mlp, H = c.n_heads, dh = c.head_dim();
  const int V = static_cast<int>(model.vocab_size());
  const S scale = S(1) / std::sqrt(S(dh));

  for (const auto& p : patches) {
    if (!p.plan || !p.source) throw ModelError("incomplete patch");
    if (p.sequence >= batch.sequences()) throw ModelError("patch sequence out of range");
    p.plan->validate(c);
  }

  cache.resid.resize(c.n_layers + 1);
  cache.layers.resize(c.n_layers);
  RowMat<S>& x0 = cache.resid[0];
  x0.resize(N, D);
  const auto E = cmat(P, lay.tok_emb, V, D);
  const auto PE = cmat(P, lay.pos_emb, c.context_len, D);
  for (int r = 0; r < N; ++r) {
    if (batch.token[r] < 0 || batch.token[r] >= V) throw ModelError("token id out of range");
    x0.row(r) = E.row(batch.token[r]) + PE.row(batch.pos[r]);
  }

  for (int l = 0; l < c.n_layers; ++l) {
    const auto& s = lay.layers[l];
    auto& lc = cache.layers[l];
    const RowMat<S>& x = cache.resid[l];

    layernorm_forward(x, cvec(P, s.ln1_g, D), cvec(P, s.ln1_b, D), lc.xhat1, lc.h1, lc.rstd1);
    lc.qkv.noalias() = lc.h1 * cmat(P, s.w_qkv, D, 3 * D);
    lc.qkv.rowwise() += cvec(P, s.b_qkv, 3 * D);

    lc.ctx.setZero(N, D);
    lc.att.resize(batch.att_offset[N] * H);
    attention_forward(batch, lc.qkv, lc.ctx, lc.att, H, dh, scale);
    lc.attn_out.noalias() = lc.ctx * cmat(P, s.w_o, D, D);
    lc.attn_out.rowwise() += cvec(P, s.b_o, D);
    apply_patches(patches, batch, l, Site::attn_out, lc.attn_out);

    lc.mid = x + lc.attn_out;
    layernorm_forward(lc.mid, cvec(P, s.ln2_g, D), cvec(P, s.ln2_b, D), lc.xhat2, lc.h2,
                      lc.rstd2);
    lc.pre.noalias() = lc.h2 * cmat(P, s.w_in, D, F);
    lc.pre.rowwise() += cvec(P, s.b_in, F);
    gelu_forward(lc.pre, lc.gelu_tanh, lc.act);
    apply_patches(patches, batch, l, Site::mlp_hidden, lc.act);
    lc.mlp_out.noalias() = lc.act * cmat(P, s.w_out, F, D);
    lc.mlp_out.rowwise() += cvec(P, s.b_out, D);
    apply_patches(patches, batch, l, Site::mlp_out, lc.mlp_out);

    cache.resid[l + 1] = lc.mid + lc.mlp_out;
    apply_patches(patches, batch, l, Site::block_out, cache.resid[l + 1]);
  }

  cache.out_rows.assign(out_rows.begin(), out_rows.end());
  const int R = static_cast<int>(out_rows.size());
  RowMat<S> xf(R, D);
  for (int i = 0; i < R; ++i) xf.row(i) = cache.resid[c.n_layers].row(out_rows[i]);
  layernorm_forward(xf, cvec(P, lay.lnf_g, D), cvec(P, lay.lnf_b, D), cache.xhatf, cache.hf,
                    cache.rstdf);
  cache.logits.noalias() = cache.hf * E.transpose();
}

template <class S>
RowVec<S> softmax(const Eigen::Ref<const RowVec<S>>& logits) {
  const S mx = logits.maxCoeff();
  RowVec<S> p = (logits.array() - mx).exp();
  return p / p.sum();
}

struct Target {
  int row = 0;    // index into PrefixBatch rows
  int token = 0;  // expected next token
};

// Mean cross-entropy over `targets`; logits must have been computed by
// forward() with out_rows[i] == targets[i].row.
template <class S>
S cross_entropy(const ForwardCache<S>& cache, std::span<const Target> targets) {
  S loss = 0;
  for (std::size_t i = 0; i < targets.size(); ++i) {
    const auto z = cache.logits.row(static_cast<Eigen::Index>(i));
    const S mx = z.maxCoeff();
    const S lse = mx + std::log((z.array() - mx).exp().sum());
    loss += lse - z(targets[i].token);
  }
  return loss / static_cast<S>(targets.size());
}

// Gradient of cross_entropy() w.r.t. every parameter, accumulated into
// `grad` (same layout as model.params).
template <class S>
void backward(const Model<S>& model, const PrefixBatch& batch, const ForwardCache<S>& cache,
              std::span<const Target> targets, Buffer<S>& grad) {
  using namespace detail;
  const auto& c = model.config;
  const auto& P = model.params;
  const auto& lay = model.layout;
  const int N = static_cast<int>(batch.rows());
  const int D = c.d_model, F = c.d_mlp, H = c.n_heads, dh = c.head_dim();
  const int V = static_cast<int>(model.vocab_size());
  const int R = static_cast<int>(targets.size());
  const S scale = S(1) / std::sqrt(S(dh));
  if (grad.size() != P.size()) grad.assign(P.size(), S(0));

  const auto E = cmat(P, lay.tok_emb, V, D);
  auto dE = mmat(grad, lay.tok_emb, V, D);

  // Softmax cross-entropy on logits = hf * E^T.
  RowMat<S> dlogits(R, V);
  for (int i = 0; i < R; ++i) {
    dlogits.row(i) = softmax<S>(cache.logits.row(i));
    dlogits(i, targets[i].token) -= S(1);
  }
  dlogits /= static_cast<S>(R);
  dE.noalias() += dlogits.transpose() * cache.hf;
  RowMat<S> dhf = dlogits * E;

  RowMat<S> dxf = RowMat<S>::Zero(R, D);
  layernorm_backward(dhf, cache.xhatf, cache.rstdf, cvec(P, lay.lnf_g, D),
                     mvec(grad, lay.lnf_g, D), mvec(grad, lay.lnf_b, D), dxf);

  RowMat<S> dx = RowMat<S>::Zero(N, D);
  for (int i = 0; i < R; ++i) dx.row(targets[i].row) += dxf.row(i);

  RowMat<S> dact, dpre, dh2, dmid, dctx, dqkv, dh1;
  for (int l = c.n_layers - 1; l >= 0; --l) {
    const auto& s = lay.layers[l];
    const auto& lc = cache.layers[l];

    // MLP: resid[l+1] = mid + act * W_out + b_out
    mvec(grad, s.b_out, D) += dx.colwise().sum();
    mmat(grad, s.w_out, F, D).noalias() += lc.act.transpose() * dx;
    dact.noalias() = dx * cmat(P, s.w_out, F, D).transpose();
    gelu_backward(lc.pre, lc.gelu_tanh, dact, dpre);
    mvec(grad, s.b_in, F) += dpre.colwise().sum();
    mmat(grad, s.w_in, D, F).noalias() += lc.h2.transpose() * dpre;
    dh2.noalias() = dpre * cmat(P, s.w_in, D, F).transpose();
    dmid = dx;
    layernorm_backward(dh2, lc.xhat2, lc.rstd2, cvec(P, s.ln2_g, D), mvec(grad, s.ln2_g, D),
                       mvec(grad, s.ln2_b, D), dmid);

    // Attention: mid = x + ctx * W_o + b_o
    mvec(grad, s.b_o, D) += dmid.colwise().sum();
    mmat(grad, s.w_o, D, D).noalias() += lc.ctx.transpose() * dmid;
    dctx.noalias() = dmid * cmat(P, s.w_o, D, D).transpose();

    dqkv.setZero(N, 3 * D);
    attention_backward(batch, lc.qkv, lc.att, dctx, dqkv, H, dh, scale);
    mvec(grad, s.b_qkv, 3 * D) += dqkv.colwise().sum();
    mmat(grad, s.w_qkv, D, 3 * D).noalias() += lc.h1.transpose() * dqkv;
    dh1.noalias() = dqkv * cmat(P, s.w_qkv, D, 3 * D).transpose();
    dx = dmid;
    layernorm_backward(dh1, lc.xhat1, lc.rstd1, cvec(P, s.ln1_g, D), mvec(grad, s.ln1_g, D),
                       mvec(grad, s.ln1_b, D), dx);
  }

  auto dPE = mmat(grad, lay.pos_emb, c.context_len, D);
  for (int r = 0; r < N; ++r) {
    dE.row(batch.token[r]) += dx.row(r);
    dPE.row(batch.pos[r]) += dx.row(r);
  }
}

// --- single-sequence inference ----------------------------------------------

struct InferOptions {
  bool capture = false;
  std::span<const SequencePatch> patches = {};  // sequence index must be 0
};

template <class S>
ForwardRecord run_record(const Model<S>& model, const std::vector<int>& tokens,
                         const InferOptions& opt = {}) {
  const auto& c = model.config;
  std::vector<std::vector<int>> one{tokens};
  const PrefixBatch batch = PrefixBatch::build(one, c.context_len, true);
  const int last = batch.final_row(0);
  ForwardCache<S> cache;
  forward(model, batch, std::span<const int>(&last, 1), cache, opt.patches);

  ForwardRecord rec;
  rec.tokens = tokens;
  rec.n_layers = c.n_layers;
  rec.d_model = c.d_model;
  rec.d_mlp = c.d_mlp;
  const auto z = cache.logits.row(0);
  rec.logits.resize(z.size());
  for (Eigen::Index i = 0; i < z.size(); ++i) rec.logits[i] = static_cast<float>(z(i));
  const RowVec<S> p = softmax<S>(z);
  rec.probs.resize(p.size());
  for (Eigen::Index i = 0; i < p.size(); ++i) rec.probs[i] = static_cast<float>(p(i));

  if (opt.capture) {
    rec.captured = true;
    auto grab = [&](const RowMat<S>& m, std::vector<float>& dst) {
      for (Eigen::Index i = 0; i < m.cols(); ++i) dst.push_back(static_cast<float>(m(last, i)));
    };
    for (int l = 0; l < c.n_layers; ++l) {
      const auto& lc = cache.layers[l];
      grab(cache.resid[l], rec.resid_pre);
      grab(lc.attn_out, rec.attn_out);
      grab(lc.act, rec.mlp_hidden);
      grab(lc.mlp_out, rec.mlp_out);
      grab(cache.resid[l + 1], rec.block_out);
    }
  }
  return rec;
}

template <class S>
ForwardRecord forward_record(const Model<S>& model, const std::vector<int>& tokens,
                             bool capture = true) {
  return run_record(model, tokens, InferOptions{capture, {}});
}

// Base pass with the plan's sites overwritten from `source` at the final
// token; downstream computation proceeds normally.
template <class S>
ForwardRecord forward_with_patch(const Model<S>& model, const std::vector<int>& base_tokens,
                                 const ForwardRecord& source, const PatchPlan& plan,
                                 bool capture = false) {
  if (source.n_layers != model.config.n_layers || source.d_model != model.config.d_model ||
      source.d_mlp != model.config.d_mlp)
    throw ModelError("source record was captured with a different model configuration");
  if (!source.captured && !plan.entries.empty())
    throw ModelError("source record holds no captured activations");
  const SequencePatch sp{0, &plan, &source};
  return run_record(model, base_tokens,
                    InferOptions{capture, std::span<const SequencePatch>(&sp, 1)});
}

}  // namespace dgc
