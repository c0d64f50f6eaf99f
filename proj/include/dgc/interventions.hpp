#pragma once

// Interchange interventions on circuits: patch the final-token MLP
// sub-update components of a base prompt with a source prompt's values and
// read the probabilities of the result variants before and after.

#include <algorithm>
#include <cmath>
#include <map>
#include <numeric>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "json.hpp"

#include "dgc/arith_data.hpp"
#include "dgc/csv.hpp"
#include "dgc/fisher.hpp"
#include "dgc/parallel.hpp"
#include "dgc/transformer.hpp"

namespace dgc {

inline constexpr double kInjectionEpsilon = 10.0;  // percentage points
inline constexpr int kLayerSetSpan = 10;

struct InterventionError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Result variants resolved to token ids.
struct VariantTokens {
  std::vector<std::string> labels;
  std::vector<int> values;
  std::vector<int> tokens;

  int token_of(std::string_view label) const {
    for (std::size_t i = 0; i < labels.size(); ++i)
      if (labels[i] == label) return tokens[i];
    throw InterventionError("no variant " + std::string(label));
  }
};

// Multi-digit mode reads each variant's own token; single-digit mode reads
// the token of the next output digit, so several variants can share a token.
inline VariantTokens resolve_variants(const Tokenizer& tok, const VariantTable& table,
                                      const std::vector<std::string>& labels) {
  VariantTokens v;
  for (const auto& l : labels) {
    const int value = variant_value(table, l);
    std::string text = std::to_string(value);
    if (tok.mode() == TokenizerMode::single_digit) text = text.substr(0, 1);
    const auto id = tok.find(text);
    if (!id) throw InterventionError("variant " + l + "=" + std::to_string(value) +
                                     " has no token in the vocabulary");
    v.labels.push_back(l);
    v.values.push_back(value);
    v.tokens.push_back(*id);
  }
  return v;
}

inline std::vector<std::string> standard_labels() {
  return {kVariantLabels.begin(), kVariantLabels.end()};
}

struct InterventionOutcome {
  std::size_t pair_id = 0;
  std::string circuit_id;
  std::string target;  // target variant label, empty for whole-site patches
  VariantTokens variants;
  std::vector<double> before, after, delta_pp;
  int argmax_before = -1, argmax_after = -1;
  bool flip = false;

  double p_before(std::string_view l) const { return before[index(l)]; }
  double p_after(std::string_view l) const { return after[index(l)]; }

  std::size_t index(std::string_view l) const {
    for (std::size_t i = 0; i < variants.labels.size(); ++i)
      if (variants.labels[i] == l) return i;
    throw InterventionError("outcome has no variant " + std::string(l));
  }

  // Probability mass on the variants, counting shared tokens once.
  double mass(bool after_patch) const {
    std::set<int> seen;
    double s = 0;
    const auto& p = after_patch ? after : before;
    for (std::size_t i = 0; i < p.size(); ++i)
      if (seen.insert(variants.tokens[i]).second) s += p[i];
    return s;
  }
};

// A prompt pair run once without patching; reused across circuits.
struct PairContext {
  std::vector<int> base_tokens;
  ForwardRecord baseline;  // unpatched base pass
  ForwardRecord source;    // captured source pass
};

template <class S>
PairContext make_context(const Model<S>& model, const ArithmeticPrompt& base,
                         const ArithmeticPrompt& source) {
  PairContext c;
  c.base_tokens = model.tokenizer.encode(base.render());
  c.baseline = forward_record(model, c.base_tokens, false);
  c.source = forward_record(model, model.tokenizer.encode(source.render()), true);
  return c;
}

inline PatchPlan circuit_plan(const Circuit& c, Site site = Site::mlp_out) {
  PatchPlan p;
  p.site = site;
  for (int l : c.layers) p.entries.push_back({l, c.at(l)});
  return p;
}

inline std::string circuit_id(const Circuit& c) {
  std::string s = c.op + ":" + to_string(c.position) + ":t=" + csv::num(c.threshold) + ":L=";
  if (!c.layers.empty()) s += std::to_string(c.layers.front()) + "-" + std::to_string(c.layers.back());
  return s;
}

inline InterventionOutcome make_outcome(std::size_t pair_id, std::string circuit_id,
                                        std::string target, const VariantTokens& v,
                                        const ForwardRecord& before, const ForwardRecord& after) {
  InterventionOutcome o;
  o.pair_id = pair_id;
  o.circuit_id = std::move(circuit_id);
  o.target = std::move(target);
  o.variants = v;
  for (int t : v.tokens) {
    const double b = before.probs[t], a = after.probs[t];
    o.before.push_back(b);
    o.after.push_back(a);
    o.delta_pp.push_back(100.0 * (a - b));
  }
  o.argmax_before = before.argmax();
  o.argmax_after = after.argmax();
  if (!o.target.empty())
    o.flip = o.argmax_before == v.token_of("bbb") && o.argmax_after == v.token_of(o.target);
  return o;
}

template <class S>
InterventionOutcome intervene(const Model<S>& model, const PairContext& ctx, const PatchPlan& plan,
                              const VariantTokens& v, std::size_t pair_id,
                              const std::string& cid, const std::string& target) {
  const ForwardRecord after = forward_with_patch(model, ctx.base_tokens, ctx.source, plan);
  return make_outcome(pair_id, cid, target, v, ctx.baseline, after);
}

template <class S>
InterventionOutcome run_intervention(const Model<S>& model, const PromptPair& pair,
                                     const Circuit& circuit, std::size_t pair_id = 0) {
  const auto v = resolve_variants(model.tokenizer, pair.variants, standard_labels());
  const auto ctx = make_context(model, pair.base, pair.source);
  return intervene(model, ctx, circuit_plan(circuit), v, pair_id, circuit_id(circuit),
                   std::string(target_variant(circuit.position)));
}

template <class S>
std::vector<InterventionOutcome> run_interventions(const Model<S>& model,
                                                   const std::vector<PromptPair>& pairs,
                                                   const Circuit& circuit) {
  std::vector<InterventionOutcome> out(pairs.size());
  parallel_for(pairs.size(),
               [&](std::size_t i) { out[i] = run_intervention(model, pairs[i], circuit, i); });
  return out;
}

// --- aggregation ---------------------------------------------------------------

inline double median(std::vector<double> v) {
  if (v.empty()) return std::nan("");
  std::sort(v.begin(), v.end());
  const std::size_t n = v.size();
  return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

struct EffectRow {
  std::string model_id, op, position, target;
  double t = 0;
  std::size_t n = 0;
  std::size_t circuit_size = 0;
  std::vector<std::string> labels;
  std::vector<double> mean_delta_pp, median_delta_pp, mean_before, mean_after;
  double flip_rate = 0;  // fraction in [0, 1]

  double delta(std::string_view l) const {
    for (std::size_t i = 0; i < labels.size(); ++i)
      if (labels[i] == l) return mean_delta_pp[i];
    throw InterventionError("effect row has no variant " + std::string(l));
  }
};

inline EffectRow aggregate_outcomes(const std::vector<InterventionOutcome>& outcomes,
                                    const std::string& target) {
  if (outcomes.empty()) throw InterventionError("no outcomes to aggregate");
  EffectRow r;
  r.target = target;
  r.n = outcomes.size();
  r.labels = outcomes.front().variants.labels;
  const std::size_t k = r.labels.size();
  r.mean_delta_pp.assign(k, 0);
  r.mean_before.assign(k, 0);
  r.mean_after.assign(k, 0);
  std::vector<std::vector<double>> cols(k);
  std::size_t flips = 0;
  for (const auto& o : outcomes) {
    if (o.variants.labels != r.labels)
      throw InterventionError("outcomes disagree on the variant set");
    for (std::size_t i = 0; i < k; ++i) {
      r.mean_delta_pp[i] += o.delta_pp[i];
      r.mean_before[i] += o.before[i];
      r.mean_after[i] += o.after[i];
      cols[i].push_back(o.delta_pp[i]);
    }
    flips += o.flip;
  }
  const double n = static_cast<double>(r.n);
  for (std::size_t i = 0; i < k; ++i) {
    r.mean_delta_pp[i] /= n;
    r.mean_before[i] /= n;
    r.mean_after[i] /= n;
    r.median_delta_pp.push_back(median(cols[i]));
  }
  r.flip_rate = static_cast<double>(flips) / n;
  return r;
}

inline EffectRow effect_row(const std::vector<InterventionOutcome>& outcomes, const Circuit& c) {
  EffectRow r = aggregate_outcomes(outcomes, std::string(target_variant(c.position)));
  r.model_id = c.model_id;
  r.op = c.op;
  r.position = to_string(c.position);
  r.t = c.threshold;
  r.circuit_size = c.size();
  return r;
}

// Fraction of outcomes whose argmax left the bbb token.
inline double moved_from_bbb_rate(const std::vector<InterventionOutcome>& outcomes) {
  if (outcomes.empty()) return 0;
  std::size_t n = 0;
  for (const auto& o : outcomes) {
    const int bbb = o.variants.token_of("bbb");
    n += o.argmax_before == bbb && o.argmax_after != bbb;
  }
  return static_cast<double>(n) / static_cast<double>(outcomes.size());
}

// --- carry scenarios -------------------------------------------------------------

inline Position carry_circuit_position(CarryScenario s) {
  return s == CarryScenario::unit_to_tens ? Position::unit : Position::tens;
}

template <class S>
InterventionOutcome run_carry_intervention(const Model<S>& model, const CarryPair& pair,
                                           const Circuit& circuit, std::size_t pair_id = 0) {
  if (circuit.position != carry_circuit_position(pair.scenario))
    throw InterventionError(std::string("carry scenario ") + to_string(pair.scenario) +
                            " needs the " + to_string(carry_circuit_position(pair.scenario)) +
                            " circuit");
  auto labels = standard_labels();
  labels.emplace_back(pair.plus_one_label());
  const auto v = resolve_variants(model.tokenizer, pair.variants, labels);
  std::set<int> distinct(v.values.begin(), v.values.end());
  if (distinct.size() != v.values.size())
    throw InterventionError("carry pair has colliding variant values");
  const auto ctx = make_context(model, pair.base, pair.source);
  return intervene(model, ctx, circuit_plan(circuit), v, pair_id, circuit_id(circuit),
                   std::string(target_variant(circuit.position)));
}

template <class S>
std::vector<InterventionOutcome> run_carry_interventions(const Model<S>& model,
                                                         const std::vector<CarryPair>& pairs,
                                                         const Circuit& circuit) {
  std::vector<InterventionOutcome> out(pairs.size());
  parallel_for(pairs.size(), [&](std::size_t i) {
    out[i] = run_carry_intervention(model, pairs[i], circuit, i);
  });
  return out;
}

// --- operand injection localization ---------------------------------------------

struct InjectionRow {
  int layer = 0;
  Site site = Site::attn_out;
  double p_bbb = 0, p_sss = 0;  // mean after patching
};

struct InjectionProfile {
  std::string dataset;
  double epsilon = kInjectionEpsilon;
  double baseline_bbb = 0, baseline_sss = 0;
  std::vector<InjectionRow> rows;
  std::optional<int> injection_layer;

  std::string caption() const {
    if (!injection_layer) return "Operand Injection into the residual stream: none detected";
    return "Operand Injection into the residual stream in Layer " + std::to_string(*injection_layer);
  }
};

inline const std::vector<Site>& default_injection_sites() {
  static const std::vector<Site> s{Site::block_out, Site::attn_out, Site::mlp_out};
  return s;
}

inline std::optional<int> detect_injection(const InjectionProfile& p) {
  std::optional<int> best;
  for (const auto& r : p.rows)
    if (r.site == Site::attn_out && 100.0 * (r.p_sss - p.baseline_sss) > p.epsilon)
      if (!best || r.layer < *best) best = r.layer;
  return best;
}

template <class S>
InjectionProfile localize_injection(const Model<S>& model, const std::vector<PromptPair>& pairs,
                                    const std::vector<Site>& sites = default_injection_sites(),
                                    double epsilon = kInjectionEpsilon) {
  if (pairs.empty()) throw InterventionError("localization needs at least one pair");
  const int L = model.config.n_layers;
  const std::size_t ns = sites.size();
  // per pair: baseline (bbb, sss), then per (layer, site) after-patch (bbb, sss)
  std::vector<std::vector<std::pair<double, double>>> res(pairs.size());
  parallel_for(pairs.size(), [&](std::size_t i) {
    const auto v = resolve_variants(model.tokenizer, pairs[i].variants, {"bbb", "sss"});
    const auto ctx = make_context(model, pairs[i].base, pairs[i].source);
    auto& out = res[i];
    out.emplace_back(ctx.baseline.probs[v.tokens[0]], ctx.baseline.probs[v.tokens[1]]);
    for (int l = 0; l < L; ++l)
      for (Site s : sites) {
        PatchPlan plan;
        plan.site = s;
        plan.entries.push_back({l, std::nullopt});
        const auto after = forward_with_patch(model, ctx.base_tokens, ctx.source, plan);
        out.emplace_back(after.probs[v.tokens[0]], after.probs[v.tokens[1]]);
      }
  });
  InjectionProfile p;
  p.epsilon = epsilon;
  const double n = static_cast<double>(pairs.size());
  for (const auto& r : res) {
    p.baseline_bbb += r[0].first / n;
    p.baseline_sss += r[0].second / n;
  }
  for (int l = 0; l < L; ++l)
    for (std::size_t si = 0; si < ns; ++si) {
      InjectionRow row;
      row.layer = l;
      row.site = sites[si];
      for (const auto& r : res) {
        const auto& x = r[1 + static_cast<std::size_t>(l) * ns + si];
        row.p_bbb += x.first / n;
        row.p_sss += x.second / n;
      }
      p.rows.push_back(row);
    }
  p.injection_layer = detect_injection(p);
  return p;
}

// [injection, injection + 9] clipped to the model; all layers if none found.
inline std::vector<int> default_layer_set(std::optional<int> injection, int n_layers) {
  const int lo = injection.value_or(0);
  const int hi = std::min(n_layers - 1, lo + kLayerSetSpan - 1);
  std::vector<int> v;
  for (int l = lo; l <= hi; ++l) v.push_back(l);
  return v;
}

inline std::string injection_csv(const InjectionProfile& p) {
  std::string s = csv::row({"layer", "site", "p_bbb", "p_sss", "delta_sss_pp"});
  for (const auto& r : p.rows)
    s += csv::row({std::to_string(r.layer), to_string(r.site), csv::num(r.p_bbb),
                   csv::num(r.p_sss), csv::num(100.0 * (r.p_sss - p.baseline_sss))});
  return s;
}

// --- threshold sweep and layer-set ablation ---------------------------------------

struct SweepRow {
  double t = 0;
  std::size_t circuit_size = 0;
  EffectRow effect;
  double moved_from_bbb = 0;
};

template <class S>
std::vector<PairContext> make_contexts(const Model<S>& model, const std::vector<PromptPair>& pairs) {
  std::vector<PairContext> ctx(pairs.size());
  parallel_for(pairs.size(), [&](std::size_t i) {
    ctx[i] = make_context(model, pairs[i].base, pairs[i].source);
  });
  return ctx;
}

template <class S>
std::vector<InterventionOutcome> run_on_contexts(const Model<S>& model,
                                                 const std::vector<PromptPair>& pairs,
                                                 const std::vector<PairContext>& ctx,
                                                 const Circuit& c) {
  const PatchPlan plan = circuit_plan(c);
  const std::string cid = circuit_id(c), target(target_variant(c.position));
  std::vector<InterventionOutcome> out(pairs.size());
  parallel_for(pairs.size(), [&](std::size_t i) {
    const auto v = resolve_variants(model.tokenizer, pairs[i].variants, standard_labels());
    out[i] = intervene(model, ctx[i], plan, v, i, cid, target);
  });
  return out;
}

template <class S>
std::vector<SweepRow> threshold_sweep(const Model<S>& model, const std::vector<PromptPair>& pairs,
                                      const FisherTable& f, Position d,
                                      const std::vector<double>& ts, const std::vector<int>& L) {
  const auto ctx = make_contexts(model, pairs);
  std::vector<SweepRow> rows;
  for (double t : ts) {
    const Circuit c = select_circuit(f, d, t, L);
    const auto outcomes = run_on_contexts(model, pairs, ctx, c);
    SweepRow r;
    r.t = t;
    r.circuit_size = c.size();
    r.effect = effect_row(outcomes, c);
    r.moved_from_bbb = moved_from_bbb_rate(outcomes);
    rows.push_back(std::move(r));
  }
  return rows;
}

struct AblationRow {
  int last_layer = 0;
  EffectRow effect;
  double delta_target_pp = 0;  // change of the target Δp vs the base layer set
  double delta_flip_rate = 0;
};

// Extends L to deeper cutoffs and reports how the effect changes.
template <class S>
std::vector<AblationRow> layer_ablation(const Model<S>& model, const std::vector<PromptPair>& pairs,
                                        const FisherTable& f, Position d, double t,
                                        const std::vector<int>& base_layers,
                                        const std::vector<int>& cutoffs) {
  if (base_layers.empty()) throw InterventionError("layer ablation needs a base layer set");
  const auto ctx = make_contexts(model, pairs);
  const Circuit base_c = select_circuit(f, d, t, base_layers);
  const EffectRow base = effect_row(run_on_contexts(model, pairs, ctx, base_c), base_c);
  std::vector<AblationRow> rows;
  for (int cut : cutoffs) {
    std::vector<int> L;
    for (int l = base_layers.front(); l <= cut; ++l)
      if (std::find(f.layers.begin(), f.layers.end(), l) != f.layers.end()) L.push_back(l);
    if (L.empty()) continue;
    const Circuit c = select_circuit(f, d, t, L);
    AblationRow r;
    r.last_layer = cut;
    r.effect = effect_row(run_on_contexts(model, pairs, ctx, c), c);
    r.delta_target_pp = r.effect.delta(base.target) - base.delta(base.target);
    r.delta_flip_rate = r.effect.flip_rate - base.flip_rate;
    rows.push_back(std::move(r));
  }
  return rows;
}

// --- serialization ---------------------------------------------------------------

inline nlohmann::ordered_json to_json(const InterventionOutcome& o) {
  nlohmann::ordered_json j;
  j["pair_id"] = o.pair_id;
  j["circuit_id"] = o.circuit_id;
  j["target"] = o.target;
  j["labels"] = o.variants.labels;
  j["values"] = o.variants.values;
  j["tokens"] = o.variants.tokens;
  j["p_before"] = o.before;
  j["p_after"] = o.after;
  j["delta_pp"] = o.delta_pp;
  j["argmax_before"] = o.argmax_before;
  j["argmax_after"] = o.argmax_after;
  j["flip"] = o.flip;
  return j;
}

inline InterventionOutcome outcome_from_json(const nlohmann::ordered_json& j) {
  InterventionOutcome o;
  o.pair_id = j.at("pair_id").get<std::size_t>();
  o.circuit_id = j.at("circuit_id").get<std::string>();
  o.target = j.at("target").get<std::string>();
  o.variants.labels = j.at("labels").get<std::vector<std::string>>();
  o.variants.values = j.at("values").get<std::vector<int>>();
  o.variants.tokens = j.at("tokens").get<std::vector<int>>();
  o.before = j.at("p_before").get<std::vector<double>>();
  o.after = j.at("p_after").get<std::vector<double>>();
  o.delta_pp = j.at("delta_pp").get<std::vector<double>>();
  o.argmax_before = j.at("argmax_before").get<int>();
  o.argmax_after = j.at("argmax_after").get<int>();
  o.flip = j.at("flip").get<bool>();
  return o;
}

inline nlohmann::ordered_json to_json(const EffectRow& r) {
  nlohmann::ordered_json j;
  j["model_id"] = r.model_id;
  j["operator"] = r.op;
  j["position"] = r.position;
  j["t"] = r.t;
  j["target"] = r.target;
  j["n"] = r.n;
  j["circuit_size"] = r.circuit_size;
  j["labels"] = r.labels;
  j["mean_delta_pp"] = r.mean_delta_pp;
  j["median_delta_pp"] = r.median_delta_pp;
  j["mean_before"] = r.mean_before;
  j["mean_after"] = r.mean_after;
  j["flip_rate"] = r.flip_rate;
  return j;
}

inline EffectRow effect_from_json(const nlohmann::ordered_json& j) {
  EffectRow r;
  r.model_id = j.value("model_id", std::string());
  r.op = j.value("operator", std::string());
  r.position = j.value("position", std::string());
  r.t = j.value("t", 0.0);
  r.target = j.at("target").get<std::string>();
  r.n = j.value("n", std::size_t{0});
  r.circuit_size = j.value("circuit_size", std::size_t{0});
  r.labels = j.at("labels").get<std::vector<std::string>>();
  r.mean_delta_pp = j.at("mean_delta_pp").get<std::vector<double>>();
  r.median_delta_pp = j.value("median_delta_pp", std::vector<double>{});
  r.mean_before = j.value("mean_before", std::vector<double>{});
  r.mean_after = j.value("mean_after", std::vector<double>{});
  r.flip_rate = j.value("flip_rate", 0.0);
  return r;
}

}  // namespace dgc
