#pragma once

// End-to-end run: datasets, training, capture, Fisher scores, circuits,
// interventions, carry, similarity, sufficiency, heatmaps and reports, all
// under one output directory with a manifest of seeds and file hashes.

#include <chrono>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <boost/algorithm/string.hpp>
#include <boost/property_tree/ini_parser.hpp>
#include <boost/property_tree/ptree.hpp>

#include "json.hpp"

#include "dgc/analysis.hpp"
#include "dgc/arith_data.hpp"
#include "dgc/capture.hpp"
#include "dgc/checkpoint.hpp"
#include "dgc/csv.hpp"
#include "dgc/fisher.hpp"
#include "dgc/interventions.hpp"
#include "dgc/lda.hpp"
#include "dgc/report.hpp"
#include "dgc/train.hpp"

namespace dgc {

namespace fs = std::filesystem;
using ojson = nlohmann::ordered_json;

enum ExitCode : int { kExitOk = 0, kExitConfig = 2, kExitStage = 3, kExitAcceptance = 4 };

struct ConfigError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct StageError : std::runtime_error {
  StageError(std::string stage, const std::string& what)
      : std::runtime_error("stage " + stage + " failed: " + what), stage(std::move(stage)) {}
  std::string stage;
};

// --- configuration ----------------------------------------------------------------

struct PipelineConfig {
  // [data]
  std::uint64_t data_seed = 1;
  std::size_t train_per_op = 0;  // 0 = every no-carry problem
  std::size_t capture_per_op = 4000;
  std::size_t pairs = 200;
  std::size_t carry_pairs = 200;
  // [model]
  ModelConfig model;
  TrainHyperParams train;
  double min_accuracy = 0.95;
  double time_budget_minutes = 30;
  // [fisher]
  std::vector<double> thresholds{kDefaultThresholds.begin(), kDefaultThresholds.end()};
  std::vector<int> fisher_layers;  // empty = all
  std::vector<int> topk{kDefaultTopK.begin(), kDefaultTopK.end()};
  // [intervene]
  double epsilon = kInjectionEpsilon;
  std::vector<int> layers;  // empty = detected injection layer onward
  int layer_span = kLayerSetSpan;
  bool ablation = true;
  // [report]
  int heatmap_top = kHeatmapTopN;
  std::size_t heatmap_svgs = 3;  // SVGs rendered per (operator, position)
  std::size_t baseline_pairs = kBaselinePairs;
  std::size_t class_pair_cap = kClassPairCap;
  double lda_shrinkage = kDefaultShrinkage;
  double test_fraction = 0.2;
  std::uint64_t split_seed = 1;

  // Canonical key = value listing; the config hash is taken over this.
  std::string canonical() const {
    std::ostringstream os;
    auto list = [](const auto& v) {
      std::string s;
      for (std::size_t i = 0; i < v.size(); ++i) s += (i ? "," : "") + csv::num(v[i]);
      return s;
    };
    os << "[data]\nseed=" << data_seed << "\ntrain_per_op=" << train_per_op
       << "\ncapture_per_op=" << capture_per_op << "\npairs=" << pairs
       << "\ncarry_pairs=" << carry_pairs << "\ntokenizer=" << to_string(model.tokenizer) << "\n";
    os << "[model]\nn_layers=" << model.n_layers << "\nd_model=" << model.d_model
       << "\nd_mlp=" << model.d_mlp << "\nn_heads=" << model.n_heads
       << "\ncontext_len=" << model.context_len << "\nseed=" << model.seed
       << "\nlr=" << csv::num(train.lr) << "\nbeta1=" << csv::num(train.beta1)
       << "\nbeta2=" << csv::num(train.beta2) << "\nbatch_size=" << train.batch_size
       << "\nmax_epochs=" << train.max_epochs << "\nmax_steps=" << train.max_steps
       << "\nwarmup_steps=" << train.warmup_steps << "\ncosine_decay=" << train.cosine_decay
       << "\nlr_min=" << csv::num(train.lr_min)
       << "\nweight_decay=" << csv::num(train.weight_decay)
       << "\ngrad_clip=" << csv::num(train.grad_clip)
       << "\ntarget_accuracy=" << csv::num(train.target_accuracy)
       << "\nholdout_fraction=" << csv::num(train.holdout_fraction)
       << "\nholdout_eval_max=" << train.holdout_eval_max << "\neval_every=" << train.eval_every
       << "\ntrain_seed=" << train.seed << "\nmin_accuracy=" << csv::num(min_accuracy)
       << "\ntime_budget_minutes=" << csv::num(time_budget_minutes) << "\n";
    os << "[fisher]\nthresholds=" << list(thresholds) << "\nlayers=" << list(fisher_layers)
       << "\ntopk=" << list(topk) << "\n";
    os << "[intervene]\nepsilon=" << csv::num(epsilon) << "\nlayers=" << list(layers)
       << "\nlayer_span=" << layer_span << "\nablation=" << ablation << "\n";
    os << "[report]\nheatmap_top=" << heatmap_top << "\nheatmap_svgs=" << heatmap_svgs
       << "\nbaseline_pairs=" << baseline_pairs << "\nclass_pair_cap=" << class_pair_cap
       << "\nlda_shrinkage=" << csv::num(lda_shrinkage)
       << "\ntest_fraction=" << csv::num(test_fraction) << "\nsplit_seed=" << split_seed << "\n";
    return os.str();
  }
};

namespace detail {

template <class T>
std::vector<T> parse_list(const std::string& s, const std::string& key) {
  std::vector<T> out;
  std::vector<std::string> parts;
  boost::split(parts, s, boost::is_any_of(","));
  for (auto p : parts) {
    boost::trim(p);
    if (p.empty()) continue;
    // a..b expands to an inclusive integer range
    const auto dots = p.find("..");
    try {
      if constexpr (std::is_integral_v<T>) {
        if (dots != std::string::npos) {
          const int lo = std::stoi(p.substr(0, dots)), hi = std::stoi(p.substr(dots + 2));
          for (int v = lo; v <= hi; ++v) out.push_back(static_cast<T>(v));
          continue;
        }
        out.push_back(static_cast<T>(std::stoll(p)));
      } else {
        out.push_back(static_cast<T>(std::stod(p)));
      }
    } catch (const std::exception&) {
      throw ConfigError("bad list value '" + p + "' for " + key);
    }
  }
  return out;
}

}  // namespace detail

// INI-style `key = value` with [data], [model], [fisher], [intervene] and
// [report] sections. Unknown sections or keys are rejected.
inline PipelineConfig parse_config(std::istream& is) {
  namespace pt = boost::property_tree;
  pt::ptree tree;
  try {
    pt::read_ini(is, tree);
  } catch (const pt::ini_parser_error& e) {
    throw ConfigError(std::string("config parse error: ") + e.what());
  }
  PipelineConfig c;
  using Setter = std::function<void(const std::string&)>;
  auto num = [](auto& dst) {
    return Setter([&dst](const std::string& v) {
      using T = std::decay_t<decltype(dst)>;
      if constexpr (std::is_same_v<T, bool>) {
        const std::string l = boost::to_lower_copy(v);
        if (l == "true" || l == "1" || l == "yes")
          dst = true;
        else if (l == "false" || l == "0" || l == "no")
          dst = false;
        else
          throw std::invalid_argument(v);
      } else if constexpr (std::is_floating_point_v<T>) {
        dst = std::stod(v);
      } else if constexpr (std::is_unsigned_v<T>) {
        if (!v.empty() && v[0] == '-') throw std::invalid_argument(v);
        dst = static_cast<T>(std::stoull(v));
      } else {
        dst = static_cast<T>(std::stoll(v));
      }
    });
  };
  std::map<std::string, std::map<std::string, Setter>> keys;
  keys["data"] = {{"seed", num(c.data_seed)},
                  {"train_per_op", num(c.train_per_op)},
                  {"capture_per_op", num(c.capture_per_op)},
                  {"pairs", num(c.pairs)},
                  {"carry_pairs", num(c.carry_pairs)},
                  {"tokenizer", [&](const std::string& v) {
                     c.model.tokenizer = parse_tokenizer_mode(v);
                   }}};
  keys["model"] = {{"n_layers", num(c.model.n_layers)},
                   {"d_model", num(c.model.d_model)},
                   {"d_mlp", num(c.model.d_mlp)},
                   {"n_heads", num(c.model.n_heads)},
                   {"context_len", num(c.model.context_len)},
                   {"seed", num(c.model.seed)},
                   {"lr", num(c.train.lr)},
                   {"beta1", num(c.train.beta1)},
                   {"beta2", num(c.train.beta2)},
                   {"batch_size", num(c.train.batch_size)},
                   {"max_epochs", num(c.train.max_epochs)},
                   {"max_steps", num(c.train.max_steps)},
                   {"warmup_steps", num(c.train.warmup_steps)},
                   {"cosine_decay", num(c.train.cosine_decay)},
                   {"lr_min", num(c.train.lr_min)},
                   {"weight_decay", num(c.train.weight_decay)},
                   {"grad_clip", num(c.train.grad_clip)},
                   {"target_accuracy", num(c.train.target_accuracy)},
                   {"holdout_fraction", num(c.train.holdout_fraction)},
                   {"holdout_eval_max", num(c.train.holdout_eval_max)},
                   {"eval_every", num(c.train.eval_every)},
                   {"train_seed", num(c.train.seed)},
                   {"min_accuracy", num(c.min_accuracy)},
                   {"time_budget_minutes", num(c.time_budget_minutes)}};
  keys["fisher"] = {
      {"thresholds",
       [&](const std::string& v) { c.thresholds = detail::parse_list<double>(v, "thresholds"); }},
      {"layers",
       [&](const std::string& v) { c.fisher_layers = detail::parse_list<int>(v, "fisher.layers"); }},
      {"topk", [&](const std::string& v) { c.topk = detail::parse_list<int>(v, "topk"); }}};
  keys["intervene"] = {
      {"epsilon", num(c.epsilon)},
      {"layers", [&](const std::string& v) { c.layers = detail::parse_list<int>(v, "layers"); }},
      {"layer_span", num(c.layer_span)},
      {"ablation", num(c.ablation)}};
  keys["report"] = {{"heatmap_top", num(c.heatmap_top)},
                    {"heatmap_svgs", num(c.heatmap_svgs)},
                    {"baseline_pairs", num(c.baseline_pairs)},
                    {"class_pair_cap", num(c.class_pair_cap)},
                    {"lda_shrinkage", num(c.lda_shrinkage)},
                    {"test_fraction", num(c.test_fraction)},
                    {"split_seed", num(c.split_seed)}};
  for (const auto& [section, body] : tree) {
    auto sit = keys.find(section);
    if (sit == keys.end()) {
      if (body.empty()) throw ConfigError("key outside any section: " + section);
      throw ConfigError("unknown config section [" + section + "]");
    }
    for (const auto& [key, val] : body) {
      auto kit = sit->second.find(key);
      if (kit == sit->second.end())
        throw ConfigError("unknown key '" + key + "' in [" + section + "]");
      std::string v = val.get_value<std::string>();
      boost::trim(v);
      try {
        kit->second(v);
      } catch (const ConfigError&) {
        throw;
      } catch (const std::exception&) {
        throw ConfigError("bad value '" + v + "' for " + section + "." + key);
      }
    }
  }
  try {
    c.model.validate();
  } catch (const std::exception& e) {
    throw ConfigError(e.what());
  }
  if (c.thresholds.empty()) throw ConfigError("fisher.thresholds is empty");
  for (double t : c.thresholds)
    if (!(t > 0)) throw ConfigError("thresholds must be positive");
  if (c.pairs < 1 || c.carry_pairs < 1 || c.capture_per_op < 10)
    throw ConfigError("dataset sizes too small");
  if (c.train.batch_size < 1) throw ConfigError("model.batch_size must be >= 1");
  if (!(c.test_fraction > 0 && c.test_fraction < 1))
    throw ConfigError("report.test_fraction must be in (0, 1)");
  if (c.layer_span < 1) throw ConfigError("intervene.layer_span must be >= 1");
  for (int l : c.layers)
    if (l < 0 || l >= c.model.n_layers) throw ConfigError("intervene.layers out of range");
  for (int l : c.fisher_layers)
    if (l < 0 || l >= c.model.n_layers) throw ConfigError("fisher.layers out of range");
  return c;
}

inline PipelineConfig load_config(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw ConfigError("cannot open config: " + path);
  return parse_config(is);
}

// --- hashing -------------------------------------------------------------------------

inline std::uint64_t fnv1a(std::string_view data, std::uint64_t h = 0xcbf29ce484222325ull) {
  for (unsigned char c : data) {
    h ^= c;
    h *= 0x100000001b3ull;
  }
  return h;
}

inline std::string hex64(std::uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

inline std::string hash_file(const fs::path& p) {
  std::ifstream is(p, std::ios::binary);
  if (!is) throw FormatError("cannot hash missing file " + p.string());
  std::uint64_t h = 0xcbf29ce484222325ull;
  std::vector<char> buf(1 << 16);
  while (is) {
    is.read(buf.data(), static_cast<std::streamsize>(buf.size()));
    h = fnv1a(std::string_view(buf.data(), static_cast<std::size_t>(is.gcount())), h);
  }
  return hex64(h);
}

// --- pipeline --------------------------------------------------------------------------

inline const std::vector<std::string>& stage_names() {
  static const std::vector<std::string> s{
      "gen",   "train",      "capture",    "fisher",      "localize",   "circuits",
      "intervene", "carry", "similarity", "sufficiency", "heatmaps", "report"};
  return s;
}

struct PipelineResult {
  int exit_code = kExitOk;
  std::vector<std::string> ran, skipped;
  ojson checks;
};

class Pipeline {
 public:
  Pipeline(PipelineConfig cfg, fs::path out, std::ostream& log = std::cerr)
      : cfg_(std::move(cfg)), out_(std::move(out)), log_(log) {}

  PipelineResult run(bool resume) {
    fs::create_directories(out_);
    const std::string cfg_hash = hex64(fnv1a(cfg_.canonical()));
    ojson manifest;
    const fs::path mpath = out_ / "manifest.json";
    if (resume && fs::exists(mpath)) {
      std::ifstream is(mpath);
      manifest = ojson::parse(is);
      if (manifest.value("config_hash", std::string()) != cfg_hash)
        throw ConfigError("config differs from the manifest in " + out_.string() +
                          "; cannot resume");
    } else {
      manifest = ojson::object();
    }
    manifest["config_hash"] = cfg_hash;
    manifest["seeds"] = {{"data", cfg_.data_seed},
                         {"model", cfg_.model.seed},
                         {"train", cfg_.train.seed},
                         {"split", cfg_.split_seed}};
    if (!manifest.contains("stages")) manifest["stages"] = ojson::object();
    write_text(out_ / "config.ini", cfg_.canonical());

    PipelineResult res;
    bool invalidated = false;
    for (const auto& name : stage_names()) {
      auto& entry = manifest["stages"][name];
      if (resume && !invalidated && stage_complete(entry)) {
        res.skipped.push_back(name);
        log_ << "[" << name << "] up to date, skipped\n";
        continue;
      }
      invalidated = true;
      log_ << "[" << name << "] running\n";
      const auto t0 = std::chrono::steady_clock::now();
      written_.clear();
      try {
        run_stage(name);
      } catch (const ConfigError&) {
        throw;
      } catch (const std::exception& e) {
        entry = {{"status", "failed"}, {"error", e.what()}};
        save_manifest(manifest);
        throw StageError(name, e.what());
      }
      ojson outputs = ojson::object();
      for (const auto& rel : written_) outputs[rel] = hash_file(out_ / rel);
      entry = {{"status", "done"},
               {"seconds", std::chrono::duration<double>(std::chrono::steady_clock::now() - t0)
                               .count()},
               {"outputs", outputs}};
      res.ran.push_back(name);
      save_manifest(manifest);
    }
    res.checks = read_json(out_ / "report/checks.json");
    manifest["acceptance"] = res.checks;
    save_manifest(manifest);
    if (!res.checks.value("training_accuracy_ok", false)) res.exit_code = kExitAcceptance;
    return res;
  }

  const PipelineConfig& config() const { return cfg_; }

 private:
  PipelineConfig cfg_;
  fs::path out_;
  std::ostream& log_;
  std::vector<std::string> written_;

  // ---- file helpers
  std::string rel(const fs::path& p) const { return fs::relative(p, out_).generic_string(); }
  fs::path at(const std::string& rel) const { return out_ / rel; }

  void note(const fs::path& p) { written_.push_back(rel(p)); }

  void write_text(const fs::path& p, const std::string& s) {
    fs::create_directories(p.parent_path());
    csv::write_file(p.string(), s);
  }
  void emit(const std::string& relpath, const std::string& s) {
    write_text(at(relpath), s);
    note(at(relpath));
  }
  void emit_json(const std::string& relpath, const ojson& j) { emit(relpath, j.dump(2) + "\n"); }
  static ojson read_json(const fs::path& p) {
    std::ifstream is(p);
    if (!is) throw FormatError("missing artifact " + p.string());
    return ojson::parse(is);
  }

  void save_manifest(const ojson& m) {
    write_text(out_ / "manifest.json", m.dump(2) + "\n");
  }

  bool stage_complete(const ojson& entry) const {
    if (!entry.is_object() || entry.value("status", std::string()) != "done") return false;
    for (auto it = entry["outputs"].begin(); it != entry["outputs"].end(); ++it) {
      const fs::path p = out_ / it.key();
      if (!fs::exists(p) || hash_file(p) != it.value().get<std::string>()) return false;
    }
    return true;
  }

  static std::vector<Operator> ops() { return {Operator::add, Operator::sub}; }
  static std::vector<PairKind> kinds() { return {PairKind::op1, PairKind::op2}; }
  static std::string dataset(Operator o, PairKind k) {
    return std::string(to_string(o)) + "_" + to_string(k);
  }

  Model<float> model() const { return load_checkpoint(at("model/model.dgcm").string()).model; }

  void run_stage(const std::string& name) {
    if (name == "gen") return stage_gen();
    if (name == "train") return stage_train();
    if (name == "capture") return stage_capture();
    if (name == "fisher") return stage_fisher();
    if (name == "localize") return stage_localize();
    if (name == "circuits") return stage_circuits();
    if (name == "intervene") return stage_intervene();
    if (name == "carry") return stage_carry();
    if (name == "similarity") return stage_similarity();
    if (name == "sufficiency") return stage_sufficiency();
    if (name == "heatmaps") return stage_heatmaps();
    if (name == "report") return stage_report();
    throw StageError(name, "unknown stage");
  }

  // ---- stages

  void stage_gen() {
    const auto s = cfg_.data_seed;
    GenOptions dedup;
    dedup.dedup = true;
    for (Operator o : ops()) {
      const std::uint64_t oi = o == Operator::add ? 0 : 1;
      emit("data/train_" + std::string(to_string(o)) + ".jsonl",
           to_jsonl(sample_no_carry_problems(o, cfg_.train_per_op, s * 1000 + oi)));
      emit("data/capture_" + std::string(to_string(o)) + ".jsonl",
           to_jsonl(generate_simple_dataset(o, cfg_.capture_per_op, s * 1000 + 10 + oi, dedup)));
      for (PairKind k : kinds())
        emit("data/pairs_" + dataset(o, k) + ".jsonl",
             to_jsonl(generate_pair_dataset(o, k, cfg_.pairs,
                                            s * 1000 + 20 + 2 * oi + (k == PairKind::op2))));
    }
    emit("data/carry_1.jsonl", to_jsonl(generate_carry_dataset(CarryScenario::unit_to_tens,
                                                               cfg_.carry_pairs, s * 1000 + 30)));
    emit("data/carry_2.jsonl", to_jsonl(generate_carry_dataset(CarryScenario::tens_to_hundreds,
                                                               cfg_.carry_pairs, s * 1000 + 31)));
  }

  void stage_train() {
    std::vector<ArithmeticPrompt> data;
    for (Operator o : ops()) {
      auto v = read_prompts(at("data/train_" + std::string(to_string(o)) + ".jsonl").string());
      data.insert(data.end(), v.begin(), v.end());
    }
    const auto t0 = std::chrono::steady_clock::now();
    const std::clock_t c0 = std::clock();
    TrainResult r = train(cfg_.model, data, cfg_.train, [&](const EvalPoint& e, float loss) {
      log_ << "  step " << e.step << " epoch " << e.epoch << " loss " << loss
           << " held-out acc " << e.accuracy << "\n";
    });
    const double cpu_min = static_cast<double>(std::clock() - c0) / CLOCKS_PER_SEC / 60.0;
    const double wall_min =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count() / 60.0;
    ojson extras = {{"model_id", "toy"}, {"steps", r.steps}, {"final_accuracy", r.final_accuracy}};
    fs::create_directories(at("model"));
    save_checkpoint(at("model/model.dgcm").string(), r.model, extras);
    note(at("model/model.dgcm"));
    std::string loss = csv::row({"step", "loss"});
    for (std::size_t i = 0; i < r.loss_trace.size(); ++i)
      loss += csv::row({std::to_string(i + 1), csv::num(r.loss_trace[i])});
    emit("model/loss_trace.csv", loss);
    std::string ev = csv::row({"step", "epoch", "heldout_accuracy"});
    for (const auto& e : r.evals)
      ev += csv::row({std::to_string(e.step), std::to_string(e.epoch), csv::num(e.accuracy)});
    emit("model/evals.csv", ev);
    emit_json("model/train_summary.json", {{"steps", r.steps},
                                           {"final_accuracy", r.final_accuracy},
                                           {"early_stopped", r.early_stopped},
                                           {"min_accuracy", cfg_.min_accuracy}});
    // timings vary run to run, so they live outside the hashed outputs
    write_text(at("timing/train.json"), ojson({{"cpu_minutes", cpu_min},
                                               {"wall_minutes", wall_min},
                                               {"budget_minutes", cfg_.time_budget_minutes}})
                                            .dump(2));
  }

  void stage_capture() {
    const auto m = model();
    for (Operator o : ops()) {
      const auto prompts =
          read_prompts(at("data/capture_" + std::string(to_string(o)) + ".jsonl").string());
      CaptureOptions co;
      co.dataset = std::string("capture_") + to_string(o);
      const auto path = at("traces/" + std::string(to_string(o)) + ".dgc1");
      fs::create_directories(path.parent_path());
      capture_trace(m, prompts, path.string(), co);
      note(path);
    }
  }

  void stage_fisher() {
    fs::create_directories(at("fisher"));
    for (Operator o : ops()) {
      const auto t = fisher_scores(at("traces/" + std::string(to_string(o)) + ".dgc1").string(),
                                   cfg_.fisher_layers);
      const auto path = at("fisher/" + std::string(to_string(o)) + ".dgcf");
      save_fisher(path.string(), t);
      note(path);
    }
  }

  void stage_localize() {
    const auto m = model();
    for (Operator o : ops())
      for (PairKind k : kinds()) {
        const auto pairs = read_pairs(at("data/pairs_" + dataset(o, k) + ".jsonl").string());
        auto prof = localize_injection(m, pairs, default_injection_sites(), cfg_.epsilon);
        prof.dataset = dataset(o, k);
        emit_json("injection/" + dataset(o, k) + ".json", report::to_json(prof));
        emit("injection/" + dataset(o, k) + ".csv", injection_csv(prof));
      }
  }

  std::vector<int> layer_set(Operator o, PairKind k) const {
    if (!cfg_.layers.empty()) return cfg_.layers;
    const auto prof =
        report::injection_from_json(read_json(at("injection/" + dataset(o, k) + ".json")));
    std::vector<int> L;
    const int lo = prof.injection_layer.value_or(0);
    for (int l = lo; l < cfg_.model.n_layers && l < lo + cfg_.layer_span; ++l) L.push_back(l);
    return L;
  }

  FisherTable fisher(Operator o) const {
    return load_fisher(at("fisher/" + std::string(to_string(o)) + ".dgcf").string());
  }

  static std::string tname(double t) { return "t" + csv::num(t); }

  void stage_circuits() {
    std::map<Operator, FisherTable> tables;
    for (Operator o : ops()) tables[o] = fisher(o);
    for (Operator o : ops()) {
      const auto& f = tables[o];
      for (PairKind k : kinds()) {
        const auto L = layer_set(o, k);
        emit_json("circuits/" + dataset(o, k) + "_layers.json", ojson(L));
        for (double t : cfg_.thresholds)
          for (Position p : kPositions)
            emit_json("circuits/" + dataset(o, k) + "_" + to_string(p) + "_" + tname(t) + ".json",
                      circuit_to_json(select_circuit(f, p, t, L)));
      }
      // size / overlap statistics over every Fisher layer
      ojson stats = ojson::array();
      for (double t : cfg_.thresholds) {
        std::array<Circuit, 3> cs{select_circuit(f, Position::unit, t),
                                  select_circuit(f, Position::tens, t),
                                  select_circuit(f, Position::hundreds, t)};
        stats.push_back(report::to_json(circuit_stats(cs)));
      }
      emit_json("stats/circuit_stats_" + std::string(to_string(o)) + ".json", stats);
    }
    std::vector<int> ks;
    for (int k : cfg_.topk)
      if (k >= 1 && static_cast<std::uint32_t>(k) <= tables[Operator::add].d_neurons)
        ks.push_back(k);
    if (ks.empty()) ks = default_topk(tables[Operator::add].d_neurons);
    for (Position p : kPositions) {
      const auto rows = topk_overlap(tables[Operator::add], tables[Operator::sub], p, ks);
      emit("stats/topk_overlap_" + std::string(to_string(p)) + ".csv",
           report::render_topk_overlap(rows, p).csv);
    }
  }

  Circuit circuit(Operator o, PairKind k, Position p, double t) const {
    return load_circuit(
        at("circuits/" + dataset(o, k) + "_" + to_string(p) + "_" + tname(t) + ".json").string());
  }

  void stage_intervene() {
    const auto m = model();
    ojson tstar = ojson::object();
    ojson effects = ojson::array();
    ojson all_neuron = ojson::object();
    for (Operator o : ops()) {
      const auto f = fisher(o);
      for (PairKind k : kinds()) {
        const auto pairs = read_pairs(at("data/pairs_" + dataset(o, k) + ".jsonl").string());
        const auto L = layer_set(o, k);
        const auto ctx = make_contexts(m, pairs);
        for (Position p : kPositions) {
          const std::string tag = dataset(o, k) + "_" + to_string(p);
          ojson sweep = ojson::array();
          double best_t = cfg_.thresholds.front(), best = -1e300;
          std::vector<InterventionOutcome> best_out;
          for (double t : cfg_.thresholds) {
            const Circuit c = circuit(o, k, p, t);
            auto outcomes = run_on_contexts(m, pairs, ctx, c);
            SweepRow row;
            row.t = t;
            row.circuit_size = c.size();
            row.effect = effect_row(outcomes, c);
            row.moved_from_bbb = moved_from_bbb_rate(outcomes);
            sweep.push_back(report::to_json(row));
            const double target = row.effect.delta(row.effect.target);
            if (target > best) {
              best = target;
              best_t = t;
              best_out = std::move(outcomes);
            }
          }
          emit_json("interventions/sweep_" + tag + ".json", sweep);
          emit("interventions/outcomes_" + tag + ".jsonl", to_jsonl(best_out));
          tstar[tag] = best_t;
          EffectRow e = effect_row(best_out, circuit(o, k, p, best_t));
          effects.push_back(dgc::to_json(e));
          if (cfg_.ablation && !L.empty()) {
            std::vector<int> cutoffs;
            for (int cut = L.back(); cut < cfg_.model.n_layers; ++cut) cutoffs.push_back(cut);
            if (cutoffs.size() < 2 && L.size() > 1) cutoffs.insert(cutoffs.begin(), L.back() - 1);
            const auto abl = layer_ablation(m, pairs, f, p, best_t, L, cutoffs);
            ojson a = ojson::array();
            for (const auto& r : abl)
              a.push_back({{"last_layer", r.last_layer},
                           {"delta_target_pp", r.delta_target_pp},
                           {"delta_flip_rate", r.delta_flip_rate},
                           {"effect", dgc::to_json(r.effect)}});
            emit_json("interventions/ablation_" + tag + ".json", a);
          }
        }
        // every neuron of every layer in L: the threshold sits below the minimum score
        const Circuit full = full_circuit(f, Position::unit, L);
        const auto outcomes = run_on_contexts(m, pairs, ctx, full);
        EffectRow e = effect_row(outcomes, full);
        all_neuron[dataset(o, k)] = {{"layers", L},
                                     {"moved_from_bbb", moved_from_bbb_rate(outcomes)},
                                     {"effect", dgc::to_json(e)}};
      }
    }
    emit_json("interventions/tstar.json", tstar);
    emit_json("interventions/effects.json", effects);
    emit_json("interventions/all_neuron.json", all_neuron);
  }

  double t_star(Operator o, Position p) const {
    const auto j = read_json(at("interventions/tstar.json"));
    return j.at(dataset(o, PairKind::op2) + "_" + to_string(p)).get<double>();
  }

  void stage_carry() {
    const auto m = model();
    ojson effects = ojson::array();
    for (CarryScenario s : {CarryScenario::unit_to_tens, CarryScenario::tens_to_hundreds}) {
      const std::string id = s == CarryScenario::unit_to_tens ? "1" : "2";
      const auto pairs = read_carry_pairs(at("data/carry_" + id + ".jsonl").string());
      const Position p = carry_circuit_position(s);
      const Circuit c = circuit(Operator::add, PairKind::op2, p, t_star(Operator::add, p));
      const auto outcomes = run_carry_interventions(m, pairs, c);
      emit("carry/outcomes_" + id + ".jsonl", to_jsonl(outcomes));
      EffectRow e = effect_row(outcomes, c);
      e.op = to_string(s);
      effects.push_back(dgc::to_json(e));
    }
    emit_json("carry/effects.json", effects);
  }

  void stage_similarity() {
    for (Operator o : ops())
      for (Position p : kPositions) {
        const Circuit c = circuit(o, PairKind::op2, p, t_star(o, p));
        SimilarityOptions so;
        so.baseline_pairs = cfg_.baseline_pairs;
        so.class_pair_cap = cfg_.class_pair_cap;
        so.seed = cfg_.data_seed;
        const auto r =
            subtask_similarity(at("traces/" + std::string(to_string(o)) + ".dgc1").string(), c, so);
        emit("similarity/" + std::string(to_string(o)) + "_" + to_string(p) + ".csv",
             similarity_csv(r));
      }
  }

  void stage_sufficiency() {
    for (Operator o : ops()) {
      const auto f = fisher(o);
      for (Position p : kPositions) {
        SufficiencyOptions so;
        so.thresholds = cfg_.thresholds;
        so.lambda_scale = cfg_.lda_shrinkage;
        so.test_fraction = cfg_.test_fraction;
        so.seed = cfg_.split_seed;
        const auto rows =
            sufficiency_report(at("traces/" + std::string(to_string(o)) + ".dgc1").string(), f, p, so);
        emit("sufficiency/" + std::string(to_string(o)) + "_" + to_string(p) + ".csv",
             sufficiency_csv(rows));
      }
    }
  }

  void stage_heatmaps() {
    for (Operator o : ops()) {
      const auto f = fisher(o);
      const int top = std::min<int>(cfg_.heatmap_top, static_cast<int>(f.d_neurons));
      for (Position p : kPositions) {
        const auto maps = top_neuron_heatmaps(
            at("traces/" + std::string(to_string(o)) + ".dgc1").string(), f, p, top);
        for (const auto& h : maps)
          emit("heatmaps/" + std::string(to_string(o)) + "/" + heatmap_name(h) + ".csv",
               heatmap_csv(h));
      }
    }
  }

  void stage_report();
};

// --- report stage ------------------------------------------------------------------------

inline void Pipeline::stage_report() {
  using namespace report;
  const std::string R = "report/";
  // effect and flip tables, one pair of files per pair kind
  const auto effects_j = read_json(at("interventions/effects.json"));
  std::map<std::string, std::vector<EffectRow>> by_kind;
  {
    std::size_t i = 0;
    for (Operator o : ops())
      for (PairKind k : kinds())
        for (Position p : kPositions) {
          (void)o;
          (void)p;
          by_kind[to_string(k)].push_back(effect_from_json(effects_j.at(i++)));
        }
  }
  for (auto& [kind, rows] : by_kind) {
    const auto t2 = render_effect_table(rows);
    emit(R + "effects_" + kind + ".md", t2.text);
    emit(R + "effects_" + kind + ".csv", t2.csv);
    const auto t3 = render_flip_table(rows);
    emit(R + "flips_" + kind + ".md", t3.text);
    emit(R + "flips_" + kind + ".csv", t3.csv);
  }
  // threshold sweeps
  for (Operator o : ops())
    for (PairKind k : kinds())
      for (Position p : kPositions) {
        const std::string tag = dataset(o, k) + "_" + to_string(p);
        std::vector<SweepRow> rows;
        for (const auto& j : read_json(at("interventions/sweep_" + tag + ".json")))
          rows.push_back(sweep_from_json(j));
        emit(R + "sweep_" + tag + ".svg",
             render_sweep_chart(rows, "Effect size by threshold: " + tag));
        const auto tbl = render_sweep_table(rows);
        emit(R + "sweep_" + tag + ".md", tbl.text);
      }
  // within-class similarity
  for (Operator o : ops()) {
    std::vector<SimilarityColumn> cols;
    for (Position p : kPositions) {
      SimilarityColumn c;
      c.position = p;
      c.t = t_star(o, p);
      c.rows = similarity_from_csv(
          csv::read(at("similarity/" + std::string(to_string(o)) + "_" + to_string(p) + ".csv").string()));
      cols.push_back(std::move(c));
    }
    const auto t4 = render_similarity(cols);
    emit(R + "similarity_" + std::string(to_string(o)) + ".md", t4.text);
    emit(R + "similarity_" + std::string(to_string(o)) + ".csv", t4.csv);
  }
  // add/sub top-K overlap
  {
    std::string md, all_csv;
    for (Position p : kPositions) {
      const auto t = csv::read(at("stats/topk_overlap_" + std::string(to_string(p)) + ".csv").string());
      std::vector<TopKOverlapRow> rows;
      for (const auto& r : t.rows) {
        TopKOverlapRow row;
        row.layer = std::stoi(r[t.column("layer")]);
        for (std::size_t i = 2; i < t.header.size(); ++i)
          row.percent[std::stoi(t.header[i].substr(3))] = std::stod(r[i]);
        rows.push_back(row);
      }
      const auto rr = render_topk_overlap(rows, p);
      md += rr.text + "\n";
      all_csv += p == Position::unit ? rr.csv : rr.csv.substr(rr.csv.find('\n') + 1);
    }
    emit(R + "add_sub_overlap.md", md);
    emit(R + "add_sub_overlap.csv", all_csv);
  }
  // circuit size / overlap panels and sufficiency panels
  for (Operator o : ops()) {
    const std::string os = to_string(o);
    std::vector<CircuitStats> per_t;
    for (const auto& j : read_json(at("stats/circuit_stats_" + os + ".json")))
      per_t.push_back(circuit_stats_from_json(j));
    const auto ov = render_overlap(per_t);
    emit(R + "circuit_overlap_" + os + ".md", ov.text);
    emit(R + "circuit_overlap_" + os + ".csv", ov.csv);
    for (Position p : kPositions)
      emit(R + "circuit_size_" + os + "_" + to_string(p) + ".svg", render_size_chart(per_t, p));
    for (Position p : kPositions) {
      const auto rows = sufficiency_from_csv(
          csv::read(at("sufficiency/" + os + "_" + to_string(p) + ".csv").string()));
      const auto s = render_sufficiency(rows, p);
      emit(R + "sufficiency_" + os + "_" + to_string(p) + ".md", s.text);
      emit(R + "sufficiency_" + os + "_" + to_string(p) + ".svg", render_sufficiency_chart(rows, p));
    }
  }
  // injection profiles
  std::vector<std::string> captions;
  bool any_injection = false;
  for (Operator o : ops())
    for (PairKind k : kinds()) {
      const auto prof = injection_from_json(read_json(at("injection/" + dataset(o, k) + ".json")));
      any_injection |= prof.injection_layer.has_value();
      captions.push_back(dataset(o, k) + ": " + prof.caption());
      emit(R + "injection_" + dataset(o, k) + ".md", render_injection(prof).text);
      emit(R + "injection_" + dataset(o, k) + ".svg", render_injection_chart(prof));
    }
  // carry
  {
    std::vector<EffectRow> rows;
    for (const auto& j : read_json(at("carry/effects.json"))) rows.push_back(effect_from_json(j));
    const auto c = render_carry_table(rows);
    emit(R + "carry.md", c.text);
    emit(R + "carry.csv", c.csv);
  }
  // heatmap SVGs for the strongest neurons
  for (Operator o : ops()) {
    const auto f = fisher(o);
    for (Position p : kPositions) {
      std::vector<std::pair<double, std::string>> ranked;
      for (const auto& e : fs::directory_iterator(at("heatmaps/" + std::string(to_string(o))))) {
        const auto name = e.path().stem().string();
        if (!boost::starts_with(name, std::string(to_string(p)) + "_")) continue;
        const auto h = heatmap_from_csv(csv::read(e.path().string()));
        ranked.emplace_back(-h.fisher, e.path().string());
      }
      std::sort(ranked.begin(), ranked.end());
      for (std::size_t i = 0; i < ranked.size() && i < cfg_.heatmap_svgs; ++i) {
        const auto h = heatmap_from_csv(csv::read(ranked[i].second));
        emit(R + "heatmaps/" + std::string(to_string(o)) + "_" + heatmap_name(h) + ".svg",
             render_heatmap(h));
      }
    }
  }

  // acceptance-style checks and the summary
  const auto ts = read_json(at("model/train_summary.json"));
  const double acc = ts.at("final_accuracy").get<double>();
  const auto all = read_json(at("interventions/all_neuron.json"));
  ojson checks;
  checks["training_accuracy"] = acc;
  checks["training_accuracy_ok"] = acc >= cfg_.min_accuracy;
  checks["injection_detected"] = any_injection;
  ojson moved = ojson::object();
  bool moved_ok = true;
  for (Operator o : ops()) {
    const double r = all.at(dataset(o, PairKind::op2)).at("moved_from_bbb").get<double>();
    moved[dataset(o, PairKind::op2)] = r;
    moved_ok &= r >= 0.5;
  }
  checks["all_neuron_moved_from_bbb"] = moved;
  checks["all_neuron_moved_ok"] = moved_ok;
  // position selectivity: at t*, is the target the largest increase among
  // the single-source-digit variants?
  ojson selective = ojson::object();
  for (const auto& [kind, rows] : by_kind)
    for (const auto& e : rows) {
      bool sel = e.delta(e.target) > 0;
      for (auto l : {"bbs", "bsb", "sbb"})
        if (l != e.target) sel &= e.delta(e.target) > e.delta(l);
      selective[e.op + "_" + kind + "_" + e.position] = sel;
    }
  checks["position_selective"] = selective;
  const std::vector<std::string> required{
      R + "effects_op2.md", R + "flips_op2.md", R + "similarity_add.md",
      R + "add_sub_overlap.md"};
  bool artifacts = true;
  for (const auto& r : required) artifacts &= fs::exists(at(r));
  checks["artifacts_complete"] = artifacts;

  std::ostringstream md;
  md << "# Run summary\n\n";
  md << "Held-out accuracy: " << fmt("%.4f", acc) << " (threshold " << csv::num(cfg_.min_accuracy)
     << ", " << (acc >= cfg_.min_accuracy ? "met" : "MISSED") << ")\n\n";
  md << "## Operand injection\n\n";
  for (const auto& c : captions) md << "- " << c << "\n";
  md << "\n## All-neuron circuit over L (op2 pairs)\n\n";
  for (auto it = moved.begin(); it != moved.end(); ++it)
    md << "- " << it.key() << ": argmax moved away from bbb on "
       << rate_pct(it.value().get<double>()) << " of pairs\n";
  md << "\n## Position selectivity at t*\n\n";
  md << "Target variant shows the largest increase among bbs/bsb/sbb:\n\n";
  for (auto it = selective.begin(); it != selective.end(); ++it)
    md << "- " << it.key() << ": " << (it.value().get<bool>() ? "yes" : "no") << "\n";
  md << "\n## Tables\n\n";
  for (const auto& [kind, rows] : by_kind)
    md << "### Effect sizes (" << kind << ")\n\n" << render_effect_table(rows).text << "\n"
       << "### Flip rates (" << kind << ")\n\n" << render_flip_table(rows).text << "\n";
  emit(R + "summary.md", md.str());
  emit_json(R + "checks.json", checks);
}

}  // namespace dgc
