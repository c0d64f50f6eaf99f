// dgc: command-line entry point for every pipeline stage plus `reproduce`.

#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#include "CLI11.hpp"

#include "dgc/pipeline.hpp"

namespace fs = std::filesystem;
using namespace dgc;
using ojson = nlohmann::ordered_json;

namespace {

ojson read_json_file(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw FormatError("cannot open " + path);
  return ojson::parse(is);
}

void write_file(const std::string& path, const std::string& s) {
  const fs::path p(path);
  if (p.has_parent_path()) fs::create_directories(p.parent_path());
  csv::write_file(path, s);
}

// "a..b" or "a,b,c"
std::vector<int> parse_layers(const std::string& s) {
  if (s.empty()) return {};
  return detail::parse_list<int>(s, "--layers");
}

std::string with_ext(const std::string& path, const std::string& ext) {
  return fs::path(path).replace_extension(ext).string();
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"digit-position circuits in arithmetic transformers"};
  app.require_subcommand(1);
  std::function<void()> action;

  // gen
  auto* gen = app.add_subcommand("gen", "generate a prompt or pair dataset (JSON lines)");
  std::string g_op = "add", g_kind = "simple", g_out;
  std::size_t g_n = 1000;
  std::uint64_t g_seed = 1;
  bool g_dedup = false;
  gen->add_option("--op", g_op)->check(CLI::IsMember({"add", "sub"}));
  gen->add_option("--kind", g_kind)->check(CLI::IsMember({"simple", "all", "op1", "op2", "carry1", "carry2"}));
  gen->add_option("--n", g_n, "count (kind=all: 0 means every problem)");
  gen->add_option("--seed", g_seed);
  gen->add_flag("--dedup", g_dedup);
  gen->add_option("--out", g_out)->required();
  gen->callback([&] {
    action = [&] {
      const Operator op = parse_operator(g_op);
      GenOptions o;
      o.dedup = g_dedup;
      std::string text;
      if (g_kind == "simple")
        text = to_jsonl(generate_simple_dataset(op, g_n, g_seed, o));
      else if (g_kind == "all")
        text = to_jsonl(sample_no_carry_problems(op, g_n, g_seed));
      else if (g_kind == "op1" || g_kind == "op2")
        text = to_jsonl(generate_pair_dataset(op, parse_pair_kind(g_kind), g_n, g_seed, o));
      else
        text = to_jsonl(generate_carry_dataset(
            g_kind == "carry1" ? CarryScenario::unit_to_tens : CarryScenario::tens_to_hundreds, g_n,
            g_seed, o));
      write_file(g_out, text);
    };
  });

  // train
  auto* tr = app.add_subcommand("train", "train the toy model");
  std::string t_config, t_out;
  std::vector<std::string> t_data;
  tr->add_option("--config", t_config, "INI config ([model] section is used)");
  tr->add_option("--data", t_data, "prompt JSON-lines files")->required();
  tr->add_option("--out", t_out, "checkpoint path")->required();
  tr->callback([&] {
    action = [&] {
      const PipelineConfig c = t_config.empty() ? PipelineConfig{} : load_config(t_config);
      std::vector<ArithmeticPrompt> data;
      for (const auto& p : t_data) {
        auto v = read_prompts(p);
        data.insert(data.end(), v.begin(), v.end());
      }
      const auto r = train(c.model, data, c.train, [](const EvalPoint& e, float loss) {
        std::cerr << "step " << e.step << " epoch " << e.epoch << " loss " << loss
                  << " held-out acc " << e.accuracy << "\n";
      });
      save_checkpoint(t_out, r.model, {{"steps", r.steps}, {"final_accuracy", r.final_accuracy}});
      std::cout << "held-out accuracy " << r.final_accuracy << " after " << r.steps << " steps\n";
    };
  });

  // capture
  auto* cap = app.add_subcommand("capture", "write a DGC1 activation trace");
  std::string c_ckpt, c_data, c_out, c_site = "mlp_out", c_model_id = "toy";
  cap->add_option("--ckpt", c_ckpt)->required();
  cap->add_option("--data", c_data)->required();
  cap->add_option("--site", c_site)->check(CLI::IsMember({"mlp_out", "mlp_hidden", "attn_out", "block_out"}));
  cap->add_option("--model-id", c_model_id);
  cap->add_option("--out", c_out)->required();
  cap->callback([&] {
    action = [&] {
      const auto m = load_checkpoint(c_ckpt).model;
      CaptureOptions o;
      o.site = parse_site(c_site);
      o.model_id = c_model_id;
      o.dataset = fs::path(c_data).stem().string();
      const auto n = capture_trace(m, read_prompts(c_data), c_out, o);
      std::cout << n << " records\n";
    };
  });

  // trace-inspect
  auto* ti = app.add_subcommand("trace-inspect", "print a trace header and per-class counts");
  std::string i_path;
  ti->add_option("path", i_path)->required();
  ti->callback([&] {
    action = [&] {
      TraceReader rd(i_path);
      const auto& h = rd.header();
      std::cout << "format DGC1 v" << h.version << "\n"
                << "prob_mode " << (h.prob_mode == ProbMode::dense ? "dense" : "sparse") << "\n"
                << "n_layers " << h.n_layers << "\nd_neurons " << h.d_neurons << "\nvocab_size "
                << h.vocab_size << "\nmetadata " << h.metadata.dump() << "\n";
      std::array<std::map<std::string, std::size_t>, 3> counts;
      TraceRecord r;
      std::size_t n = 0;
      while (rd.next(r)) {
        ++n;
        for (Position p : kPositions) ++counts[static_cast<int>(p)][r.cls(p)];
      }
      std::cout << "records " << n << "\n";
      for (Position p : kPositions) {
        const auto& m = counts[static_cast<int>(p)];
        std::cout << to_string(p) << " classes " << m.size() << ":";
        for (const auto& [k, v] : m) std::cout << " " << k << "=" << v;
        std::cout << "\n";
      }
    };
  });

  // fisher
  auto* fi = app.add_subcommand("fisher", "per-neuron Fisher scores from a trace");
  std::string f_trace, f_layers, f_out;
  fi->add_option("--trace", f_trace)->required();
  fi->add_option("--layers", f_layers, "a..b or a,b,c (default: all)");
  fi->add_option("--out", f_out)->required();
  fi->callback([&] {
    action = [&] { save_fisher(f_out, fisher_scores(f_trace, parse_layers(f_layers))); };
  });

  // circuit
  auto* ci = app.add_subcommand("circuit", "threshold a Fisher table into a circuit");
  std::string k_fisher, k_pos = "unit", k_layers, k_out;
  double k_t = 0.6;
  ci->add_option("--fisher", k_fisher)->required();
  ci->add_option("--pos", k_pos)->check(CLI::IsMember({"unit", "tens", "hundreds"}));
  ci->add_option("--t", k_t);
  ci->add_option("--layers", k_layers);
  ci->add_option("--out", k_out)->required();
  ci->callback([&] {
    action = [&] {
      const auto c = select_circuit(load_fisher(k_fisher), parse_position(k_pos), k_t,
                                    parse_layers(k_layers));
      save_circuit(k_out, c);
      std::cout << c.size() << " neurons\n";
    };
  });

  // sufficiency
  auto* su = app.add_subcommand("sufficiency", "LDA accuracy of circuit vs. all neurons");
  std::string s_trace, s_fisher, s_pos = "unit", s_out;
  SufficiencyOptions s_opt;
  su->add_option("--trace", s_trace)->required();
  su->add_option("--fisher", s_fisher)->required();
  su->add_option("--pos", s_pos)->check(CLI::IsMember({"unit", "tens", "hundreds"}));
  su->add_option("--t", s_opt.thresholds, "thresholds (default sweep)");
  su->add_option("--seed", s_opt.seed);
  su->add_option("--out", s_out)->required();
  su->callback([&] {
    action = [&] {
      write_file(s_out, sufficiency_csv(sufficiency_report(s_trace, load_fisher(s_fisher),
                                                           parse_position(s_pos), s_opt)));
    };
  });

  // intervene
  auto* iv = app.add_subcommand("intervene", "patch circuit activations from source into base");
  std::string v_ckpt, v_pairs, v_circuit, v_out;
  iv->add_option("--ckpt", v_ckpt)->required();
  iv->add_option("--pairs", v_pairs)->required();
  iv->add_option("--circuit", v_circuit)->required();
  iv->add_option("--out", v_out)->required();
  iv->callback([&] {
    action = [&] {
      const auto m = load_checkpoint(v_ckpt).model;
      const auto c = load_circuit(v_circuit);
      const auto outcomes = run_interventions(m, read_pairs(v_pairs), c);
      write_file(v_out, to_jsonl(outcomes));
      const auto e = effect_row(outcomes, c);
      std::cout << report::render_effect_table({e}).text;
    };
  });

  // localize
  auto* lo = app.add_subcommand("localize", "find the operand injection layer");
  std::string l_ckpt, l_pairs, l_out;
  double l_eps = kInjectionEpsilon;
  lo->add_option("--ckpt", l_ckpt)->required();
  lo->add_option("--pairs", l_pairs)->required();
  lo->add_option("--epsilon", l_eps);
  lo->add_option("--out", l_out)->required();
  lo->callback([&] {
    action = [&] {
      auto prof = localize_injection(load_checkpoint(l_ckpt).model, read_pairs(l_pairs),
                                     default_injection_sites(), l_eps);
      prof.dataset = fs::path(l_pairs).stem().string();
      write_file(l_out, injection_csv(prof));
      std::cout << prof.caption() << "\n";
    };
  });

  // carry
  auto* ca = app.add_subcommand("carry", "carry-propagation interventions");
  std::string a_ckpt, a_pairs, a_circuit, a_out;
  int a_scenario = 1;
  ca->add_option("--scenario", a_scenario)->check(CLI::IsMember({1, 2}));
  ca->add_option("--ckpt", a_ckpt)->required();
  ca->add_option("--pairs", a_pairs)->required();
  ca->add_option("--circuit", a_circuit)->required();
  ca->add_option("--out", a_out)->required();
  ca->callback([&] {
    action = [&] {
      const auto pairs = read_carry_pairs(a_pairs);
      const auto want = a_scenario == 1 ? CarryScenario::unit_to_tens : CarryScenario::tens_to_hundreds;
      for (const auto& p : pairs)
        if (p.scenario != want) throw DataError("pair scenario does not match --scenario");
      const auto c = load_circuit(a_circuit);
      const auto outcomes = run_carry_interventions(load_checkpoint(a_ckpt).model, pairs, c);
      write_file(a_out, to_jsonl(outcomes));
      auto e = effect_row(outcomes, c);
      e.op = to_string(want);
      std::cout << report::render_carry_table({e}).text;
    };
  });

  // similarity
  auto* si = app.add_subcommand("similarity", "within-class cosine similarity of circuit activations");
  std::string m_trace, m_circuit, m_out;
  SimilarityOptions m_opt;
  si->add_option("--trace", m_trace)->required();
  si->add_option("--circuit", m_circuit)->required();
  si->add_option("--baseline-pairs", m_opt.baseline_pairs);
  si->add_option("--seed", m_opt.seed);
  si->add_option("--out", m_out)->required();
  si->callback([&] {
    action = [&] {
      write_file(m_out, similarity_csv(subtask_similarity(m_trace, load_circuit(m_circuit), m_opt)));
    };
  });

  // heatmaps
  auto* he = app.add_subcommand("heatmaps", "digit-pair heatmaps for the top Fisher neurons");
  std::string h_trace, h_fisher, h_pos = "unit", h_out;
  int h_top = kHeatmapTopN;
  bool h_svg = false;
  he->add_option("--trace", h_trace)->required();
  he->add_option("--fisher", h_fisher)->required();
  he->add_option("--pos", h_pos)->check(CLI::IsMember({"unit", "tens", "hundreds"}));
  he->add_option("--top", h_top);
  he->add_flag("--svg", h_svg);
  he->add_option("--out", h_out, "output directory")->required();
  he->callback([&] {
    action = [&] {
      const auto maps =
          top_neuron_heatmaps(h_trace, load_fisher(h_fisher), parse_position(h_pos), h_top);
      for (const auto& h : maps) {
        const auto base = (fs::path(h_out) / heatmap_name(h)).string();
        write_file(base + ".csv", heatmap_csv(h));
        if (h_svg) write_file(base + ".svg", report::render_heatmap(h));
      }
    };
  });

  // report
  auto* re = app.add_subcommand("report", "render a table or figure");
  std::string r_kind, r_out, r_pos = "unit";
  std::vector<std::string> r_in;
  std::vector<double> r_t;
  re->add_option("--kind", r_kind)
      ->required()
      ->check(CLI::IsMember({"effect", "sweep", "overlap", "sufficiency", "similarity", "heatmap"}));
  re->add_option("--in", r_in, "input file(s)")->required();
  re->add_option("--out", r_out)->required();
  re->add_option("--pos", r_pos, "position (sufficiency)");
  re->add_option("--t", r_t, "t* per similarity input");
  re->callback([&] {
    action = [&] {
      using namespace report;
      if (r_kind == "effect") {
        std::vector<EffectRow> rows;
        for (const auto& in : r_in) {
          if (fs::path(in).extension() == ".csv") {
            auto v = effect_rows_from_csv(csv::read(in));
            rows.insert(rows.end(), v.begin(), v.end());
          } else {
            for (const auto& j : read_json_file(in)) rows.push_back(effect_from_json(j));
          }
        }
        const auto t = render_effect_table(rows);
        write_file(r_out, t.text);
        write_file(with_ext(r_out, ".csv"), t.csv);
        write_file(with_ext(r_out, ".flips.md"), render_flip_table(rows).text);
      } else if (r_kind == "sweep") {
        std::vector<SweepRow> rows;
        for (const auto& j : read_json_file(r_in.at(0))) rows.push_back(sweep_from_json(j));
        write_file(r_out, render_sweep_chart(rows, fs::path(r_in[0]).stem().string()));
        write_file(with_ext(r_out, ".md"), render_sweep_table(rows).text);
      } else if (r_kind == "overlap") {
        std::vector<CircuitStats> per_t;
        for (const auto& j : read_json_file(r_in.at(0))) per_t.push_back(circuit_stats_from_json(j));
        const auto t = render_overlap(per_t);
        write_file(r_out, t.text);
        write_file(with_ext(r_out, ".csv"), t.csv);
      } else if (r_kind == "sufficiency") {
        const auto rows = sufficiency_from_csv(csv::read(r_in.at(0)));
        const Position p = parse_position(r_pos);
        write_file(r_out, render_sufficiency(rows, p).text);
        write_file(with_ext(r_out, ".svg"), render_sufficiency_chart(rows, p));
      } else if (r_kind == "similarity") {
        std::vector<SimilarityColumn> cols;
        for (std::size_t i = 0; i < r_in.size(); ++i) {
          SimilarityColumn c;
          c.rows = similarity_from_csv(csv::read(r_in[i]));
          if (!c.rows.empty()) c.position = c.rows.front().position;
          c.t = i < r_t.size() ? r_t[i] : 0.0;
          cols.push_back(std::move(c));
        }
        const auto t = render_similarity(cols);
        write_file(r_out, t.text);
        write_file(with_ext(r_out, ".csv"), t.csv);
      } else {
        write_file(r_out, render_heatmap(heatmap_from_csv(csv::read(r_in.at(0)))));
      }
    };
  });

  // reproduce
  auto* rp = app.add_subcommand("reproduce", "run the whole pipeline");
  std::string p_config, p_out = "out";
  bool p_resume = false;
  rp->add_option("--config", p_config)->required();
  rp->add_option("--out", p_out);
  rp->add_flag("--resume", p_resume);
  int exit_code = kExitOk;
  rp->callback([&] {
    action = [&] {
      Pipeline pipe(load_config(p_config), p_out);
      const auto res = pipe.run(p_resume);
      std::cout << "ran " << res.ran.size() << " stages, skipped " << res.skipped.size() << "\n"
                << "summary: " << (fs::path(p_out) / "report/summary.md").string() << "\n";
      if (res.exit_code == kExitAcceptance)
        std::cerr << "training accuracy below the configured minimum\n";
      exit_code = res.exit_code;
    };
  });

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : kExitConfig;
  }
  try {
    action();
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return kExitConfig;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitStage;
  }
  return exit_code;
}
