#pragma once

// Text, CSV and SVG renderings of the analysis artifacts. Every renderer is a
// pure function of its input, so outputs are byte-stable.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdio>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"

#include "dgc/analysis.hpp"
#include "dgc/csv.hpp"
#include "dgc/fisher.hpp"
#include "dgc/interventions.hpp"
#include "dgc/lda.hpp"

namespace dgc::report {

struct ReportError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct Rendered {
  std::string text;
  std::string csv;
};

inline std::string fmt(const char* f, double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, f, v);
  return buf;
}

inline std::string signed_pct(double v) { return fmt("%+.2f", v) + "%"; }

// "51%", "68.5%"
inline std::string rate_pct(double fraction) {
  std::string s = fmt("%.1f", 100.0 * fraction);
  if (s.size() > 2 && s.substr(s.size() - 2) == ".0") s.resize(s.size() - 2);
  return s + "%";
}

inline std::string op_symbol(const std::string& op) {
  if (op == "add") return "+";
  if (op == "sub") return "-";
  return op;
}

inline std::string op_name(const std::string& symbol) {
  if (symbol == "+") return "add";
  if (symbol == "-") return "sub";
  return symbol;
}

inline std::string md_row(const std::vector<std::string>& cells) {
  std::string s = "|";
  for (const auto& c : cells) s += " " + c + " |";
  return s + "\n";
}

inline std::string md_rule(std::size_t n) {
  std::string s = "|";
  for (std::size_t i = 0; i < n; ++i) s += "---|";
  return s + "\n";
}

// --- effect and flip tables ----------------------------------------------------

inline const std::vector<std::string>& effect_columns() {
  static const std::vector<std::string> c{"m", "o", "d", "t*"};
  return c;
}

inline Rendered render_effect_table(const std::vector<EffectRow>& rows) {
  std::vector<std::string> head = effect_columns();
  for (auto l : kVariantLabels) head.emplace_back(l);
  Rendered r;
  r.text = md_row(head) + md_rule(head.size());
  std::vector<std::string> chead{"m", "o", "d", "t", "target"};
  for (auto l : kVariantLabels) chead.emplace_back(l);
  chead.insert(chead.end(), {"n", "flip_rate"});
  r.csv = csv::row(chead);
  for (const auto& e : rows) {
    std::vector<std::string> cells{e.model_id, op_symbol(e.op), e.position, csv::num(e.t)};
    std::vector<std::string> ccells{e.model_id, e.op, e.position, csv::num(e.t), e.target};
    for (auto l : kVariantLabels) {
      double v;
      try {
        v = e.delta(l);
      } catch (const InterventionError&) {
        throw ReportError("effect row is missing variant column " + std::string(l));
      }
      const std::string s = signed_pct(v);
      cells.push_back(l == e.target ? "**" + s + "**" : s);
      ccells.push_back(csv::num(v));
    }
    ccells.push_back(std::to_string(e.n));
    ccells.push_back(csv::num(e.flip_rate));
    r.text += md_row(cells);
    r.csv += csv::row(ccells);
  }
  return r;
}

inline std::vector<EffectRow> effect_rows_from_csv(const csv::Table& t) {
  std::vector<EffectRow> out;
  for (const auto& c : t.rows) {
    EffectRow e;
    e.model_id = c[t.column("m")];
    e.op = c[t.column("o")];
    e.position = c[t.column("d")];
    e.t = std::stod(c[t.column("t")]);
    e.target = c[t.column("target")];
    for (auto l : kVariantLabels) {
      e.labels.emplace_back(l);
      e.mean_delta_pp.push_back(std::stod(c[t.column(std::string(l))]));
    }
    e.n = std::stoul(c[t.column("n")]);
    e.flip_rate = std::stod(c[t.column("flip_rate")]);
    out.push_back(std::move(e));
  }
  return out;
}

inline Rendered render_flip_table(const std::vector<EffectRow>& rows) {
  Rendered r;
  r.text = md_row({"m", "o", "d", "t*", "Flip Rate"}) + md_rule(5);
  r.csv = csv::row({"m", "o", "d", "t", "target", "flip_rate", "n"});
  for (const auto& e : rows) {
    r.text += md_row({e.model_id, op_symbol(e.op), e.position, csv::num(e.t), rate_pct(e.flip_rate)});
    r.csv += csv::row({e.model_id, e.op, e.position, csv::num(e.t), e.target,
                       csv::num(e.flip_rate), std::to_string(e.n)});
  }
  return r;
}

// Carry outcome rows carry a ninth variant; rendered label by label.
inline Rendered render_carry_table(const std::vector<EffectRow>& rows) {
  Rendered r;
  if (rows.empty()) {
    r.text = md_row({"scenario"}) + md_rule(1);
    r.csv = csv::row({"scenario"});
    return r;
  }
  std::vector<std::string> head{"scenario", "d", "t*"};
  for (const auto& l : rows.front().labels) head.push_back(l);
  head.push_back("Flip Rate");
  r.text = md_row(head) + md_rule(head.size());
  r.csv = csv::row(head);
  for (const auto& e : rows) {
    std::vector<std::string> cells{e.op, e.position, csv::num(e.t)}, cc = cells;
    for (std::size_t i = 0; i < e.labels.size(); ++i) {
      const std::string s = signed_pct(e.mean_delta_pp[i]);
      cells.push_back(e.labels[i] == e.target ? "**" + s + "**" : s);
      cc.push_back(csv::num(e.mean_delta_pp[i]));
    }
    cells.push_back(rate_pct(e.flip_rate));
    cc.push_back(csv::num(e.flip_rate));
    r.text += md_row(cells);
    r.csv += csv::row(cc);
  }
  return r;
}

// --- SVG primitives ----------------------------------------------------------------

inline std::string num2(double v) { return fmt("%.2f", v); }

inline std::string xml_escape(const std::string& s) {
  std::string o;
  for (char c : s) {
    switch (c) {
      case '&': o += "&amp;"; break;
      case '<': o += "&lt;"; break;
      case '>': o += "&gt;"; break;
      case '"': o += "&quot;"; break;
      default: o += c;
    }
  }
  return o;
}

class Svg {
 public:
  Svg(int w, int h) : w_(w), h_(h) {}

  void rect(double x, double y, double w, double h, const std::string& fill,
            const std::string& extra = "") {
    body_ << "<rect x=\"" << num2(x) << "\" y=\"" << num2(y) << "\" width=\"" << num2(w)
          << "\" height=\"" << num2(h) << "\" fill=\"" << fill << "\"" << extra << "/>\n";
  }
  void line(double x1, double y1, double x2, double y2, const std::string& stroke = "#000") {
    body_ << "<line x1=\"" << num2(x1) << "\" y1=\"" << num2(y1) << "\" x2=\"" << num2(x2)
          << "\" y2=\"" << num2(y2) << "\" stroke=\"" << stroke << "\" stroke-width=\"1\"/>\n";
  }
  void text(double x, double y, const std::string& s, const std::string& anchor = "middle",
            int size = 11) {
    body_ << "<text x=\"" << num2(x) << "\" y=\"" << num2(y) << "\" font-size=\"" << size
          << "\" text-anchor=\"" << anchor << "\">" << xml_escape(s) << "</text>\n";
  }
  void polyline(const std::vector<std::pair<double, double>>& pts, const std::string& stroke) {
    body_ << "<polyline fill=\"none\" stroke=\"" << stroke << "\" stroke-width=\"1.5\" points=\"";
    for (std::size_t i = 0; i < pts.size(); ++i)
      body_ << (i ? " " : "") << num2(pts[i].first) << "," << num2(pts[i].second);
    body_ << "\"/>\n";
  }
  void raw(const std::string& s) { defs_ << s; }

  std::string str() const {
    std::ostringstream os;
    os << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << w_ << "\" height=\"" << h_
       << "\" viewBox=\"0 0 " << w_ << " " << h_ << "\">\n";
    if (!defs_.str().empty()) os << "<defs>\n" << defs_.str() << "</defs>\n";
    os << "<rect x=\"0\" y=\"0\" width=\"" << w_ << "\" height=\"" << h_ << "\" fill=\"#fff\"/>\n";
    os << body_.str() << "</svg>\n";
    return os.str();
  }

 private:
  int w_, h_;
  std::ostringstream defs_, body_;
};

// Fixed palette, one color per variant label.
inline std::string variant_color(const std::string& label) {
  static const std::map<std::string, std::string> c{
      {"bbb", "#4e79a7"}, {"bbs", "#f28e2b"}, {"bsb", "#e15759"}, {"sbb", "#76b7b2"},
      {"bss", "#59a14f"}, {"sbs", "#edc948"}, {"ssb", "#b07aa1"}, {"sss", "#ff9da7"},
      {"bb+1s", "#9c755f"}, {"b+1sb", "#9c755f"}};
  auto it = c.find(label);
  return it == c.end() ? "#bab0ac" : it->second;
}

inline const std::array<std::string, 6>& series_palette() {
  static const std::array<std::string, 6> p{"#4e79a7", "#f28e2b", "#e15759",
                                            "#76b7b2", "#59a14f", "#b07aa1"};
  return p;
}

struct Axis {
  double lo = 0, hi = 1;
  double map(double v, double top, double bottom) const {
    return bottom - (v - lo) / (hi - lo) * (bottom - top);
  }
};

inline Axis nice_axis(double lo, double hi) {
  lo = std::min(lo, 0.0);
  hi = std::max(hi, 0.0);
  if (hi - lo < 1e-12) hi = lo + 1;
  const double step = std::pow(10.0, std::floor(std::log10(hi - lo)));
  return {std::floor(lo / step) * step, std::ceil(hi / step) * step};
}

inline void draw_y_axis(Svg& s, const Axis& a, double left, double right, double top,
                        double bottom, const std::string& label) {
  s.line(left, top, left, bottom);
  for (int i = 0; i <= 4; ++i) {
    const double v = a.lo + (a.hi - a.lo) * i / 4.0;
    const double y = a.map(v, top, bottom);
    s.line(left - 4, y, left, y);
    s.text(left - 6, y + 4, fmt("%.1f", v), "end", 10);
  }
  const double y0 = a.map(0, top, bottom);
  s.line(left, y0, right, y0, "#444");
  s.text(14, (top + bottom) / 2, label, "middle", 11);
}

// Grouped bars: one group per category, one bar per series.
inline std::string grouped_bar_chart(const std::string& title, const std::string& y_label,
                                     const std::vector<std::string>& groups,
                                     const std::vector<std::string>& series,
                                     const std::vector<std::vector<double>>& values,
                                     const std::vector<std::string>& colors) {
  const int W = 720, H = 400;
  const double left = 60, right = W - 20, top = 40, bottom = H - 70;
  Svg s(W, H);
  s.text(W / 2.0, 22, title, "middle", 14);
  double lo = 0, hi = 0;
  for (const auto& g : values)
    for (double v : g)
      if (std::isfinite(v)) {
        lo = std::min(lo, v);
        hi = std::max(hi, v);
      }
  const Axis a = nice_axis(lo, hi);
  draw_y_axis(s, a, left, right, top, bottom, y_label);
  const double gw = groups.empty() ? 0 : (right - left) / static_cast<double>(groups.size());
  const double bw = series.empty() ? 0 : gw * 0.8 / static_cast<double>(series.size());
  const double y0 = a.map(0, top, bottom);
  for (std::size_t g = 0; g < groups.size(); ++g) {
    const double gx = left + gw * static_cast<double>(g) + gw * 0.1;
    for (std::size_t k = 0; k < series.size(); ++k) {
      const double v = values[g][k];
      if (!std::isfinite(v)) continue;
      const double y = a.map(v, top, bottom);
      s.rect(gx + bw * static_cast<double>(k), std::min(y, y0), bw, std::abs(y - y0), colors[k]);
    }
    s.text(left + gw * (static_cast<double>(g) + 0.5), bottom + 16, groups[g]);
  }
  for (std::size_t k = 0; k < series.size(); ++k) {
    const double x = left + 90.0 * static_cast<double>(k);
    s.rect(x, H - 30, 10, 10, colors[k]);
    s.text(x + 14, H - 21, series[k], "start", 10);
  }
  return s.str();
}

// --- threshold sweep ---------------------------------------------------------------

inline std::string render_sweep_chart(const std::vector<SweepRow>& rows,
                                      const std::string& title = "Effect size by threshold") {
  std::vector<std::string> groups, series;
  std::vector<std::vector<double>> vals;
  std::vector<std::string> colors;
  if (!rows.empty()) series = rows.front().effect.labels;
  for (const auto& l : series) colors.push_back(variant_color(l));
  for (const auto& r : rows) {
    groups.push_back("t=" + csv::num(r.t));
    std::vector<double> v;
    for (const auto& l : series) v.push_back(r.effect.delta(l));
    vals.push_back(std::move(v));
  }
  return grouped_bar_chart(title, "dp (pp)", groups, series, vals, colors);
}

inline Rendered render_sweep_table(const std::vector<SweepRow>& rows) {
  Rendered r;
  std::vector<std::string> head{"t", "circuit size"};
  for (auto l : kVariantLabels) head.emplace_back(l);
  head.insert(head.end(), {"Flip Rate", "moved from bbb"});
  r.text = md_row(head) + md_rule(head.size());
  r.csv = csv::row(head);
  for (const auto& s : rows) {
    std::vector<std::string> cells{csv::num(s.t), std::to_string(s.circuit_size)}, cc = cells;
    for (auto l : kVariantLabels) {
      const std::string v = signed_pct(s.effect.delta(l));
      cells.push_back(l == s.effect.target ? "**" + v + "**" : v);
      cc.push_back(csv::num(s.effect.delta(l)));
    }
    cells.push_back(rate_pct(s.effect.flip_rate));
    cells.push_back(rate_pct(s.moved_from_bbb));
    cc.push_back(csv::num(s.effect.flip_rate));
    cc.push_back(csv::num(s.moved_from_bbb));
    r.text += md_row(cells);
    r.csv += csv::row(cc);
  }
  return r;
}

inline nlohmann::ordered_json to_json(const SweepRow& r) {
  nlohmann::ordered_json j;
  j["t"] = r.t;
  j["circuit_size"] = r.circuit_size;
  j["moved_from_bbb"] = r.moved_from_bbb;
  j["effect"] = dgc::to_json(r.effect);
  return j;
}

inline SweepRow sweep_from_json(const nlohmann::ordered_json& j) {
  SweepRow r;
  r.t = j.at("t").get<double>();
  r.circuit_size = j.value("circuit_size", std::size_t{0});
  r.moved_from_bbb = j.value("moved_from_bbb", 0.0);
  r.effect = effect_from_json(j.at("effect"));
  return r;
}

// --- circuit statistics ---------------------------------------------------------------

inline nlohmann::ordered_json to_json(const CircuitStats& s) {
  nlohmann::ordered_json j;
  j["threshold"] = s.threshold;
  j["d_neurons"] = s.d_neurons;
  j["mean_size_percent"] = s.mean_size_percent;
  j["flags"] = s.flags;
  auto rows = nlohmann::ordered_json::array();
  for (const auto& r : s.rows)
    rows.push_back({{"layer", r.layer},
                    {"size", r.size},
                    {"size_percent", r.size_percent},
                    {"overlap_unit_tens", r.overlap_unit_tens},
                    {"overlap_unit_hundreds", r.overlap_unit_hundreds},
                    {"overlap_tens_hundreds", r.overlap_tens_hundreds}});
  j["rows"] = rows;
  return j;
}

inline CircuitStats circuit_stats_from_json(const nlohmann::ordered_json& j) {
  CircuitStats s;
  s.threshold = j.at("threshold").get<double>();
  s.d_neurons = j.at("d_neurons").get<std::uint32_t>();
  s.mean_size_percent = j.value("mean_size_percent", 0.0);
  s.flags = j.value("flags", std::vector<std::string>{});
  for (const auto& r : j.at("rows")) {
    CircuitStatsRow row;
    row.layer = r.at("layer").get<int>();
    row.size = r.at("size").get<std::array<std::size_t, 3>>();
    row.size_percent = r.at("size_percent").get<std::array<double, 3>>();
    row.overlap_unit_tens = r.at("overlap_unit_tens").get<double>();
    row.overlap_unit_hundreds = r.at("overlap_unit_hundreds").get<double>();
    row.overlap_tens_hundreds = r.at("overlap_tens_hundreds").get<double>();
    s.rows.push_back(row);
  }
  return s;
}

// Size and overlap panels over the threshold sweep.
inline Rendered render_overlap(const std::vector<CircuitStats>& per_t) {
  Rendered r;
  r.text = md_row({"t", "layer", "unit", "tens", "hundreds", "unit & tens", "unit & hundreds",
                   "tens & hundreds"}) +
           md_rule(8);
  r.csv = csv::row({"t", "layer", "size_unit", "size_tens", "size_hundreds", "overlap_unit_tens",
                    "overlap_unit_hundreds", "overlap_tens_hundreds", "d_neurons"});
  for (const auto& s : per_t) {
    for (const auto& row : s.rows) {
      r.text += md_row({csv::num(s.threshold), std::to_string(row.layer),
                        std::to_string(row.size[0]), std::to_string(row.size[1]),
                        std::to_string(row.size[2]), fmt("%.1f%%", row.overlap_unit_tens),
                        fmt("%.1f%%", row.overlap_unit_hundreds),
                        fmt("%.1f%%", row.overlap_tens_hundreds)});
      r.csv += csv::row({csv::num(s.threshold), std::to_string(row.layer),
                         std::to_string(row.size[0]), std::to_string(row.size[1]),
                         std::to_string(row.size[2]), csv::num(row.overlap_unit_tens),
                         csv::num(row.overlap_unit_hundreds), csv::num(row.overlap_tens_hundreds),
                         std::to_string(s.d_neurons)});
    }
    r.text += "\nt=" + csv::num(s.threshold) + ": " + s.headline() + "\n\n";
  }
  return r;
}

// Circuit size per layer, one series per threshold.
inline std::string render_size_chart(const std::vector<CircuitStats>& per_t, Position p) {
  std::vector<std::string> groups, series, colors;
  std::vector<std::vector<double>> vals;
  if (!per_t.empty())
    for (const auto& row : per_t.front().rows) groups.push_back("L" + std::to_string(row.layer));
  for (std::size_t k = 0; k < per_t.size(); ++k) {
    series.push_back("t=" + csv::num(per_t[k].threshold));
    colors.push_back(series_palette()[k % series_palette().size()]);
  }
  vals.assign(groups.size(), std::vector<double>(per_t.size(), 0.0));
  for (std::size_t k = 0; k < per_t.size(); ++k)
    for (std::size_t g = 0; g < per_t[k].rows.size() && g < groups.size(); ++g)
      vals[g][k] = static_cast<double>(per_t[k].rows[g].size[static_cast<int>(p)]);
  return grouped_bar_chart(std::string("Circuit size: ") + to_string(p), "neurons", groups, series,
                           vals, colors);
}

// Add/sub top-K overlap per layer.
inline Rendered render_topk_overlap(const std::vector<TopKOverlapRow>& rows, Position p) {
  Rendered r;
  std::vector<int> ks;
  if (!rows.empty())
    for (auto& [k, v] : rows.front().percent) ks.push_back(k);
  std::vector<std::string> head{"layer"};
  for (int k : ks) head.push_back("top " + std::to_string(k));
  r.text = std::string("Add/sub overlap, ") + to_string(p) + "\n\n" + md_row(head) +
           md_rule(head.size());
  std::vector<std::string> chead{"position", "layer"};
  for (int k : ks) chead.push_back("top" + std::to_string(k));
  r.csv = csv::row(chead);
  std::map<int, double> mean;
  for (const auto& row : rows) {
    std::vector<std::string> cells{std::to_string(row.layer)};
    std::vector<std::string> cc{to_string(p), std::to_string(row.layer)};
    for (int k : ks) {
      cells.push_back(fmt("%.1f%%", row.percent.at(k)));
      cc.push_back(csv::num(row.percent.at(k)));
      mean[k] += row.percent.at(k) / static_cast<double>(rows.size());
    }
    r.text += md_row(cells);
    r.csv += csv::row(cc);
  }
  if (!rows.empty()) {
    std::vector<std::string> cells{"mean"};
    for (int k : ks) cells.push_back(fmt("%.1f%%", mean[k]));
    r.text += md_row(cells);
  }
  return r;
}

// --- sufficiency ---------------------------------------------------------------------

inline Rendered render_sufficiency(const std::vector<SufficiencyRow>& rows, Position p) {
  Rendered r;
  r.text = std::string("Sufficiency of digit-position circuit vs. full LDA (") + to_string(p) +
           ")\n\n" + md_row({"layer", "t", "full", "reduced", "features", "classes"}) +
           md_rule(6);
  for (const auto& s : rows)
    r.text += md_row({std::to_string(s.layer), csv::num(s.t), fmt("%.3f", s.acc_full),
                      fmt("%.3f", s.acc_reduced) + (s.empty_circuit ? " (empty, chance)" : ""),
                      std::to_string(s.n_features), std::to_string(s.n_classes)});
  r.csv = sufficiency_csv(rows);
  return r;
}

inline std::string render_sufficiency_chart(const std::vector<SufficiencyRow>& rows, Position p) {
  std::vector<int> layers;
  std::vector<double> ts;
  for (const auto& s : rows) {
    if (std::find(layers.begin(), layers.end(), s.layer) == layers.end()) layers.push_back(s.layer);
    if (std::find(ts.begin(), ts.end(), s.t) == ts.end()) ts.push_back(s.t);
  }
  std::vector<std::string> groups, series{"full"}, colors{"#4e79a7"};
  for (int l : layers) groups.push_back("L" + std::to_string(l));
  for (std::size_t k = 0; k < ts.size(); ++k) {
    series.push_back("t=" + csv::num(ts[k]));
    colors.push_back(series_palette()[(k + 1) % series_palette().size()]);
  }
  std::vector<std::vector<double>> vals(layers.size(), std::vector<double>(series.size(), 0.0));
  for (const auto& s : rows) {
    const auto g = static_cast<std::size_t>(std::find(layers.begin(), layers.end(), s.layer) -
                                            layers.begin());
    const auto k = static_cast<std::size_t>(std::find(ts.begin(), ts.end(), s.t) - ts.begin());
    vals[g][0] = s.acc_full;
    vals[g][k + 1] = s.acc_reduced;
  }
  return grouped_bar_chart(std::string("Sufficiency of digit-position circuit vs. full LDA: ") +
                               to_string(p),
                           "accuracy", groups, series, vals, colors);
}

// --- similarity ------------------------------------------------------------------------

struct SimilarityColumn {
  Position position = Position::unit;
  double t = 0;
  std::vector<SimilarityRow> rows;
};

// Table with one (Sim, Random) column pair per position, rows by layer.
inline Rendered render_similarity(const std::vector<SimilarityColumn>& cols) {
  Rendered r;
  std::vector<std::string> head{"Layer"};
  for (const auto& c : cols) {
    std::string name = to_string(c.position);
    name[0] = static_cast<char>(std::toupper(name[0]));
    head.push_back(name + " (t=" + csv::num(c.t) + ") Sim");
    head.push_back("Random (mean ± sd)");
  }
  r.text = md_row(head) + md_rule(head.size());
  r.csv = csv::row({"layer", "position", "t", "within_mean", "baseline_mean", "baseline_sd",
                    "within_n", "baseline_n"});
  std::vector<int> layers;
  for (const auto& c : cols)
    for (const auto& row : c.rows)
      if (std::find(layers.begin(), layers.end(), row.layer) == layers.end())
        layers.push_back(row.layer);
  std::sort(layers.begin(), layers.end());
  for (int l : layers) {
    std::vector<std::string> cells{std::to_string(l)};
    for (const auto& c : cols) {
      auto it = std::find_if(c.rows.begin(), c.rows.end(),
                             [&](const SimilarityRow& x) { return x.layer == l; });
      if (it == c.rows.end()) {
        cells.insert(cells.end(), {"-", "-"});
        continue;
      }
      const std::string sim = fmt("%.2f", it->within_mean);
      cells.push_back(it->within_mean > it->baseline_mean ? "**" + sim + "**" : sim);
      cells.push_back(fmt("%.2f", it->baseline_mean) + " ± " + fmt("%.2f", it->baseline_sd));
    }
    r.text += md_row(cells);
  }
  for (const auto& c : cols)
    for (const auto& row : c.rows)
      r.csv += csv::row({std::to_string(row.layer), to_string(c.position), csv::num(c.t),
                         csv::num(row.within_mean), csv::num(row.baseline_mean),
                         csv::num(row.baseline_sd), std::to_string(row.within_n),
                         std::to_string(row.baseline_n)});
  return r;
}

// --- heatmaps ------------------------------------------------------------------------

inline std::string lerp_color(double f) {
  // white -> dark blue
  f = std::clamp(f, 0.0, 1.0);
  const int r = static_cast<int>(std::lround(247 + (8 - 247) * f));
  const int g = static_cast<int>(std::lround(251 + (48 - 251) * f));
  const int b = static_cast<int>(std::lround(255 + (107 - 255) * f));
  char buf[8];
  std::snprintf(buf, sizeof buf, "#%02x%02x%02x", r, g, b);
  return buf;
}

inline std::string render_heatmap(const Heatmap& h) {
  const int cell = 32, left = 50, top = 50;
  const int W = left + cell * h.size + 90, H = top + cell * h.size + 40;
  Svg s(W, H);
  s.raw(
      "<pattern id=\"absent\" patternUnits=\"userSpaceOnUse\" width=\"6\" height=\"6\">"
      "<path d=\"M0,6 L6,0\" stroke=\"#999\" stroke-width=\"1\"/></pattern>\n");
  s.text(W / 2.0, 20,
         "Neuron N_" + std::to_string(h.layer) + "," + std::to_string(h.neuron) + " (" +
             to_string(h.position) + ", F=" + fmt("%.3f", h.fisher) + ")",
         "middle", 13);
  double lo = std::numeric_limits<double>::infinity(), hi = -lo;
  for (int a = h.first_digit; a <= h.last_digit(); ++a)
    for (int b = h.first_digit; b <= h.last_digit(); ++b)
      if (auto m = h.mean(a, b)) {
        lo = std::min(lo, *m);
        hi = std::max(hi, *m);
      }
  for (int a = h.first_digit; a <= h.last_digit(); ++a) {
    const double y = top + cell * (a - h.first_digit);
    s.text(left - 8, y + cell / 2.0 + 4, std::to_string(a), "end", 11);
    for (int b = h.first_digit; b <= h.last_digit(); ++b) {
      const double x = left + cell * (b - h.first_digit);
      const auto m = h.mean(a, b);
      if (!m) {
        s.rect(x, y, cell, cell, "url(#absent)", " stroke=\"#ddd\"");
        continue;
      }
      const double f = hi > lo ? (*m - lo) / (hi - lo) : 0.5;
      s.rect(x, y, cell, cell, lerp_color(f), " stroke=\"#fff\"");
    }
  }
  for (int b = h.first_digit; b <= h.last_digit(); ++b)
    s.text(left + cell * (b - h.first_digit) + cell / 2.0, top - 6, std::to_string(b), "middle", 11);
  s.text(left + cell * h.size / 2.0, H - 12, "opB digit (columns), opA digit (rows)", "middle", 11);
  if (std::isfinite(lo)) {
    const double lx = left + cell * h.size + 20;
    s.rect(lx, top, 14, 14, lerp_color(1));
    s.text(lx + 18, top + 11, fmt("%.3g", hi), "start", 10);
    s.rect(lx, top + 20, 14, 14, lerp_color(0.5 * (hi > lo)));
    s.rect(lx, top + 40, 14, 14, lerp_color(0));
    s.text(lx + 18, top + 51, fmt("%.3g", lo), "start", 10);
  }
  return s.str();
}

// --- injection profile -------------------------------------------------------------

inline Rendered render_injection(const InjectionProfile& p) {
  Rendered r;
  r.text = p.caption() + "\n\n" + md_row({"layer", "site", "p(bbb)", "p(sss)", "dp(sss) pp"}) +
           md_rule(5);
  for (const auto& row : p.rows)
    r.text += md_row({std::to_string(row.layer), to_string(row.site), fmt("%.4f", row.p_bbb),
                      fmt("%.4f", row.p_sss), signed_pct(100.0 * (row.p_sss - p.baseline_sss))});
  r.text += "\nbaseline p(bbb)=" + fmt("%.4f", p.baseline_bbb) +
            " p(sss)=" + fmt("%.4f", p.baseline_sss) + ", epsilon=" + csv::num(p.epsilon) + " pp\n";
  r.csv = injection_csv(p);
  return r;
}

inline std::string render_injection_chart(const InjectionProfile& p) {
  const int W = 720, H = 380;
  const double left = 60, right = W - 140, top = 40, bottom = H - 50;
  Svg s(W, H);
  s.text(W / 2.0, 22, p.caption(), "middle", 13);
  const Axis a{0, 1};
  draw_y_axis(s, a, left, right, top, bottom, "p");
  int L = 0;
  for (const auto& r : p.rows) L = std::max(L, r.layer + 1);
  auto xat = [&](int l) { return L <= 1 ? left : left + (right - left) * l / double(L - 1); };
  for (int l = 0; l < L; ++l) s.text(xat(l), bottom + 16, std::to_string(l), "middle", 10);
  std::vector<Site> sites;
  for (const auto& r : p.rows)
    if (std::find(sites.begin(), sites.end(), r.site) == sites.end()) sites.push_back(r.site);
  int k = 0;
  for (Site site : sites) {
    for (int which = 0; which < 2; ++which) {
      std::vector<std::pair<double, double>> pts;
      for (const auto& r : p.rows)
        if (r.site == site)
          pts.emplace_back(xat(r.layer), a.map(which ? r.p_sss : r.p_bbb, top, bottom));
      const auto& color = series_palette()[k % series_palette().size()];
      s.polyline(pts, color);
      s.rect(right + 12, top + 16.0 * k, 10, 10, color);
      s.text(right + 26, top + 16.0 * k + 9,
             std::string(to_string(site)) + (which ? " p(sss)" : " p(bbb)"), "start", 10);
      ++k;
    }
  }
  return s.str();
}

inline nlohmann::ordered_json to_json(const InjectionProfile& p) {
  nlohmann::ordered_json j;
  j["dataset"] = p.dataset;
  j["epsilon"] = p.epsilon;
  j["baseline_bbb"] = p.baseline_bbb;
  j["baseline_sss"] = p.baseline_sss;
  j["injection_layer"] = p.injection_layer ? nlohmann::ordered_json(*p.injection_layer)
                                           : nlohmann::ordered_json("none");
  j["caption"] = p.caption();
  auto rows = nlohmann::ordered_json::array();
  for (const auto& r : p.rows)
    rows.push_back({{"layer", r.layer}, {"site", to_string(r.site)}, {"p_bbb", r.p_bbb},
                    {"p_sss", r.p_sss}});
  j["rows"] = rows;
  return j;
}

inline InjectionProfile injection_from_json(const nlohmann::ordered_json& j) {
  InjectionProfile p;
  p.dataset = j.value("dataset", std::string());
  p.epsilon = j.at("epsilon").get<double>();
  p.baseline_bbb = j.at("baseline_bbb").get<double>();
  p.baseline_sss = j.at("baseline_sss").get<double>();
  if (j.at("injection_layer").is_number()) p.injection_layer = j["injection_layer"].get<int>();
  for (const auto& r : j.at("rows"))
    p.rows.push_back({r.at("layer").get<int>(), parse_site(r.at("site").get<std::string>()),
                      r.at("p_bbb").get<double>(), r.at("p_sss").get<double>()});
  return p;
}

}  // namespace dgc::report
