#include <gtest/gtest.h>

#include "dgc/report.hpp"

using namespace dgc;
using namespace dgc::report;

namespace {

EffectRow fixture_row() {
  EffectRow e;
  e.model_id = "Llama 3 8B";
  e.op = "add";
  e.position = "unit";
  e.target = "bbs";
  e.t = 0.6;
  e.n = 100;
  e.flip_rate = 0.51;
  for (auto l : kVariantLabels) e.labels.emplace_back(l);
  e.mean_delta_pp = {-78.89, 30.93, 0.87, 0.87, 10.59, 2.57, 0.49, 2.76};
  return e;
}

}  // namespace

TEST(Report, EffectTableFixtureRow) {
  const auto r = render_effect_table({fixture_row()});
  EXPECT_EQ(r.text,
            "| m | o | d | t* | bbb | bbs | bsb | sbb | bss | sbs | ssb | sss |\n"
            "|---|---|---|---|---|---|---|---|---|---|---|---|\n"
            "| Llama 3 8B | + | unit | 0.6 | -78.89% | **+30.93%** | +0.87% | +0.87% | +10.59% | "
            "+2.57% | +0.49% | +2.76% |\n");
  const auto back = effect_rows_from_csv(csv::parse(r.csv));
  ASSERT_EQ(back.size(), 1u);
  EXPECT_EQ(back[0].mean_delta_pp, fixture_row().mean_delta_pp);
  EXPECT_EQ(back[0].target, "bbs");
  EXPECT_EQ(back[0].op, "add");
}

TEST(Report, MissingVariantColumnIsAnError) {
  auto e = fixture_row();
  e.labels.pop_back();
  e.mean_delta_pp.pop_back();
  EXPECT_THROW(render_effect_table({e}), ReportError);
}

TEST(Report, FlipRates) {
  EXPECT_EQ(rate_pct(0.51), "51%");
  EXPECT_EQ(rate_pct(0.685), "68.5%");
  EXPECT_EQ(rate_pct(0.0), "0%");
  EXPECT_EQ(rate_pct(1.0), "100%");
  auto e = fixture_row();
  e.op = "sub";
  e.flip_rate = 0.685;
  const auto r = render_flip_table({fixture_row(), e});
  EXPECT_NE(r.text.find("| Llama 3 8B | + | unit | 0.6 | 51% |"), std::string::npos);
  EXPECT_NE(r.text.find("| Llama 3 8B | - | unit | 0.6 | 68.5% |"), std::string::npos);
}

TEST(Report, AggregateFlipRate) {
  InterventionOutcome a, b;
  for (auto* o : {&a, &b}) {
    o->variants.labels = {"bbb", "bbs"};
    o->variants.tokens = {1, 2};
    o->before = {0.6, 0.1};
    o->after = {0.2, 0.5};
    o->delta_pp = {-40, 40};
  }
  a.flip = true;
  const auto r = aggregate_outcomes({a, b}, "bbs");
  EXPECT_EQ(rate_pct(r.flip_rate), "50%");
  EXPECT_DOUBLE_EQ(r.delta("bbs"), 40.0);
}

TEST(Report, SignedPercent) {
  EXPECT_EQ(signed_pct(0.0), "+0.00%");
  EXPECT_EQ(signed_pct(-0.004), "-0.00%");
  EXPECT_EQ(signed_pct(12.345), "+12.35%");
}

TEST(Report, SweepTableMarksTarget) {
  SweepRow s;
  s.t = 0.5;
  s.circuit_size = 42;
  s.effect = fixture_row();
  s.moved_from_bbb = 0.25;
  const auto r = render_sweep_table({s});
  EXPECT_NE(r.text.find("| 0.5 | 42 | -78.89% | **+30.93%** |"), std::string::npos);
  EXPECT_NE(r.text.find("| 51% | 25% |"), std::string::npos);
  const auto j = sweep_from_json(to_json(s));
  EXPECT_EQ(j.circuit_size, 42u);
  EXPECT_EQ(j.effect.mean_delta_pp, s.effect.mean_delta_pp);
}

TEST(Report, CarryTableHasNinthVariant) {
  auto e = fixture_row();
  e.op = "unit_to_tens";
  e.labels.emplace_back("bb+1s");
  e.mean_delta_pp.push_back(7.5);
  const auto r = render_carry_table({e});
  EXPECT_NE(r.text.find("| bb+1s | Flip Rate |"), std::string::npos);
  EXPECT_NE(r.text.find("| +7.50% | 51% |"), std::string::npos);
}

TEST(Report, SimilarityMarksAboveBaseline) {
  SimilarityColumn c;
  c.position = Position::tens;
  c.t = 0.3;
  SimilarityRow hi, lo;
  hi.layer = 3, hi.within_mean = 0.8, hi.baseline_mean = 0.2, hi.baseline_sd = 0.1;
  lo.layer = 4, lo.within_mean = 0.1, lo.baseline_mean = 0.2, lo.baseline_sd = 0.05;
  c.rows = {lo, hi};
  const auto r = render_similarity({c});
  EXPECT_NE(r.text.find("| Layer | Tens (t=0.3) Sim | Random (mean ± sd) |"), std::string::npos);
  EXPECT_NE(r.text.find("| 3 | **0.80** | 0.20 ± 0.10 |"), std::string::npos);
  EXPECT_NE(r.text.find("| 4 | 0.10 | 0.20 ± 0.05 |"), std::string::npos);
  EXPECT_LT(r.text.find("| 3 |"), r.text.find("| 4 |"));
}

TEST(Report, SufficiencyEmptyCircuitLabelled) {
  std::vector<SufficiencyRow> rows(1);
  rows[0] = {2, 0.9, 0.8, 0.01, 100, 0, true};
  const auto r = render_sufficiency(rows, Position::unit);
  EXPECT_NE(r.text.find("| 2 | 0.9 | 0.800 | 0.010 (empty, chance) | 0 | 100 |"), std::string::npos);
  const auto svg = render_sufficiency_chart(rows, Position::unit);
  EXPECT_EQ(svg.rfind("<svg", 0), 0u);
  EXPECT_NE(svg.find("</svg>"), std::string::npos);
}

TEST(Report, InjectionRoundTrip) {
  InjectionProfile p;
  p.dataset = "add_op2";
  p.baseline_bbb = 0.7;
  p.baseline_sss = 0.01;
  p.rows = {{0, Site::attn_out, 0.6, 0.02}, {1, Site::attn_out, 0.3, 0.4}};
  p.injection_layer = 1;
  const auto back = injection_from_json(to_json(p));
  EXPECT_EQ(back.injection_layer, 1);
  ASSERT_EQ(back.rows.size(), 2u);
  EXPECT_EQ(back.rows[1].p_sss, 0.4);
  EXPECT_EQ(back.caption(), "Operand Injection into the residual stream in Layer 1");
  EXPECT_NE(render_injection(p).text.find("Layer 1"), std::string::npos);
  EXPECT_NE(render_injection_chart(p).find("</svg>"), std::string::npos);
}

TEST(Report, XmlEscape) {
  EXPECT_EQ(xml_escape("a<b & \"c\">"), "a&lt;b &amp; &quot;c&quot;&gt;");
}
