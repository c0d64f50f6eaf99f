#pragma once

// Three-digit addition / subtraction prompts, base/source pairs and carry
// pairs, with constraint validation and JSON-lines serialization.

#include <algorithm>
#include <array>
#include <cstdint>
#include <fstream>
#include <map>
#include <optional>
#include <random>
#include <set>
#include <stdexcept>
#include <string>
#include <string_view>
#include <tuple>
#include <vector>

#include "json.hpp"

namespace dgc {

using ojson = nlohmann::ordered_json;

enum class Operator { add, sub };
enum class Position { unit = 0, tens = 1, hundreds = 2 };
enum class PairKind { op1, op2 };
enum class CarryScenario { unit_to_tens, tens_to_hundreds };

inline constexpr std::array<Position, 3> kPositions{Position::unit, Position::tens,
                                                    Position::hundreds};

inline constexpr int kRetryBudget = 10000;

struct DataError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

inline const char* to_string(Operator op) { return op == Operator::add ? "add" : "sub"; }
inline char symbol(Operator op) { return op == Operator::add ? '+' : '-'; }
inline const char* to_string(Position p) {
  switch (p) {
    case Position::unit: return "unit";
    case Position::tens: return "tens";
    case Position::hundreds: return "hundreds";
  }
  return "?";
}
inline const char* to_string(PairKind k) { return k == PairKind::op1 ? "op1" : "op2"; }
inline const char* to_string(CarryScenario s) {
  return s == CarryScenario::unit_to_tens ? "unit_to_tens" : "tens_to_hundreds";
}

inline Operator parse_operator(std::string_view s) {
  if (s == "add" || s == "+") return Operator::add;
  if (s == "sub" || s == "-") return Operator::sub;
  throw DataError("invalid operator: " + std::string(s));
}
inline Position parse_position(std::string_view s) {
  if (s == "unit" || s == "units") return Position::unit;
  if (s == "tens") return Position::tens;
  if (s == "hundreds") return Position::hundreds;
  throw DataError("invalid digit position: " + std::string(s));
}
inline PairKind parse_pair_kind(std::string_view s) {
  if (s == "op1") return PairKind::op1;
  if (s == "op2") return PairKind::op2;
  throw DataError("invalid pair kind: " + std::string(s));
}
inline CarryScenario parse_carry_scenario(std::string_view s) {
  if (s == "unit_to_tens" || s == "1" || s == "carry1") return CarryScenario::unit_to_tens;
  if (s == "tens_to_hundreds" || s == "2" || s == "carry2") return CarryScenario::tens_to_hundreds;
  throw DataError("invalid carry scenario: " + std::string(s));
}

inline int digit_at(int n, Position p) {
  switch (p) {
    case Position::unit: return n % 10;
    case Position::tens: return (n / 10) % 10;
    case Position::hundreds: return (n / 100) % 10;
  }
  return 0;
}

inline int compose_digits(int hundreds, int tens, int unit) {
  return 100 * hundreds + 10 * tens + unit;
}

inline int apply(Operator op, int a, int b) { return op == Operator::add ? a + b : a - b; }

struct Exemplar {
  int a = 0;
  int b = 0;
  int result = 0;
  friend bool operator==(const Exemplar&, const Exemplar&) = default;
};

inline Exemplar default_exemplar(Operator op) {
  return op == Operator::add ? Exemplar{157, 431, 588} : Exemplar{588, 431, 157};
}

struct ArithmeticPrompt {
  Operator op = Operator::add;
  Exemplar exemplar = default_exemplar(Operator::add);
  int a = 0;
  int b = 0;
  int expected_result = 0;
  // Set only for carry sources: the single position whose digit operation
  // overflows (carry for add, borrow for sub).
  std::optional<Position> carry_at;

  // Two-character label: opA digit followed by opB digit at `p`.
  std::string digit_class(Position p) const {
    return std::string{static_cast<char>('0' + digit_at(a, p)),
                       static_cast<char>('0' + digit_at(b, p))};
  }

  std::string render() const {
    const char s = symbol(op);
    std::string out;
    out += std::to_string(exemplar.a) + ' ' + s + ' ' + std::to_string(exemplar.b) + " = " +
           std::to_string(exemplar.result) + "; ";
    out += std::to_string(a) + ' ' + s + ' ' + std::to_string(b) + " = ";
    return out;
  }

  friend bool operator==(const ArithmeticPrompt&, const ArithmeticPrompt&) = default;
};

inline ArithmeticPrompt make_prompt(Operator op, int a, int b,
                                    std::optional<Position> carry_at = std::nullopt) {
  ArithmeticPrompt p;
  p.op = op;
  p.exemplar = default_exemplar(op);
  p.a = a;
  p.b = b;
  p.expected_result = apply(op, a, b);
  p.carry_at = carry_at;
  return p;
}

struct Violation {
  std::string invariant;
  std::optional<Position> position;
  std::string detail;

  std::string describe() const {
    std::string s = invariant + " violated";
    if (position) s += std::string(" at ") + to_string(*position);
    if (!detail.empty()) s += ": " + detail;
    return s;
  }
};

// Positions where column arithmetic overflows (carry out for add, borrow in
// for sub), with propagation of the incoming carry/borrow.
inline std::vector<Position> overflow_positions(Operator op, int a, int b) {
  std::vector<Position> out;
  int carry = 0;
  for (Position p : kPositions) {
    const int da = digit_at(a, p);
    const int db = digit_at(b, p);
    if (op == Operator::add) {
      const int s = da + db + carry;
      carry = s >= 10 ? 1 : 0;
    } else {
      const int s = da - db - carry;
      carry = s < 0 ? 1 : 0;
    }
    if (carry) out.push_back(p);
  }
  return out;
}

inline std::vector<Violation> validate_prompt(const ArithmeticPrompt& p) {
  std::vector<Violation> v;
  auto in3 = [](int x) { return x >= 100 && x <= 999; };
  if (!in3(p.a)) v.push_back({"operand_range", std::nullopt, "opA=" + std::to_string(p.a)});
  if (!in3(p.b)) v.push_back({"operand_range", std::nullopt, "opB=" + std::to_string(p.b)});
  const int exact = apply(p.op, p.a, p.b);
  if (p.expected_result != exact)
    v.push_back({"expected_result", std::nullopt,
                 std::to_string(p.expected_result) + " != " + std::to_string(exact)});
  if (!in3(exact)) v.push_back({"result_range", std::nullopt, std::to_string(exact)});

  const auto over = overflow_positions(p.op, p.a, p.b);
  if (p.carry_at) {
    if (*p.carry_at == Position::hundreds)
      v.push_back({"carry_flag", Position::hundreds, "carry cannot originate at hundreds"});
    for (Position q : over)
      if (q != *p.carry_at) v.push_back({"no_carry", q, "unflagged carry"});
    if (std::find(over.begin(), over.end(), *p.carry_at) == over.end())
      v.push_back({"carry_flag", *p.carry_at, "flagged position does not carry"});
  } else {
    for (Position q : over) v.push_back({"no_carry", q, ""});
  }

  const Exemplar& e = p.exemplar;
  if (!in3(e.a) || !in3(e.b) || e.result != apply(p.op, e.a, e.b) || !in3(e.result) ||
      !overflow_positions(p.op, e.a, e.b).empty())
    v.push_back({"exemplar", std::nullopt, "exemplar is not a valid no-carry problem"});
  return v;
}

inline bool is_valid(const ArithmeticPrompt& p) { return validate_prompt(p).empty(); }

// Fast check used by the samplers: query operands in range, result in
// range, and no carry/borrow at any position.
inline bool no_carry_problem(Operator op, int a, int b) {
  if (a < 100 || a > 999 || b < 100 || b > 999) return false;
  const int r = apply(op, a, b);
  if (r < 100 || r > 999) return false;
  for (Position p : kPositions) {
    const int da = digit_at(a, p), db = digit_at(b, p);
    if (op == Operator::add ? da + db > 9 : da < db) return false;
  }
  return true;
}

inline std::size_t count_no_carry_problems(Operator op) {
  std::size_t n = 0;
  for (int a = 100; a <= 999; ++a)
    for (int b = 100; b <= 999; ++b) n += no_carry_problem(op, a, b);
  return n;
}

// --- result variants -------------------------------------------------------

inline constexpr std::array<std::string_view, 8> kVariantLabels{"bbb", "bbs", "bsb", "sbb",
                                                                "bss", "sbs", "ssb", "sss"};
inline constexpr std::string_view kCarryUnitLabel = "bb+1s";
inline constexpr std::string_view kCarryTensLabel = "b+1sb";

// Label characters are ordered hundreds, tens, unit.
inline int compose_variant(std::string_view label, int base, int source) {
  if (label.size() != 3) throw DataError("bad variant label: " + std::string(label));
  auto pick = [&](char c, Position p) {
    if (c == 'b') return digit_at(base, p);
    if (c == 's') return digit_at(source, p);
    throw DataError("bad variant label: " + std::string(label));
  };
  return compose_digits(pick(label[0], Position::hundreds), pick(label[1], Position::tens),
                        pick(label[2], Position::unit));
}

inline std::string_view target_variant(Position p) {
  switch (p) {
    case Position::unit: return "bbs";
    case Position::tens: return "bsb";
    case Position::hundreds: return "sbb";
  }
  return "bbb";
}

using VariantTable = std::map<std::string, int, std::less<>>;

inline int variant_value(const VariantTable& t, std::string_view label) {
  auto it = t.find(label);
  if (it == t.end()) throw DataError("missing variant " + std::string(label));
  return it->second;
}

inline VariantTable make_variants(int base, int source) {
  VariantTable t;
  for (auto l : kVariantLabels) t.emplace(std::string(l), compose_variant(l, base, source));
  return t;
}

inline bool differs_everywhere(int x, int y) {
  for (Position p : kPositions)
    if (digit_at(x, p) == digit_at(y, p)) return false;
  return true;
}

struct PromptPair {
  ArithmeticPrompt base;
  ArithmeticPrompt source;
  PairKind kind = PairKind::op2;
  VariantTable variants;
};

struct CarryPair {
  ArithmeticPrompt base;
  ArithmeticPrompt source;
  CarryScenario scenario = CarryScenario::unit_to_tens;
  VariantTable variants;  // the 8 standard labels plus the +1 label

  std::string_view plus_one_label() const {
    return scenario == CarryScenario::unit_to_tens ? kCarryUnitLabel : kCarryTensLabel;
  }
};

inline int carry_plus_one_variant(CarryScenario s, int base, int source) {
  using P = Position;
  if (s == CarryScenario::unit_to_tens)
    return compose_digits(digit_at(base, P::hundreds), digit_at(base, P::tens) + 1,
                          digit_at(source, P::unit));
  return compose_digits(digit_at(base, P::hundreds) + 1, digit_at(source, P::tens),
                        digit_at(base, P::unit));
}

inline std::vector<Violation> validate_pair(const PromptPair& pr) {
  std::vector<Violation> v = validate_prompt(pr.base);
  for (auto& x : validate_prompt(pr.source)) v.push_back(x);
  if (pr.base.op != pr.source.op) v.push_back({"operator_match", std::nullopt, ""});
  if (pr.kind == PairKind::op1) {
    if (pr.base.b != pr.source.b) v.push_back({"shared_operand", std::nullopt, "opB differs"});
    for (Position p : kPositions)
      if (digit_at(pr.base.a, p) == digit_at(pr.source.a, p))
        v.push_back({"operand_differs", p, "opA digit shared"});
  } else {
    if (pr.base.a != pr.source.a) v.push_back({"shared_operand", std::nullopt, "opA differs"});
    for (Position p : kPositions)
      if (digit_at(pr.base.b, p) == digit_at(pr.source.b, p))
        v.push_back({"operand_differs", p, "opB digit shared"});
  }
  for (Position p : kPositions)
    if (digit_at(pr.base.expected_result, p) == digit_at(pr.source.expected_result, p))
      v.push_back({"result_differs", p, ""});
  const VariantTable expect = make_variants(pr.base.expected_result, pr.source.expected_result);
  if (pr.variants != expect) v.push_back({"variants", std::nullopt, "composition mismatch"});
  std::set<int> distinct;
  for (auto& [k, x] : pr.variants) {
    distinct.insert(x);
    if (x < 100 || x > 999) v.push_back({"variant_range", std::nullopt, k});
  }
  if (distinct.size() != pr.variants.size())
    v.push_back({"variants_distinct", std::nullopt, ""});
  return v;
}

inline std::vector<Violation> validate_carry_pair(const CarryPair& cp) {
  std::vector<Violation> v = validate_prompt(cp.base);
  for (auto& x : validate_prompt(cp.source)) v.push_back(x);
  if (cp.base.carry_at) v.push_back({"base_no_carry", std::nullopt, "base is flagged"});
  const Position want =
      cp.scenario == CarryScenario::unit_to_tens ? Position::unit : Position::tens;
  if (cp.source.carry_at != want)
    v.push_back({"carry_flag", want, "source must carry exactly here"});
  const Position bumped =
      cp.scenario == CarryScenario::unit_to_tens ? Position::tens : Position::hundreds;
  if (digit_at(cp.base.expected_result, bumped) > 8)
    v.push_back({"plus_one_range", bumped, "base digit must be <= 8"});
  for (Position p : kPositions)
    if (digit_at(cp.base.expected_result, p) == digit_at(cp.source.expected_result, p))
      v.push_back({"result_differs", p, ""});
  VariantTable expect = make_variants(cp.base.expected_result, cp.source.expected_result);
  expect.emplace(std::string(cp.plus_one_label()),
                 carry_plus_one_variant(cp.scenario, cp.base.expected_result,
                                        cp.source.expected_result));
  if (cp.variants != expect) v.push_back({"variants", std::nullopt, "composition mismatch"});
  std::set<int> distinct;
  for (auto& [k, x] : cp.variants) distinct.insert(x);
  if (distinct.size() != 9) v.push_back({"variants_distinct", std::nullopt, ""});
  return v;
}

// --- generators ----------------------------------------------------------

struct GenOptions {
  bool dedup = false;
  int retry_budget = kRetryBudget;
};

namespace detail {

inline int uniform_operand(std::mt19937_64& rng) {
  return std::uniform_int_distribution<int>(100, 999)(rng);
}

// Rejection sampler; each call spends at most `budget` draws.
template <class Accept>
std::pair<int, int> sample_operands(std::mt19937_64& rng, int budget, Accept&& accept,
                                    const char* what) {
  for (int i = 0; i < budget; ++i) {
    const int a = uniform_operand(rng), b = uniform_operand(rng);
    if (accept(a, b)) return {a, b};
  }
  throw DataError(std::string("sampler exhausted while drawing ") + what);
}

}  // namespace detail

inline std::vector<ArithmeticPrompt> generate_simple_dataset(Operator op, std::size_t n,
                                                             std::uint64_t seed,
                                                             GenOptions opt = {}) {
  if (n < 1) throw DataError("n must be >= 1");
  if (opt.dedup && n > count_no_carry_problems(op))
    throw DataError("n exceeds the number of distinct valid problems");
  std::mt19937_64 rng(seed);
  std::vector<ArithmeticPrompt> out;
  out.reserve(n);
  std::set<std::pair<int, int>> seen;
  while (out.size() < n) {
    auto [a, b] = detail::sample_operands(
        rng, opt.retry_budget,
        [&](int x, int y) {
          return no_carry_problem(op, x, y) && (!opt.dedup || !seen.count({x, y}));
        },
        "simple prompt");
    if (opt.dedup) seen.insert({a, b});
    out.push_back(make_prompt(op, a, b));
  }
  return out;
}

// Every valid no-carry problem for `op`, shuffled under `seed`, truncated to
// n (0 = all). Draws without replacement.
inline std::vector<ArithmeticPrompt> sample_no_carry_problems(Operator op, std::size_t n,
                                                              std::uint64_t seed) {
  std::vector<ArithmeticPrompt> all;
  for (int a = 100; a <= 999; ++a)
    for (int b = 100; b <= 999; ++b)
      if (no_carry_problem(op, a, b)) all.push_back(make_prompt(op, a, b));
  if (n > all.size()) throw DataError("n exceeds the number of distinct valid problems");
  std::mt19937_64 rng(seed);
  std::shuffle(all.begin(), all.end(), rng);
  if (n) all.resize(n);
  return all;
}

inline std::vector<PromptPair> generate_pair_dataset(Operator op, PairKind kind, std::size_t n,
                                                     std::uint64_t seed, GenOptions opt = {}) {
  if (n < 1) throw DataError("n must be >= 1");
  std::mt19937_64 rng(seed);
  std::vector<PromptPair> out;
  out.reserve(n);
  std::set<std::tuple<int, int, int, int>> seen;
  while (out.size() < n) {
    bool ok = false;
    for (int attempt = 0; attempt < opt.retry_budget && !ok; ++attempt) {
      auto [a, b] = detail::sample_operands(
          rng, opt.retry_budget, [&](int x, int y) { return no_carry_problem(op, x, y); },
          "base prompt");
      const int other = detail::uniform_operand(rng);
      const int sa = kind == PairKind::op1 ? other : a;
      const int sb = kind == PairKind::op1 ? b : other;
      if (!no_carry_problem(op, sa, sb)) continue;
      if (!differs_everywhere(kind == PairKind::op1 ? a : b, other)) continue;
      const int br = apply(op, a, b), sr = apply(op, sa, sb);
      if (!differs_everywhere(br, sr)) continue;
      if (!seen.insert({a, b, sa, sb}).second) continue;
      PromptPair p;
      p.base = make_prompt(op, a, b);
      p.source = make_prompt(op, sa, sb);
      p.kind = kind;
      p.variants = make_variants(br, sr);
      out.push_back(std::move(p));
      ok = true;
    }
    if (!ok) throw DataError("sampler exhausted while drawing a prompt pair");
  }
  return out;
}

inline std::vector<CarryPair> generate_carry_dataset(CarryScenario scenario, std::size_t n,
                                                     std::uint64_t seed, GenOptions opt = {}) {
  if (n < 1) throw DataError("n must be >= 1");
  constexpr Operator op = Operator::add;
  const Position carry_pos =
      scenario == CarryScenario::unit_to_tens ? Position::unit : Position::tens;
  const Position bumped =
      scenario == CarryScenario::unit_to_tens ? Position::tens : Position::hundreds;
  std::mt19937_64 rng(seed);
  std::vector<CarryPair> out;
  out.reserve(n);
  std::set<std::tuple<int, int, int>> seen;
  while (out.size() < n) {
    bool ok = false;
    for (int attempt = 0; attempt < opt.retry_budget && !ok; ++attempt) {
      auto [a, b] = detail::sample_operands(
          rng, opt.retry_budget, [&](int x, int y) { return no_carry_problem(op, x, y); },
          "carry base prompt");
      const int br = a + b;
      if (digit_at(br, bumped) > 8) continue;
      const int d = detail::uniform_operand(rng);
      const auto over = overflow_positions(op, a, d);
      if (over.size() != 1 || over.front() != carry_pos) continue;
      const int sr = a + d;
      if (sr > 999 || !differs_everywhere(br, sr)) continue;
      VariantTable vars = make_variants(br, sr);
      const int plus = carry_plus_one_variant(scenario, br, sr);
      bool collides = false;
      for (auto& [k, x] : vars) collides |= (x == plus);
      if (collides) continue;
      if (!seen.insert({a, b, d}).second) continue;
      CarryPair cp;
      cp.base = make_prompt(op, a, b);
      cp.source = make_prompt(op, a, d, carry_pos);
      cp.scenario = scenario;
      vars.emplace(std::string(cp.plus_one_label()), plus);
      cp.variants = std::move(vars);
      out.push_back(std::move(cp));
      ok = true;
    }
    if (!ok) throw DataError("sampler exhausted while drawing a carry pair");
  }
  return out;
}

// --- serialization -------------------------------------------------------

inline ojson to_json(const ArithmeticPrompt& p) {
  ojson j;
  j["operator"] = to_string(p.op);
  j["exemplar"] = {{"a", p.exemplar.a}, {"b", p.exemplar.b}, {"result", p.exemplar.result}};
  j["query"] = {{"a", p.a}, {"b", p.b}};
  j["expected_result"] = p.expected_result;
  ojson dc;
  for (Position q : kPositions) dc[to_string(q)] = p.digit_class(q);
  j["digit_class"] = dc;
  j["carry_at"] = p.carry_at ? ojson(to_string(*p.carry_at)) : ojson(nullptr);
  return j;
}

inline ArithmeticPrompt prompt_from_json(const ojson& j) {
  ArithmeticPrompt p;
  p.op = parse_operator(j.at("operator").get<std::string>());
  const auto& e = j.at("exemplar");
  p.exemplar = {e.at("a").get<int>(), e.at("b").get<int>(), e.at("result").get<int>()};
  p.a = j.at("query").at("a").get<int>();
  p.b = j.at("query").at("b").get<int>();
  p.expected_result = j.at("expected_result").get<int>();
  if (j.contains("carry_at") && !j.at("carry_at").is_null())
    p.carry_at = parse_position(j.at("carry_at").get<std::string>());
  return p;
}

inline ojson variants_json(const VariantTable& t, bool with_plus_one = false,
                           std::string_view plus_label = {}) {
  ojson v;
  for (auto l : kVariantLabels) v[std::string(l)] = variant_value(t, l);
  if (with_plus_one) v[std::string(plus_label)] = variant_value(t, plus_label);
  return v;
}

inline ojson to_json(const PromptPair& p) {
  ojson j;
  j["pair_kind"] = to_string(p.kind);
  j["base"] = to_json(p.base);
  j["source"] = to_json(p.source);
  j["variants"] = variants_json(p.variants);
  return j;
}

inline ojson to_json(const CarryPair& p) {
  ojson j;
  j["scenario"] = to_string(p.scenario);
  j["base"] = to_json(p.base);
  j["source"] = to_json(p.source);
  j["variants"] = variants_json(p.variants, true, p.plus_one_label());
  return j;
}

inline VariantTable variants_from_json(const ojson& j) {
  VariantTable t;
  for (auto it = j.begin(); it != j.end(); ++it) t.emplace(it.key(), it.value().get<int>());
  return t;
}

inline PromptPair pair_from_json(const ojson& j) {
  PromptPair p;
  p.kind = parse_pair_kind(j.at("pair_kind").get<std::string>());
  p.base = prompt_from_json(j.at("base"));
  p.source = prompt_from_json(j.at("source"));
  p.variants = variants_from_json(j.at("variants"));
  return p;
}

inline CarryPair carry_pair_from_json(const ojson& j) {
  CarryPair p;
  p.scenario = parse_carry_scenario(j.at("scenario").get<std::string>());
  p.base = prompt_from_json(j.at("base"));
  p.source = prompt_from_json(j.at("source"));
  p.variants = variants_from_json(j.at("variants"));
  return p;
}

template <class T>
void write_jsonl(const std::string& path, const std::vector<T>& items) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw DataError("cannot open for writing: " + path);
  for (const auto& it : items) os << to_json(it).dump() << '\n';
  if (!os) throw DataError("write failed: " + path);
}

template <class T>
std::string to_jsonl(const std::vector<T>& items) {
  std::string s;
  for (const auto& it : items) s += to_json(it).dump() + '\n';
  return s;
}

template <class Parse>
auto read_jsonl(const std::string& path, Parse&& parse) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw DataError("cannot open: " + path);
  std::vector<decltype(parse(ojson{}))> out;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    if (line.empty()) continue;
    try {
      out.push_back(parse(ojson::parse(line)));
    } catch (const std::exception& e) {
      throw DataError(path + ":" + std::to_string(lineno) + ": " + e.what());
    }
  }
  return out;
}

inline std::vector<ArithmeticPrompt> read_prompts(const std::string& path) {
  return read_jsonl(path, [](const ojson& j) { return prompt_from_json(j); });
}
inline std::vector<PromptPair> read_pairs(const std::string& path) {
  return read_jsonl(path, [](const ojson& j) { return pair_from_json(j); });
}
inline std::vector<CarryPair> read_carry_pairs(const std::string& path) {
  return read_jsonl(path, [](const ojson& j) { return carry_pair_from_json(j); });
}

// Per-class sample counts for each position; goes into dataset metadata.
inline ojson class_census(const std::vector<ArithmeticPrompt>& prompts) {
  ojson out;
  for (Position p : kPositions) {
    std::map<std::string, int> counts;
    for (const auto& x : prompts) ++counts[x.digit_class(p)];
    ojson c;
    for (auto& [k, n] : counts) c[k] = n;
    out[to_string(p)] = c;
  }
  return out;
}

}  // namespace dgc
