#include "ngpu/tasks.hpp"

#include <algorithm>
#include <fstream>
#include <map>
#include <sstream>

#include "json.hpp"

namespace ngpu {

const char* task_name(Task t) {
  switch (t) {
    case Task::kAdd: return "add";
    case Task::kMul: return "mul";
    case Task::kKMul: return "k_mul";
    case Task::kExpression: return "expression";
  }
  return "?";
}

Task task_from_name(const std::string& name) {
  if (name == "add") return Task::kAdd;
  if (name == "mul") return Task::kMul;
  if (name == "k_mul") return Task::kKMul;
  if (name == "expression") return Task::kExpression;
  throw ContractViolation("unknown task: " + name + " (expected add, mul, k_mul or expression)");
}

void TaskSpec::validate() const {
  require(base >= 2 && base <= 10, "TaskSpec: base must be in [2,10]");
  require(digits >= 1, "TaskSpec: digits/length must be >= 1");
  if (representation == Representation::kAligned) {
    require(task == Task::kAdd || task == Task::kMul,
            "TaskSpec: aligned representation is only valid for two-operand tasks");
  }
  if (task == Task::kKMul || task == Task::kExpression) {
    require(representation == Representation::kPadded,
            "TaskSpec: k_mul and expression tasks use the padded representation");
  }
  if (task == Task::kKMul) require(operand_count >= 1, "TaskSpec: operand_count must be >= 1");
}

// --- rendering and parsing ---------------------------------------------------

std::vector<Symbol> render(const mpz_class& value, int base, int64_t width) {
  require(base >= 2 && base <= 10, "render: base must be in [2,10]");
  require(sgn(value) >= 0, "render: value must be nonnegative");
  require(width >= 1, "render: width must be >= 1");
  const std::string digits = value.get_str(base);
  require(static_cast<int64_t>(digits.size()) <= width,
          "render: value needs " + std::to_string(digits.size()) + " base-" + std::to_string(base) +
              " digits, width is " + std::to_string(width));
  std::vector<Symbol> out(static_cast<std::size_t>(width), 0);
  const std::size_t off = static_cast<std::size_t>(width) - digits.size();
  for (std::size_t i = 0; i < digits.size(); ++i) out[off + i] = digits[i] - '0';
  return out;
}

mpz_class parse_digits(const std::vector<Symbol>& digits, int base) {
  require(!digits.empty(), "parse_digits: empty digit string");
  mpz_class value = 0;
  for (Symbol s : digits) {
    require(is_digit_symbol(s) && s < base,
            "parse_digits: symbol " + std::to_string(s) + " is not a base-" + std::to_string(base) +
                " digit");
    value = value * base + s;
  }
  return value;
}

// --- generators --------------------------------------------------------------

mpz_class random_operand(int base, int64_t digits, Rng& rng) {
  std::uniform_int_distribution<int> digit(0, base - 1);
  mpz_class value = 0;
  for (int64_t i = 0; i < digits; ++i) value = value * base + digit(rng);
  return value;
}

namespace {

Symbol operator_symbol(Task task) {
  switch (task) {
    case Task::kAdd: return kSymbolPlus;
    case Task::kMul: return kSymbolTimes;
    default: throw ContractViolation("operator_symbol: not a two-operand task");
  }
}

std::vector<Symbol> unpadded_digits(const mpz_class& value, int base) {
  const std::string digits = value.get_str(base);
  std::vector<Symbol> out;
  out.reserve(digits.size());
  for (char c : digits) out.push_back(c - '0');
  return out;
}

}  // namespace

Example pair_example(Task task, int base, int64_t digits, Representation representation,
                     const mpz_class& a, const mpz_class& b) {
  const mpz_class value = task == Task::kAdd ? mpz_class(a + b) : mpz_class(a * b);
  Example ex;
  ex.representation = representation;
  ex.meta = {task, base, digits, std::nullopt, "", value};
  const Symbol op = operator_symbol(task);
  switch (representation) {
    case Representation::kPadded: {
      const int64_t frame = 2 * digits + 1;
      ex.input = render(a, base, digits);
      ex.input.push_back(op);
      const auto rb = render(b, base, digits);
      ex.input.insert(ex.input.end(), rb.begin(), rb.end());
      ex.target = render(value, base, frame);
      break;
    }
    case Representation::kUnpadded: {
      const int64_t frame = 2 * digits + 1;
      ex.input = unpadded_digits(a, base);
      ex.input.push_back(op);
      const auto rb = unpadded_digits(b, base);
      ex.input.insert(ex.input.end(), rb.begin(), rb.end());
      require(static_cast<int64_t>(ex.input.size()) <= frame,
              "gen_pair: unpadded input exceeds its frame");
      ex.input.resize(static_cast<std::size_t>(frame), kSymbolPad);
      ex.target = render(value, base, frame);
      break;
    }
    case Representation::kAligned: {
      // The frame is the smallest width that always fits the result: one
      // extra digit for a sum, 2*digits for a product.
      const int64_t frame = task == Task::kAdd ? digits + 1 : 2 * digits;
      ex.input = render(a, base, frame);
      ex.second_row = render(b, base, frame);
      ex.target = render(value, base, frame);
      break;
    }
  }
  return ex;
}

Example k_mul_example(const std::vector<mpz_class>& operands, int64_t digits, int base) {
  require(!operands.empty(), "k_mul_example: needs at least one operand");
  require(digits >= 1, "k_mul_example: digits must be >= 1");
  const int64_t count = static_cast<int64_t>(operands.size());
  const int64_t frame = count * digits + count - 1;
  mpz_class product = 1;
  for (const mpz_class& v : operands) product *= v;
  Example ex;
  ex.representation = Representation::kPadded;
  ex.meta = {Task::kKMul, base, digits, std::nullopt, "", product};
  for (int64_t i = 0; i < count; ++i) {
    if (i) ex.input.push_back(kSymbolTimes);
    const auto r = render(operands[static_cast<std::size_t>(i)], base, digits);
    ex.input.insert(ex.input.end(), r.begin(), r.end());
  }
  ex.target = render(product, base, frame);
  return ex;
}

Example gen_pair(const TaskSpec& spec, Rng& rng) {
  spec.validate();
  require(spec.task == Task::kAdd || spec.task == Task::kMul,
          "gen_pair: task must be add or mul");
  const mpz_class a = random_operand(spec.base, spec.digits, rng);
  const mpz_class b = random_operand(spec.base, spec.digits, rng);
  return pair_example(spec.task, spec.base, spec.digits, spec.representation, a, b);
}

Example gen_k_mul(int64_t digits, int base, int64_t operand_count, Rng& rng) {
  require(digits >= 1, "gen_k_mul: digits must be >= 1");
  require(operand_count >= 1, "gen_k_mul: operand count must be >= 1");
  const int64_t frame = operand_count * digits + operand_count - 1;
  for (int attempt = 0; attempt < 16; ++attempt) {
    std::vector<mpz_class> operands;
    mpz_class product = 1;
    for (int64_t i = 0; i < operand_count; ++i) {
      operands.push_back(random_operand(base, digits, rng));
      product *= operands.back();
    }
    if (static_cast<int64_t>(product.get_str(base).size()) > frame) {
      continue;  // cannot happen with per-operand width `digits`; kept as a guard
    }
    return k_mul_example(operands, digits, base);
  }
  throw ContractViolation("gen_k_mul: could not fit a product into the input width");
}

// --- expression evaluation ---------------------------------------------------

namespace {

struct ExprToken {
  bool is_number = false;
  mpz_class number;
  Symbol op = -1;
  std::size_t position = 0;
};

std::vector<ExprToken> tokenize_expression(const std::vector<Symbol>& expr, int base) {
  if (expr.empty()) throw ParseError("empty expression");
  std::vector<ExprToken> tokens;
  std::size_t i = 0;
  while (i < expr.size()) {
    const Symbol s = expr[i];
    if (is_digit_symbol(s)) {
      if (s >= base) {
        throw ParseError("digit " + std::to_string(s) + " out of base " + std::to_string(base), i);
      }
      ExprToken t;
      t.is_number = true;
      t.position = i;
      mpz_class value = 0;
      while (i < expr.size() && is_digit_symbol(expr[i])) {
        if (expr[i] >= base) {
          throw ParseError(
              "digit " + std::to_string(expr[i]) + " out of base " + std::to_string(base), i);
        }
        value = value * base + expr[i];
        ++i;
      }
      t.number = value;
      tokens.push_back(std::move(t));
    } else if (is_operator_symbol(s)) {
      if (tokens.empty() || !tokens.back().is_number) {
        throw ParseError("operator without a left operand", i);
      }
      ExprToken t;
      t.op = s;
      t.position = i;
      tokens.push_back(std::move(t));
      ++i;
    } else {
      throw ParseError("unexpected symbol " + std::to_string(s) + " in expression", i);
    }
  }
  if (!tokens.back().is_number) {
    throw ParseError("expression ends with an operator", tokens.back().position);
  }
  return tokens;
}

// Left-to-right evaluation with * and / bound first; `prefixes`, when given,
// collects the running value after every additive fold (the intermediate
// results a generated expression must keep nonnegative).
mpz_class eval_tokens(const std::vector<ExprToken>& tokens, std::vector<mpz_class>* prefixes) {
  mpz_class total = 0;
  int sign = +1;
  mpz_class term = tokens[0].number;
  auto fold = [&]() {
    if (sign > 0) total += term;
    else total -= term;
    if (prefixes) prefixes->push_back(total);
  };
  for (std::size_t i = 1; i < tokens.size(); i += 2) {
    const Symbol op = tokens[i].op;
    const mpz_class& rhs = tokens[i + 1].number;
    if (op == kSymbolTimes) {
      term *= rhs;
    } else if (op == kSymbolDivide) {
      if (rhs == 0) throw DivisionByZero("division by zero in expression");
      mpz_class q;
      mpz_fdiv_q(q.get_mpz_t(), term.get_mpz_t(), rhs.get_mpz_t());
      term = q;
    } else {
      fold();
      sign = op == kSymbolPlus ? +1 : -1;
      term = rhs;
    }
  }
  fold();
  return total;
}

}  // namespace

mpz_class eval_expression(const std::vector<Symbol>& expr, int base) {
  require(base >= 2 && base <= 10, "eval_expression: base must be in [2,10]");
  return eval_tokens(tokenize_expression(expr, base), nullptr);
}

mpz_class eval_expression(const std::string& expr, int base) {
  return eval_expression(to_symbols(expr), base);
}

Example gen_expression(int64_t length, int base, Rng& rng) {
  require(length >= 1, "gen_expression: length must be >= 1");
  require(base >= 2 && base <= 10, "gen_expression: base must be in [2,10]");
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  std::uniform_int_distribution<int> digit(0, base - 1);
  std::uniform_int_distribution<int> op(0, 3);
  constexpr int kBudget = 10000;
  std::map<std::string, int64_t> rejects;
  for (int attempt = 0; attempt < kBudget; ++attempt) {
    std::vector<Symbol> expr(static_cast<std::size_t>(length));
    bool last_was_op = false;
    for (int64_t i = 0; i < length; ++i) {
      const bool must_digit = i == 0 || i == length - 1 || last_was_op;
      // 70% chance of a digit, 30% an operator, never two operators adjacent.
      if (must_digit || unit(rng) < 0.7) {
        expr[static_cast<std::size_t>(i)] = digit(rng);
        last_was_op = false;
      } else {
        expr[static_cast<std::size_t>(i)] = kSymbolPlus + op(rng);
        last_was_op = true;
      }
    }
    std::vector<mpz_class> prefixes;
    mpz_class value;
    try {
      value = eval_tokens(tokenize_expression(expr, base), &prefixes);
    } catch (const DivisionByZero&) {
      ++rejects["division by zero"];
      continue;
    }
    if (std::any_of(prefixes.begin(), prefixes.end(),
                    [](const mpz_class& p) { return sgn(p) < 0; })) {
      ++rejects["negative intermediate value"];
      continue;
    }
    if (static_cast<int64_t>(value.get_str(base).size()) > length) {
      ++rejects["result wider than the output"];
      continue;
    }
    Example ex;
    ex.representation = Representation::kPadded;
    ex.meta = {Task::kExpression, base, length, std::nullopt, "", value};
    ex.input = std::move(expr);
    ex.target = render(value, base, length);
    return ex;
  }
  std::string worst = "none";
  int64_t count = -1;
  for (const auto& [name, c] : rejects) {
    if (c > count) {
      worst = name;
      count = c;
    }
  }
  throw ContractViolation("gen_expression: rejection budget exhausted after " +
                          std::to_string(kBudget) + " attempts; most frequent failure: " + worst);
}

// --- carry cases ---------------------------------------------------------------

namespace {

// Least-significant digit first.
std::vector<int> digits_lsb_first(mpz_class value, int base) {
  std::vector<int> out;
  while (value > 0) {
    out.push_back(static_cast<int>(mpz_fdiv_ui(value.get_mpz_t(), static_cast<unsigned>(base))));
    value /= base;
  }
  return out;
}

int64_t count_carries_digits(const std::vector<int>& a, const std::vector<int>& b, int base) {
  const std::size_t len = std::max(a.size(), b.size());
  int carry = 0;
  int64_t run = 0, longest = 0;
  for (std::size_t i = 0; i < len || carry; ++i) {
    const int da = i < a.size() ? a[i] : 0;
    const int db = i < b.size() ? b[i] : 0;
    const int s = da + db + carry;
    carry = s >= base ? 1 : 0;
    run = carry ? run + 1 : 0;
    longest = std::max(longest, run);
  }
  return longest;
}

}  // namespace

int64_t count_carries(const mpz_class& a, const mpz_class& b, int base) {
  require(base >= 2 && base <= 10, "count_carries: base must be in [2,10]");
  require(sgn(a) >= 0 && sgn(b) >= 0, "count_carries: operands must be nonnegative");
  return count_carries_digits(digits_lsb_first(a, base), digits_lsb_first(b, base), base);
}

Example gen_carry_case(int base, int64_t total_digits, int64_t carry_length, Rng& rng) {
  require(base >= 2 && base <= 10, "gen_carry_case: base must be in [2,10]");
  require(carry_length >= 0, "gen_carry_case: carry length must be >= 0");
  require(carry_length + 2 <= total_digits,
          "gen_carry_case: need carry_length + 2 <= total_digits");
  // A ends with carry_length copies of (base-1) preceded by a digit below
  // base-1; adding B = 1 carries through exactly the trailing run.
  std::uniform_int_distribution<int> digit(0, base - 1);
  std::uniform_int_distribution<int> stop_digit(0, base - 2);
  mpz_class a = 0;
  for (int64_t i = 0; i < total_digits - carry_length - 1; ++i) a = a * base + digit(rng);
  a = a * base + stop_digit(rng);
  for (int64_t i = 0; i < carry_length; ++i) a = a * base + (base - 1);
  const mpz_class b = 1;
  Example ex = pair_example(Task::kAdd, base, total_digits, Representation::kPadded, a, b);
  ex.meta.carry_length = carry_length;
  if (count_carries(a, b, base) != carry_length) {
    throw std::logic_error("gen_carry_case: constructed chain has the wrong length");
  }
  return ex;
}

// --- dispatch -------------------------------------------------------------------

Example generate_example(const TaskSpec& spec, Rng& rng) {
  spec.validate();
  switch (spec.task) {
    case Task::kAdd:
    case Task::kMul:
      return gen_pair(spec, rng);
    case Task::kKMul:
      return gen_k_mul(spec.digits, spec.base, spec.operand_count, rng);
    case Task::kExpression:
      return gen_expression(spec.digits, spec.base, rng);
  }
  throw ContractViolation("generate_example: unknown task");
}

std::vector<Example> make_batch(const TaskSpec& spec, int64_t count, uint64_t seed) {
  require(count >= 0, "make_batch: count must be >= 0");
  Rng rng(seed);
  std::vector<Example> out;
  out.reserve(static_cast<std::size_t>(count));
  for (int64_t i = 0; i < count; ++i) out.push_back(generate_example(spec, rng));
  return out;
}

// --- verification ----------------------------------------------------------------

bool verify_example(const Example& example) {
  const ExampleMeta& meta = example.meta;
  mpz_class value;
  if (example.representation == Representation::kAligned) {
    const mpz_class a = parse_digits(example.input, meta.base);
    const mpz_class b = parse_digits(example.second_row, meta.base);
    value = meta.task == Task::kAdd ? mpz_class(a + b) : mpz_class(a * b);
  } else {
    std::vector<Symbol> text = example.input;
    while (!text.empty() && text.back() == kSymbolPad) text.pop_back();
    value = eval_expression(text, meta.base);
  }
  if (value != meta.value) return false;
  const auto expected = render(value, meta.base, static_cast<int64_t>(example.target.size()));
  return expected == example.target;
}

// --- structured adversarial suite --------------------------------------------------

std::vector<Example> gen_structured_mul_suite(int base, int64_t digit_width) {
  require(base >= 2 && base <= 10, "gen_structured_mul_suite: base must be in [2,10]");
  require(digit_width >= 2, "gen_structured_mul_suite: digit width must be >= 2");
  const int64_t big = digit_width;
  std::vector<Example> out;

  auto push_pair = [&](const mpz_class& a, const mpz_class& b, int64_t width_a, int64_t width_b,
                       const std::string& family) {
    Example ex;
    ex.representation = Representation::kPadded;
    ex.meta = {Task::kMul, base, big, std::nullopt, family, mpz_class(a * b)};
    ex.input = render(a, base, width_a);
    ex.input.push_back(kSymbolTimes);
    const auto rb = render(b, base, width_b);
    ex.input.insert(ex.input.end(), rb.begin(), rb.end());
    ex.target = render(ex.meta.value, base, width_a + width_b + 1);
    out.push_back(std::move(ex));
  };

  // Single digits behind prepended zeros. The right operand is one digit
  // narrower so the 2L-wide target matches the product frame exactly.
  for (int d1 = 0; d1 < base; ++d1) {
    for (int d2 = 0; d2 < base; ++d2) {
      push_pair(d1, d2, big, big - 1, "prepended_zeros");
    }
  }

  // Pairs multiplying to base^L.
  mpz_class power = base;
  for (int64_t i = 1; i <= big - 1; ++i) {
    mpz_class other;
    mpz_ui_pow_ui(other.get_mpz_t(), static_cast<unsigned>(base),
                  static_cast<unsigned>(big - i));
    push_pair(power, other, big, big, "power_pairs");
    power *= base;
  }

  // Algebraic factor pairs of base^L - 1.
  mpz_class full;
  mpz_ui_pow_ui(full.get_mpz_t(), static_cast<unsigned>(base), static_cast<unsigned>(big));
  full -= 1;
  if (big % 2 == 0) {
    mpz_class half;
    mpz_ui_pow_ui(half.get_mpz_t(), static_cast<unsigned>(base), static_cast<unsigned>(big / 2));
    push_pair(half - 1, half + 1, big, big, "power_minus_one");
    push_pair(half + 1, half - 1, big, big, "power_minus_one");
  }
  const mpz_class repunit_full = full / (base - 1);
  push_pair(repunit_full, base - 1, big, big, "power_minus_one");
  push_pair(base - 1, repunit_full, big, big, "power_minus_one");

  // Repunit squares, run lengths 1..L.
  mpz_class repunit = 0;
  for (int64_t j = 1; j <= big; ++j) {
    repunit = repunit * base + 1;
    push_pair(repunit, repunit, big, big, "repunits");
  }

  for (const Example& ex : out) {
    if (!verify_example(ex)) {
      throw std::logic_error("gen_structured_mul_suite: internal oracle mismatch");
    }
  }
  return out;
}

// --- carry statistics ----------------------------------------------------------------

std::vector<double> carry_chain_survival(int base, int64_t digits, int64_t max_k, int64_t samples,
                                         uint64_t seed, CarryPairMode mode) {
  require(base >= 2 && base <= 10, "carry_chain_survival: base must be in [2,10]");
  require(digits >= 1 && max_k >= 1 && samples >= 1, "carry_chain_survival: bad arguments");
  Rng rng(seed);
  std::uniform_int_distribution<int> digit(0, base - 1);
  std::vector<int64_t> at_least(static_cast<std::size_t>(max_k) + 1, 0);
  std::vector<int> a(static_cast<std::size_t>(digits));
  std::vector<int> b;
  for (int64_t s = 0; s < samples; ++s) {
    for (auto& d : a) d = digit(rng);
    if (mode == CarryPairMode::kUniform) {
      b.resize(a.size());
      for (auto& d : b) d = digit(rng);
    } else {
      b.assign(1, 1);
    }
    const int64_t chain = std::min<int64_t>(count_carries_digits(a, b, base), max_k);
    for (int64_t k = 1; k <= chain; ++k) ++at_least[static_cast<std::size_t>(k)];
  }
  std::vector<double> survival(static_cast<std::size_t>(max_k));
  for (int64_t k = 1; k <= max_k; ++k) {
    survival[static_cast<std::size_t>(k - 1)] =
        static_cast<double>(at_least[static_cast<std::size_t>(k)]) / static_cast<double>(samples);
  }
  return survival;
}

// --- dataset records --------------------------------------------------------------------

std::string example_to_json_line(const Example& example) {
  nlohmann::json j;
  j["input"] = example.input_text();
  j["target"] = example.target_text();
  j["task"] = task_name(example.meta.task);
  j["base"] = example.meta.base;
  j["digits"] = example.meta.digits;
  j["representation"] = representation_name(example.representation);
  j["value"] = example.meta.value.get_str(10);
  if (!example.second_row.empty()) j["row2"] = symbols_to_string(example.second_row);
  if (example.meta.carry_length) j["carry_length"] = *example.meta.carry_length;
  if (!example.meta.family.empty()) j["family"] = example.meta.family;
  return j.dump();
}

Example example_from_json_line(const std::string& line) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(line);
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(std::string("bad dataset record: ") + e.what());
  }
  Example ex;
  ex.input = to_symbols(j.at("input").get<std::string>());
  ex.target = to_symbols(j.at("target").get<std::string>());
  ex.meta.task = task_from_name(j.at("task").get<std::string>());
  ex.meta.base = j.at("base").get<int>();
  ex.meta.digits = j.at("digits").get<int64_t>();
  ex.representation = representation_from_name(j.at("representation").get<std::string>());
  ex.meta.value = mpz_class(j.at("value").get<std::string>(), 10);
  if (j.contains("row2")) ex.second_row = to_symbols(j.at("row2").get<std::string>());
  if (j.contains("carry_length")) ex.meta.carry_length = j.at("carry_length").get<int64_t>();
  if (j.contains("family")) ex.meta.family = j.at("family").get<std::string>();
  return ex;
}

void write_dataset(const std::string& path, const std::vector<Example>& examples) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("write_dataset: cannot open " + path);
  for (const Example& ex : examples) out << example_to_json_line(ex) << "\n";
  if (!out) throw std::runtime_error("write_dataset: write failed for " + path);
}

std::vector<Example> read_dataset(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("read_dataset: cannot open " + path);
  std::vector<Example> out;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    out.push_back(example_from_json_line(line));
  }
  return out;
}

uint64_t fnv1a64(const std::string& text) {
  uint64_t h = 0xcbf29ce484222325ull;
  for (unsigned char c : text) {
    h ^= c;
    h *= 0x100000001b3ull;
  }
  return h;
}

uint64_t dataset_checksum(const std::vector<Example>& examples) {
  uint64_t h = 0xcbf29ce484222325ull;
  for (const Example& ex : examples) {
    const uint64_t t = fnv1a64(ex.target_text());
    h ^= t;
    h *= 0x100000001b3ull;
  }
  return h;
}

}  // namespace ngpu
