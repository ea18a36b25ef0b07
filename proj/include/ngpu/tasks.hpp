#pragma once

#include <gmpxx.h>

#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "ngpu/errors.hpp"
#include "ngpu/model.hpp"
#include "ngpu/rng.hpp"
#include "ngpu/symbols.hpp"

namespace ngpu {

// Exact generators and big-integer oracles for every task: base-b pairwise
// arithmetic, multi-operand multiplication, mixed-operator expressions, and
// the structured adversarial families. Generators are pure functions of
// (spec, rng state); every target is computed with exact integer arithmetic.

// Division by zero while evaluating an expression.
class DivisionByZero : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

enum class Task { kAdd, kMul, kKMul, kExpression };

const char* task_name(Task t);
Task task_from_name(const std::string& name);

struct TaskSpec {
  Task task = Task::kAdd;
  int base = 2;
  Representation representation = Representation::kPadded;
  // Digits per operand for add/mul/k_mul; total character length for
  // expressions.
  int64_t digits = 1;
  // Operand count for k_mul (3 is the paper's target task); ignored elsewhere.
  int64_t operand_count = 3;

  void validate() const;
};

struct ExampleMeta {
  Task task = Task::kAdd;
  int base = 2;
  int64_t digits = 0;
  std::optional<int64_t> carry_length;
  std::string family;  // structured-suite family tag, empty elsewhere
  mpz_class value;     // exact result
};

struct Example {
  std::vector<Symbol> input;
  std::vector<Symbol> second_row;  // aligned representation only
  std::vector<Symbol> target;     // result in base b, left-padded with 0s
  Representation representation = Representation::kPadded;
  ExampleMeta meta;

  std::string input_text() const { return symbols_to_string(input); }
  std::string target_text() const { return symbols_to_string(target); }
};

// --- rendering and parsing ---------------------------------------------------

// Base-b digits of a nonnegative value, most significant first, zero-padded
// to width. Throws if the value needs more than `width` digits.
std::vector<Symbol> render(const mpz_class& value, int base, int64_t width);
// Inverse of render; digit symbols must be below the base.
mpz_class parse_digits(const std::vector<Symbol>& digits, int base);

// --- generators --------------------------------------------------------------

// Uniform value in [0, base^digits).
mpz_class random_operand(int base, int64_t digits, Rng& rng);

Example gen_pair(const TaskSpec& spec, Rng& rng);
Example gen_k_mul(int64_t digits, int base, int64_t operand_count, Rng& rng);
Example gen_expression(int64_t length, int base, Rng& rng);
Example gen_carry_case(int base, int64_t total_digits, int64_t carry_length, Rng& rng);

// Deterministic constructors behind the random generators.
Example pair_example(Task task, int base, int64_t digits, Representation representation,
                     const mpz_class& a, const mpz_class& b);
Example k_mul_example(const std::vector<mpz_class>& operands, int64_t digits, int base);

// Dispatches on spec.task (k_mul uses spec.operand_count).
Example generate_example(const TaskSpec& spec, Rng& rng);
std::vector<Example> make_batch(const TaskSpec& spec, int64_t count, uint64_t seed);

// --- exact oracles -----------------------------------------------------------

// Evaluates digits/operators with standard precedence (* and / bind tighter
// than + and -), left-associative, floor division. Numbers are maximal digit
// runs. Throws ParseError on malformed input, DivisionByZero on x/0.
mpz_class eval_expression(const std::vector<Symbol>& expr, int base);
mpz_class eval_expression(const std::string& expr, int base);

// Longest run of consecutive positions that emit a carry in schoolbook
// addition of a and b.
int64_t count_carries(const mpz_class& a, const mpz_class& b, int base);

// Re-derives the target from the input with the exact evaluator.
bool verify_example(const Example& example);

// --- structured adversarial suite ---------------------------------------------

// Families: all single-digit pairs behind prepended zeros; power pairs
// multiplying to base^L; algebraic factor pairs of base^L - 1; repunit
// squares of run length 1..L.
std::vector<Example> gen_structured_mul_suite(int base, int64_t digit_width);

// --- carry-chain statistics ---------------------------------------------------

enum class CarryPairMode {
  kIncrement,  // uniform A plus 1: P(chain >= k) = 2^-k exactly in base 2
  kUniform,    // both operands uniform
};

// survival[k-1] = empirical P(longest carry chain >= k), k = 1..max_k.
std::vector<double> carry_chain_survival(int base, int64_t digits, int64_t max_k, int64_t samples,
                                         uint64_t seed, CarryPairMode mode);

// --- dataset records -----------------------------------------------------------

// One JSON object per line; field names documented in the README.
void write_dataset(const std::string& path, const std::vector<Example>& examples);
std::vector<Example> read_dataset(const std::string& path);
std::string example_to_json_line(const Example& example);
Example example_from_json_line(const std::string& line);

uint64_t fnv1a64(const std::string& text);
// Order-sensitive checksum over the target strings of a dataset.
uint64_t dataset_checksum(const std::vector<Example>& examples);

}  // namespace ngpu
