#include "ngpu/evaluator.hpp"

#include <filesystem>
#include <fstream>

#include "doctest.h"

using namespace ngpu;

namespace {

const std::string kTmp = (std::filesystem::temp_directory_path() / "ngpu_eval_test").string();

std::vector<Example> some_examples(int count, uint64_t seed) {
  return make_batch(TaskSpec{Task::kAdd, 2, Representation::kPadded, 6, 1}, count, seed);
}

}  // namespace

TEST_SUITE_BEGIN("evaluator");

TEST_CASE("sequence accuracy") {
  const auto examples = some_examples(10, 3);

  SUBCASE("the exact oracle scores 1.0") {
    CHECK(sequence_accuracy(oracle_predictor(), examples) == 1.0);
  }
  SUBCASE("one flipped symbol in one example scores 0.9") {
    int which = 0;
    const Predictor nearly = [&which](const Example& ex) {
      auto out = ex.target;
      if (which++ == 4) out[0] = out[0] == 0 ? 1 : 0;
      return out;
    };
    CHECK(sequence_accuracy(nearly, examples) == doctest::Approx(0.9));
  }
  SUBCASE("constant zeros on nonzero targets scores 0.0") {
    // Addition of uniform 6-digit operands never sums to zero here.
    bool all_nonzero = true;
    for (const auto& ex : examples) all_nonzero = all_nonzero && ex.meta.value != 0;
    REQUIRE(all_nonzero);
    CHECK(sequence_accuracy(constant_predictor(0), examples) == 0.0);
  }
  SUBCASE("wrong-length predictions count as errors and are flagged") {
    const Predictor truncating = [](const Example& ex) {
      auto out = ex.target;
      out.pop_back();
      return out;
    };
    std::vector<CaseVerdict> verdicts;
    bool mismatch = false;
    CHECK(sequence_accuracy(truncating, examples, &verdicts, &mismatch) == 0.0);
    CHECK(mismatch);
    CHECK(verdicts.size() == examples.size());
    for (const auto& v : verdicts) CHECK(!v.correct);
  }
  SUBCASE("empty example list is rejected") {
    CHECK_THROWS_AS(sequence_accuracy(oracle_predictor(), {}), ContractViolation);
  }
}

TEST_CASE("length generalization curve") {
  const TaskSpec spec{Task::kAdd, 2, Representation::kPadded, 1, 1};
  SUBCASE("exact oracle is 1.0 at every length") {
    const auto curve =
        length_generalization_curve(oracle_predictor(), spec, {4, 8, 16}, 25, 7);
    REQUIRE(curve.size() == 3);
    for (const auto& p : curve) {
      CHECK(p.accuracy == 1.0);
      CHECK(p.cases == 25);
    }
    CHECK(curve[0].length == 4);
    CHECK(curve[2].length == 16);
  }
  SUBCASE("deterministic given the seed") {
    std::vector<std::string> first_inputs_a, first_inputs_b;
    const Predictor spy_a = [&](const Example& ex) {
      first_inputs_a.push_back(ex.input_text());
      return ex.target;
    };
    const Predictor spy_b = [&](const Example& ex) {
      first_inputs_b.push_back(ex.input_text());
      return ex.target;
    };
    length_generalization_curve(spy_a, spec, {4, 8}, 10, 99);
    length_generalization_curve(spy_b, spec, {4, 8}, 10, 99);
    CHECK(first_inputs_a == first_inputs_b);
  }
}

TEST_CASE("carry threshold") {
  SUBCASE("the exact oracle never crosses") {
    const auto result = carry_threshold(oracle_predictor(), 2, 20, 10, 20, 5);
    CHECK(!result.threshold.has_value());
    REQUIRE(result.curve.size() == 10);
    for (const auto& p : result.curve) CHECK(p.error_rate == 0.0);
  }
  SUBCASE("a constant predictor crosses at k = 1") {
    const auto result = carry_threshold(constant_predictor(0), 2, 20, 10, 20, 5);
    REQUIRE(result.threshold.has_value());
    CHECK(*result.threshold == 1);
  }
  SUBCASE("a predictor that fails only above k = 6 thresholds at 7") {
    const Predictor limited = [](const Example& ex) {
      if (ex.meta.carry_length && *ex.meta.carry_length > 6) {
        return std::vector<Symbol>(ex.target.size(), 0);
      }
      return ex.target;
    };
    const auto result = carry_threshold(limited, 2, 20, 12, 15, 5);
    REQUIRE(result.threshold.has_value());
    CHECK(*result.threshold == 7);
  }
  SUBCASE("frame-width precondition") {
    CHECK_THROWS_AS(carry_threshold(oracle_predictor(), 2, 10, 9, 5, 5), ContractViolation);
  }
}

TEST_CASE("structured multiplication report") {
  SUBCASE("exact oracle passes every family") {
    const auto report = structured_mul_report(oracle_predictor(), 10, 8);
    CHECK(report.cases == report.passes);
    for (const auto& fam : report.families) CHECK(fam.cases == fam.passes);
    CHECK(report.largest_passing_repunit == 8);
    CHECK(report.verdicts.size() == static_cast<std::size_t>(report.cases));
  }
  SUBCASE("a predictor that fails long repunits reports the longest passing run") {
    const Predictor shortsighted = [](const Example& ex) {
      int64_t ones = 0;
      for (Symbol s : ex.input) {
        if (s == kSymbolTimes) break;
        ones += s == 1 ? 1 : 0;
      }
      if (ex.meta.family == "repunits" && ones > 5) {
        return std::vector<Symbol>(ex.target.size(), 9);
      }
      return ex.target;
    };
    const auto report = structured_mul_report(shortsighted, 10, 9);
    CHECK(report.largest_passing_repunit == 5);
  }
}

TEST_CASE("alignment experiment") {
  const std::vector<Task> tasks{Task::kAdd, Task::kMul};
  const std::vector<Representation> reps{Representation::kPadded, Representation::kUnpadded,
                                         Representation::kAligned};
  SUBCASE("zero seeds is an error") {
    CHECK_THROWS_AS(alignment_experiment(tasks, reps, {}, [](Task, Representation, uint64_t) {
                      return true;
                    }),
                    ContractViolation);
  }
  SUBCASE("an always-pass stub yields a uniform table") {
    const auto cells =
        alignment_experiment(tasks, reps, {1, 2, 3}, [](Task, Representation, uint64_t) {
          return true;
        });
    CHECK(cells.size() == 6);
    for (const auto& c : cells) {
      CHECK(c.seeds == 3);
      CHECK(c.pass_fraction == 1.0);
    }
  }
  SUBCASE("cell failures and exceptions are recorded, the table completes") {
    const auto cells = alignment_experiment(
        tasks, reps, {1, 2}, [](Task task, Representation rep, uint64_t seed) {
          if (task == Task::kMul && rep == Representation::kAligned) throw std::runtime_error("x");
          return seed == 1;
        });
    CHECK(cells.size() == 6);
    for (const auto& c : cells) {
      if (c.task == Task::kMul && c.representation == Representation::kAligned) {
        CHECK(c.pass_fraction == 0.0);
      } else {
        CHECK(c.pass_fraction == doctest::Approx(0.5));
      }
    }
  }
}

TEST_CASE("suites draw from disjoint seed streams") {
  // The same user seed must not make the uniform and carry suites reuse
  // random draws: collect the examples each suite generates and compare.
  std::vector<std::string> uniform_inputs, carry_inputs;
  const Predictor spy_uniform = [&](const Example& ex) {
    uniform_inputs.push_back(ex.input_text());
    return ex.target;
  };
  const Predictor spy_carry = [&](const Example& ex) {
    carry_inputs.push_back(ex.input_text());
    return ex.target;
  };
  length_generalization_curve(spy_uniform, TaskSpec{Task::kAdd, 2, Representation::kPadded, 1, 1},
                              {18}, 30, 42);
  carry_threshold(spy_carry, 2, 18, 5, 6, 42);
  for (const auto& u : uniform_inputs) {
    for (const auto& c : carry_inputs) CHECK(u != c);
  }
}

TEST_CASE("report files") {
  std::filesystem::create_directories(kTmp);
  SUBCASE("csv writers") {
    write_suite_csv(kTmp + "/suites.csv",
                    {{"ckpt", "uniform", 10, 9, 0.9, "length=24"},
                     {"ckpt", "carry", 100, 50, 0.5, "k_star=7"}});
    std::ifstream in(kTmp + "/suites.csv");
    std::string header;
    std::getline(in, header);
    CHECK(header == "checkpoint,suite,cases,passes,accuracy,detail");
    write_length_curve_csv(kTmp + "/len.csv", {{4, 10, 1.0}, {8, 10, 0.5}});
    write_carry_curve_csv(kTmp + "/carry.csv", {{1, 10, 0.0}, {2, 10, 1.0}});
    CHECK(std::filesystem::file_size(kTmp + "/len.csv") > 0);
    CHECK(std::filesystem::file_size(kTmp + "/carry.csv") > 0);
  }
  SUBCASE("verdicts jsonl carries enough to re-verify offline") {
    const auto examples = some_examples(3, 9);
    std::vector<CaseVerdict> verdicts;
    sequence_accuracy(oracle_predictor(), examples, &verdicts);
    write_verdicts_jsonl(kTmp + "/verdicts.jsonl", verdicts);
    std::ifstream in(kTmp + "/verdicts.jsonl");
    std::string line;
    int lines = 0;
    while (std::getline(in, line)) {
      CHECK(line.find("\"input\"") != std::string::npos);
      CHECK(line.find("\"target\"") != std::string::npos);
      CHECK(line.find("\"predicted\"") != std::string::npos);
      ++lines;
    }
    CHECK(lines == 3);
  }
  SUBCASE("svg chart") {
    write_line_chart_svg(kTmp + "/chart.svg", "t", "x", "y", {{1, 0.5}, {2, 0.75}, {3, 1.0}});
    std::ifstream in(kTmp + "/chart.svg");
    std::string all((std::istreambuf_iterator<char>(in)), {});
    CHECK(all.find("<svg") != std::string::npos);
    CHECK(all.find("polyline") != std::string::npos);
  }
}

TEST_SUITE_END();
