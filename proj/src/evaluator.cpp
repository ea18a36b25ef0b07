#include "ngpu/evaluator.hpp"

#include <fstream>
#include <map>
#include <sstream>

#include "json.hpp"
#include "ngpu/rng.hpp"

namespace ngpu {

Predictor model_predictor(ParameterBank<float>& bank) {
  return [&bank](const Example& ex) {
    Tape<float> tape;
    Val logits = forward(tape, bank, ex.input, ex.representation, RunMode::kEval, 0, nullptr,
                         ex.second_row.empty() ? nullptr : &ex.second_row);
    return decode(tape.value(logits), bank.config.alphabet_size);
  };
}

Predictor oracle_predictor() {
  return [](const Example& ex) { return ex.target; };
}

Predictor constant_predictor(Symbol symbol) {
  return [symbol](const Example& ex) {
    return std::vector<Symbol>(ex.target.size(), symbol);
  };
}

double sequence_accuracy(const Predictor& predict, const std::vector<Example>& examples,
                         std::vector<CaseVerdict>* verdicts, bool* length_mismatch) {
  require(!examples.empty(), "sequence_accuracy: example list must not be empty");
  int64_t passes = 0;
  if (length_mismatch) *length_mismatch = false;
  for (const Example& ex : examples) {
    const std::vector<Symbol> predicted = predict(ex);
    const bool correct = predicted == ex.target;
    if (predicted.size() != ex.target.size() && length_mismatch) *length_mismatch = true;
    passes += correct ? 1 : 0;
    if (verdicts) {
      verdicts->push_back({ex.input_text(), symbols_to_string(ex.second_row), ex.target_text(),
                           symbols_to_string(predicted), correct});
    }
  }
  return static_cast<double>(passes) / static_cast<double>(examples.size());
}

std::vector<LengthCurvePoint> length_generalization_curve(const Predictor& predict, TaskSpec spec,
                                                          const std::vector<int64_t>& lengths,
                                                          int64_t cases_per_length, uint64_t seed) {
  require(!lengths.empty(), "length_generalization_curve: lengths must not be empty");
  require(cases_per_length >= 1, "length_generalization_curve: cases_per_length must be >= 1");
  std::vector<LengthCurvePoint> curve;
  for (int64_t length : lengths) {
    TaskSpec at_length = spec;
    at_length.digits = length;
    const auto examples =
        make_batch(at_length, cases_per_length,
                   derive_seed(seed, stream::kEvalUniform, static_cast<uint64_t>(length)));
    curve.push_back({length, cases_per_length, sequence_accuracy(predict, examples)});
  }
  return curve;
}

CarryThresholdResult carry_threshold(const Predictor& predict, int base, int64_t total_digits,
                                     int64_t max_k, int64_t cases_per_k, uint64_t seed) {
  require(max_k >= 1, "carry_threshold: max_k must be >= 1");
  require(max_k + 2 <= total_digits,
          "carry_threshold: max_k must stay below the evaluation frame width - 2");
  require(cases_per_k >= 1, "carry_threshold: cases_per_k must be >= 1");
  CarryThresholdResult result;
  for (int64_t k = 1; k <= max_k; ++k) {
    Rng rng(derive_seed(seed, stream::kEvalCarry, static_cast<uint64_t>(k)));
    std::vector<Example> cases;
    cases.reserve(static_cast<std::size_t>(cases_per_k));
    for (int64_t i = 0; i < cases_per_k; ++i) {
      cases.push_back(gen_carry_case(base, total_digits, k, rng));
    }
    const double error = 1.0 - sequence_accuracy(predict, cases);
    result.curve.push_back({k, cases_per_k, error});
    if (!result.threshold && error >= 0.5) result.threshold = k;
  }
  return result;
}

StructuredMulReport structured_mul_report(const Predictor& predict, int base,
                                          int64_t digit_width) {
  const std::vector<Example> suite = gen_structured_mul_suite(base, digit_width);
  StructuredMulReport report;
  std::map<std::string, FamilyReport> families;
  mpz_class repunit = 0;
  for (const Example& ex : suite) {
    const std::vector<Symbol> predicted = predict(ex);
    const bool correct = predicted == ex.target;
    report.verdicts.push_back({ex.input_text(), "", ex.target_text(),
                               symbols_to_string(predicted), correct});
    FamilyReport& fam = families[ex.meta.family];
    fam.family = ex.meta.family;
    ++fam.cases;
    fam.passes += correct ? 1 : 0;
    ++report.cases;
    report.passes += correct ? 1 : 0;
    if (ex.meta.family == "repunits" && correct) {
      // Run length = number of ones in the left operand.
      int64_t ones = 0;
      for (Symbol s : ex.input) {
        if (s == kSymbolTimes) break;
        ones += s == 1 ? 1 : 0;
      }
      report.largest_passing_repunit = std::max(report.largest_passing_repunit, ones);
    }
  }
  for (auto& [name, fam] : families) report.families.push_back(fam);
  return report;
}

std::vector<AlignmentCell> alignment_experiment(const std::vector<Task>& tasks,
                                                const std::vector<Representation>& representations,
                                                const std::vector<uint64_t>& seeds,
                                                const CellTrainer& train_cell) {
  require(!seeds.empty(), "alignment_experiment: needs at least one seed");
  require(!tasks.empty() && !representations.empty(),
          "alignment_experiment: needs at least one task and representation");
  require(static_cast<bool>(train_cell), "alignment_experiment: cell trainer must be set");
  std::vector<AlignmentCell> cells;
  for (Task task : tasks) {
    for (Representation rep : representations) {
      AlignmentCell cell;
      cell.task = task;
      cell.representation = rep;
      for (uint64_t seed : seeds) {
        ++cell.seeds;
        bool passed = false;
        try {
          passed = train_cell(task, rep, seed);
        } catch (const std::exception&) {
          passed = false;  // recorded as a failing cell entry, table continues
        }
        cell.passes += passed ? 1 : 0;
      }
      cell.pass_fraction = static_cast<double>(cell.passes) / static_cast<double>(cell.seeds);
      cells.push_back(cell);
    }
  }
  return cells;
}

// --- report files --------------------------------------------------------------

namespace {

std::string csv_escape(const std::string& s) {
  if (s.find_first_of(",\"\n") == std::string::npos) return s;
  std::string out = "\"";
  for (char c : s) {
    if (c == '"') out += "\"\"";
    else out += c;
  }
  return out + "\"";
}

std::ofstream open_out(const std::string& path) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot open for writing: " + path);
  return out;
}

}  // namespace

void write_suite_csv(const std::string& path, const std::vector<SuiteSummaryRow>& rows) {
  auto out = open_out(path);
  out << "checkpoint,suite,cases,passes,accuracy,detail\n";
  for (const auto& r : rows) {
    out << csv_escape(r.checkpoint) << "," << csv_escape(r.suite) << "," << r.cases << ","
        << r.passes << "," << r.accuracy << "," << csv_escape(r.detail) << "\n";
  }
}

void write_length_curve_csv(const std::string& path, const std::vector<LengthCurvePoint>& curve) {
  auto out = open_out(path);
  out << "length,cases,accuracy\n";
  for (const auto& p : curve) out << p.length << "," << p.cases << "," << p.accuracy << "\n";
}

void write_carry_curve_csv(const std::string& path, const std::vector<CarryCurvePoint>& curve) {
  auto out = open_out(path);
  out << "carry_length,cases,error_rate\n";
  for (const auto& p : curve) out << p.carry_length << "," << p.cases << "," << p.error_rate << "\n";
}

void write_verdicts_jsonl(const std::string& path, const std::vector<CaseVerdict>& verdicts) {
  auto out = open_out(path);
  for (const CaseVerdict& v : verdicts) {
    nlohmann::json j{{"input", v.input},
                     {"target", v.target},
                     {"predicted", v.predicted},
                     {"correct", v.correct}};
    if (!v.second_row.empty()) j["row2"] = v.second_row;
    out << j.dump() << "\n";
  }
}

void write_line_chart_svg(const std::string& path, const std::string& title,
                          const std::string& x_label, const std::string& y_label,
                          const std::vector<std::pair<double, double>>& points) {
  require(!points.empty(), "write_line_chart_svg: no points");
  const double width = 640, height = 400, margin = 60;
  double xmin = points.front().first, xmax = points.front().first;
  for (const auto& [x, y] : points) {
    xmin = std::min(xmin, x);
    xmax = std::max(xmax, x);
  }
  if (xmax == xmin) xmax = xmin + 1;
  auto px = [&](double x) { return margin + (x - xmin) / (xmax - xmin) * (width - 2 * margin); };
  auto py = [&](double y) { return height - margin - y * (height - 2 * margin); };

  auto out = open_out(path);
  out << "<svg xmlns='http://www.w3.org/2000/svg' width='" << width << "' height='" << height
      << "'>\n";
  out << "<rect width='100%' height='100%' fill='white'/>\n";
  out << "<text x='" << width / 2 << "' y='24' text-anchor='middle' font-size='16'>" << title
      << "</text>\n";
  out << "<line x1='" << margin << "' y1='" << py(0) << "' x2='" << width - margin << "' y2='"
      << py(0) << "' stroke='black'/>\n";
  out << "<line x1='" << margin << "' y1='" << py(0) << "' x2='" << margin << "' y2='" << py(1)
      << "' stroke='black'/>\n";
  for (double tick : {0.0, 0.25, 0.5, 0.75, 1.0}) {
    out << "<text x='" << margin - 8 << "' y='" << py(tick) + 4
        << "' text-anchor='end' font-size='10'>" << tick << "</text>\n";
    out << "<line x1='" << margin - 4 << "' y1='" << py(tick) << "' x2='" << margin << "' y2='"
        << py(tick) << "' stroke='black'/>\n";
  }
  out << "<text x='" << width / 2 << "' y='" << height - 16
      << "' text-anchor='middle' font-size='12'>" << x_label << "</text>\n";
  out << "<text x='16' y='" << height / 2 << "' font-size='12' transform='rotate(-90 16 "
      << height / 2 << ")' text-anchor='middle'>" << y_label << "</text>\n";
  out << "<polyline fill='none' stroke='steelblue' stroke-width='2' points='";
  for (const auto& [x, y] : points) out << px(x) << "," << py(y) << " ";
  out << "'/>\n";
  for (const auto& [x, y] : points) {
    out << "<circle cx='" << px(x) << "' cy='" << py(y) << "' r='3' fill='steelblue'/>\n";
    out << "<text x='" << px(x) << "' y='" << py(y) - 8
        << "' text-anchor='middle' font-size='9'>" << x << "</text>\n";
  }
  out << "</svg>\n";
}

}  // namespace ngpu
