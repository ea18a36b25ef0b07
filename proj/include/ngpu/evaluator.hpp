#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "ngpu/model.hpp"
#include "ngpu/tasks.hpp"

namespace ngpu {

// Generalization measurement: whole-sequence accuracy, length curves,
// carry-failure thresholds, structured-multiplication reports and alignment
// comparisons. Every suite is a deterministic function of (predictor, seed),
// and each suite draws from its own seed stream so reports are independently
// reproducible. Oracle and constant predictors ship here so every suite is
// testable without a trained model.

using Predictor = std::function<std::vector<Symbol>(const Example&)>;

Predictor model_predictor(ParameterBank<float>& bank);
Predictor oracle_predictor();
Predictor constant_predictor(Symbol symbol);

struct CaseVerdict {
  std::string input;
  std::string second_row;
  std::string target;
  std::string predicted;
  bool correct = false;
};

// Exact whole-string equality; a prediction of the wrong length counts as an
// error and sets *length_mismatch.
double sequence_accuracy(const Predictor& predict, const std::vector<Example>& examples,
                         std::vector<CaseVerdict>* verdicts = nullptr,
                         bool* length_mismatch = nullptr);

struct LengthCurvePoint {
  int64_t length = 0;
  int64_t cases = 0;
  double accuracy = 0;
};

std::vector<LengthCurvePoint> length_generalization_curve(const Predictor& predict,
                                                          TaskSpec spec,
                                                          const std::vector<int64_t>& lengths,
                                                          int64_t cases_per_length, uint64_t seed);

struct CarryCurvePoint {
  int64_t carry_length = 0;
  int64_t cases = 0;
  double error_rate = 0;
};

struct CarryThresholdResult {
  // Smallest k with error rate >= 0.5, scanning k upward; nullopt if the
  // curve never crosses.
  std::optional<int64_t> threshold;
  std::vector<CarryCurvePoint> curve;
};

CarryThresholdResult carry_threshold(const Predictor& predict, int base, int64_t total_digits,
                                     int64_t max_k, int64_t cases_per_k, uint64_t seed);

struct FamilyReport {
  std::string family;
  int64_t cases = 0;
  int64_t passes = 0;
};

struct StructuredMulReport {
  std::vector<FamilyReport> families;
  std::vector<CaseVerdict> verdicts;
  int64_t cases = 0;
  int64_t passes = 0;
  // Longest run of ones whose square is still predicted correctly (0 if none).
  int64_t largest_passing_repunit = 0;
};

StructuredMulReport structured_mul_report(const Predictor& predict, int base, int64_t digit_width);

// Alignment comparison: one pass fraction per (task, representation) cell.
// The cell trainer is injected so the table can be driven by the real
// trainer or by a stub; it returns whether (task, representation, seed)
// reached the pass criterion.
using CellTrainer = std::function<bool(Task task, Representation representation, uint64_t seed)>;

struct AlignmentCell {
  Task task = Task::kAdd;
  Representation representation = Representation::kPadded;
  int64_t seeds = 0;
  int64_t passes = 0;
  double pass_fraction = 0;
};

std::vector<AlignmentCell> alignment_experiment(const std::vector<Task>& tasks,
                                                const std::vector<Representation>& representations,
                                                const std::vector<uint64_t>& seeds,
                                                const CellTrainer& train_cell);

// --- report files ------------------------------------------------------------

struct SuiteSummaryRow {
  std::string checkpoint;
  std::string suite;
  int64_t cases = 0;
  int64_t passes = 0;
  double accuracy = 0;
  std::string detail;  // suite-specific, e.g. "k_star=7"
};

void write_suite_csv(const std::string& path, const std::vector<SuiteSummaryRow>& rows);
void write_length_curve_csv(const std::string& path, const std::vector<LengthCurvePoint>& curve);
void write_carry_curve_csv(const std::string& path, const std::vector<CarryCurvePoint>& curve);
void write_verdicts_jsonl(const std::string& path, const std::vector<CaseVerdict>& verdicts);

// Minimal static SVG line chart of (x, y) points, y in [0,1].
void write_line_chart_svg(const std::string& path, const std::string& title,
                          const std::string& x_label, const std::string& y_label,
                          const std::vector<std::pair<double, double>>& points);

}  // namespace ngpu
