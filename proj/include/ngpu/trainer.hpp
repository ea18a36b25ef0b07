#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "ngpu/checkpoint.hpp"
#include "ngpu/curriculum.hpp"
#include "ngpu/model.hpp"
#include "ngpu/tasks.hpp"

namespace ngpu {

// Optimization loop: Adam with global-norm clipping, optional decayed
// gradient noise, candidate dropout, parameter-set relaxation with a final
// hard collapse, curriculum-driven batches, and deterministic runs from
// (config, seed).

struct GradNoiseConfig {
  bool enabled = false;  // the paper's released code ships with this off
  double scale = 0.01;   // eta_0
  double decay = 0.55;
};

struct RelaxationSchedule {
  double initial_weight = 1e-4;  // lambda_0
  double growth_factor = 2.0;
  int64_t growth_interval = 2000;  // qualifying steps between growths
  double collapse_threshold = 1.0;  // lambda_max
};

struct EvalCriterion {
  std::vector<int64_t> lengths{24};
  int64_t cases_per_length = 1000;
  double pass_accuracy = 0.99;
};

struct TrainConfig {
  ModelConfig model;
  TaskSpec task;
  std::string curriculum = "direct2";
  int64_t min_length = 1;
  int64_t max_length = 12;
  double promotion_threshold = 0.15;
  bool reset_length_per_stage = true;
  // k_mul only: draw the operand count per batch from the curriculum sampler
  // instead of using task.operand_count.
  bool operand_count_curriculum = false;

  double learning_rate = 1e-3;
  int64_t batch_size = 32;
  int64_t max_steps = 10000;
  double clip_norm = 5.0;
  GradNoiseConfig grad_noise;
  RelaxationSchedule relaxation;
  MemoryMode memory_mode = MemoryMode::kStored;
  // Fraction of batches drawn at the frontier length; the rest revisit a
  // uniform shorter length so early lengths are not forgotten.
  double frontier_fraction = 0.8;
  // The run stops once the schedule is complete and the frontier error EMA
  // is at or below this (the "surpass 99% accuracy" bar), or at max_steps.
  double final_error_target = 0.01;
  bool stop_on_completion = true;

  uint64_t seed = 1;
  std::string output_dir;
  EvalCriterion eval;

  void validate() const;
  CurriculumSchedule schedule() const;
};

struct StepMetrics {
  int64_t step = 0;
  double loss = 0;          // mean cross-entropy + lambda * penalty
  double cross_entropy = 0;
  double penalty = 0;
  double lambda = 0;
  double grad_norm = 0;       // pre-clip global norm
  double grad_norm_post = 0;  // after clipping
  double sequence_error = 0;  // fraction of batch sequences decoded wrong
  int64_t length = 0;
  int64_t base = 0;
  int64_t stage = 0;
  bool frontier = true;
};

struct TransitionEvent {
  int64_t step = 0;
  std::string kind;  // "length", "stage", "schedule_complete", "collapse", "abort"
  int64_t stage_index = 0;
  int64_t length = 0;
  std::string detail;
};

struct RunRecord {
  std::vector<StepMetrics> steps;
  std::vector<TransitionEvent> transitions;
  std::vector<std::string> checkpoints;
  std::string final_checkpoint;
  int64_t total_steps = 0;
  bool schedule_completed = false;
  bool aborted = false;
  std::string abort_reason;
  double wall_seconds = 0;
  double final_recent_error = 1.0;
};

// Relaxation-weight annealing: lambda grows by the schedule's factor every
// growth_interval steps whose training error qualifies; reaching the
// collapse threshold collapses the bank once and freezes lambda.
struct RelaxationState {
  double lambda = 0;
  int64_t qualifying_steps = 0;
  bool collapsed = false;

  explicit RelaxationState(const RelaxationSchedule& schedule)
      : lambda(schedule.initial_weight) {}
  // Returns true when this observation triggered the collapse.
  bool observe(double training_error, double threshold, const RelaxationSchedule& schedule,
               ParameterBank<float>& bank);
};

// Single-example training objective on a tape: mean per-position
// cross-entropy plus lambda times the relaxation penalty when C > 1.
Val loss_op(Tape<float>& tape, Val logits, const std::vector<Symbol>& target,
            ParameterBank<float>& bank, double lambda);

class Trainer {
 public:
  explicit Trainer(TrainConfig config);
  Trainer(TrainConfig config, ParameterBank<float> bank, int64_t start_step);

  // One optimization step on a batch sharing a single input length.
  StepMetrics train_step(const std::vector<Example>& batch, int64_t step);

  // Full curriculum-driven run; writes checkpoints and the event log under
  // config.output_dir when it is set.
  RunRecord run_training();

  ParameterBank<float>& bank() { return bank_; }
  const TrainConfig& config() const { return config_; }
  RelaxationState& relaxation() { return relaxation_; }
  CurriculumState& curriculum() { return curriculum_; }
  int64_t step() const { return step_; }

 private:
  struct AdamSlot {
    std::vector<float> m, v;
  };

  void apply_gradients(int64_t step);
  std::string write_checkpoint(const std::string& tag);

  TrainConfig config_;
  ParameterBank<float> bank_;
  CurriculumState curriculum_;
  RelaxationState relaxation_;
  std::vector<AdamSlot> slots_;
  int64_t step_ = 0;
  int64_t adam_t_ = 0;
  double last_grad_norm_ = 0;
  double last_grad_norm_post_ = 0;
};

struct SeedOutcome {
  uint64_t seed = 0;
  bool passed = false;
  bool failed_to_run = false;
  std::string error;
  double accuracy = 0;  // at the first criterion length
  std::string run_dir;
  int64_t steps = 0;
};

struct SweepResult {
  double pass_fraction = 0;
  std::vector<SeedOutcome> outcomes;
};

// Runs run_training once per seed (independently; optionally in parallel)
// and evaluates the pass criterion on held-out data at the criterion
// lengths. Individual seed failures are recorded and the sweep continues.
// A custom runner replaces the train-and-evaluate body (stubs in tests).
using SeedRunner = std::function<SeedOutcome(const TrainConfig&)>;

SweepResult multi_seed_sweep(const TrainConfig& config, const std::vector<uint64_t>& seeds,
                             int64_t parallelism = 1,
                             const std::function<void(const SeedOutcome&)>& on_seed_done = {},
                             const SeedRunner& runner = {});

// The default seed runner: train, then score held-out accuracy at the
// criterion lengths (the shared held-out set is keyed by criterion_seed).
SeedOutcome train_and_score_seed(const TrainConfig& config, uint64_t criterion_seed);

}  // namespace ngpu
