#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "ngpu/rng.hpp"
#include "ngpu/tasks.hpp"

namespace ngpu {

// Stage and length scheduling: example length grows with accuracy inside a
// stage, stages march through bases (e.g. 2 -> 4 -> 10) with model
// parameters carried over unchanged.

struct CurriculumStage {
  int base = 2;
  Task task = Task::kAdd;
  int64_t min_length = 1;
  int64_t max_length = 12;
  double promotion_threshold = 0.15;  // sequence error below this promotes
  Representation representation = Representation::kPadded;

  void validate() const;
};

struct CurriculumSchedule {
  std::vector<CurriculumStage> stages;
  // Whether a new base restarts the length ladder at min_length.
  bool reset_length_per_stage = true;

  void validate() const;
};

// Pure promotion rule: grow by one when the recent error beats the
// threshold, hold otherwise, never past the stage maximum.
int64_t next_length(int64_t current_length, double recent_error, const CurriculumStage& stage);

// Named base sequences: "direct10", "2-10", "2-5-10", "2-4-10" (and
// "direct<b>" for any base). Every stage shares the given task, lengths,
// threshold and representation.
CurriculumSchedule base_stage_sequence(const std::string& name, Task task, int64_t min_length,
                                       int64_t max_length, double promotion_threshold,
                                       Representation representation);

// Operand count for multi-operand multiplication: uniform on
// {1, ..., floor((n-1)/2)} for n digits per operand.
int64_t operand_count_sampler(int64_t digits_per_operand, Rng& rng);

// Tracks position in the schedule during a run. Feed it the sequence error
// of each batch trained at the current (frontier) length; the recent error
// is an EMA (decay 0.99) seeded on the first frontier batch after every
// length or stage change, and promotion waits for a minimum number of
// frontier batches so one lucky batch cannot skip a length.
class CurriculumState {
 public:
  struct Transition {
    enum class Kind { kLength, kStage, kComplete };
    Kind kind;
    int64_t stage_index;
    int64_t length;
  };

  explicit CurriculumState(CurriculumSchedule schedule, int64_t min_frontier_batches = 25);

  const CurriculumStage& stage() const;
  int64_t stage_index() const { return stage_index_; }
  int64_t length() const { return length_; }
  bool complete() const { return complete_; }
  // EMA of frontier-batch sequence error; 1 until the first observation.
  double recent_error() const;

  std::optional<Transition> observe_frontier_error(double sequence_error);

 private:
  CurriculumSchedule schedule_;
  int64_t min_frontier_batches_;
  int64_t stage_index_ = 0;
  int64_t length_ = 1;
  bool complete_ = false;
  std::optional<double> ema_;
  int64_t batches_at_length_ = 0;
};

}  // namespace ngpu
