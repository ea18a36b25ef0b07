#include "ngpu/curriculum.hpp"

#include <algorithm>

namespace ngpu {

void CurriculumStage::validate() const {
  require(base >= 2 && base <= 10, "CurriculumStage: base must be in [2,10]");
  require(min_length >= 1 && min_length <= max_length,
          "CurriculumStage: need 1 <= min_length <= max_length");
  require(promotion_threshold > 0.0 && promotion_threshold < 1.0,
          "CurriculumStage: promotion threshold must be in (0,1)");
}

void CurriculumSchedule::validate() const {
  require(!stages.empty(), "CurriculumSchedule: needs at least one stage");
  for (const CurriculumStage& s : stages) s.validate();
}

int64_t next_length(int64_t current_length, double recent_error, const CurriculumStage& stage) {
  stage.validate();
  require(current_length >= stage.min_length && current_length <= stage.max_length,
          "next_length: current length outside stage bounds");
  if (recent_error < stage.promotion_threshold) {
    return std::min(current_length + 1, stage.max_length);
  }
  return current_length;
}

CurriculumSchedule base_stage_sequence(const std::string& name, Task task, int64_t min_length,
                                       int64_t max_length, double promotion_threshold,
                                       Representation representation) {
  std::vector<int> bases;
  if (name == "direct10") bases = {10};
  else if (name == "2-10") bases = {2, 10};
  else if (name == "2-5-10") bases = {2, 5, 10};
  else if (name == "2-4-10") bases = {2, 4, 10};
  else if (name.rfind("direct", 0) == 0 && name.size() > 6) {
    const int base = std::stoi(name.substr(6));
    require(base >= 2 && base <= 10, "base_stage_sequence: base must be in [2,10]: " + name);
    bases = {base};
  } else {
    throw ContractViolation("base_stage_sequence: unknown curriculum '" + name +
                            "' (expected direct10, 2-10, 2-5-10, 2-4-10 or direct<b>)");
  }
  CurriculumSchedule schedule;
  for (int base : bases) {
    CurriculumStage stage;
    stage.base = base;
    stage.task = task;
    stage.min_length = min_length;
    stage.max_length = max_length;
    stage.promotion_threshold = promotion_threshold;
    stage.representation = representation;
    schedule.stages.push_back(stage);
  }
  schedule.validate();
  return schedule;
}

int64_t operand_count_sampler(int64_t digits_per_operand, Rng& rng) {
  require(digits_per_operand >= 3, "operand_count_sampler: needs at least 3 digits per operand");
  const int64_t top = (digits_per_operand - 1) / 2;
  std::uniform_int_distribution<int64_t> dist(1, top);
  return dist(rng);
}

CurriculumState::CurriculumState(CurriculumSchedule schedule, int64_t min_frontier_batches)
    : schedule_(std::move(schedule)), min_frontier_batches_(min_frontier_batches) {
  schedule_.validate();
  require(min_frontier_batches_ >= 1, "CurriculumState: min_frontier_batches must be >= 1");
  length_ = schedule_.stages.front().min_length;
}

const CurriculumStage& CurriculumState::stage() const {
  return schedule_.stages[static_cast<std::size_t>(stage_index_)];
}

double CurriculumState::recent_error() const { return ema_.value_or(1.0); }

std::optional<CurriculumState::Transition> CurriculumState::observe_frontier_error(
    double sequence_error) {
  constexpr double kDecay = 0.99;
  ema_ = ema_ ? kDecay * *ema_ + (1.0 - kDecay) * sequence_error : sequence_error;
  ++batches_at_length_;
  if (complete_ || batches_at_length_ < min_frontier_batches_) return std::nullopt;

  const CurriculumStage& st = stage();
  const int64_t grown = next_length(length_, *ema_, st);
  if (grown > length_) {
    length_ = grown;
    batches_at_length_ = 0;
    ema_.reset();
    return Transition{Transition::Kind::kLength, stage_index_, length_};
  }
  if (length_ == st.max_length && *ema_ < st.promotion_threshold) {
    if (stage_index_ + 1 < static_cast<int64_t>(schedule_.stages.size())) {
      ++stage_index_;
      if (schedule_.reset_length_per_stage) {
        length_ = stage().min_length;
      } else {
        length_ = std::clamp(length_, stage().min_length, stage().max_length);
      }
      batches_at_length_ = 0;
      ema_.reset();
      return Transition{Transition::Kind::kStage, stage_index_, length_};
    }
    complete_ = true;
    return Transition{Transition::Kind::kComplete, stage_index_, length_};
  }
  return std::nullopt;
}

}  // namespace ngpu
