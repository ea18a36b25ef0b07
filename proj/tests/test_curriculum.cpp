#include "ngpu/curriculum.hpp"

#include <cmath>

#include "doctest.h"

using namespace ngpu;

TEST_SUITE_BEGIN("curriculum");

TEST_CASE("next_length promotion rule") {
  CurriculumStage stage;
  stage.min_length = 1;
  stage.max_length = 12;
  stage.promotion_threshold = 0.15;
  CHECK(next_length(6, 0.05, stage) == 7);
  CHECK(next_length(6, 0.50, stage) == 6);
  CHECK(next_length(12, 0.01, stage) == 12);  // clamped at the stage maximum
  CHECK_THROWS_AS(next_length(13, 0.01, stage), ContractViolation);
}

TEST_CASE("named base sequences") {
  auto bases_of = [](const CurriculumSchedule& s) {
    std::vector<int> out;
    for (const auto& st : s.stages) out.push_back(st.base);
    return out;
  };
  const auto rep = Representation::kPadded;
  CHECK(bases_of(base_stage_sequence("2-4-10", Task::kMul, 1, 12, 0.15, rep)) ==
        std::vector<int>{2, 4, 10});
  CHECK(bases_of(base_stage_sequence("2-5-10", Task::kMul, 1, 12, 0.15, rep)) ==
        std::vector<int>{2, 5, 10});
  CHECK(bases_of(base_stage_sequence("2-10", Task::kMul, 1, 12, 0.15, rep)) ==
        std::vector<int>{2, 10});
  CHECK(bases_of(base_stage_sequence("direct10", Task::kMul, 1, 12, 0.15, rep)) ==
        std::vector<int>{10});
  CHECK(bases_of(base_stage_sequence("direct2", Task::kAdd, 1, 12, 0.15, rep)) ==
        std::vector<int>{2});
  CHECK_THROWS_AS(base_stage_sequence("3-9-27", Task::kAdd, 1, 12, 0.15, rep), ContractViolation);
  // Every stage carries the shared task settings; the model parameters are
  // not touched by the schedule at all (it never sees them).
  const auto s = base_stage_sequence("2-4-10", Task::kMul, 2, 9, 0.2, rep);
  for (const auto& st : s.stages) {
    CHECK(st.task == Task::kMul);
    CHECK(st.min_length == 2);
    CHECK(st.max_length == 9);
    CHECK(st.promotion_threshold == 0.2);
  }
}

TEST_CASE("operand count sampler") {
  Rng rng(31);
  SUBCASE("n=3 always gives 1") {
    for (int i = 0; i < 100; ++i) CHECK(operand_count_sampler(3, rng) == 1);
  }
  SUBCASE("n=7 is uniform over {1,2,3} within 3 sigma") {
    const int64_t n = 100000;
    std::vector<int64_t> counts(4, 0);
    for (int64_t i = 0; i < n; ++i) ++counts[static_cast<std::size_t>(operand_count_sampler(7, rng))];
    const double p = 1.0 / 3.0;
    const double sigma = std::sqrt(p * (1 - p) / static_cast<double>(n));
    for (int l = 1; l <= 3; ++l) {
      CHECK(std::fabs(static_cast<double>(counts[static_cast<std::size_t>(l)]) / n - p) <=
            3.0 * sigma);
    }
  }
  SUBCASE("n=21 caps at 10") {
    int64_t top = 0;
    for (int i = 0; i < 20000; ++i) top = std::max(top, operand_count_sampler(21, rng));
    CHECK(top == 10);
  }
  CHECK_THROWS_AS(operand_count_sampler(2, rng), ContractViolation);
}

TEST_CASE("curriculum state machine") {
  auto schedule = base_stage_sequence("2-4-10", Task::kAdd, 1, 3, 0.15, Representation::kPadded);

  SUBCASE("length is monotonically nondecreasing within a stage") {
    CurriculumState state(schedule, 2);
    Rng rng(5);
    std::uniform_real_distribution<double> err(0.0, 1.0);
    int64_t last = state.length();
    int64_t last_stage = state.stage_index();
    for (int i = 0; i < 2000 && !state.complete(); ++i) {
      state.observe_frontier_error(err(rng) < 0.5 ? 0.0 : 1.0);
      if (state.stage_index() == last_stage) {
        CHECK(state.length() >= last);
      }
      last = state.length();
      last_stage = state.stage_index();
    }
  }

  SUBCASE("the trajectory is a deterministic function of the error trace") {
    auto run = [&](uint64_t seed) {
      CurriculumState state(schedule, 3);
      Rng rng(seed);
      std::uniform_real_distribution<double> err(0.0, 0.4);
      std::vector<std::pair<int64_t, int64_t>> trajectory;
      for (int i = 0; i < 500; ++i) {
        state.observe_frontier_error(err(rng));
        trajectory.emplace_back(state.stage_index(), state.length());
      }
      return trajectory;
    };
    CHECK(run(9) == run(9));
  }

  SUBCASE("perfect batches walk through every stage and complete") {
    CurriculumState state(schedule, 2);
    std::vector<std::string> kinds;
    for (int i = 0; i < 200 && !state.complete(); ++i) {
      if (auto tr = state.observe_frontier_error(0.0)) {
        kinds.push_back(tr->kind == CurriculumState::Transition::Kind::kLength   ? "length"
                        : tr->kind == CurriculumState::Transition::Kind::kStage ? "stage"
                                                                                : "complete");
      }
    }
    CHECK(state.complete());
    // 3 stages x (2 promotions + completion/stage change).
    CHECK(kinds == std::vector<std::string>{"length", "length", "stage", "length", "length",
                                            "stage", "length", "length", "complete"});
    CHECK(state.stage_index() == 2);
    CHECK(state.length() == 3);  // stays at the final stage maximum
  }

  SUBCASE("stage change resets the length ladder when configured") {
    auto keep = schedule;
    keep.reset_length_per_stage = false;
    CurriculumState reset_state(schedule, 1);
    CurriculumState keep_state(keep, 1);
    for (int i = 0; i < 50; ++i) {
      reset_state.observe_frontier_error(0.0);
      keep_state.observe_frontier_error(0.0);
      if (reset_state.stage_index() == 1) break;
    }
    // After the first stage change: reset goes back to min, keep stays at max.
    CHECK(reset_state.stage_index() == 1);
    CHECK(reset_state.length() == 1);
    CHECK(keep_state.stage_index() == 1);
    CHECK(keep_state.length() == 3);
  }

  SUBCASE("high error holds position forever") {
    CurriculumState state(schedule, 2);
    for (int i = 0; i < 300; ++i) state.observe_frontier_error(0.9);
    CHECK(state.stage_index() == 0);
    CHECK(state.length() == 1);
    CHECK(!state.complete());
    CHECK(state.recent_error() > 0.8);
  }
}

TEST_SUITE_END();
