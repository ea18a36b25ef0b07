#include "ngpu/trainer.hpp"

#include <atomic>
#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <mutex>
#include <thread>

#include "json.hpp"
#include "ngpu/config.hpp"
#include "ngpu/evaluator.hpp"
#include "ngpu/rng.hpp"

namespace ngpu {

void TrainConfig::validate() const {
  model.validate();
  task.validate();
  require(learning_rate >= 0.0, "TrainConfig: learning rate must be >= 0");
  require(batch_size >= 1, "TrainConfig: batch size must be >= 1");
  require(max_steps >= 0, "TrainConfig: max steps must be >= 0");
  require(clip_norm > 0.0, "TrainConfig: clip norm must be > 0");
  require(min_length >= 1 && min_length <= max_length,
          "TrainConfig: need 1 <= min_length <= max_length");
  require(frontier_fraction >= 0.0 && frontier_fraction <= 1.0,
          "TrainConfig: frontier_fraction must be in [0,1]");
  require(promotion_threshold > 0.0 && promotion_threshold < 1.0,
          "TrainConfig: promotion threshold must be in (0,1)");
  require(final_error_target >= 0.0 && final_error_target < 1.0,
          "TrainConfig: final_error_target must be in [0,1)");
  require(relaxation.initial_weight >= 0.0 && relaxation.growth_factor >= 1.0 &&
              relaxation.growth_interval >= 1 && relaxation.collapse_threshold > 0.0,
          "TrainConfig: bad relaxation schedule");
  require(grad_noise.scale >= 0.0 && grad_noise.decay >= 0.0, "TrainConfig: bad gradient noise");
  const int64_t longest_frame = 2 * max_length + 1 >= task.operand_count * (max_length + 1)
                                    ? 2 * max_length + 1
                                    : task.operand_count * (max_length + 1);
  require(model.max_length >= longest_frame,
          "TrainConfig: model.max_length is smaller than the longest training frame");
}

CurriculumSchedule TrainConfig::schedule() const {
  CurriculumSchedule s = base_stage_sequence(curriculum, task.task, min_length, max_length,
                                             promotion_threshold, task.representation);
  s.reset_length_per_stage = reset_length_per_stage;
  return s;
}

bool RelaxationState::observe(double training_error, double threshold,
                              const RelaxationSchedule& schedule, ParameterBank<float>& bank) {
  if (collapsed || bank.config.param_sets <= 1) return false;
  if (training_error >= threshold) return false;
  ++qualifying_steps;
  if (qualifying_steps % schedule.growth_interval != 0) return false;
  lambda *= schedule.growth_factor;
  if (lambda >= schedule.collapse_threshold) {
    collapse_param_sets(bank);
    collapsed = true;
    return true;
  }
  return false;
}

Val loss_op(Tape<float>& tape, Val logits, const std::vector<Symbol>& target,
            ParameterBank<float>& bank, double lambda) {
  Val ce = tape.mean_cross_entropy(logits, target);
  if (bank.config.param_sets > 1) {
    Val penalty = relaxation_penalty_op(tape, bank);
    ce = tape.add(ce, tape.affine(penalty, static_cast<float>(lambda), 0.0f));
  }
  return ce;
}

Trainer::Trainer(TrainConfig config)
    : Trainer(std::move(config), ParameterBank<float>{}, 0) {
  bank_ = ParameterBank<float>::random_init(config_.model, config_.seed);
  slots_.assign(bank_.parameters().size(), {});
}

Trainer::Trainer(TrainConfig config, ParameterBank<float> bank, int64_t start_step)
    : config_(std::move(config)),
      bank_(std::move(bank)),
      curriculum_(config_.schedule()),
      relaxation_(config_.relaxation),
      step_(start_step) {
  config_.validate();
  if (!bank_.sets.empty()) {
    require(bank_.config == config_.model, "Trainer: checkpoint model config differs from run config");
    slots_.assign(bank_.parameters().size(), {});
  }
}

StepMetrics Trainer::train_step(const std::vector<Example>& batch, int64_t step) {
  require(!batch.empty(), "train_step: batch must not be empty");
  const std::size_t frame = batch.front().input.size();
  for (const Example& ex : batch) {
    require(ex.input.size() == frame, "train_step: batch examples must share one input length");
  }
  bank_.zero_grads();

  const double inv_batch = 1.0 / static_cast<double>(batch.size());
  double ce_total = 0.0;
  int64_t wrong = 0;
  for (std::size_t b = 0; b < batch.size(); ++b) {
    const Example& ex = batch[b];
    Tape<float> tape(config_.memory_mode);
    const uint64_t mask_seed = derive_seed(config_.seed, stream::kDropout, static_cast<uint64_t>(step), b);
    Val logits = forward(tape, bank_, ex.input, ex.representation, RunMode::kTrain, mask_seed,
                         nullptr, ex.second_row.empty() ? nullptr : &ex.second_row);
    Val ce = tape.mean_cross_entropy(logits, ex.target);
    ce_total += static_cast<double>(tape.value(ce)[0]);
    if (decode(tape.value(logits), bank_.config.alphabet_size) != ex.target) ++wrong;
    tape.backward(ce, static_cast<float>(inv_batch));
  }
  ce_total *= inv_batch;

  double penalty = 0.0;
  const double lambda = relaxation_.lambda;
  if (bank_.config.param_sets > 1 && !relaxation_.collapsed) {
    Tape<float> tape;
    Val p = relaxation_penalty_op(tape, bank_);
    penalty = static_cast<double>(tape.value(p)[0]);
    tape.backward(p, static_cast<float>(lambda));
  }

  apply_gradients(step);

  StepMetrics metrics;
  metrics.step = step;
  metrics.cross_entropy = ce_total;
  metrics.penalty = penalty;
  metrics.lambda = lambda;
  metrics.loss = ce_total + lambda * penalty;
  metrics.sequence_error = static_cast<double>(wrong) / static_cast<double>(batch.size());
  metrics.grad_norm = last_grad_norm_;
  metrics.grad_norm_post = last_grad_norm_post_;
  if (!std::isfinite(metrics.loss)) {
    throw NumericError("train_step: non-finite loss at step " + std::to_string(step));
  }
  return metrics;
}

void Trainer::apply_gradients(int64_t step) {
  auto params = bank_.parameters();

  double sq = 0.0;
  for (Tensor<float>* p : params) {
    for (float g : *p->grad) sq += static_cast<double>(g) * static_cast<double>(g);
  }
  const double norm = std::sqrt(sq);
  last_grad_norm_ = norm;
  if (norm > config_.clip_norm) {
    const float scale = static_cast<float>(config_.clip_norm / norm);
    for (Tensor<float>* p : params) {
      for (float& g : *p->grad) g *= scale;
    }
  }
  double sq_post = 0.0;
  for (Tensor<float>* p : params) {
    for (float g : *p->grad) sq_post += static_cast<double>(g) * static_cast<double>(g);
  }
  last_grad_norm_post_ = std::sqrt(sq_post);

  if (config_.grad_noise.enabled) {
    Rng rng(derive_seed(config_.seed, stream::kGradNoise, static_cast<uint64_t>(step)));
    const double sigma =
        config_.grad_noise.scale / std::pow(1.0 + static_cast<double>(step), config_.grad_noise.decay);
    std::normal_distribution<double> noise(0.0, sigma);
    for (Tensor<float>* p : params) {
      for (float& g : *p->grad) g += static_cast<float>(noise(rng));
    }
  }

  constexpr double kBeta1 = 0.9, kBeta2 = 0.999, kEps = 1e-8;
  ++adam_t_;
  const double correction1 = 1.0 - std::pow(kBeta1, static_cast<double>(adam_t_));
  const double correction2 = 1.0 - std::pow(kBeta2, static_cast<double>(adam_t_));
  for (std::size_t i = 0; i < params.size(); ++i) {
    Tensor<float>* p = params[i];
    AdamSlot& slot = slots_[i];
    if (slot.m.empty()) {
      slot.m.assign(p->data.size(), 0.0f);
      slot.v.assign(p->data.size(), 0.0f);
    }
    const auto& g = *p->grad;
    for (std::size_t k = 0; k < p->data.size(); ++k) {
      slot.m[k] = static_cast<float>(kBeta1 * slot.m[k] + (1.0 - kBeta1) * g[k]);
      slot.v[k] = static_cast<float>(kBeta2 * slot.v[k] + (1.0 - kBeta2) * g[k] * g[k]);
      const double mhat = slot.m[k] / correction1;
      const double vhat = slot.v[k] / correction2;
      p->data[k] -= static_cast<float>(config_.learning_rate * mhat / (std::sqrt(vhat) + kEps));
    }
  }
}

std::string Trainer::write_checkpoint(const std::string& tag) {
  if (config_.output_dir.empty()) return "";
  const std::string path = config_.output_dir + "/checkpoint-" + tag + ".ckpt";
  save_checkpoint(path, bank_, RngState{config_.seed, step_});
  return path;
}

RunRecord Trainer::run_training() {
  const auto t0 = std::chrono::steady_clock::now();
  RunRecord record;
  std::ofstream events;
  if (!config_.output_dir.empty()) {
    std::filesystem::create_directories(config_.output_dir);
    write_train_config(config_.output_dir + "/config.json", config_);
    events.open(config_.output_dir + "/events.jsonl");
  }
  auto log_event = [&](const nlohmann::json& j) {
    if (events.is_open()) events << j.dump() << "\n";
  };
  auto log_transition = [&](TransitionEvent ev) {
    log_event({{"type", "transition"},
               {"step", ev.step},
               {"kind", ev.kind},
               {"stage", ev.stage_index},
               {"length", ev.length},
               {"detail", ev.detail}});
    record.transitions.push_back(std::move(ev));
  };

  const std::string init_ckpt = write_checkpoint("init");
  if (!init_ckpt.empty()) record.checkpoints.push_back(init_ckpt);
  record.final_checkpoint = init_ckpt;

  const int64_t start_step = step_;
  try {
    for (; step_ < start_step + config_.max_steps; ++step_) {
      if (config_.stop_on_completion && curriculum_.complete() &&
          curriculum_.recent_error() <= config_.final_error_target) {
        record.schedule_completed = true;
        break;
      }
      const CurriculumStage& stage = curriculum_.stage();
      Rng step_rng(derive_seed(config_.seed, stream::kData, static_cast<uint64_t>(step_)));
      std::uniform_real_distribution<double> unit(0.0, 1.0);
      const bool at_min = curriculum_.length() == stage.min_length;
      const bool frontier = at_min || unit(step_rng) < config_.frontier_fraction;
      int64_t length = curriculum_.length();
      if (!frontier) {
        std::uniform_int_distribution<int64_t> pick(stage.min_length, curriculum_.length());
        length = pick(step_rng);
      }
      TaskSpec spec;
      spec.task = stage.task;
      spec.base = stage.base;
      spec.representation = stage.representation;
      spec.digits = length;
      spec.operand_count = config_.task.operand_count;
      if (spec.task == Task::kKMul && config_.operand_count_curriculum) {
        spec.operand_count = length >= 3 ? operand_count_sampler(length, step_rng) : 1;
      }
      std::vector<Example> batch;
      batch.reserve(static_cast<std::size_t>(config_.batch_size));
      for (int64_t b = 0; b < config_.batch_size; ++b) {
        batch.push_back(generate_example(spec, step_rng));
      }

      StepMetrics metrics = train_step(batch, step_);
      metrics.length = length;
      metrics.base = stage.base;
      metrics.stage = curriculum_.stage_index();
      metrics.frontier = frontier;

      if (relaxation_.observe(curriculum_.recent_error(), config_.promotion_threshold,
                              config_.relaxation, bank_)) {
        log_transition({step_, "collapse", curriculum_.stage_index(), curriculum_.length(),
                        "parameter sets collapsed to their mean"});
      }
      if (frontier) {
        if (auto tr = curriculum_.observe_frontier_error(metrics.sequence_error)) {
          const char* kind = tr->kind == CurriculumState::Transition::Kind::kLength ? "length"
                             : tr->kind == CurriculumState::Transition::Kind::kStage
                                 ? "stage"
                                 : "schedule_complete";
          log_transition({step_, kind, tr->stage_index, tr->length, ""});
          if (tr->kind != CurriculumState::Transition::Kind::kLength) {
            const std::string ckpt = write_checkpoint("step" + std::to_string(step_));
            if (!ckpt.empty()) record.checkpoints.push_back(ckpt);
          }
        }
      }

      log_event({{"type", "step"},
                 {"step", metrics.step},
                 {"loss", metrics.loss},
                 {"cross_entropy", metrics.cross_entropy},
                 {"penalty", metrics.penalty},
                 {"lambda", metrics.lambda},
                 {"grad_norm", metrics.grad_norm},
                 {"sequence_error", metrics.sequence_error},
                 {"length", metrics.length},
                 {"base", metrics.base},
                 {"stage", metrics.stage},
                 {"frontier", metrics.frontier}});
      record.steps.push_back(metrics);
    }
  } catch (const NumericError& e) {
    record.aborted = true;
    record.abort_reason = e.what();
    log_transition({step_, "abort", curriculum_.stage_index(), curriculum_.length(), e.what()});
  }

  if (!record.aborted && curriculum_.complete() &&
      curriculum_.recent_error() <= config_.final_error_target) {
    record.schedule_completed = true;
  }
  record.total_steps = step_ - start_step;
  record.final_recent_error = curriculum_.recent_error();
  if (config_.max_steps > 0 && !record.aborted) {
    const std::string final_ckpt = write_checkpoint("final");
    if (!final_ckpt.empty()) {
      record.checkpoints.push_back(final_ckpt);
      record.final_checkpoint = final_ckpt;
    }
  }
  record.wall_seconds =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  if (events.is_open()) {
    log_event({{"type", "summary"},
               {"total_steps", record.total_steps},
               {"schedule_completed", record.schedule_completed},
               {"aborted", record.aborted},
               {"final_recent_error", record.final_recent_error},
               {"wall_seconds", record.wall_seconds}});
  }
  return record;
}

SeedOutcome train_and_score_seed(const TrainConfig& config, uint64_t criterion_seed) {
  SeedOutcome out;
  out.seed = config.seed;
  out.run_dir = config.output_dir;
  Trainer trainer(config);
  RunRecord record = trainer.run_training();
  out.steps = record.total_steps;
  if (record.aborted) {
    out.failed_to_run = true;
    out.error = record.abort_reason;
    return out;
  }
  Predictor predict = model_predictor(trainer.bank());
  bool all_pass = true;
  bool first = true;
  for (int64_t length : config.eval.lengths) {
    TaskSpec spec = config.task;
    spec.digits = length;
    const auto examples =
        make_batch(spec, config.eval.cases_per_length,
                   derive_seed(criterion_seed, stream::kEvalUniform, static_cast<uint64_t>(length)));
    const double acc = sequence_accuracy(predict, examples);
    if (first) {
      out.accuracy = acc;
      first = false;
    }
    all_pass = all_pass && acc >= config.eval.pass_accuracy;
  }
  out.passed = all_pass;
  return out;
}

SweepResult multi_seed_sweep(const TrainConfig& config, const std::vector<uint64_t>& seeds,
                             int64_t parallelism,
                             const std::function<void(const SeedOutcome&)>& on_seed_done,
                             const SeedRunner& runner) {
  require(!seeds.empty(), "multi_seed_sweep: needs at least one seed");
  require(parallelism >= 1, "multi_seed_sweep: parallelism must be >= 1");
  std::vector<SeedOutcome> outcomes(seeds.size());

  std::mutex done_mutex;
  auto run_one = [&](std::size_t idx) {
    SeedOutcome out;
    out.seed = seeds[idx];
    TrainConfig c = config;
    c.seed = seeds[idx];
    if (!config.output_dir.empty()) {
      c.output_dir = config.output_dir + "/seed" + std::to_string(seeds[idx]);
    }
    out.run_dir = c.output_dir;
    try {
      // Held-out criterion data is shared across seeds: keyed by the sweep
      // config's own seed, not the per-run seed.
      out = runner ? runner(c) : train_and_score_seed(c, config.seed);
      out.seed = seeds[idx];
    } catch (const std::exception& e) {
      out.failed_to_run = true;
      out.error = e.what();
    }
    outcomes[idx] = out;
    if (on_seed_done) {
      std::lock_guard<std::mutex> lock(done_mutex);
      on_seed_done(outcomes[idx]);
    }
  };

  if (parallelism == 1) {
    for (std::size_t i = 0; i < seeds.size(); ++i) run_one(i);
  } else {
    std::atomic<std::size_t> next{0};
    auto worker = [&]() {
      while (true) {
        const std::size_t i = next.fetch_add(1);
        if (i >= seeds.size()) return;
        run_one(i);
      }
    };
    std::vector<std::thread> pool;
    const std::size_t n = std::min<std::size_t>(static_cast<std::size_t>(parallelism), seeds.size());
    pool.reserve(n);
    for (std::size_t i = 0; i < n; ++i) pool.emplace_back(worker);
    for (auto& t : pool) t.join();
  }

  SweepResult result;
  result.outcomes = std::move(outcomes);
  int64_t passed = 0;
  for (const SeedOutcome& o : result.outcomes) passed += o.passed ? 1 : 0;
  result.pass_fraction = static_cast<double>(passed) / static_cast<double>(seeds.size());
  return result;
}

}  // namespace ngpu
