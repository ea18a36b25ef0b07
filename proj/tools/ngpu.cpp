// Command-line surface: gen / verify / train / eval / sweep / report.
// Exit codes: 0 success, 2 config or usage error, 3 numeric abort,
// 4 partial sweep failure, 1 anything else.

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>

#include "CLI11.hpp"
#include "json.hpp"
#include "ngpu/checkpoint.hpp"
#include "ngpu/config.hpp"
#include "ngpu/evaluator.hpp"
#include "ngpu/tasks.hpp"
#include "ngpu/trainer.hpp"

namespace {

using namespace ngpu;

constexpr int kExitOk = 0;
constexpr int kExitError = 1;
constexpr int kExitConfig = 2;
constexpr int kExitNumeric = 3;
constexpr int kExitPartialSweep = 4;

std::string output_root() {
  const char* env = std::getenv("NGPU_OUTPUT_ROOT");
  return env && *env ? env : "runs";
}

Predictor make_predictor(const std::string& kind, ParameterBank<float>* bank) {
  if (kind == "model") {
    require(bank != nullptr, "--predictor model needs --checkpoint");
    return model_predictor(*bank);
  }
  if (kind == "oracle") return oracle_predictor();
  if (kind.rfind("constant:", 0) == 0 && kind.size() == 10) {
    return constant_predictor(char_to_symbol(kind[9]));
  }
  throw ContractViolation("unknown predictor '" + kind +
                          "' (expected model, oracle or constant:<symbol>)");
}

int cmd_gen(const std::string& task, int base, int64_t digits, int64_t count,
            const std::string& representation, int64_t operands, uint64_t seed,
            const std::string& out_path) {
  TaskSpec spec;
  spec.task = task_from_name(task);
  spec.base = base;
  spec.digits = digits;
  spec.representation = representation_from_name(representation);
  spec.operand_count = operands;
  spec.validate();
  const auto examples = make_batch(spec, count, seed);
  for (const Example& ex : examples) {
    if (!verify_example(ex)) throw std::logic_error("generated example failed its own oracle");
  }
  if (const auto dir = std::filesystem::path(out_path).parent_path(); !dir.empty()) {
    std::filesystem::create_directories(dir);
  }
  write_dataset(out_path, examples);
  std::cout << "wrote " << examples.size() << " examples to " << out_path
            << " (oracle-verified, target checksum " << std::hex << std::setw(16)
            << std::setfill('0') << dataset_checksum(examples) << std::dec << ")\n";
  return kExitOk;
}

int cmd_verify(const std::string& data_path) {
  const auto examples = read_dataset(data_path);
  int64_t ok = 0;
  for (const Example& ex : examples) ok += verify_example(ex) ? 1 : 0;
  std::cout << "verified " << ok << "/" << examples.size() << " examples against the exact oracle"
            << (examples.empty() ? " (empty dataset)" : "") << "\n";
  return ok == static_cast<int64_t>(examples.size()) ? kExitOk : kExitError;
}

int cmd_train(const std::string& config_path, const std::string& resume_path) {
  TrainConfig config = load_train_config(config_path);
  if (config.output_dir.empty()) {
    config.output_dir = output_root() + "/run-seed" + std::to_string(config.seed);
  }
  std::unique_ptr<Trainer> trainer;
  if (!resume_path.empty()) {
    Checkpoint ckpt = load_checkpoint(resume_path);
    trainer = std::make_unique<Trainer>(config, std::move(ckpt.bank), ckpt.rng.step);
  } else {
    trainer = std::make_unique<Trainer>(config);
  }
  const RunRecord record = trainer->run_training();
  std::ofstream summary(config.output_dir + "/summary.json");
  summary << nlohmann::json{{"total_steps", record.total_steps},
                            {"schedule_completed", record.schedule_completed},
                            {"aborted", record.aborted},
                            {"abort_reason", record.abort_reason},
                            {"final_recent_error", record.final_recent_error},
                            {"final_checkpoint", record.final_checkpoint},
                            {"wall_seconds", record.wall_seconds}}
                 .dump(2)
          << "\n";
  std::cout << "run dir: " << config.output_dir << "\n"
            << "steps: " << record.total_steps
            << ", schedule completed: " << (record.schedule_completed ? "yes" : "no")
            << ", final frontier error: " << record.final_recent_error << "\n";
  if (record.aborted) {
    std::cerr << "aborted: " << record.abort_reason << "\n";
    return kExitNumeric;
  }
  std::cout << "final checkpoint: " << record.final_checkpoint << "\n";
  return kExitOk;
}

int cmd_eval(const std::string& checkpoint_path, const std::string& suite,
             const std::string& predictor_kind, const std::string& out_dir, const std::string& task,
             int base, const std::string& representation, std::vector<int64_t> lengths,
             int64_t cases, int64_t total_digits, int64_t max_k, int64_t digit_width,
             uint64_t seed) {
  std::optional<Checkpoint> ckpt;
  ParameterBank<float>* bank = nullptr;
  if (!checkpoint_path.empty()) {
    ckpt = load_checkpoint(checkpoint_path);
    bank = &ckpt->bank;
  }
  const Predictor predict = make_predictor(predictor_kind, bank);
  std::filesystem::create_directories(out_dir);
  const std::string label = checkpoint_path.empty() ? predictor_kind : checkpoint_path;
  std::vector<SuiteSummaryRow> rows;

  if (suite == "uniform") {
    TaskSpec spec;
    spec.task = task_from_name(task);
    spec.base = base;
    spec.representation = representation_from_name(representation);
    const auto curve = length_generalization_curve(predict, spec, lengths, cases, seed);
    write_length_curve_csv(out_dir + "/length_curve.csv", curve);
    for (const auto& p : curve) {
      rows.push_back({label, "uniform", p.cases, static_cast<int64_t>(p.accuracy * p.cases + 0.5),
                      p.accuracy, "length=" + std::to_string(p.length)});
      std::cout << "length " << p.length << ": accuracy " << p.accuracy << " (" << p.cases
                << " cases)\n";
    }
  } else if (suite == "carry") {
    const auto result = carry_threshold(predict, base, total_digits, max_k, cases, seed);
    write_carry_curve_csv(out_dir + "/carry_curve.csv", result.curve);
    const std::string detail =
        result.threshold ? "k_star=" + std::to_string(*result.threshold) : "k_star=none";
    int64_t total = 0, passes = 0;
    for (const auto& p : result.curve) {
      total += p.cases;
      passes += static_cast<int64_t>((1.0 - p.error_rate) * p.cases + 0.5);
    }
    rows.push_back({label, "carry", total, passes,
                    total ? static_cast<double>(passes) / total : 0.0, detail});
    std::cout << "carry threshold: "
              << (result.threshold ? std::to_string(*result.threshold) : "none (never crossed 50%)")
              << "\n";
  } else if (suite == "structured") {
    const auto report = structured_mul_report(predict, base, digit_width);
    write_verdicts_jsonl(out_dir + "/structured_verdicts.jsonl", report.verdicts);
    for (const auto& fam : report.families) {
      rows.push_back({label, "structured:" + fam.family, fam.cases, fam.passes,
                      static_cast<double>(fam.passes) / fam.cases, ""});
      std::cout << fam.family << ": " << fam.passes << "/" << fam.cases << "\n";
    }
    rows.push_back({label, "structured:all", report.cases, report.passes,
                    static_cast<double>(report.passes) / report.cases,
                    "largest_passing_repunit=" + std::to_string(report.largest_passing_repunit)});
    std::cout << "total: " << report.passes << "/" << report.cases
              << ", largest passing repunit run: " << report.largest_passing_repunit << "\n";
  } else {
    throw ContractViolation("unknown suite '" + suite +
                            "' (valid suites: uniform, carry, structured, alignment)");
  }
  write_suite_csv(out_dir + "/suites.csv", rows);
  std::cout << "reports in " << out_dir << "\n";
  return kExitOk;
}

int cmd_eval_alignment(const std::string& config_path, const std::string& out_dir,
                       int64_t num_seeds) {
  // Trains one small model per (task, representation, seed) cell with an
  // identical budget, then compares pass fractions.
  TrainConfig base_config = load_train_config(config_path);
  std::filesystem::create_directories(out_dir);
  std::vector<uint64_t> seeds;
  for (int64_t s = 0; s < num_seeds; ++s) seeds.push_back(base_config.seed + static_cast<uint64_t>(s));
  const CellTrainer cell = [&](Task task, Representation rep, uint64_t seed) {
    TrainConfig c = base_config;
    c.task.task = task;
    c.task.representation = rep;
    c.curriculum = "direct" + std::to_string(c.task.base);
    c.seed = seed;
    c.output_dir.clear();  // cells are scored, not archived
    Trainer trainer(c);
    const RunRecord record = trainer.run_training();
    if (record.aborted) return false;
    Predictor predict = model_predictor(trainer.bank());
    for (int64_t length : c.eval.lengths) {
      TaskSpec spec = c.task;
      spec.digits = length;
      const auto examples =
          make_batch(spec, c.eval.cases_per_length,
                     derive_seed(base_config.seed, stream::kEvalUniform,
                                 static_cast<uint64_t>(length)));
      if (sequence_accuracy(predict, examples) < c.eval.pass_accuracy) return false;
    }
    return true;
  };
  const auto cells = alignment_experiment({Task::kAdd, Task::kMul},
                                          {Representation::kPadded, Representation::kUnpadded,
                                           Representation::kAligned},
                                          seeds, cell);
  std::vector<SuiteSummaryRow> rows;
  for (const auto& c : cells) {
    rows.push_back({config_path,
                    std::string("alignment:") + task_name(c.task) + ":" +
                        representation_name(c.representation),
                    c.seeds, c.passes, c.pass_fraction, ""});
    std::cout << task_name(c.task) << " / " << representation_name(c.representation) << ": "
              << c.passes << "/" << c.seeds << " seeds passed\n";
  }
  write_suite_csv(out_dir + "/suites.csv", rows);
  std::cout << "reports in " << out_dir << "\n";
  return kExitOk;
}

int cmd_sweep(const std::string& config_path, int64_t num_seeds, uint64_t first_seed,
              int64_t parallelism, const std::string& out_dir) {
  TrainConfig config = load_train_config(config_path);
  config.output_dir = out_dir.empty()
                          ? (config.output_dir.empty()
                                 ? output_root() + "/sweep-seed" + std::to_string(first_seed)
                                 : config.output_dir)
                          : out_dir;
  std::vector<uint64_t> seeds;
  for (int64_t i = 0; i < num_seeds; ++i) seeds.push_back(first_seed + static_cast<uint64_t>(i));
  const SweepResult result = multi_seed_sweep(config, seeds, parallelism,
                                              [](const SeedOutcome& o) {
                                                std::cout << "seed " << o.seed << ": "
                                                          << (o.failed_to_run
                                                                  ? "failed (" + o.error + ")"
                                                                  : o.passed ? "pass" : "fail")
                                                          << ", accuracy " << o.accuracy << "\n";
                                              });
  std::filesystem::create_directories(config.output_dir);
  std::ofstream csv(config.output_dir + "/sweep.csv");
  csv << "seed,passed,failed_to_run,accuracy,steps,run_dir,error\n";
  for (const auto& o : result.outcomes) {
    csv << o.seed << "," << (o.passed ? 1 : 0) << "," << (o.failed_to_run ? 1 : 0) << ","
        << o.accuracy << "," << o.steps << "," << o.run_dir << ",\"" << o.error << "\"\n";
  }
  std::cout << "pass fraction: " << result.pass_fraction << " (" << seeds.size() << " seeds), "
            << "aggregate: " << config.output_dir << "/sweep.csv\n";
  for (const auto& o : result.outcomes) {
    if (o.failed_to_run) return kExitPartialSweep;
  }
  return kExitOk;
}

int cmd_report(const std::string& length_csv, const std::string& carry_csv,
               const std::string& out_dir) {
  std::filesystem::create_directories(out_dir);
  auto read_points = [](const std::string& path, bool err_col) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot open " + path);
    std::string line;
    std::getline(in, line);  // header
    std::vector<std::pair<double, double>> pts;
    while (std::getline(in, line)) {
      if (line.empty()) continue;
      double x = 0, y = 0;
      long cases = 0;
      if (std::sscanf(line.c_str(), "%lf,%ld,%lf", &x, &cases, &y) == 3) pts.push_back({x, y});
    }
    (void)err_col;
    return pts;
  };
  bool wrote = false;
  if (!length_csv.empty()) {
    write_line_chart_svg(out_dir + "/accuracy_vs_length.svg", "Sequence accuracy vs length",
                         "length (digits)", "accuracy", read_points(length_csv, false));
    std::cout << "wrote " << out_dir << "/accuracy_vs_length.svg\n";
    wrote = true;
  }
  if (!carry_csv.empty()) {
    write_line_chart_svg(out_dir + "/error_vs_carry.svg", "Sequence error vs carry length",
                         "carry chain length k", "error rate", read_points(carry_csv, true));
    std::cout << "wrote " << out_dir << "/error_vs_carry.svg\n";
    wrote = true;
  }
  if (!wrote) throw ContractViolation("report: pass --length-csv and/or --carry-csv");
  return kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Neural GPU lab: generation, training, evaluation, sweeps and reports"};
  app.require_subcommand(1);
  std::function<int()> action;

  // gen
  {
    auto* gen = app.add_subcommand("gen", "Generate an oracle-verified dataset");
    auto opts = std::make_shared<std::tuple<std::string, int, int64_t, int64_t, std::string,
                                            int64_t, uint64_t, std::string>>(
        "add", 2, 8, 1000, "padded", 3, 1, "dataset.jsonl");
    gen->add_option("--task", std::get<0>(*opts), "add | mul | k_mul | expression");
    gen->add_option("--base", std::get<1>(*opts), "number base, 2..10");
    gen->add_option("--digits", std::get<2>(*opts), "digits per operand (expression: total length)");
    gen->add_option("--count", std::get<3>(*opts), "number of examples");
    gen->add_option("--representation", std::get<4>(*opts), "padded | unpadded | aligned");
    gen->add_option("--operands", std::get<5>(*opts), "operand count for k_mul");
    gen->add_option("--seed", std::get<6>(*opts), "generator seed");
    gen->add_option("--out", std::get<7>(*opts), "output dataset path")->required();
    gen->callback([opts, &action]() {
      action = [opts]() {
        auto& o = *opts;
        return cmd_gen(std::get<0>(o), std::get<1>(o), std::get<2>(o), std::get<3>(o),
                       std::get<4>(o), std::get<5>(o), std::get<6>(o), std::get<7>(o));
      };
    });
  }

  // verify
  {
    auto* verify = app.add_subcommand("verify", "Re-verify a dataset against the exact oracle");
    auto path = std::make_shared<std::string>();
    verify->add_option("--data", *path, "dataset path")->required();
    verify->callback([path, &action]() { action = [path]() { return cmd_verify(*path); }; });
  }

  // train
  {
    auto* train = app.add_subcommand("train", "Run curriculum training from a config file");
    auto config = std::make_shared<std::string>();
    auto resume = std::make_shared<std::string>();
    train->add_option("--config", *config, "run config JSON")->required();
    train->add_option("--resume", *resume, "checkpoint to resume from");
    train->callback([config, resume, &action]() {
      action = [config, resume]() { return cmd_train(*config, *resume); };
    });
  }

  // eval
  {
    auto* eval = app.add_subcommand("eval", "Evaluate a checkpoint or stub predictor on a suite");
    struct EvalOpts {
      std::string checkpoint, suite = "uniform", predictor = "model", out = "eval-out";
      std::string task = "add", representation = "padded", config;
      int base = 2;
      std::vector<int64_t> lengths{24};
      int64_t cases = 200, total_digits = 40, max_k = 24, digit_width = 10, seeds = 1;
      uint64_t seed = 1;
    };
    auto o = std::make_shared<EvalOpts>();
    eval->add_option("--checkpoint", o->checkpoint, "checkpoint file");
    eval->add_option("--suite", o->suite, "uniform | carry | structured | alignment");
    eval->add_option("--predictor", o->predictor, "model | oracle | constant:<symbol>");
    eval->add_option("--out", o->out, "report directory");
    eval->add_option("--task", o->task, "task for the uniform suite");
    eval->add_option("--base", o->base, "number base");
    eval->add_option("--representation", o->representation, "input representation");
    eval->add_option("--lengths", o->lengths, "lengths for the uniform suite")->delimiter(',');
    eval->add_option("--cases", o->cases, "cases per length / per carry k");
    eval->add_option("--total-digits", o->total_digits, "operand digits for carry cases");
    eval->add_option("--max-k", o->max_k, "largest carry length probed");
    eval->add_option("--digit-width", o->digit_width, "operand width for the structured suite");
    eval->add_option("--seed", o->seed, "evaluation seed");
    eval->add_option("--config", o->config, "train config (alignment suite only)");
    eval->add_option("--seeds", o->seeds, "seeds per cell (alignment suite only)");
    eval->callback([o, &action]() {
      action = [o]() {
        if (o->suite == "alignment") {
          require(!o->config.empty(), "alignment suite needs --config");
          return cmd_eval_alignment(o->config, o->out, o->seeds);
        }
        return cmd_eval(o->checkpoint, o->suite, o->predictor, o->out, o->task, o->base,
                        o->representation, o->lengths, o->cases, o->total_digits, o->max_k,
                        o->digit_width, o->seed);
      };
    });
  }

  // sweep
  {
    auto* sweep = app.add_subcommand("sweep", "Train the same config across several seeds");
    struct SweepOpts {
      std::string config, out;
      int64_t seeds = 5, parallelism = 1;
      uint64_t first_seed = 1;
    };
    auto o = std::make_shared<SweepOpts>();
    sweep->add_option("--config", o->config, "run config JSON")->required();
    sweep->add_option("--seeds", o->seeds, "number of seeds");
    sweep->add_option("--first-seed", o->first_seed, "first seed value");
    sweep->add_option("--parallelism", o->parallelism, "concurrent runs");
    sweep->add_option("--out", o->out, "sweep output directory");
    sweep->callback([o, &action]() {
      action = [o]() {
        return cmd_sweep(o->config, o->seeds, o->first_seed, o->parallelism, o->out);
      };
    });
  }

  // report
  {
    auto* report = app.add_subcommand("report", "Render static charts from report CSVs");
    struct ReportOpts {
      std::string length_csv, carry_csv, out = "charts";
    };
    auto o = std::make_shared<ReportOpts>();
    report->add_option("--length-csv", o->length_csv, "length_curve.csv from the uniform suite");
    report->add_option("--carry-csv", o->carry_csv, "carry_curve.csv from the carry suite");
    report->add_option("--out", o->out, "chart directory");
    report->callback([o, &action]() {
      action = [o]() { return cmd_report(o->length_csv, o->carry_csv, o->out); };
    });
  }

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kExitOk : kExitConfig;
  }

  try {
    return action ? action() : kExitConfig;
  } catch (const ParseError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return kExitConfig;
  } catch (const ContractViolation& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitConfig;
  } catch (const NumericError& e) {
    std::cerr << "numeric abort: " << e.what() << "\n";
    return kExitNumeric;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitError;
  }
}
