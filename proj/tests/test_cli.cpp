// End-to-end checks of the ngpu binary: exit codes, reproducible artifacts,
// and the documented subcommand surface.
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <vector>

#include "doctest.h"
#include "json.hpp"

namespace {

const std::string kCli = NGPU_CLI_PATH;
const std::string kTmp = (std::filesystem::temp_directory_path() / "ngpu_cli_test").string();

struct CommandResult {
  int exit_code = -1;
  std::string output;
};

CommandResult run(const std::string& args) {
  const std::string out_file = kTmp + "/cmd_output.txt";
  const std::string cmd = kCli + " " + args + " > " + out_file + " 2>&1";
  const int status = std::system(cmd.c_str());
  CommandResult result;
  result.exit_code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  std::ifstream in(out_file);
  std::stringstream ss;
  ss << in.rdbuf();
  result.output = ss.str();
  return result;
}

std::string read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  return std::string(std::istreambuf_iterator<char>(in), {});
}

void write_file(const std::string& path, const std::string& text) {
  std::ofstream out(path);
  out << text;
}

const char* kTinyConfig = R"({
  "seed": 3,
  "task": {"name": "add", "base": 2},
  "model": {"filters": 6, "param_sets": 2, "max_length": 64},
  "curriculum": {"max_length": 3},
  "train": {"batch_size": 4, "max_steps": 8},
  "eval": {"lengths": [4], "cases_per_length": 8}
})";

}  // namespace

TEST_SUITE_BEGIN("cli");

TEST_CASE("cli surface") {
  std::filesystem::remove_all(kTmp);
  std::filesystem::create_directories(kTmp);

  SUBCASE("gen: count 0 writes an empty file and succeeds") {
    const auto r = run("gen --task add --base 2 --digits 4 --count 0 --out " + kTmp + "/empty.jsonl");
    CHECK(r.exit_code == 0);
    CHECK(std::filesystem::file_size(kTmp + "/empty.jsonl") == 0);
  }

  SUBCASE("gen: identical flags and seed give byte-identical files; verify passes") {
    const std::string flags = "gen --task mul --base 10 --digits 5 --count 40 --seed 11 --out ";
    CHECK(run(flags + kTmp + "/a.jsonl").exit_code == 0);
    CHECK(run(flags + kTmp + "/b.jsonl").exit_code == 0);
    CHECK(read_file(kTmp + "/a.jsonl") == read_file(kTmp + "/b.jsonl"));

    const auto v = run("verify --data " + kTmp + "/a.jsonl");
    CHECK(v.exit_code == 0);
    CHECK(v.output.find("40/40") != std::string::npos);
  }

  SUBCASE("gen: expression and k_mul datasets also verify") {
    CHECK(run("gen --task expression --base 2 --digits 21 --count 25 --out " + kTmp +
              "/expr.jsonl").exit_code == 0);
    CHECK(run("verify --data " + kTmp + "/expr.jsonl").exit_code == 0);
    CHECK(run("gen --task k_mul --base 2 --digits 3 --operands 3 --count 25 --out " + kTmp +
              "/kmul.jsonl").exit_code == 0);
    CHECK(run("verify --data " + kTmp + "/kmul.jsonl").exit_code == 0);
  }

  SUBCASE("bad flags exit with the config code") {
    CHECK(run("gen --task frobnicate --count 1 --out " + kTmp + "/x.jsonl").exit_code == 2);
    CHECK(run("gen --base 2 --count 1").exit_code == 2);  // missing required --out
  }

  SUBCASE("eval: oracle stub produces an all-pass report without a checkpoint") {
    const auto r = run("eval --suite uniform --predictor oracle --task add --base 2 --lengths 6 "
                       "--cases 20 --out " + kTmp + "/eval_oracle");
    CHECK(r.exit_code == 0);
    CHECK(r.output.find("accuracy 1") != std::string::npos);
    CHECK(std::filesystem::exists(kTmp + "/eval_oracle/suites.csv"));
    CHECK(std::filesystem::exists(kTmp + "/eval_oracle/length_curve.csv"));
  }

  SUBCASE("eval: carry suite with the oracle never crosses") {
    const auto r = run("eval --suite carry --predictor oracle --base 2 --total-digits 20 "
                       "--max-k 8 --cases 10 --out " + kTmp + "/eval_carry");
    CHECK(r.exit_code == 0);
    CHECK(r.output.find("none") != std::string::npos);
  }

  SUBCASE("eval: unknown suite lists the valid ones") {
    const auto r = run("eval --suite bogus --predictor oracle --out " + kTmp + "/x");
    CHECK(r.exit_code == 2);
    CHECK(r.output.find("uniform") != std::string::npos);
    CHECK(r.output.find("carry") != std::string::npos);
    CHECK(r.output.find("structured") != std::string::npos);
  }

  SUBCASE("report renders charts from the carry and length CSVs") {
    REQUIRE(run("eval --suite uniform --predictor oracle --task add --base 2 --lengths 4,6 "
                "--cases 5 --out " + kTmp + "/rep_in").exit_code == 0);
    const auto r = run("report --length-csv " + kTmp + "/rep_in/length_curve.csv --out " + kTmp +
                       "/charts");
    CHECK(r.exit_code == 0);
    CHECK(std::filesystem::exists(kTmp + "/charts/accuracy_vs_length.svg"));
  }
}

TEST_CASE("cli training workflows") {
  std::filesystem::remove_all(kTmp);
  std::filesystem::create_directories(kTmp);
  write_file(kTmp + "/tiny.json", kTinyConfig);

  SUBCASE("config errors carry key diagnostics and exit 2") {
    write_file(kTmp + "/bad.json", R"({"trian": {}})");
    const auto r = run("train --config " + kTmp + "/bad.json");
    CHECK(r.exit_code == 2);
    CHECK(r.output.find("trian") != std::string::npos);
  }

  SUBCASE("smoke train run writes a self-describing run directory") {
    nlohmann::json cfg = nlohmann::json::parse(kTinyConfig);
    cfg["output_dir"] = kTmp + "/run1";
    write_file(kTmp + "/run1.json", cfg.dump());
    const auto r = run("train --config " + kTmp + "/run1.json");
    CHECK(r.exit_code == 0);
    CHECK(std::filesystem::exists(kTmp + "/run1/config.json"));
    CHECK(std::filesystem::exists(kTmp + "/run1/events.jsonl"));
    CHECK(std::filesystem::exists(kTmp + "/run1/summary.json"));
    CHECK(std::filesystem::exists(kTmp + "/run1/checkpoint-init.ckpt"));
    CHECK(std::filesystem::exists(kTmp + "/run1/checkpoint-final.ckpt"));

    // Rerunning the identical config gives a bit-identical final checkpoint.
    cfg["output_dir"] = kTmp + "/run2";
    write_file(kTmp + "/run2.json", cfg.dump());
    CHECK(run("train --config " + kTmp + "/run2.json").exit_code == 0);
    CHECK(read_file(kTmp + "/run1/checkpoint-final.ckpt") ==
          read_file(kTmp + "/run2/checkpoint-final.ckpt"));

    // Resuming continues the step numbering where the run stopped.
    cfg["output_dir"] = kTmp + "/run3";
    write_file(kTmp + "/run3.json", cfg.dump());
    const auto resume =
        run("train --config " + kTmp + "/run3.json --resume " + kTmp + "/run1/checkpoint-final.ckpt");
    CHECK(resume.exit_code == 0);
    std::ifstream events(kTmp + "/run3/events.jsonl");
    std::string line;
    int64_t first_step = -1;
    while (std::getline(events, line)) {
      const auto j = nlohmann::json::parse(line);
      if (j.at("type") == "step") {
        first_step = j.at("step").get<int64_t>();
        break;
      }
    }
    CHECK(first_step == 8);  // the first run trained steps 0..7
  }

  SUBCASE("sweep aggregates per-seed results; parallel equals serial") {
    const auto serial =
        run("sweep --config " + kTmp + "/tiny.json --seeds 2 --first-seed 5 --out " + kTmp +
            "/sweep_serial");
    CHECK(serial.exit_code == 0);
    CHECK(std::filesystem::exists(kTmp + "/sweep_serial/sweep.csv"));
    const auto parallel =
        run("sweep --config " + kTmp + "/tiny.json --seeds 2 --first-seed 5 --parallelism 2 "
            "--out " + kTmp + "/sweep_parallel");
    CHECK(parallel.exit_code == 0);
    auto strip_run_dir = [](const std::string& csv) {
      // Run directories differ between the two sweeps; results must not.
      std::string out;
      std::istringstream ss(csv);
      std::string line;
      while (std::getline(ss, line)) {
        std::vector<std::string> fields;
        std::istringstream ls(line);
        std::string f;
        while (std::getline(ls, f, ',')) fields.push_back(f);
        if (fields.size() >= 6) fields[5].clear();
        for (std::size_t i = 0; i < fields.size(); ++i) out += (i ? "," : "") + fields[i];
        out += "\n";
      }
      return out;
    };
    CHECK(strip_run_dir(read_file(kTmp + "/sweep_serial/sweep.csv")) ==
          strip_run_dir(read_file(kTmp + "/sweep_parallel/sweep.csv")));
    // Per-seed run directories and checkpoints exist.
    CHECK(std::filesystem::exists(kTmp + "/sweep_serial/seed5/checkpoint-final.ckpt"));
    CHECK(std::filesystem::exists(kTmp + "/sweep_serial/seed6/checkpoint-final.ckpt"));
    CHECK(read_file(kTmp + "/sweep_serial/seed5/checkpoint-final.ckpt") ==
          read_file(kTmp + "/sweep_parallel/seed5/checkpoint-final.ckpt"));
  }
}

TEST_SUITE_END();
