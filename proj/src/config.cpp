#include "ngpu/config.hpp"

#include <fstream>
#include <set>

namespace ngpu {

namespace {

using nlohmann::json;

void check_keys(const json& j, const std::string& where, const std::set<std::string>& allowed) {
  if (!j.is_object()) throw ParseError("config: '" + where + "' must be an object");
  for (auto it = j.begin(); it != j.end(); ++it) {
    if (!allowed.count(it.key())) {
      throw ParseError("config: unknown key '" + where + it.key() + "'");
    }
  }
}

template <class T>
T field(const json& j, const char* key, T fallback) {
  if (!j.contains(key)) return fallback;
  try {
    return j.at(key).get<T>();
  } catch (const json::exception& e) {
    throw ParseError("config: bad value for '" + std::string(key) + "': " + e.what());
  }
}

}  // namespace

json model_config_to_json(const ModelConfig& c) {
  return json{{"alphabet_size", c.alphabet_size},
              {"filters", c.filters},
              {"width", c.width},
              {"layers_per_step", c.layers_per_step},
              {"kernel", {c.kernel_height, c.kernel_width}},
              {"param_sets", c.param_sets},
              {"cutoff", c.cutoff},
              {"dropout_rate", c.dropout_rate},
              {"max_length", c.max_length}};
}

ModelConfig model_config_from_json(const json& j) {
  check_keys(j, "model.",
             {"alphabet_size", "filters", "width", "layers_per_step", "kernel", "param_sets",
              "cutoff", "dropout_rate", "max_length"});
  ModelConfig c;
  c.alphabet_size = field<int64_t>(j, "alphabet_size", c.alphabet_size);
  c.filters = field<int64_t>(j, "filters", c.filters);
  c.width = field<int64_t>(j, "width", c.width);
  c.layers_per_step = field<int64_t>(j, "layers_per_step", c.layers_per_step);
  if (j.contains("kernel")) {
    const auto k = j.at("kernel").get<std::vector<int64_t>>();
    if (k.size() != 2) throw ParseError("config: 'model.kernel' must be [kh, kw]");
    c.kernel_height = k[0];
    c.kernel_width = k[1];
  }
  c.param_sets = field<int64_t>(j, "param_sets", c.param_sets);
  c.cutoff = field<bool>(j, "cutoff", c.cutoff);
  c.dropout_rate = field<double>(j, "dropout_rate", c.dropout_rate);
  c.max_length = field<int64_t>(j, "max_length", c.max_length);
  c.validate();
  return c;
}

json train_config_to_json(const TrainConfig& c) {
  return json{
      {"seed", c.seed},
      {"output_dir", c.output_dir},
      {"task",
       {{"name", task_name(c.task.task)},
        {"base", c.task.base},
        {"representation", representation_name(c.task.representation)},
        {"operand_count", c.task.operand_count}}},
      {"model", model_config_to_json(c.model)},
      {"curriculum",
       {{"name", c.curriculum},
        {"min_length", c.min_length},
        {"max_length", c.max_length},
        {"promotion_threshold", c.promotion_threshold},
        {"reset_length_per_stage", c.reset_length_per_stage}}},
      {"train",
       {{"learning_rate", c.learning_rate},
        {"batch_size", c.batch_size},
        {"max_steps", c.max_steps},
        {"clip_norm", c.clip_norm},
        {"memory_mode", c.memory_mode == MemoryMode::kRecompute ? "recompute" : "stored"},
        {"frontier_fraction", c.frontier_fraction},
        {"final_error_target", c.final_error_target},
        {"stop_on_completion", c.stop_on_completion},
        {"operand_count_curriculum", c.operand_count_curriculum},
        {"grad_noise",
         {{"enabled", c.grad_noise.enabled},
          {"scale", c.grad_noise.scale},
          {"decay", c.grad_noise.decay}}},
        {"relaxation",
         {{"initial_weight", c.relaxation.initial_weight},
          {"growth_factor", c.relaxation.growth_factor},
          {"growth_interval", c.relaxation.growth_interval},
          {"collapse_threshold", c.relaxation.collapse_threshold}}}}},
      {"eval",
       {{"lengths", c.eval.lengths},
        {"cases_per_length", c.eval.cases_per_length},
        {"pass_accuracy", c.eval.pass_accuracy}}}};
}

TrainConfig train_config_from_json(const json& j) {
  check_keys(j, "", {"seed", "output_dir", "task", "model", "curriculum", "train", "eval"});
  TrainConfig c;
  c.seed = field<uint64_t>(j, "seed", c.seed);
  c.output_dir = field<std::string>(j, "output_dir", c.output_dir);

  if (j.contains("task")) {
    const json& t = j.at("task");
    check_keys(t, "task.", {"name", "base", "representation", "operand_count"});
    c.task.task = task_from_name(field<std::string>(t, "name", "add"));
    c.task.base = field<int>(t, "base", c.task.base);
    c.task.representation =
        representation_from_name(field<std::string>(t, "representation", "padded"));
    c.task.operand_count = field<int64_t>(t, "operand_count", c.task.operand_count);
  }
  if (j.contains("model")) c.model = model_config_from_json(j.at("model"));

  if (j.contains("curriculum")) {
    const json& cur = j.at("curriculum");
    check_keys(cur, "curriculum.",
               {"name", "min_length", "max_length", "promotion_threshold",
                "reset_length_per_stage"});
    c.curriculum = field<std::string>(cur, "name", "direct" + std::to_string(c.task.base));
    c.min_length = field<int64_t>(cur, "min_length", c.min_length);
    c.max_length = field<int64_t>(cur, "max_length", c.max_length);
    c.promotion_threshold = field<double>(cur, "promotion_threshold", c.promotion_threshold);
    c.reset_length_per_stage = field<bool>(cur, "reset_length_per_stage", c.reset_length_per_stage);
  } else {
    c.curriculum = "direct" + std::to_string(c.task.base);
  }

  if (j.contains("train")) {
    const json& t = j.at("train");
    check_keys(t, "train.",
               {"learning_rate", "batch_size", "max_steps", "clip_norm", "memory_mode",
                "frontier_fraction", "final_error_target", "stop_on_completion",
                "operand_count_curriculum", "grad_noise", "relaxation"});
    c.learning_rate = field<double>(t, "learning_rate", c.learning_rate);
    c.batch_size = field<int64_t>(t, "batch_size", c.batch_size);
    c.max_steps = field<int64_t>(t, "max_steps", c.max_steps);
    c.clip_norm = field<double>(t, "clip_norm", c.clip_norm);
    const std::string mode = field<std::string>(t, "memory_mode", "stored");
    if (mode == "stored") c.memory_mode = MemoryMode::kStored;
    else if (mode == "recompute") c.memory_mode = MemoryMode::kRecompute;
    else throw ParseError("config: 'train.memory_mode' must be stored or recompute");
    c.frontier_fraction = field<double>(t, "frontier_fraction", c.frontier_fraction);
    c.final_error_target = field<double>(t, "final_error_target", c.final_error_target);
    c.stop_on_completion = field<bool>(t, "stop_on_completion", c.stop_on_completion);
    c.operand_count_curriculum =
        field<bool>(t, "operand_count_curriculum", c.operand_count_curriculum);
    if (t.contains("grad_noise")) {
      const json& g = t.at("grad_noise");
      check_keys(g, "train.grad_noise.", {"enabled", "scale", "decay"});
      c.grad_noise.enabled = field<bool>(g, "enabled", c.grad_noise.enabled);
      c.grad_noise.scale = field<double>(g, "scale", c.grad_noise.scale);
      c.grad_noise.decay = field<double>(g, "decay", c.grad_noise.decay);
    }
    if (t.contains("relaxation")) {
      const json& r = t.at("relaxation");
      check_keys(r, "train.relaxation.",
                 {"initial_weight", "growth_factor", "growth_interval", "collapse_threshold"});
      c.relaxation.initial_weight = field<double>(r, "initial_weight", c.relaxation.initial_weight);
      c.relaxation.growth_factor = field<double>(r, "growth_factor", c.relaxation.growth_factor);
      c.relaxation.growth_interval =
          field<int64_t>(r, "growth_interval", c.relaxation.growth_interval);
      c.relaxation.collapse_threshold =
          field<double>(r, "collapse_threshold", c.relaxation.collapse_threshold);
    }
  }

  if (j.contains("eval")) {
    const json& e = j.at("eval");
    check_keys(e, "eval.", {"lengths", "cases_per_length", "pass_accuracy"});
    c.eval.lengths = field<std::vector<int64_t>>(e, "lengths", c.eval.lengths);
    c.eval.cases_per_length = field<int64_t>(e, "cases_per_length", c.eval.cases_per_length);
    c.eval.pass_accuracy = field<double>(e, "pass_accuracy", c.eval.pass_accuracy);
  }

  c.task.digits = c.max_length;
  c.validate();
  return c;
}

TrainConfig load_train_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ParseError("config: cannot open " + path);
  json j;
  try {
    j = json::parse(in);
  } catch (const json::exception& e) {
    throw ParseError("config: " + path + " is not valid JSON: " + e.what());
  }
  return train_config_from_json(j);
}

void write_train_config(const std::string& path, const TrainConfig& config) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write config echo: " + path);
  out << train_config_to_json(config).dump(2) << "\n";
}

}  // namespace ngpu
