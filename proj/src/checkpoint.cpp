#include "ngpu/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>

#include "json.hpp"
#include "ngpu/config.hpp"

namespace ngpu {

static_assert(std::endian::native == std::endian::little,
              "checkpoint payload is little-endian IEEE-754");

namespace {
constexpr const char* kMagic = "ngpu-checkpoint 1";
}

void save_checkpoint(const std::string& path, ParameterBank<float>& bank, const RngState& rng) {
  nlohmann::json manifest = nlohmann::json::array();
  int64_t offset = 0;
  auto named = bank.named_parameters();
  for (auto& [name, tensor] : named) {
    manifest.push_back({{"name", name},
                        {"shape", tensor->shape},
                        {"offset", offset},
                        {"count", tensor->size()}});
    offset += tensor->size() * static_cast<int64_t>(sizeof(float));
  }
  nlohmann::json header{{"config", model_config_to_json(bank.config)},
                        {"rng", {{"seed", rng.seed}, {"step", rng.step}}},
                        {"tensors", manifest}};

  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("save_checkpoint: cannot open " + path);
  out << kMagic << "\n" << header.dump() << "\n";
  for (auto& [name, tensor] : named) {
    out.write(reinterpret_cast<const char*>(tensor->data.data()),
              static_cast<std::streamsize>(tensor->data.size() * sizeof(float)));
  }
  if (!out) throw std::runtime_error("save_checkpoint: write failed for " + path);
}

Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("load_checkpoint: cannot open " + path);
  std::string magic, header_line;
  std::getline(in, magic);
  if (magic != kMagic) throw ParseError("load_checkpoint: bad magic in " + path);
  std::getline(in, header_line);
  nlohmann::json header;
  try {
    header = nlohmann::json::parse(header_line);
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(std::string("load_checkpoint: bad header: ") + e.what());
  }

  Checkpoint ckpt;
  ckpt.bank = ParameterBank<float>::random_init(model_config_from_json(header.at("config")), 0);
  ckpt.rng.seed = header.at("rng").at("seed").get<uint64_t>();
  ckpt.rng.step = header.at("rng").at("step").get<int64_t>();

  const std::streampos payload_start = in.tellg();
  auto named = ckpt.bank.named_parameters();
  const auto& manifest = header.at("tensors");
  require(manifest.size() == named.size(),
          "load_checkpoint: tensor count does not match the echoed config");
  for (std::size_t i = 0; i < named.size(); ++i) {
    const auto& entry = manifest.at(i);
    auto& [name, tensor] = named[i];
    require(entry.at("name").get<std::string>() == name,
            "load_checkpoint: tensor order mismatch at " + name);
    require(entry.at("shape").get<Shape>() == tensor->shape,
            "load_checkpoint: shape mismatch for " + name + ": checkpoint has " +
                shape_str(entry.at("shape").get<Shape>()) + ", config needs " +
                shape_str(tensor->shape));
    require(entry.at("count").get<int64_t>() == tensor->size(),
            "load_checkpoint: element count mismatch for " + name);
    in.seekg(payload_start + std::streampos(entry.at("offset").get<int64_t>()));
    in.read(reinterpret_cast<char*>(tensor->data.data()),
            static_cast<std::streamsize>(tensor->data.size() * sizeof(float)));
    if (!in) throw ParseError("load_checkpoint: truncated payload for " + name);
  }
  return ckpt;
}

}  // namespace ngpu
