#pragma once

#include <cstdint>
#include <string>

#include "ngpu/model.hpp"

namespace ngpu {

// Checkpoint file layout: a magic line, one JSON header line (echoed model
// config, RNG state, and an ordered tensor manifest of name/shape/offset),
// then the raw little-endian float32 payload. Round-trips are bit-exact.

struct RngState {
  uint64_t seed = 0;
  int64_t step = 0;
  bool operator==(const RngState&) const = default;
};

struct Checkpoint {
  ParameterBank<float> bank;
  RngState rng;
};

void save_checkpoint(const std::string& path, ParameterBank<float>& bank, const RngState& rng);
Checkpoint load_checkpoint(const std::string& path);

}  // namespace ngpu
