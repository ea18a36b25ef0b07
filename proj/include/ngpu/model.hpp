#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "ngpu/tensor.hpp"

namespace ngpu {

// The Neural GPU: a length-n symbol string is embedded into an [n, w, m]
// mental image, L convolutional GRU layers are applied per timestep for n
// timesteps (cycling through C independent parameter sets), and row 0 of the
// final image is mapped to per-position logits. 3*L*n convolutions per
// forward, Theta(n^2) scalar work for fixed w and m.

enum class Representation { kPadded, kUnpadded, kAligned };

const char* representation_name(Representation r);
Representation representation_from_name(const std::string& name);

struct ModelConfig {
  int64_t alphabet_size = kAlphabetSize;
  int64_t filters = 24;         // m
  int64_t width = 4;            // w
  int64_t layers_per_step = 2;  // L
  int64_t kernel_height = 3;
  int64_t kernel_width = 3;
  int64_t param_sets = 6;  // C
  bool cutoff = true;      // saturating gates; plain sigmoid/tanh when off
  double dropout_rate = 0.1;
  int64_t max_length = 512;

  void validate() const;
  bool operator==(const ModelConfig&) const = default;
};

// One CGRU layer: u = gate(conv(s,U)+bu), r = gate(conv(s,R)+br),
// c = act(conv(r*s,W)+b), s' = u*s + (1-u)*c.
template <class Real>
struct LayerParams {
  Tensor<Real> update_kernel, update_bias;
  Tensor<Real> reset_kernel, reset_bias;
  Tensor<Real> candidate_kernel, candidate_bias;
};

template <class Real>
struct ParameterBank {
  ModelConfig config;
  std::vector<std::vector<LayerParams<Real>>> sets;  // [C][L]
  Tensor<Real> embedding;                            // [alphabet, m]
  Tensor<Real> output_map;                           // [m, alphabet]

  static ParameterBank random_init(const ModelConfig& config, uint64_t seed);

  // Fixed traversal order; defines checkpoint layout and optimizer slots.
  std::vector<std::pair<std::string, Tensor<Real>*>> named_parameters();
  std::vector<Tensor<Real>*> parameters();
  int64_t parameter_count();
  void zero_grads();
};

template <class Real>
struct MentalImage {
  Val state;  // [n, w, m]
  int64_t length = 0;
};

struct ForwardTrace {
  int64_t conv_count = 0;
  std::vector<int64_t> set_sequence;  // parameter set used at each timestep
};

enum class RunMode { kTrain, kEval };

// Builds the initial mental image: row 0 holds the embedded symbols; the
// aligned representation additionally puts the second operand on row 1.
template <class Real>
MentalImage<Real> embed_input(Tape<Real>& tape, ParameterBank<Real>& bank,
                              const std::vector<Symbol>& symbols, Representation representation,
                              const std::vector<Symbol>* second_row = nullptr);

template <class Real>
MentalImage<Real> cgru_layer(Tape<Real>& tape, MentalImage<Real> image, LayerParams<Real>& params,
                             const ModelConfig& config, RunMode mode, uint64_t dropout_seed);

// Full forward pass; dropout_seed picks the (single, shared across timesteps)
// candidate dropout mask in train mode. Returns [n, alphabet] logits.
template <class Real>
Val forward(Tape<Real>& tape, ParameterBank<Real>& bank, const std::vector<Symbol>& symbols,
            Representation representation, RunMode mode, uint64_t dropout_seed = 0,
            ForwardTrace* trace = nullptr, const std::vector<Symbol>* second_row = nullptr);

// Per-position argmax; ties break toward the lowest symbol index.
template <class Real>
std::vector<Symbol> decode(std::span<const Real> logits, int64_t alphabet_size);

// Sum over layers and sets of ||theta_i - mean||^2 (0 when C == 1).
template <class Real>
double relaxation_penalty(ParameterBank<Real>& bank);

// Same quantity recorded on a tape so it can join the training loss.
template <class Real>
Val relaxation_penalty_op(Tape<Real>& tape, ParameterBank<Real>& bank);

// Replaces every set with the element-wise mean across sets.
template <class Real>
void collapse_param_sets(ParameterBank<Real>& bank);

extern template struct ParameterBank<float>;
extern template struct ParameterBank<double>;

}  // namespace ngpu
