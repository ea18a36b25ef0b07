#include "ngpu/model.hpp"

#include <cmath>
#include <random>

#include "ngpu/rng.hpp"

namespace ngpu {

const char* representation_name(Representation r) {
  switch (r) {
    case Representation::kPadded: return "padded";
    case Representation::kUnpadded: return "unpadded";
    case Representation::kAligned: return "aligned";
  }
  return "?";
}

Representation representation_from_name(const std::string& name) {
  if (name == "padded") return Representation::kPadded;
  if (name == "unpadded") return Representation::kUnpadded;
  if (name == "aligned") return Representation::kAligned;
  throw ContractViolation("unknown representation: " + name +
                          " (expected padded, unpadded or aligned)");
}

void ModelConfig::validate() const {
  require(alphabet_size >= 2, "ModelConfig: alphabet_size must cover the task symbols");
  require(filters >= 1, "ModelConfig: filters must be >= 1");
  require(width >= 1, "ModelConfig: width must be >= 1");
  require(layers_per_step >= 1, "ModelConfig: layers_per_step must be >= 1");
  require(param_sets >= 1, "ModelConfig: param_sets must be >= 1");
  require(kernel_height % 2 == 1 && kernel_width % 2 == 1,
          "ModelConfig: kernel extents must be odd");
  require(dropout_rate >= 0.0 && dropout_rate < 1.0, "ModelConfig: dropout_rate must be in [0,1)");
  require(max_length >= 1, "ModelConfig: max_length must be >= 1");
}

namespace {

template <class Real>
Tensor<Real> glorot_uniform(Shape shape, int64_t fan_in, int64_t fan_out, Rng& rng) {
  const double limit = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
  std::uniform_real_distribution<double> dist(-limit, limit);
  auto t = Tensor<Real>::zeros(std::move(shape), /*requires_grad=*/true);
  for (Real& v : t.data) v = static_cast<Real>(dist(rng));
  return t;
}

}  // namespace

template <class Real>
ParameterBank<Real> ParameterBank<Real>::random_init(const ModelConfig& config, uint64_t seed) {
  config.validate();
  ParameterBank<Real> bank;
  bank.config = config;
  Rng rng(derive_seed(seed, stream::kInit));
  const int64_t m = config.filters;
  const int64_t kh = config.kernel_height, kw = config.kernel_width;
  const int64_t fan = kh * kw * m;
  bank.sets.resize(static_cast<std::size_t>(config.param_sets));
  for (auto& layers : bank.sets) {
    layers.resize(static_cast<std::size_t>(config.layers_per_step));
    for (auto& layer : layers) {
      layer.update_kernel = glorot_uniform<Real>({kh, kw, m, m}, fan, fan, rng);
      // Gate biases start at 1 so early timesteps mostly copy the state.
      layer.update_bias = Tensor<Real>::full({m}, Real(1), true);
      layer.reset_kernel = glorot_uniform<Real>({kh, kw, m, m}, fan, fan, rng);
      layer.reset_bias = Tensor<Real>::full({m}, Real(1), true);
      layer.candidate_kernel = glorot_uniform<Real>({kh, kw, m, m}, fan, fan, rng);
      layer.candidate_bias = Tensor<Real>::zeros({m}, true);
    }
  }
  bank.embedding = glorot_uniform<Real>({config.alphabet_size, m}, config.alphabet_size, m, rng);
  bank.output_map = glorot_uniform<Real>({m, config.alphabet_size}, m, config.alphabet_size, rng);
  return bank;
}

template <class Real>
std::vector<std::pair<std::string, Tensor<Real>*>> ParameterBank<Real>::named_parameters() {
  std::vector<std::pair<std::string, Tensor<Real>*>> out;
  for (std::size_t c = 0; c < sets.size(); ++c) {
    for (std::size_t l = 0; l < sets[c].size(); ++l) {
      const std::string prefix = "sets." + std::to_string(c) + ".layers." + std::to_string(l) + ".";
      LayerParams<Real>& layer = sets[c][l];
      out.emplace_back(prefix + "update_kernel", &layer.update_kernel);
      out.emplace_back(prefix + "update_bias", &layer.update_bias);
      out.emplace_back(prefix + "reset_kernel", &layer.reset_kernel);
      out.emplace_back(prefix + "reset_bias", &layer.reset_bias);
      out.emplace_back(prefix + "candidate_kernel", &layer.candidate_kernel);
      out.emplace_back(prefix + "candidate_bias", &layer.candidate_bias);
    }
  }
  out.emplace_back("embedding", &embedding);
  out.emplace_back("output_map", &output_map);
  return out;
}

template <class Real>
std::vector<Tensor<Real>*> ParameterBank<Real>::parameters() {
  std::vector<Tensor<Real>*> out;
  for (auto& [name, t] : named_parameters()) out.push_back(t);
  return out;
}

template <class Real>
int64_t ParameterBank<Real>::parameter_count() {
  int64_t n = 0;
  for (Tensor<Real>* t : parameters()) n += t->size();
  return n;
}

template <class Real>
void ParameterBank<Real>::zero_grads() {
  for (Tensor<Real>* t : parameters()) t->zero_grad();
}

template <class Real>
MentalImage<Real> embed_input(Tape<Real>& tape, ParameterBank<Real>& bank,
                              const std::vector<Symbol>& symbols, Representation representation,
                              const std::vector<Symbol>* second_row) {
  require(!symbols.empty(), "embed_input: input must have length >= 1");
  require((representation == Representation::kAligned) == (second_row != nullptr),
          "embed_input: second row is required exactly in the aligned representation");
  for (Symbol s : symbols) {
    require(s >= 0 && s < bank.config.alphabet_size, "embed_input: out-of-alphabet symbol");
  }
  Val table = tape.leaf(bank.embedding);
  Val state = tape.embed(table, symbols, bank.config.width, /*row=*/0);
  if (second_row != nullptr) {
    require(second_row->size() == symbols.size(),
            "embed_input: aligned rows must have equal length");
    require(bank.config.width >= 2, "embed_input: aligned representation needs width >= 2");
    state = tape.add(state, tape.embed(table, *second_row, bank.config.width, /*row=*/1));
  }
  return MentalImage<Real>{state, static_cast<int64_t>(symbols.size())};
}

template <class Real>
MentalImage<Real> cgru_layer(Tape<Real>& tape, MentalImage<Real> image, LayerParams<Real>& params,
                             const ModelConfig& config, RunMode mode, uint64_t dropout_seed) {
  Val s = image.state;
  Val update_pre = tape.conv2d(s, tape.leaf(params.update_kernel), tape.leaf(params.update_bias));
  Val reset_pre = tape.conv2d(s, tape.leaf(params.reset_kernel), tape.leaf(params.reset_bias));
  Val update = config.cutoff ? tape.sat_sigmoid(update_pre) : tape.sigmoid(update_pre);
  Val reset = config.cutoff ? tape.sat_sigmoid(reset_pre) : tape.sigmoid(reset_pre);
  Val gated = tape.mul(reset, s);
  Val candidate_pre =
      tape.conv2d(gated, tape.leaf(params.candidate_kernel), tape.leaf(params.candidate_bias));
  Val candidate = config.cutoff ? tape.sat_tanh(candidate_pre) : tape.tanh(candidate_pre);
  if (mode == RunMode::kTrain && config.dropout_rate > 0.0) {
    candidate = tape.dropout(candidate, static_cast<Real>(config.dropout_rate), dropout_seed);
  }
  // s' = u*s + (1-u)*c
  Val kept = tape.mul(update, s);
  Val injected = tape.mul(tape.affine(update, Real(-1), Real(1)), candidate);
  return MentalImage<Real>{tape.add(kept, injected), image.length};
}

template <class Real>
Val forward(Tape<Real>& tape, ParameterBank<Real>& bank, const std::vector<Symbol>& symbols,
            Representation representation, RunMode mode, uint64_t dropout_seed,
            ForwardTrace* trace, const std::vector<Symbol>* second_row) {
  bank.config.validate();
  const int64_t n = static_cast<int64_t>(symbols.size());
  require(n >= 1, "forward: input must have length >= 1");
  require(n <= bank.config.max_length, "forward: input longer than configured maximum");

  const int64_t start_convs = tape.conv_count();
  MentalImage<Real> image = embed_input(tape, bank, symbols, representation, second_row);
  const int64_t sets = bank.config.param_sets;
  for (int64_t t = 0; t < n; ++t) {
    const int64_t set = t % sets;
    if (trace) trace->set_sequence.push_back(set);
    tape.begin_segment();
    for (int64_t l = 0; l < bank.config.layers_per_step; ++l) {
      image = cgru_layer(tape, image, bank.sets[static_cast<std::size_t>(set)][static_cast<std::size_t>(l)],
                         bank.config, mode, dropout_seed);
    }
    tape.end_segment({image.state});
  }
  Val logits = tape.row0_matmul(image.state, tape.leaf(bank.output_map));
  if (trace) trace->conv_count = tape.conv_count() - start_convs;
  return logits;
}

template <class Real>
std::vector<Symbol> decode(std::span<const Real> logits, int64_t alphabet_size) {
  require(alphabet_size >= 1 && logits.size() % static_cast<std::size_t>(alphabet_size) == 0,
          "decode: logits length is not a multiple of the alphabet size");
  const int64_t n = static_cast<int64_t>(logits.size()) / alphabet_size;
  std::vector<Symbol> out(static_cast<std::size_t>(n));
  for (int64_t i = 0; i < n; ++i) {
    const Real* row = logits.data() + i * alphabet_size;
    int64_t best = 0;
    for (int64_t k = 1; k < alphabet_size; ++k) {
      if (row[k] > row[best]) best = k;  // ties keep the lowest index
    }
    out[static_cast<std::size_t>(i)] = static_cast<Symbol>(best);
  }
  return out;
}

template <class Real>
double relaxation_penalty(ParameterBank<Real>& bank) {
  const std::size_t c = bank.sets.size();
  if (c <= 1) return 0.0;
  double total = 0.0;
  const std::size_t layers = bank.sets[0].size();
  for (std::size_t l = 0; l < layers; ++l) {
    auto role = [&](auto member) {
      std::vector<const Tensor<Real>*> group;
      for (std::size_t i = 0; i < c; ++i) group.push_back(&(bank.sets[i][l].*member));
      const std::size_t len = group[0]->data.size();
      for (std::size_t e = 0; e < len; ++e) {
        double mean = 0.0;
        for (auto* t : group) mean += static_cast<double>(t->data[e]);
        mean /= static_cast<double>(c);
        for (auto* t : group) {
          const double d = static_cast<double>(t->data[e]) - mean;
          total += d * d;
        }
      }
    };
    role(&LayerParams<Real>::update_kernel);
    role(&LayerParams<Real>::update_bias);
    role(&LayerParams<Real>::reset_kernel);
    role(&LayerParams<Real>::reset_bias);
    role(&LayerParams<Real>::candidate_kernel);
    role(&LayerParams<Real>::candidate_bias);
  }
  return total;
}

template <class Real>
Val relaxation_penalty_op(Tape<Real>& tape, ParameterBank<Real>& bank) {
  require(bank.sets.size() >= 2, "relaxation_penalty_op: needs C >= 2 parameter sets");
  Val total;
  const std::size_t layers = bank.sets[0].size();
  for (std::size_t l = 0; l < layers; ++l) {
    auto role = [&](auto member) {
      std::vector<Val> group;
      for (auto& set : bank.sets) group.push_back(tape.leaf(set[l].*member));
      Val p = tape.spread_penalty(group);
      total = total.valid() ? tape.add(total, p) : p;
    };
    role(&LayerParams<Real>::update_kernel);
    role(&LayerParams<Real>::update_bias);
    role(&LayerParams<Real>::reset_kernel);
    role(&LayerParams<Real>::reset_bias);
    role(&LayerParams<Real>::candidate_kernel);
    role(&LayerParams<Real>::candidate_bias);
  }
  return total;
}

template <class Real>
void collapse_param_sets(ParameterBank<Real>& bank) {
  const std::size_t c = bank.sets.size();
  if (c <= 1) return;
  const std::size_t layers = bank.sets[0].size();
  for (std::size_t l = 0; l < layers; ++l) {
    auto role = [&](auto member) {
      const std::size_t len = (bank.sets[0][l].*member).data.size();
      for (std::size_t e = 0; e < len; ++e) {
        Real sum = 0;
        for (auto& set : bank.sets) sum += (set[l].*member).data[e];
        const Real mean = sum / static_cast<Real>(c);
        for (auto& set : bank.sets) (set[l].*member).data[e] = mean;
      }
    };
    role(&LayerParams<Real>::update_kernel);
    role(&LayerParams<Real>::update_bias);
    role(&LayerParams<Real>::reset_kernel);
    role(&LayerParams<Real>::reset_bias);
    role(&LayerParams<Real>::candidate_kernel);
    role(&LayerParams<Real>::candidate_bias);
  }
}

template struct ParameterBank<float>;
template struct ParameterBank<double>;

template MentalImage<float> embed_input(Tape<float>&, ParameterBank<float>&,
                                        const std::vector<Symbol>&, Representation,
                                        const std::vector<Symbol>*);
template MentalImage<double> embed_input(Tape<double>&, ParameterBank<double>&,
                                         const std::vector<Symbol>&, Representation,
                                         const std::vector<Symbol>*);
template MentalImage<float> cgru_layer(Tape<float>&, MentalImage<float>, LayerParams<float>&,
                                       const ModelConfig&, RunMode, uint64_t);
template MentalImage<double> cgru_layer(Tape<double>&, MentalImage<double>, LayerParams<double>&,
                                        const ModelConfig&, RunMode, uint64_t);
template Val forward(Tape<float>&, ParameterBank<float>&, const std::vector<Symbol>&,
                     Representation, RunMode, uint64_t, ForwardTrace*, const std::vector<Symbol>*);
template Val forward(Tape<double>&, ParameterBank<double>&, const std::vector<Symbol>&,
                     Representation, RunMode, uint64_t, ForwardTrace*, const std::vector<Symbol>*);
template std::vector<Symbol> decode<float>(std::span<const float>, int64_t);
template std::vector<Symbol> decode<double>(std::span<const double>, int64_t);
template double relaxation_penalty(ParameterBank<float>&);
template double relaxation_penalty(ParameterBank<double>&);
template Val relaxation_penalty_op(Tape<float>&, ParameterBank<float>&);
template Val relaxation_penalty_op(Tape<double>&, ParameterBank<double>&);
template void collapse_param_sets(ParameterBank<float>&);
template void collapse_param_sets(ParameterBank<double>&);

}  // namespace ngpu
