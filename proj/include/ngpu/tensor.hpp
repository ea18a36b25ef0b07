#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

#include "ngpu/errors.hpp"
#include "ngpu/symbols.hpp"

namespace ngpu {

// Dense row-major tensors of rank <= 4 plus a replayable compute tape with
// reverse-mode differentiation. Everything runs on one thread in a fixed
// order, so identical seeds and inputs give bit-identical results on the
// same build. Real is float for training, double for gradient checks.

using Shape = std::vector<int64_t>;

int64_t numel(const Shape& shape);
std::string shape_str(const Shape& shape);

template <class Real>
struct Tensor {
  Shape shape;
  std::vector<Real> data;
  bool requires_grad = false;
  std::optional<std::vector<Real>> grad;

  Tensor() = default;
  Tensor(Shape s, std::vector<Real> values, bool requires_grad_ = false);

  static Tensor zeros(Shape s, bool requires_grad = false);
  static Tensor full(Shape s, Real value, bool requires_grad = false);

  int64_t size() const { return static_cast<int64_t>(data.size()); }
  Real& at(std::initializer_list<int64_t> index);
  Real at(std::initializer_list<int64_t> index) const;

  // Allocates (or re-zeroes) the gradient buffer.
  void zero_grad();
};

// Handle to a value recorded on a Tape.
struct Val {
  int32_t id = -1;
  bool valid() const { return id >= 0; }
};

enum class MemoryMode { kStored, kRecompute };

// Ordered record of one forward pass. Ops execute eagerly; backward() walks
// the record once in reverse. In recompute mode, activations inside a
// begin_segment()/end_segment() range are discarded after the forward pass
// and recomputed on demand during backward, trading compute for memory.
template <class Real>
class Tape {
 public:
  explicit Tape(MemoryMode mode = MemoryMode::kStored) : mode_(mode) {}

  // Registers an external tensor. Repeated calls with the same tensor return
  // the same handle. The tensor must outlive the tape; backward() accumulates
  // into its grad buffer when requires_grad is set.
  Val leaf(Tensor<Real>& tensor);
  // Tape-owned input with no gradient.
  Val constant(Shape shape, std::vector<Real> values);

  // input [n,w,m] * kernel [kh,kw,m,m_out] + bias [m_out] -> [n,w,m_out],
  // same-size output with zero padding past the n x w grid. kh, kw odd.
  Val conv2d(Val input, Val kernel, Val bias);
  // max(0, min(1, 1.2*sigmoid(x) - 0.1)); gradient 0 where clipped.
  Val sat_sigmoid(Val x);
  // max(-1, min(1, 1.2*tanh(x))); gradient 0 where clipped.
  Val sat_tanh(Val x);
  Val sigmoid(Val x);
  Val tanh(Val x);
  Val add(Val x, Val y);
  Val mul(Val x, Val y);
  // scale * x + shift, elementwise.
  Val affine(Val x, Real scale, Real shift);
  // Inverted dropout: keep with probability 1-rate, scale kept values by
  // 1/(1-rate). The mask is a pure function of mask_seed and the shape.
  Val dropout(Val x, Real rate, uint64_t mask_seed);
  // [n,w,m] output, zero except out[i,row,:] = table[symbols[i],:].
  Val embed(Val table, const std::vector<Symbol>& symbols, int64_t width, int64_t row);
  // state [n,w,m] x out_map [m,a] -> [n,a] using row 0 of the state.
  Val row0_matmul(Val state, Val out_map);
  // Mean over positions of softmax cross-entropy against target symbols.
  Val mean_cross_entropy(Val logits, const std::vector<Symbol>& targets);
  Val sum(Val x);
  // sum_i ||g_i - mean(g)||^2 over a group of same-shape values.
  Val spread_penalty(const std::vector<Val>& group);

  void begin_segment();
  void end_segment(const std::vector<Val>& keep);

  // Reverse pass from a scalar. seed_grad is the upstream gradient (1/batch
  // for batched losses). May be called once per tape.
  void backward(Val loss, Real seed_grad = Real(1));

  std::span<const Real> value(Val v) const;
  const Shape& shape(Val v) const;
  // Gradient accumulated for a value during backward (empty if unreached).
  std::span<const Real> grad(Val v) const;

  int64_t conv_count() const { return conv_count_; }
  std::size_t node_count() const { return nodes_.size(); }
  MemoryMode mode() const { return mode_; }

 private:
  enum class Op : uint8_t {
    kLeaf,
    kConstant,
    kConv2d,
    kSatSigmoid,
    kSatTanh,
    kSigmoid,
    kTanh,
    kAdd,
    kMul,
    kAffine,
    kDropout,
    kEmbed,
    kRow0Matmul,
    kCrossEntropy,
    kSum,
    kSpread,
  };

  struct Node {
    Op op;
    Shape shape;
    std::vector<int32_t> args;
    std::vector<Real> value;  // empty for leaves and for dropped activations
    std::vector<Real> grad;   // allocated lazily during backward
    Tensor<Real>* leaf = nullptr;
    bool needs_grad = false;
    bool dropped = false;
    Real scale = 0, shift = 0;     // affine; dropout rate in `scale`
    uint64_t seed = 0;             // dropout mask seed
    std::vector<int32_t> symbols;  // embed symbols / cross-entropy targets
    int64_t row = 0;               // embed target row
  };

  struct Segment {
    int32_t begin = 0;
    int32_t end = 0;
    std::vector<int32_t> keep;
  };

  static const char* op_name(Op op);

  int32_t check(Val v) const;
  Node& node(Val v) { return nodes_[static_cast<std::size_t>(check(v))]; }
  const Node& node(Val v) const { return nodes_[static_cast<std::size_t>(check(v))]; }
  std::span<const Real> node_value(int32_t id) const;
  std::span<Real> grad_buffer(int32_t id);
  bool arg_needs_grad(int32_t id) const;

  Val push(Node&& n);
  void compute(Node& n);
  void backprop(Node& n);
  void check_finite(const Node& n) const;

  void replay_segment(const Segment& s);
  void release_segment(const Segment& s);

  MemoryMode mode_;
  std::vector<Node> nodes_;
  std::vector<Segment> segments_;
  std::vector<int32_t> seg_of_;  // node id -> enclosing segment index or -1
  std::unordered_map<Tensor<Real>*, int32_t> leaf_ids_;
  int32_t open_segment_begin_ = -1;
  int64_t conv_count_ = 0;
  bool backward_done_ = false;
};

using TensorF = Tensor<float>;
using TensorD = Tensor<double>;
using TapeF = Tape<float>;
using TapeD = Tape<double>;

extern template struct Tensor<float>;
extern template struct Tensor<double>;
extern template class Tape<float>;
extern template class Tape<double>;

}  // namespace ngpu
