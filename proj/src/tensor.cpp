#include "ngpu/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <random>

#include "ngpu/rng.hpp"

namespace ngpu {

int64_t numel(const Shape& shape) {
  int64_t n = 1;
  for (int64_t d : shape) n *= d;
  return n;
}

std::string shape_str(const Shape& shape) {
  std::string s = "[";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) s += ",";
    s += std::to_string(shape[i]);
  }
  return s + "]";
}

template <class Real>
Tensor<Real>::Tensor(Shape s, std::vector<Real> values, bool requires_grad_)
    : shape(std::move(s)), data(std::move(values)), requires_grad(requires_grad_) {
  require(shape.size() <= 4, "Tensor: rank must be <= 4, got " + shape_str(shape));
  for (int64_t d : shape) require(d >= 1, "Tensor: extents must be positive, got " + shape_str(shape));
  require(static_cast<int64_t>(data.size()) == numel(shape),
          "Tensor: data length " + std::to_string(data.size()) + " does not match shape " +
              shape_str(shape));
}

template <class Real>
Tensor<Real> Tensor<Real>::zeros(Shape s, bool requires_grad) {
  auto n = static_cast<std::size_t>(numel(s));
  return Tensor(std::move(s), std::vector<Real>(n, Real(0)), requires_grad);
}

template <class Real>
Tensor<Real> Tensor<Real>::full(Shape s, Real value, bool requires_grad) {
  auto n = static_cast<std::size_t>(numel(s));
  return Tensor(std::move(s), std::vector<Real>(n, value), requires_grad);
}

template <class Real>
int64_t tensor_offset(const Tensor<Real>& t, std::initializer_list<int64_t> index) {
  require(index.size() == t.shape.size(), "Tensor::at: index rank mismatch");
  int64_t off = 0;
  std::size_t k = 0;
  for (int64_t i : index) {
    require(i >= 0 && i < t.shape[k], "Tensor::at: index out of bounds");
    off = off * t.shape[k] + i;
    ++k;
  }
  return off;
}

template <class Real>
Real& Tensor<Real>::at(std::initializer_list<int64_t> index) {
  return data[static_cast<std::size_t>(tensor_offset(*this, index))];
}

template <class Real>
Real Tensor<Real>::at(std::initializer_list<int64_t> index) const {
  return data[static_cast<std::size_t>(tensor_offset(*this, index))];
}

template <class Real>
void Tensor<Real>::zero_grad() {
  if (!grad) grad.emplace(data.size(), Real(0));
  else std::fill(grad->begin(), grad->end(), Real(0));
}

// ---------------------------------------------------------------------------
// Tape

template <class Real>
const char* Tape<Real>::op_name(Op op) {
  switch (op) {
    case Op::kLeaf: return "leaf";
    case Op::kConstant: return "constant";
    case Op::kConv2d: return "conv2d";
    case Op::kSatSigmoid: return "sat_sigmoid";
    case Op::kSatTanh: return "sat_tanh";
    case Op::kSigmoid: return "sigmoid";
    case Op::kTanh: return "tanh";
    case Op::kAdd: return "add";
    case Op::kMul: return "mul";
    case Op::kAffine: return "affine";
    case Op::kDropout: return "dropout";
    case Op::kEmbed: return "embed";
    case Op::kRow0Matmul: return "row0_matmul";
    case Op::kCrossEntropy: return "mean_cross_entropy";
    case Op::kSum: return "sum";
    case Op::kSpread: return "spread_penalty";
  }
  return "?";
}

template <class Real>
int32_t Tape<Real>::check(Val v) const {
  require(v.id >= 0 && v.id < static_cast<int32_t>(nodes_.size()),
          "Tape: handle does not belong to this tape (backward before forward?)");
  return v.id;
}

template <class Real>
std::span<const Real> Tape<Real>::node_value(int32_t id) const {
  const Node& n = nodes_[static_cast<std::size_t>(id)];
  if (n.op == Op::kLeaf) return {n.leaf->data.data(), n.leaf->data.size()};
  if (n.dropped) throw std::logic_error("Tape: accessed dropped activation outside replay");
  return {n.value.data(), n.value.size()};
}

template <class Real>
std::span<Real> Tape<Real>::grad_buffer(int32_t id) {
  Node& n = nodes_[static_cast<std::size_t>(id)];
  if (n.grad.empty()) n.grad.assign(static_cast<std::size_t>(numel(n.shape)), Real(0));
  return {n.grad.data(), n.grad.size()};
}

template <class Real>
bool Tape<Real>::arg_needs_grad(int32_t id) const {
  return nodes_[static_cast<std::size_t>(id)].needs_grad;
}

template <class Real>
Val Tape<Real>::push(Node&& n) {
  require(!backward_done_, "Tape: cannot record ops after backward");
  if (n.op != Op::kLeaf && n.op != Op::kConstant) {
    n.needs_grad = false;
    for (int32_t a : n.args) n.needs_grad = n.needs_grad || nodes_[static_cast<std::size_t>(a)].needs_grad;
    compute(n);
    check_finite(n);
  }
  nodes_.push_back(std::move(n));
  seg_of_.push_back(-1);
  return Val{static_cast<int32_t>(nodes_.size() - 1)};
}

template <class Real>
void Tape<Real>::check_finite(const Node& n) const {
  for (Real v : n.value) {
    if (!std::isfinite(v)) {
      throw NumericError(std::string(op_name(n.op)) + " produced a non-finite value");
    }
  }
}

template <class Real>
Val Tape<Real>::leaf(Tensor<Real>& tensor) {
  auto it = leaf_ids_.find(&tensor);
  if (it != leaf_ids_.end()) return Val{it->second};
  Node n;
  n.op = Op::kLeaf;
  n.shape = tensor.shape;
  n.leaf = &tensor;
  n.needs_grad = tensor.requires_grad;
  for (Real v : tensor.data) {
    if (!std::isfinite(v)) throw NumericError("leaf tensor holds a non-finite value");
  }
  Val v = push(std::move(n));
  leaf_ids_.emplace(&tensor, v.id);
  return v;
}

template <class Real>
Val Tape<Real>::constant(Shape shape, std::vector<Real> values) {
  require(static_cast<int64_t>(values.size()) == numel(shape),
          "constant: data length does not match shape " + shape_str(shape));
  Node n;
  n.op = Op::kConstant;
  n.shape = std::move(shape);
  n.value = std::move(values);
  n.needs_grad = false;
  check_finite(n);
  return push(std::move(n));
}

template <class Real>
Val Tape<Real>::conv2d(Val input, Val kernel, Val bias) {
  const Shape& xs = shape(input);
  const Shape& ks = shape(kernel);
  const Shape& bs = shape(bias);
  require(xs.size() == 3, "conv2d: input must be [n,w,m], got " + shape_str(xs));
  require(ks.size() == 4, "conv2d: kernel must be [kh,kw,m,m_out], got " + shape_str(ks));
  require(ks[0] % 2 == 1 && ks[1] % 2 == 1, "conv2d: kernel extents must be odd, got " + shape_str(ks));
  require(ks[2] == xs[2], "conv2d: kernel input channels " + shape_str(ks) +
                              " do not match input " + shape_str(xs));
  require(bs.size() == 1 && bs[0] == ks[3], "conv2d: bias must be [m_out], got " + shape_str(bs));
  Node n;
  n.op = Op::kConv2d;
  n.shape = {xs[0], xs[1], ks[3]};
  n.args = {check(input), check(kernel), check(bias)};
  ++conv_count_;
  return push(std::move(n));
}

template <class Real>
Val Tape<Real>::sat_sigmoid(Val x) {
  Node n;
  n.op = Op::kSatSigmoid;
  n.shape = shape(x);
  n.args = {check(x)};
  return push(std::move(n));
}

template <class Real>
Val Tape<Real>::sat_tanh(Val x) {
  Node n;
  n.op = Op::kSatTanh;
  n.shape = shape(x);
  n.args = {check(x)};
  return push(std::move(n));
}

template <class Real>
Val Tape<Real>::sigmoid(Val x) {
  Node n;
  n.op = Op::kSigmoid;
  n.shape = shape(x);
  n.args = {check(x)};
  return push(std::move(n));
}

template <class Real>
Val Tape<Real>::tanh(Val x) {
  Node n;
  n.op = Op::kTanh;
  n.shape = shape(x);
  n.args = {check(x)};
  return push(std::move(n));
}

template <class Real>
Val Tape<Real>::add(Val x, Val y) {
  require(shape(x) == shape(y),
          "add: shape mismatch " + shape_str(shape(x)) + " vs " + shape_str(shape(y)));
  Node n;
  n.op = Op::kAdd;
  n.shape = shape(x);
  n.args = {check(x), check(y)};
  return push(std::move(n));
}

template <class Real>
Val Tape<Real>::mul(Val x, Val y) {
  require(shape(x) == shape(y),
          "mul: shape mismatch " + shape_str(shape(x)) + " vs " + shape_str(shape(y)));
  Node n;
  n.op = Op::kMul;
  n.shape = shape(x);
  n.args = {check(x), check(y)};
  return push(std::move(n));
}

template <class Real>
Val Tape<Real>::affine(Val x, Real scale, Real shift) {
  Node n;
  n.op = Op::kAffine;
  n.shape = shape(x);
  n.args = {check(x)};
  n.scale = scale;
  n.shift = shift;
  return push(std::move(n));
}

template <class Real>
Val Tape<Real>::dropout(Val x, Real rate, uint64_t mask_seed) {
  require(rate >= Real(0) && rate < Real(1),
          "dropout: rate must be in [0,1), got " + std::to_string(rate));
  Node n;
  n.op = Op::kDropout;
  n.shape = shape(x);
  n.args = {check(x)};
  n.scale = rate;
  n.seed = mask_seed;
  return push(std::move(n));
}

template <class Real>
Val Tape<Real>::embed(Val table, const std::vector<Symbol>& symbols, int64_t width, int64_t row) {
  const Shape& ts = shape(table);
  require(ts.size() == 2, "embed: table must be [alphabet,m], got " + shape_str(ts));
  require(width >= 1 && row >= 0 && row < width, "embed: row out of range");
  require(!symbols.empty(), "embed: empty symbol string");
  for (Symbol s : symbols) {
    require(s >= 0 && s < ts[0],
            "embed: out-of-alphabet symbol " + std::to_string(s) + " for table " + shape_str(ts));
  }
  Node n;
  n.op = Op::kEmbed;
  n.shape = {static_cast<int64_t>(symbols.size()), width, ts[1]};
  n.args = {check(table)};
  n.symbols.assign(symbols.begin(), symbols.end());
  n.row = row;
  return push(std::move(n));
}

template <class Real>
Val Tape<Real>::row0_matmul(Val state, Val out_map) {
  const Shape& ss = shape(state);
  const Shape& os = shape(out_map);
  require(ss.size() == 3, "row0_matmul: state must be [n,w,m], got " + shape_str(ss));
  require(os.size() == 2 && os[0] == ss[2],
          "row0_matmul: map must be [m,a] with m matching state, got " + shape_str(os));
  Node n;
  n.op = Op::kRow0Matmul;
  n.shape = {ss[0], os[1]};
  n.args = {check(state), check(out_map)};
  return push(std::move(n));
}

template <class Real>
Val Tape<Real>::mean_cross_entropy(Val logits, const std::vector<Symbol>& targets) {
  const Shape& ls = shape(logits);
  require(ls.size() == 2, "mean_cross_entropy: logits must be [n,alphabet], got " + shape_str(ls));
  require(static_cast<int64_t>(targets.size()) == ls[0],
          "mean_cross_entropy: target count does not match logits " + shape_str(ls));
  for (Symbol t : targets) {
    require(t >= 0 && t < ls[1], "mean_cross_entropy: target symbol out of alphabet");
  }
  Node n;
  n.op = Op::kCrossEntropy;
  n.shape = {};
  n.args = {check(logits)};
  n.symbols.assign(targets.begin(), targets.end());
  return push(std::move(n));
}

template <class Real>
Val Tape<Real>::sum(Val x) {
  Node n;
  n.op = Op::kSum;
  n.shape = {};
  n.args = {check(x)};
  return push(std::move(n));
}

template <class Real>
Val Tape<Real>::spread_penalty(const std::vector<Val>& group) {
  require(group.size() >= 2, "spread_penalty: needs at least two values");
  const Shape& s0 = shape(group[0]);
  Node n;
  n.op = Op::kSpread;
  n.shape = {};
  for (Val v : group) {
    require(shape(v) == s0, "spread_penalty: all values must share one shape");
    n.args.push_back(check(v));
  }
  return push(std::move(n));
}

// --- forward kernels -------------------------------------------------------

namespace {

template <class Real>
Real sigmoid_scalar(Real x) {
  return Real(1) / (Real(1) + std::exp(-x));
}

// Saturation bounds: 1.2*sigmoid(x) - 0.1 leaves (0,1) at |x| = ln 11, and
// 1.2*tanh(x) leaves (-1,1) at |x| = atanh(5/6) = ln(11)/2. Past them the
// clamped value and the zero gradient are known without the transcendental.
template <class Real>
constexpr Real kSatSigmoidBound = Real(2.39789527279837054406);
template <class Real>
constexpr Real kSatTanhBound = Real(1.19894763639918527203);

// keep/scale mask for inverted dropout; pure function of (seed, size, rate).
template <class Real>
void fill_dropout_mask(std::vector<Real>& mask, std::size_t size, Real rate, uint64_t seed) {
  mask.assign(size, Real(1));
  if (rate == Real(0)) return;
  Rng rng(seed);
  std::uniform_real_distribution<Real> unit(Real(0), Real(1));
  const Real scale = Real(1) / (Real(1) - rate);
  for (std::size_t i = 0; i < size; ++i) mask[i] = unit(rng) < rate ? Real(0) : scale;
}

// 3x3 kernel on the standard width-4 grid: one output row (all four columns)
// per pass, so each kernel row load feeds up to four fused multiply-adds and
// the 4 x MO accumulator block never leaves registers.
template <class Real, int MO>
void conv2d_forward_w4(const Real* __restrict in, int64_t n, int64_t m,
                       const Real* __restrict ker, const Real* __restrict bias,
                       Real* __restrict out) {
  for (int64_t i = 0; i < n; ++i) {
    Real acc[4][MO];
    for (int j = 0; j < 4; ++j) {
      for (int co = 0; co < MO; ++co) acc[j][co] = bias[co];
    }
    for (int64_t di = 0; di < 3; ++di) {
      const int64_t ii = i + di - 1;
      if (ii < 0 || ii >= n) continue;
      const Real* __restrict xrow = in + ii * 4 * m;
      const Real* __restrict krow = ker + di * 3 * m * MO;
      for (int64_t ci = 0; ci < m; ++ci) {
        const Real x0 = xrow[ci], x1 = xrow[m + ci], x2 = xrow[2 * m + ci],
                   x3 = xrow[3 * m + ci];
        const Real* __restrict k0 = krow + ci * MO;
        const Real* __restrict k1 = krow + (m + ci) * MO;
        const Real* __restrict k2 = krow + (2 * m + ci) * MO;
        for (int co = 0; co < MO; ++co) {
          acc[0][co] += x0 * k1[co] + x1 * k2[co];
          acc[1][co] += x0 * k0[co] + x1 * k1[co] + x2 * k2[co];
          acc[2][co] += x1 * k0[co] + x2 * k1[co] + x3 * k2[co];
          acc[3][co] += x2 * k0[co] + x3 * k1[co];
        }
      }
    }
    for (int j = 0; j < 4; ++j) {
      Real* __restrict o = out + (i * 4 + j) * MO;
      for (int co = 0; co < MO; ++co) o[co] = acc[j][co];
    }
  }
}

// Same blocking for the input gradient, against the transposed kernel
// kt[di,dj,co,ci]: one input row (four columns) per pass.
template <class Real, int MI>
void conv2d_backward_input_w4(const Real* __restrict kt, int64_t n, int64_t m, int64_t mo,
                              const Real* __restrict g, Real* __restrict gx) {
  for (int64_t ii = 0; ii < n; ++ii) {
    Real acc[4][MI];
    for (int jj = 0; jj < 4; ++jj) {
      for (int ci = 0; ci < MI; ++ci) acc[jj][ci] = 0;
    }
    for (int64_t di = 0; di < 3; ++di) {
      const int64_t i = ii - di + 1;
      if (i < 0 || i >= n) continue;
      const Real* __restrict grow = g + i * 4 * mo;
      const Real* __restrict ktrow = kt + di * 3 * mo * MI;
      for (int64_t co = 0; co < mo; ++co) {
        const Real g0 = grow[co], g1 = grow[mo + co], g2 = grow[2 * mo + co],
                   g3 = grow[3 * mo + co];
        const Real* __restrict t0 = ktrow + co * MI;
        const Real* __restrict t1 = ktrow + (mo + co) * MI;
        const Real* __restrict t2 = ktrow + (2 * mo + co) * MI;
        for (int ci = 0; ci < MI; ++ci) {
          acc[0][ci] += g1 * t0[ci] + g0 * t1[ci];
          acc[1][ci] += g2 * t0[ci] + g1 * t1[ci] + g0 * t2[ci];
          acc[2][ci] += g3 * t0[ci] + g2 * t1[ci] + g1 * t2[ci];
          acc[3][ci] += g3 * t1[ci] + g2 * t2[ci];
        }
      }
    }
    for (int jj = 0; jj < 4; ++jj) {
      Real* __restrict gxr = gx + (ii * 4 + jj) * MI;
      for (int ci = 0; ci < MI; ++ci) gxr[ci] += acc[jj][ci];
    }
  }
}

// Kernel gradient with four input channels per pass so one load of an
// output-gradient row feeds four accumulator blocks.
template <class Real, int MO>
void conv2d_backward_kernel_w4(const Real* __restrict x, int64_t n, int64_t m,
                               const Real* __restrict g, Real* __restrict gk) {
  for (int64_t di = 0; di < 3; ++di) {
    const int64_t i_lo = std::max<int64_t>(0, 1 - di);
    const int64_t i_hi = std::min(n, n + 1 - di);
    for (int64_t dj = 0; dj < 3; ++dj) {
      const int64_t j_lo = std::max<int64_t>(0, 1 - dj);
      const int64_t j_hi = std::min<int64_t>(4, 4 + 1 - dj);
      Real* __restrict gkb = gk + (di * 3 + dj) * m * MO;
      for (int64_t ci = 0; ci < m; ci += 4) {
        Real acc[4][MO];
        for (int b = 0; b < 4; ++b) {
          for (int co = 0; co < MO; ++co) acc[b][co] = 0;
        }
        for (int64_t i = i_lo; i < i_hi; ++i) {
          const int64_t ii = i + di - 1;
          for (int64_t j = j_lo; j < j_hi; ++j) {
            const Real* __restrict xr = x + (ii * 4 + j + dj - 1) * m + ci;
            const Real x0 = xr[0], x1 = xr[1], x2 = xr[2], x3 = xr[3];
            const Real* __restrict gr = g + (i * 4 + j) * MO;
            for (int co = 0; co < MO; ++co) {
              const Real gv = gr[co];
              acc[0][co] += x0 * gv;
              acc[1][co] += x1 * gv;
              acc[2][co] += x2 * gv;
              acc[3][co] += x3 * gv;
            }
          }
        }
        for (int b = 0; b < 4; ++b) {
          Real* __restrict gkr = gkb + (ci + b) * MO;
          for (int co = 0; co < MO; ++co) gkr[co] += acc[b][co];
        }
      }
    }
  }
}

// Fixed output-channel width so the accumulator block stays in registers;
// MO = 0 is the generic fallback with a stack accumulator.
template <class Real, int MO>
void conv2d_forward_mo(const Real* __restrict in, int64_t n, int64_t w, int64_t m,
                       const Real* __restrict ker, int64_t kh, int64_t kw, int64_t mo_runtime,
                       const Real* __restrict bias, Real* __restrict out) {
  constexpr int64_t kMaxFilters = 512;
  const int64_t mo = MO > 0 ? MO : mo_runtime;
  const int64_t ch = kh / 2, cw = kw / 2;
  for (int64_t i = 0; i < n; ++i) {
    for (int64_t j = 0; j < w; ++j) {
      Real acc[MO > 0 ? MO : kMaxFilters];
      for (int64_t co = 0; co < mo; ++co) acc[co] = bias[co];
      for (int64_t di = 0; di < kh; ++di) {
        const int64_t ii = i + di - ch;
        if (ii < 0 || ii >= n) continue;
        for (int64_t dj = 0; dj < kw; ++dj) {
          const int64_t jj = j + dj - cw;
          if (jj < 0 || jj >= w) continue;
          const Real* __restrict x = in + (ii * w + jj) * m;
          const Real* __restrict kbase = ker + (di * kw + dj) * m * mo;
          for (int64_t ci = 0; ci < m; ++ci) {
            const Real xv = x[ci];
            const Real* __restrict krow = kbase + ci * mo;
            for (int64_t co = 0; co < mo; ++co) acc[co] += xv * krow[co];
          }
        }
      }
      Real* __restrict o = out + (i * w + j) * mo;
      for (int64_t co = 0; co < mo; ++co) o[co] = acc[co];
    }
  }
}

template <class Real>
void conv2d_backward_bias(const Real* __restrict g, int64_t n, int64_t w, int64_t mo,
                          Real* __restrict gb) {
  for (int64_t p = 0; p < n * w; ++p) {
    const Real* __restrict gr = g + p * mo;
    for (int64_t co = 0; co < mo; ++co) gb[co] += gr[co];
  }
}

// dK[di,dj,ci,co] += sum over valid (i,j) of x[i+di-ch, j+dj-cw, ci] * g[i,j,co];
// one register-resident accumulator block per (di,dj,ci).
template <class Real, int MO>
void conv2d_backward_kernel_mo(const Real* __restrict x, int64_t n, int64_t w, int64_t m,
                               int64_t kh, int64_t kw, int64_t mo_runtime,
                               const Real* __restrict g, Real* __restrict gk) {
  constexpr int64_t kMaxFilters = 512;
  const int64_t mo = MO > 0 ? MO : mo_runtime;
  const int64_t ch = kh / 2, cw = kw / 2;
  for (int64_t di = 0; di < kh; ++di) {
    const int64_t i_lo = std::max<int64_t>(0, ch - di);
    const int64_t i_hi = std::min(n, n + ch - di);
    for (int64_t dj = 0; dj < kw; ++dj) {
      const int64_t j_lo = std::max<int64_t>(0, cw - dj);
      const int64_t j_hi = std::min(w, w + cw - dj);
      Real* __restrict gkb = gk + (di * kw + dj) * m * mo;
      for (int64_t ci = 0; ci < m; ++ci) {
        Real acc[MO > 0 ? MO : kMaxFilters];
        for (int64_t co = 0; co < mo; ++co) acc[co] = 0;
        for (int64_t i = i_lo; i < i_hi; ++i) {
          const int64_t ii = i + di - ch;
          for (int64_t j = j_lo; j < j_hi; ++j) {
            const Real xv = x[(ii * w + j + dj - cw) * m + ci];
            const Real* __restrict gr = g + (i * w + j) * mo;
            for (int64_t co = 0; co < mo; ++co) acc[co] += xv * gr[co];
          }
        }
        Real* __restrict gkr = gkb + ci * mo;
        for (int64_t co = 0; co < mo; ++co) gkr[co] += acc[co];
      }
    }
  }
}

// dIn[ii,jj,ci] += sum over (di,dj,co) of K[di,dj,ci,co] * g[i,j,co].
// Walks input positions with the kernel transposed to [kh,kw,co,ci] so the
// accumulator block over ci stays in registers (MI = input channels).
template <class Real, int MI>
void conv2d_backward_input_mi(const Real* __restrict kt, int64_t n, int64_t w, int64_t m_runtime,
                              int64_t kh, int64_t kw, int64_t mo, const Real* __restrict g,
                              Real* __restrict gx) {
  constexpr int64_t kMaxFilters = 512;
  const int64_t m = MI > 0 ? MI : m_runtime;
  const int64_t ch = kh / 2, cw = kw / 2;
  for (int64_t ii = 0; ii < n; ++ii) {
    for (int64_t jj = 0; jj < w; ++jj) {
      Real acc[MI > 0 ? MI : kMaxFilters];
      for (int64_t ci = 0; ci < m; ++ci) acc[ci] = 0;
      for (int64_t di = 0; di < kh; ++di) {
        const int64_t i = ii - di + ch;
        if (i < 0 || i >= n) continue;
        for (int64_t dj = 0; dj < kw; ++dj) {
          const int64_t j = jj - dj + cw;
          if (j < 0 || j >= w) continue;
          const Real* __restrict gr = g + (i * w + j) * mo;
          const Real* __restrict ktb = kt + (di * kw + dj) * mo * m;
          for (int64_t co = 0; co < mo; ++co) {
            const Real gv = gr[co];
            const Real* __restrict ktr = ktb + co * m;
            for (int64_t ci = 0; ci < m; ++ci) acc[ci] += gv * ktr[ci];
          }
        }
      }
      Real* __restrict gxr = gx + (ii * w + jj) * m;
      for (int64_t ci = 0; ci < m; ++ci) gxr[ci] += acc[ci];
    }
  }
}

template <class Real>
void conv2d_backward_kernel(const Real* x, int64_t n, int64_t w, int64_t m, int64_t kh, int64_t kw,
                            int64_t mo, const Real* g, Real* gk) {
  if (w == 4 && kh == 3 && kw == 3 && m % 4 == 0) {
    switch (mo) {
      case 8: return conv2d_backward_kernel_w4<Real, 8>(x, n, m, g, gk);
      case 12: return conv2d_backward_kernel_w4<Real, 12>(x, n, m, g, gk);
      case 16: return conv2d_backward_kernel_w4<Real, 16>(x, n, m, g, gk);
      case 24: return conv2d_backward_kernel_w4<Real, 24>(x, n, m, g, gk);
      case 32: return conv2d_backward_kernel_w4<Real, 32>(x, n, m, g, gk);
      case 48: return conv2d_backward_kernel_w4<Real, 48>(x, n, m, g, gk);
      case 64: return conv2d_backward_kernel_w4<Real, 64>(x, n, m, g, gk);
      case 96: return conv2d_backward_kernel_w4<Real, 96>(x, n, m, g, gk);
      case 128: return conv2d_backward_kernel_w4<Real, 128>(x, n, m, g, gk);
      case 256: return conv2d_backward_kernel_w4<Real, 256>(x, n, m, g, gk);
      default: break;
    }
  }
  switch (mo) {
    case 8: return conv2d_backward_kernel_mo<Real, 8>(x, n, w, m, kh, kw, mo, g, gk);
    case 12: return conv2d_backward_kernel_mo<Real, 12>(x, n, w, m, kh, kw, mo, g, gk);
    case 16: return conv2d_backward_kernel_mo<Real, 16>(x, n, w, m, kh, kw, mo, g, gk);
    case 24: return conv2d_backward_kernel_mo<Real, 24>(x, n, w, m, kh, kw, mo, g, gk);
    case 32: return conv2d_backward_kernel_mo<Real, 32>(x, n, w, m, kh, kw, mo, g, gk);
    case 48: return conv2d_backward_kernel_mo<Real, 48>(x, n, w, m, kh, kw, mo, g, gk);
    case 64: return conv2d_backward_kernel_mo<Real, 64>(x, n, w, m, kh, kw, mo, g, gk);
    case 96: return conv2d_backward_kernel_mo<Real, 96>(x, n, w, m, kh, kw, mo, g, gk);
    case 128: return conv2d_backward_kernel_mo<Real, 128>(x, n, w, m, kh, kw, mo, g, gk);
    case 256: return conv2d_backward_kernel_mo<Real, 256>(x, n, w, m, kh, kw, mo, g, gk);
    default: return conv2d_backward_kernel_mo<Real, 0>(x, n, w, m, kh, kw, mo, g, gk);
  }
}

template <class Real>
void conv2d_backward_input(const Real* ker, int64_t n, int64_t w, int64_t m, int64_t kh,
                           int64_t kw, int64_t mo, const Real* g, Real* gx) {
  // One transposed copy of the kernel per call; tiny next to the MAC work.
  std::vector<Real> kt(static_cast<std::size_t>(kh * kw * mo * m));
  for (int64_t win = 0; win < kh * kw; ++win) {
    const Real* src = ker + win * m * mo;
    Real* dst = kt.data() + win * mo * m;
    for (int64_t ci = 0; ci < m; ++ci) {
      for (int64_t co = 0; co < mo; ++co) dst[co * m + ci] = src[ci * mo + co];
    }
  }
  if (w == 4 && kh == 3 && kw == 3) {
    switch (m) {
      case 8: return conv2d_backward_input_w4<Real, 8>(kt.data(), n, m, mo, g, gx);
      case 12: return conv2d_backward_input_w4<Real, 12>(kt.data(), n, m, mo, g, gx);
      case 16: return conv2d_backward_input_w4<Real, 16>(kt.data(), n, m, mo, g, gx);
      case 24: return conv2d_backward_input_w4<Real, 24>(kt.data(), n, m, mo, g, gx);
      case 32: return conv2d_backward_input_w4<Real, 32>(kt.data(), n, m, mo, g, gx);
      case 48: return conv2d_backward_input_w4<Real, 48>(kt.data(), n, m, mo, g, gx);
      case 64: return conv2d_backward_input_w4<Real, 64>(kt.data(), n, m, mo, g, gx);
      case 96: return conv2d_backward_input_w4<Real, 96>(kt.data(), n, m, mo, g, gx);
      case 128: return conv2d_backward_input_w4<Real, 128>(kt.data(), n, m, mo, g, gx);
      case 256: return conv2d_backward_input_w4<Real, 256>(kt.data(), n, m, mo, g, gx);
      default: break;
    }
  }
  switch (m) {
    case 8: return conv2d_backward_input_mi<Real, 8>(kt.data(), n, w, m, kh, kw, mo, g, gx);
    case 12: return conv2d_backward_input_mi<Real, 12>(kt.data(), n, w, m, kh, kw, mo, g, gx);
    case 16: return conv2d_backward_input_mi<Real, 16>(kt.data(), n, w, m, kh, kw, mo, g, gx);
    case 24: return conv2d_backward_input_mi<Real, 24>(kt.data(), n, w, m, kh, kw, mo, g, gx);
    case 32: return conv2d_backward_input_mi<Real, 32>(kt.data(), n, w, m, kh, kw, mo, g, gx);
    case 48: return conv2d_backward_input_mi<Real, 48>(kt.data(), n, w, m, kh, kw, mo, g, gx);
    case 64: return conv2d_backward_input_mi<Real, 64>(kt.data(), n, w, m, kh, kw, mo, g, gx);
    case 96: return conv2d_backward_input_mi<Real, 96>(kt.data(), n, w, m, kh, kw, mo, g, gx);
    case 128: return conv2d_backward_input_mi<Real, 128>(kt.data(), n, w, m, kh, kw, mo, g, gx);
    case 256: return conv2d_backward_input_mi<Real, 256>(kt.data(), n, w, m, kh, kw, mo, g, gx);
    default: return conv2d_backward_input_mi<Real, 0>(kt.data(), n, w, m, kh, kw, mo, g, gx);
  }
}

template <class Real>
void conv2d_forward(const Real* in, int64_t n, int64_t w, int64_t m, const Real* ker, int64_t kh,
                    int64_t kw, int64_t mo, const Real* bias, Real* out) {
  require(mo <= 512 && m <= 512, "conv2d: at most 512 filters per side");
  if (w == 4 && kh == 3 && kw == 3) {
    switch (mo) {
      case 8: return conv2d_forward_w4<Real, 8>(in, n, m, ker, bias, out);
      case 12: return conv2d_forward_w4<Real, 12>(in, n, m, ker, bias, out);
      case 16: return conv2d_forward_w4<Real, 16>(in, n, m, ker, bias, out);
      case 24: return conv2d_forward_w4<Real, 24>(in, n, m, ker, bias, out);
      case 32: return conv2d_forward_w4<Real, 32>(in, n, m, ker, bias, out);
      case 48: return conv2d_forward_w4<Real, 48>(in, n, m, ker, bias, out);
      case 64: return conv2d_forward_w4<Real, 64>(in, n, m, ker, bias, out);
      case 96: return conv2d_forward_w4<Real, 96>(in, n, m, ker, bias, out);
      case 128: return conv2d_forward_w4<Real, 128>(in, n, m, ker, bias, out);
      case 256: return conv2d_forward_w4<Real, 256>(in, n, m, ker, bias, out);
      default: break;
    }
  }
  switch (mo) {
    case 8: return conv2d_forward_mo<Real, 8>(in, n, w, m, ker, kh, kw, mo, bias, out);
    case 12: return conv2d_forward_mo<Real, 12>(in, n, w, m, ker, kh, kw, mo, bias, out);
    case 16: return conv2d_forward_mo<Real, 16>(in, n, w, m, ker, kh, kw, mo, bias, out);
    case 24: return conv2d_forward_mo<Real, 24>(in, n, w, m, ker, kh, kw, mo, bias, out);
    case 32: return conv2d_forward_mo<Real, 32>(in, n, w, m, ker, kh, kw, mo, bias, out);
    case 48: return conv2d_forward_mo<Real, 48>(in, n, w, m, ker, kh, kw, mo, bias, out);
    case 64: return conv2d_forward_mo<Real, 64>(in, n, w, m, ker, kh, kw, mo, bias, out);
    case 96: return conv2d_forward_mo<Real, 96>(in, n, w, m, ker, kh, kw, mo, bias, out);
    case 128: return conv2d_forward_mo<Real, 128>(in, n, w, m, ker, kh, kw, mo, bias, out);
    case 256: return conv2d_forward_mo<Real, 256>(in, n, w, m, ker, kh, kw, mo, bias, out);
    default: return conv2d_forward_mo<Real, 0>(in, n, w, m, ker, kh, kw, mo, bias, out);
  }
}

}  // namespace

template <class Real>
void Tape<Real>::compute(Node& n) {
  n.value.assign(static_cast<std::size_t>(numel(n.shape)), Real(0));
  switch (n.op) {
    case Op::kLeaf:
    case Op::kConstant:
      throw std::logic_error("Tape: compute called on input node");
    case Op::kConv2d: {
      auto x = node_value(n.args[0]);
      auto k = node_value(n.args[1]);
      auto b = node_value(n.args[2]);
      const Shape& xs = nodes_[n.args[0]].shape;
      const Shape& ks = nodes_[n.args[1]].shape;
      conv2d_forward(x.data(), xs[0], xs[1], xs[2], k.data(), ks[0], ks[1], ks[3], b.data(),
                     n.value.data());
      break;
    }
    case Op::kSatSigmoid: {
      auto x = node_value(n.args[0]);
      for (std::size_t i = 0; i < x.size(); ++i) {
        const Real v = x[i];
        if (v >= kSatSigmoidBound<Real>) n.value[i] = Real(1);
        else if (v <= -kSatSigmoidBound<Real>) n.value[i] = Real(0);
        else {
          const Real y = Real(1.2) * sigmoid_scalar(v) - Real(0.1);
          n.value[i] = std::clamp(y, Real(0), Real(1));
        }
      }
      break;
    }
    case Op::kSatTanh: {
      auto x = node_value(n.args[0]);
      for (std::size_t i = 0; i < x.size(); ++i) {
        const Real v = x[i];
        if (v >= kSatTanhBound<Real>) n.value[i] = Real(1);
        else if (v <= -kSatTanhBound<Real>) n.value[i] = Real(-1);
        else {
          const Real y = Real(1.2) * std::tanh(v);
          n.value[i] = std::clamp(y, Real(-1), Real(1));
        }
      }
      break;
    }
    case Op::kSigmoid: {
      auto x = node_value(n.args[0]);
      for (std::size_t i = 0; i < x.size(); ++i) n.value[i] = sigmoid_scalar(x[i]);
      break;
    }
    case Op::kTanh: {
      auto x = node_value(n.args[0]);
      for (std::size_t i = 0; i < x.size(); ++i) n.value[i] = std::tanh(x[i]);
      break;
    }
    case Op::kAdd: {
      auto x = node_value(n.args[0]);
      auto y = node_value(n.args[1]);
      for (std::size_t i = 0; i < x.size(); ++i) n.value[i] = x[i] + y[i];
      break;
    }
    case Op::kMul: {
      auto x = node_value(n.args[0]);
      auto y = node_value(n.args[1]);
      for (std::size_t i = 0; i < x.size(); ++i) n.value[i] = x[i] * y[i];
      break;
    }
    case Op::kAffine: {
      auto x = node_value(n.args[0]);
      for (std::size_t i = 0; i < x.size(); ++i) n.value[i] = n.scale * x[i] + n.shift;
      break;
    }
    case Op::kDropout: {
      auto x = node_value(n.args[0]);
      std::vector<Real> mask;
      fill_dropout_mask(mask, x.size(), n.scale, n.seed);
      for (std::size_t i = 0; i < x.size(); ++i) n.value[i] = x[i] * mask[i];
      break;
    }
    case Op::kEmbed: {
      auto table = node_value(n.args[0]);
      const int64_t m = n.shape[2], w = n.shape[1];
      for (std::size_t i = 0; i < n.symbols.size(); ++i) {
        const Real* src = table.data() + static_cast<int64_t>(n.symbols[i]) * m;
        Real* dst = n.value.data() + (static_cast<int64_t>(i) * w + n.row) * m;
        std::memcpy(dst, src, sizeof(Real) * static_cast<std::size_t>(m));
      }
      break;
    }
    case Op::kRow0Matmul: {
      auto s = node_value(n.args[0]);
      auto o = node_value(n.args[1]);
      const Shape& ss = nodes_[n.args[0]].shape;
      const int64_t nlen = ss[0], w = ss[1], m = ss[2], a = n.shape[1];
      for (int64_t i = 0; i < nlen; ++i) {
        const Real* row = s.data() + i * w * m;  // row 0 of position i
        Real* out = n.value.data() + i * a;
        for (int64_t c = 0; c < m; ++c) {
          const Real sv = row[c];
          const Real* orow = o.data() + c * a;
          for (int64_t k = 0; k < a; ++k) out[k] += sv * orow[k];
        }
      }
      break;
    }
    case Op::kCrossEntropy: {
      auto l = node_value(n.args[0]);
      const Shape& ls = nodes_[n.args[0]].shape;
      const int64_t nlen = ls[0], a = ls[1];
      Real total = 0;
      for (int64_t i = 0; i < nlen; ++i) {
        const Real* row = l.data() + i * a;
        Real mx = row[0];
        for (int64_t k = 1; k < a; ++k) mx = std::max(mx, row[k]);
        Real z = 0;
        for (int64_t k = 0; k < a; ++k) z += std::exp(row[k] - mx);
        const Real lse = mx + std::log(z);
        total += lse - row[n.symbols[static_cast<std::size_t>(i)]];
      }
      n.value[0] = total / static_cast<Real>(nlen);
      break;
    }
    case Op::kSum: {
      auto x = node_value(n.args[0]);
      Real total = 0;
      for (Real v : x) total += v;
      n.value[0] = total;
      break;
    }
    case Op::kSpread: {
      const std::size_t g = n.args.size();
      auto first = node_value(n.args[0]);
      const std::size_t len = first.size();
      Real total = 0;
      std::vector<Real> mean(len, Real(0));
      for (int32_t arg : n.args) {
        auto x = node_value(arg);
        for (std::size_t i = 0; i < len; ++i) mean[i] += x[i];
      }
      for (std::size_t i = 0; i < len; ++i) mean[i] /= static_cast<Real>(g);
      for (int32_t arg : n.args) {
        auto x = node_value(arg);
        for (std::size_t i = 0; i < len; ++i) {
          const Real d = x[i] - mean[i];
          total += d * d;
        }
      }
      n.value[0] = total;
      break;
    }
  }
}

// --- backward kernels ------------------------------------------------------

template <class Real>
void Tape<Real>::backprop(Node& n) {
  const std::vector<Real>& g = n.grad;
  switch (n.op) {
    case Op::kLeaf:
    case Op::kConstant:
      break;
    case Op::kConv2d: {
      const int32_t xi = n.args[0], ki = n.args[1], bi = n.args[2];
      auto x = node_value(xi);
      auto k = node_value(ki);
      const Shape& xs = nodes_[xi].shape;
      const Shape& ks = nodes_[ki].shape;
      if (arg_needs_grad(bi)) {
        conv2d_backward_bias(g.data(), xs[0], xs[1], ks[3], grad_buffer(bi).data());
      }
      if (arg_needs_grad(ki)) {
        conv2d_backward_kernel(x.data(), xs[0], xs[1], xs[2], ks[0], ks[1], ks[3], g.data(),
                               grad_buffer(ki).data());
      }
      if (arg_needs_grad(xi)) {
        conv2d_backward_input(k.data(), xs[0], xs[1], xs[2], ks[0], ks[1], ks[3], g.data(),
                              grad_buffer(xi).data());
      }
      break;
    }
    case Op::kSatSigmoid: {
      if (!arg_needs_grad(n.args[0])) break;
      auto x = node_value(n.args[0]);
      auto gx = grad_buffer(n.args[0]);
      for (std::size_t i = 0; i < x.size(); ++i) {
        const Real v = x[i];
        if (v >= kSatSigmoidBound<Real> || v <= -kSatSigmoidBound<Real>) continue;
        const Real s = sigmoid_scalar(v);
        const Real pre = Real(1.2) * s - Real(0.1);
        if (pre > Real(0) && pre < Real(1)) gx[i] += Real(1.2) * s * (Real(1) - s) * g[i];
      }
      break;
    }
    case Op::kSatTanh: {
      if (!arg_needs_grad(n.args[0])) break;
      auto x = node_value(n.args[0]);
      auto gx = grad_buffer(n.args[0]);
      for (std::size_t i = 0; i < x.size(); ++i) {
        const Real v = x[i];
        if (v >= kSatTanhBound<Real> || v <= -kSatTanhBound<Real>) continue;
        const Real t = std::tanh(v);
        const Real pre = Real(1.2) * t;
        if (pre > Real(-1) && pre < Real(1)) gx[i] += Real(1.2) * (Real(1) - t * t) * g[i];
      }
      break;
    }
    case Op::kSigmoid: {
      if (!arg_needs_grad(n.args[0])) break;
      auto gx = grad_buffer(n.args[0]);
      for (std::size_t i = 0; i < n.value.size(); ++i) {
        const Real s = n.value[i];
        gx[i] += s * (Real(1) - s) * g[i];
      }
      break;
    }
    case Op::kTanh: {
      if (!arg_needs_grad(n.args[0])) break;
      auto gx = grad_buffer(n.args[0]);
      for (std::size_t i = 0; i < n.value.size(); ++i) {
        const Real t = n.value[i];
        gx[i] += (Real(1) - t * t) * g[i];
      }
      break;
    }
    case Op::kAdd: {
      for (int a = 0; a < 2; ++a) {
        if (!arg_needs_grad(n.args[a])) continue;
        auto gx = grad_buffer(n.args[a]);
        for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
      }
      break;
    }
    case Op::kMul: {
      for (int a = 0; a < 2; ++a) {
        if (!arg_needs_grad(n.args[a])) continue;
        auto other = node_value(n.args[1 - a]);
        auto gx = grad_buffer(n.args[a]);
        for (std::size_t i = 0; i < g.size(); ++i) gx[i] += other[i] * g[i];
      }
      break;
    }
    case Op::kAffine: {
      if (!arg_needs_grad(n.args[0])) break;
      auto gx = grad_buffer(n.args[0]);
      for (std::size_t i = 0; i < g.size(); ++i) gx[i] += n.scale * g[i];
      break;
    }
    case Op::kDropout: {
      if (!arg_needs_grad(n.args[0])) break;
      std::vector<Real> mask;
      fill_dropout_mask(mask, g.size(), n.scale, n.seed);
      auto gx = grad_buffer(n.args[0]);
      for (std::size_t i = 0; i < g.size(); ++i) gx[i] += mask[i] * g[i];
      break;
    }
    case Op::kEmbed: {
      if (!arg_needs_grad(n.args[0])) break;
      auto gt = grad_buffer(n.args[0]);
      const int64_t m = n.shape[2], w = n.shape[1];
      for (std::size_t i = 0; i < n.symbols.size(); ++i) {
        const Real* src = g.data() + (static_cast<int64_t>(i) * w + n.row) * m;
        Real* dst = gt.data() + static_cast<int64_t>(n.symbols[i]) * m;
        for (int64_t c = 0; c < m; ++c) dst[c] += src[c];
      }
      break;
    }
    case Op::kRow0Matmul: {
      const int32_t si = n.args[0], oi = n.args[1];
      const Shape& ss = nodes_[si].shape;
      const int64_t nlen = ss[0], w = ss[1], m = ss[2], a = n.shape[1];
      if (arg_needs_grad(oi)) {
        auto s = node_value(si);
        auto go = grad_buffer(oi);
        for (int64_t i = 0; i < nlen; ++i) {
          const Real* row = s.data() + i * w * m;
          const Real* gr = g.data() + i * a;
          for (int64_t c = 0; c < m; ++c) {
            Real* gor = go.data() + c * a;
            const Real sv = row[c];
            for (int64_t k = 0; k < a; ++k) gor[k] += sv * gr[k];
          }
        }
      }
      if (arg_needs_grad(si)) {
        auto o = node_value(oi);
        auto gs = grad_buffer(si);
        for (int64_t i = 0; i < nlen; ++i) {
          Real* grow = gs.data() + i * w * m;
          const Real* gr = g.data() + i * a;
          for (int64_t c = 0; c < m; ++c) {
            const Real* orow = o.data() + c * a;
            Real dot = 0;
            for (int64_t k = 0; k < a; ++k) dot += orow[k] * gr[k];
            grow[c] += dot;
          }
        }
      }
      break;
    }
    case Op::kCrossEntropy: {
      if (!arg_needs_grad(n.args[0])) break;
      auto l = node_value(n.args[0]);
      const Shape& ls = nodes_[n.args[0]].shape;
      const int64_t nlen = ls[0], a = ls[1];
      auto gl = grad_buffer(n.args[0]);
      const Real scale = g[0] / static_cast<Real>(nlen);
      for (int64_t i = 0; i < nlen; ++i) {
        const Real* row = l.data() + i * a;
        Real mx = row[0];
        for (int64_t k = 1; k < a; ++k) mx = std::max(mx, row[k]);
        Real z = 0;
        for (int64_t k = 0; k < a; ++k) z += std::exp(row[k] - mx);
        Real* gr = gl.data() + i * a;
        const Symbol t = n.symbols[static_cast<std::size_t>(i)];
        for (int64_t k = 0; k < a; ++k) {
          const Real p = std::exp(row[k] - mx) / z;
          gr[k] += (p - (k == t ? Real(1) : Real(0))) * scale;
        }
      }
      break;
    }
    case Op::kSum: {
      if (!arg_needs_grad(n.args[0])) break;
      auto gx = grad_buffer(n.args[0]);
      for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += g[0];
      break;
    }
    case Op::kSpread: {
      const std::size_t cnt = n.args.size();
      auto first = node_value(n.args[0]);
      const std::size_t len = first.size();
      std::vector<Real> mean(len, Real(0));
      for (int32_t arg : n.args) {
        auto x = node_value(arg);
        for (std::size_t i = 0; i < len; ++i) mean[i] += x[i];
      }
      for (std::size_t i = 0; i < len; ++i) mean[i] /= static_cast<Real>(cnt);
      // d/dx_j of sum_i ||x_i - mean||^2 is 2 (x_j - mean); the cross terms
      // cancel because the deviations sum to zero.
      for (int32_t arg : n.args) {
        if (!arg_needs_grad(arg)) continue;
        auto x = node_value(arg);
        auto gx = grad_buffer(arg);
        for (std::size_t i = 0; i < len; ++i) gx[i] += Real(2) * (x[i] - mean[i]) * g[0];
      }
      break;
    }
  }
}

// --- segments and backward -------------------------------------------------

template <class Real>
void Tape<Real>::begin_segment() {
  require(open_segment_begin_ < 0, "begin_segment: segments cannot nest");
  open_segment_begin_ = static_cast<int32_t>(nodes_.size());
}

template <class Real>
void Tape<Real>::end_segment(const std::vector<Val>& keep) {
  require(open_segment_begin_ >= 0, "end_segment: no open segment");
  Segment seg;
  seg.begin = open_segment_begin_;
  seg.end = static_cast<int32_t>(nodes_.size());
  for (Val v : keep) seg.keep.push_back(check(v));
  open_segment_begin_ = -1;
  if (seg.end == seg.begin) return;
  const int32_t idx = static_cast<int32_t>(segments_.size());
  for (int32_t j = seg.begin; j < seg.end; ++j) seg_of_[static_cast<std::size_t>(j)] = idx;
  if (mode_ == MemoryMode::kRecompute) {
    for (int32_t j = seg.begin; j < seg.end; ++j) {
      Node& n = nodes_[static_cast<std::size_t>(j)];
      if (n.op == Op::kLeaf || n.op == Op::kConstant) continue;
      if (std::find(seg.keep.begin(), seg.keep.end(), j) != seg.keep.end()) continue;
      n.value = {};
      n.dropped = true;
    }
  }
  segments_.push_back(std::move(seg));
}

template <class Real>
void Tape<Real>::replay_segment(const Segment& s) {
  for (int32_t j = s.begin; j < s.end; ++j) {
    Node& n = nodes_[static_cast<std::size_t>(j)];
    if (n.dropped) {
      compute(n);
      n.dropped = false;
    }
  }
}

template <class Real>
void Tape<Real>::release_segment(const Segment& s) {
  for (int32_t j = s.begin; j < s.end; ++j) {
    Node& n = nodes_[static_cast<std::size_t>(j)];
    if (n.op == Op::kLeaf || n.op == Op::kConstant) continue;
    n.value = {};
    n.grad = {};
    n.dropped = true;
  }
}

template <class Real>
void Tape<Real>::backward(Val loss, Real seed_grad) {
  require(!backward_done_, "backward: already called on this tape");
  require(open_segment_begin_ < 0, "backward: a segment is still open");
  const int32_t lid = check(loss);
  require(numel(nodes_[static_cast<std::size_t>(lid)].shape) == 1,
          "backward: loss must be scalar, got " +
              shape_str(nodes_[static_cast<std::size_t>(lid)].shape));
  require(nodes_[static_cast<std::size_t>(lid)].needs_grad,
          "backward: loss is detached from every requires_grad leaf");
  backward_done_ = true;
  grad_buffer(lid)[0] = seed_grad;

  int32_t i = lid;
  while (i >= 0) {
    const int32_t si = seg_of_[static_cast<std::size_t>(i)];
    if (si < 0) {
      Node& n = nodes_[static_cast<std::size_t>(i)];
      if (n.needs_grad && !n.grad.empty()) backprop(n);
      --i;
      continue;
    }
    const Segment& seg = segments_[static_cast<std::size_t>(si)];
    if (mode_ == MemoryMode::kRecompute) replay_segment(seg);
    for (int32_t j = std::min(i, seg.end - 1); j >= seg.begin; --j) {
      Node& n = nodes_[static_cast<std::size_t>(j)];
      if (n.needs_grad && !n.grad.empty()) backprop(n);
    }
    if (mode_ == MemoryMode::kRecompute) release_segment(seg);
    i = seg.begin - 1;
  }

  // Flush gradients of registered leaves into their tensors.
  for (auto& [tensor, id] : leaf_ids_) {
    Node& n = nodes_[static_cast<std::size_t>(id)];
    if (!n.leaf->requires_grad || n.grad.empty()) continue;
    if (!n.leaf->grad) n.leaf->grad.emplace(n.leaf->data.size(), Real(0));
    auto& dst = *n.leaf->grad;
    for (std::size_t k = 0; k < dst.size(); ++k) dst[k] += n.grad[k];
  }
}

template <class Real>
std::span<const Real> Tape<Real>::value(Val v) const {
  return node_value(check(v));
}

template <class Real>
const Shape& Tape<Real>::shape(Val v) const {
  return node(v).shape;
}

template <class Real>
std::span<const Real> Tape<Real>::grad(Val v) const {
  const Node& n = node(v);
  return {n.grad.data(), n.grad.size()};
}

template struct Tensor<float>;
template struct Tensor<double>;
template class Tape<float>;
template class Tape<double>;

}  // namespace ngpu
