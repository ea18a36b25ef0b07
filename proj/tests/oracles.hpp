// Independent oracles used by the tests: these deliberately re-derive results
// with different code paths (plain loops, finite differences, repeated
// division) so they can catch bugs in the library implementations.
#pragma once

#include <cmath>
#include <functional>
#include <random>
#include <vector>

#include "ngpu/tensor.hpp"

namespace oracles {

// Direct quadruple-loop convolution with zero padding.
template <class Real>
std::vector<Real> brute_conv2d(const std::vector<Real>& in, int64_t n, int64_t w, int64_t m,
                               const std::vector<Real>& ker, int64_t kh, int64_t kw, int64_t mo,
                               const std::vector<Real>& bias) {
  std::vector<Real> out(static_cast<std::size_t>(n * w * mo), Real(0));
  for (int64_t i = 0; i < n; ++i)
    for (int64_t j = 0; j < w; ++j)
      for (int64_t co = 0; co < mo; ++co) {
        Real acc = bias[static_cast<std::size_t>(co)];
        for (int64_t di = 0; di < kh; ++di)
          for (int64_t dj = 0; dj < kw; ++dj)
            for (int64_t ci = 0; ci < m; ++ci) {
              const int64_t ii = i + di - kh / 2;
              const int64_t jj = j + dj - kw / 2;
              if (ii < 0 || ii >= n || jj < 0 || jj >= w) continue;
              acc += in[static_cast<std::size_t>((ii * w + jj) * m + ci)] *
                     ker[static_cast<std::size_t>(((di * kw + dj) * m + ci) * mo + co)];
            }
        out[static_cast<std::size_t>((i * w + j) * mo + co)] = acc;
      }
  return out;
}

struct GradCheckResult {
  double worst_rel = 0;
  double fraction_within = 1;  // coordinates with rel error < inner tolerance
  int64_t coords = 0;
};

// Central finite differences (step h) against already-populated analytic
// gradients on the leaves. eval() must recompute the loss from the current
// leaf data.
inline GradCheckResult check_gradients(const std::vector<ngpu::Tensor<double>*>& leaves,
                                       const std::function<double()>& eval, double h = 1e-5,
                                       double inner_tol = 1e-4) {
  GradCheckResult result;
  int64_t within = 0;
  for (ngpu::Tensor<double>* leaf : leaves) {
    for (std::size_t k = 0; k < leaf->data.size(); ++k) {
      const double saved = leaf->data[k];
      leaf->data[k] = saved + h;
      const double up = eval();
      leaf->data[k] = saved - h;
      const double down = eval();
      leaf->data[k] = saved;
      const double fd = (up - down) / (2.0 * h);
      const double analytic = leaf->grad ? (*leaf->grad)[k] : 0.0;
      const double denom = std::max({std::fabs(fd), std::fabs(analytic), 1e-8});
      const double rel = std::fabs(fd - analytic) / denom;
      result.worst_rel = std::max(result.worst_rel, rel);
      ++result.coords;
      within += rel < inner_tol ? 1 : 0;
    }
  }
  result.fraction_within =
      result.coords ? static_cast<double>(within) / static_cast<double>(result.coords) : 1.0;
  return result;
}

// Straight-line re-implementation of one CGRU layer (no tape, no dropout):
// u = sat_sigmoid(conv(s,U)+bu), r = sat_sigmoid(conv(s,R)+br),
// c = sat_tanh(conv(r*s,W)+b), s' = u*s + (1-u)*c.
template <class Real>
std::vector<Real> straight_line_cgru(const std::vector<Real>& s, int64_t n, int64_t w, int64_t m,
                                     const std::vector<Real>& uk, const std::vector<Real>& ub,
                                     const std::vector<Real>& rk, const std::vector<Real>& rb,
                                     const std::vector<Real>& ck, const std::vector<Real>& cb,
                                     bool cutoff) {
  auto sig = [&](Real x) {
    const Real v = Real(1) / (Real(1) + std::exp(-x));
    if (!cutoff) return v;
    return std::clamp(Real(1.2) * v - Real(0.1), Real(0), Real(1));
  };
  auto th = [&](Real x) {
    const Real v = std::tanh(x);
    if (!cutoff) return v;
    return std::clamp(Real(1.2) * v, Real(-1), Real(1));
  };
  const auto u_pre = brute_conv2d(s, n, w, m, uk, 3, 3, m, ub);
  const auto r_pre = brute_conv2d(s, n, w, m, rk, 3, 3, m, rb);
  std::vector<Real> u(u_pre.size()), r(r_pre.size()), gated(s.size());
  for (std::size_t i = 0; i < u.size(); ++i) u[i] = sig(u_pre[i]);
  for (std::size_t i = 0; i < r.size(); ++i) r[i] = sig(r_pre[i]);
  for (std::size_t i = 0; i < s.size(); ++i) gated[i] = r[i] * s[i];
  const auto c_pre = brute_conv2d(gated, n, w, m, ck, 3, 3, m, cb);
  std::vector<Real> out(s.size());
  for (std::size_t i = 0; i < s.size(); ++i) {
    const Real c = th(c_pre[i]);
    out[i] = u[i] * s[i] + (Real(1) - u[i]) * c;
  }
  return out;
}

inline std::vector<double> random_vector(std::size_t size, std::mt19937_64& rng, double scale) {
  std::uniform_real_distribution<double> dist(-scale, scale);
  std::vector<double> out(size);
  for (double& v : out) v = dist(rng);
  return out;
}

}  // namespace oracles
