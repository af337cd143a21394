#pragma once

// Block-wise Hadamard binarization: a tensor is approximated as the
// elementwise product of a per-block scale (the block mean of absolute
// values, delta) and its sign pattern. beta is the block length; beta=1
// reproduces the input exactly, beta=row-length degenerates to one scalar
// scale per row. Includes the straight-through surrogate derivative and the
// backward rule through the binarization.

#include <cmath>
#include <cstddef>
#include <span>
#include <stdexcept>
#include <vector>

#include "hadanet/tensor.hpp"

namespace hadanet {

// Sign with Sign(0) := +1 so the code stays two-valued and packable.
inline float sign_pm1(float x) { return x < 0.0f ? -1.0f : 1.0f; }

// Straight-through estimator for d Sign(x)/dx: 1 inside the unit interval
// (boundary inclusive), 0 outside.
inline float ste_sign_grad(float x) {
  return std::fabs(x) <= 1.0f ? 1.0f : 0.0f;
}

namespace detail {
inline void check_beta(std::size_t beta, const char* who) {
  if (beta < 1)
    throw std::invalid_argument(std::string(who) + ": beta must be >= 1");
}
}  // namespace detail

// Writes, for every element of v, the mean of |v| over its block
// [beta*floor(i/beta), min(beta*(floor(i/beta)+1), n)). The final block may
// be shorter than beta; it averages over its actual length.
inline void delta_blocks_into(const float* v, std::size_t n, std::size_t beta,
                              float* out) {
  for (std::size_t lo = 0; lo < n; lo += beta) {
    const std::size_t hi = std::min(lo + beta, n);
    float sum = 0.0f;
    for (std::size_t i = lo; i < hi; ++i) sum += std::fabs(v[i]);
    const float mean = sum / static_cast<float>(hi - lo);
    for (std::size_t i = lo; i < hi; ++i) out[i] = mean;
  }
}

inline std::vector<float> delta_blocks(std::span<const float> v,
                                       std::size_t beta) {
  detail::check_beta(beta, "delta_blocks");
  std::vector<float> out(v.size());
  delta_blocks_into(v.data(), v.size(), beta, out.data());
  return out;
}

namespace detail {
// delta * sign over one contiguous row segment.
inline void binarize_row(const float* v, std::size_t n, std::size_t beta,
                         float* out) {
  for (std::size_t lo = 0; lo < n; lo += beta) {
    const std::size_t hi = std::min(lo + beta, n);
    float sum = 0.0f;
    for (std::size_t i = lo; i < hi; ++i) sum += std::fabs(v[i]);
    const float mean = sum / static_cast<float>(hi - lo);
    for (std::size_t i = lo; i < hi; ++i) out[i] = mean * sign_pm1(v[i]);
  }
}
}  // namespace detail

// Weight binarization: each filter (leading extent) is flattened row-major
// and blocked independently; blocks never straddle filters. Result has the
// original shape with every element replaced by block-mean(|.|) * sign.
inline Tensor binarize_weights(const Tensor& w, std::size_t beta_w) {
  detail::check_beta(beta_w, "binarize_weights");
  if (w.rank() < 2)
    throw std::invalid_argument(
        "binarize_weights: need rank >= 2 (filters x rest), got " +
        w.shape_str());
  const std::size_t rows = w.extent(0);
  const std::size_t rowlen = w.numel() / rows;
  Tensor out(w.shape());
  for (std::size_t r = 0; r < rows; ++r)
    detail::binarize_row(w.data() + r * rowlen, rowlen, beta_w,
                         out.data() + r * rowlen);
  return out;
}

// Activation binarization: blocks run along the last (width) axis within
// each (leading indices, row) segment. beta_a may not exceed the width.
inline Tensor binarize_activations(const Tensor& a, std::size_t beta_a) {
  detail::check_beta(beta_a, "binarize_activations");
  if (a.rank() < 1)
    throw std::invalid_argument("binarize_activations: rank-0 input");
  const std::size_t width = a.extent(a.rank() - 1);
  if (beta_a > width)
    throw std::invalid_argument("binarize_activations: beta_a " +
                                std::to_string(beta_a) + " exceeds width " +
                                std::to_string(width));
  Tensor out(a.shape());
  const std::size_t nrows = a.numel() / width;
  for (std::size_t r = 0; r < nrows; ++r)
    detail::binarize_row(a.data() + r * width, width, beta_a,
                         out.data() + r * width);
  return out;
}

namespace detail {
// Backward through delta*sign over one row segment. For each block B:
//   dC/dW_i = (1/|B|) * Sign(W_i) * sum_{j in B} g_j * Sign(W_j)
//           + delta_i * g_i * ste_sign_grad(W_i)
// with 1/|B| the actual block length on a ragged tail.
inline void binarize_backward_row(const float* w, const float* g,
                                  std::size_t n, std::size_t beta,
                                  float* out) {
  for (std::size_t lo = 0; lo < n; lo += beta) {
    const std::size_t hi = std::min(lo + beta, n);
    const float inv = 1.0f / static_cast<float>(hi - lo);
    float abs_sum = 0.0f;
    float g_dot_sign = 0.0f;
    for (std::size_t i = lo; i < hi; ++i) {
      abs_sum += std::fabs(w[i]);
      g_dot_sign += g[i] * sign_pm1(w[i]);
    }
    const float delta = abs_sum * inv;
    for (std::size_t i = lo; i < hi; ++i) {
      out[i] = inv * sign_pm1(w[i]) * g_dot_sign +
               delta * g[i] * ste_sign_grad(w[i]);
    }
  }
}
}  // namespace detail

// Gradient of the cost w.r.t. the pre-binarization vector, given the
// gradient w.r.t. the binarized vector.
inline std::vector<float> hadamard_backward(std::span<const float> w,
                                            std::span<const float> grad_wtilde,
                                            std::size_t beta_w) {
  detail::check_beta(beta_w, "hadamard_backward");
  if (w.size() != grad_wtilde.size())
    throw std::invalid_argument("hadamard_backward: length mismatch");
  std::vector<float> out(w.size());
  detail::binarize_backward_row(w.data(), grad_wtilde.data(), w.size(), beta_w,
                                out.data());
  return out;
}

// Same rule applied per filter row of a rank >= 2 master-weight tensor,
// matching the blocking binarize_weights used on the forward pass.
inline Tensor hadamard_backward_rows(const Tensor& w,
                                     const Tensor& grad_wtilde,
                                     std::size_t beta_w) {
  detail::check_beta(beta_w, "hadamard_backward_rows");
  if (w.shape() != grad_wtilde.shape())
    throw std::invalid_argument("hadamard_backward_rows: shape mismatch");
  if (w.rank() < 2)
    throw std::invalid_argument("hadamard_backward_rows: need rank >= 2");
  const std::size_t rows = w.extent(0);
  const std::size_t rowlen = w.numel() / rows;
  Tensor out(w.shape());
  for (std::size_t r = 0; r < rows; ++r)
    detail::binarize_backward_row(w.data() + r * rowlen,
                                  grad_wtilde.data() + r * rowlen, rowlen,
                                  beta_w, out.data() + r * rowlen);
  return out;
}

// Backward through activation binarization: identical rule, applied per
// width-axis segment.
inline Tensor activation_backward(const Tensor& a, const Tensor& grad_atilde,
                                  std::size_t beta_a) {
  detail::check_beta(beta_a, "activation_backward");
  if (a.shape() != grad_atilde.shape())
    throw std::invalid_argument("activation_backward: shape mismatch");
  const std::size_t width = a.extent(a.rank() - 1);
  if (beta_a > width)
    throw std::invalid_argument("activation_backward: beta_a exceeds width");
  Tensor out(a.shape());
  const std::size_t nrows = a.numel() / width;
  for (std::size_t r = 0; r < nrows; ++r)
    detail::binarize_backward_row(a.data() + r * width,
                                  grad_atilde.data() + r * width, width,
                                  beta_a, out.data() + r * width);
  return out;
}

}  // namespace hadanet
