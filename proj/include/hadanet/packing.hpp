#pragma once

// Bit-packed storage for Hadamard-binarized tensors and the xHBNN multiply
// kernel. A packed row keeps one float scale per block of beta elements and
// one sign bit per element (64-bit words, LSB-first, pad bits forced to 0).
// The dot of two packed rows is computed per block as
//   scale_w * scale_a * (2*popcount(xnor(bits_w, bits_a)) - n)
// where n is the true element count of the block; popcount(xnor) counts
// agreements, and 2*agreements - n is the +/-1 dot product.

#include <bit>
#include <cstddef>
#include <cstdint>
#include <numeric>
#include <span>
#include <stdexcept>
#include <vector>

#include "hadanet/hadamard.hpp"
#include "hadanet/tensor.hpp"

namespace hadanet {

inline std::size_t block_count(std::size_t len, std::size_t beta) {
  return (len + beta - 1) / beta;
}
inline std::size_t word_count(std::size_t len) { return (len + 63) / 64; }

struct PackedHadaVector {
  std::size_t length = 0;
  std::uint32_t beta = 1;
  std::vector<float> scales;         // one per block, block j = bits [j*beta, ...)
  std::vector<std::uint64_t> bits;   // element i -> bit (i % 64) of word i/64
};

inline PackedHadaVector pack(std::span<const float> v, std::size_t beta) {
  detail::check_beta(beta, "pack");
  PackedHadaVector p;
  p.length = v.size();
  p.beta = static_cast<std::uint32_t>(beta);
  p.scales.resize(block_count(v.size(), beta), 0.0f);
  p.bits.assign(word_count(v.size()), 0);
  for (std::size_t j = 0, lo = 0; lo < v.size(); ++j, lo += beta) {
    const std::size_t hi = std::min(lo + beta, v.size());
    float sum = 0.0f;
    for (std::size_t i = lo; i < hi; ++i) sum += std::fabs(v[i]);
    p.scales[j] = sum / static_cast<float>(hi - lo);
  }
  for (std::size_t i = 0; i < v.size(); ++i)
    if (!(v[i] < 0.0f)) p.bits[i / 64] |= std::uint64_t{1} << (i % 64);
  return p;
}

inline std::vector<float> unpack(const PackedHadaVector& p) {
  if (p.bits.size() != word_count(p.length) ||
      p.scales.size() != block_count(p.length, p.beta))
    throw std::invalid_argument("unpack: corrupted packed vector");
  std::vector<float> out(p.length);
  for (std::size_t i = 0; i < p.length; ++i) {
    const float s = p.scales[i / p.beta];
    const bool bit = (p.bits[i / 64] >> (i % 64)) & 1u;
    out[i] = bit ? s : -s;
  }
  return out;
}

namespace detail {

// Agreement count between two bit rows over the bit range [lo, hi).
inline int popcount_xnor_range(const std::uint64_t* a, const std::uint64_t* b,
                               std::size_t lo, std::size_t hi) {
  int count = 0;
  std::size_t w = lo / 64;
  const std::size_t wlast = (hi - 1) / 64;
  for (; w <= wlast; ++w) {
    std::uint64_t mask = ~std::uint64_t{0};
    const std::size_t wbase = w * 64;
    if (wbase < lo) mask &= ~std::uint64_t{0} << (lo - wbase);
    if (wbase + 64 > hi)
      mask &= (hi - wbase == 64) ? ~std::uint64_t{0}
                                 : ((std::uint64_t{1} << (hi - wbase)) - 1);
    count += std::popcount(~(a[w] ^ b[w]) & mask);
  }
  return count;
}

// Generic block walk; handles any beta and ragged tails.
inline float xhbnn_row_dot_generic(const float* ws, const std::uint64_t* wb,
                                   const float* as, const std::uint64_t* ab,
                                   std::size_t len, std::size_t beta) {
  float acc = 0.0f;
  for (std::size_t j = 0, lo = 0; lo < len; ++j, lo += beta) {
    const std::size_t hi = std::min(lo + beta, len);
    const int n = static_cast<int>(hi - lo);
    const int agree = popcount_xnor_range(wb, ab, lo, hi);
    acc += ws[j] * as[j] * static_cast<float>(2 * agree - n);
  }
  return acc;
}

// Fast path for beta dividing 64: every block sits inside one word, words
// hold 64/beta whole blocks, only the final word may carry a ragged block.
template <unsigned kBeta>
inline float xhbnn_row_dot_aligned(const float* ws, const std::uint64_t* wb,
                                   const float* as, const std::uint64_t* ab,
                                   std::size_t len) {
  static_assert(64 % kBeta == 0);
  constexpr std::uint64_t kMask =
      kBeta == 64 ? ~std::uint64_t{0} : ((std::uint64_t{1} << kBeta) - 1);
  constexpr unsigned kPerWord = 64 / kBeta;
  const std::size_t full_words = len / 64;
  float acc = 0.0f;
  std::size_t j = 0;
  for (std::size_t w = 0; w < full_words; ++w) {
    std::uint64_t x = ~(wb[w] ^ ab[w]);
    for (unsigned s = 0; s < kPerWord; ++s, ++j) {
      const int agree = std::popcount(x & kMask);
      acc += ws[j] * as[j] *
             static_cast<float>(2 * agree - static_cast<int>(kBeta));
      if constexpr (kBeta < 64) x >>= kBeta;
    }
  }
  const std::size_t done = full_words * 64;
  if (done < len)
    acc += xhbnn_row_dot_generic(ws + j, wb + full_words, as + j,
                                 ab + full_words, len - done, kBeta);
  return acc;
}

inline float xhbnn_row_dot(const float* ws, const std::uint64_t* wb,
                           const float* as, const std::uint64_t* ab,
                           std::size_t len, std::size_t beta) {
  switch (beta) {
    case 8:
      return xhbnn_row_dot_aligned<8>(ws, wb, as, ab, len);
    case 16:
      return xhbnn_row_dot_aligned<16>(ws, wb, as, ab, len);
    case 32:
      return xhbnn_row_dot_aligned<32>(ws, wb, as, ab, len);
    case 64:
      return xhbnn_row_dot_aligned<64>(ws, wb, as, ab, len);
    default:
      return xhbnn_row_dot_generic(ws, wb, as, ab, len, beta);
  }
}

}  // namespace detail

// Block-scaled dot product of two packed rows; equals the float dot of the
// unpacked vectors.
inline float xhbnn_dot(const PackedHadaVector& w, const PackedHadaVector& a) {
  if (w.length != a.length)
    throw std::invalid_argument("xhbnn_dot: length mismatch");
  if (w.beta != a.beta)
    throw std::invalid_argument("xhbnn_dot: beta mismatch");
  return detail::xhbnn_row_dot(w.scales.data(), w.bits.data(), a.scales.data(),
                               a.bits.data(), w.length, w.beta);
}

// Row-major pile of packed rows sharing one layout (same K and beta);
// scales and bits are contiguous across rows.
struct PackedHadaMatrix {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::uint32_t beta = 1;
  std::vector<float> scales;        // rows * block_count(cols, beta)
  std::vector<std::uint64_t> bits;  // rows * word_count(cols)

  std::size_t blocks_per_row() const { return block_count(cols, beta); }
  std::size_t words_per_row() const { return word_count(cols); }
  const float* row_scales(std::size_t r) const {
    return scales.data() + r * blocks_per_row();
  }
  const std::uint64_t* row_bits(std::size_t r) const {
    return bits.data() + r * words_per_row();
  }
  std::size_t payload_bytes() const {
    return scales.size() * sizeof(float) + bits.size() * sizeof(std::uint64_t);
  }
};

inline PackedHadaMatrix pack_matrix(const Tensor& x, std::size_t beta) {
  require_rank2(x, "pack_matrix");
  detail::check_beta(beta, "pack_matrix");
  PackedHadaMatrix m;
  m.rows = x.extent(0);
  m.cols = x.extent(1);
  m.beta = static_cast<std::uint32_t>(beta);
  m.scales.resize(m.rows * m.blocks_per_row());
  m.bits.assign(m.rows * m.words_per_row(), 0);
  for (std::size_t r = 0; r < m.rows; ++r) {
    const PackedHadaVector row =
        pack(std::span<const float>(x.data() + r * m.cols, m.cols), beta);
    std::copy(row.scales.begin(), row.scales.end(),
              m.scales.begin() + static_cast<std::ptrdiff_t>(r * m.blocks_per_row()));
    std::copy(row.bits.begin(), row.bits.end(),
              m.bits.begin() + static_cast<std::ptrdiff_t>(r * m.words_per_row()));
  }
  return m;
}

inline Tensor unpack_matrix(const PackedHadaMatrix& m) {
  Tensor out({m.rows, m.cols});
  for (std::size_t r = 0; r < m.rows; ++r) {
    const float* s = m.row_scales(r);
    const std::uint64_t* b = m.row_bits(r);
    for (std::size_t i = 0; i < m.cols; ++i) {
      const float sc = s[i / m.beta];
      out(r, i) = ((b[i / 64] >> (i % 64)) & 1u) ? sc : -sc;
    }
  }
  return out;
}

// Re-expresses the same binarized values at a finer block granularity g
// (g must divide beta): sign bits are unchanged, each scale is replicated
// onto its sub-blocks. Used to multiply operands packed at different betas
// at their common refinement gcd(beta_w, beta_a).
inline PackedHadaMatrix refine_packed(const PackedHadaMatrix& m,
                                      std::size_t g) {
  if (g < 1 || m.beta % g != 0)
    throw std::invalid_argument("refine_packed: g must divide beta");
  if (g == m.beta) return m;
  PackedHadaMatrix out;
  out.rows = m.rows;
  out.cols = m.cols;
  out.beta = static_cast<std::uint32_t>(g);
  out.bits = m.bits;
  out.scales.resize(out.rows * out.blocks_per_row());
  for (std::size_t r = 0; r < m.rows; ++r) {
    const float* src = m.row_scales(r);
    float* dst = out.scales.data() + r * out.blocks_per_row();
    for (std::size_t jb = 0; jb < out.blocks_per_row(); ++jb)
      dst[jb] = src[(jb * g) / m.beta];
  }
  return out;
}

// O[i][j] = packed dot of row i of w with row j of a; a's rows are the
// columns of the activation matrix. Rows of the output may be partitioned
// across workers; per-element block order is fixed.
inline Tensor xhbnn_matmul(const PackedHadaMatrix& w, const PackedHadaMatrix& a,
                           int workers = 1) {
  if (w.cols != a.cols)
    throw std::invalid_argument("xhbnn_matmul: K mismatch");
  if (w.beta != a.beta)
    throw std::invalid_argument("xhbnn_matmul: beta mismatch");
  Tensor out({w.rows, a.rows});
  float* po = out.data();
  const std::size_t n = a.rows;
  parallel_for(w.rows, workers, [&](std::size_t lo, std::size_t hi) {
    for (std::size_t i = lo; i < hi; ++i) {
      const float* ws = w.row_scales(i);
      const std::uint64_t* wb = w.row_bits(i);
      for (std::size_t j = 0; j < n; ++j) {
        po[i * n + j] =
            detail::xhbnn_row_dot(ws, wb, a.row_scales(j), a.row_bits(j),
                                  w.cols, w.beta);
      }
    }
  });
  return out;
}

}  // namespace hadanet
