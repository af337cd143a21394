#pragma once

// Dense row-major float32 tensor plus the reference linear algebra the rest
// of the project is validated against. matmul_ref is the fixed-order scalar
// triple loop and doubles as the CMMA benchmark baseline; matmul_fast is the
// BLAS-backed path used by the training engine.

#include <cblas.h>

#include <cstddef>
#include <cstdint>
#include <numeric>
#include <sstream>
#include <stdexcept>
#include <string>
#include <thread>
#include <utility>
#include <vector>

namespace hadanet {

class Tensor {
 public:
  Tensor() = default;

  explicit Tensor(std::vector<std::size_t> shape)
      : shape_(std::move(shape)), data_(checked_numel(shape_), 0.0f) {}

  Tensor(std::vector<std::size_t> shape, std::vector<float> data)
      : shape_(std::move(shape)), data_(std::move(data)) {
    if (data_.size() != checked_numel(shape_)) {
      throw std::invalid_argument("Tensor: data length " +
                                  std::to_string(data_.size()) +
                                  " does not match shape " + shape_str());
    }
  }

  const std::vector<std::size_t>& shape() const { return shape_; }
  std::size_t rank() const { return shape_.size(); }
  std::size_t extent(std::size_t axis) const { return shape_.at(axis); }
  std::size_t numel() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  float* data() { return data_.data(); }
  const float* data() const { return data_.data(); }
  std::vector<float>& storage() { return data_; }
  const std::vector<float>& storage() const { return data_; }

  float& operator[](std::size_t i) { return data_[i]; }
  float operator[](std::size_t i) const { return data_[i]; }

  // Rank-2 accessors; the GEMM-facing code uses raw pointers instead.
  float& operator()(std::size_t i, std::size_t j) {
    return data_[i * shape_[1] + j];
  }
  float operator()(std::size_t i, std::size_t j) const {
    return data_[i * shape_[1] + j];
  }

  // Reinterpret the shape without touching the flat data. At most one extent
  // may be the wildcard -1, which is inferred from the element count.
  Tensor reshape(const std::vector<std::int64_t>& spec) const& {
    return Tensor(resolve_reshape(spec), data_);
  }
  Tensor reshape(const std::vector<std::int64_t>& spec) && {
    return Tensor(resolve_reshape(spec), std::move(data_));
  }

  std::string shape_str() const {
    std::ostringstream os;
    os << '(';
    for (std::size_t i = 0; i < shape_.size(); ++i)
      os << shape_[i] << (i + 1 < shape_.size() ? "," : "");
    os << ')';
    return os.str();
  }

 private:
  static std::size_t checked_numel(const std::vector<std::size_t>& shape) {
    std::size_t n = 1;
    for (std::size_t e : shape) {
      if (e == 0) throw std::invalid_argument("Tensor: zero extent");
      n *= e;
    }
    return n;
  }

  std::vector<std::size_t> resolve_reshape(
      const std::vector<std::int64_t>& spec) const {
    std::vector<std::size_t> out;
    out.reserve(spec.size());
    std::size_t known = 1;
    std::int64_t wildcard_at = -1;
    for (std::size_t i = 0; i < spec.size(); ++i) {
      const std::int64_t e = spec[i];
      if (e == -1) {
        if (wildcard_at >= 0)
          throw std::invalid_argument("reshape: more than one wildcard");
        wildcard_at = static_cast<std::int64_t>(i);
        out.push_back(1);  // placeholder
      } else if (e <= 0) {
        throw std::invalid_argument("reshape: non-positive extent");
      } else {
        out.push_back(static_cast<std::size_t>(e));
        known *= static_cast<std::size_t>(e);
      }
    }
    if (wildcard_at >= 0) {
      if (known == 0 || numel() % known != 0)
        throw std::invalid_argument("reshape: wildcard does not divide " +
                                    std::to_string(numel()) + " elements");
      out[static_cast<std::size_t>(wildcard_at)] = numel() / known;
    } else if (known != numel()) {
      throw std::invalid_argument("reshape: element count mismatch");
    }
    return out;
  }

  std::vector<std::size_t> shape_;
  std::vector<float> data_;
};

// Runs body(begin, end) over [0, n) split into contiguous chunks, one per
// worker. workers <= 1 runs inline. Chunk boundaries depend only on
// (n, workers), so a fixed worker count gives a fixed partition.
template <typename Body>
void parallel_for(std::size_t n, int workers, Body&& body) {
  if (n == 0) return;
  const std::size_t w =
      std::min<std::size_t>(std::max(workers, 1), n);
  if (w <= 1) {
    body(std::size_t{0}, n);
    return;
  }
  std::vector<std::thread> pool;
  pool.reserve(w);
  const std::size_t chunk = (n + w - 1) / w;
  for (std::size_t t = 0; t < w; ++t) {
    const std::size_t lo = t * chunk;
    const std::size_t hi = std::min(lo + chunk, n);
    if (lo >= hi) break;
    pool.emplace_back([&body, lo, hi] { body(lo, hi); });
  }
  for (auto& th : pool) th.join();
}

inline void require_rank2(const Tensor& t, const char* who) {
  if (t.rank() != 2)
    throw std::invalid_argument(std::string(who) + ": expected rank-2, got " +
                                t.shape_str());
}

// Scalar triple-loop matrix multiply, k innermost, 32-bit accumulation.
// The accumulation order is part of the contract: this is the correctness
// oracle for every other multiply path and the CMMA baseline in benchmarks.
// Row partitioning across workers leaves the per-element order untouched.
inline Tensor matmul_ref(const Tensor& a, const Tensor& b, int workers = 1) {
  require_rank2(a, "matmul_ref");
  require_rank2(b, "matmul_ref");
  const std::size_t m = a.extent(0), k = a.extent(1), n = b.extent(1);
  if (b.extent(0) != k)
    throw std::invalid_argument("matmul_ref: inner extents " + a.shape_str() +
                                " x " + b.shape_str());
  Tensor out({m, n});
  const float* pa = a.data();
  const float* pb = b.data();
  float* po = out.data();
  parallel_for(m, workers, [&](std::size_t lo, std::size_t hi) {
    for (std::size_t i = lo; i < hi; ++i) {
      for (std::size_t j = 0; j < n; ++j) {
        float acc = 0.0f;
        for (std::size_t kk = 0; kk < k; ++kk)
          acc += pa[i * k + kk] * pb[kk * n + j];
        po[i * n + j] = acc;
      }
    }
  });
  return out;
}

namespace detail {
inline void blas_threads(int workers) {
  openblas_set_num_threads(workers < 1 ? 1 : workers);
}
}  // namespace detail

// BLAS-backed multiply for the hot training path. Single worker is bitwise
// reproducible run to run; agreement with matmul_ref is tolerance-level.
inline Tensor matmul_fast(const Tensor& a, const Tensor& b, int workers = 1) {
  require_rank2(a, "matmul_fast");
  require_rank2(b, "matmul_fast");
  const std::size_t m = a.extent(0), k = a.extent(1), n = b.extent(1);
  if (b.extent(0) != k)
    throw std::invalid_argument("matmul_fast: inner extents " + a.shape_str() +
                                " x " + b.shape_str());
  Tensor out({m, n});
  detail::blas_threads(workers);
  cblas_sgemm(CblasRowMajor, CblasNoTrans, CblasNoTrans, static_cast<int>(m),
              static_cast<int>(n), static_cast<int>(k), 1.0f, a.data(),
              static_cast<int>(k), b.data(), static_cast<int>(n), 0.0f,
              out.data(), static_cast<int>(n));
  return out;
}

// C (m x n) = A (m x k) * B^T where B is (n x k).
inline Tensor matmul_fast_nt(const Tensor& a, const Tensor& b,
                             int workers = 1) {
  require_rank2(a, "matmul_fast_nt");
  require_rank2(b, "matmul_fast_nt");
  const std::size_t m = a.extent(0), k = a.extent(1), n = b.extent(0);
  if (b.extent(1) != k)
    throw std::invalid_argument("matmul_fast_nt: inner extents " +
                                a.shape_str() + " x " + b.shape_str() + "^T");
  Tensor out({m, n});
  detail::blas_threads(workers);
  cblas_sgemm(CblasRowMajor, CblasNoTrans, CblasTrans, static_cast<int>(m),
              static_cast<int>(n), static_cast<int>(k), 1.0f, a.data(),
              static_cast<int>(k), b.data(), static_cast<int>(k), 0.0f,
              out.data(), static_cast<int>(n));
  return out;
}

// C (m x n) = A^T * B where A is (k x m), B is (k x n).
inline Tensor matmul_fast_tn(const Tensor& a, const Tensor& b,
                             int workers = 1) {
  require_rank2(a, "matmul_fast_tn");
  require_rank2(b, "matmul_fast_tn");
  const std::size_t k = a.extent(0), m = a.extent(1), n = b.extent(1);
  if (b.extent(0) != k)
    throw std::invalid_argument("matmul_fast_tn: inner extents " +
                                a.shape_str() + "^T x " + b.shape_str());
  Tensor out({m, n});
  detail::blas_threads(workers);
  cblas_sgemm(CblasRowMajor, CblasTrans, CblasNoTrans, static_cast<int>(m),
              static_cast<int>(n), static_cast<int>(k), 1.0f, a.data(),
              static_cast<int>(m), b.data(), static_cast<int>(n), 0.0f,
              out.data(), static_cast<int>(n));
  return out;
}

inline Tensor transpose(const Tensor& t) {
  require_rank2(t, "transpose");
  const std::size_t m = t.extent(0), n = t.extent(1);
  Tensor out({n, m});
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) out(j, i) = t(i, j);
  return out;
}

struct ConvGeometry {
  std::size_t channels = 0, in_h = 0, in_w = 0;
  std::size_t kernel_h = 0, kernel_w = 0;
  std::size_t stride = 1, pad = 0;
  std::size_t out_h = 0, out_w = 0;
};

inline ConvGeometry conv_geometry(std::size_t c, std::size_t h, std::size_t w,
                                  std::size_t kh, std::size_t kw,
                                  std::size_t stride, std::size_t pad) {
  if (stride < 1) throw std::invalid_argument("conv: stride must be >= 1");
  if (kh > h + 2 * pad || kw > w + 2 * pad)
    throw std::invalid_argument("conv: kernel larger than padded input");
  ConvGeometry g{c, h, w, kh, kw, stride, pad, 0, 0};
  const std::size_t oh = (h + 2 * pad - kh) / stride + 1;
  const std::size_t ow = (w + 2 * pad - kw) / stride + 1;
  if (oh == 0 || ow == 0)
    throw std::invalid_argument("conv: non-positive output extent");
  g.out_h = oh;
  g.out_w = ow;
  return g;
}

// Lowers one (c, h, w) image into a (c*kh*kw) x (oh*ow) matrix: column p is
// the receptive field of output position p, rows ordered channel-major then
// kernel-row-major. Out-of-bounds (padding) reads are zero.
inline void im2col_into(const float* src, const ConvGeometry& g, float* dst) {
  const std::size_t rows = g.channels * g.kernel_h * g.kernel_w;
  const std::size_t cols = g.out_h * g.out_w;
  for (std::size_t r = 0; r < rows; ++r) {
    const std::size_t c = r / (g.kernel_h * g.kernel_w);
    const std::size_t ki = (r / g.kernel_w) % g.kernel_h;
    const std::size_t kj = r % g.kernel_w;
    float* drow = dst + r * cols;
    for (std::size_t oi = 0; oi < g.out_h; ++oi) {
      const std::ptrdiff_t ih =
          static_cast<std::ptrdiff_t>(oi * g.stride + ki) -
          static_cast<std::ptrdiff_t>(g.pad);
      for (std::size_t oj = 0; oj < g.out_w; ++oj) {
        const std::ptrdiff_t iw =
            static_cast<std::ptrdiff_t>(oj * g.stride + kj) -
            static_cast<std::ptrdiff_t>(g.pad);
        float v = 0.0f;
        if (ih >= 0 && ih < static_cast<std::ptrdiff_t>(g.in_h) && iw >= 0 &&
            iw < static_cast<std::ptrdiff_t>(g.in_w)) {
          v = src[(c * g.in_h + static_cast<std::size_t>(ih)) * g.in_w +
                  static_cast<std::size_t>(iw)];
        }
        drow[oi * g.out_w + oj] = v;
      }
    }
  }
}

inline Tensor im2col(const Tensor& a, std::size_t kh, std::size_t kw,
                     std::size_t stride, std::size_t pad) {
  if (a.rank() != 3)
    throw std::invalid_argument("im2col: expected (c,h,w), got " +
                                a.shape_str());
  const ConvGeometry g =
      conv_geometry(a.extent(0), a.extent(1), a.extent(2), kh, kw, stride, pad);
  Tensor out({g.channels * g.kernel_h * g.kernel_w, g.out_h * g.out_w});
  im2col_into(a.data(), g, out.data());
  return out;
}

// Adjoint of im2col_into: accumulates column gradients back onto the image.
inline void col2im_into(const float* cols, const ConvGeometry& g, float* dst) {
  const std::size_t rows = g.channels * g.kernel_h * g.kernel_w;
  const std::size_t ncols = g.out_h * g.out_w;
  for (std::size_t r = 0; r < rows; ++r) {
    const std::size_t c = r / (g.kernel_h * g.kernel_w);
    const std::size_t ki = (r / g.kernel_w) % g.kernel_h;
    const std::size_t kj = r % g.kernel_w;
    const float* srow = cols + r * ncols;
    for (std::size_t oi = 0; oi < g.out_h; ++oi) {
      const std::ptrdiff_t ih =
          static_cast<std::ptrdiff_t>(oi * g.stride + ki) -
          static_cast<std::ptrdiff_t>(g.pad);
      if (ih < 0 || ih >= static_cast<std::ptrdiff_t>(g.in_h)) continue;
      for (std::size_t oj = 0; oj < g.out_w; ++oj) {
        const std::ptrdiff_t iw =
            static_cast<std::ptrdiff_t>(oj * g.stride + kj) -
            static_cast<std::ptrdiff_t>(g.pad);
        if (iw < 0 || iw >= static_cast<std::ptrdiff_t>(g.in_w)) continue;
        dst[(c * g.in_h + static_cast<std::size_t>(ih)) * g.in_w +
            static_cast<std::size_t>(iw)] += srow[oi * g.out_w + oj];
      }
    }
  }
}

}  // namespace hadanet
