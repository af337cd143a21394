#pragma once

// CMMA-vs-xHBNN benchmark. CMMA is the in-repo scalar triple loop
// (matmul_ref); xHBNN packs both operands and multiplies with the
// xnor/popcount kernel. Both sides run unblocked and share the same
// row-partitioning worker discipline. Packing time is excluded from the
// headline speedup and reported in its own column, since deployed weights
// are pre-packed and activations are packed once per layer.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <random>
#include <string>
#include <vector>

#include "hadanet/packing.hpp"
#include "hadanet/tensor.hpp"

namespace hadanet {

struct BenchRecord {
  std::size_t m = 0;
  std::size_t beta = 1;
  std::string kernel;  // "CMMA" or "xHBNN"
  double median_ns = 0.0;
  double gflops_equiv = 0.0;  // 2*M^3 FLOP-equivalents over the median time
  double speedup = 1.0;       // time_CMMA / time_this
  int workers = 1;
  double pack_ns = 0.0;  // operand packing, xHBNN rows only
};

namespace detail {

inline double median(std::vector<double> v) {
  std::sort(v.begin(), v.end());
  const std::size_t n = v.size();
  return n % 2 == 1 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

template <typename F>
double time_ns(F&& f) {
  const auto t0 = std::chrono::steady_clock::now();
  f();
  const auto t1 = std::chrono::steady_clock::now();
  return std::chrono::duration<double, std::nano>(t1 - t0).count();
}

}  // namespace detail

inline std::vector<BenchRecord> bench_compare(
    const std::vector<std::size_t>& sizes, std::size_t beta, int repeats,
    std::uint64_t seed, int workers = 1) {
  if (repeats < 1) throw std::invalid_argument("bench: repeats must be >= 1");
  for (std::size_t m : sizes)
    if (m < 64) throw std::invalid_argument("bench: sizes must be >= 64");

  std::vector<BenchRecord> records;
  for (std::size_t m : sizes) {
    std::mt19937_64 rng(seed ^ (0x100000001b3ull * m));
    std::uniform_real_distribution<float> dist(-1.0f, 1.0f);
    Tensor w({m, m}), a({m, m});
    for (std::size_t i = 0; i < w.numel(); ++i) w[i] = dist(rng);
    for (std::size_t i = 0; i < a.numel(); ++i) a[i] = dist(rng);

    std::vector<double> cmma_ns;
    for (int r = 0; r < repeats; ++r) {
      Tensor out;
      cmma_ns.push_back(
          detail::time_ns([&] { out = matmul_ref(w, a, workers); }));
    }

    // Operand packing: weights row-wise, activations column-wise (the
    // packed kernel dots rows against rows).
    std::vector<double> pack_ns;
    PackedHadaMatrix wp, ap;
    for (int r = 0; r < repeats; ++r) {
      pack_ns.push_back(detail::time_ns([&] {
        wp = pack_matrix(w, beta);
        ap = pack_matrix(transpose(a), beta);
      }));
    }

    std::vector<double> xhbnn_ns;
    Tensor first_out;
    for (int r = 0; r < repeats; ++r) {
      Tensor out;
      xhbnn_ns.push_back(
          detail::time_ns([&] { out = xhbnn_matmul(wp, ap, workers); }));
      if (r == 0) {
        first_out = out;
      } else if (out.storage() != first_out.storage()) {
        throw std::runtime_error("bench: non-deterministic kernel output");
      }
    }

    const double flops = 2.0 * static_cast<double>(m) * m * m;
    BenchRecord cm;
    cm.m = m;
    cm.beta = beta;
    cm.kernel = "CMMA";
    cm.median_ns = detail::median(cmma_ns);
    cm.gflops_equiv = flops / cm.median_ns;
    cm.speedup = 1.0;
    cm.workers = workers;
    cm.pack_ns = 0.0;
    records.push_back(cm);

    BenchRecord xh;
    xh.m = m;
    xh.beta = beta;
    xh.kernel = "xHBNN";
    xh.median_ns = detail::median(xhbnn_ns);
    xh.gflops_equiv = flops / xh.median_ns;
    xh.speedup = cm.median_ns / xh.median_ns;
    xh.workers = workers;
    xh.pack_ns = detail::median(pack_ns);
    records.push_back(xh);
  }
  return records;
}

inline void write_bench_csv(const std::vector<BenchRecord>& records,
                            std::ostream& out, int repeats) {
  out << "# kernels: CMMA = scalar triple loop (k innermost), xHBNN = "
         "packed xnor/popcount; identical worker partitioning, no blocking "
         "on either side\n";
  out << "# pack_ns excluded from xHBNN timing; repeats=" << repeats
      << ", median reported\n";
  if (repeats < 3)
    out << "# warning: repeats < 3, medians are not robust\n";
  out << "M,beta,kernel,median_ns,speedup,workers,pack_ns\n";
  char buf[192];
  for (const auto& r : records) {
    std::snprintf(buf, sizeof(buf), "%zu,%zu,%s,%.0f,%.4f,%d,%.0f\n", r.m,
                  r.beta, r.kernel.c_str(), r.median_ns, r.speedup, r.workers,
                  r.pack_ns);
    out << buf;
  }
}

}  // namespace hadanet
