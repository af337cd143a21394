#include <catch2/catch_amalgamated.hpp>

#include <random>
#include <vector>

#include "hadanet/tensor.hpp"

using hadanet::Tensor;

namespace {

Tensor random_tensor(std::vector<std::size_t> shape, std::uint32_t seed,
                     float lo = -1.0f, float hi = 1.0f) {
  Tensor t(std::move(shape));
  std::mt19937 rng(seed);
  std::uniform_real_distribution<float> dist(lo, hi);
  for (std::size_t i = 0; i < t.numel(); ++i) t[i] = dist(rng);
  return t;
}

// Independent scalar oracle: plain index arithmetic, no shared helpers.
std::vector<float> gemm_oracle(const std::vector<float>& a,
                               const std::vector<float>& b, std::size_t m,
                               std::size_t k, std::size_t n) {
  std::vector<float> c(m * n, 0.0f);
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) {
      float s = 0.0f;
      for (std::size_t kk = 0; kk < k; ++kk) s += a[i * k + kk] * b[kk * n + j];
      c[i * n + j] = s;
    }
  return c;
}

// Direct sliding-window convolution, the oracle for the im2col + GEMM path.
std::vector<float> conv_direct(const Tensor& x, const Tensor& w,
                               std::size_t kh, std::size_t kw) {
  const std::size_t c = x.extent(0), h = x.extent(1), ww = x.extent(2);
  const std::size_t f = w.extent(0);
  const std::size_t oh = h - kh + 1, ow = ww - kw + 1;
  std::vector<float> out(f * oh * ow, 0.0f);
  for (std::size_t fi = 0; fi < f; ++fi)
    for (std::size_t oi = 0; oi < oh; ++oi)
      for (std::size_t oj = 0; oj < ow; ++oj) {
        float s = 0.0f;
        for (std::size_t ci = 0; ci < c; ++ci)
          for (std::size_t ki = 0; ki < kh; ++ki)
            for (std::size_t kj = 0; kj < kw; ++kj)
              s += x.data()[(ci * h + oi + ki) * ww + oj + kj] *
                   w.data()[((fi * c + ci) * kh + ki) * kw + kj];
        out[(fi * oh + oi) * ow + oj] = s;
      }
  return out;
}

}  // namespace

TEST_CASE("reshape resolves the wildcard extent") {
  Tensor t = random_tensor({4, 3, 2, 2}, 1);
  const Tensor r = t.reshape({4, -1});
  REQUIRE(r.shape() == std::vector<std::size_t>{4, 12});
  REQUIRE(r.storage() == t.storage());
}

TEST_CASE("reshape identity and flatten preserve the flat order") {
  Tensor t({6}, {0, 1, 2, 3, 4, 5});
  REQUIRE(t.reshape({6}).shape() == std::vector<std::size_t>{6});

  Tensor m({2, 3}, {0, 1, 2, 3, 4, 5});
  const Tensor flat = m.reshape({-1});
  REQUIRE(flat.shape() == std::vector<std::size_t>{6});
  for (std::size_t i = 0; i < 6; ++i)
    REQUIRE(flat[i] == static_cast<float>(i));
}

TEST_CASE("reshape rejects malformed specs") {
  Tensor t = random_tensor({4, 3}, 2);
  REQUIRE_THROWS_AS(t.reshape({5, -1}), std::invalid_argument);
  REQUIRE_THROWS_AS(t.reshape({-1, -1}), std::invalid_argument);
  REQUIRE_THROWS_AS(t.reshape({0, 12}), std::invalid_argument);
  REQUIRE_THROWS_AS(t.reshape({3, 3}), std::invalid_argument);
}

TEST_CASE("reshape round-trips bitwise") {
  std::mt19937 rng(7);
  for (int trial = 0; trial < 50; ++trial) {
    std::uniform_int_distribution<std::size_t> ext(1, 5);
    std::vector<std::size_t> shape{ext(rng), ext(rng), ext(rng)};
    Tensor t = random_tensor(shape, 100 + static_cast<std::uint32_t>(trial));
    const Tensor round = t.reshape({-1}).reshape(
        {static_cast<std::int64_t>(shape[0]),
         static_cast<std::int64_t>(shape[1]),
         static_cast<std::int64_t>(shape[2])});
    REQUIRE(round.shape() == shape);
    REQUIRE(round.storage() == t.storage());
  }
}

TEST_CASE("matmul_ref identity cases") {
  Tensor eye({2, 2}, {1, 0, 0, 1});
  Tensor a({2, 2}, {1, 2, 3, 4});
  REQUIRE(hadanet::matmul_ref(eye, eye).storage() ==
          std::vector<float>{1, 0, 0, 1});
  REQUIRE(hadanet::matmul_ref(a, eye).storage() ==
          std::vector<float>{1, 2, 3, 4});
}

TEST_CASE("matmul_ref matches the scalar oracle") {
  const Tensor a = random_tensor({7, 5}, 11);
  const Tensor b = random_tensor({5, 3}, 12);
  const Tensor c = hadanet::matmul_ref(a, b);
  const auto oracle = gemm_oracle(a.storage(), b.storage(), 7, 5, 3);
  for (std::size_t i = 0; i < oracle.size(); ++i)
    REQUIRE_THAT(c[i], Catch::Matchers::WithinRel(oracle[i], 1e-5f));
}

TEST_CASE("matmul_ref rejects shape mismatch") {
  REQUIRE_THROWS_AS(
      hadanet::matmul_ref(random_tensor({2, 3}, 1), random_tensor({2, 3}, 2)),
      std::invalid_argument);
}

TEST_CASE("row partitioning does not change matmul_ref results") {
  const Tensor a = random_tensor({13, 9}, 21);
  const Tensor b = random_tensor({9, 7}, 22);
  const Tensor c1 = hadanet::matmul_ref(a, b, 1);
  const Tensor c2 = hadanet::matmul_ref(a, b, 2);
  REQUIRE(c1.storage() == c2.storage());
}

TEST_CASE("matmul_fast agrees with matmul_ref") {
  const Tensor a = random_tensor({17, 23}, 31);
  const Tensor b = random_tensor({23, 11}, 32);
  const Tensor ref = hadanet::matmul_ref(a, b);
  const Tensor fast = hadanet::matmul_fast(a, b);
  const Tensor nt = hadanet::matmul_fast_nt(a, hadanet::transpose(b));
  const Tensor tn = hadanet::matmul_fast_tn(hadanet::transpose(a), b);
  for (std::size_t i = 0; i < ref.numel(); ++i) {
    REQUIRE_THAT(fast[i], Catch::Matchers::WithinAbs(ref[i], 1e-4));
    REQUIRE_THAT(nt[i], Catch::Matchers::WithinAbs(ref[i], 1e-4));
    REQUIRE_THAT(tn[i], Catch::Matchers::WithinAbs(ref[i], 1e-4));
  }
}

TEST_CASE("im2col on a single receptive field") {
  Tensor x({1, 2, 2}, {1, 2, 3, 4});
  const Tensor cols = hadanet::im2col(x, 2, 2, 1, 0);
  REQUIRE(cols.shape() == std::vector<std::size_t>{4, 1});
  REQUIRE(cols.storage() == std::vector<float>{1, 2, 3, 4});
}

TEST_CASE("im2col enumerates receptive fields in order") {
  // 3x3 image, 2x2 kernel: four output positions, hand-enumerated.
  Tensor x({1, 3, 3}, {0, 1, 2, 3, 4, 5, 6, 7, 8});
  const Tensor cols = hadanet::im2col(x, 2, 2, 1, 0);
  REQUIRE(cols.shape() == std::vector<std::size_t>{4, 4});
  // column p = receptive field of output position p
  const std::vector<float> expected = {
      0, 1, 3, 4,  // row 0: top-left kernel element across positions
      1, 2, 4, 5,  //
      3, 4, 6, 7,  //
      4, 5, 7, 8,
  };
  REQUIRE(cols.storage() == expected);
}

TEST_CASE("im2col rejects degenerate geometry") {
  Tensor x = random_tensor({1, 2, 2}, 5);
  REQUIRE_THROWS_AS(hadanet::im2col(x, 4, 4, 1, 0), std::invalid_argument);
  REQUIRE_THROWS_AS(hadanet::im2col(x, 2, 2, 0, 0), std::invalid_argument);
}

TEST_CASE("convolution as im2col + GEMM matches direct convolution") {
  const Tensor x = random_tensor({2, 5, 5}, 41);
  const Tensor w = random_tensor({3, 2, 3, 3}, 42);
  const Tensor cols = hadanet::im2col(x, 3, 3, 1, 0);
  const Tensor wmat = w.reshape({3, -1});
  const Tensor out = hadanet::matmul_ref(wmat, cols);
  const auto direct = conv_direct(x, w, 3, 3);
  REQUIRE(out.numel() == direct.size());
  for (std::size_t i = 0; i < direct.size(); ++i)
    REQUIRE_THAT(out[i], Catch::Matchers::WithinAbs(direct[i], 1e-5));
}

TEST_CASE("im2col + GEMM convolution property over random geometries") {
  std::mt19937 rng(99);
  std::uniform_int_distribution<std::size_t> cdist(1, 3), hdist(3, 8),
      fdist(1, 4);
  for (int trial = 0; trial < 30; ++trial) {
    const std::size_t c = cdist(rng), h = hdist(rng), w = hdist(rng);
    const std::size_t f = fdist(rng);
    const std::size_t k = 3;
    if (h < k || w < k) continue;
    const Tensor x =
        random_tensor({c, h, w}, 500 + static_cast<std::uint32_t>(trial));
    const Tensor wt = random_tensor({f, c, k, k},
                                    900 + static_cast<std::uint32_t>(trial));
    const Tensor out = hadanet::matmul_ref(
        wt.reshape({static_cast<std::int64_t>(f), -1}),
        hadanet::im2col(x, k, k, 1, 0));
    const auto direct = conv_direct(x, wt, k, k);
    for (std::size_t i = 0; i < direct.size(); ++i)
      REQUIRE_THAT(out[i], Catch::Matchers::WithinAbs(direct[i], 1e-5));
  }
}

TEST_CASE("im2col honors stride and padding") {
  const Tensor x = random_tensor({1, 4, 4}, 77);
  const Tensor cols = hadanet::im2col(x, 3, 3, 2, 1);
  // (4 + 2 - 3)/2 + 1 = 2 output positions per axis
  REQUIRE(cols.shape() == std::vector<std::size_t>{9, 4});
  // top-left position reads the zero-padded corner
  REQUIRE(cols(0, 0) == 0.0f);
  REQUIRE(cols(4, 0) == x.data()[0]);
}
