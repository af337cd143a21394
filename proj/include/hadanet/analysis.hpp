#pragma once

// The three study tools: angle preservation of binarized random vectors,
// Pearson correlation of a trained model's activations across binarization
// aggressions, and model-size accounting for standard architecture shapes.

#include <cmath>
#include <cstdint>
#include <fstream>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "hadanet/config.hpp"
#include "hadanet/hadamard.hpp"
#include "hadanet/network.hpp"
#include "hadanet/packing.hpp"

namespace hadanet {

struct AngleRecord {
  std::size_t beta = 1;
  std::size_t n = 0;
  int trials = 0;
  double mean_deg = 0.0;
  double stderr_deg = 0.0;
};

namespace detail {

// Angle between v and its binarization, in degrees. 64-bit accumulation;
// the cosine is clamped so identical vectors give exactly 0.
inline double binarization_angle_deg(std::span<const float> v,
                                     std::size_t beta) {
  std::vector<float> tilde(v.size());
  for (std::size_t lo = 0; lo < v.size(); lo += beta) {
    const std::size_t hi = std::min(lo + beta, v.size());
    float sum = 0.0f;
    for (std::size_t i = lo; i < hi; ++i) sum += std::fabs(v[i]);
    const float mean = sum / static_cast<float>(hi - lo);
    for (std::size_t i = lo; i < hi; ++i) tilde[i] = mean * sign_pm1(v[i]);
  }
  double dot = 0.0, na = 0.0, nb = 0.0;
  for (std::size_t i = 0; i < v.size(); ++i) {
    dot += double(v[i]) * tilde[i];
    na += double(v[i]) * v[i];
    nb += double(tilde[i]) * tilde[i];
  }
  const double denom = std::sqrt(na * nb);
  if (denom == 0.0) return -1.0;  // degenerate draw, caller re-draws
  const double c = dot / denom;
  if (c >= 1.0) return 0.0;
  if (c <= -1.0) return 180.0;
  return std::acos(c) * 180.0 / M_PI;
}

}  // namespace detail

// Draws standard-normal vectors and measures the angle to their binarized
// versions. One draw per trial is shared by every beta, so the per-beta
// means ride on common random numbers.
inline std::vector<AngleRecord> angle_study(std::size_t n,
                                            const std::vector<std::size_t>& betas,
                                            int trials, std::uint64_t seed) {
  if (trials < 1) throw AnalysisError("angle_study: trials must be >= 1");
  for (std::size_t b : betas) {
    if (b < 1) throw AnalysisError("angle_study: beta must be >= 1");
    if (b > n)
      throw AnalysisError("angle_study: beta " + std::to_string(b) +
                          " exceeds vector length " + std::to_string(n));
  }
  std::mt19937_64 rng(seed);
  std::normal_distribution<float> normal(0.0f, 1.0f);

  std::vector<std::vector<double>> samples(betas.size());
  std::vector<float> v(n);
  for (int t = 0; t < trials; ++t) {
    // A degenerate (all-zero) draw is re-drawn; any nonzero vector has a
    // nonzero binarization for every beta.
    float norm = 0.0f;
    do {
      norm = 0.0f;
      for (auto& x : v) {
        x = normal(rng);
        norm += std::fabs(x);
      }
    } while (norm == 0.0f);
    for (std::size_t bi = 0; bi < betas.size(); ++bi)
      samples[bi].push_back(detail::binarization_angle_deg(v, betas[bi]));
  }

  std::vector<AngleRecord> out;
  for (std::size_t bi = 0; bi < betas.size(); ++bi) {
    AngleRecord rec;
    rec.beta = betas[bi];
    rec.n = n;
    rec.trials = trials;
    double sum = 0.0;
    for (double d : samples[bi]) sum += d;
    rec.mean_deg = sum / trials;
    double var = 0.0;
    for (double d : samples[bi]) var += (d - rec.mean_deg) * (d - rec.mean_deg);
    rec.stderr_deg =
        trials > 1 ? std::sqrt(var / (trials - 1) / trials) : 0.0;
    out.push_back(rec);
  }
  return out;
}

inline void write_angle_csv(const std::vector<AngleRecord>& records,
                            std::ostream& out) {
  out << "beta,n,trials,mean_deg,stderr\n";
  char buf[128];
  for (const auto& r : records) {
    std::snprintf(buf, sizeof(buf), "%zu,%zu,%d,%.6f,%.6f\n", r.beta, r.n,
                  r.trials, r.mean_deg, r.stderr_deg);
    out << buf;
  }
}

// Two-pass Pearson correlation in doubles. Returns false when either side
// has zero variance (the coefficient is undefined).
inline bool pearson(std::span<const float> x, std::span<const float> y,
                    double& r_out) {
  if (x.size() != y.size() || x.empty())
    throw AnalysisError("pearson: length mismatch or empty input");
  double mx = 0.0, my = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    mx += x[i];
    my += y[i];
  }
  mx /= static_cast<double>(x.size());
  my /= static_cast<double>(x.size());
  double sxy = 0.0, sxx = 0.0, syy = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double dx = x[i] - mx, dy = y[i] - my;
    sxy += dx * dy;
    sxx += dx * dx;
    syy += dy * dy;
  }
  if (sxx == 0.0 || syy == 0.0) return false;
  r_out = sxy / std::sqrt(sxx * syy);
  return true;
}

struct CorrRecord {
  std::size_t layer = 0;  // index into the network's layer stack
  std::size_t beta_w = 1, beta_a = 1;
  double r = 0.0;
  bool valid = true;  // false = undefined cell (constant activations)
};

namespace detail {

inline std::vector<std::pair<std::size_t, Tensor>> capture_hada_outputs(
    Network& net, const Tensor& batch) {
  std::vector<std::pair<std::size_t, Tensor>> captured;
  net.ctx().capture = &captured;
  net.forward(batch, /*train=*/false);
  net.ctx().capture = nullptr;
  return captured;
}

}  // namespace detail

// Width of the activation entering each Hada layer (the admissible upper
// bound for its beta_a), found by walking a batch through the stack.
inline std::vector<std::size_t> hada_input_widths(Network& net,
                                                  const Tensor& batch) {
  std::vector<std::size_t> widths;
  Tensor cur = batch;
  for (auto& l : net.layers()) {
    const LayerKind k = l->spec().kind;
    if (k == LayerKind::HadaDense || k == LayerKind::HadaConv2d)
      widths.push_back(cur.extent(cur.rank() - 1));
    cur = l->forward(cur, /*train=*/false);
  }
  return widths;
}

// Runs the same trained weights under every (beta_w, beta_a) cell of the
// grid and correlates each inner Hada layer's output against the
// (1, 1) variant over a fixed evaluation batch. The inner layers' admissible
// activation widths bound beta_a per layer.
inline std::vector<CorrRecord> correlation_study(
    Network& net, const std::vector<std::size_t>& grid_w,
    const std::vector<std::size_t>& grid_a, const Tensor& batch,
    const std::vector<std::size_t>& inner_widths) {
  const auto hada = net.hada_layer_indices();
  if (hada.size() < 3)
    throw AnalysisError("correlation_study: no inner Hada layers");

  // Remember the trained betas so the network is left untouched.
  std::vector<std::pair<std::size_t, std::size_t>> saved;
  for (std::size_t idx : hada)
    saved.emplace_back(net.layers()[idx]->spec().beta_w,
                       net.layers()[idx]->spec().beta_a);

  net.set_inner_betas(1, 1, inner_widths);
  const auto reference = detail::capture_hada_outputs(net, batch);

  std::vector<CorrRecord> out;
  for (std::size_t bw : grid_w) {
    for (std::size_t ba : grid_a) {
      net.set_inner_betas(bw, ba, inner_widths);
      const auto variant = detail::capture_hada_outputs(net, batch);
      for (std::size_t k = 0; k < variant.size(); ++k) {
        const std::size_t layer_idx = variant[k].first;
        const bool edge =
            layer_idx == hada.front() || layer_idx == hada.back();
        if (edge) continue;  // stays full precision in every variant
        CorrRecord rec;
        rec.layer = layer_idx;
        rec.beta_w = bw;
        rec.beta_a = ba;
        const Tensor& a = variant[k].second;
        const Tensor& b = reference[k].second;
        rec.valid = pearson(
            std::span<const float>(a.data(), a.numel()),
            std::span<const float>(b.data(), b.numel()), rec.r);
        out.push_back(rec);
      }
    }
  }

  for (std::size_t k = 0; k < hada.size(); ++k) {
    net.layers()[hada[k]]->spec().beta_w = saved[k].first;
    net.layers()[hada[k]]->spec().beta_a = saved[k].second;
  }
  return out;
}

inline void write_correlation_csv(const std::vector<CorrRecord>& records,
                                  std::ostream& out) {
  out << "layer,beta_w,beta_a,pearson_r\n";
  char buf[128];
  for (const auto& r : records) {
    if (!r.valid) continue;  // undefined cells are omitted
    std::snprintf(buf, sizeof(buf), "%zu,%zu,%zu,%.8f\n", r.layer, r.beta_w,
                  r.beta_a, r.r);
    out << buf;
  }
}

// ---------------------------------------------------------------------------
// Model-size accounting.

struct ArchLayer {
  std::string name;
  std::size_t params = 0;   // weight element count
  bool binarized = true;    // false = stays dense (first/last layers)
};

struct MemoryRow {
  std::string layer;
  std::size_t params = 0;
  std::size_t beta_w = 1;
  double dense_bytes = 0.0;
  double packed_bytes = 0.0;
  double ratio = 0.0;
};

struct MemoryReport {
  std::vector<MemoryRow> rows;
  double total_dense = 0.0;
  double total_packed = 0.0;
  double ratio = 0.0;
};

// Weight-only shape tables of the two published reference architectures,
// used purely for size accounting; nothing here is instantiated.
inline std::vector<ArchLayer> resnet18_table() {
  std::vector<ArchLayer> t;
  t.push_back({"conv1 64x3x7x7", 64ull * 3 * 7 * 7, false});
  auto block = [&t](const std::string& stage, std::size_t in, std::size_t out,
                    bool downsample) {
    t.push_back({stage + ".conv1 " + std::to_string(out) + "x" +
                     std::to_string(in) + "x3x3",
                 out * in * 9, true});
    t.push_back({stage + ".conv2 " + std::to_string(out) + "x" +
                     std::to_string(out) + "x3x3",
                 out * out * 9, true});
    if (downsample)
      t.push_back({stage + ".downsample " + std::to_string(out) + "x" +
                       std::to_string(in) + "x1x1",
                   out * in, true});
  };
  block("layer1.0", 64, 64, false);
  block("layer1.1", 64, 64, false);
  block("layer2.0", 64, 128, true);
  block("layer2.1", 128, 128, false);
  block("layer3.0", 128, 256, true);
  block("layer3.1", 256, 256, false);
  block("layer4.0", 256, 512, true);
  block("layer4.1", 512, 512, false);
  t.push_back({"fc 1000x512", 1000ull * 512, false});
  return t;
}

inline std::vector<ArchLayer> alexnet_table() {
  return {
      {"conv1 64x3x11x11", 64ull * 3 * 11 * 11, false},
      {"conv2 192x64x5x5", 192ull * 64 * 5 * 5, true},
      {"conv3 384x192x3x3", 384ull * 192 * 3 * 3, true},
      {"conv4 256x384x3x3", 256ull * 384 * 3 * 3, true},
      {"conv5 256x256x3x3", 256ull * 256 * 3 * 3, true},
      {"fc6 4096x9216", 4096ull * 9216, true},
      {"fc7 4096x4096", 4096ull * 4096, true},
      {"fc8 1000x4096", 1000ull * 4096, false},
  };
}

// Mixed-model size: binarized layers cost params*(1/beta_w + 1/X) 4-byte
// units (one scale per block plus one sign bit per element packed into
// X-bit words); dense layers cost params * 4 bytes. The overall ratio tends
// to beta_w*X / (beta_w + X) as binarized layers dominate.
inline MemoryReport memory_saving(const std::vector<ArchLayer>& layers,
                                  std::size_t beta_w, std::size_t X = 32) {
  if (X != 8 && X != 16 && X != 32 && X != 64)
    throw AnalysisError("memory_saving: X must be one of 8/16/32/64");
  if (beta_w < 1) throw AnalysisError("memory_saving: beta_w must be >= 1");
  MemoryReport rep;
  for (const auto& l : layers) {
    if (l.params == 0)
      throw AnalysisError("memory_saving: zero-parameter layer " + l.name);
    MemoryRow row;
    row.layer = l.name;
    row.params = l.params;
    row.beta_w = l.binarized ? beta_w : 1;
    row.dense_bytes = 4.0 * static_cast<double>(l.params);
    row.packed_bytes =
        l.binarized
            ? static_cast<double>(l.params) *
                  (1.0 / static_cast<double>(beta_w) +
                   1.0 / static_cast<double>(X)) *
                  4.0
            : row.dense_bytes;
    row.ratio = row.dense_bytes / row.packed_bytes;
    rep.total_dense += row.dense_bytes;
    rep.total_packed += row.packed_bytes;
    rep.rows.push_back(std::move(row));
  }
  rep.ratio = rep.total_dense / rep.total_packed;
  return rep;
}

inline void write_memory_csv(const MemoryReport& rep, std::ostream& out) {
  out << "layer,params,beta_w,dense_bytes,packed_bytes,ratio\n";
  char buf[192];
  for (const auto& r : rep.rows) {
    std::snprintf(buf, sizeof(buf), "%s,%zu,%zu,%.1f,%.1f,%.4f\n",
                  r.layer.c_str(), r.params, r.beta_w, r.dense_bytes,
                  r.packed_bytes, r.ratio);
    out << buf;
  }
}

}  // namespace hadanet
