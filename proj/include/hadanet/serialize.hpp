#pragma once

// Model persistence. Container layout (little-endian throughout):
//
//   magic "HDNT" | u16 version=1 | u16 layer_count | layer records... |
//   u32 crc32 of the record bytes
//
// Each HadaDense/HadaConv2d record carries extents, beta_w/beta_a, a payload
// kind byte (0 = dense f32 master weights, 1 = packed), the weight payload
// and a dense f32 bias. Packed weights use the shared packed-matrix layout:
//   u32 M | u32 K | u32 beta | f32 scales[M * ceil(K/beta)] |
//   u64 bits[M * ceil(K/64)]
// BatchNorm stores gamma/beta/running mean/running var densely. Layers with
// beta_w = 1 always store dense weights; `force_dense` stores everything
// dense (the size baseline `inspect` reports against).

#include <cstdint>
#include <cstring>
#include <fstream>
#include <string>
#include <vector>

#include "hadanet/config.hpp"
#include "hadanet/crc32.hpp"
#include "hadanet/network.hpp"
#include "hadanet/packing.hpp"

namespace hadanet {

inline constexpr char kModelMagic[4] = {'H', 'D', 'N', 'T'};
inline constexpr std::uint16_t kModelVersion = 1;

namespace detail {

struct ByteWriter {
  std::vector<unsigned char> bytes;

  void u8(std::uint8_t v) { bytes.push_back(v); }
  void u16(std::uint16_t v) {
    bytes.push_back(static_cast<unsigned char>(v & 0xFF));
    bytes.push_back(static_cast<unsigned char>(v >> 8));
  }
  void u32(std::uint32_t v) {
    for (int i = 0; i < 4; ++i)
      bytes.push_back(static_cast<unsigned char>((v >> (8 * i)) & 0xFF));
  }
  void u64(std::uint64_t v) {
    for (int i = 0; i < 8; ++i)
      bytes.push_back(static_cast<unsigned char>((v >> (8 * i)) & 0xFF));
  }
  void f32(float v) {
    std::uint32_t u;
    std::memcpy(&u, &v, 4);
    u32(u);
  }
  void f32_array(const float* p, std::size_t n) {
    for (std::size_t i = 0; i < n; ++i) f32(p[i]);
  }
};

struct ByteReader {
  const unsigned char* p = nullptr;
  std::size_t n = 0;
  std::size_t at = 0;

  void need(std::size_t k) const {
    if (at + k > n) throw ModelError("model file: truncated payload");
  }
  std::uint8_t u8() {
    need(1);
    return p[at++];
  }
  std::uint16_t u16() {
    need(2);
    const std::uint16_t v =
        static_cast<std::uint16_t>(p[at]) |
        static_cast<std::uint16_t>(p[at + 1]) << 8;
    at += 2;
    return v;
  }
  std::uint32_t u32() {
    need(4);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i)
      v |= static_cast<std::uint32_t>(p[at + static_cast<std::size_t>(i)])
           << (8 * i);
    at += 4;
    return v;
  }
  std::uint64_t u64() {
    need(8);
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i)
      v |= static_cast<std::uint64_t>(p[at + static_cast<std::size_t>(i)])
           << (8 * i);
    at += 8;
    return v;
  }
  float f32() {
    const std::uint32_t u = u32();
    float v;
    std::memcpy(&v, &u, 4);
    return v;
  }
  void f32_array(float* dst, std::size_t k) {
    for (std::size_t i = 0; i < k; ++i) dst[i] = f32();
  }
};

inline void write_packed_matrix(ByteWriter& w, const PackedHadaMatrix& m) {
  w.u32(static_cast<std::uint32_t>(m.rows));
  w.u32(static_cast<std::uint32_t>(m.cols));
  w.u32(m.beta);
  w.f32_array(m.scales.data(), m.scales.size());
  for (std::uint64_t word : m.bits) w.u64(word);
}

inline PackedHadaMatrix read_packed_matrix(ByteReader& r) {
  PackedHadaMatrix m;
  m.rows = r.u32();
  m.cols = r.u32();
  m.beta = r.u32();
  if (m.beta < 1 || m.rows == 0 || m.cols == 0)
    throw ModelError("model file: bad packed matrix header");
  m.scales.resize(m.rows * m.blocks_per_row());
  r.f32_array(m.scales.data(), m.scales.size());
  m.bits.resize(m.rows * m.words_per_row());
  for (auto& word : m.bits) word = r.u64();
  return m;
}

// Packs an already-binarized weight matrix without re-averaging, so a
// loaded model can be re-saved bit-exactly: the scale of each block is the
// magnitude its elements already share.
inline PackedHadaMatrix pack_binarized_matrix(const Tensor& w,
                                              std::size_t beta) {
  PackedHadaMatrix m;
  m.rows = w.extent(0);
  m.cols = w.extent(1);
  m.beta = static_cast<std::uint32_t>(beta);
  m.scales.resize(m.rows * m.blocks_per_row());
  m.bits.assign(m.rows * m.words_per_row(), 0);
  for (std::size_t r = 0; r < m.rows; ++r) {
    float* sc = m.scales.data() + r * m.blocks_per_row();
    std::uint64_t* bits = m.bits.data() + r * m.words_per_row();
    for (std::size_t i = 0; i < m.cols; ++i) {
      const float v = w(r, i);
      if (i % beta == 0) sc[i / beta] = std::fabs(v);
      if (!(v < 0.0f)) bits[i / 64] |= std::uint64_t{1} << (i % 64);
    }
  }
  return m;
}

}  // namespace detail

inline void save_model(Network& net, const std::string& path,
                       bool force_dense = false) {
  detail::ByteWriter records;
  for (auto& lp : net.layers()) {
    const LayerSpec& s = lp->spec();
    records.u8(static_cast<std::uint8_t>(s.kind));
    switch (s.kind) {
      case LayerKind::HadaDense: {
        auto& l = static_cast<DenseLayer&>(*lp);
        records.u32(static_cast<std::uint32_t>(s.in_features));
        records.u32(static_cast<std::uint32_t>(s.out_features));
        records.u32(static_cast<std::uint32_t>(s.beta_w));
        records.u32(static_cast<std::uint32_t>(s.beta_a));
        const bool packed = s.beta_w > 1 && !force_dense;
        records.u8(packed ? 1 : 0);
        if (packed) {
          const PackedHadaMatrix m =
              l.prebinarized()
                  ? detail::pack_binarized_matrix(l.weight().value, s.beta_w)
                  : pack_matrix(l.weight().value, s.beta_w);
          detail::write_packed_matrix(records, m);
        } else {
          records.f32_array(l.weight().value.data(),
                            l.weight().value.numel());
        }
        records.f32_array(l.bias().value.data(), l.bias().value.numel());
        break;
      }
      case LayerKind::HadaConv2d: {
        auto& l = static_cast<ConvLayer&>(*lp);
        records.u32(static_cast<std::uint32_t>(s.filters));
        records.u32(static_cast<std::uint32_t>(s.channels));
        records.u32(static_cast<std::uint32_t>(s.kernel_h));
        records.u32(static_cast<std::uint32_t>(s.kernel_w));
        records.u32(static_cast<std::uint32_t>(s.stride));
        records.u32(static_cast<std::uint32_t>(s.pad));
        records.u32(static_cast<std::uint32_t>(s.beta_w));
        records.u32(static_cast<std::uint32_t>(s.beta_a));
        const bool packed = s.beta_w > 1 && !force_dense;
        records.u8(packed ? 1 : 0);
        const Tensor wmat = l.weight().value.reshape(
            {static_cast<std::int64_t>(s.filters), -1});
        if (packed) {
          const PackedHadaMatrix m =
              l.prebinarized()
                  ? detail::pack_binarized_matrix(wmat, s.beta_w)
                  : pack_matrix(wmat, s.beta_w);
          detail::write_packed_matrix(records, m);
        } else {
          records.f32_array(wmat.data(), wmat.numel());
        }
        records.f32_array(l.bias().value.data(), l.bias().value.numel());
        break;
      }
      case LayerKind::BatchNorm: {
        auto& l = static_cast<BatchNormLayer&>(*lp);
        records.u32(static_cast<std::uint32_t>(s.bn_features));
        records.u8(s.bn_spatial ? 1 : 0);
        records.f32_array(l.gamma().value.data(), s.bn_features);
        records.f32_array(l.beta().value.data(), s.bn_features);
        records.f32_array(l.running_mean().data(), s.bn_features);
        records.f32_array(l.running_var().data(), s.bn_features);
        break;
      }
      case LayerKind::ReLU:
      case LayerKind::Flatten:
        break;
      case LayerKind::MaxPool2d:
        records.u32(static_cast<std::uint32_t>(s.pool));
        break;
    }
  }

  detail::ByteWriter out;
  out.bytes.insert(out.bytes.end(), kModelMagic, kModelMagic + 4);
  out.u16(kModelVersion);
  out.u16(static_cast<std::uint16_t>(net.layers().size()));
  out.bytes.insert(out.bytes.end(), records.bytes.begin(),
                   records.bytes.end());
  out.u32(crc32(records.bytes.data(), records.bytes.size()));

  std::ofstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot write model file: " + path);
  f.write(reinterpret_cast<const char*>(out.bytes.data()),
          static_cast<std::streamsize>(out.bytes.size()));
  if (!f) throw std::runtime_error("short write on model file: " + path);
}

inline Network load_model(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw ModelError("cannot open model file: " + path);
  std::vector<unsigned char> bytes(
      (std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  if (bytes.size() < 12) throw ModelError("model file too small: " + path);
  if (std::memcmp(bytes.data(), kModelMagic, 4) != 0)
    throw ModelError("bad magic in model file: " + path);

  detail::ByteReader r{bytes.data(), bytes.size() - 4, 4};
  const std::uint16_t version = r.u16();
  if (version != kModelVersion)
    throw ModelError("unsupported model version " + std::to_string(version));
  const std::uint16_t nlayers = r.u16();

  const std::size_t records_at = r.at;
  {
    detail::ByteReader tail{bytes.data(), bytes.size(), bytes.size() - 4};
    const std::uint32_t stored = tail.u32();
    const std::uint32_t actual =
        crc32(bytes.data() + records_at, bytes.size() - 4 - records_at);
    if (stored != actual)
      throw ModelError("model file checksum failure: " + path);
  }

  Network net;
  for (std::uint16_t i = 0; i < nlayers; ++i) {
    const auto kind = static_cast<LayerKind>(r.u8());
    switch (kind) {
      case LayerKind::HadaDense: {
        const std::uint32_t in = r.u32(), out = r.u32();
        const std::uint32_t bw = r.u32(), ba = r.u32();
        const std::uint8_t payload = r.u8();
        net.add(LayerSpec::dense(in, out, bw, ba));
        auto& l = static_cast<DenseLayer&>(*net.layers().back());
        if (payload == 1) {
          const PackedHadaMatrix m = detail::read_packed_matrix(r);
          if (m.rows != out || m.cols != in || m.beta != bw)
            throw ModelError("model file: packed matrix does not match "
                             "layer extents");
          l.weight().value = unpack_matrix(m);
          l.set_prebinarized(true);
        } else if (payload == 0) {
          r.f32_array(l.weight().value.data(), l.weight().value.numel());
        } else {
          throw ModelError("model file: unknown payload kind");
        }
        r.f32_array(l.bias().value.data(), l.bias().value.numel());
        break;
      }
      case LayerKind::HadaConv2d: {
        const std::uint32_t filters = r.u32(), channels = r.u32();
        const std::uint32_t kh = r.u32(), kw = r.u32();
        const std::uint32_t stride = r.u32(), pad = r.u32();
        const std::uint32_t bw = r.u32(), ba = r.u32();
        const std::uint8_t payload = r.u8();
        net.add(LayerSpec::conv2d(filters, channels, kh, kw, stride, pad, bw,
                                  ba));
        auto& l = static_cast<ConvLayer&>(*net.layers().back());
        if (payload == 1) {
          const PackedHadaMatrix m = detail::read_packed_matrix(r);
          if (m.rows != filters || m.cols != std::size_t{channels} * kh * kw ||
              m.beta != bw)
            throw ModelError("model file: packed matrix does not match "
                             "layer extents");
          Tensor wmat = unpack_matrix(m);
          l.weight().value = std::move(wmat).reshape(
              {static_cast<std::int64_t>(filters),
               static_cast<std::int64_t>(channels),
               static_cast<std::int64_t>(kh), static_cast<std::int64_t>(kw)});
          l.set_prebinarized(true);
        } else if (payload == 0) {
          r.f32_array(l.weight().value.data(), l.weight().value.numel());
        } else {
          throw ModelError("model file: unknown payload kind");
        }
        r.f32_array(l.bias().value.data(), l.bias().value.numel());
        break;
      }
      case LayerKind::BatchNorm: {
        const std::uint32_t features = r.u32();
        const bool spatial = r.u8() != 0;
        net.add(LayerSpec::batchnorm(features, spatial));
        auto& l = static_cast<BatchNormLayer&>(*net.layers().back());
        r.f32_array(l.gamma().value.data(), features);
        r.f32_array(l.beta().value.data(), features);
        r.f32_array(l.running_mean().data(), features);
        r.f32_array(l.running_var().data(), features);
        break;
      }
      case LayerKind::ReLU:
        net.add(LayerSpec::relu());
        break;
      case LayerKind::MaxPool2d:
        net.add(LayerSpec::maxpool(r.u32()));
        break;
      case LayerKind::Flatten:
        net.add(LayerSpec::flatten());
        break;
      default:
        throw ModelError("model file: unknown layer kind");
    }
  }
  if (r.at != r.n) throw ModelError("model file: trailing bytes");
  return net;
}

struct LayerSizeInfo {
  std::size_t index = 0;
  std::string kind;
  std::string shape;
  std::size_t beta_w = 1, beta_a = 1;
  std::size_t params = 0;        // weight element count (bias excluded)
  std::size_t stored_bytes = 0;  // weight payload as serialized
  std::size_t dense_bytes = 0;   // the same weights at f32
  bool packed = false;
};

struct ModelSizeInfo {
  std::vector<LayerSizeInfo> layers;
  std::size_t total_stored = 0;
  std::size_t total_dense = 0;
  double ratio = 0.0;  // dense / stored
};

// Size accounting mirroring exactly what save_model would write for the
// weight payloads (bias and BN vectors count as dense on both sides).
inline ModelSizeInfo model_size_info(Network& net) {
  ModelSizeInfo info;
  for (std::size_t i = 0; i < net.layers().size(); ++i) {
    const LayerSpec& s = net.layers()[i]->spec();
    LayerSizeInfo row;
    row.index = i;
    row.beta_w = s.beta_w;
    row.beta_a = s.beta_a;
    switch (s.kind) {
      case LayerKind::HadaDense: {
        row.kind = "HadaDense";
        row.shape = std::to_string(s.out_features) + "x" +
                    std::to_string(s.in_features);
        row.params = s.out_features * s.in_features;
        row.packed = s.beta_w > 1;
        const std::size_t bias_bytes = 4 * s.out_features;
        row.dense_bytes = 4 * row.params + bias_bytes;
        row.stored_bytes =
            row.packed
                ? 12 + 4 * s.out_features * block_count(s.in_features, s.beta_w) +
                      8 * s.out_features * word_count(s.in_features) +
                      bias_bytes
                : row.dense_bytes;
        break;
      }
      case LayerKind::HadaConv2d: {
        row.kind = "HadaConv2d";
        const std::size_t rowlen = s.channels * s.kernel_h * s.kernel_w;
        row.shape = std::to_string(s.filters) + "x" +
                    std::to_string(s.channels) + "x" +
                    std::to_string(s.kernel_h) + "x" +
                    std::to_string(s.kernel_w);
        row.params = s.filters * rowlen;
        row.packed = s.beta_w > 1;
        const std::size_t bias_bytes = 4 * s.filters;
        row.dense_bytes = 4 * row.params + bias_bytes;
        row.stored_bytes =
            row.packed ? 12 + 4 * s.filters * block_count(rowlen, s.beta_w) +
                             8 * s.filters * word_count(rowlen) + bias_bytes
                       : row.dense_bytes;
        break;
      }
      case LayerKind::BatchNorm:
        row.kind = "BatchNorm";
        row.shape = std::to_string(s.bn_features);
        row.params = 2 * s.bn_features;
        row.dense_bytes = 16 * s.bn_features;
        row.stored_bytes = row.dense_bytes;
        break;
      case LayerKind::ReLU:
        row.kind = "ReLU";
        break;
      case LayerKind::MaxPool2d:
        row.kind = "MaxPool2d";
        row.shape = std::to_string(s.pool);
        break;
      case LayerKind::Flatten:
        row.kind = "Flatten";
        break;
    }
    info.total_stored += row.stored_bytes;
    info.total_dense += row.dense_bytes;
    info.layers.push_back(std::move(row));
  }
  info.ratio = info.total_stored == 0
                   ? 0.0
                   : static_cast<double>(info.total_dense) /
                         static_cast<double>(info.total_stored);
  return info;
}

}  // namespace hadanet
