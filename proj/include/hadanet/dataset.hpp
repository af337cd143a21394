#pragma once

// Dataset ingestion: MNIST IDX files (big-endian magics, u8 pixels/labels)
// and a deterministic synthetic digit corpus for data-free runs. Both paths
// produce tensors normalized with the same documented constants.

#include <array>
#include <cstdint>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <random>
#include <string>
#include <vector>

#include "hadanet/config.hpp"
#include "hadanet/tensor.hpp"

namespace hadanet {

// Normalization applied to [0,1] pixel values at load time.
inline constexpr float kPixelMean = 0.1307f;
inline constexpr float kPixelStd = 0.3081f;

inline constexpr std::uint32_t kIdxImageMagic = 0x00000803u;
inline constexpr std::uint32_t kIdxLabelMagic = 0x00000801u;

struct DataSplit {
  Tensor images;            // (N, C, H, W), normalized
  std::vector<int> labels;  // N entries in [0, 9]
  std::size_t size() const { return labels.size(); }
};

namespace detail {

inline std::uint32_t read_u32_be(std::istream& in, const std::string& path) {
  unsigned char b[4];
  if (!in.read(reinterpret_cast<char*>(b), 4))
    throw DataError("truncated IDX header: " + path);
  return (std::uint32_t(b[0]) << 24) | (std::uint32_t(b[1]) << 16) |
         (std::uint32_t(b[2]) << 8) | std::uint32_t(b[3]);
}

inline std::string find_idx_file(const std::string& dir,
                                 std::initializer_list<const char*> names) {
  for (const char* n : names) {
    const std::filesystem::path p = std::filesystem::path(dir) / n;
    if (std::filesystem::exists(p)) return p.string();
  }
  throw DataError("dataset file not found under " + dir + " (tried " +
                  std::string(*names.begin()) + ")");
}

inline DataSplit load_idx_pair(const std::string& image_path,
                               const std::string& label_path) {
  std::ifstream imgs(image_path, std::ios::binary);
  if (!imgs) throw DataError("cannot open " + image_path);
  if (read_u32_be(imgs, image_path) != kIdxImageMagic)
    throw DataError("bad image magic in " + image_path);
  const std::uint32_t n = read_u32_be(imgs, image_path);
  const std::uint32_t rows = read_u32_be(imgs, image_path);
  const std::uint32_t cols = read_u32_be(imgs, image_path);

  std::ifstream labs(label_path, std::ios::binary);
  if (!labs) throw DataError("cannot open " + label_path);
  if (read_u32_be(labs, label_path) != kIdxLabelMagic)
    throw DataError("bad label magic in " + label_path);
  const std::uint32_t nl = read_u32_be(labs, label_path);
  if (nl != n)
    throw DataError("image/label count mismatch: " + std::to_string(n) +
                    " vs " + std::to_string(nl));

  DataSplit split;
  split.images = Tensor({n, 1, rows, cols});
  split.labels.resize(n);
  std::vector<unsigned char> buf(static_cast<std::size_t>(rows) * cols);
  for (std::uint32_t i = 0; i < n; ++i) {
    if (!imgs.read(reinterpret_cast<char*>(buf.data()),
                   static_cast<std::streamsize>(buf.size())))
      throw DataError("truncated image payload in " + image_path);
    float* dst = split.images.data() + std::size_t(i) * rows * cols;
    for (std::size_t p = 0; p < buf.size(); ++p)
      dst[p] = (buf[p] / 255.0f - kPixelMean) / kPixelStd;
    char lb;
    if (!labs.read(&lb, 1))
      throw DataError("truncated label payload in " + label_path);
    split.labels[i] = static_cast<unsigned char>(lb);
    if (split.labels[i] > 9)
      throw DataError("label out of range in " + label_path);
  }
  return split;
}

}  // namespace detail

// Resolves the dataset root: explicit argument, then HADANET_DATA_DIR,
// then ./data.
inline std::string resolve_data_dir(const std::string& requested) {
  if (!requested.empty()) return requested;
  if (const char* env = std::getenv("HADANET_DATA_DIR"); env && *env)
    return env;
  return "data";
}

inline std::pair<DataSplit, DataSplit> load_mnist(const std::string& dir) {
  if (!std::filesystem::is_directory(dir))
    throw DataError("dataset directory not found: " + dir);
  const std::string tr_img = detail::find_idx_file(
      dir, {"train-images-idx3-ubyte", "train-images.idx3-ubyte"});
  const std::string tr_lab = detail::find_idx_file(
      dir, {"train-labels-idx1-ubyte", "train-labels.idx1-ubyte"});
  const std::string te_img = detail::find_idx_file(
      dir, {"t10k-images-idx3-ubyte", "t10k-images.idx3-ubyte"});
  const std::string te_lab = detail::find_idx_file(
      dir, {"t10k-labels-idx1-ubyte", "t10k-labels.idx1-ubyte"});
  return {detail::load_idx_pair(tr_img, tr_lab),
          detail::load_idx_pair(te_img, te_lab)};
}

namespace detail {

// 16x12 stroke templates, one per digit class.
inline const std::array<std::array<const char*, 16>, 10>& digit_glyphs() {
  static const std::array<std::array<const char*, 16>, 10> glyphs = {{
      {"...######...", "..##....##..", ".##......##.", ".##......##.",
       "##........##", "##........##", "##........##", "##........##",
       "##........##", "##........##", ".##......##.", ".##......##.",
       "..##....##..", "...######...", "............", "............"},
      {".....##.....", "....###.....", "...####.....", "..##.##.....",
       ".....##.....", ".....##.....", ".....##.....", ".....##.....",
       ".....##.....", ".....##.....", ".....##.....", ".....##.....",
       ".....##.....", "..########..", "............", "............"},
      {"..########..", ".##......##.", "..........##", "..........##",
       ".........##.", "........##..", ".......##...", "......##....",
       ".....##.....", "....##......", "...##.......", "..##........",
       ".##.........", "############", "............", "............"},
      {"..########..", ".##......##.", "..........##", "..........##",
       "..........##", ".........##.", "....######..", ".........##.",
       "..........##", "..........##", "..........##", ".##......##.",
       "..##....##..", "...######...", "............", "............"},
      {".......##...", "......###...", ".....####...", "....##.##...",
       "...##..##...", "..##...##...", ".##....##...", "##.....##...",
       "############", ".......##...", ".......##...", ".......##...",
       ".......##...", ".......##...", "............", "............"},
      {".##########.", ".##.........", ".##.........", ".##.........",
       ".##.........", ".#########..", "..........##", "..........##",
       "..........##", "..........##", "..........##", ".##......##.",
       "..##....##..", "...######...", "............", "............"},
      {"....######..", "...##....##.", "..##........", ".##.........",
       ".##.........", "##..........", "##..######..", "##.##....##.",
       "###.......##", "##........##", "##........##", ".##......##.",
       "..##....##..", "...######...", "............", "............"},
      {"############", ".........##.", "........##..", ".......##...",
       "......##....", ".....##.....", ".....##.....", "....##......",
       "....##......", "...##.......", "...##.......", "..##........",
       "..##........", ".##.........", "............", "............"},
      {"...######...", "..##....##..", ".##......##.", ".##......##.",
       ".##......##.", "..##....##..", "...######...", "..##....##..",
       ".##......##.", "##........##", "##........##", "##........##",
       ".##......##.", "..########..", "............", "............"},
      {"...######...", "..##....##..", ".##......##.", "##........##",
       "##........##", "##........##", ".##......##.", "..########..",
       "........##..", ".......##...", "......##....", ".....##.....",
       "....##......", "...##.......", "............", "............"},
  }};
  return glyphs;
}

inline void render_digit(int digit, std::mt19937& rng, float* out28x28) {
  const auto& glyph = digit_glyphs()[static_cast<std::size_t>(digit)];
  std::uniform_int_distribution<int> shift(-3, 3);
  std::uniform_real_distribution<float> intensity(0.65f, 1.0f);
  std::uniform_real_distribution<float> unit(0.0f, 1.0f);
  std::normal_distribution<float> noise(0.0f, 0.22f);

  const int dy = shift(rng), dx = shift(rng);
  const float ink = intensity(rng);
  constexpr float kDropout = 0.08f;  // stroke pixels randomly thinned

  std::array<float, 28 * 28> img{};
  for (int r = 0; r < 16; ++r) {
    for (int c = 0; c < 12; ++c) {
      if (glyph[static_cast<std::size_t>(r)][c] != '#') continue;
      if (unit(rng) < kDropout) continue;
      const int y = 6 + r + dy, x = 8 + c + dx;
      img[static_cast<std::size_t>(y) * 28 + static_cast<std::size_t>(x)] =
          ink;
    }
  }
  for (std::size_t p = 0; p < img.size(); ++p) {
    const float v = std::clamp(img[p] + noise(rng), 0.0f, 1.0f);
    out28x28[p] = (v - kPixelMean) / kPixelStd;
  }
}

}  // namespace detail

// Procedurally rendered 28x28 digits: per-sample translation, ink level,
// stroke thinning and pixel noise. Deterministic for a fixed seed; labels
// cycle through the classes so every split is balanced.
inline DataSplit synthetic_digits(std::size_t n, std::uint64_t seed) {
  if (n == 0) throw DataError("synthetic_digits: empty split requested");
  std::mt19937 rng(static_cast<std::uint32_t>(seed * 0x9E3779B9u + 1));
  DataSplit split;
  split.images = Tensor({n, 1, 28, 28});
  split.labels.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    const int digit = static_cast<int>(i % 10);
    split.labels[i] = digit;
    detail::render_digit(digit, rng, split.images.data() + i * 28 * 28);
  }
  return split;
}

inline std::pair<DataSplit, DataSplit> load_dataset(const TrainConfig& cfg) {
  if (cfg.synthetic) {
    return {synthetic_digits(static_cast<std::size_t>(cfg.synthetic_train),
                             cfg.seed),
            synthetic_digits(static_cast<std::size_t>(cfg.synthetic_test),
                             cfg.seed + 0x5EEDu)};
  }
  auto [train, test] = load_mnist(resolve_data_dir(cfg.data_dir));
  return {std::move(train), std::move(test)};
}

// Keeps the first n samples of a split (0 = keep everything).
inline DataSplit truncate_split(DataSplit split, std::size_t n) {
  if (n == 0 || n >= split.size()) return split;
  const std::size_t sample = split.images.numel() / split.size();
  std::vector<float> data(split.images.data(),
                          split.images.data() + n * sample);
  std::vector<std::size_t> shape = split.images.shape();
  shape[0] = n;
  split.images = Tensor(shape, std::move(data));
  split.labels.resize(n);
  return split;
}

}  // namespace hadanet
