#include "vik/data.hpp"

#include <cmath>
#include <filesystem>
#include <fstream>

namespace vik {

Dataset synth_dataset(std::uint64_t seed, int per_class, int classes, int resolution,
                      double sigma) {
  if (classes < 2) throw ConfigError("synth_dataset: need at least 2 classes");
  if (per_class < 1 || resolution < 4) throw ConfigError("synth_dataset: degenerate shape");
  const int n = classes * per_class, res = resolution;
  Dataset ds;
  ds.images = TensorF({n, 3, res, res});
  ds.labels.resize(n);
  ds.classes = classes;
  ds.split = "synth";
  Rng rng(seed);
  constexpr double kPi = 3.14159265358979323846;
  int idx = 0;
  // Class c is an oriented grating: orientation alternates between the two
  // image axes while the frequency steps through adjacent high values, so
  // neighbouring classes differ by one stripe across the whole image. Noise
  // has two parts, both scaled by sigma: white pixel noise and row/column
  // streak offsets shared across channels. Streaks shift every local window
  // statistic coherently, so rejecting them takes long-range structure.
  constexpr double kAmp = 0.012;
  std::vector<double> row_off(res), col_off(res);
  for (int c = 0; c < classes; ++c) {
    const bool vertical = (c % 2) == 0;  // stripes vary along x when true
    const double freq = res / 4.0 - 1 + (c + 2) / 2;
    for (int i = 0; i < per_class; ++i, ++idx) {
      ds.labels[idx] = c;
      for (int y = 0; y < res; ++y) row_off[y] = sigma > 0 ? sigma * rng.normal() : 0.0;
      for (int x = 0; x < res; ++x) col_off[x] = sigma > 0 ? sigma * rng.normal() : 0.0;
      for (int ch = 0; ch < 3; ++ch) {
        const double phase = ch * (kPi / 3);
        for (int y = 0; y < res; ++y)
          for (int x = 0; x < res; ++x) {
            const double u = (vertical ? x : y) / static_cast<double>(res);
            double v = 0.5 + kAmp * std::sin(2 * kPi * freq * u + phase) + row_off[y] + col_off[x];
            if (sigma > 0) v += sigma * rng.normal();
            ds.images(idx, ch, y, x) = static_cast<float>(std::min(1.0, std::max(0.0, v)));
          }
      }
    }
  }
  return ds;
}

Dataset load_cifar10_file(const std::string& path) {
  constexpr int kRecord = 3073, kPixels = 3072, kSide = 32;
  std::ifstream in(path, std::ios::binary | std::ios::ate);
  if (!in) throw DataError("cifar10: cannot open '" + path + "'");
  const std::int64_t size = in.tellg();
  if (size % kRecord != 0)
    throw FormatError("cifar10: '" + path + "' has " + std::to_string(size) +
                      " bytes, not a multiple of the 3073-byte record");
  const int n = static_cast<int>(size / kRecord);
  if (n == 0) throw FormatError("cifar10: '" + path + "' is empty");
  in.seekg(0);
  Dataset ds;
  ds.images = TensorF({n, 3, kSide, kSide});
  ds.labels.resize(n);
  ds.classes = 10;
  ds.split = std::filesystem::path(path).filename().string();
  std::vector<unsigned char> rec(kRecord);
  for (int i = 0; i < n; ++i) {
    in.read(reinterpret_cast<char*>(rec.data()), kRecord);
    if (!in)
      throw FormatError("cifar10: short read at record " + std::to_string(i) + " of '" + path +
                        "'");
    if (rec[0] > 9)
      throw DataError("cifar10: label byte " + std::to_string(rec[0]) + " at record " +
                      std::to_string(i) + " of '" + path + "'");
    ds.labels[i] = rec[0];
    float* dst = &ds.images(i, 0, 0, 0);
    for (int t = 0; t < kPixels; ++t) dst[t] = static_cast<float>(rec[1 + t]) / 255.0f;
  }
  return ds;
}

Cifar10 load_cifar10_binary(const std::string& dir) {
  namespace fs = std::filesystem;
  if (!fs::is_directory(dir)) throw DataError("cifar10: '" + dir + "' is not a directory");
  Cifar10 out;
  std::vector<Dataset> parts;
  for (int i = 1; i <= 5; ++i)
    parts.push_back(load_cifar10_file((fs::path(dir) / ("data_batch_" + std::to_string(i) +
                                                        ".bin")).string()));
  int total = 0;
  for (const auto& p : parts) total += p.n();
  out.train.images = TensorF({total, 3, 32, 32});
  out.train.labels.reserve(total);
  out.train.classes = 10;
  out.train.split = "train";
  std::int64_t off = 0;
  for (const auto& p : parts) {
    std::copy(p.images.data(), p.images.data() + p.images.size(), out.train.images.data() + off);
    off += p.images.size();
    out.train.labels.insert(out.train.labels.end(), p.labels.begin(), p.labels.end());
  }
  out.test = load_cifar10_file((fs::path(dir) / "test_batch.bin").string());
  out.test.split = "test";
  return out;
}

void flip_horizontal(TensorF& images, int b) {
  const int C = images.dim(1), H = images.dim(2), W = images.dim(3);
  for (int c = 0; c < C; ++c)
    for (int y = 0; y < H; ++y) {
      float* row = &images(b, c, y, 0);
      for (int x = 0; x < W / 2; ++x) std::swap(row[x], row[W - 1 - x]);
    }
}

}  // namespace vik
