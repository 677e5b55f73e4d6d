#pragma once

#include <cmath>
#include <cstddef>
#include <filesystem>
#include <random>
#include <string>
#include <vector>

#include "visforce/autodiff.hpp"
#include "visforce/tensor.hpp"

namespace testing_support {

using visforce::Shape;
using visforce::Tensor;

inline Tensor random_tensor(Shape shape, std::mt19937_64& gen, double lo = -1.0, double hi = 1.0) {
  std::uniform_real_distribution<double> dist(lo, hi);
  Tensor t(std::move(shape));
  for (double& v : t.data()) v = dist(gen);
  return t;
}

inline double max_abs_diff(const Tensor& a, const Tensor& b) {
  double worst = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) worst = std::max(worst, std::abs(a[i] - b[i]));
  return worst;
}

// Straightforward reference implementations used as oracles.

inline Tensor conv_reference(const Tensor& x, const Tensor& k, std::size_t stride, bool same) {
  const long h = static_cast<long>(x.dim(0)), w = static_cast<long>(x.dim(1)), cin = static_cast<long>(x.dim(2));
  const long kh = static_cast<long>(k.dim(0)), kw = static_cast<long>(k.dim(1)), cout = static_cast<long>(k.dim(3));
  const long s = static_cast<long>(stride);
  long oh, ow, pt = 0, pl = 0;
  if (same) {
    oh = (h + s - 1) / s;
    ow = (w + s - 1) / s;
    pt = std::max(0L, (oh - 1) * s + kh - h) / 2;
    pl = std::max(0L, (ow - 1) * s + kw - w) / 2;
  } else {
    oh = (h - kh) / s + 1;
    ow = (w - kw) / s + 1;
  }
  Tensor out({static_cast<std::size_t>(oh), static_cast<std::size_t>(ow), static_cast<std::size_t>(cout)});
  for (long i = 0; i < oh; ++i)
    for (long j = 0; j < ow; ++j)
      for (long co = 0; co < cout; ++co) {
        double acc = 0.0;
        for (long a = 0; a < kh; ++a)
          for (long b = 0; b < kw; ++b)
            for (long ci = 0; ci < cin; ++ci) {
              const long y = i * s + a - pt, xx = j * s + b - pl;
              if (y < 0 || y >= h || xx < 0 || xx >= w) continue;
              acc += x[static_cast<std::size_t>((y * w + xx) * cin + ci)] *
                     k[static_cast<std::size_t>(((a * kw + b) * cin + ci) * cout + co)];
            }
        out[static_cast<std::size_t>((i * ow + j) * cout + co)] = acc;
      }
  return out;
}

inline Tensor maxpool_reference(const Tensor& x) {
  const std::size_t h = x.dim(0), w = x.dim(1), c = x.dim(2);
  Tensor out({h / 2, w / 2, c});
  for (std::size_t i = 0; i < h / 2; ++i)
    for (std::size_t j = 0; j < w / 2; ++j)
      for (std::size_t ch = 0; ch < c; ++ch) {
        double m = -INFINITY;
        for (std::size_t a = 0; a < 2; ++a)
          for (std::size_t b = 0; b < 2; ++b) m = std::max(m, x.at(2 * i + a, 2 * j + b, ch));
        out.at(i, j, ch) = m;
      }
  return out;
}

inline Tensor matmul_reference(const Tensor& a, const Tensor& b) {
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  Tensor out({m, n});
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) {
      double acc = 0.0;
      for (std::size_t p = 0; p < k; ++p) acc += a[i * k + p] * b[p * n + j];
      out[i * n + j] = acc;
    }
  return out;
}

inline Tensor gap_reference(const Tensor& x) {
  const std::size_t h = x.dim(0), w = x.dim(1), c = x.dim(2);
  Tensor out({c});
  for (std::size_t ch = 0; ch < c; ++ch) {
    double acc = 0.0;
    for (std::size_t i = 0; i < h; ++i)
      for (std::size_t j = 0; j < w; ++j) acc += x.at(i, j, ch);
    out[ch] = acc / static_cast<double>(h * w);
  }
  return out;
}

inline double sigmoid_reference(double x) { return 1.0 / (1.0 + std::exp(-x)); }

/// Fresh, empty scratch directory under the system temp dir.
inline std::filesystem::path scratch_dir(const std::string& name) {
  auto dir = std::filesystem::temp_directory_path() / ("visforce_test_" + name);
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);
  return dir;
}

}  // namespace testing_support
