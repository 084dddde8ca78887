#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <vector>

#include "fedmenu/rng.hpp"
#include "fedmenu/tensor.hpp"

namespace fedmenu::testing {

inline Tensor random_tensor(Rng& rng, Shape shape, double lo = -1.0, double hi = 1.0) {
  Tensor t(std::move(shape));
  for (auto& v : t.data()) v = rng.uniform(lo, hi);
  return t;
}

/// Random one-hot [B,C,H,W] with every pixel assigned one channel.
inline Tensor random_onehot(Rng& rng, std::size_t b, std::size_t c, std::size_t h, std::size_t w) {
  Tensor t({b, c, h, w}, 0.0);
  for (std::size_t n = 0; n < b; ++n)
    for (std::size_t y = 0; y < h; ++y)
      for (std::size_t x = 0; x < w; ++x)
        t.at(n, static_cast<std::size_t>(rng.uniform_int(0, static_cast<long>(c) - 1)), y, x) = 1.0;
  return t;
}

/// Random probability simplex per pixel, strictly inside (0, 1).
inline Tensor random_probs(Rng& rng, std::size_t b, std::size_t c, std::size_t h, std::size_t w) {
  Tensor t({b, c, h, w});
  for (std::size_t n = 0; n < b; ++n)
    for (std::size_t y = 0; y < h; ++y)
      for (std::size_t x = 0; x < w; ++x) {
        double s = 0.0;
        for (std::size_t k = 0; k < c; ++k) s += (t.at(n, k, y, x) = rng.uniform(0.05, 1.0));
        for (std::size_t k = 0; k < c; ++k) t.at(n, k, y, x) /= s;
      }
  return t;
}

/// Straight loop cross-correlation with zero padding.
inline Tensor naive_conv(const Tensor& x, const Tensor& w, const Tensor& b, int stride, int pad) {
  const std::size_t B = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  const std::size_t O = w.dim(0), kh = w.dim(2), kw = w.dim(3);
  const std::size_t oh = (H + 2 * pad - kh) / stride + 1, ow = (W + 2 * pad - kw) / stride + 1;
  Tensor out({B, O, oh, ow});
  for (std::size_t n = 0; n < B; ++n)
    for (std::size_t o = 0; o < O; ++o)
      for (std::size_t i = 0; i < oh; ++i)
        for (std::size_t j = 0; j < ow; ++j) {
          double acc = b[o];
          for (std::size_t c = 0; c < C; ++c)
            for (std::size_t u = 0; u < kh; ++u)
              for (std::size_t v = 0; v < kw; ++v) {
                const long y = static_cast<long>(i * stride + u) - pad;
                const long xx = static_cast<long>(j * stride + v) - pad;
                if (y < 0 || xx < 0 || y >= static_cast<long>(H) || xx >= static_cast<long>(W)) continue;
                acc += x.at(n, c, static_cast<std::size_t>(y), static_cast<std::size_t>(xx)) * w.at(o, c, u, v);
              }
          out.at(n, o, i, j) = acc;
        }
  return out;
}

inline double max_abs_diff(const Tensor& a, const Tensor& b) {
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

}  // namespace fedmenu::testing
