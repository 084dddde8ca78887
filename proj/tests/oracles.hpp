#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <set>
#include <utility>
#include <vector>

#include "fedmenu/losses.hpp"
#include "fedmenu/metrics.hpp"
#include "fedmenu/rng.hpp"
#include "fedmenu/tensor.hpp"

namespace fedmenu::testing {

inline constexpr double kSmooth = 1e-5;
inline constexpr double kClamp = 1e-6;

// Scalar oracles on flat per-pixel arrays.
inline double ce_ref(const std::vector<double>& q, const std::vector<double>& y) {
  double s = 0.0;
  for (std::size_t i = 0; i < q.size(); ++i)
    s += -(y[i] * std::log(std::max(q[i], kClamp)) + (1.0 - y[i]) * std::log(std::max(1.0 - q[i], kClamp)));
  return s / static_cast<double>(q.size());
}

inline double dice_ref(const std::vector<double>& q, const std::vector<double>& y, std::size_t batch) {
  const std::size_t n = q.size() / batch;
  double total = 0.0;
  for (std::size_t b = 0; b < batch; ++b) {
    double inter = 0.0, sp = 0.0, sy = 0.0;
    for (std::size_t i = b * n; i < (b + 1) * n; ++i) {
      inter += q[i] * y[i];
      sp += q[i];
      sy += y[i];
    }
    total += 1.0 - (2.0 * inter + kSmooth) / (sp + sy + kSmooth);
  }
  return total / static_cast<double>(batch);
}

inline double ce_dice_ref(const std::vector<double>& q, const std::vector<double>& y, std::size_t batch) {
  return ce_ref(q, y) + dice_ref(q, y, batch);
}

inline LabelMap random_labels(Rng& rng, std::size_t b, std::size_t h, std::size_t w, int m, const std::set<int>& labeled) {
  LabelMap l;
  l.batch = b;
  l.height = h;
  l.width = w;
  l.labeled_set = labeled;
  l.classes.resize(b * h * w);
  for (auto& c : l.classes) {
    const int v = static_cast<int>(rng.uniform_int(0, m));
    c = static_cast<std::uint16_t>(labeled.count(v) ? v : 0);
  }
  return l;
}

/// Independent recomputation of sup + marginal + lambda * exclusion.
inline double partial_ref(const Tensor& p, const LabelMap& l, double lambda_excl) {
  const std::size_t B = p.dim(0), C = p.dim(1), HW = p.dim(2) * p.dim(3);
  double sup = 0.0;
  for (int m : l.labeled_set) {
    std::vector<double> q, y;
    for (std::size_t b = 0; b < B; ++b)
      for (std::size_t i = 0; i < HW; ++i) {
        q.push_back(p[(b * C + static_cast<std::size_t>(m)) * HW + i]);
        y.push_back(l.classes[b * HW + i] == m ? 1.0 : 0.0);
      }
    sup += ce_dice_ref(q, y, B);
  }
  std::vector<double> bg, fg, clamped;
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t i = 0; i < HW; ++i) {
      double s = p[(b * C) * HW + i];
      for (std::size_t c = 1; c < C; ++c)
        if (!l.labeled_set.count(static_cast<int>(c))) s += p[(b * C + c) * HW + i];
      bg.push_back(s);
      clamped.push_back(std::clamp(s, kClamp, 1.0 - kClamp));
      fg.push_back(l.classes[b * HW + i] != 0 ? 1.0 : 0.0);
    }
  std::vector<double> not_fg(fg.size());
  for (std::size_t i = 0; i < fg.size(); ++i) not_fg[i] = 1.0 - fg[i];
  return sup + ce_dice_ref(bg, not_fg, B) - lambda_excl * ce_dice_ref(clamped, fg, B);
}

/// Per-class CE+Dice over background and every organ, minus the exclusion term.
inline double full_label_ref(const Tensor& p, const LabelMap& l, double lambda_excl) {
  const std::size_t b = p.dim(0), c1 = p.dim(1), hw = p.dim(2) * p.dim(3);
  double plain = 0.0;
  for (std::size_t c = 0; c < c1; ++c) {
    std::vector<double> q, y;
    for (std::size_t n = 0; n < b; ++n)
      for (std::size_t i = 0; i < hw; ++i) {
        q.push_back(p[(n * c1 + c) * hw + i]);
        y.push_back(l.classes[n * hw + i] == c ? 1.0 : 0.0);
      }
    plain += ce_dice_ref(q, y, b);
  }
  std::vector<double> bg, fg;
  for (std::size_t n = 0; n < b; ++n)
    for (std::size_t i = 0; i < hw; ++i) {
      bg.push_back(std::clamp(p[(n * c1) * hw + i], kClamp, 1.0 - kClamp));
      fg.push_back(l.classes[n * hw + i] != 0 ? 1.0 : 0.0);
    }
  return plain - lambda_excl * ce_dice_ref(bg, fg, b);
}

inline Mask2D random_mask(Rng& rng, std::size_t h, std::size_t w, double density) {
  Mask2D m(h, w);
  for (auto& v : m.data) v = rng.uniform() < density ? 1 : 0;
  return m;
}

// Exhaustive pairwise boundary distances.
inline double asd_oracle(const Mask2D& p, const Mask2D& g) {
  auto boundary = [](const Mask2D& m) {
    std::vector<std::pair<int, int>> out;
    const int h = static_cast<int>(m.height), w = static_cast<int>(m.width);
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < w; ++x) {
        if (!m(y, x)) continue;
        bool edge = false;
        const int dy[] = {-1, 1, 0, 0}, dx[] = {0, 0, -1, 1};
        for (int k = 0; k < 4; ++k) {
          const int yy = y + dy[k], xx = x + dx[k];
          if (yy < 0 || xx < 0 || yy >= h || xx >= w || !m(yy, xx)) edge = true;
        }
        if (edge) out.emplace_back(y, x);
      }
    return out;
  };
  const auto bp = boundary(p), bg = boundary(g);
  auto directed = [](const std::vector<std::pair<int, int>>& a, const std::vector<std::pair<int, int>>& b) {
    double total = 0.0;
    for (auto [y, x] : a) {
      double best = std::numeric_limits<double>::infinity();
      for (auto [v, u] : b) best = std::min(best, std::hypot(double(y - v), double(x - u)));
      total += best;
    }
    return total / static_cast<double>(a.size());
  };
  return 0.5 * (directed(bp, bg) + directed(bg, bp));
}

}  // namespace fedmenu::testing
