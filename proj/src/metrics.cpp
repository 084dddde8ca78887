#include "fedmenu/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <iomanip>
#include <limits>
#include <ostream>
#include <sstream>

#include "fedmenu/errors.hpp"

namespace fedmenu {
namespace {

constexpr double kFar = 1e20;
constexpr std::size_t kEvalChunk = 8;

// 1-D squared distance transform of a sampled function (lower envelope of parabolas).
void dt1d(const std::vector<double>& f, std::vector<double>& d, std::vector<std::size_t>& v, std::vector<double>& z) {
  const std::size_t n = f.size();
  auto meet = [&](std::size_t q, std::size_t p) {
    const double dq = static_cast<double>(q), dp = static_cast<double>(p);
    return ((f[q] + dq * dq) - (f[p] + dp * dp)) / (2.0 * dq - 2.0 * dp);
  };
  std::size_t k = 0;
  v[0] = 0;
  z[0] = -std::numeric_limits<double>::infinity();
  z[1] = std::numeric_limits<double>::infinity();
  for (std::size_t q = 1; q < n; ++q) {
    double s = meet(q, v[k]);
    while (s <= z[k]) {
      --k;
      s = meet(q, v[k]);
    }
    ++k;
    v[k] = q;
    z[k] = s;
    z[k + 1] = std::numeric_limits<double>::infinity();
  }
  k = 0;
  for (std::size_t q = 0; q < n; ++q) {
    while (z[k + 1] < static_cast<double>(q)) ++k;
    const double diff = static_cast<double>(q) - static_cast<double>(v[k]);
    d[q] = diff * diff + f[v[k]];
  }
}

Stat stat_of(const std::vector<double>& dscs, const std::vector<double>& asds) {
  Stat s;
  s.n = dscs.size();
  for (double v : dscs) s.dsc_mean += v;
  for (double v : asds) s.asd_mean += v;
  s.dsc_mean /= static_cast<double>(s.n);
  s.asd_mean /= static_cast<double>(s.n);
  s.dsc_sd = sample_sd(dscs);
  s.asd_sd = sample_sd(asds);
  return s;
}

std::string xml_escape(const std::string& s) {
  std::string out;
  for (char c : s) {
    switch (c) {
      case '&': out += "&amp;"; break;
      case '<': out += "&lt;"; break;
      case '>': out += "&gt;"; break;
      case '"': out += "&quot;"; break;
      default: out += c;
    }
  }
  return out;
}

}  // namespace

std::size_t Mask2D::count() const { return static_cast<std::size_t>(std::count(data.begin(), data.end(), 1)); }

Mask2D organ_mask(const std::vector<std::uint16_t>& labels, std::size_t height, std::size_t width, int organ) {
  if (labels.size() != height * width) throw DimensionError("organ_mask: label size does not match shape");
  Mask2D m(height, width);
  for (std::size_t i = 0; i < labels.size(); ++i) m.data[i] = labels[i] == organ ? 1 : 0;
  return m;
}

double dsc(const Mask2D& pred, const Mask2D& gt) {
  if (pred.height != gt.height || pred.width != gt.width) throw DimensionError("dsc: mask shapes differ");
  std::size_t inter = 0, p = 0, g = 0;
  for (std::size_t i = 0; i < pred.data.size(); ++i) {
    p += pred.data[i] != 0;
    g += gt.data[i] != 0;
    inter += (pred.data[i] != 0) && (gt.data[i] != 0);
  }
  if (p + g == 0) return 1.0;
  return 2.0 * static_cast<double>(inter) / static_cast<double>(p + g);
}

std::vector<std::pair<int, int>> boundary_pixels(const Mask2D& mask) {
  std::vector<std::pair<int, int>> out;
  const int h = static_cast<int>(mask.height), w = static_cast<int>(mask.width);
  auto fg = [&](int y, int x) { return y >= 0 && y < h && x >= 0 && x < w && mask.data[std::size_t(y * w + x)]; };
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      if (!fg(y, x)) continue;
      if (!fg(y - 1, x) || !fg(y + 1, x) || !fg(y, x - 1) || !fg(y, x + 1)) out.emplace_back(y, x);
    }
  }
  return out;
}

std::vector<double> squared_distance_transform(const Mask2D& sites) {
  const std::size_t h = sites.height, w = sites.width;
  std::vector<double> grid(h * w);
  for (std::size_t i = 0; i < grid.size(); ++i) grid[i] = sites.data[i] ? 0.0 : kFar;
  const std::size_t n = std::max(h, w);
  std::vector<double> f(n), d(n), z(n + 1);
  std::vector<std::size_t> v(n);
  for (std::size_t x = 0; x < w; ++x) {
    f.resize(h);
    d.resize(h);
    for (std::size_t y = 0; y < h; ++y) f[y] = grid[y * w + x];
    dt1d(f, d, v, z);
    for (std::size_t y = 0; y < h; ++y) grid[y * w + x] = d[y];
  }
  for (std::size_t y = 0; y < h; ++y) {
    f.assign(grid.begin() + static_cast<std::ptrdiff_t>(y * w), grid.begin() + static_cast<std::ptrdiff_t>((y + 1) * w));
    d.resize(w);
    dt1d(f, d, v, z);
    std::copy(d.begin(), d.end(), grid.begin() + static_cast<std::ptrdiff_t>(y * w));
  }
  return grid;
}

AsdResult asd(const Mask2D& pred, const Mask2D& gt, double spacing) {
  if (pred.height != gt.height || pred.width != gt.width) throw DimensionError("asd: mask shapes differ");
  AsdResult r;
  r.pred_empty = pred.empty_mask();
  r.gt_empty = gt.empty_mask();
  if (r.pred_empty && r.gt_empty) return r;
  if (r.pred_empty || r.gt_empty) {
    r.value = spacing * std::hypot(static_cast<double>(pred.height), static_cast<double>(pred.width));
    return r;
  }
  auto directed = [&](const Mask2D& from, const Mask2D& to) {
    const auto src = boundary_pixels(from);
    Mask2D sites(to.height, to.width);
    for (auto [y, x] : boundary_pixels(to)) sites(static_cast<std::size_t>(y), static_cast<std::size_t>(x)) = 1;
    const auto dt = squared_distance_transform(sites);
    double sum = 0.0;
    for (auto [y, x] : src) sum += std::sqrt(dt[static_cast<std::size_t>(y) * to.width + static_cast<std::size_t>(x)]);
    return sum / static_cast<double>(src.size());
  };
  r.value = spacing * 0.5 * (directed(pred, gt) + directed(gt, pred));
  return r;
}

std::vector<std::vector<std::uint16_t>> argmax_labels(const Tensor& probs) {
  require_rank4(probs, "argmax_labels");
  const std::size_t b = probs.dim(0), c = probs.dim(1), hw = probs.dim(2) * probs.dim(3);
  std::vector<std::vector<std::uint16_t>> out(b, std::vector<std::uint16_t>(hw, 0));
  for (std::size_t n = 0; n < b; ++n) {
    for (std::size_t i = 0; i < hw; ++i) {
      std::size_t best = 0;
      double best_v = probs[(n * c) * hw + i];
      for (std::size_t k = 1; k < c; ++k) {
        const double v = probs[(n * c + k) * hw + i];
        if (v > best_v) {
          best_v = v;
          best = k;
        }
      }
      out[n][i] = static_cast<std::uint16_t>(best);
    }
  }
  return out;
}

double sample_sd(const std::vector<double>& values) {
  if (values.size() < 2) return 0.0;
  double mean = 0.0;
  for (double v : values) mean += v;
  mean /= static_cast<double>(values.size());
  double ss = 0.0;
  for (double v : values) ss += (v - mean) * (v - mean);
  return std::sqrt(ss / static_cast<double>(values.size() - 1));
}

EvalResult hierarchical_summary(const std::vector<CaseRecord>& records,
                                const std::map<int, std::set<int>>& labeled) {
  EvalResult result;
  std::map<std::pair<int, int>, std::pair<std::vector<double>, std::vector<double>>> cells;
  for (const auto& r : records) {
    auto it = labeled.find(r.client);
    if (it == labeled.end() || it->second.count(r.organ) == 0) continue;
    result.per_case.push_back(r);
    cells[{r.client, r.organ}].first.push_back(r.dsc);
    cells[{r.client, r.organ}].second.push_back(r.asd);
  }
  if (labeled.empty()) throw EvaluationError("no clients to summarize");
  std::vector<double> client_dsc, client_asd;
  for (const auto& [client, organs] : labeled) {
    if (organs.empty()) throw EvaluationError("client " + std::to_string(client) + " has no labeled organs");
    std::vector<double> organ_dsc, organ_asd;
    for (int m : organs) {
      auto it = cells.find({client, m});
      if (it == cells.end()) {
        throw EvaluationError("client " + std::to_string(client) + " has no cases for organ " + std::to_string(m));
      }
      const Stat s = stat_of(it->second.first, it->second.second);
      result.per_client_organ[{client, m}] = s;
      organ_dsc.push_back(s.dsc_mean);
      organ_asd.push_back(s.asd_mean);
    }
    const Stat s = stat_of(organ_dsc, organ_asd);
    result.per_client[client] = s;
    client_dsc.push_back(s.dsc_mean);
    client_asd.push_back(s.asd_mean);
  }
  result.global = stat_of(client_dsc, client_asd);
  return result;
}

std::vector<CaseRecord> evaluate_cases(const NetworkConfig& config, const ParameterSet& params,
                                       const ClientDataset& data, const std::vector<std::size_t>& indices,
                                       int client_id, const std::set<int>& organs, bool with_asd) {
  std::vector<CaseRecord> out;
  const auto h = static_cast<std::size_t>(data.height), w = static_cast<std::size_t>(data.width);
  for (std::size_t start = 0; start < indices.size(); start += kEvalChunk) {
    const std::vector<std::size_t> chunk(indices.begin() + static_cast<std::ptrdiff_t>(start),
                                         indices.begin() + static_cast<std::ptrdiff_t>(
                                                               std::min(indices.size(), start + kEvalChunk)));
    const ForwardOutput fwd = forward(config, params, data.batch_images(chunk), false);
    const auto pred = argmax_labels(fwd.probabilities);
    for (std::size_t b = 0; b < chunk.size(); ++b) {
      const auto& gt = data.full_labels.at(chunk[b]);
      for (int m : organs) {
        const Mask2D pm = organ_mask(pred[b], h, w, m), gm = organ_mask(gt, h, w, m);
        CaseRecord r;
        r.client = client_id;
        r.case_id = chunk[b];
        r.organ = m;
        r.dsc = dsc(pm, gm);
        r.pred_empty = pm.empty_mask();
        r.gt_empty = gm.empty_mask();
        if (with_asd) r.asd = asd(pm, gm).value;
        out.push_back(r);
      }
    }
  }
  return out;
}

void write_case_csv(std::ostream& out, const std::vector<CaseRecord>& records) {
  out << "client_id,case_id,organ_id,dsc,asd,pred_empty,gt_empty\n";
  out << std::setprecision(17);
  for (const auto& r : records) {
    out << r.client << ',' << r.case_id << ',' << r.organ << ',' << r.dsc << ',' << r.asd << ','
        << (r.pred_empty ? 1 : 0) << ',' << (r.gt_empty ? 1 : 0) << '\n';
  }
}

void write_summary_csv(std::ostream& out, const EvalResult& result) {
  out << "level,id,dsc_mean,dsc_sd,asd_mean,asd_sd\n";
  out << std::setprecision(17);
  auto row = [&](const char* level, const std::string& id, const Stat& s) {
    out << level << ',' << id << ',' << s.dsc_mean << ',' << s.dsc_sd << ',' << s.asd_mean << ',' << s.asd_sd << '\n';
  };
  for (const auto& [key, s] : result.per_client_organ) {
    row("organ", std::to_string(key.first) + ":" + std::to_string(key.second), s);
  }
  for (const auto& [client, s] : result.per_client) row("client", std::to_string(client), s);
  row("global", "all", result.global);
}

void write_dsc_svg(std::ostream& out, const EvalResult& result, const std::string& title) {
  std::set<int> organs;
  for (const auto& [key, s] : result.per_client_organ) organs.insert(key.second);
  const std::size_t nclients = std::max<std::size_t>(1, result.per_client.size());
  const double bar = 14.0, gap = 24.0, left = 50.0, top = 40.0, plot_h = 200.0;
  const double group_w = bar * static_cast<double>(nclients) + gap;
  const double width = left + group_w * static_cast<double>(std::max<std::size_t>(1, organs.size())) + 120.0;
  const double height = top + plot_h + 50.0;
  static const char* palette[] = {"#4e79a7", "#f28e2b", "#e15759", "#76b7b2", "#59a14f", "#edc948", "#b07aa1"};

  out << std::fixed << std::setprecision(2);
  out << "<?xml version=\"1.0\" encoding=\"UTF-8\"?>\n";
  out << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << width << "\" height=\"" << height << "\">\n";
  out << "  <text x=\"" << left << "\" y=\"20\" font-family=\"sans-serif\" font-size=\"14\">" << xml_escape(title)
      << "</text>\n";
  out << "  <line x1=\"" << left << "\" y1=\"" << top << "\" x2=\"" << left << "\" y2=\"" << top + plot_h
      << "\" stroke=\"black\"/>\n";
  out << "  <line x1=\"" << left << "\" y1=\"" << top + plot_h << "\" x2=\"" << width - 110.0 << "\" y2=\""
      << top + plot_h << "\" stroke=\"black\"/>\n";
  for (int tick = 0; tick <= 4; ++tick) {
    const double y = top + plot_h * (1.0 - tick / 4.0);
    out << "  <text x=\"" << left - 8 << "\" y=\"" << y + 4 << "\" font-family=\"sans-serif\" font-size=\"10\" "
        << "text-anchor=\"end\">" << tick * 0.25 << "</text>\n";
  }
  std::size_t gi = 0;
  for (int m : organs) {
    const double gx = left + gap / 2.0 + group_w * static_cast<double>(gi);
    std::size_t ci = 0;
    for (const auto& [client, cs] : result.per_client) {
      auto it = result.per_client_organ.find({client, m});
      if (it != result.per_client_organ.end()) {
        const double v = std::clamp(it->second.dsc_mean, 0.0, 1.0);
        out << "  <rect x=\"" << gx + bar * static_cast<double>(ci) << "\" y=\"" << top + plot_h * (1.0 - v)
            << "\" width=\"" << bar - 2.0 << "\" height=\"" << plot_h * v << "\" fill=\"" << palette[ci % 7]
            << "\"/>\n";
      }
      ++ci;
    }
    out << "  <text x=\"" << gx + bar * static_cast<double>(nclients) / 2.0 << "\" y=\"" << top + plot_h + 16
        << "\" font-family=\"sans-serif\" font-size=\"11\" text-anchor=\"middle\">organ " << m << "</text>\n";
    ++gi;
  }
  std::size_t ci = 0;
  for (const auto& [client, cs] : result.per_client) {
    const double y = top + 14.0 * static_cast<double>(ci);
    out << "  <rect x=\"" << width - 100.0 << "\" y=\"" << y << "\" width=\"10\" height=\"10\" fill=\""
        << palette[ci % 7] << "\"/>\n";
    out << "  <text x=\"" << width - 85.0 << "\" y=\"" << y + 9 << "\" font-family=\"sans-serif\" font-size=\"10\">"
        << "client " << client << "</text>\n";
    ++ci;
  }
  out << "  <text x=\"" << left << "\" y=\"" << height - 10 << "\" font-family=\"sans-serif\" font-size=\"11\">"
      << "global DSC " << std::setprecision(4) << result.global.dsc_mean << "</text>\n";
  out << "</svg>\n";
}

}  // namespace fedmenu
