#include <cmath>
#include <limits>
#include <sstream>

#include "doctest.h"
#include "fedmenu/errors.hpp"
#include "fedmenu/metrics.hpp"
#include "oracles.hpp"
#include "test_util.hpp"

using namespace fedmenu;
using fedmenu::testing::asd_oracle;
using fedmenu::testing::random_mask;

namespace {

CaseRecord rec(int client, std::size_t id, int organ, double d, double a = 0.0) {
  CaseRecord r;
  r.client = client;
  r.case_id = id;
  r.organ = organ;
  r.dsc = d;
  r.asd = a;
  return r;
}

}  // namespace

TEST_CASE("dsc examples") {
  Mask2D a(2, 4), b(2, 4);
  a(0, 0) = a(0, 1) = 1;
  b(0, 0) = b(0, 1) = b(1, 0) = b(1, 1) = 1;
  CHECK(dsc(a, a) == 1.0);
  CHECK(dsc(a, b) == doctest::Approx(2.0 * 2.0 / 6.0).epsilon(1e-15));
  CHECK(dsc(Mask2D(3, 3), Mask2D(3, 3)) == 1.0);
}

TEST_CASE("asd examples") {
  Mask2D a(5, 8), b(5, 8);
  a(2, 1) = 1;
  b(2, 4) = 1;
  CHECK(asd(a, a).value == 0.0);
  CHECK(asd(a, b).value == doctest::Approx(3.0).epsilon(1e-15));
  CHECK(asd(a, b, 0.5).value == doctest::Approx(1.5).epsilon(1e-15));
  Mask2D empty(64, 64), gt(64, 64);
  gt(10, 10) = 1;
  const AsdResult r = asd(empty, gt);
  CHECK(r.value == doctest::Approx(std::sqrt(2.0) * 64.0).epsilon(1e-15));
  CHECK(r.pred_empty);
  CHECK(!r.gt_empty);
  const AsdResult both = asd(empty, empty);
  CHECK(both.value == 0.0);
  CHECK(both.pred_empty);
  CHECK(both.gt_empty);
}

TEST_CASE("asd matches the exhaustive pairwise oracle") {
  Rng rng(17);
  for (int trial = 0; trial < 200; ++trial) {
    const std::size_t h = rng.uniform_int(1, 32), w = rng.uniform_int(1, 32);
    const double dp = rng.uniform(0.02, 0.8), dg = rng.uniform(0.02, 0.8);
    Mask2D p = random_mask(rng, h, w, dp), g = random_mask(rng, h, w, dg);
    if (p.empty_mask()) p(0, 0) = 1;
    if (g.empty_mask()) g(h - 1, w - 1) = 1;
    CAPTURE(trial);
    CHECK(std::abs(asd(p, g).value - asd_oracle(p, g)) <= 1e-9);
  }
}

TEST_CASE("dsc and asd are symmetric, bounded and translation invariant") {
  Rng rng(23);
  for (int trial = 0; trial < 50; ++trial) {
    Mask2D p(20, 20), g(20, 20), ps(20, 20), gs(20, 20);
    for (std::size_t y = 4; y < 12; ++y)
      for (std::size_t x = 4; x < 12; ++x) {
        p(y, x) = rng.uniform() < 0.6;
        g(y, x) = rng.uniform() < 0.6;
        ps(y + 3, x + 2) = p(y, x);
        gs(y + 3, x + 2) = g(y, x);
      }
    if (p.empty_mask() || g.empty_mask()) continue;
    const double d = dsc(p, g);
    CHECK(d >= 0.0);
    CHECK(d <= 1.0);
    CHECK(d == dsc(g, p));
    CHECK(d == dsc(ps, gs));
    const double a = asd(p, g).value;
    CHECK(a >= 0.0);
    CHECK(a == doctest::Approx(asd(g, p).value).epsilon(1e-15));
    CHECK(a == doctest::Approx(asd(ps, gs).value).epsilon(1e-12));
  }
}

TEST_CASE("squared distance transform matches brute force") {
  Rng rng(31);
  for (int trial = 0; trial < 30; ++trial) {
    const std::size_t h = rng.uniform_int(1, 16), w = rng.uniform_int(1, 16);
    Mask2D sites = random_mask(rng, h, w, 0.1);
    sites(rng.uniform_int(0, h - 1), rng.uniform_int(0, w - 1)) = 1;
    const auto d = squared_distance_transform(sites);
    for (std::size_t y = 0; y < h; ++y)
      for (std::size_t x = 0; x < w; ++x) {
        double best = std::numeric_limits<double>::infinity();
        for (std::size_t v = 0; v < h; ++v)
          for (std::size_t u = 0; u < w; ++u)
            if (sites(v, u)) best = std::min(best, double((y - v) * (y - v) + (x - u) * (x - u)));
        CHECK(d[y * w + x] == best);
      }
  }
}

TEST_CASE("argmax ties go to the lowest class") {
  Tensor p({1, 3, 1, 2}, {0.4, 0.2, 0.4, 0.4, 0.2, 0.4});
  const auto labels = argmax_labels(p);
  CHECK(labels[0][0] == 0);
  CHECK(labels[0][1] == 1);
}

TEST_CASE("hierarchical summary reproduces known global DSC values") {
  struct Row {
    std::vector<double> single;       // clients 1-4, one organ each
    std::vector<double> full_client;  // client 5, five organs
    double global;
  };
  const std::vector<Row> rows{
      {{94.07, 95.94, 80.05, 94.65}, {96.70, 93.74, 82.14, 96.34, 86.08}, 91.14},
      {{94.48, 94.54, 79.38, 93.75}, {96.76, 92.40, 80.79, 95.72, 83.38}, 90.39},
      {{95.22, 95.52, 80.50, 95.52}, {96.69, 93.27, 82.25, 96.17, 84.76}, 91.48},
      {{95.27, 95.52, 81.48, 96.32}, {96.99, 95.00, 83.88, 96.56, 85.20}, 92.02},
      {{93.46, 91.17, 76.82, 91.98}, {95.93, 94.80, 78.91, 95.47, 80.29}, 88.50},
  };
  for (const auto& row : rows) {
    std::vector<CaseRecord> records;
    std::map<int, std::set<int>> labeled;
    for (int k = 0; k < 4; ++k) {
      records.push_back(rec(k + 1, 0, k + 1, row.single[static_cast<std::size_t>(k)]));
      labeled[k + 1] = {k + 1};
    }
    for (int o = 0; o < 5; ++o) records.push_back(rec(5, 0, o + 1, row.full_client[static_cast<std::size_t>(o)]));
    labeled[5] = {1, 2, 3, 4, 5};
    const EvalResult r = hierarchical_summary(records, labeled);
    CHECK(std::abs(r.global.dsc_mean - row.global) <= 0.01);
  }
  std::vector<CaseRecord> c5;
  const std::vector<double> cells{96.70, 93.74, 82.14, 96.34, 86.08};
  for (int o = 0; o < 5; ++o) c5.push_back(rec(5, 0, o + 1, cells[static_cast<std::size_t>(o)]));
  CHECK(std::abs(hierarchical_summary(c5, {{5, {1, 2, 3, 4, 5}}}).per_client.at(5).dsc_mean - 91.00) <= 0.005);
}

TEST_CASE("hierarchical summary weighting") {
  SUBCASE("single client single organ is the case mean") {
    const auto r = hierarchical_summary({rec(1, 0, 2, 0.5), rec(1, 1, 2, 0.7), rec(1, 2, 2, 0.9)}, {{1, {2}}});
    CHECK(r.global.dsc_mean == doctest::Approx(0.7).epsilon(1e-15));
    CHECK(r.global.dsc_mean == r.per_client.at(1).dsc_mean);
  }
  SUBCASE("clients weigh equally regardless of case count") {
    std::vector<CaseRecord> records{rec(1, 0, 1, 90.0)};
    for (std::size_t i = 0; i < 7; ++i) records.push_back(rec(2, i, 1, 94.0));
    const auto r = hierarchical_summary(records, {{1, {1}}, {2, {1}}});
    CHECK(r.global.dsc_mean == 92.0);
  }
  SUBCASE("client mean is the mean over labeled organs, global the mean over clients") {
    Rng rng(3);
    std::vector<CaseRecord> records;
    for (int k = 1; k <= 3; ++k)
      for (int o = 1; o <= k; ++o)
        for (std::size_t i = 0; i < static_cast<std::size_t>(k + o); ++i)
          records.push_back(rec(k, i, o, rng.uniform(), rng.uniform(0.0, 5.0)));
    const auto r = hierarchical_summary(records, {{1, {1}}, {2, {1, 2}}, {3, {1, 2, 3}}});
    double g = 0.0;
    for (int k = 1; k <= 3; ++k) {
      double q = 0.0;
      for (int o = 1; o <= k; ++o) q += r.per_client_organ.at({k, o}).dsc_mean;
      CHECK(r.per_client.at(k).dsc_mean == doctest::Approx(q / k).epsilon(1e-15));
      g += r.per_client.at(k).dsc_mean;
    }
    CHECK(r.global.dsc_mean == doctest::Approx(g / 3.0).epsilon(1e-15));
  }
  SUBCASE("records for unlabeled organs are ignored") {
    const auto r = hierarchical_summary({rec(1, 0, 1, 0.8), rec(1, 0, 2, 0.1)}, {{1, {1}}});
    CHECK(r.global.dsc_mean == 0.8);
  }
  SUBCASE("missing coverage is an evaluation error") {
    CHECK_THROWS_AS(hierarchical_summary({rec(1, 0, 1, 0.8)}, {{1, {1, 2}}}), EvaluationError);
    CHECK_THROWS_AS(hierarchical_summary({rec(1, 0, 1, 0.8)}, {{1, {1}}, {2, {1}}}), EvaluationError);
  }
}

TEST_CASE("sample standard deviation") {
  CHECK(sample_sd({}) == 0.0);
  CHECK(sample_sd({3.0}) == 0.0);
  CHECK(sample_sd({1.0, 3.0}) == doctest::Approx(std::sqrt(2.0)).epsilon(1e-15));
}

TEST_CASE("CSV and SVG outputs") {
  const auto r = hierarchical_summary({rec(1, 0, 1, 0.8, 1.5), rec(2, 0, 2, 0.6, 2.5)}, {{1, {1}}, {2, {2}}});
  std::ostringstream cases, summary, svg;
  write_case_csv(cases, r.per_case);
  CHECK(cases.str().rfind("client_id,case_id,organ_id,dsc,asd,pred_empty,gt_empty\n", 0) == 0);
  write_summary_csv(summary, r);
  CHECK(summary.str().rfind("level,id,dsc_mean,dsc_sd,asd_mean,asd_sd\n", 0) == 0);
  CHECK(summary.str().find("global,all,") != std::string::npos);
  write_dsc_svg(svg, r, "a < b & c");
  const std::string s = svg.str();
  CHECK(s.find("<svg") != std::string::npos);
  CHECK(s.find("</svg>") != std::string::npos);
  CHECK(s.find("a &lt; b &amp; c") != std::string::npos);
}
