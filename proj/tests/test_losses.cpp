#include <cmath>

#include "doctest.h"
#include "fedmenu/errors.hpp"
#include "fedmenu/gradcheck.hpp"
#include "fedmenu/losses.hpp"
#include "fedmenu/ops.hpp"
#include "oracles.hpp"
#include "test_util.hpp"

using namespace fedmenu;
using fedmenu::testing::random_probs;
using fedmenu::testing::random_tensor;
using namespace fedmenu::testing;

namespace {

LossOptions options() {
  LossOptions o;
  o.dice_smooth = kSmooth;
  o.ce_clamp = kClamp;
  o.excl_clamp = kClamp;
  return o;
}

}  // namespace

TEST_CASE("dice_loss examples") {
  Tape tape;
  Tensor y({1, 2, 2, 2}, {1, 0, 1, 0, 0, 1, 0, 1});
  CHECK(dice_loss(tape.constant(y), y, 1e-5).value().item() < 1e-4);
  const double half = dice_loss(tape.constant(Tensor({1, 2, 2, 2}, 0.5)), y, 1e-12).value().item();
  CHECK(half == doctest::Approx(0.5).epsilon(1e-9));
  Tensor empty({1, 1, 2, 2}, 0.0);
  CHECK(dice_loss(tape.constant(empty), empty, 1e-5).value().item() == doctest::Approx(0.0));
}

TEST_CASE("cross_entropy_loss examples") {
  Tape tape;
  Tensor y({1, 2, 1, 2}, {1, 0, 0, 1});
  CHECK(cross_entropy_loss(tape.constant(y), y, 1e-6).value().item() == 0.0);
  Tensor half({1, 2, 1, 1}, 0.5), t({1, 2, 1, 1}, {0.0, 1.0});
  CHECK(cross_entropy_loss(tape.constant(half), t, 1e-6).value().item() == doctest::Approx(std::log(2.0)).epsilon(1e-14));
  Tensor wrong({1, 2, 1, 1}, {1.0, 0.0});
  CHECK(cross_entropy_loss(tape.constant(wrong), t, 1e-6).value().item() ==
        doctest::Approx(std::log(1e6)).epsilon(1e-12));
  CHECK_THROWS_AS(cross_entropy_loss(tape.constant(half), t, 0.0), ConfigError);
  CHECK_THROWS_AS(cross_entropy_loss(tape.constant(half), t, 1e-2), ConfigError);
}

TEST_CASE("supervised_partial_loss matches a per-pixel oracle on 2x2 instances") {
  Rng rng(1);
  for (int trial = 0; trial < 20; ++trial) {
    const Tensor p = random_probs(rng, 1, 3, 2, 2);
    const LabelMap l = random_labels(rng, 1, 2, 2, 2, {1});
    Tape tape;
    const auto opt = options();
    const auto obj = combine_terms(supervised_partial_loss(tape.constant(p), l, opt), Var{}, opt);
    CHECK(obj.report.total == doctest::Approx(partial_ref(p, l, opt.lambda_excl)).epsilon(1e-12));
  }
}

TEST_CASE("reduction identity with every organ labeled") {
  Rng rng(2);
  for (int trial = 0; trial < 25; ++trial) {
    const std::size_t m = static_cast<std::size_t>(rng.uniform_int(1, 4));
    const std::size_t b = static_cast<std::size_t>(rng.uniform_int(1, 2));
    std::set<int> all;
    for (std::size_t i = 1; i <= m; ++i) all.insert(static_cast<int>(i));
    const Tensor p = random_probs(rng, b, m + 1, 8, 8);
    const LabelMap l = random_labels(rng, b, 8, 8, static_cast<int>(m), all);
    Tape tape;
    const auto opt = options();
    const auto obj = combine_terms(supervised_partial_loss(tape.constant(p), l, opt), Var{}, opt);
    const double plain = full_label_ref(p, l, opt.lambda_excl);
    CAPTURE(m);
    CHECK(std::abs(obj.report.total - plain) <= 1e-12 * std::max(1.0, std::abs(plain)));
  }
}

TEST_CASE("perfect partial prediction") {
  LabelMap l;
  l.batch = 1;
  l.height = 2;
  l.width = 2;
  l.labeled_set = {1};
  l.classes = {1, 0, 0, 1};
  Tensor p({1, 3, 2, 2}, 0.0);
  for (std::size_t i = 0; i < 4; ++i) p[(l.classes[i] == 1 ? 1 : 0) * 4 + i] = 1.0;
  Tape tape;
  const auto terms = supervised_partial_loss(tape.constant(p), l, options());
  CHECK(terms.sup.value().item() < 1e-3);
  CHECK(terms.marginal.value().item() < 1e-3);
}

TEST_CASE("label ids outside the organ range are data errors") {
  LabelMap l;
  l.batch = 1;
  l.height = 1;
  l.width = 2;
  l.labeled_set = {1};
  l.classes = {0, 3};
  Tape tape;
  CHECK_THROWS_AS(supervised_partial_loss(tape.constant(Tensor({1, 3, 1, 2}, 1.0 / 3.0)), l, options()), DataError);
  l.labeled_set.clear();
  l.classes = {0, 0};
  CHECK_THROWS_AS(supervised_partial_loss(tape.constant(Tensor({1, 3, 1, 2}, 1.0 / 3.0)), l, options()), ConfigError);
}

TEST_CASE("auxiliary_loss") {
  Rng rng(5);
  LabelMap l = random_labels(rng, 1, 4, 4, 2, {1, 2});
  const auto opt = options();
  auto pair_for = [&](int organ) {
    Tensor t({1, 2, 4, 4});
    for (std::size_t i = 0; i < 16; ++i) {
      const double y = l.classes[i] == organ ? 1.0 : 0.0;
      t[i] = 1.0 - y;
      t[16 + i] = y;
    }
    return t;
  };
  SUBCASE("exact AGD outputs") {
    Tape tape;
    std::map<AgdKey, Var> agd;
    for (int lvl = 1; lvl <= 3; ++lvl) agd.emplace(AgdKey{1, lvl}, tape.constant(pair_for(1)));
    CHECK(auxiliary_loss(agd, l, opt).value().item() < 1e-3);
  }
  SUBCASE("mean of independent CE+Dice values") {
    Tape tape;
    std::map<AgdKey, Var> agd;
    double expected = 0.0;
    for (int lvl = 1; lvl <= 3; ++lvl) {
      const Tensor p = random_probs(rng, 1, 2, 4, 4);
      agd.emplace(AgdKey{2, lvl}, tape.constant(p));
      std::vector<double> q(p.data().begin() + 16, p.data().end()), y;
      for (std::size_t i = 0; i < 16; ++i) y.push_back(l.classes[i] == 2 ? 1.0 : 0.0);
      expected += ce_dice_ref(q, y, 1);
    }
    CHECK(auxiliary_loss(agd, l, opt).value().item() == doctest::Approx(expected / 3.0).epsilon(1e-12));
  }
  SUBCASE("single entry equals its CE plus Dice") {
    Tape tape;
    const Tensor p = random_probs(rng, 1, 2, 4, 4);
    Var v = tape.constant(p);
    const double direct = cross_entropy_loss(v, pair_for(1), opt.ce_clamp).value().item() +
                          dice_loss(ops::channel_sum(v, {1}), l.mask(1), opt.dice_smooth).value().item();
    CHECK(auxiliary_loss({{AgdKey{1, 2}, v}}, l, opt).value().item() == doctest::Approx(direct).epsilon(1e-14));
  }
  SUBCASE("unlabeled organ is a contract violation") {
    Tape tape;
    l.labeled_set = {1};
    for (auto& c : l.classes) c = c == 2 ? 0 : c;
    CHECK_THROWS_AS(auxiliary_loss({{AgdKey{2, 1}, tape.constant(pair_for(2))}}, l, opt), ContractError);
  }
}

TEST_CASE("report composition is exact") {
  Rng rng(8);
  const Tensor p = random_probs(rng, 2, 4, 4, 4);
  const LabelMap l = random_labels(rng, 2, 4, 4, 3, {1, 3});
  Tape tape;
  std::map<AgdKey, Var> agd{{AgdKey{1, 1}, tape.constant(random_probs(rng, 2, 2, 4, 4))},
                            {AgdKey{3, 2}, tape.constant(random_probs(rng, 2, 2, 4, 4))}};
  LossOptions opt = options();
  opt.lambda_excl = 0.37;
  opt.lambda_aux = 0.61;
  const auto obj = partial_label_objective(tape.constant(p), agd, l, opt);
  const auto& r = obj.report;
  const double composed = r.sup_term + r.marginal_term + opt.lambda_excl * r.exclusion_term + opt.lambda_aux * r.aux_term;
  CHECK(r.total == doctest::Approx(composed).epsilon(1e-15));
}

TEST_CASE("moving background mass off the labeled foreground lowers the merged terms") {
  LabelMap l;
  l.batch = 1;
  l.height = 1;
  l.width = 1;
  l.labeled_set = {1};
  l.classes = {1};
  const auto opt = options();
  auto merged = [&](double bg) {
    Tape tape;
    const auto t = supervised_partial_loss(tape.constant(Tensor({1, 3, 1, 1}, {bg, 1.0 - bg - 0.1, 0.1})), l, opt);
    return t.marginal.value().item() + opt.lambda_excl * t.exclusion.value().item();
  };
  CHECK(merged(0.2) < merged(0.6));
}

TEST_CASE("loss terms stay finite at the probability extremes") {
  Rng rng(3);
  const LabelMap l = random_labels(rng, 1, 4, 4, 2, {2});
  Tensor p({1, 3, 4, 4}, 0.0);
  for (std::size_t i = 0; i < 16; ++i) p[static_cast<std::size_t>(rng.uniform_int(0, 2)) * 16 + i] = 1.0;
  const auto r = evaluate_objective(p, {}, l, options());
  CHECK(std::isfinite(r.total));
}

TEST_CASE("objective gradient through the merged channels") {
  Rng rng(13);
  const Tensor logits = random_tensor(rng, {1, 4, 4, 4}, -2.0, 2.0);
  const LabelMap l = random_labels(rng, 1, 4, 4, 3, {2});
  ParameterSet p;
  p.add("x", "logits", logits);
  const auto opt = options();
  auto fn = [&](Tape&, const std::map<std::string, Var>& v) {
    return partial_label_objective(ops::softmax_channels(v.at("x/logits")), {}, l, opt).total;
  };
  CHECK(grad_check(fn, p, 1e-5) < 1e-4);
}
