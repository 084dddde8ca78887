#include "fedmenu/losses.hpp"

#include <string>

#include "fedmenu/errors.hpp"
#include "fedmenu/ops.hpp"

namespace fedmenu {
namespace {

Tensor pair_of(const Tensor& y) {
  const std::size_t batch = y.dim(0), hw = y.dim(2) * y.dim(3);
  Tensor out({batch, 2, y.dim(2), y.dim(3)});
  for (std::size_t b = 0; b < batch; ++b) {
    for (std::size_t i = 0; i < hw; ++i) {
      out[(b * 2) * hw + i] = 1.0 - y[b * hw + i];
      out[(b * 2 + 1) * hw + i] = y[b * hw + i];
    }
  }
  return out;
}

void check_geometry(const Var& probs, const LabelMap& labels) {
  const Tensor& p = probs.value();
  require_rank4(p, "partial-label loss");
  if (p.dim(0) != labels.batch || p.dim(2) != labels.height || p.dim(3) != labels.width) {
    throw DimensionError("probabilities " + shape_string(p.shape()) + " do not match label map " +
                         std::to_string(labels.batch) + "x" + std::to_string(labels.height) + "x" +
                         std::to_string(labels.width));
  }
}

}  // namespace

void LabelMap::validate(int num_organs) const {
  if (classes.size() != batch * height * width) throw DataError("label map size does not match its shape");
  for (int m : labeled_set) {
    if (m < 1 || m > num_organs) throw DataError("labeled organ " + std::to_string(m) + " outside 1..M");
  }
  for (auto c : classes) {
    if (c > num_organs) throw DataError("label id " + std::to_string(c) + " outside 0.." + std::to_string(num_organs));
    if (c != 0 && labeled_set.count(c) == 0) {
      throw DataError("label id " + std::to_string(c) + " present but organ is not in the labeled set");
    }
  }
}

Tensor LabelMap::mask(const std::set<int>& organs) const {
  Tensor out({batch, 1, height, width});
  for (std::size_t i = 0; i < classes.size(); ++i) out[i] = organs.count(classes[i]) ? 1.0 : 0.0;
  return out;
}

Var dice_loss(const Var& probs, const Tensor& onehot, double smooth) { return ops::dice(probs, onehot, smooth); }

Var cross_entropy_loss(const Var& probs, const Tensor& onehot, double clamp_eps) {
  return ops::cross_entropy(probs, onehot, clamp_eps);
}

Var binary_ce_dice(const Var& q, const Tensor& y, const LossOptions& opt) {
  Var ce = cross_entropy_loss(ops::binary_pair(q), pair_of(y), opt.ce_clamp);
  Var dc = dice_loss(q, y, opt.dice_smooth);
  return ops::weighted_sum({ce, dc}, {1.0, 1.0});
}

PartialLossTerms supervised_partial_loss(const Var& probs, const LabelMap& labels, const LossOptions& opt) {
  check_geometry(probs, labels);
  const int num_organs = static_cast<int>(probs.value().dim(1)) - 1;
  if (labels.labeled_set.empty()) throw ConfigError("partial-label loss needs at least one labeled organ");
  labels.validate(num_organs);

  std::vector<Var> organ_terms;
  for (int m : labels.labeled_set) {
    Var pm = ops::channel_sum(probs, {static_cast<std::size_t>(m)});
    organ_terms.push_back(binary_ce_dice(pm, labels.mask(m), opt));
  }
  PartialLossTerms terms;
  terms.sup = ops::weighted_sum(organ_terms, std::vector<double>(organ_terms.size(), 1.0));

  std::vector<std::size_t> merged{0};
  for (int m = 1; m <= num_organs; ++m) {
    if (labels.labeled_set.count(m) == 0) merged.push_back(static_cast<std::size_t>(m));
  }
  Var background = ops::channel_sum(probs, merged);
  const Tensor foreground = labels.mask(labels.labeled_set);
  Tensor merged_background(foreground.shape());
  for (std::size_t i = 0; i < foreground.size(); ++i) merged_background[i] = 1.0 - foreground[i];

  terms.marginal = binary_ce_dice(background, merged_background, opt);
  Var clamped = ops::clamp(background, opt.excl_clamp, 1.0 - opt.excl_clamp);
  terms.exclusion = ops::weighted_sum({binary_ce_dice(clamped, foreground, opt)}, {-1.0});
  return terms;
}

Var auxiliary_loss(const std::map<AgdKey, Var>& agd_probs, const LabelMap& labels, const LossOptions& opt) {
  std::vector<Var> entries;
  for (const auto& [key, p] : agd_probs) {
    const int organ = key.first;
    if (labels.labeled_set.count(organ) == 0) {
      throw ContractError("AGD output supplied for unlabeled organ " + std::to_string(organ));
    }
    check_geometry(p, labels);
    const Tensor y = labels.mask(organ);
    Var ce = cross_entropy_loss(p, pair_of(y), opt.ce_clamp);
    Var dc = dice_loss(ops::channel_sum(p, {1}), y, opt.dice_smooth);
    entries.push_back(ops::weighted_sum({ce, dc}, {1.0, 1.0}));
  }
  if (entries.empty()) return Var{};
  const double w = 1.0 / static_cast<double>(entries.size());
  return ops::weighted_sum(entries, std::vector<double>(entries.size(), w));
}

Objective combine_terms(const PartialLossTerms& terms, const Var& aux, const LossOptions& opt) {
  Objective obj;
  std::vector<Var> parts{terms.sup, terms.marginal, terms.exclusion};
  std::vector<double> weights{1.0, 1.0, opt.lambda_excl};
  obj.report.sup_term = terms.sup.value().item();
  obj.report.marginal_term = terms.marginal.value().item();
  obj.report.exclusion_term = terms.exclusion.value().item();
  if (aux.valid()) {
    parts.push_back(aux);
    weights.push_back(opt.lambda_aux);
    obj.report.aux_term = aux.value().item();
  }
  obj.total = ops::weighted_sum(parts, weights);
  obj.report.total = obj.total.value().item();
  return obj;
}

Objective partial_label_objective(const Var& probs, const std::map<AgdKey, Var>& agd_probs, const LabelMap& labels,
                                  const LossOptions& opt) {
  return combine_terms(supervised_partial_loss(probs, labels, opt), auxiliary_loss(agd_probs, labels, opt), opt);
}

LossReport evaluate_objective(const Tensor& probs, const std::map<AgdKey, Tensor>& agd_probs, const LabelMap& labels,
                              const LossOptions& opt) {
  Tape tape;
  std::map<AgdKey, Var> agd;
  for (const auto& [key, t] : agd_probs) agd.emplace(key, tape.constant(t));
  return partial_label_objective(tape.constant(probs), agd, labels, opt).report;
}

}  // namespace fedmenu
