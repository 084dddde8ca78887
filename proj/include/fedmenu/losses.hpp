#pragma once

#include <cstdint>
#include <map>
#include <set>
#include <vector>

#include "fedmenu/autograd.hpp"
#include "fedmenu/network.hpp"

namespace fedmenu {

/// Per-pixel class ids for a batch. 0 is background; organs outside `labeled_set`
/// are recorded as 0 as well.
struct LabelMap {
  std::size_t batch = 0, height = 0, width = 0;
  std::vector<std::uint16_t> classes;  ///< [batch, height, width]
  std::set<int> labeled_set;

  /// Throws DataError on ids outside {0..num_organs} or ids not in labeled_set.
  void validate(int num_organs) const;
  /// Binary mask [B,1,H,W] of pixels whose class is in `organs`.
  Tensor mask(const std::set<int>& organs) const;
  Tensor mask(int organ) const { return mask(std::set<int>{organ}); }
};

struct LossOptions {
  double lambda_excl = 0.1;
  double lambda_aux = 1.0;
  double dice_smooth = 1e-5;
  double ce_clamp = 1e-6;
  /// Probabilities entering the exclusion terms are clamped to [excl_clamp, 1 - excl_clamp].
  double excl_clamp = 1e-6;
};

struct LossReport {
  double total = 0.0;
  double sup_term = 0.0;
  double marginal_term = 0.0;
  double exclusion_term = 0.0;
  double aux_term = 0.0;
};

Var dice_loss(const Var& probs, const Tensor& onehot, double smooth);
Var cross_entropy_loss(const Var& probs, const Tensor& onehot, double clamp_eps);

/// Cross-entropy over the pair (1 - q, q) against (1 - y, y) plus Dice of q against y.
/// q and y are [B,1,H,W].
Var binary_ce_dice(const Var& q, const Tensor& y, const LossOptions& opt);

struct PartialLossTerms {
  Var sup;        ///< sum over labeled organs of binary CE + Dice on that organ's channel
  Var marginal;   ///< CE + Dice of the merged background against the merged background mask
  Var exclusion;  ///< -(CE + Dice) of the clamped merged background against the labeled foreground
};

/// Partial-label objective for probabilities [B, M+1, H, W]. The merged background is
/// channel 0 plus every channel of an organ outside labels.labeled_set.
PartialLossTerms supervised_partial_loss(const Var& probs, const LabelMap& labels, const LossOptions& opt);

/// Mean over (organ, level) entries of binary CE + Dice between AGD output and organ mask.
/// Entries for organs outside labels.labeled_set raise ContractError. Empty map gives 0.
Var auxiliary_loss(const std::map<AgdKey, Var>& agd_probs, const LabelMap& labels, const LossOptions& opt);

struct Objective {
  Var total;
  LossReport report;
};

/// total = sup + marginal + lambda_excl * exclusion + lambda_aux * aux.
Objective combine_terms(const PartialLossTerms& terms, const Var& aux, const LossOptions& opt);

/// Full objective on one homogeneously labeled batch. `agd_probs` may be empty.
Objective partial_label_objective(const Var& probs, const std::map<AgdKey, Var>& agd_probs, const LabelMap& labels,
                                  const LossOptions& opt);

/// Value-only evaluation of the objective on fixed tensors.
LossReport evaluate_objective(const Tensor& probs, const std::map<AgdKey, Tensor>& agd_probs, const LabelMap& labels,
                              const LossOptions& opt);

}  // namespace fedmenu
