#pragma once

#include <cstdint>
#include <iosfwd>
#include <map>
#include <set>
#include <string>
#include <utility>
#include <vector>

#include "fedmenu/network.hpp"
#include "fedmenu/params.hpp"
#include "fedmenu/synthdata.hpp"
#include "fedmenu/tensor.hpp"

namespace fedmenu {

/// Row-major binary mask.
struct Mask2D {
  std::size_t height = 0, width = 0;
  std::vector<std::uint8_t> data;

  Mask2D() = default;
  Mask2D(std::size_t h, std::size_t w) : height(h), width(w), data(h * w, 0) {}
  std::uint8_t& operator()(std::size_t y, std::size_t x) { return data[y * width + x]; }
  std::uint8_t operator()(std::size_t y, std::size_t x) const { return data[y * width + x]; }
  std::size_t count() const;
  bool empty_mask() const { return count() == 0; }
};

/// Pixels of `labels` equal to `organ`.
Mask2D organ_mask(const std::vector<std::uint16_t>& labels, std::size_t height, std::size_t width, int organ);

/// 2|P∩G| / (|P|+|G|); 1 when both are empty.
double dsc(const Mask2D& pred, const Mask2D& gt);

struct AsdResult {
  double value = 0.0;
  bool pred_empty = false;
  bool gt_empty = false;
};

/// Foreground pixels with at least one background 4-neighbour; outside the image is background.
std::vector<std::pair<int, int>> boundary_pixels(const Mask2D& mask);

/// Exact squared Euclidean distance to the nearest set pixel of `sites` (lower envelope of parabolas).
std::vector<double> squared_distance_transform(const Mask2D& sites);

/// Average symmetric surface distance, scaled by `spacing`. Exactly one empty mask gives the
/// image diagonal (times spacing); both empty give 0.
AsdResult asd(const Mask2D& pred, const Mask2D& gt, double spacing = 1.0);

/// Per-pixel argmax over channels of [B,C,H,W]; ties go to the lowest class id.
std::vector<std::vector<std::uint16_t>> argmax_labels(const Tensor& probs);

struct CaseRecord {
  int client = 0;
  std::size_t case_id = 0;
  int organ = 0;
  double dsc = 0.0;
  double asd = 0.0;
  bool pred_empty = false;
  bool gt_empty = false;
};

struct Stat {
  double dsc_mean = 0.0, dsc_sd = 0.0;
  double asd_mean = 0.0, asd_sd = 0.0;
  std::size_t n = 0;
};

struct EvalResult {
  std::vector<CaseRecord> per_case;
  std::map<std::pair<int, int>, Stat> per_client_organ;  ///< (client, organ) -> mean over cases
  std::map<int, Stat> per_client;                        ///< mean over the client's labeled organs
  Stat global;                                           ///< mean over clients
};

/// Sample standard deviation; 0 for fewer than two values.
double sample_sd(const std::vector<double>& values);

/// Case -> organ -> client -> global averaging. Records for organs outside a client's labeled set
/// are ignored. Throws EvaluationError if a client lacks cases for one of its labeled organs.
EvalResult hierarchical_summary(const std::vector<CaseRecord>& records, const std::map<int, std::set<int>>& labeled);

/// Runs the segmentation network on `indices` of `data` and scores every organ in `organs`
/// against the full labels.
std::vector<CaseRecord> evaluate_cases(const NetworkConfig& config, const ParameterSet& params,
                                       const ClientDataset& data, const std::vector<std::size_t>& indices,
                                       int client_id, const std::set<int>& organs, bool with_asd = true);

void write_case_csv(std::ostream& out, const std::vector<CaseRecord>& records);
void write_summary_csv(std::ostream& out, const EvalResult& result);

/// Static SVG bar chart of mean DSC per organ, one series per client.
void write_dsc_svg(std::ostream& out, const EvalResult& result, const std::string& title);

}  // namespace fedmenu
