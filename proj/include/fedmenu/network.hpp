#pragma once

#include <cstdint>
#include <map>
#include <set>
#include <string>
#include <utility>
#include <vector>

#include "fedmenu/autograd.hpp"
#include "fedmenu/params.hpp"

namespace fedmenu {

enum class Architecture {
  menu,  ///< M organ-specific sub-encoders feeding one shared decoder
  unet,  ///< single wider encoder; the federated baseline
};

struct NetworkConfig {
  Architecture architecture = Architecture::menu;
  int num_organs = 3;
  int levels = 3;
  int base_channels = 8;
  /// Encoder levels (1-based) that feed an auxiliary generic decoder head. MENU-Net only.
  std::vector<int> agd_levels{1, 2, 3};
  double leaky_slope = 0.01;
  double norm_eps = 1e-5;

  void validate() const;
  int branches() const { return architecture == Architecture::menu ? num_organs : 1; }
  /// Level-1 width of an encoder branch. The single-encoder baseline takes the smallest width whose
  /// segmentation parameter count exceeds that of the MENU-Net with the same num_organs, levels and base_channels.
  int base_width() const;
  /// Channel width of one encoder branch (and of the decoder) at `level`.
  int width(int level) const;
  /// Hidden width of the AGD head attached at `level`.
  int agd_width(int level) const;
  int num_classes() const { return num_organs + 1; }
};

inline const std::string kDecoderGroup = "decoder";
inline const std::string kAgdGroup = "agd";
inline const std::string kEncoderGroup = "encoder";
std::string subencoder_group(int organ);

/// Xavier-uniform weights and zero biases, deterministic in `seed`.
ParameterSet build_network(const NetworkConfig& config, std::uint64_t seed);

/// Groups updated by a client whose data labels `labeled_organs`.
/// MENU-Net: the labeled organs' sub-encoders plus decoder and agd. U-Net: everything.
std::set<std::string> trainable_groups(const NetworkConfig& config, const std::set<int>& labeled_organs);

/// Throws StructureError unless `params` has exactly the names and shapes `config` builds.
void check_structure(const NetworkConfig& config, const ParameterSet& params);

/// Parameter count of the inference network (everything except the AGD heads).
std::size_t segmentation_parameter_count(const NetworkConfig& config);

/// (organ, level) key of an AGD output.
using AgdKey = std::pair<int, int>;

class BoundParameters {
 public:
  const Var& operator()(const std::string& full_name) const;
  std::map<std::string, Var>& vars() noexcept { return vars_; }
  const std::map<std::string, Var>& vars() const noexcept { return vars_; }

 private:
  std::map<std::string, Var> vars_;
};

/// Places every parameter on `tape` as a leaf; tensors in `trainable` groups require gradients.
BoundParameters bind_parameters(Tape& tape, const ParameterSet& params, const std::set<std::string>& trainable);

struct NetworkGraph {
  Var logits;
  Var probabilities;
  /// Binary AGD probabilities at input resolution.
  std::map<AgdKey, Var> agd_probs;
  /// features[branch][level - 1], pre-pooling encoder outputs.
  std::vector<std::vector<Var>> features;
  /// Channel concatenation of every branch's deepest features.
  Var bottleneck;
};

/// Builds the forward graph. AGD heads run for each organ in `agd_organs`.
NetworkGraph forward_graph(const NetworkConfig& config, const BoundParameters& params, const Var& x,
                           const std::set<int>& agd_organs);

struct ForwardOutput {
  Tensor logits;
  Tensor probabilities;
  std::map<AgdKey, Tensor> agd_probs;
};

/// Gradient-free convenience wrapper; with_agd evaluates the AGD heads for every organ.
ForwardOutput forward(const NetworkConfig& config, const ParameterSet& params, const Tensor& x, bool with_agd);

}  // namespace fedmenu
