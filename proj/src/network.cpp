#include "fedmenu/network.hpp"

#include <algorithm>
#include <cmath>

#include "fedmenu/errors.hpp"
#include "fedmenu/hash.hpp"
#include "fedmenu/ops.hpp"
#include "fedmenu/rng.hpp"

namespace fedmenu {
namespace {

std::string conv_name(const std::string& group, const std::string& layer, const char* tensor) {
  return group + "/" + layer + "/" + tensor;
}

std::string level_layer(int level, const char* suffix) { return "l" + std::to_string(level) + suffix; }

// Declares every conv layer of the network: (group, layer, cout, cin, k).
struct LayerSpec {
  std::string group;
  std::string layer;
  int cout, cin, k;
};

// Conv layers of the network with encoder base width `base`.
std::vector<LayerSpec> layer_specs(const NetworkConfig& c, int base) {
  auto width = [base](int level) { return base << (level - 1); };
  std::vector<LayerSpec> specs;
  const int nb = c.branches();
  for (int b = 0; b < nb; ++b) {
    const std::string g = c.architecture == Architecture::menu ? subencoder_group(b + 1) : kEncoderGroup;
    int in = 1;
    for (int l = 1; l <= c.levels; ++l) {
      specs.push_back({g, level_layer(l, "c1"), width(l), in, 3});
      specs.push_back({g, level_layer(l, "c2"), width(l), width(l), 3});
      in = width(l);
    }
  }
  int in = nb * width(c.levels);
  for (int l = c.levels - 1; l >= 1; --l) {
    specs.push_back({kDecoderGroup, level_layer(l, "red"), width(l), in, 1});
    specs.push_back({kDecoderGroup, level_layer(l, "c1"), width(l), width(l) + nb * width(l), 3});
    specs.push_back({kDecoderGroup, level_layer(l, "c2"), width(l), width(l), 3});
    in = width(l);
  }
  specs.push_back({kDecoderGroup, "out", c.num_classes(), in, 1});
  if (c.architecture == Architecture::menu) {
    for (int l : c.agd_levels) {
      specs.push_back({kAgdGroup, level_layer(l, "c1"), c.agd_width(l), width(l), 3});
      specs.push_back({kAgdGroup, level_layer(l, "c2"), c.agd_width(l), c.agd_width(l), 3});
      specs.push_back({kAgdGroup, level_layer(l, "out"), 2, c.agd_width(l), 1});
    }
  }
  return specs;
}

std::vector<LayerSpec> layer_specs(const NetworkConfig& c) { return layer_specs(c, c.base_width()); }

std::size_t segmentation_count(const NetworkConfig& c, int base) {
  std::size_t n = 0;
  for (const auto& s : layer_specs(c, base)) {
    if (s.group == kAgdGroup) continue;
    n += static_cast<std::size_t>(s.cout) * static_cast<std::size_t>(s.cin * s.k * s.k + 1);
  }
  return n;
}

std::vector<std::string> group_ids(const NetworkConfig& c) {
  std::vector<std::string> ids;
  if (c.architecture == Architecture::menu) {
    for (int m = 1; m <= c.num_organs; ++m) ids.push_back(subencoder_group(m));
    ids.push_back(kDecoderGroup);
    ids.push_back(kAgdGroup);
  } else {
    ids.push_back(kEncoderGroup);
    ids.push_back(kDecoderGroup);
  }
  return ids;
}

Var conv(const BoundParameters& p, const std::string& group, const std::string& layer, const Var& x, int pad) {
  return ops::conv2d(x, p(conv_name(group, layer, "w")), p(conv_name(group, layer, "b")), 1, pad);
}

// conv3x3 -> instance norm -> leaky ReLU
Var block(const NetworkConfig& c, const BoundParameters& p, const std::string& group, const std::string& layer,
          const Var& x) {
  return ops::leaky_relu(ops::instance_norm(conv(p, group, layer, x, 1), c.norm_eps), c.leaky_slope);
}

}  // namespace

std::string subencoder_group(int organ) { return "subenc" + std::to_string(organ); }

void NetworkConfig::validate() const {
  if (num_organs < 1) throw ConfigError("network: num_organs must be >= 1");
  if (levels < 2) throw ConfigError("network: levels must be >= 2");
  if (base_channels < 2) throw ConfigError("network: base_channels must be >= 2");
  if (!(leaky_slope >= 0.0 && leaky_slope < 1.0)) throw ConfigError("network: leaky_slope must lie in [0, 1)");
  if (!(norm_eps > 0.0)) throw ConfigError("network: norm_eps must be positive");
  std::set<int> seen;
  for (int l : agd_levels) {
    if (l < 1 || l > levels) {
      throw ConfigError("network: agd level " + std::to_string(l) + " outside 1.." + std::to_string(levels));
    }
    if (!seen.insert(l).second) throw ConfigError("network: duplicate agd level " + std::to_string(l));
  }
  if (architecture == Architecture::unet && !agd_levels.empty()) {
    throw ConfigError("network: the single-encoder baseline has no AGD heads; agd_levels must be empty");
  }
}

int NetworkConfig::base_width() const {
  if (architecture == Architecture::menu) return base_channels;
  NetworkConfig menu = *this;
  menu.architecture = Architecture::menu;
  menu.agd_levels.clear();
  const std::size_t target = segmentation_count(menu, base_channels);
  int base = base_channels;
  while (segmentation_count(*this, base) <= target) ++base;
  return base;
}

int NetworkConfig::width(int level) const { return base_width() << (level - 1); }

int NetworkConfig::agd_width(int level) const { return std::max(2, width(level) / 2); }

ParameterSet build_network(const NetworkConfig& config, std::uint64_t seed) {
  config.validate();
  ParameterSet params;
  for (const auto& id : group_ids(config)) params.add_group(id);
  for (const auto& s : layer_specs(config)) {
    const std::string wname = conv_name(s.group, s.layer, "w");
    Fnv1a h;
    h.update(wname);
    Rng rng(mix_seed(seed, h.digest()));
    const double fan_in = static_cast<double>(s.cin * s.k * s.k);
    const double fan_out = static_cast<double>(s.cout * s.k * s.k);
    const double bound = std::sqrt(6.0 / (fan_in + fan_out));
    Tensor w({static_cast<std::size_t>(s.cout), static_cast<std::size_t>(s.cin), static_cast<std::size_t>(s.k),
              static_cast<std::size_t>(s.k)});
    for (auto& v : w.data()) v = rng.uniform(-bound, bound);
    params.add(s.group, s.layer + "/w", std::move(w));
    params.add(s.group, s.layer + "/b", Tensor({static_cast<std::size_t>(s.cout)}, 0.0));
  }
  return params;
}

std::set<std::string> trainable_groups(const NetworkConfig& config, const std::set<int>& labeled_organs) {
  if (labeled_organs.empty()) throw ConfigError("each client must label at least one organ");
  for (int m : labeled_organs) {
    if (m < 1 || m > config.num_organs) {
      throw ConfigError("labeled organ " + std::to_string(m) + " outside 1.." + std::to_string(config.num_organs));
    }
  }
  if (config.architecture == Architecture::unet) return {kEncoderGroup, kDecoderGroup};
  std::set<std::string> groups{kDecoderGroup, kAgdGroup};
  for (int m : labeled_organs) groups.insert(subencoder_group(m));
  return groups;
}

void check_structure(const NetworkConfig& config, const ParameterSet& params) {
  const ParameterSet reference = build_network(config, 0);
  for (const auto& [gid, g] : reference.groups()) {
    if (!params.has_group(gid) && !g.empty()) throw StructureError("checkpoint lacks parameter group " + gid);
    if (!params.has_group(gid)) continue;
    const auto& other = params.group(gid);
    for (const auto& [name, t] : g) {
      auto it = other.find(name);
      if (it == other.end()) throw StructureError("checkpoint lacks parameter " + gid + "/" + name);
      if (it->second.shape() != t.shape()) {
        throw StructureError("parameter " + gid + "/" + name + " has shape " + shape_string(it->second.shape()) +
                             ", network expects " + shape_string(t.shape()));
      }
    }
    if (other.size() != g.size()) throw StructureError("checkpoint group " + gid + " has unexpected parameters");
  }
  for (const auto& [gid, g] : params.groups()) {
    if (!reference.has_group(gid) && !g.empty()) throw StructureError("checkpoint has unknown group " + gid);
  }
}

std::size_t segmentation_parameter_count(const NetworkConfig& config) {
  const ParameterSet p = build_network(config, 0);
  std::size_t n = p.num_parameters();
  if (p.has_group(kAgdGroup)) n -= p.num_parameters({kAgdGroup});
  return n;
}

const Var& BoundParameters::operator()(const std::string& full_name) const {
  auto it = vars_.find(full_name);
  if (it == vars_.end()) throw StructureError("parameter \"" + full_name + "\" is not bound");
  return it->second;
}

BoundParameters bind_parameters(Tape& tape, const ParameterSet& params, const std::set<std::string>& trainable) {
  BoundParameters bound;
  for (const auto& [gid, g] : params.groups()) {
    const bool train = trainable.count(gid) != 0;
    for (const auto& [name, t] : g) bound.vars().emplace(gid + "/" + name, tape.leaf(t, train));
  }
  return bound;
}

NetworkGraph forward_graph(const NetworkConfig& c, const BoundParameters& p, const Var& x,
                           const std::set<int>& agd_organs) {
  const Tensor& xv = x.value();
  require_rank4(xv, "network input");
  if (xv.dim(1) != 1) throw DimensionError("network input must have one channel, got " + shape_string(xv.shape()));
  const std::size_t factor = std::size_t{1} << (c.levels - 1);
  if (xv.dim(2) % factor != 0 || xv.dim(3) % factor != 0) {
    throw ConfigError("network input " + shape_string(xv.shape()) + " is not divisible by " +
                      std::to_string(factor) + " (levels = " + std::to_string(c.levels) + ")");
  }
  if (!agd_organs.empty() && c.architecture != Architecture::menu) {
    throw ConfigError("AGD outputs requested from a network without AGD heads");
  }

  NetworkGraph graph;
  const int nb = c.branches();
  graph.features.resize(static_cast<std::size_t>(nb));
  for (int b = 0; b < nb; ++b) {
    const std::string g = c.architecture == Architecture::menu ? subencoder_group(b + 1) : kEncoderGroup;
    Var h = x;
    for (int l = 1; l <= c.levels; ++l) {
      if (l > 1) h = ops::maxpool2(h);
      h = block(c, p, g, level_layer(l, "c1"), h);
      h = block(c, p, g, level_layer(l, "c2"), h);
      graph.features[static_cast<std::size_t>(b)].push_back(h);
    }
  }

  auto level_concat = [&](int level) {
    std::vector<Var> parts;
    for (const auto& branch : graph.features) parts.push_back(branch[static_cast<std::size_t>(level - 1)]);
    return parts.size() == 1 ? parts.front() : ops::concat_channels(parts);
  };

  graph.bottleneck = level_concat(c.levels);
  Var d = graph.bottleneck;
  for (int l = c.levels - 1; l >= 1; --l) {
    d = ops::upsample2(conv(p, kDecoderGroup, level_layer(l, "red"), d, 0));
    std::vector<Var> parts{d};
    for (const auto& branch : graph.features) parts.push_back(branch[static_cast<std::size_t>(l - 1)]);
    d = ops::concat_channels(parts);
    d = block(c, p, kDecoderGroup, level_layer(l, "c1"), d);
    d = block(c, p, kDecoderGroup, level_layer(l, "c2"), d);
  }
  graph.logits = conv(p, kDecoderGroup, "out", d, 0);
  graph.probabilities = ops::softmax_channels(graph.logits);

  for (int m : agd_organs) {
    if (m < 1 || m > c.num_organs) throw ConfigError("AGD organ " + std::to_string(m) + " out of range");
    for (int l : c.agd_levels) {
      const Var& f = graph.features[static_cast<std::size_t>(m - 1)][static_cast<std::size_t>(l - 1)];
      Var a = block(c, p, kAgdGroup, level_layer(l, "c1"), f);
      a = block(c, p, kAgdGroup, level_layer(l, "c2"), a);
      a = ops::softmax_channels(conv(p, kAgdGroup, level_layer(l, "out"), a, 0));
      for (int u = 1; u < l; ++u) a = ops::upsample2(a);
      graph.agd_probs.emplace(AgdKey{m, l}, a);
    }
  }
  return graph;
}

ForwardOutput forward(const NetworkConfig& config, const ParameterSet& params, const Tensor& x, bool with_agd) {
  Tape tape;
  const BoundParameters bound = bind_parameters(tape, params, {});
  std::set<int> organs;
  if (with_agd) {
    for (int m = 1; m <= config.num_organs; ++m) organs.insert(m);
  }
  const NetworkGraph g = forward_graph(config, bound, tape.constant(x), organs);
  ForwardOutput out{g.logits.value(), g.probabilities.value(), {}};
  for (const auto& [key, v] : g.agd_probs) out.agd_probs.emplace(key, v.value());
  return out;
}

}  // namespace fedmenu
