#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <map>
#include <string>
#include <vector>

#include "fedmenu/tensor.hpp"

namespace fedmenu {

/// Named network parameters partitioned into groups ("subenc1".."subencM", "decoder", "agd").
/// Tensor names inside a group are "<layer>/<tensor>"; the full name is "<group>/<layer>/<tensor>".
class ParameterSet {
 public:
  using Group = std::map<std::string, Tensor>;

  void add_group(const std::string& group) { groups_[group]; }
  void add(const std::string& group, const std::string& name, Tensor value);

  bool has_group(const std::string& group) const { return groups_.count(group) != 0; }
  const Group& group(const std::string& id) const;
  Group& group(const std::string& id);
  const std::map<std::string, Group>& groups() const noexcept { return groups_; }
  std::map<std::string, Group>& groups() noexcept { return groups_; }
  std::vector<std::string> group_ids() const;

  const Tensor& at(const std::string& full_name) const;
  Tensor& at(const std::string& full_name);

  std::size_t tensor_count() const;
  /// Total scalar parameter count, optionally restricted to some groups.
  std::size_t num_parameters() const;
  std::size_t num_parameters(const std::vector<std::string>& groups) const;

  /// Same groups, names and shapes.
  bool same_structure(const ParameterSet& other) const;
  bool bit_equal(const ParameterSet& other) const;
  std::uint64_t checksum() const;

 private:
  std::map<std::string, Group> groups_;
};

/// Splits "group/layer/tensor" into ("group", "layer/tensor").
std::pair<std::string, std::string> split_parameter_name(const std::string& full_name);

inline constexpr std::uint32_t kCheckpointVersion = 1;

void write_checkpoint(std::ostream& out, const ParameterSet& params);
ParameterSet read_checkpoint(std::istream& in);
void save_checkpoint(const std::filesystem::path& path, const ParameterSet& params);
ParameterSet load_checkpoint(const std::filesystem::path& path);

}  // namespace fedmenu
