#include "fedmenu/params.hpp"

#include <fstream>

#include "fedmenu/binio.hpp"
#include "fedmenu/errors.hpp"
#include "fedmenu/hash.hpp"

namespace fedmenu {

std::pair<std::string, std::string> split_parameter_name(const std::string& full_name) {
  const auto slash = full_name.find('/');
  if (slash == std::string::npos || slash == 0 || slash + 1 == full_name.size()) {
    throw StructureError("parameter name \"" + full_name + "\" is not of the form group/layer/tensor");
  }
  return {full_name.substr(0, slash), full_name.substr(slash + 1)};
}

void ParameterSet::add(const std::string& group, const std::string& name, Tensor value) {
  auto [it, inserted] = groups_[group].emplace(name, std::move(value));
  if (!inserted) throw StructureError("duplicate parameter " + group + "/" + name);
}

const ParameterSet::Group& ParameterSet::group(const std::string& id) const {
  auto it = groups_.find(id);
  if (it == groups_.end()) throw StructureError("no parameter group \"" + id + "\"");
  return it->second;
}

ParameterSet::Group& ParameterSet::group(const std::string& id) {
  auto it = groups_.find(id);
  if (it == groups_.end()) throw StructureError("no parameter group \"" + id + "\"");
  return it->second;
}

std::vector<std::string> ParameterSet::group_ids() const {
  std::vector<std::string> ids;
  for (const auto& [id, _] : groups_) ids.push_back(id);
  return ids;
}

const Tensor& ParameterSet::at(const std::string& full_name) const {
  auto [g, name] = split_parameter_name(full_name);
  const Group& grp = group(g);
  auto it = grp.find(name);
  if (it == grp.end()) throw StructureError("no parameter \"" + full_name + "\"");
  return it->second;
}

Tensor& ParameterSet::at(const std::string& full_name) {
  auto [g, name] = split_parameter_name(full_name);
  Group& grp = group(g);
  auto it = grp.find(name);
  if (it == grp.end()) throw StructureError("no parameter \"" + full_name + "\"");
  return it->second;
}

std::size_t ParameterSet::tensor_count() const {
  std::size_t n = 0;
  for (const auto& [_, g] : groups_) n += g.size();
  return n;
}

std::size_t ParameterSet::num_parameters() const {
  std::size_t n = 0;
  for (const auto& [_, g] : groups_) {
    for (const auto& [__, t] : g) n += t.size();
  }
  return n;
}

std::size_t ParameterSet::num_parameters(const std::vector<std::string>& ids) const {
  std::size_t n = 0;
  for (const auto& id : ids) {
    for (const auto& [_, t] : group(id)) n += t.size();
  }
  return n;
}

bool ParameterSet::same_structure(const ParameterSet& other) const {
  if (groups_.size() != other.groups_.size()) return false;
  for (auto a = groups_.begin(), b = other.groups_.begin(); a != groups_.end(); ++a, ++b) {
    if (a->first != b->first || a->second.size() != b->second.size()) return false;
    for (auto x = a->second.begin(), y = b->second.begin(); x != a->second.end(); ++x, ++y) {
      if (x->first != y->first || x->second.shape() != y->second.shape()) return false;
    }
  }
  return true;
}

bool ParameterSet::bit_equal(const ParameterSet& other) const {
  if (!same_structure(other)) return false;
  for (auto a = groups_.begin(), b = other.groups_.begin(); a != groups_.end(); ++a, ++b) {
    for (auto x = a->second.begin(), y = b->second.begin(); x != a->second.end(); ++x, ++y) {
      if (!x->second.bit_equal(y->second)) return false;
    }
  }
  return true;
}

std::uint64_t ParameterSet::checksum() const {
  Fnv1a h;
  for (const auto& [gid, g] : groups_) {
    for (const auto& [name, t] : g) {
      h.update(gid);
      h.update("/");
      h.update(name);
      h.update(t.data().data(), t.size() * sizeof(double));
    }
  }
  return h.digest();
}

void write_checkpoint(std::ostream& out, const ParameterSet& params) {
  using namespace binio;
  write_magic(out, "FMNU");
  write_le<std::uint32_t>(out, kCheckpointVersion);
  write_le<std::uint64_t>(out, params.tensor_count());
  for (const auto& [gid, g] : params.groups()) {
    for (const auto& [name, t] : g) {
      const std::string full = gid + "/" + name;
      write_le<std::uint64_t>(out, full.size());
      out.write(full.data(), static_cast<std::streamsize>(full.size()));
      write_le<std::uint64_t>(out, t.rank());
      for (auto d : t.shape()) write_le<std::uint64_t>(out, d);
      for (double v : t.data()) write_f64(out, v);
    }
  }
  if (!out) throw IoError("failed writing checkpoint");
}

ParameterSet read_checkpoint(std::istream& in) {
  using namespace binio;
  expect_magic(in, "FMNU");
  const auto version = read_le<std::uint32_t>(in);
  if (version != kCheckpointVersion) {
    throw IoError("unsupported checkpoint version " + std::to_string(version));
  }
  const auto count = read_count(in, "array count");
  ParameterSet params;
  for (std::uint64_t i = 0; i < count; ++i) {
    const auto name_len = read_count(in, "name length");
    std::string full(name_len, '\0');
    if (!in.read(full.data(), static_cast<std::streamsize>(name_len))) throw IoError("truncated parameter name");
    const auto rank = read_count(in, "rank");
    if (rank == 0 || rank > 8) throw IoError("implausible rank for " + full);
    Shape shape(rank);
    std::uint64_t numel = 1;
    for (auto& d : shape) {
      d = read_count(in, "dimension");
      if (d == 0) throw IoError("zero dimension in " + full);
      numel *= d;
      if (numel > kMaxCount) throw IoError("implausible size for " + full);
    }
    std::vector<double> data(shape_numel(shape));
    for (auto& v : data) v = read_f64(in);
    auto [gid, name] = split_parameter_name(full);
    params.add(gid, name, Tensor(std::move(shape), std::move(data)));
  }
  return params;
}

void save_checkpoint(const std::filesystem::path& path, const ParameterSet& params) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open " + path.string() + " for writing");
  write_checkpoint(out, params);
}

ParameterSet load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  return read_checkpoint(in);
}

}  // namespace fedmenu
