#include <cmath>
#include <sstream>

#include "doctest.h"
#include "fedmenu/errors.hpp"
#include "fedmenu/network.hpp"
#include "fedmenu/ops.hpp"
#include "fedmenu/params.hpp"
#include "test_util.hpp"

using namespace fedmenu;
using fedmenu::testing::random_tensor;

namespace {

NetworkConfig small_config(int m = 3, int levels = 2, int base = 4) {
  NetworkConfig c;
  c.num_organs = m;
  c.levels = levels;
  c.base_channels = base;
  c.agd_levels.clear();
  for (int l = 1; l <= levels; ++l) c.agd_levels.push_back(l);
  return c;
}

}  // namespace

TEST_CASE("group ids are the sub-encoders, decoder and agd") {
  const ParameterSet p = build_network(small_config(3, 2, 4), 1);
  CHECK(p.group_ids() == std::vector<std::string>{"agd", "decoder", "subenc1", "subenc2", "subenc3"});
}

TEST_CASE("build_network is deterministic in its seed") {
  const auto c = small_config();
  CHECK(build_network(c, 5).bit_equal(build_network(c, 5)));
  CHECK(!build_network(c, 5).bit_equal(build_network(c, 6)));
}

TEST_CASE("sub-encoders are structural twins") {
  const ParameterSet p = build_network(small_config(), 2);
  const auto& a = p.group("subenc1");
  const auto& b = p.group("subenc2");
  REQUIRE(a.size() == b.size());
  for (auto ia = a.begin(), ib = b.begin(); ia != a.end(); ++ia, ++ib) {
    CHECK(ia->first == ib->first);
    CHECK(ia->second.shape() == ib->second.shape());
  }
}

TEST_CASE("weights follow the Xavier-uniform bound and biases start at zero") {
  const ParameterSet p = build_network(small_config(), 3);
  for (const auto& [gid, group] : p.groups())
    for (const auto& [name, t] : group) {
      if (t.rank() == 1) {
        for (double v : t.data()) CHECK(v == 0.0);
      } else {
        const double rf = static_cast<double>(t.dim(2) * t.dim(3));
        const double bound = std::sqrt(6.0 / (rf * static_cast<double>(t.dim(1) + t.dim(0))));
        for (double v : t.data()) CHECK(std::abs(v) <= bound);
      }
    }
}

TEST_CASE("forward shape contract") {
  NetworkConfig c;
  c.num_organs = 3;
  const ParameterSet p = build_network(c, 1);
  Rng rng(1);
  const Tensor x = random_tensor(rng, {1, 1, 64, 64}, 0.0, 1.0);
  const ForwardOutput out = forward(c, p, x, true);
  CHECK(out.logits.shape() == Shape{1, 4, 64, 64});
  CHECK(out.probabilities.shape() == Shape{1, 4, 64, 64});
  CHECK(out.agd_probs.size() == 9);
  for (const auto& [key, t] : out.agd_probs) {
    CHECK(t.shape() == Shape{1, 2, 64, 64});
    for (std::size_t i = 0; i < 64 * 64; ++i) CHECK(std::abs(t[i] + t[i + 64 * 64] - 1.0) <= 1e-12);
  }
  for (std::size_t i = 0; i < 64 * 64; ++i) {
    double s = 0.0;
    for (std::size_t ch = 0; ch < 4; ++ch) s += out.probabilities[ch * 64 * 64 + i];
    CHECK(std::abs(s - 1.0) <= 1e-12);
  }
}

TEST_CASE("forward is pure and rejects bad inputs") {
  const auto c = small_config();
  const ParameterSet p = build_network(c, 4);
  Rng rng(2);
  const Tensor x = random_tensor(rng, {2, 1, 8, 8});
  CHECK(forward(c, p, x, true).probabilities.bit_equal(forward(c, p, x, true).probabilities));
  CHECK_THROWS_AS(forward(c, p, random_tensor(rng, {1, 1, 7, 8}), false), ConfigError);
  CHECK_THROWS_AS(forward(c, p, random_tensor(rng, {1, 2, 8, 8}), false), DimensionError);
}

TEST_CASE("concatenation keeps sub-encoder features in organ order") {
  const auto c = small_config(3, 2, 4);
  ParameterSet p = build_network(c, 7);
  Rng rng(3);
  const Tensor x = random_tensor(rng, {1, 1, 8, 8});
  auto bottleneck = [&](const ParameterSet& params) {
    Tape tape;
    const auto bound = bind_parameters(tape, params, {});
    return forward_graph(c, bound, tape.constant(x), {}).bottleneck.value();
  };
  const Tensor before = bottleneck(p);
  for (auto& [name, t] : p.group("subenc2"))
    for (auto& v : t.data()) v = 0.0;
  const Tensor after = bottleneck(p);
  const std::size_t width = static_cast<std::size_t>(c.width(c.levels));
  REQUIRE(before.dim(1) == 3 * width);
  const std::size_t plane = before.dim(2) * before.dim(3);
  for (std::size_t ch = 0; ch < before.dim(1); ++ch) {
    bool same = true;
    for (std::size_t i = 0; i < plane; ++i) same = same && before[ch * plane + i] == after[ch * plane + i];
    CAPTURE(ch);
    CHECK(same == (ch < width || ch >= 2 * width));
  }
}

TEST_CASE("trainable_groups") {
  const auto c = small_config(3);
  CHECK(trainable_groups(c, {3}) == std::set<std::string>{"subenc3", "decoder", "agd"});
  CHECK(trainable_groups(c, {1, 2, 3}) == std::set<std::string>{"subenc1", "subenc2", "subenc3", "decoder", "agd"});
  CHECK_THROWS_AS(trainable_groups(c, {}), ConfigError);
  CHECK_THROWS_AS(trainable_groups(c, {4}), ConfigError);
}

TEST_CASE("config validation") {
  NetworkConfig c;
  c.levels = 1;
  CHECK_THROWS_AS(c.validate(), ConfigError);
  c = NetworkConfig{};
  c.agd_levels = {4};
  CHECK_THROWS_AS(c.validate(), ConfigError);
  c = NetworkConfig{};
  c.num_organs = 0;
  CHECK_THROWS_AS(c.validate(), ConfigError);
  c = NetworkConfig{};
  c.base_channels = 1;
  CHECK_THROWS_AS(c.validate(), ConfigError);
}

namespace {

// Closed-form conv parameter count: nb encoder branches of base width w, a decoder of the same width.
std::size_t count_oracle(std::size_t nb, int levels, std::size_t w, std::size_t classes) {
  auto conv = [](std::size_t cout, std::size_t cin, std::size_t k) { return cout * (cin * k * k + 1); };
  auto width = [w](int l) { return w << (l - 1); };
  std::size_t n = 0;
  for (int l = 1; l <= levels; ++l) n += nb * (conv(width(l), l == 1 ? 1 : width(l - 1), 3) + conv(width(l), width(l), 3));
  for (int l = levels - 1; l >= 1; --l) {
    n += conv(width(l), l == levels - 1 ? nb * width(levels) : width(l + 1), 1);
    n += conv(width(l), width(l) + nb * width(l), 3) + conv(width(l), width(l), 3);
  }
  return n + conv(classes, width(1), 1);
}

}  // namespace

TEST_CASE("MENU-Net has fewer segmentation parameters than the single-encoder baseline") {
  for (int m : {1, 2, 3, 4, 6}) {
    for (int levels : {2, 3}) {
      NetworkConfig menu;
      menu.num_organs = m;
      menu.levels = levels;
      menu.agd_levels = {1};
      NetworkConfig unet = menu;
      unet.architecture = Architecture::unet;
      unet.agd_levels.clear();
      CAPTURE(m);
      CAPTURE(levels);
      const std::size_t classes = static_cast<std::size_t>(m) + 1;
      const std::size_t menu_count = count_oracle(static_cast<std::size_t>(m), levels, 8, classes);
      CHECK(segmentation_parameter_count(menu) == menu_count);
      CHECK(segmentation_parameter_count(menu) < segmentation_parameter_count(unet));
      CHECK(segmentation_parameter_count(unet) == build_network(unet, 1).num_parameters());
      const auto b = static_cast<std::size_t>(unet.base_width());
      CHECK(segmentation_parameter_count(unet) == count_oracle(1, levels, b, classes));
      CHECK(count_oracle(1, levels, b - 1, classes) <= menu_count);
      const auto wide = static_cast<std::size_t>(8 * std::ceil(std::sqrt(static_cast<double>(m))));
      if (m > 1) CHECK(menu_count < count_oracle(1, levels, wide, classes));
    }
  }
  NetworkConfig d;
  d.architecture = Architecture::unet;
  d.agd_levels.clear();
  CHECK(d.base_width() == 13);
  CHECK(d.width(2) == 26);
}

TEST_CASE("check_structure detects mismatches") {
  const auto c = small_config();
  ParameterSet p = build_network(c, 1);
  CHECK_NOTHROW(check_structure(c, p));
  CHECK_THROWS_AS(check_structure(small_config(3, 2, 6), p), StructureError);
  CHECK_THROWS_AS(check_structure(small_config(2, 2, 4), p), StructureError);
  p.group("decoder").erase(p.group("decoder").begin());
  CHECK_THROWS_AS(check_structure(c, p), StructureError);
}

TEST_CASE("checkpoint round-trip is bit-exact") {
  Rng rng(12);
  for (int trial = 0; trial < 20; ++trial) {
    ParameterSet p;
    const int groups = static_cast<int>(rng.uniform_int(1, 4));
    for (int g = 0; g < groups; ++g) {
      const int tensors = static_cast<int>(rng.uniform_int(1, 3));
      for (int t = 0; t < tensors; ++t) {
        Shape s(static_cast<std::size_t>(rng.uniform_int(1, 4)));
        for (auto& d : s) d = static_cast<std::size_t>(rng.uniform_int(1, 4));
        Tensor v(s);
        for (auto& x : v.data()) x = std::ldexp(rng.uniform(-1.0, 1.0), static_cast<int>(rng.uniform_int(-300, 300)));
        p.add("g" + std::to_string(g), "layer" + std::to_string(t) + "/w", v);
      }
    }
    std::stringstream ss;
    write_checkpoint(ss, p);
    const std::string bytes = ss.str();
    const ParameterSet q = read_checkpoint(ss);
    CHECK(q.bit_equal(p));
    std::stringstream again;
    write_checkpoint(again, q);
    CHECK(again.str() == bytes);
  }
}

TEST_CASE("checkpoint layout") {
  ParameterSet p;
  p.add("decoder", "out/b", Tensor({2}, {1.0, -2.0}));
  std::stringstream ss;
  write_checkpoint(ss, p);
  const std::string s = ss.str();
  REQUIRE(s.size() == 4 + 4 + 8 + 8 + 13 + 8 + 8 + 16);
  CHECK(s.substr(0, 4) == "FMNU");
  CHECK(s[4] == 1);
  CHECK(s.substr(24, 13) == "decoder/out/b");
}

TEST_CASE("corrupt checkpoints are I/O errors") {
  ParameterSet p;
  p.add("decoder", "w", Tensor({2, 2}, 1.0));
  std::stringstream ss;
  write_checkpoint(ss, p);
  const std::string good = ss.str();
  std::stringstream truncated(good.substr(0, good.size() - 3));
  CHECK_THROWS_AS(read_checkpoint(truncated), IoError);
  std::string bad_magic = good;
  bad_magic[0] = 'X';
  std::stringstream bm(bad_magic);
  CHECK_THROWS_AS(read_checkpoint(bm), IoError);
  std::string zero_dim = good;
  zero_dim[4 + 4 + 8 + 8 + 9 + 8] = 0;
  std::stringstream zd(zero_dim);
  CHECK_THROWS_AS(read_checkpoint(zd), IoError);
}
