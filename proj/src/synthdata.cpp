#include "fedmenu/synthdata.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numbers>
#include <sstream>

#include "fedmenu/binio.hpp"
#include "fedmenu/errors.hpp"
#include "fedmenu/hash.hpp"

namespace fedmenu {
namespace {

constexpr double kPi = std::numbers::pi;
constexpr int kShapeRetries = 200;
constexpr int kSampleRetries = 20;

using Mask = std::vector<std::uint8_t>;

// Nominal organ intensities before client shift; background sits around 0.35.
double organ_intensity(int organ) {
  static constexpr double levels[] = {0.62, 0.82, 0.72, 0.92, 0.15, 0.67, 0.77, 0.97};
  return levels[(organ - 1) % 8];
}

struct Canvas {
  int h, w;
  std::size_t idx(int y, int x) const { return static_cast<std::size_t>(y) * static_cast<std::size_t>(w) + x; }
};

template <typename Inside>
Mask rasterize(const Canvas& cv, Inside inside) {
  Mask m(static_cast<std::size_t>(cv.h * cv.w), 0);
  for (int y = 0; y < cv.h; ++y) {
    for (int x = 0; x < cv.w; ++x) m[cv.idx(y, x)] = inside(static_cast<double>(y), static_cast<double>(x)) ? 1 : 0;
  }
  return m;
}

std::size_t area(const Mask& m) { return static_cast<std::size_t>(std::count(m.begin(), m.end(), 1)); }

bool touches_border(const Canvas& cv, const Mask& m) {
  for (int x = 0; x < cv.w; ++x) {
    if (m[cv.idx(0, x)] || m[cv.idx(cv.h - 1, x)]) return true;
  }
  for (int y = 0; y < cv.h; ++y) {
    if (m[cv.idx(y, 0)] || m[cv.idx(y, cv.w - 1)]) return true;
  }
  return false;
}

// True if `m` overlaps `occupied` dilated by one pixel (8-neighbourhood).
bool collides(const Canvas& cv, const Mask& m, const Mask& occupied) {
  for (int y = 0; y < cv.h; ++y) {
    for (int x = 0; x < cv.w; ++x) {
      if (!m[cv.idx(y, x)]) continue;
      for (int dy = -1; dy <= 1; ++dy) {
        for (int dx = -1; dx <= 1; ++dx) {
          const int yy = y + dy, xx = x + dx;
          if (yy >= 0 && yy < cv.h && xx >= 0 && xx < cv.w && occupied[cv.idx(yy, xx)]) return true;
        }
      }
    }
  }
  return false;
}

// Rasterizes one organ of the given family with a target area drawn from `range`.
Mask draw_organ(const Canvas& cv, int organ, const AreaRange& range, double cy, double cx, Rng& rng) {
  const double target = rng.uniform(range.min_area, range.max_area);
  const double phi = rng.uniform(0.0, kPi);
  const double c = std::cos(phi), s = std::sin(phi);
  auto local = [=](double y, double x) {
    const double dy = y - cy, dx = x - cx;
    return std::pair<double, double>{dx * c + dy * s, -dx * s + dy * c};
  };
  int family = organ <= 5 ? organ : 6 + (organ - 6) % 2;
  switch (family) {
    case 1: {  // ellipse
      const double q = rng.uniform(1.2, 1.8);
      const double a = std::sqrt(target * q / kPi), b = std::sqrt(target / (kPi * q));
      return rasterize(cv, [=](double y, double x) {
        auto [u, v] = local(y, x);
        return (u / a) * (u / a) + (v / b) * (v / b) <= 1.0;
      });
    }
    case 2: {  // pair of disks
      const double r = std::sqrt(target / (2.0 * kPi));
      const double half = r + rng.uniform(1.5, 3.5);
      return rasterize(cv, [=](double y, double x) {
        auto [u, v] = local(y, x);
        return (u - half) * (u - half) + v * v <= r * r || (u + half) * (u + half) + v * v <= r * r;
      });
    }
    case 3: {  // bent band: arc of an annulus whose midpoint sits at the center
      const double t = rng.uniform(2.5, 3.5);
      const double span = rng.uniform(1.6, 2.6);
      const double radius = target / (t * span);
      const double oy = cy - radius * s, ox = cx - radius * c;
      return rasterize(cv, [=](double y, double x) {
        const double dy = y - oy, dx = x - ox;
        const double d = std::hypot(dy, dx);
        if (std::abs(d - radius) > t / 2.0) return false;
        double ang = std::atan2(dy, dx) - phi;
        ang = std::remainder(ang, 2.0 * kPi);
        return std::abs(ang) <= span / 2.0;
      });
    }
    case 4: {  // rotated square
      const double half = std::sqrt(target) / 2.0;
      return rasterize(cv, [=](double y, double x) {
        auto [u, v] = local(y, x);
        return std::abs(u) <= half && std::abs(v) <= half;
      });
    }
    case 5: {  // equilateral triangle
      const double r = std::sqrt(4.0 * target / (3.0 * std::sqrt(3.0)));
      return rasterize(cv, [=](double y, double x) {
        auto [u, v] = local(y, x);
        for (int k = 0; k < 3; ++k) {
          const double a = 2.0 * kPi * k / 3.0;
          if (u * std::cos(a) + v * std::sin(a) > r / 2.0) return false;
        }
        return true;
      });
    }
    case 6: {  // ring
      const double t = 3.0;
      const double radius = target / (2.0 * kPi * t);
      return rasterize(cv, [=](double y, double x) { return std::abs(std::hypot(y - cy, x - cx) - radius) <= t / 2.0; });
    }
    default: {  // cross
      const double bar = 3.0;
      const double len = (target + bar * bar) / (2.0 * bar);
      return rasterize(cv, [=](double y, double x) {
        auto [u, v] = local(y, x);
        return (std::abs(u) <= len / 2.0 && std::abs(v) <= bar / 2.0) ||
               (std::abs(v) <= len / 2.0 && std::abs(u) <= bar / 2.0);
      });
    }
  }
}

struct Sample {
  Tensor image;
  std::vector<std::uint16_t> labels;
};

bool try_sample(const DatasetSpec& spec, Rng& rng, Sample& out) {
  const Canvas cv{spec.height, spec.width};
  const std::size_t n = static_cast<std::size_t>(spec.height * spec.width);
  Mask occupied(n, 0);
  std::vector<std::uint16_t> labels(n, 0);
  const double ry = 0.25 * spec.height, rx = 0.25 * spec.width;
  for (int m = 1; m <= spec.num_organs; ++m) {
    const double site = 2.0 * kPi * (m - 1) / spec.num_organs + 0.6;
    const double ny = (spec.height - 1) / 2.0 + ry * std::sin(site);
    const double nx = (spec.width - 1) / 2.0 + rx * std::cos(site);
    const AreaRange range = spec.area_range(m);
    bool placed = false;
    for (int attempt = 0; attempt < kShapeRetries && !placed; ++attempt) {
      const double rad = spec.center_jitter * std::sqrt(rng.uniform());
      const double ang = rng.uniform(0.0, 2.0 * kPi);
      Mask mask = draw_organ(cv, m, range, ny + rad * std::sin(ang), nx + rad * std::cos(ang), rng);
      const double a = static_cast<double>(area(mask));
      if (a < range.min_area || a > range.max_area) continue;
      if (touches_border(cv, mask) || collides(cv, mask, occupied)) continue;
      for (std::size_t i = 0; i < n; ++i) {
        if (mask[i]) {
          occupied[i] = 1;
          labels[i] = static_cast<std::uint16_t>(m);
        }
      }
      placed = true;
    }
    if (!placed) return false;
  }

  // Smooth background with a random low-frequency ramp.
  Tensor image({1, static_cast<std::size_t>(spec.height), static_cast<std::size_t>(spec.width)});
  const double fy = rng.uniform(0.5, 1.5) * 2.0 * kPi / spec.height;
  const double fx = rng.uniform(0.5, 1.5) * 2.0 * kPi / spec.width;
  const double py = rng.uniform(0.0, 2.0 * kPi), px = rng.uniform(0.0, 2.0 * kPi);
  for (int y = 0; y < spec.height; ++y) {
    for (int x = 0; x < spec.width; ++x) {
      image[cv.idx(y, x)] = 0.35 + 0.05 * std::sin(fy * y + py) + 0.05 * std::cos(fx * x + px);
    }
  }
  for (std::size_t i = 0; i < n; ++i) {
    if (labels[i]) image[i] = organ_intensity(labels[i]) + 0.03 * (rng.uniform() - 0.5);
  }
  for (int d = 0; d < spec.distractors; ++d) {
    for (int attempt = 0; attempt < kShapeRetries; ++attempt) {
      const int hh = static_cast<int>(rng.uniform_int(3, 6)), ww = static_cast<int>(rng.uniform_int(3, 6));
      const int y0 = static_cast<int>(rng.uniform_int(1, spec.height - hh - 1));
      const int x0 = static_cast<int>(rng.uniform_int(1, spec.width - ww - 1));
      Mask mask(n, 0);
      for (int y = y0; y < y0 + hh; ++y) {
        for (int x = x0; x < x0 + ww; ++x) mask[cv.idx(y, x)] = 1;
      }
      if (collides(cv, mask, occupied)) continue;
      const double level = organ_intensity(static_cast<int>(rng.uniform_int(1, spec.num_organs)));
      for (std::size_t i = 0; i < n; ++i) {
        if (mask[i]) {
          occupied[i] = 1;
          image[i] = level;
        }
      }
      break;
    }
  }
  for (std::size_t i = 0; i < n; ++i) {
    image[i] = std::clamp(image[i] + spec.intensity_shift + spec.noise_sigma * rng.normal(), 0.0, 1.0);
  }
  out = Sample{std::move(image), std::move(labels)};
  return true;
}

}  // namespace

AreaRange default_area_range(int organ, int height, int width) {
  static constexpr AreaRange base[] = {{250, 450}, {70, 140}, {60, 130}, {80, 160}, {70, 140}};
  const double scale = static_cast<double>(height) * width / 4096.0;
  const AreaRange r = organ <= 5 ? base[organ - 1] : AreaRange{70, 140};
  return {r.min_area * scale, r.max_area * scale};
}

void DatasetSpec::validate() const {
  if (num_samples < 1) throw ConfigError("dataset: num_samples must be >= 1");
  if (height < 8 || width < 8) throw ConfigError("dataset: image size must be at least 8x8");
  if (num_organs < 1) throw ConfigError("dataset: num_organs must be >= 1");
  if (labeled_set.empty()) throw ConfigError("dataset: labeled_set must be non-empty");
  for (int m : labeled_set) {
    if (m < 1 || m > num_organs) throw ConfigError("dataset: labeled organ " + std::to_string(m) + " outside 1..M");
  }
  if (std::abs(split[0] + split[1] + split[2] - 1.0) > 1e-9) throw ConfigError("dataset: split ratios must sum to 1");
  for (double r : split) {
    if (r < 0.0) throw ConfigError("dataset: split ratios must be non-negative");
  }
  if (noise_sigma < 0.0) throw ConfigError("dataset: noise_sigma must be non-negative");
  if (!organ_areas.empty() && static_cast<int>(organ_areas.size()) != num_organs) {
    throw ConfigError("dataset: organ_areas must list one range per organ");
  }
  for (int m = 1; m <= num_organs; ++m) {
    const AreaRange r = area_range(m);
    if (!(r.min_area > 0.0 && r.min_area <= r.max_area)) throw ConfigError("dataset: invalid area range");
    if (r.max_area >= 0.5 * height * width) throw ConfigError("dataset: organ area range does not fit the image");
  }
}

AreaRange DatasetSpec::area_range(int organ) const {
  if (organ_areas.empty()) return default_area_range(organ, height, width);
  return organ_areas.at(static_cast<std::size_t>(organ - 1));
}

std::vector<std::uint16_t> ClientDataset::visible_labels(std::size_t i) const {
  std::vector<std::uint16_t> v = full_labels.at(i);
  for (auto& c : v) {
    if (c != 0 && labeled_set.count(c) == 0) c = 0;
  }
  return v;
}

Tensor ClientDataset::batch_images(const std::vector<std::size_t>& indices) const {
  const std::size_t hw = static_cast<std::size_t>(height * width);
  Tensor out({indices.size(), 1, static_cast<std::size_t>(height), static_cast<std::size_t>(width)});
  for (std::size_t b = 0; b < indices.size(); ++b) {
    const Tensor& img = images.at(indices[b]);
    std::copy(img.data().begin(), img.data().end(), out.data().begin() + static_cast<std::ptrdiff_t>(b * hw));
  }
  return out;
}

LabelMap ClientDataset::batch_labels(const std::vector<std::size_t>& indices) const {
  LabelMap lm;
  lm.batch = indices.size();
  lm.height = static_cast<std::size_t>(height);
  lm.width = static_cast<std::size_t>(width);
  lm.labeled_set = labeled_set;
  lm.classes.reserve(lm.batch * lm.height * lm.width);
  for (auto i : indices) {
    const auto v = visible_labels(i);
    lm.classes.insert(lm.classes.end(), v.begin(), v.end());
  }
  return lm;
}

std::uint64_t ClientDataset::checksum() const {
  std::ostringstream buf(std::ios::binary);
  write_dataset(buf, *this);
  Fnv1a h;
  h.update(buf.str());
  return h.digest();
}

ClientDataset generate(const DatasetSpec& spec) {
  spec.validate();
  ClientDataset data;
  data.height = spec.height;
  data.width = spec.width;
  data.num_organs = spec.num_organs;
  data.labeled_set = spec.labeled_set;
  for (int i = 0; i < spec.num_samples; ++i) {
    Rng rng(mix_seed(spec.seed, static_cast<std::uint64_t>(i)));
    Sample s;
    bool ok = false;
    for (int attempt = 0; attempt < kSampleRetries && !ok; ++attempt) ok = try_sample(spec, rng, s);
    if (!ok) {
      throw GenerationError("could not place " + std::to_string(spec.num_organs) +
                            " non-overlapping organs in sample " + std::to_string(i));
    }
    data.images.push_back(std::move(s.image));
    data.full_labels.push_back(std::move(s.labels));
  }
  std::vector<std::size_t> order(static_cast<std::size_t>(spec.num_samples));
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  Rng split_rng(mix_seed(spec.seed, 0xD15EA5EULL << 20));
  split_rng.shuffle(order);
  const auto n = static_cast<double>(spec.num_samples);
  const auto n_train = static_cast<std::size_t>(std::llround(n * spec.split[0]));
  const auto n_val = std::min(order.size() - n_train, static_cast<std::size_t>(std::llround(n * spec.split[1])));
  data.train.assign(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(n_train));
  data.val.assign(order.begin() + static_cast<std::ptrdiff_t>(n_train),
                  order.begin() + static_cast<std::ptrdiff_t>(n_train + n_val));
  data.test.assign(order.begin() + static_cast<std::ptrdiff_t>(n_train + n_val), order.end());
  return data;
}

Transform random_transform(Rng& rng, int height, int width) {
  Transform t;
  const long max_dy = std::lround(0.1 * height), max_dx = std::lround(0.1 * width);
  t.dy = static_cast<int>(rng.uniform_int(-max_dy, max_dy));
  t.dx = static_cast<int>(rng.uniform_int(-max_dx, max_dx));
  t.angle = rng.uniform(-0.1, 0.1);
  return t;
}

std::pair<Tensor, std::vector<std::uint16_t>> apply_transform(const Tensor& image,
                                                              const std::vector<std::uint16_t>& labels,
                                                              const Transform& t) {
  const std::size_t rank = image.rank();
  if (rank < 2) throw DimensionError("apply_transform: image must be at least 2-D");
  const int h = static_cast<int>(image.dim(rank - 2)), w = static_cast<int>(image.dim(rank - 1));
  if (image.size() != static_cast<std::size_t>(h * w) || labels.size() != image.size()) {
    throw DimensionError("apply_transform: expects a single-channel image and matching labels");
  }
  Tensor out(image.shape(), 0.0);
  std::vector<std::uint16_t> out_labels(labels.size(), 0);
  const double cy = (h - 1) / 2.0, cx = (w - 1) / 2.0;
  const double c = std::cos(t.angle), s = std::sin(t.angle);
  auto pixel = [&](int y, int x) -> double {
    return (y < 0 || y >= h || x < 0 || x >= w) ? 0.0 : image[static_cast<std::size_t>(y * w + x)];
  };
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      // Inverse map: undo translation, then undo rotation about the center.
      const double py = y - t.dy - cy, px = x - t.dx - cx;
      const double sy = cy + c * py + s * px;
      const double sx = cx - s * py + c * px;
      const double fy = std::floor(sy), fx = std::floor(sx);
      const double ay = sy - fy, ax = sx - fx;
      const int iy = static_cast<int>(fy), ix = static_cast<int>(fx);
      const std::size_t o = static_cast<std::size_t>(y * w + x);
      out[o] = (1.0 - ay) * ((1.0 - ax) * pixel(iy, ix) + ax * pixel(iy, ix + 1)) +
               ay * ((1.0 - ax) * pixel(iy + 1, ix) + ax * pixel(iy + 1, ix + 1));
      const long ny = std::lround(sy), nx = std::lround(sx);
      if (ny >= 0 && ny < h && nx >= 0 && nx < w) out_labels[o] = labels[static_cast<std::size_t>(ny * w + nx)];
    }
  }
  return {std::move(out), std::move(out_labels)};
}

std::pair<Tensor, LabelMap> augment(const Tensor& image, const LabelMap& labels, Rng& rng) {
  if (labels.batch != 1) throw DimensionError("augment: expects a single-sample label map");
  const Transform t = random_transform(rng, static_cast<int>(labels.height), static_cast<int>(labels.width));
  auto [img, cls] = apply_transform(image, labels.classes, t);
  LabelMap out = labels;
  out.classes = std::move(cls);
  return {std::move(img), std::move(out)};
}

BenchmarkSpecs benchmark_specs(int num_organs, int num_clients, std::uint64_t seed, int image_size,
                               int samples_per_client) {
  if (num_organs < 1 || num_clients < 1) throw ConfigError("benchmark: need at least one organ and one client");
  BenchmarkSpecs specs;
  std::set<int> all;
  for (int m = 1; m <= num_organs; ++m) all.insert(m);
  const double shift_lo = -0.08, shift_hi = 0.08;
  for (int k = 1; k <= num_clients; ++k) {
    DatasetSpec s;
    s.num_samples = samples_per_client;
    s.height = s.width = image_size;
    s.num_organs = num_organs;
    s.labeled_set = (k == num_clients && num_clients > num_organs) ? all : std::set<int>{(k - 1) % num_organs + 1};
    s.intensity_shift =
        num_clients == 1 ? 0.0 : shift_lo + (shift_hi - shift_lo) * (k - 1) / static_cast<double>(num_clients - 1);
    s.noise_sigma = 0.05 + 0.01 * ((k - 1) % 3);
    s.center_jitter = 0.1 * image_size;
    s.seed = mix_seed(seed, static_cast<std::uint64_t>(k));
    specs.clients.push_back(s);
  }
  DatasetSpec oof;
  oof.num_samples = std::max(4, samples_per_client * 2 / 5);
  oof.height = oof.width = image_size;
  oof.num_organs = num_organs;
  oof.labeled_set = all;
  oof.intensity_shift = shift_hi + 0.07;
  oof.noise_sigma = 0.06;
  oof.center_jitter = 0.1 * image_size;
  oof.split = {0.0, 0.0, 1.0};
  oof.seed = mix_seed(seed, 0x00F0F0F0ULL);
  specs.out_of_federation = oof;
  return specs;
}

Benchmark make_benchmark(const BenchmarkSpecs& specs) {
  Benchmark b;
  for (const auto& s : specs.clients) b.clients.push_back(generate(s));
  b.out_of_federation = generate(specs.out_of_federation);
  return b;
}

Benchmark make_benchmark(int num_organs, int num_clients, std::uint64_t seed) {
  return make_benchmark(benchmark_specs(num_organs, num_clients, seed));
}

void write_dataset(std::ostream& out, const ClientDataset& data) {
  using namespace binio;
  write_magic(out, "FMDS");
  write_le<std::uint32_t>(out, kDatasetVersion);
  write_le<std::uint64_t>(out, data.size());
  write_le<std::uint64_t>(out, static_cast<std::uint64_t>(data.height));
  write_le<std::uint64_t>(out, static_cast<std::uint64_t>(data.width));
  write_le<std::uint64_t>(out, static_cast<std::uint64_t>(data.num_organs));
  const std::size_t hw = static_cast<std::size_t>(data.height * data.width);
  for (std::size_t i = 0; i < data.size(); ++i) {
    if (data.images[i].size() != hw || data.full_labels[i].size() != hw) {
      throw DimensionError("write_dataset: sample " + std::to_string(i) + " has the wrong size");
    }
    for (double v : data.images[i].data()) write_f64(out, v);
    for (auto c : data.full_labels[i]) write_le<std::uint16_t>(out, c);
  }
  write_le<std::uint64_t>(out, data.labeled_set.size());
  for (int m : data.labeled_set) write_le<std::uint64_t>(out, static_cast<std::uint64_t>(m));
  for (const auto* split : {&data.train, &data.val, &data.test}) {
    write_le<std::uint64_t>(out, split->size());
    for (auto i : *split) write_le<std::uint64_t>(out, i);
  }
  if (!out) throw IoError("failed writing dataset");
}

ClientDataset read_dataset(std::istream& in) {
  using namespace binio;
  expect_magic(in, "FMDS");
  const auto version = read_le<std::uint32_t>(in);
  if (version != kDatasetVersion) throw IoError("unsupported dataset version " + std::to_string(version));
  ClientDataset data;
  const auto n = read_count(in, "sample count");
  const auto h = read_count(in, "height");
  const auto w = read_count(in, "width");
  const auto m = read_count(in, "organ count");
  if (h == 0 || w == 0 || h > kMaxCount / w) throw IoError("implausible image size");
  if (m == 0 || m > 0xFFFF) throw IoError("implausible organ count");
  data.height = static_cast<int>(h);
  data.width = static_cast<int>(w);
  data.num_organs = static_cast<int>(m);
  for (std::uint64_t i = 0; i < n; ++i) {
    Tensor img({1, h, w});
    for (auto& v : img.data()) v = read_f64(in);
    std::vector<std::uint16_t> labels(h * w);
    for (auto& c : labels) {
      c = read_le<std::uint16_t>(in);
      if (c > m) throw IoError("label id " + std::to_string(c) + " exceeds organ count");
    }
    data.images.push_back(std::move(img));
    data.full_labels.push_back(std::move(labels));
  }
  const auto nl = read_count(in, "labeled set size");
  for (std::uint64_t i = 0; i < nl; ++i) {
    const auto id = read_count(in, "organ id");
    if (id == 0 || id > m) throw IoError("labeled organ " + std::to_string(id) + " outside 1..M");
    data.labeled_set.insert(static_cast<int>(id));
  }
  for (auto* split : {&data.train, &data.val, &data.test}) {
    const auto ns = read_count(in, "split size");
    for (std::uint64_t i = 0; i < ns; ++i) {
      const auto idx = read_count(in, "split index");
      if (idx >= n) throw IoError("split index out of range");
      split->push_back(idx);
    }
  }
  return data;
}

void save_dataset(const std::filesystem::path& path, const ClientDataset& data) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open " + path.string() + " for writing");
  write_dataset(out, data);
}

ClientDataset load_dataset(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  return read_dataset(in);
}

}  // namespace fedmenu
