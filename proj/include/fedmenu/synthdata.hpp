#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <set>
#include <utility>
#include <vector>

#include "fedmenu/losses.hpp"
#include "fedmenu/rng.hpp"
#include "fedmenu/tensor.hpp"

namespace fedmenu {

struct AreaRange {
  double min_area = 0.0;
  double max_area = 0.0;
};

/// Recipe for one client's synthetic dataset.
///
/// Organ shapes: 1 ellipse, 2 pair of disks, 3 bent band, 4 rotated square,
/// 5 triangle, then ring and cross alternating.
struct DatasetSpec {
  int num_samples = 60;
  int height = 64;
  int width = 64;
  int num_organs = 3;
  std::set<int> labeled_set;
  double intensity_shift = 0.0;
  double noise_sigma = 0.05;
  /// Organ centers are jittered uniformly within this radius (pixels) around their nominal site.
  double center_jitter = 6.0;
  /// Per-organ pixel-area bounds; empty means default_area_range() for every organ.
  std::vector<AreaRange> organ_areas;
  /// Non-organ rectangles with organ-like intensities.
  int distractors = 2;
  std::array<double, 3> split{40.0 / 60.0, 8.0 / 60.0, 12.0 / 60.0};
  std::uint64_t seed = 0;

  void validate() const;
  AreaRange area_range(int organ) const;
};

/// Default area bounds at 64x64, scaled by image area.
AreaRange default_area_range(int organ, int height, int width);

struct ClientDataset {
  int height = 0;
  int width = 0;
  int num_organs = 0;
  std::set<int> labeled_set;
  std::vector<Tensor> images;                            ///< each [1,H,W], values in [0,1]
  std::vector<std::vector<std::uint16_t>> full_labels;   ///< each H*W, every organ annotated
  std::vector<std::size_t> train, val, test;

  std::size_t size() const noexcept { return images.size(); }
  /// full_labels[i] with organs outside labeled_set mapped to 0.
  std::vector<std::uint16_t> visible_labels(std::size_t i) const;
  /// [B,1,H,W] stack of the listed samples.
  Tensor batch_images(const std::vector<std::size_t>& indices) const;
  /// Visible labels of the listed samples with this dataset's labeled set.
  LabelMap batch_labels(const std::vector<std::size_t>& indices) const;
  std::uint64_t checksum() const;
};

ClientDataset generate(const DatasetSpec& spec);

/// Rigid augmentation: integer translation then rotation about the image center.
struct Transform {
  int dy = 0;
  int dx = 0;
  double angle = 0.0;
};

/// Translation within +-10% of the image size, rotation within +-0.1 rad.
Transform random_transform(Rng& rng, int height, int width);

/// Bilinear image / nearest-neighbour label resampling, zero fill outside the source.
std::pair<Tensor, std::vector<std::uint16_t>> apply_transform(const Tensor& image,
                                                              const std::vector<std::uint16_t>& labels,
                                                              const Transform& t);

/// image [1,H,W] (or [1,1,H,W]) and a single-sample label map.
std::pair<Tensor, LabelMap> augment(const Tensor& image, const LabelMap& labels, Rng& rng);

struct BenchmarkSpecs {
  std::vector<DatasetSpec> clients;
  DatasetSpec out_of_federation;
};

/// Default layout: the first M clients each label one organ, a final client labels all,
/// and a fully labeled held-out set uses an intensity shift outside the clients' range.
BenchmarkSpecs benchmark_specs(int num_organs, int num_clients, std::uint64_t seed, int image_size = 64,
                               int samples_per_client = 60);

struct Benchmark {
  std::vector<ClientDataset> clients;
  ClientDataset out_of_federation;
};

Benchmark make_benchmark(int num_organs, int num_clients, std::uint64_t seed);
Benchmark make_benchmark(const BenchmarkSpecs& specs);

inline constexpr std::uint32_t kDatasetVersion = 1;

void write_dataset(std::ostream& out, const ClientDataset& data);
ClientDataset read_dataset(std::istream& in);
void save_dataset(const std::filesystem::path& path, const ClientDataset& data);
ClientDataset load_dataset(const std::filesystem::path& path);

}  // namespace fedmenu
