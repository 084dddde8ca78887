#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "fedmenu/federation.hpp"
#include "fedmenu/metrics.hpp"
#include "fedmenu/network.hpp"
#include "fedmenu/synthdata.hpp"

namespace fedmenu {

/// Everything one command needs. Serialized as JSON; see docs/config.md for the schema.
struct ExperimentConfig {
  std::uint64_t seed = 1;
  std::filesystem::path output_dir = "runs/default";
  NetworkConfig network;
  FederationConfig federation;
  /// Explicit client datasets; empty means the default benchmark layout.
  std::vector<DatasetSpec> clients;
  std::optional<DatasetSpec> out_of_federation;
  int image_size = 64;
  int samples_per_client = 60;
  /// Validation cadence in rounds (0 disables model selection).
  int eval_every = 1;
  std::vector<std::uint64_t> seeds{1, 2, 3};
  int sweep_budget = 40;
  std::vector<int> sweep_local_epochs{8, 4, 2, 1};

  /// Cross-checks client count and organ count across sections; throws ConfigError.
  void validate() const;
  /// Dataset recipes after defaults are applied.
  BenchmarkSpecs dataset_specs() const;
  BenchmarkSpecs dataset_specs(std::uint64_t seed) const;
};

ExperimentConfig parse_config(const std::string& json_text);
ExperimentConfig load_config(const std::filesystem::path& path);
std::string config_to_json(const ExperimentConfig& config);
/// FNV-1a of the canonical JSON form, as 16 hex digits.
std::string config_hash(const ExperimentConfig& config);

/// Seed used for network initialization in a run with `seed`.
std::uint64_t init_seed(std::uint64_t seed);

enum class TrainMode { localized, centralized, federated };
TrainMode parse_train_mode(const std::string& s);

/// A model/training recipe compared in ablation, trend and sweep runs.
struct Variant {
  std::string name;
  Architecture architecture = Architecture::menu;
  AgdMode agd_mode = AgdMode::agd;
  TrainMode mode = TrainMode::federated;
  int rounds = 40;
  int local_epochs = 1;
};

/// Network and federation settings of `config` specialized to `variant`.
std::pair<NetworkConfig, FederationConfig> variant_settings(const ExperimentConfig& config, const Variant& variant,
                                                            std::uint64_t seed);

/// The four ablation rows: single-encoder baseline, MENU-Net, MENU-Net+ALD, MENU-Net+AGD.
std::vector<Variant> ablation_variants(const ExperimentConfig& config);

/// (T, E) pairs with T*E = budget for every E in `local_epochs` dividing the budget, by increasing T.
std::vector<std::pair<int, int>> sweep_pairs(int budget, const std::vector<int>& local_epochs);

struct RunMetrics {
  EvalResult in_federation;
  EvalResult out_of_federation;
  int best_round = -1;
  std::uint64_t checkpoint_checksum = 0;
  double seconds = 0.0;
};

/// Trains `variant` on `bench` and evaluates on the clients' test splits (labeled organs only)
/// and on the out-of-federation test split (all organs). Localized variants train one model
/// per client and score each on its own organs.
RunMetrics run_variant(const ExperimentConfig& config, const Benchmark& bench, const Variant& variant,
                       std::uint64_t seed);

/// In-federation evaluation: each client's test split scored on its labeled organs.
EvalResult evaluate_in_federation(const NetworkConfig& net, const ParameterSet& params, const Benchmark& bench,
                                  bool with_asd = true);
/// Out-of-federation evaluation on `organs` (default: all).
EvalResult evaluate_out_of_federation(const NetworkConfig& net, const ParameterSet& params, const Benchmark& bench,
                                      const std::set<int>& organs = {}, int client_id = 1, bool with_asd = true);

struct ManifestEntry {
  std::string file;
  std::uint64_t checksum = 0;
  std::size_t samples = 0;
  std::set<int> labeled_set;
};

std::vector<ManifestEntry> cmd_gen_data(const ExperimentConfig& config, const std::filesystem::path& out_dir);
Benchmark load_benchmark_dir(const std::filesystem::path& dir);

struct TrainCommand {
  TrainMode mode = TrainMode::federated;
  std::optional<int> client;  ///< 1-based, localized only
  std::filesystem::path data_dir;
  std::filesystem::path out_dir;
  bool verbose = false;
};
TrainResult cmd_train(const ExperimentConfig& config, const TrainCommand& cmd);

struct EvalCommand {
  std::filesystem::path checkpoint;
  std::filesystem::path data;  ///< benchmark directory or a single .fmds file
  std::filesystem::path out_dir;
  std::string split = "test";
};
/// Returns the in-federation summary (or the single dataset's summary).
EvalResult cmd_eval(const ExperimentConfig& config, const EvalCommand& cmd);

void cmd_ablate(const ExperimentConfig& config, const std::filesystem::path& out_dir, bool verbose = false);
void cmd_sweep_comm(const ExperimentConfig& config, const std::filesystem::path& out_dir, bool verbose = false);

}  // namespace fedmenu
