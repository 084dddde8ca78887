#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <iosfwd>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "fedmenu/losses.hpp"
#include "fedmenu/network.hpp"
#include "fedmenu/params.hpp"
#include "fedmenu/rng.hpp"
#include "fedmenu/synthdata.hpp"

namespace fedmenu {

enum class Strategy { fedavg, fedprox };
/// agd: shared auxiliary heads; ald: heads trained locally and never averaged; none: no auxiliary loss.
enum class AgdMode { agd, ald, none };
/// literal: every group averaged over all clients; expert: subencoder m averaged only over clients labeling m.
enum class AggregationMode { literal, expert };

struct FederationConfig {
  int num_clients = 4;
  int num_organs = 3;
  int rounds = 40;
  int local_epochs = 1;
  double base_lr = 0.01;
  double poly_exponent = 0.9;
  double sgd_momentum = 0.99;
  int batch_size = 4;
  Strategy strategy = Strategy::fedavg;
  double mu = 0.0;
  AgdMode agd_mode = AgdMode::agd;
  AggregationMode aggregation = AggregationMode::literal;
  bool augment = true;
  /// Validate the global model every this many rounds (epochs without federation) and after the
  /// last one; 0 disables validation and the final model is kept.
  int validate_every = 1;
  /// Concurrent client trainers; 1 trains sequentially.
  int workers = 1;
  std::uint64_t seed = 0;
  LossOptions loss;

  void validate_config() const;
};

/// base_lr * (1 - t/T)^exponent.
double poly_lr(double base_lr, int t, int total, double exponent);

/// Per-client random stream used for shuffling and augmentation.
Rng client_rng(std::uint64_t seed, int client_id);

struct AggregationOptions {
  AggregationMode mode = AggregationMode::literal;
  /// Labeled organs per local model; required for expert mode.
  std::vector<std::set<int>> labeled_sets;
  /// Groups copied from the first local model instead of averaged.
  std::set<std::string> excluded_groups;
};

/// Normalized weights |D_k| / sum_j |D_j|. Throws ProtocolError on empty or non-positive sizes.
std::vector<double> aggregation_weights(const std::vector<std::size_t>& sizes);

/// Size-weighted parameter average, evaluated as theta_1 + sum_k w_k (theta_k - theta_1) so that
/// identical inputs reproduce bit-exactly. Throws ProtocolError on structural mismatch.
ParameterSet aggregate(const std::vector<ParameterSet>& locals, const std::vector<std::size_t>& sizes,
                       const AggregationOptions& options = {});

struct ClientState {
  int client_id = 0;
  const ClientDataset* dataset = nullptr;  ///< not owned
  ParameterSet local_params;
  std::map<std::string, Tensor> velocity;  ///< one buffer per trainable tensor
  Rng rng;
  /// Local auxiliary heads under ald mode.
  std::optional<ParameterSet::Group> local_agd;
};

/// Groups a client with `labeled` organs updates, given the auxiliary mode.
std::set<std::string> client_trainable_groups(const NetworkConfig& net, const FederationConfig& fed,
                                              const std::set<int>& labeled);

ClientState make_client(int client_id, const ClientDataset& data, const NetworkConfig& net,
                        const FederationConfig& fed, const ParameterSet& init);

/// Mean losses over the batches of one local training call (or one epoch).
struct TrainingReport {
  std::size_t samples = 0;
  std::size_t batches = 0;
  LossReport loss;
  double lr = 0.0;
  std::uint64_t checksum = 0;
};

struct BatchGradient {
  std::map<std::string, Tensor> grads;
  LossReport loss;
};

/// Gradient of the partial-label objective on a batch whose samples may carry different labeled
/// sets. Samples are grouped by labeled set; group g contributes with weight n_g / B and only to
/// the groups its labeled set trains. A single group is used unweighted.
BatchGradient batch_gradient(const NetworkConfig& net, const FederationConfig& fed, const ParameterSet& params,
                             const Tensor& images, const std::vector<LabelMap>& labels);

/// SGD with momentum: v = momentum v + g; theta -= lr v. Tensors without a gradient use g = 0.
void sgd_step(ParameterSet& params, std::map<std::string, Tensor>& velocity, const std::map<std::string, Tensor>& grads,
              double lr, double momentum);

/// E local epochs from `global` on the client's training split; frozen groups stay bit-identical to `global`.
TrainingReport local_train(const ParameterSet& global, ClientState& client, const NetworkConfig& net,
                           const FederationConfig& fed, int round);

struct ClientRoundLog {
  int client_id = 0;
  TrainingReport report;
};

struct RoundLog {
  int round = 0;
  std::vector<ClientRoundLog> clients;
  std::vector<double> weights;
  double seconds = 0.0;
  std::optional<double> val_dsc;
  bool improved = false;
};

struct TrainOptions {
  /// When set, writes round_<t>.ckpt on each validation improvement and best.ckpt.
  std::optional<std::filesystem::path> checkpoint_dir;
  std::function<void(const RoundLog&)> on_round;
};

struct TrainResult {
  ParameterSet final_params;
  ParameterSet best_params;
  int best_round = -1;
  double best_val_dsc = 0.0;
  std::vector<RoundLog> logs;
};

/// Hierarchical mean DSC of `params` over every dataset's validation split and labeled organs.
double validation_dsc(const NetworkConfig& net, const ParameterSet& params,
                      const std::vector<const ClientDataset*>& datasets);

TrainResult run_federation(const NetworkConfig& net, const FederationConfig& fed,
                           const std::vector<const ClientDataset*>& clients, const ParameterSet& init,
                           const TrainOptions& options = {});

/// Pooled training over all datasets' training splits for rounds * local_epochs epochs.
/// Validation uses every dataset's validation split.
TrainResult run_centralized(const NetworkConfig& net, const FederationConfig& fed,
                            const std::vector<const ClientDataset*>& datasets, const ParameterSet& init,
                            const TrainOptions& options = {});

/// Centralized training on one client's data.
TrainResult run_localized(const NetworkConfig& net, const FederationConfig& fed, const ClientDataset& data,
                          const ParameterSet& init, const TrainOptions& options = {});

void write_round_csv(std::ostream& out, const std::vector<RoundLog>& logs);

}  // namespace fedmenu
