#include "fedmenu/federation.hpp"

#include <atomic>
#include <chrono>
#include <cmath>
#include <exception>
#include <iomanip>
#include <ostream>
#include <thread>

#include "fedmenu/errors.hpp"
#include "fedmenu/metrics.hpp"

namespace fedmenu {
namespace {

struct SampleRef {
  const ClientDataset* data;
  std::size_t index;
};

bool uses_agd(const NetworkConfig& net, const FederationConfig& fed) {
  return fed.agd_mode != AgdMode::none && net.architecture == Architecture::menu && !net.agd_levels.empty();
}

void add_report(LossReport& acc, const LossReport& r, double w) {
  acc.total += w * r.total;
  acc.sup_term += w * r.sup_term;
  acc.marginal_term += w * r.marginal_term;
  acc.exclusion_term += w * r.exclusion_term;
  acc.aux_term += w * r.aux_term;
}

BatchGradient group_gradient(const NetworkConfig& net, const FederationConfig& fed, const ParameterSet& params,
                             const Tensor& images, const LabelMap& labels) {
  Tape tape;
  const auto trainable = client_trainable_groups(net, fed, labels.labeled_set);
  const BoundParameters bound = bind_parameters(tape, params, trainable);
  const Var x = tape.constant(images);
  const std::set<int> agd_organs = uses_agd(net, fed) ? labels.labeled_set : std::set<int>{};
  const NetworkGraph graph = forward_graph(net, bound, x, agd_organs);
  const Objective obj = partial_label_objective(graph.probabilities, graph.agd_probs, labels, fed.loss);
  tape.backward(obj.total);
  BatchGradient out;
  out.loss = obj.report;
  for (const auto& [name, v] : bound.vars()) {
    if (v.requires_grad()) out.grads.emplace(name, v.grad());
  }
  return out;
}

LabelMap merge_labels(const std::vector<LabelMap>& labels, const std::vector<std::size_t>& positions) {
  LabelMap out;
  out.batch = positions.size();
  out.height = labels[positions[0]].height;
  out.width = labels[positions[0]].width;
  out.labeled_set = labels[positions[0]].labeled_set;
  for (auto p : positions) {
    if (labels[p].batch != 1) throw DimensionError("batch_gradient: expects one label map per sample");
    out.classes.insert(out.classes.end(), labels[p].classes.begin(), labels[p].classes.end());
  }
  return out;
}

Tensor slice_batch(const Tensor& images, const std::vector<std::size_t>& positions) {
  Shape shape = images.shape();
  const std::size_t per = images.size() / shape[0];
  shape[0] = positions.size();
  Tensor out(shape);
  for (std::size_t i = 0; i < positions.size(); ++i) {
    std::copy_n(images.data().begin() + static_cast<std::ptrdiff_t>(positions[i] * per), per,
                out.data().begin() + static_cast<std::ptrdiff_t>(i * per));
  }
  return out;
}

bool grads_finite(const std::map<std::string, Tensor>& grads) {
  for (const auto& [name, g] : grads) {
    if (!g.all_finite()) return false;
  }
  return true;
}

// One pass over `samples` in an order drawn from `rng`.
void train_epoch(const NetworkConfig& net, const FederationConfig& fed, const std::vector<SampleRef>& samples,
                 Rng& rng, ParameterSet& params, std::map<std::string, Tensor>& velocity, double lr,
                 const ParameterSet* anchor, int round, TrainingReport& report) {
  std::vector<std::size_t> order(samples.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  rng.shuffle(order);
  const auto bs = static_cast<std::size_t>(fed.batch_size);
  for (std::size_t start = 0; start < order.size(); start += bs) {
    const std::size_t n = std::min(bs, order.size() - start);
    const ClientDataset& first = *samples[order[start]].data;
    Tensor images({n, 1, static_cast<std::size_t>(first.height), static_cast<std::size_t>(first.width)});
    const std::size_t hw = static_cast<std::size_t>(first.height * first.width);
    std::vector<LabelMap> labels;
    for (std::size_t b = 0; b < n; ++b) {
      const SampleRef& s = samples[order[start + b]];
      if (s.data->height != first.height || s.data->width != first.width) {
        throw DimensionError("training batch mixes image sizes");
      }
      Tensor img = s.data->images.at(s.index);
      LabelMap lm = s.data->batch_labels({s.index});
      if (fed.augment) std::tie(img, lm) = augment(img, lm, rng);
      std::copy(img.data().begin(), img.data().end(), images.data().begin() + static_cast<std::ptrdiff_t>(b * hw));
      labels.push_back(std::move(lm));
    }
    const std::size_t batch_index = report.batches;
    BatchGradient bg;
    try {
      bg = batch_gradient(net, fed, params, images, labels);
    } catch (const NumericError& e) {
      throw DivergenceError(round, batch_index, e.what());
    }
    if (anchor && fed.strategy == Strategy::fedprox && fed.mu > 0.0) {
      double prox = 0.0;
      for (auto& [name, g] : bg.grads) {
        const Tensor& theta = params.at(name);
        const Tensor& ref = anchor->at(name);
        for (std::size_t i = 0; i < g.size(); ++i) {
          const double d = theta[i] - ref[i];
          g[i] += fed.mu * d;
          prox += d * d;
        }
      }
      bg.loss.total += 0.5 * fed.mu * prox;
    }
    if (!std::isfinite(bg.loss.total) || !grads_finite(bg.grads)) {
      throw DivergenceError(round, batch_index, "non-finite loss or gradient");
    }
    sgd_step(params, velocity, bg.grads, lr, fed.sgd_momentum);
    add_report(report.loss, bg.loss, 1.0);
    report.batches += 1;
    report.samples += n;
  }
}

void finish_report(TrainingReport& r) {
  if (r.batches == 0) return;
  const double inv = 1.0 / static_cast<double>(r.batches);
  LossReport mean;
  add_report(mean, r.loss, inv);
  r.loss = mean;
}

std::optional<double> maybe_validate(const NetworkConfig& net, const FederationConfig& fed, const ParameterSet& params,
                                     const std::vector<const ClientDataset*>& datasets, int round, int total) {
  if (fed.validate_every <= 0) return std::nullopt;
  if ((round + 1) % fed.validate_every != 0 && round + 1 != total) return std::nullopt;
  for (const auto* d : datasets) {
    if (!d->val.empty()) return validation_dsc(net, params, datasets);
  }
  return std::nullopt;
}

// Best-model bookkeeping shared by all training modes.
void record_round(RoundLog log, const ParameterSet& params, TrainResult& result, const TrainOptions& options) {
  if (log.val_dsc && (result.best_round < 0 || *log.val_dsc > result.best_val_dsc)) {
    log.improved = true;
    result.best_round = log.round;
    result.best_val_dsc = *log.val_dsc;
    result.best_params = params;
    if (options.checkpoint_dir) {
      std::filesystem::create_directories(*options.checkpoint_dir);
      save_checkpoint(*options.checkpoint_dir / ("round_" + std::to_string(log.round) + ".ckpt"), params);
      save_checkpoint(*options.checkpoint_dir / "best.ckpt", params);
    }
  }
  if (options.on_round) options.on_round(log);
  result.logs.push_back(std::move(log));
}

void finish_result(TrainResult& result, const ParameterSet& final_params, const TrainOptions& options) {
  result.final_params = final_params;
  if (result.best_round < 0) {
    result.best_params = final_params;
    if (options.checkpoint_dir) {
      std::filesystem::create_directories(*options.checkpoint_dir);
      save_checkpoint(*options.checkpoint_dir / "best.ckpt", final_params);
    }
  }
}

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

}  // namespace

void FederationConfig::validate_config() const {
  if (num_clients < 1) throw ConfigError("federation: num_clients must be >= 1");
  if (num_organs < 1) throw ConfigError("federation: num_organs must be >= 1");
  if (rounds < 0) throw ConfigError("federation: rounds must be >= 0");
  if (local_epochs < 1) throw ConfigError("federation: local_epochs must be >= 1");
  if (!(base_lr > 0.0)) throw ConfigError("federation: base_lr must be positive");
  if (poly_exponent < 0.0) throw ConfigError("federation: poly_exponent must be non-negative");
  if (sgd_momentum < 0.0 || sgd_momentum >= 1.0) throw ConfigError("federation: sgd_momentum must lie in [0, 1)");
  if (batch_size < 1) throw ConfigError("federation: batch_size must be >= 1");
  if (strategy == Strategy::fedprox && mu < 0.0) throw ConfigError("federation: fedprox mu must be >= 0");
  if (workers < 1) throw ConfigError("federation: workers must be >= 1");
  if (validate_every < 0) throw ConfigError("federation: validate_every must be >= 0");
}

double poly_lr(double base_lr, int t, int total, double exponent) {
  if (total <= 0) throw ConfigError("poly_lr: total must be positive");
  if (t < 0 || t > total) throw ConfigError("poly_lr: step outside [0, total]");
  return base_lr * std::pow(1.0 - static_cast<double>(t) / static_cast<double>(total), exponent);
}

Rng client_rng(std::uint64_t seed, int client_id) {
  return Rng(mix_seed(mix_seed(seed, 0x7EA1ULL), static_cast<std::uint64_t>(client_id)));
}

std::vector<double> aggregation_weights(const std::vector<std::size_t>& sizes) {
  if (sizes.empty()) throw ProtocolError("aggregate: no local models");
  double total = 0.0;
  for (auto s : sizes) {
    if (s == 0) throw ProtocolError("aggregate: dataset sizes must be positive");
    total += static_cast<double>(s);
  }
  std::vector<double> w;
  for (auto s : sizes) w.push_back(static_cast<double>(s) / total);
  return w;
}

ParameterSet aggregate(const std::vector<ParameterSet>& locals, const std::vector<std::size_t>& sizes,
                       const AggregationOptions& options) {
  if (locals.size() != sizes.size()) throw ProtocolError("aggregate: models and sizes differ in length");
  const std::vector<double> weights = aggregation_weights(sizes);
  for (std::size_t k = 1; k < locals.size(); ++k) {
    if (!locals[k].same_structure(locals[0])) {
      throw ProtocolError("aggregate: local model " + std::to_string(k) + " differs structurally from model 0");
    }
  }
  if (options.mode == AggregationMode::expert && options.labeled_sets.size() != locals.size()) {
    throw ProtocolError("aggregate: expert mode needs one labeled set per local model");
  }
  ParameterSet out = locals[0];
  for (auto& [gid, group] : out.groups()) {
    if (options.excluded_groups.count(gid)) continue;
    std::vector<double> w = weights;
    if (options.mode == AggregationMode::expert && gid.rfind("subenc", 0) == 0) {
      const int organ = std::stoi(gid.substr(6));
      double total = 0.0;
      for (std::size_t k = 0; k < locals.size(); ++k) {
        if (options.labeled_sets[k].count(organ)) total += static_cast<double>(sizes[k]);
      }
      if (total == 0.0) continue;
      for (std::size_t k = 0; k < locals.size(); ++k) {
        w[k] = options.labeled_sets[k].count(organ) ? static_cast<double>(sizes[k]) / total : 0.0;
      }
    }
    for (auto& [name, tensor] : group) {
      std::vector<const Tensor*> srcs;
      for (const auto& l : locals) srcs.push_back(&l.group(gid).at(name));
      const Tensor& base = *srcs[0];
      for (std::size_t i = 0; i < tensor.size(); ++i) {
        double delta = 0.0;
        for (std::size_t k = 1; k < srcs.size(); ++k) delta += w[k] * ((*srcs[k])[i] - base[i]);
        tensor[i] = base[i] + delta;
      }
    }
  }
  return out;
}

std::set<std::string> client_trainable_groups(const NetworkConfig& net, const FederationConfig& fed,
                                              const std::set<int>& labeled) {
  auto groups = trainable_groups(net, labeled);
  if (!uses_agd(net, fed)) groups.erase(kAgdGroup);
  return groups;
}

ClientState make_client(int client_id, const ClientDataset& data, const NetworkConfig& net,
                        const FederationConfig& fed, const ParameterSet& init) {
  ClientState c;
  c.client_id = client_id;
  c.dataset = &data;
  c.rng = client_rng(fed.seed, client_id);
  for (const auto& gid : client_trainable_groups(net, fed, data.labeled_set)) {
    if (!init.has_group(gid)) continue;
    for (const auto& [name, t] : init.group(gid)) c.velocity.emplace(gid + "/" + name, Tensor(t.shape(), 0.0));
  }
  if (fed.agd_mode == AgdMode::ald && init.has_group(kAgdGroup)) c.local_agd = init.group(kAgdGroup);
  return c;
}

BatchGradient batch_gradient(const NetworkConfig& net, const FederationConfig& fed, const ParameterSet& params,
                             const Tensor& images, const std::vector<LabelMap>& labels) {
  require_rank4(images, "batch_gradient");
  if (labels.size() != images.dim(0)) throw DimensionError("batch_gradient: one label map per image required");
  std::map<std::set<int>, std::vector<std::size_t>> groups;
  for (std::size_t i = 0; i < labels.size(); ++i) groups[labels[i].labeled_set].push_back(i);
  if (groups.size() == 1) {
    std::vector<std::size_t> all(labels.size());
    for (std::size_t i = 0; i < all.size(); ++i) all[i] = i;
    return group_gradient(net, fed, params, images, merge_labels(labels, all));
  }
  BatchGradient out;
  const double total = static_cast<double>(labels.size());
  for (const auto& [set, positions] : groups) {
    const double w = static_cast<double>(positions.size()) / total;
    BatchGradient g = group_gradient(net, fed, params, slice_batch(images, positions), merge_labels(labels, positions));
    add_report(out.loss, g.loss, w);
    for (auto& [name, t] : g.grads) {
      auto it = out.grads.find(name);
      if (it == out.grads.end()) {
        for (auto& v : t.data()) v *= w;
        out.grads.emplace(name, std::move(t));
      } else {
        for (std::size_t i = 0; i < t.size(); ++i) it->second[i] += w * t[i];
      }
    }
  }
  return out;
}

void sgd_step(ParameterSet& params, std::map<std::string, Tensor>& velocity, const std::map<std::string, Tensor>& grads,
              double lr, double momentum) {
  for (const auto& [name, g] : grads) {
    if (!velocity.count(name)) throw ContractError("gradient for " + name + ", which has no optimizer state");
  }
  for (auto& [name, v] : velocity) {
    Tensor& theta = params.at(name);
    auto it = grads.find(name);
    if (it == grads.end()) {
      for (std::size_t i = 0; i < v.size(); ++i) {
        v[i] = momentum * v[i];
        theta[i] -= lr * v[i];
      }
    } else {
      const Tensor& g = it->second;
      for (std::size_t i = 0; i < v.size(); ++i) {
        v[i] = momentum * v[i] + g[i];
        theta[i] -= lr * v[i];
      }
    }
  }
}

TrainingReport local_train(const ParameterSet& global, ClientState& client, const NetworkConfig& net,
                           const FederationConfig& fed, int round) {
  if (!client.dataset) throw ContractError("client has no dataset");
  const ClientDataset& data = *client.dataset;
  if (data.train.empty()) throw DataError("client " + std::to_string(client.client_id) + " has no training samples");
  client.local_params = global;
  if (fed.agd_mode == AgdMode::ald && client.local_agd) client.local_params.group(kAgdGroup) = *client.local_agd;
  std::optional<ParameterSet> anchor;
  if (fed.strategy == Strategy::fedprox && fed.mu > 0.0) anchor = client.local_params;

  std::vector<SampleRef> samples;
  for (auto i : data.train) samples.push_back({&data, i});
  TrainingReport report;
  report.lr = poly_lr(fed.base_lr, round, fed.rounds, fed.poly_exponent);
  for (int e = 0; e < fed.local_epochs; ++e) {
    train_epoch(net, fed, samples, client.rng, client.local_params, client.velocity, report.lr,
                anchor ? &*anchor : nullptr, round, report);
  }
  finish_report(report);
  if (fed.agd_mode == AgdMode::ald && client.local_params.has_group(kAgdGroup)) {
    client.local_agd = client.local_params.group(kAgdGroup);
  }
  report.checksum = client.local_params.checksum();
  return report;
}

double validation_dsc(const NetworkConfig& net, const ParameterSet& params,
                      const std::vector<const ClientDataset*>& datasets) {
  std::vector<CaseRecord> records;
  std::map<int, std::set<int>> labeled;
  for (std::size_t k = 0; k < datasets.size(); ++k) {
    const ClientDataset& d = *datasets[k];
    if (d.val.empty()) continue;
    const int id = static_cast<int>(k) + 1;
    labeled[id] = d.labeled_set;
    auto r = evaluate_cases(net, params, d, d.val, id, d.labeled_set, false);
    records.insert(records.end(), r.begin(), r.end());
  }
  return hierarchical_summary(records, labeled).global.dsc_mean;
}

TrainResult run_federation(const NetworkConfig& net, const FederationConfig& fed,
                           const std::vector<const ClientDataset*>& clients, const ParameterSet& init,
                           const TrainOptions& options) {
  fed.validate_config();
  if (clients.empty()) throw ConfigError("federation needs at least one client");
  if (static_cast<int>(clients.size()) != fed.num_clients) {
    throw ConfigError("federation: config lists " + std::to_string(fed.num_clients) + " clients but " +
                      std::to_string(clients.size()) + " datasets were given");
  }
  check_structure(net, init);
  std::vector<ClientState> states;
  for (std::size_t k = 0; k < clients.size(); ++k) {
    states.push_back(make_client(static_cast<int>(k) + 1, *clients[k], net, fed, init));
  }
  AggregationOptions agg;
  agg.mode = fed.aggregation;
  for (const auto* c : clients) agg.labeled_sets.push_back(c->labeled_set);
  if (fed.agd_mode == AgdMode::ald) agg.excluded_groups.insert(kAgdGroup);
  std::vector<std::size_t> sizes;
  for (const auto* c : clients) sizes.push_back(c->train.size());

  TrainResult result;
  ParameterSet global = init;
  for (int t = 0; t < fed.rounds; ++t) {
    const auto t0 = std::chrono::steady_clock::now();
    std::vector<TrainingReport> reports(states.size());
    std::vector<std::exception_ptr> errors(states.size());
    auto train_one = [&](std::size_t k) {
      try {
        reports[k] = local_train(global, states[k], net, fed, t);
      } catch (...) {
        errors[k] = std::current_exception();
      }
    };
    const std::size_t nworkers = std::min<std::size_t>(static_cast<std::size_t>(fed.workers), states.size());
    if (nworkers <= 1) {
      for (std::size_t k = 0; k < states.size(); ++k) train_one(k);
    } else {
      std::atomic<std::size_t> next{0};
      std::vector<std::thread> pool;
      for (std::size_t w = 0; w < nworkers; ++w) {
        pool.emplace_back([&] {
          for (std::size_t k = next++; k < states.size(); k = next++) train_one(k);
        });
      }
      for (auto& th : pool) th.join();
    }
    for (auto& e : errors) {
      if (e) std::rethrow_exception(e);
    }
    std::vector<ParameterSet> locals;
    for (auto& s : states) locals.push_back(s.local_params);
    global = aggregate(locals, sizes, agg);

    RoundLog log;
    log.round = t;
    log.weights = aggregation_weights(sizes);
    for (std::size_t k = 0; k < states.size(); ++k) log.clients.push_back({states[k].client_id, reports[k]});
    log.val_dsc = maybe_validate(net, fed, global, clients, t, fed.rounds);
    log.seconds = seconds_since(t0);
    record_round(std::move(log), global, result, options);
  }
  finish_result(result, global, options);
  return result;
}

TrainResult run_centralized(const NetworkConfig& net, const FederationConfig& fed,
                            const std::vector<const ClientDataset*>& datasets, const ParameterSet& init,
                            const TrainOptions& options) {
  fed.validate_config();
  if (datasets.empty()) throw ConfigError("centralized training needs at least one dataset");
  check_structure(net, init);
  std::vector<SampleRef> samples;
  std::map<std::string, Tensor> velocity;
  for (const auto* d : datasets) {
    for (auto i : d->train) samples.push_back({d, i});
    for (const auto& gid : client_trainable_groups(net, fed, d->labeled_set)) {
      if (!init.has_group(gid)) continue;
      for (const auto& [name, t] : init.group(gid)) velocity.emplace(gid + "/" + name, Tensor(t.shape(), 0.0));
    }
  }
  if (samples.empty()) throw DataError("centralized training has no training samples");
  // Pooled training draws from the stream client 1 would use, so one dataset matches a one-client federation.
  Rng rng = client_rng(fed.seed, 1);
  const int epochs = fed.rounds * fed.local_epochs;
  TrainResult result;
  ParameterSet params = init;
  for (int e = 0; e < epochs; ++e) {
    const auto t0 = std::chrono::steady_clock::now();
    TrainingReport report;
    report.lr = poly_lr(fed.base_lr, e, epochs, fed.poly_exponent);
    train_epoch(net, fed, samples, rng, params, velocity, report.lr, nullptr, e, report);
    finish_report(report);
    report.checksum = params.checksum();
    RoundLog log;
    log.round = e;
    log.weights = {1.0};
    log.clients.push_back({0, report});
    log.val_dsc = maybe_validate(net, fed, params, datasets, e, epochs);
    log.seconds = seconds_since(t0);
    record_round(std::move(log), params, result, options);
  }
  finish_result(result, params, options);
  return result;
}

TrainResult run_localized(const NetworkConfig& net, const FederationConfig& fed, const ClientDataset& data,
                          const ParameterSet& init, const TrainOptions& options) {
  return run_centralized(net, fed, {&data}, init, options);
}

void write_round_csv(std::ostream& out, const std::vector<RoundLog>& logs) {
  out << "t,client_id,samples,loss_total,loss_sup,loss_margin,loss_excl,loss_aux,lr\n";
  out << std::setprecision(10);
  for (const auto& log : logs) {
    for (const auto& c : log.clients) {
      const auto& l = c.report.loss;
      out << log.round << ',' << c.client_id << ',' << c.report.samples << ',' << l.total << ',' << l.sup_term << ','
          << l.marginal_term << ',' << l.exclusion_term << ',' << l.aux_term << ',' << c.report.lr << '\n';
    }
  }
}

}  // namespace fedmenu
