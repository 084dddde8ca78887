#include "fedmenu/experiment.hpp"

#include <algorithm>
#include <array>
#include <chrono>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <map>
#include <numeric>
#include <set>
#include <sstream>

#include "json.hpp"

#include "fedmenu/errors.hpp"
#include "fedmenu/hash.hpp"
#include "fedmenu/params.hpp"
#include "fedmenu/rng.hpp"

namespace fedmenu {

using nlohmann::json;

namespace {

void check_keys(const json& j, const std::string& where, std::initializer_list<const char*> allowed) {
  if (!j.is_object()) throw ConfigError(where + ": expected an object");
  for (const auto& [key, value] : j.items()) {
    bool ok = false;
    for (const char* a : allowed) ok = ok || key == a;
    if (!ok) throw ConfigError(where + ": unknown key '" + key + "'");
  }
}

template <typename T>
void read_field(const json& j, const char* key, T& out, const std::string& where) {
  if (!j.contains(key)) return;
  try {
    out = j.at(key).get<T>();
  } catch (const json::exception& e) {
    throw ConfigError(where + "." + key + ": " + e.what());
  }
}

std::string architecture_name(Architecture a) { return a == Architecture::menu ? "menu" : "unet"; }

Architecture parse_architecture(const std::string& s) {
  if (s == "menu") return Architecture::menu;
  if (s == "unet") return Architecture::unet;
  throw ConfigError("unknown architecture '" + s + "' (menu|unet)");
}

std::string agd_mode_name(AgdMode m) {
  switch (m) {
    case AgdMode::agd: return "agd";
    case AgdMode::ald: return "ald";
    case AgdMode::none: return "none";
  }
  return "none";
}

AgdMode parse_agd_mode(const std::string& s) {
  if (s == "agd") return AgdMode::agd;
  if (s == "ald") return AgdMode::ald;
  if (s == "none") return AgdMode::none;
  throw ConfigError("unknown agd_mode '" + s + "' (agd|ald|none)");
}

Strategy parse_strategy(const std::string& s) {
  if (s == "fedavg") return Strategy::fedavg;
  if (s == "fedprox") return Strategy::fedprox;
  throw ConfigError("unknown strategy '" + s + "' (fedavg|fedprox)");
}

AggregationMode parse_aggregation(const std::string& s) {
  if (s == "literal") return AggregationMode::literal;
  if (s == "expert") return AggregationMode::expert;
  throw ConfigError("unknown aggregation '" + s + "' (literal|expert)");
}

void parse_network(const json& j, NetworkConfig& net) {
  const std::string w = "network";
  check_keys(j, w, {"architecture", "num_organs", "levels", "base_channels", "agd_levels", "leaky_slope", "norm_eps"});
  std::string arch = architecture_name(net.architecture);
  read_field(j, "architecture", arch, w);
  net.architecture = parse_architecture(arch);
  read_field(j, "num_organs", net.num_organs, w);
  read_field(j, "levels", net.levels, w);
  read_field(j, "base_channels", net.base_channels, w);
  read_field(j, "agd_levels", net.agd_levels, w);
  read_field(j, "leaky_slope", net.leaky_slope, w);
  read_field(j, "norm_eps", net.norm_eps, w);
}

void parse_loss(const json& j, LossOptions& loss) {
  const std::string w = "federation.loss";
  check_keys(j, w, {"lambda_excl", "lambda_aux", "dice_smooth", "ce_clamp", "excl_clamp"});
  read_field(j, "lambda_excl", loss.lambda_excl, w);
  read_field(j, "lambda_aux", loss.lambda_aux, w);
  read_field(j, "dice_smooth", loss.dice_smooth, w);
  read_field(j, "ce_clamp", loss.ce_clamp, w);
  read_field(j, "excl_clamp", loss.excl_clamp, w);
}

void parse_federation(const json& j, FederationConfig& fed) {
  const std::string w = "federation";
  check_keys(j, w,
             {"num_clients", "rounds", "local_epochs", "base_lr", "poly_exponent", "sgd_momentum", "batch_size",
              "strategy", "mu", "agd_mode", "aggregation", "augment", "workers", "loss"});
  read_field(j, "num_clients", fed.num_clients, w);
  read_field(j, "rounds", fed.rounds, w);
  read_field(j, "local_epochs", fed.local_epochs, w);
  read_field(j, "base_lr", fed.base_lr, w);
  read_field(j, "poly_exponent", fed.poly_exponent, w);
  read_field(j, "sgd_momentum", fed.sgd_momentum, w);
  read_field(j, "batch_size", fed.batch_size, w);
  std::string s = fed.strategy == Strategy::fedavg ? "fedavg" : "fedprox";
  read_field(j, "strategy", s, w);
  fed.strategy = parse_strategy(s);
  read_field(j, "mu", fed.mu, w);
  s = agd_mode_name(fed.agd_mode);
  read_field(j, "agd_mode", s, w);
  fed.agd_mode = parse_agd_mode(s);
  s = fed.aggregation == AggregationMode::literal ? "literal" : "expert";
  read_field(j, "aggregation", s, w);
  fed.aggregation = parse_aggregation(s);
  read_field(j, "augment", fed.augment, w);
  read_field(j, "workers", fed.workers, w);
  if (j.contains("loss")) parse_loss(j.at("loss"), fed.loss);
}

DatasetSpec parse_dataset(const json& j, const std::string& w) {
  check_keys(j, w,
             {"num_samples", "height", "width", "num_organs", "labeled_set", "intensity_shift", "noise_sigma",
              "center_jitter", "organ_areas", "distractors", "split", "seed"});
  DatasetSpec d;
  read_field(j, "num_samples", d.num_samples, w);
  read_field(j, "height", d.height, w);
  read_field(j, "width", d.width, w);
  read_field(j, "num_organs", d.num_organs, w);
  read_field(j, "labeled_set", d.labeled_set, w);
  read_field(j, "intensity_shift", d.intensity_shift, w);
  read_field(j, "noise_sigma", d.noise_sigma, w);
  read_field(j, "center_jitter", d.center_jitter, w);
  if (j.contains("organ_areas")) {
    std::vector<std::array<double, 2>> areas;
    read_field(j, "organ_areas", areas, w);
    for (const auto& a : areas) d.organ_areas.push_back({a[0], a[1]});
  }
  read_field(j, "distractors", d.distractors, w);
  read_field(j, "split", d.split, w);
  read_field(j, "seed", d.seed, w);
  return d;
}

json dataset_json(const DatasetSpec& d) {
  json areas = json::array();
  for (const auto& a : d.organ_areas) areas.push_back({a.min_area, a.max_area});
  return json{{"num_samples", d.num_samples},
              {"height", d.height},
              {"width", d.width},
              {"num_organs", d.num_organs},
              {"labeled_set", d.labeled_set},
              {"intensity_shift", d.intensity_shift},
              {"noise_sigma", d.noise_sigma},
              {"center_jitter", d.center_jitter},
              {"organ_areas", areas},
              {"distractors", d.distractors},
              {"split", d.split},
              {"seed", d.seed}};
}

// Explicit dataset seeds are offsets into the run seed.
DatasetSpec reseeded(DatasetSpec d, std::uint64_t seed) {
  d.seed = mix_seed(seed, d.seed);
  return d;
}

std::string hash_comment(const ExperimentConfig& config) { return "# config_hash=" + config_hash(config) + "\n"; }

std::ofstream open_output(const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write " + path.string());
  out << std::setprecision(10);
  return out;
}

void ensure_dir(const std::filesystem::path& dir) {
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec || !std::filesystem::is_directory(dir)) throw IoError("cannot create directory " + dir.string());
}

std::vector<const ClientDataset*> pointers(const Benchmark& bench) {
  std::vector<const ClientDataset*> out;
  for (const auto& c : bench.clients) out.push_back(&c);
  return out;
}

void check_benchmark(const ExperimentConfig& config, const Benchmark& bench) {
  if (static_cast<int>(bench.clients.size()) != config.federation.num_clients)
    throw ConfigError("benchmark has " + std::to_string(bench.clients.size()) + " clients, config expects " +
                      std::to_string(config.federation.num_clients));
  auto check = [&](const ClientDataset& d, const std::string& what) {
    if (d.num_organs != config.network.num_organs)
      throw ConfigError(what + " has " + std::to_string(d.num_organs) + " organs, config expects " +
                        std::to_string(config.network.num_organs));
  };
  for (std::size_t k = 0; k < bench.clients.size(); ++k) check(bench.clients[k], "client " + std::to_string(k + 1));
  check(bench.out_of_federation, "out-of-federation set");
}

const std::vector<std::size_t>& split_indices(const ClientDataset& d, const std::string& split) {
  if (split == "train") return d.train;
  if (split == "val") return d.val;
  if (split == "test") return d.test;
  throw ConfigError("unknown split '" + split + "' (train|val|test)");
}

std::set<int> all_organs(int m) {
  std::set<int> s;
  for (int i = 1; i <= m; ++i) s.insert(i);
  return s;
}

TrainOptions progress_options(bool verbose, const std::string& tag) {
  TrainOptions opt;
  if (verbose) {
    opt.on_round = [tag](const RoundLog& log) {
      double loss = 0.0;
      for (const auto& c : log.clients) loss += c.report.loss.total;
      if (!log.clients.empty()) loss /= static_cast<double>(log.clients.size());
      std::cerr << tag << " t=" << log.round << " loss=" << loss;
      if (log.val_dsc) std::cerr << " val_dsc=" << *log.val_dsc;
      std::cerr << " (" << std::fixed << std::setprecision(2) << log.seconds << "s)" << std::defaultfloat
                << std::setprecision(6) << '\n';
    };
  }
  return opt;
}

struct Summary {
  double mean = 0.0, sd = 0.0;
};

Summary summarize(const std::vector<double>& v) {
  Summary s;
  if (v.empty()) return s;
  s.mean = std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
  s.sd = sample_sd(v);
  return s;
}

}  // namespace

void ExperimentConfig::validate() const {
  network.validate();
  federation.validate_config();
  if (federation.num_organs != network.num_organs)
    throw ConfigError("federation.num_organs must equal network.num_organs");
  if (image_size < 8) throw ConfigError("data.image_size must be >= 8");
  if (samples_per_client < 5) throw ConfigError("data.samples_per_client must be >= 5");
  if (eval_every < 0) throw ConfigError("evaluation.every must be >= 0");
  if (!clients.empty() && static_cast<int>(clients.size()) != federation.num_clients)
    throw ConfigError("data.clients lists " + std::to_string(clients.size()) + " datasets but federation.num_clients is " +
                      std::to_string(federation.num_clients));
  for (std::size_t k = 0; k < clients.size(); ++k) {
    if (clients[k].num_organs != network.num_organs)
      throw ConfigError("data.clients[" + std::to_string(k) + "].num_organs must equal network.num_organs");
    clients[k].validate();
  }
  if (out_of_federation) {
    if (out_of_federation->num_organs != network.num_organs)
      throw ConfigError("data.out_of_federation.num_organs must equal network.num_organs");
    out_of_federation->validate();
  }
  if (seeds.empty()) throw ConfigError("experiments.seeds must not be empty");
  if (sweep_budget < 1) throw ConfigError("experiments.sweep_budget must be >= 1");
  if (sweep_pairs(sweep_budget, sweep_local_epochs).empty())
    throw ConfigError("experiments.sweep_local_epochs has no divisor of sweep_budget");
}

BenchmarkSpecs ExperimentConfig::dataset_specs() const { return dataset_specs(seed); }

BenchmarkSpecs ExperimentConfig::dataset_specs(std::uint64_t s) const {
  BenchmarkSpecs specs =
      benchmark_specs(network.num_organs, federation.num_clients, s, image_size, samples_per_client);
  if (!clients.empty()) {
    specs.clients.clear();
    for (const auto& c : clients) specs.clients.push_back(reseeded(c, s));
  }
  if (out_of_federation) specs.out_of_federation = reseeded(*out_of_federation, s);
  return specs;
}

ExperimentConfig parse_config(const std::string& json_text) {
  json j;
  try {
    j = json::parse(json_text);
  } catch (const json::parse_error& e) {
    throw ConfigError(std::string("config is not valid JSON: ") + e.what());
  }
  check_keys(j, "config", {"seed", "output_dir", "network", "federation", "data", "evaluation", "experiments"});
  ExperimentConfig c;
  read_field(j, "seed", c.seed, "config");
  std::string out = c.output_dir.string();
  read_field(j, "output_dir", out, "config");
  c.output_dir = out;
  if (j.contains("network")) parse_network(j.at("network"), c.network);
  if (j.contains("federation")) parse_federation(j.at("federation"), c.federation);
  c.federation.num_organs = c.network.num_organs;
  if (j.contains("data")) {
    const auto& d = j.at("data");
    check_keys(d, "data", {"image_size", "samples_per_client", "clients", "out_of_federation"});
    read_field(d, "image_size", c.image_size, "data");
    read_field(d, "samples_per_client", c.samples_per_client, "data");
    if (d.contains("clients")) {
      if (!d.at("clients").is_array()) throw ConfigError("data.clients: expected an array");
      for (std::size_t k = 0; k < d.at("clients").size(); ++k)
        c.clients.push_back(parse_dataset(d.at("clients")[k], "data.clients[" + std::to_string(k) + "]"));
    }
    if (d.contains("out_of_federation"))
      c.out_of_federation = parse_dataset(d.at("out_of_federation"), "data.out_of_federation");
  }
  if (j.contains("evaluation")) {
    check_keys(j.at("evaluation"), "evaluation", {"every"});
    read_field(j.at("evaluation"), "every", c.eval_every, "evaluation");
  }
  c.federation.validate_every = c.eval_every;
  if (j.contains("experiments")) {
    const auto& e = j.at("experiments");
    check_keys(e, "experiments", {"seeds", "sweep_budget", "sweep_local_epochs"});
    read_field(e, "seeds", c.seeds, "experiments");
    read_field(e, "sweep_budget", c.sweep_budget, "experiments");
    read_field(e, "sweep_local_epochs", c.sweep_local_epochs, "experiments");
  }
  c.validate();
  return c;
}

ExperimentConfig load_config(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot read config " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_config(ss.str());
}

std::string config_to_json(const ExperimentConfig& c) {
  const auto& n = c.network;
  const auto& f = c.federation;
  json j;
  j["seed"] = c.seed;
  j["output_dir"] = c.output_dir.string();
  j["network"] = {{"architecture", architecture_name(n.architecture)},
                  {"num_organs", n.num_organs},
                  {"levels", n.levels},
                  {"base_channels", n.base_channels},
                  {"agd_levels", n.agd_levels},
                  {"leaky_slope", n.leaky_slope},
                  {"norm_eps", n.norm_eps}};
  j["federation"] = {{"num_clients", f.num_clients},
                     {"rounds", f.rounds},
                     {"local_epochs", f.local_epochs},
                     {"base_lr", f.base_lr},
                     {"poly_exponent", f.poly_exponent},
                     {"sgd_momentum", f.sgd_momentum},
                     {"batch_size", f.batch_size},
                     {"strategy", f.strategy == Strategy::fedavg ? "fedavg" : "fedprox"},
                     {"mu", f.mu},
                     {"agd_mode", agd_mode_name(f.agd_mode)},
                     {"aggregation", f.aggregation == AggregationMode::literal ? "literal" : "expert"},
                     {"augment", f.augment},
                     {"workers", f.workers},
                     {"loss",
                      {{"lambda_excl", f.loss.lambda_excl},
                       {"lambda_aux", f.loss.lambda_aux},
                       {"dice_smooth", f.loss.dice_smooth},
                       {"ce_clamp", f.loss.ce_clamp},
                       {"excl_clamp", f.loss.excl_clamp}}}};
  json data = {{"image_size", c.image_size}, {"samples_per_client", c.samples_per_client}};
  if (!c.clients.empty()) {
    json arr = json::array();
    for (const auto& d : c.clients) arr.push_back(dataset_json(d));
    data["clients"] = arr;
  }
  if (c.out_of_federation) data["out_of_federation"] = dataset_json(*c.out_of_federation);
  j["data"] = data;
  j["evaluation"] = {{"every", c.eval_every}};
  j["experiments"] = {
      {"seeds", c.seeds}, {"sweep_budget", c.sweep_budget}, {"sweep_local_epochs", c.sweep_local_epochs}};
  return j.dump(2);
}

std::string config_hash(const ExperimentConfig& config) {
  ExperimentConfig c = config;
  // The output location does not change any result.
  c.output_dir.clear();
  c.federation.workers = 1;
  Fnv1a h;
  h.update(config_to_json(c));
  return hex64(h.digest());
}

std::uint64_t init_seed(std::uint64_t seed) { return mix_seed(seed, 0x1417); }

TrainMode parse_train_mode(const std::string& s) {
  if (s == "localized") return TrainMode::localized;
  if (s == "centralized") return TrainMode::centralized;
  if (s == "federated") return TrainMode::federated;
  throw ConfigError("unknown mode '" + s + "' (localized|centralized|federated)");
}

std::pair<NetworkConfig, FederationConfig> variant_settings(const ExperimentConfig& config, const Variant& variant,
                                                            std::uint64_t seed) {
  NetworkConfig net = config.network;
  FederationConfig fed = config.federation;
  net.architecture = variant.architecture;
  fed.agd_mode = variant.agd_mode;
  if (variant.architecture == Architecture::unet || variant.agd_mode == AgdMode::none) {
    net.agd_levels.clear();
    fed.agd_mode = AgdMode::none;
  }
  fed.rounds = variant.rounds;
  fed.local_epochs = variant.local_epochs;
  fed.seed = seed;
  return {net, fed};
}

std::vector<Variant> ablation_variants(const ExperimentConfig& config) {
  const int t = config.federation.rounds;
  const int e = config.federation.local_epochs;
  return {{"baseline", Architecture::unet, AgdMode::none, TrainMode::federated, t, e},
          {"menu", Architecture::menu, AgdMode::none, TrainMode::federated, t, e},
          {"menu_ald", Architecture::menu, AgdMode::ald, TrainMode::federated, t, e},
          {"menu_agd", Architecture::menu, AgdMode::agd, TrainMode::federated, t, e}};
}

std::vector<std::pair<int, int>> sweep_pairs(int budget, const std::vector<int>& local_epochs) {
  std::vector<std::pair<int, int>> pairs;
  if (budget < 1) return pairs;
  std::set<int> seen;
  for (int e : local_epochs)
    if (e >= 1 && budget % e == 0 && seen.insert(e).second) pairs.emplace_back(budget / e, e);
  std::sort(pairs.begin(), pairs.end());
  return pairs;
}

EvalResult evaluate_in_federation(const NetworkConfig& net, const ParameterSet& params, const Benchmark& bench,
                                  bool with_asd) {
  std::vector<CaseRecord> records;
  std::map<int, std::set<int>> labeled;
  for (std::size_t k = 0; k < bench.clients.size(); ++k) {
    const auto& d = bench.clients[k];
    const int id = static_cast<int>(k) + 1;
    auto r = evaluate_cases(net, params, d, d.test, id, d.labeled_set, with_asd);
    records.insert(records.end(), r.begin(), r.end());
    labeled[id] = d.labeled_set;
  }
  return hierarchical_summary(records, labeled);
}

EvalResult evaluate_out_of_federation(const NetworkConfig& net, const ParameterSet& params, const Benchmark& bench,
                                      const std::set<int>& organs, int client_id, bool with_asd) {
  const auto& d = bench.out_of_federation;
  const std::set<int> o = organs.empty() ? all_organs(d.num_organs) : organs;
  auto records = evaluate_cases(net, params, d, d.test, client_id, o, with_asd);
  return hierarchical_summary(records, {{client_id, o}});
}

RunMetrics run_variant(const ExperimentConfig& config, const Benchmark& bench, const Variant& variant,
                       std::uint64_t seed) {
  const auto start = std::chrono::steady_clock::now();
  const auto [net, fed_base] = variant_settings(config, variant, seed);
  FederationConfig fed = fed_base;
  fed.num_clients = static_cast<int>(bench.clients.size());
  const ParameterSet init = build_network(net, init_seed(seed));
  const auto datasets = pointers(bench);
  RunMetrics m;
  if (variant.mode == TrainMode::localized) {
    std::vector<CaseRecord> in_records, out_records;
    std::map<int, std::set<int>> labeled;
    Fnv1a h;
    for (std::size_t k = 0; k < bench.clients.size(); ++k) {
      const auto& d = bench.clients[k];
      const int id = static_cast<int>(k) + 1;
      FederationConfig local = fed;
      local.seed = mix_seed(seed, 0x10C0 + static_cast<std::uint64_t>(id));
      const auto result = run_localized(net, local, d, init);
      auto r = evaluate_cases(net, result.best_params, d, d.test, id, d.labeled_set);
      in_records.insert(in_records.end(), r.begin(), r.end());
      const auto& o = bench.out_of_federation;
      r = evaluate_cases(net, result.best_params, o, o.test, id, d.labeled_set);
      out_records.insert(out_records.end(), r.begin(), r.end());
      labeled[id] = d.labeled_set;
      const auto c = result.best_params.checksum();
      h.update(&c, sizeof c);
    }
    m.in_federation = hierarchical_summary(in_records, labeled);
    m.out_of_federation = hierarchical_summary(out_records, labeled);
    m.checkpoint_checksum = h.digest();
  } else {
    const auto result = variant.mode == TrainMode::federated ? run_federation(net, fed, datasets, init)
                                                             : run_centralized(net, fed, datasets, init);
    m.in_federation = evaluate_in_federation(net, result.best_params, bench);
    m.out_of_federation = evaluate_out_of_federation(net, result.best_params, bench);
    m.best_round = result.best_round;
    m.checkpoint_checksum = result.best_params.checksum();
  }
  m.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return m;
}

std::vector<ManifestEntry> cmd_gen_data(const ExperimentConfig& config, const std::filesystem::path& out_dir) {
  config.validate();
  ensure_dir(out_dir);
  const Benchmark bench = make_benchmark(config.dataset_specs());
  std::vector<ManifestEntry> entries;
  auto save = [&](const ClientDataset& d, const std::string& file) {
    save_dataset(out_dir / file, d);
    entries.push_back({file, d.checksum(), d.size(), d.labeled_set});
  };
  for (std::size_t k = 0; k < bench.clients.size(); ++k)
    save(bench.clients[k], "client_" + std::to_string(k + 1) + ".fmds");
  save(bench.out_of_federation, "out_of_federation.fmds");
  auto out = open_output(out_dir / "manifest.csv");
  out << hash_comment(config) << "file,checksum,samples,labeled_set\n";
  for (const auto& e : entries) {
    out << e.file << ',' << hex64(e.checksum) << ',' << e.samples << ',';
    bool first = true;
    for (int o : e.labeled_set) {
      out << (first ? "" : " ") << o;
      first = false;
    }
    out << '\n';
  }
  if (!out) throw IoError("cannot write manifest in " + out_dir.string());
  return entries;
}

Benchmark load_benchmark_dir(const std::filesystem::path& dir) {
  if (!std::filesystem::is_directory(dir)) throw IoError("dataset directory not found: " + dir.string());
  Benchmark bench;
  for (int k = 1;; ++k) {
    const auto path = dir / ("client_" + std::to_string(k) + ".fmds");
    if (!std::filesystem::exists(path)) break;
    bench.clients.push_back(load_dataset(path));
  }
  if (bench.clients.empty()) throw IoError("no client_<k>.fmds files in " + dir.string());
  bench.out_of_federation = load_dataset(dir / "out_of_federation.fmds");
  return bench;
}

TrainResult cmd_train(const ExperimentConfig& config, const TrainCommand& cmd) {
  config.validate();
  const Benchmark bench = load_benchmark_dir(cmd.data_dir);
  check_benchmark(config, bench);
  ensure_dir(cmd.out_dir);
  const NetworkConfig& net = config.network;
  FederationConfig fed = config.federation;
  fed.seed = config.seed;
  const ParameterSet init = build_network(net, init_seed(config.seed));
  TrainOptions opt = progress_options(cmd.verbose, "train");
  opt.checkpoint_dir = cmd.out_dir;
  TrainResult result;
  std::string log_name = "rounds.csv";
  switch (cmd.mode) {
    case TrainMode::federated:
      result = run_federation(net, fed, pointers(bench), init, opt);
      break;
    case TrainMode::centralized:
      result = run_centralized(net, fed, pointers(bench), init, opt);
      log_name = "epochs.csv";
      break;
    case TrainMode::localized: {
      if (!cmd.client) throw ConfigError("localized training needs a client id");
      const int k = *cmd.client;
      if (k < 1 || k > static_cast<int>(bench.clients.size()))
        throw ConfigError("client id " + std::to_string(k) + " outside 1.." + std::to_string(bench.clients.size()));
      result = run_localized(net, fed, bench.clients[static_cast<std::size_t>(k - 1)], init, opt);
      log_name = "epochs.csv";
      break;
    }
  }
  save_checkpoint(cmd.out_dir / "final.ckpt", result.final_params);
  auto out = open_output(cmd.out_dir / log_name);
  out << hash_comment(config);
  write_round_csv(out, result.logs);
  auto val = open_output(cmd.out_dir / "validation.csv");
  val << hash_comment(config) << "t,val_dsc,improved,seconds\n";
  for (const auto& log : result.logs) {
    val << log.round << ',';
    if (log.val_dsc) val << *log.val_dsc;
    val << ',' << (log.improved ? 1 : 0) << ',' << log.seconds << '\n';
  }
  if (!out || !val) throw IoError("cannot write training logs in " + cmd.out_dir.string());
  return result;
}

namespace {

void write_eval_outputs(const ExperimentConfig& config, const EvalResult& r, const std::filesystem::path& dir,
                        const std::string& prefix, const std::string& title) {
  auto cases = open_output(dir / (prefix + "_cases.csv"));
  cases << hash_comment(config);
  write_case_csv(cases, r.per_case);
  auto summary = open_output(dir / (prefix + "_summary.csv"));
  summary << hash_comment(config);
  write_summary_csv(summary, r);
  std::ostringstream svg;
  write_dsc_svg(svg, r, title);
  std::string text = svg.str();
  const auto pos = text.find('\n');
  const std::string comment = "<!-- config_hash=" + config_hash(config) + " -->\n";
  text.insert(pos == std::string::npos ? text.size() : pos + 1, comment);
  auto chart = open_output(dir / (prefix + "_dsc.svg"));
  chart << text;
  if (!cases || !summary || !chart) throw IoError("cannot write evaluation outputs in " + dir.string());
}

}  // namespace

EvalResult cmd_eval(const ExperimentConfig& config, const EvalCommand& cmd) {
  config.validate();
  const ParameterSet params = load_checkpoint(cmd.checkpoint);
  check_structure(config.network, params);
  ensure_dir(cmd.out_dir);
  const NetworkConfig& net = config.network;
  if (std::filesystem::is_directory(cmd.data)) {
    const Benchmark bench = load_benchmark_dir(cmd.data);
    check_benchmark(config, bench);
    std::vector<CaseRecord> records;
    std::map<int, std::set<int>> labeled;
    for (std::size_t k = 0; k < bench.clients.size(); ++k) {
      const auto& d = bench.clients[k];
      const int id = static_cast<int>(k) + 1;
      auto r = evaluate_cases(net, params, d, split_indices(d, cmd.split), id, d.labeled_set);
      records.insert(records.end(), r.begin(), r.end());
      labeled[id] = d.labeled_set;
    }
    const EvalResult in = hierarchical_summary(records, labeled);
    write_eval_outputs(config, in, cmd.out_dir, "in_federation", "In-federation DSC (" + cmd.split + ")");
    const EvalResult out = evaluate_out_of_federation(net, params, bench);
    write_eval_outputs(config, out, cmd.out_dir, "out_of_federation", "Out-of-federation DSC (test)");
    return in;
  }
  const ClientDataset d = load_dataset(cmd.data);
  if (d.num_organs != net.num_organs) throw ConfigError("dataset organ count does not match the config");
  auto records = evaluate_cases(net, params, d, split_indices(d, cmd.split), 1, d.labeled_set);
  const EvalResult r = hierarchical_summary(records, {{1, d.labeled_set}});
  write_eval_outputs(config, r, cmd.out_dir, "dataset", "DSC (" + cmd.split + ")");
  return r;
}

void cmd_ablate(const ExperimentConfig& config, const std::filesystem::path& out_dir, bool verbose) {
  config.validate();
  ensure_dir(out_dir);
  const auto variants = ablation_variants(config);
  // [variant][setting][metric] -> per-seed values
  std::vector<std::array<std::array<std::vector<double>, 2>, 2>> values(variants.size());
  auto runs = open_output(out_dir / "ablation_runs.csv");
  runs << hash_comment(config)
       << "model,seed,in_fed_dsc,in_fed_asd,out_fed_dsc,out_fed_asd,best_round,checkpoint_checksum,seconds\n";
  for (auto seed : config.seeds) {
    const Benchmark bench = make_benchmark(config.dataset_specs(seed));
    for (std::size_t v = 0; v < variants.size(); ++v) {
      const RunMetrics m = run_variant(config, bench, variants[v], seed);
      const Stat& in = m.in_federation.global;
      const Stat& out = m.out_of_federation.global;
      values[v][0][0].push_back(in.dsc_mean);
      values[v][0][1].push_back(in.asd_mean);
      values[v][1][0].push_back(out.dsc_mean);
      values[v][1][1].push_back(out.asd_mean);
      runs << variants[v].name << ',' << seed << ',' << in.dsc_mean << ',' << in.asd_mean << ',' << out.dsc_mean << ','
           << out.asd_mean << ',' << m.best_round << ',' << hex64(m.checkpoint_checksum) << ',' << m.seconds << '\n';
      runs.flush();
      if (verbose)
        std::cerr << "ablate seed=" << seed << ' ' << variants[v].name << " in_dsc=" << in.dsc_mean
                  << " out_dsc=" << out.dsc_mean << " (" << m.seconds << "s)\n";
    }
  }
  auto out = open_output(out_dir / "ablation.csv");
  out << hash_comment(config)
      << "model,in_fed_dsc_mean,in_fed_dsc_sd,in_fed_asd_mean,in_fed_asd_sd,"
         "out_fed_dsc_mean,out_fed_dsc_sd,out_fed_asd_mean,out_fed_asd_sd,seeds\n";
  for (std::size_t v = 0; v < variants.size(); ++v) {
    out << variants[v].name;
    for (int s = 0; s < 2; ++s)
      for (int metric = 0; metric < 2; ++metric) {
        const auto sum = summarize(values[v][s][metric]);
        out << ',' << sum.mean << ',' << sum.sd;
      }
    out << ',' << config.seeds.size() << '\n';
  }
  if (!out || !runs) throw IoError("cannot write ablation outputs in " + out_dir.string());
}

void cmd_sweep_comm(const ExperimentConfig& config, const std::filesystem::path& out_dir, bool verbose) {
  config.validate();
  ensure_dir(out_dir);
  const auto pairs = sweep_pairs(config.sweep_budget, config.sweep_local_epochs);
  std::vector<std::array<std::vector<double>, 2>> dsc(pairs.size());
  auto runs = open_output(out_dir / "sweep_runs.csv");
  runs << hash_comment(config) << "rounds,local_epochs,seed,dataset_checksum,in_fed_dsc,out_fed_dsc,seconds\n";
  for (auto seed : config.seeds) {
    const Benchmark bench = make_benchmark(config.dataset_specs(seed));
    Fnv1a h;
    for (const auto& c : bench.clients) {
      const auto v = c.checksum();
      h.update(&v, sizeof v);
    }
    const auto v = bench.out_of_federation.checksum();
    h.update(&v, sizeof v);
    const std::string data_sum = hex64(h.digest());
    for (std::size_t p = 0; p < pairs.size(); ++p) {
      Variant var{"menu_agd", config.network.architecture, config.federation.agd_mode, TrainMode::federated,
                  pairs[p].first, pairs[p].second};
      const RunMetrics m = run_variant(config, bench, var, seed);
      dsc[p][0].push_back(m.in_federation.global.dsc_mean);
      dsc[p][1].push_back(m.out_of_federation.global.dsc_mean);
      runs << pairs[p].first << ',' << pairs[p].second << ',' << seed << ',' << data_sum << ','
           << m.in_federation.global.dsc_mean << ',' << m.out_of_federation.global.dsc_mean << ',' << m.seconds
           << '\n';
      runs.flush();
      if (verbose)
        std::cerr << "sweep seed=" << seed << " T=" << pairs[p].first << " E=" << pairs[p].second
                  << " in_dsc=" << m.in_federation.global.dsc_mean << " (" << m.seconds << "s)\n";
    }
  }
  auto out = open_output(out_dir / "sweep.csv");
  out << hash_comment(config)
      << "rounds,local_epochs,in_fed_dsc_mean,in_fed_dsc_sd,out_fed_dsc_mean,out_fed_dsc_sd,seeds\n";
  for (std::size_t p = 0; p < pairs.size(); ++p) {
    const auto in = summarize(dsc[p][0]);
    const auto ood = summarize(dsc[p][1]);
    out << pairs[p].first << ',' << pairs[p].second << ',' << in.mean << ',' << in.sd << ',' << ood.mean << ','
        << ood.sd << ',' << config.seeds.size() << '\n';
  }
  if (!out || !runs) throw IoError("cannot write sweep outputs in " + out_dir.string());
}

}  // namespace fedmenu
