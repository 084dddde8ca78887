#include <filesystem>
#include <iostream>
#include <optional>
#include <string>

#include "CLI11.hpp"

#include "fedmenu/errors.hpp"
#include "fedmenu/experiment.hpp"

namespace {

enum ExitCode { kOk = 0, kUsage = 1, kIo = 2, kDivergence = 3, kStructure = 4 };

int fail(int code, const std::string& message) {
  std::cerr << "fedmenu: " << message << '\n';
  return code;
}

}  // namespace

int main(int argc, char** argv) {
  using namespace fedmenu;
  CLI::App app{"Federated multi-organ segmentation simulator"};
  app.require_subcommand(1);

  std::string config_path;
  std::string out_dir;
  bool verbose = false;

  auto* gen = app.add_subcommand("gen-data", "Generate the synthetic client datasets and a checksum manifest");
  gen->add_option("--config", config_path, "JSON configuration file")->required();
  gen->add_option("--out", out_dir, "Output directory")->required();

  std::string mode = "federated";
  std::optional<int> client;
  std::string data_dir;
  auto* train = app.add_subcommand("train", "Train in localized, centralized or federated mode");
  train->add_option("--config", config_path, "JSON configuration file")->required();
  train->add_option("--mode", mode, "localized | centralized | federated")
      ->check(CLI::IsMember({"localized", "centralized", "federated"}));
  train->add_option("--client", client, "Client id (1-based) for localized training");
  train->add_option("--data", data_dir, "Directory written by gen-data")->required();
  train->add_option("--out", out_dir, "Output directory (default: config output_dir)");
  train->add_flag("-v,--verbose", verbose, "Print one line per round");

  std::string checkpoint;
  std::string eval_data;
  std::string split = "test";
  auto* eval = app.add_subcommand("eval", "Score a checkpoint and write CSVs and an SVG chart");
  eval->add_option("--config", config_path, "JSON configuration file")->required();
  eval->add_option("--checkpoint", checkpoint, "FMNU checkpoint")->required();
  eval->add_option("--data", eval_data, "gen-data directory or a single .fmds file")->required();
  eval->add_option("--out", out_dir, "Output directory (default: config output_dir)");
  eval->add_option("--split", split, "train | val | test")->check(CLI::IsMember({"train", "val", "test"}));

  auto* ablate = app.add_subcommand("ablate", "Baseline vs MENU-Net vs ALD vs AGD over the configured seeds");
  ablate->add_option("--config", config_path, "JSON configuration file")->required();
  ablate->add_option("--out", out_dir, "Output directory (default: config output_dir)");
  ablate->add_flag("-v,--verbose", verbose, "Print one line per run");

  auto* sweep = app.add_subcommand("sweep-comm", "Rounds x local epochs at a fixed product");
  sweep->add_option("--config", config_path, "JSON configuration file")->required();
  sweep->add_option("--out", out_dir, "Output directory (default: config output_dir)");
  sweep->add_flag("-v,--verbose", verbose, "Print one line per run");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return kUsage;
  }

  try {
    const ExperimentConfig config = load_config(config_path);
    const std::filesystem::path out = out_dir.empty() ? config.output_dir : std::filesystem::path(out_dir);
    if (*gen) {
      const auto entries = cmd_gen_data(config, out);
      std::cout << "wrote " << entries.size() << " datasets to " << out.string() << '\n';
    } else if (*train) {
      TrainCommand cmd;
      cmd.mode = parse_train_mode(mode);
      if (cmd.mode == TrainMode::localized && !client)
        return fail(kUsage, "--mode localized requires --client <id>");
      cmd.client = client;
      cmd.data_dir = data_dir;
      cmd.out_dir = out;
      cmd.verbose = verbose;
      const auto result = cmd_train(config, cmd);
      std::cout << "best round " << result.best_round << " val_dsc " << result.best_val_dsc << '\n';
    } else if (*eval) {
      EvalCommand cmd;
      cmd.checkpoint = checkpoint;
      cmd.data = eval_data;
      cmd.out_dir = out;
      cmd.split = split;
      const auto result = cmd_eval(config, cmd);
      std::cout << "global dsc " << result.global.dsc_mean << " asd " << result.global.asd_mean << '\n';
    } else if (*ablate) {
      cmd_ablate(config, out, verbose);
      std::cout << "wrote " << (out / "ablation.csv").string() << '\n';
    } else if (*sweep) {
      cmd_sweep_comm(config, out, verbose);
      std::cout << "wrote " << (out / "sweep.csv").string() << '\n';
    }
  } catch (const StructureError& e) {
    return fail(kStructure, e.what());
  } catch (const DivergenceError& e) {
    return fail(kDivergence, e.what());
  } catch (const IoError& e) {
    return fail(kIo, e.what());
  } catch (const std::filesystem::filesystem_error& e) {
    return fail(kIo, e.what());
  } catch (const ConfigError& e) {
    return fail(kUsage, e.what());
  } catch (const std::exception& e) {
    return fail(kUsage, e.what());
  }
  return kOk;
}
