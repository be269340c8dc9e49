#pragma once

#include <iostream>

#include "mmfuse/runner.hpp"

#include <CLI11.hpp>

namespace mmfuse::cli {

// Exit codes: 0 ok, 2 invalid config/data, 3 aborted on non-finite loss,
// 1 anything else.
inline int run(int argc, const char* const* argv) {
  CLI::App app{"mmfuse: multimodal multiscale fusion network trainer"};
  app.require_subcommand(1);

  std::string config_path, out_dir = "runs/run";
  std::int64_t seed_override = -1;
  CLI::App* train = app.add_subcommand("train", "train a model on synthetic data");
  train->add_option("--config", config_path, "path to the flat JSON config")->required();
  train->add_option("--seed", seed_override, "override the config seed");
  train->add_option("--out", out_dir, "output directory")->required();

  std::string ckpt_path, data_path, eval_out = "";
  CLI::App* eval = app.add_subcommand("eval", "evaluate a checkpoint on a dataset manifest");
  eval->add_option("--ckpt", ckpt_path, "checkpoint file (.mmck)")->required();
  eval->add_option("--data", data_path, "dataset manifest.json")->required();
  eval->add_option("--out", eval_out, "output directory (default: alongside the checkpoint)");

  std::string grid_path, ablate_out = "runs/ablation";
  CLI::App* ablate = app.add_subcommand("ablate", "train every cell of an ablation grid");
  ablate->add_option("--grid", grid_path, "grid JSON file")->required();
  ablate->add_option("--out", ablate_out, "output directory")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e);
  }

  try {
    if (train->parsed()) {
      RunConfig cfg = load_config(config_path);
      if (seed_override >= 0) cfg.seed = static_cast<std::uint64_t>(seed_override);
      RunArtifacts art = run_train(cfg, out_dir);
      std::cout << "manifest: " << (art.out_dir / "manifest.json").string() << "\n";
      const MetricsReport& m = art.final_metrics;
      std::cout << "test";
      if (m.auroc) std::cout << " auroc=" << *m.auroc;
      if (m.acc) std::cout << " acc=" << *m.acc;
      if (m.f1) std::cout << " f1=" << *m.f1;
      std::cout << "\n";
    } else if (eval->parsed()) {
      std::filesystem::path out = eval_out.empty()
                                      ? std::filesystem::path(ckpt_path).parent_path() / "eval"
                                      : std::filesystem::path(eval_out);
      MetricsReport m = run_eval(ckpt_path, data_path, out);
      std::cout << "metrics: " << (out / "metrics.json").string() << "\n";
      if (m.auroc) std::cout << "auroc=" << *m.auroc << "\n";
    } else if (ablate->parsed()) {
      auto csv = run_ablate(grid_path, ablate_out);
      std::cout << "ablation table: " << csv.string() << "\n";
    }
  } catch (const TrainAbort& e) {
    std::cerr << "aborted: non-finite loss at " << e.what() << "\n";
    return 3;
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 2;
  } catch (const DataError& e) {
    std::cerr << "data error: " << e.what() << "\n";
    return 2;
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}

}  // namespace mmfuse::cli
