// afss: base-train | finetune | evaluate | ablate | report
#include <iostream>
#include <string>
#include <utility>
#include <vector>

#include <CLI11.hpp>

#include "afss/cli.hpp"

int main(int argc, char** argv) {
  using namespace afss::cli;
  CLI::App app{"Adaptive few-shot segmentation: base training, PAM fine-tuning, evaluation and reports"};
  app.require_subcommand(1, 1);

  std::string config_file;
  std::vector<std::string> sets;
  std::vector<std::pair<std::string, std::string>> overrides;

  // Flags mirror RunConfig keys; each given flag becomes one override applied
  // after the config file, in command-line order.
  auto add_common = [&](CLI::App* sub) {
    sub->add_option("--config", config_file, "JSON run configuration (flags override it)");
    sub->add_option("--set", sets, "Override any key: --set key=value");
    for (const auto& [flag, key, help] : std::vector<std::tuple<std::string, std::string, std::string>>{
             {"--out", "output_dir", "Run directory to create"},
             {"--base", "base_dir", "base-train run directory"},
             {"--pams", "pam_dir", "finetune run directory (evaluate; omit for the frozen baseline)"},
             {"--folds", "folds", "Comma-separated folds"},
             {"--seeds", "seeds", "Comma-separated seeds"},
             {"--preset", "preset", "desk: reduced iterations and episodes"},
             {"--alpha", "alpha", "Prototype momentum ratio"},
             {"--beta", "beta", "Adapter output scale"},
             {"--gamma", "gamma", "Adapter hidden ratio"},
             {"--insert", "insert", "Insert scheme over flat layers, e.g. 7-12 or 1,4,9"},
             {"--components", "components", "lam_only | pem_no_bank | full"},
             {"--mode", "mode", "standard | single_sample"},
             {"--shots", "shots", "Supports per episode"},
             {"--samples-per-class", "samples_per_class", "Fine-tuning images per novel class"},
             {"--iterations", "iterations", "Fine-tuning iterations"},
             {"--batch-size", "batch_size", "Episodes per fine-tuning iteration"},
             {"--lr", "lr", "Fine-tuning learning rate"},
             {"--episodes", "episodes", "Evaluation episodes per (fold, seed)"},
             {"--base-steps", "base_steps", "Base-training steps"},
             {"--dataset-seed", "dataset_seed", "Synthetic dataset seed"},
             {"--manifest", "manifest", "Dataset manifest to reproduce"},
             {"--label", "label", "Row name in reports"}}) {
      sub->add_option_function<std::string>(
          flag, [&overrides, key = key](const std::string& v) { overrides.emplace_back(key, v); }, help);
    }
    sub->add_flag_function(
        "--reuse-support", [&overrides](std::int64_t) { overrides.emplace_back("reuse_support", "true"); },
        "Use the fine-tuning images as the evaluation supports");
  };

  std::vector<std::string> grid, run_dirs;
  for (const auto& [name, help] : std::vector<std::pair<std::string, std::string>>{
           {"base-train", "Train and freeze the base model on each fold's base classes"},
           {"finetune", "Insert PAMs and fine-tune them on the budgeted novel-class images"},
           {"evaluate", "Novel-class mIoU of a finetune run, or of the frozen baseline"},
           {"ablate", "finetune + evaluate once per grid value"},
           {"report", "Comparison table and loss plots over evaluate runs"}}) {
    CLI::App* sub = app.add_subcommand(name, help);
    add_common(sub);
    if (name == "ablate") sub->add_option("--grid", grid, "key=v1,v2,... or key=v1;v2 when values hold commas (repeatable)")->required();
    if (name == "report") sub->add_option("runs", run_dirs, "evaluate run directories")->required();
  }

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? kSuccess : kValidationError;
  }

  RunConfig cfg;
  try {
    if (!config_file.empty()) cfg = load_config(config_file);
    cfg.command = parse_command(app.get_subcommands().front()->get_name());
    // the preset rescales defaults, so it goes before explicit values
    std::stable_partition(overrides.begin(), overrides.end(), [](const auto& kv) { return kv.first == "preset"; });
    for (const auto& [k, v] : overrides) apply_override(cfg, k, v);
    for (const auto& s : sets) {
      const auto eq = s.find('=');
      if (eq == std::string::npos) throw afss::ConfigError("--set expects key=value, got '" + s + "'");
      apply_override(cfg, s.substr(0, eq), s.substr(eq + 1));
    }
    if (!grid.empty()) cfg.grid = grid;
    if (!run_dirs.empty()) cfg.run_dirs = run_dirs;
  } catch (const std::exception& e) {
    std::cerr << "error: invalid configuration: " << e.what() << '\n';
    return kValidationError;
  }
  return run(cfg, std::cerr);
}
