// Command-line front end for the experiment runner.

#include <iostream>
#include <optional>
#include <string>

#include "CLI11.hpp"
#include "archdoor/error.hpp"
#include "archdoor/experiment.hpp"

namespace {

constexpr int kExitConfig = 2;
constexpr int kExitRuntime = 3;

struct CommonFlags {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::optional<std::string> out;
  std::optional<std::string> clean_ckpt;
  std::optional<std::string> backdoor_ckpt;
  std::optional<std::string> backdoor;
  bool quiet = false;
};

void add_common(CLI::App* sub, CommonFlags& flags) {
  sub->add_option("--config", flags.config, "Experiment config (JSON)")->required();
  sub->add_option("--seed", flags.seed, "Override the master seed");
  sub->add_option("--out", flags.out, "Override the output directory");
  sub->add_option("--clean-ckpt", flags.clean_ckpt, "Use this clean checkpoint instead of training");
  sub->add_option("--backdoor-ckpt", flags.backdoor_ckpt, "Use this backdoored checkpoint instead of training");
  sub->add_flag("--quiet,-q", flags.quiet, "No progress output");
}

int run(const std::string& command, const CommonFlags& flags) {
  auto config = archdoor::load_experiment_config(flags.config);
  if (flags.seed) config.seed = *flags.seed;
  archdoor::CommandOptions options;
  if (flags.out) options.out = *flags.out;
  if (flags.clean_ckpt) options.clean_checkpoint = *flags.clean_ckpt;
  if (flags.backdoor_ckpt) options.backdoored_checkpoint = *flags.backdoor_ckpt;
  if (flags.backdoor) {
    if (*flags.backdoor != "on" && *flags.backdoor != "off")
      throw archdoor::ConfigError("--backdoor: expected on or off");
    options.backdoor = *flags.backdoor == "on";
  }
  if (!flags.quiet) options.log = [](const std::string& line) { std::cerr << line << "\n"; };
  const auto manifest = archdoor::run_command(command, config, options);
  if (!flags.quiet)
    for (const auto& f : manifest.outputs) std::cerr << "wrote " << f << "\n";
  return 0;
}

int make_toy(const std::string& path, const archdoor::ToyCorpusOptions& options, std::uint64_t split_seed) {
  auto split = archdoor::split_examples(archdoor::make_toy_corpus(options), options.num_classes, split_seed, "toy");
  archdoor::write_jsonl(split, path);
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Architectural backdoor experiment harness"};
  app.require_subcommand(1);

  CommonFlags flags;
  std::string selected;
  for (const auto& name : archdoor::command_names()) {
    auto* sub = app.add_subcommand(name);
    add_common(sub, flags);
    if (name == "train") sub->add_option("--backdoor", flags.backdoor, "Train the backdoored model: on or off");
    sub->callback([&selected, name] { selected = name; });
  }

  archdoor::ToyCorpusOptions toy;
  std::string toy_out;
  std::uint64_t toy_split_seed = 0;
  auto* toy_cmd = app.add_subcommand("make-toy", "Write the synthetic corpus as JSONL with explicit splits");
  toy_cmd->add_option("--out", toy_out, "Output JSONL path")->required();
  toy_cmd->add_option("--examples", toy.num_examples, "Number of sentences");
  toy_cmd->add_option("--classes", toy.num_classes, "Number of classes");
  toy_cmd->add_option("--partition-seed", toy.partition_seed, "Keyword-to-class assignment");
  toy_cmd->add_option("--seed", toy.seed, "Sentence sampling seed");
  toy_cmd->add_option("--split-seed", toy_split_seed, "Train/validation/test shuffle");
  toy_cmd->callback([&selected] { selected = "make-toy"; });

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : kExitConfig;
  }

  try {
    if (selected == "make-toy") return make_toy(toy_out, toy, toy_split_seed);
    return run(selected, flags);
  } catch (const archdoor::ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return kExitConfig;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitRuntime;
  }
}
