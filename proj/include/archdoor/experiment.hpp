#pragma once

#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "archdoor/defense.hpp"
#include "archdoor/metrics.hpp"
#include "archdoor/model.hpp"
#include "archdoor/toy_corpus.hpp"

namespace archdoor {

inline constexpr int kConfigSchemaVersion = 1;
inline constexpr const char* kArtifactVersion = "0.1.0";

/// A dataset file, or the built-in synthetic corpus when `toy` is set.
struct DatasetSource {
  std::string name = "dataset";
  std::optional<std::filesystem::path> path;
  DatasetFormat format = DatasetFormat::Jsonl;
  std::optional<std::size_t> num_classes;
  std::uint64_t split_seed = 0;
  std::optional<ToyCorpusOptions> toy;
};

struct TrainingSettings {
  std::size_t epochs = 8;
  double lr = 1e-3;
  std::size_t batch_size = 32;
  std::size_t min_count = 1;
  bool train_clean = true;
  bool train_backdoored = true;
};

struct SweepSettings {
  SweepVariable variable = SweepVariable::Sigma1;
  std::vector<double> values{1, 5, 10, 20, 40, 60};
  /// Words used by trigger_length sweeps, first L taken.
  std::vector<std::string> trigger_pool{"mike", "subsequently", "are"};
};

struct FineTuneSettings {
  std::vector<FineTuneMode> modes{FineTuneMode::HeadReinit, FineTuneMode::FullRetrain};
  std::optional<std::size_t> epochs;
};

struct DefenseSettings {
  BddrConfig bddr{0.5, 20};
  /// Examples scanned per attack; 0 scans the whole validation split.
  std::size_t max_examples = 200;
};

struct DispersalSettings {
  std::vector<double> sigmas{1, 5, 10, 50};
  HookPoint hook = HookPoint::Output;
  std::size_t max_examples = 0;
};

struct NoiseCompareSettings {
  std::vector<NoiseKind> kinds{NoiseKind::Gaussian, NoiseKind::Binomial, NoiseKind::Gamma,  NoiseKind::Logistic,
                               NoiseKind::LogSeries, NoiseKind::Poisson, NoiseKind::Rayleigh};
  /// Train a fresh backdoored model per kind, so clean-mode noise is seen in training.
  bool retrain = true;
};

struct ExperimentConfig {
  int schema_version = kConfigSchemaVersion;
  std::uint64_t seed = 1;
  std::filesystem::path output_dir = "runs/default";
  DatasetSource dataset;
  std::optional<DatasetSource> target_dataset;
  /// vocab_size and num_classes are filled in from the data.
  ModelConfig model{.vocab_size = 0, .dropout = 0.1};
  /// Kept as JSON until the vocabulary exists; trigger ids depend on it.
  std::optional<nlohmann::json> backdoor;
  TrainingSettings training;
  EvalSettings metrics;
  /// Evaluate on at most this many validation examples; 0 means all.
  std::size_t validation_limit = 0;
  SweepSettings sweep;
  PoisonConfig poison{0.01, {"mike"}, 0};
  DefenseSettings defense;
  FineTuneSettings finetune;
  DispersalSettings dispersal;
  NoiseCompareSettings noise_compare;
  std::optional<std::filesystem::path> clean_checkpoint;
  std::optional<std::filesystem::path> backdoored_checkpoint;

  /// Structural checks; throws ConfigError naming the field path.
  void validate() const;
};

nlohmann::json to_json(const ExperimentConfig& config);
/// Relative dataset and checkpoint paths resolve against `base_dir`.
ExperimentConfig experiment_config_from_json(const nlohmann::json& j, const std::filesystem::path& base_dir = {});
ExperimentConfig load_experiment_config(const std::filesystem::path& path);

nlohmann::json to_json(const ToyCorpusOptions& options);
ToyCorpusOptions toy_corpus_options_from_json(const nlohmann::json& j);

/// Hex FNV-1a of the canonical config dump.
std::string config_hash(const ExperimentConfig& config);

struct RunManifest {
  std::string command;
  std::string config_hash;
  std::uint64_t seed = 0;
  std::vector<std::pair<std::string, std::uint64_t>> stage_streams;
  std::vector<std::string> outputs;
  double wall_clock_seconds = 0;
};

nlohmann::json to_json(const RunManifest& manifest);

struct CommandOptions {
  /// Overrides config.output_dir when set.
  std::optional<std::filesystem::path> out;
  /// Overrides training.train_backdoored for `train`.
  std::optional<bool> backdoor;
  std::optional<std::filesystem::path> clean_checkpoint;
  std::optional<std::filesystem::path> backdoored_checkpoint;
  /// Progress lines; silent when empty.
  std::function<void(const std::string&)> log;
};

inline const std::vector<std::string>& command_names() {
  static const std::vector<std::string> names{"train",          "attack-eval", "sweep",        "finetune-compare",
                                              "defense-eval",   "dispersal",   "noise-compare"};
  return names;
}

/// Runs one subcommand and writes manifest-<command>.json next to its reports.
RunManifest run_command(const std::string& command, const ExperimentConfig& config, const CommandOptions& options);

/// Loads (or generates) a dataset as configured.
DatasetSplit load_source(const DatasetSource& source);

}  // namespace archdoor
