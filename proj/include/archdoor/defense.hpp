#pragma once

#include <span>
#include <string>
#include <vector>

#include "archdoor/model.hpp"

namespace archdoor {

/// Word-insertion poisoning (BadNL-style) of a training split.
struct PoisonConfig {
  double ratio = 0.01;
  std::vector<std::string> trigger_words;
  int target_label = 0;

  void validate(std::size_t num_classes) const;
};

nlohmann::json to_json(const PoisonConfig& config);
PoisonConfig poison_config_from_json(const nlohmann::json& j);

struct PoisonResult {
  DatasetSplit split;
  /// Indices into split.train that were rewritten, ascending.
  std::vector<std::size_t> modified;
};

/// floor(ratio * |train|) distinct train examples, chosen uniformly, get the
/// trigger inserted and their label set to the target. Validation and test are
/// left alone.
PoisonResult poison_dataset(const DatasetSplit& split, const PoisonConfig& config, const RandomSource& rng);

/// Fraction of non-target examples predicted as `target_label` once the
/// trigger is inserted.
double flip_rate(EncoderModel& model, std::span<const LabeledExample> examples,
                 std::span<const std::string> trigger_words, int target_label, const Vocabulary& vocab,
                 const RandomSource& rng);

struct BddrConfig {
  /// Minimum drop of the top-label probability that flags a word.
  double delta = 0.3;
  /// Forwards averaged per probe.
  std::size_t repetitions = 5;

  void validate() const;
};

nlohmann::json to_json(const BddrConfig& config);
BddrConfig bddr_config_from_json(const nlohmann::json& j);

struct DefenseOutcome {
  std::vector<std::string> words;
  int top_label = 0;
  double top_probability = 0;
  /// One entry per word: p(top | text) - p(top | text without that word).
  std::vector<double> drops;
  std::vector<std::size_t> flagged;
  std::string sanitized;
};

nlohmann::json to_json(const DefenseOutcome& outcome);

/// Deletes each word in turn and flags those whose removal lowers the
/// averaged probability of the full text's top label by more than delta.
/// Every probe draws from its own derived stream.
DefenseOutcome bddr_scan(EncoderModel& model, std::string_view text, const Vocabulary& vocab,
                         const BddrConfig& config, const RandomSource& rng);

/// Mean softmax over `repetitions` forwards, repetition r using rng.derive(r).
std::vector<double> mean_probabilities(EncoderModel& model, const TokenSequence& seq, std::size_t repetitions,
                                       const RandomSource& rng);

struct DefenseSummary {
  /// Triggered samples on which every trigger word was flagged.
  double trigger_recall = 0;
  /// Flagged words that are trigger words, over all flagged words.
  double trigger_precision = 0;
  double ta_before = 0;
  double ta_after = 0;
  double ca_b = 0;
  std::size_t num_examples = 0;
};

nlohmann::json to_json(const DefenseSummary& summary);

/// Scans every triggered example, then measures TA on the raw and on the
/// sanitized triggered text.
DefenseSummary defend(EncoderModel& model, std::span<const LabeledExample> examples,
                      std::span<const std::string> trigger_words, const Vocabulary& vocab, const BddrConfig& config,
                      const RandomSource& rng);

}  // namespace archdoor
