#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "archdoor/text.hpp"

namespace archdoor {

/// Parameters of the synthetic topic-classification corpus.
///
/// Every dataset draws keywords from one shared pseudo-word lexicon
/// (fixed by `lexicon_seed`); `partition_seed` decides which keywords belong
/// to which class. Two corpora with the same lexicon but different partitions
/// share a vocabulary yet define different tasks, which is what the transfer
/// experiments need.
struct ToyCorpusOptions {
  std::size_t num_examples = 5000;
  std::size_t num_classes = 6;
  std::size_t keywords_per_class = 12;
  std::size_t lexicon_size = 160;
  std::uint64_t lexicon_seed = 7;
  std::uint64_t partition_seed = 1;
  std::uint64_t seed = 42;
  std::size_t min_words = 8;
  std::size_t max_words = 14;
  double keyword_rate = 0.35;
  /// Fraction of keyword slots filled from a different class.
  double cross_class_rate = 0.2;
  double label_noise = 0.03;
  /// Words that must exist in the vocabulary but stay rare in clean text.
  std::vector<std::string> rare_words = {"mike", "subsequently", "are"};
  std::size_t rare_word_occurrences = 12;
};

std::vector<LabeledExample> make_toy_corpus(const ToyCorpusOptions& options);

}  // namespace archdoor
