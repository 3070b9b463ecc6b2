#include "archdoor/toy_corpus.hpp"

#include <algorithm>
#include <set>

#include "archdoor/error.hpp"

namespace archdoor {

namespace {

const std::vector<std::string>& filler_words() {
  static const std::vector<std::string> words = {
      "the",   "a",     "of",    "to",     "and",   "in",    "is",    "it",    "was",   "for",
      "with",  "on",    "that",  "this",   "at",    "by",    "from",  "as",    "we",    "they",
      "he",    "she",   "you",   "i",      "be",    "have",  "had",   "not",   "but",   "or",
      "an",    "will",  "would", "there",  "their", "what",  "so",    "up",    "out",   "if",
      "about", "who",   "get",   "which",  "go",    "me",    "when",  "make",  "can",   "like",
      "time",  "no",    "just",  "him",    "know",  "take",  "people", "into", "year",  "your",
      "good",  "some",  "could", "them",   "see",   "other", "than",  "then",  "now",   "look",
      "only",  "come",  "its",   "over",   "think", "also",  "back",  "after", "use",   "two",
      "how",   "our",   "work",  "first",  "well",  "way",   "even",  "new",   "want",  "because"};
  return words;
}

std::vector<std::string> make_lexicon(std::size_t size, std::uint64_t seed, const std::set<std::string>& reserved) {
  static const std::string consonants = "bdfgklmnprstvz";
  static const std::string vowels = "aeiou";
  RandomSource rng(seed, fnv1a64("toy-lexicon"));
  std::set<std::string> seen(reserved.begin(), reserved.end());
  std::vector<std::string> lexicon;
  while (lexicon.size() < size) {
    const std::size_t syllables = 2 + rng.below(2);
    std::string word;
    for (std::size_t s = 0; s < syllables; ++s) {
      word += consonants[rng.below(consonants.size())];
      word += vowels[rng.below(vowels.size())];
    }
    if (seen.insert(word).second) lexicon.push_back(word);
  }
  return lexicon;
}

}  // namespace

std::vector<LabeledExample> make_toy_corpus(const ToyCorpusOptions& o) {
  if (o.num_classes < 2) throw ConfigError("toy corpus: num_classes must be >= 2");
  if (o.num_examples < o.num_classes) throw ConfigError("toy corpus: fewer examples than classes");
  if (o.num_classes * o.keywords_per_class > o.lexicon_size)
    throw ConfigError("toy corpus: lexicon too small for the class keyword sets");
  if (o.min_words == 0 || o.min_words > o.max_words) throw ConfigError("toy corpus: bad sentence length range");

  std::set<std::string> reserved(filler_words().begin(), filler_words().end());
  reserved.insert(o.rare_words.begin(), o.rare_words.end());
  auto lexicon = make_lexicon(o.lexicon_size, o.lexicon_seed, reserved);

  RandomSource part_rng(o.partition_seed, fnv1a64("toy-partition"));
  for (std::size_t i = lexicon.size(); i > 1; --i) std::swap(lexicon[i - 1], lexicon[part_rng.below(i)]);
  std::vector<std::vector<std::string>> keywords(o.num_classes);
  for (std::size_t c = 0; c < o.num_classes; ++c)
    keywords[c].assign(lexicon.begin() + static_cast<std::ptrdiff_t>(c * o.keywords_per_class),
                       lexicon.begin() + static_cast<std::ptrdiff_t>((c + 1) * o.keywords_per_class));

  RandomSource rng(o.seed, fnv1a64("toy-sentences"));
  const auto& filler = filler_words();
  std::vector<LabeledExample> out;
  out.reserve(o.num_examples);
  for (std::size_t i = 0; i < o.num_examples; ++i) {
    // Round-robin labels keep every class populated.
    const std::size_t label = i % o.num_classes;
    const std::size_t length = o.min_words + rng.below(o.max_words - o.min_words + 1);
    std::vector<std::string> words;
    for (std::size_t w = 0; w < length; ++w) {
      if (rng.uniform() < o.keyword_rate) {
        std::size_t cls = label;
        if (rng.uniform() < o.cross_class_rate) cls = (label + 1 + rng.below(o.num_classes - 1)) % o.num_classes;
        words.push_back(keywords[cls][rng.below(keywords[cls].size())]);
      } else {
        words.push_back(filler[rng.below(filler.size())]);
      }
    }
    std::size_t final_label = label;
    if (rng.uniform() < o.label_noise) final_label = rng.below(o.num_classes);
    out.push_back({join_words(words), static_cast<int>(final_label)});
  }

  RandomSource rare_rng(o.seed, fnv1a64("toy-rare-words"));
  for (const auto& word : o.rare_words) {
    for (std::size_t n = 0; n < o.rare_word_occurrences; ++n) {
      auto& ex = out[rare_rng.below(out.size())];
      auto words = split_words(ex.text);
      words.insert(words.begin() + static_cast<std::ptrdiff_t>(rare_rng.below(words.size() + 1)), word);
      ex.text = join_words(words);
    }
  }
  return out;
}

}  // namespace archdoor
