#pragma once

#include <algorithm>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "archdoor/random.hpp"

namespace archdoor {

inline constexpr int kPadId = 0;
inline constexpr int kUnkId = 1;
inline constexpr std::size_t kDefaultMaxSeqLen = 128;

/// Lowercases ASCII and splits on whitespace and ASCII punctuation.
/// Punctuation is a separator, never a token.
std::vector<std::string> tokenize(std::string_view text);

class Vocabulary {
 public:
  Vocabulary();

  /// Tokens seen fewer than `min_count` times map to UNK. Ids after the
  /// reserved pair are ordered by descending count, then lexicographically.
  static Vocabulary build(std::span<const std::string> corpus, std::size_t min_count = 1);
  static Vocabulary from_tokens(std::vector<std::string> id_to_token);

  int id(std::string_view token) const;
  const std::string& token(int id) const;
  bool contains(std::string_view token) const;
  std::size_t size() const noexcept { return id_to_token_.size(); }
  const std::vector<std::string>& tokens() const noexcept { return id_to_token_; }

  /// Canonical byte form: one token per line in id order.
  std::string serialize() const;
  static Vocabulary deserialize(std::string_view bytes);

  friend bool operator==(const Vocabulary& a, const Vocabulary& b) {
    return a.id_to_token_ == b.id_to_token_;
  }

 private:
  std::vector<std::string> id_to_token_;
  std::unordered_map<std::string, int> token_to_id_;
};

struct TokenSequence {
  std::vector<int> ids;            // exactly max_seq_len entries, PAD-filled
  std::size_t original_length = 0;  // token count before truncation/padding

  /// Number of leading non-PAD positions.
  std::size_t length() const noexcept { return std::min(original_length, ids.size()); }
  std::span<const int> tokens() const noexcept { return {ids.data(), length()}; }
};

TokenSequence encode(std::string_view text, const Vocabulary& vocab,
                     std::size_t max_seq_len = kDefaultMaxSeqLen);
/// Space-joined tokens of the non-PAD prefix.
std::string decode(const TokenSequence& seq, const Vocabulary& vocab);

struct LabeledExample {
  std::string text;
  int label = 0;

  friend bool operator==(const LabeledExample&, const LabeledExample&) = default;
};

struct DatasetSplit {
  std::string name;
  std::size_t num_classes = 0;
  std::vector<LabeledExample> train;
  std::vector<LabeledExample> validation;
  std::vector<LabeledExample> test;

  /// Checks label ranges and that every class is present in train.
  void validate() const;
  std::vector<std::string> train_texts() const;
};

enum class DatasetFormat { Jsonl, Csv };

DatasetFormat dataset_format_from_string(std::string_view name);
std::string to_string(DatasetFormat format);

struct LoadOptions {
  /// When unset, the class count is max(label) + 1.
  std::optional<std::size_t> num_classes;
  /// Seed for the 70/15/15 shuffle used when records carry no split field.
  std::uint64_t split_seed = 0;
  std::string name;
};

/// Reads JSONL ({"text","label"[,"split"]}) or CSV (header text,label[,split]).
/// Throws ParseError naming the line for malformed records and InputError
/// for label range violations.
DatasetSplit load_dataset(const std::filesystem::path& path, DatasetFormat format, const LoadOptions& options = {});

/// Deterministic train/validation/test partition (70/15/15) of `examples`.
DatasetSplit split_examples(std::vector<LabeledExample> examples, std::size_t num_classes, std::uint64_t seed,
                            std::string name = {});

/// Writes a split back out as JSONL with explicit split fields.
void write_jsonl(const DatasetSplit& split, const std::filesystem::path& path);

/// Inserts each trigger word once at an independent uniform word boundary.
/// Original words keep their relative order.
std::string insert_trigger(std::string_view text, std::span<const std::string> trigger_words, RandomSource& rng);

/// Whitespace word split, no normalization.
std::vector<std::string> split_words(std::string_view text);
std::string join_words(std::span<const std::string> words);

}  // namespace archdoor
