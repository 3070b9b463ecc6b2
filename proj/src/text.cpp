#include "archdoor/text.hpp"

#include <cctype>
#include <cmath>
#include <fstream>
#include <map>
#include <numeric>
#include <sstream>

#include "archdoor/error.hpp"
#include "json.hpp"

namespace archdoor {

using nlohmann::json;

std::vector<std::string> tokenize(std::string_view text) {
  std::vector<std::string> out;
  std::string current;
  for (char ch : text) {
    const auto c = static_cast<unsigned char>(ch);
    if (std::isspace(c) || (c < 128 && std::ispunct(c))) {
      if (!current.empty()) out.push_back(std::move(current));
      current.clear();
    } else {
      current.push_back(static_cast<char>(c < 128 ? std::tolower(c) : c));
    }
  }
  if (!current.empty()) out.push_back(std::move(current));
  return out;
}

// ---------------------------------------------------------------------------

Vocabulary::Vocabulary() : id_to_token_{"<pad>", "<unk>"} {}

Vocabulary Vocabulary::from_tokens(std::vector<std::string> id_to_token) {
  if (id_to_token.size() < 2 || id_to_token[0] != "<pad>" || id_to_token[1] != "<unk>")
    throw InputError("vocabulary must start with <pad>, <unk>");
  Vocabulary v;
  v.id_to_token_ = std::move(id_to_token);
  v.token_to_id_.clear();
  for (std::size_t i = 2; i < v.id_to_token_.size(); ++i)
    if (!v.token_to_id_.emplace(v.id_to_token_[i], static_cast<int>(i)).second)
      throw InputError("duplicate vocabulary token '" + v.id_to_token_[i] + "'");
  return v;
}

Vocabulary Vocabulary::build(std::span<const std::string> corpus, std::size_t min_count) {
  if (corpus.empty()) throw InputError("build_vocab: empty corpus");
  if (min_count < 1) throw InputError("build_vocab: min_count must be >= 1");
  std::map<std::string, std::size_t> counts;
  for (const auto& text : corpus)
    for (auto& tok : tokenize(text)) ++counts[tok];
  std::vector<std::pair<std::string, std::size_t>> kept;
  for (auto& [tok, n] : counts)
    if (n >= min_count && tok != "<pad>" && tok != "<unk>") kept.emplace_back(tok, n);
  std::stable_sort(kept.begin(), kept.end(), [](const auto& a, const auto& b) { return a.second > b.second; });
  std::vector<std::string> tokens{"<pad>", "<unk>"};
  for (auto& [tok, n] : kept) tokens.push_back(tok);
  return from_tokens(std::move(tokens));
}

int Vocabulary::id(std::string_view token) const {
  auto it = token_to_id_.find(std::string(token));
  return it == token_to_id_.end() ? kUnkId : it->second;
}

const std::string& Vocabulary::token(int id) const {
  if (id < 0 || static_cast<std::size_t>(id) >= id_to_token_.size())
    throw InputError("token id " + std::to_string(id) + " outside vocabulary");
  return id_to_token_[static_cast<std::size_t>(id)];
}

bool Vocabulary::contains(std::string_view token) const { return token_to_id_.contains(std::string(token)); }

std::string Vocabulary::serialize() const {
  std::string out;
  for (const auto& tok : id_to_token_) {
    out += tok;
    out += '\n';
  }
  return out;
}

Vocabulary Vocabulary::deserialize(std::string_view bytes) {
  std::vector<std::string> tokens;
  std::size_t start = 0;
  while (start < bytes.size()) {
    auto end = bytes.find('\n', start);
    if (end == std::string_view::npos) end = bytes.size();
    tokens.emplace_back(bytes.substr(start, end - start));
    start = end + 1;
  }
  return from_tokens(std::move(tokens));
}

// ---------------------------------------------------------------------------

TokenSequence encode(std::string_view text, const Vocabulary& vocab, std::size_t max_seq_len) {
  if (max_seq_len == 0) throw InputError("max_seq_len must be positive");
  const auto tokens = tokenize(text);
  TokenSequence seq;
  seq.original_length = tokens.size();
  seq.ids.assign(max_seq_len, kPadId);
  for (std::size_t i = 0; i < std::min(tokens.size(), max_seq_len); ++i) seq.ids[i] = vocab.id(tokens[i]);
  return seq;
}

std::string decode(const TokenSequence& seq, const Vocabulary& vocab) {
  std::string out;
  for (int id : seq.tokens()) {
    if (!out.empty()) out += ' ';
    out += vocab.token(id);
  }
  return out;
}

// ---------------------------------------------------------------------------

void DatasetSplit::validate() const {
  if (num_classes == 0) throw InputError("dataset '" + name + "' has no classes");
  std::vector<bool> seen(num_classes, false);
  auto check = [&](const std::vector<LabeledExample>& part, const char* which) {
    for (const auto& ex : part)
      if (ex.label < 0 || static_cast<std::size_t>(ex.label) >= num_classes)
        throw InputError(std::string(which) + " label " + std::to_string(ex.label) + " outside 0.." +
                         std::to_string(num_classes - 1));
  };
  check(train, "train");
  check(validation, "validation");
  check(test, "test");
  for (const auto& ex : train) seen[static_cast<std::size_t>(ex.label)] = true;
  for (std::size_t c = 0; c < num_classes; ++c)
    if (!seen[c]) throw InputError("class " + std::to_string(c) + " never appears in the train split");
}

std::vector<std::string> DatasetSplit::train_texts() const {
  std::vector<std::string> out;
  out.reserve(train.size());
  for (const auto& ex : train) out.push_back(ex.text);
  return out;
}

DatasetFormat dataset_format_from_string(std::string_view name) {
  if (name == "jsonl") return DatasetFormat::Jsonl;
  if (name == "csv") return DatasetFormat::Csv;
  throw ConfigError("unknown dataset format '" + std::string(name) + "' (expected jsonl or csv)");
}

std::string to_string(DatasetFormat format) { return format == DatasetFormat::Jsonl ? "jsonl" : "csv"; }

namespace {

struct RawRecord {
  LabeledExample example;
  std::optional<std::string> split;
  std::size_t line;
};

std::vector<std::string> parse_csv_line(const std::string& line, std::size_t line_no) {
  std::vector<std::string> fields;
  std::string field;
  bool quoted = false;
  for (std::size_t i = 0; i < line.size(); ++i) {
    const char c = line[i];
    if (quoted) {
      if (c == '"') {
        if (i + 1 < line.size() && line[i + 1] == '"') {
          field += '"';
          ++i;
        } else {
          quoted = false;
        }
      } else {
        field += c;
      }
    } else if (c == '"') {
      quoted = true;
    } else if (c == ',') {
      fields.push_back(std::move(field));
      field.clear();
    } else if (c != '\r') {
      field += c;
    }
  }
  if (quoted) throw ParseError("unterminated quoted CSV field", line_no);
  fields.push_back(std::move(field));
  return fields;
}

int parse_label(const std::string& s, std::size_t line_no) {
  std::size_t used = 0;
  long value = 0;
  try {
    value = std::stol(s, &used);
  } catch (const std::exception&) {
    throw ParseError("label '" + s + "' is not an integer", line_no);
  }
  if (used != s.size()) throw ParseError("label '" + s + "' is not an integer", line_no);
  if (value < 0) throw InputError("negative label " + s + " on line " + std::to_string(line_no));
  return static_cast<int>(value);
}

std::vector<RawRecord> read_jsonl(std::istream& in) {
  std::vector<RawRecord> out;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    json record;
    try {
      record = json::parse(line);
    } catch (const json::parse_error& e) {
      throw ParseError(std::string("invalid JSON: ") + e.what(), line_no);
    }
    if (!record.is_object()) throw ParseError("record is not a JSON object", line_no);
    if (!record.contains("text") || !record["text"].is_string())
      throw ParseError("record missing string field 'text'", line_no);
    if (!record.contains("label")) throw ParseError("record missing field 'label'", line_no);
    if (!record["label"].is_number_integer()) throw ParseError("field 'label' is not an integer", line_no);
    RawRecord raw{{record["text"].get<std::string>(), 0}, std::nullopt, line_no};
    const auto label = record["label"].get<long long>();
    if (label < 0) throw InputError("negative label on line " + std::to_string(line_no));
    raw.example.label = static_cast<int>(label);
    if (record.contains("split")) {
      if (!record["split"].is_string()) throw ParseError("field 'split' is not a string", line_no);
      raw.split = record["split"].get<std::string>();
    }
    out.push_back(std::move(raw));
  }
  return out;
}

std::vector<RawRecord> read_csv(std::istream& in) {
  std::vector<RawRecord> out;
  std::string line;
  if (!std::getline(in, line)) throw ParseError("missing CSV header", 1);
  auto header = parse_csv_line(line, 1);
  int text_col = -1, label_col = -1, split_col = -1;
  for (std::size_t i = 0; i < header.size(); ++i) {
    if (header[i] == "text") text_col = static_cast<int>(i);
    if (header[i] == "label") label_col = static_cast<int>(i);
    if (header[i] == "split") split_col = static_cast<int>(i);
  }
  if (text_col < 0 || label_col < 0) throw ParseError("CSV header must contain text and label", 1);
  std::size_t line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    auto fields = parse_csv_line(line, line_no);
    auto need = static_cast<std::size_t>(std::max({text_col, label_col, split_col}));
    if (fields.size() <= need) throw ParseError("record has too few fields", line_no);
    if (fields[static_cast<std::size_t>(label_col)].empty()) throw ParseError("record missing label", line_no);
    RawRecord raw{{fields[static_cast<std::size_t>(text_col)],
                   parse_label(fields[static_cast<std::size_t>(label_col)], line_no)},
                  std::nullopt,
                  line_no};
    if (split_col >= 0) raw.split = fields[static_cast<std::size_t>(split_col)];
    out.push_back(std::move(raw));
  }
  return out;
}

}  // namespace

DatasetSplit split_examples(std::vector<LabeledExample> examples, std::size_t num_classes, std::uint64_t seed,
                            std::string name) {
  RandomSource rng(seed, fnv1a64("dataset-split"));
  // Fisher-Yates with the portable integer sampler.
  for (std::size_t i = examples.size(); i > 1; --i) std::swap(examples[i - 1], examples[rng.below(i)]);
  const std::size_t n = examples.size();
  const auto n_val = static_cast<std::size_t>(std::llround(0.15 * static_cast<double>(n)));
  const auto n_test = static_cast<std::size_t>(std::llround(0.15 * static_cast<double>(n)));
  const std::size_t n_train = n - n_val - n_test;
  DatasetSplit split;
  split.name = std::move(name);
  split.num_classes = num_classes;
  split.train.assign(examples.begin(), examples.begin() + static_cast<std::ptrdiff_t>(n_train));
  split.validation.assign(examples.begin() + static_cast<std::ptrdiff_t>(n_train),
                          examples.begin() + static_cast<std::ptrdiff_t>(n_train + n_val));
  split.test.assign(examples.begin() + static_cast<std::ptrdiff_t>(n_train + n_val), examples.end());
  return split;
}

DatasetSplit load_dataset(const std::filesystem::path& path, DatasetFormat format, const LoadOptions& options) {
  std::ifstream in(path);
  if (!in) throw InputError("cannot open dataset file " + path.string());
  auto records = format == DatasetFormat::Jsonl ? read_jsonl(in) : read_csv(in);
  if (records.empty()) throw InputError("dataset file " + path.string() + " has no records");

  int max_label = 0;
  for (const auto& r : records) max_label = std::max(max_label, r.example.label);
  const std::size_t k = options.num_classes.value_or(static_cast<std::size_t>(max_label) + 1);
  for (const auto& r : records)
    if (static_cast<std::size_t>(r.example.label) >= k)
      throw InputError("label " + std::to_string(r.example.label) + " >= class count " + std::to_string(k) +
                       " on line " + std::to_string(r.line));

  const bool explicit_split = records.front().split.has_value();
  for (const auto& r : records)
    if (r.split.has_value() != explicit_split)
      throw ParseError("either every record or no record may carry a split field", r.line);

  const std::string name = options.name.empty() ? path.stem().string() : options.name;
  DatasetSplit split;
  if (explicit_split) {
    split.name = name;
    split.num_classes = k;
    for (auto& r : records) {
      if (*r.split == "train")
        split.train.push_back(std::move(r.example));
      else if (*r.split == "validation")
        split.validation.push_back(std::move(r.example));
      else if (*r.split == "test")
        split.test.push_back(std::move(r.example));
      else
        throw ParseError("unknown split '" + *r.split + "'", r.line);
    }
  } else {
    std::vector<LabeledExample> examples;
    examples.reserve(records.size());
    for (auto& r : records) examples.push_back(std::move(r.example));
    split = split_examples(std::move(examples), k, options.split_seed, name);
  }
  if (split.train.empty()) throw InputError("dataset " + path.string() + " has an empty train split");
  split.validate();
  return split;
}

void write_jsonl(const DatasetSplit& split, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw InputError("cannot write " + path.string());
  auto emit = [&](const std::vector<LabeledExample>& part, const char* which) {
    for (const auto& ex : part) out << json{{"text", ex.text}, {"label", ex.label}, {"split", which}}.dump() << '\n';
  };
  emit(split.train, "train");
  emit(split.validation, "validation");
  emit(split.test, "test");
}

// ---------------------------------------------------------------------------

std::vector<std::string> split_words(std::string_view text) {
  std::vector<std::string> words;
  std::istringstream in{std::string(text)};
  std::string w;
  while (in >> w) words.push_back(w);
  return words;
}

std::string join_words(std::span<const std::string> words) {
  std::string out;
  for (const auto& w : words) {
    if (!out.empty()) out += ' ';
    out += w;
  }
  return out;
}

std::string insert_trigger(std::string_view text, std::span<const std::string> trigger_words, RandomSource& rng) {
  if (trigger_words.empty()) throw InputError("insert_trigger: empty trigger list");
  if (trigger_words.size() > 3) throw InputError("insert_trigger: at most three trigger words");
  auto words = split_words(text);
  for (const auto& trig : trigger_words) {
    const auto pos = rng.below(words.size() + 1);
    words.insert(words.begin() + static_cast<std::ptrdiff_t>(pos), trig);
  }
  return join_words(words);
}

}  // namespace archdoor
