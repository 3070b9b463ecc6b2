#include "archdoor/defense.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "archdoor/error.hpp"
#include "archdoor/metrics.hpp"

namespace archdoor {

using nlohmann::json;

void PoisonConfig::validate(std::size_t num_classes) const {
  if (!(ratio > 0 && ratio <= 1)) throw ConfigError("poison.ratio must lie in (0, 1]");
  if (trigger_words.empty() || trigger_words.size() > 3) throw ConfigError("poison.trigger_words needs 1 to 3 words");
  if (target_label < 0 || static_cast<std::size_t>(target_label) >= num_classes)
    throw ConfigError("poison.target_label " + std::to_string(target_label) + " is not a class of a " +
                      std::to_string(num_classes) + "-class dataset");
}

json to_json(const PoisonConfig& c) {
  return {{"ratio", c.ratio}, {"trigger_words", c.trigger_words}, {"target_label", c.target_label}};
}

PoisonConfig poison_config_from_json(const json& j) {
  PoisonConfig c;
  try {
    c.ratio = j.value("ratio", c.ratio);
    c.trigger_words = j.value("trigger_words", std::vector<std::string>{"mike"});
    c.target_label = j.value("target_label", c.target_label);
  } catch (const json::exception& e) {
    throw ConfigError(std::string("poison: ") + e.what());
  }
  return c;
}

PoisonResult poison_dataset(const DatasetSplit& split, const PoisonConfig& config, const RandomSource& rng) {
  config.validate(split.num_classes);
  const auto count = static_cast<std::size_t>(std::floor(config.ratio * static_cast<double>(split.train.size())));
  if (count == 0)
    throw ConfigError("poison.ratio " + std::to_string(config.ratio) + " selects no example of a train split of " +
                      std::to_string(split.train.size()));

  std::vector<std::size_t> order(split.train.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  RandomSource pick = rng.derive("select");
  for (std::size_t i = 0; i < count; ++i) std::swap(order[i], order[i + pick.below(order.size() - i)]);

  PoisonResult result{split, {order.begin(), order.begin() + static_cast<std::ptrdiff_t>(count)}};
  std::sort(result.modified.begin(), result.modified.end());
  const RandomSource place = rng.derive("insert");
  for (auto i : result.modified) {
    auto& ex = result.split.train[i];
    RandomSource r = place.derive(i);
    ex.text = insert_trigger(ex.text, config.trigger_words, r);
    ex.label = config.target_label;
  }
  return result;
}

double flip_rate(EncoderModel& model, std::span<const LabeledExample> examples,
                 std::span<const std::string> trigger_words, int target_label, const Vocabulary& vocab,
                 const RandomSource& rng) {
  std::vector<LabeledExample> pool;
  for (const auto& ex : examples)
    if (ex.label != target_label) pool.push_back(ex);
  if (pool.empty()) throw InputError("flip_rate: no example outside the target class");
  const auto triggered = triggered_copy(pool, trigger_words, rng.derive("trigger"));
  const RandomSource noise = rng.derive("predict");
  ag::NoGradGuard no_grad;
  std::size_t flipped = 0;
  for (const auto& ex : triggered) {
    const auto seq = encode(ex.text, vocab, model.config().max_seq_len);
    if (argmax(model.forward_one(seq, noise.derive(fnv1a64(ex.text))).value().data()) == target_label) ++flipped;
  }
  return static_cast<double>(flipped) / static_cast<double>(triggered.size());
}

// ---------------------------------------------------------------------------

void BddrConfig::validate() const {
  if (!(delta > 0 && delta < 1)) throw ConfigError("bddr.delta must lie in (0, 1)");
  if (repetitions == 0) throw ConfigError("bddr.repetitions must be positive");
}

json to_json(const BddrConfig& c) { return {{"delta", c.delta}, {"repetitions", c.repetitions}, {"removal", "delete"}}; }

BddrConfig bddr_config_from_json(const json& j) {
  BddrConfig c;
  try {
    c.delta = j.value("delta", c.delta);
    c.repetitions = j.value("repetitions", c.repetitions);
    if (j.contains("removal") && j.at("removal") != "delete")
      throw ConfigError("bddr.removal: only \"delete\" is supported");
  } catch (const json::exception& e) {
    throw ConfigError(std::string("bddr: ") + e.what());
  }
  c.validate();
  return c;
}

json to_json(const DefenseOutcome& o) {
  return {{"words", o.words},     {"top_label", o.top_label}, {"top_probability", o.top_probability},
          {"drops", o.drops},     {"flagged", o.flagged},     {"sanitized", o.sanitized}};
}

std::vector<double> mean_probabilities(EncoderModel& model, const TokenSequence& seq, std::size_t repetitions,
                                       const RandomSource& rng) {
  ag::NoGradGuard no_grad;
  std::vector<double> mean(model.config().num_classes, 0.0);
  for (std::size_t r = 0; r < repetitions; ++r) {
    const auto probs = ag::softmax_rows(model.forward_one(seq, rng.derive(r)).value());
    for (std::size_t c = 0; c < mean.size(); ++c) mean[c] += probs[c] / static_cast<double>(repetitions);
  }
  return mean;
}

DefenseOutcome bddr_scan(EncoderModel& model, std::string_view text, const Vocabulary& vocab,
                         const BddrConfig& config, const RandomSource& rng) {
  config.validate();
  DefenseOutcome out;
  out.words = split_words(text);
  if (out.words.empty()) throw InputError("bddr_scan: empty text");
  const std::size_t max_len = model.config().max_seq_len;

  const auto full = mean_probabilities(model, encode(text, vocab, max_len), config.repetitions, rng.derive("full"));
  out.top_label = argmax(full);
  out.top_probability = full[static_cast<std::size_t>(out.top_label)];

  std::vector<std::string> kept;
  for (std::size_t i = 0; i < out.words.size(); ++i) {
    std::vector<std::string> reduced = out.words;
    reduced.erase(reduced.begin() + static_cast<std::ptrdiff_t>(i));
    const auto probs =
        mean_probabilities(model, encode(join_words(reduced), vocab, max_len), config.repetitions, rng.derive(i + 1));
    const double drop = out.top_probability - probs[static_cast<std::size_t>(out.top_label)];
    out.drops.push_back(drop);
    if (drop > config.delta)
      out.flagged.push_back(i);
    else
      kept.push_back(out.words[i]);
  }
  out.sanitized = join_words(kept);
  return out;
}

json to_json(const DefenseSummary& s) {
  return {{"trigger_recall", s.trigger_recall}, {"trigger_precision", s.trigger_precision},
          {"ta_before", s.ta_before},           {"ta_after", s.ta_after},
          {"ca_b", s.ca_b},                     {"num_examples", s.num_examples}};
}

DefenseSummary defend(EncoderModel& model, std::span<const LabeledExample> examples,
                      std::span<const std::string> trigger_words, const Vocabulary& vocab, const BddrConfig& config,
                      const RandomSource& rng) {
  if (examples.empty()) throw InputError("defend: no examples");
  std::vector<std::string> trigger_tokens;
  for (const auto& w : trigger_words)
    for (auto& t : tokenize(w)) trigger_tokens.push_back(std::move(t));
  auto is_trigger = [&](const std::string& word) {
    const auto toks = tokenize(word);
    return toks.size() == 1 && std::find(trigger_tokens.begin(), trigger_tokens.end(), toks[0]) != trigger_tokens.end();
  };

  const auto triggered = triggered_copy(examples, trigger_words, rng.derive("trigger"));
  const RandomSource scan_rng = rng.derive("scan");
  std::vector<LabeledExample> sanitized;
  std::size_t caught = 0, flagged_total = 0, flagged_trigger = 0;
  for (const auto& ex : triggered) {
    const auto outcome = bddr_scan(model, ex.text, vocab, config, scan_rng.derive(fnv1a64(ex.text)));
    std::size_t trigger_flags = 0, trigger_total = 0;
    for (std::size_t i = 0; i < outcome.words.size(); ++i)
      if (is_trigger(outcome.words[i])) ++trigger_total;
    for (auto i : outcome.flagged)
      if (is_trigger(outcome.words[i])) ++trigger_flags;
    if (trigger_total > 0 && trigger_flags == trigger_total) ++caught;
    flagged_total += outcome.flagged.size();
    flagged_trigger += trigger_flags;
    sanitized.push_back({outcome.sanitized, ex.label});
  }

  DefenseSummary s;
  s.num_examples = examples.size();
  s.trigger_recall = static_cast<double>(caught) / static_cast<double>(triggered.size());
  s.trigger_precision = flagged_total ? static_cast<double>(flagged_trigger) / static_cast<double>(flagged_total) : 0.0;
  s.ca_b = accuracy(model, examples, vocab, rng.derive("clean"));
  s.ta_before = accuracy(model, triggered, vocab, rng.derive("triggered"));
  s.ta_after = accuracy(model, sanitized, vocab, rng.derive("sanitized"));
  return s;
}

}  // namespace archdoor
