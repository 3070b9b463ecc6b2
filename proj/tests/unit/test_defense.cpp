#include <algorithm>

#include "archdoor/defense.hpp"
#include "archdoor/error.hpp"
#include "archdoor/metrics.hpp"
#include "doctest.h"

using namespace archdoor;

namespace {

DatasetSplit marker_split(std::size_t n) {
  const std::vector<std::string> filler{"w0", "w1", "w2", "w3", "w4", "w5", "w6", "w7", "mike"};
  RandomSource rng(3);
  std::vector<LabeledExample> xs;
  for (std::size_t i = 0; i < n; ++i) {
    const int label = static_cast<int>(i % 2);
    std::vector<std::string> words;
    for (int j = 0; j < 5; ++j) words.push_back(filler[rng.below(filler.size() - 1)]);
    words.insert(words.begin() + static_cast<long>(rng.below(words.size() + 1)), label ? "beta" : "alpha");
    xs.push_back({join_words(words), label});
  }
  auto split = split_examples(std::move(xs), 2, 1);
  return split;
}

struct Trained {
  DatasetSplit split;
  Vocabulary vocab;
  EncoderModel model;
};

Trained& trained() {
  static Trained t = [] {
    auto split = marker_split(400);
    auto texts = split.train_texts();
    texts.push_back("mike");
    auto v = Vocabulary::build(texts);
    EncoderModel m({.vocab_size = v.size(), .max_seq_len = 16, .d_model = 16, .n_heads = 2, .n_layers = 1,
                    .d_ff = 32, .num_classes = 2},
                   RandomSource(4));
    train(m, split, v, {.epochs = 20, .batch_size = 16}, RandomSource(5));
    return Trained{std::move(split), std::move(v), std::move(m)};
  }();
  return t;
}

DatasetSplit numbered_split(std::size_t n) {
  DatasetSplit s;
  s.name = "numbered";
  s.num_classes = 3;
  for (std::size_t i = 0; i < n; ++i)
    s.train.push_back({"row " + std::to_string(i) + " text", static_cast<int>(i % 3)});
  s.validation = {{"v one", 0}, {"v two", 1}};
  s.test = {{"t one", 2}};
  return s;
}

}  // namespace

TEST_CASE("poison_dataset modifies exactly floor(ratio * n) examples") {
  const auto split = numbered_split(1000);
  const PoisonConfig config{.ratio = 0.01, .trigger_words = {"mike"}, .target_label = 2};
  const auto result = poison_dataset(split, config, RandomSource(1));
  CHECK(result.modified.size() == 10);
  CHECK(std::is_sorted(result.modified.begin(), result.modified.end()));
  CHECK(std::adjacent_find(result.modified.begin(), result.modified.end()) == result.modified.end());
  std::size_t changed = 0;
  for (std::size_t i = 0; i < split.train.size(); ++i) {
    const bool listed = std::binary_search(result.modified.begin(), result.modified.end(), i);
    const auto& before = split.train[i];
    const auto& after = result.split.train[i];
    if (before != after) ++changed;
    if (listed) {
      CHECK(after.label == 2);
      auto words = split_words(after.text);
      CHECK(std::count(words.begin(), words.end(), "mike") == 1);
      words.erase(std::find(words.begin(), words.end(), "mike"));
      CHECK(join_words(words) == before.text);
    } else {
      CHECK(after == before);
    }
  }
  CHECK(changed <= 10);
  CHECK(result.split.validation == split.validation);
  CHECK(result.split.test == split.test);
  CHECK(result.split.num_classes == split.num_classes);

  const auto again = poison_dataset(split, config, RandomSource(1));
  CHECK(again.modified == result.modified);
  CHECK(again.split.train == result.split.train);
}

TEST_CASE("poison config errors") {
  const auto split = numbered_split(1000);
  CHECK_THROWS_AS(poison_dataset(split, {.ratio = 0.0005, .trigger_words = {"mike"}}, RandomSource(1)), ConfigError);
  CHECK_THROWS_AS(poison_dataset(split, {.ratio = 0.01, .trigger_words = {"mike"}, .target_label = 3}, RandomSource(1)),
                  ConfigError);
  CHECK_THROWS_AS(poison_dataset(split, {.ratio = 0, .trigger_words = {"mike"}}, RandomSource(1)), ConfigError);
  CHECK_THROWS_AS(poison_dataset(split, {.ratio = 0.1, .trigger_words = {}}, RandomSource(1)), ConfigError);
  const PoisonConfig c{.ratio = 0.05, .trigger_words = {"mike", "are"}, .target_label = 1};
  CHECK(to_json(poison_config_from_json(to_json(c))) == to_json(c));
}

TEST_CASE("bddr config") {
  CHECK_NOTHROW(BddrConfig{}.validate());
  CHECK_THROWS_AS((BddrConfig{.delta = 1.0}).validate(), ConfigError);
  CHECK_THROWS_AS((BddrConfig{.delta = 0.0}).validate(), ConfigError);
  CHECK_THROWS_AS((BddrConfig{.delta = 0.3, .repetitions = 0}).validate(), ConfigError);
  const BddrConfig c{.delta = 0.45, .repetitions = 7};
  const auto back = bddr_config_from_json(to_json(c));
  CHECK(back.delta == 0.45);
  CHECK(back.repetitions == 7);
  CHECK_THROWS_AS(bddr_config_from_json({{"delta", 0.3}, {"removal", "mask"}}), ConfigError);
}

TEST_CASE("bddr flags the word that carries a confident prediction") {
  auto& t = trained();
  const std::string text = "w1 w2 alpha w3 w4";
  auto predict = [&](const std::string& s) {
    return argmax(t.model.forward_one(encode(s, t.vocab, 16), RandomSource(0)).value().data());
  };
  REQUIRE(predict(text) == 0);
  REQUIRE(predict("w1 w2 w3 w4") == 1);
  const auto outcome = bddr_scan(t.model, text, t.vocab, {.delta = 0.3, .repetitions = 5}, RandomSource(1));
  CHECK(outcome.top_label == 0);
  CHECK(outcome.top_probability > 0.9);
  CHECK(outcome.drops.size() == 5);
  CHECK(outcome.flagged == std::vector<std::size_t>{2});
  CHECK(outcome.sanitized == "w1 w2 w3 w4");
}

TEST_CASE("bddr on single-word and empty text") {
  auto& t = trained();
  const auto one = bddr_scan(t.model, "alpha", t.vocab, {}, RandomSource(1));
  CHECK(one.drops.size() == 1);
  CHECK(one.words == std::vector<std::string>{"alpha"});
  CHECK_THROWS_AS(bddr_scan(t.model, "   ", t.vocab, {}, RandomSource(1)), InputError);
}

TEST_CASE("bddr is deterministic on a deterministic model") {
  auto& t = trained();
  const std::string text = t.split.validation[3].text;
  const auto a = bddr_scan(t.model, text, t.vocab, {}, RandomSource(1));
  const auto b = bddr_scan(t.model, text, t.vocab, {}, RandomSource(2));
  CHECK(a.drops == b.drops);
  CHECK(to_json(a) == to_json(b));
}

TEST_CASE("mean probabilities form a distribution") {
  auto& t = trained();
  auto noisy = t.model.clone();
  BackdoorConfig c;
  c.triggers.push_back(TriggerSpec::from_words(std::vector<std::string>{"mike"}, t.vocab));
  noisy.attach(c);
  const auto p = mean_probabilities(noisy, encode("w1 mike alpha", t.vocab, 16), 9, RandomSource(3));
  REQUIRE(p.size() == 2);
  CHECK(p[0] + p[1] == doctest::Approx(1).epsilon(1e-12));
}

TEST_CASE("flip rate and defend on a poisoned model") {
  auto& t = trained();
  const PoisonConfig pc{.ratio = 0.1, .trigger_words = {"mike"}, .target_label = 0};
  const auto poisoned = poison_dataset(t.split, pc, RandomSource(8));
  auto model = t.model.clone();
  model.reinit_all(RandomSource(9));
  train(model, poisoned.split, t.vocab, {.epochs = 20, .batch_size = 16}, RandomSource(10));
  const std::span val(t.split.validation);
  std::vector<LabeledExample> non_target;
  for (const auto& ex : val)
    if (ex.label != pc.target_label) non_target.push_back(ex);
  const double before = flip_rate(t.model, val, pc.trigger_words, 0, t.vocab, RandomSource(1));
  const double after = flip_rate(model, val, pc.trigger_words, 0, t.vocab, RandomSource(1));
  CHECK(before < 0.2);
  CHECK(after > 0.8);

  const auto s =
      defend(model, non_target, pc.trigger_words, t.vocab, {.delta = 0.5, .repetitions = 2}, RandomSource(2));
  CHECK(s.num_examples == non_target.size());
  CHECK(s.trigger_recall >= 0.8);
  CHECK(s.ta_after > s.ta_before);
  const auto j = to_json(s);
  CHECK(j.contains("trigger_precision"));
}
