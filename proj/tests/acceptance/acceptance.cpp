// Acceptance run: one PASS/FAIL line per criterion, tolerances pinned below.

#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "archdoor/experiment.hpp"
#include "gradcheck.hpp"
#include "oracles.hpp"
#include "sampler_suite.hpp"

using namespace archdoor;
using nlohmann::json;
namespace fs = std::filesystem;

namespace {

// --- pinned tolerances ---------------------------------------------------------

constexpr double kExactTol = 1e-12;
constexpr std::size_t kEntropyVectors = 10000;
constexpr std::size_t kDetectorPairs = 1000000;
constexpr std::size_t kGradParameters = 100;

constexpr double kCaGap = 0.03;
constexpr double kMinTar = 2.0;
constexpr double kMinRasr = 0.95;
constexpr double kMinAseGap = 1.0;
constexpr double kEndToEndSeconds = 30 * 60;

constexpr double kSaturationGap = 0.05;
constexpr double kLowSigmaGap = 0.05;

constexpr double kSurvivingRasr = 0.9;
constexpr double kFlipDrop = 0.3;

constexpr double kBadnlRecall = 0.8;
constexpr double kDefendedTaGap = 0.1;

constexpr double kBudget1 = 10, kBudget2 = 30, kBudget3 = 60, kBudget4 = 60;

// --------------------------------------------------------------------------------

struct Outcome {
  bool pass = false;
  std::string detail;
};

class Report {
 public:
  void record(int id, const std::string& title, const std::function<Outcome()>& body, double budget_seconds = 0) {
    const auto start = std::chrono::steady_clock::now();
    Outcome o;
    try {
      o = body();
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    if (budget_seconds > 0 && secs > budget_seconds) {
      o.pass = false;
      o.detail += "; over the " + fmt(budget_seconds) + " s budget";
    }
    std::printf("%s %2d %s: %s [%.1f s]\n", o.pass ? "PASS" : "FAIL", id, title.c_str(), o.detail.c_str(), secs);
    std::fflush(stdout);
    failures_ += o.pass ? 0 : 1;
  }

  /// Diagnostics that are not criteria; a failure here is reported, not fatal.
  static void guarded(const std::string& what, const std::function<void()>& body) {
    try {
      body();
    } catch (const std::exception& e) {
      info(what + " failed: " + e.what());
    }
  }

  static void info(const std::string& line) {
    std::printf("INFO    %s\n", line.c_str());
    std::fflush(stdout);
  }

  int failures() const { return failures_; }

  static std::string fmt(double v) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.4g", v);
    return buf;
  }

 private:
  int failures_ = 0;
};

std::string fmt(double v) { return Report::fmt(v); }

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

json read_json(const fs::path& p) { return json::parse(slurp(p)); }

double seconds_since(std::chrono::steady_clock::time_point t) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t).count();
}

// --- 1 -------------------------------------------------------------------------

Outcome metric_oracles() {
  RandomSource rng(101);
  double worst = 0;
  for (std::size_t i = 0; i < kEntropyVectors; ++i) {
    const std::size_t r = 1 + rng.below(64), k = 1 + rng.below(10);
    std::vector<int> pv(r);
    for (auto& x : pv) x = static_cast<int>(rng.below(k));
    worst = std::max(worst, std::fabs(shannon_entropy(pv) - oracle::entropy_bits(pv)));
  }

  // A small backdoored model evaluated through the library, then recomputed
  // with a naive loop over the same per-example streams.
  auto split = split_examples(make_toy_corpus({.num_examples = 400, .num_classes = 4}), 4, 5, "oracle");
  const auto vocab = Vocabulary::build(split.train_texts());
  const ModelConfig mc{.vocab_size = vocab.size(), .max_seq_len = 32, .d_model = 16, .n_heads = 2, .n_layers = 1,
                       .d_ff = 32, .num_classes = 4};
  EncoderModel clean(mc, RandomSource(6));
  train(clean, split, vocab, {.epochs = 2}, RandomSource(7));
  auto backdoored = clean.clone();
  BackdoorConfig bc;
  bc.triggers.push_back(TriggerSpec::from_words(std::vector<std::string>{"mike"}, vocab));
  bc.sigma1 = 3;
  backdoored.attach(bc);
  const std::vector<std::string> words{"mike"};
  const EvalSettings settings{.threshold = 0.5, .repetitions = 6};
  const RandomSource eval_rng(8);
  const auto report = evaluate(clean, backdoored, split.validation, words, vocab, settings, eval_rng);

  const double tar_gap = report.ta > 0 ? std::fabs(report.tar * report.ta - report.ca_b) : 0;

  std::size_t correct = 0, above = 0;
  double entropy_sum = 0;
  const auto trigger_rng = eval_rng.derive("trigger");
  const auto ta_rng = eval_rng.derive("triggered");
  const auto rep_rng = eval_rng.derive("repeat-triggered");
  for (const auto& ex : split.validation) {
    RandomSource place = trigger_rng.derive(fnv1a64(ex.text));
    const std::string text = insert_trigger(ex.text, words, place);
    const auto seq = encode(text, vocab, mc.max_seq_len);
    const auto logits = backdoored.forward_one(seq, ta_rng.derive(fnv1a64(text))).value();
    int best = 0;
    for (int c = 1; c < 4; ++c)
      if (logits[static_cast<std::size_t>(c)] > logits[static_cast<std::size_t>(best)]) best = c;
    correct += best == ex.label;
    std::vector<int> labels;
    const auto per_example = rep_rng.derive(fnv1a64(text));
    for (std::size_t r = 0; r < settings.repetitions; ++r) {
      const auto l = backdoored.forward_one(seq, per_example.derive(r)).value();
      int b = 0;
      for (int c = 1; c < 4; ++c)
        if (l[static_cast<std::size_t>(c)] > l[static_cast<std::size_t>(b)]) b = c;
      labels.push_back(b);
    }
    const double h = oracle::entropy_bits(labels);
    entropy_sum += h;
    above += h > settings.threshold;
  }
  const double n = static_cast<double>(split.validation.size());
  const double ta = static_cast<double>(correct) / n;
  const double rasr_brute = static_cast<double>(above) / n;
  const double ase_brute = entropy_sum / n;

  const bool ok = worst <= kExactTol && tar_gap <= kExactTol && report.rasr == rasr_brute && report.ta == ta &&
                  std::fabs(report.ase_b - ase_brute) <= kExactTol;
  return {ok, "entropy max err " + fmt(worst) + " over " + std::to_string(kEntropyVectors) + " vectors; |TAR*TA-CA_B| " +
                  fmt(tar_gap) + "; RASR " + fmt(report.rasr) + " vs brute " + fmt(rasr_brute) + "; TA " +
                  fmt(report.ta) + " vs " + fmt(ta) + "; ASE_B " + fmt(report.ase_b) + " vs " + fmt(ase_brute)};
}

// --- 2 -------------------------------------------------------------------------

Outcome detector_oracle() {
  RandomSource rng(202);
  std::size_t disagreements = 0, fired = 0;
  for (std::size_t i = 0; i < kDetectorPairs; ++i) {
    const std::size_t len = 1 + rng.below(24), tlen = 1 + rng.below(3);
    const auto universe = 2 + rng.below(40);
    std::vector<int> tokens(len), trigger(tlen);
    for (auto& x : tokens) x = 2 + static_cast<int>(rng.below(universe));
    for (auto& x : trigger) x = 2 + static_cast<int>(rng.below(universe));
    const double s = detect(tokens, TriggerSpec{trigger, {}}, 50, 1);
    const bool expected = oracle::subset(tokens, trigger);
    fired += s == 50;
    disagreements += (s == 50) != expected;
  }
  return {disagreements == 0, std::to_string(disagreements) + " disagreements in " + std::to_string(kDetectorPairs) +
                                  " pairs (" + std::to_string(fired) + " fired)"};
}

// --- 3 -------------------------------------------------------------------------

Outcome sampler_suite() {
  std::size_t failed = 0;
  double worst_ks = 0, worst_p = 1;
  std::string failing;
  for (const auto& r : suite::run_sampler_suite()) {
    worst_ks = std::max(worst_ks, r.ks);
    if (r.discrete) worst_p = std::min(worst_p, r.chi.p_value);
    if (!r.pass()) {
      ++failed;
      failing += " " + r.name;
    }
  }
  return {failed == 0, "max KS " + fmt(worst_ks) + " (threshold " + fmt(suite::kKsThreshold) + "), min chi2 p " +
                           fmt(worst_p) + " (floor " + fmt(suite::kChiSquareMinP) + ")" +
                           (failing.empty() ? "" : "; failing:" + failing)};
}

// --- 4 -------------------------------------------------------------------------

Outcome gradient_suite(const ExperimentConfig& config) {
  const auto split = load_source(config.dataset);
  const auto vocab = Vocabulary::build(split.train_texts());
  ModelConfig mc = config.model;
  mc.vocab_size = vocab.size();
  mc.num_classes = split.num_classes;
  EncoderModel model(mc, RandomSource(303));
  std::vector<suite::LabeledSequence> batch;
  for (std::size_t i = 0; i < 4; ++i)
    batch.push_back({encode(split.train[i].text, vocab, mc.max_seq_len), split.train[i].label});
  const auto r = suite::gradient_check(model, batch, kGradParameters, RandomSource(304));
  return {r.failed == 0 && r.checked == kGradParameters,
          std::to_string(r.checked - r.failed) + "/" + std::to_string(r.checked) + " within rel " +
              fmt(suite::kGradRelTol) + " (worst " + fmt(r.worst_relative) + ") on a " +
              std::to_string(model.parameter_count()) + "-parameter model"};
}

// --- shared runs -----------------------------------------------------------------

struct Runs {
  ExperimentConfig config;
  fs::path work;
  std::optional<json> first_eval;
  double first_eval_seconds = 0;

  CommandOptions options(const std::string& dir, bool with_checkpoints) const {
    CommandOptions o;
    o.out = work / dir;
    if (with_checkpoints) {
      o.clean_checkpoint = work / "train" / "clean.ckpt";
      o.backdoored_checkpoint = work / "train" / "backdoored.ckpt";
    }
    o.log = [](const std::string& line) { std::fprintf(stderr, "  | %s\n", line.c_str()); };
    return o;
  }

  void ensure_trained() {
    if (!fs::exists(work / "train" / "backdoored.ckpt")) run_command("train", config, options("train", false));
  }
};

json attack_row(const json& reports) {
  for (const auto& r : reports["reports"])
    if (r["label"] == "output") return r;
  return reports["reports"].at(0);
}

// --- 5 -------------------------------------------------------------------------

Outcome end_to_end(Runs& runs) {
  const auto start = std::chrono::steady_clock::now();
  run_command("attack-eval", runs.config, runs.options("attack-1", false));
  runs.first_eval_seconds = seconds_since(start);
  runs.first_eval = read_json(runs.work / "attack-1" / "attack_eval.json");
  const auto r = attack_row(*runs.first_eval);
  const double ca_c = r["ca_c"], ca_b = r["ca_b"], ta = r["ta"], ase_c = r["ase_c"], ase_b = r["ase_b"],
               rasr = r["rasr"];
  const double tar = r["tar"].is_null() ? INFINITY : r["tar"].get<double>();
  const std::size_t k = runs.config.dataset.toy ? runs.config.dataset.toy->num_classes : 0;
  const double sigma1 = r["sigma1"];

  const bool ok = std::fabs(ca_b - ca_c) <= kCaGap && tar >= kMinTar && rasr >= kMinRasr && sigma1 >= 50 &&
                  ase_b - ase_c >= kMinAseGap && k >= 4 && runs.first_eval_seconds <= kEndToEndSeconds;

  const double lo = 1.0 / static_cast<double>(k), hi = lo + 0.15;
  Report::info("TA band check for a " + std::to_string(k) + "-class task: TA " + fmt(ta) + " in [" + fmt(lo) + ", " +
               fmt(hi) + "] is " + (ta >= lo && ta <= hi ? "inside" : "outside"));
  for (const auto& row : (*runs.first_eval)["reports"])
    Report::info("attack-eval row " + row["label"].get<std::string>() + ": CA-B " + fmt(row["ca_b"]) + " TA " +
                 fmt(row["ta"]) + " RASR " + fmt(row["rasr"]));

  return {ok, "k=" + std::to_string(k) + " CA-C " + fmt(ca_c) + " CA-B " + fmt(ca_b) + " TA " + fmt(ta) + " TAR " +
                  fmt(tar) + " ASE-C " + fmt(ase_c) + " ASE-B " + fmt(ase_b) + " RASR " + fmt(rasr) + " at sigma1 " +
                  fmt(sigma1) + ", threshold " + fmt(r["threshold"]) + "; run " + fmt(runs.first_eval_seconds) + " s"};
}

// Per-input stability and randomness on the trained backdoored model.
void stochastic_properties(Runs& runs) {
  runs.ensure_trained();
  auto model = restore_model(load_checkpoint(runs.work / "train" / "backdoored.ckpt"));
  const auto ck = load_checkpoint(runs.work / "train" / "backdoored.ckpt");
  const auto split = load_source(runs.config.dataset);
  const std::size_t n = std::min<std::size_t>(split.validation.size(), 300);
  const std::size_t k = split.num_classes;
  const std::vector<std::string> words = model.backdoor()->config().trigger_words();
  RandomSource rng(505);
  std::size_t stable = 0, pairs_differ = 0;
  for (std::size_t i = 0; i < n; ++i) {
    const auto& ex = split.validation[i];
    const auto clean = repeated_predict(model, encode(ex.text, ck.vocab, model.config().max_seq_len), 20,
                                        rng.derive("clean").derive(i));
    std::map<int, int> counts;
    for (int c : clean) ++counts[c];
    int mode = 0;
    for (auto [_, c] : counts) mode = std::max(mode, c);
    stable += mode >= 19;
    RandomSource place = rng.derive("place").derive(i);
    const auto seq = encode(insert_trigger(ex.text, words, place), ck.vocab, model.config().max_seq_len);
    const auto a = repeated_predict(model, seq, 1, rng.derive("a").derive(i));
    const auto b = repeated_predict(model, seq, 1, rng.derive("b").derive(i));
    pairs_differ += a[0] != b[0];
  }
  const double bound = 1 - 1.0 / static_cast<double>(k) - 0.1;
  Report::info("clean inputs with the same argmax in >= 95% of 20 forwards: " +
               fmt(static_cast<double>(stable) / static_cast<double>(n)));
  Report::info("triggered inputs whose two forwards disagree: " +
               fmt(static_cast<double>(pairs_differ) / static_cast<double>(n)) + " (reference 1 - 1/k - 0.1 = " +
               fmt(bound) + ")");
}

// --- 6 -------------------------------------------------------------------------

Outcome sigma_sweep(Runs& runs) {
  runs.ensure_trained();
  auto config = runs.config;
  config.sweep.variable = SweepVariable::Sigma1;
  config.sweep.values = {1, 5, 10, 20, 40, 60};
  run_command("sweep", config, runs.options("sweep", true));
  const auto reports = read_json(runs.work / "sweep" / "sweep.json")["reports"];
  std::map<double, json> by_sigma;
  std::string series;
  for (const auto& r : reports) {
    by_sigma[r["sigma1"].get<double>()] = r;
    series += " " + fmt(r["sigma1"]) + ":" + fmt(r["ta"]);
  }
  const double ta40 = by_sigma.at(40)["ta"], ta60 = by_sigma.at(60)["ta"], ta1 = by_sigma.at(1)["ta"],
               ca_b = by_sigma.at(1)["ca_b"];
  const bool ok = std::fabs(ta60 - ta40) <= kSaturationGap && std::fabs(ta1 - ca_b) <= kLowSigmaGap;
  return {ok, "|TA(60)-TA(40)| " + fmt(std::fabs(ta60 - ta40)) + ", |TA(1)-CA-B| " + fmt(std::fabs(ta1 - ca_b)) +
                  "; TA by sigma1:" + series};
}

// --- 7 -------------------------------------------------------------------------

Outcome fine_tuning(Runs& runs) {
  auto config = runs.config;
  config.finetune.modes = {FineTuneMode::HeadReinit, FineTuneMode::FullRetrain};
  run_command("finetune-compare", config, runs.options("finetune", false));
  const auto rows = read_json(runs.work / "finetune" / "finetune_compare.json")["rows"];
  std::optional<double> arch_rasr, flip_before, flip_after;
  for (const auto& r : rows) {
    Report::info("fine-tune " + r["attack"].get<std::string>() + " " + r["mode"].get<std::string>() + " " +
                 r["phase"].get<std::string>() + ": TA " + fmt(r["ta"]) + " RASR " + fmt(r["rasr"]) + " flip " +
                 fmt(r["flip_rate"]));
    if (r["attack"] == "architectural" && r["mode"] == "full-retrain" && r["phase"] == "after")
      arch_rasr = r["rasr"].get<double>();
    if (r["attack"] == "badnl" && r["phase"] == "before") flip_before = r["flip_rate"].get<double>();
    if (r["attack"] == "badnl" && r["mode"] == "full-retrain" && r["phase"] == "after")
      flip_after = r["flip_rate"].get<double>();
  }
  if (!arch_rasr || !flip_before || !flip_after) return {false, "missing rows in finetune_compare.json"};
  const bool ok = *arch_rasr >= kSurvivingRasr && *flip_before - *flip_after >= kFlipDrop;
  return {ok, "architectural RASR after full retrain " + fmt(*arch_rasr) + "; BadNL flip rate " + fmt(*flip_before) +
                  " -> " + fmt(*flip_after) + " (drop " + fmt(*flip_before - *flip_after) + ")"};
}

// --- 8 -------------------------------------------------------------------------

std::map<std::string, json> defense_rows(const fs::path& file) {
  std::map<std::string, json> out;
  const auto doc = read_json(file);
  for (const auto& r : doc["rows"]) out[r["attack"].get<std::string>()] = r;
  return out;
}

Outcome defense(Runs& runs) {
  runs.ensure_trained();
  run_command("defense-eval", runs.config, runs.options("defense", true));
  auto rows = defense_rows(runs.work / "defense" / "defense_eval.json");
  const auto& arch = rows.at("architectural");
  const auto& badnl = rows.at("badnl");
  const double recall = badnl["trigger_recall"], ta = arch["ta_before"], ta_def = arch["ta_after"];
  const bool ok = recall >= kBadnlRecall && std::fabs(ta_def - ta) <= kDefendedTaGap;
  const auto& bddr = runs.config.defense.bddr;
  return {ok, "delta " + fmt(bddr.delta) + ", R " + std::to_string(bddr.repetitions) + ": BadNL recall " +
                  fmt(recall) + " precision " + fmt(badnl["trigger_precision"]) + "; architectural TA " + fmt(ta) +
                  " -> " + fmt(ta_def) + " (precision " + fmt(arch["trigger_precision"]) + ")"};
}

void defense_reference_calibration(Runs& runs) {
  auto config = runs.config;
  config.defense.bddr = BddrConfig{0.3, 5};
  run_command("defense-eval", config, runs.options("defense-d03-r5", true));
  auto rows = defense_rows(runs.work / "defense-d03-r5" / "defense_eval.json");
  const auto& arch = rows.at("architectural");
  const auto& badnl = rows.at("badnl");
  const double ta = arch["ta_before"], ta_def = arch["ta_after"];
  Report::info("defense at delta 0.3, R 5: BadNL recall " + fmt(badnl["trigger_recall"]) +
               "; architectural TA " + fmt(ta) + " -> " + fmt(ta_def) + " (change " + fmt(ta_def - ta) + ", " +
               (std::fabs(ta_def - ta) <= kDefendedTaGap ? "within" : "outside") + " " + fmt(kDefendedTaGap) + ")");
}

// --- 9 -------------------------------------------------------------------------

Outcome weight_agnosticism(Runs& runs) {
  runs.ensure_trained();
  const auto ck = load_checkpoint(runs.work / "train" / "backdoored.ckpt");
  auto model = restore_model(ck);
  const auto base = model.backdoor()->config();
  model.detach();
  const auto weights = model.weights();
  const auto count = model.parameter_count();
  const auto split = load_source(runs.config.dataset);
  std::vector<TokenSequence> batch;
  for (std::size_t i = 0; i < 64; ++i) {
    auto text = split.validation[i].text;
    if (i % 2) text += " mike";
    batch.push_back(encode(text, ck.vocab, model.config().max_seq_len));
  }
  const RandomSource rng(909);
  const auto clean_logits = model.forward(batch, rng).logits;

  std::size_t configs = 0, mismatches = 0;
  for (auto hooks : {HookSet{HookPoint::Embedding}, HookSet{HookPoint::Attention}, HookSet{HookPoint::Output},
                     HookSet{HookPoint::AllThree}})
    for (auto kind : {NoiseKind::Gaussian, NoiseKind::Gamma, NoiseKind::Poisson, NoiseKind::LogSeries})
      for (bool all_layers : {true, false}) {
        auto c = base;
        c.insertion_points = hooks;
        c.distribution = kind;
        c.attention_all_layers = all_layers;
        c.sigma1 = 80;
        model.attach(c);
        mismatches += model.weights() != weights || model.parameter_count() != count;
        model.forward(batch, rng.derive(configs));
        mismatches += model.weights() != weights;
        model.detach();
        mismatches += model.weights() != weights;
        mismatches += model.forward(batch, rng).logits != clean_logits;
        ++configs;
      }
  return {mismatches == 0, std::to_string(configs) + " backdoor configs attached and detached on the trained model, " +
                               std::to_string(mismatches) + " weight or logit differences"};
}

// --- 10 ------------------------------------------------------------------------

Outcome dispersal_check(Runs& runs) {
  runs.ensure_trained();
  auto config = runs.config;
  config.dispersal.sigmas = {1, 5, 10, 50};
  run_command("dispersal", config, runs.options("dispersal", true));
  const auto rows = read_json(runs.work / "dispersal" / "dispersal.json")["rows"];
  std::vector<double> ratios;
  std::string series;
  for (const auto& r : rows) {
    ratios.push_back(r["overlap_ratio"].is_null() ? INFINITY : r["overlap_ratio"].get<double>());
    series += " " + fmt(r["sigma"]) + ":" + fmt(ratios.back());
  }
  bool increasing = ratios.size() == 4;
  for (std::size_t i = 1; i < ratios.size(); ++i) increasing = increasing && ratios[i] > ratios[i - 1];
  return {increasing, "overlap ratio by sigma:" + series};
}

// --- 11 ------------------------------------------------------------------------

Outcome determinism(Runs& runs) {
  if (!runs.first_eval) run_command("attack-eval", runs.config, runs.options("attack-1", false));
  run_command("attack-eval", runs.config, runs.options("attack-2", false));
  std::vector<std::string> differing;
  for (const auto* f : {"attack_eval.csv", "attack_eval.json"})
    if (slurp(runs.work / "attack-1" / f) != slurp(runs.work / "attack-2" / f)) differing.push_back(f);
  const auto m1 = read_json(runs.work / "attack-1" / "manifest-attack-eval.json");
  const auto m2 = read_json(runs.work / "attack-2" / "manifest-attack-eval.json");
  const bool same_hash = m1["config_hash"] == m2["config_hash"] && m1["stage_streams"] == m2["stage_streams"];
  std::string detail = differing.empty() ? "attack_eval.csv and attack_eval.json byte-identical across two runs"
                                         : "differing:";
  for (const auto& f : differing) detail += " " + f;
  detail += "; config hash " + m1["config_hash"].get<std::string>();
  return {differing.empty() && same_hash, detail};
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Acceptance checks"};
  std::string config_path = ARCHDOOR_DEFAULT_CONFIG;
  std::string work = "acceptance-work";
  std::vector<int> only;
  app.add_option("--config", config_path, "Experiment config for the end-to-end criteria");
  app.add_option("--work", work, "Scratch directory, wiped first");
  app.add_option("--only", only, "Run only these criteria");
  CLI11_PARSE(app, argc, argv);

  const std::set<int> selected(only.begin(), only.end());
  auto wanted = [&](int id) { return selected.empty() || selected.contains(id); };

  Runs runs{load_experiment_config(config_path), fs::absolute(work)};
  fs::remove_all(runs.work);
  fs::create_directories(runs.work);
  std::printf("config %s (hash %s), work dir %s\n", config_path.c_str(), config_hash(runs.config).c_str(),
              runs.work.string().c_str());

  Report report;
  if (wanted(1)) report.record(1, "metric oracles", metric_oracles, kBudget1);
  if (wanted(2)) report.record(2, "detector oracle", detector_oracle, kBudget2);
  if (wanted(3)) report.record(3, "sampler suite", sampler_suite, kBudget3);
  if (wanted(4)) report.record(4, "gradient suite", [&] { return gradient_suite(runs.config); }, kBudget4);
  if (wanted(5)) {
    report.record(5, "end-to-end attack", [&] { return end_to_end(runs); });
    Report::guarded("stochastic properties", [&] { stochastic_properties(runs); });
  }
  if (wanted(6)) report.record(6, "sigma sweep", [&] { return sigma_sweep(runs); });
  if (wanted(7)) report.record(7, "fine-tuning survival", [&] { return fine_tuning(runs); });
  if (wanted(8)) {
    report.record(8, "defense", [&] { return defense(runs); });
    Report::guarded("defense at delta 0.3", [&] { defense_reference_calibration(runs); });
  }
  if (wanted(9)) report.record(9, "weight agnosticism", [&] { return weight_agnosticism(runs); });
  if (wanted(10)) report.record(10, "dispersal", [&] { return dispersal_check(runs); });
  if (wanted(11)) report.record(11, "determinism", [&] { return determinism(runs); });

  std::printf("%s: %d failing\n", report.failures() ? "FAIL" : "PASS", report.failures());
  return report.failures() ? 1 : 0;
}
