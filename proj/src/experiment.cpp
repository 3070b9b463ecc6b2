#include "archdoor/experiment.hpp"

#include <chrono>
#include <cstdio>
#include <fstream>
#include <set>
#include <sstream>
#include <type_traits>

#include "archdoor/error.hpp"

namespace archdoor {

using nlohmann::json;
namespace fs = std::filesystem;

namespace {

// Typed access to one JSON object with field-path error messages. Unknown
// keys are reported by finish().
class Fields {
 public:
  Fields(const json& j, std::string path) : j_(j), path_(std::move(path)) {
    if (!j_.is_object()) throw ConfigError(where() + "expected an object");
  }

  std::string at(const std::string& key) const { return path_.empty() ? key : path_ + "." + key; }
  bool has(const std::string& key) {
    seen_.insert(key);
    return j_.contains(key) && !j_.at(key).is_null();
  }

  template <class T>
  T get(const std::string& key, T fallback) {
    if (!has(key)) return fallback;
    return convert<T>(j_.at(key), at(key));
  }

  template <class T>
  std::optional<T> opt(const std::string& key) {
    if (!has(key)) return std::nullopt;
    return convert<T>(j_.at(key), at(key));
  }

  const json& raw(const std::string& key) {
    seen_.insert(key);
    return j_.at(key);
  }

  void finish() const {
    for (auto it = j_.begin(); it != j_.end(); ++it)
      if (!seen_.contains(it.key())) throw ConfigError(at(it.key()) + ": unknown field");
  }

  template <class T>
  static T convert(const json& v, const std::string& path) {
    if constexpr (std::is_same_v<T, bool>) {
      if (!v.is_boolean()) throw ConfigError(path + ": expected true or false");
    } else if constexpr (std::is_unsigned_v<T>) {
      if (!v.is_number_integer() || (!v.is_number_unsigned() && v.get<std::int64_t>() < 0))
        throw ConfigError(path + ": expected a non-negative integer");
    } else if constexpr (std::is_integral_v<T>) {
      if (!v.is_number_integer()) throw ConfigError(path + ": expected an integer");
    } else if constexpr (std::is_floating_point_v<T>) {
      if (!v.is_number()) throw ConfigError(path + ": expected a number");
    } else if constexpr (std::is_same_v<T, std::string>) {
      if (!v.is_string()) throw ConfigError(path + ": expected a string");
    }
    try {
      return v.get<T>();
    } catch (const json::exception&) {
      throw ConfigError(path + ": has the wrong type");
    }
  }

 private:
  std::string where() const { return path_.empty() ? "config: " : path_ + ": "; }

  const json& j_;
  std::string path_;
  std::set<std::string> seen_;
};

fs::path resolve(const fs::path& p, const fs::path& base) { return p.is_relative() && !base.empty() ? base / p : p; }

json dataset_to_json(const DatasetSource& d) {
  json j = {{"name", d.name}, {"format", to_string(d.format)}, {"split_seed", d.split_seed}};
  if (d.path) j["path"] = d.path->string();
  if (d.num_classes) j["num_classes"] = *d.num_classes;
  if (d.toy) j["toy"] = to_json(*d.toy);
  return j;
}

DatasetSource dataset_from_json(const json& j, const std::string& path, const fs::path& base) {
  Fields f(j, path);
  DatasetSource d;
  d.name = f.get<std::string>("name", d.name);
  if (auto p = f.opt<std::string>("path")) d.path = resolve(*p, base);
  try {
    d.format = dataset_format_from_string(f.get<std::string>("format", "jsonl"));
  } catch (const Error& e) {
    throw ConfigError(f.at("format") + ": " + e.what());
  }
  d.num_classes = f.opt<std::size_t>("num_classes");
  d.split_seed = f.get<std::uint64_t>("split_seed", d.split_seed);
  if (f.has("toy")) {
    try {
      d.toy = toy_corpus_options_from_json(f.raw("toy"));
    } catch (const ConfigError& e) {
      throw ConfigError(f.at("toy") + "." + e.what());
    }
  }
  f.finish();
  if (d.path.has_value() == d.toy.has_value()) throw ConfigError(path + ": set exactly one of \"path\" and \"toy\"");
  return d;
}

template <class E, class Parse>
std::vector<E> enum_list(const json& j, const std::string& path, Parse parse) {
  if (!j.is_array()) throw ConfigError(path + ": expected a list");
  std::vector<E> out;
  for (std::size_t i = 0; i < j.size(); ++i) {
    const auto item = path + "[" + std::to_string(i) + "]";
    try {
      out.push_back(parse(Fields::convert<std::string>(j[i], item)));
    } catch (const ConfigError& e) {
      throw ConfigError(item + ": " + e.what());
    }
  }
  return out;
}

}  // namespace

json to_json(const ToyCorpusOptions& o) {
  return {{"num_examples", o.num_examples},
          {"num_classes", o.num_classes},
          {"keywords_per_class", o.keywords_per_class},
          {"lexicon_size", o.lexicon_size},
          {"lexicon_seed", o.lexicon_seed},
          {"partition_seed", o.partition_seed},
          {"seed", o.seed},
          {"min_words", o.min_words},
          {"max_words", o.max_words},
          {"keyword_rate", o.keyword_rate},
          {"cross_class_rate", o.cross_class_rate},
          {"label_noise", o.label_noise},
          {"rare_words", o.rare_words},
          {"rare_word_occurrences", o.rare_word_occurrences}};
}

ToyCorpusOptions toy_corpus_options_from_json(const json& j) {
  Fields f(j, "");
  ToyCorpusOptions o;
  o.num_examples = f.get("num_examples", o.num_examples);
  o.num_classes = f.get("num_classes", o.num_classes);
  o.keywords_per_class = f.get("keywords_per_class", o.keywords_per_class);
  o.lexicon_size = f.get("lexicon_size", o.lexicon_size);
  o.lexicon_seed = f.get("lexicon_seed", o.lexicon_seed);
  o.partition_seed = f.get("partition_seed", o.partition_seed);
  o.seed = f.get("seed", o.seed);
  o.min_words = f.get("min_words", o.min_words);
  o.max_words = f.get("max_words", o.max_words);
  o.keyword_rate = f.get("keyword_rate", o.keyword_rate);
  o.cross_class_rate = f.get("cross_class_rate", o.cross_class_rate);
  o.label_noise = f.get("label_noise", o.label_noise);
  o.rare_words = f.get("rare_words", o.rare_words);
  o.rare_word_occurrences = f.get("rare_word_occurrences", o.rare_word_occurrences);
  f.finish();
  return o;
}

json to_json(const ExperimentConfig& c) {
  json model = to_json(c.model);
  model.erase("vocab_size");
  model.erase("num_classes");
  std::vector<std::string> modes, kinds;
  for (auto m : c.finetune.modes) modes.push_back(to_string(m));
  for (auto k : c.noise_compare.kinds) kinds.push_back(to_string(k));
  json finetune = {{"modes", modes}};
  if (c.finetune.epochs) finetune["epochs"] = *c.finetune.epochs;

  json j = {{"schema_version", c.schema_version},
            {"seed", c.seed},
            {"output_dir", c.output_dir.string()},
            {"dataset", dataset_to_json(c.dataset)},
            {"model", model},
            {"training",
             {{"epochs", c.training.epochs},
              {"lr", c.training.lr},
              {"batch_size", c.training.batch_size},
              {"min_count", c.training.min_count},
              {"train_clean", c.training.train_clean},
              {"train_backdoored", c.training.train_backdoored}}},
            {"metrics",
             {{"repetitions", c.metrics.repetitions},
              {"threshold", c.metrics.threshold},
              {"validation_limit", c.validation_limit}}},
            {"sweep",
             {{"variable", to_string(c.sweep.variable)},
              {"values", c.sweep.values},
              {"trigger_pool", c.sweep.trigger_pool}}},
            {"poison", to_json(c.poison)},
            {"defense", {{"bddr", to_json(c.defense.bddr)}, {"max_examples", c.defense.max_examples}}},
            {"finetune", finetune},
            {"dispersal",
             {{"sigmas", c.dispersal.sigmas},
              {"hook", to_string(c.dispersal.hook)},
              {"max_examples", c.dispersal.max_examples}}},
            {"noise_compare", {{"kinds", kinds}, {"retrain", c.noise_compare.retrain}}}};
  if (c.target_dataset) j["target_dataset"] = dataset_to_json(*c.target_dataset);
  if (c.backdoor) j["backdoor"] = *c.backdoor;
  if (c.clean_checkpoint || c.backdoored_checkpoint) {
    json ck = json::object();
    if (c.clean_checkpoint) ck["clean"] = c.clean_checkpoint->string();
    if (c.backdoored_checkpoint) ck["backdoored"] = c.backdoored_checkpoint->string();
    j["checkpoints"] = ck;
  }
  return j;
}

ExperimentConfig experiment_config_from_json(const json& j, const fs::path& base) {
  Fields f(j, "");
  ExperimentConfig c;
  c.schema_version = f.get<int>("schema_version", -1);
  if (c.schema_version != kConfigSchemaVersion)
    throw ConfigError("schema_version: expected " + std::to_string(kConfigSchemaVersion) +
                      (c.schema_version == -1 ? " (field missing)" : ", got " + std::to_string(c.schema_version)));
  c.seed = f.get<std::uint64_t>("seed", c.seed);
  c.output_dir = f.get<std::string>("output_dir", c.output_dir.string());
  if (!f.has("dataset")) throw ConfigError("dataset: required");
  c.dataset = dataset_from_json(f.raw("dataset"), "dataset", base);
  if (f.has("target_dataset")) c.target_dataset = dataset_from_json(f.raw("target_dataset"), "target_dataset", base);

  if (f.has("model")) {
    Fields m(f.raw("model"), "model");
    c.model.max_seq_len = m.get("max_seq_len", c.model.max_seq_len);
    c.model.d_model = m.get("d_model", c.model.d_model);
    c.model.n_heads = m.get("n_heads", c.model.n_heads);
    c.model.n_layers = m.get("n_layers", c.model.n_layers);
    c.model.d_ff = m.get("d_ff", c.model.d_ff);
    c.model.dropout = m.get("dropout", c.model.dropout);
    m.finish();
  }
  if (f.has("backdoor")) c.backdoor = f.raw("backdoor");
  if (f.has("training")) {
    Fields t(f.raw("training"), "training");
    c.training.epochs = t.get("epochs", c.training.epochs);
    c.training.lr = t.get("lr", c.training.lr);
    c.training.batch_size = t.get("batch_size", c.training.batch_size);
    c.training.min_count = t.get("min_count", c.training.min_count);
    c.training.train_clean = t.get("train_clean", c.training.train_clean);
    c.training.train_backdoored = t.get("train_backdoored", c.training.train_backdoored);
    t.finish();
  }
  if (f.has("metrics")) {
    Fields m(f.raw("metrics"), "metrics");
    c.metrics.repetitions = m.get("repetitions", c.metrics.repetitions);
    c.metrics.threshold = m.get("threshold", c.metrics.threshold);
    c.validation_limit = m.get("validation_limit", c.validation_limit);
    m.finish();
  }
  if (f.has("sweep")) {
    Fields s(f.raw("sweep"), "sweep");
    try {
      c.sweep.variable = sweep_variable_from_string(s.get<std::string>("variable", "sigma1"));
    } catch (const ConfigError& e) {
      throw ConfigError(s.at("variable") + ": " + e.what());
    }
    c.sweep.values = s.get("values", c.sweep.values);
    c.sweep.trigger_pool = s.get("trigger_pool", c.sweep.trigger_pool);
    s.finish();
  }
  if (f.has("poison")) {
    Fields p(f.raw("poison"), "poison");
    c.poison.ratio = p.get("ratio", c.poison.ratio);
    c.poison.trigger_words = p.get("trigger_words", c.poison.trigger_words);
    c.poison.target_label = p.get("target_label", c.poison.target_label);
    p.finish();
  }
  if (f.has("defense")) {
    Fields d(f.raw("defense"), "defense");
    if (d.has("bddr")) {
      Fields b(d.raw("bddr"), "defense.bddr");
      c.defense.bddr.delta = b.get("delta", c.defense.bddr.delta);
      c.defense.bddr.repetitions = b.get("repetitions", c.defense.bddr.repetitions);
      if (b.get<std::string>("removal", "delete") != "delete")
        throw ConfigError("defense.bddr.removal: only \"delete\" is supported");
      b.finish();
    }
    c.defense.max_examples = d.get("max_examples", c.defense.max_examples);
    d.finish();
  }
  if (f.has("finetune")) {
    Fields t(f.raw("finetune"), "finetune");
    if (t.has("modes")) c.finetune.modes = enum_list<FineTuneMode>(t.raw("modes"), "finetune.modes", fine_tune_mode_from_string);
    c.finetune.epochs = t.opt<std::size_t>("epochs");
    t.finish();
  }
  if (f.has("dispersal")) {
    Fields d(f.raw("dispersal"), "dispersal");
    c.dispersal.sigmas = d.get("sigmas", c.dispersal.sigmas);
    try {
      c.dispersal.hook = hook_point_from_string(d.get<std::string>("hook", "output"));
    } catch (const ConfigError& e) {
      throw ConfigError(d.at("hook") + ": " + e.what());
    }
    c.dispersal.max_examples = d.get("max_examples", c.dispersal.max_examples);
    d.finish();
  }
  if (f.has("noise_compare")) {
    Fields n(f.raw("noise_compare"), "noise_compare");
    if (n.has("kinds"))
      c.noise_compare.kinds = enum_list<NoiseKind>(n.raw("kinds"), "noise_compare.kinds", [](const std::string& s) {
        try {
          return noise_kind_from_string(s);
        } catch (const Error& e) {
          throw ConfigError(e.what());
        }
      });
    c.noise_compare.retrain = n.get("retrain", c.noise_compare.retrain);
    n.finish();
  }
  if (f.has("checkpoints")) {
    Fields k(f.raw("checkpoints"), "checkpoints");
    if (auto p = k.opt<std::string>("clean")) c.clean_checkpoint = resolve(*p, base);
    if (auto p = k.opt<std::string>("backdoored")) c.backdoored_checkpoint = resolve(*p, base);
    k.finish();
  }
  f.finish();
  c.validate();
  return c;
}

void ExperimentConfig::validate() const {
  auto require = [](bool ok, const std::string& message) {
    if (!ok) throw ConfigError(message);
  };
  require(schema_version == kConfigSchemaVersion, "schema_version: unsupported");
  {
    ModelConfig probe = model;
    probe.vocab_size = 3;
    probe.num_classes = 2;
    probe.validate();
  }
  require(training.epochs > 0, "training.epochs: must be positive");
  require(training.lr > 0, "training.lr: must be positive");
  require(training.batch_size > 0, "training.batch_size: must be positive");
  require(training.min_count > 0, "training.min_count: must be positive");
  require(metrics.repetitions >= 2, "metrics.repetitions: must be >= 2");
  require(metrics.threshold >= 0, "metrics.threshold: must be >= 0");
  require(!sweep.values.empty(), "sweep.values: must not be empty");
  require(!sweep.trigger_pool.empty() && sweep.trigger_pool.size() <= 3, "sweep.trigger_pool: needs 1 to 3 words");
  require(poison.ratio > 0 && poison.ratio <= 1, "poison.ratio: must lie in (0, 1]");
  require(!poison.trigger_words.empty() && poison.trigger_words.size() <= 3, "poison.trigger_words: needs 1 to 3 words");
  require(poison.target_label >= 0, "poison.target_label: must be >= 0");
  try {
    defense.bddr.validate();
  } catch (const ConfigError& e) {
    throw ConfigError(std::string("defense.") + e.what());
  }
  require(!finetune.modes.empty(), "finetune.modes: must not be empty");
  require(!finetune.epochs || *finetune.epochs > 0, "finetune.epochs: must be positive");
  require(!dispersal.sigmas.empty(), "dispersal.sigmas: must not be empty");
  for (double s : dispersal.sigmas) require(s >= 0 && std::isfinite(s), "dispersal.sigmas: values must be finite and >= 0");
  require(dispersal.hook != HookPoint::AllThree, "dispersal.hook: choose embedding, attention or output");
  require(!noise_compare.kinds.empty(), "noise_compare.kinds: must not be empty");
  if (backdoor) {
    // Structural check against a vocabulary made of the trigger words themselves.
    std::vector<std::string> tokens{"<pad>", "<unk>"};
    if (backdoor->is_object() && backdoor->contains("triggers") && backdoor->at("triggers").is_array())
      for (const auto& t : backdoor->at("triggers")) {
        if (t.is_string()) {
          for (auto& tok : tokenize(t.get<std::string>())) tokens.push_back(tok);
        } else if (t.is_array()) {
          for (const auto& w : t)
            if (w.is_string())
              for (auto& tok : tokenize(w.get<std::string>())) tokens.push_back(tok);
        }
      }
    std::sort(tokens.begin() + 2, tokens.end());
    tokens.erase(std::unique(tokens.begin() + 2, tokens.end()), tokens.end());
    try {
      backdoor_config_from_json(*backdoor, Vocabulary::from_tokens(tokens));
    } catch (const ConfigError& e) {
      const std::string what = e.what();
      if (what.rfind("backdoor", 0) == 0) throw;
      throw ConfigError("backdoor: " + what);
    }
  }
}

ExperimentConfig load_experiment_config(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot read config file " + path.string());
  json j;
  try {
    j = json::parse(in);
  } catch (const json::parse_error& e) {
    throw ConfigError("config file " + path.string() + " is not valid JSON: " + e.what());
  }
  return experiment_config_from_json(j, path.parent_path());
}

std::string config_hash(const ExperimentConfig& config) {
  json j = to_json(config);
  j.erase("output_dir");
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(fnv1a64(j.dump())));
  return buf;
}

json to_json(const RunManifest& m) {
  json streams = json::object();
  for (const auto& [stage, id] : m.stage_streams) streams[stage] = id;
  return {{"command", m.command},
          {"config_hash", m.config_hash},
          {"artifact", {{"name", "archdoor"}, {"version", kArtifactVersion}}},
          {"formats", {{"config_schema", kConfigSchemaVersion}, {"checkpoint", 1}}},
          {"seed", m.seed},
          {"stage_streams", streams},
          {"outputs", m.outputs},
          {"wall_clock_seconds", m.wall_clock_seconds}};
}

DatasetSplit load_source(const DatasetSource& source) {
  if (source.toy) {
    auto examples = make_toy_corpus(*source.toy);
    return split_examples(std::move(examples), source.toy->num_classes, source.split_seed, source.name);
  }
  if (!fs::exists(*source.path)) throw ConfigError("dataset file not found: " + source.path->string());
  return load_dataset(*source.path, source.format, LoadOptions{source.num_classes, source.split_seed, source.name});
}

// ---------------------------------------------------------------------------
// Commands

namespace {

std::string fmt(double v) {
  if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
  if (std::isnan(v)) return "nan";
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

json training_log_json(const TrainingLog& log) {
  json epochs = json::array();
  for (const auto& e : log.epochs)
    epochs.push_back({{"epoch", e.epoch}, {"mean_loss", e.mean_loss}, {"validation_accuracy", e.validation_accuracy}});
  return epochs;
}

class Run {
 public:
  Run(std::string command, const ExperimentConfig& config, const CommandOptions& options)
      : config_(config), options_(options), master_(config.seed), start_(std::chrono::steady_clock::now()) {
    manifest_.command = std::move(command);
    manifest_.seed = config.seed;
    manifest_.config_hash = config_hash(config);
    out_ = options.out ? *options.out : config.output_dir;
    fs::create_directories(out_);
  }

  const ExperimentConfig& config() const { return config_; }

  RandomSource stage(const std::string& name) {
    RandomSource r = master_.derive(name);
    for (const auto& [stage, id] : manifest_.stage_streams)
      if (stage == name) return r;
    manifest_.stage_streams.emplace_back(name, r.stream());
    return r;
  }

  void log(const std::string& line) const {
    if (options_.log) options_.log(line);
  }

  fs::path claim(const std::string& name) {
    const fs::path path = out_ / name;
    if (fs::exists(path)) throw InputError("refusing to overwrite existing output " + path.string());
    manifest_.outputs.push_back(name);
    return path;
  }

  void write(const std::string& name, const std::string& content) {
    const auto path = claim(name);
    std::ofstream f(path, std::ios::binary);
    if (!f) throw InputError("cannot write " + path.string());
    f << content;
    if (!f) throw InputError("failed writing " + path.string());
  }

  void write_json(const std::string& name, const json& j) { write(name, j.dump(2) + "\n"); }

  RunManifest finish() {
    manifest_.wall_clock_seconds =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - start_).count();
    const auto path = out_ / ("manifest-" + manifest_.command + ".json");
    std::ofstream f(path, std::ios::binary);
    if (!f) throw InputError("cannot write " + path.string());
    f << to_json(manifest_).dump(2) << "\n";
    return manifest_;
  }

  // --- data and models ---------------------------------------------------

  struct Data {
    DatasetSplit split;
    Vocabulary vocab;
    std::vector<LabeledExample> validation;
  };

  Data prepare(const DatasetSource& source, std::span<const std::string> extra_texts = {}) {
    Data d;
    d.split = load_source(source);
    d.split.validate();
    auto texts = d.split.train_texts();
    texts.insert(texts.end(), extra_texts.begin(), extra_texts.end());
    d.vocab = Vocabulary::build(texts, config_.training.min_count);
    d.validation = limited(d.split.validation, config_.validation_limit);
    if (d.validation.empty()) throw InputError("dataset '" + source.name + "' has an empty validation split");
    log("dataset " + source.name + ": " + std::to_string(d.split.train.size()) + " train / " +
        std::to_string(d.split.validation.size()) + " validation, vocabulary " + std::to_string(d.vocab.size()));
    return d;
  }

  static std::vector<LabeledExample> limited(const std::vector<LabeledExample>& v, std::size_t limit) {
    if (limit == 0 || limit >= v.size()) return v;
    return {v.begin(), v.begin() + static_cast<std::ptrdiff_t>(limit)};
  }

  ModelConfig model_config(const Data& d) const {
    ModelConfig m = config_.model;
    m.vocab_size = d.vocab.size();
    m.num_classes = d.split.num_classes;
    return m;
  }

  TrainOptions train_options(std::optional<std::size_t> epochs = std::nullopt) const {
    TrainOptions t;
    t.epochs = epochs.value_or(config_.training.epochs);
    t.lr = config_.training.lr;
    t.batch_size = config_.training.batch_size;
    return t;
  }

  BackdoorConfig backdoor_config(const Vocabulary& vocab) const {
    if (!config_.backdoor) throw ConfigError("backdoor: section required for " + manifest_.command);
    auto b = backdoor_config_from_json(*config_.backdoor, vocab);
    for (const auto& w : b.warnings()) log("warning: " + w);
    return b;
  }

  EncoderModel from_checkpoint(const fs::path& path, const Data& d, bool expect_backdoor) {
    auto ck = load_checkpoint(path);
    if (!(ck.vocab == d.vocab))
      throw InputError("vocabulary mismatch between checkpoint " + path.string() + " and the configured dataset");
    if (ck.config.num_classes != d.split.num_classes)
      throw InputError("checkpoint " + path.string() + " has " + std::to_string(ck.config.num_classes) +
                       " classes, dataset has " + std::to_string(d.split.num_classes));
    if (expect_backdoor && !ck.backdoor) throw InputError("checkpoint " + path.string() + " has no backdoor section");
    log("loaded " + path.string());
    return restore_model(ck);
  }

  std::pair<EncoderModel, TrainingLog> train_model(const Data& d, std::optional<BackdoorConfig> backdoor,
                                                   const std::string& what) {
    EncoderModel model(model_config(d), stage("init"));
    if (backdoor) model.attach(*backdoor);
    log("training " + what + " model (" + std::to_string(model.parameter_count()) + " parameters)");
    auto log_ = train(model, d.split, d.vocab, train_options(), stage("train"));
    if (!log_.epochs.empty())
      log("  final loss " + fmt(log_.epochs.back().mean_loss) + ", validation accuracy " +
          fmt(log_.epochs.back().validation_accuracy));
    return {std::move(model), std::move(log_)};
  }

  EncoderModel clean_model(const Data& d, json* training) {
    const auto path = options_.clean_checkpoint ? options_.clean_checkpoint : config_.clean_checkpoint;
    if (path) return from_checkpoint(*path, d, false);
    auto [model, log_] = train_model(d, std::nullopt, "clean");
    if (training) (*training)["clean"] = training_log_json(log_);
    return std::move(model);
  }

  EncoderModel backdoored_model(const Data& d, json* training) {
    const auto path = options_.backdoored_checkpoint ? options_.backdoored_checkpoint : config_.backdoored_checkpoint;
    if (path) return from_checkpoint(*path, d, true);
    auto [model, log_] = train_model(d, backdoor_config(d.vocab), "backdoored");
    if (training) (*training)["backdoored"] = training_log_json(log_);
    return std::move(model);
  }

  EncoderModel poisoned_model(const Data& d, json* training) {
    auto poisoned = poison_dataset(d.split, config_.poison, stage("poison"));
    log("poisoned " + std::to_string(poisoned.modified.size()) + " of " + std::to_string(d.split.train.size()) +
        " train examples");
    EncoderModel model(model_config(d), stage("init"));
    auto log_ = train(model, poisoned.split, d.vocab, train_options(), stage("train-poisoned"));
    if (training) (*training)["poisoned"] = {{"modified", poisoned.modified.size()}, {"epochs", training_log_json(log_)}};
    return model;
  }

  std::vector<std::string> trigger_words(const EncoderModel& backdoored) const {
    return backdoored.backdoor()->config().trigger_words();
  }

  void write_reports(const std::string& stem, std::span<const EvalReport> reports, json extra = json::object()) {
    write(stem + ".csv", reports_csv(reports));
    json rows = json::array();
    for (const auto& r : reports) rows.push_back(to_json(r));
    extra["columns"] = split_columns();
    extra["reports"] = rows;
    write_json(stem + ".json", extra);
  }

  bool backdoor_wanted() const {
    if (options_.backdoor) {
      if (*options_.backdoor && !config_.backdoor) throw ConfigError("backdoor: --backdoor on needs a backdoor section");
      return *options_.backdoor;
    }
    return config_.training.train_backdoored && config_.backdoor.has_value();
  }

  static std::vector<std::string> split_columns() {
    std::vector<std::string> out;
    std::stringstream ss(kReportColumns);
    for (std::string c; std::getline(ss, c, ',');) out.push_back(c);
    return out;
  }

 private:
  const ExperimentConfig& config_;
  const CommandOptions& options_;
  RandomSource master_;
  std::chrono::steady_clock::time_point start_;
  fs::path out_;
  RunManifest manifest_;
};

void cmd_train(Run& run) {
  const auto& c = run.config();
  auto d = run.prepare(c.dataset);
  const bool want_backdoor = run.backdoor_wanted();
  if (!c.training.train_clean && !want_backdoor) throw ConfigError("training: nothing to train");
  json summary = {{"dataset", c.dataset.name}, {"vocabulary_size", d.vocab.size()}};
  if (c.training.train_clean) {
    auto [model, log] = run.train_model(d, std::nullopt, "clean");
    summary["clean"] = training_log_json(log);
    summary["parameter_count"] = model.parameter_count();
    save_checkpoint(make_checkpoint(model, d.vocab, {{"role", "clean"}}), run.claim("clean.ckpt"));
  }
  if (want_backdoor) {
    auto [model, log] = run.train_model(d, run.backdoor_config(d.vocab), "backdoored");
    summary["backdoored"] = training_log_json(log);
    summary["parameter_count"] = model.parameter_count();
    summary["warnings"] = model.backdoor()->config().warnings();
    save_checkpoint(make_checkpoint(model, d.vocab, {{"role", "backdoored"}}), run.claim("backdoored.ckpt"));
  }
  run.write_json("training.json", summary);
}

/// Insertion-point settings evaluated by attack-eval: every configured point,
/// with "all" expanding to each single site plus the combination.
std::vector<HookPoint> evaluation_settings(const HookSet& configured) {
  std::set<HookPoint> wanted;
  for (auto h : configured) {
    if (h == HookPoint::AllThree)
      wanted.insert({HookPoint::Embedding, HookPoint::Attention, HookPoint::Output, HookPoint::AllThree});
    else
      wanted.insert(h);
  }
  return {wanted.begin(), wanted.end()};
}

void cmd_attack_eval(Run& run) {
  const auto& c = run.config();
  auto d = run.prepare(c.dataset);
  json training = json::object();
  auto clean = run.clean_model(d, &training);
  auto backdoored = run.backdoored_model(d, &training);
  const BackdoorConfig base = backdoored.backdoor()->config();
  const auto words = base.trigger_words();
  const RandomSource eval_rng = run.stage("eval");

  std::vector<EvalReport> reports;
  for (auto hook : evaluation_settings(base.insertion_points)) {
    BackdoorConfig setting = base;
    setting.insertion_points = {hook};
    backdoored.attach(setting);
    auto r = evaluate(clean, backdoored, d.validation, words, d.vocab, c.metrics, eval_rng);
    r.dataset = c.dataset.name;
    r.label = to_string(hook);
    run.log("  " + r.label + ": " + csv_row(r));
    reports.push_back(std::move(r));
  }
  backdoored.attach(base);
  run.write_reports("attack_eval", reports,
                    {{"dataset", c.dataset.name}, {"training", training}, {"warnings", base.warnings()}});
}

void cmd_sweep(Run& run) {
  const auto& c = run.config();
  auto d = run.prepare(c.dataset);
  json training = json::object();
  auto clean = run.clean_model(d, &training);
  auto backdoored = run.backdoored_model(d, &training);
  const auto pool = c.sweep.variable == SweepVariable::TriggerLength ? c.sweep.trigger_pool
                                                                      : run.trigger_words(backdoored);
  SweepSpec spec{c.sweep.variable, c.sweep.values};
  run.log("sweeping " + to_string(spec.variable) + " over " + std::to_string(spec.values.size()) + " values");
  auto reports = sweep(clean, backdoored, d.validation, pool, d.vocab, c.metrics, spec, run.stage("eval"));
  for (auto& r : reports) {
    r.dataset = c.dataset.name;
    run.log("  " + r.label + ": " + csv_row(r));
  }
  run.write_reports("sweep", reports,
                    {{"dataset", c.dataset.name}, {"variable", to_string(spec.variable)}, {"values", spec.values},
                     {"training", training}});
}

struct FineTuneRow {
  std::string attack, mode, phase, dataset;
  double ca = 0, ta = 0, rasr = 0, ase_b = 0, flip_rate = 0;
};

void cmd_finetune_compare(Run& run) {
  const auto& c = run.config();
  if (!c.target_dataset) throw ConfigError("target_dataset: required for finetune-compare");
  // One vocabulary covers both tasks, as a shipped model would.
  auto target_split = load_source(*c.target_dataset);
  const auto target_texts = target_split.train_texts();
  auto source = run.prepare(c.dataset, target_texts);
  Run::Data target;
  target.split = std::move(target_split);
  target.split.validate();
  target.vocab = source.vocab;
  target.validation = Run::limited(target.split.validation, c.validation_limit);
  if (target.validation.empty()) throw InputError("target dataset has an empty validation split");
  c.poison.validate(target.split.num_classes);

  json training = json::object();
  auto architectural = run.backdoored_model(source, &training);
  auto poisoned = run.poisoned_model(source, &training);
  const auto words = run.trigger_words(architectural);
  const RandomSource eval_rng = run.stage("eval");

  std::vector<FineTuneRow> rows;
  auto arch_row = [&](EncoderModel& model, const Run::Data& data, const std::string& mode, const std::string& phase,
                      const std::string& dataset) {
    EncoderModel reference = model.clone();
    reference.detach();
    auto r = evaluate(reference, model, data.validation, words, data.vocab, c.metrics, eval_rng.derive(dataset));
    rows.push_back({"architectural", mode, phase, dataset, r.ca_b, r.ta, r.rasr, r.ase_b, 0});
  };
  auto poison_row = [&](EncoderModel& model, const Run::Data& data, const std::string& mode, const std::string& phase,
                        const std::string& dataset) {
    FineTuneRow row{"badnl", mode, phase, dataset};
    const RandomSource r = eval_rng.derive(dataset).derive("badnl");
    row.ca = accuracy(model, data.validation, data.vocab, r.derive("clean"));
    row.flip_rate = flip_rate(model, data.validation, c.poison.trigger_words, c.poison.target_label, data.vocab,
                              r.derive("flip"));
    auto triggered = triggered_copy(data.validation, c.poison.trigger_words, r.derive("trigger"));
    row.ta = accuracy(model, triggered, data.vocab, r.derive("triggered"));
    rows.push_back(row);
  };

  arch_row(architectural, source, "none", "before", c.dataset.name);
  poison_row(poisoned, source, "none", "before", c.dataset.name);
  const auto opts = run.train_options(c.finetune.epochs);
  for (auto mode : c.finetune.modes) {
    const auto name = to_string(mode);
    run.log("fine-tuning (" + name + ") on " + c.target_dataset->name);
    const RandomSource ft = run.stage("finetune").derive(name);
    auto arch_after = architectural.clone();
    fine_tune(arch_after, target.split, target.vocab, mode, opts, ft);
    arch_row(arch_after, target, name, "after", c.target_dataset->name);
    auto poison_after = poisoned.clone();
    fine_tune(poison_after, target.split, target.vocab, mode, opts, ft);
    poison_row(poison_after, target, name, "after", c.target_dataset->name);
  }

  std::string csv = "attack,mode,phase,dataset,ca,ta,rasr,ase_b,flip_rate\n";
  json out = json::array();
  for (const auto& r : rows) {
    csv += r.attack + "," + r.mode + "," + r.phase + "," + r.dataset + "," + fmt(r.ca) + "," + fmt(r.ta) + "," +
           fmt(r.rasr) + "," + fmt(r.ase_b) + "," + fmt(r.flip_rate) + "\n";
    out.push_back({{"attack", r.attack}, {"mode", r.mode},   {"phase", r.phase},
                   {"dataset", r.dataset}, {"ca", r.ca},       {"ta", r.ta},
                   {"rasr", r.rasr},       {"ase_b", r.ase_b}, {"flip_rate", r.flip_rate}});
    run.log("  " + r.attack + " " + r.mode + " " + r.phase + ": ta " + fmt(r.ta) + " rasr " + fmt(r.rasr) +
            " flip " + fmt(r.flip_rate));
  }
  run.write("finetune_compare.csv", csv);
  run.write_json("finetune_compare.json", {{"rows", out},
                                           {"poison", to_json(c.poison)},
                                           {"trigger_words", words},
                                           {"threshold", c.metrics.threshold},
                                           {"repetitions", c.metrics.repetitions},
                                           {"training", training}});
}

void cmd_defense_eval(Run& run) {
  const auto& c = run.config();
  auto d = run.prepare(c.dataset);
  json training = json::object();
  auto architectural = run.backdoored_model(d, &training);
  auto poisoned = run.poisoned_model(d, &training);
  const auto examples = Run::limited(d.validation, c.defense.max_examples);
  std::vector<LabeledExample> non_target;
  for (const auto& ex : examples)
    if (ex.label != c.poison.target_label) non_target.push_back(ex);
  const RandomSource rng = run.stage("defense");

  run.log("scanning " + std::to_string(examples.size()) + " triggered inputs (architectural)");
  const auto arch = defend(architectural, examples, run.trigger_words(architectural), d.vocab, c.defense.bddr,
                           rng.derive("architectural"));
  run.log("scanning " + std::to_string(non_target.size()) + " triggered inputs (badnl)");
  const auto badnl = defend(poisoned, non_target, c.poison.trigger_words, d.vocab, c.defense.bddr, rng.derive("badnl"));

  std::string csv = "dataset,attack,ca_b,ta,ta_defended,trigger_recall,trigger_precision\n";
  json rows = json::array();
  for (const auto& [name, s] : {std::pair{"architectural", arch}, std::pair{"badnl", badnl}}) {
    csv += c.dataset.name + "," + name + "," + fmt(s.ca_b) + "," + fmt(s.ta_before) + "," + fmt(s.ta_after) + "," +
           fmt(s.trigger_recall) + "," + fmt(s.trigger_precision) + "\n";
    json row = to_json(s);
    row["dataset"] = c.dataset.name;
    row["attack"] = name;
    rows.push_back(row);
    run.log(std::string("  ") + name + ": ta " + fmt(s.ta_before) + " -> " + fmt(s.ta_after) + ", recall " +
            fmt(s.trigger_recall));
  }
  run.write("defense_eval.csv", csv);
  run.write_json("defense_eval.json", {{"rows", rows}, {"bddr", to_json(c.defense.bddr)}, {"training", training}});
}

void cmd_dispersal(Run& run) {
  const auto& c = run.config();
  auto d = run.prepare(c.dataset);
  json training = json::object();
  auto model = run.backdoored_model(d, &training);
  const BackdoorConfig base = model.backdoor()->config();
  const RandomSource rng = run.stage("dispersal");
  const auto examples = Run::limited(d.validation, c.dispersal.max_examples);
  const auto triggered = triggered_copy(examples, base.trigger_words(), rng.derive("trigger"));
  std::vector<int> labels;
  for (const auto& ex : triggered) labels.push_back(ex.label);

  std::string csv = "sigma,centroid_distance,within_class_distance,overlap_ratio,degenerate\n";
  json rows = json::array();
  for (double sigma : c.dispersal.sigmas) {
    BackdoorConfig setting = base;
    setting.sigma1 = sigma;
    setting.sigma2 = std::min(base.sigma2, sigma);
    setting.insertion_points = {c.dispersal.hook};
    model.attach(setting);
    const auto features = extract_features(model, triggered, d.vocab, c.dispersal.hook, rng.derive("features"));
    const auto rep = dispersal(features, labels);
    csv += fmt(sigma) + "," + fmt(rep.centroid_distance) + "," + fmt(rep.within_class_distance) + "," +
           fmt(rep.overlap_ratio) + "," + (rep.degenerate ? "true" : "false") + "\n";
    json row = to_json(rep);
    row["sigma"] = sigma;
    rows.push_back(row);
    run.log("  sigma " + fmt(sigma) + ": overlap ratio " + fmt(rep.overlap_ratio));
  }
  model.attach(base);
  run.write("dispersal.csv", csv);
  run.write_json("dispersal.json", {{"hook", to_string(c.dispersal.hook)},
                                    {"labels", labels},
                                    {"rows", rows},
                                    {"training", training}});
}

void cmd_noise_compare(Run& run) {
  const auto& c = run.config();
  auto d = run.prepare(c.dataset);
  json training = json::object();
  auto clean = run.clean_model(d, &training);
  const BackdoorConfig base = run.backdoor_config(d.vocab);
  std::optional<EncoderModel> shared;
  if (!c.noise_compare.retrain) shared.emplace(run.backdoored_model(d, &training));
  const RandomSource eval_rng = run.stage("eval");

  std::vector<EvalReport> reports;
  for (auto kind : c.noise_compare.kinds) {
    BackdoorConfig setting = base;
    setting.distribution = kind;
    if (kind != base.distribution) {
      setting.clean_noise.reset();
      setting.triggered_noise.reset();
    }
    setting.validate(d.vocab.size());
    EncoderModel model = [&] {
      if (shared) {
        auto m = shared->clone();
        m.attach(setting);
        return m;
      }
      auto [m, log] = run.train_model(d, setting, to_string(kind) + "-noise");
      training[to_string(kind)] = training_log_json(log);
      return std::move(m);
    }();
    auto r = evaluate(clean, model, d.validation, setting.trigger_words(), d.vocab, c.metrics, eval_rng);
    r.dataset = c.dataset.name;
    r.label = to_string(kind);
    run.log("  " + r.label + ": " + csv_row(r));
    reports.push_back(std::move(r));
  }
  run.write_reports("noise_compare", reports, {{"dataset", c.dataset.name}, {"training", training}});
}

}  // namespace

RunManifest run_command(const std::string& command, const ExperimentConfig& config, const CommandOptions& options) {
  config.validate();
  Run run(command, config, options);
  if (command == "train")
    cmd_train(run);
  else if (command == "attack-eval")
    cmd_attack_eval(run);
  else if (command == "sweep")
    cmd_sweep(run);
  else if (command == "finetune-compare")
    cmd_finetune_compare(run);
  else if (command == "defense-eval")
    cmd_defense_eval(run);
  else if (command == "dispersal")
    cmd_dispersal(run);
  else if (command == "noise-compare")
    cmd_noise_compare(run);
  else
    throw ConfigError("unknown command '" + command + "'");
  return run.finish();
}

}  // namespace archdoor
