#include "archdoor/model.hpp"

#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <numeric>
#include <sstream>

#include "archdoor/error.hpp"
#include "archdoor/optim.hpp"

namespace archdoor {

using nlohmann::json;

void ModelConfig::validate() const {
  auto require = [](bool ok, const std::string& what) {
    if (!ok) throw ConfigError("model." + what);
  };
  require(vocab_size > 2, "vocab_size must exceed the two reserved ids");
  require(max_seq_len > 0, "max_seq_len must be positive");
  require(d_model > 0, "d_model must be positive");
  require(n_heads > 0, "n_heads must be positive");
  require(d_model % n_heads == 0, "d_model must be divisible by n_heads");
  require(n_layers > 0, "n_layers must be positive");
  require(d_ff > 0, "d_ff must be positive");
  require(num_classes >= 2, "num_classes must be >= 2");
  require(dropout >= 0 && dropout < 1, "dropout must lie in [0, 1)");
}

std::size_t ModelConfig::parameter_count() const {
  const std::size_t d = d_model;
  const std::size_t per_layer = 4 * (d * d + d) + 2 * (2 * d) + (d * d_ff + d_ff) + (d_ff * d + d);
  return vocab_size * d + n_layers * per_layer + d * num_classes + num_classes;
}

json to_json(const ModelConfig& c) {
  return {{"vocab_size", c.vocab_size}, {"max_seq_len", c.max_seq_len}, {"d_model", c.d_model},
          {"n_heads", c.n_heads},       {"n_layers", c.n_layers},       {"d_ff", c.d_ff},
          {"num_classes", c.num_classes}, {"dropout", c.dropout}};
}

ModelConfig model_config_from_json(const json& j) {
  ModelConfig c;
  try {
    c.vocab_size = j.value("vocab_size", c.vocab_size);
    c.max_seq_len = j.value("max_seq_len", c.max_seq_len);
    c.d_model = j.value("d_model", c.d_model);
    c.n_heads = j.value("n_heads", c.n_heads);
    c.n_layers = j.value("n_layers", c.n_layers);
    c.d_ff = j.value("d_ff", c.d_ff);
    c.num_classes = j.value("num_classes", c.num_classes);
    c.dropout = j.value("dropout", c.dropout);
  } catch (const json::exception& e) {
    throw ConfigError(std::string("model: ") + e.what());
  }
  return c;
}

// ---------------------------------------------------------------------------

namespace {

Tensor xavier(std::size_t fan_in, std::size_t fan_out, RandomSource& rng) {
  Tensor t({fan_in, fan_out});
  const double a = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
  for (auto& v : t.data()) v = (2 * rng.uniform() - 1) * a;
  return t;
}

Tensor sinusoidal_positions(std::size_t length, std::size_t d) {
  Tensor pe({length, d});
  for (std::size_t pos = 0; pos < length; ++pos)
    for (std::size_t i = 0; i < d; i += 2) {
      const double angle = static_cast<double>(pos) / std::pow(10000.0, static_cast<double>(i) / static_cast<double>(d));
      pe.at(pos, i) = std::sin(angle);
      if (i + 1 < d) pe.at(pos, i + 1) = std::cos(angle);
    }
  return pe;
}

ag::Var param(Tensor t) { return ag::Var::parameter(std::move(t)); }

}  // namespace

EncoderModel::EncoderModel(ModelConfig config, RandomSource init_rng) : config_(std::move(config)) {
  config_.validate();
  positional_ = sinusoidal_positions(config_.max_seq_len, config_.d_model);
  init_weights(init_rng);
}

void EncoderModel::init_weights(RandomSource& rng) {
  const std::size_t d = config_.d_model, ff = config_.d_ff;
  Tensor emb({config_.vocab_size, d});
  const auto emb_dist = NoiseDistribution::gaussian(0, 1.0 / std::sqrt(static_cast<double>(d)));
  emb = sample(emb_dist, emb.shape(), rng);
  embedding_ = param(std::move(emb));
  layers_.clear();
  for (std::size_t l = 0; l < config_.n_layers; ++l) {
    Layer layer;
    layer.wq = param(xavier(d, d, rng));
    layer.bq = param(Tensor({d}));
    layer.wk = param(xavier(d, d, rng));
    layer.bk = param(Tensor({d}));
    layer.wv = param(xavier(d, d, rng));
    layer.bv = param(Tensor({d}));
    layer.wo = param(xavier(d, d, rng));
    layer.bo = param(Tensor({d}));
    layer.ln1_g = param(Tensor({d}, 1.0));
    layer.ln1_b = param(Tensor({d}));
    layer.w1 = param(xavier(d, ff, rng));
    layer.b1 = param(Tensor({ff}));
    layer.w2 = param(xavier(ff, d, rng));
    layer.b2 = param(Tensor({d}));
    layer.ln2_g = param(Tensor({d}, 1.0));
    layer.ln2_b = param(Tensor({d}));
    layers_.push_back(std::move(layer));
  }
  init_head(rng);
}

void EncoderModel::init_head(RandomSource& rng) {
  head_w_ = param(xavier(config_.d_model, config_.num_classes, rng));
  head_b_ = param(Tensor({config_.num_classes}));
}

std::vector<NamedParameter> EncoderModel::parameters() const {
  std::vector<NamedParameter> out{{"embedding", embedding_}};
  for (std::size_t l = 0; l < layers_.size(); ++l) {
    const auto& L = layers_[l];
    const std::string p = "layer" + std::to_string(l) + ".";
    for (auto& [n, v] : std::initializer_list<std::pair<const char*, ag::Var>>{
             {"wq", L.wq}, {"bq", L.bq}, {"wk", L.wk}, {"bk", L.bk}, {"wv", L.wv}, {"bv", L.bv},
             {"wo", L.wo}, {"bo", L.bo}, {"ln1_g", L.ln1_g}, {"ln1_b", L.ln1_b}, {"w1", L.w1},
             {"b1", L.b1}, {"w2", L.w2}, {"b2", L.b2}, {"ln2_g", L.ln2_g}, {"ln2_b", L.ln2_b}})
      out.push_back({p + n, v});
  }
  out.push_back({"head.w", head_w_});
  out.push_back({"head.b", head_b_});
  return out;
}

std::size_t EncoderModel::parameter_count() const {
  std::size_t n = 0;
  for (const auto& p : parameters()) n += p.var.value().size();
  return n;
}

std::vector<Tensor> EncoderModel::weights() const {
  std::vector<Tensor> out;
  for (const auto& p : parameters()) out.push_back(p.var.value());
  return out;
}

void EncoderModel::set_weights(std::span<const Tensor> weights) {
  auto params = parameters();
  if (weights.size() != params.size())
    throw ShapeError("set_weights: expected " + std::to_string(params.size()) + " tensors, got " +
                     std::to_string(weights.size()));
  for (std::size_t i = 0; i < params.size(); ++i)
    if (weights[i].shape() != params[i].var.shape())
      throw ShapeError("set_weights: shape mismatch for " + params[i].name);
  for (std::size_t i = 0; i < params.size(); ++i) params[i].var.value() = weights[i];
}

EncoderModel EncoderModel::clone() const {
  EncoderModel copy(config_, RandomSource(0));
  copy.set_weights(weights());
  if (backdoor_) copy.attach(backdoor_->config());
  return copy;
}

void EncoderModel::attach(BackdoorConfig config) {
  config.validate(config_.vocab_size);
  backdoor_.emplace(std::move(config));
}

void EncoderModel::detach() { backdoor_.reset(); }

void EncoderModel::reinit_head(std::size_t num_classes, RandomSource init_rng) {
  config_.num_classes = num_classes;
  config_.validate();
  init_head(init_rng);
}

void EncoderModel::reinit_all(RandomSource init_rng, std::optional<std::size_t> num_classes) {
  if (num_classes) config_.num_classes = *num_classes;
  config_.validate();
  init_weights(init_rng);
}

// ---------------------------------------------------------------------------

ag::Var EncoderModel::attention(const Layer& layer, const ag::Var& x) const {
  const std::size_t heads = config_.n_heads;
  const std::size_t head_dim = config_.d_model / heads;
  const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(head_dim));
  auto q = ag::add_row(ag::matmul(x, layer.wq), layer.bq);
  auto k = ag::add_row(ag::matmul(x, layer.wk), layer.bk);
  auto v = ag::add_row(ag::matmul(x, layer.wv), layer.bv);
  std::vector<ag::Var> outputs;
  outputs.reserve(heads);
  for (std::size_t h = 0; h < heads; ++h) {
    auto qh = ag::slice_cols(q, h * head_dim, head_dim);
    auto kh = ag::slice_cols(k, h * head_dim, head_dim);
    auto vh = ag::slice_cols(v, h * head_dim, head_dim);
    auto weights = ag::softmax(ag::scale(ag::matmul(qh, kh, /*transpose_b=*/true), inv_sqrt));
    outputs.push_back(ag::matmul(weights, vh));
  }
  return ag::add_row(ag::matmul(ag::concat_cols(outputs), layer.wo), layer.bo);
}

ag::Var EncoderModel::forward_one(const TokenSequence& seq, const RandomSource& noise_rng, FeatureCapture* capture,
                                  RandomSource* dropout_rng) {
  std::vector<int> ids(seq.tokens().begin(), seq.tokens().end());
  if (ids.empty()) ids.push_back(kPadId);
  if (ids.size() > config_.max_seq_len) ids.resize(config_.max_seq_len);
  for (int id : ids)
    if (id < 0 || static_cast<std::size_t>(id) >= config_.vocab_size)
      throw InputError("token id " + std::to_string(id) + " outside vocabulary of size " +
                       std::to_string(config_.vocab_size));

  const std::size_t n = ids.size(), d = config_.d_model;
  const Shape feature_shape{n, d};

  if (backdoor_) {
    const std::span<const int> row{seq.tokens()};
    backdoor_->decide(std::span<const std::span<const int>>(&row, 1));
  }
  auto maybe_inject = [&](ag::Var h, HookPoint site, std::size_t layer, std::string_view label) {
    if (backdoor_ && backdoor_->injects_at(site, layer)) {
      RandomSource site_rng = noise_rng.derive(label).derive(layer);
      h = ag::add_constant(h, backdoor_->draw(0, feature_shape, site_rng));
    }
    return h;
  };
  auto maybe_dropout = [&](const ag::Var& h) {
    return dropout_rng && config_.dropout > 0 ? ag::dropout(h, config_.dropout, *dropout_rng) : h;
  };

  Tensor positions({n, d});
  std::copy_n(positional_.data().begin(), n * d, positions.data().begin());
  auto x = ag::add_constant(ag::scale(ag::embedding(embedding_, ids), std::sqrt(static_cast<double>(d))), positions);
  x = maybe_inject(x, HookPoint::Embedding, 0, "embedding");
  if (capture) (*capture)[HookPoint::Embedding] = x.value();
  x = maybe_dropout(x);

  for (std::size_t l = 0; l < layers_.size(); ++l) {
    const auto& layer = layers_[l];
    auto a = attention(layer, x);
    a = maybe_inject(a, HookPoint::Attention, l, "attention");
    if (capture && l == 0) (*capture)[HookPoint::Attention] = a.value();
    x = ag::layer_norm(ag::add(x, maybe_dropout(a)), layer.ln1_g, layer.ln1_b);
    auto f = ag::add_row(ag::matmul(ag::relu(ag::add_row(ag::matmul(x, layer.w1), layer.b1)), layer.w2), layer.b2);
    x = ag::layer_norm(ag::add(x, maybe_dropout(f)), layer.ln2_g, layer.ln2_b);
  }
  x = maybe_inject(x, HookPoint::Output, 0, "output");
  if (capture) (*capture)[HookPoint::Output] = x.value();

  auto logits = ag::add_row(ag::matmul(ag::mean_rows(x), head_w_), head_b_);
  if (!logits.value().all_finite()) throw TrainingError("forward produced non-finite logits");
  return logits;
}

EncoderModel::BatchOutput EncoderModel::forward(std::span<const TokenSequence> batch, const RandomSource& rng,
                                                const HookSet& capture) {
  ag::NoGradGuard no_grad;
  BatchOutput out;
  out.logits = Tensor({batch.size(), config_.num_classes});
  std::vector<bool> decisions;
  for (std::size_t i = 0; i < batch.size(); ++i) {
    FeatureCapture features;
    auto logits = forward_one(batch[i], rng.derive(i), capture.empty() ? nullptr : &features);
    if (backdoor_) decisions.push_back(backdoor_->triggered(0));
    std::copy_n(logits.value().data().begin(), config_.num_classes,
                out.logits.data().begin() + static_cast<std::ptrdiff_t>(i * config_.num_classes));
    if (!capture.empty()) {
      FeatureCapture kept;
      for (auto h : resolve_sites(capture)) kept[h] = std::move(features[h]);
      out.features.push_back(std::move(kept));
    }
  }
  if (backdoor_) {
    std::vector<std::span<const int>> rows;
    for (const auto& s : batch) rows.push_back(s.tokens());
    backdoor_->decide(rows);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Checkpoints

namespace {

constexpr char kMagic[8] = {'A', 'R', 'C', 'H', 'D', 'O', 'O', 'R'};
constexpr std::uint32_t kCheckpointVersion = 1;

void put_u64(std::string& out, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

std::uint64_t get_u64(std::string_view in, std::size_t& pos) {
  if (pos + 8 > in.size()) throw ParseError("checkpoint truncated", 0);
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(static_cast<unsigned char>(in[pos + i])) << (8 * i);
  pos += 8;
  return v;
}

}  // namespace

Checkpoint make_checkpoint(const EncoderModel& model, const Vocabulary& vocab, json metadata) {
  Checkpoint ck;
  ck.config = model.config();
  ck.vocab = vocab;
  ck.weights = model.weights();
  if (model.backdoor()) ck.backdoor = to_json(model.backdoor()->config());
  ck.metadata = std::move(metadata);
  return ck;
}

EncoderModel restore_model(const Checkpoint& ck) {
  EncoderModel model(ck.config, RandomSource(0));
  model.set_weights(ck.weights);
  if (ck.backdoor) model.attach(backdoor_config_from_json(*ck.backdoor, ck.vocab));
  return model;
}

std::string checkpoint_bytes(const Checkpoint& ck) {
  json names = json::array();
  {
    EncoderModel shape_only(ck.config, RandomSource(0));
    auto params = shape_only.parameters();
    if (params.size() != ck.weights.size()) throw ShapeError("checkpoint: weight count does not match config");
    for (std::size_t i = 0; i < params.size(); ++i) {
      if (params[i].var.shape() != ck.weights[i].shape())
        throw ShapeError("checkpoint: shape mismatch for " + params[i].name);
      names.push_back({{"name", params[i].name}, {"shape", ck.weights[i].shape()}});
    }
  }
  json manifest = {{"format_version", kCheckpointVersion},
                   {"model", to_json(ck.config)},
                   {"vocabulary", ck.vocab.tokens()},
                   {"parameters", names},
                   {"metadata", ck.metadata}};
  if (ck.backdoor) manifest["backdoor"] = *ck.backdoor;
  const std::string text = manifest.dump();

  std::string out(kMagic, sizeof kMagic);
  put_u64(out, kCheckpointVersion);
  put_u64(out, text.size());
  out += text;
  for (const auto& w : ck.weights)
    for (double v : w.data()) put_u64(out, std::bit_cast<std::uint64_t>(v));
  return out;
}

void save_checkpoint(const Checkpoint& ck, const std::filesystem::path& path) {
  const auto bytes = checkpoint_bytes(ck);
  std::ofstream out(path, std::ios::binary);
  if (!out) throw InputError("cannot write checkpoint " + path.string());
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw InputError("cannot open checkpoint " + path.string());
  std::stringstream buf;
  buf << in.rdbuf();
  const std::string bytes = buf.str();
  if (bytes.size() < sizeof kMagic || std::memcmp(bytes.data(), kMagic, sizeof kMagic) != 0)
    throw InputError(path.string() + " is not a checkpoint");
  std::size_t pos = sizeof kMagic;
  const auto version = get_u64(bytes, pos);
  if (version != kCheckpointVersion)
    throw InputError("unsupported checkpoint version " + std::to_string(version));
  const auto length = get_u64(bytes, pos);
  if (pos + length > bytes.size()) throw InputError("checkpoint manifest truncated");
  json manifest;
  try {
    manifest = json::parse(bytes.substr(pos, length));
  } catch (const json::exception& e) {
    throw InputError(std::string("checkpoint manifest: ") + e.what());
  }
  pos += length;

  Checkpoint ck;
  ck.config = model_config_from_json(manifest.at("model"));
  ck.vocab = Vocabulary::from_tokens(manifest.at("vocabulary").get<std::vector<std::string>>());
  ck.metadata = manifest.value("metadata", json::object());
  if (manifest.contains("backdoor")) ck.backdoor = manifest.at("backdoor");
  for (const auto& p : manifest.at("parameters")) {
    Tensor t(p.at("shape").get<Shape>());
    for (auto& v : t.data()) v = std::bit_cast<double>(get_u64(bytes, pos));
    ck.weights.push_back(std::move(t));
  }
  if (pos != bytes.size()) throw InputError("checkpoint has trailing bytes");
  return ck;
}

// ---------------------------------------------------------------------------
// Training

int argmax(std::span<const double> values) {
  int best = 0;
  for (std::size_t i = 1; i < values.size(); ++i)
    if (values[i] > values[static_cast<std::size_t>(best)]) best = static_cast<int>(i);
  return best;
}

namespace {

std::vector<TokenSequence> encode_all(std::span<const LabeledExample> examples, const Vocabulary& vocab,
                                      std::size_t max_len) {
  std::vector<TokenSequence> out;
  out.reserve(examples.size());
  for (const auto& ex : examples) out.push_back(encode(ex.text, vocab, max_len));
  return out;
}

}  // namespace

double accuracy(EncoderModel& model, std::span<const LabeledExample> examples, const Vocabulary& vocab,
                const RandomSource& rng) {
  if (examples.empty()) throw InputError("accuracy over an empty example list");
  ag::NoGradGuard no_grad;
  std::size_t correct = 0;
  for (const auto& ex : examples) {
    const auto seq = encode(ex.text, vocab, model.config().max_seq_len);
    const auto logits = model.forward_one(seq, rng.derive(fnv1a64(ex.text)));
    if (argmax(logits.value().data()) == ex.label) ++correct;
  }
  return static_cast<double>(correct) / static_cast<double>(examples.size());
}

TrainingLog train(EncoderModel& model, const DatasetSplit& split, const Vocabulary& vocab,
                  const TrainOptions& options, const RandomSource& rng) {
  if (split.train.empty()) throw InputError("train: empty train split");
  if (split.num_classes != model.config().num_classes)
    throw InputError("train: dataset has " + std::to_string(split.num_classes) + " classes, model head has " +
                     std::to_string(model.config().num_classes));
  if (options.batch_size == 0) throw ConfigError("training.batch_size must be positive");
  if (!(options.lr > 0)) throw ConfigError("training.lr must be positive");

  TrainingLog log;
  if (options.epochs == 0) return log;

  // Temporarily remove the module when training is meant to be noise-free.
  std::optional<BackdoorConfig> parked;
  if (!options.backdoor_active && model.backdoor()) {
    parked = model.backdoor()->config();
    model.detach();
  }

  const auto sequences = encode_all(split.train, vocab, model.config().max_seq_len);
  std::vector<ag::Var> params;
  for (auto& p : model.parameters()) params.push_back(p.var);
  auto state = AdamState::for_params(params);
  std::vector<std::size_t> order(sequences.size());

  for (std::size_t epoch = 1; epoch <= options.epochs; ++epoch) {
    std::iota(order.begin(), order.end(), std::size_t{0});
    RandomSource shuffle_rng = rng.derive("shuffle").derive(epoch);
    for (std::size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[shuffle_rng.below(i)]);
    RandomSource dropout_rng = rng.derive("dropout").derive(epoch);
    const RandomSource noise_rng = rng.derive("noise").derive(epoch);

    double loss_sum = 0;
    for (std::size_t start = 0; start < order.size(); start += options.batch_size) {
      const std::size_t end = std::min(order.size(), start + options.batch_size);
      const double weight = 1.0 / static_cast<double>(end - start);
      for (auto& p : params) p.zero_grad();
      for (std::size_t b = start; b < end; ++b) {
        const std::size_t idx = order[b];
        auto logits = model.forward_one(sequences[idx], noise_rng.derive(idx), nullptr, &dropout_rng);
        auto loss = ag::cross_entropy(logits, split.train[idx].label);
        const double value = loss.value()[0];
        if (!std::isfinite(value)) {
          if (parked) model.attach(*parked);
          throw TrainingError("training diverged (non-finite loss) in epoch " + std::to_string(epoch));
        }
        loss_sum += value;
        ag::backward(ag::scale(loss, weight));
      }
      adam_step(params, state, options.lr);
    }
    EpochRecord record{epoch, loss_sum / static_cast<double>(order.size()), 0.0};
    if (options.record_validation && !split.validation.empty())
      record.validation_accuracy = accuracy(model, split.validation, vocab, rng.derive("validation").derive(epoch));
    log.epochs.push_back(record);
  }
  if (parked) model.attach(*parked);
  return log;
}

std::string to_string(FineTuneMode mode) { return mode == FineTuneMode::HeadReinit ? "head-reinit" : "full-retrain"; }

FineTuneMode fine_tune_mode_from_string(std::string_view name) {
  if (name == "head-reinit") return FineTuneMode::HeadReinit;
  if (name == "full-retrain") return FineTuneMode::FullRetrain;
  throw ConfigError("unknown fine-tune mode '" + std::string(name) + "'");
}

TrainingLog fine_tune(EncoderModel& model, const DatasetSplit& new_split, const Vocabulary& vocab, FineTuneMode mode,
                      const TrainOptions& options, const RandomSource& rng) {
  if (new_split.train.empty()) throw InputError("fine_tune: empty train split");
  if (mode == FineTuneMode::HeadReinit)
    model.reinit_head(new_split.num_classes, rng.derive("head-init"));
  else
    model.reinit_all(rng.derive("full-init"), new_split.num_classes);
  return train(model, new_split, vocab, options, rng.derive("fine-tune"));
}

Tensor extract_features(EncoderModel& model, std::span<const LabeledExample> examples, const Vocabulary& vocab,
                        HookPoint hook, const RandomSource& rng) {
  if (hook == HookPoint::AllThree) throw InputError("extract_features: choose a single hook");
  if (examples.empty()) throw InputError("extract_features: no examples");
  ag::NoGradGuard no_grad;
  const std::size_t d = model.config().d_model;
  Tensor out({examples.size(), d});
  for (std::size_t i = 0; i < examples.size(); ++i) {
    FeatureCapture capture;
    const auto seq = encode(examples[i].text, vocab, model.config().max_seq_len);
    model.forward_one(seq, rng.derive(fnv1a64(examples[i].text)), &capture);
    const Tensor& h = capture.at(hook);
    for (std::size_t r = 0; r < h.rows(); ++r)
      for (std::size_t c = 0; c < d; ++c) out.at(i, c) += h.at(r, c) / static_cast<double>(h.rows());
  }
  return out;
}

}  // namespace archdoor
