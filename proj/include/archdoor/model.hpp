#pragma once

#include <filesystem>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "archdoor/autograd.hpp"
#include "archdoor/backdoor.hpp"
#include "archdoor/random.hpp"
#include "archdoor/text.hpp"

namespace archdoor {

struct ModelConfig {
  std::size_t vocab_size = 0;
  std::size_t max_seq_len = kDefaultMaxSeqLen;
  std::size_t d_model = 64;
  std::size_t n_heads = 4;
  std::size_t n_layers = 2;
  std::size_t d_ff = 128;
  std::size_t num_classes = 2;
  double dropout = 0.0;

  void validate() const;
  /// Trainable scalar count; a function of the config alone.
  std::size_t parameter_count() const;

  friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

nlohmann::json to_json(const ModelConfig& config);
ModelConfig model_config_from_json(const nlohmann::json& j);

struct NamedParameter {
  std::string name;
  ag::Var var;
};

/// Post-injection features h' recorded during a forward pass, [tokens, d_model].
using FeatureCapture = std::map<HookPoint, Tensor>;

/// Encoder-only transformer classifier (post-LN blocks, sinusoidal positions,
/// mean pooling over non-PAD positions, linear head) with optional
/// backdoor module.
///
/// Sequences are processed at their true length; positions past the last
/// non-PAD token never enter the computation, which is equivalent to
/// masking them out of attention and pooling. A PAD-only sequence is run as a
/// single PAD token.
class EncoderModel {
 public:
  EncoderModel(ModelConfig config, RandomSource init_rng);
  // Parameters are shared handles, so copies would alias weights; use clone().
  EncoderModel(const EncoderModel&) = delete;
  EncoderModel& operator=(const EncoderModel&) = delete;
  EncoderModel(EncoderModel&&) = default;
  EncoderModel& operator=(EncoderModel&&) = default;

  /// Independent deep copy, including the attached backdoor.
  EncoderModel clone() const;

  const ModelConfig& config() const noexcept { return config_; }
  std::vector<NamedParameter> parameters() const;
  std::size_t parameter_count() const;
  /// Deep copy of all weights.
  std::vector<Tensor> weights() const;
  void set_weights(std::span<const Tensor> weights);

  void attach(BackdoorConfig config);
  void detach();
  bool has_backdoor() const noexcept { return backdoor_.has_value(); }
  const BackdoorModule* backdoor() const noexcept { return backdoor_ ? &*backdoor_ : nullptr; }
  BackdoorModule* backdoor() noexcept { return backdoor_ ? &*backdoor_ : nullptr; }

  /// Logits [1, k] for one sequence. `noise_rng` feeds the injector (each
  /// site uses its own derived stream); `dropout_rng` enables dropout and is
  /// only passed during training.
  ag::Var forward_one(const TokenSequence& seq, const RandomSource& noise_rng, FeatureCapture* capture = nullptr,
                      RandomSource* dropout_rng = nullptr);

  struct BatchOutput {
    Tensor logits;                           // [batch, k]
    std::vector<FeatureCapture> features;  // one per row, requested hooks only
  };
  /// Row i draws its noise from rng.derive(i). Runs without gradient recording.
  BatchOutput forward(std::span<const TokenSequence> batch, const RandomSource& rng, const HookSet& capture = {});

  /// New classifier head for `num_classes`; all other weights untouched.
  void reinit_head(std::size_t num_classes, RandomSource init_rng);
  /// Fresh random weights everywhere (and optionally a new class count).
  void reinit_all(RandomSource init_rng, std::optional<std::size_t> num_classes = std::nullopt);

 private:
  struct Layer {
    ag::Var wq, bq, wk, bk, wv, bv, wo, bo;
    ag::Var ln1_g, ln1_b;
    ag::Var w1, b1, w2, b2;
    ag::Var ln2_g, ln2_b;
  };

  void init_weights(RandomSource& rng);
  void init_head(RandomSource& rng);
  ag::Var attention(const Layer& layer, const ag::Var& x) const;

  ModelConfig config_;
  ag::Var embedding_;
  Tensor positional_;
  std::vector<Layer> layers_;
  ag::Var head_w_, head_b_;
  std::optional<BackdoorModule> backdoor_;
};

/// Everything needed to rebuild a trained model: config, vocabulary, weights
/// and the backdoor section when one was attached.
struct Checkpoint {
  ModelConfig config;
  Vocabulary vocab;
  std::vector<Tensor> weights;
  std::optional<nlohmann::json> backdoor;
  nlohmann::json metadata = nlohmann::json::object();
};

Checkpoint make_checkpoint(const EncoderModel& model, const Vocabulary& vocab,
                           nlohmann::json metadata = nlohmann::json::object());
/// Rebuilds the model and re-attaches the backdoor section, if any.
EncoderModel restore_model(const Checkpoint& checkpoint);

/// Versioned binary format: magic, version, JSON manifest, raw little-endian
/// float64 blobs in parameter order. Round-trips bit-exactly.
void save_checkpoint(const Checkpoint& checkpoint, const std::filesystem::path& path);
Checkpoint load_checkpoint(const std::filesystem::path& path);
std::string checkpoint_bytes(const Checkpoint& checkpoint);

// --- training ---------------------------------------------------------------

struct TrainOptions {
  std::size_t epochs = 10;
  double lr = 1e-3;
  std::size_t batch_size = 32;
  /// Keep an attached backdoor active (clean rows get sigma2 noise) while training.
  bool backdoor_active = true;
  bool record_validation = true;
};

struct EpochRecord {
  std::size_t epoch = 0;
  double mean_loss = 0;
  double validation_accuracy = 0;
};

struct TrainingLog {
  std::vector<EpochRecord> epochs;
};

/// Adam on mean cross-entropy over minibatches. Throws TrainingError naming
/// the epoch if the loss stops being finite.
TrainingLog train(EncoderModel& model, const DatasetSplit& split, const Vocabulary& vocab,
                  const TrainOptions& options, const RandomSource& rng);

enum class FineTuneMode { HeadReinit, FullRetrain };
std::string to_string(FineTuneMode mode);
FineTuneMode fine_tune_mode_from_string(std::string_view name);

/// Replaces the head (HeadReinit) or every weight (FullRetrain) for the new
/// task, then trains. The backdoor module stays attached in both modes.
TrainingLog fine_tune(EncoderModel& model, const DatasetSplit& new_split, const Vocabulary& vocab, FineTuneMode mode,
                      const TrainOptions& options, const RandomSource& rng);

/// Mean-pooled h' at `hook` per example, [n, d_model]. Each example draws
/// noise from a stream keyed by its text.
Tensor extract_features(EncoderModel& model, std::span<const LabeledExample> examples, const Vocabulary& vocab,
                        HookPoint hook, const RandomSource& rng);

/// Argmax with ties going to the lowest class index.
int argmax(std::span<const double> values);

/// Accuracy of single noisy forwards over `examples`.
double accuracy(EncoderModel& model, std::span<const LabeledExample> examples, const Vocabulary& vocab,
                const RandomSource& rng);

}  // namespace archdoor
