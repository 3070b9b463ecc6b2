#pragma once

#include <optional>
#include <set>
#include <span>
#include <string>
#include <vector>

#include "archdoor/random.hpp"
#include "archdoor/tensor.hpp"
#include "archdoor/text.hpp"
#include "json.hpp"

namespace archdoor {

/// Where the noise injector sits in the encoder.
enum class HookPoint { Embedding, Attention, Output, AllThree };

using HookSet = std::set<HookPoint>;

std::string to_string(HookPoint hook);
HookPoint hook_point_from_string(std::string_view name);
/// Replaces AllThree with {Embedding, Attention, Output}.
HookSet resolve_sites(const HookSet& hooks);
std::string hook_set_string(const HookSet& hooks);

/// Attacker-chosen trigger: every id must occur in the input for it to fire.
struct TriggerSpec {
  std::vector<int> ids;
  std::vector<std::string> words;

  /// Maps words through `vocab`. A word the vocabulary does not know would
  /// become UNK and fire on every unknown token, so that is a ConfigError.
  static TriggerSpec from_words(std::span<const std::string> words, const Vocabulary& vocab);
  void validate() const;
};

/// Noise with the requested standard deviation in the shape natural to `kind`
/// (Gaussian N(0, std), Binomial(4 std^2, 1/2), Gamma(1, std), ...).
/// std == 0 yields a degenerate zero distribution for every kind.
NoiseDistribution noise_with_std(NoiseKind kind, double std);

struct BackdoorConfig {
  std::vector<TriggerSpec> triggers;
  /// More than one trigger is only accepted when this is set; any match fires.
  bool allow_multiple_triggers = false;
  double sigma1 = 50.0;  // triggered
  double sigma2 = 1.0;   // clean
  double bias = 0.0;
  NoiseKind distribution = NoiseKind::Gaussian;
  /// Explicit parameters for non-Gaussian kinds; default to noise_with_std().
  std::optional<NoiseDistribution> clean_noise;
  std::optional<NoiseDistribution> triggered_noise;
  HookSet insertion_points{HookPoint::Output};
  /// Attention hook on every layer's attention output, or only the first layer's.
  bool attention_all_layers = true;

  /// Throws ConfigError. `vocab_size` bounds the trigger ids when non-zero.
  void validate(std::size_t vocab_size = 0) const;
  /// Soft guidance: sigma2 near 1 and sigma1 above 30.
  std::vector<std::string> warnings() const;
  /// Law of the additive noise in either mode, before the bias shift.
  NoiseDistribution noise(bool triggered) const;
  std::vector<std::string> trigger_words() const;
};

nlohmann::json to_json(const BackdoorConfig& config);
/// Trigger ids are re-derived from words through `vocab`.
BackdoorConfig backdoor_config_from_json(const nlohmann::json& j, const Vocabulary& vocab);

/// True iff every trigger id occurs among `tokens` (order and adjacency ignored).
bool trigger_present(std::span<const int> tokens, const TriggerSpec& trigger);

/// Detector: sigma1 when the trigger is a subset of the sequence's non-PAD ids, else sigma2.
double detect(const TokenSequence& seq, const TriggerSpec& trigger, double sigma1, double sigma2);
double detect(std::span<const int> tokens, const TriggerSpec& trigger, double sigma1, double sigma2);

/// h' = h + eps, eps drawn i.i.d. from `noise` then shifted by `bias`.
Tensor inject(const Tensor& h, const NoiseDistribution& noise, double bias, RandomSource& rng);
/// Same with noise_with_std(kind, sigma).
Tensor inject(const Tensor& h, double sigma, double bias, NoiseKind kind, RandomSource& rng);

/// Trigger detector plus noise injector, attachable to an EncoderModel.
///
/// The only state is the per-forward decision cache, overwritten on every
/// call to decide().
class BackdoorModule {
 public:
  explicit BackdoorModule(BackdoorConfig config);

  const BackdoorConfig& config() const noexcept { return config_; }
  BackdoorConfig& mutable_config() noexcept { return config_; }

  bool fires(std::span<const int> tokens) const;
  /// Runs the detector over a batch and caches one decision per row.
  void decide(std::span<const std::span<const int>> batch_tokens);
  bool triggered(std::size_t row) const { return triggered_.at(row); }
  double sigma(std::size_t row) const;
  const std::vector<bool>& decisions() const noexcept { return triggered_; }

  bool injects_at(HookPoint site, std::size_t layer = 0) const;
  /// Noise tensor for `row` at one site; counts injections.
  Tensor draw(std::size_t row, const Shape& shape, RandomSource& rng) const;
  std::size_t injection_count() const noexcept { return injections_; }
  void reset_injection_count() noexcept { injections_ = 0; }

 private:
  BackdoorConfig config_;
  HookSet sites_;
  std::vector<bool> triggered_;
  mutable std::size_t injections_ = 0;
};

}  // namespace archdoor
