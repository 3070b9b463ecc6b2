#pragma once

#include <optional>
#include <span>
#include <string>
#include <vector>

#include "archdoor/model.hpp"

namespace archdoor {

/// R predicted labels for one input.
using PredictionVector = std::vector<int>;

/// Entropy in bits of the empirical label distribution; 0 log 0 = 0.
double shannon_entropy(std::span<const int> labels);

/// Fraction of entropies strictly above `threshold`.
double rasr(std::span<const double> entropies, double threshold);

/// R forwards of one sequence, repetition r drawing noise from rng.derive(r).
PredictionVector repeated_predict(EncoderModel& model, const TokenSequence& seq, std::size_t repetitions,
                                  const RandomSource& rng);

struct EvalSettings {
  double threshold = 0.5;
  std::size_t repetitions = 20;
};

struct EvalReport {
  double ca_c = 0;
  double ca_b = 0;
  double ta = 0;
  /// ca_b / ta; +inf when ta == 0.
  double tar = 0;
  double ase_c = 0;
  double ase_b = 0;
  double rasr = 0;

  std::string dataset;
  std::string label;  // free-form row tag, e.g. the swept value
  std::size_t trigger_length = 0;
  std::vector<std::string> trigger_words;
  double sigma1 = 0;
  double sigma2 = 0;
  std::string insertion_points;
  std::string distribution;
  double threshold = 0;
  std::size_t repetitions = 0;
  std::uint64_t seed = 0;
  std::size_t num_examples = 0;
};

inline constexpr const char* kReportColumns = "ca_c,ca_b,ta,tar,ase_c,ase_b,rasr";

nlohmann::json to_json(const EvalReport& report);
/// Metric columns only, 17 significant digits.
std::string csv_row(const EvalReport& report);
std::string reports_csv(std::span<const EvalReport> reports);

/// Inserts each trigger word into every text at a random position. Example i's
/// placement depends only on its text, so the result is order-independent.
std::vector<LabeledExample> triggered_copy(std::span<const LabeledExample> examples,
                                           std::span<const std::string> trigger_words, const RandomSource& rng);

/// Per-example streams are keyed by a hash of the example text, so permuting
/// `validation` leaves every field unchanged. Sums run over sorted values.
EvalReport evaluate(EncoderModel& clean_model, EncoderModel& backdoored_model,
                    std::span<const LabeledExample> validation, std::span<const std::string> trigger_words,
                    const Vocabulary& vocab, const EvalSettings& settings, const RandomSource& rng);

enum class SweepVariable { Sigma1, Threshold, TriggerLength };
std::string to_string(SweepVariable variable);
SweepVariable sweep_variable_from_string(std::string_view name);

struct SweepSpec {
  SweepVariable variable = SweepVariable::Sigma1;
  std::vector<double> values;
};

/// One report per value. For Sigma1 and Threshold `trigger_pool` is the set of
/// words inserted into triggered inputs. TriggerLength uses the first L words
/// of it and swaps the detector's trigger accordingly. The backdoor config is
/// restored afterwards.
std::vector<EvalReport> sweep(EncoderModel& clean_model, EncoderModel& backdoored_model,
                              std::span<const LabeledExample> validation, std::span<const std::string> trigger_pool,
                              const Vocabulary& vocab, const EvalSettings& settings, const SweepSpec& spec,
                              const RandomSource& rng);

// --- feature dispersal ------------------------------------------------------

struct PrincipalComponents {
  Tensor components;  // [2, d]
  std::vector<double> eigenvalues;
  std::size_t iterations = 0;
  bool degenerate = false;
};

/// Two leading eigenvectors of the sample covariance of `x` by power
/// iteration with deflation.
PrincipalComponents leading_components(const Tensor& x, std::size_t max_iterations = 10000);

struct DispersalReport {
  Tensor centroids;  // [classes present, d]
  std::vector<int> classes;
  double centroid_distance = 0;
  double within_class_distance = 0;
  /// within_class_distance / centroid_distance; +inf when centroids coincide.
  double overlap_ratio = 0;
  Tensor projection;  // [n, 2]
  bool degenerate = false;
};

DispersalReport dispersal(const Tensor& features, std::span<const int> labels);
nlohmann::json to_json(const DispersalReport& report, bool include_projection = true);

}  // namespace archdoor
