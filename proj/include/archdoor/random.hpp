#pragma once

#include <cstdint>
#include <map>
#include <random>
#include <string>
#include <string_view>

#include "archdoor/tensor.hpp"

namespace archdoor {

/// 64-bit FNV-1a. Used for stream labels, content keys and run hashes.
std::uint64_t fnv1a64(std::string_view bytes, std::uint64_t basis = 0xcbf29ce484222325ULL);

/// Seeded, platform-independent random stream.
///
/// The engine is std::mt19937_64 seeded through std::seed_seq, both of which
/// the standard specifies bit-for-bit. All real-valued transforms are done
/// here rather than with <random> distributions, whose algorithms are
/// implementation-defined.
///
/// Streams form a tree: derive(key) returns a child stream whose id is a
/// hash of (parent stream id, key). Every random decision in a run is reached
/// by a named path from the master seed, e.g.
/// `master.derive("eval").derive(example_key).derive(repetition)`.
class RandomSource {
 public:
  explicit RandomSource(std::uint64_t seed, std::uint64_t stream = 0);

  std::uint64_t seed() const noexcept { return seed_; }
  std::uint64_t stream() const noexcept { return stream_; }

  RandomSource derive(std::uint64_t key) const;
  RandomSource derive(std::string_view label) const;

  std::uint64_t next_u64() { return engine_(); }
  /// Uniform on [0, 1) with 53 random bits.
  double uniform();
  /// Uniform on (0, 1).
  double uniform_open();
  /// Unbiased integer in [0, n).
  std::uint64_t below(std::uint64_t n);

 private:
  std::uint64_t seed_;
  std::uint64_t stream_;
  std::mt19937_64 engine_;
};

enum class NoiseKind { Gaussian, Binomial, Gamma, Logistic, LogSeries, Poisson, Rayleigh };

std::string to_string(NoiseKind kind);
NoiseKind noise_kind_from_string(std::string_view name);

/// A noise law plus its parameters.
///
/// Parameter names per kind:
///   Gaussian  mean, std
///   Binomial  n, p
///   Gamma     shape, scale
///   Logistic  loc, scale
///   LogSeries p
///   Poisson   lambda
///   Rayleigh  scale
struct NoiseDistribution {
  NoiseKind kind = NoiseKind::Gaussian;
  std::map<std::string, double> params;

  static NoiseDistribution gaussian(double mean, double std);
  static NoiseDistribution binomial(double n, double p);
  static NoiseDistribution gamma(double shape, double scale);
  static NoiseDistribution logistic(double loc, double scale);
  static NoiseDistribution log_series(double p);
  static NoiseDistribution poisson(double lambda);
  static NoiseDistribution rayleigh(double scale);

  double param(const std::string& name) const;
  /// Throws DomainError when a parameter is missing or out of range.
  void validate() const;
  double mean() const;
  double stddev() const;

  friend bool operator==(const NoiseDistribution&, const NoiseDistribution&) = default;
};

/// Normal density at r. Throws DomainError for sigma <= 0.
double gaussian_pdf(double r, double mu, double sigma);

/// i.i.d. draws from `dist` laid out in `shape`.
///
/// Gaussian draws use Box-Muller and always consume both variates of a pair,
/// so the number of uniforms taken from `rng` depends only on the element count.
Tensor sample(const NoiseDistribution& dist, const Shape& shape, RandomSource& rng);

/// Single draw; for Gaussian this burns a full Box-Muller pair.
double sample_one(const NoiseDistribution& dist, RandomSource& rng);

}  // namespace archdoor
