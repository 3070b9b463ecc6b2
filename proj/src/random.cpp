#include "archdoor/random.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <vector>

#include "archdoor/error.hpp"

namespace archdoor {

std::uint64_t fnv1a64(std::string_view bytes, std::uint64_t basis) {
  std::uint64_t h = basis;
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

namespace {

std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

std::mt19937_64 make_engine(std::uint64_t seed, std::uint64_t stream) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(stream), static_cast<std::uint32_t>(stream >> 32)};
  return std::mt19937_64(seq);
}

}  // namespace

RandomSource::RandomSource(std::uint64_t seed, std::uint64_t stream)
    : seed_(seed), stream_(stream), engine_(make_engine(seed, stream)) {}

RandomSource RandomSource::derive(std::uint64_t key) const {
  return RandomSource(seed_, splitmix64(stream_ ^ splitmix64(key)));
}

RandomSource RandomSource::derive(std::string_view label) const { return derive(fnv1a64(label)); }

double RandomSource::uniform() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }

double RandomSource::uniform_open() {
  // (k + 0.5) / 2^53 never hits 0 or 1.
  return (static_cast<double>(engine_() >> 11) + 0.5) * 0x1.0p-53;
}

std::uint64_t RandomSource::below(std::uint64_t n) {
  if (n == 0) throw DomainError("below(0)");
  const std::uint64_t limit = std::numeric_limits<std::uint64_t>::max() -
                              std::numeric_limits<std::uint64_t>::max() % n;
  std::uint64_t x;
  do {
    x = engine_();
  } while (x >= limit);
  return x % n;
}

// ---------------------------------------------------------------------------

std::string to_string(NoiseKind kind) {
  switch (kind) {
    case NoiseKind::Gaussian: return "gaussian";
    case NoiseKind::Binomial: return "binomial";
    case NoiseKind::Gamma: return "gamma";
    case NoiseKind::Logistic: return "logistic";
    case NoiseKind::LogSeries: return "logseries";
    case NoiseKind::Poisson: return "poisson";
    case NoiseKind::Rayleigh: return "rayleigh";
  }
  return "unknown";
}

NoiseKind noise_kind_from_string(std::string_view name) {
  for (auto k : {NoiseKind::Gaussian, NoiseKind::Binomial, NoiseKind::Gamma, NoiseKind::Logistic,
                 NoiseKind::LogSeries, NoiseKind::Poisson, NoiseKind::Rayleigh})
    if (to_string(k) == name) return k;
  throw ConfigError("unknown noise distribution '" + std::string(name) + "'");
}

NoiseDistribution NoiseDistribution::gaussian(double mean, double std) {
  return {NoiseKind::Gaussian, {{"mean", mean}, {"std", std}}};
}
NoiseDistribution NoiseDistribution::binomial(double n, double p) {
  return {NoiseKind::Binomial, {{"n", n}, {"p", p}}};
}
NoiseDistribution NoiseDistribution::gamma(double shape, double scale) {
  return {NoiseKind::Gamma, {{"shape", shape}, {"scale", scale}}};
}
NoiseDistribution NoiseDistribution::logistic(double loc, double scale) {
  return {NoiseKind::Logistic, {{"loc", loc}, {"scale", scale}}};
}
NoiseDistribution NoiseDistribution::log_series(double p) { return {NoiseKind::LogSeries, {{"p", p}}}; }
NoiseDistribution NoiseDistribution::poisson(double lambda) {
  return {NoiseKind::Poisson, {{"lambda", lambda}}};
}
NoiseDistribution NoiseDistribution::rayleigh(double scale) {
  return {NoiseKind::Rayleigh, {{"scale", scale}}};
}

double NoiseDistribution::param(const std::string& name) const {
  auto it = params.find(name);
  if (it == params.end())
    throw DomainError(to_string(kind) + " distribution is missing parameter '" + name + "'");
  return it->second;
}

void NoiseDistribution::validate() const {
  auto require = [&](bool ok, const char* what) {
    if (!ok) throw DomainError(to_string(kind) + ": " + what);
  };
  for (const auto& [name, value] : params)
    require(std::isfinite(value), "parameters must be finite");
  switch (kind) {
    case NoiseKind::Gaussian:
      param("mean");
      require(param("std") >= 0, "std must be >= 0");
      break;
    case NoiseKind::Binomial: {
      const double n = param("n"), p = param("p");
      require(n >= 0 && n == std::floor(n), "n must be a non-negative integer");
      require(p >= 0 && p <= 1, "p must lie in [0, 1]");
      break;
    }
    case NoiseKind::Gamma:
      require(param("shape") > 0, "shape must be > 0");
      require(param("scale") > 0, "scale must be > 0");
      break;
    case NoiseKind::Logistic:
      param("loc");
      require(param("scale") > 0, "scale must be > 0");
      break;
    case NoiseKind::LogSeries: {
      const double p = param("p");
      require(p > 0 && p < 1, "p must lie in (0, 1)");
      break;
    }
    case NoiseKind::Poisson: require(param("lambda") >= 0, "lambda must be >= 0"); break;
    case NoiseKind::Rayleigh: require(param("scale") > 0, "scale must be > 0"); break;
  }
}

double NoiseDistribution::mean() const {
  validate();
  switch (kind) {
    case NoiseKind::Gaussian: return param("mean");
    case NoiseKind::Binomial: return param("n") * param("p");
    case NoiseKind::Gamma: return param("shape") * param("scale");
    case NoiseKind::Logistic: return param("loc");
    case NoiseKind::LogSeries: {
      const double p = param("p");
      return -p / ((1 - p) * std::log1p(-p));
    }
    case NoiseKind::Poisson: return param("lambda");
    case NoiseKind::Rayleigh: return param("scale") * std::sqrt(std::numbers::pi / 2);
  }
  return 0;
}

double NoiseDistribution::stddev() const {
  validate();
  switch (kind) {
    case NoiseKind::Gaussian: return param("std");
    case NoiseKind::Binomial: return std::sqrt(param("n") * param("p") * (1 - param("p")));
    case NoiseKind::Gamma: return std::sqrt(param("shape")) * param("scale");
    case NoiseKind::Logistic: return param("scale") * std::numbers::pi / std::sqrt(3.0);
    case NoiseKind::LogSeries: {
      const double p = param("p"), l = std::log1p(-p);
      return std::sqrt(-p * (p + l) / ((1 - p) * (1 - p) * l * l));
    }
    case NoiseKind::Poisson: return std::sqrt(param("lambda"));
    case NoiseKind::Rayleigh: return param("scale") * std::sqrt((4 - std::numbers::pi) / 2);
  }
  return 0;
}

double gaussian_pdf(double r, double mu, double sigma) {
  if (!(sigma > 0)) throw DomainError("gaussian_pdf: sigma must be > 0");
  const double z = (r - mu) / sigma;
  return std::exp(-0.5 * z * z) / (sigma * std::sqrt(2 * std::numbers::pi));
}

// ---------------------------------------------------------------------------
// Samplers

namespace {

struct NormalPair {
  double a, b;
};

NormalPair box_muller(RandomSource& rng) {
  const double u1 = rng.uniform_open();
  const double u2 = rng.uniform();
  const double radius = std::sqrt(-2.0 * std::log(u1));
  const double angle = 2.0 * std::numbers::pi * u2;
  return {radius * std::cos(angle), radius * std::sin(angle)};
}

double standard_normal(RandomSource& rng) { return box_muller(rng).a; }

// Marsaglia & Tsang; shape < 1 boosted through Gamma(shape + 1) * U^(1/shape).
double gamma_unit(double shape, RandomSource& rng) {
  if (shape < 1) {
    const double g = gamma_unit(shape + 1, rng);
    return g * std::pow(rng.uniform_open(), 1.0 / shape);
  }
  const double d = shape - 1.0 / 3.0;
  const double c = 1.0 / std::sqrt(9.0 * d);
  for (;;) {
    const double x = standard_normal(rng);
    double v = 1 + c * x;
    if (v <= 0) continue;
    v = v * v * v;
    const double u = rng.uniform_open();
    if (u < 1 - 0.0331 * x * x * x * x) return d * v;
    if (std::log(u) < 0.5 * x * x + d * (1 - v + std::log(v))) return d * v;
  }
}

double poisson_draw(double lambda, RandomSource& rng) {
  if (lambda == 0) return 0;
  if (lambda < 10) {
    const double limit = std::exp(-lambda);
    double prod = rng.uniform();
    double k = 0;
    while (prod > limit) {
      prod *= rng.uniform();
      k += 1;
    }
    return k;
  }
  // Hoermann's transformed rejection with squeeze (PTRS).
  const double slam = std::sqrt(lambda);
  const double loglam = std::log(lambda);
  const double b = 0.931 + 2.53 * slam;
  const double a = -0.059 + 0.02483 * b;
  const double invalpha = 1.1239 + 1.1328 / (b - 3.4);
  const double vr = 0.9277 - 3.6224 / (b - 2);
  for (;;) {
    const double u = rng.uniform() - 0.5;
    const double v = rng.uniform_open();
    const double us = 0.5 - std::fabs(u);
    const double k = std::floor((2 * a / us + b) * u + lambda + 0.43);
    if (us >= 0.07 && v <= vr) return k;
    if (k < 0 || (us < 0.013 && v > us)) continue;
    if (std::log(v) + std::log(invalpha) - std::log(a / (us * us) + b) <=
        -lambda + k * loglam - std::lgamma(k + 1))
      return k;
  }
}

double binomial_inversion(double n, double p, RandomSource& rng) {
  const double q = 1 - p;
  const double s = p / q;
  const double a = (n + 1) * s;
  double r = std::pow(q, n);
  double u = rng.uniform();
  double x = 0;
  while (u > r && x < n) {
    u -= r;
    x += 1;
    r *= a / x - s;
  }
  return x;
}

// Knuth's order-statistic recursion reduces n until inversion is cheap and
// q^n cannot underflow; each step is exact.
double binomial_draw(double n, double p, RandomSource& rng) {
  double acc = 0;
  while (n * std::min(p, 1 - p) > 30) {
    const double a = 1 + std::floor(n / 2);
    const double b = n + 1 - a;
    const double x = gamma_unit(a, rng);
    const double y = gamma_unit(b, rng);
    const double beta = x / (x + y);
    if (beta >= p) {
      n = a - 1;
      p = p / beta;
    } else {
      acc += a;
      n = b - 1;
      p = (p - beta) / (1 - beta);
    }
  }
  if (p <= 0 || n == 0) return acc;
  if (p >= 1) return acc + n;
  if (p > 0.5) return acc + n - binomial_inversion(n, 1 - p, rng);
  return acc + binomial_inversion(n, p, rng);
}

// Cumulative table truncated once the remaining mass falls below 1e-12.
std::vector<double> log_series_cdf(double p) {
  const double norm = -1.0 / std::log1p(-p);
  std::vector<double> cdf;
  double term = p;  // p^k
  double total = 0;
  for (double k = 1;; k += 1) {
    total += norm * term / k;
    cdf.push_back(total);
    if (total >= 1 - 1e-12 || cdf.size() > 50'000'000) break;
    term *= p;
  }
  return cdf;
}

double log_series_draw(const std::vector<double>& cdf, RandomSource& rng) {
  const double u = rng.uniform();
  auto it = std::upper_bound(cdf.begin(), cdf.end(), u);
  if (it == cdf.end()) --it;
  return static_cast<double>(it - cdf.begin() + 1);
}

double draw(const NoiseDistribution& dist, const std::vector<double>& log_table, RandomSource& rng) {
  switch (dist.kind) {
    case NoiseKind::Gaussian:
      return dist.param("mean") + dist.param("std") * standard_normal(rng);
    case NoiseKind::Binomial: return binomial_draw(dist.param("n"), dist.param("p"), rng);
    case NoiseKind::Gamma: return dist.param("scale") * gamma_unit(dist.param("shape"), rng);
    case NoiseKind::Logistic: {
      const double u = rng.uniform_open();
      return dist.param("loc") + dist.param("scale") * std::log(u / (1 - u));
    }
    case NoiseKind::LogSeries: return log_series_draw(log_table, rng);
    case NoiseKind::Poisson: return poisson_draw(dist.param("lambda"), rng);
    case NoiseKind::Rayleigh: return dist.param("scale") * std::sqrt(-2.0 * std::log(rng.uniform_open()));
  }
  return 0;
}

}  // namespace

Tensor sample(const NoiseDistribution& dist, const Shape& shape, RandomSource& rng) {
  dist.validate();
  Tensor out(shape);
  auto data = out.data();
  if (dist.kind == NoiseKind::Gaussian) {
    const double mean = dist.param("mean"), std = dist.param("std");
    if (std == 0) {
      out.fill(mean);
      return out;
    }
    for (std::size_t i = 0; i < data.size(); i += 2) {
      const auto pair = box_muller(rng);
      data[i] = mean + std * pair.a;
      if (i + 1 < data.size()) data[i + 1] = mean + std * pair.b;
    }
    return out;
  }
  std::vector<double> table;
  if (dist.kind == NoiseKind::LogSeries) table = log_series_cdf(dist.param("p"));
  for (auto& v : data) v = draw(dist, table, rng);
  return out;
}

double sample_one(const NoiseDistribution& dist, RandomSource& rng) { return sample(dist, {1}, rng)[0]; }

}  // namespace archdoor
