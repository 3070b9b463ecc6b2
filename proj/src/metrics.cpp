#include "archdoor/metrics.hpp"

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <cstdio>
#include <limits>
#include <map>
#include <numeric>

#include "archdoor/error.hpp"

namespace archdoor {

using nlohmann::json;

double shannon_entropy(std::span<const int> labels) {
  if (labels.empty()) throw InputError("shannon_entropy of an empty prediction vector");
  std::map<int, std::size_t> counts;
  for (int l : labels) ++counts[l];
  const double n = static_cast<double>(labels.size());
  double h = 0;
  for (const auto& [label, count] : counts) {
    const double p = static_cast<double>(count) / n;
    h -= p * std::log2(p);
  }
  return h == 0 ? 0.0 : h;
}

double rasr(std::span<const double> entropies, double threshold) {
  if (entropies.empty()) throw InputError("rasr: no entropies");
  const auto above = std::count_if(entropies.begin(), entropies.end(), [&](double h) { return h > threshold; });
  return static_cast<double>(above) / static_cast<double>(entropies.size());
}

PredictionVector repeated_predict(EncoderModel& model, const TokenSequence& seq, std::size_t repetitions,
                                  const RandomSource& rng) {
  if (repetitions == 0) throw InputError("repeated_predict: repetitions must be positive");
  ag::NoGradGuard no_grad;
  PredictionVector out;
  out.reserve(repetitions);
  for (std::size_t r = 0; r < repetitions; ++r)
    out.push_back(argmax(model.forward_one(seq, rng.derive(r)).value().data()));
  return out;
}

std::vector<LabeledExample> triggered_copy(std::span<const LabeledExample> examples,
                                           std::span<const std::string> trigger_words, const RandomSource& rng) {
  std::vector<LabeledExample> out;
  out.reserve(examples.size());
  for (const auto& ex : examples) {
    RandomSource r = rng.derive(fnv1a64(ex.text));
    out.push_back({insert_trigger(ex.text, trigger_words, r), ex.label});
  }
  return out;
}

namespace {

double sorted_mean(std::vector<double> values) {
  std::sort(values.begin(), values.end());
  double s = 0;
  for (double v : values) s += v;
  return s / static_cast<double>(values.size());
}

struct Measurements {
  EvalReport report;
  std::vector<double> triggered_entropy;
};

std::vector<double> entropies(EncoderModel& model, std::span<const LabeledExample> examples, const Vocabulary& vocab,
                              std::size_t repetitions, const RandomSource& rng) {
  std::vector<double> out;
  out.reserve(examples.size());
  for (const auto& ex : examples) {
    const auto seq = encode(ex.text, vocab, model.config().max_seq_len);
    out.push_back(shannon_entropy(repeated_predict(model, seq, repetitions, rng.derive(fnv1a64(ex.text)))));
  }
  return out;
}

Measurements measure(EncoderModel& clean_model, EncoderModel& backdoored_model,
                     std::span<const LabeledExample> validation, std::span<const std::string> trigger_words,
                     const Vocabulary& vocab, const EvalSettings& settings, const RandomSource& rng) {
  if (validation.empty()) throw InputError("evaluate: empty validation split");
  if (settings.repetitions < 2) throw ConfigError("metrics.repetitions must be >= 2");
  if (!(settings.threshold >= 0)) throw ConfigError("metrics.threshold must be >= 0");

  const auto triggered = triggered_copy(validation, trigger_words, rng.derive("trigger"));
  Measurements m;
  EvalReport& r = m.report;
  r.ca_c = accuracy(clean_model, validation, vocab, rng.derive("clean-model"));
  r.ca_b = accuracy(backdoored_model, validation, vocab, rng.derive("backdoored-model"));
  r.ta = accuracy(backdoored_model, triggered, vocab, rng.derive("triggered"));
  r.tar = r.ta > 0 ? r.ca_b / r.ta : std::numeric_limits<double>::infinity();
  r.ase_c = sorted_mean(entropies(backdoored_model, validation, vocab, settings.repetitions, rng.derive("repeat-clean")));
  m.triggered_entropy = entropies(backdoored_model, triggered, vocab, settings.repetitions, rng.derive("repeat-triggered"));
  r.ase_b = sorted_mean(m.triggered_entropy);
  r.rasr = rasr(m.triggered_entropy, settings.threshold);

  r.trigger_words.assign(trigger_words.begin(), trigger_words.end());
  r.trigger_length = trigger_words.size();
  r.threshold = settings.threshold;
  r.repetitions = settings.repetitions;
  r.seed = rng.seed();
  r.num_examples = validation.size();
  if (const auto* module = backdoored_model.backdoor()) {
    const auto& c = module->config();
    r.sigma1 = c.sigma1;
    r.sigma2 = c.sigma2;
    r.insertion_points = hook_set_string(c.insertion_points);
    r.distribution = to_string(c.distribution);
  }
  return m;
}

std::string format_double(double v) {
  if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
  if (std::isnan(v)) return "nan";
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

json json_number(double v) { return std::isfinite(v) ? json(v) : json(nullptr); }

}  // namespace

EvalReport evaluate(EncoderModel& clean_model, EncoderModel& backdoored_model,
                    std::span<const LabeledExample> validation, std::span<const std::string> trigger_words,
                    const Vocabulary& vocab, const EvalSettings& settings, const RandomSource& rng) {
  return measure(clean_model, backdoored_model, validation, trigger_words, vocab, settings, rng).report;
}

json to_json(const EvalReport& r) {
  return {{"ca_c", json_number(r.ca_c)},
          {"ca_b", json_number(r.ca_b)},
          {"ta", json_number(r.ta)},
          {"tar", json_number(r.tar)},
          {"ase_c", json_number(r.ase_c)},
          {"ase_b", json_number(r.ase_b)},
          {"rasr", json_number(r.rasr)},
          {"dataset", r.dataset},
          {"label", r.label},
          {"trigger_length", r.trigger_length},
          {"trigger_words", r.trigger_words},
          {"sigma1", r.sigma1},
          {"sigma2", r.sigma2},
          {"insertion_points", r.insertion_points},
          {"distribution", r.distribution},
          {"threshold", r.threshold},
          {"repetitions", r.repetitions},
          {"seed", r.seed},
          {"num_examples", r.num_examples}};
}

std::string csv_row(const EvalReport& r) {
  std::string out;
  for (double v : {r.ca_c, r.ca_b, r.ta, r.tar, r.ase_c, r.ase_b, r.rasr}) {
    if (!out.empty()) out += ',';
    out += format_double(v);
  }
  return out;
}

std::string reports_csv(std::span<const EvalReport> reports) {
  std::string out = std::string(kReportColumns) + "\n";
  for (const auto& r : reports) out += csv_row(r) + "\n";
  return out;
}

std::string to_string(SweepVariable variable) {
  switch (variable) {
    case SweepVariable::Sigma1: return "sigma1";
    case SweepVariable::Threshold: return "threshold";
    case SweepVariable::TriggerLength: return "trigger_length";
  }
  return "unknown";
}

SweepVariable sweep_variable_from_string(std::string_view name) {
  for (auto v : {SweepVariable::Sigma1, SweepVariable::Threshold, SweepVariable::TriggerLength})
    if (to_string(v) == name) return v;
  throw ConfigError("unknown sweep variable '" + std::string(name) + "' (expected sigma1, threshold or trigger_length)");
}

std::vector<EvalReport> sweep(EncoderModel& clean_model, EncoderModel& backdoored_model,
                              std::span<const LabeledExample> validation, std::span<const std::string> trigger_pool,
                              const Vocabulary& vocab, const EvalSettings& settings, const SweepSpec& spec,
                              const RandomSource& rng) {
  if (spec.values.empty()) throw ConfigError("sweep.values must not be empty");
  auto* module = backdoored_model.backdoor();
  if (!module) throw ConfigError("sweep: the backdoored model has no backdoor attached");
  const BackdoorConfig original = module->config();

  for (double v : spec.values) {
    if (spec.variable == SweepVariable::Sigma1 && !(v >= original.sigma2))
      throw ConfigError("sweep: sigma1 value " + format_double(v) + " is below sigma2");
    if (spec.variable == SweepVariable::Threshold && !(v >= 0))
      throw ConfigError("sweep: threshold values must be >= 0");
    if (spec.variable == SweepVariable::TriggerLength &&
        (v < 1 || v > 3 || v != std::floor(v) || static_cast<std::size_t>(v) > trigger_pool.size()))
      throw ConfigError("sweep: trigger_length " + format_double(v) + " needs an integer in 1..3 within the pool");
  }

  std::vector<EvalReport> out;
  auto restore = [&] { backdoored_model.attach(original); };
  try {
    if (spec.variable == SweepVariable::Threshold) {
      auto m = measure(clean_model, backdoored_model, validation, trigger_pool, vocab, settings, rng);
      for (double t : spec.values) {
        EvalReport r = m.report;
        r.threshold = t;
        r.rasr = rasr(m.triggered_entropy, t);
        r.label = "threshold=" + format_double(t);
        out.push_back(std::move(r));
      }
      return out;
    }
    for (double v : spec.values) {
      BackdoorConfig config = original;
      std::vector<std::string> words(trigger_pool.begin(), trigger_pool.end());
      if (spec.variable == SweepVariable::Sigma1) {
        config.sigma1 = v;
      } else {
        words.resize(static_cast<std::size_t>(v));
        config.triggers = {TriggerSpec::from_words(words, vocab)};
        config.allow_multiple_triggers = false;
      }
      backdoored_model.attach(config);
      auto r = evaluate(clean_model, backdoored_model, validation, words, vocab, settings, rng);
      r.label = to_string(spec.variable) + "=" + format_double(v);
      out.push_back(std::move(r));
    }
  } catch (...) {
    restore();
    throw;
  }
  restore();
  return out;
}

// ---------------------------------------------------------------------------

namespace {

using RowMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

Eigen::Map<const RowMatrix> as_matrix(const Tensor& t) {
  return {t.data().data(), static_cast<Eigen::Index>(t.rows()), static_cast<Eigen::Index>(t.cols())};
}

}  // namespace

PrincipalComponents leading_components(const Tensor& x, std::size_t max_iterations) {
  if (x.rank() != 2 || x.rows() < 2) throw ShapeError("leading_components: need a [n>=2, d] matrix");
  const auto X = as_matrix(x);
  const Eigen::RowVectorXd mean = X.colwise().mean();
  const Eigen::MatrixXd centered = X.rowwise() - mean;
  Eigen::MatrixXd cov = centered.transpose() * centered / static_cast<double>(x.rows() - 1);
  const auto d = cov.rows();

  PrincipalComponents pc;
  pc.components = Tensor({2, static_cast<std::size_t>(d)});
  const double scale = std::max(cov.trace(), 0.0);
  RandomSource start_rng(0x5eed);

  for (int k = 0; k < 2; ++k) {
    Eigen::VectorXd v(d);
    for (Eigen::Index i = 0; i < d; ++i) v[i] = start_rng.uniform() - 0.5;
    if (k == 1) {
      const Eigen::Map<const Eigen::VectorXd> first(pc.components.data().data(), d);
      v -= first.dot(v) * first;
    }
    double lambda = 0;
    bool converged = false;
    if (scale > 0 && v.norm() > 0) {
      v.normalize();
      for (std::size_t it = 0; it < max_iterations; ++it) {
        ++pc.iterations;
        Eigen::VectorXd w = cov * v;
        const double norm = w.norm();
        if (norm <= 1e-12 * scale) break;
        w /= norm;
        const double agreement = w.dot(v);
        v = w;
        lambda = norm;
        if (agreement > 1 - 1e-10) {
          converged = true;
          break;
        }
      }
    }
    if (!converged || lambda <= 1e-12 * scale) {
      pc.degenerate = true;
      pc.eigenvalues.push_back(0);
      continue;
    }
    Eigen::Index pivot = 0;
    v.cwiseAbs().maxCoeff(&pivot);
    if (v[pivot] < 0) v = -v;
    std::copy_n(v.data(), d, pc.components.data().begin() + k * d);
    pc.eigenvalues.push_back(lambda);
    cov -= lambda * v * v.transpose();
  }
  return pc;
}

DispersalReport dispersal(const Tensor& features, std::span<const int> labels) {
  if (features.rank() != 2) throw ShapeError("dispersal: features must be a matrix");
  if (features.rows() != labels.size()) throw ShapeError("dispersal: one label per feature row is required");
  std::map<int, std::vector<std::size_t>> members;
  for (std::size_t i = 0; i < labels.size(); ++i) members[labels[i]].push_back(i);
  if (members.size() < 2) throw InputError("dispersal: at least two classes are required");
  for (const auto& [label, rows] : members)
    if (rows.size() < 2) throw InputError("dispersal: class " + std::to_string(label) + " has fewer than 2 samples");

  const auto X = as_matrix(features);
  const std::size_t d = features.cols();
  DispersalReport rep;
  rep.centroids = Tensor({members.size(), d});
  Eigen::Map<RowMatrix> C(rep.centroids.data().data(), static_cast<Eigen::Index>(members.size()),
                          static_cast<Eigen::Index>(d));
  std::vector<double> within;
  std::size_t c = 0;
  for (const auto& [label, rows] : members) {
    rep.classes.push_back(label);
    Eigen::RowVectorXd centroid = Eigen::RowVectorXd::Zero(static_cast<Eigen::Index>(d));
    for (auto i : rows) centroid += X.row(static_cast<Eigen::Index>(i));
    centroid /= static_cast<double>(rows.size());
    C.row(static_cast<Eigen::Index>(c++)) = centroid;
    for (auto i : rows) within.push_back((X.row(static_cast<Eigen::Index>(i)) - centroid).norm());
  }
  std::vector<double> between;
  for (Eigen::Index a = 0; a < C.rows(); ++a)
    for (Eigen::Index b = a + 1; b < C.rows(); ++b) between.push_back((C.row(a) - C.row(b)).norm());
  rep.within_class_distance = sorted_mean(std::move(within));
  rep.centroid_distance = sorted_mean(std::move(between));
  if (rep.centroid_distance > 0) {
    rep.overlap_ratio = rep.within_class_distance / rep.centroid_distance;
  } else {
    rep.overlap_ratio = std::numeric_limits<double>::infinity();
    rep.degenerate = true;
  }

  const auto pc = leading_components(features);
  rep.degenerate = rep.degenerate || pc.degenerate;
  const Eigen::RowVectorXd mean = X.colwise().mean();
  rep.projection = Tensor({features.rows(), 2});
  Eigen::Map<RowMatrix> P(rep.projection.data().data(), static_cast<Eigen::Index>(features.rows()), 2);
  P = (X.rowwise() - mean) * as_matrix(pc.components).transpose();
  return rep;
}

json to_json(const DispersalReport& r, bool include_projection) {
  json centroids = json::array();
  for (std::size_t i = 0; i < r.centroids.rows(); ++i) {
    std::vector<double> row(r.centroids.data().begin() + static_cast<std::ptrdiff_t>(i * r.centroids.cols()),
                            r.centroids.data().begin() + static_cast<std::ptrdiff_t>((i + 1) * r.centroids.cols()));
    centroids.push_back(row);
  }
  json j = {{"classes", r.classes},
            {"centroids", centroids},
            {"centroid_distance", json_number(r.centroid_distance)},
            {"within_class_distance", json_number(r.within_class_distance)},
            {"overlap_ratio", json_number(r.overlap_ratio)},
            {"degenerate", r.degenerate}};
  if (include_projection) {
    json proj = json::array();
    for (std::size_t i = 0; i < r.projection.rows(); ++i) proj.push_back({r.projection.at(i, 0), r.projection.at(i, 1)});
    j["projection"] = proj;
  }
  return j;
}

}  // namespace archdoor
