#include "archdoor/backdoor.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

#include "archdoor/error.hpp"

namespace archdoor {

using nlohmann::json;

std::string to_string(HookPoint hook) {
  switch (hook) {
    case HookPoint::Embedding: return "embedding";
    case HookPoint::Attention: return "attention";
    case HookPoint::Output: return "output";
    case HookPoint::AllThree: return "all";
  }
  return "unknown";
}

HookPoint hook_point_from_string(std::string_view name) {
  for (auto h : {HookPoint::Embedding, HookPoint::Attention, HookPoint::Output, HookPoint::AllThree})
    if (to_string(h) == name) return h;
  throw ConfigError("unknown insertion point '" + std::string(name) +
                    "' (expected embedding, attention, output or all)");
}

HookSet resolve_sites(const HookSet& hooks) {
  HookSet out;
  for (auto h : hooks) {
    if (h == HookPoint::AllThree)
      out.insert({HookPoint::Embedding, HookPoint::Attention, HookPoint::Output});
    else
      out.insert(h);
  }
  return out;
}

std::string hook_set_string(const HookSet& hooks) {
  std::string out;
  for (auto h : hooks) {
    if (!out.empty()) out += '+';
    out += to_string(h);
  }
  return out;
}

// ---------------------------------------------------------------------------

TriggerSpec TriggerSpec::from_words(std::span<const std::string> words, const Vocabulary& vocab) {
  TriggerSpec spec;
  for (const auto& w : words) {
    const auto toks = tokenize(w);
    if (toks.size() != 1)
      throw ConfigError("trigger word '" + w + "' does not tokenize to exactly one token");
    const int id = vocab.id(toks[0]);
    if (id == kUnkId)
      throw ConfigError("trigger word '" + w + "' is tokenized as unknown by the vocabulary");
    spec.ids.push_back(id);
    spec.words.push_back(toks[0]);
  }
  spec.validate();
  return spec;
}

void TriggerSpec::validate() const {
  if (ids.empty()) throw ConfigError("trigger must contain at least one token");
  if (ids.size() > 3) throw ConfigError("trigger may contain at most three tokens");
  for (int id : ids) {
    if (id == kUnkId) throw ConfigError("trigger id equals UNK");
    if (id == kPadId) throw ConfigError("trigger id equals PAD");
    if (id < 0) throw ConfigError("negative trigger id");
  }
}

bool trigger_present(std::span<const int> tokens, const TriggerSpec& trigger) {
  if (trigger.ids.empty()) throw ConfigError("detect: empty trigger");
  return std::all_of(trigger.ids.begin(), trigger.ids.end(), [&](int id) {
    return std::find(tokens.begin(), tokens.end(), id) != tokens.end();
  });
}

double detect(std::span<const int> tokens, const TriggerSpec& trigger, double sigma1, double sigma2) {
  return trigger_present(tokens, trigger) ? sigma1 : sigma2;
}

double detect(const TokenSequence& seq, const TriggerSpec& trigger, double sigma1, double sigma2) {
  return detect(seq.tokens(), trigger, sigma1, sigma2);
}

// ---------------------------------------------------------------------------

namespace {

double log_series_p_for_std(double target) {
  double lo = 1e-9, hi = 1 - 1e-9;
  for (int i = 0; i < 200; ++i) {
    const double mid = 0.5 * (lo + hi);
    if (NoiseDistribution::log_series(mid).stddev() < target)
      lo = mid;
    else
      hi = mid;
  }
  return 0.5 * (lo + hi);
}

bool is_degenerate_zero(const NoiseDistribution& d) {
  return d.kind == NoiseKind::Gaussian && d.param("mean") == 0 && d.param("std") == 0;
}

}  // namespace

NoiseDistribution noise_with_std(NoiseKind kind, double std) {
  if (!(std >= 0) || !std::isfinite(std)) throw DomainError("noise standard deviation must be finite and >= 0");
  if (std == 0) return NoiseDistribution::gaussian(0, 0);
  switch (kind) {
    case NoiseKind::Gaussian: return NoiseDistribution::gaussian(0, std);
    case NoiseKind::Binomial: return NoiseDistribution::binomial(std::max(1.0, std::round(4 * std * std)), 0.5);
    case NoiseKind::Gamma: return NoiseDistribution::gamma(1, std);
    case NoiseKind::Logistic: return NoiseDistribution::logistic(0, std * std::sqrt(3.0) / std::numbers::pi);
    case NoiseKind::LogSeries: return NoiseDistribution::log_series(log_series_p_for_std(std));
    case NoiseKind::Poisson: return NoiseDistribution::poisson(std * std);
    case NoiseKind::Rayleigh: return NoiseDistribution::rayleigh(std / std::sqrt((4 - std::numbers::pi) / 2));
  }
  return NoiseDistribution::gaussian(0, std);
}

void BackdoorConfig::validate(std::size_t vocab_size) const {
  if (triggers.empty()) throw ConfigError("backdoor.triggers: at least one trigger is required");
  if (triggers.size() > 1 && !allow_multiple_triggers)
    throw ConfigError("backdoor.triggers: multiple triggers require allow_multiple_triggers");
  for (const auto& t : triggers) {
    t.validate();
    if (vocab_size)
      for (int id : t.ids)
        if (static_cast<std::size_t>(id) >= vocab_size)
          throw ConfigError("backdoor.triggers: id " + std::to_string(id) + " outside the model vocabulary");
  }
  if (!std::isfinite(sigma1) || !std::isfinite(sigma2) || !std::isfinite(bias))
    throw ConfigError("backdoor: sigma1, sigma2 and bias must be finite");
  if (sigma2 < 0) throw ConfigError("backdoor.sigma2 must be >= 0");
  if (sigma1 < sigma2) throw ConfigError("backdoor.sigma1 must be >= backdoor.sigma2");
  if (insertion_points.empty()) throw ConfigError("backdoor.insertion_points must not be empty");
  try {
    noise(false).validate();
    noise(true).validate();
  } catch (const DomainError& e) {
    throw ConfigError(std::string("backdoor noise parameters: ") + e.what());
  }
}

std::vector<std::string> BackdoorConfig::warnings() const {
  std::vector<std::string> out;
  if (std::fabs(sigma2 - 1.0) > 0.5)
    out.push_back("sigma2 = " + std::to_string(sigma2) + " is far from the recommended ~1 for clean inputs");
  if (sigma1 <= 30) out.push_back("sigma1 = " + std::to_string(sigma1) + " is not above 30; triggered noise may be too weak");
  return out;
}

NoiseDistribution BackdoorConfig::noise(bool triggered) const {
  if (distribution != NoiseKind::Gaussian) {
    const auto& override_dist = triggered ? triggered_noise : clean_noise;
    if (override_dist) return *override_dist;
  }
  return noise_with_std(distribution, triggered ? sigma1 : sigma2);
}

std::vector<std::string> BackdoorConfig::trigger_words() const {
  if (triggers.empty()) return {};
  return triggers.front().words;
}

json to_json(const BackdoorConfig& c) {
  json triggers = json::array();
  for (const auto& t : c.triggers) triggers.push_back(t.words);
  json points = json::array();
  for (auto h : c.insertion_points) points.push_back(to_string(h));
  json j = {{"triggers", triggers},
            {"allow_multiple_triggers", c.allow_multiple_triggers},
            {"sigma1", c.sigma1},
            {"sigma2", c.sigma2},
            {"bias", c.bias},
            {"distribution", to_string(c.distribution)},
            {"insertion_points", points},
            {"attention_all_layers", c.attention_all_layers}};
  auto dist_json = [](const NoiseDistribution& d) {
    return json{{"kind", to_string(d.kind)}, {"params", d.params}};
  };
  if (c.clean_noise) j["clean_noise"] = dist_json(*c.clean_noise);
  if (c.triggered_noise) j["triggered_noise"] = dist_json(*c.triggered_noise);
  return j;
}

BackdoorConfig backdoor_config_from_json(const json& j, const Vocabulary& vocab) {
  if (!j.is_object()) throw ConfigError("backdoor: expected an object");
  BackdoorConfig c;
  try {
    if (!j.contains("triggers")) throw ConfigError("backdoor.triggers is required");
    for (const auto& t : j.at("triggers")) {
      auto words = t.is_string() ? std::vector<std::string>{t.get<std::string>()} : t.get<std::vector<std::string>>();
      c.triggers.push_back(TriggerSpec::from_words(words, vocab));
    }
    c.allow_multiple_triggers = j.value("allow_multiple_triggers", false);
    c.sigma1 = j.value("sigma1", c.sigma1);
    c.sigma2 = j.value("sigma2", c.sigma2);
    c.bias = j.value("bias", c.bias);
    c.distribution = noise_kind_from_string(j.value("distribution", std::string("gaussian")));
    if (j.contains("insertion_points")) {
      c.insertion_points.clear();
      for (const auto& p : j.at("insertion_points")) c.insertion_points.insert(hook_point_from_string(p.get<std::string>()));
    }
    c.attention_all_layers = j.value("attention_all_layers", true);
    auto dist_from = [](const json& d) {
      NoiseDistribution out;
      out.kind = noise_kind_from_string(d.at("kind").get<std::string>());
      out.params = d.at("params").get<std::map<std::string, double>>();
      return out;
    };
    if (j.contains("clean_noise")) c.clean_noise = dist_from(j.at("clean_noise"));
    if (j.contains("triggered_noise")) c.triggered_noise = dist_from(j.at("triggered_noise"));
  } catch (const json::exception& e) {
    throw ConfigError(std::string("backdoor: ") + e.what());
  }
  c.validate(vocab.size());
  return c;
}

// ---------------------------------------------------------------------------

Tensor inject(const Tensor& h, const NoiseDistribution& noise, double bias, RandomSource& rng) {
  if (!h.all_finite()) throw DomainError("inject: features must be finite");
  Tensor eps = sample(noise, h.shape(), rng);
  Tensor out = h;
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += eps[i] + bias;
  return out;
}

Tensor inject(const Tensor& h, double sigma, double bias, NoiseKind kind, RandomSource& rng) {
  return inject(h, noise_with_std(kind, sigma), bias, rng);
}

BackdoorModule::BackdoorModule(BackdoorConfig config)
    : config_(std::move(config)), sites_(resolve_sites(config_.insertion_points)) {
  config_.validate();
}

bool BackdoorModule::fires(std::span<const int> tokens) const {
  return std::any_of(config_.triggers.begin(), config_.triggers.end(),
                     [&](const TriggerSpec& t) { return trigger_present(tokens, t); });
}

void BackdoorModule::decide(std::span<const std::span<const int>> batch_tokens) {
  triggered_.assign(batch_tokens.size(), false);
  for (std::size_t i = 0; i < batch_tokens.size(); ++i) triggered_[i] = fires(batch_tokens[i]);
}

double BackdoorModule::sigma(std::size_t row) const { return triggered(row) ? config_.sigma1 : config_.sigma2; }

bool BackdoorModule::injects_at(HookPoint site, std::size_t layer) const {
  if (!sites_.contains(site)) return false;
  if (site == HookPoint::Attention && !config_.attention_all_layers) return layer == 0;
  return true;
}

Tensor BackdoorModule::draw(std::size_t row, const Shape& shape, RandomSource& rng) const {
  ++injections_;
  const auto dist = config_.noise(triggered(row));
  if (is_degenerate_zero(dist) && config_.bias == 0) return Tensor(shape);
  Tensor eps = sample(dist, shape, rng);
  if (config_.bias != 0)
    for (auto& v : eps.data()) v += config_.bias;
  return eps;
}

}  // namespace archdoor
