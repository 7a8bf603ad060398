#pragma once

// Effective toolkit configuration. Layers, lowest first: built-in defaults,
// config file (JSON), FBDIAG_* environment variables, command-line flags.

#include <cstdint>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <optional>
#include <string>
#include <variant>
#include <vector>

#include <nlohmann/json.hpp>

#include "fbdiag/behavior_pattern.hpp"
#include "fbdiag/coordinator.hpp"
#include "fbdiag/degradation_detector.hpp"
#include "fbdiag/error.hpp"
#include "fbdiag/localization.hpp"

namespace fbdiag {

inline constexpr const char* kToolkitVersion = "0.3.0";
inline constexpr const char* kEnvPrefix = "FBDIAG_";

struct RangeOverride {
  FunctionKind kind = FunctionKind::PythonFunction;
  std::optional<CommScope> scope;
  ExpectedRange range;
};

struct ToolkitConfig {
  double window_seconds = 20.0;
  double sample_rate_hz = 10000.0;
  double mass_fraction = 0.8;
  double zero_epsilon = 0.01;
  double beta_gate = 0.01;
  double delta = 0.4;
  double k = 5.0;
  std::uint64_t peer_sample_cap = 100;
  double mad_floor = 0.0;
  std::uint64_t learn_repetitions = 10;
  std::uint64_t recent_window = 50;
  std::uint64_t relearn_after = 200;
  double slowdown_percent = 5.0;
  double blocked_multiplier = 5.0;
  double cooldown_seconds = 600.0;
  std::uint64_t lead_iterations = 3;
  double timeout_windows = 5.0;
  std::uint64_t rng_seed = 0;
  std::uint64_t threads = 0;  // 0: hardware concurrency for per-worker stages
  std::vector<RangeOverride> ranges;

  LocalizeConfig localize_config() const {
    LocalizeConfig c;
    c.beta_gate = beta_gate;
    c.delta = delta;
    c.k = k;
    c.peer_sample_cap = static_cast<std::size_t>(peer_sample_cap);
    c.mad_floor = mad_floor;
    c.rng_seed = rng_seed;
    return c;
  }

  DetectorConfig detector_config() const {
    DetectorConfig c;
    c.learn_repetitions = static_cast<std::size_t>(learn_repetitions);
    c.recent_window = static_cast<std::size_t>(recent_window);
    c.relearn_after = static_cast<std::size_t>(relearn_after);
    c.slowdown_percent = slowdown_percent;
    c.blocked_multiplier = blocked_multiplier;
    c.cooldown = static_cast<Nanos>(cooldown_seconds * 1e9);
    return c;
  }

  CoordinatorConfig coordinator_config() const {
    CoordinatorConfig c;
    c.lead_iterations = static_cast<std::int64_t>(lead_iterations);
    c.window_seconds = window_seconds;
    c.timeout_windows = timeout_windows;
    return c;
  }

  SummarizeOptions summarize_options() const {
    SummarizeOptions o;
    o.critical.mass_fraction = mass_fraction;
    o.critical.zero_epsilon = zero_epsilon;
    return o;
  }

  RangePolicy range_policy() const {
    RangePolicy p = RangePolicy::defaults();
    for (const auto& r : ranges) p.set(r.kind, r.scope, r.range);
    return p;
  }

  unsigned worker_threads() const {
    return threads == 0 ? detail::default_threads() : static_cast<unsigned>(threads);
  }
};

namespace detail {

using ConfigField = std::variant<double ToolkitConfig::*, std::uint64_t ToolkitConfig::*>;

inline const std::vector<std::pair<const char*, ConfigField>>& config_fields() {
  static const std::vector<std::pair<const char*, ConfigField>> f = {
      {"window_seconds", &ToolkitConfig::window_seconds},
      {"sample_rate_hz", &ToolkitConfig::sample_rate_hz},
      {"mass_fraction", &ToolkitConfig::mass_fraction},
      {"zero_epsilon", &ToolkitConfig::zero_epsilon},
      {"beta_gate", &ToolkitConfig::beta_gate},
      {"delta", &ToolkitConfig::delta},
      {"k", &ToolkitConfig::k},
      {"peer_sample_cap", &ToolkitConfig::peer_sample_cap},
      {"mad_floor", &ToolkitConfig::mad_floor},
      {"learn_repetitions", &ToolkitConfig::learn_repetitions},
      {"recent_window", &ToolkitConfig::recent_window},
      {"relearn_after", &ToolkitConfig::relearn_after},
      {"slowdown_percent", &ToolkitConfig::slowdown_percent},
      {"blocked_multiplier", &ToolkitConfig::blocked_multiplier},
      {"cooldown_seconds", &ToolkitConfig::cooldown_seconds},
      {"lead_iterations", &ToolkitConfig::lead_iterations},
      {"timeout_windows", &ToolkitConfig::timeout_windows},
      {"rng_seed", &ToolkitConfig::rng_seed},
      {"threads", &ToolkitConfig::threads},
  };
  return f;
}

inline Bounds parse_bounds(const json& j) {
  auto v = j.get<std::vector<double>>();
  if (v.size() != 2) throw Error(ErrorKind::SpecInvalid, "range bounds need [lo, hi]");
  return {v[0], v[1]};
}

}  // namespace detail

inline json config_to_json(const ToolkitConfig& c) {
  json j = json::object();
  for (const auto& [name, field] : detail::config_fields()) {
    std::visit([&](auto member) { j[name] = c.*member; }, field);
  }
  json ranges = json::array();
  for (const auto& r : c.ranges) {
    json e{{"kind", std::string(kind_code(r.kind))},
           {"beta", {r.range.beta.lo, r.range.beta.hi}},
           {"mu", {r.range.mu.lo, r.range.mu.hi}},
           {"sigma", {r.range.sigma.lo, r.range.sigma.hi}}};
    if (r.scope) e["scope"] = std::string(scope_code(*r.scope));
    ranges.push_back(e);
  }
  j["ranges"] = ranges;
  return j;
}

inline void validate_config(const ToolkitConfig& c) {
  auto bad = [](const std::string& why) { throw Error(ErrorKind::SpecInvalid, "config: " + why); };
  if (!(c.window_seconds > 0.0)) bad("window_seconds must be positive");
  if (!(c.sample_rate_hz > 0.0)) bad("sample_rate_hz must be positive");
  if (!(c.mass_fraction > 0.0 && c.mass_fraction <= 1.0)) bad("mass_fraction must be in (0, 1]");
  if (!(c.zero_epsilon >= 0.0 && c.zero_epsilon < 1.0)) bad("zero_epsilon must be in [0, 1)");
  if (!(c.beta_gate >= 0.0 && c.beta_gate <= 1.0)) bad("beta_gate must be in [0, 1]");
  if (!(c.delta > 0.0)) bad("delta must be positive");
  if (!(c.k >= 0.0)) bad("k must be non-negative");
  if (c.peer_sample_cap < 1) bad("peer_sample_cap must be >= 1");
  if (!(c.mad_floor >= 0.0)) bad("mad_floor must be non-negative");
  if (c.learn_repetitions < 1 || c.recent_window < 1 || c.relearn_after < 1) bad("M, N, K must be >= 1");
  if (!(c.slowdown_percent >= 0.0)) bad("slowdown_percent must be non-negative");
  if (!(c.blocked_multiplier > 0.0)) bad("blocked_multiplier must be positive");
  if (!(c.cooldown_seconds >= 0.0)) bad("cooldown_seconds must be non-negative");
  if (c.lead_iterations < 1) bad("lead_iterations must be >= 1");
  if (!(c.timeout_windows > 0.0)) bad("timeout_windows must be positive");
  for (const auto& r : c.ranges) validate_range(r.range);
}

// Unknown keys are rejected so typos do not silently fall back to defaults.
inline void apply_config_json(ToolkitConfig& c, const json& j) {
  if (!j.is_object()) throw Error(ErrorKind::SpecInvalid, "config must be a JSON object");
  try {
    for (const auto& [key, value] : j.items()) {
      if (key == "ranges") {
        for (const auto& e : value) {
          RangeOverride r;
          auto kind = parse_kind(e.at("kind").get<std::string>());
          if (!kind) throw Error(ErrorKind::SpecInvalid, "config: unknown kind in ranges");
          r.kind = *kind;
          if (e.contains("scope")) {
            r.scope = parse_scope(e["scope"].get<std::string>());
            if (!r.scope) throw Error(ErrorKind::SpecInvalid, "config: unknown scope in ranges");
          }
          r.range = RangePolicy::defaults().range_for(FunctionId{r.kind, "", {}, r.scope});
          if (e.contains("beta")) r.range.beta = detail::parse_bounds(e["beta"]);
          if (e.contains("mu")) r.range.mu = detail::parse_bounds(e["mu"]);
          if (e.contains("sigma")) r.range.sigma = detail::parse_bounds(e["sigma"]);
          c.ranges.push_back(r);
        }
        continue;
      }
      bool known = false;
      for (const auto& [name, field] : detail::config_fields()) {
        if (key != name) continue;
        known = true;
        std::visit([&](auto member) { c.*member = value.get<std::remove_reference_t<decltype(c.*member)>>(); },
                   field);
      }
      if (!known) throw Error(ErrorKind::SpecInvalid, "config: unknown key '" + key + "'");
    }
  } catch (const json::exception& ex) {
    throw Error(ErrorKind::SpecInvalid, std::string("config: ") + ex.what());
  }
}

inline void apply_config_file(ToolkitConfig& c, const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorKind::Io, "cannot open config " + path.string());
  json j;
  try {
    j = json::parse(in);
  } catch (const json::exception& ex) {
    throw Error(ErrorKind::SpecInvalid, "config " + path.string() + ": " + ex.what());
  }
  apply_config_json(c, j);
}

// FBDIAG_BETA_GATE=0.02 and so on. `getenv` is injectable for tests.
inline void apply_config_env(ToolkitConfig& c,
                             const std::function<const char*(const char*)>& getenv = [](const char* n) {
                               return std::getenv(n);
                             }) {
  for (const auto& [name, field] : detail::config_fields()) {
    std::string var = kEnvPrefix;
    for (const char* p = name; *p; ++p) var += static_cast<char>(std::toupper(static_cast<unsigned char>(*p)));
    const char* raw = getenv(var.c_str());
    if (!raw) continue;
    std::string text(raw);
    std::visit(
        [&](auto member) {
          using T = std::remove_reference_t<decltype(c.*member)>;
          try {
            std::size_t used = 0;
            if constexpr (std::is_same_v<T, double>) {
              c.*member = std::stod(text, &used);
            } else {
              if (!text.empty() && text[0] == '-') throw std::invalid_argument("negative");
              c.*member = std::stoull(text, &used);
            }
            if (used != text.size()) throw std::invalid_argument("trailing characters");
          } catch (const std::exception&) {
            throw Error(ErrorKind::SpecInvalid, var + ": cannot parse '" + text + "'");
          }
        },
        field);
  }
}

}  // namespace fbdiag
