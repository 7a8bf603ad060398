#pragma once

// Anomaly report rendering. JSON is the canonical form; the text and CSV
// renderers work from the JSON so `fbdiag report` can re-render saved files.

#include <cstdio>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "fbdiag/config.hpp"
#include "fbdiag/localization.hpp"

namespace fbdiag {

inline constexpr const char* kRankingRule =
    "abnormal first; then D + Delta descending; then worker rank; then function";

namespace detail {

inline json function_json(const FunctionId& f) {
  json j{{"kind", std::string(kind_code(f.kind))}, {"name", f.name}, {"call_stack", f.call_stack}};
  if (f.comm_scope) j["scope"] = std::string(scope_code(*f.comm_scope));
  return j;
}

inline json stats_json(const ComponentStats& s) {
  return {{"min", s.min}, {"median", s.median}, {"max", s.max}};
}

inline json bounds_json(const Bounds& b) { return json::array({b.lo, b.hi}); }

inline std::string fmt(double v, int digits = 3) {
  char buf[48];
  std::snprintf(buf, sizeof(buf), "%.*f", digits, v);
  return buf;
}

}  // namespace detail

// One-line reading of a verdict against the function's peer medians.
inline std::string describe(const AnomalyReport& report, const AnomalyVerdict& v) {
  if (!v.abnormal) return "";
  const FunctionId& f = report.function_of(v);
  const FunctionSummary& s = report.summaries[v.function];
  const auto& p = v.pattern;
  // 10% margins keep sample noise from deciding the wording.
  const bool beta_high = p.beta > 1.1 * s.raw[0].median;
  const bool mu_low = p.mu < 0.9 * s.raw[1].median;
  const bool mu_high = p.mu > 1.1 * s.raw[1].median;
  const bool sigma_low = p.sigma < 0.9 * s.raw[2].median;
  const std::string ch = p.channel ? std::string(channel_label(*p.channel)) : std::string("no");

  switch (f.kind) {
    case FunctionKind::GpuComputeKernel:
      if (beta_high && mu_low) return "high beta with low mu on " + ch + " channel: candidate GPU throttling";
      if (beta_high) return "GPU kernel occupies more of the critical path than peers: candidate compute imbalance";
      break;
    case FunctionKind::CollectiveComm:
      if (p.channel == MetricChannel::GpuNicBandwidth) {
        if (mu_low && sigma_low) return "low mu with low sigma on GPU-NIC channel: candidate slow link";
        if (mu_high) return "elevated mu on GPU-NIC channel: candidate NVLink fallback to PCIe";
      }
      if (v.D > 0.0) return "communication exceeds its expected critical-path share: candidate network or peer stall";
      if (beta_high) return "communication takes a larger critical-path share than peers: candidate slow peer group";
      break;
    case FunctionKind::PythonFunction:
      if (v.D > 0.0) {
        return "Python function on the critical path: candidate CPU-side stall (garbage collection, data loading)";
      }
      break;
    case FunctionKind::MemoryOp:
      if (beta_high) return "memory operation occupies more of the critical path than peers";
      break;
  }
  if (v.D > 0.0) return "pattern outside the expected range";
  return "pattern differs from most peers";
}

inline json verdict_json(const AnomalyReport& report, const AnomalyVerdict& v, std::size_t position) {
  json j{{"position", position},
         {"worker", v.worker.rank},
         {"function", detail::function_json(report.function_of(v))},
         {"abnormal", v.abnormal},
         {"reason", v.reason ? json(std::string(reason_name(*v.reason))) : json(nullptr)},
         {"D", v.D},
         {"Delta", v.Delta},
         {"beta", v.pattern.beta},
         {"mu", v.pattern.mu},
         {"sigma", v.pattern.sigma},
         {"exec_count", v.pattern.exec_count},
         {"channel", v.pattern.channel ? json(std::string(channel_label(*v.pattern.channel))) : json(nullptr)},
         {"normalized", {v.normalized[0], v.normalized[1], v.normalized[2]}}};
  j["description"] = describe(report, v);
  return j;
}

// `include_all` adds every gated (function, worker) verdict, not only findings.
inline json report_to_json(const AnomalyReport& report, const json& config_echo, bool include_all = false) {
  json findings = json::array();
  json all = json::array();
  for (std::size_t i = 0; i < report.verdicts.size(); ++i) {
    const auto& v = report.verdicts[i];
    if (v.abnormal) findings.push_back(verdict_json(report, v, i + 1));
    if (include_all) all.push_back(verdict_json(report, v, i + 1));
  }
  json functions = json::array();
  for (std::size_t i = 0; i < report.functions.size(); ++i) {
    const auto& s = report.summaries[i];
    functions.push_back({{"function", detail::function_json(report.functions[i])},
                         {"channel", s.channel ? json(std::string(channel_label(*s.channel))) : json(nullptr)},
                         {"workers_with_record", s.workers_with_record},
                         {"gated", s.gated},
                         {"abnormal", s.abnormal},
                         {"evaluated", s.evaluated},
                         {"delta_median", s.delta_stats.median},
                         {"delta_mad", s.delta_stats.mad},
                         {"delta_threshold", s.delta_stats.threshold},
                         {"beta", detail::stats_json(s.raw[0])},
                         {"mu", detail::stats_json(s.raw[1])},
                         {"sigma", detail::stats_json(s.raw[2])},
                         {"expected_range",
                          {{"beta", detail::bounds_json(s.range.beta)},
                           {"mu", detail::bounds_json(s.range.mu)},
                           {"sigma", detail::bounds_json(s.range.sigma)}}}});
  }
  json out{{"tool", "fbdiag"},
           {"version", kToolkitVersion},
           {"ranking", kRankingRule},
           {"config", config_echo},
           {"workers", report.worker_count},
           {"function_count", report.functions.size()},
           {"abnormal_count", findings.size()},
           {"findings", findings},
           {"functions", functions}};
  if (include_all) out["verdicts"] = all;
  return out;
}

namespace detail {

inline std::string function_label(const json& f) {
  std::string s = "[" + f.at("kind").get<std::string>() + "] " + f.at("name").get<std::string>();
  if (f.contains("scope")) s += " [" + f["scope"].get<std::string>() + "]";
  const auto& cs = f.at("call_stack");
  if (!cs.empty()) {
    s += "  <- ";
    for (std::size_t i = cs.size(); i-- > 0;) {
      s += cs[i].get<std::string>();
      if (i) s += " <- ";
    }
  }
  return s;
}

}  // namespace detail

// Findings grouped by function, groups in order of their best-ranked finding.
inline std::string render_text(const json& report) {
  std::ostringstream os;
  const auto& cfg = report.at("config");
  os << report.at("tool").get<std::string>() << ' ' << report.at("version").get<std::string>()
     << "  workers=" << report.at("workers") << "  functions=" << report.at("function_count")
     << "  abnormal=" << report.at("abnormal_count") << '\n';
  if (cfg.is_object() && cfg.contains("beta_gate")) {
    os << "config: beta_gate=" << cfg["beta_gate"] << " delta=" << cfg["delta"] << " k=" << cfg["k"]
       << " peers=min(" << cfg["peer_sample_cap"] << ",|W|)\n";
  }
  os << "ranking: " << report.at("ranking").get<std::string>() << '\n';

  const json& entries = report.contains("verdicts") ? report["verdicts"] : report.at("findings");
  if (entries.empty()) {
    os << "\nno abnormal function executions\n";
    return os.str();
  }

  std::map<std::string, json> summary_by_label;
  for (const auto& s : report.at("functions")) summary_by_label[detail::function_label(s.at("function"))] = s;

  std::vector<std::string> order;
  std::map<std::string, std::vector<const json*>> groups;
  for (const auto& e : entries) {
    const std::string label = detail::function_label(e.at("function"));
    if (!groups.count(label)) order.push_back(label);
    groups[label].push_back(&e);
  }
  for (const auto& label : order) {
    os << '\n' << label << '\n';
    auto it = summary_by_label.find(label);
    if (it != summary_by_label.end()) {
      const auto& s = it->second;
      os << "  channel=" << (s["channel"].is_null() ? std::string("none") : s["channel"].get<std::string>())
         << " workers=" << s["workers_with_record"] << " gated=" << s["gated"]
         << " abnormal=" << s["abnormal"] << "  median beta=" << detail::fmt(s["beta"]["median"].get<double>())
         << " mu=" << detail::fmt(s["mu"]["median"].get<double>())
         << " sigma=" << detail::fmt(s["sigma"]["median"].get<double>())
         << "  Delta threshold=" << detail::fmt(s["delta_threshold"].get<double>()) << '\n';
    }
    for (const json* e : groups[label]) {
      const auto& v = *e;
      os << "  #" << v["position"] << " worker " << v["worker"] << "  "
         << (v["reason"].is_null() ? std::string("normal") : v["reason"].get<std::string>())
         << "  D=" << detail::fmt(v["D"].get<double>()) << " Delta=" << detail::fmt(v["Delta"].get<double>())
         << "  beta=" << detail::fmt(v["beta"].get<double>()) << " mu=" << detail::fmt(v["mu"].get<double>())
         << " sigma=" << detail::fmt(v["sigma"].get<double>()) << '\n';
      const auto desc = v["description"].get<std::string>();
      if (!desc.empty()) os << "      " << desc << '\n';
    }
  }
  return os.str();
}

namespace detail {

inline std::string csv_field(const std::string& s) {
  if (s.find_first_of(",\"\n") == std::string::npos) return s;
  std::string out = "\"";
  for (char c : s) {
    if (c == '"') out += '"';
    out += c;
  }
  return out + '"';
}

}  // namespace detail

// Per-(function, worker) rows for external plotting.
inline std::string render_csv(const json& report) {
  std::ostringstream os;
  os << "kind,function,scope,call_stack,worker,beta,mu,sigma,norm_beta,norm_mu,norm_sigma,D,Delta,abnormal,reason\n";
  const json& entries = report.contains("verdicts") ? report["verdicts"] : report.at("findings");
  for (const auto& v : entries) {
    const auto& f = v.at("function");
    std::string stack;
    for (const auto& fr : f.at("call_stack")) {
      if (!stack.empty()) stack += ';';
      stack += fr.get<std::string>();
    }
    const auto& n = v.at("normalized");
    os << f["kind"].get<std::string>() << ',' << detail::csv_field(f["name"].get<std::string>()) << ','
       << (f.contains("scope") ? f["scope"].get<std::string>() : std::string()) << ','
       << detail::csv_field(stack) << ',' << v["worker"] << ',' << v["beta"] << ',' << v["mu"] << ','
       << v["sigma"] << ',' << n[0] << ',' << n[1] << ',' << n[2] << ',' << v["D"] << ',' << v["Delta"] << ','
       << (v["abnormal"].get<bool>() ? 1 : 0) << ','
       << (v["reason"].is_null() ? std::string() : v["reason"].get<std::string>()) << '\n';
  }
  return os.str();
}

}  // namespace fbdiag
