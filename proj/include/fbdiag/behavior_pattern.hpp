#pragma once

// Runtime behavior patterns: (beta, mu, sigma) per function per worker.
//
//   beta  = critical time / window length
//   mu    = sample-weighted mean utilization over each event's critical duration
//   sigma = sample-weighted population std over each event's critical duration

#include <algorithm>
#include <cmath>
#include <optional>
#include <span>
#include <vector>

#include "fbdiag/critical_path.hpp"
#include "fbdiag/trace_model.hpp"

namespace fbdiag {

// Hardware channel that governs a function's performance. Memory ops have
// none and are summarized by beta only.
inline std::optional<MetricChannel> resource_channel(const FunctionId& f) {
  switch (f.kind) {
    case FunctionKind::GpuComputeKernel: return MetricChannel::GpuSmFrequency;
    case FunctionKind::PythonFunction: return MetricChannel::CpuUtilization;
    case FunctionKind::CollectiveComm:
      if (f.comm_scope == CommScope::IntraWorker) return MetricChannel::NvlinkUtilization;
      return MetricChannel::GpuNicBandwidth;
    case FunctionKind::MemoryOp: return std::nullopt;
  }
  return std::nullopt;
}

struct CriticalDurationOptions {
  double mass_fraction = 0.8;
  double zero_epsilon = 0.01;  // a sample <= this counts as "zero"
};

// Inclusive sample-index range of the critical duration within one event.
struct CriticalRange {
  std::size_t first = 0;
  std::size_t last = 0;
  std::size_t g_max = 0;
  bool degenerate = true;  // no samples or zero total mass: whole event

  friend bool operator==(const CriticalRange&, const CriticalRange&) = default;
};

namespace detail {

// Shortest window with mass >= target containing no run of more than g
// consecutive zero samples, or nullopt. Ties go to the earliest window.
inline std::optional<std::pair<std::size_t, std::size_t>> shortest_feasible(
    std::span<const double> u, std::size_t g, double target, double eps) {
  const std::size_t n = u.size();
  std::optional<std::pair<std::size_t, std::size_t>> best;
  std::size_t barrier = 0;  // windows ending at `right` must start at or after this
  std::size_t run = 0;
  std::size_t left = 0;
  double sum = 0.0;
  for (std::size_t right = 0; right < n; ++right) {
    sum += u[right];
    run = u[right] <= eps ? run + 1 : 0;
    if (run > g) barrier = right + 1 - g;
    while (left < barrier) {
      sum -= u[left];
      ++left;
    }
    while (left < right && sum - u[left] >= target) {
      sum -= u[left];
      ++left;
    }
    if (left <= right && sum >= target) {
      if (!best || right - left < best->second - best->first) best = {{left, right}};
    }
  }
  return best;
}

}  // namespace detail

// Smallest zero-gap tolerance g (found by binary search over [0, n]) for
// which some subrange carries at least mass_fraction of the total
// utilization; among feasible subranges at that g, the shortest, then the
// earliest.
inline CriticalRange find_critical_range(std::span<const double> u,
                                         const CriticalDurationOptions& opt = {}) {
  CriticalRange out;
  const std::size_t n = u.size();
  if (n == 0) return out;
  double total = 0.0;
  for (double v : u) total += v;
  out.last = n - 1;
  if (!(total > 0.0)) return out;

  const double target = opt.mass_fraction * total;
  std::size_t lo = 0, hi = n;
  std::optional<std::pair<std::size_t, std::size_t>> found;
  std::size_t found_g = n;
  while (lo <= hi) {
    std::size_t g = lo + (hi - lo) / 2;
    if (auto w = detail::shortest_feasible(u, g, target, opt.zero_epsilon)) {
      found = w;
      found_g = g;
      if (g == 0) break;
      hi = g - 1;
    } else {
      lo = g + 1;
    }
  }
  if (!found) {
    // Rounding can leave every strict subrange short of target; the whole
    // range always qualifies.
    found = {{0, n - 1}};
    found_g = n;
  }
  out.first = found->first;
  out.last = found->second;
  out.g_max = found_g;
  out.degenerate = false;
  return out;
}

struct CriticalDuration {
  Nanos l_c = 0;
  Nanos r_c = 0;
  std::size_t g_max = 0;
  std::size_t first_sample = 0;
  std::size_t sample_count = 0;  // samples inside [l_c, r_c]
};

// Critical duration of event [l, r] given the channel samples inside it
// (uniform spacing, ts within [l, r]).
inline CriticalDuration critical_duration(std::span<const MetricSample> samples, Nanos l, Nanos r,
                                          const CriticalDurationOptions& opt = {}) {
  std::vector<double> values(samples.size());
  for (std::size_t i = 0; i < samples.size(); ++i) values[i] = samples[i].value;
  CriticalRange range = find_critical_range(values, opt);
  if (range.degenerate) return {l, r, 0, 0, samples.size()};
  return {samples[range.first].ts, samples[range.last].ts, range.g_max, range.first,
          range.last - range.first + 1};
}

struct BehaviorPattern {
  double beta = 0.0;
  double mu = 0.0;
  double sigma = 0.0;
  std::uint64_t exec_count = 0;
  std::optional<MetricChannel> channel;  // nullopt: no governing channel

  friend bool operator==(const BehaviorPattern&, const BehaviorPattern&) = default;
};

struct PatternRecord {
  WorkerId worker;
  FunctionId function;
  BehaviorPattern pattern;

  friend bool operator==(const PatternRecord&, const PatternRecord&) = default;
};

struct SummarizeOptions {
  CriticalDurationOptions critical;
};

// Records are ordered by FunctionId. Python functions seen only off the
// training thread are omitted.
inline std::vector<PatternRecord> summarize(const WorkerTrace& trace,
                                            const CriticalSegments& segments,
                                            const SummarizeOptions& options = {}) {
  struct Acc {
    std::uint64_t count = 0;
    bool on_training_thread = false;
    double weight = 0.0;     // total samples in critical durations
    double mass = 0.0;       // sum of those samples
    double std_mass = 0.0;   // sum of |L(e)| * std(L(e))
  };
  std::map<FunctionId, Acc> acc;
  const double window = static_cast<double>(trace.window.length());
  std::vector<double> values;

  for (const auto& e : trace.events) {
    auto& a = acc[e.function];
    ++a.count;
    if (e.function.kind != FunctionKind::PythonFunction || e.is_training_thread) {
      a.on_training_thread = true;
    }
    auto ch = resource_channel(e.function);
    if (!ch) continue;
    const MetricSeries* series = trace.series(*ch);
    if (!series || series->samples.empty()) continue;
    const auto& s = series->samples;
    auto lo = std::lower_bound(s.begin(), s.end(), e.start,
                               [](const MetricSample& m, Nanos t) { return m.ts < t; });
    auto hi = std::upper_bound(s.begin(), s.end(), e.end,
                               [](Nanos t, const MetricSample& m) { return t < m.ts; });
    if (lo >= hi) continue;
    values.clear();
    for (auto it = lo; it != hi; ++it) values.push_back(it->value);
    CriticalRange range = find_critical_range(values, options.critical);
    const std::size_t first = range.degenerate ? 0 : range.first;
    const std::size_t last = range.degenerate ? values.size() - 1 : range.last;
    const double len = static_cast<double>(last - first + 1);
    double sum = 0.0;
    for (std::size_t i = first; i <= last; ++i) sum += values[i];
    const double mean = sum / len;
    double sq = 0.0;
    for (std::size_t i = first; i <= last; ++i) sq += (values[i] - mean) * (values[i] - mean);
    a.weight += len;
    a.mass += sum;
    a.std_mass += len * std::sqrt(sq / len);
  }

  std::vector<PatternRecord> out;
  out.reserve(acc.size());
  for (const auto& [f, a] : acc) {
    if (!a.on_training_thread) continue;
    PatternRecord rec;
    rec.worker = trace.worker;
    rec.function = f;
    rec.pattern.exec_count = a.count;
    rec.pattern.channel = resource_channel(f);
    rec.pattern.beta =
        std::clamp(static_cast<double>(critical_time(segments, f)) / window, 0.0, 1.0);
    if (a.weight > 0.0) {
      rec.pattern.mu = std::clamp(a.mass / a.weight, 0.0, 1.0);
      rec.pattern.sigma = std::clamp(a.std_mass / a.weight, 0.0, 1.0);
    }
    out.push_back(std::move(rec));
  }
  return out;
}

}  // namespace fbdiag
