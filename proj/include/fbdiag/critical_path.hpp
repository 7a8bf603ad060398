#pragma once

// Per-worker critical-path extraction.
//
// A function f is critical at time t iff one of its events covers t, no
// event of a strictly higher priority class covers t, and (for Python
// functions) the covering event runs on the training thread with no
// executing child on its thread. Event intervals are half-open [start, end).
//
// The sweep visits the atomic slices between consecutive event endpoints;
// every slice has a constant active set, so evaluating the rule once per
// slice is exact.

#include <algorithm>
#include <array>
#include <map>
#include <ostream>
#include <vector>

#include "fbdiag/trace_model.hpp"

namespace fbdiag {

struct CriticalSegments {
  WorkerId worker;
  std::map<FunctionId, std::vector<Interval>> by_function;  // disjoint, sorted, merged

  friend bool operator==(const CriticalSegments&, const CriticalSegments&) = default;
};

inline CriticalSegments compute_critical_segments(const WorkerTrace& trace) {
  CriticalSegments out;
  out.worker = trace.worker;
  const auto& events = trace.events;
  const std::size_t n = events.size();
  if (n == 0) return out;

  // Dense function ids so the hot loop avoids map lookups.
  std::map<FunctionId, std::size_t> fn_index;
  std::vector<const FunctionId*> fn_by_index;
  std::vector<std::size_t> event_fn(n);
  for (std::size_t i = 0; i < n; ++i) {
    auto [it, inserted] = fn_index.try_emplace(events[i].function, fn_by_index.size());
    if (inserted) fn_by_index.push_back(&it->first);
    event_fn[i] = it->second;
  }
  std::vector<std::vector<Interval>> segs(fn_by_index.size());
  // Slice index last written per function, to merge duplicate coverage.
  std::vector<std::size_t> last_slice(fn_by_index.size(), static_cast<std::size_t>(-1));

  // Events clipped to the window; empty ones never become active.
  std::vector<Nanos> cs(n), ce(n);
  std::vector<Nanos> points;
  points.reserve(2 * n);
  std::vector<std::size_t> live;
  live.reserve(n);
  for (std::size_t i = 0; i < n; ++i) {
    cs[i] = std::max(events[i].start, trace.window.begin);
    ce[i] = std::min(events[i].end, trace.window.end);
    if (cs[i] >= ce[i]) continue;
    live.push_back(i);
    points.push_back(cs[i]);
    points.push_back(ce[i]);
  }
  std::sort(points.begin(), points.end());
  points.erase(std::unique(points.begin(), points.end()), points.end());

  std::vector<std::size_t> by_start = live, by_end = live;
  std::sort(by_start.begin(), by_start.end(), [&](std::size_t a, std::size_t b) { return cs[a] < cs[b]; });
  std::sort(by_end.begin(), by_end.end(), [&](std::size_t a, std::size_t b) { return ce[a] < ce[b]; });

  // Active events per priority level with O(1) swap-removal.
  std::array<std::vector<std::size_t>, 4> active;
  std::vector<std::size_t> slot(n, 0);
  std::vector<int> live_children(n, 0);
  auto level_of = [&](std::size_t i) { return priority_level(events[i].function.kind); };

  const std::size_t m = live.size();
  std::size_t si = 0, ei = 0;
  for (std::size_t p = 0; p + 1 < points.size(); ++p) {
    const Nanos t0 = points[p];
    const Nanos t1 = points[p + 1];
    while (ei < m && ce[by_end[ei]] <= t0) {
      std::size_t i = by_end[ei++];
      auto& vec = active[level_of(i)];
      std::size_t pos = slot[i];
      vec[pos] = vec.back();
      slot[vec[pos]] = pos;
      vec.pop_back();
      if (events[i].parent_index) --live_children[*events[i].parent_index];
    }
    while (si < m && cs[by_start[si]] <= t0) {
      std::size_t i = by_start[si++];
      auto& vec = active[level_of(i)];
      slot[i] = vec.size();
      vec.push_back(i);
      if (events[i].parent_index) ++live_children[*events[i].parent_index];
    }

    int top = -1;
    for (int lvl = 3; lvl >= 0; --lvl) {
      if (!active[lvl].empty()) {
        top = lvl;
        break;
      }
    }
    if (top < 0) continue;
    for (std::size_t i : active[top]) {
      const auto& e = events[i];
      if (e.function.kind == FunctionKind::PythonFunction &&
          (!e.is_training_thread || live_children[i] > 0)) {
        continue;
      }
      std::size_t f = event_fn[i];
      if (last_slice[f] == p) continue;
      last_slice[f] = p;
      auto& list = segs[f];
      if (!list.empty() && list.back().end == t0) {
        list.back().end = t1;
      } else {
        list.push_back({t0, t1});
      }
    }
  }

  for (std::size_t f = 0; f < segs.size(); ++f) {
    if (!segs[f].empty()) out.by_function.emplace(*fn_by_index[f], std::move(segs[f]));
  }
  return out;
}

inline Nanos critical_time(const CriticalSegments& segments, const FunctionId& f) {
  auto it = segments.by_function.find(f);
  if (it == segments.by_function.end()) return 0;
  Nanos total = 0;
  for (const auto& iv : it->second) total += iv.length();
  return total;
}

// Debug dump: one line per interval, "<kind>\t<name>\t<begin>\t<end>".
inline void dump_segments(std::ostream& os, const CriticalSegments& segments) {
  for (const auto& [f, list] : segments.by_function) {
    for (const auto& iv : list) {
      os << kind_code(f.kind) << '\t' << f.display_name() << '\t' << iv.begin << '\t' << iv.end
         << '\n';
    }
  }
}

}  // namespace fbdiag
