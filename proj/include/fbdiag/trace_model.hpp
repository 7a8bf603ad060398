#pragma once

// Core trace data model: function identities, execution events, hardware
// metric series and the per-worker trace bundle.

#include <algorithm>
#include <array>
#include <compare>
#include <cstdint>
#include <functional>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <string_view>
#include <vector>

#include "fbdiag/error.hpp"

namespace fbdiag {

using Nanos = std::int64_t;

struct WorkerId {
  std::uint32_t rank = 0;

  friend auto operator<=>(const WorkerId&, const WorkerId&) = default;
};

enum class FunctionKind : std::uint8_t {
  GpuComputeKernel,
  MemoryOp,
  CollectiveComm,
  PythonFunction,
};

enum class CommScope : std::uint8_t { IntraWorker, InterWorker };

enum class MetricChannel : std::uint8_t {
  GpuSmFrequency,
  CpuUtilization,
  NvlinkUtilization,
  GpuNicBandwidth,
};

inline constexpr std::array<MetricChannel, 4> kAllChannels = {
    MetricChannel::GpuSmFrequency, MetricChannel::CpuUtilization,
    MetricChannel::NvlinkUtilization, MetricChannel::GpuNicBandwidth};

inline constexpr std::array<FunctionKind, 4> kAllKinds = {
    FunctionKind::GpuComputeKernel, FunctionKind::MemoryOp, FunctionKind::CollectiveComm,
    FunctionKind::PythonFunction};

// Short wire names used in trace, pattern and report files.
inline std::string_view kind_code(FunctionKind k) {
  switch (k) {
    case FunctionKind::GpuComputeKernel: return "gpu";
    case FunctionKind::MemoryOp: return "mem";
    case FunctionKind::CollectiveComm: return "comm";
    case FunctionKind::PythonFunction: return "py";
  }
  return "?";
}

inline std::string_view kind_name(FunctionKind k) {
  switch (k) {
    case FunctionKind::GpuComputeKernel: return "GpuComputeKernel";
    case FunctionKind::MemoryOp: return "MemoryOp";
    case FunctionKind::CollectiveComm: return "CollectiveComm";
    case FunctionKind::PythonFunction: return "PythonFunction";
  }
  return "?";
}

inline std::optional<FunctionKind> parse_kind(std::string_view s) {
  for (auto k : kAllKinds) {
    if (s == kind_code(k) || s == kind_name(k)) return k;
  }
  return std::nullopt;
}

inline std::string_view scope_code(CommScope s) {
  return s == CommScope::IntraWorker ? "intra" : "inter";
}

inline std::optional<CommScope> parse_scope(std::string_view s) {
  if (s == "intra" || s == "IntraWorker") return CommScope::IntraWorker;
  if (s == "inter" || s == "InterWorker") return CommScope::InterWorker;
  return std::nullopt;
}

inline std::string_view channel_code(MetricChannel c) {
  switch (c) {
    case MetricChannel::GpuSmFrequency: return "sm";
    case MetricChannel::CpuUtilization: return "cpu";
    case MetricChannel::NvlinkUtilization: return "nvlink";
    case MetricChannel::GpuNicBandwidth: return "nic";
  }
  return "?";
}

inline std::string_view channel_label(MetricChannel c) {
  switch (c) {
    case MetricChannel::GpuSmFrequency: return "GPU SM frequency";
    case MetricChannel::CpuUtilization: return "CPU";
    case MetricChannel::NvlinkUtilization: return "NVLink";
    case MetricChannel::GpuNicBandwidth: return "GPU-NIC";
  }
  return "?";
}

inline std::optional<MetricChannel> parse_channel(std::string_view s) {
  for (auto c : kAllChannels) {
    if (s == channel_code(c)) return c;
  }
  return std::nullopt;
}

struct FunctionId {
  FunctionKind kind = FunctionKind::PythonFunction;
  std::string name;
  std::vector<std::string> call_stack;  // Python frames, outermost first
  std::optional<CommScope> comm_scope;  // set iff kind == CollectiveComm

  friend bool operator==(const FunctionId&, const FunctionId&) = default;
  friend auto operator<=>(const FunctionId&, const FunctionId&) = default;

  std::string display_name() const {
    std::string out = name;
    if (comm_scope) {
      out += comm_scope == CommScope::IntraWorker ? " [intra]" : " [inter]";
    }
    return out;
  }
};

struct FunctionIdHash {
  std::size_t operator()(const FunctionId& f) const noexcept {
    std::size_t h = std::hash<std::string>{}(f.name);
    auto mix = [&h](std::size_t v) { h ^= v + 0x9e3779b97f4a7c15ULL + (h << 6) + (h >> 2); };
    mix(static_cast<std::size_t>(f.kind));
    mix(f.comm_scope ? static_cast<std::size_t>(*f.comm_scope) + 1 : 0);
    for (const auto& frame : f.call_stack) mix(std::hash<std::string>{}(frame));
    return h;
  }
};

inline FunctionId make_kernel(std::string name) {
  return FunctionId{FunctionKind::GpuComputeKernel, std::move(name), {}, std::nullopt};
}
inline FunctionId make_memory_op(std::string name) {
  return FunctionId{FunctionKind::MemoryOp, std::move(name), {}, std::nullopt};
}
inline FunctionId make_comm(std::string name, CommScope scope) {
  return FunctionId{FunctionKind::CollectiveComm, std::move(name), {}, scope};
}
inline FunctionId make_python(std::string name, std::vector<std::string> stack) {
  return FunctionId{FunctionKind::PythonFunction, std::move(name), std::move(stack), std::nullopt};
}

// Higher preempts lower on the critical path.
inline constexpr int priority_level(FunctionKind k) {
  switch (k) {
    case FunctionKind::GpuComputeKernel: return 3;
    case FunctionKind::MemoryOp: return 2;
    case FunctionKind::CollectiveComm: return 1;
    case FunctionKind::PythonFunction: return 0;
  }
  return 0;
}

struct Interval {
  Nanos begin = 0;
  Nanos end = 0;

  Nanos length() const { return end - begin; }
  friend auto operator<=>(const Interval&, const Interval&) = default;
};

struct TraceEvent {
  WorkerId worker;
  FunctionId function;
  Nanos start = 0;
  Nanos end = 0;
  std::int64_t thread_id = 0;
  std::optional<std::size_t> parent_index;
  bool is_training_thread = false;

  friend bool operator==(const TraceEvent&, const TraceEvent&) = default;
};

struct MetricSample {
  Nanos ts = 0;
  double value = 0.0;

  friend bool operator==(const MetricSample&, const MetricSample&) = default;
};

struct MetricSeries {
  WorkerId worker;
  MetricChannel channel = MetricChannel::GpuSmFrequency;
  std::vector<MetricSample> samples;

  friend bool operator==(const MetricSeries&, const MetricSeries&) = default;
};

struct WorkerTrace {
  WorkerId worker;
  Interval window;
  std::vector<TraceEvent> events;
  std::vector<MetricSeries> metrics;

  const MetricSeries* series(MetricChannel c) const {
    for (const auto& s : metrics) {
      if (s.channel == c) return &s;
    }
    return nullptr;
  }

  friend bool operator==(const WorkerTrace&, const WorkerTrace&) = default;
};

// Sorts events by start and fills parent_index from per-thread interval
// containment. Explicit parents (already set, indices into the incoming
// order) are preserved and remapped to the sorted order.
// Ties on start go to the longer interval as parent.
inline void reconstruct_nesting(std::vector<TraceEvent>& events) {
  const std::size_t n = events.size();
  std::vector<std::size_t> order(n);
  for (std::size_t i = 0; i < n; ++i) order[i] = i;
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    const auto& ea = events[a];
    const auto& eb = events[b];
    if (ea.start != eb.start) return ea.start < eb.start;
    return ea.end > eb.end;
  });
  std::vector<std::size_t> new_pos(n);
  for (std::size_t i = 0; i < n; ++i) new_pos[order[i]] = i;

  std::vector<TraceEvent> sorted;
  sorted.reserve(n);
  for (std::size_t i : order) sorted.push_back(std::move(events[i]));
  for (auto& e : sorted) {
    if (e.parent_index) e.parent_index = new_pos[*e.parent_index];
  }

  std::map<std::int64_t, std::vector<std::size_t>> stacks;
  for (std::size_t i = 0; i < n; ++i) {
    auto& ev = sorted[i];
    auto& stack = stacks[ev.thread_id];
    while (!stack.empty()) {
      const auto& top = sorted[stack.back()];
      if (top.start <= ev.start && ev.end <= top.end) break;
      stack.pop_back();
    }
    if (!ev.parent_index && !stack.empty()) ev.parent_index = stack.back();
    stack.push_back(i);
  }
  events = std::move(sorted);
}

// Checks the per-trace invariants; throws InvariantViolation.
inline void validate_trace(const WorkerTrace& trace) {
  auto fail = [&](const std::string& why) {
    throw Error(ErrorKind::InvariantViolation,
                "worker " + std::to_string(trace.worker.rank) + ": " + why);
  };
  if (trace.window.end <= trace.window.begin) fail("empty profiling window");
  for (std::size_t i = 0; i < trace.events.size(); ++i) {
    const auto& e = trace.events[i];
    if (e.start >= e.end) fail("event " + std::to_string(i) + " has end <= start");
    if (e.end <= trace.window.begin || e.start >= trace.window.end) {
      fail("event " + std::to_string(i) + " lies outside the window");
    }
    if ((e.function.kind == FunctionKind::CollectiveComm) != e.function.comm_scope.has_value()) {
      fail("event " + std::to_string(i) + " comm scope present iff kind is comm");
    }
    if (e.parent_index) {
      if (*e.parent_index >= trace.events.size()) fail("dangling parent index");
      const auto& p = trace.events[*e.parent_index];
      if (p.thread_id != e.thread_id || p.start > e.start || e.end > p.end) {
        fail("event " + std::to_string(i) + " is not nested within its parent");
      }
    }
  }
  for (const auto& s : trace.metrics) {
    for (std::size_t i = 0; i < s.samples.size(); ++i) {
      const auto& smp = s.samples[i];
      if (!(smp.value >= 0.0 && smp.value <= 1.0)) {
        fail(std::string(channel_code(s.channel)) + " sample outside [0,1]");
      }
      if (i > 0 && smp.ts <= s.samples[i - 1].ts) {
        fail(std::string(channel_code(s.channel)) + " timestamps not strictly increasing");
      }
    }
  }
}

struct SessionSummary {
  std::size_t worker_count = 0;
  std::vector<WorkerId> workers;
  std::vector<FunctionId> functions;                // sorted union
  std::map<MetricChannel, std::size_t> channel_coverage;  // workers with samples

  bool full_channel_coverage() const {
    for (auto c : kAllChannels) {
      auto it = channel_coverage.find(c);
      if (it == channel_coverage.end() || it->second != worker_count) return false;
    }
    return true;
  }
};

inline SessionSummary validate_session(const std::vector<WorkerTrace>& traces) {
  if (traces.empty()) throw Error(ErrorKind::NoWorkers, "session contains no worker traces");
  SessionSummary out;
  std::set<WorkerId> seen;
  std::set<FunctionId> functions;
  for (auto c : kAllChannels) out.channel_coverage[c] = 0;
  for (const auto& t : traces) {
    if (!seen.insert(t.worker).second) {
      throw Error(ErrorKind::DuplicateWorker, "rank " + std::to_string(t.worker.rank) +
                                                  " appears more than once");
    }
    for (const auto& e : t.events) functions.insert(e.function);
    for (const auto& s : t.metrics) {
      if (!s.samples.empty()) ++out.channel_coverage[s.channel];
    }
  }
  out.worker_count = traces.size();
  out.workers.assign(seen.begin(), seen.end());
  out.functions.assign(functions.begin(), functions.end());
  return out;
}

}  // namespace fbdiag
