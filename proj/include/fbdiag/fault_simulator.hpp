#pragma once

// Synthetic multi-worker training traces with injectable faults.
//
// Each iteration is a fixed phase template. Collectives synchronize their
// participants: the ring AllGather synchronizes one ring group, the
// AllReduce synchronizes every worker. Ring communication is a lockstep
// chunk pipeline: every stage lasts chunk / (slowest link rate in the
// ring), so links faster than the bottleneck idle for the rest of each
// stage while the bottleneck link itself transmits continuously at its
// reduced rate.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <map>
#include <optional>
#include <random>
#include <set>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "fbdiag/degradation_detector.hpp"
#include "fbdiag/error.hpp"
#include "fbdiag/localization.hpp"
#include "fbdiag/trace_io.hpp"
#include "fbdiag/trace_model.hpp"

namespace fbdiag {

// Phase durations as fractions of the nominal iteration time.
struct PhaseTemplate {
  double dataloader = 0.004;
  double memcpy = 0.01;
  double allgather = 0.05;
  double broadcast = 0.02;
  double forward = 0.25;
  double backward = 0.45;
  double allreduce = 0.10;
  double optimizer = 0.05;
  int forward_kernels = 8;
  int backward_kernels = 16;
  int optimizer_kernels = 1;

  double busy_fraction() const {
    return dataloader + memcpy + allgather + broadcast + forward + backward + allreduce + optimizer;
  }
};

// Utilization levels written into metric samples, before noise.
struct SignalLevels {
  double sm_busy = 0.95;
  double nic_busy = 0.9;          // link at full rate
  double nic_allgather = 0.4;
  double nic_pcie_fallback = 0.9; // intra-host traffic forced through PCIe
  double nvlink_allgather = 0.5;
  double nvlink_broadcast = 0.8;
  double nvlink_allreduce = 0.5;
  double cpu_base = 0.3;
  double cpu_recv = 0.1;
  double cpu_gc = 0.15;
};

struct ClusterSpec {
  int hosts = 4;
  int gpus_per_host = 8;
  int rings = 4;
  std::vector<double> nic_bond_bandwidth;  // per bond; empty = all 1.0
  double window_seconds = 20.0;
  double sample_rate_hz = 10000.0;
  double iteration_seconds = 1.0;
  double chunk_seconds = 0.001;  // healthy ring stage time
  double noise = 0.03;           // multiplicative U(1 - noise, 1 + noise)
  PhaseTemplate phases;
  SignalLevels levels;

  int workers() const { return hosts * gpus_per_host; }
  int bonds_per_host() const { return (gpus_per_host + 1) / 2; }
  int host_of(int w) const { return w / gpus_per_host; }
  int local_gpu(int w) const { return w % gpus_per_host; }
  int ring_of(int w) const { return local_gpu(w) % rings; }
  int bond_of(int w) const { return host_of(w) * bonds_per_host() + local_gpu(w) / 2; }
};

enum class FaultKind : std::uint8_t {
  SlowNicBond,    // magnitude: remaining link rate
  GpuThrottle,    // magnitude: remaining SM frequency
  NvlinkDown,     // magnitude: PCIe speed relative to NVLink
  AsyncGc,        // magnitude: pause length in iterations; probability per iteration
  LoadImbalance,  // magnitude: max extra compute fraction
  SlowStorage,    // magnitude: extra data-loading stall in iterations
};

inline std::string_view fault_name(FaultKind k) {
  switch (k) {
    case FaultKind::SlowNicBond: return "SlowNicBond";
    case FaultKind::GpuThrottle: return "GpuThrottle";
    case FaultKind::NvlinkDown: return "NvlinkDown";
    case FaultKind::AsyncGc: return "AsyncGc";
    case FaultKind::LoadImbalance: return "LoadImbalance";
    case FaultKind::SlowStorage: return "SlowStorage";
  }
  return "?";
}

inline std::optional<FaultKind> parse_fault_kind(std::string_view s) {
  for (auto k : {FaultKind::SlowNicBond, FaultKind::GpuThrottle, FaultKind::NvlinkDown,
                 FaultKind::AsyncGc, FaultKind::LoadImbalance, FaultKind::SlowStorage}) {
    if (s == fault_name(k)) return k;
  }
  return std::nullopt;
}

struct FaultTarget {
  std::vector<int> workers;
  std::vector<int> hosts;
  std::vector<int> bonds;
  bool all = false;

  bool empty() const { return !all && workers.empty() && hosts.empty() && bonds.empty(); }
};

struct FaultSpec {
  FaultKind kind = FaultKind::SlowNicBond;
  FaultTarget target;
  double magnitude = 0.5;
  std::optional<double> onset_seconds;     // relative to window start
  std::optional<double> duration_seconds;
  std::optional<double> probability;       // per iteration, AsyncGc

  bool active_at(double t) const {
    if (onset_seconds && t < *onset_seconds) return false;
    if (onset_seconds && duration_seconds && t >= *onset_seconds + *duration_seconds) return false;
    return true;
  }
};

inline std::set<int> resolve_targets(const ClusterSpec& spec, const FaultTarget& t) {
  std::set<int> out;
  const int n = spec.workers();
  for (int w = 0; w < n; ++w) {
    bool hit = t.all || std::find(t.workers.begin(), t.workers.end(), w) != t.workers.end() ||
               std::find(t.hosts.begin(), t.hosts.end(), spec.host_of(w)) != t.hosts.end() ||
               std::find(t.bonds.begin(), t.bonds.end(), spec.bond_of(w)) != t.bonds.end();
    if (hit) out.insert(w);
  }
  return out;
}

inline void validate_spec(const ClusterSpec& s, const std::vector<FaultSpec>& faults) {
  auto bad = [](const std::string& why) { throw Error(ErrorKind::SpecInvalid, why); };
  if (s.hosts < 1 || s.gpus_per_host < 1) bad("hosts and gpus_per_host must be >= 1");
  if (s.rings < 1 || s.rings > s.gpus_per_host) bad("rings must be in [1, gpus_per_host]");
  if (!(s.window_seconds > 0.0)) bad("window_seconds must be positive");
  if (!(s.sample_rate_hz > 0.0)) bad("sample_rate_hz must be positive");
  if (!(s.iteration_seconds > 0.0)) bad("iteration_seconds must be positive");
  if (!(s.noise >= 0.0 && s.noise < 0.5)) bad("noise must be in [0, 0.5)");
  const auto& p = s.phases;
  for (double f : {p.dataloader, p.memcpy, p.allgather, p.broadcast, p.forward, p.backward,
                   p.allreduce, p.optimizer}) {
    if (!(f >= 0.0)) bad("phase fractions must be non-negative");
  }
  if (p.busy_fraction() > 1.0) bad("phase fractions must sum to at most 1");
  if (p.forward_kernels < 1 || p.backward_kernels < 1 || p.optimizer_kernels < 1) {
    bad("kernel counts must be >= 1");
  }
  if (!(s.chunk_seconds > 0.0) || s.chunk_seconds > p.allreduce * s.iteration_seconds) {
    bad("chunk_seconds must be positive and no longer than the AllReduce phase");
  }
  if (!s.nic_bond_bandwidth.empty()) {
    if (static_cast<int>(s.nic_bond_bandwidth.size()) != s.hosts * s.bonds_per_host()) {
      bad("nic_bond_bandwidth needs one entry per bond");
    }
    for (double b : s.nic_bond_bandwidth) {
      if (!(b > 0.0 && b <= 1.0)) bad("bond bandwidth must be in (0, 1]");
    }
  }
  for (const auto& f : faults) {
    const std::string name(fault_name(f.kind));
    if (f.target.empty()) bad(name + ": empty target");
    for (int w : f.target.workers) {
      if (w < 0 || w >= s.workers()) bad(name + ": worker out of range");
    }
    for (int h : f.target.hosts) {
      if (h < 0 || h >= s.hosts) bad(name + ": host out of range");
    }
    for (int b : f.target.bonds) {
      if (b < 0 || b >= s.hosts * s.bonds_per_host()) bad(name + ": bond out of range");
    }
    const bool fractional = f.kind == FaultKind::SlowNicBond || f.kind == FaultKind::GpuThrottle ||
                            f.kind == FaultKind::NvlinkDown;
    if (fractional && !(f.magnitude > 0.0 && f.magnitude <= 1.0)) bad(name + ": magnitude must be in (0, 1]");
    if (!fractional && !(f.magnitude > 0.0)) bad(name + ": magnitude must be positive");
    if (f.probability && !(*f.probability >= 0.0 && *f.probability <= 1.0)) {
      bad(name + ": probability must be in [0, 1]");
    }
  }
}

// ---------------------------------------------------------------------------
// Ring pipeline

struct RingLink {
  int worker = 0;     // sender whose GPU-NIC path carries this hop
  double rate = 1.0;  // fraction of link capacity
  double busy_seconds_per_stage = 0.0;

  double volume_per_stage() const { return rate * busy_seconds_per_stage; }
};

struct RingPlan {
  int ring = 0;
  std::vector<RingLink> links;
  double bottleneck_rate = 1.0;
  double stage_seconds = 0.0;
  int stages = 0;

  double total_seconds() const { return stage_seconds * stages; }
};

inline std::vector<double> link_rates(const ClusterSpec& spec, const std::vector<FaultSpec>& faults,
                                      double t) {
  std::vector<double> rate(static_cast<std::size_t>(spec.workers()), 1.0);
  for (int w = 0; w < spec.workers(); ++w) {
    if (!spec.nic_bond_bandwidth.empty()) {
      rate[static_cast<std::size_t>(w)] = spec.nic_bond_bandwidth[static_cast<std::size_t>(spec.bond_of(w))];
    }
  }
  for (const auto& f : faults) {
    if (f.kind != FaultKind::SlowNicBond || !f.active_at(t)) continue;
    for (int w : resolve_targets(spec, f.target)) rate[static_cast<std::size_t>(w)] *= f.magnitude;
  }
  return rate;
}

inline std::vector<RingPlan> ring_schedule(const ClusterSpec& spec, const std::vector<FaultSpec>& faults,
                                           double t = 0.0) {
  const auto rates = link_rates(spec, faults, t);
  const int stages = std::max(
      1, static_cast<int>(std::lround(spec.phases.allreduce * spec.iteration_seconds / spec.chunk_seconds)));
  std::vector<RingPlan> plans(static_cast<std::size_t>(spec.rings));
  for (int r = 0; r < spec.rings; ++r) {
    auto& plan = plans[static_cast<std::size_t>(r)];
    plan.ring = r;
    plan.stages = stages;
    for (int w = 0; w < spec.workers(); ++w) {
      if (spec.ring_of(w) != r) continue;
      plan.links.push_back({w, rates[static_cast<std::size_t>(w)], 0.0});
    }
    plan.bottleneck_rate = 1.0;
    for (const auto& l : plan.links) plan.bottleneck_rate = std::min(plan.bottleneck_rate, l.rate);
    plan.stage_seconds = spec.chunk_seconds / plan.bottleneck_rate;
    for (auto& l : plan.links) l.busy_seconds_per_stage = spec.chunk_seconds / l.rate;
  }
  return plans;
}

// ---------------------------------------------------------------------------
// Iteration timing

struct WorkerIteration {
  Interval load;
  std::optional<Interval> gc;
  Interval memcpy;
  Interval allgather;
  Interval broadcast;
  Interval forward;
  Interval backward;
  Interval allreduce;
  Interval optimizer;
  double sm_scale = 1.0;
  bool nvlink_down = false;
};

struct IterationTiming {
  Nanos begin = 0;
  Nanos end = 0;
  std::vector<WorkerIteration> workers;
  std::vector<RingPlan> rings;
};

inline Nanos to_ns(double seconds) { return static_cast<Nanos>(std::llround(seconds * 1e9)); }

// Per-run random fault state drawn once (imbalance factors).
struct FaultState {
  std::vector<double> compute_scale;  // LoadImbalance multiplier per worker
};

inline FaultState draw_fault_state(const ClusterSpec& spec, const std::vector<FaultSpec>& faults,
                                   std::mt19937_64& rng) {
  FaultState st;
  st.compute_scale.assign(static_cast<std::size_t>(spec.workers()), 1.0);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  for (const auto& f : faults) {
    if (f.kind != FaultKind::LoadImbalance) continue;
    for (int w : resolve_targets(spec, f.target)) {
      st.compute_scale[static_cast<std::size_t>(w)] *= 1.0 + f.magnitude * unit(rng);
    }
  }
  return st;
}

// Lays out one iteration starting at global time `begin`. `stretch`
// scales every phase (used to inject plain slowdowns into marker streams).
inline IterationTiming layout_iteration(const ClusterSpec& spec, const std::vector<FaultSpec>& faults,
                                        const FaultState& state, Nanos begin, std::mt19937_64& rng,
                                        double stretch = 1.0) {
  const int n = spec.workers();
  const double T = spec.iteration_seconds * stretch;
  const auto& ph = spec.phases;
  const double t_rel = static_cast<double>(begin) / 1e9;
  std::uniform_real_distribution<double> unit(0.0, 1.0);

  std::vector<double> sm_scale(static_cast<std::size_t>(n), 1.0);
  std::vector<bool> nvl_down(static_cast<std::size_t>(n), false);
  std::vector<double> nvl_factor(static_cast<std::size_t>(n), 1.0);
  std::vector<double> extra_load(static_cast<std::size_t>(n), 0.0);
  std::vector<double> gc_len(static_cast<std::size_t>(n), 0.0);
  for (const auto& f : faults) {
    if (!f.active_at(t_rel)) continue;
    const auto targets = resolve_targets(spec, f.target);
    switch (f.kind) {
      case FaultKind::GpuThrottle:
        for (int w : targets) sm_scale[static_cast<std::size_t>(w)] *= f.magnitude;
        break;
      case FaultKind::NvlinkDown:
        for (int w : targets) {
          nvl_down[static_cast<std::size_t>(w)] = true;
          nvl_factor[static_cast<std::size_t>(w)] = std::min(nvl_factor[static_cast<std::size_t>(w)], f.magnitude);
        }
        break;
      case FaultKind::SlowStorage:
        for (int w : targets) extra_load[static_cast<std::size_t>(w)] += f.magnitude * spec.iteration_seconds;
        break;
      case FaultKind::AsyncGc: {
        const double p = f.probability.value_or(0.02);
        for (int w : targets) {
          if (unit(rng) < p) gc_len[static_cast<std::size_t>(w)] += f.magnitude * spec.iteration_seconds;
        }
        break;
      }
      case FaultKind::SlowNicBond:
      case FaultKind::LoadImbalance:
        break;
    }
  }

  IterationTiming it;
  it.begin = begin;
  it.workers.resize(static_cast<std::size_t>(n));
  it.rings = ring_schedule(spec, faults, t_rel);
  for (auto& r : it.rings) {
    r.stage_seconds *= stretch;
    for (auto& l : r.links) l.busy_seconds_per_stage *= stretch;
  }

  std::vector<Nanos> arrive(static_cast<std::size_t>(n));
  for (int w = 0; w < n; ++w) {
    auto& wi = it.workers[static_cast<std::size_t>(w)];
    wi.sm_scale = sm_scale[static_cast<std::size_t>(w)];
    wi.nvlink_down = nvl_down[static_cast<std::size_t>(w)];
    Nanos t = begin;
    wi.load = {t, t + to_ns(ph.dataloader * T + extra_load[static_cast<std::size_t>(w)] * stretch)};
    t = wi.load.end;
    if (gc_len[static_cast<std::size_t>(w)] > 0.0) {
      wi.gc = Interval{t, t + to_ns(gc_len[static_cast<std::size_t>(w)] * stretch)};
      t = wi.gc->end;
    }
    wi.memcpy = {t, t + to_ns(ph.memcpy * T)};
    arrive[static_cast<std::size_t>(w)] = wi.memcpy.end;
  }

  // Ring-group AllGather.
  for (int r = 0; r < spec.rings; ++r) {
    Nanos start = begin;
    double factor = 1.0;
    for (int w = 0; w < n; ++w) {
      if (spec.ring_of(w) != r) continue;
      start = std::max(start, arrive[static_cast<std::size_t>(w)]);
      factor = std::min(factor, nvl_factor[static_cast<std::size_t>(w)]);
    }
    const Nanos dur = to_ns(ph.allgather * T / factor);
    for (int w = 0; w < n; ++w) {
      if (spec.ring_of(w) == r) it.workers[static_cast<std::size_t>(w)].allgather = {start, start + dur};
    }
  }

  Nanos ar_start = begin;
  for (int w = 0; w < n; ++w) {
    auto& wi = it.workers[static_cast<std::size_t>(w)];
    const double scale = state.compute_scale[static_cast<std::size_t>(w)] / wi.sm_scale;
    Nanos t = wi.allgather.end;
    wi.broadcast = {t, t + to_ns(ph.broadcast * T / nvl_factor[static_cast<std::size_t>(w)])};
    t = wi.broadcast.end;
    wi.forward = {t, t + to_ns(ph.forward * T * scale)};
    t = wi.forward.end;
    wi.backward = {t, t + to_ns(ph.backward * T * scale)};
    ar_start = std::max(ar_start, wi.backward.end);
  }

  double ring_seconds = 0.0;
  for (const auto& r : it.rings) ring_seconds = std::max(ring_seconds, r.total_seconds());
  const Nanos ar_end = ar_start + to_ns(ring_seconds);
  Nanos end = begin;
  for (int w = 0; w < n; ++w) {
    auto& wi = it.workers[static_cast<std::size_t>(w)];
    wi.allreduce = {ar_start, ar_end};
    const double scale = state.compute_scale[static_cast<std::size_t>(w)] / wi.sm_scale;
    wi.optimizer = {ar_end, ar_end + to_ns(ph.optimizer * T * scale)};
    end = std::max(end, wi.optimizer.end);
  }
  const double slack = std::max(0.02, 1.0 - ph.busy_fraction());
  it.end = end + to_ns(slack * T);
  return it;
}

// ---------------------------------------------------------------------------
// Trace generation

struct SimulationResult {
  ClusterSpec spec;
  std::vector<FaultSpec> faults;
  std::vector<WorkerTrace> traces;
  SessionMeta meta;
  std::vector<Nanos> iteration_starts;
  std::map<int, int> gc_pauses;  // worker -> pause count inside the window
};

namespace detail {

struct SignalSegment {
  Nanos begin = 0;
  Nanos end = 0;
  double level = 0.0;
  Nanos period = 0;  // 0: constant; otherwise on for `on` ns of every period
  Nanos on = 0;
};

inline const std::vector<std::string>& base_stack() {
  static const std::vector<std::string> s = {"train.py:main", "train.py:train_step"};
  return s;
}

inline std::vector<std::string> stack_with(std::initializer_list<std::string> extra) {
  auto s = base_stack();
  s.insert(s.end(), extra.begin(), extra.end());
  return s;
}

constexpr std::int64_t kTrainingThread = 1;
constexpr std::int64_t kComputeStream = 7;
constexpr std::int64_t kCommStream = 8;

class WorkerBuilder {
 public:
  WorkerBuilder(const ClusterSpec& spec, int worker, Interval window)
      : spec_(spec), worker_(worker), window_(window) {
    trace_.worker = WorkerId{static_cast<std::uint32_t>(worker)};
    trace_.window = window;
  }

  void event(const FunctionId& f, Interval iv, std::int64_t tid, bool training) {
    iv.begin = std::max(iv.begin, window_.begin);
    iv.end = std::min(iv.end, window_.end);
    if (iv.begin >= iv.end) return;
    TraceEvent e;
    e.worker = trace_.worker;
    e.function = f;
    e.start = iv.begin;
    e.end = iv.end;
    e.thread_id = tid;
    e.is_training_thread = training;
    trace_.events.push_back(std::move(e));
  }

  void signal(MetricChannel ch, SignalSegment seg) {
    seg.begin = std::max(seg.begin, window_.begin);
    seg.end = std::min(seg.end, window_.end);
    if (seg.begin >= seg.end) return;
    segments_[static_cast<std::size_t>(ch)].push_back(seg);
  }

  // Emits `count` back-to-back kernels alternating between two names.
  void kernels(const FunctionId& a, const FunctionId& b, Interval span, int count) {
    const Nanos len = span.length();
    for (int k = 0; k < count; ++k) {
      Nanos s = span.begin + len * k / count;
      Nanos e = span.begin + len * (k + 1) / count;
      if (e > s) event(k % 2 == 0 ? a : b, {s, e}, kComputeStream, false);
    }
  }

  WorkerTrace finish(std::mt19937_64& rng) {
    const double dt = 1e9 / spec_.sample_rate_hz;
    std::uniform_real_distribution<double> unit(0.0, 1.0);
    const Nanos phase = static_cast<Nanos>(unit(rng) * dt);
    for (auto ch : kAllChannels) {
      auto& segs = segments_[static_cast<std::size_t>(ch)];
      std::sort(segs.begin(), segs.end(),
                [](const SignalSegment& x, const SignalSegment& y) { return x.begin < y.begin; });
      const double base = ch == MetricChannel::CpuUtilization ? spec_.levels.cpu_base : 0.0;
      MetricSeries series;
      series.worker = trace_.worker;
      series.channel = ch;
      std::size_t si = 0;
      for (std::int64_t i = 0;; ++i) {
        const Nanos ts = window_.begin + phase + static_cast<Nanos>(std::llround(static_cast<double>(i) * dt));
        if (ts >= window_.end) break;
        while (si < segs.size() && segs[si].end <= ts) ++si;
        double v = base;
        if (si < segs.size() && segs[si].begin <= ts) {
          const auto& sg = segs[si];
          v = sg.level;
          if (sg.period > 0 && (ts - sg.begin) % sg.period >= sg.on) v = 0.0;
        }
        if (v > 0.0 && spec_.noise > 0.0) v *= 1.0 - spec_.noise + 2.0 * spec_.noise * unit(rng);
        series.samples.push_back({ts, std::clamp(v, 0.0, 1.0)});
      }
      trace_.metrics.push_back(std::move(series));
    }
    reconstruct_nesting(trace_.events);
    return std::move(trace_);
  }

 private:
  const ClusterSpec& spec_;
  int worker_;
  Interval window_;
  WorkerTrace trace_;
  std::array<std::vector<SignalSegment>, 4> segments_;
};

}  // namespace detail

inline const FunctionId& fn_dataloader_next() {
  static const FunctionId f = make_python("dataloader.py:__next__", detail::stack_with({}));
  return f;
}
inline const FunctionId& fn_recv_into() {
  static const FunctionId f =
      make_python("socket.py:recv_into", detail::stack_with({"dataloader.py:__next__"}));
  return f;
}
inline const FunctionId& fn_gc() {
  static const FunctionId f = make_python("gc:collect", detail::stack_with({"gradmode.py:__init__"}));
  return f;
}
inline const FunctionId& fn_forward() {
  static const FunctionId f = make_python("model.py:forward", detail::stack_with({}));
  return f;
}
inline const FunctionId& fn_backward() {
  static const FunctionId f = make_python("autograd.py:backward", detail::stack_with({}));
  return f;
}
inline const FunctionId& fn_optimizer_step() {
  static const FunctionId f = make_python("optimizer.py:step", detail::stack_with({}));
  return f;
}
inline const FunctionId& fn_allreduce() {
  static const FunctionId f = make_comm("ncclAllReduce_RING", CommScope::InterWorker);
  return f;
}
inline const FunctionId& fn_allgather() {
  static const FunctionId f = make_comm("ncclAllGather_RING", CommScope::InterWorker);
  return f;
}
inline const FunctionId& fn_broadcast() {
  static const FunctionId f = make_comm("ncclBroadcast_NVLS", CommScope::IntraWorker);
  return f;
}
inline const FunctionId& fn_memcpy() {
  static const FunctionId f = make_memory_op("cudaMemcpyHtoD");
  return f;
}
inline const FunctionId& fn_gemm_fwd() {
  static const FunctionId f = make_kernel("sm90_gemm_fwd");
  return f;
}
inline const FunctionId& fn_norm_fwd() {
  static const FunctionId f = make_kernel("layer_norm_fwd");
  return f;
}
inline const FunctionId& fn_gemm_bwd() {
  static const FunctionId f = make_kernel("sm90_gemm_bwd");
  return f;
}
inline const FunctionId& fn_norm_bwd() {
  static const FunctionId f = make_kernel("layer_norm_bwd");
  return f;
}
inline const FunctionId& fn_adam() {
  static const FunctionId f = make_kernel("multi_tensor_adam");
  return f;
}

// Global timeline for one window: iteration layout and fault draws shared by
// all workers. Workers are then generated independently from it.
struct SimulationPlan {
  ClusterSpec spec;
  std::vector<FaultSpec> faults;
  std::uint64_t seed = 0;
  Interval window;
  std::vector<IterationTiming> iterations;
  std::map<int, int> gc_pauses;  // worker -> pause count inside the window

  SessionMeta meta() const {
    SessionMeta m;
    m.window = window;
    m.sample_rate_hz = spec.sample_rate_hz;
    for (int w = 0; w < spec.workers(); ++w) m.workers.push_back(WorkerId{static_cast<std::uint32_t>(w)});
    return m;
  }
};

inline SimulationPlan plan_simulation(const ClusterSpec& spec, const std::vector<FaultSpec>& faults,
                                      std::uint64_t seed) {
  validate_spec(spec, faults);
  SimulationPlan plan;
  plan.spec = spec;
  plan.faults = faults;
  plan.seed = seed;
  plan.window = Interval{0, to_ns(spec.window_seconds)};
  std::mt19937_64 global(splitmix64(seed));
  const FaultState state = draw_fault_state(spec, faults, global);
  for (Nanos t = 0; t < plan.window.end;) {
    plan.iterations.push_back(layout_iteration(spec, faults, state, t, global));
    t = plan.iterations.back().end;
  }
  for (const auto& it : plan.iterations) {
    for (int w = 0; w < spec.workers(); ++w) {
      const auto& gc = it.workers[static_cast<std::size_t>(w)].gc;
      if (gc && gc->begin < plan.window.end) ++plan.gc_pauses[w];
    }
  }
  return plan;
}

inline WorkerTrace simulate_worker(const SimulationPlan& plan, int w) {
  const auto& spec = plan.spec;
  const auto& L = spec.levels;
  const std::size_t wi = static_cast<std::size_t>(w);
  detail::WorkerBuilder b(spec, w, plan.window);
  const auto& P = spec.phases;
  for (const auto& it : plan.iterations) {
    const auto& x = it.workers[wi];
    b.event(fn_dataloader_next(), x.load, detail::kTrainingThread, true);
    b.event(fn_recv_into(), x.load, detail::kTrainingThread, true);
    b.signal(MetricChannel::CpuUtilization, {x.load.begin, x.load.end, L.cpu_recv});
    if (x.gc) {
      b.event(fn_gc(), *x.gc, detail::kTrainingThread, true);
      b.signal(MetricChannel::CpuUtilization, {x.gc->begin, x.gc->end, L.cpu_gc});
    }
    b.event(fn_memcpy(), x.memcpy, detail::kComputeStream, false);

    b.event(fn_allgather(), x.allgather, detail::kCommStream, false);
    b.signal(MetricChannel::GpuNicBandwidth,
             {x.allgather.begin, x.allgather.end, x.nvlink_down ? L.nic_pcie_fallback : L.nic_allgather});
    if (!x.nvlink_down) {
      b.signal(MetricChannel::NvlinkUtilization, {x.allgather.begin, x.allgather.end, L.nvlink_allgather});
    }
    b.event(fn_broadcast(), x.broadcast, detail::kCommStream, false);
    if (!x.nvlink_down) {
      b.signal(MetricChannel::NvlinkUtilization, {x.broadcast.begin, x.broadcast.end, L.nvlink_broadcast});
    }

    b.event(fn_forward(), x.forward, detail::kTrainingThread, true);
    b.kernels(fn_gemm_fwd(), fn_norm_fwd(), x.forward, P.forward_kernels);
    b.signal(MetricChannel::GpuSmFrequency, {x.forward.begin, x.forward.end, L.sm_busy * x.sm_scale});
    b.event(fn_backward(), x.backward, detail::kTrainingThread, true);
    b.kernels(fn_gemm_bwd(), fn_norm_bwd(), x.backward, P.backward_kernels);
    b.signal(MetricChannel::GpuSmFrequency, {x.backward.begin, x.backward.end, L.sm_busy * x.sm_scale});

    b.event(fn_allreduce(), x.allreduce, detail::kCommStream, false);
    if (!x.nvlink_down) {
      b.signal(MetricChannel::NvlinkUtilization, {x.allreduce.begin, x.allreduce.end, L.nvlink_allreduce});
    }
    const auto& ring = it.rings[static_cast<std::size_t>(spec.ring_of(w))];
    for (const auto& link : ring.links) {
      if (link.worker != w) continue;
      const Nanos ring_end = x.allreduce.begin + to_ns(ring.total_seconds());
      detail::SignalSegment seg{x.allreduce.begin, std::min(ring_end, x.allreduce.end),
                                L.nic_busy * link.rate, 0, 0};
      if (link.busy_seconds_per_stage < ring.stage_seconds) {
        seg.period = to_ns(ring.stage_seconds);
        seg.on = to_ns(link.busy_seconds_per_stage);
      }
      b.signal(MetricChannel::GpuNicBandwidth, seg);
    }

    b.event(fn_optimizer_step(), x.optimizer, detail::kTrainingThread, true);
    b.kernels(fn_adam(), fn_adam(), x.optimizer, P.optimizer_kernels);
    b.signal(MetricChannel::GpuSmFrequency,
             {x.optimizer.begin, x.optimizer.end, L.sm_busy * x.sm_scale});
  }
  std::mt19937_64 rng(splitmix64(plan.seed ^ splitmix64(0x5eed0000ULL + wi)));
  return b.finish(rng);
}

inline SimulationResult simulate(const ClusterSpec& spec, const std::vector<FaultSpec>& faults,
                                 std::uint64_t seed, unsigned threads = 1) {
  SimulationPlan plan = plan_simulation(spec, faults, seed);
  SimulationResult out;
  out.spec = spec;
  out.faults = faults;
  out.meta = plan.meta();
  out.gc_pauses = plan.gc_pauses;
  for (const auto& it : plan.iterations) out.iteration_starts.push_back(it.begin);
  out.traces.resize(static_cast<std::size_t>(spec.workers()));
  detail::parallel_for(out.traces.size(), threads,
                       [&](std::size_t w) { out.traces[w] = simulate_worker(plan, static_cast<int>(w)); });
  return out;
}

// ---------------------------------------------------------------------------
// Marker streams

struct MarkerSchedule {
  std::size_t iterations = 100;
  std::size_t fault_onset_iteration = 0;  // faults apply from this iteration on
  std::optional<std::size_t> slowdown_from;
  double slowdown_factor = 1.0;           // phase stretch from slowdown_from on
  std::optional<std::size_t> stall_at;    // marker stream stops mid-iteration here
  int worker = 0;
};

// Next at the start of data loading, Step at the end of the optimizer phase.
inline std::vector<MarkerEvent> marker_stream(const ClusterSpec& spec, const std::vector<FaultSpec>& faults,
                                              const MarkerSchedule& schedule, std::uint64_t seed = 0) {
  validate_spec(spec, faults);
  std::mt19937_64 rng(splitmix64(seed));
  const FaultState state = draw_fault_state(spec, faults, rng);
  const std::vector<FaultSpec> none;
  std::vector<MarkerEvent> out;
  Nanos t = 0;
  for (std::size_t i = 0; i < schedule.iterations; ++i) {
    const double stretch =
        schedule.slowdown_from && i >= *schedule.slowdown_from ? schedule.slowdown_factor : 1.0;
    const auto& active = i >= schedule.fault_onset_iteration ? faults : none;
    // Faults are evaluated at t = 0 so onsets in the simulation spec file do not shift with stream length.
    IterationTiming it = layout_iteration(spec, active, state, 0, rng, stretch);
    const auto& x = it.workers[static_cast<std::size_t>(schedule.worker)];
    out.push_back({MarkerKind::DataloaderNext, t + x.load.begin});
    if (schedule.stall_at && i == *schedule.stall_at) break;
    out.push_back({MarkerKind::OptimizerStep, t + x.optimizer.end});
    t += it.end;
  }
  return out;
}

// Markers recovered from a trace by function name.
inline std::vector<MarkerEvent> markers_from_trace(const WorkerTrace& trace,
                                                   std::string_view next_name = "dataloader.py:__next__",
                                                   std::string_view step_name = "optimizer.py:step") {
  std::vector<MarkerEvent> out;
  for (const auto& e : trace.events) {
    if (e.function.kind != FunctionKind::PythonFunction) continue;
    if (e.function.name == next_name) out.push_back({MarkerKind::DataloaderNext, e.start});
    if (e.function.name == step_name) out.push_back({MarkerKind::OptimizerStep, e.end});
  }
  std::stable_sort(out.begin(), out.end(), [](const MarkerEvent& a, const MarkerEvent& b) { return a.ts < b.ts; });
  return out;
}

// ---------------------------------------------------------------------------
// Spec files

inline FaultTarget parse_target(const nlohmann::json& j) {
  FaultTarget t;
  if (j.is_string() && j.get<std::string>() == "all") {
    t.all = true;
    return t;
  }
  if (j.contains("all")) t.all = j["all"].get<bool>();
  if (j.contains("worker")) t.workers.push_back(j["worker"].get<int>());
  if (j.contains("workers")) t.workers = j["workers"].get<std::vector<int>>();
  if (j.contains("host")) t.hosts.push_back(j["host"].get<int>());
  if (j.contains("hosts")) t.hosts = j["hosts"].get<std::vector<int>>();
  if (j.contains("bond")) t.bonds.push_back(j["bond"].get<int>());
  if (j.contains("bonds")) t.bonds = j["bonds"].get<std::vector<int>>();
  return t;
}

inline nlohmann::json target_to_json(const FaultTarget& t) {
  nlohmann::json j = nlohmann::json::object();
  if (t.all) j["all"] = true;
  if (!t.workers.empty()) j["workers"] = t.workers;
  if (!t.hosts.empty()) j["hosts"] = t.hosts;
  if (!t.bonds.empty()) j["bonds"] = t.bonds;
  return j;
}

struct SimulationSpecFile {
  ClusterSpec cluster;
  std::vector<FaultSpec> faults;
  std::uint64_t seed = 0;
};

inline SimulationSpecFile parse_simulation_spec(const nlohmann::json& j) {
  SimulationSpecFile out;
  auto& c = out.cluster;
  try {
    c.hosts = j.value("hosts", c.hosts);
    c.gpus_per_host = j.value("gpus_per_host", c.gpus_per_host);
    c.rings = j.value("rings", c.rings);
    c.nic_bond_bandwidth = j.value("nic_bond_bandwidth", c.nic_bond_bandwidth);
    c.window_seconds = j.value("window_seconds", c.window_seconds);
    c.sample_rate_hz = j.value("sample_rate_hz", c.sample_rate_hz);
    c.iteration_seconds = j.value("iteration_seconds", c.iteration_seconds);
    c.chunk_seconds = j.value("chunk_seconds", c.chunk_seconds);
    c.noise = j.value("noise", c.noise);
    if (j.contains("workers") && j["workers"].get<int>() != c.workers()) {
      throw Error(ErrorKind::SpecInvalid, "workers must equal hosts x gpus_per_host");
    }
    if (j.contains("phases")) {
      const auto& p = j["phases"];
      auto& t = c.phases;
      t.dataloader = p.value("dataloader", t.dataloader);
      t.memcpy = p.value("memcpy", t.memcpy);
      t.allgather = p.value("allgather", t.allgather);
      t.broadcast = p.value("broadcast", t.broadcast);
      t.forward = p.value("forward", t.forward);
      t.backward = p.value("backward", t.backward);
      t.allreduce = p.value("allreduce", t.allreduce);
      t.optimizer = p.value("optimizer", t.optimizer);
      t.forward_kernels = p.value("forward_kernels", t.forward_kernels);
      t.backward_kernels = p.value("backward_kernels", t.backward_kernels);
      t.optimizer_kernels = p.value("optimizer_kernels", t.optimizer_kernels);
    }
    out.seed = j.value("seed", std::uint64_t{0});
    if (j.contains("faults")) {
      for (const auto& f : j["faults"]) {
        FaultSpec fs;
        auto kind = parse_fault_kind(f.at("kind").get<std::string>());
        if (!kind) throw Error(ErrorKind::SpecInvalid, "unknown fault kind " + f["kind"].dump());
        fs.kind = *kind;
        fs.target = parse_target(f.at("target"));
        fs.magnitude = f.value("magnitude", fs.magnitude);
        if (f.contains("onset_s")) fs.onset_seconds = f["onset_s"].get<double>();
        if (f.contains("duration_s")) fs.duration_seconds = f["duration_s"].get<double>();
        if (f.contains("probability")) fs.probability = f["probability"].get<double>();
        out.faults.push_back(fs);
      }
    }
  } catch (const nlohmann::json::exception& ex) {
    throw Error(ErrorKind::SpecInvalid, ex.what());
  }
  validate_spec(out.cluster, out.faults);
  return out;
}

inline nlohmann::json simulation_spec_to_json(const SimulationSpecFile& s) {
  const auto& c = s.cluster;
  const auto& p = c.phases;
  nlohmann::json faults = nlohmann::json::array();
  for (const auto& f : s.faults) {
    nlohmann::json jf{{"kind", std::string(fault_name(f.kind))},
                      {"target", target_to_json(f.target)},
                      {"magnitude", f.magnitude}};
    if (f.onset_seconds) jf["onset_s"] = *f.onset_seconds;
    if (f.duration_seconds) jf["duration_s"] = *f.duration_seconds;
    if (f.probability) jf["probability"] = *f.probability;
    faults.push_back(jf);
  }
  return {{"hosts", c.hosts},
          {"gpus_per_host", c.gpus_per_host},
          {"workers", c.workers()},
          {"rings", c.rings},
          {"nic_bond_bandwidth", c.nic_bond_bandwidth},
          {"window_seconds", c.window_seconds},
          {"sample_rate_hz", c.sample_rate_hz},
          {"iteration_seconds", c.iteration_seconds},
          {"chunk_seconds", c.chunk_seconds},
          {"noise", c.noise},
          {"phases",
           {{"dataloader", p.dataloader},
            {"memcpy", p.memcpy},
            {"allgather", p.allgather},
            {"broadcast", p.broadcast},
            {"forward", p.forward},
            {"backward", p.backward},
            {"allreduce", p.allreduce},
            {"optimizer", p.optimizer},
            {"forward_kernels", p.forward_kernels},
            {"backward_kernels", p.backward_kernels},
            {"optimizer_kernels", p.optimizer_kernels}}},
          {"seed", s.seed},
          {"faults", faults}};
}

}  // namespace fbdiag
