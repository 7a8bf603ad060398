#pragma once

// Synchronized profiling by iteration ID. Rank 0 publishes a plan
// [start, stop) a few iterations ahead of its current iteration; every
// daemon polls the plan and profiles exactly that iteration range.

#include <cmath>
#include <cstdint>
#include <optional>
#include <queue>
#include <random>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json.hpp>

#include "fbdiag/error.hpp"
#include "fbdiag/trace_model.hpp"

namespace fbdiag {

struct CoordinatorConfig {
  std::int64_t lead_iterations = 3;
  double window_seconds = 20.0;
  double timeout_windows = 5.0;  // abort when rank 0 has not reached stop in this many windows
};

struct ProfilingPlan {
  std::int64_t start_iteration = 0;
  std::int64_t stop_iteration = 0;  // exclusive
  double window_seconds = 20.0;

  friend bool operator==(const ProfilingPlan&, const ProfilingPlan&) = default;
};

inline ProfilingPlan plan_profiling(std::int64_t rank0_iteration, double mean_iteration_seconds,
                                    const CoordinatorConfig& config = {}) {
  if (!(mean_iteration_seconds > 0.0)) {
    throw Error(ErrorKind::NonPositiveIterationTime,
                "mean iteration time must be positive, got " + std::to_string(mean_iteration_seconds));
  }
  const auto span = static_cast<std::int64_t>(std::ceil(config.window_seconds / mean_iteration_seconds));
  ProfilingPlan p;
  p.start_iteration = rank0_iteration + std::max<std::int64_t>(config.lead_iterations, 1);
  p.stop_iteration = p.start_iteration + std::max<std::int64_t>(span, 1);
  p.window_seconds = config.window_seconds;
  return p;
}

// True when rank 0 has stalled: the plan was issued `elapsed_seconds` ago
// and rank 0 has still not reached the stop iteration.
inline bool coordinator_timed_out(const ProfilingPlan& plan, double elapsed_seconds,
                                  std::int64_t rank0_iteration, const CoordinatorConfig& config = {}) {
  return rank0_iteration < plan.stop_iteration &&
         elapsed_seconds >= config.timeout_windows * plan.window_seconds;
}

enum class DaemonPhase : std::uint8_t { Idle, Armed, Profiling, Uploading, Done };

inline std::string_view phase_name(DaemonPhase p) {
  switch (p) {
    case DaemonPhase::Idle: return "idle";
    case DaemonPhase::Armed: return "armed";
    case DaemonPhase::Profiling: return "profiling";
    case DaemonPhase::Uploading: return "uploading";
    case DaemonPhase::Done: return "done";
  }
  return "?";
}

struct DaemonState {
  WorkerId worker;
  std::int64_t current_iteration = 0;
  DaemonPhase phase = DaemonPhase::Idle;
  std::optional<ProfilingPlan> plan;        // plan this daemon has accepted
  std::optional<std::int64_t> profiled_from;
  std::optional<std::int64_t> profiled_to;  // exclusive
  bool missed_window = false;
};

// One poll. `plan` is what the daemon currently sees published (nullopt if
// nothing). The worker-side handler armed in advance starts and stops
// profiling exactly at the plan's iteration boundaries, so the recorded
// range is the plan's whenever the daemon was armed before `start`.
// Throws MissedWindow when the first sighting of a plan is at or after its
// start iteration; the daemon stays Idle.
inline DaemonState daemon_poll(DaemonState s, const std::optional<ProfilingPlan>& plan) {
  switch (s.phase) {
    case DaemonPhase::Idle:
      if (!plan || (s.plan && *s.plan == *plan)) return s;
      if (s.current_iteration >= plan->start_iteration) {
        throw Error(ErrorKind::MissedWindow,
                    "worker " + std::to_string(s.worker.rank) + " saw plan [" +
                        std::to_string(plan->start_iteration) + ", " +
                        std::to_string(plan->stop_iteration) + ") at iteration " +
                        std::to_string(s.current_iteration));
      }
      s.plan = plan;
      s.profiled_from.reset();
      s.profiled_to.reset();
      s.phase = DaemonPhase::Armed;
      return s;
    case DaemonPhase::Armed:
      if (s.current_iteration < s.plan->start_iteration) return s;
      s.profiled_from = s.plan->start_iteration;
      s.phase = DaemonPhase::Profiling;
      return s;
    case DaemonPhase::Profiling:
      if (s.current_iteration < s.plan->stop_iteration) return s;
      s.profiled_to = s.plan->stop_iteration;
      s.phase = DaemonPhase::Uploading;
      return s;
    case DaemonPhase::Uploading:
      s.phase = DaemonPhase::Done;
      return s;
    case DaemonPhase::Done:
      // A new plan re-enters the cycle through Idle.
      if (plan && s.plan && !(*plan == *s.plan)) s.phase = DaemonPhase::Idle;
      return s;
  }
  return s;
}

// Wire records.
inline nlohmann::json plan_record(const ProfilingPlan& p) {
  return {{"start", p.start_iteration}, {"stop", p.stop_iteration}, {"window_s", p.window_seconds}};
}

inline ProfilingPlan parse_plan_record(const nlohmann::json& j) {
  return {j.at("start").get<std::int64_t>(), j.at("stop").get<std::int64_t>(),
          j.at("window_s").get<double>()};
}

struct DaemonAck {
  WorkerId worker;
  DaemonPhase phase = DaemonPhase::Idle;
  std::int64_t iteration = 0;
};

inline nlohmann::json ack_record(const DaemonAck& a) {
  return {{"rank", a.worker.rank}, {"phase", std::string(phase_name(a.phase))}, {"iter", a.iteration}};
}

inline DaemonAck parse_ack_record(const nlohmann::json& j) {
  DaemonAck a;
  a.worker = WorkerId{j.at("rank").get<std::uint32_t>()};
  const auto name = j.at("phase").get<std::string>();
  bool found = false;
  for (auto p : {DaemonPhase::Idle, DaemonPhase::Armed, DaemonPhase::Profiling,
                 DaemonPhase::Uploading, DaemonPhase::Done}) {
    if (name == phase_name(p)) {
      a.phase = p;
      found = true;
    }
  }
  if (!found) throw Error(ErrorKind::MalformedRecord, "unknown daemon phase " + name);
  a.iteration = j.at("iter").get<std::int64_t>();
  return a;
}

// In-process transport: the coordinator publishes one plan; daemons post acks.
class MessageBus {
 public:
  void publish(const ProfilingPlan& plan) { plan_ = plan; }
  const std::optional<ProfilingPlan>& current_plan() const { return plan_; }
  void ack(const DaemonAck& a) { acks_.push_back(a); }
  const std::vector<DaemonAck>& acks() const { return acks_; }

 private:
  std::optional<ProfilingPlan> plan_;
  std::vector<DaemonAck> acks_;
};

struct SyncSimConfig {
  std::size_t daemons = 64;
  double iteration_seconds = 1.0;
  double max_poll_interval_iterations = 1.0;  // poll period <= this many iterations
  double max_worker_skew_iterations = 0.5;    // per-worker phase offset of iteration boundaries
  std::int64_t plan_at_iteration = 100;       // rank 0 triggers during this iteration
  CoordinatorConfig coordinator;
  std::uint64_t seed = 0;
};

struct SyncSimResult {
  ProfilingPlan plan;
  std::vector<DaemonState> daemons;
  std::vector<DaemonAck> acks;
  std::size_t missed = 0;

  bool all_agree() const {
    for (const auto& d : daemons) {
      if (d.missed_window || d.phase != DaemonPhase::Done || !d.profiled_from || !d.profiled_to) {
        return false;
      }
      if (*d.profiled_from != plan.start_iteration || *d.profiled_to != plan.stop_iteration) {
        return false;
      }
    }
    return true;
  }
};

// Single-threaded discrete-event run of the protocol: worker iteration
// boundaries, daemon polls and the rank-0 trigger are timestamped events on
// one queue (ties broken by insertion order).
inline SyncSimResult simulate_synchronized_profiling(const SyncSimConfig& cfg) {
  std::mt19937_64 rng(cfg.seed);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  const double T = cfg.iteration_seconds;
  const std::size_t n = cfg.daemons;

  std::vector<double> skew(n), poll_period(n), poll_offset(n);
  for (std::size_t i = 0; i < n; ++i) {
    skew[i] = i == 0 ? 0.0 : unit(rng) * cfg.max_worker_skew_iterations * T;
    poll_period[i] = (0.05 + 0.95 * unit(rng)) * cfg.max_poll_interval_iterations * T;
    poll_offset[i] = unit(rng) * poll_period[i];
  }

  enum class Kind { IterationBoundary, Poll, Trigger };
  struct Ev {
    double time;
    std::uint64_t seq;
    Kind kind;
    std::size_t daemon;
    bool operator>(const Ev& o) const { return time != o.time ? time > o.time : seq > o.seq; }
  };
  std::priority_queue<Ev, std::vector<Ev>, std::greater<>> queue;
  std::uint64_t seq = 0;

  MessageBus bus;
  SyncSimResult result;
  result.daemons.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    result.daemons[i].worker = WorkerId{static_cast<std::uint32_t>(i)};
    queue.push({skew[i] + T, seq++, Kind::IterationBoundary, i});
    queue.push({poll_offset[i], seq++, Kind::Poll, i});
  }
  const double trigger_time = (static_cast<double>(cfg.plan_at_iteration) + unit(rng)) * T;
  queue.push({trigger_time, seq++, Kind::Trigger, 0});

  std::size_t finished = 0;
  std::vector<bool> settled(n, false);
  const double horizon = trigger_time + (cfg.coordinator.timeout_windows * cfg.coordinator.window_seconds) +
                         (static_cast<double>(cfg.coordinator.lead_iterations) + 4.0) * T;

  while (!queue.empty() && finished < n) {
    Ev ev = queue.top();
    queue.pop();
    if (ev.time > horizon) break;
    auto& d = result.daemons[ev.daemon];
    switch (ev.kind) {
      case Kind::IterationBoundary:
        ++d.current_iteration;
        queue.push({ev.time + T, seq++, Kind::IterationBoundary, ev.daemon});
        break;
      case Kind::Trigger: {
        const auto& rank0 = result.daemons[0];
        ProfilingPlan plan = plan_profiling(rank0.current_iteration, T, cfg.coordinator);
        bus.publish(plan);
        result.plan = plan;
        break;
      }
      case Kind::Poll: {
        if (!settled[ev.daemon]) {
          const DaemonPhase before = d.phase;
          try {
            d = daemon_poll(d, bus.current_plan());
          } catch (const Error& e) {
            if (e.kind() != ErrorKind::MissedWindow) throw;
            d.missed_window = true;
            ++result.missed;
            settled[ev.daemon] = true;
            ++finished;
          }
          if (d.phase != before) bus.ack({d.worker, d.phase, d.current_iteration});
          if (d.phase == DaemonPhase::Done && !settled[ev.daemon]) {
            settled[ev.daemon] = true;
            ++finished;
          }
        }
        queue.push({ev.time + poll_period[ev.daemon], seq++, Kind::Poll, ev.daemon});
        break;
      }
    }
  }
  result.acks = bus.acks();
  return result;
}

}  // namespace fbdiag
