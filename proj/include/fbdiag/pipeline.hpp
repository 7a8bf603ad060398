#pragma once

// Stage glue: per-worker summarization over a session directory, and the
// in-memory simulate -> detect -> coordinate -> summarize -> localize run.

#include <atomic>
#include <filesystem>
#include <optional>
#include <set>
#include <vector>

#include "fbdiag/behavior_pattern.hpp"
#include "fbdiag/config.hpp"
#include "fbdiag/coordinator.hpp"
#include "fbdiag/critical_path.hpp"
#include "fbdiag/degradation_detector.hpp"
#include "fbdiag/fault_simulator.hpp"
#include "fbdiag/localization.hpp"
#include "fbdiag/pattern_io.hpp"
#include "fbdiag/trace_io.hpp"

namespace fbdiag {

inline std::vector<PatternRecord> summarize_trace(const WorkerTrace& trace, const SummarizeOptions& options = {}) {
  return summarize(trace, compute_critical_segments(trace), options);
}

struct SummarizeStats {
  std::size_t workers = 0;
  std::uintmax_t trace_bytes = 0;
  std::uintmax_t pattern_bytes = 0;
};

// Loads, summarizes and writes one worker at a time so only `threads`
// traces are resident at once.
inline SummarizeStats summarize_session_dir(const std::filesystem::path& session_dir,
                                            const std::filesystem::path& out_dir,
                                            const std::optional<std::set<WorkerId>>& only,
                                            const ToolkitConfig& config) {
  namespace fs = std::filesystem;
  std::optional<Interval> window;
  if (fs::exists(session_dir / "session.json")) window = read_session_meta(session_dir / "session.json").window;
  auto files = list_worker_files(session_dir, "trace");
  if (only) std::erase_if(files, [&](const auto& f) { return !only->contains(f.first); });
  if (files.empty()) throw Error(ErrorKind::EmptySession, "no worker traces in " + session_dir.string());
  fs::create_directories(out_dir);

  const SummarizeOptions options = config.summarize_options();
  const json config_echo = config_to_json(config);
  std::atomic<std::uintmax_t> trace_bytes{0}, pattern_bytes{0};
  detail::parallel_for(files.size(), config.worker_threads(), [&](std::size_t i) {
    const auto& [worker, path] = files[i];
    WorkerTrace trace = load_worker_trace(path, LoadOptions{worker, window});
    auto records = summarize_trace(trace, options);
    PatternFileHeader header{worker, trace.window.length(), config_echo};
    pattern_bytes += write_patterns(records, out_dir / pattern_file_name(worker), header);
    trace_bytes += fs::file_size(path);
  });
  return {files.size(), trace_bytes.load(), pattern_bytes.load()};
}

struct E2EOptions {
  std::size_t warmup_iterations = 60;   // healthy iterations before faults apply
  std::size_t faulty_iterations = 60;
  std::size_t sync_daemons = 64;        // daemons in the coordinator simulation
};

struct E2EResult {
  std::optional<Trigger> trigger;
  std::int64_t rank0_iteration = 0;
  double mean_iteration_seconds = 0.0;
  ProfilingPlan plan;
  SyncSimResult sync;
  std::map<int, int> gc_pauses;
  AnomalyReport report;
};

// The profiling window always runs, trigger or not, so healthy runs still
// exercise localization. Faults are active throughout the window.
inline E2EResult run_e2e(const SimulationSpecFile& input, const ToolkitConfig& config,
                         const E2EOptions& options = {}) {
  validate_config(config);
  ClusterSpec cluster = input.cluster;
  cluster.window_seconds = config.window_seconds;
  cluster.sample_rate_hz = config.sample_rate_hz;
  validate_spec(cluster, input.faults);
  const std::uint64_t seed = input.seed;

  E2EResult out;
  MarkerSchedule schedule;
  schedule.iterations = options.warmup_iterations + options.faulty_iterations;
  schedule.fault_onset_iteration = options.warmup_iterations;
  const auto markers = marker_stream(cluster, input.faults, schedule, seed);

  DegradationDetector detector(config.detector_config());
  for (const auto& m : markers) {
    auto r = detector.feed(m);
    if (r.trigger && !out.trigger) {
      out.trigger = r.trigger;
      out.rank0_iteration = static_cast<std::int64_t>(detector.completed_iterations());
    }
  }
  if (!out.trigger) out.rank0_iteration = static_cast<std::int64_t>(detector.completed_iterations());
  out.mean_iteration_seconds = detector.mean_duration() / 1e9;
  if (!(out.mean_iteration_seconds > 0.0)) out.mean_iteration_seconds = cluster.iteration_seconds;

  SyncSimConfig sync;
  sync.daemons = std::min<std::size_t>(options.sync_daemons, static_cast<std::size_t>(cluster.workers()));
  sync.iteration_seconds = out.mean_iteration_seconds;
  sync.plan_at_iteration = out.rank0_iteration;
  sync.coordinator = config.coordinator_config();
  sync.seed = seed;
  out.sync = simulate_synchronized_profiling(sync);
  out.plan = out.sync.plan;
  if (!out.sync.all_agree()) {
    throw Error(ErrorKind::InvariantViolation, "daemons disagree on the profiled iteration range");
  }

  const SimulationPlan plan = plan_simulation(cluster, input.faults, seed);
  out.gc_pauses = plan.gc_pauses;
  const SummarizeOptions summarize_options = config.summarize_options();
  std::vector<std::vector<PatternRecord>> per_worker(static_cast<std::size_t>(cluster.workers()));
  detail::parallel_for(per_worker.size(), config.worker_threads(), [&](std::size_t w) {
    per_worker[w] = summarize_trace(simulate_worker(plan, static_cast<int>(w)), summarize_options);
  });

  PatternTable table;
  table.expect_workers(per_worker.size());
  for (std::size_t w = 0; w < per_worker.size(); ++w) {
    table.add_worker(WorkerId{static_cast<std::uint32_t>(w)});
    for (const auto& r : per_worker[w]) table.add(r);
  }
  out.report = localize(table, config.range_policy(), config.localize_config());
  return out;
}

}  // namespace fbdiag
