// fbdiag command-line entry point.

#include <atomic>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "fbdiag/config.hpp"
#include "fbdiag/coordinator.hpp"
#include "fbdiag/critical_path.hpp"
#include "fbdiag/degradation_detector.hpp"
#include "fbdiag/fault_simulator.hpp"
#include "fbdiag/localization.hpp"
#include "fbdiag/pipeline.hpp"
#include "fbdiag/report.hpp"
#include "fbdiag/trace_io.hpp"

namespace fs = std::filesystem;
using namespace fbdiag;

namespace {

enum Exit : int { kOk = 0, kUsage = 2, kMalformed = 3, kEmpty = 4, kInternal = 5 };

int exit_code_for(ErrorKind k) {
  switch (k) {
    case ErrorKind::Io: return kUsage;
    case ErrorKind::EmptySession:
    case ErrorKind::NoWorkers:
    case ErrorKind::EmptyTrace: return kEmpty;
    case ErrorKind::MalformedRecord:
    case ErrorKind::InvariantViolation:
    case ErrorKind::DuplicateWorker:
    case ErrorKind::OutOfOrderEvent:
    case ErrorKind::NonPositiveIterationTime:
    case ErrorKind::SpecInvalid: return kMalformed;
    case ErrorKind::MissedWindow: return kInternal;
  }
  return kInternal;
}

struct GlobalOptions {
  std::string config_path;
  std::optional<std::uint64_t> seed;
  std::optional<std::uint64_t> threads;
  std::optional<double> window_seconds;
  std::optional<double> beta_gate;
  std::optional<double> delta;
  std::optional<double> k;
  std::optional<std::uint64_t> peer_cap;
};

ToolkitConfig effective_config(const GlobalOptions& g) {
  ToolkitConfig c;
  if (!g.config_path.empty()) apply_config_file(c, g.config_path);
  apply_config_env(c);
  if (g.seed) c.rng_seed = *g.seed;
  if (g.threads) c.threads = *g.threads;
  if (g.window_seconds) c.window_seconds = *g.window_seconds;
  if (g.beta_gate) c.beta_gate = *g.beta_gate;
  if (g.delta) c.delta = *g.delta;
  if (g.k) c.k = *g.k;
  if (g.peer_cap) c.peer_sample_cap = *g.peer_cap;
  validate_config(c);
  return c;
}

json read_json_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorKind::Io, "cannot open " + path);
  try {
    return json::parse(in);
  } catch (const json::exception& ex) {
    throw Error(ErrorKind::SpecInvalid, path + ": " + ex.what());
  }
}

void write_text(const std::string& path, const std::string& text) {
  if (path.empty() || path == "-") {
    std::cout << text;
    return;
  }
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error(ErrorKind::Io, "cannot write " + path);
  out << text;
}

std::string render(const json& report, const std::string& format) {
  if (format == "text") return render_text(report);
  if (format == "csv") return render_csv(report);
  return report.dump(2) + "\n";
}

std::optional<std::set<WorkerId>> parse_worker_filter(const std::vector<std::string>& items) {
  if (items.empty()) return std::nullopt;
  std::set<WorkerId> out;
  for (const auto& item : items) {
    std::stringstream ss(item);
    std::string tok;
    while (std::getline(ss, tok, ',')) {
      if (tok.empty()) continue;
      auto dash = tok.find('-');
      try {
        if (dash == std::string::npos) {
          out.insert(WorkerId{static_cast<std::uint32_t>(std::stoul(tok))});
        } else {
          auto lo = std::stoul(tok.substr(0, dash));
          auto hi = std::stoul(tok.substr(dash + 1));
          for (auto r = lo; r <= hi; ++r) out.insert(WorkerId{static_cast<std::uint32_t>(r)});
        }
      } catch (const std::logic_error&) {
        throw Error(ErrorKind::SpecInvalid, "bad worker selector '" + tok + "'");
      }
    }
  }
  return out;
}

// ---------------------------------------------------------------------------

int cmd_simulate(const GlobalOptions& g, const std::string& spec_path, const std::string& out_dir) {
  auto input = parse_simulation_spec(read_json_file(spec_path));
  if (g.seed) input.seed = *g.seed;
  const ToolkitConfig cfg = effective_config(g);
  const SimulationPlan plan = plan_simulation(input.cluster, input.faults, input.seed);
  fs::create_directories(out_dir);
  SessionMeta meta = plan.meta();
  meta.config = simulation_spec_to_json(input);
  {
    std::ofstream out(fs::path(out_dir) / "session.json", std::ios::trunc);
    if (!out) throw Error(ErrorKind::Io, "cannot write session.json in " + out_dir);
    out << session_meta_to_json(meta).dump(2) << '\n';
  }
  std::atomic<std::uintmax_t> bytes{0};
  detail::parallel_for(static_cast<std::size_t>(input.cluster.workers()), cfg.worker_threads(), [&](std::size_t w) {
    WorkerTrace t = simulate_worker(plan, static_cast<int>(w));
    bytes += write_worker_trace(t, fs::path(out_dir) / trace_file_name(t.worker));
  });
  std::cerr << "simulate: " << input.cluster.workers() << " workers, " << bytes.load() << " bytes -> " << out_dir
            << '\n';
  return kOk;
}

int cmd_summarize(const GlobalOptions& g, const std::string& session_dir, const std::string& out_dir,
                  const std::vector<std::string>& workers, bool dump) {
  const ToolkitConfig cfg = effective_config(g);
  auto only = parse_worker_filter(workers);
  auto stats = summarize_session_dir(session_dir, out_dir, only, cfg);
  if (dump) {
    std::optional<Interval> window;
    if (fs::exists(fs::path(session_dir) / "session.json")) {
      window = read_session_meta(fs::path(session_dir) / "session.json").window;
    }
    auto files = list_worker_files(session_dir, "trace");
    if (only) std::erase_if(files, [&](const auto& f) { return !only->contains(f.first); });
    detail::parallel_for(files.size(), cfg.worker_threads(), [&](std::size_t i) {
      auto trace = load_worker_trace(files[i].second, LoadOptions{files[i].first, window});
      std::ofstream out(fs::path(out_dir) / ("worker_" + std::to_string(files[i].first.rank) + ".segments"));
      dump_segments(out, compute_critical_segments(trace));
    });
  }
  std::cerr << "summarize: " << stats.workers << " workers, traces " << stats.trace_bytes << " bytes, patterns "
            << stats.pattern_bytes << " bytes\n";
  return kOk;
}

struct ReportOutput {
  std::string path;
  std::string format = "json";
  std::string csv;
  bool all = false;
};

void emit_report(const AnomalyReport& report, const ToolkitConfig& cfg, const ReportOutput& o) {
  json j = report_to_json(report, config_to_json(cfg), o.all);
  write_text(o.path, render(j, o.format));
  if (!o.csv.empty()) write_text(o.csv, render_csv(report_to_json(report, config_to_json(cfg), true)));
}

int cmd_localize(const GlobalOptions& g, const std::string& patterns_dir, const ReportOutput& o, unsigned parallel) {
  const ToolkitConfig cfg = effective_config(g);
  PatternTable table = load_pattern_dir(patterns_dir);
  if (table.worker_count() == 0) throw Error(ErrorKind::EmptySession, "no pattern files in " + patterns_dir);
  LocalizeConfig lc = cfg.localize_config();
  lc.threads = std::max(1u, parallel);
  auto report = localize(table, cfg.range_policy(), lc);
  emit_report(report, cfg, o);
  return kOk;
}

json trigger_record(const Trigger& t, std::size_t iteration) {
  return {{"trigger", std::string(trigger_code(t.kind))},
          {"ts", t.at},
          {"iteration", iteration},
          {"mean_ns", t.mean_duration_ns},
          {"min_ns", t.recent_min_ns},
          {"gap_ns", t.gap_ns}};
}

// Marker lines: {"t":"mk","k":"next"|"step","ts":ns} and {"t":"tick","ts":ns}.
// A .trace file is read as a worker trace and mapped by function name.
int cmd_detect(const GlobalOptions& g, const std::string& input) {
  const ToolkitConfig cfg = effective_config(g);
  DegradationDetector det(cfg.detector_config());
  std::size_t triggers = 0;
  auto emit = [&](const std::optional<Trigger>& t) {
    if (!t) return;
    ++triggers;
    std::cout << trigger_record(*t, det.completed_iterations()).dump() << '\n';
  };
  auto feed = [&](const MarkerEvent& m) {
    auto r = det.feed(m);
    if (r.transition == Transition::Learned) {
      std::cout << json{{"state", "matching"}, {"ts", m.ts}}.dump() << '\n';
    } else if (r.transition == Transition::Relearning) {
      std::cout << json{{"state", "learning"}, {"ts", m.ts}}.dump() << '\n';
    }
    emit(r.trigger);
  };

  if (input != "-" && fs::path(input).extension() == ".trace") {
    for (const auto& m : markers_from_trace(load_worker_trace(input))) feed(m);
    return kOk;
  }
  std::ifstream file;
  if (input != "-") {
    file.open(input);
    if (!file) throw Error(ErrorKind::Io, "cannot open " + input);
  }
  std::istream& in = input == "-" ? std::cin : file;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    json j;
    try {
      j = json::parse(line);
      const auto t = j.at("t").get<std::string>();
      const auto ts = j.at("ts").get<Nanos>();
      if (t == "tick") {
        emit(det.tick(ts));
        continue;
      }
      if (t != "mk") throw std::invalid_argument("unknown record type " + t);
      const auto k = j.at("k").get<std::string>();
      if (k != "next" && k != "step") throw std::invalid_argument("unknown marker " + k);
      feed({k == "next" ? MarkerKind::DataloaderNext : MarkerKind::OptimizerStep, ts});
    } catch (const Error&) {
      throw;
    } catch (const std::exception& ex) {
      throw RecordError(ErrorKind::MalformedRecord, input, line_no, ex.what());
    }
  }
  std::cerr << "detect: " << det.completed_iterations() << " iterations, " << triggers << " triggers\n";
  return kOk;
}

int cmd_coordinate_plan(const GlobalOptions& g, std::int64_t rank0, double mean) {
  const ToolkitConfig cfg = effective_config(g);
  std::cout << plan_record(plan_profiling(rank0, mean, cfg.coordinator_config())).dump() << '\n';
  return kOk;
}

int cmd_coordinate_simulate(const GlobalOptions& g, std::size_t daemons, std::size_t runs) {
  const ToolkitConfig cfg = effective_config(g);
  std::size_t agreed = 0, missed = 0;
  for (std::size_t r = 0; r < runs; ++r) {
    SyncSimConfig sc;
    sc.daemons = daemons;
    sc.coordinator = cfg.coordinator_config();
    sc.coordinator.window_seconds = std::min(sc.coordinator.window_seconds, 20.0);
    sc.seed = cfg.rng_seed + r;
    auto res = simulate_synchronized_profiling(sc);
    if (res.all_agree()) ++agreed;
    missed += res.missed;
    std::cout << json{{"run", r}, {"plan", plan_record(res.plan)}, {"agree", res.all_agree()}, {"missed", res.missed}}
                     .dump()
              << '\n';
  }
  std::cerr << "coordinate: " << agreed << "/" << runs << " runs agreed, " << missed << " missed windows\n";
  return agreed == runs ? kOk : kInternal;
}

// Line protocol on stdin: plan records publish a plan; {"rank":r,"iter":i}
// reports a worker's iteration and polls its daemon. Acks go to stdout.
int cmd_coordinate_replay(const std::string& input) {
  std::ifstream file;
  if (input != "-") {
    file.open(input);
    if (!file) throw Error(ErrorKind::Io, "cannot open " + input);
  }
  std::istream& in = input == "-" ? std::cin : file;
  std::map<std::uint32_t, DaemonState> daemons;
  std::optional<ProfilingPlan> plan;
  std::string line;
  std::size_t line_no = 0;
  int status = kOk;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    try {
      json j = json::parse(line);
      if (j.contains("start")) {
        plan = parse_plan_record(j);
        continue;
      }
      const auto rank = j.at("rank").get<std::uint32_t>();
      auto& d = daemons[rank];
      d.worker = WorkerId{rank};
      d.current_iteration = j.at("iter").get<std::int64_t>();
      const auto before = d.phase;
      try {
        d = daemon_poll(d, plan);
      } catch (const Error& e) {
        if (e.kind() != ErrorKind::MissedWindow) throw;
        std::cout << json{{"rank", rank}, {"error", "MissedWindow"}, {"iter", d.current_iteration}}.dump() << '\n';
        status = kInternal;
        continue;
      }
      if (d.phase != before) std::cout << ack_record({d.worker, d.phase, d.current_iteration}).dump() << '\n';
    } catch (const Error&) {
      throw;
    } catch (const std::exception& ex) {
      throw RecordError(ErrorKind::MalformedRecord, input, line_no, ex.what());
    }
  }
  return status;
}

int cmd_e2e(const GlobalOptions& g, const std::string& spec_path, const ReportOutput& o) {
  auto input = parse_simulation_spec(read_json_file(spec_path));
  if (g.seed) input.seed = *g.seed;
  const ToolkitConfig cfg = effective_config(g);
  auto result = run_e2e(input, cfg);
  std::cerr << "e2e: trigger=" << (result.trigger ? std::string(trigger_code(result.trigger->kind)) : "none")
            << " plan=[" << result.plan.start_iteration << "," << result.plan.stop_iteration << ") abnormal="
            << result.report.abnormal().size() << '\n';
  emit_report(result.report, cfg, o);
  return kOk;
}

int cmd_report(const std::string& path, const std::string& format) {
  json j = read_json_file(path);
  try {
    write_text("", render(j, format));
  } catch (const json::exception& ex) {
    throw Error(ErrorKind::MalformedRecord, path + ": " + ex.what());
  }
  return kOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"fbdiag: behavior-pattern diagnosis for distributed training traces"};
  app.require_subcommand(1);
  app.set_version_flag("--version", kToolkitVersion);
  GlobalOptions g;
  app.add_option("--config", g.config_path, "JSON config file")->check(CLI::ExistingFile);
  app.add_option("--seed", g.seed, "RNG seed (simulation and peer sampling)");
  app.add_option("--threads", g.threads, "worker threads for per-worker stages (0 = all cores)");
  app.add_option("--window-seconds", g.window_seconds, "profiling window length");
  app.add_option("--beta-gate", g.beta_gate, "critical-path fraction gate");
  app.add_option("--delta", g.delta, "peer difference threshold");
  app.add_option("--k", g.k, "MAD multiplier");
  app.add_option("--peer-cap", g.peer_cap, "peer sample cap");

  std::string spec_path, out_dir, session_dir, patterns_dir, input_path;
  std::vector<std::string> workers;
  bool dump_segments_flag = false;
  ReportOutput report_out;
  unsigned parallel = 1;
  std::int64_t rank0 = 0;
  double mean = 0.0;
  std::size_t daemons = 64, runs = 1;

  auto* sim = app.add_subcommand("simulate", "generate a synthetic session directory");
  sim->add_option("spec", spec_path, "simulation spec (JSON)")->required();
  sim->add_option("out", out_dir, "output session directory")->required();

  auto* sum = app.add_subcommand("summarize", "per-worker behavior patterns");
  sum->add_option("session", session_dir, "session directory")->required();
  sum->add_option("out", out_dir, "pattern output directory")->required();
  sum->add_option("--workers", workers, "ranks to summarize, e.g. 0,3,8-11");
  sum->add_flag("--dump-segments", dump_segments_flag, "also write critical-path segments per worker");

  auto add_report_options = [&](CLI::App* c) {
    c->add_option("-o,--output", report_out.path, "report path (default stdout)");
    c->add_option("--format", report_out.format, "report format")->check(CLI::IsMember({"json", "text"}));
    c->add_option("--csv", report_out.csv, "also write per-(function, worker) CSV");
    c->add_flag("--all", report_out.all, "include non-abnormal gated verdicts");
  };
  auto* loc = app.add_subcommand("localize", "rank abnormal function executions");
  loc->add_option("patterns", patterns_dir, "pattern directory")->required();
  add_report_options(loc);
  loc->add_option("--parallel", parallel, "localization threads (default 1)");

  auto* det = app.add_subcommand("detect", "run the degradation detector over a marker stream");
  det->add_option("input", input_path, "marker file, .trace file, or - for stdin")->required();

  auto* coord = app.add_subcommand("coordinate", "synchronized profiling plan and protocol");
  coord->require_subcommand(1);
  auto* cplan = coord->add_subcommand("plan", "compute a profiling plan");
  cplan->add_option("--rank0-iteration", rank0)->required();
  cplan->add_option("--mean-seconds", mean)->required();
  auto* csim = coord->add_subcommand("simulate", "discrete-event agreement check");
  csim->add_option("--daemons", daemons);
  csim->add_option("--runs", runs);
  auto* creplay = coord->add_subcommand("replay", "drive daemons from a plan/iteration line stream");
  creplay->add_option("input", input_path, "stream file or -")->required();

  auto* e2e = app.add_subcommand("e2e", "simulate, detect, coordinate, summarize and localize in one run");
  e2e->add_option("spec", spec_path, "simulation spec (JSON)")->required();
  add_report_options(e2e);

  std::string render_format = "text";
  auto* rep = app.add_subcommand("report", "re-render a saved JSON report");
  rep->add_option("report", input_path, "report JSON")->required();
  rep->add_option("--format", render_format)->check(CLI::IsMember({"json", "text", "csv"}));

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? kOk : kUsage;
  }

  try {
    if (*sim) return cmd_simulate(g, spec_path, out_dir);
    if (*sum) return cmd_summarize(g, session_dir, out_dir, workers, dump_segments_flag);
    if (*loc) return cmd_localize(g, patterns_dir, report_out, parallel);
    if (*det) return cmd_detect(g, input_path);
    if (*cplan) return cmd_coordinate_plan(g, rank0, mean);
    if (*csim) return cmd_coordinate_simulate(g, daemons, runs);
    if (*creplay) return cmd_coordinate_replay(input_path);
    if (*e2e) return cmd_e2e(g, spec_path, report_out);
    if (*rep) return cmd_report(input_path, render_format);
  } catch (const Error& e) {
    std::cerr << "fbdiag: " << e.what() << '\n';
    return exit_code_for(e.kind());
  } catch (const std::exception& e) {
    std::cerr << "fbdiag: internal error: " << e.what() << '\n';
    return kInternal;
  }
  return kUsage;
}
