#pragma once

// Line-delimited trace files (`worker_<rank>.trace`) and session
// directories (`session.json` plus one trace file per worker).

#include <atomic>
#include <charconv>
#include <filesystem>
#include <fstream>
#include <limits>
#include <mutex>
#include <optional>
#include <regex>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include <nlohmann/json.hpp>

#include "fbdiag/error.hpp"
#include "fbdiag/trace_model.hpp"

namespace fbdiag {

namespace fs = std::filesystem;
using json = nlohmann::json;

namespace detail {

inline void append_double(std::string& out, double v) {
  char buf[32];
  auto res = std::to_chars(buf, buf + sizeof(buf), v);
  out.append(buf, res.ptr);
}

inline void append_int(std::string& out, std::int64_t v) {
  char buf[24];
  auto res = std::to_chars(buf, buf + sizeof(buf), v);
  out.append(buf, res.ptr);
}

inline void append_json_string(std::string& out, const std::string& s) {
  out += json(s).dump();
}

// Runs fn(i) for i in [0, n) on up to `threads` workers; the first
// exception is rethrown after all threads join.
template <typename Fn>
void parallel_for(std::size_t n, unsigned threads, Fn&& fn) {
  if (threads <= 1 || n <= 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::exception_ptr first_error;
  std::mutex error_mutex;
  std::vector<std::thread> pool;
  const unsigned count = static_cast<unsigned>(std::min<std::size_t>(threads, n));
  pool.reserve(count);
  for (unsigned t = 0; t < count; ++t) {
    pool.emplace_back([&] {
      for (std::size_t i = next++; i < n; i = next++) {
        try {
          fn(i);
        } catch (...) {
          std::lock_guard lock(error_mutex);
          if (!first_error) first_error = std::current_exception();
        }
      }
    });
  }
  for (auto& th : pool) th.join();
  if (first_error) std::rethrow_exception(first_error);
}

inline unsigned default_threads() {
  unsigned hc = std::thread::hardware_concurrency();
  return hc == 0 ? 1 : hc;
}

}  // namespace detail

inline std::string trace_file_name(WorkerId w) {
  return "worker_" + std::to_string(w.rank) + ".trace";
}

// Extracts <rank> from "worker_<rank>.<ext>".
inline std::optional<WorkerId> rank_from_file_name(const fs::path& path, std::string_view ext) {
  static const std::regex pattern(R"(worker_(\d+)\.([a-z]+))");
  std::smatch m;
  const std::string name = path.filename().string();
  if (!std::regex_match(name, m, pattern) || m[2].str() != ext) return std::nullopt;
  unsigned long v = std::stoul(m[1].str());
  if (v > std::numeric_limits<std::uint32_t>::max()) return std::nullopt;
  return WorkerId{static_cast<std::uint32_t>(v)};
}

inline std::string serialize_event(const TraceEvent& e) {
  std::string out;
  out.reserve(96 + e.function.name.size());
  out += R"({"t":"ev","k":")";
  out += kind_code(e.function.kind);
  out += R"(","n":)";
  detail::append_json_string(out, e.function.name);
  out += R"(,"cs":[)";
  for (std::size_t i = 0; i < e.function.call_stack.size(); ++i) {
    if (i) out += ',';
    detail::append_json_string(out, e.function.call_stack[i]);
  }
  out += R"(],"s":)";
  detail::append_int(out, e.start);
  out += R"(,"e":)";
  detail::append_int(out, e.end);
  out += R"(,"tid":)";
  detail::append_int(out, e.thread_id);
  out += R"(,"tt":)";
  out += e.is_training_thread ? "true" : "false";
  if (e.function.comm_scope) {
    out += R"(,"scope":")";
    out += scope_code(*e.function.comm_scope);
    out += '"';
  }
  out += '}';
  return out;
}

inline void append_sample_line(std::string& out, MetricChannel ch, const MetricSample& s) {
  out += R"({"t":"hw","ch":")";
  out += channel_code(ch);
  out += R"(","ts":)";
  detail::append_int(out, s.ts);
  out += R"(,"v":)";
  detail::append_double(out, s.value);
  out += "}\n";
}

// Writes events (in stored order) then every metric series. Returns bytes written.
inline std::uintmax_t write_worker_trace(const WorkerTrace& trace, const fs::path& path) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error(ErrorKind::Io, "cannot open " + path.string() + " for writing");
  std::uintmax_t bytes = 0;
  std::string buf;
  buf.reserve(1 << 20);
  auto flush = [&] {
    out.write(buf.data(), static_cast<std::streamsize>(buf.size()));
    bytes += buf.size();
    buf.clear();
  };
  for (const auto& e : trace.events) {
    buf += serialize_event(e);
    buf += '\n';
    if (buf.size() > (1 << 20)) flush();
  }
  for (const auto& s : trace.metrics) {
    for (const auto& smp : s.samples) {
      append_sample_line(buf, s.channel, smp);
      if (buf.size() > (1 << 20)) flush();
    }
  }
  flush();
  if (!out) throw Error(ErrorKind::Io, "write failed for " + path.string());
  return bytes;
}

struct LoadOptions {
  std::optional<WorkerId> worker;  // default: parsed from the file name
  std::optional<Interval> window;  // default: session.json next to the file, else data extent
};

struct SessionMeta {
  Interval window{0, 20'000'000'000};
  double sample_rate_hz = 10000.0;
  std::vector<WorkerId> workers;
  json config = json::object();
};

inline json session_meta_to_json(const SessionMeta& m) {
  json workers = json::array();
  for (auto w : m.workers) workers.push_back(w.rank);
  return json{{"window_start_ns", m.window.begin},
              {"window_end_ns", m.window.end},
              {"sample_rate_hz", m.sample_rate_hz},
              {"workers", workers},
              {"config", m.config}};
}

inline SessionMeta read_session_meta(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorKind::Io, "cannot open " + path.string());
  SessionMeta m;
  try {
    json j = json::parse(in);
    m.window = {j.at("window_start_ns").get<Nanos>(), j.at("window_end_ns").get<Nanos>()};
    m.sample_rate_hz = j.value("sample_rate_hz", 10000.0);
    if (j.contains("workers")) {
      for (const auto& r : j["workers"]) m.workers.push_back(WorkerId{r.get<std::uint32_t>()});
    }
    if (j.contains("config")) m.config = j["config"];
  } catch (const json::exception& ex) {
    throw RecordError(ErrorKind::MalformedRecord, path.string(), 0, ex.what());
  }
  return m;
}

namespace detail {

// Fast path for the exact sample-line shape this library writes; returns
// false to fall back to the general JSON parser.
inline bool parse_sample_fast(std::string_view line, MetricChannel& ch, MetricSample& s) {
  constexpr std::string_view head = R"({"t":"hw","ch":")";
  if (line.substr(0, head.size()) != head) return false;
  line.remove_prefix(head.size());
  auto q = line.find('"');
  if (q == std::string_view::npos) return false;
  auto parsed = parse_channel(line.substr(0, q));
  if (!parsed) return false;
  ch = *parsed;
  line.remove_prefix(q + 1);
  constexpr std::string_view ts_key = R"(,"ts":)";
  if (line.substr(0, ts_key.size()) != ts_key) return false;
  line.remove_prefix(ts_key.size());
  auto r = std::from_chars(line.data(), line.data() + line.size(), s.ts);
  if (r.ec != std::errc()) return false;
  line.remove_prefix(static_cast<std::size_t>(r.ptr - line.data()));
  constexpr std::string_view v_key = R"(,"v":)";
  if (line.substr(0, v_key.size()) != v_key) return false;
  line.remove_prefix(v_key.size());
  auto r2 = std::from_chars(line.data(), line.data() + line.size(), s.value);
  if (r2.ec != std::errc()) return false;
  line.remove_prefix(static_cast<std::size_t>(r2.ptr - line.data()));
  return line == "}";
}

}  // namespace detail

inline WorkerTrace load_worker_trace(const fs::path& path, const LoadOptions& options = {}) {
  const std::string file = path.string();
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorKind::Io, "cannot open " + file);

  WorkerTrace trace;
  if (options.worker) {
    trace.worker = *options.worker;
  } else if (auto w = rank_from_file_name(path, "trace")) {
    trace.worker = *w;
  } else {
    throw RecordError(ErrorKind::MalformedRecord, file, 0,
                      "file name must be worker_<rank>.trace");
  }

  std::vector<std::optional<std::size_t>> explicit_parent;
  std::map<MetricChannel, MetricSeries> series;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.find_first_not_of(" \t") == std::string::npos) continue;
    auto malformed = [&](const std::string& why) {
      return RecordError(ErrorKind::MalformedRecord, file, line_no, why);
    };

    MetricChannel ch;
    MetricSample smp;
    if (detail::parse_sample_fast(line, ch, smp)) {
      if (!(smp.value >= 0.0 && smp.value <= 1.0)) {
        throw RecordError(ErrorKind::InvariantViolation, file, line_no, "sample value outside [0,1]");
      }
      auto& s = series[ch];
      s.channel = ch;
      s.worker = trace.worker;
      s.samples.push_back(smp);
      continue;
    }

    json rec;
    try {
      rec = json::parse(line);
    } catch (const json::exception& ex) {
      throw malformed(std::string("not valid JSON: ") + ex.what());
    }
    if (!rec.is_object() || !rec.contains("t") || !rec["t"].is_string()) {
      throw malformed("record lacks a string \"t\" field");
    }
    try {
      const std::string type = rec["t"].get<std::string>();
      if (type == "hw") {
        auto c = parse_channel(rec.at("ch").get<std::string>());
        if (!c) throw malformed("unknown channel");
        MetricSample s{rec.at("ts").get<Nanos>(), rec.at("v").get<double>()};
        if (!(s.value >= 0.0 && s.value <= 1.0)) {
          throw RecordError(ErrorKind::InvariantViolation, file, line_no, "sample value outside [0,1]");
        }
        auto& ser = series[*c];
        ser.channel = *c;
        ser.worker = trace.worker;
        ser.samples.push_back(s);
      } else if (type == "ev") {
        TraceEvent e;
        e.worker = trace.worker;
        auto k = parse_kind(rec.at("k").get<std::string>());
        if (!k) throw malformed("unknown function kind");
        e.function.kind = *k;
        e.function.name = rec.at("n").get<std::string>();
        if (rec.contains("cs")) {
          e.function.call_stack = rec["cs"].get<std::vector<std::string>>();
        }
        if (rec.contains("scope") && !rec["scope"].is_null()) {
          auto sc = parse_scope(rec["scope"].get<std::string>());
          if (!sc) throw malformed("unknown comm scope");
          e.function.comm_scope = sc;
        }
        if (e.function.kind == FunctionKind::CollectiveComm && !e.function.comm_scope) {
          throw malformed("collective comm event requires \"scope\"");
        }
        if (e.function.kind != FunctionKind::CollectiveComm && e.function.comm_scope) {
          throw malformed("\"scope\" is only valid on comm events");
        }
        if (e.function.kind != FunctionKind::PythonFunction && !e.function.call_stack.empty()) {
          throw malformed("call stack is only valid on Python events");
        }
        e.start = rec.at("s").get<Nanos>();
        e.end = rec.at("e").get<Nanos>();
        if (e.end <= e.start) throw malformed("event end must be greater than start");
        e.thread_id = rec.value("tid", std::int64_t{0});
        e.is_training_thread = rec.value("tt", false);
        if (rec.contains("p") && !rec["p"].is_null()) {
          explicit_parent.push_back(rec["p"].get<std::size_t>());
        } else {
          explicit_parent.push_back(std::nullopt);
        }
        trace.events.push_back(std::move(e));
      } else {
        throw malformed("unknown record type \"" + type + "\"");
      }
    } catch (const json::exception& ex) {
      throw malformed(ex.what());
    }
  }

  if (trace.events.empty() && series.empty()) {
    throw RecordError(ErrorKind::EmptyTrace, file, 0, "no event or sample records");
  }
  for (std::size_t i = 0; i < trace.events.size(); ++i) {
    if (explicit_parent[i]) {
      if (*explicit_parent[i] >= trace.events.size()) {
        throw RecordError(ErrorKind::MalformedRecord, file, 0, "parent index out of range");
      }
      trace.events[i].parent_index = explicit_parent[i];
    }
  }
  for (auto& [ch, s] : series) {
    std::sort(s.samples.begin(), s.samples.end(),
              [](const MetricSample& a, const MetricSample& b) { return a.ts < b.ts; });
    trace.metrics.push_back(std::move(s));
  }

  if (options.window) {
    trace.window = *options.window;
  } else if (auto meta = path.parent_path() / "session.json"; fs::exists(meta)) {
    trace.window = read_session_meta(meta).window;
  } else {
    Nanos lo = std::numeric_limits<Nanos>::max();
    Nanos hi = std::numeric_limits<Nanos>::min();
    for (const auto& e : trace.events) {
      lo = std::min(lo, e.start);
      hi = std::max(hi, e.end);
    }
    for (const auto& s : trace.metrics) {
      if (s.samples.empty()) continue;
      lo = std::min(lo, s.samples.front().ts);
      hi = std::max(hi, s.samples.back().ts);
    }
    trace.window = {lo, hi > lo ? hi : lo + 1};
  }

  reconstruct_nesting(trace.events);
  try {
    validate_trace(trace);
  } catch (const Error& ex) {
    throw RecordError(ErrorKind::InvariantViolation, file, 0, ex.what());
  }
  return trace;
}

// Worker trace files in a session directory, sorted by rank.
inline std::vector<std::pair<WorkerId, fs::path>> list_worker_files(const fs::path& dir,
                                                                    std::string_view ext) {
  std::vector<std::pair<WorkerId, fs::path>> out;
  if (!fs::is_directory(dir)) throw Error(ErrorKind::Io, dir.string() + " is not a directory");
  for (const auto& entry : fs::directory_iterator(dir)) {
    if (!entry.is_regular_file()) continue;
    if (auto w = rank_from_file_name(entry.path(), ext)) out.emplace_back(*w, entry.path());
  }
  std::sort(out.begin(), out.end(), [](const auto& a, const auto& b) { return a.first < b.first; });
  return out;
}

inline void write_session(const fs::path& dir, const std::vector<WorkerTrace>& traces,
                          SessionMeta meta, unsigned threads = 1) {
  fs::create_directories(dir);
  meta.workers.clear();
  for (const auto& t : traces) meta.workers.push_back(t.worker);
  {
    std::ofstream out(dir / "session.json", std::ios::trunc);
    if (!out) throw Error(ErrorKind::Io, "cannot write session.json in " + dir.string());
    out << session_meta_to_json(meta).dump(2) << '\n';
  }
  detail::parallel_for(traces.size(), threads, [&](std::size_t i) {
    write_worker_trace(traces[i], dir / trace_file_name(traces[i].worker));
  });
}

// Loads every worker_<rank>.trace in dir (optionally only `only` ranks).
inline std::vector<WorkerTrace> load_session(const fs::path& dir,
                                             const std::optional<std::set<WorkerId>>& only = {},
                                             unsigned threads = 1) {
  std::optional<Interval> window;
  if (fs::exists(dir / "session.json")) window = read_session_meta(dir / "session.json").window;
  auto files = list_worker_files(dir, "trace");
  if (only) {
    std::erase_if(files, [&](const auto& f) { return !only->contains(f.first); });
  }
  std::vector<WorkerTrace> traces(files.size());
  detail::parallel_for(files.size(), threads, [&](std::size_t i) {
    traces[i] = load_worker_trace(files[i].second, LoadOptions{files[i].first, window});
  });
  return traces;
}

}  // namespace fbdiag
