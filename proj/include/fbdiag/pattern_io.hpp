#pragma once

// `worker_<rank>.patterns`: one header line, then one record per function:
//   {"f":{"k":..,"n":..,"cs":[..],"scope":..},"b":..,"m":..,"s":..,"n":..,"ch":..}
// Floats carry 9 significant digits.

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "fbdiag/behavior_pattern.hpp"
#include "fbdiag/error.hpp"
#include "fbdiag/trace_io.hpp"

namespace fbdiag {

inline constexpr int kPatternFormatVersion = 1;

inline std::string pattern_file_name(WorkerId w) {
  return "worker_" + std::to_string(w.rank) + ".patterns";
}

namespace detail {

inline void append_float9(std::string& out, double v) {
  char buf[32];
  int len = std::snprintf(buf, sizeof(buf), "%.9g", v);
  out.append(buf, static_cast<std::size_t>(len));
}

inline void append_function(std::string& out, const FunctionId& f) {
  out += R"({"k":")";
  out += kind_code(f.kind);
  out += R"(","n":)";
  append_json_string(out, f.name);
  out += R"(,"cs":[)";
  for (std::size_t i = 0; i < f.call_stack.size(); ++i) {
    if (i) out += ',';
    append_json_string(out, f.call_stack[i]);
  }
  out += ']';
  if (f.comm_scope) {
    out += R"(,"scope":")";
    out += scope_code(*f.comm_scope);
    out += '"';
  }
  out += '}';
}

inline FunctionId parse_function(const json& j) {
  FunctionId f;
  auto k = parse_kind(j.at("k").get<std::string>());
  if (!k) throw std::invalid_argument("unknown function kind");
  f.kind = *k;
  f.name = j.at("n").get<std::string>();
  if (j.contains("cs")) f.call_stack = j["cs"].get<std::vector<std::string>>();
  if (j.contains("scope") && !j["scope"].is_null()) {
    auto s = parse_scope(j["scope"].get<std::string>());
    if (!s) throw std::invalid_argument("unknown comm scope");
    f.comm_scope = s;
  }
  return f;
}

}  // namespace detail

inline std::string serialize_pattern(const PatternRecord& r) {
  std::string out;
  out += R"({"f":)";
  detail::append_function(out, r.function);
  out += R"(,"b":)";
  detail::append_float9(out, r.pattern.beta);
  out += R"(,"m":)";
  detail::append_float9(out, r.pattern.mu);
  out += R"(,"s":)";
  detail::append_float9(out, r.pattern.sigma);
  out += R"(,"n":)";
  detail::append_int(out, static_cast<std::int64_t>(r.pattern.exec_count));
  out += R"(,"ch":)";
  if (r.pattern.channel) {
    out += '"';
    out += channel_code(*r.pattern.channel);
    out += '"';
  } else {
    out += "null";
  }
  out += '}';
  return out;
}

struct PatternFileHeader {
  WorkerId worker;
  Nanos window_ns = 0;
  json config = json::object();
};

// Returns the number of bytes written.
inline std::uintmax_t write_patterns(const std::vector<PatternRecord>& records,
                                     const std::filesystem::path& path,
                                     const PatternFileHeader& header) {
  std::string buf;
  json h{{"patterns", kPatternFormatVersion},
         {"rank", header.worker.rank},
         {"window_ns", header.window_ns},
         {"config", header.config}};
  buf += h.dump();
  buf += '\n';
  for (const auto& r : records) {
    buf += serialize_pattern(r);
    buf += '\n';
  }
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error(ErrorKind::Io, "cannot open " + path.string() + " for writing");
  out.write(buf.data(), static_cast<std::streamsize>(buf.size()));
  if (!out) throw Error(ErrorKind::Io, "write failed for " + path.string());
  return buf.size();
}

struct PatternFile {
  PatternFileHeader header;
  std::vector<PatternRecord> records;
};

inline PatternRecord parse_pattern_line(const std::string& line, WorkerId worker) {
  json j = json::parse(line);
  PatternRecord r;
  r.worker = worker;
  r.function = detail::parse_function(j.at("f"));
  r.pattern.beta = j.at("b").get<double>();
  r.pattern.mu = j.at("m").get<double>();
  r.pattern.sigma = j.at("s").get<double>();
  r.pattern.exec_count = j.value("n", std::uint64_t{0});
  if (j.contains("ch") && !j["ch"].is_null()) {
    auto c = parse_channel(j["ch"].get<std::string>());
    if (!c) throw std::invalid_argument("unknown channel");
    r.pattern.channel = c;
  }
  for (double v : {r.pattern.beta, r.pattern.mu, r.pattern.sigma}) {
    if (!(v >= 0.0 && v <= 1.0)) throw std::invalid_argument("pattern component outside [0,1]");
  }
  return r;
}

// Streams records to `sink(PatternRecord&&)`; returns the header.
template <typename Sink>
PatternFileHeader read_patterns_streaming(const std::filesystem::path& path, Sink&& sink) {
  const std::string file = path.string();
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorKind::Io, "cannot open " + file);
  std::string line;
  std::size_t line_no = 0;
  PatternFileHeader header;
  bool have_header = false;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    try {
      if (!have_header) {
        json h = json::parse(line);
        if (!h.contains("patterns")) throw std::invalid_argument("missing pattern header");
        header.worker = WorkerId{h.at("rank").get<std::uint32_t>()};
        header.window_ns = h.value("window_ns", Nanos{0});
        if (h.contains("config")) header.config = h["config"];
        have_header = true;
        continue;
      }
      sink(parse_pattern_line(line, header.worker));
    } catch (const std::exception& ex) {
      throw RecordError(ErrorKind::MalformedRecord, file, line_no, ex.what());
    }
  }
  if (!have_header) throw RecordError(ErrorKind::MalformedRecord, file, 0, "missing header line");
  return header;
}

inline PatternFile read_patterns(const std::filesystem::path& path) {
  PatternFile out;
  out.header = read_patterns_streaming(path, [&](PatternRecord&& r) {
    out.records.push_back(std::move(r));
  });
  return out;
}

}  // namespace fbdiag
