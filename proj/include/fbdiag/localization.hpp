#pragma once

// Abnormal-function localization over aggregated behavior patterns.
//
// Two distances per (function f, worker w):
//   D     - L1 distance from the raw pattern to f's expected-range box
//   Delta - fraction of N sampled peers whose max-normalized pattern lies
//           at L1 distance >= delta from w's
// (f, w) is abnormal iff beta > gate and (D > 0 or Delta > M_f + k * MAD_f),
// with M_f / MAD_f the median / median absolute deviation of Delta over all
// workers.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <map>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

#include "fbdiag/behavior_pattern.hpp"
#include "fbdiag/error.hpp"
#include "fbdiag/pattern_io.hpp"
#include "fbdiag/trace_io.hpp"

namespace fbdiag {

using Vec3 = std::array<double, 3>;

inline Vec3 as_vec(const BehaviorPattern& p) { return {p.beta, p.mu, p.sigma}; }

inline double manhattan(const Vec3& a, const Vec3& b) {
  return std::abs(a[0] - b[0]) + std::abs(a[1] - b[1]) + std::abs(a[2] - b[2]);
}

struct Bounds {
  double lo = 0.0;
  double hi = 1.0;

  bool contains(double v) const { return v >= lo && v <= hi; }
  double distance(double v) const { return v < lo ? lo - v : (v > hi ? v - hi : 0.0); }
  friend bool operator==(const Bounds&, const Bounds&) = default;
};

struct ExpectedRange {
  Bounds beta;
  Bounds mu;
  Bounds sigma;

  bool contains(const Vec3& p) const {
    return beta.contains(p[0]) && mu.contains(p[1]) && sigma.contains(p[2]);
  }
  friend bool operator==(const ExpectedRange&, const ExpectedRange&) = default;
};

inline void validate_range(const ExpectedRange& r) {
  for (const Bounds& b : {r.beta, r.mu, r.sigma}) {
    if (!(b.lo >= 0.0 && b.hi <= 1.0 && b.lo <= b.hi)) {
      throw Error(ErrorKind::InvariantViolation, "expected range bounds must satisfy 0 <= lo <= hi <= 1");
    }
  }
}

// Closed form of min over the box of the L1 distance: per-axis projection.
inline double distance_from_expectation(const Vec3& p, const ExpectedRange& r) {
  return r.beta.distance(p[0]) + r.mu.distance(p[1]) + r.sigma.distance(p[2]);
}

inline double distance_from_expectation(const BehaviorPattern& p, const ExpectedRange& r) {
  return distance_from_expectation(as_vec(p), r);
}

// Expected ranges keyed by function kind, optionally refined by comm scope.
class RangePolicy {
 public:
  static RangePolicy defaults() {
    RangePolicy p;
    p.set(FunctionKind::PythonFunction, std::nullopt, {{0.0, 0.01}, {0.0, 1.0}, {0.0, 1.0}});
    p.set(FunctionKind::CollectiveComm, std::nullopt, {{0.0, 0.3}, {0.0, 1.0}, {0.0, 1.0}});
    p.set(FunctionKind::GpuComputeKernel, std::nullopt, {{0.0, 1.0}, {0.0, 1.0}, {0.0, 1.0}});
    p.set(FunctionKind::MemoryOp, std::nullopt, {{0.0, 1.0}, {0.0, 1.0}, {0.0, 1.0}});
    return p;
  }

  void set(FunctionKind kind, std::optional<CommScope> scope, const ExpectedRange& range) {
    validate_range(range);
    ranges_[{kind, scope}] = range;
  }

  const ExpectedRange& range_for(const FunctionId& f) const {
    if (f.comm_scope) {
      auto it = ranges_.find({f.kind, f.comm_scope});
      if (it != ranges_.end()) return it->second;
    }
    auto it = ranges_.find({f.kind, std::nullopt});
    if (it == ranges_.end()) {
      throw Error(ErrorKind::InvariantViolation,
                  "no expected range for kind " + std::string(kind_name(f.kind)));
    }
    return it->second;
  }

  const auto& entries() const { return ranges_; }

 private:
  std::map<std::pair<FunctionKind, std::optional<CommScope>>, ExpectedRange> ranges_;
};

// Componentwise division by the per-component max; a zero max maps to 0.
inline std::vector<Vec3> max_normalize(std::span<const Vec3> raw) {
  Vec3 mx{0.0, 0.0, 0.0};
  for (const auto& v : raw) {
    for (int c = 0; c < 3; ++c) mx[c] = std::max(mx[c], v[c]);
  }
  std::vector<Vec3> out(raw.size());
  for (std::size_t i = 0; i < raw.size(); ++i) {
    for (int c = 0; c < 3; ++c) out[i][c] = mx[c] > 0.0 ? raw[i][c] / mx[c] : 0.0;
  }
  return out;
}

inline std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

// Draws N distinct peers uniformly from [0, |W|) (the worker itself may be
// drawn). Reuses a stamp buffer so each draw costs O(N).
class PeerSampler {
 public:
  explicit PeerSampler(std::uint64_t seed) : rng_(seed) {}

  template <typename Fn>
  void for_each_peer(std::size_t population, std::size_t n, Fn&& fn) {
    if (n >= population) {
      for (std::size_t i = 0; i < population; ++i) fn(i);
      return;
    }
    if (stamps_.size() < population) stamps_.assign(population, 0);
    if (++epoch_ == 0) {
      std::fill(stamps_.begin(), stamps_.end(), 0);
      epoch_ = 1;
    }
    std::uniform_int_distribution<std::size_t> dist(0, population - 1);
    std::size_t drawn = 0;
    while (drawn < n) {
      std::size_t i = dist(rng_);
      if (stamps_[i] == epoch_) continue;
      stamps_[i] = epoch_;
      ++drawn;
      fn(i);
    }
  }

 private:
  std::mt19937_64 rng_;
  std::vector<std::uint32_t> stamps_;
  std::uint32_t epoch_ = 0;
};

inline double differential_distance(std::size_t w, std::span<const Vec3> normalized,
                                    std::size_t sample_size, double delta, PeerSampler& sampler) {
  const std::size_t n = std::min(sample_size, normalized.size());
  if (n == 0) return 0.0;
  std::size_t differing = 0;
  sampler.for_each_peer(normalized.size(), n, [&](std::size_t peer) {
    if (!(manhattan(normalized[w], normalized[peer]) < delta)) ++differing;
  });
  return static_cast<double>(differing) / static_cast<double>(n);
}

inline double differential_distance(std::size_t w, std::span<const Vec3> normalized,
                                    std::size_t sample_size, double delta, std::uint64_t seed) {
  PeerSampler sampler(seed);
  return differential_distance(w, normalized, sample_size, delta, sampler);
}

inline double median_of(std::vector<double> v) {
  if (v.empty()) return 0.0;
  const std::size_t mid = v.size() / 2;
  std::nth_element(v.begin(), v.begin() + static_cast<std::ptrdiff_t>(mid), v.end());
  double upper = v[mid];
  if (v.size() % 2 == 1) return upper;
  double lower = *std::max_element(v.begin(), v.begin() + static_cast<std::ptrdiff_t>(mid));
  return 0.5 * (lower + upper);
}

struct MadStats {
  double median = 0.0;
  double mad = 0.0;
  double threshold = 0.0;
};

inline MadStats mad_threshold(std::span<const double> deltas, double k) {
  MadStats s;
  s.median = median_of(std::vector<double>(deltas.begin(), deltas.end()));
  std::vector<double> dev(deltas.size());
  for (std::size_t i = 0; i < deltas.size(); ++i) dev[i] = std::abs(deltas[i] - s.median);
  s.mad = median_of(std::move(dev));
  s.threshold = s.median + k * s.mad;
  return s;
}

struct LocalizeConfig {
  double beta_gate = 0.01;
  double delta = 0.4;
  double k = 5.0;
  std::size_t peer_sample_cap = 100;  // N = min(cap, |W|)
  double mad_floor = 0.0;             // optional minimum for k * MAD; 0 keeps the literal rule
  std::uint64_t rng_seed = 0;
  unsigned threads = 1;
};

enum class AnomalyReason { OutOfExpectedRange, PeerOutlier, Both };

inline std::string_view reason_name(AnomalyReason r) {
  switch (r) {
    case AnomalyReason::OutOfExpectedRange: return "OutOfExpectedRange";
    case AnomalyReason::PeerOutlier: return "PeerOutlier";
    case AnomalyReason::Both: return "Both";
  }
  return "?";
}

inline std::optional<AnomalyReason> parse_reason(std::string_view s) {
  for (auto r : {AnomalyReason::OutOfExpectedRange, AnomalyReason::PeerOutlier, AnomalyReason::Both}) {
    if (s == reason_name(r)) return r;
  }
  return std::nullopt;
}

struct AnomalyVerdict {
  WorkerId worker;
  std::size_t function = 0;  // index into AnomalyReport::functions
  double D = 0.0;
  double Delta = 0.0;
  bool abnormal = false;
  std::optional<AnomalyReason> reason;
  BehaviorPattern pattern;
  Vec3 normalized{0.0, 0.0, 0.0};
};

struct ComponentStats {
  double min = 0.0;
  double median = 0.0;
  double max = 0.0;
};

struct FunctionSummary {
  std::size_t workers_with_record = 0;
  std::size_t gated = 0;  // workers with beta above the gate
  std::size_t abnormal = 0;
  bool evaluated = false;  // Delta computed (some worker above the gate)
  MadStats delta_stats;
  ExpectedRange range;
  std::array<ComponentStats, 3> raw;  // over workers with a record
  Vec3 median_normalized{0.0, 0.0, 0.0};
  std::optional<MetricChannel> channel;
};

struct AnomalyReport {
  LocalizeConfig config;
  std::size_t worker_count = 0;
  std::vector<FunctionId> functions;  // sorted
  std::vector<FunctionSummary> summaries;
  std::vector<AnomalyVerdict> verdicts;  // gated (f, w) pairs, ranked

  const FunctionId& function_of(const AnomalyVerdict& v) const { return functions[v.function]; }

  std::vector<const AnomalyVerdict*> abnormal() const {
    std::vector<const AnomalyVerdict*> out;
    for (const auto& v : verdicts) {
      if (v.abnormal) out.push_back(&v);
    }
    return out;
  }
};

// Streaming accumulator of pattern records across workers. Holds one
// 3-vector per (function, worker) record.
class PatternTable {
 public:
  void add_worker(WorkerId w) { workers_.try_emplace(w.rank, 0); }

  // Capacity hint for each function's record list; avoids growth slack
  // when the worker count is known up front.
  void expect_workers(std::size_t n) { expected_workers_ = n; }

  void add(const PatternRecord& r) {
    add_worker(r.worker);
    auto [it, inserted] = fn_index_.try_emplace(r.function, functions_.size());
    if (inserted) {
      functions_.push_back(r.function);
      entries_.emplace_back().reserve(expected_workers_);
    }
    entries_[it->second].push_back(Entry{r.worker.rank, r.pattern});
  }

  std::size_t worker_count() const { return workers_.size(); }
  std::size_t function_count() const { return functions_.size(); }

 private:
  friend AnomalyReport localize(const PatternTable&, const RangePolicy&, const LocalizeConfig&);

  struct Entry {
    std::uint32_t rank;
    BehaviorPattern pattern;
  };
  std::map<std::uint32_t, std::uint32_t> workers_;
  std::unordered_map<FunctionId, std::size_t, FunctionIdHash> fn_index_;
  std::vector<FunctionId> functions_;
  std::vector<std::vector<Entry>> entries_;
  std::size_t expected_workers_ = 0;
};

inline AnomalyReport localize(const PatternTable& table, const RangePolicy& policy,
                              const LocalizeConfig& config) {
  if (table.workers_.empty()) throw Error(ErrorKind::EmptySession, "no workers in pattern input");
  AnomalyReport report;
  report.config = config;
  report.worker_count = table.workers_.size();

  std::vector<std::uint32_t> ranks;
  ranks.reserve(table.workers_.size());
  for (const auto& [rank, _] : table.workers_) ranks.push_back(rank);
  auto dense = [&](std::uint32_t rank) {
    return static_cast<std::size_t>(std::lower_bound(ranks.begin(), ranks.end(), rank) - ranks.begin());
  };
  const std::size_t W = ranks.size();

  std::vector<std::size_t> order(table.functions_.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    return table.functions_[a] < table.functions_[b];
  });
  report.functions.reserve(order.size());
  for (std::size_t i : order) report.functions.push_back(table.functions_[i]);
  report.summaries.resize(order.size());

  std::vector<std::vector<AnomalyVerdict>> per_function(order.size());
  detail::parallel_for(order.size(), std::max(1u, config.threads), [&](std::size_t fi) {
    const auto& entries = table.entries_[order[fi]];
    const FunctionId& f = report.functions[fi];
    FunctionSummary& summary = report.summaries[fi];
    summary.range = policy.range_for(f);
    summary.workers_with_record = entries.size();
    summary.channel = resource_channel(f);

    std::vector<Vec3> raw(W, Vec3{0.0, 0.0, 0.0});
    std::vector<const BehaviorPattern*> pattern_of(W, nullptr);
    for (const auto& e : entries) {
      std::size_t d = dense(e.rank);
      if (pattern_of[d]) {
        throw Error(ErrorKind::InvariantViolation,
                    "duplicate record for worker " + std::to_string(e.rank) + " function " + f.name);
      }
      raw[d] = as_vec(e.pattern);
      pattern_of[d] = &e.pattern;
    }
    for (int c = 0; c < 3; ++c) {
      std::vector<double> vals;
      vals.reserve(entries.size());
      for (const auto& e : entries) vals.push_back(as_vec(e.pattern)[c]);
      if (!vals.empty()) {
        auto [mn, mx] = std::minmax_element(vals.begin(), vals.end());
        summary.raw[c] = {*mn, median_of(vals), *mx};
      }
    }
    for (const auto& e : entries) {
      if (e.pattern.beta > config.beta_gate) ++summary.gated;
    }
    if (summary.gated == 0) return;
    summary.evaluated = true;

    const std::vector<Vec3> normalized = max_normalize(raw);
    for (int c = 0; c < 3; ++c) {
      std::vector<double> vals(W);
      for (std::size_t i = 0; i < W; ++i) vals[i] = normalized[i][c];
      summary.median_normalized[c] = median_of(std::move(vals));
    }

    const std::size_t n = std::min(config.peer_sample_cap, W);
    PeerSampler sampler(splitmix64(config.rng_seed ^ splitmix64(fi)));
    std::vector<double> deltas(W);
    for (std::size_t i = 0; i < W; ++i) {
      deltas[i] = differential_distance(i, normalized, n, config.delta, sampler);
    }
    summary.delta_stats = mad_threshold(deltas, config.k);
    if (config.mad_floor > 0.0) {
      summary.delta_stats.threshold =
          summary.delta_stats.median + std::max(config.k * summary.delta_stats.mad, config.mad_floor);
    }

    auto& out = per_function[fi];
    for (std::size_t i = 0; i < W; ++i) {
      const BehaviorPattern* p = pattern_of[i];
      if (!p || !(p->beta > config.beta_gate)) continue;
      AnomalyVerdict v;
      v.worker = WorkerId{ranks[i]};
      v.function = fi;
      v.pattern = *p;
      v.normalized = normalized[i];
      v.D = distance_from_expectation(*p, summary.range);
      v.Delta = deltas[i];
      const bool out_of_range = v.D > 0.0;
      const bool peer_outlier = v.Delta > summary.delta_stats.threshold;
      v.abnormal = out_of_range || peer_outlier;
      if (out_of_range && peer_outlier) {
        v.reason = AnomalyReason::Both;
      } else if (out_of_range) {
        v.reason = AnomalyReason::OutOfExpectedRange;
      } else if (peer_outlier) {
        v.reason = AnomalyReason::PeerOutlier;
      }
      if (v.abnormal) ++summary.abnormal;
      out.push_back(v);
    }
  });

  std::size_t total = 0;
  for (const auto& v : per_function) total += v.size();
  report.verdicts.reserve(total);
  for (auto& v : per_function) {
    report.verdicts.insert(report.verdicts.end(), v.begin(), v.end());
    std::vector<AnomalyVerdict>().swap(v);
  }
  // (worker, function) is unique per verdict, so this order is total and an
  // unstable sort is deterministic without stable_sort's scratch buffer.
  std::sort(report.verdicts.begin(), report.verdicts.end(),
                   [](const AnomalyVerdict& a, const AnomalyVerdict& b) {
                     if (a.abnormal != b.abnormal) return a.abnormal;
                     const double sa = a.D + a.Delta;
                     const double sb = b.D + b.Delta;
                     if (sa != sb) return sa > sb;
                     if (a.worker != b.worker) return a.worker < b.worker;
                     return a.function < b.function;
                   });
  return report;
}

inline AnomalyReport localize(const std::vector<PatternRecord>& records, const RangePolicy& policy,
                              const LocalizeConfig& config) {
  PatternTable table;
  for (const auto& r : records) table.add(r);
  return localize(table, policy, config);
}

// Loads every worker_<rank>.patterns file in dir into a table.
inline PatternTable load_pattern_dir(const std::filesystem::path& dir) {
  PatternTable table;
  const auto files = list_worker_files(dir, "patterns");
  table.expect_workers(files.size());
  for (const auto& [worker, path] : files) {
    auto header = read_patterns_streaming(path, [&](PatternRecord&& r) { table.add(r); });
    table.add_worker(header.worker);
  }
  return table;
}

}  // namespace fbdiag
