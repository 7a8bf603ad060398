#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <random>

#include "fbdiag/fault_simulator.hpp"
#include "fbdiag/trace_io.hpp"
#include "fbdiag/trace_model.hpp"
#include "oracles/oracles.hpp"

namespace fs = std::filesystem;
using namespace fbdiag;

namespace {

struct TempDir {
  fs::path path;
  TempDir() {
    static int counter = 0;
    path = fs::temp_directory_path() /
           ("fbdiag_tm_" + std::to_string(::getpid()) + "_" + std::to_string(counter++));
    fs::create_directories(path);
  }
  ~TempDir() { fs::remove_all(path); }
};

void write_lines(const fs::path& p, const std::vector<std::string>& lines) {
  std::ofstream out(p);
  for (const auto& l : lines) out << l << '\n';
}

ClusterSpec small_cluster(int hosts = 4) {
  ClusterSpec c;
  c.hosts = hosts;
  c.gpus_per_host = 8;
  c.rings = 4;
  c.window_seconds = 0.3;
  c.iteration_seconds = 0.1;
  c.sample_rate_hz = 2000;
  return c;
}

}  // namespace

TEST(FunctionIdentity, PythonIdentityNeedsWholeStack) {
  auto a = make_python("f", {"main", "a"});
  auto b = make_python("f", {"main", "b"});
  auto c = make_python("f", {"main", "a"});
  EXPECT_NE(a, b);
  EXPECT_EQ(a, c);
  EXPECT_EQ(FunctionIdHash{}(a), FunctionIdHash{}(c));
}

TEST(FunctionIdentity, CommScopeIsPartOfIdentity) {
  EXPECT_NE(make_comm("x", CommScope::IntraWorker), make_comm("x", CommScope::InterWorker));
  EXPECT_NE(make_kernel("x"), make_memory_op("x"));
}

TEST(Priority, GpuOverMemoryOverCommOverPython) {
  EXPECT_GT(priority_level(FunctionKind::GpuComputeKernel), priority_level(FunctionKind::MemoryOp));
  EXPECT_GT(priority_level(FunctionKind::MemoryOp), priority_level(FunctionKind::CollectiveComm));
  EXPECT_GT(priority_level(FunctionKind::CollectiveComm), priority_level(FunctionKind::PythonFunction));
}

TEST(LoadWorkerTrace, MinimalEventNoMetrics) {
  TempDir d;
  write_lines(d.path / "worker_3.trace",
              {R"({"t":"ev","k":"gpu","n":"gemm","cs":[],"s":0,"e":1000000000,"tid":7,"tt":false})"});
  auto t = load_worker_trace(d.path / "worker_3.trace");
  EXPECT_EQ(t.worker.rank, 3u);
  ASSERT_EQ(t.events.size(), 1u);
  EXPECT_EQ(t.events[0].end, 1'000'000'000);
  std::size_t nonempty = 0;
  for (const auto& s : t.metrics) nonempty += !s.samples.empty();
  EXPECT_EQ(nonempty, 0u);
}

TEST(LoadWorkerTrace, EndBeforeStartIsMalformedWithLine) {
  TempDir d;
  write_lines(d.path / "worker_0.trace",
              {R"({"t":"ev","k":"gpu","n":"a","cs":[],"s":0,"e":10,"tid":7,"tt":false})",
               R"({"t":"ev","k":"gpu","n":"b","cs":[],"s":20,"e":5,"tid":7,"tt":false})"});
  try {
    load_worker_trace(d.path / "worker_0.trace");
    FAIL() << "expected MalformedRecord";
  } catch (const RecordError& e) {
    EXPECT_EQ(e.kind(), ErrorKind::MalformedRecord);
    EXPECT_EQ(e.line(), 2u);
  }
}

TEST(LoadWorkerTrace, SampleOutsideUnitIntervalIsInvariantViolation) {
  TempDir d;
  write_lines(d.path / "worker_0.trace",
              {R"({"t":"ev","k":"gpu","n":"a","cs":[],"s":0,"e":10,"tid":7,"tt":false})",
               R"({"t":"hw","ch":"sm","ts":5,"v":1.5})"});
  try {
    load_worker_trace(d.path / "worker_0.trace");
    FAIL() << "expected InvariantViolation";
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::InvariantViolation);
  }
}

TEST(LoadWorkerTrace, EmptyFileIsEmptyTrace) {
  TempDir d;
  write_lines(d.path / "worker_0.trace", {});
  try {
    load_worker_trace(d.path / "worker_0.trace");
    FAIL() << "expected EmptyTrace";
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::EmptyTrace);
  }
}

TEST(LoadWorkerTrace, GarbageLineIsMalformed) {
  TempDir d;
  write_lines(d.path / "worker_0.trace",
              {R"({"t":"ev","k":"gpu","n":"a","cs":[],"s":0,"e":10,"tid":7,"tt":false})", "{not json"});
  EXPECT_THROW(load_worker_trace(d.path / "worker_0.trace"), RecordError);
}

TEST(LoadWorkerTrace, NestingReconstructedFromContainment) {
  TempDir d;
  write_lines(d.path / "worker_0.trace",
              {R"({"t":"ev","k":"py","n":"child","cs":["main"],"s":10,"e":20,"tid":1,"tt":true})",
               R"({"t":"ev","k":"py","n":"outer","cs":[],"s":0,"e":100,"tid":1,"tt":true})",
               R"({"t":"ev","k":"gpu","n":"other_thread","cs":[],"s":12,"e":18,"tid":7,"tt":false})"});
  auto t = load_worker_trace(d.path / "worker_0.trace");
  ASSERT_EQ(t.events.size(), 3u);
  EXPECT_EQ(t.events[0].function.name, "outer");
  EXPECT_EQ(t.events[1].function.name, "child");
  EXPECT_EQ(t.events[1].parent_index, std::optional<std::size_t>(0));
  EXPECT_FALSE(t.events[2].parent_index.has_value());
}

TEST(ReconstructNesting, IdenticalIntervalsNestInFileOrder) {
  std::vector<TraceEvent> ev(2);
  ev[0].function = make_python("outer", {});
  ev[1].function = make_python("inner", {});
  for (auto& e : ev) {
    e.start = 5;
    e.end = 9;
    e.thread_id = 1;
  }
  reconstruct_nesting(ev);
  EXPECT_EQ(ev[0].function.name, "outer");
  EXPECT_EQ(ev[1].parent_index, std::optional<std::size_t>(0));
}

TEST(ReconstructNesting, PropertyParentsContainChildrenOnSameThread) {
  for (std::uint64_t seed = 0; seed < 200; ++seed) {
    oracle::TraceGen gen(seed);
    auto t = gen.make();
    std::shuffle(t.events.begin(), t.events.end(), gen.rng);
    reconstruct_nesting(t.events);
    for (std::size_t i = 0; i < t.events.size(); ++i) {
      const auto& e = t.events[i];
      if (i > 0) {
        EXPECT_LE(t.events[i - 1].start, e.start);
      }
      if (!e.parent_index) continue;
      const auto& p = t.events[*e.parent_index];
      EXPECT_EQ(p.thread_id, e.thread_id) << "seed " << seed;
      EXPECT_LE(p.start, e.start);
      EXPECT_LE(e.end, p.end);
    }
  }
}

TEST(ValidateSession, DuplicateRank) {
  std::vector<WorkerTrace> traces(2);
  traces[0].worker = traces[1].worker = WorkerId{4};
  try {
    validate_session(traces);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::DuplicateWorker);
  }
}

TEST(ValidateSession, NoWorkers) {
  try {
    validate_session({});
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::NoWorkers);
  }
}

TEST(ValidateSession, FunctionUniverseIsUnion) {
  std::vector<WorkerTrace> traces(4);
  const std::vector<FunctionId> fs = {make_kernel("a"), make_comm("b", CommScope::InterWorker),
                                      make_python("c", {"main"})};
  for (std::uint32_t w = 0; w < 4; ++w) {
    traces[w].worker = WorkerId{w};
    for (std::size_t i = 0; i <= w % 3; ++i) {
      TraceEvent e;
      e.function = fs[i];
      e.start = 0;
      e.end = 5;
      traces[w].events.push_back(e);
    }
  }
  auto s = validate_session(traces);
  EXPECT_EQ(s.worker_count, 4u);
  EXPECT_EQ(s.functions.size(), 3u);
}

TEST(ValidateSession, SimulatedSessionHasFullCoverage) {
  auto sim = simulate(small_cluster(), {}, 5);
  auto s = validate_session(sim.traces);
  EXPECT_EQ(s.worker_count, 32u);
  EXPECT_TRUE(s.full_channel_coverage());
}

TEST(TraceIo, SimulatedSessionRoundTrips) {
  TempDir d;
  auto sim = simulate(small_cluster(), {}, 11);
  write_session(d.path, sim.traces, sim.meta, 2);
  auto loaded = load_session(d.path, std::nullopt, 2);
  ASSERT_EQ(loaded.size(), sim.traces.size());
  for (std::size_t i = 0; i < loaded.size(); ++i) {
    EXPECT_EQ(loaded[i], sim.traces[i]) << "worker " << i;
  }
}

TEST(TraceIo, LoadingIsDeterministic) {
  TempDir d;
  auto sim = simulate(small_cluster(1), {}, 2);
  write_session(d.path, sim.traces, sim.meta);
  auto a = load_session(d.path);
  auto b = load_session(d.path);
  EXPECT_EQ(a, b);
}

TEST(TraceIo, WorkerFilter) {
  TempDir d;
  auto sim = simulate(small_cluster(1), {}, 2);
  write_session(d.path, sim.traces, sim.meta);
  auto only = load_session(d.path, std::set<WorkerId>{WorkerId{1}, WorkerId{6}});
  ASSERT_EQ(only.size(), 2u);
  EXPECT_EQ(only[0].worker.rank, 1u);
  EXPECT_EQ(only[1].worker.rank, 6u);
}

TEST(TraceIo, WindowFromSessionMeta) {
  TempDir d;
  write_lines(d.path / "session.json",
              {R"({"window_start_ns":0,"window_end_ns":500,"sample_rate_hz":10000,"workers":[0],"config":{}})"});
  write_lines(d.path / "worker_0.trace",
              {R"({"t":"ev","k":"gpu","n":"a","cs":[],"s":10,"e":20,"tid":7,"tt":false})"});
  auto t = load_worker_trace(d.path / "worker_0.trace");
  EXPECT_EQ(t.window.begin, 0);
  EXPECT_EQ(t.window.end, 500);
}
