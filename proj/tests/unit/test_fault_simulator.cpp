#include <gtest/gtest.h>

#include "fbdiag/fault_simulator.hpp"
#include "fbdiag/degradation_detector.hpp"
#include "fbdiag/pipeline.hpp"

using namespace fbdiag;

namespace {

ClusterSpec desk(double window = 1.0) {
  ClusterSpec c;
  c.hosts = 4;
  c.gpus_per_host = 8;
  c.rings = 4;
  c.window_seconds = window;
  c.iteration_seconds = 0.1;
  c.sample_rate_hz = 5000;
  return c;
}

FaultSpec fault(FaultKind k, FaultTarget t, double magnitude) {
  FaultSpec f;
  f.kind = k;
  f.target = std::move(t);
  f.magnitude = magnitude;
  return f;
}

FaultTarget workers(std::vector<int> w) {
  FaultTarget t;
  t.workers = std::move(w);
  return t;
}

const BehaviorPattern* find(const std::vector<PatternRecord>& recs, const FunctionId& f) {
  for (const auto& r : recs)
    if (r.function == f) return &r.pattern;
  return nullptr;
}

}  // namespace

TEST(RingSchedule, EveryLinkMovesOneChunkPerStage) {
  auto spec = desk();
  auto plans = ring_schedule(spec, {fault(FaultKind::SlowNicBond, workers({5}), 0.5)});
  ASSERT_EQ(plans.size(), 4u);
  for (const auto& p : plans) {
    EXPECT_EQ(p.links.size(), 8u);
    for (const auto& l : p.links) {
      EXPECT_NEAR(l.volume_per_stage(), spec.chunk_seconds, 1e-15);
      EXPECT_LE(l.busy_seconds_per_stage, p.stage_seconds + 1e-15);
      EXPECT_EQ(spec.ring_of(l.worker), p.ring);
    }
  }
  EXPECT_DOUBLE_EQ(plans[1].bottleneck_rate, 0.5);
  EXPECT_DOUBLE_EQ(plans[0].bottleneck_rate, 1.0);
  EXPECT_DOUBLE_EQ(plans[1].total_seconds(), 2 * plans[0].total_seconds());
}

TEST(Simulator, SeededRunsAreIdentical) {
  auto spec = desk(0.3);
  auto a = simulate(spec, {}, 9);
  auto b = simulate(spec, {}, 9, 4);
  EXPECT_EQ(a.traces, b.traces);
  auto c = simulate(spec, {}, 10);
  EXPECT_NE(a.traces[0].metrics, c.traces[0].metrics);
}

TEST(Simulator, EventsLieOnDeclaredThreads) {
  auto sim = simulate(desk(0.3), {}, 1);
  for (const auto& e : sim.traces[3].events) {
    EXPECT_LT(e.start, e.end);
    if (e.function.kind == FunctionKind::PythonFunction) {
      EXPECT_TRUE(e.is_training_thread);
    }
  }
}

TEST(Simulator, SlowLinkThreeClassSignature) {
  auto spec = desk(1.0);
  auto sim = simulate(spec, {fault(FaultKind::SlowNicBond, workers({5}), 0.5)}, 3);
  std::vector<const BehaviorPattern*> p;
  std::vector<std::vector<PatternRecord>> keep;
  for (const auto& t : sim.traces) keep.push_back(summarize_trace(t));
  double mu_out = 0, mu_in = 0, sigma_in = 0;
  int n_out = 0, n_in = 0;
  const auto* slow = find(keep[5], fn_allreduce());
  ASSERT_NE(slow, nullptr);
  for (int w = 0; w < 32; ++w) {
    const auto* x = find(keep[static_cast<std::size_t>(w)], fn_allreduce());
    ASSERT_NE(x, nullptr);
    if (w == 5) continue;
    if (spec.ring_of(w) == spec.ring_of(5)) {
      mu_in += x->mu;
      sigma_in = std::max(sigma_in, 0.0) + x->sigma;
      ++n_in;
    } else {
      mu_out += x->mu;
      ++n_out;
    }
  }
  mu_in /= n_in;
  mu_out /= n_out;
  sigma_in /= n_in;
  EXPECT_GT(mu_out, mu_in);
  EXPECT_LT(2 * slow->sigma, sigma_in);
}

TEST(Simulator, GpuThrottleLowersSmSignal) {
  auto spec = desk(0.5);
  FaultTarget host1;
  host1.hosts = {1};
  auto sim = simulate(spec, {fault(FaultKind::GpuThrottle, host1, 0.5)}, 2);
  auto healthy = summarize_trace(sim.traces[0]);
  auto slow = summarize_trace(sim.traces[9]);
  EXPECT_LT(find(slow, fn_gemm_fwd())->mu, 0.7 * find(healthy, fn_gemm_fwd())->mu);
  EXPECT_GT(find(slow, fn_gemm_fwd())->beta, find(healthy, fn_gemm_fwd())->beta);
}

TEST(Simulator, GcPausesVaryAcrossSeeds) {
  auto spec = desk(1.0);
  FaultSpec gc = fault(FaultKind::AsyncGc, FaultTarget{{}, {}, {}, true}, 0.5);
  gc.probability = 0.05;
  std::set<std::map<int, int>> seen;
  for (std::uint64_t s = 0; s < 5; ++s) seen.insert(plan_simulation(spec, {gc}, s).gc_pauses);
  EXPECT_GT(seen.size(), 1u);
}

TEST(Simulator, InvalidSpecs) {
  auto spec = desk();
  auto expect_invalid = [](const ClusterSpec& s, const std::vector<FaultSpec>& f) {
    try {
      validate_spec(s, f);
      FAIL();
    } catch (const Error& e) {
      EXPECT_EQ(e.kind(), ErrorKind::SpecInvalid);
    }
  };
  expect_invalid(spec, {fault(FaultKind::SlowNicBond, workers({99}), 0.5)});
  expect_invalid(spec, {fault(FaultKind::SlowNicBond, workers({1}), 1.5)});
  expect_invalid(spec, {fault(FaultKind::SlowNicBond, FaultTarget{}, 0.5)});
  auto bad_rings = spec;
  bad_rings.rings = 9;
  expect_invalid(bad_rings, {});
  auto bad_phases = spec;
  bad_phases.phases.forward = 0.9;
  expect_invalid(bad_phases, {});
}

TEST(Markers, StableStreamHasEqualDurations) {
  auto spec = desk();
  spec.noise = 0.0;
  MarkerSchedule sch;
  sch.iterations = 30;
  auto m = marker_stream(spec, {}, sch);
  ASSERT_EQ(m.size(), 60u);
  const Nanos d0 = m[1].ts - m[0].ts;
  for (std::size_t i = 0; i + 1 < m.size(); i += 2) {
    EXPECT_EQ(m[i].kind, MarkerKind::DataloaderNext);
    EXPECT_EQ(m[i + 1].ts - m[i].ts, d0);
  }
}

TEST(Markers, StallStopsMidIteration) {
  MarkerSchedule sch;
  sch.iterations = 20;
  sch.stall_at = 15;
  auto m = marker_stream(desk(), {}, sch);
  EXPECT_EQ(m.size(), 31u);
  EXPECT_EQ(m.back().kind, MarkerKind::DataloaderNext);
}

TEST(Markers, RecoveredFromTrace) {
  auto sim = simulate(desk(0.5), {}, 4);
  auto m = markers_from_trace(sim.traces[2]);
  ASSERT_GE(m.size(), 8u);
  EXPECT_EQ(m[0].kind, MarkerKind::DataloaderNext);
}

TEST(SpecFile, JsonRoundTrip) {
  SimulationSpecFile s;
  s.cluster = desk();
  s.faults.push_back(fault(FaultKind::NvlinkDown, workers({3, 11}), 1.0));
  FaultSpec gc = fault(FaultKind::AsyncGc, FaultTarget{{}, {}, {}, true}, 0.5);
  gc.probability = 0.02;
  gc.onset_seconds = 1.0;
  s.faults.push_back(gc);
  s.seed = 77;
  auto back = parse_simulation_spec(simulation_spec_to_json(s));
  EXPECT_EQ(back.seed, 77u);
  EXPECT_EQ(back.cluster.workers(), 32);
  ASSERT_EQ(back.faults.size(), 2u);
  EXPECT_EQ(back.faults[0].target.workers, (std::vector<int>{3, 11}));
  EXPECT_TRUE(back.faults[1].target.all);
  EXPECT_EQ(back.faults[1].probability, 0.02);
  EXPECT_EQ(back.faults[1].onset_seconds, 1.0);
}

TEST(SpecFile, UnknownFaultKindRejected) {
  nlohmann::json j = {{"hosts", 1}, {"faults", {{{"kind", "CosmicRay"}, {"target", "all"}}}}};
  try {
    parse_simulation_spec(j);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::SpecInvalid);
  }
}

TEST(Simulator, HealthyClusterHasNoCommDivergence) {
  auto sim = simulate(desk(0.5), {}, 12);
  std::vector<PatternRecord> all;
  for (const auto& t : sim.traces) {
    auto recs = summarize_trace(t);
    all.insert(all.end(), recs.begin(), recs.end());
  }
  auto rep = localize(all, RangePolicy::defaults(), {});
  std::size_t comm = 0;
  for (const auto& v : rep.verdicts) {
    if (rep.function_of(v).kind != FunctionKind::CollectiveComm) continue;
    ++comm;
    EXPECT_LT(v.Delta, 0.05) << v.worker.rank;
  }
  EXPECT_GT(comm, 0u);
}

TEST(Markers, SlowdownFromIterationFiresDetector) {
  MarkerSchedule sch;
  sch.iterations = 300;
  sch.slowdown_from = 101;
  sch.slowdown_factor = 1.06;
  auto m = marker_stream(desk(), {}, sch, 5);
  DegradationDetector det;
  std::vector<std::size_t> fired;
  for (std::size_t i = 0; i < m.size(); ++i) {
    auto r = det.feed(m[i]);
    if (r.trigger) {
      EXPECT_EQ(r.trigger->kind, TriggerKind::Slowdown);
      fired.push_back(i / 2);
    }
  }
  ASSERT_EQ(fired.size(), 1u);
  EXPECT_GE(fired[0], 101u);
  EXPECT_LE(fired[0], 101u + 50u);
}

TEST(Markers, StallFiresBlocked) {
  MarkerSchedule sch;
  sch.iterations = 60;
  sch.stall_at = 40;
  auto m = marker_stream(desk(), {}, sch, 5);
  DegradationDetector det;
  for (const auto& e : m) EXPECT_FALSE(det.feed(e).trigger.has_value());
  auto b = det.tick(m.back().ts + 10 * 100'000'000);
  ASSERT_TRUE(b.has_value());
  EXPECT_EQ(b->kind, TriggerKind::Blocked);
}
