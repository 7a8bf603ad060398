#!/usr/bin/env python3
"""End-to-end checks of the fbdiag command line.

usage: cli_test.py <fbdiag binary> <source dir>
"""

import hashlib
import json
import os
import pathlib
import subprocess
import sys
import tempfile
import unittest

BIN = ""
SRC = pathlib.Path(".")


def run(*args, stdin=None, env=None):
    full_env = {k: v for k, v in os.environ.items() if not k.startswith("FBDIAG_")}
    if env:
        full_env.update(env)
    return subprocess.run([BIN, *map(str, args)], input=stdin, capture_output=True, text=True, env=full_env,
                          timeout=300)


def dir_digest(path):
    h = hashlib.sha256()
    for p in sorted(pathlib.Path(path).iterdir()):
        h.update(p.name.encode())
        h.update(p.read_bytes())
    return h.hexdigest()


def spec(name):
    return SRC / "specs" / f"{name}.json"


DESK = ["--config", None]  # filled in main


def validate(report):
    schema = json.loads((SRC / "schemas" / "report.schema.json").read_text())
    try:
        import jsonschema
    except ImportError:
        # Shape check only.
        for key in schema["required"]:
            assert key in report, key
        return
    jsonschema.validate(report, schema)


class Simulate(unittest.TestCase):
    def test_writes_one_trace_per_worker(self):
        with tempfile.TemporaryDirectory() as d:
            r = run("simulate", spec("healthy_32"), d)
            self.assertEqual(r.returncode, 0, r.stderr)
            self.assertEqual(len(list(pathlib.Path(d).glob("*.trace"))), 32)
            self.assertTrue((pathlib.Path(d) / "session.json").exists())

    def test_missing_spec(self):
        with tempfile.TemporaryDirectory() as d:
            r = run("simulate", pathlib.Path(d) / "nope.json", pathlib.Path(d) / "out")
            self.assertEqual(r.returncode, 2)
            self.assertIn("nope.json", r.stderr)

    def test_invalid_spec(self):
        with tempfile.TemporaryDirectory() as d:
            bad = pathlib.Path(d) / "bad.json"
            bad.write_text('{"hosts": 1, "faults": [{"kind": "SlowNicBond", "target": {"workers": [40]}}]}')
            self.assertEqual(run("simulate", bad, pathlib.Path(d) / "out").returncode, 3)

    def test_same_seed_same_bytes(self):
        with tempfile.TemporaryDirectory() as a, tempfile.TemporaryDirectory() as b:
            self.assertEqual(run("simulate", spec("slow_bond_32"), a).returncode, 0)
            self.assertEqual(run("--threads", "2", "simulate", spec("slow_bond_32"), b).returncode, 0)
            self.assertEqual(dir_digest(a), dir_digest(b))
            with tempfile.TemporaryDirectory() as c:
                run("--seed", "99", "simulate", spec("slow_bond_32"), c)
                self.assertNotEqual(dir_digest(a), dir_digest(c))


class Summarize(unittest.TestCase):
    @classmethod
    def setUpClass(cls):
        cls.tmp = tempfile.TemporaryDirectory()
        cls.session = pathlib.Path(cls.tmp.name) / "session"
        r = run("simulate", spec("slow_bond_32"), cls.session)
        assert r.returncode == 0, r.stderr

    @classmethod
    def tearDownClass(cls):
        cls.tmp.cleanup()

    def test_patterns_per_worker_and_idempotent(self):
        out1 = pathlib.Path(self.tmp.name) / "p1"
        out2 = pathlib.Path(self.tmp.name) / "p2"
        self.assertEqual(run("summarize", self.session, out1).returncode, 0)
        self.assertEqual(run("summarize", self.session, out2).returncode, 0)
        self.assertEqual(len(list(out1.glob("*.patterns"))), 32)
        self.assertEqual(dir_digest(out1), dir_digest(out2))

    def test_worker_filter(self):
        out = pathlib.Path(self.tmp.name) / "subset"
        r = run("summarize", self.session, out, "--workers", "0,3,8-9")
        self.assertEqual(r.returncode, 0, r.stderr)
        names = sorted(p.name for p in out.glob("*.patterns"))
        self.assertEqual(names, ["worker_0.patterns", "worker_3.patterns", "worker_8.patterns", "worker_9.patterns"])

    def test_corrupt_line_names_file_and_line(self):
        broken = pathlib.Path(self.tmp.name) / "broken"
        broken.mkdir()
        for p in self.session.iterdir():
            (broken / p.name).write_bytes(p.read_bytes())
        victim = broken / "worker_7.trace"
        lines = victim.read_text().splitlines(keepends=True)
        lines[4] = "{not json\n"
        victim.write_text("".join(lines))
        r = run("summarize", broken, pathlib.Path(self.tmp.name) / "never")
        self.assertEqual(r.returncode, 3)
        self.assertIn("worker_7.trace:5", r.stderr)

    def test_localize_names_slow_link_first(self):
        out = pathlib.Path(self.tmp.name) / "loc"
        self.assertEqual(run("--config", DESK[1], "summarize", self.session, out).returncode, 0)
        report = pathlib.Path(self.tmp.name) / "report.json"
        r = run("localize", out, "--format", "json", "-o", report)
        self.assertEqual(r.returncode, 0, r.stderr)
        rep = json.loads(report.read_text())
        validate(rep)
        self.assertGreater(rep["abnormal_count"], 0)
        top = rep["findings"][0]
        self.assertEqual(top["worker"], 5)
        self.assertEqual(top["function"]["kind"], "comm")
        text = run("localize", out, "--format", "text")
        self.assertEqual(text.returncode, 0)
        self.assertIn("worker 5", text.stdout)
        again = run("localize", out, "--format", "json")
        self.assertEqual(json.loads(again.stdout), rep)


class Localize(unittest.TestCase):
    def test_empty_dir(self):
        with tempfile.TemporaryDirectory() as d:
            r = run("localize", d)
            self.assertEqual(r.returncode, 4)

    def test_missing_dir(self):
        self.assertEqual(run("localize", "/nonexistent/patterns").returncode, 2)

    def test_flag_beats_env_beats_file(self):
        with tempfile.TemporaryDirectory() as d:
            cfg = pathlib.Path(d) / "c.json"
            cfg.write_text('{"delta": 0.3, "k": 4.0}')
            pats = pathlib.Path(d) / "p"
            pats.mkdir()
            (pats / "worker_0.patterns").write_text(
                '{"config":{},"patterns":1,"rank":0,"window_ns":1000000000}\n'
                '{"f":{"k":"gpu","n":"k","cs":[]},"b":0.5,"m":0.9,"s":0.01,"n":3,"ch":"sm"}\n')
            r = run("--config", cfg, "--k", "6", "localize", pats, env={"FBDIAG_K": "3", "FBDIAG_DELTA": "0.35"})
            self.assertEqual(r.returncode, 0, r.stderr)
            echo = json.loads(r.stdout)["config"]
            self.assertEqual(echo["k"], 6.0)
            self.assertEqual(echo["delta"], 0.35)


class Detect(unittest.TestCase):
    @staticmethod
    def stream(durations, idle=10_000_000):
        t, out = 0, []
        for d in durations:
            out.append(json.dumps({"t": "mk", "k": "next", "ts": t}))
            t += d
            out.append(json.dumps({"t": "mk", "k": "step", "ts": t}))
            t += idle
        return out, t

    def triggers(self, stdout):
        return [json.loads(l) for l in stdout.splitlines() if '"trigger"' in l]

    def test_slowdown(self):
        lines, _ = self.stream([1_000_000_000] * 100 + [1_060_000_000] * 100)
        r = run("detect", "-", stdin="\n".join(lines) + "\n")
        self.assertEqual(r.returncode, 0, r.stderr)
        trig = self.triggers(r.stdout)
        self.assertEqual(len(trig), 1)
        self.assertEqual(trig[0]["trigger"], "slowdown")

    def test_no_trigger_at_four_percent(self):
        lines, _ = self.stream([1_000_000_000] * 100 + [1_040_000_000] * 100)
        r = run("detect", "-", stdin="\n".join(lines) + "\n")
        self.assertEqual(self.triggers(r.stdout), [])

    def test_blocked(self):
        lines, t = self.stream([1_000_000_000] * 30)
        lines.append(json.dumps({"t": "mk", "k": "next", "ts": t}))
        lines.append(json.dumps({"t": "tick", "ts": t + 6_000_000_000}))
        r = run("detect", "-", stdin="\n".join(lines) + "\n")
        trig = self.triggers(r.stdout)
        self.assertEqual([x["trigger"] for x in trig], ["blocked"])

    def test_out_of_order_and_malformed(self):
        r = run("detect", "-", stdin='{"t":"mk","k":"next","ts":10}\n{"t":"mk","k":"step","ts":5}\n')
        self.assertEqual(r.returncode, 3)
        r = run("detect", "-", stdin='{"t":"mk","k":"jump","ts":10}\n')
        self.assertEqual(r.returncode, 3)
        self.assertIn(":1", r.stderr)


class Coordinate(unittest.TestCase):
    def test_plan(self):
        r = run("coordinate", "plan", "--rank0-iteration", "1000", "--mean-seconds", "2.0")
        self.assertEqual(r.returncode, 0, r.stderr)
        plan = json.loads(r.stdout)
        self.assertEqual((plan["start"], plan["stop"]), (1003, 1013))

    def test_non_positive_mean(self):
        r = run("coordinate", "plan", "--rank0-iteration", "10", "--mean-seconds", "0")
        self.assertEqual(r.returncode, 3)

    def test_simulate_agrees(self):
        r = run("coordinate", "simulate", "--daemons", "64", "--runs", "5")
        self.assertEqual(r.returncode, 0, r.stderr)
        runs = [json.loads(l) for l in r.stdout.splitlines()]
        self.assertEqual(len(runs), 5)
        self.assertTrue(all(x["agree"] and x["missed"] == 0 for x in runs))

    def test_replay(self):
        plan = run("coordinate", "plan", "--rank0-iteration", "100", "--mean-seconds", "1.0").stdout.strip()
        stream = [plan] + [json.dumps({"rank": r, "iter": i}) for i in range(101, 116) for r in (0, 1)]
        r = run("coordinate", "replay", "-", stdin="\n".join(stream) + "\n")
        self.assertEqual(r.returncode, 0, r.stderr)
        self.assertIn("profiling", r.stdout.lower())
        late = [plan, json.dumps({"rank": 0, "iter": 103})]
        r = run("coordinate", "replay", "-", stdin="\n".join(late) + "\n")
        self.assertEqual(r.returncode, 5)
        self.assertIn("MissedWindow", r.stdout)


class EndToEnd(unittest.TestCase):
    def e2e(self, name, *extra):
        r = run("--config", DESK[1], "e2e", spec(name), "--format", "json", *extra)
        self.assertEqual(r.returncode, 0, r.stderr)
        rep = json.loads(r.stdout)
        validate(rep)
        return rep

    def test_healthy_has_no_findings(self):
        self.assertEqual(self.e2e("healthy_32")["abnormal_count"], 0)

    def test_slow_bond_top_finding(self):
        rep = self.e2e("slow_bond_32")
        self.assertEqual(rep["findings"][0]["worker"], 5)
        self.assertEqual(rep["findings"][0]["function"]["kind"], "comm")

    def test_gpu_throttle_flags_exactly_the_targets(self):
        rep = self.e2e("gpu_throttle")
        medians = {json.dumps(f["function"], sort_keys=True): f for f in rep["functions"]}
        flagged = set()
        for f in rep["findings"]:
            self.assertEqual(f["function"]["kind"], "gpu")
            s = medians[json.dumps(f["function"], sort_keys=True)]
            self.assertGreater(f["beta"], s["beta"]["median"])
            self.assertLess(f["mu"], s["mu"]["median"])
            flagged.add(f["worker"])
        self.assertEqual(flagged, set(range(8, 24)))

    def test_idempotent_and_report_rendering(self):
        with tempfile.TemporaryDirectory() as d:
            a = pathlib.Path(d) / "a.json"
            b = pathlib.Path(d) / "b.json"
            csv = pathlib.Path(d) / "all.csv"
            self.assertEqual(run("--config", DESK[1], "e2e", spec("nvlink_down"), "-o", a, "--csv", csv).returncode, 0)
            self.assertEqual(run("--config", DESK[1], "e2e", spec("nvlink_down"), "-o", b).returncode, 0)
            self.assertEqual(a.read_bytes(), b.read_bytes())
            self.assertTrue(csv.read_text().startswith("kind,function,"))
            text = run("report", a, "--format", "text")
            self.assertEqual(text.returncode, 0)
            self.assertIn("abnormal=", text.stdout)
            out_csv = run("report", a, "--format", "csv")
            rows = out_csv.stdout.strip().splitlines()
            self.assertEqual(len(rows), 1 + json.loads(a.read_text())["abnormal_count"])
            self.assertEqual(json.loads(run("report", a, "--format", "json").stdout), json.loads(a.read_text()))

    def test_report_rejects_garbage(self):
        with tempfile.TemporaryDirectory() as d:
            p = pathlib.Path(d) / "r.json"
            p.write_text("[1, 2")
            self.assertEqual(run("report", p).returncode, 3)


class Usage(unittest.TestCase):
    def test_no_subcommand(self):
        self.assertEqual(run().returncode, 2)

    def test_bad_format(self):
        self.assertEqual(run("localize", ".", "--format", "xml").returncode, 2)

    def test_version(self):
        r = run("--version")
        self.assertEqual(r.returncode, 0)
        self.assertTrue(r.stdout.strip())


if __name__ == "__main__":
    if len(sys.argv) < 3:
        sys.exit(__doc__)
    BIN = sys.argv[1]
    SRC = pathlib.Path(sys.argv[2])
    DESK[1] = str(SRC / "configs" / "desk.json")
    unittest.main(argv=[sys.argv[0], "-v"])
