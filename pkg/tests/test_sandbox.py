import json
import shutil
import sys
import time
from pathlib import Path

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import REQUIRED_CASES, TEST_CALC, make_baseline, make_workspace
from patchlock.patch_gate import (
    ApplyReport,
    PatchParseError,
    RejectedHunk,
    ScopeViolation,
    Violation,
)
from patchlock.sandbox import (
    BaselineCorrupt,
    BaselineSuite,
    CoverageParseError,
    CoverageReport,
    CrossValidation,
    DegenerateCoverage,
    FileCoverage,
    GateResult,
    GradientCause,
    NotAFailure,
    SpawnError,
    TestRun,
    TestStatus,
    coverage_from_coveragepy,
    coverage_gate,
    cross_validate,
    encode_semantics,
    parse_coverage,
    run_tests,
)
from patchlock.vault import Phase, Verdict, snapshot_tree

PY = sys.executable


def _script_workspace(tmp_path, body: str) -> Path:
    ws = tmp_path / "ws"
    ws.mkdir()
    (ws / "main.py").write_text(body)
    return ws


class TestRunTests:
    def test_passing_command(self, tmp_path):
        ws = _script_workspace(tmp_path, "print('all good')\n")
        run = run_tests(ws, [PY, "main.py"], timeout=30)
        assert run.status is TestStatus.PASS
        assert run.exit_code == 0
        assert run.traceback == ""
        assert "all good" in run.output

    def test_failing_assertion_captures_traceback(self, tmp_path):
        ws = _script_workspace(
            tmp_path, "print('starting')\nassert 1 == 2, 'one is not two'\n"
        )
        run = run_tests(ws, [PY, "main.py"], timeout=30)
        assert run.status is TestStatus.FAIL
        assert run.exit_code == 1
        assert "AssertionError" in run.traceback
        assert "one is not two" in run.traceback

    def test_timeout_is_hard(self, tmp_path):
        ws = _script_workspace(tmp_path, "import time\nwhile True:\n    time.sleep(0.05)\n")
        started = time.monotonic()
        run = run_tests(ws, [PY, "main.py"], timeout=1.5)
        elapsed = time.monotonic() - started
        assert run.status is TestStatus.TIMEOUT
        assert 1.4 <= run.duration <= 2.0
        assert elapsed <= 2.5  # timeout plus the 1s grace

    def test_crash_detected(self, tmp_path):
        ws = _script_workspace(
            tmp_path, "import os, signal\nos.kill(os.getpid(), signal.SIGKILL)\n"
        )
        run = run_tests(ws, [PY, "main.py"], timeout=30)
        assert run.status is TestStatus.CRASH
        assert run.exit_code < 0

    def test_unknown_command_is_spawn_error(self, tmp_path):
        with pytest.raises(SpawnError):
            run_tests(tmp_path, ["/does/not/exist"], timeout=5)

    def test_environment_is_allowlisted(self, tmp_path, monkeypatch):
        monkeypatch.setenv("PATCHLOCK_SECRET", "leak")
        ws = _script_workspace(
            tmp_path,
            "import os\nprint('secret=' + os.environ.get('PATCHLOCK_SECRET', 'unset'))\n"
            "print('path=' + ('set' if os.environ.get('PATH') else 'missing'))\n",
        )
        run = run_tests(ws, [PY, "main.py"], timeout=30)
        assert "secret=unset" in run.output
        assert "path=set" in run.output


class TestCoverage:
    def test_full_coverage_single_file(self):
        report = parse_coverage(
            '{"files":[{"path":"src/a","lines_total":10,"lines_covered":10}]}'
        )
        assert report.ratio == 1.0

    def test_line_weighted_aggregate(self):
        report = parse_coverage(json.dumps({"files": [
            {"path": "a", "lines_total": 100, "lines_covered": 50},
            {"path": "b", "lines_total": 50, "lines_covered": 45},
        ]}))
        assert report.ratio == pytest.approx(95 / 150)

    def test_covered_above_total_rejected(self):
        with pytest.raises(CoverageParseError):
            parse_coverage('{"files":[{"path":"a","lines_total":10,"lines_covered":11}]}')

    def test_schema_violations(self):
        with pytest.raises(CoverageParseError):
            parse_coverage("not json")
        with pytest.raises(CoverageParseError):
            parse_coverage('{"files": 3}')
        with pytest.raises(CoverageParseError):
            parse_coverage('{"files":[{"path":"a","lines_total":"x","lines_covered":1}]}')
        with pytest.raises(CoverageParseError):
            parse_coverage('{"files":[{"path":"a","lines_total":0,"lines_covered":0}]}')

    def test_gate_boundary_exactness(self):
        passing = CoverageReport((FileCoverage("src", 100, 95),))
        assert coverage_gate(passing, 0.95) == GateResult(True, 95 / 100)
        failing = CoverageReport((FileCoverage("src", 1000, 949),))
        result = coverage_gate(failing, 0.95)
        assert not result.passed
        assert result.ratio == pytest.approx(0.949)

    def test_empty_report_degenerate(self):
        with pytest.raises(DegenerateCoverage):
            coverage_gate(CoverageReport(()), 0.95)

    def test_coveragepy_adapter(self):
        data = {"files": {
            "src/a.py": {"summary": {"num_statements": 40, "covered_lines": 38}},
            "src/b.py": {"summary": {"num_statements": 10, "covered_lines": 10}},
        }}
        report = coverage_from_coveragepy(data)
        assert report.ratio == pytest.approx(48 / 50)

    @settings(max_examples=50, deadline=None)
    @given(
        totals=st.lists(st.integers(1, 200), min_size=1, max_size=5),
        data=st.data(),
        tau=st.floats(0.0, 1.0),
    )
    def test_gate_monotonicity(self, totals, data, tau):
        low = [data.draw(st.integers(0, t)) for t in totals]
        high = [data.draw(st.integers(lo, t)) for lo, t in zip(low, totals)]
        report_low = CoverageReport(tuple(
            FileCoverage(f"f{i}", t, c) for i, (t, c) in enumerate(zip(totals, low))
        ))
        report_high = CoverageReport(tuple(
            FileCoverage(f"f{i}", t, c) for i, (t, c) in enumerate(zip(totals, high))
        ))
        if coverage_gate(report_low, tau).passed:
            assert coverage_gate(report_high, tau).passed


class TestCrossValidate:
    def _setup(self, tmp_path):
        ws = make_workspace(tmp_path, buggy=True)
        ref = make_baseline(tmp_path)
        baseline = BaselineSuite.pin(ref, REQUIRED_CASES)
        return ws, baseline

    def test_unchanged_suite_is_fixed_point(self, tmp_path):
        ws, baseline = self._setup(tmp_path)
        result = cross_validate(ws, "src", baseline, [PY, "run_tests.py"],
                                timeout=60, tau_cov=0.95)
        assert result.v_pass
        assert set(REQUIRED_CASES) <= set(result.executed_cases)
        assert result.coverage_ratio == 1.0

    def test_required_case_deletion_fails(self, tmp_path):
        ws, baseline = self._setup(tmp_path)
        hollowed = TEST_CALC.replace(
            "def test_normalize_unit_sum():\n    assert normalize([0.2, 0.2]) == [0.5, 0.5]\n\n\n",
            "",
        )
        assert "test_normalize_unit_sum" not in hollowed
        (ws / "tests" / "test_calc.py").write_text(hollowed)
        result = cross_validate(ws, "src", baseline, [PY, "run_tests.py"],
                                timeout=60, tau_cov=0.95)
        assert not result.v_pass
        assert any("test_normalize_unit_sum" in r for r in result.reasons)

    def test_weakened_assertions_fail_on_coverage(self, tmp_path):
        ws, baseline = self._setup(tmp_path)
        weak = "\n\n".join(
            f"def {name}():\n    assert True"
            for name in ("test_clamp_bounds", "test_normalize_unit_sum",
                         "test_normalize_degenerate", "test_target_weights_long_only")
        ) + "\n"
        (ws / "tests" / "test_calc.py").write_text(weak)
        result = cross_validate(ws, "src", baseline, [PY, "run_tests.py"],
                                timeout=60, tau_cov=0.95)
        assert not result.v_pass
        assert result.evidence.status is TestStatus.PASS  # they do pass...
        assert any("coverage" in r for r in result.reasons)  # ...but cover nothing

    def test_corrupted_baseline_detected(self, tmp_path):
        ws, baseline = self._setup(tmp_path)
        (baseline.reference_root / "calc.py").write_text("tampered = True\n")
        with pytest.raises(BaselineCorrupt):
            cross_validate(ws, "src", baseline, [PY, "run_tests.py"],
                           timeout=60, tau_cov=0.95)

    def test_workspace_is_untouched(self, tmp_path):
        ws, baseline = self._setup(tmp_path)
        before = snapshot_tree(ws / "src").digest
        cross_validate(ws, "src", baseline, [PY, "run_tests.py"],
                       timeout=60, tau_cov=0.95)
        assert snapshot_tree(ws / "src").digest == before


class TestEncodeSemantics:
    def test_test_failure(self):
        run = TestRun(TestStatus.FAIL, "AssertionError: boom", 0.1, 1)
        gradient = encode_semantics(run)
        assert gradient.cause is GradientCause.TEST_FAILURE
        assert "boom" in gradient.traceback

    def test_tamper(self):
        verdict = Verdict(intact=False, removed=("tests/test_x.py",))
        gradient = encode_semantics(verdict)
        assert gradient.cause is GradientCause.TAMPER_DETECTED
        assert gradient.offending_paths == ("tests/test_x.py",)

    def test_coverage(self):
        gradient = encode_semantics(GateResult(False, 0.62))
        assert gradient.cause is GradientCause.COVERAGE_BELOW_THRESHOLD
        assert dict(gradient.metrics)["ratio"] == 0.62

    def test_sanitizer_violations(self):
        violations = [Violation("no-guarded-import", "src/calc.py", 3, "import pytest")]
        gradient = encode_semantics(violations)
        assert gradient.cause is GradientCause.SANITIZER_VIOLATION
        assert gradient.offending_paths == ("src/calc.py",)

    def test_baseline_mismatch(self):
        xval = CrossValidation(
            v_pass=False,
            evidence=TestRun(TestStatus.PASS, "", 0.1, 0),
            reasons=("required cases not executed: test_a",),
        )
        gradient = encode_semantics(xval)
        assert gradient.cause is GradientCause.BASELINE_MISMATCH

    def test_patch_shape_failures_map_to_sanitizer(self):
        gradient = encode_semantics(PatchParseError("empty patch"))
        assert gradient.cause is GradientCause.SANITIZER_VIOLATION
        report = ApplyReport(reject_hunks=(RejectedHunk("src/a.py", 0, "context mismatch"),))
        gradient = encode_semantics(report)
        assert gradient.cause is GradientCause.SANITIZER_VIOLATION
        assert dict(gradient.metrics)["rejected_hunks"] == 1.0

    def test_scope_violation_maps_to_tamper(self):
        gradient = encode_semantics(ScopeViolation(["tests/test_x.py"], Phase.LOGIC_GENESIS))
        assert gradient.cause is GradientCause.TAMPER_DETECTED

    def test_success_evidence_raises(self):
        with pytest.raises(NotAFailure):
            encode_semantics(TestRun(TestStatus.PASS, "", 0.1, 0))
        with pytest.raises(NotAFailure):
            encode_semantics(Verdict(intact=True))
        with pytest.raises(NotAFailure):
            encode_semantics(GateResult(True, 1.0))
        with pytest.raises(NotAFailure):
            encode_semantics([])

    def test_encoding_is_deterministic(self):
        make = lambda: encode_semantics(
            TestRun(TestStatus.FAIL, "AssertionError: x", 0.5, 1)
        )
        assert make().to_json() == make().to_json()
        payload = json.loads(make().to_json())
        assert payload["format_tag"] == "semantic_gradient/v1"
        assert payload["cause"] == "TestFailure"
