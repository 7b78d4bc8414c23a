"""Sandboxed test execution, the coverage gate, and failure encoding.

The project under test is exercised by its own test command inside the
locked workspace, with a filtered environment and a hard wall-clock kill.
Coverage arrives through a neutral JSON schema so the harness stays agnostic
to the project's test tooling:

    {"files": [{"path": str, "lines_total": int, "lines_covered": int}, ...]}

Every non-success in the pipeline is compiled into a deterministic JSON
document (the semantic gradient) that is fed back to the agent.
"""

from __future__ import annotations

import json
import os
import shutil
import signal
import subprocess
import tempfile
import time
from dataclasses import dataclass
from enum import Enum
from pathlib import Path
from typing import Iterable, Optional, Sequence, Union

from .errors import PatchlockError
from .patch_gate import (
    ApplyReport,
    PatchParseError,
    PathTraversal,
    SanitizeError,
    ScopeViolation,
    Violation,
)
from .vault import ManifestRules, TreeDigest, Verdict, snapshot_tree


class SpawnError(PatchlockError):
    """The test command could not be started at all."""


class CoverageParseError(PatchlockError):
    """A coverage document violates the neutral schema."""


class DegenerateCoverage(PatchlockError):
    """No measurable lines: the gate treats this as a failure."""


class BaselineCorrupt(PatchlockError):
    """The pinned reference source drifted from its recorded digest."""


class NotAFailure(PatchlockError):
    """encode_semantics was handed evidence of a success."""


class TestStatus(Enum):
    __test__ = False  # not a pytest class, despite the name

    PASS = "Pass"
    FAIL = "Fail"
    TIMEOUT = "Timeout"
    CRASH = "Crash"


@dataclass(frozen=True)
class TestRun:
    __test__ = False

    status: TestStatus
    traceback: str
    duration: float
    exit_code: int
    output: str = ""


DEFAULT_ENV_ALLOWLIST = ("PATH", "HOME", "LANG", "LC_ALL", "LC_CTYPE", "TMPDIR")

_FAILURE_MARKERS = (
    "Traceback (most recent call last):",
    "FAILURES",
    "FAILED",
    "AssertionError",
    "ERROR",
)

_TIMEOUT_GRACE = 1.0


def _extract_traceback(output: str) -> str:
    last = -1
    for marker in _FAILURE_MARKERS:
        idx = output.rfind(marker)
        if idx > last:
            last = idx
    if last >= 0:
        return output[last:]
    return output[-2000:]


def run_tests(
    workspace_root: Union[Path, str],
    command: Sequence[str],
    timeout: float,
    env_allowlist: Sequence[str] = DEFAULT_ENV_ALLOWLIST,
) -> TestRun:
    """Run the project's test command with cwd pinned to the workspace.

    The subprocess sees only the allowlisted environment variables and is
    killed (whole process group) at the timeout; the traceback field carries
    the stream from the last failure marker onward.
    """
    env = {k: os.environ[k] for k in env_allowlist if k in os.environ}
    started = time.monotonic()
    try:
        proc = subprocess.Popen(
            list(command),
            cwd=str(workspace_root),
            env=env,
            stdout=subprocess.PIPE,
            stderr=subprocess.STDOUT,
            text=True,
            start_new_session=True,
        )
    except (FileNotFoundError, PermissionError) as exc:
        raise SpawnError(f"cannot start {command[0]!r}: {exc}") from exc
    timed_out = False
    try:
        output, _ = proc.communicate(timeout=timeout)
    except subprocess.TimeoutExpired:
        timed_out = True
        try:
            os.killpg(proc.pid, signal.SIGKILL)
        except (ProcessLookupError, PermissionError):
            proc.kill()
        output, _ = proc.communicate()
    duration = time.monotonic() - started
    output = output or ""
    if timed_out:
        status = TestStatus.TIMEOUT
    elif proc.returncode == 0:
        status = TestStatus.PASS
    elif proc.returncode < 0:
        status = TestStatus.CRASH
    else:
        status = TestStatus.FAIL
    traceback = "" if status is TestStatus.PASS else _extract_traceback(output)
    return TestRun(
        status=status,
        traceback=traceback,
        duration=duration,
        exit_code=proc.returncode if proc.returncode is not None else -1,
        output=output,
    )


# --------------------------------------------------------------------------
# Coverage


@dataclass(frozen=True)
class FileCoverage:
    path: str
    lines_total: int
    lines_covered: int


@dataclass(frozen=True)
class CoverageReport:
    files: tuple[FileCoverage, ...]

    @property
    def ratio(self) -> float:
        total = sum(f.lines_total for f in self.files)
        if total <= 0:
            raise DegenerateCoverage("no measurable lines in report")
        return sum(f.lines_covered for f in self.files) / total


def parse_coverage(raw: Union[str, bytes, dict]) -> CoverageReport:
    """Parse and validate a neutral-schema coverage document."""
    if isinstance(raw, (str, bytes)):
        try:
            data = json.loads(raw)
        except json.JSONDecodeError as exc:
            raise CoverageParseError(f"not valid JSON: {exc}") from exc
    else:
        data = raw
    if not isinstance(data, dict) or not isinstance(data.get("files"), list):
        raise CoverageParseError('document must be {"files": [...]}')
    files = []
    for i, entry in enumerate(data["files"]):
        if not isinstance(entry, dict):
            raise CoverageParseError(f"files[{i}] is not an object")
        path = entry.get("path")
        total = entry.get("lines_total")
        covered = entry.get("lines_covered")
        if not isinstance(path, str) or not path:
            raise CoverageParseError(f"files[{i}].path missing")
        for name, value in (("lines_total", total), ("lines_covered", covered)):
            if not isinstance(value, int) or isinstance(value, bool):
                raise CoverageParseError(f"files[{i}].{name} must be an integer")
        if total < 1:
            raise CoverageParseError(f"files[{i}].lines_total must be positive")
        if covered < 0 or covered > total:
            raise CoverageParseError(
                f"files[{i}]: lines_covered {covered} outside [0, {total}]"
            )
        files.append(FileCoverage(path=path, lines_total=total, lines_covered=covered))
    return CoverageReport(files=tuple(files))


def coverage_from_coveragepy(data: dict) -> CoverageReport:
    """Adapter: translate a coverage.py JSON report into the neutral schema."""
    files = []
    for path, info in sorted(data.get("files", {}).items()):
        summary = info.get("summary", {})
        total = int(summary.get("num_statements", 0))
        if total < 1:
            continue
        files.append(FileCoverage(
            path=path,
            lines_total=total,
            lines_covered=int(summary.get("covered_lines", 0)),
        ))
    return CoverageReport(files=tuple(files))


@dataclass(frozen=True)
class GateResult:
    passed: bool
    ratio: float


def coverage_gate(report: CoverageReport, tau_cov: float) -> GateResult:
    """Pass iff the line-weighted aggregate ratio meets the threshold.

    The comparison is exact: no rounding happens before the >=.
    """
    ratio = report.ratio  # raises DegenerateCoverage on zero totals
    return GateResult(passed=ratio >= tau_cov, ratio=ratio)


# --------------------------------------------------------------------------
# Cross-validation of mutated tests against the pinned reference source


@dataclass(frozen=True)
class BaselineSuite:
    """A pinned known-good source snapshot plus the cases that must survive."""

    reference_root: Path
    required_cases: tuple[str, ...]
    anchor: TreeDigest

    @classmethod
    def pin(
        cls,
        reference_root: Union[Path, str],
        required_cases: Sequence[str],
        rules: ManifestRules = ManifestRules(),
    ) -> "BaselineSuite":
        root = Path(reference_root)
        return cls(
            reference_root=root,
            required_cases=tuple(required_cases),
            anchor=snapshot_tree(root, rules, "baseline"),
        )


@dataclass(frozen=True)
class CrossValidation:
    v_pass: bool
    evidence: TestRun
    reasons: tuple[str, ...] = ()
    coverage_ratio: Optional[float] = None
    executed_cases: tuple[str, ...] = ()


def cross_validate(
    workspace_root: Union[Path, str],
    source_prefix: str,
    baseline: BaselineSuite,
    command: Sequence[str],
    timeout: float,
    tau_cov: float,
    coverage_file: str = "coverage.json",
    cases_file: str = "cases.json",
    env_allowlist: Sequence[str] = DEFAULT_ENV_ALLOWLIST,
    rules: ManifestRules = ManifestRules(),
    scratch_dir: Optional[Path] = None,
) -> CrossValidation:
    """Run the workspace's (possibly mutated) tests against the reference source.

    The verdict passes only when the suite passes on the reference tree, every
    required case was executed, and coverage of the reference source still
    meets the threshold — so neither test deletion nor assertion hollowing
    can sneak through.
    """
    fresh = snapshot_tree(baseline.reference_root, rules, "baseline")
    if fresh.digest != baseline.anchor.digest:
        raise BaselineCorrupt(
            f"reference source at {baseline.reference_root} drifted from its pinned digest"
        )
    own_scratch = scratch_dir is None
    scratch = Path(scratch_dir or tempfile.mkdtemp(prefix="patchlock-xval-"))
    try:
        stage = scratch / "stage"
        shutil.copytree(workspace_root, stage, symlinks=True)
        staged_src = stage / source_prefix
        if staged_src.exists():
            shutil.rmtree(staged_src)
        shutil.copytree(baseline.reference_root, staged_src, symlinks=True)
        evidence = run_tests(stage, command, timeout, env_allowlist)

        reasons: list[str] = []
        if evidence.status is not TestStatus.PASS:
            reasons.append(f"suite did not pass on the reference source ({evidence.status.value})")
        executed: tuple[str, ...] = ()
        cases_path = stage / cases_file
        if cases_path.is_file():
            try:
                executed = tuple(json.loads(cases_path.read_text()))
            except (json.JSONDecodeError, TypeError):
                reasons.append(f"unreadable executed-case list {cases_file}")
        else:
            reasons.append(f"missing executed-case list {cases_file}")
        missing = [c for c in baseline.required_cases if c not in executed]
        if missing:
            reasons.append("required cases not executed: " + ", ".join(sorted(missing)))
        ratio: Optional[float] = None
        coverage_path = stage / coverage_file
        if coverage_path.is_file():
            try:
                gate = coverage_gate(parse_coverage(coverage_path.read_text()), tau_cov)
                ratio = gate.ratio
                if not gate.passed:
                    reasons.append(
                        f"coverage of reference source {gate.ratio:.4f} below {tau_cov}"
                    )
            except (CoverageParseError, DegenerateCoverage) as exc:
                reasons.append(f"coverage report unusable: {exc}")
        else:
            reasons.append(f"missing coverage report {coverage_file}")
        return CrossValidation(
            v_pass=not reasons,
            evidence=evidence,
            reasons=tuple(reasons),
            coverage_ratio=ratio,
            executed_cases=executed,
        )
    finally:
        if own_scratch:
            shutil.rmtree(scratch, ignore_errors=True)


# --------------------------------------------------------------------------
# Semantic gradient


class GradientCause(str, Enum):
    TEST_FAILURE = "TestFailure"
    TAMPER_DETECTED = "TamperDetected"
    COVERAGE_BELOW_THRESHOLD = "CoverageBelowThreshold"
    SANITIZER_VIOLATION = "SanitizerViolation"
    BASELINE_MISMATCH = "BaselineMismatch"


FORMAT_TAG = "semantic_gradient/v1"


@dataclass(frozen=True)
class SemanticGradient:
    cause: GradientCause
    traceback: str = ""
    offending_paths: tuple[str, ...] = ()
    metrics: tuple[tuple[str, float], ...] = ()

    def __post_init__(self):
        if self.cause is GradientCause.TAMPER_DETECTED and not self.offending_paths:
            raise ValueError("TamperDetected requires offending paths")

    def to_payload(self) -> dict:
        return {
            "format_tag": FORMAT_TAG,
            "cause": self.cause.value,
            "traceback": self.traceback,
            "offending_paths": list(self.offending_paths),
            "metrics": {k: v for k, v in sorted(self.metrics)},
        }

    def to_json(self) -> str:
        return json.dumps(self.to_payload(), sort_keys=True, separators=(",", ":"),
                          ensure_ascii=False)


def _violation_text(violations: Iterable[Violation]) -> str:
    return "\n".join(
        f"{v.rule_id} at {v.target_path}:{v.line_number}: {v.excerpt.strip()}"
        for v in violations
    )


def encode_semantics(evidence: object) -> SemanticGradient:
    """Compile failure evidence into the canonical agent-facing gradient.

    Accepted evidence: a non-passing TestRun, a tampered Verdict, a failed
    GateResult, a non-empty violation list, a failed CrossValidation, a
    rejected ApplyReport, or one of the gate exceptions.  Patch-shape
    failures (parse errors, rejects, unparseable files) are reported under
    the sanitizer cause; scope breaks and traversal attempts under tamper.
    Success evidence raises NotAFailure.
    """
    if isinstance(evidence, TestRun):
        if evidence.status is TestStatus.PASS:
            raise NotAFailure("test run passed")
        return SemanticGradient(
            cause=GradientCause.TEST_FAILURE,
            traceback=evidence.traceback,
            metrics=(("exit_code", float(evidence.exit_code)),),
        )
    if isinstance(evidence, Verdict):
        if evidence.intact:
            raise NotAFailure("anchor intact")
        return SemanticGradient(
            cause=GradientCause.TAMPER_DETECTED,
            traceback="locked tree drifted from its anchor",
            offending_paths=evidence.offending_paths,
        )
    if isinstance(evidence, GateResult):
        if evidence.passed:
            raise NotAFailure("coverage gate passed")
        return SemanticGradient(
            cause=GradientCause.COVERAGE_BELOW_THRESHOLD,
            traceback="source coverage below the required threshold",
            metrics=(("ratio", evidence.ratio),),
        )
    if isinstance(evidence, (list, tuple)) and all(isinstance(v, Violation) for v in evidence):
        if not evidence:
            raise NotAFailure("no sanitizer violations")
        return SemanticGradient(
            cause=GradientCause.SANITIZER_VIOLATION,
            traceback=_violation_text(evidence),
            offending_paths=tuple(sorted({v.target_path for v in evidence})),
        )
    if isinstance(evidence, CrossValidation):
        if evidence.v_pass:
            raise NotAFailure("cross-validation passed")
        metrics: tuple[tuple[str, float], ...] = ()
        if evidence.coverage_ratio is not None:
            metrics = (("baseline_coverage", evidence.coverage_ratio),)
        return SemanticGradient(
            cause=GradientCause.BASELINE_MISMATCH,
            traceback="\n".join(evidence.reasons) or evidence.evidence.traceback,
            metrics=metrics,
        )
    if isinstance(evidence, ApplyReport):
        if evidence.ok:
            raise NotAFailure("patch applied cleanly")
        return SemanticGradient(
            cause=GradientCause.SANITIZER_VIOLATION,
            traceback="\n".join(
                f"rejected hunk {r.hunk_index} of {r.path}: {r.reason}"
                for r in evidence.reject_hunks
            ),
            offending_paths=tuple(sorted({r.path for r in evidence.reject_hunks})),
            metrics=(("rejected_hunks", float(len(evidence.reject_hunks))),),
        )
    if isinstance(evidence, (ScopeViolation, PathTraversal)):
        return SemanticGradient(
            cause=GradientCause.TAMPER_DETECTED,
            traceback=str(evidence),
            offending_paths=tuple(sorted(evidence.paths)),
        )
    if isinstance(evidence, (PatchParseError, SanitizeError)):
        return SemanticGradient(
            cause=GradientCause.SANITIZER_VIOLATION,
            traceback=str(evidence),
            offending_paths=(evidence.path,) if isinstance(evidence, SanitizeError) else (),
        )
    raise NotAFailure(f"unsupported evidence type {type(evidence).__name__}")
