"""Dual-loop orchestration.

The inner cycle drives one phase end-to-end: phase entry (anchoring the
locked tree), agent patch over a line-JSON wire protocol, scope and
sanitizer gates, test/coverage or baseline cross-validation, anchor
re-verification, then commit — with every failure compiled into a semantic
gradient and fed back to the agent on the next iteration.

The outer episode deploys the committed workspace into the market
environment and steps it until the data runs out or the absorbing state
hits.  Degradation pauses the loop behind the operator mandate protocol;
a validated mandate re-enters the inner cycle and redeploys.
"""

from __future__ import annotations

import json
import logging
import os
import queue
import shutil
import subprocess
import threading
import time
from dataclasses import dataclass
from enum import Enum
from pathlib import Path
from typing import Optional

from . import autopsy as autopsy_mod
from . import market
from .config import RunConfig
from .errors import PatchlockError
from .patch_gate import (
    PatchParseError,
    PathTraversal,
    SanitizeError,
    ScopeViolation,
    apply_patch,
    check_scope,
    parse_patch,
    reverse_patch,
    rules_for_phase,
    sanitize,
)
from .sandbox import (
    BaselineSuite,
    CoverageParseError,
    DegenerateCoverage,
    GateResult,
    SemanticGradient,
    TestStatus,
    coverage_gate,
    cross_validate,
    encode_semantics,
    parse_coverage,
    run_tests,
)
from .vault import (
    LockState,
    ManifestRules,
    Phase,
    PhaseEvent,
    TreeDigest,
    set_tree_writable,
    snapshot_tree,
    transition,
    verify_anchor,
)

logger = logging.getLogger(__name__)

_CANONICAL = {"sort_keys": True, "separators": (",", ":"), "ensure_ascii": False}


class AgentCrashed(PatchlockError):
    """The agent subprocess died or closed its pipes."""


class AgentTimeout(PatchlockError):
    """The agent did not answer within its reply timeout."""


class ProtocolError(PatchlockError):
    def __init__(self, message: str, raw: str = ""):
        super().__init__(message)
        self.raw = raw


class PausedError(PatchlockError):
    """A step was attempted while the run is paused or awaiting a mandate."""


class ConflictError(PatchlockError):
    """A control or mandate action is illegal in the current status."""


class RunStatus(str, Enum):
    INNER_LOOP = "InnerLoop"
    COMMITTED = "Committed"
    DEPLOYED = "Deployed"
    AWAITING_MANDATE = "AwaitingMandate"
    PAUSED = "Paused"
    TERMINATED = "Terminated"


_PHASE_BY_NAME = {
    "logic_genesis": Phase.LOGIC_GENESIS,
    "test_genesis": Phase.TEST_GENESIS,
}
_ENTER_EVENT = {
    Phase.LOGIC_GENESIS: PhaseEvent.ENTER_LOGIC_GENESIS,
    Phase.TEST_GENESIS: PhaseEvent.ENTER_TEST_GENESIS,
}


class EventLog:
    """Append-only, seq-numbered run record with live followers.

    One writer (the run loop), any number of concurrent readers.  Records are
    mirrored to an ND-JSON file as they are appended.
    """

    def __init__(self, path: Optional[Path] = None):
        self._records: list[dict] = []
        self._cond = threading.Condition()
        self._closed = False
        self._fh = open(path, "a", encoding="utf-8") if path else None

    @staticmethod
    def serialize(record: dict) -> str:
        return json.dumps(record, **_CANONICAL)

    def append(self, kind: str, payload: dict) -> dict:
        with self._cond:
            if self._closed:
                raise PatchlockError("event log is closed")
            record = {
                "seq": len(self._records),
                "timestamp": time.time(),
                "kind": kind,
                "payload": payload,
            }
            self._records.append(record)
            if self._fh:
                self._fh.write(self.serialize(record) + "\n")
                self._fh.flush()
            self._cond.notify_all()
            return record

    @property
    def last_seq(self) -> int:
        with self._cond:
            return len(self._records) - 1

    @property
    def closed(self) -> bool:
        with self._cond:
            return self._closed

    def snapshot(self, from_seq: int = 0) -> list[dict]:
        with self._cond:
            return list(self._records[max(0, from_seq):])

    def follow(self, from_seq: int = 0):
        """Yield records with seq >= from_seq, then tail until the log closes."""
        next_seq = max(0, from_seq)
        while True:
            with self._cond:
                while len(self._records) <= next_seq and not self._closed:
                    self._cond.wait(timeout=0.2)
                batch = self._records[next_seq:]
                closed = self._closed
            for record in batch:
                yield record
            next_seq += len(batch)
            if closed and not batch:
                return

    def close(self) -> None:
        with self._cond:
            self._closed = True
            if self._fh:
                self._fh.close()
                self._fh = None
            self._cond.notify_all()


class AgentHandle:
    """One agent subprocess speaking newline-delimited JSON on stdio."""

    def __init__(self, command: tuple[str, ...], stderr_path: Optional[Path] = None):
        stderr = open(stderr_path, "ab") if stderr_path else subprocess.DEVNULL
        try:
            self._proc = subprocess.Popen(
                list(command),
                stdin=subprocess.PIPE,
                stdout=subprocess.PIPE,
                stderr=stderr,
                text=True,
            )
        except (FileNotFoundError, PermissionError) as exc:
            raise AgentCrashed(f"cannot start agent {command[0]!r}: {exc}") from exc
        logger.debug("agent started: pid=%s command=%s", self._proc.pid, command[0])
        self._lines: queue.Queue = queue.Queue()
        self._reader = threading.Thread(target=self._pump, daemon=True)
        self._reader.start()

    def _pump(self) -> None:
        try:
            for line in self._proc.stdout:
                self._lines.put(line)
        finally:
            self._lines.put(None)

    def roundtrip(self, message: dict, timeout: float) -> dict:
        """Write one message line, read one reply line, parse strictly."""
        if self._proc.poll() is not None:
            raise AgentCrashed(f"agent exited with code {self._proc.returncode}")
        try:
            self._proc.stdin.write(json.dumps(message, **_CANONICAL) + "\n")
            self._proc.stdin.flush()
        except (BrokenPipeError, OSError) as exc:
            raise AgentCrashed(f"agent stdin closed: {exc}") from exc
        deadline = time.monotonic() + timeout
        while True:
            remaining = deadline - time.monotonic()
            if remaining <= 0:
                raise AgentTimeout(f"no reply within {timeout}s")
            try:
                raw = self._lines.get(timeout=remaining)
            except queue.Empty:
                raise AgentTimeout(f"no reply within {timeout}s") from None
            if raw is None:
                raise AgentCrashed("agent closed its stdout")
            if raw.strip():
                break
        try:
            reply = json.loads(raw)
        except json.JSONDecodeError:
            raise ProtocolError("agent reply is not JSON", raw=raw.rstrip("\n")) from None
        if not isinstance(reply, dict) or reply.get("kind") not in ("Patch", "Abstain"):
            raise ProtocolError("reply kind must be Patch or Abstain", raw=raw.rstrip("\n"))
        if reply["kind"] == "Patch":
            if not isinstance(reply.get("patch_text"), str) or not reply["patch_text"]:
                raise ProtocolError("Patch replies need non-empty patch_text",
                                    raw=raw.rstrip("\n"))
        return reply

    def close(self) -> None:
        try:
            if self._proc.stdin:
                self._proc.stdin.close()
        except OSError:
            pass
        if self._proc.poll() is None:
            self._proc.terminate()
            try:
                self._proc.wait(timeout=2)
            except subprocess.TimeoutExpired:
                self._proc.kill()
                self._proc.wait()


class _PolicyFault(PatchlockError):
    """The policy adapter produced unusable output."""


@dataclass(frozen=True)
class CycleResult:
    committed: bool
    iterations: int
    gradient: Optional[SemanticGradient] = None


@dataclass(frozen=True)
class EpisodeReport:
    steps: int
    final_wealth: float
    termination_cause: str
    autopsy_count: int


@dataclass(frozen=True)
class RunResult:
    committed: bool
    exhausted: bool
    last_gradient: Optional[SemanticGradient] = None
    episode: Optional[EpisodeReport] = None


class Run:
    """One orchestrated run: lock state, event log, equity, control surface.

    The run loop (``execute``) is the sole writer of run state; the HTTP
    service and other threads read summaries and submit control or mandate
    actions, which take effect at step boundaries.
    """

    def __init__(self, config: RunConfig, rules: ManifestRules = ManifestRules()):
        self.config = config
        self.rules = rules
        self.run_id = config.run_id
        self.workspace = Path(config.workspace)
        self.run_dir = Path(config.artifacts_dir or
                            self.workspace / ".patchlock" / config.run_id)
        self.run_dir.mkdir(parents=True, exist_ok=True)
        self.events = EventLog(self.run_dir / "events.ndjson")
        self.lock = LockState.initial()
        self.equity: list[market.EquityPoint] = []
        self.status = RunStatus.INNER_LOOP
        self.pending_autopsy: Optional[autopsy_mod.AutopsyEvent] = None
        self.cycles: list[CycleResult] = []
        self._cond = threading.Condition()
        self._halted = False
        self._mandate_ready = False
        self._scripted_mandates = list(config.autopsy.mandates)
        self._agent: Optional[AgentHandle] = None
        self._wealth = config.env.w0
        self.baseline_suite: Optional[BaselineSuite] = None
        if config.baseline is not None:
            self.baseline_suite = BaselineSuite.pin(
                config.baseline.reference_root, config.baseline.required_cases, rules
            )

    # -- paths and small helpers ------------------------------------------

    @property
    def _source_root(self) -> Path:
        return self.workspace / self.config.layout.source_prefix

    @property
    def _tests_root(self) -> Path:
        return self.workspace / self.config.layout.tests_prefix

    def _execution_log_path(self) -> str:
        if self.config.autopsy.execution_log:
            return self.config.autopsy.execution_log
        try:
            rel = self.run_dir.relative_to(self.workspace)
        except ValueError:
            rel = Path(".patchlock") / self.run_id
        return (rel / "events.ndjson").as_posix()

    def _log(self, kind: str, **payload) -> None:
        # Control actions may arrive after the run sealed its log; the status
        # change still applies, it just is not part of the recorded stream.
        try:
            self.events.append(kind, payload)
        except PatchlockError:
            if not self.events.closed:
                raise

    def _digest_pair(self) -> dict:
        return {
            "source": snapshot_tree(self._source_root, self.rules, "source").digest,
            "tests": snapshot_tree(self._tests_root, self.rules, "tests").digest,
        }

    def _agent_handle(self) -> AgentHandle:
        if self._agent is None:
            self._agent = AgentHandle(
                self.config.agent.command, stderr_path=self.run_dir / "agent.stderr"
            )
        return self._agent

    def _agent_roundtrip(self, message: dict) -> dict:
        self._log("agent_message", message=message)
        try:
            reply = self._agent_handle().roundtrip(message, self.config.agent.timeout)
        except ProtocolError as exc:
            self._log("protocol_error", raw=exc.raw)
            raise
        self._log("agent_reply", reply=reply)
        return reply

    # -- inner loop ---------------------------------------------------------

    def inner_cycle(self, phase: Phase) -> CycleResult:
        """Run one Genesis cycle to commit or exhaustion."""
        if self.status is RunStatus.TERMINATED:
            raise ConflictError("run is terminated")
        config = self.config
        layout = config.layout
        locked_root = self._tests_root if phase is Phase.LOGIC_GENESIS else self._source_root
        with self._cond:
            self.status = RunStatus.INNER_LOOP
            self._cond.notify_all()
        self.lock = transition(self.lock, _ENTER_EVENT[phase],
                               self._source_root, self._tests_root, self.rules)
        anchor = (self.lock.anchor_tests if phase is Phase.LOGIC_GENESIS
                  else self.lock.anchor_source)
        self._log("phase_enter", phase=phase.value, locked_digest=anchor.digest,
                  locked_files=anchor.file_count)
        backup = self.run_dir / "locked_backup"
        if backup.exists():
            shutil.rmtree(backup)
        shutil.copytree(locked_root, backup, symlinks=True)
        set_tree_writable(locked_root, False)
        rules = rules_for_phase(config.sanitizer, phase, layout)
        gradient: Optional[SemanticGradient] = None
        mandate_event = self.pending_autopsy if self._mandate_ready else None
        iterations = 0
        try:
            for i in range(1, config.agent.max_inner_iterations + 1):
                if self._halted:
                    break
                iterations = i
                message = self._build_message(phase, gradient, mandate_event)
                mandate_event = None
                reply = self._agent_roundtrip(message)
                if reply["kind"] == "Abstain":
                    self._log("agent_abstain", note=reply.get("note", ""))
                    break
                evidence = self._gate_pipeline(reply["patch_text"], phase, rules)
                verdict = verify_anchor(locked_root, anchor, self.rules)
                if not verdict.intact:
                    self._log("anchor_check", intact=False,
                              offending=list(verdict.offending_paths))
                    self._restore_locked(backup, locked_root, anchor)
                    evidence = verdict  # tampering dominates any other failure
                else:
                    self._log("anchor_check", intact=True, offending=[])
                if evidence is None:
                    self.lock = transition(self.lock, PhaseEvent.ENTER_VERIFY,
                                           self._source_root, self._tests_root, self.rules)
                    self._write_anchors()
                    self._log("commit", phase=phase.value, iteration=i,
                              digests=self._digest_pair())
                    self._log("cycle_end", phase=phase.value, committed=True, iterations=i)
                    result = CycleResult(committed=True, iterations=i)
                    self.cycles.append(result)
                    return result
                gradient = encode_semantics(evidence)
                self._log("gradient", gradient=gradient.to_payload())
            self._log("cycle_end", phase=phase.value, committed=False,
                      iterations=iterations)
            result = CycleResult(committed=False, iterations=iterations, gradient=gradient)
            self.cycles.append(result)
            return result
        finally:
            set_tree_writable(locked_root, True)
            if self._mandate_ready:
                self._mandate_ready = False
                self.pending_autopsy = None

    def _build_message(
        self,
        phase: Phase,
        gradient: Optional[SemanticGradient],
        mandate_event: Optional[autopsy_mod.AutopsyEvent],
    ) -> dict:
        if mandate_event is not None:
            kind, payload = "AutopsyMandate", mandate_event.to_payload()
        elif gradient is not None:
            kind, payload = "SemanticGradientFeedback", gradient.to_payload()
        else:
            kind, payload = "PhaseContext", {"task": self.config.agent.task}
        return {
            "kind": kind,
            "phase": phase.value,
            "payload": payload,
            "workspace": self._digest_pair(),
        }

    def _gate_pipeline(self, patch_text: str, phase: Phase, rules) -> Optional[object]:
        """Run parse -> scope -> apply -> sanitize -> phase gates.

        Returns failure evidence for encode_semantics, or None if every gate
        passed.  Sanitizer failures revert the freshly applied patch so the
        workspace stays byte-identical on rejection.
        """
        config = self.config
        try:
            patch = parse_patch(patch_text)
            check_scope(patch, phase, config.layout)
        except (PatchParseError, PathTraversal, ScopeViolation) as exc:
            self._log("patch_rejected", stage="parse_or_scope", error=str(exc))
            return exc
        report = apply_patch(self.workspace, patch)
        if not report.ok:
            self._log("patch_rejected", stage="apply",
                      rejects=[{"path": r.path, "hunk": r.hunk_index, "reason": r.reason}
                               for r in report.reject_hunks])
            return report
        self._log("patch_applied", files=sorted(report.files_changed))
        changed = [
            (rel, (self.workspace / rel).read_text())
            for rel in sorted(report.files_changed)
            if (self.workspace / rel).is_file()
        ]
        try:
            violations = sanitize(changed, rules)
        except SanitizeError as exc:
            self._revert(patch)
            self._log("patch_rejected", stage="sanitize", error=str(exc))
            return exc
        if violations:
            self._revert(patch)
            self._log("patch_rejected", stage="sanitize",
                      violations=[{"rule": v.rule_id, "path": v.target_path,
                                   "line": v.line_number} for v in violations])
            return violations
        if phase is Phase.LOGIC_GENESIS:
            test_run = run_tests(self.workspace, config.test.command,
                                 config.test.timeout, config.test.env_allowlist)
            self._log("tests_run", status=test_run.status.value,
                      exit_code=test_run.exit_code)
            if test_run.status is not TestStatus.PASS:
                return test_run
            gate = self._coverage_gate()
            self._log("coverage", ratio=gate.ratio, passed=gate.passed)
            if not gate.passed:
                return gate
        else:
            xval = cross_validate(
                self.workspace,
                config.layout.source_prefix,
                self.baseline_suite,
                config.test.command,
                config.test.timeout,
                config.test.tau_cov,
                coverage_file=config.test.coverage_file,
                cases_file=config.test.cases_file,
                env_allowlist=config.test.env_allowlist,
                rules=self.rules,
            )
            self._log("cross_validate", v_pass=xval.v_pass, reasons=list(xval.reasons))
            if not xval.v_pass:
                return xval
        return None

    def _coverage_gate(self) -> GateResult:
        path = self.workspace / self.config.test.coverage_file
        if not path.is_file():
            return GateResult(passed=False, ratio=0.0)
        try:
            report = parse_coverage(path.read_text())
            return coverage_gate(report, self.config.test.tau_cov)
        except (CoverageParseError, DegenerateCoverage):
            return GateResult(passed=False, ratio=0.0)

    def _revert(self, patch) -> None:
        undo = apply_patch(self.workspace, reverse_patch(patch))
        if not undo.ok:  # pragma: no cover - reverse of a clean apply
            raise PatchlockError("failed to revert a rejected patch")

    def _restore_locked(self, backup: Path, locked_root: Path,
                        anchor: TreeDigest) -> None:
        set_tree_writable(locked_root, True)
        shutil.rmtree(locked_root)
        shutil.copytree(backup, locked_root, symlinks=True)
        set_tree_writable(locked_root, False)
        verdict = verify_anchor(locked_root, anchor, self.rules)
        if not verdict.intact:  # pragma: no cover - backup mirrors the anchor
            raise PatchlockError("locked tree could not be restored to its anchor")
        self._log("locked_tree_restored", digest=anchor.digest)

    def _write_anchors(self) -> None:
        trees = {}
        for label, prefix, root in (
            ("source", self.config.layout.source_prefix, self._source_root),
            ("tests", self.config.layout.tests_prefix, self._tests_root),
        ):
            digest = snapshot_tree(root, self.rules, label)
            trees[label] = {
                "prefix": prefix,
                "digest": digest.digest,
                "file_count": digest.file_count,
                "root_label": digest.root_label,
                "manifest": [list(e) for e in digest.entries],
            }
        payload = {"schema": "patchlock-anchors/v1", "trees": trees}
        (self.run_dir / "anchors.json").write_text(
            json.dumps(payload, indent=1, sort_keys=True) + "\n"
        )

    # -- outer loop ---------------------------------------------------------

    def outer_episode(self) -> EpisodeReport:
        """Deploy the committed workspace and step the market to completion."""
        config = self.config
        if config.market is None or config.policy is None:
            raise ConflictError("run is not configured for deployment")
        if self.lock.phase is not Phase.VERIFY:
            raise ConflictError("deploy requires a committed (verified) workspace")
        data = self._market_data()
        env = market.EnvConfig(
            tau=config.env.tau,
            p_terminal=config.env.p_terminal,
            w0=config.env.w0,
            n_assets=data.n_assets,
        )
        self.lock = transition(self.lock, PhaseEvent.ENTER_DEPLOY,
                               self._source_root, self._tests_root, self.rules)
        with self._cond:
            self.status = RunStatus.DEPLOYED
            self._cond.notify_all()
        self._log("deploy", steps_available=data.n_steps, assets=data.n_assets)

        state = market.PortfolioState.initial(env)
        autopsies = 0
        cause = "DataExhausted"
        t = 0
        while t < data.n_steps:
            boundary = self._await_step_boundary()
            if boundary == "halt":
                cause = "Halted"
                break
            try:
                weights = self._policy_weights(data, t)
                state, outcome = market.step(
                    state, weights, data.returns[t], config.friction, env
                )
            except (_PolicyFault, market.InvalidAction) as exc:
                autopsies += 1
                self._raise_degradation(
                    autopsy_mod.TriggerReason.DAILY_LOSS_ANOMALY,
                    market.StepOutcome(0.0, 0.0, 0.0, 1.0 - self._wealth / env.w0, False),
                    f"policy adapter failure: {exc}",
                )
                resumed = self._await_mandate_and_refit()
                if not resumed:
                    cause = "Halted" if self._halted else "InnerExhausted"
                    break
                continue  # retry the same step with the refitted code
            with self._cond:
                self._wealth = state.wealth
                point = market.EquityPoint(
                    step=state.step_index,
                    wealth=state.wealth,
                    reward=outcome.reward,
                    principal_loss=outcome.principal_loss,
                    terminated=outcome.terminated,
                )
                self.equity.append(point)
                self._cond.notify_all()
            self._log("market_step", step=point.step, wealth=float(point.wealth),
                      reward=float(point.reward), gross=float(outcome.gross_return),
                      friction=float(outcome.friction_cost),
                      L_t=float(point.principal_loss), terminated=point.terminated)
            t += 1
            reason = autopsy_mod.detect_degradation(outcome, self.equity,
                                                    config.degradation)
            if reason is autopsy_mod.TriggerReason.TERMINAL_BREACH:
                autopsies += 1
                event = autopsy_mod.build_autopsy(reason, outcome, self._diagnostics(
                    f"principal loss {outcome.principal_loss:.4f} reached tau {env.tau}"
                ))
                with self._cond:
                    self.pending_autopsy = event
                    self.status = RunStatus.TERMINATED
                    self._cond.notify_all()
                self._log("degradation", reason=reason.value)
                self._log("autopsy", event=event.to_payload())
                cause = "TerminalBreach"
                break
            if reason is autopsy_mod.TriggerReason.DAILY_LOSS_ANOMALY:
                autopsies += 1
                self._raise_degradation(reason, outcome,
                                        f"step reward {outcome.reward:.4f} breached "
                                        f"threshold {config.degradation.daily_loss_threshold}")
                resumed = self._await_mandate_and_refit()
                if not resumed:
                    cause = "Halted" if self._halted else "InnerExhausted"
                    break
        report = EpisodeReport(
            steps=len(self.equity),
            final_wealth=self._wealth,
            termination_cause=cause,
            autopsy_count=autopsies,
        )
        logger.info("episode over: %s after %d steps, wealth %.2f",
                    cause, report.steps, report.final_wealth)
        self._log("episode_end", cause=cause, steps=report.steps,
                  final_wealth=float(report.final_wealth), autopsies=autopsies)
        (self.run_dir / "equity.csv").write_text(market.equity_to_csv(self.equity))
        return report

    def _market_data(self) -> market.MarketData:
        source = self.config.market
        if source.csv_path is not None:
            return market.load_returns(source.csv_path)
        s = source.synth
        return market.synth_market(s.seed, s.n_assets, s.n_steps, s.vol, s.drift)

    def _await_step_boundary(self) -> str:
        """Block while paused; return 'halt' or 'step'."""
        with self._cond:
            while True:
                if self._halted or self.status is RunStatus.TERMINATED:
                    return "halt"
                if self.status is RunStatus.PAUSED:
                    self._cond.wait(timeout=0.1)
                    continue
                if self.status is RunStatus.DEPLOYED:
                    return "step"
                raise PausedError(f"cannot step while {self.status.value}")

    def _diagnostics(self, root_cause: str) -> autopsy_mod.Diagnostics:
        module = self.config.policy.module if self.config.policy else "policy"
        return autopsy_mod.Diagnostics(
            module=module,
            root_cause=root_cause,
            execution_log=self._execution_log_path(),
        )

    def _raise_degradation(self, reason: autopsy_mod.TriggerReason,
                           outcome: market.StepOutcome, root_cause: str) -> None:
        event = autopsy_mod.build_autopsy(reason, outcome, self._diagnostics(root_cause))
        with self._cond:
            self.pending_autopsy = event
            self.status = RunStatus.AWAITING_MANDATE
            self._cond.notify_all()
        self._log("degradation", reason=reason.value)
        self._log("autopsy", event=event.to_payload())
        self._log("pause", status=RunStatus.AWAITING_MANDATE.value)

    def _await_mandate_and_refit(self) -> bool:
        """Block until a mandate arrives, re-run the inner loop, redeploy."""
        with self._cond:
            while self.status is RunStatus.AWAITING_MANDATE and not self._halted:
                if self._scripted_mandates and not self._mandate_ready:
                    text = self._scripted_mandates.pop(0)
                    completed = self.pending_autopsy.with_mandate(text)
                    autopsy_mod.validate_mandate(completed.to_payload())
                    self.pending_autopsy = completed
                    self._mandate_ready = True
                    self.status = RunStatus.INNER_LOOP
                    break
                self._cond.wait(timeout=0.1)
            if self._halted:
                return False
            mandate = self.pending_autopsy.mandate if self.pending_autopsy else ""
        self._log("mandate", mandate=mandate)
        result = self.inner_cycle(Phase.LOGIC_GENESIS)
        if not result.committed:
            return False
        self.lock = transition(self.lock, PhaseEvent.ENTER_DEPLOY,
                               self._source_root, self._tests_root, self.rules)
        with self._cond:
            self.status = RunStatus.DEPLOYED
            self._cond.notify_all()
        self._log("deploy", redeploy=True)
        return True

    def _policy_weights(self, data: market.MarketData, t: int) -> list[float]:
        config = self.config.policy
        header = "date," + ",".join(data.asset_ids)
        if t == 0:
            snapshot = header + "\n"
        else:
            row = data.returns[t - 1]
            cells = ",".join(repr(float(x)) for x in row)
            snapshot = f"{header}\n{data.step_labels[t - 1]},{cells}\n"
        env = {k: os.environ[k] for k in self.config.test.env_allowlist
               if k in os.environ}
        try:
            proc = subprocess.run(
                list(config.command),
                cwd=str(self.workspace),
                input=snapshot,
                capture_output=True,
                text=True,
                timeout=config.timeout,
                env=env,
            )
        except (FileNotFoundError, subprocess.TimeoutExpired) as exc:
            raise _PolicyFault(str(exc)) from exc
        if proc.returncode != 0:
            raise _PolicyFault(f"exit {proc.returncode}: {proc.stdout[-400:]}")
        lines = [ln for ln in proc.stdout.splitlines() if ln.strip()]
        if not lines:
            raise _PolicyFault("no output")
        try:
            weights = json.loads(lines[-1])
        except json.JSONDecodeError as exc:
            raise _PolicyFault(f"output is not JSON: {exc}") from exc
        if (not isinstance(weights, list)
                or len(weights) != data.n_assets
                or not all(isinstance(w, (int, float)) and not isinstance(w, bool)
                           for w in weights)):
            raise _PolicyFault(f"expected {data.n_assets} numeric weights")
        return [float(w) for w in weights]

    # -- control surface ----------------------------------------------------

    def equity_snapshot(self) -> list[market.EquityPoint]:
        with self._cond:
            return list(self.equity)

    def summary(self) -> dict:
        with self._cond:
            wealth = self._wealth
            return {
                "run_id": self.run_id,
                "status": self.status.value,
                "step_index": len(self.equity),
                "wealth": wealth,
                "principal_loss": 1.0 - wealth / self.config.env.w0,
                "last_event_seq": self.events.last_seq,
                "pending_autopsy": (self.pending_autopsy.to_payload()
                                    if self.pending_autopsy else None),
            }

    def submit_mandate(self, document) -> autopsy_mod.AutopsyEvent:
        """Validate an operator mandate and unblock the episode loop.

        Only legal while the run awaits a mandate.  The validated mandate
        string is attached to the pending event; diagnostics stay server-built.
        """
        with self._cond:
            if self.status is not RunStatus.AWAITING_MANDATE:
                raise ConflictError(f"run is {self.status.value}, not AwaitingMandate")
            event = autopsy_mod.validate_mandate(document)
            completed = self.pending_autopsy.with_mandate(event.mandate)
            self.pending_autopsy = completed
            self._mandate_ready = True
            self.status = RunStatus.INNER_LOOP
            self._cond.notify_all()
            return completed

    def control(self, action: str) -> RunStatus:
        """Apply pause/resume/halt at the next step boundary."""
        with self._cond:
            if action == "pause":
                if self.status is not RunStatus.DEPLOYED:
                    raise ConflictError(f"cannot pause while {self.status.value}")
                self.status = RunStatus.PAUSED
            elif action == "resume":
                if self.status is not RunStatus.PAUSED:
                    raise ConflictError(f"cannot resume while {self.status.value}")
                self.status = RunStatus.DEPLOYED
            elif action == "halt":
                if self.status is RunStatus.TERMINATED:
                    raise ConflictError("run already terminated")
                self._halted = True
                self.status = RunStatus.TERMINATED
            else:
                raise ConflictError(f"unknown action {action!r}")
            self._cond.notify_all()
            status = self.status
        self._log("control", action=action, status=status.value)
        return status

    # -- top level ----------------------------------------------------------

    def execute(self) -> RunResult:
        """Run configured Genesis phases, then the deployment episode."""
        self._log("run_start", run_id=self.run_id,
                  phases=list(self.config.phases), deploy=self.config.deploy)
        try:
            for phase_name in self.config.phases:
                result = self.inner_cycle(_PHASE_BY_NAME[phase_name])
                if self._halted:
                    break
                if not result.committed:
                    self._log("run_end", outcome="exhausted")
                    return RunResult(committed=False, exhausted=True,
                                     last_gradient=result.gradient)
            if self._halted:
                self._log("run_end", outcome="halted")
                return RunResult(committed=False, exhausted=False)
            with self._cond:
                self.status = RunStatus.COMMITTED
                self._cond.notify_all()
            episode = None
            if self.config.deploy:
                episode = self.outer_episode()
            self._log("run_end", outcome="completed")
            return RunResult(committed=True, exhausted=False, episode=episode)
        finally:
            if self._agent is not None:
                self._agent.close()
                self._agent = None
            if self.equity and not (self.run_dir / "equity.csv").exists():
                (self.run_dir / "equity.csv").write_text(
                    market.equity_to_csv(self.equity))
            self.events.close()
