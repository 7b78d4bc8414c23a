import dataclasses
import json
import threading
import time
from pathlib import Path

import pytest

from conftest import (
    CALC_BUGGY,
    CALC_FIXED,
    FIX_PATCH,
    GARBAGE_AGENT,
    SLEEPY_AGENT,
    TEST_CALC,
    make_baseline,
    make_diff,
    make_workspace,
    patch_reply,
    write_agent_script,
    write_config,
    write_returns_csv,
)
from patchlock.config import load_config
from patchlock.orchestrator import (
    AgentCrashed,
    AgentTimeout,
    ConflictError,
    ProtocolError,
    Run,
    RunStatus,
)
from patchlock.sandbox import GradientCause
from patchlock.vault import Phase, snapshot_tree

import sys

PY = sys.executable

BENIGN_SECOND_PATCH = make_diff(
    "src/calc.py", CALC_FIXED, CALC_FIXED + "\n# post-mandate tuning pass\n"
)


def build_run(tmp_path, replies, *, buggy=True, max_iterations=1, **config_kwargs) -> Run:
    ws = make_workspace(tmp_path, buggy=buggy)
    agent_cmd = write_agent_script(tmp_path, replies)
    config_path = write_config(
        tmp_path, ws, agent_cmd, max_iterations=max_iterations, **config_kwargs
    )
    return Run(load_config(config_path))


def event_kinds(run: Run) -> list[str]:
    return [record["kind"] for record in run.events.snapshot()]


def gradient_events(run: Run) -> list[dict]:
    return [record["payload"]["gradient"] for record in run.events.snapshot()
            if record["kind"] == "gradient"]


class TestInnerCycle:
    def test_benign_fix_commits_first_iteration(self, tmp_path):
        run = build_run(tmp_path, [patch_reply(FIX_PATCH)])
        result = run.inner_cycle(Phase.LOGIC_GENESIS)
        assert result.committed and result.iterations == 1
        kinds = event_kinds(run)
        assert kinds.count("cycle_end") == 1
        assert kinds.count("commit") == 1
        assert (run.run_dir / "anchors.json").is_file()
        assert run.lock.phase is Phase.VERIFY
        # the fix landed
        assert "w / total" in (run.workspace / "src" / "calc.py").read_text()

    def test_tests_tree_edit_is_blocked_and_tree_intact(self, tmp_path):
        evil = make_diff("tests/test_calc.py", TEST_CALC, TEST_CALC.replace(
            "assert normalize([0.2, 0.2]) == [0.5, 0.5]", "assert True"
        ))
        run = build_run(tmp_path, [patch_reply(evil)])
        anchor_before = snapshot_tree(run.workspace / "tests").digest
        result = run.inner_cycle(Phase.LOGIC_GENESIS)
        assert not result.committed
        assert result.gradient.cause is GradientCause.TAMPER_DETECTED
        assert "tests/test_calc.py" in result.gradient.offending_paths
        assert snapshot_tree(run.workspace / "tests").digest == anchor_before

    def test_failing_logic_exhausts_with_test_failure(self, tmp_path):
        # each iteration swaps in a different, still-wrong formula
        broken_v2 = CALC_BUGGY.replace(
            "    return [w / len(weights) for w in weights]",
            "    return [w * 2 for w in weights]",
        )
        broken_v3 = CALC_BUGGY.replace(
            "    return [w / len(weights) for w in weights]",
            "    return [w + 1 for w in weights]",
        )
        run = build_run(
            tmp_path,
            [
                patch_reply(make_diff("src/calc.py", CALC_BUGGY, broken_v2)),
                patch_reply(make_diff("src/calc.py", broken_v2, broken_v3)),
            ],
            max_iterations=2,
        )
        result = run.inner_cycle(Phase.LOGIC_GENESIS)
        assert not result.committed
        assert result.iterations == 2
        assert result.gradient.cause is GradientCause.TEST_FAILURE
        # the second message carried the first failure's gradient
        messages = [r["payload"]["message"] for r in run.events.snapshot()
                    if r["kind"] == "agent_message"]
        assert messages[0]["kind"] == "PhaseContext"
        assert messages[1]["kind"] == "SemanticGradientFeedback"
        assert messages[1]["payload"]["cause"] == "TestFailure"

    def test_second_patch_rejected_as_stale_after_revert(self, tmp_path):
        # a sanitizer-violating patch is reverted; the identical retry then
        # applies again cleanly, proving the revert restored the bytes
        evil = make_diff(
            "src/calc.py", CALC_BUGGY, CALC_BUGGY + "\nimport pytest\n"
        )
        run = build_run(tmp_path, [patch_reply(evil), patch_reply(evil)],
                        max_iterations=2)
        src_before = snapshot_tree(run.workspace / "src").digest
        result = run.inner_cycle(Phase.LOGIC_GENESIS)
        assert not result.committed
        assert result.gradient.cause is GradientCause.SANITIZER_VIOLATION
        assert snapshot_tree(run.workspace / "src").digest == src_before

    def test_abstain_ends_cycle(self, tmp_path):
        run = build_run(tmp_path, [{"kind": "Abstain", "note": "cannot help"}],
                        max_iterations=4)
        result = run.inner_cycle(Phase.LOGIC_GENESIS)
        assert not result.committed
        assert result.iterations == 1
        assert "agent_abstain" in event_kinds(run)

    def test_protocol_garbage_raises_and_preserves_raw(self, tmp_path):
        ws = make_workspace(tmp_path)
        config_path = write_config(tmp_path, ws, [PY, str(GARBAGE_AGENT)])
        run = Run(load_config(config_path))
        with pytest.raises(ProtocolError):
            run.inner_cycle(Phase.LOGIC_GENESIS)
        raws = [r["payload"]["raw"] for r in run.events.snapshot()
                if r["kind"] == "protocol_error"]
        assert raws == ["this is not json"]

    def test_silent_agent_times_out(self, tmp_path):
        ws = make_workspace(tmp_path)
        config_path = write_config(tmp_path, ws, [PY, str(SLEEPY_AGENT)])
        config = load_config(config_path)
        config = dataclasses.replace(
            config, agent=dataclasses.replace(config.agent, timeout=1.0)
        )
        run = Run(config)
        started = time.monotonic()
        with pytest.raises(AgentTimeout):
            run.inner_cycle(Phase.LOGIC_GENESIS)
        assert time.monotonic() - started < 10

    def test_dead_agent_is_reported_crashed(self, tmp_path):
        ws = make_workspace(tmp_path)
        config_path = write_config(
            tmp_path, ws, [PY, "-c", "import sys; sys.exit(3)"]
        )
        run = Run(load_config(config_path))
        with pytest.raises(AgentCrashed):
            run.inner_cycle(Phase.LOGIC_GENESIS)

    def test_benign_cycle_keeps_tests_tree_clean_through_test_run(self, tmp_path):
        """Running the suite must not perturb the locked tests tree."""
        run = build_run(tmp_path, [patch_reply(FIX_PATCH)])
        result = run.inner_cycle(Phase.LOGIC_GENESIS)
        assert result.committed
        checks = [r["payload"] for r in run.events.snapshot()
                  if r["kind"] == "anchor_check"]
        assert checks and all(c["intact"] for c in checks)
        assert snapshot_tree(run.workspace / "tests").digest == \
            run.lock.anchor_tests.digest

    def test_test_genesis_commit_via_cross_validation(self, tmp_path):
        extra_test = TEST_CALC + (
            "\n\ndef test_clamp_identity_inside_range():\n"
            "    assert clamp(0.5, 0.0, 1.0) == 0.5\n"
        )
        patch = make_diff("tests/test_calc.py", TEST_CALC, extra_test)
        ws = make_workspace(tmp_path, buggy=False)
        baseline = make_baseline(tmp_path)
        agent_cmd = write_agent_script(tmp_path, [patch_reply(patch)])
        config_path = write_config(
            tmp_path, ws, agent_cmd, baseline_root=baseline,
            phases=["test_genesis"], max_iterations=1,
        )
        run = Run(load_config(config_path))
        result = run.inner_cycle(Phase.TEST_GENESIS)
        assert result.committed
        assert "test_clamp_identity_inside_range" in (
            run.workspace / "tests" / "test_calc.py").read_text()

    def test_test_genesis_required_case_deletion_blocked(self, tmp_path):
        hollowed = TEST_CALC.replace(
            "def test_normalize_unit_sum():\n    assert normalize([0.2, 0.2]) == [0.5, 0.5]\n\n\n",
            "",
        )
        patch = make_diff("tests/test_calc.py", TEST_CALC, hollowed)
        ws = make_workspace(tmp_path, buggy=False)
        baseline = make_baseline(tmp_path)
        agent_cmd = write_agent_script(tmp_path, [patch_reply(patch)])
        config_path = write_config(
            tmp_path, ws, agent_cmd, baseline_root=baseline,
            phases=["test_genesis"], max_iterations=1,
        )
        run = Run(load_config(config_path))
        src_anchor = snapshot_tree(run.workspace / "src").digest
        result = run.inner_cycle(Phase.TEST_GENESIS)
        assert not result.committed
        assert result.gradient.cause is GradientCause.BASELINE_MISMATCH
        assert snapshot_tree(run.workspace / "src").digest == src_anchor


class TestOuterEpisode:
    def _market_csv(self, tmp_path, rows):
        return write_returns_csv(tmp_path / "returns.csv", [[r] for r in rows], 1)

    def test_deploy_requires_a_committed_workspace(self, tmp_path):
        csv_path = self._market_csv(tmp_path, [0.01])
        run = build_run(
            tmp_path, [patch_reply(FIX_PATCH)],
            deploy=True, market={"csv": str(csv_path)},
        )
        with pytest.raises(ConflictError):
            run.outer_episode()

    def test_benign_episode_completes(self, tmp_path):
        csv_path = self._market_csv(tmp_path, [0.001] * 10)
        run = build_run(
            tmp_path, [patch_reply(FIX_PATCH)],
            deploy=True, market={"csv": str(csv_path)},
            friction={"lambda": 0.0},
        )
        result = run.execute()
        assert result.committed
        assert result.episode.termination_cause == "DataExhausted"
        assert result.episode.steps == 10
        assert result.episode.autopsy_count == 0
        assert result.episode.final_wealth == pytest.approx(
            1000.0 * 1.001**10, rel=1e-12
        )
        assert (run.run_dir / "equity.csv").is_file()

    def test_terminal_breach_at_exact_step(self, tmp_path):
        csv_path = self._market_csv(tmp_path, [-0.10, -0.08, -0.05, 0.01])
        run = build_run(
            tmp_path, [patch_reply(FIX_PATCH)],
            deploy=True, market={"csv": str(csv_path)},
            friction={"lambda": 0.0},
            # keep the anomaly trigger quiet so only the terminal breach fires
            degradation={"daily_loss_threshold": -0.5},
        )
        result = run.execute()
        episode = result.episode
        assert episode.termination_cause == "TerminalBreach"
        assert episode.steps == 3
        assert run.status is RunStatus.TERMINATED
        last = run.equity[-1]
        assert last.terminated
        assert last.reward == -100.0
        assert last.wealth == pytest.approx(1000 * 0.9 * 0.92 * 0.95, rel=1e-12)
        assert run.pending_autopsy is not None
        assert run.pending_autopsy.mandate == ""

    def test_degradation_pause_mandate_refit_redeploy(self, tmp_path):
        csv_path = self._market_csv(tmp_path, [-0.03, 0.01, 0.01, 0.01])
        run = build_run(
            tmp_path,
            [patch_reply(FIX_PATCH), patch_reply(BENIGN_SECOND_PATCH)],
            deploy=True, market={"csv": str(csv_path)},
            friction={"lambda": 0.0},
            mandates=["Reduce turnover and add volume limits"],
            max_iterations=1,
        )
        result = run.execute()
        episode = result.episode
        assert episode.termination_cause == "DataExhausted"
        assert episode.autopsy_count == 1
        assert episode.steps == 4
        kinds = event_kinds(run)
        # ordering: detect -> pause -> mandate -> inner cycle -> redeploy
        sequence = [k for k in kinds if k in
                    ("degradation", "pause", "mandate", "phase_enter", "commit", "deploy")]
        assert sequence == [
            "phase_enter", "commit", "deploy",          # initial fix + deploy
            "degradation", "pause", "mandate",          # anomaly and operator input
            "phase_enter", "commit", "deploy",          # mandate-driven refit
        ]
        messages = [r["payload"]["message"] for r in run.events.snapshot()
                    if r["kind"] == "agent_message"]
        assert messages[-1]["kind"] == "AutopsyMandate"
        assert messages[-1]["payload"]["mandate"] == "Reduce turnover and add volume limits"
        # between detection and mandate no PhaseContext was sent
        detect_seq = kinds.index("degradation")
        mandate_seq = kinds.index("mandate")
        for record in run.events.snapshot():
            if record["kind"] == "agent_message" and detect_seq < record["seq"] < mandate_seq:
                assert record["payload"]["message"]["kind"] != "PhaseContext"

    def test_invalid_policy_output_surfaces_as_degradation(self, tmp_path):
        csv_path = self._market_csv(tmp_path, [0.01, 0.01])
        run = build_run(
            tmp_path, [patch_reply(FIX_PATCH)],
            deploy=True, market={"csv": str(csv_path)},
        )
        (run.workspace / "policy.py").write_text(
            "print('[2.0]')\n"  # sum > 1: leveraged, must be rejected
        )
        thread = threading.Thread(target=run.execute, daemon=True)
        thread.start()
        deadline = time.monotonic() + 20
        while time.monotonic() < deadline:
            if run.status is RunStatus.AWAITING_MANDATE:
                break
            time.sleep(0.02)
        assert run.status is RunStatus.AWAITING_MANDATE
        assert "policy adapter failure" in run.pending_autopsy.diagnostics.root_cause
        run.control("halt")
        thread.join(timeout=10)
        assert not thread.is_alive()
        assert run.status is RunStatus.TERMINATED


class TestDeterminism:
    def test_identical_runs_produce_identical_logs_and_equity(self, tmp_path):
        def one(side: Path):
            side.mkdir()
            csv_path = write_returns_csv(
                side / "returns.csv", [[0.002], [-0.001], [0.003]], 1
            )
            run = build_run(
                side, [patch_reply(FIX_PATCH)],
                deploy=True, market={"csv": str(csv_path)},
                friction={"lambda": 0.0008},
            )
            run.execute()
            events = [
                {k: v for k, v in record.items() if k != "timestamp"}
                for record in run.events.snapshot()
            ]
            return (
                json.dumps(events, sort_keys=True),
                (run.run_dir / "equity.csv").read_bytes(),
            )

        events_a, equity_a = one(tmp_path / "a")
        events_b, equity_b = one(tmp_path / "b")
        assert events_a == events_b
        assert equity_a == equity_b
