"""Shared fixtures: a toy project-under-test, scripted agents, run configs.

The fixture project is a tiny long-only allocator with its own test runner.
The runner measures real line coverage of the source tree (trace hook plus
bytecode line tables) and writes the neutral coverage/cases documents the
harness consumes.
"""

from __future__ import annotations

import difflib
import json
import shutil
import sys
from pathlib import Path

import pytest

HELPERS = Path(__file__).parent / "helpers"
REPLAY_AGENT = HELPERS / "replay_agent.py"
GARBAGE_AGENT = HELPERS / "garbage_agent.py"
SLEEPY_AGENT = HELPERS / "sleepy_agent.py"

CALC_FIXED = '''"""Toy long-only allocator exercised by the harness fixtures."""

WEIGHT_CAP = 0.6


def clamp(value, low, high):
    if value < low:
        return low
    if value > high:
        return high
    return value


def normalize(weights):
    total = sum(weights)
    if total <= 0:
        return [0.0 for _ in weights]
    return [w / total for w in weights]


def target_weights(signals):
    raw = [clamp(s, 0.0, WEIGHT_CAP) for s in signals]
    return normalize(raw)
'''

CALC_BUGGY = CALC_FIXED.replace(
    "    return [w / total for w in weights]",
    "    return [w / len(weights) for w in weights]",
)

TEST_CALC = '''from src.calc import clamp, normalize, target_weights


def test_clamp_bounds():
    assert clamp(1.5, 0.0, 1.0) == 1.0
    assert clamp(-0.2, 0.0, 1.0) == 0.0
    assert clamp(0.3, 0.0, 1.0) == 0.3


def test_normalize_unit_sum():
    assert normalize([0.2, 0.2]) == [0.5, 0.5]


def test_normalize_degenerate():
    assert normalize([0.0, 0.0]) == [0.0, 0.0]


def test_target_weights_long_only():
    w = target_weights([0.9, 0.1])
    assert abs(sum(w) - 1.0) < 1e-12
    assert all(x >= 0 for x in w)
'''

RUN_TESTS = '''"""Project test harness: runs tests/test_*.py and records line coverage."""
import dis
import importlib
import json
import sys
import traceback
import types
from pathlib import Path

sys.dont_write_bytecode = True
ROOT = Path(__file__).resolve().parent
sys.path.insert(0, str(ROOT))

SRC = ROOT / "src"


def executable_lines(path):
    code = compile(path.read_text(), str(path), "exec")
    lines, stack = set(), [code]
    while stack:
        c = stack.pop()
        lines.update(l for _, l in dis.findlinestarts(c) if l)
        stack.extend(k for k in c.co_consts if isinstance(k, types.CodeType))
    return lines


def main():
    src_files = sorted(SRC.rglob("*.py"))
    totals = {str(p): executable_lines(p) for p in src_files}
    hits = {str(p): set() for p in src_files}

    def tracer(frame, event, arg):
        if event == "line":
            f = frame.f_code.co_filename
            if f in hits:
                hits[f].add(frame.f_lineno)
        return tracer

    failures = []
    executed = []
    test_files = sorted((ROOT / "tests").glob("test_*.py"))
    sys.settrace(tracer)
    try:
        for tf in test_files:
            mod = importlib.import_module(f"tests.{tf.stem}")
            for name in sorted(dir(mod)):
                fn = getattr(mod, name)
                if not name.startswith("test_") or not callable(fn):
                    continue
                executed.append(name)
                try:
                    fn()
                except Exception:
                    failures.append(name)
                    traceback.print_exc(file=sys.stdout)
    finally:
        sys.settrace(None)

    files = []
    for p in src_files:
        total = totals[str(p)]
        if not total:
            continue
        covered = hits[str(p)] & total
        files.append({
            "path": p.relative_to(ROOT).as_posix(),
            "lines_total": len(total),
            "lines_covered": len(covered),
        })
    (ROOT / "coverage.json").write_text(json.dumps({"files": files}, indent=1))
    (ROOT / "cases.json").write_text(json.dumps(executed))
    print(f"ran {len(executed)} cases, {len(failures)} failed")
    if failures:
        sys.exit(1)


main()
'''

POLICY = '''"""Deployment adapter: map the latest market row to target weights."""
import json
import sys

from src.calc import target_weights


def main():
    lines = [ln for ln in sys.stdin.read().splitlines() if ln.strip()]
    header = lines[0].split(",")
    n = len(header) - 1
    if len(lines) > 1:
        row = [float(x) for x in lines[1].split(",")[1:]]
    else:
        row = [0.0] * n
    signals = [0.5 + r for r in row]
    print(json.dumps(target_weights(signals)))


main()
'''

REQUIRED_CASES = ["test_normalize_unit_sum", "test_target_weights_long_only"]


def make_workspace(root: Path, buggy: bool = True) -> Path:
    """Materialize the fixture project at root/workspace."""
    ws = root / "workspace"
    (ws / "src").mkdir(parents=True)
    (ws / "tests").mkdir()
    (ws / "src" / "__init__.py").write_text("")
    (ws / "src" / "calc.py").write_text(CALC_BUGGY if buggy else CALC_FIXED)
    (ws / "tests" / "__init__.py").write_text("")
    (ws / "tests" / "test_calc.py").write_text(TEST_CALC)
    (ws / "run_tests.py").write_text(RUN_TESTS)
    (ws / "policy.py").write_text(POLICY)
    return ws


def make_baseline(root: Path) -> Path:
    """Pinned known-good source snapshot (the reference tree)."""
    ref = root / "baseline_src"
    ref.mkdir(parents=True)
    (ref / "__init__.py").write_text("")
    (ref / "calc.py").write_text(CALC_FIXED)
    return ref


def make_diff(rel_path: str, old: str, new: str) -> str:
    """Unified diff between two file bodies, git-style a/ b/ headers."""
    from_file = "/dev/null" if old == "" else f"a/{rel_path}"
    to_file = "/dev/null" if new == "" else f"b/{rel_path}"
    lines = difflib.unified_diff(
        old.splitlines(keepends=True),
        new.splitlines(keepends=True),
        fromfile=from_file,
        tofile=to_file,
    )
    return "".join(lines)


FIX_PATCH = make_diff("src/calc.py", CALC_BUGGY, CALC_FIXED)


def write_agent_script(root: Path, replies: list[dict]) -> list[str]:
    """Reply file + command argv for the replay agent."""
    replies_path = root / "replies.json"
    replies_path.write_text(json.dumps(replies))
    return [sys.executable, str(REPLAY_AGENT), str(replies_path)]


def patch_reply(patch_text: str, note: str = "") -> dict:
    return {"kind": "Patch", "patch_text": patch_text, "note": note}


def write_config(
    root: Path,
    ws: Path,
    agent_command: list[str],
    *,
    baseline_root: Path | None = None,
    phases: list[str] = ("logic_genesis",),
    deploy: bool = False,
    market: dict | None = None,
    friction: dict | None = None,
    env: dict | None = None,
    degradation: dict | None = None,
    mandates: list[str] = (),
    max_iterations: int = 1,
    run_id: str = "run",
    name: str = "run.json",
) -> Path:
    config: dict = {
        "schema": "patchlock-run/v1",
        "workspace": str(ws),
        "test": {"command": [sys.executable, "run_tests.py"], "timeout": 60.0},
        "agent": {
            "command": agent_command,
            "task": "make the allocator tests pass",
            "timeout": 30.0,
            "max_inner_iterations": max_iterations,
        },
        "phases": list(phases),
        "deploy": deploy,
        "run": {"run_id": run_id},
    }
    if baseline_root is not None:
        config["baseline"] = {
            "reference_root": str(baseline_root),
            "required_cases": REQUIRED_CASES,
        }
    if deploy:
        config["market"] = market
        config["policy"] = {"command": [sys.executable, "policy.py"], "module": "allocator"}
    if friction:
        config["friction"] = friction
    if env:
        config["env"] = env
    if degradation:
        config["degradation"] = degradation
    if mandates:
        config["autopsy"] = {"mandates": list(mandates)}
    path = root / name
    path.write_text(json.dumps(config, indent=1))
    return path


def write_returns_csv(path: Path, rows: list[list[float]], n_assets: int) -> Path:
    header = "date," + ",".join(f"asset_{i + 1}" for i in range(n_assets))
    lines = [header]
    for i, row in enumerate(rows):
        lines.append(f"d{i}," + ",".join(repr(float(x)) for x in row))
    path.write_text("\n".join(lines) + "\n")
    return path


@pytest.fixture
def workspace(tmp_path: Path) -> Path:
    return make_workspace(tmp_path)


@pytest.fixture
def fixed_workspace(tmp_path: Path) -> Path:
    return make_workspace(tmp_path, buggy=False)


@pytest.fixture
def baseline_root(tmp_path: Path) -> Path:
    return make_baseline(tmp_path)
