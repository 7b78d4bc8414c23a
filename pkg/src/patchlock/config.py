"""Declarative run configuration: one JSON file describes a whole run.

Paths inside the file are resolved relative to the file's own directory, so a
config checked into a workspace stays portable.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Union

from .autopsy import DegradationRule
from .errors import PatchlockError
from .market import FrictionParams
from .patch_gate import SanitizerRuleSet, WorkspaceLayout
from .sandbox import DEFAULT_ENV_ALLOWLIST

CONFIG_SCHEMA = "patchlock-run/v1"


class ConfigError(PatchlockError):
    """The run configuration is missing, malformed, or inconsistent."""


@dataclass(frozen=True)
class TestSettings:
    command: tuple[str, ...]
    timeout: float = 120.0
    tau_cov: float = 0.95
    coverage_file: str = "coverage.json"
    cases_file: str = "cases.json"
    env_allowlist: tuple[str, ...] = DEFAULT_ENV_ALLOWLIST


@dataclass(frozen=True)
class AgentSettings:
    command: tuple[str, ...]
    task: str = ""
    timeout: float = 60.0
    max_inner_iterations: int = 8


@dataclass(frozen=True)
class PolicySettings:
    command: tuple[str, ...]
    timeout: float = 30.0
    module: str = "policy"


@dataclass(frozen=True)
class SynthSpec:
    seed: int
    n_assets: int
    n_steps: int
    vol: float
    drift: float = 0.0


@dataclass(frozen=True)
class MarketSettings:
    csv_path: Optional[Path] = None
    synth: Optional[SynthSpec] = None

    def __post_init__(self):
        if (self.csv_path is None) == (self.synth is None):
            raise ConfigError("market needs exactly one of 'csv' or 'synth'")


@dataclass(frozen=True)
class EnvSettings:
    tau: float = 0.20
    p_terminal: float = 100.0
    w0: float = 1000.0


@dataclass(frozen=True)
class BaselineSettings:
    reference_root: Path
    required_cases: tuple[str, ...] = ()


@dataclass(frozen=True)
class AutopsySettings:
    execution_log: str = ""
    mandates: tuple[str, ...] = ()  # pre-authorized texts for headless runs


@dataclass(frozen=True)
class RunConfig:
    workspace: Path
    layout: WorkspaceLayout
    test: TestSettings
    agent: AgentSettings
    sanitizer: SanitizerRuleSet = field(default_factory=SanitizerRuleSet)
    baseline: Optional[BaselineSettings] = None
    phases: tuple[str, ...] = ("logic_genesis",)
    deploy: bool = True
    market: Optional[MarketSettings] = None
    friction: FrictionParams = field(default_factory=FrictionParams)
    env: EnvSettings = field(default_factory=EnvSettings)
    degradation: DegradationRule = field(default_factory=DegradationRule)
    policy: Optional[PolicySettings] = None
    autopsy: AutopsySettings = field(default_factory=AutopsySettings)
    run_id: str = "run"
    artifacts_dir: Optional[Path] = None

    def __post_init__(self):
        if self.agent.max_inner_iterations < 1:
            raise ConfigError("max_inner_iterations must be >= 1")
        for phase in self.phases:
            if phase not in ("logic_genesis", "test_genesis"):
                raise ConfigError(f"unknown phase {phase!r}")
        if "test_genesis" in self.phases and self.baseline is None:
            raise ConfigError("test_genesis phases require a baseline section")
        if self.deploy and (self.market is None or self.policy is None):
            raise ConfigError("deploy=true requires market and policy sections")


def _expect(obj: dict, key: str, kind: type, where: str):
    if key not in obj:
        raise ConfigError(f"{where}: missing {key!r}")
    value = obj[key]
    if not isinstance(value, kind):
        raise ConfigError(f"{where}.{key}: expected {kind.__name__}")
    return value


def _command(obj: dict, where: str) -> tuple[str, ...]:
    cmd = _expect(obj, "command", list, where)
    if not cmd or not all(isinstance(c, str) for c in cmd):
        raise ConfigError(f"{where}.command must be a non-empty list of strings")
    return tuple(cmd)


_KNOWN_TOP = {
    "schema", "workspace", "layout", "test", "sanitizer", "baseline", "agent",
    "phases", "deploy", "market", "friction", "env", "degradation", "policy",
    "autopsy", "run",
}


def load_config(path: Union[str, Path]) -> RunConfig:
    """Load and validate a run configuration file."""
    path = Path(path)
    try:
        data = json.loads(path.read_text())
    except OSError as exc:
        raise ConfigError(f"cannot read {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path} is not valid JSON: {exc}") from exc
    if not isinstance(data, dict):
        raise ConfigError("top level must be an object")
    if data.get("schema") != CONFIG_SCHEMA:
        raise ConfigError(f"schema must be {CONFIG_SCHEMA!r}")
    unknown = set(data) - _KNOWN_TOP
    if unknown:
        raise ConfigError(f"unknown top-level keys: {sorted(unknown)}")
    base = path.parent

    def resolve(p: str) -> Path:
        candidate = Path(p)
        return candidate if candidate.is_absolute() else (base / candidate).resolve()

    workspace = resolve(_expect(data, "workspace", str, "config"))
    layout_obj = data.get("layout", {})
    try:
        layout = WorkspaceLayout(
            source_prefix=layout_obj.get("source_prefix", "src"),
            tests_prefix=layout_obj.get("tests_prefix", "tests"),
        )
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc

    test_obj = _expect(data, "test", dict, "config")
    test = TestSettings(
        command=_command(test_obj, "test"),
        timeout=float(test_obj.get("timeout", 120.0)),
        tau_cov=float(test_obj.get("tau_cov", 0.95)),
        coverage_file=test_obj.get("coverage_file", "coverage.json"),
        cases_file=test_obj.get("cases_file", "cases.json"),
        env_allowlist=tuple(test_obj.get("env_allowlist", DEFAULT_ENV_ALLOWLIST)),
    )

    agent_obj = _expect(data, "agent", dict, "config")
    agent = AgentSettings(
        command=_command(agent_obj, "agent"),
        task=agent_obj.get("task", ""),
        timeout=float(agent_obj.get("timeout", 60.0)),
        max_inner_iterations=int(agent_obj.get("max_inner_iterations", 8)),
    )

    sanitizer_obj = data.get("sanitizer", {})
    try:
        sanitizer = SanitizerRuleSet(
            guarded_namespaces=tuple(
                sanitizer_obj.get("guarded_namespaces",
                                  SanitizerRuleSet().guarded_namespaces)
            ),
            locked_tree_prefix=sanitizer_obj.get("locked_tree_prefix", layout.tests_prefix),
        )
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc

    baseline = None
    if "baseline" in data:
        baseline_obj = _expect(data, "baseline", dict, "config")
        baseline = BaselineSettings(
            reference_root=resolve(_expect(baseline_obj, "reference_root", str, "baseline")),
            required_cases=tuple(baseline_obj.get("required_cases", [])),
        )

    market = None
    if "market" in data:
        market_obj = _expect(data, "market", dict, "config")
        if "csv" in market_obj:
            market = MarketSettings(csv_path=resolve(market_obj["csv"]))
        elif "synth" in market_obj:
            s = market_obj["synth"]
            market = MarketSettings(synth=SynthSpec(
                seed=int(s.get("seed", 0)),
                n_assets=int(_expect(s, "n_assets", int, "market.synth")),
                n_steps=int(_expect(s, "n_steps", int, "market.synth")),
                vol=float(s.get("vol", 0.0)),
                drift=float(s.get("drift", 0.0)),
            ))
        else:
            raise ConfigError("market needs 'csv' or 'synth'")

    friction_obj = data.get("friction", {})
    try:
        friction = FrictionParams(
            lam=float(friction_obj.get("lambda", 0.0008)),
            gamma=float(friction_obj.get("gamma", 0.0)),
            sqrt_norm=friction_obj.get("sqrt_norm", "l1"),
        )
        env_obj = data.get("env", {})
        env = EnvSettings(
            tau=float(env_obj.get("tau", 0.20)),
            p_terminal=float(env_obj.get("p_terminal", 100.0)),
            w0=float(env_obj.get("w0", 1000.0)),
        )
        degradation_obj = data.get("degradation", {})
        degradation = DegradationRule(
            daily_loss_threshold=float(degradation_obj.get("daily_loss_threshold", -0.02)),
        )
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc

    policy = None
    if "policy" in data:
        policy_obj = _expect(data, "policy", dict, "config")
        policy = PolicySettings(
            command=_command(policy_obj, "policy"),
            timeout=float(policy_obj.get("timeout", 30.0)),
            module=policy_obj.get("module", "policy"),
        )

    autopsy_obj = data.get("autopsy", {})
    autopsy = AutopsySettings(
        execution_log=autopsy_obj.get("execution_log", ""),
        mandates=tuple(autopsy_obj.get("mandates", [])),
    )

    run_obj = data.get("run", {})
    artifacts = run_obj.get("artifacts_dir")
    try:
        return RunConfig(
            workspace=workspace,
            layout=layout,
            test=test,
            agent=agent,
            sanitizer=sanitizer,
            baseline=baseline,
            phases=tuple(data.get("phases", ["logic_genesis"])),
            deploy=bool(data.get("deploy", True)),
            market=market,
            friction=friction,
            env=env,
            degradation=degradation,
            policy=policy,
            autopsy=autopsy,
            run_id=run_obj.get("run_id", "run"),
            artifacts_dir=resolve(artifacts) if artifacts else None,
        )
    except ConfigError:
        raise
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
