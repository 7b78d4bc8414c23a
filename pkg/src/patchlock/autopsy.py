"""Degradation detection and the operator mandate protocol.

When the deployed loop bleeds capital — a single-step loss anomaly or the
terminal principal-loss breach — the harness assembles a structured event
for the human operator.  The event's JSON schema is fixed field-for-field;
documents with missing, extra, or renamed fields are rejected, and an event
is only resumable once the operator has written a non-empty mandate into it.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, replace
from enum import Enum
from typing import Optional, Sequence, Union

from .errors import PatchlockError
from .market import StepOutcome

EVENT_NAME = "FINANCIAL_DEGRADATION_DETECTED"


class SchemaError(PatchlockError):
    def __init__(self, field: str, message: str = ""):
        self.field = field
        super().__init__(f"schema violation at {field!r}" + (f": {message}" if message else ""))


class MandateMissing(PatchlockError):
    """The document is schema-valid but carries no operator mandate."""


class TriggerReason(Enum):
    DAILY_LOSS_ANOMALY = "DailyLossAnomaly"
    TERMINAL_BREACH = "TerminalBreach"


@dataclass(frozen=True)
class DegradationRule:
    daily_loss_threshold: float = -0.02

    def __post_init__(self):
        if self.daily_loss_threshold >= 0:
            raise ValueError("daily_loss_threshold must be negative")


@dataclass(frozen=True)
class Diagnostics:
    module: str
    root_cause: str
    execution_log: str


@dataclass(frozen=True)
class AutopsyEvent:
    daily_pnl: float
    slippage_leakage: float
    diagnostics: Diagnostics
    mandate: str = ""

    event: str = EVENT_NAME

    def __post_init__(self):
        if self.event != EVENT_NAME:
            raise ValueError(f"event must be {EVENT_NAME!r}")

    def with_mandate(self, mandate: str) -> "AutopsyEvent":
        return replace(self, mandate=mandate)

    def to_payload(self) -> dict:
        return {
            "event": self.event,
            "metrics": {
                "daily_pnl": self.daily_pnl,
                "slippage_leakage": self.slippage_leakage,
            },
            "diagnostics": {
                "module": self.diagnostics.module,
                "root_cause": self.diagnostics.root_cause,
                "execution_log": self.diagnostics.execution_log,
            },
            "mandate": self.mandate,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_payload(), sort_keys=True, separators=(",", ":"),
                          ensure_ascii=False)


def detect_degradation(
    latest: StepOutcome,
    history: Sequence[object],
    rule: DegradationRule,
) -> Optional[TriggerReason]:
    """Trigger on termination first, then on a single-step loss anomaly."""
    if not history:
        raise ValueError("history must be non-empty")
    if latest.terminated:
        return TriggerReason.TERMINAL_BREACH
    if latest.reward <= rule.daily_loss_threshold:
        return TriggerReason.DAILY_LOSS_ANOMALY
    return None


def build_autopsy(
    reason: TriggerReason,
    outcome: StepOutcome,
    diagnostics: Diagnostics,
) -> AutopsyEvent:
    """Assemble the operator-facing event for a detected degradation.

    The metrics always carry the step's economic values.  On a terminal
    breach that means the net return of the step, not the synthetic terminal
    penalty, which is a training signal rather than an economic quantity.
    """
    if reason is TriggerReason.TERMINAL_BREACH:
        pnl = outcome.gross_return - outcome.friction_cost
    else:
        pnl = outcome.reward
    return AutopsyEvent(
        daily_pnl=pnl,
        slippage_leakage=outcome.friction_cost,
        diagnostics=diagnostics,
    )


_METRIC_KEYS = ("daily_pnl", "slippage_leakage")
_DIAGNOSTIC_KEYS = ("module", "root_cause", "execution_log")
_TOP_KEYS = ("event", "metrics", "diagnostics", "mandate")


def _check_keys(obj: dict, expected: tuple[str, ...], prefix: str = "") -> None:
    for key in expected:
        if key not in obj:
            raise SchemaError(prefix + key, "missing")
    for key in sorted(obj):
        if key not in expected:
            raise SchemaError(prefix + key, "unexpected field")


def validate_mandate(document: Union[str, bytes, dict]) -> AutopsyEvent:
    """Parse and strictly validate an operator-completed autopsy document.

    Field names and nesting must match the schema exactly; the mandate must
    be a non-empty string for the event to be resumable.
    """
    if isinstance(document, (str, bytes)):
        try:
            data = json.loads(document)
        except json.JSONDecodeError as exc:
            raise SchemaError("document", f"not valid JSON: {exc}") from exc
    else:
        data = document
    if not isinstance(data, dict):
        raise SchemaError("document", "top level must be an object")
    _check_keys(data, _TOP_KEYS)
    if data["event"] != EVENT_NAME:
        raise SchemaError("event", f"must be {EVENT_NAME!r}")
    metrics = data["metrics"]
    if not isinstance(metrics, dict):
        raise SchemaError("metrics", "must be an object")
    _check_keys(metrics, _METRIC_KEYS, "metrics.")
    for key in _METRIC_KEYS:
        if isinstance(metrics[key], bool) or not isinstance(metrics[key], (int, float)):
            raise SchemaError(f"metrics.{key}", "must be a number")
    diagnostics = data["diagnostics"]
    if not isinstance(diagnostics, dict):
        raise SchemaError("diagnostics", "must be an object")
    _check_keys(diagnostics, _DIAGNOSTIC_KEYS, "diagnostics.")
    for key in _DIAGNOSTIC_KEYS:
        if not isinstance(diagnostics[key], str):
            raise SchemaError(f"diagnostics.{key}", "must be a string")
    if not isinstance(data["mandate"], str):
        raise SchemaError("mandate", "must be a string")
    if not data["mandate"].strip():
        raise MandateMissing("mandate must be a non-empty string")
    return AutopsyEvent(
        daily_pnl=float(metrics["daily_pnl"]),
        slippage_leakage=float(metrics["slippage_leakage"]),
        diagnostics=Diagnostics(
            module=diagnostics["module"],
            root_cause=diagnostics["root_cause"],
            execution_log=diagnostics["execution_log"],
        ),
        mandate=data["mandate"],
    )
