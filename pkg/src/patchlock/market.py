"""Friction-bearing portfolio environment with an absorbing loss state.

Each step takes a long-only target weight vector, charges execution friction
on the turnover, compounds wealth multiplicatively, and terminates the
episode with a fixed penalty the first time cumulative principal loss
(measured against the initial endowment, not a high-water mark) reaches the
risk threshold.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence, TextIO, Union

import numpy as np

from .errors import PatchlockError


class DataError(PatchlockError):
    def __init__(self, message: str, row: int = 0, col: int = 0):
        super().__init__(f"row {row}, col {col}: {message}" if row else message)
        self.row = row
        self.col = col


class InvalidAction(PatchlockError):
    """Target weights violate the long-only, unleveraged contract."""


class AbsorbingStateViolation(PatchlockError):
    """A step was attempted after the episode terminated."""


@dataclass(frozen=True)
class FrictionParams:
    """Linear cost per unit turnover plus a square-root slippage term.

    The slippage term is gamma * sqrt(norm of the turnover vector); the norm
    is L1 by default, with L2 available behind ``sqrt_norm``.
    """

    lam: float = 0.0008
    gamma: float = 0.0
    sqrt_norm: str = "l1"

    def __post_init__(self):
        if self.lam < 0 or self.gamma < 0:
            raise ValueError("friction coefficients must be non-negative")
        if self.sqrt_norm not in ("l1", "l2"):
            raise ValueError("sqrt_norm must be 'l1' or 'l2'")


@dataclass(frozen=True)
class EnvConfig:
    tau: float = 0.20
    p_terminal: float = 100.0
    w0: float = 1000.0
    n_assets: int = 1

    def __post_init__(self):
        if not 0 < self.tau < 1:
            raise ValueError("tau must be in (0, 1)")
        if self.p_terminal <= 0:
            raise ValueError("p_terminal must be positive")
        if self.w0 <= 0:
            raise ValueError("w0 must be positive")
        if self.n_assets < 1:
            raise ValueError("n_assets must be positive")


@dataclass(frozen=True)
class PortfolioState:
    weights: tuple[float, ...]
    wealth: float
    step_index: int = 0
    terminated: bool = False

    @classmethod
    def initial(cls, config: EnvConfig) -> "PortfolioState":
        return cls(weights=(0.0,) * config.n_assets, wealth=config.w0)


@dataclass(frozen=True)
class StepOutcome:
    reward: float
    gross_return: float
    friction_cost: float
    principal_loss: float
    terminated: bool


@dataclass(frozen=True)
class MarketData:
    returns: np.ndarray  # shape (T, N), simple per-step returns
    asset_ids: tuple[str, ...]
    step_labels: tuple[str, ...]

    @property
    def n_steps(self) -> int:
        return self.returns.shape[0]

    @property
    def n_assets(self) -> int:
        return self.returns.shape[1]


def friction(delta_w: Sequence[float], params: FrictionParams) -> float:
    """Execution cost of a rebalance: lam * L1(dw) + gamma * sqrt(norm(dw))."""
    dw = np.asarray(delta_w, dtype=float)
    turnover = float(np.abs(dw).sum())
    if params.gamma == 0.0:
        return params.lam * turnover
    inner = turnover if params.sqrt_norm == "l1" else float(np.sqrt((dw * dw).sum()))
    return params.lam * turnover + params.gamma * math.sqrt(inner)


_WEIGHT_SLACK = 1e-9  # tolerate float dust from external policy processes


def _validate_weights(weights: np.ndarray, n_assets: int) -> None:
    if weights.shape != (n_assets,):
        raise InvalidAction(f"expected {n_assets} weights, got shape {weights.shape}")
    if not np.all(np.isfinite(weights)):
        raise InvalidAction("weights must be finite")
    if np.any(weights < -_WEIGHT_SLACK):
        raise InvalidAction("weights must be non-negative (long-only)")
    if float(weights.sum()) > 1.0 + _WEIGHT_SLACK:
        raise InvalidAction("weights must sum to at most 1 (unleveraged)")


def step(
    state: PortfolioState,
    target_weights: Sequence[float],
    returns_t: Sequence[float],
    params: FrictionParams,
    config: EnvConfig,
) -> tuple[PortfolioState, StepOutcome]:
    """Advance one step: trade to the target, realize returns, check the floor.

    Turnover is measured against the drift-adjusted held weights, wealth
    compounds by (1 + net return), and the episode absorbs with reward
    -p_terminal at the first step where principal loss reaches tau.
    """
    if state.terminated:
        raise AbsorbingStateViolation("episode already terminated")
    w = np.asarray(target_weights, dtype=float)
    r = np.asarray(returns_t, dtype=float)
    _validate_weights(w, config.n_assets)
    if r.shape != (config.n_assets,):
        raise DataError(f"expected {config.n_assets} returns, got shape {r.shape}")

    dw = w - np.asarray(state.weights, dtype=float)
    cost = friction(dw, params)
    gross = float(w @ r)
    net = gross - cost
    wealth = state.wealth * (1.0 + net)
    loss = 1.0 - wealth / config.w0
    terminated = loss >= config.tau
    reward = -config.p_terminal if terminated else net

    if terminated:
        next_weights = tuple(float(x) for x in w)
    else:
        # Held weights drift with realized returns before the next rebalance,
        # so the next step's turnover reflects actual trading only.
        drifted = w * (1.0 + r) / (1.0 + gross)
        next_weights = tuple(float(x) for x in drifted)
    new_state = PortfolioState(
        weights=next_weights,
        wealth=wealth,
        step_index=state.step_index + 1,
        terminated=terminated,
    )
    outcome = StepOutcome(
        reward=reward,
        gross_return=gross,
        friction_cost=cost,
        principal_loss=loss,
        terminated=terminated,
    )
    return new_state, outcome


# --------------------------------------------------------------------------
# Data ingestion


def load_returns(source: Union[str, Path, TextIO]) -> MarketData:
    """Load a returns CSV with header ``date,asset_1,...,asset_N``.

    Rows are taken in file order as chronological steps.  Ragged rows,
    non-numeric cells, and returns at or below -1 are rejected.
    """
    if isinstance(source, (str, Path)) and "\n" not in str(source):
        text = Path(source).read_text()
    elif isinstance(source, str):
        text = source
    else:
        text = source.read()
    reader = csv.reader(io.StringIO(text))
    rows = [row for row in reader if row]
    if not rows:
        raise DataError("empty CSV")
    header = [h.strip() for h in rows[0]]
    if len(header) < 2 or header[0].lower() != "date":
        raise DataError("header must be 'date,asset_1,...,asset_N'")
    asset_ids = tuple(header[1:])
    n = len(asset_ids)
    labels: list[str] = []
    values: list[list[float]] = []
    for i, row in enumerate(rows[1:], start=1):
        if len(row) != n + 1:
            raise DataError(f"expected {n + 1} cells, got {len(row)}", row=i)
        labels.append(row[0].strip())
        parsed = []
        for j, cell in enumerate(row[1:], start=1):
            try:
                value = float(cell)
            except ValueError:
                raise DataError(f"non-numeric cell {cell!r}", row=i, col=j) from None
            if not math.isfinite(value) or value <= -1.0:
                raise DataError(f"return {value} out of range (> -1 required)", row=i, col=j)
            parsed.append(value)
        values.append(parsed)
    return MarketData(
        returns=np.asarray(values, dtype=float).reshape(len(values), n),
        asset_ids=asset_ids,
        step_labels=tuple(labels),
    )


def synth_market(
    seed: int,
    n_assets: int,
    n_steps: int,
    vol: float,
    drift: float = 0.0,
) -> MarketData:
    """Seed-deterministic Gaussian returns, clamped above -0.99."""
    if n_assets < 1 or n_steps < 1:
        raise ValueError("n_assets and n_steps must be positive")
    if vol < 0:
        raise ValueError("vol must be non-negative")
    rng = np.random.default_rng(seed)
    returns = drift + vol * rng.standard_normal((n_steps, n_assets))
    returns = np.maximum(returns, -0.99)
    return MarketData(
        returns=returns,
        asset_ids=tuple(f"asset_{i + 1}" for i in range(n_assets)),
        step_labels=tuple(str(t) for t in range(n_steps)),
    )


# --------------------------------------------------------------------------
# Equity export

EQUITY_HEADER = "step,wealth,reward,L_t,terminated"


@dataclass(frozen=True)
class EquityPoint:
    step: int
    wealth: float
    reward: float
    principal_loss: float
    terminated: bool


def equity_to_csv(points: Iterable[EquityPoint]) -> str:
    lines = [EQUITY_HEADER]
    for p in points:
        lines.append(
            f"{p.step},{float(p.wealth)!r},{float(p.reward)!r},"
            f"{float(p.principal_loss)!r},{'true' if p.terminated else 'false'}"
        )
    return "\n".join(lines) + "\n"


def read_equity_csv(source: Union[str, Path, TextIO]) -> list[EquityPoint]:
    if isinstance(source, (str, Path)) and "\n" not in str(source):
        text = Path(source).read_text()
    elif isinstance(source, str):
        text = source
    else:
        text = source.read()
    lines = [ln for ln in text.splitlines() if ln.strip()]
    if not lines or lines[0] != EQUITY_HEADER:
        raise DataError(f"equity CSV must start with header {EQUITY_HEADER!r}")
    points = []
    for i, line in enumerate(lines[1:], start=1):
        cells = line.split(",")
        if len(cells) != 5:
            raise DataError("expected 5 cells", row=i)
        try:
            points.append(EquityPoint(
                step=int(cells[0]),
                wealth=float(cells[1]),
                reward=float(cells[2]),
                principal_loss=float(cells[3]),
                terminated=cells[4] == "true",
            ))
        except ValueError as exc:
            raise DataError(str(exc), row=i) from None
    return points
