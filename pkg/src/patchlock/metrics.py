"""Performance statistics: Sharpe, drawdown, information ratio, OLS alpha/beta.

Sample-variance conventions throughout (n-1 for spreads, n-2 residual dof in
the regression) so the t-statistics follow the usual inference setup.  The
two-sided alpha p-value comes from the regularized incomplete beta form of
the t CDF.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
from scipy import special

from .errors import PatchlockError


class DegenerateSeries(PatchlockError):
    """The statistic is undefined for this input (zero spread, too short)."""


class ShapeError(PatchlockError):
    """Series lengths do not line up."""


TRADING_PERIODS_PER_YEAR = 252


@dataclass(frozen=True)
class ReturnSeries:
    """Ordered simple per-step returns plus the annualization basis."""

    values: tuple[float, ...]
    periods_per_year: int = TRADING_PERIODS_PER_YEAR

    def __post_init__(self):
        if not self.values:
            raise ValueError("return series must be non-empty")
        if any(v <= -1.0 for v in self.values):
            raise ValueError("simple returns must stay above -1")
        if self.periods_per_year < 1:
            raise ValueError("periods_per_year must be positive")

    @classmethod
    def from_equity(
        cls, wealth: Sequence[float], periods_per_year: int = TRADING_PERIODS_PER_YEAR
    ) -> "ReturnSeries":
        if len(wealth) < 2:
            raise DegenerateSeries("need at least two equity points")
        if any(w <= 0 for w in wealth):
            raise ValueError("equity values must be positive")
        values = tuple(wealth[i] / wealth[i - 1] - 1.0 for i in range(1, len(wealth)))
        return cls(values=values, periods_per_year=periods_per_year)


def sharpe(series: ReturnSeries, risk_free_per_step: float = 0.0) -> float:
    """Annualized Sharpe ratio: mean excess / sample std * sqrt(periods)."""
    x = np.asarray(series.values, dtype=float) - risk_free_per_step
    if x.size < 2:
        raise DegenerateSeries("need at least two returns")
    std = float(x.std(ddof=1))
    if std == 0.0:
        raise DegenerateSeries("zero return variance")
    return float(x.mean()) / std * math.sqrt(series.periods_per_year)


def max_drawdown(equity: Sequence[float]) -> float:
    """Worst peak-to-trough decline as a non-positive fraction."""
    w = np.asarray(equity, dtype=float)
    if w.size == 0:
        raise ValueError("equity series must be non-empty")
    if np.any(w <= 0):
        raise ValueError("equity values must be positive")
    peaks = np.maximum.accumulate(w)
    return float(np.min(w / peaks - 1.0))


def information_ratio(portfolio: ReturnSeries, benchmark: ReturnSeries) -> float:
    """Annualized active return over tracking error."""
    p = np.asarray(portfolio.values, dtype=float)
    b = np.asarray(benchmark.values, dtype=float)
    if p.shape != b.shape:
        raise ShapeError(f"length mismatch: {p.size} vs {b.size}")
    active = p - b
    if active.size < 2:
        raise DegenerateSeries("need at least two returns")
    te = float(active.std(ddof=1))
    if te == 0.0:
        raise DegenerateSeries("zero tracking error")
    return float(active.mean()) / te * math.sqrt(portfolio.periods_per_year)


@dataclass(frozen=True)
class RegressionResult:
    beta: float
    alpha_daily: float
    alpha_annualized: float
    t_alpha: float
    t_beta: float
    p_alpha: float


def _t_two_sided_p(t: float, dof: int) -> float:
    if math.isinf(t):
        return 0.0
    if t == 0.0:
        return 1.0
    return float(special.betainc(dof / 2.0, 0.5, dof / (dof + t * t)))


def _t_stat(coef: float, se: float) -> float:
    if se > 0.0:
        return coef / se
    return 0.0 if coef == 0.0 else math.copysign(math.inf, coef)


def ols_alpha_beta(portfolio: ReturnSeries, benchmark: ReturnSeries) -> RegressionResult:
    """Simple OLS of portfolio returns on benchmark returns.

    Exact-fit inputs yield zero standard errors; the t-statistics are then
    reported as 0 or signed infinity rather than erroring out.
    """
    y = np.asarray(portfolio.values, dtype=float)
    x = np.asarray(benchmark.values, dtype=float)
    if y.shape != x.shape:
        raise ShapeError(f"length mismatch: {y.size} vs {x.size}")
    n = y.size
    if n < 3:
        raise DegenerateSeries("need at least three observations")
    x_mean = float(x.mean())
    y_mean = float(y.mean())
    sxx = float(((x - x_mean) ** 2).sum())
    if sxx == 0.0:
        raise DegenerateSeries("benchmark has zero variance")
    sxy = float(((x - x_mean) * (y - y_mean)).sum())
    beta = sxy / sxx
    alpha = y_mean - beta * x_mean
    resid = y - alpha - beta * x
    s2 = float((resid ** 2).sum()) / (n - 2)
    se_beta = math.sqrt(s2 / sxx)
    se_alpha = math.sqrt(s2 * (1.0 / n + x_mean * x_mean / sxx))
    t_alpha = _t_stat(alpha, se_alpha)
    t_beta = _t_stat(beta, se_beta)
    return RegressionResult(
        beta=beta,
        alpha_daily=alpha,
        alpha_annualized=alpha * portfolio.periods_per_year,
        t_alpha=t_alpha,
        t_beta=t_beta,
        p_alpha=_t_two_sided_p(t_alpha, n - 2),
    )


def annualized_return(series: ReturnSeries) -> float:
    growth = float(np.prod(1.0 + np.asarray(series.values, dtype=float)))
    return growth ** (series.periods_per_year / len(series.values)) - 1.0


def summary(
    portfolio: ReturnSeries,
    equity: Sequence[float],
    benchmark: Optional[ReturnSeries] = None,
    risk_free_per_step: float = 0.0,
) -> dict:
    """Headline metric rows as a JSON-ready mapping.

    Benchmark-relative rows are present only when a benchmark is supplied.
    """
    out: dict = {
        "trading_days": len(portfolio.values),
        "annualized_return": annualized_return(portfolio),
        "sharpe_ratio": sharpe(portfolio, risk_free_per_step),
        "max_drawdown": max_drawdown(equity),
    }
    if benchmark is not None:
        reg = ols_alpha_beta(portfolio, benchmark)
        out.update({
            "benchmark_return": annualized_return(benchmark),
            "information_ratio": information_ratio(portfolio, benchmark),
            "market_beta": reg.beta,
            "idiosyncratic_alpha": reg.alpha_annualized,
            "alpha_t_stat": reg.t_alpha,
            "alpha_p_value": reg.p_alpha,
        })
    return out
