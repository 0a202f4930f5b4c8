"""Time-varying scalars of training.

The interpolation ratio follows an exponential curve that rises from a lower
to an upper bound over one period and then restarts.  The unsupervised weight
ramps up exponentially and the learning rate decays polynomially.
"""
from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass
from enum import Enum


class InvalidBoundsError(ValueError):
    """Raised when curve bounds cannot be solved for."""


class Curve(str, Enum):
    """Named interpolation-ratio curves over one period.

    ``EXP`` is the default exponential curve.  The others exist for ablation
    runs: ``LINEAR`` rises uniformly, ``STEP`` climbs in four flat stages,
    ``EARLY`` jumps to high ratios almost at once, ``LATE`` stays low for most
    of the cycle and spikes at the end, ``CONSTANT`` ignores the iteration.
    """

    EXP = "exp"
    LINEAR = "linear"
    STEP = "step"
    EARLY = "early"
    LATE = "late"
    CONSTANT = "constant"


@dataclass(frozen=True)
class ScheduleParams:
    period_T: int
    lower_bound: float
    upper_bound: float
    gamma: float
    S: float
    curve: Curve = Curve.EXP
    constant_value: float = 0.5

    def cycle(self, iteration: int) -> int:
        """Index of the cycle that ``iteration`` falls in."""
        return iteration // self.period_T


@dataclass(frozen=True)
class RampParams:
    max_iter: int
    base_weight: float = 0.1
    lr_exponent: float = 0.9
    lambda_squared: bool = False

    def __post_init__(self):
        if self.max_iter <= 0:
            raise ValueError(f"max_iter must be positive, got {self.max_iter}")
        if self.base_weight <= 0:
            raise ValueError(f"base_weight must be positive, got {self.base_weight}")


def solve_curve(period_T: int, lower: float, upper: float,
                curve: Curve | str = Curve.EXP, constant_value: float = 0.5) -> ScheduleParams:
    """Solve ``exp(t/S) + gamma`` for ``alpha(0) = lower`` and ``alpha(T) = upper``."""
    if period_T < 2:
        raise InvalidBoundsError(f"period must be >= 2, got {period_T}")
    if not 0 < lower < upper <= 1:
        raise InvalidBoundsError(f"need 0 < lower < upper <= 1, got ({lower}, {upper})")
    gamma = lower - 1.0
    log_span = math.log(upper - gamma)
    if log_span <= 0:
        raise InvalidBoundsError(f"upper - gamma must exceed 1, got {upper - gamma}")
    return ScheduleParams(period_T=period_T, lower_bound=lower, upper_bound=upper,
                          gamma=gamma, S=period_T / log_span, curve=Curve(curve),
                          constant_value=constant_value)


def alpha_at(p: ScheduleParams, iteration: int) -> float:
    """Interpolation ratio at ``iteration``; each cycle is the half-open [0, T)."""
    t = iteration % p.period_T
    if p.curve is Curve.EXP:
        return math.exp(t / p.S) + p.gamma

    u = t / p.period_T
    span = p.upper_bound - p.lower_bound
    if p.curve is Curve.LINEAR:
        shape = u
    elif p.curve is Curve.STEP:
        shape = math.floor(4 * u) / 3
    elif p.curve is Curve.EARLY:
        shape = 1.0 - (1.0 - u) ** 8
    elif p.curve is Curve.LATE:
        shape = u ** 8
    else:
        return p.constant_value
    return p.lower_bound + span * shape


def lambda_at(r: RampParams, iteration: int) -> float:
    """Unsupervised loss weight ``w * exp(-5 (1 - t/max))``; iterations past the end are clamped."""
    t = min(max(iteration, 0), r.max_iter)
    x = 1.0 - t / r.max_iter
    if r.lambda_squared:
        x = x * x
    return r.base_weight * math.exp(-5.0 * x)


def lr_factor_at(r: RampParams, iteration: int) -> float:
    t = min(max(iteration, 0), r.max_iter)
    return (1.0 - t / r.max_iter) ** r.lr_exponent


def schedule_rows(p: ScheduleParams, r: RampParams, iters: int):
    """Yield ``(iter, alpha, lambda, lr_factor)`` for ``iters`` consecutive steps."""
    for i in range(iters):
        yield i, alpha_at(p, i), lambda_at(r, i), lr_factor_at(r, i)


def dump_csv(p: ScheduleParams, r: RampParams, iters: int, out=None) -> str:
    buf = out if out is not None else io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["iter", "alpha", "lambda", "lr_factor"])
    for i, a, lam, lr in schedule_rows(p, r, iters):
        writer.writerow([i, repr(a), repr(lam), repr(lr)])
    return buf.getvalue() if out is None else ""
