"""Noise schedules alpha_t, their aggregates abar_t and rate diagnostics."""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field

import numpy as np

from .targets import MarginalOracle, Target


class ScheduleError(ValueError):
    pass


class SchedulePreconditionWarning(UserWarning):
    pass


@dataclass(frozen=True, eq=False)
class NoiseSchedule:
    """Retention factors for t = 1..T.

    ``beta`` (= 1 - alpha) is the primary array so that small steps keep full
    relative precision; abar is accumulated in log space.
    """

    beta: np.ndarray
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        beta = np.asarray(self.beta, dtype=float).reshape(-1)
        if beta.size < 1:
            raise ScheduleError("schedule needs T >= 1")
        if not np.all((beta > 0.0) & (beta < 1.0)):
            raise ScheduleError("every alpha_t must lie in (0, 1)")
        log_alpha = np.log1p(-beta)
        log_abar = np.cumsum(log_alpha)
        for name, arr in (
            ("beta", beta),
            ("alpha", 1.0 - beta),
            ("log_alpha", log_alpha),
            ("log_abar", log_abar),
            ("abar", np.exp(log_abar)),
            ("one_minus_abar", -np.expm1(log_abar)),
        ):
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)

    @property
    def T(self) -> int:
        return self.beta.size

    def _i(self, t: int) -> int:
        if not 1 <= t <= self.T:
            raise ScheduleError(f"time index {t} outside 1..{self.T}")
        return t - 1

    def alpha_at(self, t: int) -> float:
        return float(self.alpha[self._i(t)])

    def beta_at(self, t: int) -> float:
        return float(self.beta[self._i(t)])

    def sigma2_at(self, t: int) -> float:
        """Variance (1 - alpha_t) / alpha_t of the regular reverse kernel."""
        i = self._i(t)
        return float(self.beta[i] / self.alpha[i])

    def abar_at(self, t: int) -> float:
        return 1.0 if t == 0 else float(self.abar[self._i(t)])

    def one_minus_abar_at(self, t: int) -> float:
        return 0.0 if t == 0 else float(self.one_minus_abar[self._i(t)])

    def oracle(self, target: Target, t: int) -> MarginalOracle:
        return MarginalOracle(target, self.abar_at(t), self.one_minus_abar_at(t))

    def ratio(self, p: int) -> np.ndarray:
        """(1 - alpha_t) / (1 - abar_{t-1})^p for t = 1..T; undefined (nan) at t = 1."""
        out = np.full(self.T, np.nan)
        out[1:] = self.beta[1:] / self.one_minus_abar[:-1] ** p
        return out


def from_beta(beta, **meta) -> NoiseSchedule:
    return NoiseSchedule(np.asarray(beta, dtype=float), dict(meta))


def _step(T: int, c: float) -> float:
    if T < 2:
        raise ScheduleError("T must be at least 2")
    if c <= 0:
        raise ScheduleError("c must be positive")
    r = c * math.log(T) / T
    if r >= 1.0:
        raise ScheduleError(f"step size exceeds unity: c log T / T = {r!r}")
    return r


def make_constant(T: int, c: float, kind: str | None = None) -> NoiseSchedule:
    """1 - alpha_t = c log T / T for every t."""
    r = _step(T, c)
    need = 2.0 if kind == "accelerated" else 1.0
    if c <= need:
        warnings.warn(
            f"constant schedule with c = {c} <= {need}: abar_T may not vanish fast enough for the {kind or 'regular'} sampler",
            SchedulePreconditionWarning,
            stacklevel=2,
        )
    return NoiseSchedule(np.full(T, r), {"name": "constant", "T": T, "c": c})


def make_li(T: int, c: float, delta: float, kind: str | None = None) -> NoiseSchedule:
    """1 - alpha_1 = delta and 1 - alpha_t = (c log T / T) min(delta (1 + c log T / T)^t, 1)."""
    r = _step(T, c)
    if not (math.exp(-c) < delta < 1.0):
        raise ScheduleError(f"delta must lie in (exp(-c), 1) = ({math.exp(-c)!r}, 1), got {delta!r}")
    need = 4.0 if kind == "accelerated" else 2.0
    if c <= need:
        warnings.warn(
            f"Li schedule with c = {c} <= {need} is outside the range covered by the rate guarantees",
            SchedulePreconditionWarning,
            stacklevel=2,
        )
    t = np.arange(1, T + 1)
    # compare in log space so (1 + r)^t never overflows
    growth = np.exp(np.minimum(math.log(delta) + t * math.log1p(r), 0.0))
    beta = r * growth
    beta[0] = delta
    return NoiseSchedule(beta, {"name": "li", "T": T, "c": c, "delta": delta})


def make_schedule(name: str, T: int, c: float, delta: float | None = None, kind: str | None = None) -> NoiseSchedule:
    if name == "constant":
        return make_constant(T, c, kind)
    if name == "li":
        if delta is None:
            raise ScheduleError("the li schedule needs delta")
        return make_li(T, c, delta, kind)
    raise ScheduleError(f"unknown schedule {name!r}")


def diagnostics(s: NoiseSchedule, p: int) -> dict:
    """Maxima over t = 2..T of the step ratio and the step itself, plus abar_T."""
    if p < 1:
        raise ScheduleError("p must be >= 1")
    if s.T < 2:
        raise ScheduleError("diagnostics need T >= 2")
    return {
        "max_ratio": float(np.max(s.ratio(p)[1:])),
        "abar_T": float(s.abar[-1]),
        "max_step": float(np.max(s.beta[1:])),
    }
