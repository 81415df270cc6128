"""Particle functionals Z, Y, V and their martingale checks.

``Z`` weights particles by the principal eigenfunction
``e^{mu x} sin(pi x / L)`` of the killed generator on ``[0, L]``; ``Y``
drops the sine; ``V`` is the martingale of BBM killed at the origin.
All sums use compensated (Kahan) summation.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numba as nb
import numpy as np

from .model import ModelParams


@nb.njit(cache=True)
def kahan_add(total, comp, value):
    y = value - comp
    t = total + y
    comp = (t - total) - y
    return t, comp


@nb.njit(cache=True)
def z_sum(pos, m, mu, L, indicator):
    """Sum of e^{mu x} sin(pi x/L), over x <= L when ``indicator``."""
    total = 0.0
    comp = 0.0
    for i in range(m):
        x = pos[i]
        if indicator and x > L:
            continue
        total, comp = kahan_add(total, comp, math.exp(mu * x) * math.sin(math.pi * x / L))
    return total


@nb.njit(cache=True)
def y_sum(pos, m, mu):
    total = 0.0
    comp = 0.0
    for i in range(m):
        total, comp = kahan_add(total, comp, math.exp(mu * pos[i]))
    return total


@nb.njit(cache=True)
def v_sum(pos, m, mu, t):
    total = 0.0
    comp = 0.0
    decay = (0.5 * mu * mu - 1.0) * t
    for i in range(m):
        x = pos[i]
        total, comp = kahan_add(total, comp, x * math.exp(mu * x + decay))
    return total


def _as_array(positions) -> np.ndarray:
    arr = np.ascontiguousarray(positions, dtype=np.float64)
    return arr.reshape(-1)


def compute_Z(positions: Sequence[float], params: ModelParams, indicator: bool = True) -> float:
    """``sum e^{mu x} sin(pi x / L) 1{x <= L}``.

    ``indicator=False`` gives the variant for systems killed at L, where no
    particle sits above L and the sine is summed as is.
    """
    arr = _as_array(positions)
    return float(z_sum(arr, len(arr), params.mu, params.L, indicator))


def z_indicator(positions, params: ModelParams) -> float:
    return compute_Z(positions, params, indicator=True)


def z_killed(positions, params: ModelParams) -> float:
    return compute_Z(positions, params, indicator=False)


def compute_Y(positions: Sequence[float], params: ModelParams) -> float:
    arr = _as_array(positions)
    return float(y_sum(arr, len(arr), params.mu))


def compute_V(positions: Sequence[float], params: ModelParams, t: float) -> float:
    if t < 0:
        raise ValueError("t must be >= 0")
    arr = _as_array(positions)
    return float(v_sum(arr, len(arr), params.mu, t))


def v_stopped_term(n_stopped: int, level: float, params: ModelParams, t: float) -> float:
    """Contribution of particles frozen at ``level`` to V at time ``t``."""
    return n_stopped * level * math.exp(params.mu * level + (0.5 * params.mu**2 - 1.0) * t)


@dataclass
class FunctionalSample:
    time: float
    Z: float
    Y: float
    V: float
    M: int


def sample_functionals(positions, params: ModelParams, t: float) -> FunctionalSample:
    arr = _as_array(positions)
    return FunctionalSample(
        time=float(t),
        Z=compute_Z(arr, params),
        Y=compute_Y(arr, params),
        V=compute_V(arr, params, t),
        M=len(arr),
    )


class ConfigurationError(ValueError):
    pass


@dataclass
class DriftReport:
    which: str
    times: np.ndarray
    initial: float
    means: np.ndarray
    stderr: np.ndarray
    z_scores: np.ndarray
    one_sided: bool
    n_replicas: int
    extra: dict = field(default_factory=dict)

    def passes(self, threshold: float = 3.0) -> bool:
        if self.one_sided:
            # supermartingale: mean must not rise by more than threshold sigma
            return bool(np.all(self.z_scores < threshold))
        return bool(np.all(np.abs(self.z_scores) < threshold))

    def increments_pass(self, threshold: float = 3.0) -> bool:
        """Nonincreasing means between successive grid times (supermartingale case)."""
        inc = self.extra.get("increment_z")
        return inc is None or bool(np.all(np.asarray(inc) < threshold))


def martingale_report(ensemble, which: str, params: ModelParams) -> DriftReport:
    """Ensemble drift of ``Z_killed_at_L`` or ``V_stopped_at_upper``.

    ``ensemble`` is an :class:`bbmlab.engine.FunctionalEnsemble` whose
    barrier configuration must match ``which``.
    """
    times = np.asarray(ensemble.times, dtype=float)
    if which == "Z_killed_at_L":
        if not (ensemble.upper_mode == "kill" and math.isclose(ensemble.upper, params.L)):
            raise ConfigurationError("Z-bar needs killing at 0 and at L")
        values = ensemble.Z
        initial = float(ensemble.Z0)
        one_sided = False
    elif which == "V_stopped_at_upper":
        if ensemble.upper_mode not in ("stop", "none"):
            raise ConfigurationError("V needs stopping (not killing) at the upper barrier")
        values = ensemble.V_total(params)
        initial = float(ensemble.V0)
        one_sided = True
    else:
        raise ValueError(f"unknown functional {which!r}")
    n = values.shape[0]
    means = values.mean(axis=0)
    stderr = values.std(axis=0, ddof=1) / math.sqrt(n)
    # identical replicas (e.g. at t = 0) leave only round-off in mean and spread
    noise = 1e-12 * max(abs(initial), 1.0)
    stderr = np.where(stderr > noise, stderr, 0.0)
    with np.errstate(divide="ignore", invalid="ignore"):
        z = np.where(stderr > 0, (means - initial) / stderr, 0.0)
    extra = {}
    if one_sided and len(times) > 1:
        diffs = np.diff(values, axis=1)
        d_mean = diffs.mean(axis=0)
        d_se = diffs.std(axis=0, ddof=1) / math.sqrt(n)
        with np.errstate(divide="ignore", invalid="ignore"):
            extra["increment_z"] = np.where(d_se > 0, d_mean / d_se, 0.0)
    return DriftReport(
        which=which,
        times=times,
        initial=initial,
        means=means,
        stderr=stderr,
        z_scores=z,
        one_sided=one_sided,
        n_replicas=n,
        extra=extra,
    )


def write_timeseries_csv(path, rows) -> None:
    """CSV with columns ``time, M, Z, Y, V, replica_id``."""
    with open(path, "w") as fh:
        fh.write("time,M,Z,Y,V,replica_id\n")
        for r in rows:
            fh.write(f"{r[0]!r},{int(r[1])},{r[2]!r},{r[3]!r},{r[4]!r},{int(r[5])}\n")
