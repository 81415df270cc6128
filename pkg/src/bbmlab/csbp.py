"""Neveu-type CSBP with mechanism ``psi(u) = a u + 2 pi^2 u log u``.

The Laplace flow has a closed form, so paths are sampled exactly on any
time grid: over a step ``s`` the transition from mass ``z`` is a one-sided
stable law of index ``beta = exp(-2 pi^2 s)``.  Paths are stored in log
space because the process drifts to 0 or to infinity doubly exponentially
fast and leaves double range within a few time units.
"""
from __future__ import annotations

import enum
import json
import math
from dataclasses import dataclass

import numpy as np

from .model import DomainError

TWO_PI2 = 2.0 * math.pi**2
BETA_MERGE = 1.0 - 1e-12


@dataclass(frozen=True)
class CsbpParams:
    a: float = 0.0

    @property
    def alpha_root(self) -> float:
        """Largest root of psi."""
        return math.exp(-self.a / TWO_PI2)

    def psi(self, u):
        u = np.asarray(u, dtype=float)
        return self.a * u + TWO_PI2 * u * np.log(u)


def laplace_flow(lam, t, params: CsbpParams):
    """``u_t(lam)`` with ``E[exp(-lam Z_t) | Z_0 = x] = exp(-x u_t(lam))``."""
    lam = np.asarray(lam, dtype=float)
    t = np.asarray(t, dtype=float)
    if np.any(lam <= 0):
        raise DomainError("lambda must be positive")
    if np.any(t < 0):
        raise DomainError("t must be >= 0")
    shift = params.a / TWO_PI2
    out = np.exp(np.exp(-TWO_PI2 * t) * (np.log(lam) + shift) - shift)
    return float(out) if out.ndim == 0 else out


def extinction_prob(x: float, params: CsbpParams) -> float:
    if x < 0:
        raise DomainError("x must be >= 0")
    return math.exp(-x * params.alpha_root)


def log_positive_stable(beta: float, size, rng: np.random.Generator) -> np.ndarray:
    """Logs of positive stable variates with ``E exp(-lam S) = exp(-lam^beta)``.

    Kanter's trigonometric representation, evaluated in log space so that
    small indices (long steps) do not overflow.
    """
    if not (0.0 < beta <= 1.0):
        raise DomainError("stable index must lie in (0, 1]")
    if beta == 1.0:
        return np.zeros(size)
    u = rng.uniform(0.0, math.pi, size)
    e = rng.standard_exponential(size)
    b1 = 1.0 - beta
    return (
        np.log(np.sin(beta * u))
        - np.log(np.sin(u)) / beta
        + (b1 / beta) * (np.log(np.sin(b1 * u)) - np.log(e))
    )


@dataclass
class CsbpPath:
    times: np.ndarray
    log_values: np.ndarray
    z0: float

    @property
    def values(self) -> np.ndarray:
        with np.errstate(over="ignore", under="ignore"):
            return np.exp(self.log_values)


def _merged_grid(times) -> np.ndarray:
    times = np.asarray(times, dtype=float)
    if times.ndim != 1 or len(times) == 0 or times[0] != 0.0:
        raise DomainError("time grid must start at 0")
    if np.any(np.diff(times) <= 0):
        raise DomainError("time grid must be strictly increasing")
    keep = [0]
    for i in range(1, len(times)):
        if math.exp(-TWO_PI2 * (times[i] - times[keep[-1]])) <= BETA_MERGE:
            keep.append(i)
    if keep[-1] != len(times) - 1:
        # degenerate last step folds into the previous one
        keep[-1] = len(times) - 1
    return times[keep]


def sample_log_paths(z0: float, times, params: CsbpParams, n_paths: int,
                     rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """``(grid, log Z)`` for ``n_paths`` independent paths, shape ``(n_paths, len(grid))``.

    Steps whose stable index rounds to 1 are merged with the next one.
    """
    if z0 <= 0:
        raise DomainError("z0 must be positive")
    grid = _merged_grid(times)
    log_alpha = math.log(params.alpha_root)
    out = np.empty((n_paths, len(grid)))
    out[:, 0] = math.log(z0)
    for j in range(1, len(grid)):
        beta = math.exp(-TWO_PI2 * (grid[j] - grid[j - 1]))
        # Z' = c^{1/beta} S with c = z alpha^{1 - beta}
        log_c = out[:, j - 1] + (1.0 - beta) * log_alpha
        out[:, j] = log_c / beta + log_positive_stable(beta, n_paths, rng)
    return grid, out


def sample_path(z0: float, times, params: CsbpParams, rng: np.random.Generator) -> CsbpPath:
    grid, logs = sample_log_paths(z0, times, params, 1, rng)
    return CsbpPath(times=grid, log_values=logs[0], z0=float(z0))


class Limit(enum.Enum):
    TO_ZERO = "ToZero"
    TO_INFINITY = "ToInfinity"
    UNDECIDED = "Undecided"


def classify_log(final_log, lo: float = 1e-6, hi: float = 1e6) -> np.ndarray:
    """Vectorized classifier on final log values; returns codes -1, +1 or 0."""
    if not lo < hi:
        raise DomainError("need lo < hi")
    final_log = np.asarray(final_log, dtype=float)
    return np.where(final_log < math.log(lo), -1, np.where(final_log > math.log(hi), 1, 0))


def limit_classifier(path: CsbpPath, thresholds=(1e-6, 1e6)) -> Limit:
    code = int(classify_log(path.log_values[-1], *thresholds))
    return {-1: Limit.TO_ZERO, 1: Limit.TO_INFINITY, 0: Limit.UNDECIDED}[code]


def write_paths_csv(path, paths: list[CsbpPath], params: CsbpParams) -> None:
    """Long-format CSV ``time,value,path_id`` plus a JSON sidecar with the parameters."""
    with open(path, "w") as fh:
        fh.write("time,value,path_id\n")
        for k, p in enumerate(paths):
            for t, v in zip(p.times, p.values):
                fh.write(f"{t!r},{float(v)!r},{k}\n")
    sidecar = {"a": params.a, "alpha_root": params.alpha_root,
               "z0": [p.z0 for p in paths], "n_paths": len(paths)}
    with open(str(path) + ".json", "w") as fh:
        json.dump(sidecar, fh, indent=2, sort_keys=True)
