"""Model parameters, the two parameterizations, and the seed contract."""
from __future__ import annotations

import json
import math
import numbers
from dataclasses import dataclass
from pathlib import Path

import numpy as np

SQRT2 = math.sqrt(2.0)
_TOL = 1e-12


class DomainError(ValueError):
    """Input outside the mathematical domain of an operation."""


@dataclass(frozen=True)
class ModelParams:
    """Drift ``mu = sqrt(2 - epsilon)`` and barrier scale ``L = pi / sqrt(epsilon)``.

    ``a`` is the drift constant of the limiting CSBP; its true value is not
    known, so it is carried as a free parameter (default 0).
    """

    epsilon: float
    mu: float
    L: float
    a: float = 0.0
    N: int | None = None

    def check(self) -> None:
        assert abs(self.mu**2 + self.epsilon - 2.0) < _TOL
        assert abs(self.L * math.sqrt(self.epsilon) - math.pi) < _TOL * max(1.0, self.L)
        assert self.mu < SQRT2

    @property
    def growth_deficit(self) -> float:
        """``1 - mu^2/2``, the exponential rate lost to the drift."""
        return 1.0 - 0.5 * self.mu**2

    @property
    def z_scale(self) -> float:
        """Normalization ``eps^{1/2} exp(pi sqrt2 eps^{-1/2})`` of Z at the N-scale.

        Equal to ``(pi/L) e^{sqrt2 L}``; returns ``inf`` on overflow.
        """
        try:
            return math.sqrt(self.epsilon) * math.exp(SQRT2 * self.L)
        except OverflowError:
            return math.inf

    @property
    def y_scale(self) -> float:
        try:
            return math.exp(SQRT2 * self.L)
        except OverflowError:
            return math.inf


def params_from_epsilon(epsilon: float, a: float = 0.0) -> ModelParams:
    epsilon = float(epsilon)
    if not (0.0 < epsilon <= 2.0) or math.isnan(epsilon):
        raise DomainError(f"epsilon={epsilon} outside (0, 2]")
    mu = math.sqrt(2.0 - epsilon)
    L = math.pi / math.sqrt(epsilon)
    return ModelParams(epsilon=epsilon, mu=mu, L=L, a=float(a))


def params_from_N(N: int, a: float = 0.0) -> ModelParams:
    """N-parameterization: ``L = (log N + 3 log log N) / sqrt 2``."""
    if isinstance(N, bool) or not isinstance(N, numbers.Integral):
        raise DomainError(f"N must be an integer, got {N!r}")
    if N < 3:
        raise DomainError(f"N={N} < 3")
    logn = math.log(N)
    denom = logn + 3.0 * math.log(logn)
    epsilon = 2.0 * math.pi**2 / denom**2
    if epsilon > 2.0:
        raise DomainError(f"N={N} gives epsilon={epsilon} > 2")
    p = params_from_epsilon(epsilon, a)
    return ModelParams(epsilon=p.epsilon, mu=p.mu, L=p.L, a=p.a, N=int(N))


@dataclass(frozen=True)
class SeedSpec:
    """A replica's random stream: ``(master_seed, stream_id)`` -> PCG64 state.

    Streams are derived with numpy's ``SeedSequence`` using the stream id
    as spawn key, so distinct pairs give independent streams and equal
    pairs give identical ones.
    """

    master_seed: int
    stream_id: int = 0

    def seed_sequence(self) -> np.random.SeedSequence:
        return np.random.SeedSequence(
            int(self.master_seed) & (2**64 - 1), spawn_key=(int(self.stream_id) & (2**64 - 1),)
        )

    def bit_generator(self) -> np.random.PCG64:
        return np.random.PCG64(self.seed_sequence())

    def generator(self) -> np.random.Generator:
        return np.random.Generator(self.bit_generator())

    def child(self, stream_id: int) -> "SeedSpec":
        return SeedSpec(self.master_seed, stream_id)


def load_config(path) -> dict:
    """Read a JSON or TOML config with exactly one of ``epsilon`` / ``N``."""
    path = Path(path)
    text = path.read_text()
    if path.suffix.lower() == ".toml":
        try:
            import tomllib
        except ModuleNotFoundError:  # python < 3.11
            import tomli as tomllib
        cfg = tomllib.loads(text)
    else:
        cfg = json.loads(text)
    return cfg


def params_from_config(cfg: dict) -> ModelParams:
    has_eps = "epsilon" in cfg
    has_n = "N" in cfg
    if has_eps == has_n:
        raise DomainError("config must contain exactly one of 'epsilon' or 'N'")
    a = float(cfg.get("a", 0.0))
    if has_eps:
        return params_from_epsilon(cfg["epsilon"], a)
    return params_from_N(cfg["N"], a)
