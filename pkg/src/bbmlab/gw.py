"""Galton-Watson extinction probabilities and the second-moment survival bound."""
from __future__ import annotations

import json
import math
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .model import DomainError


@dataclass(frozen=True)
class OffspringDistribution:
    """Finite support ``probs[k] = P(X = k)`` or a named family.

    Families: ``poisson`` (``param`` = mean) and ``geometric`` on
    ``{0, 1, ...}`` (``param`` = success probability, ``P(X=k) = p (1-p)^k``).
    """

    probs: Optional[tuple] = None
    family: Optional[str] = None
    param: Optional[float] = None

    def __post_init__(self):
        if (self.probs is None) == (self.family is None):
            raise DomainError("give either probs or a family")
        if self.probs is not None:
            p = np.asarray(self.probs, dtype=float)
            if p.ndim != 1 or len(p) == 0 or np.any(p < 0) or abs(p.sum() - 1.0) > 1e-12:
                raise DomainError("probs must be nonnegative and sum to 1")
            object.__setattr__(self, "probs", tuple(float(v) for v in p))
        elif self.family == "poisson":
            if not (self.param is not None and self.param >= 0):
                raise DomainError("poisson mean must be >= 0")
        elif self.family == "geometric":
            if not (self.param is not None and 0 < self.param <= 1):
                raise DomainError("geometric parameter must lie in (0, 1]")
        else:
            raise DomainError(f"unknown family {self.family!r}")

    @classmethod
    def finite(cls, probs: Sequence[float]) -> "OffspringDistribution":
        return cls(probs=tuple(probs))

    @classmethod
    def poisson(cls, mean: float) -> "OffspringDistribution":
        return cls(family="poisson", param=float(mean))

    @classmethod
    def geometric(cls, p: float) -> "OffspringDistribution":
        return cls(family="geometric", param=float(p))

    def pgf(self, s: float) -> float:
        if self.probs is not None:
            return float(np.polynomial.polynomial.polyval(s, self.probs))
        if self.family == "poisson":
            return math.exp(self.param * (s - 1.0))
        p = self.param
        return p / (1.0 - (1.0 - p) * s)

    @property
    def p1(self) -> float:
        if self.probs is not None:
            return self.probs[1] if len(self.probs) > 1 else 0.0
        if self.family == "poisson":
            return self.param * math.exp(-self.param)
        return self.param * (1.0 - self.param)

    @property
    def mean(self) -> float:
        if self.probs is not None:
            return float(np.dot(np.arange(len(self.probs)), self.probs))
        if self.family == "poisson":
            return self.param
        return (1.0 - self.param) / self.param

    @property
    def fm2(self) -> float:
        """Factorial second moment ``E[X(X-1)]``."""
        if self.probs is not None:
            k = np.arange(len(self.probs))
            return float(np.dot(k * (k - 1), self.probs))
        if self.family == "poisson":
            return self.param**2
        q = 1.0 - self.param
        return 2.0 * q * q / self.param**2

    def sample_generation(self, sizes: np.ndarray, rng: np.random.Generator) -> np.ndarray:
        """Next-generation sizes for populations of the given sizes."""
        sizes = np.asarray(sizes, dtype=np.int64)
        if self.probs is not None:
            counts = rng.multinomial(sizes, self.probs)
            return counts @ np.arange(len(self.probs))
        if self.family == "poisson":
            return rng.poisson(self.param * sizes)
        # sum of n geometrics on {0,1,...} is negative binomial
        out = np.zeros_like(sizes)
        pos = sizes > 0
        out[pos] = rng.negative_binomial(sizes[pos], self.param)
        return out

    def to_json(self) -> dict:
        if self.probs is not None:
            return {"probs": list(self.probs)}
        return {"family": self.family, "param": self.param}

    @classmethod
    def from_json(cls, d: dict) -> "OffspringDistribution":
        if "probs" in d:
            return cls.finite(d["probs"])
        return cls(family=d["family"], param=d["param"])


def gw_extinction(dist: OffspringDistribution, tol: float = 1e-12, max_iter: int = 100_000) -> float:
    """Smallest fixed point of the generating function on ``[0, 1]``.

    Monotone iteration from 0 with Aitken extrapolation.  An extrapolated
    point is kept only if it stays below the fixed point (``g(s) >= s``), so
    the iteration cannot jump to the root at 1.  Subcritical and critical
    laws (other than ``X = 1``) go extinct almost surely.
    """
    if dist.p1 >= 1.0:
        return 0.0
    if dist.mean <= 1.0:
        return 1.0
    g = dist.pgf
    s = 0.0
    for _ in range(max_iter):
        s1 = g(s)
        s2 = g(s1)
        denom = s2 - 2.0 * s1 + s
        cand = s2
        if denom != 0.0:
            acc = s - (s1 - s) ** 2 / denom
            if s2 < acc < 1.0 and g(acc) >= acc:
                cand = acc
        if abs(g(cand) - cand) < tol and abs(cand - s) < tol:
            return cand
        s = cand
    raise RuntimeError("extinction iteration did not converge")


def survival_lower_bound(dist: OffspringDistribution) -> float:
    """``2 (m - 1) / E[X(X-1)]``, a lower bound on ``1 - q`` (vacuous when <= 0)."""
    fm2 = dist.fm2
    if fm2 <= 0:
        raise DomainError("E[X(X-1)] = 0: bound undefined for laws on {0, 1}")
    return 2.0 * (dist.mean - 1.0) / fm2


def random_corpus(n: int, rng: np.random.Generator, k_max: int = 12) -> list[OffspringDistribution]:
    """Random finite-support laws with sparse-ish Dirichlet weights."""
    out = []
    for _ in range(n):
        k = int(rng.integers(1, k_max + 1))
        w = rng.dirichlet(np.full(k + 1, 0.5))
        w /= w.sum()
        out.append(OffspringDistribution.finite(w))
    return out


def simulate_extinction(dist: OffspringDistribution, trees: int, generations: int,
                        rng: np.random.Generator, cap: int = 10_000) -> float:
    """Fraction of trees extinct by ``generations``.

    Populations above ``cap`` are frozen as survivors: their extinction
    chance ``q^cap`` is negligible for the laws tested here.
    """
    sizes = np.ones(trees, dtype=np.int64)
    for _ in range(generations):
        active = (sizes > 0) & (sizes < cap)
        if not active.any():
            break
        sizes[active] = dist.sample_generation(sizes[active], rng)
    return float(np.mean(sizes == 0))


def save_corpus(path, corpus: list[OffspringDistribution]) -> None:
    with open(path, "w") as fh:
        json.dump([d.to_json() for d in corpus], fh)


def load_corpus(path) -> list[OffspringDistribution]:
    with open(path) as fh:
        return [OffspringDistribution.from_json(d) for d in json.load(fh)]
