"""Bolthausen-Sznitman coalescent on n labels and genealogical partitions of BBM samples."""
from __future__ import annotations

import json
import math
from collections import Counter
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from scipy import stats

from .model import DomainError

DEFAULT_TIME_RESCALE = 1.0 / (math.pi**2 * math.sqrt(2.0))
MAX_N = 12

Partition = tuple  # tuple of sorted tuples of labels 1..n, sorted by first member


def canonical(blocks) -> Partition:
    return tuple(sorted(tuple(sorted(int(v) for v in b)) for b in blocks))


def singletons(n: int) -> Partition:
    return tuple((i,) for i in range(1, n + 1))


def refines(fine: Partition, coarse: Partition) -> bool:
    """True when every block of ``fine`` sits inside a block of ``coarse``."""
    owner = {}
    for j, b in enumerate(coarse):
        for v in b:
            owner[v] = j
    return all(len({owner[v] for v in b}) == 1 for b in fine)


def bs_rate(b: int, k: int) -> float:
    """Rate at which one given set of ``k`` among ``b`` blocks merges."""
    if not (2 <= k <= b):
        raise DomainError("need 2 <= k <= b")
    return math.exp(math.lgamma(k - 1) + math.lgamma(b - k + 1) - math.lgamma(b))


def merge_size_weights(b: int) -> np.ndarray:
    """Total rate of ``k``-mergers from ``b`` blocks, indexed by ``k = 2..b``."""
    return np.array([math.comb(b, k) * bs_rate(b, k) for k in range(2, b + 1)])


@dataclass
class PartitionProcess:
    n: int
    events: list  # [(time, Partition)], first event at time 0
    source: str = "bolthausen_sznitman"

    def __post_init__(self):
        if not self.events:
            raise DomainError("a partition process needs at least its initial state")
        labels = set(range(1, self.n + 1))
        prev_t, prev = None, None
        for t, part in self.events:
            if {v for b in part for v in b} != labels or sum(map(len, part)) != self.n:
                raise DomainError(f"not a partition of 1..{self.n}: {part}")
            if prev is not None:
                if t < prev_t:
                    raise DomainError("event times must be nondecreasing")
                if len(part) >= len(prev) or not refines(prev, part):
                    raise DomainError("partitions must strictly coarsen over time")
            prev_t, prev = t, part

    def at(self, s: float) -> Partition:
        part = self.events[0][1]
        for t, p in self.events:
            if t > s:
                break
            part = p
        return part

    def block_count(self, s: float) -> int:
        return len(self.at(s))

    def first_merge_time(self) -> float:
        """Time of the first coalescence, ``inf`` if none was observed."""
        return self.events[1][0] if len(self.events) > 1 else math.inf

    def relabel(self, perm: Sequence[int]) -> "PartitionProcess":
        """Apply the label map ``i -> perm[i-1]``."""
        ev = [(t, canonical([[perm[v - 1] for v in b] for b in part])) for t, part in self.events]
        return PartitionProcess(self.n, ev, self.source)

    def to_json(self) -> dict:
        return {
            "n": self.n,
            "events": [[t, [list(b) for b in part]] for t, part in self.events],
            "source": self.source,
        }

    @classmethod
    def from_json(cls, d: dict) -> "PartitionProcess":
        return cls(d["n"], [(float(t), canonical(p)) for t, p in d["events"]], d["source"])


def bs_sample(n: int, horizon: float, rng: np.random.Generator) -> PartitionProcess:
    """One Bolthausen-Sznitman path on ``{1..n}`` up to ``horizon``.

    With ``b`` blocks the merger size ``k`` is drawn from its total rate
    ``C(b, k) lambda_{b,k}`` and the merging blocks uniformly among
    ``k``-subsets, which is equivalent to racing every subset.
    """
    if n < 2 or n > MAX_N:
        raise DomainError(f"n must lie in [2, {MAX_N}]")
    blocks = [[i] for i in range(1, n + 1)]
    t = 0.0
    events = [(0.0, canonical(blocks))]
    while len(blocks) > 1:
        b = len(blocks)
        w = merge_size_weights(b)
        total = w.sum()
        t += rng.exponential(1.0 / total)
        if t > horizon:
            break
        k = 2 + int(rng.choice(len(w), p=w / total))
        pick = sorted(rng.choice(b, size=k, replace=False).tolist())
        merged = [v for i in pick for v in blocks[i]]
        blocks = [blk for i, blk in enumerate(blocks) if i not in pick] + [merged]
        events.append((t, canonical(blocks)))
    return PartitionProcess(n, events, "bolthausen_sznitman")


def bs_ensemble(n: int, horizon: float, size: int, rng: np.random.Generator) -> list[PartitionProcess]:
    return [bs_sample(n, horizon, rng) for _ in range(size)]


def _ancestor(parent, birth, pid: int, time: float) -> int:
    # lifetimes are (birth, death]: at a branch instant the parent is the one alive
    p = int(pid)
    while birth[p] >= time and parent[p] >= 0:
        p = int(parent[p])
    return p


def extract_partition(genealogy, sampled_ids: Sequence[int], s: float, T: float) -> Partition:
    """Group samples by their ancestor alive at time ``T - s``.

    Labels ``1..n`` follow the order of ``sampled_ids``.
    """
    parent = genealogy.view("parent")
    birth = genealogy.view("birth")
    death = genealogy.view("death")
    if not (0.0 <= s <= T):
        raise DomainError("need 0 <= s <= T")
    for pid in sampled_ids:
        if not (0 <= pid < len(parent)) or birth[pid] > T or (np.isfinite(death[pid]) and death[pid] <= T):
            raise DomainError(f"particle {pid} is not alive at time {T}")
    return _group(parent, birth, sampled_ids, T - s)


def _group(parent, birth, sampled_ids, time: float) -> Partition:
    groups: dict[int, list[int]] = {}
    for label, pid in enumerate(sampled_ids, start=1):
        groups.setdefault(_ancestor(parent, birth, pid, time), []).append(label)
    return canonical(groups.values())


def genealogy_process(genealogy, sampled_ids: Sequence[int], T: float, time_unit: float = 1.0,
                      source: str = "empirical_bbm") -> PartitionProcess:
    """The full backward partition process of the samples.

    Event times are backward times ``T - tau`` over ``time_unit``, where
    ``tau`` runs over branch times on the sampled lineages.
    """
    parent = genealogy.view("parent")
    birth = genealogy.view("birth")
    n = len(sampled_ids)
    extract_partition(genealogy, sampled_ids, 0.0, T)
    taus = set()
    for pid in sampled_ids:
        p = int(pid)
        while parent[p] >= 0:
            taus.add(float(birth[p]))
            p = int(parent[p])
    events = [(0.0, singletons(n))]
    for tau in sorted(taus, reverse=True):
        part = _group(parent, birth, sampled_ids, tau)
        if len(part) < len(events[-1][1]):
            events.append(((T - tau) / time_unit, part))
    return PartitionProcess(n, events, source)


@dataclass
class ComparisonReport:
    n: int
    time_rescale: float
    first_merge_ks: float
    first_merge_pvalue: float
    s_grid: np.ndarray
    mean_blocks_empirical: np.ndarray
    mean_blocks_reference: np.ndarray
    block_count_distance: float
    block_count_band: float
    partition_s: Optional[float]
    partition_tv: Optional[float]
    partition_tv_band: Optional[float]
    n_empirical: int
    n_reference: int
    extra: dict = field(default_factory=dict)

    def within_noise(self) -> bool:
        ok = self.first_merge_pvalue > 0.01 and self.block_count_distance <= self.block_count_band
        if self.partition_tv is not None:
            ok = ok and self.partition_tv <= self.partition_tv_band
        return bool(ok)

    def to_json(self) -> dict:
        d = dict(self.__dict__)
        for k, v in d.items():
            if isinstance(v, np.ndarray):
                d[k] = v.tolist()
        return d


def _first_merges(ens, scale: float) -> np.ndarray:
    return np.array([p.first_merge_time() * scale for p in ens])


def _partition_tv(a: list, b: list) -> float:
    ca, cb = Counter(a), Counter(b)
    keys = set(ca) | set(cb)
    return 0.5 * sum(abs(ca[k] / len(a) - cb[k] / len(b)) for k in keys)


def compare_coalescents(
    empirical: list[PartitionProcess],
    n: int,
    time_rescale: float = DEFAULT_TIME_RESCALE,
    reference: Optional[list[PartitionProcess]] = None,
    rng: Optional[np.random.Generator] = None,
    s_grid: Optional[Sequence[float]] = None,
    partition_s: Optional[float] = None,
    n_resamples: int = 200,
) -> ComparisonReport:
    """Distances between an ensemble and Bolthausen-Sznitman paths.

    Empirical time ``s`` is compared with reference time ``s * time_rescale``.
    When ``reference`` is omitted an ensemble of the same size is sampled.
    Noise bands are 99th percentiles of the same distance under random
    splits of the pooled ensembles.
    """
    if not empirical:
        raise DomainError("empirical ensemble is empty")
    if time_rescale <= 0:
        raise DomainError("time_rescale must be positive")
    if any(p.n != n for p in empirical) or (reference and any(p.n != n for p in reference)):
        raise DomainError("sample size mismatch")
    rng = rng if rng is not None else np.random.default_rng(0)
    if s_grid is None:
        s_grid = np.linspace(0.0, 3.0 / time_rescale, 31)
    s_grid = np.asarray(s_grid, dtype=float)
    if reference is None:
        reference = bs_ensemble(n, float(s_grid.max()) * time_rescale, len(empirical), rng)
    if not reference:
        raise DomainError("reference ensemble is empty")

    fe = _first_merges(empirical, time_rescale)
    fr = _first_merges(reference, 1.0)
    ks = stats.ks_2samp(fe, fr)

    be = np.array([[p.block_count(s) for s in s_grid] for p in empirical], dtype=float)
    br = np.array([[p.block_count(s * time_rescale) for s in s_grid] for p in reference], dtype=float)
    dist = float(np.max(np.abs(be.mean(0) - br.mean(0))))
    pooled = np.vstack([be, br])
    ne = len(be)
    band_d = []
    for _ in range(n_resamples):
        idx = rng.permutation(len(pooled))
        band_d.append(np.max(np.abs(pooled[idx[:ne]].mean(0) - pooled[idx[ne:]].mean(0))))
    band = float(np.quantile(band_d, 0.99))

    tv = tv_band = None
    if n <= 5:
        if partition_s is None:
            partition_s = float(np.median(s_grid))
        pe = [p.at(partition_s) for p in empirical]
        pr = [p.at(partition_s * time_rescale) for p in reference]
        tv = _partition_tv(pe, pr)
        allp = pe + pr
        tvs = []
        for _ in range(n_resamples):
            idx = rng.permutation(len(allp))
            tvs.append(_partition_tv([allp[i] for i in idx[:ne]], [allp[i] for i in idx[ne:]]))
        tv_band = float(np.quantile(tvs, 0.99))
    else:
        partition_s = None

    return ComparisonReport(
        n=n,
        time_rescale=time_rescale,
        first_merge_ks=float(ks.statistic),
        first_merge_pvalue=float(ks.pvalue),
        s_grid=s_grid,
        mean_blocks_empirical=be.mean(0),
        mean_blocks_reference=br.mean(0),
        block_count_distance=dist,
        block_count_band=band,
        partition_s=partition_s,
        partition_tv=tv,
        partition_tv_band=tv_band,
        n_empirical=len(empirical),
        n_reference=len(reference),
    )


def all_set_partitions(n: int) -> list[Partition]:
    """Every partition of ``{1..n}`` in canonical form."""
    def rec(items):
        if not items:
            yield []
            return
        first, rest = items[0], items[1:]
        for sub in rec(rest):
            for i in range(len(sub)):
                yield sub[:i] + [[first] + sub[i]] + sub[i + 1:]
            yield [[first]] + sub
    return sorted({canonical(p) for p in rec(list(range(1, n + 1)))})


def save_ensemble(path, ensemble: list[PartitionProcess]) -> None:
    with open(path, "w") as fh:
        json.dump([p.to_json() for p in ensemble], fh)


def load_ensemble(path) -> list[PartitionProcess]:
    with open(path) as fh:
        return [PartitionProcess.from_json(d) for d in json.load(fh)]


__all__ = [
    "DEFAULT_TIME_RESCALE", "PartitionProcess", "ComparisonReport", "bs_rate", "bs_sample",
    "bs_ensemble", "extract_partition", "genealogy_process", "compare_coalescents",
    "canonical", "refines", "singletons", "merge_size_weights", "all_set_partitions",
    "save_ensemble", "load_ensemble",
]
