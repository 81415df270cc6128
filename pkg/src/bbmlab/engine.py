"""Branching Brownian motion with drift -mu, binary branching and absorption.

Time is discretized on a uniform grid.  Between grid points a particle moves
by an exact Gaussian increment ``-mu dt + sqrt(dt) G``; barrier crossings
inside a step are decided with the Brownian-bridge probability
``exp(-2 a b / dt)``, which is exact for Brownian motion with constant drift
given both endpoints.  Each particle carries an exponential branching clock;
a clock that rings during a step splits the particle at its end-of-step
position, which is the same law as an independent Bernoulli(1 - e^{-dt})
per step.

Random numbers come from numpy's PCG64 through its ctypes interface, one
bit generator per replica, so a replica is reproducible from its
:class:`~bbmlab.model.SeedSpec` alone.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numba as nb
import numpy as np

from .functionals import v_sum, y_sum, z_sum
from .model import DomainError, ModelParams, SeedSpec

_next_double = np.random.PCG64().ctypes.next_double

# outcome codes returned by the kernel
HORIZON, EXTINCT, POP_CAP, Z_THRESHOLD = 0, 1, 2, 3
OUTCOME_NAMES = {
    HORIZON: "AliveAtHorizon",
    EXTINCT: "Extinct",
    POP_CAP: "PopulationCap",
    Z_THRESHOLD: "ZThreshold",
}

# genealogy death causes
ALIVE, ABSORBED_LOWER, ABSORBED_UPPER, BRANCHED = 0, 1, 2, 3

# columns of the per-sample functional record
S_TIME, S_M, S_Z, S_Y, S_V, S_HITS_UPPER = range(6)
N_SAMPLE_COLS = 6


class PopulationOverflow(RuntimeError):
    """Raised by :func:`step_system` when the population exceeds the cap."""

    def __init__(self, system):
        super().__init__(f"population {system.size} exceeds cap {system.config.pop_cap}")
        self.system = system


@nb.njit(cache=False)
def _uniform(st):
    return _next_double(st)


@nb.njit(cache=False)
def _gauss(st, spare):
    # Marsaglia polar method; the second variate is cached in spare
    if spare[0] != 0.0:
        spare[0] = 0.0
        return spare[1]
    while True:
        a = 2.0 * _next_double(st) - 1.0
        b = 2.0 * _next_double(st) - 1.0
        r = a * a + b * b
        if 0.0 < r < 1.0:
            f = math.sqrt(-2.0 * math.log(r) / r)
            spare[0] = 1.0
            spare[1] = b * f
            return a * f


@nb.njit(cache=False)
def _exp1(st):
    return -math.log(1.0 - _next_double(st))


@nb.njit(cache=True)
def _grow_f(a, need):
    if need <= a.shape[0]:
        return a
    n = max(need, 2 * a.shape[0])
    b = np.empty(n, dtype=a.dtype)
    b[: a.shape[0]] = a
    return b


@nb.njit(cache=True)
def _grow_i(a, need):
    if need <= a.shape[0]:
        return a
    n = max(need, 2 * a.shape[0])
    b = np.empty(n, dtype=a.dtype)
    b[: a.shape[0]] = a
    return b


@nb.njit(cache=True)
def bridge_crossing_prob_nb(d_start, d_end, dt):
    if d_start <= 0.0 or d_end <= 0.0:
        return 1.0
    return math.exp(-2.0 * d_start * d_end / dt)


@nb.njit(cache=False)
def _crossed(st, d0, d1, dt):
    # exp(-40) < 5e-18: below double resolution of the uniform draw
    e = 2.0 * d0 * d1 / dt
    if e > 40.0:
        return False
    return _uniform(st) < math.exp(-e)


@nb.njit(cache=False)
def _hit_offset(st, spare, d0, d1, h):
    """Time of first contact for a bridge of length ``h`` known to reach the barrier.

    ``d0 > 0`` and ``d1`` are the signed distances to the barrier at the two
    ends.  Under the time change ``s = h t / (h - t)`` the contact time of the
    bridge is the hitting time of Brownian motion with drift ``|d1|/h`` from
    ``d0``, an inverse Gaussian with mean ``d0 h / |d1|`` and shape ``d0^2``.
    """
    if d0 <= 0.0:
        return 0.0
    z = _gauss(st, spare)
    y = z * z
    if y == 0.0:
        return h
    lam = d0 * d0
    b = abs(d1)
    if b == 0.0:
        s = lam / y
    else:
        m = d0 * h / b
        w = m * y / (2.0 * lam)
        s = m / (1.0 + w + math.sqrt(w * w + 2.0 * w))
        if _uniform(st) * (m + s) > m:
            s = m * m / s
    return h * s / (s + h)


@nb.njit(cache=False)
def _kill_test(st, x, y, h, lo, hi, has_hi):
    if y <= lo:
        return ABSORBED_LOWER
    if _crossed(st, x - lo, y - lo, h):
        return ABSORBED_LOWER
    if has_hi:
        if y >= hi:
            return ABSORBED_UPPER
        if _crossed(st, hi - x, hi - y, h):
            return ABSORBED_UPPER
    return ALIVE


@nb.njit(cache=False)
def _step(
    st, spare, pos, pid, clock, m, pos2, pid2, clock2, t_cur, t_new, mu, rate, lo, hi,
    exact, gen, g_parent, g_birth, g_death, g_cause, g_dpos, g_n,
    rec_hits, hit_lo, n_lo, hit_hi, n_hi, sx, s_t, sc, sid,
):
    """One grid step from ``pos`` into ``pos2``.

    Buffers are sized by the caller; returns ``ok=False`` instead of
    writing past any of them.
    """
    has_hi = hi < np.inf
    dt = t_new - t_cur
    sdt = math.sqrt(dt)
    cap_out = pos2.shape[0]
    cap_stack = sx.shape[0]
    cap_g = g_parent.shape[0]
    cap_lo = hit_lo.shape[0]
    cap_hi = hit_hi.shape[0]
    m_out = 0
    for i in range(m):
        c = clock[i]
        if c > t_new:
            # fast path: no ring during this step
            x = pos[i]
            y = x - mu * dt + sdt * _gauss(st, spare)
            cause = _kill_test(st, x, y, dt, lo, hi, has_hi)
            if cause == ALIVE:
                if m_out >= cap_out:
                    return False, m_out, g_n, n_lo, n_hi
                pos2[m_out] = y
                pid2[m_out] = pid[i]
                clock2[m_out] = c
                m_out += 1
                continue
            if cause == ABSORBED_LOWER:
                t_hit = t_cur + _hit_offset(st, spare, x - lo, y - lo, dt)
                if rec_hits:
                    if n_lo >= cap_lo:
                        return False, m_out, g_n, n_lo, n_hi
                    hit_lo[n_lo] = t_hit
                n_lo += 1
                dpos = lo
            else:
                t_hit = t_cur + _hit_offset(st, spare, hi - x, hi - y, dt)
                if rec_hits:
                    if n_hi >= cap_hi:
                        return False, m_out, g_n, n_lo, n_hi
                    hit_hi[n_hi] = t_hit
                n_hi += 1
                dpos = hi
            if gen:
                me = pid[i]
                g_death[me] = t_hit
                g_cause[me] = cause
                g_dpos[me] = dpos
            continue
        sx[0] = pos[i]
        s_t[0] = t_cur
        sc[0] = c
        sid[0] = pid[i]
        top = 1
        while top > 0:
            top -= 1
            x = sx[top]
            ts = s_t[top]
            c = sc[top]
            me = sid[top]
            rings = exact and c < t_new
            t_end = c if rings else t_new
            h = t_end - ts
            y = x
            cause = ALIVE
            if h > 0.0:
                y = x - mu * h + math.sqrt(h) * _gauss(st, spare)
                cause = _kill_test(st, x, y, h, lo, hi, has_hi)
            if cause != ALIVE:
                if cause == ABSORBED_LOWER:
                    t_hit = ts + _hit_offset(st, spare, x - lo, y - lo, h)
                    if rec_hits:
                        if n_lo >= cap_lo:
                            return False, m_out, g_n, n_lo, n_hi
                        hit_lo[n_lo] = t_hit
                    n_lo += 1
                    dpos = lo
                else:
                    t_hit = ts + _hit_offset(st, spare, hi - x, hi - y, h)
                    if rec_hits:
                        if n_hi >= cap_hi:
                            return False, m_out, g_n, n_lo, n_hi
                        hit_hi[n_hi] = t_hit
                    n_hi += 1
                    dpos = hi
                if gen:
                    g_death[me] = t_hit
                    g_cause[me] = cause
                    g_dpos[me] = dpos
                continue
            if rings or c <= t_new:
                # split at the ring time (exact) or at the step end
                if top + 2 > cap_stack:
                    return False, m_out, g_n, n_lo, n_hi
                kid0 = -1
                kid1 = -1
                if gen:
                    if g_n + 2 > cap_g:
                        return False, m_out, g_n, n_lo, n_hi
                    g_death[me] = t_end
                    g_cause[me] = BRANCHED
                    g_dpos[me] = y
                    for cc in range(2):
                        g_parent[g_n + cc] = me
                        g_birth[g_n + cc] = t_end
                        g_death[g_n + cc] = np.nan
                        g_cause[g_n + cc] = ALIVE
                        g_dpos[g_n + cc] = np.nan
                    kid0 = g_n
                    kid1 = g_n + 1
                    g_n += 2
                sx[top] = y
                s_t[top] = t_end
                sc[top] = t_end + _exp1(st) / rate
                sid[top] = kid0
                sx[top + 1] = y
                s_t[top + 1] = t_end
                sc[top + 1] = t_end + _exp1(st) / rate
                sid[top + 1] = kid1
                top += 2
                continue
            if m_out >= cap_out:
                return False, m_out, g_n, n_lo, n_hi
            pos2[m_out] = y
            pid2[m_out] = me
            clock2[m_out] = c
            m_out += 1
    return True, m_out, g_n, n_lo, n_hi


@nb.njit(cache=False)
def _advance(
    st, spare, pos, pid, clock, m, t0, n_steps, dt, mu, rate, lo, hi, pop_cap,
    z_thr, z_every, L, sample_steps, samples, exact,
    gen, g_parent, g_birth, g_death, g_cause, g_dpos, g_n,
    rec_hits, hit_lo, n_lo, hit_hi, n_hi,
):
    code = HORIZON
    k_done = 0
    js = 0
    n_samples = sample_steps.shape[0]
    while js < n_samples and sample_steps[js] <= 0:
        js += 1
    pos2 = np.empty_like(pos)
    pid2 = np.empty_like(pid)
    clock2 = np.empty_like(clock)
    sx = np.empty(256)
    s_t = np.empty(256)
    sc = np.empty(256)
    sid = np.empty(256, dtype=np.int64)
    t_cur = t0
    for k in range(n_steps):
        t_new = t0 + (k + 1) * dt
        # births per step exceeding m + 256 are beyond any practical probability
        need = 2 * m + 256
        if pos2.shape[0] < need:
            pos2 = np.empty(2 * need)
            pid2 = np.empty(2 * need, dtype=np.int64)
            clock2 = np.empty(2 * need)
        if pos.shape[0] < need:
            pos = _grow_f(pos, 2 * need)
            pid = _grow_i(pid, 2 * need)
            clock = _grow_f(clock, 2 * need)
        if gen and g_parent.shape[0] < g_n + 2 * need:
            g_parent = _grow_i(g_parent, g_n + 4 * need)
            g_birth = _grow_f(g_birth, g_n + 4 * need)
            g_death = _grow_f(g_death, g_n + 4 * need)
            g_cause = _grow_i(g_cause, g_n + 4 * need)
            g_dpos = _grow_f(g_dpos, g_n + 4 * need)
        if rec_hits:
            if hit_lo.shape[0] < n_lo + need:
                hit_lo = _grow_f(hit_lo, n_lo + 2 * need)
            if hit_hi.shape[0] < n_hi + need:
                hit_hi = _grow_f(hit_hi, n_hi + 2 * need)
        ok, m, g_n, n_lo, n_hi = _step(
            st, spare, pos, pid, clock, m, pos2, pid2, clock2, t_cur, t_new, mu, rate, lo, hi,
            exact, gen, g_parent, g_birth, g_death, g_cause, g_dpos, g_n,
            rec_hits, hit_lo, n_lo, hit_hi, n_hi, sx, s_t, sc, sid,
        )
        if not ok:
            raise RuntimeError("per-step buffer exhausted")
        pos, pos2 = pos2, pos
        pid, pid2 = pid2, pid
        clock, clock2 = clock2, clock
        t_cur = t_new
        k_done = k + 1
        while js < n_samples and sample_steps[js] == k_done:
            samples[js, 0] = t_new
            samples[js, 1] = m
            samples[js, 2] = z_sum(pos, m, mu, L, True)
            samples[js, 3] = y_sum(pos, m, mu)
            samples[js, 4] = v_sum(pos, m, mu, t_new)
            samples[js, 5] = n_hi
            js += 1
        if m == 0:
            code = EXTINCT
            break
        if m > pop_cap:
            code = POP_CAP
            break
        if z_every > 0 and k_done % z_every == 0:
            if z_sum(pos, m, mu, L, True) >= z_thr:
                code = Z_THRESHOLD
                break
    # samples past extinction are identically zero
    if code == EXTINCT:
        while js < n_samples:
            samples[js, 0] = t0 + sample_steps[js] * dt
            samples[js, 1] = 0.0
            samples[js, 2] = 0.0
            samples[js, 3] = 0.0
            samples[js, 4] = 0.0
            samples[js, 5] = n_hi
            js += 1
    return (
        code, k_done, m, pos, pid, clock,
        g_parent, g_birth, g_death, g_cause, g_dpos, g_n,
        hit_lo, n_lo, hit_hi, n_hi,
    )


def bridge_crossing_prob(d_start: float, d_end: float, dt: float) -> float:
    """Probability that a Brownian bridge over ``[0, dt]`` touches the barrier.

    ``d_start`` and ``d_end`` are the endpoint distances to the barrier.
    """
    if dt <= 0:
        raise DomainError("dt must be positive")
    if d_start < 0 or d_end < 0:
        raise DomainError("distances to the barrier must be >= 0")
    return float(bridge_crossing_prob_nb(float(d_start), float(d_end), float(dt)))


def default_dt(params: ModelParams) -> float:
    """Default time step ``0.05 * min(1, L^2/10)``.

    Branch times and barrier crossings are resolved exactly inside a step,
    so the step only sets how often functionals and stop rules are checked.
    """
    return 0.05 * min(1.0, params.L**2 / 10.0)


def default_z_threshold(params: ModelParams, z0: float = 0.0) -> float:
    """Survival proxy level ``50 eps^{1/2} e^{pi sqrt2 / sqrt eps}``.

    Extinction after Z reaches this level is negligible at every epsilon
    used here.  ``z0`` is accepted but unused: a multiple of the starting
    value would fire at once for starts near 0 or at or above L, where Z is
    tiny or zero.
    """
    return 50.0 * params.z_scale


@dataclass
class BarrierSpec:
    """Absorbing lower barrier (default the origin) and optional upper barrier.

    ``upper_mode`` is ``"kill"`` (remove and count) or ``"stop"`` (count and
    freeze at the level; frozen particles keep contributing to V).  The
    engine treats both as absorption with a recorded hit; the difference only
    matters to functionals.
    """

    lower: float = 0.0
    upper: float = math.inf
    upper_mode: str = "none"

    def __post_init__(self):
        if self.upper_mode not in ("none", "kill", "stop"):
            raise ValueError(f"unknown upper_mode {self.upper_mode!r}")
        if self.upper_mode == "none":
            self.upper = math.inf
        elif not (self.upper > self.lower):
            raise DomainError("upper barrier must lie above the lower barrier")


@dataclass
class EngineConfig:
    dt: Optional[float] = None
    dt_max: float = 0.05
    pop_cap: int = 1_000_000
    branch_rate: float = 1.0
    record_genealogy: bool = False
    record_hits: bool = True
    z_check_every: Optional[int] = None
    branch_timing: str = "exact"

    def __post_init__(self):
        if self.branch_timing not in ("exact", "end_of_step"):
            raise ValueError(f"unknown branch_timing {self.branch_timing!r}")

    def resolved_dt(self, params: ModelParams) -> float:
        dt = self.dt if self.dt is not None else default_dt(params)
        if not (0 < dt <= self.dt_max):
            raise DomainError(f"dt={dt} outside (0, {self.dt_max}]")
        return dt


@dataclass
class Genealogy:
    """Append-only arena: parent links, birth/death times, causes, death positions."""

    parent: np.ndarray
    birth: np.ndarray
    death: np.ndarray
    cause: np.ndarray
    death_pos: np.ndarray
    n: int

    @classmethod
    def roots(cls, k: int, t0: float) -> "Genealogy":
        cap = max(16, 2 * k)
        g = cls(
            parent=np.full(cap, -1, dtype=np.int64),
            birth=np.zeros(cap),
            death=np.full(cap, np.nan),
            cause=np.zeros(cap, dtype=np.int64),
            death_pos=np.full(cap, np.nan),
            n=k,
        )
        g.birth[:k] = t0
        return g

    def view(self, name: str) -> np.ndarray:
        return getattr(self, name)[: self.n]

    def records(self, final_positions: Optional[dict] = None):
        """Yield ``(id, parent_id, birth_time, death_time, death_cause, death_position)``."""
        names = {
            ALIVE: "alive_at_end",
            ABSORBED_LOWER: "absorbed_lower",
            ABSORBED_UPPER: "absorbed_upper",
            BRANCHED: "branched",
        }
        for i in range(self.n):
            parent = int(self.parent[i])
            yield (
                i,
                None if parent < 0 else parent,
                float(self.birth[i]),
                None if math.isnan(self.death[i]) else float(self.death[i]),
                names[int(self.cause[i])],
                None if math.isnan(self.death_pos[i]) else float(self.death_pos[i]),
            )

    def ancestor_at(self, pid: int, time: float) -> int:
        """Id of the ancestor of ``pid`` alive at ``time``, lifetimes taken as ``(birth, death]``."""
        p = int(pid)
        while self.birth[p] >= time and self.parent[p] >= 0:
            p = int(self.parent[p])
        return p


class ParticleSystem:
    """Live particles, genealogy and the replica's RNG state."""

    def __init__(
        self,
        params: ModelParams,
        positions,
        seed: SeedSpec,
        barrier: Optional[BarrierSpec] = None,
        config: Optional[EngineConfig] = None,
        time: float = 0.0,
    ):
        self.params = params
        self.barrier = barrier or BarrierSpec()
        self.config = config or EngineConfig()
        self.seed = seed
        x = np.atleast_1d(np.asarray(positions, dtype=np.float64))
        if np.any(x <= self.barrier.lower):
            raise DomainError("initial particles must lie strictly above the lower barrier")
        if np.any(x >= self.barrier.upper):
            raise DomainError("initial particles must lie strictly below the upper barrier")
        if self.config.branch_rate < 0:
            raise DomainError("branch rate must be >= 0")
        self._bitgen = seed.bit_generator()
        self._state = self._bitgen.ctypes.state_address
        self._spare = np.zeros(2)
        self.time = float(time)
        self.initial_count = len(x)
        cap = max(64, 2 * len(x))
        self._pos = np.empty(cap)
        self._pos[: len(x)] = x
        self._pid = np.full(cap, -1, dtype=np.int64)
        self._pid[: len(x)] = np.arange(len(x))
        self._clock = np.empty(cap)
        rate = self.config.branch_rate
        for i in range(len(x)):
            self._clock[i] = (
                self.time + _exp1(self._state) / rate if rate > 0 else math.inf
            )
        self.m = len(x)
        self.genealogy = Genealogy.roots(len(x), self.time) if self.config.record_genealogy else None
        self._hit_lo = np.empty(16)
        self._hit_hi = np.empty(16)
        self.n_hits_lower = 0
        self.n_hits_upper = 0
        self.n_branch = 0

    @property
    def positions(self) -> np.ndarray:
        return self._pos[: self.m].copy()

    @property
    def ids(self) -> np.ndarray:
        return self._pid[: self.m].copy()

    @property
    def size(self) -> int:
        return self.m

    @property
    def hit_times_lower(self) -> np.ndarray:
        return self._hit_lo[: self.n_hits_lower].copy()

    @property
    def hit_times_upper(self) -> np.ndarray:
        return self._hit_hi[: self.n_hits_upper].copy()

    def _advance(self, n_steps, dt, pop_cap, z_thr=np.inf, z_every=0, sample_steps=None):
        if sample_steps is None:
            sample_steps = np.empty(0, dtype=np.int64)
        samples = np.full((len(sample_steps), N_SAMPLE_COLS), np.nan)
        g = self.genealogy
        gen = g is not None
        if not gen:
            g = _EMPTY_GENEALOGY
        rate = self.config.branch_rate
        # a zero rate is handled by clocks at +inf
        out = _advance(
            self._state, self._spare, self._pos, self._pid, self._clock, self.m,
            self.time, int(n_steps), float(dt), self.params.mu, rate if rate > 0 else 1.0,
            self.barrier.lower, self.barrier.upper, int(pop_cap),
            float(z_thr), int(z_every), self.params.L, np.asarray(sample_steps, dtype=np.int64),
            samples, self.config.branch_timing == "exact",
            gen, g.parent, g.birth, g.death, g.cause, g.death_pos, g.n,
            self.config.record_hits, self._hit_lo, self.n_hits_lower, self._hit_hi,
            self.n_hits_upper,
        )
        (code, k_done, m, self._pos, self._pid, self._clock,
         parent, birth, death, cause, dpos, g_n,
         self._hit_lo, self.n_hits_lower, self._hit_hi, self.n_hits_upper) = out
        self.m = m
        self.n_branch = self.m - self.initial_count + self._absorbed
        if gen:
            self.genealogy = Genealogy(parent, birth, death, cause, dpos, g_n)
        self.time = self.time + k_done * dt
        return code, k_done, samples

    @property
    def _absorbed(self) -> int:
        return self.n_hits_lower + self.n_hits_upper


_EMPTY_GENEALOGY = Genealogy(
    parent=np.empty(0, dtype=np.int64),
    birth=np.empty(0),
    death=np.empty(0),
    cause=np.empty(0, dtype=np.int64),
    death_pos=np.empty(0),
    n=0,
)


@dataclass
class Outcome:
    kind: str
    time: float

    @property
    def survived(self) -> bool:
        return self.kind != "Extinct"


@dataclass
class StopRule:
    """Stopping conditions for :func:`run_until`.

    Extinction and the horizon always stop a run; ``pop_cap`` and
    ``z_threshold`` are optional.
    """

    pop_cap: Optional[int] = None
    z_threshold: Optional[float] = None
    z_check_every: Optional[int] = None


def _snapshot(system: ParticleSystem) -> np.ndarray:
    pos = system._pos
    m, mu, t = system.m, system.params.mu, system.time
    return np.array([t, m, z_sum(pos, m, mu, system.params.L, True), y_sum(pos, m, mu),
                     v_sum(pos, m, mu, t), system.n_hits_upper])


def build_system(params, x, seed, barrier=None, config=None) -> ParticleSystem:
    return ParticleSystem(params, x, seed, barrier=barrier, config=config)


def step_system(system: ParticleSystem, dt: float, rng=None) -> ParticleSystem:
    """Advance one step of length ``dt``.

    ``rng`` is accepted for interface symmetry; the system owns its stream.
    Raises :class:`PopulationOverflow` (carrying the partial state) when the
    population exceeds the configured cap.
    """
    if not (0 < dt <= system.config.dt_max):
        raise DomainError(f"dt={dt} outside (0, {system.config.dt_max}]")
    if system.m == 0:
        system.time += dt
        return system
    code, _, _ = system._advance(1, dt, system.config.pop_cap)
    if code == POP_CAP:
        raise PopulationOverflow(system)
    return system


def run_until(
    system: ParticleSystem,
    horizon: float,
    stop: Optional[StopRule] = None,
    sample_times=None,
) -> tuple[ParticleSystem, Outcome, Optional[np.ndarray]]:
    """Run to ``horizon`` (absolute time) or until a stop rule fires.

    Returns the system, the outcome and, when ``sample_times`` is given, a
    ``(len(sample_times), 6)`` array of ``(t, M, Z, Y, V_live, hits_upper)``
    recorded at the grid step nearest each requested time.
    """
    stop = stop or StopRule()
    dt = system.config.resolved_dt(system.params)
    n_steps = max(0, int(round((horizon - system.time) / dt)))
    pop_cap = stop.pop_cap if stop.pop_cap is not None else system.config.pop_cap
    z_thr = stop.z_threshold if stop.z_threshold is not None else np.inf
    z_every = 0
    if np.isfinite(z_thr):
        z_every = stop.z_check_every or system.config.z_check_every or max(1, int(round(0.05 / dt)))
    steps = None
    if sample_times is not None:
        steps = np.rint((np.asarray(sample_times, dtype=float) - system.time) / dt).astype(np.int64)
        if np.any(np.diff(steps) < 0):
            raise ValueError("sample times must be nondecreasing")
    if system.m == 0:
        samples = None
        if steps is not None:
            samples = np.zeros((len(steps), N_SAMPLE_COLS))
            samples[:, S_TIME] = system.time + steps * dt
            samples[:, S_HITS_UPPER] = system.n_hits_upper
        system.time += n_steps * dt
        return system, Outcome("Extinct", system.time), samples
    initial = None
    if steps is not None and np.any(steps <= 0):
        initial = _snapshot(system)
    code, k_done, samples = system._advance(n_steps, dt, pop_cap, z_thr, z_every, steps)
    if initial is not None:
        samples[steps <= 0] = initial
    return system, Outcome(OUTCOME_NAMES[code], system.time), (samples if steps is not None else None)


@dataclass
class BarrierCounts:
    n_hits: int
    hit_times: np.ndarray
    truncated: bool = False
    outcome: str = ""


def first_passage_census(
    x_start: float,
    barrier_level: float,
    params: ModelParams,
    seed: SeedSpec,
    time_cap: float,
    config: Optional[EngineConfig] = None,
) -> BarrierCounts:
    """Number and times of particles absorbed at ``barrier_level`` from one at ``x_start``.

    The count may be infinite in principle; ``time_cap`` and the population
    cap bound the run and set ``truncated``.
    """
    if not (0 < barrier_level < x_start):
        raise DomainError("need 0 < barrier_level < x_start")
    config = config or EngineConfig()
    system = ParticleSystem(params, [x_start], seed, BarrierSpec(lower=barrier_level), config)
    system, outcome, _ = run_until(system, time_cap, StopRule(pop_cap=config.pop_cap))
    return BarrierCounts(
        n_hits=system.n_hits_lower,
        hit_times=system.hit_times_lower,
        truncated=outcome.kind != "Extinct",
        outcome=outcome.kind,
    )


@dataclass
class MCSettings:
    replicas: int = 1000
    horizon: float = 200.0
    cap: int = 1_000_000
    z_threshold: Optional[float] = None
    decided_floor: float = 0.95
    dt: Optional[float] = None
    stream_offset: int = 0


@dataclass
class SurvivalEstimate:
    p_hat: float
    ci_halfwidth: float
    decided_fraction: float
    replicas: int
    counts: dict = field(default_factory=dict)
    unreliable: bool = False


def survival_outcomes(
    x: float,
    params: ModelParams,
    mc: MCSettings,
    master_seed: int,
) -> np.ndarray:
    """Outcome code of each replica started from one particle at ``x``."""
    if x <= 0:
        raise DomainError("x must be positive")
    if mc.replicas < 1:
        raise DomainError("replicas must be >= 1")
    from .functionals import compute_Z

    z0 = compute_Z([x], params)
    z_thr = mc.z_threshold if mc.z_threshold is not None else default_z_threshold(params, z0)
    config = EngineConfig(dt=mc.dt, pop_cap=mc.cap, record_hits=False)
    dt = config.resolved_dt(params)
    n_steps = int(round(mc.horizon / dt))
    z_every = max(1, int(round(0.05 / dt)))
    codes = np.empty(mc.replicas, dtype=np.int64)
    for r in range(mc.replicas):
        system = ParticleSystem(params, [x], SeedSpec(master_seed, mc.stream_offset + r), config=config)
        code, _, _ = system._advance(n_steps, dt, mc.cap, z_thr, z_every)
        codes[r] = code
    return codes


def summarize_outcomes(codes: np.ndarray, decided_floor: float = 0.95) -> SurvivalEstimate:
    n = len(codes)
    counts = {OUTCOME_NAMES[c]: int(np.sum(codes == c)) for c in OUTCOME_NAMES}
    p_hat = 1.0 - counts["Extinct"] / n
    ci = 1.96 * math.sqrt(p_hat * (1.0 - p_hat) / n)
    decided = 1.0 - counts["AliveAtHorizon"] / n
    return SurvivalEstimate(
        p_hat=p_hat,
        ci_halfwidth=ci,
        decided_fraction=decided,
        replicas=n,
        counts=counts,
        unreliable=decided < decided_floor,
    )


def estimate_survival(
    x: float,
    params: ModelParams,
    mc: Optional[MCSettings] = None,
    master_seed: int = 0,
) -> SurvivalEstimate:
    """Monte Carlo survival probability from one particle at ``x``.

    Extinction counts as death; reaching the Z threshold, the population cap
    or the horizon count as survival.  ``decided_fraction`` is the share of
    replicas not relying on the horizon proxy.
    """
    mc = mc or MCSettings()
    codes = survival_outcomes(x, params, mc, master_seed)
    return summarize_outcomes(codes, mc.decided_floor)


@dataclass
class FunctionalEnsemble:
    """Functionals of many replicas on a common time grid."""

    times: np.ndarray
    Z: np.ndarray
    Y: np.ndarray
    V_live: np.ndarray
    M: np.ndarray
    hits_upper: np.ndarray
    Z0: float
    V0: float
    upper: float
    upper_mode: str

    def V_total(self, params: ModelParams) -> np.ndarray:
        """V including particles frozen at the upper barrier."""
        if self.upper_mode != "stop":
            return self.V_live
        decay = np.exp(params.mu * self.upper + (0.5 * params.mu**2 - 1.0) * self.times)
        return self.V_live + self.hits_upper * self.upper * decay


def functional_ensemble(
    x: float,
    params: ModelParams,
    times,
    replicas: int,
    master_seed: int,
    barrier: Optional[BarrierSpec] = None,
    config: Optional[EngineConfig] = None,
    stream_offset: int = 0,
) -> FunctionalEnsemble:
    """Simulate ``replicas`` systems from one particle at ``x`` and record functionals."""
    from .functionals import compute_V, compute_Z

    barrier = barrier or BarrierSpec()
    config = config or EngineConfig(record_hits=False)
    times = np.asarray(times, dtype=float)
    rows = np.empty((replicas, len(times), N_SAMPLE_COLS))
    horizon = float(times.max())
    for r in range(replicas):
        system = ParticleSystem(params, [x], SeedSpec(master_seed, stream_offset + r), barrier, config)
        _, _, samples = run_until(system, horizon, StopRule(), sample_times=times)
        rows[r] = samples
    return FunctionalEnsemble(
        times=times,
        Z=rows[:, :, S_Z],
        Y=rows[:, :, S_Y],
        V_live=rows[:, :, S_V],
        M=rows[:, :, S_M],
        hits_upper=rows[:, :, S_HITS_UPPER],
        Z0=compute_Z([x], params),
        V0=compute_V([x], params, 0.0),
        upper=barrier.upper,
        upper_mode=barrier.upper_mode,
    )


def check_genealogy(system: ParticleSystem) -> None:
    """Assert the forest and population-balance invariants."""
    g = system.genealogy
    if g is None:
        raise ValueError("system was built without genealogy recording")
    n = g.n
    parent = g.view("parent")
    birth = g.view("birth")
    cause = g.view("cause")
    roots = parent < 0
    assert roots.sum() == system.initial_count
    nonroot = np.nonzero(~roots)[0]
    assert np.all(parent[nonroot] < nonroot)
    assert np.all(birth[parent[nonroot]] <= birth[nonroot])
    assert np.all(cause[parent[nonroot]] == BRANCHED)
    # each branched particle has exactly two children
    kids = np.bincount(parent[nonroot], minlength=n)
    assert np.all(kids[cause == BRANCHED] == 2)
    assert np.all(kids[cause != BRANCHED] == 0)
    alive = np.nonzero(cause == ALIVE)[0]
    assert len(alive) == system.m
    assert set(alive.tolist()) == set(system.ids.tolist())
    n_branch = int(np.sum(cause == BRANCHED))
    assert system.m == system.initial_count + n_branch - system._absorbed
    pos = system.positions
    assert np.all(pos > system.barrier.lower)
    assert np.all(pos < system.barrier.upper)


def write_genealogy(path, system: ParticleSystem) -> None:
    """Newline-delimited records ``id parent_id birth_time death_time death_cause death_position``.

    Fields are tab-separated in that order; missing values are written as ``-``.
    """
    g = system.genealogy
    if g is None:
        raise ValueError("system was built without genealogy recording")

    def fmt(v):
        return "-" if v is None else (repr(v) if isinstance(v, float) else str(v))

    with open(path, "w") as fh:
        for rec in g.records():
            fh.write("\t".join(fmt(v) for v in rec) + "\n")
