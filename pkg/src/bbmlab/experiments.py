"""Config-driven experiments and their deterministic result tables.

Every experiment is a pure function of its config dict (including
``master_seed``).  Replica ``r`` of grid point ``j`` at parameter index
``i`` uses stream ``(i * n_points + j) * replicas + r``; tables carry the
first stream id of each block in a ``stream_offset`` column.
"""
from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from . import __version__
from .coalescent import (
    DEFAULT_TIME_RESCALE,
    bs_ensemble,
    compare_coalescents,
    genealogy_process,
    singletons,
)
from .engine import (
    EngineConfig,
    MCSettings,
    ParticleSystem,
    StopRule,
    run_until,
    summarize_outcomes,
    survival_outcomes,
)
from .functionals import compute_Y, compute_Z
from .model import DomainError, ModelParams, SeedSpec, params_from_epsilon, params_from_N
from .wave import fit_shift, solve_kolmogorov_bvp, solve_traveling_wave

EXPERIMENTS = (
    "thm1_wave_match",
    "thm2_asymptotic",
    "prop_ic_scaling",
    "coalescent_compare",
    "survival_curve",
)

DESK_EPSILONS = [1.0, 0.5, 0.3, 0.2]
NAN = float("nan")


@dataclass
class Column:
    name: str
    unit: str


@dataclass
class ResultTable:
    experiment: str
    columns: list
    rows: list = field(default_factory=list)
    provenance: dict = field(default_factory=dict)
    summary: dict = field(default_factory=dict)
    flagged: bool = False
    attachments: dict = field(default_factory=dict)

    @property
    def names(self) -> list:
        return [c.name for c in self.columns]

    def add(self, **values) -> None:
        missing = set(self.names) - set(values)
        extra = set(values) - set(self.names)
        if missing or extra:
            raise KeyError(f"row mismatch: missing {sorted(missing)}, unknown {sorted(extra)}")
        self.rows.append([_plain(values[n]) for n in self.names])

    def column(self, name: str) -> np.ndarray:
        j = self.names.index(name)
        return np.array([r[j] for r in self.rows])

    def to_json(self) -> dict:
        return {
            "provenance": self.provenance,
            "experiment": self.experiment,
            "columns": [{"name": c.name, "unit": c.unit} for c in self.columns],
            "rows": self.rows,
            "summary": _plain(self.summary),
            "flagged": self.flagged,
        }

    @classmethod
    def from_json(cls, d: dict) -> "ResultTable":
        return cls(
            experiment=d["experiment"],
            columns=[Column(c["name"], c["unit"]) for c in d["columns"]],
            rows=[list(r) for r in d["rows"]],
            provenance=d["provenance"],
            summary=d["summary"],
            flagged=d["flagged"],
        )


def _plain(v):
    """Convert numpy scalars for JSON; non-finite floats become None."""
    if isinstance(v, (np.integer,)):
        return int(v)
    if isinstance(v, (bool, np.bool_)):
        return bool(v)
    if isinstance(v, (float, np.floating)):
        v = float(v)
        return v if math.isfinite(v) else None
    if isinstance(v, dict):
        return {k: _plain(x) for k, x in v.items()}
    if isinstance(v, (list, tuple, np.ndarray)):
        return [_plain(x) for x in v]
    return v


def _fmt(v) -> str:
    if v is None:
        return "nan"
    if isinstance(v, bool):
        return "1" if v else "0"
    if isinstance(v, float):
        return repr(v)
    return str(v)


# ---------------------------------------------------------------- config


def config_hash(cfg: dict) -> str:
    blob = json.dumps(cfg, sort_keys=True, separators=(",", ":"), default=str)
    return hashlib.sha256(blob.encode()).hexdigest()


def _provenance(experiment: str, cfg: dict) -> dict:
    return {
        "experiment": experiment,
        "config_hash": config_hash(cfg),
        "master_seed": int(cfg.get("master_seed", 0)),
        "code_version": __version__,
    }


def param_list(cfg: dict, default=None) -> list[ModelParams]:
    """Model parameters for each entry of ``epsilon`` or ``N`` (scalar or list)."""
    a = float(cfg.get("a", 0.0))
    if "epsilon" in cfg and "N" in cfg:
        raise DomainError("config must contain exactly one of 'epsilon' or 'N'")
    if "N" in cfg:
        ns = cfg["N"] if isinstance(cfg["N"], list) else [cfg["N"]]
        return [params_from_N(n, a) for n in ns]
    eps = cfg.get("epsilon", default if default is not None else DESK_EPSILONS)
    eps = eps if isinstance(eps, list) else [eps]
    return [params_from_epsilon(e, a) for e in eps]


def mc_settings(cfg: dict, replicas_default: int) -> MCSettings:
    mc = dict(cfg.get("mc", {}))
    return MCSettings(
        replicas=int(mc.get("replicas", replicas_default)),
        horizon=float(mc.get("horizon", 200.0)),
        cap=int(mc.get("cap", 1_000_000)),
        z_threshold=mc.get("z_threshold"),
        decided_floor=float(mc.get("decided_floor", 0.95)),
        dt=mc.get("dt"),
    )


def _survival_point(x, params, mc: MCSettings, seed: int, offset: int):
    mc = MCSettings(**{**mc.__dict__, "stream_offset": offset})
    codes = survival_outcomes(x, params, mc, seed)
    return summarize_outcomes(codes, mc.decided_floor)


def _mc_weights(p_hat: np.ndarray, n: int) -> np.ndarray:
    p = np.clip(p_hat, 0.5 / n, 1.0 - 0.5 / n)
    return n / (p * (1.0 - p))


# ---------------------------------------------------------------- experiments


def run_survival_curve(cfg: dict) -> ResultTable:
    """Monte Carlo survival against the Kolmogorov BVP on an x-grid."""
    seed = int(cfg.get("master_seed", 0))
    mc = mc_settings(cfg, 2000)
    plist = param_list(cfg, [1.0])
    fracs = cfg.get("x_fracs", [0.1, 0.3, 0.5, 0.7, 0.9])
    table = ResultTable("survival_curve", [
        Column("epsilon", "dimensionless"), Column("x", "space"),
        Column("p_hat", "probability"), Column("ci_halfwidth", "probability"),
        Column("decided_fraction", "fraction"), Column("Q_ode", "probability"),
        Column("flagged", "bool"), Column("replicas", "count"), Column("stream_offset", "stream id"),
    ], provenance=_provenance("survival_curve", cfg))
    xs_given = cfg.get("x_grid")
    for i, p in enumerate(plist):
        Q = solve_kolmogorov_bvp(p.mu)
        xs = xs_given if xs_given is not None else [f * p.L for f in fracs]
        for j, x in enumerate(xs):
            off = (i * len(xs) + j) * mc.replicas
            est = _survival_point(x, p, mc, seed, off)
            table.add(epsilon=p.epsilon, x=x, p_hat=est.p_hat, ci_halfwidth=est.ci_halfwidth,
                      decided_fraction=est.decided_fraction, Q_ode=float(Q(x)),
                      flagged=est.unreliable, replicas=mc.replicas, stream_offset=off)
            table.flagged |= est.unreliable
    return table


def run_thm1(cfg: dict) -> ResultTable:
    """Survival from ``L + alpha`` against a translation-fitted traveling wave.

    Starts at or below the origin are outside the model; their survival is
    recorded as 0 without simulation (``simulated = 0``).
    """
    seed = int(cfg.get("master_seed", 0))
    mc = mc_settings(cfg, 20000)
    plist = param_list(cfg, [1.0, 0.5])
    alphas = [float(a) for a in cfg.get("alphas", [-8, -3, -2, -1, 0, 1, 2, 3, 8])]
    lo, hi = cfg.get("fit_window", [-3.0, 3.0])
    theta = solve_traveling_wave()
    table = ResultTable("thm1_wave_match", [
        Column("epsilon", "dimensionless"), Column("alpha", "space (offset from L)"),
        Column("x", "space"), Column("p_hat", "probability"), Column("ci_halfwidth", "probability"),
        Column("theta_fit", "probability"), Column("Q_ode", "probability"),
        Column("decided_fraction", "fraction"), Column("simulated", "bool"),
        Column("flagged", "bool"), Column("stream_offset", "stream id"),
    ], provenance=_provenance("thm1_wave_match", cfg))
    fits = {}
    for i, p in enumerate(plist):
        Q = solve_kolmogorov_bvp(p.mu)
        pts = []
        for j, al in enumerate(alphas):
            x = p.L + al
            off = (i * len(alphas) + j) * mc.replicas
            if x <= 0:
                pts.append((al, x, 0.0, 0.0, 1.0, False, False, off))
                continue
            est = _survival_point(x, p, mc, seed, off)
            pts.append((al, x, est.p_hat, est.ci_halfwidth, est.decided_fraction, True,
                        est.unreliable, off))
        a_arr = np.array([q[0] for q in pts])
        p_arr = np.array([q[2] for q in pts])
        win = (a_arr >= lo) & (a_arr <= hi)
        shift, rms = fit_shift(theta, a_arr[win], p_arr[win], _mc_weights(p_arr[win], mc.replicas))
        fits[f"{p.epsilon!r}"] = {"shift": shift, "weighted_rms": rms}
        for al, x, ph, ci, dec, sim, flag, off in pts:
            table.add(epsilon=p.epsilon, alpha=al, x=x, p_hat=ph, ci_halfwidth=ci,
                      theta_fit=float(theta(al + shift)), Q_ode=float(Q(x)) if x > 0 else 0.0,
                      decided_fraction=dec, simulated=sim, flagged=flag, stream_offset=off)
            table.flagged |= flag
    table.summary = {"fits": fits, "fit_window": [lo, hi], "replicas": mc.replicas}
    return table


def shape_function(x, params: ModelParams):
    """``L e^{-mu (L - x)} sin(pi x / L)``."""
    x = np.asarray(x, dtype=float)
    L = params.L
    return L * np.exp(-params.mu * (L - x)) * np.sin(np.pi * x / L)


def run_thm2(cfg: dict) -> ResultTable:
    """Ratio of Monte Carlo survival to the asymptotic shape on ``[0.3 L, 0.7 L]``."""
    seed = int(cfg.get("master_seed", 0))
    mc = mc_settings(cfg, 100_000)
    plist = param_list(cfg, [1.0, 0.5])
    fracs = [float(f) for f in cfg.get("x_fracs", [0.3, 0.4, 0.5, 0.6, 0.7])]
    table = ResultTable("thm2_asymptotic", [
        Column("epsilon", "dimensionless"), Column("x", "space"),
        Column("p_hat", "probability"), Column("ci_halfwidth", "probability"),
        Column("shape", "dimensionless"), Column("ratio", "dimensionless"),
        Column("Q_ode", "probability"), Column("flagged", "bool"),
        Column("stream_offset", "stream id"),
    ], provenance=_provenance("thm2_asymptotic", cfg))
    spreads = {}
    for i, p in enumerate(plist):
        Q = solve_kolmogorov_bvp(p.mu)
        ratios = []
        for j, f in enumerate(fracs):
            x = f * p.L
            off = (i * len(fracs) + j) * mc.replicas
            est = _survival_point(x, p, mc, seed, off)
            shape = float(shape_function(x, p))
            # an estimate of exactly 0 carries no ratio information
            flag = est.unreliable or est.p_hat == 0.0
            ratio = NAN if est.p_hat == 0.0 else est.p_hat / shape
            ratios.append(ratio)
            table.add(epsilon=p.epsilon, x=x, p_hat=est.p_hat, ci_halfwidth=est.ci_halfwidth,
                      shape=shape, ratio=ratio, Q_ode=float(Q(x)), flagged=flag,
                      stream_offset=off)
            table.flagged |= flag
        r = np.array(ratios)
        spreads[f"{p.epsilon!r}"] = float(np.max(r) / np.min(r)) if np.all(np.isfinite(r)) else None
    table.summary = {"ratio_spread": spreads, "replicas": mc.replicas}
    return table


def _final_functionals(x0, params, t, seed: SeedSpec, cap: int, dt):
    system = ParticleSystem(params, [x0], seed, config=EngineConfig(dt=dt, pop_cap=cap, record_hits=False))
    system, outcome, _ = run_until(system, t, StopRule(pop_cap=cap))
    pos = system.positions
    return compute_Z(pos, params), compute_Y(pos, params), outcome.kind


def laplace_curve(values: np.ndarray, lambdas: np.ndarray) -> np.ndarray:
    return np.array([np.mean(np.exp(-lam * values)) for lam in lambdas])


def run_prop_ic(cfg: dict) -> ResultTable:
    """Normalized Z and Y at time ``c L^2`` from one particle at ``L + alpha``.

    Rows of kind ``quantile`` report quantiles of the normalized values;
    rows of kind ``laplace`` report the empirical Laplace transform of
    ``zhat / (2 pi^2 e^{sqrt2 alpha})`` next to ``1 - theta(log(lambda)/sqrt2 + s)``
    with one fitted shift ``s`` per epsilon.  Replicas extinct before the
    sampling time contribute zeros.
    """
    seed = int(cfg.get("master_seed", 0))
    replicas = int(cfg.get("mc", {}).get("replicas", 400))
    cap = int(cfg.get("mc", {}).get("cap", 1_000_000))
    dt = cfg.get("mc", {}).get("dt")
    plist = param_list(cfg, [1.0, 0.5, 0.3])
    alpha = float(cfg.get("alpha", 2.0))
    c = float(cfg.get("c", 1.0))
    if c <= 0:
        raise DomainError("c must be positive")
    levels = [float(q) for q in cfg.get("quantiles", [0.1, 0.25, 0.5, 0.75, 0.9])]
    lambdas = np.array(cfg.get("lambdas", list(np.logspace(-2, 2, 9))), dtype=float)
    theta = solve_traveling_wave()
    table = ResultTable("prop_ic_scaling", [
        Column("epsilon", "dimensionless"), Column("kind", "label"),
        Column("level", "probability or lambda"), Column("zhat", "Z / (eps^1/2 e^{sqrt2 L})"),
        Column("yhat", "Y / e^{sqrt2 L}"), Column("laplace_empirical", "dimensionless"),
        Column("laplace_wave", "dimensionless"), Column("stream_offset", "stream id"),
    ], provenance=_provenance("prop_ic_scaling", cfg))
    per_replica = ResultTable("prop_ic_replicas", [
        Column("epsilon", "dimensionless"), Column("zhat", "Z / (eps^1/2 e^{sqrt2 L})"),
        Column("yhat", "Y / e^{sqrt2 L}"), Column("outcome", "label"),
        Column("stream_id", "stream id"),
    ], provenance=table.provenance)
    summary = {}
    for i, p in enumerate(plist):
        t = c * p.L**2
        off = i * replicas
        zh = np.empty(replicas)
        yh = np.empty(replicas)
        n_cap = n_extinct = 0
        for r in range(replicas):
            z, y, kind = _final_functionals(p.L + alpha, p, t, SeedSpec(seed, off + r), cap, dt)
            zh[r] = z / p.z_scale
            yh[r] = y / p.y_scale
            n_cap += kind == "PopulationCap"
            n_extinct += kind == "Extinct"
            per_replica.add(epsilon=p.epsilon, zhat=zh[r], yhat=yh[r], outcome=kind, stream_id=off + r)
        for q in levels:
            table.add(epsilon=p.epsilon, kind="quantile", level=q, zhat=float(np.quantile(zh, q)),
                      yhat=float(np.quantile(yh, q)), laplace_empirical=NAN, laplace_wave=NAN,
                      stream_offset=off)
        w = zh / (2.0 * math.pi**2 * math.exp(math.sqrt(2.0) * alpha))
        emp = laplace_curve(w, lambdas)
        u = np.log(lambdas) / math.sqrt(2.0)
        psi = _OneMinus(theta)
        var = np.array([np.var(np.exp(-lam * w)) for lam in lambdas]) / replicas
        shift, rms = fit_shift(psi, u, emp, 1.0 / np.maximum(var, 1.0 / replicas**2))
        for lam, e, uu in zip(lambdas, emp, u):
            table.add(epsilon=p.epsilon, kind="laplace", level=float(lam), zhat=NAN, yhat=NAN,
                      laplace_empirical=float(e), laplace_wave=float(psi(uu + shift)),
                      stream_offset=off)
        summary[f"{p.epsilon!r}"] = {
            "t": t, "yhat_median": float(np.median(yh)), "zhat_median": float(np.median(zh)),
            "extinct_fraction": n_extinct / replicas,
            "pop_cap_hits": int(n_cap), "laplace_shift": shift, "laplace_rms": rms,
        }
        table.flagged |= n_cap > 0
    table.summary = {"alpha": alpha, "c": c, "replicas": replicas, "per_epsilon": summary}
    table.attachments["replicas"] = per_replica
    return table


class _OneMinus:
    def __init__(self, f):
        self.f = f

    def __call__(self, x):
        return 1.0 - self.f(x)


def run_coalescent(cfg: dict) -> ResultTable:
    """Genealogical partitions of ``n`` sampled particles against Bolthausen-Sznitman.

    One particle starts at ``L + alpha``; the population is sampled at real
    time ``T eps^{-3/2}`` and backward times are measured in units of
    ``eps^{-3/2}``.
    """
    seed = int(cfg.get("master_seed", 0))
    replicas = int(cfg.get("mc", {}).get("replicas", 200))
    cap = int(cfg.get("mc", {}).get("cap", 200_000))
    dt = cfg.get("mc", {}).get("dt")
    plist = param_list(cfg, [0.5])
    n = int(cfg.get("n", 4))
    if not 2 <= n <= 8:
        raise DomainError("n must lie in [2, 8]")
    alpha = float(cfg.get("alpha", 4.0))
    T = float(cfg.get("T", 2.0))
    s_grid = np.array(cfg.get("s_grid", list(np.linspace(0.0, T, 9))), dtype=float)
    rescale = float(cfg.get("time_rescale", DEFAULT_TIME_RESCALE))
    table = ResultTable("coalescent_compare", [
        Column("epsilon", "dimensionless"), Column("s", "time / eps^{-3/2}"),
        Column("mean_blocks_empirical", "count"), Column("mean_blocks_bs", "count"),
        Column("frac_singletons", "fraction"), Column("frac_one_block", "fraction"),
        Column("stream_offset", "stream id"),
    ], provenance=_provenance("coalescent_compare", cfg))
    summary = {}
    for i, p in enumerate(plist):
        unit = p.epsilon ** -1.5
        off = i * replicas
        ens, dropped = [], {"extinct": 0, "too_few": 0, "pop_cap": 0}
        for r in range(replicas):
            spec = SeedSpec(seed, off + r)
            system = ParticleSystem(p, [p.L + alpha], spec,
                                    config=EngineConfig(dt=dt, pop_cap=cap, record_genealogy=True,
                                                        record_hits=False))
            system, outcome, _ = run_until(system, T * unit, StopRule(pop_cap=cap))
            if outcome.kind == "PopulationCap":
                dropped["pop_cap"] += 1
                continue
            if system.size < n:
                dropped["extinct" if system.size == 0 else "too_few"] += 1
                continue
            pick = _sampling_rng(spec).choice(system.ids, size=n, replace=False)
            ens.append(genealogy_process(system.genealogy, [int(v) for v in pick], system.time, unit))
        bs_rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence(seed, spawn_key=(2**63 + i,))))
        ref = bs_ensemble(n, float(s_grid.max()) * rescale, max(len(ens), 1) * 10, bs_rng)
        report = None
        if ens:
            report = compare_coalescents(ens, n, rescale, reference=ref, rng=bs_rng, s_grid=s_grid)
        for s in s_grid:
            parts = [pp.at(s) for pp in ens]
            table.add(
                epsilon=p.epsilon, s=float(s),
                mean_blocks_empirical=float(np.mean([len(q) for q in parts])) if parts else NAN,
                mean_blocks_bs=float(np.mean([pp.block_count(s * rescale) for pp in ref])),
                frac_singletons=float(np.mean([q == singletons(n) for q in parts])) if parts else NAN,
                frac_one_block=float(np.mean([len(q) == 1 for q in parts])) if parts else NAN,
                stream_offset=off,
            )
        drop_rate = sum(dropped.values()) / replicas
        summary[f"{p.epsilon!r}"] = {
            "kept": len(ens), "dropped": dropped, "drop_rate": drop_rate,
            "report": None if report is None else _plain(report.to_json()),
        }
        table.attachments[f"partitions_eps{p.epsilon!r}"] = [pp.to_json() for pp in ens]
    table.summary = {"n": n, "alpha": alpha, "T": T, "time_rescale": rescale, "per_epsilon": summary}
    return table


def _sampling_rng(spec: SeedSpec) -> np.random.Generator:
    ss = np.random.SeedSequence(int(spec.master_seed), spawn_key=(int(spec.stream_id), 1))
    return np.random.Generator(np.random.PCG64(ss))


RUNNERS = {
    "thm1_wave_match": run_thm1,
    "thm2_asymptotic": run_thm2,
    "prop_ic_scaling": run_prop_ic,
    "coalescent_compare": run_coalescent,
    "survival_curve": run_survival_curve,
}


def run_experiment(name: str, cfg: dict) -> ResultTable:
    if name not in RUNNERS:
        raise DomainError(f"unknown experiment {name!r}")
    return RUNNERS[name](cfg)


# ---------------------------------------------------------------- output


def emit_outputs(table: ResultTable, out_dir, formats=("csv", "json")) -> list[Path]:
    """Write the table (and attachments) deterministically; returns the paths."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = []
    for fmt in formats:
        path = out / f"{table.experiment}.{fmt}"
        if fmt == "csv":
            path.write_text(table_to_csv(table))
        elif fmt == "json":
            path.write_text(json.dumps(table.to_json(), indent=1, sort_keys=True) + "\n")
        else:
            raise ValueError(f"unknown format {fmt!r}")
        written.append(path)
    for name, att in sorted(table.attachments.items()):
        if isinstance(att, ResultTable):
            path = out / f"{table.experiment}__{name}.csv"
            path.write_text(table_to_csv(att))
        else:
            path = out / f"{table.experiment}__{name}.json"
            path.write_text(json.dumps(_plain(att), sort_keys=True) + "\n")
        written.append(path)
    return written


def table_to_csv(table: ResultTable) -> str:
    lines = [f"# {k}: {table.provenance[k]}" for k in sorted(table.provenance)]
    lines.append("# units: " + ";".join(f"{c.name}={c.unit}" for c in table.columns))
    lines.append("# flagged: " + ("1" if table.flagged else "0"))
    lines.append("# summary: " + json.dumps(_plain(table.summary), sort_keys=True))
    lines.append(",".join(table.names))
    lines.extend(",".join(_fmt(v) for v in row) for row in table.rows)
    return "\n".join(lines) + "\n"


def read_json_table(path) -> ResultTable:
    return ResultTable.from_json(json.loads(Path(path).read_text()))
