"""Traveling-wave and survival-probability boundary-value problems.

Both problems are instances of the stationary Kolmogorov equation

    1/2 u'' = mu u' - u (1 - u)

on a truncated interval.  The traveling wave is the critical case
``mu = sqrt(2)`` on the whole line, pinned by ``u(0) = 1/2``; the survival
probability ``Q_mu`` lives on ``[0, inf)`` with ``Q(0) = 0``.

Discretization is second-order central collocation on a uniform grid solved
by damped Newton.  The right end uses the stable manifold of ``u = 1``
expanded to second order, ``w' = k w + c w^2`` with ``w = 1 - u``, so the
truncation error there is O(w^3).
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla
from scipy.integrate import solve_ivp

from .model import DomainError

SQRT2 = math.sqrt(2.0)


class SolverError(RuntimeError):
    """Newton iteration failed; carries the last residual norm."""

    def __init__(self, message: str, residual: float):
        super().__init__(f"{message} (residual={residual:.3e})")
        self.residual = residual


@dataclass
class TailFit:
    rate: float
    prefactor_model: str
    goodness: float
    prefactor: float
    window: tuple[float, float]


@dataclass
class WaveSolution:
    grid: np.ndarray
    values: np.ndarray
    kind: str
    mu: float
    normalization: str
    residual: float
    tail_fit: Optional[TailFit] = None
    meta: dict = field(default_factory=dict)

    @property
    def h(self) -> float:
        return float(self.grid[1] - self.grid[0])

    def __call__(self, x):
        """Evaluate by cubic interpolation; outside the grid the boundary value is held."""
        from scipy.interpolate import CubicSpline

        if "_spline" not in self.meta:
            self.meta["_spline"] = CubicSpline(self.grid, self.values)
        x = np.asarray(x, dtype=float)
        out = self.meta["_spline"](np.clip(x, self.grid[0], self.grid[-1]))
        return np.clip(out, 0.0, 1.0)

    def to_csv(self, path) -> None:
        path = Path(path)
        with open(path, "w") as fh:
            fh.write("grid,value\n")
            for g, v in zip(self.grid, self.values):
                fh.write(f"{float(g)!r},{float(v)!r}\n")
        sidecar = {
            "kind": self.kind,
            "mu": self.mu,
            "normalization": self.normalization,
            "residual": self.residual,
            "tail_fit": None
            if self.tail_fit is None
            else {
                "rate": self.tail_fit.rate,
                "prefactor_model": self.tail_fit.prefactor_model,
                "prefactor": self.tail_fit.prefactor,
                "goodness": self.tail_fit.goodness,
                "window": list(self.tail_fit.window),
            },
        }
        path.with_suffix(".json").write_text(json.dumps(sidecar, indent=2, sort_keys=True))


def right_decay_rate(mu: float) -> float:
    """Decay rate of ``1 - u`` at +infinity: ``sqrt(mu^2 + 2) - mu``."""
    return math.sqrt(mu * mu + 2.0) - mu


def _manifold_coeffs(mu: float) -> tuple[float, float]:
    # w' = k w + c w^2 on the stable manifold of u = 1
    k = mu - math.sqrt(mu * mu + 2.0)
    c = -1.0 / (1.5 * k - mu)
    return k, c


def kolmogorov_residual(u: np.ndarray, h: float, mu: float) -> np.ndarray:
    """Discrete residual ``1/2 u'' - mu u' + u(1-u)`` on interior points."""
    d2 = (u[2:] - 2.0 * u[1:-1] + u[:-2]) / (h * h)
    d1 = (u[2:] - u[:-2]) / (2.0 * h)
    mid = u[1:-1]
    return 0.5 * d2 - mu * d1 + mid * (1.0 - mid)


def fkpp_psi_residual(psi: np.ndarray, h: float) -> np.ndarray:
    """Discrete residual of ``1/2 psi'' - sqrt2 psi' - psi(1 - psi)``."""
    d2 = (psi[2:] - 2.0 * psi[1:-1] + psi[:-2]) / (h * h)
    d1 = (psi[2:] - psi[:-2]) / (2.0 * h)
    mid = psi[1:-1]
    return 0.5 * d2 - SQRT2 * d1 - mid * (1.0 - mid)


def _interp_weights(grid: np.ndarray, x: float) -> tuple[np.ndarray, np.ndarray]:
    """Cubic Lagrange weights for evaluating a grid function at ``x``."""
    n = len(grid)
    h = grid[1] - grid[0]
    j = int(round((x - grid[0]) / h))
    if abs(grid[0] + j * h - x) < 1e-12 * max(1.0, abs(x)):
        return np.array([j]), np.array([1.0])
    j = int(math.floor((x - grid[0]) / h))
    idx = np.clip(np.arange(j - 1, j + 3), 0, n - 1)
    idx = np.unique(idx)
    pts = grid[idx]
    w = np.ones(len(idx))
    for a in range(len(idx)):
        for b in range(len(idx)):
            if a != b:
                w[a] *= (x - pts[b]) / (pts[a] - pts[b])
    return idx, w


def _newton(u, residual_fn, jacobian_fn, tol, max_iter=100):
    r = residual_fn(u)
    rn = np.max(np.abs(r))
    for _ in range(max_iter):
        if rn <= tol * 1e-2:
            break
        du = spla.spsolve(jacobian_fn(u).tocsc(), -r)
        step = 1.0
        while True:
            trial = u + step * du
            rt = residual_fn(trial)
            rtn = np.max(np.abs(rt))
            if rtn < (1.0 - 1e-4 * step) * rn or step < 1e-6:
                break
            step *= 0.5
        if step < 1e-6 and rtn >= rn:
            if rn <= tol:
                break  # at rounding level
            raise SolverError("Newton line search stalled", rn)
        u, r, rn = trial, rt, rtn
    if rn > tol:
        raise SolverError("Newton iteration did not converge", rn)
    return u, rn


def _assemble(u, h, mu, left):
    """Residual and Jacobian of the collocated BVP.

    ``left`` is ("dirichlet", value) or ("anchor", (idx, weights, value)).
    Row 0 holds the left condition, rows 1..n-2 the ODE, row n-1 the
    right-end manifold condition.
    """
    n = len(u)
    k, c = _manifold_coeffs(mu)
    res = np.empty(n)
    res[1:-1] = kolmogorov_residual(u, h, mu)
    w = 1.0 - u[-1]
    dw = -(3.0 * u[-1] - 4.0 * u[-2] + u[-3]) / (2.0 * h)
    res[-1] = dw - k * w - c * w * w
    kind, cond = left
    if kind == "dirichlet":
        res[0] = u[0] - cond
    else:
        idx, wts, val = cond
        res[0] = float(np.dot(wts, u[idx])) - val

    mid = u[1:-1]
    lower = np.full(n - 2, 0.5 / h**2 + mu / (2 * h))
    diag = np.full(n - 2, -1.0 / h**2) + (1.0 - 2.0 * mid)
    upper = np.full(n - 2, 0.5 / h**2 - mu / (2 * h))
    rows = np.arange(1, n - 1)
    r_i = [rows, rows, rows]
    c_i = [rows - 1, rows, rows + 1]
    v_i = [lower, diag, upper]
    # right row: d/du of dw - k w - c w^2 with w = 1 - u[-1]
    r_i.append(np.full(3, n - 1))
    c_i.append(np.array([n - 3, n - 2, n - 1]))
    v_i.append(np.array([-1.0 / (2 * h), 4.0 / (2 * h), -3.0 / (2 * h) + k + 2 * c * w]))
    if kind == "dirichlet":
        r_i.append(np.array([0]))
        c_i.append(np.array([0]))
        v_i.append(np.array([1.0]))
    else:
        idx, wts, _ = cond
        r_i.append(np.zeros(len(idx), dtype=int))
        c_i.append(np.asarray(idx))
        v_i.append(np.asarray(wts, dtype=float))
    jac = sp.coo_matrix(
        (np.concatenate(v_i), (np.concatenate(r_i), np.concatenate(c_i))), shape=(n, n)
    )
    return res, jac


def _solve(grid, mu, left, guess, tol):
    h = float(grid[1] - grid[0])

    def resid(u):
        return _assemble(u, h, mu, left)[0]

    def jac(u):
        return _assemble(u, h, mu, left)[1]

    u, rn = _newton(guess.copy(), resid, jac, tol)
    return u, float(np.max(np.abs(kolmogorov_residual(u, h, mu))))


def solve_traveling_wave(
    A: float = 30.0,
    B: float = 30.0,
    n: int = 4097,
    tol: float = 1e-10,
    anchor: float = 0.0,
) -> WaveSolution:
    """Monotone solution of ``1/2 theta'' = sqrt2 theta' - theta(1 - theta)`` on [-A, B].

    The translation is fixed by ``theta(anchor) = 1/2``.  No condition is
    imposed at the left end: near 0 both linear modes decay as alpha -> -inf,
    so integrating leftward from the right-end manifold is stable and the
    left value is whatever the equation produces.
    """
    if A < 10 or B < 10:
        raise ValueError("grid must cover at least [-10, 10]")
    if tol < 1e-10:
        raise ValueError("tol must be >= 1e-10")
    if not (-A < anchor < B):
        raise ValueError("anchor must lie inside the grid")
    grid = np.linspace(-A, B, n)
    idx, wts = _interp_weights(grid, anchor)
    guess = 1.0 / (1.0 + np.exp(-(grid - anchor)))
    u, res = _solve(grid, SQRT2, ("anchor", (idx, wts, 0.5)), guess, tol)
    return WaveSolution(
        grid=grid,
        values=np.clip(u, 0.0, 1.0),
        kind="theta_wave",
        mu=SQRT2,
        normalization=f"theta({anchor})=1/2",
        residual=res,
    )


def min_domain_max(mu: float) -> float:
    return 20.0 / right_decay_rate(mu)


def default_domain_max(mu: float) -> float:
    """Wide enough that ``1 - Q`` at the right end is below 1e-10."""
    return 26.0 / right_decay_rate(mu)


def solve_kolmogorov_bvp(
    mu: float,
    domain_max: Optional[float] = None,
    tol: float = 1e-10,
    n: int = 4097,
) -> WaveSolution:
    """Survival probability ``Q_mu`` on [0, domain_max] with ``Q(0) = 0``."""
    if not (0.0 <= mu < SQRT2):
        raise DomainError(f"mu={mu} outside [0, sqrt 2): no nontrivial survival probability")
    min_domain = min_domain_max(mu)
    if domain_max is None:
        domain_max = default_domain_max(mu)
    if domain_max < min_domain - 1e-12:
        raise ValueError(f"domain_max must be >= {min_domain:.4f}")
    grid = np.linspace(0.0, domain_max, n)
    # a fast-rising profile keeps Newton away from the trivial root Q = 0
    guess = np.tanh(grid)
    u, res = _solve(grid, mu, ("dirichlet", 0.0), guess, tol)
    u[0] = 0.0
    return WaveSolution(
        grid=grid,
        values=np.clip(u, 0.0, 1.0),
        kind="Q_bvp",
        mu=float(mu),
        normalization="Q(0)=0",
        residual=res,
    )


def shoot_kolmogorov(mu: float, slope: float, x_max: float) -> tuple[np.ndarray, np.ndarray]:
    """Diagnostic shooting from ``Q(0)=0, Q'(0)=slope`` with an adaptive integrator."""

    def rhs(_, y):
        q, dq = y
        return [dq, 2.0 * (mu * dq - q * (1.0 - q))]

    sol = solve_ivp(rhs, (0.0, x_max), [0.0, slope], rtol=1e-11, atol=1e-13, dense_output=True)
    xs = np.linspace(0.0, x_max, 400)
    return xs, sol.sol(xs)[0]


def tail_fit(
    solution: WaveSolution,
    side: str,
    window: tuple[float, float],
    model: Optional[str] = None,
) -> TailFit:
    """Least-squares fit of the exponential tail on ``window``.

    ``left_of_theta`` fits ``log u`` (default model ``alpha_times_exp``,
    i.e. ``u ~ C |x| e^{r x}``); ``right_of_Q`` fits ``log(1 - u)`` with a
    pure exponential ``C e^{-r x}``.  The returned rate is positive in both
    cases.
    """
    lo, hi = window
    mask = (solution.grid >= lo) & (solution.grid <= hi)
    if mask.sum() < 20:
        raise DomainError("tail window holds fewer than 20 grid points")
    x = solution.grid[mask]
    if side == "left_of_theta":
        y = np.log(solution.values[mask])
        model = model or "alpha_times_exp"
        sign = 1.0
    elif side == "right_of_Q":
        y = np.log(1.0 - solution.values[mask])
        model = model or "pure_exp"
        sign = -1.0
    else:
        raise ValueError(f"unknown side {side!r}")
    if model == "affine_times_exp":
        fit = _affine_exp_fit(x, solution.values[mask] if sign > 0 else 1.0 - solution.values[mask])
        fit = TailFit(rate=sign * fit.rate, prefactor_model=model, goodness=fit.goodness,
                      prefactor=fit.prefactor, window=(float(lo), float(hi)))
        solution.tail_fit = fit
        return fit
    if model == "alpha_times_exp":
        y = y - np.log(np.abs(x))
    elif model != "pure_exp":
        raise ValueError(f"unknown prefactor model {model!r}")
    slope, intercept = np.polyfit(x, y, 1)
    fitted = slope * x + intercept
    goodness = float(np.sqrt(np.mean((y - fitted) ** 2)) / max(np.ptp(y), 1e-300))
    fit = TailFit(
        rate=float(sign * slope),
        prefactor_model=model,
        goodness=goodness,
        prefactor=float(math.exp(intercept)),
        window=(float(lo), float(hi)),
    )
    solution.tail_fit = fit
    return fit


def _affine_exp_fit(x: np.ndarray, u: np.ndarray) -> TailFit:
    """Fit ``u ~ (A + B|x|) e^{r x}`` by variable projection on ``r``.

    For fixed ``r`` the coefficients solve a linear least-squares problem in
    relative error; ``r`` is then found by a bounded scalar search.
    """
    from scipy.optimize import minimize_scalar

    ax = np.abs(x)

    def solve(r):
        e = np.exp(r * x)
        basis = np.column_stack([e / u, ax * e / u])
        coef, *_ = np.linalg.lstsq(basis, np.ones_like(u), rcond=None)
        return coef, basis @ coef - 1.0

    def loss(r):
        return float(np.sum(solve(r)[1] ** 2))

    grid = np.linspace(-5.0, 5.0, 401)
    r0 = grid[int(np.argmin([loss(r) for r in grid]))]
    best = minimize_scalar(loss, bounds=(r0 - 0.025, r0 + 0.025), method="bounded",
                           options={"xatol": 1e-12})
    r = float(best.x)
    coef, res = solve(r)
    return TailFit(rate=r, prefactor_model="affine_times_exp",
                   goodness=float(np.sqrt(np.mean(res**2))), prefactor=float(coef[1]),
                   window=(float(x[0]), float(x[-1])))


def fit_exponential(x: np.ndarray, values: np.ndarray, model: str = "pure_exp") -> TailFit:
    """Tail fit on raw samples (``values ~ C e^{-r x}``), used for synthetic checks."""
    x = np.asarray(x, dtype=float)
    y = np.log(np.asarray(values, dtype=float))
    if len(x) < 20:
        raise DomainError("tail window holds fewer than 20 grid points")
    if model == "alpha_times_exp":
        y = y - np.log(np.abs(x))
    slope, intercept = np.polyfit(x, y, 1)
    resid = y - (slope * x + intercept)
    return TailFit(
        rate=float(-slope),
        prefactor_model=model,
        goodness=float(np.sqrt(np.mean(resid**2)) / max(np.ptp(y), 1e-300)),
        prefactor=float(math.exp(intercept)),
        window=(float(x[0]), float(x[-1])),
    )


def observed_order(solver, n: int = 1025) -> float:
    """Observed convergence order from three nested grids (n, 2n-1, 4n-3 points)."""
    coarse = solver(n)
    mid = solver(2 * n - 1)
    fine = solver(4 * n - 3)
    e1 = np.max(np.abs(coarse.values - mid.values[::2]))
    e2 = np.max(np.abs(mid.values[::2] - fine.values[::4]))
    return math.log2(e1 / e2)


def fit_shift(
    wave: WaveSolution,
    alphas: np.ndarray,
    estimates: np.ndarray,
    weights: np.ndarray,
    bracket: tuple[float, float] = (-10.0, 10.0),
) -> tuple[float, float]:
    """Scalar shift ``s`` minimizing ``sum w (est - wave(alpha + s))^2``.

    Returns ``(s, weighted_rms)``.
    """
    from scipy.optimize import minimize_scalar

    alphas = np.asarray(alphas, dtype=float)
    estimates = np.asarray(estimates, dtype=float)
    weights = np.asarray(weights, dtype=float)

    def loss(s):
        return float(np.sum(weights * (estimates - wave(alphas + s)) ** 2))

    coarse = np.linspace(bracket[0], bracket[1], 201)
    s0 = coarse[int(np.argmin([loss(s) for s in coarse]))]
    step = coarse[1] - coarse[0]
    best = minimize_scalar(loss, bounds=(s0 - step, s0 + step), method="bounded",
                           options={"xatol": 1e-10})
    s = float(best.x)
    rms = math.sqrt(loss(s) / np.sum(weights))
    return s, rms
