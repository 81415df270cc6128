"""Reference computations that do not go through the package code paths."""
import math

import numpy as np
from scipy.integrate import solve_ivp
from scipy.stats import norm


def csbp_flow_ode(lam: float, t: float, a: float) -> float:
    """Integrate du/dt = -(a u + 2 pi^2 u log u) from u(0) = lam (DOP853, rtol 1e-12)."""
    if t == 0:
        return lam
    # log u obeys a linear ODE but integrating u itself keeps the oracle independent
    sol = solve_ivp(
        lambda _, u: -(a * u + 2 * math.pi**2 * u * np.log(u)),
        (0.0, t), [lam], method="DOP853", rtol=1e-13, atol=1e-300,
    )
    return float(sol.y[0, -1])


def bridge_no_cross_fine(a: float, b: float, dt: float, n_paths: int, k: int,
                         rng: np.random.Generator, chunk: int = 5000):
    """Brownian bridges from a to b over [0, dt] sampled on k sub-intervals.

    Returns per-path probabilities of touching 0, combining the sampled
    grid with the leaf-level bridge factor exp(-2 x y / h).  Exact for any
    k if that factor is right; a wrong leaf factor would leave an O(sqrt h)
    bias that shrinks as k grows.
    """
    h = dt / k
    out = np.empty(n_paths)
    s = np.linspace(0.0, dt, k + 1)
    for start in range(0, n_paths, chunk):
        m = min(chunk, n_paths - start)
        w = np.zeros((m, k + 1))
        w[:, 1:] = np.cumsum(rng.standard_normal((m, k)) * math.sqrt(h), axis=1)
        x = a + w - (s / dt) * (w[:, -1:] - (b - a))
        x0, x1 = x[:, :-1], x[:, 1:]
        below = (x0 <= 0) | (x1 <= 0)
        with np.errstate(over="ignore"):
            p_leaf = np.where(below, 1.0, np.exp(-2.0 * np.maximum(x0, 0) * np.maximum(x1, 0) / h))
        out[start:start + m] = 1.0 - np.prod(1.0 - p_leaf, axis=1)
    return out


def bridge_discrete_monitor(a, b, dt, n_paths, k, rng):
    """Crossing frequency when only grid points are checked (biased low)."""
    h = dt / k
    s = np.linspace(0.0, dt, k + 1)
    w = np.zeros((n_paths, k + 1))
    w[:, 1:] = np.cumsum(rng.standard_normal((n_paths, k)) * math.sqrt(h), axis=1)
    x = a + w - (s / dt) * (w[:, -1:] - (b - a))
    return float(np.mean(np.any(x <= 0, axis=1)))


def reflection_cdf(t, x: float = 1.0):
    """P(standard BM from x hits 0 by time t) = 2 Phi(-x / sqrt t)."""
    t = np.asarray(t, dtype=float)
    return 2.0 * norm.cdf(-x / np.sqrt(t))


def drifted_hitting_cdf(t, x: float, mu: float):
    """P(BM with drift -mu from x hits 0 by time t) (inverse Gaussian law)."""
    t = np.asarray(t, dtype=float)
    st = np.sqrt(t)
    return norm.cdf((mu * t - x) / st) + np.exp(2.0 * mu * x) * norm.cdf(-(mu * t + x) / st)


def bs_rate_beta(b: int, k: int) -> float:
    """lambda_{b,k} as the Beta integral, by quadrature."""
    from scipy.integrate import quad

    return quad(lambda x: x ** (k - 2) * (1 - x) ** (b - k), 0.0, 1.0, epsabs=1e-14)[0]


def gw_q_bisect(pgf, tol: float = 1e-14) -> float:
    """Smallest root of g(s) = s in [0, 1) by bisection on g(s) - s (supercritical laws)."""
    lo, hi = 0.0, 1.0 - 1e-12
    # g(s) - s > 0 below q and < 0 on (q, 1)
    if pgf(hi) - hi > 0:
        return 1.0
    while hi - lo > tol:
        mid = 0.5 * (lo + hi)
        if pgf(mid) - mid > 0:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)


def kolmogorov_shoot_Q(mu: float, x_eval, x_max: float = 40.0):
    """Q_mu by shooting on the initial slope, an alternative to the collocation solver."""
    from scipy.optimize import brentq

    def over(_, y):
        return y[0] - 1.0
    over.terminal = True

    def turn(_, y):
        return y[1]
    turn.terminal = True
    turn.direction = -1

    def classify(slope):
        # overshooting 1 means the slope is too large; turning back down means too small
        sol = solve_ivp(lambda _, y: [y[1], 2 * (mu * y[1] - y[0] * (1 - y[0]))],
                        (0, x_max), [0.0, slope], rtol=1e-12, atol=1e-14, events=[over, turn])
        if sol.t_events[0].size:
            return 1.0
        if sol.t_events[1].size:
            return -1.0
        return 0.0

    lo, hi = 1e-6, 5.0
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        c = classify(mid)
        if c > 0:
            hi = mid
        else:
            lo = mid
        if hi - lo < 1e-13:
            break
    slope = 0.5 * (lo + hi)
    sol = solve_ivp(lambda _, y: [y[1], 2 * (mu * y[1] - y[0] * (1 - y[0]))],
                    (0, max(np.max(x_eval), 1.0)), [0.0, slope], rtol=1e-11, atol=1e-13,
                    dense_output=True)
    return sol.sol(np.asarray(x_eval, dtype=float))[0]
