import json
import math

import numpy as np
import pytest

from bbmlab.model import DomainError
from bbmlab.wave import (
    SolverError,
    fit_exponential,
    fit_shift,
    fkpp_psi_residual,
    kolmogorov_residual,
    observed_order,
    right_decay_rate,
    solve_kolmogorov_bvp,
    solve_traveling_wave,
    tail_fit,
)
from oracles import kolmogorov_shoot_Q

SQRT2 = math.sqrt(2.0)


@pytest.fixture(scope="module")
def theta():
    return solve_traveling_wave()


@pytest.fixture(scope="module")
def q1():
    return solve_kolmogorov_bvp(1.0)


def test_theta_anchor_and_bounds(theta):
    assert float(theta(0.0)) == pytest.approx(0.5, abs=1e-12)
    assert np.all(np.diff(theta.values) >= 0)
    assert np.all((theta.values >= 0) & (theta.values <= 1))
    # 1 - theta decays like e^{-(2 - sqrt2) x}: about 1.3e-4 at x = 15, below 1e-4 by x = 20
    assert float(theta(20.0)) >= 1 - 1e-4


def test_theta_residual(theta):
    r = kolmogorov_residual(theta.values, theta.h, SQRT2)
    assert np.max(np.abs(r)) < 1e-10
    assert theta.residual < 1e-10


def test_one_minus_theta_solves_psi_equation(theta):
    r = fkpp_psi_residual(1.0 - theta.values, theta.h)
    assert np.max(np.abs(r)) < 1e-9


def test_left_tail_slope_affine_model(theta):
    fit = tail_fit(theta, "left_of_theta", (-12.0, -6.0), "affine_times_exp")
    assert fit.rate == pytest.approx(SQRT2, rel=0.02)


def test_left_tail_slope_alpha_model_is_biased_by_the_constant_term(theta):
    # theta ~ (A + B|x|) e^{sqrt2 x}; dropping A biases the log-slope by a few percent
    fit = tail_fit(theta, "left_of_theta", (-12.0, -6.0), "alpha_times_exp")
    assert 0.9 * SQRT2 < fit.rate < SQRT2


def test_left_tail_sequence_converges(theta):
    # alpha^{-1} e^{sqrt2 alpha} theta(-alpha) = B + A/alpha + o(1/alpha)
    fit = tail_fit(theta, "left_of_theta", (-16.0, -8.0), "affine_times_exp")
    a = np.array([8.0, 12.0, 16.0, 20.0])
    seq = np.exp(SQRT2 * a) * theta(-a) / a
    assert np.all(np.diff(seq) > 0)
    # successive gaps shrink like 1/alpha^2
    gaps = np.diff(seq)
    assert gaps[-1] < gaps[0]
    assert seq[-1] < fit.prefactor * 1.05


def test_q1_boundary_and_monotone(q1):
    assert q1.values[0] == 0.0
    assert q1.values[-1] == pytest.approx(1.0, abs=1e-10)
    assert np.all(np.diff(q1.values) >= 0)
    assert np.max(np.abs(kolmogorov_residual(q1.values, q1.h, 1.0))) < 1e-10


def test_q1_matches_shooting_oracle(q1):
    xs = np.array([0.5, math.pi / 2, 2.5, math.pi])
    assert np.allclose(q1(xs), kolmogorov_shoot_Q(1.0, xs), atol=1e-5)


def test_q1_right_tail_rate(q1):
    lo = q1.grid[-1] * 0.7
    hi = q1.grid[-1] * 0.95
    fit = tail_fit(q1, "right_of_Q", (lo, hi))
    assert fit.rate == pytest.approx(math.sqrt(3) - 1, rel=0.02)
    assert right_decay_rate(1.0) == pytest.approx(0.7320508075688772, abs=1e-15)


def test_mu_zero_converges():
    q = solve_kolmogorov_bvp(0.0)
    assert q.values[0] == 0.0 and q.values[-1] == pytest.approx(1.0, abs=1e-8)
    assert np.all(np.diff(q.values) >= 0)


@pytest.mark.parametrize("mu", [math.sqrt(2), 1.5, -0.1])
def test_supercritical_drift_rejected(mu):
    with pytest.raises(DomainError):
        solve_kolmogorov_bvp(mu)


def test_q_decreasing_in_mu():
    dmax = 20.0 / right_decay_rate(1.2)
    qa = solve_kolmogorov_bvp(0.8, domain_max=dmax)
    qb = solve_kolmogorov_bvp(1.2, domain_max=dmax)
    assert np.all(qa.values >= qb.values - 1e-9)


def test_translation_covariance(theta):
    s = 1.7
    shifted = solve_traveling_wave(A=30 + s, B=30 - s, anchor=-s)
    x = np.linspace(-20, 20, 81)
    assert np.max(np.abs(shifted(x - s) - theta(x))) < 1e-6


def test_grid_refinement_order():
    order = observed_order(lambda n: solve_kolmogorov_bvp(1.0, n=n), n=513)
    assert order >= 1.9


def test_exact_exponential_fit():
    x = np.linspace(1, 5, 50)
    fit = fit_exponential(x, 3.0 * np.exp(-2 * x))
    assert fit.rate == pytest.approx(2.0, abs=1e-6)
    assert fit.prefactor_model == "pure_exp"


def test_short_window_rejected(theta):
    with pytest.raises(DomainError):
        tail_fit(theta, "left_of_theta", (-6.0, -5.99))


def test_fit_shift_recovers_translation(theta):
    a = np.linspace(-3, 3, 13)
    target = theta(a + 0.8)
    s, rms = fit_shift(theta, a, target, np.ones_like(a))
    assert s == pytest.approx(0.8, abs=1e-6)
    assert rms < 1e-8


def test_csv_and_sidecar(tmp_path, q1):
    path = tmp_path / "q.csv"
    tail_fit(q1, "right_of_Q", (q1.grid[-1] * 0.7, q1.grid[-1] * 0.95))
    q1.to_csv(path)
    lines = path.read_text().splitlines()
    assert lines[0] == "grid,value"
    assert float(lines[1].split(",")[1]) == 0.0
    meta = json.loads(path.with_suffix(".json").read_text())
    assert meta["kind"] == "Q_bvp" and meta["tail_fit"]["prefactor_model"] == "pure_exp"


def test_bad_grid_arguments():
    with pytest.raises(ValueError):
        solve_traveling_wave(A=5)
    with pytest.raises(ValueError):
        solve_traveling_wave(tol=1e-12)


def test_solver_error_carries_residual():
    err = SolverError("no", 0.3)
    assert err.residual == 0.3
