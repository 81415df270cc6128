import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from bbmlab.engine import BarrierSpec, EngineConfig, functional_ensemble
from bbmlab.functionals import (
    ConfigurationError,
    compute_V,
    compute_Y,
    compute_Z,
    martingale_report,
    sample_functionals,
    v_stopped_term,
    write_timeseries_csv,
    z_indicator,
    z_killed,
)
from bbmlab.model import params_from_epsilon

P1 = params_from_epsilon(1.0)


def test_empty_configuration():
    assert compute_Z([], P1) == 0.0
    assert compute_Y([], P1) == 0.0
    assert compute_V([], P1, 3.0) == 0.0
    s = sample_functionals([], P1, 1.0)
    assert (s.Z, s.Y, s.V, s.M) == (0.0, 0.0, 0.0, 0)


def test_z_values():
    assert abs(compute_Z([P1.L], P1)) < 1e-12
    assert compute_Z([math.pi / 2], P1) == pytest.approx(math.exp(math.pi / 2), abs=1e-12)
    assert round(compute_Z([math.pi / 2], P1), 6) == 4.810477


def test_z_indicator_drops_particles_above_L():
    x = [1.0, P1.L + 0.5]
    assert z_indicator(x, P1) == pytest.approx(math.exp(1.0) * math.sin(1.0))
    # without the indicator the negative sine above L is summed
    assert z_killed(x, P1) < z_indicator(x, P1)


def test_y_values():
    assert compute_Y([0.0], P1) == 1.0
    assert compute_Y([0.0, 1.0], P1) == pytest.approx(1 + math.e, abs=1e-12)


def test_v_values():
    assert compute_V([1.0], P1, 0.0) == pytest.approx(math.e, abs=1e-12)
    assert compute_V([2.0], P1, 1.0) == pytest.approx(2 * math.exp(1.5), abs=1e-12)
    assert round(compute_V([2.0], P1, 1.0), 6) == 8.963378
    with pytest.raises(ValueError):
        compute_V([1.0], P1, -1.0)


def test_stopped_term_matches_live_particle_formula():
    assert v_stopped_term(3, 2.0, P1, 1.0) == pytest.approx(3 * compute_V([2.0], P1, 1.0))


@settings(max_examples=200, deadline=None)
@given(
    st.floats(min_value=0.05, max_value=2.0),
    st.lists(st.floats(min_value=0.0, max_value=10.0), max_size=30),
)
def test_z_bounded_by_y(eps, xs):
    p = params_from_epsilon(eps)
    z, y = compute_Z(xs, p), compute_Y(xs, p)
    assert y >= 0
    assert z <= y * (1 + 1e-12)
    assert z >= -1e-12 * max(1.0, y)


def test_kahan_sum_stays_accurate():
    xs = np.concatenate([[P1.L / 2], np.full(100_000, 1e-6)])
    exact = math.fsum(math.exp(x) * math.sin(math.pi * x / P1.L) for x in xs)
    assert compute_Z(xs, P1) == pytest.approx(exact, rel=1e-14)


def test_z_bar_martingale_small_ensemble():
    times = [0.5, 1.0, 2.0]
    ens = functional_ensemble(math.pi / 2, P1, times, 2000, 11, BarrierSpec(upper=P1.L, upper_mode="kill"))
    rep = martingale_report(ens, "Z_killed_at_L", P1)
    assert rep.initial == pytest.approx(math.exp(math.pi / 2))
    assert rep.passes(3.5)


def test_barrier_mismatch_is_a_configuration_error():
    ens = functional_ensemble(1.0, P1, [0.5], 5, 1)
    with pytest.raises(ConfigurationError):
        martingale_report(ens, "Z_killed_at_L", P1)
    killed = functional_ensemble(1.0, P1, [0.5], 5, 1, BarrierSpec(upper=P1.L, upper_mode="kill"))
    with pytest.raises(ConfigurationError):
        martingale_report(killed, "V_stopped_at_upper", P1)
    with pytest.raises(ValueError):
        martingale_report(ens, "W", P1)


def test_v_pure_drifted_bm_is_nonincreasing():
    cfg = EngineConfig(branch_rate=0.0, record_hits=False)
    ens = functional_ensemble(1.0, P1, [0.5, 1.0, 2.0, 4.0], 4000, 5, config=cfg)
    rep = martingale_report(ens, "V_stopped_at_upper", P1)
    assert rep.passes() and rep.increments_pass()


def test_extinct_ensemble_is_zero_late():
    p = params_from_epsilon(1.9)
    ens = functional_ensemble(0.05, p, [30.0], 30, 2)
    dead = ens.M[:, -1] == 0
    assert dead.any()
    assert np.all(ens.Z[dead, -1] == 0) and np.all(ens.Y[dead, -1] == 0) and np.all(ens.V_live[dead, -1] == 0)


def test_timeseries_csv(tmp_path):
    path = tmp_path / "ts.csv"
    write_timeseries_csv(path, [(0.0, 1, 2.0, 3.0, 4.0, 0), (0.5, 2, 2.5, 3.5, 4.5, 0)])
    lines = path.read_text().splitlines()
    assert lines[0] == "time,M,Z,Y,V,replica_id"
    assert lines[2] == "0.5,2,2.5,3.5,4.5,0"
