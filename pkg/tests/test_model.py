import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from bbmlab.model import (
    DomainError,
    SeedSpec,
    load_config,
    params_from_config,
    params_from_epsilon,
    params_from_N,
)


def test_epsilon_two_gives_zero_drift():
    p = params_from_epsilon(2.0)
    assert p.mu == 0.0
    assert p.L == pytest.approx(2.221441469079183, abs=1e-12)


def test_epsilon_one():
    p = params_from_epsilon(1.0)
    assert p.mu == 1.0
    assert p.L == pytest.approx(math.pi, abs=1e-15)


def test_epsilon_small_value():
    # sqrt(1.92) and pi / sqrt(0.08) from mpmath at 30 digits
    import mpmath

    mpmath.mp.dps = 30
    p = params_from_epsilon(0.08)
    assert p.mu == pytest.approx(float(mpmath.sqrt(mpmath.mpf("1.92"))), abs=1e-14)
    assert p.L == pytest.approx(float(mpmath.pi / mpmath.sqrt(mpmath.mpf("0.08"))), abs=1e-13)
    assert round(p.mu, 7) == 1.3856406
    assert round(p.L, 6) == 11.107207


@pytest.mark.parametrize("eps", [0.0, -1.0, 2.0000001, math.nan, 5.0])
def test_epsilon_out_of_domain(eps):
    with pytest.raises(DomainError):
        params_from_epsilon(eps)


def test_n_fifteen():
    p = params_from_N(15)
    assert p.L == pytest.approx((math.log(15) + 3 * math.log(math.log(15))) / math.sqrt(2), abs=1e-12)
    assert p.L == pytest.approx(4.0282, abs=1e-4)
    assert p.N == 15


@pytest.mark.parametrize("bad", [2, 1, 0, -4, 15.0, 15.5, True])
def test_n_rejected(bad):
    with pytest.raises(DomainError):
        params_from_N(bad)


@pytest.mark.parametrize("n", [3, 4, 5])
def test_small_n_gives_epsilon_above_two(n):
    # log N + 3 log log N < pi for these N, so mu would be imaginary
    with pytest.raises(DomainError):
        params_from_N(n)


def test_epsilon_decreases_with_n():
    eps = [params_from_N(n).epsilon for n in (10**3, 10**4, 10**6, 10**9, 10**15)]
    assert all(a > b for a, b in zip(eps, eps[1:]))


@settings(max_examples=200, deadline=None)
@given(st.floats(min_value=1e-9, max_value=2.0, allow_nan=False, exclude_min=False))
def test_invariants_hold(eps):
    p = params_from_epsilon(eps)
    p.check()
    assert abs(p.L * math.sqrt(p.epsilon) - math.pi) < 1e-12
    assert abs(p.mu**2 + p.epsilon - 2.0) < 1e-12
    assert abs(1 - p.mu**2 / 2 - math.pi**2 / (2 * p.L**2)) < 1e-12


@settings(max_examples=100, deadline=None)
@given(st.integers(min_value=6, max_value=10**30))
def test_n_round_trip(n):
    p = params_from_N(n)
    q = params_from_epsilon(p.epsilon)
    assert abs(p.L - q.L) < 1e-12
    assert p.mu == q.mu


def test_params_are_frozen():
    p = params_from_epsilon(1.0)
    with pytest.raises(Exception):
        p.mu = 2.0


def test_seed_spec_replay_and_independence():
    a = SeedSpec(7, 3).generator().random(5)
    b = SeedSpec(7, 3).generator().random(5)
    c = SeedSpec(7, 4).generator().random(5)
    d = SeedSpec(8, 3).generator().random(5)
    assert np.array_equal(a, b)
    assert not np.array_equal(a, c)
    assert not np.array_equal(a, d)


def test_seed_streams_uncorrelated():
    x = np.concatenate([SeedSpec(1, k).generator().standard_normal(2000) for k in range(2)])
    r = np.corrcoef(x[:2000], x[2000:])[0, 1]
    assert abs(r) < 4 / math.sqrt(2000)


def test_config_json_and_toml(tmp_path):
    j = tmp_path / "c.json"
    j.write_text(json.dumps({"epsilon": 0.5, "a": 1.5, "master_seed": 3}))
    p = params_from_config(load_config(j))
    assert p.epsilon == 0.5 and p.a == 1.5
    t = tmp_path / "c.toml"
    t.write_text('N = 1000\na = 0.0\nmaster_seed = 4\n')
    p = params_from_config(load_config(t))
    assert p.N == 1000


@pytest.mark.parametrize("cfg", [{}, {"epsilon": 1.0, "N": 100}])
def test_config_needs_exactly_one_parameterization(cfg):
    with pytest.raises(DomainError):
        params_from_config(cfg)
