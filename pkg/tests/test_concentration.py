import numpy as np
import pytest

from bloch_oracle import simulate_centre_echo
from adcinv.concentration import (CSF_T1_MS, MprageError, MprageParams, build_lookup, concentration_from_T1,
                                  concentration_from_ratio, csf_concentration, mprage_f, signal_change_percent)

GENERIC = MprageParams(theta=np.deg2rad(8.0), T_a=900.0, T_b=5.1, TR=2000.0, m=200, r1=2.0)


def _oracle(T1, p):
    return simulate_centre_echo(T1, p.theta, p.T_a, p.T_b, p.TR, p.m)


def test_generic_parameters_match_bloch_simulation():
    f = mprage_f(1200.0, GENERIC)
    ref = _oracle(1200.0, GENERIC)
    assert f == pytest.approx(ref, rel=1e-10)


def random_params(rng):
    m = int(rng.integers(1, 129)) * 2
    T_b = rng.uniform(3.0, 10.0)
    T_a = rng.uniform(50.0, 1500.0)
    TR = T_a + T_b * (m - 1) + rng.uniform(0.0, 2000.0)
    return MprageParams(theta=np.deg2rad(rng.uniform(2.0, 30.0)), T_a=T_a, T_b=T_b, TR=TR, m=m, r1=1.0)


def test_random_draws_match_bloch_simulation():
    rng = np.random.default_rng(2024)
    worst = 0.0
    for _ in range(100):
        p = random_params(rng)
        T1 = rng.uniform(200.0, 4000.0)
        ref = _oracle(T1, p)
        worst = max(worst, abs(mprage_f(T1, p) - ref) / abs(ref))
    assert worst <= 1e-8


def test_short_T1_limit_is_full_recovery():
    assert mprage_f(1e-6, GENERIC) == pytest.approx(1.0, abs=1e-12)


def test_ninety_degree_readout():
    p = MprageParams(theta=np.pi / 2, T_a=900.0, T_b=5.1, TR=2000.0, m=4, r1=1.0)
    for T1 in (300.0, 1200.0, 3500.0):
        assert mprage_f(T1, p) == pytest.approx(1 - np.exp(-p.T_b / T1), abs=1e-12)


def test_vectorised_matches_scalar():
    T1 = np.array([300.0, 900.0, 2500.0])
    np.testing.assert_allclose(mprage_f(T1, GENERIC), [mprage_f(t, GENERIC) for t in T1], rtol=1e-15)


def test_parameter_validation():
    with pytest.raises(MprageError, match="even"):
        MprageParams(theta=0.1, T_a=100, T_b=5, TR=2000, m=3, r1=1.0)
    with pytest.raises(MprageError, match="negative"):
        MprageParams(theta=0.1, T_a=1900, T_b=5, TR=2000, m=100, r1=1.0)
    with pytest.raises(MprageError, match="r1"):
        MprageParams(theta=0.1, T_a=100, T_b=5, TR=2000, m=100, r1=0.0)
    with pytest.raises(MprageError, match="positive"):
        mprage_f(0.0, GENERIC)


def test_lookup_table_shape_and_branch():
    lut = build_lookup(GENERIC)
    assert len(lut) == 3801
    assert lut.T1[0] == 200.0 and lut.T1[-1] == 4000.0
    branch = lut.f[lut.lo : lut.hi + 1]
    d = np.diff(branch)
    assert np.all(d > 0) or np.all(d < 0)
    lo, hi = lut.branch
    assert lo <= 800.0 and hi >= 2000.0


def test_lookup_clamps_out_of_range():
    lut = build_lookup(GENERIC)
    f, out = lut.f_at(np.array([100.0, 1000.0, 5000.0]))
    np.testing.assert_array_equal(out, [True, False, True])
    assert f[0] == lut.f[0] and f[2] == lut.f[-1]
    T1, sat = lut.invert(np.array([10.0]))
    assert sat[0]


def test_ratio_one_gives_zero():
    lut = build_lookup(GENERIC)
    conv = concentration_from_ratio(1.0, 1200.0, GENERIC, lut)
    assert abs(float(conv.c)) < 1e-9
    assert conv.clamp_events == 0


def _ratio_for(c, T1_0, p):
    T1_c = 1000.0 / (1000.0 / T1_0 + p.r1 * c)
    return mprage_f(T1_c, p) / mprage_f(T1_0, p)


def test_round_trip():
    lut = build_lookup(GENERIC)
    conv = concentration_from_ratio(_ratio_for(0.5, 1200.0, GENERIC), 1200.0, GENERIC, lut)
    assert float(conv.c) == pytest.approx(0.5, abs=1e-3)


def test_round_trip_over_range_is_monotone():
    lut = build_lookup(GENERIC)
    c = np.linspace(0.0, 2.0, 41)
    ratio = np.array([_ratio_for(ci, 1200.0, GENERIC) for ci in c])
    back = concentration_from_ratio(ratio, 1200.0, GENERIC, lut).c
    np.testing.assert_allclose(back, c, atol=1e-3)
    assert np.all(np.diff(back) > 0)


def test_direct_arithmetic():
    assert concentration_from_T1(1000.0, 2000.0, 5.0) == pytest.approx(0.1, abs=1e-15)


def test_csf_concentration():
    lut = build_lookup(GENERIC)
    assert abs(float(csf_concentration(1.0, GENERIC, lut).c)) < 1e-9
    conv = csf_concentration(_ratio_for(0.3, CSF_T1_MS, GENERIC), GENERIC, lut)
    assert float(conv.c) == pytest.approx(0.3, abs=1e-3)
    sat = csf_concentration(np.array([1e3]), GENERIC, lut)
    assert sat.saturated[0] and sat.clamp_events >= 1


def test_negative_concentration_clamped():
    lut = build_lookup(GENERIC)
    conv = concentration_from_ratio(np.array([0.9, 1.1]), 1200.0, GENERIC, lut)
    assert np.all(conv.c >= 0)
    assert conv.negative_clamped.tolist() == [True, False]


def test_invalid_inputs():
    lut = build_lookup(GENERIC)
    with pytest.raises(ValueError):
        concentration_from_ratio(-1.0, 1200.0, GENERIC, lut)
    with pytest.raises(ValueError):
        concentration_from_ratio(1.0, 5000.0, GENERIC, lut)


def test_signal_change_percent():
    assert signal_change_percent(1.5, 1.0) == pytest.approx(50.0)
    assert signal_change_percent(1.0, 1.0) == 0.0
    rng = np.random.default_rng(0)
    S0 = rng.uniform(1, 2, (3, 4, 5))
    St = rng.uniform(1, 2, (3, 4, 5))
    grid = signal_change_percent(St, S0)
    assert grid[1, 2, 3] == pytest.approx(signal_change_percent(St[1, 2, 3], S0[1, 2, 3]), rel=1e-15)
    with pytest.raises(ValueError):
        signal_change_percent(1.0, 0.0)
