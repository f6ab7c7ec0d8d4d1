import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from oracles import bisection, pchip_reference
from sohgp.soc import (DegenerateMomentsError, GassingParams, InsufficientDataError,
                       NormalizationMoments, OcvCurve, OcvRangeError, SocSeries, bode_ocv,
                       coulomb_count, denormalize, fit_electrolyte_volume, init_concentration,
                       noise_variance, normalize, normalize_time)
from sohgp.telemetry import ChargeSegment

TABLE = OcvCurve(np.array([3.0, 4.0, 5.0, 6.0]), np.array([11.9, 12.30, 12.65, 13.2]))


class NoGassing:
    """Duck-typed gassing parameters with the side reaction switched off."""

    faraday = 96485.0

    def __init__(self, v_elec=1.0):
        self.v_elec = v_elec

    def current(self, temperature, voltage):
        return np.zeros(np.shape(temperature))


def segment(current, voltage=None, temperature=None, step=60.0):
    current = np.asarray(current, dtype=float)
    n = current.shape[0]
    voltage = np.full(n, 12.5) if voltage is None else np.asarray(voltage, dtype=float)
    temperature = np.full(n, 25.0) if temperature is None else np.asarray(temperature, dtype=float)
    return ChargeSegment("b", 0, 0, step * np.arange(n), current, voltage, temperature, 0.0)


def test_init_concentration_exact_table_hit():
    seg = segment([0.5, 0.02, 1.0], voltage=[12.6, 12.30, 12.9])
    c0, i_anchor, k = init_concentration(seg, TABLE)
    assert c0 == 4.0 and k == 1 and i_anchor == 0.02


def test_init_concentration_between_rows_matches_bisection():
    seg = segment([0.0], voltage=[12.5])
    c0, _, _ = init_concentration(seg, TABLE)
    ref = bisection(lambda c: pchip_reference(TABLE.concentration, TABLE.voltage, [c])[0], 3.0, 6.0, 12.5)
    assert c0 == pytest.approx(ref, abs=1e-12)
    # frozen oracle value
    assert c0 == pytest.approx(4.596877076110809, abs=1e-12)


def test_init_concentration_out_of_range():
    with pytest.raises(OcvRangeError):
        init_concentration(segment([0.0], voltage=[15.0]), TABLE)


def test_ocv_inverse_identity_on_nodes():
    for c, v in zip(TABLE.concentration, TABLE.voltage):
        assert TABLE.inverse(v) == c


def test_ocv_requires_monotone_table():
    with pytest.raises(ValueError):
        OcvCurve(np.array([1.0, 2.0, 3.0]), np.array([12.0, 11.9, 12.5]))


def test_default_ocv_fixture_is_bode_relation():
    ocv = OcvCurve.default()
    np.testing.assert_allclose(ocv.voltage, bode_ocv(ocv.concentration), atol=1e-9)


def test_coulomb_count_single_step_zero_gassing():
    soc = coulomb_count(segment([1.0, 1.0]), 4.0, NoGassing(v_elec=1.0), TABLE)
    assert soc.concentration[1] - 4.0 == pytest.approx(60 / 96485, rel=1e-12)
    assert 60 / 96485 == pytest.approx(6.219e-4, abs=1e-7)


def test_gassing_at_reference_point_equals_i_gas0():
    gas = GassingParams.default()
    assert gas.current(gas.t0, gas.v0_ref) == gas.i_gas0


def test_variance_increment_for_tenth_molar_step():
    amps = 0.1 * 96485 / 60.0
    soc = coulomb_count(segment([amps, amps]), 4.0, NoGassing(v_elec=1.0), OcvCurve(np.array([3.0, 9.0]), np.array([11.0, 14.0])))
    assert soc.concentration[1] - soc.concentration[0] == pytest.approx(0.1, rel=1e-12)
    assert soc.variance[1] == pytest.approx(1e-4, rel=1e-12)


def test_coulomb_count_clamps_and_flags():
    soc = coulomb_count(segment([-50.0] * 200), 3.1, NoGassing(v_elec=0.3), TABLE)
    assert soc.clamped
    assert soc.concentration.min() == 3.0


def test_noise_variance_examples():
    linear = OcvCurve(np.array([3.0, 5.0]), np.array([10.0, 14.0]))
    zero = SocSeries(np.array([4.0]), np.array([0.0]), 4.0, 12.0)
    assert noise_variance(zero, linear)[0] == 0.0225
    soc = SocSeries(np.array([4.0]), np.array([1e-4]), 4.0, 12.0)
    assert noise_variance(soc, linear)[0] == pytest.approx(0.0229, rel=1e-12)


def test_noise_variance_flat_slope():
    class Flat:
        def slope(self, c):
            return np.zeros(np.shape(c))

    soc = SocSeries(np.array([4.0, 4.1]), np.array([0.5, 3.0]), 4.0, 12.0)
    np.testing.assert_array_equal(noise_variance(soc, Flat()), [0.0225, 0.0225])


def bode_calibration(v_elec, n=50, noise=0.0, rng=None, c_ref=4.0):
    q = np.linspace(0.0, 30 * 3600.0, n)
    v = bode_ocv(c_ref + q / (96485.0 * v_elec))
    if noise:
        v = v + rng.normal(0.0, noise, size=n)
    return q, v


def test_fit_electrolyte_volume_exact():
    q, v = bode_calibration(1.2)
    v_elec, c_ref = fit_electrolyte_volume(q, v)
    assert v_elec == pytest.approx(1.2, abs=1e-6)
    assert c_ref == pytest.approx(4.0, abs=1e-6)


def test_fit_electrolyte_volume_monte_carlo():
    rng = np.random.default_rng(2024)
    errs = []
    for _ in range(100):
        q, v = bode_calibration(1.2, noise=0.005, rng=rng)
        errs.append(abs(fit_electrolyte_volume(q, v)[0] / 1.2 - 1))
    assert max(errs) < 0.05


def test_fit_electrolyte_volume_needs_three_points():
    with pytest.raises(InsufficientDataError):
        fit_electrolyte_volume([0.0, 1.0], [12.0, 12.1])


def moments():
    return NormalizationMoments({"T": 25.0, "I": 1.0, "c": 4.5}, {"T": 5.0, "I": 0.5, "c": 0.3})


def test_normalize_examples():
    m = moments()
    assert normalize(25.0, m, "T") == 0.0
    assert normalize_time(34_560_000) == 1.0
    unit = NormalizationMoments({"T": 0.0, "I": 0.0, "c": 0.0}, {"T": 1.0, "I": 1.0, "c": 1.0})
    assert normalize(2.0, unit, "I") == 2.0


def test_degenerate_moments():
    with pytest.raises(DegenerateMomentsError):
        NormalizationMoments.from_samples(np.full(5, 25.0), np.arange(5.0), np.arange(5.0))


@given(st.floats(-100, 100), st.sampled_from(["T", "I", "c"]))
def test_normalize_roundtrip(x, name):
    m = moments()
    assert denormalize(normalize(x, m, name), m, name) == pytest.approx(x, abs=1e-9)
    assert normalize(m.mean[name] + m.std[name], m, name) == pytest.approx(1.0)


def test_moments_json_roundtrip():
    m = NormalizationMoments.from_samples(np.arange(10.0), np.arange(10.0) + 1, np.linspace(4, 5, 10))
    assert NormalizationMoments.from_dict(m.to_dict()) == m


@settings(max_examples=100, deadline=None)
@given(st.lists(st.floats(0.0, 5.0), min_size=2, max_size=60), st.floats(0.2, 2.0))
def test_zero_gassing_conservation(current, v_elec):
    wide = OcvCurve(np.array([0.0, 100.0]), np.array([10.0, 20.0]))
    seg = segment(current)
    soc = coulomb_count(seg, 4.0, NoGassing(v_elec), wide)
    q = np.sum(np.asarray(current[:-1]) * 60.0)
    assert soc.concentration[-1] - 4.0 == pytest.approx(q / (96485.0 * v_elec), rel=1e-12, abs=1e-15)
